use std::fmt;

use crate::error::{Error, Result};

/// Square visibility matrix: `visible(q, k)` is true iff query token `q`
/// may attend to key token `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    visibility: Vec<bool>,
}

impl AttentionMask {
    /// Every token sees every token.
    pub fn all_visible(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Empty("attention mask needs at least one token".into()));
        }
        Ok(Self {
            len,
            visibility: vec![true; len * len],
        })
    }

    /// Builds a mask from a row-major boolean matrix; every row must see at
    /// least one key.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let len = rows.len();
        if len == 0 {
            return Err(Error::Empty("attention mask needs at least one token".into()));
        }
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::shape("attention mask must be square"));
        }
        if let Some(q) = rows.iter().position(|r| !r.iter().any(|&v| v)) {
            return Err(Error::shape(format!("mask row {q} sees no key")));
        }
        Ok(Self {
            len,
            visibility: rows.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn visible(&self, q: usize, k: usize) -> bool {
        self.visibility[q * self.len + k]
    }

    /// Row-major flat view, as consumed by the attention layers.
    pub fn as_slice(&self) -> &[bool] {
        &self.visibility
    }

    pub fn rows(&self) -> Vec<Vec<bool>> {
        self.visibility.chunks(self.len).map(<[bool]>::to_vec).collect()
    }
}

impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.visibility.chunks(self.len) {
            let line: Vec<&str> = row.iter().map(|&v| if v { "1" } else { "0" }).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Mixture mask over `n_context` text-side tokens followed by `n_style`
/// speech-side tokens (the prediction slot last). Text-side tokens attend
/// only among themselves; speech-side tokens attend to every text-side
/// token, to earlier speech-side tokens and to themselves.
pub fn build_mixture_attention_mask(n_context: usize, n_style: usize) -> Result<AttentionMask> {
    if n_context == 0 || n_style == 0 {
        return Err(Error::Config(format!(
            "mixture mask needs positive token counts, got n_context={n_context}, n_style={n_style}"
        )));
    }
    let len = n_context + n_style;
    let mut visibility = vec![false; len * len];
    for q in 0..len {
        for k in 0..len {
            visibility[q * len + k] = if q < n_context { k < n_context } else { k <= q };
        }
    }
    Ok(AttentionMask { len, visibility })
}
