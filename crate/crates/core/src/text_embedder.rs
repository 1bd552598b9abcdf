//! Word-level embeddings for a window of `2N+1` sentences.
//!
//! The sentences are embedded jointly (so context can leak across sentence
//! boundaries) and then split back per sentence. A padded sentence is the
//! empty string and comes back as a single all-zero vector.
//!
//! Two backends exist:
//!
//! * [`OfflineEmbedder`]: deterministic, dependency-free. Tokens are
//!   whitespace-separated; a token containing non-ASCII letters is split
//!   further into single characters (for scripts written without spaces).
//!   Each token maps to a fixed pseudo-random vector seeded by the SHA-256
//!   of its text, and each vector is then mixed with the mean of its
//!   immediate neighbors in the concatenated sequence.
//! * [`ExternalEmbedder`]: runs a user-supplied command that wraps a
//!   pretrained language model. The command receives
//!   `{"sentences": [...]}` on stdin and must print
//!   `{"tokens": [{"sentence": s, "word": w, "vector": [...]}, ...]}` with
//!   one entry per sub-word token; sub-tokens of a word are pooled.

use std::io::Write;
use std::process::{Command, Stdio};

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{SubwordPooling, TextBackend, TextConfig};
use crate::error::{Error, Result};

/// Per-sentence word vectors, `l_i × d_word` each.
#[derive(Clone, Debug, PartialEq)]
pub struct WordEmbeddingSequence {
    pub sentences: Vec<Array2<f64>>,
}

impl WordEmbeddingSequence {
    pub fn word_counts(&self) -> Vec<usize> {
        self.sentences.iter().map(|s| s.nrows()).collect()
    }
}

pub trait TextEmbedder: Send + Sync {
    fn d_word(&self) -> usize;

    /// Embeds exactly `2 * radius + 1` sentences.
    fn embed_context(&self, sentences: &[String], radius: usize) -> Result<WordEmbeddingSequence>;
}

fn check_len(sentences: &[String], radius: usize) -> Result<()> {
    if sentences.len() != 2 * radius + 1 {
        return Err(Error::shape(format!(
            "expected {} sentences for radius {radius}, got {}",
            2 * radius + 1,
            sentences.len()
        )));
    }
    Ok(())
}

/// Whitespace tokenization with a per-character fallback for tokens that
/// contain non-ASCII letters.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    for tok in sentence.split_whitespace() {
        if tok.chars().any(|c| !c.is_ascii() && c.is_alphabetic()) {
            out.extend(tok.chars().map(String::from));
        } else {
            out.push(tok.to_string());
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct OfflineEmbedder {
    d_word: usize,
    mixing: f64,
}

impl OfflineEmbedder {
    pub fn new(d_word: usize, mixing: f64) -> Self {
        Self { d_word, mixing }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
        use rand::Rng;
        (0..self.d_word).map(|_| rng.sample(dist)).collect()
    }
}

impl TextEmbedder for OfflineEmbedder {
    fn d_word(&self) -> usize {
        self.d_word
    }

    fn embed_context(&self, sentences: &[String], radius: usize) -> Result<WordEmbeddingSequence> {
        check_len(sentences, radius)?;
        let tokens: Vec<Vec<String>> = sentences.iter().map(|s| tokenize(s)).collect();
        let flat: Vec<Vec<f64>> = tokens.iter().flatten().map(|t| self.token_vector(t)).collect();
        let n = flat.len();
        let mixed: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let neighbors: Vec<&Vec<f64>> = [j.checked_sub(1), (j + 1 < n).then_some(j + 1)]
                    .into_iter()
                    .flatten()
                    .map(|k| &flat[k])
                    .collect();
                let mut v = flat[j].clone();
                if !neighbors.is_empty() {
                    let k = self.mixing / neighbors.len() as f64;
                    for nb in neighbors {
                        for (o, x) in v.iter_mut().zip(nb) {
                            *o += k * x;
                        }
                    }
                }
                v
            })
            .collect();
        let mut start = 0;
        let mut out = Vec::with_capacity(sentences.len());
        for toks in &tokens {
            if toks.is_empty() {
                out.push(Array2::zeros((1, self.d_word)));
                continue;
            }
            let rows: Vec<f64> = mixed[start..start + toks.len()].iter().flatten().copied().collect();
            out.push(Array2::from_shape_vec((toks.len(), self.d_word), rows).expect("row-major"));
            start += toks.len();
        }
        Ok(WordEmbeddingSequence { sentences: out })
    }
}

#[derive(Serialize)]
struct AdapterRequest<'a> {
    sentences: &'a [String],
    model_dir: Option<&'a str>,
}

#[derive(Deserialize)]
struct AdapterToken {
    sentence: usize,
    word: usize,
    vector: Vec<f64>,
}

#[derive(Deserialize)]
struct AdapterResponse {
    tokens: Vec<AdapterToken>,
}

/// Adapter around an external pretrained language model process.
#[derive(Clone, Debug)]
pub struct ExternalEmbedder {
    command: String,
    model_dir: Option<String>,
    pooling: SubwordPooling,
    d_word: usize,
}

impl ExternalEmbedder {
    pub fn new(command: String, model_dir: Option<String>, pooling: SubwordPooling, d_word: usize) -> Self {
        Self {
            command,
            model_dir,
            pooling,
            d_word,
        }
    }

    fn pool(&self, n_sentences: usize, tokens: Vec<AdapterToken>) -> Result<WordEmbeddingSequence> {
        // (sentence, word) -> (sum, count)
        let mut words: Vec<Vec<Option<(Vec<f64>, usize)>>> = vec![Vec::new(); n_sentences];
        for t in tokens {
            if t.vector.len() != self.d_word {
                return Err(Error::Backend(format!(
                    "token vector has length {}, expected {}",
                    t.vector.len(),
                    self.d_word
                )));
            }
            let sentence = words
                .get_mut(t.sentence)
                .ok_or_else(|| Error::Backend(format!("token refers to sentence {}", t.sentence)))?;
            if sentence.len() <= t.word {
                sentence.resize(t.word + 1, None);
            }
            match (&mut sentence[t.word], self.pooling) {
                (slot @ None, _) => *slot = Some((t.vector, 1)),
                (Some((sum, n)), SubwordPooling::Mean) => {
                    sum.iter_mut().zip(&t.vector).for_each(|(s, v)| *s += v);
                    *n += 1;
                }
                (Some(_), SubwordPooling::First) => {}
            }
        }
        let mut out = Vec::with_capacity(n_sentences);
        for (s, sentence) in words.into_iter().enumerate() {
            if sentence.is_empty() {
                out.push(Array2::zeros((1, self.d_word)));
                continue;
            }
            let mut m = Array2::zeros((sentence.len(), self.d_word));
            for (w, slot) in sentence.into_iter().enumerate() {
                let (sum, n) = slot.ok_or_else(|| Error::Backend(format!("sentence {s} is missing word {w}")))?;
                for (c, v) in sum.into_iter().enumerate() {
                    m[[w, c]] = v / n as f64;
                }
            }
            out.push(m);
        }
        Ok(WordEmbeddingSequence { sentences: out })
    }
}

impl TextEmbedder for ExternalEmbedder {
    fn d_word(&self) -> usize {
        self.d_word
    }

    fn embed_context(&self, sentences: &[String], radius: usize) -> Result<WordEmbeddingSequence> {
        check_len(sentences, radius)?;
        let mut child = Command::new(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start `{}`: {e}", self.command)))?;
        let request = serde_json::to_vec(&AdapterRequest {
            sentences,
            model_dir: self.model_dir.as_deref(),
        })?;
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(&request)
            .map_err(|e| Error::Backend(format!("writing request: {e}")))?;
        let output = child
            .wait_with_output()
            .map_err(|e| Error::Backend(format!("waiting for `{}`: {e}", self.command)))?;
        if !output.status.success() {
            return Err(Error::Backend(format!(
                "`{}` exited with {}",
                self.command, output.status
            )));
        }
        let response: AdapterResponse =
            serde_json::from_slice(&output.stdout).map_err(|e| Error::Backend(format!("bad adapter response: {e}")))?;
        self.pool(sentences.len(), response.tokens)
    }
}

pub fn embedder_from_config(cfg: &TextConfig) -> Result<Box<dyn TextEmbedder>> {
    match cfg.backend {
        TextBackend::Offline => Ok(Box::new(OfflineEmbedder::new(cfg.d_word, cfg.mixing))),
        TextBackend::External => {
            let command = cfg
                .command
                .clone()
                .ok_or_else(|| Error::Backend("external backend needs text.command".into()))?;
            Ok(Box::new(ExternalEmbedder::new(
                command,
                cfg.model_dir.clone(),
                cfg.pooling,
                cfg.d_word,
            )))
        }
    }
}
