use crate::corpus::{ParagraphDocument, SentenceRecord};
use crate::error::{Error, Result};
use crate::style_extractor::StyleEmbedding;

/// The current sentence with `radius` neighbors on each side.
///
/// Missing neighbors at paragraph boundaries are kept in place as padded
/// slots (`None`), so `past` and `future` always hold exactly `radius`
/// entries. Padded slots are embedded as zero vectors downstream and stay
/// attendable.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindow {
    pub current: SentenceRecord,
    /// Chronological: `past[0]` is the sentence `radius` positions back.
    pub past: Vec<Option<SentenceRecord>>,
    pub future: Vec<Option<SentenceRecord>>,
    /// Aligned with `past`; zero vectors until filled by the caller.
    pub prev_styles: Vec<StyleEmbedding>,
    pub paragraph_len: usize,
}

impl ContextWindow {
    pub fn radius(&self) -> usize {
        self.past.len()
    }

    /// `true` for padded slots, past slots first then future slots.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.past.iter().chain(&self.future).map(Option::is_none).collect()
    }

    /// Sentence index of past slot `k` within the paragraph, if not padded.
    pub fn past_index(&self, k: usize) -> Option<usize> {
        self.past[k].as_ref().map(|s| s.index_in_paragraph)
    }

    /// Texts of all `2N+1` sentences in order; padded slots are empty.
    pub fn texts(&self) -> Vec<String> {
        let text = |s: &Option<SentenceRecord>| s.as_ref().map(|s| s.text.clone()).unwrap_or_default();
        let mut out: Vec<String> = self.past.iter().map(text).collect();
        out.push(self.current.text.clone());
        out.extend(self.future.iter().map(text));
        out
    }

    pub fn segment_index(&self) -> usize {
        self.current.index_in_paragraph
    }

    /// Sets a past slot's style. Padded slots must stay zero.
    pub fn set_prev_style(&mut self, k: usize, style: StyleEmbedding) -> Result<()> {
        if k >= self.past.len() {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: self.past.len(),
            });
        }
        if self.past[k].is_none() {
            return Err(Error::InvalidRecord {
                record: self.current.id.clone(),
                message: format!("past slot {k} is padding and keeps a zero style"),
            });
        }
        self.prev_styles[k] = style;
        Ok(())
    }
}

/// Window around sentence `index` of `doc` with radius `radius`; previous
/// styles start as zero vectors of length `d_style`.
pub fn build_context_window(
    doc: &ParagraphDocument,
    index: usize,
    radius: usize,
    d_style: usize,
) -> Result<ContextWindow> {
    let len = doc.sentences.len();
    if index >= len {
        return Err(Error::IndexOutOfRange { index, len });
    }
    let at = |i: isize| -> Option<SentenceRecord> {
        (i >= 0 && (i as usize) < len).then(|| doc.sentences[i as usize].clone())
    };
    let i = index as isize;
    let r = radius as isize;
    let past = (i - r..i).map(at).collect();
    let future = (i + 1..=i + r).map(at).collect();
    Ok(ContextWindow {
        current: doc.sentences[index].clone(),
        past,
        future,
        prev_styles: vec![StyleEmbedding::zeros(d_style); radius],
        paragraph_len: len,
    })
}
