//! Context-aware style prediction.
//!
//! A sentence encoder turns each sentence of the context window into one
//! context token (its output at a leading CLS slot). A fusion encoder then
//! reads the sequence `C_{-N}..C_{N}, S_{-N}..S_{-1}, UNK` under the mixture
//! attention mask, and the UNK output, projected to the style width, is the
//! predicted style of the current sentence.

mod mask;

use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

pub use mask::{build_mixture_attention_mask, AttentionMask};

use crate::checkpoint;
use crate::config::{config_hash, PositionEncoding, PredictorConfig};
use crate::corpus::ContextWindow;
use crate::error::{Error, Result};
use crate::nn::layers::{sinusoid_table, Embedding, Linear, TransformerStack};
use crate::nn::params::normal;
use crate::nn::{Graph, ParamId, ParamStore, Var};
use crate::style_extractor::StyleEmbedding;
use crate::text_embedder::{TextEmbedder, WordEmbeddingSequence};

pub const KIND: &str = "style_predictor";

/// Category id of text-side (context) tokens.
pub const TEXT_SIDE: usize = 0;
/// Category id of speech-side tokens, including the prediction slot.
pub const SPEECH_SIDE: usize = 1;

/// Sentence-level summary vector (`d_model`).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextToken(Vec<f64>);

impl ContextToken {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("context token has non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Ids and mask of a fusion sequence, independent of token values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionLayout {
    pub category_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub mask: AttentionMask,
    pub n_context: usize,
}

impl FusionLayout {
    pub fn len(&self) -> usize {
        self.category_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.category_ids.is_empty()
    }

    /// Index of the prediction slot (always last).
    pub fn unk_index(&self) -> usize {
        self.len() - 1
    }
}

/// Lays out the fusion sequence for radius `radius`.
///
/// Context token at offset `o` and the style token of the same sentence
/// share position id `o + N`; the prediction slot takes the current
/// sentence's id `N`. Every token carries the same segment id, the
/// sentence's paragraph index clipped to `max_segment`.
pub fn fusion_layout(
    radius: usize,
    use_prev_styles: bool,
    mixture_mask: bool,
    segment_index: usize,
    max_segment: usize,
) -> Result<FusionLayout> {
    let n_context = 2 * radius + 1;
    let n_prev = if use_prev_styles { radius } else { 0 };
    let n_style = n_prev + 1;
    let len = n_context + n_style;
    let mut category_ids = vec![TEXT_SIDE; n_context];
    category_ids.resize(len, SPEECH_SIDE);
    let mut position_ids: Vec<usize> = (0..n_context).collect();
    position_ids.extend(0..n_prev);
    position_ids.push(radius);
    let segment_ids = vec![segment_index.min(max_segment); len];
    let mask = if mixture_mask {
        build_mixture_attention_mask(n_context, n_style)?
    } else {
        AttentionMask::all_visible(len)?
    };
    Ok(FusionLayout {
        category_ids,
        position_ids,
        segment_ids,
        mask,
        n_context,
    })
}

/// Fusion-encoder input: token values (`L × d_model`, before the
/// category/position/segment embeddings are added) plus the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionTokenSequence {
    pub tokens: Array2<f64>,
    pub layout: FusionLayout,
}

#[derive(Clone, Debug)]
enum Positions {
    Learned(Embedding),
    Sinusoidal(Array2<f64>),
}

impl Positions {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: PositionEncoding,
        len: usize,
        d: usize,
    ) -> Self {
        match kind {
            PositionEncoding::Learned => Self::Learned(Embedding::new(store, rng, name, len, d)),
            PositionEncoding::Sinusoidal => Self::Sinusoidal(sinusoid_table(len, d)),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Var {
        match self {
            Self::Learned(e) => e.forward(g, store, ids),
            Self::Sinusoidal(table) => {
                let rows = ids.iter().map(|&i| table.row(i)).collect::<Vec<_>>();
                g.input(ndarray::stack(ndarray::Axis(0), &rows).expect("equal rows"))
            }
        }
    }
}

#[derive(Clone, Debug)]
struct SentenceEncoder {
    cls: ParamId,
    positions: Positions,
    stack: TransformerStack,
}

#[derive(Clone, Debug)]
pub struct StylePredictor {
    pub config: PredictorConfig,
    pub d_word: usize,
    pub d_style: usize,
    pub store: ParamStore,
    word_proj: Linear,
    sentence: Option<SentenceEncoder>,
    style_proj: Linear,
    unk: ParamId,
    category: Embedding,
    positions: Positions,
    segment: Embedding,
    fusion: TransformerStack,
    out: Linear,
}

impl StylePredictor {
    pub fn new(config: &PredictorConfig, d_word: usize, d_style: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        let mut store = ParamStore::new();
        let word_proj = Linear::new(&mut store, rng, "pred.word_proj", d_word, d);
        let sentence = config.hierarchical.then(|| SentenceEncoder {
            cls: store.add("pred.sentence.cls", normal(rng, 1, d, 0.1)),
            positions: Positions::new(
                &mut store,
                rng,
                "pred.sentence.position",
                config.position_encoding,
                config.max_words + 1,
                d,
            ),
            stack: TransformerStack::new(
                &mut store,
                rng,
                "pred.sentence",
                config.sentence_layers,
                d,
                config.heads,
                config.dropout,
            ),
        });
        let style_proj = Linear::new(&mut store, rng, "pred.style_proj", d_style, d);
        let unk = store.add("pred.unk", normal(rng, 1, d, 0.1));
        let category = Embedding::new(&mut store, rng, "pred.category", 2, d);
        let positions = Positions::new(
            &mut store,
            rng,
            "pred.position",
            config.position_encoding,
            2 * config.context_radius + 1,
            d,
        );
        let segment = Embedding::new(&mut store, rng, "pred.segment", config.max_segment + 1, d);
        let fusion = TransformerStack::new(
            &mut store,
            rng,
            "pred.fusion",
            config.fusion_layers,
            d,
            config.heads,
            config.dropout,
        );
        let out = Linear::new(&mut store, rng, "pred.out", d, d_style);
        Self {
            config: config.clone(),
            d_word,
            d_style,
            store,
            word_proj,
            sentence,
            style_proj,
            unk,
            category,
            positions,
            segment,
            fusion,
            out,
        }
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn radius(&self) -> usize {
        self.config.context_radius
    }

    pub fn config_hash(&self) -> String {
        config_hash(&(&self.config, self.d_word, self.d_style))
    }

    pub fn layout(&self, segment_index: usize) -> Result<FusionLayout> {
        fusion_layout(
            self.radius(),
            self.config.use_prev_styles,
            self.config.mixture_mask,
            segment_index,
            self.config.max_segment,
        )
    }

    fn check_words(&self, words: &Array2<f64>) -> Result<()> {
        if words.ncols() != self.d_word && words.nrows() > 0 {
            return Err(Error::shape(format!(
                "word vectors have length {}, expected {}",
                words.ncols(),
                self.d_word
            )));
        }
        Ok(())
    }

    /// Context token (`1 × d_model`) of one sentence. With the hierarchy
    /// disabled this is a projection of the mean word vector instead.
    pub fn sentence_graph(&self, g: &mut Graph, words: &Array2<f64>) -> Result<Var> {
        self.check_words(words)?;
        let Some(enc) = &self.sentence else {
            let mean = if words.nrows() == 0 {
                Array2::zeros((1, self.d_word))
            } else {
                words
                    .mean_axis(ndarray::Axis(0))
                    .expect("rows")
                    .insert_axis(ndarray::Axis(0))
            };
            let x = g.input(mean);
            return Ok(self.word_proj.forward(g, &self.store, x));
        };
        let cls = g.param(&self.store, enc.cls);
        let x = if words.nrows() == 0 {
            cls
        } else {
            let w = g.input(words.to_owned());
            let w = self.word_proj.forward(g, &self.store, w);
            g.concat_rows(&[cls, w])
        };
        let ids: Vec<usize> = (0..=words.nrows()).map(|i| i.min(self.config.max_words)).collect();
        let pos = enc.positions.forward(g, &self.store, &ids);
        let x = g.add(x, pos);
        let h = enc.stack.forward(g, &self.store, x, None);
        Ok(g.slice_rows(h, 0, 1))
    }

    /// Stacks context tokens, projected previous styles and the UNK vector
    /// into the `L × d_model` value matrix.
    pub fn fusion_values_graph(&self, g: &mut Graph, context: &[Var], prev_styles: &[StyleEmbedding]) -> Result<Var> {
        let n = self.radius();
        if context.len() != 2 * n + 1 {
            return Err(Error::shape(format!(
                "expected {} context tokens, got {}",
                2 * n + 1,
                context.len()
            )));
        }
        let mut rows = context.to_vec();
        if self.config.use_prev_styles {
            if prev_styles.len() != n {
                return Err(Error::shape(format!(
                    "expected {n} previous styles, got {}",
                    prev_styles.len()
                )));
            }
            if n > 0 {
                let mut m = Array2::zeros((n, self.d_style));
                for (i, s) in prev_styles.iter().enumerate() {
                    if s.len() != self.d_style {
                        return Err(Error::shape(format!(
                            "previous style has length {}, expected {}",
                            s.len(),
                            self.d_style
                        )));
                    }
                    m.row_mut(i).assign(&ndarray::ArrayView1::from(s.values()));
                }
                let s = g.input(m);
                rows.push(self.style_proj.forward(g, &self.store, s));
            }
        }
        rows.push(g.param(&self.store, self.unk));
        Ok(g.concat_rows(&rows))
    }

    /// Adds category, position and segment embeddings and runs the fusion
    /// stack. Returns all `L` outputs and every head's attention weights.
    pub fn fusion_graph(&self, g: &mut Graph, values: Var, layout: &FusionLayout) -> Result<(Var, Vec<Var>)> {
        let (rows, cols) = g.shape(values);
        if rows != layout.len() || layout.mask.len() != rows || cols != self.d_model() {
            return Err(Error::shape(format!(
                "fusion input is {rows}×{cols}, layout has {} tokens and a {}×{} mask",
                layout.len(),
                layout.mask.len(),
                layout.mask.len()
            )));
        }
        if layout.segment_ids.iter().any(|&s| s > self.config.max_segment)
            || layout.position_ids.iter().any(|&p| p > 2 * self.radius())
        {
            return Err(Error::shape("fusion layout ids exceed the embedding tables"));
        }
        let cat = self.category.forward(g, &self.store, &layout.category_ids);
        let pos = self.positions.forward(g, &self.store, &layout.position_ids);
        let seg = self.segment.forward(g, &self.store, &layout.segment_ids);
        let x = g.add(values, cat);
        let x = g.add(x, pos);
        let x = g.add(x, seg);
        Ok(self
            .fusion
            .forward_traced(g, &self.store, x, Some(layout.mask.as_slice())))
    }

    /// Predicted style (`1 × d_style`) from pre-computed word vectors.
    pub fn predict_graph(
        &self,
        g: &mut Graph,
        words: &WordEmbeddingSequence,
        prev_styles: &[StyleEmbedding],
        segment_index: usize,
    ) -> Result<Var> {
        let context = words
            .sentences
            .iter()
            .map(|w| self.sentence_graph(g, w))
            .collect::<Result<Vec<_>>>()?;
        let values = self.fusion_values_graph(g, &context, prev_styles)?;
        let layout = self.layout(segment_index)?;
        let (h, _) = self.fusion_graph(g, values, &layout)?;
        let unk = g.slice_rows(h, layout.unk_index(), 1);
        Ok(self.out.forward(g, &self.store, unk))
    }

    pub fn encode_sentence(&self, words: &Array2<f64>) -> Result<ContextToken> {
        let mut g = Graph::new();
        let v = self.sentence_graph(&mut g, words)?;
        ContextToken::new(g.value(v).iter().copied().collect())
    }

    pub fn assemble_fusion_input(
        &self,
        context_tokens: &[ContextToken],
        prev_styles: &[StyleEmbedding],
        segment_index: usize,
        paragraph_len: usize,
    ) -> Result<FusionTokenSequence> {
        if segment_index >= paragraph_len {
            return Err(Error::IndexOutOfRange {
                index: segment_index,
                len: paragraph_len,
            });
        }
        if let Some(t) = context_tokens.iter().find(|t| t.len() != self.d_model()) {
            return Err(Error::shape(format!(
                "context token has length {}, expected {}",
                t.len(),
                self.d_model()
            )));
        }
        let mut g = Graph::new();
        let context: Vec<Var> = context_tokens.iter().map(|t| g.row(t.values())).collect();
        let values = self.fusion_values_graph(&mut g, &context, prev_styles)?;
        Ok(FusionTokenSequence {
            tokens: g.value(values).clone(),
            layout: self.layout(segment_index)?,
        })
    }

    /// All `L × d_model` fusion outputs.
    pub fn encode_fusion(&self, seq: &FusionTokenSequence) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let x = g.input(seq.tokens.clone());
        let (h, _) = self.fusion_graph(&mut g, x, &seq.layout)?;
        Ok(g.value(h).clone())
    }

    /// Attention weights of every fusion block and head (`L × L` each).
    pub fn fusion_attention(&self, seq: &FusionTokenSequence) -> Result<Vec<Array2<f64>>> {
        let mut g = Graph::new();
        let x = g.input(seq.tokens.clone());
        let (_, probs) = self.fusion_graph(&mut g, x, &seq.layout)?;
        Ok(probs.iter().map(|&p| g.value(p).clone()).collect())
    }

    /// Projects a fusion output row (the UNK slot) to the style width.
    pub fn project_output(&self, unk_output: &[f64]) -> Result<StyleEmbedding> {
        if unk_output.len() != self.d_model() {
            return Err(Error::shape("fusion output row has the wrong width"));
        }
        let mut g = Graph::new();
        let x = g.row(unk_output);
        let y = self.out.forward(&mut g, &self.store, x);
        StyleEmbedding::new(g.value(y).iter().copied().collect())
    }

    pub fn predict_from_embeddings(
        &self,
        words: &WordEmbeddingSequence,
        prev_styles: &[StyleEmbedding],
        segment_index: usize,
    ) -> Result<StyleEmbedding> {
        let mut g = Graph::new();
        let y = self.predict_graph(&mut g, words, prev_styles, segment_index)?;
        StyleEmbedding::new(g.value(y).iter().copied().collect())
    }

    pub fn predict_style(&self, window: &ContextWindow, embedder: &dyn TextEmbedder) -> Result<StyleEmbedding> {
        if window.radius() != self.radius() {
            return Err(Error::shape(format!(
                "window radius {} does not match predictor radius {}",
                window.radius(),
                self.radius()
            )));
        }
        let words = embedder.embed_context(&window.texts(), window.radius())?;
        self.predict_from_embeddings(&words, &window.prev_styles, window.segment_index())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, KIND, &self.config_hash(), &self.store)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let hash = self.config_hash();
        checkpoint::load_into(path, KIND, &hash, &mut self.store)
    }
}
