//! Utterance-level style embeddings from mel features: a convolutional
//! reference encoder with a recurrent summary, followed by multi-head
//! attention over a learned bank of style tokens.

use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{config_hash, ExtractorConfig};
use crate::corpus::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Gru, Linear};
use crate::nn::params::normal;
use crate::nn::{Graph, ParamId, ParamStore, Var};

/// Fixed-length style vector of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEmbedding(Vec<f64>);

impl StyleEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("style embedding has non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
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

    pub fn as_row(&self) -> Array2<f64> {
        Array2::from_shape_vec((1, self.0.len()), self.0.clone()).expect("row")
    }

    pub fn distance(&self, other: &StyleEmbedding) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Style tokens and the attention projections that read them.
#[derive(Clone, Debug)]
pub struct StyleTokenBank {
    pub tokens: ParamId,
    query: Linear,
    key: Linear,
    value: Linear,
    pub heads: usize,
    pub n_tokens: usize,
}

pub const KIND: &str = "style_extractor";

#[derive(Clone, Debug)]
pub struct StyleExtractor {
    pub config: ExtractorConfig,
    pub n_mels: usize,
    pub store: ParamStore,
    convs: Vec<Conv2d>,
    gru: Gru,
    pub bank: StyleTokenBank,
}

impl StyleExtractor {
    pub fn new(config: &ExtractorConfig, n_mels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let mut c_in = 1;
        let mut width = n_mels;
        let mut convs = Vec::new();
        for (i, &c) in config.conv_channels.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, rng, &format!("ref.conv{i}"), c_in, c));
            c_in = c;
            width = crate::nn::layers::conv_out_len(width);
        }
        let gru = Gru::new(&mut store, rng, "ref.gru", c_in * width, config.gru_width);
        let d_token = config.d_style / config.heads;
        let tokens = store.add("gst.tokens", normal(rng, config.n_tokens, d_token, 0.5));
        let bank = StyleTokenBank {
            tokens,
            query: Linear::without_bias(&mut store, rng, "gst.query", config.gru_width, config.d_style),
            key: Linear::without_bias(&mut store, rng, "gst.key", d_token, config.d_style),
            value: Linear::without_bias(&mut store, rng, "gst.value", d_token, config.d_style),
            heads: config.heads,
            n_tokens: config.n_tokens,
        };
        Self {
            config: config.clone(),
            n_mels,
            store,
            convs,
            gru,
            bank,
        }
    }

    pub fn d_style(&self) -> usize {
        self.config.d_style
    }

    pub fn d_ref(&self) -> usize {
        self.config.gru_width
    }

    pub fn config_hash(&self) -> String {
        config_hash(&(&self.config, self.n_mels))
    }

    fn check_mel(&self, mel: &Array2<f64>) -> Result<()> {
        if mel.nrows() == 0 {
            return Err(Error::Empty("reference encoder needs at least one frame".into()));
        }
        if mel.ncols() != self.n_mels {
            return Err(Error::shape(format!(
                "expected {} mel bins, got {}",
                self.n_mels,
                mel.ncols()
            )));
        }
        Ok(())
    }

    /// Reference vector (`1 × d_ref`) on the graph.
    pub fn reference_graph(&self, g: &mut Graph, mel: &Array2<f64>) -> Result<Var> {
        self.check_mel(mel)?;
        let (mut h, mut w) = mel.dim();
        let flat = mel.to_shape((h * w, 1)).expect("contiguous").to_owned();
        let mut x = g.input(flat);
        let mut channels = 1;
        for conv in &self.convs {
            let (y, oh, ow) = conv.forward(g, &self.store, x, h, w);
            x = g.relu(y);
            h = oh;
            w = ow;
            channels = g.shape(x).1;
        }
        // (h*w) × c  ->  h × (w*c): one row per (downsampled) time step.
        let index = (0..h * w * channels).map(Some).collect();
        let seq = g.gather_flat(x, h, w * channels, index);
        Ok(self.gru.forward(g, &self.store, seq))
    }

    /// Style embedding (`1 × d_style`) and the per-head attention weights
    /// (`1 × n_tokens` each) for a reference vector.
    pub fn attend_graph(&self, g: &mut Graph, reference: Var) -> (Var, Vec<Var>) {
        let b = &self.bank;
        let heads = b.heads;
        let dh = self.config.d_style / heads;
        let tokens = g.param(&self.store, b.tokens);
        let squashed = g.tanh(tokens);
        let q = b.query.forward(g, &self.store, reference);
        let k = b.key.forward(g, &self.store, squashed);
        let v = b.value.forward(g, &self.store, squashed);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let p = g.softmax_rows(s, None);
            weights.push(p);
            outs.push(g.matmul(p, vh));
        }
        let out = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (out, weights)
    }

    pub fn style_graph(&self, g: &mut Graph, mel: &Array2<f64>) -> Result<Var> {
        let r = self.reference_graph(g, mel)?;
        Ok(self.attend_graph(g, r).0)
    }

    pub fn encode_reference(&self, mel: &MelSpectrogram) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let r = self.reference_graph(&mut g, mel.values())?;
        Ok(g.value(r).iter().copied().collect())
    }

    /// Returns the embedding and each head's attention weights.
    pub fn attend_style_tokens(&self, reference: &[f64]) -> Result<(StyleEmbedding, Vec<Vec<f64>>)> {
        if reference.len() != self.d_ref() {
            return Err(Error::shape(format!(
                "reference vector has length {}, expected {}",
                reference.len(),
                self.d_ref()
            )));
        }
        let mut g = Graph::new();
        let r = g.row(reference);
        let (out, weights) = self.attend_graph(&mut g, r);
        let style = StyleEmbedding::new(g.value(out).iter().copied().collect())?;
        let weights = weights.iter().map(|&w| g.value(w).iter().copied().collect()).collect();
        Ok((style, weights))
    }

    pub fn extract_style(&self, mel: &MelSpectrogram) -> Result<StyleEmbedding> {
        let mut g = Graph::new();
        let s = self.style_graph(&mut g, mel.values())?;
        StyleEmbedding::new(g.value(s).iter().copied().collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, KIND, &self.config_hash(), &self.store)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let hash = self.config_hash();
        checkpoint::load_into(path, KIND, &hash, &mut self.store)
    }
}
