//! Building blocks shared by the extractor, predictor and acoustic model.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mat, Var};
use super::params::{normal, xavier, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, d_in, d_out));
        let bias = Some(store.add(format!("{name}.bias"), Array2::zeros((1, d_out))));
        Self { weight, bias }
    }

    pub fn without_bias(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, d_in, d_out));
        Self { weight, bias: None }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, d))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, d))),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, 1e-5);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Lookup table; rows are embeddings.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub len: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, len: usize, d: usize) -> Self {
        Self {
            table: store.add(format!("{name}.table"), normal(rng, len, d, 0.1)),
            len,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Var {
        debug_assert!(ids.iter().all(|&i| i < self.len));
        let t = g.param(store, self.table);
        g.gather_rows(t, ids)
    }
}

/// Multi-head scaled dot-product self-attention with an optional
/// row-major visibility mask (`visible[q * len + k]`).
#[derive(Clone, Debug)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    d_model: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize, heads: usize) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "d_model must divide into heads");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d_model, d_model),
            k: Linear::new(store, rng, &format!("{name}.k"), d_model, d_model),
            v: Linear::new(store, rng, &format!("{name}.v"), d_model, d_model),
            out: Linear::new(store, rng, &format!("{name}.out"), d_model, d_model),
            heads,
            d_model,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, visible: Option<&[bool]>) -> Var {
        self.forward_with_weights(g, store, x, visible).0
    }

    /// Also returns each head's attention-probability node.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        visible: Option<&[bool]>,
    ) -> (Var, Vec<Var>) {
        let dk = self.d_model / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let q = self.q.forward(g, store, x);
        let k = self.k.forward(g, store, x);
        let v = self.v.forward(g, store, x);
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dk, dk);
            let kh = g.slice_cols(k, h * dk, dk);
            let vh = g.slice_cols(v, h * dk, dk);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax_rows(scores, visible);
            probs.push(p);
            outs.push(g.matmul(p, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (self.out.forward(g, store, cat), probs)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize, d_ff: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), d_model, d_ff),
            down: Linear::new(store, rng, &format!("{name}.down"), d_ff, d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.relu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm residual block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
    dropout: f64,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        dropout: f64,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), d_model, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d_model, 4 * d_model),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, visible: Option<&[bool]>) -> Var {
        self.forward_traced(g, store, x, visible).0
    }

    /// Forward pass that also returns the attention probabilities per head.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        visible: Option<&[bool]>,
    ) -> (Var, Vec<Var>) {
        let h = self.ln1.forward(g, store, x);
        let (h, probs) = self.attn.forward_with_weights(g, store, h, visible);
        let h = g.dropout(h, self.dropout);
        let x = g.add(x, h);
        let h = self.ln2.forward(g, store, x);
        let h = self.ffn.forward(g, store, h);
        let h = g.dropout(h, self.dropout);
        (g.add(x, h), probs)
    }
}

/// Stack of blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl TransformerStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        layers: usize,
        d_model: usize,
        heads: usize,
        dropout: f64,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(store, rng, &format!("{name}.block{i}"), d_model, heads, dropout))
            .collect();
        Self {
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var, visible: Option<&[bool]>) -> Var {
        for b in &self.blocks {
            x = b.forward(g, store, x, visible);
        }
        self.norm.forward(g, store, x)
    }

    /// Like [`forward`](Self::forward), also collecting every block's
    /// per-head attention probabilities (block-major).
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        visible: Option<&[bool]>,
    ) -> (Var, Vec<Var>) {
        let mut all = Vec::new();
        for b in &self.blocks {
            let (y, probs) = b.forward_traced(g, store, x, visible);
            x = y;
            all.extend(probs);
        }
        (self.norm.forward(g, store, x), all)
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }
}

/// Gated recurrent unit; `forward` returns the final hidden state.
#[derive(Clone, Debug)]
pub struct Gru {
    input: Linear,
    hidden: Linear,
    width: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, width: usize) -> Self {
        Self {
            input: Linear::new(store, rng, &format!("{name}.input"), d_in, 3 * width),
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), width, 3 * width),
            width,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Var {
        let w = self.width;
        let steps = g.shape(seq).0;
        let xs = self.input.forward(g, store, seq);
        let mut h = g.input(Array2::zeros((1, w)));
        for t in 0..steps {
            let x = g.slice_rows(xs, t, 1);
            let hx = self.hidden.forward(g, store, h);
            let xr = g.slice_cols(x, 0, w);
            let hr = g.slice_cols(hx, 0, w);
            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let xz = g.slice_cols(x, w, w);
            let hz = g.slice_cols(hx, w, w);
            let z = g.add(xz, hz);
            let z = g.sigmoid(z);
            let xn = g.slice_cols(x, 2 * w, w);
            let hn = g.slice_cols(hx, 2 * w, w);
            let rn = g.mul(r, hn);
            let n = g.add(xn, rn);
            let n = g.tanh(n);
            // h' = (1 - z) * n + z * h
            let d = g.sub(h, n);
            let zd = g.mul(z, d);
            h = g.add(n, zd);
        }
        h
    }
}

/// 3×3 convolution with stride 2 and zero padding 1 over a feature map
/// stored as a `(height * width) × channels` matrix.
#[derive(Clone, Debug)]
pub struct Conv2d {
    kernel: Linear,
    c_in: usize,
}

/// Output side length of a stride-2, pad-1, 3-tap convolution.
pub fn conv_out_len(n: usize) -> usize {
    n.div_ceil(2)
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            kernel: Linear::new(store, rng, name, 9 * c_in, c_out),
            c_in,
        }
    }

    /// Returns the output map and its (height, width).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        height: usize,
        width: usize,
    ) -> (Var, usize, usize) {
        let c = self.c_in;
        debug_assert_eq!(g.shape(x), (height * width, c));
        let oh = conv_out_len(height);
        let ow = conv_out_len(width);
        let cols = 9 * c;
        let mut index = Vec::with_capacity(oh * ow * cols);
        for r in 0..oh {
            for q in 0..ow {
                for kh in 0..3 {
                    for kw in 0..3 {
                        let ih = (2 * r + kh) as isize - 1;
                        let iw = (2 * q + kw) as isize - 1;
                        let inside = ih >= 0 && iw >= 0 && (ih as usize) < height && (iw as usize) < width;
                        for ch in 0..c {
                            index.push(inside.then(|| (ih as usize * width + iw as usize) * c + ch));
                        }
                    }
                }
            }
        }
        let patches = g.gather_flat(x, oh * ow, cols, index);
        (self.kernel.forward(g, store, patches), oh, ow)
    }
}

/// Fixed sinusoidal position table (`len × d`).
pub fn sinusoid_table(len: usize, d: usize) -> Mat {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
