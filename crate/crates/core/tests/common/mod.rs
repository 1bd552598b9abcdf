//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use styleflow::nn::ParamStore;
use styleflow::Config;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// A configuration small enough for a full three-stage run in seconds.
pub fn tiny_config() -> Config {
    let mut c = Config::toy();
    c.toy.paragraphs = 6;
    c.toy.sentences_per_paragraph = 4;
    c.extractor.conv_channels = vec![4, 4];
    c.extractor.gru_width = 8;
    c.extractor.d_style = 8;
    c.predictor.d_model = 8;
    c.predictor.heads = 2;
    c.acoustic.d_model = 8;
    c.acoustic.variance_hidden = 8;
    c.text.d_word = 8;
    c.train.stage_iterations = Some([6, 6, 4]);
    c.train.batch_size = 3;
    c.train.log_every = 1;
    c.train.checkpoint_every = 2;
    c.train.validation_fraction = 0.2;
    c
}

/// Central-difference check of `loss` w.r.t. sampled scalars of `store`.
/// Returns the worst relative error `|a - n| / max(|a|, |n|, 1e-6)` and
/// the number of checked scalars.
pub fn gradient_check(
    store: &mut ParamStore,
    analytic: &[Option<Array2<f64>>],
    rng: &mut ChaCha8Rng,
    per_tensor: usize,
    extra: usize,
    loss: &dyn Fn(&ParamStore) -> f64,
) -> (f64, usize) {
    let ids: Vec<_> = store.ids().collect();
    let mut picks = Vec::new();
    for &id in &ids {
        let n = store.value(id).len();
        for _ in 0..per_tensor {
            picks.push((id, rng.random_range(0..n)));
        }
    }
    let total: usize = ids.iter().map(|&id| store.value(id).len()).sum();
    for _ in 0..extra {
        let mut k = rng.random_range(0..total);
        for &id in &ids {
            let n = store.value(id).len();
            if k < n {
                picks.push((id, k));
                break;
            }
            k -= n;
        }
    }
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for &(id, flat) in &picks {
        let cols = store.value(id).ncols();
        let (r, c) = (flat / cols, flat % cols);
        let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[[r, c]]);
        let orig = store.value(id)[[r, c]];
        store.value_mut(id)[[r, c]] = orig + eps;
        let up = loss(store);
        store.value_mut(id)[[r, c]] = orig - eps;
        let down = loss(store);
        store.value_mut(id)[[r, c]] = orig;
        let n = (up - down) / (2.0 * eps);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    (worst, picks.len())
}
