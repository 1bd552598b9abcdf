//! Phoneme-to-mel model in the FastSpeech 2 mould: a transformer phoneme
//! encoder, the style broadcast-added to every phoneme state, a variance
//! adaptor (log-duration, pitch and energy per phoneme, the latter two fed
//! back through quantized embeddings), a length regulator and a
//! transformer mel decoder.

use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{config_hash, AcousticConfig, FeatureConfig, Normalization};
use crate::corpus::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::layers::{sinusoid_table, Embedding, LayerNorm, Linear, TransformerStack};
use crate::nn::{Graph, ParamStore, Var};
use crate::style_extractor::StyleEmbedding;

pub const KIND: &str = "acoustic_model";

/// Normalized pitch and energy are quantized over `[-RANGE, RANGE]`.
const QUANT_RANGE: f64 = 3.0;

/// Per-phoneme variance values. Pitch and energy are stored normalized
/// (`(x - mean) / std`); unvoiced phonemes have pitch 0.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceTargets {
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

impl VarianceTargets {
    /// Derives targets from frame-level features: pitch is the mean F0 over
    /// a phoneme's voiced frames, energy the mean log-mel value over its
    /// frames.
    pub fn from_features(
        durations: &[usize],
        mel: &MelSpectrogram,
        f0: Option<&[f64]>,
        pitch_norm: Normalization,
        energy_norm: Normalization,
    ) -> Result<Self> {
        let total: usize = durations.iter().sum();
        if total != mel.frames() {
            return Err(Error::shape(format!(
                "durations sum to {total} but the features have {} frames",
                mel.frames()
            )));
        }
        if let Some(f0) = f0 {
            if f0.len() != total {
                return Err(Error::shape(format!("F0 has {} frames, expected {total}", f0.len())));
            }
        }
        let mut pitch = Vec::with_capacity(durations.len());
        let mut energy = Vec::with_capacity(durations.len());
        let mut start = 0;
        for &d in durations {
            let frames = start..start + d;
            let voiced: Vec<f64> = f0
                .map(|f| f[frames.clone()].iter().copied().filter(|&v| v > 0.0).collect())
                .unwrap_or_default();
            pitch.push(if voiced.is_empty() {
                0.0
            } else {
                (voiced.iter().sum::<f64>() / voiced.len() as f64 - pitch_norm.mean) / pitch_norm.std
            });
            energy.push(if d == 0 {
                0.0
            } else {
                let block = mel.values().slice(ndarray::s![frames, ..]);
                (block.mean().expect("non-empty") - energy_norm.mean) / energy_norm.std
            });
            start += d;
        }
        Ok(Self {
            durations: durations.to_vec(),
            pitch,
            energy,
        })
    }

    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    fn check(&self, phonemes: usize) -> Result<()> {
        if self.durations.len() != phonemes || self.pitch.len() != phonemes || self.energy.len() != phonemes {
            return Err(Error::shape(format!(
                "variance targets cover {}/{}/{} phonemes, expected {phonemes}",
                self.durations.len(),
                self.pitch.len(),
                self.energy.len()
            )));
        }
        Ok(())
    }
}

/// Bin of a normalized value among `bins` equal cells over the
/// quantization range; out-of-range values fall into the end cells.
pub fn quantize(value: f64, bins: usize) -> usize {
    let t = (value + QUANT_RANGE) / (2.0 * QUANT_RANGE);
    ((t * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Frame count from a predicted log-duration: `exp(x) - 1`, rounded half
/// up, at least 1.
pub fn frames_from_log_duration(x: f64) -> usize {
    let d = (x.exp() - 1.0 + 0.5).floor();
    if d.is_finite() && d >= 1.0 {
        d as usize
    } else {
        1
    }
}

/// Row index that repeats row `p` `durations[p]` times.
pub fn regulate_index(durations: &[usize]) -> Result<Vec<usize>> {
    let index: Vec<usize> = durations
        .iter()
        .enumerate()
        .flat_map(|(p, &d)| std::iter::repeat_n(p, d))
        .collect();
    if index.is_empty() {
        return Err(Error::Empty("total duration is zero".into()));
    }
    Ok(index)
}

/// Repeats each state row for its duration and concatenates the result.
pub fn length_regulate(states: &Array2<f64>, durations: &[usize]) -> Result<Array2<f64>> {
    if durations.len() != states.nrows() {
        return Err(Error::shape(format!(
            "{} durations for {} states",
            durations.len(),
            states.nrows()
        )));
    }
    let index = regulate_index(durations)?;
    Ok(states.select(ndarray::Axis(0), &index))
}

#[derive(Clone, Debug)]
struct VariancePredictor {
    hidden: Linear,
    norm: LayerNorm,
    out: Linear,
}

impl VariancePredictor {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), d, hidden),
            norm: LayerNorm::new(store, &format!("{name}.norm"), hidden),
            out: Linear::new(store, rng, &format!("{name}.out"), hidden, 1),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, dropout: f64) -> Var {
        let h = self.hidden.forward(g, store, x);
        let h = g.relu(h);
        let h = self.norm.forward(g, store, h);
        let h = g.dropout(h, dropout);
        self.out.forward(g, store, h)
    }
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct AcousticOutputs {
    /// `frames × n_mels`.
    pub mel: Var,
    /// `phonemes × 1`, predicted `ln(d + 1)`.
    pub log_duration: Var,
    pub pitch: Var,
    pub energy: Var,
    /// Durations used by the length regulator.
    pub durations: Vec<usize>,
}

/// Loss terms of a teacher-forced pass; `total` is their unweighted sum.
#[derive(Clone, Copy, Debug)]
pub struct AcousticLoss {
    pub total: Var,
    pub mel: Var,
    pub duration: Var,
    pub pitch: Var,
    pub energy: Var,
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub config: AcousticConfig,
    pub n_mels: usize,
    pub d_style: usize,
    pub store: ParamStore,
    phoneme: Embedding,
    encoder: TransformerStack,
    style_proj: Linear,
    duration: VariancePredictor,
    pitch: VariancePredictor,
    energy: VariancePredictor,
    pitch_embedding: Embedding,
    energy_embedding: Embedding,
    decoder: TransformerStack,
    mel_out: Linear,
}

impl AcousticModel {
    /// `config.n_phonemes` must already hold the inventory size. The mel
    /// output bias starts at the middle of the feature range.
    pub fn new(
        config: &AcousticConfig,
        features: &FeatureConfig,
        d_style: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.n_phonemes == 0 {
            return Err(Error::Config("acoustic.n_phonemes is unset".into()));
        }
        let d = config.d_model;
        let mut store = ParamStore::new();
        let phoneme = Embedding::new(&mut store, rng, "am.phoneme", config.n_phonemes, d);
        let encoder = TransformerStack::new(
            &mut store,
            rng,
            "am.encoder",
            config.encoder_layers,
            d,
            config.heads,
            config.dropout,
        );
        let style_proj = Linear::new(&mut store, rng, "am.style_proj", d_style, d);
        let duration = VariancePredictor::new(&mut store, rng, "am.duration", d, config.variance_hidden);
        let pitch = VariancePredictor::new(&mut store, rng, "am.pitch", d, config.variance_hidden);
        let energy = VariancePredictor::new(&mut store, rng, "am.energy", d, config.variance_hidden);
        let pitch_embedding = Embedding::new(&mut store, rng, "am.pitch_embedding", config.pitch_bins, d);
        let energy_embedding = Embedding::new(&mut store, rng, "am.energy_embedding", config.energy_bins, d);
        let decoder = TransformerStack::new(
            &mut store,
            rng,
            "am.decoder",
            config.decoder_layers,
            d,
            config.heads,
            config.dropout,
        );
        let mel_out = Linear::new(&mut store, rng, "am.mel_out", d, features.n_mels);
        let mid = 0.5 * (features.mel_min + features.mel_max);
        store.value_mut(mel_out.bias.expect("has bias")).fill(mid);
        Ok(Self {
            config: config.clone(),
            n_mels: features.n_mels,
            d_style,
            store,
            phoneme,
            encoder,
            style_proj,
            duration,
            pitch,
            energy,
            pitch_embedding,
            energy_embedding,
            decoder,
            mel_out,
        })
    }

    pub fn config_hash(&self) -> String {
        config_hash(&(&self.config, self.n_mels, self.d_style))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Empty("phoneme sequence is empty".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.n_phonemes) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: self.config.n_phonemes,
            });
        }
        Ok(())
    }

    fn with_positions(&self, g: &mut Graph, x: Var) -> Var {
        let (len, d) = g.shape(x);
        let pos = g.input(sinusoid_table(len, d));
        g.add(x, pos)
    }

    /// Phoneme encoder output (`phonemes × d_model`).
    pub fn encode_graph(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        let x = self.phoneme.forward(g, &self.store, ids);
        let x = self.with_positions(g, x);
        Ok(self.encoder.forward(g, &self.store, x, None))
    }

    /// Adds the projected style (`1 × d_style`) to every phoneme state.
    pub fn apply_style_graph(&self, g: &mut Graph, states: Var, style: Var) -> Result<Var> {
        if g.shape(style) != (1, self.d_style) {
            return Err(Error::shape(format!(
                "style is {:?}, expected (1, {})",
                g.shape(style),
                self.d_style
            )));
        }
        let s = self.style_proj.forward(g, &self.store, style);
        Ok(g.add_row(states, s))
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        ids: &[usize],
        style: Var,
        targets: Option<&VarianceTargets>,
    ) -> Result<AcousticOutputs> {
        if let Some(t) = targets {
            t.check(ids.len())?;
        }
        let dropout = self.config.dropout;
        let h = self.encode_graph(g, ids)?;
        let h = self.apply_style_graph(g, h, style)?;
        let log_duration = self.duration.forward(g, &self.store, h, dropout);
        let pitch = self.pitch.forward(g, &self.store, h, dropout);
        let energy = self.energy.forward(g, &self.store, h, dropout);
        let (durations, pitch_used, energy_used) = match targets {
            Some(t) => (t.durations.clone(), t.pitch.clone(), t.energy.clone()),
            None => (
                g.value(log_duration)
                    .iter()
                    .map(|&x| frames_from_log_duration(x))
                    .collect(),
                g.value(pitch).iter().copied().collect(),
                g.value(energy).iter().copied().collect(),
            ),
        };
        let pitch_ids: Vec<usize> = pitch_used
            .iter()
            .map(|&v| quantize(v, self.config.pitch_bins))
            .collect();
        let energy_ids: Vec<usize> = energy_used
            .iter()
            .map(|&v| quantize(v, self.config.energy_bins))
            .collect();
        let pe = self.pitch_embedding.forward(g, &self.store, &pitch_ids);
        let ee = self.energy_embedding.forward(g, &self.store, &energy_ids);
        let h = g.add(h, pe);
        let h = g.add(h, ee);
        let index = regulate_index(&durations)?;
        let frames = g.gather_rows(h, &index);
        let frames = self.with_positions(g, frames);
        let y = self.decoder.forward(g, &self.store, frames, None);
        let mel = self.mel_out.forward(g, &self.store, y);
        Ok(AcousticOutputs {
            mel,
            log_duration,
            pitch,
            energy,
            durations,
        })
    }

    /// Teacher-forced loss: MAE on mel plus MSE on log-duration, pitch and
    /// energy, equally weighted.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        ids: &[usize],
        style: Var,
        targets: &VarianceTargets,
        mel: &MelSpectrogram,
    ) -> Result<AcousticLoss> {
        let out = self.forward_graph(g, ids, style, Some(targets))?;
        if g.shape(out.mel) != mel.values().dim() {
            return Err(Error::shape(format!(
                "target features are {:?}, model produced {:?}",
                mel.values().dim(),
                g.shape(out.mel)
            )));
        }
        let column = |v: Vec<f64>| Array2::from_shape_vec((v.len(), 1), v).expect("column");
        let target_mel = g.input(mel.values().clone());
        let diff = g.sub(out.mel, target_mel);
        let diff = g.abs(diff);
        let mel_loss = g.mean(diff);
        let mse = |g: &mut Graph, pred: Var, target: Vec<f64>| {
            let t = g.input(column(target));
            let d = g.sub(pred, t);
            let d = g.square(d);
            g.mean(d)
        };
        let log_d = targets.durations.iter().map(|&d| (d as f64 + 1.0).ln()).collect();
        let duration = mse(g, out.log_duration, log_d);
        let pitch = mse(g, out.pitch, targets.pitch.clone());
        let energy = mse(g, out.energy, targets.energy.clone());
        let total = g.add(mel_loss, duration);
        let total = g.add(total, pitch);
        let total = g.add(total, energy);
        Ok(AcousticLoss {
            total,
            mel: mel_loss,
            duration,
            pitch,
            energy,
        })
    }

    pub fn encode(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let h = self.encode_graph(&mut g, ids)?;
        Ok(g.value(h).clone())
    }

    pub fn apply_style(&self, encoder_out: &Array2<f64>, style: &StyleEmbedding) -> Result<Array2<f64>> {
        if encoder_out.ncols() != self.config.d_model {
            return Err(Error::shape(format!(
                "encoder output has width {}, expected {}",
                encoder_out.ncols(),
                self.config.d_model
            )));
        }
        let mut g = Graph::new();
        let h = g.input(encoder_out.clone());
        let s = g.row(style.values());
        let y = self.apply_style_graph(&mut g, h, s)?;
        Ok(g.value(y).clone())
    }

    /// Eval-mode synthesis. Returns the features and the predicted variances
    /// (durations already rounded; pitch and energy normalized).
    pub fn synthesize(
        &self,
        ids: &[usize],
        style: &StyleEmbedding,
        targets: Option<&VarianceTargets>,
    ) -> Result<(MelSpectrogram, VarianceTargets)> {
        let mut g = Graph::new();
        let s = g.row(style.values());
        let out = self.forward_graph(&mut g, ids, s, targets)?;
        let predicted = VarianceTargets {
            durations: g
                .value(out.log_duration)
                .iter()
                .map(|&x| frames_from_log_duration(x))
                .collect(),
            pitch: g.value(out.pitch).iter().copied().collect(),
            energy: g.value(out.energy).iter().copied().collect(),
        };
        Ok((MelSpectrogram::new(g.value(out.mel).clone())?, predicted))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, KIND, &self.config_hash(), &self.store)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let hash = self.config_hash();
        checkpoint::load_into(path, KIND, &hash, &mut self.store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use ndarray::array;
    use rand_chacha::rand_core::SeedableRng;

    fn model() -> AcousticModel {
        let cfg = Config::toy();
        let ac = AcousticConfig {
            n_phonemes: 10,
            ..cfg.acoustic
        };
        AcousticModel::new(&ac, &cfg.features, 6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn style(phase: f64) -> StyleEmbedding {
        StyleEmbedding::new((0..6).map(|i| (i as f64 + phase).sin()).collect()).unwrap()
    }

    #[test]
    fn regulator_examples() {
        let s = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(length_regulate(&s, &[1, 1, 1]).unwrap(), s);
        let out = length_regulate(&s, &[2, 0, 3]).unwrap();
        assert_eq!(out, array![[1.0, 2.0], [1.0, 2.0], [5.0, 6.0], [5.0, 6.0], [5.0, 6.0]]);
        assert!(length_regulate(&s, &[0, 0, 0]).is_err());
        assert!(length_regulate(&s, &[1, 1]).is_err());
    }

    #[test]
    fn duration_rounding() {
        assert_eq!(frames_from_log_duration(3f64.ln()), 2);
        assert_eq!(frames_from_log_duration(3.5f64.ln()), 3);
        assert_eq!(frames_from_log_duration(-5.0), 1);
        assert_eq!(frames_from_log_duration(f64::NAN), 1);
    }

    #[test]
    fn quantization_covers_the_range() {
        assert_eq!(quantize(-10.0, 16), 0);
        assert_eq!(quantize(10.0, 16), 15);
        assert_eq!(quantize(0.0, 16), 8);
        assert_eq!(quantize(-3.0, 4), 0);
        assert_eq!(quantize(2.999, 4), 3);
    }

    #[test]
    fn zero_projection_leaves_states_unchanged() {
        let mut m = model();
        for id in [m.style_proj.weight, m.style_proj.bias.unwrap()] {
            m.store.value_mut(id).fill(0.0);
        }
        let h = m.encode(&[1, 2, 3]).unwrap();
        assert_eq!(m.apply_style(&h, &StyleEmbedding::zeros(6)).unwrap(), h);
    }

    #[test]
    fn styles_shift_every_position_equally() {
        let m = model();
        let h = m.encode(&[0, 4, 4, 9]).unwrap();
        let a = m.apply_style(&h, &style(0.0)).unwrap();
        let b = m.apply_style(&h, &style(2.0)).unwrap();
        let offset = &a - &h;
        for p in 1..4 {
            for j in 0..offset.ncols() {
                assert!((offset[[p, j]] - offset[[0, j]]).abs() < 1e-12);
            }
        }
        for p in 0..4 {
            assert_ne!(a.row(p), b.row(p));
        }
        assert!(m.apply_style(&h, &StyleEmbedding::zeros(3)).is_err());
    }

    #[test]
    fn synthesis_contracts() {
        let m = model();
        let ids = [1, 5, 2, 7];
        let targets = VarianceTargets {
            durations: vec![2, 3, 1, 4],
            pitch: vec![0.5, -1.0, 0.0, 2.0],
            energy: vec![0.0, 0.1, -0.2, 0.3],
        };
        let (mel, _) = m.synthesize(&ids, &style(0.0), Some(&targets)).unwrap();
        assert_eq!(mel.values().dim(), (10, m.n_mels));
        let (a, pred) = m.synthesize(&ids, &style(0.0), None).unwrap();
        assert_eq!(a.frames(), pred.durations.iter().sum::<usize>());
        assert!(pred.durations.iter().all(|&d| d >= 1));
        let (again, _) = m.synthesize(&ids, &style(0.0), None).unwrap();
        assert_eq!(a, again);
        let (b, _) = m.synthesize(&ids, &style(1.5), Some(&targets)).unwrap();
        assert_ne!(mel, b);
        assert!(m.synthesize(&[], &style(0.0), None).is_err());
        assert!(m.synthesize(&[10], &style(0.0), None).is_err());
    }

    #[test]
    fn targets_from_features() {
        let mel = MelSpectrogram::new(array![[1.0, 3.0], [2.0, 2.0], [0.0, 0.0]]).unwrap();
        let f0 = [100.0, 0.0, 0.0];
        let norm = Normalization { mean: 0.0, std: 1.0 };
        let t = VarianceTargets::from_features(&[2, 1], &mel, Some(&f0), norm, norm).unwrap();
        assert_eq!(t.pitch, vec![100.0, 0.0]);
        assert_eq!(t.energy, vec![2.0, 0.0]);
        assert!(VarianceTargets::from_features(&[1, 1], &mel, None, norm, norm).is_err());
    }

    #[test]
    fn loss_is_finite_and_positive() {
        let m = model();
        let targets = VarianceTargets {
            durations: vec![2, 1],
            pitch: vec![0.0, 1.0],
            energy: vec![0.5, -0.5],
        };
        let mel = MelSpectrogram::new(Array2::from_elem((3, m.n_mels), -5.0)).unwrap();
        let mut g = Graph::new();
        let s = g.row(style(0.0).values());
        let loss = m.loss_graph(&mut g, &[3, 4], s, &targets, &mel).unwrap();
        let total = g.scalar(loss.total);
        let parts = [loss.mel, loss.duration, loss.pitch, loss.energy].map(|v| g.scalar(v));
        assert!(total.is_finite() && total > 0.0);
        assert!((total - parts.iter().sum::<f64>()).abs() < 1e-12);
        let short = MelSpectrogram::new(Array2::from_elem((2, m.n_mels), -5.0)).unwrap();
        let mut g = Graph::new();
        let s = g.row(style(0.0).values());
        assert!(m.loss_graph(&mut g, &[3, 4], s, &targets, &short).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("am.ckpt");
        let m = model();
        m.save(&p).unwrap();
        let cfg = Config::toy();
        let mut other = AcousticModel::new(&m.config, &cfg.features, 6, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        other.load(&p).unwrap();
        assert!(other.store.same_values(&m.store));
    }
}
