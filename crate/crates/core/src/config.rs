//! Declarative configuration, loaded from TOML with `section.key=value`
//! overrides. Defaults are the full-size settings; [`Config::toy`] is the
//! desk-scale preset used for tests and quick runs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub features: FeatureConfig,
    pub toy: ToyCorpusConfig,
    pub text: TextConfig,
    pub extractor: ExtractorConfig,
    pub predictor: PredictorConfig,
    pub acoustic: AcousticConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            features: FeatureConfig::default(),
            toy: ToyCorpusConfig::default(),
            text: TextConfig::default(),
            extractor: ExtractorConfig::default(),
            predictor: PredictorConfig::default(),
            acoustic: AcousticConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub sample_rate_hz: u32,
    pub hop_length: usize,
    /// Lower end of the log-mel range; also the value of inserted silence.
    pub mel_min: f64,
    pub mel_max: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            sample_rate_hz: 24_000,
            hop_length: 300,
            mel_min: -11.5129,
            mel_max: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusConfig {
    pub paragraphs: usize,
    pub sentences_per_paragraph: usize,
    pub vocab_size: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_phonemes_per_word: usize,
    pub max_phonemes_per_word: usize,
    pub min_frames_per_phoneme: usize,
    pub max_frames_per_phoneme: usize,
    /// Weight of the previous sentence's latent style in the current one.
    pub persistence: f64,
    pub noise_std: f64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            paragraphs: 40,
            sentences_per_paragraph: 8,
            vocab_size: 24,
            min_words: 3,
            max_words: 6,
            min_phonemes_per_word: 2,
            max_phonemes_per_word: 3,
            min_frames_per_phoneme: 2,
            max_frames_per_phoneme: 4,
            persistence: 0.7,
            noise_std: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextBackend {
    Offline,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubwordPooling {
    Mean,
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub backend: TextBackend,
    pub d_word: usize,
    /// Neighbor weight of the offline embedder's local averaging.
    pub mixing: f64,
    /// Executable speaking the adapter protocol (external backend only).
    pub command: Option<String>,
    pub model_dir: Option<String>,
    pub pooling: SubwordPooling,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            backend: TextBackend::Offline,
            d_word: 32,
            mixing: 0.5,
            command: None,
            model_dir: None,
            pooling: SubwordPooling::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub conv_channels: Vec<usize>,
    pub gru_width: usize,
    pub n_tokens: usize,
    pub heads: usize,
    pub d_style: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![32, 32, 64, 64, 128, 128],
            gru_width: 128,
            n_tokens: 10,
            heads: 4,
            d_style: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    Learned,
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    /// Past/future sentences on each side of the current one.
    pub context_radius: usize,
    pub d_model: usize,
    pub heads: usize,
    pub sentence_layers: usize,
    pub fusion_layers: usize,
    pub max_words: usize,
    pub max_segment: usize,
    pub position_encoding: PositionEncoding,
    pub dropout: f64,
    pub mixture_mask: bool,
    pub use_prev_styles: bool,
    pub hierarchical: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            context_radius: 2,
            d_model: 256,
            heads: 4,
            sentence_layers: 3,
            fusion_layers: 3,
            max_words: 128,
            max_segment: 32,
            position_encoding: PositionEncoding::Learned,
            dropout: 0.1,
            mixture_mask: true,
            use_prev_styles: true,
            hierarchical: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcousticConfig {
    /// Size of the phoneme inventory; 0 means "take it from the corpus".
    pub n_phonemes: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub variance_hidden: usize,
    pub pitch_bins: usize,
    pub energy_bins: usize,
    pub pitch: Normalization,
    pub energy: Normalization,
    pub dropout: f64,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            n_phonemes: 0,
            d_model: 256,
            heads: 2,
            encoder_layers: 4,
            decoder_layers: 4,
            variance_hidden: 256,
            pitch_bins: 64,
            energy_bins: 64,
            pitch: Normalization { mean: 150.0, std: 50.0 },
            energy: Normalization { mean: -4.0, std: 1.0 },
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Multiplies the base 180k/20k/30k stage lengths.
    pub iteration_scale: f64,
    /// Explicit per-stage iteration counts; overrides `iteration_scale`.
    pub stage_iterations: Option<[usize; 3]>,
    pub learning_rate: f64,
    /// Stage-3 learning rate = `learning_rate * finetune_lr_factor`.
    pub finetune_lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub validation_fraction: f64,
}

pub const BASE_STAGE_ITERATIONS: [usize; 3] = [180_000, 20_000, 30_000];

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            iteration_scale: 1.0,
            stage_iterations: None,
            learning_rate: 1e-4,
            finetune_lr_factor: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            grad_clip: 1.0,
            checkpoint_every: 1000,
            log_every: 10,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Iterations for stage 1, 2 or 3.
    pub fn iterations(&self, stage: usize) -> usize {
        assert!((1..=3).contains(&stage));
        match self.stage_iterations {
            Some(explicit) => explicit[stage - 1],
            None => ((BASE_STAGE_ITERATIONS[stage - 1] as f64 * self.iteration_scale).round() as usize).max(1),
        }
    }

    pub fn stage_lr(&self, stage: usize) -> f64 {
        if stage == 3 {
            self.learning_rate * self.finetune_lr_factor
        } else {
            self.learning_rate
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrevStyleSource {
    /// Extract previous styles from this run's own synthesized features.
    Synthesized,
    /// Extract them from the corpus's recorded features (oracle mode).
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub silence_frames: usize,
    pub prev_style_source: PrevStyleSource,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            silence_frames: 0,
            prev_style_source: PrevStyleSource::Synthesized,
        }
    }
}

impl Config {
    /// Desk-scale preset: small widths, a short mel axis and iteration
    /// counts that finish in minutes on one CPU core.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            features: FeatureConfig {
                n_mels: 20,
                ..FeatureConfig::default()
            },
            toy: ToyCorpusConfig {
                paragraphs: 200,
                ..ToyCorpusConfig::default()
            },
            text: TextConfig::default(),
            extractor: ExtractorConfig {
                conv_channels: vec![16, 16],
                gru_width: 16,
                n_tokens: 4,
                heads: 2,
                d_style: 32,
            },
            predictor: PredictorConfig {
                d_model: 32,
                heads: 4,
                sentence_layers: 1,
                fusion_layers: 2,
                max_words: 32,
                dropout: 0.1,
                ..PredictorConfig::default()
            },
            acoustic: AcousticConfig {
                d_model: 32,
                heads: 2,
                encoder_layers: 1,
                decoder_layers: 1,
                variance_hidden: 32,
                pitch_bins: 16,
                energy_bins: 16,
                dropout: 0.0,
                ..AcousticConfig::default()
            },
            train: TrainConfig {
                learning_rate: 1e-3,
                stage_iterations: Some([1200, 4000, 200]),
                checkpoint_every: 500,
                ..TrainConfig::default()
            },
            inference: InferenceConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.features.n_mels == 0 {
            return bad("features.n_mels must be positive");
        }
        if self.features.mel_min >= self.features.mel_max {
            return bad("features.mel_min must be below features.mel_max");
        }
        let e = &self.extractor;
        if e.conv_channels.is_empty() || e.n_tokens == 0 || e.heads == 0 || e.d_style == 0 {
            return bad("extractor dimensions must be positive");
        }
        if e.d_style % e.heads != 0 {
            return bad("extractor.d_style must be divisible by extractor.heads");
        }
        let p = &self.predictor;
        if p.d_model == 0 || p.heads == 0 || p.d_model % p.heads != 0 {
            return bad("predictor.d_model must be a positive multiple of predictor.heads");
        }
        let a = &self.acoustic;
        if a.d_model == 0 || a.heads == 0 || a.d_model % a.heads != 0 {
            return bad("acoustic.d_model must be a positive multiple of acoustic.heads");
        }
        if a.pitch_bins < 2 || a.energy_bins < 2 {
            return bad("acoustic bins must be at least 2");
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.train.validation_fraction) {
            return bad("train.validation_fraction must be in [0, 1)");
        }
        if self.text.d_word == 0 {
            return bad("text.d_word must be positive");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as a TOML
/// literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Short stable digest of any serializable configuration fragment.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
