//! The three trained networks as one bundle, with checkpoint directories.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::acoustic_model::AcousticModel;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::style_extractor::StyleExtractor;
use crate::style_predictor::StylePredictor;

pub const EXTRACTOR_FILE: &str = "extractor.ckpt";
pub const PREDICTOR_FILE: &str = "predictor.ckpt";
pub const ACOUSTIC_FILE: &str = "acoustic.ckpt";

/// Independent stream seed for `tag` under the run seed, so that each
/// model's initialization does not depend on the others' sizes.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug)]
pub struct Models {
    pub extractor: StyleExtractor,
    pub predictor: StylePredictor,
    pub acoustic: AcousticModel,
}

impl Models {
    /// Freshly initialized models. `config.acoustic.n_phonemes` is filled
    /// from `n_phonemes` when unset and must agree with it otherwise.
    pub fn new(config: &Config, n_phonemes: usize) -> Result<Self> {
        config.validate()?;
        let mut acoustic_cfg = config.acoustic.clone();
        if acoustic_cfg.n_phonemes == 0 {
            acoustic_cfg.n_phonemes = n_phonemes;
        } else if acoustic_cfg.n_phonemes != n_phonemes {
            return Err(Error::Config(format!(
                "acoustic.n_phonemes = {} but the inventory has {n_phonemes} symbols",
                acoustic_cfg.n_phonemes
            )));
        }
        let rng = |tag| ChaCha8Rng::seed_from_u64(derive_seed(config.seed, tag));
        let d_style = config.extractor.d_style;
        Ok(Self {
            extractor: StyleExtractor::new(&config.extractor, config.features.n_mels, &mut rng("extractor")),
            predictor: StylePredictor::new(&config.predictor, config.text.d_word, d_style, &mut rng("predictor")),
            acoustic: AcousticModel::new(&acoustic_cfg, &config.features, d_style, &mut rng("acoustic"))?,
        })
    }

    /// Loads every model whose checkpoint exists in `dir`; returns which
    /// were found as `(extractor, predictor, acoustic)`.
    pub fn load_available(&mut self, dir: &Path) -> Result<(bool, bool, bool)> {
        let mut found = (false, false, false);
        let p = dir.join(EXTRACTOR_FILE);
        if p.exists() {
            self.extractor.load(&p)?;
            found.0 = true;
        }
        let p = dir.join(PREDICTOR_FILE);
        if p.exists() {
            self.predictor.load(&p)?;
            found.1 = true;
        }
        let p = dir.join(ACOUSTIC_FILE);
        if p.exists() {
            self.acoustic.load(&p)?;
            found.2 = true;
        }
        Ok(found)
    }

    /// Loads all three models from `dir`, failing on any missing file.
    pub fn load_dir(config: &Config, n_phonemes: usize, dir: &Path) -> Result<Self> {
        let mut models = Self::new(config, n_phonemes)?;
        for file in [EXTRACTOR_FILE, PREDICTOR_FILE, ACOUSTIC_FILE] {
            let p = dir.join(file);
            if !p.exists() {
                return Err(Error::Checkpoint {
                    path: p,
                    message: "missing checkpoint".into(),
                });
            }
        }
        models.load_available(dir)?;
        Ok(models)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.extractor.save(&dir.join(EXTRACTOR_FILE))?;
        self.predictor.save(&dir.join(PREDICTOR_FILE))?;
        self.acoustic.save(&dir.join(ACOUSTIC_FILE))
    }
}
