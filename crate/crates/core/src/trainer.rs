//! The three training stages.
//!
//! 1. Extractor and acoustic model are trained jointly; each utterance is
//!    conditioned on the style extracted from its own ground-truth mel.
//! 2. With the extractor frozen, the predictor regresses the extractor's
//!    styles; previous styles also come from ground-truth mels.
//! 3. Acoustic model and predictor are fine-tuned jointly on the acoustic
//!    loss with the predicted style, at a reduced learning rate.
//!
//! Batches are drawn with an RNG seeded from `(seed, stage, iteration)`, so
//! a run is reproducible and a resumed stage continues exactly where the
//! interrupted one would have.
//!
//! Run directory: `config.resolved.toml`, `phonemes.txt`, `loss_log.jsonl`
//! and `checkpoints/stage{1,2,3}/`.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::acoustic_model::VarianceTargets;
use crate::checkpoint;
use crate::config::Config;
use crate::corpus::{build_context_window, Corpus, INVENTORY_FILE};
use crate::error::{Error, Result};
use crate::metrics::style_mse;
use crate::models::{derive_seed, Models};
use crate::nn::params::clip_grad_norm;
use crate::nn::{Adam, Graph, ParamStore, Var};
use crate::style_extractor::StyleEmbedding;
use crate::text_embedder::{TextEmbedder, WordEmbeddingSequence};

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
const PROGRESS_FILE: &str = "progress.json";

pub fn stage_dir(run_dir: &Path, stage: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("stage{stage}"))
}

/// Splits paragraph indices into (train, validation); the validation set
/// is `ceil(fraction * n)` paragraphs chosen by the seed, at least one
/// whenever `fraction > 0` and `n > 1`.
pub fn split_paragraphs(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "split")));
    let mut n_valid = (fraction * n as f64).ceil() as usize;
    if n < 2 {
        n_valid = 0;
    }
    n_valid = n_valid.min(n.saturating_sub(1));
    let mut valid = order[..n_valid].to_vec();
    let mut train = order[n_valid..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    (train, valid)
}

/// Everything the stages read, precomputed once from the corpus.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub corpus: Corpus,
    pub radius: usize,
    pub train_documents: Vec<usize>,
    pub valid_documents: Vec<usize>,
    pub train: Vec<(usize, usize)>,
    pub valid: Vec<(usize, usize)>,
    pub phonemes: Vec<Vec<Vec<usize>>>,
    pub variances: Vec<Vec<VarianceTargets>>,
    /// Word vectors of each sentence's context window.
    pub words: Vec<Vec<WordEmbeddingSequence>>,
}

impl Dataset {
    pub fn new(corpus: Corpus, config: &Config, embedder: &dyn TextEmbedder) -> Result<Self> {
        if corpus.num_sentences() == 0 {
            return Err(Error::Empty("training corpus has no sentences".into()));
        }
        if embedder.d_word() != config.text.d_word {
            return Err(Error::Config(format!(
                "embedder produces {}-dim vectors, text.d_word is {}",
                embedder.d_word(),
                config.text.d_word
            )));
        }
        let radius = config.predictor.context_radius;
        let (train_docs, valid_docs) =
            split_paragraphs(corpus.documents.len(), config.train.validation_fraction, config.seed);
        let expand = |docs: &[usize]| -> Vec<(usize, usize)> {
            docs.iter()
                .flat_map(|&d| (0..corpus.documents[d].len()).map(move |i| (d, i)))
                .collect()
        };
        let train = expand(&train_docs);
        let valid = expand(&valid_docs);
        let mut phonemes = Vec::new();
        let mut variances = Vec::new();
        let mut words = Vec::new();
        let a = &config.acoustic;
        for (doc, loaded) in corpus.documents.iter().zip(&corpus.sentences) {
            let mut p = Vec::new();
            let mut v = Vec::new();
            let mut w = Vec::new();
            for (i, s) in loaded.iter().enumerate() {
                p.push(corpus.inventory.encode(&s.record.phonemes)?);
                v.push(VarianceTargets::from_features(
                    &s.record.durations,
                    &s.mel,
                    s.f0.as_deref(),
                    a.pitch,
                    a.energy,
                )?);
                let window = build_context_window(doc, i, radius, config.extractor.d_style)?;
                w.push(embedder.embed_context(&window.texts(), radius)?);
            }
            phonemes.push(p);
            variances.push(v);
            words.push(w);
        }
        Ok(Self {
            corpus,
            radius,
            train_documents: train_docs,
            valid_documents: valid_docs,
            train,
            valid,
            phonemes,
            variances,
            words,
        })
    }
}

/// Extracted style of every corpus sentence.
pub fn extract_all_styles(models: &Models, corpus: &Corpus) -> Result<Vec<Vec<StyleEmbedding>>> {
    corpus
        .sentences
        .iter()
        .map(|doc| doc.iter().map(|s| models.extractor.extract_style(&s.mel)).collect())
        .collect()
}

/// Previous-style slots for sentence `i`, taken from `styles` (padded
/// slots stay zero).
pub fn previous_styles(styles: &[StyleEmbedding], i: usize, radius: usize, d_style: usize) -> Vec<StyleEmbedding> {
    (0..radius)
        .map(|k| {
            let offset = radius - k;
            if i >= offset {
                styles[i - offset].clone()
            } else {
                StyleEmbedding::zeros(d_style)
            }
        })
        .collect()
}

/// Mean style MSE of the predictor against the extractor's targets over
/// `sentences`, with previous styles from ground-truth mels.
pub fn style_mse_on(models: &Models, data: &Dataset, sentences: &[(usize, usize)]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Empty("no sentences to evaluate".into()));
    }
    let styles = extract_all_styles(models, &data.corpus)?;
    let d_style = models.extractor.d_style();
    let mut total = 0.0;
    for &(d, i) in sentences {
        let prev = previous_styles(&styles[d], i, data.radius, d_style);
        let pred = models.predictor.predict_from_embeddings(&data.words[d][i], &prev, i)?;
        total += style_mse(&pred, &styles[d][i])?;
    }
    Ok(total / sentences.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: usize,
    pub iteration: usize,
    pub components: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub iterations: usize,
    /// Mean loss over the first logged window and the last one.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Held-out style MSE (stages 2 and 3) or acoustic loss (stage 1).
    pub validation: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Progress {
    iteration: usize,
    done: bool,
}

/// Which models a stage updates.
#[derive(Clone, Copy)]
struct Trainable {
    extractor: bool,
    predictor: bool,
    acoustic: bool,
}

pub struct Trainer {
    pub config: Config,
    pub data: Dataset,
    pub models: Models,
    pub run_dir: PathBuf,
    /// Stop the running stage after this many iterations, leaving a
    /// resumable checkpoint; the next call continues from there.
    pub pause_after: Option<usize>,
    /// Extracted training targets, filled after stage 1.
    targets: Option<Vec<Vec<StyleEmbedding>>>,
}

impl Trainer {
    /// Creates the run directory with the resolved configuration and the
    /// phoneme inventory, and loads any checkpoints already there.
    pub fn new(config: Config, data: Dataset, run_dir: &Path) -> Result<Self> {
        let models = Models::new(&config, data.corpus.inventory.len())?;
        Self::with_models(config, data, models, run_dir)
    }

    pub fn with_models(config: Config, data: Dataset, models: Models, run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        config.save(&run_dir.join(RESOLVED_CONFIG))?;
        data.corpus.inventory.save(&run_dir.join(INVENTORY_FILE))?;
        let mut t = Self {
            config,
            data,
            models,
            run_dir: run_dir.to_path_buf(),
            pause_after: None,
            targets: None,
        };
        for stage in 1..=3 {
            let dir = stage_dir(run_dir, stage);
            if t.stage_done(stage) {
                t.models.load_available(&dir)?;
            }
        }
        Ok(t)
    }

    /// A new run in `run_dir` that reuses this run's completed stage 1
    /// (extractor and acoustic model) with a fresh predictor built from
    /// `config`. Only the predictor, training and inference sections of
    /// `config` may differ from this run's configuration.
    pub fn fork(&self, config: Config, run_dir: &Path) -> Result<Trainer> {
        self.require(2)?;
        let same = |a: &Config, b: &Config| {
            a.seed == b.seed
                && a.toy == b.toy
                && a.features == b.features
                && a.text == b.text
                && a.extractor == b.extractor
                && a.acoustic == b.acoustic
        };
        if !same(&self.config, &config) {
            return Err(Error::Config(
                "a forked run may only change the predictor, train and inference sections".into(),
            ));
        }
        if config.predictor.context_radius != self.data.radius {
            return Err(Error::Config("a forked run must keep the context radius".into()));
        }
        let mut models = Models::new(&config, self.data.corpus.inventory.len())?;
        models.extractor = self.models.extractor.clone();
        models.acoustic = self.models.acoustic.clone();
        let src = stage_dir(&self.run_dir, 1);
        let dst = stage_dir(run_dir, 1);
        std::fs::create_dir_all(&dst).map_err(|e| Error::io(&dst, e))?;
        for entry in std::fs::read_dir(&src).map_err(|e| Error::io(&src, e))? {
            let entry = entry.map_err(|e| Error::io(&src, e))?;
            let to = dst.join(entry.file_name());
            std::fs::copy(entry.path(), &to).map_err(|e| Error::io(&to, e))?;
        }
        Self::with_models(config, self.data.clone(), models, run_dir)
    }

    pub fn stage_done(&self, stage: usize) -> bool {
        self.read_progress(stage).is_some_and(|p| p.done)
    }

    fn read_progress(&self, stage: usize) -> Option<Progress> {
        let text = std::fs::read_to_string(stage_dir(&self.run_dir, stage).join(PROGRESS_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn write_progress(&self, stage: usize, iteration: usize, done: bool) -> Result<()> {
        let p = stage_dir(&self.run_dir, stage).join(PROGRESS_FILE);
        std::fs::write(&p, serde_json::to_string(&Progress { iteration, done })?).map_err(|e| Error::io(&p, e))
    }

    fn log(&self, record: &LossRecord) -> Result<()> {
        let path = self.run_dir.join(LOSS_LOG);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer(&mut f, record)?;
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))
    }

    fn require(&self, stage: usize) -> Result<()> {
        for s in 1..stage {
            if !self.stage_done(s) {
                return Err(Error::Checkpoint {
                    path: stage_dir(&self.run_dir, s),
                    message: format!("stage {s} has not completed; run it before stage {stage}"),
                });
            }
        }
        Ok(())
    }

    fn targets(&mut self) -> Result<&Vec<Vec<StyleEmbedding>>> {
        if self.targets.is_none() {
            self.targets = Some(extract_all_styles(&self.models, &self.data.corpus)?);
        }
        Ok(self.targets.as_ref().expect("just set"))
    }

    fn batch(&self, stage: usize, iteration: usize) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &format!("batch/{stage}/{iteration}")));
        (0..self.config.train.batch_size)
            .map(|_| self.data.train[rng.random_range(0..self.data.train.len())])
            .collect()
    }

    /// Builds stage `stage`'s batch loss on `g`; returns the total and the
    /// named components (already averaged over the batch).
    fn batch_loss(
        &self,
        g: &mut Graph,
        stage: usize,
        batch: &[(usize, usize)],
        targets: Option<&[Vec<StyleEmbedding>]>,
    ) -> Result<(Var, Vec<(&'static str, Var)>)> {
        let m = &self.models;
        let scale = 1.0 / batch.len() as f64;
        let mut sums: Vec<(&'static str, Vec<Var>)> = Vec::new();
        let mut push = |name: &'static str, v: Var| match sums.iter_mut().find(|(n, _)| *n == name) {
            Some((_, vs)) => vs.push(v),
            None => sums.push((name, vec![v])),
        };
        for &(d, i) in batch {
            let s = &self.data.corpus.sentences[d][i];
            let style = match stage {
                1 => m.extractor.style_graph(g, s.mel.values())?,
                _ => {
                    let t = targets.expect("targets for stages 2 and 3");
                    let prev = previous_styles(&t[d], i, self.data.radius, m.extractor.d_style());
                    m.predictor.predict_graph(g, &self.data.words[d][i], &prev, i)?
                }
            };
            if stage == 2 {
                let t = targets.expect("targets")[d][i].as_row();
                let t = g.input(t);
                let diff = g.sub(style, t);
                let sq = g.square(diff);
                push("style_mse", g.mean(sq));
                continue;
            }
            let loss =
                m.acoustic
                    .loss_graph(g, &self.data.phonemes[d][i], style, &self.data.variances[d][i], &s.mel)?;
            push("mel", loss.mel);
            push("duration", loss.duration);
            push("pitch", loss.pitch);
            push("energy", loss.energy);
        }
        let mut components = Vec::new();
        let mut total: Option<Var> = None;
        for (name, vs) in sums {
            let mut acc = vs[0];
            for &v in &vs[1..] {
                acc = g.add(acc, v);
            }
            let mean = g.scale(acc, scale);
            components.push((name, mean));
            total = Some(match total {
                Some(t) => g.add(t, mean),
                None => mean,
            });
        }
        Ok((total.expect("non-empty batch"), components))
    }

    fn stores(&mut self, which: Trainable) -> Vec<(&'static str, &mut ParamStore)> {
        let mut out = Vec::new();
        if which.extractor {
            out.push(("extractor", &mut self.models.extractor.store));
        }
        if which.predictor {
            out.push(("predictor", &mut self.models.predictor.store));
        }
        if which.acoustic {
            out.push(("acoustic", &mut self.models.acoustic.store));
        }
        out
    }

    fn save_stage(&self, stage: usize, which: Trainable) -> Result<()> {
        let dir = stage_dir(&self.run_dir, stage);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if which.extractor {
            self.models.extractor.save(&dir.join(crate::models::EXTRACTOR_FILE))?;
        }
        if which.predictor {
            self.models.predictor.save(&dir.join(crate::models::PREDICTOR_FILE))?;
        }
        if which.acoustic {
            self.models.acoustic.save(&dir.join(crate::models::ACOUSTIC_FILE))?;
        }
        Ok(())
    }

    fn model_hash(&self, name: &str) -> String {
        match name {
            "extractor" => self.models.extractor.config_hash(),
            "predictor" => self.models.predictor.config_hash(),
            _ => self.models.acoustic.config_hash(),
        }
    }

    fn save_resumable(&self, stage: usize, which: Trainable, optimizers: &[Adam], iteration: usize) -> Result<()> {
        let dir = stage_dir(&self.run_dir, stage);
        self.save_stage(stage, which)?;
        let names = [
            (which.extractor, "extractor", &self.models.extractor.store),
            (which.predictor, "predictor", &self.models.predictor.store),
            (which.acoustic, "acoustic", &self.models.acoustic.store),
        ];
        for ((_, name, store), adam) in names.into_iter().filter(|n| n.0).zip(optimizers) {
            checkpoint::save_optimizer(
                &dir.join(format!("{name}.adam")),
                &self.model_hash(name),
                store,
                adam,
                iteration,
            )?;
        }
        self.write_progress(stage, iteration, false)
    }

    fn run_stage(&mut self, stage: usize, which: Trainable) -> Result<StageReport> {
        self.require(stage)?;
        let train = self.config.train.clone();
        let total_iters = train.iterations(stage);
        let lr = train.stage_lr(stage);
        let dir = stage_dir(&self.run_dir, stage);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let targets = if stage >= 2 {
            Some(self.targets()?.clone())
        } else {
            None
        };

        let mut optimizers: Vec<Adam> = self
            .stores(which)
            .iter()
            .map(|(_, s)| Adam::new(s, lr, train.beta1, train.beta2))
            .collect();
        let mut start = 0;
        if let Some(p) = self.read_progress(stage).filter(|p| !p.done && p.iteration > 0) {
            self.models.load_available(&dir)?;
            let names: Vec<&'static str> = self.stores(which).iter().map(|(n, _)| *n).collect();
            for (name, adam) in names.iter().zip(optimizers.iter_mut()) {
                let hash = self.model_hash(name);
                let store = match *name {
                    "extractor" => &self.models.extractor.store,
                    "predictor" => &self.models.predictor.store,
                    _ => &self.models.acoustic.store,
                };
                checkpoint::load_optimizer(&dir.join(format!("{name}.adam")), &hash, store, adam)?;
            }
            start = p.iteration;
            info!(stage, iteration = start, "resuming");
        }

        info!(stage, iterations = total_iters, lr, "training stage");
        let mean = |v: &[f64]| {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let window = train.log_every.max(1);
        let mut first_window: Vec<f64> = Vec::new();
        let mut last_window: Vec<f64> = Vec::new();
        for it in start..total_iters {
            let batch = self.batch(stage, it);
            let mut g = Graph::training(derive_seed(self.config.seed, &format!("dropout/{stage}/{it}")));
            let (loss, components) = self.batch_loss(&mut g, stage, &batch, targets.as_deref())?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: format!("stage {stage}"),
                    iteration: it,
                });
            }
            let grads = g.backward(loss);
            for ((_, store), adam) in self.stores(which).into_iter().zip(optimizers.iter_mut()) {
                let mut gr = grads.for_store(&g, store);
                clip_grad_norm(&mut gr, train.grad_clip);
                adam.update(store, &gr);
            }
            if first_window.len() < window {
                first_window.push(value);
            }
            last_window.push(value);
            if last_window.len() > window {
                last_window.remove(0);
            }
            if (it + 1) % window == 0 || it + 1 == total_iters {
                let mut map: BTreeMap<String, f64> =
                    components.iter().map(|(n, v)| (n.to_string(), g.scalar(*v))).collect();
                map.insert("total".into(), value);
                debug!(stage, iteration = it + 1, loss = value, "step");
                self.log(&LossRecord {
                    stage,
                    iteration: it + 1,
                    components: map,
                })?;
            }
            let periodic = train.checkpoint_every > 0 && (it + 1) % train.checkpoint_every == 0;
            let pause = self.pause_after == Some(it + 1);
            if (periodic || pause) && it + 1 < total_iters {
                self.save_resumable(stage, which, &optimizers, it + 1)?;
                if pause {
                    info!(stage, iteration = it + 1, "paused");
                    return Ok(StageReport {
                        stage,
                        iterations: it + 1,
                        initial_loss: mean(&first_window),
                        final_loss: mean(&last_window),
                        validation: None,
                    });
                }
            }
        }
        self.save_stage(stage, which)?;
        self.write_progress(stage, total_iters, true)?;
        if stage == 1 {
            self.targets = None;
        }
        let validation = match stage {
            1 => None,
            _ if self.data.valid.is_empty() => None,
            _ => Some(style_mse_on(&self.models, &self.data, &self.data.valid)?),
        };
        let report = StageReport {
            stage,
            iterations: total_iters,
            initial_loss: mean(&first_window),
            final_loss: mean(&last_window),
            validation,
        };
        info!(?report, "stage complete");
        Ok(report)
    }

    /// Joint extractor and acoustic-model training.
    pub fn stage1_train(&mut self) -> Result<StageReport> {
        self.run_stage(
            1,
            Trainable {
                extractor: true,
                predictor: false,
                acoustic: true,
            },
        )
    }

    /// Predictor distillation against the frozen extractor.
    pub fn stage2_distill(&mut self) -> Result<StageReport> {
        self.run_stage(
            2,
            Trainable {
                extractor: false,
                predictor: true,
                acoustic: false,
            },
        )
    }

    /// Joint fine-tuning of the predictor and acoustic model.
    pub fn stage3_finetune(&mut self) -> Result<StageReport> {
        let report = self.run_stage(
            3,
            Trainable {
                extractor: false,
                predictor: true,
                acoustic: true,
            },
        )?;
        if self.stage_done(3) {
            self.models.save_dir(&self.final_dir())?;
        }
        Ok(report)
    }

    /// Directory holding the final set of all three checkpoints.
    pub fn final_dir(&self) -> PathBuf {
        self.run_dir.join("checkpoints").join("final")
    }

    /// Runs whichever stages have not completed yet, stopping early if a
    /// stage pauses.
    pub fn run_all(&mut self) -> Result<Vec<StageReport>> {
        let mut reports = Vec::new();
        for stage in 1..=3 {
            if self.stage_done(stage) {
                continue;
            }
            reports.push(match stage {
                1 => self.stage1_train()?,
                2 => self.stage2_distill()?,
                _ => self.stage3_finetune()?,
            });
            if !self.stage_done(stage) {
                break;
            }
        }
        Ok(reports)
    }

    /// Style MSE on the validation split (or the training split when the
    /// corpus is too small to hold one out).
    pub fn held_out_style_mse(&self) -> Result<f64> {
        let set = if self.data.valid.is_empty() {
            &self.data.train
        } else {
            &self.data.valid
        };
        style_mse_on(&self.models, &self.data, set)
    }
}
