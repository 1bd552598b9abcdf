//! Three-stage training on a tiny toy corpus.

use std::path::Path;

use styleflow::corpus::toy::generate_toy_corpus;
use styleflow::corpus::Corpus;
use styleflow::models::{Models, ACOUSTIC_FILE, EXTRACTOR_FILE, PREDICTOR_FILE};
use styleflow::text_embedder::embedder_from_config;
use styleflow::trainer::{stage_dir, style_mse_on, Dataset, LossRecord, Trainer, LOSS_LOG};
use styleflow::{Config, Error};

mod common;
use common::tiny_config;

fn dataset(config: &Config, dir: &Path) -> Dataset {
    let toy = generate_toy_corpus(&config.toy, &config.features, config.seed).unwrap();
    let manifest = toy.write(&dir.join("corpus")).unwrap();
    let corpus = Corpus::load(&manifest, config.features.n_mels).unwrap();
    let embedder = embedder_from_config(&config.text).unwrap();
    Dataset::new(corpus, config, embedder.as_ref()).unwrap()
}

fn log_records(run: &Path) -> Vec<LossRecord> {
    std::fs::read_to_string(run.join(LOSS_LOG))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn full_pipeline_writes_checkpoints_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let data = dataset(&config, dir.path());
    assert!(!data.valid.is_empty());
    assert!(data
        .train
        .iter()
        .all(|(d, _)| data.train_documents.contains(d) && !data.valid_documents.contains(d)));
    let run = dir.path().join("run");
    let mut t = Trainer::new(config.clone(), data, &run).unwrap();
    let reports = t.run_all().unwrap();
    assert_eq!(reports.iter().map(|r| r.stage).collect::<Vec<_>>(), [1, 2, 3]);
    for r in &reports {
        assert!(r.initial_loss.is_finite() && r.final_loss.is_finite());
    }
    assert!(reports[0].validation.is_none());
    assert!(reports[1].validation.is_some_and(f64::is_finite));

    for f in [EXTRACTOR_FILE, ACOUSTIC_FILE] {
        assert!(stage_dir(&run, 1).join(f).exists());
    }
    assert!(stage_dir(&run, 2).join(PREDICTOR_FILE).exists());
    let final_models = Models::load_dir(&config, t.data.corpus.inventory.len(), &t.final_dir()).unwrap();
    assert!(final_models.predictor.store.same_values(&t.models.predictor.store));

    let records = log_records(&run);
    assert_eq!(records.len(), 6 + 6 + 4);
    for r in &records {
        assert!(r.components["total"].is_finite());
    }
    let stage1 = &records[0].components;
    for key in ["mel", "duration", "pitch", "energy", "total"] {
        assert!(stage1.contains_key(key), "{key}");
    }
    assert!(records[6].components.contains_key("style_mse"));
    assert!(run.join("config.resolved.toml").exists());

    // A completed run does nothing more and keeps its models.
    let again = Trainer::new(config, t.data.clone(), &run).unwrap();
    assert!(again.models.predictor.store.same_values(&t.models.predictor.store));
}

#[test]
fn stages_update_only_their_models() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let mut t = Trainer::new(config.clone(), dataset(&config, dir.path()), &dir.path().join("run")).unwrap();
    let initial = t.models.clone();
    t.stage1_train().unwrap();
    assert!(!t.models.extractor.store.same_values(&initial.extractor.store));
    assert!(!t.models.acoustic.store.same_values(&initial.acoustic.store));
    assert!(t.models.predictor.store.same_values(&initial.predictor.store));

    let after1 = t.models.clone();
    t.stage2_distill().unwrap();
    assert!(t.models.extractor.store.same_values(&after1.extractor.store));
    assert!(t.models.acoustic.store.same_values(&after1.acoustic.store));
    assert!(!t.models.predictor.store.same_values(&after1.predictor.store));

    let after2 = t.models.clone();
    t.stage3_finetune().unwrap();
    assert!(t.models.extractor.store.same_values(&after2.extractor.store));
    assert!(!t.models.acoustic.store.same_values(&after2.acoustic.store));
    assert!(!t.models.predictor.store.same_values(&after2.predictor.store));
}

#[test]
fn stages_require_their_predecessors() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let mut t = Trainer::new(config.clone(), dataset(&config, dir.path()), &dir.path().join("run")).unwrap();
    assert!(matches!(t.stage2_distill(), Err(Error::Checkpoint { .. })));
    assert!(t.stage3_finetune().is_err());
}

#[test]
fn paused_and_resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let data = dataset(&config, dir.path());

    let straight = dir.path().join("straight");
    let mut a = Trainer::new(config.clone(), data.clone(), &straight).unwrap();
    a.run_all().unwrap();

    let paused = dir.path().join("paused");
    for pause in [Some(3), Some(5), Some(3), Some(1), None] {
        let mut b = Trainer::new(config.clone(), data.clone(), &paused).unwrap();
        b.pause_after = pause;
        b.run_all().unwrap();
    }
    let b = Trainer::new(config.clone(), data, &paused).unwrap();
    assert!(b.stage_done(3));
    let read = |run: &Path, f: &str| std::fs::read(run.join("checkpoints/final").join(f)).unwrap();
    for f in [EXTRACTOR_FILE, PREDICTOR_FILE, ACOUSTIC_FILE] {
        assert_eq!(read(&straight, f), read(&paused, f), "{f}");
    }
    assert_eq!(
        std::fs::read_to_string(straight.join(LOSS_LOG)).unwrap(),
        std::fs::read_to_string(paused.join(LOSS_LOG)).unwrap()
    );
}

#[test]
fn same_seed_reproduces_other_seed_differs() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let data = dataset(&config, dir.path());
    let run = |name: &str, config: &Config| {
        let mut t = Trainer::new(config.clone(), data.clone(), &dir.path().join(name)).unwrap();
        t.stage1_train().unwrap();
        std::fs::read_to_string(dir.path().join(name).join(LOSS_LOG)).unwrap()
    };
    let first = run("a", &config);
    assert_eq!(first, run("b", &config));
    let mut other = config.clone();
    other.seed = 1;
    assert_ne!(first, run("c", &other));
}

#[test]
fn validation_metric_is_the_style_mse_on_held_out_sentences() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let mut t = Trainer::new(config.clone(), dataset(&config, dir.path()), &dir.path().join("run")).unwrap();
    t.stage1_train().unwrap();
    let report = t.stage2_distill().unwrap();
    let expected = style_mse_on(&t.models, &t.data, &t.data.valid).unwrap();
    assert_eq!(report.validation, Some(expected));
    assert_eq!(t.held_out_style_mse().unwrap(), expected);
}

#[test]
fn fork_shares_stage_one_and_rejects_incompatible_configs() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let mut base = Trainer::new(config.clone(), dataset(&config, dir.path()), &dir.path().join("base")).unwrap();
    assert!(base.fork(config.clone(), &dir.path().join("early")).is_err());
    base.stage1_train().unwrap();

    let mut variant = config.clone();
    variant.predictor.mixture_mask = false;
    let mut f = base.fork(variant, &dir.path().join("no_mask")).unwrap();
    assert!(f.stage_done(1));
    assert!(f.models.acoustic.store.same_values(&base.models.acoustic.store));
    assert!(f.models.extractor.store.same_values(&base.models.extractor.store));
    f.stage2_distill().unwrap();

    let mut bad = config.clone();
    bad.extractor.d_style = 4;
    assert!(base.fork(bad, &dir.path().join("bad")).is_err());
    let mut bad = config;
    bad.predictor.context_radius = 1;
    assert!(base.fork(bad, &dir.path().join("bad2")).is_err());
}

#[test]
fn checkpoints_from_another_configuration_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let mut t = Trainer::new(config.clone(), dataset(&config, dir.path()), &dir.path().join("run")).unwrap();
    t.run_all().unwrap();
    let mut other = config;
    other.predictor.d_model = 16;
    let err = Models::load_dir(&other, t.data.corpus.inventory.len(), &t.final_dir()).unwrap_err();
    assert!(err.to_string().contains("config hash"), "{err}");
}
