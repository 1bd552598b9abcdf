//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Criteria 4, 5, 6 and 8 share one set of trained toy runs (three seeds,
//! stage 1 shared by the four predictor variants of a seed).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use styleflow::acoustic_model::{length_regulate, AcousticModel, VarianceTargets};
use styleflow::config::{AcousticConfig, Config, PredictorConfig, PrevStyleSource};
use styleflow::corpus::toy::{generate_toy_corpus, ToyCorpus};
use styleflow::corpus::{Corpus, MelSpectrogram};
use styleflow::inference::{synthesize_long_form, FeatureSource, SynthesisOptions};
use styleflow::metrics::{dtw_align, f0_rmse, mcd, mel_cepstrum};
use styleflow::models::Models;
use styleflow::nn::Graph;
use styleflow::style_extractor::StyleEmbedding;
use styleflow::style_predictor::{build_mixture_attention_mask, FusionLayout, FusionTokenSequence, StylePredictor};
use styleflow::text_embedder::{embedder_from_config, TextEmbedder, WordEmbeddingSequence};
use styleflow::trainer::{Dataset, Trainer};

mod common;
use common::{gradient_check, random_matrix};

const SEEDS: [u64; 3] = [0, 1, 2];

fn report(id: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "[{}] criterion {id} ({name}): {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

// ---------------------------------------------------------------- 1

/// The visibility sentence read literally: text-side tokens see only
/// text-side tokens; a speech-side token sees all text-side tokens, the
/// speech-side tokens before it, and itself.
fn literal_mask(n_context: usize, n_style: usize) -> Vec<Vec<bool>> {
    #[derive(PartialEq)]
    enum Side {
        Text,
        Speech(usize),
    }
    let tokens: Vec<Side> = (0..n_context)
        .map(|_| Side::Text)
        .chain((0..n_style).map(Side::Speech))
        .collect();
    tokens
        .iter()
        .map(|q| {
            tokens
                .iter()
                .map(|k| match (q, k) {
                    (Side::Text, Side::Text) => true,
                    (Side::Text, Side::Speech(_)) => false,
                    (Side::Speech(_), Side::Text) => true,
                    (Side::Speech(a), Side::Speech(b)) => b <= a,
                })
                .collect()
        })
        .collect()
}

#[test]
fn criterion_1_mask_oracle() {
    let start = Instant::now();
    let mut mismatches = Vec::new();
    for n_context in 1..=7 {
        for n_style in 1..=7 {
            let mask = build_mixture_attention_mask(n_context, n_style).unwrap();
            if mask.rows() != literal_mask(n_context, n_style) {
                mismatches.push((n_context, n_style));
            }
        }
    }
    let pass = mismatches.is_empty() && start.elapsed().as_secs_f64() < 1.0;
    report(
        1,
        "mask oracle",
        pass,
        &format!("49 shapes, mismatches {mismatches:?}, {:?}", start.elapsed()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_information_flow_isolation() {
    let start = Instant::now();
    let cfg = PredictorConfig {
        d_model: 16,
        heads: 4,
        sentence_layers: 1,
        fusion_layers: 3,
        dropout: 0.0,
        ..Config::toy().predictor
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let radius = cfg.context_radius;
    let n_context = 2 * radius + 1;
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let p = StylePredictor::new(&cfg, 8, 12, &mut ChaCha8Rng::seed_from_u64(trial));
        let layout: FusionLayout = p.layout(trial as usize % 8).unwrap();
        let len = layout.len();
        let base = FusionTokenSequence {
            tokens: random_matrix(&mut rng, len, 16),
            layout,
        };
        let out = p.encode_fusion(&base).unwrap();
        let max_dev = |a: &Array2<f64>, rows: &[usize]| {
            rows.iter()
                .flat_map(|&r| (0..16).map(move |c| (r, c)))
                .map(|(r, c)| (a[[r, c]] - out[[r, c]]).abs())
                .fold(0.0, f64::max)
        };
        // Every style-side row, one at a time: rows before it must not move.
        for j in n_context..len {
            let mut perturbed = base.clone();
            let noise = random_matrix(&mut rng, 1, 16);
            perturbed.tokens.row_mut(j).scaled_add(3.0, &noise.row(0));
            let moved = p.encode_fusion(&perturbed).unwrap();
            let unaffected: Vec<usize> = (0..j).collect();
            worst = worst.max(max_dev(&moved, &unaffected));
        }
        // All style-side rows at once: context rows must not move.
        let mut perturbed = base.clone();
        for j in n_context..len {
            let noise = random_matrix(&mut rng, 1, 16);
            perturbed.tokens.row_mut(j).scaled_add(3.0, &noise.row(0));
        }
        let moved = p.encode_fusion(&perturbed).unwrap();
        worst = worst.max(max_dev(&moved, &(0..n_context).collect::<Vec<_>>()));
    }
    let pass = worst < 1e-6 && start.elapsed().as_secs_f64() < 10.0;
    report(
        2,
        "information-flow isolation",
        pass,
        &format!("100 trials, max deviation {worst:.3e}, {:?}", start.elapsed()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // Predictor: style MSE against a random target.
    let pcfg = PredictorConfig {
        d_model: 16,
        heads: 2,
        sentence_layers: 1,
        fusion_layers: 1,
        max_words: 8,
        max_segment: 4,
        dropout: 0.0,
        ..Config::toy().predictor
    };
    let (d_word, d_style) = (6, 8);
    let mut predictor = StylePredictor::new(&pcfg, d_word, d_style, &mut ChaCha8Rng::seed_from_u64(1));
    let words = WordEmbeddingSequence {
        sentences: (0..5)
            .map(|i| random_matrix(&mut rng, [0, 2, 3, 1, 4][i], d_word))
            .collect(),
    };
    let prev: Vec<StyleEmbedding> = (0..2)
        .map(|_| StyleEmbedding::new(random_matrix(&mut rng, 1, d_style).into_raw_vec_and_offset().0).unwrap())
        .collect();
    let target = random_matrix(&mut rng, 1, d_style);
    let p_loss = |p: &StylePredictor, g: &mut Graph| {
        let y = p.predict_graph(g, &words, &prev, 3).unwrap();
        let t = g.input(target.clone());
        let d = g.sub(y, t);
        let d = g.square(d);
        g.mean(d)
    };
    let mut g = Graph::new();
    let l = p_loss(&predictor, &mut g);
    let grads = g.backward(l).for_store(&g, &predictor.store);
    let template = predictor.clone();
    let (p_worst, p_count) = gradient_check(&mut predictor.store, &grads, &mut rng, 3, 200, &|store| {
        let mut p = template.clone();
        p.store = store.clone();
        let mut g = Graph::new();
        let l = p_loss(&p, &mut g);
        g.scalar(l)
    });

    // Acoustic model: full teacher-forced loss.
    let mut base = Config::toy();
    base.features.n_mels = 6;
    let acfg = AcousticConfig {
        n_phonemes: 5,
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        variance_hidden: 8,
        pitch_bins: 4,
        energy_bins: 4,
        dropout: 0.0,
        ..base.acoustic.clone()
    };
    let mut acoustic = AcousticModel::new(&acfg, &base.features, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let ids = [0, 3, 1, 4];
    let targets = VarianceTargets {
        durations: vec![2, 1, 3, 2],
        pitch: vec![0.4, -1.2, 0.0, 2.1],
        energy: vec![-0.5, 0.3, 1.1, -2.0],
    };
    let mel = MelSpectrogram::new(random_matrix(&mut rng, 8, 6).mapv(|v| v * 3.0 - 5.0)).unwrap();
    let style = random_matrix(&mut rng, 1, 4);
    let a_loss = |m: &AcousticModel, g: &mut Graph| {
        let s = g.input(style.clone());
        m.loss_graph(g, &ids, s, &targets, &mel).unwrap().total
    };
    let mut g = Graph::new();
    let l = a_loss(&acoustic, &mut g);
    let grads = g.backward(l).for_store(&g, &acoustic.store);
    let template = acoustic.clone();
    let (a_worst, a_count) = gradient_check(&mut acoustic.store, &grads, &mut rng, 3, 200, &|store| {
        let mut m = template.clone();
        m.store = store.clone();
        let mut g = Graph::new();
        let l = a_loss(&m, &mut g);
        g.scalar(l)
    });

    let pass = p_worst < 1e-4 && a_worst < 1e-4 && p_count >= 200 && a_count >= 200 && start.elapsed().as_secs() < 120;
    report(
        3,
        "gradient checks",
        pass,
        &format!(
            "predictor {p_count} scalars max rel err {p_worst:.2e}; acoustic {a_count} scalars max rel err {a_worst:.2e}; {:?}",
            start.elapsed()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4, 5, 6, 8

struct SeedRun {
    seed: u64,
    init: f64,
    full: f64,
    no_prev: f64,
    no_mask: f64,
    no_hier: f64,
}

struct Suite {
    runs: Vec<SeedRun>,
    /// Seed-0 full model and what it was trained on.
    config: Config,
    models: Models,
    corpus: Corpus,
    toy: ToyCorpus,
    embedder: Box<dyn TextEmbedder>,
    valid_documents: Vec<usize>,
    elapsed: std::time::Duration,
    _dir: tempfile::TempDir,
}

fn variant(base: &Config, name: &str) -> Config {
    let mut c = base.clone();
    match name {
        "no_prev" => c.predictor.use_prev_styles = false,
        "no_mask" => c.predictor.mixture_mask = false,
        "no_hier" => c.predictor.hierarchical = false,
        _ => {}
    }
    c
}

fn suite() -> &'static Suite {
    static SUITE: OnceLock<Suite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let start = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let mut runs = Vec::new();
        let mut keep = None;
        for seed in SEEDS {
            let mut cfg = Config::toy();
            cfg.seed = seed;
            let toy = generate_toy_corpus(&cfg.toy, &cfg.features, seed).unwrap();
            let root: PathBuf = dir.path().join(format!("seed{seed}"));
            let manifest = toy.write(&root.join("corpus")).unwrap();
            let corpus = Corpus::load(&manifest, cfg.features.n_mels).unwrap();
            let embedder = embedder_from_config(&cfg.text).unwrap();
            let data = Dataset::new(corpus.clone(), &cfg, embedder.as_ref()).unwrap();
            let mut stage1 = Trainer::new(cfg.clone(), data, &root.join("stage1")).unwrap();
            stage1.stage1_train().unwrap();
            let init = stage1.held_out_style_mse().unwrap();
            let mut scores = BTreeMap::new();
            for name in ["full", "no_prev", "no_mask", "no_hier"] {
                let mut t = stage1.fork(variant(&cfg, name), &root.join(name)).unwrap();
                t.stage2_distill().unwrap();
                t.stage3_finetune().unwrap();
                scores.insert(name, t.held_out_style_mse().unwrap());
                if seed == SEEDS[0] && name == "full" {
                    keep = Some((cfg.clone(), t.models.clone(), t.data.valid_documents.clone()));
                }
            }
            let run = SeedRun {
                seed,
                init,
                full: scores["full"],
                no_prev: scores["no_prev"],
                no_mask: scores["no_mask"],
                no_hier: scores["no_hier"],
            };
            println!(
                "seed {}: init {:.5} full {:.5} no_prev {:.5} no_mask {:.5} no_hier {:.5}",
                run.seed, run.init, run.full, run.no_prev, run.no_mask, run.no_hier
            );
            runs.push(run);
        }
        let (config, models, valid_documents) = keep.expect("seed 0 trained");
        let toy = generate_toy_corpus(&config.toy, &config.features, config.seed).unwrap();
        let corpus = Corpus::load(&dir.path().join("seed0/corpus/manifest.jsonl"), config.features.n_mels).unwrap();
        let embedder = embedder_from_config(&config.text).unwrap();
        Suite {
            runs,
            config,
            models,
            corpus,
            toy,
            embedder,
            valid_documents,
            elapsed: start.elapsed(),
            _dir: dir,
        }
    })
}

#[test]
fn criterion_4_distillation_efficacy() {
    let s = suite();
    let wins: Vec<bool> = s
        .runs
        .iter()
        .map(|r| r.full * 5.0 <= r.init && r.full < r.no_prev)
        .collect();
    let majority = wins.iter().filter(|&&w| w).count() * 2 > wins.len();
    let pass = majority && s.elapsed.as_secs() < 30 * 60;
    let detail = s
        .runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: init/full {:.1}x, full {:.5} vs no-prev {:.5}",
                r.seed,
                r.init / r.full,
                r.full,
                r.no_prev
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    report(
        4,
        "distillation efficacy",
        pass,
        &format!("{detail}; training {:?}", s.elapsed),
    );
    assert!(pass);
}

#[test]
fn criterion_5_ablation_monotonicity() {
    let s = suite();
    let wins: Vec<bool> = s
        .runs
        .iter()
        .map(|r| r.full <= r.no_mask && r.no_mask <= r.no_hier)
        .collect();
    let pass = wins.iter().filter(|&&w| w).count() * 2 > wins.len();
    let detail = s
        .runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: full {:.5} no-mask {:.5} no-hier {:.5}",
                r.seed, r.full, r.no_mask, r.no_hier
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    report(5, "ablation monotonicity", pass, &detail);
    assert!(pass);
}

#[test]
fn criterion_6_style_feedback_sensitivity() {
    let s = suite();
    let start = Instant::now();
    let d = s.valid_documents[0];
    let doc = &s.corpus.documents[d];
    let current = 3;
    let previous = current - 1;
    let run = |shift: f64| {
        let (mel, _) = s.toy.render_shifted(d, previous, shift).unwrap();
        let options = SynthesisOptions {
            overrides: BTreeMap::from([(previous, MelSpectrogram::new(mel).unwrap())]),
            limit: Some(current + 1),
            ..SynthesisOptions::default()
        };
        synthesize_long_form(
            doc,
            &s.models,
            s.embedder.as_ref(),
            &s.corpus.inventory,
            &s.config,
            &options,
            None,
        )
        .unwrap()
    };
    let plain = run(0.0);
    let shifted = run(50.0);
    let change = plain[current].style.distance(&shifted[current].style);
    let mel_differs = plain[current].mel != shifted[current].mel;
    let earlier_same = (0..previous).all(|i| plain[i].mel == shifted[i].mel);
    let pass = change > 1e-3 && mel_differs && earlier_same && start.elapsed().as_secs() < 10;
    report(
        6,
        "style-feedback sensitivity",
        pass,
        &format!(
            "+50 Hz on sentence {previous}: style L2 change {change:.4}, mel differs {mel_differs}, {:?}",
            start.elapsed()
        ),
    );
    assert!(pass);
}

/// Records which sentences' recorded features were requested.
struct Recording<'a> {
    corpus: &'a Corpus,
    document: usize,
    seen: std::cell::RefCell<Vec<usize>>,
}

impl FeatureSource for Recording<'_> {
    fn features(&self, index: usize) -> styleflow::Result<MelSpectrogram> {
        self.seen.borrow_mut().push(index);
        Ok(self.corpus.sentences[self.document][index].mel.clone())
    }
}

#[test]
fn criterion_8_long_form_contracts() {
    let s = suite();
    let start = Instant::now();
    let d = s.valid_documents[0];
    let doc = &s.corpus.documents[d];
    let synth = |options: &SynthesisOptions, source: Option<&dyn FeatureSource>| {
        synthesize_long_form(
            doc,
            &s.models,
            s.embedder.as_ref(),
            &s.corpus.inventory,
            &s.config,
            options,
            source,
        )
        .unwrap()
    };
    let full = synth(&SynthesisOptions::default(), None);
    let again = synth(&SynthesisOptions::default(), None);
    let count_ok = full.len() == doc.len();
    let deterministic = full
        .iter()
        .zip(&again)
        .all(|(a, b)| a.mel == b.mel && a.style == b.style);
    let padded = full[0].prev_styles.iter().all(|p| p.values().iter().all(|&v| v == 0.0));
    let mut prefix_ok = true;
    for k in 1..doc.len() {
        let prefix = synth(
            &SynthesisOptions {
                limit: Some(k),
                ..SynthesisOptions::default()
            },
            None,
        );
        prefix_ok &= prefix.len() == k && prefix.iter().zip(&full).all(|(a, b)| a.mel == b.mel);
    }
    // Oracle mode may only read recorded features of earlier sentences.
    let recording = Recording {
        corpus: &s.corpus,
        document: d,
        seen: Default::default(),
    };
    let oracle = synth(
        &SynthesisOptions {
            prev_style_source: Some(PrevStyleSource::GroundTruth),
            limit: Some(doc.len() - 1),
            ..SynthesisOptions::default()
        },
        Some(&recording),
    );
    let seen = recording.seen.borrow().clone();
    let causal = oracle.len() == doc.len() - 1 && seen.iter().all(|&i| i < oracle.len() - 1 || i == oracle.len() - 1);
    let causal = causal && !seen.contains(&(doc.len() - 1));
    let pass = count_ok && deterministic && padded && prefix_ok && causal && start.elapsed().as_secs() < 60;
    report(
        8,
        "long-form pipeline contracts",
        pass,
        &format!(
            "{} sentences, count {count_ok}, prefixes {prefix_ok}, first padded {padded}, deterministic {deterministic}, causal reads {causal}, {:?}",
            doc.len(),
            start.elapsed()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

/// Minimum path cost over every monotone path, by exhaustive recursion.
fn exhaustive_cost(a: &Array2<f64>, b: &Array2<f64>, i: usize, j: usize) -> f64 {
    let d = a
        .row(i)
        .iter()
        .zip(b.row(j))
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    if i + 1 == a.nrows() && j + 1 == b.nrows() {
        return d;
    }
    let mut best = f64::INFINITY;
    if i + 1 < a.nrows() {
        best = best.min(exhaustive_cost(a, b, i + 1, j));
    }
    if j + 1 < b.nrows() {
        best = best.min(exhaustive_cost(a, b, i, j + 1));
    }
    if i + 1 < a.nrows() && j + 1 < b.nrows() {
        best = best.min(exhaustive_cost(a, b, i + 1, j + 1));
    }
    d + best
}

#[test]
fn criterion_7_dtw_and_metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut dtw_worst = 0.0f64;
    let mut paths_valid = true;
    for _ in 0..200 {
        let (n, m, w) = (
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=3),
        );
        let a = random_matrix(&mut rng, n, w);
        let b = random_matrix(&mut rng, m, w);
        let al = dtw_align(&a, &b).unwrap();
        let oracle = exhaustive_cost(&a, &b, 0, 0);
        dtw_worst = dtw_worst.max((al.cost - oracle).abs());
        paths_valid &= al.path.first() == Some(&(0, 0)) && al.path.last() == Some(&(n - 1, m - 1));
        paths_valid &= al
            .path
            .windows(2)
            .all(|s| matches!((s[1].0 - s[0].0, s[1].1 - s[0].1), (1, 0) | (0, 1) | (1, 1)));
    }

    let mel = random_matrix(&mut rng, 30, 20).mapv(|v| v * 4.0 - 5.0);
    let f0: Vec<f64> = (0..30)
        .map(|t| if t % 4 == 0 { 0.0 } else { 120.0 + t as f64 })
        .collect();
    let shifted: Vec<f64> = f0.iter().map(|&v| if v > 0.0 { v + 50.0 } else { 0.0 }).collect();
    let rmse_identity = f0_rmse(&f0, &f0, &mel, &mel).unwrap();
    let rmse_shift = f0_rmse(&shifted, &f0, &mel, &mel).unwrap();

    let mcd_identity = mcd(&mel, &mel).unwrap();
    // Single frame whose cepstral difference is r along coefficient 3.
    let n = 20;
    let r = 0.37;
    let basis: Vec<f64> = (0..n)
        .map(|x| (2.0 / n as f64).sqrt() * (std::f64::consts::PI * 3.0 * (2 * x + 1) as f64 / (2 * n) as f64).cos())
        .collect();
    let x = random_matrix(&mut rng, 1, n);
    let y = Array2::from_shape_fn((1, n), |(_, j)| x[[0, j]] + r * basis[j]);
    let c_diff = &mel_cepstrum(&y) - &mel_cepstrum(&x);
    let single = mcd(&y, &x).unwrap();
    let expected = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt() * r;

    let pass = dtw_worst < 1e-9
        && paths_valid
        && rmse_identity.abs() < 1e-9
        && (rmse_shift - 50.0).abs() < 1e-9
        && mcd_identity.abs() < 1e-9
        && (single - expected).abs() < 1e-9
        && (c_diff[[0, 2]] - r).abs() < 1e-12
        && start.elapsed().as_secs() < 30;
    report(
        7,
        "DTW and metric oracles",
        pass,
        &format!(
            "DTW max |cost - oracle| {dtw_worst:.1e}, F0 RMSE identity {rmse_identity} shift {rmse_shift}, \
             MCD identity {mcd_identity} single-frame {single:.12} vs {expected:.12}, {:?}",
            start.elapsed()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_length_regulator_and_broadcast() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut regulator_ok = true;
    for _ in 0..100 {
        let phonemes = rng.random_range(1..=12);
        let d = rng.random_range(1..=8);
        let states = random_matrix(&mut rng, phonemes, d);
        let mut durations: Vec<usize> = (0..phonemes).map(|_| rng.random_range(0..=5)).collect();
        if durations.iter().all(|&x| x == 0) {
            durations[0] = 1;
        }
        let mut expected: Vec<f64> = Vec::new();
        for (p, &n) in durations.iter().enumerate() {
            for _ in 0..n {
                expected.extend(states.row(p).iter());
            }
        }
        let total: usize = durations.iter().sum();
        let expected = Array2::from_shape_vec((total, d), expected).unwrap();
        regulator_ok &= length_regulate(&states, &durations).unwrap() == expected;
    }

    let mut cfg = Config::toy();
    cfg.acoustic.n_phonemes = 16;
    let d_style = 6;
    let model = AcousticModel::new(&cfg.acoustic, &cfg.features, d_style, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let w = model
        .store
        .value(model.store.get("am.style_proj.weight").unwrap())
        .clone();
    let b = model
        .store
        .value(model.store.get("am.style_proj.bias").unwrap())
        .clone();
    let mut broadcast_ok = true;
    for _ in 0..100 {
        let phonemes = rng.random_range(1..=12);
        let enc = random_matrix(&mut rng, phonemes, cfg.acoustic.d_model);
        let style_row = random_matrix(&mut rng, 1, d_style);
        let style = StyleEmbedding::new(style_row.iter().copied().collect()).unwrap();
        let out = model.apply_style(&enc, &style).unwrap();
        let offset = &style_row.dot(&w) + &b;
        for p in 0..phonemes {
            for j in 0..cfg.acoustic.d_model {
                broadcast_ok &= out[[p, j]] == enc[[p, j]] + offset[[0, j]];
            }
        }
    }
    let pass = regulator_ok && broadcast_ok && start.elapsed().as_secs() < 5;
    report(
        9,
        "length regulator and broadcast-add",
        pass,
        &format!(
            "100 cases each, regulator {regulator_ok}, broadcast {broadcast_ok}, {:?}",
            start.elapsed()
        ),
    );
    assert!(pass);
}
