use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use plotters::prelude::*;
use tracing::info;

use styleflow::config::PrevStyleSource;
use styleflow::corpus::toy::{generate_toy_corpus, MANIFEST_FILE};
use styleflow::corpus::{read_features, Corpus};
use styleflow::inference::{evaluate_documents, synthesize_long_form, write_outputs, CorpusFeatures, SynthesisOptions};
use styleflow::models::Models;
use styleflow::style_predictor::build_mixture_attention_mask;
use styleflow::text_embedder::embedder_from_config;
use styleflow::trainer::{Dataset, LossRecord, Trainer, LOSS_LOG, RESOLVED_CONFIG};
use styleflow::Config;

/// Context-aware speaking-style prediction for long-form speech synthesis.
#[derive(Parser)]
#[command(name = "styleflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration. Defaults to the run directory's resolved
    /// configuration if present, else the built-in toy preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory; every output goes below it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct CorpusArg {
    /// Corpus manifest. Defaults to `<out>/corpus/manifest.jsonl`.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CheckpointArg {
    /// Directory holding the three checkpoints. Defaults to
    /// `<out>/checkpoints/final`.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    /// Training loss curves from the loss log.
    Loss,
    /// Synthesized against recorded F0 for one sentence.
    Pitch,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic toy corpus into `<out>/corpus`.
    MakeToyCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Run one training stage, or all remaining ones.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long, value_enum)]
        stage: Stage,
    },
    /// Synthesize one paragraph sentence by sentence.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        checkpoints: CheckpointArg,
        /// Paragraph id from the manifest.
        #[arg(long)]
        doc: String,
        /// Replace the previous-speech features of sentence INDEX with a
        /// feature file when it serves as previous speech. Repeatable.
        #[arg(long = "override-prev", value_name = "INDEX=PATH")]
        override_prev: Vec<String>,
        /// Take previous styles from the recorded features (oracle mode).
        #[arg(long)]
        oracle: bool,
    },
    /// Synthesize paragraphs and score them against the recordings.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        checkpoints: CheckpointArg,
        /// Paragraph ids to evaluate. Defaults to every paragraph.
        #[arg(long)]
        doc: Vec<String>,
        #[arg(long)]
        oracle: bool,
    },
    /// Print the mixture attention mask.
    DumpMask {
        #[arg(long)]
        n_context: usize,
        #[arg(long)]
        n_style: usize,
    },
    /// Render an SVG plot into `<out>/plots`.
    Plot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        checkpoints: CheckpointArg,
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Paragraph id (pitch plots).
        #[arg(long)]
        doc: Option<String>,
        /// Sentence index within the paragraph (pitch plots).
        #[arg(long, default_value_t = 0)]
        sentence: usize,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "styleflow=info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::MakeToyCorpus { common } => make_toy_corpus(&common),
        Command::Train { common, corpus, stage } => train(&common, &corpus, stage),
        Command::Synthesize {
            common,
            corpus,
            checkpoints,
            doc,
            override_prev,
            oracle,
        } => synthesize(&common, &corpus, &checkpoints, &doc, &override_prev, oracle),
        Command::Evaluate {
            common,
            corpus,
            checkpoints,
            doc,
            oracle,
        } => evaluate(&common, &corpus, &checkpoints, &doc, oracle),
        Command::DumpMask { n_context, n_style } => {
            print!("{}", build_mixture_attention_mask(n_context, n_style)?);
            Ok(())
        }
        Command::Plot {
            common,
            corpus,
            checkpoints,
            kind,
            doc,
            sentence,
        } => match kind {
            PlotKind::Loss => plot_loss(&common),
            PlotKind::Pitch => {
                let doc = doc.context("--doc is required for pitch plots")?;
                plot_pitch(&common, &corpus, &checkpoints, &doc, sentence)
            }
        },
    }
}

/// Resolves the configuration and writes its snapshot into the run
/// directory.
fn resolve_config(common: &Common) -> Result<Config> {
    let resolved = common.out.join(RESOLVED_CONFIG);
    let config = match &common.config {
        Some(path) => Config::load(path, &common.overrides)?,
        None if resolved.exists() => Config::load(&resolved, &common.overrides)?,
        None => Config::from_toml_str(&Config::toy().to_toml(), &common.overrides)?,
    };
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    config.save(&resolved)?;
    Ok(config)
}

fn load_corpus(common: &Common, arg: &CorpusArg, config: &Config) -> Result<Corpus> {
    let manifest = arg
        .corpus
        .clone()
        .unwrap_or_else(|| common.out.join("corpus").join(MANIFEST_FILE));
    Corpus::load(&manifest, config.features.n_mels).with_context(|| format!("loading corpus {}", manifest.display()))
}

fn load_models(common: &Common, arg: &CheckpointArg, config: &Config, corpus: &Corpus) -> Result<Models> {
    let dir = arg
        .checkpoints
        .clone()
        .unwrap_or_else(|| common.out.join("checkpoints").join("final"));
    Models::load_dir(config, corpus.inventory.len(), &dir)
        .with_context(|| format!("loading checkpoints from {}", dir.display()))
}

fn document(corpus: &Corpus, id: &str) -> Result<usize> {
    corpus
        .document(id)
        .with_context(|| format!("paragraph `{id}` is not in the corpus"))
}

fn options(oracle: bool) -> SynthesisOptions {
    SynthesisOptions {
        prev_style_source: oracle.then_some(PrevStyleSource::GroundTruth),
        ..SynthesisOptions::default()
    }
}

fn make_toy_corpus(common: &Common) -> Result<()> {
    let config = resolve_config(common)?;
    let toy = generate_toy_corpus(&config.toy, &config.features, config.seed)?;
    let manifest = toy.write(&common.out.join("corpus"))?;
    info!(sentences = toy.num_sentences(), manifest = %manifest.display(), "toy corpus written");
    println!("{}", manifest.display());
    Ok(())
}

fn train(common: &Common, corpus: &CorpusArg, stage: Stage) -> Result<()> {
    let config = resolve_config(common)?;
    let corpus = load_corpus(common, corpus, &config)?;
    let embedder = embedder_from_config(&config.text)?;
    let data = Dataset::new(corpus, &config, embedder.as_ref())?;
    let mut trainer = Trainer::new(config, data, &common.out)?;
    let reports = match stage {
        Stage::One => vec![trainer.stage1_train()?],
        Stage::Two => vec![trainer.stage2_distill()?],
        Stage::Three => vec![trainer.stage3_finetune()?],
        Stage::All => trainer.run_all()?,
    };
    for r in reports {
        println!("{}", serde_json::to_string(&r)?);
    }
    Ok(())
}

fn synthesize(
    common: &Common,
    corpus: &CorpusArg,
    checkpoints: &CheckpointArg,
    doc: &str,
    override_prev: &[String],
    oracle: bool,
) -> Result<()> {
    let config = resolve_config(common)?;
    let corpus = load_corpus(common, corpus, &config)?;
    let models = load_models(common, checkpoints, &config, &corpus)?;
    let embedder = embedder_from_config(&config.text)?;
    let d = document(&corpus, doc)?;
    let mut opts = options(oracle);
    let mut overrides = BTreeMap::new();
    for spec in override_prev {
        let (index, path) = spec
            .split_once('=')
            .with_context(|| format!("--override-prev `{spec}` is not INDEX=PATH"))?;
        let index: usize = index
            .parse()
            .with_context(|| format!("bad sentence index in `{spec}`"))?;
        let mel = read_features(Path::new(path))?;
        mel.expect_mels(config.features.n_mels)?;
        overrides.insert(index, mel);
    }
    opts.overrides = overrides;
    let source = CorpusFeatures {
        corpus: &corpus,
        document: d,
    };
    let outputs = synthesize_long_form(
        &corpus.documents[d],
        &models,
        embedder.as_ref(),
        &corpus.inventory,
        &config,
        &opts,
        Some(&source),
    )?;
    let dir = common.out.join("synth").join(doc);
    write_outputs(&dir, doc, &outputs, &config)?;
    info!(sentences = outputs.len(), dir = %dir.display(), "synthesized");
    println!("{}", dir.display());
    Ok(())
}

fn evaluate(
    common: &Common,
    corpus: &CorpusArg,
    checkpoints: &CheckpointArg,
    docs: &[String],
    oracle: bool,
) -> Result<()> {
    let config = resolve_config(common)?;
    let corpus = load_corpus(common, corpus, &config)?;
    let models = load_models(common, checkpoints, &config, &corpus)?;
    let embedder = embedder_from_config(&config.text)?;
    let indices = if docs.is_empty() {
        (0..corpus.documents.len()).collect()
    } else {
        docs.iter().map(|d| document(&corpus, d)).collect::<Result<Vec<_>>>()?
    };
    let report = evaluate_documents(&corpus, &indices, &models, embedder.as_ref(), &config, &options(oracle))?;
    let dir = common.out.join("eval");
    std::fs::create_dir_all(&dir)?;
    report.write(&dir.join("metrics.jsonl"), &dir.join("summary.json"))?;
    for s in report.summary() {
        println!("{}", serde_json::to_string(&s)?);
    }
    Ok(())
}

const COLORS: [RGBColor; 6] = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];

fn plot_loss(common: &Common) -> Result<()> {
    let log = common.out.join(LOSS_LOG);
    let text = std::fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: LossRecord = serde_json::from_str(line)?;
        for (name, v) in &r.components {
            series
                .entry(format!("stage {} {name}", r.stage))
                .or_default()
                .push((r.iteration as f64, *v));
        }
    }
    if series.is_empty() {
        bail!("{} holds no records", log.display());
    }
    let x_max = series.values().flatten().map(|p| p.0).fold(1.0, f64::max);
    let y_max = series.values().flatten().map(|p| p.1).fold(f64::MIN_POSITIVE, f64::max);
    let y_min = series
        .values()
        .flatten()
        .map(|p| p.1)
        .fold(f64::INFINITY, f64::min)
        .max(y_max * 1e-6);
    let dir = common.out.join("plots");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("loss.svg");
    let root = SVGBackend::new(&path, (900, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x_max, (y_min..y_max).log_scale())?;
    chart.configure_mesh().x_desc("iteration").y_desc("loss").draw()?;
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(points.iter().map(|&(x, y)| (x, y.max(y_min))), color))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE)
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    println!("{}", path.display());
    Ok(())
}

fn plot_pitch(
    common: &Common,
    corpus: &CorpusArg,
    checkpoints: &CheckpointArg,
    doc: &str,
    sentence: usize,
) -> Result<()> {
    let config = resolve_config(common)?;
    let corpus = load_corpus(common, corpus, &config)?;
    let models = load_models(common, checkpoints, &config, &corpus)?;
    let embedder = embedder_from_config(&config.text)?;
    let d = document(&corpus, doc)?;
    if sentence >= corpus.documents[d].len() {
        bail!("paragraph `{doc}` has {} sentences", corpus.documents[d].len());
    }
    let opts = SynthesisOptions {
        limit: Some(sentence + 1),
        ..SynthesisOptions::default()
    };
    let outputs = synthesize_long_form(
        &corpus.documents[d],
        &models,
        embedder.as_ref(),
        &corpus.inventory,
        &config,
        &opts,
        None,
    )?;
    let synthesized = outputs[sentence].f0_track(&config);
    let recorded = corpus.sentences[d][sentence]
        .f0
        .clone()
        .context("the corpus has no F0 track for this sentence")?;
    let tracks = [("recorded", recorded), ("synthesized", synthesized)];
    let x_max = tracks.iter().map(|t| t.1.len()).max().unwrap_or(1).max(1) as f64;
    let y_max = tracks.iter().flat_map(|t| t.1.iter().copied()).fold(1.0, f64::max) * 1.1;
    let dir = common.out.join("plots");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("pitch_{doc}_{sentence}.svg"));
    let root = SVGBackend::new(&path, (900, 400)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("F0, {doc} sentence {sentence}"), ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)?;
    chart.configure_mesh().x_desc("frame").y_desc("Hz").draw()?;
    for (i, (name, track)) in tracks.iter().enumerate() {
        let color = COLORS[i];
        // Unvoiced frames break the line.
        let mut segment = Vec::new();
        let mut segments = Vec::new();
        for (t, &v) in track.iter().enumerate() {
            if v > 0.0 {
                segment.push((t as f64, v));
            } else if !segment.is_empty() {
                segments.push(std::mem::take(&mut segment));
            }
        }
        segments.push(segment);
        for (k, s) in segments.into_iter().enumerate() {
            let drawn = chart.draw_series(LineSeries::new(s, color))?;
            if k == 0 {
                drawn
                    .label(*name)
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
            }
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE)
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    println!("{}", path.display());
    Ok(())
}
