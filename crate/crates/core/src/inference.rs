//! Sentence-by-sentence paragraph synthesis with style feedback.
//!
//! Sentence `i` is synthesized from the text of its context window and the
//! styles of sentences `i-N..i-1`, which are extracted from previously
//! synthesized features, from caller-supplied overrides, or (oracle mode)
//! from recorded features of those earlier sentences. Recorded features of
//! the current or later sentences are never requested.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::acoustic_model::VarianceTargets;
use crate::config::{Config, PrevStyleSource};
use crate::corpus::{
    build_context_window, write_features, Corpus, MelSpectrogram, ParagraphDocument, PhonemeInventory,
};
use crate::error::{Error, Result};
use crate::metrics::{duration_mse, f0_rmse, mcd, style_mse, EvaluationReport};
use crate::models::Models;
use crate::style_extractor::StyleEmbedding;
use crate::text_embedder::TextEmbedder;

/// Recorded features of a paragraph's sentences, fetched on demand.
pub trait FeatureSource {
    fn features(&self, index: usize) -> Result<MelSpectrogram>;
}

/// Reads features of one corpus paragraph.
pub struct CorpusFeatures<'a> {
    pub corpus: &'a Corpus,
    pub document: usize,
}

impl FeatureSource for CorpusFeatures<'_> {
    fn features(&self, index: usize) -> Result<MelSpectrogram> {
        let doc = &self.corpus.sentences[self.document];
        doc.get(index)
            .map(|s| s.mel.clone())
            .ok_or(Error::IndexOutOfRange { index, len: doc.len() })
    }
}

#[derive(Clone, Debug, Default)]
pub struct SynthesisOptions {
    pub prev_style_source: Option<PrevStyleSource>,
    /// Replacement previous-speech features, by sentence index. When
    /// sentence `j` serves as previous speech, its override (if any) is
    /// used instead of the synthesized or recorded features.
    pub overrides: BTreeMap<usize, MelSpectrogram>,
    /// Synthesize only the first `limit` sentences.
    pub limit: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SentenceOutput {
    pub id: String,
    pub mel: MelSpectrogram,
    pub style: StyleEmbedding,
    /// Styles that filled the previous-style slots (zero for padding).
    pub prev_styles: Vec<StyleEmbedding>,
    pub variances: VarianceTargets,
}

impl SentenceOutput {
    /// Frame-level F0 in Hz from the predicted per-phoneme pitch.
    pub fn f0_track(&self, config: &Config) -> Vec<f64> {
        let norm = config.acoustic.pitch;
        self.variances
            .durations
            .iter()
            .zip(&self.variances.pitch)
            .flat_map(|(&d, &p)| std::iter::repeat_n((p * norm.std + norm.mean).max(0.0), d))
            .collect()
    }
}

/// Synthesizes `doc` in order. `recorded` is consulted only in oracle mode
/// and only for sentences before the current one.
pub fn synthesize_long_form(
    doc: &ParagraphDocument,
    models: &Models,
    embedder: &dyn TextEmbedder,
    inventory: &PhonemeInventory,
    config: &Config,
    options: &SynthesisOptions,
    recorded: Option<&dyn FeatureSource>,
) -> Result<Vec<SentenceOutput>> {
    if doc.is_empty() {
        return Err(Error::Empty(format!("paragraph {} has no sentences", doc.paragraph_id)));
    }
    let source = options.prev_style_source.unwrap_or(config.inference.prev_style_source);
    if source == PrevStyleSource::GroundTruth && recorded.is_none() {
        return Err(Error::Config(
            "ground-truth previous styles need recorded features".into(),
        ));
    }
    let radius = models.predictor.radius();
    let d_style = models.extractor.d_style();
    let n = options.limit.unwrap_or(doc.len()).min(doc.len());
    let mut outputs: Vec<SentenceOutput> = Vec::with_capacity(n);
    // Style of each earlier sentence as previous speech, computed once.
    let mut spoken: Vec<StyleEmbedding> = Vec::with_capacity(n);
    for i in 0..n {
        let mut window = build_context_window(doc, i, radius, d_style)?;
        for k in 0..radius {
            if let Some(j) = window.past_index(k) {
                window.set_prev_style(k, spoken[j].clone())?;
            }
        }
        let style = models.predictor.predict_style(&window, embedder)?;
        let ids = inventory.encode(&doc.sentences[i].phonemes)?;
        let (mel, variances) = models.acoustic.synthesize(&ids, &style, None)?;
        debug!(sentence = %doc.sentences[i].id, frames = mel.frames(), "synthesized");
        let as_previous = match options.overrides.get(&i) {
            Some(m) => m.clone(),
            None => match source {
                PrevStyleSource::Synthesized => mel.clone(),
                PrevStyleSource::GroundTruth => recorded.expect("checked above").features(i)?,
            },
        };
        spoken.push(models.extractor.extract_style(&as_previous)?);
        outputs.push(SentenceOutput {
            id: doc.sentences[i].id.clone(),
            mel,
            style,
            prev_styles: window.prev_styles,
            variances,
        });
    }
    Ok(outputs)
}

/// Row-wise concatenation with `silence_frames` rows of `floor` between
/// consecutive inputs.
pub fn concat_features(mels: &[MelSpectrogram], silence_frames: usize, floor: f64) -> Result<MelSpectrogram> {
    let first = mels
        .first()
        .ok_or_else(|| Error::Empty("nothing to concatenate".into()))?;
    let width = first.n_mels();
    if let Some(bad) = mels.iter().find(|m| m.n_mels() != width) {
        return Err(Error::shape(format!(
            "cannot concatenate {} and {} mel bins",
            width,
            bad.n_mels()
        )));
    }
    let silence = Array2::from_elem((silence_frames, width), floor);
    let mut parts = Vec::with_capacity(2 * mels.len());
    for (i, m) in mels.iter().enumerate() {
        if i > 0 && silence_frames > 0 {
            parts.push(silence.view());
        }
        parts.push(m.values().view());
    }
    MelSpectrogram::new(concatenate(Axis(0), &parts).expect("equal widths"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputEntry {
    pub sentence_id: String,
    pub path: String,
    pub frames: usize,
}

/// Writes one feature file per sentence, the combined file and a JSON-lines
/// manifest of the outputs into `dir`.
pub fn write_outputs(dir: &Path, paragraph_id: &str, outputs: &[SentenceOutput], config: &Config) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for o in outputs {
        let name = format!("{}.mel", o.id);
        write_features(&dir.join(&name), &o.mel)?;
        lines += &serde_json::to_string(&OutputEntry {
            sentence_id: o.id.clone(),
            path: name,
            frames: o.mel.frames(),
        })?;
        lines.push('\n');
    }
    let mels: Vec<MelSpectrogram> = outputs.iter().map(|o| o.mel.clone()).collect();
    let combined = concat_features(&mels, config.inference.silence_frames, config.features.mel_min)?;
    write_features(&dir.join(format!("{paragraph_id}.mel")), &combined)?;
    let manifest = dir.join("outputs.jsonl");
    std::fs::write(&manifest, lines).map_err(|e| Error::io(&manifest, e))
}

/// Synthesizes each listed paragraph and scores every sentence against the
/// recordings: style MSE against the extractor's style of the recorded
/// features, MCD, log-duration MSE and (when an F0 track exists) F0 RMSE.
pub fn evaluate_documents(
    corpus: &Corpus,
    documents: &[usize],
    models: &Models,
    embedder: &dyn TextEmbedder,
    config: &Config,
    options: &SynthesisOptions,
) -> Result<EvaluationReport> {
    let mut report = EvaluationReport::default();
    for &d in documents {
        let source = CorpusFeatures { corpus, document: d };
        let outputs = synthesize_long_form(
            &corpus.documents[d],
            models,
            embedder,
            &corpus.inventory,
            config,
            options,
            Some(&source),
        )?;
        for (o, s) in outputs.iter().zip(&corpus.sentences[d]) {
            let target = models.extractor.extract_style(&s.mel)?;
            report.push(&o.id, "style_mse", style_mse(&o.style, &target)?);
            report.push(&o.id, "mcd", mcd(o.mel.values(), s.mel.values())?);
            report.push(
                &o.id,
                "duration_mse",
                duration_mse(&o.variances.durations, &s.record.durations)?,
            );
            if let Some(f0) = &s.f0 {
                match f0_rmse(&o.f0_track(config), f0, o.mel.values(), s.mel.values()) {
                    Ok(v) => report.push(&o.id, "f0_rmse", v),
                    Err(Error::Empty(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(report)
}
