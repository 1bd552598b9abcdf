//! Sentence records, paragraph documents, manifest ingestion and the
//! in-memory corpus used by training and evaluation.
//!
//! The manifest is UTF-8 with one JSON object per line:
//!
//! ```text
//! {"id":"p000_s00","paragraph_id":"p000","index_in_paragraph":0,"text":"...",
//!  "phonemes":["k","a"],"durations":[3,4],"mel_path":"mels/p000_s00.melf","f0_path":null}
//! ```
//!
//! Feature paths are resolved relative to the manifest's directory. Blank
//! lines are skipped.

pub mod features;
pub mod toy;
pub mod window;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use features::{read_f0, read_features, write_f0, write_features, MelSpectrogram};
pub use window::{build_context_window, ContextWindow};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentenceRecord {
    pub id: String,
    pub paragraph_id: String,
    pub index_in_paragraph: usize,
    pub text: String,
    pub phonemes: Vec<String>,
    /// Frames per phoneme.
    pub durations: Vec<usize>,
    pub mel_path: String,
    #[serde(default)]
    pub f0_path: Option<String>,
}

impl SentenceRecord {
    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParagraphDocument {
    pub paragraph_id: String,
    pub sentences: Vec<SentenceRecord>,
}

impl ParagraphDocument {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

fn resolve(root: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Parses and validates a manifest. Each record's durations are checked
/// against its feature file header (and F0 track, if any).
pub fn load_manifest(path: &Path) -> Result<Vec<ParagraphDocument>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<SentenceRecord>> = HashMap::new();

    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SentenceRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        validate_record(&rec, root)?;
        if !groups.contains_key(&rec.paragraph_id) {
            order.push(rec.paragraph_id.clone());
        }
        groups.entry(rec.paragraph_id.clone()).or_default().push(rec);
    }

    let mut docs = Vec::with_capacity(order.len());
    for pid in order {
        let mut sentences = groups.remove(&pid).expect("grouped above");
        sentences.sort_by_key(|s| s.index_in_paragraph);
        for (i, s) in sentences.iter().enumerate() {
            if s.index_in_paragraph != i {
                return Err(Error::InvalidRecord {
                    record: s.id.clone(),
                    message: format!(
                        "paragraph {pid}: expected index_in_paragraph {i}, found {}",
                        s.index_in_paragraph
                    ),
                });
            }
        }
        docs.push(ParagraphDocument {
            paragraph_id: pid,
            sentences,
        });
    }
    Ok(docs)
}

fn validate_record(rec: &SentenceRecord, root: &Path) -> Result<()> {
    if rec.durations.len() != rec.phonemes.len() {
        return Err(Error::InvalidRecord {
            record: rec.id.clone(),
            message: format!("{} durations for {} phonemes", rec.durations.len(), rec.phonemes.len()),
        });
    }
    let (frames, _) = features::read_shape(&resolve(root, &rec.mel_path))?;
    if rec.total_frames() != frames {
        return Err(Error::DurationMismatch {
            sentence_id: rec.id.clone(),
            durations: rec.total_frames(),
            frames,
        });
    }
    if let Some(f0) = &rec.f0_path {
        let (rows, _) = features::read_shape(&resolve(root, f0))?;
        if rows != frames {
            return Err(Error::InvalidRecord {
                record: rec.id.clone(),
                message: format!("F0 track has {rows} frames, mel has {frames}"),
            });
        }
    }
    Ok(())
}

pub fn write_manifest(path: &Path, docs: &[ParagraphDocument]) -> Result<()> {
    let mut out = Vec::new();
    for s in docs.iter().flat_map(|d| &d.sentences) {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Ordered phoneme symbol list; ids are line positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeInventory {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl PhonemeInventory {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || index.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!(
                    "phoneme inventory: bad or duplicate symbol `{s}`"
                )));
            }
        }
        if symbols.is_empty() {
            return Err(Error::Config("phoneme inventory is empty".into()));
        }
        Ok(Self { symbols, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.symbols.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn encode(&self, phonemes: &[String]) -> Result<Vec<usize>> {
        phonemes
            .iter()
            .map(|p| {
                self.id(p)
                    .ok_or_else(|| Error::Config(format!("phoneme `{p}` not in inventory")))
            })
            .collect()
    }
}

/// One sentence with its features loaded.
#[derive(Clone, Debug)]
pub struct LoadedSentence {
    pub record: SentenceRecord,
    pub mel: MelSpectrogram,
    pub f0: Option<Vec<f64>>,
}

/// A manifest with every feature file read into memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub documents: Vec<ParagraphDocument>,
    /// `sentences[d][i]` belongs to `documents[d].sentences[i]`.
    pub sentences: Vec<Vec<LoadedSentence>>,
    pub inventory: PhonemeInventory,
}

pub const INVENTORY_FILE: &str = "phonemes.txt";

impl Corpus {
    /// Loads a manifest plus the `phonemes.txt` inventory next to it.
    pub fn load(manifest: &Path, n_mels: usize) -> Result<Self> {
        let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let inventory = PhonemeInventory::load(&root.join(INVENTORY_FILE))?;
        let documents = load_manifest(manifest)?;
        let mut sentences = Vec::with_capacity(documents.len());
        for doc in &documents {
            let mut loaded = Vec::with_capacity(doc.len());
            for rec in &doc.sentences {
                inventory.encode(&rec.phonemes).map_err(|e| Error::InvalidRecord {
                    record: rec.id.clone(),
                    message: e.to_string(),
                })?;
                let mel = read_features(&resolve(&root, &rec.mel_path))?;
                mel.expect_mels(n_mels).map_err(|e| Error::InvalidRecord {
                    record: rec.id.clone(),
                    message: e.to_string(),
                })?;
                let f0 = rec.f0_path.as_ref().map(|p| read_f0(&resolve(&root, p))).transpose()?;
                loaded.push(LoadedSentence {
                    record: rec.clone(),
                    mel,
                    f0,
                });
            }
            sentences.push(loaded);
        }
        if documents.iter().all(|d| d.is_empty()) {
            return Err(Error::Empty("corpus has no sentences".into()));
        }
        Ok(Self {
            root,
            documents,
            sentences,
            inventory,
        })
    }

    pub fn num_sentences(&self) -> usize {
        self.documents.iter().map(|d| d.len()).sum()
    }

    pub fn document(&self, paragraph_id: &str) -> Option<usize> {
        self.documents.iter().position(|d| d.paragraph_id == paragraph_id)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        resolve(&self.root, rel)
    }
}
