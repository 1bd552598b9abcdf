//! Seeded synthetic corpus with a recoverable speaking-style signal.
//!
//! Every sentence has a latent style `z ∈ [-1, 1]^3` computed as
//!
//! ```text
//! z_i = tanh(0.9 * own_i + 0.5 * next_i + persistence * z_{i-1})
//! ```
//!
//! where `own_i` is the mean word valence of sentence `i` plus the marker
//! vector of its first word, `next_i` is the mean word valence of sentence
//! `i + 1` (zero at the paragraph end), and `z_{-1}` is a fixed reset
//! vector. Features are rendered from `z`:
//!
//! * `z[0]` sets the F0 level, which also moves a harmonic ridge on the
//!   lower mel bins;
//! * `z[1]` is a broadband energy offset;
//! * `z[2]` tilts the spectrum and stretches phoneme durations.
//!
//! Each phoneme contributes a fixed band-shaped base pattern. The latent
//! styles are written out for diagnostics only; no model reads them.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{features, write_manifest, ParagraphDocument, PhonemeInventory, SentenceRecord, INVENTORY_FILE};
use crate::config::{FeatureConfig, ToyCorpusConfig};
use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 3;
pub type Latent = [f64; LATENT_DIM];

const SYMBOLS: [(&str, bool); 16] = [
    ("a", true),
    ("e", true),
    ("i", true),
    ("o", true),
    ("u", true),
    ("m", true),
    ("n", true),
    ("l", true),
    ("r", true),
    ("k", false),
    ("t", false),
    ("s", false),
    ("p", false),
    ("h", false),
    ("f", false),
    ("g", false),
];

const RESET: Latent = [0.6, 0.4, -0.3];

#[derive(Clone, Debug)]
struct ToyPhoneme {
    voiced: bool,
    center: f64,
    width: f64,
}

#[derive(Clone, Debug)]
pub struct ToyWord {
    pub spelling: String,
    pub phonemes: Vec<usize>,
    pub valence: Latent,
    pub marker: Latent,
}

/// The fixed generative world behind a toy corpus: phoneme band patterns,
/// vocabulary and word attributes, all drawn from the seed.
#[derive(Clone, Debug)]
pub struct ToyWorld {
    config: ToyCorpusConfig,
    features: FeatureConfig,
    phonemes: Vec<ToyPhoneme>,
    words: Vec<ToyWord>,
    seed: u64,
}

fn uniform_latent(rng: &mut ChaCha8Rng) -> Latent {
    [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ]
}

impl ToyWorld {
    pub fn new(config: &ToyCorpusConfig, features: &FeatureConfig, seed: u64) -> Result<Self> {
        validate(config, features)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let top = (features.n_mels - 1) as f64;
        let phonemes = SYMBOLS
            .iter()
            .map(|&(_, voiced)| ToyPhoneme {
                voiced,
                center: rng.random_range(0.15..0.85) * top,
                width: rng.random_range(0.06..0.15) * features.n_mels as f64,
            })
            .collect();
        let mut words: Vec<ToyWord> = Vec::with_capacity(config.vocab_size);
        let mut attempts = 0;
        while words.len() < config.vocab_size {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config("toy vocabulary too large for the phoneme budget".into()));
            }
            let len = rng.random_range(config.min_phonemes_per_word..=config.max_phonemes_per_word);
            let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..SYMBOLS.len())).collect();
            let spelling: String = ids.iter().map(|&i| SYMBOLS[i].0).collect();
            if words.iter().any(|w| w.spelling == spelling) {
                continue;
            }
            words.push(ToyWord {
                spelling,
                phonemes: ids,
                valence: uniform_latent(&mut rng),
                marker: uniform_latent(&mut rng),
            });
        }
        Ok(Self {
            config: config.clone(),
            features: features.clone(),
            phonemes,
            words,
            seed,
        })
    }

    pub fn inventory() -> PhonemeInventory {
        PhonemeInventory::new(SYMBOLS.iter().map(|(s, _)| s.to_string()).collect()).expect("static inventory")
    }

    pub fn words(&self) -> &[ToyWord] {
        &self.words
    }

    fn mean_valence(&self, sentence: &[usize]) -> Latent {
        let mut out = [0.0; LATENT_DIM];
        for &w in sentence {
            for (o, v) in out.iter_mut().zip(self.words[w].valence) {
                *o += v;
            }
        }
        out.map(|v| v / sentence.len().max(1) as f64)
    }

    /// Latent styles for one paragraph given each sentence's word ids.
    pub fn paragraph_latents(&self, sentences: &[Vec<usize>]) -> Vec<Latent> {
        let mut prev = RESET;
        let mut out = Vec::with_capacity(sentences.len());
        for (i, words) in sentences.iter().enumerate() {
            let mut own = self.mean_valence(words);
            if let Some(&first) = words.first() {
                for (o, m) in own.iter_mut().zip(self.words[first].marker) {
                    *o += m;
                }
            }
            let next = sentences
                .get(i + 1)
                .map(|s| self.mean_valence(s))
                .unwrap_or([0.0; LATENT_DIM]);
            let mut z = [0.0; LATENT_DIM];
            for d in 0..LATENT_DIM {
                z[d] = (0.9 * own[d] + 0.5 * next[d] + self.config.persistence * prev[d]).tanh();
            }
            out.push(z);
            prev = z;
        }
        out
    }

    /// Per-phoneme frame counts: a base draw stretched by `z[2]`.
    fn durations(&self, n_phonemes: usize, z: &Latent, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n_phonemes)
            .map(|_| {
                let base = rng.random_range(self.config.min_frames_per_phoneme..=self.config.max_frames_per_phoneme);
                ((base as f64 * (1.0 + 0.3 * z[2])).round() as usize).max(1)
            })
            .collect()
    }

    /// Renders mel features and the F0 track for a phoneme sequence.
    /// `f0_shift_hz` moves the whole pitch contour (and its ridge).
    pub fn render(
        &self,
        phonemes: &[usize],
        durations: &[usize],
        z: &Latent,
        f0_shift_hz: f64,
        noise_seed: u64,
    ) -> (Array2<f64>, Vec<f64>) {
        let n = self.features.n_mels;
        let top = (n - 1).max(1) as f64;
        let total: usize = durations.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let noise = rand_distr::Normal::new(0.0, self.config.noise_std.max(0.0)).expect("valid std");
        let mut mel = Array2::<f64>::zeros((total, n));
        let mut f0 = vec![0.0; total];
        let mut t = 0;
        for (&p, &d) in phonemes.iter().zip(durations) {
            let ph = &self.phonemes[p];
            for _ in 0..d {
                let u = if total > 1 { t as f64 / (total - 1) as f64 } else { 0.0 };
                let pitch = if ph.voiced {
                    150.0 + 40.0 * z[0] - 20.0 * u + f0_shift_hz
                } else {
                    0.0
                };
                f0[t] = pitch;
                let ridge = pitch / 400.0 * n as f64 / 2.0;
                for m in 0..n {
                    let mf = m as f64;
                    let band = (-0.5 * ((mf - ph.center) / ph.width).powi(2)).exp();
                    let mut v = -6.0 + 3.5 * band + 0.8 * z[1] + 1.2 * z[2] * (mf / top - 0.5) - 0.5 * u;
                    if ph.voiced {
                        v += 1.5 * (-0.5 * ((mf - ridge) / 0.8).powi(2)).exp();
                    }
                    if self.config.noise_std > 0.0 {
                        v += rng.sample(noise);
                    }
                    mel[[t, m]] = v.clamp(self.features.mel_min, self.features.mel_max);
                }
                t += 1;
            }
        }
        (mel, f0)
    }

    fn noise_seed(&self, paragraph: usize, sentence: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((paragraph as u64) << 20 | sentence as u64)
    }
}

fn validate(config: &ToyCorpusConfig, features: &FeatureConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(format!("toy corpus: {m}")));
    if config.paragraphs == 0 || config.sentences_per_paragraph == 0 {
        return bad("needs at least one paragraph and one sentence");
    }
    if features.n_mels == 0 {
        return bad("n_mels must be positive");
    }
    if config.vocab_size == 0 || config.min_words == 0 || config.min_words > config.max_words {
        return bad("word counts must satisfy 1 <= min_words <= max_words");
    }
    if config.min_phonemes_per_word == 0 || config.min_phonemes_per_word > config.max_phonemes_per_word {
        return bad("phoneme counts must satisfy 1 <= min <= max");
    }
    if config.min_frames_per_phoneme == 0 || config.min_frames_per_phoneme > config.max_frames_per_phoneme {
        return bad("frame counts must satisfy 1 <= min <= max");
    }
    Ok(())
}

/// A generated corpus held in memory.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub world: ToyWorld,
    pub documents: Vec<ParagraphDocument>,
    /// `words[d][i]`: vocabulary ids of sentence `i` in paragraph `d`.
    pub words: Vec<Vec<Vec<usize>>>,
    pub mels: Vec<Vec<Array2<f64>>>,
    pub f0: Vec<Vec<Vec<f64>>>,
    pub latents: Vec<Vec<Latent>>,
}

pub fn sentence_id(paragraph: usize, sentence: usize) -> String {
    format!("p{paragraph:03}_s{sentence:02}")
}

/// Generates a corpus; a pure function of `(config, features, seed)`.
pub fn generate_toy_corpus(config: &ToyCorpusConfig, features: &FeatureConfig, seed: u64) -> Result<ToyCorpus> {
    let world = ToyWorld::new(config, features, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_C0DE);
    let mut out = ToyCorpus {
        world: world.clone(),
        documents: Vec::new(),
        words: Vec::new(),
        mels: Vec::new(),
        f0: Vec::new(),
        latents: Vec::new(),
    };
    for d in 0..config.paragraphs {
        let pid = format!("p{d:03}");
        let words: Vec<Vec<usize>> = (0..config.sentences_per_paragraph)
            .map(|_| {
                let len = rng.random_range(config.min_words..=config.max_words);
                (0..len).map(|_| rng.random_range(0..world.words.len())).collect()
            })
            .collect();
        let latents = world.paragraph_latents(&words);
        let mut sentences = Vec::new();
        let mut mels = Vec::new();
        let mut f0s = Vec::new();
        for (i, (ws, z)) in words.iter().zip(&latents).enumerate() {
            let id = sentence_id(d, i);
            let ph_ids: Vec<usize> = ws.iter().flat_map(|&w| world.words[w].phonemes.clone()).collect();
            let durations = world.durations(ph_ids.len(), z, &mut rng);
            let (mel, f0) = world.render(&ph_ids, &durations, z, 0.0, world.noise_seed(d, i));
            let text = ws
                .iter()
                .map(|&w| world.words[w].spelling.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            sentences.push(SentenceRecord {
                id: id.clone(),
                paragraph_id: pid.clone(),
                index_in_paragraph: i,
                text,
                phonemes: ph_ids.iter().map(|&p| SYMBOLS[p].0.to_string()).collect(),
                durations,
                mel_path: format!("mels/{id}.melf"),
                f0_path: Some(format!("f0/{id}.melf")),
            });
            mels.push(mel);
            f0s.push(f0);
        }
        out.documents.push(ParagraphDocument {
            paragraph_id: pid,
            sentences,
        });
        out.words.push(words);
        out.mels.push(mels);
        out.f0.push(f0s);
        out.latents.push(latents);
    }
    Ok(out)
}

#[derive(Serialize)]
struct LatentLine<'a> {
    id: &'a str,
    latent: &'a Latent,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LATENT_FILE: &str = "latent_styles.jsonl";

impl ToyCorpus {
    /// Writes `manifest.jsonl`, `phonemes.txt`, `latent_styles.jsonl` and
    /// the `mels/` and `f0/` feature files under `dir`. Returns the
    /// manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for sub in ["mels", "f0"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut latent_text = String::new();
        for (d, doc) in self.documents.iter().enumerate() {
            for (i, rec) in doc.sentences.iter().enumerate() {
                features::write_matrix(&dir.join(&rec.mel_path), &self.mels[d][i])?;
                if let Some(f0) = &rec.f0_path {
                    features::write_f0(&dir.join(f0), &self.f0[d][i])?;
                }
                latent_text.push_str(&serde_json::to_string(&LatentLine {
                    id: &rec.id,
                    latent: &self.latents[d][i],
                })?);
                latent_text.push('\n');
            }
        }
        let latent_path = dir.join(LATENT_FILE);
        std::fs::write(&latent_path, latent_text).map_err(|e| Error::io(&latent_path, e))?;
        ToyWorld::inventory().save(&dir.join(INVENTORY_FILE))?;
        let manifest = dir.join(MANIFEST_FILE);
        write_manifest(&manifest, &self.documents)?;
        Ok(manifest)
    }

    pub fn num_sentences(&self) -> usize {
        self.documents.iter().map(|d| d.len()).sum()
    }

    /// Re-renders sentence `i` of paragraph `d` with its pitch shifted.
    pub fn render_shifted(&self, d: usize, i: usize, f0_shift_hz: f64) -> Result<(Array2<f64>, Vec<f64>)> {
        let rec = &self.documents[d].sentences[i];
        let inv = ToyWorld::inventory();
        let ids = inv.encode(&rec.phonemes)?;
        Ok(self.world.render(
            &ids,
            &rec.durations,
            &self.latents[d][i],
            f0_shift_hz,
            self.world.noise_seed(d, i),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::corpus::load_manifest;

    fn small() -> (ToyCorpusConfig, FeatureConfig) {
        let cfg = Config::toy();
        let mut toy = cfg.toy.clone();
        toy.paragraphs = 3;
        toy.sentences_per_paragraph = 4;
        (toy, cfg.features)
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["", "mels", "f0"] {
            let mut entries: Vec<_> = std::fs::read_dir(dir.join(sub))
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            for p in entries {
                out.push((
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
        out
    }

    #[test]
    fn same_seed_byte_identical_other_seed_differs() {
        let (toy, feat) = small();
        let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
        generate_toy_corpus(&toy, &feat, 11)
            .unwrap()
            .write(dirs[0].path())
            .unwrap();
        generate_toy_corpus(&toy, &feat, 11)
            .unwrap()
            .write(dirs[1].path())
            .unwrap();
        generate_toy_corpus(&toy, &feat, 12)
            .unwrap()
            .write(dirs[2].path())
            .unwrap();
        let a = dir_bytes(dirs[0].path());
        assert_eq!(a, dir_bytes(dirs[1].path()));
        let c = dir_bytes(dirs[2].path());
        let mel_a: Vec<_> = a.iter().filter(|(n, _)| n.ends_with(".melf")).collect();
        let mel_c: Vec<_> = c.iter().filter(|(n, _)| n.ends_with(".melf")).collect();
        assert_ne!(mel_a, mel_c);
    }

    #[test]
    fn manifest_round_trips() {
        let (toy, feat) = small();
        let corpus = generate_toy_corpus(&toy, &feat, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = corpus.write(dir.path()).unwrap();
        assert_eq!(load_manifest(&manifest).unwrap(), corpus.documents);
    }

    #[test]
    fn invalid_configs_rejected() {
        let (mut toy, feat) = small();
        toy.sentences_per_paragraph = 0;
        assert!(generate_toy_corpus(&toy, &feat, 0).is_err());
        let (toy, mut feat) = small();
        feat.n_mels = 0;
        assert!(generate_toy_corpus(&toy, &feat, 0).is_err());
    }

    #[test]
    fn consecutive_latents_are_positively_correlated() {
        let cfg = Config::toy();
        let corpus = generate_toy_corpus(&cfg.toy, &cfg.features, 5).unwrap();
        assert!(corpus.num_sentences() >= 100);
        for d in 0..LATENT_DIM {
            let mut pairs = Vec::new();
            for lat in &corpus.latents {
                for w in lat.windows(2) {
                    pairs.push((w[0][d], w[1][d]));
                }
            }
            let n = pairs.len() as f64;
            let (mx, my) = pairs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
            let cov: f64 = pairs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
            let vx: f64 = pairs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
            let vy: f64 = pairs.iter().map(|(_, y)| (y - my).powi(2)).sum();
            let corr = cov / (vx * vy).sqrt();
            assert!(corr > 0.0, "dim {d}: correlation {corr}");
        }
    }

    #[test]
    fn pitch_shift_moves_f0_and_features() {
        let (toy, feat) = small();
        let corpus = generate_toy_corpus(&toy, &feat, 2).unwrap();
        let (mel0, f00) = corpus.render_shifted(0, 1, 0.0).unwrap();
        assert_eq!(mel0, corpus.mels[0][1]);
        let (mel1, f01) = corpus.render_shifted(0, 1, 50.0).unwrap();
        for (a, b) in f00.iter().zip(&f01) {
            if *a > 0.0 {
                assert!((b - a - 50.0).abs() < 1e-9);
            }
        }
        assert_ne!(mel0, mel1);
    }
}
