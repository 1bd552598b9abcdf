//! Objective metrics: DTW alignment, F0 RMSE along the alignment, mel
//! cepstral distortion, log-domain duration MSE and style-embedding MSE.
//!
//! Conventions:
//! * DTW uses Euclidean frame distance, steps `(1,0)`, `(0,1)`, `(1,1)`,
//!   and prefers the diagonal step on ties.
//! * MCD cepstra are the orthonormal DCT-II of each log-mel row, keeping
//!   coefficients `1..=12` (fewer if the row is shorter); per aligned pair
//!   the distortion is `10 / ln 10 * sqrt(2 * sum_d (c_d - c'_d)^2)` and the
//!   result is the mean over the path.
//! * Duration MSE compares `ln(d + 1)`, the duration predictor's domain.
//! * F0 RMSE counts only ground-truth frames that are voiced in both
//!   tracks after alignment.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::style_extractor::StyleEmbedding;

pub const MCD_COEFFICIENTS: usize = 12;

/// DTW result: the path as `(row of A, row of B)` pairs and its total cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

pub fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Minimum-cost monotone alignment of the rows of `a` and `b`.
pub fn dtw_align(a: &Array2<f64>, b: &Array2<f64>) -> Result<Alignment> {
    dtw_align_with(a, b, euclidean)
}

pub fn dtw_align_with(
    a: &Array2<f64>,
    b: &Array2<f64>,
    distance: impl Fn(ArrayView1<f64>, ArrayView1<f64>) -> f64,
) -> Result<Alignment> {
    let (n, m) = (a.nrows(), b.nrows());
    if n == 0 || m == 0 {
        return Err(Error::Empty("DTW needs at least one frame on each side".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::shape(format!(
            "frame widths differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut acc = Array2::<f64>::from_elem((n, m), f64::INFINITY);
    for i in 0..n {
        for j in 0..m {
            let d = distance(a.row(i), b.row(j));
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    acc[[i - 1, j - 1]]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 { acc[[i - 1, j]] } else { f64::INFINITY };
                let left = if j > 0 { acc[[i, j - 1]] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[[i, j]] = prev + d;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[[i - 1, j - 1]];
            let up = acc[[i - 1, j]];
            let left = acc[[i, j - 1]];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();
    Ok(Alignment {
        path,
        cost: acc[[n - 1, m - 1]],
    })
}

/// RMSE in Hz between the synthesized F0 mapped onto ground-truth frames
/// along the DTW path of the two mel matrices.
pub fn f0_rmse(f0_syn: &[f64], f0_gt: &[f64], mel_syn: &Array2<f64>, mel_gt: &Array2<f64>) -> Result<f64> {
    if f0_syn.len() != mel_syn.nrows() || f0_gt.len() != mel_gt.nrows() {
        return Err(Error::shape(format!(
            "F0 lengths ({}, {}) do not match frame counts ({}, {})",
            f0_syn.len(),
            f0_gt.len(),
            mel_syn.nrows(),
            mel_gt.nrows()
        )));
    }
    let alignment = dtw_align(mel_syn, mel_gt)?;
    let mut sum = vec![0.0; f0_gt.len()];
    let mut count = vec![0usize; f0_gt.len()];
    for &(i, j) in &alignment.path {
        if f0_syn[i] > 0.0 {
            sum[j] += f0_syn[i];
            count[j] += 1;
        }
    }
    let mut total = 0.0;
    let mut voiced = 0usize;
    for j in 0..f0_gt.len() {
        if f0_gt[j] > 0.0 && count[j] > 0 {
            total += (sum[j] / count[j] as f64 - f0_gt[j]).powi(2);
            voiced += 1;
        }
    }
    if voiced == 0 {
        return Err(Error::Empty("no frame is voiced in both F0 tracks".into()));
    }
    Ok((total / voiced as f64).sqrt())
}

/// Orthonormal DCT-II of each row, coefficients `1..=min(12, width - 1)`.
pub fn mel_cepstrum(mel: &Array2<f64>) -> Array2<f64> {
    let n = mel.ncols();
    let keep = MCD_COEFFICIENTS.min(n.saturating_sub(1));
    let basis = Array2::from_shape_fn((n, keep), |(x, k)| {
        let k = k + 1;
        (2.0 / n as f64).sqrt() * (std::f64::consts::PI * k as f64 * (2 * x + 1) as f64 / (2 * n) as f64).cos()
    });
    mel.dot(&basis)
}

/// Mel cepstral distortion in dB over the DTW path of the cepstra.
pub fn mcd(mel_syn: &Array2<f64>, mel_gt: &Array2<f64>) -> Result<f64> {
    if mel_syn.ncols() != mel_gt.ncols() {
        return Err(Error::shape(format!(
            "mel widths differ: {} vs {}",
            mel_syn.ncols(),
            mel_gt.ncols()
        )));
    }
    let a = mel_cepstrum(mel_syn);
    let b = mel_cepstrum(mel_gt);
    let alignment = dtw_align(&a, &b)?;
    let k = 10.0 / std::f64::consts::LN_10;
    let total: f64 = alignment
        .path
        .iter()
        .map(|&(i, j)| k * (2.0 * euclidean(a.row(i), b.row(j)).powi(2)).sqrt())
        .sum();
    Ok(total / alignment.path.len() as f64)
}

/// MSE of `ln(d + 1)` over phonemes.
pub fn duration_mse(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "duration lengths {} and {} must match and be non-empty",
            pred.len(),
            gt.len()
        )));
    }
    let log = |d: usize| (d as f64 + 1.0).ln();
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (log(p) - log(g)).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Mean squared difference over embedding dimensions.
pub fn style_mse(pred: &StyleEmbedding, target: &StyleEmbedding) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "style lengths {} and {} must match and be non-empty",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Frame-wise F0 by normalized autocorrelation, for real recordings.
/// Frames whose best normalized peak is below `threshold` are unvoiced (0).
pub fn estimate_f0(
    samples: &[f64],
    sample_rate: u32,
    hop: usize,
    window: usize,
    range_hz: (f64, f64),
    threshold: f64,
) -> Result<Vec<f64>> {
    if hop == 0 || window == 0 || range_hz.0 <= 0.0 || range_hz.0 >= range_hz.1 {
        return Err(Error::Config("invalid F0 estimator settings".into()));
    }
    let sr = sample_rate as f64;
    let min_lag = (sr / range_hz.1).floor().max(1.0) as usize;
    let max_lag = (sr / range_hz.0).ceil() as usize;
    let frames = samples.len().div_ceil(hop);
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let start = f * hop;
        let end = (start + window).min(samples.len());
        let x = &samples[start..end];
        let mut best = (0.0, 0usize);
        for lag in min_lag..=max_lag.min(x.len().saturating_sub(1)) {
            let (mut num, mut e0, mut e1) = (0.0, 0.0, 0.0);
            for t in 0..x.len() - lag {
                num += x[t] * x[t + lag];
                e0 += x[t] * x[t];
                e1 += x[t + lag] * x[t + lag];
            }
            let denom = (e0 * e1).sqrt();
            if denom > 0.0 && num / denom > best.0 {
                best = (num / denom, lag);
            }
        }
        out.push(if best.1 > 0 && best.0 >= threshold {
            sr / best.1 as f64
        } else {
            0.0
        });
    }
    Ok(out)
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub utterance_id: String,
    pub metric: String,
    pub value: f64,
}

/// Per-utterance records plus per-metric means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub records: Vec<MetricRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub count: usize,
}

impl EvaluationReport {
    pub fn push(&mut self, utterance_id: &str, metric: &str, value: f64) {
        self.records.push(MetricRecord {
            utterance_id: utterance_id.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Means per metric, in first-appearance order.
    pub fn summary(&self) -> Vec<MetricSummary> {
        let mut out: Vec<MetricSummary> = Vec::new();
        for r in &self.records {
            match out.iter_mut().find(|s| s.metric == r.metric) {
                Some(s) => {
                    s.mean += r.value;
                    s.count += 1;
                }
                None => out.push(MetricSummary {
                    metric: r.metric.clone(),
                    mean: r.value,
                    count: 1,
                }),
            }
        }
        for s in &mut out {
            s.mean /= s.count as f64;
        }
        out
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary().into_iter().find(|s| s.metric == metric).map(|s| s.mean)
    }

    /// Writes the records as JSON lines and the summary as a JSON file.
    pub fn write(&self, records_path: &Path, summary_path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(records_path).map_err(|e| Error::io(records_path, e))?;
        for r in &self.records {
            serde_json::to_writer(&mut file, r)?;
            file.write_all(b"\n").map_err(|e| Error::io(records_path, e))?;
        }
        let summary = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(summary_path, summary).map_err(|e| Error::io(summary_path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_sequences_align_diagonally() {
        let a = array![[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]];
        let al = dtw_align(&a, &a).unwrap();
        assert_eq!(al.path, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(al.cost, 0.0);
    }

    #[test]
    fn single_frame_against_three() {
        let a = array![[0.0]];
        let b = array![[1.0], [2.0], [3.0]];
        let al = dtw_align(&a, &b).unwrap();
        assert_eq!(al.path, vec![(0, 0), (0, 1), (0, 2)]);
        assert_eq!(al.cost, 6.0);
        assert!(dtw_align(&Array2::zeros((0, 1)), &b).is_err());
    }

    #[test]
    fn ties_prefer_the_diagonal() {
        let a = Array2::zeros((3, 1));
        let b = Array2::zeros((3, 1));
        assert_eq!(dtw_align(&a, &b).unwrap().path, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn style_and_duration_definitions() {
        let a = StyleEmbedding::new(vec![0.0; 4]).unwrap();
        let b = StyleEmbedding::new(vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(style_mse(&a, &a).unwrap(), 0.0);
        assert_eq!(style_mse(&a, &b).unwrap(), 0.25);
        assert!(style_mse(&a, &StyleEmbedding::zeros(3)).is_err());
        assert_eq!(duration_mse(&[3, 4], &[3, 4]).unwrap(), 0.0);
        let e = 4f64.ln() - 2f64.ln();
        assert!((duration_mse(&[3, 4, 1], &[3, 4, 3]).unwrap() - e * e / 3.0).abs() < 1e-15);
        assert!(duration_mse(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn f0_rmse_requires_voicing() {
        let mel = array![[0.0], [1.0]];
        assert!(f0_rmse(&[0.0, 0.0], &[100.0, 100.0], &mel, &mel).is_err());
        assert!(f0_rmse(&[100.0], &[100.0, 100.0], &mel, &mel).is_err());
    }

    #[test]
    fn autocorrelation_recovers_a_tone() {
        let sr = 16_000;
        let samples: Vec<f64> = (0..4000)
            .map(|t| (2.0 * std::f64::consts::PI * 200.0 * t as f64 / sr as f64).sin())
            .collect();
        let f0 = estimate_f0(&samples, sr, 400, 800, (60.0, 500.0), 0.5).unwrap();
        assert!((f0[2] - 200.0).abs() < 5.0, "{f0:?}");
        let silence = estimate_f0(&[0.0; 2000], sr, 400, 800, (60.0, 500.0), 0.5).unwrap();
        assert!(silence.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn report_summary() {
        let mut r = EvaluationReport::default();
        r.push("a", "mcd", 1.0);
        r.push("b", "mcd", 3.0);
        r.push("a", "style_mse", 0.5);
        assert_eq!(r.mean("mcd"), Some(2.0));
        assert_eq!(r.summary().len(), 2);
        let dir = tempfile::tempdir().unwrap();
        r.write(&dir.path().join("r.jsonl"), &dir.path().join("s.json"))
            .unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 3);
    }
}
