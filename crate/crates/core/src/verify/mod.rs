//! Verification protocol: genuine/impostor similarity scores, ROC curve,
//! equal error rate and report files.
//!
//! Scores are similarities: higher means more likely genuine. A sample is
//! accepted at threshold `t` when its score is `≥ t`.

mod report;

pub use report::{emit_report, format_sig, render_svg, roc_csv, ReportPaths};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How sample pairs are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    /// Every unordered pair of distinct samples.
    AllPairs,
    /// Every genuine pair plus `k` seeded impostor draws per sample.
    Sampled(usize),
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pairing::AllPairs => f.write_str("all"),
            Pairing::Sampled(k) => write!(f, "sampled:{k}"),
        }
    }
}

impl FromStr for Pairing {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "all" {
            return Ok(Pairing::AllPairs);
        }
        s.strip_prefix("sampled:")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k > 0)
            .map(Pairing::Sampled)
            .ok_or_else(|| format!("pairing must be `all` or `sampled:K` with K > 0, got `{s}`"))
    }
}

/// Labeled match scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerificationScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl VerificationScoreSet {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>) -> Self {
        VerificationScoreSet { genuine, impostor }
    }

    fn check(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::DegenerateLabels);
        }
        if !self.genuine.iter().chain(&self.impostor).all(|s| s.is_finite()) {
            return Err(Error::InvalidConfig("verification scores must be finite".into()));
        }
        Ok(())
    }
}

/// Cosine similarity with a small norm floor.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Scores every pair chosen by `pairing` with `sim(i, j)`.
pub fn build_score_set_with<F>(labels: &[usize], pairing: Pairing, seed: u64, mut sim: F) -> Result<VerificationScoreSet>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    let n = labels.len();
    let distinct = labels.iter().any(|&l| l != labels[0]);
    if n < 2 || !distinct {
        return Err(Error::DegenerateLabels);
    }
    let mut set = VerificationScoreSet::default();
    match pairing {
        Pairing::AllPairs => {
            for i in 0..n {
                for j in i + 1..n {
                    let s = sim(i, j)?;
                    if labels[i] == labels[j] {
                        set.genuine.push(s);
                    } else {
                        set.impostor.push(s);
                    }
                }
            }
        }
        Pairing::Sampled(k) => {
            for i in 0..n {
                for j in i + 1..n {
                    if labels[i] == labels[j] {
                        set.genuine.push(sim(i, j)?);
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in 0..n {
                let others: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
                for _ in 0..k {
                    let j = others[rng.random_range(0..others.len())];
                    set.impostor.push(sim(i, j)?);
                }
            }
        }
    }
    Ok(set)
}

/// Cosine scores between the rows of `embeddings` (`[n, d]`).
pub fn build_score_set(embeddings: &Tensor, labels: &[usize], pairing: Pairing, seed: u64) -> Result<VerificationScoreSet> {
    let s = embeddings.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "build_score_set",
            format!("embeddings {:?} do not match {} labels", s, labels.len()),
        ));
    }
    let d = s[1];
    let rows = embeddings.data();
    build_score_set_with(labels, pairing, seed, |i, j| {
        Ok(cosine(&rows[i * d..(i + 1) * d], &rows[j * d..(j + 1) * d]))
    })
}

/// Error rates at threshold `t`: (FAR, FRR).
pub fn rates_at(scores: &VerificationScoreSet, t: f64) -> (f64, f64) {
    let far = scores.impostor.iter().filter(|&&s| s >= t).count() as f64 / scores.impostor.len() as f64;
    let frr = scores.genuine.iter().filter(|&&s| s < t).count() as f64 / scores.genuine.len() as f64;
    (far, frr)
}

/// FAR/FRR over sorted distinct thresholds, computed with one merge pass.
struct Sweep {
    thresholds: Vec<f64>,
    far: Vec<f64>,
    frr: Vec<f64>,
}

fn sweep(scores: &VerificationScoreSet) -> Sweep {
    let mut gen = scores.genuine.clone();
    let mut imp = scores.impostor.clone();
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (ng, ni) = (gen.len() as f64, imp.len() as f64);
    let (mut gi, mut ii) = (0, 0);
    let mut far = Vec::with_capacity(thresholds.len());
    let mut frr = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        while gi < gen.len() && gen[gi] < t {
            gi += 1;
        }
        while ii < imp.len() && imp[ii] < t {
            ii += 1;
        }
        far.push((imp.len() - ii) as f64 / ni);
        frr.push(gi as f64 / ng);
    }
    Sweep { thresholds, far, frr }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate, linearly interpolated between the adjacent thresholds
/// where `FAR − FRR` changes sign.
pub fn eer(scores: &VerificationScoreSet) -> Result<EerResult> {
    scores.check()?;
    let sw = sweep(scores);
    let diff = |i: usize| sw.far[i] - sw.frr[i];
    // FAR − FRR is non-increasing in the threshold and equals 1 at the lowest.
    let Some(i) = (0..sw.thresholds.len()).find(|&i| diff(i) <= 0.0) else {
        // Above the highest score FAR is 0 and FRR is 1.
        let last = sw.thresholds.len() - 1;
        let (d0, d1) = (diff(last), -1.0);
        let a = d0 / (d0 - d1);
        return Ok(EerResult {
            eer: sw.far[last] * (1.0 - a),
            threshold: sw.thresholds[last],
        });
    };
    if diff(i) == 0.0 || i == 0 {
        return Ok(EerResult {
            eer: sw.far[i],
            threshold: sw.thresholds[i],
        });
    }
    let (d0, d1) = (diff(i - 1), diff(i));
    let a = d0 / (d0 - d1);
    Ok(EerResult {
        eer: sw.far[i - 1] + a * (sw.far[i] - sw.far[i - 1]),
        threshold: sw.thresholds[i - 1] + a * (sw.thresholds[i] - sw.thresholds[i - 1]),
    })
}

/// Points ordered by increasing FAR, one per distinct threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub far: Vec<f64>,
    pub gar: Vec<f64>,
}

impl RocCurve {
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// Trapezoidal area starting from (0, 0).
    pub fn auc(&self) -> f64 {
        let mut area = 0.0;
        let (mut px, mut py) = (0.0, 0.0);
        for (&x, &y) in self.far.iter().zip(&self.gar) {
            area += (x - px) * (y + py) / 2.0;
            px = x;
            py = y;
        }
        area
    }
}

pub fn roc(scores: &VerificationScoreSet) -> Result<RocCurve> {
    scores.check()?;
    let sw = sweep(scores);
    // Descending thresholds give non-decreasing FAR and GAR.
    Ok(RocCurve {
        thresholds: sw.thresholds.iter().rev().copied().collect(),
        far: sw.far.iter().rev().copied().collect(),
        gar: sw.frr.iter().rev().map(|f| 1.0 - f).collect(),
    })
}
