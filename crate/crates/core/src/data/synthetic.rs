//! Synthetic palmprint-like textures.
//!
//! Each subject owns 2–4 dark curved "principal lines" and an oriented
//! sinusoidal stripe field with its own orientation, period and phase. A
//! sample renders that latent pattern under a random sub-pixel translation,
//! a contrast change about the mean intensity and additive Gaussian noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::config::{canonical_text, KvMap};

const BASE: f64 = 0.6;
const CURVE_SEGMENTS: usize = 48;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub samples_per_subject: usize,
    pub image_hw: usize,
    pub seed: u64,
    /// Std-dev of the per-axis translation in pixels.
    pub translation_sigma: f64,
    /// Translations are clipped to `±max_translation` pixels.
    pub max_translation: f64,
    /// Contrast factors are uniform in `1 ± contrast`.
    pub contrast: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_subjects: 10,
            samples_per_subject: 20,
            image_hw: 64,
            seed: 7,
            translation_sigma: 0.5,
            max_translation: 3.0,
            contrast: 0.1,
            noise_sigma: 0.02,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_subjects >= 1
            && self.samples_per_subject >= 1
            && self.image_hw >= 4
            && self.n_subjects <= 100_000
            && self.translation_sigma >= 0.0
            && self.max_translation >= 0.0
            && (0.0..1.0).contains(&self.contrast)
            && self.noise_sigma >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid synthetic spec {:?}", self)))
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let d = SyntheticSpec::default();
        let spec = SyntheticSpec {
            n_subjects: kv.take("n_subjects", d.n_subjects)?,
            samples_per_subject: kv.take("samples_per_subject", d.samples_per_subject)?,
            image_hw: kv.take("image_hw", d.image_hw)?,
            seed: kv.take("seed", d.seed)?,
            translation_sigma: kv.take("translation_sigma", d.translation_sigma)?,
            max_translation: kv.take("max_translation", d.max_translation)?,
            contrast: kv.take("contrast", d.contrast)?,
            noise_sigma: kv.take("noise_sigma", d.noise_sigma)?,
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        canonical_text(vec![
            ("n_subjects", self.n_subjects.to_string()),
            ("samples_per_subject", self.samples_per_subject.to_string()),
            ("image_hw", self.image_hw.to_string()),
            ("seed", self.seed.to_string()),
            ("translation_sigma", self.translation_sigma.to_string()),
            ("max_translation", self.max_translation.to_string()),
            ("contrast", self.contrast.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
        ])
    }
}

struct Stroke {
    /// Polyline approximation of a quadratic Bézier curve, in pixels.
    points: Vec<(f64, f64)>,
    width: f64,
    depth: f64,
}

struct Latent {
    strokes: Vec<Stroke>,
    stripe_theta: f64,
    stripe_period: f64,
    stripe_phase: f64,
    stripe_amp: f64,
}

fn draw_latent(rng: &mut ChaCha8Rng, hw: f64) -> Latent {
    let n_strokes = rng.random_range(2..=4);
    let mut strokes = Vec::with_capacity(n_strokes);
    for _ in 0..n_strokes {
        let mut pt = || (rng.random_range(0.05..0.95) * hw, rng.random_range(0.05..0.95) * hw);
        let (p0, p1, p2) = (pt(), pt(), pt());
        let points = (0..=CURVE_SEGMENTS)
            .map(|i| {
                let t = i as f64 / CURVE_SEGMENTS as f64;
                let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
                (a * p0.0 + b * p1.0 + c * p2.0, a * p0.1 + b * p1.1 + c * p2.1)
            })
            .collect();
        strokes.push(Stroke {
            points,
            width: rng.random_range(0.8..1.6) * hw / 64.0,
            depth: rng.random_range(0.25..0.45),
        });
    }
    Latent {
        strokes,
        stripe_theta: rng.random_range(0.0..PI),
        stripe_period: rng.random_range(0.125..0.2) * hw,
        stripe_phase: rng.random_range(0.0..2.0 * PI),
        stripe_amp: rng.random_range(0.12..0.18),
    }
}

fn segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    ex * ex + ey * ey
}

impl Latent {
    /// Noise-free intensity at continuous position `(u, v)`.
    fn intensity(&self, u: f64, v: f64) -> f64 {
        let (s, c) = self.stripe_theta.sin_cos();
        let phase = 2.0 * PI * (u * c + v * s) / self.stripe_period + self.stripe_phase;
        let mut val = BASE + self.stripe_amp * phase.cos();
        for st in &self.strokes {
            let d2 = st
                .points
                .windows(2)
                .map(|w| segment_dist2((u, v), w[0], w[1]))
                .fold(f64::INFINITY, f64::min);
            val -= st.depth * (-d2 / (2.0 * st.width * st.width)).exp();
        }
        val
    }
}

/// Renders the dataset described by `spec`; identical specs give identical
/// pixels. Subjects are named `s000, s001, …` and samples `000, 001, …`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let hw = spec.image_hw;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latents: Vec<Latent> = (0..spec.n_subjects).map(|_| draw_latent(&mut rng, hw as f64)).collect();
    let shift = Normal::new(0.0, spec.translation_sigma).expect("non-negative sigma");
    let noise = Normal::new(0.0, spec.noise_sigma).expect("non-negative sigma");
    let mut samples = Vec::with_capacity(spec.n_subjects * spec.samples_per_subject);
    for (subject, lat) in latents.iter().enumerate() {
        for j in 0..spec.samples_per_subject {
            let clip = |d: f64| d.clamp(-spec.max_translation, spec.max_translation);
            let dx = clip(shift.sample(&mut rng));
            let dy = clip(shift.sample(&mut rng));
            let gain = 1.0 + rng.random_range(-spec.contrast..=spec.contrast);
            let mut pixels = Vec::with_capacity(hw * hw);
            for y in 0..hw {
                for x in 0..hw {
                    let v = lat.intensity(x as f64 - dx, y as f64 - dy);
                    let v = BASE + gain * (v - BASE) + noise.sample(&mut rng);
                    pixels.push(v.clamp(0.0, 1.0));
                }
            }
            samples.push(Sample {
                subject,
                name: format!("{j:03}"),
                path: None,
                pixels,
            });
        }
    }
    Ok(Dataset {
        hw,
        subjects: (0..spec.n_subjects).map(|s| format!("s{s:03}")).collect(),
        samples,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt().max(1e-300)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationStats {
    /// Mean over subjects of the mean Pearson correlation of their sample pairs.
    pub within_mean: f64,
    /// Smallest per-subject mean within-subject correlation.
    pub within_min: f64,
    /// Mean correlation between first samples of distinct subjects.
    pub between_mean: f64,
}

/// Within- and between-subject pixel correlations of a dataset.
pub fn correlation_stats(ds: &Dataset) -> CorrelationStats {
    let per_subject: Vec<Vec<&[f64]>> = (0..ds.n_subjects())
        .map(|s| {
            ds.samples
                .iter()
                .filter(|x| x.subject == s)
                .map(|x| x.pixels.as_slice())
                .collect()
        })
        .collect();
    let mut within = Vec::new();
    for imgs in &per_subject {
        let mut acc = Vec::new();
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                acc.push(pearson(imgs[i], imgs[j]));
            }
        }
        if !acc.is_empty() {
            within.push(acc.iter().sum::<f64>() / acc.len() as f64);
        }
    }
    let mut between = Vec::new();
    for a in 0..per_subject.len() {
        for b in a + 1..per_subject.len() {
            if let (Some(x), Some(y)) = (per_subject[a].first(), per_subject[b].first()) {
                between.push(pearson(x, y));
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    CorrelationStats {
        within_mean: mean(&within),
        within_min: within.iter().copied().fold(f64::INFINITY, f64::min),
        between_mean: mean(&between),
    }
}
