//! Image datasets laid out as `<root>/<subject_id>/<sample>.png|.pgm`, the
//! per-subject train/eval split and the synthetic palmprint generator.

mod synthetic;

pub use synthetic::{correlation_stats, generate_synthetic, pearson, CorrelationStats, SyntheticSpec};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One grayscale image with values in `[0, 1]`, row-major `hw × hw`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Index into [`Dataset::subjects`].
    pub subject: usize,
    pub name: String,
    pub path: Option<PathBuf>,
    pub pixels: Vec<f64>,
}

/// Samples sorted by subject, then by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub hw: usize,
    pub subjects: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].subject).collect()
    }

    /// Stacks the chosen samples into a `[b, 1, hw, hw]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let n = self.hw * self.hw;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].pixels);
        }
        Tensor::new(vec![indices.len(), 1, self.hw, self.hw], data).expect("samples share one size")
    }

    /// Writes every sample as an 8-bit PNG under `<dir>/<subject>/<name>.png`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        for s in &self.samples {
            let sub = dir.join(&self.subjects[s.subject]);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            let path = sub.join(format!("{}.png", s.name));
            let bytes: Vec<u8> = s.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let img = image::GrayImage::from_raw(self.hw as u32, self.hw as u32, bytes).expect("buffer matches size");
            img.save(&path).map_err(|e| Error::UnreadableImage {
                path: path.clone(),
                cause: e.to_string(),
            })?;
        }
        Ok(())
    }
}

/// Subjects and their sample files, both sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<(String, Vec<PathBuf>)>,
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Lists `<root>/<subject>/<file>`; loose files directly under `root` are
/// ignored.
pub fn scan_manifest(root: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for sub in sorted_dir(root)? {
        if !sub.is_dir() {
            continue;
        }
        let files: Vec<PathBuf> = sorted_dir(&sub)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            continue;
        }
        let id = sub.file_name().expect("entry has a name").to_string_lossy().into_owned();
        entries.push((id, files));
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
    })
}

/// Decodes an image file to 8-bit grayscale: (width, height, pixels).
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let unreadable = |cause: String| Error::UnreadableImage {
        path: path.to_path_buf(),
        cause,
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| unreadable(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| unreadable(e.to_string()))?
        .decode()
        .map_err(|e| unreadable(e.to_string()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

/// Bilinear resampling with pixel-centre alignment; a same-size resize is
/// the identity.
pub fn resize_bilinear(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Loads every sample of `root`, resized to `hw × hw` and scaled to `[0, 1]`.
pub fn load_dataset(root: &Path, hw: usize) -> Result<Dataset> {
    let manifest = scan_manifest(root)?;
    let mut seen = BTreeSet::new();
    let mut subjects = Vec::new();
    let mut samples = Vec::new();
    for (sid, files) in &manifest.entries {
        let subject = subjects.len();
        subjects.push(sid.clone());
        for path in files {
            if !seen.insert(path.clone()) {
                return Err(Error::InvalidConfig(format!("{} listed twice", path.display())));
            }
            let (w, h, bytes) = read_gray(path)?;
            let px: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
            let pixels = if w == hw && h == hw {
                px
            } else {
                resize_bilinear(&px, w, h, hw, hw)
            };
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            samples.push(Sample {
                subject,
                name,
                path: Some(path.clone()),
                pixels,
            });
        }
    }
    Ok(Dataset { hw, subjects, samples })
}

/// Sample indices of the train and eval sides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// The leading `train_fraction` of each subject's samples (rounded, and at
/// least one on each side) go to training, the rest to evaluation.
pub fn split_per_subject(ds: &Dataset, train_fraction: f64) -> Result<Split> {
    let mut split = Split {
        train: Vec::new(),
        eval: Vec::new(),
    };
    for subject in 0..ds.n_subjects() {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].subject == subject).collect();
        if idx.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "subject `{}` needs at least two samples to appear on both sides of the split",
                ds.subjects[subject]
            )));
        }
        let n_train = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
        split.train.extend_from_slice(&idx[..n_train]);
        split.eval.extend_from_slice(&idx[n_train..]);
    }
    Ok(split)
}
