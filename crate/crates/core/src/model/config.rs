//! Flat `key=value` configuration.
//!
//! Files hold one `key=value` pair per line; blank lines and lines starting
//! with `#` are ignored. Every key must be known. The canonical text form
//! lists all keys sorted, so it doubles as the checkpoint's config record.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::verify::Pairing;

/// Parsed `key=value` pairs awaiting consumption by typed readers.
#[derive(Clone, Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key=value, got `{}`", n + 1, line))
            })?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::InvalidConfig(format!("line {}: duplicate key `{}`", n + 1, key)));
            }
        }
        Ok(KvMap { entries })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes `key`, returning its raw text if present.
    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    /// Removes and parses `key`, falling back to `default` when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("key `{}`: cannot parse `{}`: {}", key, v, e))),
        }
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_keys().next() {
            Some(k) => Err(Error::UnknownConfigKey(k)),
            None => Ok(()),
        }
    }
}

/// Sorted `key=value` lines.
pub fn canonical_text(mut pairs: Vec<(&'static str, String)>) -> String {
    pairs.sort_by(|a, b| a.0.cmp(b.0));
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

/// The three filter scales, smallest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scale {
    Tiny,
    Middle,
    Large,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Tiny, Scale::Middle, Scale::Large];

    pub fn tag(self) -> &'static str {
        match self {
            Scale::Tiny => "ts",
            Scale::Middle => "ms",
            Scale::Large => "ls",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Scale::ALL
            .into_iter()
            .find(|sc| sc.tag() == s)
            .ok_or_else(|| format!("unknown scale `{}` (expected ts, ms or ls)", s))
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| Error::InvalidConfig(format!("key `{}`: bad item `{}`: {}", key, s.trim(), e)))
        })
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Architecture and training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Gabor kernel sizes of the tiny, middle and large branches.
    pub branch_kernel_sizes: [usize; 3],
    /// Which branches are built, indexed like `branch_kernel_sizes`.
    pub branches: [bool; 3],
    pub n_orientations: usize,
    /// Square input side in pixels.
    pub input_hw: usize,
    pub msa_heads: usize,
    pub msa_embed: usize,
    pub embedding_dim: usize,
    /// `None` until resolved from the training data.
    pub n_classes: Option<usize>,
    pub use_iscm: bool,
    pub use_ascm: bool,
    pub ascm_grouped: bool,
    pub softmax_temperature: f64,
    pub w_ce: f64,
    pub w_con: f64,
    pub margin: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full()
    }
}

impl ModelConfig {
    /// Full-size network for 128×128 regions of interest.
    pub fn full() -> Self {
        ModelConfig {
            branch_kernel_sizes: [7, 17, 35],
            branches: [true; 3],
            n_orientations: 6,
            input_hw: 128,
            msa_heads: 2,
            msa_embed: 8,
            embedding_dim: 128,
            n_classes: None,
            use_iscm: true,
            use_ascm: true,
            ascm_grouped: false,
            softmax_temperature: 1.0,
            w_ce: 1.0,
            w_con: 1.0,
            margin: 0.5,
            lr: 3e-4,
            batch_size: 8,
            epochs: 30,
            seed: 0,
        }
    }

    /// Small network for 32×32 inputs used by tests.
    pub fn toy() -> Self {
        ModelConfig {
            branch_kernel_sizes: [3, 7, 11],
            input_hw: 32,
            batch_size: 6,
            epochs: 50,
            ..ModelConfig::full()
        }
    }

    pub fn enabled_scales(&self) -> Vec<Scale> {
        Scale::ALL.into_iter().filter(|s| self.branches[s.index()]).collect()
    }

    pub fn kernel_size(&self, s: Scale) -> usize {
        self.branch_kernel_sizes[s.index()]
    }

    /// Length of the pooled feature vector feeding the head.
    pub fn feature_dim(&self) -> usize {
        2 * self.enabled_scales().len() * self.n_orientations
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let k = self.branch_kernel_sizes;
        if let Some(&even) = k.iter().find(|&&v| v % 2 == 0) {
            return Err(Error::EvenKernelSize(even));
        }
        if !(k[0] < k[1] && k[1] < k[2]) {
            return bad(format!("branch_kernel_sizes {:?} must be strictly increasing", k));
        }
        if !self.branches.iter().any(|&b| b) {
            return bad("at least one branch must be enabled".into());
        }
        if self.n_orientations == 0 || self.n_orientations > 255 {
            return bad(format!("n_orientations {} outside 1..=255", self.n_orientations));
        }
        if self.input_hw == 0 || self.embedding_dim == 0 {
            return bad("input_hw and embedding_dim must be positive".into());
        }
        if self.msa_heads == 0 || self.msa_embed == 0 || self.msa_embed % self.msa_heads != 0 {
            return bad(format!(
                "msa_embed {} must be a positive multiple of msa_heads {}",
                self.msa_embed, self.msa_heads
            ));
        }
        if self.n_classes == Some(0) || self.n_classes == Some(1) {
            return bad("n_classes must be at least 2".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.w_ce >= 0.0 && self.w_con >= 0.0 && self.w_ce + self.w_con > 0.0) {
            return bad("loss weights must be non-negative with a positive sum".into());
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be non-negative, got {}", self.margin));
        }
        if !(self.softmax_temperature > 0.0 && self.softmax_temperature.is_finite()) {
            return bad("softmax_temperature must be positive".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        Ok(())
    }

    /// Consumes the model keys of `kv`; absent keys keep the full-size defaults.
    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = ModelConfig::full();
        let kernels = match kv.take_raw("branch_kernel_sizes") {
            None => d.branch_kernel_sizes,
            Some(v) => {
                let ks: Vec<usize> = parse_list("branch_kernel_sizes", &v)?;
                ks.try_into().map_err(|ks: Vec<usize>| {
                    Error::InvalidConfig(format!("branch_kernel_sizes needs 3 values, got {}", ks.len()))
                })?
            }
        };
        let branches = match kv.take_raw("branches") {
            None => d.branches,
            Some(v) => {
                let mut on = [false; 3];
                for s in parse_list::<Scale>("branches", &v)? {
                    on[s.index()] = true;
                }
                on
            }
        };
        let n_classes = match kv.take_raw("n_classes") {
            None => d.n_classes,
            Some(v) if v == "auto" => None,
            Some(v) => Some(
                v.parse()
                    .map_err(|e| Error::InvalidConfig(format!("key `n_classes`: cannot parse `{}`: {}", v, e)))?,
            ),
        };
        let cfg = ModelConfig {
            branch_kernel_sizes: kernels,
            branches,
            n_orientations: kv.take("n_orientations", d.n_orientations)?,
            input_hw: kv.take("input_hw", d.input_hw)?,
            msa_heads: kv.take("msa_heads", d.msa_heads)?,
            msa_embed: kv.take("msa_embed", d.msa_embed)?,
            embedding_dim: kv.take("embedding_dim", d.embedding_dim)?,
            n_classes,
            use_iscm: kv.take("use_iscm", d.use_iscm)?,
            use_ascm: kv.take("use_ascm", d.use_ascm)?,
            ascm_grouped: kv.take("ascm_grouped", d.ascm_grouped)?,
            softmax_temperature: kv.take("softmax_temperature", d.softmax_temperature)?,
            w_ce: kv.take("w_ce", d.w_ce)?,
            w_con: kv.take("w_con", d.w_con)?,
            margin: kv.take("margin", d.margin)?,
            lr: kv.take("lr", d.lr)?,
            batch_size: kv.take("batch_size", d.batch_size)?,
            epochs: kv.take("epochs", d.epochs)?,
            seed: kv.take("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let branches: Vec<&str> = self.enabled_scales().into_iter().map(Scale::tag).collect();
        vec![
            ("branch_kernel_sizes", join(&self.branch_kernel_sizes)),
            ("branches", branches.join(",")),
            ("n_orientations", self.n_orientations.to_string()),
            ("input_hw", self.input_hw.to_string()),
            ("msa_heads", self.msa_heads.to_string()),
            ("msa_embed", self.msa_embed.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            (
                "n_classes",
                self.n_classes.map_or_else(|| "auto".to_string(), |c| c.to_string()),
            ),
            ("use_iscm", self.use_iscm.to_string()),
            ("use_ascm", self.use_ascm.to_string()),
            ("ascm_grouped", self.ascm_grouped.to_string()),
            ("softmax_temperature", self.softmax_temperature.to_string()),
            ("w_ce", self.w_ce.to_string()),
            ("w_con", self.w_con.to_string()),
            ("margin", self.margin.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Where training and evaluation images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Dir(PathBuf),
}

impl Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSource::Synthetic => f.write_str("synthetic"),
            DataSource::Dir(p) => write!(f, "{}", p.display()),
        }
    }
}

impl DataSource {
    pub fn parse(s: &str) -> Self {
        if s == "synthetic" {
            DataSource::Synthetic
        } else {
            DataSource::Dir(PathBuf::from(s))
        }
    }
}

/// Dataset and evaluation-protocol settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic_subjects: usize,
    pub synthetic_samples: usize,
    pub synthetic_seed: u64,
    /// Leading fraction of each subject's samples used for training.
    pub train_fraction: f64,
    pub pairing: Pairing,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        DataConfig {
            source: DataSource::Synthetic,
            synthetic_subjects: s.n_subjects,
            synthetic_samples: s.samples_per_subject,
            synthetic_seed: s.seed,
            train_fraction: 0.5,
            pairing: Pairing::AllPairs,
        }
    }
}

impl DataConfig {
    pub fn from_kv(kv: &mut KvMap) -> Result<Self> {
        let d = DataConfig::default();
        let source = kv.take_raw("data").map_or(d.source, |v| DataSource::parse(&v));
        let pairing = match kv.take_raw("pairing") {
            None => d.pairing,
            Some(v) => v.parse().map_err(Error::InvalidConfig)?,
        };
        let cfg = DataConfig {
            source,
            synthetic_subjects: kv.take("synthetic_subjects", d.synthetic_subjects)?,
            synthetic_samples: kv.take("synthetic_samples", d.synthetic_samples)?,
            synthetic_seed: kv.take("synthetic_seed", d.synthetic_seed)?,
            train_fraction: kv.take("train_fraction", d.train_fraction)?,
            pairing,
        };
        if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction must lie in (0, 1), got {}",
                cfg.train_fraction
            )));
        }
        Ok(cfg)
    }

    /// Synthetic generator settings at the given image side.
    pub fn synthetic_spec(&self, image_hw: usize) -> SyntheticSpec {
        SyntheticSpec {
            n_subjects: self.synthetic_subjects,
            samples_per_subject: self.synthetic_samples,
            image_hw,
            seed: self.synthetic_seed,
            ..SyntheticSpec::default()
        }
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("data", self.source.to_string()),
            ("synthetic_subjects", self.synthetic_subjects.to_string()),
            ("synthetic_samples", self.synthetic_samples.to_string()),
            ("synthetic_seed", self.synthetic_seed.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("pairing", self.pairing.to_string()),
        ]
    }
}

/// A complete run description: model plus data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text)?;
        let model = ModelConfig::from_kv(&mut kv)?;
        let data = DataConfig::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(RunConfig { model, data })
    }

    pub fn to_text(&self) -> String {
        let mut pairs = self.model.pairs();
        pairs.extend(self.data.pairs());
        canonical_text(pairs)
    }
}
