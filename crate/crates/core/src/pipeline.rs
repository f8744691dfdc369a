//! End-to-end runs shared by the command line and the test suites: data
//! loading, training, evaluation, the CompCode baseline and the ablation
//! sweep.

use std::fmt::Write as _;
use std::path::Path;

use crate::competition::{compcode_encode, compcode_match};
use crate::data::{generate_synthetic, load_dataset, split_per_subject, Dataset, Split};
use crate::error::Result;
use crate::gabor::GaborBank;
use crate::model::{resolve_classes, train, DataSource, RunConfig, SacNet, Scale, TrainOptions, TrainSummary, Trainer};
use crate::verify::{build_score_set, build_score_set_with, eer, roc, EerResult, RocCurve, VerificationScoreSet};

/// Loads the configured dataset at the model's input size.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.source {
        DataSource::Synthetic => generate_synthetic(&cfg.data.synthetic_spec(cfg.model.input_hw)),
        DataSource::Dir(root) => load_dataset(root, cfg.model.input_hw),
    }
}

pub struct TrainedRun {
    pub trainer: Trainer,
    pub summary: TrainSummary,
    pub split: Split,
}

/// Splits `ds`, resolves the class count and trains to completion.
pub fn train_on(cfg: &RunConfig, ds: &Dataset, opts: &TrainOptions) -> Result<TrainedRun> {
    let split = split_per_subject(ds, cfg.data.train_fraction)?;
    let mut cfg = cfg.clone();
    resolve_classes(&mut cfg, ds.n_subjects())?;
    let mut trainer = Trainer::new(cfg)?;
    let summary = train(&mut trainer, ds, &split.train, opts)?;
    Ok(TrainedRun { trainer, summary, split })
}

/// Scores, EER and ROC of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub scores: VerificationScoreSet,
    pub eer: EerResult,
    pub roc: RocCurve,
}

fn finish(scores: VerificationScoreSet) -> Result<Evaluation> {
    let e = eer(&scores)?;
    let curve = roc(&scores)?;
    Ok(Evaluation {
        scores,
        eer: e,
        roc: curve,
    })
}

/// Cosine verification on the embeddings of `indices`.
pub fn evaluate(model: &SacNet, cfg: &RunConfig, ds: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    let (emb, _) = model.infer(&ds.batch(indices), cfg.model.batch_size)?;
    let scores = build_score_set(&emb, &ds.labels(indices), cfg.data.pairing, cfg.model.seed)?;
    finish(scores)
}

/// CompCode verification of `indices` with a noise-free bank at the middle
/// branch's kernel size.
pub fn compcode_baseline(cfg: &RunConfig, ds: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    let bank = GaborBank::classic(cfg.model.kernel_size(Scale::Middle), cfg.model.n_orientations)?;
    let maps = compcode_encode(&bank, &ds.batch(indices))?;
    let scores = build_score_set_with(&ds.labels(indices), cfg.data.pairing, cfg.model.seed, |i, j| {
        compcode_match(&maps[i], &maps[j])
    })?;
    finish(scores)
}

/// Branch subsets in table order: each scale alone, then tiny+middle,
/// middle+large and all three.
pub const BRANCH_ROWS: [[bool; 3]; 6] = [
    [true, false, false],
    [false, true, false],
    [false, false, true],
    [true, true, false],
    [false, true, true],
    [true, true, true],
];

/// (use_ascm, use_iscm) in table order.
pub const MODULE_ROWS: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

/// EERs of one ablation sweep; each row holds one value per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub branch_eer: Vec<Vec<f64>>,
    pub module_eer: Vec<Vec<f64>>,
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "×"
    }
}

impl AblationReport {
    /// Markdown with one table per sweep; EERs in percent.
    pub fn to_markdown(&self) -> String {
        let seed_cols: String = self.seeds.iter().map(|s| format!(" EER % (seed {s}) |")).collect();
        let seed_rule: String = self.seeds.iter().map(|_| "---:|").collect();
        let multi = self.seeds.len() > 1;
        let cells = |row: &[f64]| {
            let mut c: String = row.iter().map(|e| format!(" {:.4} |", e * 100.0)).collect();
            if multi {
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                let _ = write!(c, " {:.4} |", mean * 100.0);
            }
            c
        };
        let (mean_col, mean_rule) = if multi { (" mean EER % |", "---:|") } else { ("", "") };
        let mut s = String::from("# Ablation\n\n## Branch scales\n\n");
        let _ = writeln!(s, "| Tiny scale | Middle scale | Large scale |{seed_cols}{mean_col}");
        let _ = writeln!(s, "|:---:|:---:|:---:|{seed_rule}{mean_rule}");
        for (on, row) in BRANCH_ROWS.iter().zip(&self.branch_eer) {
            let _ = writeln!(s, "| {} | {} | {} |{}", mark(on[0]), mark(on[1]), mark(on[2]), cells(row));
        }
        s.push_str("\n## Competition modules\n\n");
        let _ = writeln!(s, "| ASCM | ISCM |{seed_cols}{mean_col}");
        let _ = writeln!(s, "|:---:|:---:|{seed_rule}{mean_rule}");
        for ((ascm, iscm), row) in MODULE_ROWS.iter().zip(&self.module_eer) {
            let _ = writeln!(s, "| {} | {} |{}", mark(*ascm), mark(*iscm), cells(row));
        }
        s
    }

    /// Seeds at which the full module configuration has the lowest EER of
    /// its table (ties count as lowest).
    pub fn full_module_wins(&self) -> usize {
        (0..self.seeds.len())
            .filter(|&k| {
                let full = self.module_eer[MODULE_ROWS.len() - 1][k];
                self.module_eer.iter().all(|row| full <= row[k])
            })
            .count()
    }
}

/// Retrains every branch and module combination for each seed and evaluates
/// on the held-out split. `cfg` supplies everything else; the shared full
/// configuration is trained once per seed.
pub fn run_ablation(cfg: &RunConfig, ds: &Dataset, seeds: &[u64], progress: bool) -> Result<AblationReport> {
    let mut branch_eer = vec![Vec::new(); BRANCH_ROWS.len()];
    let mut module_eer = vec![Vec::new(); MODULE_ROWS.len()];
    for &seed in seeds {
        let mut cache: Vec<(String, f64)> = Vec::new();
        let mut run = |branches: [bool; 3], ascm: bool, iscm: bool| -> Result<f64> {
            let mut c = cfg.clone();
            c.model.seed = seed;
            c.model.branches = branches;
            c.model.use_ascm = ascm;
            c.model.use_iscm = iscm;
            let key = c.to_text();
            if let Some((_, e)) = cache.iter().find(|(k, _)| *k == key) {
                return Ok(*e);
            }
            let trained = train_on(&c, ds, &TrainOptions::default())?;
            let ev = evaluate(&trained.trainer.model, &trained.trainer.config, ds, &trained.split.eval)?;
            if progress {
                let tags: Vec<&str> = c.model.enabled_scales().into_iter().map(Scale::tag).collect();
                eprintln!(
                    "seed {seed} branches {} ascm={ascm} iscm={iscm}: eer {:.4}%",
                    tags.join("+"),
                    ev.eer.eer * 100.0
                );
            }
            cache.push((key, ev.eer.eer));
            Ok(ev.eer.eer)
        };
        for (row, &branches) in BRANCH_ROWS.iter().enumerate() {
            branch_eer[row].push(run(branches, cfg.model.use_ascm, cfg.model.use_iscm)?);
        }
        for (row, &(ascm, iscm)) in MODULE_ROWS.iter().enumerate() {
            module_eer[row].push(run(cfg.model.branches, ascm, iscm)?);
        }
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        branch_eer,
        module_eer,
    })
}

/// Writes `ablation.md` into `dir`.
pub fn write_ablation(dir: &Path, report: &AblationReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let path = dir.join("ablation.md");
    std::fs::write(&path, report.to_markdown()).map_err(|e| crate::Error::io(&path, e))
}
