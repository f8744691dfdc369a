//! Acceptance run: one PASS/FAIL line per criterion with its runtime.
//!
//! Pass criterion names as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- gabor eer`.

mod common;

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use sacnet::attention::{attention_weights, msa_forward, MsaConfig, MsaWeights};
use sacnet::competition::{ascm_forward, compcode_encode, iscm_forward, Branch, ChannelSemantics, FeatureMap};
use sacnet::gabor::{synthesize_kernel, GaborBank, GaborParams, GaborValues};
use sacnet::model::{Checkpoint, RunConfig, TrainOptions};
use sacnet::pipeline::{compcode_baseline, evaluate, load_data, run_ablation, train_on, BRANCH_ROWS, MODULE_ROWS};
use sacnet::tensor::{Graph, Tensor};
use sacnet::verify::{eer, roc, VerificationScoreSet};

use common::grad_suite::{gabor_cases, model_case, msa_cases, tensor_cases, Case, MODEL_TOL, OP_TOL};

const TOY: &str = include_str!("../../../configs/toy.conf");
const DESK: &str = include_str!("../../../configs/desk.conf");
const ABLATION: &str = include_str!("../../../configs/ablation.conf");

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let worst = |cases: &[Case]| {
        cases
            .iter()
            .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
            .map(|c| (c.name, c.report.max_rel_err))
            .unwrap()
    };
    let mut ops = tensor_cases();
    ops.extend(gabor_cases());
    ops.extend(msa_cases());
    let (op_name, op_err) = worst(&ops);
    let model = model_case();
    let detail = format!(
        "{} op cases, worst {op_name} rel {op_err:.2e} (< {OP_TOL:e}); full model rel {:.2e} (< {MODEL_TOL:e})",
        ops.len(),
        model.report.max_rel_err
    );
    ensure(op_err < OP_TOL && model.report.max_rel_err < MODEL_TOL, detail)
}

fn gabor_correctness() -> Outcome {
    let mut r = common::rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let v = GaborValues {
            lambda: r.random_range(2.0..20.0),
            theta: r.random_range(-PI..PI),
            psi: r.random_range(-PI..PI),
            sigma: r.random_range(1.0..8.0),
            gamma: r.random_range(0.3..2.0),
        };
        let p = GaborParams::from_values(v);
        let e = p.values();
        let mut g = Graph::new();
        let k = synthesize_kernel(&mut g, &p, 17).map_err(|e| e.to_string())?;
        for (i, &got) in g.data(k).iter().enumerate() {
            let (x, y) = ((i % 17) as f64 - 8.0, (i / 17) as f64 - 8.0);
            let want = common::gabor_oracle(e.lambda, e.theta, e.psi, e.sigma, e.gamma, x, y);
            worst = worst.max((got - want).abs());
        }
    }
    ensure(worst < 1e-12, format!("max |kernel − formula| {worst:.2e} over 20 sets at 17×17"))
}

fn channel_vectors(data: &[f64], shape: &[usize]) -> Vec<Vec<f64>> {
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    (0..shape[0] * hw)
        .map(|i| (0..c).map(|ch| data[((i / hw) * c + ch) * hw + i % hw]).collect())
        .collect()
}

fn competition_contracts() -> Outcome {
    let mut worst_sum: f64 = 0.0;
    let mut argmax_mismatch = 0;
    let mut r = common::rng(31);
    for seed in 0..3u64 {
        let msa_cfg = MsaConfig::new(6, 2, 8).map_err(|e| e.to_string())?;
        let branches: Vec<Branch> = [3usize, 5, 7]
            .iter()
            .map(|&k| Branch {
                first: GaborBank::init(k, 6, seed * 10 + k as u64).unwrap(),
                second: GaborBank::init(k, 6, seed * 10 + k as u64 + 1).unwrap(),
                msa_cfg,
                msa: MsaWeights::init(&msa_cfg, seed * 10 + k as u64 + 2),
            })
            .collect();
        let mut g = Graph::new();
        let x = g.constant(common::uniform(&mut r, &[2, 1, 16, 16], 0.0, 1.0));
        let mut msa_maps = Vec::new();
        for b in &branches {
            let out = iscm_forward(&mut g, b, FeatureMap::generic(x), 1.0).map_err(|e| e.to_string())?;
            let shape = g.shape(out.f_inner.var).to_vec();
            let inner = channel_vectors(g.data(out.f_inner.var), &shape);
            let msa = channel_vectors(g.data(out.f_msa.var), &shape);
            for (p, m) in inner.iter().zip(&msa) {
                worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
                argmax_mismatch += (common::argmax(p) != common::argmax(m)) as usize;
            }
            msa_maps.push(out.f_msa);
        }
        let across = ascm_forward(&mut g, &msa_maps, false, 1.0).map_err(|e| e.to_string())?;
        if across.semantics != ChannelSemantics::ScaleGroup {
            return Err("ASCM output semantics".into());
        }
        let shape = g.shape(across.var).to_vec();
        for p in channel_vectors(g.data(across.var), &shape) {
            worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let bank = GaborBank::classic(9, 6).map_err(|e| e.to_string())?;
    let mut scale_changes = 0;
    for _ in 0..10 {
        let img = common::uniform(&mut r, &[1, 1, 32, 32], 0.0, 1.0);
        let base = compcode_encode(&bank, &img).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let s: f64 = r.random_range(0.01..100.0);
            let scaled = Tensor::from_fn(img.shape(), |i| img.data()[i] * s);
            scale_changes += (compcode_encode(&bank, &scaled).map_err(|e| e.to_string())? != base) as usize;
        }
    }
    ensure(
        worst_sum <= 1e-9 && argmax_mismatch == 0 && scale_changes == 0,
        format!(
            "max |Σ softmax − 1| {worst_sum:.1e}; argmax mismatches {argmax_mismatch}; CompCode maps changed by scaling {scale_changes}/50"
        ),
    )
}

fn msa_forward_value(cfg: &MsaConfig, w: &MsaWeights, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = msa_forward(&mut g, cfg, w, FeatureMap::generic(xv)).unwrap();
    g.value(y.var).clone()
}

fn permute_positions(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape();
    let hw = s[2] * s[3];
    let mut out = vec![0.0; x.numel()];
    for plane in 0..s[0] * s[1] {
        for (p, &q) in perm.iter().enumerate() {
            out[plane * hw + q] = x.data()[plane * hw + p];
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

fn msa_contracts() -> Outcome {
    let mut r = common::rng(41);
    let mut shape_ok = true;
    let mut uniform_gap: f64 = 0.0;
    let mut equivariance: f64 = 0.0;
    for cfg in [MsaConfig::new(6, 2, 8).unwrap(), MsaConfig::new(4, 2, 4).unwrap()] {
        for seed in 0..5 {
            let w = MsaWeights::init(&cfg, seed);
            let x = common::uniform(&mut r, &[2, cfg.channels, 4, 4], -2.0, 2.0);
            let y = msa_forward_value(&cfg, &w, &x);
            shape_ok &= y.shape() == x.shape();
            let mut perm: Vec<usize> = (0..16).collect();
            perm.shuffle(&mut r);
            let a = msa_forward_value(&cfg, &w, &permute_positions(&x, &perm));
            equivariance = equivariance.max(a.max_abs_diff(&permute_positions(&y, &perm)));

            let mut zero = w.clone();
            for t in zero.query.iter_mut().chain(zero.key.iter_mut()) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            for probs in attention_weights(&cfg, &zero, &x).map_err(|e| e.to_string())? {
                for &p in probs.data() {
                    uniform_gap = uniform_gap.max((p - 1.0 / 16.0).abs());
                }
            }
        }
    }
    ensure(
        shape_ok && uniform_gap < 1e-15 && equivariance < 1e-9,
        format!("shapes preserved {shape_ok}; zero Q/K deviation {uniform_gap:.1e}; permutation gap {equivariance:.1e} on 4×4"),
    )
}

fn eer_oracle() -> Outcome {
    let mut r = common::rng(77);
    let mut worst_margin = f64::INFINITY;
    for _ in 0..200 {
        let ng = r.random_range(2..60);
        let ni = r.random_range(2..60);
        let shift: f64 = r.random_range(0.0..2.0);
        let genuine: Vec<f64> = (0..ng).map(|_| shift + r.random_range(-1.0..1.0) + r.random_range(-1.0..1.0)).collect();
        let impostor: Vec<f64> = (0..ni).map(|_| r.random_range(-1.0..1.0) + r.random_range(-1.0..1.0)).collect();
        let s = VerificationScoreSet::new(genuine, impostor);
        let tol = 1.0 / (2.0 * ng.min(ni) as f64);
        let got = eer(&s).map_err(|e| e.to_string())?.eer;
        let (want, _, _) = common::dense_sweep(&s, 1_000_000);
        worst_margin = worst_margin.min(tol - (got - want).abs());
    }
    let genuine: Vec<f64> = (0..10_000).map(|_| r.random()).collect();
    let impostor: Vec<f64> = (0..10_000).map(|_| r.random()).collect();
    let chance = VerificationScoreSet::new(genuine, impostor);
    let e = eer(&chance).map_err(|e| e.to_string())?.eer;
    let auc = roc(&chance).map_err(|e| e.to_string())?.auc();
    ensure(
        worst_margin >= 0.0 && (e - 0.5).abs() < 0.02,
        format!("200 sets within 1/(2·min n) (tightest slack {worst_margin:.3}); chance EER {e:.4}, AUC {auc:.4}"),
    )
}

fn overfit() -> Outcome {
    let cfg = RunConfig::parse(TOY).map_err(|e| e.to_string())?;
    let ds = load_data(&cfg).map_err(|e| e.to_string())?;
    let opts = TrainOptions {
        track_accuracy: true,
        ..TrainOptions::default()
    };
    let run = train_on(&cfg, &ds, &opts).map_err(|e| e.to_string())?;
    let per_epoch = run.summary.records.len() / cfg.model.epochs;
    let first = run.summary.epoch_accuracy.iter().position(|&a| a == 1.0);
    let again = train_on(&cfg, &ds, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let bits = |r: &sacnet::pipeline::TrainedRun| r.summary.records.iter().map(|x| x.loss.to_bits()).collect::<Vec<_>>();
    let identical = bits(&run) == bits(&again) && run.trainer.checkpoint().to_bytes() == again.trainer.checkpoint().to_bytes();
    let finite = run.summary.records.iter().all(|r| r.loss.is_finite());
    let steps = first.map(|e| (e + 1) * per_epoch);
    ensure(
        steps.is_some_and(|s| s <= 200) && identical && finite,
        format!(
            "{} subjects × {} samples; 100% train accuracy after {} steps; rerun bit-identical {identical}",
            ds.n_subjects(),
            ds.len() / ds.n_subjects(),
            steps.map_or("never".into(), |s| s.to_string())
        ),
    )
}

fn desk_scale() -> Outcome {
    let cfg = RunConfig::parse(DESK).map_err(|e| e.to_string())?;
    let ds = load_data(&cfg).map_err(|e| e.to_string())?;
    let run = train_on(&cfg, &ds, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let net = evaluate(&run.trainer.model, &run.trainer.config, &ds, &run.split.eval).map_err(|e| e.to_string())?;
    let cc = compcode_baseline(&run.trainer.config, &ds, &run.split.eval).map_err(|e| e.to_string())?;
    let (a, b) = (net.eer.eer, cc.eer.eer);
    ensure(
        a < 0.05 && a < b && b < 0.20,
        format!(
            "{}×{} at {}px, kernels {:?}: SAC-Net EER {:.4}% vs CompCode {:.4}% (identity sanity: CompCode < 20%)",
            ds.n_subjects(),
            ds.len() / ds.n_subjects(),
            ds.hw,
            cfg.model.branch_kernel_sizes,
            a * 100.0,
            b * 100.0
        ),
    )
}

fn ablation() -> Outcome {
    let cfg = RunConfig::parse(ABLATION).map_err(|e| e.to_string())?;
    let ds = load_data(&cfg).map_err(|e| e.to_string())?;
    let report = run_ablation(&cfg, &ds, &[0, 1, 2], false).map_err(|e| e.to_string())?;
    let md = report.to_markdown();
    let rows = md.lines().filter(|l| l.starts_with("| ✓") || l.starts_with("| ×")).count();
    let wins = report.full_module_wins();
    let full: Vec<String> = report.module_eer[MODULE_ROWS.len() - 1].iter().map(|e| format!("{:.2}%", e * 100.0)).collect();
    let best_other: Vec<String> = (0..3)
        .map(|k| {
            let m = report.module_eer[..MODULE_ROWS.len() - 1].iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
            format!("{:.2}%", m * 100.0)
        })
        .collect();
    ensure(
        rows == BRANCH_ROWS.len() + MODULE_ROWS.len() && wins >= 2,
        format!(
            "{rows} table rows; full model lowest in {wins}/3 seeds (full {} vs best ablated {})",
            full.join(", "),
            best_other.join(", ")
        ),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let mut cfg = RunConfig::parse(TOY).map_err(|e| e.to_string())?;
    cfg.model.epochs = 1;
    let ds = load_data(&cfg).map_err(|e| e.to_string())?;
    let run = train_on(&cfg, &ds, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.sacn");
    run.trainer.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).and_then(|c| c.model()).map_err(|e| e.to_string())?;
    let images = ds.batch(&(0..ds.len()).collect::<Vec<_>>());
    let before = run.trainer.model.infer(&images, 6).map_err(|e| e.to_string())?;
    let after = loaded.infer(&images, 6).map_err(|e| e.to_string())?;
    let same = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    let identical = same(&before.0, &after.0) && same(&before.1, &after.1);
    ensure(identical, format!("{} embeddings and logits bit-identical after save→load: {identical}", ds.len()))
}

struct Criterion {
    key: &'static str,
    title: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { key: "gradient", title: "Gradient suite", limit: Duration::from_secs(60), run: gradient_suite },
        Criterion { key: "gabor", title: "Gabor correctness", limit: Duration::from_secs(1), run: gabor_correctness },
        Criterion { key: "competition", title: "Competition contracts", limit: Duration::from_secs(10), run: competition_contracts },
        Criterion { key: "msa", title: "MSA contracts", limit: Duration::from_secs(10), run: msa_contracts },
        Criterion { key: "eer", title: "EER oracle", limit: Duration::from_secs(30), run: eer_oracle },
        Criterion { key: "overfit", title: "End-to-end overfit", limit: Duration::from_secs(300), run: overfit },
        Criterion { key: "desk", title: "Desk-scale verification", limit: Duration::from_secs(20 * 60), run: desk_scale },
        Criterion { key: "ablation", title: "Ablation harness", limit: Duration::from_secs(90 * 60), run: ablation },
        Criterion { key: "checkpoint", title: "Checkpoint round-trip", limit: Duration::from_secs(10), run: checkpoint_round_trip },
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.key.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.limit;
        let (status, detail) = match (&outcome, in_time) {
            (Ok(d), true) => ("PASS", d.clone()),
            (Ok(d), false) => ("FAIL", format!("{d}; over the {:?} limit", c.limit)),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("{status} {} [{:.1}s / {}s] {detail}", c.title, elapsed.as_secs_f64(), c.limit.as_secs());
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
