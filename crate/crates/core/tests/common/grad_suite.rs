//! Finite-difference checks shared by the gradient tests and the acceptance
//! run. Every case reduces its op output to a scalar with a random weighted
//! sum so that all output elements are exercised.

use sacnet::attention::{msa_forward, MsaConfig, MsaWeights};
use sacnet::competition::FeatureMap;
use sacnet::gabor::{synthesize_kernel, GaborBank, GaborParams, GaborValues};
use sacnet::gradcheck::{check, check_params, GradReport};
use sacnet::model::{loss, LossWeights, ModelConfig, PairPlan, SacNet};
use sacnet::tensor::{Graph, Tensor, Var};
use sacnet::Result;

use super::{rng, uniform, weighted_sum};

pub const EPS: f64 = 1e-3;
/// Gradients smaller than this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-3;
pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

pub struct Case {
    pub name: &'static str,
    pub report: GradReport,
}

fn run<F>(name: &'static str, inputs: &[Tensor], f: F) -> Case
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = check(inputs, EPS, FLOOR, |g, v| {
        let out = f(g, v)?;
        weighted_sum(g, out, 99)
    })
    .unwrap_or_else(|e| panic!("{name}: {e}"));
    Case { name, report }
}

/// Values bounded away from zero, so kinks and poles stay outside ±EPS.
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng(seed);
    let t = uniform(&mut r, shape, 0.2, 1.5);
    let mut s = rng(seed + 1000);
    let signs = uniform(&mut s, shape, -1.0, 1.0);
    Tensor::from_fn(shape, |i| if signs.data()[i] < 0.0 { -t.data()[i] } else { t.data()[i] })
}

fn rand(seed: u64, shape: &[usize]) -> Tensor {
    uniform(&mut rng(seed), shape, -1.0, 1.0)
}

fn positive(seed: u64, shape: &[usize]) -> Tensor {
    uniform(&mut rng(seed), shape, 0.5, 2.0)
}

/// Values whose pairwise gaps along every axis exceed 2·EPS, so max stays
/// differentiable under perturbation.
fn distinct(seed: u64, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng(seed));
    Tensor::from_fn(shape, |i| order[i] as f64 * 0.05 - 1.0)
}

pub fn tensor_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    let a = || rand(1, &[3, 4]);
    let b = || rand(2, &[3, 4]);
    let row = || rand(3, &[4]);
    cases.push(run("add", &[a(), b()], |g, v| g.add(v[0], v[1])));
    cases.push(run("add broadcast", &[a(), row()], |g, v| g.add(v[0], v[1])));
    cases.push(run("sub", &[a(), b()], |g, v| g.sub(v[0], v[1])));
    cases.push(run("sub broadcast", &[a(), row()], |g, v| g.sub(v[0], v[1])));
    cases.push(run("mul", &[a(), b()], |g, v| g.mul(v[0], v[1])));
    cases.push(run("mul broadcast scalar", &[a(), Tensor::scalar(0.7)], |g, v| g.mul(v[0], v[1])));
    cases.push(run("div", &[a(), positive(4, &[3, 4])], |g, v| g.div(v[0], v[1])));
    cases.push(run("div broadcast", &[a(), positive(5, &[4])], |g, v| g.div(v[0], v[1])));
    cases.push(run("scale", &[a()], |g, v| Ok(g.scale(v[0], -2.5))));
    cases.push(run("add_scalar", &[a()], |g, v| Ok(g.add_scalar(v[0], 3.0))));
    cases.push(run("neg", &[a()], |g, v| Ok(g.neg(v[0]))));
    cases.push(run("exp", &[a()], |g, v| Ok(g.exp(v[0]))));
    cases.push(run("cos", &[a()], |g, v| Ok(g.cos(v[0]))));
    cases.push(run("sin", &[a()], |g, v| Ok(g.sin(v[0]))));
    cases.push(run("softplus", &[rand(6, &[3, 4]).reshaped(&[12]).unwrap()], |g, v| {
        let s = g.scale(v[0], 4.0);
        Ok(g.softplus(s))
    }));
    cases.push(run("sqrt", &[positive(7, &[3, 4])], |g, v| Ok(g.sqrt(v[0]))));
    cases.push(run("relu", &[away_from_zero(8, &[3, 4])], |g, v| Ok(g.relu(v[0]))));
    cases.push(run("square", &[a()], |g, v| Ok(g.square(v[0]))));
    cases.push(run("sum", &[a()], |g, v| Ok(g.sum(v[0]))));
    cases.push(run("mean", &[a()], |g, v| Ok(g.mean(v[0]))));
    let t3 = || rand(9, &[2, 3, 4]);
    for axis in 0..3 {
        cases.push(run("sum_axis", &[t3()], move |g, v| g.sum_axis(v[0], axis)));
        cases.push(run("reduce_mean", &[t3()], move |g, v| g.reduce_mean(v[0], axis)));
        cases.push(run("reduce_max", &[distinct(10, &[2, 3, 4])], move |g, v| g.reduce_max(v[0], axis)));
        cases.push(run("softmax", &[t3()], move |g, v| g.softmax(v[0], axis)));
        cases.push(run("log_softmax", &[t3()], move |g, v| g.log_softmax(v[0], axis)));
        cases.push(run("layer_normalize", &[t3()], move |g, v| g.layer_normalize(v[0], axis)));
        cases.push(run("l2_normalize", &[t3()], move |g, v| g.l2_normalize(v[0], axis)));
    }
    cases.push(run("reshape", &[t3()], |g, v| {
        let r = g.reshape(v[0], &[6, 4])?;
        g.mul(r, r)
    }));
    cases.push(run("permute", &[t3()], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        g.mul(p, p)
    }));
    cases.push(run("concat", &[rand(11, &[1, 2, 3, 3]), rand(12, &[1, 3, 3, 3])], |g, v| {
        g.concat(&[v[0], v[1]], 1)
    }));
    cases.push(run("concat axis 0", &[rand(13, &[2, 3]), rand(14, &[1, 3])], |g, v| {
        g.concat(&[v[0], v[1]], 0)
    }));
    cases.push(run("matmul", &[rand(15, &[3, 5]), rand(16, &[5, 2])], |g, v| g.matmul(v[0], v[1])));
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 2)] {
        cases.push(run("conv2d", &[rand(17, &[2, 3, 6, 6]), rand(18, &[2, 3, 3, 3])], move |g, v| {
            g.conv2d(v[0], v[1], stride, pad)
        }));
    }
    cases.push(run(
        "attention",
        &[rand(19, &[2, 5, 3]), rand(20, &[2, 5, 3]), rand(21, &[2, 5, 3])],
        |g, v| g.attention(v[0], v[1], v[2]),
    ));
    cases.push(run("gather_rows", &[rand(22, &[4, 3])], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3])));
    cases.push(run("composite", &[rand(23, &[3, 4]), positive(24, &[4]), rand(25, &[4, 2])], |g, v| {
        let d = g.div(v[0], v[1])?;
        let e = g.exp(d);
        let m = g.matmul(e, v[2])?;
        let s = g.softmax(m, 1)?;
        let c = g.cos(s);
        g.layer_normalize(c, 0)
    }));
    cases
}

fn run_params<M, P, F>(name: &'static str, model: &M, params: P, f: F) -> Case
where
    M: Clone,
    P: Fn(&mut M) -> Vec<&mut Tensor>,
    F: Fn(&mut Graph, &M) -> Result<Var>,
{
    let report = check_params(model, EPS, FLOOR, params, |g, m| {
        let out = f(g, m)?;
        weighted_sum(g, out, 99)
    })
    .unwrap_or_else(|e| panic!("{name}: {e}"));
    Case { name, report }
}

pub fn gabor_cases() -> Vec<Case> {
    let p = GaborParams::from_values(GaborValues {
        lambda: 4.3,
        theta: 0.6,
        psi: 0.4,
        sigma: 1.9,
        gamma: 0.8,
    });
    let mut cases = vec![run_params(
        "gabor kernel (all five parameters)",
        &p,
        |p| p.tensors_mut().into_iter().collect(),
        |g, p| synthesize_kernel(g, p, 7),
    )];
    let bank = GaborBank::init(5, 3, 8).unwrap();
    let img = rand(30, &[1, 2, 9, 9]);
    for stride in [1, 2] {
        let img = img.clone();
        cases.push(run_params(
            "gabor bank forward",
            &bank,
            |b| b.params_mut().iter_mut().flat_map(|p| p.tensors_mut()).collect(),
            move |g, b| {
                let x = g.constant(img.clone());
                Ok(b.forward(g, FeatureMap::generic(x), stride)?.var)
            },
        ));
    }
    cases
}

#[derive(Clone)]
struct MsaBlock {
    cfg: MsaConfig,
    w: MsaWeights,
    x: Tensor,
}

pub fn msa_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    for (channels, heads, embed, name) in [(4, 2, 4, "msa"), (4, 2, 6, "msa (lifted)")] {
        let cfg = MsaConfig::new(channels, heads, embed).unwrap();
        let mut w = MsaWeights::init(&cfg, 5);
        // Move the norm affine off its identity init.
        for (i, v) in w.norm_gain.data_mut().iter_mut().enumerate() {
            *v += 0.1 * i as f64;
        }
        w.norm_bias.data_mut().iter_mut().for_each(|v| *v = 0.05);
        let block = MsaBlock {
            cfg,
            w,
            x: rand(40, &[2, channels, 4, 4]).with_grad(),
        };
        cases.push(run_params(
            name,
            &block,
            |b| {
                let mut ts: Vec<&mut Tensor> = vec![&mut b.x];
                ts.extend(b.w.named_params_mut().into_iter().map(|(_, t)| t));
                ts
            },
            |g, b| {
                let x = g.bind(&b.x);
                Ok(msa_forward(g, &b.cfg, &b.w, FeatureMap::generic(x))?.var)
            },
        ));
    }
    cases
}

/// The full network at 8×8 with kernels 3, 5, 7 and two orientations,
/// differentiated through the combined loss.
pub fn model_case() -> Case {
    let mut cfg = ModelConfig::toy();
    cfg.branch_kernel_sizes = [3, 5, 7];
    cfg.input_hw = 8;
    cfg.n_orientations = 2;
    cfg.msa_heads = 2;
    cfg.msa_embed = 4;
    cfg.embedding_dim = 6;
    cfg.n_classes = Some(2);
    cfg.seed = 3;
    let net = SacNet::new(&cfg).unwrap();
    let images = uniform(&mut rng(50), &[4, 1, 8, 8], 0.0, 1.0);
    let labels = [0usize, 0, 1, 1];
    let plan = PairPlan::from_indices(&[(0, 1), (1, 2), (2, 3)], &labels);
    let weights = LossWeights {
        w_ce: 1.0,
        w_con: 1.0,
        margin: 0.5,
    };
    let report = check_params(
        &net,
        EPS,
        FLOOR,
        |n| n.named_params_mut().into_iter().map(|(_, t)| t).collect(),
        |g, n| {
            let x = g.constant(images.clone());
            let out = n.forward(g, x)?;
            Ok(loss(g, out.embedding, out.logits, &labels, &plan, &weights)?.total)
        },
    )
    .unwrap();
    Case {
        name: "full model",
        report,
    }
}
