#![allow(dead_code)]

pub mod grad_suite;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sacnet::tensor::{Graph, Tensor, Var};
use sacnet::verify::VerificationScoreSet;
use sacnet::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output element reaches the
/// scalar with a distinct weight.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut r = rng(seed);
    let w = g.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Direct nested-loop NCHW cross-correlation.
pub fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ks) = (x.shape(), k.shape());
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kk) = (ks[0], ks[2]);
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for dy in 0..kk {
                            for dx in 0..kk {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                    * k.data()[((oi * c + ci) * kk + dy) * kk + dx];
                            }
                        }
                    }
                    out[((bi * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, o, oh, ow], out).unwrap()
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// The filter formula written out with no shared code.
pub fn gabor_oracle(lambda: f64, theta: f64, psi: f64, sigma: f64, gamma: f64, x: f64, y: f64) -> f64 {
    let xp = x * theta.cos() + y * theta.sin();
    let yp = -x * theta.sin() + y * theta.cos();
    (-(xp.powi(2) + gamma.powi(2) * yp.powi(2)) / (2.0 * sigma.powi(2))).exp() * (2.0 * PI * xp / lambda + psi).cos()
}

/// Dense uniform threshold sweep. Returns the mean of FAR and FRR where they
/// are closest, plus the largest `min(FAR, FRR)` and smallest `max(FAR, FRR)`
/// seen, which bracket the crossing even when tied scores make the rates
/// jump. Rates come from a merge over sorted scores, so the grid can be dense.
pub fn dense_sweep(s: &VerificationScoreSet, steps: usize) -> (f64, f64, f64) {
    let mut gen = s.genuine.clone();
    let mut imp = s.impostor.clone();
    gen.sort_by(f64::total_cmp);
    imp.sort_by(f64::total_cmp);
    let lo = gen[0].min(imp[0]) - 1e-9;
    let hi = gen[gen.len() - 1].max(imp[imp.len() - 1]) + 1e-9;
    let (mut gi, mut ii) = (0, 0);
    let mut best = (f64::INFINITY, 0.0);
    let (mut maximin, mut minimax) = (0.0f64, 1.0f64);
    for k in 0..=steps {
        let t = lo + (hi - lo) * k as f64 / steps as f64;
        while gi < gen.len() && gen[gi] < t {
            gi += 1;
        }
        while ii < imp.len() && imp[ii] < t {
            ii += 1;
        }
        let far = (imp.len() - ii) as f64 / imp.len() as f64;
        let frr = gi as f64 / gen.len() as f64;
        if (far - frr).abs() < best.0 {
            best = ((far - frr).abs(), (far + frr) / 2.0);
        }
        maximin = maximin.max(far.min(frr));
        minimax = minimax.min(far.max(frr));
    }
    (best.1, maximin, minimax)
}
