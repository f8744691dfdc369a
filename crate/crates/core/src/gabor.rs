//! Learnable Gabor filter banks.
//!
//! A filter is `exp(-(x'² + γ²y'²) / 2σ²) · cos(2πx'/λ + ψ)` with
//! `x' = x cosθ + y sinθ`, `y' = -x sinθ + y cosθ`, sampled at integer offsets
//! around the kernel center. λ, σ and γ are stored as raw values passed
//! through softplus so they stay positive under any gradient step.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::competition::{ChannelSemantics, FeatureMap};
use crate::error::{Error, Result};
use crate::tensor::{inverse_softplus, softplus, Graph, Tensor, Var};

/// Effective (constrained) parameter values of one filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaborValues {
    pub lambda: f64,
    pub theta: f64,
    pub psi: f64,
    pub sigma: f64,
    pub gamma: f64,
}

impl GaborValues {
    /// Filter value at integer offset `(x, y)` from the center.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let xr = x * c + y * s;
        let yr = -x * s + y * c;
        let env = (-(xr * xr + self.gamma * self.gamma * yr * yr) / (2.0 * self.sigma * self.sigma)).exp();
        env * (2.0 * PI * xr / self.lambda + self.psi).cos()
    }
}

/// The five learnable scalars of one filter, each a 0-d tensor.
/// `lambda`, `sigma`, `gamma` hold pre-softplus raw values.
#[derive(Clone, Debug, PartialEq)]
pub struct GaborParams {
    pub lambda: Tensor,
    pub theta: Tensor,
    pub psi: Tensor,
    pub sigma: Tensor,
    pub gamma: Tensor,
}

impl GaborParams {
    pub fn from_values(v: GaborValues) -> Self {
        let raw = |x: f64| Tensor::scalar(x).with_grad();
        GaborParams {
            lambda: raw(inverse_softplus(v.lambda)),
            theta: raw(v.theta),
            psi: raw(v.psi),
            sigma: raw(inverse_softplus(v.sigma)),
            gamma: raw(inverse_softplus(v.gamma)),
        }
    }

    pub fn values(&self) -> GaborValues {
        GaborValues {
            lambda: softplus(self.lambda.item()),
            theta: self.theta.item(),
            psi: self.psi.item(),
            sigma: softplus(self.sigma.item()),
            gamma: softplus(self.gamma.item()),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.lambda, &self.theta, &self.psi, &self.sigma, &self.gamma]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.lambda,
            &mut self.theta,
            &mut self.psi,
            &mut self.sigma,
            &mut self.gamma,
        ]
    }

    pub const NAMES: [&'static str; 5] = ["lambda", "theta", "psi", "sigma", "gamma"];
}

/// Centered integer offset grids `(x, y)` for a `k × k` kernel; `x` runs
/// along columns.
fn offset_grids(k: usize) -> (Tensor, Tensor) {
    let r = (k / 2) as f64;
    let x = Tensor::from_fn(&[k, k], |i| (i % k) as f64 - r);
    let y = Tensor::from_fn(&[k, k], |i| (i / k) as f64 - r);
    (x, y)
}

/// Records the `[k, k]` kernel for `p` on the graph, differentiable with
/// respect to all five raw parameters.
pub fn synthesize_kernel(g: &mut Graph, p: &GaborParams, k: usize) -> Result<Var> {
    if k % 2 == 0 {
        return Err(Error::EvenKernelSize(k));
    }
    let (xs, ys) = offset_grids(k);
    let x = g.constant(xs);
    let y = g.constant(ys);
    let lambda_raw = g.bind(&p.lambda);
    let theta = g.bind(&p.theta);
    let psi = g.bind(&p.psi);
    let sigma_raw = g.bind(&p.sigma);
    let gamma_raw = g.bind(&p.gamma);

    let lambda = g.softplus(lambda_raw);
    let sigma = g.softplus(sigma_raw);
    let gamma = g.softplus(gamma_raw);
    let cos_t = g.cos(theta);
    let sin_t = g.sin(theta);

    let xc = g.mul(x, cos_t)?;
    let ys_ = g.mul(y, sin_t)?;
    let xr = g.add(xc, ys_)?;
    let yc = g.mul(y, cos_t)?;
    let xs_ = g.mul(x, sin_t)?;
    let yr = g.sub(yc, xs_)?;

    let xr2 = g.square(xr);
    let yr2 = g.square(yr);
    let gamma2 = g.square(gamma);
    let yr2g = g.mul(yr2, gamma2)?;
    let quad = g.add(xr2, yr2g)?;
    let sigma2 = g.square(sigma);
    let two_sigma2 = g.scale(sigma2, 2.0);
    let ratio = g.div(quad, two_sigma2)?;
    let neg = g.neg(ratio);
    let envelope = g.exp(neg);

    let phase = g.div(xr, lambda)?;
    let phase = g.scale(phase, 2.0 * PI);
    let phase = g.add(phase, psi)?;
    let carrier = g.cos(phase);
    g.mul(envelope, carrier)
}

/// A bank of `n_orientations` independently parameterized filters of one size.
#[derive(Clone, Debug, PartialEq)]
pub struct GaborBank {
    kernel_size: usize,
    params: Vec<GaborParams>,
}

impl GaborBank {
    pub fn new(kernel_size: usize, params: Vec<GaborParams>) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::EvenKernelSize(kernel_size));
        }
        if params.is_empty() {
            return Err(Error::InvalidConfig("a gabor bank needs at least one orientation".into()));
        }
        Ok(GaborBank { kernel_size, params })
    }

    /// Initial bank: θⱼ = jπ/N, λ = k/2, σ = k/4, γ = 1, ψ = 0, each scaled by
    /// a seeded factor in `[0.99, 1.01]`.
    pub fn init(kernel_size: usize, n_orientations: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = move |v: f64| v * (1.0 + rng.random_range(-0.01..=0.01));
        let params = Self::grid_values(kernel_size, n_orientations)
            .into_iter()
            .map(|v| {
                GaborParams::from_values(GaborValues {
                    lambda: jitter(v.lambda),
                    theta: jitter(v.theta),
                    psi: jitter(v.psi),
                    sigma: jitter(v.sigma),
                    gamma: jitter(v.gamma),
                })
            })
            .collect();
        Self::new(kernel_size, params)
    }

    /// Noise-free bank with the same grid as [`GaborBank::init`]; used frozen
    /// by the CompCode baseline.
    pub fn classic(kernel_size: usize, n_orientations: usize) -> Result<Self> {
        let params = Self::grid_values(kernel_size, n_orientations)
            .into_iter()
            .map(GaborParams::from_values)
            .collect();
        Self::new(kernel_size, params)
    }

    fn grid_values(k: usize, n: usize) -> Vec<GaborValues> {
        (0..n)
            .map(|j| GaborValues {
                lambda: k as f64 / 2.0,
                theta: j as f64 * PI / n as f64,
                psi: 0.0,
                sigma: k as f64 / 4.0,
                gamma: 1.0,
            })
            .collect()
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn n_orientations(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[GaborParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [GaborParams] {
        &mut self.params
    }

    /// Kernel values evaluated outside any graph, `[N_o, k, k]` row-major.
    pub fn kernel_values(&self) -> Vec<f64> {
        let k = self.kernel_size;
        let r = (k / 2) as f64;
        let mut out = Vec::with_capacity(self.params.len() * k * k);
        for p in &self.params {
            let v = p.values();
            for i in 0..k * k {
                out.push(v.eval((i % k) as f64 - r, (i / k) as f64 - r));
            }
        }
        out
    }

    /// `[N_o, in_channels, k, k]` kernel with each orientation's 2-D kernel
    /// replicated across input channels.
    pub fn kernel_tensor(&self, g: &mut Graph, in_channels: usize) -> Result<Var> {
        let k = self.kernel_size;
        let mut per_orientation = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let kern = synthesize_kernel(g, p, k)?;
            let kern = g.reshape(kern, &[1, 1, k, k])?;
            let reps = vec![kern; in_channels];
            per_orientation.push(g.concat(&reps, 1)?);
        }
        g.concat(&per_orientation, 0)
    }

    /// Applies the bank to an NCHW map with `(k−1)/2` padding. Every
    /// orientation's kernel is replicated across input channels, which is
    /// computed as one convolution of the channel sum.
    pub fn forward(&self, g: &mut Graph, input: FeatureMap, stride: usize) -> Result<FeatureMap> {
        let shape = g.shape(input.var).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("gabor bank", format!("expected NCHW input, got {:?}", shape)));
        }
        let summed = if shape[1] == 1 {
            input.var
        } else {
            let s = g.sum_axis(input.var, 1)?;
            g.reshape(s, &[shape[0], 1, shape[2], shape[3]])?
        };
        let kernel = self.kernel_tensor(g, 1)?;
        let out = g.conv2d(summed, kernel, stride, self.kernel_size / 2)?;
        Ok(FeatureMap::new(out, ChannelSemantics::Orientation))
    }
}
