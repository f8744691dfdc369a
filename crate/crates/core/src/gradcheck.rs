//! Central finite-difference gradient checking against [`Graph::backward`].
//!
//! Numeric derivatives use the five-point stencil
//! `(f(x−2ε) − 8f(x−ε) + 8f(x+ε) − f(x+2ε)) / 12ε`, whose truncation error is
//! O(ε⁴) rather than the O(ε²) of the two-point form.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Worst disagreement found by [`check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error with a magnitude floor, so components whose true
/// gradient is essentially zero are compared on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn stencil(at: &mut impl FnMut(f64) -> Result<f64>, eps: f64) -> Result<f64> {
    let (p1, m1) = (at(eps)?, at(-eps)?);
    let (p2, m2) = (at(2.0 * eps)?, at(-2.0 * eps)?);
    Ok((m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * eps))
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences of step `eps` for every element of every input.
pub fn check<F>(inputs: &[Tensor], eps: f64, floor: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
    drop(g);

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.data(out)[0])
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for ei in 0..grads.len() {
            let orig = work[ti].data()[ei];
            let mut at = |d: f64| -> Result<f64> {
                work[ti].data_mut()[ei] = orig + d;
                eval(&work)
            };
            let numeric = stencil(&mut at, eps)?;
            work[ti].data_mut()[ei] = orig;
            let r = rel_err(grads[ei], numeric, floor);
            report.max_abs_err = report.max_abs_err.max((grads[ei] - numeric).abs());
            if r > report.max_rel_err {
                report.max_rel_err = r;
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Like [`check`], for long-lived parameters that `f` registers with
/// [`Graph::bind`]. `params` lists the tensors of a model in a fixed order;
/// each is perturbed in place on a clone of `model`.
pub fn check_params<M, P, F>(model: &M, eps: f64, floor: f64, params: P, f: F) -> Result<GradReport>
where
    M: Clone,
    P: Fn(&mut M) -> Vec<&mut Tensor>,
    F: Fn(&mut Graph, &M) -> Result<Var>,
{
    let mut work = model.clone();
    let mut g = Graph::new();
    let loss = f(&mut g, &work)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params(&mut work)
        .into_iter()
        .map(|t| {
            let t: &Tensor = t;
            g.bound_var(t)
                .and_then(|v| g.grad(v))
                .map_or_else(|| vec![0.0; t.numel()], |s| s.to_vec())
        })
        .collect();
    drop(g);

    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, m)?;
        Ok(g.data(out)[0])
    };
    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (ti, grads) in analytic.iter().enumerate() {
        for ei in 0..grads.len() {
            let orig = params(&mut work)[ti].data()[ei];
            let mut at = |d: f64| -> Result<f64> {
                params(&mut work)[ti].data_mut()[ei] = orig + d;
                eval(&work)
            };
            let numeric = stencil(&mut at, eps)?;
            params(&mut work)[ti].data_mut()[ei] = orig;
            let r = rel_err(grads[ei], numeric, floor);
            report.max_abs_err = report.max_abs_err.max((grads[ei] - numeric).abs());
            if r > report.max_rel_err {
                report.max_rel_err = r;
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
