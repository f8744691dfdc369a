use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Index pairs within a batch; `same` marks same-class pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairPlan {
    pub pairs: Vec<(usize, usize, bool)>,
}

impl PairPlan {
    /// Flags every listed pair by comparing `labels`.
    pub fn from_indices(pairs: &[(usize, usize)], labels: &[usize]) -> Self {
        PairPlan {
            pairs: pairs.iter().map(|&(a, b)| (a, b, labels[a] == labels[b])).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_con: f64,
    pub margin: f64,
}

/// The scalar loss node and its two unweighted terms.
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub ce: f64,
    pub contrastive: f64,
}

/// Mean negative log-likelihood of `labels` under `logits` (`[b, c]`).
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {:?} do not match {} labels", s, labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::shape("cross_entropy", format!("label {} outside {} classes", bad, s[1])));
    }
    let mut onehot = Tensor::zeros(&s);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * s[1] + l] = 1.0;
    }
    let ls = g.log_softmax(logits, 1)?;
    let mask = g.constant(onehot);
    let picked = g.mul(ls, mask)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / labels.len() as f64))
}

/// Mean over pairs of `d²` (same class) or `max(0, m − d)²` (different
/// class), with `d` the Euclidean distance between rows of `embedding`.
pub fn contrastive(g: &mut Graph, embedding: Var, plan: &PairPlan, margin: f64) -> Result<Var> {
    if plan.is_empty() {
        return Err(Error::EmptyPairPlan);
    }
    let n = g.shape(embedding)[0];
    if let Some(&(a, b, _)) = plan.pairs.iter().find(|&&(a, b, _)| a >= n || b >= n) {
        return Err(Error::shape("contrastive", format!("pair ({a}, {b}) outside batch of {n}")));
    }
    let left: Vec<usize> = plan.pairs.iter().map(|p| p.0).collect();
    let right: Vec<usize> = plan.pairs.iter().map(|p| p.1).collect();
    let same = Tensor::from_vec(plan.pairs.iter().map(|p| if p.2 { 1.0 } else { 0.0 }).collect());
    let diff = Tensor::from_vec(plan.pairs.iter().map(|p| if p.2 { 0.0 } else { 1.0 }).collect());
    let a = g.gather_rows(embedding, &left)?;
    let b = g.gather_rows(embedding, &right)?;
    let delta = g.sub(a, b)?;
    let sq = g.square(delta);
    let d2 = g.sum_axis(sq, 1)?;
    let same_mask = g.constant(same);
    let pull = g.mul(d2, same_mask)?;
    // The offset keeps the root differentiable at zero distance.
    let d2_safe = g.add_scalar(d2, 1e-12);
    let d = g.sqrt(d2_safe);
    let neg = g.neg(d);
    let gap = g.add_scalar(neg, margin);
    let hinge = g.relu(gap);
    let hinge_sq = g.square(hinge);
    let diff_mask = g.constant(diff);
    let push = g.mul(hinge_sq, diff_mask)?;
    let per_pair = g.add(pull, push)?;
    Ok(g.mean(per_pair))
}

/// `w_ce·CE + w_con·contrastive` on the unit `embedding` and `logits`.
pub fn loss(
    g: &mut Graph,
    embedding: Var,
    logits: Var,
    labels: &[usize],
    plan: &PairPlan,
    w: &LossWeights,
) -> Result<LossOutput> {
    let ce = cross_entropy(g, logits, labels)?;
    let ce_val = g.data(ce)[0];
    let weighted_ce = g.scale(ce, w.w_ce);
    if w.w_con == 0.0 {
        return Ok(LossOutput {
            total: weighted_ce,
            ce: ce_val,
            contrastive: 0.0,
        });
    }
    let con = contrastive(g, embedding, plan, w.margin)?;
    let con_val = g.data(con)[0];
    let weighted_con = g.scale(con, w.w_con);
    let total = g.add(weighted_ce, weighted_con)?;
    Ok(LossOutput {
        total,
        ce: ce_val,
        contrastive: con_val,
    })
}
