//! Multi-head self-attention over the spatial positions of a feature map,
//! followed by a residual connection and layer normalization.
//!
//! Every `h·w` position is a token whose embedding is its channel vector. No
//! positional encoding is added, so the block is equivariant to any
//! permutation of spatial positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::competition::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, AttnGeom};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsaConfig {
    /// Channels of the incoming feature map.
    pub channels: usize,
    pub n_heads: usize,
    /// Attention width. When it differs from `channels`, a learnable
    /// channel lift precedes the projections.
    pub embed_dim: usize,
}

impl MsaConfig {
    pub fn new(channels: usize, n_heads: usize, embed_dim: usize) -> Result<Self> {
        if channels == 0 || n_heads == 0 || embed_dim == 0 {
            return Err(Error::InvalidConfig("attention dimensions must be positive".into()));
        }
        if embed_dim % n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} is not divisible by {} heads",
                embed_dim, n_heads
            )));
        }
        Ok(MsaConfig {
            channels,
            n_heads,
            embed_dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn lifted(&self) -> bool {
        self.embed_dim != self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsaWeights {
    /// `[channels, embed_dim]`, present iff the config is lifted.
    pub lift: Option<Tensor>,
    /// Per-head `[embed_dim, head_dim]` projections.
    pub query: Vec<Tensor>,
    pub key: Vec<Tensor>,
    pub value: Vec<Tensor>,
    /// `[embed_dim, channels]`: mixes the concatenated heads back onto the
    /// residual stream.
    pub output: Tensor,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

impl MsaWeights {
    /// Uniform weights in `±1/√embed_dim`; the norm gain starts at one and
    /// its bias at zero.
    pub fn init(cfg: &MsaConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (cfg.embed_dim as f64).sqrt();
        let mut uniform = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound)).with_grad()
        };
        let (e, hd) = (cfg.embed_dim, cfg.head_dim());
        let lift = cfg.lifted().then(|| uniform(&[cfg.channels, e]));
        let mut query = Vec::new();
        let mut key = Vec::new();
        let mut value = Vec::new();
        for _ in 0..cfg.n_heads {
            query.push(uniform(&[e, hd]));
            key.push(uniform(&[e, hd]));
            value.push(uniform(&[e, hd]));
        }
        let output = uniform(&[e, cfg.channels]);
        MsaWeights {
            lift,
            query,
            key,
            value,
            output,
            norm_gain: Tensor::full(&[cfg.channels], 1.0).with_grad(),
            norm_bias: Tensor::zeros(&[cfg.channels]).with_grad(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(l) = &self.lift {
            out.push(("lift".to_string(), l));
        }
        for h in 0..self.query.len() {
            out.push((format!("head{h}.query"), &self.query[h]));
            out.push((format!("head{h}.key"), &self.key[h]));
            out.push((format!("head{h}.value"), &self.value[h]));
        }
        out.push(("output".to_string(), &self.output));
        out.push(("norm_gain".to_string(), &self.norm_gain));
        out.push(("norm_bias".to_string(), &self.norm_bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        if let Some(l) = &mut self.lift {
            out.push(("lift".to_string(), l));
        }
        let heads = self.query.iter_mut().zip(self.key.iter_mut()).zip(self.value.iter_mut());
        for (h, ((q, k), v)) in heads.enumerate() {
            out.push((format!("head{h}.query"), q));
            out.push((format!("head{h}.key"), k));
            out.push((format!("head{h}.value"), v));
        }
        out.push(("output".to_string(), &mut self.output));
        out.push(("norm_gain".to_string(), &mut self.norm_gain));
        out.push(("norm_bias".to_string(), &mut self.norm_bias));
        out
    }
}

struct Tokens {
    /// `[b·h·w, channels]` residual stream.
    tokens: Var,
    /// `[b·h·w, embed_dim]` input to the projections.
    lifted: Var,
    b: usize,
    h: usize,
    w: usize,
}

fn tokenize(g: &mut Graph, cfg: &MsaConfig, w: &MsaWeights, input: Var) -> Result<Tokens> {
    let shape = g.shape(input).to_vec();
    if shape.len() != 4 || shape[1] != cfg.channels {
        return Err(Error::shape(
            "msa",
            format!("expected [b, {}, h, w], got {:?}", cfg.channels, shape),
        ));
    }
    let (b, c, h, wd) = (shape[0], shape[1], shape[2], shape[3]);
    let nhwc = g.permute(input, &[0, 2, 3, 1])?;
    let tokens = g.reshape(nhwc, &[b * h * wd, c])?;
    let lifted = match &w.lift {
        Some(lift) => {
            let l = g.bind(lift);
            g.matmul(tokens, l)?
        }
        None => tokens,
    };
    Ok(Tokens {
        tokens,
        lifted,
        b,
        h,
        w: wd,
    })
}

/// `Norm(x + MultiHead(x))` over spatial tokens; output shape equals input.
pub fn msa_forward(g: &mut Graph, cfg: &MsaConfig, w: &MsaWeights, input: FeatureMap) -> Result<FeatureMap> {
    let t = tokenize(g, cfg, w, input.var)?;
    let n_tok = t.h * t.w;
    let hd = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let project = |g: &mut Graph, m: &Tensor| -> Result<Var> {
            let wv = g.bind(m);
            let p = g.matmul(t.lifted, wv)?;
            g.reshape(p, &[t.b, n_tok, hd])
        };
        let q = project(g, &w.query[h])?;
        let k = project(g, &w.key[h])?;
        let v = project(g, &w.value[h])?;
        let att = g.attention(q, k, v)?;
        heads.push(g.reshape(att, &[t.b * n_tok, hd])?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    let wo = g.bind(&w.output);
    let projected = g.matmul(joined, wo)?;
    let residual = g.add(t.tokens, projected)?;
    let normed = g.layer_normalize(residual, 1)?;
    let gain = g.bind(&w.norm_gain);
    let bias = g.bind(&w.norm_bias);
    let scaled = g.mul(normed, gain)?;
    let shifted = g.add(scaled, bias)?;
    let nhwc = g.reshape(shifted, &[t.b, t.h, t.w, cfg.channels])?;
    let out = g.permute(nhwc, &[0, 3, 1, 2])?;
    Ok(FeatureMap::new(out, input.semantics))
}

/// Attention probabilities of every head, each `[b, h·w, h·w]`.
pub fn attention_weights(cfg: &MsaConfig, w: &MsaWeights, input: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let t = tokenize(&mut g, cfg, w, x)?;
    let n_tok = t.h * t.w;
    let geom = AttnGeom {
        batch: t.b,
        tokens: n_tok,
        dim: cfg.head_dim(),
    };
    let scale = 1.0 / (geom.dim as f64).sqrt();
    let mut out = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let wq = g.constant(w.query[h].clone());
        let wk = g.constant(w.key[h].clone());
        let q = g.matmul(t.lifted, wq)?;
        let k = g.matmul(t.lifted, wk)?;
        let probs = kernels::attention_probs(g.data(q), g.data(k), &geom, scale);
        out.push(Tensor::new(vec![t.b, n_tok, n_tok], probs)?);
    }
    Ok(out)
}
