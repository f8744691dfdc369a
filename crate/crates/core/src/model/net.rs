use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, Scale};
use crate::attention::{MsaConfig, MsaWeights};
use crate::competition::{ascm_forward, branch_features, concat_branches, iscm_forward, Branch, FeatureMap};
use crate::error::{Error, Result};
use crate::gabor::GaborBank;
use crate::tensor::{Graph, Tensor, Var};

/// Linear embedding and classifier on top of the pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// `[feature_dim, embedding_dim]`.
    pub embed_weight: Tensor,
    pub embed_bias: Tensor,
    /// `[embedding_dim, n_classes]`.
    pub class_weight: Tensor,
    pub class_bias: Tensor,
}

impl Head {
    fn init(features: usize, dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let b = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| rng.random_range(-b..=b)).with_grad()
        };
        Head {
            embed_weight: uniform(&[features, dim], features),
            embed_bias: Tensor::zeros(&[dim]).with_grad(),
            class_weight: uniform(&[dim, classes], dim),
            class_bias: Tensor::zeros(&[classes]).with_grad(),
        }
    }
}

/// Graph nodes produced by [`SacNet::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[b, feature_dim]` pooled competition features.
    pub features: Var,
    /// `[b, embedding_dim]` before normalization.
    pub raw_embedding: Var,
    /// `[b, embedding_dim]`, unit rows.
    pub embedding: Var,
    /// `[b, n_classes]`.
    pub logits: Var,
}

/// The multi-branch network. Only enabled branches are built.
#[derive(Clone, Debug, PartialEq)]
pub struct SacNet {
    config: ModelConfig,
    pub branches: Vec<(Scale, Branch)>,
    pub head: Head,
}

impl SacNet {
    /// Seeded initialization. Every scale draws its seeds whether or not it
    /// is enabled, so ablated models share the surviving branches' weights.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let classes = config
            .n_classes
            .ok_or_else(|| Error::InvalidConfig("n_classes must be resolved before building the model".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut branches = Vec::new();
        for scale in Scale::ALL {
            let seeds = [rng.next_u64(), rng.next_u64(), rng.next_u64()];
            if !config.branches[scale.index()] {
                continue;
            }
            let k = config.kernel_size(scale);
            let msa_cfg = MsaConfig::new(config.n_orientations, config.msa_heads, config.msa_embed)?;
            branches.push((
                scale,
                Branch {
                    first: GaborBank::init(k, config.n_orientations, seeds[0])?,
                    second: GaborBank::init(k, config.n_orientations, seeds[1])?,
                    msa_cfg,
                    msa: MsaWeights::init(&msa_cfg, seeds[2]),
                },
            ));
        }
        let head = Head::init(config.feature_dim(), config.embedding_dim, classes, rng.next_u64());
        Ok(SacNet {
            config: config.clone(),
            branches,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_classes(&self) -> usize {
        self.head.class_bias.numel()
    }

    /// Every learnable tensor with a stable name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (scale, b) in &self.branches {
            for (name, t) in b.named_params() {
                out.push((format!("{}.{}", scale.tag(), name), t));
            }
        }
        let h = &self.head;
        out.push(("head.embed_weight".into(), &h.embed_weight));
        out.push(("head.embed_bias".into(), &h.embed_bias));
        out.push(("head.class_weight".into(), &h.class_weight));
        out.push(("head.class_bias".into(), &h.class_bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (scale, b) in &mut self.branches {
            for (name, t) in b.named_params_mut() {
                out.push((format!("{}.{}", scale.tag(), name), t));
            }
        }
        let h = &mut self.head;
        out.push(("head.embed_weight".into(), &mut h.embed_weight));
        out.push(("head.embed_bias".into(), &mut h.embed_bias));
        out.push(("head.class_weight".into(), &mut h.class_weight));
        out.push(("head.class_bias".into(), &mut h.class_bias));
        out
    }

    /// Global average pool over space: `[b, c, h, w] → [b, c]`.
    fn pool(g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        g.reduce_mean(flat, 2)
    }

    pub fn forward(&self, g: &mut Graph, batch: Var) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let s = g.shape(batch);
        if s.len() != 4 || s[1] != 1 || s[2] != cfg.input_hw || s[3] != cfg.input_hw {
            return Err(Error::ConfigMismatch(format!(
                "batch shape {:?} does not match [b, 1, {}, {}]",
                s, cfg.input_hw, cfg.input_hw
            )));
        }
        let input = FeatureMap::generic(batch);
        let mut msa_maps = Vec::with_capacity(self.branches.len());
        let mut inner_maps = Vec::with_capacity(self.branches.len());
        for (_, branch) in &self.branches {
            if cfg.use_iscm {
                let out = iscm_forward(g, branch, input, cfg.softmax_temperature)?;
                msa_maps.push(out.f_msa);
                inner_maps.push(out.f_inner);
            } else {
                let (_, f_msa) = branch_features(g, branch, input)?;
                msa_maps.push(f_msa);
                inner_maps.push(f_msa);
            }
        }
        let across = if cfg.use_ascm {
            ascm_forward(g, &msa_maps, cfg.ascm_grouped, cfg.softmax_temperature)?.var
        } else {
            concat_branches(g, &msa_maps)?
        };
        let mut pooled = vec![Self::pool(g, across)?];
        for m in &inner_maps {
            pooled.push(Self::pool(g, m.var)?);
        }
        let features = g.concat(&pooled, 1)?;
        let h = &self.head;
        let (we, be) = (g.bind(&h.embed_weight), g.bind(&h.embed_bias));
        let (wc, bc) = (g.bind(&h.class_weight), g.bind(&h.class_bias));
        let projected = g.matmul(features, we)?;
        let raw_embedding = g.add(projected, be)?;
        let embedding = g.l2_normalize(raw_embedding, 1)?;
        let scores = g.matmul(raw_embedding, wc)?;
        let logits = g.add(scores, bc)?;
        Ok(ForwardOutput {
            features,
            raw_embedding,
            embedding,
            logits,
        })
    }

    /// Unit embeddings and logits of `images` (`[n, 1, h, w]`), evaluated in
    /// chunks of `chunk` samples.
    pub fn infer(&self, images: &Tensor, chunk: usize) -> Result<(Tensor, Tensor)> {
        let s = images.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::ConfigMismatch(format!("expected [n, 1, h, w] images, got {:?}", s)));
        }
        let per = s[1] * s[2] * s[3];
        let chunk = chunk.max(1);
        let (d, c) = (self.config.embedding_dim, self.n_classes());
        let mut emb = Vec::with_capacity(s[0] * d);
        let mut logits = Vec::with_capacity(s[0] * c);
        for start in (0..s[0]).step_by(chunk) {
            let n = chunk.min(s[0] - start);
            let slab = images.data()[start * per..(start + n) * per].to_vec();
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![n, s[1], s[2], s[3]], slab)?);
            let out = self.forward(&mut g, x)?;
            emb.extend_from_slice(g.data(out.embedding));
            logits.extend_from_slice(g.data(out.logits));
        }
        Ok((Tensor::new(vec![s[0], d], emb)?, Tensor::new(vec![s[0], c], logits)?))
    }
}

/// Index of the largest logit in every row of a `[b, c]` slice.
pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
