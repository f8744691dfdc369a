//! Competitive coding of filter responses.
//!
//! * Inner-scale competition: a softmax over the orientation channels of each
//!   branch's attention output, per spatial position.
//! * Across-scale competition: the branch outputs are concatenated along
//!   channels and a single softmax runs over the joint orientation×scale axis
//!   (or, optionally, over scales separately for every orientation).
//! * CompCode: the classical hard code storing the winning (minimum response)
//!   orientation index per pixel, with an angular-distance matcher.

use std::path::Path;

use crate::attention::{msa_forward, MsaConfig, MsaWeights};
use crate::error::{Error, Result};
use crate::gabor::GaborBank;
use crate::tensor::kernels::{conv2d_direct, ConvGeom};
use crate::tensor::{Graph, Tensor, Var};

/// What the channel axis of a feature map indexes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelSemantics {
    Orientation,
    ScaleGroup,
    Generic,
}

/// An NCHW tensor on a graph together with its channel meaning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub semantics: ChannelSemantics,
}

impl FeatureMap {
    pub fn new(var: Var, semantics: ChannelSemantics) -> Self {
        FeatureMap { var, semantics }
    }

    pub fn generic(var: Var) -> Self {
        FeatureMap::new(var, ChannelSemantics::Generic)
    }
}

/// Channel softmax, scaling by `1/temperature` first unless it is exactly 1.
fn channel_softmax(g: &mut Graph, x: Var, axis: usize, temperature: f64) -> Result<Var> {
    let scaled = if temperature == 1.0 {
        x
    } else {
        g.scale(x, 1.0 / temperature)
    };
    g.softmax(scaled, axis)
}

/// Output of the inner-scale competition for one branch.
#[derive(Clone, Copy, Debug)]
pub struct IscmOutput {
    pub f_lgf: FeatureMap,
    pub f_msa: FeatureMap,
    pub f_inner: FeatureMap,
}

/// One scale branch: two stacked Gabor layers and an attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub first: GaborBank,
    pub second: GaborBank,
    pub msa_cfg: MsaConfig,
    pub msa: MsaWeights,
}

impl Branch {
    /// Stride of the second Gabor layer; the first keeps full resolution.
    pub const SECOND_STRIDE: usize = 2;

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (layer, bank) in [("lgf1", &self.first), ("lgf2", &self.second)] {
            for (j, p) in bank.params().iter().enumerate() {
                for (name, t) in crate::gabor::GaborParams::NAMES.iter().zip(p.tensors()) {
                    out.push((format!("{layer}.o{j}.{name}"), t));
                }
            }
        }
        for (name, t) in self.msa.named_params() {
            out.push((format!("msa.{name}"), t));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (layer, bank) in [("lgf1", &mut self.first), ("lgf2", &mut self.second)] {
            for (j, p) in bank.params_mut().iter_mut().enumerate() {
                for (name, t) in crate::gabor::GaborParams::NAMES.iter().zip(p.tensors_mut()) {
                    out.push((format!("{layer}.o{j}.{name}"), t));
                }
            }
        }
        for (name, t) in self.msa.named_params_mut() {
            out.push((format!("msa.{name}"), t));
        }
        out
    }
}

/// `(F_lgf, F_msa)` of one branch without any competition.
pub fn branch_features(g: &mut Graph, branch: &Branch, input: FeatureMap) -> Result<(FeatureMap, FeatureMap)> {
    let first = branch.first.forward(g, input, 1)?;
    let f_lgf = branch.second.forward(g, first, Branch::SECOND_STRIDE)?;
    let f_msa = msa_forward(g, &branch.msa_cfg, &branch.msa, f_lgf)?;
    Ok((f_lgf, f_msa))
}

/// `F_lgf = G₂(G₁(x))`, `F_msa = Norm(MultiHead(F_lgf))` and
/// `F_inner = softmax` of `F_msa` over orientations.
pub fn iscm_forward(g: &mut Graph, branch: &Branch, input: FeatureMap, temperature: f64) -> Result<IscmOutput> {
    let (f_lgf, f_msa) = branch_features(g, branch, input)?;
    let inner = channel_softmax(g, f_msa.var, 1, temperature)?;
    Ok(IscmOutput {
        f_lgf,
        f_msa,
        f_inner: FeatureMap::new(inner, ChannelSemantics::Orientation),
    })
}

/// Concatenates per-branch maps along channels and applies the scale
/// competition. `grouped` runs the softmax over branches separately for each
/// orientation instead of jointly over all channels.
pub fn ascm_forward(g: &mut Graph, maps: &[FeatureMap], grouped: bool, temperature: f64) -> Result<FeatureMap> {
    let concat = concat_branches(g, maps)?;
    let out = if grouped {
        let s = g.shape(concat).to_vec();
        let branches = maps.len();
        let per = s[1] / branches;
        let split = g.reshape(concat, &[s[0], branches, per, s[2], s[3]])?;
        let soft = channel_softmax(g, split, 1, temperature)?;
        g.reshape(soft, &s)?
    } else {
        channel_softmax(g, concat, 1, temperature)?
    };
    Ok(FeatureMap::new(out, ChannelSemantics::ScaleGroup))
}

/// Channel concatenation of branch maps that share batch and spatial dims.
pub fn concat_branches(g: &mut Graph, maps: &[FeatureMap]) -> Result<Var> {
    let first = maps
        .first()
        .ok_or_else(|| Error::shape("ascm", "no branch maps"))?;
    let s0 = g.shape(first.var).to_vec();
    for m in maps {
        let s = g.shape(m.var);
        if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] || s[1] != s0[1] {
            return Err(Error::shape(
                "ascm",
                format!("branch map {:?} does not align with {:?}", s, s0),
            ));
        }
    }
    let vars: Vec<Var> = maps.iter().map(|m| m.var).collect();
    if vars.len() == 1 {
        Ok(vars[0])
    } else {
        g.concat(&vars, 1)
    }
}

/// Per-pixel winning orientation index of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompCodeMap {
    pub n_orientations: usize,
    pub height: usize,
    pub width: usize,
    pub winner_index: Vec<u8>,
}

const CCMP_MAGIC: &[u8; 4] = b"CCMP";

impl CompCodeMap {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.winner_index.len());
        out.extend_from_slice(CCMP_MAGIC);
        out.extend_from_slice(&(self.n_orientations as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.winner_index);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("compcode", d.to_string());
        if bytes.len() < 14 || &bytes[..4] != CCMP_MAGIC {
            return Err(bad("missing CCMP header"));
        }
        let n_orientations = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
        let height = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let body = &bytes[14..];
        if body.len() != height * width {
            return Err(bad("index payload length does not match dimensions"));
        }
        if body.iter().any(|&i| i as usize >= n_orientations) {
            return Err(bad("winner index out of range"));
        }
        Ok(CompCodeMap {
            n_orientations,
            height,
            width,
            winner_index: body.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Relative tolerance under which two responses count as tied; scaled by
/// the kernel L1 norm times the image's peak magnitude.
const TIE_TOLERANCE: f64 = 1e-10;

/// CompCode of each `[1, h, w]` image in an NCHW batch using a frozen bank.
///
/// Kernels have their mean removed and images their mean subtracted, so flat
/// regions give exactly tied responses. The winner is the orientation with the
/// minimum response (palm lines are dark); ties go to the lowest index.
pub fn compcode_encode(bank: &GaborBank, images: &Tensor) -> Result<Vec<CompCodeMap>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("compcode", format!("expected [b, 1, h, w], got {:?}", s)));
    }
    let n_o = bank.n_orientations();
    if n_o > u8::MAX as usize {
        return Err(Error::InvalidConfig("compcode supports at most 255 orientations".into()));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let k = bank.kernel_size();
    let mut kernel = bank.kernel_values();
    let mut l1: f64 = 0.0;
    for kern in kernel.chunks_mut(k * k) {
        let mean = kern.iter().sum::<f64>() / (k * k) as f64;
        kern.iter_mut().for_each(|v| *v -= mean);
        l1 = l1.max(kern.iter().map(|v| v.abs()).sum());
    }
    let geom = ConvGeom {
        batch: 1,
        in_c: 1,
        h,
        w,
        out_c: n_o,
        k,
        stride: 1,
        pad: k / 2,
    };
    let mut maps = Vec::with_capacity(b);
    for img in images.data().chunks(h * w) {
        let mean = img.iter().sum::<f64>() / (h * w) as f64;
        let centered: Vec<f64> = img.iter().map(|v| v - mean).collect();
        let peak = img.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = TIE_TOLERANCE * l1 * peak;
        let resp = conv2d_direct(&centered, &kernel, &geom);
        let mut winner_index = vec![0u8; h * w];
        for (p, win) in winner_index.iter_mut().enumerate() {
            let mut best = resp[p];
            let mut arg = 0;
            for j in 1..n_o {
                let r = resp[j * h * w + p];
                if r < best - tol {
                    best = r;
                    arg = j;
                }
            }
            *win = arg as u8;
        }
        maps.push(CompCodeMap {
            n_orientations: n_o,
            height: h,
            width: w,
            winner_index,
        });
    }
    Ok(maps)
}

/// Mean over pixels of `1 − gap/(N_o/2)` with circular orientation gap.
pub fn compcode_match(a: &CompCodeMap, b: &CompCodeMap) -> Result<f64> {
    if a.n_orientations != b.n_orientations || a.height != b.height || a.width != b.width {
        return Err(Error::shape(
            "compcode_match",
            format!(
                "{}x{} (N_o={}) vs {}x{} (N_o={})",
                a.height, a.width, a.n_orientations, b.height, b.width, b.n_orientations
            ),
        ));
    }
    let n = a.n_orientations as i32;
    let half = a.n_orientations as f64 / 2.0;
    let total: f64 = a
        .winner_index
        .iter()
        .zip(&b.winner_index)
        .map(|(&i, &j)| {
            let d = (i as i32 - j as i32).abs();
            1.0 - d.min(n - d) as f64 / half
        })
        .sum();
    Ok(total / a.winner_index.len() as f64)
}
