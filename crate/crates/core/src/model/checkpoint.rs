//! Binary checkpoint, all integers little-endian:
//!
//! ```text
//! "SACN" | u32 version | u32 len, config text
//! u32 n_params | n_params × (u32 len, name | u8 dtype | u32 ndim, ndim × u64 dims | f64 values)
//! u8 has_optimizer | [u64 t | per param: m values, v values]
//! u64 epoch | u64 step | rng: [u8; 32] seed, u64 stream, u128 word position
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::config::RunConfig;
use super::net::SacNet;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SACN";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Serializable snapshot of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<Adam>,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, model: &SacNet, optimizer: Option<&Adam>, epoch: u64, step: u64, rng: &ChaCha8Rng) -> Self {
        let params = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor").with_grad()))
            .collect();
        Checkpoint {
            config: config.clone(),
            params,
            optimizer: optimizer.cloned(),
            epoch,
            step,
            rng: RngState::capture(rng),
        }
    }

    /// Rebuilds the model from the stored config and copies every parameter
    /// in by name.
    pub fn model(&self) -> Result<SacNet> {
        let mut model = SacNet::new(&self.config.model)?;
        let mut slots = model.named_params_mut();
        if slots.len() != self.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} stored parameters, model has {}", self.params.len(), slots.len()),
            ));
        }
        for ((name, dst), (stored, src)) in slots.iter_mut().zip(&self.params) {
            if name != stored || dst.shape() != src.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("parameter {} {:?} does not match stored {} {:?}", name, dst.shape(), stored, src.shape()),
                ));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            push_f64s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.t.to_le_bytes());
                for (m, v) in adam.m.iter().zip(&adam.v) {
                    push_f64s(&mut out, m);
                    push_f64s(&mut out, v);
                }
            }
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", "config is not UTF-8"))?;
        let config = RunConfig::parse(text)?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "parameter name is not UTF-8"))?;
            if r.u8()? != DTYPE_F64 {
                return Err(Error::format("checkpoint", format!("parameter {name}: unknown dtype")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::format("checkpoint", "shape overflows"))?;
            let data = r.f64s(numel)?;
            params.push((name, Tensor::new(shape, data)?.with_grad()));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let mut adam = Adam::new(config.model.lr, &[]);
                adam.t = t;
                for (_, p) in &params {
                    adam.m.push(r.f64s(p.numel())?);
                    adam.v.push(r.f64s(p.numel())?);
                }
                Some(adam)
            }
            f => return Err(Error::format("checkpoint", format!("bad optimizer flag {f}"))),
        };
        let epoch = r.u64()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            epoch,
            step,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn push_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "length overflows"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
