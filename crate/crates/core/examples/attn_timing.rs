//! Times the fused attention kernels at a given token count and head width.
//!
//! `cargo run --release --example attn_timing -- 1024 4 16`

use std::time::Instant;

use sacnet::tensor::kernels::{attention_backward, attention_forward, AttnGeom};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|s| s.parse().expect("integer")).collect();
    let (tokens, dim, batch) = (args.first().copied().unwrap_or(1024), args.get(1).copied().unwrap_or(4), args.get(2).copied().unwrap_or(16));
    let g = AttnGeom { batch, tokens, dim };
    let n = batch * tokens * dim;
    let q: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
    let k: Vec<f64> = (0..n).map(|i| ((i * 104729) % 997) as f64 / 498.0 - 1.0).collect();
    let v: Vec<f64> = (0..n).map(|i| ((i * 31) % 101) as f64 / 50.0 - 1.0).collect();
    let t = Instant::now();
    let (out, lse) = attention_forward(&q, &k, &v, &g, 0.5);
    let fwd = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let (dq, _, _) = attention_backward(&q, &k, &v, &out, &lse, &v, &g, 0.5);
    let bwd = t.elapsed().as_secs_f64();
    println!("forward {fwd:.3}s backward {bwd:.3}s checksum {:.6}", dq.iter().sum::<f64>() + out.iter().sum::<f64>());
}
