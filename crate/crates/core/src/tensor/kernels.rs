//! Raw numeric loops behind the graph ops that are too heavy to express as
//! compositions: 2-D convolution and fused scaled dot-product attention.

/// Geometry of a batched NCHW convolution with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn padded_h(&self) -> usize {
        self.h + 2 * self.pad
    }

    fn padded_w(&self) -> usize {
        self.w + 2 * self.pad
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.out_c * self.out_h() * self.out_w()
    }
}

/// Copies one sample's channels into a zero-padded buffer.
fn pad_sample(input: &[f64], g: &ConvGeom, b: usize, buf: &mut Vec<f64>) {
    let (ph, pw) = (g.padded_h(), g.padded_w());
    buf.clear();
    buf.resize(g.in_c * ph * pw, 0.0);
    for c in 0..g.in_c {
        let src = &input[(b * g.in_c + c) * g.h * g.w..][..g.h * g.w];
        let dst = &mut buf[c * ph * pw..][..ph * pw];
        for y in 0..g.h {
            dst[(y + g.pad) * pw + g.pad..][..g.w].copy_from_slice(&src[y * g.w..][..g.w]);
        }
    }
}

/// Direct convolution (cross-correlation, as in every deep-learning framework).
pub fn conv2d_direct(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let kk = g.k * g.k;
    let mut out = vec![0.0; g.out_len()];
    let mut padded = Vec::new();
    for b in 0..g.batch {
        pad_sample(input, g, b, &mut padded);
        for o in 0..g.out_c {
            let plane = &mut out[(b * g.out_c + o) * oh * ow..][..oh * ow];
            for c in 0..g.in_c {
                let src = &padded[c * ph * pw..][..ph * pw];
                let wk = &kernel[(o * g.in_c + c) * kk..][..kk];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wk[ky * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let row = &src[(oy * g.stride + ky) * pw..][..pw];
                            let dst = &mut plane[oy * ow..][..ow];
                            if g.stride == 1 {
                                for (d, s) in dst.iter_mut().zip(&row[kx..kx + ow]) {
                                    *d += wv * s;
                                }
                            } else {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d += wv * row[ox * g.stride + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Convolution by unrolling receptive fields into columns and running a GEMM.
pub fn conv2d_im2col(input: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let rows = g.in_c * g.k * g.k;
    let npix = oh * ow;
    let mut out = vec![0.0; g.out_len()];
    let mut padded = Vec::new();
    let mut cols = vec![0.0; rows * npix];
    for b in 0..g.batch {
        pad_sample(input, g, b, &mut padded);
        for c in 0..g.in_c {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let r = (c * g.k + ky) * g.k + kx;
                    let col = &mut cols[r * npix..][..npix];
                    for oy in 0..oh {
                        let src = &padded[c * ph * pw + (oy * g.stride + ky) * pw..];
                        for ox in 0..ow {
                            col[oy * ow + ox] = src[ox * g.stride + kx];
                        }
                    }
                }
            }
        }
        for o in 0..g.out_c {
            let dst = &mut out[(b * g.out_c + o) * npix..][..npix];
            for r in 0..rows {
                let wv = kernel[o * rows + r];
                for (d, s) in dst.iter_mut().zip(&cols[r * npix..][..npix]) {
                    *d += wv * s;
                }
            }
        }
    }
    out
}

/// Gradients of a direct convolution with respect to its input and kernel.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (ph, pw) = (g.padded_h(), g.padded_w());
    let kk = g.k * g.k;
    let mut d_input = if want_input {
        vec![0.0; input.len()]
    } else {
        Vec::new()
    };
    let mut d_kernel = if want_kernel {
        vec![0.0; kernel.len()]
    } else {
        Vec::new()
    };
    let mut padded = Vec::new();
    let mut d_padded = vec![0.0; g.in_c * ph * pw];
    for b in 0..g.batch {
        if want_kernel {
            pad_sample(input, g, b, &mut padded);
        }
        if want_input {
            d_padded.iter_mut().for_each(|v| *v = 0.0);
        }
        for o in 0..g.out_c {
            let gplane = &grad_out[(b * g.out_c + o) * oh * ow..][..oh * ow];
            for c in 0..g.in_c {
                let base = (o * g.in_c + c) * kk;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        if want_kernel {
                            let src = &padded[c * ph * pw..][..ph * pw];
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let row = &src[(oy * g.stride + ky) * pw..][..pw];
                                let grow = &gplane[oy * ow..][..ow];
                                if g.stride == 1 {
                                    for (a, s) in grow.iter().zip(&row[kx..kx + ow]) {
                                        acc += a * s;
                                    }
                                } else {
                                    for (ox, a) in grow.iter().enumerate() {
                                        acc += a * row[ox * g.stride + kx];
                                    }
                                }
                            }
                            d_kernel[base + ky * g.k + kx] += acc;
                        }
                        if want_input {
                            let wv = kernel[base + ky * g.k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let dst = &mut d_padded[c * ph * pw..][..ph * pw];
                            for oy in 0..oh {
                                let row = &mut dst[(oy * g.stride + ky) * pw..][..pw];
                                let grow = &gplane[oy * ow..][..ow];
                                if g.stride == 1 {
                                    for (d, a) in row[kx..kx + ow].iter_mut().zip(grow) {
                                        *d += wv * a;
                                    }
                                } else {
                                    for (ox, a) in grow.iter().enumerate() {
                                        row[ox * g.stride + kx] += wv * a;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_input {
            for c in 0..g.in_c {
                let src = &d_padded[c * ph * pw..][..ph * pw];
                let dst = &mut d_input[(b * g.in_c + c) * g.h * g.w..][..g.h * g.w];
                for y in 0..g.h {
                    dst[y * g.w..][..g.w].copy_from_slice(&src[(y + g.pad) * pw + g.pad..][..g.w]);
                }
            }
        }
    }
    (d_input, d_kernel)
}

/// Geometry of batched single-head attention over `tokens` positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
}

fn transpose_block(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}
/// `exp(x)` for `x ≤ 0` by range reduction and a degree-13 polynomial;
/// relative error below 6e-16, 0 below −708, NaN preserved. Branch-free so
/// the softmax loops vectorize.
#[inline(always)]
pub fn exp_nonpos(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1.5·2⁵²: adding it rounds to an integer held in the low mantissa bits.
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let under = x < -708.0;
    let x = if under { -708.0 } else { x };
    let t = x * std::f64::consts::LOG2_E + SHIFT;
    let n = t - SHIFT;
    let r = x - n * LN2_HI - n * LN2_LO;
    // Estrin evaluation of Σ r^k / k! for k = 0..=13.
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let q0 = (1.0 + r) + r2 * (0.5 + r * (1.0 / 6.0));
    let q1 = (1.0 / 24.0 + r * (1.0 / 120.0)) + r2 * (1.0 / 720.0 + r * (1.0 / 5_040.0));
    let q2 = (1.0 / 40_320.0 + r * (1.0 / 362_880.0)) + r2 * (1.0 / 3_628_800.0 + r * (1.0 / 39_916_800.0));
    let q3 = 1.0 / 479_001_600.0 + r * (1.0 / 6_227_020_800.0);
    let p = (q0 + r4 * q1) + r8 * (q2 + r4 * q3);
    let pow2 = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    let keep = (!under as u64).wrapping_neg();
    f64::from_bits((p * pow2).to_bits() & keep)
}

/// Dot product with four interleaved partial sums.
#[inline(always)]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline(always)]
fn max4(a: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; 4];
    let c = a.chunks_exact(4);
    let r = c.remainder();
    for x in c {
        for l in 0..4 {
            acc[l] = if x[l] > acc[l] { x[l] } else { acc[l] };
        }
    }
    let mut m = acc[0].max(acc[1]).max(acc[2].max(acc[3]));
    for &x in r {
        m = m.max(x);
    }
    m
}

/// Replaces `s` by `exp(s − shift)` and returns the sum.
#[inline(always)]
fn exp_shifted_sum(s: &mut [f64], shift: f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let mut c = s.chunks_exact_mut(8);
    for x in &mut c {
        for l in 0..8 {
            x[l] = exp_nonpos(x[l] - shift);
            acc[l] += x[l];
        }
    }
    let mut sum = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for x in c.into_remainder() {
        *x = exp_nonpos(*x - shift);
        sum += *x;
    }
    sum
}

/// softmax(q kᵀ · scale) v, row by row. Returns the output and the per-row
/// log-sum-exp so the backward pass can rebuild the probabilities without
/// storing the full `tokens × tokens` matrix.
pub fn attention_forward(q: &[f64], k: &[f64], v: &[f64], g: &AttnGeom, scale: f64) -> (Vec<f64>, Vec<f64>) {
    let (t, d) = (g.tokens, g.dim);
    let mut out = vec![0.0; g.batch * t * d];
    let mut lse = vec![0.0; g.batch * t];
    let mut scores = vec![0.0; t];
    for b in 0..g.batch {
        let qb = &q[b * t * d..][..t * d];
        let kt = transpose_block(&k[b * t * d..][..t * d], t, d);
        let vt = transpose_block(&v[b * t * d..][..t * d], t, d);
        for i in 0..t {
            row_scores(&qb[i * d..][..d], &kt, t, scale, &mut scores);
            let max = max4(&scores);
            let sum = exp_shifted_sum(&mut scores, max);
            lse[b * t + i] = max + sum.ln();
            let inv = 1.0 / sum;
            let orow = &mut out[(b * t + i) * d..][..d];
            for (c, o) in orow.iter_mut().enumerate() {
                *o = dot4(&scores, &vt[c * t..][..t]) * inv;
            }
        }
    }
    (out, lse)
}

fn row_scores(qi: &[f64], kt: &[f64], t: usize, scale: f64, scores: &mut [f64]) {
    scores.iter_mut().for_each(|s| *s = 0.0);
    for (c, &qc) in qi.iter().enumerate() {
        let w = qc * scale;
        for (s, kv) in scores.iter_mut().zip(&kt[c * t..][..t]) {
            *s += w * kv;
        }
    }
}

/// Explicit attention probabilities, `[batch, tokens, tokens]`.
pub fn attention_probs(q: &[f64], k: &[f64], g: &AttnGeom, scale: f64) -> Vec<f64> {
    let (t, d) = (g.tokens, g.dim);
    let mut probs = vec![0.0; g.batch * t * t];
    for b in 0..g.batch {
        let qb = &q[b * t * d..][..t * d];
        let kt = transpose_block(&k[b * t * d..][..t * d], t, d);
        for i in 0..t {
            let row = &mut probs[(b * t + i) * t..][..t];
            row_scores(&qb[i * d..][..d], &kt, t, scale, row);
            let max = max4(row);
            let sum = exp_shifted_sum(row, max);
            row.iter_mut().for_each(|s| *s /= sum);
        }
    }
    probs
}

/// Backward of [`attention_forward`]; returns (dq, dk, dv).
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &[f64],
    lse: &[f64],
    grad_out: &[f64],
    g: &AttnGeom,
    scale: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (t, d) = (g.tokens, g.dim);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut p = vec![0.0; t];
    let mut dp = vec![0.0; t];
    for b in 0..g.batch {
        let qb = &q[b * t * d..][..t * d];
        let kt = transpose_block(&k[b * t * d..][..t * d], t, d);
        let vt = transpose_block(&v[b * t * d..][..t * d], t, d);
        let mut dkt = vec![0.0; t * d];
        let mut dvt = vec![0.0; t * d];
        for i in 0..t {
            let qi = &qb[i * d..][..d];
            let go = &grad_out[(b * t + i) * d..][..d];
            let oi = &out[(b * t + i) * d..][..d];
            row_scores(qi, &kt, t, scale, &mut p);
            exp_shifted_sum(&mut p, lse[b * t + i]);

            dp.iter_mut().for_each(|x| *x = 0.0);
            for c in 0..d {
                let goc = go[c];
                for (x, vv) in dp.iter_mut().zip(&vt[c * t..][..t]) {
                    *x += goc * vv;
                }
                for (x, pj) in dvt[c * t..][..t].iter_mut().zip(&p) {
                    *x += goc * pj;
                }
            }
            let dot: f64 = go.iter().zip(oi).map(|(a, b)| a * b).sum();
            // dp becomes d(score) after this.
            for (x, pj) in dp.iter_mut().zip(&p) {
                *x = pj * (*x - dot) * scale;
            }
            let dqi = &mut dq[(b * t + i) * d..][..d];
            for c in 0..d {
                let krow = &kt[c * t..][..t];
                dqi[c] += dot4(&dp, krow);
                let qc = qi[c];
                for (x, ds) in dkt[c * t..][..t].iter_mut().zip(&dp) {
                    *x += qc * ds;
                }
            }
        }
        let dkb = transpose_block(&dkt, d, t);
        let dvb = transpose_block(&dvt, d, t);
        dk[b * t * d..][..t * d].copy_from_slice(&dkb);
        dv[b * t * d..][..t * d].copy_from_slice(&dvb);
    }
    (dq, dk, dv)
}
