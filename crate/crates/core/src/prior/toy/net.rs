//! Small conditional 1-D convolutional noise predictor with hand-written
//! backpropagation.
//!
//! ```text
//! h0   = W_in z + b_in                                   (1x1)
//! p_l  = (conv3_dil(h_l) + b_l) * (1 + G_l e) + B_l e    (FiLM from embedding e)
//! h_l+1 = h_l + silu(p_l)
//! out  = W_out h_L + b_out + (S e) * z                   (per-channel skip of z)
//! ```
//!
//! The embedding `e` holds a bias term, `t`, sinusoidal features of `t` and a
//! one-hot class vector whose last slot means "unconditional".

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FOURIER_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub channels: usize,
    pub hidden: usize,
    pub dilations: Vec<usize>,
    pub classes: usize,
}

impl DenoiserArch {
    pub fn embedding_dim(&self) -> usize {
        2 + 2 * FOURIER_FEATURES + self.classes + 1
    }

    fn layout(&self) -> Layout {
        let (c, h, e) = (self.channels, self.hidden, self.embedding_dim());
        let mut off = 0;
        let mut take = |n: usize| {
            let start = off;
            off += n;
            start
        };
        let w_in = take(h * c);
        let b_in = take(h);
        let blocks = self
            .dilations
            .iter()
            .map(|&dilation| BlockLayout {
                dilation,
                w: take(h * h * 3),
                b: take(h),
                film_g: take(h * e),
                film_b: take(h * e),
            })
            .collect();
        let w_out = take(c * h);
        let b_out = take(c);
        let skip = take(c * e);
        Layout {
            w_in,
            b_in,
            blocks,
            w_out,
            b_out,
            skip,
            total: off,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout().total
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 || self.dilations.contains(&0) {
            return Err(Error::Configuration(format!("invalid denoiser architecture {self:?}")));
        }
        Ok(())
    }

    /// Embedding for time `t` and class slot (`None` = unconditional).
    pub fn embed(&self, t: f64, class: Option<usize>) -> Vec<f64> {
        let mut e = Vec::with_capacity(self.embedding_dim());
        e.push(1.0);
        e.push(t);
        for j in 0..FOURIER_FEATURES {
            let w = PI * (1u32 << j) as f64 * t;
            e.push(w.sin());
            e.push(w.cos());
        }
        let slot = class.unwrap_or(self.classes);
        e.extend((0..=self.classes).map(|k| if k == slot { 1.0 } else { 0.0 }));
        e
    }
}

#[derive(Debug, Clone)]
struct BlockLayout {
    dilation: usize,
    w: usize,
    b: usize,
    film_g: usize,
    film_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    w_in: usize,
    b_in: usize,
    blocks: Vec<BlockLayout>,
    w_out: usize,
    b_out: usize,
    skip: usize,
    total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub arch: DenoiserArch,
    pub params: Vec<f64>,
}

/// Activations kept for the backward pass.
pub struct Tape {
    frames: usize,
    z: Vec<f64>,
    emb: Vec<f64>,
    /// Block inputs plus the final hidden state.
    hidden: Vec<Vec<f64>>,
    pre_film: Vec<Vec<f64>>,
    post_film: Vec<Vec<f64>>,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn matvec(m: &[f64], rows: usize, v: &[f64]) -> Vec<f64> {
    let cols = v.len();
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

impl Denoiser {
    pub fn init(arch: DenoiserArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h) = (arch.channels, arch.hidden);
        let mut fill = |start: usize, n: usize, std: f64, rng: &mut ChaCha8Rng| {
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[start..start + n] {
                *p = normal.sample(rng);
            }
        };
        fill(layout.w_in, h * c, (1.0 / c as f64).sqrt(), &mut rng);
        for b in &layout.blocks {
            fill(b.w, h * h * 3, 0.5 * (1.0 / (3 * h) as f64).sqrt(), &mut rng);
        }
        fill(layout.w_out, c * h, 0.1 * (1.0 / h as f64).sqrt(), &mut rng);
        Ok(Self { arch, params })
    }

    pub fn from_parts(arch: DenoiserArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::Configuration(format!(
                "denoiser expects {} parameters, got {}",
                arch.num_params(),
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

    /// Noise prediction for a `channels x frames` latent (channel-major).
    pub fn forward(&self, z: &[f64], frames: usize, emb: &[f64]) -> (Vec<f64>, Tape) {
        let a = &self.arch;
        let l = a.layout();
        let (c, h, e) = (a.channels, a.hidden, a.embedding_dim());
        assert_eq!(z.len(), c * frames, "latent size");
        assert_eq!(emb.len(), e, "embedding size");
        let p = &self.params;

        let mut x = vec![0.0; h * frames];
        for o in 0..h {
            let row = &mut x[o * frames..(o + 1) * frames];
            row.fill(p[l.b_in + o]);
            for ci in 0..c {
                let w = p[l.w_in + o * c + ci];
                for (r, zv) in row.iter_mut().zip(&z[ci * frames..(ci + 1) * frames]) {
                    *r += w * zv;
                }
            }
        }

        let mut hidden = vec![x];
        let mut pre_film = Vec::with_capacity(l.blocks.len());
        let mut post_film = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let hin = hidden.last().expect("hidden state");
            let mut pre = vec![0.0; h * frames];
            let d = b.dilation;
            for o in 0..h {
                let row = &mut pre[o * frames..(o + 1) * frames];
                row.fill(p[b.b + o]);
                for i in 0..h {
                    let src = &hin[i * frames..(i + 1) * frames];
                    for k in 0..3 {
                        let w = p[b.w + (o * h + i) * 3 + k];
                        shifted_axpy(w, src, row, k as isize - 1, d);
                    }
                }
            }
            let g = matvec(&p[b.film_g..b.film_g + h * e], h, emb);
            let beta = matvec(&p[b.film_b..b.film_b + h * e], h, emb);
            let mut post = pre.clone();
            let mut next = hin.clone();
            for o in 0..h {
                for f in 0..frames {
                    let idx = o * frames + f;
                    post[idx] = pre[idx] * (1.0 + g[o]) + beta[o];
                    next[idx] += silu(post[idx]);
                }
            }
            pre_film.push(pre);
            post_film.push(post);
            hidden.push(next);
        }

        let hl = hidden.last().expect("hidden state");
        let skip = matvec(&p[l.skip..l.skip + c * e], c, emb);
        let mut out = vec![0.0; c * frames];
        for co in 0..c {
            let row = &mut out[co * frames..(co + 1) * frames];
            row.fill(p[l.b_out + co]);
            for o in 0..h {
                let w = p[l.w_out + co * h + o];
                for (r, hv) in row.iter_mut().zip(&hl[o * frames..(o + 1) * frames]) {
                    *r += w * hv;
                }
            }
            for (r, zv) in row.iter_mut().zip(&z[co * frames..(co + 1) * frames]) {
                *r += skip[co] * zv;
            }
        }
        let tape = Tape {
            frames,
            z: z.to_vec(),
            emb: emb.to_vec(),
            hidden,
            pre_film,
            post_film,
        };
        (out, tape)
    }

    pub fn predict(&self, z: &[f64], frames: usize, emb: &[f64]) -> Vec<f64> {
        self.forward(z, frames, emb).0
    }

    /// Accumulates `dout^T d out / d params` into `grad`.
    pub fn backward(&self, tape: &Tape, dout: &[f64], grad: &mut [f64]) {
        let a = &self.arch;
        let l = a.layout();
        let (c, h, e) = (a.channels, a.hidden, a.embedding_dim());
        let frames = tape.frames;
        let p = &self.params;
        assert_eq!(grad.len(), l.total, "gradient size");

        let hl = tape.hidden.last().expect("hidden state");
        let mut dh = vec![0.0; h * frames];
        for co in 0..c {
            let drow = &dout[co * frames..(co + 1) * frames];
            grad[l.b_out + co] += drow.iter().sum::<f64>();
            let dk: f64 = drow
                .iter()
                .zip(&tape.z[co * frames..(co + 1) * frames])
                .map(|(a, b)| a * b)
                .sum();
            for (ei, ev) in tape.emb.iter().enumerate() {
                grad[l.skip + co * e + ei] += dk * ev;
            }
            for o in 0..h {
                let hrow = &hl[o * frames..(o + 1) * frames];
                grad[l.w_out + co * h + o] += drow.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>();
                let w = p[l.w_out + co * h + o];
                for (d, dv) in dh[o * frames..(o + 1) * frames].iter_mut().zip(drow) {
                    *d += w * dv;
                }
            }
        }

        for (bi, b) in l.blocks.iter().enumerate().rev() {
            let hin = &tape.hidden[bi];
            let pre = &tape.pre_film[bi];
            let post = &tape.post_film[bi];
            let g = matvec(&p[b.film_g..b.film_g + h * e], h, &tape.emb);
            // residual path passes dh through unchanged
            let mut dpre = vec![0.0; h * frames];
            for o in 0..h {
                let (mut dg, mut dbeta) = (0.0, 0.0);
                for f in 0..frames {
                    let idx = o * frames + f;
                    let dp = dh[idx] * silu_grad(post[idx]);
                    dbeta += dp;
                    dg += dp * pre[idx];
                    dpre[idx] = dp * (1.0 + g[o]);
                }
                for (ei, ev) in tape.emb.iter().enumerate() {
                    grad[b.film_g + o * e + ei] += dg * ev;
                    grad[b.film_b + o * e + ei] += dbeta * ev;
                }
                grad[b.b + o] += dpre[o * frames..(o + 1) * frames].iter().sum::<f64>();
            }
            let d = b.dilation;
            let mut dhin = dh;
            for o in 0..h {
                let drow = &dpre[o * frames..(o + 1) * frames];
                for i in 0..h {
                    let src = &hin[i * frames..(i + 1) * frames];
                    for k in 0..3 {
                        let shift = k as isize - 1;
                        grad[b.w + (o * h + i) * 3 + k] += shifted_dot(src, drow, shift, d);
                        let w = p[b.w + (o * h + i) * 3 + k];
                        shifted_axpy_adjoint(w, drow, &mut dhin[i * frames..(i + 1) * frames], shift, d);
                    }
                }
            }
            dh = dhin;
        }

        for o in 0..h {
            let drow = &dh[o * frames..(o + 1) * frames];
            grad[l.b_in + o] += drow.iter().sum::<f64>();
            for ci in 0..c {
                grad[l.w_in + o * c + ci] += drow
                    .iter()
                    .zip(&tape.z[ci * frames..(ci + 1) * frames])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
    }
}

/// `dst[f] += w * src[f + shift * d]` with zero padding.
fn shifted_axpy(w: f64, src: &[f64], dst: &mut [f64], shift: isize, d: usize) {
    let n = src.len() as isize;
    let off = shift * d as isize;
    let lo = (-off).max(0).min(n) as usize;
    let hi = (n - off).clamp(0, n) as usize;
    if lo >= hi {
        return;
    }
    let s0 = (lo as isize + off) as usize;
    for (dv, sv) in dst[lo..hi].iter_mut().zip(&src[s0..s0 + (hi - lo)]) {
        *dv += w * sv;
    }
}

/// Adjoint of [`shifted_axpy`] with respect to `src`.
fn shifted_axpy_adjoint(w: f64, ddst: &[f64], dsrc: &mut [f64], shift: isize, d: usize) {
    let n = ddst.len() as isize;
    let off = shift * d as isize;
    let lo = (-off).max(0).min(n) as usize;
    let hi = (n - off).clamp(0, n) as usize;
    if lo >= hi {
        return;
    }
    let s0 = (lo as isize + off) as usize;
    for (sv, dv) in dsrc[s0..s0 + (hi - lo)].iter_mut().zip(&ddst[lo..hi]) {
        *sv += w * dv;
    }
}

/// `sum_f ddst[f] * src[f + shift * d]`.
fn shifted_dot(src: &[f64], ddst: &[f64], shift: isize, d: usize) -> f64 {
    let n = src.len() as isize;
    let off = shift * d as isize;
    let lo = (-off).max(0).min(n) as usize;
    let hi = (n - off).clamp(0, n) as usize;
    if lo >= hi {
        return 0.0;
    }
    let s0 = (lo as isize + off) as usize;
    ddst[lo..hi].iter().zip(&src[s0..s0 + (hi - lo)]).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn arch() -> DenoiserArch {
        DenoiserArch {
            channels: 3,
            hidden: 5,
            dilations: vec![1, 2],
            classes: 2,
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = Denoiser::init(arch(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // non-zero FiLM and skip weights so every path is exercised
        for p in net.params.iter_mut() {
            *p += 0.2 * rng.random_range(-1.0..1.0);
        }
        let frames = 7;
        let z: Vec<f64> = (0..3 * frames).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..3 * frames).map(|_| rng.random_range(-1.0..1.0)).collect();
        let emb = net.arch.embed(0.37, Some(1));
        let (_, tape) = net.forward(&z, frames, &emb);
        let mut grad = vec![0.0; net.params.len()];
        net.backward(&tape, &y, &mut grad);
        let objective = |n: &Denoiser| -> f64 {
            n.predict(&z, frames, &emb).iter().zip(&y).map(|(a, b)| a * b).sum()
        };
        let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        for i in 0..net.params.len() {
            let h = 1e-6;
            let orig = net.params[i];
            net.params[i] = orig + h;
            let up = objective(&net);
            net.params[i] = orig - h;
            let down = objective(&net);
            net.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6 * scale);
            assert!(err < 1e-5, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn shifted_helpers_are_adjoint() {
        let src = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [0.5, -1.0, 2.0, 0.0, 1.5];
        for shift in [-1isize, 0, 1] {
            for d in [1usize, 2, 4, 8] {
                let mut dst = [0.0; 5];
                shifted_axpy(1.0, &src, &mut dst, shift, d);
                let lhs: f64 = dst.iter().zip(&y).map(|(a, b)| a * b).sum();
                let mut adj = [0.0; 5];
                shifted_axpy_adjoint(1.0, &y, &mut adj, shift, d);
                let rhs: f64 = adj.iter().zip(&src).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-12);
                assert!((shifted_dot(&src, &y, shift, d) - lhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embedding_layout() {
        let a = arch();
        let e = a.embed(0.0, None);
        assert_eq!(e.len(), a.embedding_dim());
        assert_eq!(&e[e.len() - 3..], &[0.0, 0.0, 1.0]);
        let e = a.embed(1.0, Some(0));
        assert_eq!(&e[e.len() - 3..], &[1.0, 0.0, 0.0]);
    }
}
