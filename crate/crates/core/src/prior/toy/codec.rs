//! Linear block codec: a strided 1-D convolution (kernel = stride) fitted
//! in closed form by principal components over corpus blocks.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::Latent;
use crate::signal::Waveform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCodec {
    pub stride: usize,
    pub channels: usize,
    /// `channels x (2 * stride)` row-major; rows are orthonormal.
    pub basis: Vec<f64>,
    /// Latent values are projections divided by this.
    pub scale: f64,
}

impl LinearCodec {
    fn block_dim(&self) -> usize {
        2 * self.stride
    }

    /// Fits the top `channels` principal directions of stereo blocks of
    /// length `stride` and a global scale giving unit mean latent variance.
    pub fn fit(items: &[Waveform], stride: usize, channels: usize) -> Result<Self> {
        let d = 2 * stride;
        if stride == 0 || channels == 0 || channels > d {
            return Err(Error::Configuration(format!(
                "codec with stride {stride} cannot have {channels} channels"
            )));
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut blocks = 0usize;
        let mut v = vec![0.0; d];
        for x in items {
            if x.len() % stride != 0 {
                return Err(Error::invalid("corpus clip is not a multiple of the codec stride"));
            }
            for f in 0..x.len() / stride {
                block(x, stride, f, &mut v);
                for i in 0..d {
                    for j in 0..=i {
                        cov[(i, j)] += v[i] * v[j];
                    }
                }
                blocks += 1;
            }
        }
        if blocks == 0 {
            return Err(Error::invalid("codec fit needs at least one block"));
        }
        for i in 0..d {
            for j in 0..i {
                cov[(j, i)] = cov[(i, j)];
            }
        }
        cov /= blocks as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut basis = Vec::with_capacity(channels * d);
        let mut kept_variance = 0.0;
        for &k in order.iter().take(channels) {
            let col = eig.eigenvectors.column(k);
            // deterministic sign: largest-magnitude entry positive
            let pivot = (0..d)
                .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a)))
                .unwrap_or(0);
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            basis.extend(col.iter().map(|v| sign * v));
            kept_variance += eig.eigenvalues[k].max(0.0);
        }
        let scale = (kept_variance / channels as f64).sqrt();
        if !(scale > 0.0) {
            return Err(Error::invalid("codec corpus has no energy"));
        }
        Ok(Self {
            stride,
            channels,
            basis,
            scale,
        })
    }

    fn frames(&self, samples: usize) -> Result<usize> {
        if samples == 0 || !samples.is_multiple_of(self.stride) {
            return Err(Error::invalid(format!(
                "clip of {samples} samples is not a multiple of the codec stride {}",
                self.stride
            )));
        }
        Ok(samples / self.stride)
    }

    fn analyse(&self, x: &Waveform, gain: f64) -> Result<Latent> {
        let frames = self.frames(x.len())?;
        let d = self.block_dim();
        let mut out = vec![0.0; self.channels * frames];
        let mut v = vec![0.0; d];
        for f in 0..frames {
            block(x, self.stride, f, &mut v);
            for c in 0..self.channels {
                let row = &self.basis[c * d..(c + 1) * d];
                out[c * frames + f] = gain * row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Latent::new(self.channels, frames, out)
    }

    fn synthesise(&self, h: &Latent, gain: f64, sample_rate: u32) -> Result<Waveform> {
        if h.channels != self.channels {
            return Err(Error::invalid(format!(
                "codec expects {} latent channels, got {}",
                self.channels, h.channels
            )));
        }
        let d = self.block_dim();
        let s = self.stride;
        let len = h.frames * s;
        let mut out = vec![0.0; 2 * len];
        for f in 0..h.frames {
            for c in 0..self.channels {
                let coef = gain * h.values[c * h.frames + f];
                if coef == 0.0 {
                    continue;
                }
                let row = &self.basis[c * d..(c + 1) * d];
                for ch in 0..2 {
                    for j in 0..s {
                        out[ch * len + f * s + j] += coef * row[ch * s + j];
                    }
                }
            }
        }
        Waveform::from_channel_major(out, sample_rate)
    }

    pub fn encode(&self, x: &Waveform) -> Result<Latent> {
        self.analyse(x, 1.0 / self.scale)
    }

    pub fn decode(&self, h: &Latent, sample_rate: u32) -> Result<Waveform> {
        self.synthesise(h, self.scale, sample_rate)
    }

    pub fn decode_vjp(&self, h: &Latent, cotangent: &Waveform) -> Result<Latent> {
        if cotangent.len() != h.frames * self.stride {
            return Err(Error::invalid("decode_vjp cotangent length mismatch"));
        }
        self.analyse(cotangent, self.scale)
    }

    pub fn encode_vjp(&self, x: &Waveform, cotangent: &Latent) -> Result<Waveform> {
        if cotangent.frames != self.frames(x.len())? {
            return Err(Error::invalid("encode_vjp cotangent frame mismatch"));
        }
        self.synthesise(cotangent, 1.0 / self.scale, x.sample_rate())
    }

    /// Reconstruction SNR in dB.
    pub fn reconstruction_snr(&self, x: &Waveform) -> Result<f64> {
        let y = self.decode(&self.encode(x)?, x.sample_rate())?;
        let err = x.sub(&y).energy();
        Ok(10.0 * (x.energy() / err.max(f64::MIN_POSITIVE)).log10())
    }
}

fn block(x: &Waveform, stride: usize, frame: usize, out: &mut [f64]) {
    for ch in 0..2 {
        out[ch * stride..(ch + 1) * stride]
            .copy_from_slice(&x.channel(ch)[frame * stride..(frame + 1) * stride]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clips() -> Vec<Waveform> {
        (0..4)
            .map(|k| {
                let mono: Vec<f64> = (0..256)
                    .map(|i| ((i as f64) * (0.1 + 0.05 * k as f64)).sin() * 0.3)
                    .collect();
                Waveform::from_mono(&mono, 8000).unwrap()
            })
            .collect()
    }

    #[test]
    fn full_rank_codec_is_lossless() {
        let items = clips();
        let codec = LinearCodec::fit(&items, 8, 16).unwrap();
        for x in &items {
            assert!(codec.reconstruction_snr(x).unwrap() > 200.0);
        }
    }

    #[test]
    fn vjps_are_transposes() {
        let items = clips();
        let codec = LinearCodec::fit(&items, 8, 5).unwrap();
        let x = &items[1];
        let h = codec.encode(x).unwrap();
        let y = Waveform::from_channel_major(
            (0..512).map(|i| ((i * 7 % 13) as f64 - 6.0) / 6.0).collect(),
            8000,
        )
        .unwrap();
        // <decode(h), y> = <h, decode_vjp(y)>
        let lhs = codec.decode(&h, 8000).unwrap().dot(&y);
        let rhs = h.dot(&codec.decode_vjp(&h, &y).unwrap());
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        // <encode(y), h> = <y, encode_vjp(h)>
        let lhs = codec.encode(&y).unwrap().dot(&h);
        let rhs = y.dot(&codec.encode_vjp(&y, &h).unwrap());
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn fit_is_deterministic_and_checks_stride() {
        let items = clips();
        assert_eq!(
            LinearCodec::fit(&items, 8, 4).unwrap(),
            LinearCodec::fit(&items, 8, 4).unwrap()
        );
        let codec = LinearCodec::fit(&items, 8, 4).unwrap();
        let odd = Waveform::zeros(100, 8000).unwrap();
        assert!(codec.encode(&odd).is_err());
    }
}
