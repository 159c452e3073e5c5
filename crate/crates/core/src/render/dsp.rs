use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::signal::fft_plan;

fn spectrum(x: &[f64], n: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(n, Complex64::new(0.0, 0.0));
    fft_plan(n, false).process(&mut buf);
    buf
}

fn real_inverse(mut buf: Vec<Complex64>, keep: usize) -> Vec<f64> {
    let n = buf.len();
    fft_plan(n, true).process(&mut buf);
    buf.iter().take(keep).map(|z| z.re / n as f64).collect()
}

/// Linear convolution via zero-padded FFT, truncated to `a.len()` samples.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    fft_convolve_len(a, b, a.len())
}

/// Linear convolution truncated (or zero-extended) to `out_len` samples.
pub fn fft_convolve_len(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return vec![0.0; out_len];
    }
    let n = (a.len() + b.len() - 1).next_power_of_two();
    let fa = spectrum(a, n);
    let fb = spectrum(b, n);
    let prod = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    let mut out = real_inverse(prod, out_len.min(n));
    out.resize(out_len, 0.0);
    out
}

/// Adjoint of `b -> fft_convolve_len(a, b, y.len())` applied to `y`:
/// `out[j] = sum_n y[n] a[n - j]` for `j < b_len`.
pub fn convolve_adjoint(a: &[f64], y: &[f64], b_len: usize) -> Vec<f64> {
    if a.is_empty() || y.is_empty() {
        return vec![0.0; b_len];
    }
    let n = (a.len() + y.len().max(b_len)).next_power_of_two();
    let fa = spectrum(a, n);
    let fy = spectrum(y, n);
    let prod = fy.iter().zip(&fa).map(|(y, a)| y * a.conj()).collect();
    let mut out = real_inverse(prod, b_len.min(n));
    out.resize(b_len, 0.0);
    out
}

/// Gaussian frequency-domain bandpass of a fixed noise realization.
///
/// The gain at angular frequency `f` (rad/s) is
/// `exp(-(|f| - centre)^2 / (2 (rel_bandwidth * centre)^2))`, mirrored onto
/// negative frequencies so the output stays real.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    spectrum: Vec<Complex64>,
    sample_rate: f64,
}

impl NoiseBank {
    pub fn new(noise: &[f64], sample_rate: u32) -> Self {
        Self {
            spectrum: spectrum(noise, noise.len()),
            sample_rate: sample_rate as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.spectrum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectrum.is_empty()
    }

    pub fn nyquist(&self) -> f64 {
        PI * self.sample_rate
    }

    fn bin_frequency(&self, k: usize) -> f64 {
        let n = self.len();
        let signed = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        (2.0 * PI * signed * self.sample_rate / n as f64).abs()
    }

    fn check_centre(&self, centre: f64) -> Result<()> {
        if !(centre > 0.0 && centre < self.nyquist()) {
            return Err(Error::invalid(format!(
                "bandpass centre {centre} rad/s outside (0, {}) rad/s",
                self.nyquist()
            )));
        }
        Ok(())
    }

    /// Filter gain per FFT bin.
    pub fn gains(&self, centre: f64, rel_bandwidth: f64) -> Vec<f64> {
        let sd = rel_bandwidth * centre;
        (0..self.len())
            .map(|k| {
                let u = (self.bin_frequency(k) - centre) / sd;
                (-0.5 * u * u).exp()
            })
            .collect()
    }

    pub fn filter(&self, centre: f64, rel_bandwidth: f64) -> Result<Vec<f64>> {
        self.check_centre(centre)?;
        let gains = self.gains(centre, rel_bandwidth);
        let buf = self.spectrum.iter().zip(&gains).map(|(x, g)| x * g).collect();
        Ok(real_inverse(buf, self.len()))
    }

    /// `<v, d filter(centre) / d centre>` for a fixed vector `v`.
    pub fn centre_sensitivity(&self, v: &[f64], centre: f64, rel_bandwidth: f64) -> f64 {
        // <v, IFFT(W G')> = Re sum_k conj(V_k) W_k G'_k / n
        let n = self.len();
        let fv = spectrum(v, n);
        let sd = rel_bandwidth * centre;
        let mut acc = 0.0;
        for k in 0..n {
            let f = self.bin_frequency(k);
            let u = (f - centre) / sd;
            let g = (-0.5 * u * u).exp();
            // dG/dc = u G f / (r c^2)
            let dg = u * g * f / (rel_bandwidth * centre * centre);
            acc += (fv[k].conj() * self.spectrum[k]).re * dg;
        }
        acc / n as f64
    }
}

/// One-shot bandpass of `noise`; see [`NoiseBank`].
pub fn bandpass(noise: &[f64], sample_rate: u32, centre: f64, rel_bandwidth: f64) -> Result<Vec<f64>> {
    if noise.is_empty() {
        return Err(Error::invalid("empty noise signal"));
    }
    if !(rel_bandwidth > 0.0) {
        return Err(Error::invalid("relative bandwidth must be positive"));
    }
    NoiseBank::new(noise, sample_rate).filter(centre, rel_bandwidth)
}
