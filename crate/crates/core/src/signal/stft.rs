//! Multiscale STFT magnitudes and their exact vector-Jacobian product.
//!
//! Each scale uses a periodic Hann window with hop `window * hop_fraction`.
//! The signal is zero-padded at the tail so that every sample falls in at
//! least one frame; no centring pad is applied. Channels are transformed
//! independently.
//!
//! The VJP is computed by linearizing `|X|` around the current spectrum:
//! for a real cotangent `y` on the magnitudes the pullback onto a frame is
//! `w[n] * Re(sum_k y_k * X_k/|X_k| * e^{+2 pi i k n / N})`, which is one
//! inverse FFT per frame. Bins with `|X_k| = 0` contribute nothing.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

type PlanCache = (FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>);

thread_local! {
    static PLANNER: RefCell<PlanCache> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

/// Cached forward (`inverse == false`) or inverse FFT plan of length `n`.
pub(crate) fn fft_plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let (planner, cache) = &mut *p;
        cache
            .entry((n, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Number of frames produced for a signal of `len` samples.
pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len <= window {
        1
    } else {
        (len - window).div_ceil(hop) + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrogramConfig {
    pub window_sizes: Vec<usize>,
    #[serde(default = "default_hop_fraction")]
    pub hop_fraction: f64,
}

fn default_hop_fraction() -> f64 {
    0.25
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            window_sizes: vec![1024, 2048, 4096],
            hop_fraction: default_hop_fraction(),
        }
    }
}

impl SpectrogramConfig {
    pub fn new(window_sizes: Vec<usize>) -> Result<Self> {
        let cfg = Self {
            window_sizes,
            hop_fraction: default_hop_fraction(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn single(window: usize) -> Result<Self> {
        Self::new(vec![window])
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_sizes.is_empty() {
            return Err(Error::invalid("spectrogram config needs at least one window size"));
        }
        for &n in &self.window_sizes {
            if n < 2 || n % 2 != 0 {
                return Err(Error::invalid(format!(
                    "window size {n} must be an even integer >= 2"
                )));
            }
            if self.hop(n) < 1 {
                return Err(Error::invalid(format!("hop for window {n} is below one sample")));
            }
        }
        if !(self.hop_fraction > 0.0 && self.hop_fraction.is_finite()) {
            return Err(Error::invalid("hop fraction must be positive"));
        }
        Ok(())
    }

    pub fn hop(&self, window: usize) -> usize {
        (window as f64 * self.hop_fraction).round() as usize
    }

    pub fn scales(&self) -> usize {
        self.window_sizes.len()
    }
}

/// `|STFT|` of both channels at one window size. Layout is
/// `[channel][frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeGrid {
    pub window: usize,
    pub hop: usize,
    pub bins: usize,
    pub frames: usize,
    data: Vec<f64>,
}

impl MagnitudeGrid {
    pub fn zeros_like(other: &MagnitudeGrid) -> Self {
        Self {
            data: vec![0.0; other.data.len()],
            ..other.clone()
        }
    }

    pub fn from_data(window: usize, hop: usize, frames: usize, data: Vec<f64>) -> Result<Self> {
        let bins = window / 2 + 1;
        if data.len() != 2 * frames * bins {
            return Err(Error::invalid("magnitude grid data has the wrong length"));
        }
        Ok(Self {
            window,
            hop,
            bins,
            frames,
            data,
        })
    }

    pub fn get(&self, channel: usize, frame: usize, bin: usize) -> f64 {
        self.data[(channel * self.frames + frame) * self.bins + bin]
    }

    pub fn frame(&self, channel: usize, frame: usize) -> &[f64] {
        let start = (channel * self.frames + frame) * self.bins;
        &self.data[start..start + self.bins]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &MagnitudeGrid) -> bool {
        self.window == other.window
            && self.hop == other.hop
            && self.frames == other.frames
            && self.bins == other.bins
    }
}

/// One magnitude grid per configured window size.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramStack {
    pub grids: Vec<MagnitudeGrid>,
    pub config: SpectrogramConfig,
}

impl SpectrogramStack {
    pub fn zeros_like(other: &SpectrogramStack) -> Self {
        Self {
            grids: other.grids.iter().map(MagnitudeGrid::zeros_like).collect(),
            config: other.config.clone(),
        }
    }

    pub fn same_shape(&self, other: &SpectrogramStack) -> bool {
        self.grids.len() == other.grids.len()
            && self
                .grids
                .iter()
                .zip(&other.grids)
                .all(|(a, b)| a.same_shape(b))
    }

    fn zip_map(&self, other: &SpectrogramStack, f: impl Fn(f64, f64) -> f64) -> SpectrogramStack {
        SpectrogramStack {
            grids: self
                .grids
                .iter()
                .zip(&other.grids)
                .map(|(a, b)| MagnitudeGrid {
                    data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
                    ..a.clone()
                })
                .collect(),
            config: self.config.clone(),
        }
    }

    pub fn sub(&self, other: &SpectrogramStack) -> SpectrogramStack {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &SpectrogramStack) -> SpectrogramStack {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scaled(&self, k: f64) -> SpectrogramStack {
        self.zip_map(self, |a, _| a * k)
    }

    pub fn dot(&self, other: &SpectrogramStack) -> f64 {
        self.grids
            .iter()
            .zip(&other.grids)
            .map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.dot(self)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.grids.iter().flat_map(|g| g.data.iter().copied())
    }
}

/// Complex spectra of one channel at one scale, kept so the VJP can reuse
/// the forward pass.
struct ComplexFrames {
    bins: usize,
    frames: usize,
    values: Vec<Complex64>,
}

fn stft_channel(signal: &[f64], window: &[f64], hop: usize) -> ComplexFrames {
    let n = window.len();
    let frames = frame_count(signal.len(), n, hop);
    let bins = n / 2 + 1;
    let fft = fft_plan(n, false);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut values = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = signal.get(start + i).copied().unwrap_or(0.0);
            *slot = Complex64::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        values.extend_from_slice(&buf[..bins]);
    }
    ComplexFrames {
        bins,
        frames,
        values,
    }
}

fn pullback_channel(
    spectrum: &ComplexFrames,
    cotangent: &[f64],
    window: &[f64],
    hop: usize,
    out: &mut [f64],
) {
    let n = window.len();
    let ifft = fft_plan(n, true);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for f in 0..spectrum.frames {
        buf.fill(Complex64::new(0.0, 0.0));
        let mut any = false;
        for k in 0..spectrum.bins {
            let y = cotangent[f * spectrum.bins + k];
            if y == 0.0 {
                continue;
            }
            let x = spectrum.values[f * spectrum.bins + k];
            let mag = x.norm();
            if mag > 0.0 {
                buf[k] = x * (y / mag);
                any = true;
            }
        }
        if !any {
            continue;
        }
        ifft.process(&mut buf);
        let start = f * hop;
        for i in 0..n {
            if let Some(slot) = out.get_mut(start + i) {
                *slot += window[i] * buf[i].re;
            }
        }
    }
}

fn check_window(w: &Waveform, window: usize, hop: usize) -> Result<()> {
    if w.is_empty() {
        return Err(Error::invalid("empty waveform"));
    }
    if window < 2 || !window.is_multiple_of(2) {
        return Err(Error::invalid(format!("window {window} must be even and >= 2")));
    }
    if hop == 0 {
        return Err(Error::invalid("hop must be at least one sample"));
    }
    Ok(())
}

/// `|STFT|` of both channels at a single window size.
pub fn stft_magnitude(w: &Waveform, window_size: usize, hop: usize) -> Result<MagnitudeGrid> {
    check_window(w, window_size, hop)?;
    let win = hann_window(window_size);
    let mut data = Vec::new();
    let mut frames = 0;
    for c in 0..2 {
        let spec = stft_channel(w.channel(c), &win, hop);
        frames = spec.frames;
        data.extend(spec.values.iter().map(|z| z.norm()));
    }
    MagnitudeGrid::from_data(window_size, hop, frames, data)
}

pub fn multiscale_spectrogram(w: &Waveform, cfg: &SpectrogramConfig) -> Result<SpectrogramStack> {
    cfg.validate()?;
    let grids = cfg
        .window_sizes
        .iter()
        .map(|&n| stft_magnitude(w, n, cfg.hop(n)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectrogramStack {
        grids,
        config: cfg.clone(),
    })
}

/// Forward pass that retains phases for a subsequent pullback.
pub struct SpectralLinearization {
    scales: Vec<(Vec<f64>, usize, [ComplexFrames; 2])>,
    len: usize,
    sample_rate: u32,
    stack: SpectrogramStack,
}

impl SpectralLinearization {
    pub fn new(w: &Waveform, cfg: &SpectrogramConfig) -> Result<Self> {
        cfg.validate()?;
        let mut scales = Vec::with_capacity(cfg.scales());
        let mut grids = Vec::with_capacity(cfg.scales());
        for &n in &cfg.window_sizes {
            let hop = cfg.hop(n);
            check_window(w, n, hop)?;
            let win = hann_window(n);
            let left = stft_channel(w.channel(0), &win, hop);
            let right = stft_channel(w.channel(1), &win, hop);
            let frames = left.frames;
            let data = left
                .values
                .iter()
                .chain(&right.values)
                .map(|z| z.norm())
                .collect();
            grids.push(MagnitudeGrid::from_data(n, hop, frames, data)?);
            scales.push((win, hop, [left, right]));
        }
        Ok(Self {
            scales,
            len: w.len(),
            sample_rate: w.sample_rate(),
            stack: SpectrogramStack {
                grids,
                config: cfg.clone(),
            },
        })
    }

    pub fn stack(&self) -> &SpectrogramStack {
        &self.stack
    }

    pub fn into_stack(self) -> SpectrogramStack {
        self.stack
    }

    pub fn vjp(&self, cotangent: &SpectrogramStack) -> Result<Waveform> {
        if !self.stack.same_shape(cotangent) {
            return Err(Error::invalid(
                "cotangent shape does not match the multiscale spectrogram",
            ));
        }
        let mut grad = vec![0.0; 2 * self.len];
        for ((win, hop, spectra), cot) in self.scales.iter().zip(&cotangent.grids) {
            let per_channel = cot.frames * cot.bins;
            for (c, spec) in spectra.iter().enumerate() {
                let out = &mut grad[c * self.len..(c + 1) * self.len];
                let y = &cot.data[c * per_channel..(c + 1) * per_channel];
                pullback_channel(spec, y, win, *hop, out);
            }
        }
        Waveform::from_channel_major(grad, self.sample_rate)
    }
}

/// Exact VJP of `w -> multiscale_spectrogram(w, cfg)` at `w`.
pub fn multiscale_vjp(
    w: &Waveform,
    cotangent: &SpectrogramStack,
    cfg: &SpectrogramConfig,
) -> Result<Waveform> {
    SpectralLinearization::new(w, cfg)?.vjp(cotangent)
}

/// `sum_m ||S_m(target) - S_m(estimate)||^2` and its gradient with respect
/// to `estimate`.
pub fn spectral_recon_loss(
    target: &Waveform,
    estimate: &Waveform,
    cfg: &SpectrogramConfig,
) -> Result<(f64, Waveform)> {
    target.check_same_shape(estimate, "spectral reconstruction loss")?;
    let reference = multiscale_spectrogram(target, cfg)?;
    spectral_recon_loss_to(&reference, estimate, cfg)
}

/// As [`spectral_recon_loss`] with a precomputed target stack.
pub fn spectral_recon_loss_to(
    reference: &SpectrogramStack,
    estimate: &Waveform,
    cfg: &SpectrogramConfig,
) -> Result<(f64, Waveform)> {
    let lin = SpectralLinearization::new(estimate, cfg)?;
    if !lin.stack().same_shape(reference) {
        return Err(Error::invalid("reference spectrogram shape mismatch"));
    }
    let residual = lin.stack().sub(reference);
    let loss = residual.squared_norm();
    let grad = lin.vjp(&residual.scaled(2.0))?;
    Ok((loss, grad))
}
