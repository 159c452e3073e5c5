//! Waveforms, multiscale STFT magnitudes with exact adjoints, spectral
//! reconstruction loss, and WAV/CSV/PNG I/O.

mod export;
mod stft;
mod wav;
mod waveform;

pub use export::{write_grid_csv, write_grid_png, DbRange};
pub(crate) use export::csv_err;
pub(crate) use stft::fft_plan;
pub use stft::{
    frame_count, hann_window, multiscale_spectrogram, multiscale_vjp, spectral_recon_loss,
    spectral_recon_loss_to, stft_magnitude, MagnitudeGrid, SpectralLinearization,
    SpectrogramConfig, SpectrogramStack,
};
pub use wav::{decode_wav, encode_wav, wav_read, wav_write, WavEncoding};
pub use waveform::{Waveform, DEFAULT_SAMPLE_RATE};
