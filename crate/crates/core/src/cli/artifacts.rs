use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::render::RendererParams;
use crate::separation::Trajectory;
use crate::signal::{multiscale_spectrogram, wav_write, write_grid_png, DbRange, SpectrogramConfig, WavEncoding, Waveform};

/// The output directory of one run.
#[derive(Debug, Clone)]
pub struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("checkpoints"))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn text(&self, name: &str, text: &str) -> Result<()> {
        fs::write(self.path(name), text)?;
        Ok(())
    }

    pub fn json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
        s.push('\n');
        self.text(name, &s)
    }

    pub fn wav(&self, name: &str, w: &Waveform) -> Result<()> {
        wav_write(w, self.path(name), WavEncoding::Float32)
    }

    /// `<stem>_w<window>.png` per spectrogram scale, all on `range`.
    pub fn spectrograms(&self, stem: &str, w: &Waveform, cfg: &SpectrogramConfig, range: DbRange) -> Result<()> {
        for g in &multiscale_spectrogram(w, cfg)?.grids {
            write_grid_png(g, range, self.path(&format!("{stem}_w{}.png", g.window)))?;
        }
        Ok(())
    }

    /// `log.jsonl`, one line per optimizer step.
    pub fn log(&self, name: &str, t: &Trajectory) -> Result<()> {
        self.text(name, &t.log_lines())
    }

    pub fn checkpoint(&self, prefix: &str, step: usize, params: &RendererParams) -> Result<()> {
        self.text(&format!("checkpoints/{prefix}step_{step:06}.toml"), &params.to_toml()?)
    }
}

/// One colour scale covering every waveform of a run.
pub fn shared_range(waves: &[&Waveform], cfg: &SpectrogramConfig) -> Result<DbRange> {
    let mut ceiling = f64::NEG_INFINITY;
    for w in waves {
        ceiling = ceiling.max(DbRange::from_stack(&multiscale_spectrogram(w, cfg)?).ceiling_db);
    }
    Ok(DbRange {
        floor_db: ceiling - 80.0,
        ceiling_db: ceiling,
    })
}
