use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{MagnitudeGrid, SpectrogramStack};
use crate::error::{Error, Result};

/// Writes `freq_bin,frame,channel,magnitude` rows for one grid.
pub fn write_grid_csv<W: Write>(grid: &MagnitudeGrid, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["freq_bin", "frame", "channel", "magnitude"])
        .map_err(csv_err)?;
    for c in 0..2 {
        for f in 0..grid.frames {
            for (k, m) in grid.frame(c, f).iter().enumerate() {
                w.write_record([k.to_string(), f.to_string(), c.to_string(), m.to_string()])
                    .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("csv: {other:?}")),
    }
}

/// Fixed dB range for image rendering, so plots from one run share a colour
/// scale.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DbRange {
    pub floor_db: f64,
    pub ceiling_db: f64,
}

impl DbRange {
    /// `[peak - 80 dB, peak]` over every grid of the stack.
    pub fn from_stack(stack: &SpectrogramStack) -> Self {
        let peak = stack.values().fold(1e-12f64, f64::max);
        let ceiling_db = 20.0 * peak.log10();
        Self {
            floor_db: ceiling_db - 80.0,
            ceiling_db,
        }
    }
}

fn colormap(v: f64) -> [u8; 3] {
    // black -> purple -> orange -> yellow
    let stops: [(f64, [f64; 3]); 4] = [
        (0.0, [0.0, 0.0, 4.0]),
        (0.35, [120.0, 28.0, 109.0]),
        (0.7, [237.0, 105.0, 37.0]),
        (1.0, [252.0, 255.0, 164.0]),
    ];
    let v = v.clamp(0.0, 1.0);
    for pair in stops.windows(2) {
        let (a, ca) = pair[0];
        let (b, cb) = pair[1];
        if v <= b {
            let t = (v - a) / (b - a);
            return [0, 1, 2].map(|i| (ca[i] + t * (cb[i] - ca[i])).round() as u8);
        }
    }
    [252, 255, 164]
}

/// Renders channel 0 of `grid` in dB, low frequencies at the bottom.
pub fn write_grid_png(grid: &MagnitudeGrid, range: DbRange, path: impl AsRef<Path>) -> Result<()> {
    let (width, height) = (grid.frames, grid.bins);
    let mut pixels = Vec::with_capacity(width * height * 3);
    let span = (range.ceiling_db - range.floor_db).max(1e-9);
    for row in 0..height {
        let bin = height - 1 - row;
        for f in 0..width {
            let db = 20.0 * grid.get(0, f, bin).max(1e-12).log10();
            pixels.extend_from_slice(&colormap((db - range.floor_db) / span));
        }
    }
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::InvalidInput(format!("png: {e}")))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| Error::InvalidInput(format!("png: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{stft_magnitude, Waveform};

    #[test]
    fn csv_has_one_row_per_cell() {
        let w = Waveform::from_mono(&[0.0, 1.0, 0.0, -1.0, 0.5, 0.25], 8000).unwrap();
        let g = stft_magnitude(&w, 4, 2).unwrap();
        let mut buf = Vec::new();
        write_grid_csv(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("freq_bin,frame,channel,magnitude\n"));
        assert_eq!(text.lines().count(), 1 + 2 * g.frames * g.bins);
    }

    #[test]
    fn png_is_written() {
        let w = Waveform::from_mono(&(0..256).map(|i| (i as f64 * 0.3).sin()).collect::<Vec<_>>(), 8000)
            .unwrap();
        let g = stft_magnitude(&w, 32, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.png");
        let range = DbRange { floor_db: -80.0, ceiling_db: 30.0 };
        write_grid_png(&g, range, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
