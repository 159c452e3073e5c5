//! Separation quality metrics and report assembly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{audio_body, TextClient};
use crate::signal::Waveform;

/// Values are capped here instead of reporting infinities.
pub const SDR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdrKind {
    #[default]
    ScaleInvariant,
    Plain,
}

fn capped_db(signal: f64, noise: f64) -> f64 {
    if noise <= signal * 1e-10 || noise == 0.0 {
        return SDR_CAP_DB;
    }
    (10.0 * (signal / noise).log10()).min(SDR_CAP_DB)
}

fn channel_sdr(r: &[f64], e: &[f64], kind: SdrKind) -> Result<f64> {
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::UndefinedMetric("reference channel is silent".into()));
    }
    Ok(match kind {
        SdrKind::ScaleInvariant => {
            let k = r.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() / rr;
            let target: f64 = k * k * rr;
            let noise: f64 = r.iter().zip(e).map(|(a, b)| (b - k * a).powi(2)).sum();
            if target == 0.0 {
                return Ok(-SDR_CAP_DB);
            }
            capped_db(target, noise)
        }
        SdrKind::Plain => {
            let noise: f64 = r.iter().zip(e).map(|(a, b)| (b - a).powi(2)).sum();
            capped_db(rr, noise)
        }
    })
}

/// SDR in dB, computed per channel and averaged; capped at +100 dB.
pub fn sdr(reference: &Waveform, estimate: &Waveform, kind: SdrKind) -> Result<f64> {
    reference.check_same_shape(estimate, "sdr")?;
    let mut total = 0.0;
    for c in 0..2 {
        total += channel_sdr(reference.channel(c), estimate.channel(c), kind)?;
    }
    Ok(total / 2.0)
}

pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    sdr(reference, estimate, SdrKind::ScaleInvariant)
}

/// Evaluation span of a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportWindow {
    Full,
    FirstHalf,
}

impl ReportWindow {
    pub fn name(self) -> &'static str {
        match self {
            ReportWindow::Full => "full",
            ReportWindow::FirstHalf => "first_half",
        }
    }

    pub fn range(self, len: usize) -> (usize, usize) {
        match self {
            ReportWindow::Full => (0, len),
            ReportWindow::FirstHalf => (0, len / 2),
        }
    }
}

/// A CLAP-style score: either a value or explicitly unavailable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClapField {
    Score(f64),
    Unavailable,
}

#[derive(Serialize)]
struct ClapRequest<'a> {
    prompt: &'a str,
    audio_wav_base64: String,
}

/// Audio-text alignment from an external scorer. No client means the
/// feature is off and the field is marked unavailable.
pub fn clap_score(audio: &Waveform, prompt: &str, client: Option<&dyn TextClient>) -> Result<ClapField> {
    let Some(client) = client else {
        return Ok(ClapField::Unavailable);
    };
    let body = serde_json::to_string(&ClapRequest {
        prompt,
        audio_wav_base64: audio_body(audio),
    })
    .expect("request serializes");
    let raw = client.post(&body)?;
    let text = raw.trim();
    let score = match text.parse::<f64>() {
        Ok(v) => v,
        Err(_) => serde_json::from_str::<serde_json::Value>(text)
            .ok()
            .and_then(|v| v.get("score").and_then(serde_json::Value::as_f64))
            .ok_or_else(|| Error::Parse {
                message: "scorer response is not a number".into(),
                raw: raw.clone(),
            })?,
    };
    if !(-1.0..=1.0).contains(&score) {
        return Err(Error::Protocol(format!("score {score} outside [-1, 1]")));
    }
    Ok(ClapField::Score(score))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub window: ReportWindow,
    /// Absent when no ground truth was supplied.
    pub source_sdr_db: Option<Vec<f64>>,
    pub mixture_sdr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub mixture_id: String,
    pub run_id: String,
    pub kind: SdrKind,
    pub windows: Vec<WindowReport>,
    pub clap: Vec<ClapField>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mixture_id: String,
    /// `"mixture"` for the reconstructed-mixture row.
    pub source_index: String,
    pub window: String,
    pub sdr_db: Option<f64>,
    pub clap: Option<f64>,
    pub run_id: String,
}

/// SDR triplets (each source, reconstructed mixture) per window. Every
/// window slices the same sample range out of every signal.
pub fn build_separation_report(
    mixture: &Waveform,
    estimates: &[Waveform],
    references: Option<&[Waveform]>,
    windows: &[ReportWindow],
    kind: SdrKind,
    ids: (&str, &str),
) -> Result<SeparationReport> {
    if estimates.is_empty() {
        return Err(Error::invalid("report needs at least one estimate"));
    }
    for e in estimates {
        mixture.check_same_shape(e, "report estimate")?;
    }
    if let Some(refs) = references {
        if refs.len() != estimates.len() {
            return Err(Error::invalid("reference and estimate counts differ"));
        }
        for r in refs {
            mixture.check_same_shape(r, "report reference")?;
        }
    }
    let mut recon = estimates[0].clone();
    for e in &estimates[1..] {
        recon.add_assign(e);
    }
    let mut out = Vec::new();
    for &w in windows {
        let (a, b) = w.range(mixture.len());
        if b <= a {
            return Err(Error::invalid(format!("window {} is empty for this clip", w.name())));
        }
        let cut = |x: &Waveform| x.window(a, b);
        let source_sdr_db = match references {
            Some(refs) => Some(
                refs.iter()
                    .zip(estimates)
                    .map(|(r, e)| sdr(&cut(r)?, &cut(e)?, kind))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        out.push(WindowReport {
            window: w,
            source_sdr_db,
            mixture_sdr_db: sdr(&cut(mixture)?, &cut(&recon)?, kind)?,
        });
    }
    Ok(SeparationReport {
        mixture_id: ids.0.into(),
        run_id: ids.1.into(),
        kind,
        windows: out,
        clap: vec![ClapField::Unavailable; estimates.len()],
    })
}

impl SeparationReport {
    /// Mean per-source SDR in a window, if ground truth was available.
    pub fn mean_source_sdr(&self, window: ReportWindow) -> Option<f64> {
        let w = self.windows.iter().find(|w| w.window == window)?;
        let v = w.source_sdr_db.as_ref()?;
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mixture_sdr(&self, window: ReportWindow) -> Option<f64> {
        self.windows.iter().find(|w| w.window == window).map(|w| w.mixture_sdr_db)
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        for w in &self.windows {
            let n = self.clap.len();
            for i in 0..n {
                rows.push(ReportRow {
                    mixture_id: self.mixture_id.clone(),
                    source_index: i.to_string(),
                    window: w.window.name().into(),
                    sdr_db: w.source_sdr_db.as_ref().map(|v| v[i]),
                    clap: match self.clap[i] {
                        ClapField::Score(s) => Some(s),
                        ClapField::Unavailable => None,
                    },
                    run_id: self.run_id.clone(),
                });
            }
            rows.push(ReportRow {
                mixture_id: self.mixture_id.clone(),
                source_index: "mixture".into(),
                window: w.window.name().into(),
                sdr_db: Some(w.mixture_sdr_db),
                clap: None,
                run_id: self.run_id.clone(),
            });
        }
        rows
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        write_rows(&self.rows(), out)
    }
}

pub fn write_rows(rows: &[ReportRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(crate::signal::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn tone(len: usize, f: f64) -> Waveform {
        let m: Vec<f64> = (0..len).map(|i| (TAU * f * i as f64 / len as f64).sin()).collect();
        Waveform::from_mono(&m, 1000).unwrap()
    }

    #[test]
    fn identical_and_scaled_estimates_hit_the_cap() {
        let r = tone(256, 5.0);
        assert_eq!(si_sdr(&r, &r).unwrap(), SDR_CAP_DB);
        assert_eq!(si_sdr(&r, &r.scaled(2.0)).unwrap(), SDR_CAP_DB);
        assert_eq!(sdr(&r, &r, SdrKind::Plain).unwrap(), SDR_CAP_DB);
        assert!(sdr(&r, &r.scaled(2.0), SdrKind::Plain).unwrap().abs() < 1e-9);
    }

    #[test]
    fn known_power_ratio() {
        // an orthogonal tone at a tenth of the power gives 10 dB
        let r = tone(1000, 5.0);
        let noise = tone(1000, 17.0).scaled(0.1f64.sqrt());
        let v = si_sdr(&r, &r.add(&noise)).unwrap();
        assert!((v - 10.0).abs() < 0.1, "{v}");
        let worse = si_sdr(&r, &r.add(&noise.scaled(1.5))).unwrap();
        assert!(worse < v);
    }

    #[test]
    fn clap_client_modes() {
        use crate::prompt::MockClient;
        let a = tone(64, 3.0);
        assert_eq!(clap_score(&a, "p", Some(&MockClient::fixed("0.30"))).unwrap(), ClapField::Score(0.30));
        assert_eq!(clap_score(&a, "p", Some(&MockClient::fixed("{\"score\": -0.5}"))).unwrap(), ClapField::Score(-0.5));
        assert_eq!(clap_score(&a, "p", None).unwrap(), ClapField::Unavailable);
        assert!(matches!(clap_score(&a, "p", Some(&MockClient::fixed("1.7"))), Err(Error::Protocol(_))));
        assert!(matches!(clap_score(&a, "p", Some(&MockClient::fixed("n/a"))), Err(Error::Parse { .. })));
    }

    #[test]
    fn silent_reference_is_undefined() {
        let z = Waveform::zeros(16, 1000).unwrap();
        assert!(matches!(si_sdr(&z, &tone(16, 1.0)), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn first_half_beats_corrupted_full_clip() {
        let a = tone(512, 4.0);
        let b = tone(512, 19.0);
        let m = a.add(&b);
        let mut ea = a.clone();
        for c in 0..2 {
            for v in &mut ea.channel_mut(c)[256..] {
                *v += 0.8;
            }
        }
        let eb = m.sub(&ea);
        let rep = build_separation_report(
            &m,
            &[ea, eb],
            Some(&[a, b]),
            &[ReportWindow::Full, ReportWindow::FirstHalf],
            SdrKind::ScaleInvariant,
            ("mix", "run"),
        )
        .unwrap();
        assert!(rep.mean_source_sdr(ReportWindow::FirstHalf).unwrap() > rep.mean_source_sdr(ReportWindow::Full).unwrap());
        assert_eq!(rep.mixture_sdr(ReportWindow::Full).unwrap(), SDR_CAP_DB);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("mixture_id,source_index,window,sdr_db,clap,run_id\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 3);
    }
}
