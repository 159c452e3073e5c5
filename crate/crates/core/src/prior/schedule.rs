use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Signal/noise scales `alpha(t)`, `sigma(t)` for `t` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum NoiseSchedule {
    /// Variance-preserving cosine: `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`.
    #[default]
    Cosine,
    /// Sampled `(t, alpha, sigma)` points, linearly interpolated. Used when
    /// a remote model reports its own schedule.
    Table { points: Vec<[f64; 3]> },
}


impl NoiseSchedule {
    pub fn from_table(mut points: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("schedule table needs at least two points"));
        }
        points.sort_by(|a, b| a[0].total_cmp(&b[0]));
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("schedule table holds non-finite values"));
        }
        Ok(NoiseSchedule::Table { points })
    }

    /// `(alpha, sigma)` at `t` (clamped to `[0, 1]`).
    pub fn scales(&self, t: f64) -> (f64, f64) {
        let t = t.clamp(0.0, 1.0);
        match self {
            NoiseSchedule::Cosine => {
                if t == 1.0 {
                    // exact endpoint: cos(pi/2) is 6e-17 in floating point
                    (0.0, 1.0)
                } else {
                    let (s, c) = (FRAC_PI_2 * t).sin_cos();
                    (c, s)
                }
            }
            NoiseSchedule::Table { points } => {
                let i = points.partition_point(|p| p[0] <= t);
                if i == 0 {
                    return (points[0][1], points[0][2]);
                }
                if i == points.len() {
                    let p = points[points.len() - 1];
                    return (p[1], p[2]);
                }
                let (a, b) = (points[i - 1], points[i]);
                let w = (t - a[0]) / (b[0] - a[0]);
                (a[1] + w * (b[1] - a[1]), a[2] + w * (b[2] - a[2]))
            }
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.scales(t).0
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.scales(t).1
    }

    /// `n` evenly spaced samples over `[0, 1]`.
    pub fn sample_table(&self, n: usize) -> Vec<[f64; 3]> {
        let n = n.max(2);
        (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                let (a, s) = self.scales(t);
                [t, a, s]
            })
            .collect()
    }
}
