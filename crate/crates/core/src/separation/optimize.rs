use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSettings {
    pub steps: usize,
    pub adam: AdamConfig,
    /// Parameters are snapshotted every this many steps (0 = never) and
    /// always after the last step.
    pub checkpoint_every: usize,
}

/// What an objective reports for one step.
pub struct StepEval {
    pub gradient: Vec<f64>,
    pub loss: Option<f64>,
    /// Extra fields for the run log.
    pub detail: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: Option<f64>,
    pub grad_norm: f64,
    pub detail: Value,
}

impl StepLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("step log serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub theta: Vec<f64>,
}

/// Result of an optimization run. On a numeric abort `theta` is the last
/// finite parameter vector and `aborted` says where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub theta: Vec<f64>,
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<Checkpoint>,
    pub aborted: Option<Abort>,
}

impl Trajectory {
    pub fn log_lines(&self) -> String {
        let mut s = String::new();
        for l in &self.log {
            s.push_str(&l.to_json_line());
            s.push('\n');
        }
        s
    }
}

/// Adam descent on `evaluate`'s gradient with optional projection after
/// each step. Non-finite gradients or parameters, or an overflow inside
/// `evaluate`, stop the run.
pub fn optimize<F, P>(
    theta0: Vec<f64>,
    settings: &OptimizeSettings,
    project: P,
    mut evaluate: F,
) -> Result<Trajectory>
where
    F: FnMut(&[f64], usize) -> Result<StepEval>,
    P: Fn(&mut [f64]),
{
    settings.adam.validate()?;
    let mut theta = theta0;
    let mut adam = Adam::new(settings.adam, theta.len());
    let mut traj = Trajectory {
        theta: Vec::new(),
        log: Vec::new(),
        checkpoints: vec![Checkpoint {
            step: 0,
            theta: theta.clone(),
        }],
        aborted: None,
    };
    for step in 0..settings.steps {
        let eval = match evaluate(&theta, step) {
            Ok(e) => e,
            Err(e) if matches!(e.root(), Error::NumericOverflow { .. }) => {
                traj.aborted = Some(Abort {
                    step,
                    message: e.to_string(),
                });
                break;
            }
            Err(e) => return Err(e),
        };
        let grad_norm = eval.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        traj.log.push(StepLog {
            step,
            loss: eval.loss,
            grad_norm,
            detail: eval.detail,
        });
        if !grad_norm.is_finite() || eval.loss.is_some_and(|l| !l.is_finite()) {
            traj.aborted = Some(Abort {
                step,
                message: "non-finite gradient or loss".into(),
            });
            break;
        }
        let previous = theta.clone();
        adam.step(&mut theta, &eval.gradient);
        project(&mut theta);
        if theta.iter().any(|v| !v.is_finite()) {
            theta = previous;
            traj.aborted = Some(Abort {
                step,
                message: "parameters became non-finite".into(),
            });
            break;
        }
        let done = step + 1;
        if settings.checkpoint_every > 0 && done % settings.checkpoint_every == 0 {
            traj.checkpoints.push(Checkpoint {
                step: done,
                theta: theta.clone(),
            });
        }
    }
    if traj.aborted.is_none() && traj.checkpoints.last().map(|c| c.step) != Some(settings.steps) {
        traj.checkpoints.push(Checkpoint {
            step: settings.steps,
            theta: theta.clone(),
        });
    }
    traj.theta = theta;
    Ok(traj)
}
