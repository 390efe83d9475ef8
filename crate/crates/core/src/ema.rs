//! Teacher/student parameter state and the exponential-moving-average update.
//!
//! Normalization statistics are kept next to the flat parameter vector and
//! are updated by one of three strategies: the student tracks its own batch
//! statistics (`OpenBn`), the teacher additionally blends toward the
//! student's statistics (`EmaBn`), or both are left untouched (`FrozenBn`).

use serde::{Deserialize, Serialize};

use crate::error::{check_open_unit, Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.999;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Flat model parameters plus per-channel running mean and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub theta: Vec<f64>,
    pub norm_mean: Vec<f64>,
    pub norm_var: Vec<f64>,
}

impl ParameterState {
    pub fn new(theta: Vec<f64>, norm_mean: Vec<f64>, norm_var: Vec<f64>) -> Result<Self> {
        let state = Self {
            theta,
            norm_mean,
            norm_var,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if self.norm_mean.len() != self.norm_var.len() {
            return Err(Error::DimensionMismatch {
                what: "norm_var",
                expected: self.norm_mean.len(),
                actual: self.norm_var.len(),
            });
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.theta) || !finite(&self.norm_mean) || !finite(&self.norm_var) {
            return Err(Error::OutOfRange {
                name: "parameter",
                value: f64::NAN,
                range: "finite values",
            });
        }
        if let Some(&v) = self.norm_var.iter().find(|&&v| v < 0.0) {
            return Err(Error::OutOfRange {
                name: "norm_var",
                value: v,
                range: "[0, inf)",
            });
        }
        Ok(())
    }

    /// Running standard deviation, derived from the stored variance.
    pub fn norm_std(&self) -> Vec<f64> {
        self.norm_var.iter().map(|v| v.sqrt()).collect()
    }

    fn check_matches(&self, other: &Self) -> Result<()> {
        check_len("theta", self.theta.len(), other.theta.len())?;
        check_len("norm_mean", self.norm_mean.len(), other.norm_mean.len())?;
        check_len("norm_var", self.norm_var.len(), other.norm_var.len())
    }
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        })
    }
}

fn blend(into: &[f64], toward: &[f64], keep: f64) -> Vec<f64> {
    into.iter()
        .zip(toward)
        .map(|(&a, &b)| keep * a + (1.0 - keep) * b)
        .collect()
}

/// `alpha * teacher.theta + (1 - alpha) * student.theta`.
///
/// The teacher's normalization statistics are carried over unchanged; see
/// [`apply_norm_strategy`].
pub fn ema_update(
    teacher: &ParameterState,
    student: &ParameterState,
    alpha: f64,
) -> Result<ParameterState> {
    check_open_unit("alpha", alpha)?;
    teacher.check_matches(student)?;
    Ok(ParameterState {
        theta: blend(&teacher.theta, &student.theta, alpha),
        norm_mean: teacher.norm_mean.clone(),
        norm_var: teacher.norm_var.clone(),
    })
}

/// How normalization statistics evolve during teacher-student training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NormStrategy {
    /// Student tracks batch statistics; teacher keeps its own.
    Open { momentum: f64 },
    /// Student tracks batch statistics; teacher's statistics follow the
    /// student's by EMA with factor `alpha`.
    Ema { momentum: f64, alpha: f64 },
    /// Neither model's statistics change.
    Frozen,
}

impl Default for NormStrategy {
    fn default() -> Self {
        NormStrategy::Frozen
    }
}

impl NormStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            NormStrategy::Open { .. } => "open",
            NormStrategy::Ema { .. } => "ema",
            NormStrategy::Frozen => "frozen",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NormStrategy::Open { momentum } => check_open_unit("momentum", momentum),
            NormStrategy::Ema { momentum, alpha } => {
                check_open_unit("momentum", momentum)?;
                check_open_unit("alpha", alpha)
            }
            NormStrategy::Frozen => Ok(()),
        }
    }
}

/// Updates the statistics of both models for one training step.
///
/// `batch_mean` / `batch_var` are the statistics of the student's current
/// batch. Under `Ema` the teacher blends toward the student's statistics
/// *after* the student has absorbed this batch.
pub fn apply_norm_strategy(
    strategy: NormStrategy,
    teacher: &ParameterState,
    student: &ParameterState,
    batch_mean: &[f64],
    batch_var: &[f64],
) -> Result<(ParameterState, ParameterState)> {
    strategy.validate()?;
    teacher.check_matches(student)?;
    check_len("batch_mean", student.norm_mean.len(), batch_mean.len())?;
    check_len("batch_var", student.norm_var.len(), batch_var.len())?;
    if let Some(&v) = batch_var.iter().find(|&&v| !(v >= 0.0)) {
        return Err(Error::OutOfRange {
            name: "batch_var",
            value: v,
            range: "[0, inf)",
        });
    }

    let track = |momentum: f64| ParameterState {
        theta: student.theta.clone(),
        norm_mean: blend(&student.norm_mean, batch_mean, 1.0 - momentum),
        norm_var: blend(&student.norm_var, batch_var, 1.0 - momentum),
    };

    Ok(match strategy {
        NormStrategy::Frozen => (teacher.clone(), student.clone()),
        NormStrategy::Open { momentum } => (teacher.clone(), track(momentum)),
        NormStrategy::Ema { momentum, alpha } => {
            let student = track(momentum);
            let teacher = ParameterState {
                theta: teacher.theta.clone(),
                norm_mean: blend(&teacher.norm_mean, &student.norm_mean, alpha),
                norm_var: blend(&teacher.norm_var, &student.norm_var, alpha),
            };
            (teacher, student)
        }
    })
}
