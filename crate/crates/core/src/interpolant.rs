//! Interpolant schedules `alpha(t)`, `beta(t)`, their derivatives, the
//! velocity-field coefficients, and the Gaussian bridge kernel.
//!
//! All three schedules satisfy `alpha(0) = 1, beta(0) = 0, alpha(1) = 0,
//! beta(1) = 1`. The Follmer schedule has `alpha_dot -> -inf` at `t = 1`, so
//! flow integration always stays strictly inside `(0, 1)`.

use std::f64::consts::FRAC_PI_2;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolantSchedule {
    Linear,
    Follmer,
    #[serde(rename = "trig")]
    Trigonometric,
}

/// Schedule values at one time point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_dot: f64,
    pub beta_dot: f64,
}

impl InterpolantSchedule {
    /// Evaluate `(alpha, beta, alpha_dot, beta_dot)` at `t` in `[0, 1]`.
    pub fn eval(&self, t: f64) -> Result<ScheduleValues> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [0, 1]")));
        }
        let v = match self {
            InterpolantSchedule::Linear => ScheduleValues {
                alpha: 1.0 - t,
                beta: t,
                alpha_dot: -1.0,
                beta_dot: 1.0,
            },
            InterpolantSchedule::Follmer => {
                let alpha = (1.0 - t * t).sqrt();
                ScheduleValues {
                    alpha,
                    beta: t,
                    alpha_dot: -t / alpha,
                    beta_dot: 1.0,
                }
            }
            InterpolantSchedule::Trigonometric => {
                let (s, c) = (FRAC_PI_2 * t).sin_cos();
                ScheduleValues {
                    alpha: c,
                    beta: s,
                    alpha_dot: -FRAC_PI_2 * s,
                    beta_dot: FRAC_PI_2 * c,
                }
            }
        };
        Ok(v)
    }

    /// Velocity coefficients `a = alpha_dot/alpha` and
    /// `c = beta_dot - a * beta`, defined strictly inside `(0, 1)`.
    pub fn velocity_coeffs(&self, t: f64) -> Result<(f64, f64)> {
        if t <= 0.0 || t >= 1.0 {
            return Err(Error::SingularTime(t));
        }
        let v = self.eval(t)?;
        let a = v.alpha_dot / v.alpha;
        Ok((a, v.beta_dot - a * v.beta))
    }

    /// Log of the bridge kernel `g(t, x, y) = exp(-|x - beta(t) y|^2 / (2 alpha(t)^2))`.
    pub fn log_bridge_kernel(&self, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        if t <= 0.0 || t >= 1.0 {
            return Err(Error::SingularTime(t));
        }
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
        let v = self.eval(t)?;
        let mut sq = 0.0;
        for (&xi, &yi) in x.iter().zip(y) {
            let diff = xi - v.beta * yi;
            sq += diff * diff;
        }
        Ok(-sq / (2.0 * v.alpha * v.alpha))
    }
}

impl FromStr for InterpolantSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(InterpolantSchedule::Linear),
            "follmer" => Ok(InterpolantSchedule::Follmer),
            "trig" => Ok(InterpolantSchedule::Trigonometric),
            other => Err(Error::Config(format!(
                "unknown interpolant '{other}' (expected linear | follmer | trig)"
            ))),
        }
    }
}

pub const ALL_SCHEDULES: [InterpolantSchedule; 3] = [
    InterpolantSchedule::Linear,
    InterpolantSchedule::Follmer,
    InterpolantSchedule::Trigonometric,
];
