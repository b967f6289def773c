//! Continuous-time noise schedules `α(t)` on `t ∈ [0, 1]` and the forward
//! (noising) transition `x_t = √α(t)·x_0 + √(1−α(t))·ε`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SddError};
use crate::numerics::Matrix;

/// Smallest value `α` is allowed to reach; keeps `√α` and `1/√(1−α)` usable.
pub const ALPHA_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseSchedule {
    /// `cos²((t+s)/(1+s)·π/2)`, normalized so that `α(0) = 1`.
    Cosine { offset: f64 },
    /// `α(t) = 1 − t`.
    Linear,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::Cosine { offset: 0.008 }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSchedule::Cosine { offset } if !(0.0..1.0).contains(&offset) => Err(
                SddError::arg(format!("cosine offset {offset} must lie in [0, 1)")),
            ),
            _ => Ok(()),
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(SddError::Domain(t));
        }
        let a = match *self {
            NoiseSchedule::Cosine { offset } => {
                let f = |t: f64| ((t + offset) / (1.0 + offset) * FRAC_PI_2).cos().powi(2);
                f(t) / f(0.0)
            }
            NoiseSchedule::Linear => 1.0 - t,
        };
        Ok(a.clamp(ALPHA_FLOOR, 1.0))
    }

    /// Forward transition with one shared time for every row.
    pub fn forward_diffuse(&self, x0: &Matrix, t: f64, eps: &Matrix) -> Result<Matrix> {
        self.forward_diffuse_rows(x0, &vec![t; x0.rows()], eps)
    }

    /// Forward transition with a separate time per row.
    pub fn forward_diffuse_rows(&self, x0: &Matrix, t: &[f64], eps: &Matrix) -> Result<Matrix> {
        if x0.shape() != eps.shape() {
            return Err(SddError::shape(format!(
                "noise {}x{} vs state {}x{}",
                eps.rows(),
                eps.cols(),
                x0.rows(),
                x0.cols()
            )));
        }
        if t.len() != x0.rows() {
            return Err(SddError::shape(format!(
                "{} times for {} rows",
                t.len(),
                x0.rows()
            )));
        }
        let mut out = Matrix::zeros(x0.rows(), x0.cols());
        for (i, &ti) in t.iter().enumerate() {
            let a = self.alpha(ti)?;
            let (signal, noise) = (a.sqrt(), (1.0 - a).sqrt());
            for ((o, &x), &e) in out.row_mut(i).iter_mut().zip(x0.row(i)).zip(eps.row(i)) {
                *o = signal * x + noise * e;
            }
        }
        Ok(out)
    }
}
