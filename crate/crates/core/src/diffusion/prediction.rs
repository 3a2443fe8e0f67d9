use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    Epsilon,
    X0,
    V,
}

/// A network output for one frame, tagged with its parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub kind: PredictionKind,
    pub values: Vec<f64>,
}

impl Prediction {
    pub fn new(kind: PredictionKind, values: Vec<f64>) -> Self {
        Self { kind, values }
    }
}

/// Re-express `p` (made for noisy frame `xt` at timestep `t`) as `target`.
///
/// With `a = sqrt(alpha_bar)` and `s = sqrt(1 - alpha_bar)`:
/// `x0 = a*xt - s*v`, `eps = s*xt + a*v`, `v = a*eps - s*x0`.
/// Recovering epsilon from an x0 prediction divides by `s`, which is zero at
/// `t = 0`; that case is an error.
pub fn convert_prediction(
    p: &Prediction,
    xt: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    target: PredictionKind,
) -> Result<Prediction> {
    if p.values.len() != xt.len() {
        return Err(Error::shape(format!(
            "prediction has {} entries, noisy frame has {}",
            p.values.len(),
            xt.len()
        )));
    }
    if p.kind == target {
        schedule.check(t)?;
        return Ok(p.clone());
    }
    let (a, s) = schedule.coefficients(t)?;

    let values = match (p.kind, target) {
        (PredictionKind::V, PredictionKind::X0) => zip_map(xt, &p.values, |x, v| a * x - s * v),
        (PredictionKind::V, PredictionKind::Epsilon) => zip_map(xt, &p.values, |x, v| s * x + a * v),
        (PredictionKind::Epsilon, PredictionKind::X0) => zip_map(xt, &p.values, |x, e| (x - s * e) / a),
        (PredictionKind::Epsilon, PredictionKind::V) => {
            zip_map(xt, &p.values, |x, e| a * e - s * (x - s * e) / a)
        }
        (PredictionKind::X0, PredictionKind::Epsilon) => {
            guard_sigma(s)?;
            zip_map(xt, &p.values, |x, x0| (x - a * x0) / s)
        }
        (PredictionKind::X0, PredictionKind::V) => {
            guard_sigma(s)?;
            zip_map(xt, &p.values, |x, x0| a * (x - a * x0) / s - s * x0)
        }
        _ => unreachable!("identical kinds handled above"),
    };
    Ok(Prediction::new(target, values))
}

/// Epsilon implied by a clean estimate; undefined at `t = 0`.
pub fn epsilon_from_x0(xt: &[f64], x0: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let (a, s) = schedule.coefficients(t)?;
    guard_sigma(s)?;
    Ok(zip_map(xt, x0, |x, c| (x - a * c) / s))
}

fn guard_sigma(s: f64) -> Result<()> {
    if s == 0.0 {
        Err(Error::DivisionByZero("epsilon is undefined at t = 0 (sqrt(1 - alpha_bar) = 0)"))
    } else {
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
