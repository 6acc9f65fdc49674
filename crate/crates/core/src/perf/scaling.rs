//! Compute-optimal scaling sweeps.
//!
//! Parameters and tokens per batch both grow as `C^0.5`; hidden size grows as
//! `N^(1/3)`, leaving depth to absorb the rest (`L ~ N / h^2`).

use serde::{Deserialize, Serialize};

use super::PerfError;
use crate::activation::checkpointed_asymptotic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingQuantity {
    /// Saved activations, `L * h * tokens`.
    Activations,
    /// Weights, gradients and optimizer state, proportional to `N`.
    Others,
    /// Activations under full checkpointing, `sqrt(L) * h * tokens`.
    Checkpointed,
}

/// `(C, S)` pairs for each compute budget in `computes`.
pub fn synthetic_sweep(quantity: ScalingQuantity, computes: &[f64]) -> Vec<(f64, f64)> {
    computes
        .iter()
        .map(|&c| {
            let params = c.sqrt();
            let tokens = c.sqrt();
            let hidden = params.cbrt();
            let layers = params / (hidden * hidden);
            let s = match quantity {
                ScalingQuantity::Activations => layers * hidden * tokens,
                ScalingQuantity::Others => params,
                ScalingQuantity::Checkpointed => checkpointed_asymptotic(layers, hidden, tokens),
            };
            (c, s)
        })
        .collect()
}

/// Least-squares slope of `ln S` against `ln C`.
pub fn scaling_exponent_fit(sweep: &[(f64, f64)]) -> Result<f64, PerfError> {
    if sweep.len() < 3 {
        return Err(PerfError::DegenerateSweep(format!(
            "need at least 3 points, got {}",
            sweep.len()
        )));
    }
    if sweep
        .iter()
        .any(|&(c, s)| !(c > 0.0 && s > 0.0 && c.is_finite() && s.is_finite()))
    {
        return Err(PerfError::DegenerateSweep(
            "all values must be positive and finite".into(),
        ));
    }
    let xs: Vec<f64> = sweep.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = sweep.iter().map(|p| p.1.ln()).collect();
    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    if (hi - lo) / std::f64::consts::LN_10 < 2.0 {
        return Err(PerfError::DegenerateSweep(
            "compute values must span at least two decades".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}
