//! Next-round bandwidth forecasting and cohort normalization.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::BandwidthTrace;
use crate::ClientId;

/// Lower/upper margin of the normalized range.
pub const NORM_EPSILON: f64 = 0.05;
/// Default cap on stored per-client history.
pub const DEFAULT_MAX_HISTORY: usize = 64;
/// Relative ridge damping of the AR normal equations.
const AR_RIDGE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum PredictorError {
    #[error("bandwidth history is empty")]
    EmptyHistory,
    #[error("cannot normalize an empty cohort")]
    EmptyCohort,
    #[error("trace too short: {available} evaluation points, need {required}")]
    TraceTooShort { available: usize, required: usize },
    #[error("invalid predictor parameters: {0}")]
    InvalidSpec(String),
    #[error("negative or non-finite prediction input for client {0}")]
    InvalidInput(ClientId),
}

/// Which forecaster to run and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PredictorSpec {
    LastValue,
    Ewma {
        /// Weight of the newest observation, in (0, 1].
        decay: f64,
    },
    WindowedAr {
        order: usize,
        fit_window: usize,
    },
}

impl Default for PredictorSpec {
    fn default() -> Self {
        PredictorSpec::Ewma { decay: 0.3 }
    }
}

impl PredictorSpec {
    pub fn validate(&self) -> Result<(), PredictorError> {
        match *self {
            PredictorSpec::LastValue => Ok(()),
            PredictorSpec::Ewma { decay } => {
                if decay > 0.0 && decay <= 1.0 {
                    Ok(())
                } else {
                    Err(PredictorError::InvalidSpec(format!(
                        "ewma decay {decay} outside (0, 1]"
                    )))
                }
            }
            PredictorSpec::WindowedAr { order, fit_window } => {
                if order == 0 {
                    Err(PredictorError::InvalidSpec("ar order must be >= 1".into()))
                } else if fit_window < order + 1 {
                    Err(PredictorError::InvalidSpec(format!(
                        "ar fit window {fit_window} must be >= order + 1"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Per-client sequence of observed effective bandwidths, oldest first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BandwidthHistory {
    values: VecDeque<f64>,
    capacity: usize,
}

impl BandwidthHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            values: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn from_values(values: &[f64], capacity: usize) -> Self {
        let mut h = Self::new(capacity);
        for &v in values {
            h.push(v);
        }
        h
    }

    /// Appends an observation, evicting the oldest beyond capacity. Negative
    /// or non-finite inputs are stored as zero.
    pub fn push(&mut self, bytes_per_s: f64) {
        let v = if bytes_per_s.is_finite() {
            bytes_per_s.max(0.0)
        } else {
            0.0
        };
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    pub fn clear(&mut self) {
        self.values.clear();
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }
}

/// One-step forecast from `history` (oldest first). Always non-negative.
pub fn predict(spec: &PredictorSpec, history: &[f64]) -> Result<f64, PredictorError> {
    let Some(&last) = history.last() else {
        return Err(PredictorError::EmptyHistory);
    };
    let forecast = match *spec {
        PredictorSpec::LastValue => last,
        PredictorSpec::Ewma { decay } => {
            let mut level = history[0];
            for &x in &history[1..] {
                level = decay * x + (1.0 - decay) * level;
            }
            level
        }
        PredictorSpec::WindowedAr { order, fit_window } => {
            // the fit needs order + 1 equations for the lags plus intercept
            let needed = 2 * order + 1;
            if history.len() < needed {
                last
            } else {
                let start = history.len().saturating_sub(fit_window.max(needed));
                ar_forecast(&history[start..], order).unwrap_or(last)
            }
        }
    };
    Ok(if forecast.is_finite() {
        forecast.max(0.0)
    } else {
        last.max(0.0)
    })
}

/// Least-squares AR(p) with an intercept, extrapolated one step. The
/// intercept is handled by centring the lagged columns and the target on
/// their own means, so only the lag coefficients are ridge-damped.
fn ar_forecast(window: &[f64], order: usize) -> Option<f64> {
    let n = window.len();
    let rows = n - order;
    // row r predicts window[order + r] from the `order` preceding values,
    // most recent first
    let lag = |r: usize, j: usize| window[order + r - 1 - j];
    let col_mean: Vec<f64> = (0..order)
        .map(|j| (0..rows).map(|r| lag(r, j)).sum::<f64>() / rows as f64)
        .collect();
    let y_mean = window[order..].iter().sum::<f64>() / rows as f64;
    let x = DMatrix::from_fn(rows, order, |r, j| lag(r, j) - col_mean[j]);
    let y = DVector::from_iterator(rows, window[order..].iter().map(|v| v - y_mean));
    let mut gram = x.transpose() * &x;
    let scale = (gram.trace() / order as f64).max(f64::MIN_POSITIVE);
    for j in 0..order {
        gram[(j, j)] += AR_RIDGE * scale;
    }
    let rhs = x.transpose() * y;
    let coef = gram.cholesky()?.solve(&rhs);
    let next: f64 = (0..order)
        .map(|j| coef[j] * (window[n - 1 - j] - col_mean[j]))
        .sum();
    Some(y_mean + next)
}

/// Min-max scaling of a cohort's forecasts into `[ε, 1 − ε]`; an all-equal
/// cohort maps to 0.5.
pub fn normalize(
    predictions: &BTreeMap<ClientId, f64>,
) -> Result<BTreeMap<ClientId, f64>, PredictorError> {
    if predictions.is_empty() {
        return Err(PredictorError::EmptyCohort);
    }
    if let Some((&c, _)) = predictions.iter().find(|(_, v)| !v.is_finite() || **v < 0.0) {
        return Err(PredictorError::InvalidInput(c));
    }
    let lo = predictions.values().copied().fold(f64::INFINITY, f64::min);
    let hi = predictions.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(predictions
        .iter()
        .map(|(&c, &v)| {
            let n = if span > 0.0 {
                let f = (v - lo) / span;
                (1.0 - f) * NORM_EPSILON + f * (1.0 - NORM_EPSILON)
            } else {
                0.5
            };
            (c, n)
        })
        .collect())
}

/// Minimum number of forecasts `prediction_error` needs.
pub const MIN_EVAL_POINTS: usize = 10;

/// Mean absolute one-step error walking the trace's samples, forecasting
/// each from the preceding `window` values.
pub fn prediction_error(
    spec: &PredictorSpec,
    trace: &BandwidthTrace,
    window: usize,
) -> Result<f64, PredictorError> {
    let window = window.max(1);
    let values = trace.values();
    let available = values.len().saturating_sub(window);
    if available < MIN_EVAL_POINTS {
        return Err(PredictorError::TraceTooShort {
            available,
            required: MIN_EVAL_POINTS,
        });
    }
    let mut total = 0.0;
    for i in window..values.len() {
        let forecast = predict(spec, &values[i - window..i])?;
        total += (forecast - values[i]).abs();
    }
    Ok(total / available as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(vals: &[f64]) -> BTreeMap<ClientId, f64> {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| (ClientId(i as u32), v))
            .collect()
    }

    #[test]
    fn last_value() {
        assert_eq!(predict(&PredictorSpec::LastValue, &[5.0, 7.0, 9.0]).unwrap(), 9.0);
    }

    #[test]
    fn ewma_full_weight_is_last_value() {
        let spec = PredictorSpec::Ewma { decay: 1.0 };
        assert_eq!(predict(&spec, &[3.0, 8.0]).unwrap(), 8.0);
        let half = PredictorSpec::Ewma { decay: 0.5 };
        assert_eq!(predict(&half, &[4.0, 8.0]).unwrap(), 6.0);
    }

    #[test]
    fn ar2_continues_a_ramp() {
        let spec = PredictorSpec::WindowedAr {
            order: 2,
            fit_window: 5,
        };
        let p = predict(&spec, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((p - 6.0).abs() < 1e-6, "{p}");
    }

    #[test]
    fn ar_short_history_falls_back() {
        let spec = PredictorSpec::WindowedAr {
            order: 3,
            fit_window: 8,
        };
        assert_eq!(predict(&spec, &[2.0, 9.0]).unwrap(), 9.0);
    }

    #[test]
    fn forecasts_clamped_at_zero() {
        let spec = PredictorSpec::WindowedAr {
            order: 1,
            fit_window: 4,
        };
        // steep descent extrapolates below zero
        let p = predict(&spec, &[40.0, 30.0, 20.0, 10.0, 0.5]).unwrap();
        assert!(p >= 0.0);
    }

    #[test]
    fn empty_history_rejected() {
        assert_eq!(
            predict(&PredictorSpec::LastValue, &[]),
            Err(PredictorError::EmptyHistory)
        );
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&ids(&[0.0, 10.0])).unwrap();
        assert_eq!(n.values().copied().collect::<Vec<_>>(), vec![0.05, 0.95]);
        let n = normalize(&ids(&[4.0, 4.0, 4.0])).unwrap();
        assert!(n.values().all(|&v| v == 0.5));
        let n = normalize(&ids(&[0.0, 5.0, 10.0])).unwrap();
        let got: Vec<f64> = n.values().copied().collect();
        for (g, e) in got.iter().zip([0.05, 0.5, 0.95]) {
            assert!((g - e).abs() < 1e-12);
        }
        assert_eq!(normalize(&BTreeMap::new()), Err(PredictorError::EmptyCohort));
    }

    #[test]
    fn history_is_capped() {
        let mut h = BandwidthHistory::new(3);
        for v in [1.0, 2.0, 3.0, 4.0, -5.0] {
            h.push(v);
        }
        assert_eq!(h.to_vec(), vec![3.0, 4.0, 0.0]);
    }

    #[test]
    fn spec_validation() {
        assert!(PredictorSpec::Ewma { decay: 0.0 }.validate().is_err());
        assert!(PredictorSpec::WindowedAr {
            order: 2,
            fit_window: 2
        }
        .validate()
        .is_err());
        assert!(PredictorSpec::WindowedAr {
            order: 2,
            fit_window: 3
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn constant_trace_has_no_error() {
        let samples: Vec<(f64, f64)> = (0..40).map(|t| (t as f64, 3e6)).collect();
        let trace = BandwidthTrace::new("c", &samples).unwrap();
        for spec in [
            PredictorSpec::LastValue,
            PredictorSpec::Ewma { decay: 0.3 },
            PredictorSpec::WindowedAr {
                order: 2,
                fit_window: 16,
            },
        ] {
            for w in [1, 3, 10] {
                let mae = prediction_error(&spec, &trace, w).unwrap();
                assert!(mae <= 3e6 * 1e-6, "{spec:?} w={w} mae={mae}");
            }
        }
    }

    #[test]
    fn ramp_is_predicted_exactly_by_ar2() {
        let samples: Vec<(f64, f64)> = (0..40).map(|t| (t as f64, 1e5 * (t + 1) as f64)).collect();
        let trace = BandwidthTrace::new("r", &samples).unwrap();
        let spec = PredictorSpec::WindowedAr {
            order: 2,
            fit_window: 64,
        };
        for w in [5, 6, 12] {
            let mae = prediction_error(&spec, &trace, w).unwrap();
            assert!(mae < 1e-6 * 4e6, "w={w} mae={mae}");
        }
    }

    #[test]
    fn short_trace_rejected() {
        let samples: Vec<(f64, f64)> = (0..12).map(|t| (t as f64, 1.0)).collect();
        let trace = BandwidthTrace::new("s", &samples).unwrap();
        assert!(matches!(
            prediction_error(&PredictorSpec::LastValue, &trace, 5),
            Err(PredictorError::TraceTooShort { .. })
        ));
    }
}
