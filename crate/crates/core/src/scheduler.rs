//! Windowed client scheduling: selection is frozen for `W` rounds while
//! per-client durations and effective bandwidths accumulate; at each window
//! boundary the accumulated durations are averaged, bandwidth forecasts turn
//! into reward/penalty factors on the feedback, a cohort is picked for the
//! next window, and `W` is resized from the last window's round durations.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{self, BandwidthHistory, PredictorError, PredictorSpec};
use crate::selection::{self, compute_utility, Feedback, LossSummary, SelectionError};
pub use crate::selection::RoundObservation;
use crate::ClientId;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("client {0} is not part of the population")]
    UnknownClient(ClientId),
    #[error("long-term durations requested mid-window ({rounds_in_window} of {window} rounds)")]
    WindowNotComplete { rounds_in_window: usize, window: usize },
    #[error("bandwidth prediction {0} outside [0, 1]")]
    InvalidPrediction(f64),
    #[error("feedback factor {factor} for client {client} is not positive")]
    NonPositiveFactor { client: ClientId, factor: f64 },
    #[error("round duration {0} must be positive")]
    InvalidDuration(f64),
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    /// Penalty threshold on the normalized forecast.
    pub th_low: f64,
    /// Reward threshold on the normalized forecast.
    pub th_high: f64,
    /// Additive offset on both factor branches.
    pub c: f64,
    /// Slow-round threshold (s); defaults to twice the preferred duration.
    pub d_high: Option<f64>,
    /// Fast-round threshold (s); defaults to half the preferred duration.
    pub d_slow: Option<f64>,
    pub w_init: usize,
    pub w_min: usize,
    pub w_max: usize,
    /// Resize the window at each boundary.
    pub adaptive_window: bool,
    /// Use bandwidth forecasts in the feedback.
    pub prediction: bool,
    pub predictor: PredictorSpec,
    /// Per-window utility decay of clients that did not participate.
    pub stale_decay: f64,
    pub max_history: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            th_low: 0.3,
            th_high: 0.8,
            c: 0.0,
            d_high: None,
            d_slow: None,
            w_init: 5,
            w_min: 2,
            w_max: 20,
            adaptive_window: true,
            prediction: true,
            predictor: PredictorSpec::default(),
            stale_decay: 0.98,
            max_history: predictor::DEFAULT_MAX_HISTORY,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        let bad = |m: String| Err(SchedulerError::InvalidConfig(m));
        // the closed ends 0 and 1 switch the penalty/reward branch off
        if !(0.0 <= self.th_low && self.th_low < self.th_high && self.th_high <= 1.0) {
            return bad(format!(
                "thresholds must satisfy 0 <= th_low < th_high <= 1 (got {}, {})",
                self.th_low, self.th_high
            ));
        }
        if !self.c.is_finite() {
            return bad("c must be finite".into());
        }
        if let (Some(h), Some(s)) = (self.d_high, self.d_slow) {
            if !(s > 0.0 && s < h) {
                return bad(format!("need 0 < d_slow < d_high (got {s}, {h})"));
            }
        }
        for d in [self.d_high, self.d_slow].into_iter().flatten() {
            if !(d > 0.0 && d.is_finite()) {
                return bad(format!("duration threshold {d} must be positive"));
            }
        }
        if !(1 <= self.w_min && self.w_min <= self.w_init && self.w_init <= self.w_max) {
            return bad(format!(
                "need 1 <= w_min <= w_init <= w_max (got {}, {}, {})",
                self.w_min, self.w_init, self.w_max
            ));
        }
        if !(self.stale_decay > 0.0 && self.stale_decay <= 1.0) {
            return bad("stale_decay must lie in (0, 1]".into());
        }
        if self.max_history == 0 {
            return bad("max_history must be >= 1".into());
        }
        self.predictor.validate()?;
        Ok(())
    }

    /// Forecasts influence selection only when enabled and at least one
    /// factor branch is reachable.
    pub fn prediction_active(&self) -> bool {
        self.prediction && (self.th_low > 0.0 || self.th_high < 1.0)
    }

    /// Duration thresholds for a preferred per-client duration; unset window
    /// resizing thresholds scale with it.
    pub fn duration_thresholds(&self, preferred: f64) -> DurationThresholds {
        let d_high = self.d_high.unwrap_or(2.0 * preferred);
        let d_slow = self.d_slow.unwrap_or(0.5 * preferred).min(d_high);
        DurationThresholds {
            preferred,
            d_high,
            d_slow,
        }
    }
}

/// Timing targets resolved once the preferred duration is known.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationThresholds {
    pub preferred: f64,
    pub d_high: f64,
    pub d_slow: f64,
}

/// Reward/penalty multiplier for a normalized forecast. Each branch is
/// anchored to 1 at its threshold (plus the offset `c`).
pub fn feedback_factor(alpha_pred: f64, cfg: &SchedulerConfig) -> Result<f64, SchedulerError> {
    if !(0.0..=1.0).contains(&alpha_pred) {
        return Err(SchedulerError::InvalidPrediction(alpha_pred));
    }
    if cfg.th_high < 1.0 && alpha_pred >= cfg.th_high {
        if alpha_pred >= 1.0 {
            return Err(SchedulerError::InvalidPrediction(alpha_pred));
        }
        let c_reward = 1.0 + (1.0 - cfg.th_high).ln() + cfg.c;
        Ok(-(1.0 - alpha_pred).ln() + c_reward)
    } else if cfg.th_low > 0.0 && alpha_pred <= cfg.th_low {
        let c_penalty = -cfg.th_low + cfg.c;
        Ok((alpha_pred + c_penalty).exp())
    } else {
        Ok(1.0)
    }
}

/// Scales utility up and duration down by each client's factor.
pub fn apply_feedback(
    feedback: &BTreeMap<ClientId, Feedback>,
    factors: &BTreeMap<ClientId, f64>,
) -> Result<BTreeMap<ClientId, Feedback>, SchedulerError> {
    if let Some((&client, &factor)) = factors.iter().find(|(_, f)| !(**f > 0.0)) {
        return Err(SchedulerError::NonPositiveFactor { client, factor });
    }
    Ok(feedback
        .iter()
        .map(|(c, f)| {
            let mut f = *f;
            if let Some(&a) = factors.get(c) {
                f.utility *= a;
                f.duration /= a;
            }
            (*c, f)
        })
        .collect())
}

/// Rescales the window from the last window's mean round duration: shrink by
/// `d_high/d` on slow windows, grow by `d_slow/d` on fast ones.
pub fn adjust_window(
    window: usize,
    mean_round_duration: f64,
    thresholds: &DurationThresholds,
    w_min: usize,
    w_max: usize,
) -> Result<usize, SchedulerError> {
    let d = mean_round_duration;
    if !(d > 0.0 && d.is_finite()) {
        return Err(SchedulerError::InvalidDuration(d));
    }
    let scaled = if d >= thresholds.d_high {
        window as f64 * thresholds.d_high / d
    } else if d <= thresholds.d_slow {
        window as f64 * thresholds.d_slow / d
    } else {
        window as f64
    };
    Ok((scaled.round() as usize).clamp(w_min, w_max))
}

/// What the scheduler retains about a client between windows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientKnowledge {
    pub summary: LossSummary,
    pub duration: f64,
    pub last_round: u64,
    pub decay: f64,
}

/// Per-client detail of one boundary decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClientDecision {
    pub client: ClientId,
    pub predicted_bw: f64,
    pub normalized: f64,
    pub factor: f64,
    pub duration: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryOutcome {
    pub round: u64,
    pub cohort: Vec<ClientId>,
    pub previous_window: usize,
    pub window: usize,
    pub mean_round_duration: Option<f64>,
    pub decisions: Vec<ClientDecision>,
}

/// Observation-window accumulator and the knowledge folded out of it.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowState {
    window: usize,
    rounds_in_window: usize,
    frozen: bool,
    w_min: usize,
    w_max: usize,
    max_history: usize,
    window_bw: BTreeMap<ClientId, BandwidthHistory>,
    duration_accum: BTreeMap<ClientId, (f64, u32)>,
    round_durations: (f64, u32),
    last_round: u64,
    /// Bandwidth history of each client's most recent observed window.
    bw_history: BTreeMap<ClientId, BandwidthHistory>,
    knowledge: BTreeMap<ClientId, ClientKnowledge>,
    pending_forecasts: BTreeMap<ClientId, f64>,
    forecast_error: (f64, u64),
}

impl WindowState {
    pub fn new(cfg: &SchedulerConfig) -> Self {
        Self {
            window: cfg.w_init,
            rounds_in_window: 0,
            frozen: false,
            w_min: cfg.w_min,
            w_max: cfg.w_max,
            max_history: cfg.max_history,
            window_bw: BTreeMap::new(),
            duration_accum: BTreeMap::new(),
            round_durations: (0.0, 0),
            last_round: 0,
            bw_history: BTreeMap::new(),
            knowledge: BTreeMap::new(),
            pending_forecasts: BTreeMap::new(),
            forecast_error: (0.0, 0),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn rounds_in_window(&self) -> usize {
        self.rounds_in_window
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn bounds(&self) -> (usize, usize) {
        (self.w_min, self.w_max)
    }

    pub fn knowledge(&self) -> &BTreeMap<ClientId, ClientKnowledge> {
        &self.knowledge
    }

    pub fn bw_history(&self, client: ClientId) -> Option<&BandwidthHistory> {
        self.bw_history.get(&client)
    }

    pub fn duration_accum(&self) -> &BTreeMap<ClientId, (f64, u32)> {
        &self.duration_accum
    }

    /// Mean absolute error of boundary forecasts against the bandwidth the
    /// selected clients then achieved.
    pub fn forecast_mae(&self) -> Option<f64> {
        let (sum, n) = self.forecast_error;
        (n > 0).then(|| sum / n as f64)
    }

    /// Checks the structural invariants; used by audits and tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.rounds_in_window >= self.window {
            return Err(format!(
                "rounds_in_window {} >= window {}",
                self.rounds_in_window, self.window
            ));
        }
        if self.frozen != (self.rounds_in_window > 0) {
            return Err("frozen flag out of sync with the round counter".into());
        }
        if self.window < self.w_min || self.window > self.w_max {
            return Err(format!(
                "window {} outside [{}, {}]",
                self.window, self.w_min, self.w_max
            ));
        }
        if let Some((c, h)) = self
            .bw_history
            .iter()
            .chain(self.window_bw.iter())
            .find(|(_, h)| h.len() > self.max_history)
        {
            return Err(format!("history of {c} holds {} values", h.len()));
        }
        Ok(())
    }

    fn accumulate(
        &mut self,
        round: u64,
        observations: &[RoundObservation],
        round_duration: f64,
        population: &BTreeSet<ClientId>,
    ) -> Result<(), SchedulerError> {
        if let Some(o) = observations.iter().find(|o| !population.contains(&o.client)) {
            return Err(SchedulerError::UnknownClient(o.client));
        }
        for o in observations {
            let cap = self.max_history;
            self.window_bw
                .entry(o.client)
                .or_insert_with(|| BandwidthHistory::new(cap))
                .push(o.effective_bw);
            let acc = self.duration_accum.entry(o.client).or_insert((0.0, 0));
            acc.0 += o.duration;
            acc.1 += 1;
            if let Some(forecast) = self.pending_forecasts.get(&o.client) {
                self.forecast_error.0 += (forecast - o.effective_bw).abs();
                self.forecast_error.1 += 1;
            }
            let entry = self.knowledge.entry(o.client).or_insert(ClientKnowledge {
                summary: LossSummary {
                    sample_count: 0,
                    mean_sq_loss: 0.0,
                },
                duration: o.duration,
                last_round: round,
                decay: 1.0,
            });
            if let Some(s) = o.summary {
                entry.summary = s;
            }
            entry.last_round = round;
        }
        self.round_durations.0 += round_duration;
        self.round_durations.1 += 1;
        self.last_round = round;
        Ok(())
    }

    /// Records one round of the current window. No selection happens here.
    pub fn observe_round(
        &mut self,
        round: u64,
        observations: &[RoundObservation],
        round_duration: f64,
        population: &BTreeSet<ClientId>,
    ) -> Result<(), SchedulerError> {
        self.accumulate(round, observations, round_duration, population)?;
        self.rounds_in_window = (self.rounds_in_window + 1) % self.window;
        self.frozen = self.rounds_in_window > 0;
        Ok(())
    }

    /// Records a warm-up round and folds it immediately, as a one-round
    /// window that does not advance the window counter.
    pub fn observe_warmup_round(
        &mut self,
        round: u64,
        observations: &[RoundObservation],
        round_duration: f64,
        population: &BTreeSet<ClientId>,
        stale_decay: f64,
    ) -> Result<(), SchedulerError> {
        self.accumulate(round, observations, round_duration, population)?;
        self.fold(stale_decay);
        Ok(())
    }

    /// Mean duration per client over the completed window, divided by the
    /// client's participation count.
    pub fn long_term_durations(&self) -> Result<BTreeMap<ClientId, f64>, SchedulerError> {
        if self.frozen {
            return Err(SchedulerError::WindowNotComplete {
                rounds_in_window: self.rounds_in_window,
                window: self.window,
            });
        }
        Ok(self
            .duration_accum
            .iter()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(c, (sum, n))| (*c, sum / *n as f64))
            .collect())
    }

    /// Moves the window's accumulators into per-client knowledge and clears
    /// them. Returns the window's mean round duration.
    fn fold(&mut self, stale_decay: f64) -> Option<f64> {
        if self.round_durations.1 == 0 {
            return None;
        }
        let durations: BTreeMap<ClientId, f64> = self
            .duration_accum
            .iter()
            .filter(|(_, (_, n))| *n > 0)
            .map(|(c, (sum, n))| (*c, sum / *n as f64))
            .collect();
        for (c, k) in self.knowledge.iter_mut() {
            match durations.get(c) {
                Some(&d) => {
                    k.duration = d;
                    k.decay = 1.0;
                }
                None => k.decay *= stale_decay,
            }
        }
        for (c, h) in std::mem::take(&mut self.window_bw) {
            self.bw_history.insert(c, h);
        }
        self.duration_accum.clear();
        let (sum, n) = std::mem::replace(&mut self.round_durations, (0.0, 0));
        (n > 0).then(|| sum / n as f64)
    }

    /// Feedback for every known client at the current boundary, plus the
    /// per-client forecast details.
    fn boundary_feedback(
        &self,
        cfg: &SchedulerConfig,
        thresholds: &DurationThresholds,
        penalty_exponent: f64,
    ) -> Result<(BTreeMap<ClientId, Feedback>, Vec<ClientDecision>), SchedulerError> {
        let mut forecasts = BTreeMap::new();
        for (c, h) in &self.bw_history {
            if self.knowledge.contains_key(c) && !h.is_empty() {
                forecasts.insert(*c, predictor::predict(&cfg.predictor, &h.to_vec())?);
            }
        }
        let active = cfg.prediction_active() && !forecasts.is_empty();
        let normalized = if active {
            predictor::normalize(&forecasts)?
        } else {
            BTreeMap::new()
        };

        let mut base = BTreeMap::new();
        let mut factors = BTreeMap::new();
        let mut decisions = Vec::with_capacity(self.knowledge.len());
        for (c, k) in &self.knowledge {
            let (f, factor) = match normalized.get(c) {
                Some(&f) => (f, feedback_factor(f, cfg)?),
                None => (1.0, 1.0),
            };
            // zero-duration clients (nothing transferred, nothing computed)
            // count as instantaneous
            let duration = k.duration.max(f64::MIN_POSITIVE);
            let utility = compute_utility(
                &k.summary,
                duration,
                f,
                thresholds.preferred,
                penalty_exponent,
            )? * k.decay;
            base.insert(
                *c,
                Feedback {
                    client: *c,
                    utility,
                    duration,
                    last_round_participated: k.last_round,
                },
            );
            factors.insert(*c, factor);
            decisions.push(ClientDecision {
                client: *c,
                predicted_bw: forecasts.get(c).copied().unwrap_or(f64::NAN),
                normalized: f,
                factor,
                duration,
                utility: utility * factor,
            });
        }
        let feedback = apply_feedback(&base, &factors)?;
        Ok((feedback, decisions))
    }

    /// Closes the window: folds accumulators, builds prediction-adjusted
    /// feedback, selects the next cohort and resizes the window.
    #[allow(clippy::too_many_arguments)]
    pub fn window_boundary_step<R: Rng + ?Sized>(
        &mut self,
        round: u64,
        population: &[ClientId],
        k: usize,
        epsilon: f64,
        penalty_exponent: f64,
        cfg: &SchedulerConfig,
        thresholds: &DurationThresholds,
        rng: &mut R,
    ) -> Result<BoundaryOutcome, SchedulerError> {
        if self.frozen {
            return Err(SchedulerError::WindowNotComplete {
                rounds_in_window: self.rounds_in_window,
                window: self.window,
            });
        }
        let mean_round_duration = self.fold(cfg.stale_decay);
        let (feedback, decisions) = self.boundary_feedback(cfg, thresholds, penalty_exponent)?;
        let cohort = selection::select_greedy(&feedback, population, k, epsilon, rng)?;

        let previous_window = self.window;
        if cfg.adaptive_window {
            if let Some(d) = mean_round_duration.filter(|d| *d > 0.0) {
                self.window = adjust_window(self.window, d, thresholds, self.w_min, self.w_max)?;
            }
        }
        self.pending_forecasts = decisions
            .iter()
            .filter(|d| d.predicted_bw.is_finite() && cohort.binary_search(&d.client).is_ok())
            .map(|d| (d.client, d.predicted_bw))
            .collect();
        self.rounds_in_window = 0;
        self.frozen = false;
        Ok(BoundaryOutcome {
            round,
            cohort,
            previous_window,
            window: self.window,
            mean_round_duration,
            decisions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> SchedulerConfig {
        SchedulerConfig {
            w_init: 3,
            w_min: 1,
            w_max: 16,
            ..Default::default()
        }
    }

    fn obs(client: u32, duration: f64) -> RoundObservation {
        RoundObservation {
            client: ClientId(client),
            duration,
            effective_bw: 1e6,
            summary: Some(LossSummary {
                sample_count: 10,
                mean_sq_loss: 1.0,
            }),
        }
    }

    fn population(n: u32) -> BTreeSet<ClientId> {
        (0..n).map(ClientId).collect()
    }

    fn thresholds() -> DurationThresholds {
        DurationThresholds {
            preferred: 10.0,
            d_high: 20.0,
            d_slow: 5.0,
        }
    }

    #[test]
    fn freezes_inside_the_window() {
        let mut s = WindowState::new(&cfg());
        let pop = population(2);
        s.observe_round(1, &[obs(0, 2.0)], 2.0, &pop).unwrap();
        assert!(s.frozen());
        assert_eq!(s.rounds_in_window(), 1);
        assert!(matches!(
            s.long_term_durations(),
            Err(SchedulerError::WindowNotComplete { .. })
        ));
        s.observe_round(2, &[obs(0, 4.0)], 4.0, &pop).unwrap();
        s.observe_round(3, &[obs(0, 6.0)], 6.0, &pop).unwrap();
        assert!(!s.frozen());
        assert_eq!(s.rounds_in_window(), 0);
        assert_eq!(s.duration_accum()[&ClientId(0)], (12.0, 3));
        assert_eq!(s.long_term_durations().unwrap()[&ClientId(0)], 4.0);
    }

    #[test]
    fn single_participation_duration() {
        let mut s = WindowState::new(&SchedulerConfig {
            w_init: 1,
            w_min: 1,
            ..cfg()
        });
        s.observe_round(1, &[obs(1, 10.0)], 10.0, &population(2)).unwrap();
        assert_eq!(s.long_term_durations().unwrap()[&ClientId(1)], 10.0);
    }

    #[test]
    fn unknown_client_rejected() {
        let mut s = WindowState::new(&cfg());
        assert_eq!(
            s.observe_round(1, &[obs(7, 1.0)], 1.0, &population(2)),
            Err(SchedulerError::UnknownClient(ClientId(7)))
        );
    }

    #[test]
    fn factor_branches() {
        let c = SchedulerConfig {
            th_low: 0.3,
            th_high: 0.8,
            ..Default::default()
        };
        let reward = feedback_factor(0.95, &c).unwrap();
        assert!((reward - (-(0.05f64).ln() + 1.0 + 0.2f64.ln())).abs() < 1e-12);
        assert!((reward - 2.386).abs() < 1e-3);
        assert!((feedback_factor(0.8, &c).unwrap() - 1.0).abs() < 1e-12);
        let penalty = feedback_factor(0.1, &c).unwrap();
        assert!((penalty - (-0.2f64).exp()).abs() < 1e-12);
        assert!((feedback_factor(0.3, &c).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(feedback_factor(0.5, &c).unwrap(), 1.0);
        assert!(matches!(
            feedback_factor(1.2, &c),
            Err(SchedulerError::InvalidPrediction(_))
        ));
    }

    #[test]
    fn open_thresholds_disable_both_branches() {
        let c = SchedulerConfig {
            th_low: 0.0,
            th_high: 1.0,
            ..Default::default()
        };
        for a in [0.0, 0.05, 0.5, 0.95, 1.0] {
            assert_eq!(feedback_factor(a, &c).unwrap(), 1.0);
        }
        assert!(!c.prediction_active());
    }

    #[test]
    fn feedback_application() {
        let mut fb = BTreeMap::new();
        fb.insert(
            ClientId(0),
            Feedback {
                client: ClientId(0),
                utility: 7.07,
                duration: 10.0,
                last_round_participated: 1,
            },
        );
        let two: BTreeMap<_, _> = [(ClientId(0), 2.0)].into();
        let out = apply_feedback(&fb, &two).unwrap();
        assert_eq!(out[&ClientId(0)].utility, 14.14);
        assert_eq!(out[&ClientId(0)].duration, 5.0);
        let one: BTreeMap<_, _> = [(ClientId(0), 1.0)].into();
        assert_eq!(apply_feedback(&fb, &one).unwrap(), fb);
        let half: BTreeMap<_, _> = [(ClientId(0), 0.5)].into();
        let out = apply_feedback(&fb, &half).unwrap();
        assert_eq!(out[&ClientId(0)].utility, 3.535);
        assert_eq!(out[&ClientId(0)].duration, 20.0);
        let zero: BTreeMap<_, _> = [(ClientId(0), 0.0)].into();
        assert!(matches!(
            apply_feedback(&fb, &zero),
            Err(SchedulerError::NonPositiveFactor { .. })
        ));
    }

    #[test]
    fn window_resizing() {
        let t = thresholds();
        assert_eq!(adjust_window(10, 40.0, &t, 2, 20).unwrap(), 5);
        assert_eq!(adjust_window(10, 12.0, &t, 2, 20).unwrap(), 10);
        assert_eq!(adjust_window(10, 2.5, &t, 2, 16).unwrap(), 16);
        assert_eq!(adjust_window(7, 20.0, &t, 2, 20).unwrap(), 7);
        assert_eq!(adjust_window(7, 5.0, &t, 2, 20).unwrap(), 7);
        assert!(matches!(
            adjust_window(7, 0.0, &t, 2, 20),
            Err(SchedulerError::InvalidDuration(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(SchedulerConfig::default().validate().is_ok());
        let bad = [
            SchedulerConfig {
                th_low: 0.9,
                ..Default::default()
            },
            SchedulerConfig {
                w_min: 0,
                ..Default::default()
            },
            SchedulerConfig {
                w_init: 30,
                ..Default::default()
            },
            SchedulerConfig {
                d_high: Some(1.0),
                d_slow: Some(2.0),
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn boundary_prefers_predicted_fast_client() {
        // identical clients except for observed bandwidth
        let c = SchedulerConfig {
            w_init: 1,
            w_min: 1,
            adaptive_window: false,
            predictor: PredictorSpec::LastValue,
            ..cfg()
        };
        let pop = population(2);
        let mut s = WindowState::new(&c);
        let mut fast = obs(0, 5.0);
        fast.effective_bw = 9e6;
        let mut slow = obs(1, 5.0);
        slow.effective_bw = 1e5;
        // only the bandwidth differs
        s.observe_round(1, &[slow, fast], 5.0, &pop).unwrap();
        let ids: Vec<ClientId> = pop.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = s
            .window_boundary_step(2, &ids, 1, 0.0, 2.0, &c, &thresholds(), &mut rng)
            .unwrap();
        assert_eq!(out.cohort, vec![ClientId(0)]);
        let f: Vec<f64> = out.decisions.iter().map(|d| d.factor).collect();
        assert!((f[0] - 2.386).abs() < 1e-3 && (f[1] - 0.7788).abs() < 1e-3, "{f:?}");
    }

    #[test]
    fn boundary_mid_window_rejected() {
        let c = cfg();
        let mut s = WindowState::new(&c);
        let pop = population(3);
        s.observe_round(1, &[obs(0, 1.0)], 1.0, &pop).unwrap();
        let ids: Vec<ClientId> = pop.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(s
            .window_boundary_step(2, &ids, 1, 0.0, 2.0, &c, &thresholds(), &mut rng)
            .is_err());
    }

    #[test]
    fn stale_clients_decay() {
        let c = SchedulerConfig {
            w_init: 1,
            w_min: 1,
            adaptive_window: false,
            ..cfg()
        };
        let pop = population(2);
        let ids: Vec<ClientId> = pop.iter().copied().collect();
        let mut s = WindowState::new(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        s.observe_round(1, &[obs(0, 1.0), obs(1, 1.0)], 1.0, &pop).unwrap();
        s.window_boundary_step(1, &ids, 1, 0.0, 2.0, &c, &thresholds(), &mut rng)
            .unwrap();
        s.observe_round(2, &[obs(0, 1.0)], 1.0, &pop).unwrap();
        s.window_boundary_step(2, &ids, 1, 0.0, 2.0, &c, &thresholds(), &mut rng)
            .unwrap();
        assert_eq!(s.knowledge()[&ClientId(0)].decay, 1.0);
        assert_eq!(s.knowledge()[&ClientId(1)].decay, 0.98);
    }
}
