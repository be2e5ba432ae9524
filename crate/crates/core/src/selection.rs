//! Client feedback and the baseline selectors.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::LocalTrainReport;
use crate::ClientId;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("invalid utility input: {0}")]
    InvalidInput(String),
    #[error("cohort of {k} requested from a population of {population}")]
    CohortTooLarge { k: usize, population: usize },
    #[error("invalid selection policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Random,
    UtilityGreedy,
    Dynamicfl,
}

impl PolicyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::UtilityGreedy => "utility-greedy",
            PolicyKind::Dynamicfl => "dynamicfl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionPolicy {
    pub kind: PolicyKind,
    /// Participants per round.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Fraction of each cohort reserved for exploration.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Developer-preferred round duration; derived from the warm-up when unset.
    #[serde(default)]
    pub preferred_duration: Option<f64>,
    /// Exponent of the system-utility penalty.
    #[serde(default = "default_penalty_exponent")]
    pub penalty_exponent: f64,
}

fn default_k() -> usize {
    20
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_penalty_exponent() -> f64 {
    2.0
}

impl SelectionPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            k: default_k(),
            epsilon: default_epsilon(),
            preferred_duration: None,
            penalty_exponent: default_penalty_exponent(),
        }
    }

    pub fn validate(&self, population: usize) -> Result<(), SelectionError> {
        if self.k == 0 || self.k > population {
            return Err(SelectionError::InvalidPolicy(format!(
                "k = {} must lie in [1, {population}]",
                self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(SelectionError::InvalidPolicy(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if !(self.penalty_exponent >= 0.0 && self.penalty_exponent.is_finite()) {
            return Err(SelectionError::InvalidPolicy(
                "penalty_exponent must be finite and >= 0".into(),
            ));
        }
        if let Some(t) = self.preferred_duration {
            if !(t > 0.0 && t.is_finite()) {
                return Err(SelectionError::InvalidPolicy(
                    "preferred_duration must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// What a client's last successful participation told us about its data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub sample_count: usize,
    /// Mean of squared per-sample losses.
    pub mean_sq_loss: f64,
}

impl LossSummary {
    pub fn from_losses(losses: &[f64]) -> Self {
        let n = losses.len();
        let mean_sq_loss = if n == 0 {
            0.0
        } else {
            losses.iter().map(|l| l * l).sum::<f64>() / n as f64
        };
        Self {
            sample_count: n,
            mean_sq_loss,
        }
    }

    pub fn from_report(report: &LocalTrainReport) -> Self {
        Self::from_losses(&report.per_sample_losses)
    }
}

/// One participant's outcome in a round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundObservation {
    pub client: ClientId,
    pub duration: f64,
    pub effective_bw: f64,
    /// Loss statistics of a completed update; `None` when the client dropped.
    pub summary: Option<LossSummary>,
}

/// Selector input for one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub client: ClientId,
    pub utility: f64,
    pub duration: f64,
    pub last_round_participated: u64,
}

/// Statistical utility `|B|·F·sqrt(mean L²)` times the system factor
/// `(T·F/t)^α`, the latter applied only when the client is slower than `T`.
pub fn compute_utility(
    summary: &LossSummary,
    duration: f64,
    bandwidth_factor: f64,
    preferred_duration: f64,
    penalty_exponent: f64,
) -> Result<f64, SelectionError> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(SelectionError::InvalidInput(format!("duration {duration}")));
    }
    if !(bandwidth_factor > 0.0 && bandwidth_factor <= 1.0) {
        return Err(SelectionError::InvalidInput(format!(
            "bandwidth factor {bandwidth_factor} outside (0, 1]"
        )));
    }
    if !(preferred_duration > 0.0) {
        return Err(SelectionError::InvalidInput(format!(
            "preferred duration {preferred_duration}"
        )));
    }
    if !(summary.mean_sq_loss >= 0.0 && summary.mean_sq_loss.is_finite()) {
        return Err(SelectionError::InvalidInput("non-finite loss".into()));
    }
    let statistical =
        summary.sample_count as f64 * bandwidth_factor * summary.mean_sq_loss.sqrt();
    let system = if preferred_duration < duration {
        (preferred_duration * bandwidth_factor / duration).powf(penalty_exponent)
    } else {
        1.0
    };
    Ok(statistical * system)
}

/// Uniform sample of `k` clients without replacement, returned sorted.
pub fn select_random<R: Rng + ?Sized>(
    population: &[ClientId],
    k: usize,
    rng: &mut R,
) -> Result<Vec<ClientId>, SelectionError> {
    if k > population.len() {
        return Err(SelectionError::CohortTooLarge {
            k,
            population: population.len(),
        });
    }
    let mut picked: Vec<ClientId> = index::sample(rng, population.len(), k)
        .into_iter()
        .map(|i| population[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Number of exploited and explored slots for a cohort of `k`.
pub fn split_cohort(k: usize, epsilon: f64) -> (usize, usize) {
    let explore = ((epsilon * k as f64) + 1e-9).floor() as usize;
    let explore = explore.min(k);
    (k - explore, explore)
}

/// Ranks observed clients by utility (ties → ascending id).
pub fn rank_by_utility(feedback: &BTreeMap<ClientId, Feedback>) -> Vec<ClientId> {
    let mut ranked: Vec<&Feedback> = feedback.values().collect();
    ranked.sort_by(|a, b| {
        b.utility
            .total_cmp(&a.utility)
            .then_with(|| a.client.cmp(&b.client))
    });
    ranked.into_iter().map(|f| f.client).collect()
}

/// Exploit the top `⌈(1−ε)K⌉` observed clients by utility and explore the
/// rest, preferring never-selected clients, then the least recently
/// selected. Output is sorted.
pub fn select_greedy<R: Rng + ?Sized>(
    feedback: &BTreeMap<ClientId, Feedback>,
    population: &[ClientId],
    k: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<ClientId>, SelectionError> {
    if k > population.len() {
        return Err(SelectionError::CohortTooLarge {
            k,
            population: population.len(),
        });
    }
    let members: BTreeSet<ClientId> = population.iter().copied().collect();
    let observed: BTreeMap<ClientId, Feedback> = feedback
        .iter()
        .filter(|(c, _)| members.contains(c))
        .map(|(c, f)| (*c, *f))
        .collect();
    let (exploit, _) = split_cohort(k, epsilon);
    let mut chosen: BTreeSet<ClientId> =
        rank_by_utility(&observed).into_iter().take(exploit).collect();

    let mut needed = k - chosen.len();
    if needed > 0 {
        let fresh: Vec<ClientId> = population
            .iter()
            .copied()
            .filter(|c| !observed.contains_key(c) && !chosen.contains(c))
            .collect();
        if fresh.len() >= needed {
            chosen.extend(select_random(&fresh, needed, rng)?);
            needed = 0;
        } else {
            needed -= fresh.len();
            chosen.extend(fresh);
        }
    }
    if needed > 0 {
        let mut stale: Vec<&Feedback> = observed
            .values()
            .filter(|f| !chosen.contains(&f.client))
            .collect();
        stale.sort_by(|a, b| {
            a.last_round_participated
                .cmp(&b.last_round_participated)
                .then_with(|| a.client.cmp(&b.client))
        });
        // every client at least as stale as the needed-th one is eligible
        let cutoff = stale[needed - 1].last_round_participated;
        let pool: Vec<ClientId> = stale
            .iter()
            .filter(|f| f.last_round_participated <= cutoff)
            .map(|f| f.client)
            .collect();
        chosen.extend(select_random(&pool, needed, rng)?);
    }
    Ok(chosen.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct GreedyEntry {
    summary: LossSummary,
    duration: f64,
    last_round: u64,
    decay: f64,
}

/// Short-term feedback for the utility-greedy baseline: each client is
/// scored from its most recent round alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GreedyState {
    entries: BTreeMap<ClientId, GreedyEntry>,
}

impl GreedyState {
    /// Records a round; clients absent from it decay by `stale_decay`.
    pub fn observe(&mut self, round: u64, observations: &[RoundObservation], stale_decay: f64) {
        let seen: BTreeSet<ClientId> = observations.iter().map(|o| o.client).collect();
        for (c, e) in self.entries.iter_mut() {
            if !seen.contains(c) {
                e.decay *= stale_decay;
            }
        }
        for o in observations {
            let e = self.entries.entry(o.client).or_insert(GreedyEntry {
                summary: LossSummary {
                    sample_count: 0,
                    mean_sq_loss: 0.0,
                },
                duration: o.duration,
                last_round: round,
                decay: 1.0,
            });
            if let Some(s) = o.summary {
                e.summary = s;
            }
            e.duration = o.duration;
            e.last_round = round;
            e.decay = 1.0;
        }
    }

    pub fn feedback(
        &self,
        preferred_duration: f64,
        penalty_exponent: f64,
    ) -> Result<BTreeMap<ClientId, Feedback>, SelectionError> {
        self.entries
            .iter()
            .map(|(c, e)| {
                let duration = e.duration.max(f64::MIN_POSITIVE);
                let utility =
                    compute_utility(&e.summary, duration, 1.0, preferred_duration, penalty_exponent)?
                        * e.decay;
                Ok((
                    *c,
                    Feedback {
                        client: *c,
                        utility,
                        duration,
                        last_round_participated: e.last_round,
                    },
                ))
            })
            .collect()
    }
}
