//! The synchronous round loop: select, dispatch, train, time the transfers
//! against each client's trace, aggregate the survivors, feed back.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::{
    self, AggregatorConfig, AggregatorState, GlobalModel, LearnerError, LocalTrainReport,
    Population, PopulationSpec, TrainParams,
};
use crate::rng::{derive_seed, stream_rng};
use crate::scheduler::{
    BoundaryOutcome, DurationThresholds, SchedulerConfig, SchedulerError, WindowState,
};
use crate::selection::{
    self, GreedyState, LossSummary, PolicyKind, RoundObservation, SelectionError, SelectionPolicy,
};
use crate::synth::{MobilityTraceSpec, SinusoidTraceSpec};
use crate::trace::{BandwidthTrace, TraceError, TraceFormat, TraceStore, DEFAULT_STALL_TIMEOUT_S};
use crate::ClientId;

/// Multiplier on the warm-up median client duration giving the default
/// preferred duration.
pub const PREFERRED_DURATION_FACTOR: f64 = 1.3;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("every client of round {round} dropped")]
    AllClientsDropped { round: u64 },
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Static description of a device.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientProfile {
    pub client: ClientId,
    pub trace_id: String,
    /// Seconds of compute per sample per epoch.
    pub per_sample_latency: f64,
    pub pull_bytes: f64,
    pub push_bytes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceSpec {
    /// Log-uniform range of per-sample compute latency (s).
    pub compute_latency: (f64, f64),
    pub pull_bytes: f64,
    pub push_bytes: f64,
    pub stall_timeout_s: f64,
}

impl Default for DeviceSpec {
    fn default() -> Self {
        Self {
            compute_latency: (4e-4, 4e-3),
            pull_bytes: 5e6,
            push_bytes: 5e6,
            stall_timeout_s: DEFAULT_STALL_TIMEOUT_S,
        }
    }
}

impl DeviceSpec {
    pub fn validate(&self) -> Result<(), EngineError> {
        let (lo, hi) = self.compute_latency;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(EngineError::Config(
                "device.compute_latency must satisfy 0 < lo <= hi".into(),
            ));
        }
        if !(self.pull_bytes > 0.0 && self.push_bytes > 0.0) {
            return Err(EngineError::Config("update sizes must be positive".into()));
        }
        if !(self.stall_timeout_s > 0.0) {
            return Err(EngineError::Config("stall_timeout_s must be positive".into()));
        }
        Ok(())
    }
}

/// Where bandwidth traces come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TraceSource {
    Synthetic(MobilityTraceSpec),
    Sinusoid(SinusoidTraceSpec),
    Directory {
        path: PathBuf,
        #[serde(default)]
        format: TraceFormat,
    },
}

impl Default for TraceSource {
    fn default() -> Self {
        TraceSource::Synthetic(MobilityTraceSpec::default())
    }
}

/// Whether clients see their trace as recorded or flattened to its mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TraceMode {
    #[default]
    Dynamic,
    Static,
}

/// Everything a run needs that does not depend on the policy.
#[derive(Debug, Clone)]
pub struct Environment {
    pub population: Arc<Population>,
    pub traces: Arc<TraceStore>,
    pub profiles: Vec<ClientProfile>,
}

impl Environment {
    pub fn build(
        population: &PopulationSpec,
        traces: &TraceSource,
        mode: TraceMode,
        device: &DeviceSpec,
        seed: u64,
    ) -> Result<Self, EngineError> {
        device.validate()?;
        let population = learner::generate_population(population, seed)?;
        let clients = population.client_ids();
        let store = match traces {
            TraceSource::Synthetic(spec) => {
                let n = if spec.count == 0 {
                    clients.len()
                } else {
                    spec.count
                };
                TraceStore::new(spec.generate(seed, n), &clients)?
            }
            TraceSource::Sinusoid(spec) => {
                let traces = (0..clients.len() as u64)
                    .map(|i| spec.generate(derive_seed(seed, 0x7369_6e73, i)))
                    .collect();
                TraceStore::new(traces, &clients)?
            }
            TraceSource::Directory { path, format } => {
                TraceStore::load_dir(path, *format, &clients)?
            }
        };
        let store = match mode {
            TraceMode::Dynamic => store,
            TraceMode::Static => store.flattened(),
        };
        Self::with_traces(Arc::new(population), Arc::new(store), device, seed)
    }

    /// Builds profiles for an existing population and trace store.
    pub fn with_traces(
        population: Arc<Population>,
        traces: Arc<TraceStore>,
        device: &DeviceSpec,
        seed: u64,
    ) -> Result<Self, EngineError> {
        let (lo, hi) = device.compute_latency;
        let profiles = population
            .client_ids()
            .into_iter()
            .map(|c| {
                let mut rng = stream_rng(seed, 0x6465_7663, c.0 as u64);
                let u: f64 = rng.random();
                let latency = (lo.ln() + u * (hi.ln() - lo.ln())).exp();
                let trace_id = traces
                    .assignment()
                    .get(&c)
                    .cloned()
                    .ok_or(TraceError::Unbound(c))?;
                Ok(ClientProfile {
                    client: c,
                    trace_id,
                    per_sample_latency: latency,
                    pull_bytes: device.pull_bytes,
                    push_bytes: device.push_bytes,
                })
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        Ok(Self {
            population,
            traces,
            profiles,
        })
    }

    pub fn client_ids(&self) -> Vec<ClientId> {
        self.profiles.iter().map(|p| p.client).collect()
    }

    pub fn trace_of(&self, client: ClientId) -> Result<&BandwidthTrace, EngineError> {
        Ok(self.traces.trace_for(client)?)
    }
}

/// Compute and communication seconds of one client round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientTiming {
    pub comp_seconds: f64,
    pub comm_seconds: f64,
}

impl ClientTiming {
    pub fn total(&self) -> f64 {
        self.comp_seconds + self.comm_seconds
    }
}

/// Download at `start`, compute, then upload; both transfers integrate the
/// client's trace from the moment they begin.
pub fn client_round_time(
    profile: &ClientProfile,
    trace: &BandwidthTrace,
    start: f64,
    sample_count: usize,
    epochs: usize,
    stall_timeout: f64,
) -> Result<ClientTiming, TraceError> {
    let comp = (sample_count * epochs) as f64 * profile.per_sample_latency;
    let pull = trace.transfer_time(start, profile.pull_bytes, stall_timeout)?;
    let push = trace.transfer_time(start + pull + comp, profile.push_bytes, stall_timeout)?;
    Ok(ClientTiming {
        comp_seconds: comp,
        comm_seconds: pull + push,
    })
}

/// Median of the values; an even count averages the middle pair.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Configuration of a single (policy, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub policy: SelectionPolicy,
    pub scheduler: SchedulerConfig,
    pub training: TrainParams,
    pub aggregator: AggregatorConfig,
    pub stall_timeout_s: f64,
    pub warmup_rounds: usize,
    pub eval_every: usize,
    pub max_rounds: usize,
    pub max_sim_hours: f64,
    pub target_accuracy: f64,
    pub milestones: Vec<f64>,
    pub stop_at_target: bool,
}

impl RunConfig {
    pub fn new(policy: SelectionPolicy, seed: u64) -> Self {
        Self {
            seed,
            policy,
            scheduler: SchedulerConfig::default(),
            training: TrainParams::default(),
            aggregator: AggregatorConfig::default(),
            stall_timeout_s: DEFAULT_STALL_TIMEOUT_S,
            warmup_rounds: 5,
            eval_every: 10,
            max_rounds: 500,
            max_sim_hours: 1e6,
            target_accuracy: 0.5,
            milestones: Vec::new(),
            stop_at_target: true,
        }
    }

    pub fn validate(&self, population: usize) -> Result<(), EngineError> {
        self.policy.validate(population)?;
        self.scheduler.validate()?;
        self.training.validate()?;
        self.aggregator.validate()?;
        if self.eval_every == 0 {
            return Err(EngineError::Config("eval_every must be >= 1".into()));
        }
        if self.policy.preferred_duration.is_none() && self.warmup_rounds == 0 {
            return Err(EngineError::Config(
                "preferred_duration is required when warmup_rounds = 0".into(),
            ));
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy < 1.0) {
            return Err(EngineError::Config("target_accuracy must lie in (0, 1)".into()));
        }
        if !(self.max_sim_hours > 0.0) {
            return Err(EngineError::Config("max_sim_hours must be positive".into()));
        }
        if !(self.stall_timeout_s > 0.0) {
            return Err(EngineError::Config("stall_timeout_s must be positive".into()));
        }
        Ok(())
    }
}

/// Per-client line of a round record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStat {
    pub client: ClientId,
    pub comm_s: f64,
    pub comp_s: f64,
    pub effective_bw: f64,
    pub dropped: bool,
}

/// Append-only log entry for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub wall_clock_start: f64,
    pub wall_clock_end: f64,
    pub cohort: Vec<ClientId>,
    pub clients: Vec<ClientRoundStat>,
    pub test_accuracy: Option<f64>,
    pub selection_frozen: bool,
    pub warmup: bool,
    pub window: Option<usize>,
}

/// Accuracy evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: u64,
    pub wall_clock_s: f64,
    pub accuracy: f64,
}

/// First time the curve reaches `target`, interpolating linearly between
/// the evaluation that crossed it and the one before.
pub fn time_to_accuracy(curve: &[CurvePoint], target: f64) -> Option<f64> {
    let i = curve.iter().position(|p| p.accuracy >= target)?;
    if i == 0 {
        return Some(curve[0].wall_clock_s);
    }
    let (a, b) = (curve[i - 1], curve[i]);
    let frac = (target - a.accuracy) / (b.accuracy - a.accuracy);
    Some(a.wall_clock_s + frac * (b.wall_clock_s - a.wall_clock_s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Milestone {
    pub accuracy: f64,
    pub time_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    TargetReached,
    RoundBudget,
    TimeBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds: u64,
    pub wall_clock_s: f64,
    pub final_accuracy: Option<f64>,
    pub time_to_target: Option<f64>,
    pub milestones: Vec<Milestone>,
    pub stop_reason: StopReason,
    pub budget_exhausted: bool,
    pub preferred_duration: Option<f64>,
    pub dropped_clients: usize,
    pub forecast_mae: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<RoundRecord>,
    pub curve: Vec<CurvePoint>,
    pub boundaries: Vec<BoundaryOutcome>,
    pub summary: RunSummary,
}

/// Outcome of one client's participation before aggregation.
enum Participation {
    Completed {
        timing: ClientTiming,
        report: LocalTrainReport,
    },
    Dropped {
        comp_seconds: f64,
    },
}

/// Mutable state of one run.
pub struct Simulation {
    env: Environment,
    cfg: RunConfig,
    population: Vec<ClientId>,
    members: BTreeSet<ClientId>,
    model: GlobalModel,
    aggregator: AggregatorState,
    clock: f64,
    round: u64,
    rng: ChaCha8Rng,
    cohort: Vec<ClientId>,
    greedy: GreedyState,
    window: WindowState,
    thresholds: Option<DurationThresholds>,
    warmup_client_durations: Vec<f64>,
    last_aggregated: Vec<ClientId>,
    boundaries: Vec<BoundaryOutcome>,
    dropped_clients: usize,
}

impl Simulation {
    pub fn new(env: Environment, cfg: RunConfig) -> Result<Self, EngineError> {
        let population = env.client_ids();
        cfg.validate(population.len())?;
        let dim = env.population.test.dim();
        let classes = env.population.classes;
        let model = GlobalModel::random(dim, classes, cfg.training.init_scale, cfg.seed);
        let aggregator = AggregatorState::new(cfg.aggregator, model.params.len());
        let thresholds = cfg
            .policy
            .preferred_duration
            .filter(|_| cfg.warmup_rounds == 0)
            .map(|t| cfg.scheduler.duration_thresholds(t));
        Ok(Self {
            members: population.iter().copied().collect(),
            population,
            model,
            aggregator,
            clock: 0.0,
            round: 0,
            rng: stream_rng(cfg.seed, 0x7365_6c65, 0),
            cohort: Vec::new(),
            greedy: GreedyState::default(),
            window: WindowState::new(&cfg.scheduler),
            thresholds,
            warmup_client_durations: Vec::new(),
            last_aggregated: Vec::new(),
            boundaries: Vec::new(),
            dropped_clients: 0,
            env,
            cfg,
        })
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn model(&self) -> &GlobalModel {
        &self.model
    }

    pub fn window_state(&self) -> &WindowState {
        &self.window
    }

    pub fn thresholds(&self) -> Option<DurationThresholds> {
        self.thresholds
    }

    /// Clients whose updates entered the last aggregation.
    pub fn last_aggregated(&self) -> &[ClientId] {
        &self.last_aggregated
    }

    pub fn boundaries(&self) -> &[BoundaryOutcome] {
        &self.boundaries
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn evaluate(&self) -> Result<f64, EngineError> {
        Ok(learner::evaluate(&self.model, &self.env.population.test)?)
    }

    fn in_warmup(&self) -> bool {
        (self.round as usize) < self.cfg.warmup_rounds
    }

    fn resolve_thresholds(&mut self) -> DurationThresholds {
        if let Some(t) = self.thresholds {
            return t;
        }
        let preferred = self.cfg.policy.preferred_duration.unwrap_or_else(|| {
            let per_client = median(&self.warmup_client_durations).unwrap_or(1.0);
            (PREFERRED_DURATION_FACTOR * per_client).max(f64::MIN_POSITIVE)
        });
        let t = self.cfg.scheduler.duration_thresholds(preferred);
        self.thresholds = Some(t);
        t
    }

    /// Picks the cohort for the coming round. Returns whether selection was
    /// frozen (cohort reused).
    fn choose_cohort(&mut self) -> Result<bool, EngineError> {
        let k = self.cfg.policy.k;
        if self.in_warmup() {
            self.cohort = selection::select_random(&self.population, k, &mut self.rng)?;
            return Ok(false);
        }
        let thresholds = self.resolve_thresholds();
        let policy = self.cfg.policy;
        match policy.kind {
            PolicyKind::Random => {
                self.cohort = selection::select_random(&self.population, k, &mut self.rng)?;
                Ok(false)
            }
            PolicyKind::UtilityGreedy => {
                let feedback = self
                    .greedy
                    .feedback(thresholds.preferred, policy.penalty_exponent)?;
                self.cohort = selection::select_greedy(
                    &feedback,
                    &self.population,
                    k,
                    policy.epsilon,
                    &mut self.rng,
                )?;
                Ok(false)
            }
            PolicyKind::Dynamicfl => {
                if self.window.frozen() {
                    return Ok(true);
                }
                let outcome = self.window.window_boundary_step(
                    self.round + 1,
                    &self.population,
                    k,
                    policy.epsilon,
                    policy.penalty_exponent,
                    &self.cfg.scheduler,
                    &thresholds,
                    &mut self.rng,
                )?;
                self.cohort = outcome.cohort.clone();
                self.boundaries.push(outcome);
                Ok(false)
            }
        }
    }

    fn participate(
        &self,
        client: ClientId,
        start: f64,
        round: u64,
    ) -> Result<Participation, EngineError> {
        let profile = &self.env.profiles[client.0 as usize];
        debug_assert_eq!(profile.client, client);
        let partition = self
            .env
            .population
            .partition(client)
            .ok_or(TraceError::Unbound(client))?;
        let trace = self.env.trace_of(client)?;
        let n = partition.data.len();
        match client_round_time(
            profile,
            trace,
            start,
            n,
            self.cfg.training.epochs,
            self.cfg.stall_timeout_s,
        ) {
            Ok(timing) => {
                let seed = derive_seed(self.cfg.seed, 0x726f_756e, round);
                let report = learner::local_train(
                    &self.model,
                    partition,
                    &self.cfg.training,
                    profile.per_sample_latency,
                    seed,
                )?;
                Ok(Participation::Completed { timing, report })
            }
            Err(TraceError::StalledTransfer { .. }) => Ok(Participation::Dropped {
                comp_seconds: (n * self.cfg.training.epochs) as f64 * profile.per_sample_latency,
            }),
            Err(e) => Err(e.into()),
        }
    }

    /// Runs one synchronous round.
    pub fn step(&mut self) -> Result<RoundRecord, EngineError> {
        let warmup = self.in_warmup();
        let frozen = self.choose_cohort()?;
        let round = self.round + 1;
        let start = self.clock;

        let outcomes: Vec<Participation> = self
            .cohort
            .par_iter()
            .map(|&c| self.participate(c, start, round))
            .collect::<Result<_, _>>()?;

        let mut stats = Vec::with_capacity(outcomes.len());
        let mut observations = Vec::with_capacity(outcomes.len());
        let mut reports = Vec::new();
        let mut advance: f64 = 0.0;
        let traffic = |c: ClientId| {
            let p = &self.env.profiles[c.0 as usize];
            p.pull_bytes + p.push_bytes
        };
        for (&client, outcome) in self.cohort.iter().zip(&outcomes) {
            match outcome {
                Participation::Completed { timing, report } => {
                    let effective_bw = traffic(client) / timing.comm_seconds;
                    advance = advance.max(timing.total());
                    stats.push(ClientRoundStat {
                        client,
                        comm_s: timing.comm_seconds,
                        comp_s: timing.comp_seconds,
                        effective_bw,
                        dropped: false,
                    });
                    observations.push(RoundObservation {
                        client,
                        duration: timing.total(),
                        effective_bw,
                        summary: Some(LossSummary::from_report(report)),
                    });
                    reports.push(report);
                }
                Participation::Dropped { comp_seconds } => {
                    self.dropped_clients += 1;
                    stats.push(ClientRoundStat {
                        client,
                        comm_s: self.cfg.stall_timeout_s,
                        comp_s: *comp_seconds,
                        effective_bw: 0.0,
                        dropped: true,
                    });
                    observations.push(RoundObservation {
                        client,
                        duration: self.cfg.stall_timeout_s,
                        effective_bw: 0.0,
                        summary: None,
                    });
                }
            }
        }
        if reports.is_empty() {
            return Err(EngineError::AllClientsDropped { round });
        }
        self.aggregator.aggregate(&mut self.model, &reports)?;
        self.last_aggregated = reports.iter().map(|r| r.client).collect();
        if !self.model.is_finite() {
            return Err(LearnerError::NonFiniteLoss(self.last_aggregated[0]).into());
        }

        self.clock = start + advance;
        self.round = round;
        let stale_decay = self.cfg.scheduler.stale_decay;
        self.greedy.observe(round, &observations, stale_decay);
        if warmup {
            self.warmup_client_durations.extend(
                stats
                    .iter()
                    .filter(|c| !c.dropped)
                    .map(|c| c.comm_s + c.comp_s),
            );
            self.window.observe_warmup_round(
                round,
                &observations,
                advance,
                &self.members,
                stale_decay,
            )?;
        } else if self.cfg.policy.kind == PolicyKind::Dynamicfl {
            self.window
                .observe_round(round, &observations, advance, &self.members)?;
        }

        let test_accuracy = if round % self.cfg.eval_every as u64 == 0 {
            Some(self.evaluate()?)
        } else {
            None
        };
        Ok(RoundRecord {
            round,
            wall_clock_start: start,
            wall_clock_end: self.clock,
            cohort: self.cohort.clone(),
            clients: stats,
            test_accuracy,
            selection_frozen: frozen,
            warmup,
            window: (self.cfg.policy.kind == PolicyKind::Dynamicfl && !warmup)
                .then(|| self.window.window()),
        })
    }

    /// Runs until the target is reached or a budget runs out.
    pub fn run(mut self) -> Result<RunResult, EngineError> {
        let budget_s = self.cfg.max_sim_hours * 3600.0;
        let mut records = Vec::new();
        let mut curve = vec![CurvePoint {
            round: 0,
            wall_clock_s: 0.0,
            accuracy: self.evaluate()?,
        }];
        let mut stop = StopReason::RoundBudget;
        while (self.round as usize) < self.cfg.max_rounds {
            let record = self.step()?;
            if let Some(acc) = record.test_accuracy {
                curve.push(CurvePoint {
                    round: record.round,
                    wall_clock_s: record.wall_clock_end,
                    accuracy: acc,
                });
            }
            records.push(record);
            let last = curve[curve.len() - 1];
            if self.cfg.stop_at_target
                && last.round == self.round
                && last.accuracy >= self.cfg.target_accuracy
            {
                stop = StopReason::TargetReached;
                break;
            }
            if self.clock >= budget_s {
                stop = StopReason::TimeBudget;
                break;
            }
        }
        if curve[curve.len() - 1].round != self.round {
            curve.push(CurvePoint {
                round: self.round,
                wall_clock_s: self.clock,
                accuracy: self.evaluate()?,
            });
        }
        let time_to_target = time_to_accuracy(&curve, self.cfg.target_accuracy);
        let milestones = self
            .cfg
            .milestones
            .iter()
            .map(|&a| Milestone {
                accuracy: a,
                time_s: time_to_accuracy(&curve, a),
            })
            .collect();
        let summary = RunSummary {
            rounds: self.round,
            wall_clock_s: self.clock,
            final_accuracy: (self.round > 0).then(|| curve[curve.len() - 1].accuracy),
            time_to_target,
            milestones,
            stop_reason: stop,
            budget_exhausted: stop != StopReason::TargetReached,
            preferred_duration: self.thresholds.map(|t| t.preferred),
            dropped_clients: self.dropped_clients,
            forecast_mae: self.window.forecast_mae(),
        };
        Ok(RunResult {
            records,
            curve,
            boundaries: self.boundaries,
            summary,
        })
    }
}

/// Builds and runs a simulation.
pub fn run_experiment(env: Environment, cfg: RunConfig) -> Result<RunResult, EngineError> {
    Simulation::new(env, cfg)?.run()
}
