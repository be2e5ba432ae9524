mod common;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedsim::engine::{DeviceSpec, Environment, RunConfig, Simulation, TraceMode, TraceSource};
use fedsim::learner::{evaluate, generate_population, GlobalModel, PopulationSpec};
use fedsim::predictor::{prediction_error, PredictorSpec};
use fedsim::scheduler::{feedback_factor, SchedulerConfig};
use fedsim::selection::{compute_utility, select_random, LossSummary, PolicyKind, SelectionPolicy};
use fedsim::synth::SinusoidTraceSpec;
use fedsim::trace::BandwidthTrace;
use fedsim::ClientId;

#[test]
fn two_step_transfer_matches_hand_integration() {
    let trace = BandwidthTrace::new("h", &[(0.0, 1e6), (5.0, 3e6)]).unwrap();
    let got = trace.transfer_time(0.0, 8e6, f64::INFINITY).unwrap();
    let expected = common::transfer_time(&trace, 0.0, 8e6);
    assert!(common::rel_err(got, expected) < 1e-12);
    assert!((got - 6.0).abs() < 1e-12);
}

#[test]
fn utility_and_factor_examples_match_longhand() {
    let s = LossSummary::from_losses(&[3.0, 4.0]);
    for (t, alpha) in [(1.0, 2.0), (2.0, 1.0), (7.5, 0.0)] {
        let got = compute_utility(&s, t, 1.0, 1.0, alpha).unwrap();
        let expected = common::utility(&[3.0, 4.0], 1.0, t, 1.0, alpha);
        assert!(common::rel_err(got, expected) < 1e-12);
    }
    let cfg = SchedulerConfig {
        th_low: 0.3,
        th_high: 0.8,
        ..Default::default()
    };
    for x in [0.05, 0.1, 0.3, 0.5, 0.8, 0.95] {
        let got = feedback_factor(x, &cfg).unwrap();
        assert!(common::rel_err(got, common::factor(x, 0.3, 0.8, 0.0)) < 1e-12, "x={x}");
    }
}

#[test]
fn longer_ar_history_helps_on_noisy_sinusoids() {
    let spec = PredictorSpec::WindowedAr {
        order: 2,
        fit_window: 64,
    };
    // one-second samples of a 10 s cycle: the per-sample swing dominates the
    // noise, which is the regime a one-step forecaster can exploit
    let family = SinusoidTraceSpec {
        period: 10.0,
        noise_sd: 5e4,
        ..Default::default()
    };
    for seed in 1..=5 {
        let trace = family.generate(seed);
        let short = prediction_error(&spec, &trace, 2).unwrap();
        let long = prediction_error(&spec, &trace, 20).unwrap();
        assert!(long < short, "seed {seed}: {long} !< {short}");
    }
}

#[test]
fn huge_concentration_gives_near_uniform_clients() {
    let spec = PopulationSpec {
        n_clients: 20,
        classes: 5,
        dirichlet_alpha: 1e6,
        samples_per_client: (1000, 1000),
        ..Default::default()
    };
    let pop = generate_population(&spec, 11).unwrap();
    for part in &pop.partitions {
        let mut hist = vec![0usize; spec.classes];
        for &y in part.data.labels() {
            hist[y] += 1;
        }
        let n = part.data.len() as f64;
        for (c, &count) in hist.iter().enumerate() {
            let share = count as f64 / n;
            assert!(
                (share - 0.2).abs() <= 0.05,
                "client {} class {c}: {share}",
                part.client
            );
        }
    }
}

#[test]
fn zero_model_scores_chance_and_centre_model_separates() {
    let spec = PopulationSpec {
        n_clients: 10,
        center_spread: 4.0,
        ..Default::default()
    };
    let pop = generate_population(&spec, 5).unwrap();
    // class-balanced test set, ties to the lowest index
    let chance = 1.0 / spec.classes as f64;
    let zero = evaluate(&GlobalModel::zeros(spec.dim, spec.classes), &pop.test).unwrap();
    assert!((zero - chance).abs() <= 0.05, "{zero}");
    let centre = evaluate(&GlobalModel::from_centers(&pop.centers), &pop.test).unwrap();
    assert!(centre >= 0.95, "{centre}");
}

#[test]
fn random_selection_is_uniform() {
    let population: Vec<ClientId> = (0..4).map(ClientId).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = BTreeMap::new();
    let draws = 10_000;
    for _ in 0..draws {
        let pick = select_random(&population, 1, &mut rng).unwrap();
        *counts.entry(pick[0]).or_insert(0usize) += 1;
    }
    for c in &population {
        let f = counts[c] as f64 / draws as f64;
        assert!((f - 0.25).abs() <= 0.02, "{c}: {f}");
    }
}

#[test]
fn communication_dominates_round_time() {
    let seed = 1;
    let env = Environment::build(
        &PopulationSpec::default(),
        &TraceSource::default(),
        TraceMode::Dynamic,
        &DeviceSpec::default(),
        seed,
    )
    .unwrap();
    let mut cfg = RunConfig::new(SelectionPolicy::new(PolicyKind::Random), seed);
    cfg.max_rounds = 30;
    cfg.stop_at_target = false;
    let result = Simulation::new(env, cfg).unwrap().run().unwrap();
    let mut per_client: BTreeMap<ClientId, Vec<f64>> = BTreeMap::new();
    for rec in &result.records {
        for c in rec.clients.iter().filter(|c| !c.dropped) {
            per_client
                .entry(c.client)
                .or_default()
                .push(c.comm_s / (c.comm_s + c.comp_s));
        }
    }
    let medians: Vec<f64> = per_client
        .values()
        .map(|v| fedsim::engine::median(v).unwrap())
        .collect();
    let share = fedsim::engine::median(&medians).unwrap();
    assert!((0.8..=0.95).contains(&share), "comm share {share}");
}

#[test]
fn budget_zero_gives_no_records() {
    let env = Environment::build(
        &PopulationSpec {
            n_clients: 20,
            ..Default::default()
        },
        &TraceSource::default(),
        TraceMode::Dynamic,
        &DeviceSpec::default(),
        3,
    )
    .unwrap();
    let mut policy = SelectionPolicy::new(PolicyKind::Random);
    policy.k = 5;
    let mut cfg = RunConfig::new(policy, 3);
    cfg.max_rounds = 0;
    let result = Simulation::new(env, cfg).unwrap().run().unwrap();
    assert!(result.records.is_empty());
    assert!(result.summary.budget_exhausted);
}
