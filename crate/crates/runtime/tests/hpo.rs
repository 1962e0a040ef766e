use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use gfm_core::container::Group;
use gfm_core::model::{Aggregation, ModelConfig};
use gfm_core::preprocess::{generate_synthetic, SyntheticConfig};
use gfm_core::telemetry::SamplerConfig;
use gfm_runtime::hpo::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 3 x 6 x 5 x 2 x 4 x 4 = 2,880 configurations.
fn discrete_space() -> SearchSpace {
    SearchSpace {
        mpnn_width: Dimension::Choices(vec![100, 200, 500, 1000, 2000]),
        fc_width: Dimension::Choices(vec![300, 500, 700, 1000]),
        batch_size: Dimension::Choices(vec![16, 32, 64, 128]),
        ..SearchSpace::default()
    }
}

/// Deterministic stand-in for a validation MAE surface: a smooth bowl in the
/// (log-)scaled integers plus an offset per aggregation.
fn objective(c: &ModelConfig) -> f64 {
    let kind = match c.mpnn_kind {
        Aggregation::Mean => 0.0,
        Aggregation::Sum => 0.01,
        Aggregation::Max => 0.03,
    };
    let l = (c.mpnn_layers as f64 - 4.0) / 5.0;
    let h = ((c.mpnn_width as f64).ln() - 1000f64.ln()) / 20f64.ln();
    let f = if c.fc_layers == 3 { 0.0 } else { 0.01 };
    let g = (c.fc_width as f64 - 700.0) / 700.0;
    let b = ((c.batch_size as f64).ln() - 32f64.ln()) / 8f64.ln();
    0.1 + kind + 0.2 * l * l + 0.15 * h * h + f + 0.05 * g * g + 0.1 * b * b
}

struct Synthetic {
    runs: AtomicUsize,
}

impl TrialRunner for Synthetic {
    fn run(&self, req: &TrialRequest) -> Result<TrialResult, String> {
        self.runs.fetch_add(1, Ordering::Relaxed);
        // one unit of "energy" per epoch, scaled by width
        let mut epochs = 0;
        for _ in 0..req.fidelity_epochs {
            epochs += 1;
        }
        Ok(TrialResult {
            validation_mae: Some(objective(&req.config)),
            epochs,
            energy_kwh: epochs as f64 * req.config.mpnn_width as f64 * 1e-6,
            status: TrialStatus::Completed,
        })
    }
}

fn synthetic() -> Synthetic {
    Synthetic { runs: AtomicUsize::new(0) }
}

#[test]
fn bo_reaches_the_enumerated_optimum() {
    let space = discrete_space();
    let all = space.enumerate();
    assert_eq!(all.len(), 2880);
    let optimum = all.iter().map(objective).fold(f64::INFINITY, f64::min);
    let mut hits = 0;
    for seed in 0..10 {
        let runner = synthetic();
        let opts = HpoOptions { workers: 4, max_trials: 60, fidelity_epochs: 10, seed, ..Default::default() };
        let out = hpo_loop(&space, &runner, &opts, &[], &mut |_| {}).unwrap();
        assert_eq!(out.trials.len(), 60);
        assert!(out.trials.iter().all(|t| t.fidelity_epochs == 10 && space.contains(&t.config)));
        let best = out.best().unwrap().validation_mae.unwrap();
        println!("seed {seed}: best {best:.5} (optimum {optimum:.5})");
        if best <= optimum * 1.05 {
            hits += 1;
        }
    }
    assert!(hits >= 8, "{hits}/10 searches within 5% of the optimum");
}

#[test]
fn random_search_baseline_is_weaker() {
    // sanity: the objective is not trivially solved by the warm-up alone
    let space = discrete_space();
    let optimum = space.enumerate().iter().map(objective).fold(f64::INFINITY, f64::min);
    let hits = (0..10)
        .filter(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let best = (0..60).map(|_| objective(&space.sample(&mut rng))).fold(f64::INFINITY, f64::min);
            best <= optimum * 1.05
        })
        .count();
    assert!(hits < 8, "random search alone hit {hits}/10");
}

#[test]
fn categorical_frequencies_are_uniform() {
    let space = SearchSpace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts = BTreeMap::new();
    let n = 10_000;
    for _ in 0..n {
        *counts.entry(format!("{:?}", space.sample(&mut rng).mpnn_kind)).or_insert(0usize) += 1;
    }
    let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    assert_eq!(counts.len(), 3);
    for (k, c) in counts {
        assert!((c as f64 - n as f64 / 3.0).abs() <= 3.0 * sigma, "{k}: {c}");
    }
}

fn record(id: u64, config: ModelConfig, mae: f64) -> TrialRecord {
    TrialRecord {
        trial_id: id,
        config,
        validation_mae: Some(mae),
        fidelity_epochs: 10,
        wall_time_s: 1.0,
        energy_kwh: 0.0,
        status: TrialStatus::Completed,
        worker: 0,
        started_s: id as f64,
        finished_s: id as f64 + 1.0,
        error: None,
    }
}

/// Brute-force EI with an independent k-NN: k = 5, inverse-distance weights.
fn oracle_ei(space: &SearchSpace, hist: &[TrialRecord], c: &ModelConfig) -> (f64, f64) {
    let x = space.encode(c);
    let mut d: Vec<(f64, f64)> = hist
        .iter()
        .map(|t| {
            let y = space.encode(&t.config);
            let dist = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            (dist, t.validation_mae.unwrap())
        })
        .collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let near = &d[..5.min(d.len())];
    let w: Vec<f64> = near.iter().map(|(dist, _)| 1.0 / (dist + 1e-9)).collect();
    let ws: f64 = w.iter().sum();
    let mu = near.iter().zip(&w).map(|(p, w)| p.1 * w).sum::<f64>() / ws;
    let s = (near.iter().zip(&w).map(|(p, w)| w * (p.1 - mu).powi(2)).sum::<f64>() / ws).sqrt() + 1e-6;
    let best = hist.iter().map(|t| t.validation_mae.unwrap()).fold(f64::INFINITY, f64::min);
    let z = (best - mu) / s;
    let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = 0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2);
    ((best - mu) * cdf + s * phi, mu)
}

#[test]
fn warm_started_suggestion_is_the_ei_argmax() {
    let space = discrete_space();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hist: Vec<TrialRecord> = (0..12)
        .map(|i| {
            let c = space.sample(&mut rng);
            let m = objective(&c);
            record(i, c, m)
        })
        .collect();
    let mut a = ChaCha8Rng::seed_from_u64(99);
    let mut b = a.clone();
    let sug = suggest(&space, &hist, &[], 256, 8, &mut a);
    let cands: Vec<ModelConfig> = candidate_pool(&space, &hist, 256, &mut b)
        .into_iter()
        .filter(|c| hist.iter().all(|t| &t.config != c))
        .collect();
    let scored: Vec<(f64, f64)> = cands.iter().map(|c| oracle_ei(&space, &hist, c)).collect();
    let (arg, _) = scored.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, s)| if s.0 > acc.1 { (i, s.0) } else { acc });
    assert_eq!(sug.config, cands[arg]);
    let ei = sug.expected_improvement.unwrap();
    assert!((ei - scored[arg].0).abs() <= 1e-9 * ei.abs().max(1e-12));
}

#[test]
fn suggestion_prefers_the_good_region() {
    let space = discrete_space();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut hist = Vec::new();
    for i in 0..20 {
        let mut c = space.sample(&mut rng);
        let good = i % 2 == 0;
        c.mpnn_layers = if good { 1 } else { 6 };
        hist.push(record(i, c, if good { 0.1 } else { 1.0 }));
    }
    let mean = hist.iter().map(|t| t.validation_mae.unwrap()).sum::<f64>() / hist.len() as f64;
    for seed in 0..5 {
        let s = suggest(&space, &hist, &[], 256, 8, &mut ChaCha8Rng::seed_from_u64(seed));
        assert!(s.predicted.unwrap().0 <= mean);
    }
}

#[test]
fn below_warmup_falls_back_to_random() {
    let space = discrete_space();
    let hist = vec![record(0, ModelConfig::default(), 0.5)];
    let s = suggest(&space, &hist, &[], 256, 8, &mut ChaCha8Rng::seed_from_u64(1));
    assert!(s.predicted.is_none());
    assert_eq!(s.config, space.sample(&mut ChaCha8Rng::seed_from_u64(1)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cumulative_min_is_prefix_minima(maes in prop::collection::vec(0.0f64..10.0, 1..100)) {
        let trials: Vec<_> = maes.iter().enumerate().map(|(i, &m)| record(i as u64, ModelConfig::default(), m)).collect();
        let curve = cumulative_min(&trials);
        prop_assert_eq!(curve.len(), maes.len());
        for (i, (t, v)) in curve.iter().enumerate() {
            let oracle = maes[..=i].iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(*v, oracle);
            prop_assert_eq!(*t, trials[i].finished_s);
        }
    }
}

#[test]
fn one_worker_runs_trials_sequentially() {
    let runner = synthetic();
    let opts = HpoOptions { workers: 1, max_trials: 3, ..Default::default() };
    let out = hpo_loop(&discrete_space(), &runner, &opts, &[], &mut |_| {}).unwrap();
    assert_eq!(out.trials.len(), 3);
    for w in out.trials.windows(2) {
        assert!(w[1].started_s >= w[0].finished_s);
    }
}

struct Sleepy;

impl TrialRunner for Sleepy {
    fn run(&self, req: &TrialRequest) -> Result<TrialResult, String> {
        std::thread::sleep(Duration::from_millis(20 + 37 * (req.trial_id % 5)));
        Ok(TrialResult {
            validation_mae: Some(objective(&req.config)),
            epochs: req.fidelity_epochs,
            energy_kwh: 0.0,
            status: TrialStatus::Completed,
        })
    }
}

#[test]
fn workers_stay_busy_and_bounded() {
    let opts = HpoOptions { workers: 4, max_trials: 24, ..Default::default() };
    let out = hpo_loop(&discrete_space(), &Sleepy, &opts, &[], &mut |_| {}).unwrap();
    let mut running = 0i32;
    let mut peak = 0;
    for e in &out.events {
        running += if e.kind == EventKind::Start { 1 } else { -1 };
        peak = peak.max(running);
        assert!(running >= 0);
    }
    assert_eq!(peak, 4);
    let mut by_worker: BTreeMap<usize, Vec<&TrialRecord>> = BTreeMap::new();
    for t in &out.trials {
        by_worker.entry(t.worker).or_default().push(t);
    }
    assert_eq!(by_worker.len(), 4);
    for trials in by_worker.values_mut() {
        trials.sort_by(|a, b| a.started_s.total_cmp(&b.started_s));
        for w in trials.windows(2) {
            let gap = w[1].started_s - w[0].finished_s;
            assert!((0.0..1.0).contains(&gap), "idle gap {gap}");
        }
    }
}

#[test]
fn budget_stops_new_starts() {
    let opts = HpoOptions { workers: 2, max_trials: 1000, budget_s: Some(0.3), ..Default::default() };
    let out = hpo_loop(&discrete_space(), &Sleepy, &opts, &[], &mut |_| {}).unwrap();
    assert!(out.trials.len() < 1000);
    for e in out.events.iter().filter(|e| e.kind == EventKind::Start) {
        assert!(e.t < 0.3 + 0.05, "start at {}", e.t);
    }
}

struct Flaky;

impl TrialRunner for Flaky {
    fn run(&self, req: &TrialRequest) -> Result<TrialResult, String> {
        match req.trial_id % 4 {
            1 => Err("worker exited with status 9".into()),
            2 => panic!("boom"),
            3 => Ok(TrialResult { validation_mae: None, epochs: 3, energy_kwh: 0.0, status: TrialStatus::FailedNan }),
            _ => Ok(TrialResult {
                validation_mae: Some(objective(&req.config)),
                epochs: req.fidelity_epochs,
                energy_kwh: 0.0,
                status: TrialStatus::Completed,
            }),
        }
    }
}

#[test]
fn crashed_trials_are_marked_and_slots_reused() {
    let opts = HpoOptions { workers: 2, max_trials: 16, ..Default::default() };
    let mut seen = Vec::new();
    let out = hpo_loop(&discrete_space(), &Flaky, &opts, &[], &mut |r| seen.push(r.trial_id)).unwrap();
    assert_eq!(out.trials.len(), 16);
    assert_eq!(seen.len(), 16);
    let failed = out.trials.iter().filter(|t| t.status == TrialStatus::Failed).count();
    assert_eq!(failed, 8);
    assert!(out.trials.iter().filter(|t| t.status != TrialStatus::Completed).all(|t| t.validation_mae.is_none()));
    let nan = out.trials.iter().filter(|t| t.status == TrialStatus::FailedNan).count();
    assert_eq!(nan, 4);
    // penalized NaN trials are observations; crashes are not
    let obs = observations(&discrete_space(), &out.trials);
    assert_eq!(obs.len(), 8);
    let worst = out.trials.iter().filter_map(|t| t.validation_mae).fold(0.0, f64::max);
    assert_eq!(obs.iter().filter(|o| o.1 == 10.0 * worst).count(), 4);
}

#[test]
fn history_round_trip_and_restart() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("history.jsonl");
    let space = discrete_space();
    let opts = HpoOptions { workers: 2, max_trials: 10, seed: 1, ..Default::default() };
    let runner = synthetic();
    let first = hpo_loop(&space, &runner, &opts, &[], &mut |r| append_history(&path, r).unwrap()).unwrap();
    let loaded = read_history(&path).unwrap();
    assert_eq!(loaded, first.trials);

    // a crash mid-write leaves a partial final line
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"trial_id\": 99, \"conf");
    std::fs::write(&path, &text).unwrap();
    let loaded = read_history(&path).unwrap();
    assert_eq!(loaded.len(), 10);

    let second = hpo_loop(&space, &runner, &HpoOptions { max_trials: 5, ..opts.clone() }, &loaded, &mut |_| {}).unwrap();
    let ids: Vec<u64> = second.trials.iter().map(|t| t.trial_id).collect();
    assert!(ids.iter().all(|&i| (10..15).contains(&i)));
    assert!(second.trials.iter().all(|t| t.fidelity_epochs == 10));

    std::fs::write(&path, "{not json}\n{\"also\": 1}\n").unwrap();
    assert!(matches!(read_history(&path), Err(HpoError::History { line: 1, .. })));
}

fn tiny_data() -> Arc<BTreeMap<Group, Vec<gfm_core::GraphRecord>>> {
    let recs =
        generate_synthetic(&SyntheticConfig { count: 48, n_atoms_range: (3, 6), seed: 8, ..Default::default() }).unwrap();
    Arc::new(BTreeMap::from([(Group::Val, recs[..8].to_vec()), (Group::Train, recs[8..].to_vec())]))
}

fn tiny_space() -> SearchSpace {
    SearchSpace {
        mpnn_layers: Dimension::Choices(vec![1, 2]),
        mpnn_width: Dimension::Choices(vec![4, 8]),
        fc_width: Dimension::Choices(vec![8]),
        batch_size: Dimension::Choices(vec![8, 16]),
        ..SearchSpace::default()
    }
}

#[test]
fn training_runner_is_deterministic_and_constant_fidelity() {
    let mut runner = TrainingRunner::new(tiny_data());
    runner.ranks = 2;
    runner.telemetry = SamplerConfig { interval_s: 0.05, ..Default::default() };
    let cfg = sample_random(&tiny_space(), 4);
    let req = TrialRequest { trial_id: 0, config: cfg.clone(), fidelity_epochs: 3, worker: 0 };
    let a = runner.run(&req).unwrap();
    let b = runner.run(&TrialRequest { trial_id: 1, ..req.clone() }).unwrap();
    assert_eq!(a.status, TrialStatus::Completed);
    assert_eq!(a.epochs, 3);
    assert!((a.validation_mae.unwrap() - b.validation_mae.unwrap()).abs() <= 1e-12);
    assert!(a.energy_kwh > 0.0);

    let zero = runner.run(&TrialRequest { fidelity_epochs: 0, ..req }).unwrap();
    assert_eq!(zero.epochs, 0);
    let untrained = gfm_core::Model::init(&cfg);
    let data = tiny_data();
    let val = &data[&Group::Val];
    let s = untrained.evaluate(val);
    let comps: usize = val.iter().map(|r| 3 * r.n_atoms()).sum();
    let oracle = s.abs_energy_per_atom / val.len() as f64 + s.abs_force / comps as f64;
    assert!((zero.validation_mae.unwrap() - oracle).abs() <= 1e-12 * oracle);
}

#[test]
fn training_runner_in_the_loop() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runner = TrainingRunner::new(tiny_data());
    runner.sample_log_dir = Some(tmp.path().to_path_buf());
    runner.telemetry = SamplerConfig { interval_s: 0.05, ..Default::default() };
    let opts = HpoOptions { workers: 2, max_trials: 4, fidelity_epochs: 2, ..Default::default() };
    let out = hpo_loop(&tiny_space(), &runner, &opts, &[], &mut |_| {}).unwrap();
    assert_eq!(out.trials.len(), 4);
    for t in &out.trials {
        assert_eq!(t.status, TrialStatus::Completed);
        assert_eq!(t.fidelity_epochs, 2);
        assert!(t.validation_mae.unwrap().is_finite());
        assert!(tmp.path().join(format!("trial-{}.csv", t.trial_id)).exists());
    }
}
