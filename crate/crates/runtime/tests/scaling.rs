use gfm_core::model::ModelConfig;
use gfm_core::preprocess::{generate_synthetic, SyntheticConfig};
use gfm_runtime::scaling::*;
use gfm_runtime::timing::PhaseClock;

fn model() -> ModelConfig {
    ModelConfig { mpnn_layers: 2, mpnn_width: 32, fc_width: 32, batch_size: 16, ..Default::default() }
}

fn cpu() -> ScalingOptions {
    ScalingOptions { clock: PhaseClock::ThreadCpu, ..Default::default() }
}

fn uniform(count: usize) -> SyntheticConfig {
    SyntheticConfig { count, n_atoms_range: (10, 10), seed: 1, ..Default::default() }
}

#[test]
fn single_rank_baseline() {
    let recs = generate_synthetic(&uniform(200)).unwrap();
    let rep = run_strong_scaling(&recs, &[1], &model(), &cpu()).unwrap();
    assert_eq!(rep.rows.len(), 1);
    assert!(rep.rows[0].lif.values().all(|&v| v == 1.0));
    assert!(rep.rows[0].wait_fraction.values().all(|&v| v == 0.0));
}

#[test]
fn rank_counts_beyond_capability_are_rejected() {
    let recs = generate_synthetic(&uniform(20)).unwrap();
    let opts = ScalingOptions { max_ranks: 4, ..cpu() };
    assert!(matches!(run_strong_scaling(&recs, &[1, 8], &model(), &opts), Err(ScalingError::Config(_))));
    assert!(matches!(run_strong_scaling(&recs, &[], &model(), &opts), Err(ScalingError::Config(_))));
}

#[test]
fn report_structure_is_deterministic_and_accounted() {
    let recs = generate_synthetic(&uniform(300)).unwrap();
    let a = run_strong_scaling(&recs, &[1, 2, 3], &model(), &cpu()).unwrap();
    let b = run_strong_scaling(&recs, &[1, 2, 3], &model(), &cpu()).unwrap();
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!((x.ranks, x.samples, x.timings.len()), (y.ranks, y.samples, y.timings.len()));
        assert_eq!(x.lif.keys().collect::<Vec<_>>(), y.lif.keys().collect::<Vec<_>>());
        assert_eq!(x.samples, 300);
    }
    for row in &a.rows {
        for t in row.timings.iter().flatten() {
            assert!(t.accounted() <= t.epoch * 1.05, "rank {} accounted {} of {}", t.rank, t.accounted(), t.epoch);
            assert!(row.lif.values().all(|&v| v >= 1.0));
        }
    }
    let mut csv = Vec::new();
    a.write_phase_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 1 + 2 + 3);
    assert!(text.starts_with("mode,ranks,timed_epoch,rank,dataload,forward,backward,sync,epoch\n"));
}

#[test]
fn weak_scaling_keeps_per_rank_load() {
    let rep = run_weak_scaling(&uniform(0), 40, &[1, 2], &model(), &cpu()).unwrap();
    assert_eq!(rep.rows.iter().map(|r| r.samples).collect::<Vec<_>>(), vec![40, 80]);
    let one = run_weak_scaling(&uniform(0), 40, &[1], &model(), &cpu()).unwrap();
    assert_eq!(one.rows.len(), 1);
    assert_eq!(DEFAULT_PER_RANK, 3500);
}

/// Ideal weak scaling is flat; 1.5x leaves room for synchronization. Wall
/// clock, default per-rank load.
#[test]
fn weak_scaling_epoch_time_stays_flat() {
    let rep = run_weak_scaling(&uniform(0), DEFAULT_PER_RANK, &[1, 8], &model(), &ScalingOptions::default()).unwrap();
    let (t1, t8) = (rep.row(1).unwrap().epoch_time_s, rep.row(8).unwrap().epoch_time_s);
    println!(
        "weak scaling: 1 rank {t1:.3} s, 8 ranks {t8:.3} s ({:.2}x); host parallelism {}",
        t8 / t1,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    );
    assert!(t8 <= 1.5 * t1, "8-rank epoch {t8:.3} s vs 1-rank {t1:.3} s");
}

/// Graph sizes spread over 10..400 atoms make forward the phase ranks wait
/// on most. Per-rank CPU time averaged over five timed epochs.
#[test]
fn mixed_sizes_make_forward_the_straggler_phase() {
    let recs = mixed_workload(320, (10, 400), 11).unwrap();
    assert!(recs.iter().all(|r| (10..=400).contains(&r.n_atoms())));
    let opts = ScalingOptions { timed_epochs: 5, ..cpu() };
    let rep = run_strong_scaling(&recs, &[8], &ModelConfig { batch_size: 4, ..model() }, &opts).unwrap();
    let row = &rep.rows[0];
    assert_eq!(row.timings.len(), 5);
    println!("lif {:?}\nwait {:?}", row.lif, row.wait_fraction);
    assert!(row.lif["forward"] > row.lif["dataload"]);
    let w = &row.wait_fraction;
    assert!(w["forward"] > w["dataload"] && w["forward"] > w["backward"]);
}
