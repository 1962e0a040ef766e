use std::time::{Duration, Instant};

use gfm_core::telemetry::*;
use proptest::prelude::*;

fn spin(meter: &BusyMeter, d: Duration) {
    let t = Instant::now();
    meter.begin();
    let mut x = 0u64;
    while t.elapsed() < d {
        x = std::hint::black_box(x.wrapping_mul(6364136223846793005).wrapping_add(1));
    }
    meter.end();
}

#[test]
fn interval_count_matches_step_length() {
    let meter = BusyMeter::new();
    let s = Sampler::start("step", 0, meter, SamplerConfig { interval_s: 0.1, ..Default::default() });
    std::thread::sleep(Duration::from_millis(1000));
    let out = s.stop();
    let intervals = out.samples.len() - 1;
    assert!((9..=11).contains(&intervals), "{intervals} intervals");
    assert!(out.samples.windows(2).all(|w| w[1].timestamp > w[0].timestamp));
    // idle step: every sample at the floor
    assert!(out.samples.iter().all(|s| s.utilization == 0.0 && s.power_w == 90.0));
}

#[test]
fn spinning_step_is_busy_and_cheap_to_observe() {
    let meter = BusyMeter::new();
    let s = Sampler::start("spin", 0, meter.clone(), SamplerConfig { interval_s: 0.1, ..Default::default() });
    spin(&meter, Duration::from_millis(1500));
    let out = s.stop();
    let n = out.samples.len();
    assert!(n >= 10);
    // interior samples: skip the opening sample and the stop sample
    for s in &out.samples[1..n - 1] {
        assert!(s.utilization >= 0.9, "utilization {} at {}", s.utilization, s.timestamp);
    }
    let frac = out.overhead_s / out.wall_s;
    println!("sampler overhead {:.4}% of step wall time", 100.0 * frac);
    assert!(frac < 0.005);
    assert_eq!(out.dropped, 0);
}

#[test]
fn energy_examples() {
    let flat: Vec<_> = (0..=36).map(|t| (t as f64, 100.0)).collect();
    assert!((trapezoid(&flat).unwrap() / JOULES_PER_KWH - 0.001).abs() < 1e-15);
    let ramp: Vec<_> = (0..=10).map(|t| (t as f64, 10.0 * t as f64)).collect();
    assert_eq!(trapezoid(&ramp), Some(500.0));
}

fn sample(rank: u32, t: f64, p: f64) -> TelemetrySample {
    TelemetrySample { step_id: "s".into(), rank, timestamp: t, utilization: 0.0, power_w: p, mem_bytes: 0 }
}

proptest! {
    #[test]
    fn piecewise_linear_profiles_integrate_exactly(
        steps in prop::collection::vec((0.01f64..5.0, 0.0f64..600.0), 2..60),
    ) {
        let mut t = 0.0;
        let pts: Vec<(f64, f64)> = steps.iter().map(|&(dt, p)| { t += dt; (t, p) }).collect();
        // each segment: rectangle under the lower end plus the triangle above it
        let oracle: f64 = pts.windows(2).map(|w| {
            let dt = w[1].0 - w[0].0;
            w[0].1.min(w[1].1) * dt + 0.5 * (w[1].1 - w[0].1).abs() * dt
        }).sum();
        let got = trapezoid(&pts).unwrap();
        prop_assert!((got - oracle).abs() <= 1e-9 * oracle.max(1.0));
    }

    #[test]
    fn aggregate_is_sum_of_rank_integrals(
        ranks in prop::collection::vec(prop::collection::vec((0.01f64..2.0, 90.0f64..560.0), 2..20), 1..5),
    ) {
        let mut all = Vec::new();
        let mut oracle = 0.0;
        for (r, steps) in ranks.iter().enumerate() {
            let mut t = 0.0;
            let pts: Vec<(f64, f64)> = steps.iter().map(|&(dt, p)| { t += dt; (t, p) }).collect();
            oracle += pts.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum::<f64>();
            all.extend(pts.iter().map(|&(t, p)| sample(r as u32, t, p)));
        }
        let rep = aggregate(&all).unwrap();
        prop_assert!((rep.joules() - oracle).abs() <= 1e-9 * oracle.max(1.0));
        prop_assert_eq!(rep.ranks, ranks.len());
        prop_assert!(rep.energy_kwh >= 0.0);
    }
}
