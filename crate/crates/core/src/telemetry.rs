//! Utilization telemetry, a linear power model and energy accounting.
//!
//! Each rank owns a [`Sampler`] that wakes at a fixed interval, reads the
//! rank's [`BusyMeter`] (time spent inside forward/backward phases), converts
//! utilization to watts with [`PowerModel`] and appends a [`TelemetrySample`].
//! Energy is the trapezoidal integral of power over sample timestamps.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub const JOULES_PER_KWH: f64 = 3.6e6;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("samples from several job steps: {0:?}")]
    MixedSteps(Vec<String>),
    #[error("no samples")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// `P(u) = P_idle + u (P_peak - P_idle)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PowerModel {
    pub idle_watts: f64,
    pub peak_watts: f64,
}

impl Default for PowerModel {
    /// 560 W is the MI250 socket TDP.
    fn default() -> Self {
        Self { idle_watts: 90.0, peak_watts: 560.0 }
    }
}

impl PowerModel {
    /// Watts at utilization `u`, clamping `u` into `[0, 1]`; the flag reports a clamp.
    pub fn watts<T: Scalar>(&self, u: T) -> (T, bool) {
        let clamped = u.max(T::zero()).min(T::one());
        let was_clamped = clamped != u;
        let w = T::of(self.idle_watts) + clamped * T::of(self.peak_watts - self.idle_watts);
        (w, was_clamped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub step_id: String,
    pub rank: u32,
    /// Monotonic seconds since the sampler started.
    pub timestamp: f64,
    pub utilization: f64,
    pub power_w: f64,
    pub mem_bytes: u64,
}

/// Trapezoidal integral of `(t, y)` points; `None` with fewer than two points.
pub fn trapezoid<T: Scalar>(points: &[(T, T)]) -> Option<T> {
    if points.len() < 2 {
        return None;
    }
    let half = T::of(0.5);
    Some(points.windows(2).map(|w| half * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyIntegral {
    pub joules: f64,
    pub kwh: f64,
    /// Fewer than two samples; energy reported as zero.
    pub insufficient: bool,
}

/// Energy of one rank's samples (ordered by timestamp).
pub fn integrate_energy(samples: &[TelemetrySample]) -> EnergyIntegral {
    let pts: Vec<(f64, f64)> = samples.iter().map(|s| (s.timestamp, s.power_w)).collect();
    match trapezoid(&pts) {
        Some(j) => EnergyIntegral { joules: j, kwh: j / JOULES_PER_KWH, insufficient: false },
        None => EnergyIntegral { joules: 0.0, kwh: 0.0, insufficient: true },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub step_id: String,
    pub duration_s: f64,
    pub mean_utilization: f64,
    pub energy_kwh: f64,
    pub peak_power_w: f64,
    pub peak_mem_bytes: u64,
    pub ranks: usize,
}

impl EnergyReport {
    pub fn joules(&self) -> f64 {
        self.energy_kwh * JOULES_PER_KWH
    }
}

/// Sums energy over ranks for one job step. Peaks are maxima; utilization is
/// the time integral of utilization over the summed rank durations.
pub fn aggregate(samples: &[TelemetrySample]) -> Result<EnergyReport, TelemetryError> {
    let first = samples.first().ok_or(TelemetryError::Empty)?;
    let mut steps: Vec<String> = samples.iter().map(|s| s.step_id.clone()).collect();
    steps.sort();
    steps.dedup();
    if steps.len() > 1 {
        return Err(TelemetryError::MixedSteps(steps));
    }
    let mut by_rank: BTreeMap<u32, Vec<&TelemetrySample>> = BTreeMap::new();
    for s in samples {
        by_rank.entry(s.rank).or_default().push(s);
    }
    let (mut joules, mut busy, mut total_dur, mut duration) = (0.0, 0.0, 0.0, 0.0f64);
    for list in by_rank.values_mut() {
        list.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let power: Vec<(f64, f64)> = list.iter().map(|s| (s.timestamp, s.power_w)).collect();
        let util: Vec<(f64, f64)> = list.iter().map(|s| (s.timestamp, s.utilization)).collect();
        joules += trapezoid(&power).unwrap_or(0.0);
        busy += trapezoid(&util).unwrap_or(0.0);
        let d = list.last().unwrap().timestamp - list[0].timestamp;
        total_dur += d;
        duration = duration.max(d);
    }
    Ok(EnergyReport {
        step_id: first.step_id.clone(),
        duration_s: duration,
        mean_utilization: if total_dur > 0.0 { busy / total_dur } else { 0.0 },
        energy_kwh: joules / JOULES_PER_KWH,
        peak_power_w: samples.iter().map(|s| s.power_w).fold(f64::NEG_INFINITY, f64::max),
        peak_mem_bytes: samples.iter().map(|s| s.mem_bytes).max().unwrap_or(0),
        ranks: by_rank.len(),
    })
}

/// Cumulative busy time of a rank, counting a phase still in progress.
#[derive(Debug)]
pub struct BusyMeter {
    epoch: Instant,
    busy_ns: AtomicU64,
    /// Start of the open phase in ns since `epoch`, plus one; zero when idle.
    open_since: AtomicU64,
    mem_bytes: AtomicU64,
}

impl Default for BusyMeter {
    fn default() -> Self {
        Self {
            epoch: Instant::now(),
            busy_ns: AtomicU64::new(0),
            open_since: AtomicU64::new(0),
            mem_bytes: AtomicU64::new(0),
        }
    }
}

impl BusyMeter {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    pub fn begin(&self) {
        self.open_since.store(self.now_ns() + 1, Ordering::Release);
    }

    pub fn end(&self) {
        let since = self.open_since.swap(0, Ordering::AcqRel);
        if since > 0 {
            self.busy_ns.fetch_add(self.now_ns().saturating_sub(since - 1), Ordering::AcqRel);
        }
    }

    pub fn busy_seconds(&self) -> f64 {
        let mut ns = self.busy_ns.load(Ordering::Acquire);
        let since = self.open_since.load(Ordering::Acquire);
        if since > 0 {
            ns += self.now_ns().saturating_sub(since - 1);
        }
        ns as f64 * 1e-9
    }

    pub fn set_mem_bytes(&self, bytes: u64) {
        self.mem_bytes.store(bytes, Ordering::Relaxed);
    }

    pub fn mem_bytes(&self) -> u64 {
        self.mem_bytes.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub interval_s: f64,
    pub power: PowerModel,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { interval_s: 1.0, power: PowerModel::default() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SamplerOutput {
    pub samples: Vec<TelemetrySample>,
    /// Samples rejected because their timestamp did not advance.
    pub dropped: u64,
    /// Utilization readings clamped into `[0, 1]`.
    pub clamped: u64,
    /// Time spent taking samples, excluding sleeps.
    pub overhead_s: f64,
    pub wall_s: f64,
}

#[derive(Default)]
struct SampleLog {
    out: SamplerOutput,
    last_ts: Option<f64>,
}

impl SampleLog {
    fn push(&mut self, s: TelemetrySample) {
        if self.last_ts.is_some_and(|t| s.timestamp <= t) {
            self.out.dropped += 1;
            return;
        }
        self.last_ts = Some(s.timestamp);
        self.out.samples.push(s);
    }
}

/// Fixed-interval sampler for one rank and one job step.
pub struct Sampler {
    stop: Arc<(Mutex<bool>, Condvar)>,
    log: Arc<Mutex<SampleLog>>,
    handle: Option<JoinHandle<()>>,
    started: Instant,
    stopped: Arc<AtomicBool>,
}

impl Sampler {
    pub fn start(step_id: &str, rank: u32, meter: Arc<BusyMeter>, cfg: SamplerConfig) -> Self {
        let stop = Arc::new((Mutex::new(false), Condvar::new()));
        let log = Arc::new(Mutex::new(SampleLog::default()));
        let started = Instant::now();
        let stopped = Arc::new(AtomicBool::new(false));
        let interval = Duration::from_secs_f64(cfg.interval_s.max(1e-4));
        let handle = {
            let (stop, log, step_id) = (stop.clone(), log.clone(), step_id.to_string());
            std::thread::spawn(move || {
                let mut prev = (0.0f64, meter.busy_seconds());
                let mut take = |log: &mut SampleLog| {
                    let t_in = Instant::now();
                    let ts = started.elapsed().as_secs_f64();
                    let busy = meter.busy_seconds();
                    let u = if ts > prev.0 { (busy - prev.1) / (ts - prev.0) } else { 0.0 };
                    prev = (ts, busy);
                    let (power_w, clamped) = cfg.power.watts(u);
                    if clamped {
                        log.out.clamped += 1;
                    }
                    log.push(TelemetrySample {
                        step_id: step_id.clone(),
                        rank,
                        timestamp: ts,
                        utilization: u.clamp(0.0, 1.0),
                        power_w,
                        mem_bytes: meter.mem_bytes(),
                    });
                    log.out.overhead_s += t_in.elapsed().as_secs_f64();
                };
                take(&mut log.lock().unwrap());
                let mut tick = 1u32;
                let (lock, cv) = &*stop;
                let mut done = lock.lock().unwrap();
                loop {
                    let deadline = started + interval * tick;
                    let now = Instant::now();
                    if !*done && now < deadline {
                        done = cv.wait_timeout(done, deadline - now).unwrap().0;
                        continue;
                    }
                    take(&mut log.lock().unwrap());
                    if *done {
                        break;
                    }
                    tick += 1;
                }
            })
        };
        Self { stop, log, handle: Some(handle), started, stopped }
    }

    /// Takes a final sample and returns everything collected.
    pub fn stop(mut self) -> SamplerOutput {
        self.finish()
    }

    fn finish(&mut self) -> SamplerOutput {
        if self.stopped.swap(true, Ordering::SeqCst) {
            return SamplerOutput::default();
        }
        {
            let (lock, cv) = &*self.stop;
            *lock.lock().unwrap() = true;
            cv.notify_all();
        }
        if let Some(h) = self.handle.take() {
            h.join().expect("sampler thread panicked");
        }
        let mut out = std::mem::take(&mut self.log.lock().unwrap().out);
        out.wall_s = self.started.elapsed().as_secs_f64();
        out
    }
}

impl Drop for Sampler {
    fn drop(&mut self) {
        self.finish();
    }
}

/// CSV with header `step_id,rank,timestamp,utilization,power_w,mem_bytes`.
pub fn write_sample_log<W: Write>(samples: &[TelemetrySample], w: W) -> Result<(), TelemetryError> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in samples {
        wtr.serialize(s)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_sample_log<R: Read>(r: R) -> Result<Vec<TelemetrySample>, TelemetryError> {
    let mut rdr = csv::Reader::from_reader(r);
    Ok(rdr.deserialize().collect::<Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(rank: u32, t: f64, p: f64) -> TelemetrySample {
        TelemetrySample { step_id: "trial-1".into(), rank, timestamp: t, utilization: 0.5, power_w: p, mem_bytes: 10 }
    }

    #[test]
    fn power_model_points() {
        let m = PowerModel::default();
        assert_eq!(m.watts(0.0), (90.0, false));
        assert_eq!(m.watts(1.0), (560.0, false));
        assert_eq!(m.watts(0.5), (325.0, false));
        assert_eq!(m.watts(1.5), (560.0, true));
        assert_eq!(m.watts(-0.1f32), (90.0, true));
    }

    #[test]
    fn rectangle_and_ramp() {
        let e = integrate_energy(&[s(0, 0.0, 100.0), s(0, 36.0, 100.0)]);
        assert_eq!(e.joules, 3600.0);
        assert!((e.kwh - 0.001).abs() < 1e-15);
        assert_eq!(trapezoid(&[(0.0, 0.0), (10.0, 100.0)]), Some(500.0));
        assert!(integrate_energy(&[s(0, 0.0, 5.0)]).insufficient);
    }

    #[test]
    fn aggregate_rules() {
        let one = vec![s(0, 0.0, 100.0), s(0, 1.0, 200.0), s(0, 3.0, 100.0)];
        let r1 = aggregate(&one).unwrap();
        assert_eq!(r1.energy_kwh, integrate_energy(&one).kwh);
        assert_eq!(r1.peak_power_w, 200.0);
        assert_eq!(r1.duration_s, 3.0);
        assert!((r1.mean_utilization - 0.5).abs() < 1e-12);
        let mut two = one.clone();
        two.extend(one.iter().map(|x| TelemetrySample { rank: 1, ..x.clone() }));
        assert_eq!(aggregate(&two).unwrap().energy_kwh, 2.0 * r1.energy_kwh);
        let mut mixed = one.clone();
        mixed[1].step_id = "trial-2".into();
        assert!(matches!(aggregate(&mixed), Err(TelemetryError::MixedSteps(_))));
        assert!(matches!(aggregate(&[]), Err(TelemetryError::Empty)));
    }

    #[test]
    fn shared_boundary_additivity() {
        let a = vec![s(0, 0.0, 10.0), s(0, 2.0, 30.0)];
        let b = vec![s(0, 2.0, 30.0), s(0, 5.0, 0.0)];
        let whole = vec![s(0, 0.0, 10.0), s(0, 2.0, 30.0), s(0, 5.0, 0.0)];
        let sum = integrate_energy(&a).joules + integrate_energy(&b).joules;
        assert!((integrate_energy(&whole).joules - sum).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let samples = vec![s(0, 0.0, 100.0), s(1, 0.5, 120.0)];
        let mut buf = Vec::new();
        write_sample_log(&samples, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step_id,rank,timestamp,utilization,power_w,mem_bytes\n"));
        assert_eq!(read_sample_log(&buf[..]).unwrap(), samples);
    }

    #[test]
    fn idle_sampler_reports_idle_power() {
        let meter = BusyMeter::new();
        let sampler = Sampler::start("idle", 0, meter, SamplerConfig { interval_s: 0.01, ..Default::default() });
        std::thread::sleep(Duration::from_millis(60));
        let out = sampler.stop();
        assert!(out.samples.len() >= 3);
        assert!(out.samples.iter().all(|s| s.utilization == 0.0 && s.power_w == 90.0));
        assert!(out.samples.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
    }

    #[test]
    fn busy_meter_counts_open_phase() {
        let m = BusyMeter::default();
        m.begin();
        std::thread::sleep(Duration::from_millis(20));
        assert!(m.busy_seconds() >= 0.015);
        m.end();
        let b = m.busy_seconds();
        std::thread::sleep(Duration::from_millis(5));
        assert_eq!(m.busy_seconds(), b);
    }
}
