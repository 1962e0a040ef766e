//! Load-imbalance factor and synchronization wait fractions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum ImbalanceError {
    #[error("no rank times")]
    Empty,
    #[error("rank {rank} has non-positive time {time}")]
    NonPositive { rank: usize, time: f64 },
}

/// `max / mean` of per-rank times; 1 means perfectly balanced.
pub fn compute_lif<T: Scalar>(times: &[T]) -> Result<T, ImbalanceError> {
    if times.is_empty() {
        return Err(ImbalanceError::Empty);
    }
    if let Some((rank, t)) = times.iter().enumerate().find(|(_, t)| !(**t > T::zero())) {
        return Err(ImbalanceError::NonPositive { rank, time: t.as_f64() });
    }
    let max = times.iter().copied().fold(T::neg_infinity(), T::max);
    let mean = times.iter().copied().sum::<T>() / T::of_usize(times.len());
    // guard rounding when all times are equal
    Ok((max / mean).max(T::one()))
}

/// Mean over ranks of `(max - own) / max`. Zero when every rank took no time.
pub fn wait_fraction<T: Scalar>(times: &[T]) -> T {
    let max = times.iter().copied().fold(T::zero(), T::max);
    if times.is_empty() || max <= T::zero() {
        return T::zero();
    }
    times.iter().map(|&t| (max - t) / max).sum::<T>() / T::of_usize(times.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Dataload,
    Forward,
    Backward,
    Sync,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Dataload, Phase::Forward, Phase::Backward, Phase::Sync];
    pub const COMPUTE: [Phase; 3] = [Phase::Dataload, Phase::Forward, Phase::Backward];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Dataload => "dataload",
            Phase::Forward => "forward",
            Phase::Backward => "backward",
            Phase::Sync => "sync",
        }
    }
}

/// One rank's phase durations (seconds) over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub rank: usize,
    pub dataload: f64,
    pub forward: f64,
    pub backward: f64,
    pub sync: f64,
    pub epoch: f64,
}

impl PhaseTiming {
    pub fn get(&self, p: Phase) -> f64 {
        match p {
            Phase::Dataload => self.dataload,
            Phase::Forward => self.forward,
            Phase::Backward => self.backward,
            Phase::Sync => self.sync,
        }
    }

    pub fn add(&mut self, p: Phase, secs: f64) {
        match p {
            Phase::Dataload => self.dataload += secs,
            Phase::Forward => self.forward += secs,
            Phase::Backward => self.backward += secs,
            Phase::Sync => self.sync += secs,
        }
    }

    pub fn accounted(&self) -> f64 {
        self.dataload + self.forward + self.backward + self.sync
    }
}

/// LIF per compute phase; phases where any rank recorded zero time are omitted.
pub fn phase_lif(timings: &[PhaseTiming]) -> Vec<(Phase, f64)> {
    Phase::COMPUTE
        .iter()
        .filter_map(|&p| {
            let t: Vec<f64> = timings.iter().map(|x| x.get(p)).collect();
            compute_lif(&t).ok().map(|l| (p, l))
        })
        .collect()
}

pub fn phase_wait_fractions(timings: &[PhaseTiming]) -> Vec<(Phase, f64)> {
    Phase::COMPUTE
        .iter()
        .map(|&p| {
            let t: Vec<f64> = timings.iter().map(|x| x.get(p)).collect();
            (p, wait_fraction(&t))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lif_examples() {
        assert_eq!(compute_lif(&[2.0, 2.0, 2.0, 2.0]), Ok(1.0));
        assert_eq!(compute_lif(&[3.0, 1.0, 2.0, 2.0]), Ok(1.5));
        assert_eq!(compute_lif::<f64>(&[]), Err(ImbalanceError::Empty));
        assert!(matches!(compute_lif(&[1.0, 0.0]), Err(ImbalanceError::NonPositive { rank: 1, .. })));
        assert!(compute_lif(&[1.0f32, f32::NAN]).is_err());
    }

    #[test]
    fn wait_examples() {
        assert_eq!(wait_fraction(&[2.0, 2.0]), 0.0);
        assert!((wait_fraction(&[1.0f64, 3.0]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wait_fraction::<f64>(&[0.0, 0.0]), 0.0);
    }

    proptest! {
        #[test]
        fn lif_at_least_one(times in prop::collection::vec(1e-3f64..1e3, 1..50)) {
            let l = compute_lif(&times).unwrap();
            prop_assert!(l >= 1.0);
            let w = wait_fraction(&times);
            prop_assert!((0.0..=1.0).contains(&w));
        }
    }
}
