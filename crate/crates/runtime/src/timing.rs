use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Clock used for compute phases. Synchronization waits always use wall time.
///
/// `ThreadCpu` counts only time the calling thread spent on a CPU, which keeps
/// per-rank phase times meaningful when ranks share cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseClock {
    #[default]
    Wall,
    ThreadCpu,
}

impl std::str::FromStr for PhaseClock {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "wall" => Ok(Self::Wall),
            "thread-cpu" => Ok(Self::ThreadCpu),
            _ => Err(format!("unknown clock {s:?} (wall|thread-cpu)")),
        }
    }
}

pub fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: clock_gettime writes into the provided timespec only.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0, "CLOCK_THREAD_CPUTIME_ID unavailable");
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// Start point on a [`PhaseClock`].
#[derive(Debug, Clone, Copy)]
pub struct Stamp {
    clock: PhaseClock,
    wall: Instant,
    cpu: f64,
}

impl Stamp {
    pub fn now(clock: PhaseClock) -> Self {
        let cpu = if clock == PhaseClock::ThreadCpu { thread_cpu_seconds() } else { 0.0 };
        Self { clock, wall: Instant::now(), cpu }
    }

    pub fn elapsed(&self) -> f64 {
        match self.clock {
            PhaseClock::Wall => self.wall.elapsed().as_secs_f64(),
            PhaseClock::ThreadCpu => (thread_cpu_seconds() - self.cpu).max(0.0),
        }
    }
}
