//! Background-load trajectories and the normalized system-status vector.
//!
//! Load is produced by a set of on/off background processes, each a two-state
//! Markov chain. The foreground model sees one scalar utilization plus two
//! derived signals (a smoothed load and the step-to-step change).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Number of derived status readings beyond the raw load.
pub const AUX_SIGNALS: usize = 2;
/// Length of the status feature vector handed to the agent.
pub const STATUS_FEATURES: usize = 1 + AUX_SIGNALS;
/// Smoothing factor of the load EMA signal.
pub const LOAD_EMA_FACTOR: f64 = 0.2;
/// Default load ceiling, keeps the foreground from being fully starved.
pub const DEFAULT_CAP: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemStatus {
    /// Total background utilization in `[0, 1]`.
    pub load: f64,
    pub per_proc_active: Vec<bool>,
    /// `[ema(load), clamp(load_t - load_{t-1}, -1, 1)]`.
    pub aux_signals: [f64; AUX_SIGNALS],
}

impl SystemStatus {
    pub fn idle(n_procs: usize) -> Self {
        Self {
            load: 0.0,
            per_proc_active: vec![false; n_procs],
            aux_signals: [0.0; AUX_SIGNALS],
        }
    }

    /// Feature view consumed by the agent: load followed by the aux signals.
    pub fn features(&self) -> [f64; STATUS_FEATURES] {
        [self.load, self.aux_signals[0], self.aux_signals[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundProcess {
    /// Fraction of device capacity consumed while active.
    pub demand: f64,
    /// Per-step probability of switching on.
    pub p_on: f64,
    /// Per-step probability of switching off.
    pub p_off: f64,
}

impl BackgroundProcess {
    pub fn new(demand: f64, p_on: f64, p_off: f64) -> Result<Self> {
        let p = Self { demand, p_on, p_off };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.demand > 0.0 && self.demand <= 1.0) {
            return Err(Error::config(format!("process demand {} not in (0, 1]", self.demand)));
        }
        for (name, p) in [("p_on", self.p_on), ("p_off", self.p_off)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("process {name} {p} not in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Long-run fraction of steps spent active.
    pub fn stationary_on(&self) -> f64 {
        let s = self.p_on + self.p_off;
        if s == 0.0 {
            0.0
        } else {
            self.p_on / s
        }
    }
}

/// The default ten-process background mix: six light jobs that flicker on
/// and off, and four heavy jobs that arrive rarely and linger.
pub fn default_processes() -> Vec<BackgroundProcess> {
    let light = [0.001, 0.002, 0.003, 0.004];
    // (demand, p_on, p_off): one long-lived heavy job and one moderate one.
    let heavy = [(0.793, 0.0112, 0.02), (0.239, 0.0132, 0.03)];
    light
        .iter()
        .map(|&d| BackgroundProcess { demand: d, p_on: 0.1, p_off: 0.2 })
        .chain(heavy.iter().map(|&(demand, p_on, p_off)| BackgroundProcess { demand, p_on, p_off }))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadTrajectory {
    pub seed: u64,
    pub cap: f64,
    pub processes: Vec<BackgroundProcess>,
    loads: Vec<f64>,
    active: Vec<Vec<bool>>,
    ema: Vec<f64>,
}

impl LoadTrajectory {
    pub fn len(&self) -> usize {
        self.loads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loads.is_empty()
    }

    pub fn loads(&self) -> &[f64] {
        &self.loads
    }

    /// Status at step `t`.
    pub fn sample_status(&self, t: usize) -> Result<SystemStatus> {
        if t >= self.loads.len() {
            return Err(Error::Index { index: t, len: self.loads.len() });
        }
        let prev = if t == 0 { self.loads[0] } else { self.loads[t - 1] };
        let delta = (self.loads[t] - prev).clamp(-1.0, 1.0);
        Ok(SystemStatus {
            load: self.loads[t],
            per_proc_active: self.active[t].clone(),
            aux_signals: [self.ema[t], delta],
        })
    }

    /// Build a trajectory from an explicit load sequence (no process detail).
    pub fn from_loads(loads: Vec<f64>) -> Result<Self> {
        if loads.is_empty() {
            return Err(Error::config("trajectory must have at least one step"));
        }
        if let Some(bad) = loads.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::config(format!("load {bad} not in [0, 1]")));
        }
        let ema = ema_series(&loads);
        let active = vec![Vec::new(); loads.len()];
        Ok(Self { seed: 0, cap: 1.0, processes: Vec::new(), loads, active, ema })
    }

    pub fn to_fixture(&self) -> TrajectoryFixture {
        TrajectoryFixture {
            seed: self.seed,
            cap: self.cap,
            processes: self.processes.clone(),
            loads: self.loads.iter().map(|&l| round9(l)).collect(),
        }
    }
}

fn ema_series(loads: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(loads.len());
    let mut ema = loads.first().copied().unwrap_or(0.0);
    for &l in loads {
        ema = (1.0 - LOAD_EMA_FACTOR) * ema + LOAD_EMA_FACTOR * l;
        out.push(ema);
    }
    out
}

fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

/// Simulate `steps` steps of the background-process chains.
///
/// Initial process states are drawn from each chain's stationary
/// distribution; every step then draws one uniform per process in list order.
pub fn generate_trajectory(
    processes: &[BackgroundProcess],
    steps: usize,
    cap: f64,
    seed: u64,
) -> Result<LoadTrajectory> {
    if steps == 0 {
        return Err(Error::config("trajectory length must be at least 1"));
    }
    if !(cap > 0.0 && cap <= 1.0) {
        return Err(Error::config(format!("load cap {cap} not in (0, 1]")));
    }
    for p in processes {
        p.validate()?;
    }

    let mut rng = rng::sub_rng(seed, rng::tag::TRAJECTORY);
    let mut state: Vec<bool> = processes
        .iter()
        .map(|p| rng.random::<f64>() < p.stationary_on())
        .collect();

    let mut loads = Vec::with_capacity(steps);
    let mut active = Vec::with_capacity(steps);
    for t in 0..steps {
        if t > 0 {
            for (s, p) in state.iter_mut().zip(processes) {
                let u: f64 = rng.random();
                *s = if *s { u >= p.p_off } else { u < p.p_on };
            }
        }
        let demand: f64 = state
            .iter()
            .zip(processes)
            .filter(|(on, _)| **on)
            .map(|(_, p)| p.demand)
            // fold from +0.0: an empty f64 sum is -0.0
            .fold(0.0, |a, d| a + d);
        loads.push(demand.min(cap));
        active.push(state.clone());
    }

    let ema = ema_series(&loads);
    Ok(LoadTrajectory { seed, cap, processes: processes.to_vec(), loads, active, ema })
}

/// JSON fixture form of a trajectory; loads carry 9 decimal digits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryFixture {
    pub seed: u64,
    pub cap: f64,
    pub processes: Vec<BackgroundProcess>,
    pub loads: Vec<f64>,
}

impl TrajectoryFixture {
    /// Regenerate from `(seed, cap, processes)` and compare against the stored loads.
    pub fn verify(&self) -> Result<bool> {
        let traj = generate_trajectory(&self.processes, self.loads.len(), self.cap, self.seed)?;
        Ok(traj.to_fixture().loads == self.loads)
    }
}

/// Best-effort host utilization reader.
///
/// On Linux this samples aggregate CPU time from `/proc/stat` across a short
/// window. Other platforms return [`Error::Unsupported`].
#[derive(Debug, Default)]
pub struct HostProbe {
    last: Option<CpuTimes>,
    ema: Option<f64>,
    last_load: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct CpuTimes {
    idle: u64,
    total: u64,
}

impl HostProbe {
    pub fn new() -> Self {
        Self::default()
    }

    /// Read counters; the first call blocks for `window` to obtain a delta.
    pub fn sample(&mut self, window: std::time::Duration) -> Result<SystemStatus> {
        let prev = match self.last {
            Some(p) => p,
            None => {
                let p = read_cpu_times()?;
                std::thread::sleep(window);
                p
            }
        };
        let now = read_cpu_times()?;
        self.last = Some(now);
        let total = now.total.saturating_sub(prev.total);
        let idle = now.idle.saturating_sub(prev.idle);
        let load = if total == 0 { 0.0 } else { 1.0 - idle as f64 / total as f64 };
        let load = load.clamp(0.0, 1.0);
        let ema = match self.ema {
            Some(e) => (1.0 - LOAD_EMA_FACTOR) * e + LOAD_EMA_FACTOR * load,
            None => load,
        };
        let delta = (load - self.last_load.unwrap_or(load)).clamp(-1.0, 1.0);
        self.ema = Some(ema);
        self.last_load = Some(load);
        Ok(SystemStatus { load, per_proc_active: Vec::new(), aux_signals: [ema, delta] })
    }
}

/// One-shot host probe over a 100 ms window. Non-deterministic.
pub fn probe_host() -> Result<SystemStatus> {
    HostProbe::new().sample(std::time::Duration::from_millis(100))
}

#[cfg(target_os = "linux")]
fn read_cpu_times() -> Result<CpuTimes> {
    let raw = std::fs::read_to_string("/proc/stat")
        .map_err(|e| Error::Unsupported(format!("/proc/stat unreadable: {e}")))?;
    parse_proc_stat(&raw)
}

#[cfg(not(target_os = "linux"))]
fn read_cpu_times() -> Result<CpuTimes> {
    Err(Error::Unsupported(format!("no utilization counters on {}", std::env::consts::OS)))
}

fn parse_proc_stat(raw: &str) -> Result<CpuTimes> {
    let line = raw
        .lines()
        .find(|l| l.starts_with("cpu "))
        .ok_or_else(|| Error::Unsupported("no aggregate cpu line in /proc/stat".into()))?;
    let fields: Vec<u64> = line
        .split_whitespace()
        .skip(1)
        .map(|f| f.parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Unsupported(format!("malformed /proc/stat: {e}")))?;
    if fields.len() < 4 {
        return Err(Error::Unsupported("too few cpu fields in /proc/stat".into()));
    }
    // user nice system idle iowait irq softirq steal [guest guest_nice]
    let idle = fields[3] + fields.get(4).copied().unwrap_or(0);
    let total = fields.iter().take(8).sum();
    Ok(CpuTimes { idle, total })
}
