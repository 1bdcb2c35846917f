//! Measured-delay backend: time a real multiply-accumulate kernel on the host,
//! optionally with busy-loop workers competing for the cores.

use std::hint::black_box;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    /// Multiply-accumulates executed per work unit.
    pub macs_per_unit: f64,
    /// Length of the vectors the kernel sweeps over.
    pub width: usize,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self { macs_per_unit: 20_000.0, width: 256 }
    }
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..32 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

#[derive(Debug)]
pub struct KernelBackend {
    spec: KernelSpec,
    a: Vec<f64>,
    b: Vec<f64>,
    pub warnings: Vec<String>,
}

impl KernelBackend {
    pub fn new(spec: KernelSpec) -> Result<Self> {
        if spec.width == 0 || !(spec.macs_per_unit > 0.0) {
            return Err(Error::config("kernel width and macs_per_unit must be positive"));
        }
        let a = (0..spec.width).map(|i| 1.0 + (i as f64) * 1e-6).collect();
        let b = (0..spec.width).map(|i| 1.0 - (i as f64) * 1e-6).collect();
        let mut warnings = Vec::new();
        let res = timer_resolution();
        if res > Duration::from_millis(1) {
            let msg = format!("timer resolution {res:?} is coarser than 1 ms");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        Ok(Self { spec, a, b, warnings })
    }

    fn run(&self, macs: u64) -> f64 {
        let w = self.spec.width as u64;
        let mut acc = 0.0f64;
        let mut left = macs;
        while left > 0 {
            let n = left.min(w) as usize;
            let (a, b) = (black_box(&self.a[..n]), black_box(&self.b[..n]));
            for k in 0..n {
                acc = a[k].mul_add(b[k], acc * 0.5);
            }
            left -= n as u64;
        }
        acc
    }

    /// Wall-clock seconds to execute `cost` work units.
    pub fn measured_delay(&self, cost: f64) -> Result<f64> {
        if !(cost >= 0.0 && cost.is_finite()) {
            return Err(Error::Backend(format!("invalid kernel cost {cost}")));
        }
        let macs = (cost * self.spec.macs_per_unit).round() as u64;
        let start = Instant::now();
        black_box(self.run(macs));
        Ok(start.elapsed().as_secs_f64())
    }
}

/// Busy-loop threads that hold cores until dropped.
pub struct LoadWorkers {
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
}

impl LoadWorkers {
    pub fn spawn(n: usize) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let handles = (0..n)
            .map(|_| {
                let stop = Arc::clone(&stop);
                std::thread::spawn(move || {
                    let mut x = 1.0f64;
                    while !stop.load(Ordering::Relaxed) {
                        for _ in 0..1000 {
                            x = black_box(x * 1.000_000_1 + 1e-9);
                        }
                    }
                    black_box(x);
                })
            })
            .collect();
        Self { stop, handles }
    }

    pub fn len(&self) -> usize {
        self.handles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.handles.is_empty()
    }
}

impl Drop for LoadWorkers {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

pub fn available_cores() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_cost_is_non_negative() {
        let k = KernelBackend::new(KernelSpec::default()).unwrap();
        let d = k.measured_delay(0.0).unwrap();
        assert!((0.0..0.01).contains(&d));
    }

    #[test]
    fn invalid_cost_is_backend_error() {
        let k = KernelBackend::new(KernelSpec::default()).unwrap();
        assert!(matches!(k.measured_delay(-1.0), Err(Error::Backend(_))));
    }

    #[test]
    fn workers_stop_on_drop() {
        let w = LoadWorkers::spawn(2);
        assert_eq!(w.len(), 2);
        drop(w);
    }
}
