//! Frame-level summary statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{EpisodeLog, StepRecord};
use crate::training::RT_THRESHOLD;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mean_accuracy: f64,
    pub max_delay: f64,
    pub mean_delay: f64,
    /// Share of frames with delay strictly below 30 ms.
    pub rt_fraction: f64,
    pub mean_reward: f64,
    pub frames: usize,
}

impl Metrics {
    /// Arithmetic mean of each field; `max_delay` is averaged too.
    pub fn mean_of(rows: &[Metrics]) -> Result<Metrics> {
        if rows.is_empty() {
            return Err(Error::Empty("metrics rows"));
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(Metrics {
            mean_accuracy: avg(|m| m.mean_accuracy),
            max_delay: avg(|m| m.max_delay),
            mean_delay: avg(|m| m.mean_delay),
            rt_fraction: avg(|m| m.rt_fraction),
            mean_reward: avg(|m| m.mean_reward),
            frames: rows.iter().map(|m| m.frames).sum(),
        })
    }
}

pub fn metrics_of_steps<'a>(steps: impl IntoIterator<Item = &'a StepRecord>) -> Result<Metrics> {
    let (mut n, mut acc, mut mx, mut sum_d, mut rt, mut rew) = (0usize, 0.0, f64::NEG_INFINITY, 0.0, 0usize, 0.0);
    for s in steps {
        n += 1;
        acc += s.acc;
        mx = mx.max(s.delay);
        sum_d += s.delay;
        rew += s.reward;
        if s.delay < RT_THRESHOLD {
            rt += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("episode log"));
    }
    let nf = n as f64;
    Ok(Metrics {
        mean_accuracy: acc / nf,
        max_delay: mx,
        mean_delay: sum_d / nf,
        rt_fraction: rt as f64 / nf,
        mean_reward: rew / nf,
        frames: n,
    })
}

/// Metrics over the concatenation of `logs`.
pub fn compute_metrics(logs: &[&EpisodeLog]) -> Result<Metrics> {
    metrics_of_steps(logs.iter().flat_map(|l| l.steps.iter()))
}

/// Linear-interpolation percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Delay percentile over frames whose load exceeds `load_above`.
pub fn high_load_delay_percentile(logs: &[&EpisodeLog], load_above: f64, q: f64) -> Option<f64> {
    let d: Vec<f64> = logs
        .iter()
        .flat_map(|l| l.steps.iter())
        .filter(|s| s.load > load_above)
        .map(|s| s.delay)
        .collect();
    percentile(&d, q)
}

/// Share of frames spent on each flat action index.
pub fn action_frequencies(logs: &[&EpisodeLog], n_actions: usize) -> Vec<f64> {
    let mut c = vec![0usize; n_actions];
    let mut n = 0usize;
    for s in logs.iter().flat_map(|l| l.steps.iter()) {
        c[s.action] += 1;
        n += 1;
    }
    c.into_iter().map(|k| k as f64 / n.max(1) as f64).collect()
}
