//! Surrogate for the dynamic main network.
//!
//! A frame is reduced to a scalar difficulty following an AR(1) process. The
//! quality table maps each (resolution, depth) action to an expected accuracy,
//! and a small engineered feature vector stands in for the recurrent state
//! the agent reads as its view of the stream.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub res_index: usize,
    pub depth_index: usize,
    /// Input side length in pixels.
    pub res: u32,
    pub flat_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    resolutions: Vec<u32>,
    n_depths: usize,
    actions: Vec<Action>,
}

impl ActionSpace {
    pub fn new(resolutions: &[u32], n_depths: usize) -> Result<Self> {
        build_action_space(resolutions, n_depths)
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn n_res(&self) -> usize {
        self.resolutions.len()
    }

    pub fn n_depths(&self) -> usize {
        self.n_depths
    }

    /// m * n
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn get(&self, flat_index: usize) -> Option<&Action> {
        self.actions.get(flat_index)
    }

    pub fn at(&self, res_index: usize, depth_index: usize) -> Option<&Action> {
        if res_index < self.n_res() && depth_index < self.n_depths {
            self.actions.get(res_index * self.n_depths + depth_index)
        } else {
            None
        }
    }

    pub fn contains(&self, a: &Action) -> bool {
        self.get(a.flat_index) == Some(a)
    }
}

/// Row-major (resolution, depth) grid.
pub fn build_action_space(resolutions: &[u32], n_depths: usize) -> Result<ActionSpace> {
    if resolutions.is_empty() {
        return Err(Error::config("at least one resolution is required"));
    }
    if n_depths == 0 {
        return Err(Error::config("at least one depth is required"));
    }
    if resolutions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!(
            "resolutions must be strictly increasing, got {resolutions:?}"
        )));
    }
    let mut actions = Vec::with_capacity(resolutions.len() * n_depths);
    for (i, &res) in resolutions.iter().enumerate() {
        for j in 0..n_depths {
            actions.push(Action { res_index: i, depth_index: j, res, flat_index: i * n_depths + j });
        }
    }
    Ok(ActionSpace { resolutions: resolutions.to_vec(), n_depths, actions })
}

/// Serializable description of an action space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSpaceConfig {
    pub resolutions: Vec<u32>,
    pub n_depths: usize,
}

impl ActionSpaceConfig {
    pub fn build(&self) -> Result<ActionSpace> {
        build_action_space(&self.resolutions, self.n_depths)
    }
}

impl Default for ActionSpaceConfig {
    fn default() -> Self {
        Self { resolutions: vec![128, 192, 256], n_depths: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: usize,
    pub difficulty: f64,
}

/// AR(1) difficulty parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamParams {
    pub rho: f64,
    pub mu: f64,
    pub sigma_d: f64,
    pub d0: f64,
}

impl Default for StreamParams {
    fn default() -> Self {
        Self { rho: 0.95, mu: 0.4, sigma_d: 0.1, d0: 0.4 }
    }
}

impl StreamParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config(format!("stream rho {} not in [0, 1]", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.mu) || !(0.0..=1.0).contains(&self.d0) {
            return Err(Error::config("stream mu and d0 must lie in [0, 1]"));
        }
        if self.sigma_d < 0.0 || !self.sigma_d.is_finite() {
            return Err(Error::config("stream sigma_d must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StreamState {
    params: StreamParams,
    difficulty: f64,
    t: usize,
}

impl StreamState {
    pub fn new(params: StreamParams) -> Self {
        Self { params, difficulty: params.d0.clamp(0.0, 1.0), t: 0 }
    }

    /// Emit the current frame and advance the difficulty process.
    pub fn next_frame<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Frame {
        let frame = Frame { t: self.t, difficulty: self.difficulty };
        let p = &self.params;
        let z: f64 = if p.sigma_d > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
        self.difficulty = (p.rho * self.difficulty + (1.0 - p.rho) * p.mu + p.sigma_d * z).clamp(0.0, 1.0);
        self.t += 1;
        frame
    }
}

/// Expected-accuracy model over the action grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityTable {
    /// `q[i][j]`: base accuracy at resolution `i`, depth `j`.
    pub q: Vec<Vec<f64>>,
    pub w_diff: f64,
    pub acc_sigma: f64,
    #[serde(default)]
    pub binary_mode: bool,
}

impl Default for QualityTable {
    fn default() -> Self {
        Self {
            q: vec![
                vec![0.51748, 0.71748, 0.91748],
                vec![0.52745, 0.72745, 0.92745],
                vec![0.53, 0.73, 0.93],
            ],
            w_diff: 0.02,
            acc_sigma: 0.01,
            binary_mode: false,
        }
    }
}

impl QualityTable {
    pub fn validate(&self, space: &ActionSpace) -> Result<()> {
        if self.q.len() != space.n_res() || self.q.iter().any(|r| r.len() != space.n_depths()) {
            return Err(Error::config(format!(
                "quality table must be {}x{}",
                space.n_res(),
                space.n_depths()
            )));
        }
        for (i, row) in self.q.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::config(format!("q[{i}][{j}] = {v} not in [0, 1]")));
                }
                if j > 0 && v < row[j - 1] {
                    return Err(Error::config(format!("q not non-decreasing in depth at ({i}, {j})")));
                }
                if i > 0 && v < self.q[i - 1][j] {
                    return Err(Error::config(format!(
                        "q not non-decreasing in resolution at ({i}, {j})"
                    )));
                }
            }
        }
        if self.w_diff < 0.0 || self.acc_sigma < 0.0 {
            return Err(Error::config("w_diff and acc_sigma must be non-negative"));
        }
        Ok(())
    }

    pub fn expected(&self, action: &Action, frame: &Frame) -> f64 {
        (self.q[action.res_index][action.depth_index] - self.w_diff * frame.difficulty).clamp(0.0, 1.0)
    }

    /// Observed accuracy; with `rng == None` this is the expectation.
    pub fn accuracy<R: Rng + ?Sized>(&self, action: &Action, frame: &Frame, rng: Option<&mut R>) -> f64 {
        let mean = self.expected(action, frame);
        let Some(rng) = rng else { return mean };
        if self.binary_mode {
            return if rng.random::<f64>() < mean { 1.0 } else { 0.0 };
        }
        if self.acc_sigma == 0.0 {
            return mean;
        }
        // Truncated normal by rejection; fall back to clamping in the far tails.
        for _ in 0..64 {
            let z: f64 = StandardNormal.sample(rng);
            let v = mean + self.acc_sigma * z;
            if (0.0..=1.0).contains(&v) {
                return v;
            }
        }
        mean
    }
}

pub const STREAM_FEATURES: usize = 8;
/// Decay constants of the three difficulty EMAs.
pub const DIFFICULTY_DECAYS: [f64; 3] = [0.5, 0.9, 0.99];
const ACC_DECAY: f64 = 0.9;

/// Engineered stand-in for the recurrent hidden state.
///
/// Layout: `[ema_d(0.5), ema_d(0.9), ema_d(0.99), ema_acc(0.9), res_norm, depth_norm, last_acc, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamFeature(pub [f64; STREAM_FEATURES]);

impl Default for StreamFeature {
    fn default() -> Self {
        let mut v = [0.0; STREAM_FEATURES];
        v[7] = 1.0;
        StreamFeature(v)
    }
}

impl StreamFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn update(&self, frame: &Frame, action: &Action, acc: f64, space: &ActionSpace) -> StreamFeature {
        update_stream_feature(self, frame, action, acc, space)
    }
}

fn norm_index(i: usize, count: usize) -> f64 {
    if count <= 1 {
        0.0
    } else {
        i as f64 / (count - 1) as f64
    }
}

pub fn update_stream_feature(
    h_prev: &StreamFeature,
    frame: &Frame,
    action: &Action,
    acc: f64,
    space: &ActionSpace,
) -> StreamFeature {
    let p = &h_prev.0;
    let d = frame.difficulty.clamp(0.0, 1.0);
    let acc = acc.clamp(0.0, 1.0);
    let mut v = [0.0; STREAM_FEATURES];
    for (k, &tau) in DIFFICULTY_DECAYS.iter().enumerate() {
        v[k] = tau * p[k] + (1.0 - tau) * d;
    }
    v[3] = ACC_DECAY * p[3] + (1.0 - ACC_DECAY) * acc;
    v[4] = norm_index(action.res_index, space.n_res());
    v[5] = norm_index(action.depth_index, space.n_depths());
    v[6] = acc;
    v[7] = 1.0;
    StreamFeature(v)
}
