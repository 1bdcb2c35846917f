//! The per-frame simulation loop: status, state, action, delay, accuracy,
//! reward.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{self, AgentDims, AgentParams, AgentState, SelectMode, StateMask};
use crate::device::{self, DeviceProfile};
use crate::error::{Error, Result};
use crate::kernel::KernelBackend;
use crate::rng::{self, tag};
use crate::status::{self, BackgroundProcess, LoadTrajectory};
use crate::stream::{ActionSpace, QualityTable, StreamFeature, StreamParams, StreamState};
use crate::training::{reward, RewardConfig};

/// Everything needed to simulate one device running the stream.
#[derive(Debug, Clone)]
pub struct Env {
    pub space: ActionSpace,
    pub quality: QualityTable,
    pub stream: StreamParams,
    pub profile: DeviceProfile,
    pub processes: Vec<BackgroundProcess>,
    pub cap: f64,
    pub reward: RewardConfig,
    pub mask: StateMask,
    pub measured: Option<Arc<KernelBackend>>,
}

impl Env {
    pub fn new(
        space: ActionSpace,
        quality: QualityTable,
        stream: StreamParams,
        profile: DeviceProfile,
        processes: Vec<BackgroundProcess>,
        reward: RewardConfig,
    ) -> Result<Self> {
        let env = Self {
            space,
            quality,
            stream,
            profile,
            processes,
            cap: status::DEFAULT_CAP,
            reward,
            mask: StateMask::default(),
            measured: None,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        self.quality.validate(&self.space)?;
        self.stream.validate()?;
        self.profile.validate()?;
        self.reward.validate()?;
        if self.profile.depth_frac.len() != self.space.n_depths() {
            return Err(Error::config(format!(
                "profile {} has {} exits, action space has {}",
                self.profile.name,
                self.profile.depth_frac.len(),
                self.space.n_depths()
            )));
        }
        for p in &self.processes {
            p.validate()?;
        }
        Ok(())
    }

    pub fn dims(&self) -> AgentDims {
        AgentDims::for_space(&self.space)
    }

    pub fn with_profile(&self, profile: DeviceProfile) -> Self {
        Self { profile, ..self.clone() }
    }

    pub fn with_mask(&self, mask: StateMask) -> Self {
        Self { mask, ..self.clone() }
    }

    pub fn with_reward(&self, reward: RewardConfig) -> Self {
        Self { reward, ..self.clone() }
    }

    pub fn trajectory(&self, steps: usize, seed: u64) -> Result<LoadTrajectory> {
        status::generate_trajectory(&self.processes, steps, self.cap, seed)
    }

    /// Expected reward of each action at `load` and `difficulty` under the
    /// known surrogate and delay model.
    pub fn expected_rewards(&self, load: f64, difficulty: f64) -> Vec<f64> {
        let frame = crate::stream::Frame { t: 0, difficulty };
        self.space
            .actions()
            .iter()
            .map(|a| {
                let base = self.profile.delay_for_cost(device::action_cost(&self.profile, a), load);
                let pen = expected_excess(base, self.profile.noise_sigma, self.reward.d_b);
                self.reward.lambda_acc * self.quality.expected(a, &frame) - pen
            })
            .collect()
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// `E[max(c * exp(sigma * Z) - b, 0)]` for standard normal `Z`.
pub fn expected_excess(c: f64, sigma: f64, b: f64) -> f64 {
    if sigma == 0.0 {
        return (c - b).max(0.0);
    }
    let k = (b / c).ln() / sigma;
    c * (0.5 * sigma * sigma).exp() * normal_cdf(sigma - k) - b * normal_cdf(-k)
}

/// Who picks the action at each step.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    Agent { params: &'a AgentParams, mode: SelectMode },
    /// Uniform over all actions.
    Random,
    Constant(usize),
    /// Brute-force maximizer of expected reward; sees the true load and difficulty.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: AgentState,
    pub action: usize,
    pub res_index: usize,
    pub depth_index: usize,
    pub prob: f64,
    pub load: f64,
    pub difficulty: f64,
    pub acc: f64,
    pub delay: f64,
    pub reward: f64,
    pub d_hat: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub steps: Vec<StepRecord>,
    /// Set when a backend failure cut the episode short.
    pub aborted: Option<String>,
}

impl EpisodeLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn mean_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum::<f64>() / self.steps.len().max(1) as f64
    }

    pub fn extend(&mut self, other: EpisodeLog) {
        self.steps.extend(other.steps);
    }
}

/// Per-episode random streams, all derived from one seed.
pub struct EpisodeRngs {
    pub stream: rng::SimRng,
    pub delay: rng::SimRng,
    pub acc: rng::SimRng,
    pub policy: rng::SimRng,
}

impl EpisodeRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            stream: rng::sub_rng(seed, tag::STREAM),
            delay: rng::sub_rng(seed, tag::DELAY_NOISE),
            acc: rng::sub_rng(seed, tag::ACC_NOISE),
            policy: rng::sub_rng(seed, tag::POLICY),
        }
    }
}

/// Simulate `steps` frames on a fresh trajectory and stream derived from `seed`.
pub fn run_controller(env: &Env, ctrl: Controller, steps: usize, seed: u64) -> Result<EpisodeLog> {
    if steps == 0 {
        return Ok(EpisodeLog::default());
    }
    let traj = env.trajectory(steps, seed)?;
    run_on_trajectory(env, ctrl, &traj, seed)
}

pub fn run_on_trajectory(env: &Env, ctrl: Controller, traj: &LoadTrajectory, seed: u64) -> Result<EpisodeLog> {
    let mut cur = Cursor::new(env, traj, seed);
    cur.run(env, ctrl, traj.len())
}

/// An episode in progress; lets the controller change between frames.
pub struct Cursor<'t> {
    traj: &'t LoadTrajectory,
    rngs: EpisodeRngs,
    stream: StreamState,
    h: StreamFeature,
    prev: Option<usize>,
    prev_delay: f64,
    t: usize,
}

impl<'t> Cursor<'t> {
    pub fn new(env: &Env, traj: &'t LoadTrajectory, seed: u64) -> Self {
        Self {
            traj,
            rngs: EpisodeRngs::new(seed),
            stream: StreamState::new(env.stream),
            h: StreamFeature::default(),
            prev: None,
            prev_delay: 0.0,
            t: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.traj.len() - self.t
    }

    /// Run the agent for up to `n` more frames.
    pub fn advance(&mut self, env: &Env, params: &AgentParams, mode: SelectMode, n: usize) -> Result<EpisodeLog> {
        self.run(env, Controller::Agent { params, mode }, n)
    }

    /// Up to `n` more frames; a backend failure ends the log early and is
    /// recorded in `aborted`.
    pub fn run(&mut self, env: &Env, ctrl: Controller, n: usize) -> Result<EpisodeLog> {
        let n = n.min(self.remaining());
        let mut log = EpisodeLog { steps: Vec::with_capacity(n), aborted: None };
        for _ in 0..n {
            match self.step(env, ctrl) {
                Ok(rec) => log.steps.push(rec),
                Err(Error::Backend(e)) => {
                    log.aborted = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(log)
    }

    fn step(&mut self, env: &Env, ctrl: Controller) -> Result<StepRecord> {
        let t = self.t;
        let dims = env.dims();
        let n_actions = env.space.len();
        let st = self.traj.sample_status(t)?;
        let frame = self.stream.next_frame(&mut self.rngs.stream);
        let state = AgentState::build(&dims, &self.h, &st, self.prev, self.prev_delay, env.reward.d_b, env.mask);
        let (k, prob, d_hat) = match ctrl {
            Controller::Agent { params, mode } => {
                let fwd = agent::policy_forward(params, &state)?;
                let (k, p) = agent::select_action(&fwd.dist, mode, &mut self.rngs.policy);
                (k, p, Some(agent::predict_delay(params, &fwd.features, k)))
            }
            Controller::Random => (self.rngs.policy.random_range(0..n_actions), 1.0 / n_actions as f64, None),
            Controller::Constant(k) => {
                if k >= n_actions {
                    return Err(Error::Index { index: k, len: n_actions });
                }
                (k, 1.0, None)
            }
            Controller::Oracle => {
                let er = env.expected_rewards(st.load, frame.difficulty);
                let mut best = 0;
                for (i, &v) in er.iter().enumerate() {
                    if v > er[best] {
                        best = i;
                    }
                }
                (best, 1.0, None)
            }
        };
        let action = *env.space.get(k).expect("action index within space");
        let delay = match &env.measured {
            None => device::model_delay(&env.profile, &action, &st, Some(&mut self.rngs.delay)),
            Some(kb) => kb.measured_delay(device::action_cost(&env.profile, &action))?,
        };
        let acc = env.quality.accuracy(&action, &frame, Some(&mut self.rngs.acc));
        let r = reward(acc, delay, &env.reward);
        self.h = self.h.update(&frame, &action, acc, &env.space);
        self.prev = Some(k);
        self.prev_delay = delay;
        self.t += 1;
        Ok(StepRecord {
            t,
            state,
            action: k,
            res_index: action.res_index,
            depth_index: action.depth_index,
            prob,
            load: st.load,
            difficulty: frame.difficulty,
            acc,
            delay,
            reward: r,
            d_hat,
        })
    }
}

/// Roll the agent; the central simulation entry point.
pub fn run_episode(env: &Env, params: &AgentParams, steps: usize, mode: SelectMode, seed: u64) -> Result<EpisodeLog> {
    run_controller(env, Controller::Agent { params, mode }, steps, seed)
}
