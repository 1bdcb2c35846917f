//! Reward, losses, policy-gradient training, the meta-update, and
//! deployment-time adaptation on the delay-prediction task.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{self, AgentParams, BackwardOptions, Gradient, SelectMode};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::{self, tag};
use crate::sim::{self, Env, EpisodeLog};

pub const RT_THRESHOLD: f64 = 0.030;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub lambda_acc: f64,
    /// Delay tolerance in seconds.
    pub d_b: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { lambda_acc: 2.0, d_b: 0.03 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_acc > 0.0 && self.d_b > 0.0) {
            return Err(Error::config("lambda_acc and d_b must be positive"));
        }
        Ok(())
    }
}

/// `lambda_acc * acc - max(d - d_b, 0)`, delays in seconds.
pub fn reward(acc: f64, d: f64, cfg: &RewardConfig) -> f64 {
    cfg.lambda_acc * acc - (d - cfg.d_b).max(0.0)
}

pub fn aux_loss(d: f64, d_hat: f64) -> f64 {
    (d - d_hat) * (d - d_hat)
}

/// Exponentially weighted running mean with bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningMean {
    pub decay: f64,
    acc: f64,
    weight: f64,
}

impl RunningMean {
    pub fn new(decay: f64) -> Self {
        Self { decay, acc: 0.0, weight: 0.0 }
    }

    pub fn value(&self) -> f64 {
        if self.weight == 0.0 {
            0.0
        } else {
            self.acc / self.weight
        }
    }

    pub fn push(&mut self, x: f64) {
        self.acc = self.decay * self.acc + (1.0 - self.decay) * x;
        self.weight = self.decay * self.weight + (1.0 - self.decay);
    }
}

/// Reward baseline subtracted inside the policy loss.
#[derive(Debug)]
pub enum Baseline<'a> {
    None,
    Fixed(f64),
    /// Read before each step, then updated with that step's reward.
    Running(&'a mut RunningMean),
}

/// `sum_t -(r_t - b) ln p_t` and its gradient at `params`.
pub fn policy_loss(params: &AgentParams, log: &EpisodeLog, baseline: Baseline) -> Result<(f64, Gradient)> {
    policy_loss_reg(params, log, baseline, 0.0)
}

/// [`policy_loss`] with `-beta ln p_t` added to each advantage. Averaged over
/// sampled actions this is the gradient of `-beta` times the policy entropy.
pub fn policy_loss_reg(
    params: &AgentParams,
    log: &EpisodeLog,
    mut baseline: Baseline,
    beta: f64,
) -> Result<(f64, Gradient)> {
    if log.is_empty() {
        return Err(Error::Empty("episode log"));
    }
    let mut loss = 0.0;
    let mut g = Gradient::zeros_like(params);
    for s in &log.steps {
        if !(s.prob > 0.0) {
            return Err(Error::Numerical(format!("step {} has selection probability {}", s.t, s.prob)));
        }
        let b = match &baseline {
            Baseline::None => 0.0,
            Baseline::Fixed(b) => *b,
            Baseline::Running(m) => m.value(),
        };
        if let Baseline::Running(m) = &mut baseline {
            m.push(s.reward);
        }
        let adv = s.reward - b - beta * s.prob.ln();
        loss -= adv * s.prob.ln();
        if adv != 0.0 {
            let fwd = agent::policy_forward(params, &s.state)?;
            agent::backward_into(params, &s.state, &fwd, s.action, adv, None, BackwardOptions::default(), &mut g);
        }
    }
    Ok((loss, g))
}

/// Mean aux loss over the logged steps and its gradient.
pub fn aux_loss_batch(params: &AgentParams, log: &EpisodeLog, opts: BackwardOptions) -> Result<(f64, Gradient)> {
    if log.is_empty() {
        return Err(Error::Empty("episode log"));
    }
    let n = log.len() as f64;
    let mut loss = 0.0;
    let mut g = Gradient::zeros_like(params);
    for s in &log.steps {
        let fwd = agent::policy_forward(params, &s.state)?;
        let d_hat = agent::predict_delay(params, &fwd.features, s.action);
        loss += aux_loss(s.delay, d_hat) / n;
        agent::backward_into(params, &s.state, &fwd, s.action, 0.0, Some(s.delay), opts, &mut g);
    }
    g.scale(1.0 / n);
    Ok((loss, g))
}

/// Root-mean-square delay prediction error of `params` on logged steps,
/// re-evaluated at the current parameters.
pub fn aux_rmse(params: &AgentParams, log: &EpisodeLog) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::Empty("episode log"));
    }
    let mut se = 0.0;
    for s in &log.steps {
        let fwd = agent::policy_forward(params, &s.state)?;
        se += aux_loss(s.delay, agent::predict_delay(params, &fwd.features, s.action));
    }
    Ok((se / log.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iters: usize,
    pub episode_len: usize,
    pub lr: f64,
    pub baseline_decay: f64,
    /// Also fit the delay head on the observed delays. Its gradient stays in
    /// the head so the trunk sees only the policy loss.
    pub fit_aux_head: bool,
    /// Let the delay loss shape the shared trunk as well as the head.
    pub aux_into_trunk: bool,
    pub aux_lr: f64,
    /// Weight of the entropy bonus added to each step's advantage.
    pub entropy_coef: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 3000,
            episode_len: 256,
            lr: 3e-4,
            baseline_decay: 0.99,
            fit_aux_head: true,
            aux_into_trunk: true,
            aux_lr: 1e-3,
            entropy_coef: 0.002,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_delay: f64,
    pub rt_frac: f64,
    pub loss: f64,
}

impl IterRecord {
    fn from_log(iter: usize, log: &EpisodeLog, loss: f64) -> Self {
        let n = log.len().max(1) as f64;
        Self {
            iter,
            mean_reward: log.mean_reward(),
            mean_delay: log.steps.iter().map(|s| s.delay).sum::<f64>() / n,
            rt_frac: log.steps.iter().filter(|s| s.delay < RT_THRESHOLD).count() as f64 / n,
            loss,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: AgentParams,
    pub history: Vec<IterRecord>,
}

impl TrainOutcome {
    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        write_jsonl(&self.history, w)
    }
}

pub fn write_jsonl(records: &[IterRecord], w: &mut impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn check_finite(iter: usize, log: &EpisodeLog, params: &AgentParams) -> Result<()> {
    let m = log.mean_reward();
    if !m.is_finite() {
        return Err(Error::Numerical(format!("iteration {iter}: mean reward {m} is not finite")));
    }
    if !params.is_finite() {
        return Err(Error::Numerical(format!("iteration {iter}: parameters diverged")));
    }
    Ok(())
}

fn is_aux_coord(params: &AgentParams) -> impl Fn(usize) -> bool {
    let start = params.layout().wa1.offset;
    move |i| i >= start
}

/// Policy-gradient training over one or more environments; iteration `i`
/// uses `envs[i % envs.len()]` and a fresh trajectory and stream.
pub fn train_on(envs: &[&Env], params: AgentParams, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    if envs.is_empty() {
        return Err(Error::config("training needs at least one environment"));
    }
    let mut params = params;
    let mut opt = Adam::for_params(cfg.lr, &params);
    let mut aux_opt = Adam::for_params(cfg.aux_lr, &params);
    let mut baseline = RunningMean::new(cfg.baseline_decay);
    let mut history = Vec::with_capacity(cfg.iters);
    let aux_coord = is_aux_coord(&params);
    for iter in 0..cfg.iters {
        let env = envs[iter % envs.len()];
        let ep_seed = rng::derive(seed, iter as u64);
        let log = sim::run_episode(env, &params, cfg.episode_len, SelectMode::Sample, ep_seed)?;
        check_finite(iter, &log, &params)?;
        if log.is_empty() {
            continue;
        }
        let (loss, g) = policy_loss_reg(&params, &log, Baseline::Running(&mut baseline), cfg.entropy_coef)?;
        if cfg.fit_aux_head {
            let (_, ga) = aux_loss_batch(&params, &log, BackwardOptions { aux_into_trunk: cfg.aux_into_trunk })?;
            if cfg.aux_into_trunk {
                aux_opt.update(&mut params, &ga);
            } else {
                aux_opt.update_masked(&mut params, &ga, &aux_coord);
            }
        }
        opt.update_masked(&mut params, &g, |i| !aux_coord(i));
        check_finite(iter, &log, &params)?;
        let rec = IterRecord::from_log(iter, &log, loss);
        log::debug!("iter {iter}: reward {:.4} delay {:.4}", rec.mean_reward, rec.mean_delay);
        history.push(rec);
    }
    Ok(TrainOutcome { params, history })
}

/// Train on a single environment.
pub fn train_agent(env: &Env, params: AgentParams, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    train_on(&[env], params, cfg, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Inner step size on the aux loss.
    pub alpha: f64,
    /// Outer step size on the summed policy gradients.
    pub beta: f64,
    /// Target devices per meta-step; 0 means all supplied targets.
    pub k: usize,
    /// Frames collected for the inner aux update.
    pub inner_batch: usize,
    pub episodes_per_meta_test: usize,
    pub episode_len: usize,
    /// Entropy bonus in the meta-test loss, as in training.
    pub entropy_coef: f64,
    /// Drive the outer update with Adam rather than a plain step.
    pub outer_adam: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 1e-3,
            k: 0,
            inner_batch: 64,
            episodes_per_meta_test: 2,
            episode_len: 256,
            entropy_coef: 0.01,
            outer_adam: true,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::config("meta learning rates must be non-negative"));
        }
        if self.inner_batch == 0 || self.episodes_per_meta_test == 0 || self.episode_len == 0 {
            return Err(Error::config("meta batch sizes must be positive"));
        }
        Ok(())
    }
}

/// Sum over targets of the outer gradient taken at each target's
/// pseudo-updated point `phi - alpha * inner_grad`.
///
/// `inner_grad` and `outer_grad` receive the target index and a parameter
/// vector and return a gradient.
pub fn first_order_meta_grad<FI, FO>(
    phi: &[f64],
    n_targets: usize,
    alpha: f64,
    mut inner_grad: FI,
    mut outer_grad: FO,
) -> Result<Vec<f64>>
where
    FI: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
    FO: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
{
    if n_targets == 0 {
        return Err(Error::config("meta step needs at least one target"));
    }
    let mut total = vec![0.0; phi.len()];
    for k in 0..n_targets {
        let gi = inner_grad(k, phi)?;
        let tgt: Vec<f64> = phi.iter().zip(&gi).map(|(p, g)| p - alpha * g).collect();
        let go = outer_grad(k, &tgt)?;
        for (t, g) in total.iter_mut().zip(&go) {
            *t += g;
        }
    }
    Ok(total)
}

/// The generic first-order update skeleton: pseudo-update on the inner loss,
/// gradient of the outer loss at the pseudo-updated point, applied to the
/// meta parameters with a plain step of size `beta`.
pub fn first_order_meta_update<FI, FO>(
    phi: &[f64],
    n_targets: usize,
    alpha: f64,
    beta: f64,
    inner_grad: FI,
    outer_grad: FO,
) -> Result<Vec<f64>>
where
    FI: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
    FO: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
{
    let total = first_order_meta_grad(phi, n_targets, alpha, inner_grad, outer_grad)?;
    Ok(phi.iter().zip(&total).map(|(p, g)| p - beta * g).collect())
}

/// Summed meta-test policy gradient of `phi_meta` over `targets`.
///
/// Inner clips and meta-test clips draw their seeds from disjoint streams.
pub fn meta_gradient(phi_meta: &AgentParams, targets: &[&Env], cfg: &MetaConfig, seed: u64) -> Result<Gradient> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::config("meta step needs at least one target environment"));
    }
    let k = if cfg.k == 0 { targets.len() } else { cfg.k.min(targets.len()) };
    let with = |theta: &[f64]| AgentParams { theta: theta.to_vec(), ..phi_meta.clone() };
    let data = first_order_meta_grad(
        &phi_meta.theta,
        k,
        cfg.alpha,
        |i, theta| {
            let p = with(theta);
            let s = rng::derive(rng::derive(seed, tag::META_TRAIN), i as u64);
            let log = sim::run_episode(targets[i], &p, cfg.inner_batch, SelectMode::Sample, s)?;
            Ok(aux_loss_batch(&p, &log, BackwardOptions::default())?.1.data)
        },
        |i, theta| {
            let p = with(theta);
            let mut logs = EpisodeLog::default();
            for e in 0..cfg.episodes_per_meta_test {
                let s = rng::derive(rng::derive(rng::derive(seed, tag::META_TEST), i as u64), e as u64);
                logs.extend(sim::run_episode(targets[i], &p, cfg.episode_len, SelectMode::Sample, s)?);
            }
            let b = logs.mean_reward();
            if !b.is_finite() {
                return Err(Error::Numerical("meta-test reward is not finite".into()));
            }
            Ok(policy_loss_reg(&p, &logs, Baseline::Fixed(b), cfg.entropy_coef)?.1.data)
        },
    )?;
    Ok(Gradient { data })
}

/// One plain meta-update `phi - beta * sum_k grad_k` over `targets`.
pub fn meta_step(phi_meta: &AgentParams, targets: &[&Env], cfg: &MetaConfig, seed: u64) -> Result<AgentParams> {
    let g = meta_gradient(phi_meta, targets, cfg, seed)?;
    let theta = phi_meta.theta.iter().zip(&g.data).map(|(p, g)| p - cfg.beta * g).collect();
    let out = AgentParams { theta, ..phi_meta.clone() };
    if !out.is_finite() {
        return Err(Error::Numerical("meta parameters diverged".into()));
    }
    Ok(out)
}

/// `iters` meta-updates from `phi`. With `cfg.outer_adam` the summed
/// gradient drives an Adam step of size `beta` instead of a plain step.
pub fn meta_train_on(phi: &AgentParams, targets: &[&Env], cfg: &MetaConfig, iters: usize, seed: u64) -> Result<AgentParams> {
    let mut phi = phi.clone();
    let mut opt = Adam::for_params(cfg.beta, &phi);
    for it in 0..iters {
        let s = rng::derive(seed, it as u64);
        if cfg.outer_adam {
            let g = meta_gradient(&phi, targets, cfg, s)?;
            opt.update(&mut phi, &g);
            if !phi.is_finite() {
                return Err(Error::Numerical("meta parameters diverged".into()));
            }
        } else {
            phi = meta_step(&phi, targets, cfg, s)?;
        }
    }
    Ok(phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub n_steps: usize,
    /// Frames observed per optimizer step.
    pub batch: usize,
    pub lr: f64,
    /// Frames drawn uniformly from everything observed so far for each
    /// step; 0 trains on the newest batch only.
    pub replay: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { n_steps: 200, batch: 16, lr: 1e-3, replay: 64 }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub params: AgentParams,
    /// Every frame processed while adapting, in order.
    pub frames: EpisodeLog,
    /// Batch aux loss before each step.
    pub losses: Vec<f64>,
}

/// Fine-tune on the target device through the delay-prediction loss only.
///
/// The agent keeps running the stream greedily; each step observes `batch`
/// frames and takes one optimizer step on the aux loss of a replayed sample.
pub fn adapt_on_device(phi: &AgentParams, env: &Env, cfg: &AdaptConfig, seed: u64) -> Result<AdaptOutcome> {
    let mut params = phi.clone();
    let mut frames = EpisodeLog::default();
    let mut losses = Vec::with_capacity(cfg.n_steps);
    if cfg.n_steps == 0 || cfg.batch == 0 {
        return Ok(AdaptOutcome { params, frames, losses });
    }
    let total = cfg.n_steps * cfg.batch;
    let traj = env.trajectory(total, rng::derive(seed, tag::ADAPT))?;
    let mut opt = Adam::for_params(cfg.lr, &params);
    // The stream continues across steps; only the parameters change.
    let mut cursor = sim::Cursor::new(env, &traj, rng::derive(seed, tag::ADAPT));
    let mut pick = rng::sub_rng(seed, tag::REPLAY);
    for step in 0..cfg.n_steps {
        let batch = cursor.advance(env, &params, SelectMode::Greedy, cfg.batch)?;
        if let Some(e) = &batch.aborted {
            return Err(Error::Backend(e.clone()));
        }
        frames.extend(batch.clone());
        let sample = if cfg.replay == 0 {
            batch
        } else {
            let steps = (0..cfg.replay).map(|_| frames.steps[pick.random_range(0..frames.len())].clone()).collect();
            EpisodeLog { steps, aborted: None }
        };
        let (loss, g) = aux_loss_batch(&params, &sample, BackwardOptions::default())?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("adaptation step {step}: aux loss {loss}")));
        }
        losses.push(loss);
        opt.update(&mut params, &g);
    }
    Ok(AdaptOutcome { params, frames, losses })
}
