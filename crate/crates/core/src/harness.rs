//! Experiment orchestration: evaluation on held-out trajectories, reports,
//! and the baseline, transfer, and sweep suites.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentParams, SelectMode, StateMask};
use crate::config::{ExperimentConfig, SweepParam};
use crate::device::augment_profiles;
use crate::error::{Error, Result};
use crate::metrics::{self, Metrics};
use crate::rng;
use crate::sim::{self, Controller, Env, EpisodeLog};
use crate::training::{self, IterRecord, TrainOutcome};

/// Tags used to derive per-stage seeds from the root seed.
mod stage {
    pub const INIT: u64 = 100;
    pub const TRAIN: u64 = 101;
    pub const STREAM_ONLY: u64 = 102;
    pub const PRETRAIN: u64 = 103;
    pub const UPPER: u64 = 104;
    pub const META: u64 = 105;
    pub const ADAPT: u64 = 106;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub per_trajectory: Vec<TrajectoryMetrics>,
    pub aggregate: Metrics,
    /// Row-specific extras such as high-load delay percentiles.
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

impl ReportRow {
    pub fn new(name: &str, per_trajectory: Vec<TrajectoryMetrics>) -> Result<Self> {
        let rows: Vec<Metrics> = per_trajectory.iter().map(|t| t.metrics).collect();
        Ok(Self { name: name.to_string(), aggregate: Metrics::mean_of(&rows)?, per_trajectory, extra: BTreeMap::new() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub eval_seeds: Vec<u64>,
    pub code_version: String,
    pub backend: String,
}

impl Provenance {
    pub fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            eval_seeds: cfg.eval_seeds.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            backend: format!("{:?}", cfg.backend).to_lowercase(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: String,
    pub rows: Vec<ReportRow>,
    pub provenance: Provenance,
}

impl Report {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text comparison table of the aggregate rows.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<22} {:>8} {:>10} {:>10} {:>8} {:>8}\n",
            "row", "acc", "max_ms", "mean_ms", "rt", "reward"
        );
        for r in &self.rows {
            let m = &r.aggregate;
            s += &format!(
                "{:<22} {:>8.4} {:>10.2} {:>10.2} {:>8.4} {:>8.4}\n",
                r.name,
                m.mean_accuracy,
                m.max_delay * 1e3,
                m.mean_delay * 1e3,
                m.rt_fraction,
                m.mean_reward
            );
            for (k, v) in &r.extra {
                s += &format!("    {k} {v:.6}\n");
            }
        }
        s
    }
}

/// Evaluate a controller on each held-out seed. Returns per-seed metrics and logs.
pub fn evaluate(
    env: &Env,
    ctrl: Controller,
    seeds: &[u64],
    steps: usize,
) -> Result<(Vec<TrajectoryMetrics>, Vec<EpisodeLog>)> {
    let mut rows = Vec::with_capacity(seeds.len());
    let mut logs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let log = sim::run_controller(env, ctrl, steps, seed)?;
        if let Some(e) = &log.aborted {
            return Err(Error::Backend(format!("evaluation on seed {seed} aborted: {e}")));
        }
        rows.push(TrajectoryMetrics { seed, metrics: metrics::compute_metrics(&[&log])? });
        logs.push(log);
    }
    Ok((rows, logs))
}

fn row_from(name: &str, env: &Env, ctrl: Controller, cfg: &ExperimentConfig) -> Result<(ReportRow, Vec<EpisodeLog>)> {
    let (rows, logs) = evaluate(env, ctrl, &cfg.eval_seeds, cfg.eval_steps)?;
    let mut row = ReportRow::new(name, rows)?;
    let refs: Vec<&EpisodeLog> = logs.iter().collect();
    if let Some(p) = metrics::high_load_delay_percentile(&refs, 0.7, 95.0) {
        row.extra.insert("p95_delay_load_gt_0.7".into(), p);
    }
    Ok((row, logs))
}

pub fn initial_params(cfg: &ExperimentConfig, env: &Env) -> AgentParams {
    AgentParams::init(env.dims(), cfg.reward.d_b, rng::derive(cfg.seed, stage::INIT))
}

/// Train a fresh agent on the configured device.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let env = cfg.env()?;
    training::train_agent(&env, initial_params(cfg, &env), &cfg.train, rng::derive(cfg.seed, stage::TRAIN))
}

/// Greedy evaluation of `params` on the held-out trajectories.
pub fn run_eval(cfg: &ExperimentConfig, params: &AgentParams) -> Result<(Report, Vec<EpisodeLog>)> {
    let env = cfg.env()?;
    let (row, logs) = row_from("agent", &env, Controller::Agent { params, mode: SelectMode::Greedy }, cfg)?;
    Ok((Report { kind: "eval".into(), rows: vec![row], provenance: Provenance::of(cfg) }, logs))
}

/// Random policy, stream-aware-only agent, full agent, and the expected-reward
/// oracle on the same held-out trajectories.
pub fn run_baseline_suite(cfg: &ExperimentConfig, san: Option<&AgentParams>) -> Result<Report> {
    let env = cfg.env()?;
    let trained;
    let san = match san {
        Some(p) => p,
        None => {
            trained = run_train(cfg)?.params;
            &trained
        }
    };
    let blind_env = env.with_mask(StateMask::STREAM_ONLY);
    let blind = training::train_agent(
        &blind_env,
        initial_params(cfg, &env),
        &cfg.train,
        rng::derive(cfg.seed, stage::STREAM_ONLY),
    )?
    .params;

    let rows = vec![
        row_from("random", &env, Controller::Random, cfg)?.0,
        row_from("stream_aware", &blind_env, Controller::Agent { params: &blind, mode: SelectMode::Greedy }, cfg)?.0,
        row_from("san", &env, Controller::Agent { params: san, mode: SelectMode::Greedy }, cfg)?.0,
        row_from("oracle", &env, Controller::Oracle, cfg)?.0,
    ];
    Ok(Report { kind: "baseline".into(), rows, provenance: Provenance::of(cfg) })
}

/// Per-trajectory deployment: adapt on the first part of the stream, then
/// keep running; metrics cover both phases.
fn adapted_row(name: &str, env: &Env, params: &AgentParams, cfg: &ExperimentConfig) -> Result<ReportRow> {
    let mut per = Vec::with_capacity(cfg.eval_seeds.len());
    let mut rmse_before = 0.0;
    let mut rmse_after = 0.0;
    for &seed in &cfg.eval_seeds {
        let ad = training::adapt_on_device(params, env, &cfg.adapt, rng::derive(seed, stage::ADAPT))?;
        let test = sim::run_episode(env, &ad.params, cfg.eval_steps, SelectMode::Greedy, seed)?;
        rmse_before += training::aux_rmse(params, &test)?;
        rmse_after += training::aux_rmse(&ad.params, &test)?;
        per.push(TrajectoryMetrics { seed, metrics: metrics::compute_metrics(&[&ad.frames, &test])? });
    }
    let mut row = ReportRow::new(name, per)?;
    let k = cfg.eval_seeds.len() as f64;
    row.extra.insert("aux_rmse_before".into(), rmse_before / k);
    row.extra.insert("aux_rmse_after".into(), rmse_after / k);
    Ok(row)
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub report: Report,
    pub pretrained: AgentParams,
    pub meta: AgentParams,
    pub upper: AgentParams,
}

/// Policy-gradient pretraining on the (unaugmented) transfer sources.
pub fn pretrain_sources(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let tc = &cfg.transfer;
    let target = cfg.env_for(&tc.target)?;
    let sources: Vec<Env> = tc.sources.iter().map(|s| cfg.env_for(s)).collect::<Result<_>>()?;
    let refs: Vec<&Env> = sources.iter().collect();
    training::train_on(&refs, initial_params(cfg, &target), &cfg.train, rng::derive(cfg.seed, stage::PRETRAIN))
}

/// The meta-training devices: every source restricted by every fraction.
pub fn augmented_sources(cfg: &ExperimentConfig) -> Result<Vec<Env>> {
    let tc = &cfg.transfer;
    let target = cfg.env_for(&tc.target)?;
    let profiles: Vec<_> = tc.sources.iter().map(|s| cfg.profile(s)).collect::<Result<_>>()?;
    Ok(augment_profiles(&profiles, &tc.augment_fracs)?.into_iter().map(|p| target.with_profile(p)).collect())
}

/// `transfer.meta_iters` meta-updates starting from `phi`.
pub fn meta_train(cfg: &ExperimentConfig, phi: &AgentParams) -> Result<AgentParams> {
    let tc = &cfg.transfer;
    let aug = augmented_sources(cfg)?;
    let refs: Vec<&Env> = aug.iter().collect();
    training::meta_train_on(phi, &refs, &tc.meta, tc.meta_iters, rng::derive(cfg.seed, stage::META))
}

/// Upper bound, direct transfer, self-supervised fine-tune, and meta-adapted
/// rows for one held-out target device.
pub fn run_transfer_suite(cfg: &ExperimentConfig) -> Result<TransferOutcome> {
    let target = cfg.env_for(&cfg.transfer.target)?;
    let init = initial_params(cfg, &target);
    let upper = training::train_agent(&target, init, &cfg.train, rng::derive(cfg.seed, stage::UPPER))?.params;
    let pretrained = pretrain_sources(cfg)?.params;
    let meta = meta_train(cfg, &pretrained)?;

    let greedy = |p| Controller::Agent { params: p, mode: SelectMode::Greedy };
    let rows = vec![
        row_from("upper_bound", &target, greedy(&upper), cfg)?.0,
        row_from("direct_transfer", &target, greedy(&pretrained), cfg)?.0,
        adapted_row("fine_tune", &target, &pretrained, cfg)?,
        adapted_row("msa", &target, &meta, cfg)?,
    ];
    Ok(TransferOutcome {
        report: Report { kind: "transfer".into(), rows, provenance: Provenance::of(cfg) },
        pretrained,
        meta,
        upper,
    })
}

/// Retrain from the same initialization and seeds for each value.
pub fn run_sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Report> {
    if values.is_empty() {
        return Err(Error::config("sweep values must be non-empty"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        match param {
            SweepParam::DB => c.reward.d_b = v,
            SweepParam::LambdaAcc => c.reward.lambda_acc = v,
        }
        c.validate()?;
        let params = run_train(&c)?.params;
        let env = c.env()?;
        let (mut row, _) = row_from("", &env, Controller::Agent { params: &params, mode: SelectMode::Greedy }, &c)?;
        row.name = format!("{}={v}", if param == SweepParam::DB { "d_b" } else { "lambda_acc" });
        rows.push(row);
    }
    Ok(Report { kind: "sweep".into(), rows, provenance: Provenance::of(cfg) })
}

/// `t, action_i, action_j, prob, load, acc, delay_s, reward` per frame.
pub fn write_episodes_csv(logs: &[EpisodeLog], w: &mut impl Write) -> Result<()> {
    writeln!(w, "t,action_i,action_j,prob,load,acc,delay_s,reward")?;
    for log in logs {
        for s in &log.steps {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                s.t, s.res_index, s.depth_index, s.prob, s.load, s.acc, s.delay, s.reward
            )?;
        }
    }
    Ok(())
}

pub fn write_train_log(history: &[IterRecord], w: &mut impl Write) -> Result<()> {
    training::write_jsonl(history, w)
}
