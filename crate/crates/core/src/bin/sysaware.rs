use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use sysaware::agent::{AgentParams, SelectMode};
use sysaware::config::{Backend, ExperimentConfig, SweepParam};
use sysaware::device::{self, calibrate_profile, DelaySample};
use sysaware::error::{Error, Result};
use sysaware::harness::{self, Provenance, Report, ReportRow, TrajectoryMetrics};
use sysaware::kernel::{available_cores, KernelBackend, LoadWorkers};
use sysaware::metrics;
use sysaware::rng;
use sysaware::sim::{self, Env};
use sysaware::status::SystemStatus;
use sysaware::training;

#[derive(Parser)]
#[command(name = "sysaware", version, about = "System-status-aware adaptive inference control")]
struct Cli {
    /// Experiment config (JSON). Defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an agent on the configured device.
    Train,
    /// Evaluate a checkpoint on the held-out trajectories.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pretrain on the source devices, then run meta-updates over their
    /// augmented variants.
    MetaTrain {
        /// Start from this checkpoint instead of pretraining.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on a device through delay prediction only.
    Adapt {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Device name; defaults to the transfer target.
        #[arg(long)]
        device: Option<String>,
    },
    /// Random, stream-only, full agent, and oracle on the held-out trajectories.
    BaselineSuite {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Upper bound, direct transfer, fine-tune, and meta-adapted rows on the target device.
    TransferSuite,
    /// Retrain and evaluate for each value of d_b or lambda_acc.
    Sweep {
        #[arg(long, value_enum)]
        param: Option<SweepParam>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Fit base speed and overhead from delay samples.
    Calibrate {
        /// JSON list of samples; when absent, samples are collected from the backend.
        #[arg(long)]
        samples: Option<PathBuf>,
        /// Template profile name.
        #[arg(long)]
        device: Option<String>,
    },
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn write_report(out: &Path, r: &Report) -> Result<()> {
    fs::write(out.join("report.json"), r.to_json()?)?;
    print!("{}", r.table());
    Ok(())
}

fn write_csv(out: &Path, logs: &[sim::EpisodeLog]) -> Result<()> {
    let mut w = BufWriter::new(File::create(out.join("episodes.csv"))?);
    harness::write_episodes_csv(logs, &mut w)
}

fn load_checkpoint(path: &Option<PathBuf>, out: &Path) -> Result<AgentParams> {
    let p = path.clone().unwrap_or_else(|| out.join("agent.bin"));
    AgentParams::load(&p).map_err(|e| Error::config(format!("cannot load checkpoint {}: {e}", p.display())))
}

fn attach_backend(cfg: &ExperimentConfig, env: &mut Env) -> Result<()> {
    if cfg.backend == Backend::Measured {
        env.measured = Some(Arc::new(KernelBackend::new(cfg.kernel)?));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(b) = cli.backend {
        cfg.backend = b;
    }
    cfg.validate()?;
    let out = cli.out.as_path();
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), &cfg)?;

    match cli.cmd {
        Cmd::Train => {
            let t = harness::run_train(&cfg)?;
            t.params.save(&out.join("agent.bin"))?;
            let mut w = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
            harness::write_train_log(&t.history, &mut w)?;
            let (r, logs) = harness::run_eval(&cfg, &t.params)?;
            write_csv(out, &logs)?;
            write_report(out, &r)?;
        }
        Cmd::Eval { checkpoint } => {
            let params = load_checkpoint(&checkpoint, out)?;
            let (r, logs) = if cfg.backend == Backend::Measured {
                let mut env = cfg.env()?;
                attach_backend(&cfg, &mut env)?;
                let ctrl = sim::Controller::Agent { params: &params, mode: SelectMode::Greedy };
                let (rows, logs) = harness::evaluate(&env, ctrl, &cfg.eval_seeds, cfg.eval_steps)?;
                let r = Report {
                    kind: "eval".into(),
                    rows: vec![ReportRow::new("agent", rows)?],
                    provenance: Provenance::of(&cfg),
                };
                (r, logs)
            } else {
                harness::run_eval(&cfg, &params)?
            };
            write_csv(out, &logs)?;
            write_report(out, &r)?;
        }
        Cmd::MetaTrain { checkpoint } => {
            let phi = match checkpoint {
                Some(_) => load_checkpoint(&checkpoint, out)?,
                None => {
                    let t = harness::pretrain_sources(&cfg)?;
                    let mut w = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
                    harness::write_train_log(&t.history, &mut w)?;
                    t.params
                }
            };
            let phi = harness::meta_train(&cfg, &phi)?;
            phi.save(&out.join("agent.bin"))?;
            println!("meta-trained agent written to {}", out.join("agent.bin").display());
        }
        Cmd::Adapt { checkpoint, device } => {
            let params = load_checkpoint(&checkpoint, out)?;
            let name = device.unwrap_or_else(|| cfg.transfer.target.clone());
            let mut env = cfg.env_for(&name)?;
            attach_backend(&cfg, &mut env)?;
            let ad = training::adapt_on_device(&params, &env, &cfg.adapt, cfg.seed)?;
            ad.params.save(&out.join("agent.bin"))?;
            let test = sim::run_episode(&env, &ad.params, cfg.eval_steps, SelectMode::Greedy, cfg.eval_seeds[0])?;
            let m = metrics::compute_metrics(&[&ad.frames, &test])?;
            let mut row = ReportRow::new("adapted", vec![TrajectoryMetrics { seed: cfg.eval_seeds[0], metrics: m }])?;
            row.extra.insert("aux_rmse_before".into(), training::aux_rmse(&params, &test)?);
            row.extra.insert("aux_rmse_after".into(), training::aux_rmse(&ad.params, &test)?);
            write_csv(out, &[ad.frames, test])?;
            write_report(out, &Report { kind: "adapt".into(), rows: vec![row], provenance: Provenance::of(&cfg) })?;
        }
        Cmd::BaselineSuite { checkpoint } => {
            let san = match checkpoint {
                Some(_) => Some(load_checkpoint(&checkpoint, out)?),
                None => None,
            };
            write_report(out, &harness::run_baseline_suite(&cfg, san.as_ref())?)?;
        }
        Cmd::TransferSuite => {
            let t = harness::run_transfer_suite(&cfg)?;
            t.meta.save(&out.join("agent_msa.bin"))?;
            write_report(out, &t.report)?;
        }
        Cmd::Sweep { param, values } => {
            let param = param.unwrap_or(cfg.sweep.param);
            let values = values.unwrap_or_else(|| cfg.sweep.values.clone());
            write_report(out, &harness::run_sweep(&cfg, param, &values)?)?;
        }
        Cmd::Calibrate { samples, device } => {
            let template = cfg.profile(device.as_deref().unwrap_or(&cfg.device))?;
            let samples: Vec<DelaySample> = match samples {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => collect_samples(&cfg, &template)?,
            };
            let fit = calibrate_profile(&samples, &template)?;
            write_json(&out.join("profile.json"), &fit)?;
            println!(
                "base_speed {:.2} overhead {:.6} s fit_rmse {:.6} s",
                fit.profile.base_speed, fit.profile.overhead, fit.fit_rmse
            );
        }
    }
    Ok(())
}

/// Three samples per action at several load levels.
fn collect_samples(cfg: &ExperimentConfig, template: &device::DeviceProfile) -> Result<Vec<DelaySample>> {
    let space = cfg.action_space.build()?;
    let mut out = Vec::new();
    match cfg.backend {
        Backend::Modeled => {
            let mut r = rng::rng(cfg.seed);
            for load in [0.0, 0.25, 0.5, 0.75] {
                let st = SystemStatus { load, per_proc_active: vec![], aux_signals: [0.0; 2] };
                for a in space.actions() {
                    for _ in 0..3 {
                        let d = device::model_delay(template, a, &st, Some(&mut r));
                        out.push(DelaySample { action: *a, load, measured_delay: d });
                    }
                }
            }
        }
        Backend::Measured => {
            let kb = KernelBackend::new(cfg.kernel)?;
            let cores = available_cores();
            for workers in [0, cores / 2] {
                let _w = LoadWorkers::spawn(workers);
                let load = workers as f64 / cores as f64;
                for a in space.actions() {
                    for _ in 0..3 {
                        let d = kb.measured_delay(device::action_cost(template, a))?;
                        out.push(DelaySample { action: *a, load, measured_delay: d.max(1e-9) });
                    }
                }
            }
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
