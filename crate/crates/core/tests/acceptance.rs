//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any gating criterion fails.
//!
//! The measured-backend bench (C11) is always reported but only gates when
//! `SYSAWARE_BENCH=1`, since wall-clock timings are host noise.

mod common;

use std::f64::consts::LN_2;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use sysaware::agent::{self, AgentDims, AgentParams, AgentState};
use sysaware::config::{ExperimentConfig, SweepParam};
use sysaware::device::DeviceProfile;
use sysaware::harness::{self, Report, ReportRow};
use sysaware::kernel::{available_cores, KernelBackend, KernelSpec, LoadWorkers};
use sysaware::sim::{EpisodeLog, StepRecord};
use sysaware::training::{self, Baseline, RewardConfig};

struct Outcome {
    id: &'static str,
    pass: bool,
    gating: bool,
    detail: String,
}

fn check(id: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { id, pass, gating: true, detail }
}

fn row<'a>(r: &'a Report, name: &str) -> &'a ReportRow {
    r.row(name).unwrap_or_else(|| panic!("report has no row {name}"))
}

fn c1() -> Outcome {
    let t = Instant::now();
    let g = common::gradient_check(100, 1e-5, 1e-8);
    let el = t.elapsed();
    check(
        "C1",
        g.max_rel < 1e-4 && el < Duration::from_secs(30) && g.checked > 0,
        format!(
            "{} coords checked ({} in double-double), max rel err {:.2e}, {:.1}s",
            g.checked,
            g.refined,
            g.max_rel,
            el.as_secs_f64()
        ),
    )
}

fn step(prob: f64, reward: f64) -> StepRecord {
    StepRecord {
        t: 0,
        state: AgentState { x: vec![0.1; 21] },
        action: 4,
        res_index: 1,
        depth_index: 1,
        prob,
        load: 0.0,
        difficulty: 0.0,
        acc: 0.0,
        delay: 0.02,
        reward,
        d_hat: None,
    }
}

fn c2() -> Outcome {
    let mut fails = Vec::new();
    let mut near = |what: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs().is_nan() || (got - want).abs() > tol {
            fails.push(format!("{what}: {got} vs {want}"));
        }
    };
    let rc = RewardConfig { lambda_acc: 2.0, d_b: 0.03 };
    near("r(1.0, 20ms)", training::reward(1.0, 0.02, &rc), 2.0, 1e-12);
    near("r(0.5, 50ms)", training::reward(0.5, 0.05, &rc), 0.98, 1e-12);
    near("r(0, d_b)", training::reward(0.0, 0.03, &rc), 0.0, 1e-12);

    let p = AgentParams::init(AgentDims::new(3, 3), 0.03, 3);
    let log = |steps| EpisodeLog { steps, aborted: None };
    let (l1, _) = training::policy_loss(&p, &log(vec![step(0.5, 1.98)]), Baseline::None).unwrap();
    near("L one step", l1, 1.98 * LN_2, 1e-12);
    near("L one step (4dp)", (l1 * 1e4).round() / 1e4, 1.3724, 1e-12);
    let (l2, _) = training::policy_loss(&p, &log(vec![step(0.5, 1.0), step(0.25, 2.0)]), Baseline::None).unwrap();
    near("L two steps", l2, LN_2 + 2.0 * 4f64.ln(), 1e-12);
    let (l0, g0) = training::policy_loss(&p, &log(vec![step(0.3, 0.0), step(0.7, 0.0)]), Baseline::None).unwrap();
    near("L zero rewards", l0, 0.0, 0.0);
    near("grad zero rewards", g0.norm(), 0.0, 0.0);

    near("aux(40ms, 30ms)", training::aux_loss(0.04, 0.03), 1e-4, 1e-12);
    near("aux symmetric", training::aux_loss(0.03, 0.04) - training::aux_loss(0.04, 0.03), 0.0, 0.0);

    // phi=1, L_aux = phi^2, L_pi = (phi-1)^2, alpha = beta = 0.1
    let inner = |_: usize, x: &[f64]| Ok(vec![2.0 * x[0]]);
    let outer = |_: usize, x: &[f64]| Ok(vec![2.0 * (x[0] - 1.0)]);
    let g = training::first_order_meta_grad(&[1.0], 1, 0.1, inner, outer).unwrap();
    near("meta grad", g[0], -0.4, 1e-12);
    let phi = training::first_order_meta_update(&[1.0], 1, 0.1, 0.1, inner, outer).unwrap();
    near("meta update", phi[0], 1.04, 1e-12);
    let phi0 = training::first_order_meta_update(&[1.0], 1, 0.1, 0.0, inner, outer).unwrap();
    near("meta beta=0", phi0[0], 1.0, 0.0);
    let phi3 = training::first_order_meta_update(&[1.0], 3, 0.1, 0.1, inner, outer).unwrap();
    near("meta K=3", phi3[0] - 1.0, 3.0 * 0.04, 1e-12);

    let z = AgentParams::zeros(AgentDims::new(3, 3), 0.03);
    let f = agent::policy_forward(&z, &AgentState { x: vec![0.5; 21] }).unwrap();
    for q in &f.dist.probs {
        near("uniform prob", *q, 1.0 / 9.0, 1e-12);
    }
    near("softmax sum", f.dist.probs.iter().sum(), 1.0, 1e-9);
    near("softplus(0) d_b", agent::predict_delay(&z, &f.features, 0), LN_2 * 0.03, 1e-12);

    let detail = if fails.is_empty() { "reward, policy loss, aux loss, meta chain, softmax".into() } else { fails.join("; ") };
    check("C2", fails.is_empty(), detail)
}

fn cli(out: &Path, args: &[&str]) {
    let st = Command::new(env!("CARGO_BIN_EXE_sysaware"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .status()
        .expect("run sysaware");
    assert!(st.success(), "sysaware {args:?} failed");
}

fn c3() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for run in ["one", "two"] {
        let out = dir.path().join(run);
        cli(&out, &["train", "--seed", "1"]);
        cli(&out, &["eval", "--seed", "1"]);
        reports.push(std::fs::read(out.join("report.json")).unwrap());
    }
    check("C3", reports[0] == reports[1], format!("eval report.json {} bytes, identical: {}", reports[0].len(), reports[0] == reports[1]))
}

fn c4(b: &Report, secs: f64) -> Outcome {
    let (r, s) = (&row(b, "random").aggregate, &row(b, "san").aggregate);
    let pass = s.rt_fraction >= r.rt_fraction + 0.05
        && s.max_delay <= 0.75 * r.max_delay
        && s.mean_reward >= 1.2 * r.mean_reward
        && secs < 600.0;
    check(
        "C4",
        pass,
        format!(
            "rt {:.3} vs {:.3}, max {:.1} vs {:.1} ms, reward {:.4} vs {:.4} ({:.2}x), suite {secs:.0}s",
            s.rt_fraction,
            r.rt_fraction,
            s.max_delay * 1e3,
            r.max_delay * 1e3,
            s.mean_reward,
            r.mean_reward,
            s.mean_reward / r.mean_reward
        ),
    )
}

fn c5(b: &Report) -> Outcome {
    let key = "p95_delay_load_gt_0.7";
    let (so, san) = (row(b, "stream_aware"), row(b, "san"));
    let (p_so, p_san) = (so.extra.get(key).copied(), san.extra.get(key).copied());
    let (a_so, a_san) = (so.aggregate.mean_accuracy, san.aggregate.mean_accuracy);
    let pass = matches!((p_so, p_san), (Some(x), Some(y)) if x > y) && a_san >= a_so - 0.03;
    check(
        "C5",
        pass,
        format!(
            "p95 delay at load>0.7: stream-only {:.1} ms, SAN {:.1} ms; acc SAN {:.4} vs stream-only {:.4}",
            p_so.unwrap_or(f64::NAN) * 1e3,
            p_san.unwrap_or(f64::NAN) * 1e3,
            a_san,
            a_so
        ),
    )
}

fn c6(sw: &Report) -> Outcome {
    let d: Vec<f64> = sw.rows.iter().map(|r| r.aggregate.mean_delay).collect();
    let a: Vec<f64> = sw.rows.iter().map(|r| r.aggregate.mean_accuracy).collect();
    let pass = d.windows(2).all(|w| w[1] > w[0]) && a.windows(2).all(|w| w[1] >= w[0] - 0.005);
    check("C6", pass, format!("delay ms {:.2?}, acc {:.4?}", d.iter().map(|v| v * 1e3).collect::<Vec<_>>(), a))
}

fn c7(sw: &Report) -> Outcome {
    let d: Vec<f64> = sw.rows.iter().map(|r| r.aggregate.mean_delay).collect();
    let a: Vec<f64> = sw.rows.iter().map(|r| r.aggregate.mean_accuracy).collect();
    let pass = d.windows(2).all(|w| w[1] >= w[0]) && a.windows(2).all(|w| w[1] >= w[0]);
    check("C7", pass, format!("delay ms {:.2?}, acc {:.4?}", d.iter().map(|v| v * 1e3).collect::<Vec<_>>(), a))
}

fn c8(t: &Report) -> Outcome {
    let cut = |r: &ReportRow| 1.0 - r.extra["aux_rmse_after"] / r.extra["aux_rmse_before"];
    let (msa, ft) = (row(t, "msa"), row(t, "fine_tune"));
    check(
        "C8",
        cut(msa) >= 0.5,
        format!(
            "held-out RMSE {:.2} -> {:.2} ms ({:.0}% cut) after 200 steps from the meta-trained agent; from the pretrained agent {:.0}%",
            msa.extra["aux_rmse_before"] * 1e3,
            msa.extra["aux_rmse_after"] * 1e3,
            100.0 * cut(msa),
            100.0 * cut(ft)
        ),
    )
}

fn c9(t: &Report, secs: f64) -> Outcome {
    let r = |n| row(t, n).aggregate.mean_reward;
    let (ub, dt, ft, msa) = (r("upper_bound"), r("direct_transfer"), r("fine_tune"), r("msa"));
    let (g_dt, g_msa) = (ub - dt, ub - msa);
    let pass = g_msa <= 0.5 * g_dt && msa >= ft && secs < 1200.0;
    check(
        "C9",
        pass,
        format!("reward upper {ub:.4}, direct {dt:.4}, fine-tune {ft:.4}, msa {msa:.4}; gaps msa {g_msa:.4} vs direct {g_dt:.4}; {secs:.0}s"),
    )
}

fn c10(b: &Report) -> Outcome {
    let ratio = row(b, "san").aggregate.mean_reward / row(b, "oracle").aggregate.mean_reward;
    let note = if (0.80..0.85).contains(&ratio) { " (waiver band 80-85%)" } else { "" };
    check("C10", ratio >= 0.80, format!("SAN / oracle reward {:.1}%{note}", 100.0 * ratio))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c11() -> Outcome {
    let gating = std::env::var("SYSAWARE_BENCH").is_ok_and(|v| v == "1");
    let kb = KernelBackend::new(KernelSpec::default()).unwrap();
    // Full-resolution, full-depth action.
    let cost = DeviceProfile::new("bench", 2000.0).kappa;
    let time = |c: f64| median((0..15).map(|_| kb.measured_delay(c).unwrap()).collect());
    time(cost);
    let (t1, t2) = (time(cost), time(2.0 * cost));
    let ratio = t2 / t1;
    let loaded = {
        let _w = LoadWorkers::spawn(available_cores());
        std::thread::sleep(Duration::from_millis(20));
        time(cost)
    };
    let pass = (1.6..=2.4).contains(&ratio) && loaded > t1;
    Outcome {
        id: "C11",
        pass,
        gating,
        detail: format!(
            "2x cost ratio {ratio:.2}, idle {:.2} ms, loaded {:.2} ms{}",
            t1 * 1e3,
            loaded * 1e3,
            if gating { "" } else { " (reported only; SYSAWARE_BENCH=1 to gate)" }
        ),
    }
}

fn main() {
    // Passing a filter that does not name this suite skips it.
    if std::env::args().skip(1).any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }
    let cfg = ExperimentConfig::default();
    let mut out = vec![c1(), c2(), c3()];

    let t = Instant::now();
    let base = harness::run_baseline_suite(&cfg, None).expect("baseline suite");
    let base_secs = t.elapsed().as_secs_f64();
    out.push(c4(&base, base_secs));
    out.push(c5(&base));

    let db = harness::run_sweep(&cfg, SweepParam::DB, &[0.010, 0.020, 0.030, 0.040]).expect("d_b sweep");
    out.push(c6(&db));
    let lam = harness::run_sweep(&cfg, SweepParam::LambdaAcc, &[1.0, 2.0, 4.0]).expect("lambda sweep");
    out.push(c7(&lam));

    let t = Instant::now();
    let tr = harness::run_transfer_suite(&cfg).expect("transfer suite").report;
    let tr_secs = t.elapsed().as_secs_f64();
    out.push(c8(&tr));
    out.push(c9(&tr, tr_secs));
    out.push(c10(&base));
    out.push(c11());

    println!();
    for o in &out {
        println!("{:<4} {}  {}", o.id, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<_> = out.iter().filter(|o| o.gating && !o.pass).map(|o| o.id).collect();
    if !failed.is_empty() {
        eprintln!("acceptance failed: {failed:?}");
        std::process::exit(1);
    }
}
