//! Test-side oracles, written without reference to the library's own
//! forward pass.

#![allow(dead_code)]

use std::ops::{Add, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sysaware::agent::{AgentDims, AgentParams, AgentState, AUX_HIDDEN, HIDDEN};
use twofloat::TwoFloat;

pub trait Real: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> {
    fn of(x: f64) -> Self;
    fn hi(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn hi(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
}

impl Real for TwoFloat {
    fn of(x: f64) -> Self {
        TwoFloat::from(x)
    }
    fn hi(self) -> f64 {
        TwoFloat::hi(&self)
    }
    fn exp(self) -> Self {
        TwoFloat::exp(self)
    }
    fn ln(self) -> Self {
        TwoFloat::ln(self)
    }
    fn ln_1p(self) -> Self {
        TwoFloat::ln_1p(self)
    }
}

fn relu<T: Real>(z: T) -> T {
    if z.hi() > 0.0 {
        z
    } else {
        T::of(0.0)
    }
}

/// Pre-activations of every hidden unit, used to keep instances away from
/// the ReLU kinks.
pub struct Trace {
    pub pre: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
/// `-c ln p(a) + (t - d_hat(a))^2` for a network stored as
/// `[W1 b1 W2 b2 Wp bp Wa1 ba1 Wa2 ba2]`, row-major, out x in.
pub fn loss<T: Real>(
    theta: &[T],
    x: &[f64],
    na: usize,
    scale: f64,
    a: usize,
    c: f64,
    t: f64,
    trace: Option<&mut Trace>,
) -> T {
    let d = x.len();
    let mut off = 0;
    let mut take = |n: usize| {
        let r = off..off + n;
        off += n;
        r
    };
    let (w1, b1) = (take(HIDDEN * d), take(HIDDEN));
    let (w2, b2) = (take(HIDDEN * HIDDEN), take(HIDDEN));
    let (wp, bp) = (take(na * HIDDEN), take(na));
    let ua = HIDDEN + na;
    let (wa1, ba1) = (take(AUX_HIDDEN * ua), take(AUX_HIDDEN));
    let (wa2, ba2) = (take(AUX_HIDDEN), take(1));
    assert_eq!(off, theta.len());

    let mut pre = Vec::new();
    let layer = |w: &[T], b: &[T], inp: &[T], pre: &mut Vec<f64>| -> Vec<T> {
        let k = inp.len();
        (0..b.len())
            .map(|r| {
                let mut s = b[r];
                for c in 0..k {
                    s = s + w[r * k + c] * inp[c];
                }
                pre.push(s.hi());
                s
            })
            .collect()
    };
    let xin: Vec<T> = x.iter().map(|&v| T::of(v)).collect();
    let h1: Vec<T> = layer(&theta[w1], &theta[b1], &xin, &mut pre).into_iter().map(relu).collect();
    let h2: Vec<T> = layer(&theta[w2], &theta[b2], &h1, &mut pre).into_iter().map(relu).collect();
    let mut scratch = Vec::new();
    let logits = layer(&theta[wp], &theta[bp], &h2, &mut scratch);

    let mx = logits.iter().map(|l| l.hi()).fold(f64::NEG_INFINITY, f64::max);
    let mut se = T::of(0.0);
    for &l in &logits {
        se = se + (l - T::of(mx)).exp();
    }
    let logp = logits[a] - T::of(mx) - se.ln();

    let mut u = h2.clone();
    u.extend((0..na).map(|k| T::of(if k == a { 1.0 } else { 0.0 })));
    let ha: Vec<T> = layer(&theta[wa1], &theta[ba1], &u, &mut pre).into_iter().map(relu).collect();
    let mut out = theta[ba2][0];
    for (w, h) in theta[wa2].iter().zip(&ha) {
        out = out + *w * *h;
    }
    let sp = if out.hi() > 30.0 { out + (-out).exp() } else { out.exp().ln_1p() };
    let e = T::of(t) - sp * T::of(scale);
    if let Some(tr) = trace {
        tr.pre = pre;
    }
    -(T::of(c) * logp) + e * e
}

/// One randomized gradient-check case.
pub struct Instance {
    pub params: AgentParams,
    pub state: AgentState,
    pub action: usize,
    pub coeff: f64,
    pub target: f64,
}

/// Seeded params with nonzero biases, a plausible state, and random loss
/// weights. Redrawn until every hidden pre-activation clears `margin`.
pub fn instance(seed: u64, margin: f64) -> Instance {
    let dims = AgentDims::new(3, 3);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut params = AgentParams::init(dims, 0.03, r.random());
        let l = params.layout();
        for b in [l.b1, l.b2, l.bp, l.ba1, l.ba2] {
            for v in &mut params.theta[b.range()] {
                *v = r.random_range(-0.2..0.2);
            }
        }
        // Widen the policy head so the softmax is not flat.
        for v in &mut params.theta[l.wp.range()] {
            *v *= r.random_range(1.0..100.0);
        }
        let mut x: Vec<f64> = (0..dims.h).map(|_| r.random_range(0.0..1.0)).collect();
        x.extend((0..dims.s).map(|_| r.random_range(-1.0..1.0)));
        let prev = r.random_range(0..dims.n_actions());
        x.extend((0..dims.n_actions()).map(|k| if k == prev { 1.0 } else { 0.0 }));
        x.push(r.random_range(0.0..3.0));
        let action = r.random_range(0..dims.n_actions());
        let coeff = r.random_range(-2.0..2.0);
        let target = r.random_range(0.005..0.1);

        let mut tr = Trace { pre: vec![] };
        loss(&params.theta, &x, 9, 0.03, action, coeff, target, Some(&mut tr));
        if tr.pre.iter().all(|z| z.abs() > margin) {
            return Instance { params, state: AgentState { x }, action, coeff, target };
        }
    }
}

/// Central difference of the f64 oracle at coordinate `i`, using the
/// representable step actually taken.
pub fn fd_f64(inst: &Instance, theta: &mut [f64], i: usize, eps: f64) -> f64 {
    let t0 = theta[i];
    let (up, dn) = (t0 + eps, t0 - eps);
    let f = |th: &[f64]| loss(th, &inst.state.x, 9, 0.03, inst.action, inst.coeff, inst.target, None);
    theta[i] = up;
    let lu = f(theta);
    theta[i] = dn;
    let ld = f(theta);
    theta[i] = t0;
    (lu - ld) / (up - dn)
}

/// The same difference with the loss evaluated in double-double, where the
/// step is exact.
pub fn fd_dd(inst: &Instance, theta: &mut [TwoFloat], i: usize, eps: f64) -> f64 {
    let t0 = theta[i];
    let f = |th: &[TwoFloat]| loss(th, &inst.state.x, 9, 0.03, inst.action, inst.coeff, inst.target, None);
    theta[i] = t0 + eps;
    let lu = f(theta);
    theta[i] = t0 - eps;
    let ld = f(theta);
    theta[i] = t0;
    ((lu - ld) / (2.0 * eps)).hi()
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates that needed the double-double difference.
    pub refined: usize,
    pub max_rel: f64,
    pub worst: Option<(u64, usize, f64, f64)>,
}

/// Compare `agent::backward` with central differences on `n` instances.
/// Coordinates are checked when either side exceeds `floor` in magnitude.
/// Small ones are re-differenced in double-double, where f64 cancellation
/// would otherwise swamp the step.
pub fn gradient_check(n: u64, eps: f64, floor: f64) -> GradCheck {
    let mut out = GradCheck::default();
    for seed in 0..n {
        let inst = instance(seed, 1e-4);
        let g = sysaware::agent::backward(&inst.params, &inst.state, inst.action, inst.coeff, Some(inst.target))
            .expect("backward");
        let mut th = inst.params.theta.clone();
        let mut dd: Option<Vec<TwoFloat>> = None;
        for (i, &ga) in g.data.iter().enumerate() {
            let mut fd = fd_f64(&inst, &mut th, i, eps);
            let m = ga.abs().max(fd.abs());
            // f64 differences carry ~1e-11 absolute noise: below 1e-9 on both
            // sides the true derivative is under the floor.
            if m < 1e-9 {
                continue;
            }
            if m < 1e-4 {
                let dd = dd.get_or_insert_with(|| th.iter().map(|&v| TwoFloat::from(v)).collect());
                fd = fd_dd(&inst, dd, i, eps);
                out.refined += 1;
            }
            if ga.abs().max(fd.abs()) <= floor {
                continue;
            }
            out.checked += 1;
            let rel = (ga - fd).abs() / ga.abs().max(fd.abs());
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = Some((seed, i, ga, fd));
            }
        }
    }
    out
}
