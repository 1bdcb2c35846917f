//! The policy network and its auxiliary delay head, with hand-derived
//! gradients.
//!
//! Parameters live in one flat `Vec<f64>`; each tensor is a row-major
//! (out x in) block at a fixed offset. The same layout is used for gradients,
//! optimizer moments, and checkpoints.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::status::{SystemStatus, STATUS_FEATURES};
use crate::stream::{ActionSpace, StreamFeature, STREAM_FEATURES};

pub const HIDDEN: usize = 64;
pub const AUX_HIDDEN: usize = 32;
/// Shrinks the policy-head init so no action starts out favored.
pub const POLICY_INIT_SCALE: f64 = 0.01;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentDims {
    pub m: usize,
    pub n: usize,
    /// Stream feature width.
    pub h: usize,
    /// Status feature width.
    pub s: usize,
}

impl AgentDims {
    pub fn new(m: usize, n: usize) -> Self {
        Self { m, n, h: STREAM_FEATURES, s: STATUS_FEATURES }
    }

    pub fn for_space(space: &ActionSpace) -> Self {
        Self::new(space.n_res(), space.n_depths())
    }

    pub fn n_actions(&self) -> usize {
        self.m * self.n
    }

    /// `H + S + m*n + 1`
    pub fn input_dim(&self) -> usize {
        self.h + self.s + self.n_actions() + 1
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub w1: Block,
    pub b1: Block,
    pub w2: Block,
    pub b2: Block,
    pub wp: Block,
    pub bp: Block,
    pub wa1: Block,
    pub ba1: Block,
    pub wa2: Block,
    pub ba2: Block,
    pub total: usize,
}

impl Layout {
    fn new(d: &AgentDims) -> Self {
        let a = d.n_actions();
        let mut off = 0;
        let mut next = |rows: usize, cols: usize| {
            let b = Block { offset: off, rows, cols };
            off += rows * cols;
            b
        };
        let w1 = next(HIDDEN, d.input_dim());
        let b1 = next(HIDDEN, 1);
        let w2 = next(HIDDEN, HIDDEN);
        let b2 = next(HIDDEN, 1);
        let wp = next(a, HIDDEN);
        let bp = next(a, 1);
        let wa1 = next(AUX_HIDDEN, HIDDEN + a);
        let ba1 = next(AUX_HIDDEN, 1);
        let wa2 = next(1, AUX_HIDDEN);
        let ba2 = next(1, 1);
        Self { w1, b1, w2, b2, wp, bp, wa1, ba1, wa2, ba2, total: off }
    }

    /// All weight blocks paired with their fan-in/fan-out, biases excluded.
    fn weights(&self) -> [Block; 5] {
        [self.w1, self.w2, self.wp, self.wa1, self.wa2]
    }

    /// The aux-head blocks.
    pub fn aux_head(&self) -> [Block; 4] {
        [self.wa1, self.ba1, self.wa2, self.ba2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    pub dims: AgentDims,
    /// Output scale of the delay head, the delay tolerance in seconds.
    pub delay_scale: f64,
    pub seed: u64,
    pub theta: Vec<f64>,
}

impl AgentParams {
    pub fn zeros(dims: AgentDims, delay_scale: f64) -> Self {
        let total = dims.layout().total;
        Self { dims, delay_scale, seed: 0, theta: vec![0.0; total] }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: AgentDims, delay_scale: f64, seed: u64) -> Self {
        let mut p = Self::zeros(dims, delay_scale);
        p.seed = seed;
        let mut r = rng::sub_rng(seed, rng::tag::INIT);
        let l = p.layout();
        for b in l.weights() {
            let mut bound = (6.0 / (b.rows + b.cols) as f64).sqrt();
            // Near-uniform initial policy.
            if b == l.wp {
                bound *= POLICY_INIT_SCALE;
            }
            for v in &mut p.theta[b.range()] {
                *v = r.random_range(-bound..=bound);
            }
        }
        p
    }

    pub fn layout(&self) -> Layout {
        self.dims.layout()
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn block(&self, b: Block) -> &[f64] {
        &self.theta[b.range()]
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    /// `theta += scale * g`
    pub fn add_scaled(&mut self, g: &Gradient, scale: f64) {
        for (t, v) in self.theta.iter_mut().zip(&g.data) {
            *t += scale * v;
        }
    }

    pub fn distance(&self, other: &AgentParams) -> f64 {
        self.theta.iter().zip(&other.theta).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }

    pub fn sidecar(&self) -> CheckpointMeta {
        CheckpointMeta {
            dims: vec![self.dims.input_dim(), HIDDEN, HIDDEN, self.dims.n_actions(), AUX_HIDDEN, 1],
            m: self.dims.m,
            n: self.dims.n,
            h: self.dims.h,
            s: self.dims.s,
            seed: self.seed,
            delay_scale: self.delay_scale,
            format_version: FORMAT_VERSION,
        }
    }

    /// Write `<path>` (little-endian f64 array) and `<path>.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.theta.len() * 8);
        for v in &self.theta {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, bytes)?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.sidecar())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::config(format!("unsupported checkpoint version {}", meta.format_version)));
        }
        let dims = AgentDims { m: meta.m, n: meta.n, h: meta.h, s: meta.s };
        let bytes = fs::read(path)?;
        let total = dims.layout().total;
        if bytes.len() != total * 8 {
            return Err(Error::config(format!(
                "checkpoint holds {} bytes, expected {}",
                bytes.len(),
                total * 8
            )));
        }
        let theta = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self { dims, delay_scale: meta.delay_scale, seed: meta.seed, theta })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Layer widths: input, trunk, trunk, policy, aux hidden, aux out.
    pub dims: Vec<usize>,
    pub m: usize,
    pub n: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub seed: u64,
    pub delay_scale: f64,
    pub format_version: u32,
}

/// Same shape as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub data: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(p: &AgentParams) -> Self {
        Self { data: vec![0.0; p.theta.len()] }
    }

    pub fn add(&mut self, other: &Gradient) {
        self.add_scaled(other, 1.0);
    }

    pub fn add_scaled(&mut self, other: &Gradient, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Observed state `[h, sys, onehot(a_prev), d_prev / d_b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: Vec<f64>,
}

/// Channels of the state that can be blanked for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StateMask {
    pub hide_status: bool,
    pub hide_prev_delay: bool,
}

impl StateMask {
    /// Blind to the host: no status features and no delay feedback.
    pub const STREAM_ONLY: StateMask = StateMask { hide_status: true, hide_prev_delay: true };
}

impl AgentState {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        dims: &AgentDims,
        h: &StreamFeature,
        status: &SystemStatus,
        prev_action: Option<usize>,
        prev_delay: f64,
        d_b: f64,
        mask: StateMask,
    ) -> Self {
        let mut x = Vec::with_capacity(dims.input_dim());
        x.extend_from_slice(h.as_slice());
        if mask.hide_status {
            x.extend(std::iter::repeat_n(0.0, dims.s));
        } else {
            x.extend_from_slice(&status.features());
        }
        let mut onehot = vec![0.0; dims.n_actions()];
        if let Some(a) = prev_action {
            onehot[a] = 1.0;
        }
        x.extend(onehot);
        x.push(if mask.hide_prev_delay { 0.0 } else { prev_delay / d_b });
        Self { x }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDistribution {
    pub probs: Vec<f64>,
}

impl PolicyDistribution {
    pub fn uniform(k: usize) -> Self {
        Self { probs: vec![1.0 / k as f64; k] }
    }

    /// Lowest index among the maxima.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    Greedy,
    Sample,
}

/// Intermediate activations of one trunk + policy pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub z2: Vec<f64>,
    /// Trunk output shared by both heads.
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    pub dist: PolicyDistribution,
}

#[derive(Debug, Clone)]
pub struct AuxForward {
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub out: f64,
    pub d_hat: f64,
}

fn affine(theta: &[f64], w: Block, b: Block, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let wm = &theta[w.range()];
    let bv = &theta[b.range()];
    for r in 0..w.rows {
        let row = &wm[r * w.cols..(r + 1) * w.cols];
        let mut acc = bv[r];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        out.push(acc);
    }
}

fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| v.max(0.0)).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_dim(params: &AgentParams, state: &AgentState) -> Result<()> {
    let want = params.dims.input_dim();
    if state.dim() != want {
        return Err(Error::config(format!("state has {} entries, agent expects {want}", state.dim())));
    }
    if params.theta.len() != params.layout().total {
        return Err(Error::config("parameter vector does not match its layout"));
    }
    Ok(())
}

pub fn policy_forward(params: &AgentParams, state: &AgentState) -> Result<Forward> {
    check_dim(params, state)?;
    let l = params.layout();
    let th = &params.theta;
    let mut z1 = Vec::with_capacity(HIDDEN);
    affine(th, l.w1, l.b1, &state.x, &mut z1);
    let a1 = relu(&z1);
    let mut z2 = Vec::with_capacity(HIDDEN);
    affine(th, l.w2, l.b2, &a1, &mut z2);
    let features = relu(&z2);
    let mut logits = Vec::with_capacity(params.dims.n_actions());
    affine(th, l.wp, l.bp, &features, &mut logits);
    let dist = PolicyDistribution { probs: softmax(&logits) };
    Ok(Forward { z1, a1, z2, features, logits, dist })
}

fn aux_input(features: &[f64], action: usize, n_actions: usize) -> Vec<f64> {
    let mut u = Vec::with_capacity(features.len() + n_actions);
    u.extend_from_slice(features);
    u.extend((0..n_actions).map(|k| if k == action { 1.0 } else { 0.0 }));
    u
}

pub fn aux_forward(params: &AgentParams, features: &[f64], action: usize) -> AuxForward {
    let l = params.layout();
    let u = aux_input(features, action, params.dims.n_actions());
    let mut z = Vec::with_capacity(AUX_HIDDEN);
    affine(&params.theta, l.wa1, l.ba1, &u, &mut z);
    let a = relu(&z);
    let w2 = params.block(l.wa2);
    let out = params.block(l.ba2)[0] + w2.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>();
    AuxForward { z, a, out, d_hat: softplus(out) * params.delay_scale }
}

/// Predicted delay in seconds for taking `action` given trunk `features`.
pub fn predict_delay(params: &AgentParams, features: &[f64], action: usize) -> f64 {
    aux_forward(params, features, action).d_hat
}

/// Pick an action; returns `(flat_index, probability)`.
pub fn select_action<R: Rng + ?Sized>(dist: &PolicyDistribution, mode: SelectMode, rng: &mut R) -> (usize, f64) {
    let k = match mode {
        SelectMode::Greedy => dist.argmax(),
        SelectMode::Sample => {
            let u: f64 = rng.random();
            let mut c = 0.0;
            let mut pick = dist.probs.len() - 1;
            for (i, &p) in dist.probs.iter().enumerate() {
                c += p;
                if u < c {
                    pick = i;
                    break;
                }
            }
            // rounding can leave the tail short of 1; never return a zero-probability action
            while dist.probs[pick] == 0.0 && pick > 0 {
                pick -= 1;
            }
            pick
        }
    };
    (k, dist.probs[k])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardOptions {
    /// Let the aux loss gradient reach the shared trunk.
    pub aux_into_trunk: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self { aux_into_trunk: true }
    }
}

/// Accumulate into `grad` the gradient of
/// `-reward_coeff * ln p(action) + (aux_target - d_hat(action))^2`,
/// the aux term only when `aux_target` is given.
#[allow(clippy::too_many_arguments)]
pub fn backward_into(
    params: &AgentParams,
    state: &AgentState,
    fwd: &Forward,
    action: usize,
    reward_coeff: f64,
    aux_target: Option<f64>,
    opts: BackwardOptions,
    grad: &mut Gradient,
) {
    let l = params.layout();
    let th = &params.theta;
    let g = &mut grad.data;
    let na = params.dims.n_actions();
    let mut df = vec![0.0; HIDDEN];
    let mut trunk_live = false;

    if reward_coeff != 0.0 {
        trunk_live = true;
        for k in 0..na {
            let dl = reward_coeff * (fwd.dist.probs[k] - if k == action { 1.0 } else { 0.0 });
            g[l.bp.offset + k] += dl;
            let row = l.wp.offset + k * HIDDEN;
            for h in 0..HIDDEN {
                g[row + h] += dl * fwd.features[h];
                df[h] += dl * th[row + h];
            }
        }
    }

    if let Some(target) = aux_target {
        let aux = aux_forward(params, &fwd.features, action);
        let g_out = 2.0 * (aux.d_hat - target) * params.delay_scale * sigmoid(aux.out);
        g[l.ba2.offset] += g_out;
        let u = aux_input(&fwd.features, action, na);
        let mut du = vec![0.0; u.len()];
        for j in 0..AUX_HIDDEN {
            g[l.wa2.offset + j] += g_out * aux.a[j];
            if aux.z[j] <= 0.0 {
                continue;
            }
            let dz = g_out * th[l.wa2.offset + j];
            g[l.ba1.offset + j] += dz;
            let row = l.wa1.offset + j * l.wa1.cols;
            for (c, &uc) in u.iter().enumerate() {
                g[row + c] += dz * uc;
                du[c] += dz * th[row + c];
            }
        }
        if opts.aux_into_trunk {
            trunk_live = true;
            for h in 0..HIDDEN {
                df[h] += du[h];
            }
        }
    }

    if !trunk_live {
        return;
    }
    let mut da1 = vec![0.0; HIDDEN];
    for r in 0..HIDDEN {
        if fwd.z2[r] <= 0.0 {
            continue;
        }
        let dz = df[r];
        g[l.b2.offset + r] += dz;
        let row = l.w2.offset + r * HIDDEN;
        for c in 0..HIDDEN {
            g[row + c] += dz * fwd.a1[c];
            da1[c] += dz * th[row + c];
        }
    }
    let d = l.w1.cols;
    for r in 0..HIDDEN {
        if fwd.z1[r] <= 0.0 {
            continue;
        }
        let dz = da1[r];
        g[l.b1.offset + r] += dz;
        let row = l.w1.offset + r * d;
        for c in 0..d {
            g[row + c] += dz * state.x[c];
        }
    }
}

/// Gradient of the requested loss terms for a single step.
pub fn backward(
    params: &AgentParams,
    state: &AgentState,
    action: usize,
    reward_coeff: f64,
    aux_target: Option<f64>,
) -> Result<Gradient> {
    let fwd = policy_forward(params, state)?;
    let mut g = Gradient::zeros_like(params);
    backward_into(params, state, &fwd, action, reward_coeff, aux_target, BackwardOptions::default(), &mut g);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::build_action_space;

    fn dims() -> AgentDims {
        AgentDims::new(3, 3)
    }

    fn random_state(seed: u64, d: &AgentDims) -> AgentState {
        let mut r = rng::rng(seed);
        AgentState { x: (0..d.input_dim()).map(|_| r.random_range(-1.0..1.0)).collect() }
    }

    #[test]
    fn input_dim_is_21_for_default_space() {
        let s = build_action_space(&[128, 192, 256], 3).unwrap();
        assert_eq!(AgentDims::for_space(&s).input_dim(), 21);
    }

    #[test]
    fn zero_params_give_uniform_policy() {
        let d = dims();
        let p = AgentParams::zeros(d, 0.03);
        let f = policy_forward(&p, &random_state(1, &d)).unwrap();
        for &q in &f.dist.probs {
            assert!((q - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_params_predict_softplus_zero() {
        let d = dims();
        let p = AgentParams::zeros(d, 0.03);
        let f = policy_forward(&p, &random_state(2, &d)).unwrap();
        let want = std::f64::consts::LN_2 * 0.03;
        assert!((predict_delay(&p, &f.features, 4) - want).abs() < 1e-15);
        assert!((want - 0.0208).abs() < 1e-4);
    }

    #[test]
    fn logit_shift_leaves_probs_unchanged() {
        let d = dims();
        let mut p = AgentParams::init(d, 0.03, 5);
        let s = random_state(3, &d);
        let before = policy_forward(&p, &s).unwrap().dist.probs;
        let bp = p.layout().bp;
        for v in &mut p.theta[bp.range()] {
            *v += 17.5;
        }
        let after = policy_forward(&p, &s).unwrap().dist.probs;
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let p = AgentParams::init(dims(), 0.03, 1);
        let err = policy_forward(&p, &AgentState { x: vec![0.0; 5] }).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn greedy_examples() {
        let mut r = rng::rng(0);
        let d = PolicyDistribution { probs: vec![0.1, 0.7, 0.2] };
        assert_eq!(select_action(&d, SelectMode::Greedy, &mut r), (1, 0.7));
        let d = PolicyDistribution { probs: vec![0.5, 0.5] };
        assert_eq!(select_action(&d, SelectMode::Greedy, &mut r), (0, 0.5));
    }

    #[test]
    fn sampling_is_reproducible_and_uniform() {
        let d = PolicyDistribution::uniform(4);
        let draw = |seed| {
            let mut r = rng::rng(seed);
            (0..100_000).map(|_| select_action(&d, SelectMode::Sample, &mut r).0).collect::<Vec<_>>()
        };
        let xs = draw(42);
        assert_eq!(xs, draw(42));
        let mut counts = [0usize; 4];
        for &x in &xs {
            counts[x] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn sampling_skips_zero_probability_actions() {
        let d = PolicyDistribution { probs: vec![0.0, 1.0, 0.0] };
        let mut r = rng::rng(1);
        for _ in 0..1000 {
            assert_eq!(select_action(&d, SelectMode::Sample, &mut r).0, 1);
        }
    }

    #[test]
    fn zero_coefficients_give_zero_gradient() {
        let d = dims();
        let p = AgentParams::init(d, 0.03, 9);
        let g = backward(&p, &random_state(4, &d), 3, 0.0, None).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn policy_head_gradient_closed_form() {
        let d = dims();
        let p = AgentParams::init(d, 0.03, 11);
        let s = random_state(5, &d);
        let f = policy_forward(&p, &s).unwrap();
        let c = 1.7;
        let a = 6;
        let g = backward(&p, &s, a, c, None).unwrap();
        let l = p.layout();
        for k in 0..9 {
            let dl = c * (f.dist.probs[k] - if k == a { 1.0 } else { 0.0 });
            assert!((g.data[l.bp.offset + k] - dl).abs() < 1e-14);
            for h in 0..HIDDEN {
                assert!((g.data[l.wp.offset + k * HIDDEN + h] - dl * f.features[h]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn policy_loss_leaves_aux_head_untouched() {
        let d = dims();
        let p = AgentParams::init(d, 0.03, 12);
        let g = backward(&p, &random_state(6, &d), 2, 1.0, None).unwrap();
        for b in p.layout().aux_head() {
            assert!(g.data[b.range()].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn aux_gradient_can_be_confined_to_head() {
        let d = dims();
        let p = AgentParams::init(d, 0.03, 13);
        let s = random_state(7, &d);
        let f = policy_forward(&p, &s).unwrap();
        let mut g = Gradient::zeros_like(&p);
        let opts = BackwardOptions { aux_into_trunk: false };
        backward_into(&p, &s, &f, 1, 0.0, Some(0.05), opts, &mut g);
        let l = p.layout();
        assert!(g.data[..l.wa1.offset].iter().all(|&v| v == 0.0));
        assert!(g.data[l.wa1.offset..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn unused_action_slot_does_not_affect_prediction() {
        let d = dims();
        let mut p = AgentParams::init(d, 0.03, 14);
        let f = policy_forward(&p, &random_state(8, &d)).unwrap();
        let before = predict_delay(&p, &f.features, 2);
        let l = p.layout();
        for j in 0..AUX_HIDDEN {
            p.theta[l.wa1.offset + j * l.wa1.cols + HIDDEN + 5] += 3.0;
        }
        assert_eq!(predict_delay(&p, &f.features, 2), before);
        assert_ne!(predict_delay(&p, &f.features, 5), before);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let d = dims();
        let a = AgentParams::init(d, 0.03, 21);
        assert_eq!(a, AgentParams::init(d, 0.03, 21));
        assert_ne!(a.theta, AgentParams::init(d, 0.03, 22).theta);
        let l = a.layout();
        let bound = (6.0 / (HIDDEN + d.input_dim()) as f64).sqrt();
        assert!(a.block(l.w1).iter().all(|v| v.abs() <= bound));
        assert!(a.block(l.b1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.bin");
        let p = AgentParams::init(dims(), 0.03, 33);
        p.save(&path).unwrap();
        assert_eq!(AgentParams::load(&path).unwrap(), p);
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("agent.bin.json")).unwrap()).unwrap();
        for k in ["dims", "m", "n", "H", "S", "seed", "format_version"] {
            assert!(meta.get(k).is_some(), "missing {k}");
        }
    }

    #[test]
    fn state_mask_blanks_status_and_delay() {
        let d = dims();
        let st = SystemStatus { load: 0.7, per_proc_active: vec![], aux_signals: [0.6, 0.1] };
        let h = StreamFeature::default();
        let full = AgentState::build(&d, &h, &st, Some(4), 0.06, 0.03, StateMask::default());
        assert_eq!(full.dim(), 21);
        assert_eq!(&full.x[8..11], &[0.7, 0.6, 0.1]);
        assert_eq!(full.x[11 + 4], 1.0);
        assert!((full.x[20] - 2.0).abs() < 1e-12);
        let blind = AgentState::build(&d, &h, &st, Some(4), 0.06, 0.03, StateMask::STREAM_ONLY);
        assert_eq!(&blind.x[8..11], &[0.0; 3]);
        assert_eq!(blind.x[20], 0.0);
        assert_eq!(blind.x[11 + 4], 1.0);
    }
}
