//! Parametric delay model for a compute device.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::status::SystemStatus;
use crate::stream::Action;

pub const DEFAULT_DEPTH_FRAC: [f64; 3] = [0.45, 0.75, 1.0];
pub const DEFAULT_RES_REF: u32 = 256;
pub const DEFAULT_KAPPA: f64 = 36.54;
pub const DEFAULT_OVERHEAD: f64 = 0.003;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;
pub const DEFAULT_CAPACITY_FLOOR: f64 = 0.05;

/// Speed fractions used to synthesize extra training devices.
pub const AUGMENT_FRACS: [f64; 3] = [1.0, 0.75, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    /// Work units per second with the device otherwise idle.
    pub base_speed: f64,
    /// Cumulative cost fraction at each exit; last entry is 1.
    pub depth_frac: Vec<f64>,
    pub res_ref: u32,
    /// Work units of a full-depth pass at `res_ref`.
    pub kappa: f64,
    /// Fixed per-frame cost in seconds.
    pub overhead: f64,
    pub noise_sigma: f64,
    #[serde(default = "default_floor")]
    pub capacity_floor: f64,
}

fn default_floor() -> f64 {
    DEFAULT_CAPACITY_FLOOR
}

impl DeviceProfile {
    pub fn new(name: &str, base_speed: f64) -> Self {
        Self {
            name: name.to_string(),
            base_speed,
            depth_frac: DEFAULT_DEPTH_FRAC.to_vec(),
            res_ref: DEFAULT_RES_REF,
            kappa: DEFAULT_KAPPA,
            overhead: DEFAULT_OVERHEAD,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            capacity_floor: DEFAULT_CAPACITY_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_speed > 0.0 && self.base_speed.is_finite()) {
            return Err(Error::config(format!("{}: base_speed must be positive", self.name)));
        }
        if self.depth_frac.is_empty() {
            return Err(Error::config(format!("{}: depth_frac is empty", self.name)));
        }
        if self.depth_frac[0] <= 0.0 || self.depth_frac.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "{}: depth_frac must be positive and strictly increasing",
                self.name
            )));
        }
        if *self.depth_frac.last().unwrap() != 1.0 {
            return Err(Error::config(format!("{}: depth_frac must end at 1.0", self.name)));
        }
        if self.res_ref == 0 || !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::config(format!("{}: res_ref and kappa must be positive", self.name)));
        }
        if !(self.overhead >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::config(format!(
                "{}: overhead and noise_sigma must be non-negative",
                self.name
            )));
        }
        if !(self.capacity_floor > 0.0 && self.capacity_floor < 1.0) {
            return Err(Error::config(format!("{}: capacity_floor not in (0, 1)", self.name)));
        }
        Ok(())
    }

    pub fn action_cost(&self, action: &Action) -> f64 {
        action_cost(self, action)
    }

    /// Effective fraction of the device left to the foreground.
    pub fn capacity(&self, load: f64) -> f64 {
        (1.0 - load).max(self.capacity_floor)
    }

    /// Noise-free delay of `cost` work units at `load`.
    pub fn delay_for_cost(&self, cost: f64, load: f64) -> f64 {
        cost / (self.base_speed * self.capacity(load)) + self.overhead
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: DeviceProfile = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

/// The three named devices, ordered slowest to fastest.
pub fn default_profiles() -> Vec<DeviceProfile> {
    vec![
        DeviceProfile::new("a", 2000.0),
        DeviceProfile::new("b", 2600.0),
        DeviceProfile::new("c", 4000.0),
    ]
}

pub fn profile_by_name(name: &str) -> Result<DeviceProfile> {
    default_profiles()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::config(format!("unknown device profile {name:?}")))
}

/// `kappa * (res / res_ref)^2 * depth_frac[j]`.
pub fn action_cost(profile: &DeviceProfile, action: &Action) -> f64 {
    let r = action.res as f64 / profile.res_ref as f64;
    profile.kappa * r * r * profile.depth_frac[action.depth_index]
}

/// Delay in seconds. Multiplicative lognormal noise is applied only when an
/// rng is supplied and `noise_sigma > 0`.
pub fn model_delay<R: Rng + ?Sized>(
    profile: &DeviceProfile,
    action: &Action,
    status: &SystemStatus,
    rng: Option<&mut R>,
) -> f64 {
    let d = profile.delay_for_cost(action_cost(profile, action), status.load);
    match rng {
        Some(rng) if profile.noise_sigma > 0.0 => {
            let z: f64 = StandardNormal.sample(rng);
            d * (profile.noise_sigma * z).exp()
        }
        _ => d,
    }
}

pub fn restrict_profile(profile: &DeviceProfile, speed_frac: f64) -> Result<DeviceProfile> {
    if !(speed_frac > 0.0 && speed_frac <= 1.0) {
        return Err(Error::config(format!("speed fraction {speed_frac} not in (0, 1]")));
    }
    let mut p = profile.clone();
    p.base_speed *= speed_frac;
    p.name = format!("{}@{speed_frac}", profile.name);
    Ok(p)
}

/// Every profile restricted by every fraction, profile-major.
pub fn augment_profiles(profiles: &[DeviceProfile], fracs: &[f64]) -> Result<Vec<DeviceProfile>> {
    let mut out = Vec::with_capacity(profiles.len() * fracs.len());
    for p in profiles {
        for &f in fracs {
            out.push(restrict_profile(p, f)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelaySample {
    pub action: Action,
    pub load: f64,
    pub measured_delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibratedProfile {
    #[serde(flatten)]
    pub profile: DeviceProfile,
    pub fit_rmse: f64,
}

/// Fit `base_speed` and `overhead` by linear least squares, holding the cost
/// model of `template` fixed.
///
/// With `x = cost / capacity(load)` the model is `delay = x / base_speed + overhead`,
/// which is linear in `(1 / base_speed, overhead)`.
pub fn calibrate_profile(samples: &[DelaySample], template: &DeviceProfile) -> Result<CalibratedProfile> {
    template.validate()?;
    let mut distinct_actions: Vec<usize> = samples.iter().map(|s| s.action.flat_index).collect();
    distinct_actions.sort_unstable();
    distinct_actions.dedup();
    if samples.len() < 3 * distinct_actions.len().max(1) {
        return Err(Error::Calibration(format!(
            "need at least 3 samples per action, got {} samples over {} actions",
            samples.len(),
            distinct_actions.len()
        )));
    }
    let mut loads: Vec<f64> = samples.iter().map(|s| s.load).collect();
    loads.sort_by(f64::total_cmp);
    loads.dedup();
    if loads.len() < 2 {
        return Err(Error::Calibration("samples must span at least two distinct loads".into()));
    }
    if let Some(s) = samples.iter().find(|s| !(s.measured_delay > 0.0 && s.measured_delay.is_finite())) {
        return Err(Error::Calibration(format!("non-positive measured delay {}", s.measured_delay)));
    }
    if let Some(s) = samples.iter().find(|s| s.action.depth_index >= template.depth_frac.len()) {
        return Err(Error::Calibration(format!("action depth {} outside template", s.action.depth_index)));
    }

    let xs: Vec<f64> = samples
        .iter()
        .map(|s| action_cost(template, &s.action) / template.capacity(s.load))
        .collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = samples.iter().map(|s| s.measured_delay).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, s) in xs.iter().zip(samples) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (s.measured_delay - my);
    }
    if sxx <= f64::EPSILON * mx * mx * n {
        return Err(Error::Calibration("sample set is rank deficient".into()));
    }
    let slope = sxy / sxx;
    if slope <= 0.0 {
        return Err(Error::Calibration(format!("fitted inverse speed {slope} is not positive")));
    }
    let intercept = my - slope * mx;

    let mut profile = template.clone();
    profile.base_speed = 1.0 / slope;
    profile.overhead = intercept.max(0.0);
    let sse: f64 = xs
        .iter()
        .zip(samples)
        .map(|(x, s)| {
            let e = x * slope + profile.overhead - s.measured_delay;
            e * e
        })
        .sum();
    Ok(CalibratedProfile { profile, fit_rmse: (sse / n).sqrt() })
}
