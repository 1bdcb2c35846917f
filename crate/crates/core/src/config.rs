//! Experiment configuration, read from JSON. Unknown keys are rejected and
//! every field has a default, so `{}` is a valid config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::device::{self, DeviceProfile, AUGMENT_FRACS};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::sim::Env;
use crate::status::{self, BackgroundProcess};
use crate::stream::{ActionSpaceConfig, QualityTable, StreamParams};
use crate::training::{AdaptConfig, MetaConfig, RewardConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
    Meta,
    Adapt,
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Modeled,
    Measured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    #[value(name = "d_b")]
    DB,
    #[value(name = "lambda_acc")]
    LambdaAcc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { param: SweepParam::DB, values: vec![0.010, 0.020, 0.030, 0.040] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub sources: Vec<String>,
    pub target: String,
    /// Speed fractions applied to each source to synthesize meta-training devices.
    pub augment_fracs: Vec<f64>,
    pub meta_iters: usize,
    pub meta: MetaConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            sources: vec!["b".into(), "c".into()],
            target: "a".into(),
            augment_fracs: AUGMENT_FRACS.to_vec(),
            meta_iters: 300,
            meta: MetaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub action_space: ActionSpaceConfig,
    pub quality: QualityTable,
    pub stream: StreamParams,
    pub devices: Vec<DeviceProfile>,
    /// Device used by `train`, `eval`, and the baseline suite.
    pub device: String,
    pub processes: Vec<BackgroundProcess>,
    pub cap: f64,
    pub reward: RewardConfig,
    /// Root seed; agent init and training episodes derive from it.
    pub seed: u64,
    /// Held-out evaluation trajectories.
    pub eval_seeds: Vec<u64>,
    pub eval_steps: usize,
    pub mode: Mode,
    pub backend: Backend,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub transfer: TransferConfig,
    pub sweep: SweepConfig,
    pub kernel: KernelSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            action_space: ActionSpaceConfig::default(),
            quality: QualityTable::default(),
            stream: StreamParams::default(),
            devices: device::default_profiles(),
            device: "a".into(),
            processes: status::default_processes(),
            cap: status::DEFAULT_CAP,
            reward: RewardConfig::default(),
            seed: 1,
            eval_seeds: vec![9001, 9002, 9003],
            eval_steps: 2000,
            mode: Mode::default(),
            backend: Backend::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            transfer: TransferConfig::default(),
            sweep: SweepConfig::default(),
            kernel: KernelSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let space = self.action_space.build()?;
        self.quality.validate(&space)?;
        self.stream.validate()?;
        self.reward.validate()?;
        if !(self.cap > 0.0 && self.cap <= 1.0) {
            return Err(Error::config(format!("cap {} not in (0, 1]", self.cap)));
        }
        for p in &self.processes {
            p.validate()?;
        }
        for d in &self.devices {
            d.validate()?;
            if d.depth_frac.len() != space.n_depths() {
                return Err(Error::config(format!("device {} exit count differs from action space", d.name)));
            }
        }
        self.profile(&self.device)?;
        if self.eval_seeds.is_empty() || self.eval_steps == 0 {
            return Err(Error::config("need at least one evaluation seed and step"));
        }
        if self.train.episode_len == 0 || !(self.train.lr > 0.0) {
            return Err(Error::config("train.episode_len and train.lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.train.baseline_decay) {
            return Err(Error::config("train.baseline_decay must lie in [0, 1)"));
        }
        self.transfer.meta.validate()?;
        if self.transfer.sources.len() < 2 {
            return Err(Error::config("transfer needs at least two source devices"));
        }
        for s in &self.transfer.sources {
            self.profile(s)?;
            if *s == self.transfer.target {
                return Err(Error::config("transfer target must not be a source"));
            }
        }
        self.profile(&self.transfer.target)?;
        for &f in &self.transfer.augment_fracs {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!("augment fraction {f} not in (0, 1]")));
            }
        }
        if self.sweep.values.is_empty() {
            return Err(Error::config("sweep values must be non-empty"));
        }
        Ok(())
    }

    pub fn profile(&self, name: &str) -> Result<DeviceProfile> {
        self.devices
            .iter()
            .find(|d| d.name == name)
            .cloned()
            .ok_or_else(|| Error::config(format!("no device named {name:?}")))
    }

    /// Environment on the named device.
    pub fn env_for(&self, device: &str) -> Result<Env> {
        let mut env = Env::new(
            self.action_space.build()?,
            self.quality.clone(),
            self.stream,
            self.profile(device)?,
            self.processes.clone(),
            self.reward,
        )?;
        env.cap = self.cap;
        Ok(env)
    }

    pub fn env(&self) -> Result<Env> {
        self.env_for(&self.device)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
