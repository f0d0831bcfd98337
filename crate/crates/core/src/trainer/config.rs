use serde::{Deserialize, Serialize};

use crate::anatomy::{AlphaSchedule, WallParams};
use crate::augment::AugPipeline;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, TaskWeights};
use crate::micronet::{AdamWConfig, Stage};
use crate::volume::{PatchPolicy, PatchSpec};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "PROGSEG_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stages: Vec<Stage>,
    pub max_epochs: u32,
    pub patience: u32,
    pub min_delta: f64,
    pub betas: TaskWeights,
    pub alpha: AlphaSchedule,
    pub wall: WallParams,
    pub loss: LossConfig,
    pub optimizer: AdamWConfig,
    /// Training patch; `None` trains on whole volumes.
    pub patch: Option<PatchSpec>,
    pub augment: AugPipeline,
    pub seed: u64,
    /// Binarization threshold for predictions.
    pub threshold: f64,
    /// Use the wall-weighted scar loss in Stage III too.
    pub stage3_weighted: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stages: vec![Stage::I, Stage::II, Stage::III],
            max_epochs: 250,
            patience: 30,
            min_delta: 1e-4,
            betas: TaskWeights::default(),
            alpha: AlphaSchedule::default(),
            wall: WallParams::default(),
            loss: LossConfig::default(),
            optimizer: AdamWConfig::default(),
            patch: None,
            augment: AugPipeline::default(),
            seed: 0,
            threshold: 0.5,
            stage3_weighted: false,
        }
    }
}

const KEYS: &[&str] = &[
    "stages",
    "max_epochs",
    "patience",
    "min_delta",
    "beta_la",
    "beta_scar",
    "alpha_max",
    "ramp_epochs",
    "delta_in",
    "delta_out",
    "lambda",
    "epsilon",
    "clamp",
    "weight_mode",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "patch",
    "patch_policy",
    "augment",
    "seed",
    "threshold",
    "stage3_weighted",
];

pub fn parse_stages(s: &str) -> Result<Vec<Stage>> {
    let stages = s
        .split(',')
        .map(|t| t.parse::<Stage>())
        .collect::<Result<Vec<_>>>()?;
    if stages.is_empty() || stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("stages must be increasing, got {s:?}")));
    }
    Ok(stages)
}

impl TrainConfig {
    /// Defaults overridden by a `key = value` file. Keys prefixed with
    /// `augment.` configure the augmentation pipeline; `augment = false`
    /// disables it.
    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        let mut own = KeyValues::default();
        let mut aug = KeyValues::default();
        for k in kv.keys() {
            let v = kv.get_str(k).unwrap_or_default();
            match k.strip_prefix("augment.") {
                Some(rest) => aug.insert(rest, v),
                None => own.insert(k, v),
            }
        }
        own.ensure_known(KEYS)?;
        let mut c = TrainConfig {
            augment: AugPipeline::from_config(&aug)?,
            ..TrainConfig::default()
        };
        if let Some(s) = own.get_str("stages") {
            c.stages = parse_stages(s)?;
        }
        macro_rules! set {
            ($key:literal, $slot:expr) => {
                if let Some(v) = own.get($key)? {
                    $slot = v;
                }
            };
        }
        set!("max_epochs", c.max_epochs);
        set!("patience", c.patience);
        set!("min_delta", c.min_delta);
        set!("beta_la", c.betas.beta_la);
        set!("beta_scar", c.betas.beta_scar);
        set!("alpha_max", c.alpha.alpha_max);
        set!("ramp_epochs", c.alpha.ramp_epochs);
        set!("delta_in", c.wall.delta_in);
        set!("delta_out", c.wall.delta_out);
        set!("lambda", c.loss.lambda);
        set!("epsilon", c.loss.epsilon);
        set!("clamp", c.loss.clamp);
        set!("weight_mode", c.loss.weight_mode);
        set!("lr", c.optimizer.lr);
        set!("beta1", c.optimizer.beta1);
        set!("beta2", c.optimizer.beta2);
        set!("adam_eps", c.optimizer.eps);
        set!("weight_decay", c.optimizer.weight_decay);
        set!("seed", c.seed);
        set!("threshold", c.threshold);
        set!("stage3_weighted", c.stage3_weighted);
        if let Some(size) = own.get_array::<usize, 3>("patch")? {
            let policy = match own.get_str("patch_policy").unwrap_or("label") {
                "label" => PatchPolicy::CenteredOnLabel,
                "random" => PatchPolicy::Random,
                other => {
                    return Err(Error::Config(format!("patch_policy must be label or random, got {other:?}")))
                }
            };
            c.patch = Some(PatchSpec::new(size, policy));
        }
        if own.get::<bool>("augment")? == Some(false) {
            c.augment = AugPipeline::disabled();
        }
        c.validate()?;
        Ok(c)
    }

    /// Applies the `PROGSEG_SEED` override when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs and patience must be positive".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config(format!("min_delta must be >= 0, got {}", self.min_delta)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must be in (0, 1), got {}", self.threshold)));
        }
        if let Some(p) = &self.patch {
            if p.size.iter().any(|&s| s == 0 || s % 4 != 0) {
                return Err(Error::Config(format!("patch dims must be positive multiples of 4, got {:?}", p.size)));
            }
        }
        self.alpha.validate()?;
        self.wall.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.augment.validate()
    }

    /// Per-stage generator seed derived from the run seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed ^ (stage.number() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}
