//! Flat run configuration shared by every command. Unknown keys are rejected and every
//! resolved value is echoed into run traces together with a hash of the echo.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, DESK_STAGE2_LR};
use crate::metatrain::TrainConfig;
use crate::numerics::AdamWConfig;
use crate::personalize::{PersonalizeConfig, SpeedConfig};
use crate::toymodel::{DatasetConfig, ModelDims, PretrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // optimizer
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,

    // model and data
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub prompt_vocab: usize,
    pub identities: usize,
    pub samples_per_identity: usize,
    pub prototype_norm: f64,
    pub subspace_dim: usize,
    pub perturbation_ratio: f64,
    pub prompt_offset_norm: f64,
    pub single_prototype: bool,

    // base pretraining
    pub pretrain_iterations: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_lr: f64,
    pub pretrain_target_ratio: f64,
    pub pretrain_eval_items: usize,

    // stage 1
    pub q_total: usize,
    pub q_bucket: Option<usize>,
    pub q_warm_up: Option<usize>,
    pub warm_up_fraction: f64,
    pub uses_per_example: usize,
    pub batch_size_stage1: usize,
    pub identities_per_bucket: usize,
    pub r1: usize,
    pub r2: usize,
    pub warm_up_on_revisit: bool,
    pub reset_identity_optimizer_on_entry: bool,

    // stage 2
    pub q_st2: usize,
    pub batch_size_stage2: usize,
    pub view_std: f64,

    // adaptation-speed experiment
    pub heldout_identities: usize,
    pub speed_seeds: Vec<u64>,
    pub speed_stage2_lr: f64,
    pub tau_fraction: f64,
    pub smoothing_window: usize,
    pub speed_eval_items: usize,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let data = DatasetConfig::default();
        let dims = ModelDims::default();
        let pre = PretrainConfig::default();
        let s1 = TrainConfig::default();
        let s2 = PersonalizeConfig::default();
        let speed = SpeedConfig::default();
        let exp = ExperimentConfig::default();
        RunConfig {
            seed: 0,
            lr: opt.lr,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            latent_dim: dims.latent_dim,
            hidden_dim: dims.hidden_dim,
            prompt_vocab: dims.prompt_vocab,
            identities: data.identities,
            samples_per_identity: data.samples_per_identity,
            prototype_norm: data.prototype_norm,
            subspace_dim: data.subspace_dim,
            perturbation_ratio: data.perturbation_ratio,
            prompt_offset_norm: data.prompt_offset_norm,
            single_prototype: data.single_prototype,
            pretrain_iterations: pre.iterations,
            pretrain_batch_size: pre.batch_size,
            pretrain_lr: pre.lr,
            pretrain_target_ratio: pre.target_ratio,
            pretrain_eval_items: pre.eval_items,
            q_total: s1.q_total,
            q_bucket: s1.q_bucket,
            q_warm_up: s1.q_warm_up,
            warm_up_fraction: s1.warm_up_fraction,
            uses_per_example: s1.uses_per_example,
            batch_size_stage1: s1.batch_size,
            identities_per_bucket: s1.identities_per_bucket,
            r1: s1.r1,
            r2: s1.r2,
            warm_up_on_revisit: s1.warm_up_on_revisit,
            reset_identity_optimizer_on_entry: s1.reset_identity_optimizer_on_entry,
            q_st2: s2.q_st2,
            batch_size_stage2: s2.batch_size,
            view_std: s2.view_std,
            heldout_identities: exp.heldout_identities,
            speed_seeds: exp.seeds,
            speed_stage2_lr: DESK_STAGE2_LR,
            tau_fraction: speed.tau_fraction,
            smoothing_window: speed.smoothing_window,
            speed_eval_items: speed.eval_items,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.tau_fraction) {
            return Err(Error::Config(format!("tau_fraction {} outside [0, 1]", self.tau_fraction)));
        }
        if self.speed_seeds.is_empty() {
            return Err(Error::Config("speed_seeds is empty".into()));
        }
        self.train_config().validate()?;
        self.personalize_config().validate()?;
        for (d_in, d_out) in self.dims().layer_shapes() {
            crate::adapter::check_ranks(d_in, d_out, self.r1, self.r2).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            prompt_vocab: self.prompt_vocab,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            latent_dim: self.latent_dim,
            prompt_vocab: self.prompt_vocab,
            identities: self.identities,
            samples_per_identity: self.samples_per_identity,
            prototype_norm: self.prototype_norm,
            subspace_dim: self.subspace_dim,
            perturbation_ratio: self.perturbation_ratio,
            prompt_offset_norm: self.prompt_offset_norm,
            single_prototype: self.single_prototype,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            iterations: self.pretrain_iterations,
            batch_size: self.pretrain_batch_size,
            lr: self.pretrain_lr,
            target_ratio: self.pretrain_target_ratio,
            eval_items: self.pretrain_eval_items,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            q_total: self.q_total,
            q_bucket: self.q_bucket,
            q_warm_up: self.q_warm_up,
            warm_up_fraction: self.warm_up_fraction,
            uses_per_example: self.uses_per_example,
            batch_size: self.batch_size_stage1,
            identities_per_bucket: self.identities_per_bucket,
            r1: self.r1,
            r2: self.r2,
            optimizer: self.optimizer(),
            seed: self.seed,
            warm_up_on_revisit: self.warm_up_on_revisit,
            reset_identity_optimizer_on_entry: self.reset_identity_optimizer_on_entry,
            trace_identity_checksums: true,
        }
    }

    pub fn personalize_config(&self) -> PersonalizeConfig {
        PersonalizeConfig {
            q_st2: self.q_st2,
            r2: self.r2,
            batch_size: self.batch_size_stage2,
            optimizer: self.optimizer(),
            seed: self.seed,
            view_std: self.view_std,
        }
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        let mut stage2 = self.personalize_config();
        stage2.optimizer.lr = self.speed_stage2_lr;
        ExperimentConfig {
            dataset: self.dataset_config(),
            heldout_identities: self.heldout_identities,
            dims: self.dims(),
            pretrain: self.pretrain_config(),
            stage1: self.train_config(),
            stage2,
            speed: SpeedConfig {
                tau_fraction: self.tau_fraction,
                smoothing_window: self.smoothing_window,
                eval_items: self.speed_eval_items,
            },
            seeds: self.speed_seeds.clone(),
            threads: self.threads,
        }
    }

    /// Every resolved field as JSON, in declaration order.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON echo.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
