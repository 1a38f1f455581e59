use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::GeneratorKind;
use crate::condenc::{CondLimits, Pooling};
use crate::error::{Error, Result};
use crate::optim::OptimConfig;
use crate::plm::{PlmConfig, PretrainConfig};
use crate::props::PropsConfig;
use crate::tasks::{self, TaskKind, TaskSpec};

/// Every knob of a run as one flat table. Missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorKind,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub plm_path: PathBuf,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_ratio: f64,
    pub clip_norm: f64,
    /// Validation rows decoded per epoch; `0` uses all of them.
    pub max_valid: usize,

    pub plm_d_model: usize,
    pub plm_n_heads: usize,
    pub plm_enc_layers: usize,
    pub plm_dec_layers: usize,
    pub plm_ffn_dim: usize,
    pub plm_max_len: usize,
    pub plm_seed: u64,

    pub pretrain_n_train: usize,
    pub pretrain_n_heldout: usize,
    pub pretrain_min_len: usize,
    pub pretrain_max_len: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_lr: f64,
    pub pretrain_target_accuracy: f64,

    pub n_rules: usize,
    pub k: usize,
    pub layers: usize,
    pub tau: f64,
    pub t_p: usize,
    pub d: usize,
    pub ffn_dim: usize,
    pub transition: bool,
    pub pooling: Pooling,

    pub task: TaskKind,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub primitive: String,
    pub max_train_len: usize,
    pub max_actions: usize,
    pub n_bridges: usize,
    pub few_shot: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub world_seed: u64,
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let o = OptimConfig::default();
        let p = PropsConfig::default();
        let t = TaskSpec::default();
        Self {
            generator: GeneratorKind::Props,
            seeds: vec![1, 2, 3],
            out_dir: PathBuf::from("runs/default"),
            plm_path: PathBuf::from("runs/plm.ckpt"),
            epochs: 20,
            batch_size: 32,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            warmup_ratio: o.warmup_ratio,
            clip_norm: o.clip_norm,
            max_valid: 0,
            plm_d_model: 48,
            plm_n_heads: 4,
            plm_enc_layers: 2,
            plm_dec_layers: 2,
            plm_ffn_dim: 96,
            plm_max_len: 52,
            plm_seed: 1,
            pretrain_n_train: 6000,
            pretrain_n_heldout: 400,
            pretrain_min_len: 2,
            pretrain_max_len: 10,
            pretrain_epochs: 30,
            pretrain_batch_size: 16,
            pretrain_lr: 2e-3,
            pretrain_target_accuracy: 0.99,
            n_rules: p.n_rules,
            k: p.k,
            layers: p.layers,
            tau: p.tau,
            t_p: p.t_p,
            d: 32,
            ffn_dim: 64,
            transition: p.transition,
            pooling: p.pooling,
            task: t.kind,
            n_train: t.n_train,
            n_valid: t.n_valid,
            n_test: t.n_test,
            primitive: t.primitive,
            max_train_len: t.max_train_len,
            max_actions: t.max_actions,
            n_bridges: t.n_bridges,
            few_shot: t.few_shot,
            min_len: t.min_len,
            max_len: t.max_len,
            world_seed: t.world_seed,
            data_seed: t.data_seed,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        self.plm_config().validate()?;
        self.props_config().validate()?;
        Ok(())
    }

    pub fn plm_config(&self) -> PlmConfig {
        PlmConfig {
            vocab_size: tasks::universe_vocab().len(),
            d_model: self.plm_d_model,
            n_heads: self.plm_n_heads,
            n_enc_layers: self.plm_enc_layers,
            n_dec_layers: self.plm_dec_layers,
            ffn_dim: self.plm_ffn_dim,
            max_len: self.plm_max_len,
        }
    }

    pub fn props_config(&self) -> PropsConfig {
        PropsConfig {
            n_rules: self.n_rules,
            k: self.k,
            layers: self.layers,
            tau: self.tau,
            t_p: self.t_p,
            d: self.d,
            ffn_dim: self.ffn_dim,
            transition: self.transition,
            pooling: self.pooling,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            warmup_ratio: self.warmup_ratio,
            clip_norm: self.clip_norm,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            max_epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            target_accuracy: self.pretrain_target_accuracy,
            optim: OptimConfig {
                lr: self.pretrain_lr,
                ..self.optim()
            },
            seed: self.plm_seed,
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            kind: self.task,
            n_train: self.n_train,
            n_valid: self.n_valid,
            n_test: self.n_test,
            primitive: self.primitive.clone(),
            max_train_len: self.max_train_len,
            max_actions: self.max_actions,
            n_bridges: self.n_bridges,
            few_shot: self.few_shot,
            min_len: self.min_len,
            max_len: self.max_len,
            world_seed: self.world_seed,
            data_seed: self.data_seed,
        }
    }

    /// Condition clip lengths; the instruction must hold `T_P` rows.
    pub fn limits(&self) -> CondLimits {
        let d = CondLimits::default();
        CondLimits {
            instruction: d.instruction.max(self.t_p),
            ..d
        }
    }

    /// Hash of everything that determines the results (paths excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.plm_path = PathBuf::new();
        tasks::spec_hash(&c)
    }

    /// Hash of the fields that determine the pretrained model.
    pub fn plm_hash(&self) -> String {
        tasks::spec_hash(&(
            self.plm_config(),
            self.pretrain_config(),
            self.world_seed,
            self.pretrain_n_train,
            self.pretrain_n_heldout,
            self.pretrain_min_len,
            self.pretrain_max_len,
        ))
    }
}
