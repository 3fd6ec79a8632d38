use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{ensure, Error, Result};
use crate::fluctuation::CountUnit;
use crate::tensor::Reduction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RouterKind {
    /// Two-stage: learned routing with synchronous distillation, then frozen.
    #[serde(rename = "stablemoe")]
    StableMoe,
    /// Stage-1 objective for the whole run; the router is never frozen.
    #[serde(rename = "stage1-only")]
    Stage1Only,
    #[serde(rename = "switch")]
    Switch,
    /// Auction assignment during training.
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "hash")]
    Hash,
    /// No MoE layer at all.
    #[serde(rename = "dense")]
    Dense,
}

impl RouterKind {
    pub const ALL: [RouterKind; 6] = [
        RouterKind::StableMoe,
        RouterKind::Stage1Only,
        RouterKind::Switch,
        RouterKind::Base,
        RouterKind::Hash,
        RouterKind::Dense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RouterKind::StableMoe => "stablemoe",
            RouterKind::Stage1Only => "stage1-only",
            RouterKind::Switch => "switch",
            RouterKind::Base => "base",
            RouterKind::Hash => "hash",
            RouterKind::Dense => "dense",
        }
    }

    pub fn has_moe(self) -> bool {
        self != RouterKind::Dense
    }

    pub fn distills(self) -> bool {
        matches!(self, RouterKind::StableMoe | RouterKind::Stage1Only)
    }
}

impl fmt::Display for RouterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RouterKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = RouterKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown router {s:?}; expected one of {}", names.join("|")))
            })
    }
}

/// Every hyperparameter of a run. Serialised flat; missing fields take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub router: RouterKind,
    pub seed: u64,
    pub total_steps: usize,
    pub stage1_fraction: f64,
    pub batch_tokens: usize,
    pub seq_len: usize,
    pub lr_max: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub balance_alpha: f64,
    pub router_feature_dim: usize,
    pub distill_reduction: Reduction,
    pub balance_reduction: Reduction,
    /// Learning-rate multiplier for the distilled router.
    pub router_lr_scale: f64,

    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_inner_dim: usize,
    pub max_seq_len: usize,
    /// Defaults to `num_blocks / 2`.
    pub moe_insert_after_block: Option<usize>,
    pub tie_embeddings: bool,
    pub num_experts: usize,
    pub sublayers_per_expert: usize,
    pub expert_inner_dim: usize,

    /// Auction ε as a fraction of the batch's score range.
    pub auction_epsilon_scale: f64,
    /// Defaults to `seed`.
    pub hash_seed: Option<u64>,

    pub snapshot_interval: usize,
    pub snapshot_tokens: usize,
    pub eval_interval: usize,
    /// Validation tokens scored at each evaluation; 0 means the whole split.
    pub eval_tokens: usize,
    pub fluctuation_unit: CountUnit,
    /// Single-threaded, fixed-order arithmetic. Always honoured.
    pub deterministic: bool,

    pub data: Option<String>,
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            router: RouterKind::StableMoe,
            seed: 1,
            total_steps: 2000,
            stage1_fraction: 0.10,
            batch_tokens: 8192,
            seq_len: 128,
            lr_max: 2e-3,
            warmup_steps: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            grad_clip_norm: 0.1,
            balance_alpha: 0.3,
            router_feature_dim: 50,
            distill_reduction: Reduction::Mean,
            balance_reduction: Reduction::Mean,
            router_lr_scale: 1.0,
            vocab_size: 256,
            hidden_dim: 128,
            num_blocks: 4,
            num_heads: 4,
            ffn_inner_dim: 512,
            max_seq_len: 128,
            moe_insert_after_block: None,
            tie_embeddings: true,
            num_experts: 8,
            sublayers_per_expert: 2,
            expert_inner_dim: 512,
            auction_epsilon_scale: 1e-3,
            hash_seed: None,
            snapshot_interval: 50,
            snapshot_tokens: 8192,
            eval_interval: 100,
            eval_tokens: 16384,
            fluctuation_unit: CountUnit::Occurrence,
            deterministic: true,
            data: None,
            split: [0.9, 0.05, 0.05],
        }
    }
}

impl TrainConfig {
    /// Small profile used for CPU acceptance runs: 2 blocks of width 32.
    pub fn desk() -> Self {
        TrainConfig {
            batch_tokens: 1024,
            seq_len: 64,
            hidden_dim: 32,
            num_blocks: 2,
            num_heads: 2,
            ffn_inner_dim: 128,
            max_seq_len: 64,
            expert_inner_dim: 128,
            eval_tokens: 8192,
            warmup_steps: 20,
            router_lr_scale: 10.0,
            ..TrainConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// First step of stage 2: `round(stage1_fraction · total_steps)`.
    pub fn freeze_step(&self) -> usize {
        (self.stage1_fraction * self.total_steps as f64).round() as usize
    }

    pub fn insert_after(&self) -> usize {
        self.moe_insert_after_block.unwrap_or((self.num_blocks / 2).max(1))
    }

    pub fn hash_seed(&self) -> u64 {
        self.hash_seed.unwrap_or(self.seed)
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            vocab_size: self.vocab_size,
            hidden_dim: self.hidden_dim,
            num_blocks: self.num_blocks,
            num_heads: self.num_heads,
            ffn_inner_dim: self.ffn_inner_dim,
            max_seq_len: self.max_seq_len,
            moe_insert_after_block: self.insert_after(),
            tie_embeddings: self.tie_embeddings,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        ensure!(
            self.stage1_fraction > 0.0 && self.stage1_fraction < 1.0,
            Config,
            "stage1_fraction must lie in (0, 1), got {}",
            self.stage1_fraction
        );
        ensure!(self.total_steps > 0, Config, "total_steps must be positive");
        ensure!(
            self.warmup_steps < self.total_steps,
            Config,
            "warmup_steps {} must be below total_steps {}",
            self.warmup_steps,
            self.total_steps
        );
        ensure!(
            self.seq_len >= 1 && self.seq_len <= self.max_seq_len,
            Config,
            "seq_len {} outside 1..={}",
            self.seq_len,
            self.max_seq_len
        );
        ensure!(
            self.batch_tokens >= self.seq_len && self.batch_tokens.is_multiple_of(self.seq_len),
            Config,
            "batch_tokens {} must be a positive multiple of seq_len {}",
            self.batch_tokens,
            self.seq_len
        );
        ensure!(self.lr_max > 0.0, Config, "lr_max must be positive");
        ensure!(self.router_lr_scale > 0.0, Config, "router_lr_scale must be positive");
        ensure!(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            Config,
            "adam betas must lie in [0, 1)"
        );
        ensure!(self.adam_eps > 0.0, Config, "adam_eps must be positive");
        ensure!(self.grad_clip_norm > 0.0, Config, "grad_clip_norm must be positive");
        ensure!(self.balance_alpha >= 0.0, Config, "balance_alpha must be nonnegative");
        ensure!(self.router_feature_dim > 0, Config, "router_feature_dim must be positive");
        ensure!(self.num_experts > 0, Config, "num_experts must be positive");
        ensure!(self.sublayers_per_expert > 0, Config, "sublayers_per_expert must be positive");
        ensure!(self.expert_inner_dim > 0, Config, "expert_inner_dim must be positive");
        ensure!(self.auction_epsilon_scale > 0.0, Config, "auction_epsilon_scale must be positive");
        ensure!(self.snapshot_interval > 0, Config, "snapshot_interval must be positive");
        ensure!(self.snapshot_tokens > 0, Config, "snapshot_tokens must be positive");
        ensure!(self.eval_interval > 0, Config, "eval_interval must be positive");
        ensure!(self.deterministic, Config, "only deterministic execution is supported");
        ensure!(
            self.split.iter().all(|&f| f > 0.0) && (self.split.iter().sum::<f64>() - 1.0).abs() < 1e-9,
            Config,
            "split fractions {:?} must be positive and sum to 1",
            self.split
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        assert_eq!(TrainConfig::default().freeze_step(), 200);
        assert_eq!(TrainConfig::default().insert_after(), 2);
    }

    #[test]
    fn optimiser_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.adam_beta1, c.adam_beta2), (0.9, 0.98));
        assert_eq!(c.grad_clip_norm, 0.1);
        assert_eq!(c.balance_alpha, 0.3);
        assert_eq!(c.router_feature_dim, 50);
        assert_eq!(c.stage1_fraction, 0.1);
    }

    #[test]
    fn json_is_flat_and_partial() {
        let c = TrainConfig::from_json(r#"{"router": "hash", "total_steps": 50, "warmup_steps": 5}"#).unwrap();
        assert_eq!(c.router, RouterKind::Hash);
        assert_eq!(c.hidden_dim, 128);
        let back = TrainConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::from_json(r#"{"hiden_dim": 3}"#).unwrap_err().to_string().starts_with("config"));
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig { stage1_fraction: 1.0, ..TrainConfig::default() },
            TrainConfig { warmup_steps: 2000, ..TrainConfig::default() },
            TrainConfig { num_heads: 5, ..TrainConfig::default() },
            TrainConfig { batch_tokens: 100, ..TrainConfig::default() },
            TrainConfig { split: [0.5, 0.5, 0.5], ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn router_names_roundtrip() {
        for k in RouterKind::ALL {
            assert_eq!(k.name().parse::<RouterKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("moe".parse::<RouterKind>().is_err());
    }
}
