//! Run configuration: a flat TOML document of `key = value` lines.
//!
//! Every key is optional; missing keys take the defaults below, which
//! describe the reference desk-scale experiment. Unknown keys are errors.

use serde::{Deserialize, Serialize};

use crate::data::{Generator, PartitionKind, SynthSpec};
use crate::engine::TrainSettings;
use crate::error::{FedPruneError, Result};
use crate::importance::{Method, Norm};
use crate::masks::Pattern;
use crate::model::{Activation, MlpConfig};
use crate::schedule::{Allocation, ScheduleKind, SparsityPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives data, partition, initialisation and client selection.
    pub seed: u64,

    // model
    /// `[input, hidden.., outputs]`; the input width is the feature dimension.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Let the output layer be pruned as well.
    pub prune_head: bool,

    // data
    pub generator: Generator,
    pub n_examples: usize,
    pub n_eval: usize,
    pub n_classes: usize,
    pub noise: f64,
    pub partition: PartitionKind,
    pub alpha: f64,
    pub n_clients: usize,

    // sparsity plan
    pub target_sparsity: f64,
    pub delta_r: u32,
    pub ramp_steps: u32,
    pub r_finetune: u32,
    pub r_end: u32,
    pub schedule: ScheduleKind,
    pub allocation: Allocation,
    pub d_min: f64,

    // pruning
    pub pattern: Pattern,
    pub method: Method,
    pub norm: Norm,
    pub beta: f64,
    /// Keep regenerating masks after the target sparsity is reached.
    pub mask_refinement: bool,

    // training
    pub clients_per_round: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    pub server_momentum: f64,
    /// Dense federated rounds run before round 0 to produce the starting model.
    pub pretrain_rounds: u32,

    // run
    pub output_dir: String,
    /// 0 = one worker per core, 1 = single-threaded.
    pub threads: usize,
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let plan = SparsityPlan::default();
        let data = SynthSpec::default();
        Self {
            seed: 0,
            widths: vec![32, 16, 16, 8],
            activation: Activation::Relu,
            prune_head: false,
            generator: data.generator,
            n_examples: data.n_examples,
            n_eval: data.n_eval,
            n_classes: data.n_classes,
            noise: data.noise,
            partition: data.partition,
            alpha: data.alpha,
            n_clients: data.n_clients,
            target_sparsity: plan.target,
            delta_r: plan.delta_r,
            ramp_steps: plan.ramp_steps,
            r_finetune: plan.r_finetune,
            r_end: plan.r_end,
            schedule: plan.schedule,
            allocation: plan.allocation,
            d_min: plan.d_min,
            pattern: Pattern::WholeColumn,
            method: Method::Weight,
            norm: Norm::L1,
            beta: 0.9,
            mask_refinement: true,
            clients_per_round: 8,
            local_steps: 4,
            batch_size: 16,
            client_lr: 0.1,
            server_lr: 1.0,
            server_momentum: 0.0,
            pretrain_rounds: 0,
            output_dir: "runs/default".to_string(),
            threads: 0,
            record_wall_time: false,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> FedPruneError {
    FedPruneError::Config(msg.into())
}

impl RunConfig {
    pub fn plan(&self) -> SparsityPlan {
        SparsityPlan {
            target: self.target_sparsity,
            delta_r: self.delta_r,
            ramp_steps: self.ramp_steps,
            r_finetune: self.r_finetune,
            r_end: self.r_end,
            schedule: self.schedule,
            allocation: self.allocation,
            d_min: self.d_min,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed,
            n_examples: self.n_examples,
            n_eval: self.n_eval,
            n_classes: self.n_classes,
            input_dim: self.widths.first().copied().unwrap_or(0),
            generator: self.generator,
            noise: self.noise,
            partition: self.partition,
            alpha: self.alpha,
            n_clients: self.n_clients,
        }
    }

    pub fn mlp_config(&self) -> MlpConfig {
        MlpConfig { widths: self.widths.clone(), activation: self.activation, prune_head: self.prune_head }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            pattern: self.pattern,
            method: self.method,
            norm: self.norm,
            beta: self.beta,
            mask_refinement: self.mask_refinement,
            clients_per_round: self.clients_per_round,
            local_steps: self.local_steps,
            batch_size: self.batch_size,
            client_lr: self.client_lr,
            server_lr: self.server_lr,
            server_momentum: self.server_momentum,
            seed: self.seed,
            threads: self.threads,
            record_wall_time: self.record_wall_time,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().validate()?;
        self.mlp_config().validate()?;
        if self.seed > i64::MAX as u64 {
            return Err(cfg_err("seed must fit in a signed 64-bit integer"));
        }
        let outputs = *self.widths.last().expect("validated widths");
        if self.n_classes == 0 || self.n_classes > outputs {
            return Err(cfg_err(format!(
                "n_classes ({}) must be between 1 and the output width ({outputs})",
                self.n_classes
            )));
        }
        if self.n_classes > self.n_examples {
            return Err(cfg_err("n_classes exceeds n_examples"));
        }
        if self.n_eval == 0 {
            return Err(cfg_err("n_eval must be positive"));
        }
        if self.n_clients == 0 || self.n_clients > self.n_examples {
            return Err(cfg_err(format!(
                "n_clients ({}) must be between 1 and n_examples ({})",
                self.n_clients, self.n_examples
            )));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.n_clients {
            return Err(cfg_err(format!(
                "clients_per_round ({}) must be between 1 and n_clients ({})",
                self.clients_per_round, self.n_clients
            )));
        }
        if self.local_steps == 0 || self.batch_size == 0 {
            return Err(cfg_err("local_steps and batch_size must be positive"));
        }
        for (name, v) in [("client_lr", self.client_lr), ("server_lr", self.server_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(cfg_err(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.server_momentum) {
            return Err(cfg_err("server_momentum must be in [0, 1)"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(cfg_err("beta must be in (0, 1)"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(cfg_err("alpha must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(cfg_err("noise must be >= 0"));
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses and validates a config document; missing keys take defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| cfg_err(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies `key=value` overrides on top of a config document. Values are
/// read as TOML (`0.5`, `true`, `[8, 4, 2]`) and fall back to plain strings.
pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| cfg_err(e.message().to_string()))?;
    for (key, raw) in overrides {
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        table.insert(key.clone(), value);
    }
    let text = toml::to_string(&table).map_err(|e| cfg_err(e.to_string()))?;
    parse_config(&text)
}

/// Splits `--key=value` (or `key=value`) into its parts.
pub fn split_override(arg: &str) -> Result<(String, String)> {
    let body = arg.strip_prefix("--").unwrap_or(arg);
    let (k, v) =
        body.split_once('=').ok_or_else(|| cfg_err(format!("override `{arg}` is not of the form --key=value")))?;
    Ok((k.replace('-', "_"), v.to_string()))
}
