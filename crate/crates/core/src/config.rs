//! Run configuration: a flat `key = value` TOML file. A JSON run report is
//! accepted too, in which case its embedded `config` is used.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::GarbagePattern;
use crate::stream::SchedulePolicy;
use crate::topology::{ClusterTopology, CostModel};
use crate::trainer::OptimizerKind;
use crate::zeropp::{HpzMode, LayerDesc, ModelSpec, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    ProgramOrder,
    Adversarial,
    /// Seeded uniform choice among eligible ops; reseeded every step.
    Random,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "program-order" => Ok(PolicyKind::ProgramOrder),
            "adversarial" => Ok(PolicyKind::Adversarial),
            "random" => Ok(PolicyKind::Random),
            other => Err(Error::config("policy", format!("expected program-order|adversarial|random, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GarbageName {
    Nan,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub nodes: usize,
    pub devices_per_node: usize,
    /// Bytes/s per device within a node.
    pub intra_bw: f64,
    /// Bytes/s of one node's NIC, shared by its devices.
    pub inter_bw: f64,
    pub intra_latency: f64,
    pub inter_latency: f64,
    /// Seconds per layer forward or backward on one device.
    pub compute_time_per_layer_pass: f64,

    pub hpz: HpzMode,
    pub qwz: bool,
    pub qgz: bool,
    pub prefetch_depth: usize,

    /// Layer widths, input first.
    pub dims: Vec<usize>,
    /// Optional cross-checks against `dims`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer_elems: Option<Vec<usize>>,

    pub optimizer: OptimizerName,
    pub lr: f32,
    pub steps: usize,
    pub window: usize,
    pub batch_size: usize,
    pub seq_len: u64,
    /// Defaults to `nodes * devices_per_node * batch_size * seq_len`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens_per_step: Option<u64>,

    pub policy: PolicyKind,
    pub seed: u64,
    pub garbage: GarbageName,
    pub garbage_magnitude: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let topo = ClusterTopology::default();
        RunConfig {
            nodes: topo.nodes,
            devices_per_node: topo.devices_per_node,
            intra_bw: topo.intra_bw,
            inter_bw: topo.inter_bw,
            intra_latency: topo.intra_latency,
            inter_latency: topo.inter_latency,
            compute_time_per_layer_pass: CostModel::default().compute_time_per_layer_pass,
            hpz: HpzMode::Off,
            qwz: false,
            qgz: false,
            prefetch_depth: 1,
            dims: vec![8, 16, 16, 16, 4],
            layers: None,
            layer_elems: None,
            optimizer: OptimizerName::Sgd,
            lr: 0.1,
            steps: 200,
            window: 50,
            batch_size: 8,
            seq_len: 128,
            tokens_per_step: None,
            policy: PolicyKind::Adversarial,
            seed: 0,
            garbage: GarbageName::Nan,
            garbage_magnitude: 1e3,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        let cfg: RunConfig = if trimmed.starts_with('{') {
            let mut value: serde_json::Value = serde_json::from_str(text)?;
            let inner = value.get_mut("config").map(serde_json::Value::take).unwrap_or(value);
            serde_json::from_value(inner)?
        } else {
            toml::from_str(text).map_err(|e| Error::config(&toml_key(&e), e.message().to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be finite and > 0, got {v}")))
            }
        };
        let non_negative = |key: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be finite and >= 0, got {v}")))
            }
        };
        self.topology().validate()?;
        non_negative("compute_time_per_layer_pass", self.compute_time_per_layer_pass)?;
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::config("dims", "need at least two positive dimensions"));
        }
        let descs: Vec<LayerDesc> = self.dims.windows(2).map(|w| LayerDesc { in_dim: w[0], out_dim: w[1] }).collect();
        if let Some(n) = self.layers {
            if n != descs.len() {
                return Err(Error::config("layers", format!("{n} layers but dims describe {}", descs.len())));
            }
        }
        if let Some(elems) = &self.layer_elems {
            let derived: Vec<usize> = descs.iter().map(LayerDesc::elems).collect();
            if *elems != derived {
                return Err(Error::config("layer_elems", format!("expected {derived:?} from dims")));
            }
        }
        non_negative("lr", self.lr as f64)?;
        if self.steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("seq_len", "must be >= 1"));
        }
        if self.tokens_per_step == Some(0) {
            return Err(Error::config("tokens_per_step", "must be >= 1"));
        }
        positive("garbage_magnitude", self.garbage_magnitude as f64)?;
        Ok(())
    }

    pub fn topology(&self) -> ClusterTopology {
        ClusterTopology {
            nodes: self.nodes,
            devices_per_node: self.devices_per_node,
            intra_bw: self.intra_bw,
            inter_bw: self.inter_bw,
            intra_latency: self.intra_latency,
            inter_latency: self.inter_latency,
        }
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        CostModel::new(self.topology(), self.compute_time_per_layer_pass)
    }

    pub fn scheme(&self) -> Scheme {
        Scheme { hpz: self.hpz, qwz: self.qwz, qgz: self.qgz, prefetch_depth: self.prefetch_depth }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::from_dims(&self.dims, &self.topology())
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerName::Sgd => OptimizerKind::Sgd,
            OptimizerName::Adam => OptimizerKind::adam(),
        }
    }

    pub fn garbage_pattern(&self) -> GarbagePattern {
        match self.garbage {
            GarbageName::Nan => GarbagePattern::NanFill,
            GarbageName::Noise => GarbagePattern::SeededNoise { magnitude: self.garbage_magnitude },
        }
    }

    pub fn tokens_per_step(&self) -> u64 {
        self.tokens_per_step
            .unwrap_or((self.nodes * self.devices_per_node * self.batch_size) as u64 * self.seq_len)
    }

    /// Schedule for `step`; the random policy draws a fresh stream per step.
    pub fn policy_for(&self, step: usize) -> SchedulePolicy {
        match self.policy {
            PolicyKind::ProgramOrder => SchedulePolicy::ProgramOrder,
            PolicyKind::Adversarial => SchedulePolicy::Adversarial,
            PolicyKind::Random => SchedulePolicy::RandomSeeded(self.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ step as u64),
        }
    }

    /// Stock hpZ is only expected to survive when nothing reorders its race.
    pub fn expected_stable(&self) -> bool {
        self.hpz != HpzMode::Stock || self.policy == PolicyKind::ProgramOrder
    }
}

fn toml_key(e: &toml::de::Error) -> String {
    // toml reports unknown fields as "unknown field `x`"
    let msg = e.message();
    msg.split('`').nth(1).filter(|_| msg.contains("field")).unwrap_or("config").to_string()
}
