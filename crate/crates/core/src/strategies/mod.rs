//! The training procedures: a centralized baseline, five whole-model
//! federated variants, cyclical weight transfer, and three split variants.

mod sim;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use sim::{EpochSummary, Simulation};

use crate::error::{FedError, Result};
use crate::metrics::{task_metric, Metrics};
use crate::nn::LayerStack;
use crate::partition::Dataset;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_SERVER_MOMENTUM: f64 = 0.9;
pub const DEFAULT_SHARED_FRACTION: f64 = 0.05;
pub const DEFAULT_GN_GROUPS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Centralized,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedsgd")]
    FedSgd,
    #[serde(rename = "fedavgm")]
    FedAvgM,
    #[serde(rename = "fedavg_sd")]
    FedAvgSd,
    #[serde(rename = "fedsgd_gn")]
    FedSgdGn,
    Cwt,
    #[serde(rename = "splitnn")]
    SplitNn,
    #[serde(rename = "splitavg")]
    SplitAvg,
    #[serde(rename = "splitavg_v2")]
    SplitAvgV2,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 10] = [
        StrategyKind::Centralized,
        StrategyKind::FedAvg,
        StrategyKind::FedSgd,
        StrategyKind::FedAvgM,
        StrategyKind::FedAvgSd,
        StrategyKind::FedSgdGn,
        StrategyKind::Cwt,
        StrategyKind::SplitNn,
        StrategyKind::SplitAvg,
        StrategyKind::SplitAvgV2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Centralized => "centralized",
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedSgd => "fedsgd",
            StrategyKind::FedAvgM => "fedavgm",
            StrategyKind::FedAvgSd => "fedavg_sd",
            StrategyKind::FedSgdGn => "fedsgd_gn",
            StrategyKind::Cwt => "cwt",
            StrategyKind::SplitNn => "splitnn",
            StrategyKind::SplitAvg => "splitavg",
            StrategyKind::SplitAvgV2 => "splitavg_v2",
        }
    }

    pub fn is_split(&self) -> bool {
        matches!(
            self,
            StrategyKind::SplitNn | StrategyKind::SplitAvg | StrategyKind::SplitAvgV2
        )
    }

    /// Strategies that sample a subset of institutions per synchronization.
    pub fn uses_sampling(&self) -> bool {
        !matches!(
            self,
            StrategyKind::Centralized | StrategyKind::Cwt | StrategyKind::SplitNn
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| FedError::Config(format!("strategy.kind: unknown strategy `{s}`")))
    }
}

fn default_lr() -> f64 {
    DEFAULT_LR
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

fn default_batch() -> usize {
    DEFAULT_BATCH
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Cut layer index; split strategies only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cut: Option<usize>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// St; all institutions when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub institutions_per_round: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gn_groups: Option<usize>,
    /// Early-stopping patience in epochs; off when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            cut: None,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            batch_size: DEFAULT_BATCH,
            institutions_per_round: None,
            server_momentum: None,
            shared_fraction: None,
            gn_groups: None,
            patience: None,
        }
    }

    pub fn with_cut(mut self, cut: usize) -> Self {
        self.cut = Some(cut);
        self
    }

    pub fn server_momentum(&self) -> f64 {
        self.server_momentum.unwrap_or(DEFAULT_SERVER_MOMENTUM)
    }

    pub fn shared_fraction(&self) -> f64 {
        self.shared_fraction.unwrap_or(DEFAULT_SHARED_FRACTION)
    }

    pub fn gn_groups(&self) -> usize {
        self.gn_groups.unwrap_or(DEFAULT_GN_GROUPS)
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.kind;
        let bad = |key: &str, why: String| Err(FedError::Config(format!("strategy.{key}: {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(
                "lr",
                format!("must be a finite value >= 0, got {}", self.lr),
            );
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(
                "momentum",
                format!("must be in [0, 1), got {}", self.momentum),
            );
        }
        match (kind.is_split(), self.cut) {
            (true, None) => return bad("cut", format!("required for {kind}")),
            (false, Some(_)) => {
                return bad(
                    "cut",
                    format!("only valid for split strategies, not {kind}"),
                )
            }
            _ => {}
        }
        if self.institutions_per_round.is_some() && !kind.uses_sampling() {
            return bad("institutions_per_round", format!("not used by {kind}"));
        }
        if self.institutions_per_round == Some(0) {
            return bad("institutions_per_round", "must be at least 1".into());
        }
        if let Some(b) = self.server_momentum {
            if kind != StrategyKind::FedAvgM {
                return bad(
                    "server_momentum",
                    format!("only valid for fedavgm, not {kind}"),
                );
            }
            if !(0.0..1.0).contains(&b) {
                return bad("server_momentum", format!("must be in [0, 1), got {b}"));
            }
        }
        if let Some(f) = self.shared_fraction {
            if kind != StrategyKind::FedAvgSd {
                return bad(
                    "shared_fraction",
                    format!("only valid for fedavg_sd, not {kind}"),
                );
            }
            if !(0.0..=1.0).contains(&f) {
                return bad("shared_fraction", format!("must be in [0, 1], got {f}"));
            }
        }
        if let Some(g) = self.gn_groups {
            if kind != StrategyKind::FedSgdGn {
                return bad("gn_groups", format!("only valid for fedsgd_gn, not {kind}"));
            }
            if g == 0 {
                return bad("gn_groups", "must be at least 1".into());
            }
        }
        if self.patience == Some(0) {
            return bad("patience", "must be at least 1".into());
        }
        Ok(())
    }
}

/// Server momentum on the round's weight delta. `averaged` holds the
/// sample-weighted average on entry and the new global weights on return:
/// `W <- W_avg - beta * v; v <- beta * v + (W_prev - W_avg)`.
pub fn apply_server_momentum(
    averaged: &mut [Tensor],
    previous: &[Tensor],
    velocity: &mut [Tensor],
    beta: f64,
) {
    for ((w, prev), v) in averaged.iter_mut().zip(previous).zip(velocity.iter_mut()) {
        for ((wi, &pi), vi) in w.data_mut().iter_mut().zip(prev.data()).zip(v.data_mut()) {
            let delta = pi - *wi;
            *wi -= beta * *vi;
            *vi = beta * *vi + delta;
        }
    }
}

/// The trained network(s): one stack, or per-institution front halves
/// sharing one server half.
#[derive(Clone, Debug, PartialEq)]
pub enum CompositeModel {
    Single(LayerStack),
    Split {
        institution: Vec<LayerStack>,
        server: LayerStack,
    },
}

impl CompositeModel {
    /// Every complete network, one per institution for split models.
    pub fn models(&self) -> Result<Vec<LayerStack>> {
        match self {
            CompositeModel::Single(m) => Ok(vec![m.clone()]),
            CompositeModel::Split {
                institution,
                server,
            } => institution
                .iter()
                .map(|fi| LayerStack::join(fi, server))
                .collect(),
        }
    }
}

/// Eval-mode metrics of every complete network plus their mean.
pub fn evaluate(model: &CompositeModel, test: &Dataset) -> Result<Metrics> {
    let mut per = Vec::new();
    for m in model.models()? {
        if m.task() != Some(test.task()) {
            return Err(FedError::Config(format!(
                "evaluate: model task {:?} does not match dataset task {:?}",
                m.task(),
                test.task()
            )));
        }
        let preds = m.predict(test.features())?;
        per.push(task_metric(test.task(), &preds, test.labels())?);
    }
    Metrics::from_per_institution(test.task(), per)
}
