use serde::{Deserialize, Serialize};

use super::{serial_steps, RoundPlan};
use crate::error::{FedError, Result};
use crate::nn::{CutSpec, LayerStack};
use crate::strategies::StrategyKind;

/// Element counts that determine every uplink payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Learnable weights.
    pub params: u64,
    /// Weights plus normalization running buffers.
    pub sync: u64,
    /// Per-sample activation size at the cut.
    pub cutmap: u64,
    pub label: u64,
    /// Per-sample prediction size.
    pub output: u64,
}

impl ModelShape {
    pub fn of(stack: &LayerStack, cut: Option<CutSpec>) -> Result<Self> {
        let c = cut.map_or(0, |c| c.0);
        if c > stack.len() {
            return Err(FedError::Config(format!(
                "cut {c} out of range for a {}-layer stack",
                stack.len()
            )));
        }
        Ok(Self {
            params: stack.param_count() as u64,
            sync: stack.sync_scalar_count() as u64,
            cutmap: stack.dims_at(c).iter().product::<usize>() as u64,
            label: 1,
            output: stack.output_dims().iter().product::<usize>() as u64,
        })
    }
}

/// Closed-form uplink scalars for one training iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyticFloats {
    /// Per transmitted sample (split strategies; 0 otherwise).
    pub per_sample: u64,
    /// One institution's upload for one synchronization or iteration.
    pub per_institution: u64,
    /// All participating institutions together.
    pub per_iteration: u64,
}

pub fn analytic_floats(
    kind: StrategyKind,
    shape: &ModelShape,
    batch: usize,
    st: usize,
) -> AnalyticFloats {
    let b = batch as u64;
    let st = st as u64;
    use StrategyKind::*;
    match kind {
        Centralized | Cwt => AnalyticFloats {
            per_sample: 0,
            per_institution: 0,
            per_iteration: 0,
        },
        FedAvg | FedAvgM | FedAvgSd | FedSgd | FedSgdGn => AnalyticFloats {
            per_sample: 0,
            per_institution: shape.sync,
            per_iteration: st * shape.sync,
        },
        SplitNn => {
            let ps = shape.cutmap + shape.label;
            AnalyticFloats {
                per_sample: ps,
                per_institution: b * ps,
                per_iteration: b * ps,
            }
        }
        SplitAvg => {
            let ps = shape.cutmap + shape.label;
            AnalyticFloats {
                per_sample: ps,
                per_institution: b * ps,
                per_iteration: st * b * ps,
            }
        }
        SplitAvgV2 => {
            let ps = shape.cutmap + shape.output;
            AnalyticFloats {
                per_sample: ps,
                per_institution: b * ps + 1,
                per_iteration: st * (b * ps + 1),
            }
        }
    }
}

/// Uplink scalars for one epoch given local dataset sizes and the plans
/// drawn during that epoch (one per round or iteration).
pub fn analytic_epoch_uplink(
    kind: StrategyKind,
    shape: &ModelShape,
    batch: usize,
    sizes: &[usize],
    plans: &[RoundPlan],
) -> u64 {
    let b_of = |k: usize| batch.min(sizes[k]);
    use StrategyKind::*;
    match kind {
        Centralized | Cwt => 0,
        FedAvg | FedAvgM | FedAvgSd | FedSgd | FedSgdGn => plans
            .iter()
            .map(|p| analytic_floats(kind, shape, batch, p.ids.len()).per_iteration)
            .sum(),
        SplitNn => {
            let steps = serial_steps(sizes.iter().sum(), batch, sizes.len()) as u64;
            (0..sizes.len())
                .map(|k| steps * analytic_floats(kind, shape, b_of(k), 1).per_institution)
                .sum()
        }
        SplitAvg | SplitAvgV2 => plans
            .iter()
            .flat_map(|p| p.ids.iter())
            .map(|&k| analytic_floats(kind, shape, b_of(k), 1).per_institution)
            .sum(),
    }
}
