//! Phase machine, sparsity schedules and per-layer density allocation.

use serde::{Deserialize, Serialize};

use crate::error::{FedPruneError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Jump to the target sparsity at the first mask refresh.
    Constant,
    /// Linear ramp over `ramp_steps` mask refreshes.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    Unified,
    /// Layer density `(1 - S) * m_i / sum(m)`; densities sum to `1 - S`.
    AdaptiveVerbatim,
    /// Densities proportional to layer magnitude, clipped to `[d_min, 1]`,
    /// with the parameter-weighted mean density held at `1 - S`.
    AdaptiveBudget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pruning,
    Refining,
    FineTuning,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pruning => "pruning",
            Phase::Refining => "refining",
            Phase::FineTuning => "fine_tuning",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPlan {
    pub target: f64,
    pub delta_r: u32,
    pub ramp_steps: u32,
    pub r_finetune: u32,
    pub r_end: u32,
    pub schedule: ScheduleKind,
    pub allocation: Allocation,
    pub d_min: f64,
}

impl Default for SparsityPlan {
    fn default() -> Self {
        Self {
            target: 0.5,
            delta_r: 10,
            ramp_steps: 5,
            r_finetune: 200,
            r_end: 300,
            schedule: ScheduleKind::Constant,
            allocation: Allocation::AdaptiveBudget,
            d_min: 0.05,
        }
    }
}

impl SparsityPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FedPruneError::Config(m));
        if !(0.0..1.0).contains(&self.target) {
            return bad(format!("target_sparsity must be in [0, 1), got {}", self.target));
        }
        if self.delta_r == 0 {
            return bad("delta_r must be positive".into());
        }
        if self.ramp_steps == 0 {
            return bad("ramp_steps must be positive".into());
        }
        if self.r_finetune == 0 {
            return bad("r_finetune must be positive".into());
        }
        if self.r_end <= self.r_finetune {
            return bad(format!("r_end ({}) must be greater than r_finetune ({})", self.r_end, self.r_finetune));
        }
        if !(0.0..=1.0).contains(&self.d_min) {
            return bad(format!("d_min must be in [0, 1], got {}", self.d_min));
        }
        if self.schedule == ScheduleKind::Step {
            // The refresh that reaches the target must happen before fine-tuning.
            let reach = u64::from(self.ramp_steps) * u64::from(self.delta_r);
            if reach >= u64::from(self.r_finetune) {
                return bad(format!(
                    "step schedule reaches the target at round {reach}, not before r_finetune ({})",
                    self.r_finetune
                ));
            }
        }
        Ok(())
    }

    pub fn is_refresh_round(&self, round: u32) -> bool {
        round < self.r_finetune && round.is_multiple_of(self.delta_r)
    }

    /// Sparsity in force at `round`, as set by the most recent mask refresh.
    pub fn current_sparsity(&self, round: u32) -> Result<f64> {
        if round >= self.r_finetune {
            return Err(FedPruneError::OutOfRange(format!(
                "round {round} is in the fine-tuning phase; sparsity is frozen"
            )));
        }
        Ok(match self.schedule {
            ScheduleKind::Constant => self.target,
            ScheduleKind::Step => {
                let j = round / self.delta_r;
                if j >= self.ramp_steps {
                    self.target
                } else {
                    self.target * f64::from(j) / f64::from(self.ramp_steps)
                }
            }
        })
    }

    pub fn phase_of(&self, round: u32) -> Result<Phase> {
        if round > self.r_end {
            return Err(FedPruneError::OutOfRange(format!("round {round} is past r_end ({})", self.r_end)));
        }
        if round >= self.r_finetune {
            return Ok(Phase::FineTuning);
        }
        if self.current_sparsity(round)? < self.target {
            Ok(Phase::Pruning)
        } else {
            Ok(Phase::Refining)
        }
    }
}

/// Number of slices pruned out of `n_slices` at `sparsity`: `floor(s * n)`,
/// clamped to `[0, n]`. A relative slack of 1e-9 absorbs binary rounding of
/// decimal sparsities (0.29 * 100 must give 29, not 28).
pub fn quantize_slice_count(sparsity: f64, n_slices: usize) -> usize {
    if !(sparsity > 0.0) {
        return 0;
    }
    let raw = sparsity * n_slices as f64;
    let k = (raw + raw.abs() * 1e-9).floor();
    (k.max(0.0) as usize).min(n_slices)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStat {
    pub name: String,
    /// Mean absolute weight of the layer.
    pub magnitude: f64,
    pub param_count: usize,
}

/// Per-layer densities (`1 - sparsity`) in the order of `layers`.
pub fn allocate_per_layer(target: f64, layers: &[LayerStat], mode: Allocation, d_min: f64) -> Result<Vec<f64>> {
    if layers.is_empty() {
        return Err(FedPruneError::Empty("no layers to allocate".into()));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(FedPruneError::OutOfRange(format!("sparsity {target}")));
    }
    if layers.iter().any(|l| !(l.magnitude >= 0.0) || !l.magnitude.is_finite()) {
        return Err(FedPruneError::OutOfRange("layer magnitudes must be finite and >= 0".into()));
    }
    let density = 1.0 - target;
    if mode == Allocation::Unified {
        return Ok(vec![density; layers.len()]);
    }
    let total: f64 = layers.iter().map(|l| l.magnitude).sum();
    if total <= 0.0 {
        return Err(FedPruneError::OutOfRange("adaptive allocation needs at least one nonzero layer magnitude".into()));
    }
    match mode {
        Allocation::Unified => unreachable!(),
        Allocation::AdaptiveVerbatim => Ok(layers.iter().map(|l| density * l.magnitude / total).collect()),
        Allocation::AdaptiveBudget => Ok(budget_allocation(density, layers, d_min)),
    }
}

/// Finds `lambda` with `sum p_i * clip(lambda * m_i, floor, 1) == density * sum p_i`
/// by bisection; the left side is continuous and nondecreasing in `lambda`.
fn budget_allocation(density: f64, layers: &[LayerStat], d_min: f64) -> Vec<f64> {
    let floor = d_min.min(density);
    let weight: f64 = layers.iter().map(|l| l.param_count as f64).sum();
    let budget = density * weight;
    let clip = |lambda: f64| -> Vec<f64> { layers.iter().map(|l| (lambda * l.magnitude).clamp(floor, 1.0)).collect() };
    let used = |d: &[f64]| -> f64 { d.iter().zip(layers).map(|(d, l)| d * l.param_count as f64).sum() };

    let m_min = layers.iter().map(|l| l.magnitude).filter(|&m| m > 0.0).fold(f64::INFINITY, f64::min);
    let mut lo = 0.0;
    // At `hi` every layer with positive magnitude sits at density 1.
    let mut hi = 1.0 / m_min;
    if used(&clip(hi)) < budget {
        return clip(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if used(&clip(mid)) < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lo_d = clip(lo);
    let hi_d = clip(hi);
    let (u_lo, u_hi) = (used(&lo_d), used(&hi_d));
    if u_hi - u_lo <= 0.0 {
        return hi_d;
    }
    // Interpolate between the bracketing allocations to land on the budget.
    let t = (budget - u_lo) / (u_hi - u_lo);
    lo_d.iter().zip(&hi_d).map(|(a, b)| a + t * (b - a)).collect()
}
