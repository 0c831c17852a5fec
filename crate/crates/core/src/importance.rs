//! Per-slice importance scores and the gradient-magnitude momentum behind them.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{FedPruneError, Result};
use crate::masks::{Pattern, SliceGeometry};
use crate::var_store::VarStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Norm of the current server weights.
    Weight,
    /// Norm of the running average of aggregated update magnitudes.
    GradMomentum,
    /// Norm of `|w| * ema(|delta|)`, taken elementwise.
    WeightTimesGrad,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Weight => "weight",
            Method::GradMomentum => "grad_momentum",
            Method::WeightTimesGrad => "weight_times_grad",
        }
    }

    pub fn needs_momentum(self) -> bool {
        self != Method::Weight
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn as_str(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        }
    }

    fn of(self, values: impl Iterator<Item = f64>) -> f64 {
        match self {
            Norm::L1 => values.map(f64::abs).sum(),
            Norm::L2 => values.map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

pub fn slice_norm(values: &[f64], norm: Norm) -> Result<f64> {
    if values.is_empty() {
        return Err(FedPruneError::Empty("slice_norm of an empty vector".into()));
    }
    Ok(norm.of(values.iter().copied()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarScores {
    pub name: String,
    pub geometry: SliceGeometry,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub method: Method,
    pub norm: Norm,
    pub round: u64,
    pub vars: Vec<VarScores>,
}

impl ImportanceTable {
    pub fn get(&self, name: &str) -> Option<&VarScores> {
        self.vars.iter().find(|v| v.name == name)
    }

    /// Writes `var,slice,score,method,norm,round` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["var", "slice", "score", "method", "norm", "round"])?;
        for v in &self.vars {
            for (i, s) in v.scores.iter().enumerate() {
                w.write_record([
                    v.name.clone(),
                    i.to_string(),
                    format!("{s:e}"),
                    self.method.as_str().to_string(),
                    self.norm.as_str().to_string(),
                    self.round.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Elementwise exponential moving average of aggregated update magnitudes,
/// laid out like the server store.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    beta: f64,
    ema: Vec<Vec<f64>>,
    initialized: bool,
}

impl MomentumState {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(FedPruneError::OutOfRange(format!("momentum beta {beta} not in (0, 1)")));
        }
        Ok(Self { beta, ema: Vec::new(), initialized: false })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn ema(&self) -> &[Vec<f64>] {
        &self.ema
    }

    /// `ema <- beta * ema + (1 - beta) * |delta|`; the first call sets `ema = |delta|`.
    pub fn update(&mut self, delta: &[Vec<f64>]) -> Result<()> {
        if !self.initialized {
            self.ema = delta.iter().map(|d| d.iter().map(|x| x.abs()).collect()).collect();
            self.initialized = true;
            return Ok(());
        }
        if delta.len() != self.ema.len() || delta.iter().zip(&self.ema).any(|(d, e)| d.len() != e.len()) {
            return Err(FedPruneError::ShapeMismatch("delta does not match momentum layout".into()));
        }
        let b = self.beta;
        for (e, d) in self.ema.iter_mut().zip(delta) {
            for (ei, di) in e.iter_mut().zip(d) {
                *ei = b * *ei + (1.0 - b) * di.abs();
            }
        }
        Ok(())
    }
}

/// Functional form of [`MomentumState::update`] with an explicit decay.
pub fn update_momentum(state: &MomentumState, delta: &[Vec<f64>], beta: f64) -> Result<MomentumState> {
    let mut next = MomentumState::new(beta)?;
    next.ema = state.ema.clone();
    next.initialized = state.initialized;
    next.update(delta)?;
    Ok(next)
}

/// Scores every slice of every prunable variable.
///
/// Masked slices are never updated by the server, so under [`Method::Weight`]
/// their scores stay exactly where they were when they were masked.
pub fn compute_scores(
    store: &VarStore,
    pattern: Pattern,
    method: Method,
    norm: Norm,
    momentum: &MomentumState,
    round: u64,
) -> Result<ImportanceTable> {
    if method.needs_momentum() {
        if !momentum.is_initialized() {
            return Err(FedPruneError::MomentumUninitialized);
        }
        if momentum.ema.len() != store.len() {
            return Err(FedPruneError::ShapeMismatch("momentum state does not match store".into()));
        }
    }
    let mut vars = Vec::new();
    for (i, var) in store.iter().enumerate().filter(|(_, v)| v.spec.is_prunable()) {
        let geometry = SliceGeometry::for_var(&var.spec, pattern)?;
        let w = &var.values;
        let scores = (0..geometry.n_slices())
            .map(|s| {
                let span = geometry.span(s).indices();
                match method {
                    Method::Weight => norm.of(span.map(|e| w[e])),
                    Method::GradMomentum => {
                        let g = &momentum.ema[i];
                        norm.of(span.map(|e| g[e]))
                    }
                    Method::WeightTimesGrad => {
                        let g = &momentum.ema[i];
                        norm.of(span.map(|e| w[e].abs() * g[e]))
                    }
                }
            })
            .collect();
        vars.push(VarScores { name: var.spec.name.clone(), geometry, scores });
    }
    Ok(ImportanceTable { method, norm, round, vars })
}
