//! Toy prunable models with closed-form backpropagation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets};
use crate::error::{FedPruneError, Result};
use crate::masks::{apply_mask, MaskSet, Pattern, SliceGeometry, SliceMask};
use crate::var_store::{Role, VarStore};

/// Model after the fine-tuning reduction, with the masks that still apply to it.
#[derive(Debug, Clone)]
pub struct Reduced<M> {
    pub model: M,
    pub store: VarStore,
    pub masks: MaskSet,
}

/// A model the federated engine can train. Parameters are passed as buffers
/// laid out like the model's [`VarStore`].
pub trait Model: Clone + Send + Sync {
    /// Registers and initialises every variable.
    fn build_store(&self, rng: &mut ChaCha8Rng) -> Result<VarStore>;

    /// Mean loss and exact gradients over the `batch` rows of `data`.
    fn loss_grad(&self, params: &[Vec<f64>], data: &Dataset, batch: &[usize]) -> Result<(f64, Vec<Vec<f64>>)>;

    fn loss(&self, params: &[Vec<f64>], data: &Dataset, batch: &[usize]) -> Result<f64> {
        self.loss_grad(params, data, batch).map(|(l, _)| l)
    }

    /// Higher is better (accuracy for classifiers).
    fn quality(&self, params: &[Vec<f64>], data: &Dataset) -> Result<f64>;

    /// Discards masked weights and, where the model can, drops them from the
    /// shapes. The default zeroes masked elements and keeps every mask.
    fn reduce(&self, store: &VarStore, masks: &MaskSet) -> Result<Reduced<Self>> {
        let mut reduced = store.clone();
        reduced.set_params(apply_mask(store, &store.params(), masks)?)?;
        Ok(Reduced { model: self.clone(), store: reduced, masks: masks.clone() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn deriv(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// `[input, hidden.., outputs]`.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Make the output layer prunable too. Off by default: whole-column
    /// pruning of the output layer removes class logits.
    #[serde(default)]
    pub prune_head: bool,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(FedPruneError::Config("an MLP needs at least one hidden layer".into()));
        }
        if self.widths.iter().any(|&w| w < 2) {
            return Err(FedPruneError::Config(format!("all widths must be >= 2, got {:?}", self.widths)));
        }
        Ok(())
    }
}

/// Fully connected classifier. Layer `l` owns `layer{l}.weight` (`in x out`,
/// prunable) and `layer{l}.bias` (excluded); consecutive weights form pairs,
/// so pruning a column of one weight kills the matching row of the next.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
}

struct Forward {
    /// Pre-activations per layer (index 0 unused).
    zs: Vec<Vec<f64>>,
    /// Activations per layer; `acts[0]` is the input batch.
    acts: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn n_layers(&self) -> usize {
        self.config.widths.len() - 1
    }

    pub fn weight_name(l: usize) -> String {
        format!("layer{l}.weight")
    }

    pub fn bias_name(l: usize) -> String {
        format!("layer{l}.bias")
    }

    fn is_prunable_layer(&self, l: usize) -> bool {
        self.config.prune_head || l + 1 < self.n_layers()
    }

    fn groups_for(&self, l: usize) -> Vec<u32> {
        let mut g = Vec::new();
        if !self.is_prunable_layer(l) {
            return g;
        }
        if l > 0 {
            g.push((l - 1) as u32);
        }
        if l + 1 < self.n_layers() && self.is_prunable_layer(l + 1) {
            g.push(l as u32);
        }
        g
    }

    /// Registers the variables with the given buffers (weight, bias per layer).
    pub fn store_from_params(&self, params: Vec<Vec<f64>>) -> Result<VarStore> {
        let mut store = VarStore::new();
        let mut it = params.into_iter();
        for l in 0..self.n_layers() {
            let (i, o) = (self.config.widths[l], self.config.widths[l + 1]);
            let w = it.next().ok_or_else(|| FedPruneError::ShapeMismatch("missing weight".into()))?;
            let b = it.next().ok_or_else(|| FedPruneError::ShapeMismatch("missing bias".into()))?;
            let role = if self.is_prunable_layer(l) { Role::Prunable } else { Role::Excluded };
            store.register_with_values(&Self::weight_name(l), &[i, o], role, &self.groups_for(l), w)?;
            store.register_with_values(&Self::bias_name(l), &[o], Role::Excluded, &[], b)?;
        }
        Ok(store)
    }

    fn check_params(&self, params: &[Vec<f64>]) -> Result<()> {
        if params.len() != 2 * self.n_layers() {
            return Err(FedPruneError::ShapeMismatch(format!(
                "MLP expects {} buffers, got {}",
                2 * self.n_layers(),
                params.len()
            )));
        }
        for l in 0..self.n_layers() {
            let (i, o) = (self.config.widths[l], self.config.widths[l + 1]);
            if params[2 * l].len() != i * o || params[2 * l + 1].len() != o {
                return Err(FedPruneError::ShapeMismatch(format!("layer {l} buffers do not match {i}x{o}")));
            }
        }
        Ok(())
    }

    fn forward(&self, params: &[Vec<f64>], data: &Dataset, batch: &[usize]) -> Result<Forward> {
        self.check_params(params)?;
        let d = self.config.widths[0];
        if data.dim != d {
            return Err(FedPruneError::ShapeMismatch(format!("input dim {} != model input {d}", data.dim)));
        }
        let mut input = Vec::with_capacity(batch.len() * d);
        for &i in batch {
            input.extend_from_slice(data.row(i));
        }
        let mut zs = vec![Vec::new()];
        let mut acts = vec![input];
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.config.widths[l], self.config.widths[l + 1]);
            let (w, b) = (&params[2 * l], &params[2 * l + 1]);
            let a = &acts[l];
            let mut z = vec![0.0; batch.len() * n_out];
            for r in 0..batch.len() {
                let zr = &mut z[r * n_out..(r + 1) * n_out];
                zr.copy_from_slice(b);
                for k in 0..n_in {
                    let x = a[r * n_in + k];
                    if x == 0.0 {
                        continue;
                    }
                    let wk = &w[k * n_out..(k + 1) * n_out];
                    for (zj, wj) in zr.iter_mut().zip(wk) {
                        *zj += x * wj;
                    }
                }
            }
            let out = if l == last { z.clone() } else { z.iter().map(|&v| self.config.activation.apply(v)).collect() };
            zs.push(z);
            acts.push(out);
        }
        Ok(Forward { zs, acts })
    }

    fn labels<'a>(&self, data: &'a Dataset) -> Result<&'a [usize]> {
        let labels =
            data.labels().ok_or_else(|| FedPruneError::ShapeMismatch("MLP classifier needs class labels".into()))?;
        let c = *self.config.widths.last().expect("validated");
        if data.n_classes > c {
            return Err(FedPruneError::ShapeMismatch(format!("{} classes but {c} outputs", data.n_classes)));
        }
        Ok(labels)
    }

    /// Hidden-unit removal for whole-column masks: a dead unit's constant
    /// output `act(bias)` is folded into the next layer's bias before its
    /// column, bias entry and downstream row are dropped, so the reduced
    /// network computes the same function as the masked one.
    fn reduce_columns(&self, store: &VarStore, masks: &MaskSet) -> Result<Reduced<Self>> {
        let mut params = apply_mask(store, &store.params(), masks)?;
        let mut widths = self.config.widths.clone();
        let act = self.config.activation;
        for l in 0..self.n_layers() - 1 {
            let mask = masks
                .get(&Self::weight_name(l))
                .ok_or_else(|| FedPruneError::MaskMismatch(format!("no mask for layer {l}")))?;
            let dead = mask.pruned_indices();
            if dead.is_empty() || dead.len() == widths[l + 1] || widths[l + 1] - dead.len() < 1 {
                continue;
            }
            let (n_in, n_mid, n_out) = (widths[l], widths[l + 1], widths[l + 2]);
            let keep: Vec<usize> = (0..n_mid).filter(|j| !dead.contains(j)).collect();

            let (head, tail) = params.split_at_mut(2 * l + 2);
            let (w, b) = (&head[2 * l], &head[2 * l + 1]);
            let (w_next, b_next) = tail.split_at_mut(1);
            let (w_next, b_next) = (&mut w_next[0], &mut b_next[0]);
            for &j in &dead {
                let a = act.apply(b[j]);
                for k in 0..n_out {
                    b_next[k] += a * w_next[j * n_out + k];
                }
            }
            let new_w: Vec<f64> = (0..n_in).flat_map(|r| keep.iter().map(move |&j| w[r * n_mid + j])).collect();
            let new_b: Vec<f64> = keep.iter().map(|&j| b[j]).collect();
            let new_w_next: Vec<f64> = keep.iter().flat_map(|&j| w_next[j * n_out..(j + 1) * n_out].to_vec()).collect();
            *w_next = new_w_next;
            params[2 * l] = new_w;
            params[2 * l + 1] = new_b;
            widths[l + 1] = keep.len();
        }
        let model = Mlp::new(MlpConfig { widths: widths.clone(), ..self.config.clone() })?;
        let new_store = model.store_from_params(params)?;

        // Hidden columns that survive are all kept; anything that could not be
        // removed (the output layer, fully dead layers) keeps its mask.
        let mut residual = Vec::new();
        for l in (0..model.n_layers()).filter(|&l| model.is_prunable_layer(l)) {
            let name = Self::weight_name(l);
            let old = masks.get(&name).ok_or_else(|| FedPruneError::MaskMismatch(format!("no mask for `{name}`")))?;
            let geometry = SliceGeometry::new(Pattern::WholeColumn, widths[l], widths[l + 1])?;
            let keep = if old.keep.len() == widths[l + 1] { old.keep.clone() } else { vec![true; widths[l + 1]] };
            residual.push(SliceMask { var_name: name, geometry, keep });
        }
        Ok(Reduced { model, store: new_store, masks: MaskSet { pattern: Pattern::WholeColumn, masks: residual } })
    }
}

impl Model for Mlp {
    fn build_store(&self, rng: &mut ChaCha8Rng) -> Result<VarStore> {
        let mut params = Vec::new();
        for l in 0..self.n_layers() {
            let (i, o) = (self.config.widths[l], self.config.widths[l + 1]);
            let gain = match self.config.activation {
                Activation::Relu => 2.0,
                Activation::Tanh => 1.0,
            };
            let scale = (gain / i as f64).sqrt();
            params.push((0..i * o).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect());
            params.push(vec![0.0; o]);
        }
        self.store_from_params(params)
    }

    fn loss_grad(&self, params: &[Vec<f64>], data: &Dataset, batch: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(FedPruneError::Empty("batch".into()));
        }
        let labels = self.labels(data)?;
        let fwd = self.forward(params, data, batch)?;
        let n = batch.len();
        let c = *self.config.widths.last().expect("validated");
        let logits = fwd.acts.last().expect("at least one layer");

        let mut loss = 0.0;
        let mut delta = vec![0.0; n * c];
        for (r, &ex) in batch.iter().enumerate() {
            let row = &logits[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            let y = labels[ex];
            loss += log_z - row[y];
            for k in 0..c {
                let p = (row[k] - log_z).exp();
                delta[r * c + k] = (p - if k == y { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        loss /= n as f64;

        let mut grads = vec![Vec::new(); params.len()];
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.config.widths[l], self.config.widths[l + 1]);
            let a = &fwd.acts[l];
            let w = &params[2 * l];
            let mut gw = vec![0.0; n_in * n_out];
            let mut gb = vec![0.0; n_out];
            for r in 0..n {
                let dr = &delta[r * n_out..(r + 1) * n_out];
                for (g, d) in gb.iter_mut().zip(dr) {
                    *g += d;
                }
                for k in 0..n_in {
                    let x = a[r * n_in + k];
                    if x == 0.0 {
                        continue;
                    }
                    for (g, d) in gw[k * n_out..(k + 1) * n_out].iter_mut().zip(dr) {
                        *g += x * d;
                    }
                }
            }
            if l > 0 {
                let z = &fwd.zs[l];
                let mut prev = vec![0.0; n * n_in];
                for r in 0..n {
                    let dr = &delta[r * n_out..(r + 1) * n_out];
                    for k in 0..n_in {
                        let wk = &w[k * n_out..(k + 1) * n_out];
                        let s: f64 = wk.iter().zip(dr).map(|(w, d)| w * d).sum();
                        let idx = r * n_in + k;
                        prev[idx] = s * self.config.activation.deriv(z[idx], a[idx]);
                    }
                }
                delta = prev;
            }
            grads[2 * l] = gw;
            grads[2 * l + 1] = gb;
        }
        Ok((loss, grads))
    }

    fn quality(&self, params: &[Vec<f64>], data: &Dataset) -> Result<f64> {
        let labels = self.labels(data)?;
        if data.is_empty() {
            return Err(FedPruneError::Empty("evaluation set".into()));
        }
        let all: Vec<usize> = (0..data.len()).collect();
        let fwd = self.forward(params, data, &all)?;
        let c = *self.config.widths.last().expect("validated");
        let logits = fwd.acts.last().expect("at least one layer");
        let correct = all
            .iter()
            .filter(|&&r| {
                let row = &logits[r * c..(r + 1) * c];
                let pred = (0..c).fold(0, |best, k| if row[k] > row[best] { k } else { best });
                pred == labels[r]
            })
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    fn reduce(&self, store: &VarStore, masks: &MaskSet) -> Result<Reduced<Self>> {
        if masks.pattern == Pattern::WholeColumn {
            self.reduce_columns(store, masks)
        } else {
            let mut reduced = store.clone();
            reduced.set_params(apply_mask(store, &store.params(), masks)?)?;
            Ok(Reduced { model: self.clone(), store: reduced, masks: masks.clone() })
        }
    }
}

/// Linear least-squares regressor `y = x W + b` with loss `0.5 * mean ||y - t||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegressor {
    pub input_dim: usize,
    pub outputs: usize,
}

impl LinearRegressor {
    fn targets<'a>(&self, data: &'a Dataset) -> Result<&'a [f64]> {
        match &data.targets {
            Targets::Values(v) if v.len() == data.len() * self.outputs => Ok(v),
            _ => Err(FedPruneError::ShapeMismatch("regressor needs real-valued targets".into())),
        }
    }

    fn predict(&self, params: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        let (w, b) = (&params[0], &params[1]);
        (0..self.outputs)
            .map(|j| b[j] + (0..self.input_dim).map(|i| x[i] * w[i * self.outputs + j]).sum::<f64>())
            .collect()
    }
}

impl Model for LinearRegressor {
    fn build_store(&self, rng: &mut ChaCha8Rng) -> Result<VarStore> {
        let mut store = VarStore::new();
        let scale = (1.0 / self.input_dim as f64).sqrt();
        let w = (0..self.input_dim * self.outputs).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        store.register_with_values("weight", &[self.input_dim, self.outputs], Role::Prunable, &[], w)?;
        store.register_with_values("bias", &[self.outputs], Role::Excluded, &[], vec![0.0; self.outputs])?;
        Ok(store)
    }

    fn loss_grad(&self, params: &[Vec<f64>], data: &Dataset, batch: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(FedPruneError::Empty("batch".into()));
        }
        if params.len() != 2 || params[0].len() != self.input_dim * self.outputs || data.dim != self.input_dim {
            return Err(FedPruneError::ShapeMismatch("regressor parameters".into()));
        }
        let t = self.targets(data)?;
        let n = batch.len() as f64;
        let mut gw = vec![0.0; self.input_dim * self.outputs];
        let mut gb = vec![0.0; self.outputs];
        let mut loss = 0.0;
        for &ex in batch {
            let x = data.row(ex);
            let y = self.predict(params, x);
            for j in 0..self.outputs {
                let r = y[j] - t[ex * self.outputs + j];
                loss += 0.5 * r * r / n;
                gb[j] += r / n;
                for i in 0..self.input_dim {
                    gw[i * self.outputs + j] += x[i] * r / n;
                }
            }
        }
        Ok((loss, vec![gw, gb]))
    }

    /// Negative mean squared error.
    fn quality(&self, params: &[Vec<f64>], data: &Dataset) -> Result<f64> {
        let all: Vec<usize> = (0..data.len()).collect();
        Ok(-2.0 * self.loss(params, data, &all)?)
    }
}
