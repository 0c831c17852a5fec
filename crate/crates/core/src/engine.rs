//! The federated pruning loop: mask refreshes, client selection, local
//! training on the reduced model, aggregation, and the fine-tuning switch.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{gen_train_eval, partition_clients, Dataset};
use crate::error::{FedPruneError, Result};
use crate::importance::{compute_scores, ImportanceTable, Method, MomentumState, Norm};
use crate::masks::{
    apply_mask, expand, generate_mask_per_var, round_to_slice_budget, shrink, zero_param_ratio, MaskSet, PackedModel,
    Pattern,
};
use crate::metrics::RoundRecord;
use crate::model::{Mlp, Model};
use crate::rng::component_rng;
use crate::schedule::{allocate_per_layer, Allocation, LayerStat, Phase, SparsityPlan};
use crate::var_store::VarStore;

/// Hyperparameters of the federated loop itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub pattern: Pattern,
    pub method: Method,
    pub norm: Norm,
    pub beta: f64,
    pub mask_refinement: bool,
    pub clients_per_round: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub client_lr: f64,
    pub server_lr: f64,
    pub server_momentum: f64,
    pub seed: u64,
    pub threads: usize,
    pub record_wall_time: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        RunConfig::default().train_settings()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Size of the client's shard; the aggregation weight.
    pub n_k: usize,
    /// `W - W_hat` in the packed layout the client received.
    pub packed_delta: PackedModel,
    /// Mean minibatch loss over the local steps.
    pub local_loss: f64,
}

/// Local SGD on the packed model. Each step evaluates the gradient on the
/// masked full-shape view, keeps only the kept slices of it, and updates the
/// packed values; masked weights never exist on the client.
///
/// Minibatches walk a per-(round, client) shuffle of the shard cyclically.
#[allow(clippy::too_many_arguments)]
pub fn client_local_update<M: Model>(
    model: &M,
    layout: &VarStore,
    masks: &MaskSet,
    reduced: &PackedModel,
    data: &Dataset,
    shard: &[usize],
    client_id: usize,
    round: u64,
    settings: &TrainSettings,
) -> Result<ClientUpdate> {
    if shard.is_empty() {
        return Err(FedPruneError::Empty(format!("client {client_id} has an empty shard")));
    }
    if settings.local_steps == 0 || settings.batch_size == 0 {
        return Err(FedPruneError::OutOfRange("local_steps and batch_size must be positive".into()));
    }
    let mut rng = component_rng(settings.seed, "client", &[round, client_id as u64]);
    let mut order = shard.to_vec();
    order.shuffle(&mut rng);
    let b = settings.batch_size.min(order.len());

    let mut local = reduced.clone();
    let mut cursor = 0;
    let mut loss_sum = 0.0;
    let mut batch = Vec::with_capacity(b);
    for _ in 0..settings.local_steps {
        batch.clear();
        for _ in 0..b {
            batch.push(order[cursor]);
            cursor = (cursor + 1) % order.len();
        }
        let full = expand(&local, masks)?;
        let (loss, grads) = model.loss_grad(&full, data, &batch)?;
        let g = crate::masks::pack(layout, &grads, masks)?;
        local = local.zip_map(&g, |w, gw| w - settings.client_lr * gw)?;
        loss_sum += loss;
    }
    let packed_delta = reduced.zip_map(&local, |w0, w1| w0 - w1)?;
    if packed_delta.vars.iter().any(|v| v.values().iter().any(|x| !x.is_finite())) {
        return Err(FedPruneError::NonFinite(format!("update of client {client_id}")));
    }
    Ok(ClientUpdate { client_id, n_k: shard.len(), packed_delta, local_loss: loss_sum / settings.local_steps as f64 })
}

/// Example-weighted mean of the expanded client deltas, summed in ascending
/// client order. Masked coordinates come out exactly zero.
pub fn aggregate(updates: &[ClientUpdate], masks: &MaskSet) -> Result<Vec<Vec<f64>>> {
    if updates.is_empty() {
        return Err(FedPruneError::Empty("no client updates to aggregate".into()));
    }
    let n: usize = updates.iter().map(|u| u.n_k).sum();
    if n == 0 {
        return Err(FedPruneError::Empty("client updates cover zero examples".into()));
    }
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for u in ordered {
        let weight = u.n_k as f64 / n as f64;
        let delta = expand(&u.packed_delta, masks)?;
        match acc.as_mut() {
            None => {
                acc = Some(delta.into_iter().map(|d| d.into_iter().map(|x| weight * x).collect()).collect());
            }
            Some(acc) => {
                if acc.len() != delta.len() || acc.iter().zip(&delta).any(|(a, d)| a.len() != d.len()) {
                    return Err(FedPruneError::MaskMismatch(format!(
                        "update of client {} has a different layout",
                        u.client_id
                    )));
                }
                for (a, d) in acc.iter_mut().zip(&delta) {
                    for (ai, di) in a.iter_mut().zip(d) {
                        *ai += weight * di;
                    }
                }
            }
        }
    }
    Ok(acc.expect("at least one update"))
}

/// Uniform choice of `k` distinct clients, returned in ascending order.
pub fn select_clients(seed: u64, round: u64, n_clients: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n_clients {
        return Err(FedPruneError::Config(format!("cannot select {k} clients from a pool of {n_clients}")));
    }
    let mut rng = component_rng(seed, "select", &[round]);
    let mut chosen = index::sample(&mut rng, n_clients, k).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Round tags at and above this value belong to pretraining rounds.
pub const PRETRAIN_TAG: u64 = 1 << 40;

/// Server-side state between rounds.
#[derive(Debug, Clone)]
pub struct RoundState {
    /// Index of the next round to run.
    pub round: u32,
    pub store: VarStore,
    pub masks: MaskSet,
    pub momentum: MomentumState,
    pub phase: Phase,
    /// Sparsity set by the latest mask refresh.
    pub sparsity: f64,
    pub zero_ratio: f64,
    pub finetuned: bool,
    /// Set once refinement is off and the target mask exists, or after fine-tuning starts.
    pub mask_frozen: bool,
    pub last_scores: Option<ImportanceTable>,
    velocity: Option<Vec<Vec<f64>>>,
}

/// Traffic and loss of one federated step.
struct StepOutcome {
    bytes_down: u64,
    bytes_up: u64,
    train_loss: f64,
    delta: Vec<Vec<f64>>,
}

pub struct Simulation<M: Model> {
    pub model: M,
    pub plan: SparsityPlan,
    pub settings: TrainSettings,
    pub train: Dataset,
    pub eval: Dataset,
    pub shards: Vec<Vec<usize>>,
    pub state: RoundState,
    pool: Option<rayon::ThreadPool>,
    started: Instant,
}

impl<M: Model> Simulation<M> {
    pub fn new(
        model: M,
        store: VarStore,
        plan: SparsityPlan,
        settings: TrainSettings,
        train: Dataset,
        eval: Dataset,
        shards: Vec<Vec<usize>>,
    ) -> Result<Self> {
        plan.validate()?;
        if settings.clients_per_round == 0 || settings.clients_per_round > shards.len() {
            return Err(FedPruneError::Config(format!(
                "clients_per_round ({}) exceeds the pool of {} clients",
                settings.clients_per_round,
                shards.len()
            )));
        }
        if let Some(i) = shards.iter().position(|s| s.is_empty()) {
            return Err(FedPruneError::Empty(format!("client {i} has an empty shard")));
        }
        let masks = MaskSet::all_keep(&store, settings.pattern)?;
        let momentum = MomentumState::new(settings.beta)?;
        let pool = match settings.threads {
            0 | 1 => None,
            n => Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| FedPruneError::InvalidState(format!("thread pool: {e}")))?,
            ),
        };
        let phase = plan.phase_of(0)?;
        Ok(Self {
            model,
            plan,
            settings,
            train,
            eval,
            shards,
            state: RoundState {
                round: 0,
                store,
                masks,
                momentum,
                phase,
                sparsity: 0.0,
                zero_ratio: 0.0,
                finetuned: false,
                mask_frozen: false,
                last_scores: None,
                velocity: None,
            },
            pool,
            started: Instant::now(),
        })
    }

    fn wall_time(&self) -> f64 {
        if self.settings.record_wall_time {
            self.started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    /// Server weights with the current masks applied.
    pub fn masked_params(&self) -> Result<Vec<Vec<f64>>> {
        apply_mask(&self.state.store, &self.state.store.params(), &self.state.masks)
    }

    pub fn eval_quality(&self) -> Result<f64> {
        self.model.quality(&self.masked_params()?, &self.eval)
    }

    /// Mean loss of the masked server model over the whole training set.
    pub fn train_loss(&self) -> Result<f64> {
        let all: Vec<usize> = (0..self.train.len()).collect();
        self.model.loss(&self.masked_params()?, &self.train, &all)
    }

    /// Record describing the model before any training round.
    pub fn initial_record(&self) -> Result<RoundRecord> {
        Ok(RoundRecord {
            round: self.state.round,
            phase: self.state.phase,
            sparsity: self.state.sparsity,
            zero_param_ratio: self.state.zero_ratio,
            bytes_down: 0,
            bytes_up: 0,
            train_loss: self.train_loss()?,
            eval_accuracy: self.eval_quality()?,
            wall_time_s: self.wall_time(),
        })
    }

    /// Rescores every prunable slice and regenerates the masks at the
    /// scheduled sparsity for `round`.
    pub fn refresh_masks(&mut self, round: u32) -> Result<()> {
        let s = self.plan.current_sparsity(round)?;
        let st = &mut self.state;
        if self.settings.method.needs_momentum() && !st.momentum.is_initialized() {
            // Nothing to rank by before the first aggregated update.
            return Ok(());
        }
        let table = compute_scores(
            &st.store,
            self.settings.pattern,
            self.settings.method,
            self.settings.norm,
            &st.momentum,
            u64::from(round),
        )?;
        let per_var = if s == 0.0 {
            vec![0.0; table.vars.len()]
        } else {
            let stats: Vec<LayerStat> = table
                .vars
                .iter()
                .map(|v| {
                    let values = st.store.values(&v.name)?;
                    Ok(LayerStat {
                        name: v.name.clone(),
                        magnitude: values.iter().map(|x| x.abs()).sum::<f64>() / values.len() as f64,
                        param_count: values.len(),
                    })
                })
                .collect::<Result<_>>()?;
            let mode = self.plan.allocation;
            if mode == Allocation::Unified {
                vec![s; stats.len()]
            } else {
                let dens = allocate_per_layer(s, &stats, mode, self.plan.d_min)?;
                let per_var: Vec<f64> = dens.into_iter().map(|d| (1.0 - d).clamp(0.0, 1.0)).collect();
                let geoms: Vec<_> = table.vars.iter().map(|v| v.geometry).collect();
                round_to_slice_budget(&geoms, &per_var)?
            }
        };
        st.masks = generate_mask_per_var(&table, &per_var, self.settings.pattern)?;
        st.sparsity = s;
        st.zero_ratio = zero_param_ratio(&st.store, &st.masks, true)?;
        st.last_scores = Some(table);
        if !self.settings.mask_refinement && s >= self.plan.target {
            st.mask_frozen = true;
        }
        Ok(())
    }

    /// Replaces the server model by its physically reduced form and freezes
    /// the masks. Pruned weights are gone afterwards.
    pub fn enter_finetune(&mut self) -> Result<()> {
        if self.state.finetuned {
            return Err(FedPruneError::InvalidState("fine-tuning has already started".into()));
        }
        let reduced = self.model.reduce(&self.state.store, &self.state.masks)?;
        self.model = reduced.model;
        self.state.store = reduced.store;
        self.state.masks = reduced.masks;
        self.state.finetuned = true;
        self.state.mask_frozen = true;
        self.state.phase = Phase::FineTuning;
        self.state.velocity = None;
        Ok(())
    }

    fn run_clients(&self, packed: &PackedModel, chosen: &[usize], round: u64) -> Result<Vec<ClientUpdate>> {
        let st = &self.state;
        let one = |&k: &usize| {
            client_local_update(
                &self.model,
                &st.store,
                &st.masks,
                packed,
                &self.train,
                &self.shards[k],
                k,
                round,
                &self.settings,
            )
        };
        match (&self.pool, self.settings.threads) {
            (_, 1) => chosen.iter().map(one).collect(),
            (Some(pool), _) => pool.install(|| chosen.par_iter().map(one).collect()),
            (None, _) => chosen.par_iter().map(one).collect(),
        }
    }

    /// Shrink, local training, aggregation and the server step.
    fn federated_step(&mut self, round: u64) -> Result<StepOutcome> {
        let packed = shrink(&self.state.store, &self.state.masks)?;
        let bytes_down = packed.encoded_len() as u64;
        let chosen = select_clients(self.settings.seed, round, self.shards.len(), self.settings.clients_per_round)?;
        let updates = self.run_clients(&packed, &chosen, round)?;
        let bytes_up = updates[0].packed_delta.encoded_len() as u64;
        let n: usize = updates.iter().map(|u| u.n_k).sum();
        let train_loss = updates.iter().map(|u| u.local_loss * u.n_k as f64).sum::<f64>() / n as f64;
        let delta = aggregate(&updates, &self.state.masks)?;

        let st = &mut self.state;
        let step = if self.settings.server_momentum > 0.0 {
            let mu = self.settings.server_momentum;
            let v = match st.velocity.take() {
                Some(mut v) => {
                    for (vi, di) in v.iter_mut().zip(&delta) {
                        for (a, b) in vi.iter_mut().zip(di) {
                            *a = mu * *a + b;
                        }
                    }
                    // Masked weights must not drift on stale velocity.
                    apply_mask(&st.store, &v, &st.masks)?
                }
                None => delta.clone(),
            };
            st.velocity = Some(v.clone());
            v
        } else {
            delta.clone()
        };
        let eta = self.settings.server_lr;
        let mut params = st.store.params();
        for (p, d) in params.iter_mut().zip(&step) {
            for (w, g) in p.iter_mut().zip(d) {
                *w -= eta * g;
            }
        }
        st.store.set_params(params)?;
        st.store.step += 1;
        Ok(StepOutcome { bytes_down, bytes_up, train_loss, delta })
    }

    /// Dense federated rounds that produce the starting model. They use
    /// their own client-selection and local-training streams and emit no
    /// records.
    pub fn pretrain(&mut self, rounds: u32) -> Result<()> {
        if self.state.round != 0 || self.state.masks.pruned_params() != 0 {
            return Err(FedPruneError::InvalidState("pretraining must precede round 0".into()));
        }
        for i in 0..rounds {
            self.federated_step(PRETRAIN_TAG + u64::from(i))?;
        }
        self.state.store.step = 0;
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.state.round >= self.plan.r_end
    }

    /// Runs round `state.round` and returns its record (labelled `round + 1`).
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let r = self.state.round;
        if self.is_done() {
            return Err(FedPruneError::InvalidState(format!("round {r} is past r_end")));
        }
        if r >= self.plan.r_finetune {
            if !self.state.finetuned {
                self.enter_finetune()?;
            }
        } else {
            self.state.phase = self.plan.phase_of(r)?;
            if self.plan.is_refresh_round(r) && !self.state.mask_frozen {
                self.refresh_masks(r)?;
            }
        }
        let out = self.federated_step(u64::from(r))?;
        if !self.state.finetuned {
            self.state.momentum.update(&out.delta)?;
        }
        self.state.round += 1;
        Ok(RoundRecord {
            round: self.state.round,
            phase: self.state.phase,
            sparsity: self.state.sparsity,
            zero_param_ratio: self.state.zero_ratio,
            bytes_down: out.bytes_down,
            bytes_up: out.bytes_up,
            train_loss: out.train_loss,
            eval_accuracy: self.eval_quality()?,
            wall_time_s: self.wall_time(),
        })
    }

    /// Initial record followed by one record per round up to `r_end`.
    pub fn run_to_end(&mut self) -> Result<Vec<RoundRecord>> {
        let mut records = vec![self.initial_record()?];
        while !self.is_done() {
            records.push(self.run_round()?);
        }
        Ok(records)
    }
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub model: Mlp,
    pub store: VarStore,
    pub masks: MaskSet,
}

/// Builds the data, clients and MLP described by `config`.
pub fn build_simulation(config: &RunConfig) -> Result<Simulation<Mlp>> {
    config.validate()?;
    let (train, eval) = gen_train_eval(&config.synth_spec())?;
    let shards = partition_clients(&train, config.n_clients, config.partition, config.alpha, config.seed)?;
    let model = Mlp::new(config.mlp_config())?;
    let mut rng = component_rng(config.seed, "init", &[]);
    let store = model.build_store(&mut rng)?;
    let mut sim = Simulation::new(model, store, config.plan(), config.train_settings(), train, eval, shards)?;
    sim.pretrain(config.pretrain_rounds)?;
    Ok(sim)
}

/// Runs every round of `config` and returns the records and final model.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentOutput> {
    let mut sim = build_simulation(config)?;
    let records = sim.run_to_end()?;
    Ok(ExperimentOutput { records, model: sim.model, store: sim.state.store, masks: sim.state.masks })
}
