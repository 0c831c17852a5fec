//! Acceptance suite: eleven end-to-end checks, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines always
//! reach the terminal. Exits nonzero if any check fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fedprune::config::RunConfig;
use fedprune::data::{gen_synthetic, Dataset, SynthSpec, Targets};
use fedprune::engine::{aggregate, build_simulation, run_experiment, ClientUpdate, Simulation, TrainSettings};
use fedprune::importance::{Method, Norm};
use fedprune::masks::{
    apply_mask, expand, mask_from_scores, shrink, zero_param_ratio, MaskSet, PackedModel, PackedVar, Pattern,
    SliceGeometry, SliceMask,
};
use fedprune::metrics::metrics_csv_string;
use fedprune::model::{Activation, LinearRegressor, Mlp, MlpConfig, Model};
use fedprune::schedule::{allocate_per_layer, Allocation, LayerStat, ScheduleKind, SparsityPlan};
use fedprune::var_store::{Role, VarStore};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);
type RegrowthTrace = (Vec<bool>, Vec<bool>, Vec<usize>, Vec<usize>);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const PATTERNS: [Pattern; 4] = [Pattern::WholeRow, Pattern::WholeColumn, Pattern::HalfRow, Pattern::HalfColumn];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

// 1 -------------------------------------------------------------------------

/// Slices per half and total, worked out from the shape alone.
fn oracle_groups(pattern: Pattern, rows: usize, cols: usize) -> Vec<usize> {
    match pattern {
        Pattern::WholeRow => vec![rows],
        Pattern::WholeColumn => vec![cols],
        Pattern::HalfRow => vec![rows, rows],
        Pattern::HalfColumn => vec![cols, cols],
    }
}

fn mask_exactness() -> Check {
    let shapes = [(2, 2), (3, 5), (4, 4), (7, 3), (8, 16), (16, 8), (10, 10), (5, 13), (32, 16)];
    let mut r = rng(1);
    let mut cases = 0;
    for pattern in PATTERNS {
        for &(rows, cols) in &shapes {
            let geom = SliceGeometry::new(pattern, rows, cols).map_err(|e| e.to_string())?;
            let groups = oracle_groups(pattern, rows, cols);
            ensure!(geom.n_slices() == groups.iter().sum::<usize>(), "slice count for {rows}x{cols}");
            for tenths in 1..=5usize {
                let s = tenths as f64 / 10.0;
                let scores: Vec<f64> = (0..geom.n_slices()).map(|_| r.gen_range(0.0..1.0)).collect();
                let keep = mask_from_scores(&geom, &scores, s).map_err(|e| e.to_string())?;
                let mut start = 0;
                for &n in &groups {
                    let expected = tenths * n / 10;
                    let pruned = keep[start..start + n].iter().filter(|k| !**k).count();
                    ensure!(
                        pruned == expected,
                        "{pattern:?} {rows}x{cols} s={s}: {pruned} pruned in a group of {n}, expected {expected}"
                    );
                    // The pruned ones are the lowest scores of their group.
                    let max_pruned =
                        (start..start + n).filter(|&i| !keep[i]).map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
                    let min_kept =
                        (start..start + n).filter(|&i| keep[i]).map(|i| scores[i]).fold(f64::INFINITY, f64::min);
                    ensure!(max_pruned <= min_kept, "{pattern:?} {rows}x{cols}: pruned a higher score");
                    start += n;
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} (pattern, shape, sparsity) cases"))
}

// 2 -------------------------------------------------------------------------

fn roundtrip() -> Check {
    let mut r = rng(2);
    for case in 0..1000 {
        let pattern = PATTERNS[case % 4];
        let mut store = VarStore::new();
        let n_vars = r.gen_range(1..4);
        let mut element_keep = Vec::new();
        let mut masks = Vec::new();
        for v in 0..n_vars {
            let rows = r.gen_range(2..9);
            let cols = r.gen_range(2..9);
            let values: Vec<f64> = (0..rows * cols).map(|_| normal(&mut r) * 10f64.powi(r.gen_range(-3..4))).collect();
            let name = format!("w{v}");
            store.register_with_values(&name, &[rows, cols], Role::Prunable, &[], values).map_err(|e| e.to_string())?;
            let geom = SliceGeometry::new(pattern, rows, cols).map_err(|e| e.to_string())?;
            let keep: Vec<bool> = (0..geom.n_slices()).map(|_| r.gen_bool(0.5)).collect();
            // Element-level mask derived independently of the library's slicing.
            let mut emask = vec![false; rows * cols];
            for (i, row_keep) in emask.chunks_mut(cols).enumerate() {
                for (j, e) in row_keep.iter_mut().enumerate() {
                    *e = match pattern {
                        Pattern::WholeRow => keep[i],
                        Pattern::WholeColumn => keep[j],
                        Pattern::HalfRow => keep[if j < cols / 2 { i } else { rows + i }],
                        Pattern::HalfColumn => keep[if i < rows / 2 { j } else { cols + j }],
                    };
                }
            }
            element_keep.push(emask);
            masks.push(SliceMask { var_name: name, geometry: geom, keep });
        }
        let bias: Vec<f64> = (0..3).map(|_| normal(&mut r)).collect();
        store.register_with_values("bias", &[3], Role::Excluded, &[], bias.clone()).map_err(|e| e.to_string())?;
        element_keep.push(vec![true; 3]);
        let masks = MaskSet { pattern, masks };

        let packed = shrink(&store, &masks).map_err(|e| e.to_string())?;
        let decoded = PackedModel::decode(&packed.encode()).map_err(|e| e.to_string())?;
        let back = expand(&decoded, &masks).map_err(|e| e.to_string())?;
        for ((var, got), keep) in store.iter().zip(&back).zip(&element_keep) {
            for (i, (&w, &g)) in var.values.iter().zip(got).enumerate() {
                // Wire buffers are f32.
                let want = if keep[i] { w as f32 as f64 } else { 0.0 };
                ensure!(g.to_bits() == want.to_bits(), "case {case}: `{}`[{i}] is {g}, expected {want}", var.spec.name);
            }
        }
        // In memory the roundtrip is exact in f64.
        let direct = expand(&packed, &masks).map_err(|e| e.to_string())?;
        for ((var, got), keep) in store.iter().zip(&direct).zip(&element_keep) {
            for (i, (&w, &g)) in var.values.iter().zip(got).enumerate() {
                let want = if keep[i] { w } else { 0.0 };
                ensure!(g.to_bits() == want.to_bits(), "case {case}: in-memory mismatch in `{}`", var.spec.name);
            }
        }
    }
    Ok("1000 randomized cases, bit-exact".into())
}

// 3 -------------------------------------------------------------------------

fn zero_update_invariant() -> Check {
    let mut details = Vec::new();
    for pattern in [Pattern::WholeColumn, Pattern::HalfRow] {
        let cfg = RunConfig {
            pattern,
            schedule: ScheduleKind::Step,
            ramp_steps: 3,
            target_sparsity: 0.5,
            r_finetune: 100,
            r_end: 150,
            ..RunConfig::default()
        };
        let mut sim = build_simulation(&cfg).map_err(|e| e.to_string())?;
        let mut prev_scores: Option<(fedprune::importance::ImportanceTable, MaskSet)> = None;
        let mut masked_checked = 0usize;
        let mut scores_checked = 0usize;
        for round in 0..50u32 {
            let before = sim.state.store.params();
            sim.run_round().map_err(|e| e.to_string())?;
            let after = sim.state.store.params();
            let masks = &sim.state.masks;
            for (spec, (b, a)) in sim.state.store.specs().zip(before.iter().zip(&after)) {
                if !spec.is_prunable() {
                    continue;
                }
                let keep = masks.get(&spec.name).ok_or("missing mask")?.element_mask();
                for i in 0..b.len() {
                    if !keep[i] {
                        ensure!(
                            a[i].to_bits() == b[i].to_bits(),
                            "{pattern:?} round {round}: masked `{}`[{i}] moved {} -> {}",
                            spec.name,
                            b[i],
                            a[i]
                        );
                        masked_checked += 1;
                    }
                }
            }
            if round % cfg.delta_r == 0 {
                let table = sim.state.last_scores.clone().ok_or("no scores after a refresh")?;
                if let Some((old_table, old_masks)) = &prev_scores {
                    for (old, new) in old_table.vars.iter().zip(&table.vars) {
                        let m = old_masks.get(&old.name).ok_or("missing mask")?;
                        for s in m.pruned_indices() {
                            ensure!(
                                old.scores[s].to_bits() == new.scores[s].to_bits(),
                                "{pattern:?} round {round}: masked slice {s} of `{}` rescored {} -> {}",
                                old.name,
                                old.scores[s],
                                new.scores[s]
                            );
                            scores_checked += 1;
                        }
                    }
                }
                prev_scores = Some((table, sim.state.masks.clone()));
            }
        }
        ensure!(masked_checked > 0 && scores_checked > 0, "{pattern:?}: nothing was masked");
        details.push(format!("{pattern:?}: {masked_checked} weight-rounds, {scores_checked} scores"));
    }
    Ok(details.join("; "))
}

// 4 -------------------------------------------------------------------------

/// Two-input regressor whose target ignores input `a`. Row `a` starts masked
/// with |w_a| = 1; kept row `b` starts at 2 and trains down towards 0.5.
fn regrowth_sim(method: Method) -> fedprune::Result<Simulation<LinearRegressor>> {
    let model = LinearRegressor { input_dim: 2, outputs: 1 };
    let mut store = VarStore::new();
    store.register_with_values("weight", &[2, 1], Role::Prunable, &[], vec![1.0, 2.0])?;
    store.register_with_values("bias", &[1], Role::Excluded, &[], vec![0.0])?;
    let mut r = rng(4);
    let n = 64;
    let features: Vec<f64> = (0..2 * n).map(|_| normal(&mut r)).collect();
    let targets = (0..n).map(|i| 0.5 * features[2 * i + 1]).collect();
    let data = Dataset { dim: 2, features, targets: Targets::Values(targets), n_classes: 0 };
    let shards: Vec<Vec<usize>> = (0..4).map(|k| (k..n).step_by(4).collect()).collect();
    let plan = SparsityPlan {
        target: 0.5,
        delta_r: 10,
        r_finetune: 30,
        r_end: 31,
        schedule: ScheduleKind::Constant,
        allocation: Allocation::Unified,
        ..SparsityPlan::default()
    };
    let settings = TrainSettings {
        pattern: Pattern::WholeRow,
        method,
        norm: Norm::L1,
        clients_per_round: 2,
        seed: 4,
        threads: 1,
        ..TrainSettings::default()
    };
    let mut sim = Simulation::new(model, store, plan, settings, data.clone(), data, shards)?;
    let geometry = SliceGeometry::new(Pattern::WholeRow, 2, 1)?;
    sim.state.masks = MaskSet {
        pattern: Pattern::WholeRow,
        masks: vec![SliceMask { var_name: "weight".into(), geometry, keep: vec![false, true] }],
    };
    Ok(sim)
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

fn regrowth() -> Check {
    let trace = |method: Method| -> std::result::Result<RegrowthTrace, String> {
        let mut sim = regrowth_sim(method).map_err(|e| e.to_string())?;
        sim.run_round().map_err(|e| e.to_string())?;
        let keep0 = sim.state.masks.get("weight").ok_or("mask")?.keep.clone();
        let order0 = sim.state.last_scores.as_ref().map(|t| argsort(&t.vars[0].scores)).unwrap_or_default();
        for _ in 1..11 {
            sim.run_round().map_err(|e| e.to_string())?;
        }
        let keep1 = sim.state.masks.get("weight").ok_or("mask")?.keep.clone();
        let order1 = sim.state.last_scores.as_ref().map(|t| argsort(&t.vars[0].scores)).unwrap_or_default();
        Ok((keep0, keep1, order0, order1))
    };
    let (w0, w1, o0, o1) = trace(Method::Weight)?;
    ensure!(w0 == vec![false, true], "weight scoring: initial mask {w0:?}");
    ensure!(w1 == vec![true, false], "weight scoring: mask did not flip at the refresh, got {w1:?}");
    ensure!(o0 != o1, "weight scoring: score order unchanged {o0:?}");
    let (g0, g1, _, _) = trace(Method::GradMomentum)?;
    ensure!(g0 == vec![false, true], "grad-momentum scoring: initial mask {g0:?}");
    ensure!(g1 == vec![false, true], "grad-momentum scoring: masked row revived, got {g1:?}");
    Ok("weight scores revive row a at round 10; grad-momentum scores keep it pruned".into())
}

// 5 -------------------------------------------------------------------------

fn scalar_update(id: usize, n_k: usize, d: f64) -> ClientUpdate {
    ClientUpdate {
        client_id: id,
        n_k,
        packed_delta: PackedModel {
            vars: vec![PackedVar::Dense { name: "x".into(), shape: vec![1], values: vec![d] }],
        },
        local_loss: 0.0,
    }
}

fn fedavg_oracle() -> Check {
    let mut store = VarStore::new();
    store.register_var("x", &[1], Role::Excluded, &[]).map_err(|e| e.to_string())?;
    let m = MaskSet::all_keep(&store, Pattern::WholeColumn).map_err(|e| e.to_string())?;
    let agg = aggregate(&[scalar_update(0, 1, 4.0), scalar_update(1, 3, 0.0)], &m).map_err(|e| e.to_string())?;
    ensure!(agg[0][0] == 1.0, "n=(1,3), deltas (4,0) gave {}", agg[0][0]);

    let cfg = RunConfig { target_sparsity: 0.5, n_examples: 400, n_eval: 100, ..RunConfig::default() };
    let spec = cfg.synth_spec();
    let data = gen_synthetic(&spec).map_err(|e| e.to_string())?;
    let shard: Vec<usize> = (0..40).collect();
    let model = Mlp::new(cfg.mlp_config()).map_err(|e| e.to_string())?;
    let store = model.build_store(&mut rng(5)).map_err(|e| e.to_string())?;
    let settings = |k: usize| TrainSettings {
        clients_per_round: k,
        // Full-batch steps: every clone sees the same gradient.
        batch_size: shard.len(),
        threads: 1,
        ..cfg.train_settings()
    };
    let mut single = Simulation::new(
        model.clone(),
        store.clone(),
        cfg.plan(),
        settings(1),
        data.clone(),
        data.clone(),
        vec![shard.clone()],
    )
    .map_err(|e| e.to_string())?;
    let mut clones = Simulation::new(model, store, cfg.plan(), settings(4), data.clone(), data, vec![shard.clone(); 4])
        .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..3 {
        single.run_round().map_err(|e| e.to_string())?;
        clones.run_round().map_err(|e| e.to_string())?;
        for (a, b) in single.state.store.params().iter().zip(clones.state.store.params()) {
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    ensure!(worst <= 1e-12, "4 clones differ from one client by {worst:e}");
    Ok(format!("weighted mean exact; 4 clones vs 1 client max |diff| {worst:.1e}"))
}

// 6 -------------------------------------------------------------------------

fn finite_difference<M: Model>(model: &M, params: &[Vec<f64>], data: &Dataset, batch: &[usize]) -> Vec<Vec<f64>> {
    let eps = 1e-6;
    let mut p = params.to_vec();
    let mut out = Vec::new();
    for v in 0..p.len() {
        let mut g = Vec::with_capacity(p[v].len());
        for i in 0..p[v].len() {
            let orig = p[v][i];
            p[v][i] = orig + eps;
            let up = model.loss(&p, data, batch).expect("loss");
            p[v][i] = orig - eps;
            let down = model.loss(&p, data, batch).expect("loss");
            p[v][i] = orig;
            g.push((up - down) / (2.0 * eps));
        }
        out.push(g);
    }
    out
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn gradient_oracle() -> Check {
    let spec = SynthSpec { seed: 6, n_examples: 64, ..SynthSpec::default() };
    let data = gen_synthetic(&spec).map_err(|e| e.to_string())?;
    let batch: Vec<usize> = (0..16).collect();
    let mut worst = 0.0f64;
    let mut n_vars = 0;
    for activation in [Activation::Relu, Activation::Tanh] {
        let model = Mlp::new(MlpConfig { widths: vec![32, 16, 16, 8], activation, prune_head: false })
            .map_err(|e| e.to_string())?;
        let mut store = model.build_store(&mut rng(6)).map_err(|e| e.to_string())?;
        // Nonzero biases so every bias gradient is exercised.
        let mut r = rng(60);
        let params: Vec<Vec<f64>> =
            store.params().into_iter().map(|p| p.into_iter().map(|x| x + 0.1 * normal(&mut r)).collect()).collect();
        store.set_params(params.clone()).map_err(|e| e.to_string())?;
        let (_, grads) = model.loss_grad(&params, &data, &batch).map_err(|e| e.to_string())?;
        let fd = finite_difference(&model, &params, &data, &batch);
        for ((spec, g), f) in store.specs().zip(&grads).zip(&fd) {
            let e = rel_err(g, f);
            ensure!(e <= 1e-4, "{activation:?} `{}`: relative error {e:e}", spec.name);
            worst = worst.max(e);
            n_vars += 1;
        }
    }
    let reg = LinearRegressor { input_dim: 3, outputs: 2 };
    let mut r = rng(61);
    let features: Vec<f64> = (0..24).map(|_| normal(&mut r)).collect();
    let targets: Vec<f64> = (0..16).map(|_| normal(&mut r)).collect();
    let rdata = Dataset { dim: 3, features, targets: Targets::Values(targets), n_classes: 0 };
    let rparams = reg.build_store(&mut rng(62)).map_err(|e| e.to_string())?.params();
    let (_, rg) = reg.loss_grad(&rparams, &rdata, &(0..8).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let rfd = finite_difference(&reg, &rparams, &rdata, &(0..8).collect::<Vec<_>>());
    for (g, f) in rg.iter().zip(&rfd) {
        let e = rel_err(g, f);
        ensure!(e <= 1e-4, "regressor: relative error {e:e}");
        worst = worst.max(e);
        n_vars += 1;
    }
    Ok(format!("{n_vars} variables, worst relative error {worst:.1e}"))
}

// 7 -------------------------------------------------------------------------

/// Counts zeros after writing the masks into all-ones weights and zeroing the
/// rows a downstream matrix receives from its upstream's pruned columns.
fn brute_force_zero_ratio(store: &VarStore, masks: &MaskSet) -> f64 {
    let ones: Vec<Vec<f64>> = store.iter().map(|v| vec![1.0; v.values.len()]).collect();
    let mut w = apply_mask(store, &ones, masks).expect("masks fit");
    if masks.pattern == Pattern::WholeColumn {
        for (up, down) in store.pairs() {
            let up_mask = masks.get(&store.var(up).spec.name).expect("mask");
            let (_, cols) = store.var(down).spec.view_2d().expect("matrix");
            for j in up_mask.pruned_indices() {
                for c in 0..cols {
                    w[down][j * cols + c] = 0.0;
                }
            }
        }
    }
    let (mut zeros, mut total) = (0usize, 0usize);
    for (spec, buf) in store.specs().zip(&w) {
        if spec.is_prunable() {
            zeros += buf.iter().filter(|x| **x == 0.0).count();
            total += buf.len();
        }
    }
    zeros as f64 / total as f64
}

fn zero_ratio_oracle() -> Check {
    let mut store = VarStore::new();
    store.register_var("w1", &[4, 4], Role::Prunable, &[0]).map_err(|e| e.to_string())?;
    store.register_var("w2", &[4, 4], Role::Prunable, &[0]).map_err(|e| e.to_string())?;
    let g = SliceGeometry::new(Pattern::WholeColumn, 4, 4).map_err(|e| e.to_string())?;
    let quarter = vec![false, true, true, true];
    let masks = MaskSet {
        pattern: Pattern::WholeColumn,
        masks: vec![
            SliceMask { var_name: "w1".into(), geometry: g, keep: quarter.clone() },
            SliceMask { var_name: "w2".into(), geometry: g, keep: quarter },
        ],
    };
    let ratio = zero_param_ratio(&store, &masks, true).map_err(|e| e.to_string())?;
    ensure!(ratio == 11.0 / 32.0, "4x4/4x4 pair at s=0.25 gave {ratio}, expected 11/32");

    let mut r = rng(7);
    for case in 0..100 {
        let pattern = if case % 2 == 0 { Pattern::WholeColumn } else { PATTERNS[r.gen_range(0..4)] };
        let n_layers = r.gen_range(2..5);
        let dims: Vec<usize> = (0..=n_layers).map(|_| r.gen_range(2..7)).collect();
        let mut store = VarStore::new();
        let mut masks = Vec::new();
        let mut sparsity = Vec::new();
        for l in 0..n_layers {
            let mut groups = Vec::new();
            if l > 0 {
                groups.push((l - 1) as u32);
            }
            if l + 1 < n_layers {
                groups.push(l as u32);
            }
            let name = format!("w{l}");
            store.register_var(&name, &[dims[l], dims[l + 1]], Role::Prunable, &groups).map_err(|e| e.to_string())?;
            store.register_var(&format!("b{l}"), &[dims[l + 1]], Role::Excluded, &[]).map_err(|e| e.to_string())?;
            let geom = SliceGeometry::new(pattern, dims[l], dims[l + 1]).map_err(|e| e.to_string())?;
            let s = r.gen_range(0..6) as f64 / 10.0;
            let scores: Vec<f64> = (0..geom.n_slices()).map(|_| r.gen_range(0.0..1.0)).collect();
            let keep = mask_from_scores(&geom, &scores, s).map_err(|e| e.to_string())?;
            sparsity.push((s, geom.rows * geom.cols));
            masks.push(SliceMask { var_name: name, geometry: geom, keep });
        }
        let masks = MaskSet { pattern, masks };
        let got = zero_param_ratio(&store, &masks, true).map_err(|e| e.to_string())?;
        let want = brute_force_zero_ratio(&store, &masks);
        ensure!(got == want, "case {case} ({pattern:?}): ratio {got} vs brute force {want}");
        let own = zero_param_ratio(&store, &masks, false).map_err(|e| e.to_string())?;
        ensure!(got >= own, "case {case}: propagation lowered the ratio");
        if pattern == Pattern::WholeColumn {
            // Directional check: realized zeros never fall below the nominal
            // sparsity once quantization is accounted for.
            let nominal: f64 = masks.pruned_params() as f64 / sparsity.iter().map(|(_, n)| *n as f64).sum::<f64>();
            ensure!(got >= nominal, "case {case}: ratio {got} below nominal {nominal}");
        }
    }
    let cfg = RunConfig { target_sparsity: 0.5, ..RunConfig::default() };
    let mut sim = build_simulation(&cfg).map_err(|e| e.to_string())?;
    sim.run_round().map_err(|e| e.to_string())?;
    let reference = sim.state.zero_ratio;
    ensure!(reference >= 0.5, "reference model at S=0.5 has ratio {reference}");
    Ok(format!("11/32 exact; 100 random sets exact; reference S=0.5 -> {reference:.4}"))
}

// 8 -------------------------------------------------------------------------

fn adaptive_allocation() -> Check {
    let mut r = rng(8);
    let mut worst_budget = 0.0f64;
    let mut worst_verbatim = 0.0f64;
    for case in 0..500 {
        let l = r.gen_range(1..=20);
        let target = r.gen_range(0.0..0.95);
        let layers: Vec<LayerStat> = (0..l)
            .map(|i| LayerStat {
                name: format!("l{i}"),
                magnitude: r.gen_range(0.001..10.0),
                param_count: r.gen_range(1..5000),
            })
            .collect();
        let budget =
            allocate_per_layer(target, &layers, Allocation::AdaptiveBudget, 0.05).map_err(|e| e.to_string())?;
        let weight: f64 = layers.iter().map(|x| x.param_count as f64).sum();
        let mean: f64 = budget.iter().zip(&layers).map(|(d, x)| d * x.param_count as f64).sum::<f64>() / weight;
        let err = (mean - (1.0 - target)).abs();
        ensure!(err <= 1e-6, "case {case}: budget mean density {mean} vs {}", 1.0 - target);
        worst_budget = worst_budget.max(err);
        let verbatim =
            allocate_per_layer(target, &layers, Allocation::AdaptiveVerbatim, 0.05).map_err(|e| e.to_string())?;
        let err = (verbatim.iter().sum::<f64>() - (1.0 - target)).abs();
        ensure!(err <= 1e-9, "case {case}: verbatim densities sum off by {err:e}");
        worst_verbatim = worst_verbatim.max(err);
        for i in 0..l {
            ensure!((0.0..=1.0 + 1e-12).contains(&budget[i]), "case {case}: density {} out of range", budget[i]);
            for j in 0..l {
                if layers[i].magnitude > layers[j].magnitude {
                    ensure!(budget[i] >= budget[j] - 1e-12, "case {case}: budget not monotone");
                    ensure!(verbatim[i] >= verbatim[j], "case {case}: verbatim not monotone");
                }
            }
        }
    }
    Ok(format!("500 cases; worst budget error {worst_budget:.1e}, verbatim {worst_verbatim:.1e}"))
}

// 9 -------------------------------------------------------------------------

fn final_accuracy(cfg: &RunConfig) -> std::result::Result<(f64, f64), String> {
    let t = Instant::now();
    let out = run_experiment(cfg).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    Ok((out.records.last().ok_or("no records")?.eval_accuracy, secs))
}

fn desk_scale() -> Check {
    let seeds = [0u64, 1, 2];
    let mut slowest = 0.0f64;
    let mut mean_acc = |f: &dyn Fn(u64) -> RunConfig| -> std::result::Result<(f64, Vec<f64>), String> {
        let mut accs = Vec::new();
        for &seed in &seeds {
            let (acc, secs) = final_accuracy(&f(seed))?;
            slowest = slowest.max(secs);
            accs.push(acc);
        }
        Ok((accs.iter().sum::<f64>() / accs.len() as f64, accs))
    };
    let reference = |s: f64| move |seed: u64| RunConfig { seed, target_sparsity: s, ..RunConfig::default() };

    let (dense, dense_each) = mean_acc(&reference(0.0))?;
    let (s1, _) = mean_acc(&reference(0.1))?;
    let (s3, _) = mean_acc(&reference(0.3))?;
    let (s5, _) = mean_acc(&reference(0.5))?;
    let (unified, _) = mean_acc(&|seed| RunConfig { allocation: Allocation::Unified, ..reference(0.5)(seed) })?;
    let (refine_on, _) = mean_acc(&reference(0.4))?;
    let (refine_off, _) = mean_acc(&|seed| RunConfig { mask_refinement: false, ..reference(0.4)(seed) })?;

    let summary = format!(
        "dense {dense:.4} | S=0.1 {s1:.4} S=0.3 {s3:.4} S=0.5 {s5:.4} | unified {unified:.4} | \
         refine on {refine_on:.4} off {refine_off:.4} | slowest run {slowest:.2}s"
    );
    ensure!(dense_each.iter().all(|&a| a >= 0.90), "(a) dense below 90%: {dense_each:?}; {summary}");
    ensure!(dense - s5 <= 0.05, "(b) S=0.5 trails dense by more than 5 points; {summary}");
    ensure!(s3 <= s1 + 0.01 && s5 <= s3 + 0.01, "(c) accuracy rises with sparsity; {summary}");
    ensure!(s5 >= unified - 0.01, "(d) adaptive trails unified; {summary}");
    ensure!(refine_on >= refine_off - 0.01, "(e) refinement hurts; {summary}");
    ensure!(slowest < 60.0, "run took {slowest:.1}s; {summary}");
    Ok(summary)
}

// 10 ------------------------------------------------------------------------

/// Wire size from first principles: fixed header, one descriptor per
/// variable, four bytes per kept index and per transmitted value.
fn counted_wire_size(store: &VarStore, masks: &MaskSet) -> usize {
    let mut n = 4 + 2 + 4;
    for spec in store.specs() {
        n += 2 + spec.name.len() + 1;
        if spec.is_prunable() {
            let m = masks.get(&spec.name).expect("mask");
            let kept = m.keep.iter().filter(|k| **k).count();
            n += 1 + 4 + 4 + 4 + 4 * kept + 4 * m.kept_params();
        } else {
            n += 1 + 4 * spec.shape.len() + 4 * spec.param_count;
        }
    }
    n
}

fn communication() -> Check {
    let dense_cfg = RunConfig { target_sparsity: 0.0, ..RunConfig::default() };
    let cfg = RunConfig { target_sparsity: 0.5, ..RunConfig::default() };
    let mut dense = build_simulation(&dense_cfg).map_err(|e| e.to_string())?;
    let dense_rec = dense.run_round().map_err(|e| e.to_string())?;
    ensure!(
        dense_rec.bytes_down as usize == counted_wire_size(&dense.state.store, &dense.state.masks),
        "dense payload {} differs from the counted size",
        dense_rec.bytes_down
    );

    let mut sim = build_simulation(&cfg).map_err(|e| e.to_string())?;
    let mut ratio = 0.0;
    let mut finetune_bytes = None;
    while !sim.is_done() {
        let rec = sim.run_round().map_err(|e| e.to_string())?;
        let packed = shrink(&sim.state.store, &sim.state.masks).map_err(|e| e.to_string())?;
        let encoded = packed.encode().len();
        ensure!(
            rec.bytes_down as usize == encoded,
            "round {}: bytes_down {} vs encoded {encoded}",
            rec.round,
            rec.bytes_down
        );
        ensure!(rec.bytes_up == rec.bytes_down, "round {}: up {} != down {}", rec.round, rec.bytes_up, rec.bytes_down);
        let counted = counted_wire_size(&sim.state.store, &sim.state.masks);
        ensure!(encoded == counted, "round {}: encoded {encoded} vs counted {counted}", rec.round);
        if rec.round == 1 {
            ratio = rec.bytes_down as f64 / dense_rec.bytes_down as f64;
            ensure!(ratio < 0.62, "S=0.5 payload is {ratio:.4} of dense");
        }
        if rec.round > cfg.r_finetune {
            match finetune_bytes {
                None => finetune_bytes = Some(rec.bytes_down),
                Some(b) => ensure!(b == rec.bytes_down, "fine-tuning payload changed at round {}", rec.round),
            }
        }
    }
    Ok(format!(
        "S=0.5 {} B vs dense {} B (ratio {ratio:.4}); fine-tuning {} B",
        (ratio * dense_rec.bytes_down as f64).round(),
        dense_rec.bytes_down,
        finetune_bytes.unwrap_or(0)
    ))
}

// 11 ------------------------------------------------------------------------

fn determinism() -> Check {
    let csv = |threads: usize| -> std::result::Result<String, String> {
        let cfg = RunConfig { threads, ..RunConfig::default() };
        let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
        metrics_csv_string(&out.records).map_err(|e| e.to_string())
    };
    let a = csv(1)?;
    let b = csv(1)?;
    ensure!(a == b, "two sequential runs differ");
    let p = csv(2)?;
    ensure!(a == p, "sequential and parallel runs differ");
    let p0 = csv(0)?;
    ensure!(a == p0, "sequential and default-pool runs differ");
    Ok(format!("{} CSV bytes identical across 4 runs", a.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("mask exactness", mask_exactness),
        ("shrink/expand roundtrip", roundtrip),
        ("zero-update invariant", zero_update_invariant),
        ("regrowth", regrowth),
        ("federated averaging oracle", fedavg_oracle),
        ("gradient oracle", gradient_oracle),
        ("zero-parameter ratio oracle", zero_ratio_oracle),
        ("adaptive allocation", adaptive_allocation),
        ("desk-scale end-to-end", desk_scale),
        ("communication accounting", communication),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("[{:>2}] PASS {name} ({secs:.2}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("[{:>2}] FAIL {name} ({secs:.2}s): {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
