//! Seeded synthetic datasets and client partitioning.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedPruneError, Result};
use crate::rng::component_rng;
use crate::var_store::{Role, VarStore};

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Row-major `n x outputs` regression targets.
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    /// Row-major `n x dim`.
    pub features: Vec<f64>,
    pub targets: Targets,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(l) => Some(l),
            Targets::Values(_) => None,
        }
    }

    /// Stores the dataset in the checkpoint container: `features` as an
    /// `n x dim` matrix and `labels` (or `targets`) as a second variable.
    pub fn to_store(&self) -> Result<VarStore> {
        let mut store = VarStore::new();
        store.register_with_values("features", &[self.len(), self.dim], Role::Excluded, &[], self.features.clone())?;
        match &self.targets {
            Targets::Classes(l) => {
                let values = l.iter().map(|&c| c as f64).collect();
                store.register_with_values("labels", &[l.len()], Role::Excluded, &[], values)?;
                store.register_with_values("n_classes", &[1], Role::Excluded, &[], vec![self.n_classes as f64])?;
            }
            Targets::Values(v) => {
                let outputs = v.len() / self.len().max(1);
                store.register_with_values("targets", &[self.len(), outputs], Role::Excluded, &[], v.clone())?;
            }
        }
        Ok(store)
    }

    pub fn from_store(store: &VarStore) -> Result<Self> {
        let f = store.get("features")?;
        let dim = *f.spec.shape.last().expect("registered shapes are nonempty");
        if let Ok(labels) = store.values("labels") {
            let n_classes = store.values("n_classes")?[0] as usize;
            let labels: Vec<usize> = labels.iter().map(|&x| x as usize).collect();
            Ok(Self { dim, features: f.values.clone(), targets: Targets::Classes(labels), n_classes })
        } else {
            let t = store.values("targets")?;
            Ok(Self { dim, features: f.values.clone(), targets: Targets::Values(t.to_vec()), n_classes: 0 })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Class means on a sphere of radius 3 plus isotropic Gaussian noise.
    GaussianClusters,
    /// Labels from the argmax of a frozen random `d -> 32 -> c` tanh network.
    TeacherMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_examples: usize,
    pub n_eval: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    pub generator: Generator,
    /// Standard deviation of the cluster noise.
    pub noise: f64,
    pub partition: PartitionKind,
    pub alpha: f64,
    pub n_clients: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_examples: 4000,
            n_eval: 1000,
            n_classes: 4,
            input_dim: 32,
            generator: Generator::GaussianClusters,
            noise: 1.0,
            partition: PartitionKind::Dirichlet,
            alpha: 1.0,
            n_clients: 16,
        }
    }
}

const TEACHER_HIDDEN: usize = 32;
const CLUSTER_RADIUS: f64 = 3.0;

/// The frozen labelling rule shared by the training and evaluation draws.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    spec: SynthSpec,
    means: Vec<f64>,
    teacher: Vec<f64>,
}

impl SyntheticTask {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        if spec.n_classes == 0 || spec.input_dim == 0 {
            return Err(FedPruneError::Config("n_classes and input_dim must be positive".into()));
        }
        if spec.n_classes > spec.n_examples {
            return Err(FedPruneError::Config(format!(
                "n_classes ({}) exceeds n_examples ({})",
                spec.n_classes, spec.n_examples
            )));
        }
        if !(spec.noise >= 0.0) {
            return Err(FedPruneError::Config("noise must be >= 0".into()));
        }
        let mut rng = component_rng(spec.seed, "task", &[]);
        let (d, c) = (spec.input_dim, spec.n_classes);
        let mut means = Vec::new();
        let mut teacher = Vec::new();
        match spec.generator {
            Generator::GaussianClusters => {
                for _ in 0..c {
                    let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    means.extend(g.iter().map(|x| CLUSTER_RADIUS * x / norm));
                }
            }
            Generator::TeacherMlp => {
                let s1 = (1.0 / d as f64).sqrt();
                let s2 = (1.0 / TEACHER_HIDDEN as f64).sqrt();
                teacher.extend((0..d * TEACHER_HIDDEN).map(|_| s1 * rng.sample::<f64, _>(StandardNormal)));
                teacher.extend((0..TEACHER_HIDDEN * c).map(|_| s2 * rng.sample::<f64, _>(StandardNormal)));
            }
        }
        Ok(Self { spec: spec.clone(), means, teacher })
    }

    fn teacher_label(&self, x: &[f64]) -> usize {
        let (d, c, h) = (self.spec.input_dim, self.spec.n_classes, TEACHER_HIDDEN);
        let (w1, w2) = self.teacher.split_at(d * h);
        let hidden: Vec<f64> = (0..h).map(|j| (0..d).map(|i| x[i] * w1[i * h + j]).sum::<f64>().tanh()).collect();
        (0..c)
            .map(|k| (k, (0..h).map(|j| hidden[j] * w2[j * c + k]).sum::<f64>()))
            .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best })
            .0
    }

    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let (d, c) = (self.spec.input_dim, self.spec.n_classes);
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            match self.spec.generator {
                Generator::GaussianClusters => {
                    let label = i % c;
                    let mean = &self.means[label * d..(label + 1) * d];
                    features.extend(mean.iter().map(|m| m + self.spec.noise * rng.sample::<f64, _>(StandardNormal)));
                    labels.push(label);
                }
                Generator::TeacherMlp => {
                    let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    labels.push(self.teacher_label(&x));
                    features.extend(x);
                }
            }
        }
        Dataset { dim: d, features, targets: Targets::Classes(labels), n_classes: c }
    }
}

/// Training set of `spec.n_examples`, deterministic in `spec.seed`.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    let task = SyntheticTask::new(spec)?;
    Ok(task.sample(spec.n_examples, &mut component_rng(spec.seed, "train-data", &[])))
}

/// Training set plus a held-out set drawn from the same task.
pub fn gen_train_eval(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    let task = SyntheticTask::new(spec)?;
    let train = task.sample(spec.n_examples, &mut component_rng(spec.seed, "train-data", &[]));
    let eval = task.sample(spec.n_eval, &mut component_rng(spec.seed, "eval-data", &[]));
    Ok((train, eval))
}

/// Class proportions drawn from a symmetric Dirichlet.
pub fn dirichlet_proportions<R: Rng>(rng: &mut R, alpha: f64, n_classes: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(FedPruneError::Config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    if n_classes == 1 {
        return Ok(vec![1.0]);
    }
    let dist = Dirichlet::new(&vec![alpha; n_classes]).map_err(|e| FedPruneError::Config(format!("dirichlet: {e}")))?;
    // Tiny alphas can underflow every gamma draw; redraw until the sample is usable.
    for _ in 0..64 {
        let p = dist.sample(rng);
        if p.iter().all(|x| x.is_finite()) && p.iter().sum::<f64>() > 0.0 {
            return Ok(p);
        }
    }
    let mut p = vec![0.0; n_classes];
    p[rng.gen_range(0..n_classes)] = 1.0;
    Ok(p)
}

/// Splits example indices into `n_clients` disjoint, nonempty shards.
///
/// IID shuffles and deals round-robin. Dirichlet gives every client its own
/// class proportions and deals examples round-robin, each client drawing a
/// class from its proportions among the classes that still have examples.
pub fn partition_clients(
    dataset: &Dataset,
    n_clients: usize,
    kind: PartitionKind,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let n = dataset.len();
    if n_clients == 0 || n_clients > n {
        return Err(FedPruneError::Config(format!("cannot split {n} examples across {n_clients} clients")));
    }
    let mut rng = component_rng(seed, "partition", &[]);
    let mut shards = vec![Vec::new(); n_clients];
    match kind {
        PartitionKind::Iid => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for (i, ex) in order.into_iter().enumerate() {
                shards[i % n_clients].push(ex);
            }
        }
        PartitionKind::Dirichlet => {
            let labels = dataset
                .labels()
                .ok_or_else(|| FedPruneError::Config("dirichlet partition needs class labels".into()))?;
            let c = dataset.n_classes.max(1);
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
            for (i, &l) in labels.iter().enumerate() {
                pools[l].push(i);
            }
            for p in &mut pools {
                p.shuffle(&mut rng);
            }
            let props =
                (0..n_clients).map(|_| dirichlet_proportions(&mut rng, alpha, c)).collect::<Result<Vec<_>>>()?;
            let mut remaining = n;
            while remaining > 0 {
                for (k, shard) in shards.iter_mut().enumerate() {
                    if remaining == 0 {
                        break;
                    }
                    let class = draw_available_class(&mut rng, &props[k], &pools);
                    shard.push(pools[class].pop().expect("drawn class has examples"));
                    remaining -= 1;
                }
            }
        }
    }
    repair_empty(&mut shards);
    Ok(shards)
}

fn draw_available_class<R: Rng>(rng: &mut R, props: &[f64], pools: &[Vec<usize>]) -> usize {
    let weights: Vec<f64> = props.iter().zip(pools).map(|(&p, pool)| if pool.is_empty() { 0.0 } else { p }).collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        weights
    } else {
        // All of this client's preferred classes are exhausted.
        pools.iter().map(|p| p.len() as f64).collect()
    };
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

/// Moves one example from the largest shard into each empty shard.
fn repair_empty(shards: &mut [Vec<usize>]) {
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..shards.len()).max_by_key(|&i| (shards[i].len(), usize::MAX - i)).expect("nonempty");
        let ex = shards[largest].pop().expect("largest shard has examples");
        shards[empty].push(ex);
    }
}
