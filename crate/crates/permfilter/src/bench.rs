//! Continual-learning protocol at desk scale: task construction
//! (SplitMNIST, synthetic clusters), permuted sequential training, and the
//! summary metrics (average accuracy, normalized variance, forgetting).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{averaging_predict, ResamplingConfig, ResamplingFilter};
use crate::error::{Error, Result};
use crate::filter::{init_ensemble, Ensemble, EnsembleConfig};
use crate::losses::{Matrix, MlpLoss, MlpSpec};

/// Labeled feature matrix. Labels are 0-based class indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.cols
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Matrix::zeros(indices.len(), self.inputs.cols);
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            inputs.row_mut(row).copy_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { inputs, labels }
    }
}

/// One task: named train/test data over a shared head.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub train: Dataset,
    pub test: Dataset,
    pub n_classes: usize,
}

/// Whether the five binary splits share one 2-way output head or keep their
/// original digit labels under a 10-way head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadConfig {
    Domain,
    ClassIncremental,
}

/// The canonical SplitMNIST digit pairs.
pub const SPLITMNIST_PAIRS: [(usize, usize); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];

/// Builds the five binary SplitMNIST tasks from full MNIST train/test data.
/// Under [`HeadConfig::Domain`] each task's labels are remapped to `{0, 1}`.
pub fn build_splitmnist(
    train: &Dataset,
    test: &Dataset,
    head: HeadConfig,
) -> Result<Vec<TaskSpec>> {
    let mut tasks = Vec::with_capacity(5);
    for &(lo, hi) in &SPLITMNIST_PAIRS {
        let filter = |ds: &Dataset| -> Result<Dataset> {
            let indices: Vec<usize> = (0..ds.len())
                .filter(|&i| ds.labels[i] == lo || ds.labels[i] == hi)
                .collect();
            if indices.is_empty() {
                return Err(Error::InvalidInput(format!("no samples for digits {lo} and {hi}")));
            }
            let mut sub = ds.subset(&indices);
            if head == HeadConfig::Domain {
                for l in &mut sub.labels {
                    *l = usize::from(*l == hi);
                }
            }
            Ok(sub)
        };
        tasks.push(TaskSpec {
            name: format!("{lo}v{hi}"),
            train: filter(train)?,
            test: filter(test)?,
            n_classes: match head {
                HeadConfig::Domain => 2,
                HeadConfig::ClassIncremental => 10,
            },
        });
    }
    Ok(tasks)
}

/// Synthetic binary tasks: two isotropic unit-variance Gaussian clusters at
/// distance `separation`, 500 train / 200 test points each, deterministic
/// per seed.
pub fn build_synthetic(
    k_tasks: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Vec<TaskSpec>> {
    if !(separation > 0.0) {
        return Err(Error::InvalidInput("separation must be > 0".into()));
    }
    if k_tasks == 0 || dim == 0 {
        return Err(Error::InvalidInput("need at least one task and one dimension".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let unit_normal = Normal::new(0.0, 1.0).unwrap();
    let mut tasks = Vec::with_capacity(k_tasks);
    for t in 0..k_tasks {
        // random unit direction for this task's cluster axis
        let mut dir: Vec<f64> = (0..dim).map(|_| unit_normal.sample(&mut rng)).collect();
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut dir {
            *v /= norm.max(1e-12);
        }
        let half = separation / 2.0;
        let mut draw = |n_per_class: usize| {
            let mut rows = Vec::with_capacity(2 * n_per_class);
            let mut labels = Vec::with_capacity(2 * n_per_class);
            for class in 0..2 {
                let sign = if class == 0 { -1.0 } else { 1.0 };
                for _ in 0..n_per_class {
                    let row: Vec<f64> = dir
                        .iter()
                        .map(|&d| sign * half * d + unit_normal.sample(&mut rng))
                        .collect();
                    rows.push(row);
                    labels.push(class);
                }
            }
            Dataset { inputs: Matrix::from_rows(&rows), labels }
        };
        let train = draw(250);
        let test = draw(100);
        tasks.push(TaskSpec { name: format!("task{t}"), train, test, n_classes: 2 });
    }
    Ok(tasks)
}

/// Learning method under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Wpf,
    Gd,
    Averaging,
    Resampling,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Wpf => "wpf",
            Method::Gd => "gd",
            Method::Averaging => "averaging",
            Method::Resampling => "resampling",
        }
    }
}

/// Ordered pass over the canonical task list, plus minibatch parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSequence {
    /// Indices into the canonical task list; must be a bijection.
    pub order: Vec<usize>,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl TaskSequence {
    pub fn validate(&self, n_tasks: usize) -> Result<()> {
        let mut seen = vec![false; n_tasks];
        if self.order.len() != n_tasks {
            return Err(Error::InvalidInput("permutation length mismatch".into()));
        }
        for &i in &self.order {
            if i >= n_tasks || seen[i] {
                return Err(Error::InvalidInput("permutation is not a bijection".into()));
            }
            seen[i] = true;
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-run training configuration shared by all methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_particles: usize,
    pub sigma_sq: f64,
    pub init_noise_std: f64,
    pub hidden_units: usize,
    pub resample_perturb_std: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_particles: 20,
            sigma_sq: 1e-2,
            init_noise_std: 0.1,
            hidden_units: 64,
            resample_perturb_std: 1e-2,
            seed: 0,
        }
    }
}

/// Output of one sequential training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub ensemble: Ensemble,
    /// Final per-task test accuracy, indexed by canonical task identity.
    pub per_task_accuracy: Vec<f64>,
    /// task x checkpoint accuracy matrix, one column recorded after each
    /// task in the training order finishes.
    pub history: Matrix,
}

enum Trainer {
    Gradient(Ensemble),
    Resampling(ResamplingFilter),
}

impl Trainer {
    fn ensemble(&self) -> &Ensemble {
        match self {
            Trainer::Gradient(e) => e,
            Trainer::Resampling(f) => &f.ensemble,
        }
    }
}

/// Per-particle test accuracy, evaluated in parallel, order preserved.
fn particle_accuracies(spec: &MlpSpec, ens: &Ensemble, ds: &Dataset) -> Vec<f64> {
    ens.particles()
        .par_iter()
        .map(|p| spec.accuracy(&p.position, &ds.inputs, &ds.labels))
        .collect()
}

/// The method's prediction rule applied to one test set.
fn method_accuracy(method: Method, spec: &MlpSpec, ens: &Ensemble, ds: &Dataset) -> Result<f64> {
    let accs = particle_accuracies(spec, ens, ds);
    match method {
        Method::Gd => Ok(accs[0]),
        Method::Averaging => averaging_predict(ens, &accs),
        Method::Wpf | Method::Resampling => {
            let mut normalized = ens.clone();
            normalized.normalize_weights()?;
            normalized.weighted_statistic(&accs)
        }
    }
}

/// Alternative prediction rule: a weighted vote over per-sample class
/// predictions instead of a weighted average of per-particle accuracies.
pub fn weighted_vote_accuracy(spec: &MlpSpec, ens: &Ensemble, ds: &Dataset) -> Result<f64> {
    let mut normalized = ens.clone();
    normalized.normalize_weights()?;
    let weights = normalized.weights()?;
    let n_classes = spec.n_classes();
    let votes: Vec<Vec<usize>> = normalized
        .particles()
        .par_iter()
        .map(|p| spec.predict(&p.position, &ds.inputs))
        .collect();
    let mut hits = 0usize;
    for row in 0..ds.len() {
        let mut tally = vec![0.0; n_classes];
        for (i, v) in votes.iter().enumerate() {
            tally[v[row]] += weights[i];
        }
        let mut best = 0;
        for (c, &t) in tally.iter().enumerate() {
            if t > tally[best] {
                best = c;
            }
        }
        if best == ds.labels[row] {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.len().max(1) as f64)
}

/// Trains sequentially over the permuted tasks, one filter step per
/// minibatch, recording per-task test accuracy after each task and at the
/// end. Fully determined by `(method, tasks, seq, cfg)`.
pub fn run_continual(
    method: Method,
    tasks: &[TaskSpec],
    seq: &TaskSequence,
    cfg: &RunConfig,
) -> Result<RunResult> {
    if tasks.is_empty() {
        return Err(Error::InvalidInput("need at least one task".into()));
    }
    seq.validate(tasks.len())?;
    let d_in = tasks[0].train.features();
    let n_classes = tasks[0].n_classes;
    for t in tasks {
        if t.train.features() != d_in || t.test.features() != d_in || t.n_classes != n_classes {
            return Err(Error::InvalidInput("tasks disagree on feature or class count".into()));
        }
    }
    if method == Method::Gd && cfg.n_particles != 1 {
        return Err(Error::InvalidConfig("gradient descent requires n_particles = 1".into()));
    }

    let spec = MlpSpec::new(vec![d_in, cfg.hidden_units, n_classes])?;
    let mut base_rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xb5ad_4ece_da1c_e2a9);
    let base = spec.init_params(&mut base_rng);
    let ens_cfg = EnsembleConfig {
        n_particles: cfg.n_particles,
        sigma_sq: cfg.sigma_sq,
        init_noise_std: cfg.init_noise_std,
        seed: cfg.seed,
    };
    let mut trainer = match method {
        Method::Resampling => {
            let rs_cfg = ResamplingConfig {
                n_particles: cfg.n_particles,
                perturb_std: cfg.resample_perturb_std,
                seed: cfg.seed,
            };
            Trainer::Resampling(ResamplingFilter::new(
                &rs_cfg,
                cfg.sigma_sq,
                &base,
                cfg.init_noise_std,
            )?)
        }
        _ => Trainer::Gradient(init_ensemble(&ens_cfg, &base)?),
    };

    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(seq.shuffle_seed);
    let mut history = Matrix::zeros(tasks.len(), seq.order.len());
    for (checkpoint, &task_idx) in seq.order.iter().enumerate() {
        let task = &tasks[task_idx];
        let n_train = task.train.len();
        for _ in 0..seq.epochs_per_task {
            let mut indices: Vec<usize> = (0..n_train).collect();
            indices.shuffle(&mut shuffle_rng);
            for chunk in indices.chunks(seq.batch_size) {
                let batch = task.train.subset(chunk);
                let loss = MlpLoss::new(spec.clone(), batch.inputs, batch.labels)?;
                match &mut trainer {
                    Trainer::Gradient(ens) => ens.wpf_step(&loss)?,
                    Trainer::Resampling(f) => f.step(&loss)?,
                }
            }
        }
        for (k, t) in tasks.iter().enumerate() {
            history.data[k * seq.order.len() + checkpoint] =
                method_accuracy(method, &spec, trainer.ensemble(), &t.test)?;
        }
    }

    let mut ensemble = match trainer {
        Trainer::Gradient(e) => e,
        Trainer::Resampling(f) => f.ensemble,
    };
    ensemble.normalize_weights()?;
    let per_task_accuracy: Vec<f64> = if seq.order.is_empty() {
        tasks.iter().map(|t| method_accuracy(method, &spec, &ensemble, &t.test)).collect::<Result<_>>()?
    } else {
        // the last checkpoint column is the final state
        (0..tasks.len()).map(|k| history.data[k * seq.order.len() + seq.order.len() - 1]).collect()
    };
    Ok(RunResult { ensemble, per_task_accuracy, history })
}

/// task x run matrix of final per-task scores in `[0, 1]`, keyed by
/// canonical task identity so entries are comparable across permutations.
#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub method: String,
    pub task_names: Vec<String>,
    /// rows: tasks, columns: permutation runs
    pub scores: Matrix,
}

impl MetricsTable {
    pub fn new(method: String, task_names: Vec<String>, scores: Matrix) -> Result<Self> {
        if scores.rows != task_names.len() {
            return Err(Error::InvalidInput("one row per task required".into()));
        }
        if scores.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("scores must lie in [0, 1]".into()));
        }
        Ok(MetricsTable { method, task_names, scores })
    }

    pub fn n_runs(&self) -> usize {
        self.scores.cols
    }

    /// Mean over all (task, run) entries.
    pub fn average_accuracy(&self) -> Result<f64> {
        if self.scores.data.is_empty() {
            return Err(Error::InvalidInput("empty metrics table".into()));
        }
        Ok(self.scores.data.iter().sum::<f64>() / self.scores.data.len() as f64)
    }

    /// Per task, the unbiased sample variance of its score across the
    /// permutation runs; returned as the mean over tasks.
    pub fn normalized_variance(&self) -> Result<f64> {
        if self.scores.cols < 2 {
            return Err(Error::InvalidInput("variance needs at least two runs".into()));
        }
        let mut total = 0.0;
        for task in 0..self.scores.rows {
            let row = self.scores.row(task);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var =
                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (row.len() - 1) as f64;
            total += var;
        }
        Ok(total / self.scores.rows as f64)
    }
}

/// Per task: best accuracy ever recorded minus final accuracy.
pub fn forgetting(per_task_history: &Matrix) -> Vec<f64> {
    (0..per_task_history.rows)
        .map(|task| {
            let row = per_task_history.row(task);
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            best - row[row.len() - 1]
        })
        .collect()
}

/// Outcome of a full multi-permutation benchmark for one method.
#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub metrics: MetricsTable,
    pub permutations: Vec<Vec<usize>>,
    pub run_seeds: Vec<u64>,
    /// One task x checkpoint history per run.
    pub histories: Vec<Matrix>,
    /// Ensemble state at the end of the last permutation run.
    pub final_ensemble: Ensemble,
}

impl BenchOutcome {
    /// Mean over runs and tasks of the forgetting diagnostic.
    pub fn mean_forgetting(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for h in &self.histories {
            for f in forgetting(h) {
                total += f;
                count += 1;
            }
        }
        total / count.max(1) as f64
    }
}

/// Runs `n_permutations` sequential-training runs of one method with seeded
/// task orders and collects the metrics table. Particle initialization is
/// held fixed across runs so the run-to-run variance isolates permutation
/// sensitivity.
pub fn run_permutations(
    method: Method,
    tasks: &[TaskSpec],
    epochs_per_task: usize,
    batch_size: usize,
    n_permutations: usize,
    cfg: &RunConfig,
) -> Result<BenchOutcome> {
    if n_permutations == 0 {
        return Err(Error::InvalidConfig("need at least one permutation run".into()));
    }
    let k = tasks.len();
    let mut scores = Matrix::zeros(k, n_permutations);
    let mut permutations = Vec::with_capacity(n_permutations);
    let mut run_seeds = Vec::with_capacity(n_permutations);
    let mut histories = Vec::with_capacity(n_permutations);
    let mut final_ensemble = None;
    for r in 0..n_permutations {
        let shuffle_seed = cfg.seed.wrapping_add(0x5851_f42d_4c95_7f2d_u64.wrapping_mul(r as u64 + 1));
        let mut order: Vec<usize> = (0..k).collect();
        let mut perm_rng = ChaCha12Rng::seed_from_u64(shuffle_seed);
        order.shuffle(&mut perm_rng);
        let seq = TaskSequence { order: order.clone(), epochs_per_task, batch_size, shuffle_seed };
        let result = run_continual(method, tasks, &seq, cfg)?;
        for task in 0..k {
            scores.data[task * n_permutations + r] = result.per_task_accuracy[task];
        }
        permutations.push(order);
        run_seeds.push(shuffle_seed);
        histories.push(result.history);
        final_ensemble = Some(result.ensemble);
    }
    let metrics = MetricsTable::new(
        method.as_str().to_string(),
        tasks.iter().map(|t| t.name.clone()).collect(),
        scores,
    )?;
    Ok(BenchOutcome {
        metrics,
        permutations,
        run_seeds,
        histories,
        final_ensemble: final_ensemble.unwrap(),
    })
}

/// Seeded shuffled permutation of `0..k`; exposed for the CLI suites.
pub fn seeded_permutation(k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..k).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}
