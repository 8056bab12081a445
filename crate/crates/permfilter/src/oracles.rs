//! Independent ground truth: the exact log-posterior, a pairwise
//! weight-ratio check against it for linear losses, a low-dimensional grid
//! Bayes filter, and a kernel discrepancy between weighted ensembles.

use crate::error::{Error, Result};
use crate::filter::{init_ensemble, Ensemble, EnsembleConfig};
use crate::losses::{LinearLoss, LossTask};

/// Prior over parameter vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prior {
    /// Improper uniform prior; contributes 0 to the log-density.
    Uniform,
    /// Isotropic Gaussian centered at the origin.
    IsotropicGaussian { std: f64 },
}

impl Prior {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        match self {
            Prior::Uniform => 0.0,
            Prior::IsotropicGaussian { std } => {
                let sq: f64 = x.iter().map(|v| v * v).sum();
                -0.5 * sq / (std * std)
            }
        }
    }
}

/// The unnormalized Bayes posterior after a list of loss observations:
/// `log p0(x) - sum_t L_t(x)`. The normalizer is never computed; every
/// consumer works with ratios, where it cancels.
pub struct LogPosterior<'a> {
    pub prior: Prior,
    pub losses: Vec<&'a dyn LossTask>,
}

impl<'a> LogPosterior<'a> {
    pub fn new(prior: Prior, losses: Vec<&'a dyn LossTask>) -> Self {
        LogPosterior { prior, losses }
    }

    pub fn unnormalized_log_posterior(&self, x: &[f64]) -> f64 {
        self.prior.log_density(x) - self.losses.iter().map(|l| l.evaluate(x)).sum::<f64>()
    }
}

/// Runs the filter over linear losses from a uniform prior and compares, for
/// every particle pair, the log-weight gap against the log-posterior gap at
/// the final positions. Returns the maximum absolute difference; the filter
/// is exact here, so anything beyond float accumulation is a bug.
pub fn theorem3_check(config: &EnsembleConfig, losses: &[LinearLoss]) -> Result<f64> {
    if config.n_particles < 2 {
        return Ok(0.0);
    }
    let dim = losses
        .first()
        .map(|l| l.g.len())
        .ok_or_else(|| Error::InvalidInput("need at least one loss".into()))?;
    let mut ens = init_ensemble(config, &vec![0.0; dim])?;
    for loss in losses {
        ens.wpf_step(loss)?;
    }
    let dyn_losses: Vec<&dyn LossTask> = losses.iter().map(|l| l as &dyn LossTask).collect();
    let posterior = LogPosterior::new(Prior::Uniform, dyn_losses);
    let log_post: Vec<f64> = ens
        .particles()
        .iter()
        .map(|p| posterior.unnormalized_log_posterior(&p.position))
        .collect();
    let log_w: Vec<f64> = ens.log_weights();
    let mut max_err = 0.0_f64;
    for i in 0..ens.len() {
        for j in (i + 1)..ens.len() {
            let weight_gap = log_w[i] - log_w[j];
            let posterior_gap = log_post[i] - log_post[j];
            max_err = max_err.max((weight_gap - posterior_gap).abs());
        }
    }
    Ok(max_err)
}

/// Discretized exact Bayes filter on a 1- or 2-dimensional grid of cell
/// centers, tracking log-mass per cell.
#[derive(Debug, Clone)]
pub struct GridDistribution {
    pub axes: Vec<Vec<f64>>,
    pub log_mass: Vec<f64>,
}

impl GridDistribution {
    /// Uniform distribution over an axis-aligned grid. `bounds` are
    /// inclusive `(lo, hi)` per axis; `cells` is the cell count per axis.
    pub fn uniform(bounds: &[(f64, f64)], cells: &[usize]) -> Result<Self> {
        if bounds.is_empty() || bounds.len() > 2 || bounds.len() != cells.len() {
            return Err(Error::InvalidInput("grid supports 1 or 2 dimensions".into()));
        }
        let mut axes = Vec::new();
        for (&(lo, hi), &n) in bounds.iter().zip(cells) {
            if n == 0 || !(hi > lo) {
                return Err(Error::InvalidInput("bad grid axis".into()));
            }
            let width = (hi - lo) / n as f64;
            axes.push((0..n).map(|i| lo + (i as f64 + 0.5) * width).collect());
        }
        let total: usize = cells.iter().product();
        let log_mass = vec![-(total as f64).ln(); total];
        Ok(GridDistribution { axes, log_mass })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn cell_width(&self, axis: usize) -> f64 {
        let a = &self.axes[axis];
        if a.len() > 1 {
            a[1] - a[0]
        } else {
            0.0
        }
    }

    fn cell_center(&self, flat: usize) -> Vec<f64> {
        match self.axes.len() {
            1 => vec![self.axes[0][flat]],
            2 => {
                let n1 = self.axes[1].len();
                vec![self.axes[0][flat / n1], self.axes[1][flat % n1]]
            }
            _ => unreachable!(),
        }
    }

    fn renormalize(&mut self) -> Result<()> {
        let max = self.log_mass.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateEnsemble("grid mass vanished".into()));
        }
        let lse = max + self.log_mass.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        for l in &mut self.log_mass {
            *l -= lse;
        }
        Ok(())
    }

    /// One exact Bayes update: per-cell `log_mass += -L(center)`, then
    /// renormalize.
    pub fn bayes_update(&mut self, loss: &dyn LossTask) -> Result<()> {
        if loss.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: loss.dim() });
        }
        for flat in 0..self.log_mass.len() {
            let center = self.cell_center(flat);
            self.log_mass[flat] -= loss.evaluate(&center);
        }
        self.renormalize()
    }

    /// Posterior mean along one axis.
    pub fn mean(&self, axis: usize) -> f64 {
        self.log_mass
            .iter()
            .enumerate()
            .map(|(flat, &l)| l.exp() * self.cell_center(flat)[axis])
            .sum()
    }

    /// Posterior standard deviation along one axis.
    pub fn std(&self, axis: usize) -> f64 {
        let mean = self.mean(axis);
        self.log_mass
            .iter()
            .enumerate()
            .map(|(flat, &l)| {
                let d = self.cell_center(flat)[axis] - mean;
                l.exp() * d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn mass_sum(&self) -> f64 {
        self.log_mass.iter().map(|&l| l.exp()).sum()
    }

    pub fn argmax_center(&self) -> Vec<f64> {
        let mut best = 0;
        for (i, &l) in self.log_mass.iter().enumerate() {
            if l > self.log_mass[best] {
                best = i;
            }
        }
        self.cell_center(best)
    }
}

fn gaussian_kernel(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-sq / (2.0 * bandwidth * bandwidth)).exp()
}

/// `k(x, ya) - k(x, yb)`, computed through the squared-distance difference
/// and `exp_m1` so the result keeps relative accuracy (and is exactly zero)
/// when `ya` and `yb` nearly (or exactly) coincide.
fn gaussian_kernel_diff(x: &[f64], ya: &[f64], yb: &[f64], bandwidth: f64) -> f64 {
    let kaa = gaussian_kernel(x, ya, bandwidth);
    // ||x - yb||^2 - ||x - ya||^2, in a form free of large cancellation
    let delta: f64 = x
        .iter()
        .zip(ya.iter().zip(yb))
        .map(|(&u, (&va, &vb))| (va - vb) * ((u - va) + (u - vb)))
        .sum();
    -kaa * (-delta / (2.0 * bandwidth * bandwidth)).exp_m1()
}

/// Total order on ensembles used only to canonicalize the MMD argument
/// order, so `mmd(a, b)` and `mmd(b, a)` take the identical code path and
/// the symmetry holds bit-exactly despite float summation order.
fn ensemble_key_le(a: &Ensemble, b: &Ensemble) -> bool {
    use std::cmp::Ordering;
    match a.len().cmp(&b.len()) {
        Ordering::Less => return true,
        Ordering::Greater => return false,
        Ordering::Equal => {}
    }
    for (pa, pb) in a.particles().iter().zip(b.particles()) {
        for (x, y) in pa.position.iter().zip(&pb.position) {
            match x.to_bits().cmp(&y.to_bits()) {
                Ordering::Less => return true,
                Ordering::Greater => return false,
                Ordering::Equal => {}
            }
        }
        match pa.log_weight.to_bits().cmp(&pb.log_weight.to_bits()) {
            Ordering::Less => return true,
            Ordering::Greater => return false,
            Ordering::Equal => {}
        }
    }
    true
}

/// Maximum mean discrepancy with a Gaussian kernel between two weighted
/// ensembles; symmetric, zero on identical ensembles, and a metric, so it
/// is an admissible discrepancy between particle distributions.
pub fn mmd_discrepancy(a: &Ensemble, b: &Ensemble, bandwidth: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidInput("bandwidth must be > 0".into()));
    }
    let (a, b) = if ensemble_key_le(a, b) { (a, b) } else { (b, a) };
    let wa = a.weights()?;
    let wb = b.weights()?;
    if a.len() == b.len() {
        // paired form: accumulate kernel *differences* so that nearly
        // identical ensembles cancel at full precision instead of leaving
        // the ~sqrt(eps) residual of subtracting three large sums
        let mut acc = 0.0;
        for i in 0..a.len() {
            let a_i = &a.particles()[i].position;
            let b_i = &b.particles()[i].position;
            for j in 0..a.len() {
                let a_j = &a.particles()[j].position;
                let b_j = &b.particles()[j].position;
                let d_ab = gaussian_kernel_diff(a_i, a_j, b_j, bandwidth);
                let d_ba = gaussian_kernel_diff(b_i, b_j, a_j, bandwidth);
                let kab = gaussian_kernel(a_i, b_j, bandwidth);
                let kba = gaussian_kernel(b_i, a_j, bandwidth);
                acc += wa[i] * (wa[j] * d_ab + (wa[j] - wb[j]) * kab)
                    + wb[i] * (wb[j] * d_ba + (wb[j] - wa[j]) * kba);
            }
        }
        return Ok(acc.max(0.0).sqrt());
    }
    // three separate accumulators: for identical ensembles all three sums
    // are bit-equal, so the combination cancels to exactly zero
    let mut self_a = 0.0;
    for (i, pa) in a.particles().iter().enumerate() {
        for (j, pb) in a.particles().iter().enumerate() {
            self_a += wa[i] * wa[j] * gaussian_kernel(&pa.position, &pb.position, bandwidth);
        }
    }
    let mut self_b = 0.0;
    for (i, pa) in b.particles().iter().enumerate() {
        for (j, pb) in b.particles().iter().enumerate() {
            self_b += wb[i] * wb[j] * gaussian_kernel(&pa.position, &pb.position, bandwidth);
        }
    }
    let mut cross = 0.0;
    for (i, pa) in a.particles().iter().enumerate() {
        for (j, pb) in b.particles().iter().enumerate() {
            cross += wa[i] * wb[j] * gaussian_kernel(&pa.position, &pb.position, bandwidth);
        }
    }
    Ok((self_a + self_b - 2.0 * cross).max(0.0).sqrt())
}

/// Median pairwise distance over the union of both ensembles' positions.
/// Standard parameter-free bandwidth choice for [`mmd_discrepancy`].
pub fn median_heuristic_bandwidth(a: &Ensemble, b: &Ensemble) -> f64 {
    let union: Vec<&[f64]> = a
        .particles()
        .iter()
        .chain(b.particles())
        .map(|p| p.position.as_slice())
        .collect();
    let mut dists = Vec::new();
    for i in 0..union.len() {
        for j in (i + 1)..union.len() {
            let sq: f64 = union[i].iter().zip(union[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            dists.push(sq.sqrt());
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let median = dists.get(dists.len() / 2).copied().unwrap_or(0.0);
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

/// Worst-case disagreement between filter runs over permuted linear losses.
#[derive(Debug, Clone, Copy)]
pub struct LinearPermutationReport {
    pub max_position_diff: f64,
    pub max_log_weight_diff: f64,
    pub max_mmd: f64,
}

/// Runs the filter over `n_perms` random permutations of `n_losses` random
/// linear losses and measures how far the final ensembles drift apart. For
/// linear losses the outcome is order-independent up to float accumulation,
/// so all three numbers should sit at rounding scale.
pub fn linear_permutation_invariance(
    dim: usize,
    n_losses: usize,
    n_perms: usize,
    config: &EnsembleConfig,
    seed: u64,
) -> Result<LinearPermutationReport> {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let losses: Vec<LinearLoss> = (0..n_losses)
        .map(|_| {
            LinearLoss::new(
                (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();

    let run = |order: &[usize]| -> Result<Ensemble> {
        let mut ens = init_ensemble(config, &vec![0.0; dim])?;
        for &i in order {
            ens.wpf_step(&losses[i])?;
        }
        ens.normalize_weights()?;
        Ok(ens)
    };

    let identity: Vec<usize> = (0..n_losses).collect();
    let reference = run(&identity)?;
    let mut report = LinearPermutationReport {
        max_position_diff: 0.0,
        max_log_weight_diff: 0.0,
        max_mmd: 0.0,
    };
    let mut ensembles = vec![reference];
    for _ in 0..n_perms {
        let mut order = identity.clone();
        order.shuffle(&mut rng);
        ensembles.push(run(&order)?);
    }
    for i in 0..ensembles.len() {
        for j in (i + 1)..ensembles.len() {
            let (a, b) = (&ensembles[i], &ensembles[j]);
            for (pa, pb) in a.particles().iter().zip(b.particles()) {
                for (x, y) in pa.position.iter().zip(&pb.position) {
                    report.max_position_diff = report.max_position_diff.max((x - y).abs());
                }
                report.max_log_weight_diff =
                    report.max_log_weight_diff.max((pa.log_weight - pb.log_weight).abs());
            }
            let bw = median_heuristic_bandwidth(a, b);
            report.max_mmd = report.max_mmd.max(mmd_discrepancy(a, b, bw)?);
        }
    }
    Ok(report)
}

/// Mean ensemble discrepancies for the nonlinear order-robustness check.
#[derive(Debug, Clone, Copy)]
pub struct OrderRobustnessReport {
    /// Mean MMD between runs that saw the two tasks in swapped order from
    /// the same initialization.
    pub mean_swapped: f64,
    /// Mean MMD between same-order runs from independent initializations.
    pub mean_independent: f64,
}

/// Trains the filter on a two-task logistic sequence per seed, comparing
/// order-swapped runs against independently initialized runs. A filter that
/// is approximately permutation-invariant keeps the first mean below the
/// second.
pub fn logistic_order_robustness(n_seeds: u64, seed: u64) -> Result<OrderRobustnessReport> {
    use crate::bench::build_synthetic;
    use crate::losses::{LogisticLoss, Matrix};

    let dim = 5;
    let tasks = build_synthetic(2, dim, 3.0, seed)?;
    // one block of fixed-order logistic minibatch losses per task
    let batch = 50;
    let blocks: Vec<Vec<LogisticLoss>> = tasks
        .iter()
        .map(|t| {
            let n = t.train.len();
            (0..n / batch)
                .map(|b| {
                    let rows: Vec<Vec<f64>> =
                        (b * batch..(b + 1) * batch).map(|i| t.train.inputs.row(i).to_vec()).collect();
                    let labels: Vec<i8> = (b * batch..(b + 1) * batch)
                        .map(|i| if t.train.labels[i] == 1 { 1 } else { -1 })
                        .collect();
                    LogisticLoss::new(Matrix::from_rows(&rows), labels)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let run = |init_seed: u64, order: [usize; 2]| -> Result<Ensemble> {
        let config = EnsembleConfig {
            n_particles: 8,
            sigma_sq: 0.05,
            init_noise_std: 0.5,
            seed: init_seed,
        };
        let mut ens = init_ensemble(&config, &vec![0.0; dim + 1])?;
        for &task in &order {
            for loss in &blocks[task] {
                ens.wpf_step(loss)?;
            }
        }
        ens.normalize_weights()?;
        Ok(ens)
    };

    let mut sum_swapped = 0.0;
    let mut sum_independent = 0.0;
    for s in 0..n_seeds {
        let forward = run(seed + s, [0, 1])?;
        let swapped = run(seed + s, [1, 0])?;
        let reinit = run(seed + n_seeds + s, [0, 1])?;
        let bw = median_heuristic_bandwidth(&forward, &swapped)
            .max(median_heuristic_bandwidth(&forward, &reinit));
        sum_swapped += mmd_discrepancy(&forward, &swapped, bw)?;
        sum_independent += mmd_discrepancy(&forward, &reinit, bw)?;
    }
    Ok(OrderRobustnessReport {
        mean_swapped: sum_swapped / n_seeds as f64,
        mean_independent: sum_independent / n_seeds as f64,
    })
}
