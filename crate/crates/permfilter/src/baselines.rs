//! Comparison methods: single-particle gradient descent, unweighted
//! averaging particles, and the resampling baseline particle filter.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{init_ensemble, Ensemble, EnsembleConfig};
use crate::losses::LossTask;

/// Parameters of the resampling baseline. The perturbation scale is not
/// pinned by any published value; it defaults to the same 1e-2 as the
/// filter's initialization noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplingConfig {
    pub n_particles: usize,
    pub perturb_std: f64,
    pub seed: u64,
}

impl Default for ResamplingConfig {
    fn default() -> Self {
        ResamplingConfig { n_particles: 100, perturb_std: 1e-2, seed: 0 }
    }
}

/// Plain gradient descent: the weighted filter run with exactly one
/// particle. Positions are bit-identical to the N=1 filter trajectory.
pub fn gd_run(config: &EnsembleConfig, losses: &[&dyn LossTask]) -> Result<Ensemble> {
    if config.n_particles != 1 {
        return Err(Error::InvalidConfig(format!(
            "gradient descent is the single-particle filter; got n_particles = {}",
            config.n_particles
        )));
    }
    let base = vec![0.0; losses.first().map_or(0, |l| l.dim())];
    gd_run_from(config, &base, losses)
}

/// Gradient descent from an explicit starting point.
pub fn gd_run_from(
    config: &EnsembleConfig,
    base_position: &[f64],
    losses: &[&dyn LossTask],
) -> Result<Ensemble> {
    if config.n_particles != 1 {
        return Err(Error::InvalidConfig(format!(
            "gradient descent is the single-particle filter; got n_particles = {}",
            config.n_particles
        )));
    }
    let mut ens = init_ensemble(config, base_position)?;
    for loss in losses {
        ens.wpf_step(*loss)?;
    }
    ens.normalize_weights()?;
    Ok(ens)
}

/// Unweighted mean of per-particle values, ignoring ensemble weights.
pub fn averaging_predict(ensemble: &Ensemble, per_particle_values: &[f64]) -> Result<f64> {
    if per_particle_values.is_empty() || per_particle_values.len() != ensemble.len() {
        return Err(Error::DimensionMismatch {
            expected: ensemble.len(),
            got: per_particle_values.len(),
        });
    }
    if per_particle_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("per-particle values must be finite".into()));
    }
    Ok(per_particle_values.iter().sum::<f64>() / per_particle_values.len() as f64)
}

/// Draw `n` indices with replacement with probabilities proportional to
/// `exp(log_probs)` (log-sum-exp normalized, cumulative inversion).
pub fn multinomial_draw<R: Rng>(log_probs: &[f64], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let max = log_probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateEnsemble("all resampling probabilities are zero".into()));
    }
    let probs: Vec<f64> = log_probs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    let mut cumulative = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in &probs {
        acc += p / total;
        cumulative.push(acc);
    }
    *cumulative.last_mut().unwrap() = 1.0;
    let draws = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            cumulative.partition_point(|&c| c < u).min(probs.len() - 1)
        })
        .collect();
    Ok(draws)
}

/// One step of the resampling baseline filter: resample with probability
/// proportional to `e^{-L(x_i)}`, perturb with Gaussian noise, then set each
/// log-weight to `-L(x_new)`. No gradients are used.
pub fn resampling_pf_step<R: Rng>(
    ensemble: &mut Ensemble,
    loss: &dyn LossTask,
    perturb_std: f64,
    rng: &mut R,
) -> Result<()> {
    if loss.dim() != ensemble.dim() {
        return Err(Error::DimensionMismatch { expected: ensemble.dim(), got: loss.dim() });
    }
    let log_probs: Vec<f64> =
        ensemble.particles().iter().map(|p| -loss.evaluate(&p.position)).collect();
    let n = ensemble.len();
    let sources = multinomial_draw(&log_probs, n, rng)?;
    let mut new_positions: Vec<Vec<f64>> =
        sources.iter().map(|&s| ensemble.particles()[s].position.clone()).collect();
    if perturb_std > 0.0 {
        let normal =
            Normal::new(0.0, perturb_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for pos in &mut new_positions {
            for x in pos.iter_mut() {
                *x += normal.sample(rng);
            }
        }
    }
    for (i, (p, pos)) in
        ensemble.particles_mut().iter_mut().zip(new_positions).enumerate()
    {
        p.position = pos;
        let l = loss.evaluate(&p.position);
        if !l.is_finite() {
            return Err(Error::NumericalFailure {
                particle: i,
                detail: "non-finite loss after perturbation".into(),
            });
        }
        p.log_weight = -l;
    }
    ensemble.step += 1;
    Ok(())
}

/// Resampling baseline with its own seeded random stream, so a fixed config
/// plus a fixed loss stream gives a bit-identical trajectory.
pub struct ResamplingFilter {
    pub ensemble: Ensemble,
    perturb_std: f64,
    rng: ChaCha12Rng,
}

impl ResamplingFilter {
    pub fn new(config: &ResamplingConfig, sigma_sq: f64, base_position: &[f64], init_noise_std: f64) -> Result<Self> {
        if config.n_particles == 0 {
            return Err(Error::InvalidConfig("n_particles must be >= 1".into()));
        }
        if !(config.perturb_std >= 0.0) {
            return Err(Error::InvalidConfig("perturb_std must be >= 0".into()));
        }
        let ens_config = EnsembleConfig {
            n_particles: config.n_particles,
            sigma_sq,
            init_noise_std,
            seed: config.seed,
        };
        let ensemble = init_ensemble(&ens_config, base_position)?;
        // separate stream from the init noise
        let rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(ResamplingFilter { ensemble, perturb_std: config.perturb_std, rng })
    }

    pub fn step(&mut self, loss: &dyn LossTask) -> Result<()> {
        resampling_pf_step(&mut self.ensemble, loss, self.perturb_std, &mut self.rng)
    }
}
