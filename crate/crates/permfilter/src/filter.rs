//! The gradient-based weighted particle filter.
//!
//! Particles move by gradient descent with step size `sigma_sq`; each step
//! multiplies a particle's weight by `e^{-(L(x_new)+L(x_old))/2}`. Weights
//! live in log domain so long runs never underflow, and are normalized
//! lazily via log-sum-exp.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossTask;

/// One candidate parameter vector with its log-domain importance weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub position: Vec<f64>,
    pub log_weight: f64,
}

/// Filter configuration. Same config plus same loss stream gives a
/// bit-identical trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub n_particles: usize,
    /// Gaussian variance of the particle representation, doubling as the
    /// gradient step size (the learning rate).
    pub sigma_sq: f64,
    pub init_noise_std: f64,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { n_particles: 100, sigma_sq: 1e-2, init_noise_std: 1e-2, seed: 0 }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::InvalidConfig("n_particles must be >= 1".into()));
        }
        if !(self.sigma_sq > 0.0) || !self.sigma_sq.is_finite() {
            return Err(Error::InvalidConfig("sigma_sq must be finite and > 0".into()));
        }
        if !(self.init_noise_std >= 0.0) || !self.init_noise_std.is_finite() {
            return Err(Error::InvalidConfig("init_noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// The full particle population plus the shared step-size/variance sigma^2.
/// Particle order is stable: index `i` is an identity across updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    particles: Vec<Particle>,
    pub sigma_sq: f64,
    pub step: u64,
}

/// N particles at `base_position` plus seeded per-coordinate Gaussian noise
/// of standard deviation `init_noise_std`. All weights start at 1 (log 0).
pub fn init_ensemble(config: &EnsembleConfig, base_position: &[f64]) -> Result<Ensemble> {
    config.validate()?;
    if base_position.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("base position must be finite".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let particles = if config.init_noise_std == 0.0 {
        (0..config.n_particles)
            .map(|_| Particle { position: base_position.to_vec(), log_weight: 0.0 })
            .collect()
    } else {
        let normal = Normal::new(0.0, config.init_noise_std)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        (0..config.n_particles)
            .map(|_| Particle {
                position: base_position.iter().map(|v| v + normal.sample(&mut rng)).collect(),
                log_weight: 0.0,
            })
            .collect()
    };
    Ok(Ensemble { particles, sigma_sq: config.sigma_sq, step: 0 })
}

impl Ensemble {
    pub fn from_particles(particles: Vec<Particle>, sigma_sq: f64, step: u64) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::InvalidInput("ensemble needs at least one particle".into()));
        }
        let d = particles[0].position.len();
        if particles.iter().any(|p| p.position.len() != d) {
            return Err(Error::InvalidInput("particles must share one dimension".into()));
        }
        if !(sigma_sq > 0.0) {
            return Err(Error::InvalidConfig("sigma_sq must be > 0".into()));
        }
        Ok(Ensemble { particles, sigma_sq, step })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].position.len()
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn particles_mut(&mut self) -> &mut [Particle] {
        &mut self.particles
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight).collect()
    }

    /// Normalized weights `w_i = e^{l_i - lse(l)}`; does not mutate.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let lse = self.log_sum_exp_weights()?;
        Ok(self.particles.iter().map(|p| (p.log_weight - lse).exp()).collect())
    }

    fn log_sum_exp_weights(&self) -> Result<f64> {
        let max = self
            .particles
            .iter()
            .map(|p| p.log_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateEnsemble("all log-weights are -inf".into()));
        }
        // fixed left-to-right reduction for reproducibility
        let sum: f64 = self.particles.iter().map(|p| (p.log_weight - max).exp()).sum();
        Ok(max + sum.ln())
    }

    /// One filter update: `x' = x - sigma_sq * grad L(x)` and
    /// `log w' = log w - (L(x') + L(x)) / 2` for every particle.
    ///
    /// Weights are intentionally not normalized here; normalization happens
    /// once when a consumer needs it.
    pub fn wpf_step(&mut self, loss: &dyn LossTask) -> Result<()> {
        if loss.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: loss.dim() });
        }
        let sigma_sq = self.sigma_sq;
        let results: Vec<Result<()>> = self
            .particles
            .par_iter_mut()
            .enumerate()
            .map(|(i, p)| {
                let (l_old, grad) = loss.eval_grad(&p.position);
                if !l_old.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NumericalFailure {
                        particle: i,
                        detail: "non-finite loss or gradient at current position".into(),
                    });
                }
                for (x, g) in p.position.iter_mut().zip(&grad) {
                    *x -= sigma_sq * g;
                }
                let l_new = loss.evaluate(&p.position);
                if !l_new.is_finite() {
                    return Err(Error::NumericalFailure {
                        particle: i,
                        detail: "non-finite loss at updated position".into(),
                    });
                }
                p.log_weight -= 0.5 * (l_new + l_old);
                if !p.log_weight.is_finite() {
                    return Err(Error::NumericalFailure {
                        particle: i,
                        detail: "log-weight left the finite range".into(),
                    });
                }
                Ok(())
            })
            .collect();
        for r in results {
            r?;
        }
        self.step += 1;
        Ok(())
    }

    /// Rescale log-weights so the weights sum to 1, preserving ratios
    /// exactly. Log-sum-exp keeps this stable for any finite log-weights.
    pub fn normalize_weights(&mut self) -> Result<()> {
        let lse = self.log_sum_exp_weights()?;
        for p in &mut self.particles {
            p.log_weight -= lse;
        }
        Ok(())
    }

    fn normalized_weights_checked(&self) -> Result<Vec<f64>> {
        let weights: Vec<f64> = self.particles.iter().map(|p| p.log_weight.exp()).collect();
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::ContractViolation(format!(
                "ensemble is not normalized (weight sum {sum})"
            )));
        }
        Ok(weights)
    }

    /// Weighted average `sum_i w_i v_i` of per-particle values. Requires a
    /// normalized ensemble.
    pub fn weighted_statistic(&self, per_particle_values: &[f64]) -> Result<f64> {
        if per_particle_values.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: per_particle_values.len(),
            });
        }
        if per_particle_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("per-particle values must be finite".into()));
        }
        let weights = self.normalized_weights_checked()?;
        Ok(weights.iter().zip(per_particle_values).map(|(w, v)| w * v).sum())
    }

    /// Weight-degeneracy diagnostic `1 / sum_i w_i^2`, in `[1, N]`.
    pub fn effective_sample_size(&self) -> Result<f64> {
        let weights = self.normalized_weights_checked()?;
        Ok(1.0 / weights.iter().map(|w| w * w).sum::<f64>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LinearLoss, QuadraticLoss};
    use approx::assert_relative_eq;

    fn config(n: usize, noise: f64, seed: u64) -> EnsembleConfig {
        EnsembleConfig { n_particles: n, sigma_sq: 0.1, init_noise_std: noise, seed }
    }

    #[test]
    fn init_zero_noise_copies_base() {
        let ens = init_ensemble(&config(3, 0.0, 0), &[1.0, 2.0]).unwrap();
        assert_eq!(ens.len(), 3);
        for p in ens.particles() {
            assert_eq!(p.position, vec![1.0, 2.0]);
            assert_eq!(p.log_weight, 0.0);
        }
        assert_eq!(ens.step, 0);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_ensemble(&config(1, 0.3, 99), &[0.0; 4]).unwrap();
        let b = init_ensemble(&config(1, 0.3, 99), &[0.0; 4]).unwrap();
        assert_eq!(a.particles()[0].position, b.particles()[0].position);
        let c = init_ensemble(&config(1, 0.3, 100), &[0.0; 4]).unwrap();
        assert_ne!(a.particles()[0].position, c.particles()[0].position);
    }

    #[test]
    fn init_noise_std_is_statistically_right() {
        // N=100, d=50, noise 0.01: per-coordinate sample std within +/-50%
        let cfg = EnsembleConfig { n_particles: 100, sigma_sq: 0.1, init_noise_std: 0.01, seed: 7 };
        let ens = init_ensemble(&cfg, &[0.0; 50]).unwrap();
        for j in 0..50 {
            let vals: Vec<f64> = ens.particles().iter().map(|p| p.position[j]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64;
            let std = var.sqrt();
            assert!((0.005..=0.015).contains(&std), "coordinate {j}: std {std}");
        }
    }

    #[test]
    fn init_rejects_non_finite_base() {
        assert!(init_ensemble(&config(2, 0.0, 0), &[f64::NAN]).is_err());
    }

    #[test]
    fn wpf_step_quadratic_worked_example() {
        // sigma^2=0.1, x=1, L=x^2/2: x'=0.9, delta log w = -(0.405+0.5)/2
        let mut ens = init_ensemble(&config(1, 0.0, 0), &[1.0]).unwrap();
        let loss = QuadraticLoss::new(vec![0.0], vec![1.0]).unwrap();
        ens.wpf_step(&loss).unwrap();
        assert_relative_eq!(ens.particles()[0].position[0], 0.9, epsilon = 1e-15);
        assert_relative_eq!(ens.particles()[0].log_weight, -0.4525, epsilon = 1e-15);
        assert_eq!(ens.step, 1);
    }

    #[test]
    fn wpf_step_zero_loss_is_identity() {
        let mut ens = init_ensemble(&config(4, 0.2, 3), &[1.0, -1.0]).unwrap();
        let before = ens.clone();
        let loss = LinearLoss::new(vec![0.0, 0.0], 0.0);
        ens.wpf_step(&loss).unwrap();
        assert_eq!(ens.particles(), before.particles());
        assert_eq!(ens.step, 1);
    }

    #[test]
    fn wpf_step_linear_worked_example() {
        // sigma^2=0.5, g=(1,0): a=(0,0) -> (-0.5,0), +0.25; b=(1,0) -> (0.5,0), -0.75
        let particles = vec![
            Particle { position: vec![0.0, 0.0], log_weight: 0.0 },
            Particle { position: vec![1.0, 0.0], log_weight: 0.0 },
        ];
        let mut ens = Ensemble::from_particles(particles, 0.5, 0).unwrap();
        let loss = LinearLoss::new(vec![1.0, 0.0], 0.0);
        ens.wpf_step(&loss).unwrap();
        assert_eq!(ens.particles()[0].position, vec![-0.5, 0.0]);
        assert_relative_eq!(ens.particles()[0].log_weight, 0.25, epsilon = 1e-15);
        assert_eq!(ens.particles()[1].position, vec![0.5, 0.0]);
        assert_relative_eq!(ens.particles()[1].log_weight, -0.75, epsilon = 1e-15);
    }

    #[test]
    fn wpf_step_reports_offending_particle() {
        let particles = vec![
            Particle { position: vec![0.0], log_weight: 0.0 },
            Particle { position: vec![1e308], log_weight: 0.0 },
        ];
        let mut ens = Ensemble::from_particles(particles, 0.5, 0).unwrap();
        let loss = QuadraticLoss::new(vec![0.0], vec![1.0]).unwrap();
        match ens.wpf_step(&loss) {
            Err(Error::NumericalFailure { particle, .. }) => assert_eq!(particle, 1),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn normalize_symmetry() {
        let l2 = 2.0_f64.ln();
        let particles = vec![
            Particle { position: vec![0.0], log_weight: l2 },
            Particle { position: vec![1.0], log_weight: l2 },
        ];
        let mut ens = Ensemble::from_particles(particles, 1.0, 0).unwrap();
        ens.normalize_weights().unwrap();
        let w = ens.weights().unwrap();
        assert_relative_eq!(w[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(w[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn normalize_is_stable_for_extreme_gaps() {
        let particles = vec![
            Particle { position: vec![0.0], log_weight: 0.0 },
            Particle { position: vec![1.0], log_weight: -1000.0 },
        ];
        let mut ens = Ensemble::from_particles(particles, 1.0, 0).unwrap();
        ens.normalize_weights().unwrap();
        let w = ens.weights().unwrap();
        assert_relative_eq!(w[0], 1.0, epsilon = 1e-15);
        // e^{-1000} is below the subnormal range; the log-weight stays exact
        assert!(w[1] < 1e-300);
        assert_relative_eq!(ens.particles()[1].log_weight, -1000.0, epsilon = 1e-12);
    }

    #[test]
    fn normalize_softmax_example() {
        let particles = vec![
            Particle { position: vec![0.0], log_weight: 0.25 },
            Particle { position: vec![1.0], log_weight: -0.75 },
        ];
        let mut ens = Ensemble::from_particles(particles, 1.0, 0).unwrap();
        ens.normalize_weights().unwrap();
        let w = ens.weights().unwrap();
        let e = 1.0_f64.exp();
        assert_relative_eq!(w[0], e / (e + 1.0), epsilon = 1e-14);
        assert_relative_eq!(w[1], 1.0 / (e + 1.0), epsilon = 1e-14);
    }

    #[test]
    fn normalize_rejects_all_neg_inf() {
        let particles = vec![Particle { position: vec![0.0], log_weight: f64::NEG_INFINITY }];
        let mut ens = Ensemble::from_particles(particles, 1.0, 0).unwrap();
        assert!(matches!(ens.normalize_weights(), Err(Error::DegenerateEnsemble(_))));
    }

    #[test]
    fn normalize_sums_to_one_and_is_idempotent() {
        let particles: Vec<Particle> = (0..17)
            .map(|i| Particle { position: vec![i as f64], log_weight: (i as f64) * 13.7 - 80.0 })
            .collect();
        let mut ens = Ensemble::from_particles(particles, 1.0, 0).unwrap();
        ens.normalize_weights().unwrap();
        let sum: f64 = ens.weights().unwrap().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let logw = ens.log_weights();
        ens.normalize_weights().unwrap();
        for (a, b) in logw.iter().zip(ens.log_weights()) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn weighted_statistic_examples() {
        let particles = vec![
            Particle { position: vec![0.0], log_weight: 0.0 },
            Particle { position: vec![1.0], log_weight: 0.0 },
        ];
        let mut ens = Ensemble::from_particles(particles, 1.0, 0).unwrap();
        ens.normalize_weights().unwrap();
        assert_relative_eq!(ens.weighted_statistic(&[0.0, 1.0]).unwrap(), 0.5, epsilon = 1e-15);

        // degenerate weights (1, 0)
        let particles = vec![
            Particle { position: vec![0.0], log_weight: 0.0 },
            Particle { position: vec![1.0], log_weight: -800.0 },
        ];
        let mut ens = Ensemble::from_particles(particles, 1.0, 0).unwrap();
        ens.normalize_weights().unwrap();
        assert_relative_eq!(ens.weighted_statistic(&[0.3, 0.9]).unwrap(), 0.3, epsilon = 1e-12);

        // (0.7311, 0.2689) from the softmax example
        let particles = vec![
            Particle { position: vec![0.0], log_weight: 0.25 },
            Particle { position: vec![1.0], log_weight: -0.75 },
        ];
        let mut ens = Ensemble::from_particles(particles, 1.0, 0).unwrap();
        ens.normalize_weights().unwrap();
        let e = 1.0_f64.exp();
        assert_relative_eq!(
            ens.weighted_statistic(&[1.0, 0.0]).unwrap(),
            e / (e + 1.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn weighted_statistic_rejects_length_mismatch() {
        let particles = vec![Particle { position: vec![0.0], log_weight: 0.0 }];
        let mut ens = Ensemble::from_particles(particles, 1.0, 0).unwrap();
        ens.normalize_weights().unwrap();
        assert!(ens.weighted_statistic(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn ess_examples() {
        let particles: Vec<Particle> =
            (0..4).map(|i| Particle { position: vec![i as f64], log_weight: 0.0 }).collect();
        let mut ens = Ensemble::from_particles(particles, 1.0, 0).unwrap();
        ens.normalize_weights().unwrap();
        assert_relative_eq!(ens.effective_sample_size().unwrap(), 4.0, epsilon = 1e-12);

        let particles = vec![
            Particle { position: vec![0.0], log_weight: 0.0 },
            Particle { position: vec![1.0], log_weight: f64::MIN },
            Particle { position: vec![2.0], log_weight: f64::MIN },
            Particle { position: vec![3.0], log_weight: f64::MIN },
        ];
        let mut ens = Ensemble::from_particles(particles, 1.0, 0).unwrap();
        ens.normalize_weights().unwrap();
        assert_relative_eq!(ens.effective_sample_size().unwrap(), 1.0, epsilon = 1e-12);

        let particles = vec![
            Particle { position: vec![0.0], log_weight: 0.5_f64.ln() },
            Particle { position: vec![1.0], log_weight: 0.25_f64.ln() },
            Particle { position: vec![2.0], log_weight: 0.25_f64.ln() },
        ];
        let ens = Ensemble::from_particles(particles, 1.0, 0).unwrap();
        assert_relative_eq!(ens.effective_sample_size().unwrap(), 1.0 / 0.375, epsilon = 1e-12);
    }

    #[test]
    fn ess_rejects_unnormalized() {
        let particles = vec![
            Particle { position: vec![0.0], log_weight: 1.0 },
            Particle { position: vec![1.0], log_weight: 1.0 },
        ];
        let ens = Ensemble::from_particles(particles, 1.0, 0).unwrap();
        assert!(matches!(ens.effective_sample_size(), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn single_particle_reduces_to_gradient_descent() {
        let mut ens = init_ensemble(&config(1, 0.0, 0), &[1.0]).unwrap();
        let loss = QuadraticLoss::new(vec![0.0], vec![1.0]).unwrap();
        let mut x = 1.0;
        for _ in 0..8 {
            ens.wpf_step(&loss).unwrap();
            x -= 0.1 * x;
            assert_eq!(ens.particles()[0].position[0], x);
        }
        ens.normalize_weights().unwrap();
        assert_eq!(ens.weights().unwrap(), vec![1.0]);
    }

    #[test]
    fn sigma_halving_with_double_steps_matches_on_linear_losses() {
        let loss = LinearLoss::new(vec![2.0, -1.0], 0.3);
        let mut coarse = init_ensemble(
            &EnsembleConfig { n_particles: 3, sigma_sq: 0.2, init_noise_std: 0.1, seed: 5 },
            &[0.5, 0.5],
        )
        .unwrap();
        let mut fine = init_ensemble(
            &EnsembleConfig { n_particles: 3, sigma_sq: 0.1, init_noise_std: 0.1, seed: 5 },
            &[0.5, 0.5],
        )
        .unwrap();
        for _ in 0..4 {
            coarse.wpf_step(&loss).unwrap();
        }
        for _ in 0..8 {
            fine.wpf_step(&loss).unwrap();
        }
        for (a, b) in coarse.particles().iter().zip(fine.particles()) {
            for (x, y) in a.position.iter().zip(&b.position) {
                assert_relative_eq!(x, y, epsilon = 1e-12);
            }
        }
    }
}
