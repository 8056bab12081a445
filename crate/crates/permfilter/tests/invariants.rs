//! Property tests for the structural guarantees: weight bookkeeping,
//! per-particle independence, the N=1 reduction, linear-loss order
//! independence, and lossless serialization.

use permfilter::baselines::{gd_run, resampling_pf_step, ResamplingConfig, ResamplingFilter};
use permfilter::bench::{Method, HeadConfig};
use permfilter::io::{
    read_checkpoint, write_checkpoint, Benchmark, ExperimentConfig, SyntheticSpec,
};
use permfilter::oracles::linear_permutation_invariance;
use permfilter::{init_ensemble, Ensemble, EnsembleConfig, LinearLoss, LossTask, Particle};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::PathBuf;

fn linear_losses(dim: usize, count: usize) -> impl Strategy<Value = Vec<LinearLoss>> {
    proptest::collection::vec(
        (proptest::collection::vec(-1.0..1.0f64, dim), -1.0..1.0f64),
        1..=count,
    )
    .prop_map(|items| items.into_iter().map(|(g, b)| LinearLoss::new(g, b)).collect())
}

fn small_config() -> impl Strategy<Value = EnsembleConfig> {
    (1usize..=8, 0.001..0.1f64, 0.0..1.0f64, any::<u64>()).prop_map(
        |(n_particles, sigma_sq, init_noise_std, seed)| EnsembleConfig {
            n_particles,
            sigma_sq,
            init_noise_std,
            seed,
        },
    )
}

fn run_filter(config: &EnsembleConfig, dim: usize, losses: &[LinearLoss]) -> Ensemble {
    let mut ens = init_ensemble(config, &vec![0.0; dim]).unwrap();
    for loss in losses {
        ens.wpf_step(loss).unwrap();
    }
    ens
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalized_weights_are_positive_and_sum_to_one(
        config in small_config(),
        losses in linear_losses(4, 6),
    ) {
        let mut ens = run_filter(&config, 4, &losses);
        ens.normalize_weights().unwrap();
        let weights = ens.weights().unwrap();
        let sum: f64 = weights.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12, "weight sum {sum}");
        // positivity is structural in the log domain
        for p in ens.particles() {
            prop_assert!(p.log_weight.is_finite());
        }
    }

    #[test]
    fn normalization_is_idempotent(
        config in small_config(),
        losses in linear_losses(4, 6),
    ) {
        let mut ens = run_filter(&config, 4, &losses);
        ens.normalize_weights().unwrap();
        let once = ens.log_weights();
        ens.normalize_weights().unwrap();
        let twice = ens.log_weights();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn particles_evolve_independently(
        config in small_config(),
        losses in linear_losses(3, 5),
    ) {
        // running the whole ensemble matches running each particle alone
        let together = run_filter(&config, 3, &losses);
        let init = init_ensemble(&config, &vec![0.0; 3]).unwrap();
        for (i, start) in init.particles().iter().enumerate() {
            let mut solo = Ensemble::from_particles(
                vec![Particle { position: start.position.clone(), log_weight: 0.0 }],
                config.sigma_sq,
                0,
            )
            .unwrap();
            for loss in &losses {
                solo.wpf_step(loss).unwrap();
            }
            let joint = &together.particles()[i];
            let alone = &solo.particles()[0];
            prop_assert_eq!(&joint.position, &alone.position);
            prop_assert_eq!(joint.log_weight.to_bits(), alone.log_weight.to_bits());
        }
    }

    #[test]
    fn single_particle_filter_is_gradient_descent(
        sigma_sq in 0.001..0.1f64,
        seed in any::<u64>(),
        losses in linear_losses(4, 6),
    ) {
        let config = EnsembleConfig {
            n_particles: 1,
            sigma_sq,
            init_noise_std: 0.2,
            seed,
        };
        let refs: Vec<&dyn LossTask> = losses.iter().map(|l| l as &dyn LossTask).collect();
        let gd = gd_run(&config, &refs).unwrap();
        let mut wpf = run_filter(&config, 4, &losses);
        wpf.normalize_weights().unwrap();
        prop_assert_eq!(&gd.particles()[0].position, &wpf.particles()[0].position);
        prop_assert_eq!(wpf.weights().unwrap()[0], 1.0);
    }

    #[test]
    fn linear_losses_commute(seed in any::<u64>()) {
        let config = EnsembleConfig {
            n_particles: 4,
            sigma_sq: 0.05,
            init_noise_std: 0.5,
            seed,
        };
        let report = linear_permutation_invariance(3, 6, 4, &config, seed ^ 0xabcd).unwrap();
        prop_assert!(report.max_position_diff < 1e-9);
        prop_assert!(report.max_log_weight_diff < 1e-8);
        prop_assert!(report.max_mmd < 1e-9);
    }

    #[test]
    fn halving_step_doubling_count_matches_on_linear_loss(
        seed in any::<u64>(),
        g in proptest::collection::vec(-1.0..1.0f64, 3),
    ) {
        let loss = LinearLoss::new(g, 0.0);
        let coarse_cfg = EnsembleConfig {
            n_particles: 2,
            sigma_sq: 0.04,
            init_noise_std: 0.3,
            seed,
        };
        let fine_cfg = EnsembleConfig { sigma_sq: 0.02, ..coarse_cfg };
        let mut coarse = init_ensemble(&coarse_cfg, &[0.0; 3]).unwrap();
        let mut fine = init_ensemble(&fine_cfg, &[0.0; 3]).unwrap();
        for _ in 0..5 {
            coarse.wpf_step(&loss).unwrap();
        }
        for _ in 0..10 {
            fine.wpf_step(&loss).unwrap();
        }
        for (a, b) in coarse.particles().iter().zip(fine.particles()) {
            for (x, y) in a.position.iter().zip(&b.position) {
                prop_assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn resampling_never_invents_positions(
        config in small_config(),
        losses in linear_losses(3, 4),
        perturb_seed in any::<u64>(),
    ) {
        let mut ens = run_filter(&config, 3, &losses);
        let before: Vec<Vec<f64>> =
            ens.particles().iter().map(|p| p.position.clone()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(perturb_seed);
        // zero perturbation isolates the selection step
        resampling_pf_step(&mut ens, &losses[0], 0.0, &mut rng).unwrap();
        for p in ens.particles() {
            prop_assert!(
                before.iter().any(|b| b == &p.position),
                "resampled position not among inputs"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        config in small_config(),
        losses in linear_losses(3, 4),
    ) {
        let ens = run_filter(&config, 3, &losses);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ens.wpf");
        write_checkpoint(&ens, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        prop_assert_eq!(ens.sigma_sq.to_bits(), back.sigma_sq.to_bits());
        prop_assert_eq!(ens.step, back.step);
        for (a, b) in ens.particles().iter().zip(back.particles()) {
            prop_assert_eq!(a.log_weight.to_bits(), b.log_weight.to_bits());
            for (x, y) in a.position.iter().zip(&b.position) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn config_round_trips_through_json(
        n_particles in 1usize..100,
        sigma_sq in 1e-4..1.0f64,
        init_noise_std in 0.0..1.0f64,
        epochs_per_task in 1usize..4,
        batch_size in 1usize..256,
        n_permutations in 1usize..10,
        seed in any::<u64>(),
        hidden_units in 1usize..128,
        k_tasks in 1usize..6,
        dim in 1usize..32,
        class_incremental in any::<bool>(),
    ) {
        let cfg = ExperimentConfig {
            method: Method::Wpf,
            benchmark: Benchmark::Synthetic,
            n_particles,
            sigma_sq,
            init_noise_std,
            epochs_per_task,
            batch_size,
            n_permutations,
            seed,
            output_dir: PathBuf::from("results"),
            hidden_units,
            head: if class_incremental {
                HeadConfig::ClassIncremental
            } else {
                HeadConfig::Domain
            },
            resample_perturb_std: 1e-2,
            synthetic: SyntheticSpec { k_tasks, dim, separation: 3.0 },
            data_dir: None,
        };
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("config.json");
        cfg.to_file(&path).unwrap();
        prop_assert_eq!(ExperimentConfig::from_file(&path).unwrap(), cfg);
    }

    #[test]
    fn resampling_filter_is_seed_deterministic(seed in any::<u64>()) {
        let losses = [
            LinearLoss::new(vec![0.2, -0.3], 0.1),
            LinearLoss::new(vec![-0.5, 0.4], 0.0),
        ];
        let cfg = ResamplingConfig { n_particles: 5, perturb_std: 1e-2, seed };
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut f = ResamplingFilter::new(&cfg, 0.05, &[0.0, 0.0], 0.3).unwrap();
            for loss in &losses {
                f.step(loss).unwrap();
            }
            runs.push(
                f.ensemble
                    .particles()
                    .iter()
                    .map(|p| p.position.clone())
                    .collect::<Vec<_>>(),
            );
        }
        prop_assert_eq!(&runs[0], &runs[1]);
    }
}
