use nalgebra::DMatrix;
use np_lab::metrics::{evaluate_model, Mask};
use np_lab::models::ExactGp;
use np_lab::rng::RngStream;
use np_lab::taskgen::{
    gp_posterior_predict, kernel_eval, kernel_matrix, make_task_batch, sample_gp_function, KernelFamily, KernelSpec, TaskGenConfig,
};
use proptest::prelude::*;

fn kernel(family: KernelFamily, l: f64, s2: f64, p: f64) -> KernelSpec {
    match family {
        KernelFamily::Rbf => KernelSpec::rbf(l, s2, 0.0),
        KernelFamily::Matern52 => KernelSpec::matern52(l, s2, 0.0),
        KernelFamily::Periodic => KernelSpec::periodic(l, s2, p, 0.0),
    }
}

fn family() -> impl Strategy<Value = KernelFamily> {
    prop::sample::select(KernelFamily::ALL.to_vec())
}

fn small_config() -> impl Strategy<Value = TaskGenConfig> {
    (family(), 1usize..3, 1usize..10, 10usize..30).prop_map(|(family, x_dim, m, n)| TaskGenConfig {
        family,
        x_dim,
        n_context_range: (1, m),
        n_target: n,
        ..TaskGenConfig::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kernel_matrix_is_symmetric_psd(
        fam in family(), l in 0.1..2.0f64, s2 in 0.1..2.0f64, p in 0.5..2.0f64,
        n in 1usize..50, dim in 1usize..3, seed in any::<u64>(),
    ) {
        let k = kernel(fam, l, s2, p);
        let mut rng = RngStream::new(seed);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.uniform(-3.0, 3.0)).collect()).collect();
        let km = kernel_matrix(&k, &xs, &xs);
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(km.get(i, j), km.get(j, i));
                prop_assert_eq!(km.get(i, j), kernel_eval(&k, &xs[i], &xs[j]).unwrap());
            }
        }
        let eig = DMatrix::from_fn(n, n, |i, j| km.get(i, j)).symmetric_eigenvalues();
        prop_assert!(eig.min() >= -1e-8, "min eigenvalue {}", eig.min());
    }

    #[test]
    fn generation_is_a_pure_function_of_config_and_seed(cfg in small_config(), batch in 1usize..4, seed in any::<u64>()) {
        let a = make_task_batch(&cfg, batch, &mut RngStream::new(seed)).unwrap();
        let b = make_task_batch(&cfg, batch, &mut RngStream::new(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn targets_contain_every_context_point(cfg in small_config(), seed in any::<u64>()) {
        for t in make_task_batch(&cfg, 3, &mut RngStream::new(seed)).unwrap() {
            for (x, y) in t.x_context.iter().zip(&t.y_context) {
                prop_assert!(t.x_target.iter().zip(&t.y_target).any(|(xt, yt)| xt == x && yt == y));
            }
        }
    }

    #[test]
    fn posterior_variance_is_bounded_by_prior(cfg in small_config(), seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let t = make_task_batch(&cfg, 1, &mut rng).unwrap().remove(0);
        let k = t.kernel.unwrap();
        let xs: Vec<Vec<f64>> = (0..20).map(|_| (0..cfg.x_dim).map(|_| rng.uniform(-5.0, 5.0)).collect()).collect();
        for g in gp_posterior_predict(&k, &t, &xs).unwrap() {
            for v in g.variance() {
                prop_assert!(v >= 0.0);
                prop_assert!(v <= k.outputscale + k.noise * k.noise + 1e-8);
            }
        }
    }
}

/// Empirical covariance of 10⁴ draws against `K + noise²I`, entrywise
/// within three standard errors of the second-moment estimator.
#[test]
fn sampler_covariance_matches_kernel() {
    let xs: Vec<Vec<f64>> = [-1.5, -0.4, 0.0, 0.7, 1.9].iter().map(|&x| vec![x]).collect();
    let specs = [
        KernelSpec::rbf(0.8, 0.7, 0.05),
        KernelSpec::matern52(0.8, 0.7, 0.05),
        KernelSpec::periodic(0.8, 0.7, 1.2, 0.05),
    ];
    let draws = 10_000;
    for k in specs {
        let mut rng = RngStream::new(3).named(k.family.name());
        let mut cov = [[0.0; 5]; 5];
        for _ in 0..draws {
            let f = sample_gp_function(&k, &xs, &mut rng).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    cov[i][j] += f[i] * f[j] / draws as f64;
                }
            }
        }
        let mut km = kernel_matrix(&k, &xs, &xs);
        for i in 0..5 {
            km.set(i, i, km.get(i, i) + k.noise * k.noise);
        }
        for i in 0..5 {
            for j in 0..5 {
                let (kij, kii, kjj) = (km.get(i, j), km.get(i, i), km.get(j, j));
                let se = ((kii * kjj + kij * kij) / draws as f64).sqrt();
                assert!(
                    (cov[i][j] - kij).abs() <= 3.0 * se,
                    "{} ({i},{j}): {} vs {kij} (se {se})",
                    k.family.name(),
                    cov[i][j]
                );
            }
        }
    }
}

fn eval_tasks(family: KernelFamily, n: usize, seed: u64) -> Vec<np_lab::taskgen::Task> {
    let cfg = TaskGenConfig {
        family,
        ..TaskGenConfig::default()
    };
    make_task_batch(&cfg, n, &mut RngStream::new(seed)).unwrap()
}

#[test]
fn exact_gp_on_own_kernel_is_calibrated() {
    let tasks = eval_tasks(KernelFamily::Rbf, 500, 77);
    let r = evaluate_model(&ExactGp { kernel: None }, &tasks, 1, Mask::Target, 0, 1).unwrap();
    assert!(r.ece <= 0.05, "ece {}", r.ece);
}

/// Mean target log-likelihood against its expectation under the model's own
/// predictive, `−½ ln(2πσ²) − ½` per point.
#[test]
fn exact_gp_log_likelihood_matches_expectation() {
    for family in KernelFamily::ALL {
        let tasks = eval_tasks(family, 500, 78);
        let r = evaluate_model(&ExactGp { kernel: None }, &tasks, 1, Mask::Target, 0, 1).unwrap();
        let mut expected = 0.0;
        let mut n = 0usize;
        for t in &tasks {
            let g = gp_posterior_predict(&t.kernel.unwrap(), t, &t.x_target).unwrap();
            for (i, in_ctx) in t.context_mask().into_iter().enumerate() {
                if !in_ctx {
                    expected += -0.5 * (2.0 * std::f64::consts::PI * g[i].variance()[0]).ln() - 0.5;
                    n += 1;
                }
            }
        }
        expected /= n as f64;
        assert_eq!(n, r.n_points);
        assert!((r.ll - expected).abs() <= 0.1, "{}: ll {} vs expected {expected}", family.name(), r.ll);
    }
}
