mod common;

use common::*;
use np_lab::models::{attention_weights, local_prior, AttentionKind, Dims, Model, ModelConfig, ModelKind, PredictNoise, VarianceMode};
use np_lab::numerics::norm;
use np_lab::rng::RngStream;
use np_lab::spectral::BiLipConfig;
use proptest::prelude::*;

const KINDS: [ModelKind; 3] = [ModelKind::Cnp, ModelKind::Np, ModelKind::Dnp];

fn model(kind: ModelKind, attention: AttentionKind, normalize: bool, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(kind, Dims::square(1, 1, 16));
    cfg.dnp.attention = attention;
    cfg.dnp.normalize_attention = normalize;
    Model::init(cfg, &BiLipConfig::default(), &mut RngStream::new(seed)).unwrap()
}

fn attention() -> impl Strategy<Value = AttentionKind> {
    prop::sample::select(vec![AttentionKind::Laplace, AttentionKind::Dot])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn predictions_are_invariant_to_context_order(seed in any::<u64>(), att in attention(), normalize in any::<bool>()) {
        let task = gp_task(seed);
        let x_star: Vec<Vec<f64>> = (0..15).map(|i| vec![-3.0 + 0.4 * i as f64]).collect();
        let mut rng = RngStream::new(seed).named("perm");
        for kind in KINDS {
            let m = model(kind, att, normalize, seed);
            let noise = PredictNoise::draw(&m, x_star.len(), 3, &mut rng).unwrap();
            let base = m.predict_with_noise(&task.x_context, &task.y_context, &x_star, &noise).unwrap();
            for _ in 0..20 {
                let p = rng.permutation(task.n_context());
                let xc: Vec<_> = p.iter().map(|&i| task.x_context[i].clone()).collect();
                let yc: Vec<_> = p.iter().map(|&i| task.y_context[i].clone()).collect();
                let q = m.predict_with_noise(&xc, &yc, &x_star, &noise).unwrap();
                for i in 0..x_star.len() {
                    for s in 0..noise.samples().max(1) {
                        let ((ma, la), (mb, lb)) = (base.component(i, s), q.component(i, s));
                        prop_assert!((ma[0] - mb[0]).abs() <= 1e-9 && (la[0] - lb[0]).abs() <= 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn subset_predictions_match_joint_predictions(seed in any::<u64>(), picks in prop::collection::vec(0usize..20, 1..8)) {
        let task = gp_task(seed);
        let mut rng = RngStream::new(seed).named("subset");
        for kind in KINDS {
            let m = model(kind, AttentionKind::Laplace, true, seed);
            let noise = PredictNoise::draw(&m, task.n_target(), 4, &mut rng).unwrap();
            let joint = m.predict_with_noise(&task.x_context, &task.y_context, &task.x_target, &noise).unwrap();
            let xs: Vec<_> = picks.iter().map(|&i| task.x_target[i].clone()).collect();
            let sub = m.predict_with_noise(&task.x_context, &task.y_context, &xs, &noise.select_targets(&picks)).unwrap();
            prop_assert_eq!(sub, joint.select(&picks));
        }
    }

    #[test]
    fn normalized_attention_rows_are_distributions(
        n in 1usize..12, du in 1usize..6, seed in any::<u64>(), att in attention(),
    ) {
        let mut rng = RngStream::new(seed);
        let ut: Vec<f64> = (0..du).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let uc: Vec<Vec<f64>> = (0..n).map(|_| (0..du).map(|_| rng.uniform(-5.0, 5.0)).collect()).collect();
        let w = attention_weights(&ut, &uc, att, true).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn far_targets_revert_to_standard_normal(n in 1usize..8, du in 1usize..6, dz in 1usize..4, seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let uc: Vec<Vec<f64>> = (0..n).map(|_| (0..du).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let dir: Vec<f64> = rng.normal_vec(du);
        let len = norm(&dir);
        // 100·√d_u beyond the farthest-possible context point.
        let reach = 100.0 * (du as f64).sqrt() + 2.0 * (du as f64).sqrt();
        let ut: Vec<f64> = dir.iter().map(|d| d / len * reach).collect();
        let w = attention_weights(&ut, &uc, AttentionKind::Laplace, false).unwrap();
        let mu: Vec<Vec<f64>> = (0..n).map(|_| (0..dz).map(|_| rng.uniform(-3.0, 3.0)).collect()).collect();
        let lv: Vec<Vec<f64>> = (0..n).map(|_| (0..dz).map(|_| rng.uniform(-3.0, 3.0)).collect()).collect();
        let g = local_prior(&w, &mu, &lv, VarianceMode::LogWeighted).unwrap();
        prop_assert!(norm(&g.mean) <= 1e-3);
        prop_assert!(g.variance().iter().all(|v| (v - 1.0).abs() <= 1e-3));
    }

    #[test]
    fn elbo_kl_terms_are_non_negative(seed in any::<u64>(), att in attention(), literal in any::<bool>()) {
        let task = gp_task(seed);
        let mut cfg = ModelConfig::new(ModelKind::Dnp, Dims::square(1, 1, 8));
        cfg.dnp.attention = att;
        cfg.dnp.variance_mode = if literal { VarianceMode::Literal } else { VarianceMode::LogWeighted };
        let m = Model::init(cfg, &BiLipConfig::default(), &mut RngStream::new(seed)).unwrap();
        let p = m.elbo(&task, &mut RngStream::new(seed)).unwrap();
        prop_assert!(p.kl_global >= 0.0 && p.kl_local >= 0.0);
        let np = small_model(ModelKind::Np, 8, seed);
        prop_assert!(np.elbo(&task, &mut RngStream::new(seed)).unwrap().kl_global >= 0.0);
    }
}
