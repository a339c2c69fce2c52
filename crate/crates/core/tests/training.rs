use np_lab::models::{Checkpoint, Dims, Model, ModelKind};
use np_lab::rng::RngStream;
use np_lab::training::{train, TrainConfig, TrainOutput, CHECKPOINT_FILE, TRAIN_LOG_FILE};
use np_lab::Error;

fn tiny(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        model: kind,
        dims: Dims::square(1, 1, 8),
        epochs: 2,
        batches_per_epoch: 3,
        batch_size: 4,
        eval_every: 1,
        ..TrainConfig::default()
    }
}

fn run_to(cfg: &TrainConfig, dir: &std::path::Path) -> np_lab::Result<np_lab::training::TrainOutcome> {
    train(cfg, Some(&TrainOutput { dir: dir.to_path_buf() }))
}

#[test]
fn training_is_bit_reproducible() {
    for kind in [ModelKind::Cnp, ModelKind::Np, ModelKind::Dnp] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_to(&tiny(kind), a.path()).unwrap();
        run_to(&tiny(kind), b.path()).unwrap();
        for f in [TRAIN_LOG_FILE, CHECKPOINT_FILE] {
            let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
            assert!(x == y, "{f} differs for {}", kind.name());
        }
    }
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 0, ..tiny(ModelKind::Dnp) };
    let out = run_to(&cfg, dir.path()).unwrap();
    assert!(out.log.is_empty());
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.epoch, 0);
    assert_eq!(ck.model, out.model);
}

#[test]
fn numeric_abort_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { lr: 1e200, epochs: 3, ..tiny(ModelKind::Dnp) };
    match run_to(&cfg, dir.path()) {
        Err(Error::NonFinite(_)) => {}
        other => panic!("expected a numeric abort, got {:?}", other.map(|o| o.log)),
    }
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert!(ck.model.tensors().iter().all(|t| t.is_finite()));
}

#[test]
fn log_has_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_to(&tiny(ModelKind::Dnp), dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(TRAIN_LOG_FILE)).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("schema_version,epoch,loss,recon,kl_global,kl_local,bilip,sigma_min_worst,sigma_max_worst"));
    assert_eq!(lines.count(), 2);
    assert_eq!(out.log.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
    assert!(out.log.iter().all(|r| r.sigma_min_worst <= r.sigma_max_worst));
}

fn init(seed: u64) -> Model {
    let cfg = TrainConfig::default();
    Model::init(cfg.model_config(), &cfg.bilip(), &mut np_lab::rng::seed_everything(seed).init).unwrap()
}

#[test]
fn initialization_depends_only_on_seed() {
    assert_eq!(init(4), init(4));
    assert_ne!(init(4), init(5));
}

/// Fan-in uniform init: std of a d_h×d_h weight is (1/√d_h)/√3.
#[test]
fn hidden_weight_std_matches_init_scheme() {
    let cfg = TrainConfig::default();
    let np = Model::init(
        np_lab::models::ModelConfig::new(ModelKind::Np, cfg.dims),
        &cfg.bilip(),
        &mut RngStream::new(9),
    )
    .unwrap();
    let w = &np.mlps()[0].layers[1].weight;
    assert_eq!(w.shape(), (cfg.dims.dh, cfg.dims.dh));
    let n = w.data().len() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let want = 1.0 / (cfg.dims.dh as f64).sqrt() / 3f64.sqrt();
    assert!((std / want - 1.0).abs() <= 0.05, "std {std} vs {want}");
}
