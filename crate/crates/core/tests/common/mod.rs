#![allow(dead_code)]

use np_lab::models::{Dims, Model, ModelConfig, ModelKind};
use np_lab::numerics::{Matrix, Tape, Var};
use np_lab::rng::RngStream;
use np_lab::spectral::{BiLipConfig, SvSolver};
use np_lab::taskgen::{make_task_batch, Task, TaskGenConfig};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn small_model(kind: ModelKind, width: usize, seed: u64) -> Model {
    let cfg = ModelConfig::new(kind, Dims::square(1, 1, width));
    Model::init(cfg, &BiLipConfig::default(), &mut RngStream::new(seed)).unwrap()
}

pub fn gp_task(seed: u64) -> Task {
    let cfg = TaskGenConfig {
        n_context_range: (4, 12),
        n_target: 20,
        ..TaskGenConfig::default()
    };
    make_task_batch(&cfg, 1, &mut RngStream::new(seed)).unwrap().remove(0)
}

/// Relative error with a floor on the denominator for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central differences of `loss` at `probes` random entries of `tensors`
/// with magnitude >= 1e-3. Returns (analytic, numeric) pairs.
pub fn fd_probes<F>(tensors: &mut [Matrix], grads: &[Matrix], probes: usize, seed: u64, loss: F) -> Vec<(f64, f64)>
where
    F: Fn(&[Matrix]) -> f64,
{
    let mut rng = RngStream::new(seed).named("probes");
    let mut out = Vec::with_capacity(probes);
    let mut attempts = 0;
    while out.len() < probes {
        attempts += 1;
        assert!(attempts < 100 * probes, "not enough parameters with magnitude >= 1e-3");
        let t = rng.uniform_int(0, tensors.len() - 1);
        let k = rng.uniform_int(0, tensors[t].data().len() - 1);
        let v = tensors[t].data()[k];
        if v.abs() < 1e-3 {
            continue;
        }
        tensors[t].data_mut()[k] = v + FD_STEP;
        let up = loss(tensors);
        tensors[t].data_mut()[k] = v - FD_STEP;
        let down = loss(tensors);
        tensors[t].data_mut()[k] = v;
        out.push((grads[t].data()[k], (up - down) / (2.0 * FD_STEP)));
    }
    out
}

/// Copy `values` into the model's tensors.
pub fn load_tensors(model: &mut Model, values: &[Matrix]) {
    for (t, v) in model.tensors_mut().into_iter().zip(values) {
        t.data_mut().copy_from_slice(v.data());
    }
}

pub fn tensors_of(model: &Model) -> Vec<Matrix> {
    model.tensors().into_iter().cloned().collect()
}

/// Worst relative error over the probes.
pub fn worst(pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().map(|&(a, n)| rel_err(a, n)).fold(0.0, f64::max)
}

pub fn random(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(lo, hi))
}

/// Loss as a function of a list of leaf matrices, differentiated on a tape.
pub fn tape_check(leaves: Vec<Matrix>, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let grads = {
        let mut tape = Tape::new();
        let vars: Vec<_> = leaves.iter().map(|m| tape.param(m)).collect();
        let root = build(&mut tape, &vars);
        tape.backward(root).unwrap().params()
    };
    let value = |ms: &[Matrix]| {
        let mut tape = Tape::new();
        let vars: Vec<_> = ms.iter().map(|m| tape.param(m)).collect();
        let root = build(&mut tape, &vars);
        tape.scalar(root)
    };
    let mut leaves = leaves;
    worst(&fd_probes(&mut leaves, &grads, 50, 11, value))
}

pub fn model_check(kind: ModelKind, grad: impl Fn(&Model) -> (f64, Vec<Matrix>), value: impl Fn(&Model) -> f64) -> f64 {
    let model = small_model(kind, 8, 3);
    let (_, grads) = grad(&model);
    let mut ts = tensors_of(&model);
    let pairs = fd_probes(&mut ts, &grads, 50, 5, |vals| {
        let mut m = model.clone();
        load_tensors(&mut m, vals);
        value(&m)
    });
    worst(&pairs)
}

/// Weights scaled away from the init rescale, which leaves σ_max on the
/// hinge kink, and mostly outside [λ₁, λ₂].
pub fn stretched_dnp() -> Model {
    let mut m = small_model(ModelKind::Dnp, 8, 3);
    for (i, net) in m.mlps_mut().into_iter().enumerate() {
        for (j, t) in net.tensors_mut().enumerate() {
            let s = 1.3 + 0.7 * ((i + j) % 3) as f64;
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    m
}

pub fn exact() -> BiLipConfig {
    BiLipConfig {
        solver: SvSolver::Exact,
        ..BiLipConfig::default()
    }
}
