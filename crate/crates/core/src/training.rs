//! Adam, gradient clipping and the training loop.
//!
//! Tasks are generated fresh for every batch. An epoch is a fixed number of
//! batches (`batches_per_epoch`, 100 by default). The batch loss is the mean
//! of per-task negative ELBOs plus `beta` times the bi-Lipschitz penalty;
//! the penalty depends on the weights only, so it is evaluated once per batch.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    AttentionKind, Checkpoint, Dims, DnpOptions, LossParts, Model, ModelConfig, ModelKind, VarianceMode,
};
use crate::numerics::Matrix;
use crate::rng::seed_everything;
use crate::spectral::{exact_extremal_sv, BiLipConfig, SvSolver};
use crate::taskgen::{make_task_batch, TaskGenConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub dims: Dims,
    pub lr: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub solver: SvSolver,
    pub attention: AttentionKind,
    pub normalize_attention: bool,
    pub variance_mode: VarianceMode,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Checkpoint period in epochs (0: only at the end).
    pub eval_every: usize,
    pub seed: u64,
    pub data: TaskGenConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Dnp,
            dims: Dims::default(),
            lr: 1e-3,
            epochs: 200,
            batches_per_epoch: 100,
            batch_size: 50,
            beta: 1.0,
            lambda1: 0.1,
            lambda2: 1.0,
            solver: SvSolver::default(),
            attention: AttentionKind::Laplace,
            normalize_attention: true,
            variance_mode: VarianceMode::LogWeighted,
            clip_norm: Some(10.0),
            eval_every: 10,
            seed: 0,
            data: TaskGenConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.model,
            dims: self.dims,
            dnp: DnpOptions {
                attention: self.attention,
                normalize_attention: self.normalize_attention,
                variance_mode: self.variance_mode,
            },
        }
    }

    pub fn bilip(&self) -> BiLipConfig {
        BiLipConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            solver: self.solver,
        }
    }

    /// Every violated constraint, each prefixed with its field path.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("lr: must be > 0, got {}", self.lr));
        }
        if self.batches_per_epoch == 0 {
            out.push("batches_per_epoch: must be >= 1".into());
        }
        if self.batch_size == 0 {
            out.push("batch_size: must be >= 1".into());
        }
        if !(self.beta >= 0.0) {
            out.push(format!("beta: must be >= 0, got {}", self.beta));
        }
        if let Err(e) = self.bilip().validate() {
            out.push(format!("lambda1/lambda2/solver: {e}"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                out.push(format!("clip_norm: must be > 0, got {c}"));
            }
        }
        if [self.dims.dx, self.dims.dy, self.dims.dh, self.dims.dz, self.dims.du].contains(&0) {
            out.push("dims: every dimension must be >= 1".into());
        }
        if self.dims.dy != 1 {
            out.push("dims.dy: generated tasks have one output".into());
        }
        if self.dims.dx != self.data.x_dim {
            out.push(format!("dims.dx: {} differs from data.x_dim {}", self.dims.dx, self.data.x_dim));
        }
        match self.data.validate() {
            Ok(()) => {}
            Err(Error::Config(m)) => out.push(format!("data.{m}")),
            Err(e) => out.push(format!("data: {e}")),
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// First and second moment estimates for each parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        Self { m, v, step: 0 }
    }

    pub fn for_tensors<'a>(tensors: impl IntoIterator<Item = &'a Matrix>) -> Self {
        Self::new(tensors.into_iter().map(Matrix::shape))
    }
}

/// Bias-corrected Adam update. A non-finite gradient rejects the whole step
/// and leaves parameters and state untouched.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim("adam_step", params.len(), grads.len()));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || g.shape() != m.shape() {
            return Err(Error::dim("adam_step tensor", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient; Adam step rejected".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescale `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    n
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub schema_version: u32,
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl_global: f64,
    pub kl_local: f64,
    pub bilip: f64,
    /// Smallest exact σ_min over regularized layers (NaN without any).
    pub sigma_min_worst: f64,
    /// Largest exact σ_max over regularized layers (NaN without any).
    pub sigma_max_worst: f64,
    pub batches_per_epoch: usize,
    pub clipped_batches: usize,
}

/// Exact extreme singular values over the regularized layers of `model`.
pub fn spectral_extremes(model: &Model) -> Result<(f64, f64)> {
    let mut lo = f64::NAN;
    let mut hi = f64::NAN;
    for net in model.regularized() {
        for l in &net.layers {
            let b = exact_extremal_sv(&l.weight)?;
            lo = if lo.is_nan() { b.sigma_min } else { lo.min(b.sigma_min) };
            hi = if hi.is_nan() { b.sigma_max } else { hi.max(b.sigma_max) };
        }
    }
    Ok((lo, hi))
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Where training writes its artifacts. `None` keeps everything in memory.
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join(TRAIN_LOG_FILE)
    }
}

fn save(out: Option<&TrainOutput>, model: &Model, epoch: usize) -> Result<()> {
    if let Some(o) = out {
        Checkpoint::new(model.clone(), epoch).save(&o.checkpoint())?;
    }
    Ok(())
}

/// Train from scratch. With an output directory, the log is written after
/// every epoch and a checkpoint after the initial state, every `eval_every`
/// epochs and at the end. A non-finite loss aborts with
/// [`Error::NonFinite`]; the last written checkpoint stays in place.
pub fn train(cfg: &TrainConfig, out: Option<&TrainOutput>) -> Result<TrainOutcome> {
    train_with(cfg, out, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(cfg: &TrainConfig, out: Option<&TrainOutput>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let roots = seed_everything(cfg.seed);
    let (mut init_rng, mut data_rng, mut noise_rng) = (roots.init, roots.data, roots.noise);
    let bilip = cfg.bilip();
    let mut model = Model::init(cfg.model_config(), &bilip, &mut init_rng)?;
    let mut adam = AdamState::for_tensors(model.tensors());
    let mut writer = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir)?;
            Some(csv::Writer::from_writer(BufWriter::new(File::create(o.log())?)))
        }
        None => None,
    };
    save(out, &model, 0)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    let regularized = !model.regularized().is_empty() && cfg.beta > 0.0;
    for epoch in 1..=cfg.epochs {
        let mut acc = LossParts::default();
        let mut clipped = 0;
        for _ in 0..cfg.batches_per_epoch {
            let tasks = make_task_batch(&cfg.data, cfg.batch_size, &mut data_rng)?;
            let n = tasks.len() as f64;
            let mut grads: Vec<Matrix> = model.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
            let mut batch = LossParts::default();
            for task in &tasks {
                let (p, g) = model.elbo_and_grad(task, &mut noise_rng)?;
                for (a, b) in grads.iter_mut().zip(&g) {
                    a.axpy(1.0 / n, b);
                }
                batch.total += p.total / n;
                batch.recon += p.recon / n;
                batch.kl_global += p.kl_global / n;
                batch.kl_local += p.kl_local / n;
            }
            if regularized {
                let (pen, g) = model.bilip_and_grad(&bilip, &mut noise_rng)?;
                for (a, b) in grads.iter_mut().zip(&g) {
                    a.axpy(cfg.beta, b);
                }
                batch.bilip = pen;
                batch.total += cfg.beta * pen;
            }
            if !batch.total.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            if let Some(c) = cfg.clip_norm {
                if clip_global_norm(&mut grads, c) > c {
                    clipped += 1;
                }
            }
            let mut params = model.tensors_mut();
            adam_step(&mut adam, &mut params, &grads, cfg.lr)?;
            acc.total += batch.total;
            acc.recon += batch.recon;
            acc.kl_global += batch.kl_global;
            acc.kl_local += batch.kl_local;
            acc.bilip += batch.bilip;
        }
        let b = cfg.batches_per_epoch as f64;
        let (smin, smax) = spectral_extremes(&model)?;
        let row = EpochLog {
            schema_version: crate::metrics::CSV_SCHEMA_VERSION,
            epoch,
            loss: acc.total / b,
            recon: acc.recon / b,
            kl_global: acc.kl_global / b,
            kl_local: acc.kl_local / b,
            bilip: acc.bilip / b,
            sigma_min_worst: smin,
            sigma_max_worst: smax,
            batches_per_epoch: cfg.batches_per_epoch,
            clipped_batches: clipped,
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(&row)?;
            w.flush()?;
        }
        log::info!(
            "epoch {epoch}: loss {:.4} recon {:.4} bilip {:.2e}",
            row.loss,
            row.recon,
            row.bilip
        );
        on_epoch(&row);
        log.push(row);
        if epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0) {
            save(out, &model, epoch)?;
        }
    }
    Ok(TrainOutcome { model, log })
}

pub fn write_config(path: &Path, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), value)?;
    Ok(())
}
