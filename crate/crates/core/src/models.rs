//! Conditional and latent neural processes, plus a variant with distance-aware local latents.
//!
//! All three models share one code path per task: the task is copied into
//! dense blocks, the context is put into a canonical order (lexicographic on
//! the bit patterns of `(x, y)`), and the forward pass is recorded on a
//! [`Tape`]. Training differentiates that tape; prediction reads its values.
//! The canonical order together with the sorted mean in
//! [`Tape::mean_rows`] makes every prediction bit-identical under context
//! permutations.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, BoundMlp, DiagGaussian, Matrix, MlpParams, Tape, Var};
use crate::rng::RngStream;
use crate::spectral::{bilip_loss_on_tape, exact_extremal_sv, BiLipConfig};
use crate::taskgen::{gp_posterior_predict, KernelSpec, Task};

/// Every log-variance head output is clamped to this range.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cnp,
    Np,
    Dnp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cnp => "cnp",
            ModelKind::Np => "np",
            ModelKind::Dnp => "dnp",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnp" => Ok(ModelKind::Cnp),
            "np" => Ok(ModelKind::Np),
            "dnp" => Ok(ModelKind::Dnp),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Scores `−‖u_t − u_c‖ / √d_u`.
    #[default]
    Laplace,
    /// Scores `u_t·u_c / √d_u`.
    Dot,
}

/// How per-context log-variances `s_c` combine into the local prior variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// `Σ_c exp(α_c·s_c)`
    Literal,
    /// `exp(Σ_c α_c·s_c)`
    #[default]
    LogWeighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    pub dx: usize,
    pub dy: usize,
    pub dh: usize,
    pub dz: usize,
    pub du: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            dx: 1,
            dy: 1,
            dh: 64,
            dz: 64,
            du: 64,
        }
    }
}

impl Dims {
    pub fn square(dx: usize, dy: usize, d: usize) -> Self {
        Self {
            dx,
            dy,
            dh: d,
            dz: d,
            du: d,
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.dx, self.dy, self.dh, self.dz, self.du].contains(&0) {
            return Err(Error::Config(format!("all model dimensions must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DnpOptions {
    pub attention: AttentionKind,
    pub normalize_attention: bool,
    pub variance_mode: VarianceMode,
}

impl Default for DnpOptions {
    fn default() -> Self {
        Self {
            attention: AttentionKind::Laplace,
            normalize_attention: true,
            variance_mode: VarianceMode::LogWeighted,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub dims: Dims,
    #[serde(default)]
    pub dnp: DnpOptions,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, dims: Dims) -> Self {
        Self {
            kind,
            dims,
            dnp: DnpOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Prior,
    Posterior,
}

fn mlp(sizes: &[usize], rng: &mut RngStream) -> MlpParams {
    MlpParams::init(sizes, Activation::leaky(), Activation::Identity, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnpParams {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NpParams {
    pub det_encoder: MlpParams,
    pub latent_encoder: MlpParams,
    pub prior_head: MlpParams,
    pub posterior_head: MlpParams,
    pub decoder: MlpParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DnpParams {
    pub global_encoder: MlpParams,
    pub global_prior_head: MlpParams,
    pub global_posterior_head: MlpParams,
    /// Regularized.
    pub local_backbone: MlpParams,
    /// Regularized.
    pub embed_head: MlpParams,
    pub local_param_head: MlpParams,
    pub decoder: MlpParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Net {
    Cnp(CnpParams),
    Np(NpParams),
    Dnp(DnpParams),
}

/// A model: its configuration and parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub net: Net,
}

/// Components of a per-task loss. `total` is the minimized quantity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    /// Mean per-target log-likelihood.
    pub recon: f64,
    pub kl_global: f64,
    /// Mean per-target local KL.
    pub kl_local: f64,
    pub bilip: f64,
}

impl Model {
    /// Fresh parameters. Regularized DNP layers are rescaled so that their
    /// largest singular value does not exceed `bilip.lambda2`.
    pub fn init(config: ModelConfig, bilip: &BiLipConfig, rng: &mut RngStream) -> Result<Self> {
        config.dims.validate()?;
        let Dims { dx, dy, dh, dz, du } = config.dims;
        let net = match config.kind {
            ModelKind::Cnp => Net::Cnp(CnpParams {
                encoder: mlp(&[dx + dy, dh, dh, dz], rng),
                decoder: mlp(&[dz + dx, dh, dh, 2 * dy], rng),
            }),
            ModelKind::Np => Net::Np(NpParams {
                det_encoder: mlp(&[dx + dy, dh, dh, dz], rng),
                latent_encoder: mlp(&[dx + dy, dh, dh, dz], rng),
                prior_head: mlp(&[dz, 2 * dz], rng),
                posterior_head: mlp(&[dz, 2 * dz], rng),
                decoder: mlp(&[2 * dz + dx, dh, dh, 2 * dy], rng),
            }),
            ModelKind::Dnp => {
                let mut p = DnpParams {
                    global_encoder: mlp(&[dx + dy, dh, dh, dh], rng),
                    global_prior_head: mlp(&[dh, 2 * dz], rng),
                    global_posterior_head: mlp(&[dh, 2 * dz], rng),
                    local_backbone: MlpParams::init(&[dx, dh, dh], Activation::leaky(), Activation::leaky(), rng),
                    embed_head: mlp(&[dh, du], rng),
                    local_param_head: mlp(&[dh + dy, 2 * dz], rng),
                    decoder: mlp(&[2 * dz + du, dh, dh, 2 * dy], rng),
                };
                for layer in p.local_backbone.layers.iter_mut().chain(p.embed_head.layers.iter_mut()) {
                    let smax = exact_extremal_sv(&layer.weight)?.sigma_max;
                    if smax > bilip.lambda2 {
                        layer.weight = layer.weight.scale(bilip.lambda2 / smax);
                    }
                }
                Net::Dnp(p)
            }
        };
        Ok(Self { config, net })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn dims(&self) -> Dims {
        self.config.dims
    }

    /// Component networks in a fixed order; gradients follow the same order.
    pub fn mlps(&self) -> Vec<&MlpParams> {
        match &self.net {
            Net::Cnp(p) => vec![&p.encoder, &p.decoder],
            Net::Np(p) => vec![&p.det_encoder, &p.latent_encoder, &p.prior_head, &p.posterior_head, &p.decoder],
            Net::Dnp(p) => vec![
                &p.global_encoder,
                &p.global_prior_head,
                &p.global_posterior_head,
                &p.local_backbone,
                &p.embed_head,
                &p.local_param_head,
                &p.decoder,
            ],
        }
    }

    pub fn mlps_mut(&mut self) -> Vec<&mut MlpParams> {
        match &mut self.net {
            Net::Cnp(p) => vec![&mut p.encoder, &mut p.decoder],
            Net::Np(p) => vec![
                &mut p.det_encoder,
                &mut p.latent_encoder,
                &mut p.prior_head,
                &mut p.posterior_head,
                &mut p.decoder,
            ],
            Net::Dnp(p) => vec![
                &mut p.global_encoder,
                &mut p.global_prior_head,
                &mut p.global_posterior_head,
                &mut p.local_backbone,
                &mut p.embed_head,
                &mut p.local_param_head,
                &mut p.decoder,
            ],
        }
    }

    /// Parameter tensors in gradient order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.mlps().into_iter().flat_map(|m| m.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.mlps_mut().into_iter().flat_map(|m| m.tensors_mut()).collect()
    }

    pub fn n_params(&self) -> usize {
        self.mlps().iter().map(|m| m.n_params()).sum()
    }

    /// Layers under the bi-Lipschitz penalty (empty for the baselines).
    pub fn regularized(&self) -> Vec<&MlpParams> {
        match &self.net {
            Net::Dnp(p) => vec![&p.local_backbone, &p.embed_head],
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.dims.validate()?;
        let kind = match &self.net {
            Net::Cnp(_) => ModelKind::Cnp,
            Net::Np(_) => ModelKind::Np,
            Net::Dnp(_) => ModelKind::Dnp,
        };
        if kind != self.config.kind {
            return Err(Error::Contract("model config and parameters disagree on the kind".into()));
        }
        for m in self.mlps() {
            m.validate()?;
        }
        // Binding a one-point task catches any dimension chain mismatch.
        let Dims { dx, dy, .. } = self.dims();
        let probe = Task {
            x_context: vec![vec![0.0; dx]],
            y_context: vec![vec![0.0; dy]],
            x_target: vec![vec![0.0; dx]],
            y_target: vec![vec![0.0; dy]],
            kernel: None,
        };
        self.elbo(&probe, &mut RngStream::new(0)).map(|_| ())
    }

    fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        let nets: Vec<BoundMlp> = self.mlps().into_iter().map(|m| m.bind(tape)).collect();
        Bound {
            nets,
            cfg: self.config,
        }
    }

    /// Negative ELBO (negative mean log-likelihood for the CNP) on one task,
    /// with one reparameterized latent sample.
    pub fn elbo(&self, task: &Task, rng: &mut RngStream) -> Result<LossParts> {
        let data = TaskData::training(task, self.dims())?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let e = b.elbo(&mut tape, &data, rng)?;
        Ok(e.parts(&tape))
    }

    /// Negative ELBO plus `beta` times the bi-Lipschitz penalty of the
    /// regularized layers.
    pub fn total_loss(&self, task: &Task, bilip: &BiLipConfig, beta: f64, rng: &mut RngStream) -> Result<LossParts> {
        let (parts, _) = self.total_loss_impl(task, bilip, beta, rng, false)?;
        Ok(parts)
    }

    /// [`Model::total_loss`] and its gradient, one matrix per tensor of [`Model::tensors`].
    pub fn total_loss_and_grad(
        &self,
        task: &Task,
        bilip: &BiLipConfig,
        beta: f64,
        rng: &mut RngStream,
    ) -> Result<(LossParts, Vec<Matrix>)> {
        self.total_loss_impl(task, bilip, beta, rng, true)
    }

    /// Negative ELBO and its gradient.
    pub fn elbo_and_grad(&self, task: &Task, rng: &mut RngStream) -> Result<(LossParts, Vec<Matrix>)> {
        let data = TaskData::training(task, self.dims())?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let e = b.elbo(&mut tape, &data, rng)?;
        let g = tape.backward(e.loss)?;
        Ok((e.parts(&tape), g.params()))
    }

    /// Bi-Lipschitz penalty over the regularized layers and its gradient,
    /// aligned with [`Model::tensors`].
    pub fn bilip_and_grad(&self, bilip: &BiLipConfig, rng: &mut RngStream) -> Result<(f64, Vec<Matrix>)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let weights = b.regularized_weights();
        match bilip_loss_on_tape(&mut tape, &weights, bilip, rng)? {
            Some(root) => {
                let g = tape.backward(root)?;
                Ok((tape.scalar(root), g.params()))
            }
            None => Ok((0.0, self.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect())),
        }
    }

    fn total_loss_impl(
        &self,
        task: &Task,
        bilip: &BiLipConfig,
        beta: f64,
        rng: &mut RngStream,
        grad: bool,
    ) -> Result<(LossParts, Vec<Matrix>)> {
        if !(beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
        }
        let data = TaskData::training(task, self.dims())?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let e = b.elbo(&mut tape, &data, rng)?;
        let mut parts = e.parts(&tape);
        let mut root = e.loss;
        let weights = b.regularized_weights();
        if let Some(pen) = bilip_loss_on_tape(&mut tape, &weights, bilip, rng)? {
            parts.bilip = tape.scalar(pen);
            let scaled = tape.scale(pen, beta);
            root = tape.add(root, scaled)?;
            parts.total = tape.scalar(root);
        }
        let grads = if grad { tape.backward(root)?.params() } else { Vec::new() };
        Ok((parts, grads))
    }

    /// Posterior predictive at `x_star` given the task context: `samples`
    /// joint latent draws from the prior networks, each decoded into one
    /// Gaussian per target. The CNP has no latents and yields one component.
    pub fn predict(
        &self,
        x_context: &[Vec<f64>],
        y_context: &[Vec<f64>],
        x_star: &[Vec<f64>],
        samples: usize,
        rng: &mut RngStream,
    ) -> Result<PredictiveSet> {
        let noise = PredictNoise::draw(self, x_star.len(), samples, rng)?;
        self.predict_with_noise(x_context, y_context, x_star, &noise)
    }

    /// [`Model::predict`] with explicit standard-normal latent noise.
    pub fn predict_with_noise(
        &self,
        x_context: &[Vec<f64>],
        y_context: &[Vec<f64>],
        x_star: &[Vec<f64>],
        noise: &PredictNoise,
    ) -> Result<PredictiveSet> {
        let dims = self.dims();
        let (xc, yc) = context_blocks(x_context, y_context, dims)?;
        let xt = stack(x_star, dims.dx, "x_star")?;
        let n = xt.rows();
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let xcv = tape.constant(xc);
        let ycv = tape.constant(yc);
        let xtv = tape.constant(xt);
        match self.kind() {
            ModelKind::Cnp => {
                let r = b.cnp_repr(&mut tape, xcv, ycv)?;
                let (m, lv) = b.cnp_decode(&mut tape, r, xtv)?;
                Ok(PredictiveSet::from_blocks(tape.value(m), tape.value(lv), n, 1))
            }
            ModelKind::Np => {
                noise.check(n, dims.dz, false)?;
                let (mp, lp) = b.np_latent(&mut tape, xcv, ycv, Head::Prior)?;
                let r = b.np_det(&mut tape, xcv, ycv)?;
                let s = noise.samples();
                let rows = stack_samples(&noise.global, &tape.value(mp).clone(), &tape.value(lp).clone());
                // One decoder pass over all `S·N` rows.
                let zg = tape.constant(repeat_rows(&rows, n));
                let rr = tape.broadcast_rows(r, s * n)?;
                let xs = tape.constant(tile(tape.value(xtv), s));
                let (m, lv) = b.np_decode_rows(&mut tape, zg, rr, xs)?;
                Ok(PredictiveSet::from_blocks(tape.value(m), tape.value(lv), n, s))
            }
            ModelKind::Dnp => {
                noise.check(n, dims.dz, true)?;
                let (mg, lg) = b.dnp_global(&mut tape, xcv, ycv, Head::Prior)?;
                let (hc, uc) = b.dnp_local_features(&mut tape, xcv)?;
                let (_, ut) = b.dnp_local_features(&mut tape, xtv)?;
                let (mc, sc) = b.dnp_local_params(&mut tape, hc, ycv)?;
                let alpha = b.dnp_attention(&mut tape, ut, uc)?;
                let (mp, lp) = b.dnp_local_prior(&mut tape, alpha, mc, sc)?;
                let s = noise.samples();
                let zg_rows = stack_samples(&noise.global, &tape.value(mg).clone(), &tape.value(lg).clone());
                let (mpv, lpv) = (tape.value(mp).clone(), tape.value(lp).clone());
                let sd = lpv.map(|v| (0.5 * v).exp());
                let mut zt = Matrix::zeros(s * n, dims.dz);
                for (k, eps) in noise.local.iter().enumerate() {
                    for i in 0..n {
                        let row = zt.row_mut(k * n + i);
                        for j in 0..dims.dz {
                            row[j] = mpv.get(i, j) + sd.get(i, j) * eps.get(i, j);
                        }
                    }
                }
                let zg = tape.constant(repeat_rows(&zg_rows, n));
                let ztv = tape.constant(zt);
                let us = tape.constant(tile(tape.value(ut), s));
                let (m, lv) = b.dnp_decode(&mut tape, zg, ztv, us)?;
                Ok(PredictiveSet::from_blocks(tape.value(m), tape.value(lv), n, s))
            }
        }
    }
}

/// `z = mean + exp(lv/2)·ε` for each row of `eps`, from a `1×d` Gaussian.
fn stack_samples(eps: &[Vec<f64>], mean: &Matrix, log_var: &Matrix) -> Matrix {
    Matrix::from_fn(eps.len(), mean.cols(), |s, j| {
        mean.get(0, j) + (0.5 * log_var.get(0, j)).exp() * eps[s][j]
    })
}

/// Each row of `m` repeated `n` times consecutively.
fn repeat_rows(m: &Matrix, n: usize) -> Matrix {
    Matrix::from_fn(m.rows() * n, m.cols(), |i, j| m.get(i / n, j))
}

/// `m` stacked `s` times.
fn tile(m: &Matrix, s: usize) -> Matrix {
    let r = m.rows();
    Matrix::from_fn(r * s, m.cols(), |i, j| m.get(i % r, j))
}

/// Standard-normal noise for a prediction: one global draw per sample and,
/// for the DNP, one `N×d_z` local block per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictNoise {
    pub global: Vec<Vec<f64>>,
    pub local: Vec<Matrix>,
}

impl PredictNoise {
    pub fn draw(model: &Model, n_targets: usize, samples: usize, rng: &mut RngStream) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Contract("prediction needs at least one sample".into()));
        }
        let dz = model.dims().dz;
        let (global, local) = match model.kind() {
            ModelKind::Cnp => (Vec::new(), Vec::new()),
            ModelKind::Np => ((0..samples).map(|_| rng.normal_vec(dz)).collect(), Vec::new()),
            ModelKind::Dnp => {
                let mut g = Vec::with_capacity(samples);
                let mut l = Vec::with_capacity(samples);
                for _ in 0..samples {
                    g.push(rng.normal_vec(dz));
                    l.push(Matrix::from_fn(n_targets, dz, |_, _| rng.standard_normal()));
                }
                (g, l)
            }
        };
        Ok(Self { global, local })
    }

    pub fn samples(&self) -> usize {
        self.global.len()
    }

    /// Keep only the local noise rows of the listed targets.
    pub fn select_targets(&self, idx: &[usize]) -> Self {
        Self {
            global: self.global.clone(),
            local: self
                .local
                .iter()
                .map(|m| Matrix::from_fn(idx.len(), m.cols(), |i, j| m.get(idx[i], j)))
                .collect(),
        }
    }

    fn check(&self, n: usize, dz: usize, local: bool) -> Result<()> {
        if self.global.is_empty() || self.global.iter().any(|g| g.len() != dz) {
            return Err(Error::Contract(format!("global noise must be S×{dz} with S >= 1")));
        }
        if local
            && (self.local.len() != self.global.len() || self.local.iter().any(|m| m.shape() != (n, dz)))
        {
            return Err(Error::Contract(format!("local noise must be S blocks of {n}×{dz}")));
        }
        Ok(())
    }
}

/// Per-target sets of `S` predictive Gaussians over `y`, stored flat as
/// `[point][sample][dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSet {
    n_points: usize,
    samples: usize,
    dy: usize,
    means: Vec<f64>,
    log_vars: Vec<f64>,
}

impl PredictiveSet {
    pub fn new(n_points: usize, samples: usize, dy: usize, means: Vec<f64>, log_vars: Vec<f64>) -> Result<Self> {
        let len = n_points * samples * dy;
        if samples == 0 || means.len() != len || log_vars.len() != len {
            return Err(Error::dim("PredictiveSet::new", len, means.len()));
        }
        if means.iter().chain(&log_vars).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predictive parameter".into()));
        }
        Ok(Self {
            n_points,
            samples,
            dy,
            means,
            log_vars,
        })
    }

    /// One component per point from per-point Gaussians.
    pub fn from_gaussians(gs: &[DiagGaussian]) -> Result<Self> {
        let dy = gs.first().map_or(0, DiagGaussian::dim);
        let means = gs.iter().flat_map(|g| g.mean.iter().copied()).collect();
        let log_vars = gs.iter().flat_map(|g| g.log_var.iter().copied()).collect();
        Self::new(gs.len(), 1, dy, means, log_vars)
    }

    /// From `(S·N)×dy` blocks whose row `s·N + i` holds sample `s` of point `i`.
    fn from_blocks(m: &Matrix, lv: &Matrix, n: usize, s: usize) -> Self {
        let dy = m.cols();
        let mut means = Vec::with_capacity(n * s * dy);
        let mut log_vars = Vec::with_capacity(n * s * dy);
        for i in 0..n {
            for k in 0..s {
                means.extend_from_slice(m.row(k * n + i));
                log_vars.extend_from_slice(lv.row(k * n + i));
            }
        }
        Self {
            n_points: n,
            samples: s,
            dy,
            means,
            log_vars,
        }
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn y_dim(&self) -> usize {
        self.dy
    }

    /// Mean and log-variance of component `s` at point `i`.
    pub fn component(&self, i: usize, s: usize) -> (&[f64], &[f64]) {
        let at = (i * self.samples + s) * self.dy;
        (&self.means[at..at + self.dy], &self.log_vars[at..at + self.dy])
    }

    /// Keep the listed points.
    pub fn select(&self, idx: &[usize]) -> Self {
        let w = self.samples * self.dy;
        let pick = |v: &[f64]| idx.iter().flat_map(|&i| v[i * w..(i + 1) * w].iter().copied()).collect();
        Self {
            n_points: idx.len(),
            samples: self.samples,
            dy: self.dy,
            means: pick(&self.means),
            log_vars: pick(&self.log_vars),
        }
    }

    /// Mixture mean of point `i`, output dimension `d`.
    pub fn mixture_mean(&self, i: usize, d: usize) -> f64 {
        (0..self.samples).map(|s| self.component(i, s).0[d]).sum::<f64>() / self.samples as f64
    }

    /// Mixture variance of point `i`, output dimension `d`.
    pub fn mixture_variance(&self, i: usize, d: usize) -> f64 {
        let mu = self.mixture_mean(i, d);
        (0..self.samples)
            .map(|s| {
                let (m, lv) = self.component(i, s);
                lv[d].exp() + (m[d] - mu).powi(2)
            })
            .sum::<f64>()
            / self.samples as f64
    }
}

/// Anything that produces a [`PredictiveSet`] for a task.
pub trait Predictor {
    fn name(&self) -> String;

    fn predict_task(&self, task: &Task, x_star: &[Vec<f64>], samples: usize, rng: &mut RngStream) -> Result<PredictiveSet>;
}

impl Predictor for Model {
    fn name(&self) -> String {
        self.kind().name().to_string()
    }

    fn predict_task(&self, task: &Task, x_star: &[Vec<f64>], samples: usize, rng: &mut RngStream) -> Result<PredictiveSet> {
        self.predict(&task.x_context, &task.y_context, x_star, samples, rng)
    }
}

/// Exact GP regression. Uses `kernel` when given, else each task's own
/// generating kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ExactGp {
    pub kernel: Option<KernelSpec>,
}

impl Predictor for ExactGp {
    fn name(&self) -> String {
        "exact-gp".into()
    }

    fn predict_task(&self, task: &Task, x_star: &[Vec<f64>], _samples: usize, _rng: &mut RngStream) -> Result<PredictiveSet> {
        let k = self
            .kernel
            .or(task.kernel)
            .ok_or_else(|| Error::Contract("exact GP needs a kernel; the task carries none".into()))?;
        PredictiveSet::from_gaussians(&gp_posterior_predict(&k, task, x_star)?)
    }
}

fn stack(rows: &[Vec<f64>], cols: usize, what: &str) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        if r.len() != cols {
            return Err(Error::Dimension {
                op: "task blocks",
                left: format!("{what} dim {cols}"),
                right: r.len().to_string(),
            });
        }
        data.extend_from_slice(r);
    }
    Matrix::new(rows.len(), cols, data)
}

fn cmp_bits(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Context blocks in canonical order.
fn context_blocks(xs: &[Vec<f64>], ys: &[Vec<f64>], dims: Dims) -> Result<(Matrix, Matrix)> {
    if xs.is_empty() {
        return Err(Error::Contract("empty context set".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::dim("context", xs.len(), ys.len()));
    }
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| cmp_bits(&xs[a], &xs[b]).then_with(|| cmp_bits(&ys[a], &ys[b])));
    let xo: Vec<Vec<f64>> = idx.iter().map(|&i| xs[i].clone()).collect();
    let yo: Vec<Vec<f64>> = idx.iter().map(|&i| ys[i].clone()).collect();
    Ok((stack(&xo, dims.dx, "x")?, stack(&yo, dims.dy, "y")?))
}

struct TaskData {
    xc: Matrix,
    yc: Matrix,
    xt: Matrix,
    yt: Matrix,
}

impl TaskData {
    fn training(task: &Task, dims: Dims) -> Result<Self> {
        let (xc, yc) = context_blocks(&task.x_context, &task.y_context, dims)?;
        if task.x_target.is_empty() {
            return Err(Error::Contract("task without targets".into()));
        }
        if task.x_target.len() != task.y_target.len() {
            return Err(Error::dim("targets", task.x_target.len(), task.y_target.len()));
        }
        Ok(Self {
            xc,
            yc,
            xt: stack(&task.x_target, dims.dx, "x")?,
            yt: stack(&task.y_target, dims.dy, "y")?,
        })
    }
}

struct ElboVars {
    loss: Var,
    recon: Var,
    kl_global: Option<Var>,
    kl_local: Option<Var>,
}

impl ElboVars {
    fn parts(&self, tape: &Tape<'_>) -> LossParts {
        LossParts {
            total: tape.scalar(self.loss),
            recon: tape.scalar(self.recon),
            kl_global: self.kl_global.map_or(0.0, |v| tape.scalar(v)),
            kl_local: self.kl_local.map_or(0.0, |v| tape.scalar(v)),
            bilip: 0.0,
        }
    }
}

/// Tape handles of a model, in [`Model::mlps`] order.
struct Bound {
    nets: Vec<BoundMlp>,
    cfg: ModelConfig,
}

fn split_gaussian(tape: &mut Tape<'_>, out: Var, d: usize) -> Result<(Var, Var)> {
    let mean = tape.slice_cols(out, 0, d)?;
    let lv = tape.slice_cols(out, d, 2 * d)?;
    Ok((mean, tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)))
}

fn reparam(tape: &mut Tape<'_>, mean: Var, log_var: Var, eps: Matrix) -> Result<Var> {
    let half = tape.scale(log_var, 0.5);
    let sd = tape.exp(half);
    let e = tape.constant(eps);
    let noise = tape.mul(sd, e)?;
    tape.add(mean, noise)
}

fn encode_mean(tape: &mut Tape<'_>, enc: &BoundMlp, x: Var, y: Var) -> Result<Var> {
    let xy = tape.concat_cols(&[x, y])?;
    let h = enc.forward(tape, xy)?;
    tape.mean_rows(h)
}

/// Attention weights (`N×M`) of target embeddings `ut` over context
/// embeddings `uc`.
pub(crate) fn attention_on_tape(
    tape: &mut Tape<'_>,
    ut: Var,
    uc: Var,
    kind: AttentionKind,
    normalize: bool,
) -> Result<Var> {
    let du = tape.value(ut).cols() as f64;
    let scores = match kind {
        AttentionKind::Laplace => {
            let d = tape.pairwise_dist(ut, uc)?;
            tape.scale(d, -1.0 / du.sqrt())
        }
        AttentionKind::Dot => {
            let p = tape.matmul_t(ut, uc)?;
            tape.scale(p, 1.0 / du.sqrt())
        }
    };
    Ok(if normalize {
        tape.softmax_rows(scores)
    } else {
        tape.exp(scores)
    })
}

fn local_prior_on_tape(tape: &mut Tape<'_>, alpha: Var, mu: Var, s: Var, mode: VarianceMode) -> Result<(Var, Var)> {
    let mean = tape.matmul(alpha, mu)?;
    let lv = match mode {
        VarianceMode::LogWeighted => tape.matmul(alpha, s)?,
        VarianceMode::Literal => tape.log_sum_exp_mix(alpha, s)?,
    };
    Ok((mean, lv))
}

impl Bound {
    fn dims(&self) -> Dims {
        self.cfg.dims
    }

    fn regularized_weights(&self) -> Vec<Var> {
        match self.cfg.kind {
            ModelKind::Dnp => self.nets[3].weight_vars().chain(self.nets[4].weight_vars()).collect(),
            _ => Vec::new(),
        }
    }

    fn elbo(&self, tape: &mut Tape<'_>, d: &TaskData, rng: &mut RngStream) -> Result<ElboVars> {
        let n = d.xt.rows() as f64;
        let dz = self.dims().dz;
        let xc = tape.constant(d.xc.clone());
        let yc = tape.constant(d.yc.clone());
        let xt = tape.constant(d.xt.clone());
        let yt = tape.constant(d.yt.clone());
        let (mean, lv, kl_global, kl_local) = match self.cfg.kind {
            ModelKind::Cnp => {
                let r = self.cnp_repr(tape, xc, yc)?;
                let (m, lv) = self.cnp_decode(tape, r, xt)?;
                (m, lv, None, None)
            }
            ModelKind::Np => {
                let (mp, lp) = self.np_latent(tape, xc, yc, Head::Prior)?;
                let (mq, lq) = self.np_latent(tape, xt, yt, Head::Posterior)?;
                let zg = reparam(tape, mq, lq, Matrix::row_vector(&rng.normal_vec(dz)))?;
                let r = self.np_det(tape, xc, yc)?;
                let rows = d.xt.rows();
                let zgr = tape.broadcast_rows(zg, rows)?;
                let rr = tape.broadcast_rows(r, rows)?;
                let (m, lv) = self.np_decode_rows(tape, zgr, rr, xt)?;
                let kl = tape.kl_diag(mq, lq, mp, lp)?;
                (m, lv, Some(kl), None)
            }
            ModelKind::Dnp => {
                let (mp, lp) = self.dnp_global(tape, xc, yc, Head::Prior)?;
                let (mq, lq) = self.dnp_global(tape, xt, yt, Head::Posterior)?;
                let zg = reparam(tape, mq, lq, Matrix::row_vector(&rng.normal_vec(dz)))?;
                let (hc, uc) = self.dnp_local_features(tape, xc)?;
                let (ht, ut) = self.dnp_local_features(tape, xt)?;
                let (mc, sc) = self.dnp_local_params(tape, hc, yc)?;
                let (mtq, ltq) = self.dnp_local_params(tape, ht, yt)?;
                let alpha = self.dnp_attention(tape, ut, uc)?;
                let (mtp, ltp) = self.dnp_local_prior(tape, alpha, mc, sc)?;
                let eps = Matrix::from_fn(d.xt.rows(), dz, |_, _| rng.standard_normal());
                let zt = reparam(tape, mtq, ltq, eps)?;
                let zgr = tape.broadcast_rows(zg, d.xt.rows())?;
                let (m, lv) = self.dnp_decode(tape, zgr, zt, ut)?;
                let klg = tape.kl_diag(mq, lq, mp, lp)?;
                let kll = tape.kl_diag(mtq, ltq, mtp, ltp)?;
                (m, lv, Some(klg), Some(tape.scale(kll, 1.0 / n)))
            }
        };
        let ll = tape.gaussian_log_prob(yt, mean, lv)?;
        let recon = tape.scale(ll, 1.0 / n);
        let mut loss = tape.scale(recon, -1.0);
        for kl in [kl_global, kl_local].into_iter().flatten() {
            loss = tape.add(loss, kl)?;
        }
        Ok(ElboVars {
            loss,
            recon,
            kl_global,
            kl_local,
        })
    }

    fn cnp_repr(&self, tape: &mut Tape<'_>, x: Var, y: Var) -> Result<Var> {
        encode_mean(tape, &self.nets[0], x, y)
    }

    fn cnp_decode(&self, tape: &mut Tape<'_>, r: Var, xt: Var) -> Result<(Var, Var)> {
        let rows = tape.value(xt).rows();
        let rr = tape.broadcast_rows(r, rows)?;
        let input = tape.concat_cols(&[rr, xt])?;
        let out = self.nets[1].forward(tape, input)?;
        split_gaussian(tape, out, self.dims().dy)
    }

    fn np_det(&self, tape: &mut Tape<'_>, x: Var, y: Var) -> Result<Var> {
        encode_mean(tape, &self.nets[0], x, y)
    }

    fn np_latent(&self, tape: &mut Tape<'_>, x: Var, y: Var, head: Head) -> Result<(Var, Var)> {
        let s = encode_mean(tape, &self.nets[1], x, y)?;
        let h = match head {
            Head::Prior => &self.nets[2],
            Head::Posterior => &self.nets[3],
        };
        let out = h.forward(tape, s)?;
        split_gaussian(tape, out, self.dims().dz)
    }

    fn np_decode_rows(&self, tape: &mut Tape<'_>, zg: Var, r: Var, xt: Var) -> Result<(Var, Var)> {
        let input = tape.concat_cols(&[zg, r, xt])?;
        let out = self.nets[4].forward(tape, input)?;
        split_gaussian(tape, out, self.dims().dy)
    }

    fn dnp_global(&self, tape: &mut Tape<'_>, x: Var, y: Var, head: Head) -> Result<(Var, Var)> {
        let s = encode_mean(tape, &self.nets[0], x, y)?;
        let h = match head {
            Head::Prior => &self.nets[1],
            Head::Posterior => &self.nets[2],
        };
        let out = h.forward(tape, s)?;
        split_gaussian(tape, out, self.dims().dz)
    }

    /// Backbone features and embeddings.
    fn dnp_local_features(&self, tape: &mut Tape<'_>, x: Var) -> Result<(Var, Var)> {
        let h = self.nets[3].forward(tape, x)?;
        let u = self.nets[4].forward(tape, h)?;
        Ok((h, u))
    }

    fn dnp_local_params(&self, tape: &mut Tape<'_>, h: Var, y: Var) -> Result<(Var, Var)> {
        let hy = tape.concat_cols(&[h, y])?;
        let out = self.nets[5].forward(tape, hy)?;
        split_gaussian(tape, out, self.dims().dz)
    }

    fn dnp_attention(&self, tape: &mut Tape<'_>, ut: Var, uc: Var) -> Result<Var> {
        let o = self.cfg.dnp;
        attention_on_tape(tape, ut, uc, o.attention, o.normalize_attention)
    }

    fn dnp_local_prior(&self, tape: &mut Tape<'_>, alpha: Var, mu: Var, s: Var) -> Result<(Var, Var)> {
        local_prior_on_tape(tape, alpha, mu, s, self.cfg.dnp.variance_mode)
    }

    fn dnp_decode(&self, tape: &mut Tape<'_>, zg: Var, zt: Var, ut: Var) -> Result<(Var, Var)> {
        let input = tape.concat_cols(&[zg, zt, ut])?;
        let out = self.nets[6].forward(tape, input)?;
        split_gaussian(tape, out, self.dims().dy)
    }
}

fn row_gaussian(tape: &Tape<'_>, mean: Var, lv: Var, i: usize) -> Result<DiagGaussian> {
    DiagGaussian::new(tape.value(mean).row(i).to_vec(), tape.value(lv).row(i).to_vec())
}

fn rows_of(tape: &Tape<'_>, v: Var) -> Vec<Vec<f64>> {
    let m = tape.value(v);
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Single-purpose DNP operations on plain values.
impl Model {
    fn dnp_only(&self) -> Result<()> {
        match self.kind() {
            ModelKind::Dnp => Ok(()),
            k => Err(Error::Contract(format!("operation defined for dnp, model is {}", k.name()))),
        }
    }

    /// Global latent Gaussian from a set of pairs (prior head for the context,
    /// posterior head for the targets). Also available for the NP latent path.
    pub fn encode_global(&self, xs: &[Vec<f64>], ys: &[Vec<f64>], head: Head) -> Result<DiagGaussian> {
        let (x, y) = context_blocks(xs, ys, self.dims())?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let (xv, yv) = (tape.constant(x), tape.constant(y));
        let (m, lv) = match self.kind() {
            ModelKind::Dnp => b.dnp_global(&mut tape, xv, yv, head)?,
            ModelKind::Np => b.np_latent(&mut tape, xv, yv, head)?,
            ModelKind::Cnp => return Err(Error::Contract("the cnp has no global latent".into())),
        };
        row_gaussian(&tape, m, lv, 0)
    }

    /// Deterministic context summary of the CNP.
    pub fn cnp_representation(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (x, y) = context_blocks(xs, ys, self.dims())?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let (xv, yv) = (tape.constant(x), tape.constant(y));
        let r = match self.kind() {
            ModelKind::Cnp => b.cnp_repr(&mut tape, xv, yv)?,
            ModelKind::Np => b.np_det(&mut tape, xv, yv)?,
            ModelKind::Dnp => return Err(Error::Contract("the dnp has no deterministic path".into())),
        };
        Ok(tape.value(r).row(0).to_vec())
    }

    /// `u = embed_head(local_backbone(x))` for each input.
    pub fn embed_inputs(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.dnp_only()?;
        let x = stack(xs, self.dims().dx, "x")?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let xv = tape.constant(x);
        let (_, u) = b.dnp_local_features(&mut tape, xv)?;
        Ok(rows_of(&tape, u))
    }

    /// Embedding map of a single input, as used by distortion diagnostics.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.embed_inputs(&[x.to_vec()])?.remove(0))
    }

    /// Per-point Gaussian from the shared local head (posterior for targets,
    /// per-context parameters for context points).
    pub fn local_posterior(&self, x_t: &[f64], y_t: &[f64]) -> Result<DiagGaussian> {
        self.dnp_only()?;
        let dims = self.dims();
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let x = tape.constant(stack(&[x_t.to_vec()], dims.dx, "x")?);
        let y = tape.constant(stack(&[y_t.to_vec()], dims.dy, "y")?);
        let (h, _) = b.dnp_local_features(&mut tape, x)?;
        let (m, lv) = b.dnp_local_params(&mut tape, h, y)?;
        row_gaussian(&tape, m, lv, 0)
    }

    /// Local prior at each `x_star` given the context, under the model's
    /// attention and variance options.
    pub fn local_prior(&self, x_context: &[Vec<f64>], y_context: &[Vec<f64>], x_star: &[Vec<f64>]) -> Result<Vec<DiagGaussian>> {
        self.dnp_only()?;
        let dims = self.dims();
        let (xc, yc) = context_blocks(x_context, y_context, dims)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let (xcv, ycv) = (tape.constant(xc), tape.constant(yc));
        let xt = tape.constant(stack(x_star, dims.dx, "x")?);
        let (hc, uc) = b.dnp_local_features(&mut tape, xcv)?;
        let (_, ut) = b.dnp_local_features(&mut tape, xt)?;
        let (mc, sc) = b.dnp_local_params(&mut tape, hc, ycv)?;
        let alpha = b.dnp_attention(&mut tape, ut, uc)?;
        let (m, lv) = b.dnp_local_prior(&mut tape, alpha, mc, sc)?;
        (0..x_star.len()).map(|i| row_gaussian(&tape, m, lv, i)).collect()
    }

    /// Decoder output for one `(z_G, z_t, u_t)` triple.
    pub fn decode(&self, z_g: &[f64], z_t: &[f64], u_t: &[f64]) -> Result<DiagGaussian> {
        self.dnp_only()?;
        let d = self.dims();
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let zg = tape.constant(stack(&[z_g.to_vec()], d.dz, "z_G")?);
        let zt = tape.constant(stack(&[z_t.to_vec()], d.dz, "z_t")?);
        let ut = tape.constant(stack(&[u_t.to_vec()], d.du, "u_t")?);
        let (m, lv) = b.dnp_decode(&mut tape, zg, zt, ut)?;
        row_gaussian(&tape, m, lv, 0)
    }
}

/// Attention weights of one target embedding over context embeddings.
pub fn attention_weights(
    u_t: &[f64],
    u_context: &[Vec<f64>],
    kind: AttentionKind,
    normalize: bool,
) -> Result<Vec<f64>> {
    if u_context.is_empty() {
        return Err(Error::Contract("attention over an empty context".into()));
    }
    let mut tape = Tape::new();
    let ut = tape.constant(stack(&[u_t.to_vec()], u_t.len(), "u_t")?);
    let uc = tape.constant(stack(u_context, u_t.len(), "u_c")?);
    let a = attention_on_tape(&mut tape, ut, uc, kind, normalize)?;
    Ok(tape.value(a).row(0).to_vec())
}

/// Softmax (or plain exponential when `normalize` is off) over
/// `−‖u_t − u_c‖/√d_u`.
pub fn laplace_attention(u_t: &[f64], u_context: &[Vec<f64>], normalize: bool) -> Result<Vec<f64>> {
    attention_weights(u_t, u_context, AttentionKind::Laplace, normalize)
}

/// Local prior Gaussian from attention weights and per-context parameters.
pub fn local_prior(
    weights: &[f64],
    context_mu: &[Vec<f64>],
    context_logvar: &[Vec<f64>],
    mode: VarianceMode,
) -> Result<DiagGaussian> {
    if weights.len() != context_mu.len() || weights.len() != context_logvar.len() {
        return Err(Error::dim("local_prior", weights.len(), context_mu.len()));
    }
    let dz = context_mu.first().map_or(0, Vec::len);
    let mut tape = Tape::new();
    let w = tape.constant(Matrix::new(1, weights.len(), weights.to_vec())?);
    let mu = tape.constant(stack(context_mu, dz, "mu")?);
    let s = tape.constant(stack(context_logvar, dz, "log_var")?);
    let (m, lv) = local_prior_on_tape(&mut tape, w, mu, s, mode)?;
    row_gaussian(&tape, m, lv, 0)
}

/// Serialized model with a format version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Completed training epochs.
    pub epoch: usize,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, epoch: usize) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            epoch,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        {
            let w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(w, self)?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                ck.format_version
            )));
        }
        ck.model.validate()?;
        Ok(ck)
    }
}
