//! Regression tasks sampled from Gaussian-process priors, and the exact GP
//! posterior used as a reference model.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cholesky, dot, euclidean_distance, solve_lower, DiagGaussian, Matrix};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    Matern52,
    Periodic,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 3] = [KernelFamily::Rbf, KernelFamily::Matern52, KernelFamily::Periodic];

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Matern52 => "matern52",
            KernelFamily::Periodic => "periodic",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(KernelFamily::Rbf),
            "matern52" => Ok(KernelFamily::Matern52),
            "periodic" => Ok(KernelFamily::Periodic),
            other => Err(Error::Config(format!("unknown kernel family `{other}`"))),
        }
    }
}

/// Stationary kernel with observation noise. `outputscale` is the variance at
/// zero distance; `noise` is a standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub outputscale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<f64>,
    pub noise: f64,
}

impl KernelSpec {
    pub fn rbf(lengthscale: f64, outputscale: f64, noise: f64) -> Self {
        Self {
            family: KernelFamily::Rbf,
            lengthscale,
            outputscale,
            period: None,
            noise,
        }
    }

    pub fn matern52(lengthscale: f64, outputscale: f64, noise: f64) -> Self {
        Self {
            family: KernelFamily::Matern52,
            ..Self::rbf(lengthscale, outputscale, noise)
        }
    }

    pub fn periodic(lengthscale: f64, outputscale: f64, period: f64, noise: f64) -> Self {
        Self {
            family: KernelFamily::Periodic,
            period: Some(period),
            ..Self::rbf(lengthscale, outputscale, noise)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.outputscale > 0.0) {
            return Err(Error::Config(format!(
                "kernel lengthscale/outputscale must be positive, got {}/{}",
                self.lengthscale, self.outputscale
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("kernel noise must be >= 0, got {}", self.noise)));
        }
        match (self.family, self.period) {
            (KernelFamily::Periodic, Some(p)) if p > 0.0 => Ok(()),
            (KernelFamily::Periodic, _) => Err(Error::Config("periodic kernel needs a positive period".into())),
            (_, None) => Ok(()),
            (_, Some(_)) => Err(Error::Config(format!(
                "period given for non-periodic kernel {}",
                self.family.name()
            ))),
        }
    }
}

/// Kernel value between two inputs (noise excluded).
pub fn kernel_eval(k: &KernelSpec, x1: &[f64], x2: &[f64]) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::dim("kernel_eval", x1.len(), x2.len()));
    }
    Ok(kernel_at(k, x1, x2))
}

/// Stationary kernels use `r = ‖x1 − x2‖`. The periodic kernel sums
/// `sin²(π|Δ_d|/p)` over input dimensions, which is the usual form in 1D and
/// stays positive semi-definite in higher dimensions.
fn kernel_at(k: &KernelSpec, x1: &[f64], x2: &[f64]) -> f64 {
    let (l, s2) = (k.lengthscale, k.outputscale);
    match k.family {
        KernelFamily::Rbf => {
            let r = euclidean_distance(x1, x2);
            s2 * (-r * r / (2.0 * l * l)).exp()
        }
        KernelFamily::Matern52 => {
            let a = 5f64.sqrt() * euclidean_distance(x1, x2) / l;
            s2 * (1.0 + a + a * a / 3.0) * (-a).exp()
        }
        KernelFamily::Periodic => {
            let p = k.period.unwrap_or(1.0);
            let ss: f64 = x1.iter().zip(x2).map(|(a, b)| (PI * (a - b).abs() / p).sin().powi(2)).sum();
            s2 * (-2.0 * ss / (l * l)).exp()
        }
    }
}

/// Cross-covariance `K(a, b)`.
pub fn kernel_matrix(k: &KernelSpec, a: &[Vec<f64>], b: &[Vec<f64>]) -> Matrix {
    Matrix::from_fn(a.len(), b.len(), |i, j| kernel_at(k, &a[i], &b[j]))
}

/// One draw from `N(0, K + noise²·I)` at the given inputs.
pub fn sample_gp_function(k: &KernelSpec, xs: &[Vec<f64>], rng: &mut RngStream) -> Result<Vec<f64>> {
    let mut cov = kernel_matrix(k, xs, xs);
    for i in 0..xs.len() {
        cov.set(i, i, cov.get(i, i) + k.noise * k.noise);
    }
    let l = cholesky(&cov)?;
    let e = rng.normal_vec(xs.len());
    Ok((0..xs.len()).map(|i| dot(&l.row(i)[..=i], &e[..=i])).collect())
}

/// One regression problem. Targets contain every point, context included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub x_context: Vec<Vec<f64>>,
    pub y_context: Vec<Vec<f64>>,
    pub x_target: Vec<Vec<f64>>,
    pub y_target: Vec<Vec<f64>>,
    /// Generating kernel, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSpec>,
}

impl Task {
    pub fn n_context(&self) -> usize {
        self.x_context.len()
    }

    pub fn n_target(&self) -> usize {
        self.x_target.len()
    }

    pub fn x_dim(&self) -> usize {
        self.x_target.first().map_or(0, Vec::len)
    }

    pub fn y_dim(&self) -> usize {
        self.y_target.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_context.len() != self.y_context.len() || self.x_target.len() != self.y_target.len() {
            return Err(Error::Contract("task x/y lengths differ".into()));
        }
        if self.x_target.is_empty() {
            return Err(Error::Contract("task without targets".into()));
        }
        let (dx, dy) = (self.x_dim(), self.y_dim());
        let xs = self.x_context.iter().chain(&self.x_target);
        let ys = self.y_context.iter().chain(&self.y_target);
        if xs.clone().any(|x| x.len() != dx) || ys.clone().any(|y| y.len() != dy) {
            return Err(Error::Contract("ragged task inputs or outputs".into()));
        }
        if xs.chain(ys).flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("task value".into()));
        }
        Ok(())
    }

    /// `true` for targets whose input bitwise equals some context input.
    pub fn context_mask(&self) -> Vec<bool> {
        self.x_target
            .iter()
            .map(|xt| self.x_context.iter().any(|xc| same_bits(xc, xt)))
            .collect()
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskGenConfig {
    pub family: KernelFamily,
    pub x_range: (f64, f64),
    pub x_dim: usize,
    /// Inclusive range for the context count.
    pub n_context_range: (usize, usize),
    pub n_target: usize,
    pub lengthscale_range: (f64, f64),
    pub outputscale_range: (f64, f64),
    pub period_range: (f64, f64),
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        Self {
            family: KernelFamily::Rbf,
            x_range: (-2.0, 2.0),
            x_dim: 1,
            n_context_range: (3, 50),
            n_target: 50,
            lengthscale_range: (0.6, 1.0),
            outputscale_range: (0.1, 1.0),
            period_range: (0.5, 1.5),
            noise: 0.02,
            seed: 0,
        }
    }
}

impl TaskGenConfig {
    pub fn validate(&self) -> Result<()> {
        let half_open = [
            ("x_range", self.x_range),
            ("lengthscale_range", self.lengthscale_range),
            ("outputscale_range", self.outputscale_range),
            ("period_range", self.period_range),
        ];
        for (name, (lo, hi)) in half_open {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::Config(format!("{name}: empty interval [{lo}, {hi})")));
            }
        }
        for (name, lo) in [
            ("lengthscale_range", self.lengthscale_range.0),
            ("outputscale_range", self.outputscale_range.0),
            ("period_range", self.period_range.0),
        ] {
            if lo <= 0.0 {
                return Err(Error::Config(format!("{name}: lower end must be positive")));
            }
        }
        let (m0, m1) = self.n_context_range;
        if !(1 <= m0 && m0 <= m1 && m1 <= self.n_target) {
            return Err(Error::Config(format!(
                "n_context_range: need 1 <= {m0} <= {m1} <= n_target {}",
                self.n_target
            )));
        }
        if self.x_dim == 0 {
            return Err(Error::Config("x_dim: must be >= 1".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise: must be >= 0".into()));
        }
        Ok(())
    }

    pub fn sample_kernel(&self, rng: &mut RngStream) -> KernelSpec {
        let l = rng.uniform(self.lengthscale_range.0, self.lengthscale_range.1);
        let s2 = rng.uniform(self.outputscale_range.0, self.outputscale_range.1);
        match self.family {
            KernelFamily::Rbf => KernelSpec::rbf(l, s2, self.noise),
            KernelFamily::Matern52 => KernelSpec::matern52(l, s2, self.noise),
            KernelFamily::Periodic => {
                let p = rng.uniform(self.period_range.0, self.period_range.1);
                KernelSpec::periodic(l, s2, p, self.noise)
            }
        }
    }
}

/// `batch` fresh tasks. Each task draws its own kernel hyperparameters,
/// `n_target` uniform inputs and a context size `M`; the context is the first
/// `M` targets.
pub fn make_task_batch(cfg: &TaskGenConfig, batch: usize, rng: &mut RngStream) -> Result<Vec<Task>> {
    cfg.validate()?;
    (0..batch).map(|_| make_task(cfg, rng)).collect()
}

fn make_task(cfg: &TaskGenConfig, rng: &mut RngStream) -> Result<Task> {
    let kernel = cfg.sample_kernel(rng);
    let m = rng.uniform_int(cfg.n_context_range.0, cfg.n_context_range.1);
    let (lo, hi) = cfg.x_range;
    let xs: Vec<Vec<f64>> = (0..cfg.n_target)
        .map(|_| (0..cfg.x_dim).map(|_| rng.uniform(lo, hi)).collect())
        .collect();
    let f = sample_gp_function(&kernel, &xs, rng)?;
    let ys: Vec<Vec<f64>> = f.into_iter().map(|v| vec![v]).collect();
    Ok(Task {
        x_context: xs[..m].to_vec(),
        y_context: ys[..m].to_vec(),
        x_target: xs,
        y_target: ys,
        kernel: Some(kernel),
    })
}

/// Perturb outputs with Gaussian noise of std `level · std(y)` per output
/// dimension, with `std(y)` taken over the targets. A context point that
/// coincides with a target receives the same perturbed value.
pub fn add_observation_noise(task: &Task, level: f64, rng: &mut RngStream) -> Result<Task> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::Config(format!("noise level {level} outside [0, 1)")));
    }
    let mut out = task.clone();
    if level == 0.0 {
        return Ok(out);
    }
    let dy = task.y_dim();
    let n = task.n_target() as f64;
    let scales: Vec<f64> = (0..dy)
        .map(|j| {
            let mean = task.y_target.iter().map(|y| y[j]).sum::<f64>() / n;
            let var = task.y_target.iter().map(|y| (y[j] - mean).powi(2)).sum::<f64>() / n;
            level * var.sqrt()
        })
        .collect();
    for y in &mut out.y_target {
        for (v, s) in y.iter_mut().zip(&scales) {
            *v += s * rng.standard_normal();
        }
    }
    for (xc, yc) in out.x_context.iter().zip(out.y_context.iter_mut()) {
        match task.x_target.iter().position(|xt| same_bits(xc, xt)) {
            Some(t) => yc.clone_from(&out.y_target[t]),
            None => {
                for (v, s) in yc.iter_mut().zip(&scales) {
                    *v += s * rng.standard_normal();
                }
            }
        }
    }
    Ok(out)
}

/// Exact GP posterior predictive over `y` at each `x_star`, conditioning on the
/// task context. Output dimensions are treated as independent GPs sharing `k`.
pub fn gp_posterior_predict(k: &KernelSpec, task: &Task, x_star: &[Vec<f64>]) -> Result<Vec<DiagGaussian>> {
    let m = task.n_context();
    if m == 0 {
        return Err(Error::Contract("GP posterior needs a nonempty context".into()));
    }
    let noise2 = k.noise * k.noise;
    let mut kcc = kernel_matrix(k, &task.x_context, &task.x_context);
    for i in 0..m {
        kcc.set(i, i, kcc.get(i, i) + noise2);
    }
    let l = cholesky(&kcc)?;
    let dy = task.y_context[0].len();
    // α_j = K⁻¹ y_j per output dimension.
    let alphas: Vec<Vec<f64>> = (0..dy)
        .map(|j| {
            let y: Vec<f64> = task.y_context.iter().map(|v| v[j]).collect();
            crate::numerics::solve_upper_t(&l, &solve_lower(&l, &y))
        })
        .collect();
    let prior = k.outputscale + noise2;
    x_star
        .iter()
        .map(|xs| {
            let ks: Vec<f64> = task.x_context.iter().map(|xc| kernel_at(k, xc, xs)).collect();
            let v = solve_lower(&l, &ks);
            let var = (prior - dot(&v, &v)).max(0.0);
            let mean = alphas.iter().map(|a| dot(&ks, a)).collect();
            DiagGaussian::new(mean, vec![var.max(1e-300).ln(); dy])
        })
        .collect()
}

/// Metadata written next to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub n_tasks: usize,
    pub config: TaskGenConfig,
    /// Always `"per_task"`: every task draws fresh kernel hyperparameters.
    pub hyperparameter_sampling: String,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Write one JSON task per line.
pub fn write_tasks(path: &Path, tasks: &[Task]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in tasks {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tasks(path: &Path) -> Result<Vec<Task>> {
    let r = BufReader::new(File::open(path)?);
    let mut tasks = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: Task = serde_json::from_str(&line)?;
        task.validate()
            .map_err(|e| Error::Contract(format!("{}:{}: {e}", path.display(), i + 1)))?;
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn write_dataset(path: &Path, cfg: &TaskGenConfig, tasks: &[Task]) -> Result<()> {
    write_tasks(path, tasks)?;
    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        n_tasks: tasks.len(),
        config: cfg.clone(),
        hyperparameter_sampling: "per_task".into(),
    };
    let f = File::create(meta_path(path))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &meta)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_closed_forms() {
        let x = [0.3];
        for k in [
            KernelSpec::rbf(0.7, 0.4, 0.0),
            KernelSpec::matern52(0.7, 0.4, 0.0),
            KernelSpec::periodic(0.7, 0.4, 1.1, 0.0),
        ] {
            assert_eq!(kernel_eval(&k, &x, &x).unwrap(), 0.4);
        }
        let rbf = KernelSpec::rbf(1.0, 1.0, 0.0);
        assert!((kernel_eval(&rbf, &[0.0], &[1.0]).unwrap() - 0.606_530_659_712_633_4).abs() < 1e-15);
        // (1 + √5 + 5/3)·e^{−√5}, evaluated independently at high precision.
        let m = KernelSpec::matern52(1.0, 1.0, 0.0);
        assert!((kernel_eval(&m, &[0.0], &[1.0]).unwrap() - 0.523_994_108_831_820_3).abs() < 1e-14);
        let p = KernelSpec::periodic(1.0, 1.0, 2.0, 0.0);
        // sin²(π/2) = 1
        assert!((kernel_eval(&p, &[0.0], &[1.0]).unwrap() - (-2f64).exp()).abs() < 1e-15);
        assert!(kernel_eval(&p, &[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn kernel_spec_validation() {
        assert!(KernelSpec::rbf(1.0, 1.0, 0.0).validate().is_ok());
        assert!(KernelSpec::rbf(0.0, 1.0, 0.0).validate().is_err());
        let mut p = KernelSpec::periodic(1.0, 1.0, 1.0, 0.0);
        p.period = None;
        assert!(p.validate().is_err());
    }

    #[test]
    fn single_point_variance() {
        let k = KernelSpec::rbf(1.0, 0.6, 0.0);
        let mut rng = RngStream::new(3);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_gp_function(&k, &[vec![0.5]], &mut rng).unwrap()[0])
            .collect();
        let var = draws.iter().map(|v| v * v).sum::<f64>() / n as f64;
        // SE of a Gaussian second moment: σ²·√(2/n)
        let se = 0.6 * (2.0 / n as f64).sqrt();
        assert!((var - 0.6).abs() < 3.0 * se, "var {var}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let k = KernelSpec::matern52(0.8, 0.5, 0.0);
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.3]).collect();
        let a = sample_gp_function(&k, &xs, &mut RngStream::new(11)).unwrap();
        let b = sample_gp_function(&k, &xs, &mut RngStream::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_shapes_follow_config() {
        let cfg = TaskGenConfig::default();
        let tasks = make_task_batch(&cfg, 50, &mut RngStream::new(1)).unwrap();
        assert_eq!(tasks.len(), 50);
        for t in &tasks {
            assert!((3..=50).contains(&t.n_context()));
            assert_eq!(t.n_target(), 50);
            assert!(t.context_mask().iter().filter(|&&m| m).count() >= t.n_context());
            let k = t.kernel.unwrap();
            assert!((0.6..1.0).contains(&k.lengthscale) && (0.1..1.0).contains(&k.outputscale));
            assert!(t.x_target.iter().flatten().all(|x| (-2.0..2.0).contains(x)));
        }
        let fixed = TaskGenConfig {
            n_context_range: (5, 5),
            ..TaskGenConfig::default()
        };
        for t in make_task_batch(&fixed, 10, &mut RngStream::new(2)).unwrap() {
            assert_eq!(t.n_context(), 5);
        }
        let again = make_task_batch(&cfg, 50, &mut RngStream::new(1)).unwrap();
        assert_eq!(tasks, again);
    }

    #[test]
    fn config_rejects_empty_ranges() {
        let bad = TaskGenConfig {
            lengthscale_range: (1.0, 1.0),
            ..TaskGenConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TaskGenConfig {
            n_context_range: (10, 60),
            ..TaskGenConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn observation_noise_level() {
        let x: Vec<Vec<f64>> = (0..10_000).map(|i| vec![i as f64]).collect();
        let y: Vec<Vec<f64>> = (0..10_000).map(|i| vec![((i as f64) * 0.37).sin() * 2.0]).collect();
        let task = Task {
            x_context: x[..10].to_vec(),
            y_context: y[..10].to_vec(),
            x_target: x.clone(),
            y_target: y.clone(),
            kernel: None,
        };
        assert_eq!(add_observation_noise(&task, 0.0, &mut RngStream::new(0)).unwrap(), task);
        let noisy = add_observation_noise(&task, 0.1, &mut RngStream::new(5)).unwrap();
        let n = y.len() as f64;
        let mean = y.iter().map(|v| v[0]).sum::<f64>() / n;
        let sd_y = (y.iter().map(|v| (v[0] - mean).powi(2)).sum::<f64>() / n).sqrt();
        let d: Vec<f64> = noisy.y_target.iter().zip(&y).map(|(a, b)| a[0] - b[0]).collect();
        let sd_d = (d.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        assert!((sd_d / (0.1 * sd_y) - 1.0).abs() < 0.1);
        assert_eq!(noisy.y_context[..], noisy.y_target[..10]);
        let again = add_observation_noise(&task, 0.1, &mut RngStream::new(5)).unwrap();
        assert_eq!(noisy, again);
        assert!(add_observation_noise(&task, 1.0, &mut RngStream::new(5)).is_err());
    }

    fn small_task() -> Task {
        let xc = vec![vec![-0.5], vec![0.1], vec![0.9]];
        let yc = vec![vec![0.3], vec![-0.2], vec![0.8]];
        Task {
            x_target: xc.clone(),
            y_target: yc.clone(),
            x_context: xc,
            y_context: yc,
            kernel: None,
        }
    }

    #[test]
    fn posterior_limits() {
        let task = small_task();
        let k = KernelSpec::rbf(0.5, 0.7, 1e-5);
        let at_ctx = gp_posterior_predict(&k, &task, &task.x_context).unwrap();
        for (p, y) in at_ctx.iter().zip(&task.y_context) {
            assert!((p.mean[0] - y[0]).abs() < 1e-6);
            assert!(p.variance()[0] < 1e-6);
        }
        let far = gp_posterior_predict(&k, &task, &[vec![100.0]]).unwrap();
        assert!(far[0].mean[0].abs() < 1e-6);
        assert!((far[0].variance()[0] - (0.7 + 1e-10)).abs() < 1e-6);
    }

    #[test]
    fn posterior_matches_dense_inverse() {
        let task = small_task();
        let k = KernelSpec::matern52(0.8, 0.9, 0.1);
        let xs = vec![vec![0.4], vec![-1.3]];
        let got = gp_posterior_predict(&k, &task, &xs).unwrap();
        // Gauss-Jordan inverse of K + σ²I, then the textbook formulas.
        let m = 3;
        let mut a = kernel_matrix(&k, &task.x_context, &task.x_context);
        for i in 0..m {
            a.set(i, i, a.get(i, i) + 0.01);
        }
        let mut inv = Matrix::identity(m);
        for c in 0..m {
            let p = a.get(c, c);
            for j in 0..m {
                a.set(c, j, a.get(c, j) / p);
                inv.set(c, j, inv.get(c, j) / p);
            }
            for r in 0..m {
                if r != c {
                    let f = a.get(r, c);
                    for j in 0..m {
                        a.set(r, j, a.get(r, j) - f * a.get(c, j));
                        inv.set(r, j, inv.get(r, j) - f * inv.get(c, j));
                    }
                }
            }
        }
        let y: Vec<f64> = task.y_context.iter().map(|v| v[0]).collect();
        for (x, g) in xs.iter().zip(&got) {
            let ks: Vec<f64> = task.x_context.iter().map(|c| kernel_eval(&k, c, x).unwrap()).collect();
            let kinv_ks = inv.matvec(&ks).unwrap();
            let mean = dot(&kinv_ks, &y);
            let var = 0.9 + 0.01 - dot(&ks, &kinv_ks);
            assert!((g.mean[0] - mean).abs() < 1e-10);
            assert!((g.variance()[0] - var).abs() < 1e-10);
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        let cfg = TaskGenConfig {
            family: KernelFamily::Periodic,
            ..TaskGenConfig::default()
        };
        let tasks = make_task_batch(&cfg, 4, &mut RngStream::new(8)).unwrap();
        write_dataset(&path, &cfg, &tasks).unwrap();
        assert_eq!(read_tasks(&path).unwrap(), tasks);
        let meta: DatasetMeta =
            serde_json::from_reader(File::open(meta_path(&path)).unwrap()).unwrap();
        assert_eq!(meta.n_tasks, 4);
        assert_eq!(meta.config, cfg);
    }
}
