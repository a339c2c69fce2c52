//! Commands behind the `np-lab` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use np_lab::metrics::{evaluate_model, write_curve_csv, write_reports_csv, EvalReport, Mask, CSV_SCHEMA_VERSION};
use np_lab::models::{AttentionKind, Checkpoint, ExactGp, Model, Predictor, VarianceMode};
use np_lab::rng::RngStream;
use np_lab::taskgen::{make_task_batch, read_tasks, write_dataset, Task, TaskGenConfig};
use np_lab::training::{spectral_extremes, train, TrainConfig, TrainOutput, CHECKPOINT_FILE};
use np_lab::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_ECHO: &str = "config.json";
pub const DATASET_FILE: &str = "tasks.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CURVE_FILE: &str = "calibration.csv";
pub const PLOT_FILE: &str = "plot.svg";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const EXACT_GP_ID: &str = "exact-gp";

/// Everything a command can be configured with. Each command reads its own
/// section; the file may contain any subset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generate: GenerateConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub plot: PlotConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply a global seed to every section.
    pub fn set_seed(&mut self, seed: u64) {
        self.generate.data.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self.plot.seed = seed;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub n_tasks: usize,
    pub data: TaskGenConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n_tasks: 2000,
            data: TaskGenConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Checkpoint path or `exact-gp`.
    pub checkpoint: Option<String>,
    pub dataset: Option<PathBuf>,
    pub mask: Mask,
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            mask: Mask::Target,
            samples: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    pub checkpoint: Option<String>,
    pub tasks: Option<PathBuf>,
    pub task_index: usize,
    pub grid: (f64, f64),
    pub grid_points: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            tasks: None,
            task_index: 0,
            grid: (-4.0, 4.0),
            grid_points: 200,
            samples: 100,
            seed: 0,
        }
    }
}

/// Values to sweep. An empty axis keeps the base training config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sweep {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub beta: Vec<f64>,
    pub n_context: Vec<usize>,
    pub attention: Vec<AttentionKind>,
    pub variance_mode: Vec<VarianceMode>,
}

impl Sweep {
    pub fn is_empty(&self) -> bool {
        self.lambda1.is_empty()
            && self.lambda2.is_empty()
            && self.beta.is_empty()
            && self.n_context.is_empty()
            && self.attention.is_empty()
            && self.variance_mode.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub sweep: Sweep,
    pub eval_tasks: usize,
    pub mask: Mask,
    pub samples: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            sweep: Sweep::default(),
            eval_tasks: 500,
            mask: Mask::Target,
            samples: 100,
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Dimension { .. } | Error::Contract(_) => 2,
        Error::NonFinite(_) | Error::NotPositiveDefinite { .. } => 3,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => 4,
    }
}

/// Worker count: the requested number capped by `NP_LAB_THREADS`.
pub fn worker_count(requested: usize) -> usize {
    let cap = std::env::var("NP_LAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    let n = requested.max(1);
    cap.map_or(n, |c| n.min(c))
}

fn echo_config(out: &Path, value: &impl Serialize) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_ECHO), serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn cmd_generate(cfg: &GenerateConfig, out: &Path) -> Result<PathBuf> {
    cfg.data.validate()?;
    if cfg.n_tasks == 0 {
        return Err(Error::Config("generate.n_tasks: must be >= 1".into()));
    }
    echo_config(out, cfg)?;
    let mut rng = RngStream::new(cfg.data.seed).named("generate");
    let tasks = make_task_batch(&cfg.data, cfg.n_tasks, &mut rng)?;
    let path = out.join(DATASET_FILE);
    write_dataset(&path, &cfg.data, &tasks)?;
    Ok(path)
}

pub fn cmd_train(cfg: &TrainConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    echo_config(out, cfg)?;
    let dest = TrainOutput { dir: out.to_path_buf() };
    train(cfg, Some(&dest))?;
    Ok(dest.checkpoint())
}

/// A trained model or the exact-GP baseline.
pub enum Loaded {
    Model(Box<Model>),
    Gp(ExactGp),
}

impl Loaded {
    pub fn open(id: &str) -> Result<Self> {
        if id == EXACT_GP_ID {
            return Ok(Loaded::Gp(ExactGp { kernel: None }));
        }
        let p = Path::new(id);
        let p = if p.is_dir() { p.join(CHECKPOINT_FILE) } else { p.to_path_buf() };
        Ok(Loaded::Model(Box::new(Checkpoint::load(&p)?.model)))
    }

    pub fn predictor(&self) -> &(dyn Predictor + Sync) {
        match self {
            Loaded::Model(m) => m.as_ref(),
            Loaded::Gp(g) => g,
        }
    }

    fn check(&self, tasks: &[Task]) -> Result<()> {
        if let Loaded::Model(m) = self {
            let d = m.dims();
            for t in tasks {
                if t.x_dim() != d.dx || t.y_dim() != d.dy {
                    return Err(Error::dim(
                        "checkpoint vs dataset (dx, dy)",
                        format!("({}, {})", d.dx, d.dy),
                        format!("({}, {})", t.x_dim(), t.y_dim()),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn family_of(tasks: &[Task]) -> String {
    let mut names: Vec<&str> = tasks.iter().map(|t| t.kernel.map_or("unknown", |k| k.family.name())).collect();
    names.sort_unstable();
    names.dedup();
    names.join("+")
}

pub fn cmd_eval(cfg: &EvalConfig, out: &Path, jobs: usize) -> Result<EvalReport> {
    let id = cfg.checkpoint.as_deref().ok_or_else(|| Error::Config("eval.checkpoint: required".into()))?;
    let data = cfg.dataset.as_ref().ok_or_else(|| Error::Config("eval.dataset: required".into()))?;
    if cfg.samples == 0 {
        return Err(Error::Config("eval.samples: must be >= 1".into()));
    }
    echo_config(out, cfg)?;
    let model = Loaded::open(id)?;
    let tasks = read_tasks(data)?;
    model.check(&tasks)?;
    let report = evaluate_model(model.predictor(), &tasks, cfg.samples, cfg.mask, cfg.seed, worker_count(jobs))?;
    let rows = [(report, family_of(&tasks))];
    write_reports_csv(&out.join(METRICS_FILE), &rows)?;
    write_curve_csv(&out.join(CURVE_FILE), &rows)?;
    let [(report, _)] = rows;
    Ok(report)
}

/// Predictive mean and ±3σ band of one task on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotData {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub truth: Vec<(f64, f64)>,
    pub context: Vec<(f64, f64)>,
}

impl PlotData {
    pub fn half_width(&self, i: usize) -> f64 {
        3.0 * self.std[i]
    }
}

pub fn plot_data(model: &dyn Predictor, task: &Task, cfg: &PlotConfig) -> Result<PlotData> {
    if task.x_dim() != 1 || task.y_dim() != 1 {
        return Err(Error::Config(format!(
            "plot needs 1D tasks, got x_dim {} and y_dim {}",
            task.x_dim(),
            task.y_dim()
        )));
    }
    let (lo, hi) = cfg.grid;
    if !(lo < hi) || cfg.grid_points < 2 || cfg.samples == 0 {
        return Err(Error::Config("plot: need grid.0 < grid.1, grid_points >= 2, samples >= 1".into()));
    }
    let grid: Vec<f64> = (0..cfg.grid_points)
        .map(|i| lo + (hi - lo) * i as f64 / (cfg.grid_points - 1) as f64)
        .collect();
    let xs: Vec<Vec<f64>> = grid.iter().map(|&x| vec![x]).collect();
    let mut rng = RngStream::new(cfg.seed).named("plot");
    let preds = model.predict_task(task, &xs, cfg.samples, &mut rng)?;
    let mean = (0..grid.len()).map(|i| preds.mixture_mean(i, 0)).collect();
    let std = (0..grid.len()).map(|i| preds.mixture_variance(i, 0).sqrt()).collect();
    let mut truth: Vec<(f64, f64)> = task.x_target.iter().zip(&task.y_target).map(|(x, y)| (x[0], y[0])).collect();
    truth.sort_by(|a, b| a.0.total_cmp(&b.0));
    let context = task.x_context.iter().zip(&task.y_context).map(|(x, y)| (x[0], y[0])).collect();
    Ok(PlotData {
        grid,
        mean,
        std,
        truth,
        context,
    })
}

const W: f64 = 800.0;
const H: f64 = 480.0;
const PAD: f64 = 40.0;

pub fn render_svg(d: &PlotData) -> String {
    let (x0, x1) = (d.grid[0], d.grid[d.grid.len() - 1]);
    let mut y0 = f64::INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for (i, m) in d.mean.iter().enumerate() {
        y0 = y0.min(m - d.half_width(i));
        y1 = y1.max(m + d.half_width(i));
    }
    for &(_, y) in d.truth.iter().chain(&d.context) {
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(y1 > y0) {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let line = |pts: &mut dyn Iterator<Item = (f64, f64)>| {
        let mut s = String::new();
        for (x, y) in pts {
            let _ = write!(s, "{:.2},{:.2} ", sx(x), sy(y));
        }
        s.trim_end().to_string()
    };
    let mut band: Vec<(f64, f64)> = d.grid.iter().enumerate().map(|(i, &x)| (x, d.mean[i] + d.half_width(i))).collect();
    band.extend(d.grid.iter().enumerate().rev().map(|(i, &x)| (x, d.mean[i] - d.half_width(i))));

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        s,
        r##"<polygon class="band" points="{}" fill="#1f77b4" fill-opacity="0.2" stroke="none"/>"##,
        line(&mut band.into_iter())
    );
    let _ = writeln!(
        s,
        r##"<polyline class="truth" points="{}" fill="none" stroke="#222" stroke-dasharray="4 3"/>"##,
        line(&mut d.truth.iter().copied())
    );
    let _ = writeln!(
        s,
        r##"<polyline class="mean" points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        line(&mut d.grid.iter().copied().zip(d.mean.iter().copied()))
    );
    for &(x, y) in &d.context {
        let _ = writeln!(s, r##"<circle class="context" cx="{:.2}" cy="{:.2}" r="3.5" fill="#d62728"/>"##, sx(x), sy(y));
    }
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="{anchor}">{v}</text>"#,
            sx(v),
            H - PAD + 16.0
        );
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12">{y1:.2}</text>"#, 4.0, PAD + 4.0);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12">{y0:.2}</text>"#, 4.0, H - PAD);
    s.push_str("</svg>\n");
    s
}

pub fn cmd_plot(cfg: &PlotConfig, out: &Path) -> Result<PathBuf> {
    let id = cfg.checkpoint.as_deref().ok_or_else(|| Error::Config("plot.checkpoint: required".into()))?;
    let path = cfg.tasks.as_ref().ok_or_else(|| Error::Config("plot.tasks: required".into()))?;
    echo_config(out, cfg)?;
    let model = Loaded::open(id)?;
    let tasks = read_tasks(path)?;
    let task = tasks
        .get(cfg.task_index)
        .ok_or_else(|| Error::Config(format!("plot.task_index: {} but the file has {} tasks", cfg.task_index, tasks.len())))?;
    model.check(std::slice::from_ref(task))?;
    let data = plot_data(model.predictor(), task, cfg)?;
    let svg_path = out.join(PLOT_FILE);
    fs::write(&svg_path, render_svg(&data))?;
    Ok(svg_path)
}

/// One point of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub n_context: Option<usize>,
    pub attention: AttentionKind,
    pub variance_mode: VarianceMode,
}

impl Cell {
    pub fn id(&self) -> String {
        let nc = self.n_context.map_or_else(|| "base".to_string(), |n| n.to_string());
        format!(
            "l1={}_l2={}_beta={}_nc={}_att={}_var={}",
            self.lambda1,
            self.lambda2,
            self.beta,
            nc,
            enum_name(&self.attention),
            enum_name(&self.variance_mode)
        )
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.lambda1 = self.lambda1;
        c.lambda2 = self.lambda2;
        c.beta = self.beta;
        c.attention = self.attention;
        c.variance_mode = self.variance_mode;
        if let Some(n) = self.n_context {
            c.data.n_context_range = (n, n);
        }
        c
    }
}

fn enum_name(v: &impl Serialize) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn or_base<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

/// Cross product of the sweep axes, in a fixed order.
pub fn sweep_cells(sweep: &Sweep, base: &TrainConfig) -> Result<Vec<Cell>> {
    if sweep.is_empty() {
        return Err(Error::Config("ablate.sweep: every axis is empty".into()));
    }
    let mut cells = Vec::new();
    for &lambda1 in &or_base(&sweep.lambda1, base.lambda1) {
        for &lambda2 in &or_base(&sweep.lambda2, base.lambda2) {
            for &beta in &or_base(&sweep.beta, base.beta) {
                for &n_context in &or_base(&sweep.n_context.iter().map(|&n| Some(n)).collect::<Vec<_>>(), None) {
                    for &attention in &or_base(&sweep.attention, base.attention) {
                        for &variance_mode in &or_base(&sweep.variance_mode, base.variance_mode) {
                            cells.push(Cell {
                                lambda1,
                                lambda2,
                                beta,
                                n_context,
                                attention,
                                variance_mode,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

/// Outcome of one sweep cell, stored as `result.json` in the cell directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub status: String,
    pub ll: f64,
    pub ll_target: f64,
    pub ece: f64,
    pub mean_std: f64,
    pub sigma_min_worst: f64,
    pub sigma_max_worst: f64,
}

#[derive(Serialize)]
struct AblationRow<'a> {
    schema_version: u32,
    cell: String,
    lambda1: f64,
    lambda2: f64,
    beta: f64,
    n_context: String,
    attention: String,
    variance_mode: String,
    mask: &'a str,
    status: &'a str,
    ll: f64,
    ll_target: f64,
    ece: f64,
    mean_std: f64,
    sigma_min_worst: f64,
    sigma_max_worst: f64,
}

const RESULT_FILE: &str = "result.json";

fn run_cell(cell: &Cell, run: &RunConfig, dir: &Path) -> Result<CellResult> {
    let cfg = cell.apply(&run.train);
    cfg.validate()?;
    echo_config(dir, &cfg)?;
    let nan = |status: &str| CellResult {
        cell: cell.clone(),
        status: status.into(),
        ll: f64::NAN,
        ll_target: f64::NAN,
        ece: f64::NAN,
        mean_std: f64::NAN,
        sigma_min_worst: f64::NAN,
        sigma_max_worst: f64::NAN,
    };
    let model = match train(&cfg, Some(&TrainOutput { dir: dir.to_path_buf() })) {
        Ok(o) => o.model,
        Err(Error::NonFinite(msg)) => {
            log::warn!("cell {}: {msg}", cell.id());
            return Ok(nan("numeric_abort"));
        }
        Err(e) => return Err(e),
    };
    let mut rng = RngStream::new(cfg.seed).named("ablate-eval");
    let tasks = make_task_batch(&cfg.data, run.ablate.eval_tasks, &mut rng)?;
    let report = evaluate_model(&model, &tasks, run.ablate.samples, run.ablate.mask, cfg.seed, 1)?;
    let (smin, smax) = spectral_extremes(&model)?;
    Ok(CellResult {
        status: "ok".into(),
        ll: report.ll,
        ll_target: report.ll_target,
        ece: report.ece,
        mean_std: report.mean_std,
        sigma_min_worst: smin,
        sigma_max_worst: smax,
        ..nan("")
    })
}

/// Run every cell not already completed under `out/cells`, then write the
/// aggregated CSV. Returns one result per cell in sweep order.
pub fn cmd_ablate(run: &RunConfig, out: &Path, jobs: usize) -> Result<Vec<CellResult>> {
    let cells = sweep_cells(&run.ablate.sweep, &run.train)?;
    if run.ablate.eval_tasks == 0 || run.ablate.samples == 0 {
        return Err(Error::Config("ablate.eval_tasks and ablate.samples: must be >= 1".into()));
    }
    for c in &cells {
        c.apply(&run.train).validate().map_err(|e| Error::Config(format!("cell {}: {e}", c.id())))?;
    }
    echo_config(out, run)?;
    let results: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new(cells.iter().map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = worker_count(jobs).min(cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let dir = out.join("cells").join(cell.id());
                let done = dir.join(RESULT_FILE);
                let r = match fs::read_to_string(&done) {
                    Ok(text) => serde_json::from_str::<CellResult>(&text).map_err(Error::from),
                    Err(_) => run_cell(cell, run, &dir).and_then(|r| {
                        fs::write(&done, serde_json::to_string_pretty(&r)?)?;
                        Ok(r)
                    }),
                };
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    let results: Vec<CellResult> = results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every cell visited"))
        .collect::<Result<_>>()?;
    let mut w = csv::Writer::from_path(out.join(ABLATION_FILE))?;
    for r in &results {
        w.serialize(AblationRow {
            schema_version: CSV_SCHEMA_VERSION,
            cell: r.cell.id(),
            lambda1: r.cell.lambda1,
            lambda2: r.cell.lambda2,
            beta: r.cell.beta,
            n_context: r.cell.n_context.map_or_else(|| "base".into(), |n| n.to_string()),
            attention: enum_name(&r.cell.attention),
            variance_mode: enum_name(&r.cell.variance_mode),
            mask: run.ablate.mask.name(),
            status: &r.status,
            ll: r.ll,
            ll_target: r.ll_target,
            ece: r.ece,
            mean_std: r.mean_std,
            sigma_min_worst: r.sigma_min_worst,
            sigma_max_worst: r.sigma_max_worst,
        })
        .map_err(Error::from)?;
    }
    w.flush()?;
    Ok(results)
}
