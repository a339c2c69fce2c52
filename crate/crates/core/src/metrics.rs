//! Predictive log-likelihood and regression calibration.
//!
//! Calibration uses centered intervals: a point is inside the level-`p`
//! interval when its predictive CDF value lies in `[0.5 − p/2, 0.5 + p/2]`.
//! For a mixture the CDF is the equal-weight average of component CDFs.
//! Multi-output predictions are scored per output dimension.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::models::{PredictiveSet, Predictor};
use crate::numerics::LN_2PI;
use crate::rng::RngStream;
use crate::taskgen::Task;

pub const CSV_SCHEMA_VERSION: u32 = 1;

/// `0.1, 0.2, …, 0.9`
pub fn default_levels() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

fn check_alignment(preds: &PredictiveSet, ys: &[Vec<f64>]) -> Result<()> {
    if preds.n_points() != ys.len() {
        return Err(Error::dim("predictions vs outputs", preds.n_points(), ys.len()));
    }
    if let Some(y) = ys.iter().find(|y| y.len() != preds.y_dim()) {
        return Err(Error::dim("output dim", preds.y_dim(), y.len()));
    }
    Ok(())
}

/// `log (1/S) Σ_s N(y; μ_s, σ_s²)` at point `i`.
pub fn point_log_likelihood(preds: &PredictiveSet, i: usize, y: &[f64]) -> f64 {
    let s = preds.samples();
    let comps: Vec<f64> = (0..s)
        .map(|k| {
            let (m, lv) = preds.component(i, k);
            y.iter()
                .zip(m)
                .zip(lv)
                .map(|((y, m), lv)| -0.5 * (LN_2PI + lv + (y - m).powi(2) * (-lv).exp()))
                .sum()
        })
        .collect();
    let mx = comps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + comps.iter().map(|c| (c - mx).exp()).sum::<f64>().ln() - (s as f64).ln()
}

/// Mean over points of the mixture log density.
pub fn mixture_log_likelihood(preds: &PredictiveSet, ys: &[Vec<f64>]) -> Result<f64> {
    check_alignment(preds, ys)?;
    if ys.is_empty() {
        return Err(Error::Contract("log-likelihood of zero points".into()));
    }
    let total: f64 = ys.iter().enumerate().map(|(i, y)| point_log_likelihood(preds, i, y)).sum();
    Ok(total / ys.len() as f64)
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Mixture CDF at `y` for point `i`, output dimension `d`.
pub fn mixture_cdf(preds: &PredictiveSet, i: usize, d: usize, y: f64) -> f64 {
    let s = preds.samples();
    (0..s)
        .map(|k| {
            let (m, lv) = preds.component(i, k);
            normal_cdf((y - m[d]) / (0.5 * lv[d]).exp())
        })
        .sum::<f64>()
        / s as f64
}

/// Predictive CDF values of every `(point, output dim)`.
pub fn pit_values(preds: &PredictiveSet, ys: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_alignment(preds, ys)?;
    Ok(ys
        .iter()
        .enumerate()
        .flat_map(|(i, y)| y.iter().enumerate().map(move |(d, &v)| mixture_cdf(preds, i, d, v)))
        .collect())
}

/// ECE and calibration curve from CDF values.
pub fn ece_from_pit(pit: &[f64], levels: &[f64]) -> Result<(f64, Vec<(f64, f64)>)> {
    if levels.is_empty() || levels.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::Config("calibration levels must lie in (0, 1)".into()));
    }
    if pit.is_empty() {
        return Err(Error::Contract("calibration of zero points".into()));
    }
    let n = pit.len() as f64;
    let curve: Vec<(f64, f64)> = levels
        .iter()
        .map(|&p| {
            let inside = pit.iter().filter(|&&f| (f - 0.5).abs() <= p / 2.0).count();
            (p, inside as f64 / n)
        })
        .collect();
    let ece = curve.iter().map(|(p, c)| (c - p).abs()).sum::<f64>() / levels.len() as f64;
    Ok((ece, curve))
}

/// Mean absolute gap between nominal level and empirical coverage of
/// centered predictive intervals.
pub fn regression_ece(preds: &PredictiveSet, ys: &[Vec<f64>], levels: &[f64]) -> Result<(f64, Vec<(f64, f64)>)> {
    ece_from_pit(&pit_values(preds, ys)?, levels)
}

/// Which target points are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mask {
    /// Targets that are not context points.
    #[default]
    Target,
    /// Targets that are context points.
    Context,
    All,
}

impl Mask {
    pub fn name(self) -> &'static str {
        match self {
            Mask::Target => "target",
            Mask::Context => "context",
            Mask::All => "all",
        }
    }

    fn keeps(self, in_context: bool) -> bool {
        match self {
            Mask::Target => !in_context,
            Mask::Context => in_context,
            Mask::All => true,
        }
    }
}

impl std::str::FromStr for Mask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Mask::Target),
            "context" => Ok(Mask::Context),
            "all" => Ok(Mask::All),
            other => Err(Error::Config(format!("unknown mask `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub mask: Mask,
    pub seed: u64,
    /// Mean log-likelihood per point over the masked points.
    pub ll: f64,
    /// Mean over non-context targets (NaN when there are none).
    pub ll_target: f64,
    /// Mean over context targets (NaN when there are none).
    pub ll_context: f64,
    pub ece: f64,
    pub calibration_curve: Vec<(f64, f64)>,
    pub n_points: usize,
    pub n_target: usize,
    pub n_context: usize,
    /// Mean predictive standard deviation over the masked points.
    pub mean_std: f64,
}

#[derive(Default)]
struct TaskScores {
    ll: Vec<(bool, f64)>,
    pit: Vec<(bool, f64)>,
    sd: Vec<(bool, f64)>,
}

fn score_task(model: &dyn Predictor, task: &Task, samples: usize, rng: &mut RngStream) -> Result<TaskScores> {
    let preds = model.predict_task(task, &task.x_target, samples, rng)?;
    let in_ctx = task.context_mask();
    let mut out = TaskScores::default();
    for (i, y) in task.y_target.iter().enumerate() {
        out.ll.push((in_ctx[i], point_log_likelihood(&preds, i, y)));
        for (d, &v) in y.iter().enumerate() {
            out.pit.push((in_ctx[i], mixture_cdf(&preds, i, d, v)));
            out.sd.push((in_ctx[i], preds.mixture_variance(i, d).sqrt()));
        }
    }
    Ok(out)
}

fn mean_where(v: &[(bool, f64)], keep: impl Fn(bool) -> bool) -> (f64, usize) {
    let sel: Vec<f64> = v.iter().filter(|(c, _)| keep(*c)).map(|(_, x)| *x).collect();
    if sel.is_empty() {
        (f64::NAN, 0)
    } else {
        (sel.iter().sum::<f64>() / sel.len() as f64, sel.len())
    }
}

/// Predict every task at its targets, keep the masked points and pool the
/// metrics over all tasks. Task `i` uses the child stream `i` of `seed`, so
/// the report does not depend on `jobs`.
pub fn evaluate_model(
    model: &(dyn Predictor + Sync),
    tasks: &[Task],
    samples: usize,
    mask: Mask,
    seed: u64,
    jobs: usize,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::Contract("evaluation needs at least one task".into()));
    }
    let root = RngStream::new(seed).named("eval");
    let jobs = jobs.clamp(1, tasks.len());
    let chunk = tasks.len().div_ceil(jobs);
    let per_task: Vec<Result<TaskScores>> = std::thread::scope(|scope| {
        let handles: Vec<_> = tasks
            .chunks(chunk)
            .enumerate()
            .map(|(c, ts)| {
                let root = &root;
                scope.spawn(move || {
                    ts.iter()
                        .enumerate()
                        .map(|(k, t)| score_task(model, t, samples, &mut root.child((c * chunk + k) as u64)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut all = TaskScores::default();
    for s in per_task {
        let s = s?;
        all.ll.extend(s.ll);
        all.pit.extend(s.pit);
        all.sd.extend(s.sd);
    }
    let (ll, n_points) = mean_where(&all.ll, |c| mask.keeps(c));
    let (ll_target, n_target) = mean_where(&all.ll, |c| !c);
    let (ll_context, n_context) = mean_where(&all.ll, |c| c);
    let (mean_std, _) = mean_where(&all.sd, |c| mask.keeps(c));
    let pit: Vec<f64> = all.pit.iter().filter(|(c, _)| mask.keeps(*c)).map(|(_, f)| *f).collect();
    let (ece, calibration_curve) = if pit.is_empty() {
        (f64::NAN, Vec::new())
    } else {
        ece_from_pit(&pit, &default_levels())?
    };
    Ok(EvalReport {
        model: model.name(),
        mask,
        seed,
        ll,
        ll_target,
        ll_context,
        ece,
        calibration_curve,
        n_points,
        n_target,
        n_context,
        mean_std,
    })
}

#[derive(Serialize)]
struct ReportRow<'a> {
    schema_version: u32,
    model: &'a str,
    family: &'a str,
    mask: &'a str,
    seed: u64,
    ll: f64,
    ll_target: f64,
    ll_context: f64,
    ece: f64,
    n_points: usize,
    mean_std: f64,
    ece_intervals: &'a str,
}

#[derive(Serialize)]
struct CurveRow<'a> {
    schema_version: u32,
    model: &'a str,
    family: &'a str,
    mask: &'a str,
    seed: u64,
    level: f64,
    coverage: f64,
}

/// One metrics row per report, tagged with the kernel family of the data.
pub fn write_reports_csv(path: &Path, rows: &[(EvalReport, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (r, family) in rows {
        w.serialize(ReportRow {
            schema_version: CSV_SCHEMA_VERSION,
            model: &r.model,
            family,
            mask: r.mask.name(),
            seed: r.seed,
            ll: r.ll,
            ll_target: r.ll_target,
            ll_context: r.ll_context,
            ece: r.ece,
            n_points: r.n_points,
            mean_std: r.mean_std,
            ece_intervals: "centered",
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve_csv(path: &Path, rows: &[(EvalReport, String)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (r, family) in rows {
        for &(level, coverage) in &r.calibration_curve {
            w.serialize(CurveRow {
                schema_version: CSV_SCHEMA_VERSION,
                model: &r.model,
                family,
                mask: r.mask.name(),
                seed: r.seed,
                level,
                coverage,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
