//! Extremal singular values and the bi-Lipschitz weight penalty.
//!
//! Two solvers are provided. [`exact_extremal_sv`] runs a full SVD.
//! [`lobpcg_extremal_sv`] runs a fixed number of LOBPCG iterations on the
//! smaller Gram matrix (`WᵀW` or `WWᵀ`), applied implicitly so one iteration
//! costs `O(p·q)`. The penalty differentiates each hinge through the outer
//! product `u vᵀ` of the extremal singular pair found by the solver.
//!
//! The smallest end sits at the hard edge of the spectrum where plain LOBPCG
//! stalls, so its residuals are preconditioned with the inverse Gram matrix
//! (one Cholesky factorization per call).

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    cholesky, euclidean_distance, norm, solve_lower, solve_upper_t, HingeState, Matrix, MlpParams, Tape, Var,
};
use crate::rng::RngStream;

/// Ritz vectors tracked per extremal end.
pub const LOBPCG_BLOCK: usize = 2;
pub const MAX_LOBPCG_ITERS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBounds {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub u_min: Vec<f64>,
    pub v_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub v_max: Vec<f64>,
    /// Set when the iterative solver broke down and the exact SVD was used.
    pub fell_back: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SvSolver {
    Exact,
    Lobpcg { iters: usize },
}

impl Default for SvSolver {
    fn default() -> Self {
        SvSolver::Lobpcg { iters: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiLipConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default)]
    pub solver: SvSolver,
}

impl Default for BiLipConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 1.0,
            solver: SvSolver::default(),
        }
    }
}

impl BiLipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda1 <= self.lambda2) {
            return Err(Error::Config(format!(
                "need 0 < lambda1 <= lambda2, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if let SvSolver::Lobpcg { iters } = self.solver {
            if !(1..=MAX_LOBPCG_ITERS).contains(&iters) {
                return Err(Error::Config(format!("lobpcg iterations {iters} outside [1, 50]")));
            }
        }
        Ok(())
    }

    pub fn bounds(&self, w: &Matrix, rng: &mut RngStream) -> Result<SpectralBounds> {
        match self.solver {
            SvSolver::Exact => exact_extremal_sv(w),
            SvSolver::Lobpcg { iters } => lobpcg_extremal_sv(w, iters, rng),
        }
    }
}

fn unit(n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    if n > 0 {
        v[0] = 1.0;
    }
    v
}

fn to_dmatrix(w: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(w.rows(), w.cols(), w.data())
}

/// Extremal singular values from a full SVD. A zero matrix yields zeros with
/// arbitrary unit vectors.
pub fn exact_extremal_sv(w: &Matrix) -> Result<SpectralBounds> {
    let (p, q) = w.shape();
    if p == 0 || q == 0 {
        return Err(Error::Contract("singular values of an empty matrix".into()));
    }
    if w.data().iter().all(|&v| v == 0.0) {
        return Ok(SpectralBounds {
            sigma_min: 0.0,
            sigma_max: 0.0,
            u_min: unit(p),
            v_min: unit(q),
            u_max: unit(p),
            v_max: unit(q),
            fell_back: false,
        });
    }
    let svd = to_dmatrix(w).svd(true, true);
    let (u, vt) = match (&svd.u, &svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::NonFinite("svd did not produce singular vectors".into())),
    };
    let s = &svd.singular_values;
    let (mut imax, mut imin) = (0, 0);
    for i in 0..s.len() {
        if s[i] > s[imax] {
            imax = i;
        }
        if s[i] < s[imin] {
            imin = i;
        }
    }
    Ok(SpectralBounds {
        sigma_min: s[imin],
        sigma_max: s[imax],
        u_min: u.column(imin).iter().copied().collect(),
        v_min: vt.row(imin).iter().copied().collect(),
        u_max: u.column(imax).iter().copied().collect(),
        v_max: vt.row(imax).iter().copied().collect(),
        fell_back: false,
    })
}

/// Gram operator `WᵀW` (when `q ≤ p`) or `WWᵀ`, applied without forming it.
struct Gram<'a> {
    w: &'a Matrix,
    right: bool,
}

impl Gram<'_> {
    fn dim(&self) -> usize {
        if self.right {
            self.w.cols()
        } else {
            self.w.rows()
        }
    }

    /// Apply to the columns of an `n × k` block.
    fn apply(&self, x: &Matrix) -> Matrix {
        if self.right {
            let wx = self.w.matmul(x).expect("gram shape");
            self.w.t_matmul(&wx).expect("gram shape")
        } else {
            let wtx = self.w.t_matmul(x).expect("gram shape");
            self.w.matmul(&wtx).expect("gram shape")
        }
    }

    fn dense(&self) -> Matrix {
        if self.right {
            self.w.t_matmul(self.w).expect("gram shape")
        } else {
            self.w.matmul_t(self.w).expect("gram shape")
        }
    }
}

/// Orthonormalize the columns of `s` with two passes of modified Gram-Schmidt,
/// dropping columns that become numerically dependent.
fn orthonormalize(s: &Matrix) -> Matrix {
    let n = s.rows();
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for j in 0..s.cols() {
        let mut v = s.column(j);
        let original = norm(&v);
        if original == 0.0 || !original.is_finite() {
            continue;
        }
        for _ in 0..2 {
            for q in &kept {
                let c: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
        let nv = norm(&v);
        if nv > 1e-10 * original && nv > 1e-300 {
            v.iter_mut().for_each(|x| *x /= nv);
            kept.push(v);
        }
    }
    Matrix::from_fn(n, kept.len(), |i, j| kept[j][i])
}

fn sym_eigen(h: &Matrix) -> Option<(Vec<f64>, Matrix)> {
    let n = h.rows();
    let sym = Matrix::from_fn(n, n, |i, j| 0.5 * (h.get(i, j) + h.get(j, i)));
    let eig = SymmetricEigen::try_new(to_dmatrix(&sym), f64::EPSILON, 10_000)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    values.iter().all(|v| v.is_finite()).then_some((values, vectors))
}

fn select_cols(m: &Matrix, cols: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), cols.len(), |i, j| m.get(i, cols[j]))
}

fn precondition(chol: &Matrix, r: &Matrix) -> Matrix {
    let cols: Vec<Vec<f64>> = (0..r.cols())
        .map(|j| solve_upper_t(chol, &solve_lower(chol, &r.column(j))))
        .collect();
    Matrix::from_fn(r.rows(), r.cols(), |i, j| cols[j][i])
}

/// Block LOBPCG for the extremal eigenpair of a symmetric PSD operator, with
/// an optional preconditioner given as a Cholesky factor of its inverse.
/// Returns `(eigenvalue, eigenvector)` or `None` on breakdown.
fn lobpcg_extremal(
    op: &Gram<'_>,
    iters: usize,
    largest: bool,
    precond: Option<&Matrix>,
    rng: &mut RngStream,
) -> Option<(f64, Vec<f64>)> {
    let n = op.dim();
    let k = LOBPCG_BLOCK.min(n);
    // Tiny problems: the search space already spans everything.
    if n <= 3 * k {
        let (vals, vecs) = sym_eigen(&op.dense())?;
        let idx = if largest { n - 1 } else { 0 };
        return Some((vals[idx], vecs.column(idx)));
    }

    let init = Matrix::from_fn(n, k, |_, _| rng.standard_normal());
    let mut x = orthonormalize(&init);
    if x.cols() < k {
        return None;
    }
    let ax = op.apply(&x);
    let (vals, c) = sym_eigen(&x.t_matmul(&ax).ok()?)?;
    let pick: Vec<usize> = if largest { (0..k).rev().collect() } else { (0..k).collect() };
    let c = select_cols(&c, &pick);
    x = x.matmul(&c).ok()?;
    let mut ax = ax.matmul(&c).ok()?;
    let mut theta: Vec<f64> = pick.iter().map(|&i| vals[i]).collect();
    let mut p: Option<Matrix> = None;

    for _ in 0..iters {
        let r = Matrix::from_fn(n, k, |i, j| ax.get(i, j) - theta[j] * x.get(i, j));
        let scale = theta.iter().fold(0.0f64, |m, t| m.max(t.abs())).max(f64::MIN_POSITIVE);
        if (0..k).all(|j| norm(&r.column(j)) <= 1e-14 * scale) {
            break;
        }
        let r = match precond {
            Some(l) => precondition(l, &r),
            None => r,
        };
        let blocks = match &p {
            Some(p) => [&x, &r, p].into_iter().cloned().collect::<Vec<_>>(),
            None => vec![x.clone(), r],
        };
        let total: usize = blocks.iter().map(Matrix::cols).sum();
        let s = Matrix::from_fn(n, total, |i, j| {
            let mut j = j;
            for b in &blocks {
                if j < b.cols() {
                    return b.get(i, j);
                }
                j -= b.cols();
            }
            unreachable!()
        });
        let q = orthonormalize(&s);
        if q.cols() < k || !q.is_finite() {
            return None;
        }
        let aq = op.apply(&q);
        let h = q.t_matmul(&aq).ok()?;
        let (vals, y) = sym_eigen(&h)?;
        let m = vals.len();
        let pick: Vec<usize> = if largest { (m - k..m).rev().collect() } else { (0..k).collect() };
        let c = select_cols(&y, &pick);
        theta = pick.iter().map(|&i| vals[i]).collect();
        let x_new = q.matmul(&c).ok()?;
        ax = aq.matmul(&c).ok()?;
        // The first k columns of q span the current block, so the remaining
        // coefficients give the implicit conjugate direction.
        let mut c_rest = c.clone();
        for i in 0..k.min(m) {
            c_rest.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
        p = Some(q.matmul(&c_rest).ok()?);
        x = x_new;
    }
    let v = x.column(0);
    if !theta[0].is_finite() || !v.iter().all(|t| t.is_finite()) {
        return None;
    }
    Some((theta[0].max(0.0), v))
}

/// Complete a singular pair from an eigenvector of the Gram operator.
fn singular_pair(w: &Matrix, right: bool, vec: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (image, n_other) = if right {
        (w.matvec(vec).expect("shape"), w.rows())
    } else {
        (w.transpose().matvec(vec).expect("shape"), w.cols())
    };
    let sigma = norm(&image);
    let other = if sigma > 1e-300 {
        image.iter().map(|v| v / sigma).collect()
    } else {
        unit(n_other)
    };
    if right {
        (sigma, other, vec.to_vec())
    } else {
        (sigma, vec.to_vec(), other)
    }
}

/// Approximate extremal singular values with `iters` LOBPCG iterations per end.
pub fn lobpcg_extremal_sv(w: &Matrix, iters: usize, rng: &mut RngStream) -> Result<SpectralBounds> {
    if iters == 0 {
        return Err(Error::Contract("lobpcg needs at least one iteration".into()));
    }
    let (p, q) = w.shape();
    if p == 0 || q == 0 {
        return Err(Error::Contract("singular values of an empty matrix".into()));
    }
    let op = Gram { w, right: q <= p };
    let hi = lobpcg_extremal(&op, iters, true, None, rng);
    let chol = if op.dim() > 3 * LOBPCG_BLOCK {
        cholesky(&op.dense()).ok()
    } else {
        None
    };
    let lo = lobpcg_extremal(&op, iters, false, chol.as_ref(), rng);
    let (Some((_, vmax)), Some((_, vmin))) = (hi, lo) else {
        let mut exact = exact_extremal_sv(w)?;
        exact.fell_back = true;
        return Ok(exact);
    };
    let (sigma_max, u_max, v_max) = singular_pair(w, op.right, &vmax);
    let (sigma_min, u_min, v_min) = singular_pair(w, op.right, &vmin);
    Ok(SpectralBounds {
        sigma_min: sigma_min.min(sigma_max),
        sigma_max,
        u_min,
        v_min,
        u_max,
        v_max,
        fell_back: false,
    })
}

fn hinge_value(b: &SpectralBounds, cfg: &BiLipConfig) -> f64 {
    let lo = (cfg.lambda1 - b.sigma_min).max(0.0);
    let hi = (b.sigma_max - cfg.lambda2).max(0.0);
    lo * lo + hi * hi
}

/// Penalty value `Σ_l max(0, λ₁−σ_min)² + max(0, σ_max−λ₂)²` over every layer of `net`.
pub fn bilip_loss(net: &MlpParams, cfg: &BiLipConfig, rng: &mut RngStream) -> Result<f64> {
    net.layers
        .iter()
        .map(|l| cfg.bounds(&l.weight, rng).map(|b| hinge_value(&b, cfg)))
        .sum()
}

/// Record the penalty for the given weight leaves on a tape and return the
/// scalar node, or `None` when no weights are given.
pub fn bilip_loss_on_tape(
    tape: &mut Tape<'_>,
    weights: &[Var],
    cfg: &BiLipConfig,
    rng: &mut RngStream,
) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for &w in weights {
        let b = cfg.bounds(tape.value(w), rng)?;
        let term = tape.spectral_hinge(
            w,
            HingeState {
                lower: cfg.lambda1,
                upper: cfg.lambda2,
                sigma_min: b.sigma_min,
                sigma_max: b.sigma_max,
                u_min: b.u_min,
                v_min: b.v_min,
                u_max: b.u_max,
                v_max: b.v_max,
            },
        );
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Penalty value and its gradient with respect to each layer weight of `net`.
pub fn bilip_loss_with_grad(net: &MlpParams, cfg: &BiLipConfig, rng: &mut RngStream) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let weights: Vec<Var> = net.layers.iter().map(|l| tape.param(&l.weight)).collect();
    match bilip_loss_on_tape(&mut tape, &weights, cfg, rng)? {
        Some(root) => {
            let g = tape.backward(root)?;
            Ok((tape.scalar(root), weights.iter().map(|&w| g.wrt(w)).collect()))
        }
        None => Ok((0.0, Vec::new())),
    }
}

/// Pairwise distance ratios `d_U / d_X` of a mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub ratios: Vec<f64>,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// `max_ratio / min_ratio`; infinite when some distinct pair collapses.
    pub spread: f64,
    /// Pairs dropped because both points coincide.
    pub skipped: usize,
}

pub fn distortion_report(net: &MlpParams, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<DistortionReport> {
    distortion_report_with(|x| net.forward(x), pairs)
}

/// Distortion of an arbitrary mapping `h` over the given input pairs.
pub fn distortion_report_with<F>(h: F, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<DistortionReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut ratios = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for (a, b) in pairs {
        let dx = euclidean_distance(a, b);
        if dx == 0.0 {
            skipped += 1;
            continue;
        }
        ratios.push(euclidean_distance(&h(a)?, &h(b)?) / dx);
    }
    let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let spread = if ratios.is_empty() {
        f64::NAN
    } else if min_ratio > 0.0 {
        max_ratio / min_ratio
    } else {
        f64::INFINITY
    };
    Ok(DistortionReport {
        ratios,
        min_ratio,
        max_ratio,
        spread,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Activation, Dense};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    fn layer(w: Matrix) -> Dense {
        let out = w.rows();
        Dense {
            weight: w,
            bias: Matrix::zeros(1, out),
            activation: Activation::Identity,
        }
    }

    #[test]
    fn exact_identity_and_diagonal() {
        let b = exact_extremal_sv(&Matrix::identity(3)).unwrap();
        assert!((b.sigma_min - 1.0).abs() < 1e-12 && (b.sigma_max - 1.0).abs() < 1e-12);
        let b = exact_extremal_sv(&Matrix::diag(&[2.0, 0.5])).unwrap();
        assert!(rel(b.sigma_min, 0.5) < 1e-12 && rel(b.sigma_max, 2.0) < 1e-12);
    }

    #[test]
    fn exact_vectors_satisfy_definition() {
        let mut rng = RngStream::new(1);
        let w = Matrix::from_fn(8, 5, |_, _| rng.standard_normal());
        let b = exact_extremal_sv(&w).unwrap();
        for (s, u, v) in [(b.sigma_min, &b.u_min, &b.v_min), (b.sigma_max, &b.u_max, &b.v_max)] {
            let wv = w.matvec(v).unwrap();
            for (x, y) in wv.iter().zip(u.iter()) {
                assert!((x - s * y).abs() < 1e-10);
            }
            assert!((norm(u) - 1.0).abs() < 1e-8 && (norm(v) - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_matrix_is_all_zero() {
        let b = exact_extremal_sv(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!((b.sigma_min, b.sigma_max), (0.0, 0.0));
        let mut rng = RngStream::new(0);
        let b = lobpcg_extremal_sv(&Matrix::zeros(12, 12), 5, &mut rng).unwrap();
        assert_eq!(b.sigma_max, 0.0);
    }

    #[test]
    fn lobpcg_identity_any_iteration_count() {
        let mut rng = RngStream::new(3);
        for iters in [1, 3, 10] {
            let b = lobpcg_extremal_sv(&Matrix::identity(16), iters, &mut rng).unwrap();
            assert!(rel(b.sigma_min, 1.0) < 1e-10 && rel(b.sigma_max, 1.0) < 1e-10);
        }
    }

    #[test]
    fn lobpcg_diagonal() {
        let mut rng = RngStream::new(4);
        let b = lobpcg_extremal_sv(&Matrix::diag(&[3.0, 1.0, 0.2]), 10, &mut rng).unwrap();
        assert!(rel(b.sigma_min, 0.2) < 1e-3 && rel(b.sigma_max, 3.0) < 1e-3);
        // Larger diagonal so the iterative branch runs.
        let d: Vec<f64> = (0..20).map(|i| 0.2 + 0.14 * i as f64).collect();
        let b = lobpcg_extremal_sv(&Matrix::diag(&d), 10, &mut rng).unwrap();
        assert!(rel(b.sigma_min, 0.2) < 1e-3, "{}", b.sigma_min);
        assert!(rel(b.sigma_max, d[19]) < 1e-3);
    }

    #[test]
    fn lobpcg_rectangular_uses_smaller_gram() {
        let mut rng = RngStream::new(5);
        for (p, q) in [(30, 9), (9, 30), (40, 1), (1, 40)] {
            let w = Matrix::from_fn(p, q, |_, _| rng.standard_normal());
            let e = exact_extremal_sv(&w).unwrap();
            let b = lobpcg_extremal_sv(&w, 20, &mut rng).unwrap();
            assert!(rel(b.sigma_max, e.sigma_max) < 1e-6, "{p}x{q}");
            assert!(rel(b.sigma_min, e.sigma_min) < 1e-4, "{p}x{q}: {} vs {}", b.sigma_min, e.sigma_min);
            assert_eq!(b.u_max.len(), p);
            assert_eq!(b.v_max.len(), q);
        }
    }

    #[test]
    fn loss_zero_inside_bounds() {
        let net = MlpParams::new(vec![layer(Matrix::diag(&[0.5, 0.9])), layer(Matrix::identity(2))]).unwrap();
        let cfg = BiLipConfig {
            solver: SvSolver::Exact,
            ..Default::default()
        };
        assert_eq!(bilip_loss(&net, &cfg, &mut RngStream::new(0)).unwrap(), 0.0);
    }

    #[test]
    fn loss_direct_formula() {
        let net = MlpParams::new(vec![layer(Matrix::diag(&[1.5, 0.5]))]).unwrap();
        let cfg = BiLipConfig {
            solver: SvSolver::Exact,
            ..Default::default()
        };
        let v = bilip_loss(&net, &cfg, &mut RngStream::new(0)).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        let net = MlpParams::new(vec![layer(Matrix::diag(&[1.5, 0.05]))]).unwrap();
        let v = bilip_loss(&net, &cfg, &mut RngStream::new(0)).unwrap();
        assert!((v - (0.25 + 0.05f64.powi(2))).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(8);
        let w = Matrix::from_fn(4, 4, |_, _| rng.standard_normal() * 0.8);
        let cfg = BiLipConfig {
            lambda1: 0.4,
            lambda2: 1.0,
            solver: SvSolver::Exact,
        };
        let net = MlpParams::new(vec![layer(w.clone())]).unwrap();
        let (v, g) = bilip_loss_with_grad(&net, &cfg, &mut rng).unwrap();
        assert!(v > 0.0);
        let h = 1e-5;
        for i in 0..16 {
            let mut plus = net.clone();
            let mut minus = net.clone();
            plus.layers[0].weight.data_mut()[i] += h;
            minus.layers[0].weight.data_mut()[i] -= h;
            let fd = (bilip_loss(&plus, &cfg, &mut rng).unwrap() - bilip_loss(&minus, &cfg, &mut rng).unwrap()) / (2.0 * h);
            let a = g[0].data()[i];
            assert!((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6) < 1e-4, "{i}: {fd} vs {a}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(BiLipConfig::default().validate().is_ok());
        let equal = BiLipConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            ..Default::default()
        };
        assert!(equal.validate().is_ok());
        let bad = BiLipConfig {
            lambda1: 1.2,
            lambda2: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad_t = BiLipConfig {
            solver: SvSolver::Lobpcg { iters: 51 },
            ..Default::default()
        };
        assert!(bad_t.validate().is_err());
    }

    #[test]
    fn distortion_of_linear_maps() {
        let pairs = vec![
            (vec![0.0, 0.0], vec![1.0, 2.0]),
            (vec![-1.0, 0.5], vec![3.0, 0.0]),
            (vec![1.0, 1.0], vec![1.0, 1.0]),
        ];
        let id = MlpParams::new(vec![layer(Matrix::identity(2))]).unwrap();
        let r = distortion_report(&id, &pairs).unwrap();
        assert_eq!(r.skipped, 1);
        assert!(r.ratios.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        assert!((r.spread - 1.0).abs() < 1e-12);
        let twice = MlpParams::new(vec![layer(Matrix::identity(2).scale(2.0))]).unwrap();
        let r = distortion_report(&twice, &pairs).unwrap();
        assert!(r.ratios.iter().all(|&x| (x - 2.0).abs() < 1e-12));
        assert!((r.spread - 1.0).abs() < 1e-12);
    }
}
