//! The smoother operator in spectral form, GCV selection and AMSE bookkeeping.
//!
//! Every penalized regression in this crate reduces to the same shape: an
//! n x k matrix with orthonormal columns and a nonnegative diagonal penalty,
//! so that the smoother `S = (I + n*lambda*Gamma)^{-1}` (restricted to the
//! kept columns) acts coordinatewise with shrink factors `1/(1 + lambda*mu_k)`.
//! Weighted fits and projected (RSR) bases are brought into the same form by
//! a Cholesky + symmetric-eigenvalue reduction.

use ndarray::{s, Array1, Array2};
use ndarray_linalg::{Cholesky, Eigh, Inverse, UPLO};

use crate::basis::TpsBasis;
use crate::error::{Error, Result};

/// Relative threshold below which penalty eigenvalues are clamped to zero.
const EIGENVALUE_CLAMP: f64 = 1e-8;

/// A reusable spectral factorization of a penalized least squares smoother.
#[derive(Debug, Clone)]
pub struct SmootherOperator {
    columns: Array2<f64>,
    eigenvalues: Array1<f64>,
    null_dim: usize,
    coef_map: Option<Array2<f64>>,
}

/// Extracts the Demmler-Reinsch form of a thin plate basis: eigenpairs of
/// n*Gamma in ascending order with the leading null-space values clamped to
/// exactly zero.
pub fn spectral_decompose(basis: &TpsBasis) -> Result<SmootherOperator> {
    let mut eigenvalues = basis.penalty_eigenvalues().clone();
    clamp_eigenvalues(&mut eigenvalues);
    let null_dim = eigenvalues.iter().filter(|&&v| v == 0.0).count();
    Ok(SmootherOperator {
        columns: basis.columns().clone(),
        eigenvalues,
        null_dim,
        coef_map: None,
    })
}

/// Reduces a penalized block with general (full column rank) columns `B` and
/// diagonal penalty `D` to orthonormal spectral form: with `B'B = LL'` and
/// `L^{-1} D L^{-T} = U diag(theta) U'`, the columns `P = B L^{-T} U` are
/// orthonormal and fitted values are `P diag(1/(1+lambda*theta)) P' y`.
pub fn from_penalized_columns(columns: &Array2<f64>, penalty: &Array1<f64>) -> Result<SmootherOperator> {
    let k = columns.ncols();
    if penalty.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "penalty length {} does not match {} columns",
            penalty.len(),
            k
        )));
    }
    let gram = columns.t().dot(columns);
    let l = gram
        .cholesky(UPLO::Lower)
        .map_err(|_| Error::SingularDesign)?;
    let l_inv = l.inv().map_err(|_| Error::SingularDesign)?;
    // G = L^{-1} D L^{-T}, built by scaling columns of L^{-1} before the product.
    let mut scaled = l_inv.clone();
    for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|v| v * penalty[j]);
    }
    let g = scaled.dot(&l_inv.t());
    let g = 0.5 * (&g + &g.t());
    let (mut theta, u) = g
        .eigh(UPLO::Lower)
        .map_err(|e| Error::EigenFailure(e.to_string()))?;
    clamp_eigenvalues(&mut theta);
    let null_dim = theta.iter().filter(|&&v| v == 0.0).count();
    let coef_map = l_inv.t().dot(&u);
    let cols = columns.dot(&coef_map);
    Ok(SmootherOperator {
        columns: cols,
        eigenvalues: theta,
        null_dim,
        coef_map: Some(coef_map),
    })
}

fn clamp_eigenvalues(values: &mut Array1<f64>) {
    let max = values.iter().fold(0f64, |a, v| a.max(v.abs()));
    let tol = EIGENVALUE_CLAMP * max;
    values.mapv_inplace(|v| if v.abs() <= tol { 0.0 } else { v.max(0.0) });
}

impl SmootherOperator {
    pub fn n(&self) -> usize {
        self.columns.nrows()
    }

    pub fn rank(&self) -> usize {
        self.columns.ncols()
    }

    pub fn null_dim(&self) -> usize {
        self.null_dim
    }

    pub fn eigenvalues(&self) -> &Array1<f64> {
        &self.eigenvalues
    }

    pub fn columns(&self) -> &Array2<f64> {
        &self.columns
    }

    /// Map from spectral coordinates back to coefficients of the original
    /// columns, present only for operators built via [`from_penalized_columns`].
    pub fn coefficient_map(&self) -> Option<&Array2<f64>> {
        self.coef_map.as_ref()
    }

    /// Drops the leading column. Only meaningful for operators built from a
    /// `TpsBasis`, where the first column is the normalized constant; used to
    /// keep models with an explicit intercept identifiable.
    pub fn without_constant_column(&self) -> SmootherOperator {
        assert!(self.null_dim >= 1, "no null-space column to drop");
        SmootherOperator {
            columns: self.columns.slice(s![.., 1..]).to_owned(),
            eigenvalues: self.eigenvalues.slice(s![1..]).to_owned(),
            null_dim: self.null_dim - 1,
            coef_map: None,
        }
    }

    /// Shrink factors `1/(1 + lambda*mu_k)`; `lambda = 0` gives the plain
    /// projection onto the basis columns (the unpenalized `fx` fit).
    pub fn shrink_factors(&self, lambda: f64) -> Array1<f64> {
        self.eigenvalues.mapv(|mu| 1.0 / (1.0 + lambda * mu))
    }

    pub fn coefficients(&self, y: &Array1<f64>) -> Array1<f64> {
        self.columns.t().dot(y)
    }

    /// `Phi (s .* Phi' y)` for precomputed shrink factors.
    pub fn apply_factors(&self, y: &Array1<f64>, factors: &Array1<f64>) -> Array1<f64> {
        let mut c = self.coefficients(y);
        c *= factors;
        self.columns.dot(&c)
    }

    pub fn apply(&self, y: &Array1<f64>, lambda: f64) -> Array1<f64> {
        let s = self.shrink_factors(lambda);
        self.apply_factors(y, &s)
    }

    /// Projection onto the basis columns (the `lambda -> 0` limit at full rank).
    pub fn project(&self, y: &Array1<f64>) -> Array1<f64> {
        self.columns.dot(&self.coefficients(y))
    }

    pub fn trace(&self, lambda: f64) -> f64 {
        self.shrink_factors(lambda).sum()
    }

    pub fn trace_sq(&self, lambda: f64) -> f64 {
        self.shrink_factors(lambda).mapv(|v| v * v).sum()
    }
}

/// `S_lambda y`: the thin plate spline fitted to the data `y`.
pub fn apply_smoother(op: &SmootherOperator, y: &Array1<f64>, lambda: f64) -> Result<Array1<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositiveLambda(lambda));
    }
    check_len(op, y)?;
    Ok(op.apply(y, lambda))
}

fn check_len(op: &SmootherOperator, y: &Array1<f64>) -> Result<()> {
    if y.len() != op.n() {
        return Err(Error::DimensionMismatch(format!(
            "vector length {} does not match operator size {}",
            y.len(),
            op.n()
        )));
    }
    Ok(())
}

/// Smoother-only GCV score `n ||(I - S)y||^2 / (n - tr S)^2`.
pub fn gcv_score(op: &SmootherOperator, y: &Array1<f64>, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::NonPositiveLambda(lambda));
    }
    check_len(op, y)?;
    let n = op.n() as f64;
    let s = op.shrink_factors(lambda);
    let edf = s.sum();
    if n - edf <= 1e-8 * n {
        return Err(Error::DegenerateDenominator { edf, n: op.n() });
    }
    let u = op.coefficients(y);
    let rss = residual_sum_of_squares(y, &u, &s);
    Ok(n * rss / ((n - edf) * (n - edf)))
}

fn residual_sum_of_squares(y: &Array1<f64>, coeffs: &Array1<f64>, s: &Array1<f64>) -> f64 {
    let yty = y.dot(y);
    let mut shrunk = 0.0;
    for (u, sv) in coeffs.iter().zip(s.iter()) {
        shrunk += (2.0 * sv - sv * sv) * u * u;
    }
    (yty - shrunk).max(0.0)
}

/// Grid minimizer of the smoother-only GCV score, ties broken toward more
/// smoothing. Grid points whose denominator degenerates are skipped.
pub fn select_lambda(op: &SmootherOperator, y: &Array1<f64>, grid: &[f64]) -> Result<f64> {
    select_lambda_by(grid, |lambda| gcv_score(op, y, lambda))
}

/// Shared grid-search driver: evaluates `score`, skips degenerate points,
/// keeps the largest minimizer.
pub fn select_lambda_by<F>(grid: &[f64], mut score: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut best: Option<(f64, f64)> = None;
    let mut last_err = None;
    for &lambda in grid {
        match score(lambda) {
            Ok(v) => {
                let take = match best {
                    None => true,
                    Some((_, bv)) => v <= bv,
                };
                if take {
                    best = Some((lambda, v));
                }
            }
            Err(e @ Error::DegenerateDenominator { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((lambda, _)) => Ok(lambda),
        None => Err(last_err.unwrap_or(Error::EmptyGrid)),
    }
}

/// The default 30-point log-spaced grid spanning `[1e-8, 1e4] / n`.
pub fn default_lambda_grid(n: usize) -> Vec<f64> {
    log_spaced(1e-8 / n as f64, 1e4 / n as f64, 30)
}

pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && count >= 2);
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (llo + (lhi - llo) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Summary of a smoother-only fit.
#[derive(Debug, Clone)]
pub struct SmoothFitDiagnostics {
    pub edf: f64,
    pub gcv: f64,
    pub rss: f64,
    pub sigma_hat: f64,
}

pub fn smoother_diagnostics(
    op: &SmootherOperator,
    y: &Array1<f64>,
    lambda: f64,
) -> Result<SmoothFitDiagnostics> {
    let gcv = gcv_score(op, y, lambda)?;
    let s = op.shrink_factors(lambda);
    let edf = s.sum();
    let u = op.coefficients(y);
    let rss = residual_sum_of_squares(y, &u, &s);
    let n = op.n() as f64;
    Ok(SmoothFitDiagnostics {
        edf,
        gcv,
        rss,
        sigma_hat: (rss / (n - edf)).sqrt(),
    })
}

/// Average squared bias and average variance of a fitted spatial effect,
/// computed exactly from the linear form of the estimator.
#[derive(Debug, Clone, Copy)]
pub struct AmseComponents {
    pub avg_sq_bias: f64,
    pub avg_variance: f64,
}

impl AmseComponents {
    pub fn total(&self) -> f64 {
        self.avg_sq_bias + self.avg_variance
    }
}

/// Which estimator's spatial effect the AMSE is computed for.
pub enum AmseContext<'a> {
    /// `f_hat = S y` with no covariate term.
    SmootherOnly,
    /// Partial thin plate spline with a single covariate.
    PartialSpline { x: &'a Array1<f64> },
    /// Two-stage estimator; needs the residualization parameter and the true
    /// covariate effect (its bias has a beta-dependent component).
    SpatialPlus {
        x: &'a Array1<f64>,
        lambda_x: f64,
        beta_true: f64,
    },
    /// Single-lambda partial residual estimator.
    PartialResidual { x: &'a Array1<f64> },
}

pub fn amse_components(
    op: &SmootherOperator,
    f_true: &Array1<f64>,
    sigma: f64,
    lambda: f64,
    context: &AmseContext<'_>,
) -> Result<AmseComponents> {
    check_len(op, f_true)?;
    let n = op.n() as f64;
    let s = op.shrink_factors(lambda);
    let s_sq = s.mapv(|v| v * v);
    let trace_sq = s_sq.sum();
    let sf = op.apply_factors(f_true, &s);
    let ims_f = f_true - &sf;

    match context {
        AmseContext::SmootherOnly => Ok(AmseComponents {
            avg_sq_bias: ims_f.dot(&ims_f) / n,
            avg_variance: sigma * sigma * trace_sq / n,
        }),
        AmseContext::PartialSpline { x } => {
            let x = *x;
            let sx = op.apply_factors(x, &s);
            let ims_x = x - &sx;
            let denom = x.dot(&ims_x);
            if denom.abs() <= 1e-12 * x.dot(x) {
                return Err(Error::CollinearCovariateWithNullspace);
            }
            let g = &ims_x / denom;
            let g_f = g.dot(f_true);
            let bias = -&ims_f - &(&sx * g_f);
            let s2x = op.apply_factors(x, &s_sq);
            let var = sigma * sigma / n
                * (trace_sq - 2.0 * g.dot(&s2x) + g.dot(&g) * x.dot(&s2x));
            Ok(AmseComponents {
                avg_sq_bias: bias.dot(&bias) / n,
                avg_variance: var,
            })
        }
        AmseContext::SpatialPlus {
            x,
            lambda_x,
            beta_true,
        } => {
            let x = *x;
            let sx_factors = op.shrink_factors(*lambda_x);
            let v = op.apply_factors(x, &sx_factors); // S_{lambda_x} x
            let r = x - &v;
            let b = &r - &op.apply_factors(&r, &s); // (I - S) r
            let q = r.dot(&b);
            if q.abs() <= 1e-12 * x.dot(x) {
                return Err(Error::DegenerateResiduals {
                    index: 0,
                    ratio: (q.abs() / x.dot(x)).sqrt(),
                });
            }
            let beta_bias = (beta_true * b.dot(&v) + b.dot(f_true)) / q;
            let h = op.apply_factors(x, &s) + &v - op.apply_factors(&v, &s);
            let ims_v = &v - &op.apply_factors(&v, &s);
            let bias = -&ims_f - &(&h * beta_bias) - &(&ims_v * *beta_true);
            let sb = op.apply_factors(&b, &s);
            let var = sigma * sigma / n
                * (trace_sq - 2.0 * h.dot(&sb) / q + h.dot(&h) * b.dot(&b) / (q * q));
            Ok(AmseComponents {
                avg_sq_bias: bias.dot(&bias) / n,
                avg_variance: var,
            })
        }
        AmseContext::PartialResidual { x } => {
            let x = *x;
            let sx = op.apply_factors(x, &s);
            let s2x = op.apply_factors(x, &s_sq);
            let r2 = x - &(2.0 * &sx) + &s2x; // (I - S)^2 x
            let denom = x.dot(&r2);
            if denom.abs() <= 1e-12 * x.dot(x) {
                return Err(Error::CollinearCovariateWithNullspace);
            }
            let g = &r2 / denom;
            let g_f = g.dot(f_true);
            let bias = -&ims_f - &(&sx * g_f);
            let var = sigma * sigma / n
                * (trace_sq - 2.0 * g.dot(&s2x) + g.dot(&g) * x.dot(&s2x));
            Ok(AmseComponents {
                avg_sq_bias: bias.dot(&bias) / n,
                avg_variance: var,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis, LocationSet};
    use approx::assert_relative_eq;
    use ndarray::{Array2, ArrayView1};
    use ndarray_linalg::Solve;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn line_locations(n: usize) -> LocationSet {
        let mut pts = Array2::zeros((n, 1));
        for i in 0..n {
            pts[[i, 0]] = 10.0 * i as f64 / (n - 1) as f64;
        }
        LocationSet::new(pts).unwrap()
    }

    fn grid_locations(side: usize) -> LocationSet {
        let mut pts = Array2::zeros((side * side, 2));
        for i in 0..side {
            for j in 0..side {
                pts[[i * side + j, 0]] = 10.0 * i as f64 / (side - 1) as f64;
                pts[[i * side + j, 1]] = 10.0 * j as f64 / (side - 1) as f64;
            }
        }
        LocationSet::new(pts).unwrap()
    }

    fn random_vector(rng: &mut impl Rng, n: usize) -> Array1<f64> {
        Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn first_m_eigenvalues_are_zero() {
        let basis = build_basis(grid_locations(5), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        assert_eq!(op.null_dim(), 3);
        assert_eq!(op.eigenvalues()[0], 0.0);
        assert_eq!(op.eigenvalues()[2], 0.0);
        assert!(op.eigenvalues()[3] > 0.0);
    }

    #[test]
    fn eigenpairs_reconstruct_n_gamma() {
        let basis = build_basis(grid_locations(4), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        let n = basis.n() as f64;
        let mut scaled = op.columns().clone();
        for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * op.eigenvalues()[j]);
        }
        let recon = scaled.dot(&op.columns().t());
        let target = basis.gamma() * n;
        let max = target.iter().fold(0f64, |a, v| a.max(v.abs()));
        let err = (&recon - &target).iter().fold(0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-6 * max, "err = {err}, max = {max}");
    }

    #[test]
    fn eigenvalue_growth_rate_on_regular_grid() {
        let basis = build_basis(grid_locations(16), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        let n = op.n();
        let m = op.null_dim();
        let (mut sx, mut sy, mut sxx, mut sxy, mut cnt) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in (m + 1)..=(n / 2) {
            let lx = (k as f64).ln();
            let ly = op.eigenvalues()[k - 1].ln();
            sx += lx;
            sy += ly;
            sxx += lx * lx;
            sxy += lx * ly;
            cnt += 1.0;
        }
        let slope = (cnt * sxy - sx * sy) / (cnt * sxx - sx * sx);
        assert!(
            (1.6..=2.4).contains(&slope),
            "spectrum growth slope {slope} outside [1.6, 2.4]"
        );
    }

    #[test]
    fn polynomial_data_pass_through_unshrunk() {
        let basis = build_basis(grid_locations(4), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        let y: Array1<f64> = basis
            .locations()
            .points()
            .rows()
            .into_iter()
            .map(|p| 1.0 + 2.0 * p[0] - 0.5 * p[1])
            .collect();
        let out = apply_smoother(&op, &y, 3.7).unwrap();
        for (a, b) in out.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn infinite_smoothing_limit_is_polynomial_projection() {
        let basis = build_basis(grid_locations(4), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = random_vector(&mut rng, basis.n());
        let smoothed = apply_smoother(&op, &y, 1e12).unwrap();
        // projection onto col(T) via normal equations
        let t = basis.polynomial();
        let coef = t.t().dot(t).solve(&t.t().dot(&y)).unwrap();
        let proj = t.dot(&coef);
        for (a, b) in smoothed.iter().zip(proj.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn smoother_matches_dense_linear_solve() {
        let n = 20;
        let basis = build_basis(line_locations(n), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = random_vector(&mut rng, n);
        let lambda = 1.0;
        let fast = apply_smoother(&op, &y, lambda).unwrap();
        let system = Array2::eye(n) + &(basis.gamma() * (n as f64 * lambda));
        let dense = system.solve(&y).unwrap();
        for (a, b) in fast.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_non_positive_lambda() {
        let basis = build_basis(line_locations(8), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        let y = Array1::zeros(8);
        assert!(matches!(
            apply_smoother(&op, &y, 0.0),
            Err(Error::NonPositiveLambda(_))
        ));
        assert!(matches!(
            apply_smoother(&op, &y, -1.0),
            Err(Error::NonPositiveLambda(_))
        ));
    }

    #[test]
    fn gcv_guards_degenerate_denominator() {
        let basis = build_basis(line_locations(10), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = random_vector(&mut rng, 10);
        assert!(matches!(
            gcv_score(&op, &y, 1e-300),
            Err(Error::DegenerateDenominator { .. })
        ));
    }

    #[test]
    fn gcv_on_pure_noise_smooths_heavily() {
        let n = 200;
        let basis = build_basis(line_locations(n), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        let grid = default_lambda_grid(n);
        let mut hits = 0;
        let seeds = 40;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Array1<f64> =
                Array1::from_iter((0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)));
            let lambda = select_lambda(&op, &y, &grid).unwrap();
            let edf = op.trace(lambda);
            if edf < 0.25 * n as f64 {
                hits += 1;
            }
        }
        assert!(hits * 100 >= 95 * seeds, "only {hits}/{seeds} seeds smoothed");
    }

    #[test]
    fn gcv_choice_beats_endpoints_out_of_sample() {
        let n_train = 80;
        let n_test = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut train_pts = Array2::zeros((n_train, 1));
        for i in 0..n_train {
            train_pts[[i, 0]] = 10.0 * (i as f64 + 0.3) / n_train as f64;
        }
        let truth = |x: f64| (x * 1.2).sin() + 0.4 * (2.3 * x).cos();
        let basis = build_basis(LocationSet::new(train_pts.clone()).unwrap(), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        let y: Array1<f64> = (0..n_train)
            .map(|i| truth(train_pts[[i, 0]]) + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let grid = default_lambda_grid(n_train);
        let chosen = select_lambda(&op, &y, &grid).unwrap();
        let oos = |lambda: f64| -> f64 {
            let fitted = op.apply(&y, lambda);
            let spline = basis.interpolant(&fitted).unwrap();
            (0..n_test)
                .map(|j| {
                    let x = 10.0 * (j as f64 + 0.5) / n_test as f64;
                    let p = [x];
                    let err = spline.evaluate(ArrayView1::from(&p)) - truth(x);
                    err * err
                })
                .sum::<f64>()
                / n_test as f64
        };
        let mse_chosen = oos(chosen);
        let mse_rough = oos(grid[0]);
        let mse_smooth = oos(*grid.last().unwrap());
        assert!(mse_chosen < mse_rough, "{mse_chosen} !< rough {mse_rough}");
        assert!(mse_chosen < mse_smooth, "{mse_chosen} !< smooth {mse_smooth}");
    }

    #[test]
    fn single_element_grid_is_returned() {
        let basis = build_basis(line_locations(12), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = random_vector(&mut rng, 12);
        assert_eq!(select_lambda(&op, &y, &[0.37]).unwrap(), 0.37);
    }

    #[test]
    fn ties_break_toward_more_smoothing() {
        let basis = build_basis(line_locations(12), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        // polynomial data: zero residual at every lambda, so all

        // scores tie at zero and the largest grid value must win
        let y: Array1<f64> = basis
            .locations()
            .points()
            .rows()
            .into_iter()
            .map(|p| 2.0 - 0.3 * p[0])
            .collect();
        let grid = [0.01, 0.1, 1.0, 10.0];
        assert_eq!(select_lambda(&op, &y, &grid).unwrap(), 10.0);
    }

    #[test]
    fn interior_optimum_is_found_on_most_seeds() {
        let n = 100;
        let basis = build_basis(line_locations(n), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        let grid = default_lambda_grid(n);
        let mut interior = 0;
        let seeds = 20;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let y: Array1<f64> = basis
                .locations()
                .points()
                .rows()
                .into_iter()
                .map(|p| (p[0] * 0.9).sin() + 0.4 * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            let lambda = select_lambda(&op, &y, &grid).unwrap();
            if lambda > grid[0] && lambda < *grid.last().unwrap() {
                interior += 1;
            }
        }
        assert!(interior * 10 >= 9 * seeds, "{interior}/{seeds} interior");
    }

    #[test]
    fn trace_is_monotone_with_correct_limits() {
        let basis = build_basis(grid_locations(5), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        let grid = log_spaced(1e-10, 1e10, 24);
        let mut prev = f64::INFINITY;
        for &l in &grid {
            let t = op.trace(l);
            assert!(t < prev);
            prev = t;
        }
        assert_relative_eq!(op.trace(1e-14), op.rank() as f64, max_relative = 1e-3);
        assert_relative_eq!(op.trace(1e14), op.null_dim() as f64, max_relative = 1e-3);
    }

    #[test]
    fn residuals_are_orthogonal_to_polynomials() {
        let basis = build_basis(grid_locations(5), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = random_vector(&mut rng, basis.n());
        let resid = &y - &op.apply(&y, 0.8);
        let t_resid = basis.polynomial().t().dot(&resid);
        for v in t_resid.iter() {
            assert!(v.abs() < 1e-8, "T'(I-S)y component = {v}");
        }
    }

    #[test]
    fn amse_limits_match_theory() {
        let basis = build_basis(line_locations(30), 2).unwrap();
        let op = spectral_decompose(&basis).unwrap();
        let f: Array1<f64> = basis
            .locations()
            .points()
            .rows()
            .into_iter()
            .map(|p| (0.7 * p[0]).sin())
            .collect();
        let sigma = 1.3;
        // lambda -> 0 at full rank: interpolation is unbiased
        let tiny = amse_components(&op, &f, sigma, 1e-12, &AmseContext::SmootherOnly).unwrap();
        assert!(tiny.avg_sq_bias < 1e-10);
        // lambda -> infinity: variance of the polynomial regression
        let huge = amse_components(&op, &f, sigma, 1e14, &AmseContext::SmootherOnly).unwrap();
        let n = op.n() as f64;
        assert_relative_eq!(
            huge.avg_variance,
            sigma * sigma * op.null_dim() as f64 / n,
            max_relative = 1e-6
        );
        // smoother-only squared bias identity
        let mid = amse_components(&op, &f, sigma, 0.3, &AmseContext::SmootherOnly).unwrap();
        let ims_f = &f - &op.apply(&f, 0.3);
        assert_relative_eq!(mid.avg_sq_bias, ims_f.dot(&ims_f) / n, max_relative = 1e-10);
    }

    #[test]
    fn penalized_column_reduction_matches_dense_solve() {
        let basis = build_basis(line_locations(15), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // a non-orthonormal column set: the basis columns mixed by a random matrix
        let k = 6;
        let mix = Array2::from_shape_fn((basis.n(), k), |_| rng.random_range(-1.0..1.0));
        let cols = basis.columns().slice(s![.., ..k]).to_owned() + 0.1 * &mix;
        let penalty = Array1::from_iter((0..k).map(|j| j as f64 * 0.7));
        let op = from_penalized_columns(&cols, &penalty).unwrap();
        let y = random_vector(&mut rng, basis.n());
        let lambda = 0.9;
        let fast = op.apply(&y, lambda);
        // dense: fitted = B (B'B + lambda D)^{-1} B' y
        let mut system = cols.t().dot(&cols);
        for j in 0..k {
            system[[j, j]] += lambda * penalty[j];
        }
        let coef = system.solve(&cols.t().dot(&y)).unwrap();
        let dense = cols.dot(&coef);
        for (a, b) in fast.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        // coefficient map recovers the same coefficients
        let m = op.coefficient_map().unwrap();
        let spectral = {
            let mut c = op.coefficients(&y);
            c *= &op.shrink_factors(lambda);
            m.dot(&c)
        };
        for (a, b) in spectral.iter().zip(coef.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
