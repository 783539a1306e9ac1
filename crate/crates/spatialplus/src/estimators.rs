//! Gaussian-response estimators of the covariate effect under spatial
//! confounding: null, spatial (partial thin plate spline), RSR, gSEM,
//! spatial+ and the partial-residual estimator, each in penalized and
//! unpenalized (`fx`) variants.
//!
//! All penalized fits are driven by the spectral smoother form, so the
//! closed-form expressions
//! `beta = (X'(I-S)X)^{-1} X'(I-S)y` (spatial),
//! `beta = (r'(I-S)r)^{-1} r'(I-S)y` (spatial+) and
//! `beta = (X'(I-S)^2 X)^{-1} X'(I-S)^2 y` (partial residual)
//! are evaluated without ever materializing an n x n smoother.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::basis::TpsBasis;
use crate::error::{Error, Result};
use crate::smoothing::{
    default_lambda_grid, from_penalized_columns, select_lambda_by, spectral_decompose,
    SmootherOperator,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Null,
    Spatial,
    Rsr,
    Gsem,
    SpatialPlus,
    PartialResidual,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Null => "null",
            ModelKind::Spatial => "spatial",
            ModelKind::Rsr => "rsr",
            ModelKind::Gsem => "gsem",
            ModelKind::SpatialPlus => "spatial_plus",
            ModelKind::PartialResidual => "partial_residual",
        }
    }
}

/// Model identity plus whether smoothing penalties were applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelTag {
    pub kind: ModelKind,
    pub penalized: bool,
}

impl ModelTag {
    pub fn label(&self) -> String {
        if self.penalized {
            self.kind.name().to_string()
        } else {
            format!("{}_fx", self.kind.name())
        }
    }
}

impl std::fmt::Display for ModelTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// A regression instance: response, covariates, spatial basis and the
/// smoothing configuration shared by all estimators.
#[derive(Clone)]
pub struct RegressionProblem {
    pub y: Array1<f64>,
    /// Covariates of interest, one column each, excluding the intercept.
    pub covariates: Array2<f64>,
    pub intercept: bool,
    pub basis: Arc<TpsBasis>,
    /// Apply smoothing penalties (`false` reproduces the `fx` variants).
    pub penalized: bool,
    /// Fixed main smoothing parameter; `None` selects by GCV.
    pub lambda: Option<f64>,
    /// Fixed residualization parameter for gSEM/spatial+; `None` selects by
    /// GCV separately per covariate.
    pub lambda_x: Option<f64>,
}

impl RegressionProblem {
    pub fn new(y: Array1<f64>, covariates: Array2<f64>, basis: Arc<TpsBasis>) -> Result<Self> {
        let n = basis.n();
        if y.len() != n || covariates.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "problem dimensions disagree: y = {}, covariates = {} rows, basis = {n}",
                y.len(),
                covariates.nrows()
            )));
        }
        if covariates.ncols() == 0 {
            return Err(Error::DimensionMismatch(
                "at least one covariate column is required".into(),
            ));
        }
        Ok(Self {
            y,
            covariates,
            intercept: false,
            basis,
            penalized: true,
            lambda: None,
            lambda_x: None,
        })
    }

    pub fn with_intercept(mut self, intercept: bool) -> Self {
        self.intercept = intercept;
        self
    }

    pub fn unpenalized(mut self) -> Self {
        self.penalized = false;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn with_lambda_x(mut self, lambda_x: f64) -> Self {
        self.lambda_x = Some(lambda_x);
        self
    }

    /// Design matrix with the intercept column prepended when requested.
    pub fn design(&self) -> Array2<f64> {
        if self.intercept {
            let n = self.y.len();
            let mut x = Array2::ones((n, self.covariates.ncols() + 1));
            x.slice_mut(ndarray::s![.., 1..]).assign(&self.covariates);
            x
        } else {
            self.covariates.clone()
        }
    }

    /// Names aligned with the columns of [`design`].
    pub fn coefficient_names(&self, covariate_names: Option<&[String]>) -> Vec<String> {
        let mut names = Vec::new();
        if self.intercept {
            names.push("(intercept)".to_string());
        }
        for j in 0..self.covariates.ncols() {
            match covariate_names {
                Some(given) if j < given.len() => names.push(given[j].clone()),
                _ => names.push(format!("x{}", j + 1)),
            }
        }
        names
    }

    /// Basis operator for partial-spline blocks; drops the constant column
    /// when an explicit intercept is present so the model stays identifiable.
    fn smooth_operator(&self) -> Result<SmootherOperator> {
        let op = spectral_decompose(&self.basis)?;
        Ok(if self.intercept {
            op.without_constant_column()
        } else {
            op
        })
    }

    /// Full-basis operator for the stage-one regressions of gSEM/spatial+.
    fn stage_one_operator(&self) -> Result<SmootherOperator> {
        spectral_decompose(&self.basis)
    }
}

/// Fitted covariate effects and diagnostics for one model.
#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub tag: ModelTag,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub p_values: Vec<f64>,
    #[serde(skip)]
    pub f_hat: Array1<f64>,
    #[serde(skip)]
    pub fitted: Array1<f64>,
    pub edf: f64,
    pub sigma_hat: f64,
    pub gcv: f64,
    pub aic: f64,
    pub deviance_explained: f64,
    pub lambda: Option<f64>,
    pub lambda_x: Option<Vec<f64>>,
    /// `false` when response-scale diagnostics (AIC, deviance explained,
    /// sigma) are not comparable with the other models (gSEM).
    pub response_comparable: bool,
}

impl FitResult {
    /// Covariate-of-interest estimate: the first non-intercept coefficient.
    pub fn primary_beta(&self, intercept: bool) -> f64 {
        if intercept {
            self.beta[1]
        } else {
            self.beta[0]
        }
    }
}

/// Squared distance between fitted values and the true mean, `||yhat - mu||^2`.
pub fn mse_fitted(fit: &FitResult, truth: &Array1<f64>) -> f64 {
    let diff = &fit.fitted - truth;
    diff.dot(&diff)
}

pub(crate) fn two_sided_normal_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

pub(crate) fn gaussian_aic(n: usize, rss: f64, edf: f64) -> f64 {
    let n = n as f64;
    let sigma2_mle = (rss / n).max(1e-300);
    let loglik = -0.5 * n * ((2.0 * std::f64::consts::PI * sigma2_mle).ln() + 1.0);
    2.0 * edf - 2.0 * loglik
}

fn deviance_explained(y: &Array1<f64>, rss: f64, intercept: bool) -> f64 {
    let tss = if intercept {
        let mean = y.mean().unwrap_or(0.0);
        y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
    } else {
        y.dot(y)
    };
    if tss <= 0.0 {
        return 0.0;
    }
    (1.0 - rss / tss).clamp(0.0, 1.0)
}

/// Cholesky solve for small SPD systems, with a caller-chosen error for
/// factorization failure.
pub(crate) fn solve_spd(a: &Array2<f64>, b: &Array1<f64>, on_fail: fn() -> Error) -> Result<Array1<f64>> {
    let l = cholesky_small(a).ok_or_else(on_fail)?;
    Ok(chol_solve(&l, b))
}

pub(crate) fn cholesky_small(a: &Array2<f64>) -> Option<Array2<f64>> {
    let q = a.nrows();
    let mut l = Array2::zeros((q, q));
    let scale = (0..q).map(|i| a[[i, i]].abs()).fold(0.0f64, f64::max);
    for i in 0..q {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 1e-12 * scale.max(1e-300) {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

fn chol_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let q = l.nrows();
    let mut z = b.clone();
    for i in 0..q {
        for k in 0..i {
            let t = l[[i, k]] * z[k];
            z[i] -= t;
        }
        z[i] /= l[[i, i]];
    }
    for i in (0..q).rev() {
        for k in (i + 1)..q {
            let t = l[[k, i]] * z[k];
            z[i] -= t;
        }
        z[i] /= l[[i, i]];
    }
    z
}

pub(crate) fn spd_inverse(a: &Array2<f64>, on_fail: fn() -> Error) -> Result<Array2<f64>> {
    let q = a.nrows();
    let l = cholesky_small(a).ok_or_else(on_fail)?;
    let mut inv = Array2::zeros((q, q));
    for j in 0..q {
        let mut e = Array1::zeros(q);
        e[j] = 1.0;
        inv.column_mut(j).assign(&chol_solve(&l, &e));
    }
    Ok(inv)
}

/// Precomputed cross-products for a partial spline fit of `y` on a design
/// block plus a penalized smooth.
pub(crate) struct PartialSplineEngine<'a> {
    op: &'a SmootherOperator,
    design: &'a Array2<f64>,
    y: &'a Array1<f64>,
    ux: Array2<f64>,
    u_y: Array1<f64>,
    xtx: Array2<f64>,
    xty: Array1<f64>,
}

impl<'a> PartialSplineEngine<'a> {
    pub(crate) fn new(op: &'a SmootherOperator, design: &'a Array2<f64>, y: &'a Array1<f64>) -> Self {
        Self {
            op,
            design,
            y,
            ux: op.columns().t().dot(design),
            u_y: op.coefficients(y),
            xtx: design.t().dot(design),
            xty: design.t().dot(y),
        }
    }

    /// `X' (I - S)^pow X` via the spectral identity
    /// `(I-S)^pow = I - Phi diag(1 - (1-s)^pow) Phi'`.
    pub(crate) fn xt_residual_pow_x(&self, s: &Array1<f64>, pow: u32) -> Array2<f64> {
        let weights = s.mapv(|sv| 1.0 - (1.0 - sv).powi(pow as i32));
        let mut scaled = self.ux.clone();
        for (j, mut row) in scaled.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v * weights[j]);
        }
        &self.xtx - &self.ux.t().dot(&scaled)
    }

    pub(crate) fn xt_residual_pow_y(&self, s: &Array1<f64>, pow: u32) -> Array1<f64> {
        let weights = s.mapv(|sv| 1.0 - (1.0 - sv).powi(pow as i32));
        let scaled = &self.u_y * &weights;
        &self.xty - &self.ux.t().dot(&scaled)
    }

    pub(crate) fn beta(&self, s: &Array1<f64>) -> Result<Array1<f64>> {
        // fail on a genuinely singular design before blaming collinearity
        cholesky_small(&self.xtx).ok_or(Error::SingularDesign)?;
        solve_spd(
            &self.xt_residual_pow_x(s, 1),
            &self.xt_residual_pow_y(s, 1),
            || Error::CollinearCovariateWithNullspace,
        )
    }

    pub(crate) fn residual_ss(&self, s: &Array1<f64>, beta: &Array1<f64>) -> f64 {
        let rtr = self.y.dot(self.y) - 2.0 * beta.dot(&self.xty) + beta.dot(&self.xtx.dot(beta));
        let u_r = &self.u_y - &self.ux.dot(beta);
        let mut shrunk = 0.0;
        for (u, sv) in u_r.iter().zip(s.iter()) {
            shrunk += (2.0 * sv - sv * sv) * u * u;
        }
        (rtr - shrunk).max(0.0)
    }

    /// Trace of the full influence matrix `S + (I-S) X (X'(I-S)X)^{-1} X'(I-S)`.
    pub(crate) fn influence_trace(&self, s: &Array1<f64>) -> Result<f64> {
        let a = self.xt_residual_pow_x(s, 1);
        let b = self.xt_residual_pow_x(s, 2);
        let a_inv = spd_inverse(&a, || Error::CollinearCovariateWithNullspace)?;
        Ok(s.sum() + (&b * &a_inv.t()).sum())
    }

    pub(crate) fn gcv(&self, s: &Array1<f64>) -> Result<f64> {
        let n = self.y.len() as f64;
        let edf = self.influence_trace(s)?;
        if n - edf <= 1e-8 * n {
            return Err(Error::DegenerateDenominator {
                edf,
                n: self.y.len(),
            });
        }
        let beta = self.beta(s)?;
        let rss = self.residual_ss(s, &beta);
        Ok(n * rss / ((n - edf) * (n - edf)))
    }

    /// Sandwich covariance `sigma^2 A^{-1} B A^{-1}` of the linear estimator,
    /// with `A = X'(I-S)X` and `B = X'(I-S)^2 X`.
    pub(crate) fn beta_covariance(&self, s: &Array1<f64>, sigma2: f64) -> Result<Array2<f64>> {
        let a_inv = spd_inverse(&self.xt_residual_pow_x(s, 1), || {
            Error::CollinearCovariateWithNullspace
        })?;
        let b = self.xt_residual_pow_x(s, 2);
        Ok(a_inv.dot(&b).dot(&a_inv).mapv(|v| v * sigma2))
    }
}

fn shrink_for(problem: &RegressionProblem, op: &SmootherOperator, lambda: Option<f64>) -> Array1<f64> {
    match lambda {
        Some(l) => op.shrink_factors(l),
        None => Array1::ones(op.rank()),
    }
}

/// Resolves the main smoothing parameter of a partial spline fit: a fixed
/// value when provided, GCV on the model influence matrix otherwise, and no
/// smoothing in the `fx` variant.
fn resolve_lambda(
    problem: &RegressionProblem,
    engine: &PartialSplineEngine<'_>,
) -> Result<Option<f64>> {
    if !problem.penalized {
        return Ok(None);
    }
    if let Some(l) = problem.lambda {
        if !(l > 0.0) {
            return Err(Error::NonPositiveLambda(l));
        }
        return Ok(Some(l));
    }
    let grid = default_lambda_grid(problem.y.len());
    let lambda = select_lambda_by(&grid, |l| engine.gcv(&engine.op.shrink_factors(l)))?;
    Ok(Some(lambda))
}

pub(crate) fn wald(beta: &Array1<f64>, cov: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut se = Vec::with_capacity(beta.len());
    let mut p = Vec::with_capacity(beta.len());
    for (j, b) in beta.iter().enumerate() {
        let s = cov[[j, j]].max(0.0).sqrt();
        se.push(s);
        p.push(if s > 0.0 {
            two_sided_normal_p(b / s)
        } else {
            f64::NAN
        });
    }
    (se, p)
}

/// Ordinary least squares with no spatial term.
pub fn fit_null(problem: &RegressionProblem) -> Result<FitResult> {
    let design = problem.design();
    let n = problem.y.len();
    let q = design.ncols();
    let xtx = design.t().dot(&design);
    let xty = design.t().dot(&problem.y);
    let beta = solve_spd(&xtx, &xty, || Error::SingularDesign)?;
    let fitted = design.dot(&beta);
    let resid = &problem.y - &fitted;
    let rss = resid.dot(&resid);
    let edf = q as f64;
    let sigma2 = rss / (n as f64 - edf);
    let cov = spd_inverse(&xtx, || Error::SingularDesign)?.mapv(|v| v * sigma2);
    let (se, p_values) = wald(&beta, &cov);
    Ok(FitResult {
        tag: ModelTag {
            kind: ModelKind::Null,
            penalized: problem.penalized,
        },
        beta: beta.to_vec(),
        se,
        p_values,
        f_hat: Array1::zeros(n),
        fitted,
        edf,
        sigma_hat: sigma2.sqrt(),
        gcv: n as f64 * rss / ((n as f64 - edf) * (n as f64 - edf)),
        aic: gaussian_aic(n, rss, edf),
        deviance_explained: deviance_explained(&problem.y, rss, problem.intercept),
        lambda: None,
        lambda_x: None,
        response_comparable: true,
    })
}

/// The partial thin plate spline model: covariates plus a penalized smooth.
pub fn fit_spatial(problem: &RegressionProblem) -> Result<FitResult> {
    let op = problem.smooth_operator()?;
    let design = problem.design();
    let engine = PartialSplineEngine::new(&op, &design, &problem.y);
    let lambda = resolve_lambda(problem, &engine)?;
    let s = shrink_for(problem, &op, lambda);
    finish_partial_spline(
        problem,
        &engine,
        &s,
        lambda,
        None,
        ModelKind::Spatial,
        None,
    )
}

/// Shared assembly for spatial-style fits (spatial, spatial+ stage two,
/// partial residual with pow = 2).
#[allow(clippy::too_many_arguments)]
fn finish_partial_spline(
    problem: &RegressionProblem,
    engine: &PartialSplineEngine<'_>,
    s: &Array1<f64>,
    lambda: Option<f64>,
    lambda_x: Option<Vec<f64>>,
    kind: ModelKind,
    f_x_hats: Option<&[Array1<f64>]>,
) -> Result<FitResult> {
    let n = problem.y.len();
    let beta = engine.beta(s)?;
    let partial_resid = &problem.y.clone() - &engine.design.dot(&beta);
    let f_plus_hat = engine.op.apply_factors(&partial_resid, s);
    let fitted = engine.design.dot(&beta) + &f_plus_hat;
    let rss = {
        let r = &problem.y - &fitted;
        r.dot(&r)
    };
    let edf = engine.influence_trace(s)?;
    if n as f64 - edf <= 1e-8 * n as f64 {
        return Err(Error::DegenerateDenominator { edf, n });
    }
    let sigma2 = rss / (n as f64 - edf);
    let cov = engine.beta_covariance(s, sigma2)?;
    let (se, p_values) = wald(&beta, &cov);
    // reconstruct the estimate of f alone when covariates were residualized
    let f_hat = match f_x_hats {
        None => f_plus_hat.clone(),
        Some(hats) => {
            let offset = if problem.intercept { 1 } else { 0 };
            let mut f = f_plus_hat.clone();
            for (j, hat) in hats.iter().enumerate() {
                f = f - &(hat * beta[offset + j]);
            }
            f
        }
    };
    let gcv = n as f64 * rss / ((n as f64 - edf) * (n as f64 - edf));
    Ok(FitResult {
        tag: ModelTag {
            kind,
            penalized: problem.penalized,
        },
        beta: beta.to_vec(),
        se,
        p_values,
        f_hat,
        fitted,
        edf,
        sigma_hat: sigma2.sqrt(),
        gcv,
        aic: gaussian_aic(n, rss, edf),
        deviance_explained: deviance_explained(&problem.y, rss, problem.intercept),
        lambda,
        lambda_x,
        response_comparable: true,
    })
}

/// Restricted spatial regression: the spatial basis is projected onto the
/// orthogonal complement of the design, which decouples the normal equations
/// and reproduces the null-model covariate estimate exactly.
pub fn fit_rsr(problem: &RegressionProblem) -> Result<FitResult> {
    let op = problem.smooth_operator()?;
    let design = problem.design();
    let n = problem.y.len();
    let q = design.ncols();
    // projecting off q design columns drops the rank of the spatial block,
    // so RSR needs a reduced-rank basis to stay identifiable
    if op.rank() + q > n {
        return Err(Error::SingularDesign);
    }

    let xtx = design.t().dot(&design);
    let xtx_inv = spd_inverse(&xtx, || Error::SingularDesign)?;
    let beta = xtx_inv.dot(&design.t().dot(&problem.y));
    let x_fitted = design.dot(&beta);

    // B~ = (I - X (X'X)^{-1} X') B_sp
    let coef = xtx_inv.dot(&design.t().dot(op.columns()));
    let projected = op.columns() - &design.dot(&coef);
    let rsr_op = from_penalized_columns(&projected, op.eigenvalues())?;

    let p_x_y = design.dot(&xtx_inv.dot(&design.t().dot(&problem.y)));
    let resid_after_x = &problem.y - &p_x_y;

    let lambda = if !problem.penalized {
        None
    } else if let Some(l) = problem.lambda {
        Some(l)
    } else {
        let grid = default_lambda_grid(n);
        let score = |l: f64| -> Result<f64> {
            let s = rsr_op.shrink_factors(l);
            let edf = q as f64 + s.sum();
            if n as f64 - edf <= 1e-8 * n as f64 {
                return Err(Error::DegenerateDenominator { edf, n });
            }
            let smooth_fit = rsr_op.apply_factors(&problem.y, &s);
            let r = &resid_after_x - &smooth_fit;
            Ok(n as f64 * r.dot(&r) / ((n as f64 - edf) * (n as f64 - edf)))
        };
        Some(select_lambda_by(&grid, score)?)
    };

    let s = shrink_for(problem, &rsr_op, lambda);
    let f_hat = rsr_op.apply_factors(&problem.y, &s);
    let fitted = &x_fitted + &f_hat;
    let resid = &problem.y - &fitted;
    let rss = resid.dot(&resid);
    let edf = q as f64 + s.sum();
    if n as f64 - edf <= 1e-8 * n as f64 {
        return Err(Error::DegenerateDenominator { edf, n });
    }
    let sigma2 = rss / (n as f64 - edf);
    // the covariate block is orthogonal to the smooth, so the OLS form applies
    let cov = xtx_inv.mapv(|v| v * sigma2);
    let (se, p_values) = wald(&beta, &cov);
    Ok(FitResult {
        tag: ModelTag {
            kind: ModelKind::Rsr,
            penalized: problem.penalized,
        },
        beta: beta.to_vec(),
        se,
        p_values,
        f_hat,
        fitted,
        edf,
        sigma_hat: sigma2.sqrt(),
        gcv: n as f64 * rss / ((n as f64 - edf) * (n as f64 - edf)),
        aic: gaussian_aic(n, rss, edf),
        deviance_explained: deviance_explained(&problem.y, rss, problem.intercept),
        lambda,
        lambda_x: None,
        response_comparable: true,
    })
}

/// Residualizes one covariate against space: GCV-selected (or fixed) smoother
/// fit, returning fitted values, residuals and the smoothing parameter used.
fn residualize(
    problem: &RegressionProblem,
    op: &SmootherOperator,
    column: &Array1<f64>,
    index: usize,
) -> Result<(Array1<f64>, Array1<f64>, Option<f64>)> {
    let lambda = if !problem.penalized {
        None
    } else if let Some(l) = problem.lambda_x {
        if !(l > 0.0) {
            return Err(Error::NonPositiveLambda(l));
        }
        Some(l)
    } else {
        let grid = default_lambda_grid(column.len());
        Some(crate::smoothing::select_lambda(op, column, &grid)?)
    };
    let s = shrink_for(problem, op, lambda);
    let f_x = op.apply_factors(column, &s);
    let r = column - &f_x;
    let ratio = (r.dot(&r) / column.dot(column).max(1e-300)).sqrt();
    if ratio < 1e-6 {
        return Err(Error::DegenerateResiduals { index, ratio });
    }
    Ok((f_x, r, lambda))
}

/// The spatial+ model: covariates are replaced by their spatial residuals,
/// then a partial spline is fitted to the unchanged response.
pub fn fit_spatial_plus(problem: &RegressionProblem) -> Result<FitResult> {
    let stage_one = problem.stage_one_operator()?;
    let n = problem.y.len();
    let p = problem.covariates.ncols();
    let mut f_x_hats = Vec::with_capacity(p);
    let mut lambda_xs = Vec::with_capacity(p);
    let mut residualized = Array2::zeros((n, p));
    for j in 0..p {
        let col = problem.covariates.column(j).to_owned();
        let (f_x, r, lx) = residualize(problem, &stage_one, &col, j)?;
        residualized.column_mut(j).assign(&r);
        f_x_hats.push(f_x);
        lambda_xs.push(lx.unwrap_or(0.0));
    }

    let mut sub = problem.clone();
    sub.covariates = residualized;
    let design = sub.design();
    let op = problem.smooth_operator()?;
    let engine = PartialSplineEngine::new(&op, &design, &problem.y);
    let lambda = resolve_lambda(problem, &engine)?;
    let s = shrink_for(problem, &op, lambda);
    finish_partial_spline(
        problem,
        &engine,
        &s,
        lambda,
        Some(lambda_xs),
        ModelKind::SpatialPlus,
        Some(&f_x_hats),
    )
}

/// The geoadditive structural equation model: spatial trends are regressed
/// out of response and covariates, then residuals are regressed on residuals.
/// Response-scale diagnostics are flagged non-comparable.
pub fn fit_gsem(problem: &RegressionProblem) -> Result<FitResult> {
    let stage_one = problem.stage_one_operator()?;
    let n = problem.y.len();
    let p = problem.covariates.ncols();

    let mut lambda_xs = Vec::with_capacity(p);
    let mut residualized = Array2::zeros((n, p));
    for j in 0..p {
        let col = problem.covariates.column(j).to_owned();
        let (_, r, lx) = residualize(problem, &stage_one, &col, j)?;
        residualized.column_mut(j).assign(&r);
        lambda_xs.push(lx.unwrap_or(0.0));
    }

    let lambda_y = if !problem.penalized {
        None
    } else if let Some(l) = problem.lambda {
        Some(l)
    } else {
        let grid = default_lambda_grid(n);
        Some(crate::smoothing::select_lambda(
            &stage_one, &problem.y, &grid,
        )?)
    };
    let s_y = shrink_for(problem, &stage_one, lambda_y);
    let f_y = stage_one.apply_factors(&problem.y, &s_y);
    let r_y = &problem.y - &f_y;

    // OLS of the response residuals on the covariate residuals
    let design = {
        let mut sub = problem.clone();
        sub.covariates = residualized;
        sub.design()
    };
    let q = design.ncols();
    let xtx = design.t().dot(&design);
    let xty = design.t().dot(&r_y);
    let beta = solve_spd(&xtx, &xty, || Error::SingularDesign)?;
    let r_y_fitted = design.dot(&beta);
    let resid = &r_y - &r_y_fitted;
    let rss = resid.dot(&resid);
    let edf = q as f64;
    let sigma2 = rss / (n as f64 - edf);
    let cov = spd_inverse(&xtx, || Error::SingularDesign)?.mapv(|v| v * sigma2);
    let (se, p_values) = wald(&beta, &cov);

    // response-scale fitted values for MSE comparisons: f^y-hat + r^y-hat
    let fitted = &f_y + &r_y_fitted;
    let tss_resid = {
        let mean = r_y.mean().unwrap_or(0.0);
        if problem.intercept {
            r_y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        } else {
            r_y.dot(&r_y)
        }
    };
    let dev_expl = if tss_resid > 0.0 {
        (1.0 - rss / tss_resid).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(FitResult {
        tag: ModelTag {
            kind: ModelKind::Gsem,
            penalized: problem.penalized,
        },
        beta: beta.to_vec(),
        se,
        p_values,
        f_hat: f_y,
        fitted,
        edf,
        sigma_hat: sigma2.sqrt(),
        gcv: n as f64 * rss / ((n as f64 - edf) * (n as f64 - edf)),
        aic: gaussian_aic(n, rss, edf),
        deviance_explained: dev_expl,
        lambda: lambda_y,
        lambda_x: Some(lambda_xs),
        response_comparable: false,
    })
}

/// The partial-residual estimator with a single smoothing parameter shared by
/// all regressions: `beta = (X'(I-S)^2 X)^{-1} X'(I-S)^2 y`.
pub fn fit_partial_residual(
    problem: &RegressionProblem,
    common_lambda: Option<f64>,
) -> Result<FitResult> {
    let op = problem.smooth_operator()?;
    let n = problem.y.len();
    let design = problem.design();
    let engine = PartialSplineEngine::new(&op, &design, &problem.y);

    let lambda = if !problem.penalized {
        None
    } else {
        match common_lambda.or(problem.lambda) {
            Some(l) => {
                if !(l > 0.0) {
                    return Err(Error::NonPositiveLambda(l));
                }
                Some(l)
            }
            None => {
                // no selection rule is prescribed for the shared parameter;
                // default to GCV on the response smoother
                let grid = default_lambda_grid(n);
                Some(crate::smoothing::select_lambda(&op, &problem.y, &grid)?)
            }
        }
    };
    let s = shrink_for(problem, &op, lambda);

    let a = engine.xt_residual_pow_x(&s, 2);
    let b = engine.xt_residual_pow_y(&s, 2);
    cholesky_small(&engine.xtx).ok_or(Error::SingularDesign)?;
    let beta = solve_spd(&a, &b, || Error::CollinearCovariateWithNullspace)?;
    let partial_resid = &problem.y - &design.dot(&beta);
    let f_hat = op.apply_factors(&partial_resid, &s);
    let fitted = design.dot(&beta) + &f_hat;
    let resid = &problem.y - &fitted;
    let rss = resid.dot(&resid);
    // influence: S + (I-S) X (X'(I-S)^2 X)^{-1} X'(I-S)^2
    let a_inv = spd_inverse(&a, || Error::CollinearCovariateWithNullspace)?;
    let c3 = engine.xt_residual_pow_x(&s, 3);
    let edf = s.sum() + (&c3 * &a_inv.t()).sum();
    if n as f64 - edf <= 1e-8 * n as f64 {
        return Err(Error::DegenerateDenominator { edf, n });
    }
    let sigma2 = rss / (n as f64 - edf);
    let c4 = engine.xt_residual_pow_x(&s, 4);
    let cov = a_inv.dot(&c4).dot(&a_inv).mapv(|v| v * sigma2);
    let (se, p_values) = wald(&beta, &cov);
    Ok(FitResult {
        tag: ModelTag {
            kind: ModelKind::PartialResidual,
            penalized: problem.penalized,
        },
        beta: beta.to_vec(),
        se,
        p_values,
        f_hat,
        fitted,
        edf,
        sigma_hat: sigma2.sqrt(),
        gcv: n as f64 * rss / ((n as f64 - edf) * (n as f64 - edf)),
        aic: gaussian_aic(n, rss, edf),
        deviance_explained: deviance_explained(&problem.y, rss, problem.intercept),
        lambda,
        lambda_x: None,
        response_comparable: true,
    })
}

/// Convenience dispatcher used by the experiment runner and the CLI.
pub fn fit_model(problem: &RegressionProblem, kind: ModelKind) -> Result<FitResult> {
    match kind {
        ModelKind::Null => fit_null(problem),
        ModelKind::Spatial => fit_spatial(problem),
        ModelKind::Rsr => fit_rsr(problem),
        ModelKind::Gsem => fit_gsem(problem),
        ModelKind::SpatialPlus => fit_spatial_plus(problem),
        ModelKind::PartialResidual => fit_partial_residual(problem, None),
    }
}

/// Stacks `[X | B]` columns for the dense oracle solves used in tests.
pub fn stacked_design(design: &Array2<f64>, columns: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[design.view(), columns.view()]).expect("conformable blocks")
}
