//! Exponential-family extension: penalized iteratively reweighted least
//! squares for the generalized spatial model, the weighted spatial+ variant
//! and generalized RSR, for Poisson, exponential and binomial responses.
//!
//! At fixed weights `W`, estimation is a Gaussian problem in the transformed
//! variables `sqrt(W) z`, `sqrt(W) X` and `sqrt(W) B_sp`, so each outer
//! iteration reduces the weighted spline block to orthonormal spectral form
//! and reuses the partial-spline machinery from the Gaussian estimators.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::Distribution;
use statrs::function::gamma::ln_gamma;

use crate::basis::TpsBasis;
use crate::error::{Error, Result};
use crate::estimators::{
    solve_spd, spd_inverse, wald, FitResult, ModelKind, ModelTag, PartialSplineEngine,
    RegressionProblem,
};
use crate::smoothing::{
    default_lambda_grid, from_penalized_columns, select_lambda_by, SmootherOperator,
};

/// Response distribution with its link, variance function and dispersion
/// convention. The binomial family works on the count scale with a fixed
/// size parameter; the exponential family uses the non-canonical log link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Gaussian,
    Poisson,
    Exponential,
    Binomial { size: u32 },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Exponential => "exponential",
            Family::Binomial { .. } => "binomial",
        }
    }

    pub fn link(&self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Poisson | Family::Exponential => mu.ln(),
            Family::Binomial { size } => {
                let n = *size as f64;
                (mu / (n - mu)).ln()
            }
        }
    }

    pub fn inv_link(&self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Poisson | Family::Exponential => eta.exp(),
            Family::Binomial { size } => {
                let n = *size as f64;
                n / (1.0 + (-eta).exp())
            }
        }
    }

    pub fn link_deriv(&self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson | Family::Exponential => 1.0 / mu,
            Family::Binomial { size } => {
                let n = *size as f64;
                n / (mu * (n - mu))
            }
        }
    }

    pub fn variance(&self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson => mu,
            Family::Exponential => mu * mu,
            Family::Binomial { size } => {
                let n = *size as f64;
                mu * (n - mu) / n
            }
        }
    }

    /// Keeps means strictly inside the valid range during iteration.
    fn clamp_mu(&self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Poisson | Family::Exponential => mu.max(1e-10),
            Family::Binomial { size } => {
                let n = *size as f64;
                mu.clamp(1e-8 * n, (1.0 - 1e-8) * n)
            }
        }
    }

    /// Starting means: the observations, nudged into the valid range.
    fn init_mu(&self, y: &Array1<f64>) -> Array1<f64> {
        match self {
            Family::Gaussian => y.clone(),
            Family::Poisson => y.mapv(|v| if v == 0.0 { 0.1 } else { v }),
            Family::Exponential => y.clone(),
            Family::Binomial { size } => {
                let n = *size as f64;
                y.mapv(|v| v.clamp(0.01 * n, 0.99 * n))
            }
        }
    }

    pub fn check_support(&self, y: &Array1<f64>) -> Result<()> {
        let bad = |index: usize| Error::InvalidResponse {
            family: self.name().to_string(),
            index,
        };
        for (i, &v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(bad(i));
            }
            match self {
                Family::Gaussian => {}
                Family::Poisson => {
                    if v < 0.0 {
                        return Err(bad(i));
                    }
                }
                Family::Exponential => {
                    if v <= 0.0 {
                        return Err(bad(i));
                    }
                }
                Family::Binomial { size } => {
                    if v < 0.0 || v > *size as f64 {
                        return Err(bad(i));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn deviance(&self, y: &Array1<f64>, mu: &Array1<f64>) -> f64 {
        let mut dev = 0.0;
        for (yi, mi) in y.iter().zip(mu.iter()) {
            dev += self.unit_deviance(*yi, *mi);
        }
        dev
    }

    fn unit_deviance(&self, y: f64, mu: f64) -> f64 {
        match self {
            Family::Gaussian => (y - mu) * (y - mu),
            Family::Poisson => {
                let term = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
                2.0 * (term - (y - mu))
            }
            Family::Exponential => 2.0 * ((y - mu) / mu - (y / mu).ln()),
            Family::Binomial { size } => {
                let n = *size as f64;
                let a = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
                let rest = n - y;
                let b = if rest > 0.0 {
                    rest * (rest / (n - mu)).ln()
                } else {
                    0.0
                };
                2.0 * (a + b)
            }
        }
    }

    fn log_likelihood(&self, y: &Array1<f64>, mu: &Array1<f64>) -> f64 {
        match self {
            Family::Gaussian => {
                let n = y.len() as f64;
                let rss: f64 = y
                    .iter()
                    .zip(mu.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let s2 = (rss / n).max(1e-300);
                -0.5 * n * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0)
            }
            Family::Poisson => y
                .iter()
                .zip(mu.iter())
                .map(|(yi, mi)| yi * mi.ln() - mi - ln_gamma(yi + 1.0))
                .sum(),
            Family::Exponential => y
                .iter()
                .zip(mu.iter())
                .map(|(yi, mi)| -mi.ln() - yi / mi)
                .sum(),
            Family::Binomial { size } => {
                let n = *size as f64;
                y.iter()
                    .zip(mu.iter())
                    .map(|(yi, mi)| {
                        let p = (mi / n).clamp(1e-12, 1.0 - 1e-12);
                        let comb = ln_gamma(n + 1.0) - ln_gamma(yi + 1.0) - ln_gamma(n - yi + 1.0);
                        comb + yi * p.ln() + (n - yi) * (1.0 - p).ln()
                    })
                    .sum()
            }
        }
    }

    /// Dispersion is fixed at 1 for Poisson and binomial; estimated by the
    /// Pearson statistic for Gaussian and exponential.
    fn dispersion(&self, y: &Array1<f64>, mu: &Array1<f64>, edf: f64) -> f64 {
        match self {
            Family::Poisson | Family::Binomial { .. } => 1.0,
            Family::Gaussian | Family::Exponential => {
                let n = y.len() as f64;
                let pearson: f64 = y
                    .iter()
                    .zip(mu.iter())
                    .map(|(yi, mi)| {
                        let r = yi - mi;
                        r * r / self.variance(*mi)
                    })
                    .sum();
                pearson / (n - edf).max(1.0)
            }
        }
    }
}

/// Per-iteration state of the penalized IRLS loop.
#[derive(Debug, Clone)]
pub struct PirlsState {
    pub eta: Array1<f64>,
    pub mu: Array1<f64>,
    pub z: Array1<f64>,
    pub weights: Array1<f64>,
    pub iteration: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct PirlsOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub max_halvings: usize,
}

impl Default for PirlsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tolerance: 1e-10,
            max_halvings: 10,
        }
    }
}

/// A generalized fit: the shared result shape plus convergence diagnostics
/// and the weights/pseudodata at convergence.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub fit: FitResult,
    pub iterations: usize,
    pub converged: bool,
    /// True when every accepted step left the penalized deviance
    /// non-increasing (after step halving) at that iteration's lambda.
    pub monotone: bool,
    pub weights: Array1<f64>,
    pub pseudodata: Array1<f64>,
    pub deviance: f64,
    pub null_deviance: f64,
}

struct PirlsProblem<'a> {
    y: &'a Array1<f64>,
    family: Family,
    design: &'a Array2<f64>,
    smooth: Option<(&'a Array2<f64>, &'a Array1<f64>)>,
    penalized: bool,
    fixed_lambda: Option<f64>,
    options: PirlsOptions,
}

struct PirlsOutcome {
    beta: Array1<f64>,
    smooth_values: Array1<f64>,
    eta: Array1<f64>,
    mu: Array1<f64>,
    state: PirlsState,
    lambda: Option<f64>,
    edf: f64,
    deviance: f64,
    monotone: bool,
    cov_unscaled: Array2<f64>,
    iterations: usize,
}

fn pirls(problem: PirlsProblem<'_>) -> Result<PirlsOutcome> {
    let PirlsProblem {
        y,
        family,
        design,
        smooth,
        penalized,
        fixed_lambda,
        options,
    } = problem;
    family.check_support(y)?;
    let n = y.len();
    let q = design.ncols();

    let mut mu = family.init_mu(y);
    let mut eta = mu.mapv(|m| family.link(m));
    let mut deviance = family.deviance(y, &mu);
    let mut prev_coef: Option<(Array1<f64>, Array1<f64>)> = None; // (beta, smooth coef)
    let mut prev_penalty = 0.0;
    let mut monotone = true;
    let mut lambda_used = None;

    for iteration in 1..=options.max_iterations {
        // working response and weights at the current means
        let mut z = Array1::zeros(n);
        let mut w = Array1::zeros(n);
        for i in 0..n {
            let m = family.clamp_mu(mu[i]);
            let gp = family.link_deriv(m);
            z[i] = gp * (y[i] - m) + eta[i];
            w[i] = 1.0 / (gp * gp * family.variance(m));
            if !w[i].is_finite() || w[i] <= 0.0 {
                w[i] = 1e-10;
            }
        }
        let sw = w.mapv(f64::sqrt);
        let zw = &z * &sw;
        let mut xw = design.clone();
        for (mut row, s) in xw.rows_mut().into_iter().zip(sw.iter()) {
            row.mapv_inplace(|v| v * s);
        }

        let (beta_new, coef_new, eta_new, op_w): (
            Array1<f64>,
            Array1<f64>,
            Array1<f64>,
            Option<SmootherOperator>,
        ) = match smooth {
            None => {
                let xtx = xw.t().dot(&xw);
                let beta = solve_spd(&xtx, &xw.t().dot(&zw), || Error::SingularDesign)?;
                let eta_new = design.dot(&beta);
                (beta, Array1::zeros(0), eta_new, None)
            }
            Some((cols, penalty)) => {
                let mut cw = cols.clone();
                for (mut row, s) in cw.rows_mut().into_iter().zip(sw.iter()) {
                    row.mapv_inplace(|v| v * s);
                }
                let op_w = from_penalized_columns(&cw, penalty)?;
                let engine = PartialSplineEngine::new(&op_w, &xw, &zw);
                let lambda = if !penalized {
                    None
                } else if let Some(l) = fixed_lambda {
                    Some(l)
                } else {
                    let grid = default_lambda_grid(n);
                    Some(select_lambda_by(&grid, |l| {
                        engine.gcv(&op_w.shrink_factors(l))
                    })?)
                };
                lambda_used = lambda;
                let s = match lambda {
                    Some(l) => op_w.shrink_factors(l),
                    None => Array1::ones(op_w.rank()),
                };
                let beta = engine.beta(&s)?;
                let resid_w = &zw - &xw.dot(&beta);
                let spectral = {
                    let mut c = op_w.coefficients(&resid_w);
                    c *= &s;
                    c
                };
                // coefficients of the original smooth columns, for the
                // penalty value and for coefficient-space step halving
                let coef = op_w
                    .coefficient_map()
                    .expect("reduced operator carries its coefficient map")
                    .dot(&spectral);
                let eta_new = design.dot(&beta) + cols.dot(&coef);
                (beta, coef, eta_new, Some(op_w))
            }
        };

        let penalty_value = |coef: &Array1<f64>| -> f64 {
            match (smooth, lambda_used) {
                (Some((_, penalty)), Some(l)) => {
                    l * coef
                        .iter()
                        .zip(penalty.iter())
                        .map(|(c, d)| c * c * d)
                        .sum::<f64>()
                }
                _ => 0.0,
            }
        };

        // step halving on the penalized deviance, in coefficient space
        let mut beta_c = beta_new;
        let mut coef_c = coef_new;
        let mut eta_c = eta_new;
        let mut mu_c = eta_c.mapv(|e| family.clamp_mu(family.inv_link(e)));
        let mut dev_c = family.deviance(y, &mu_c);
        let mut pen_c = penalty_value(&coef_c);
        if let Some((beta_old, coef_old)) = &prev_coef {
            let pd_old = deviance + penalty_value_at(smooth, lambda_used, coef_old);
            let mut halvings = 0;
            while dev_c + pen_c > pd_old + 1e-10 * (pd_old.abs() + 1.0) {
                if halvings >= options.max_halvings {
                    return Err(Error::StepHalvingExhausted(halvings));
                }
                halvings += 1;
                beta_c = 0.5 * (&beta_c + beta_old);
                coef_c = if coef_c.is_empty() {
                    coef_c
                } else {
                    0.5 * (&coef_c + coef_old)
                };
                eta_c = design.dot(&beta_c)
                    + match smooth {
                        Some((cols, _)) => cols.dot(&coef_c),
                        None => Array1::zeros(n),
                    };
                mu_c = eta_c.mapv(|e| family.clamp_mu(family.inv_link(e)));
                dev_c = family.deviance(y, &mu_c);
                pen_c = penalty_value(&coef_c);
            }
            if dev_c + pen_c > pd_old + 1e-8 * (pd_old.abs() + 1.0) {
                monotone = false;
            }
            let _ = prev_penalty;
        }

        let dev_change = (deviance - dev_c).abs();
        let coef_stable = match &prev_coef {
            None => false,
            Some((beta_old, coef_old)) => {
                let scale = 1.0
                    + beta_c.iter().fold(0f64, |a, v| a.max(v.abs()))
                    + coef_c.iter().fold(0f64, |a, v| a.max(v.abs()));
                let db = beta_c
                    .iter()
                    .zip(beta_old.iter())
                    .fold(0f64, |a, (x, o)| a.max((x - o).abs()));
                let dc = coef_c
                    .iter()
                    .zip(coef_old.iter())
                    .fold(0f64, |a, (x, o)| a.max((x - o).abs()));
                db.max(dc) < 1e-9 * scale
            }
        };
        let converged = prev_coef.is_some()
            && dev_change < options.tolerance * (dev_c.abs() + 0.1)
            && coef_stable;
        eta = eta_c;
        mu = mu_c;
        deviance = dev_c;
        prev_penalty = pen_c;
        prev_coef = Some((beta_c.clone(), coef_c.clone()));

        if converged {
            // final diagnostics at the converged weights
            let mut z_fin = Array1::zeros(n);
            let mut w_fin = Array1::zeros(n);
            for i in 0..n {
                let m = family.clamp_mu(mu[i]);
                let gp = family.link_deriv(m);
                z_fin[i] = gp * (y[i] - m) + eta[i];
                w_fin[i] = 1.0 / (gp * gp * family.variance(m));
                if !w_fin[i].is_finite() || w_fin[i] <= 0.0 {
                    w_fin[i] = 1e-10;
                }
            }
            let (edf, cov_unscaled) = match (&op_w, smooth) {
                (Some(op), Some(_)) => {
                    let s = match lambda_used {
                        Some(l) => op.shrink_factors(l),
                        None => Array1::ones(op.rank()),
                    };
                    let engine = PartialSplineEngine::new(op, &xw, &zw);
                    let edf = engine.influence_trace(&s)?;
                    let cov = engine.beta_covariance(&s, 1.0)?;
                    (edf, cov)
                }
                _ => {
                    let xtx = xw.t().dot(&xw);
                    (q as f64, spd_inverse(&xtx, || Error::SingularDesign)?)
                }
            };
            let smooth_values = match smooth {
                Some((cols, _)) => cols.dot(&coef_c),
                None => Array1::zeros(n),
            };
            return Ok(PirlsOutcome {
                beta: beta_c,
                smooth_values,
                eta: eta.clone(),
                mu: mu.clone(),
                state: PirlsState {
                    eta,
                    mu,
                    z: z_fin,
                    weights: w_fin,
                    iteration,
                    converged: true,
                },
                lambda: lambda_used,
                edf,
                deviance,
                monotone,
                cov_unscaled,
                iterations: iteration,
            });
        }
    }
    Err(Error::PirlsDivergence(problem_options_max(&options)))
}

fn problem_options_max(options: &PirlsOptions) -> usize {
    options.max_iterations
}

fn penalty_value_at(
    smooth: Option<(&Array2<f64>, &Array1<f64>)>,
    lambda: Option<f64>,
    coef: &Array1<f64>,
) -> f64 {
    match (smooth, lambda) {
        (Some((_, penalty)), Some(l)) => {
            l * coef
                .iter()
                .zip(penalty.iter())
                .map(|(c, d)| c * c * d)
                .sum::<f64>()
        }
        _ => 0.0,
    }
}

fn assemble_glm_fit(
    problem: &RegressionProblem,
    family: Family,
    kind: ModelKind,
    outcome: PirlsOutcome,
    lambda_x: Option<Vec<f64>>,
    f_hat_override: Option<Array1<f64>>,
) -> GlmFit {
    let n = problem.y.len();
    let phi = family.dispersion(&problem.y, &outcome.mu, outcome.edf);
    let cov = outcome.cov_unscaled.mapv(|v| v * phi);
    let (se, p_values) = wald(&outcome.beta, &cov);
    let deviance = outcome.deviance;
    let mean = problem.y.mean().unwrap_or(0.0);
    let null_mu = Array1::from_elem(n, family.clamp_mu(mean));
    let null_deviance = family.deviance(&problem.y, &null_mu);
    let dev_expl = if null_deviance > 0.0 {
        (1.0 - deviance / null_deviance).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let loglik = family.log_likelihood(&problem.y, &outcome.mu);
    let aic = 2.0 * outcome.edf - 2.0 * loglik;
    // working-scale GCV at convergence
    let gcv = {
        let n_f = n as f64;
        let denom = (n_f - outcome.edf).max(1e-8);
        let mut rss_w = 0.0;
        for i in 0..n {
            let r = outcome.state.z[i] - outcome.eta[i];
            rss_w += outcome.state.weights[i] * r * r;
        }
        n_f * rss_w / (denom * denom)
    };
    let fit = FitResult {
        tag: ModelTag {
            kind,
            penalized: problem.penalized,
        },
        beta: outcome.beta.to_vec(),
        se,
        p_values,
        f_hat: f_hat_override.unwrap_or(outcome.smooth_values),
        fitted: outcome.mu.clone(),
        edf: outcome.edf,
        sigma_hat: phi.sqrt(),
        gcv,
        aic,
        deviance_explained: dev_expl,
        lambda: outcome.lambda,
        lambda_x,
        response_comparable: true,
    };
    GlmFit {
        fit,
        iterations: outcome.iterations,
        converged: outcome.state.converged,
        monotone: outcome.monotone,
        weights: outcome.state.weights,
        pseudodata: outcome.state.z,
        deviance,
        null_deviance,
    }
}

fn smooth_block(problem: &RegressionProblem) -> Result<(Array2<f64>, Array1<f64>)> {
    let op = {
        let full = crate::smoothing::spectral_decompose(&problem.basis)?;
        if problem.intercept {
            full.without_constant_column()
        } else {
            full
        }
    };
    Ok((op.columns().clone(), op.eigenvalues().clone()))
}

/// Generalized spatial model `g(mu) = X beta + f` fitted by penalized IRLS,
/// with the smoothing parameter re-selected by GCV on the working problem at
/// each outer iteration.
pub fn fit_glm_spatial(problem: &RegressionProblem, family: Family) -> Result<GlmFit> {
    let design = problem.design();
    let (cols, penalty) = smooth_block(problem)?;
    let outcome = pirls(PirlsProblem {
        y: &problem.y,
        family,
        design: &design,
        smooth: Some((&cols, &penalty)),
        penalized: problem.penalized,
        fixed_lambda: problem.lambda,
        options: PirlsOptions::default(),
    })?;
    Ok(assemble_glm_fit(
        problem,
        family,
        ModelKind::Spatial,
        outcome,
        None,
        None,
    ))
}

/// Null GLM `g(mu) = X beta` with no spatial term.
pub fn fit_glm_null(problem: &RegressionProblem, family: Family) -> Result<GlmFit> {
    let design = problem.design();
    let outcome = pirls(PirlsProblem {
        y: &problem.y,
        family,
        design: &design,
        smooth: None,
        penalized: problem.penalized,
        fixed_lambda: None,
        options: PirlsOptions::default(),
    })?;
    Ok(assemble_glm_fit(
        problem,
        family,
        ModelKind::Null,
        outcome,
        None,
        None,
    ))
}

/// Residuals of a weighted spatial smooth of one covariate, at given weights.
/// Returns (fitted spatial part, residuals, lambda).
fn weighted_residualize(
    problem: &RegressionProblem,
    column: &Array1<f64>,
    weights: &Array1<f64>,
    index: usize,
) -> Result<(Array1<f64>, Array1<f64>, Option<f64>)> {
    let full = crate::smoothing::spectral_decompose(&problem.basis)?;
    let sw = weights.mapv(f64::sqrt);
    let mut cw = full.columns().clone();
    for (mut row, s) in cw.rows_mut().into_iter().zip(sw.iter()) {
        row.mapv_inplace(|v| v * s);
    }
    let op_w = from_penalized_columns(&cw, full.eigenvalues())?;
    let xw = column * &sw;
    let lambda = if !problem.penalized {
        None
    } else if let Some(l) = problem.lambda_x {
        Some(l)
    } else {
        let grid = default_lambda_grid(column.len());
        Some(crate::smoothing::select_lambda(&op_w, &xw, &grid)?)
    };
    let s = match lambda {
        Some(l) => op_w.shrink_factors(l),
        None => Array1::ones(op_w.rank()),
    };
    let fitted_w = op_w.apply_factors(&xw, &s);
    let f_x: Array1<f64> = fitted_w
        .iter()
        .zip(sw.iter())
        .map(|(v, s)| if *s > 0.0 { v / s } else { 0.0 })
        .collect();
    let r = column - &f_x;
    let ratio = (r.dot(&r) / column.dot(column).max(1e-300)).sqrt();
    if ratio < 1e-6 {
        return Err(Error::DegenerateResiduals { index, ratio });
    }
    Ok((f_x, r, lambda))
}

/// Weighted spatial+: covariates are residualized against space in the
/// weighted metric of the converged generalized spatial model, then the
/// spatial+ model is fitted by a fresh PIRLS run.
pub fn fit_glm_spatial_plus(problem: &RegressionProblem, family: Family) -> Result<GlmFit> {
    let base = fit_glm_spatial(problem, family)?;
    let weights = &base.weights;

    let n = problem.y.len();
    let p = problem.covariates.ncols();
    let mut residualized = Array2::zeros((n, p));
    let mut f_x_hats = Vec::with_capacity(p);
    let mut lambda_xs = Vec::with_capacity(p);
    for j in 0..p {
        let col = problem.covariates.column(j).to_owned();
        let (f_x, r, lx) = weighted_residualize(problem, &col, weights, j)?;
        residualized.column_mut(j).assign(&r);
        f_x_hats.push(f_x);
        lambda_xs.push(lx.unwrap_or(0.0));
    }

    let mut sub = problem.clone();
    sub.covariates = residualized;
    let design = sub.design();
    let (cols, penalty) = smooth_block(problem)?;
    let outcome = pirls(PirlsProblem {
        y: &problem.y,
        family,
        design: &design,
        smooth: Some((&cols, &penalty)),
        penalized: problem.penalized,
        fixed_lambda: problem.lambda,
        options: PirlsOptions::default(),
    })?;
    // report the spatial effect net of the covariate spatial parts
    let offset = if problem.intercept { 1 } else { 0 };
    let mut f_hat = outcome.smooth_values.clone();
    for (j, hat) in f_x_hats.iter().enumerate() {
        f_hat = f_hat - &(hat * outcome.beta[offset + j]);
    }
    Ok(assemble_glm_fit(
        problem,
        family,
        ModelKind::SpatialPlus,
        outcome,
        Some(lambda_xs),
        Some(f_hat),
    ))
}

/// Generalized RSR: the spatial basis is W-orthogonalized against the design
/// at the converged weights of the generalized spatial model, then refitted.
/// Unlike the Gaussian case, the refit re-derives its own weights, so the
/// covariate estimate generally differs from the null GLM.
pub fn fit_glm_rsr(problem: &RegressionProblem, family: Family) -> Result<GlmFit> {
    let base = fit_glm_spatial(problem, family)?;
    let weights = &base.weights;
    let design = problem.design();
    let n = problem.y.len();
    let q = design.ncols();

    let (cols, penalty) = smooth_block(problem)?;
    if cols.ncols() + q > n {
        return Err(Error::SingularDesign);
    }
    // B~ = (I - X (X'WX)^{-1} X'W) B_sp
    let mut wx = design.clone();
    for (mut row, w) in wx.rows_mut().into_iter().zip(weights.iter()) {
        row.mapv_inplace(|v| v * w);
    }
    let xtwx = design.t().dot(&wx);
    let inv = spd_inverse(&xtwx, || Error::SingularDesign)?;
    let coef = inv.dot(&wx.t().dot(&cols));
    let projected = &cols - &design.dot(&coef);

    let outcome = pirls(PirlsProblem {
        y: &problem.y,
        family,
        design: &design,
        smooth: Some((&projected, &penalty)),
        penalized: problem.penalized,
        fixed_lambda: problem.lambda,
        options: PirlsOptions::default(),
    })?;
    Ok(assemble_glm_fit(
        problem,
        family,
        ModelKind::Rsr,
        outcome,
        None,
        None,
    ))
}

/// Draws independent responses with means `g^{-1}(eta_i)` from the family.
pub fn simulate_glm_response(
    eta: &Array1<f64>,
    family: Family,
    rng: &mut impl Rng,
) -> Result<Array1<f64>> {
    let mut out = Array1::zeros(eta.len());
    for (i, &e) in eta.iter().enumerate() {
        if !e.is_finite() {
            return Err(Error::MeanOutOfRange {
                family: family.name().to_string(),
                mu: f64::NAN,
            });
        }
        let mu = family.inv_link(e);
        out[i] = match family {
            Family::Gaussian => {
                let normal = rand_distr::Normal::new(mu, 1.0).expect("valid normal");
                normal.sample(rng)
            }
            Family::Poisson => {
                if !(mu > 0.0) || !mu.is_finite() {
                    return Err(Error::MeanOutOfRange {
                        family: "poisson".into(),
                        mu,
                    });
                }
                let pois = rand_distr::Poisson::new(mu).map_err(|_| Error::MeanOutOfRange {
                    family: "poisson".into(),
                    mu,
                })?;
                pois.sample(rng)
            }
            Family::Exponential => {
                if !(mu > 0.0) || !mu.is_finite() {
                    return Err(Error::MeanOutOfRange {
                        family: "exponential".into(),
                        mu,
                    });
                }
                let exp = rand_distr::Exp::new(1.0 / mu).map_err(|_| Error::MeanOutOfRange {
                    family: "exponential".into(),
                    mu,
                })?;
                exp.sample(rng)
            }
            Family::Binomial { size } => {
                let nb = size as f64;
                if !(mu > 0.0 && mu < nb) {
                    return Err(Error::MeanOutOfRange {
                        family: "binomial".into(),
                        mu,
                    });
                }
                let binom = rand_distr::Binomial::new(size as u64, mu / nb).map_err(|_| {
                    Error::MeanOutOfRange {
                        family: "binomial".into(),
                        mu,
                    }
                })?;
                binom.sample(rng) as f64
            }
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis, truncate_basis, LocationSet};
    use crate::estimators::{fit_rsr, fit_spatial, fit_spatial_plus};
    use approx::assert_relative_eq;
    use ndarray::s;
    use ndarray_linalg::Solve;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn scattered_locations(n: usize, d: usize, rng: &mut impl Rng) -> LocationSet {
        loop {
            let pts = Array2::from_shape_fn((n, d), |_| rng.random_range(0.0..10.0));
            if let Ok(l) = LocationSet::new(pts) {
                return l;
            }
        }
    }

    fn glm_instance(n: usize, seed: u64, family: Family) -> (RegressionProblem, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let locs = scattered_locations(n, 2, &mut rng);
        let full = build_basis(locs, 2).unwrap();
        let basis = Arc::new(truncate_basis(&full, (n / 4).max(8)).unwrap());
        let pts = basis.locations().points().to_owned();
        let g: Array1<f64> = pts
            .rows()
            .into_iter()
            .map(|p| 0.3 * (0.5 * p[0]).sin() + 0.2 * (0.4 * p[1]).cos())
            .collect();
        let f: Array1<f64> = pts
            .rows()
            .into_iter()
            .map(|p| -0.3 * (0.5 * p[0]).sin() - 0.2 * (0.3 * p[1]).sin())
            .collect();
        let x = &g + &Array1::from_iter((0..n).map(|_| 0.15 * rng.random_range(-1.0..1.0f64)));
        let eta = &(&x * 1.2) + &f;
        let y = simulate_glm_response(&eta, family, &mut rng).unwrap();
        let problem =
            RegressionProblem::new(y, x.insert_axis(ndarray::Axis(1)), basis).unwrap();
        (problem, eta)
    }

    #[test]
    fn gaussian_identity_reduces_to_gaussian_spatial() {
        let (problem, _) = glm_instance(50, 3, Family::Gaussian);
        let glm = fit_glm_spatial(&problem, Family::Gaussian).unwrap();
        let gauss = fit_spatial(&problem).unwrap();
        assert!(glm.iterations <= 3);
        assert_relative_eq!(glm.fit.beta[0], gauss.beta[0], max_relative = 1e-8);
        for (a, b) in glm.fit.fitted.iter().zip(gauss.fitted.iter()) {
            assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()));
        }
        assert_relative_eq!(glm.fit.edf, gauss.edf, max_relative = 1e-8);
    }

    /// Textbook IRLS oracle on the stacked design [X | B], unpenalized.
    fn irls_oracle(
        y: &Array1<f64>,
        design: &Array2<f64>,
        family: Family,
        iterations: usize,
    ) -> Array1<f64> {
        let n = y.len();
        let q = design.ncols();
        let mut mu = family.init_mu(y);
        let mut eta = mu.mapv(|m| family.link(m));
        let mut coef: Array1<f64> = Array1::zeros(q);
        for _ in 0..iterations {
            let prev = coef.clone();
            let mut z = Array1::zeros(n);
            let mut w = Array1::zeros(n);
            for i in 0..n {
                let m = family.clamp_mu(mu[i]);
                let gp = family.link_deriv(m);
                z[i] = gp * (y[i] - m) + eta[i];
                w[i] = 1.0 / (gp * gp * family.variance(m));
            }
            let mut xtwx = Array2::zeros((q, q));
            let mut xtwz = Array1::zeros(q);
            for i in 0..n {
                let row = design.row(i);
                for a in 0..q {
                    xtwz[a] += w[i] * row[a] * z[i];
                    for b in 0..q {
                        xtwx[[a, b]] += w[i] * row[a] * row[b];
                    }
                }
            }
            coef = xtwx.solve(&xtwz).unwrap();
            eta = design.dot(&coef);
            mu = eta.mapv(|e| family.clamp_mu(family.inv_link(e)));
            let change = coef
                .iter()
                .zip(prev.iter())
                .fold(0f64, |a, (x, o)| a.max((x - o).abs()));
            if change < 1e-13 * (1.0 + coef.iter().fold(0f64, |a, v| a.max(v.abs()))) {
                break;
            }
        }
        coef
    }

    fn check_against_oracle(family: Family, seed: u64) {
        let (mut problem, _) = glm_instance(55, seed, family);
        problem.penalized = false;
        let glm = fit_glm_spatial(&problem, family).unwrap();
        assert!(glm.converged);
        let op = crate::smoothing::spectral_decompose(&problem.basis).unwrap();
        let stacked = crate::estimators::stacked_design(&problem.design(), op.columns());
        let coef = irls_oracle(&problem.y, &stacked, family, 500);
        assert_relative_eq!(glm.fit.beta[0], coef[0], max_relative = 1e-6);
    }

    #[test]
    fn unpenalized_poisson_matches_textbook_irls() {
        check_against_oracle(Family::Poisson, 11);
    }

    #[test]
    fn unpenalized_binomial_matches_textbook_irls() {
        check_against_oracle(Family::Binomial { size: 10 }, 13);
    }

    #[test]
    fn unpenalized_exponential_matches_textbook_irls() {
        check_against_oracle(Family::Exponential, 17);
    }

    #[test]
    fn gaussian_rsr_reduces_to_gaussian_case() {
        let (problem, _) = glm_instance(50, 19, Family::Gaussian);
        let glm = fit_glm_rsr(&problem, Family::Gaussian).unwrap();
        let gauss = fit_rsr(&problem).unwrap();
        assert_relative_eq!(glm.fit.beta[0], gauss.beta[0], max_relative = 1e-6);
        // and hence the null OLS estimate
        let null = crate::estimators::fit_null(&problem).unwrap();
        assert_relative_eq!(glm.fit.beta[0], null.beta[0], max_relative = 1e-6);
    }

    #[test]
    fn gaussian_spatial_plus_reduces_to_gaussian_case() {
        let (problem, _) = glm_instance(50, 23, Family::Gaussian);
        let glm = fit_glm_spatial_plus(&problem, Family::Gaussian).unwrap();
        let gauss = fit_spatial_plus(&problem).unwrap();
        assert_relative_eq!(glm.fit.beta[0], gauss.beta[0], max_relative = 1e-8);
    }

    #[test]
    fn glm_rsr_construction_identity_holds() {
        let (problem, _) = glm_instance(50, 29, Family::Poisson);
        let base = fit_glm_spatial(&problem, Family::Poisson).unwrap();
        let design = problem.design();
        let (cols, _) = smooth_block(&problem).unwrap();
        let mut wx = design.clone();
        for (mut row, w) in wx.rows_mut().into_iter().zip(base.weights.iter()) {
            row.mapv_inplace(|v| v * w);
        }
        let xtwx = design.t().dot(&wx);
        let inv = spd_inverse(&xtwx, || Error::SingularDesign).unwrap();
        let coef = inv.dot(&wx.t().dot(&cols));
        let projected = &cols - &design.dot(&coef);
        // X' W B~ = 0 at the construction weights
        let check = wx.t().dot(&projected);
        let max = check.iter().fold(0f64, |a, v| a.max(v.abs()));
        let scale = wx.t().dot(&cols).iter().fold(0f64, |a, v| a.max(v.abs()));
        assert!(max < 1e-8 * scale.max(1.0), "X'WB~ max entry {max}");
    }

    #[test]
    fn unpenalized_spatial_plus_equals_unpenalized_spatial() {
        for (family, seed) in [
            (Family::Poisson, 31u64),
            (Family::Exponential, 37),
            (Family::Binomial { size: 10 }, 41),
        ] {
            let (mut problem, _) = glm_instance(55, seed, family);
            problem.penalized = false;
            let spatial = fit_glm_spatial(&problem, family).unwrap();
            let plus = fit_glm_spatial_plus(&problem, family).unwrap();
            assert_relative_eq!(plus.fit.beta[0], spatial.fit.beta[0], max_relative = 1e-6);
        }
    }

    #[test]
    fn weighted_residuals_are_w_orthogonal_when_unpenalized() {
        let (mut problem, _) = glm_instance(50, 43, Family::Poisson);
        problem.penalized = false;
        let base = fit_glm_spatial(&problem, Family::Poisson).unwrap();
        let col = problem.covariates.column(0).to_owned();
        let (_, r, _) = weighted_residualize(&problem, &col, &base.weights, 0).unwrap();
        let full = crate::smoothing::spectral_decompose(&problem.basis).unwrap();
        let sw = base.weights.mapv(f64::sqrt);
        let rw = &r * &sw;
        let rw_norm = rw.dot(&rw).sqrt();
        for col in full.columns().columns() {
            let cw: Array1<f64> = col
                .iter()
                .zip(sw.iter())
                .map(|(c, s)| c * s)
                .collect();
            let cos = rw.dot(&cw) / (rw_norm * cw.dot(&cw).sqrt());
            assert!(cos.abs() < 1e-6, "cos angle {cos}");
        }
    }

    #[test]
    fn weighted_residuals_nullspace_orthogonality_penalized() {
        let (problem, _) = glm_instance(50, 47, Family::Poisson);
        let base = fit_glm_spatial(&problem, Family::Poisson).unwrap();
        let col = problem.covariates.column(0).to_owned();
        let (_, r, _) = weighted_residualize(&problem, &col, &base.weights, 0).unwrap();
        let full = crate::smoothing::spectral_decompose(&problem.basis).unwrap();
        let sw = base.weights.mapv(f64::sqrt);
        let rw = &r * &sw;
        let rw_norm = rw.dot(&rw).sqrt();
        for j in 0..full.null_dim() {
            let col = full.columns().slice(s![.., j]);
            let cw: Array1<f64> = col.iter().zip(sw.iter()).map(|(c, s)| c * s).collect();
            let cos = rw.dot(&cw) / (rw_norm * cw.dot(&cw).sqrt());
            assert!(cos.abs() < 1e-6, "nullspace cos angle {cos}");
        }
    }

    #[test]
    fn support_validation_rejects_bad_responses() {
        let y = Array1::from(vec![1.0, -0.5, 2.0]);
        assert!(matches!(
            Family::Poisson.check_support(&y),
            Err(Error::InvalidResponse { index: 1, .. })
        ));
        let y = Array1::from(vec![1.0, 11.0]);
        assert!(matches!(
            Family::Binomial { size: 10 }.check_support(&y),
            Err(Error::InvalidResponse { index: 1, .. })
        ));
        let y = Array1::from(vec![0.0, 1.0]);
        assert!(matches!(
            Family::Exponential.check_support(&y),
            Err(Error::InvalidResponse { index: 0, .. })
        ));
    }

    #[test]
    fn simulated_moments_match_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let n = 4000;
        // Poisson with constant mean 4
        let eta = Array1::from_elem(n, 4.0f64.ln());
        let draws = simulate_glm_response(&eta, Family::Poisson, &mut rng).unwrap();
        let mean = draws.sum() / n as f64;
        assert!((mean - 4.0).abs() < 3.0 * (4.0f64 / n as f64).sqrt());
        // binomial mean 5 of size 10: variance 2.5
        let eta = Array1::from_elem(n, 0.0);
        let draws = simulate_glm_response(&eta, Family::Binomial { size: 10 }, &mut rng).unwrap();
        let mean = draws.sum() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 5.0).abs() < 0.15);
        assert!((var - 2.5).abs() < 0.2, "binomial variance {var}");
        // exponential mean 2: sd 2
        let eta = Array1::from_elem(n, 2.0f64.ln());
        let draws = simulate_glm_response(&eta, Family::Exponential, &mut rng).unwrap();
        let mean = draws.sum() / n as f64;
        let sd = (draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
            .sqrt();
        assert!((mean - 2.0).abs() < 0.15, "exponential mean {mean}");
        assert!((sd - 2.0).abs() < 0.25, "exponential sd {sd}");
    }

    #[test]
    fn pirls_reports_monotone_convergence() {
        for (family, seed) in [
            (Family::Poisson, 61u64),
            (Family::Exponential, 67),
            (Family::Binomial { size: 10 }, 71),
        ] {
            let (problem, _) = glm_instance(60, seed, family);
            let fit = fit_glm_spatial(&problem, family).unwrap();
            assert!(fit.converged, "{family:?} did not converge");
            assert!(fit.monotone, "{family:?} was not monotone");
            assert!(fit.iterations <= 50);
        }
    }
}
