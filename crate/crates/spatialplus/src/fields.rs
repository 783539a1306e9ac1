//! Gaussian random field simulation and the replicate-generating pipeline
//! behind the simulation studies.
//!
//! Covariate and response surfaces are driven by two independent unit-variance
//! fields: exponential covariance for the shared spatial pattern and
//! spherical covariance for the short-range component. Each field is replaced
//! by the fitted values of a GCV-smoothed rank-k spline regression so the
//! truth lies in the span of the model bases.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use ndarray_linalg::{Cholesky, UPLO};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{build_basis, truncate_basis, LocationSet, TpsBasis};
use crate::error::{Error, Result};
use crate::glm::{simulate_glm_response, Family};
use crate::smoothing::{default_lambda_grid, select_lambda, spectral_decompose, SmootherOperator};

/// Isotropic correlation model for field simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CovarianceFamily {
    /// `C(h) = exp(-(h/range)^power)`.
    Exponential { range: f64, power: f64 },
    /// `C(h) = 1 - 1.5 h/range + 0.5 (h/range)^3` for `h <= range`, else 0.
    Spherical { range: f64 },
}

impl CovarianceFamily {
    pub fn correlation(&self, h: f64) -> f64 {
        match self {
            CovarianceFamily::Exponential { range, power } => (-(h / range).powf(*power)).exp(),
            CovarianceFamily::Spherical { range } => {
                if h >= *range {
                    0.0
                } else {
                    let t = h / range;
                    1.0 - 1.5 * t + 0.5 * t * t * t
                }
            }
        }
    }
}

/// Dense covariance matrix `C_ij = C(||t_i - t_j||)`.
pub fn covariance_matrix(locs: &LocationSet, family: &CovarianceFamily) -> Array2<f64> {
    let n = locs.n();
    let mut c = Array2::zeros((n, n));
    for i in 0..n {
        c[[i, i]] = family.correlation(0.0);
        for j in (i + 1)..n {
            let mut d2 = 0.0;
            for (a, b) in locs.point(i).iter().zip(locs.point(j).iter()) {
                d2 += (a - b) * (a - b);
            }
            let v = family.correlation(d2.sqrt());
            c[[i, j]] = v;
            c[[j, i]] = v;
        }
    }
    c
}

/// Draws one field from `N(0, C)` by symmetric factorization, escalating a
/// diagonal jitter from 1e-10 to 1e-6 if the factorization fails.
pub fn sample_grf(
    locs: &LocationSet,
    family: &CovarianceFamily,
    rng: &mut impl Rng,
) -> Result<Array1<f64>> {
    let c = covariance_matrix(locs, family);
    let n = locs.n();
    let mut factor = None;
    for jitter in [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6] {
        let mut jittered = c.clone();
        for i in 0..n {
            jittered[[i, i]] += jitter;
        }
        if let Ok(l) = jittered.cholesky(UPLO::Lower) {
            factor = Some(l);
            break;
        }
    }
    let l = factor.ok_or(Error::CovarianceNotPsd { max_jitter: 1e-6 })?;
    let normals: Array1<f64> =
        Array1::from_iter((0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)));
    Ok(l.dot(&normals))
}

/// Fitted values of a GCV-smoothed spline regression on the field, together
/// with the selected smoothing parameter.
pub fn project_to_spline_span(
    field: &Array1<f64>,
    op: &SmootherOperator,
) -> Result<(Array1<f64>, f64)> {
    let grid = default_lambda_grid(field.len());
    let lambda = select_lambda(op, field, &grid)?;
    Ok((op.apply(field, lambda), lambda))
}

/// Data-generating configuration for the simulation studies: sites sampled
/// from a regular grid, a spatially structured covariate `x = 0.5 z + eps_x`
/// and response mean `beta x + f` with `f = -z - z'`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimScenario {
    pub grid_side: usize,
    pub domain_max: f64,
    pub n_sites: usize,
    pub beta_true: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub basis_rank: usize,
    pub order: usize,
    pub replicates: usize,
    pub seed: u64,
    #[serde(skip, default = "default_family")]
    pub family: Family,
}

fn default_family() -> Family {
    Family::Gaussian
}

impl SimScenario {
    /// Desk-scale defaults: n = 400, rank 100, 50 replicates.
    pub fn desk_scale() -> Self {
        Self {
            grid_side: 50,
            domain_max: 10.0,
            n_sites: 400,
            beta_true: 3.0,
            sigma_x: 0.1,
            sigma_y: 1.0,
            basis_rank: 100,
            order: 2,
            replicates: 50,
            seed: 17,
            family: Family::Gaussian,
        }
    }

    /// Full scale: n = 1000 sites from the 50x50 grid, rank 300, 100
    /// replicates.
    pub fn paper_scale() -> Self {
        Self {
            n_sites: 1000,
            basis_rank: 300,
            replicates: 100,
            ..Self::desk_scale()
        }
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn exponential_field() -> CovarianceFamily {
        CovarianceFamily::Exponential {
            range: 5.0,
            power: 1.0,
        }
    }

    pub fn spherical_field() -> CovarianceFamily {
        CovarianceFamily::Spherical { range: 1.0 }
    }

    /// Independent RNG substream for one replicate; reproducible regardless
    /// of how replicates are batched across threads.
    pub fn replicate_rng(&self, replicate: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replicate as u64 + 1);
        rng
    }
}

/// One simulated data set with its truth and the shared basis objects.
pub struct Replicate {
    pub index: usize,
    pub sites: LocationSet,
    pub basis: Arc<TpsBasis>,
    pub x: Array1<f64>,
    pub y: Array1<f64>,
    pub z: Array1<f64>,
    pub z_prime: Array1<f64>,
    pub f_true: Array1<f64>,
    pub eta_true: Array1<f64>,
    /// Response-scale true mean (equals `eta_true` for Gaussian responses).
    pub truth_mean: Array1<f64>,
}

/// Generates replicate `index` of the scenario: fresh fields, fresh sites,
/// fresh noise, all drawn from the replicate's own RNG substream.
pub fn generate_replicate(scenario: &SimScenario, index: usize) -> Result<Replicate> {
    let mut rng = scenario.replicate_rng(index);
    let g = scenario.grid_side;
    let n_nodes = g * g;
    if scenario.n_sites > n_nodes {
        return Err(Error::InvalidConfig(format!(
            "{} sites requested from a grid of {} nodes",
            scenario.n_sites, n_nodes
        )));
    }

    // sites drawn without replacement from the grid nodes
    let chosen = rand::seq::index::sample(&mut rng, n_nodes, scenario.n_sites);
    let mut pts = Array2::zeros((scenario.n_sites, 2));
    for (row, node) in chosen.iter().enumerate() {
        let i = node / g;
        let j = node % g;
        pts[[row, 0]] = scenario.domain_max * i as f64 / (g - 1) as f64;
        pts[[row, 1]] = scenario.domain_max * j as f64 / (g - 1) as f64;
    }
    let sites = LocationSet::new(pts)?;

    let full = build_basis(sites.clone(), scenario.order)?;
    let basis = Arc::new(truncate_basis(&full, scenario.basis_rank)?);
    let op = spectral_decompose(&basis)?;

    let z_raw = sample_grf(&sites, &SimScenario::exponential_field(), &mut rng)?;
    let zp_raw = sample_grf(&sites, &SimScenario::spherical_field(), &mut rng)?;
    let (z, _) = project_to_spline_span(&z_raw, &op)?;
    let (z_prime, _) = project_to_spline_span(&zp_raw, &op)?;

    let eps_x: Array1<f64> = Array1::from_iter(
        (0..scenario.n_sites)
            .map(|_| scenario.sigma_x * rng.sample::<f64, _>(rand_distr::StandardNormal)),
    );
    let x = &(&z * 0.5) + &eps_x;
    let f_true = -&z - &z_prime;
    let eta_true = &(&x * scenario.beta_true) + &f_true;

    let (y, truth_mean) = match scenario.family {
        Family::Gaussian => {
            let eps_y: Array1<f64> = Array1::from_iter(
                (0..scenario.n_sites)
                    .map(|_| scenario.sigma_y * rng.sample::<f64, _>(rand_distr::StandardNormal)),
            );
            (&eta_true + &eps_y, eta_true.clone())
        }
        family => {
            let y = simulate_glm_response(&eta_true, family, &mut rng)?;
            let mu = eta_true.mapv(|e| family.inv_link(e));
            (y, mu)
        }
    };

    Ok(Replicate {
        index,
        sites,
        basis,
        x,
        y,
        z,
        z_prime,
        f_true,
        eta_true,
        truth_mean,
    })
}

/// Writes one replicate as CSV: site index, coordinates, covariate, response
/// and the recorded truth columns.
pub fn write_replicate_csv<W: std::io::Write>(writer: W, replicate: &Replicate) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["site", "sx", "sy", "x", "y", "f_true", "z", "zprime"])?;
    for i in 0..replicate.sites.n() {
        out.write_record(&[
            i.to_string(),
            replicate.sites.point(i)[0].to_string(),
            replicate.sites.point(i)[1].to_string(),
            replicate.x[i].to_string(),
            replicate.y[i].to_string(),
            replicate.f_true[i].to_string(),
            replicate.z[i].to_string(),
            replicate.z_prime[i].to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_scenario() -> SimScenario {
        SimScenario {
            grid_side: 12,
            n_sites: 60,
            basis_rank: 20,
            replicates: 4,
            seed: 99,
            ..SimScenario::desk_scale()
        }
    }

    #[test]
    fn single_point_field_is_standard_normal() {
        let locs = LocationSet::new(array![[1.0, 2.0]]).unwrap();
        let spec = SimScenario::exponential_field();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 3000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_grf(&locs, &spec, &mut rng).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.06, "mean {mean}");
        assert!((var - 1.0).abs() < 0.08, "variance {var}");
    }

    #[test]
    fn exponential_correlation_at_range_distance() {
        // two points at distance 5 under C(h) = exp(-h/5): corr = 1/e
        let locs = LocationSet::new(array![[0.0, 0.0], [5.0, 0.0]]).unwrap();
        let spec = SimScenario::exponential_field();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 500;
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let d = sample_grf(&locs, &spec, &mut rng).unwrap();
            a.push(d[0]);
            b.push(d[1]);
        }
        let ma = a.iter().sum::<f64>() / n as f64;
        let mb = b.iter().sum::<f64>() / n as f64;
        let cov = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / (n - 1) as f64;
        let va = a.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / (n - 1) as f64;
        let vb = b.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / (n - 1) as f64;
        let corr = cov / (va * vb).sqrt();
        assert!(
            (corr - (-1.0f64).exp()).abs() < 0.05,
            "corr {corr} vs {}",
            (-1.0f64).exp()
        );
    }

    #[test]
    fn equal_distances_give_equal_covariances() {
        // isosceles configuration: two pairs at identical distance
        let locs =
            LocationSet::new(array![[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]]).unwrap();
        for spec in [
            SimScenario::exponential_field(),
            CovarianceFamily::Spherical { range: 4.0 },
        ] {
            let c = covariance_matrix(&locs, &spec);
            assert_eq!(c[[0, 1]], c[[0, 2]]);
        }
    }

    #[test]
    fn spherical_model_is_a_valid_correlation() {
        let spec = SimScenario::spherical_field();
        assert_eq!(spec.correlation(0.0), 1.0);
        assert_eq!(spec.correlation(1.0), 0.0);
        assert_eq!(spec.correlation(2.0), 0.0);
        assert!(spec.correlation(0.5) > 0.0 && spec.correlation(0.5) < 1.0);
    }

    #[test]
    fn projection_reproduces_in_span_fields_and_fx_projection_is_idempotent() {
        let scenario = small_scenario();
        let rep = generate_replicate(&scenario, 0).unwrap();
        let op = spectral_decompose(&rep.basis).unwrap();
        // a very smooth in-span field
        let raw: Array1<f64> = rep
            .sites
            .points()
            .rows()
            .into_iter()
            .map(|p| (0.3 * p[0]).sin() + (0.2 * p[1]).cos())
            .collect();
        let field = op.apply(&raw, 1.0);
        let (projected, _) = project_to_spline_span(&field, &op).unwrap();
        let rel = (&projected - &field).mapv(f64::abs).sum() / field.mapv(f64::abs).sum();
        assert!(rel < 1e-6, "relative change {rel}");
        // the unpenalized projection is exactly idempotent
        let once = op.project(&raw);
        let twice = op.project(&once);
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn projection_shrinks_variance() {
        let scenario = small_scenario();
        for rep_idx in 0..3 {
            let rep = generate_replicate(&scenario, rep_idx).unwrap();
            let op = spectral_decompose(&rep.basis).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep_idx as u64);
            let raw = sample_grf(&rep.sites, &SimScenario::exponential_field(), &mut rng).unwrap();
            let (proj, _) = project_to_spline_span(&raw, &op).unwrap();
            let var = |v: &Array1<f64>| {
                let m = v.mean().unwrap();
                v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
            };
            assert!(var(&proj) <= var(&raw) + 1e-12);
        }
    }

    #[test]
    fn zero_covariate_noise_gives_exact_half_z() {
        let mut scenario = small_scenario();
        scenario.sigma_x = 0.0;
        let rep = generate_replicate(&scenario, 1).unwrap();
        for (xi, zi) in rep.x.iter().zip(rep.z.iter()) {
            assert_eq!(*xi, 0.5 * zi);
        }
    }

    #[test]
    fn covariate_regression_on_shared_field_recovers_half() {
        let scenario = small_scenario();
        let rep = generate_replicate(&scenario, 2).unwrap();
        // OLS slope of x on z
        let mz = rep.z.mean().unwrap();
        let mx = rep.x.mean().unwrap();
        let sxz: f64 = rep
            .z
            .iter()
            .zip(rep.x.iter())
            .map(|(z, x)| (z - mz) * (x - mx))
            .sum();
        let szz: f64 = rep.z.iter().map(|z| (z - mz) * (z - mz)).sum();
        let slope = sxz / szz;
        let resid_var = scenario.sigma_x * scenario.sigma_x;
        let se = (resid_var / szz).sqrt();
        assert!(
            (slope - 0.5).abs() < 3.0 * se,
            "slope {slope}, se {se}"
        );
    }

    #[test]
    fn noise_variance_ratio_is_one_hundred() {
        let scenario = small_scenario();
        let rep = generate_replicate(&scenario, 3).unwrap();
        let eps_y = &rep.y - &rep.eta_true;
        let eps_x = &rep.x - &(&rep.z * 0.5);
        let var = |v: &Array1<f64>| v.dot(v) / v.len() as f64;
        let ratio = var(&eps_y) / var(&eps_x);
        assert!(
            (ratio.ln() - 100.0f64.ln()).abs() < 0.8,
            "variance ratio {ratio}"
        );
    }

    #[test]
    fn replicates_are_bit_reproducible() {
        let scenario = small_scenario();
        let a = generate_replicate(&scenario, 5).unwrap();
        let b = generate_replicate(&scenario, 5).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.sites.points(), b.sites.points());
    }

    #[test]
    fn fields_are_uncorrelated_across_replicates() {
        let scenario = small_scenario();
        let mut num = 0.0;
        let mut den_z = 0.0;
        let mut den_p = 0.0;
        for idx in 0..24 {
            let rep = generate_replicate(&scenario, idx).unwrap();
            let mz = rep.z.mean().unwrap();
            let mp = rep.z_prime.mean().unwrap();
            for (z, p) in rep.z.iter().zip(rep.z_prime.iter()) {
                num += (z - mz) * (p - mp);
                den_z += (z - mz) * (z - mz);
                den_p += (p - mp) * (p - mp);
            }
        }
        let corr = num / (den_z * den_p).sqrt();
        assert!(corr.abs() < 0.1, "pooled correlation {corr}");
    }

    #[test]
    fn glm_scenario_routes_through_family_sampler() {
        let scenario = small_scenario().with_family(Family::Poisson);
        let rep = generate_replicate(&scenario, 0).unwrap();
        assert!(rep.y.iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
        for (m, e) in rep.truth_mean.iter().zip(rep.eta_true.iter()) {
            assert!((m - e.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn full_grid_covariances_factor_with_small_jitter() {
        // both families must factor on the full 50x50 grid
        let g = 50;
        let mut pts = Array2::zeros((g * g, 2));
        for i in 0..g {
            for j in 0..g {
                pts[[i * g + j, 0]] = 10.0 * i as f64 / (g - 1) as f64;
                pts[[i * g + j, 1]] = 10.0 * j as f64 / (g - 1) as f64;
            }
        }
        let locs = LocationSet::new(pts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [
            SimScenario::exponential_field(),
            SimScenario::spherical_field(),
        ] {
            // jitter ladder stops well before 1e-6 for valid models
            let c = covariance_matrix(&locs, &spec);
            let mut ok = false;
            for jitter in [0.0, 1e-10, 1e-9, 1e-8] {
                let mut j = c.clone();
                for i in 0..locs.n() {
                    j[[i, i]] += jitter;
                }
                if j.cholesky(UPLO::Lower).is_ok() {
                    ok = true;
                    break;
                }
            }
            assert!(ok, "{spec:?} required jitter above 1e-8");
            let _ = sample_grf(&locs, &spec, &mut rng).unwrap();
        }
    }
}
