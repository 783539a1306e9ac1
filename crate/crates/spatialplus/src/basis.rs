//! Thin plate spline design and penalty construction from scattered locations.
//!
//! The construction follows the natural-basis route: the radial matrix `E`
//! and polynomial block `T` determine an n x n penalty `Gamma` such that
//! `f' Gamma f` is the bending energy of the natural interpolant of `f`,
//! with polynomials of total degree below the order left unpenalized. The
//! eigenstructure of the penalty is computed once at build time and reused
//! by every smoother and estimator downstream.

use std::sync::OnceLock;

use ndarray::{s, Array1, Array2, ArrayView1};
use ndarray_linalg::{Eigh, Solve, UPLO};
use statrs::function::gamma::gamma as gamma_fn;

use crate::error::{Error, Result};

/// Scattered observation sites in an open bounded domain of R^d.
#[derive(Debug, Clone)]
pub struct LocationSet {
    points: Array2<f64>,
}

impl LocationSet {
    /// Validates pairwise distinctness (`h_min > 0`) on construction.
    pub fn new(points: Array2<f64>) -> Result<Self> {
        let n = points.nrows();
        let d = points.ncols();
        if n == 0 || d == 0 {
            return Err(Error::DimensionMismatch(format!(
                "locations must be a non-empty n x d matrix, got {n} x {d}"
            )));
        }
        if !points.iter().all(|v| v.is_finite()) {
            return Err(Error::DimensionMismatch(
                "locations contain non-finite coordinates".into(),
            ));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if squared_distance(points.row(i), points.row(j)) == 0.0 {
                    return Err(Error::DuplicatePoints(i, j));
                }
            }
        }
        Ok(Self { points })
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    /// Minimal pairwise separation distance.
    pub fn h_min(&self) -> f64 {
        let n = self.n();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                best = best.min(squared_distance(self.points.row(i), self.points.row(j)));
            }
        }
        best.sqrt()
    }

    /// Largest nearest-neighbour distance; a separation-based surrogate for
    /// the fill distance of the (unrepresented) domain.
    pub fn h_max(&self) -> f64 {
        let n = self.n();
        if n == 1 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let mut nearest = f64::INFINITY;
            for j in 0..n {
                if i != j {
                    nearest = nearest.min(squared_distance(self.points.row(i), self.points.row(j)));
                }
            }
            worst = worst.max(nearest);
        }
        worst.sqrt()
    }

    /// Regularity diagnostic `h_max / h_min`.
    pub fn mesh_ratio(&self) -> f64 {
        self.h_max() / self.h_min()
    }
}

fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Dimension of the polynomial null space: binom(m + d - 1, d).
pub fn nullspace_dim(order: usize, dim: usize) -> usize {
    binomial(order + dim - 1, dim)
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    let mut acc: usize = 1;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Multi-indices of total degree below `order`, ascending by degree then
/// lexicographic, so the constant monomial always comes first.
pub(crate) fn monomial_exponents(order: usize, dim: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for degree in 0..order as u32 {
        let mut current = vec![0u32; dim];
        gather_exponents(degree, 0, &mut current, &mut out);
    }
    out
}

fn gather_exponents(remaining: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if pos == current.len() - 1 {
        current[pos] = remaining;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        gather_exponents(remaining - e, pos + 1, current, out);
        current[pos] = 0;
    }
}

/// Radial kernel eta_{m,d} with the conventional normalization constant:
/// `theta r^{2m-d} log r` for even d, `theta r^{2m-d}` for odd d.
#[derive(Debug, Clone, Copy)]
pub struct RadialKernel {
    power: i32,
    constant: f64,
    log_term: bool,
}

impl RadialKernel {
    pub fn new(order: usize, dim: usize) -> Self {
        let m = order as i32;
        let d = dim as i32;
        if dim % 2 == 0 {
            let sign = if (m + 1 + d / 2) % 2 == 0 { 1.0 } else { -1.0 };
            let denom = 2f64.powi(2 * m - 1)
                * std::f64::consts::PI.powi(d / 2)
                * factorial(order - 1)
                * factorial(order - dim / 2);
            Self {
                power: 2 * m - d,
                constant: sign / denom,
                log_term: true,
            }
        } else {
            let num = gamma_fn(d as f64 / 2.0 - m as f64);
            let denom = 2f64.powi(2 * m)
                * std::f64::consts::PI.powf(d as f64 / 2.0)
                * factorial(order - 1);
            Self {
                power: 2 * m - d,
                constant: num / denom,
                log_term: false,
            }
        }
    }

    pub fn evaluate(&self, r: f64) -> f64 {
        if r == 0.0 {
            return 0.0;
        }
        let base = self.constant * r.powi(self.power);
        if self.log_term {
            base * r.ln()
        } else {
            base
        }
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// Householder factorization of the polynomial block, kept in factored form
/// so the orthogonal complement of col(T) can be applied without ever
/// materializing the full n x n Q.
struct PolyQr {
    reflectors: Vec<(usize, Array1<f64>)>,
}

impl PolyQr {
    fn factor(t: &Array2<f64>) -> Result<Self> {
        let n = t.nrows();
        let m = t.ncols();
        let mut work = t.clone();
        let mut reflectors = Vec::with_capacity(m);
        for j in 0..m {
            let col_norm: f64 = (j..n).map(|i| work[[i, j]] * work[[i, j]]).sum::<f64>().sqrt();
            let orig_norm: f64 = (0..n).map(|i| t[[i, j]] * t[[i, j]]).sum::<f64>().sqrt();
            if col_norm <= 1e-10 * orig_norm.max(1.0) {
                return Err(Error::RankDeficientPolynomialBlock(m));
            }
            let mut v = Array1::zeros(n - j);
            for i in j..n {
                v[i - j] = work[[i, j]];
            }
            let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
            v[0] += sign * col_norm;
            let v_norm = v.dot(&v).sqrt();
            v /= v_norm;
            // apply H = I - 2vv' to the remaining columns
            for c in j..m {
                let dot: f64 = (j..n).map(|i| v[i - j] * work[[i, c]]).sum();
                for i in j..n {
                    work[[i, c]] -= 2.0 * v[i - j] * dot;
                }
            }
            reflectors.push((j, v));
        }
        Ok(Self { reflectors })
    }

    /// B <- Q' B (reflectors applied in forward order).
    fn apply_qt_left(&self, b: &mut Array2<f64>) {
        for (offset, v) in &self.reflectors {
            reflect_left(b, *offset, v);
        }
    }

    /// B <- Q B (reflectors applied in reverse order).
    fn apply_q_left(&self, b: &mut Array2<f64>) {
        for (offset, v) in self.reflectors.iter().rev() {
            reflect_left(b, *offset, v);
        }
    }

    /// B <- B Q (right multiplication, forward order).
    fn apply_q_right(&self, b: &mut Array2<f64>) {
        for (offset, v) in &self.reflectors {
            reflect_right(b, *offset, v);
        }
    }
}

fn reflect_left(b: &mut Array2<f64>, offset: usize, v: &Array1<f64>) {
    let (n, cols) = b.dim();
    for c in 0..cols {
        let mut dot = 0.0;
        for i in offset..n {
            dot += v[i - offset] * b[[i, c]];
        }
        let dot2 = 2.0 * dot;
        for i in offset..n {
            b[[i, c]] -= dot2 * v[i - offset];
        }
    }
}

fn reflect_right(b: &mut Array2<f64>, offset: usize, v: &Array1<f64>) {
    let (rows, n) = b.dim();
    for r in 0..rows {
        let mut dot = 0.0;
        for j in offset..n {
            dot += b[[r, j]] * v[j - offset];
        }
        let dot2 = 2.0 * dot;
        for j in offset..n {
            b[[r, j]] -= dot2 * v[j - offset];
        }
    }
}

/// Thin plate spline design: radial block, polynomial block, penalty and its
/// eigenstructure, with an optional low-rank truncation.
pub struct TpsBasis {
    locations: LocationSet,
    order: usize,
    nullspace: usize,
    radial: Array2<f64>,
    polynomial: Array2<f64>,
    exponents: Vec<Vec<u32>>,
    kernel: RadialKernel,
    /// Orthonormal basis columns; the first `nullspace` span col(T) with the
    /// very first column proportional to the constant vector.
    columns: Array2<f64>,
    /// Eigenvalues of n*Gamma restricted to the kept columns, ascending;
    /// the first `nullspace` entries are exactly zero.
    penalty_eigenvalues: Array1<f64>,
    rank: Option<usize>,
    gamma: OnceLock<Array2<f64>>,
}

/// Builds the thin plate spline basis and penalty of the given order.
///
/// The penalty is realized as `Gamma = Q2 (Q2' E Q2)^{-1} Q2'` with `Q2`
/// an orthonormal complement of the polynomial column space, so that
/// `f' Gamma f` equals the bending energy of the natural interpolant of `f`.
pub fn build_basis(locations: LocationSet, order: usize) -> Result<TpsBasis> {
    let n = locations.n();
    let d = locations.dim();
    if 2 * order <= d {
        return Err(Error::OrderTooSmall { m: order, d });
    }
    let m_null = nullspace_dim(order, d);
    if n < m_null + 1 {
        return Err(Error::TooFewPoints {
            needed: m_null + 1,
            got: n,
            m: order,
            d,
        });
    }

    let kernel = RadialKernel::new(order, d);
    let mut radial = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let r = squared_distance(locations.point(i), locations.point(j)).sqrt();
            let v = kernel.evaluate(r);
            radial[[i, j]] = v;
            radial[[j, i]] = v;
        }
    }

    let exponents = monomial_exponents(order, d);
    debug_assert_eq!(exponents.len(), m_null);
    let mut polynomial = Array2::zeros((n, m_null));
    for i in 0..n {
        for (c, expo) in exponents.iter().enumerate() {
            polynomial[[i, c]] = evaluate_monomial(locations.point(i), expo);
        }
    }

    let qr = PolyQr::factor(&polynomial)?;

    // A = Q2' E Q2 as the trailing block of Q' E Q.
    let mut transformed = radial.clone();
    qr.apply_qt_left(&mut transformed);
    qr.apply_q_right(&mut transformed);
    let block = transformed.slice(s![m_null.., m_null..]);
    let sym = 0.5 * (&block + &block.t());

    let (vals, vecs) = sym
        .eigh(UPLO::Lower)
        .map_err(|e| Error::EigenFailure(e.to_string()))?;
    let p = n - m_null;
    let largest = vals[p - 1];
    if !(largest > 0.0) || vals[0] <= 1e-12 * largest {
        return Err(Error::EigenFailure(
            "penalized radial block is not positive definite".into(),
        ));
    }

    // Ascending penalty eigenvalues n/a pair with descending block eigenvalues.
    let mut penalty_eigenvalues = Array1::zeros(n);
    for i in 0..p {
        penalty_eigenvalues[m_null + i] = n as f64 / vals[p - 1 - i];
    }

    let mut columns = Array2::zeros((n, n));
    for i in 0..m_null {
        columns[[i, i]] = 1.0;
    }
    for c in 0..p {
        for r in 0..p {
            columns[[m_null + r, m_null + c]] = vecs[[r, p - 1 - c]];
        }
    }
    qr.apply_q_left(&mut columns);

    Ok(TpsBasis {
        locations,
        order,
        nullspace: m_null,
        radial,
        polynomial,
        exponents,
        kernel,
        columns,
        penalty_eigenvalues,
        rank: None,
        gamma: OnceLock::new(),
    })
}

/// Keeps the polynomial columns plus the `k - M` leading eigenvectors of the
/// penalized block (the smoothest penalized directions), yielding a rank-k
/// basis with a diagonal-plus-zero-block penalty.
pub fn truncate_basis(basis: &TpsBasis, k: usize) -> Result<TpsBasis> {
    let n = basis.locations.n();
    let m_null = basis.nullspace;
    if k < m_null || k > n {
        return Err(Error::RankOutOfRange {
            k,
            min: m_null,
            max: n,
        });
    }
    Ok(TpsBasis {
        locations: basis.locations.clone(),
        order: basis.order,
        nullspace: m_null,
        radial: basis.radial.clone(),
        polynomial: basis.polynomial.clone(),
        exponents: basis.exponents.clone(),
        kernel: basis.kernel,
        columns: basis.columns.slice(s![.., ..k]).to_owned(),
        penalty_eigenvalues: basis.penalty_eigenvalues.slice(s![..k]).to_owned(),
        rank: Some(k),
        gamma: OnceLock::new(),
    })
}

impl TpsBasis {
    pub fn n(&self) -> usize {
        self.locations.n()
    }

    pub fn dim(&self) -> usize {
        self.locations.dim()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nullspace_dim(&self) -> usize {
        self.nullspace
    }

    pub fn rank(&self) -> usize {
        self.rank.unwrap_or(self.n())
    }

    pub fn is_truncated(&self) -> bool {
        self.rank.map(|k| k < self.n()).unwrap_or(false)
    }

    pub fn locations(&self) -> &LocationSet {
        &self.locations
    }

    /// The n x n radial matrix E.
    pub fn radial(&self) -> &Array2<f64> {
        &self.radial
    }

    /// The n x M polynomial block T.
    pub fn polynomial(&self) -> &Array2<f64> {
        &self.polynomial
    }

    /// Orthonormal basis columns (n x k).
    pub fn columns(&self) -> &Array2<f64> {
        &self.columns
    }

    /// Eigenvalues of n*Gamma on the kept columns, ascending.
    pub fn penalty_eigenvalues(&self) -> &Array1<f64> {
        &self.penalty_eigenvalues
    }

    /// The full n x n penalty matrix, materialized on first use.
    pub fn gamma(&self) -> &Array2<f64> {
        self.gamma.get_or_init(|| {
            let n = self.n();
            let m_null = self.nullspace;
            // Gamma shares the basis eigenvectors with eigenvalues mu / n;
            // only the penalized block contributes.
            let pen = self.columns.slice(s![.., m_null..]);
            let mut scaled = pen.to_owned();
            for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
                let w = self.penalty_eigenvalues[m_null + j] / n as f64;
                col.mapv_inplace(|v| v * w);
            }
            scaled.dot(&pen.t())
        })
    }

    /// Bending energy `f' Gamma f` of the values `f` at the data sites.
    pub fn penalty_energy(&self, f: &Array1<f64>) -> f64 {
        let g = self.gamma().dot(f);
        f.dot(&g)
    }

    /// Natural interpolant of the values `f`, usable for off-site prediction
    /// and as the closed-form bending-energy oracle.
    pub fn interpolant(&self, f: &Array1<f64>) -> Result<NaturalSpline> {
        let n = self.n();
        let m_null = self.nullspace;
        if f.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "interpolant values have length {}, expected {n}",
                f.len()
            )));
        }
        let size = n + m_null;
        let mut system = Array2::zeros((size, size));
        system.slice_mut(s![..n, ..n]).assign(&self.radial);
        system.slice_mut(s![..n, n..]).assign(&self.polynomial);
        system
            .slice_mut(s![n.., ..n])
            .assign(&self.polynomial.t());
        let mut rhs = Array1::zeros(size);
        rhs.slice_mut(s![..n]).assign(f);
        let sol = system.solve(&rhs).map_err(|_| Error::SingularDesign)?;
        let delta = sol.slice(s![..n]).to_owned();
        let poly = sol.slice(s![n..]).to_owned();
        let energy = delta.dot(&self.radial.dot(&delta));
        Ok(NaturalSpline {
            centers: self.locations.points().clone(),
            kernel: self.kernel,
            exponents: self.exponents.clone(),
            delta,
            poly,
            energy,
        })
    }
}

fn evaluate_monomial(point: ArrayView1<'_, f64>, exponents: &[u32]) -> f64 {
    point
        .iter()
        .zip(exponents.iter())
        .map(|(x, &e)| x.powi(e as i32))
        .product()
}

/// Natural thin plate spline in Lagrange form: radial coefficients plus a
/// low-degree polynomial part.
pub struct NaturalSpline {
    centers: Array2<f64>,
    kernel: RadialKernel,
    exponents: Vec<Vec<u32>>,
    delta: Array1<f64>,
    poly: Array1<f64>,
    energy: f64,
}

impl NaturalSpline {
    pub fn evaluate(&self, point: ArrayView1<'_, f64>) -> f64 {
        let mut acc = 0.0;
        for (i, row) in self.centers.rows().into_iter().enumerate() {
            let r = squared_distance(point, row).sqrt();
            acc += self.delta[i] * self.kernel.evaluate(r);
        }
        for (c, expo) in self.exponents.iter().enumerate() {
            acc += self.poly[c] * evaluate_monomial(point, expo);
        }
        acc
    }

    /// Closed-form bending energy `delta' E delta` of the interpolant.
    pub fn bending_energy(&self) -> f64 {
        self.energy
    }
}
