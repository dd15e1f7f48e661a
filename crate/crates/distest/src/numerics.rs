//! Special functions and Gaussian-expectation quadrature.
//!
//! Everything here is pure. The quadrature rules use the probabilists'
//! normalization, so the weights of every rule sum to one and
//! `expect_over_gaussian` needs no extra `π` factors.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Symmetric positive definite matrix with its Cholesky factor cached.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SpdMatrix {
    m: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl SpdMatrix {
    /// Validates symmetry (1e-12 relative) and positive definiteness.
    /// The stored matrix is the exact symmetrization of `m`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::NotSpd(format!(
                "shape {}x{} is not square and nonempty",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotSpd("non-finite entry".into()));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::NotSpd(format!("asymmetry {asym:e}")));
        }
        let m = (&m + m.transpose()) * 0.5;
        let chol = Cholesky::new(m.clone())
            .ok_or_else(|| Error::NotSpd("Cholesky factorization failed".into()))?;
        Ok(Self { m, chol })
    }

    pub fn from_row_slice(dim: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::Dimension(format!(
                "{} entries for a {dim}x{dim} matrix",
                entries.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Lower-triangular factor `L` with `L Lᵀ = self`.
    pub fn cholesky_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        (&inv + inv.transpose()) * 0.5
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Natural log of the determinant.
    pub fn ln_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    /// `xᵀ M⁻¹ x`.
    pub fn inv_quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.chol.solve(x))
    }
}

impl TryFrom<Vec<Vec<f64>>> for SpdMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("matrix rows must all have length n".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::from_row_slice(n, &flat)
    }
}

impl From<SpdMatrix> for Vec<Vec<f64>> {
    fn from(s: SpdMatrix) -> Self {
        s.m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

impl PartialEq for SpdMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m
    }
}

/// Smallest eigenvalue of the symmetrized difference `a − b`.
/// Nonnegative means `a ⪰ b` in Loewner order.
pub fn loewner_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let d = a - b;
    let d = (&d + d.transpose()) * 0.5;
    SymmetricEigen::new(d).eigenvalues.min()
}

/// Standard normal density.
pub fn gaussian_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Gaussian tail probability `Q(x) = P(Z > x)`.
pub fn gaussian_q(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Probability that a standard normal lands in `(lo, hi]`.
///
/// Picks the tail whose difference does not cancel, so tiny cell masses
/// far in either tail keep their relative accuracy. Infinite ends allowed.
pub fn gaussian_interval(lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    if lo >= 0.0 {
        gaussian_q(lo) - gaussian_q(hi)
    } else if hi <= 0.0 {
        gaussian_q(-hi) - gaussian_q(-lo)
    } else {
        1.0 - gaussian_q(-lo) - gaussian_q(hi)
    }
}

/// First-order Marcum Q function `Q₁(a, b)`.
pub fn marcum_q(a: f64, b: f64) -> f64 {
    marcum_pq(a, b).1
}

/// Complement `1 − Q₁(a, b)`, computed directly rather than by subtraction.
pub fn marcum_p(a: f64, b: f64) -> f64 {
    marcum_pq(a, b).0
}

/// Returns `(1 − Q₁(a,b), Q₁(a,b))`.
///
/// Uses the Poisson mixture of regularized incomplete gammas (the
/// noncentral chi-square form with two degrees of freedom) over the indices
/// where the Poisson weights matter. Each tail is filled by its stable
/// recursion: `P(n, y)` downward from the top index and `Γu(n, y)` upward
/// from the bottom one, both adding the positive terms `t_n = e^{−y}yⁿ/n!`.
/// That keeps small results accurate relative to themselves.
fn marcum_pq(a: f64, b: f64) -> (f64, f64) {
    assert!(
        a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite(),
        "marcum_q needs finite nonnegative arguments, got ({a}, {b})"
    );
    if b == 0.0 {
        return (0.0, 1.0);
    }
    let mu = 0.5 * a * a;
    let y = 0.5 * b * b;
    if mu == 0.0 {
        let p = -(-y).exp_m1();
        return (p, (-y).exp());
    }

    // Poisson weights relative to the mode, carried unnormalized.
    let mode = mu.floor() as usize;
    let mut below = Vec::new();
    let mut w = 1.0;
    for n in (1..=mode).rev() {
        w *= n as f64 / mu;
        if w < 1e-18 {
            break;
        }
        below.push(w);
    }
    let lo_index = mode - below.len();
    let mut weights: Vec<f64> = below.into_iter().rev().collect();
    weights.push(1.0);
    let mut w = 1.0;
    let mut n = mode;
    loop {
        n += 1;
        w *= mu / n as f64;
        if w < 1e-18 {
            break;
        }
        weights.push(w);
    }
    let hi_index = lo_index + weights.len() - 1;
    let ln_t = |n: usize| -y + n as f64 * y.ln() - ln_gamma(n as f64 + 1.0);

    // lower[i] = P(lo_index + i + 1, y), downward: P(n, y) = P(n + 1, y) + t_n.
    let mut lower = vec![0.0; weights.len()];
    let mut cur = gamma_lr(hi_index as f64 + 1.0, y);
    let mut lt = ln_t(hi_index);
    for i in (0..weights.len()).rev() {
        lower[i] = cur;
        let n = lo_index + i;
        cur += lt.exp();
        if n > 0 {
            lt += (n as f64 / y).ln();
        }
    }
    // upper[i] = Γu(lo_index + i + 1, y), upward: Γu(n + 2, y) = Γu(n + 1, y) + t_{n+1}.
    let mut upper = vec![0.0; weights.len()];
    let mut cur = gamma_ur(lo_index as f64 + 1.0, y);
    let mut lt = ln_t(lo_index + 1);
    for (i, u) in upper.iter_mut().enumerate() {
        *u = cur;
        cur += lt.exp();
        lt += (y / (lo_index + i + 2) as f64).ln();
    }

    let wsum: f64 = weights.iter().sum();
    let p = (weights.iter().zip(&lower).map(|(w, l)| w * l).sum::<f64>() / wsum).clamp(0.0, 1.0);
    let q = (weights.iter().zip(&upper).map(|(w, u)| w * u).sum::<f64>() / wsum).clamp(0.0, 1.0);
    // The smaller tail is the accurate one; the larger follows by complement.
    if p <= q {
        (p, 1.0 - p)
    } else {
        (1.0 - q, q)
    }
}

/// Upper orthant probability `P(X > x, Y > y)` of a standard bivariate
/// normal with correlation `rho`. Infinite thresholds are allowed.
///
/// Gauss-Legendre reduction of the single-integral form (Drezner and
/// Wesolowsky, with Genz's refinements for `|rho| ≥ 0.925`).
pub fn bivariate_q(x: f64, y: f64, rho: f64) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(Error::DegenerateCorrelation(rho.abs()));
    }
    if x == f64::INFINITY || y == f64::INFINITY {
        return Ok(0.0);
    }
    if x == f64::NEG_INFINITY {
        return Ok(gaussian_q(y));
    }
    if y == f64::NEG_INFINITY {
        return Ok(gaussian_q(x));
    }
    Ok(bvnu(x, y, rho))
}

fn bvnu(dh: f64, dk: f64, r: f64) -> f64 {
    let rule = if r.abs() < 0.3 {
        gl6()
    } else if r.abs() < 0.75 {
        gl12()
    } else {
        gl20()
    };
    let (xs_gl, ws_gl) = (&rule.0, &rule.1);
    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    let mut bvn = 0.0;

    if r.abs() < 0.925 {
        let hs = 0.5 * (h * h + k * k);
        let asr = r.asin();
        for (xi, wi) in xs_gl.iter().zip(ws_gl.iter()) {
            let sn = (asr * (xi + 1.0) * 0.5).sin();
            bvn += wi * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
        }
        return (bvn * asr / (4.0 * PI) + gaussian_q(h) * gaussian_q(k)).clamp(0.0, 1.0);
    }

    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    let as_ = (1.0 - r) * (1.0 + r);
    let mut a = as_.sqrt();
    let bs = (h - k) * (h - k);
    let c = (4.0 - hk) / 8.0;
    let d = (12.0 - hk) / 16.0;
    bvn = a
        * (-(bs / as_ + hk) * 0.5).exp()
        * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
    if hk > -160.0 {
        let b = bs.sqrt();
        bvn -= (-hk * 0.5).exp()
            * (2.0 * PI).sqrt()
            * gaussian_q(b / a)
            * b
            * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
    }
    a *= 0.5;
    for (xi, wi) in xs_gl.iter().zip(ws_gl.iter()) {
        let xs = (a * (xi + 1.0)).powi(2);
        let rs = (1.0 - xs).sqrt();
        let asr = -(bs / xs + hk) * 0.5;
        if asr > -100.0 {
            bvn += a
                * wi
                * asr.exp()
                * ((-hk * xs / (2.0 * (1.0 + rs).powi(2))).exp() / rs
                    - (1.0 + c * xs * (1.0 + d * xs)));
        }
    }
    bvn = -bvn / (2.0 * PI);

    let out = if r > 0.0 {
        bvn + gaussian_q(h.max(k))
    } else if h >= k {
        -bvn
    } else {
        let l = if h < 0.0 {
            gaussian_q(-k) - gaussian_q(-h)
        } else {
            gaussian_q(h) - gaussian_q(k)
        };
        l - bvn
    };
    out.clamp(0.0, 1.0)
}

fn gl6() -> &'static (Vec<f64>, Vec<f64>) {
    static R: std::sync::OnceLock<(Vec<f64>, Vec<f64>)> = std::sync::OnceLock::new();
    R.get_or_init(|| gauss_legendre(6))
}

fn gl12() -> &'static (Vec<f64>, Vec<f64>) {
    static R: std::sync::OnceLock<(Vec<f64>, Vec<f64>)> = std::sync::OnceLock::new();
    R.get_or_init(|| gauss_legendre(12))
}

fn gl20() -> &'static (Vec<f64>, Vec<f64>) {
    static R: std::sync::OnceLock<(Vec<f64>, Vec<f64>)> = std::sync::OnceLock::new();
    R.get_or_init(|| gauss_legendre(20))
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` by Newton iteration on
/// the three-term recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 1.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Probabilists' Gauss-Hermite rule: nodes and weights with
/// `Σ wᵢ f(zᵢ) ≈ E{f(Z)}`, `Z ~ N(0, 1)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Hermite rule needs at least one node");
    // Physicists' rule by Newton iteration on orthonormal Hermite
    // functions, then rescaled. The recurrence carries the e^{−z²/2}
    // factor so it stays bounded for large n.
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let nf = n as f64;
    // Starting points from the eigenvalues of the Jacobi matrix, then
    // Newton on the recurrence for nodes and weights.
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i.abs_diff(j) == 1 {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut guess: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    guess.sort_by(|a, b| b.total_cmp(a));
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = guess[i];
        let mut pp = 1.0;
        for iter in 0..20 {
            let (mut p1, mut p2) = (PIM4 * (-0.5 * z * z).exp(), 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if iter > 0 && (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 * (-z * z).exp() / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    let sqrt_pi = PI.sqrt();
    let mut nodes: Vec<f64> = x.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
    let mut weights: Vec<f64> = w.iter().map(|v| v / sqrt_pi).collect();
    nodes.reverse();
    weights.reverse();
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    // Renormalize away the last few ulps so the weights sum to one.
    let s: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= s);
    (nodes, weights)
}

/// Rule for `E{f(U)}` with `U ~ Exp(1)`, the power gain of a unit Rayleigh
/// channel. Composite Gauss-Legendre in the envelope `V = √U` (density
/// `2v·e^{−v²}`) on `[0, 6.5]`, order 8, `⌈n/8⌉` panels; returns nodes in `u`.
/// Integrands like `Q(c·√u)` are smooth in `v` but not in `u`, which is what
/// makes this converge where Gauss-Laguerre in `u` stalls. Truncated mass is
/// `e^{−42.25}`.
pub fn rayleigh_power_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "fading rule needs at least one node");
    const ORDER: usize = 8;
    const V_MAX: f64 = 6.5;
    let panels = n.div_ceil(ORDER);
    let (z, w) = gauss_legendre(ORDER);
    let width = V_MAX / panels as f64;
    let mut nodes = Vec::with_capacity(panels * ORDER);
    let mut weights = Vec::with_capacity(panels * ORDER);
    for p in 0..panels {
        let centre = (p as f64 + 0.5) * width;
        for (zi, wi) in z.iter().zip(&w) {
            let v = centre + 0.5 * width * zi;
            nodes.push(v * v);
            weights.push(0.5 * width * wi * 2.0 * v * (-v * v).exp());
        }
    }
    (nodes, weights)
}

/// Composite Gauss-Legendre rule for `E{f(S)}`, `S ~ N(mean, sd²)`:
/// `panels` equal panels of `order` nodes on `mean ± 10·sd`, weighted by
/// the normal density. The truncated tail mass is below 2e-23.
pub fn normal_composite_rule(mean: f64, sd: f64, panels: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(panels >= 1 && order >= 1);
    const SPAN: f64 = 10.0;
    let (z, w) = gauss_legendre(order);
    let width = 2.0 * SPAN / panels as f64;
    let mut nodes = Vec::with_capacity(panels * order);
    let mut weights = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let centre = -SPAN + (p as f64 + 0.5) * width;
        for (zi, wi) in z.iter().zip(&w) {
            let u = centre + 0.5 * width * zi;
            nodes.push(mean + sd * u);
            weights.push(0.5 * width * wi * gaussian_pdf(u));
        }
    }
    (nodes, weights)
}

/// Tensor-product Gauss-Hermite rule for expectations under `N(0, I_q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussQuadRule {
    dim: usize,
    nodes_per_dim: usize,
    nodes: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl GaussQuadRule {
    /// Default node count per dimension for `q ≤ 3`.
    pub const DEFAULT_NODES: usize = 24;

    pub fn new(dim: usize, nodes_per_dim: usize) -> Result<Self> {
        if nodes_per_dim == 0 {
            return Err(Error::Domain("quadrature needs dim ≥ 1 and nodes ≥ 1".into()));
        }
        let (z, w) = gauss_hermite(nodes_per_dim);
        Self::tensor(dim, &z, &w)
    }

    /// Tensor product of the composite rule of [`normal_composite_rule`],
    /// for integrands with features too sharp for Gauss-Hermite.
    pub fn composite(dim: usize, panels: usize, order: usize) -> Result<Self> {
        if panels == 0 || order == 0 {
            return Err(Error::Domain("composite rule needs panels ≥ 1 and order ≥ 1".into()));
        }
        let (z, w) = normal_composite_rule(0.0, 1.0, panels, order);
        Self::tensor(dim, &z, &w)
    }

    fn tensor(dim: usize, z: &[f64], w: &[f64]) -> Result<Self> {
        let nodes_per_dim = z.len();
        if dim == 0 {
            return Err(Error::Domain("quadrature needs dim ≥ 1 and nodes ≥ 1".into()));
        }
        let total = nodes_per_dim
            .checked_pow(dim as u32)
            .filter(|t| *t <= 50_000_000)
            .ok_or_else(|| Error::Domain("tensor rule too large".into()))?;
        let mut nodes = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; dim];
        for _ in 0..total {
            nodes.push(DVector::from_iterator(dim, idx.iter().map(|&i| z[i])));
            weights.push(idx.iter().map(|&i| w[i]).product());
            for slot in idx.iter_mut() {
                *slot += 1;
                if *slot < nodes_per_dim {
                    break;
                }
                *slot = 0;
            }
        }
        Ok(Self {
            dim,
            nodes_per_dim,
            nodes,
            weights,
        })
    }

    pub fn univariate(nodes: usize) -> Result<Self> {
        Self::new(1, nodes)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes_per_dim(&self) -> usize {
        self.nodes_per_dim
    }

    pub fn nodes(&self) -> &[DVector<f64>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn check_gaussian(mean: &DVector<f64>, cov: &SpdMatrix, rule: &GaussQuadRule) -> Result<()> {
    if mean.len() != cov.dim() || rule.dim() != cov.dim() {
        return Err(Error::Dimension(format!(
            "mean {}, covariance {}, rule {}",
            mean.len(),
            cov.dim(),
            rule.dim()
        )));
    }
    Ok(())
}

/// `E{g(θ)}` for `θ ~ N(mean, cov)` via `θ = mean + chol(cov)·z`.
pub fn expect_over_gaussian<F>(
    g: F,
    mean: &DVector<f64>,
    cov: &SpdMatrix,
    rule: &GaussQuadRule,
) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    check_gaussian(mean, cov, rule)?;
    let l = cov.cholesky_l();
    let mut acc = 0.0;
    for (z, w) in rule.nodes().iter().zip(rule.weights()) {
        let theta = mean + &l * z;
        acc += w * g(&theta);
    }
    Ok(acc)
}

/// Elementwise matrix version of [`expect_over_gaussian`].
pub fn expect_matrix_over_gaussian<F>(
    g: F,
    mean: &DVector<f64>,
    cov: &SpdMatrix,
    rule: &GaussQuadRule,
) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    check_gaussian(mean, cov, rule)?;
    let l = cov.cholesky_l();
    let mut acc: Option<DMatrix<f64>> = None;
    for (z, w) in rule.nodes().iter().zip(rule.weights()) {
        let theta = mean + &l * z;
        let v = g(&theta) * *w;
        acc = Some(match acc {
            None => v,
            Some(a) => a + v,
        });
    }
    Ok(acc.expect("rules are nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// erfc oracle: Maclaurin series of erf for small arguments, Laplace
    /// continued fraction in the tail.
    fn erfc_oracle(x: f64) -> f64 {
        if x < 0.0 {
            return 2.0 - erfc_oracle(-x);
        }
        if x < 2.0 {
            let mut term = x;
            let mut sum = x;
            let mut n = 0.0;
            loop {
                n += 1.0;
                term *= -x * x / n;
                let add = term / (2.0 * n + 1.0);
                sum += add;
                if add.abs() < 1e-18 {
                    break;
                }
            }
            1.0 - 2.0 / PI.sqrt() * sum
        } else {
            let mut f = 0.0;
            for k in (1..200).rev() {
                f = (k as f64 / 2.0) / (x + f);
            }
            (-x * x).exp() / PI.sqrt() / (x + f)
        }
    }

    fn q_oracle(x: f64) -> f64 {
        0.5 * erfc_oracle(x / 2f64.sqrt())
    }

    /// Adaptive Simpson integration, used only as a test oracle.
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
        fn rec<F: Fn(f64) -> f64>(
            f: &F,
            a: f64,
            b: f64,
            fa: f64,
            fm: f64,
            fb: f64,
            whole: f64,
            tol: f64,
            depth: u32,
        ) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let fa = f(a);
        let fb = f(b);
        let fm = f(0.5 * (a + b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    /// `e^{-z} I₀(z)` by its power series; fine for the moderate `z` used here.
    fn i0_scaled(z: f64) -> f64 {
        let mut term = 1.0;
        let mut sum = 1.0;
        let q = 0.25 * z * z;
        let mut k = 0.0;
        loop {
            k += 1.0;
            term *= q / (k * k);
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
        }
        sum * (-z).exp()
    }

    fn marcum_oracle(a: f64, b: f64) -> f64 {
        // x e^{-(x-a)²/2} e^{-ax} I₀(ax) is the defining integrand.
        let f = |x: f64| x * (-(x - a) * (x - a) / 2.0).exp() * i0_scaled(a * x);
        simpson(&f, b, a + 40.0, 1e-13)
    }

    fn bvn_oracle(x: f64, y: f64, rho: f64) -> f64 {
        let s = (1.0 - rho * rho).sqrt();
        let f = |t: f64| gaussian_pdf(t) * q_oracle((y - rho * t) / s);
        let lo = x.max(-40.0);
        let pieces = 800;
        let h = (40.0 - lo) / pieces as f64;
        (0..pieces)
            .map(|i| simpson(&f, lo + i as f64 * h, lo + (i + 1) as f64 * h, 1e-16))
            .sum()
    }

    #[test]
    fn q_basic_values() {
        assert_eq!(gaussian_q(0.0), 0.5);
        assert_relative_eq!(gaussian_q(1.3), 1.0 - gaussian_q(-1.3), epsilon = 1e-15);
        // Frozen from the series oracle.
        assert!((gaussian_q(1.0) - 0.158_655_253_931_457_05).abs() < 1e-14);
        assert!((q_oracle(1.0) - 0.158_655_253_931_457_05).abs() < 1e-14);
    }

    #[test]
    fn q_matches_oracle_on_grid() {
        for i in -80..=80 {
            let x = i as f64 * 0.1;
            let e = (gaussian_q(x) - q_oracle(x)).abs();
            assert!(e <= 1e-14, "x = {x}: err {e:e}");
        }
    }

    #[test]
    fn interval_is_accurate_in_tails() {
        let p = gaussian_interval(-9.0, -8.5);
        let exact = gaussian_q(8.5) - gaussian_q(9.0);
        assert_relative_eq!(p, exact, max_relative = 1e-12);
        assert_eq!(gaussian_interval(f64::NEG_INFINITY, f64::INFINITY), 1.0);
        assert_eq!(gaussian_interval(1.0, 1.0), 0.0);
    }

    #[test]
    fn marcum_special_cases() {
        assert_eq!(marcum_q(2.7, 0.0), 1.0);
        assert!((marcum_q(0.0, 1.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((marcum_q(0.0, 1.0) - 0.606_530_659_712_633_4).abs() < 1e-12);
    }

    #[test]
    fn marcum_matches_integral_oracle() {
        let oracle = marcum_oracle(1.5, 2.0);
        // Frozen value of the oracle.
        assert!((oracle - 0.423_679_280_478_000_5).abs() < 1e-10, "{oracle}");
        assert!((marcum_q(1.5, 2.0) - oracle).abs() < 1e-10);
        for &(a, b) in &[
            (0.3, 0.2),
            (1.0, 3.0),
            (2.0, 0.5),
            (4.0, 4.5),
            (6.0, 3.0),
            (3.0, 8.0),
            (8.0, 8.0),
        ] {
            let o = marcum_oracle(a, b);
            let m = marcum_q(a, b);
            assert!((m - o).abs() < 1e-10, "Q({a},{b}) = {m} vs {o}");
            assert!((marcum_p(a, b) + m - 1.0).abs() < 1e-14, "{:e}", marcum_p(a, b) + m - 1.0);
        }
    }

    #[test]
    fn marcum_small_lower_tail_is_relatively_accurate() {
        // P₁ = ∫₀ᵇ x e^{−(x−a)²/2} e^{−ax}I₀(ax) dx, integrated in pieces.
        let lower = |a: f64, b: f64, scale: f64| {
            let f = |x: f64| x * (-(x - a) * (x - a) / 2.0).exp() * i0_scaled(a * x);
            let pieces = 200;
            let h = b / pieces as f64;
            (0..pieces)
                .map(|i| simpson(&f, i as f64 * h, (i + 1) as f64 * h, 1e-14 * scale / pieces as f64))
                .sum::<f64>()
        };
        // Straddle the switch of the Poisson mode at μ = 60.
        for g in [13.0f64, 29.9999, 30.0, 30.0001] {
            let (a, b) = (2.0 * g.sqrt(), (2.0 + g).sqrt());
            let p = marcum_p(a, b);
            let o = lower(a, b, p);
            assert!(((p - o) / o).abs() < 1e-9, "g {g}: {p:e} vs {o:e}");
        }
    }

    #[test]
    fn marcum_frozen_high_precision_values() {
        // 40-digit quadrature of the defining integral, frozen.
        for &(a, b, p, q) in &[
            (1.0, 3.0, 0.956_284_028_421_364_31, 0.043_715_971_578_635_687),
            (4.0, 4.5, 0.648_438_875_248_240_39, 0.351_561_124_751_759_61),
            (3.0, 8.0, 0.999_999_524_035_026_32, 4.759_649_736_833_893_8e-7),
        ] {
            assert!((marcum_p(a, b) - p).abs() < 2e-15 * p, "P({a},{b})");
            assert!((marcum_q(a, b) - q).abs() < 2e-15 * q.max(1e-2), "Q({a},{b})");
        }
    }

    #[test]
    fn marcum_large_arguments_stay_in_range() {
        let q = marcum_q(200.0, 100.0);
        assert!((q - 1.0).abs() < 1e-12);
        let q = marcum_q(100.0, 200.0);
        assert!(q < 1e-12);
        let p = marcum_p(20.0, 10.0);
        assert!(p > 0.0 && p < 1e-15, "{p:e}");
    }

    #[test]
    fn bivariate_basic_values() {
        assert!((bivariate_q(0.0, 0.0, 0.0).unwrap() - 0.25).abs() < 1e-15);
        let (x, y) = (0.3, -0.7);
        assert!(
            (bivariate_q(x, y, 0.0).unwrap() - gaussian_q(x) * gaussian_q(y)).abs() < 1e-15
        );
        let want = 0.25 + 0.5f64.asin() / (2.0 * PI);
        assert!((bivariate_q(0.0, 0.0, 0.5).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            bivariate_q(0.0, 0.0, 1.0),
            Err(Error::DegenerateCorrelation(_))
        ));
    }

    #[test]
    fn bivariate_infinite_thresholds() {
        assert_eq!(bivariate_q(f64::INFINITY, 0.2, 0.4).unwrap(), 0.0);
        assert_eq!(bivariate_q(f64::NEG_INFINITY, 0.2, 0.4).unwrap(), gaussian_q(0.2));
        assert_eq!(bivariate_q(-0.1, f64::NEG_INFINITY, -0.4).unwrap(), gaussian_q(-0.1));
    }

    #[test]
    fn bivariate_matches_quadrature_oracle() {
        for &rho in &[-0.999, -0.95, -0.8, -0.5, -0.1, 0.2, 0.6, 0.9, 0.93, 0.99, 0.999] {
            for &(x, y) in &[(0.0, 0.0), (-1.2, 0.7), (1.5, 1.1), (-2.0, -2.5), (2.5, -0.4)] {
                let b = bivariate_q(x, y, rho).unwrap();
                let o = bvn_oracle(x, y, rho);
                assert!((b - o).abs() < 1e-10, "({x},{y},{rho}): {b} vs {o}");
            }
        }
    }

    #[test]
    fn bivariate_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000_000usize;
        let (x, y) = (0.4, -0.3);
        for &rho in &[-0.999, 0.5, 0.999] {
            let s = (1.0f64 - rho * rho).sqrt();
            let mut hits = 0usize;
            for _ in 0..n {
                let u: f64 = rng.sample(StandardNormal);
                let v: f64 = rng.sample(StandardNormal);
                if u > x && rho * u + s * v > y {
                    hits += 1;
                }
            }
            let p_hat = hits as f64 / n as f64;
            let p = bivariate_q(x, y, rho).unwrap();
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((p_hat - p).abs() < 4.0 * se, "rho {rho}: {p_hat} vs {p}");
        }
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(12);
        let s: f64 = w.iter().sum();
        assert_relative_eq!(s, 2.0, epsilon = 1e-14);
        let m22: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(22)).sum();
        assert_relative_eq!(m22, 2.0 / 23.0, max_relative = 1e-13);
    }

    #[test]
    fn hermite_rule_properties() {
        for n in [1usize, 2, 5, 24, 64, 128, 200, 400] {
            let (z, w) = gauss_hermite(n);
            assert!(z.windows(2).all(|p| p[0] < p[1]), "nodes not distinct for {n}");
            let m2: f64 = z.iter().zip(&w).map(|(z, w)| w * z * z).sum();
            assert!(n < 2 || (m2 - 1.0).abs() < 1e-12);
            let s: f64 = w.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            // Outermost weights of the large rules underflow to zero.
            assert!(w.iter().all(|v| *v >= 0.0) && w[n / 2] > 0.0);
            for i in 0..n {
                assert!((z[i] + z[n - 1 - i]).abs() < 1e-12 * z[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn hermite_reproduces_moments_to_degree_2n_minus_1() {
        let n = 24;
        let (z, w) = gauss_hermite(n);
        // E Z^{2j} = (2j − 1)!!
        let mut dfact = 1.0f64;
        for j in 1..n {
            dfact *= (2 * j - 1) as f64;
            let m: f64 = z.iter().zip(&w).map(|(z, w)| w * z.powi(2 * j as i32)).sum();
            assert!((m - dfact).abs() <= 1e-10 * dfact, "degree {}: {m} vs {dfact}", 2 * j);
            let odd: f64 = z.iter().zip(&w).map(|(z, w)| w * z.powi(2 * j as i32 + 1)).sum();
            assert!(odd.abs() <= 1e-10 * dfact);
        }
    }

    #[test]
    fn composite_rule_moments() {
        let (z, w) = normal_composite_rule(1.5, 2.0, 80, 8);
        let m0: f64 = w.iter().sum();
        let m1: f64 = z.iter().zip(&w).map(|(z, w)| w * z).sum();
        let v: f64 = z.iter().zip(&w).map(|(z, w)| w * (z - 1.5).powi(2)).sum();
        assert!((m0 - 1.0).abs() < 1e-14);
        assert!((m1 - 1.5).abs() < 1e-14);
        assert!((v - 4.0).abs() < 1e-13);
        let c: f64 = z.iter().zip(&w).map(|(z, w)| w * z.cos()).sum();
        assert!((c - 1.5f64.cos() * (-2.0f64).exp()).abs() < 1e-14);
        let rule = GaussQuadRule::composite(2, 40, 6).unwrap();
        assert_eq!(rule.len(), 57_600);
        let s: f64 = rule.weights().iter().sum();
        assert!((s - 1.0).abs() < 1e-13);
    }

    #[test]
    fn rayleigh_rule_moments() {
        for n in [64usize, 120, 200] {
            let (u, w) = rayleigh_power_rule(n);
            assert_eq!(u.len(), n.div_ceil(8) * 8);
            assert!(w.iter().all(|v| *v >= 0.0));
            let mut fact = 1.0f64;
            for j in 0..6 {
                if j > 0 {
                    fact *= j as f64;
                }
                let m: f64 = u.iter().zip(&w).map(|(u, w)| w * u.powi(j)).sum();
                assert!((m - fact).abs() < 1e-9 * fact, "n {n} degree {j}: {m}");
            }
        }
        // E Q(√(2U)) = (1 − √(1/2))/2 for a Rayleigh-faded BPSK link at unit SNR.
        let (u, w) = rayleigh_power_rule(200);
        let v: f64 = u.iter().zip(&w).map(|(u, w)| w * gaussian_q((2.0 * u).sqrt())).sum();
        let exact = 0.5 * (1.0 - 0.5f64.sqrt());
        assert!((v - exact).abs() < 1e-12, "{v} vs {exact}");
    }

    fn reference_cov() -> SpdMatrix {
        SpdMatrix::from_row_slice(2, &[4.0, 0.5, 0.5, 0.25]).unwrap()
    }

    #[test]
    fn expectation_examples() {
        let rule = GaussQuadRule::new(2, GaussQuadRule::DEFAULT_NODES).unwrap();
        let c = reference_cov();
        let zero = DVector::zeros(2);
        let one = expect_over_gaussian(|_| 1.0, &DVector::from_vec(vec![1.0, -2.0]), &c, &rule)
            .unwrap();
        assert!((one - 1.0).abs() < 1e-12);

        let second = expect_matrix_over_gaussian(|t| t * t.transpose(), &zero, &c, &rule).unwrap();
        for (s, m) in second.iter().zip(c.matrix().iter()) {
            assert!((s - m).abs() <= 1e-10 * m.abs());
        }

        // A narrower integrand needs more nodes than the default.
        let fine = GaussQuadRule::new(2, 64).unwrap();
        let id = SpdMatrix::identity(2);
        let v = expect_over_gaussian(|t| (-t.norm_squared()).exp(), &zero, &id, &fine).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-10, "{v}");
    }

    #[test]
    fn expectation_rejects_mismatched_dimensions() {
        let rule = GaussQuadRule::new(3, 4).unwrap();
        let r = expect_over_gaussian(|_| 1.0, &DVector::zeros(2), &reference_cov(), &rule);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn spd_validation() {
        assert!(SpdMatrix::from_row_slice(2, &[1.0, 2.0, 2.0, 1.0]).is_err());
        assert!(SpdMatrix::from_row_slice(2, &[1.0, 0.1, 0.2, 1.0]).is_err());
        let c = reference_cov();
        assert_relative_eq!(c.ln_det(), 0.75f64.ln(), epsilon = 1e-14);
        let prod = c.matrix() * c.inverse();
        assert!((prod - DMatrix::identity(2, 2)).amax() < 1e-14);
        let rows: Vec<Vec<f64>> = c.clone().into();
        assert_eq!(SpdMatrix::try_from(rows).unwrap(), c);
    }

    #[test]
    fn loewner_gap_sign() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let b = DMatrix::identity(2, 2);
        assert_relative_eq!(loewner_gap(&a, &b), 0.0, epsilon = 1e-15);
        assert!(loewner_gap(&b, &a) < -0.5);
    }

    proptest! {
        #[test]
        fn q_complement_and_monotone(x in -30.0f64..30.0, dx in 1e-6f64..1.0) {
            prop_assert!((gaussian_q(x) + gaussian_q(-x) - 1.0).abs() <= 1e-14);
            prop_assert!(gaussian_q(x + dx) <= gaussian_q(x));
            // Strict where both values are representable away from 0 and 1.
            if x > -8.0 {
                prop_assert!(gaussian_q(x + dx) < gaussian_q(x));
            }
        }

        #[test]
        fn marcum_monotone(a in 0.0f64..6.0, b in 0.0f64..8.0, d in 0.01f64..1.0) {
            prop_assert!(marcum_q(a, b + d) <= marcum_q(a, b) + 1e-14);
            prop_assert!(marcum_q(a + d, b) + 1e-14 >= marcum_q(a, b));
            let q = marcum_q(a, b);
            prop_assert!((0.0..=1.0).contains(&q));
        }

        #[test]
        fn bivariate_symmetric(x in -4.0f64..4.0, y in -4.0f64..4.0, rho in -0.999f64..0.999) {
            let a = bivariate_q(x, y, rho).unwrap();
            let b = bivariate_q(y, x, rho).unwrap();
            prop_assert!((a - b).abs() < 1e-14);
            prop_assert!(a <= gaussian_q(x.max(y)) + 1e-14);
        }
    }
}
