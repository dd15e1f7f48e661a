//! Bayesian and classical Fisher information of the quantized, noisy
//! network, its error-free and unquantized baselines, and the
//! mutual-information lower bound.
//!
//! For sensor `k` the score of `θ` factors as `a_k/(√(2π)σ_n)` times a
//! scalar that depends on `θ` only through `s = a_kᵀθ`. So each sensor
//! contributes `a_k a_kᵀ G_k(θ)/(2πσ_n²)`, and `E{G_k}` is a 1-D
//! expectation in `s`.
//!
//! With a noisy channel `G_k(s)` bends sharply where the channel-error
//! term overtakes a cell's own probability, and Gauss-Hermite converges
//! slowly there (about 1e-7 relative at 128 nodes). The default rule is
//! therefore a composite Gauss-Legendre rule with panels no wider than
//! `σ_n/2`, which reaches 1e-14.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::{check_powers, transition_matrix, bit_error, TransitionMatrix};
use crate::error::{Error, Result};
use crate::model::{GaussianPrior, NetworkModel, SensorSpec};
use crate::numerics::{gauss_hermite, gaussian_interval, normal_composite_rule, GaussQuadRule, SpdMatrix};
use crate::quantizer::QuantizerSpec;

/// Quadrature in `s = a_kᵀθ` used for `E{G_k}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LineRule {
    GaussHermite { nodes: usize },
    /// Composite Gauss-Legendre on `±10` standard deviations with at least
    /// `min_panels` panels, refined until a panel spans at most `σ_n/2`.
    Composite { min_panels: usize, order: usize },
}

impl Default for LineRule {
    fn default() -> Self {
        LineRule::Composite {
            min_panels: 80,
            order: 8,
        }
    }
}

impl LineRule {
    fn nodes(&self, mean: f64, sd: f64, sigma_n: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        match *self {
            LineRule::GaussHermite { nodes } => {
                if nodes == 0 {
                    return Err(Error::Domain("need at least one quadrature node".into()));
                }
                let (z, w) = gauss_hermite(nodes);
                Ok((z.iter().map(|zi| mean + sd * zi).collect(), w))
            }
            LineRule::Composite { min_panels, order } => {
                if min_panels == 0 || order == 0 {
                    return Err(Error::Domain("composite rule needs panels and order ≥ 1".into()));
                }
                let needed = (40.0 * sd / sigma_n).ceil().min(20_000.0) as usize;
                Ok(normal_composite_rule(mean, sd, min_panels.max(needed), order))
            }
        }
    }
}

/// Denominators below this are unreachable outcomes and contribute 0.
const UNREACHABLE: f64 = 1e-300;

fn cell_terms(spec: &QuantizerSpec, sigma_n: f64, s: f64) -> (Vec<f64>, Vec<f64>) {
    let u = spec.boundaries();
    let z: Vec<f64> = u.iter().map(|b| (b - s) / sigma_n).collect();
    let e: Vec<f64> = z
        .iter()
        .map(|v| if v.is_finite() { (-0.5 * v * v).exp() } else { 0.0 })
        .collect();
    let beta = z.windows(2).map(|w| gaussian_interval(w[0], w[1])).collect();
    let beta_dot = e.windows(2).map(|w| w[0] - w[1]).collect();
    (beta, beta_dot)
}

fn check_level(spec: &QuantizerSpec, l: usize) -> Result<()> {
    if l < spec.len() {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange {
            index: l,
            len: spec.len(),
        })
    }
}

/// `β_l(θ) = P(u_l < x ≤ u_{l+1} | θ)` for `x ~ N(aᵀθ, σ_n²)`.
pub fn beta(spec: &QuantizerSpec, sensor: &SensorSpec, theta: &DVector<f64>, l: usize) -> Result<f64> {
    check_level(spec, l)?;
    let s = sensor.a.dot(theta);
    let u = spec.boundaries();
    Ok(gaussian_interval(
        (u[l] - s) / sensor.sigma_n,
        (u[l + 1] - s) / sensor.sigma_n,
    ))
}

/// `β̇_l(θ) = exp(−(u_l − aᵀθ)²/2σ_n²) − exp(−(u_{l+1} − aᵀθ)²/2σ_n²)`.
pub fn beta_dot(
    spec: &QuantizerSpec,
    sensor: &SensorSpec,
    theta: &DVector<f64>,
    l: usize,
) -> Result<f64> {
    check_level(spec, l)?;
    let (_, bd) = cell_terms(spec, sensor.sigma_n, sensor.a.dot(theta));
    Ok(bd[l])
}

fn g_from_terms(alpha: &DMatrix<f64>, beta: &[f64], beta_dot: &[f64]) -> f64 {
    let m = beta.len();
    let mut g = 0.0;
    for t in 0..m {
        let mut num = 0.0;
        let mut den = 0.0;
        for l in 0..m {
            let a = alpha[(t, l)];
            num += a * beta_dot[l];
            den += a * beta[l];
        }
        if den >= UNREACHABLE {
            g += num * num / den;
        }
    }
    g
}

/// `G_k(θ) = Σ_t (Σ_l α_tl β̇_l)² / Σ_l α_tl β_l`.
pub fn g_k(
    alpha: &TransitionMatrix,
    spec: &QuantizerSpec,
    sensor: &SensorSpec,
    theta: &DVector<f64>,
) -> Result<f64> {
    if alpha.len() != spec.len() {
        return Err(Error::Dimension(format!(
            "transition matrix has {} levels, quantizer {}",
            alpha.len(),
            spec.len()
        )));
    }
    let (b, bd) = cell_terms(spec, sensor.sigma_n, sensor.a.dot(theta));
    Ok(g_from_terms(alpha.matrix(), &b, &bd))
}

/// `β` and `β̇` of one sensor tabulated at the quadrature nodes of
/// `s = a_kᵀθ`. They do not depend on transmit power, so `E{G_k}` at any
/// power only needs the transition matrix.
#[derive(Debug, Clone)]
pub struct ScoreKernel {
    weights: Vec<f64>,
    beta: Vec<Vec<f64>>,
    beta_dot: Vec<Vec<f64>>,
}

impl ScoreKernel {
    pub fn new(sensor: &SensorSpec, spec: &QuantizerSpec, prior: &GaussianPrior, rule: LineRule) -> Result<Self> {
        if sensor.a.len() != prior.dim() {
            return Err(Error::Dimension(format!(
                "gain has {} entries, prior {}",
                sensor.a.len(),
                prior.dim()
            )));
        }
        let mean = sensor.a.dot(&prior.mean);
        let sd = sensor.a.dot(&(prior.cov.matrix() * &sensor.a)).sqrt();
        let (z, w) = if sd > 0.0 {
            rule.nodes(mean, sd, sensor.sigma_n)?
        } else {
            (vec![mean], vec![1.0])
        };
        let (beta, beta_dot) = z.iter().map(|si| cell_terms(spec, sensor.sigma_n, *si)).unzip();
        Ok(Self {
            weights: w,
            beta,
            beta_dot,
        })
    }

    /// `E_θ{G_k(θ)}` under the transition matrix `alpha`.
    pub fn expected_g(&self, alpha: &DMatrix<f64>) -> f64 {
        self.weights
            .iter()
            .zip(self.beta.iter().zip(&self.beta_dot))
            .map(|(w, (b, bd))| w * g_from_terms(alpha, b, bd))
            .sum()
    }

    /// Derivative of [`expected_g`](Self::expected_g) along `d_alpha`,
    /// i.e. `d/dt E{G}(alpha + t·d_alpha)` at `t = 0`.
    pub fn expected_g_directional(&self, alpha: &DMatrix<f64>, d_alpha: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for (w, (b, bd)) in self.weights.iter().zip(self.beta.iter().zip(&self.beta_dot)) {
            let m = b.len();
            let mut acc = 0.0;
            for t in 0..m {
                let (mut num, mut den, mut dnum, mut dden) = (0.0, 0.0, 0.0, 0.0);
                for l in 0..m {
                    num += alpha[(t, l)] * bd[l];
                    den += alpha[(t, l)] * b[l];
                    dnum += d_alpha[(t, l)] * bd[l];
                    dden += d_alpha[(t, l)] * b[l];
                }
                if den >= UNREACHABLE {
                    acc += 2.0 * num * dnum / den - num * num * dden / (den * den);
                }
            }
            total += w * acc;
        }
        total
    }

    /// `E_θ{G_k^ideal(θ)} = E{Σ_l β̇_l²/β_l}`.
    pub fn expected_g_ideal(&self) -> f64 {
        let m = self.beta.first().map_or(0, Vec::len);
        self.expected_g(&DMatrix::identity(m, m))
    }
}

/// Score kernels for every sensor of `net`.
pub fn score_kernels(net: &NetworkModel, quantizers: &[QuantizerSpec], rule: LineRule) -> Result<Vec<ScoreKernel>> {
    check_quantizers(net, quantizers)?;
    net.sensors
        .iter()
        .zip(quantizers)
        .map(|(s, q)| ScoreKernel::new(s, q, &net.prior, rule))
        .collect()
}

pub(crate) fn check_quantizers(net: &NetworkModel, quantizers: &[QuantizerSpec]) -> Result<()> {
    if quantizers.len() != net.k() {
        return Err(Error::Dimension(format!(
            "{} quantizers for {} sensors",
            quantizers.len(),
            net.k()
        )));
    }
    for (k, (s, q)) in net.sensors.iter().zip(quantizers).enumerate() {
        if s.bits != q.bits() {
            return Err(Error::Dimension(format!(
                "sensor {k} has {} bits, quantizer {}",
                s.bits,
                q.bits()
            )));
        }
    }
    Ok(())
}

/// `E{G_k}` of one sensor at transmit power `p`.
pub fn expected_g_at(kernel: &ScoreKernel, sensor: &SensorSpec, spec: &QuantizerSpec, p: f64) -> Result<f64> {
    let alpha = transition_matrix(&bit_error(sensor, p)?, spec)?;
    Ok(kernel.expected_g(alpha.matrix()))
}

/// Bayesian FIM with its baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherReport {
    pub j: SpdMatrix,
    /// Unquantized observations over perfect channels.
    pub j0: SpdMatrix,
    /// Quantized observations over error-free channels.
    pub j_ideal: SpdMatrix,
    pub expected_g: Vec<f64>,
    pub expected_g_ideal: Vec<f64>,
}

impl FisherReport {
    pub fn trace(&self) -> f64 {
        self.j.trace()
    }

    pub fn log2_det(&self) -> f64 {
        self.j.ln_det() / std::f64::consts::LN_2
    }

    pub fn crb(&self) -> DMatrix<f64> {
        self.j.inverse()
    }
}

/// `C_θ⁻¹ + Σ_k a_k a_kᵀ g_k/(2πσ_nk²)`.
pub fn assemble_fim(net: &NetworkModel, g: &[f64]) -> Result<SpdMatrix> {
    let mut j = net.prior.cov.inverse();
    for (s, gk) in net.sensors.iter().zip(g) {
        j += &s.a * s.a.transpose() * (gk / (2.0 * std::f64::consts::PI * s.sigma_n * s.sigma_n));
    }
    SpdMatrix::new(j)
}

/// `C_θ⁻¹ + Σ_k a_k a_kᵀ/σ_nk²`.
pub fn unquantized_fim(net: &NetworkModel) -> Result<SpdMatrix> {
    let mut j = net.prior.cov.inverse();
    for s in &net.sensors {
        j += &s.a * s.a.transpose() / (s.sigma_n * s.sigma_n);
    }
    SpdMatrix::new(j)
}

/// Bayesian FIM from precomputed kernels and transition matrices.
pub fn fim_from_kernels(
    net: &NetworkModel,
    kernels: &[ScoreKernel],
    alphas: &[TransitionMatrix],
) -> Result<FisherReport> {
    let expected_g: Vec<f64> = kernels
        .iter()
        .zip(alphas)
        .map(|(k, a)| k.expected_g(a.matrix()))
        .collect();
    let expected_g_ideal: Vec<f64> = kernels.iter().map(ScoreKernel::expected_g_ideal).collect();
    Ok(FisherReport {
        j: assemble_fim(net, &expected_g)?,
        j0: unquantized_fim(net)?,
        j_ideal: assemble_fim(net, &expected_g_ideal)?,
        expected_g,
        expected_g_ideal,
    })
}

/// Bayesian FIM `J`, `J₀` and `J^ideal` at the given powers.
pub fn bayesian_fim(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    powers: &[f64],
    rule: LineRule,
) -> Result<FisherReport> {
    check_powers(net, powers)?;
    let kernels = score_kernels(net, quantizers, rule)?;
    let alphas = crate::channel::transition_matrices(net, quantizers, powers)?;
    fim_from_kernels(net, &kernels, &alphas)
}

/// Classical FIM `J_c(θ) = (1/2π) Σ_k a_k a_kᵀ G_k(θ)/σ_nk²`. Positive
/// semidefinite, singular when fewer than `q` sensors carry information.
pub fn classical_fim(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    powers: &[f64],
    theta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let alphas = crate::channel::transition_matrices(net, quantizers, powers)?;
    check_quantizers(net, quantizers)?;
    classical_fim_with(net, quantizers, &alphas, theta)
}

fn classical_fim_with(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    alphas: &[TransitionMatrix],
    theta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let q = net.q();
    let mut jc = DMatrix::zeros(q, q);
    for ((s, spec), alpha) in net.sensors.iter().zip(quantizers).zip(alphas) {
        let g = g_k(alpha, spec, s, theta)?;
        jc += &s.a * s.a.transpose() * (g / (2.0 * std::f64::consts::PI * s.sigma_n * s.sigma_n));
    }
    Ok(jc)
}

/// `E_θ{J_c(θ)}` under a q-dimensional tensor rule.
pub fn expected_classical_fim(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    powers: &[f64],
    rule: &GaussQuadRule,
) -> Result<DMatrix<f64>> {
    let alphas = crate::channel::transition_matrices(net, quantizers, powers)?;
    check_quantizers(net, quantizers)?;
    crate::numerics::expect_matrix_over_gaussian(
        |theta| classical_fim_with(net, quantizers, &alphas, theta).expect("dimensions checked"),
        &net.prior.mean,
        &net.prior.cov,
        rule,
    )
}

/// Mutual-information lower bound `½(log₂|C_θ| + log₂|J|)` in bits.
pub fn mi_lower_bound(report: &FisherReport, prior: &GaussianPrior) -> f64 {
    0.5 * (prior.cov.ln_det() + report.j.ln_det()) / std::f64::consts::LN_2
}
