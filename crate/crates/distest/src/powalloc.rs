//! Transmit-power allocation under a total budget `Σ P_k = P_tot`.
//!
//! The FIM and quasi-BLUE schemes solve the KKT system
//! `∇_k f(P) = λ (k active), Σ P_k = P_tot` by Newton-Raphson on
//! `z = [P_A, λ]`, dropping sensors Newton keeps pushing through zero and
//! readmitting any dropped sensor whose marginal gain beats `λ`. The
//! MSE-minimizing scheme has no tractable gradient and is found by a
//! simplex grid refined with Nelder-Mead.

use std::f64::consts::{LN_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{bit_error, transition_matrices, transition_matrix};
use crate::error::{Error, Result};
use crate::estimator::{faded_mse, faded_sensor, quasi_blue_mse, quasi_blue_terms, FadingRule, MomentTables};
use crate::fim::{check_quantizers, expected_g_at, LineRule, ScoreKernel};
use crate::model::{snr, NetworkModel, Receiver, SensorSpec};
use crate::numerics::{gaussian_pdf, SpdMatrix};
use crate::quantizer::QuantizerSpec;

/// Stationarity tolerance used by the KKT certificates.
pub const KKT_TOL: f64 = 1e-7;

/// Newton gives up on a sensor after this many consecutive steps that
/// would have taken its power below zero.
const BOUNDARY_HITS_TO_DROP: usize = 3;

/// Power given to a readmitted sensor, as a fraction of the budget.
const READMIT_FRACTION: f64 = 1e-3;

/// Smallest power scale for finite-difference steps.
const MAX_BACKTRACKS: usize = 30;
const FD_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    TrFim,
    LogdetFim,
    MseMin,
    QblueMin,
    Uniform,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::TrFim,
        Scheme::LogdetFim,
        Scheme::MseMin,
        Scheme::QblueMin,
        Scheme::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::TrFim => "tr_fim",
            Scheme::LogdetFim => "logdet_fim",
            Scheme::MseMin => "mse_min",
            Scheme::QblueMin => "qblue_min",
            Scheme::Uniform => "uniform",
        }
    }
}

/// Solver settings. The defaults are the constants every reported result
/// uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Newton iterations per active set.
    pub max_iter: usize,
    /// `‖f‖_∞` at which Newton stops.
    pub tol: f64,
    /// Initial points for nonconcave problems, the uniform split included.
    pub starts: usize,
    pub seed: u64,
    /// Relative finite-difference step for derivatives of `E{G_k}`.
    pub fd_step: f64,
    pub line_rule: LineRule,
    /// Average over Rayleigh envelopes with this many Gauss-Laguerre nodes.
    pub fading_nodes: Option<usize>,
    /// MSE-min grid points per free dimension.
    pub grid_points: usize,
    /// MSE-min grid points refined by Nelder-Mead.
    pub refine_from: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            starts: 10,
            seed: 0,
            fd_step: 1e-4,
            line_rule: LineRule::default(),
            fading_nodes: None,
            grid_points: 21,
            refine_from: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    /// Index of the initial point that produced the result (0 = uniform).
    pub start_index: usize,
    pub converged: bool,
    /// The search carries no optimality guarantee.
    pub heuristic: bool,
    /// Stationarity residual `max_{k∈A} |∇_k f − λ|`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerAllocation {
    pub scheme: Scheme,
    pub p: Vec<f64>,
    pub lambda: f64,
    pub active_set: Vec<usize>,
    /// `tr(J)`, `log₂|J|`, `tr(D)` or `tr(D_QBLUE)` depending on the scheme.
    pub objective: f64,
    pub diagnostics: Diagnostics,
}

/// Newton system in `z = [P_A, λ]`: `f = [∇f_A − λ; P_tot − ΣP_A]` and its
/// symmetric bordered Jacobian `[[H_AA, −1], [−1ᵀ, 0]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KktSystem {
    pub f: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

fn kkt_system(grad: &DVector<f64>, hess: &DMatrix<f64>, p: &[f64], lambda: f64, active: &[usize], p_tot: f64) -> KktSystem {
    let n = active.len();
    let mut f = DVector::zeros(n + 1);
    let mut jac = DMatrix::zeros(n + 1, n + 1);
    for (r, &i) in active.iter().enumerate() {
        f[r] = grad[i] - lambda;
        for c in 0..n {
            jac[(r, c)] = hess[(r, c)];
        }
        jac[(r, n)] = -1.0;
        jac[(n, r)] = -1.0;
    }
    f[n] = p_tot - active.iter().map(|&i| p[i]).sum::<f64>();
    KktSystem { f, jacobian: jac }
}

/// A smooth objective to maximize over the budget simplex.
trait KktModel: Sync {
    fn k(&self) -> usize;
    fn objective(&self, p: &[f64]) -> Result<f64>;
    /// Full gradient and the Hessian restricted to `active`.
    fn derivatives(&self, p: &[f64], active: &[usize]) -> Result<(DVector<f64>, DMatrix<f64>)>;
    fn gradient(&self, p: &[f64]) -> Result<DVector<f64>> {
        Ok(self.derivatives(p, &[])?.0)
    }
    /// Sensors that can never carry information and start inactive.
    fn inert(&self, _k: usize) -> bool {
        false
    }
}

/// `E{G_k}` as a function of transmit power, optionally averaged over a
/// Rayleigh envelope.
#[derive(Debug, Clone)]
pub struct GainCurve {
    kernel: ScoreKernel,
    sensor: SensorSpec,
    spec: QuantizerSpec,
    fading: Option<FadingRule>,
    fd_step: f64,
}

impl GainCurve {
    pub fn new(net: &NetworkModel, k: usize, spec: &QuantizerSpec, options: &SolverOptions) -> Result<Self> {
        let sensor = net
            .sensors
            .get(k)
            .ok_or(Error::IndexOutOfRange { index: k, len: net.k() })?
            .clone();
        let fading = match options.fading_nodes {
            Some(n) if sensor.receiver() != Receiver::Stats => Some(FadingRule::new(n)?),
            _ => None,
        };
        if !(options.fd_step > 0.0 && options.fd_step < 0.1) {
            return Err(Error::Domain(format!("fd_step {} outside (0, 0.1)", options.fd_step)));
        }
        Ok(Self {
            kernel: ScoreKernel::new(&sensor, spec, &net.prior, options.line_rule)?,
            sensor,
            spec: spec.clone(),
            fading,
            fd_step: options.fd_step,
        })
    }

    pub fn value(&self, p: f64) -> Result<f64> {
        match &self.fading {
            None => expected_g_at(&self.kernel, &self.sensor, &self.spec, p),
            Some(rule) => rule
                .nodes()
                .iter()
                .zip(rule.weights())
                .map(|(&u, &w)| Ok(w * expected_g_at(&self.kernel, &faded_sensor(&self.sensor, u), &self.spec, p)?))
                .sum(),
        }
    }

    /// `(g, g', g'')` by central differences with step `fd_step·max(p, 0.01)`,
    /// switching to one-sided second-order formulas near `p = 0`.
    pub fn derivatives(&self, p: f64) -> Result<(f64, f64, f64)> {
        let h = self.fd_step * p.max(FD_FLOOR);
        let g0 = self.value(p)?;
        if p >= 2.0 * h {
            let (gp, gm) = (self.value(p + h)?, self.value(p - h)?);
            Ok((g0, (gp - gm) / (2.0 * h), (gp - 2.0 * g0 + gm) / (h * h)))
        } else {
            let (g1, g2) = (self.value(p + h)?, self.value(p + 2.0 * h)?);
            Ok((g0, (-3.0 * g0 + 4.0 * g1 - g2) / (2.0 * h), (g0 - 2.0 * g1 + g2) / (h * h)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FimMetric {
    Trace,
    LogDet,
}

struct FimModel {
    metric: FimMetric,
    curves: Vec<GainCurve>,
    a: Vec<DVector<f64>>,
    /// `1/(2πσ_nk²)`
    scale: Vec<f64>,
    prior_inv: DMatrix<f64>,
}

impl FimModel {
    fn new(net: &NetworkModel, quantizers: &[QuantizerSpec], options: &SolverOptions, metric: FimMetric) -> Result<Self> {
        check_quantizers(net, quantizers)?;
        let curves = (0..net.k())
            .into_par_iter()
            .map(|k| GainCurve::new(net, k, &quantizers[k], options))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            metric,
            curves,
            a: net.sensors.iter().map(|s| s.a.clone()).collect(),
            scale: net.sensors.iter().map(|s| 1.0 / (2.0 * PI * s.sigma_n * s.sigma_n)).collect(),
            prior_inv: net.prior.cov.inverse(),
        })
    }

    fn fim(&self, g: &[f64]) -> Result<SpdMatrix> {
        let mut j = self.prior_inv.clone();
        for ((a, s), gk) in self.a.iter().zip(&self.scale).zip(g) {
            j += a * a.transpose() * (s * gk);
        }
        SpdMatrix::new(j)
    }

    fn values(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.curves.par_iter().zip(p).map(|(c, &pk)| c.value(pk)).collect()
    }
}

impl KktModel for FimModel {
    fn k(&self) -> usize {
        self.curves.len()
    }

    fn objective(&self, p: &[f64]) -> Result<f64> {
        let j = self.fim(&self.values(p)?)?;
        Ok(match self.metric {
            FimMetric::Trace => j.trace(),
            FimMetric::LogDet => j.ln_det() / LN_2,
        })
    }

    fn derivatives(&self, p: &[f64], active: &[usize]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d: Vec<(f64, f64, f64)> = self
            .curves
            .par_iter()
            .zip(p)
            .map(|(c, &pk)| c.derivatives(pk))
            .collect::<Result<_>>()?;
        let k = self.k();
        let n = active.len();
        match self.metric {
            FimMetric::Trace => {
                let c: Vec<f64> = self.a.iter().zip(&self.scale).map(|(a, s)| a.norm_squared() * s).collect();
                let grad = DVector::from_fn(k, |i, _| c[i] * d[i].1);
                let hess = DMatrix::from_fn(n, n, |r, q| if r == q { c[active[r]] * d[active[r]].2 } else { 0.0 });
                Ok((grad, hess))
            }
            FimMetric::LogDet => {
                let g: Vec<f64> = d.iter().map(|x| x.0).collect();
                let jinv = self.fim(&g)?.inverse();
                let b = |i: usize, j: usize| self.a[i].dot(&(&jinv * &self.a[j]));
                let grad = DVector::from_fn(k, |i, _| self.scale[i] * d[i].1 * b(i, i) / LN_2);
                let hess = DMatrix::from_fn(n, n, |r, q| {
                    let (i, j) = (active[r], active[q]);
                    let si = self.scale[i] * d[i].1;
                    let sj = self.scale[j] * d[j].1;
                    let bij = b(i, j);
                    let mut v = -si * sj * bij * bij;
                    if i == j {
                        v += self.scale[i] * d[i].2 * b(i, i);
                    }
                    v / LN_2
                });
                Ok((grad, hess))
            }
        }
    }

    fn inert(&self, k: usize) -> bool {
        self.a[k].norm_squared() == 0.0
    }
}

/// Maximizes `−tr(D_QBLUE)`.
struct QblueModel<'a> {
    net: &'a NetworkModel,
    quantizers: &'a [QuantizerSpec],
}

impl QblueModel<'_> {
    /// Analytic `−∂tr(D_QBLUE)/∂P_k` for every sensor.
    fn gradient_at(&self, p: &[f64]) -> Result<DVector<f64>> {
        let terms = quasi_blue_terms(self.net, self.quantizers, p)?;
        let d = quasi_blue_mse(self.net, self.quantizers, p)?;
        let mut grad = DVector::zeros(p.len());
        for (k, (s, t)) in self.net.sensors.iter().zip(&terms).enumerate() {
            let upsilon = t.normalized_variance(s.sigma_n);
            let e = t.eps;
            let r = 1.0 - 2.0 * e;
            let d_upsilon_d_eps = t.chi * (1.0 + 2.0 * e) / (r * r * r);
            let x = (2.0 * snr(s, p[k])?).sqrt();
            let d_eps_d_p = -gaussian_pdf(x) * snr(s, 1.0)? / x;
            let da = d.matrix() * &s.a;
            grad[k] = -da.norm_squared() * d_upsilon_d_eps * d_eps_d_p / (upsilon * upsilon);
        }
        Ok(grad)
    }
}

impl KktModel for QblueModel<'_> {
    fn k(&self) -> usize {
        self.net.k()
    }

    fn objective(&self, p: &[f64]) -> Result<f64> {
        Ok(-quasi_blue_mse(self.net, self.quantizers, p)?.trace())
    }

    fn derivatives(&self, p: &[f64], active: &[usize]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let grad = self.gradient_at(p)?;
        let n = active.len();
        let mut hess = DMatrix::zeros(n, n);
        for (c, &j) in active.iter().enumerate() {
            let h = 1e-5 * p[j];
            let mut up = p.to_vec();
            let mut dn = p.to_vec();
            up[j] += h;
            dn[j] -= h;
            let col = (self.gradient_at(&up)? - self.gradient_at(&dn)?) / (2.0 * h);
            for (r, &i) in active.iter().enumerate() {
                hess[(r, c)] = col[i];
            }
        }
        let hess = (&hess + hess.transpose()) * 0.5;
        Ok((grad, hess))
    }

    fn gradient(&self, p: &[f64]) -> Result<DVector<f64>> {
        self.gradient_at(p)
    }
}

fn rescale(p: &mut [f64], active: &[usize], p_tot: f64) {
    let s: f64 = active.iter().map(|&i| p[i]).sum();
    for &i in active {
        p[i] *= p_tot / s;
    }
}

struct NewtonRun {
    p: Vec<f64>,
    lambda: f64,
    active: Vec<usize>,
    iterations: usize,
}

/// Newton on a fixed active set, dropping sensors it pushes through zero.
fn newton_on_active(
    model: &dyn KktModel,
    p_tot: f64,
    p: &mut [f64],
    active: &mut Vec<usize>,
    options: &SolverOptions,
) -> Result<(f64, usize)> {
    let mut hits = vec![0usize; model.k()];
    let mut lambda = {
        let g = model.gradient(p)?;
        active.iter().map(|&i| g[i]).sum::<f64>() / active.len() as f64
    };
    for it in 0..options.max_iter {
        if active.len() == 1 {
            let i = active[0];
            p[i] = p_tot;
            return Ok((model.gradient(p)?[i], it));
        }
        let (grad, hess) = model.derivatives(p, active)?;
        let sys = kkt_system(&grad, &ascent_hessian(hess), p, lambda, active, p_tot);
        if sys.f.amax() <= options.tol {
            return Ok((lambda, it));
        }
        let dz = sys
            .jacobian
            .lu()
            .solve(&(-&sys.f))
            .filter(|v| v.iter().all(|x| x.is_finite()))
            .ok_or_else(|| Error::Solver("singular KKT Jacobian".into()))?;
        let n = active.len();
        let mut t = 1.0;
        let mut blocked = None;
        for (r, &i) in active.iter().enumerate() {
            if dz[r] < 0.0 && p[i] + dz[r] <= 0.0 {
                let ti = -p[i] / dz[r];
                if ti < t || blocked.is_none() {
                    t = t.min(ti);
                    blocked = Some(r);
                }
            }
        }
        if let Some(r) = blocked {
            let i = active[r];
            hits[i] += 1;
            if hits[i] >= BOUNDARY_HITS_TO_DROP {
                p[i] = 0.0;
                active.remove(r);
                rescale(p, active, p_tot);
                hits.iter_mut().for_each(|h| *h = 0);
                continue;
            }
            t *= 0.5;
        } else {
            hits.iter_mut().for_each(|h| *h = 0);
        }
        // Backtrack until the objective does not drop; the modified Hessian
        // makes the step an ascent direction along the budget plane. Steps
        // whose predicted gain is below the objective's noise floor skip this.
        let predicted: f64 = active.iter().enumerate().map(|(r, &i)| grad[i] * dz[r]).sum::<f64>() * t;
        let base = model.objective(p)?;
        let noise = 1e-10 * base.abs().max(1.0);
        let start = p.to_vec();
        for _ in 0..MAX_BACKTRACKS {
            for (r, &i) in active.iter().enumerate() {
                p[i] = start[i] + t * dz[r];
            }
            if predicted.abs() <= noise {
                break;
            }
            let ok = model.objective(p).map(|v| v >= base - noise);
            if matches!(ok, Ok(true)) {
                break;
            }
            t *= 0.5;
        }
        lambda += t * dz[n];
    }
    Err(Error::Solver(format!("Newton did not converge in {} iterations", options.max_iter)))
}

// Negative definite stand-in for an indefinite Hessian: eigenvalues are
// reflected below zero, so Newton steps head for maxima only. Concave
// models pass through unchanged.
fn ascent_hessian(hess: DMatrix<f64>) -> DMatrix<f64> {
    let n = hess.nrows();
    if n == 0 {
        return hess;
    }
    let eig = hess.clone().symmetric_eigen();
    let floor = 1e-8 * eig.eigenvalues.amax();
    if eig.eigenvalues.iter().all(|&v| v < -floor) {
        return hess;
    }
    let fixed = eig.eigenvalues.map(|v| -v.abs().max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&fixed) * eig.eigenvectors.transpose()
}

fn newton_from(model: &dyn KktModel, p_tot: f64, start: Vec<f64>, options: &SolverOptions) -> Result<NewtonRun> {
    let k = model.k();
    let mut p = start;
    let mut active: Vec<usize> = (0..k).filter(|&i| p[i] > 0.0 && !model.inert(i)).collect();
    for i in 0..k {
        if !active.contains(&i) {
            p[i] = 0.0;
        }
    }
    if active.is_empty() {
        return Err(Error::Solver("no sensor can carry information".into()));
    }
    rescale(&mut p, &active, p_tot);
    let mut iterations = 0;
    for _ in 0..(2 * k + 2) {
        let (lambda, it) = newton_on_active(model, p_tot, &mut p, &mut active, options)?;
        iterations += it;
        let grad = model.gradient(&p)?;
        let readmit: Vec<usize> = (0..k)
            .filter(|&i| !active.contains(&i) && !model.inert(i) && grad[i] > lambda + KKT_TOL)
            .collect();
        if readmit.is_empty() {
            rescale(&mut p, &active, p_tot);
            return Ok(NewtonRun {
                p,
                lambda,
                active,
                iterations,
            });
        }
        for i in readmit {
            p[i] = READMIT_FRACTION * p_tot;
            active.push(i);
        }
        active.sort_unstable();
        rescale(&mut p, &active, p_tot);
    }
    Err(Error::Solver("active set kept changing".into()))
}

/// The uniform split followed by `n − 1` Dirichlet(1) splits.
pub fn initial_points(k: usize, p_tot: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![vec![p_tot / k as f64; k]];
    for _ in 1..n.max(1) {
        let e: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let s: f64 = e.iter().sum();
        out.push(e.iter().map(|x| p_tot * x / s).collect());
    }
    out
}

fn check_budget(net: &NetworkModel, p_tot: f64) -> Result<()> {
    if !(p_tot > 0.0) || !p_tot.is_finite() {
        return Err(Error::Domain(format!("power budget must be finite and > 0, got {p_tot}")));
    }
    if net.k() == 0 {
        return Err(Error::InvalidModel("network has no sensors".into()));
    }
    Ok(())
}

fn solve_multistart(
    model: &dyn KktModel,
    scheme: Scheme,
    p_tot: f64,
    starts: usize,
    options: &SolverOptions,
    report: impl Fn(f64) -> f64,
) -> Result<PowerAllocation> {
    let points = initial_points(model.k(), p_tot, starts, options.seed);
    let runs: Vec<Result<(NewtonRun, f64)>> = points
        .into_par_iter()
        .map(|start| {
            let run = newton_from(model, p_tot, start, options)?;
            let obj = model.objective(&run.p)?;
            Ok((run, obj))
        })
        .collect();
    let mut best: Option<(usize, NewtonRun, f64)> = None;
    let mut first_err = None;
    for (idx, r) in runs.into_iter().enumerate() {
        match r {
            Ok((run, obj)) => {
                if best.as_ref().is_none_or(|b| obj > b.2) {
                    best = Some((idx, run, obj));
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let (start_index, run, obj) = best.ok_or_else(|| {
        Error::Solver(format!(
            "{} failed from every start: {}",
            scheme.name(),
            first_err.map_or_else(String::new, |e| e.to_string())
        ))
    })?;
    let grad = model.gradient(&run.p)?;
    let residual = run.active.iter().map(|&i| (grad[i] - run.lambda).abs()).fold(0.0, f64::max);
    Ok(PowerAllocation {
        scheme,
        lambda: run.lambda,
        active_set: run.active,
        objective: report(obj),
        diagnostics: Diagnostics {
            iterations: run.iterations,
            start_index,
            converged: residual <= KKT_TOL,
            heuristic: false,
            residual,
        },
        p: run.p,
    })
}

fn all_coherent(net: &NetworkModel) -> bool {
    net.sensors.iter().all(|s| s.receiver() == Receiver::Coherent)
}

fn at_budget(net: &NetworkModel, p_tot: f64) -> Result<NetworkModel> {
    check_budget(net, p_tot)?;
    net.with_p_tot(p_tot)
}

/// Maximizes `tr(J)`. Coherent networks are concave and use the uniform
/// split as the only start.
pub fn allocate_tr_fim(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    p_tot: f64,
    options: &SolverOptions,
) -> Result<PowerAllocation> {
    let net = at_budget(net, p_tot)?;
    let model = FimModel::new(&net, quantizers, options, FimMetric::Trace)?;
    let starts = if all_coherent(&net) { 1 } else { options.starts };
    solve_multistart(&model, Scheme::TrFim, p_tot, starts, options, |v| v)
}

/// Maximizes `log₂|J|`.
pub fn allocate_logdet_fim(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    p_tot: f64,
    options: &SolverOptions,
) -> Result<PowerAllocation> {
    let net = at_budget(net, p_tot)?;
    let model = FimModel::new(&net, quantizers, options, FimMetric::LogDet)?;
    solve_multistart(&model, Scheme::LogdetFim, p_tot, options.starts, options, |v| v)
}

/// Minimizes `tr(D_QBLUE)`; convex, so a single start.
pub fn allocate_qblue_min(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    p_tot: f64,
    options: &SolverOptions,
) -> Result<PowerAllocation> {
    let net = at_budget(net, p_tot)?;
    if let Some(s) = net.sensors.iter().find(|s| s.receiver() != Receiver::Coherent) {
        return Err(Error::Unsupported(format!(
            "quasi-BLUE needs coherent receivers, found {}",
            s.receiver().name()
        )));
    }
    let model = QblueModel {
        net: &net,
        quantizers,
    };
    // surfaces precondition errors before the solver masks them
    quasi_blue_mse(&net, quantizers, &net.uniform_powers())?;
    solve_multistart(&model, Scheme::QblueMin, p_tot, 1, options, |v| -v)
}

/// Equal split, scored by `tr(J)`.
pub fn allocate_uniform(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    p_tot: f64,
    options: &SolverOptions,
) -> Result<PowerAllocation> {
    let net = at_budget(net, p_tot)?;
    let p = net.uniform_powers();
    let objective = FimModel::new(&net, quantizers, options, FimMetric::Trace)?.objective(&p)?;
    Ok(PowerAllocation {
        scheme: Scheme::Uniform,
        active_set: (0..net.k()).collect(),
        lambda: 0.0,
        objective,
        diagnostics: Diagnostics {
            iterations: 0,
            start_index: 0,
            converged: true,
            heuristic: false,
            residual: 0.0,
        },
        p,
    })
}

/// `∂tr(J)/∂P_k = ‖a_k‖²/(2πσ_nk²) · dE{G_k}/dP_k` by finite differences.
pub fn gradient_tr_fim(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    powers: &[f64],
    k: usize,
    options: &SolverOptions,
) -> Result<f64> {
    check_quantizers(net, quantizers)?;
    crate::channel::check_powers(net, powers)?;
    let curve = GainCurve::new(net, k, &quantizers[k], options)?;
    let s = &net.sensors[k];
    Ok(s.a.norm_squared() / (2.0 * PI * s.sigma_n * s.sigma_n) * curve.derivatives(powers[k])?.1)
}

/// Diagonal of the Hessian of `tr(J)` in the powers; the off-diagonal
/// entries vanish since `tr(J)` is a sum of per-sensor terms.
pub fn hessian_diag(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    powers: &[f64],
    options: &SolverOptions,
) -> Result<Vec<f64>> {
    check_quantizers(net, quantizers)?;
    crate::channel::check_powers(net, powers)?;
    (0..net.k())
        .into_par_iter()
        .map(|k| {
            let s = &net.sensors[k];
            let curve = GainCurve::new(net, k, &quantizers[k], options)?;
            Ok(s.a.norm_squared() / (2.0 * PI * s.sigma_n * s.sigma_n) * curve.derivatives(powers[k])?.2)
        })
        .collect()
}

/// KKT quantities of an allocation, recomputed from scratch.
#[derive(Debug, Clone, PartialEq)]
pub struct KktCertificate {
    /// `max_{k∈A} |∇_k f − λ|`
    pub stationarity: f64,
    /// `|ΣP − P_tot|`
    pub budget_gap: f64,
    pub lambda: f64,
    /// `max_{k∉A} (∇_k f − λ)`, or −∞ when every sensor is active.
    pub inactive_excess: f64,
}

impl KktCertificate {
    pub fn holds(&self, tol: f64) -> bool {
        self.stationarity <= tol && self.budget_gap <= 1e-9 && self.lambda > 0.0 && self.inactive_excess <= tol
    }
}

pub fn kkt_certificate(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    p_tot: f64,
    alloc: &PowerAllocation,
    options: &SolverOptions,
) -> Result<KktCertificate> {
    let net = at_budget(net, p_tot)?;
    let grad = match alloc.scheme {
        Scheme::TrFim => FimModel::new(&net, quantizers, options, FimMetric::Trace)?.gradient(&alloc.p)?,
        Scheme::LogdetFim => FimModel::new(&net, quantizers, options, FimMetric::LogDet)?.gradient(&alloc.p)?,
        Scheme::QblueMin => QblueModel {
            net: &net,
            quantizers,
        }
        .gradient(&alloc.p)?,
        other => {
            return Err(Error::Unsupported(format!("{} has no KKT system", other.name())));
        }
    };
    let active = &alloc.active_set;
    let stationarity = active.iter().map(|&i| (grad[i] - alloc.lambda).abs()).fold(0.0, f64::max);
    let inactive_excess = (0..net.k())
        .filter(|i| !active.contains(i))
        .map(|i| grad[i] - alloc.lambda)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(KktCertificate {
        stationarity,
        budget_gap: (alloc.p.iter().sum::<f64>() - p_tot).abs(),
        lambda: alloc.lambda,
        inactive_excess,
    })
}

/// `tr(D)` as a function of the powers, with precomputed moment tables.
pub struct MseObjective<'a> {
    net: &'a NetworkModel,
    quantizers: &'a [QuantizerSpec],
    tables: MomentTables,
    fading: Option<FadingRule>,
}

impl<'a> MseObjective<'a> {
    pub fn new(net: &'a NetworkModel, quantizers: &'a [QuantizerSpec], fading_nodes: Option<usize>) -> Result<Self> {
        Ok(Self {
            net,
            quantizers,
            tables: MomentTables::new(net, quantizers)?,
            fading: fading_nodes.map(FadingRule::new).transpose()?,
        })
    }

    pub fn trace(&self, p: &[f64]) -> Result<f64> {
        Ok(self.matrix(p)?.trace())
    }

    pub fn matrix(&self, p: &[f64]) -> Result<DMatrix<f64>> {
        match &self.fading {
            Some(rule) => faded_mse(&self.tables, self.net, self.quantizers, p, rule),
            None => {
                let alphas = transition_matrices(self.net, self.quantizers, p)?;
                let refs: Vec<&DMatrix<f64>> = alphas.iter().map(|a| a.matrix()).collect();
                Ok(self.tables.mse(&refs)?.0)
            }
        }
    }
}

/// All splits of `P_tot` into multiples of `P_tot/(n − 1)`.
pub fn simplex_grid(k: usize, n: usize, p_tot: f64) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            cur.push(left);
            out.push(cur.clone());
            cur.pop();
            return;
        }
        for v in 0..=left {
            cur.push(v);
            rec(k - 1, left - v, cur, out);
            cur.pop();
        }
    }
    let steps = n.max(2) - 1;
    let mut out = Vec::new();
    rec(k, steps, &mut Vec::with_capacity(k), &mut out);
    out.into_iter()
        .map(|c| c.iter().map(|&v| p_tot * v as f64 / steps as f64).collect())
        .collect()
}

/// Powers from the `K − 1` free fractions, with a penalty for leaving the
/// simplex.
fn from_fractions(x: &[f64], p_tot: f64) -> (Vec<f64>, f64) {
    let last = 1.0 - x.iter().sum::<f64>();
    let y: Vec<f64> = x.iter().copied().chain(std::iter::once(last)).collect();
    let violation: f64 = y.iter().map(|v| (-v).max(0.0)).sum();
    let clamped: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
    let s: f64 = clamped.iter().sum();
    (clamped.iter().map(|v| p_tot * v / s).collect(), violation)
}

struct NmResult {
    x: Vec<f64>,
    f: f64,
    evals: usize,
    converged: bool,
}

fn nelder_mead(f: &dyn Fn(&[f64]) -> Result<f64>, x0: &[f64], step: f64, max_evals: usize) -> Result<NmResult> {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += if v[i] + step <= 1.0 { step } else { -step };
        simplex.push(v);
    }
    let mut vals = simplex.iter().map(|v| f(v)).collect::<Result<Vec<_>>>()?;
    let mut evals = n + 1;
    let mut converged = false;
    while evals < max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let spread = vals[n] - vals[0];
        let diam = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        // tr D carries about 1e-12 relative noise from the moment tables,
        // so a tighter spread is not attainable near flat corners
        if spread <= 1e-12 * vals[0].abs().max(1e-300) && diam < 1e-6 {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (w - c)).collect() };
        let xr = along(-1.0);
        let fr = f(&xr)?;
        evals += 1;
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe)?;
            evals += 1;
            if fe < fr {
                simplex[n] = xe;
                vals[n] = fe;
            } else {
                simplex[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            simplex[n] = xr;
            vals[n] = fr;
        } else {
            let (xc, fc) = if fr < vals[n] {
                let xc = along(-0.5);
                let fc = f(&xc)?;
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = f(&xc)?;
                (xc, fc)
            };
            evals += 1;
            if fc < vals[n].min(fr) {
                simplex[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    simplex[i] = simplex[i].iter().zip(&simplex[0]).map(|(v, b)| b + 0.5 * (v - b)).collect();
                    vals[i] = f(&simplex[i])?;
                }
                evals += n;
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).expect("nonempty simplex");
    Ok(NmResult {
        x: simplex[best].clone(),
        f: vals[best],
        evals,
        converged,
    })
}

/// Grid search plus Nelder-Mead refinement, warm-started from the two
/// FIM-max solutions when they are available.
pub fn allocate_mse_min(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    p_tot: f64,
    options: &SolverOptions,
) -> Result<PowerAllocation> {
    let warm: Vec<Vec<f64>> = [allocate_tr_fim(net, quantizers, p_tot, options), allocate_logdet_fim(net, quantizers, p_tot, options)]
        .into_iter()
        .filter_map(|r| r.ok().map(|a| a.p))
        .collect();
    allocate_mse_min_from(net, quantizers, p_tot, options, &warm)
}

/// [`allocate_mse_min`] with caller-supplied warm starts.
pub fn allocate_mse_min_from(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    p_tot: f64,
    options: &SolverOptions,
    warm_starts: &[Vec<f64>],
) -> Result<PowerAllocation> {
    let net = at_budget(net, p_tot)?;
    let obj = MseObjective::new(&net, quantizers, options.fading_nodes)?;
    let k = net.k();
    let done = |p: Vec<f64>, objective: f64, evals: usize, converged: bool, heuristic: bool, start_index: usize| PowerAllocation {
        scheme: Scheme::MseMin,
        active_set: (0..k).filter(|&i| p[i] > 0.0).collect(),
        lambda: 0.0,
        objective,
        diagnostics: Diagnostics {
            iterations: evals,
            start_index,
            converged,
            heuristic,
            residual: f64::NAN,
        },
        p,
    };
    if k == 1 {
        let p = vec![p_tot];
        let v = obj.trace(&p)?;
        return Ok(done(p, v, 1, true, false, 0));
    }
    let heuristic = k > 4;
    let mut candidates = if heuristic {
        initial_points(k, p_tot, options.starts, options.seed)
    } else {
        simplex_grid(k, options.grid_points, p_tot)
    };
    let n_grid = candidates.len();
    candidates.extend(warm_starts.iter().filter(|w| w.len() == k).cloned());
    let scored: Vec<(usize, f64)> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, p)| Ok((i, obj.trace(p)?)))
        .collect::<Result<_>>()?;
    let mut grid_rank: Vec<(usize, f64)> = scored[..n_grid].to_vec();
    grid_rank.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut seeds: Vec<usize> = grid_rank.iter().take(options.refine_from.max(1)).map(|x| x.0).collect();
    seeds.extend(n_grid..candidates.len());
    let penalized = |x: &[f64]| -> Result<f64> {
        let (p, violation) = from_fractions(x, p_tot);
        let v = obj.trace(&p)?;
        Ok(v + violation * 10.0 * (1.0 + v.abs()))
    };
    let step = 0.5 / (options.grid_points.max(2) - 1) as f64;
    let refined: Vec<(usize, NmResult)> = seeds
        .par_iter()
        .map(|&i| {
            let x0: Vec<f64> = candidates[i][..k - 1].iter().map(|v| v / p_tot).collect();
            Ok((i, nelder_mead(&penalized, &x0, step, 400 * k)?))
        })
        .collect::<Result<_>>()?;
    let evals = n_grid + warm_starts.len() + refined.iter().map(|r| r.1.evals).sum::<usize>();
    let converged = refined.iter().all(|r| r.1.converged);
    let mut best_idx = scored.iter().min_by(|a, b| a.1.total_cmp(&b.1)).expect("nonempty").0;
    let mut best_p = candidates[best_idx].clone();
    let mut best_v = scored[best_idx].1;
    for (i, r) in &refined {
        let (p, violation) = from_fractions(&r.x, p_tot);
        if violation == 0.0 && r.f < best_v {
            best_v = r.f;
            best_p = p;
            best_idx = *i;
        }
    }
    Ok(done(best_p, best_v, evals, converged, heuristic, best_idx))
}

/// Dispatches on `scheme`.
pub fn allocate(
    scheme: Scheme,
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    p_tot: f64,
    options: &SolverOptions,
) -> Result<PowerAllocation> {
    match scheme {
        Scheme::TrFim => allocate_tr_fim(net, quantizers, p_tot, options),
        Scheme::LogdetFim => allocate_logdet_fim(net, quantizers, p_tot, options),
        Scheme::MseMin => allocate_mse_min(net, quantizers, p_tot, options),
        Scheme::QblueMin => allocate_qblue_min(net, quantizers, p_tot, options),
        Scheme::Uniform => allocate_uniform(net, quantizers, p_tot, options),
    }
}

/// Coherent `dε/dP` at power `p`, for the analytic gradient cross-check.
pub fn coherent_eps_derivative(sensor: &SensorSpec, p: f64) -> Result<f64> {
    let x = (2.0 * snr(sensor, p)?).sqrt();
    Ok(-gaussian_pdf(x) * snr(sensor, 1.0)? / x)
}

/// `d/dε` of the symmetric-channel transition matrix (per-bit product rule).
pub fn symmetric_alpha_derivative(spec: &QuantizerSpec, eps: f64) -> DMatrix<f64> {
    let m = spec.len();
    let bits = spec.bits();
    DMatrix::from_fn(m, m, |t, l| {
        let flips = ((t ^ l) as u32).count_ones() as i32;
        let keeps = bits as i32 - flips;
        // ε^f (1 − ε)^(L − f)
        let mut d = 0.0;
        if flips > 0 {
            d += flips as f64 * eps.powi(flips - 1) * (1.0 - eps).powi(keeps);
        }
        if keeps > 0 {
            d -= keeps as f64 * eps.powi(flips) * (1.0 - eps).powi(keeps - 1);
        }
        d
    })
}

/// `E{G_k}` of a sensor whose transition matrix is the symmetric one at
/// coherent power `p`; used by tests as a value oracle.
pub fn coherent_expected_g(kernel: &ScoreKernel, sensor: &SensorSpec, spec: &QuantizerSpec, p: f64) -> Result<f64> {
    let a = transition_matrix(&bit_error(sensor, p)?, spec)?;
    Ok(kernel.expected_g(a.matrix()))
}
