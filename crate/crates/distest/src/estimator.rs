//! LMMSE fusion of the recovered levels, its MSE matrix `D` with the
//! centralized and error-free baselines, and the quasi-BLUE of a
//! deterministic `θ`.
//!
//! Every moment the LMMSE needs is linear in the transition matrices, so
//! the Gaussian integrals are tabulated once per network and quantizer set
//! ([`MomentTables`]) and reused for any channel state. That is what keeps
//! fading averages and power searches cheap.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::channel::{bit_error, check_powers, transition_matrices, transition_matrix, TransitionMatrix};
use crate::error::{Error, Result};
use crate::fim::check_quantizers;
use crate::model::{Channel, NetworkModel, Receiver, SensorSpec};
use crate::numerics::{bivariate_q, gaussian_interval, gaussian_pdf, rayleigh_power_rule, SpdMatrix};
use crate::quantizer::{QuantizerKind, QuantizerSpec};

/// Relative eigenvalue floor below which `E{m̆m̆ᵀ}` counts as singular.
const SINGULAR_RCOND: f64 = 1e-13;

/// First and second moments of the recovered levels.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    /// `E{θm̂ᵀ}`, q × K.
    pub cross: DMatrix<f64>,
    /// `E{m̂}`.
    pub mean: DVector<f64>,
    /// `E{m̂m̂ᵀ}`.
    pub second: DMatrix<f64>,
    /// `E{m̆m̆ᵀ}` with `m̆ = m̂ − E{m̂}`.
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct SensorTable {
    /// `Cov{θ, 1[x ∈ cell l]}` per cell.
    i1: Vec<DVector<f64>>,
    /// `P(x ∈ cell l)`.
    i2: Vec<f64>,
    levels: Vec<f64>,
}

struct SensorState {
    v: DVector<f64>,
    mean: f64,
    second: f64,
    centred: DVector<f64>,
}

/// Gaussian cell integrals of a network, independent of the channels.
///
/// For sensor `k` with `σ_k² = σ_nk² + a_kᵀC_θa_k` and standardized
/// boundaries `z_l = (u_l − a_kᵀμ)/σ_k`:
/// `I²_l = Φ(z_{l+1}) − Φ(z_l)`,
/// `I¹_l = C_θa_k(φ(z_l) − φ(z_{l+1}))/σ_k` (centred on the prior mean),
/// and for a pair `(i, j)` the joint cell mass `I³` of the bivariate normal
/// with `ρ = a_iᵀC_θa_j/(σ_iσ_j)`.
#[derive(Debug, Clone)]
pub struct MomentTables {
    sensors: Vec<SensorTable>,
    /// Row-major upper triangle, `pairs[idx(i, j)]` is `M_i × M_j`.
    pairs: Vec<DMatrix<f64>>,
    k: usize,
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
}

fn pair_index(k: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < k);
    i * (2 * k - i - 1) / 2 + (j - i - 1)
}

fn standardized_boundaries(sensor: &SensorSpec, spec: &QuantizerSpec, net: &NetworkModel) -> (Vec<f64>, f64) {
    let c = net.prior.cov.matrix();
    let var = sensor.sigma_n * sensor.sigma_n + sensor.a.dot(&(c * &sensor.a));
    let sd = var.sqrt();
    let shift = sensor.a.dot(&net.prior.mean);
    let z = spec.boundaries().iter().map(|u| (u - shift) / sd).collect();
    (z, sd)
}

/// Joint cell masses `P(x_i ∈ cell l1, x_j ∈ cell l2)` from upper orthant
/// probabilities at every boundary pair.
fn joint_cells(zi: &[f64], zj: &[f64], rho: f64) -> Result<DMatrix<f64>> {
    let (mi, mj) = (zi.len() - 1, zj.len() - 1);
    let mut orth = DMatrix::zeros(mi + 1, mj + 1);
    for a in 0..=mi {
        for b in 0..=mj {
            orth[(a, b)] = bivariate_q(zi[a], zj[b], rho)?;
        }
    }
    Ok(DMatrix::from_fn(mi, mj, |l1, l2| {
        let v = orth[(l1, l2)] - orth[(l1 + 1, l2)] - orth[(l1, l2 + 1)] + orth[(l1 + 1, l2 + 1)];
        v.max(0.0)
    }))
}

impl MomentTables {
    pub fn new(net: &NetworkModel, quantizers: &[QuantizerSpec]) -> Result<Self> {
        check_quantizers(net, quantizers)?;
        let c = net.prior.cov.matrix();
        let k = net.k();
        let std: Vec<(Vec<f64>, f64)> = net
            .sensors
            .iter()
            .zip(quantizers)
            .map(|(s, q)| standardized_boundaries(s, q, net))
            .collect();
        let sensors = net
            .sensors
            .iter()
            .zip(quantizers)
            .zip(&std)
            .map(|((s, q), (z, sd))| {
                let ca = c * &s.a / *sd;
                let i1 = z
                    .windows(2)
                    .map(|w| &ca * (gaussian_pdf(w[0]) - gaussian_pdf(w[1])))
                    .collect();
                let i2 = z.windows(2).map(|w| gaussian_interval(w[0], w[1])).collect();
                SensorTable {
                    i1,
                    i2,
                    levels: q.levels().to_vec(),
                }
            })
            .collect();
        let index: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
        let pairs = index
            .par_iter()
            .map(|&(i, j)| {
                let (si, sj) = (&net.sensors[i], &net.sensors[j]);
                let rho = si.a.dot(&(c * &sj.a)) / (std[i].1 * std[j].1);
                joint_cells(&std[i].0, &std[j].0, rho)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sensors,
            pairs,
            k,
            prior_mean: net.prior.mean.clone(),
            prior_cov: c.clone(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn check_cell(&self, k: usize, l: usize) -> Result<()> {
        if k >= self.k {
            return Err(Error::IndexOutOfRange { index: k, len: self.k });
        }
        let m = self.sensors[k].i2.len();
        if l >= m {
            return Err(Error::IndexOutOfRange { index: l, len: m });
        }
        Ok(())
    }

    pub fn i1(&self, k: usize, l: usize) -> Result<&DVector<f64>> {
        self.check_cell(k, l)?;
        Ok(&self.sensors[k].i1[l])
    }

    pub fn i2(&self, k: usize, l: usize) -> Result<f64> {
        self.check_cell(k, l)?;
        Ok(self.sensors[k].i2[l])
    }

    /// Joint cell mass. For `i == j` this is `I²` on the diagonal and 0 off it.
    pub fn i3(&self, i: usize, j: usize, l1: usize, l2: usize) -> Result<f64> {
        self.check_cell(i, l1)?;
        self.check_cell(j, l2)?;
        Ok(match i.cmp(&j) {
            std::cmp::Ordering::Equal => {
                if l1 == l2 {
                    self.sensors[i].i2[l1]
                } else {
                    0.0
                }
            }
            std::cmp::Ordering::Less => self.pairs[pair_index(self.k, i, j)][(l1, l2)],
            std::cmp::Ordering::Greater => self.pairs[pair_index(self.k, j, i)][(l2, l1)],
        })
    }

    fn check_alphas(&self, alphas: &[&DMatrix<f64>]) -> Result<()> {
        if alphas.len() != self.k {
            return Err(Error::Dimension(format!(
                "{} transition matrices for {} sensors",
                alphas.len(),
                self.k
            )));
        }
        for (k, (a, s)) in alphas.iter().zip(&self.sensors).enumerate() {
            let m = s.levels.len();
            if a.nrows() != m || a.ncols() != m {
                return Err(Error::Dimension(format!(
                    "sensor {k}: transition matrix {}x{}, quantizer has {m} levels",
                    a.nrows(),
                    a.ncols()
                )));
            }
        }
        Ok(())
    }

    /// Moments of `m̂` for the given channel states, `alphas[k][(t, l)]`
    /// being `P(receive t | send l)`.
    pub fn moments(&self, alphas: &[&DMatrix<f64>]) -> Result<MomentSet> {
        self.check_alphas(alphas)?;
        let k = self.k;
        let q = self.prior_mean.len();
        let states: Vec<SensorState> = alphas
            .iter()
            .enumerate()
            .map(|(idx, a)| self.sensor_state(idx, a))
            .collect();
        let mut mean = DVector::zeros(k);
        let mut centred = DMatrix::zeros(q, k);
        let mut second = DMatrix::zeros(k, k);
        for (idx, st) in states.iter().enumerate() {
            mean[idx] = st.mean;
            second[(idx, idx)] = st.second;
            centred.set_column(idx, &st.centred);
        }
        let v: Vec<&DVector<f64>> = states.iter().map(|s| &s.v).collect();
        for i in 0..k {
            for j in i + 1..k {
                let e = v[i].dot(&(&self.pairs[pair_index(k, i, j)] * v[j]));
                second[(i, j)] = e;
                second[(j, i)] = e;
            }
        }
        let cov = &second - &mean * mean.transpose();
        let cov = (&cov + cov.transpose()) * 0.5;
        let cross = &centred + &self.prior_mean * mean.transpose();
        Ok(MomentSet {
            cross,
            mean,
            second,
            cov,
        })
    }

    // v[l] = E{m̂ | m = m_l}; everything one sensor contributes to the moments.
    fn sensor_state(&self, idx: usize, alpha: &DMatrix<f64>) -> SensorState {
        let s = &self.sensors[idx];
        let m = DVector::from_column_slice(&s.levels);
        let v = alpha.tr_mul(&m);
        let w = alpha.tr_mul(&m.map(|x| x * x));
        let i2 = DVector::from_column_slice(&s.i2);
        let mut centred = DVector::zeros(self.prior_mean.len());
        for (vl, i1) in v.iter().zip(&s.i1) {
            centred += i1 * *vl;
        }
        SensorState {
            mean: v.dot(&i2),
            second: w.dot(&i2),
            v,
            centred,
        }
    }

    /// LMMSE estimator for the given channel states.
    pub fn estimator(&self, alphas: &[&DMatrix<f64>]) -> Result<LmmseEstimator> {
        let moments = self.moments(alphas)?;
        let x = &moments.cross - &self.prior_mean * moments.mean.transpose();
        let (cov_inv, pseudo_inverse) = invert_moment_cov(&moments.cov)?;
        let gain = &x * cov_inv;
        let d = &self.prior_cov - &gain * x.transpose();
        let d = (&d + d.transpose()) * 0.5;
        Ok(LmmseEstimator {
            prior_mean: self.prior_mean.clone(),
            mean_m: moments.mean,
            gain,
            d,
            pseudo_inverse,
        })
    }

    /// MSE matrix `D = C_θ − E{θm̆ᵀ}E{m̆m̆ᵀ}⁻¹E{θm̆ᵀ}ᵀ` and the pseudo-inverse flag.
    pub fn mse(&self, alphas: &[&DMatrix<f64>]) -> Result<(DMatrix<f64>, bool)> {
        let e = self.estimator(alphas)?;
        Ok((e.d, e.pseudo_inverse))
    }

    /// `D` with every channel error-free.
    pub fn mse_ideal(&self) -> Result<DMatrix<f64>> {
        let eye: Vec<DMatrix<f64>> = self
            .sensors
            .iter()
            .map(|s| DMatrix::identity(s.levels.len(), s.levels.len()))
            .collect();
        let refs: Vec<&DMatrix<f64>> = eye.iter().collect();
        Ok(self.mse(&refs)?.0)
    }
}

fn invert_moment_cov(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let eig = cov.clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if max > 0.0 && min > SINGULAR_RCOND * max {
        if let Some(ch) = cov.clone().cholesky() {
            return Ok((ch.inverse(), false));
        }
    }
    let tol = SINGULAR_RCOND * max.max(f64::MIN_POSITIVE);
    let pinv = cov
        .clone()
        .pseudo_inverse(tol)
        .map_err(|e| Error::Solver(format!("pseudo-inverse failed: {e}")))?;
    Ok((pinv, true))
}

/// Affine LMMSE fusion rule `θ̂ = μ + K(m̂ − E{m̂})`.
#[derive(Debug, Clone)]
pub struct LmmseEstimator {
    prior_mean: DVector<f64>,
    mean_m: DVector<f64>,
    gain: DMatrix<f64>,
    d: DMatrix<f64>,
    pseudo_inverse: bool,
}

impl LmmseEstimator {
    pub fn estimate(&self, recovered_levels: &[f64]) -> Result<DVector<f64>> {
        if recovered_levels.len() != self.mean_m.len() {
            return Err(Error::Dimension(format!(
                "{} recovered levels for {} sensors",
                recovered_levels.len(),
                self.mean_m.len()
            )));
        }
        let m = DVector::from_column_slice(recovered_levels);
        Ok(&self.prior_mean + &self.gain * (m - &self.mean_m))
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn expected_levels(&self) -> &DVector<f64> {
        &self.mean_m
    }

    pub fn mse(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// True when `E{m̆m̆ᵀ}` was singular and a pseudo-inverse was used.
    pub fn pseudo_inverse(&self) -> bool {
        self.pseudo_inverse
    }
}

/// Closed-form integrals for one sensor pair and cell pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CellIntegrals {
    /// `I¹` of sensor `i`, cell `l1`.
    pub i1: DVector<f64>,
    /// `I²` of sensor `i`, cell `l1`.
    pub i2: f64,
    /// Joint mass of cells `(l1, l2)` for sensors `(i, j)`.
    pub i3: f64,
}

/// The three integrals for a single index combination. Builds the full
/// tables, so prefer [`MomentTables`] when many entries are needed.
pub fn closed_form_integrals(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    i: usize,
    j: usize,
    l1: usize,
    l2: usize,
) -> Result<CellIntegrals> {
    let t = MomentTables::new(net, quantizers)?;
    Ok(CellIntegrals {
        i1: t.i1(i, l1)?.clone(),
        i2: t.i2(i, l1)?,
        i3: t.i3(i, j, l1, l2)?,
    })
}

/// LMMSE MSE with its two baselines.
#[derive(Debug, Clone)]
pub struct MseReport {
    pub d: SpdMatrix,
    /// Centralized LMMSE on the unquantized observations.
    pub d0: SpdMatrix,
    /// Quantized observations over error-free channels.
    pub d_ideal: SpdMatrix,
    /// A pseudo-inverse replaced a singular `E{m̆m̆ᵀ}`.
    pub pseudo_inverse: bool,
}

impl MseReport {
    pub fn trace(&self) -> f64 {
        self.d.trace()
    }
}

fn alpha_refs(alphas: &[TransitionMatrix]) -> Vec<&DMatrix<f64>> {
    alphas.iter().map(TransitionMatrix::matrix).collect()
}

/// LMMSE estimate of `θ` from one vector of recovered levels.
pub fn lmmse(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    alphas: &[TransitionMatrix],
    recovered_levels: &[f64],
) -> Result<DVector<f64>> {
    MomentTables::new(net, quantizers)?
        .estimator(&alpha_refs(alphas))?
        .estimate(recovered_levels)
}

/// `D`, `D₀` and `D^ideal` for the given transition matrices.
pub fn lmmse_mse(net: &NetworkModel, quantizers: &[QuantizerSpec], alphas: &[TransitionMatrix]) -> Result<MseReport> {
    let tables = MomentTables::new(net, quantizers)?;
    report_from_tables(net, &tables, &alpha_refs(alphas))
}

/// [`lmmse_mse`] with the transition matrices implied by `powers`.
pub fn mse_at_powers(net: &NetworkModel, quantizers: &[QuantizerSpec], powers: &[f64]) -> Result<MseReport> {
    let alphas = transition_matrices(net, quantizers, powers)?;
    lmmse_mse(net, quantizers, &alphas)
}

pub fn report_from_tables(net: &NetworkModel, tables: &MomentTables, alphas: &[&DMatrix<f64>]) -> Result<MseReport> {
    let (d, pseudo_inverse) = tables.mse(alphas)?;
    Ok(MseReport {
        d: SpdMatrix::new(d)?,
        d0: centralized_mse(net)?,
        d_ideal: SpdMatrix::new(tables.mse_ideal()?)?,
        pseudo_inverse,
    })
}

/// `D₀ = C_θ − C_θA(AᵀC_θA + diag σ_n²)⁻¹AᵀC_θ`.
pub fn centralized_mse(net: &NetworkModel) -> Result<SpdMatrix> {
    let c = net.prior.cov.matrix();
    let a = DMatrix::from_columns(&net.sensors.iter().map(|s| s.a.clone()).collect::<Vec<_>>());
    let ca = c * &a;
    let mut s = a.transpose() * &ca;
    for (k, sensor) in net.sensors.iter().enumerate() {
        s[(k, k)] += sensor.sigma_n * sensor.sigma_n;
    }
    let s = SpdMatrix::new(s)?;
    let mut d = c.clone();
    for col in 0..ca.nrows() {
        let row = ca.row(col).transpose();
        let sol = s.solve(&row);
        for r in 0..ca.nrows() {
            d[(r, col)] -= ca.row(r).transpose().dot(&sol);
        }
    }
    SpdMatrix::new((&d + d.transpose()) * 0.5)
}

/// Nodes used for envelope averages (rounded up to whole panels of 8).
pub const FADING_NODES: usize = 200;

/// Largest channel-state product [`faded_mse`] will enumerate.
pub const MAX_FADING_STATES: usize = 4_000_000;

/// Rayleigh envelope average over `u = |h|²/E{|h|²} ~ Exp(1)`, see
/// [`rayleigh_power_rule`].
#[derive(Debug, Clone)]
pub struct FadingRule {
    u: Vec<f64>,
    w: Vec<f64>,
}

impl FadingRule {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::Domain("fading rule needs at least one node".into()));
        }
        let (u, w) = rayleigh_power_rule(nodes);
        Ok(Self { u, w })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.u
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// `sensor` with its envelope scaled to `|h|² = u·E{|h|²}`. Sensors whose
/// receiver already averages over `h` are returned unchanged.
pub fn faded_sensor(sensor: &SensorSpec, u: f64) -> SensorSpec {
    let mut s = sensor.clone();
    s.channel = match sensor.channel {
        Channel::Coherent { h_abs } => Channel::Coherent { h_abs: h_abs * u.sqrt() },
        Channel::NoncoherentEnvelope { h_abs } => Channel::NoncoherentEnvelope { h_abs: h_abs * u.sqrt() },
        c @ Channel::NoncoherentStats { .. } => c,
    };
    s
}

/// `(weight, transition matrix)` pairs describing one sensor's channel
/// under Rayleigh fading.
pub fn faded_alphas(
    sensor: &SensorSpec,
    spec: &QuantizerSpec,
    p: f64,
    rule: &FadingRule,
) -> Result<Vec<(f64, TransitionMatrix)>> {
    if sensor.receiver() == Receiver::Stats {
        return Ok(vec![(1.0, transition_matrix(&bit_error(sensor, p)?, spec)?)]);
    }
    rule.nodes()
        .iter()
        .zip(rule.weights())
        .map(|(&u, &w)| Ok((w, transition_matrix(&bit_error(&faded_sensor(sensor, u), p)?, spec)?)))
        .collect()
}

/// `E_h{D}` over independent Rayleigh envelopes with the configured
/// `E{|h_k|²}`. The statistics receiver has no envelope to average.
///
/// Enumerates the product of per-sensor nodes. Each state costs one small
/// Cholesky of the `K × K` moment covariance; states where that is
/// ill-conditioned go through [`MomentTables::mse`] and its pseudo-inverse.
/// Chunks are summed in a fixed order, so the result does not depend on the
/// thread count.
pub fn faded_mse(
    tables: &MomentTables,
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    powers: &[f64],
    rule: &FadingRule,
) -> Result<DMatrix<f64>> {
    const CHUNK: usize = 4096;
    check_powers(net, powers)?;
    check_quantizers(net, quantizers)?;
    let alphas: Vec<Vec<(f64, TransitionMatrix)>> = net
        .sensors
        .iter()
        .zip(quantizers)
        .zip(powers)
        .map(|((s, q), &p)| faded_alphas(s, q, p, rule))
        .collect::<Result<_>>()?;
    let total = alphas
        .iter()
        .try_fold(1usize, |acc, s| acc.checked_mul(s.len()))
        .filter(|n| *n <= MAX_FADING_STATES)
        .ok_or_else(|| {
            Error::Unsupported(format!(
                "fading average over {} sensors with {} nodes exceeds {MAX_FADING_STATES} states",
                net.k(),
                rule.len()
            ))
        })?;
    let k = net.k();
    let q = net.q();
    let states: Vec<Vec<SensorState>> = alphas
        .iter()
        .enumerate()
        .map(|(idx, nodes)| nodes.iter().map(|(_, a)| tables.sensor_state(idx, a.matrix())).collect())
        .collect();
    // P_ij·v_j for every node of sensor j, so a pair term is one dot product.
    let projected: Vec<Vec<DVector<f64>>> = (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .map(|(i, j)| {
            let p = &tables.pairs[pair_index(k, i, j)];
            states[j].iter().map(|st| p * &st.v).collect()
        })
        .collect();

    let chunk_sum = |c: usize| -> Result<DMatrix<f64>> {
        let mut reduction = DMatrix::zeros(q, q);
        let mut weight_sum = 0.0;
        let mut node = vec![0usize; k];
        let mut cov = vec![0.0; k * k];
        let mut y = vec![0.0; q * k];
        for idx in c * CHUNK..((c + 1) * CHUNK).min(total) {
            let mut rest = idx;
            let mut weight = 1.0;
            for (s, n) in alphas.iter().zip(node.iter_mut()) {
                *n = rest % s.len();
                rest /= s.len();
                weight *= s[*n].0;
            }
            if weight == 0.0 {
                continue;
            }
            weight_sum += weight;
            let st = |i: usize| &states[i][node[i]];
            for i in 0..k {
                cov[i * k + i] = st(i).second - st(i).mean * st(i).mean;
                for j in i + 1..k {
                    let e = st(i).v.dot(&projected[pair_index(k, i, j)][node[j]]) - st(i).mean * st(j).mean;
                    cov[i * k + j] = e;
                    cov[j * k + i] = e;
                }
            }
            if cholesky_in_place(&mut cov, k) {
                // Rows of Y = X L⁻ᵀ, so X cov⁻¹ Xᵀ = Y Yᵀ.
                for r in 0..q {
                    for i in 0..k {
                        let mut acc = st(i).centred[r];
                        for j in 0..i {
                            acc -= cov[i * k + j] * y[r * k + j];
                        }
                        y[r * k + i] = acc / cov[i * k + i];
                    }
                }
                for r in 0..q {
                    for c2 in r..q {
                        let e: f64 = (0..k).map(|i| y[r * k + i] * y[c2 * k + i]).sum();
                        reduction[(r, c2)] += weight * e;
                    }
                }
            } else {
                let refs: Vec<&DMatrix<f64>> = (0..k).map(|i| alphas[i][node[i]].1.matrix()).collect();
                let (d, _) = tables.mse(&refs)?;
                let r = &tables.prior_cov - d;
                for row in 0..q {
                    for col in row..q {
                        reduction[(row, col)] += weight * r[(row, col)];
                    }
                }
            }
        }
        for row in 0..q {
            for col in 0..row {
                reduction[(row, col)] = reduction[(col, row)];
            }
        }
        Ok(&tables.prior_cov * weight_sum - reduction)
    };
    let chunks: Vec<DMatrix<f64>> = (0..total.div_ceil(CHUNK))
        .into_par_iter()
        .map(chunk_sum)
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().fold(DMatrix::zeros(q, q), |a, b| a + b))
}

// Lower Cholesky factor of a row-major `n × n` matrix, written over its lower
// triangle. Fails on pivots below the singular threshold relative to the
// largest diagonal entry, matching the tolerance of the eigenvalue path.
fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    let scale = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return false;
    }
    for j in 0..n {
        let mut d = a[j * n + j];
        for p in 0..j {
            d -= a[j * n + p] * a[j * n + p];
        }
        if !(d > 1e3 * SINGULAR_RCOND * scale) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut e = a[i * n + j];
            for p in 0..j {
                e -= a[i * n + p] * a[j * n + p];
            }
            a[i * n + j] = e / d;
        }
    }
    true
}

/// Per-sensor terms of the quasi-BLUE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuasiBlueTerm {
    /// Coherent bit-error probability.
    pub eps: f64,
    /// `χ = 4τ²(M + 1)/(3(M − 1))`.
    pub chi: f64,
    /// Quantizer step `Δ`.
    pub step: f64,
}

impl QuasiBlueTerm {
    /// Variance bound of `m̂/(1 − 2ε)`, the weight denominator of `D_QBLUE`.
    pub fn normalized_variance(&self, sigma_n: f64) -> f64 {
        let e = self.eps;
        self.chi * e / ((1.0 - 2.0 * e) * (1.0 - 2.0 * e)) + sigma_n * sigma_n + self.step * self.step / 12.0
    }
}

/// Quasi-BLUE terms, checking the coherent/uniform preconditions.
pub fn quasi_blue_terms(net: &NetworkModel, quantizers: &[QuantizerSpec], powers: &[f64]) -> Result<Vec<QuasiBlueTerm>> {
    check_powers(net, powers)?;
    check_quantizers(net, quantizers)?;
    net.sensors
        .iter()
        .zip(quantizers)
        .zip(powers)
        .enumerate()
        .map(|(k, ((s, q), &p))| {
            if s.receiver() != Receiver::Coherent {
                return Err(Error::Unsupported(format!(
                    "quasi-BLUE needs a coherent receiver, sensor {k} is {}",
                    s.receiver().name()
                )));
            }
            let step = match (q.kind(), q.step()) {
                (QuantizerKind::Uniform, Some(step)) => step,
                _ => {
                    return Err(Error::Unsupported(format!(
                        "quasi-BLUE needs a uniform quantizer, sensor {k} uses {}",
                        q.kind().name()
                    )))
                }
            };
            let eps = bit_error(s, p)?.eps1();
            if !(eps < 0.5) {
                return Err(Error::Divergence(format!("sensor {k} has bit-error probability {eps}")));
            }
            let m = q.len() as f64;
            let tau = step * (m - 1.0) / 2.0;
            Ok(QuasiBlueTerm {
                eps,
                chi: 4.0 * tau * tau * (m + 1.0) / (3.0 * (m - 1.0)),
                step,
            })
        })
        .collect()
}

fn qblue_information(net: &NetworkModel, terms: &[QuasiBlueTerm]) -> Result<SpdMatrix> {
    let q = net.q();
    let mut info = DMatrix::zeros(q, q);
    for (s, t) in net.sensors.iter().zip(terms) {
        info += &s.a * s.a.transpose() / t.normalized_variance(s.sigma_n);
    }
    SpdMatrix::new(info).map_err(|_| {
        Error::NotSpd("quasi-BLUE information is singular: the gain vectors do not span the parameter space".into())
    })
}

/// `D_QBLUE = (Σ_k a_ka_kᵀ/(χ_kε_k/(1 − 2ε_k)² + σ_nk² + Δ_k²/12))⁻¹`.
pub fn quasi_blue_mse(net: &NetworkModel, quantizers: &[QuantizerSpec], powers: &[f64]) -> Result<SpdMatrix> {
    let terms = quasi_blue_terms(net, quantizers, powers)?;
    SpdMatrix::new(qblue_information(net, &terms)?.inverse())
}

/// Quasi-BLUE estimate of a deterministic `θ` from the recovered levels.
pub fn quasi_blue(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    powers: &[f64],
    recovered_levels: &[f64],
) -> Result<DVector<f64>> {
    if recovered_levels.len() != net.k() {
        return Err(Error::Dimension(format!(
            "{} recovered levels for {} sensors",
            recovered_levels.len(),
            net.k()
        )));
    }
    let terms = quasi_blue_terms(net, quantizers, powers)?;
    let info = qblue_information(net, &terms)?;
    let mut rhs = DVector::zeros(net.q());
    for ((s, t), m) in net.sensors.iter().zip(&terms).zip(recovered_levels) {
        // m̂/(1 − 2ε) weighted by the normalized variance bound
        rhs += &s.a * (m / ((1.0 - 2.0 * t.eps) * t.normalized_variance(s.sigma_n)));
    }
    Ok(info.solve(&rhs))
}
