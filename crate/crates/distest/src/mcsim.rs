//! Monte-Carlo oracle for the whole chain: source draw, noisy observation,
//! quantization, binary transmission and LMMSE fusion.
//!
//! Trial `i` owns ChaCha8 streams `i·(K + 1) + slot` of the run seed. Slot 0
//! drives the source and observation noise; slot `k + 1` drives sensor `k`'s
//! channel, one symbol after another. Trials are summed in fixed-size chunks
//! combined in order, so a report depends only on the seed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::channel::{bit_error, check_powers, decision_threshold, transition_matrix};
use crate::error::{Error, Result};
use crate::estimator::{LmmseEstimator, MomentSet, MomentTables};
use crate::fim::check_quantizers;
use crate::model::{Channel, NetworkModel};
use crate::quantizer::QuantizerSpec;

const CHUNK: u64 = 4096;

/// How bits cross the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fidelity {
    /// Each bit flips independently with the analytical ε₁ (0→1) or ε₂ (1→0).
    FlipLevel,
    /// Modulated symbols in complex Gaussian noise, detected by the receiver's
    /// threshold rule.
    PhysicalLayer,
}

/// One pass through the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub theta: DVector<f64>,
    /// Observations `x_k = a_kᵀθ + n_k`.
    pub x: DVector<f64>,
    /// Sent level indices.
    pub sent: Vec<usize>,
    /// Level indices decoded at the fusion center.
    pub recovered: Vec<usize>,
    pub estimate: DVector<f64>,
}

/// Empirical flip counts of one bit position (MSB first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BitCounts {
    pub zeros: u64,
    pub ones: u64,
    pub zero_to_one: u64,
    pub one_to_zero: u64,
}

impl BitCounts {
    pub fn one_rate(&self) -> f64 {
        self.ones as f64 / (self.zeros + self.ones) as f64
    }

    /// Empirical ε₁.
    pub fn eps1(&self) -> f64 {
        self.zero_to_one as f64 / self.zeros as f64
    }

    /// Empirical ε₂.
    pub fn eps2(&self) -> f64 {
        self.one_to_zero as f64 / self.ones as f64
    }
}

/// Sample statistics of a run. Standard errors are sample standard
/// deviations over `√N`; they are NaN when `N = 1` or a quantity was never
/// observed.
#[derive(Debug, Clone)]
pub struct EmpiricalReport {
    pub trials: usize,
    pub fidelity: Fidelity,
    /// Per sensor, `α̂[t][l]` = share of sent level `l` decoded as `t`.
    pub transitions: Vec<DMatrix<f64>>,
    pub transition_se: Vec<DMatrix<f64>>,
    /// Per sensor, how often each level was sent.
    pub sent_counts: Vec<Vec<u64>>,
    /// Per sensor and bit position.
    pub bits: Vec<Vec<BitCounts>>,
    pub moments: MomentSet,
    pub moments_se: MomentSet,
    /// `E{(θ̂ − θ)(θ̂ − θ)ᵀ}` of the LMMSE estimator.
    pub mse: DMatrix<f64>,
    pub mse_se: DMatrix<f64>,
    pub tr_mse: f64,
    pub tr_mse_se: f64,
    /// The fusion rule needed the pseudo-inverse.
    pub pseudo_inverse: bool,
}

impl EmpiricalReport {
    /// `(tr(MSE) − analytical)/se`.
    pub fn z_score(&self, analytical: f64) -> f64 {
        (self.tr_mse - analytical) / self.tr_mse_se
    }
}

#[derive(Debug, Clone, Copy)]
enum Link {
    Flip { eps1: f64, eps2: f64 },
    /// BPSK amplitude `|h|√(P/L)` after phase correction.
    Coherent { amp: f64, sigma_w: f64 },
    /// OOK received amplitude `|h|√(2P/L)`, threshold on `|y|/σ_w`.
    Envelope { amp: f64, sigma_w: f64, zeta: f64 },
    /// OOK amplitude `√(2P/L)` through `h ~ CN(0, 2σ_h²)` held for the whole
    /// message, threshold on `|y|²`.
    Stats { amp: f64, sigma_h: f64, sigma_w: f64, zeta: f64 },
}

impl Link {
    fn new(sensor: &crate::model::SensorSpec, p: f64, fidelity: Fidelity) -> Result<Self> {
        if fidelity == Fidelity::FlipLevel {
            let e = bit_error(sensor, p)?;
            return Ok(Link::Flip {
                eps1: e.eps1(),
                eps2: e.eps2(),
            });
        }
        let l = sensor.bits as f64;
        let sigma_w = sensor.sigma_w;
        Ok(match sensor.channel {
            Channel::Coherent { h_abs } => Link::Coherent {
                amp: h_abs * (p / l).sqrt(),
                sigma_w,
            },
            Channel::NoncoherentEnvelope { h_abs } => Link::Envelope {
                amp: h_abs * (2.0 * p / l).sqrt(),
                sigma_w,
                zeta: decision_threshold(sensor, p)?,
            },
            Channel::NoncoherentStats { sigma_h } => Link::Stats {
                amp: (2.0 * p / l).sqrt(),
                sigma_h,
                sigma_w,
                zeta: decision_threshold(sensor, p)?,
            },
        })
    }

    /// Decoded code word for `sent`, `bits` wide.
    fn transmit(&self, sent: usize, bits: u32, rng: &mut ChaCha8Rng) -> usize {
        let cn = |rng: &mut ChaCha8Rng, s: f64| -> (f64, f64) {
            (s * rng.sample::<f64, _>(StandardNormal), s * rng.sample::<f64, _>(StandardNormal))
        };
        // One gain per message for the statistics receiver.
        let h = match *self {
            Link::Stats { sigma_h, .. } => cn(rng, sigma_h),
            _ => (0.0, 0.0),
        };
        let mut out = 0;
        for i in (0..bits).rev() {
            let b = (sent >> i) & 1 == 1;
            let decided = match *self {
                Link::Flip { eps1, eps2 } => {
                    let u: f64 = rng.random();
                    if b {
                        u >= eps2
                    } else {
                        u < eps1
                    }
                }
                Link::Coherent { amp, sigma_w } => {
                    // only the in-phase noise survives coherent detection
                    let s = if b { amp } else { -amp };
                    s + sigma_w * rng.sample::<f64, _>(StandardNormal) > 0.0
                }
                Link::Envelope { amp, sigma_w, zeta } => {
                    let phase = std::f64::consts::TAU * rng.random::<f64>();
                    let (wr, wi) = cn(rng, sigma_w);
                    let a = if b { amp } else { 0.0 };
                    let (yr, yi) = (a * phase.cos() + wr, a * phase.sin() + wi);
                    yr.hypot(yi) / sigma_w > zeta
                }
                Link::Stats {
                    amp, sigma_w, zeta, ..
                } => {
                    let (wr, wi) = cn(rng, sigma_w);
                    let a = if b { amp } else { 0.0 };
                    let (yr, yi) = (a * h.0 + wr, a * h.1 + wi);
                    yr * yr + yi * yi > zeta
                }
            };
            out = (out << 1) | decided as usize;
        }
        out
    }
}

/// A network, its quantizers and powers, ready to run trials.
#[derive(Debug, Clone)]
pub struct Simulator {
    net: NetworkModel,
    quantizers: Vec<QuantizerSpec>,
    links: Vec<Link>,
    estimator: LmmseEstimator,
    chol: DMatrix<f64>,
    fidelity: Fidelity,
    base: ChaCha8Rng,
    shared_channel_noise: bool,
}

impl Simulator {
    /// The fusion center runs the LMMSE estimator built from the analytical
    /// transition matrices at `powers`.
    pub fn new(
        net: &NetworkModel,
        quantizers: &[QuantizerSpec],
        powers: &[f64],
        fidelity: Fidelity,
        seed: u64,
    ) -> Result<Self> {
        check_powers(net, powers)?;
        check_quantizers(net, quantizers)?;
        let links = net
            .sensors
            .iter()
            .zip(powers)
            .map(|(s, &p)| Link::new(s, p, fidelity))
            .collect::<Result<Vec<_>>>()?;
        let alphas = net
            .sensors
            .iter()
            .zip(quantizers)
            .zip(powers)
            .map(|((s, q), &p)| transition_matrix(&bit_error(s, p)?, q))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&DMatrix<f64>> = alphas.iter().map(|a| a.matrix()).collect();
        let estimator = MomentTables::new(net, quantizers)?.estimator(&refs)?;
        Ok(Self {
            net: net.clone(),
            quantizers: quantizers.to_vec(),
            links,
            estimator,
            chol: net.prior.cov.cholesky_l(),
            fidelity,
            base: ChaCha8Rng::seed_from_u64(seed),
            shared_channel_noise: false,
        })
    }

    /// Drives every sensor's channel from sensor 0's stream. This breaks the
    /// conditional independence of the decoded levels and exists to check
    /// that the independence test can see it.
    pub fn with_shared_channel_noise(mut self) -> Self {
        self.shared_channel_noise = true;
        self
    }

    fn stream(&self, index: u64, slot: u64) -> ChaCha8Rng {
        let mut rng = self.base.clone();
        rng.set_stream(index * (self.net.k() as u64 + 1) + slot);
        rng
    }

    pub fn trial(&self, index: u64) -> TrialRecord {
        self.run_trial(index, None)
    }

    /// Trial `index` with the source pinned at `theta`.
    pub fn trial_at(&self, index: u64, theta: &DVector<f64>) -> TrialRecord {
        self.run_trial(index, Some(theta))
    }

    fn run_trial(&self, index: u64, pinned: Option<&DVector<f64>>) -> TrialRecord {
        let mut src = self.stream(index, 0);
        let q = self.net.q();
        let theta = match pinned {
            Some(t) => t.clone(),
            None => {
                let z = DVector::from_fn(q, |_, _| src.sample::<f64, _>(StandardNormal));
                &self.net.prior.mean + &self.chol * z
            }
        };
        let k = self.net.k();
        let mut x = DVector::zeros(k);
        let mut sent = Vec::with_capacity(k);
        let mut recovered = Vec::with_capacity(k);
        let mut shared = self.shared_channel_noise.then(|| self.stream(index, 1));
        for (i, ((s, qz), link)) in self.net.sensors.iter().zip(&self.quantizers).zip(&self.links).enumerate() {
            x[i] = s.a.dot(&theta) + s.sigma_n * src.sample::<f64, _>(StandardNormal);
            let l = qz.quantize(x[i]);
            let t = match shared.as_mut() {
                Some(rng) => {
                    // every sensor replays the same draws
                    let mut r = rng.clone();
                    link.transmit(l, s.bits, &mut r)
                }
                None => link.transmit(l, s.bits, &mut self.stream(index, i as u64 + 1)),
            };
            sent.push(l);
            recovered.push(t);
        }
        let values: Vec<f64> = recovered
            .iter()
            .zip(&self.quantizers)
            .map(|(&t, qz)| qz.levels()[t])
            .collect();
        let estimate = self.estimator.estimate(&values).expect("one level per sensor");
        TrialRecord {
            theta,
            x,
            sent,
            recovered,
            estimate,
        }
    }

    fn level_values(&self, rec: &TrialRecord) -> DVector<f64> {
        DVector::from_iterator(
            rec.recovered.len(),
            rec.recovered.iter().zip(&self.quantizers).map(|(&t, qz)| qz.levels()[t]),
        )
    }

    /// Runs trials `0..n` and summarizes them.
    pub fn run(&self, n: usize) -> Result<EmpiricalReport> {
        if n == 0 {
            return Err(Error::Domain("Monte-Carlo run needs at least one trial".into()));
        }
        let n64 = n as u64;
        let chunks: Vec<u64> = (0..n64.div_ceil(CHUNK)).collect();
        let first = chunks
            .par_iter()
            .map(|&c| {
                let mut acc = RawSums::new(self);
                for i in c * CHUNK..((c + 1) * CHUNK).min(n64) {
                    acc.add(self, &self.trial(i));
                }
                acc
            })
            .collect::<Vec<_>>()
            .into_iter()
            .reduce(|a, b| a.merge(b))
            .expect("at least one chunk");
        let nf = n as f64;
        let mean = &first.m1 / nf;
        // Second pass for the centred covariance, replaying the same trials.
        let (cov_sum, cov_sq) = chunks
            .par_iter()
            .map(|&c| {
                let k = self.net.k();
                let mut s = DMatrix::zeros(k, k);
                let mut sq = DMatrix::zeros(k, k);
                for i in c * CHUNK..((c + 1) * CHUNK).min(n64) {
                    let d = self.level_values(&self.trial(i)) - &mean;
                    let outer = &d * d.transpose();
                    sq += outer.map(|v| v * v);
                    s += outer;
                }
                (s, sq)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .reduce(|a, b| (a.0 + b.0, a.1 + b.1))
            .expect("at least one chunk");
        Ok(first.finish(self, n, cov_sum, cov_sq))
    }
}

/// Sample mean and its standard error from a sum and a sum of squares.
fn mean_se(sum: f64, sum_sq: f64, n: f64) -> (f64, f64) {
    let m = sum / n;
    if n < 2.0 {
        return (m, f64::NAN);
    }
    let var = ((sum_sq - n * m * m) / (n - 1.0)).max(0.0);
    (m, (var / n).sqrt())
}

fn mean_se_matrix(sum: &DMatrix<f64>, sum_sq: &DMatrix<f64>, n: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut m = DMatrix::zeros(sum.nrows(), sum.ncols());
    let mut se = m.clone();
    for i in 0..sum.nrows() {
        for j in 0..sum.ncols() {
            (m[(i, j)], se[(i, j)]) = mean_se(sum[(i, j)], sum_sq[(i, j)], n);
        }
    }
    (m, se)
}

struct RawSums {
    /// `counts[k][t·M + l]`
    counts: Vec<Vec<u64>>,
    bits: Vec<Vec<BitCounts>>,
    m1: DVector<f64>,
    m1_sq: DVector<f64>,
    m2: DMatrix<f64>,
    m2_sq: DMatrix<f64>,
    cross: DMatrix<f64>,
    cross_sq: DMatrix<f64>,
    err: DMatrix<f64>,
    err_sq: DMatrix<f64>,
    tr: f64,
    tr_sq: f64,
}

impl RawSums {
    fn new(sim: &Simulator) -> Self {
        let (q, k) = (sim.net.q(), sim.net.k());
        Self {
            counts: sim.quantizers.iter().map(|qz| vec![0; qz.len() * qz.len()]).collect(),
            bits: sim.net.sensors.iter().map(|s| vec![BitCounts::default(); s.bits as usize]).collect(),
            m1: DVector::zeros(k),
            m1_sq: DVector::zeros(k),
            m2: DMatrix::zeros(k, k),
            m2_sq: DMatrix::zeros(k, k),
            cross: DMatrix::zeros(q, k),
            cross_sq: DMatrix::zeros(q, k),
            err: DMatrix::zeros(q, q),
            err_sq: DMatrix::zeros(q, q),
            tr: 0.0,
            tr_sq: 0.0,
        }
    }

    fn add(&mut self, sim: &Simulator, rec: &TrialRecord) {
        for (k, ((&l, &t), qz)) in rec.sent.iter().zip(&rec.recovered).zip(&sim.quantizers).enumerate() {
            self.counts[k][t * qz.len() + l] += 1;
            let width = self.bits[k].len();
            for (pos, c) in self.bits[k].iter_mut().enumerate() {
                let shift = width - 1 - pos;
                let (b, r) = ((l >> shift) & 1, (t >> shift) & 1);
                match (b, r) {
                    (0, 0) => c.zeros += 1,
                    (0, _) => {
                        c.zeros += 1;
                        c.zero_to_one += 1;
                    }
                    (_, 0) => {
                        c.ones += 1;
                        c.one_to_zero += 1;
                    }
                    _ => c.ones += 1,
                }
            }
        }
        let v = sim.level_values(rec);
        self.m1 += &v;
        self.m1_sq += v.map(|x| x * x);
        let outer = &v * v.transpose();
        self.m2_sq += outer.map(|x| x * x);
        self.m2 += outer;
        let cross = &rec.theta * v.transpose();
        self.cross_sq += cross.map(|x| x * x);
        self.cross += cross;
        let e = &rec.estimate - &rec.theta;
        let ee = &e * e.transpose();
        self.err_sq += ee.map(|x| x * x);
        self.err += ee;
        let t = e.norm_squared();
        self.tr += t;
        self.tr_sq += t * t;
    }

    fn merge(mut self, o: Self) -> Self {
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.bits.iter_mut().zip(&o.bits) {
            for (x, y) in a.iter_mut().zip(b) {
                x.zeros += y.zeros;
                x.ones += y.ones;
                x.zero_to_one += y.zero_to_one;
                x.one_to_zero += y.one_to_zero;
            }
        }
        self.m1 += o.m1;
        self.m1_sq += o.m1_sq;
        self.m2 += o.m2;
        self.m2_sq += o.m2_sq;
        self.cross += o.cross;
        self.cross_sq += o.cross_sq;
        self.err += o.err;
        self.err_sq += o.err_sq;
        self.tr += o.tr;
        self.tr_sq += o.tr_sq;
        self
    }

    fn finish(self, sim: &Simulator, n: usize, cov_sum: DMatrix<f64>, cov_sq: DMatrix<f64>) -> EmpiricalReport {
        let nf = n as f64;
        let mut transitions = Vec::new();
        let mut transition_se = Vec::new();
        let mut sent_counts = Vec::new();
        for (counts, qz) in self.counts.iter().zip(&sim.quantizers) {
            let m = qz.len();
            let sent: Vec<u64> = (0..m).map(|l| (0..m).map(|t| counts[t * m + l]).sum()).collect();
            let mut a = DMatrix::from_element(m, m, f64::NAN);
            let mut se = a.clone();
            for l in 0..m {
                if sent[l] == 0 {
                    continue;
                }
                let nl = sent[l] as f64;
                for t in 0..m {
                    let c = counts[t * m + l] as f64;
                    (a[(t, l)], se[(t, l)]) = mean_se(c, c, nl);
                }
            }
            transitions.push(a);
            transition_se.push(se);
            sent_counts.push(sent);
        }
        let mean = &self.m1 / nf;
        let mean_err = DVector::from_fn(self.m1.len(), |i, _| mean_se(self.m1[i], self.m1_sq[i], nf).1);
        let (second, second_se) = mean_se_matrix(&self.m2, &self.m2_sq, nf);
        let (cross, cross_se) = mean_se_matrix(&self.cross, &self.cross_sq, nf);
        let (cov, cov_se) = mean_se_matrix(&cov_sum, &cov_sq, nf);
        let (mse, mse_se) = mean_se_matrix(&self.err, &self.err_sq, nf);
        let (tr_mse, tr_mse_se) = mean_se(self.tr, self.tr_sq, nf);
        EmpiricalReport {
            trials: n,
            fidelity: sim.fidelity,
            transitions,
            transition_se,
            sent_counts,
            bits: self.bits,
            moments: MomentSet {
                cross,
                mean,
                second,
                cov,
            },
            moments_se: MomentSet {
                cross: cross_se,
                mean: mean_err,
                second: second_se,
                cov: cov_se,
            },
            mse,
            mse_se,
            tr_mse,
            tr_mse_se,
            pseudo_inverse: sim.estimator.pseudo_inverse(),
        }
    }
}

/// Runs `n` trials with a fresh [`Simulator`].
pub fn simulate(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    powers: &[f64],
    fidelity: Fidelity,
    n: usize,
    seed: u64,
) -> Result<EmpiricalReport> {
    Simulator::new(net, quantizers, powers, fidelity, seed)?.run(n)
}

/// Settings of the conditional-independence check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndependenceOptions {
    /// Bins per whitened source coordinate.
    pub bins_per_dim: usize,
    pub trials_per_bin: usize,
    /// Family-wise level, split over the bins (Bonferroni).
    pub level: f64,
}

impl Default for IndependenceOptions {
    fn default() -> Self {
        Self {
            bins_per_dim: 3,
            trials_per_bin: 100_000,
            level: 1e-4,
        }
    }
}

/// Pearson test of one bin's `M₁ × M₂` table of decoded levels.
#[derive(Debug, Clone, PartialEq)]
pub struct BinTest {
    pub theta: DVector<f64>,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// More than a fifth of the expected counts are below 5, or one is
    /// below 1.
    pub sparse: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndependenceReport {
    pub bins: Vec<BinTest>,
    /// Per-bin rejection threshold `level / bins`.
    pub threshold: f64,
    /// No bin rejects.
    pub pass: bool,
    /// Some bin had too few counts for the chi-square approximation.
    pub inconclusive: bool,
}

/// Checks that two sensors' decoded levels are independent given `θ`.
///
/// `θ` is binned on an equiprobable grid of the whitened prior and each
/// bin is represented by its centre: the bin's trials pin `θ` there. With
/// `θ` spread over a bin the shared dependence on `θ` would itself show up
/// as association.
pub fn empirical_conditional_independence(
    sim: &Simulator,
    options: &IndependenceOptions,
) -> Result<IndependenceReport> {
    if sim.net.k() != 2 {
        return Err(Error::Unsupported(format!(
            "the independence check needs exactly 2 sensors, got {}",
            sim.net.k()
        )));
    }
    if options.bins_per_dim == 0 || options.trials_per_bin == 0 || !(options.level > 0.0 && options.level < 1.0) {
        return Err(Error::Domain("independence check needs bins, trials and a level in (0, 1)".into()));
    }
    let q = sim.net.q();
    let b = options.bins_per_dim;
    let total_bins = b.checked_pow(q as u32).ok_or_else(|| Error::Domain("too many bins".into()))?;
    let std = Normal::standard();
    let centres: Vec<f64> = (0..b).map(|j| std.inverse_cdf((j as f64 + 0.5) / b as f64)).collect();
    let thetas: Vec<DVector<f64>> = (0..total_bins)
        .map(|idx| {
            let mut rest = idx;
            let z = DVector::from_fn(q, |_, _| {
                let c = centres[rest % b];
                rest /= b;
                c
            });
            &sim.net.prior.mean + &sim.chol * z
        })
        .collect();
    let (m1, m2) = (sim.quantizers[0].len(), sim.quantizers[1].len());
    let per = options.trials_per_bin as u64;
    let bins = thetas
        .into_par_iter()
        .enumerate()
        .map(|(bin, theta)| {
            let mut table = vec![0u64; m1 * m2];
            for i in 0..per {
                let rec = sim.trial_at(bin as u64 * per + i, &theta);
                table[rec.recovered[0] * m2 + rec.recovered[1]] += 1;
            }
            let (statistic, dof, sparse) = pearson(&table, m1, m2);
            let p_value = if dof == 0 {
                1.0
            } else {
                ChiSquared::new(dof as f64).map(|d| d.sf(statistic)).unwrap_or(f64::NAN)
            };
            BinTest {
                theta,
                statistic,
                dof,
                p_value,
                sparse,
            }
        })
        .collect::<Vec<_>>();
    let threshold = options.level / total_bins as f64;
    Ok(IndependenceReport {
        pass: bins.iter().all(|t| t.p_value >= threshold),
        inconclusive: bins.iter().any(|t| t.sparse),
        bins,
        threshold,
    })
}

/// Pearson statistic, degrees of freedom after dropping empty rows and
/// columns, and the sparsity flag.
fn pearson(table: &[u64], rows: usize, cols: usize) -> (f64, usize, bool) {
    let row: Vec<u64> = (0..rows).map(|r| (0..cols).map(|c| table[r * cols + c]).sum()).collect();
    let col: Vec<u64> = (0..cols).map(|c| (0..rows).map(|r| table[r * cols + c]).sum()).collect();
    let n: u64 = row.iter().sum();
    let live_r: Vec<usize> = (0..rows).filter(|&r| row[r] > 0).collect();
    let live_c: Vec<usize> = (0..cols).filter(|&c| col[c] > 0).collect();
    if live_r.len() < 2 || live_c.len() < 2 {
        return (0.0, 0, false);
    }
    let mut stat = 0.0;
    let (mut small, mut tiny) = (0usize, false);
    for &r in &live_r {
        for &c in &live_c {
            let e = row[r] as f64 * col[c] as f64 / n as f64;
            let d = table[r * cols + c] as f64 - e;
            stat += d * d / e;
            small += (e < 5.0) as usize;
            tiny |= e < 1.0;
        }
    }
    let cells = live_r.len() * live_c.len();
    (stat, (live_r.len() - 1) * (live_c.len() - 1), tiny || 5 * small > cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::transition_matrices;
    use crate::estimator::mse_at_powers;
    use crate::model::scenarios::{reference_pair, reference_prior};
    use crate::model::{Receiver, SensorSpec};
    use crate::numerics::gaussian_q;
    use crate::quantizer::{design_all, QuantizerKind};

    fn uniform(net: &NetworkModel) -> Vec<QuantizerSpec> {
        design_all(QuantizerKind::Uniform, net).unwrap()
    }

    /// Two coherent 2-bit sensors with independent gain directions.
    fn two_bit_pair() -> NetworkModel {
        let s = |a: [f64; 2]| {
            SensorSpec::new(DVector::from_column_slice(&a), 1.0, 2, Channel::Coherent { h_abs: 0.5 }, 1.0).unwrap()
        };
        NetworkModel::new(reference_prior(), vec![s([0.6, 0.8]), s([0.8, -0.6])], 1.0).unwrap()
    }

    /// Coherent power giving bit-error probability `eps`.
    fn power_for_eps(s: &SensorSpec, eps: f64) -> f64 {
        let x = -Normal::standard().inverse_cdf(eps);
        let Channel::Coherent { h_abs } = s.channel else { panic!() };
        x * x / 2.0 * 2.0 * s.bits as f64 * s.sigma_w * s.sigma_w / (h_abs * h_abs)
    }

    fn assert_within(emp: f64, exact: f64, se: f64, k: f64, what: &str) {
        assert!((emp - exact).abs() <= k * se, "{what}: {emp} vs {exact} (se {se})");
    }

    #[test]
    fn same_seed_same_report_on_any_thread_count() {
        let net = reference_pair(Receiver::Stats, 4.0);
        let qs = uniform(&net);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| simulate(&net, &qs, &net.uniform_powers(), Fidelity::PhysicalLayer, 10_000, 5).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.tr_mse.to_bits(), b.tr_mse.to_bits());
        assert_eq!(a.moments, b.moments);
        assert_eq!(a.sent_counts, b.sent_counts);
        let c = simulate(&net, &qs, &net.uniform_powers(), Fidelity::PhysicalLayer, 10_000, 6).unwrap();
        assert_ne!(a.tr_mse, c.tr_mse);
    }

    #[test]
    fn trials_replay_exactly() {
        let net = reference_pair(Receiver::Envelope, 2.0);
        let qs = uniform(&net);
        let sim = Simulator::new(&net, &qs, &net.uniform_powers(), Fidelity::PhysicalLayer, 9).unwrap();
        assert_eq!(sim.trial(41), sim.trial(41));
        assert_ne!(sim.trial(41).theta, sim.trial(42).theta);
        let rec = sim.trial(3);
        assert_eq!(rec.sent, rec.x.iter().zip(&qs).map(|(&x, q)| q.quantize(x)).collect::<Vec<_>>());
    }

    #[test]
    fn zero_power_coherent_flips_half_the_bits() {
        let net = reference_pair(Receiver::Coherent, 1.0);
        let qs = uniform(&net);
        let rep = simulate(&net, &qs, &[0.0, 0.0], Fidelity::PhysicalLayer, 50_000, 1).unwrap();
        for b in &rep.bits[0] {
            let n = (b.zeros + b.ones) as f64;
            let flips = (b.zero_to_one + b.one_to_zero) as f64 / n;
            assert_within(flips, 0.5, (0.25 / n).sqrt(), 4.0, "flip rate");
        }
    }

    #[test]
    fn coherent_unit_snr_bit_error_rate() {
        let net = reference_pair(Receiver::Coherent, 1.0);
        let qs = uniform(&net);
        let s = &net.sensors[0];
        // γ = P|h|²/(2Lσ_w²) = 1
        let p = 2.0 * s.bits as f64 / 0.25;
        let eps = gaussian_q(2f64.sqrt());
        assert!((eps - 0.0786).abs() < 1e-4);
        let rep = simulate(&net, &qs, &[p, p], Fidelity::PhysicalLayer, 350_000, 2).unwrap();
        let (flips, n) = rep.bits[0]
            .iter()
            .fold((0u64, 0u64), |(f, n), b| (f + b.zero_to_one + b.one_to_zero, n + b.zeros + b.ones));
        let n = n as f64;
        assert!(n >= 1e6);
        assert_within(flips as f64 / n, eps, (eps * (1.0 - eps) / n).sqrt(), 4.0, "bit error rate");
    }

    /// Largest |z| of the empirical transition entries against the analytical
    /// matrix, with binomial standard errors from the analytical value.
    fn transition_z(rep: &EmpiricalReport, alpha: &DMatrix<f64>, k: usize) -> f64 {
        let mut z: f64 = 0.0;
        for l in 0..alpha.ncols() {
            let n = rep.sent_counts[k][l] as f64;
            for t in 0..alpha.nrows() {
                let p = alpha[(t, l)];
                if p > 0.0 && p < 1.0 {
                    z = z.max(((rep.transitions[k][(t, l)] - p) / (p * (1.0 - p) / n).sqrt()).abs());
                }
            }
        }
        z
    }

    #[test]
    fn physical_layer_reproduces_the_transition_matrix() {
        for r in [Receiver::Coherent, Receiver::Envelope] {
            let net = reference_pair(r, 10.0);
            let qs = uniform(&net);
            let pw = net.uniform_powers();
            let alphas = transition_matrices(&net, &qs, &pw).unwrap();
            for f in [Fidelity::FlipLevel, Fidelity::PhysicalLayer] {
                let rep = simulate(&net, &qs, &pw, f, 350_000, 3).unwrap();
                for k in 0..2 {
                    let z = transition_z(&rep, alphas[k].matrix(), k);
                    assert!(z < 4.0, "{} {f:?} sensor {k}: max |z| {z}", r.name());
                }
            }
        }
    }

    #[test]
    fn stats_receiver_marginals_match_but_flips_share_the_gain() {
        let net = reference_pair(Receiver::Stats, 10.0);
        let qs = uniform(&net);
        let pw = net.uniform_powers();
        let e = bit_error(&net.sensors[0], pw[0]).unwrap();
        let rep = simulate(&net, &qs, &pw, Fidelity::PhysicalLayer, 350_000, 4).unwrap();
        for b in &rep.bits[0] {
            let (n0, n1) = (b.zeros as f64, b.ones as f64);
            assert_within(b.eps1(), e.eps1(), (e.eps1() * (1.0 - e.eps1()) / n0).sqrt(), 4.0, "eps1");
            assert_within(b.eps2(), e.eps2(), (e.eps2() * (1.0 - e.eps2()) / n1).sqrt(), 4.0, "eps2");
        }
        // One h per message, so the joint transition law drifts from the
        // product of per-bit flips even though each bit is calibrated.
        let alphas = transition_matrices(&net, &qs, &pw).unwrap();
        let z = transition_z(&rep, alphas[0].matrix(), 0);
        assert!(z > 6.0, "max |z| {z}");
    }

    #[test]
    fn moments_match_the_analytical_tables() {
        for (r, f) in [
            (Receiver::Coherent, Fidelity::PhysicalLayer),
            (Receiver::Envelope, Fidelity::PhysicalLayer),
            (Receiver::Stats, Fidelity::FlipLevel),
        ] {
            let net = reference_pair(r, 10.0);
            let qs = uniform(&net);
            let pw = net.uniform_powers();
            let alphas = transition_matrices(&net, &qs, &pw).unwrap();
            let refs: Vec<&DMatrix<f64>> = alphas.iter().map(|a| a.matrix()).collect();
            let exact = MomentTables::new(&net, &qs).unwrap().moments(&refs).unwrap();
            let rep = simulate(&net, &qs, &pw, f, 1_000_000, 11).unwrap();
            let (m, se) = (&rep.moments, &rep.moments_se);
            let pairs = [
                (&m.cross, &se.cross, &exact.cross, "cross"),
                (&m.second, &se.second, &exact.second, "second"),
                (&m.cov, &se.cov, &exact.cov, "cov"),
            ];
            for (emp, err, ex, name) in pairs {
                for i in 0..emp.len() {
                    assert_within(emp.as_slice()[i], ex.as_slice()[i], err.as_slice()[i], 4.0, name);
                }
            }
            for i in 0..m.mean.len() {
                assert_within(m.mean[i], exact.mean[i], se.mean[i], 4.0, "mean");
            }
        }
    }

    #[test]
    fn flip_level_and_physical_layer_agree() {
        for r in [Receiver::Coherent, Receiver::Envelope] {
            let net = reference_pair(r, 4.0);
            let qs = uniform(&net);
            let pw = net.uniform_powers();
            let a = simulate(&net, &qs, &pw, Fidelity::FlipLevel, 200_000, 12).unwrap();
            let b = simulate(&net, &qs, &pw, Fidelity::PhysicalLayer, 200_000, 13).unwrap();
            let (ma, mb) = (&a.moments, &b.moments);
            let (sa, sb) = (&a.moments_se, &b.moments_se);
            for i in 0..ma.second.len() {
                let se = sa.second.as_slice()[i].hypot(sb.second.as_slice()[i]);
                assert_within(ma.second.as_slice()[i], mb.second.as_slice()[i], se, 4.0, "second");
            }
            for i in 0..ma.cross.len() {
                let se = sa.cross.as_slice()[i].hypot(sb.cross.as_slice()[i]);
                assert_within(ma.cross.as_slice()[i], mb.cross.as_slice()[i], se, 4.0, "cross");
            }
        }
    }

    #[test]
    fn empirical_mse_matches_analytical_trace() {
        let net = reference_pair(Receiver::Coherent, 10.0);
        let qs = uniform(&net);
        let pw = net.uniform_powers();
        let d = mse_at_powers(&net, &qs, &pw).unwrap();
        let rep = simulate(&net, &qs, &pw, Fidelity::PhysicalLayer, 100_000, 21).unwrap();
        assert!(rep.z_score(d.trace()).abs() <= 3.0, "z = {}", rep.z_score(d.trace()));
        for i in 0..4 {
            assert_within(rep.mse.as_slice()[i], d.d.matrix().as_slice()[i], rep.mse_se.as_slice()[i], 4.0, "mse");
        }
    }

    #[test]
    fn sent_bits_are_fair_coins() {
        let net = reference_pair(Receiver::Coherent, 1.0);
        let qs = uniform(&net);
        let rep = simulate(&net, &qs, &net.uniform_powers(), Fidelity::FlipLevel, 200_000, 8).unwrap();
        for b in rep.bits.iter().flatten() {
            let n = (b.zeros + b.ones) as f64;
            assert_within(b.one_rate(), 0.5, (0.25 / n).sqrt(), 4.0, "P(bit = 1)");
        }
    }

    #[test]
    fn single_trial_has_no_standard_error() {
        let net = reference_pair(Receiver::Coherent, 1.0);
        let qs = uniform(&net);
        let rep = simulate(&net, &qs, &net.uniform_powers(), Fidelity::FlipLevel, 1, 0).unwrap();
        assert!(rep.tr_mse.is_finite() && rep.tr_mse_se.is_nan());
        assert!(matches!(
            simulate(&net, &qs, &net.uniform_powers(), Fidelity::FlipLevel, 0, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn pearson_statistic_by_hand() {
        // rows (10, 20), (30, 40): expected 12, 18, 28, 42 → Σ (o − e)²/e
        let (s, dof, sparse) = pearson(&[10, 20, 30, 40], 2, 2);
        let exact = 4.0 / 12.0 + 4.0 / 18.0 + 4.0 / 28.0 + 4.0 / 42.0;
        assert!((s - exact).abs() < 1e-12 && dof == 1 && !sparse);
        // an empty column is dropped before counting degrees of freedom
        let (_, dof, _) = pearson(&[5, 0, 7, 6, 0, 9], 2, 3);
        assert_eq!(dof, 1);
    }

    fn independence(p: f64, shared: bool) -> IndependenceReport {
        let net = two_bit_pair();
        let qs = uniform(&net);
        let mut sim = Simulator::new(&net, &qs, &[p, p], Fidelity::FlipLevel, 31).unwrap();
        if shared {
            sim = sim.with_shared_channel_noise();
        }
        let opts = IndependenceOptions {
            trials_per_bin: 40_000,
            ..Default::default()
        };
        empirical_conditional_independence(&sim, &opts).unwrap()
    }

    #[test]
    fn decoded_levels_are_conditionally_independent() {
        let net = two_bit_pair();
        let clean = independence(1e4, false);
        assert!(clean.pass, "{clean:?}");
        let p = power_for_eps(&net.sensors[0], 0.3);
        assert!((bit_error(&net.sensors[0], p).unwrap().eps1() - 0.3).abs() < 1e-12);
        let noisy = independence(p, false);
        assert!(noisy.pass, "{noisy:?}");
        assert_eq!(noisy.bins.len(), 9);
        assert!((noisy.threshold - 1e-4 / 9.0).abs() < 1e-18);
    }

    #[test]
    fn shared_channel_noise_is_detected() {
        let p = power_for_eps(&two_bit_pair().sensors[0], 0.3);
        let r = independence(p, true);
        assert!(!r.pass);
        assert!(r.bins.iter().all(|b| b.p_value < r.threshold));
    }

    #[test]
    fn independence_check_needs_two_sensors() {
        let net = reference_pair(Receiver::Coherent, 1.0);
        let qs = uniform(&net);
        let mut one = net.clone();
        one.sensors.truncate(1);
        let sim = Simulator::new(&one, &qs[..1], &[1.0], Fidelity::FlipLevel, 0).unwrap();
        let r = empirical_conditional_independence(&sim, &IndependenceOptions::default());
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }
}
