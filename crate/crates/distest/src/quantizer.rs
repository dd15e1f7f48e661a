//! Symmetric mid-rise scalar quantizers with natural binary codebooks.
//!
//! Levels and cells are indexed from 0. Cell `l` is the half-open interval
//! `(u[l], u[l+1]]`, its level is `m[l]`, and its code word is the binary
//! expansion of `l` on `L` bits, MSB first. The edge boundaries are ±∞ so
//! the cell probabilities always sum to one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GaussianPrior, NetworkModel, SensorSpec};
use crate::numerics::{gaussian_interval, gaussian_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantizerKind {
    Uniform,
    LloydMax,
}

impl QuantizerKind {
    pub fn name(self) -> &'static str {
        match self {
            QuantizerKind::Uniform => "uniform",
            QuantizerKind::LloydMax => "lloyd-max",
        }
    }
}

/// Marginal scale of one sensor's observation and the uniform grid derived
/// from it: `σ_k = √(σ_n² + a_kᵀC_θa_k)`, `τ_k = 3σ_k`, `Δ_k = 2τ_k/(2^L − 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationStd {
    pub sigma_k: f64,
    pub tau_k: f64,
    pub delta_k: f64,
}

impl ObservationStd {
    pub fn new(sensor: &SensorSpec, prior: &GaussianPrior) -> Self {
        let var = sensor.sigma_n * sensor.sigma_n + sensor.a.dot(&(prior.cov.matrix() * &sensor.a));
        Self::from_sigma(var.sqrt(), sensor.bits)
    }

    pub fn from_sigma(sigma_k: f64, bits: u32) -> Self {
        let tau_k = 3.0 * sigma_k;
        let delta_k = 2.0 * tau_k / (((1u64 << bits) - 1) as f64);
        Self {
            sigma_k,
            tau_k,
            delta_k,
        }
    }
}

/// Boundaries, levels and codebook of one quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    kind: QuantizerKind,
    bits: u32,
    boundaries: Vec<f64>,
    levels: Vec<f64>,
    /// Grid step for the uniform design.
    step: Option<f64>,
}

impl QuantizerSpec {
    /// Builds a spec from levels and interior boundaries, checking the
    /// symmetric mid-rise structure.
    pub fn from_parts(
        kind: QuantizerKind,
        bits: u32,
        levels: Vec<f64>,
        interior: Vec<f64>,
        step: Option<f64>,
    ) -> Result<Self> {
        let m = 1usize << bits;
        if levels.len() != m || interior.len() + 1 != m {
            return Err(Error::Dimension(format!(
                "{} levels and {} interior boundaries for {bits} bits",
                levels.len(),
                interior.len()
            )));
        }
        let mut boundaries = Vec::with_capacity(m + 1);
        boundaries.push(f64::NEG_INFINITY);
        boundaries.extend(interior);
        boundaries.push(f64::INFINITY);
        let spec = Self {
            kind,
            bits,
            boundaries,
            levels,
            step,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        let m = self.len();
        if self.boundaries.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Domain("boundaries must be strictly increasing".into()));
        }
        for l in 0..m {
            let (lo, hi) = (self.boundaries[l], self.boundaries[l + 1]);
            if !(lo < self.levels[l] && self.levels[l] <= hi) {
                return Err(Error::Domain(format!("level {l} lies outside its cell")));
            }
            if self.levels[l] != -self.levels[m - 1 - l] {
                return Err(Error::Domain("levels are not mid-rise symmetric".into()));
            }
        }
        for l in 0..=m {
            if self.boundaries[l] != -self.boundaries[m - l] {
                return Err(Error::Domain("boundaries are not symmetric".into()));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> QuantizerKind {
        self.kind
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Number of levels `M = 2^L`.
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// All `M + 1` boundaries, including the infinite edges.
    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// Grid step `Δ` of a uniform quantizer.
    pub fn step(&self) -> Option<f64> {
        self.step
    }

    /// Cell index `l` with `u[l] < x ≤ u[l+1]`.
    pub fn quantize(&self, x: f64) -> usize {
        let interior = &self.boundaries[1..self.boundaries.len() - 1];
        interior.partition_point(|u| *u < x)
    }

    fn check_index(&self, l: usize) -> Result<()> {
        if l < self.len() {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index: l,
                len: self.len(),
            })
        }
    }

    /// Code word of level `l`, MSB first.
    pub fn encode(&self, l: usize) -> Result<Vec<u8>> {
        self.check_index(l)?;
        Ok((0..self.bits)
            .rev()
            .map(|i| ((l >> i) & 1) as u8)
            .collect())
    }

    /// Number of bit positions where the code words of `t` and `l` differ.
    pub fn hamming(&self, t: usize, l: usize) -> Result<u32> {
        self.check_index(t)?;
        self.check_index(l)?;
        Ok(((t ^ l) as u64).count_ones())
    }

    /// Probabilities of each cell under `N(0, sigma²)`.
    pub fn cell_probabilities(&self, sigma: f64) -> Vec<f64> {
        self.boundaries
            .windows(2)
            .map(|w| gaussian_interval(w[0] / sigma, w[1] / sigma))
            .collect()
    }

    /// Mean squared quantization error `E{(x − m_l)²}` for `x ~ N(0, sigma²)`,
    /// from closed-form cell moments.
    pub fn distortion(&self, sigma: f64) -> f64 {
        let mut total = 0.0;
        for l in 0..self.len() {
            let a = self.boundaries[l] / sigma;
            let b = self.boundaries[l + 1] / sigma;
            let p = gaussian_interval(a, b);
            let (pa, pb) = (gaussian_pdf(a), gaussian_pdf(b));
            let xa = if a.is_finite() { a * pa } else { 0.0 };
            let xb = if b.is_finite() { b * pb } else { 0.0 };
            let m1 = sigma * (pa - pb);
            let m2 = sigma * sigma * (p + xa - xb);
            let y = self.levels[l];
            total += m2 - 2.0 * y * m1 + y * y * p;
        }
        total
    }

    /// Probability that each bit position carries a one, given the cell
    /// probabilities.
    pub fn bit_one_probabilities(&self, cell_probs: &[f64]) -> Vec<f64> {
        (0..self.bits)
            .rev()
            .map(|i| {
                cell_probs
                    .iter()
                    .enumerate()
                    .filter(|(l, _)| (l >> i) & 1 == 1)
                    .map(|(_, p)| p)
                    .sum()
            })
            .collect()
    }
}

/// Uniform quantizer on the `τ = 3σ_k` grid of `sensor`.
pub fn uniform_quantizer(sensor: &SensorSpec, prior: &GaussianPrior) -> QuantizerSpec {
    uniform_from_std(ObservationStd::new(sensor, prior).sigma_k, sensor.bits)
}

/// Uniform quantizer for an observation of standard deviation `sigma_k`:
/// `m_l = (2l + 1 − M)Δ/2` and interior `u_l = (2l − M)Δ/2` (0-based).
pub fn uniform_from_std(sigma_k: f64, bits: u32) -> QuantizerSpec {
    let os = ObservationStd::from_sigma(sigma_k, bits);
    let m = 1i64 << bits;
    let d = os.delta_k;
    let levels: Vec<f64> = (0..m).map(|l| (2 * l + 1 - m) as f64 * d / 2.0).collect();
    let interior: Vec<f64> = (1..m).map(|l| (2 * l - m) as f64 * d / 2.0).collect();
    QuantizerSpec::from_parts(QuantizerKind::Uniform, bits, levels, interior, Some(d))
        .expect("uniform grid is symmetric mid-rise")
}

/// Default stopping tolerance on the largest level change (unit variance).
pub const LLOYD_TOL: f64 = 1e-12;
pub const LLOYD_MAX_ITER: usize = 100_000;

/// Lloyd-Max quantizer for `N(0, sigma_k²)`.
///
/// Runs the centroid/midpoint iteration on the unit-variance problem from
/// the uniform grid, symmetrizing the levels every step, then scales by
/// `sigma_k`.
pub fn lloyd_max_quantizer(
    sigma_k: f64,
    bits: u32,
    tol: f64,
    max_iter: usize,
) -> Result<QuantizerSpec> {
    if !(sigma_k > 0.0 && sigma_k.is_finite()) {
        return Err(Error::Domain(format!("sigma_k must be positive, got {sigma_k}")));
    }
    let mut levels = uniform_from_std(1.0, bits).levels().to_vec();
    let m = levels.len();
    let mut last_change = f64::INFINITY;
    for _ in 0..max_iter {
        let mut bounds = Vec::with_capacity(m + 1);
        bounds.push(f64::NEG_INFINITY);
        bounds.extend(levels.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        bounds.push(f64::INFINITY);
        let mut next: Vec<f64> = bounds
            .windows(2)
            .map(|w| {
                let p = gaussian_interval(w[0], w[1]);
                (gaussian_pdf(w[0]) - gaussian_pdf(w[1])) / p
            })
            .collect();
        let sym: Vec<f64> = (0..m).map(|l| 0.5 * (next[l] - next[m - 1 - l])).collect();
        next = sym;
        last_change = next
            .iter()
            .zip(&levels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        levels = next;
        if last_change <= tol {
            let interior: Vec<f64> = levels
                .windows(2)
                .map(|w| 0.5 * (w[0] + w[1]) * sigma_k)
                .collect();
            let scaled: Vec<f64> = levels.iter().map(|v| v * sigma_k).collect();
            return QuantizerSpec::from_parts(QuantizerKind::LloydMax, bits, scaled, interior, None);
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        last_change,
        last_levels: levels.iter().map(|v| v * sigma_k).collect(),
    })
}

/// Designs the quantizer of `kind` for one sensor.
pub fn design(kind: QuantizerKind, sensor: &SensorSpec, prior: &GaussianPrior) -> Result<QuantizerSpec> {
    match kind {
        QuantizerKind::Uniform => Ok(uniform_quantizer(sensor, prior)),
        QuantizerKind::LloydMax => lloyd_max_quantizer(
            ObservationStd::new(sensor, prior).sigma_k,
            sensor.bits,
            LLOYD_TOL,
            LLOYD_MAX_ITER,
        ),
    }
}

/// One quantizer of `kind` per sensor.
pub fn design_all(kind: QuantizerKind, net: &NetworkModel) -> Result<Vec<QuantizerSpec>> {
    net.sensors.iter().map(|s| design(kind, s, &net.prior)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::scenarios;
    use crate::numerics::gaussian_q;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn uniform_three_bit_grid() {
        let q = uniform_from_std(1.0, 3);
        let d = 6.0 / 7.0;
        assert_eq!(q.step(), Some(d));
        assert!((q.levels()[0] + 3.0).abs() < 1e-15);
        assert!((q.levels()[7] - 3.0).abs() < 1e-15);
        assert!((q.levels()[0] - (-7.0 * d / 2.0)).abs() < 1e-15);
        assert_eq!(q.boundaries()[0], f64::NEG_INFINITY);
        assert_eq!(q.boundaries()[8], f64::INFINITY);
    }

    #[test]
    fn uniform_one_bit() {
        let q = uniform_from_std(2.0, 1);
        let d = q.step().unwrap();
        assert_eq!(q.levels(), &[-d / 2.0, d / 2.0]);
        assert_eq!(&q.boundaries()[1..2], &[0.0]);
    }

    #[test]
    fn cell_probabilities_sum_to_one() {
        for bits in 1..=6 {
            let q = uniform_from_std(1.7, bits);
            let s: f64 = q.cell_probabilities(1.7).iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_from_sensor_uses_marginal_std() {
        let net = scenarios::reference_pair(crate::model::Receiver::Coherent, 1.0);
        let os = ObservationStd::new(&net.sensors[0], &net.prior);
        assert!((os.sigma_k * os.sigma_k - 3.08).abs() < 1e-12);
        let q = uniform_quantizer(&net.sensors[0], &net.prior);
        assert!((q.levels()[7] - os.tau_k).abs() < 1e-12);
    }

    /// Bisection on the single free boundary of the 2-bit problem; an
    /// independent route to the Lloyd-Max fixed point.
    fn two_bit_oracle() -> (f64, f64, f64) {
        let inner = |t: f64| (gaussian_pdf(0.0) - gaussian_pdf(t)) / (0.5 - gaussian_q(t));
        let outer = |t: f64| gaussian_pdf(t) / gaussian_q(t);
        let f = |t: f64| t - 0.5 * (inner(t) + outer(t));
        let (mut lo, mut hi) = (0.5, 2.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(lo) * f(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        (t, inner(t), outer(t))
    }

    #[test]
    fn lloyd_max_examples() {
        let q = lloyd_max_quantizer(1.0, 1, 1e-14, 1000).unwrap();
        let c = (2.0 / std::f64::consts::PI).sqrt();
        assert!((q.levels()[1] - c).abs() < 1e-14);
        assert_eq!(q.boundaries()[1], 0.0);

        let (t, y1, y2) = two_bit_oracle();
        // Frozen oracle values.
        assert!((t - 0.981_598_821_567_793_4).abs() < 1e-12);
        assert!((y1 - 0.452_780_034_636_492).abs() < 1e-12);
        assert!((y2 - 1.510_417_608_499_095).abs() < 1e-12);
        let q = lloyd_max_quantizer(1.0, 2, 1e-13, 100_000).unwrap();
        assert!((q.levels()[2] - y1).abs() < 1e-10);
        assert!((q.levels()[3] - y2).abs() < 1e-10);
        assert!((q.boundaries()[3] - t).abs() < 1e-10);
    }

    #[test]
    fn lloyd_max_scale_equivariance() {
        let a = lloyd_max_quantizer(1.0, 3, LLOYD_TOL, LLOYD_MAX_ITER).unwrap();
        let b = lloyd_max_quantizer(2.0, 3, LLOYD_TOL, LLOYD_MAX_ITER).unwrap();
        for (x, y) in a.levels().iter().zip(b.levels()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn lloyd_max_reports_non_convergence() {
        match lloyd_max_quantizer(1.0, 3, 1e-15, 3) {
            Err(Error::Convergence {
                iterations,
                last_levels,
                ..
            }) => {
                assert_eq!(iterations, 3);
                assert_eq!(last_levels.len(), 8);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lloyd_max_beats_uniform_distortion() {
        for bits in 1..=5 {
            let u = uniform_from_std(1.3, bits);
            let l = lloyd_max_quantizer(1.3, bits, LLOYD_TOL, LLOYD_MAX_ITER).unwrap();
            assert!(l.distortion(1.3) <= u.distortion(1.3) + 1e-15, "bits {bits}");
        }
    }

    #[test]
    fn distortion_matches_monte_carlo() {
        let q = uniform_from_std(1.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400_000;
        let mut s = 0.0;
        let mut s2 = 0.0;
        for _ in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            let e = (x - q.levels()[q.quantize(x)]).powi(2);
            s += e;
            s2 += e * e;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - q.distortion(1.0)).abs() < 4.0 * se);
    }

    #[test]
    fn quantize_conventions() {
        let q = uniform_from_std(1.0, 3);
        for (l, m) in q.levels().iter().enumerate() {
            assert_eq!(q.quantize(*m), l);
        }
        assert_eq!(q.quantize(1e-300), 4);
        assert_eq!(q.quantize(0.0), 3);
        assert_eq!(q.quantize(f64::MAX), 7);
        assert_eq!(q.quantize(-f64::MAX), 0);
    }

    #[test]
    fn empirical_cells_match_probabilities() {
        let q = uniform_from_std(1.0, 3);
        let p = q.cell_probabilities(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1_000_000usize;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            counts[q.quantize(x)] += 1;
        }
        for l in 0..8 {
            let f = counts[l] as f64 / n as f64;
            let se = (p[l] * (1.0 - p[l]) / n as f64).sqrt();
            assert!((f - p[l]).abs() < 4.0 * se, "cell {l}: {f} vs {}", p[l]);
        }
    }

    #[test]
    fn codebook() {
        let q = uniform_from_std(1.0, 3);
        assert_eq!(q.encode(0).unwrap(), vec![0, 0, 0]);
        assert_eq!(q.encode(7).unwrap(), vec![1, 1, 1]);
        assert_eq!(q.encode(4).unwrap(), vec![1, 0, 0]);
        assert!(matches!(q.encode(8), Err(Error::IndexOutOfRange { index: 8, len: 8 })));
        for t in 0..8 {
            assert_eq!(q.hamming(t, t).unwrap(), 0);
            for l in 0..8 {
                let h = q.hamming(t, l).unwrap();
                assert_eq!(h, q.hamming(l, t).unwrap());
                let direct = q
                    .encode(t)
                    .unwrap()
                    .iter()
                    .zip(q.encode(l).unwrap())
                    .filter(|(a, b)| **a != *b)
                    .count() as u32;
                assert_eq!(h, direct);
            }
        }
    }

    #[test]
    fn ones_count_complement_identity() {
        let q = uniform_from_std(1.0, 4);
        let m = q.len();
        for l in 0..m {
            let ones = |i: usize| q.encode(i).unwrap().iter().filter(|b| **b == 1).count();
            assert_eq!(ones(l), 4 - ones(m - 1 - l));
        }
    }

    #[test]
    fn bit_priors_are_one_half() {
        for bits in 1..=5 {
            for q in [
                uniform_from_std(1.0, bits),
                lloyd_max_quantizer(1.0, bits, LLOYD_TOL, LLOYD_MAX_ITER).unwrap(),
            ] {
                let p = q.cell_probabilities(1.0);
                for b in q.bit_one_probabilities(&p) {
                    assert!((b - 0.5).abs() < 1e-12);
                }
                let avg_ones: f64 = p
                    .iter()
                    .enumerate()
                    .map(|(l, pl)| (l as u64).count_ones() as f64 * pl)
                    .sum::<f64>()
                    / bits as f64;
                assert!((avg_ones - 0.5).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn generated_specs_are_symmetric(sigma in 0.01f64..100.0, bits in 1u32..7) {
            for q in [uniform_from_std(sigma, bits),
                      lloyd_max_quantizer(sigma, bits, LLOYD_TOL, LLOYD_MAX_ITER).unwrap()] {
                let m = q.len();
                for l in 0..m {
                    prop_assert_eq!(q.levels()[l], -q.levels()[m - 1 - l]);
                }
                for l in 0..=m {
                    prop_assert_eq!(q.boundaries()[l], -q.boundaries()[m - l]);
                }
            }
        }

        #[test]
        fn bit_priors_for_symmetric_laplace(scale in 0.1f64..5.0, bits in 1u32..6) {
            // Any symmetric density works; Laplace cell masses are closed form.
            let q = uniform_from_std(1.0, bits);
            let cdf = |x: f64| if x < 0.0 { 0.5 * (x / scale).exp() } else { 1.0 - 0.5 * (-x / scale).exp() };
            let p: Vec<f64> = q.boundaries().windows(2).map(|w| cdf(w[1]) - cdf(w[0])).collect();
            for b in q.bit_one_probabilities(&p) {
                prop_assert!((b - 0.5).abs() < 1e-12);
            }
        }
    }
}
