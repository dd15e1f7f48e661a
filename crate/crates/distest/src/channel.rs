//! Bit-flip probabilities of the three receivers and the level transition
//! matrix they induce.
//!
//! Noncoherent thresholds are expressed on the receivers' own statistics:
//! `|y|/σ_w` for the envelope receiver and `|y|²` for the statistics
//! receiver.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{snr, Channel, NetworkModel, SensorSpec};
use crate::numerics::{gaussian_q, marcum_p};
use crate::quantizer::QuantizerSpec;

/// Flip probabilities of one sensor's binary channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BitErrorProfile {
    Symmetric {
        bits: u32,
        eps: f64,
    },
    /// `eps1` is the 0 → 1 flip, `eps2` the 1 → 0 flip.
    Asymmetric {
        bits: u32,
        eps1: f64,
        eps2: f64,
        threshold: f64,
    },
}

impl BitErrorProfile {
    pub fn symmetric(bits: u32, eps: f64) -> Result<Self> {
        check_prob(eps)?;
        Ok(BitErrorProfile::Symmetric { bits, eps })
    }

    pub fn asymmetric(bits: u32, eps1: f64, eps2: f64, threshold: f64) -> Result<Self> {
        check_prob(eps1)?;
        check_prob(eps2)?;
        Ok(BitErrorProfile::Asymmetric {
            bits,
            eps1,
            eps2,
            threshold,
        })
    }

    pub fn bits(&self) -> u32 {
        match *self {
            BitErrorProfile::Symmetric { bits, .. } | BitErrorProfile::Asymmetric { bits, .. } => bits,
        }
    }

    pub fn eps1(&self) -> f64 {
        match *self {
            BitErrorProfile::Symmetric { eps, .. } => eps,
            BitErrorProfile::Asymmetric { eps1, .. } => eps1,
        }
    }

    pub fn eps2(&self) -> f64 {
        match *self {
            BitErrorProfile::Symmetric { eps, .. } => eps,
            BitErrorProfile::Asymmetric { eps2, .. } => eps2,
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        match *self {
            BitErrorProfile::Symmetric { .. } => None,
            BitErrorProfile::Asymmetric { threshold, .. } => Some(threshold),
        }
    }
}

fn check_prob(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Domain(format!("flip probability {p} outside [0, 1]")))
    }
}

/// `ln(1 + x)/x`, continuous at 0.
fn ln1p_over_x(x: f64) -> f64 {
    if x < 1e-8 {
        1.0 - x / 2.0 + x * x / 3.0
    } else {
        x.ln_1p() / x
    }
}

/// Energy-detector flip probabilities at average SNR `gbar`:
/// `ε₁ = (1 + 2γ̄)^{−(1+2γ̄)/(2γ̄)}`, `ε₂ = 1 − (1 + 2γ̄)^{−1/(2γ̄)}`.
pub fn stats_flip_probabilities(gbar: f64) -> (f64, f64) {
    let r = ln1p_over_x(2.0 * gbar);
    let eps1 = (-(2.0 * gbar).ln_1p() - r).exp();
    let eps2 = -(-r).exp_m1();
    (eps1, eps2)
}

/// Equal-prior decision threshold of a noncoherent receiver.
///
/// Envelope: `ζ = √(2 + γ)` on `|y|/σ_w`. Statistics:
/// `ζ = 2σ_w²(1 + 1/(2γ̄))ln(1 + 2γ̄)` on `|y|²`, which tends to `2σ_w²` as
/// `γ̄ → 0`.
pub fn decision_threshold(sensor: &SensorSpec, p: f64) -> Result<f64> {
    let g = snr(sensor, p)?;
    match sensor.channel {
        Channel::Coherent { .. } => Err(Error::Unsupported(
            "decision threshold is defined for noncoherent receivers only".into(),
        )),
        Channel::NoncoherentEnvelope { .. } => Ok((2.0 + g).sqrt()),
        Channel::NoncoherentStats { .. } => {
            let x = 2.0 * g;
            let s2 = sensor.sigma_w * sensor.sigma_w;
            Ok(2.0 * s2 * (1.0 + x) * ln1p_over_x(x))
        }
    }
}

/// Flip probabilities of `sensor` transmitting at power `p`.
pub fn bit_error(sensor: &SensorSpec, p: f64) -> Result<BitErrorProfile> {
    let g = snr(sensor, p)?;
    let bits = sensor.bits;
    match sensor.channel {
        Channel::Coherent { .. } => BitErrorProfile::symmetric(bits, gaussian_q((2.0 * g).sqrt())),
        Channel::NoncoherentEnvelope { .. } => {
            let zeta = (2.0 + g).sqrt();
            let eps1 = (-0.5 * zeta * zeta).exp();
            let eps2 = marcum_p(2.0 * g.sqrt(), zeta);
            BitErrorProfile::asymmetric(bits, eps1, eps2, zeta)
        }
        Channel::NoncoherentStats { .. } => {
            let (eps1, eps2) = stats_flip_probabilities(g);
            BitErrorProfile::asymmetric(bits, eps1, eps2, decision_threshold(sensor, p)?)
        }
    }
}

/// Column-stochastic matrix `α[t][l] = p(m̂_t | m_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    alpha: DMatrix<f64>,
}

impl TransitionMatrix {
    /// Error-free channel.
    pub fn identity(levels: usize) -> Self {
        Self {
            alpha: DMatrix::identity(levels, levels),
        }
    }

    pub fn from_matrix(alpha: DMatrix<f64>) -> Result<Self> {
        if !alpha.is_square() {
            return Err(Error::Dimension("transition matrix must be square".into()));
        }
        if alpha.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("transition probabilities must lie in [0, 1]".into()));
        }
        for (l, col) in alpha.column_iter().enumerate() {
            let s = col.sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Domain(format!("column {l} sums to {s}")));
            }
        }
        Ok(Self { alpha })
    }

    pub fn len(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.nrows() == 0
    }

    pub fn get(&self, t: usize, l: usize) -> f64 {
        self.alpha[(t, l)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.alpha
    }
}

/// Per-bit product of flip probabilities. Bits are independent given the
/// sent level, so `α[t][l]` multiplies `L` binary-channel factors.
pub fn transition_matrix(profile: &BitErrorProfile, spec: &QuantizerSpec) -> Result<TransitionMatrix> {
    if profile.bits() != spec.bits() {
        return Err(Error::Dimension(format!(
            "profile has {} bits, quantizer has {}",
            profile.bits(),
            spec.bits()
        )));
    }
    let m = spec.len();
    let (e1, e2) = (profile.eps1(), profile.eps2());
    let alpha = DMatrix::from_fn(m, m, |t, l| {
        (0..spec.bits())
            .map(|i| match ((l >> i) & 1, (t >> i) & 1) {
                (0, 0) => 1.0 - e1,
                (0, _) => e1,
                (_, 0) => e2,
                _ => 1.0 - e2,
            })
            .product()
    });
    Ok(TransitionMatrix { alpha })
}

/// Flip profiles for every sensor at the given powers.
pub fn bit_errors(net: &NetworkModel, powers: &[f64]) -> Result<Vec<BitErrorProfile>> {
    check_powers(net, powers)?;
    net.sensors
        .iter()
        .zip(powers)
        .map(|(s, &p)| bit_error(s, p))
        .collect()
}

/// Transition matrices for every sensor at the given powers.
pub fn transition_matrices(
    net: &NetworkModel,
    quantizers: &[QuantizerSpec],
    powers: &[f64],
) -> Result<Vec<TransitionMatrix>> {
    if quantizers.len() != net.k() {
        return Err(Error::Dimension(format!(
            "{} quantizers for {} sensors",
            quantizers.len(),
            net.k()
        )));
    }
    bit_errors(net, powers)?
        .iter()
        .zip(quantizers)
        .map(|(b, q)| transition_matrix(b, q))
        .collect()
}

pub(crate) fn check_powers(net: &NetworkModel, powers: &[f64]) -> Result<()> {
    if powers.len() != net.k() {
        return Err(Error::Dimension(format!(
            "{} powers for {} sensors",
            powers.len(),
            net.k()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{scenarios, Receiver};
    use crate::quantizer::uniform_from_std;
    use proptest::prelude::*;

    fn sensor(channel: Channel) -> SensorSpec {
        SensorSpec::new(scenarios::reference_gain(), 1.0, 3, channel, 1.0).unwrap()
    }

    fn power_for_snr(s: &SensorSpec, g: f64) -> f64 {
        g / snr(s, 1.0).unwrap()
    }

    #[test]
    fn coherent_examples() {
        let s = sensor(Channel::Coherent { h_abs: 0.5 });
        assert_eq!(bit_error(&s, 0.0).unwrap().eps1(), 0.5);
        let b = bit_error(&s, power_for_snr(&s, 1.0)).unwrap();
        assert!((b.eps1() - gaussian_q(2f64.sqrt())).abs() < 1e-15);
        assert!((b.eps1() - 0.078_649_603_525_143_2).abs() < 1e-12);
        assert!(matches!(bit_error(&s, -1.0), Err(Error::Domain(_))));
        assert!(matches!(decision_threshold(&s, 1.0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn envelope_thresholds() {
        let s = sensor(Channel::NoncoherentEnvelope { h_abs: 0.5 });
        assert_eq!(decision_threshold(&s, 0.0).unwrap(), 2f64.sqrt());
        assert!((decision_threshold(&s, power_for_snr(&s, 2.0)).unwrap() - 2.0).abs() < 1e-15);
        let b = bit_error(&s, 0.0).unwrap();
        assert!((b.eps1() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((b.eps2() - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn stats_limits() {
        let s = sensor(Channel::NoncoherentStats { sigma_h: 0.5 });
        let e = (-1.0f64).exp();
        let b0 = bit_error(&s, 0.0).unwrap();
        assert_eq!(b0.eps1(), e);
        assert!((b0.eps2() - (1.0 - e)).abs() < 1e-15);
        assert_eq!(decision_threshold(&s, 0.0).unwrap(), 2.0);

        // Direct evaluation of the closed form, away from the 0/0 point.
        let direct = |g: f64| {
            let x = 2.0 * g;
            ((1.0 / (x + 1.0)).powf((x + 1.0) / x), 1.0 - (1.0 / (x + 1.0)).powf(1.0 / x))
        };
        let p = power_for_snr(&s, 1e-8);
        let b = bit_error(&s, p).unwrap();
        assert!((b.eps1() - e).abs() < 1e-7);
        assert!((b.eps2() - (1.0 - e)).abs() < 1e-7);
        assert!((decision_threshold(&s, p).unwrap() - 2.0).abs() < 1e-7);
        for g in [1e-3, 0.1, 1.0, 7.5, 300.0] {
            let b = bit_error(&s, power_for_snr(&s, g)).unwrap();
            let (d1, d2) = direct(g);
            assert!((b.eps1() - d1).abs() < 1e-13, "{g}");
            assert!((b.eps2() - d2).abs() < 1e-12, "{g}");
        }
        let b = bit_error(&s, power_for_snr(&s, 1e6)).unwrap();
        assert!(b.eps1() < 1e-5 && b.eps2() < 1e-5);
    }

    #[test]
    fn stats_threshold_is_equal_prior_lrt() {
        // Exponential densities with means 2σ_w² and 2σ_w²(1 + 2γ̄) cross at ζ.
        let s = sensor(Channel::NoncoherentStats { sigma_h: 0.5 });
        for g in [0.1, 1.0, 10.0] {
            let z = decision_threshold(&s, power_for_snr(&s, g)).unwrap();
            let (m0, m1) = (2.0, 2.0 * (1.0 + 2.0 * g));
            let f0 = (-z / m0).exp() / m0;
            let f1 = (-z / m1).exp() / m1;
            assert!((f0 / f1 - 1.0).abs() < 1e-12);
        }
    }

    fn bessel_i0_scaled(x: f64) -> f64 {
        // e^{−x} I0(x) = (1/π) ∫₀^π e^{x(cos t − 1)} dt by Simpson.
        let n = 4000;
        let h = std::f64::consts::PI / n as f64;
        let f = |t: f64| (x * (t.cos() - 1.0)).exp();
        let mut s = f(0.0) + f(std::f64::consts::PI);
        for i in 1..n {
            s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0 / std::f64::consts::PI
    }

    #[test]
    fn approximate_envelope_threshold_versus_exact() {
        // The adopted ζ = √(2 + γ) is an approximation to the root of
        // e^{−2γ} I0(2ζ√γ) = 1. The exact root minimizes the average error;
        // the gap is printed, not bounded.
        let s = sensor(Channel::NoncoherentEnvelope { h_abs: 0.5 });
        for g in [0.5f64, 2.0, 8.0] {
            let nu = 2.0 * g.sqrt();
            let lr = |z: f64| -2.0 * g + nu * z + bessel_i0_scaled(nu * z).ln();
            let (mut lo, mut hi) = (0.0, 20.0);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if lr(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let z_exact = 0.5 * (lo + hi);
            let err = |z: f64| 0.5 * ((-0.5 * z * z).exp() + marcum_p(nu, z));
            let b = bit_error(&s, power_for_snr(&s, g)).unwrap();
            let approx = 0.5 * (b.eps1() + b.eps2());
            println!(
                "gamma {g}: zeta approx {:.6} exact {z_exact:.6}, mean error {approx:.3e} vs {:.3e}",
                b.threshold().unwrap(),
                err(z_exact)
            );
            assert!(err(z_exact) <= approx + 1e-12);
        }
    }

    #[test]
    fn monotone_in_power() {
        for r in Receiver::ALL {
            let net = scenarios::reference_pair(r, 1.0);
            let s = &net.sensors[0];
            let mut prev = bit_error(s, 0.0).unwrap();
            for i in 1..=60 {
                let p = 10f64.powf(-2.0 + i as f64 * 0.1);
                let b = bit_error(s, p).unwrap();
                match r {
                    Receiver::Coherent => assert!(b.eps1() < prev.eps1(), "{r:?} {p}"),
                    _ => {
                        assert!(b.eps1() <= prev.eps1(), "{r:?} {p}");
                        assert!(b.eps2() <= prev.eps2(), "{r:?} {p}");
                    }
                }
                prev = b;
            }
        }
    }

    #[test]
    fn transition_examples() {
        let q = uniform_from_std(1.0, 3);
        let id = transition_matrix(&BitErrorProfile::symmetric(3, 0.0).unwrap(), &q).unwrap();
        assert_eq!(id, TransitionMatrix::identity(8));
        let half = transition_matrix(&BitErrorProfile::symmetric(3, 0.5).unwrap(), &q).unwrap();
        assert!(half.matrix().iter().all(|v| *v == 0.125));
        let bad = BitErrorProfile::symmetric(2, 0.1).unwrap();
        assert!(matches!(transition_matrix(&bad, &q), Err(Error::Dimension(_))));
    }

    /// Enumerates the 4 bit patterns of a 2-bit word string by string.
    fn asymmetric_oracle(e1: f64, e2: f64, sent: &str, got: &str) -> f64 {
        sent.chars()
            .zip(got.chars())
            .map(|(s, g)| match (s, g) {
                ('0', '0') => 1.0 - e1,
                ('0', '1') => e1,
                ('1', '0') => e2,
                _ => 1.0 - e2,
            })
            .product()
    }

    #[test]
    fn asymmetric_two_bit_enumeration() {
        let q = uniform_from_std(1.0, 2);
        let b = BitErrorProfile::asymmetric(2, 0.1, 0.3, 1.0).unwrap();
        let a = transition_matrix(&b, &q).unwrap();
        let words = ["00", "01", "10", "11"];
        for (l, sent) in words.iter().enumerate() {
            for (t, got) in words.iter().enumerate() {
                assert!((a.get(t, l) - asymmetric_oracle(0.1, 0.3, sent, got)).abs() < 1e-15);
            }
        }
        assert!((a.get(3, 1) - 0.07).abs() < 1e-15);
        for c in a.matrix().column_iter() {
            assert!((c.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn network_helpers_check_lengths() {
        let net = scenarios::reference_pair(Receiver::Coherent, 2.0);
        let qs = vec![uniform_from_std(1.0, 3); 2];
        assert_eq!(transition_matrices(&net, &qs, &[1.0, 1.0]).unwrap().len(), 2);
        assert!(transition_matrices(&net, &qs, &[1.0]).is_err());
        assert!(transition_matrices(&net, &qs[..1], &[1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn columns_sum_to_one(e1 in 0.0f64..=1.0, e2 in 0.0f64..=1.0, bits in 1u32..7) {
            let q = uniform_from_std(1.0, bits);
            let a = transition_matrix(&BitErrorProfile::asymmetric(bits, e1, e2, 1.0).unwrap(), &q).unwrap();
            for c in a.matrix().column_iter() {
                prop_assert!((c.sum() - 1.0).abs() < 1e-12);
                prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn symmetric_depends_on_hamming_only(eps in 0.0f64..=0.5, bits in 1u32..6) {
            let q = uniform_from_std(1.0, bits);
            let a = transition_matrix(&BitErrorProfile::symmetric(bits, eps).unwrap(), &q).unwrap();
            for t in 0..q.len() {
                for l in 0..q.len() {
                    let h = q.hamming(t, l).unwrap() as i32;
                    let want = eps.powi(h) * (1.0 - eps).powi(bits as i32 - h);
                    prop_assert!((a.get(t, l) - want).abs() < 1e-15);
                }
            }
        }

        #[test]
        fn flip_probabilities_are_probabilities(p in 0.0f64..1e4) {
            for r in Receiver::ALL {
                let net = scenarios::reference_pair(r, 1.0);
                let b = bit_error(&net.sensors[0], p).unwrap();
                prop_assert!((0.0..=0.5).contains(&b.eps1()));
                prop_assert!((0.0..=1.0).contains(&b.eps2()));
            }
        }
    }
}
