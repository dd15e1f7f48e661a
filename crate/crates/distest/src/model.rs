//! Network description: Gaussian prior, sensors, channels and the power
//! budget, plus the random-field deployment generator.
//!
//! A nonzero prior mean is handled the usual way: each sensor subtracts
//! `a_kᵀμ` before quantizing, so every downstream formula works with the
//! centered covariance. Only the estimator adds the mean back.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SpdMatrix;

/// Prior `θ ~ N(mean, cov)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorRaw", into = "PriorRaw")]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub cov: SpdMatrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorRaw {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<Vec<f64>>,
    cov: SpdMatrix,
}

impl TryFrom<PriorRaw> for GaussianPrior {
    type Error = Error;
    fn try_from(raw: PriorRaw) -> Result<Self> {
        match raw.mean {
            None => Ok(Self::zero_mean(raw.cov)),
            Some(m) => Self::new(DVector::from_vec(m), raw.cov),
        }
    }
}

impl From<GaussianPrior> for PriorRaw {
    fn from(p: GaussianPrior) -> Self {
        let mean = if p.mean.iter().all(|v| *v == 0.0 && v.is_sign_positive()) {
            None
        } else {
            Some(p.mean.iter().copied().collect())
        };
        PriorRaw { mean, cov: p.cov }
    }
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: SpdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::Dimension(format!(
                "prior mean has length {}, covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("prior mean must be finite".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn zero_mean(cov: SpdMatrix) -> Self {
        let q = cov.dim();
        Self {
            mean: DVector::zeros(q),
            cov,
        }
    }

    pub fn dim(&self) -> usize {
        self.cov.dim()
    }
}

/// Receiver family at the fusion center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Receiver {
    Coherent,
    Envelope,
    Stats,
}

impl Receiver {
    pub const ALL: [Receiver; 3] = [Receiver::Coherent, Receiver::Envelope, Receiver::Stats];

    pub fn name(self) -> &'static str {
        match self {
            Receiver::Coherent => "coherent",
            Receiver::Envelope => "envelope",
            Receiver::Stats => "stats",
        }
    }
}

/// Per-sensor channel and the knowledge the fusion center has about it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Channel {
    /// BPSK with phase-coherent detection; `|h|` known.
    Coherent { h_abs: f64 },
    /// OOK with envelope detection; `|h|` known.
    NoncoherentEnvelope { h_abs: f64 },
    /// OOK with energy detection; only `h ~ CN(0, 2σ_h²)` is known.
    NoncoherentStats { sigma_h: f64 },
}

impl Channel {
    pub fn receiver(&self) -> Receiver {
        match self {
            Channel::Coherent { .. } => Receiver::Coherent,
            Channel::NoncoherentEnvelope { .. } => Receiver::Envelope,
            Channel::NoncoherentStats { .. } => Receiver::Stats,
        }
    }

    /// Same mean channel gain under another receiver. Envelope and
    /// statistics are matched through `E{|h|²} = 2σ_h²`.
    pub fn with_receiver(&self, receiver: Receiver) -> Channel {
        let mean_sq = match *self {
            Channel::Coherent { h_abs } | Channel::NoncoherentEnvelope { h_abs } => h_abs * h_abs,
            Channel::NoncoherentStats { sigma_h } => 2.0 * sigma_h * sigma_h,
        };
        match receiver {
            Receiver::Coherent => Channel::Coherent {
                h_abs: mean_sq.sqrt(),
            },
            Receiver::Envelope => Channel::NoncoherentEnvelope {
                h_abs: mean_sq.sqrt(),
            },
            Receiver::Stats => Channel::NoncoherentStats {
                sigma_h: (0.5 * mean_sq).sqrt(),
            },
        }
    }

    /// Same receiver with `|h|` replaced (statistics channels are unchanged).
    pub fn with_envelope(&self, h_abs: f64) -> Channel {
        match self {
            Channel::Coherent { .. } => Channel::Coherent { h_abs },
            Channel::NoncoherentEnvelope { .. } => Channel::NoncoherentEnvelope { h_abs },
            Channel::NoncoherentStats { .. } => *self,
        }
    }
}

/// One sensor: observation `x_k = a_kᵀθ + n_k`, an `L`-bit quantizer and
/// its channel to the fusion center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SensorRaw", into = "SensorRaw")]
pub struct SensorSpec {
    pub a: DVector<f64>,
    pub sigma_n: f64,
    pub bits: u32,
    pub channel: Channel,
    pub sigma_w: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SensorRaw {
    a: Vec<f64>,
    sigma_n: f64,
    bits: u32,
    sigma_w: f64,
    channel: Channel,
}

impl TryFrom<SensorRaw> for SensorSpec {
    type Error = Error;
    fn try_from(r: SensorRaw) -> Result<Self> {
        SensorSpec::new(DVector::from_vec(r.a), r.sigma_n, r.bits, r.channel, r.sigma_w)
    }
}

impl From<SensorSpec> for SensorRaw {
    fn from(s: SensorSpec) -> Self {
        SensorRaw {
            a: s.a.iter().copied().collect(),
            sigma_n: s.sigma_n,
            bits: s.bits,
            sigma_w: s.sigma_w,
            channel: s.channel,
        }
    }
}

/// Largest supported bit width; `2^L` levels are enumerated densely.
pub const MAX_BITS: u32 = 12;

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidModel(format!("{name} must be positive and finite, got {v}")))
    }
}

impl SensorSpec {
    pub fn new(
        a: DVector<f64>,
        sigma_n: f64,
        bits: u32,
        channel: Channel,
        sigma_w: f64,
    ) -> Result<Self> {
        if a.is_empty() || a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("gain vector a must be nonempty and finite".into()));
        }
        positive("sigma_n", sigma_n)?;
        positive("sigma_w", sigma_w)?;
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(Error::InvalidModel(format!("bits must be in 1..={MAX_BITS}, got {bits}")));
        }
        match channel {
            Channel::Coherent { h_abs } | Channel::NoncoherentEnvelope { h_abs } => {
                if !(h_abs.is_finite() && h_abs >= 0.0) {
                    return Err(Error::InvalidModel(format!("|h| must be >= 0, got {h_abs}")));
                }
            }
            Channel::NoncoherentStats { sigma_h } => positive("sigma_h", sigma_h)?,
        }
        Ok(Self {
            a,
            sigma_n,
            bits,
            channel,
            sigma_w,
        })
    }

    /// Number of quantization levels `M = 2^L`.
    pub fn levels(&self) -> usize {
        1usize << self.bits
    }

    pub fn receiver(&self) -> Receiver {
        self.channel.receiver()
    }

    pub fn quality(&self) -> ChannelQuality {
        let s2 = self.sigma_w * self.sigma_w;
        match self.channel {
            Channel::Coherent { h_abs } | Channel::NoncoherentEnvelope { h_abs } => ChannelQuality {
                delta: Some(h_abs * h_abs / (2.0 * s2)),
                delta_bar: None,
            },
            Channel::NoncoherentStats { sigma_h } => ChannelQuality {
                delta: None,
                delta_bar: Some(sigma_h * sigma_h / s2),
            },
        }
    }
}

/// Derived channel-quality scalars of one sensor.
///
/// `delta = |h|²/(2σ_w²)` for channels with known envelope and
/// `delta_bar = σ_h²/σ_w²` for the statistics-only receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelQuality {
    pub delta: Option<f64>,
    pub delta_bar: Option<f64>,
}

/// `|h|` giving quality `delta` at channel-noise level `sigma_w`.
pub fn h_abs_from_delta(delta: f64, sigma_w: f64) -> f64 {
    (2.0 * delta).sqrt() * sigma_w
}

/// `σ_h` giving average quality `delta_bar` at channel-noise level `sigma_w`.
pub fn sigma_h_from_delta_bar(delta_bar: f64, sigma_w: f64) -> f64 {
    delta_bar.sqrt() * sigma_w
}

/// Prior, sensors and total power budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkRaw", into = "NetworkRaw")]
pub struct NetworkModel {
    pub prior: GaussianPrior,
    pub sensors: Vec<SensorSpec>,
    pub p_tot: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkRaw {
    p_tot: f64,
    prior: GaussianPrior,
    sensors: Vec<SensorSpec>,
}

impl TryFrom<NetworkRaw> for NetworkModel {
    type Error = Error;
    fn try_from(r: NetworkRaw) -> Result<Self> {
        NetworkModel::new(r.prior, r.sensors, r.p_tot)
    }
}

impl From<NetworkModel> for NetworkRaw {
    fn from(n: NetworkModel) -> Self {
        NetworkRaw {
            p_tot: n.p_tot,
            prior: n.prior,
            sensors: n.sensors,
        }
    }
}

impl NetworkModel {
    pub fn new(prior: GaussianPrior, sensors: Vec<SensorSpec>, p_tot: f64) -> Result<Self> {
        if sensors.is_empty() {
            return Err(Error::InvalidModel("network needs at least one sensor".into()));
        }
        positive("p_tot", p_tot)?;
        let q = prior.dim();
        if let Some((k, s)) = sensors.iter().enumerate().find(|(_, s)| s.a.len() != q) {
            return Err(Error::Dimension(format!(
                "sensor {} has a gain vector of length {}, prior dimension is {q}",
                k + 1,
                s.a.len()
            )));
        }
        Ok(Self {
            prior,
            sensors,
            p_tot,
        })
    }

    pub fn q(&self) -> usize {
        self.prior.dim()
    }

    pub fn k(&self) -> usize {
        self.sensors.len()
    }

    /// Same network with every channel mapped to `receiver`.
    pub fn with_receiver(&self, receiver: Receiver) -> NetworkModel {
        let mut out = self.clone();
        for s in &mut out.sensors {
            s.channel = s.channel.with_receiver(receiver);
        }
        out
    }

    pub fn with_p_tot(&self, p_tot: f64) -> Result<NetworkModel> {
        NetworkModel::new(self.prior.clone(), self.sensors.clone(), p_tot)
    }

    /// Uniform split `P_k = P_tot/K`.
    pub fn uniform_powers(&self) -> Vec<f64> {
        vec![self.p_tot / self.k() as f64; self.k()]
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network model always serializes")
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

/// Channel SNR at transmit power `p`.
///
/// `γ = P|h|²/(2Lσ_w²)` for the coherent and envelope receivers and the
/// average SNR `γ̄ = Pσ_h²/(Lσ_w²)` for the statistics receiver.
pub fn snr(sensor: &SensorSpec, p: f64) -> Result<f64> {
    if !(p >= 0.0) || !p.is_finite() {
        return Err(Error::Domain(format!("transmit power must be finite and >= 0, got {p}")));
    }
    let l = sensor.bits as f64;
    let s2 = sensor.sigma_w * sensor.sigma_w;
    Ok(match sensor.channel {
        Channel::Coherent { h_abs } | Channel::NoncoherentEnvelope { h_abs } => {
            p * h_abs * h_abs / (2.0 * l * s2)
        }
        Channel::NoncoherentStats { sigma_h } => p * sigma_h * sigma_h / (l * s2),
    })
}

/// Minimum sensor-to-source distance accepted by [`random_deployment`].
pub const MIN_SOURCE_SEPARATION: f64 = 1e-6;

/// Gains `a_k = [(d₀ᵢ/d_kᵢ)ⁿ]ᵢ` for `k` sensors drawn uniformly in the
/// square `[−w, w]²`, where `d₀ᵢ` is source `i`'s distance from the origin.
///
/// Positions within [`MIN_SOURCE_SEPARATION`] of a source are redrawn, at
/// most 1000 times per sensor.
pub fn random_deployment(
    field_half_width: f64,
    k: usize,
    source_positions: &[[f64; 2]],
    decay_exponent: f64,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    positive("field_half_width", field_half_width)?;
    if !decay_exponent.is_finite() {
        return Err(Error::Domain("decay exponent must be finite".into()));
    }
    if source_positions.is_empty() {
        return Err(Error::Deployment("no sources given".into()));
    }
    let d0: Vec<f64> = source_positions.iter().map(|s| s[0].hypot(s[1])).collect();
    if d0.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::Deployment("every source must lie away from the origin".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k);
    for idx in 0..k {
        let mut placed = None;
        for _ in 0..1000 {
            let x = rng.random_range(-field_half_width..field_half_width);
            let y = rng.random_range(-field_half_width..field_half_width);
            let pos = [x, y];
            if let Some(a) = gains_at(pos, source_positions, &d0, decay_exponent) {
                placed = Some(a);
                break;
            }
        }
        out.push(placed.ok_or_else(|| {
            Error::Deployment(format!("sensor {} kept landing on a source", idx + 1))
        })?);
    }
    Ok(out)
}

/// Attenuation gains of a sensor at `pos`, or `None` if it sits on a source.
pub fn gains_at(
    pos: [f64; 2],
    source_positions: &[[f64; 2]],
    d0: &[f64],
    decay_exponent: f64,
) -> Option<DVector<f64>> {
    let mut a = DVector::zeros(source_positions.len());
    for (i, src) in source_positions.iter().enumerate() {
        let d = (pos[0] - src[0]).hypot(pos[1] - src[1]);
        if d < MIN_SOURCE_SEPARATION {
            return None;
        }
        a[i] = (d0[i] / d).powf(decay_exponent);
    }
    Some(a)
}

/// Ready-made networks used by the tests, the acceptance suite and the CLI
/// examples. All share `C_θ = [4, 0.5; 0.5, 0.25]` and `σ_w = 1`.
pub mod scenarios {
    use super::*;

    pub fn reference_cov() -> SpdMatrix {
        SpdMatrix::from_row_slice(2, &[4.0, 0.5, 0.5, 0.25]).expect("constant SPD matrix")
    }

    pub fn reference_prior() -> GaussianPrior {
        GaussianPrior::zero_mean(reference_cov())
    }

    pub fn reference_gain() -> DVector<f64> {
        DVector::from_vec(vec![0.6, 0.8])
    }

    fn channel_for(receiver: Receiver, mean_sq_gain: f64) -> Channel {
        Channel::Coherent {
            h_abs: mean_sq_gain.sqrt(),
        }
        .with_receiver(receiver)
    }

    /// Two identical sensors: `a = [0.6, 0.8]`, `σ_n = σ_w = 1`, `|h| = 0.5`,
    /// 3 bits. The statistics receiver gets `σ_h² = |h|²/2`.
    pub fn reference_pair(receiver: Receiver, p_tot: f64) -> NetworkModel {
        let s = SensorSpec::new(reference_gain(), 1.0, 3, channel_for(receiver, 0.25), 1.0)
            .expect("valid sensor");
        NetworkModel::new(reference_prior(), vec![s.clone(), s], p_tot).expect("valid network")
    }

    /// Sensors with identical observations and channel qualities
    /// `δ = (2 dB, 14 dB)`. For the statistics receiver the same numbers
    /// are used as `δ̄`.
    pub fn unequal_channels(receiver: Receiver, p_tot: f64) -> NetworkModel {
        let deltas = [10f64.powf(0.2), 10f64.powf(1.4)];
        let sensors = deltas
            .iter()
            .map(|&d| {
                SensorSpec::new(reference_gain(), 1.0, 3, channel_for(receiver, 2.0 * d), 1.0)
                    .expect("valid sensor")
            })
            .collect();
        NetworkModel::new(reference_prior(), sensors, p_tot).expect("valid network")
    }

    /// Sensors with `σ_n = (4, 0.5)` and equal channel quality 4 dB.
    pub fn unequal_noise(receiver: Receiver, p_tot: f64) -> NetworkModel {
        let d = 10f64.powf(0.4);
        let sensors = [4.0, 0.5]
            .iter()
            .map(|&sn| {
                SensorSpec::new(reference_gain(), sn, 3, channel_for(receiver, 2.0 * d), 1.0)
                    .expect("valid sensor")
            })
            .collect();
        NetworkModel::new(reference_prior(), sensors, p_tot).expect("valid network")
    }

    /// Three coherent sensors with linear channel qualities `δ = (14, 8, 2)`.
    pub fn quality_ladder(p_tot: f64) -> NetworkModel {
        let sensors = [14.0, 8.0, 2.0]
            .iter()
            .map(|&d| {
                SensorSpec::new(
                    reference_gain(),
                    1.0,
                    3,
                    Channel::Coherent {
                        h_abs: h_abs_from_delta(d, 1.0),
                    },
                    1.0,
                )
                .expect("valid sensor")
            })
            .collect();
        NetworkModel::new(reference_prior(), sensors, p_tot).expect("valid network")
    }

    /// Default source positions, both at distance 1 m from the origin.
    pub const SOURCES: [[f64; 2]; 2] = [[1.0, 0.0], [0.0, 1.0]];

    /// `k` sensors in a 2 m × 2 m field, decay exponent 2, `σ_n = 1`,
    /// 3 bits, `|h| = 1` (or `σ_h = 1` for the statistics receiver).
    pub fn random_field(receiver: Receiver, k: usize, p_tot: f64, seed: u64) -> Result<NetworkModel> {
        let gains = random_deployment(1.0, k, &SOURCES, 2.0, seed)?;
        let channel = match receiver {
            Receiver::Coherent => Channel::Coherent { h_abs: 1.0 },
            Receiver::Envelope => Channel::NoncoherentEnvelope { h_abs: 1.0 },
            Receiver::Stats => Channel::NoncoherentStats { sigma_h: 1.0 },
        };
        let sensors = gains
            .into_iter()
            .map(|a| SensorSpec::new(a, 1.0, 3, channel, 1.0))
            .collect::<Result<Vec<_>>>()?;
        NetworkModel::new(reference_prior(), sensors, p_tot)
    }
}

#[cfg(test)]
mod tests {
    use super::scenarios::*;
    use super::*;
    use proptest::prelude::*;

    fn coherent(h: f64) -> SensorSpec {
        SensorSpec::new(reference_gain(), 1.0, 3, Channel::Coherent { h_abs: h }, 1.0).unwrap()
    }

    #[test]
    fn snr_examples() {
        assert_eq!(snr(&coherent(0.5), 0.0).unwrap(), 0.0);
        assert!((snr(&coherent(0.5), 24.0).unwrap() - 1.0).abs() < 1e-15);
        let stats = SensorSpec::new(
            reference_gain(),
            1.0,
            3,
            Channel::NoncoherentStats { sigma_h: 1.0 },
            1.0,
        )
        .unwrap();
        assert!((snr(&stats, 3.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(snr(&stats, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn quality_scalars() {
        let q = coherent(0.5).quality();
        assert_eq!(q.delta, Some(0.125));
        assert!((h_abs_from_delta(14.0, 1.0).powi(2) / 2.0 - 14.0).abs() < 1e-12);
        let n = unequal_channels(Receiver::Stats, 1.0);
        let db = 10.0 * n.sensors[1].quality().delta_bar.unwrap().log10();
        assert!((db - 14.0).abs() < 1e-12);
    }

    #[test]
    fn receiver_mapping_preserves_mean_gain() {
        let c = Channel::Coherent { h_abs: 0.5 };
        match c.with_receiver(Receiver::Stats) {
            Channel::NoncoherentStats { sigma_h } => {
                assert!((2.0 * sigma_h * sigma_h - 0.25).abs() < 1e-15)
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            c.with_receiver(Receiver::Stats).with_receiver(Receiver::Coherent),
            Channel::Coherent { h_abs: 0.5 }
        );
    }

    #[test]
    fn validation_errors() {
        assert!(NetworkModel::new(reference_prior(), vec![], 1.0).is_err());
        let bad = SensorSpec::new(DVector::from_vec(vec![1.0]), 1.0, 3, Channel::Coherent { h_abs: 1.0 }, 1.0)
            .unwrap();
        assert!(matches!(
            NetworkModel::new(reference_prior(), vec![bad], 1.0),
            Err(Error::Dimension(_))
        ));
        assert!(SensorSpec::new(reference_gain(), 0.0, 3, Channel::Coherent { h_abs: 1.0 }, 1.0).is_err());
        assert!(SensorSpec::new(reference_gain(), 1.0, 0, Channel::Coherent { h_abs: 1.0 }, 1.0).is_err());
    }

    #[test]
    fn deployment_examples() {
        let d0 = [1.0, 1.0];
        let a = gains_at([0.0, 0.0], &SOURCES, &d0, 2.0).unwrap();
        assert_eq!(a.as_slice(), &[1.0, 1.0]);
        // A sensor at distance d₀ from each source gets unit gains.
        let a = gains_at([1.0, 1.0], &SOURCES, &d0, 2.0).unwrap();
        assert_eq!(a.as_slice(), &[1.0, 1.0]);
        assert!(gains_at([1.0, 0.0], &SOURCES, &d0, 2.0).is_none());

        let g1 = random_deployment(1.0, 20, &SOURCES, 2.0, 42).unwrap();
        let g2 = random_deployment(1.0, 20, &SOURCES, 2.0, 42).unwrap();
        assert_eq!(g1, g2);
        assert!(g1.iter().flat_map(|a| a.iter()).all(|v| *v > 0.0));
        assert_ne!(g1, random_deployment(1.0, 20, &SOURCES, 2.0, 43).unwrap());
        assert!(random_deployment(1.0, 3, &[[0.0, 0.0]], 2.0, 1).is_err());
    }

    #[test]
    fn toml_round_trip_of_scenarios() {
        for r in Receiver::ALL {
            let n = unequal_noise(r, 3.7);
            let text = n.to_toml();
            assert_eq!(NetworkModel::from_toml(&text).unwrap(), n, "{text}");
        }
        let mut n = reference_pair(Receiver::Coherent, 1.0);
        n.prior.mean = DVector::from_vec(vec![0.3, -1.25]);
        assert_eq!(NetworkModel::from_toml(&n.to_toml()).unwrap(), n);
    }

    #[test]
    fn toml_rejects_empty_sensor_list() {
        let text = "p_tot = 1.0\nsensors = []\n[prior]\ncov = [[1.0]]\n";
        let err = NetworkModel::from_toml(text).unwrap_err().to_string();
        assert!(err.contains("at least one sensor"), "{err}");
    }

    proptest! {
        #[test]
        fn snr_homogeneity(p in 0.0f64..1e4, h in 0.0f64..10.0, c in 0.0f64..10.0) {
            let s = coherent(h);
            let base = snr(&s, p).unwrap();
            prop_assert!((snr(&s, c * p).unwrap() - c * base).abs() <= 1e-12 * (1.0 + c * base));
            let s2 = coherent(c * h);
            prop_assert!((snr(&s2, p).unwrap() - c * c * base).abs() <= 1e-12 * (1.0 + c * c * base));
        }

        #[test]
        fn toml_round_trip_is_bit_exact(
            p_tot in 1e-9f64..1e9,
            a0 in -1e3f64..1e3, a1 in -1e3f64..1e3,
            sn in 1e-6f64..1e3, sw in 1e-6f64..1e3, h in 0.0f64..1e3,
            m0 in -1e3f64..1e3,
            c11 in 0.1f64..10.0, c22 in 0.1f64..10.0, rho in -0.9f64..0.9,
            bits in 1u32..8,
        ) {
            let c12 = rho * (c11 * c22).sqrt();
            let cov = SpdMatrix::from_row_slice(2, &[c11, c12, c12, c22]).unwrap();
            let prior = GaussianPrior::new(DVector::from_vec(vec![m0, 0.0]), cov).unwrap();
            let s1 = SensorSpec::new(DVector::from_vec(vec![a0, a1]), sn, bits,
                Channel::NoncoherentEnvelope { h_abs: h }, sw).unwrap();
            let s2 = SensorSpec::new(DVector::from_vec(vec![a1, a0]), sw, bits,
                Channel::NoncoherentStats { sigma_h: sn }, sn).unwrap();
            let n = NetworkModel::new(prior, vec![s1, s2], p_tot).unwrap();
            let back = NetworkModel::from_toml(&n.to_toml()).unwrap();
            prop_assert_eq!(back, n);
        }
    }
}
