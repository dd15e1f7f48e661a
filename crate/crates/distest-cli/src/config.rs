//! Experiment configuration: TOML on disk, resolved into one value whose
//! serialization is hashed into every output file.

use std::path::{Path, PathBuf};

use distest::mcsim::Fidelity;
use distest::model::{NetworkModel, Receiver};
use distest::powalloc::{Scheme, SolverOptions};
use distest::quantizer::QuantizerKind;
use distest::wwb::DEFAULT_SCALES;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::AppError;

/// The file as written. Exactly one of `network_file` and `network` must
/// be present.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    /// Relative paths resolve against the config file's directory.
    network_file: Option<PathBuf>,
    network: Option<NetworkModel>,
    #[serde(default = "default_quantizers")]
    quantizers: Vec<QuantizerKind>,
    receiver: Option<Receiver>,
    /// Defaults to the network's own `p_tot`.
    p_tot_db: Option<Vec<f64>>,
    seed: Option<u64>,
    #[serde(default)]
    solver: SolverOptions,
    #[serde(default)]
    bounds: BoundsOptions,
    #[serde(default)]
    allocate: AllocateOptions,
    #[serde(default)]
    simulate: SimulateOptions,
}

fn default_quantizers() -> Vec<QuantizerKind> {
    vec![QuantizerKind::Uniform]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsOptions {
    /// Test-point scales relative to the prior covariance.
    pub scales: Vec<f64>,
}

impl Default for BoundsOptions {
    fn default() -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocateOptions {
    pub schemes: Vec<Scheme>,
}

impl Default for AllocateOptions {
    fn default() -> Self {
        Self {
            schemes: vec![Scheme::TrFim, Scheme::LogdetFim, Scheme::MseMin, Scheme::Uniform],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOptions {
    pub trials: usize,
    pub fidelity: Fidelity,
    /// One row per seed; defaults to the top-level seed. A seed given on
    /// the command line replaces the list.
    pub seeds: Option<Vec<u64>>,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self {
            trials: 100_000,
            fidelity: Fidelity::PhysicalLayer,
            seeds: None,
        }
    }
}

/// Everything a command needs, with defaults filled in, the receiver
/// override applied and the seed propagated.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub network: NetworkModel,
    pub quantizers: Vec<QuantizerKind>,
    pub p_tot_db: Vec<f64>,
    pub seed: u64,
    pub solver: SolverOptions,
    pub bounds: BoundsOptions,
    pub allocate: AllocateOptions,
    pub simulate: SimulateOptions,
}

fn config_err(path: &Path, msg: impl std::fmt::Display) -> AppError {
    AppError::Config(format!("{}: {msg}", path.display()))
}

impl ExperimentConfig {
    /// Reads and validates `path`; `seed` overrides every seed in the file.
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, AppError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, seed).map_err(|e| match e {
            AppError::Config(m) => config_err(path, m),
            other => other,
        })
    }

    pub fn parse(text: &str, base: &Path, cli_seed: Option<u64>) -> Result<Self, AppError> {
        let file: ExperimentFile = toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        let mut network = match (file.network_file, file.network) {
            (Some(p), None) => {
                let p = base.join(p);
                let t = std::fs::read_to_string(&p).map_err(|e| config_err(&p, e))?;
                NetworkModel::from_toml(&t).map_err(|e| config_err(&p, e))?
            }
            (None, Some(n)) => n,
            (Some(_), Some(_)) => return Err(AppError::Config("give either network_file or [network], not both".into())),
            (None, None) => return Err(AppError::Config("missing network_file or [network]".into())),
        };
        if let Some(r) = file.receiver {
            network = network.with_receiver(r);
        }
        let p_tot_db = file.p_tot_db.unwrap_or_else(|| vec![10.0 * network.p_tot.log10()]);
        if p_tot_db.is_empty() {
            return Err(AppError::Config("p_tot_db is empty".into()));
        }
        if p_tot_db.iter().any(|v| !v.is_finite()) || p_tot_db.windows(2).any(|w| w[1] <= w[0]) {
            return Err(AppError::Config(format!(
                "p_tot_db must be finite and strictly increasing, got {p_tot_db:?}"
            )));
        }
        if file.quantizers.is_empty() {
            return Err(AppError::Config("quantizers is empty".into()));
        }
        if file.allocate.schemes.is_empty() {
            return Err(AppError::Config("allocate.schemes is empty".into()));
        }
        if file.bounds.scales.is_empty() || file.bounds.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(AppError::Config("bounds.scales must be nonempty and positive".into()));
        }
        if file.simulate.trials == 0 {
            return Err(AppError::Config("simulate.trials must be at least 1".into()));
        }
        let seed = cli_seed.or(file.seed).unwrap_or(file.solver.seed);
        let mut solver = file.solver;
        solver.seed = seed;
        let mut simulate = file.simulate;
        match (cli_seed, &simulate.seeds) {
            (None, Some(s)) if s.is_empty() => return Err(AppError::Config("simulate.seeds is empty".into())),
            (None, Some(_)) => {}
            _ => simulate.seeds = Some(vec![seed]),
        }
        Ok(Self {
            network,
            quantizers: file.quantizers,
            p_tot_db,
            seed,
            solver,
            bounds: file.bounds,
            allocate: file.allocate,
            simulate,
        })
    }

    pub fn simulation_seeds(&self) -> &[u64] {
        self.simulate.seeds.as_deref().unwrap_or_default()
    }

    /// SHA-256 of the resolved configuration's TOML form, hex encoded.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("resolved config always serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `10^(dB/10)`.
pub fn from_db(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}
