//! Scenario files. The schema is described in `CONFIG.md` next to this crate.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use smallgain::apps::{ConsensusSpec, ObserverSpec};
use smallgain::certify::DEFAULT_ENVELOPE_TOL;
use smallgain::gainop::{DEFAULT_BRACKET_TOL, DEFAULT_SCHEDULE};
use smallgain::netsim::DEFAULT_DT;
use smallgain::{Exponent, GainSpec, InputSignal, NetworkSpec, TruncSeq};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub run: RunConfig,
    /// Gains analysed on their own, without dynamics.
    #[serde(default)]
    pub gain: Option<GainSpec>,
    #[serde(default)]
    pub network: Option<NetworkSpec>,
    #[serde(default)]
    pub initial: InitialState,
    #[serde(default)]
    pub input: InputSignal,
    #[serde(default)]
    pub envelope: Option<EnvelopeOverride>,
    #[serde(default)]
    pub consensus: Option<ConsensusConfig>,
    #[serde(default)]
    pub observer: Option<ObserverConfig>,
    #[serde(default)]
    pub timevarying: Option<TimeVaryingConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub blocks: usize,
    pub dt: f64,
    pub horizon: f64,
    pub schedule: Vec<usize>,
    pub bracket_tol: f64,
    /// Slack of the weight construction; `1e-3 * lambda_lo` when absent.
    pub rho: Option<f64>,
    /// Dini-derivative tolerance; automatic when absent.
    pub dissipation_tol: Option<f64>,
    pub envelope_tol: f64,
    pub seed: u64,
    /// Exponents used with a bare `[gain]` section.
    pub p: f64,
    pub q: f64,
    /// Blocks whose local dissipation inequality is checked.
    pub check_blocks: Option<Vec<usize>>,
    /// Every `stride`-th sample goes to the trajectory CSV.
    pub stride: usize,
    /// Compare with a `probe_factor`-times longer truncation when set.
    pub probe_factor: Option<usize>,
    /// Radius and sample count of the Lipschitz sampling check.
    pub lipschitz_radius: f64,
    pub lipschitz_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            blocks: 64,
            dt: DEFAULT_DT,
            horizon: 10.0,
            schedule: DEFAULT_SCHEDULE.to_vec(),
            bracket_tol: DEFAULT_BRACKET_TOL,
            rho: None,
            dissipation_tol: None,
            envelope_tol: DEFAULT_ENVELOPE_TOL,
            seed: 0,
            p: 2.0,
            q: 2.0,
            check_blocks: None,
            stride: 100,
            probe_factor: None,
            lipschitz_radius: 2.0,
            lipschitz_samples: 200,
        }
    }
}

/// Initial state of the truncated network.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    #[default]
    Zero,
    /// Explicit leading blocks; the rest is zero.
    Blocks { values: Vec<Vec<f64>> },
    /// Every coordinate of the first `count` blocks equals `value`.
    Unit {
        #[serde(default = "one")]
        value: f64,
        count: usize,
    },
    /// Uniform on `[-amplitude, amplitude]` in the first `count` blocks (all blocks when absent).
    Random {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        count: Option<usize>,
    },
}

fn one() -> f64 {
    1.0
}

impl InitialState {
    pub fn build(&self, dims: &[usize], p: Exponent, seed: u64) -> Result<TruncSeq, CliError> {
        let blocks: Vec<Vec<f64>> = match self {
            InitialState::Zero => dims.iter().map(|&d| vec![0.0; d]).collect(),
            InitialState::Blocks { values } => {
                if values.len() > dims.len() {
                    return Err(CliError::Config(format!(
                        "initial state lists {} blocks, truncation has {}",
                        values.len(),
                        dims.len()
                    )));
                }
                values.clone()
            }
            InitialState::Unit { value, count } => dims.iter().take(*count).map(|&d| vec![*value; d]).collect(),
            InitialState::Random { amplitude, count } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = count.unwrap_or(dims.len()).min(dims.len());
                dims[..n]
                    .iter()
                    .map(|&d| (0..d).map(|_| rng.gen_range(-*amplitude..=*amplitude)).collect())
                    .collect()
            }
        };
        Ok(TruncSeq::from_blocks(blocks, p))
    }
}

/// User-supplied envelope constants replacing the certificate's `(M, a)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeOverride {
    pub overshoot: f64,
    pub decay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusConfig {
    pub spec: ConsensusSpec,
    /// Positions drawn uniformly from `[-spread, spread]`.
    #[serde(default = "one")]
    pub spread: f64,
    /// Rows per time sample in `consensus.csv`.
    #[serde(default = "default_modes")]
    pub modes: usize,
    /// Bound on `|x_a(t) - x_a(0)|` for the `f = 0` variant.
    #[serde(default = "default_drift_tol")]
    pub drift_tol: f64,
    /// Bound on the gap between original and error coordinates.
    #[serde(default = "default_coord_tol")]
    pub coordinate_tol: f64,
}

fn default_modes() -> usize {
    10
}

fn default_drift_tol() -> f64 {
    1e-10
}

fn default_coord_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserverConfig {
    pub spec: ObserverSpec,
    #[serde(default = "one")]
    pub spread: f64,
    /// Start the observer at the plant state.
    #[serde(default)]
    pub exact_start: bool,
    #[serde(default = "default_sandwich_samples")]
    pub sandwich_samples: usize,
}

fn default_sandwich_samples() -> usize {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeVaryingConfig {
    pub t0_samples: Vec<f64>,
    /// Number of random base initial states.
    #[serde(default = "default_z0_count")]
    pub z0_count: usize,
    #[serde(default = "one")]
    pub spread: f64,
    #[serde(default = "default_clock_rate")]
    pub lambda0: f64,
}

fn default_z0_count() -> usize {
    3
}

fn default_clock_rate() -> f64 {
    smallgain::apps::DEFAULT_CLOCK_RATE
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    fn check(&self) -> Result<(), CliError> {
        let r = &self.run;
        if !(r.dt > 0.0) || !(r.horizon >= 0.0) {
            return Err(CliError::Config(format!("need dt > 0 and horizon >= 0 (dt = {}, horizon = {})", r.dt, r.horizon)));
        }
        if r.blocks == 0 {
            return Err(CliError::Config("blocks must be positive".into()));
        }
        if r.schedule.is_empty() || r.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::Config("schedule must be a nonempty increasing list".into()));
        }
        if r.stride == 0 {
            return Err(CliError::Config("stride must be positive".into()));
        }
        if let Some(rho) = r.rho {
            if !(rho > 0.0) {
                return Err(CliError::Config("rho must be positive".into()));
            }
        }
        if let Some(e) = &self.envelope {
            if !(e.overshoot >= 1.0) || !(e.decay > 0.0) {
                return Err(CliError::Config("envelope needs overshoot >= 1 and decay > 0".into()));
            }
        }
        Exponent::new(r.p)?;
        Exponent::new(r.q)?;
        Ok(())
    }

    pub fn network(&self) -> Result<&NetworkSpec, CliError> {
        self.network.as_ref().ok_or_else(|| CliError::Config("missing [network] section".into()))
    }
}
