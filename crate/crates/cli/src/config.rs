//! Experiment configuration: one JSON document drives every subcommand.

use jumplab_core::conductivity::{Coefficient, FieldSpec, IsotropicParams};
use jumplab_core::convergence::{Reference, TightnessConfig};
use jumplab_core::forms::{ContinuumConfig, CubeChainConfig};
use jumplab_core::heatkernel::{Boundary, DiagnosticsConfig};
use jumplab_core::kernel::KernelSpec;
use jumplab_core::validators::{ChainRouter, N0Policy, DEFAULT_NODE_CAP};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub field: FieldSpec,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Record wall-clock times; off by default so reruns are byte-identical.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub build: BuildParams,
    #[serde(default)]
    pub validate: ValidateParams,
    #[serde(default)]
    pub simulate: SimulateParams,
    #[serde(default)]
    pub heatkernel: HeatKernelParams,
    #[serde(default)]
    pub forms: FormsParams,
    #[serde(default)]
    pub clt: CltParams,
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub max_paths: usize,
    pub node_cap: usize,
    /// Nonzeros allowed in a generator matrix.
    pub entry_cap: usize,
    /// Grid points allowed in a heat-kernel window.
    pub max_window_points: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_paths: 10_000_000, node_cap: DEFAULT_NODE_CAP, entry_cap: 50_000_000, max_window_points: 100_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildParams {
    /// Offsets `h` with `|h|_∞ ≤ radius` (lattice steps) are tabulated.
    pub radius: i64,
    /// Base point in integer coordinates; the origin when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub origin: Option<Vec<i64>>,
}

impl Default for BuildParams {
    fn default() -> Self {
        BuildParams { radius: 4, origin: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityParams {
    /// Integer coordinates; the origin when empty.
    pub centers: Vec<Vec<i64>>,
    pub radii: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa3: Option<f64>,
    pub threshold: f64,
}

impl Default for DensityParams {
    fn default() -> Self {
        DensityParams { centers: Vec::new(), radii: vec![10.0], kappa3: None, threshold: 5.0 / 6.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateParams {
    /// Window corners in integer coordinates; `[-3, 3]^d` when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa2: Option<f64>,
    /// Fixed `N₀ = 4` by default; `{"certify": {"max_length": L}}` derives it
    /// from the window instead, which can only fail on missing chains.
    pub n0: N0Policy,
    pub router: ChainRouter,
    /// `null` skips the density check.
    pub density: Option<DensityParams>,
}

impl Default for ValidateParams {
    fn default() -> Self {
        ValidateParams {
            lo: None,
            hi: None,
            kappa1: None,
            kappa2: None,
            n0: N0Policy::Given(4),
            router: ChainRouter::Search { radius_factor: None },
            density: Some(DensityParams::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitParams {
    /// `R` in `B(x, aR)` and `γR^α`.
    pub radius: f64,
    pub gamma: f64,
    #[serde(default = "unit")]
    pub a: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateParams {
    pub paths: usize,
    pub t_max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Real coordinates of the start, rounded to the grid; the origin when empty.
    pub x0: Vec<f64>,
    /// Lattice scale; the chain runs on `ℤ^d/ρ` with rates `C^ρ`.
    pub rho: f64,
    /// Displacement threshold for the `P(|Y_t − x0| > r)` statistic.
    pub displacement_radius: f64,
    pub write_paths: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit: Option<ExitParams>,
}

impl Default for SimulateParams {
    fn default() -> Self {
        SimulateParams {
            paths: 10_000,
            t_max: 1.0,
            lambda: None,
            x0: Vec::new(),
            rho: 1.0,
            displacement_radius: 1.0,
            write_paths: false,
            exit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatKernelParams {
    pub rho: f64,
    /// Euclidean radius of the window, in real units.
    pub window: f64,
    pub times: Vec<f64>,
    /// Real coordinates of the source; the origin when empty.
    pub source: Vec<f64>,
    pub boundary: Boundary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Runs the scale diagnostics on top of the single column.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsConfig>,
}

impl Default for HeatKernelParams {
    fn default() -> Self {
        HeatKernelParams {
            rho: 1.0,
            window: 8.0,
            times: vec![0.1, 0.5, 1.0],
            source: Vec::new(),
            boundary: Boundary::Killed,
            lambda: None,
            diagnostics: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FormsMode {
    Discrete,
    Compare,
    Continuum,
    CubeChain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormsParams {
    pub mode: FormsMode,
    /// Number of test functions.
    pub functions: usize,
    /// Support radius (lattice steps) of random grid functions.
    pub support: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Chain window for `compare`, integer coordinates; `[-12, 12]^d` when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain_lo: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain_hi: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa2: Option<f64>,
    pub n0: N0Policy,
    pub router: ChainRouter,
    /// Continuum kernel; derived from the field when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSpec>,
    pub continuum: ContinuumConfig,
    pub cube_chain: CubeChainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
    pub tolerance: f64,
}

impl Default for FormsParams {
    fn default() -> Self {
        FormsParams {
            mode: FormsMode::Discrete,
            functions: 10,
            support: 4,
            lambda: None,
            chain_lo: None,
            chain_hi: None,
            kappa2: None,
            n0: N0Policy::Certify { max_length: 4 },
            router: ChainRouter::Search { radius_factor: None },
            kernel: None,
            continuum: ContinuumConfig::default(),
            cube_chain: CubeChainConfig::default(),
            lambda1: None,
            tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CltParams {
    pub n_list: Vec<f64>,
    pub t: f64,
    /// Real coordinates; the origin when empty.
    pub x0: Vec<f64>,
    pub reference: Reference,
    pub paths: usize,
    pub cf_radius: f64,
    pub cf_points: usize,
    /// Limit kernel for the Lévy symbol; derived from the field when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tightness: Option<TightnessConfig>,
}

impl Default for CltParams {
    fn default() -> Self {
        let c = jumplab_core::convergence::CltConfig::default();
        CltParams {
            n_list: c.n_list,
            t: c.t,
            x0: Vec::new(),
            reference: c.reference,
            paths: c.paths,
            cf_radius: c.cf_radius,
            cf_points: c.cf_points,
            kernel: None,
            tightness: None,
        }
    }
}

impl ExperimentConfig {
    /// Parse with line/column diagnostics.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| {
            CliError::Config(format!("line {} column {}: {e}", e.line(), e.column()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The continuum kernel matching the field, when there is one.
    pub fn limit_kernel(&self) -> Option<KernelSpec> {
        match &self.field {
            FieldSpec::IsotropicStable { d, alpha, params: IsotropicParams { coefficient }, .. } => {
                let coefficient = match coefficient {
                    Coefficient::Number(c) => *c,
                    named => named.resolve(*d, *alpha).ok()?,
                };
                Some(KernelSpec::Isotropic { d: *d, alpha: *alpha, coefficient })
            }
            FieldSpec::DoubleCone { alpha, params, .. } => {
                Some(KernelSpec::Cone { gamma: params.gamma, alpha: *alpha, coefficient: 1.0 })
            }
            FieldSpec::AxesCounterexample { d, alpha, .. } => Some(KernelSpec::Axes { d: *d, alpha: *alpha }),
            FieldSpec::Table { .. } => None,
            FieldSpec::KernelCells { kernel, .. } => Some(kernel.clone()),
        }
    }

    /// Canonical bytes, hashed into every artifact.
    pub fn canonical_json(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s.into_bytes()
    }
}
