//! Declarative experiment configuration (JSON, `"schema": 1`).

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use savflow_core::adaptive::{AdaptiveConfig, ErrorNorm};
use savflow_core::models::{gl_model, mbe_model, npfc_model, ModelSpec};
use savflow_core::multicomponent::{QTensorModel, QTensorParams};
use savflow_core::oracles::SsiParams;
use savflow_core::sav::{Bootstrap, Scheme};
use savflow_core::spectral::{Grid, KernelSpec};
use savflow_core::SavError;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// A validation failure located by its dotted field path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.reason)
        } else {
            write!(f, "{}: {}", self.path, self.reason)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Convergence,
    RadiusBenchmark,
    Coarsening,
    NpfcCompare,
    BdfOrder,
    Adaptive,
    Mbe,
    Qtensor,
}

impl ExperimentKind {
    pub fn label(self) -> &'static str {
        match self {
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::RadiusBenchmark => "radius-benchmark",
            ExperimentKind::Coarsening => "coarsening",
            ExperimentKind::NpfcCompare => "npfc-compare",
            ExperimentKind::BdfOrder => "bdf-order",
            ExperimentKind::Adaptive => "adaptive",
            ExperimentKind::Mbe => "mbe",
            ExperimentKind::Qtensor => "qtensor",
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GinzburgLandauParams {
    pub eps: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default)]
    pub shift: Option<f64>,
    #[serde(default)]
    pub dealias: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FractionalParams {
    pub eps: f64,
    pub s: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default)]
    pub shift: Option<f64>,
    #[serde(default)]
    pub dealias: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NpfcParams {
    pub eps: f64,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_c2")]
    pub c2: f64,
    #[serde(default = "default_alpha1")]
    pub alpha1: f64,
    #[serde(default)]
    pub alpha2: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub shift: Option<f64>,
}

fn default_c1() -> f64 {
    KernelSpec::default().c1
}
fn default_c2() -> f64 {
    KernelSpec::default().c2
}
fn default_alpha1() -> f64 {
    KernelSpec::default().alpha1
}
fn default_delta() -> f64 {
    KernelSpec::default().delta
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MbeParams {
    pub eta2: f64,
    pub alpha: f64,
    #[serde(default = "one")]
    pub mobility: f64,
    #[serde(default = "one")]
    pub c0: f64,
    #[serde(default)]
    pub shift: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QTensorConfigParams {
    #[serde(default = "qt_a")]
    pub a: f64,
    #[serde(default = "one")]
    pub b: f64,
    #[serde(default = "one")]
    pub c: f64,
    /// Defaults to `a + 1`.
    #[serde(default)]
    pub a1: Option<f64>,
    #[serde(default = "one")]
    pub c0: f64,
    #[serde(default = "one")]
    pub l1: f64,
    #[serde(default = "qt_l")]
    pub l2: f64,
    #[serde(default = "qt_l")]
    pub l3: f64,
    #[serde(default)]
    pub shift: Option<f64>,
}

fn qt_a() -> f64 {
    QTensorParams::default().a
}
fn qt_l() -> f64 {
    QTensorParams::default().l2
}

impl QTensorConfigParams {
    pub fn to_params(&self) -> QTensorParams {
        QTensorParams {
            a: self.a,
            b: self.b,
            c: self.c,
            a1: self.a1.unwrap_or(self.a + 1.0),
            c0: self.c0,
            l1: self.l1,
            l2: self.l2,
            l3: self.l3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelBlock {
    AllenCahn(GinzburgLandauParams),
    CahnHilliard(GinzburgLandauParams),
    FractionalCahnHilliard(FractionalParams),
    Npfc(NpfcParams),
    Mbe(MbeParams),
    Qtensor(QTensorConfigParams),
}

impl ModelBlock {
    pub fn name(&self) -> &'static str {
        match self {
            ModelBlock::AllenCahn(_) => "allen-cahn",
            ModelBlock::CahnHilliard(_) => "cahn-hilliard",
            ModelBlock::FractionalCahnHilliard(_) => "fractional-cahn-hilliard",
            ModelBlock::Npfc(_) => "npfc",
            ModelBlock::Mbe(_) => "mbe",
            ModelBlock::Qtensor(_) => "qtensor",
        }
    }

    /// Builds a scalar model; `s` overrides the fractional exponent when given.
    pub fn build_scalar(&self, grid: &Arc<Grid>, s_override: Option<f64>) -> Result<ModelSpec, ConfigError> {
        let (model, shift) = match self {
            ModelBlock::AllenCahn(p) => (
                gl_model(grid, p.eps, p.beta, s_override.unwrap_or(0.0), p.gamma)
                    .map(|m| m.with_dealias(p.dealias)),
                p.shift,
            ),
            ModelBlock::CahnHilliard(p) => (
                gl_model(grid, p.eps, p.beta, s_override.unwrap_or(1.0), p.gamma)
                    .map(|m| m.with_dealias(p.dealias)),
                p.shift,
            ),
            ModelBlock::FractionalCahnHilliard(p) => (
                gl_model(grid, p.eps, p.beta, s_override.unwrap_or(p.s), p.gamma)
                    .map(|m| m.with_dealias(p.dealias)),
                p.shift,
            ),
            ModelBlock::Npfc(p) => {
                let kernel = KernelSpec {
                    c1: p.c1,
                    c2: p.c2,
                    alpha1: p.alpha1,
                    alpha2: p.alpha2,
                    delta: p.delta,
                };
                (npfc_model(grid, p.eps, &kernel), p.shift)
            }
            ModelBlock::Mbe(p) => (mbe_model(grid, p.eta2, p.alpha, p.mobility, p.c0), p.shift),
            ModelBlock::Qtensor(_) => {
                return Err(ConfigError::new("model.name", "qtensor is not a scalar model"))
            }
        };
        let model = model.map_err(|e| core_error("model.params", e))?;
        match shift {
            Some(d) => model.with_shift(d).map_err(|e| core_error("model.params", e)),
            None => Ok(model),
        }
    }

    pub fn build_qtensor(&self, grid: &Arc<Grid>) -> Result<QTensorModel, ConfigError> {
        let ModelBlock::Qtensor(p) = self else {
            return Err(ConfigError::new("model.name", "expected qtensor"));
        };
        let model =
            QTensorModel::new(grid, p.to_params()).map_err(|e| core_error("model.params", e))?;
        match p.shift {
            Some(d) => model.with_shift(d).map_err(|e| core_error("model.params", e)),
            None => Ok(model),
        }
    }
}

/// Maps a core error onto a field path under `prefix`.
pub fn core_error(prefix: &str, e: SavError) -> ConfigError {
    match e {
        SavError::InvalidParameter { name, reason } => {
            ConfigError::new(format!("{prefix}.{name}"), reason)
        }
        other => ConfigError::new(prefix, other.to_string()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BootstrapChoice {
    #[default]
    Extrapolated,
    Ladder,
}

impl From<BootstrapChoice> for Bootstrap {
    fn from(b: BootstrapChoice) -> Self {
        match b {
            BootstrapChoice::Extrapolated => Bootstrap::Extrapolated,
            BootstrapChoice::Ladder => Bootstrap::Ladder,
        }
    }
}

fn default_scheme() -> String {
    "cn".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeBlock {
    #[serde(default = "default_scheme")]
    pub name: String,
    #[serde(default)]
    pub bootstrap: BootstrapChoice,
}

impl Default for SchemeBlock {
    fn default() -> Self {
        SchemeBlock {
            name: default_scheme(),
            bootstrap: BootstrapChoice::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub points: Vec<usize>,
    /// Box side lengths; `2π` per axis when omitted.
    #[serde(default)]
    pub lengths: Option<Vec<f64>>,
}

impl GridBlock {
    pub fn build(&self) -> Result<Arc<Grid>, ConfigError> {
        let lengths = match &self.lengths {
            Some(l) => l.clone(),
            None => vec![2.0 * PI; self.points.len()],
        };
        Grid::new(&self.points, &lengths).map_err(|e| ConfigError::new("grid", e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormChoice {
    #[default]
    L2,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveBlock {
    #[serde(default = "ad_rho")]
    pub rho: f64,
    #[serde(default = "ad_tol")]
    pub tol: f64,
    #[serde(default = "ad_tau_min")]
    pub tau_min: f64,
    #[serde(default = "ad_tau_max")]
    pub tau_max: f64,
    #[serde(default)]
    pub norm: NormChoice,
}

fn ad_rho() -> f64 {
    AdaptiveConfig::default().rho
}
fn ad_tol() -> f64 {
    AdaptiveConfig::default().tol
}
fn ad_tau_min() -> f64 {
    AdaptiveConfig::default().tau_min
}
fn ad_tau_max() -> f64 {
    AdaptiveConfig::default().tau_max
}

impl AdaptiveBlock {
    pub fn to_config(&self) -> AdaptiveConfig {
        AdaptiveConfig {
            rho: self.rho,
            tol: self.tol,
            tau_min: self.tau_min,
            tau_max: self.tau_max,
            norm: match self.norm {
                NormChoice::L2 => ErrorNorm::L2Relative,
                NormChoice::Max => ErrorNorm::MaxRelative,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeBlock {
    #[serde(default)]
    pub dt: Option<f64>,
    pub t_final: f64,
    #[serde(default)]
    pub adaptive: Option<AdaptiveBlock>,
}

fn default_directory() -> PathBuf {
    PathBuf::from("out")
}

fn default_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_directory")]
    pub directory: PathBuf,
    #[serde(default = "default_every")]
    pub ledger_every: usize,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            directory: default_directory(),
            ledger_every: default_every(),
            snapshot_times: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialBlock {
    /// `amplitude · Π sin(x_i)` (in units of the box, `sin(2π x_i / L_i)`).
    SineProduct { amplitude: f64 },
    /// Low-pass filtered uniform noise around `mean`.
    Random {
        amplitude: f64,
        #[serde(default)]
        mean: f64,
    },
    /// `inside` on a centred disc of the given radius, `outside` elsewhere;
    /// with `width` the jump is a `tanh` profile of that length scale.
    Disc {
        radius: f64,
        #[serde(default = "one")]
        inside: f64,
        #[serde(default = "minus_one")]
        outside: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        width: Option<f64>,
    },
    /// Square lattice of Gaussian bumps with `cells` periods per axis,
    /// shifted to `mean`, plus seeded noise of size `noise`.
    SquareLattice {
        mean: f64,
        amplitude: f64,
        cells: usize,
        width: f64,
        #[serde(default)]
        noise: f64,
    },
}

fn minus_one() -> f64 {
    -1.0
}

impl InitialBlock {
    pub fn needs_seed(&self) -> bool {
        match self {
            InitialBlock::Random { amplitude, .. } => *amplitude > 0.0,
            InitialBlock::SquareLattice { noise, .. } => *noise > 0.0,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsiBlock {
    #[serde(default)]
    pub a1: f64,
    #[serde(default = "one")]
    pub a2: f64,
    #[serde(default)]
    pub a3: f64,
}

impl SsiBlock {
    pub fn to_params(&self) -> SsiParams {
        SsiParams {
            a1: self.a1,
            a2: self.a2,
            a3: self.a3,
        }
    }
}

/// Experiment-specific knobs; which ones are required depends on the kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyBlock {
    /// Step sizes of a convergence study, largest first.
    #[serde(default)]
    pub dts: Vec<f64>,
    /// Schemes compared by the study.
    #[serde(default)]
    pub schemes: Vec<String>,
    /// ETDRK4 step (convergence) or uniform SAV/CN step (adaptive) of the reference.
    #[serde(default)]
    pub reference_dt: Option<f64>,
    /// Step size and final time of the BDF stability runs.
    #[serde(default)]
    pub stability_dt: Option<f64>,
    #[serde(default)]
    pub stability_t_final: Option<f64>,
    /// Radius benchmark: initial radius and the physical half-width of the box,
    /// both in the units of the reported radius.
    #[serde(default)]
    pub r0: Option<f64>,
    #[serde(default)]
    pub half_width: Option<f64>,
    /// Record the radius every this many steps.
    #[serde(default)]
    pub sample_every: Option<usize>,
    /// Coarsening sweep.
    #[serde(default)]
    pub s_values: Vec<f64>,
    #[serde(default)]
    pub means: Vec<f64>,
    /// SSI comparator coefficients.
    #[serde(default)]
    pub ssi: Option<SsiBlock>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: Option<u64>,
    pub model: ModelBlock,
    #[serde(default)]
    pub scheme: SchemeBlock,
    pub grid: GridBlock,
    pub time: TimeBlock,
    #[serde(default)]
    pub output: OutputBlock,
    pub initial: InitialBlock,
    #[serde(default)]
    pub study: StudyBlock,
}

pub fn parse_scheme(path: &str, name: &str) -> Result<Scheme, ConfigError> {
    Scheme::from_label(name).ok_or_else(|| {
        ConfigError::new(
            path,
            format!("unknown scheme `{name}` (be, cn, cn-half, bdf2, bdf3a, bdf3b, bdf4a, bdf4b)"),
        )
    })
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::new(path, format!("must be positive and finite, got {v}")))
    }
}

fn require_opt(path: &str, v: Option<f64>) -> Result<f64, ConfigError> {
    let v = v.ok_or_else(|| ConfigError::new(path, "required for this experiment"))?;
    positive(path, v)?;
    Ok(v)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { String::new() } else { path };
            ConfigError::new(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
        Ok(Self::from_json(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn scheme(&self) -> Result<Scheme, ConfigError> {
        parse_scheme("scheme.name", &self.scheme.name)
    }

    pub fn study_schemes(&self, default: &[&str]) -> Result<Vec<Scheme>, ConfigError> {
        if self.study.schemes.is_empty() {
            return Ok(default
                .iter()
                .map(|s| Scheme::from_label(s).expect("built-in scheme label"))
                .collect());
        }
        self.study
            .schemes
            .iter()
            .enumerate()
            .map(|(i, s)| parse_scheme(&format!("study.schemes[{i}]"), s))
            .collect()
    }

    pub fn dt(&self) -> Result<f64, ConfigError> {
        require_opt("time.dt", self.time.dt)
    }

    /// Checks every cross-field invariant; the model and grid are built once
    /// so parameter errors surface with their field path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        use ExperimentKind as K;
        if self.schema != SCHEMA_VERSION {
            return Err(ConfigError::new(
                "schema",
                format!("unsupported schema {} (expected {SCHEMA_VERSION})", self.schema),
            ));
        }
        let grid = self.grid.build()?;
        positive("time.t_final", self.time.t_final)?;
        if let Some(dt) = self.time.dt {
            positive("time.dt", dt)?;
        }
        self.scheme()?;
        if self.output.ledger_every == 0 {
            return Err(ConfigError::new("output.ledger_every", "must be at least 1"));
        }
        for (i, &t) in self.output.snapshot_times.iter().enumerate() {
            if !(t >= 0.0 && t <= self.time.t_final) {
                return Err(ConfigError::new(
                    format!("output.snapshot_times[{i}]"),
                    format!("must lie in [0, {}]", self.time.t_final),
                ));
            }
        }
        if self.initial.needs_seed() && self.seed.is_none() {
            return Err(ConfigError::new("seed", "required for random initial data"));
        }
        self.validate_initial(&grid)?;

        let scalar_only = !matches!(self.experiment, K::Qtensor);
        if scalar_only && matches!(self.model, ModelBlock::Qtensor(_)) {
            return Err(ConfigError::new(
                "model.name",
                format!("qtensor is only valid for the qtensor experiment, not {}", self.experiment.label()),
            ));
        }
        if matches!(self.experiment, K::Qtensor) {
            if grid.dim() != 3 {
                return Err(ConfigError::new("grid.points", "the Q-tensor model needs a 3-D grid"));
            }
            self.model.build_qtensor(&grid)?;
            if !matches!(self.scheme()?, Scheme::CrankNicolson(_)) {
                return Err(ConfigError::new(
                    "scheme.name",
                    "the Q-tensor experiment uses Crank-Nicolson (cn or cn-half)",
                ));
            }
        } else {
            self.model.build_scalar(&grid, None)?;
        }

        match self.experiment {
            K::Convergence | K::BdfOrder => {
                if !matches!(self.initial, InitialBlock::SineProduct { .. } | InitialBlock::Random { .. }) {
                    return Err(ConfigError::new("initial.kind", "convergence studies use smooth data"));
                }
                if self.study.dts.len() < 3 {
                    return Err(ConfigError::new("study.dts", "need at least 3 step sizes"));
                }
                for (i, &dt) in self.study.dts.iter().enumerate() {
                    positive(&format!("study.dts[{i}]"), dt)?;
                    if i > 0 && dt >= self.study.dts[i - 1] {
                        return Err(ConfigError::new(
                            format!("study.dts[{i}]"),
                            "step sizes must be strictly decreasing",
                        ));
                    }
                }
                if let Some(r) = self.study.reference_dt {
                    positive("study.reference_dt", r)?;
                }
                let default: &[&str] = if self.experiment == K::Convergence {
                    &["cn", "bdf2"]
                } else {
                    &["bdf3b", "bdf4b"]
                };
                self.study_schemes(default)?;
                if self.experiment == K::BdfOrder {
                    require_opt("study.stability_dt", self.study.stability_dt)?;
                    require_opt("study.stability_t_final", self.study.stability_t_final)?;
                }
            }
            K::RadiusBenchmark => {
                self.dt()?;
                if grid.dim() != 2 {
                    return Err(ConfigError::new("grid.points", "the radius benchmark is 2-D"));
                }
                if !matches!(self.model, ModelBlock::AllenCahn(_)) {
                    return Err(ConfigError::new("model.name", "the radius benchmark uses allen-cahn"));
                }
                if !matches!(self.initial, InitialBlock::Disc { .. }) {
                    return Err(ConfigError::new("initial.kind", "the radius benchmark starts from a disc"));
                }
                let r0 = require_opt("study.r0", self.study.r0)?;
                let hw = require_opt("study.half_width", self.study.half_width)?;
                if r0 >= hw {
                    return Err(ConfigError::new("study.r0", "disc must fit in the box"));
                }
                if self.study.sample_every == Some(0) {
                    return Err(ConfigError::new("study.sample_every", "must be at least 1"));
                }
            }
            K::Coarsening => {
                self.dt()?;
                if !matches!(
                    self.model,
                    ModelBlock::CahnHilliard(_) | ModelBlock::FractionalCahnHilliard(_)
                ) {
                    return Err(ConfigError::new("model.name", "coarsening uses a Cahn-Hilliard model"));
                }
                if !matches!(self.initial, InitialBlock::Random { .. }) {
                    return Err(ConfigError::new("initial.kind", "coarsening starts from random data"));
                }
                if self.study.s_values.is_empty() {
                    return Err(ConfigError::new("study.s_values", "need at least one exponent"));
                }
                for (i, &s) in self.study.s_values.iter().enumerate() {
                    if !(s > 0.0 && s <= 1.0) {
                        return Err(ConfigError::new(format!("study.s_values[{i}]"), "must lie in (0, 1]"));
                    }
                    self.model.build_scalar(&grid, Some(s))?;
                }
                if self.study.means.is_empty() {
                    return Err(ConfigError::new("study.means", "need at least one mean"));
                }
            }
            K::NpfcCompare => {
                self.dt()?;
                if !matches!(self.model, ModelBlock::Npfc(_)) {
                    return Err(ConfigError::new("model.name", "npfc-compare uses the npfc model"));
                }
                if grid.dim() != 2 {
                    return Err(ConfigError::new("grid.points", "npfc-compare is 2-D"));
                }
                self.study_schemes(&["cn", "bdf2"])?;
            }
            K::Adaptive => {
                let Some(a) = &self.time.adaptive else {
                    return Err(ConfigError::new("time.adaptive", "required for the adaptive experiment"));
                };
                a.to_config()
                    .validate()
                    .map_err(|e| core_error("time.adaptive", e))?;
                let r = require_opt("study.reference_dt", self.study.reference_dt)?;
                savflow_core::sav::step_count(r, self.time.t_final)
                    .map_err(|e| ConfigError::new("study.reference_dt", e.to_string()))?;
            }
            K::Mbe | K::Qtensor => {
                let dt = self.dt()?;
                if self.experiment == K::Mbe && !matches!(self.model, ModelBlock::Mbe(_)) {
                    return Err(ConfigError::new("model.name", "the mbe experiment uses the mbe model"));
                }
                savflow_core::sav::step_count(dt, self.time.t_final)
                    .map_err(|e| ConfigError::new("time.dt", e.to_string()))?;
            }
        }
        if matches!(self.experiment, K::RadiusBenchmark | K::Coarsening | K::NpfcCompare) {
            savflow_core::sav::step_count(self.dt()?, self.time.t_final)
                .map_err(|e| ConfigError::new("time.dt", e.to_string()))?;
        }
        Ok(())
    }

    fn validate_initial(&self, grid: &Arc<Grid>) -> Result<(), ConfigError> {
        let nonneg = |path: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(ConfigError::new(path, format!("must be nonnegative, got {v}")))
            }
        };
        match &self.initial {
            InitialBlock::SineProduct { amplitude } => {
                if !amplitude.is_finite() {
                    return Err(ConfigError::new("initial.amplitude", "must be finite"));
                }
            }
            InitialBlock::Random { amplitude, mean } => {
                nonneg("initial.amplitude", *amplitude)?;
                if !mean.is_finite() {
                    return Err(ConfigError::new("initial.mean", "must be finite"));
                }
            }
            InitialBlock::Disc { radius, inside, outside, width } => {
                positive("initial.radius", *radius)?;
                if let Some(w) = width {
                    positive("initial.width", *w)?;
                }
                if !(inside.is_finite() && outside.is_finite()) {
                    return Err(ConfigError::new("initial.inside", "values must be finite"));
                }
            }
            InitialBlock::SquareLattice { mean, amplitude, cells, width, noise } => {
                if grid.dim() != 2 {
                    return Err(ConfigError::new("initial.kind", "square-lattice needs a 2-D grid"));
                }
                if !(mean.is_finite() && amplitude.is_finite()) {
                    return Err(ConfigError::new("initial.mean", "must be finite"));
                }
                if *cells == 0 {
                    return Err(ConfigError::new("initial.cells", "must be at least 1"));
                }
                positive("initial.width", *width)?;
                nonneg("initial.noise", *noise)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> serde_json::Value {
        serde_json::json!({
            "schema": 1,
            "experiment": "mbe",
            "seed": 3,
            "model": {"name": "mbe", "params": {"eta2": 0.1, "alpha": 0.05}},
            "grid": {"points": [16, 16]},
            "time": {"dt": 0.01, "t_final": 0.1},
            "initial": {"kind": "random", "amplitude": 0.1}
        })
    }

    fn parse(v: &serde_json::Value) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::from_json(&v.to_string())
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse(&base()).unwrap();
        assert_eq!(cfg.scheme.name, "cn");
        assert_eq!(cfg.output.ledger_every, 1);
        let ModelBlock::Mbe(p) = &cfg.model else { panic!() };
        assert_eq!(p.mobility, 1.0);
        assert_eq!(p.c0, 1.0);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = parse(&base()).unwrap();
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let mut v = base();
        v["model"]["params"]["eta"] = serde_json::json!(1.0);
        let e = parse(&v).unwrap_err();
        assert!(e.path.starts_with("model"), "{e}");
        assert!(e.reason.contains("eta"), "{e}");

        let mut v = base();
        v["extra"] = serde_json::json!(1);
        assert!(parse(&v).unwrap_err().reason.contains("extra"));

        let mut v = base();
        v["time"]["dtt"] = serde_json::json!(1);
        assert_eq!(parse(&v).unwrap_err().path, "time.dtt");
    }

    #[test]
    fn parameter_errors_carry_field_paths() {
        let mut v = base();
        v["model"]["params"]["alpha"] = serde_json::json!(0.5);
        assert_eq!(parse(&v).unwrap_err().path, "model.params.alpha");

        let mut v = base();
        v["time"]["dt"] = serde_json::json!(-1.0);
        assert_eq!(parse(&v).unwrap_err().path, "time.dt");

        let mut v = base();
        v["time"]["dt"] = serde_json::json!(0.03);
        assert_eq!(parse(&v).unwrap_err().path, "time.dt");

        let mut v = base();
        v["scheme"] = serde_json::json!({"name": "rk4"});
        assert_eq!(parse(&v).unwrap_err().path, "scheme.name");

        let mut v = base();
        v["schema"] = serde_json::json!(2);
        assert_eq!(parse(&v).unwrap_err().path, "schema");
    }

    #[test]
    fn seed_required_for_random_data() {
        let mut v = base();
        v.as_object_mut().unwrap().remove("seed");
        assert_eq!(parse(&v).unwrap_err().path, "seed");
        v["initial"] = serde_json::json!({"kind": "random", "amplitude": 0.0, "mean": 0.2});
        parse(&v).unwrap();
    }

    #[test]
    fn study_requirements_per_kind() {
        let mut v = base();
        v["experiment"] = serde_json::json!("convergence");
        v["model"] = serde_json::json!({"name": "cahn-hilliard", "params": {"eps": 0.1}});
        v["study"] = serde_json::json!({"dts": [0.01, 0.005]});
        assert_eq!(parse(&v).unwrap_err().path, "study.dts");
        v["study"] = serde_json::json!({"dts": [0.01, 0.005, 0.006]});
        assert_eq!(parse(&v).unwrap_err().path, "study.dts[2]");
        v["study"] = serde_json::json!({"dts": [0.01, 0.005, 0.0025], "schemes": ["cn", "x"]});
        assert_eq!(parse(&v).unwrap_err().path, "study.schemes[1]");

        let mut v = base();
        v["experiment"] = serde_json::json!("adaptive");
        v["model"] = serde_json::json!({"name": "cahn-hilliard", "params": {"eps": 0.1}});
        assert_eq!(parse(&v).unwrap_err().path, "time.adaptive");
        v["time"]["adaptive"] = serde_json::json!({"tau_min": 1e-2, "tau_max": 1e-3});
        assert!(parse(&v).unwrap_err().path.starts_with("time.adaptive"));
    }

    #[test]
    fn qtensor_needs_three_dimensions() {
        let mut v = base();
        v["experiment"] = serde_json::json!("qtensor");
        v["model"] = serde_json::json!({"name": "qtensor", "params": {}});
        assert_eq!(parse(&v).unwrap_err().path, "grid.points");
        v["grid"] = serde_json::json!({"points": [4, 4, 4]});
        parse(&v).unwrap();
        v["experiment"] = serde_json::json!("mbe");
        assert_eq!(parse(&v).unwrap_err().path, "model.name");
    }
}
