//! JSON run and comparison configs.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{ProblemConstants, ReferenceMode};
use crate::solvers::{DecayExponent, SolverKind};
use crate::{Error, Result};

/// Horizon used when a config leaves `solver.horizon` unset.
pub fn default_horizon(family: &ProblemSpec) -> usize {
    match family {
        ProblemSpec::Plgame { .. } => 10_000,
        ProblemSpec::Sensing { .. } => 5_000,
        ProblemSpec::Quad { .. } => 1_000,
    }
}

/// Generation parameters of one problem family. An unset `seed` takes the
/// run seed when the config is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProblemSpec {
    Plgame {
        #[serde(default = "fifty")]
        d: usize,
        #[serde(default = "forty_eight")]
        l: usize,
        #[serde(default = "twenty_five_hundred")]
        n: usize,
        #[serde(default = "pl_interval")]
        interval: (f64, f64),
        #[serde(default)]
        range_compatible: bool,
        #[serde(default = "tenth")]
        range_map_scale: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    Sensing {
        #[serde(default = "fifty")]
        d: usize,
        #[serde(default = "three")]
        r: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    Quad {
        d: usize,
        p: usize,
        #[serde(default = "one")]
        mu: f64,
        #[serde(default = "four")]
        lg: f64,
        #[serde(default = "fifth")]
        coupling: f64,
        #[serde(default = "upper_spectrum")]
        upper_spectrum: (f64, f64),
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl ProblemSpec {
    pub fn seed(&self) -> Option<u64> {
        match self {
            ProblemSpec::Plgame { seed, .. } | ProblemSpec::Sensing { seed, .. } | ProblemSpec::Quad { seed, .. } => *seed,
        }
    }

    fn fill_seed(&mut self, run_seed: u64) {
        match self {
            ProblemSpec::Plgame { seed, .. } | ProblemSpec::Sensing { seed, .. } | ProblemSpec::Quad { seed, .. } => {
                seed.get_or_insert(run_seed);
            }
        }
    }
}

fn fifty() -> usize {
    50
}
fn forty_eight() -> usize {
    48
}
fn twenty_five_hundred() -> usize {
    2500
}
fn three() -> usize {
    3
}
fn pl_interval() -> (f64, f64) {
    (0.1, 1.0)
}
fn tenth() -> f64 {
    0.1
}
fn fifth() -> f64 {
    0.2
}
fn one() -> f64 {
    1.0
}
fn four() -> f64 {
    4.0
}
fn upper_spectrum() -> (f64, f64) {
    (0.5, 1.0)
}
fn basic_lr() -> f64 {
    0.01
}
fn ten() -> usize {
    10
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}

/// Exactly one of `generate` and `load`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<ProblemSpec>,
    /// Instance manifest written by `gen`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant { eta: f64 },
    Polynomial { k: f64, m: f64, exponent: DecayExponent },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CoeffSpec {
    /// Multipliers `c1..c5` of `η_t` (MSGBiO) or `η_t²` (VR-MSGBiO).
    Scheduled { c: [f64; 5] },
    /// Constant `(β, β̂, α, α̂, α̃)`.
    Fixed { weights: [f64; 5] },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SetSpec {
    #[default]
    Unconstrained,
    Ball {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
        radius: f64,
    },
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipSection {
    pub c_fy: f64,
    pub c_gxy: f64,
    pub mu: f64,
    pub l_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub name: SolverKind,
    /// Number of recorded iterates; defaults per problem family.
    #[serde(default, alias = "T", skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default = "basic_lr")]
    pub gamma: f64,
    #[serde(default = "basic_lr")]
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coeffs: Option<CoeffSpec>,
    #[serde(default = "ten")]
    pub batch: usize,
    #[serde(default = "one_usize")]
    pub init_batch: usize,
    /// Scale of the Gaussian initial point; defaults per problem family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_radius: Option<f64>,
    #[serde(default)]
    pub set: SetSpec,
    /// Clipping radii and spectral window; derived from the problem
    /// constants when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<ClipSection>,
}

impl SolverSection {
    /// Default schedule per solver: `η = 1` for MGBiO, `10/(100+t)^{1/2}`
    /// for MSGBiO and `10/(1000+t)^{1/3}` for VR-MSGBiO (`η_0 = 1`).
    pub fn default_schedule(kind: SolverKind) -> ScheduleSpec {
        match kind {
            SolverKind::Mgbio => ScheduleSpec::Constant { eta: 1.0 },
            SolverKind::Msgbio => ScheduleSpec::Polynomial {
                k: 10.0,
                m: 100.0,
                exponent: DecayExponent::Half,
            },
            SolverKind::VrMsgbio => ScheduleSpec::Polynomial {
                k: 10.0,
                m: 1000.0,
                exponent: DecayExponent::Third,
            },
        }
    }

    /// Default coefficients: unit multipliers, the largest values the
    /// default schedules allow at `t = 0`.
    pub fn default_coeffs() -> CoeffSpec {
        CoeffSpec::Scheduled { c: [1.0; 5] }
    }

    fn resolve(&mut self, problem: Option<&ProblemSpec>) {
        if self.horizon.is_none() {
            self.horizon = Some(problem.map_or(1_000, default_horizon));
        }
        self.schedule.get_or_insert(Self::default_schedule(self.name));
        if self.name.is_stochastic() {
            self.coeffs.get_or_insert(Self::default_coeffs());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    #[serde(default = "ten")]
    pub diag_stride: usize,
    /// Record closed-form hyper-gradient metrics when the problem has them.
    #[serde(default = "yes")]
    pub oracle: bool,
    #[serde(default = "auto")]
    pub reference: ReferenceMode,
    #[serde(default)]
    pub wall_time: bool,
}

fn auto() -> ReferenceMode {
    ReferenceMode::Auto
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            diag_stride: 10,
            oracle: true,
            reference: ReferenceMode::Auto,
            wall_time: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    /// CSV rows plus a JSON header sidecar.
    Csv,
    /// Header and rows in one JSON document.
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Falls back to the CLI's environment default, then `out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    /// File stem; defaults to `<solver>-seed<seed>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "csv_only")]
    pub formats: Vec<OutputFormat>,
}

fn csv_only() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv]
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: None,
            name: None,
            formats: csv_only(),
        }
    }
}

/// One solver run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    /// Root seed for every random substream of the run.
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemSource,
    pub solver: SolverSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Overrides the measured problem constants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ProblemConstants>,
}

/// Several solvers over several seeds on one shared instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfigFile {
    pub problem: ProblemSource,
    pub solvers: Vec<SolverSection>,
    pub seeds: Vec<u64>,
    /// Stationarity threshold on the running mean of `grad_map_norm`.
    #[serde(default = "hundredth")]
    pub threshold: f64,
    /// Rows in the trailing mean compared against `threshold`; 0 averages
    /// every row from `t = 1`.
    #[serde(default = "hundred")]
    pub threshold_window: usize,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<ProblemConstants>,
}

fn hundredth() -> f64 {
    0.01
}

fn hundred() -> usize {
    100
}

fn decode<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Parse(format!("config key `{path}`: {inner}"))
    })
}

fn check_source(source: &ProblemSource, base: &Path) -> Result<()> {
    match (&source.generate, &source.load) {
        (Some(_), None) => Ok(()),
        (None, Some(path)) => {
            let full = base.join(path);
            if full.is_file() {
                Ok(())
            } else {
                Err(Error::Parse(format!(
                    "config key `problem.load`: instance file {} does not exist",
                    full.display()
                )))
            }
        }
        _ => Err(Error::Parse(
            "config key `problem`: exactly one of `generate` and `load` must be given".into(),
        )),
    }
}

fn check_solver(s: &SolverSection, at: &str) -> Result<()> {
    if !s.name.is_stochastic() && s.coeffs.is_some() {
        return Err(Error::Parse(format!("config key `{at}.coeffs`: MGBiO takes no momentum coefficients")));
    }
    Ok(())
}

/// A trace header may stand in for a run config: its `config` member is used.
fn unwrap_header(text: &str) -> Result<Option<String>> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("config is not valid JSON: {e}")))?;
    if value.get("format").and_then(|f| f.as_str()) == Some(super::trace::TRACE_FORMAT) {
        let config = value
            .get("config")
            .ok_or_else(|| Error::Parse("trace header has no `config` member".into()))?;
        return Ok(Some(config.to_string()));
    }
    Ok(None)
}

/// Parses and validates a run config, filling defaults. Relative instance
/// paths resolve against `base`.
pub fn parse_config_in(text: &str, base: &Path) -> Result<RunConfigFile> {
    let owned = unwrap_header(text)?;
    let mut cfg: RunConfigFile = decode(owned.as_deref().unwrap_or(text))?;
    check_source(&cfg.problem, base)?;
    check_solver(&cfg.solver, "solver")?;
    if let Some(spec) = cfg.problem.generate.as_mut() {
        spec.fill_seed(cfg.seed);
    }
    cfg.solver.resolve(cfg.problem.generate.as_ref());
    Ok(cfg)
}

/// [`parse_config_in`] relative to the working directory.
pub fn parse_config(text: &str) -> Result<RunConfigFile> {
    parse_config_in(text, Path::new("."))
}

/// Reads a run config (or trace header) from disk.
pub fn load_config(path: &Path) -> Result<RunConfigFile> {
    let text = std::fs::read_to_string(path)?;
    parse_config_in(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn parse_compare_config_in(text: &str, base: &Path) -> Result<CompareConfigFile> {
    let mut cfg: CompareConfigFile = decode(text)?;
    check_source(&cfg.problem, base)?;
    if cfg.solvers.len() < 2 {
        return Err(Error::Parse("config key `solvers`: at least two solver entries are required".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Parse("config key `seeds`: at least one seed is required".into()));
    }
    if !(cfg.threshold > 0.0) {
        return Err(Error::Parse("config key `threshold`: must be positive".into()));
    }
    if let Some(spec) = cfg.problem.generate.as_mut() {
        spec.fill_seed(cfg.seeds[0]);
    }
    for (i, s) in cfg.solvers.iter_mut().enumerate() {
        check_solver(s, &format!("solvers[{i}]"))?;
        s.resolve(cfg.problem.generate.as_ref());
    }
    Ok(cfg)
}

pub fn load_compare_config(path: &Path) -> Result<CompareConfigFile> {
    let text = std::fs::read_to_string(path)?;
    parse_compare_config_in(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Pretty JSON for a config; [`parse_config`] reads it back unchanged.
pub fn emit<T: Serialize>(cfg: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg)?)
}
