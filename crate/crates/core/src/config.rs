//! Experiment configuration: sectioned `key = value` text (TOML).
//!
//! ```toml
//! kind = "sigma_dispersion"
//! seed = 7
//!
//! [grid]
//! n = 1024
//! box_length = 256.0
//!
//! [time]
//! t_final = 45.0
//! dt = 1e-2
//! ```
//!
//! Unknown keys and out-of-range values are rejected with the dotted name
//! of the offending field.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    HartreeDecay,
    KernelDecay,
    SigmaDispersion,
    EtaBound,
    FreeComparison,
    FockOracle,
    Certificates,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::HartreeDecay,
        ExperimentKind::KernelDecay,
        ExperimentKind::SigmaDispersion,
        ExperimentKind::EtaBound,
        ExperimentKind::FreeComparison,
        ExperimentKind::FockOracle,
        ExperimentKind::Certificates,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::HartreeDecay => "hartree_decay",
            ExperimentKind::KernelDecay => "kernel_decay",
            ExperimentKind::SigmaDispersion => "sigma_dispersion",
            ExperimentKind::EtaBound => "eta_bound",
            ExperimentKind::FreeComparison => "free_comparison",
            ExperimentKind::FockOracle => "fock_oracle",
            ExperimentKind::Certificates => "certificates",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Whether the kind evolves the kernel pair on the grid.
    pub fn uses_flow(self) -> bool {
        matches!(
            self,
            ExperimentKind::SigmaDispersion
                | ExperimentKind::EtaBound
                | ExperimentKind::FreeComparison
                | ExperimentKind::Certificates
        )
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub d: usize,
    pub n: usize,
    pub box_length: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            d: 1,
            n: 1024,
            box_length: 256.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialConfig {
    pub g: f64,
    pub radius: f64,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        Self { g: 0.1, radius: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialConfig {
    /// Width `a` of the normalized Gaussian `exp(-x^2 / (2 a^2))`.
    pub width: f64,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self { width: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub t_final: f64,
    pub dt: f64,
    pub sample_every: usize,
    /// Anchor time of the kernel pair.
    pub s: f64,
    /// Comparison times for the free-flow residual.
    pub t0: Vec<f64>,
    /// Length of the initial transient excluded from fits and plateaus.
    pub transient: f64,
    /// Step of the condensate solver feeding the kernel flow; defaults to `dt`.
    pub condensate_dt: Option<f64>,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            t_final: 40.0,
            dt: 1e-2,
            sample_every: 10,
            s: 0.0,
            t0: vec![10.0, 40.0],
            transient: 2.0,
            condensate_dt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Explicit `[t_lo, t_hi]`; defaults to `[max(5, 2 transient), 0.9 t_wrap]`.
    pub window: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Symplectic defect at every `defect_every`-th sample (0 disables it).
    pub defect_every: usize,
    /// Also integrate the dense reference system (n <= 64) and compare.
    pub dense_reference: bool,
    /// Reference RK4 step as a fraction of `dt`.
    pub reference_ratio: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            defect_every: 1,
            dense_reference: false,
            reference_ratio: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelsConfig {
    /// Number of evenly spaced times at which kernel norms are evaluated.
    pub samples: usize,
}

impl Default for KernelsConfig {
    fn default() -> Self {
        Self { samples: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingSource {
    /// Seeded random `h`, `k`.
    Synthetic,
    /// Projection of the grid generator onto the lowest plane waves.
    Galerkin,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FockConfig {
    pub modes: usize,
    /// Occupation cutoffs, run in order; the last must converge.
    pub cutoffs: Vec<usize>,
    #[serde(rename = "source")]
    pub source_name: String,
    pub h_scale: f64,
    pub k_scale: f64,
    pub t_final: f64,
    pub dt: f64,
    pub sample_every: usize,
    pub leakage_threshold: f64,
}

impl Default for FockConfig {
    fn default() -> Self {
        Self {
            modes: 2,
            cutoffs: vec![12, 16, 20],
            source_name: "synthetic".into(),
            h_scale: 0.5,
            k_scale: 0.3,
            t_final: 1.0,
            dt: 1e-3,
            sample_every: 100,
            leakage_threshold: 1e-6,
        }
    }
}

impl FockConfig {
    pub fn source(&self) -> CouplingSource {
        match self.source_name.as_str() {
            "galerkin" => CouplingSource::Galerkin,
            _ => CouplingSource::Synthetic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Output directory; the command line may override it.
    pub out: Option<PathBuf>,
    pub grid: GridConfig,
    pub potential: PotentialConfig,
    pub initial: InitialConfig,
    pub time: TimeConfig,
    pub fit: FitConfig,
    pub flow: FlowConfig,
    pub kernels: KernelsConfig,
    pub fock: FockConfig,
}

const SECTIONS: [&str; 8] = ["grid", "potential", "initial", "time", "fit", "flow", "kernels", "fock"];

fn config_error(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

fn section<T: for<'de> Deserialize<'de> + Default>(table: &toml::Table, name: &str) -> Result<T> {
    match table.get(name) {
        None => Ok(T::default()),
        Some(toml::Value::Table(inner)) => T::deserialize(toml::Value::Table(inner.clone())).map_err(|e| {
            let message = e.message().to_string();
            // serde reports unknown or mistyped keys with the key in backticks.
            let key = message
                .split('`')
                .nth(1)
                .filter(|_| message.starts_with("unknown field"))
                .map(|k| format!("{name}.{k}"))
                .unwrap_or_else(|| name.to_string());
            config_error(key, message)
        }),
        Some(_) => Err(config_error(name, "expected a section")),
    }
}

impl ExperimentConfig {
    /// Defaults for everything except the kind.
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            seed: 0x5eed,
            out: None,
            grid: GridConfig::default(),
            potential: PotentialConfig::default(),
            initial: InitialConfig::default(),
            time: TimeConfig::default(),
            fit: FitConfig::default(),
            flow: FlowConfig::default(),
            kernels: KernelsConfig::default(),
            fock: FockConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_error("<document>", e.message().to_string()))?;
        for key in table.keys() {
            if !SECTIONS.contains(&key.as_str()) && !["kind", "seed", "out"].contains(&key.as_str()) {
                return Err(config_error(key.clone(), "unknown key"));
            }
        }
        let kind = match table.get("kind") {
            None => return Err(config_error("kind", "missing")),
            Some(toml::Value::String(name)) => ExperimentKind::parse(name).ok_or_else(|| {
                let names: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
                config_error("kind", format!("unrecognized kind `{name}`; expected one of {}", names.join(", ")))
            })?,
            Some(_) => return Err(config_error("kind", "expected a string")),
        };
        let seed = match table.get("seed") {
            None => 0x5eed,
            Some(toml::Value::Integer(s)) if *s >= 0 => *s as u64,
            Some(_) => return Err(config_error("seed", "expected a nonnegative integer")),
        };
        let out = match table.get("out") {
            None => None,
            Some(toml::Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => return Err(config_error("out", "expected a path string")),
        };
        let config = Self {
            kind,
            seed,
            out,
            grid: section(&table, "grid")?,
            potential: section(&table, "potential")?,
            initial: section(&table, "initial")?,
            time: section(&table, "time")?,
            fit: section(&table, "fit")?,
            flow: section(&table, "flow")?,
            kernels: section(&table, "kernels")?,
            fock: section(&table, "fock")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Range checks; the grid and potential constructors repeat theirs.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, reason: &str| if ok { Ok(()) } else { Err(config_error(field, reason)) };
        let g = &self.grid;
        check((1..=3).contains(&g.d), "grid.d", "must be 1, 2 or 3")?;
        check(g.n.is_power_of_two() && (8..=8192).contains(&g.n), "grid.n", "must be a power of two in [8, 8192]")?;
        check(g.box_length > 0.0 && g.box_length.is_finite(), "grid.box_length", "must be positive")?;
        let p = &self.potential;
        check(p.g >= 0.0 && p.g.is_finite(), "potential.g", "must be nonnegative")?;
        check(
            p.radius > 0.0 && p.radius < g.box_length / 4.0,
            "potential.radius",
            "must lie in (0, box_length / 4)",
        )?;
        check(self.initial.width > 0.0 && self.initial.width.is_finite(), "initial.width", "must be positive")?;
        let t = &self.time;
        check(t.t_final > 0.0 && t.t_final.is_finite(), "time.t_final", "must be positive")?;
        check(t.dt > 0.0 && t.dt <= 1e-2, "time.dt", "must lie in (0, 0.01]")?;
        check(t.sample_every >= 1, "time.sample_every", "must be at least 1")?;
        check(t.s >= 0.0 && t.s < t.t_final, "time.s", "must lie in [0, t_final)")?;
        check(t.transient >= 0.0 && t.transient.is_finite(), "time.transient", "must be nonnegative")?;
        if self.kind == ExperimentKind::FreeComparison {
            check(
                !t.t0.is_empty() && t.t0.iter().all(|&t0| t0 >= t.s && t0 <= t.t_final),
                "time.t0",
                "comparison times must lie in [s, t_final]",
            )?;
        }
        if let Some(h) = t.condensate_dt {
            check(h > 0.0 && h <= 1e-2, "time.condensate_dt", "must lie in (0, 0.01]")?;
        }
        if let Some([lo, hi]) = self.fit.window {
            check(lo < hi && lo >= 0.0, "fit.window", "need 0 <= t_lo < t_hi")?;
        }
        check(
            self.flow.reference_ratio > 0.0 && self.flow.reference_ratio <= 1.0,
            "flow.reference_ratio",
            "must lie in (0, 1]",
        )?;
        check(self.kernels.samples >= 2, "kernels.samples", "need at least 2 samples")?;
        let f = &self.fock;
        check((1..=crate::fock::MAX_MODES).contains(&f.modes), "fock.modes", "must lie in [1, 8]")?;
        check(
            !f.cutoffs.is_empty() && f.cutoffs.iter().all(|&c| c <= crate::fock::MAX_CUTOFF),
            "fock.cutoffs",
            "need at least one cutoff, each at most 20",
        )?;
        check(
            f.cutoffs.windows(2).all(|w| w[0] < w[1]),
            "fock.cutoffs",
            "cutoffs must increase",
        )?;
        check(
            ["synthetic", "galerkin"].contains(&f.source_name.as_str()),
            "fock.source",
            "must be `synthetic` or `galerkin`",
        )?;
        check(f.h_scale >= 0.0 && f.k_scale >= 0.0, "fock.k_scale", "coupling scales must be nonnegative")?;
        check(f.t_final > 0.0, "fock.t_final", "must be positive")?;
        check(f.dt > 0.0 && f.dt <= f.t_final, "fock.dt", "must lie in (0, t_final]")?;
        check(f.sample_every >= 1, "fock.sample_every", "must be at least 1")?;
        check(f.leakage_threshold > 0.0, "fock.leakage_threshold", "must be positive")?;
        if self.kind.uses_flow() || self.kind == ExperimentKind::KernelDecay {
            check(g.d == 1, "grid.d", "pair kernels need d = 1")?;
            check(g.n <= 2048, "grid.n", "pair kernels need n <= 2048")?;
        }
        if self.flow.dense_reference {
            check(g.n <= crate::oracle::MAX_ORACLE_POINTS, "flow.dense_reference", "needs n <= 64")?;
        }
        if self.fock.source() == CouplingSource::Galerkin {
            check(g.d == 1, "grid.d", "Galerkin couplings need d = 1")?;
        }
        Ok(())
    }
}
