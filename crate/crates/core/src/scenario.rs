//! Scenario configuration: built-in presets and user TOML layered on top.
//!
//! ```toml
//! scenario = "zermelo"
//!
//! [flow]
//! step = 5e-4
//!
//! [verify]
//! seed = 7
//! ```

use serde::Deserialize;

use crate::charflow::FlowOptions;
use crate::conjugate::ConjugateOptions;
use crate::error::{Error, Result};
use crate::field::FieldOptions;
use crate::hamiltonian::{HamiltonianModel, SystemSpec};
use crate::oracle::GridOptions;
use crate::target::{TargetGeometry, TargetSpec};
use crate::verify::VerifyOptions;

/// Knobs of the individual CLI subcommands.
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunOptions {
    /// Chart and parameters of the single characteristic for `flow`.
    pub chart: usize,
    pub eta: Vec<f64>,
    /// Boundary samples per chart for the conjugate sweep.
    pub sweep_samples: usize,
    /// Level `t` of the exported level set.
    pub level: f64,
    pub level_count: usize,
    pub trajectory_step: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { chart: 0, eta: vec![0.0], sweep_samples: 64, level: 0.5, level_count: 128, trajectory_step: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub system: SystemSpec,
    pub target: TargetSpec,
    pub flow: FlowOptions,
    pub conjugate: ConjugateOptions,
    pub field: FieldOptions,
    pub grid: GridOptions,
    pub verify: VerifyOptions,
    pub run: RunOptions,
}

/// Typed view of a config file; used for diagnostics before merging.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(dead_code)]
struct FileConfig {
    scenario: Option<String>,
    name: Option<String>,
    system: Option<SystemSpec>,
    target: Option<TargetSpec>,
    flow: Option<FlowOptions>,
    conjugate: Option<ConjugateOptions>,
    field: Option<FieldOptions>,
    grid: Option<GridOptions>,
    verify: Option<VerifyOptions>,
    run: Option<RunOptions>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MergedConfig {
    #[serde(default)]
    name: Option<String>,
    system: SystemSpec,
    target: TargetSpec,
    #[serde(default)]
    flow: FlowOptions,
    #[serde(default)]
    conjugate: ConjugateOptions,
    #[serde(default)]
    field: FieldOptions,
    #[serde(default)]
    grid: GridOptions,
    #[serde(default)]
    verify: VerifyOptions,
    #[serde(default)]
    run: RunOptions,
}

const EIKONAL_DISK: &str = r#"
name = "eikonal-disk"
[system]
n = 2
fields = [{ kind = "identity" }]
[target]
kind = "disk"
center = [0.0, 0.0]
radius = 1.0
[verify]
x0 = [2.5, 0.0]
t_end = 1.4
c = 1.0
"#;

const EIKONAL_ANNULUS: &str = r#"
name = "eikonal-annulus"
[system]
n = 2
fields = [{ kind = "identity" }]
[target]
kind = "annulus"
center = [0.0, 0.0]
radii = [1.0, 2.0]
[verify]
x0 = [0.5, 0.0]
t_end = 0.45
"#;

const ZERMELO: &str = r#"
name = "zermelo"
[system]
n = 2
drift = { kind = "constant", value = [0.5, 0.0] }
fields = [{ kind = "identity" }]
[target]
kind = "disk"
center = [0.0, 0.0]
radius = 1.0
[verify]
x0 = [0.0, 2.0]
"#;

const ZERMELO_STRONG: &str = r#"
name = "zermelo-strong"
[system]
n = 2
drift = { kind = "constant", value = [1.5, 0.0] }
fields = [{ kind = "identity" }]
[target]
kind = "disk"
center = [0.0, 0.0]
radius = 1.0
[verify]
x0 = [-2.0, 0.0]
"#;

const SINGLE_FIELD: &str = r#"
name = "single-field"
[system]
n = 2
fields = [{ kind = "constant", value = [1.0, 0.0] }]
[target]
kind = "disk"
center = [0.0, 0.0]
radius = 1.0
[verify]
x0 = [2.0, 0.0]
"#;

/// Names of the built-in scenarios.
pub const PRESETS: [&str; 5] = ["eikonal-disk", "eikonal-annulus", "zermelo", "zermelo-strong", "single-field"];

fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "eikonal-disk" => EIKONAL_DISK,
        "eikonal-annulus" => EIKONAL_ANNULUS,
        "zermelo" => ZERMELO,
        "zermelo-strong" => ZERMELO_STRONG,
        "single-field" => SINGLE_FIELD,
        _ => return None,
    })
}

/// Tables replaced as a whole rather than merged key by key.
const ATOMIC: [&str; 2] = ["system", "target"];

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !ATOMIC.contains(&k.as_str()) => {
                for (kk, vv) in o {
                    b.insert(kk, vv);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ScenarioConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml(&format!("scenario = {name:?}"))
    }

    /// Parses a config file; a `scenario` key selects the preset the file is layered on.
    pub fn from_toml(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("config is empty".into()));
        }
        let _typed: FileConfig = toml::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        let mut user: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        let mut table = match user.remove("scenario") {
            Some(toml::Value::String(name)) => {
                let base = preset_text(&name).ok_or_else(|| {
                    Error::InvalidInput(format!("unknown scenario {name:?}; known: {}", PRESETS.join(", ")))
                })?;
                toml::from_str::<toml::Table>(base).expect("preset parses")
            }
            Some(_) => return Err(Error::InvalidInput("config: `scenario` must be a string".into())),
            None => toml::Table::new(),
        };
        merge(&mut table, user);
        let merged: MergedConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidInput(format!("config: {}", e.message())))?;
        let cfg = Self {
            name: merged.name.unwrap_or_else(|| "custom".into()),
            system: merged.system,
            target: merged.target,
            flow: merged.flow,
            conjugate: merged.conjugate,
            field: merged.field,
            grid: merged.grid,
            verify: merged.verify,
            run: merged.run,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        self.verify.validate()?;
        if self.system.n != self.grid.lo.len() || self.system.n != self.grid.hi.len() {
            return Err(Error::InvalidInput(format!(
                "grid.lo and grid.hi need {} entries to match system.n",
                self.system.n
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<HamiltonianModel> {
        self.system.model()
    }

    pub fn geometry(&self) -> Result<TargetGeometry> {
        let g = self.target.build()?;
        if g.n() != self.system.n {
            return Err(Error::InvalidInput(format!(
                "target dimension {} does not match system.n = {}",
                g.n(),
                self.system.n
            )));
        }
        Ok(g)
    }
}
