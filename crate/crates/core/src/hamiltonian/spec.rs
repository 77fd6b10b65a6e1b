use std::sync::Arc;

use serde::Deserialize;

use crate::error::{Error, Result};

use super::fields::{FieldSpec, VectorField};
use super::model::{ControlAffineSystem, HamiltonianModel};

/// Text form of a control-affine system.
///
/// ```toml
/// n = 2
/// rho = 2.5
/// drift = { kind = "constant", value = [0.5, 0.0] }
/// fields = [{ kind = "identity" }]
/// ```
#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub n: usize,
    #[serde(default = "default_drift")]
    pub drift: FieldSpec,
    pub fields: Vec<FieldSpec>,
    #[serde(default = "default_rho")]
    pub rho: f64,
}

fn default_drift() -> FieldSpec {
    FieldSpec::Zero
}

fn default_rho() -> f64 {
    10.0
}

impl SystemSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Load(e.to_string()))
    }

    pub fn build(&self) -> Result<ControlAffineSystem> {
        if self.n == 0 {
            return Err(Error::Load("system.n must be positive".into()));
        }
        if self.fields.is_empty() {
            return Err(Error::Load("system.fields must list at least one control column".into()));
        }
        let drift: Arc<dyn VectorField> = Arc::from(self.drift.build_drift(self.n)?);
        let mut columns: Vec<Arc<dyn VectorField>> = Vec::new();
        for f in &self.fields {
            columns.extend(f.build_columns(self.n)?.into_iter().map(Arc::from));
        }
        ControlAffineSystem::new(drift, columns, self.rho)
    }

    pub fn model(&self) -> Result<HamiltonianModel> {
        Ok(HamiltonianModel::new(self.build()?))
    }
}
