//! Run configuration: JSON, UTF-8, complex matrices as separate real and
//! imaginary row-major arrays. Unknown keys are rejected everywhere.

use cmps_core::general_lindblad::FieldMoments;
use cmps_core::{CMatrix, CmpsParams, Complex64, Geometry, Tolerances};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub re: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub im: Option<Vec<Vec<f64>>>,
}

impl MatrixConfig {
    pub fn from_matrix(m: &CMatrix) -> Self {
        let rows = |f: fn(&Complex64) -> f64| {
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| f(&m[(i, j)])).collect())
                .collect()
        };
        Self {
            re: rows(|z| z.re),
            im: Some(rows(|z| z.im)),
        }
    }

    pub fn to_matrix(&self, name: &str, dim: usize) -> Result<CMatrix, CliError> {
        let check = |rows: &Vec<Vec<f64>>, part: &str| {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(CliError::Validation(format!(
                    "{name}.{part} must be a {dim}x{dim} row-major array"
                )));
            }
            Ok(())
        };
        check(&self.re, "re")?;
        if let Some(im) = &self.im {
            check(im, "im")?;
        }
        Ok(CMatrix::from_fn(dim, dim, |i, j| {
            let im = self.im.as_ref().map_or(0.0, |m| m[i][j]);
            Complex64::new(self.re[i][j], im)
        }))
    }

    /// Fill in an omitted imaginary part with zeros.
    fn resolved(&self) -> Self {
        let im = self
            .im
            .clone()
            .unwrap_or_else(|| self.re.iter().map(|r| vec![0.0; r.len()]).collect());
        Self {
            re: self.re.clone(),
            im: Some(im),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    #[serde(rename = "K")]
    pub k: MatrixConfig,
    #[serde(rename = "R")]
    pub r: MatrixConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum GeometryConfig {
    #[serde(rename = "thermodynamic")]
    Thermodynamic,
    #[serde(rename = "finite")]
    Finite {
        length: f64,
        boundary_rho: MatrixConfig,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexConfig {
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

impl ComplexConfig {
    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentsConfig {
    pub psi_dag_sq: ComplexConfig,
    pub psi_sq: ComplexConfig,
    pub psi_dag_psi: f64,
    pub psi_psi_dag: f64,
}

impl MomentsConfig {
    pub fn moments(&self) -> Result<FieldMoments, CliError> {
        Ok(FieldMoments::new(
            self.psi_dag_sq.value(),
            self.psi_sq.value(),
            self.psi_dag_psi,
            self.psi_psi_dag,
        )?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub length: f64,
    #[serde(rename = "K")]
    pub k: MatrixConfig,
    #[serde(rename = "R")]
    pub r: MatrixConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsertionConfig {
    pub position: f64,
    /// One of `annihilate`, `create`, `deriv_annihilate`, `deriv_create`,
    /// `pair_density`.
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    #[serde(rename = "dK")]
    pub dk: MatrixConfig,
    #[serde(rename = "dR")]
    pub dr: MatrixConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hermiticity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_eigenvalue: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_floor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_point: Option<f64>,
}

impl ToleranceConfig {
    /// `other` wins where set.
    pub fn merged(&self, other: &ToleranceConfig) -> ToleranceConfig {
        ToleranceConfig {
            hermiticity: other.hermiticity.or(self.hermiticity),
            state: other.state.or(self.state),
            zero_eigenvalue: other.zero_eigenvalue.or(self.zero_eigenvalue),
            residual: other.residual.or(self.residual),
            signal_floor: other.signal_floor.or(self.signal_floor),
            fixed_point: other.fixed_point.or(self.fixed_point),
        }
    }

    pub fn resolve(&self) -> Tolerances {
        let d = Tolerances::default();
        Tolerances {
            hermiticity: self.hermiticity.unwrap_or(d.hermiticity),
            state: self.state.unwrap_or(d.state),
            zero_eigenvalue: self.zero_eigenvalue.unwrap_or(d.zero_eigenvalue),
            residual: self.residual.unwrap_or(d.residual),
            signal_floor: self.signal_floor.unwrap_or(d.signal_floor),
            fixed_point: self.fixed_point.unwrap_or(d.fixed_point),
        }
    }

    pub fn full(t: &Tolerances) -> Self {
        Self {
            hermiticity: Some(t.hermiticity),
            state: Some(t.state),
            zero_eigenvalue: Some(t.zero_eigenvalue),
            residual: Some(t.residual),
            signal_floor: Some(t.signal_floor),
            fixed_point: Some(t.fixed_point),
        }
    }
}

/// Everything a command may read. Task keys are optional at parse time and
/// checked by the command that needs them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub geometry: GeometryConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<ToleranceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separations: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connected: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<WindowConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilons: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observable: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_traj: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chemical_potential: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moments: Option<MomentsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<Vec<SegmentConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insertions: Option<Vec<InsertionConfig>>,
}

impl RunConfig {
    /// Parse a config file, or the config embedded in a previous result
    /// (JSON with a `config` member, or CSV with a `# config: ` line).
    pub fn parse(text: &str) -> Result<Self, CliError> {
        if let Some(line) = text.lines().find_map(|l| l.strip_prefix("# config: ")) {
            return Self::from_json(line);
        }
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        let is_result = value.get("tool").is_some() && value.get("config").is_some();
        let inner = if is_result { value["config"].clone() } else { value };
        serde_json::from_value(inner).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn params(&self) -> Result<CmpsParams, CliError> {
        let dim = self.model.dim;
        if dim == 0 {
            return Err(CliError::Validation("model.dim must be at least 1".into()));
        }
        let k = self.model.k.to_matrix("K", dim)?;
        let r = self.model.r.to_matrix("R", dim)?;
        let geometry = match &self.geometry {
            GeometryConfig::Thermodynamic => Geometry::Thermodynamic,
            GeometryConfig::Finite {
                length,
                boundary_rho,
            } => Geometry::Finite {
                length: *length,
                boundary_rho: boundary_rho.to_matrix("boundary_rho", dim)?,
            },
        };
        let tol = self.tolerances.unwrap_or_default().resolve();
        Ok(CmpsParams::with_tolerances(dim, k, r, geometry, tol)?)
    }

    /// Defaults made explicit so that the echoed config reproduces the run.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.model.k = out.model.k.resolved();
        out.model.r = out.model.r.resolved();
        if let GeometryConfig::Finite { boundary_rho, .. } = &mut out.geometry {
            *boundary_rho = boundary_rho.resolved();
        }
        out.tolerances = Some(ToleranceConfig::full(&self.tolerances.unwrap_or_default().resolve()));
        if let Some(p) = &mut out.protocol {
            for seg in p {
                seg.k = seg.k.resolved();
                seg.r = seg.r.resolved();
            }
        }
        if let Some(p) = &mut out.perturbation {
            p.dk = p.dk.resolved();
            p.dr = p.dr.resolved();
        }
        out
    }

    pub fn require<'a, T>(&self, value: &'a Option<T>, key: &str, command: &str) -> Result<&'a T, CliError> {
        value
            .as_ref()
            .ok_or_else(|| CliError::Validation(format!("`{command}` requires the `{key}` key")))
    }
}

pub fn parse_tolerances(text: &str) -> Result<ToleranceConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Validation(format!("tolerance overrides: {e}")))
}
