//! Numerical tolerances and step sizes shared by every module.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jets::{QuadratureOptions, MAX_ORDER};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid config: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Smallest admissible singular value of Ω, relative to its column norms.
    pub eps_rank: f64,
    /// Decomposition residual `Dx − ΩΛᵀ` accepted as zero.
    pub eps_dec: f64,
    /// `|λ_Ω|` below this marks a grid node as singular.
    pub eps_sing: f64,
    /// `|K|` or `|K_Ω|` below this counts as vanishing.
    pub eps_k: f64,
    /// `|λ_Ω|` below this switches pointwise formulas to the limit probe.
    pub eps_probe: f64,
    pub tol_limit: f64,
    pub tol_compat: f64,
    pub tol_path: f64,
    pub rk4_step: f64,
    pub jet_order: usize,
    pub quadrature_nodes: usize,
    pub quadrature_max_nodes: usize,
    pub probe_directions: usize,
    pub probe_r0: f64,
    pub probe_levels: usize,
    pub fd_step: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            eps_rank: 1e-9,
            eps_dec: 1e-8,
            eps_sing: 1e-9,
            eps_k: 1e-10,
            eps_probe: 1e-6,
            tol_limit: 1e-4,
            tol_compat: 1e-6,
            tol_path: 1e-4,
            rk4_step: 1e-3,
            jet_order: 3,
            quadrature_nodes: 32,
            quadrature_max_nodes: 512,
            probe_directions: 8,
            probe_r0: 1e-2,
            probe_levels: 7,
            fd_step: 1e-3,
        }
    }
}

impl Config {
    /// Parses `key = value` lines; unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Config, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config, ConfigError> {
        Config::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Applies a single `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::Parse(format!("expected key=value, got '{assignment}'")))?;
        let mut table = toml::Table::try_from(&*self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let value: toml::Value = format!("v = {}", v.trim())
            .parse::<toml::Table>()
            .map_err(|e| ConfigError::Parse(e.to_string()))?
            .remove("v")
            .expect("parsed key");
        let key = k.trim();
        let slot = table.get_mut(key).ok_or_else(|| ConfigError::Parse(format!("unknown key '{key}'")))?;
        *slot = match (&*slot, value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        *self = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        self.validate()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.jet_order > MAX_ORDER {
            return Err(ConfigError::Parse(format!("jet_order must be at most {MAX_ORDER}")));
        }
        if !(self.rk4_step > 0.0) || self.quadrature_nodes == 0 || self.probe_levels < 2 {
            return Err(ConfigError::Parse("step sizes and node counts must be positive".into()));
        }
        Ok(())
    }

    pub fn quadrature(&self) -> QuadratureOptions {
        QuadratureOptions {
            nodes: self.quadrature_nodes,
            max_nodes: self.quadrature_max_nodes,
            ..QuadratureOptions::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_partial_file() {
        let c = Config::from_toml_str("tol_limit = 1e-5\nrk4_step = 0.002\njet_order = 4\n").unwrap();
        assert_eq!(c.tol_limit, 1e-5);
        assert_eq!(c.rk4_step, 0.002);
        assert_eq!(c.jet_order, 4);
        assert_eq!(c.eps_rank, 1e-9);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(Config::from_toml_str("tol_limt = 1").is_err());
        assert!(Config::from_toml_str("jet_order = 9").is_err());
    }

    #[test]
    fn flag_override() {
        let mut c = Config::default();
        c.set("tol_path=1e-3").unwrap();
        c.set("probe_r0 = 1").unwrap();
        assert_eq!((c.tol_path, c.probe_r0), (1e-3, 1.0));
        assert!(c.set("nope=1").is_err());
        assert!(c.set("tol_path").is_err());
    }
}
