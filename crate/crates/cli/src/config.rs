//! Run configuration: a JSON file merged with command-line flags.

use std::path::PathBuf;

use monoflow::io::parse_vector;
use monoflow::problems::Termination;
use monoflow::{FlowKind, FlowParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Final time used when neither the file nor the flags set one.
pub const DEFAULT_T_FINAL: f64 = 30.0;
pub const DEFAULT_TF_GRID: [&str; 4] = ["0.1", "0.5", "2", "inf"];
pub const DEFAULT_STEPS: usize = 30;
pub const DEFAULT_HORIZON: usize = 5;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("field `{field}`: {message}")]
    Field { field: &'static str, message: String },
}

impl ConfigError {
    fn field(field: &'static str, message: impl Into<String>) -> Self {
        ConfigError::Field {
            field,
            message: message.into(),
        }
    }
}

/// Every setting a subcommand may read. Absent entries take the
/// subcommand's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Built-in problem name or path to a problem file.
    pub problem: Option<String>,
    pub flow: Vec<FlowKind>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub tau: Option<f64>,
    pub h: Option<f64>,
    pub t_final: Option<f64>,
    pub tol_converge: Option<f64>,
    /// Initial conditions; `lqdg` reads the first as the plant state.
    pub x0: Vec<Vec<f64>>,
    pub u0: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Termination grid of `lqdg`; numbers or `inf`.
    pub tf: Vec<String>,
    pub horizon: Option<usize>,
    pub steps: Option<usize>,
    pub write_trajectory: Option<bool>,
    pub write_certificate: Option<bool>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Entries set in `flags` replace the ones in `self`.
    pub fn merged(mut self, flags: RunConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if flags.$f.is_some() {
                    self.$f = flags.$f;
                }
            )*};
        }
        take!(problem, alpha, beta, tau, h, t_final, tol_converge, u0, seed, out, horizon, steps, write_trajectory, write_certificate);
        if !flags.flow.is_empty() {
            self.flow = flags.flow;
        }
        if !flags.x0.is_empty() {
            self.x0 = flags.x0;
        }
        if !flags.tf.is_empty() {
            self.tf = flags.tf;
        }
        self
    }

    /// Flow parameters, validated for every requested flow.
    pub fn params(&self) -> Result<FlowParams, ConfigError> {
        let d = FlowParams::default();
        let p = FlowParams {
            alpha: self.alpha.unwrap_or(d.alpha),
            beta: self.beta.unwrap_or(d.beta),
            tau: self.tau.unwrap_or(d.tau),
            h: self.h.unwrap_or(d.h),
            t_final: self.t_final.unwrap_or(DEFAULT_T_FINAL),
            tol_converge: self.tol_converge.unwrap_or(d.tol_converge),
            tol_active: d.tol_active,
        };
        for kind in self.flows() {
            p.validate(kind).map_err(|e| ConfigError::field("params", e.to_string()))?;
        }
        Ok(p)
    }

    /// Requested flows; the safe flow when none is given.
    pub fn flows(&self) -> Vec<FlowKind> {
        if self.flow.is_empty() {
            vec![FlowKind::Smf]
        } else {
            self.flow.clone()
        }
    }

    pub fn terminations(&self) -> Result<Vec<Termination>, ConfigError> {
        let grid: Vec<String> = if self.tf.is_empty() {
            DEFAULT_TF_GRID.iter().map(|s| s.to_string()).collect()
        } else {
            self.tf.clone()
        };
        grid.iter()
            .map(|s| s.parse().map_err(|e: String| ConfigError::field("tf", e)))
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// First 12 hex digits of the SHA-256 of the subcommand and the
    /// serialized configuration, output directory excluded; used to name
    /// output files.
    pub fn digest(&self, command: &str) -> String {
        let keyed = RunConfig {
            out: None,
            ..self.clone()
        };
        let mut hasher = Sha256::new();
        hasher.update(command.as_bytes());
        hasher.update([0]);
        hasher.update(serde_json::to_vec(&keyed).expect("serializable"));
        hasher.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses a flag value such as `1,-0.5`.
pub fn vector_flag(text: &str) -> Result<Vec<f64>, String> {
    parse_vector(text)
}

/// Splits repeated or comma-joined flag values: `--tf 0.1,inf`.
pub fn list_flag(values: &[String]) -> Vec<String> {
    values
        .iter()
        .flat_map(|v| v.split(','))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn flows_flag(values: &[String]) -> Result<Vec<FlowKind>, ConfigError> {
    list_flag(values)
        .iter()
        .map(|s| s.parse().map_err(|e: String| ConfigError::field("flow", e)))
        .collect()
}
