//! Problem files (JSON) and trajectory tables (CSV).

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flows::Trajectory;
use crate::problems::{LqdgProblem, RecedingHorizonRun};
use crate::vi::{ConstraintSet, OperatorF, ViError, ViProblem};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("invalid JSON at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("field `{field}`: {message}")]
    Field { field: &'static str, message: String },
    #[error("CSV line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Vi(#[from] ViError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for IoError {
    fn from(e: serde_json::Error) -> Self {
        IoError::Json {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

/// Affine operator `F(x) = Qx + r` on `{Gx ≤ c_g, Hx = c_h}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub n: usize,
    #[serde(default)]
    pub m: usize,
    #[serde(default)]
    pub k: usize,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub r: Vec<f64>,
    #[serde(rename = "G", default)]
    pub g: Vec<Vec<f64>>,
    #[serde(default)]
    pub c_g: Vec<f64>,
    #[serde(rename = "H", default)]
    pub h: Vec<Vec<f64>>,
    #[serde(default)]
    pub c_h: Vec<f64>,
    /// Known solution, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<Vec<f64>>,
    /// Seed the instance was generated from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn matrix(field: &'static str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>, IoError> {
    if rows.len() != nrows {
        return Err(IoError::Field {
            field,
            message: format!("expected {nrows} rows, found {}", rows.len()),
        });
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(IoError::Field {
                field,
                message: format!("row {i} has {} entries, expected {ncols}", row.len()),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(IoError::Field {
                field,
                message: format!("row {i} has a non-finite entry"),
            });
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn vector(field: &'static str, v: &[f64], len: usize) -> Result<DVector<f64>, IoError> {
    if v.len() != len {
        return Err(IoError::Field {
            field,
            message: format!("expected {len} entries, found {}", v.len()),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(IoError::Field {
            field,
            message: "non-finite entry".into(),
        });
    }
    Ok(DVector::from_column_slice(v))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl ProblemFile {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Builds the operator and constraint set after checking every shape.
    pub fn to_problem(&self) -> Result<ViProblem, IoError> {
        if self.n == 0 {
            return Err(IoError::Field {
                field: "n",
                message: "must be positive".into(),
            });
        }
        let q = matrix("Q", &self.q, self.n, self.n)?;
        let r = vector("r", &self.r, self.n)?;
        let g = matrix("G", &self.g, self.m, self.n)?;
        let c_g = vector("c_g", &self.c_g, self.m)?;
        let h = matrix("H", &self.h, self.k, self.n)?;
        let c_h = vector("c_h", &self.c_h, self.k)?;
        let f = OperatorF::affine(q, r)?;
        let c = ConstraintSet::polyhedral(g, c_g, h, c_h)?;
        let mut p = ViProblem::new(self.name.clone().unwrap_or_else(|| "file".into()), f, c)?;
        if let Some(s) = &self.solution {
            p = p.with_solution(vector("solution", s, self.n)?);
        }
        Ok(p)
    }

    /// Serializes an affine problem; fails for non-affine operators or
    /// smooth sets.
    pub fn from_problem(p: &ViProblem) -> Option<Self> {
        let (q, r) = p.operator.affine_data()?;
        let (g, c_g) = p.constraints.polyhedral_data()?;
        Some(Self {
            name: Some(p.name.clone()),
            n: p.dim(),
            m: p.constraints.m(),
            k: p.constraints.k(),
            q: rows_of(q),
            r: r.iter().copied().collect(),
            g: rows_of(g),
            c_g: c_g.iter().copied().collect(),
            h: rows_of(p.constraints.h_matrix()),
            c_h: p.constraints.c_h().iter().copied().collect(),
            solution: p.solution.as_ref().map(|s| s.iter().copied().collect()),
            seed: None,
        })
    }

    /// The game VI at plant state `z0`, recording the instance seed.
    pub fn from_lqdg(p: &LqdgProblem, z0: &DVector<f64>) -> Self {
        let vi = ViProblem::new("lqdg", p.operator(z0), p.constraints()).expect("consistent");
        let mut file = Self::from_problem(&vi).expect("affine polyhedral");
        file.seed = p.seed;
        file
    }
}

/// Column names of a trajectory table for the given dimensions.
pub fn trajectory_header(n: usize, m: usize, k: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|i| format!("x_{i}")));
    h.extend((1..=m).map(|i| format!("u_{i}")));
    h.extend((1..=k).map(|i| format!("v_{i}")));
    for name in ["gmax", "hmax", "field_norm", "V", "W", "Veps"] {
        h.push(name.to_string());
    }
    h
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes one row per state with 17 significant digits. Lyapunov columns
/// are `NaN` when they were not recorded.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, mut out: W) -> std::io::Result<()> {
    let Some(first) = traj.states.first() else {
        return Ok(());
    };
    let (n, m, k) = (first.x.len(), first.u.len(), first.v.len());
    writeln!(out, "{}", trajectory_header(n, m, k).join(","))?;
    for (s, d) in traj.states.iter().zip(&traj.diagnostics) {
        let mut row: Vec<String> = vec![fmt(s.t)];
        row.extend(s.x.iter().chain(s.u.iter()).chain(s.v.iter()).map(|&v| fmt(v)));
        let (vv, w, ve) = d
            .lyapunov
            .map(|l| (l.v, l.w, l.v_eps))
            .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
        for v in [d.gmax, d.hmax, d.field_norm, vv, w, ve] {
            row.push(fmt(v));
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn trajectory_csv_string(traj: &Trajectory) -> String {
    let mut buf = Vec::new();
    write_trajectory_csv(traj, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("ASCII output")
}

/// Parsed trajectory table.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub rows: Vec<Vec<f64>>,
}

impl TrajectoryTable {
    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }

    pub fn x(&self, row: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.rows[row][1..=self.n])
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = trajectory_header(self.n, self.m, self.k)
            .iter()
            .position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }
}

/// Parses a table produced by [`write_trajectory_csv`]. The header fixes
/// `n`, `m` and `k`; every row must have matching width, numeric fields
/// and strictly increasing time.
pub fn read_trajectory_csv(text: &str) -> Result<TrajectoryTable, IoError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(IoError::Csv {
            line: 1,
            message: "missing header".into(),
        });
    };
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let count = |prefix: &str| names.iter().filter(|h| h.starts_with(prefix)).count();
    let (n, m, k) = (count("x_"), count("u_"), count("v_"));
    let expected = trajectory_header(n, m, k);
    if names != expected {
        return Err(IoError::Csv {
            line: 1,
            message: format!("unexpected header; expected `{}`", expected.join(",")),
        });
    }
    let mut rows = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for (idx, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected.len() {
            return Err(IoError::Csv {
                line: idx + 1,
                message: format!("expected {} fields, found {}", expected.len(), fields.len()),
            });
        }
        let mut row = Vec::with_capacity(fields.len());
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| IoError::Csv {
                line: idx + 1,
                message: format!("not a number: `{}`", f.trim()),
            })?;
            row.push(v);
        }
        if !(row[0] > last_t) {
            return Err(IoError::Csv {
                line: idx + 1,
                message: "time column must be strictly increasing".into(),
            });
        }
        last_t = row[0];
        rows.push(row);
    }
    Ok(TrajectoryTable { n, m, k, rows })
}

/// `s,znorm,w1_1,w2_1,t_f` for each outer step.
pub fn write_receding_csv<W: Write>(run: &RecedingHorizonRun, mut out: W) -> std::io::Result<()> {
    writeln!(out, "s,znorm,w1_1,w2_1,t_f")?;
    let label = run.termination.label();
    let norms = run.znorm();
    for s in 0..norms.len() {
        let (w1, w2) = match (run.w1.get(s), run.w2.get(s)) {
            (Some(a), Some(b)) => (fmt(a[0]), fmt(b[0])),
            _ => ("NaN".into(), "NaN".into()),
        };
        writeln!(out, "{s},{},{w1},{w2},{label}", fmt(norms[s]))?;
    }
    Ok(())
}

/// Parses a comma-separated list of finite numbers.
pub fn parse_vector(text: &str) -> Result<Vec<f64>, String> {
    let text = text.trim();
    if text.is_empty() {
        return Err("empty vector".into());
    }
    text.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("not a finite number: `{s}`"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{integrate_smf, FlowParams};
    use crate::problems::two_player_game_problem;

    #[test]
    fn problem_round_trip() {
        let p = two_player_game_problem();
        let file = ProblemFile::from_problem(&p).unwrap();
        let back = ProblemFile::parse(&file.to_json()).unwrap();
        assert_eq!(back, file);
        let q = back.to_problem().unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2]);
        assert_eq!(q.operator.eval(&x), p.operator.eval(&x));
        assert_eq!(q.constraints.g(&x), p.constraints.g(&x));
        assert_eq!(q.solution, p.solution);
    }

    #[test]
    fn problem_shape_errors() {
        let bad = r#"{"n": 2, "Q": [[1, 0]], "r": [0, 0]}"#;
        assert!(matches!(
            ProblemFile::parse(bad).unwrap().to_problem(),
            Err(IoError::Field { field: "Q", .. })
        ));
        let unknown = r#"{"n": 1, "Q": [[1]], "r": [0], "extra": 1}"#;
        assert!(matches!(ProblemFile::parse(unknown), Err(IoError::Json { .. })));
        let mismatched = r#"{"n": 1, "m": 1, "Q": [[1]], "r": [0], "G": [[1]], "c_g": []}"#;
        assert!(ProblemFile::parse(mismatched).unwrap().to_problem().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let p = two_player_game_problem();
        let params = FlowParams {
            t_final: 0.05,
            h: 0.01,
            ..FlowParams::default()
        };
        let tr = integrate_smf(&p.operator, &p.constraints, &DVector::from_vec(vec![1.0, 1.0]), &params).unwrap();
        let text = trajectory_csv_string(&tr);
        assert!(text.starts_with("t,x_1,x_2,u_1,u_2,u_3,u_4,gmax,hmax,field_norm,V,W,Veps\n"));
        let table = read_trajectory_csv(&text).unwrap();
        assert_eq!((table.n, table.m, table.k), (2, 4, 0));
        assert_eq!(table.rows.len(), tr.len());
        for (i, s) in tr.states.iter().enumerate() {
            assert_eq!(table.x(i), s.x);
            assert_eq!(table.rows[i][0], s.t);
        }
    }

    #[test]
    fn csv_rejects_malformed() {
        assert!(read_trajectory_csv("").is_err());
        assert!(read_trajectory_csv("t,x_1,gmax\n").is_err());
        let header = trajectory_header(1, 0, 0).join(",");
        assert!(read_trajectory_csv(&format!("{header}\n0,1,2\n")).is_err());
        assert!(read_trajectory_csv(&format!("{header}\n0,1,2,3,4,5,6,7,8\n")).is_err());
        assert!(read_trajectory_csv(&format!("{header}\n1,1,1,1,1,1,1,1\n0,1,1,1,1,1,1,1\n")).is_err());
        assert!(read_trajectory_csv(&format!("{header}\n0,a,1,1,1,1,1,1\n")).is_err());
    }

    #[test]
    fn vector_parsing() {
        assert_eq!(parse_vector("1, -2.5,3e-1").unwrap(), vec![1.0, -2.5, 0.3]);
        assert!(parse_vector("").is_err());
        assert!(parse_vector("1,,2").is_err());
        assert!(parse_vector("nan").is_err());
    }
}
