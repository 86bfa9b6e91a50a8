//! Plot-ready CSV/JSON tables and their schema files.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::eigenfunction::ResidualReport;
use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Curves,
    Disks,
    Intervals,
    Series,
    Deltas,
}

impl OutputKind {
    pub const ALL: [OutputKind; 5] = [
        Self::Curves,
        Self::Disks,
        Self::Intervals,
        Self::Series,
        Self::Deltas,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Curves => "curves",
            Self::Disks => "disks",
            Self::Intervals => "intervals",
            Self::Series => "series",
            Self::Deltas => "deltas",
        }
    }

    /// Pipeline stage whose completion the kind requires.
    pub fn stage(self) -> &'static str {
        match self {
            Self::Curves => "curves",
            Self::Disks | Self::Intervals => "cheese",
            Self::Series => "series",
            Self::Deltas => "deltas",
        }
    }

    fn schema(self) -> &'static str {
        match self {
            Self::Curves => CURVES_SCHEMA,
            Self::Disks => DISKS_SCHEMA,
            Self::Intervals => INTERVALS_SCHEMA,
            Self::Series => SERIES_SCHEMA,
            Self::Deltas => DELTAS_SCHEMA,
        }
    }
}

impl FromStr for OutputKind {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown output kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub phi: f64,
    pub kappa: f64,
    pub arc: usize,
    pub h: f64,
    pub dkappa: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiskRow {
    pub re_c: f64,
    pub im_c: f64,
    pub r: f64,
    pub m1: i64,
    pub m2: i64,
    pub branch: i8,
    pub step: usize,
    pub shift1: f64,
    pub shift2: f64,
    pub rule: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub step: usize,
    pub measure: f64,
    pub intervals: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub phi: f64,
    pub t1: f64,
    pub t2: f64,
    pub base: f64,
    pub value: f64,
    pub oracle: f64,
    pub discrepancy: f64,
    pub tail_bound: f64,
    pub coupling: f64,
    pub g1: f64,
    pub g2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub point: usize,
    pub phi: f64,
    pub from_step: usize,
    pub l2: f64,
    pub l1: f64,
    pub eigenvalue: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub point: usize,
    pub step: usize,
    pub m1: i64,
    pub m2: i64,
    pub re: f64,
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRow {
    pub point: usize,
    pub step: usize,
    pub l1_bound: f64,
    pub grid_max: f64,
    pub decay_ratio: Option<f64>,
}

/// Tables of one energy, as stored in `results.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tables {
    pub curves: Vec<CurveRow>,
    pub disks: Vec<DiskRow>,
    pub intervals: Vec<IntervalRecord>,
    pub series: Vec<SeriesRow>,
    pub deltas: Vec<DeltaRow>,
    pub coefficients: Vec<CoefficientRow>,
    pub corrections: Vec<CorrectionRow>,
    pub residuals: Vec<ResidualReport>,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Writes the files of `kind` into `dir`; `completed` lists finished stages.
pub fn emit_outputs(
    tables: &Tables,
    completed: &[String],
    kind: OutputKind,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if !completed.iter().any(|s| s == kind.stage()) {
        return Err(LabError::StageNotRun(kind.stage().into()));
    }
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut put = |name: &str| {
        let p = dir.join(name);
        files.push(p.clone());
        p
    };
    match kind {
        OutputKind::Curves => write_csv(&put("curves.csv"), &tables.curves)?,
        OutputKind::Disks => write_csv(&put("disks.csv"), &tables.disks)?,
        OutputKind::Intervals => write_json(&put("intervals.json"), &tables.intervals)?,
        OutputKind::Series => write_csv(&put("series.csv"), &tables.series)?,
        OutputKind::Deltas => {
            write_csv(&put("deltas.csv"), &tables.deltas)?;
            write_csv(&put("coefficients.csv"), &tables.coefficients)?;
            write_csv(&put("corrections.csv"), &tables.corrections)?;
            write_json(&put("residuals.json"), &tables.residuals)?;
        }
    }
    fs::write(put(&format!("{}.schema.txt", kind.name())), kind.schema())?;
    Ok(files)
}

const CURVES_SCHEMA: &str = "\
curves.csv: one row per isoenergetic curve sample.
  step      approximation step n
  phi       angle in [0, 2 pi)
  kappa     radius kappa_n(phi) with lambda^(n)(kappa nu(phi)) = k^2
  arc       index of the first-step interval containing phi
  h         kappa_n - kappa_{n-1}, with kappa_0 = k
  dkappa    d kappa_n / d phi by finite differences within the arc
  residual  lambda^(n)(kappa nu) - k^2 at the root
";

const DISKS_SCHEMA: &str = "\
disks.csv: removed disks in the complex angle plane.
  re_c, im_c  disk center
  r           radius
  m1, m2      dual index of the resonant mode (0, 0 for pole disks of a small shift)
  branch      +1 / -1 root branch, 0 for pole disks
  step        generation of the removal
  shift1, shift2  quasimomentum shift b (zero for the first step)
  rule        radius rule name
";

const INTERVALS_SCHEMA: &str = "\
intervals.json: list of {step, measure, intervals}.
  intervals  sorted disjoint half-open [a, b) pairs of the real angle set Theta_n
  measure    total length
";

const SERIES_SCHEMA: &str = "\
series.csv: first-step perturbation series against the oracle.
  phi          direction; t = reduce_to_cell(k nu(phi)) = (t1, t2)
  base         unperturbed level k^2
  value        series sum up to r_max
  oracle       unique oracle eigenvalue in the contour interval
  discrepancy  |value - oracle|
  tail_bound   Cauchy bound on the omitted orders
  coupling     upper bound of the contour coupling norm
  g1, g2       first two coefficients
";

const DELTAS_SCHEMA: &str = "\
deltas.csv: step differences of eigenfunctions built at one momentum per point.
  point, phi   sample index and direction
  from_step    n; the row compares Psi_{n+1} with the extension of Psi_n
  l2           coefficient l2 difference = L2(Q_{n+1}) norm / |Q_{n+1}|^(1/2)
  l1           coefficient l1 difference, bounding the sup-norm difference
  eigenvalue   |lambda^(n+1) - lambda^(n)|
  bound        c_hat * ||W_{n+1}||
coefficients.csv: point, step, m1, m2, re, im of every retained Fourier coefficient.
corrections.csv: point, step, l1_bound (sum |u_m|), grid_max (max |u| on a grid),
  decay_ratio (per-shell geometric factor of |c_m|, empty when u = 0).
residuals.json: finite-difference residual reports (h, residual, floor, floor_leading, excess).
";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            CurveRow {
                step: 1,
                phi: 0.1 + 0.2,
                kappa: 20.000000001,
                arc: 3,
                h: -1.3e-7,
                dkappa: 1e-300,
                residual: 0.0,
            },
            CurveRow {
                step: 2,
                phi: std::f64::consts::PI,
                kappa: 19.9,
                arc: 0,
                h: 5e-15,
                dkappa: -2.5,
                residual: 1e-13,
            },
        ];
        let p = dir.path().join("c.csv");
        write_csv(&p, &rows).unwrap();
        assert_eq!(read_csv::<CurveRow>(&p).unwrap(), rows);
    }

    #[test]
    fn missing_stage_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err =
            emit_outputs(&Tables::default(), &[], OutputKind::Deltas, dir.path()).unwrap_err();
        assert!(matches!(err, LabError::StageNotRun(_)));
    }
}
