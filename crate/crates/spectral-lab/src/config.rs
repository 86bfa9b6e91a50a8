//! Run configuration, read from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{Params, MAX_STEPS};

/// Sample counts and policies of the audit stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sampling {
    /// Radius prefactors tried in order; the first whose dense audit passes is used.
    pub radius_ladder: Vec<f64>,
    /// Directions audited per ladder rung.
    pub calibration_points: usize,
    /// Directions audited on the final first-step set.
    pub audit_points: usize,
    pub series_points: usize,
    /// Curve samples per step, evenly spaced in measure.
    pub curve_samples: usize,
    pub fold_resolution: f64,
    /// Random shifts for argument-principle pole counts.
    pub shift_samples: usize,
    /// Components counted per shift, evenly spread over the component list.
    pub components_per_shift: usize,
    /// Random shifts close to a cell corner.
    pub small_shift_samples: usize,
    /// Angular grid of the small-shift gradient table.
    pub gradient_grid: usize,
    /// Quasimomenta for the refinement spectrum-union audit.
    pub union_samples: usize,
    /// Momentum half-width of the plane-wave shell in the union audit.
    pub union_shell_half_width: f64,
    pub separation_points: usize,
    pub eigen_points: usize,
    pub resolvent_checks: usize,
    pub points_per_wavelength: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            radius_ladder: vec![0.45, 0.48, 0.5, 0.55, 0.6],
            calibration_points: 2000,
            audit_points: 500,
            series_points: 100,
            curve_samples: 2000,
            fold_resolution: 1e-9,
            shift_samples: 20,
            components_per_shift: 400,
            small_shift_samples: 100,
            gradient_grid: 720,
            union_samples: 20,
            union_shell_half_width: 0.6,
            separation_points: 50,
            eigen_points: 10,
            resolvent_checks: 20,
            points_per_wavelength: 4.0,
        }
    }
}

fn default_steps() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Potential spec, relative to the config file.
    pub potential: PathBuf,
    /// Energies `lambda = k^2` of a run.
    pub k: Vec<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; `0` uses the rayon default.
    #[serde(default)]
    pub threads: usize,
    /// Output directory, relative to the config file.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Energies of the trend scan.
    #[serde(default)]
    pub scan_k: Vec<f64>,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn potential_path(&self) -> PathBuf {
        self.base_dir.join(&self.potential)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.base_dir
            .join(self.output.clone().unwrap_or_else(|| PathBuf::from("out")))
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.k.is_empty() {
            issues.push("k list is empty".to_string());
        }
        if self.k.iter().chain(&self.scan_k).any(|k| !(*k >= 2.0)) {
            issues.push("every k must be at least 2".into());
        }
        if !(1..=MAX_STEPS).contains(&self.steps) {
            issues.push(format!("steps = {} outside 1..={MAX_STEPS}", self.steps));
        }
        let s = &self.sampling;
        if s.radius_ladder.iter().any(|r| !(*r > 0.0)) {
            issues.push("radius ladder entries must be positive".into());
        }
        if !(s.fold_resolution > 0.0
            && s.union_shell_half_width > 0.0
            && s.points_per_wavelength >= 4.0)
        {
            issues.push("fold_resolution and union_shell_half_width must be positive, points_per_wavelength at least 4".into());
        }
        if s.curve_samples < 8 || s.gradient_grid < 8 {
            issues.push("curve_samples and gradient_grid must be at least 8".into());
        }
        if let Err(LabError::Validation(m)) = self.params.validate() {
            issues.push(m);
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(LabError::Validation(issues.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let cfg = RunConfig::from_toml_str(
            "potential = \"p.toml\"\nk = [20.0]\n[params]\ns1 = 0.2\n",
            Path::new("/tmp"),
        )
        .unwrap();
        assert_eq!(cfg.steps, 3);
        assert_eq!(cfg.params, Params::default());
        assert_eq!(cfg.potential_path(), PathBuf::from("/tmp/p.toml"));
        let back =
            RunConfig::from_toml_str(&cfg.to_toml_string().unwrap(), Path::new("/tmp")).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        assert!(RunConfig::from_toml_str(
            "potential = \"p\"\nk = [20.0]\nbogus = 1\n",
            Path::new(".")
        )
        .is_err());
        let cfg =
            RunConfig::from_toml_str("potential = \"p\"\nk = [20.0]\nsteps = 5\n", Path::new("."))
                .unwrap();
        assert!(matches!(cfg.validate(), Err(LabError::Validation(_))));
    }
}
