//! Parameters and per-step operator data for one energy scale `k`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lattice::{BlochMatrix, CellDescriptor, DualIndex, Truncation};
use crate::potential::{
    build_step_potential, scale_cuts, validate_spec, PotentialSpec, StepPotential,
};
use crate::series::{coupling_estimate, rs_terms, spectral_series, Contour};
use crate::C64;

/// Exponents and desk-scale policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// s1: first-step lattice exponent, `2^{M_1} ~ k^{s1}`.
    pub s1: f64,
    /// delta: strip and measure exponent.
    pub delta: f64,
    /// beta: non-resonance exponent of the first step.
    pub beta: f64,
    /// beta1: exponent of the shifted radii.
    pub beta1: f64,
    /// Enables the asymptotic parameter ranges and sup-norm bounds.
    pub strict: bool,
    /// Prefactor applied to every resonance-disk radius.
    pub radius_scale: f64,
    /// Upper clamp on shifted-disk radii; default `k^{-delta}/2`.
    pub shift_radius_cap: Option<f64>,
    /// Ratio of successive desk contour scales, `eps_n = ratio * eps_{n-1}`.
    pub eps_ratio: f64,
    /// c-hat: prefactor of the step windows and delta bounds.
    pub c_hat: f64,
    pub r_max: usize,
    /// Half-width of the energy-shell truncation used by global oracles.
    pub shell_half_width: f64,
    /// Ball radius of local matrices at steps two and above.
    pub local_radius: f64,
    /// Momentum-ball radius of eigenfunction coefficient tables.
    pub eigen_radius: f64,
    /// Explicit scale cuts `M_1..M_n`; computed from `k` when absent.
    pub scale_cuts: Option<Vec<u32>>,
    /// Components with more disks than this are not pole-counted.
    pub component_disk_bound: usize,
    pub resolvent_ceiling: f64,
    /// Minimal overlap between the series and oracle eigenvectors.
    pub overlap_bound: f64,
    /// Relative residual tolerance of curve roots.
    pub solver_tol: f64,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            s1: 0.2,
            delta: 0.05,
            beta: 0.3,
            beta1: 0.1,
            strict: false,
            radius_scale: 0.45,
            shift_radius_cap: None,
            eps_ratio: 1e-3,
            c_hat: 16.0,
            r_max: 8,
            shell_half_width: 2.5,
            local_radius: 2.0,
            eigen_radius: 4.0,
            scale_cuts: None,
            component_disk_bound: 64,
            resolvent_ceiling: 1e12,
            overlap_bound: 0.999,
            solver_tol: 1e-10,
        }
    }
}

impl Params {
    /// beta0 with `2 beta0 = 1 - 15 s1 - 9 delta`.
    pub fn beta0(&self) -> f64 {
        0.5 * (1.0 - 15.0 * self.s1 - 9.0 * self.delta)
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if !(self.s1 > 0.0 && self.s1 < 1.0) {
            issues.push(format!("s1 = {} outside (0, 1)", self.s1));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            issues.push(format!("delta = {} outside (0, 1)", self.delta));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            issues.push(format!("beta = {} outside (0, 1)", self.beta));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0) {
            issues.push(format!("beta1 = {} outside [0, 1)", self.beta1));
        }
        if !(self.radius_scale > 0.0) {
            issues.push("radius_scale must be positive".into());
        }
        if !(self.eps_ratio > 0.0 && self.eps_ratio < 1.0) {
            issues.push("eps_ratio must lie in (0, 1)".into());
        }
        if !(self.c_hat > 0.0
            && self.shell_half_width > 0.0
            && self.local_radius > 0.0
            && self.eigen_radius > 0.0
            && self.solver_tol > 0.0)
        {
            issues.push("c_hat, shell_half_width, local_radius, eigen_radius and solver_tol must be positive".into());
        }
        if self.r_max < 2 {
            issues.push("r_max must be at least 2".into());
        }
        if self.strict {
            if !(self.s1 > 1e-4 && self.s1 < 1e-3) {
                issues.push(format!("strict: s1 = {} outside (1e-4, 1e-3)", self.s1));
            }
            if !(self.delta < self.s1) {
                issues.push("strict: delta must be below s1".into());
            }
            let two_beta = 2.0 * self.beta;
            if !(4.0 * self.s1 < two_beta && two_beta <= 1.0 - 15.0 * self.s1 - 8.0 * self.delta) {
                issues.push(format!(
                    "strict: beta = {} outside its admissible range",
                    self.beta
                ));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(LabError::Validation(issues.join("; ")))
        }
    }
}

/// Operators of step `n` on its own lattice.
#[derive(Clone, Debug)]
pub struct StepData {
    pub n: usize,
    pub cell: CellDescriptor,
    /// `W_1 + ... + W_n`.
    pub cumulative: StepPotential,
    /// `W_n`.
    pub increment: StepPotential,
    /// `W_1 + ... + W_{n-1}` re-indexed onto this lattice.
    pub previous: StepPotential,
    /// Refinement factor relative to the previous step's lattice.
    pub refinement: u64,
}

/// Which potential a local or global matrix carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operator {
    Cumulative,
    Previous,
    Increment,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: PotentialSpec,
    pub params: Params,
    pub k: f64,
    pub lambda: f64,
    pub cuts: Vec<u32>,
    pub steps: Vec<StepData>,
}

/// Tracked eigenvalue at a momentum with its convergence diagnostics.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Tracked {
    pub value: f64,
    pub coupling: f64,
}

pub const MAX_STEPS: usize = 3;
/// Largest scale cut; cell periods grow as `2^cut`.
pub const MAX_CUT: u32 = 40;

impl Model {
    pub fn new(spec: PotentialSpec, params: Params, k: f64, steps: usize) -> Result<Self> {
        params.validate()?;
        let report = validate_spec(&spec, params.strict);
        if !report.is_valid() {
            return Err(LabError::Validation(report.summary()));
        }
        if !(k > 1.0) || !(1..=MAX_STEPS).contains(&steps) {
            return Err(LabError::Config(format!(
                "need k > 1 and steps in 1..={MAX_STEPS} (k = {k}, steps = {steps})"
            )));
        }
        let cuts = match &params.scale_cuts {
            Some(c) if c.len() >= steps => c[..steps].to_vec(),
            Some(c) => {
                return Err(LabError::Config(format!(
                    "scale_cuts has {} entries, need {steps}",
                    c.len()
                )))
            }
            None => scale_cuts(k, params.s1, steps),
        };
        if cuts[0] == 0 || cuts.windows(2).any(|w| w[1] <= w[0]) || cuts[steps - 1] > MAX_CUT {
            return Err(LabError::Config(format!(
                "scale cuts {cuts:?} must increase strictly within 1..={MAX_CUT}"
            )));
        }
        let mut data = Vec::with_capacity(steps);
        for n in 1..=steps {
            let increment = build_step_potential(&spec, n, &cuts)?;
            let m_n = cuts[n - 1];
            let m_prev = if n == 1 { 0 } else { cuts[n - 2] };
            let f = 2f64.powi(m_n as i32 - 1);
            let refinements: Vec<u64> = (1..n).map(|i| 1u64 << (cuts[i] - cuts[i - 1])).collect();
            let cell = CellDescriptor::new(n, [f * spec.d1, f * spec.d2], refinements);
            let cumulative = StepPotential::from_scales(&spec, n, 1, m_n, m_n);
            let mut previous = StepPotential::from_scales(&spec, n, 1, m_prev, m_n);
            previous.m_n = m_prev;
            data.push(StepData {
                n,
                cell,
                cumulative,
                increment,
                previous,
                refinement: 1u64 << (m_n - m_prev),
            });
        }
        data[0].refinement = 1;
        let model = Self {
            spec,
            params,
            k,
            lambda: k * k,
            cuts,
            steps: data,
        };
        for n in 1..steps {
            let next = model.steps[n].increment.norm;
            if next > 0.1 * model.eps_hat(n) {
                return Err(LabError::Validation(format!(
                    "contour scale eps_{n} = {:e} is not large against ||W_{}|| = {next:e}",
                    model.eps_hat(n),
                    n + 1
                )));
            }
        }
        Ok(model)
    }

    pub fn step(&self, n: usize) -> &StepData {
        &self.steps[n - 1]
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn s_n(&self, n: usize) -> f64 {
        2f64.powi(n as i32 - 1) * self.params.s1
    }

    /// Half-width of the complex angle strip, `k^{-delta}`.
    pub fn strip_half_width(&self) -> f64 {
        self.k.powf(-self.params.delta)
    }

    /// Step-one contour radius `k^{2 beta - 1 - s1 - delta}`; later steps use `eps_{n-1}/2`.
    pub fn contour_radius(&self, n: usize) -> f64 {
        let p = &self.params;
        if n <= 1 {
            self.k.powf(2.0 * p.beta - 1.0 - p.s1 - p.delta)
        } else {
            0.5 * self.eps_hat(n - 1)
        }
    }

    /// Desk contour scale, `eps_0` equal to the step-one contour radius.
    pub fn eps_hat(&self, n: usize) -> f64 {
        self.contour_radius(1) * self.params.eps_ratio.powi(n as i32)
    }

    /// Pole-disk radius `r^(n)` and whether the `1e-12` clamp was applied.
    pub fn pole_radius(&self, n: usize) -> (f64, bool) {
        let p = &self.params;
        let mut r = self.k.powf(-4.0 - 6.0 * p.s1 - 3.0 * p.delta);
        for m in 2..=n {
            r *= self.k.powf(-2.0 - 4.0 * self.s_n(m) - p.delta);
        }
        if r < 1e-12 {
            (1e-12, true)
        } else {
            (r, false)
        }
    }

    /// Regime threshold `k^{-1 - 16 s1 - 12 delta}` on the corner distance.
    pub fn small_b_threshold(&self) -> f64 {
        let p = &self.params;
        self.k.powf(-1.0 - 16.0 * p.s1 - 12.0 * p.delta)
    }

    /// Step-one lattice vectors `q` with `0 < p_q < k^{s1}`.
    pub fn neighbor_set(&self) -> Vec<(DualIndex, [f64; 2])> {
        let cell = &self.step(1).cell;
        let lim = self.k.powf(self.params.s1);
        let g = cell.spacing();
        let n0 = (lim / g[0]).ceil() as i64;
        let n1 = (lim / g[1]).ceil() as i64;
        let mut out = Vec::new();
        for a in -n0..=n0 {
            for b in -n1..=n1 {
                let q = DualIndex(a, b);
                let p = cell.lattice_vector(q);
                let len = p[0].hypot(p[1]);
                if len > 0.0 && len < lim {
                    out.push((q, p));
                }
            }
        }
        out
    }

    pub fn potential(&self, n: usize, op: Operator) -> &StepPotential {
        let s = self.step(n);
        match op {
            Operator::Cumulative => &s.cumulative,
            Operator::Previous => &s.previous,
            Operator::Increment => &s.increment,
        }
    }

    /// Ball radius of the local matrix at step `n`: at step one, enough hops
    /// that every closed walk of length `r_max` through the tracked mode fits.
    pub fn local_radius(&self, n: usize) -> f64 {
        if n == 1 {
            let range = self
                .step(1)
                .cumulative
                .range()
                .max(self.step(1).cell.spacing()[0]);
            range * (self.params.r_max as f64 / 2.0).ceil() + 1e-9
        } else {
            self.params.local_radius
        }
    }

    /// Matrix in the momentum frame: mode `0` sits at momentum `x`.
    pub fn local_matrix(&self, n: usize, x: [f64; 2], op: Operator) -> BlochMatrix {
        self.local_matrix_radius(n, x, op, self.local_radius(n))
    }

    pub fn local_matrix_radius(
        &self,
        n: usize,
        x: [f64; 2],
        op: Operator,
        radius: f64,
    ) -> BlochMatrix {
        let cell = &self.step(n).cell;
        let idx = crate::lattice::select_indices(
            cell,
            x,
            &Truncation::Ball {
                center: [0.0, 0.0],
                radius,
            },
        );
        BlochMatrix::from_indices(
            cell,
            self.potential(n, op),
            [C64::new(x[0], 0.0), C64::new(x[1], 0.0)],
            idx,
            1.0,
        )
    }

    /// Energy-shell truncation at quasimomentum `t`.
    pub fn shell_truncation(&self, width_factor: f64) -> Truncation {
        let w = self.params.shell_half_width * width_factor;
        Truncation::Shell {
            inner: (self.k - w).max(0.0),
            outer: self.k + w,
        }
    }

    pub fn shell_matrix(
        &self,
        n: usize,
        t: [f64; 2],
        op: Operator,
        width_factor: f64,
    ) -> Result<BlochMatrix> {
        BlochMatrix::assemble(
            &self.step(n).cell,
            self.potential(n, op),
            t,
            &self.shell_truncation(width_factor),
        )
    }

    /// Eigenvalue `lambda^(n)(x)` of the mode that starts at momentum `x`.
    pub fn tracked_eigenvalue(&self, n: usize, x: [f64; 2]) -> Result<Tracked> {
        if n == 1 {
            let h = self.local_matrix(1, x, Operator::Cumulative);
            let j = h.position(DualIndex::ZERO).expect("origin in ball");
            let contour = Contour::new(h.diag[j].re, self.contour_radius(1));
            let a = coupling_estimate(&h, &contour, 16);
            if a >= 1.0 {
                return Err(LabError::OutsidePerturbativeRegime { estimate: a });
            }
            let g = rs_terms(&h, j, self.params.r_max)?;
            Ok(Tracked {
                value: g.iter().map(|z| z.re).sum(),
                coupling: a,
            })
        } else {
            let prev = self.local_matrix(n, x, Operator::Previous);
            let incr = self.local_matrix(n, x, Operator::Increment);
            let j = prev.position(DualIndex::ZERO).expect("origin in ball");
            let s = spectral_series(&prev, &incr, j, self.params.r_max, self.contour_radius(n))?;
            Ok(Tracked {
                value: s.value,
                coupling: s.coupling,
            })
        }
    }

    /// Unit direction.
    pub fn direction(phi: f64) -> [f64; 2] {
        [phi.cos(), phi.sin()]
    }

    /// Periods of the step-`n` lattice in units of the base periods.
    pub fn period_factor(&self, n: usize) -> f64 {
        self.step(n).cell.periods[0] / self.spec.d1
    }
}

/// Angle of a vector in `[0, 2 pi)`.
pub fn angle_of(v: [f64; 2]) -> f64 {
    v[1].atan2(v[0]).rem_euclid(2.0 * PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_params_valid_and_beta0_negative() {
        let p = Params::default();
        p.validate().unwrap();
        assert!(p.beta0() < 0.0);
    }

    #[test]
    fn free_model_has_degenerate_free_eigenvalue() {
        let m = Model::new(
            PotentialSpec::free(2.0 * PI, 2.0 * PI),
            Params::default(),
            20.0,
            1,
        )
        .unwrap();
        let v = m.tracked_eigenvalue(1, [3.0, 19.0]).unwrap();
        assert_eq!(v.value, 9.0 + 361.0);
    }
}
