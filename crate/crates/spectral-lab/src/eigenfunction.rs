//! Quasi-plane-wave Bloch eigenfunctions, their periodic corrections and
//! step-to-step differences.
//!
//! A function is stored as Fourier coefficients `c_m` on the step-`n` dual
//! lattice: `Psi(x) = sum_m c_m exp(i <p_m(t), x>)`. With `sum |c_m|^2 = 1` the
//! `L2(Q_n)` norm equals `|Q_n|^{1/2}`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lattice::{select_indices, BlochMatrix, CellDescriptor, DualIndex, Truncation};
use crate::model::{Model, Operator};
use crate::oracle::{oracle_spectrum, Route};
use crate::potential::StepPotential;
use crate::series::{projector_series, Contour};
use crate::C64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EigenRoute {
    Oracle,
    Series,
}

/// Which reference the global phase was fixed against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseConvention {
    /// `c_j` real positive.
    PlaneWave,
    /// Inner product with the extended previous-step function real positive.
    PreviousStep,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlochEigenfunction {
    pub step: usize,
    pub cell: CellDescriptor,
    pub t: [f64; 2],
    pub momentum: [f64; 2],
    /// Index of the plane wave `exp(i <momentum, x>)`: `p_j(t) = momentum`.
    pub j: DualIndex,
    pub eigenvalue: f64,
    pub coeffs: BTreeMap<DualIndex, C64>,
    pub phase: PhaseConvention,
    pub route: EigenRoute,
    /// `||(H - eigenvalue) c|| / ||c||` in the truncated coordinates.
    pub residual: f64,
    /// Series/oracle eigenvector overlap, series route only.
    pub overlap: Option<f64>,
}

impl BlochEigenfunction {
    pub fn norm(&self) -> f64 {
        self.coeffs
            .values()
            .map(|c| c.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn coefficient(&self, m: DualIndex) -> C64 {
        self.coeffs.get(&m).copied().unwrap_or_default()
    }

    /// `(self, other)` in `L2(Q_n)` divided by `|Q_n|`.
    pub fn inner(&self, other: &Self) -> C64 {
        self.coeffs
            .iter()
            .map(|(m, c)| c * other.coefficient(*m).conj())
            .sum()
    }

    fn rotate(&mut self, phase: C64) {
        for c in self.coeffs.values_mut() {
            *c *= phase;
        }
    }

    /// Fixes the global phase so that `(self, reference)` is real positive.
    pub fn fix_phase_against(&mut self, reference: &Self) -> Result<()> {
        let ip = self.inner(reference);
        if ip.norm() == 0.0 {
            return Err(LabError::Invariant(
                "orthogonal to the previous-step function".into(),
            ));
        }
        self.rotate(ip.conj() / ip.norm());
        self.phase = PhaseConvention::PreviousStep;
        Ok(())
    }

    /// Quasiperiodic extension to a lattice refined by `factor`: `m -> factor*m + p`,
    /// where `p` is the index of `t` reduced into the finer cell.
    pub fn extend(&self, fine: &CellDescriptor, factor: u64) -> Result<Self> {
        let f = factor as i64;
        let (t_fine, p) = fine.reduce_to_cell(self.t);
        check_refinement(&self.cell, fine, factor)?;
        let map = |m: DualIndex| m * f + p;
        let coeffs = self.coeffs.iter().map(|(m, c)| (map(*m), *c)).collect();
        Ok(Self {
            step: self.step,
            cell: fine.clone(),
            t: t_fine,
            momentum: self.momentum,
            j: map(self.j),
            eigenvalue: self.eigenvalue,
            coeffs,
            phase: self.phase,
            route: self.route,
            residual: self.residual,
            overlap: self.overlap,
        })
    }

    /// Inverse of [`extend`](Self::extend); fails on an index off the coarse sublattice.
    pub fn restrict(&self, coarse: &CellDescriptor, factor: u64) -> Result<Self> {
        let f = factor as i64;
        // `t` alone loses the coarse offset; the momentum pins it
        let (t_coarse, _) = coarse.reduce_to_cell(self.momentum);
        let (_, p) = self.cell.reduce_to_cell(t_coarse);
        let unmap = |m: DualIndex| -> Result<DualIndex> {
            let (q, r) = (m - p).split(f);
            if r != DualIndex::ZERO {
                return Err(LabError::ReindexFailure { m });
            }
            Ok(q)
        };
        let mut coeffs = BTreeMap::new();
        for (m, c) in &self.coeffs {
            coeffs.insert(unmap(*m)?, *c);
        }
        Ok(Self {
            cell: coarse.clone(),
            t: t_coarse,
            j: unmap(self.j)?,
            coeffs,
            ..self.clone()
        })
    }
}

fn check_refinement(coarse: &CellDescriptor, fine: &CellDescriptor, factor: u64) -> Result<()> {
    for i in 0..2 {
        let r = fine.periods[i] / coarse.periods[i];
        if (r - factor as f64).abs() > 1e-12 * r {
            return Err(LabError::Invariant(format!(
                "period ratio {r} differs from refinement {factor}"
            )));
        }
    }
    Ok(())
}

/// Eigenfunction of `H^(n)` at momentum `x` for the unique eigenvalue in `window`.
pub fn bloch_eigenfunction(
    model: &Model,
    n: usize,
    x: [f64; 2],
    window: (f64, f64),
    route: EigenRoute,
) -> Result<BlochEigenfunction> {
    let cell = &model.step(n).cell;
    let (t, j) = cell.reduce_to_cell(x);
    let local = select_indices(
        cell,
        x,
        &Truncation::Ball {
            center: [0.0, 0.0],
            radius: model.params.eigen_radius,
        },
    );
    let indices: Vec<DualIndex> = local.iter().map(|m| *m + j).collect();
    let h = BlochMatrix::from_indices(
        cell,
        model.potential(n, Operator::Cumulative),
        [C64::new(t[0], 0.0), C64::new(t[1], 0.0)],
        indices,
        1.0,
    );
    let spec = oracle_spectrum(&h, Some(window), Route::Auto)?;
    if spec.len() != 1 {
        return Err(LabError::NotSimple { count: spec.len() });
    }
    let jpos = h.position(j).expect("plane-wave index retained");
    let oracle_vec = spec.vectors[0].clone();
    let (vector, overlap) = match route {
        EigenRoute::Oracle => (oracle_vec, None),
        EigenRoute::Series => {
            let center = 0.5 * (window.0 + window.1);
            let contour = Contour::new(center, 0.5 * (window.1 - window.0));
            let proj = projector_series(&h, jpos, 1.0, model.params.r_max, &contour)?;
            let col: Vec<C64> = proj.summed.column(jpos).iter().copied().collect();
            let nrm = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let col: Vec<C64> = col.iter().map(|z| z / nrm).collect();
            let ov = col
                .iter()
                .zip(&oracle_vec)
                .map(|(a, b)| a * b.conj())
                .sum::<C64>()
                .norm();
            if ov < model.params.overlap_bound {
                return Err(LabError::SeriesOracleMismatch { overlap: ov });
            }
            (col, Some(ov))
        }
    };
    let eigenvalue = spec.eigenvalues[0];
    let hv = h.apply(&vector);
    let residual = hv
        .iter()
        .zip(&vector)
        .map(|(a, b)| (a - b * eigenvalue).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let nrm = vector.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let anchor = vector[jpos];
    if anchor.norm() == 0.0 {
        return Err(LabError::Invariant(
            "eigenvector has no plane-wave component".into(),
        ));
    }
    let phase = anchor.conj() / anchor.norm() / nrm;
    let coeffs = h
        .indices
        .iter()
        .zip(&vector)
        .map(|(m, c)| (*m, c * phase))
        .collect();
    Ok(BlochEigenfunction {
        step: n,
        cell: cell.clone(),
        t,
        momentum: x,
        j,
        eigenvalue,
        coeffs,
        phase: PhaseConvention::PlaneWave,
        route,
        residual: residual / nrm,
        overlap,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub step: usize,
    /// Coefficients of `u`, keyed by the offset `m - j`.
    pub coefficients: BTreeMap<DualIndex, C64>,
    /// `sum |u_m|`, an upper bound of `sup |u|`.
    pub l1_bound: f64,
    /// Largest `|u|` on a uniform grid of `Q_n`.
    pub grid_max: f64,
    /// `(shell, max |c_m|)` with shells of width equal to the potential range.
    pub falloff: Vec<(usize, f64)>,
    /// Per-shell decay factor from a log-linear fit; `None` when `u = 0`.
    pub decay_ratio: Option<f64>,
}

/// Periodic correction `u` with `Psi = exp(i <momentum, x>) (1 + u)`.
pub fn plane_wave_correction(
    f: &BlochEigenfunction,
    pot: &StepPotential,
    grid: usize,
) -> CorrectionRecord {
    let mut coefficients = BTreeMap::new();
    for (m, c) in &f.coeffs {
        let u = if *m == f.j { c - 1.0 } else { *c };
        if u.norm() > 0.0 {
            coefficients.insert(*m - f.j, u);
        }
    }
    let l1_bound = coefficients.values().map(|c: &C64| c.norm()).sum();
    let a = f.cell.periods;
    let g = f.cell.spacing();
    let mut grid_max: f64 = 0.0;
    if !coefficients.is_empty() {
        let axis = |d: usize, q: i64| -> Vec<C64> {
            (0..grid)
                .map(|i| C64::from_polar(1.0, g[d] * q as f64 * a[d] * i as f64 / grid as f64))
                .collect()
        };
        let tables: Vec<(C64, Vec<C64>, Vec<C64>)> = coefficients
            .iter()
            .map(|(m, c)| (*c, axis(0, m.0), axis(1, m.1)))
            .collect();
        for i in 0..grid {
            for k in 0..grid {
                let v: C64 = tables.iter().map(|(c, ex, ey)| c * ex[i] * ey[k]).sum();
                grid_max = grid_max.max(v.norm());
            }
        }
    }
    let width = pot.range().max(g[0].min(g[1]));
    let mut shells: BTreeMap<usize, f64> = BTreeMap::new();
    for (m, c) in &f.coeffs {
        if *m == f.j {
            continue;
        }
        let d = f.cell.lattice_vector(*m - f.j);
        let s = (d[0].hypot(d[1]) / width - 1e-9).ceil().max(1.0) as usize;
        let e = shells.entry(s).or_insert(0.0);
        *e = e.max(c.norm());
    }
    let falloff: Vec<(usize, f64)> = shells.into_iter().filter(|(_, v)| *v > 0.0).collect();
    let decay_ratio = log_linear_ratio(&falloff);
    CorrectionRecord {
        step: f.step,
        coefficients,
        l1_bound,
        grid_max,
        falloff,
        decay_ratio,
    }
}

fn log_linear_ratio(points: &[(usize, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, v)| *v > 1e-300)
        .map(|(s, v)| (*s as f64, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some((sxy / sxx).exp())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub from_step: usize,
    /// `||Psi_{n+1} - ext Psi_n||_{L2(Q_{n+1})} / |Q_{n+1}|^{1/2}`.
    pub l2: f64,
    /// `sum |c_{n+1} - ext c_n|`, bounding the sup-norm difference.
    pub l1: f64,
    pub eigenvalue: f64,
    /// `c_hat * ||W_{n+1}||`.
    pub eigenvalue_bound: f64,
    pub within_bound: bool,
}

/// Differences between `next` and the quasiperiodic extension of `prev`.
/// Both must be built at the same momentum; `prev` keeps its phase.
pub fn step_delta(
    prev: &BlochEigenfunction,
    next: &BlochEigenfunction,
    refinement: u64,
    increment_norm: f64,
    c_hat: f64,
) -> Result<DeltaRecord> {
    let ext = prev.extend(&next.cell, refinement)?;
    if ext.j != next.j {
        return Err(LabError::ReindexFailure { m: ext.j });
    }
    if ext.t.iter().zip(&next.t).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(LabError::ReindexFailure { m: next.j });
    }
    let mut keys: Vec<DualIndex> = ext
        .coeffs
        .keys()
        .chain(next.coeffs.keys())
        .copied()
        .collect();
    keys.sort();
    keys.dedup();
    let (mut l2, mut l1) = (0.0, 0.0);
    for m in keys {
        let d = (next.coefficient(m) - ext.coefficient(m)).norm();
        l2 += d * d;
        l1 += d;
    }
    let eigenvalue = (next.eigenvalue - prev.eigenvalue).abs();
    let eigenvalue_bound = c_hat * increment_norm;
    Ok(DeltaRecord {
        from_step: prev.step,
        l2: l2.sqrt(),
        l1,
        eigenvalue,
        eigenvalue_bound,
        within_bound: eigenvalue <= eigenvalue_bound + 1e-12 * next.eigenvalue.abs(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub step: usize,
    pub points: usize,
    pub h: [f64; 2],
    /// RMS of `(-Delta_h + V - lambda) Psi` over the grid.
    pub residual: f64,
    /// RMS of the discretization part `(symbol_h - |p|^2) c` alone.
    pub floor: f64,
    /// Leading-order estimate `h^2/12 * ||(p1^4 + p2^4) c||`.
    pub floor_leading: f64,
    pub excess: f64,
    pub eigenvalue: f64,
}

/// Grid size per axis with `points_per_wavelength` samples of the shortest retained wave.
pub fn grid_points(f: &BlochEigenfunction, points_per_wavelength: f64) -> usize {
    let pmax = max_momentum(f);
    let a = f.cell.periods[0].max(f.cell.periods[1]);
    (a * points_per_wavelength * pmax / (2.0 * PI))
        .ceil()
        .max(4.0) as usize
}

fn max_momentum(f: &BlochEigenfunction) -> f64 {
    f.coeffs
        .keys()
        .map(|m| {
            let p = f.cell.dual_vector(*m, f.t);
            p[0].abs().max(p[1].abs())
        })
        .fold(0.0, f64::max)
}

/// Five-point finite-difference residual on a `points x points` grid of `Q_n`.
pub fn residual_check(
    f: &BlochEigenfunction,
    pot: &StepPotential,
    points: usize,
) -> Result<ResidualReport> {
    let a = f.cell.periods;
    let h = [a[0] / points as f64, a[1] / points as f64];
    let limit = 2.0 * PI / (4.0 * max_momentum(f));
    if h[0] > limit || h[1] > limit {
        return Err(LabError::UnderResolved {
            h: h[0].max(h[1]),
            limit,
        });
    }
    let modes: Vec<([f64; 2], C64)> = f
        .coeffs
        .iter()
        .map(|(m, c)| (f.cell.dual_vector(*m, f.t), *c))
        .collect();
    let psi = synthesize(&modes, h, points);
    let vmodes: Vec<([f64; 2], C64)> = pot
        .coeffs
        .iter()
        .map(|(q, w)| (pot.wavevector(*q), *w))
        .collect();
    let v = synthesize(&vmodes, h, points);
    // Bloch factors across the cell boundary: Psi(x + a e_i) = exp(i t_i a_i) Psi(x).
    let wrap = [
        C64::from_polar(1.0, f.t[0] * a[0]),
        C64::from_polar(1.0, f.t[1] * a[1]),
    ];
    let at = |i: isize, k: isize| -> C64 {
        let n = points as isize;
        let (ii, kk) = (i.rem_euclid(n), k.rem_euclid(n));
        let mut z = psi[ii as usize * points + kk as usize];
        let (si, sk) = (i.div_euclid(n), k.div_euclid(n));
        if si != 0 {
            z *= wrap[0].powi(si as i32);
        }
        if sk != 0 {
            z *= wrap[1].powi(sk as i32);
        }
        z
    };
    let lambda = f.eigenvalue;
    let mut sum = 0.0;
    for i in 0..points as isize {
        for k in 0..points as isize {
            let c = at(i, k);
            let lap = (at(i + 1, k) + at(i - 1, k) - c * 2.0) / (h[0] * h[0])
                + (at(i, k + 1) + at(i, k - 1) - c * 2.0) / (h[1] * h[1]);
            let r = -lap + (v[i as usize * points + k as usize] - lambda) * c;
            sum += r.norm_sqr();
        }
    }
    let residual = (sum / (points * points) as f64).sqrt();
    let mut floor = 0.0;
    let mut leading = 0.0;
    for (p, c) in &modes {
        let sym: f64 = (0..2)
            .map(|d| (2.0 - 2.0 * (p[d] * h[d]).cos()) / (h[d] * h[d]))
            .sum();
        let exact = p[0] * p[0] + p[1] * p[1];
        floor += ((sym - exact) * c.norm()).powi(2);
        let lead: f64 = (0..2).map(|d| h[d] * h[d] * p[d].powi(4) / 12.0).sum();
        leading += (lead * c.norm()).powi(2);
    }
    let floor = floor.sqrt();
    Ok(ResidualReport {
        step: f.step,
        points,
        h,
        residual,
        floor,
        floor_leading: leading.sqrt(),
        excess: residual - floor,
        eigenvalue: lambda,
    })
}

/// `sum_m c_m exp(i <p_m, x>)` on the grid `x = (i h0, k h1)`, row-major.
fn synthesize(modes: &[([f64; 2], C64)], h: [f64; 2], points: usize) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); points * points];
    let mut row = vec![C64::new(0.0, 0.0); points];
    for (p, c) in modes {
        let ex: Vec<C64> = (0..points)
            .map(|i| C64::from_polar(1.0, p[0] * h[0] * i as f64))
            .collect();
        for (k, r) in row.iter_mut().enumerate() {
            *r = c * C64::from_polar(1.0, p[1] * h[1] * k as f64);
        }
        for (i, e) in ex.iter().enumerate() {
            let dst = &mut out[i * points..(i + 1) * points];
            for (d, r) in dst.iter_mut().zip(&row) {
                *d += e * r;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Params;
    use crate::potential::PotentialSpec;

    fn free_model() -> Model {
        Model::new(
            PotentialSpec::free(2.0 * PI, 2.0 * PI),
            Params::default(),
            20.0,
            1,
        )
        .unwrap()
    }

    #[test]
    fn free_plane_wave() {
        let m = free_model();
        let x = [20.0 * 0.3f64.cos(), 20.0 * 0.3f64.sin()];
        let f = bloch_eigenfunction(&m, 1, x, (399.9, 400.1), EigenRoute::Oracle).unwrap();
        assert_eq!(f.coeffs.values().filter(|c| c.norm() > 0.0).count(), 1);
        assert!((f.coefficient(f.j) - 1.0).norm() < 1e-14);
        let u = plane_wave_correction(&f, m.potential(1, Operator::Cumulative), 8);
        assert_eq!(u.l1_bound, 0.0);
        assert!(u.decay_ratio.is_none());
    }

    #[test]
    fn extension_round_trip() {
        let m = free_model();
        let x = [13.1, 15.07];
        let e0 = x[0] * x[0] + x[1] * x[1];
        let f = bloch_eigenfunction(&m, 1, x, (e0 - 1e-3, e0 + 1e-3), EigenRoute::Oracle).unwrap();
        let fine = CellDescriptor::new(2, [4.0 * PI, 4.0 * PI], vec![2]);
        let e = f.extend(&fine, 2).unwrap();
        let p = fine.dual_vector(e.j, e.t);
        assert!((p[0] - x[0]).abs() < 1e-12 && (p[1] - x[1]).abs() < 1e-12);
        let back = e.restrict(&f.cell, 2).unwrap();
        assert_eq!(back.j, f.j);
        assert_eq!(back.coeffs, f.coeffs);
    }

    #[test]
    fn plane_wave_residual_is_floor() {
        let m = free_model();
        let f =
            bloch_eigenfunction(&m, 1, [12.0, 16.0], (399.9, 400.1), EigenRoute::Oracle).unwrap();
        let pot = m.potential(1, Operator::Cumulative);
        let n = grid_points(&f, 4.0);
        let r = residual_check(&f, pot, n).unwrap();
        assert!((r.residual - r.floor).abs() < 1e-9 * r.floor.max(1.0));
        assert!(residual_check(&f, pot, n / 2).is_err());
    }
}
