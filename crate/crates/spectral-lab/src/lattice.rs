//! Dual lattices, quasimomentum reduction and truncated Bloch matrices.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::potential::StepPotential;
use crate::C64;

/// Integer point of a dual lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DualIndex(pub i64, pub i64);

impl Add for DualIndex {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        DualIndex(self.0 + o.0, self.1 + o.1)
    }
}

impl Sub for DualIndex {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        DualIndex(self.0 - o.0, self.1 - o.1)
    }
}

impl Neg for DualIndex {
    type Output = Self;
    fn neg(self) -> Self {
        DualIndex(-self.0, -self.1)
    }
}

impl Mul<i64> for DualIndex {
    type Output = Self;
    fn mul(self, f: i64) -> Self {
        DualIndex(self.0 * f, self.1 * f)
    }
}

impl DualIndex {
    pub const ZERO: DualIndex = DualIndex(0, 0);

    /// Splits `m = n*j + p` with `p` in `[0, n)^2`.
    pub fn split(self, n: i64) -> (DualIndex, DualIndex) {
        let j = DualIndex(self.0.div_euclid(n), self.1.div_euclid(n));
        let p = DualIndex(self.0.rem_euclid(n), self.1.rem_euclid(n));
        (j, p)
    }
}

/// Periods and refinement history of the step-`n` lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDescriptor {
    pub step: usize,
    pub periods: [f64; 2],
    pub refinements: Vec<u64>,
}

impl CellDescriptor {
    pub fn new(step: usize, periods: [f64; 2], refinements: Vec<u64>) -> Self {
        assert!(
            periods[0] > 0.0 && periods[1] > 0.0,
            "periods must be positive"
        );
        Self {
            step,
            periods,
            refinements,
        }
    }

    /// Side lengths of the dual cell `K_n`.
    pub fn spacing(&self) -> [f64; 2] {
        [2.0 * PI / self.periods[0], 2.0 * PI / self.periods[1]]
    }

    pub fn dual_area(&self) -> f64 {
        let g = self.spacing();
        g[0] * g[1]
    }

    pub fn lattice_vector(&self, j: DualIndex) -> [f64; 2] {
        let g = self.spacing();
        [g[0] * j.0 as f64, g[1] * j.1 as f64]
    }

    /// `p_j(t) = 2 pi j / A + t`.
    pub fn dual_vector(&self, j: DualIndex, t: [f64; 2]) -> [f64; 2] {
        let v = self.lattice_vector(j);
        [v[0] + t[0], v[1] + t[1]]
    }

    /// Unique `(t, j)` with `v = dual_vector(j, t)` and `t` in `K_n`.
    pub fn reduce_to_cell(&self, v: [f64; 2]) -> ([f64; 2], DualIndex) {
        let g = self.spacing();
        let mut t = [0.0; 2];
        let mut j = [0i64; 2];
        for i in 0..2 {
            let mut ji = (v[i] / g[i]).floor() as i64;
            let mut ti = v[i] - ji as f64 * g[i];
            if ti >= g[i] {
                ji += 1;
                ti -= g[i];
            }
            if ti < 0.0 {
                ji -= 1;
                ti += g[i];
                if ti >= g[i] {
                    ti = 0.0;
                    ji += 1;
                }
            }
            t[i] = ti;
            j[i] = ji;
        }
        (t, DualIndex(j[0], j[1]))
    }

    pub fn contains(&self, t: [f64; 2]) -> bool {
        let g = self.spacing();
        (0..2).all(|i| t[i] >= 0.0 && t[i] < g[i])
    }

    /// Distance from `b` to the nearest corner of `K_n`.
    pub fn corner_distance(&self, b: [f64; 2]) -> f64 {
        let g = self.spacing();
        let dx = b[0].min(g[0] - b[0]);
        let dy = b[1].min(g[1] - b[1]);
        dx.hypot(dy)
    }
}

/// Index selection around a momentum `x`; `|x + p_m|` is measured per mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Truncation {
    /// `|x + p_m| <= radius`.
    Disk { radius: f64 },
    /// `|p_m - center| <= radius`, lattice-relative ball.
    Ball { center: [f64; 2], radius: f64 },
    /// `inner <= |x + p_m| <= outer`.
    Shell { inner: f64, outer: f64 },
}

impl Truncation {
    /// Same shape with every radius multiplied by `f` (shell widened about its midline).
    pub fn scaled(&self, f: f64) -> Self {
        match *self {
            Truncation::Disk { radius } => Truncation::Disk { radius: radius * f },
            Truncation::Ball { center, radius } => Truncation::Ball {
                center,
                radius: radius * f,
            },
            Truncation::Shell { inner, outer } => {
                let mid = 0.5 * (inner + outer);
                let half = 0.5 * (outer - inner) * f;
                Truncation::Shell {
                    inner: (mid - half).max(0.0),
                    outer: mid + half,
                }
            }
        }
    }
}

/// Indices retained by `trunc` for momentum `x`, in lexicographic order.
pub fn select_indices(cell: &CellDescriptor, x: [f64; 2], trunc: &Truncation) -> Vec<DualIndex> {
    let g = cell.spacing();
    let (c, r_out) = match *trunc {
        Truncation::Disk { radius } => ([-x[0], -x[1]], radius),
        Truncation::Ball { center, radius } => (center, radius),
        Truncation::Shell { outer, .. } => ([-x[0], -x[1]], outer),
    };
    let lo0 = ((c[0] - r_out) / g[0]).floor() as i64;
    let hi0 = ((c[0] + r_out) / g[0]).ceil() as i64;
    let lo1 = ((c[1] - r_out) / g[1]).floor() as i64;
    let hi1 = ((c[1] + r_out) / g[1]).ceil() as i64;
    let mut out = Vec::new();
    for j0 in lo0..=hi0 {
        for j1 in lo1..=hi1 {
            let p = [g[0] * j0 as f64, g[1] * j1 as f64];
            let keep = match *trunc {
                Truncation::Disk { radius } => (p[0] + x[0]).hypot(p[1] + x[1]) <= radius,
                Truncation::Ball { center, radius } => {
                    (p[0] - center[0]).hypot(p[1] - center[1]) <= radius
                }
                Truncation::Shell { inner, outer } => {
                    let a = (p[0] + x[0]).hypot(p[1] + x[1]);
                    a >= inner && a <= outer
                }
            };
            if keep {
                out.push(DualIndex(j0, j1));
            }
        }
    }
    out
}

/// `x1^2 + x2^2` without conjugation.
pub fn bilinear_sq(x: [C64; 2]) -> C64 {
    x[0] * x[0] + x[1] * x[1]
}

/// Truncated `H(t)_{mq} = |p_m(t)|_*^2 delta_{mq} + w_{m-q}` in sparse row form.
#[derive(Clone, Debug)]
pub struct BlochMatrix {
    pub cell: CellDescriptor,
    pub momentum: [C64; 2],
    pub indices: Vec<DualIndex>,
    pub diag: Vec<C64>,
    /// Off-diagonal entries per row as `(column, value)`.
    pub rows: Vec<Vec<(usize, C64)>>,
    lookup: HashMap<DualIndex, usize>,
}

impl BlochMatrix {
    /// Real quasimomentum assembly.
    pub fn assemble(
        cell: &CellDescriptor,
        pot: &StepPotential,
        t: [f64; 2],
        trunc: &Truncation,
    ) -> Result<Self> {
        let indices = select_indices(cell, t, trunc);
        if indices.len() < 5 {
            return Err(LabError::CutoffTooSmall { dim: indices.len() });
        }
        Ok(Self::from_indices(
            cell,
            pot,
            [C64::new(t[0], 0.0), C64::new(t[1], 0.0)],
            indices,
            1.0,
        ))
    }

    /// Assembly on an explicit index list, complex momentum and coupling `alpha`.
    pub fn from_indices(
        cell: &CellDescriptor,
        pot: &StepPotential,
        momentum: [C64; 2],
        indices: Vec<DualIndex>,
        alpha: f64,
    ) -> Self {
        let lookup: HashMap<DualIndex, usize> =
            indices.iter().enumerate().map(|(i, j)| (*j, i)).collect();
        let diag = indices
            .iter()
            .map(|j| {
                let l = cell.lattice_vector(*j);
                bilinear_sq([momentum[0] + l[0], momentum[1] + l[1]])
            })
            .collect();
        let rows = indices
            .iter()
            .map(|m| {
                let mut row: Vec<(usize, C64)> = pot
                    .coeffs
                    .iter()
                    .filter_map(|(q, w)| lookup.get(&(*m - *q)).map(|&c| (c, *w * alpha)))
                    .collect();
                row.sort_by_key(|e| e.0);
                row
            })
            .collect();
        Self {
            cell: cell.clone(),
            momentum,
            indices,
            diag,
            rows,
            lookup,
        }
    }

    pub fn from_parts(
        cell: CellDescriptor,
        momentum: [C64; 2],
        indices: Vec<DualIndex>,
        diag: Vec<C64>,
        rows: Vec<Vec<(usize, C64)>>,
    ) -> Self {
        let lookup = indices.iter().enumerate().map(|(i, j)| (*j, i)).collect();
        Self {
            cell,
            momentum,
            indices,
            diag,
            rows,
            lookup,
        }
    }

    /// Same matrix with every off-diagonal entry multiplied by `alpha`.
    pub fn with_coupling(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.rows {
            for e in row.iter_mut() {
                e.1 *= alpha;
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    pub fn position(&self, j: DualIndex) -> Option<usize> {
        self.lookup.get(&j).copied()
    }

    pub fn is_real_momentum(&self) -> bool {
        self.momentum[0].im == 0.0 && self.momentum[1].im == 0.0
    }

    /// Momentum `x + p_m` of row `i` (real part for complex momenta).
    pub fn mode_momentum(&self, i: usize) -> [f64; 2] {
        let l = self.cell.lattice_vector(self.indices[i]);
        [self.momentum[0].re + l[0], self.momentum[1].re + l[1]]
    }

    /// Maximal row sum of off-diagonal moduli.
    pub fn offdiag_row_sum(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.iter().map(|e| e.1.norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        if self.diag.iter().any(|d| d.im.abs() > tol) {
            return false;
        }
        self.rows.iter().enumerate().all(|(i, row)| {
            row.iter().all(|&(c, v)| {
                let back = self.rows[c].iter().find(|e| e.0 == i).map(|e| e.1);
                back.is_some_and(|b| (b - v.conj()).norm() <= tol)
            })
        })
    }

    pub fn is_real(&self) -> bool {
        self.diag.iter().all(|d| d.im == 0.0) && self.rows.iter().flatten().all(|e| e.1.im == 0.0)
    }

    /// `y = H x`.
    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        (0..self.dim())
            .map(|i| self.diag[i] * x[i] + self.rows[i].iter().map(|&(c, v)| v * x[c]).sum::<C64>())
            .collect()
    }

    /// Off-diagonal part only.
    pub fn apply_offdiag(&self, x: &[C64]) -> Vec<C64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn dense(&self) -> DMatrix<C64> {
        let n = self.dim();
        let mut m = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            for &(c, v) in &self.rows[i] {
                m[(i, c)] += v;
            }
        }
        m
    }

    /// Dense matrix with `shift` subtracted from the diagonal.
    pub fn dense_shifted(&self, shift: C64) -> DMatrix<C64> {
        let mut m = self.dense();
        for i in 0..self.dim() {
            m[(i, i)] -= shift;
        }
        m
    }

    /// Writes the index map as `ordinal,j1,j2`.
    pub fn dump_index_map<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["ordinal", "j1", "j2"])?;
        for (i, j) in self.indices.iter().enumerate() {
            wr.write_record([i.to_string(), j.0.to_string(), j.1.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Writes nonzero entries as `row,col,re,im`.
    pub fn dump_entries<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["row", "col", "re", "im"])?;
        for i in 0..self.dim() {
            let mut entries = vec![(i, self.diag[i])];
            entries.extend(self.rows[i].iter().copied());
            entries.sort_by_key(|e| e.0);
            for (c, v) in entries {
                wr.write_record([
                    i.to_string(),
                    c.to_string(),
                    format!("{:e}", v.re),
                    format!("{:e}", v.im),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Index `j` minimizing `| |p_j(t)|^2 - lambda |`, ties broken lexicographically.
pub fn nearest_index(cell: &CellDescriptor, t: [f64; 2], lambda: f64) -> DualIndex {
    let k = lambda.max(0.0).sqrt();
    let g = cell.spacing();
    let pad = g[0].hypot(g[1]) + 1e-9;
    let cand = select_indices(
        cell,
        t,
        &Truncation::Shell {
            inner: (k - pad).max(0.0),
            outer: k + pad,
        },
    );
    let mut best = (f64::INFINITY, DualIndex::ZERO);
    for j in cand {
        let p = cell.dual_vector(j, t);
        let d = (p[0] * p[0] + p[1] * p[1] - lambda).abs();
        if d < best.0 || (d == best.0 && j < best.1) {
            best = (d, j);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{PotentialSpec, ScaleComponent};
    use std::collections::BTreeMap;

    fn unit_cell() -> CellDescriptor {
        CellDescriptor::new(1, [2.0 * PI, 2.0 * PI], vec![])
    }

    #[test]
    fn dual_vector_basics() {
        let c = unit_cell();
        assert_eq!(c.dual_vector(DualIndex::ZERO, [0.3, 0.4]), [0.3, 0.4]);
        assert_eq!(c.dual_vector(DualIndex(1, 0), [0.0, 0.0]), [1.0, 0.0]);
    }

    #[test]
    fn reduce_shifted_by_period() {
        let c = unit_cell();
        let (t, j) = c.reduce_to_cell([1.25, 0.5]);
        assert_eq!(j, DualIndex(1, 0));
        assert!((t[0] - 0.25).abs() < 1e-15 && t[1] == 0.5);
        assert_eq!(
            c.reduce_to_cell([0.25, 0.5]),
            ([0.25, 0.5], DualIndex::ZERO)
        );
    }

    #[test]
    fn split_round_trip() {
        for m in [DualIndex(5, -3), DualIndex(-1, -1), DualIndex(0, 7)] {
            let (j, p) = m.split(2);
            assert_eq!(j * 2 + p, m);
            assert!(p.0 >= 0 && p.0 < 2 && p.1 >= 0 && p.1 < 2);
        }
    }

    #[test]
    fn free_matrix_is_diagonal() {
        let c = unit_cell();
        let pot = StepPotential::from_scales(&PotentialSpec::free(2.0 * PI, 2.0 * PI), 1, 1, 1, 1);
        let m =
            BlochMatrix::assemble(&c, &pot, [0.1, 0.2], &Truncation::Disk { radius: 5.0 }).unwrap();
        for i in 0..m.dim() {
            let p = m.mode_momentum(i);
            assert_eq!(m.diag[i].re, p[0] * p[0] + p[1] * p[1]);
            assert!(m.rows[i].is_empty());
        }
    }

    #[test]
    fn cosine_pattern() {
        let c = unit_cell();
        let mut coeffs = BTreeMap::new();
        for q in [
            DualIndex(1, 0),
            DualIndex(-1, 0),
            DualIndex(0, 1),
            DualIndex(0, -1),
        ] {
            coeffs.insert(q, C64::new(1.0, 0.0));
        }
        let spec = PotentialSpec {
            d1: 2.0 * PI,
            d2: 2.0 * PI,
            r0: 1.5,
            eta: 1.0,
            c_hat: 1.0,
            scales: vec![ScaleComponent { r: 1, coeffs }],
        };
        let pot = StepPotential::from_scales(&spec, 1, 1, 1, 1);
        let m =
            BlochMatrix::assemble(&c, &pot, [0.1, 0.2], &Truncation::Disk { radius: 6.0 }).unwrap();
        assert!(m.is_hermitian(1e-12));
        let d = m.dense();
        for a in 0..m.dim() {
            for b in 0..m.dim() {
                if a == b {
                    continue;
                }
                let diff = m.indices[a] - m.indices[b];
                let expect = if diff.0.abs() + diff.1.abs() == 1 {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(d[(a, b)].re, expect);
            }
        }
    }

    #[test]
    fn cutoff_too_small() {
        let c = unit_cell();
        let pot = StepPotential::from_scales(&PotentialSpec::free(2.0 * PI, 2.0 * PI), 1, 1, 1, 1);
        assert!(matches!(
            BlochMatrix::assemble(&c, &pot, [0.5, 0.5], &Truncation::Disk { radius: 0.8 }),
            Err(LabError::CutoffTooSmall { .. })
        ));
    }
}
