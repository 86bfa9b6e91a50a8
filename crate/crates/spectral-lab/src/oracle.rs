//! Brute-force spectral oracle for truncated Bloch matrices.
//!
//! Two routes share one result type. The dense route diagonalizes the whole
//! truncation. The window route partitions the modes into a slow set `S`
//! (unperturbed levels near the window) and a fast set `F`, and solves the
//! nonlinear Schur-complement problem `mu = theta_i(T(mu))` with
//! `T(mu) = H_SS - H_SF (H_FF - mu)^{-1} H_FS`. Eigenvalues come out as
//! offsets from the window center, which keeps second differences in the
//! coupling accurate far below the absolute rounding level of `k^2`.

use nalgebra::{DMatrix, Schur};
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::lattice::{BlochMatrix, CellDescriptor, DualIndex, Truncation};
use crate::numeric::{hermitian_eigen, min_singular, norm2};
use crate::potential::StepPotential;
use crate::C64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Route {
    Auto,
    Dense,
    Window,
}

/// Largest dimension the automatic route diagonalizes densely.
pub const DENSE_LIMIT: usize = 400;

#[derive(Clone, Debug, Serialize)]
pub struct OracleSpectrum {
    /// Reference energy; `eigenvalues[i] = shift + offsets[i]`.
    pub shift: f64,
    pub offsets: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors aligned with `indices`.
    #[serde(skip)]
    pub vectors: Vec<Vec<C64>>,
    pub indices: Vec<DualIndex>,
    pub residuals: Vec<f64>,
    /// Set for complex-momentum input; only `complex_eigenvalues` is filled.
    pub non_hermitian: bool,
    #[serde(skip)]
    pub complex_eigenvalues: Vec<C64>,
}

impl OracleSpectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Eigenvector as a table keyed by dual index.
    pub fn vector_table(&self, i: usize) -> Vec<(DualIndex, C64)> {
        self.indices
            .iter()
            .copied()
            .zip(self.vectors[i].iter().copied())
            .collect()
    }
}

fn residual(h: &BlochMatrix, lambda: f64, v: &[C64]) -> f64 {
    let hv = h.apply(v);
    let r: Vec<C64> = hv.iter().zip(v).map(|(a, b)| a - b * lambda).collect();
    norm2(&r) / norm2(v)
}

fn check_residuals(res: &[f64], vals: &[f64]) -> Result<()> {
    for (r, l) in res.iter().zip(vals) {
        if *r > 1e-10 * (1.0 + l.abs()) {
            return Err(LabError::Numeric(format!(
                "oracle residual {r:e} at eigenvalue {l}"
            )));
        }
    }
    Ok(())
}

/// Eigenpairs of `h`, restricted to `window` when given.
pub fn oracle_spectrum(
    h: &BlochMatrix,
    window: Option<(f64, f64)>,
    route: Route,
) -> Result<OracleSpectrum> {
    if !h.is_real_momentum() || !h.is_hermitian(1e-12) {
        return non_hermitian_spectrum(h);
    }
    let use_window = match (route, window) {
        (Route::Window, Some(_)) => true,
        (Route::Auto, Some(_)) => h.dim() > DENSE_LIMIT,
        _ => false,
    };
    if use_window {
        let (lo, hi) = window.expect("window route requires a window");
        window_spectrum(h, lo, hi)
    } else {
        dense_spectrum(h, window)
    }
}

fn dense_spectrum(h: &BlochMatrix, window: Option<(f64, f64)>) -> Result<OracleSpectrum> {
    let shift = window.map(|(a, b)| 0.5 * (a + b)).unwrap_or(0.0);
    let (vals, vecs) = hermitian_eigen(&h.dense_shifted(C64::new(shift, 0.0)));
    let mut offsets = Vec::new();
    let mut vectors = Vec::new();
    for (i, &v) in vals.iter().enumerate() {
        let e = shift + v;
        if let Some((lo, hi)) = window {
            if e < lo || e > hi {
                continue;
            }
        }
        offsets.push(v);
        vectors.push(vecs.column(i).iter().copied().collect::<Vec<_>>());
    }
    let eigenvalues: Vec<f64> = offsets.iter().map(|o| shift + o).collect();
    let residuals: Vec<f64> = eigenvalues
        .iter()
        .zip(&vectors)
        .map(|(l, v)| residual(h, *l, v))
        .collect();
    check_residuals(&residuals, &eigenvalues)?;
    Ok(OracleSpectrum {
        shift,
        offsets,
        eigenvalues,
        vectors,
        indices: h.indices.clone(),
        residuals,
        non_hermitian: false,
        complex_eigenvalues: Vec::new(),
    })
}

fn non_hermitian_spectrum(h: &BlochMatrix) -> Result<OracleSpectrum> {
    let eig = Schur::new(h.dense())
        .eigenvalues()
        .ok_or_else(|| LabError::Numeric("Schur decomposition failed".into()))?;
    let mut ev: Vec<C64> = eig.iter().copied().collect();
    ev.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    Ok(OracleSpectrum {
        shift: 0.0,
        offsets: Vec::new(),
        eigenvalues: Vec::new(),
        vectors: Vec::new(),
        indices: h.indices.clone(),
        residuals: Vec::new(),
        non_hermitian: true,
        complex_eigenvalues: ev,
    })
}

/// Slow/fast partition of a Hermitian matrix about a center energy.
struct Partition<'a> {
    h: &'a BlochMatrix,
    /// Unperturbed levels relative to `center`.
    d: Vec<f64>,
    slow: Vec<usize>,
    fast: Vec<usize>,
    /// Position of a row inside `fast`, or `usize::MAX` for slow rows.
    fast_pos: Vec<usize>,
}

impl<'a> Partition<'a> {
    fn new(h: &'a BlochMatrix, center: f64, half: f64) -> Self {
        let gap = 8.0 * h.offdiag_row_sum() + 1e-3;
        let d: Vec<f64> = h.diag.iter().map(|z| z.re - center).collect();
        let mut slow = Vec::new();
        let mut fast = Vec::new();
        let mut fast_pos = vec![usize::MAX; h.dim()];
        for (i, di) in d.iter().enumerate() {
            if di.abs() <= half + gap {
                slow.push(i);
            } else {
                fast_pos[i] = fast.len();
                fast.push(i);
            }
        }
        Self {
            h,
            d,
            slow,
            fast,
            fast_pos,
        }
    }

    /// Solves `(D_F - delta + W_FF) x = b` by Jacobi sweeps.
    fn solve_fast(&self, delta: f64, b: &[C64]) -> Result<Vec<C64>> {
        let denom: Vec<f64> = self.fast.iter().map(|&i| self.d[i] - delta).collect();
        let mut x: Vec<C64> = b.iter().zip(&denom).map(|(bi, di)| bi / di).collect();
        let scale = x.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
        for _ in 0..400 {
            let mut change = 0.0f64;
            let mut next = Vec::with_capacity(x.len());
            for (fi, &row) in self.fast.iter().enumerate() {
                let mut acc = b[fi];
                for &(c, v) in &self.h.rows[row] {
                    let p = self.fast_pos[c];
                    if p != usize::MAX {
                        acc -= v * x[p];
                    }
                }
                let val = acc / denom[fi];
                change = change.max((val - x[fi]).norm());
                next.push(val);
            }
            x = next;
            if change <= 4e-16 * scale {
                return Ok(x);
            }
        }
        Err(LabError::Numeric(
            "fast-block Jacobi iteration did not converge".into(),
        ))
    }

    /// `(D_F - delta + W_FF)^{-1} W_FS` column by column.
    fn coupling_solutions(&self, delta: f64) -> Result<Vec<Vec<C64>>> {
        self.slow
            .iter()
            .map(|&s| {
                let mut rhs = vec![C64::new(0.0, 0.0); self.fast.len()];
                for &(c, v) in &self.h.rows[s] {
                    let p = self.fast_pos[c];
                    if p != usize::MAX {
                        rhs[p] = v.conj();
                    }
                }
                self.solve_fast(delta, &rhs)
            })
            .collect()
    }

    /// Offset Schur complement `T(delta)` and the solutions used to build it.
    fn schur(&self, delta: f64) -> Result<(DMatrix<C64>, Vec<Vec<C64>>)> {
        let ns = self.slow.len();
        let xs = self.coupling_solutions(delta)?;
        let mut t = DMatrix::from_element(ns, ns, C64::new(0.0, 0.0));
        let slow_pos: std::collections::HashMap<usize, usize> =
            self.slow.iter().enumerate().map(|(a, &i)| (i, a)).collect();
        for (a, &i) in self.slow.iter().enumerate() {
            t[(a, a)] += self.d[i];
            for &(c, v) in &self.h.rows[i] {
                if let Some(&b) = slow_pos.get(&c) {
                    t[(a, b)] += v;
                } else {
                    let p = self.fast_pos[c];
                    for (b, x) in xs.iter().enumerate() {
                        t[(a, b)] -= v * x[p];
                    }
                }
            }
        }
        Ok((t, xs))
    }

    /// Number of eigenvalues of `H` strictly below `center + s`.
    fn count_below(&self, s: f64) -> Result<usize> {
        let fast_below = self.fast.iter().filter(|&&i| self.d[i] < s).count();
        if self.slow.is_empty() {
            return Ok(fast_below);
        }
        let (mut t, _) = self.schur(s)?;
        for a in 0..t.nrows() {
            t[(a, a)] -= s;
        }
        let (vals, _) = hermitian_eigen(&t);
        Ok(fast_below + vals.iter().filter(|&&v| v < 0.0).count())
    }
}

fn window_spectrum(h: &BlochMatrix, lo: f64, hi: f64) -> Result<OracleSpectrum> {
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let part = Partition::new(h, center, half);
    let mut found: Vec<(f64, Vec<C64>)> = Vec::new();
    if !part.slow.is_empty() {
        let (t0, _) = part.schur(0.0)?;
        let (theta0, _) = hermitian_eigen(&t0);
        let tscale = 1.0 + t0.iter().map(|z| z.norm()).fold(0.0, f64::max) * t0.nrows() as f64;
        // level values at the last evaluated offset seed the next fixed point
        let mut seed = theta0.clone();
        for (i, &start) in theta0.iter().enumerate() {
            // T varies with delta at relative rate below 1/64
            if start.abs() * (1.0 - 1.0 / 32.0) > half {
                continue;
            }
            let mut delta = seed[i];
            let mut accepted = None;
            for _ in 0..100 {
                let (t, xs) = part.schur(delta)?;
                let (theta, vecs) = hermitian_eigen(&t);
                let slope = {
                    let c = vecs.column(i);
                    let mut xv = vec![C64::new(0.0, 0.0); part.fast.len()];
                    for (x, cb) in xs.iter().zip(c.iter()) {
                        xv.iter_mut().zip(x).for_each(|(acc, xf)| *acc += xf * cb);
                    }
                    xv.iter().map(|z| z.norm_sqr()).sum::<f64>()
                };
                let step = theta[i] - delta;
                seed.clone_from(&theta);
                if step.abs() <= 1e-15 * tscale {
                    accepted = Some((
                        theta[i],
                        vecs.column(i).iter().copied().collect::<Vec<_>>(),
                        xs,
                    ));
                    break;
                }
                // Newton on theta(delta) - delta with d theta / d delta = -|X v|^2
                delta += step / (1.0 + slope);
            }
            let Some((delta, xsl, xs)) = accepted else {
                return Err(LabError::Numeric(format!(
                    "window fixed point {i} did not converge"
                )));
            };
            if delta.abs() > half {
                continue;
            }
            let mut v = vec![C64::new(0.0, 0.0); h.dim()];
            for (a, &s) in part.slow.iter().enumerate() {
                v[s] = xsl[a];
            }
            for (fi, &f) in part.fast.iter().enumerate() {
                v[f] = -xs.iter().zip(&xsl).map(|(x, c)| x[fi] * c).sum::<C64>();
            }
            let n = norm2(&v);
            v.iter_mut().for_each(|z| *z /= n);
            found.push((delta, v));
        }
    }
    let expected = part.count_below(half)? - part.count_below(-half)?;
    if expected != found.len() {
        return Err(LabError::Numeric(format!(
            "window route found {} eigenvalues, inertia count says {expected}",
            found.len()
        )));
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    let offsets: Vec<f64> = found.iter().map(|f| f.0).collect();
    let eigenvalues: Vec<f64> = offsets.iter().map(|o| center + o).collect();
    let vectors: Vec<Vec<C64>> = found.into_iter().map(|f| f.1).collect();
    let residuals: Vec<f64> = eigenvalues
        .iter()
        .zip(&vectors)
        .map(|(l, v)| residual(h, *l, v))
        .collect();
    check_residuals(&residuals, &eigenvalues)?;
    Ok(OracleSpectrum {
        shift: center,
        offsets,
        eigenvalues,
        vectors,
        indices: h.indices.clone(),
        residuals,
        non_hermitian: false,
        complex_eigenvalues: Vec::new(),
    })
}

/// Number of eigenvalues of the Hermitian truncation below `sigma`, by inertia.
pub fn count_below(h: &BlochMatrix, sigma: f64) -> Result<usize> {
    Partition::new(h, sigma, 0.0).count_below(0.0)
}

/// Number of eigenvalues in `[lo, hi)`.
pub fn count_in_window(h: &BlochMatrix, lo: f64, hi: f64) -> Result<usize> {
    let center = 0.5 * (lo + hi);
    let part = Partition::new(h, center, 0.5 * (hi - lo));
    Ok(part.count_below(hi - center)? - part.count_below(lo - center)?)
}

/// `||(H - z)^{-1}||_2` via the smallest singular value.
pub fn resolvent_norm(h: &BlochMatrix, z: C64) -> Result<f64> {
    let sigma = min_singular(h.dense_shifted(z));
    let scale = 1.0 + z.norm();
    if sigma <= 1e-14 * scale {
        return Err(LabError::OnSpectrum { sigma });
    }
    Ok(1.0 / sigma)
}

#[derive(Clone, Debug, Serialize)]
pub struct UnionReport {
    pub refined_count: usize,
    pub union_count: usize,
    pub max_mismatch: f64,
    pub matched: Vec<(f64, f64)>,
    pub ok: bool,
    pub offending_p: Option<DualIndex>,
}

/// Quasimomentum, truncation and window of a spectrum-union comparison.
#[derive(Clone, Debug)]
pub struct UnionQuery {
    pub tau: [f64; 2],
    /// Shell of plane waves `| |p| - k | <= shell_half_width`, shared by both sides.
    pub k: f64,
    pub shell_half_width: f64,
    pub window: (f64, f64),
    /// Cosets compared; all of `P` when `None`.
    pub retain: Option<Vec<DualIndex>>,
    pub route: Route,
}

/// Compares the window spectrum of the coarse potential on the refined lattice
/// at `tau` with the union of coarse spectra at the shifted quasimomenta
/// `tau + 2 pi p / A_fine`.
pub fn refine_spectrum_union(
    coarse: &CellDescriptor,
    fine: &CellDescriptor,
    pot: &StepPotential,
    query: &UnionQuery,
) -> Result<UnionReport> {
    let UnionQuery {
        tau,
        k,
        shell_half_width,
        window,
        route,
        ..
    } = *query;
    let retain = query.retain.as_deref();
    let ratio = (fine.periods[0] / coarse.periods[0]).round() as i64;
    if ratio < 1 || ((fine.periods[1] / coarse.periods[1]).round() as i64) != ratio {
        return Err(LabError::Config(
            "refined cell must be an integer isotropic refinement".into(),
        ));
    }
    let mut fine_pot = pot.clone();
    fine_pot.coeffs = pot.coeffs.iter().map(|(q, c)| (*q * ratio, *c)).collect();
    fine_pot.periods = fine.periods;
    let trunc = Truncation::Shell {
        inner: (k - shell_half_width).max(0.0),
        outer: k + shell_half_width,
    };
    let refined = oracle_spectrum(
        &BlochMatrix::assemble(fine, &fine_pot, tau, &trunc)?,
        Some(window),
        route,
    )?;
    let all: Vec<DualIndex> = (0..ratio)
        .flat_map(|a| (0..ratio).map(move |b| DualIndex(a, b)))
        .collect();
    let ps = retain.map(|r| r.to_vec()).unwrap_or(all);
    let mut union: Vec<(f64, DualIndex)> = Vec::new();
    for p in &ps {
        let shift = fine.lattice_vector(*p);
        let t = [tau[0] + shift[0], tau[1] + shift[1]];
        let spec = oracle_spectrum(
            &BlochMatrix::assemble(coarse, pot, t, &trunc)?,
            Some(window),
            route,
        )?;
        union.extend(spec.eigenvalues.iter().map(|e| (*e, *p)));
    }
    union.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut matched = Vec::new();
    let mut max_mismatch: f64 = 0.0;
    let mut offending_p = None;
    let full = retain.is_none();
    if full {
        for (a, b) in refined.eigenvalues.iter().zip(&union) {
            let d = (a - b.0).abs();
            if d > max_mismatch {
                max_mismatch = d;
                if d > 1e-8 {
                    offending_p = Some(b.1);
                }
            }
            matched.push((*a, b.0));
        }
    } else {
        // each union value must appear in the refined spectrum
        for (e, p) in &union {
            let d = refined
                .eigenvalues
                .iter()
                .map(|r| (r - e).abs())
                .fold(f64::INFINITY, f64::min);
            if d > max_mismatch {
                max_mismatch = d;
                if d > 1e-8 {
                    offending_p = Some(*p);
                }
            }
            matched.push((*e, *e));
        }
    }
    let count_ok = if full {
        refined.len() == union.len()
    } else {
        union.len() <= refined.len()
    };
    Ok(UnionReport {
        refined_count: refined.len(),
        union_count: union.len(),
        max_mismatch,
        matched,
        ok: count_ok && max_mismatch <= 1e-8,
        offending_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{PotentialSpec, ScaleComponent};
    use std::collections::BTreeMap;
    use std::f64::consts::PI;

    fn cosine_pot(amp: f64) -> StepPotential {
        let mut coeffs = BTreeMap::new();
        for q in [
            DualIndex(1, 0),
            DualIndex(-1, 0),
            DualIndex(0, 1),
            DualIndex(0, -1),
        ] {
            coeffs.insert(q, C64::new(amp, 0.0));
        }
        let spec = PotentialSpec {
            d1: 2.0 * PI,
            d2: 2.0 * PI,
            r0: 1.5,
            eta: 1.0,
            c_hat: 1.0,
            scales: vec![ScaleComponent { r: 1, coeffs }],
        };
        StepPotential::from_scales(&spec, 1, 1, 1, 1)
    }

    fn cell() -> CellDescriptor {
        CellDescriptor::new(1, [2.0 * PI, 2.0 * PI], vec![])
    }

    #[test]
    fn free_spectrum_is_diagonal() {
        let pot = StepPotential::from_scales(&PotentialSpec::free(2.0 * PI, 2.0 * PI), 1, 1, 1, 1);
        let h = BlochMatrix::assemble(
            &cell(),
            &pot,
            [0.13, 0.41],
            &Truncation::Disk { radius: 4.0 },
        )
        .unwrap();
        let s = oracle_spectrum(&h, None, Route::Dense).unwrap();
        let mut free: Vec<f64> = h.diag.iter().map(|d| d.re).collect();
        free.sort_by(f64::total_cmp);
        for (a, b) in s.eigenvalues.iter().zip(&free) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn window_matches_dense() {
        let pot = cosine_pot(0.3);
        let h = BlochMatrix::assemble(
            &cell(),
            &pot,
            [0.21, 0.37],
            &Truncation::Disk { radius: 12.0 },
        )
        .unwrap();
        let w = (90.0, 110.0);
        let dense = oracle_spectrum(&h, Some(w), Route::Dense).unwrap();
        let win = oracle_spectrum(&h, Some(w), Route::Window).unwrap();
        assert_eq!(dense.len(), win.len());
        for (a, b) in dense.eigenvalues.iter().zip(&win.eigenvalues) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert_eq!(count_in_window(&h, w.0, w.1).unwrap(), dense.len());
    }

    #[test]
    fn resolvent_norm_free_case() {
        let pot = StepPotential::from_scales(&PotentialSpec::free(2.0 * PI, 2.0 * PI), 1, 1, 1, 1);
        let h = BlochMatrix::assemble(
            &cell(),
            &pot,
            [0.13, 0.41],
            &Truncation::Disk { radius: 4.0 },
        )
        .unwrap();
        let z = C64::new(5.3, 0.2);
        let expect = 1.0
            / h.diag
                .iter()
                .map(|d| (d - z).norm())
                .fold(f64::INFINITY, f64::min);
        let got = resolvent_norm(&h, z).unwrap();
        assert!((got - expect).abs() < 1e-10 * expect);
        let got_conj = resolvent_norm(&h, z.conj()).unwrap();
        assert!((got - got_conj).abs() < 1e-10 * got);
    }

    #[test]
    fn free_union_matches() {
        let pot = StepPotential::from_scales(&PotentialSpec::free(2.0 * PI, 2.0 * PI), 1, 1, 1, 1);
        let coarse = cell();
        let fine = CellDescriptor::new(2, [4.0 * PI, 4.0 * PI], vec![2]);
        let query = UnionQuery {
            tau: [0.1, 0.3],
            k: 10.0,
            shell_half_width: 2.0,
            window: (95.0, 105.0),
            retain: None,
            route: Route::Auto,
        };
        let rep = refine_spectrum_union(&coarse, &fine, &pot, &query).unwrap();
        assert!(rep.ok, "{rep:?}");
    }
}
