//! Perturbation series for the tracked eigenvalue and its spectral projector.
//!
//! The coefficients `g_r` are produced by the Rayleigh-Schrodinger recursion
//! in intermediate normalization, which equals the contour-integral definition
//! term by term; `g_numeric` evaluates the contour integral itself and serves
//! as the independent route.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::lattice::{BlochMatrix, DualIndex};
use crate::numeric::{hermitian_eigen, norm2};
use crate::oracle::{oracle_spectrum, Route};
use crate::C64;

/// Circle `|z - center| = radius` with trapezoidal nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Contour {
    pub center: f64,
    pub radius: f64,
    pub nodes: usize,
}

impl Contour {
    pub fn new(center: f64, radius: f64) -> Self {
        assert!(radius > 0.0);
        Self {
            center,
            radius,
            nodes: 64,
        }
    }

    /// Nodes `z_k` and weights `w_k` with `(1/2 pi i) oint f dz ~ sum w_k f(z_k)`.
    pub fn quadrature(&self, nodes: usize) -> Vec<(C64, C64)> {
        (0..nodes)
            .map(|k| {
                let th = 2.0 * PI * (k as f64 + 0.5) / nodes as f64;
                let e = C64::from_polar(1.0, th);
                (
                    C64::new(self.center, 0.0) + e * self.radius,
                    e * self.radius / nodes as f64,
                )
            })
            .collect()
    }
}

const MAX_NODES: usize = 4096;

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

/// Rayleigh-Schrodinger coefficients `g_0 = E_j, g_1, ..., g_{r_max}` for
/// `diag(e) + W`, where `apply_w` applies the coupling.
pub fn rs_recursion<F>(
    e: &[C64],
    j: usize,
    r_max: usize,
    apply_w: F,
) -> Result<(Vec<C64>, Vec<Vec<C64>>)>
where
    F: Fn(&[C64]) -> Vec<C64>,
{
    let n = e.len();
    let ej = e[j];
    let scale = 1.0 + ej.norm();
    let mut inv = vec![zero(); n];
    for m in 0..n {
        if m != j {
            let d = ej - e[m];
            if d.norm() <= 1e-14 * scale {
                return Err(LabError::ResonantIndex {
                    q: DualIndex(m as i64, j as i64),
                });
            }
            inv[m] = d.inv();
        }
    }
    let mut psi: Vec<Vec<C64>> = vec![{
        let mut v = vec![zero(); n];
        v[j] = C64::new(1.0, 0.0);
        v
    }];
    let mut lam = vec![ej];
    for order in 1..=r_max {
        let wpsi = apply_w(&psi[order - 1]);
        let l = wpsi[j];
        lam.push(l);
        let mut next = wpsi;
        for (kk, lk) in lam.iter().enumerate().take(order + 1).skip(1) {
            let prev = &psi[order - kk];
            for m in 0..n {
                next[m] -= lk * prev[m];
            }
        }
        for m in 0..n {
            next[m] = if m == j { zero() } else { next[m] * inv[m] };
        }
        psi.push(next);
    }
    Ok((lam, psi))
}

/// Series coefficients of the Bloch matrix at tracked row `j`.
pub fn rs_terms(h: &BlochMatrix, j: usize, r_max: usize) -> Result<Vec<C64>> {
    rs_recursion(&h.diag, j, r_max, |x| h.apply_offdiag(x)).map(|r| r.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct ExplicitG {
    pub order: usize,
    pub value: C64,
    /// Second algebraic form (order 2 only).
    pub alternate: Option<C64>,
    /// `G_1` entries in row and column `j`, as `(row, col, value)`.
    #[serde(skip)]
    pub g1: Vec<(usize, usize, C64)>,
}

fn check_denominator(d: C64, scale: f64, q: DualIndex) -> Result<C64> {
    if d.norm() <= 1e-14 * scale {
        Err(LabError::ResonantIndex { q })
    } else {
        Ok(d)
    }
}

/// Closed-form `g_1`, `g_2` (both algebraic forms) and `g_3`; order 1 also
/// returns the nonzero entries of `G_1`.
pub fn g_explicit(h: &BlochMatrix, j: usize, order: usize) -> Result<ExplicitG> {
    let ej = h.diag[j];
    let scale = 1.0 + ej.norm();
    let jj = h.indices[j];
    match order {
        1 => {
            let mut value = zero();
            let mut g1 = Vec::new();
            for &(m, w) in &h.rows[j] {
                if m == j {
                    value += w;
                    continue;
                }
                let d = check_denominator(ej - h.diag[m], scale, h.indices[m] - jj)?;
                g1.push((j, m, w / d));
                let back = h.rows[m]
                    .iter()
                    .find(|e| e.0 == j)
                    .map(|e| e.1)
                    .unwrap_or(w.conj());
                g1.push((m, j, back / d));
            }
            Ok(ExplicitG {
                order,
                value,
                alternate: None,
                g1,
            })
        }
        2 => {
            let x = [h.momentum[0], h.momentum[1]];
            let pj = h.cell.lattice_vector(jj);
            let xj = [x[0] + pj[0], x[1] + pj[1]];
            let mut form_a = zero();
            let mut form_b = zero();
            for &(m, w) in &h.rows[j] {
                let q = h.indices[m] - jj;
                let d = check_denominator(ej - h.diag[m], scale, q)?;
                form_a += w.norm_sqr() / d;
                let g = h.cell.lattice_vector(q);
                let plus = (xj[0] + g[0]) * (xj[0] + g[0]) + (xj[1] + g[1]) * (xj[1] + g[1]);
                let minus = (xj[0] - g[0]) * (xj[0] - g[0]) + (xj[1] - g[1]) * (xj[1] - g[1]);
                let dp = check_denominator(ej - plus, scale, q)?;
                let dm = check_denominator(ej - minus, scale, -q)?;
                let pq2 = g[0] * g[0] + g[1] * g[1];
                form_b -= w.norm_sqr() * pq2 / (dp * dm);
            }
            Ok(ExplicitG {
                order,
                value: form_a,
                alternate: Some(form_b),
                g1: Vec::new(),
            })
        }
        3 => {
            let mut value = zero();
            for &(m, wjm) in &h.rows[j] {
                if m == j {
                    continue;
                }
                let dm = check_denominator(ej - h.diag[m], scale, h.indices[m] - jj)?;
                for &(l, wml) in &h.rows[m] {
                    if l == j {
                        continue;
                    }
                    let Some(wlj) = h.rows[l].iter().find(|e| e.0 == j).map(|e| e.1) else {
                        continue;
                    };
                    let dl = check_denominator(ej - h.diag[l], scale, h.indices[l] - jj)?;
                    value += wjm * wml * wlj / (dm * dl);
                }
            }
            Ok(ExplicitG {
                order,
                value,
                alternate: None,
                g1: Vec::new(),
            })
        }
        _ => Err(LabError::Config(format!(
            "explicit coefficients exist for orders 1..=3, got {order}"
        ))),
    }
}

/// Rows of `h` within `radius` (momentum distance) of row `j`; returns the
/// submatrix and the new position of `j`.
pub fn sub_ball(h: &BlochMatrix, j: usize, radius: f64) -> (BlochMatrix, usize) {
    let c = h.mode_momentum(j);
    let keep: Vec<DualIndex> = (0..h.dim())
        .filter(|&i| {
            let p = h.mode_momentum(i);
            (p[0] - c[0]).hypot(p[1] - c[1]) <= radius + 1e-12
        })
        .map(|i| h.indices[i])
        .collect();
    let pos: HashMap<DualIndex, usize> = keep.iter().enumerate().map(|(a, b)| (*b, a)).collect();
    let old: Vec<usize> = keep
        .iter()
        .map(|k| h.position(*k).expect("index present"))
        .collect();
    let mut sub = h.clone();
    sub.indices = keep.clone();
    sub.diag = old.iter().map(|&i| h.diag[i]).collect();
    sub.rows = old
        .iter()
        .map(|&i| {
            h.rows[i]
                .iter()
                .filter_map(|&(c, v)| pos.get(&h.indices[c]).map(|&p| (p, v)))
                .collect()
        })
        .collect();
    let sub = rebuild_lookup(sub);
    let jn = pos[&h.indices[j]];
    (sub, jn)
}

fn rebuild_lookup(m: BlochMatrix) -> BlochMatrix {
    BlochMatrix::from_parts(m.cell, m.momentum, m.indices, m.diag, m.rows)
}

/// Largest momentum step of any coupling in `h`.
pub fn coupling_range(h: &BlochMatrix) -> f64 {
    let mut r: f64 = 0.0;
    for (i, row) in h.rows.iter().enumerate() {
        let a = h.mode_momentum(i);
        for &(c, _) in row {
            let b = h.mode_momentum(c);
            r = r.max((a[0] - b[0]).hypot(a[1] - b[1]));
        }
    }
    r
}

fn trace_power(h: &BlochMatrix, z: C64, r: usize) -> C64 {
    let n = h.dim();
    let mut m = DMatrix::from_element(n, n, zero());
    for i in 0..n {
        let inv = (h.diag[i] - z).inv();
        for &(c, v) in &h.rows[i] {
            m[(i, c)] = inv * v;
        }
    }
    let mut p = m.clone();
    for _ in 1..r {
        p = &p * &m;
    }
    p.trace()
}

/// Contour quadrature of `(-1)^r/(2 pi i r) oint Tr[((H_0 - z)^{-1} W)^r] dz`
/// with node doubling until the change drops below `1e-10`.
pub fn g_numeric(h: &BlochMatrix, j: usize, r: usize, contour: &Contour) -> Result<C64> {
    if r == 0 {
        return Err(LabError::Config("order must be positive".into()));
    }
    let range = coupling_range(h).max(1e-12);
    let (sub, _) = sub_ball(h, j, range * (r as f64 / 2.0).ceil() + 1e-9);
    let nearest = sub
        .diag
        .iter()
        .map(|d| ((d - C64::new(contour.center, 0.0)).norm() - contour.radius).abs())
        .fold(f64::INFINITY, f64::min);
    if nearest <= 1e-12 * (1.0 + contour.center.abs()) {
        return Err(LabError::NodeOnPole { nearest });
    }
    let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
    let eval = |nodes: usize| -> C64 {
        contour
            .quadrature(nodes)
            .iter()
            .map(|(z, w)| w * trace_power(&sub, *z, r))
            .sum::<C64>()
            * (sign / r as f64)
    };
    let mut nodes = contour.nodes.max(64);
    let mut prev = eval(nodes);
    while nodes < MAX_NODES {
        nodes *= 2;
        let next = eval(nodes);
        let change = (next - prev).norm();
        if change < 1e-10 * (1.0 + next.norm()) {
            return Ok(next);
        }
        prev = next;
    }
    Err(LabError::QuadratureUnresolved {
        nodes,
        change: f64::NAN,
    })
}

/// Rigorous upper bound on `||A_1(z)||` over the contour nodes by the Schur
/// test on `|W_mq| / sqrt(|E_m - z| |E_q - z|)`.
pub fn coupling_estimate(h: &BlochMatrix, contour: &Contour, nodes: usize) -> f64 {
    let mut best: f64 = 0.0;
    for (z, _) in contour.quadrature(nodes) {
        let s: Vec<f64> = h.diag.iter().map(|d| (d - z).norm().sqrt()).collect();
        for i in 0..h.dim() {
            let row: f64 = h.rows[i]
                .iter()
                .map(|&(c, v)| v.norm() / (s[i] * s[c]))
                .sum();
            best = best.max(row);
        }
    }
    best
}

#[derive(Clone, Debug, Serialize)]
pub struct SeriesResult {
    pub alpha: f64,
    pub index: DualIndex,
    /// `g_1..g_{r_max}` as `(re, im)`.
    pub terms: Vec<(f64, f64)>,
    pub base: f64,
    pub partial_sums: Vec<f64>,
    pub value: f64,
    pub coupling_estimate: f64,
    pub tail_bound: f64,
    pub oracle_eigenvalue: Option<f64>,
    pub oracle_count: usize,
    pub discrepancy: Option<f64>,
    /// Set when the oracle does not have exactly one eigenvalue in the interval.
    pub flagged: bool,
}

/// Evaluates `E_j + sum_{r=1}^{r_max} alpha^r g_r` with the Cauchy tail bound
/// `2 rho (|alpha| a)^{r_max+1} / (1 - |alpha| a)` and an oracle check on the
/// contour interval.
pub fn eigenvalue_series(
    h: &BlochMatrix,
    j: usize,
    alpha: f64,
    r_max: usize,
    contour: &Contour,
) -> Result<SeriesResult> {
    let a = coupling_estimate(h, contour, 64);
    let q = alpha.abs() * a;
    if q >= 1.0 {
        return Err(LabError::OutsidePerturbativeRegime { estimate: q });
    }
    let scaled = h.with_coupling(alpha);
    let g = rs_terms(&scaled, j, r_max)?;
    let base = g[0].re;
    let mut partial = Vec::with_capacity(r_max);
    let mut acc = 0.0;
    for t in &g[1..] {
        acc += t.re;
        partial.push(base + acc);
    }
    let value = base + acc;
    // terms were generated at coupling alpha; report per-unit-alpha coefficients
    let terms = g[1..]
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let f = alpha.powi(i as i32 + 1);
            if f == 0.0 {
                (0.0, 0.0)
            } else {
                (t.re / f, t.im / f)
            }
        })
        .collect();
    let tail_bound = 2.0 * contour.radius * q.powi(r_max as i32 + 1) / (1.0 - q);
    let lo = contour.center - contour.radius;
    let hi = contour.center + contour.radius;
    let oracle = oracle_spectrum(&scaled, Some((lo, hi)), Route::Auto)?;
    let oracle_eigenvalue = if oracle.len() == 1 {
        Some(oracle.eigenvalues[0])
    } else {
        None
    };
    Ok(SeriesResult {
        alpha,
        index: h.indices[j],
        terms,
        base,
        partial_sums: partial,
        value,
        coupling_estimate: a,
        tail_bound,
        oracle_eigenvalue,
        oracle_count: oracle.len(),
        discrepancy: oracle_eigenvalue.map(|o| (o - value).abs()),
        flagged: oracle.len() != 1,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ProjectorResult {
    pub index: DualIndex,
    pub alpha: f64,
    #[serde(skip)]
    pub corrections: Vec<DMatrix<C64>>,
    #[serde(skip)]
    pub summed: DMatrix<C64>,
    #[serde(skip)]
    pub quadrature: DMatrix<C64>,
    pub trace: f64,
    /// Frobenius distance between the summed projector and the oracle rank-one projector.
    pub oracle_distance: f64,
    /// Largest entry of `G_r` outside the band `|p_i - p_j| <= r R`.
    pub band_leak: f64,
    pub nodes: usize,
}

/// Projector `E_j + sum alpha^r G_r` with `G_r = (-1)^{r+1}/(2 pi i) oint R_0 (W R_0)^r dz`,
/// plus the full-resolvent quadrature and the oracle comparison.
pub fn projector_series(
    h: &BlochMatrix,
    j: usize,
    alpha: f64,
    r_max: usize,
    contour: &Contour,
) -> Result<ProjectorResult> {
    let a = coupling_estimate(h, contour, 64);
    if alpha.abs() * a >= 1.0 {
        return Err(LabError::OutsidePerturbativeRegime {
            estimate: alpha.abs() * a,
        });
    }
    let n = h.dim();
    let w = {
        let mut m = DMatrix::from_element(n, n, zero());
        for i in 0..n {
            for &(c, v) in &h.rows[i] {
                m[(i, c)] += v;
            }
        }
        m
    };
    let hd = h.with_coupling(alpha).dense();
    let compute = |nodes: usize| -> (Vec<DMatrix<C64>>, DMatrix<C64>) {
        let mut gs = vec![DMatrix::from_element(n, n, zero()); r_max];
        let mut full = DMatrix::from_element(n, n, zero());
        for (z, wt) in contour.quadrature(nodes) {
            let r0 = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                n,
                h.diag.iter().map(|d| (d - z).inv()),
            ));
            let wr0 = &w * &r0;
            let mut term = r0.clone();
            for (r, g) in gs.iter_mut().enumerate() {
                term = &term * &wr0;
                let sign = if r % 2 == 0 { 1.0 } else { -1.0 };
                *g += &term * (wt * sign);
            }
            let mut shifted = hd.clone();
            for i in 0..n {
                shifted[(i, i)] -= z;
            }
            if let Some(inv) = shifted.try_inverse() {
                full -= inv * wt;
            }
        }
        (gs, full)
    };
    let mut nodes = contour.nodes.max(64);
    let (mut gs, mut full) = compute(nodes);
    loop {
        if nodes >= MAX_NODES {
            break;
        }
        let (g2, f2) = compute(nodes * 2);
        nodes *= 2;
        let change = (&f2 - &full).camax();
        gs = g2;
        full = f2;
        if change < 1e-10 {
            break;
        }
    }
    let mut summed = DMatrix::from_element(n, n, zero());
    summed[(j, j)] = C64::new(1.0, 0.0);
    for (r, g) in gs.iter().enumerate() {
        summed += g * C64::new(alpha.powi(r as i32 + 1), 0.0);
    }
    let trace = summed.trace().re;
    let spec = oracle_spectrum(
        &h.with_coupling(alpha),
        Some((
            contour.center - contour.radius,
            contour.center + contour.radius,
        )),
        Route::Dense,
    )?;
    if spec.len() != 1 {
        return Err(LabError::NotSimple { count: spec.len() });
    }
    let v = &spec.vectors[0];
    let rank1 = DMatrix::from_fn(n, n, |a, b| v[a] * v[b].conj());
    let oracle_distance = (&summed - &rank1).norm();
    let range = coupling_range(h).max(1e-12);
    let cj = h.mode_momentum(j);
    let dist: Vec<f64> = (0..n)
        .map(|i| {
            let p = h.mode_momentum(i);
            (p[0] - cj[0]).hypot(p[1] - cj[1])
        })
        .collect();
    let mut band_leak: f64 = 0.0;
    for (r, g) in gs.iter().enumerate() {
        let lim = (r + 1) as f64 * range + 1e-9;
        for a in 0..n {
            for b in 0..n {
                if dist[a] > lim || dist[b] > lim {
                    band_leak = band_leak.max(g[(a, b)].norm());
                }
            }
        }
    }
    Ok(ProjectorResult {
        index: h.indices[j],
        alpha,
        corrections: gs,
        summed,
        quadrature: full,
        trace,
        oracle_distance,
        band_leak,
        nodes,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectralSeries {
    /// Tracked eigenvalue of the previous-step operator.
    pub base: f64,
    /// `g_1..g_{r_max}` of the increment in the previous-step eigenbasis.
    pub terms: Vec<f64>,
    pub value: f64,
    /// Weight of the tracked eigenvector on the reference mode.
    pub overlap: f64,
    /// Distance from `base` to the nearest other previous-step level.
    pub separation: f64,
    /// `||W|| / dist(levels, contour)` for the contour around `base`.
    pub coupling: f64,
    /// Previous-step eigenvector, aligned with the matrix indices.
    #[serde(skip)]
    pub base_vector: Vec<C64>,
}

/// Step-`n` series: diagonalize the previous-step operator `prev` blockwise,
/// follow the eigenvector with largest weight on row `j`, and run the
/// Rayleigh-Schrodinger recursion for the increment `incr` in that eigenbasis.
pub fn spectral_series(
    prev: &BlochMatrix,
    incr: &BlochMatrix,
    j: usize,
    r_max: usize,
    contour_radius: f64,
) -> Result<SpectralSeries> {
    let n = prev.dim();
    // connected blocks of the previous-step coupling graph
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for &(c, _) in &prev.rows[i] {
            let (a, b) = (find(&mut parent, i), find(&mut parent, c));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut blocks: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        blocks.entry(r).or_default().push(i);
    }
    let mut keys: Vec<usize> = blocks.keys().copied().collect();
    keys.sort_unstable();
    let mut theta: Vec<f64> = Vec::with_capacity(n);
    let mut vecs: Vec<Vec<(usize, C64)>> = Vec::with_capacity(n);
    for key in keys {
        let rows = &blocks[&key];
        let local: HashMap<usize, usize> = rows.iter().enumerate().map(|(a, &b)| (b, a)).collect();
        let m = rows.len();
        let mut d = DMatrix::from_element(m, m, zero());
        for (a, &i) in rows.iter().enumerate() {
            d[(a, a)] += prev.diag[i];
            for &(c, v) in &prev.rows[i] {
                d[(a, local[&c])] += v;
            }
        }
        let (vals, v) = hermitian_eigen(&d);
        for (col, val) in vals.iter().enumerate() {
            theta.push(*val);
            vecs.push(
                rows.iter()
                    .enumerate()
                    .map(|(a, &i)| (i, v[(a, col)]))
                    .collect(),
            );
        }
    }
    let (tracked, overlap) = vecs
        .iter()
        .enumerate()
        .map(|(c, v)| {
            (
                c,
                v.iter()
                    .find(|e| e.0 == j)
                    .map(|e| e.1.norm_sqr())
                    .unwrap_or(0.0),
            )
        })
        .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    if overlap < 0.5 {
        return Err(LabError::NotSimple { count: 0 });
    }
    let base = theta[tracked];
    let separation = theta
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != tracked)
        .map(|(_, t)| (t - base).abs())
        .fold(f64::INFINITY, f64::min);
    // crude resolvent bound on the contour: ||W|| / dist(levels, contour)
    let norm = incr.offdiag_row_sum();
    let reach = contour_radius.min(separation - contour_radius);
    let coupling = if reach > 0.0 {
        norm / reach
    } else {
        f64::INFINITY
    };
    if coupling >= 1.0 {
        return Err(LabError::OutsidePerturbativeRegime { estimate: coupling });
    }
    let nn = vecs.len();
    let e: Vec<C64> = theta.iter().map(|t| C64::new(*t, 0.0)).collect();
    // increment applied in the eigenbasis: V^H W V x
    let (lam, _) = rs_recursion(&e, tracked, r_max, |x| {
        let mut full = vec![zero(); n];
        for (b, v) in vecs.iter().enumerate() {
            if x[b] != zero() {
                for &(i, c) in v {
                    full[i] += c * x[b];
                }
            }
        }
        let w = incr.apply_offdiag(&full);
        (0..nn)
            .map(|a| vecs[a].iter().map(|&(i, c)| c.conj() * w[i]).sum())
            .collect()
    })?;
    let terms: Vec<f64> = lam[1..].iter().map(|z| z.re).collect();
    let value = base + terms.iter().sum::<f64>();
    let mut base_vector = vec![zero(); n];
    for &(i, c) in &vecs[tracked] {
        base_vector[i] = c;
    }
    let nv = norm2(&base_vector);
    base_vector.iter_mut().for_each(|z| *z /= nv);
    Ok(SpectralSeries {
        base,
        terms,
        value,
        overlap,
        separation,
        coupling,
        base_vector,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{CellDescriptor, Truncation};
    use crate::potential::{PotentialSpec, ScaleComponent, StepPotential};
    use std::collections::BTreeMap;

    fn setup(amp: f64, t: [f64; 2]) -> (BlochMatrix, usize) {
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
        let pot = StepPotential::from_scales(&spec, 1, 1, 1, 1);
        let cell = CellDescriptor::new(1, [2.0 * PI, 2.0 * PI], vec![]);
        let h = BlochMatrix::assemble(
            &cell,
            &pot,
            t,
            &Truncation::Ball {
                center: [0.0, 0.0],
                radius: 6.0,
            },
        )
        .unwrap();
        let j = h.position(DualIndex(0, 0)).unwrap();
        (h, j)
    }

    #[test]
    fn explicit_orders_agree_with_recursion() {
        let (h, j) = setup(0.05, [7.31, 4.13]);
        let g = rs_terms(&h, j, 3).unwrap();
        assert_eq!(g_explicit(&h, j, 1).unwrap().value, C64::new(0.0, 0.0));
        let g2 = g_explicit(&h, j, 2).unwrap();
        assert!((g2.value - g[2]).norm() < 1e-14);
        assert!((g2.value - g2.alternate.unwrap()).norm() <= 1e-12 * g2.value.norm());
        let g3 = g_explicit(&h, j, 3).unwrap();
        assert!((g3.value - g[3]).norm() < 1e-14);
    }

    #[test]
    fn numeric_matches_explicit() {
        let (h, j) = setup(0.05, [7.31, 4.13]);
        let c = Contour::new(h.diag[j].re, 0.5);
        for r in 1..=3 {
            let num = g_numeric(&h, j, r, &c).unwrap();
            let exp = if r == 1 {
                C64::new(0.0, 0.0)
            } else {
                g_explicit(&h, j, r).unwrap().value
            };
            assert!(
                (num - exp).norm() <= 1e-9 * exp.norm().max(1e-3),
                "r={r}: {num} vs {exp}"
            );
        }
    }

    #[test]
    fn series_matches_oracle() {
        let (h, j) = setup(0.05, [7.31, 4.13]);
        let gap = (0..h.dim())
            .filter(|&i| i != j)
            .map(|i| (h.diag[i] - h.diag[j]).norm())
            .fold(f64::INFINITY, f64::min);
        let c = Contour::new(h.diag[j].re, 0.5 * gap);
        let s = eigenvalue_series(&h, j, 1.0, 8, &c).unwrap();
        assert!(!s.flagged);
        assert!(s.discrepancy.unwrap() <= s.tail_bound.max(1e-10));
    }

    #[test]
    fn projector_is_rank_one() {
        let (h, j) = setup(0.05, [7.31, 4.13]);
        let (sub, js) = sub_ball(&h, j, 3.0);
        let c = Contour::new(sub.diag[js].re, 0.5);
        let p = projector_series(&sub, js, 1.0, 6, &c).unwrap();
        assert!((p.trace - 1.0).abs() < 1e-8);
        assert!(p.oracle_distance < 1e-6);
        assert!(p.band_leak < 1e-14);
        let g1 = g_explicit(&sub, js, 1).unwrap().g1;
        for (a, b, v) in g1 {
            assert!((p.corrections[0][(a, b)] - v).norm() < 1e-9);
        }
    }
}
