//! Isoenergetic curves `kappa_n(phi)`: root solving, sampling, folding.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::intervals::{IntervalSet, TWO_PI};
use crate::lattice::CellDescriptor;
use crate::model::Model;

/// Certified root of `kappa -> lambda^(n)(kappa nu(phi)) - lambda`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct KappaRoot {
    pub kappa: f64,
    pub residual: f64,
    pub iterations: usize,
    /// Sign change across the window and agreement of the two one-sided runs.
    pub certified: bool,
    pub window: (f64, f64),
}

/// Search-window half-width around the previous radius.
pub fn window_half_width(model: &Model, n: usize) -> f64 {
    let norm = model.step(n).increment.norm;
    (model.params.c_hat * norm / model.k).max(10.0 * model.params.solver_tol)
}

fn newton<F>(f: &F, start: f64, lambda: f64, tol: f64) -> Result<(f64, f64, usize)>
where
    F: Fn(f64) -> Result<f64>,
{
    let mut kappa = start;
    let mut value = f(kappa)?;
    for it in 1..=60 {
        let step = value / (2.0 * kappa);
        kappa -= step;
        value = f(kappa)?;
        if value.abs() <= 1e-3 * tol * lambda || step.abs() <= 4.0 * f64::EPSILON * kappa {
            return Ok((kappa, value, it));
        }
    }
    Err(LabError::Numeric(format!(
        "Newton did not converge from {start}"
    )))
}

/// Solves for `kappa_n(phi)` in `center +- half_width`.
pub fn solve_kappa(
    model: &Model,
    n: usize,
    phi: f64,
    center: f64,
    half_width: f64,
) -> Result<KappaRoot> {
    let lambda = model.lambda;
    let nu = Model::direction(phi);
    let f = |kappa: f64| -> Result<f64> {
        Ok(model
            .tracked_eigenvalue(n, [kappa * nu[0], kappa * nu[1]])?
            .value
            - lambda)
    };
    let (lo, hi) = (center - half_width, center + half_width);
    let (flo, fhi) = (f(lo)?, f(hi)?);
    if !(flo < 0.0 && fhi > 0.0) {
        return Err(LabError::WindowViolated {
            phi,
            detail: format!("no sign change on [{lo}, {hi}]: F = ({flo:e}, {fhi:e})"),
        });
    }
    let tol = model.params.solver_tol;
    let (kappa, residual, iterations) = newton(&f, center, lambda, tol)?;
    let (left, _, _) = newton(&f, lo, lambda, tol)?;
    let (right, _, _) = newton(&f, hi, lambda, tol)?;
    let agree = (left - kappa).abs() <= 1e-9 && (right - kappa).abs() <= 1e-9;
    if !agree {
        return Err(LabError::MultipleRoots { phi });
    }
    // interior monotonicity: one sign change on a uniform scan
    let mut changes = 0;
    let mut prev = flo;
    for i in 1..=4 {
        let v = if i == 4 {
            fhi
        } else {
            f(lo + 2.0 * half_width * i as f64 / 4.0)?
        };
        if v.signum() != prev.signum() {
            changes += 1;
        }
        prev = v;
    }
    if changes != 1 {
        return Err(LabError::MultipleRoots { phi });
    }
    if kappa < lo || kappa > hi {
        return Err(LabError::WindowViolated {
            phi,
            detail: format!("root {kappa} left the window"),
        });
    }
    if residual.abs() > tol * lambda {
        return Err(LabError::Numeric(format!(
            "residual {residual:e} above tolerance at phi = {phi}"
        )));
    }
    Ok(KappaRoot {
        kappa,
        residual,
        iterations,
        certified: true,
        window: (lo, hi),
    })
}

/// One sampled direction on a connected arc.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AngleSample {
    pub phi: f64,
    pub arc: usize,
}

/// Uniform grid points in `theta_n` plus, per interval of `arcs`, its two
/// endpoints pulled slightly inside and enough interior points for five samples.
pub fn sample_angles(arcs: &IntervalSet, theta: &IntervalSet, grid: usize) -> Vec<AngleSample> {
    let mut out = Vec::new();
    let step = TWO_PI / grid as f64;
    for (arc, &(a, b)) in arcs.intervals.iter().enumerate() {
        let mut pts: Vec<f64> = Vec::new();
        let i0 = (a / step).ceil() as usize;
        let mut i = i0;
        while (i as f64) * step < b && i < grid {
            pts.push(i as f64 * step);
            i += 1;
        }
        let inset = (1e-9f64).min(0.25 * (b - a));
        pts.push(a + inset);
        pts.push(b - inset);
        if pts.len() < 5 {
            for j in 1..=3 {
                pts.push(a + (b - a) * j as f64 / 4.0);
            }
        }
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        out.extend(
            pts.into_iter()
                .filter(|p| theta.contains(*p))
                .map(|phi| AngleSample { phi, arc }),
        );
    }
    out
}

/// `count` points evenly spaced in the measure of `theta`, plus both inset
/// endpoints of every interval of `theta`; arcs are numbered by `arcs`.
pub fn sample_measure(arcs: &IntervalSet, theta: &IntervalSet, count: usize) -> Vec<AngleSample> {
    let mu = theta.measure();
    let mut pts: Vec<f64> = (0..count)
        .filter_map(|i| theta.point_at((i as f64 + 0.5) / count as f64 * mu))
        .collect();
    for &(a, b) in &theta.intervals {
        let inset = (1e-9f64).min(0.25 * (b - a));
        pts.push(a + inset);
        pts.push(b - inset);
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts.into_iter()
        .filter_map(|phi| {
            let arc = arcs
                .intervals
                .iter()
                .position(|&(a, b)| a <= phi && phi < b)?;
            Some(AngleSample { phi, arc })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CurveSample {
    pub phi: f64,
    pub arc: usize,
    pub kappa: f64,
    /// `kappa_n - kappa_{n-1}`, with `kappa_0 = k`.
    pub h: f64,
    pub dkappa: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct IsoCurve {
    pub step: usize,
    pub lambda: f64,
    pub samples: Vec<CurveSample>,
    pub length: f64,
    pub theta_measure: f64,
    /// `length / (k measure(theta))`.
    pub length_ratio: f64,
    pub max_residual: f64,
}

impl IsoCurve {
    pub fn lookup(&self) -> HashMap<u64, f64> {
        self.samples
            .iter()
            .map(|s| (s.phi.to_bits(), s.kappa))
            .collect()
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        self.samples
            .iter()
            .map(|s| [s.kappa * s.phi.cos(), s.kappa * s.phi.sin()])
            .collect()
    }
}

/// Solves at every sample; the window is centered on the previous curve.
pub fn build_iso_curve(
    model: &Model,
    n: usize,
    samples: &[AngleSample],
    theta: &IntervalSet,
    prev: Option<&IsoCurve>,
) -> Result<IsoCurve> {
    if samples.is_empty() {
        return Err(LabError::FullyResonant);
    }
    let half = window_half_width(model, n);
    let prev_map = prev.map(IsoCurve::lookup);
    let solved: Vec<Result<(f64, f64, f64)>> = samples
        .par_iter()
        .map(|s| {
            let base = match (&prev_map, prev) {
                (Some(map), Some(c)) => match map.get(&s.phi.to_bits()) {
                    Some(v) => *v,
                    None => {
                        solve_kappa(model, c.step, s.phi, model.k, window_half_width(model, 1))
                            .or_else(|_| chain_kappa(model, c.step, s.phi))?
                            .kappa
                    }
                },
                _ => model.k,
            };
            let root = solve_kappa(model, n, s.phi, base, half)?;
            Ok((root.kappa, root.kappa - base, root.residual))
        })
        .collect();
    let mut out = Vec::with_capacity(samples.len());
    for (s, r) in samples.iter().zip(solved) {
        let (kappa, h, residual) = r?;
        out.push(CurveSample {
            phi: s.phi,
            arc: s.arc,
            kappa,
            h,
            dkappa: 0.0,
            residual,
        });
    }
    fill_derivatives(&mut out);
    let mut length = 0.0;
    for w in out.windows(2) {
        if w[0].arc == w[1].arc {
            let a = [w[0].kappa * w[0].phi.cos(), w[0].kappa * w[0].phi.sin()];
            let b = [w[1].kappa * w[1].phi.cos(), w[1].kappa * w[1].phi.sin()];
            length += (a[0] - b[0]).hypot(a[1] - b[1]);
        }
    }
    let theta_measure = theta.measure();
    Ok(IsoCurve {
        step: n,
        lambda: model.lambda,
        max_residual: out.iter().map(|s| s.residual.abs()).fold(0.0, f64::max),
        samples: out,
        length,
        theta_measure,
        length_ratio: length / (model.k * theta_measure),
    })
}

/// `kappa_m(phi)` for a point missing from a stored curve, solved step by step.
fn chain_kappa(model: &Model, m: usize, phi: f64) -> Result<KappaRoot> {
    let mut root = solve_kappa(model, 1, phi, model.k, window_half_width(model, 1))?;
    for s in 2..=m {
        root = solve_kappa(model, s, phi, root.kappa, window_half_width(model, s))?;
    }
    Ok(root)
}

/// Three-point finite differences within each arc.
fn fill_derivatives(samples: &mut [CurveSample]) {
    let n = samples.len();
    for i in 0..n {
        let same = |j: usize| samples[j].arc == samples[i].arc;
        let left = (i > 0 && same(i - 1)).then(|| i - 1);
        let right = (i + 1 < n && same(i + 1)).then(|| i + 1);
        samples[i].dkappa = match (left, right) {
            (Some(l), Some(r)) => {
                let (x0, x1, x2) = (samples[l].phi, samples[i].phi, samples[r].phi);
                let (y0, y1, y2) = (samples[l].kappa, samples[i].kappa, samples[r].kappa);
                let (h0, h1) = (x1 - x0, x2 - x1);
                -h1 / (h0 * (h0 + h1)) * y0
                    + (h1 - h0) / (h0 * h1) * y1
                    + h0 / (h1 * (h0 + h1)) * y2
            }
            (Some(l), None) => {
                (samples[i].kappa - samples[l].kappa) / (samples[i].phi - samples[l].phi)
            }
            (None, Some(r)) => {
                (samples[r].kappa - samples[i].kappa) / (samples[r].phi - samples[i].phi)
            }
            (None, None) => 0.0,
        };
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CurveReport {
    pub step: usize,
    pub max_h: f64,
    /// Largest `|dh/dphi|` at samples interior to arcs with at least three grid steps.
    pub max_dh: f64,
    pub arcs_used: usize,
    pub arcs_skipped: usize,
    pub length_ratio: f64,
}

pub fn curve_diagnostics(curve: &IsoCurve, grid: usize) -> CurveReport {
    let min_len = 3.0 * TWO_PI / grid as f64;
    let mut by_arc: HashMap<usize, Vec<&CurveSample>> = HashMap::new();
    for s in &curve.samples {
        by_arc.entry(s.arc).or_default().push(s);
    }
    let (mut used, mut skipped) = (0, 0);
    let mut max_dh: f64 = 0.0;
    for arc in by_arc.values() {
        let span =
            arc.last().map(|s| s.phi).unwrap_or(0.0) - arc.first().map(|s| s.phi).unwrap_or(0.0);
        if arc.len() < 3 || span < min_len {
            skipped += 1;
            continue;
        }
        used += 1;
        for w in arc.windows(3) {
            let d = (w[2].h - w[0].h) / (w[2].phi - w[0].phi);
            max_dh = max_dh.max(d.abs());
        }
    }
    CurveReport {
        step: curve.step,
        max_h: curve.samples.iter().map(|s| s.h.abs()).fold(0.0, f64::max),
        max_dh,
        arcs_used: used,
        arcs_skipped: skipped,
        length_ratio: curve.length_ratio,
    }
}

/// Richardson-style stability of `dkappa/dphi` at one direction.
pub fn derivative_stability(model: &Model, n: usize, phi: f64, h: f64) -> Result<(f64, f64)> {
    let at = |x: f64| chain_kappa(model, n, x).map(|r| r.kappa);
    let d1 = (at(phi + h)? - at(phi - h)?) / (2.0 * h);
    let d2 = (at(phi + 0.5 * h)? - at(phi - 0.5 * h)?) / h;
    Ok((d1, d2))
}

#[derive(Clone, Debug, Serialize)]
pub struct Collision {
    pub phi_a: f64,
    pub phi_b: f64,
    pub distance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldedCurve {
    pub step: usize,
    /// `(t, phi)` pairs.
    pub points: Vec<([f64; 2], f64)>,
    pub collisions: Vec<Collision>,
    pub resolution: f64,
}

/// Parallel shift of the curve into the dual cell with a collision scan.
pub fn fold_curve(curve: &IsoCurve, cell: &CellDescriptor, resolution: f64) -> FoldedCurve {
    let points: Vec<([f64; 2], f64)> = curve
        .samples
        .iter()
        .map(|s| {
            (
                cell.reduce_to_cell([s.kappa * s.phi.cos(), s.kappa * s.phi.sin()])
                    .0,
                s.phi,
            )
        })
        .collect();
    let g = cell.spacing();
    let cols = [
        (g[0] / resolution).ceil() as i64,
        (g[1] / resolution).ceil() as i64,
    ];
    let key = |t: [f64; 2]| {
        [
            (t[0] / resolution).floor() as i64,
            (t[1] / resolution).floor() as i64,
        ]
    };
    let mut hash: HashMap<[i64; 2], Vec<usize>> = HashMap::new();
    for (i, (t, _)) in points.iter().enumerate() {
        hash.entry(key(*t)).or_default().push(i);
    }
    let torus = |a: [f64; 2], b: [f64; 2]| {
        let d: Vec<f64> = (0..2)
            .map(|i| {
                let x = (a[i] - b[i]).abs();
                x.min(g[i] - x)
            })
            .collect();
        d[0].hypot(d[1])
    };
    let mut collisions = Vec::new();
    for (i, (t, phi)) in points.iter().enumerate() {
        let c = key(*t);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let nb = [
                    (c[0] + dx).rem_euclid(cols[0]),
                    (c[1] + dy).rem_euclid(cols[1]),
                ];
                for &j in hash.get(&nb).map(Vec::as_slice).unwrap_or(&[]) {
                    if j > i {
                        let d = torus(*t, points[j].0);
                        if d < resolution && points[j].1 != *phi {
                            collisions.push(Collision {
                                phi_a: *phi,
                                phi_b: points[j].1,
                                distance: d,
                            });
                        }
                    }
                }
            }
        }
    }
    FoldedCurve {
        step: curve.step,
        points,
        collisions,
        resolution,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cheese::build_first_cheese;
    use crate::model::Params;
    use crate::potential::PotentialSpec;

    #[test]
    fn free_curve_is_the_circle() {
        let model = Model::new(
            PotentialSpec::free(TWO_PI, TWO_PI),
            Params::default(),
            20.0,
            1,
        )
        .unwrap();
        let set = build_first_cheese(&model).unwrap();
        let samples = sample_angles(&set.theta, &set.theta, 512);
        assert!(samples.iter().all(|s| set.theta.contains(s.phi)));
        let curve = build_iso_curve(&model, 1, &samples, &set.theta, None).unwrap();
        for s in &curve.samples {
            assert!((s.kappa - 20.0).abs() <= 1e-12);
            assert_eq!(s.dkappa.abs() < 1e-9, true);
        }
        assert!((curve.length_ratio - 1.0).abs() < 1e-3);
        let folded = fold_curve(&curve, &model.step(1).cell, 1e-9);
        assert!(folded.collisions.is_empty());
    }
}
