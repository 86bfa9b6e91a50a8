//! Resonance disks in the complex angle strip and the sets they cut out.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::intervals::{IntervalSet, TWO_PI};
use crate::lattice::{CellDescriptor, DualIndex};
use crate::model::Model;
use crate::numeric::{log_det, wrap_pi};
use crate::potential::StepPotential;
use crate::C64;

/// Complex unit direction `(cos phi, sin phi)`.
pub fn direction(phi: C64) -> [C64; 2] {
    [phi.cos(), phi.sin()]
}

/// `|k nu(phi) + p|_*^2 - k^2` with the bilinear square.
pub fn dispersion_gap(phi: C64, p: [f64; 2], k: f64) -> C64 {
    let nu = direction(phi);
    let a = nu[0] * k + p[0];
    let b = nu[1] * k + p[1];
    a * a + b * b - k * k
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ResonancePair {
    /// `phi^+` and `phi^-`, real parts in `[0, 2 pi)`.
    pub angles: [C64; 2],
    pub double: bool,
    pub in_strip: [bool; 2],
}

/// Solutions of `|k nu(phi) + p|_*^2 = k^2`, i.e. `cos(phi - phi_p) = -|p| / 2k`.
pub fn resonance_angles(p: [f64; 2], k: f64, strip: f64) -> Result<ResonancePair> {
    let len = p[0].hypot(p[1]);
    if len == 0.0 {
        return Err(LabError::DegenerateShift(
            "p_m = 0 has no resonance angles".into(),
        ));
    }
    let theta = p[1].atan2(p[0]);
    let u = len / (2.0 * k);
    let (plus, minus) = if u <= 1.0 {
        let a = (-u).acos();
        (C64::new(theta + a, 0.0), C64::new(theta - a, 0.0))
    } else {
        let y = u.acosh();
        (C64::new(theta + PI, y), C64::new(theta + PI, -y))
    };
    let wrap = |z: C64| C64::new(z.re.rem_euclid(TWO_PI), z.im);
    let angles = [wrap(plus), wrap(minus)];
    Ok(ResonancePair {
        angles,
        double: u == 1.0,
        in_strip: [angles[0].im.abs() < strip, angles[1].im.abs() < strip],
    })
}

/// `Pi_m`: smallest `|<k nu(phi_m^pm) + p, p_q>_*| + k^{2 s1}` over the neighbor set.
pub fn pi_m(
    p: [f64; 2],
    pair: &ResonancePair,
    k: f64,
    neighbors: &[[f64; 2]],
    s1: f64,
) -> Result<f64> {
    if neighbors.is_empty() {
        return Err(LabError::NoNeighborModes);
    }
    let mut best = f64::INFINITY;
    for phi in pair.angles {
        let nu = direction(phi);
        let v = [nu[0] * k + p[0], nu[1] * k + p[1]];
        for q in neighbors {
            best = best.min((v[0] * q[0] + v[1] * q[1]).norm());
        }
    }
    Ok(best + k.powf(2.0 * s1))
}

/// Branch of the first-step radius formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RadiusRule {
    Short,
    Regular,
    Tangent,
    /// Shifted formulas.
    Origin,
    ShiftShort,
    ShiftTangentCore,
    ShiftTangent,
    ShiftRegular,
    /// Pole and small-shift disks.
    Pole,
}

/// First-step disk radius for `0 < |p| < 4k`.
pub fn disk_radius(
    len: f64,
    pi: Option<f64>,
    k: f64,
    params: &crate::model::Params,
) -> Result<(f64, RadiusRule)> {
    if len >= 4.0 * k {
        return Err(LabError::OutsideStrip { p: len });
    }
    let (s1, d, beta) = (params.s1, params.delta, params.beta);
    let (r, rule) = if len <= 4.0 * k.powf(s1) {
        (k.powf(-3.0 * s1 - d) / len, RadiusRule::Short)
    } else {
        let pi = pi.ok_or(LabError::NoNeighborModes)?;
        let t = (1.0 - len * len / (4.0 * k * k)).abs();
        if t >= k.powf(2.0 * beta - 2.0) / pi {
            (
                k.powf(2.0 * beta - 1.0) / (len * pi * t.sqrt()),
                RadiusRule::Regular,
            )
        } else {
            (8.0 * k.powf(beta) / (len * pi.sqrt()), RadiusRule::Tangent)
        }
    };
    let r = r * params.radius_scale;
    if r >= 1.0 {
        return Err(LabError::Invariant(format!(
            "disk radius {r} >= 1 at |p| = {len}"
        )));
    }
    Ok((r, rule))
}

/// Shifted disk radius; the second flag reports the upper clamp.
pub fn shifted_radius(
    origin: bool,
    len: f64,
    pi: Option<f64>,
    k: f64,
    params: &crate::model::Params,
) -> Result<(f64, RadiusRule, bool)> {
    let (s1, d, b1) = (params.s1, params.delta, params.beta1);
    let t = (1.0 - len * len / (4.0 * k * k)).abs();
    let short = k.powf(1.0 - 8.0 * s1 - 4.0 * d);
    let core = k.powf(-4.0 + 2.0 * b1 + 10.0 * s1 + 4.0 * d);
    let (r, rule) = if origin {
        (
            k.powf(-2.0 + 2.0 * b1 + 22.0 * s1 + 15.0 * d),
            RadiusRule::Origin,
        )
    } else if len < short {
        (
            k.powf(-2.0 + 2.0 * b1 + 3.0 * s1 + 2.0 * d) / len,
            RadiusRule::ShiftShort,
        )
    } else if t < 0.25 * core {
        (
            4.0 * k.powf(-2.0 + b1 + 5.0 * s1 + 2.0 * d),
            RadiusRule::ShiftTangentCore,
        )
    } else if (2.0 * k - len).abs() <= short {
        (core / t.sqrt(), RadiusRule::ShiftTangent)
    } else {
        let pi = pi.ok_or(LabError::NoNeighborModes)?;
        (
            k.powf(-1.0 + 2.0 * b1) / (len * pi * t.sqrt()),
            RadiusRule::ShiftRegular,
        )
    };
    let cap = params.shift_radius_cap.unwrap_or(0.5 * k.powf(-d));
    let r = r * params.radius_scale;
    Ok(if r > cap {
        (cap, rule, true)
    } else {
        (r, rule, false)
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DiskTag {
    pub m: DualIndex,
    /// `+1` or `-1`.
    pub branch: i8,
    pub step: usize,
    pub shift: [f64; 2],
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Disk {
    pub center: C64,
    pub radius: f64,
    pub rule: RadiusRule,
    pub tag: DiskTag,
}

impl Disk {
    /// Half-length of the real interval the disk removes, if it meets the axis.
    pub fn real_half_width(&self) -> Option<f64> {
        let im = self.center.im.abs();
        (im < self.radius).then(|| (self.radius * self.radius - im * im).sqrt())
    }

    /// Center offset to `z` with the real part wrapped onto the circle.
    pub fn offset(&self, z: C64) -> C64 {
        C64::new(wrap_pi(z.re - self.center.re), z.im - self.center.im)
    }

    pub fn contains(&self, z: C64) -> bool {
        self.offset(z).norm() < self.radius
    }

    pub fn intersects(&self, other: &Disk) -> bool {
        self.offset(other.center).norm() < self.radius + other.radius
    }
}

/// Real angles removed by a family of disks.
pub fn real_trace(disks: &[Disk]) -> IntervalSet {
    IntervalSet::from_arcs(
        disks
            .iter()
            .filter_map(|d| d.real_half_width().map(|w| (d.center.re, w))),
    )
}

/// Angle set of step `n`: the strip minus removed disks, with its real trace.
#[derive(Clone, Debug, Serialize)]
pub struct AngleSet {
    pub step: usize,
    pub strip_half_width: f64,
    pub disks: Vec<Disk>,
    pub theta: IntervalSet,
}

impl AngleSet {
    pub fn strip(strip_half_width: f64) -> Self {
        Self {
            step: 0,
            strip_half_width,
            disks: Vec::new(),
            theta: IntervalSet::full(),
        }
    }

    pub fn remove(&mut self, disks: Vec<Disk>) {
        self.theta = self.theta.difference(&real_trace(&disks));
        self.disks.extend(disks);
    }

    pub fn contains(&self, z: C64) -> bool {
        z.im.abs() < self.strip_half_width && !self.disks.iter().any(|d| d.contains(z))
    }
}

pub fn measure_of_angle_set(set: &AngleSet) -> f64 {
    set.theta.measure()
}

/// Lattice indices `j` with `lo <= |p_j - center| <= hi`.
pub fn annulus_points(cell: &CellDescriptor, center: [f64; 2], lo: f64, hi: f64) -> Vec<DualIndex> {
    let g = cell.spacing();
    let mut out = Vec::new();
    let i0 = ((center[0] - hi) / g[0]).ceil() as i64;
    let i1 = ((center[0] + hi) / g[0]).floor() as i64;
    for a in i0..=i1 {
        let dx = a as f64 * g[0] - center[0];
        let outer = hi * hi - dx * dx;
        if outer < 0.0 {
            continue;
        }
        let (ho, hi_in) = (outer.sqrt(), (lo * lo - dx * dx).max(0.0).sqrt());
        let push_range = |out: &mut Vec<DualIndex>, y0: f64, y1: f64| {
            let b0 = ((center[1] + y0) / g[1]).ceil() as i64;
            let b1 = ((center[1] + y1) / g[1]).floor() as i64;
            for b in b0..=b1 {
                out.push(DualIndex(a, b));
            }
        };
        if hi_in == 0.0 {
            push_range(&mut out, -ho, ho);
        } else {
            push_range(&mut out, -ho, -hi_in);
            push_range(&mut out, hi_in, ho);
        }
    }
    out.retain(|j| {
        let p = cell.lattice_vector(*j);
        let r = (p[0] - center[0]).hypot(p[1] - center[1]);
        r >= lo && r <= hi
    });
    out.sort_unstable();
    out.dedup();
    out
}

/// Lattice indices with `|p_j + b| < radius`, in lexicographic order.
pub fn disk_points(cell: &CellDescriptor, b: [f64; 2], radius: f64) -> Vec<DualIndex> {
    let mut v = annulus_points(cell, [-b[0], -b[1]], 0.0, radius);
    v.retain(|j| {
        let p = cell.dual_vector(*j, b);
        p[0].hypot(p[1]) < radius
    });
    v
}

/// Step-one resonance disks `O_m^pm` for `0 < p_m < 4k`.
pub fn build_first_cheese(model: &Model) -> Result<AngleSet> {
    let k = model.k;
    let strip = model.strip_half_width();
    let cell = &model.step(1).cell;
    let neighbors: Vec<[f64; 2]> = model.neighbor_set().into_iter().map(|(_, p)| p).collect();
    let modes = disk_points(cell, [0.0, 0.0], 4.0 * k);
    let per_mode: Vec<Result<Vec<Disk>>> = modes
        .par_iter()
        .filter(|m| **m != DualIndex::ZERO)
        .map(|m| {
            let p = cell.lattice_vector(*m);
            let len = p[0].hypot(p[1]);
            let pair = resonance_angles(p, k, strip)?;
            let pi = pi_m(p, &pair, k, &neighbors, model.params.s1).ok();
            let (r, rule) = match disk_radius(len, pi, k, &model.params) {
                Ok(v) => v,
                Err(LabError::NoNeighborModes) => return Ok(Vec::new()),
                Err(e) => return Err(e),
            };
            let count = if pair.double { 1 } else { 2 };
            Ok((0..count)
                .filter(|&s| pair.angles[s].im.abs() - r < 2.0 * strip)
                .map(|s| Disk {
                    center: pair.angles[s],
                    radius: r,
                    rule,
                    tag: DiskTag {
                        m: *m,
                        branch: if s == 0 { 1 } else { -1 },
                        step: 1,
                        shift: [0.0, 0.0],
                    },
                })
                .collect())
        })
        .collect();
    let mut disks = Vec::new();
    for d in per_mode {
        disks.extend(d?);
    }
    let mut set = AngleSet::strip(strip);
    set.step = 1;
    set.remove(disks);
    if set.theta.is_empty() {
        return Err(LabError::FullyResonant);
    }
    Ok(set)
}

/// Quasimomentum `t` in `K_1` and index `j` for the point `k nu(phi)`.
pub fn chi1_point(model: &Model, phi: f64) -> ([f64; 2], DualIndex) {
    let nu = Model::direction(phi);
    model
        .step(1)
        .cell
        .reduce_to_cell([model.k * nu[0], model.k * nu[1]])
}

/// Both non-resonance inequalities at the point `k nu(phi)`.
#[derive(Clone, Debug, Serialize)]
pub struct DirectionAudit {
    pub phi: f64,
    pub t: [f64; 2],
    /// `4 min |p_i^2 - k^2||p_{i+q}^2 - k^2|` (infinite when no factor is small).
    pub pair_product: f64,
    pub pair_bound: f64,
    /// `2 min |p_{j+q}^2 - k^2|`.
    pub neighbor_gap: f64,
    pub neighbor_bound: f64,
    pub unique: bool,
    pub passed: bool,
}

pub fn audit_direction(model: &Model, phi: f64) -> DirectionAudit {
    let k = model.k;
    let p = &model.params;
    let cell = &model.step(1).cell;
    let nu = Model::direction(phi);
    let x = [k * nu[0], k * nu[1]];
    let gap = |m: DualIndex| {
        let v = cell.dual_vector(m, x);
        v[0] * v[0] + v[1] * v[1] - k * k
    };
    let neighbors = model.neighbor_set();
    let neighbor_gap = 2.0
        * neighbors
            .iter()
            .map(|(q, _)| gap(*q).abs())
            .fold(f64::INFINITY, f64::min);
    let c = 0.5 * k.powf(p.beta);
    let center = [-x[0], -x[1]];
    let ring = annulus_points(
        cell,
        center,
        (k * k - c).max(0.0).sqrt(),
        (k * k + c).sqrt(),
    );
    let mut min_prod = f64::INFINITY;
    let mut min_single = f64::INFINITY;
    for &m in &ring {
        if m == DualIndex::ZERO {
            continue;
        }
        let fm = gap(m).abs();
        min_single = min_single.min(fm);
        for (q, _) in &neighbors {
            for other in [m + *q, m - *q] {
                if other != DualIndex::ZERO {
                    min_prod = min_prod.min(fm * gap(other).abs());
                }
            }
        }
    }
    let pair_product = 4.0 * min_prod;
    let pair_bound = k.powf(2.0 * p.beta);
    let neighbor_bound = k.powf(1.0 - 3.0 * p.s1 - p.delta);
    let unique = min_single > 1e-9 * k * k;
    let (t, _) = cell.reduce_to_cell(x);
    DirectionAudit {
        phi,
        t,
        pair_product,
        pair_bound,
        neighbor_gap,
        neighbor_bound,
        unique,
        passed: unique && pair_product > pair_bound && neighbor_gap > neighbor_bound,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Regime {
    LargeShift,
    SmallShift,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ShiftContext {
    pub b: [f64; 2],
    /// Distance to the nearest corner of the dual cell.
    pub b0: f64,
    pub regime: Regime,
    /// `b` minus its nearest corner.
    pub offset: [f64; 2],
}

impl ShiftContext {
    pub fn new(cell: &CellDescriptor, b: [f64; 2], threshold: f64) -> Result<Self> {
        if !cell.contains(b) {
            return Err(LabError::Validation(format!(
                "shift {b:?} outside the dual cell"
            )));
        }
        let b0 = cell.corner_distance(b);
        if b0 == 0.0 {
            return Err(LabError::DegenerateShift("shift at a cell corner".into()));
        }
        let g = cell.spacing();
        let offset = [0, 1].map(|i| {
            if b[i] <= g[i] - b[i] {
                b[i]
            } else {
                b[i] - g[i]
            }
        });
        let regime = if b0 >= threshold {
            Regime::LargeShift
        } else {
            Regime::SmallShift
        };
        Ok(Self {
            b,
            b0,
            regime,
            offset,
        })
    }

    pub fn angle(&self) -> f64 {
        self.offset[1].atan2(self.offset[0]).rem_euclid(TWO_PI)
    }
}

/// Connected components of a disk union, by union-find on intersecting pairs.
pub fn components(disks: &[Disk]) -> Vec<Vec<usize>> {
    let n = disks.len();
    if n == 0 {
        return Vec::new();
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut radii: Vec<f64> = disks.iter().map(|d| d.radius).collect();
    radii.sort_by(f64::total_cmp);
    let typical = radii[(n * 95 / 100).min(n - 1)];
    let h = (2.0 * typical).clamp(1e-9, PI);
    let cols = (TWO_PI / h).floor().max(1.0) as i64;
    let cell_of = |z: C64| {
        let c = ((z.re.rem_euclid(TWO_PI) / TWO_PI) * cols as f64).floor() as i64;
        (c.min(cols - 1), (z.im / h).floor() as i64)
    };
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let mut large = Vec::new();
    for (i, d) in disks.iter().enumerate() {
        if d.radius > typical {
            large.push(i);
        } else {
            grid.entry(cell_of(d.center)).or_default().push(i);
        }
    }
    let union = |parent: &mut Vec<usize>, a: usize, b: usize| {
        let (ra, rb) = (find(parent, a), find(parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    };
    for (i, d) in disks.iter().enumerate() {
        if d.radius > typical {
            continue;
        }
        let (cx, cy) = cell_of(d.center);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let key = ((cx + dx).rem_euclid(cols), cy + dy);
                if let Some(list) = grid.get(&key) {
                    for &j in list {
                        if j > i && d.intersects(&disks[j]) {
                            union(&mut parent, i, j);
                        }
                    }
                }
            }
        }
    }
    let col_width = TWO_PI / cols as f64;
    for (a, &i) in large.iter().enumerate() {
        let d = &disks[i];
        for &j in &large[a + 1..] {
            if d.intersects(&disks[j]) {
                union(&mut parent, i, j);
            }
        }
        let reach = d.radius + typical;
        let (cx, cy) = cell_of(d.center);
        let span_x = ((reach / col_width).ceil() as i64 + 1).min(cols);
        let span_y = (reach / h).ceil() as i64 + 1;
        let mut near = |list: &Vec<usize>| {
            for &j in list {
                if d.intersects(&disks[j]) {
                    union(&mut parent, i, j);
                }
            }
        };
        // scan the bounding box, or every occupied cell when that is cheaper
        let box_cells = (2 * span_x + 1).min(cols) as f64 * (2 * span_y + 1) as f64;
        if box_cells > grid.len() as f64 {
            grid.values().for_each(&mut near);
        } else {
            let xs: Vec<i64> = if 2 * span_x + 1 >= cols {
                (0..cols).collect()
            } else {
                (-span_x..=span_x)
                    .map(|dx| (cx + dx).rem_euclid(cols))
                    .collect()
            };
            for x in xs {
                for y in cy - span_y..=cy + span_y {
                    if let Some(list) = grid.get(&(x, y)) {
                        near(list);
                    }
                }
            }
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort_by_key(|g| g[0]);
    out
}

/// Extent of a component: the largest center-to-center distance plus both radii.
pub fn component_extent(disks: &[Disk], comp: &[usize]) -> f64 {
    let mut best: f64 = 0.0;
    for (a, &i) in comp.iter().enumerate() {
        best = best.max(2.0 * disks[i].radius);
        for &j in &comp[a + 1..] {
            best = best
                .max(disks[i].offset(disks[j].center).norm() + disks[i].radius + disks[j].radius);
        }
    }
    best
}

/// One mode of the shifted free operator with its resonance data.
#[derive(Clone, Debug)]
pub struct ShiftedMode {
    pub m: DualIndex,
    pub p: [f64; 2],
    pub len: f64,
    pub pair: ResonancePair,
}

#[derive(Clone, Debug, Serialize)]
pub struct ShiftedCheese {
    pub ctx: ShiftContext,
    pub disks: Vec<Disk>,
    pub components: Vec<Vec<usize>>,
    pub clamped: usize,
    pub max_component_disks: usize,
    pub max_component_extent: f64,
    pub total_extent: f64,
    /// Components over the configured disk bound.
    pub oversized: usize,
    #[serde(skip)]
    pub modes: Vec<ShiftedMode>,
}

/// Disks `O^(1)(b)` around the shifted resonance angles, grouped into components.
pub fn shifted_cheese(model: &Model, ctx: &ShiftContext) -> Result<ShiftedCheese> {
    if ctx.regime != Regime::LargeShift {
        return Err(LabError::RegimeMismatch(
            "shift is in the small-b0 regime; use small_b_disks".into(),
        ));
    }
    let k = model.k;
    let strip = model.strip_half_width();
    let cell = &model.step(1).cell;
    let neighbors: Vec<[f64; 2]> = model.neighbor_set().into_iter().map(|(_, p)| p).collect();
    let modes: Vec<ShiftedMode> = disk_points(cell, ctx.b, 4.0 * k)
        .into_par_iter()
        .filter_map(|m| {
            let p = cell.dual_vector(m, ctx.b);
            let len = p[0].hypot(p[1]);
            resonance_angles(p, k, strip)
                .ok()
                .map(|pair| ShiftedMode { m, p, len, pair })
        })
        .collect();
    let built: Vec<Result<(Vec<Disk>, bool)>> = modes
        .par_iter()
        .map(|md| {
            let pi = pi_m(md.p, &md.pair, k, &neighbors, model.params.s1).ok();
            let (r, rule, clamped) =
                shifted_radius(md.m == DualIndex::ZERO, md.len, pi, k, &model.params)?;
            let count = if md.pair.double { 1 } else { 2 };
            let disks = (0..count)
                .filter(|&s| md.pair.angles[s].im.abs() - r < 2.0 * strip)
                .map(|s| Disk {
                    center: md.pair.angles[s],
                    radius: r,
                    rule,
                    tag: DiskTag {
                        m: md.m,
                        branch: if s == 0 { 1 } else { -1 },
                        step: 1,
                        shift: ctx.b,
                    },
                })
                .collect();
            Ok((disks, clamped))
        })
        .collect();
    let mut disks = Vec::new();
    let mut clamped = 0;
    for b in built {
        let (d, c) = b?;
        clamped += usize::from(c) * d.len();
        disks.extend(d);
    }
    let comps = components(&disks);
    let extents: Vec<f64> = comps
        .par_iter()
        .map(|c| component_extent(&disks, c))
        .collect();
    let bound = model.params.component_disk_bound;
    Ok(ShiftedCheese {
        ctx: *ctx,
        max_component_disks: comps.iter().map(Vec::len).max().unwrap_or(0),
        max_component_extent: extents.iter().copied().fold(0.0, f64::max),
        total_extent: extents.iter().sum(),
        oversized: comps.iter().filter(|c| c.len() > bound).count(),
        disks,
        components: comps,
        clamped,
        modes,
    })
}

/// Pole count of one component by the argument principle.
#[derive(Clone, Debug, Serialize)]
pub struct ComponentCount {
    pub disks: usize,
    pub modes: usize,
    pub wide_modes: usize,
    /// Free zeros inside the union, counted from their known locations.
    pub free_exact: usize,
    /// Winding counts at `alpha = 0` on the base and widened truncations.
    pub free_counts: [i64; 2],
    /// The same at `alpha = 1`; evaluated only when the boundary bound holds.
    pub coupled_counts: Option<[i64; 2]>,
    /// Largest `||W|| / |p_i^2 - k^2|` over the boundary.
    pub bound_ratio: f64,
    pub bound_holds: bool,
    /// Every evaluated count agrees between the two truncations.
    pub stable: bool,
    pub boundary_nodes: usize,
    /// Mean location of the zeros when the count is positive.
    pub location: Option<C64>,
}

/// Free determinant data for the modes near one component.
struct LocalProblem<'a> {
    k: f64,
    modes: Vec<&'a ShiftedMode>,
    coupling: DMatrix<C64>,
}

impl ComponentCount {
    /// Coupled count equals the free count on the base truncation.
    pub fn counts_agree(&self) -> Option<bool> {
        self.coupled_counts.map(|c| c[0] == self.free_counts[0])
    }
}

impl LocalProblem<'_> {
    fn gaps(&self, z: C64) -> Vec<C64> {
        self.modes
            .iter()
            .map(|md| dispersion_gap(z, md.p, self.k))
            .collect()
    }

    fn log_det(&self, z: C64, alpha: f64) -> Option<C64> {
        let gaps = self.gaps(z);
        if alpha == 0.0 || self.coupling.iter().all(|c| *c == C64::new(0.0, 0.0)) {
            return gaps.iter().try_fold(C64::new(0.0, 0.0), |acc, g| {
                (g.norm() > 0.0).then(|| acc + g.ln())
            });
        }
        let n = gaps.len();
        let m = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                gaps[i]
            } else {
                self.coupling[(i, j)] * alpha
            }
        });
        log_det(m)
    }
}

/// Boundary arcs `(disk, from, to)` of a disk union, counter-clockwise per disk.
fn boundary_arcs(disks: &[&Disk]) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::new();
    for (a, d) in disks.iter().enumerate() {
        let mut covered = Vec::new();
        let mut hidden = false;
        for (b, e) in disks.iter().enumerate() {
            if a == b {
                continue;
            }
            let off = d.offset(e.center);
            let dist = off.norm();
            if dist >= d.radius + e.radius || dist + e.radius <= d.radius {
                continue;
            }
            if dist + d.radius <= e.radius {
                // identical disks keep the lower index
                if dist == 0.0 && d.radius == e.radius && a < b {
                    continue;
                }
                hidden = true;
                break;
            }
            let cos =
                (d.radius * d.radius + dist * dist - e.radius * e.radius) / (2.0 * d.radius * dist);
            covered.push((off.arg(), cos.clamp(-1.0, 1.0).acos()));
        }
        if hidden {
            continue;
        }
        for (lo, hi) in IntervalSet::from_arcs(covered).complement().intervals {
            out.push((a, lo, hi));
        }
    }
    out
}

struct Winding {
    total: f64,
    moment: C64,
    nodes: usize,
    min_gap: f64,
}

fn arc_winding(
    problem: &LocalProblem,
    disk: &Disk,
    lo: f64,
    hi: f64,
    alpha: f64,
    w: &mut Winding,
) -> Result<()> {
    let point = |th: f64| disk.center + C64::from_polar(disk.radius, th);
    // log det plus the phase of every free factor, so a fast factor cannot alias
    let eval = |th: f64, w: &mut Winding| -> Result<(C64, Vec<f64>)> {
        let z = point(th);
        w.nodes += 1;
        let gaps = problem.gaps(z);
        let g = gaps.iter().map(|g| g.norm()).fold(f64::INFINITY, f64::min);
        w.min_gap = w.min_gap.min(g);
        let ld = problem
            .log_det(z, alpha)
            .ok_or(LabError::BoundaryNearPole { winding: f64::NAN })?;
        Ok((ld, gaps.iter().map(|g| g.arg()).collect()))
    };
    // phase change split into free factors and the slowly varying ratio det / prod(gaps)
    let phase_steps = |a: &(C64, Vec<f64>), b: &(C64, Vec<f64>)| {
        let free: Vec<f64> = a.1.iter().zip(&b.1).map(|(x, y)| wrap_pi(y - x)).collect();
        let ratio =
            wrap_pi((b.0.im - b.1.iter().sum::<f64>()) - (a.0.im - a.1.iter().sum::<f64>()));
        (free, ratio)
    };
    let segments = ((16.0 * (hi - lo) / TWO_PI).ceil() as usize).max(4);
    let h = (hi - lo) / segments as f64;
    let mut stack = Vec::new();
    let mut left = eval(lo, w)?;
    for s in 0..segments {
        let b = lo + (s + 1) as f64 * h;
        let right = eval(b, w)?;
        stack.push((b - h, b, left, right.clone(), 0u32));
        left = right;
        while let Some((a, b, la, lb, depth)) = stack.pop() {
            let (free, ratio) = phase_steps(&la, &lb);
            if ratio.abs() > PI / 4.0 || free.iter().any(|d| d.abs() > PI / 4.0) {
                if depth > 48 {
                    return Err(LabError::BoundaryNearPole {
                        winding: w.total / TWO_PI,
                    });
                }
                let mid = 0.5 * (a + b);
                let lm = eval(mid, w)?;
                stack.push((mid, b, lm.clone(), lb, depth + 1));
                stack.push((a, mid, la, lm, depth + 1));
                continue;
            }
            let darg = free.iter().sum::<f64>() + ratio;
            w.total += darg;
            let dlog = C64::new(lb.0.re - la.0.re, darg);
            w.moment += point(0.5 * (a + b)) * dlog;
        }
    }
    Ok(())
}

fn snap(total: f64) -> Result<i64> {
    let x = total / TWO_PI;
    let n = x.round();
    if (x - n).abs() >= 0.1 {
        return Err(LabError::BoundaryNearPole { winding: x });
    }
    Ok(n as i64)
}

/// Argument-principle zero count of `det(H(k nu(phi) + b) - k^2)` over a disk union.
fn winding_count(problem: &LocalProblem, disks: &[&Disk], alpha: f64) -> Result<(i64, Winding)> {
    let mut w = Winding {
        total: 0.0,
        moment: C64::new(0.0, 0.0),
        nodes: 0,
        min_gap: f64::INFINITY,
    };
    for (i, lo, hi) in boundary_arcs(disks) {
        arc_winding(problem, disks[i], lo, hi, alpha, &mut w)?;
    }
    Ok((snap(w.total)?, w))
}

/// Zero count of the truncated determinant over an arbitrary disk union, with
/// the mode set chosen as those whose gap drops below `cutoff` near the union.
pub fn locate_poles_argument_principle(
    model: &Model,
    modes: &[ShiftedMode],
    pot: &StepPotential,
    region: &[Disk],
    alpha: f64,
    cutoff: f64,
) -> Result<(i64, Option<C64>)> {
    if region.is_empty() {
        return Ok((0, None));
    }
    let refs: Vec<&Disk> = region.iter().collect();
    let selected = select_modes(model.k, modes, &refs, cutoff);
    let problem = local_problem(model.k, selected, pot);
    let (count, w) = winding_count(&problem, &refs, alpha)?;
    let location = (count > 0).then(|| w.moment / C64::new(0.0, TWO_PI * count as f64));
    Ok((count, location))
}

fn local_problem<'a>(k: f64, modes: Vec<&'a ShiftedMode>, pot: &StepPotential) -> LocalProblem<'a> {
    let n = modes.len();
    let coupling = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            C64::new(0.0, 0.0)
        } else {
            pot.get(modes[i].m - modes[j].m)
        }
    });
    LocalProblem { k, modes, coupling }
}

/// Sample points of a disk union: centers plus 16 boundary points per disk.
fn probe_points(disks: &[&Disk]) -> Vec<C64> {
    let mut pts = Vec::with_capacity(disks.len() * 17);
    for d in disks {
        pts.push(d.center);
        for s in 0..16 {
            pts.push(d.center + C64::from_polar(d.radius, TWO_PI * s as f64 / 16.0));
        }
    }
    pts
}

fn select_modes<'a>(
    k: f64,
    modes: &'a [ShiftedMode],
    disks: &[&Disk],
    cutoff: f64,
) -> Vec<&'a ShiftedMode> {
    let pts = probe_points(disks);
    modes
        .iter()
        .filter(|md| {
            pts.iter()
                .any(|&z| dispersion_gap(z, md.p, k).norm() <= cutoff)
        })
        .collect()
}

/// Modes sorted by the real part of their resonance angles, for range queries.
struct ModeIndex<'a> {
    keys: Vec<(f64, usize)>,
    reach: Vec<f64>,
    wide: Vec<usize>,
    modes: &'a [ShiftedMode],
    max_reach: f64,
}

impl<'a> ModeIndex<'a> {
    fn new(k: f64, modes: &'a [ShiftedMode], cutoff: f64) -> Self {
        const WIDE: f64 = 0.25;
        let mut keys = Vec::new();
        let mut reach = Vec::with_capacity(modes.len());
        let mut wide = Vec::new();
        for (i, md) in modes.iter().enumerate() {
            let u = md.len / (2.0 * k);
            let slope = 2.0 * k * md.len * (1.0 - u * u).abs().sqrt();
            let r = 2.0 * (cutoff / slope).min(2.0 * (cutoff / (k * md.len)).sqrt());
            reach.push(r);
            if r > WIDE {
                wide.push(i);
            } else {
                for a in md.pair.angles {
                    keys.push((a.re, i));
                }
            }
        }
        keys.sort_by(|a, b| a.0.total_cmp(&b.0));
        let max_reach = reach
            .iter()
            .copied()
            .filter(|r| *r <= WIDE)
            .fold(0.0, f64::max);
        Self {
            keys,
            reach,
            wide,
            modes,
            max_reach,
        }
    }

    /// Candidate modes for a set of disks.
    fn candidates(&self, disks: &[&Disk]) -> Vec<&'a ShiftedMode> {
        let base = disks[0].center.re;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for d in disks {
            let x = base + wrap_pi(d.center.re - base);
            lo = lo.min(x - d.radius);
            hi = hi.max(x + d.radius);
        }
        let mut picked: Vec<usize> = self.wide.clone();
        let (a, b) = (lo - self.max_reach, hi + self.max_reach);
        let mut scan = |from: f64, to: f64, shift: f64| {
            let start = self.keys.partition_point(|e| e.0 < from);
            for &(x, i) in &self.keys[start..] {
                if x > to {
                    break;
                }
                let x = x + shift;
                if x >= lo - self.reach[i] && x <= hi + self.reach[i] {
                    picked.push(i);
                }
            }
        };
        for shift in [-TWO_PI, 0.0, TWO_PI] {
            scan(a - shift, b - shift, shift);
        }
        picked.sort_unstable();
        picked.dedup();
        picked.into_iter().map(|i| &self.modes[i]).collect()
    }
}

/// Counts on every component with at most `component_disk_bound` disks;
/// larger components are returned as `None`.
pub fn count_components(
    model: &Model,
    cheese: &ShiftedCheese,
) -> Vec<Option<Result<ComponentCount>>> {
    let all: Vec<usize> = (0..cheese.components.len()).collect();
    count_selected(model, cheese, &all)
}

/// [`count_components`] restricted to the listed component indices.
pub fn count_selected(
    model: &Model,
    cheese: &ShiftedCheese,
    picks: &[usize],
) -> Vec<Option<Result<ComponentCount>>> {
    let pot = &model.step(1).cumulative;
    let norm: f64 = pot.coeffs.values().map(|v| v.norm()).sum();
    let cutoff = 4.0 * norm + 1.0;
    let index = ModeIndex::new(model.k, &cheese.modes, 4.0 * cutoff);
    let bound = model.params.component_disk_bound;
    picks
        .par_iter()
        .map(|&i| {
            let comp = &cheese.components[i];
            if comp.len() > bound {
                return None;
            }
            let disks: Vec<&Disk> = comp.iter().map(|&i| &cheese.disks[i]).collect();
            Some(count_one(model.k, &index, pot, norm, &disks, cutoff))
        })
        .collect()
}

fn count_one(
    k: f64,
    index: &ModeIndex,
    pot: &StepPotential,
    norm: f64,
    disks: &[&Disk],
    cutoff: f64,
) -> Result<ComponentCount> {
    let cands = index.candidates(disks);
    let pts = probe_points(disks);
    // a steep mode can vanish inside a disk while staying large at every probe point
    let zero_inside = |md: &ShiftedMode| {
        md.pair
            .angles
            .iter()
            .any(|a| disks.iter().any(|d| d.offset(*a).norm() <= 1.5 * d.radius))
    };
    let near = |c: f64| -> Vec<&ShiftedMode> {
        cands
            .iter()
            .copied()
            .filter(|md| {
                zero_inside(md) || pts.iter().any(|&z| dispersion_gap(z, md.p, k).norm() <= c)
            })
            .collect()
    };
    let base = local_problem(k, near(cutoff), pot);
    let wide = local_problem(k, near(4.0 * cutoff), pot);
    let free_exact = wide
        .modes
        .iter()
        .map(|md| {
            let n = if md.pair.double { 1 } else { 2 };
            md.pair.angles[..n]
                .iter()
                .filter(|z| disks.iter().any(|d| d.contains(**z)))
                .count()
        })
        .sum();
    let (c0, w0) = winding_count(&base, disks, 0.0)?;
    let (d0, wd) = winding_count(&wide, disks, 0.0)?;
    let min_gap = wd.min_gap.min(w0.min_gap);
    let bound_ratio = norm / min_gap;
    let bound_holds = bound_ratio < 1.0;
    let (coupled_counts, location) = if bound_holds {
        let (c1, w1) = winding_count(&base, disks, 1.0)?;
        let (d1, _) = winding_count(&wide, disks, 1.0)?;
        (
            Some([c1, d1]),
            (c1 > 0).then(|| w1.moment / C64::new(0.0, TWO_PI * c1 as f64)),
        )
    } else {
        (None, None)
    };
    Ok(ComponentCount {
        disks: disks.len(),
        modes: base.modes.len(),
        wide_modes: wide.modes.len(),
        free_exact,
        free_counts: [c0, d0],
        coupled_counts,
        bound_ratio,
        bound_holds,
        stable: c0 == d0 && coupled_counts.is_none_or(|c| c[0] == c[1]),
        boundary_nodes: w0.nodes,
        location,
    })
}

/// Located pole on the real axis.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Pole {
    pub phi: f64,
    pub shift: [f64; 2],
    pub m: DualIndex,
    /// Whether the location was pinned by an exact eigenvalue evaluation.
    pub refined: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PoleCheese {
    /// Step whose operator carries the poles.
    pub step: usize,
    pub radius: f64,
    pub clamped: bool,
    pub shifts: Vec<[f64; 2]>,
    pub poles: Vec<Pole>,
    pub removed: IntervalSet,
    /// Samples found within the radius of a pole.
    pub excluded: Vec<f64>,
    /// Number of exact eigenvalue evaluations spent on samples.
    pub checks: usize,
}

/// Shifts `2 pi p / (N a)` for `p` in `{0..N-1}^2 \ {0}` between steps `n` and `n+1`.
pub fn refinement_shifts(model: &Model, n: usize) -> Vec<[f64; 2]> {
    let fine = model.step(n + 1);
    let g = fine.cell.spacing();
    let r = fine.refinement as i64;
    let mut out = Vec::new();
    for a in 0..r {
        for b in 0..r {
            if (a, b) != (0, 0) {
                out.push([a as f64 * g[0], b as f64 * g[1]]);
            }
        }
    }
    out
}

/// Real poles of `(H^(n)(kappa_n(phi) nu + b) - lambda)^{-1}` on `Theta_n` and the
/// disks of radius `r^(n+1)` around them.
///
/// Every shifted free root on `Theta_n` is a pole candidate. Samples
/// `(phi, kappa_n(phi))` are tested exactly: each mode within the Weyl bound of
/// resonance is evaluated with `eigen_near`, which returns the eigenvalue of
/// `H^(n)` tracked from the mode at the given momentum.
pub fn build_pole_cheese<F>(
    model: &Model,
    n: usize,
    theta: &IntervalSet,
    samples: &[(f64, f64)],
    eigen_near: F,
) -> Result<PoleCheese>
where
    F: Fn([f64; 2]) -> Result<f64> + Sync,
{
    let (radius, clamped) = model.pole_radius(n + 1);
    let shifts = refinement_shifts(model, n);
    let lambda = model.lambda;
    let cell = &model.step(n).cell;
    let weyl: f64 = model
        .step(n)
        .cumulative
        .coeffs
        .values()
        .map(|v| v.norm())
        .sum();
    let kbar = if samples.is_empty() {
        model.k
    } else {
        samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64
    };
    let mut poles = Vec::new();
    for b in &shifts {
        for m in disk_points(cell, *b, 2.0 * kbar + 1.0) {
            let c = cell.dual_vector(m, *b);
            let len = c[0].hypot(c[1]);
            if len == 0.0 {
                continue;
            }
            let cos = (lambda - kbar * kbar - len * len) / (2.0 * kbar * len);
            if cos.abs() > 1.0 {
                continue;
            }
            let th = c[1].atan2(c[0]);
            let a = cos.acos();
            for phi in [th + a, th - a] {
                let phi = phi.rem_euclid(TWO_PI);
                if theta.contains(phi) {
                    poles.push(Pole {
                        phi,
                        shift: *b,
                        m,
                        refined: false,
                    });
                }
            }
        }
    }
    // exact test at the samples
    let tested: Vec<Result<(usize, Option<Pole>)>> = samples
        .par_iter()
        .map(|&(phi, kappa)| {
            let nu = Model::direction(phi);
            let mut checks = 0;
            for b in &shifts {
                let y = [kappa * nu[0] + b[0], kappa * nu[1] + b[1]];
                let lo = (lambda - weyl).max(0.0).sqrt();
                let hi = (lambda + weyl).sqrt();
                for m in annulus_points(cell, [-y[0], -y[1]], lo, hi) {
                    let x = cell.dual_vector(m, y);
                    checks += 1;
                    let e = eigen_near(x)?;
                    let slope = 2.0 * x[0].hypot(x[1]) * (kappa + 1.0);
                    if (e - lambda).abs() <= 2.0 * slope * radius {
                        return Ok((
                            checks,
                            Some(Pole {
                                phi,
                                shift: *b,
                                m,
                                refined: true,
                            }),
                        ));
                    }
                }
            }
            Ok((checks, None))
        })
        .collect();
    let mut checks = 0;
    let mut excluded = Vec::new();
    for t in tested {
        let (c, p) = t?;
        checks += c;
        if let Some(p) = p {
            excluded.push(p.phi);
            poles.push(p);
        }
    }
    poles.sort_by(|a, b| a.phi.total_cmp(&b.phi));
    for w in poles.windows(2) {
        let gap = w[1].phi - w[0].phi;
        if gap > 0.0 && gap < 2.0 * radius && clamped {
            return Err(LabError::ScaleCollapse(format!(
                "poles at {} and {} closer than twice the clamped radius {radius:e}",
                w[0].phi, w[1].phi
            )));
        }
    }
    let removed = IntervalSet::from_arcs(
        poles
            .iter()
            .map(|p| (p.phi, if p.refined { 2.0 * radius } else { radius })),
    );
    Ok(PoleCheese {
        step: n,
        radius,
        clamped,
        shifts,
        poles,
        removed,
        excluded,
        checks,
    })
}

/// Grid value for the small-shift root search.
#[derive(Clone, Copy, Debug)]
pub struct GradientSample {
    pub phi: f64,
    pub kappa: f64,
    /// Gradient of the tracked eigenvalue at `kappa nu(phi)`.
    pub grad: [f64; 2],
}

#[derive(Clone, Debug, Serialize)]
pub struct SmallShiftRoot {
    pub phi: f64,
    pub residual: f64,
    /// `dF/dphi` by central differences and its ratio to `2 b0 k`.
    pub derivative: f64,
    pub derivative_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SmallShiftDisks {
    pub ctx: ShiftContext,
    pub roots: Vec<SmallShiftRoot>,
    pub disks: Vec<Disk>,
    pub holes: usize,
    pub opposite_signs: bool,
    /// Smallest `|F|` on grid points outside the disks over `b0 k r`.
    pub lower_bound_ratio: f64,
    pub newton_starts: [f64; 2],
}

/// Two disks around the roots of `F(phi) = lambda(kappa nu + b) - lambda(kappa nu)`
/// for a shift close to a cell corner.
///
/// `grid` holds the tracked-eigenvalue gradient where the series converges
/// (`None` marks a hole); `exact` evaluates `F` at an arbitrary angle.
pub fn small_b_disks<F>(
    model: &Model,
    n: usize,
    ctx: &ShiftContext,
    grid: &[Option<GradientSample>],
    exact: F,
) -> Result<SmallShiftDisks>
where
    F: Fn(f64) -> Result<f64>,
{
    if ctx.regime != Regime::SmallShift {
        return Err(LabError::RegimeMismatch(
            "shift is in the large-b0 regime; use shifted_cheese".into(),
        ));
    }
    let (radius, _) = model.pole_radius(n);
    let b = ctx.offset;
    let lin = |g: &GradientSample| g.grad[0] * b[0] + g.grad[1] * b[1];
    let holes = grid.iter().filter(|g| g.is_none()).count();
    let mut brackets = Vec::new();
    for i in 0..grid.len() {
        let j = (i + 1) % grid.len();
        if let (Some(a), Some(c)) = (&grid[i], &grid[j]) {
            let (fa, fc) = (lin(a), lin(c));
            if fa == 0.0 || fa.signum() != fc.signum() {
                let hi = if j == 0 { c.phi + TWO_PI } else { c.phi };
                brackets.push((a.phi, hi));
            }
        }
    }
    if brackets.len() > 2 {
        return Err(LabError::TooManyRoots(format!(
            "{} sign changes for b0 = {:e}",
            brackets.len(),
            ctx.b0
        )));
    }
    let scale = 2.0 * ctx.b0 * model.k;
    let mut roots = Vec::new();
    for (lo, hi) in brackets {
        let (mut a, mut c) = (lo, hi);
        let (mut fa, mut fc) = (exact(a)?, exact(c)?);
        if fa.signum() == fc.signum() {
            return Err(LabError::Numeric(format!(
                "exact F does not change sign on [{a}, {c}]"
            )));
        }
        for _ in 0..200 {
            let m = 0.5 * (a + c);
            if c - a < 1e-13 {
                break;
            }
            let fm = exact(m)?;
            if fm.signum() == fa.signum() {
                a = m;
                fa = fm;
            } else {
                c = m;
                fc = fm;
            }
        }
        let phi = if fa.abs() < fc.abs() { a } else { c };
        let h = 1e-5;
        let derivative = (exact(phi + h)? - exact(phi - h)?) / (2.0 * h);
        roots.push(SmallShiftRoot {
            phi: phi.rem_euclid(TWO_PI),
            residual: fa.abs().min(fc.abs()),
            derivative,
            derivative_ratio: derivative.abs() / scale,
        });
    }
    let opposite_signs =
        roots.len() == 2 && roots[0].derivative.signum() != roots[1].derivative.signum();
    let disks: Vec<Disk> = roots
        .iter()
        .enumerate()
        .map(|(i, r)| Disk {
            center: C64::new(r.phi, 0.0),
            radius,
            rule: RadiusRule::Pole,
            tag: DiskTag {
                m: DualIndex::ZERO,
                branch: if i == 0 { 1 } else { -1 },
                step: n,
                shift: ctx.b,
            },
        })
        .collect();
    let floor = ctx.b0 * model.k * radius;
    let lower_bound_ratio = grid
        .iter()
        .flatten()
        .filter(|g| !disks.iter().any(|d| d.contains(C64::new(g.phi, 0.0))))
        .map(|g| lin(g).abs() / floor)
        .fold(f64::INFINITY, f64::min);
    let phib = ctx.angle();
    Ok(SmallShiftDisks {
        ctx: *ctx,
        roots,
        disks,
        holes,
        opposite_signs,
        lower_bound_ratio,
        newton_starts: [
            (phib + 0.5 * PI).rem_euclid(TWO_PI),
            (phib - 0.5 * PI).rem_euclid(TWO_PI),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Params;
    use crate::potential::PotentialSpec;

    fn free_model(k: f64) -> Model {
        Model::new(PotentialSpec::free(TWO_PI, TWO_PI), Params::default(), k, 1).unwrap()
    }

    #[test]
    fn resonance_angle_examples() {
        let k = 20.0;
        let pair = resonance_angles([k, 0.0], k, 1.0).unwrap();
        let mut re: Vec<f64> = pair.angles.iter().map(|z| z.re).collect();
        re.sort_by(f64::total_cmp);
        assert!((re[0] - 2.0 * PI / 3.0).abs() < 1e-12 && (re[1] - 4.0 * PI / 3.0).abs() < 1e-12);
        let pair = resonance_angles([2.0 * k, 0.0], k, 1.0).unwrap();
        assert!(pair.double && (pair.angles[0].re - PI).abs() < 1e-12);
        let pair = resonance_angles([0.0, 3.0 * k], k, 1.0).unwrap();
        assert!((pair.angles[0].im - 1.5f64.acosh()).abs() < 1e-14);
        for z in pair.angles {
            assert!(dispersion_gap(z, [0.0, 3.0 * k], k).norm() <= 1e-10 * k * k);
        }
        assert!(resonance_angles([0.0, 0.0], k, 1.0).is_err());
    }

    #[test]
    fn measure_of_single_real_disk() {
        let mut set = AngleSet::strip(1.0);
        assert!((measure_of_angle_set(&set) - TWO_PI).abs() < 1e-15);
        let tag = DiskTag {
            m: DualIndex(1, 0),
            branch: 1,
            step: 1,
            shift: [0.0, 0.0],
        };
        set.remove(vec![Disk {
            center: C64::new(1.0, 0.0),
            radius: 0.1,
            rule: RadiusRule::Short,
            tag,
        }]);
        assert!((measure_of_angle_set(&set) - (TWO_PI - 0.2)).abs() < 1e-14);
    }

    #[test]
    fn annulus_points_match_brute_force() {
        let cell = CellDescriptor::new(1, [TWO_PI, TWO_PI], vec![]);
        let c = [0.37, -2.2];
        let got = annulus_points(&cell, c, 4.5, 5.5);
        let mut want = Vec::new();
        for a in -10..=10 {
            for b in -10..=10 {
                let r = (a as f64 - c[0]).hypot(b as f64 - c[1]);
                if (4.5..=5.5).contains(&r) {
                    want.push(DualIndex(a, b));
                }
            }
        }
        want.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn first_cheese_is_potential_independent_and_audited() {
        let model = free_model(20.0);
        let set = build_first_cheese(&model).unwrap();
        let mu = measure_of_angle_set(&set);
        assert!(mu > 0.0 && mu < TWO_PI);
        for i in 0..200 {
            let s = (i as f64 + 0.5) / 200.0 * mu;
            let phi = set.theta.point_at(s).unwrap();
            let a = audit_direction(&model, phi);
            assert!(a.passed, "{a:?}");
        }
    }

    #[test]
    fn free_component_counts_match_centers() {
        let model = free_model(20.0);
        let ctx = ShiftContext::new(&model.step(1).cell, [0.31, 0.57], model.small_b_threshold())
            .unwrap();
        let cheese = shifted_cheese(&model, &ctx).unwrap();
        let counts = count_components(&model, &cheese);
        let mut seen = 0;
        for c in counts.iter().flatten().take(300) {
            let c = c.as_ref().unwrap();
            assert_eq!(c.free_counts[0] as usize, c.free_exact);
            assert_eq!(c.counts_agree(), Some(true));
            assert!(c.stable);
            seen += 1;
        }
        assert!(seen > 100);
    }

    #[test]
    fn corner_shift_is_degenerate() {
        let model = free_model(20.0);
        assert!(ShiftContext::new(&model.step(1).cell, [0.0, 0.0], 1e-6).is_err());
    }
}
