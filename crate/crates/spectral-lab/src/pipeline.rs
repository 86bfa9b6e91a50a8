//! Staged runs, manifests and the k-scan.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cheese::{
    audit_direction, build_first_cheese, build_pole_cheese, count_selected, shifted_cheese,
    small_b_disks, AngleSet, Disk, GradientSample, Regime, ShiftContext,
};
use crate::config::RunConfig;
use crate::curves::{
    build_iso_curve, fold_curve, sample_measure, solve_kappa, window_half_width, AngleSample,
    IsoCurve,
};
use crate::eigenfunction::{
    bloch_eigenfunction, grid_points, plane_wave_correction, residual_check, step_delta,
    BlochEigenfunction, EigenRoute,
};
use crate::error::{LabError, Result};
use crate::intervals::{IntervalSet, TWO_PI};
use crate::lattice::DualIndex;
use crate::model::{Model, Operator, Params};
use crate::numeric::hermitian_eigen;
use crate::oracle::{count_in_window, refine_spectrum_union, resolvent_norm, Route, UnionQuery};
use crate::output::{
    emit_outputs, write_csv, write_json, CoefficientRow, CorrectionRow, CurveRow, DeltaRow,
    DiskRow, IntervalRecord, OutputKind, SeriesRow, Tables,
};
use crate::potential::{validate_spec, PotentialSpec};
use crate::series::{eigenvalue_series, g_explicit, Contour};
use crate::C64;

pub const STAGES: [&str; 9] = [
    "potential",
    "cheese",
    "series",
    "curves",
    "fold",
    "step2",
    "step3",
    "eigenfunctions",
    "deltas",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageState {
    Ok,
    Failed,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub name: String,
    pub state: StageState,
    pub message: Option<String>,
    pub exit_code: Option<i32>,
    /// Wall time of the stage.
    #[serde(default)]
    pub seconds: f64,
}

impl StageStatus {
    fn new(name: &str, state: StageState, message: Option<String>) -> Self {
        Self {
            name: name.into(),
            state,
            message,
            exit_code: None,
            seconds: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub passed: usize,
    pub failed: usize,
    pub first_failure: Option<String>,
}

impl Audit {
    pub fn green(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderRung {
    pub radius_scale: f64,
    /// Failed directions of the dense audit; `None` when the set is empty.
    pub failures: Option<usize>,
    pub theta_measure: f64,
}

/// Everything computed for one energy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRun {
    pub k: f64,
    pub lambda: f64,
    pub steps: usize,
    pub cuts: Vec<u32>,
    pub radius_scale: Option<f64>,
    pub ladder: Vec<LadderRung>,
    pub removed_fraction: Option<f64>,
    pub theta_measures: Vec<f64>,
    pub max_h: Vec<f64>,
    pub mean_u1: Option<f64>,
    pub stages: Vec<StageStatus>,
    pub audits: BTreeMap<String, Audit>,
    /// Items excluded from audits, by reason.
    pub tallies: BTreeMap<String, usize>,
    pub tables: Tables,
}

impl EnergyRun {
    pub fn completed(&self) -> Vec<String> {
        self.stages
            .iter()
            .filter(|s| s.state == StageState::Ok)
            .map(|s| s.name.clone())
            .collect()
    }

    pub fn exit_code(&self) -> i32 {
        self.stages.iter().find_map(|s| s.exit_code).unwrap_or(0)
    }

    fn audit(&mut self, name: &str, ok: bool, sample: impl FnOnce() -> String) {
        let a = self.audits.entry(name.to_string()).or_default();
        if ok {
            a.passed += 1;
        } else {
            a.failed += 1;
            if a.first_failure.is_none() {
                a.first_failure = Some(sample());
            }
        }
    }

    fn require(&self, names: &[&str]) -> Result<()> {
        for n in names {
            if let Some(a) = self.audits.get(*n) {
                if !a.green() {
                    return Err(LabError::Invariant(format!(
                        "audit {n}: {} of {} failed, first: {}",
                        a.failed,
                        a.failed + a.passed,
                        a.first_failure.clone().unwrap_or_default()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Intermediate objects shared between stages.
struct State {
    model: Model,
    thetas: Vec<IntervalSet>,
    curves: Vec<IsoCurve>,
    functions: Vec<(f64, Vec<BlochEigenfunction>)>,
}

fn stage_rng(seed: u64, stage: &str, k: f64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    h.update(k.to_bits().to_le_bytes());
    let d = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(
        d[..8].try_into().expect("digest length"),
    ))
}

/// `count` directions evenly spaced in the measure of `theta`.
pub fn measure_points(theta: &IntervalSet, count: usize) -> Vec<f64> {
    let mu = theta.measure();
    (0..count)
        .filter_map(|i| theta.point_at((i as f64 + 0.5) / count as f64 * mu))
        .collect()
}

/// `count` evenly spaced entries of `items`.
fn spread<T: Clone>(items: &[T], count: usize) -> Vec<T> {
    if items.len() <= count {
        return items.to_vec();
    }
    (0..count)
        .map(|i| items[(2 * i + 1) * items.len() / (2 * count)].clone())
        .collect()
}

/// First-step set with the smallest ladder prefactor whose dense audit passes.
pub fn calibrate(
    spec: &PotentialSpec,
    params: &Params,
    k: f64,
    steps: usize,
    ladder: &[f64],
    points: usize,
) -> Result<(Model, AngleSet, Vec<LadderRung>)> {
    let rungs: Vec<f64> = if ladder.is_empty() {
        vec![params.radius_scale]
    } else {
        ladder.to_vec()
    };
    let mut log = Vec::new();
    for scale in rungs {
        let mut p = params.clone();
        p.radius_scale = scale;
        let model = Model::new(spec.clone(), p, k, steps)?;
        let set = match build_first_cheese(&model) {
            Ok(s) => s,
            Err(LabError::FullyResonant) => {
                log.push(LadderRung {
                    radius_scale: scale,
                    failures: None,
                    theta_measure: 0.0,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let failures = measure_points(&set.theta, points)
            .par_iter()
            .filter(|phi| !audit_direction(&model, **phi).passed)
            .count();
        log.push(LadderRung {
            radius_scale: scale,
            failures: Some(failures),
            theta_measure: set.theta.measure(),
        });
        if failures == 0 {
            return Ok((model, set, log));
        }
    }
    Err(LabError::Invariant(format!(
        "no radius prefactor passes the dense audit at k = {k}: {log:?}"
    )))
}

/// Eigenvalue tracked from the mode at momentum `x`; dense fallback when the series is out of range.
pub fn eigen_near(model: &Model, n: usize, x: [f64; 2]) -> Result<f64> {
    match model.tracked_eigenvalue(n, x) {
        Ok(t) => Ok(t.value),
        Err(LabError::OutsidePerturbativeRegime { .. }) => {
            let h = model.local_matrix(n, x, Operator::Cumulative);
            let j = h.position(DualIndex::ZERO).expect("origin in ball");
            let (vals, vecs) = hermitian_eigen(&h.dense());
            let best = (0..vals.len())
                .max_by(|a, b| vecs[(j, *a)].norm().total_cmp(&vecs[(j, *b)].norm()))
                .ok_or_else(|| LabError::Numeric("empty local matrix".into()))?;
            Ok(vals[best])
        }
        Err(e) => Err(e),
    }
}

fn disk_row(d: &Disk) -> DiskRow {
    DiskRow {
        re_c: d.center.re,
        im_c: d.center.im,
        r: d.radius,
        m1: d.tag.m.0,
        m2: d.tag.m.1,
        branch: d.tag.branch,
        step: d.tag.step,
        shift1: d.tag.shift[0],
        shift2: d.tag.shift[1],
        rule: format!("{:?}", d.rule),
    }
}

fn curve_rows(c: &IsoCurve) -> Vec<CurveRow> {
    c.samples
        .iter()
        .map(|s| CurveRow {
            step: c.step,
            phi: s.phi,
            kappa: s.kappa,
            arc: s.arc,
            h: s.h,
            dkappa: s.dkappa,
            residual: s.residual,
        })
        .collect()
}

fn run_stage(
    run: &mut EnergyRun,
    name: &str,
    f: impl FnOnce(&mut EnergyRun) -> Result<()>,
) -> bool {
    if run.stages.iter().any(|s| s.state == StageState::Failed) {
        run.stages.push(StageStatus::new(
            name,
            StageState::Skipped,
            Some("earlier stage failed".into()),
        ));
        return false;
    }
    let start = Instant::now();
    let result = f(run);
    let mut status = match &result {
        Ok(()) => StageStatus::new(name, StageState::Ok, None),
        Err(e) => StageStatus {
            exit_code: Some(e.exit_code()),
            ..StageStatus::new(name, StageState::Failed, Some(e.to_string()))
        },
    };
    status.seconds = start.elapsed().as_secs_f64();
    run.stages.push(status);
    result.is_ok()
}

fn skip(run: &mut EnergyRun, name: &str, why: &str) {
    run.stages.push(StageStatus::new(
        name,
        StageState::Skipped,
        Some(why.into()),
    ));
}

/// Runs every stage for one energy; failures are recorded, not returned.
pub fn run_energy(cfg: &RunConfig, spec: &PotentialSpec, k: f64) -> EnergyRun {
    let steps = cfg.steps;
    let mut run = EnergyRun {
        k,
        lambda: k * k,
        steps,
        cuts: Vec::new(),
        radius_scale: None,
        ladder: Vec::new(),
        removed_fraction: None,
        theta_measures: Vec::new(),
        max_h: Vec::new(),
        mean_u1: None,
        stages: Vec::new(),
        audits: BTreeMap::new(),
        tallies: BTreeMap::new(),
        tables: Tables::default(),
    };
    let mut state: Option<State> = None;
    let s = &cfg.sampling;

    run_stage(&mut run, "potential", |run| {
        let model = Model::new(spec.clone(), cfg.params.clone(), k, steps)?;
        run.cuts = model.cuts.clone();
        Ok(())
    });

    run_stage(&mut run, "cheese", |run| {
        let (model, first, ladder) = calibrate(
            spec,
            &cfg.params,
            k,
            steps,
            &s.radius_ladder,
            s.calibration_points,
        )?;
        run.ladder = ladder;
        run.radius_scale = Some(model.params.radius_scale);
        let audits: Vec<_> = measure_points(&first.theta, s.audit_points)
            .par_iter()
            .map(|phi| audit_direction(&model, *phi))
            .collect();
        for a in &audits {
            run.audit("geometric", a.passed, || format!("{a:?}"));
        }
        run.removed_fraction = Some(1.0 - first.theta.measure() / TWO_PI);
        run.theta_measures.push(first.theta.measure());
        run.tables.disks.extend(first.disks.iter().map(disk_row));
        run.tables.intervals.push(IntervalRecord {
            step: 1,
            measure: first.theta.measure(),
            intervals: first.theta.intervals.clone(),
        });
        state = Some(State {
            model,
            thetas: vec![first.theta.clone()],
            curves: Vec::new(),
            functions: Vec::new(),
        });
        run.require(&["geometric"])
    });

    run_stage(&mut run, "series", |run| {
        let st = state.as_ref().expect("cheese stage done");
        series_stage(run, st, cfg)
    });

    run_stage(&mut run, "curves", |run| {
        let st = state.as_mut().expect("cheese stage done");
        let theta = st.thetas[0].clone();
        let samples = sample_measure(&theta, &theta, s.curve_samples);
        let curve = build_iso_curve(&st.model, 1, &samples, &theta, None)?;
        record_curve(run, &st.model, &curve);
        if st.model.spec.scales.is_empty() {
            for c in &curve.samples {
                run.audit("free_kappa", (c.kappa - k).abs() <= 1e-12 * k, || {
                    format!("phi {} kappa {}", c.phi, c.kappa)
                });
            }
        }
        st.curves.push(curve);
        run.require(&["curve_roots", "free_kappa"])
    });

    run_stage(&mut run, "fold", |run| {
        let st = state.as_ref().expect("curves stage done");
        fold_audit(run, &st.model, &st.curves[0], s.fold_resolution);
        run.require(&["fold_injective"])
    });

    if steps >= 2 {
        run_stage(&mut run, "step2", |run| {
            let st = state.as_mut().expect("fold stage done");
            refine_stage(run, st, cfg, 2)?;
            let model = &st.model;
            let curve2 = st.curves[1].clone();
            separation_audit(run, model, &curve2, s.separation_points);
            union_audit(run, model, cfg);
            shift_count_audit(run, model, cfg);
            small_shift_audit(run, model, cfg);
            run.require(&[
                "curve_roots",
                "fold_injective",
                "separation",
                "spectrum_union",
                "pole_counts",
                "count_stability",
                "small_shift_roots",
            ])
        });
    } else {
        skip(&mut run, "step2", "steps < 2");
    }

    if steps >= 3 {
        run_stage(&mut run, "step3", |run| {
            let st = state.as_mut().expect("step2 stage done");
            refine_stage(run, st, cfg, 3)?;
            run.require(&["curve_roots", "fold_injective"])
        });
    } else {
        skip(&mut run, "step3", "steps < 3");
    }

    run_stage(&mut run, "eigenfunctions", |run| {
        let st = state.as_mut().expect("curve stages done");
        eigen_stage(run, st, cfg)?;
        run.require(&[
            "eigen_normalization",
            "eigen_residual",
            "route_overlap",
            "fd_residual",
        ])
    });

    run_stage(&mut run, "deltas", |run| {
        let st = state.as_ref().expect("eigenfunction stage done");
        delta_stage(run, st)?;
        run.require(&["delta_bound", "delta_decay"])
    });
    run
}

fn series_stage(run: &mut EnergyRun, st: &State, cfg: &RunConfig) -> Result<()> {
    let model = &st.model;
    let k = model.k;
    let rho = model.contour_radius(1);
    let free = model.step(1).cumulative.coeffs.is_empty();
    let phis = measure_points(&st.thetas[0], cfg.sampling.series_points);
    let rows: Vec<Result<(SeriesRow, usize, f64)>> = phis
        .par_iter()
        .map(|&phi| {
            let x = [k * phi.cos(), k * phi.sin()];
            let h = model.local_matrix(1, x, Operator::Cumulative);
            let j = h.position(DualIndex::ZERO).expect("origin in ball");
            let contour = Contour::new(h.diag[j].re, rho);
            let s = eigenvalue_series(&h, j, 1.0, model.params.r_max, &contour)?;
            let g1 = g_explicit(&h, j, 1)?.value.re;
            let g2 = g_explicit(&h, j, 2)?.value.re;
            let t = model.step(1).cell.reduce_to_cell(x).0;
            let res = resolvent_norm(&h, C64::new(h.diag[j].re + rho, 0.0))?;
            Ok((
                SeriesRow {
                    phi,
                    t1: t[0],
                    t2: t[1],
                    base: s.base,
                    value: s.value,
                    oracle: s.oracle_eigenvalue.unwrap_or(f64::NAN),
                    discrepancy: s.discrepancy.unwrap_or(f64::INFINITY),
                    tail_bound: s.tail_bound,
                    coupling: s.coupling_estimate,
                    g1,
                    g2,
                },
                s.oracle_count,
                res,
            ))
        })
        .collect();
    for (i, r) in rows.into_iter().enumerate() {
        let (row, count, res) = r?;
        let tol = row.tail_bound.max(1e-8 * k * k);
        run.audit(
            "series_oracle",
            count == 1 && row.discrepancy <= tol,
            || format!("{row:?}"),
        );
        run.audit("g1_zero", row.g1 == 0.0, || {
            format!("phi {} g1 {}", row.phi, row.g1)
        });
        let g2_ok = if free { row.g2 == 0.0 } else { row.g2 > 0.0 };
        run.audit("g2_sign", g2_ok, || {
            format!("phi {} g2 {}", row.phi, row.g2)
        });
        if i < cfg.sampling.resolvent_checks {
            run.audit(
                "resolvent",
                res.is_finite() && res <= model.params.resolvent_ceiling,
                || format!("phi {} norm {res}", row.phi),
            );
        }
        run.tables.series.push(row);
    }
    run.require(&["series_oracle", "g1_zero", "g2_sign", "resolvent"])
}

fn record_curve(run: &mut EnergyRun, model: &Model, curve: &IsoCurve) {
    let tol = model.params.solver_tol * model.lambda;
    for c in &curve.samples {
        run.audit("curve_roots", c.residual.abs() <= tol, || {
            format!("step {} phi {} residual {}", curve.step, c.phi, c.residual)
        });
    }
    run.max_h
        .push(curve.samples.iter().map(|c| c.h.abs()).fold(0.0, f64::max));
    run.tables.curves.extend(curve_rows(curve));
}

fn fold_audit(run: &mut EnergyRun, model: &Model, curve: &IsoCurve, resolution: f64) {
    let folded = fold_curve(curve, &model.step(curve.step).cell, resolution);
    let hit: Vec<u64> = folded
        .collisions
        .iter()
        .flat_map(|c| [c.phi_a.to_bits(), c.phi_b.to_bits()])
        .collect();
    for (_, phi) in &folded.points {
        run.audit("fold_injective", !hit.contains(&phi.to_bits()), || {
            format!("step {}: {:?}", curve.step, folded.collisions.first())
        });
    }
}

/// Pole cheese on `Theta_{n-1}`, then the step-`n` curve and its fold.
fn refine_stage(run: &mut EnergyRun, st: &mut State, cfg: &RunConfig, n: usize) -> Result<()> {
    let model = &st.model;
    let prev = &st.curves[n - 2];
    let theta_prev = &st.thetas[n - 2];
    let samples: Vec<(f64, f64)> = prev.samples.iter().map(|c| (c.phi, c.kappa)).collect();
    let poles = build_pole_cheese(model, n - 1, theta_prev, &samples, |x| {
        eigen_near(model, n - 1, x)
    })?;
    for p in &poles.poles {
        let r = if p.refined {
            2.0 * poles.radius
        } else {
            poles.radius
        };
        run.tables.disks.push(DiskRow {
            re_c: p.phi,
            im_c: 0.0,
            r,
            m1: p.m.0,
            m2: p.m.1,
            branch: 0,
            step: n,
            shift1: p.shift[0],
            shift2: p.shift[1],
            rule: "Pole".into(),
        });
    }
    let theta = theta_prev.difference(&poles.removed);
    if theta.is_empty() {
        return Err(LabError::FullyResonant);
    }
    let kept: Vec<AngleSample> = prev
        .samples
        .iter()
        .filter(|c| theta.contains(c.phi))
        .map(|c| AngleSample {
            phi: c.phi,
            arc: c.arc,
        })
        .collect();
    let curve = build_iso_curve(model, n, &kept, &theta, Some(prev))?;
    record_curve(run, model, &curve);
    fold_audit(run, model, &curve, cfg.sampling.fold_resolution);
    run.theta_measures.push(theta.measure());
    run.tables.intervals.push(IntervalRecord {
        step: n,
        measure: theta.measure(),
        intervals: theta.intervals.clone(),
    });
    st.thetas.push(theta);
    st.curves.push(curve);
    Ok(())
}

fn separation_audit(run: &mut EnergyRun, model: &Model, curve: &IsoCurve, count: usize) {
    let lambda = model.lambda;
    let rho = model.contour_radius(2);
    let bound = model.params.c_hat * model.step(2).increment.norm;
    let picks = spread(&curve.samples, count);
    let results: Vec<Result<(usize, f64)>> = picks
        .par_iter()
        .map(|c| {
            let x = [c.kappa * c.phi.cos(), c.kappa * c.phi.sin()];
            let h =
                model.local_matrix_radius(2, x, Operator::Cumulative, model.params.eigen_radius);
            let count = count_in_window(&h, lambda - rho, lambda + rho)?;
            let l1 = eigen_near(model, 1, x)?;
            Ok((count, (lambda - l1).abs()))
        })
        .collect();
    for (c, r) in picks.iter().zip(results) {
        match r {
            Ok((count, d)) => run.audit(
                "separation",
                count == 1 && d <= bound + 1e-12 * lambda,
                || format!("phi {} count {count} delta {d:e}", c.phi),
            ),
            Err(e) => run.audit("separation", false, || format!("phi {}: {e}", c.phi)),
        }
    }
}

fn union_audit(run: &mut EnergyRun, model: &Model, cfg: &RunConfig) {
    let mut rng = stage_rng(cfg.seed, "union", model.k);
    let coarse = &model.step(1).cell;
    let fine = &model.step(2).cell;
    let g = fine.spacing();
    let taus: Vec<[f64; 2]> = (0..cfg.sampling.union_samples)
        .map(|_| [rng.random::<f64>() * g[0], rng.random::<f64>() * g[1]])
        .collect();
    let window = (model.lambda - 5.0, model.lambda + 5.0);
    let pot = model.potential(1, Operator::Cumulative);
    let reports: Vec<_> = taus
        .par_iter()
        .map(|&tau| {
            let query = UnionQuery {
                tau,
                k: model.k,
                shell_half_width: cfg.sampling.union_shell_half_width,
                window,
                retain: None,
                route: Route::Dense,
            };
            refine_spectrum_union(coarse, fine, pot, &query)
        })
        .collect();
    for (tau, r) in taus.iter().zip(reports) {
        match r {
            Ok(rep) => run.audit("spectrum_union", rep.ok, || {
                format!("tau {tau:?} mismatch {:e}", rep.max_mismatch)
            }),
            Err(e) => run.audit("spectrum_union", false, || format!("tau {tau:?}: {e}")),
        }
    }
}

fn shift_count_audit(run: &mut EnergyRun, model: &Model, cfg: &RunConfig) {
    let mut rng = stage_rng(cfg.seed, "shifts", model.k);
    let cell = &model.step(1).cell;
    let g = cell.spacing();
    let threshold = model.small_b_threshold();
    let mut done = 0;
    while done < cfg.sampling.shift_samples {
        let b = [rng.random::<f64>() * g[0], rng.random::<f64>() * g[1]];
        let Ok(ctx) = ShiftContext::new(cell, b, threshold) else {
            continue;
        };
        if ctx.regime != Regime::LargeShift {
            continue;
        }
        done += 1;
        let cheese = match shifted_cheese(model, &ctx) {
            Ok(c) => c,
            Err(e) => {
                run.audit("pole_counts", false, || format!("b {b:?}: {e}"));
                continue;
            }
        };
        let total = cheese.components.len();
        let budget = cfg.sampling.components_per_shift.min(total);
        let picks: Vec<usize> = (0..budget).map(|i| i * total / budget).collect();
        *run.tallies.entry("components_skipped".into()).or_default() += total - budget;
        for c in count_selected(model, &cheese, &picks) {
            match c {
                None => {
                    *run.tallies
                        .entry("components_oversized".into())
                        .or_default() += 1
                }
                Some(Err(_)) => {
                    *run.tallies
                        .entry("components_unresolved".into())
                        .or_default() += 1
                }
                Some(Ok(c)) if c.bound_holds => {
                    run.audit("pole_counts", c.counts_agree() == Some(true), || {
                        format!("b {b:?}: {c:?}")
                    });
                    run.audit("count_stability", c.stable, || format!("b {b:?}: {c:?}"));
                }
                Some(Ok(_)) => {
                    *run.tallies
                        .entry("components_bound_fails".into())
                        .or_default() += 1
                }
            }
        }
    }
}

/// Tracked-eigenvalue gradients along the first-step curve on a uniform angle grid.
pub fn gradient_grid(model: &Model, size: usize) -> Vec<Option<GradientSample>> {
    let half = window_half_width(model, 1);
    (0..size)
        .into_par_iter()
        .map(|i| {
            let phi = TWO_PI * i as f64 / size as f64;
            let kappa = solve_kappa(model, 1, phi, model.k, half).ok()?.kappa;
            let x = [kappa * phi.cos(), kappa * phi.sin()];
            let d = 1e-5;
            let mut grad = [0.0; 2];
            for (a, g) in grad.iter_mut().enumerate() {
                let mut p = x;
                let mut m = x;
                p[a] += d;
                m[a] -= d;
                *g = (model.tracked_eigenvalue(1, p).ok()?.value
                    - model.tracked_eigenvalue(1, m).ok()?.value)
                    / (2.0 * d);
            }
            Some(GradientSample { phi, kappa, grad })
        })
        .collect()
}

/// `F(phi) = lambda(kappa nu + b) - lambda(kappa nu)` on the first-step curve.
pub fn small_shift_function(model: &Model, offset: [f64; 2], phi: f64) -> Result<f64> {
    let kappa = solve_kappa(model, 1, phi, model.k, window_half_width(model, 1))
        .map(|r| r.kappa)
        .unwrap_or(model.k);
    let x = [kappa * phi.cos(), kappa * phi.sin()];
    Ok(model
        .tracked_eigenvalue(1, [x[0] + offset[0], x[1] + offset[1]])?
        .value
        - model.tracked_eigenvalue(1, x)?.value)
}

/// Random shift at distance `b0` from a random corner of the first cell.
pub fn small_shift(model: &Model, rng: &mut impl Rng) -> [f64; 2] {
    let g = model.step(1).cell.spacing();
    let b0 = model.small_b_threshold() * rng.random_range(0.1..0.9);
    let a = rng.random_range(0.05..(0.5 * PI - 0.05));
    let sx = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let sy = if rng.random::<bool>() { 1.0 } else { -1.0 };
    [
        (sx * b0 * a.cos()).rem_euclid(g[0]),
        (sy * b0 * a.sin()).rem_euclid(g[1]),
    ]
}

fn small_shift_audit(run: &mut EnergyRun, model: &Model, cfg: &RunConfig) {
    let count = cfg.sampling.small_shift_samples;
    if count == 0 {
        return;
    }
    let grid = gradient_grid(model, cfg.sampling.gradient_grid);
    let mut rng = stage_rng(cfg.seed, "small-shifts", model.k);
    let shifts: Vec<[f64; 2]> = (0..count).map(|_| small_shift(model, &mut rng)).collect();
    let results: Vec<Result<usize>> = shifts
        .par_iter()
        .map(|b| {
            let ctx = ShiftContext::new(&model.step(1).cell, *b, model.small_b_threshold())?;
            let out = small_b_disks(model, 1, &ctx, &grid, |phi| {
                small_shift_function(model, ctx.offset, phi)
            })?;
            Ok(out.roots.len())
        })
        .collect();
    for (b, r) in shifts.iter().zip(results) {
        match r {
            Ok(n) => run.audit("small_shift_roots", n <= 2, || {
                format!("b {b:?}: {n} roots")
            }),
            Err(e) => run.audit("small_shift_roots", false, || format!("b {b:?}: {e}")),
        }
    }
}

fn eigen_stage(run: &mut EnergyRun, st: &mut State, cfg: &RunConfig) -> Result<()> {
    let model = &st.model;
    let top = st.curves.len();
    let lambda = model.lambda;
    let picks = spread(&st.curves[top - 1].samples, cfg.sampling.eigen_points);
    let ppw = cfg.sampling.points_per_wavelength;
    let built: Vec<Result<Vec<BlochEigenfunction>>> = picks
        .par_iter()
        .map(|c| {
            let x = [c.kappa * c.phi.cos(), c.kappa * c.phi.sin()];
            let mut fs: Vec<BlochEigenfunction> = Vec::new();
            for n in 1..=top {
                let rho = model.contour_radius(n);
                let window = (lambda - rho, lambda + rho);
                let mut f = if n == 1 {
                    let series = bloch_eigenfunction(model, 1, x, window, EigenRoute::Series)?;
                    let mut oracle = bloch_eigenfunction(model, 1, x, window, EigenRoute::Oracle)?;
                    oracle.overlap = series.overlap;
                    oracle
                } else {
                    bloch_eigenfunction(model, n, x, window, EigenRoute::Oracle)?
                };
                if let Some(p) = fs.last() {
                    f.fix_phase_against(&p.extend(&f.cell, model.step(n).refinement)?)?;
                }
                fs.push(f);
            }
            Ok(fs)
        })
        .collect();
    let mut u1 = Vec::new();
    for (i, (c, fs)) in picks.iter().zip(built).enumerate() {
        let fs = fs?;
        for f in &fs {
            run.audit(
                "eigen_normalization",
                (f.norm() - 1.0).abs() <= 1e-10,
                || format!("point {i} step {} norm {}", f.step, f.norm()),
            );
            run.audit("eigen_residual", f.residual <= 1e-8, || {
                format!("point {i} step {} residual {:e}", f.step, f.residual)
            });
            if let Some(ov) = f.overlap {
                run.audit("route_overlap", ov >= model.params.overlap_bound, || {
                    format!("point {i} overlap {ov}")
                });
            }
            let pot = model.potential(f.step, Operator::Cumulative);
            let corr = plane_wave_correction(f, pot, 16);
            if f.step == 1 {
                u1.push(corr.l1_bound);
            }
            run.tables.corrections.push(CorrectionRow {
                point: i,
                step: f.step,
                l1_bound: corr.l1_bound,
                grid_max: corr.grid_max,
                decay_ratio: corr.decay_ratio,
            });
            run.tables
                .coefficients
                .extend(f.coeffs.iter().map(|(m, z)| CoefficientRow {
                    point: i,
                    step: f.step,
                    m1: m.0,
                    m2: m.1,
                    re: z.re,
                    im: z.im,
                }));
            if f.step <= 2 {
                let rep = residual_check(f, pot, grid_points(f, ppw))?;
                run.audit("fd_residual", rep.excess <= 1e-6 * lambda, || {
                    format!("point {i} step {}: {rep:?}", f.step)
                });
                run.tables.residuals.push(rep);
            }
        }
        st.functions.push((c.phi, fs));
    }
    run.mean_u1 = (!u1.is_empty()).then(|| u1.iter().sum::<f64>() / u1.len() as f64);
    Ok(())
}

fn delta_stage(run: &mut EnergyRun, st: &State) -> Result<()> {
    let model = &st.model;
    for (i, (phi, fs)) in st.functions.iter().enumerate() {
        let mut prev_l2 = f64::INFINITY;
        for w in fs.windows(2) {
            let n = w[1].step;
            let d = step_delta(
                &w[0],
                &w[1],
                model.step(n).refinement,
                model.step(n).increment.norm,
                model.params.c_hat,
            )?;
            run.audit("delta_bound", d.within_bound, || {
                format!("point {i}: {d:?}")
            });
            run.audit("delta_decay", d.l2 < prev_l2 || d.l2 <= 1e-10, || {
                format!("point {i}: l2 {} after {prev_l2}", d.l2)
            });
            prev_l2 = d.l2;
            run.tables.deltas.push(DeltaRow {
                point: i,
                phi: *phi,
                from_step: w[0].step,
                l2: d.l2,
                l1: d.l1,
                eigenvalue: d.eigenvalue,
                bound: d.eigenvalue_bound,
            });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    /// Absent for the manifest itself.
    pub sha256: Option<String>,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub k: f64,
    pub directory: String,
    pub radius_scale: Option<f64>,
    pub removed_fraction: Option<f64>,
    pub stages: Vec<StageStatus>,
    pub audits: BTreeMap<String, Audit>,
    pub tallies: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub potential_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub energies: Vec<EnergySummary>,
    pub trend: Option<TrendTable>,
    pub exit_code: i32,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn hashes(cfg: &RunConfig) -> Result<(String, String)> {
    let pot = fs::read(cfg.potential_path())?;
    Ok((
        sha256_hex(cfg.to_toml_string()?.as_bytes()),
        sha256_hex(&pot),
    ))
}

pub fn energy_dir(k: f64) -> String {
    format!("k{k}")
}

/// Loads and validates the potential named by the config.
pub fn load_spec(cfg: &RunConfig) -> Result<PotentialSpec> {
    cfg.validate()?;
    let spec = PotentialSpec::from_path(&cfg.potential_path())?;
    let report = validate_spec(&spec, cfg.params.strict);
    if !report.is_valid() {
        return Err(LabError::Validation(report.summary()));
    }
    Ok(spec)
}

/// Writes `results.json` and every emitted table of one energy.
pub fn write_energy(run: &EnergyRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("results.json"), run)?;
    let done = run.completed();
    for kind in OutputKind::ALL {
        if done.iter().any(|s| s == kind.stage()) {
            emit_outputs(&run.tables, &done, kind, dir)?;
        }
    }
    Ok(())
}

fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Hashes every file under `out` and writes `manifest.json`.
pub fn write_manifest(manifest: &mut RunManifest, out: &Path) -> Result<()> {
    let path = out.join("manifest.json");
    let mut files = Vec::new();
    for p in list_files(out)? {
        let rel = p
            .strip_prefix(out)
            .expect("under root")
            .to_string_lossy()
            .replace('\\', "/");
        if p == path {
            continue;
        }
        let bytes = fs::read(&p)?;
        files.push(FileEntry {
            path: rel,
            sha256: Some(sha256_hex(&bytes)),
            bytes: bytes.len() as u64,
        });
    }
    files.push(FileEntry {
        path: "manifest.json".into(),
        sha256: None,
        bytes: 0,
    });
    files.sort_by(|a, b| a.path.cmp(&b.path));
    manifest.files = files;
    write_json(&path, manifest)
}

/// Full run over every configured energy; the manifest is written even when a stage fails.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let spec = load_spec(cfg)?;
    let (config_hash, potential_hash) = hashes(cfg)?;
    fs::create_dir_all(out)?;
    let mut energies = Vec::new();
    let mut exit_code = 0;
    for &k in &cfg.k {
        let run = run_energy(cfg, &spec, k);
        let dir = energy_dir(k);
        write_energy(&run, &out.join(&dir))?;
        if exit_code == 0 {
            exit_code = run.exit_code();
        }
        energies.push(EnergySummary {
            k,
            directory: dir,
            radius_scale: run.radius_scale,
            removed_fraction: run.removed_fraction,
            stages: run.stages,
            audits: run.audits,
            tallies: run.tallies,
        });
    }
    let mut manifest = RunManifest {
        config_hash,
        potential_hash,
        seed: cfg.seed,
        steps: cfg.steps,
        energies,
        trend: None,
        exit_code,
        files: Vec::new(),
    };
    write_manifest(&mut manifest, out)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub k: f64,
    pub radius_scale: f64,
    pub removed_fraction: f64,
    pub max_h1: f64,
    pub l1_u1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendTable {
    pub rows: Vec<TrendRow>,
    /// Nonincrease of removed fraction, `max |h_1|` and `l1(u_1)`.
    pub monotone: [bool; 3],
}

impl TrendTable {
    pub fn all_monotone(&self) -> bool {
        self.monotone.iter().all(|m| *m)
    }
}

fn nonincreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12))
}

/// One trend row: calibrated first-step set, curve and plane-wave corrections.
pub fn scan_row(cfg: &RunConfig, spec: &PotentialSpec, k: f64) -> Result<TrendRow> {
    let s = &cfg.sampling;
    let (model, first, _) = calibrate(
        spec,
        &cfg.params,
        k,
        1,
        &s.radius_ladder,
        s.calibration_points,
    )?;
    let samples = sample_measure(&first.theta, &first.theta, s.curve_samples);
    let curve = build_iso_curve(&model, 1, &samples, &first.theta, None)?;
    let max_h1 = curve.samples.iter().map(|c| c.h.abs()).fold(0.0, f64::max);
    let rho = model.contour_radius(1);
    let picks = spread(&curve.samples, s.eigen_points.max(1));
    let u: Vec<Result<f64>> = picks
        .par_iter()
        .map(|c| {
            let x = [c.kappa * c.phi.cos(), c.kappa * c.phi.sin()];
            let f = bloch_eigenfunction(
                &model,
                1,
                x,
                (model.lambda - rho, model.lambda + rho),
                EigenRoute::Oracle,
            )?;
            Ok(plane_wave_correction(&f, model.potential(1, Operator::Cumulative), 16).l1_bound)
        })
        .collect();
    let u = u.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(TrendRow {
        k,
        radius_scale: model.params.radius_scale,
        removed_fraction: 1.0 - first.theta.measure() / TWO_PI,
        max_h1,
        l1_u1: u.iter().sum::<f64>() / u.len() as f64,
    })
}

/// Trend table over `scan_k` (or `k` when empty); needs at least three energies.
pub fn scan_k(cfg: &RunConfig) -> Result<TrendTable> {
    let ks = if cfg.scan_k.is_empty() {
        &cfg.k
    } else {
        &cfg.scan_k
    };
    if ks.len() < 3 {
        return Err(LabError::Validation(format!(
            "k-scan needs >= 3 energies, got {}",
            ks.len()
        )));
    }
    let spec = load_spec(cfg)?;
    let rows = ks
        .iter()
        .map(|&k| scan_row(cfg, &spec, k))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&TrendRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let monotone = [
        nonincreasing(&col(|r| r.removed_fraction)),
        nonincreasing(&col(|r| r.max_h1)),
        nonincreasing(&col(|r| r.l1_u1)),
    ];
    Ok(TrendTable { rows, monotone })
}

const TREND_SCHEMA: &str = "\
trend.csv: one row per energy of the k-scan.
  k                 energy scale, lambda = k^2
  radius_scale      calibrated disk-radius prefactor
  removed_fraction  1 - measure(Theta_1) / (2 pi)
  max_h1            max |kappa_1 - k| over the first-step curve samples
  l1_u1             mean l1 norm of the first-step plane-wave correction
";

/// Runs the scan, writes `trend.csv` and the manifest; exit code 4 flags a non-monotone column.
pub fn run_scan(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let table = scan_k(cfg)?;
    let (config_hash, potential_hash) = hashes(cfg)?;
    fs::create_dir_all(out)?;
    write_csv(&out.join("trend.csv"), &table.rows)?;
    fs::write(out.join("trend.schema.txt"), TREND_SCHEMA)?;
    let exit_code = if table.all_monotone() {
        0
    } else {
        LabError::Trend(String::new()).exit_code()
    };
    let mut manifest = RunManifest {
        config_hash,
        potential_hash,
        seed: cfg.seed,
        steps: 1,
        energies: Vec::new(),
        trend: Some(table),
        exit_code,
        files: Vec::new(),
    };
    write_manifest(&mut manifest, out)?;
    Ok(manifest)
}
