use std::path::PathBuf;

use proptest::prelude::*;

use spectral_lab::eigenfunction::{bloch_eigenfunction, EigenRoute};
use spectral_lab::intervals::{IntervalSet, TWO_PI};
use spectral_lab::lattice::{CellDescriptor, DualIndex};
use spectral_lab::model::{Model, Params};
use spectral_lab::output::{read_csv, write_csv, CurveRow};
use spectral_lab::potential::PotentialSpec;

fn arcs() -> impl Strategy<Value = IntervalSet> {
    prop::collection::vec((0.0..TWO_PI, 0.0..1.5f64), 0..8).prop_map(IntervalSet::from_arcs)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn well_formed(s: &IntervalSet) -> bool {
    s.intervals
        .iter()
        .all(|&(a, b)| 0.0 <= a && a < b && b <= TWO_PI)
        && s.intervals.windows(2).all(|w| w[0].1 < w[1].0)
}

proptest! {
    #[test]
    fn interval_algebra(a in arcs(), b in arcs(), x in 0.0..TWO_PI) {
        let (u, i, d) = (a.union(&b), a.intersection(&b), a.difference(&b));
        prop_assert!(well_formed(&u) && well_formed(&i) && well_formed(&d));
        prop_assert!(close(u.measure() + i.measure(), a.measure() + b.measure()));
        prop_assert!(close(d.measure() + i.measure(), a.measure()));
        prop_assert!(close(a.complement().measure(), TWO_PI - a.measure()));
        prop_assert!(i.is_subset_of(&a) && a.is_subset_of(&u));
        prop_assert_eq!(u.contains(x), a.contains(x) || b.contains(x));
        prop_assert_eq!(a.complement().contains(x), !a.contains(x));
    }

    #[test]
    fn point_at_lands_inside(a in arcs(), frac in 0.0..1.0f64) {
        prop_assume!(a.measure() > 0.0);
        let p = a.point_at(frac * a.measure()).unwrap();
        prop_assert!(a.contains(p));
    }

    #[test]
    fn reduction_round_trip(d1 in 0.5..40.0f64, d2 in 0.5..40.0f64, vx in -300.0..300.0f64, vy in -300.0..300.0f64) {
        let cell = CellDescriptor::new(1, [d1, d2], vec![]);
        let (t, j) = cell.reduce_to_cell([vx, vy]);
        prop_assert!(cell.contains(t));
        let back = cell.dual_vector(j, t);
        prop_assert!((back[0] - vx).abs() <= 1e-12 * (1.0 + vx.abs()));
        prop_assert!((back[1] - vy).abs() <= 1e-12 * (1.0 + vy.abs()));
    }

    #[test]
    fn index_split(a in -10_000i64..10_000, b in -10_000i64..10_000, n in 1i64..9) {
        let m = DualIndex(a, b);
        let (q, r) = m.split(n);
        prop_assert!((0..n).contains(&r.0) && (0..n).contains(&r.1));
        prop_assert_eq!(q * n + r, m);
    }

    #[test]
    fn curve_csv_round_trip(rows in prop::collection::vec((1usize..4, 0.0..TWO_PI, 15.0..25.0f64, 0usize..50, -1.0..1.0f64), 0..40)) {
        let rows: Vec<CurveRow> = rows
            .into_iter()
            .map(|(step, phi, kappa, arc, h)| CurveRow { step, phi, kappa, arc, h, dkappa: h * 1e-3, residual: h.abs() * 1e-15 })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        write_csv(&path, &rows).unwrap();
        let back: Vec<CurveRow> = read_csv(&path).unwrap();
        prop_assert_eq!(back, rows);
    }
}

fn default_model() -> Model {
    let path =
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/default_potential.toml");
    let spec = PotentialSpec::from_path(&path).unwrap();
    Model::new(spec, Params::default(), 20.0, 2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn extend_then_restrict(phi in 0.0..TWO_PI) {
        let model = default_model();
        let k = model.k;
        let rho = model.contour_radius(1);
        let f = bloch_eigenfunction(&model, 1, [k * phi.cos(), k * phi.sin()], (model.lambda - rho, model.lambda + rho), EigenRoute::Oracle);
        // resonant directions have no isolated level in the window
        prop_assume!(f.is_ok());
        let f = f.unwrap();
        let factor = model.step(2).refinement;
        let fine = f.extend(&model.step(2).cell, factor).unwrap();
        prop_assert!((fine.norm() - f.norm()).abs() < 1e-14);
        let back = fine.restrict(&model.step(1).cell, factor).unwrap();
        prop_assert_eq!(back.j, f.j);
        prop_assert_eq!(&back.coeffs, &f.coeffs);
        prop_assert!((back.t[0] - f.t[0]).abs() < 1e-12 && (back.t[1] - f.t[1]).abs() < 1e-12);
    }
}
