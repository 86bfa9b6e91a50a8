//! Small dense linear-algebra helpers shared by the oracle and the series.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::C64;

/// Eigenpairs of a Hermitian matrix, ascending; real symmetric input takes the
/// real route. Columns of the returned matrix are the eigenvectors.
pub fn hermitian_eigen(m: &DMatrix<C64>) -> (Vec<f64>, DMatrix<C64>) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let real = m.iter().all(|z| z.im == 0.0);
    let (vals, vecs): (Vec<f64>, DMatrix<C64>) = if real {
        let r = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)].re + m[(j, i)].re));
        let e = SymmetricEigen::new(r);
        (
            e.eigenvalues.iter().copied().collect(),
            e.eigenvectors.map(|x| C64::new(x, 0.0)),
        )
    } else {
        let h = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)].conj()));
        let e = SymmetricEigen::new(h);
        (e.eigenvalues.iter().copied().collect(), e.eigenvectors)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let sorted_vals = order.iter().map(|&i| vals[i]).collect();
    let sorted_vecs = DMatrix::from_fn(n, n, |i, j| vecs[(i, order[j])]);
    (sorted_vals, sorted_vecs)
}

/// Complex logarithm of the determinant via partial-pivot LU.
/// Returns `None` for an exactly singular matrix.
pub fn log_det(m: DMatrix<C64>) -> Option<C64> {
    let n = m.nrows();
    let lu = m.lu();
    let u = lu.u();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        let d = u[(i, i)];
        if d.norm() == 0.0 {
            return None;
        }
        acc += d.ln();
    }
    let sign: f64 = lu.p().determinant();
    if sign < 0.0 {
        acc += C64::new(0.0, PI);
    }
    Some(acc)
}

/// Smallest singular value.
pub fn min_singular(m: DMatrix<C64>) -> f64 {
    let s = m.singular_values();
    s.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Principal value of an angle in `(-pi, pi]`.
pub fn wrap_pi(a: f64) -> f64 {
    let mut x = a.rem_euclid(2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    }
    x
}

/// `arccos` continued to real arguments outside `[-1, 1]`; one of the two
/// conjugate branches.
pub fn acos_real(x: f64) -> C64 {
    if x.abs() <= 1.0 {
        C64::new(x.acos(), 0.0)
    } else if x > 1.0 {
        C64::new(0.0, x.acosh())
    } else {
        C64::new(PI, -(-x).acosh())
    }
}

pub fn norm2(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_closed_form() {
        let w = C64::new(0.3, 0.4);
        let m =
            DMatrix::from_row_slice(2, 2, &[C64::new(1.0, 0.0), w, w.conj(), C64::new(3.0, 0.0)]);
        let (vals, _) = hermitian_eigen(&m);
        let r = (1.0f64 + w.norm_sqr()).sqrt();
        assert!((vals[0] - (2.0 - r)).abs() < 1e-14);
        assert!((vals[1] - (2.0 + r)).abs() < 1e-14);
    }

    #[test]
    fn log_det_of_diagonal() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            C64::new(-2.0, 0.0),
            C64::new(0.0, 3.0),
        ]));
        let ld = log_det(m).unwrap();
        let det = ld.exp();
        assert!((det - C64::new(0.0, -6.0)).norm() < 1e-13);
    }

    #[test]
    fn acos_branches() {
        for x in [-3.0, -1.5, -0.3, 0.7, 2.5] {
            assert!((acos_real(x).cos() - C64::new(x, 0.0)).norm() < 1e-12);
        }
    }
}
