//! Finite unions of half-open intervals on the circle `[0, 2 pi)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub const TWO_PI: f64 = 2.0 * PI;

/// Sorted, disjoint, non-adjacent intervals `[a, b)` inside `[0, 2 pi)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub intervals: Vec<(f64, f64)>,
}

impl IntervalSet {
    pub fn empty() -> Self {
        Self {
            intervals: Vec::new(),
        }
    }

    pub fn full() -> Self {
        Self {
            intervals: vec![(0.0, TWO_PI)],
        }
    }

    pub fn measure(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, x: f64) -> bool {
        let x = x.rem_euclid(TWO_PI);
        let i = self.intervals.partition_point(|iv| iv.1 <= x);
        i < self.intervals.len() && self.intervals[i].0 <= x
    }

    /// Union of arcs given as `(center, half_length)`, wrapped onto the circle.
    pub fn from_arcs(arcs: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut pieces: Vec<(f64, f64)> = Vec::new();
        for (c, h) in arcs {
            if h <= 0.0 {
                continue;
            }
            if 2.0 * h >= TWO_PI {
                return Self::full();
            }
            let a = (c - h).rem_euclid(TWO_PI);
            let b = a + 2.0 * h;
            if b <= TWO_PI {
                pieces.push((a, b));
            } else {
                pieces.push((a, TWO_PI));
                pieces.push((0.0, b - TWO_PI));
            }
        }
        Self::normalized(pieces)
    }

    fn normalized(mut pieces: Vec<(f64, f64)>) -> Self {
        pieces.retain(|(a, b)| b > a);
        pieces.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(pieces.len());
        for (a, b) in pieces {
            match out.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => out.push((a, b)),
            }
        }
        Self { intervals: out }
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut v = self.intervals.clone();
        v.extend(other.intervals.iter().copied());
        Self::normalized(v)
    }

    /// Complement in `[0, 2 pi)`.
    pub fn complement(&self) -> Self {
        let mut out = Vec::new();
        let mut cur = 0.0;
        for &(a, b) in &self.intervals {
            if a > cur {
                out.push((cur, a));
            }
            cur = b;
        }
        if cur < TWO_PI {
            out.push((cur, TWO_PI));
        }
        Self { intervals: out }
    }

    pub fn difference(&self, other: &Self) -> Self {
        self.intersection(&other.complement())
    }

    pub fn intersection(&self, other: &Self) -> Self {
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.intervals.len() && j < other.intervals.len() {
            let (a1, b1) = self.intervals[i];
            let (a2, b2) = other.intervals[j];
            let lo = a1.max(a2);
            let hi = b1.min(b2);
            if hi > lo {
                out.push((lo, hi));
            }
            if b1 < b2 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Self { intervals: out }
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.intervals
            .iter()
            .all(|&(a, b)| other.intervals.iter().any(|&(c, d)| c <= a && b <= d))
    }

    /// Point at cumulative length `s` in `[0, measure)`.
    pub fn point_at(&self, mut s: f64) -> Option<f64> {
        for &(a, b) in &self.intervals {
            if s < b - a {
                return Some(a + s);
            }
            s -= b - a;
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_and_merge() {
        let s = IntervalSet::from_arcs([(0.1, 0.2), (TWO_PI - 0.05, 0.1), (3.0, 0.5), (3.3, 0.5)]);
        assert_eq!(s.intervals.len(), 3);
        assert!((s.measure() - (0.45 + 1.3)).abs() < 1e-12);
        assert!(s.contains(0.0) && s.contains(TWO_PI - 0.1) && s.contains(3.7) && !s.contains(1.0));
    }

    #[test]
    fn complement_measure() {
        let s = IntervalSet::from_arcs([(1.0, 0.25)]);
        assert!((s.complement().measure() - (TWO_PI - 0.5)).abs() < 1e-12);
        assert!(IntervalSet::full()
            .difference(&s)
            .is_subset_of(&IntervalSet::full()));
    }
}
