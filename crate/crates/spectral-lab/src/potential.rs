//! Limit-periodic potentials with doubling periods and the step potentials
//! assembled from them.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::lattice::DualIndex;
use crate::C64;

/// Fourier table of one scale `V_r`, periodic with periods `2^{r-1} d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleComponent {
    pub r: u32,
    pub coeffs: BTreeMap<DualIndex, C64>,
}

impl ScaleComponent {
    /// Sup-norm bound `sum |v_q|`.
    pub fn norm(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialSpec {
    pub d1: f64,
    pub d2: f64,
    /// Fourier support bound.
    pub r0: f64,
    /// Decay exponent of the per-scale sup-norm bound.
    pub eta: f64,
    /// Prefactor of the sup-norm bound.
    pub c_hat: f64,
    pub scales: Vec<ScaleComponent>,
}

#[derive(Serialize, Deserialize)]
struct RawCoeff {
    q: [i64; 2],
    re: f64,
    #[serde(default)]
    im: f64,
}

#[derive(Serialize, Deserialize)]
struct RawScale {
    r: u32,
    #[serde(default)]
    coeffs: Vec<RawCoeff>,
}

#[derive(Serialize, Deserialize)]
struct RawSpec {
    d1: f64,
    d2: f64,
    r0: f64,
    eta: f64,
    #[serde(default = "one")]
    c_hat: f64,
    #[serde(default)]
    scales: Vec<RawScale>,
}

fn one() -> f64 {
    1.0
}

/// Malformed input that cannot be represented as a spec at all.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParseIssue {
    pub scale: u32,
    pub message: String,
}

impl PotentialSpec {
    /// Parses the TOML form. Duplicate `q` entries within a scale and repeated
    /// scale indices are rejected with an itemized error.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawSpec = toml::from_str(text)?;
        let mut issues = Vec::new();
        let mut scales: Vec<ScaleComponent> = Vec::new();
        for s in raw.scales {
            if scales.iter().any(|x| x.r == s.r) {
                issues.push(format!("scale {}: duplicate scale index", s.r));
                continue;
            }
            let mut coeffs = BTreeMap::new();
            for c in s.coeffs {
                let q = DualIndex(c.q[0], c.q[1]);
                if !c.re.is_finite() || !c.im.is_finite() {
                    issues.push(format!(
                        "scale {}: non-finite coefficient at {:?}",
                        s.r, c.q
                    ));
                } else if coeffs.insert(q, C64::new(c.re, c.im)).is_some() {
                    issues.push(format!("scale {}: duplicate index {:?}", s.r, c.q));
                }
            }
            scales.push(ScaleComponent { r: s.r, coeffs });
        }
        if !issues.is_empty() {
            return Err(LabError::Validation(issues.join("; ")));
        }
        scales.sort_by_key(|s| s.r);
        Ok(Self {
            d1: raw.d1,
            d2: raw.d2,
            r0: raw.r0,
            eta: raw.eta,
            c_hat: raw.c_hat,
            scales,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let raw = RawSpec {
            d1: self.d1,
            d2: self.d2,
            r0: self.r0,
            eta: self.eta,
            c_hat: self.c_hat,
            scales: self
                .scales
                .iter()
                .map(|s| RawScale {
                    r: s.r,
                    coeffs: s
                        .coeffs
                        .iter()
                        .map(|(q, c)| RawCoeff {
                            q: [q.0, q.1],
                            re: c.re,
                            im: c.im,
                        })
                        .collect(),
                })
                .collect(),
        };
        Ok(toml::to_string(&raw)?)
    }

    /// The free operator: no scales at all.
    pub fn free(d1: f64, d2: f64) -> Self {
        Self {
            d1,
            d2,
            r0: 1.0,
            eta: 1.0,
            c_hat: 1.0,
            scales: Vec::new(),
        }
    }

    pub fn scale(&self, r: u32) -> Option<&ScaleComponent> {
        self.scales.iter().find(|s| s.r == r)
    }

    pub fn max_scale(&self) -> u32 {
        self.scales.iter().map(|s| s.r).max().unwrap_or(0)
    }

    /// Physical wavevector of index `q` at scale `r`.
    pub fn wavevector(&self, r: u32, q: DualIndex) -> [f64; 2] {
        let f = 2f64.powi(r as i32 - 1);
        [
            2.0 * PI * q.0 as f64 / (f * self.d1),
            2.0 * PI * q.1 as f64 / (f * self.d2),
        ]
    }

    /// Largest wavevector length over all coefficients.
    pub fn max_wavevector(&self) -> f64 {
        self.scales
            .iter()
            .flat_map(|s| s.coeffs.keys().map(move |q| (s.r, *q)))
            .map(|(r, q)| {
                let p = self.wavevector(r, q);
                p[0].hypot(p[1])
            })
            .fold(0.0, f64::max)
    }

    /// Sum of per-scale sup-norm bounds over scales `lo..=hi`.
    pub fn norm_range(&self, lo: u32, hi: u32) -> f64 {
        self.scales
            .iter()
            .filter(|s| s.r >= lo && s.r <= hi)
            .map(|s| s.norm())
            .sum()
    }

    /// Multiplies every coefficient by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for s in &mut out.scales {
            for c in s.coeffs.values_mut() {
                *c *= alpha;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    NonPositivePeriod,
    NonPositiveSupport,
    NonPositiveDecay,
    BadScaleIndex,
    ZeroMean,
    SupportBound,
    NonConjugatePair,
    SupNormBound,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub scale: Option<u32>,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn summary(&self) -> String {
        self.violations
            .iter()
            .map(|v| v.message.clone())
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Checks every invariant of the spec and lists all violations; never repairs.
pub fn validate_spec(spec: &PotentialSpec, strict: bool) -> ValidationReport {
    let mut v = Vec::new();
    let mut push = |scale: Option<u32>, kind: ViolationKind, message: String| {
        v.push(Violation {
            scale,
            kind,
            message,
        })
    };
    if !(spec.d1 > 0.0 && spec.d2 > 0.0) {
        push(
            None,
            ViolationKind::NonPositivePeriod,
            format!("periods must be positive: ({}, {})", spec.d1, spec.d2),
        );
    }
    if !(spec.r0 > 0.0) {
        push(
            None,
            ViolationKind::NonPositiveSupport,
            format!("R0 must be positive: {}", spec.r0),
        );
    }
    if !(spec.eta > 0.0) {
        push(
            None,
            ViolationKind::NonPositiveDecay,
            format!("eta must be positive: {}", spec.eta),
        );
    }
    let tol = 1e-14;
    for s in &spec.scales {
        let r = s.r;
        if r == 0 {
            push(
                Some(r),
                ViolationKind::BadScaleIndex,
                "scale 0: scale indices start at 1".into(),
            );
            continue;
        }
        if let Some(c) = s.coeffs.get(&DualIndex(0, 0)) {
            if c.norm() != 0.0 {
                push(
                    Some(r),
                    ViolationKind::ZeroMean,
                    format!("scale {r}: zero-mean violated (v_0 = {c})"),
                );
            }
        }
        for (q, c) in &s.coeffs {
            if *q == DualIndex(0, 0) {
                continue;
            }
            if spec.d1 > 0.0 && spec.d2 > 0.0 {
                let p = spec.wavevector(r, *q);
                if p[0].hypot(p[1]) >= spec.r0 {
                    push(
                        Some(r),
                        ViolationKind::SupportBound,
                        format!("scale {r}: support bound violated at {:?}", q),
                    );
                }
            }
            if q.0 > 0 || (q.0 == 0 && q.1 > 0) {
                let partner = s.coeffs.get(&-*q).copied().unwrap_or(C64::new(0.0, 0.0));
                if (partner - c.conj()).norm() > tol * (1.0 + c.norm()) {
                    push(
                        Some(r),
                        ViolationKind::NonConjugatePair,
                        format!(
                            "scale {r}: non-conjugate pair at {:?} ({c} vs {partner})",
                            q
                        ),
                    );
                }
            } else if !s.coeffs.contains_key(&-*q) && c.norm() != 0.0 {
                push(
                    Some(r),
                    ViolationKind::NonConjugatePair,
                    format!("scale {r}: missing conjugate of {:?}", q),
                );
            }
        }
        if strict {
            let bound = spec.c_hat * (-(2f64.powf(spec.eta * r as f64))).exp();
            if s.norm() > bound {
                push(
                    Some(r),
                    ViolationKind::SupNormBound,
                    format!("scale {r}: sup-norm {} exceeds {}", s.norm(), bound),
                );
            }
        }
    }
    ValidationReport { violations: v }
}

/// Scale cuts `M_n = round(2^{n-1} s1 log2 k)`, `n = 1..=steps`.
pub fn scale_cuts(k: f64, s1: f64, steps: usize) -> Vec<u32> {
    (1..=steps)
        .map(|n| (2f64.powi(n as i32 - 1) * s1 * k.log2()).round().max(0.0) as u32)
        .collect()
}

/// Periodic potential on a step lattice: `sum_q w_q exp(i <p_q, x>)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepPotential {
    pub n: usize,
    pub m_prev: u32,
    pub m_n: u32,
    pub periods: [f64; 2],
    pub coeffs: BTreeMap<DualIndex, C64>,
    /// Sum of coefficient moduli.
    pub norm: f64,
}

impl StepPotential {
    /// Scales `lo..=hi` of `spec` re-indexed onto the lattice with periods
    /// `2^{cut-1} d`. Scale `r` index `q` lands on `q * 2^{cut-r}`.
    pub fn from_scales(spec: &PotentialSpec, n: usize, lo: u32, hi: u32, cut: u32) -> Self {
        let f = 2f64.powi(cut as i32 - 1);
        let mut coeffs: BTreeMap<DualIndex, C64> = BTreeMap::new();
        for s in spec
            .scales
            .iter()
            .filter(|s| s.r >= lo && s.r <= hi && s.r <= cut)
        {
            let mult = 1i64 << (cut - s.r);
            for (q, c) in &s.coeffs {
                if *q == DualIndex(0, 0) || c.norm() == 0.0 {
                    continue;
                }
                *coeffs.entry(*q * mult).or_insert(C64::new(0.0, 0.0)) += c;
            }
        }
        coeffs.retain(|_, c| c.norm() != 0.0);
        let norm = coeffs.values().map(|c| c.norm()).sum();
        Self {
            n,
            m_prev: lo.saturating_sub(1),
            m_n: hi,
            periods: [f * spec.d1, f * spec.d2],
            coeffs,
            norm,
        }
    }

    pub fn wavevector(&self, q: DualIndex) -> [f64; 2] {
        [
            2.0 * PI * q.0 as f64 / self.periods[0],
            2.0 * PI * q.1 as f64 / self.periods[1],
        ]
    }

    /// Largest `|p_q|` over the support.
    pub fn range(&self) -> f64 {
        self.coeffs
            .keys()
            .map(|q| {
                let p = self.wavevector(*q);
                p[0].hypot(p[1])
            })
            .fold(0.0, f64::max)
    }

    pub fn is_real_symmetric(&self) -> bool {
        self.coeffs
            .iter()
            .all(|(q, c)| c.im == 0.0 && self.coeffs.get(&-*q) == Some(c))
    }

    pub fn get(&self, q: DualIndex) -> C64 {
        self.coeffs.get(&q).copied().unwrap_or(C64::new(0.0, 0.0))
    }

    /// Multiplies every coefficient by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for c in out.coeffs.values_mut() {
            *c *= alpha;
        }
        out.norm *= alpha.abs();
        out
    }
}

/// `W_n`: scales `M_{n-1}+1..=M_n` on the step-`n` lattice.
pub fn build_step_potential(spec: &PotentialSpec, n: usize, cuts: &[u32]) -> Result<StepPotential> {
    if n == 0 || n > cuts.len() {
        return Err(LabError::Config(format!(
            "step {n} outside 1..={}",
            cuts.len()
        )));
    }
    let m_prev = if n == 1 { 0 } else { cuts[n - 2] };
    let m_n = cuts[n - 1];
    if m_n <= m_prev {
        return Err(LabError::DegenerateStep { n, m_prev, m_n });
    }
    let mut w = StepPotential::from_scales(spec, n, m_prev + 1, m_n, m_n);
    w.m_prev = m_prev;
    Ok(w)
}

/// Real-space value `sum_q w_q exp(i <p_q, x>)`.
pub fn evaluate_potential(pot: &StepPotential, x: [f64; 2]) -> f64 {
    let mut acc = C64::new(0.0, 0.0);
    for (q, c) in &pot.coeffs {
        let p = pot.wavevector(*q);
        acc += c * C64::from_polar(1.0, p[0] * x[0] + p[1] * x[1]);
    }
    debug_assert!(acc.im.abs() <= 1e-12 * pot.norm.max(1e-300) + 1e-15);
    acc.re
}

/// Real-space value including the imaginary part, for diagnostics.
pub fn evaluate_potential_complex(pot: &StepPotential, x: [f64; 2]) -> C64 {
    pot.coeffs
        .iter()
        .map(|(q, c)| {
            let p = pot.wavevector(*q);
            c * C64::from_polar(1.0, p[0] * x[0] + p[1] * x[1])
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(amp: f64) -> PotentialSpec {
        let mut coeffs = BTreeMap::new();
        for q in [DualIndex(1, 0), DualIndex(-1, 0)] {
            coeffs.insert(q, C64::new(amp, 0.0));
        }
        PotentialSpec {
            d1: 2.0 * PI,
            d2: 2.0 * PI,
            r0: 1.5,
            eta: 1.0,
            c_hat: 1.0,
            scales: vec![ScaleComponent { r: 1, coeffs }],
        }
    }

    #[test]
    fn real_even_cosine_is_valid() {
        assert!(validate_spec(&cosine(1.0), false).is_valid());
    }

    #[test]
    fn zero_mean_violation_reported() {
        let mut s = cosine(1.0);
        s.scales[0]
            .coeffs
            .insert(DualIndex(0, 0), C64::new(0.3, 0.0));
        let rep = validate_spec(&s, false);
        assert!(rep
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::ZeroMean));
        assert!(rep.summary().contains("zero-mean violated"));
    }

    #[test]
    fn support_bound_violation_reported() {
        let mut s = cosine(1.0);
        s.r0 = 1.0;
        s.scales[0]
            .coeffs
            .insert(DualIndex(2, 0), C64::new(0.1, 0.0));
        s.scales[0]
            .coeffs
            .insert(DualIndex(-2, 0), C64::new(0.1, 0.0));
        let rep = validate_spec(&s, false);
        assert!(rep
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::SupportBound));
    }

    #[test]
    fn non_conjugate_pair_reported() {
        let mut s = cosine(1.0);
        s.scales[0]
            .coeffs
            .insert(DualIndex(-1, 0), C64::new(0.5, 0.0));
        let rep = validate_spec(&s, false);
        assert!(rep
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::NonConjugatePair));
    }

    #[test]
    fn duplicate_index_rejected_at_parse() {
        let text = "d1=6.0\nd2=6.0\nr0=1.5\neta=1.0\n[[scales]]\nr=1\ncoeffs=[{q=[1,0],re=1.0},{q=[1,0],re=2.0}]\n";
        assert!(matches!(
            PotentialSpec::from_toml_str(text),
            Err(LabError::Validation(_))
        ));
    }

    #[test]
    fn strict_sup_norm() {
        let s = cosine(1.0);
        assert!(!validate_spec(&s, true).is_valid());
        assert!(validate_spec(&cosine(0.01), true).is_valid());
    }

    #[test]
    fn cosine_at_origin_is_two() {
        let w = StepPotential::from_scales(&cosine(1.0), 1, 1, 1, 1);
        assert!((evaluate_potential(&w, [0.0, 0.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn single_scale_step_one_equals_table() {
        let s = cosine(1.0);
        let w = build_step_potential(&s, 1, &[1]).unwrap();
        assert_eq!(w.coeffs, s.scales[0].coeffs);
        assert_eq!(w.periods, [2.0 * PI, 2.0 * PI]);
    }

    #[test]
    fn degenerate_step_error() {
        let s = cosine(1.0);
        assert!(matches!(
            build_step_potential(&s, 2, &[1, 1]),
            Err(LabError::DegenerateStep { .. })
        ));
    }

    #[test]
    fn two_scale_reindex() {
        let mut s = cosine(0.1);
        let mut c2 = BTreeMap::new();
        c2.insert(DualIndex(1, 1), C64::new(0.01, 0.02));
        c2.insert(DualIndex(-1, -1), C64::new(0.01, -0.02));
        s.scales.push(ScaleComponent {
            r: 2,
            coeffs: c2.clone(),
        });
        let w2 = build_step_potential(&s, 2, &[1, 2]).unwrap();
        assert_eq!(w2.coeffs, c2);
        // scale 1 appears on the step-2 lattice at N1 q
        let full = StepPotential::from_scales(&s, 2, 1, 2, 2);
        assert_eq!(full.get(DualIndex(2, 0)), C64::new(0.1, 0.0));
        assert_eq!(full.get(DualIndex(1, 1)), C64::new(0.01, 0.02));
    }

    #[test]
    fn toml_round_trip() {
        let s = cosine(0.25);
        let text = s.to_toml_string().unwrap();
        assert_eq!(PotentialSpec::from_toml_str(&text).unwrap(), s);
    }

    #[test]
    fn scale_cut_formula() {
        assert_eq!(scale_cuts(20.0, 0.2, 3), vec![1, 2, 3]);
        assert_eq!(scale_cuts(40.0, 0.2, 3), vec![1, 2, 4]);
    }
}
