//! N-functions, Luxemburg norms and a dominating N-function for a uniformly
//! integrable family.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SgError};
use crate::sum::{ksum, KahanSum};

/// Growth of the density `a` beyond the last table point `(t_max, a_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tail {
    /// `a(t) = a_max (t/t_max)^{p−1}`, `p > 1`.
    Power { p: f64 },
    /// `a(t) = a_max e^{rate (t − t_max)}`.
    Exponential { rate: f64 },
    /// `a(t) = a_max + ln(t/t_max)/rate`.
    Logarithmic { rate: f64 },
}

impl Tail {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Tail::Power { p } => p > 1.0 && p.is_finite(),
            Tail::Exponential { rate } | Tail::Logarithmic { rate } => {
                rate > 0.0 && rate.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SgError::InvalidArgument(format!(
                "invalid tail model {self:?}"
            )))
        }
    }

    /// Tail of the conjugate function.
    fn conjugate(&self) -> Tail {
        match *self {
            Tail::Power { p } => Tail::Power { p: p / (p - 1.0) },
            Tail::Exponential { rate } => Tail::Logarithmic { rate },
            Tail::Logarithmic { rate } => Tail::Exponential { rate },
        }
    }
}

/// `A(t) = ∫_0^t a` for a nondecreasing piecewise-linear density `a` with `a(0) = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NFunction {
    knots: Vec<f64>,
    density: Vec<f64>,
    cumulative: Vec<f64>,
    pub tail: Tail,
}

impl NFunction {
    /// Table `(knots[k], density[k])`, starting at `(0, 0)`.
    pub fn from_table(knots: Vec<f64>, density: Vec<f64>, tail: Tail) -> Result<Self> {
        tail.validate()?;
        if knots.len() < 2 || knots.len() != density.len() {
            return Err(SgError::InvalidArgument(
                "density table needs at least two matching points".into(),
            ));
        }
        if knots[0] != 0.0 || density[0] != 0.0 {
            return Err(SgError::InvalidArgument(
                "density table must start at (0, 0)".into(),
            ));
        }
        for k in 1..knots.len() {
            if !(knots[k] >= knots[k - 1])
                || !(density[k] >= density[k - 1])
                || !density[k].is_finite()
            {
                return Err(SgError::InvalidArgument(format!(
                    "density table is not nondecreasing at entry {k}"
                )));
            }
            if !(density[k] > 0.0) {
                return Err(SgError::InvalidArgument(format!(
                    "density must be positive away from 0 (entry {k})"
                )));
            }
        }
        if !(knots[knots.len() - 1] > 0.0) {
            return Err(SgError::InvalidArgument("table must extend past 0".into()));
        }
        let mut cumulative = Vec::with_capacity(knots.len());
        let mut acc = KahanSum::new();
        cumulative.push(0.0);
        for k in 1..knots.len() {
            acc.add(0.5 * (density[k] + density[k - 1]) * (knots[k] - knots[k - 1]));
            cumulative.push(acc.value());
        }
        Ok(NFunction {
            knots,
            density,
            cumulative,
            tail,
        })
    }

    /// Tabulates `a` on geometric knots from `t_max·1e-9` to `t_max` with the given ratio.
    pub fn from_density_fn(
        a: impl Fn(f64) -> f64,
        t_max: f64,
        ratio: f64,
        tail: Tail,
    ) -> Result<Self> {
        let (knots, density): (Vec<f64>, Vec<f64>) = geometric_knots(t_max * 1e-9, t_max, ratio)
            .into_iter()
            .map(|t| (t, a(t)))
            .unzip();
        let mut k = vec![0.0];
        k.extend(knots);
        let mut d = vec![0.0];
        d.extend(density);
        Self::from_table(k, d, tail)
    }

    /// `A(t) = c·t^p`.
    pub fn power(p: f64, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(SgError::InvalidArgument(
                "power coefficient must be positive".into(),
            ));
        }
        Self::from_density_fn(|t| c * p * t.powf(p - 1.0), 1e3, 1.002, Tail::Power { p })
    }

    /// `A(t) = e^t − t − 1`.
    pub fn exponential() -> Result<Self> {
        Self::from_density_fn(|t| t.exp_m1(), 30.0, 1.002, Tail::Exponential { rate: 1.0 })
    }

    pub fn t_max(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    fn last(&self) -> (f64, f64, f64) {
        let k = self.knots.len() - 1;
        (self.knots[k], self.density[k], self.cumulative[k])
    }

    /// Density `a(t)`.
    pub fn a(&self, t: f64) -> Result<f64> {
        check_arg(t)?;
        let (tm, am, _) = self.last();
        if t >= tm {
            return Ok(match self.tail {
                Tail::Power { p } => am * (t / tm).powf(p - 1.0),
                Tail::Exponential { rate } => am * (rate * (t - tm)).exp(),
                Tail::Logarithmic { rate } => am + (t / tm).ln() / rate,
            });
        }
        let k = self.segment(t);
        let (t0, t1) = (self.knots[k], self.knots[k + 1]);
        if t1 == t0 {
            return Ok(self.density[k + 1]);
        }
        let lam = (t - t0) / (t1 - t0);
        Ok(self.density[k] + lam * (self.density[k + 1] - self.density[k]))
    }

    /// `A(t)`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        check_arg(t)?;
        let (tm, am, cm) = self.last();
        if t >= tm {
            return Ok(cm
                + match self.tail {
                    Tail::Power { p } => am * tm / p * ((t / tm).powf(p) - 1.0),
                    Tail::Exponential { rate } => am * (rate * (t - tm)).exp_m1() / rate,
                    Tail::Logarithmic { rate } => {
                        am * (t - tm) + (t * (t / tm).ln() - (t - tm)) / rate
                    }
                });
        }
        let k = self.segment(t);
        let a_t = self.a(t)?;
        Ok(self.cumulative[k] + 0.5 * (self.density[k] + a_t) * (t - self.knots[k]))
    }

    /// Index `k` of the segment `[knots[k], knots[k+1])` holding `t < t_max`.
    fn segment(&self, t: f64) -> usize {
        let k = self.knots.partition_point(|&x| x <= t);
        k.saturating_sub(1).min(self.knots.len() - 2)
    }

    /// `A*(s) = max_t (st − A(t))`, whose density is the inverse of `a`.
    pub fn conjugate(&self) -> NFunction {
        let cumulative = self
            .knots
            .iter()
            .zip(&self.density)
            .zip(&self.cumulative)
            .map(|((t, a), c)| t * a - c)
            .collect();
        NFunction {
            knots: self.density.clone(),
            density: self.knots.clone(),
            cumulative,
            tail: self.tail.conjugate(),
        }
    }

    /// Writes the table as CSV `t,a,A`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "a", "A"])?;
        for ((t, a), c) in self.knots.iter().zip(&self.density).zip(&self.cumulative) {
            w.write_record(&[t.to_string(), a.to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn table_len(&self) -> usize {
        self.knots.len()
    }
}

fn check_arg(t: f64) -> Result<()> {
    if t >= 0.0 {
        Ok(())
    } else {
        Err(SgError::InvalidArgument(format!(
            "N-functions are defined for t >= 0, got {t}"
        )))
    }
}

fn geometric_knots(lo: f64, hi: f64, ratio: f64) -> Vec<f64> {
    let count = ((hi / lo).ln() / ratio.ln()).ceil() as usize;
    let step = (hi / lo).ln() / count as f64;
    (0..=count)
        .map(|k| {
            if k == count {
                hi
            } else {
                lo * (step * k as f64).exp()
            }
        })
        .collect()
}

/// `∫ A(|f|/k)` with per-sample weights.
pub fn modular(f: &[f64], weights: &[f64], a: &NFunction, k: f64) -> Result<f64> {
    let mut acc = KahanSum::new();
    for (v, w) in f.iter().zip(weights) {
        acc.add(w * a.eval(v.abs() / k)?);
    }
    Ok(acc.value())
}

/// Luxemburg norm `inf{k > 0 : ∫ A(|f|/k) ≤ 1}`.
pub fn luxemburg_norm(f: &[f64], weights: &[f64], a: &NFunction) -> Result<f64> {
    if f.len() != weights.len() {
        return Err(SgError::MismatchedGrids(format!(
            "{} samples for {} weights",
            f.len(),
            weights.len()
        )));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(SgError::InvalidArgument("samples must be finite".into()));
    }
    if f.iter().zip(weights).all(|(v, w)| *v == 0.0 || *w == 0.0) {
        return Ok(0.0);
    }
    let l1 = ksum(f.iter().zip(weights).map(|(v, w)| v.abs() * w));
    let g = |k: f64| modular(f, weights, a, k).map(|m| m - 1.0);
    let mut lo = l1.max(f64::MIN_POSITIVE);
    let mut hi = lo;
    let mut expansions = 0;
    while g(lo)? < 0.0 {
        lo *= 0.5;
        expansions += 1;
        if expansions > 200 {
            return Err(SgError::BracketFailure { expansions });
        }
    }
    while g(hi)? > 0.0 {
        hi *= 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(SgError::BracketFailure { expansions });
        }
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let v = g(mid)?;
        if v.abs() <= 1e-6 || hi / lo - 1.0 <= 1e-15 {
            return Ok(mid);
        }
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo * hi).sqrt())
}

/// `sup_{t ≥ t0} A(2t)/A(t)` over table points and a sampled stretch of the
/// tail, and whether the tail model keeps the ratio bounded.
pub fn delta_regular_check(a: &NFunction, t0: f64) -> Result<(bool, f64)> {
    if !(t0 > 0.0) {
        return Err(SgError::InvalidArgument("t0 must be positive".into()));
    }
    let bounded = !matches!(a.tail, Tail::Exponential { .. });
    if !bounded {
        return Ok((false, f64::INFINITY));
    }
    let tm = a.t_max();
    let mut sup: f64 = 0.0;
    let probes = a
        .knots
        .iter()
        .copied()
        .filter(|&t| t >= t0 && t > 0.0)
        .chain(geometric_knots(tm.max(t0), tm.max(t0) * 1e6, 1.1));
    for t in probes {
        let at = a.eval(t)?;
        if at > 0.0 {
            sup = sup.max(a.eval(2.0 * t)? / at);
        }
    }
    if let Tail::Power { p } = a.tail {
        sup = sup.max(2f64.powf(p));
    }
    Ok((true, sup))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DominationStatus {
    Built,
    TailsDoNotDecay,
}

/// Outcome of [`build_dominating_n`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Domination {
    pub status: DominationStatus,
    pub function: Option<NFunction>,
    /// `sup_k ∫ A(|f^k|)`.
    pub bound: Option<f64>,
    pub delta_constant: Option<f64>,
    /// Mean level `λ_0 = sup_k ∫|f^k| / |Ω|`.
    pub base_level: f64,
    /// `(λ, T(λ))` with `T(λ) = sup_k ∫_{|f^k| > λ} |f^k|`.
    pub tails: Vec<(f64, f64)>,
}

/// Levels above `16 λ_0` at which half the mass still sits are taken as
/// evidence that the family is not uniformly integrable.
pub const TAIL_LEVEL_FACTOR: f64 = 16.0;
pub const TAIL_MASS_FRACTION: f64 = 0.5;

/// A Δ-regular N-function in which every member of `family` is bounded,
/// grown from the uniform tail integrals as `a(λ) = 1 + ln(1 + T(λ_0)/T(λ))`.
pub fn build_dominating_n(family: &[Vec<f64>], weights: &[f64]) -> Result<Domination> {
    if family.is_empty() {
        return Err(SgError::InvalidArgument("family must not be empty".into()));
    }
    for f in family {
        if f.len() != weights.len() {
            return Err(SgError::MismatchedGrids(
                "family member and weights differ in length".into(),
            ));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(SgError::InvalidArgument(
                "family samples must be finite".into(),
            ));
        }
    }
    let area = ksum(weights.iter().copied());
    let l1_max = family
        .iter()
        .map(|f| ksum(f.iter().zip(weights).map(|(v, w)| v.abs() * w)))
        .fold(0.0, f64::max);
    let top = family
        .iter()
        .flat_map(|f| f.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    if !(l1_max > 0.0) {
        let a = NFunction::power(2.0, 1.0)?;
        let (_, c) = delta_regular_check(&a, 1.0)?;
        return Ok(Domination {
            status: DominationStatus::Built,
            function: Some(a),
            bound: Some(0.0),
            delta_constant: Some(c),
            base_level: 0.0,
            tails: Vec::new(),
        });
    }
    let base = l1_max / area;
    let tail = |lam: f64| {
        family
            .iter()
            .map(|f| {
                ksum(
                    f.iter()
                        .zip(weights)
                        .filter(|(v, _)| v.abs() > lam)
                        .map(|(v, w)| v.abs() * w),
                )
            })
            .fold(0.0, f64::max)
    };
    let mut tails = Vec::new();
    let mut lam = base;
    loop {
        let t = tail(lam);
        tails.push((lam, t));
        if t == 0.0 || lam > top {
            break;
        }
        lam *= 2f64.powf(0.25);
    }
    let t0 = tails[0].1;
    let stuck = tails
        .iter()
        .any(|&(l, t)| l >= TAIL_LEVEL_FACTOR * base && t >= TAIL_MASS_FRACTION * t0);
    if stuck {
        return Ok(Domination {
            status: DominationStatus::TailsDoNotDecay,
            function: None,
            bound: None,
            delta_constant: None,
            base_level: base,
            tails,
        });
    }
    let mut knots = vec![0.0];
    let mut dens = vec![0.0];
    for &(l, t) in tails.iter().filter(|(_, t)| *t > 0.0) {
        let v = 1.0 + (1.0 + t0 / t).ln();
        knots.push(l);
        dens.push(v.max(*dens.last().unwrap()));
    }
    if knots.len() < 2 {
        knots.push(base);
        dens.push(1.0 + 2f64.ln());
    }
    let a = NFunction::from_table(knots, dens, Tail::Logarithmic { rate: 1.0 })?;
    let bound = family
        .iter()
        .map(|f| modular(f, weights, &a, 1.0))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let (_, c) = delta_regular_check(&a, base)?;
    Ok(Domination {
        status: DominationStatus::Built,
        function: Some(a),
        bound: Some(bound),
        delta_constant: Some(c),
        base_level: base,
        tails,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_values() {
        let a = NFunction::power(2.0, 0.5).unwrap();
        for &t in &[0.0, 0.3, 1.0, 7.5, 2e3] {
            let v = a.eval(t).unwrap();
            assert!(
                (v - 0.5 * t * t).abs() <= 1e-6 * (0.5 * t * t).max(1e-12),
                "{t}: {v}"
            );
        }
        assert!(a.eval(-1.0).is_err());
    }

    #[test]
    fn quadratic_is_self_conjugate() {
        let a = NFunction::power(2.0, 0.5).unwrap();
        let c = a.conjugate();
        for &s in &[0.1, 1.0, 4.0, 50.0, 5e3] {
            assert!((c.eval(s).unwrap() - 0.5 * s * s).abs() <= 1e-6 * s * s);
        }
    }

    #[test]
    fn cubic_conjugate_by_brute_force() {
        let a = NFunction::power(3.0, 1.0 / 3.0).unwrap();
        let c = a.conjugate();
        for &s in &[0.25, 1.0, 2.0, 9.0] {
            let brute = (0..200_000)
                .map(|k| {
                    let t = k as f64 * 1e-4;
                    s * t - t * t * t / 3.0
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let exact = s.powf(1.5) / 1.5;
            assert!((brute - exact).abs() < 1e-6 * exact.max(1.0));
            assert!((c.eval(s).unwrap() - exact).abs() < 1e-5 * exact, "{s}");
        }
        assert_eq!(c.tail, Tail::Power { p: 1.5 });
    }

    #[test]
    fn double_conjugate_is_identity() {
        for a in [
            NFunction::power(1.5, 1.0).unwrap(),
            NFunction::exponential().unwrap(),
        ] {
            let b = a.conjugate().conjugate();
            assert_eq!(a.tail, b.tail);
            for &t in &[0.01, 0.5, 3.0, 20.0] {
                let (x, y) = (a.eval(t).unwrap(), b.eval(t).unwrap());
                assert!((x - y).abs() <= 1e-12 * x.max(1.0));
            }
        }
    }

    #[test]
    fn tails_extend_smoothly() {
        for a in [
            NFunction::power(3.0, 1.0).unwrap(),
            NFunction::exponential().unwrap(),
            NFunction::exponential().unwrap().conjugate(),
        ] {
            let tm = a.t_max();
            let below = a.eval(tm * (1.0 - 1e-9)).unwrap();
            let above = a.eval(tm * (1.0 + 1e-9)).unwrap();
            assert!((above - below).abs() <= 1e-6 * below.max(1.0));
            assert!(a.a(2.0 * tm).unwrap() > a.a(tm).unwrap());
        }
    }

    #[test]
    fn delta_regularity() {
        let (ok, c) = delta_regular_check(&NFunction::power(3.0, 1.0).unwrap(), 0.5).unwrap();
        assert!(ok);
        assert!((c - 8.0).abs() < 1e-3, "{c}");
        let (ok, _) = delta_regular_check(&NFunction::exponential().unwrap(), 0.5).unwrap();
        assert!(!ok);
        let (ok, c) = delta_regular_check(&NFunction::power(2.5, 1.0).unwrap(), 1e5).unwrap();
        assert!(ok);
        assert!((c - 2f64.powf(2.5)).abs() < 1e-3);
    }

    #[test]
    fn exponential_ratio_grows_on_the_table() {
        let a = NFunction::exponential().unwrap();
        let r = |t: f64| a.eval(2.0 * t).unwrap() / a.eval(t).unwrap();
        assert!(r(10.0) > r(5.0) && r(5.0) > r(2.0));
        assert!(r(10.0) > 1e4);
    }

    #[test]
    fn zero_has_zero_norm() {
        let a = NFunction::power(2.0, 1.0).unwrap();
        assert_eq!(luxemburg_norm(&[0.0; 4], &[0.25; 4], &a).unwrap(), 0.0);
    }

    #[test]
    fn constant_on_unit_area() {
        let a = NFunction::exponential().unwrap();
        let c = 3.0;
        let k = luxemburg_norm(&[c; 8], &[0.125; 8], &a).unwrap();
        // scalar oracle: e^u − u − 1 = 1 at u = c/k
        let (mut lo, mut hi) = (0.0f64, 5.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid.exp() - mid - 2.0 > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((k - c / lo).abs() < 1e-5 * k);
    }
}
