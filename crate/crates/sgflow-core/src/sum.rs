//! Compensated accumulation.
//!
//! Every mass and integral reduction in the crate goes through [`KahanSum`]
//! (Neumaier's variant), so totals do not depend on how terms are grouped
//! beyond the last couple of ulps.

use crate::vec2::Vec2;

#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    /// Merge another partial sum (used to combine per-chunk reductions).
    #[inline]
    pub fn merge(&mut self, other: &KahanSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = KahanSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Compensated sum of a sequence.
pub fn ksum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<KahanSum>().value()
}

/// Compensated accumulator for plane vectors.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum2 {
    pub x: KahanSum,
    pub y: KahanSum,
}

impl KahanSum2 {
    #[inline]
    pub fn add(&mut self, v: Vec2) {
        self.x.add(v.x);
        self.y.add(v.y);
    }

    #[inline]
    pub fn merge(&mut self, other: &KahanSum2) {
        self.x.merge(&other.x);
        self.y.merge(&other.y);
    }

    #[inline]
    pub fn value(&self) -> Vec2 {
        Vec2::new(self.x.value(), self.y.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cancelled_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(ksum(v), 2.0);
        assert_eq!(v.iter().sum::<f64>(), 0.0 + 1.0);
    }

    #[test]
    fn order_independent_on_small_sets() {
        let a = [0.1, 0.2, 0.3, 1e-17, 5.5, -0.7];
        let mut b = a;
        b.reverse();
        assert_eq!(ksum(a), ksum(b));
    }
}
