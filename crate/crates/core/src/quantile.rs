//! Empirical quantile functions, ECDFs, and tabulated monotone curves.
//!
//! Every estimator in the crate is a composition of three primitives:
//! a sample quantile, an empirical CDF, and a piecewise-linear quantile
//! curve tabulated on a fixed grid of probability levels. The default sample
//! quantile interpolates linearly between order statistics, so the resulting
//! curves are continuous and can be inverted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample quantile convention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileRule {
    /// Linear interpolation between order statistics at `h = (n - 1) tau + 1`.
    #[default]
    Linear,
    /// Left-continuous inverse of the ECDF: the smallest `x` with `F(x) >= tau`.
    InverseEcdf,
}

/// A nonempty set of finite outcomes, stored sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    sorted: Vec<f64>,
}

impl Sample {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyCell);
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite outcome {bad}")));
        }
        values.sort_unstable_by(f64::total_cmp);
        Ok(Sample { sorted: values })
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Sample::new(values.to_vec())
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// Values in nondecreasing order.
    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn min(&self) -> f64 {
        self.sorted[0]
    }

    pub fn max(&self) -> f64 {
        self.sorted[self.sorted.len() - 1]
    }

    /// Linearly interpolated sample quantile. `tau` is clamped to `[0, 1]`.
    pub fn quantile(&self, tau: f64) -> f64 {
        self.quantile_with(tau, QuantileRule::Linear)
    }

    pub fn quantile_with(&self, tau: f64, rule: QuantileRule) -> f64 {
        let n = self.sorted.len();
        let tau = tau.clamp(0.0, 1.0);
        match rule {
            QuantileRule::Linear => {
                let pos = (n - 1) as f64 * tau;
                let lo = pos.floor() as usize;
                if lo + 1 >= n {
                    return self.sorted[n - 1];
                }
                let frac = pos - lo as f64;
                let (a, b) = (self.sorted[lo], self.sorted[lo + 1]);
                a + frac * (b - a)
            }
            QuantileRule::InverseEcdf => {
                let k = (n as f64 * tau).ceil() as usize;
                self.sorted[k.clamp(1, n) - 1]
            }
        }
    }

    /// Fraction of the sample at or below `y`.
    pub fn ecdf(&self, y: f64) -> f64 {
        let count = self.sorted.partition_point(|&x| x <= y);
        count as f64 / self.sorted.len() as f64
    }
}

/// Linearly interpolated sample quantile of `values` at `tau` in (0, 1).
pub fn empirical_quantile(values: &[f64], tau: f64) -> Result<f64> {
    check_probability(tau)?;
    Ok(Sample::from_slice(values)?.quantile(tau))
}

/// Empirical CDF of `values` evaluated at `y`.
pub fn ecdf(values: &[f64], y: f64) -> Result<f64> {
    Ok(Sample::from_slice(values)?.ecdf(y))
}

pub(crate) fn check_probability(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidProbability(tau))
    }
}

/// A finite, strictly increasing set of probability levels inside (0, 1).
///
/// Grids built with [`QuantileGrid::new`] are equispaced on `[lo, hi]`.
/// A lower end of at least `1 / (2m)` keeps the extreme levels away from the
/// sample minimum and maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileGrid {
    lo: f64,
    hi: f64,
    points: Vec<f64>,
}

impl QuantileGrid {
    pub const DEFAULT_M: usize = 99;
    pub const DEFAULT_LO: f64 = 0.05;
    pub const DEFAULT_HI: f64 = 0.95;

    /// `m` equispaced points from `lo` to `hi` inclusive. A one-point grid
    /// requires `lo == hi`.
    pub fn new(m: usize, lo: f64, hi: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidGrid("grid needs at least one point".into()));
        }
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return Err(Error::InvalidGrid(format!(
                "bounds must satisfy 0 < lo <= hi < 1, got lo={lo}, hi={hi}"
            )));
        }
        if m == 1 {
            if lo != hi {
                return Err(Error::InvalidGrid(
                    "a one-point grid needs lo == hi".into(),
                ));
            }
            return Ok(QuantileGrid { lo, hi, points: vec![lo] });
        }
        if lo == hi {
            return Err(Error::InvalidGrid(format!(
                "{m} points cannot share the single level {lo}"
            )));
        }
        let step = (hi - lo) / (m - 1) as f64;
        let mut points: Vec<f64> = (0..m).map(|k| lo + step * k as f64).collect();
        points[m - 1] = hi;
        Ok(QuantileGrid { lo, hi, points })
    }

    /// A grid from explicit levels, which must be strictly increasing in (0, 1).
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidGrid("grid needs at least one point".into()));
        }
        for &p in &points {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidGrid(format!("level {p} outside (0, 1)")));
            }
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid("levels must be strictly increasing".into()));
        }
        Ok(QuantileGrid {
            lo: points[0],
            hi: points[points.len() - 1],
            points,
        })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Whether `tau` lies strictly between the grid ends.
    pub fn strictly_contains(&self, tau: f64) -> bool {
        tau > self.lo && tau < self.hi
    }
}

impl Default for QuantileGrid {
    fn default() -> Self {
        QuantileGrid::new(Self::DEFAULT_M, Self::DEFAULT_LO, Self::DEFAULT_HI)
            .expect("default grid is valid")
    }
}

/// A value produced by clamping, with a flag telling whether clamping happened.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamped {
    pub value: f64,
    pub clamped: bool,
}

/// A nondecreasing, piecewise-linear quantile function tabulated on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCurve {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl QuantileCurve {
    /// Builds a curve from values on `grid`. Values are rearranged (sorted)
    /// so the stored curve is monotone even when the input is noisy.
    pub fn new(grid: &QuantileGrid, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidGrid(format!(
                "{} values for a {}-point grid",
                values.len(),
                grid.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite curve value {bad}")));
        }
        values.sort_unstable_by(f64::total_cmp);
        Ok(QuantileCurve {
            grid: grid.points().to_vec(),
            values,
        })
    }

    /// Tabulates the sample quantile of `sample` on every grid point.
    pub fn from_sample(sample: &Sample, grid: &QuantileGrid) -> Self {
        Self::from_sample_with(sample, grid, QuantileRule::Linear)
    }

    pub fn from_sample_with(sample: &Sample, grid: &QuantileGrid, rule: QuantileRule) -> Self {
        let values = grid
            .points()
            .iter()
            .map(|&t| sample.quantile_with(t, rule))
            .collect();
        QuantileCurve {
            grid: grid.points().to_vec(),
            values,
        }
    }

    /// A constant curve.
    pub fn constant(grid: &QuantileGrid, value: f64) -> Self {
        QuantileCurve {
            grid: grid.points().to_vec(),
            values: vec![value; grid.len()],
        }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lo(&self) -> f64 {
        self.grid[0]
    }

    pub fn hi(&self) -> f64 {
        self.grid[self.grid.len() - 1]
    }

    pub fn min_value(&self) -> f64 {
        self.values[0]
    }

    pub fn max_value(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Piecewise-linear evaluation; levels outside the grid are clamped.
    pub fn eval(&self, tau: f64) -> f64 {
        self.eval_clamped(tau).value
    }

    pub fn eval_clamped(&self, tau: f64) -> Clamped {
        let n = self.grid.len();
        if tau <= self.grid[0] || n == 1 {
            return Clamped {
                value: self.values[0],
                clamped: tau < self.grid[0],
            };
        }
        if tau >= self.grid[n - 1] {
            return Clamped {
                value: self.values[n - 1],
                clamped: tau > self.grid[n - 1],
            };
        }
        // first knot strictly above tau; 1 <= k <= n - 1
        let k = self.grid.partition_point(|&g| g <= tau);
        let (t0, t1) = (self.grid[k - 1], self.grid[k]);
        let (v0, v1) = (self.values[k - 1], self.values[k]);
        Clamped {
            value: v0 + (tau - t0) / (t1 - t0) * (v1 - v0),
            clamped: false,
        }
    }

    /// Generalized inverse: the smallest grid-range level whose value is at
    /// least `y`. Values below the curve map to the lower grid end, values
    /// above it to the upper end.
    pub fn invert(&self, y: f64) -> f64 {
        self.invert_clamped(y).value
    }

    pub fn invert_clamped(&self, y: f64) -> Clamped {
        let n = self.values.len();
        if y <= self.values[0] {
            return Clamped {
                value: self.grid[0],
                clamped: y < self.values[0],
            };
        }
        if y > self.values[n - 1] {
            return Clamped {
                value: self.grid[n - 1],
                clamped: true,
            };
        }
        // first knot with value >= y; values[k - 1] < y <= values[k]
        let k = self.values.partition_point(|&v| v < y);
        let (t0, t1) = (self.grid[k - 1], self.grid[k]);
        let (v0, v1) = (self.values[k - 1], self.values[k]);
        Clamped {
            value: t0 + (y - v0) / (v1 - v0) * (t1 - t0),
            clamped: false,
        }
    }

    /// Applies `f` to every value and rearranges the result.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        values.sort_unstable_by(f64::total_cmp);
        QuantileCurve {
            grid: self.grid.clone(),
            values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(v: &[f64]) -> Sample {
        Sample::from_slice(v).unwrap()
    }

    #[test]
    fn quantile_interpolates_order_statistics() {
        assert_eq!(sample(&[1.0, 2.0, 3.0, 4.0]).quantile(0.5), 2.5);
        assert_eq!(sample(&[4.0, 3.0, 1.0, 2.0]).quantile(0.5), 2.5);
        for tau in [0.01, 0.3, 0.99] {
            assert_eq!(sample(&[7.0]).quantile(tau), 7.0);
        }
    }

    #[test]
    fn inverse_ecdf_rule() {
        let s = sample(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.quantile_with(0.5, QuantileRule::InverseEcdf), 2.0);
        assert_eq!(s.quantile_with(0.51, QuantileRule::InverseEcdf), 3.0);
        assert_eq!(s.quantile_with(0.01, QuantileRule::InverseEcdf), 1.0);
    }

    #[test]
    fn uniform_quantile_is_close_to_population() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<f64> = (0..10_001).map(|_| rng.random::<f64>()).collect();
        let q = empirical_quantile(&draws, 0.25).unwrap();
        assert!((q - 0.25).abs() < 0.02, "{q}");
    }

    #[test]
    fn quantile_errors() {
        assert!(matches!(empirical_quantile(&[], 0.5), Err(Error::EmptyCell)));
        assert!(matches!(
            empirical_quantile(&[1.0, f64::NAN], 0.5),
            Err(Error::InvalidData(_))
        ));
        assert!(matches!(
            empirical_quantile(&[1.0], 1.0),
            Err(Error::InvalidProbability(_))
        ));
        assert!(matches!(ecdf(&[], 0.0), Err(Error::EmptyCell)));
    }

    #[test]
    fn ecdf_counts_points_at_or_below() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(ecdf(&v, 2.5).unwrap(), 0.5);
        assert_eq!(ecdf(&v, 0.0).unwrap(), 0.0);
        assert_eq!(ecdf(&v, 4.0).unwrap(), 1.0);
        assert_eq!(ecdf(&v, 2.0).unwrap(), 0.5);
    }

    #[test]
    fn curve_from_sample_tabulates() {
        let grid = QuantileGrid::from_points(vec![0.25, 0.5, 0.75]).unwrap();
        let c = QuantileCurve::from_sample(&sample(&[0.0, 1.0]), &grid);
        assert_eq!(c.values(), &[0.25, 0.5, 0.75]);
        let c = QuantileCurve::from_sample(&sample(&[5.0, 5.0, 5.0]), &QuantileGrid::default());
        assert!(c.values().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn uniform_curve_tracks_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let grid = QuantileGrid::new(99, 0.01, 0.99).unwrap();
        let c = QuantileCurve::from_sample(&Sample::new(draws).unwrap(), &grid);
        let dev = grid
            .points()
            .iter()
            .zip(c.values())
            .map(|(t, v)| (t - v).abs())
            .fold(0.0, f64::max);
        assert!(dev < 0.02, "{dev}");
    }

    #[test]
    fn eval_interpolates_and_clamps() {
        let grid = QuantileGrid::from_points(vec![0.25, 0.75]).unwrap();
        let c = QuantileCurve::new(&grid, vec![1.0, 3.0]).unwrap();
        assert_eq!(c.eval(0.5), 2.0);
        assert_eq!(c.eval(0.25), 1.0);
        assert_eq!(c.eval(0.75), 3.0);

        let grid = QuantileGrid::new(19, 0.05, 0.95).unwrap();
        let c = QuantileCurve::new(&grid, grid.points().to_vec()).unwrap();
        let r = c.eval_clamped(0.01);
        assert_eq!(r.value, 0.05);
        assert!(r.clamped);
        assert!(!c.eval_clamped(0.05).clamped);
    }

    #[test]
    fn invert_linear_segment_and_boundaries() {
        let grid = QuantileGrid::from_points(vec![0.25, 0.75]).unwrap();
        let c = QuantileCurve::new(&grid, vec![1.0, 3.0]).unwrap();
        assert_eq!(c.invert(2.0), 0.5);
        let below = c.invert_clamped(0.0);
        assert_eq!(below.value, 0.25);
        assert!(below.clamped);
        let above = c.invert_clamped(10.0);
        assert_eq!(above.value, 0.75);
        assert!(above.clamped);
    }

    #[test]
    fn invert_takes_leftmost_level_on_flat_segments() {
        let grid = QuantileGrid::from_points(vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let c = QuantileCurve::new(&grid, vec![0.0, 1.0, 1.0, 2.0]).unwrap();
        assert_eq!(c.invert(1.0), 0.4);
        assert!((c.invert(1.5) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn curve_new_rearranges() {
        let grid = QuantileGrid::from_points(vec![0.2, 0.5, 0.8]).unwrap();
        let c = QuantileCurve::new(&grid, vec![3.0, 1.0, 2.0]).unwrap();
        assert_eq!(c.values(), &[1.0, 2.0, 3.0]);
        assert!(QuantileCurve::new(&grid, vec![1.0]).is_err());
    }

    #[test]
    fn grid_construction() {
        let g = QuantileGrid::default();
        assert_eq!(g.len(), 99);
        assert_eq!(g.lo(), 0.05);
        assert_eq!(g.hi(), 0.95);
        assert!((g.points()[49] - 0.5).abs() < 1e-12);
        assert!(QuantileGrid::new(3, 0.0, 0.5).is_err());
        assert!(QuantileGrid::new(3, 0.5, 0.4).is_err());
        assert!(QuantileGrid::new(1, 0.5, 0.5).is_ok());
        assert!(QuantileGrid::from_points(vec![0.5, 0.5]).is_err());
    }

    /// Hand-enumerated interpolation for small samples, independent of the
    /// sorted-buffer indexing used by `Sample::quantile`.
    fn brute_force_quantile(values: &[f64], tau: f64) -> f64 {
        let n = values.len();
        let h = (n as f64 - 1.0) * tau + 1.0;
        // rank r (1-based) holds the r-th smallest; find it by counting
        let order_stat = |r: usize| -> f64 {
            for &v in values {
                let below = values.iter().filter(|&&w| w < v).count();
                let equal = values.iter().filter(|&&w| w == v).count();
                if below < r && r <= below + equal {
                    return v;
                }
            }
            unreachable!()
        };
        let fl = h.floor() as usize;
        if fl >= n {
            return order_stat(n);
        }
        order_stat(fl) + (h - fl as f64) * (order_stat(fl + 1) - order_stat(fl))
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn values() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-1e3f64..1e3, 1..60)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]

            #[test]
            fn quantile_is_monotone(v in values(), a in 0.001f64..0.999, b in 0.001f64..0.999) {
                let s = Sample::new(v).unwrap();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(s.quantile(lo) <= s.quantile(hi));
            }

            #[test]
            fn small_samples_match_enumeration(
                v in prop::collection::vec(-50i32..50, 1..=8),
                tau in 0.001f64..0.999,
            ) {
                let v: Vec<f64> = v.into_iter().map(f64::from).collect();
                let s = Sample::from_slice(&v).unwrap();
                let want = brute_force_quantile(&v, tau);
                prop_assert!((s.quantile(tau) - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }

            #[test]
            fn ecdf_quantile_compatibility(v in prop::collection::vec(-1e3f64..1e3, 2..60), pick in 0usize..60) {
                let s = Sample::new(v.clone()).unwrap();
                let y = v[pick % v.len()];
                let range = s.max() - s.min();
                let tau = s.ecdf(y).min(0.999_999);
                let q = s.quantile(tau);
                prop_assert!(q >= y - range / (s.len() as f64 - 1.0) - 1e-9);
            }

            #[test]
            fn round_trip_on_increasing_curves(
                steps in prop::collection::vec(0.01f64..5.0, 2..40),
                start in -10f64..10.0,
                frac in 0.0f64..1.0,
            ) {
                let grid = QuantileGrid::new(steps.len(), 0.05, 0.95).unwrap();
                let mut acc = start;
                let values: Vec<f64> = steps.iter().map(|s| { acc += s; acc }).collect();
                let c = QuantileCurve::new(&grid, values).unwrap();
                let tau = grid.lo() + frac * (grid.hi() - grid.lo());
                prop_assert!((c.invert(c.eval(tau)) - tau).abs() < 1e-12);
            }

            #[test]
            fn eval_is_monotone(v in values(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
                let c = QuantileCurve::from_sample(&Sample::new(v).unwrap(), &QuantileGrid::default());
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(c.eval(lo) <= c.eval(hi));
            }
        }
    }
}
