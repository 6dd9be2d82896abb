//! Quantile functions on probability grids.
//!
//! A quantile function is stored as its values on a strictly increasing grid of
//! probabilities inside `(0, 1)`. Raw samples are summarised by linear
//! interpolation of order statistics, and all integrals over `p` use one shared
//! quadrature rule (see [`ProbabilityGrid::weights`]).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{DorqfError, Result};

/// Violations of monotonicity larger than this are rejected.
pub const MONOTONE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl ProbabilityGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(DorqfError::InvalidGrid("grid is empty".into()));
        }
        for (i, &p) in points.iter().enumerate() {
            if !p.is_finite() || p <= 0.0 || p >= 1.0 {
                return Err(DorqfError::InvalidGrid(format!(
                    "point {i} = {p} is not inside (0, 1)"
                )));
            }
        }
        if let Some(i) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(DorqfError::InvalidGrid(format!(
                "points must be strictly increasing (index {})",
                i + 1
            )));
        }
        let weights = quadrature_weights(&points);
        Ok(Self { points, weights })
    }

    /// `m` equispaced points on `[lo, hi]`.
    pub fn equispaced(m: usize, lo: f64, hi: f64) -> Result<Self> {
        match m {
            0 => Err(DorqfError::InvalidGrid("grid is empty".into())),
            1 => Self::new(vec![lo]),
            _ => {
                let step = (hi - lo) / (m - 1) as f64;
                Self::new((0..m).map(|i| lo + step * i as f64).collect())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Quadrature weights for integrals over `[0, 1]`.
    ///
    /// Trapezoid rule between grid points; the end values are held constant on
    /// `[0, p_1]` and `[p_m, 1]`, so the weights sum to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `∫₀¹ f(p) dp` for `f` given by its grid values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.points.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// `∫₀¹ (a(p) - b(p))² dp`.
    pub fn integrate_sq_diff(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        self.weights
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * (x - y) * (x - y))
            .sum()
    }
}

impl Default for ProbabilityGrid {
    /// 100 equispaced points on `[0.005, 0.995]`.
    fn default() -> Self {
        Self::equispaced(100, 0.005, 0.995).expect("default grid is valid")
    }
}

impl TryFrom<Vec<f64>> for ProbabilityGrid {
    type Error = DorqfError;

    fn try_from(points: Vec<f64>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<ProbabilityGrid> for Vec<f64> {
    fn from(grid: ProbabilityGrid) -> Self {
        grid.points
    }
}

fn quadrature_weights(points: &[f64]) -> Vec<f64> {
    let m = points.len();
    let mut w = vec![0.0; m];
    if m == 1 {
        w[0] = 1.0;
        return w;
    }
    for l in 0..m - 1 {
        let half = 0.5 * (points[l + 1] - points[l]);
        w[l] += half;
        w[l + 1] += half;
    }
    w[0] += points[0];
    w[m - 1] += 1.0 - points[m - 1];
    w
}

/// Unordered raw measurements for one subject and one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    observations: Vec<f64>,
}

impl RawSample {
    pub fn new(observations: Vec<f64>) -> Result<Self> {
        if observations.len() < 2 {
            return Err(DorqfError::InsufficientSample(observations.len()));
        }
        if let Some(i) = observations.iter().position(|v| !v.is_finite()) {
            return Err(DorqfError::NonFinite(i));
        }
        Ok(Self { observations })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileFunction {
    grid: Arc<ProbabilityGrid>,
    values: Vec<f64>,
}

impl QuantileFunction {
    pub fn new(grid: Arc<ProbabilityGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(DorqfError::Dimension(format!(
                "{} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DorqfError::NonFinite(i));
        }
        check_monotone(&values)?;
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Arc<ProbabilityGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_grid(&self, other: &QuantileFunction) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || self.grid == other.grid
    }
}

/// Errors with the first index where `values` drops by more than [`MONOTONE_TOL`].
pub fn check_monotone(values: &[f64]) -> Result<()> {
    for (i, w) in values.windows(2).enumerate() {
        let drop = w[0] - w[1];
        if drop > MONOTONE_TOL {
            return Err(DorqfError::NotMonotone { index: i + 1, drop });
        }
    }
    Ok(())
}

/// Empirical quantile function by linear interpolation of order statistics.
///
/// With `h = (L+1)p`, `k = ⌊h⌋`, `w = h - k`, returns
/// `(1-w)·X(k) + w·X(k+1)`; below `1/(L+1)` the sample minimum and above
/// `L/(L+1)` the sample maximum.
pub fn empirical_quantile(sample: &RawSample, grid: &Arc<ProbabilityGrid>) -> QuantileFunction {
    let mut sorted = sample.observations.clone();
    sorted.sort_by(f64::total_cmp);
    let values = quantiles_of_sorted(&sorted, grid.points());
    QuantileFunction {
        grid: Arc::clone(grid),
        values,
    }
}

/// The interpolation rule of [`empirical_quantile`] applied to an already sorted slice.
pub fn quantiles_of_sorted(sorted: &[f64], probs: &[f64]) -> Vec<f64> {
    let len = sorted.len();
    let scale = (len + 1) as f64;
    probs
        .iter()
        .map(|&p| {
            let mut h = scale * p;
            let nearest = h.round();
            if (h - nearest).abs() < 1e-9 {
                h = nearest;
            }
            let k = h.floor();
            if k < 1.0 {
                return sorted[0];
            }
            if k >= len as f64 {
                return sorted[len - 1];
            }
            let w = h - k;
            let k = k as usize;
            let lower = sorted[k - 1];
            if w == 0.0 {
                lower
            } else {
                // `lower + w·(upper - lower)` keeps the output monotone in p.
                lower + w * (sorted[k] - lower)
            }
        })
        .collect()
}

/// 2-Wasserstein distance between two distributions given by their quantile functions.
pub fn wasserstein_distance(a: &QuantileFunction, b: &QuantileFunction) -> Result<f64> {
    if !a.same_grid(b) {
        return Err(DorqfError::GridMismatch);
    }
    Ok(a.grid.integrate_sq_diff(&a.values, &b.values).max(0.0).sqrt())
}

/// Affine map `v ↦ (v - lo) / (hi - lo)` onto the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineScale {
    pub lo: f64,
    pub hi: f64,
}

impl AffineScale {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(DorqfError::InvalidRange { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub const fn identity() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    /// Range spanned by all values.
    pub fn spanning<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let (lo, hi) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Self::new(lo, hi)
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }

    pub fn inverse(&self, u: f64) -> f64 {
        self.lo + u * (self.hi - self.lo)
    }

    /// Forward map; errors when `v` lies outside `[lo, hi]`.
    pub fn forward_checked(&self, v: f64) -> Result<f64> {
        let slack = 1e-12 * (self.hi - self.lo).max(1.0);
        if v < self.lo - slack || v > self.hi + slack {
            return Err(DorqfError::OutOfRange {
                value: v,
                lo: self.lo,
                hi: self.hi,
            });
        }
        Ok(self.forward(v).clamp(0.0, 1.0))
    }

    /// Forward map clamped into `[0, 1]`.
    pub fn forward_clamped(&self, v: f64) -> f64 {
        self.forward(v).clamp(0.0, 1.0)
    }
}

/// Maps a quantile function into `[0, 1]` with `(v - lo) / (hi - lo)`.
pub fn rescale_to_unit(q: &QuantileFunction, lo: f64, hi: f64) -> Result<QuantileFunction> {
    let scale = AffineScale::new(lo, hi)?;
    let values = q
        .values
        .iter()
        .map(|&v| scale.forward_checked(v))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantileFunction {
        grid: Arc::clone(&q.grid),
        values,
    })
}

/// Inverse of [`rescale_to_unit`].
pub fn rescale_from_unit(q: &QuantileFunction, lo: f64, hi: f64) -> Result<QuantileFunction> {
    let scale = AffineScale::new(lo, hi)?;
    Ok(QuantileFunction {
        grid: Arc::clone(&q.grid),
        values: q.values.iter().map(|&u| scale.inverse(u)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid_of(points: &[f64]) -> Arc<ProbabilityGrid> {
        Arc::new(ProbabilityGrid::new(points.to_vec()).unwrap())
    }

    /// Order-statistic interpolation written out directly from the definition,
    /// independent of the clamping/snap logic above.
    fn reference_quantile(sample: &[f64], p: f64) -> f64 {
        let mut s = sample.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let pos = (n as f64 + 1.0) * p;
        if pos <= 1.0 {
            return s[0];
        }
        if pos >= n as f64 {
            return s[n - 1];
        }
        let j = pos.trunc() as usize;
        let frac = pos - j as f64;
        s[j - 1] * (1.0 - frac) + s[j] * frac
    }

    #[test]
    fn default_grid_layout() {
        let g = ProbabilityGrid::default();
        assert_eq!(g.len(), 100);
        assert_abs_diff_eq!(g.points()[0], 0.005, epsilon = 1e-15);
        assert_abs_diff_eq!(g.points()[99], 0.995, epsilon = 1e-12);
        assert_abs_diff_eq!(g.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn grid_rejects_bad_points() {
        assert!(ProbabilityGrid::new(vec![]).is_err());
        assert!(ProbabilityGrid::new(vec![0.0, 0.5]).is_err());
        assert!(ProbabilityGrid::new(vec![0.5, 1.0]).is_err());
        assert!(ProbabilityGrid::new(vec![0.3, 0.3]).is_err());
        assert!(ProbabilityGrid::new(vec![0.4, 0.2]).is_err());
    }

    #[test]
    fn median_of_four() {
        let g = grid_of(&[0.5]);
        let s = RawSample::new(vec![4.0, 1.0, 3.0, 2.0]).unwrap();
        let q = empirical_quantile(&s, &g);
        assert_abs_diff_eq!(q.values()[0], 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(reference_quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5, epsilon = 1e-15);
    }

    #[test]
    fn upper_tail_clamps_to_maximum() {
        let g = grid_of(&[0.01, 0.99]);
        let s = RawSample::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let q = empirical_quantile(&s, &g);
        assert_eq!(q.values(), &[1.0, 4.0]);
    }

    #[test]
    fn constant_sample() {
        let g = Arc::new(ProbabilityGrid::default());
        let s = RawSample::new(vec![7.25; 13]).unwrap();
        let q = empirical_quantile(&s, &g);
        assert!(q.values().iter().all(|&v| v == 7.25));
    }

    #[test]
    fn sample_errors() {
        assert!(matches!(RawSample::new(vec![]), Err(DorqfError::InsufficientSample(0))));
        assert!(matches!(RawSample::new(vec![1.0]), Err(DorqfError::InsufficientSample(1))));
        assert!(matches!(
            RawSample::new(vec![1.0, f64::NAN]),
            Err(DorqfError::NonFinite(1))
        ));
    }

    #[test]
    fn order_statistics_are_hit_exactly() {
        let data = [0.3, -1.2, 5.5, 2.0, 2.0, 9.1, 0.0];
        let l = data.len();
        let probs: Vec<f64> = (1..=l).map(|k| k as f64 / (l + 1) as f64).collect();
        let g = grid_of(&probs);
        let q = empirical_quantile(&RawSample::new(data.to_vec()).unwrap(), &g);
        let mut sorted = data.to_vec();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(q.values(), sorted.as_slice());
    }

    #[test]
    fn wasserstein_examples() {
        let g = Arc::new(ProbabilityGrid::default());
        let a: Vec<f64> = g.points().to_vec();
        let qa = QuantileFunction::new(Arc::clone(&g), a.clone()).unwrap();
        assert_eq!(wasserstein_distance(&qa, &qa).unwrap(), 0.0);

        let shifted =
            QuantileFunction::new(Arc::clone(&g), a.iter().map(|v| v - 1.75).collect()).unwrap();
        assert_abs_diff_eq!(wasserstein_distance(&qa, &shifted).unwrap(), 1.75, epsilon = 1e-12);

        let zero = QuantileFunction::new(Arc::clone(&g), vec![0.0; g.len()]).unwrap();
        let d = wasserstein_distance(&qa, &zero).unwrap();
        assert!((d - 1.0 / 3f64.sqrt()).abs() <= 1e-3, "{d}");

        let other = QuantileFunction::new(grid_of(&[0.5]), vec![0.0]).unwrap();
        assert!(matches!(
            wasserstein_distance(&qa, &other),
            Err(DorqfError::GridMismatch)
        ));
    }

    #[test]
    fn quadrature_matches_dense_integration_for_shift() {
        // A constant difference integrates to exactly its square on any grid.
        let g = grid_of(&[0.1, 0.15, 0.7, 0.9]);
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.5, 1.5, 2.5, 3.5];
        assert_abs_diff_eq!(g.integrate_sq_diff(&a, &b), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn rescale_examples() {
        let g = grid_of(&[0.2, 0.5, 0.8]);
        let q = QuantileFunction::new(Arc::clone(&g), vec![-2.0, 1.0, 4.0]).unwrap();
        let u = rescale_to_unit(&q, -2.0, 4.0).unwrap();
        assert_eq!(u.values(), &[0.0, 0.5, 1.0]);
        let back = rescale_from_unit(&u, -2.0, 4.0).unwrap();
        for (x, y) in back.values().iter().zip(q.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }

        let q2 = QuantileFunction::new(grid_of(&[0.3, 0.6]), vec![1.0, 2.5]).unwrap();
        let u2 = rescale_to_unit(&q2, 0.0, 10.0).unwrap();
        assert_abs_diff_eq!(u2.values()[0], 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(u2.values()[1], 0.25, epsilon = 1e-15);

        assert!(matches!(
            rescale_to_unit(&q, 1.0, 1.0),
            Err(DorqfError::InvalidRange { .. })
        ));
        assert!(matches!(
            rescale_to_unit(&q, 0.0, 3.0),
            Err(DorqfError::OutOfRange { .. })
        ));
    }

    #[test]
    fn non_monotone_values_rejected() {
        let g = grid_of(&[0.2, 0.5, 0.8]);
        assert!(matches!(
            QuantileFunction::new(g, vec![0.0, 1.0, 0.5]),
            Err(DorqfError::NotMonotone { index: 2, .. })
        ));
    }

    fn sample_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 2..60)
    }

    fn grid_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::btree_set(1u32..9999, 1..40)
            .prop_map(|s| s.into_iter().map(|k| k as f64 / 10000.0).collect())
    }

    proptest! {
        #[test]
        fn empirical_quantile_is_monotone(data in sample_strategy(), probs in grid_strategy()) {
            let g = grid_of(&probs);
            let q = empirical_quantile(&RawSample::new(data.clone()).unwrap(), &g);
            for w in q.values().windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
            for (v, &p) in q.values().iter().zip(&probs) {
                prop_assert!((v - reference_quantile(&data, p)).abs() <= 1e-9 * (1.0 + v.abs()));
            }
        }

        #[test]
        fn empirical_quantile_affine_equivariance(
            data in sample_strategy(),
            probs in grid_strategy(),
            a in 0.01f64..20.0,
            b in -50.0f64..50.0,
        ) {
            let g = grid_of(&probs);
            let q = empirical_quantile(&RawSample::new(data.clone()).unwrap(), &g);
            let moved: Vec<f64> = data.iter().map(|x| a * x + b).collect();
            let qm = empirical_quantile(&RawSample::new(moved).unwrap(), &g);
            for (x, y) in q.values().iter().zip(qm.values()) {
                prop_assert!((a * x + b - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn wasserstein_is_a_metric(
            seeds in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 100), 3),
        ) {
            let g = Arc::new(ProbabilityGrid::default());
            let qs: Vec<QuantileFunction> = seeds
                .into_iter()
                .map(|mut v| {
                    v.sort_by(f64::total_cmp);
                    QuantileFunction::new(Arc::clone(&g), v).unwrap()
                })
                .collect();
            let d = |i: usize, j: usize| wasserstein_distance(&qs[i], &qs[j]).unwrap();
            prop_assert!((d(0, 1) - d(1, 0)).abs() <= 1e-14);
            prop_assert_eq!(d(2, 2), 0.0);
            prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
        }
    }
}
