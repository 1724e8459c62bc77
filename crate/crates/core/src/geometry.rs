//! Compact boxes with optionally periodic axes, squared-distance costs and
//! weighted point clouds.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

/// Slack allowed outside a non-periodic axis before a coordinate is rejected.
/// Coordinates within the slack are clamped onto the boundary.
const BOUNDARY_SLACK: f64 = 1e-9;

/// Product of closed intervals; each axis is either plain or periodic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpace {
    bounds: Vec<(f64, f64)>,
    periodic: Vec<bool>,
}

impl MetricSpace {
    pub fn new(bounds: Vec<(f64, f64)>, periodic: Vec<bool>) -> Result<Self> {
        if bounds.is_empty() {
            return input("metric space needs at least one axis");
        }
        if bounds.len() != periodic.len() {
            return input(format!(
                "{} bounds but {} periodicity flags",
                bounds.len(),
                periodic.len()
            ));
        }
        for (axis, &(lo, hi)) in bounds.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() || hi < lo {
                return input(format!("axis {axis}: invalid interval [{lo}, {hi}]"));
            }
            if periodic[axis] && hi <= lo {
                return input(format!("axis {axis}: periodic axis needs positive length"));
            }
        }
        Ok(Self { bounds, periodic })
    }

    /// The flat torus `[0,1)^dim`.
    pub fn unit_torus(dim: usize) -> Self {
        Self {
            bounds: vec![(0.0, 1.0); dim],
            periodic: vec![true; dim],
        }
    }

    /// Axis-aligned box without periodicity.
    pub fn open_box(bounds: Vec<(f64, f64)>) -> Result<Self> {
        let n = bounds.len();
        Self::new(bounds, vec![false; n])
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn periodic(&self) -> &[bool] {
        &self.periodic
    }

    /// Largest possible distance between two points of the space.
    pub fn diameter(&self) -> f64 {
        self.bounds
            .iter()
            .zip(&self.periodic)
            .map(|(&(lo, hi), &p)| {
                let ext = if p { 0.5 * (hi - lo) } else { hi - lo };
                ext * ext
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Lebesgue volume of the box.
    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(|&(lo, hi)| hi - lo).product()
    }

    /// Builds a point, reducing periodic coordinates into `[lo, hi)`.
    pub fn point(&self, coords: Vec<f64>) -> Result<Point> {
        if coords.len() != self.dim() {
            return input(format!(
                "point has dimension {} but space has dimension {}",
                coords.len(),
                self.dim()
            ));
        }
        let mut coords = coords;
        for (axis, c) in coords.iter_mut().enumerate() {
            if !c.is_finite() {
                return input(format!("non-finite coordinate on axis {axis}"));
            }
            let (lo, hi) = self.bounds[axis];
            if self.periodic[axis] {
                let period = hi - lo;
                let mut v = lo + (*c - lo).rem_euclid(period);
                if v >= hi {
                    v = lo;
                }
                *c = v;
            } else if *c < lo - BOUNDARY_SLACK || *c > hi + BOUNDARY_SLACK {
                return input(format!("coordinate {c} outside [{lo}, {hi}] on axis {axis}"));
            } else {
                *c = c.clamp(lo, hi);
            }
        }
        Ok(Point(coords))
    }

    pub fn check(&self, p: &Point) -> Result<()> {
        if p.dim() != self.dim() {
            return input(format!(
                "point has dimension {} but space has dimension {}",
                p.dim(),
                self.dim()
            ));
        }
        Ok(())
    }

    /// Per-axis displacement `b - a`, using the minimum image on periodic axes.
    #[inline]
    fn displacement(&self, axis: usize, a: f64, b: f64) -> f64 {
        let d = b - a;
        if self.periodic[axis] {
            let (lo, hi) = self.bounds[axis];
            let period = hi - lo;
            d - period * (d / period).round()
        } else {
            d
        }
    }

    /// Squared distance; the caller guarantees matching dimensions.
    #[inline]
    pub(crate) fn dist2_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for axis in 0..a.len() {
            let d = self.displacement(axis, a[axis], b[axis]);
            acc += d * d;
        }
        acc
    }

    pub fn dist2(&self, a: &Point, b: &Point) -> Result<f64> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.dist2_unchecked(&a.0, &b.0))
    }
}

/// Distance with the minimum-image convention on periodic axes.
pub fn dist(space: &MetricSpace, a: &Point, b: &Point) -> Result<f64> {
    space.dist2(a, b).map(f64::sqrt)
}

/// Matrix of squared distances `c(src_i, dst_j) = dist(src_i, dst_j)^2`.
pub fn cost_matrix(space: &MetricSpace, src: &[Point], dst: &[Point]) -> Result<DMatrix<f64>> {
    if src.is_empty() || dst.is_empty() {
        return input("cost matrix needs nonempty point lists");
    }
    for p in src.iter().chain(dst) {
        space.check(p)?;
    }
    Ok(DMatrix::from_fn(src.len(), dst.len(), |i, j| {
        space.dist2_unchecked(&src[i].0, &dst[j].0)
    }))
}

/// Coordinates of a point in a [`MetricSpace`]. Construct through
/// [`MetricSpace::point`] so periodic axes are canonical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point(pub(crate) Vec<f64>);

impl Point {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Finitely supported probability measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    space: MetricSpace,
    points: Vec<Point>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(space: MetricSpace, points: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return input("discrete measure needs at least one atom");
        }
        if points.len() != weights.len() {
            return input(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            ));
        }
        for p in &points {
            space.check(p)?;
            if p.0.iter().any(|c| !c.is_finite()) {
                return input("non-finite coordinate in measure support");
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return input("weights must be finite and nonnegative");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return input(format!("weights sum to {total}, expected 1"));
        }
        Ok(Self {
            space,
            points,
            weights,
        })
    }

    /// Equal weights `1/n` on every point.
    pub fn uniform(space: MetricSpace, points: Vec<Point>) -> Result<Self> {
        let n = points.len();
        Self::new(space, points, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn space(&self) -> &MetricSpace {
        &self.space
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
