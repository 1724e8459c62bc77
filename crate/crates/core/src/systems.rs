//! Synthetic ground-truth systems: a wrapped-normal mixture on the torus, its
//! two-dimensional colocalization variant, and the time-periodic double gyre.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::geometry::{MetricSpace, Point};
use crate::seeding::Rng;

/// Conditional law `Y | X = x` is a mixture of wrapped normals around `x`
/// and around `x + shift` (the shift is applied on every axis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusMixtureParams {
    pub sigma: f64,
    pub shift: f64,
    pub mix: [f64; 2],
    pub dim: usize,
}

impl TorusMixtureParams {
    /// Two equal bumps at offsets 0 and 0.3 on the circle.
    pub fn two_bump(sigma: f64) -> Self {
        Self {
            sigma,
            shift: 0.3,
            mix: [0.5, 0.5],
            dim: 1,
        }
    }

    /// Single isotropic wrapped normal on the 2-torus.
    pub fn colocalization(sigma: f64) -> Self {
        Self {
            sigma,
            shift: 0.0,
            mix: [1.0, 0.0],
            dim: 2,
        }
    }

    pub fn with_sigma(&self, sigma: f64) -> Self {
        Self {
            sigma,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return input(format!("sigma must be finite and nonnegative, got {}", self.sigma));
        }
        if !(1..=2).contains(&self.dim) {
            return input(format!("torus dimension must be 1 or 2, got {}", self.dim));
        }
        if self.mix.iter().any(|w| !(*w >= 0.0)) || (self.mix[0] + self.mix[1] - 1.0).abs() > 1e-12
        {
            return input(format!("mixture weights {:?} must be a probability vector", self.mix));
        }
        if !self.shift.is_finite() {
            return input("shift must be finite");
        }
        Ok(())
    }

    fn components(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        [(self.mix[0], 0.0), (self.mix[1], self.shift)]
            .into_iter()
            .filter(|(w, _)| *w > 0.0)
    }

    /// Density of the joint law with respect to the uniform product measure.
    pub fn density(&self, x: &[f64], y: &[f64]) -> f64 {
        self.components()
            .map(|(w, shift)| {
                w * x
                    .iter()
                    .zip(y)
                    .map(|(xa, ya)| wrapped_normal_pdf(ya - xa - shift, self.sigma))
                    .product::<f64>()
            })
            .sum()
    }
}

/// Number of images kept on each side in the wrapped-normal sum. With the
/// offset reduced to `[-1/2, 1/2]`, image `j` is at least `j - 1/2` away and
/// contributes below `exp(-40)` relative once `j - 1/2 > 9 sigma`.
pub fn wrap_terms(sigma: f64) -> i64 {
    1.max((9.0 * sigma + 0.5).ceil() as i64)
}

/// Density of the normal law `N(0, sigma^2)` wrapped onto the unit circle.
pub fn wrapped_normal_pdf(d: f64, sigma: f64) -> f64 {
    let d = d - d.round();
    let k = wrap_terms(sigma);
    let norm = 1.0 / (sigma * (2.0 * PI).sqrt());
    let inv = 1.0 / (2.0 * sigma * sigma);
    (-k..=k)
        .map(|j| {
            let z = d + j as f64;
            (-z * z * inv).exp()
        })
        .sum::<f64>()
        * norm
}

/// Time-periodic double gyre on `[0,2] x [0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoubleGyreParams {
    pub amplitude: f64,
    pub alpha: f64,
    pub omega: f64,
    pub delta_t: f64,
    pub rk4_steps: usize,
}

impl Default for DoubleGyreParams {
    fn default() -> Self {
        Self {
            amplitude: 0.25,
            alpha: 0.25,
            omega: 2.0 * PI,
            delta_t: 3.0,
            rk4_steps: 3000,
        }
    }
}

impl DoubleGyreParams {
    pub fn validate(&self) -> Result<()> {
        if ![self.amplitude, self.alpha, self.omega, self.delta_t]
            .iter()
            .all(|v| v.is_finite())
        {
            return input("double gyre parameters must be finite");
        }
        if self.delta_t < 0.0 {
            return input("delta_t must be nonnegative");
        }
        if self.rk4_steps == 0 {
            return input("rk4_steps must be positive");
        }
        Ok(())
    }

    pub fn space() -> MetricSpace {
        MetricSpace::open_box(vec![(0.0, 2.0), (0.0, 1.0)]).expect("static box")
    }

    /// Velocity field at time `t`.
    pub fn velocity(&self, t: f64, x: [f64; 2]) -> [f64; 2] {
        let s = self.alpha * (self.omega * t).sin();
        let f = s * x[0] * x[0] + (1.0 - 2.0 * s) * x[0];
        let df = 2.0 * s * x[0] + 1.0 - 2.0 * s;
        let pa = PI * self.amplitude;
        let (sf, cf) = (PI * f).sin_cos();
        let (sy, cy) = (PI * x[1]).sin_cos();
        [-pa * sf * cy, pa * cf * sy * df]
    }

    /// Integrates from `t0` over `duration` (may be negative) with `steps`
    /// classical Runge-Kutta steps.
    pub fn integrate(&self, x: [f64; 2], t0: f64, duration: f64, steps: usize) -> [f64; 2] {
        if duration == 0.0 || steps == 0 {
            return x;
        }
        let h = duration / steps as f64;
        let mut p = x;
        let mut t = t0;
        let add = |p: [f64; 2], k: [f64; 2], a: f64| [p[0] + a * k[0], p[1] + a * k[1]];
        for _ in 0..steps {
            let k1 = self.velocity(t, p);
            let k2 = self.velocity(t + 0.5 * h, add(p, k1, 0.5 * h));
            let k3 = self.velocity(t + 0.5 * h, add(p, k2, 0.5 * h));
            let k4 = self.velocity(t + h, add(p, k3, h));
            for a in 0..2 {
                p[a] += h / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a]);
            }
            t += h;
        }
        p
    }

    /// Flow map over `[0, delta_t]`.
    pub fn flow(&self, x: &Point) -> Point {
        let c = x.coords();
        let mut y = self.integrate([c[0], c[1]], 0.0, self.delta_t, self.rk4_steps);
        // The box is invariant; only clip round-off.
        let over = (-y[0]).max(y[0] - 2.0).max(-y[1]).max(y[1] - 1.0);
        if over > 1e-9 {
            log::warn!("gyre flow left the domain by {over:e}; clipping");
        }
        y[0] = y[0].clamp(0.0, 2.0);
        y[1] = y[1].clamp(0.0, 1.0);
        Point(y.to_vec())
    }
}

/// A synthetic system generating `(x, y)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum System {
    Torus(TorusMixtureParams),
    Gyre(DoubleGyreParams),
}

impl System {
    pub fn validate(&self) -> Result<()> {
        match self {
            System::Torus(p) => p.validate(),
            System::Gyre(p) => p.validate(),
        }
    }

    pub fn space(&self) -> MetricSpace {
        match self {
            System::Torus(p) => MetricSpace::unit_torus(p.dim),
            System::Gyre(_) => DoubleGyreParams::space(),
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            System::Torus(p) if p.dim == 1 => format!(
                "torus1d(sigma={}, shift={}, mix={:?})",
                p.sigma, p.shift, p.mix
            ),
            System::Torus(p) => format!("torus{}d(sigma={})", p.dim, p.sigma),
            System::Gyre(p) => format!(
                "double_gyre(A={}, alpha={}, omega={}, dt={}, steps={})",
                p.amplitude, p.alpha, p.omega, p.delta_t, p.rk4_steps
            ),
        }
    }

    /// Draws `x` uniformly on the domain and `y` from the conditional law.
    pub fn sample_pair(&self, rng: &mut Rng) -> (Point, Point) {
        match self {
            System::Torus(p) => {
                let x: Vec<f64> = (0..p.dim).map(|_| rng.random::<f64>()).collect();
                let shift = if rng.random::<f64>() < p.mix[0] { 0.0 } else { p.shift };
                let y: Vec<f64> = x
                    .iter()
                    .map(|xa| {
                        let z: f64 = StandardNormal.sample(rng);
                        (xa + shift + p.sigma * z).rem_euclid(1.0)
                    })
                    .map(|v| if v >= 1.0 { 0.0 } else { v })
                    .collect();
                (Point(x), Point(y))
            }
            System::Gyre(p) => {
                let x = Point(vec![2.0 * rng.random::<f64>(), rng.random::<f64>()]);
                let y = p.flow(&x);
                (x, y)
            }
        }
    }

    /// True density `p(x, y)`; defined for the torus systems only.
    pub fn density(&self, x: &Point, y: &Point) -> Result<f64> {
        match self {
            System::Torus(p) => {
                if p.sigma <= 0.0 {
                    return Err(Error::Unsupported(
                        "zero-noise torus has no density".into(),
                    ));
                }
                if x.dim() != p.dim || y.dim() != p.dim {
                    return input("point dimension does not match torus dimension");
                }
                Ok(p.density(x.coords(), y.coords()))
            }
            System::Gyre(_) => Err(Error::Unsupported(
                "the deterministic double gyre has no density with respect to its marginals"
                    .into(),
            )),
        }
    }

    pub fn ground_truth(&self) -> GroundTruthDensity {
        GroundTruthDensity {
            system: self.clone(),
        }
    }
}

/// Joint density with respect to a product of marginals.
pub trait JointDensity: Sync {
    fn density_at(&self, x: &[f64], y: &[f64]) -> f64;
}

impl JointDensity for TorusMixtureParams {
    fn density_at(&self, x: &[f64], y: &[f64]) -> f64 {
        self.density(x, y)
    }
}

impl<F: Fn(&[f64], &[f64]) -> f64 + Sync> JointDensity for F {
    fn density_at(&self, x: &[f64], y: &[f64]) -> f64 {
        self(x, y)
    }
}

/// Ground truth attached to a system; the gyre exposes `has_density() == false`.
#[derive(Debug, Clone)]
pub struct GroundTruthDensity {
    system: System,
}

impl GroundTruthDensity {
    pub fn has_density(&self) -> bool {
        matches!(&self.system, System::Torus(p) if p.sigma > 0.0)
    }

    pub fn system(&self) -> &System {
        &self.system
    }

    pub fn eval(&self, x: &Point, y: &Point) -> Result<f64> {
        self.system.density(x, y)
    }
}

impl JointDensity for GroundTruthDensity {
    fn density_at(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.system {
            System::Torus(p) => p.density(x, y),
            System::Gyre(_) => f64::NAN,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;

    #[test]
    fn zero_noise_single_component_is_identity() {
        let sys = System::Torus(TorusMixtureParams {
            sigma: 0.0,
            shift: 0.3,
            mix: [1.0, 0.0],
            dim: 1,
        });
        let mut rng = rng_for(1, "t", 0);
        for _ in 0..100 {
            let (x, y) = sys.sample_pair(&mut rng);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn gyre_with_zero_time_is_identity() {
        let sys = System::Gyre(DoubleGyreParams {
            delta_t: 0.0,
            ..Default::default()
        });
        let mut rng = rng_for(1, "t", 0);
        for _ in 0..10 {
            let (x, y) = sys.sample_pair(&mut rng);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn density_normalized_in_both_variables() {
        let p = TorusMixtureParams::two_bump(0.05);
        let n = 1 << 12;
        for &x0 in &[0.0, 0.137, 0.5, 0.93] {
            let sy: f64 = (0..n)
                .map(|i| p.density(&[x0], &[(i as f64 + 0.5) / n as f64]))
                .sum::<f64>()
                / n as f64;
            let sx: f64 = (0..n)
                .map(|i| p.density(&[(i as f64 + 0.5) / n as f64], &[x0]))
                .sum::<f64>()
                / n as f64;
            assert!((sy - 1.0).abs() < 1e-8, "int over y = {sy}");
            assert!((sx - 1.0).abs() < 1e-8, "int over x = {sx}");
        }
    }

    #[test]
    fn density_diagonal_value() {
        let p = TorusMixtureParams::two_bump(0.05);
        // Direct evaluation with the wrap sum over |k| <= 10.
        let w = |d: f64| -> f64 {
            let s = 0.05f64;
            (-10..=10)
                .map(|k| {
                    let z = d + k as f64;
                    (-z * z / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt())
                })
                .sum()
        };
        let expected = 0.5 * (w(0.0) + w(-0.3));
        for &x in &[0.0, 0.42, 0.77] {
            let got = p.density(&[x], &[x]);
            assert!((got - expected).abs() < 1e-12 * expected, "{got} vs {expected}");
        }
    }

    #[test]
    fn density_is_translation_invariant() {
        let p = TorusMixtureParams::two_bump(0.05);
        for &(x, y, t) in &[(0.1, 0.35, 0.4), (0.9, 0.15, 0.77), (0.5, 0.5, 0.123)] {
            let a = p.density(&[x], &[y]);
            let b = p.density(&[(x + t) % 1.0], &[(y + t) % 1.0]);
            assert!((a - b).abs() < 1e-10 * a.max(1.0));
        }
    }

    #[test]
    fn gyre_has_no_density() {
        let sys = System::Gyre(DoubleGyreParams::default());
        assert!(!sys.ground_truth().has_density());
        let p = Point(vec![0.5, 0.5]);
        assert!(matches!(sys.density(&p, &p), Err(Error::Unsupported(_))));
    }

    #[test]
    fn torus_two_dimensional_density_factorizes() {
        let p = TorusMixtureParams::colocalization(0.1);
        let d = p.density(&[0.2, 0.7], &[0.25, 0.6]);
        let e = wrapped_normal_pdf(0.05, 0.1) * wrapped_normal_pdf(-0.1, 0.1);
        assert!((d - e).abs() < 1e-12 * e);
    }

    #[test]
    fn sample_histogram_matches_density() {
        // Chi-square goodness of fit of (y - x) mod 1 against the mixture.
        let sys = System::Torus(TorusMixtureParams::two_bump(0.05));
        let p = TorusMixtureParams::two_bump(0.05);
        let mut rng = rng_for(2024, "hist", 0);
        let bins = 50usize;
        let n = 100_000usize;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let (x, y) = sys.sample_pair(&mut rng);
            let d = (y.coords()[0] - x.coords()[0]).rem_euclid(1.0);
            counts[((d * bins as f64) as usize).min(bins - 1)] += 1;
        }
        // Expected bin masses by fine midpoint quadrature.
        let sub = 200;
        let mut chi2 = 0.0;
        let mut dof = 0;
        for (b, &c) in counts.iter().enumerate() {
            let mass: f64 = (0..sub)
                .map(|s| {
                    let d = (b as f64 + (s as f64 + 0.5) / sub as f64) / bins as f64;
                    p.density(&[0.0], &[d])
                })
                .sum::<f64>()
                / (sub * bins) as f64;
            let e = mass * n as f64;
            if e >= 5.0 {
                chi2 += (c as f64 - e).powi(2) / e;
                dof += 1;
            }
        }
        // 99th percentile of chi-square with ~dof degrees of freedom
        // (Wilson-Hilferty approximation).
        let k = (dof - 1) as f64;
        let z = 2.326;
        let crit = k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3);
        assert!(chi2 < crit, "chi2 = {chi2}, critical = {crit}");
    }

    #[test]
    fn gyre_velocity_values() {
        let g = DoubleGyreParams::default();
        // Gyre centre: stagnation point.
        let v = g.velocity(0.0, [0.5, 0.5]);
        assert!(v[0].abs() < 1e-15 && v[1].abs() < 1e-15);
        // Bottom edge below the left centre: purely horizontal, speed pi*A.
        let v = g.velocity(0.0, [0.5, 0.0]);
        assert!((v[0] + PI / 4.0).abs() < 1e-15);
        assert!(v[1].abs() < 1e-15);
        // Left boundary at mid height: vertical flow pi*A.
        let v = g.velocity(0.0, [0.0, 0.5]);
        assert!(v[0].abs() < 1e-15);
        assert!((v[1] - PI / 4.0).abs() < 1e-15);
        for t in [0.0, 0.3, 1.7] {
            let v = g.velocity(t, [0.0, 0.0]);
            assert!(v[0].abs() < 1e-15 && v[1].abs() < 1e-15);
        }
    }

    #[test]
    fn gyre_boundary_oscillates() {
        // Separatrix x1 with f(t, x1) = 1, where the horizontal velocity
        // changes sign, moves right at t = 0.25.
        let g = DoubleGyreParams::default();
        let sep = |t: f64| -> f64 {
            let (mut lo, mut hi) = (0.5, 1.5);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if g.velocity(t, [mid, 0.25])[0] > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        };
        assert!((sep(0.0) - 1.0).abs() < 1e-9);
        assert!(sep(0.25) > 1.2);
        assert!(sep(0.75) < 0.8);
    }

    #[test]
    fn gyre_rk4_self_convergence() {
        let g = DoubleGyreParams::default();
        for &x in &[[0.3, 0.2], [1.1, 0.7], [1.9, 0.45]] {
            let a = g.integrate(x, 0.0, 3.0, 3000);
            let b = g.integrate(x, 0.0, 3.0, 6000);
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            assert!(d < 1e-8, "step halving moved the endpoint by {d:e}");
        }
    }

    #[test]
    fn gyre_flow_is_invertible() {
        let g = DoubleGyreParams::default();
        let mut rng = rng_for(3, "inv", 0);
        for _ in 0..20 {
            let x = [2.0 * rng.random::<f64>(), rng.random::<f64>()];
            let y = g.integrate(x, 0.0, 3.0, 3000);
            let z = g.integrate(y, 3.0, -3.0, 3000);
            assert!((x[0] - z[0]).abs() < 1e-6 && (x[1] - z[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn gyre_flow_preserves_area() {
        // Jacobian determinant of the flow map by central differences.
        let g = DoubleGyreParams {
            rk4_steps: 1500,
            ..Default::default()
        };
        let h = 1e-6;
        let mut rng = rng_for(4, "jac", 0);
        for _ in 0..10 {
            let x = [0.05 + 1.9 * rng.random::<f64>(), 0.05 + 0.9 * rng.random::<f64>()];
            let f = |p: [f64; 2]| g.integrate(p, 0.0, g.delta_t, g.rk4_steps);
            let a = f([x[0] + h, x[1]]);
            let b = f([x[0] - h, x[1]]);
            let c = f([x[0], x[1] + h]);
            let d = f([x[0], x[1] - h]);
            let j11 = (a[0] - b[0]) / (2.0 * h);
            let j21 = (a[1] - b[1]) / (2.0 * h);
            let j12 = (c[0] - d[0]) / (2.0 * h);
            let j22 = (c[1] - d[1]) / (2.0 * h);
            let det = j11 * j22 - j12 * j21;
            assert!((det - 1.0).abs() < 1e-3, "det = {det}");
        }
    }
}
