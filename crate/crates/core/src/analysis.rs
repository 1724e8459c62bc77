//! Working with a fitted coupling: density evaluation, L2 error against a
//! known truth, the discretized transfer operator and its singular vectors,
//! and one-parameter maximum-likelihood fits.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{input, Error, Result};
use crate::geometry::{DiscreteMeasure, MetricSpace, Point};
use crate::inference::{eval_J_empirical, ordered_sum, BatchDataset, Coupling};
use crate::kernel::EntropicPotentials;
use crate::systems::{GroundTruthDensity, JointDensity};

/// Estimated density `q(x, y) = sum_kl k_x(x, x_k) xi_kl k_y(y, y_l)`.
#[derive(Debug, Clone)]
pub struct TransferEstimate {
    pub coupling: Coupling,
    pub pot_x: EntropicPotentials,
    pub pot_y: EntropicPotentials,
    xi: DMatrix<f64>,
}

impl TransferEstimate {
    pub fn new(coupling: Coupling, pot_x: EntropicPotentials, pot_y: EntropicPotentials) -> Result<Self> {
        if coupling.k != pot_x.anchor.len() || coupling.l != pot_y.anchor.len() {
            return input("coupling shape does not match the anchor sets of the potentials");
        }
        let xi = coupling.matrix();
        Ok(Self {
            coupling,
            pot_x,
            pot_y,
            xi,
        })
    }

    pub fn space_x(&self) -> &MetricSpace {
        self.pot_x.src.space()
    }

    pub fn space_y(&self) -> &MetricSpace {
        self.pot_y.src.space()
    }

    /// `q(xs[a], ys[b])` for all pairs.
    pub fn q_matrix(&self, xs: &[Point], ys: &[Point]) -> Result<DMatrix<f64>> {
        let kx = self.pot_x.kernel_matrix(xs)?;
        let ky = self.pot_y.kernel_matrix(ys)?;
        Ok(kx.values * &self.xi * ky.values.transpose())
    }
}

pub fn q_eval(est: &TransferEstimate, x: &Point, y: &Point) -> Result<f64> {
    Ok(est.q_matrix(std::slice::from_ref(x), std::slice::from_ref(y))?[(0, 0)])
}

/// Anything that can be tabulated on a product grid.
pub trait GridDensity: Sync {
    /// `values[(a, b)] = q(xs[a], ys[b])`.
    fn eval_grid(&self, xs: &[Point], ys: &[Point]) -> Result<DMatrix<f64>>;
}

impl GridDensity for TransferEstimate {
    fn eval_grid(&self, xs: &[Point], ys: &[Point]) -> Result<DMatrix<f64>> {
        self.q_matrix(xs, ys)
    }
}

/// Pointwise adapter for analytic densities.
pub struct Analytic<D>(pub D);

impl<D: JointDensity> GridDensity for Analytic<D> {
    fn eval_grid(&self, xs: &[Point], ys: &[Point]) -> Result<DMatrix<f64>> {
        let cols: Vec<Vec<f64>> = ys
            .par_iter()
            .map(|y| xs.iter().map(|x| self.0.density_at(x.coords(), y.coords())).collect())
            .collect();
        Ok(DMatrix::from_fn(xs.len(), ys.len(), |a, b| cols[b][a]))
    }
}

/// Midpoints of a `res^d` tensor grid over the bounding box of `space`.
pub fn midpoint_grid(space: &MetricSpace, res: usize) -> Result<Vec<Point>> {
    let d = space.dim();
    let total = res.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            let mut c = Vec::with_capacity(d);
            for &(lo, hi) in space.bounds() {
                let i = idx % res;
                idx /= res;
                c.push(lo + (hi - lo) * (i as f64 + 0.5) / res as f64);
            }
            space.point(c)
        })
        .collect()
}

/// `||q - p||` in `L2` of the product of normalized volume measures, by
/// midpoint quadrature with `grid_res` nodes per axis.
pub fn l2_error<E: GridDensity>(est: &E, truth: &GroundTruthDensity, grid_res: usize) -> Result<f64> {
    if !truth.has_density() {
        return Err(Error::Unsupported(
            "l2 error needs a ground truth with a density".into(),
        ));
    }
    if grid_res == 0 {
        return input("grid resolution must be positive");
    }
    let space = truth.system().space();
    let grid = midpoint_grid(&space, grid_res)?;
    let truth = Analytic(truth.clone());
    // Blocks of input nodes keep the tabulated matrices small in 2-D.
    let mut partial = Vec::new();
    for block in grid.chunks(256) {
        let q = est.eval_grid(block, &grid)?;
        let p = truth.eval_grid(block, &grid)?;
        partial.push((q - p).norm_squared());
    }
    let n = grid.len() as f64;
    Ok((ordered_sum(partial) / (n * n)).sqrt())
}

/// `T[n, m] = q(x_m, y_n) mu_m`, the action of the estimated transfer
/// operator on functions sampled at the support of `mu`.
pub fn transfer_matrix(est: &TransferEstimate, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<DMatrix<f64>> {
    if !est.coupling.constrained {
        log::warn!("transfer operator of an unconstrained coupling is not stochastic");
    }
    let q = est.q_matrix(mu.points(), nu.points())?;
    Ok(DMatrix::from_fn(nu.len(), mu.len(), |n, m| q[(m, n)] * mu.weights()[m]))
}

/// `P[m, n] = q(x_m, y_n) nu_n`: the conditional law of `y` given `x_m`,
/// row-stochastic when the coupling is marginal-constrained.
pub fn transition_matrix(est: &TransferEstimate, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<DMatrix<f64>> {
    if !est.coupling.constrained {
        log::warn!("transition matrix of an unconstrained coupling is not stochastic");
    }
    let mut q = est.q_matrix(mu.points(), nu.points())?;
    for (n, mut col) in q.column_iter_mut().enumerate() {
        col *= nu.weights()[n];
    }
    Ok(q)
}

#[derive(Debug, Clone)]
pub struct SpectralResult {
    pub singular_values: Vec<f64>,
    /// Columns are singular functions on the output points, orthonormal in `L2(nu)`.
    pub left_vectors: DMatrix<f64>,
    /// Columns are singular functions on the input points, orthonormal in `L2(mu)`.
    pub right_vectors: DMatrix<f64>,
    /// Sign of each right vector per input point (`true` for `>= 0`).
    pub right_partitions: Vec<Vec<bool>>,
    pub left_partitions: Vec<Vec<bool>>,
}

/// Weighted SVD of the operator with kernel `q[n, m] = q(x_m, y_n)` from
/// `L2(mu)` to `L2(nu)`.
pub fn svd_cluster(q: &DMatrix<f64>, mu_w: &[f64], nu_w: &[f64], n_modes: usize) -> Result<SpectralResult> {
    let (rows, cols) = q.shape();
    if mu_w.len() != cols || nu_w.len() != rows {
        return input("weight vectors do not match the kernel shape");
    }
    for w in [mu_w, nu_w] {
        if w.iter().any(|v| !(*v > 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return input("weights must be positive and sum to one");
        }
    }
    let sm: Vec<f64> = mu_w.iter().map(|w| w.sqrt()).collect();
    let sn: Vec<f64> = nu_w.iter().map(|w| w.sqrt()).collect();
    let b = DMatrix::from_fn(rows, cols, |n, m| sn[n] * q[(n, m)] * sm[m]);
    let svd = b
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical {
            iteration: 0,
            message: "SVD did not converge".into(),
        })?;
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let modes = n_modes.min(order.len());

    let mut left = DMatrix::zeros(rows, modes);
    let mut right = DMatrix::zeros(cols, modes);
    let mut values = Vec::with_capacity(modes);
    for (c, &s) in order.iter().take(modes).enumerate() {
        let mut r: DVector<f64> = DVector::from_fn(cols, |m, _| vt[(s, m)] / sm[m]);
        let mut l: DVector<f64> = DVector::from_fn(rows, |n, _| u[(n, s)] / sn[n]);
        if flip_sign(r.as_slice()) {
            r.neg_mut();
            l.neg_mut();
        }
        right.set_column(c, &r);
        left.set_column(c, &l);
        values.push(svd.singular_values[s]);
    }
    let signs = |m: &DMatrix<f64>| -> Vec<Vec<bool>> {
        m.column_iter().map(|c| c.iter().map(|v| *v >= 0.0).collect()).collect()
    };
    Ok(SpectralResult {
        singular_values: values,
        right_partitions: signs(&right),
        left_partitions: signs(&left),
        left_vectors: left,
        right_vectors: right,
    })
}

/// Sign convention: nonnegative mean; vectors with vanishing mean (those
/// orthogonal to the constants) use the sign of the third moment instead.
fn flip_sign(v: &[f64]) -> bool {
    let n = v.len() as f64;
    let scale = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mean = v.iter().sum::<f64>() / n;
    if mean.abs() > 1e-8 * scale {
        return mean < 0.0;
    }
    v.iter().map(|x| x * x * x).sum::<f64>() < 0.0
}

#[derive(Debug, Clone, Serialize)]
pub struct ParametricFit {
    pub theta_hat: f64,
    pub profile: Vec<(f64, f64)>,
    pub at_boundary: bool,
}

/// Minimizes the empirical inference functional over a one-parameter family:
/// grid scan, then golden-section refinement inside the bracketing cells.
pub fn parametric_fit<F, D>(ds: &BatchDataset, family: F, theta_grid: &[f64]) -> Result<ParametricFit>
where
    F: Fn(f64) -> D + Sync,
    D: JointDensity,
{
    if theta_grid.is_empty() {
        return input("theta grid is empty");
    }
    if theta_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return input("theta grid must be strictly increasing");
    }
    let objective = |t: f64| {
        let d = family(t);
        eval_J_empirical(|x, y| d.density_at(x.coords(), y.coords()), ds)
    };
    let profile: Vec<(f64, f64)> = theta_grid
        .iter()
        .map(|&t| objective(t).map(|j| (t, j)))
        .collect::<Result<_>>()?;
    // First minimizer wins, so a flat profile returns the first grid point.
    let best = (0..profile.len()).fold(0, |b, i| if profile[i].1 < profile[b].1 { i } else { b });
    if best == 0 || best == profile.len() - 1 {
        log::warn!(
            "parametric fit minimum at grid boundary theta = {}",
            profile[best].0
        );
        return Ok(ParametricFit {
            theta_hat: profile[best].0,
            profile,
            at_boundary: true,
        });
    }

    let (mut lo, mut hi) = (profile[best - 1].0, profile[best + 1].0);
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let (mut f1, mut f2) = (objective(x1)?, objective(x2)?);
    while hi - lo > 1e-4 * profile[best].0 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = objective(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = objective(x2)?;
        }
    }
    let mid = 0.5 * (lo + hi);
    let theta_hat = if objective(mid)? <= profile[best].1 { mid } else { profile[best].0 };
    Ok(ParametricFit {
        theta_hat,
        profile,
        at_boundary: false,
    })
}
