//! Entropic optimal transport between a sample measure and an anchor measure,
//! and the transport kernels built from its dual potentials.
//!
//! The solver keeps the potentials in the log domain and runs cheap scaling
//! iterations on an absorbed Gibbs kernel `exp((phi_bar + psi_bar - c) / eps)`.
//! Whenever the scaling vectors drift far from one they are folded back into the
//! potentials and the kernel is rebuilt, so nothing under- or overflows even for
//! `eps` several orders of magnitude below the squared diameter.
//!
//! Gauge: potentials are shifted so that `sum_i mu_i phi_i = 0`. The last
//! update is always an exact log-sum-exp update of `phi`, which makes every
//! kernel row integrate to one against the anchor weights up to round-off;
//! the reported residual is the remaining column violation.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::geometry::{DiscreteMeasure, Point};

/// Scaling vectors are absorbed once `|log a|` exceeds this bound.
const ABSORB_LOG: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 100_000,
        }
    }
}

/// Which measure a potential lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Src,
    Anchor,
}

/// Converged dual potentials of the entropic transport problem between
/// `src` and `anchor`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropicPotentials {
    pub epsilon: f64,
    pub src: DiscreteMeasure,
    pub anchor: DiscreteMeasure,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    /// Max relative marginal violation `|sum_i mu_i k(x_i, a_l) - 1|`.
    pub residual: f64,
    pub iterations: usize,
}

#[inline]
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Dense cost in both layouts plus log-weights.
struct Problem<'a> {
    n: usize,
    m: usize,
    eps: f64,
    /// Row-major `n x m`.
    cost: Vec<f64>,
    /// Row-major `m x n`.
    cost_t: Vec<f64>,
    log_mu: Vec<f64>,
    log_nu: Vec<f64>,
    mu: &'a [f64],
    nu: &'a [f64],
}

impl<'a> Problem<'a> {
    fn new(src: &'a DiscreteMeasure, anchor: &'a DiscreteMeasure, eps: f64) -> Self {
        let space = src.space();
        let (n, m) = (src.len(), anchor.len());
        let mut cost = vec![0.0; n * m];
        cost.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            let xi = src.points()[i].coords();
            for (l, c) in row.iter_mut().enumerate() {
                *c = space.dist2_unchecked(xi, anchor.points()[l].coords());
            }
        });
        let mut cost_t = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..m {
                cost_t[l * n + i] = cost[i * m + l];
            }
        }
        Self {
            n,
            m,
            eps,
            cost,
            cost_t,
            log_mu: src.weights().iter().map(|w| w.ln()).collect(),
            log_nu: anchor.weights().iter().map(|w| w.ln()).collect(),
            mu: src.weights(),
            nu: anchor.weights(),
        }
    }

    /// Exact `phi_i = -eps log sum_l nu_l exp((psi_l - c_il)/eps)`.
    fn phi_update(&self, psi: &[f64], phi: &mut [f64]) {
        let eps = self.eps;
        phi.par_iter_mut().enumerate().for_each(|(i, out)| {
            let row = &self.cost[i * self.m..(i + 1) * self.m];
            let it = (0..self.m).map(|l| self.log_nu[l] + (psi[l] - row[l]) / eps);
            *out = -eps * log_sum_exp(it);
        });
    }

    /// Exact `psi_l = -eps log sum_i mu_i exp((phi_i - c_il)/eps)`.
    fn psi_update(&self, phi: &[f64], psi: &mut [f64]) {
        let eps = self.eps;
        psi.par_iter_mut().enumerate().for_each(|(l, out)| {
            let col = &self.cost_t[l * self.n..(l + 1) * self.n];
            let it = (0..self.n).map(|i| self.log_mu[i] + (phi[i] - col[i]) / eps);
            *out = -eps * log_sum_exp(it);
        });
    }

    /// Absorbed kernel `G_il = mu_i nu_l exp((phi_i + psi_l - c_il)/eps)`, row-major.
    fn gibbs(&self, phi: &[f64], psi: &[f64], g: &mut [f64]) {
        let eps = self.eps;
        g.par_chunks_mut(self.m).enumerate().for_each(|(i, row)| {
            let c = &self.cost[i * self.m..(i + 1) * self.m];
            for l in 0..self.m {
                let g = self.mu[i] * self.nu[l] * ((phi[i] + psi[l] - c[l]) / eps).exp();
                // Flush what would be subnormal; such entries cannot move a row sum.
                row[l] = if g < 1e-280 { 0.0 } else { g };
            }
        });
    }

    /// Exact column violation for potentials whose rows are normalized.
    fn column_violation(&self, phi: &[f64], psi: &[f64]) -> f64 {
        let mut target = vec![0.0; self.m];
        self.psi_update(phi, &mut target);
        psi.iter()
            .zip(&target)
            .map(|(p, t)| (((p - t) / self.eps).exp() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Solves the entropic transport problem between `src` and `anchor` with
/// regularization `epsilon` and squared-distance cost.
pub fn sinkhorn(
    src: &DiscreteMeasure,
    anchor: &DiscreteMeasure,
    epsilon: f64,
    opts: SinkhornOptions,
) -> Result<EntropicPotentials> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return input(format!("epsilon must be positive, got {epsilon}"));
    }
    if src.space() != anchor.space() {
        return input("source and anchor measures live on different spaces");
    }
    if src.weights().iter().chain(anchor.weights()).any(|w| *w <= 0.0) {
        return input("zero-weight atoms must be dropped before solving");
    }
    if !(opts.tol > 0.0) {
        return input("sinkhorn tolerance must be positive");
    }

    let pb = Problem::new(src, anchor, epsilon);
    let (n, m) = (pb.n, pb.m);

    // Start from phi = 0 with one exact half-step each way so the absorbed
    // kernel has unit-order row sums.
    let mut phi = vec![0.0; n];
    let mut psi = vec![0.0; m];
    pb.psi_update(&phi, &mut psi);
    pb.phi_update(&psi, &mut phi);

    let mut g = vec![0.0; n * m];
    pb.gibbs(&phi, &psi, &mut g);
    let mut a = vec![1.0; n];
    let mut b = vec![1.0; m];
    let mut col = vec![0.0; m];

    let absorb = |phi: &mut [f64], psi: &mut [f64], a: &mut [f64], b: &mut [f64]| {
        for (p, s) in phi.iter_mut().zip(a.iter_mut()) {
            *p += epsilon * s.ln();
            *s = 1.0;
        }
        for (p, s) in psi.iter_mut().zip(b.iter_mut()) {
            *p += epsilon * s.ln();
            *s = 1.0;
        }
    };

    let mut iter = 0usize;
    let mut residual = f64::INFINITY;
    while iter < opts.max_iter {
        iter += 1;

        // Row update: a_i = mu_i / sum_l G_il b_l.
        let mut degenerate = false;
        for i in 0..n {
            let row = &g[i * m..(i + 1) * m];
            let s: f64 = row.iter().zip(&b).map(|(x, y)| x * y).sum();
            a[i] = pb.mu[i] / s;
            degenerate |= !(s > 0.0) || !a[i].is_finite();
        }

        // Column sums after the row update measure the remaining violation.
        if !degenerate {
            col.iter_mut().for_each(|c| *c = 0.0);
            for i in 0..n {
                let ai = a[i];
                let row = &g[i * m..(i + 1) * m];
                for (c, x) in col.iter_mut().zip(row) {
                    *c += ai * x;
                }
            }
            degenerate = col.iter().any(|c| !(*c > 0.0) || !c.is_finite());
        }

        if degenerate {
            // Fall back to exact log-domain half-steps and rebuild the kernel.
            absorb(&mut phi, &mut psi, &mut vec![1.0; n], &mut b);
            pb.psi_update(&phi, &mut psi);
            pb.phi_update(&psi, &mut phi);
            a.iter_mut().for_each(|s| *s = 1.0);
            pb.gibbs(&phi, &psi, &mut g);
            continue;
        }

        let approx = (0..m)
            .map(|l| (b[l] * col[l] / pb.nu[l] - 1.0).abs())
            .fold(0.0, f64::max);

        if approx <= opts.tol {
            absorb(&mut phi, &mut psi, &mut a, &mut b);
            pb.phi_update(&psi, &mut phi);
            residual = pb.column_violation(&phi, &psi);
            if residual <= opts.tol {
                break;
            }
            pb.gibbs(&phi, &psi, &mut g);
            continue;
        }

        for l in 0..m {
            b[l] = pb.nu[l] / col[l];
        }

        let drift = a
            .iter()
            .chain(&b)
            .map(|s| s.ln().abs())
            .fold(0.0, f64::max);
        if drift > ABSORB_LOG {
            absorb(&mut phi, &mut psi, &mut a, &mut b);
            pb.gibbs(&phi, &psi, &mut g);
        }
    }

    if !(residual <= opts.tol) {
        absorb(&mut phi, &mut psi, &mut a, &mut b);
        pb.phi_update(&psi, &mut phi);
        residual = pb.column_violation(&phi, &psi);
        if !(residual <= opts.tol) {
            return Err(Error::Convergence {
                what: "sinkhorn",
                iterations: iter,
                residual,
            });
        }
    }

    if phi.iter().chain(&psi).any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            iteration: iter,
            message: "non-finite dual potential".into(),
        });
    }

    let shift: f64 = phi.iter().zip(pb.mu).map(|(p, w)| p * w).sum();
    phi.iter_mut().for_each(|p| *p -= shift);
    psi.iter_mut().for_each(|p| *p += shift);

    Ok(EntropicPotentials {
        epsilon,
        src: src.clone(),
        anchor: anchor.clone(),
        phi,
        psi,
        residual,
        iterations: iter,
    })
}

impl EntropicPotentials {
    /// Evaluates the fixed-point formula for the potential on `side` at an
    /// arbitrary point, integrating against the opposite measure.
    pub fn extend_potential(&self, side: Side, x: &Point) -> f64 {
        let space = self.src.space();
        let eps = self.epsilon;
        let (other, pot) = match side {
            Side::Src => (&self.anchor, &self.psi),
            Side::Anchor => (&self.src, &self.phi),
        };
        let it = other
            .points()
            .iter()
            .zip(other.weights())
            .zip(pot)
            .map(|((p, w), v)| w.ln() + (v - space.dist2_unchecked(x.coords(), p.coords())) / eps);
        -eps * log_sum_exp(it)
    }

    /// Kernel `k(x_r, a_l) = exp((phi(x_r) + psi_l - c(x_r, a_l)) / eps)` at
    /// the given evaluation points (rows) against the anchor support (columns).
    pub fn kernel_matrix(&self, eval_points: &[Point]) -> Result<KernelMatrix> {
        let space = self.src.space();
        for p in eval_points {
            if p.dim() != space.dim() {
                return input("evaluation point dimension does not match the space");
            }
        }
        let anchors = self.anchor.points();
        let m = anchors.len();
        let eps = self.epsilon;
        let rows: Vec<Vec<f64>> = eval_points
            .par_iter()
            .map(|x| {
                let phi = self.extend_potential(Side::Src, x);
                (0..m)
                    .map(|l| {
                        let c = space.dist2_unchecked(x.coords(), anchors[l].coords());
                        ((phi + self.psi[l] - c) / eps).exp()
                    })
                    .collect()
            })
            .collect();
        let values = DMatrix::from_fn(eval_points.len(), m, |r, l| rows[r][l]);
        Ok(KernelMatrix { values })
    }

    /// Entropic transport plan on the product of the two supports.
    pub fn plan(&self) -> DMatrix<f64> {
        let space = self.src.space();
        let (mu, nu) = (self.src.weights(), self.anchor.weights());
        DMatrix::from_fn(self.src.len(), self.anchor.len(), |i, l| {
            let c = space.dist2_unchecked(self.src.points()[i].coords(), self.anchor.points()[l].coords());
            ((self.phi[i] + self.psi[l] - c) / self.epsilon).exp() * mu[i] * nu[l]
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

/// Entropic kernel evaluated at a list of points against the anchors.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub values: DMatrix<f64>,
}

impl KernelMatrix {
    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// `sum_l K[r, l] w_l` for every row.
    pub fn row_integrals(&self, anchor_weights: &[f64]) -> Vec<f64> {
        let w = nalgebra::DVector::from_column_slice(anchor_weights);
        (&self.values * w).iter().copied().collect()
    }

    /// `sum_r w_r K[r, l]` for every column.
    pub fn column_integrals(&self, row_weights: &[f64]) -> Vec<f64> {
        let w = nalgebra::DVector::from_column_slice(row_weights);
        self.values.tr_mul(&w).iter().copied().collect()
    }
}
