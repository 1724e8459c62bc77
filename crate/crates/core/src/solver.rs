//! Multiplicative solvers for `min KL(b | A x)` over the simplex, with and
//! without prescribed masses on a partition of the unknowns.
//!
//! Rows with `b_i = 0` are assumed to be deleted already. Their contribution
//! `sum_j (column mass - retained column sum) x_j` is carried by the scalar
//! `column_mass`, the common column sum of the full (undeleted) matrix.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{input, Error, Result};

/// Lower bound for iterate entries. Entries decaying towards zero would
/// otherwise pass through subnormal numbers, which are orders of magnitude
/// slower; the floor is far below the round-off of any cell mass.
pub const ENTRY_FLOOR: f64 = 1e-100;

/// Matrix-free access to `A` and `A^T`.
pub trait LinearOperator: Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn apply_transpose(&self, r: &[f64], out: &mut [f64]);
}

impl LinearOperator for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }

    fn ncols(&self) -> usize {
        self.ncols()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &xj) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.column(j).iter()) {
                *o += a * xj;
            }
        }
    }

    fn apply_transpose(&self, r: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.column(j).iter().zip(r).map(|(a, b)| a * b).sum();
        }
    }
}

/// Cells `J_l` over the unknowns with prescribed masses `y_l`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Partition {
    pub cells: Vec<Vec<usize>>,
    pub targets: Vec<f64>,
}

impl Partition {
    pub fn new(cells: Vec<Vec<usize>>, targets: Vec<f64>, n_unknowns: usize) -> Result<Self> {
        if cells.len() != targets.len() || cells.is_empty() {
            return input("partition needs one positive target per nonempty cell");
        }
        let mut seen = vec![false; n_unknowns];
        for cell in &cells {
            if cell.is_empty() {
                return input("empty partition cell");
            }
            for &j in cell {
                if j >= n_unknowns || seen[j] {
                    return input("partition cells must cover every unknown exactly once");
                }
                seen[j] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return input("partition cells must cover every unknown exactly once");
        }
        if targets.iter().any(|y| !(*y > 0.0)) {
            return input("partition targets must be positive");
        }
        let total: f64 = targets.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return input(format!("partition targets sum to {total}, expected 1"));
        }
        Ok(Self { cells, targets })
    }

    /// Single cell holding every unknown: the plain simplex constraint.
    pub fn simplex(n_unknowns: usize) -> Self {
        Self {
            cells: vec![(0..n_unknowns).collect()],
            targets: vec![1.0],
        }
    }

    /// `max_l |sum_{J_l} x_j - y_l|`.
    pub fn violation(&self, x: &[f64]) -> f64 {
        self.cells
            .iter()
            .zip(&self.targets)
            .map(|(c, y)| (c.iter().map(|&j| x[j]).sum::<f64>() - y).abs())
            .fold(0.0, f64::max)
    }
}

pub struct KLInstance<O> {
    pub op: O,
    pub b: Vec<f64>,
    pub column_mass: f64,
    pub partition: Option<Partition>,
}

impl<O: LinearOperator> KLInstance<O> {
    pub fn new(op: O, b: Vec<f64>, column_mass: f64, partition: Option<Partition>) -> Result<Self> {
        if b.len() != op.nrows() {
            return input("data vector length does not match operator rows");
        }
        if b.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return input("data vector must be strictly positive; delete zero rows first");
        }
        if !(column_mass > 0.0 && column_mass.is_finite()) {
            return input("column mass must be positive");
        }
        if let Some(p) = &partition {
            if p.cells.iter().flatten().any(|&j| j >= op.ncols()) {
                return input("partition refers to unknowns beyond the operator width");
            }
        }
        Ok(Self {
            op,
            b,
            column_mass,
            partition,
        })
    }

    /// `KL(b | Ax)` including the mass of deleted rows.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; self.op.nrows()];
        self.op.apply(x, &mut ax);
        self.objective_from(x, &ax)
    }

    fn objective_from(&self, x: &[f64], ax: &[f64]) -> f64 {
        let mut s = 0.0;
        for (b, a) in self.b.iter().zip(ax) {
            if *a <= 0.0 {
                return f64::INFINITY;
            }
            s += b * (b / a).ln() - b;
        }
        s + self.column_mass * x.iter().sum::<f64>()
    }

    /// Largest violation of the first-order optimality conditions at `x`,
    /// relative to the multiplier of each cell.
    pub fn kkt_residual(&self, x: &[f64]) -> f64 {
        let (mut ax, mut u) = (vec![0.0; self.op.nrows()], vec![0.0; self.op.ncols()]);
        self.op.apply(x, &mut ax);
        let ratio: Vec<f64> = self.b.iter().zip(&ax).map(|(b, a)| b / a).collect();
        self.op.apply_transpose(&ratio, &mut u);
        let simplex;
        let part = match &self.partition {
            Some(p) => p,
            None => {
                simplex = Partition::simplex(x.len());
                &simplex
            }
        };
        let mut worst: f64 = 0.0;
        for (cell, &y) in part.cells.iter().zip(&part.targets) {
            let mass: f64 = cell.iter().map(|&j| x[j]).sum();
            let lambda = cell.iter().map(|&j| x[j] * u[j]).sum::<f64>() / mass;
            for &j in cell {
                let dual = (u[j] - lambda).max(0.0);
                let slack = x[j] * (u[j] - lambda).abs() / y;
                worst = worst.max(dual.max(slack) / lambda);
            }
        }
        worst
    }
}

/// Discrete KL divergence with `0 log 0 = 0`; `+inf` where `q_i = 0 < p_i`.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return input("kl_div arguments differ in length");
    }
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a < 0.0 || b < 0.0 {
            return input("kl_div arguments must be nonnegative");
        }
        if a > 0.0 {
            if b == 0.0 {
                return Ok(f64::INFINITY);
            }
            s += a * (a / b).ln();
        }
        s += b - a;
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 50_000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverState {
    pub x: Vec<f64>,
    pub iteration: usize,
    /// Objective at `x0` (after normalization) followed by one entry per iteration.
    pub objective_trace: Vec<f64>,
    pub constraint_trace: Vec<f64>,
    pub step_trace: Vec<f64>,
    /// Relative objective decrease of the last iteration.
    pub last_residual: f64,
    pub converged: bool,
}

impl SolverState {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }

    pub fn constraint_violation(&self) -> f64 {
        *self.constraint_trace.last().unwrap_or(&0.0)
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "iteration,kl_objective,constraint_violation,step_norm")?;
        for r in 0..self.objective_trace.len() {
            let step = if r == 0 { 0.0 } else { self.step_trace[r - 1] };
            writeln!(
                w,
                "{r},{:e},{:e},{:e}",
                self.objective_trace[r], self.constraint_trace[r], step
            )?;
        }
        Ok(())
    }
}

fn check_start(x0: &[f64], n: usize) -> Result<()> {
    if x0.len() != n {
        return input("starting vector length does not match operator columns");
    }
    if x0.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return input("starting vector must be strictly positive");
    }
    Ok(())
}

/// Shared iteration driver. `update` maps `(x, u = A^T(b/Ax))` to the next iterate.
fn run<O: LinearOperator>(
    inst: &KLInstance<O>,
    mut x: Vec<f64>,
    opts: SolverOptions,
    violation: impl Fn(&[f64]) -> f64,
    mut update: impl FnMut(&mut [f64], &[f64], usize) -> Result<()>,
) -> Result<SolverState> {
    let (rows, cols) = (inst.op.nrows(), inst.op.ncols());
    let mut ax = vec![0.0; rows];
    let mut ratio = vec![0.0; rows];
    let mut u = vec![0.0; cols];
    let mut prev = x.clone();

    inst.op.apply(&x, &mut ax);
    let mut state = SolverState {
        objective_trace: vec![inst.objective_from(&x, &ax)],
        constraint_trace: vec![violation(&x)],
        step_trace: Vec::new(),
        x: Vec::new(),
        iteration: 0,
        last_residual: f64::INFINITY,
        converged: false,
    };

    for it in 1..=opts.max_iter {
        for (i, (r, a)) in ratio.iter_mut().zip(&ax).enumerate() {
            if !(*a >= 1e-300) || !a.is_finite() {
                return Err(Error::Numerical {
                    iteration: it,
                    message: format!("predicted mass {a:e} in row {i}"),
                });
            }
            *r = inst.b[i] / a;
        }
        inst.op.apply_transpose(&ratio, &mut u);
        prev.copy_from_slice(&x);
        update(&mut x, &u, it)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                iteration: it,
                message: "non-finite iterate".into(),
            });
        }

        inst.op.apply(&x, &mut ax);
        let f = inst.objective_from(&x, &ax);
        let f_prev = *state.objective_trace.last().unwrap();
        let step = x.iter().zip(&prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        state.objective_trace.push(f);
        state.constraint_trace.push(violation(&x));
        state.step_trace.push(step);
        state.iteration = it;
        state.last_residual = (f_prev - f) / f.abs().max(1.0);
        if !f.is_finite() {
            return Err(Error::Numerical {
                iteration: it,
                message: "non-finite objective".into(),
            });
        }
        if state.last_residual <= opts.tol {
            state.converged = true;
            break;
        }
    }
    state.x = x;
    Ok(state)
}

/// EMML iteration for the simplex-constrained problem.
pub fn emml_run<O: LinearOperator>(
    inst: &KLInstance<O>,
    x0: &[f64],
    opts: SolverOptions,
) -> Result<SolverState> {
    if inst.partition.is_some() {
        return input("emml_run expects an instance without partition; use cemml_run");
    }
    check_start(x0, inst.op.ncols())?;
    let total: f64 = x0.iter().sum();
    let x: Vec<f64> = x0.iter().map(|v| v / total).collect();
    // Scaling b to mass c keeps every iterate on the simplex.
    let scale = 1.0 / inst.b.iter().sum::<f64>();
    run(
        inst,
        x,
        opts,
        |x| (x.iter().sum::<f64>() - 1.0).abs(),
        |x, u, _| {
            for (v, uj) in x.iter_mut().zip(u) {
                *v = (*v * uj * scale).max(ENTRY_FLOOR);
            }
            Ok(())
        },
    )
}

/// EMML with the mass of every partition cell held fixed.
pub fn cemml_run<O: LinearOperator>(
    inst: &KLInstance<O>,
    x0: &[f64],
    opts: SolverOptions,
) -> Result<SolverState> {
    let Some(part) = &inst.partition else {
        return input("cemml_run needs a partition");
    };
    check_start(x0, inst.op.ncols())?;
    let mut x = x0.to_vec();
    for (cell, &y) in part.cells.iter().zip(&part.targets) {
        let mass: f64 = cell.iter().map(|&j| x[j]).sum();
        for &j in cell {
            x[j] *= y / mass;
        }
    }
    run(
        inst,
        x,
        opts,
        |x| part.violation(x),
        |x, u, it| {
            for (l, (cell, &y)) in part.cells.iter().zip(&part.targets).enumerate() {
                let lambda = cell.iter().map(|&j| x[j] * u[j]).sum::<f64>() / y;
                if !(lambda > 0.0) {
                    return Err(Error::Degenerate(format!(
                        "multiplier of cell {l} vanished at iteration {it}"
                    )));
                }
                for &j in cell {
                    x[j] = (x[j] * u[j] / lambda).max(ENTRY_FLOOR);
                }
            }
            Ok(())
        },
    )
}

/// Uniform positive start; feasible for `partition` when given.
pub fn default_start(n: usize, partition: Option<&Partition>) -> Vec<f64> {
    match partition {
        None => vec![1.0 / n as f64; n],
        Some(p) => {
            let mut x = vec![0.0; n];
            for (cell, y) in p.cells.iter().zip(&p.targets) {
                for &j in cell {
                    x[j] = y / cell.len() as f64;
                }
            }
            x
        }
    }
}
