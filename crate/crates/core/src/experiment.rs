//! End-to-end runs: configuration, the inference pipeline, seed-replicated
//! sweeps, parametric fits and spectral clustering of fitted estimates.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{l2_error, parametric_fit, svd_cluster, Analytic, ParametricFit, SpectralResult, TransferEstimate};
use crate::error::{input, Error, Result};
use crate::geometry::DiscreteMeasure;
use crate::inference::{
    assemble_problem, generate_dataset, pooled_measures, select_anchors, AnchorSet, AnchorStrategy, BatchDataset,
    Coupling,
};
use crate::kernel::{sinkhorn, EntropicPotentials, SinkhornOptions};
use crate::seeding::rng_for;
use crate::solver::{cemml_run, default_start, emml_run, SolverOptions, SolverState};
use crate::systems::{DoubleGyreParams, System, TorusMixtureParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// Two-bump wrapped-normal mixture on the circle.
    Torus,
    /// Single wrapped normal on the 2-torus.
    Colocalization,
    DoubleGyre,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    Uniform,
    Random,
}

/// Flat run configuration; every key is optional in the JSON form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemKind,
    pub sigma: f64,
    pub shift: f64,
    pub amplitude: f64,
    pub alpha: f64,
    pub omega: f64,
    pub delta_t: f64,
    pub rk4_steps: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    pub epsilon_x: f64,
    pub epsilon_y: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub anchors: AnchorStrategy,
    pub constrained: bool,
    pub init: InitStrategy,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    /// Quadrature nodes per axis for the L2 error; 0 skips the evaluation.
    pub grid_res: usize,
    pub n_modes: usize,
    pub theta_grid: Vec<f64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = DoubleGyreParams::default();
        Self {
            system: SystemKind::Torus,
            sigma: 0.05,
            shift: 0.3,
            amplitude: g.amplitude,
            alpha: g.alpha,
            omega: g.omega,
            delta_t: g.delta_t,
            rk4_steps: g.rk4_steps,
            n: 100,
            m: 10,
            seed: 0,
            epsilon_x: 0.0025,
            epsilon_y: 0.0025,
            k: 100,
            l: 100,
            anchors: AnchorStrategy::Uniform,
            constrained: true,
            init: InitStrategy::Uniform,
            sinkhorn_tol: SinkhornOptions::default().tol,
            sinkhorn_max_iter: SinkhornOptions::default().max_iter,
            solver_tol: SolverOptions::default().tol,
            solver_max_iter: SolverOptions::default().max_iter,
            grid_res: 256,
            n_modes: 4,
            theta_grid: log_grid(0.005, 0.5, 25),
            out: PathBuf::from("out"),
        }
    }
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let r = (hi / lo).ln() / (count - 1) as f64;
    (0..count).map(|i| lo * (r * i as f64).exp()).collect()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Input(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn build_system(&self) -> System {
        match self.system {
            SystemKind::Torus => System::Torus(TorusMixtureParams {
                shift: self.shift,
                ..TorusMixtureParams::two_bump(self.sigma)
            }),
            SystemKind::Colocalization => System::Torus(TorusMixtureParams::colocalization(self.sigma)),
            SystemKind::DoubleGyre => System::Gyre(DoubleGyreParams {
                amplitude: self.amplitude,
                alpha: self.alpha,
                omega: self.omega,
                delta_t: self.delta_t,
                rk4_steps: self.rk4_steps,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.build_system().validate()?;
        if self.n == 0 || self.m == 0 || self.k == 0 || self.l == 0 {
            return input("N, M, K and L must be positive");
        }
        for (name, v) in [
            ("epsilon_x", self.epsilon_x),
            ("epsilon_y", self.epsilon_y),
            ("sinkhorn_tol", self.sinkhorn_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return input(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.solver_tol >= 0.0) || self.solver_max_iter == 0 || self.sinkhorn_max_iter == 0 {
            return input("solver tolerances and iteration caps must be valid");
        }
        if self.anchors == AnchorStrategy::FurthestPoint && self.k.max(self.l) > self.n * self.m {
            return input("furthest-point anchors cannot outnumber the samples");
        }
        if self.n_modes == 0 {
            return input("n_modes must be positive");
        }
        Ok(())
    }

    pub fn sinkhorn_options(&self) -> SinkhornOptions {
        SinkhornOptions {
            tol: self.sinkhorn_tol,
            max_iter: self.sinkhorn_max_iter,
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            max_iter: self.solver_max_iter,
            tol: self.solver_tol,
        }
    }

    pub fn generate(&self) -> Result<BatchDataset> {
        self.validate()?;
        generate_dataset(&self.build_system(), self.n, self.m, self.seed)
    }
}

/// Everything needed to re-evaluate a fitted estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultBundle {
    pub coupling: Coupling,
    pub pot_x: EntropicPotentials,
    pub pot_y: EntropicPotentials,
}

impl ResultBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }

    pub fn estimate(&self) -> Result<TransferEstimate> {
        TransferEstimate::new(self.coupling.clone(), self.pot_x.clone(), self.pot_y.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub system: String,
    pub seed: u64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub epsilon_x: f64,
    pub epsilon_y: f64,
    pub constrained: bool,
    pub sinkhorn_iterations: (usize, usize),
    pub sinkhorn_residuals: (f64, f64),
    pub final_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub constraint_residual: f64,
    pub kkt_residual: f64,
    pub l2_error: Option<f64>,
    pub l2_baseline: Option<f64>,
    pub wall_time_s: f64,
}

pub struct RunOutput {
    pub mu: DiscreteMeasure,
    pub nu: DiscreteMeasure,
    pub anchors_x: AnchorSet,
    pub anchors_y: AnchorSet,
    pub estimate: TransferEstimate,
    pub state: SolverState,
    pub summary: RunSummary,
}

impl RunOutput {
    pub fn bundle(&self) -> ResultBundle {
        ResultBundle {
            coupling: self.estimate.coupling.clone(),
            pot_x: self.estimate.pot_x.clone(),
            pot_y: self.estimate.pot_y.clone(),
        }
    }
}

/// Anchors, kernels, assembly and solve for one dataset.
pub fn run_inference(cfg: &RunConfig, ds: &BatchDataset) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let (mu, nu) = pooled_measures(ds)?;
    let (sx, sy) = (&ds.space_x, &ds.space_y);
    let anchors_x = select_anchors(cfg.anchors, sx, mu.points(), cfg.k, &mut rng_for(cfg.seed, "subsample", 0))?;
    let anchors_y = select_anchors(cfg.anchors, sy, nu.points(), cfg.l, &mut rng_for(cfg.seed, "subsample", 1))?;

    let opts = cfg.sinkhorn_options();
    let (pot_x, pot_y) = rayon::join(
        || sinkhorn(&mu, &anchors_x.measure(sx)?, cfg.epsilon_x, opts),
        || sinkhorn(&nu, &anchors_y.measure(sy)?, cfg.epsilon_y, opts),
    );
    let (pot_x, pot_y) = (pot_x?, pot_y?);
    let kx = pot_x.kernel_matrix(mu.points())?;
    let ky = pot_y.kernel_matrix(nu.points())?;
    let problem = assemble_problem(&kx, &ky, ds, cfg.constrained, &anchors_x)?;
    let inst = &problem.instance;

    let dim = cfg.k * cfg.l;
    let x0 = match cfg.init {
        InitStrategy::Uniform => default_start(dim, inst.partition.as_ref()),
        InitStrategy::Random => {
            let mut rng = rng_for(cfg.seed, "solver-init", 0);
            (0..dim).map(|_| 0.5 + rng.random::<f64>()).collect()
        }
    };
    let state = if cfg.constrained {
        cemml_run(inst, &x0, cfg.solver_options())?
    } else {
        emml_run(inst, &x0, cfg.solver_options())?
    };
    if !state.converged {
        log::warn!(
            "solver stopped at the iteration cap {} (relative decrease {:e})",
            state.iteration,
            state.last_residual
        );
    }
    let kkt = inst.kkt_residual(&state.x);
    let coupling = Coupling::new(cfg.k, cfg.l, state.x.clone(), cfg.constrained)?;
    let sink = (
        (pot_x.iterations, pot_y.iterations),
        (pot_x.residual, pot_y.residual),
    );
    let estimate = TransferEstimate::new(coupling, pot_x, pot_y)?;

    let truth = ds_truth(cfg);
    let (l2, base) = if truth.has_density() && cfg.grid_res > 0 {
        let res = grid_res_for(cfg);
        (
            Some(l2_error(&estimate, &truth, res)?),
            Some(l2_error(&Analytic(|_: &[f64], _: &[f64]| 1.0), &truth, res)?),
        )
    } else {
        (None, None)
    };

    let summary = RunSummary {
        system: ds.system.clone(),
        seed: cfg.seed,
        n: ds.n_batches(),
        m: ds.batch_size(),
        k: cfg.k,
        l: cfg.l,
        epsilon_x: cfg.epsilon_x,
        epsilon_y: cfg.epsilon_y,
        constrained: cfg.constrained,
        sinkhorn_iterations: sink.0,
        sinkhorn_residuals: sink.1,
        final_objective: state.objective(),
        iterations: state.iteration,
        converged: state.converged,
        constraint_residual: if cfg.constrained {
            estimate.coupling.row_violation(&anchors_x.weights)
        } else {
            state.constraint_violation()
        },
        kkt_residual: kkt,
        l2_error: l2,
        l2_baseline: base,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        mu,
        nu,
        anchors_x,
        anchors_y,
        estimate,
        state,
        summary,
    })
}

fn ds_truth(cfg: &RunConfig) -> crate::systems::GroundTruthDensity {
    cfg.build_system().ground_truth()
}

/// The configured resolution in 1-D; two-dimensional systems use a quarter
/// of it per axis so the grid stays tractable.
fn grid_res_for(cfg: &RunConfig) -> usize {
    match cfg.system {
        SystemKind::Colocalization => (cfg.grid_res / 4).max(1),
        _ => cfg.grid_res,
    }
}

/// Generates the dataset from the configuration and runs the pipeline.
pub fn run_config(cfg: &RunConfig) -> Result<(BatchDataset, RunOutput)> {
    let ds = cfg.generate()?;
    let out = run_inference(cfg, &ds)?;
    Ok((ds, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    N,
    M,
    #[serde(rename = "epsilon")]
    Epsilon,
    #[serde(rename = "sigma")]
    Sigma,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" => Ok(Axis::N),
            "M" => Ok(Axis::M),
            "epsilon" => Ok(Axis::Epsilon),
            "sigma" => Ok(Axis::Sigma),
            other => input(format!("unknown sweep axis {other:?}; expected N, M, epsilon or sigma")),
        }
    }
}

impl Axis {
    /// Copy of `base` with this axis set to `value`; `epsilon` sets both sides.
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                input(format!("sweep value {value} is not a positive integer"))
            }
        };
        match self {
            Axis::N => cfg.n = count()?,
            Axis::M => cfg.m = count()?,
            Axis::Epsilon => {
                cfg.epsilon_x = value;
                cfg.epsilon_y = value;
            }
            Axis::Sigma => cfg.sigma = value,
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base: RunConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub epsilon: f64,
    pub sigma: f64,
    pub l2_error: Option<f64>,
    pub iterations: Option<usize>,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepAggregate {
    pub value: f64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub failures: usize,
}

/// Runs every `(value, seed)` replicate in parallel; failures are recorded
/// per row and do not stop the sweep.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        return input("sweep needs at least one value and one seed");
    }
    let jobs: Vec<RunConfig> = spec
        .values
        .iter()
        .flat_map(|&v| {
            spec.seeds.iter().map(move |&s| {
                spec.axis.apply(&spec.base, v).map(|mut c| {
                    c.seed = s;
                    c
                })
            })
        })
        .collect::<Result<_>>()?;
    for cfg in &jobs {
        cfg.validate()?;
    }
    Ok(jobs
        .par_iter()
        .map(|cfg| {
            let t = Instant::now();
            let res = run_config(cfg);
            let mut row = SweepRow {
                seed: cfg.seed,
                n: cfg.n,
                m: cfg.m,
                epsilon: cfg.epsilon_x,
                sigma: cfg.sigma,
                l2_error: None,
                iterations: None,
                error: None,
                seconds: 0.0,
            };
            match res {
                Ok((_, out)) => {
                    row.l2_error = out.summary.l2_error;
                    row.iterations = Some(out.summary.iterations);
                }
                Err(e) => {
                    log::warn!("replicate seed {} failed: {e}", cfg.seed);
                    row.error = Some(e.to_string());
                }
            }
            row.seconds = t.elapsed().as_secs_f64();
            row
        })
        .collect())
}

fn axis_value(axis: Axis, row: &SweepRow) -> f64 {
    match axis {
        Axis::N => row.n as f64,
        Axis::M => row.m as f64,
        Axis::Epsilon => row.epsilon,
        Axis::Sigma => row.sigma,
    }
}

/// Mean and sample standard deviation of `l2_error` per axis value, in the
/// order of `values`.
pub fn aggregate(axis: Axis, values: &[f64], rows: &[SweepRow]) -> Vec<SweepAggregate> {
    values
        .iter()
        .map(|&v| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| axis_value(axis, r) == v).collect();
            let errs: Vec<f64> = sel.iter().filter_map(|r| r.l2_error).collect();
            let (mean, std) = mean_std(&errs);
            SweepAggregate {
                value: v,
                mean,
                std,
                count: errs.len(),
                failures: sel.len() - errs.len(),
            }
        })
        .collect()
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn write_aggregate_csv(path: &Path, rows: &[SweepAggregate]) -> Result<()> {
    write_csv(path, rows)
}

/// Maximum-likelihood fit of `sigma` over the torus families on one dataset.
pub fn run_parametric(cfg: &RunConfig, ds: &BatchDataset) -> Result<ParametricFit> {
    let System::Torus(base) = cfg.build_system() else {
        return Err(Error::Unsupported("parametric fits need a torus family".into()));
    };
    parametric_fit(ds, |t| base.with_sigma(t), &cfg.theta_grid)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParametricRow {
    pub seed: u64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub sigma: f64,
    pub theta_hat: Option<f64>,
    pub at_boundary: Option<bool>,
    pub error: Option<String>,
}

pub fn run_parametric_seeds(cfg: &RunConfig, seeds: &[u64]) -> Vec<ParametricRow> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = RunConfig { seed, ..cfg.clone() };
            let res = cfg.generate().and_then(|ds| run_parametric(&cfg, &ds));
            let mut row = ParametricRow {
                seed,
                n: cfg.n,
                m: cfg.m,
                sigma: cfg.sigma,
                theta_hat: None,
                at_boundary: None,
                error: None,
            };
            match res {
                Ok(fit) => {
                    row.theta_hat = Some(fit.theta_hat);
                    row.at_boundary = Some(fit.at_boundary);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}

pub fn write_parametric_csv(path: &Path, rows: &[ParametricRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn write_profile_csv(path: &Path, fit: &ParametricFit) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        theta: f64,
        objective: f64,
    }
    let rows: Vec<Row> = fit.profile.iter().map(|&(theta, objective)| Row { theta, objective }).collect();
    write_csv(path, &rows)
}

/// Singular pairs of a constrained estimate over the pooled sample points.
pub fn spectral(est: &TransferEstimate, n_modes: usize) -> Result<SpectralResult> {
    if !est.coupling.constrained {
        return input("spectral clustering needs a marginal-constrained coupling");
    }
    let (mu, nu) = (&est.pot_x.src, &est.pot_y.src);
    let q = est.q_matrix(mu.points(), nu.points())?.transpose();
    svd_cluster(&q, mu.weights(), nu.weights(), n_modes)
}

/// Writes `singular_values.csv` and `vectors.csv` (one row per sample point
/// with coordinates, vector values and partition labels).
pub fn write_spectral(dir: &Path, est: &TransferEstimate, res: &SpectralResult) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("singular_values.csv"))?;
    w.write_record(["index", "singular_value"])?;
    for (i, s) in res.singular_values.iter().enumerate() {
        w.write_record([i.to_string(), format!("{s:e}")])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("vectors.csv"))?;
    let modes = res.singular_values.len();
    let dim = est.space_x().dim();
    let mut header = vec!["side".to_string(), "index".to_string()];
    header.extend((0..dim).map(|d| format!("coord{d}")));
    for c in 0..modes {
        header.push(format!("vector{c}"));
        header.push(format!("label{c}"));
    }
    w.write_record(&header)?;
    for (side, pts, vecs, parts) in [
        ("x", est.pot_x.src.points(), &res.right_vectors, &res.right_partitions),
        ("y", est.pot_y.src.points(), &res.left_vectors, &res.left_partitions),
    ] {
        for (i, p) in pts.iter().enumerate() {
            let mut rec = vec![side.to_string(), i.to_string()];
            rec.extend(p.coords().iter().map(|c| format!("{c}")));
            for c in 0..modes {
                rec.push(format!("{:e}", vecs[(i, c)]));
                rec.push(u8::from(parts[c][i]).to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
