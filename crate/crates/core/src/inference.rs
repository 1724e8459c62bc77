//! Batched unpaired samples, anchor selection, and the discrete likelihood
//! problem `KL(b | A xi)` over couplings on the anchors.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::geometry::{DiscreteMeasure, MetricSpace, Point};
use crate::kernel::KernelMatrix;
use crate::seeding::{rng_for, Rng};
use crate::solver::{KLInstance, LinearOperator, Partition};
use crate::systems::System;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub xs: Vec<Point>,
    pub ys: Vec<Point>,
}

/// `N` batches of `M` samples each; the order of `ys` inside a batch carries
/// no pairing information.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDataset {
    pub system: String,
    pub seed: u64,
    pub space_x: MetricSpace,
    pub space_y: MetricSpace,
    pub batches: Vec<Batch>,
}

#[derive(Serialize, Deserialize)]
struct BatchFile {
    xs: Vec<Vec<f64>>,
    ys: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    system: String,
    seed: u64,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "M")]
    m: usize,
    dim_x: usize,
    dim_y: usize,
    periodic_x: Vec<bool>,
    periodic_y: Vec<bool>,
    bounds_x: Vec<(f64, f64)>,
    bounds_y: Vec<(f64, f64)>,
    batches: Vec<BatchFile>,
}

impl BatchDataset {
    pub fn new(
        system: String,
        seed: u64,
        space_x: MetricSpace,
        space_y: MetricSpace,
        batches: Vec<Batch>,
    ) -> Result<Self> {
        let Some(first) = batches.first() else {
            return input("dataset has no batches");
        };
        let m = first.xs.len();
        if m == 0 {
            return input("batches must be nonempty");
        }
        for (i, b) in batches.iter().enumerate() {
            if b.xs.len() != m || b.ys.len() != m {
                return input(format!("batch {i} does not have {m} inputs and outputs"));
            }
            for p in &b.xs {
                space_x.check(p)?;
            }
            for p in &b.ys {
                space_y.check(p)?;
            }
        }
        Ok(Self {
            system,
            seed,
            space_x,
            space_y,
            batches,
        })
    }

    pub fn n_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batches[0].xs.len()
    }

    /// All inputs in row order `i * M + j`.
    pub fn all_xs(&self) -> Vec<Point> {
        self.batches.iter().flat_map(|b| b.xs.iter().cloned()).collect()
    }

    pub fn all_ys(&self) -> Vec<Point> {
        self.batches.iter().flat_map(|b| b.ys.iter().cloned()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            system: self.system.clone(),
            seed: self.seed,
            n: self.n_batches(),
            m: self.batch_size(),
            dim_x: self.space_x.dim(),
            dim_y: self.space_y.dim(),
            periodic_x: self.space_x.periodic().to_vec(),
            periodic_y: self.space_y.periodic().to_vec(),
            bounds_x: self.space_x.bounds().to_vec(),
            bounds_y: self.space_y.bounds().to_vec(),
            batches: self
                .batches
                .iter()
                .map(|b| BatchFile {
                    xs: b.xs.iter().map(|p| p.coords().to_vec()).collect(),
                    ys: b.ys.iter().map(|p| p.coords().to_vec()).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: DatasetFile = serde_json::from_str(text)?;
        if f.periodic_x.len() != f.dim_x || f.periodic_y.len() != f.dim_y {
            return input("periodic flags do not match the declared dimensions");
        }
        let space_x = MetricSpace::new(f.bounds_x, f.periodic_x)?;
        let space_y = MetricSpace::new(f.bounds_y, f.periodic_y)?;
        if f.batches.len() != f.n {
            return input(format!("declared N = {} but found {} batches", f.n, f.batches.len()));
        }
        let mut batches = Vec::with_capacity(f.n);
        for b in f.batches {
            if b.xs.len() != f.m || b.ys.len() != f.m {
                return input(format!("declared M = {} does not match batch contents", f.m));
            }
            batches.push(Batch {
                xs: b.xs.into_iter().map(|c| space_x.point(c)).collect::<Result<_>>()?,
                ys: b.ys.into_iter().map(|c| space_y.point(c)).collect::<Result<_>>()?,
            });
        }
        Self::new(f.system, f.seed, space_x, space_y, batches)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Draws `n` batches of `m` i.i.d. pairs and shuffles the outputs of each batch.
pub fn generate_dataset(system: &System, n: usize, m: usize, seed: u64) -> Result<BatchDataset> {
    if n == 0 || m == 0 {
        return input("N and M must be at least 1");
    }
    system.validate()?;
    let batches = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, "dataset", i as u64);
            let (xs, mut ys): (Vec<_>, Vec<_>) = (0..m).map(|_| system.sample_pair(&mut rng)).unzip();
            ys.shuffle(&mut rng);
            Batch { xs, ys }
        })
        .collect();
    let space = system.space();
    BatchDataset::new(system.descriptor(), seed, space.clone(), space, batches)
}

/// Uniform empirical measures on all inputs and on all outputs.
pub fn pooled_measures(ds: &BatchDataset) -> Result<(DiscreteMeasure, DiscreteMeasure)> {
    Ok((
        DiscreteMeasure::uniform(ds.space_x.clone(), ds.all_xs())?,
        DiscreteMeasure::uniform(ds.space_y.clone(), ds.all_ys())?,
    ))
}

/// Finite support with positive weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl AnchorSet {
    pub fn new(points: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != weights.len() {
            return input("anchor set needs one weight per point");
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return input("anchor weights must be positive");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return input(format!("anchor weights sum to {total}"));
        }
        Ok(Self { points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn measure(&self, space: &MetricSpace) -> Result<DiscreteMeasure> {
        DiscreteMeasure::new(space.clone(), self.points.clone(), self.weights.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorStrategy {
    /// `count` draws with replacement, uniform weights.
    Uniform,
    /// Greedy max-min selection with nearest-neighbour weights.
    FurthestPoint,
}

pub fn select_anchors(
    strategy: AnchorStrategy,
    space: &MetricSpace,
    cloud: &[Point],
    count: usize,
    rng: &mut Rng,
) -> Result<AnchorSet> {
    if cloud.is_empty() || count == 0 {
        return input("anchor selection needs a nonempty cloud and count");
    }
    match strategy {
        AnchorStrategy::Uniform => {
            let points = (0..count).map(|_| cloud[rng.random_range(0..cloud.len())].clone()).collect();
            AnchorSet::new(points, vec![1.0 / count as f64; count])
        }
        AnchorStrategy::FurthestPoint => {
            let points = furthest_point_subsample(space, cloud, count, rng)?;
            let weights = nn_weights(space, &points, cloud)?;
            AnchorSet::new(points, weights)
        }
    }
}

/// Greedy k-center selection from a random start; output in selection order.
pub fn furthest_point_subsample(
    space: &MetricSpace,
    points: &[Point],
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<Point>> {
    if k > points.len() {
        return input(format!("cannot select {k} of {} points", points.len()));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| space.dist2_unchecked(p.coords(), points[chosen[0]].coords()))
        .collect();
    while chosen.len() < k {
        let (next, _) = d2
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        chosen.push(next);
        let c = points[next].coords();
        d2.par_iter_mut().zip(points).for_each(|(d, p)| {
            *d = d.min(space.dist2_unchecked(p.coords(), c));
        });
    }
    Ok(chosen.into_iter().map(|i| points[i].clone()).collect())
}

/// Fraction of the cloud whose nearest anchor (lowest index on ties) is each
/// anchor. Empty anchors get `1 / (10 |cloud|)` before renormalizing.
pub fn nn_weights(space: &MetricSpace, anchors: &[Point], cloud: &[Point]) -> Result<Vec<f64>> {
    if anchors.is_empty() || cloud.is_empty() {
        return input("nearest-neighbour weights need anchors and a cloud");
    }
    let owners: Vec<usize> = cloud
        .par_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (k, a) in anchors.iter().enumerate() {
                let d = space.dist2_unchecked(p.coords(), a.coords());
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect();
    let mut counts = vec![0usize; anchors.len()];
    for o in owners {
        counts[o] += 1;
    }
    let n = cloud.len() as f64;
    let floor = 1.0 / (10.0 * n);
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { floor } else { c as f64 / n })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Nonnegative `K x L` coupling on the anchors, stored column-major so that
/// entry `(k, l)` sits at `k + K l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub k: usize,
    pub l: usize,
    pub values: Vec<f64>,
    pub constrained: bool,
}

impl Coupling {
    /// Accepts a solver iterate; round-off in the total mass is removed.
    pub fn new(k: usize, l: usize, values: Vec<f64>, constrained: bool) -> Result<Self> {
        if values.len() != k * l || k == 0 || l == 0 {
            return input("coupling size does not match K x L");
        }
        if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return input("coupling entries must be finite and nonnegative");
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return input(format!("coupling mass is {total}, expected 1"));
        }
        Ok(Self {
            k,
            l,
            values: values.into_iter().map(|v| v / total).collect(),
            constrained,
        })
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.k, self.l, &self.values)
    }

    /// Largest deviation of the row sums from `targets`.
    pub fn row_violation(&self, targets: &[f64]) -> f64 {
        let m = self.matrix();
        (0..self.k)
            .map(|r| (m.row(r).sum() - targets[r]).abs())
            .fold(0.0, f64::max)
    }
}

/// Matrix-free `A` built from batch-summed input kernels and output kernels.
///
/// Row `(i, j)` and column `k + K l` hold
/// `scale * (sum_m Kx[(i, m), k]) * Ky[(i, j), l]`.
#[derive(Debug, Clone)]
pub struct BatchKernelOperator {
    n: usize,
    m: usize,
    k: usize,
    l: usize,
    /// `N x K`: row `i` is the batch sum of input kernel rows.
    sx: DMatrix<f64>,
    /// Transpose of `sx`.
    sx_t: DMatrix<f64>,
    /// `L x NM`: column `r` is output kernel row `r`.
    ky_t: DMatrix<f64>,
    scale: f64,
}

impl BatchKernelOperator {
    pub fn n_batches(&self) -> usize {
        self.n
    }

    pub fn batch_size(&self) -> usize {
        self.m
    }

    pub fn anchor_counts(&self) -> (usize, usize) {
        (self.k, self.l)
    }

    /// Dense copy of `A`, for tests and small problems.
    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n * self.m, self.k * self.l, |r, c| {
            let (k, l) = (c % self.k, c / self.k);
            self.scale * self.sx_t[(k, r / self.m)] * self.ky_t[(l, r)]
        })
    }
}

impl LinearOperator for BatchKernelOperator {
    fn nrows(&self) -> usize {
        self.n * self.m
    }

    fn ncols(&self) -> usize {
        self.k * self.l
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let xi = DMatrix::from_column_slice(self.k, self.l, x);
        // L x N: column i is (Sx Xi)[i, :].
        let p = (&self.sx * xi).transpose();
        out.par_chunks_mut(self.m).enumerate().for_each(|(i, chunk)| {
            let pi = p.column(i);
            for (j, o) in chunk.iter_mut().enumerate() {
                *o = self.scale * pi.dot(&self.ky_t.column(i * self.m + j));
            }
        });
    }

    fn apply_transpose(&self, r: &[f64], out: &mut [f64]) {
        let mut rt = DMatrix::<f64>::zeros(self.l, self.n);
        rt.as_mut_slice()
            .par_chunks_mut(self.l)
            .enumerate()
            .for_each(|(i, col)| {
                for j in 0..self.m {
                    let w = r[i * self.m + j];
                    for (c, v) in col.iter_mut().zip(self.ky_t.column(i * self.m + j).iter()) {
                        *c += w * v;
                    }
                }
            });
        let g = &self.sx_t * rt.transpose();
        for (o, v) in out.iter_mut().zip(g.iter()) {
            *o = self.scale * v;
        }
    }
}

/// The assembled likelihood problem together with its dimensions.
pub struct InferenceProblem {
    pub instance: KLInstance<BatchKernelOperator>,
    /// Column sums of the full operator before row deletion; all equal to one.
    pub full_column_sums: (f64, f64),
}

impl InferenceProblem {
    pub fn anchor_counts(&self) -> (usize, usize) {
        self.instance.op.anchor_counts()
    }
}

const NEGLIGIBLE: f64 = 1e-150;

/// Builds `KL(b | A xi)` with the zero rows of the data vector deleted.
///
/// `kx` rows are the pooled inputs in order `i * M + m`, `ky` rows the pooled
/// outputs. With scale `1 / (NM)^2` and `b = 1 / (NM)` the full operator has
/// unit column sums and `sum b = 1`.
pub fn assemble_problem(
    kx: &KernelMatrix,
    ky: &KernelMatrix,
    ds: &BatchDataset,
    constrained: bool,
    mu_tilde: &AnchorSet,
) -> Result<InferenceProblem> {
    let (n, m) = (ds.n_batches(), ds.batch_size());
    let nm = n * m;
    if kx.nrows() != nm || ky.nrows() != nm {
        return input(format!(
            "kernel rows ({}, {}) do not match the {nm} pooled samples",
            kx.nrows(),
            ky.nrows()
        ));
    }
    let (k, l) = (kx.ncols(), ky.ncols());
    if mu_tilde.len() != k {
        return input("input anchor weights do not match the kernel columns");
    }

    let mut sx_t = DMatrix::<f64>::zeros(k, n);
    for i in 0..n {
        for j in 0..m {
            let row = kx.values.row(i * m + j);
            for c in 0..k {
                sx_t[(c, i)] += row[c];
            }
        }
    }
    let mut ky_t = ky.values.transpose();
    // Kernel entries this small cannot affect any product at double
    // precision but would make every product subnormal and slow.
    for v in sx_t.iter_mut().chain(ky_t.iter_mut()) {
        if *v < NEGLIGIBLE {
            *v = 0.0;
        }
    }
    let scale = 1.0 / (nm as f64 * nm as f64);

    // Full column (k, l) mass factorizes into the two kernel column sums.
    let cx: DVector<f64> = kx.values.row_sum().transpose() / nm as f64;
    let cy: DVector<f64> = ky.values.row_sum().transpose() / nm as f64;
    let dev = cx
        .iter()
        .flat_map(|a| cy.iter().map(move |b| (a * b - 1.0).abs()))
        .fold(0.0, f64::max);
    if dev > 1e-6 {
        return Err(Error::Assembly(format!(
            "full column sums deviate from one by {dev:e}; kernels are not converged"
        )));
    }
    let mean = |v: &DVector<f64>| v.sum() / v.len() as f64;

    let partition = if constrained {
        let cells = (0..k).map(|kk| (0..l).map(|ll| kk + k * ll).collect()).collect();
        Some(Partition::new(cells, mu_tilde.weights.clone(), k * l)?)
    } else {
        None
    };
    let op = BatchKernelOperator {
        n,
        m,
        k,
        l,
        sx: sx_t.transpose(),
        sx_t,
        ky_t,
        scale,
    };
    Ok(InferenceProblem {
        instance: KLInstance::new(op, vec![1.0 / nm as f64; nm], 1.0, partition)?,
        full_column_sums: (mean(&cx), mean(&cy)),
    })
}

/// Pairwise summation of the sorted terms, so the result does not depend on
/// the order in which they were produced.
pub(crate) fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    pairwise_sum(&v)
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// `-(1/NM) sum_i sum_j log((1/M) sum_m q(x_m^i, y_j^i))`.
#[allow(non_snake_case)]
pub fn eval_J_empirical<Q>(q: Q, ds: &BatchDataset) -> Result<f64>
where
    Q: Fn(&Point, &Point) -> f64 + Sync,
{
    let m = ds.batch_size();
    let terms: Vec<f64> = ds
        .batches
        .par_iter()
        .flat_map_iter(|b| {
            let q = &q;
            b.ys.iter().map(move |y| {
                b.xs.iter().map(|x| q(x, y)).sum::<f64>() / m as f64
            })
        })
        .collect();
    let mut logs = Vec::with_capacity(terms.len());
    for t in terms {
        if !(t > 0.0) {
            return Err(Error::Evaluation(format!("batch average {t} is not positive")));
        }
        logs.push(t.ln());
    }
    let n = logs.len() as f64;
    Ok(-ordered_sum(logs) / n)
}

/// Permanent by Ryser's inclusion-exclusion formula.
fn permanent(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut total = 0.0;
    for s in 1u32..(1 << n) {
        let mut prod = 1.0;
        for i in 0..n {
            let row: f64 = (0..n).filter(|j| s >> j & 1 == 1).map(|j| a[(i, j)]).sum();
            prod *= row;
        }
        let sign = if (n as u32 - s.count_ones()) % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * prod;
    }
    total
}

/// `-(1/N) sum_i log((1/M!) sum_sigma prod_j q(x_j^i, y_sigma(j)^i))`.
#[allow(non_snake_case)]
pub fn eval_J_permutation<Q>(q: Q, ds: &BatchDataset) -> Result<f64>
where
    Q: Fn(&Point, &Point) -> f64 + Sync,
{
    let m = ds.batch_size();
    if m > 8 {
        return Err(Error::Unsupported(format!(
            "permutation functional needs M <= 8, got {m}"
        )));
    }
    let fact: f64 = (1..=m).map(|v| v as f64).product();
    let mut logs = Vec::with_capacity(ds.n_batches());
    for b in &ds.batches {
        let a = DMatrix::from_fn(m, m, |j, s| q(&b.xs[j], &b.ys[s]));
        let v = permanent(&a) / fact;
        if !(v > 0.0) {
            return Err(Error::Evaluation(format!("batch likelihood {v} is not positive")));
        }
        logs.push(v.ln());
    }
    let n = logs.len() as f64;
    Ok(-ordered_sum(logs) / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{sinkhorn, SinkhornOptions};
    use crate::solver::{emml_run, SolverOptions};
    use crate::systems::TorusMixtureParams;
    use rand::SeedableRng;

    fn torus(sigma: f64) -> System {
        System::Torus(TorusMixtureParams::two_bump(sigma))
    }

    #[test]
    fn single_pair_batches_keep_their_pairing() {
        let sys = torus(0.0);
        let ds = generate_dataset(&sys, 5, 1, 3).unwrap();
        for (i, b) in ds.batches.iter().enumerate() {
            let mut rng = rng_for(3, "dataset", i as u64);
            let (x, y) = sys.sample_pair(&mut rng);
            assert_eq!(b.xs[0], x);
            assert_eq!(b.ys[0], y);
        }
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let ds = generate_dataset(&torus(0.05), 4, 3, 11).unwrap();
        let again = generate_dataset(&torus(0.05), 4, 3, 11).unwrap();
        assert_eq!(ds.to_json().unwrap(), again.to_json().unwrap());
        let back = BatchDataset::from_json(&ds.to_json().unwrap()).unwrap();
        assert_eq!(back, ds);
        assert_ne!(generate_dataset(&torus(0.05), 4, 3, 12).unwrap(), ds);
    }

    #[test]
    fn loader_rejects_inconsistent_files() {
        let ds = generate_dataset(&torus(0.05), 2, 2, 1).unwrap();
        let text = ds.to_json().unwrap().replace("\"M\":2", "\"M\":3");
        assert!(matches!(BatchDataset::from_json(&text), Err(Error::Input(_))));
    }

    #[test]
    fn shuffle_is_uniform_over_permutations() {
        // Zero noise and one component: y equals x, so the permutation is
        // read off by matching.
        let sys = System::Torus(TorusMixtureParams {
            sigma: 0.0,
            shift: 0.0,
            mix: [1.0, 0.0],
            dim: 1,
        });
        let n = 100_000;
        let ds = generate_dataset(&sys, n, 3, 5).unwrap();
        let mut counts = std::collections::HashMap::new();
        for b in &ds.batches {
            let perm: Vec<usize> = b
                .ys
                .iter()
                .map(|y| b.xs.iter().position(|x| x == y).unwrap())
                .collect();
            *counts.entry(perm).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts.values() {
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn pooled_measures_are_uniform() {
        let ds = generate_dataset(&torus(0.05), 2, 3, 1).unwrap();
        let (mu, nu) = pooled_measures(&ds).unwrap();
        assert_eq!(mu.len(), 6);
        assert!(mu.weights().iter().chain(nu.weights()).all(|w| (*w - 1.0 / 6.0).abs() < 1e-15));
        let ds = generate_dataset(&torus(0.05), 1, 1, 1).unwrap();
        let (mu, _) = pooled_measures(&ds).unwrap();
        assert_eq!(mu.weights(), &[1.0]);
    }

    fn grid(space: &MetricSpace, n: usize) -> Vec<Point> {
        (0..n).map(|i| space.point(vec![i as f64 / n as f64]).unwrap()).collect()
    }

    #[test]
    fn furthest_point_basics() {
        let s = MetricSpace::unit_torus(1);
        let pts = grid(&s, 20);
        let mut rng = Rng::seed_from_u64(4);
        let all = furthest_point_subsample(&s, &pts, 20, &mut rng).unwrap();
        let mut idx: Vec<_> = all.iter().map(|p| (p.coords()[0] * 20.0).round() as usize).collect();
        idx.sort();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
        let two = furthest_point_subsample(&s, &pts, 2, &mut rng).unwrap();
        assert!((s.dist2(&two[0], &two[1]).unwrap().sqrt() - 0.5).abs() < 1e-12);
        assert!(furthest_point_subsample(&s, &pts, 21, &mut rng).is_err());
    }

    #[test]
    fn furthest_point_is_two_approximate_k_center() {
        let s = MetricSpace::open_box(vec![(0.0, 1.0), (0.0, 1.0)]).unwrap();
        let mut rng = Rng::seed_from_u64(9);
        let pts: Vec<Point> = (0..100)
            .map(|_| s.point(vec![rng.random(), rng.random()]).unwrap())
            .collect();
        let radius = |centers: &[&Point]| {
            pts.iter()
                .map(|p| centers.iter().map(|c| s.dist2(p, c).unwrap()).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max)
                .sqrt()
        };
        let chosen = furthest_point_subsample(&s, &pts, 4, &mut rng).unwrap();
        let greedy = radius(&chosen.iter().collect::<Vec<_>>());
        let mut best = f64::INFINITY;
        for a in 0..100 {
            for b in a + 1..100 {
                for c in b + 1..100 {
                    for d in c + 1..100 {
                        best = best.min(radius(&[&pts[a], &pts[b], &pts[c], &pts[d]]));
                    }
                }
            }
        }
        assert!(greedy <= 2.0 * best + 1e-12, "{greedy} vs {best}");
    }

    #[test]
    fn nearest_neighbour_weights() {
        let s = MetricSpace::unit_torus(1);
        let cloud = grid(&s, 10);
        let w = nn_weights(&s, &cloud, &cloud).unwrap();
        assert!(w.iter().all(|v| (v - 0.1).abs() < 1e-15));
        assert_eq!(nn_weights(&s, &cloud[..1], &cloud).unwrap(), vec![1.0]);

        let anchors: Vec<Point> = [0.0, 0.4, 0.8].iter().map(|&a| s.point(vec![a]).unwrap()).collect();
        let mut counts = [0usize; 3];
        for p in &cloud {
            let d: Vec<f64> = anchors.iter().map(|a| s.dist2(p, a).unwrap()).collect();
            let k = (0..3).fold(0, |b, k| if d[k] < d[b] { k } else { b });
            counts[k] += 1;
        }
        let w = nn_weights(&s, &anchors, &cloud).unwrap();
        for k in 0..3 {
            assert!((w[k] - counts[k] as f64 / 10.0).abs() < 1e-15);
        }

        // An anchor nobody is closest to keeps a small positive weight.
        let far = vec![s.point(vec![0.05]).unwrap(), s.point(vec![0.05]).unwrap()];
        let w = nn_weights(&s, &far, &cloud).unwrap();
        assert!(w[1] > 0.0 && w[1] < w[0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    struct Fixture {
        ds: BatchDataset,
        kx: KernelMatrix,
        ky: KernelMatrix,
        mu_t: AnchorSet,
    }

    fn fixture(n: usize, m: usize, k: usize, eps: f64, seed: u64) -> Fixture {
        let ds = generate_dataset(&torus(0.05), n, m, seed).unwrap();
        let (mu, nu) = pooled_measures(&ds).unwrap();
        let mut rng = rng_for(seed, "subsample", 0);
        let s = &ds.space_x;
        let ax = select_anchors(AnchorStrategy::Uniform, s, mu.points(), k, &mut rng).unwrap();
        let ay = select_anchors(AnchorStrategy::Uniform, s, nu.points(), k, &mut rng).unwrap();
        let opts = SinkhornOptions::default();
        let px = sinkhorn(&mu, &ax.measure(s).unwrap(), eps, opts).unwrap();
        let py = sinkhorn(&nu, &ay.measure(s).unwrap(), eps, opts).unwrap();
        Fixture {
            kx: px.kernel_matrix(mu.points()).unwrap(),
            ky: py.kernel_matrix(nu.points()).unwrap(),
            ds,
            mu_t: ax,
        }
    }

    #[test]
    fn operator_matches_dense_and_has_unit_full_column_sums() {
        let f = fixture(4, 3, 5, 0.01, 2);
        let pb = assemble_problem(&f.kx, &f.ky, &f.ds, false, &f.mu_t).unwrap();
        let op = &pb.instance.op;
        let dense = op.to_dense();
        let mut rng = Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..25).map(|_| rng.random()).collect();
        let r: Vec<f64> = (0..12).map(|_| rng.random()).collect();
        let (mut a1, mut a2) = (vec![0.0; 12], vec![0.0; 12]);
        op.apply(&x, &mut a1);
        dense.apply(&x, &mut a2);
        let (mut t1, mut t2) = (vec![0.0; 25], vec![0.0; 25]);
        op.apply_transpose(&r, &mut t1);
        dense.apply_transpose(&r, &mut t2);
        for (p, q) in a1.iter().zip(&a2).chain(t1.iter().zip(&t2)) {
            assert!((p - q).abs() < 1e-14 * q.abs().max(1.0));
        }

        // Rebuild the full operator over all cross-batch pairs and sum columns.
        let nm = 12.0;
        for c in 0..25 {
            let (k, l) = (c % 5, c / 5);
            let full: f64 = (0..12)
                .flat_map(|rx| (0..12).map(move |ry| (rx, ry)))
                .map(|(rx, ry)| f.kx.values[(rx, k)] * f.ky.values[(ry, l)])
                .sum::<f64>()
                / (nm * nm);
            assert!((full - 1.0).abs() < 1e-8);
        }
        assert!(pb.instance.b.iter().all(|b| (b - 1.0 / nm).abs() < 1e-15));
    }

    #[test]
    fn single_anchor_pair_gives_trivial_coupling() {
        let f = fixture(3, 2, 1, 0.01, 7);
        let pb = assemble_problem(&f.kx, &f.ky, &f.ds, true, &f.mu_t).unwrap();
        let dense = pb.instance.op.to_dense();
        assert!(dense.iter().all(|v| (v - 2.0 / 36.0).abs() < 1e-12));
    }

    #[test]
    fn unconverged_kernels_are_rejected() {
        let mut f = fixture(3, 2, 4, 0.01, 7);
        f.kx.values.column_mut(0).scale_mut(1.01);
        let err = assemble_problem(&f.kx, &f.ky, &f.ds, false, &f.mu_t).err().unwrap();
        assert!(matches!(err, Error::Assembly(_)));
    }

    /// Kernel-smoothed density from the kernel rows of two samples.
    fn q_rows(f: &Fixture, xi: &DMatrix<f64>, rx: usize, ry: usize) -> f64 {
        (f.kx.values.row(rx) * xi * f.ky.values.row(ry).transpose())[(0, 0)]
    }

    fn index_of(points: &[Point], p: &Point) -> usize {
        points.iter().position(|q| q == p).unwrap()
    }

    #[test]
    fn discrete_objective_differs_from_functional_by_a_constant() {
        let f = fixture(6, 4, 6, 0.005, 3);
        let pb = assemble_problem(&f.kx, &f.ky, &f.ds, false, &f.mu_t).unwrap();
        let (xs, ys) = (f.ds.all_xs(), f.ds.all_ys());
        let mut rng = Rng::seed_from_u64(8);
        let mut vals = Vec::new();
        for _ in 0..2 {
            let raw: Vec<f64> = (0..36).map(|_| rng.random::<f64>()).collect();
            let t: f64 = raw.iter().sum();
            let x: Vec<f64> = raw.iter().map(|v| v / t).collect();
            let xi = DMatrix::from_column_slice(6, 6, &x);
            let j = eval_J_empirical(
                |a, b| q_rows(&f, &xi, index_of(&xs, a), index_of(&ys, b)),
                &f.ds,
            )
            .unwrap();
            vals.push((pb.instance.objective(&x), j));
        }
        let d_discr = vals[0].0 - vals[1].0;
        let d_j = vals[0].1 - vals[1].1;
        assert!((d_discr - d_j).abs() < 1e-8);
        // The constant is log N under this normalization.
        assert!((vals[0].0 - vals[0].1 - 6f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn one_pair_problem_maximizes_the_smoothed_density() {
        let f = fixture(1, 1, 3, 0.01, 5);
        let pb = assemble_problem(&f.kx, &f.ky, &f.ds, false, &f.mu_t).unwrap();
        let st = emml_run(&pb.instance, &vec![1.0; 9], SolverOptions::default()).unwrap();
        let xi = DMatrix::from_column_slice(3, 3, &st.x);
        // q at the pair is a linear function of xi; its max over the simplex
        // sits at the largest product of kernel entries.
        let best = (0..9)
            .map(|c| f.kx.values[(0, c % 3)] * f.ky.values[(0, c / 3)])
            .fold(0.0, f64::max);
        assert!((q_rows(&f, &xi, 0, 0) - best).abs() < 1e-6 * best);
        let j = eval_J_empirical(|_, _| q_rows(&f, &xi, 0, 0), &f.ds).unwrap();
        assert!((j + best.ln()).abs() < 1e-6);
    }

    #[test]
    fn functional_ignores_output_order() {
        let ds = generate_dataset(&torus(0.1), 5, 4, 2).unwrap();
        let p = TorusMixtureParams::two_bump(0.1);
        let q = |a: &Point, b: &Point| p.density(a.coords(), b.coords());
        let j = eval_J_empirical(q, &ds).unwrap();
        let mut shuffled = ds.clone();
        let mut rng = Rng::seed_from_u64(0);
        for b in &mut shuffled.batches {
            b.ys.shuffle(&mut rng);
        }
        shuffled.batches.reverse();
        assert_eq!(eval_J_empirical(q, &shuffled).unwrap(), j);
        assert_eq!(eval_J_empirical(|_, _| 1.0, &ds).unwrap(), 0.0);
        assert!(eval_J_empirical(|_, _| 0.0, &ds).is_err());
    }

    #[test]
    fn permutation_functional_matches_enumeration() {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let p = TorusMixtureParams::two_bump(0.1);
        let q = |a: &Point, b: &Point| p.density(a.coords(), b.coords());
        for m in 1..=4 {
            let ds = generate_dataset(&torus(0.1), 3, m, 4).unwrap();
            let all = perms(m);
            let direct = -ds
                .batches
                .iter()
                .map(|b| {
                    let s: f64 = all
                        .iter()
                        .map(|s| (0..m).map(|j| q(&b.xs[j], &b.ys[s[j]])).product::<f64>())
                        .sum();
                    (s / all.len() as f64).ln()
                })
                .sum::<f64>()
                / 3.0;
            let v = eval_J_permutation(q, &ds).unwrap();
            assert!((v - direct).abs() < 1e-12 * direct.abs().max(1.0));
            if m == 1 {
                assert!((v - eval_J_empirical(q, &ds).unwrap()).abs() < 1e-14);
            }
        }
        let ds = generate_dataset(&torus(0.1), 1, 9, 4).unwrap();
        assert!(matches!(eval_J_permutation(q, &ds), Err(Error::Unsupported(_))));
        let ds = generate_dataset(&torus(0.1), 2, 3, 4).unwrap();
        assert!(eval_J_permutation(|_, _| 1.0, &ds).unwrap().abs() < 1e-15);
    }
}
