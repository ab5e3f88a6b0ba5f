//! Dense K-marginal entropic transport.
//!
//! Couplings are stored as dense `ArrayD` tensors, so sizes grow as `N^K` and
//! every constructor goes through a memory guard. The solver keeps one scaling
//! vector per marginal, `pi_j = xi_j prod_k u^k_{j_k}`, and evaluates
//! marginals by contracting the kernel against the other scalings.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, Axis, Dimension, IxDyn};

use crate::engine::{ConstraintSet, Diagnostics, SolveOptions};
use crate::error::{Error, Result};
use crate::kl::{check_nonnegative, check_simplex, scaling_ratios, sup_diff};
use crate::sets::{axis_marginal, AxisMarginal};

/// Default cap on the number of scalars in a dense tensor.
pub const DEFAULT_MEMORY_LIMIT: u128 = 100_000_000;

/// Fails with [`Error::MemoryGuard`] when a tensor of `shape` would exceed `limit` scalars.
pub fn check_memory(shape: &[usize], limit: u128) -> Result<()> {
    let requested = shape.iter().fold(1u128, |acc, &n| acc.saturating_mul(n as u128));
    if requested > limit {
        Err(Error::MemoryGuard { requested, limit })
    } else {
        Ok(())
    }
}

fn check_slot(tensor: &ArrayD<f64>, k: usize) -> Result<()> {
    if k >= tensor.ndim() {
        Err(Error::IndexOutOfRange { index: k, len: tensor.ndim() })
    } else {
        Ok(())
    }
}

/// `S_k(pi)`: sum over every index except slot `k` (0-based).
pub fn push_forward(coupling: &ArrayD<f64>, k: usize) -> Result<Array1<f64>> {
    check_slot(coupling, k)?;
    Ok(axis_marginal(coupling, k))
}

/// Rescales slot-`k` slices so that `S_k` equals `target`.
pub fn project_marginal_k(coupling: &ArrayD<f64>, k: usize, target: &Array1<f64>) -> Result<ArrayD<f64>> {
    check_slot(coupling, k)?;
    let mut out = coupling.clone();
    AxisMarginal::equal(k, target.clone()).project(&mut out)?;
    Ok(out)
}

/// Tensor with entries `f(j)` for every multi-index `j` of `shape`.
pub fn tensor_from_fn(shape: &[usize], limit: u128, f: impl Fn(&[usize]) -> f64) -> Result<ArrayD<f64>> {
    check_memory(shape, limit)?;
    Ok(ArrayD::from_shape_fn(IxDyn(shape), |j| f(j.slice())))
}

/// `exp(-C/gamma)` entry-wise.
pub fn gibbs_tensor(cost: &ArrayD<f64>, gamma: f64) -> Result<ArrayD<f64>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::NonPositiveGamma(gamma));
    }
    let out = cost.mapv(|c| (-c / gamma).exp());
    let zeros = out.iter().filter(|&&x| x == 0.0).count();
    if zeros > 0 {
        log::warn!("{zeros} tensor kernel entries underflow at gamma = {gamma:e}");
    }
    Ok(out)
}

/// Weighted Euclidean barycenter `A_j(x) = sum_k w_k x^k_{j_k}`.
fn weighted_point(points: &[Array2<f64>], weights: &[f64], j: &[usize], out: &mut [f64]) {
    out.iter_mut().for_each(|a| *a = 0.0);
    for ((x, &w), &jk) in points.iter().zip(weights).zip(j) {
        for (a, &c) in out.iter_mut().zip(x.row(jk)) {
            *a += w * c;
        }
    }
}

fn check_supports(points: &[Array2<f64>], weights: &[f64]) -> Result<usize> {
    if points.is_empty() || points.len() != weights.len() {
        return Err(Error::ShapeMismatch { expected: vec![points.len()], got: vec![weights.len()] });
    }
    check_simplex(weights)?;
    let d = points[0].ncols();
    if let Some(x) = points.iter().find(|x| x.ncols() != d) {
        return Err(Error::ShapeMismatch { expected: vec![d], got: vec![x.ncols()] });
    }
    Ok(d)
}

/// `C_j = sum_k (w_k / 2) |x^k_{j_k} - A_j(x)|^2`, where slot `k` has support
/// `points[k]` (one point per row).
pub fn barycenter_cost_tensor(points: &[Array2<f64>], weights: &[f64], limit: u128) -> Result<ArrayD<f64>> {
    let d = check_supports(points, weights)?;
    let shape: Vec<usize> = points.iter().map(|x| x.nrows()).collect();
    check_memory(&shape, limit)?;
    let mut a = vec![0.0; d];
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (j, c) in out.indexed_iter_mut() {
        let j = j.slice();
        weighted_point(points, weights, j, &mut a);
        let mut acc = 0.0;
        for ((x, &w), &jk) in points.iter().zip(weights).zip(j) {
            let sq: f64 = x.row(jk).iter().zip(&a).map(|(p, q)| (p - q).powi(2)).sum();
            acc += 0.5 * w * sq;
        }
        *c = acc;
    }
    Ok(out)
}

/// Kronecker product of vectors, first factor varying slowest.
fn kron(vectors: &[Array1<f64>]) -> Array1<f64> {
    let mut out = Array1::ones(1);
    for v in vectors {
        let prev = out;
        out = Array1::from_shape_fn(prev.len() * v.len(), |i| prev[i / v.len()] * v[i % v.len()]);
    }
    out
}

/// `sum_j tensor_j prod_{l != keep} u^l_{j_l}` grouped by `j_keep`.
pub fn contract_except(tensor: &ArrayD<f64>, scalings: &[Array1<f64>], keep: usize) -> Array1<f64> {
    let dims = tensor.shape();
    let lead: usize = dims[..keep].iter().product();
    let mid = dims[keep];
    let trail: usize = dims[keep + 1..].iter().product();
    let flat = tensor.as_standard_layout();
    let flat = flat
        .view()
        .into_shape_with_order((lead * mid, trail))
        .expect("standard layout reshapes");
    let tail = flat.dot(&kron(&scalings[keep + 1..]));
    let tail = tail.into_shape_with_order((lead, mid)).expect("sizes match");
    tail.t().dot(&kron(&scalings[..keep]))
}

#[derive(Debug, Clone)]
pub struct MultiSolution {
    pub scalings: Vec<Array1<f64>>,
    pub diagnostics: Diagnostics,
}

impl MultiSolution {
    /// Materializes `xi_j prod_k u^k_{j_k}`.
    pub fn plan(&self, kernel: &ArrayD<f64>) -> ArrayD<f64> {
        scaled_tensor(kernel, &self.scalings)
    }
}

pub(crate) fn scaled_tensor(kernel: &ArrayD<f64>, scalings: &[Array1<f64>]) -> ArrayD<f64> {
    let mut out = kernel.as_standard_layout().into_owned();
    let full = kron(scalings);
    out.iter_mut().zip(full.iter()).for_each(|(x, &s)| *x *= s);
    out
}

fn check_marginals(kernel: &ArrayD<f64>, marginals: &[Array1<f64>]) -> Result<()> {
    if kernel.ndim() != marginals.len() {
        return Err(Error::ShapeMismatch { expected: vec![kernel.ndim()], got: vec![marginals.len()] });
    }
    for (k, p) in marginals.iter().enumerate() {
        if p.len() != kernel.len_of(Axis(k)) {
            return Err(Error::ShapeMismatch { expected: vec![kernel.len_of(Axis(k))], got: vec![p.len()] });
        }
        check_nonnegative(p)?;
    }
    Ok(())
}

/// Cyclic marginal projections `k = 1..K` on the scalings.
pub fn multimarginal_solve(kernel: &ArrayD<f64>, marginals: &[Array1<f64>], opts: &SolveOptions) -> Result<MultiSolution> {
    check_marginals(kernel, marginals)?;
    let mass = marginals[0].sum();
    for p in marginals {
        let m = p.sum();
        if (m - mass).abs() > 1e-12 * m.max(mass) {
            return Err(Error::MassMismatch { left: mass, right: m });
        }
    }
    let k_count = marginals.len();
    let mut u: Vec<Array1<f64>> = marginals.iter().map(|p| Array1::ones(p.len())).collect();
    let mut last: Option<Vec<Array1<f64>>> = None;
    let mut diagnostics = Diagnostics {
        iterations: 0,
        residual: f64::INFINITY,
        change: f64::INFINITY,
        converged: false,
    };
    for it in 1..=opts.max_iter {
        let mut seen = Vec::with_capacity(k_count);
        let mut in_sweep: f64 = 0.0;
        for k in 0..k_count {
            let s = contract_except(kernel, &u, k);
            in_sweep = in_sweep.max(sup_diff(&(&s * &u[k]), &marginals[k]));
            u[k] = scaling_ratios(marginals[k].view(), s.view())?;
            seen.push(s);
        }
        if !u.iter().all(|v| v.iter().all(|x| x.is_finite())) {
            return Err(Error::NumericalOverflow { iterations: it });
        }
        let change = match &last {
            Some(prev) => prev
                .iter()
                .zip(&seen)
                .zip(&u)
                .map(|((a, b), uk)| sup_diff(&(a * uk), &(b * uk)))
                .fold(0.0, f64::max),
            None => f64::INFINITY,
        };
        let residual = if in_sweep <= opts.tol {
            marginal_residual(kernel, &u, marginals)
        } else {
            in_sweep
        };
        diagnostics = Diagnostics { iterations: it, residual, change, converged: false };
        if residual <= opts.tol && change <= opts.tol {
            diagnostics.converged = true;
            break;
        }
        last = Some(seen);
    }
    if !diagnostics.converged {
        log::warn!("multi-marginal solve stopped after {} sweeps", diagnostics.iterations);
    }
    Ok(MultiSolution { scalings: u, diagnostics })
}

/// Sup-norm violation of every marginal for the scaled kernel.
pub fn marginal_residual(kernel: &ArrayD<f64>, scalings: &[Array1<f64>], marginals: &[Array1<f64>]) -> f64 {
    (0..marginals.len())
        .map(|k| sup_diff(&(&contract_except(kernel, scalings, k) * &scalings[k]), &marginals[k]))
        .fold(0.0, f64::max)
}

/// Weighted Diracs in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPointCloud {
    /// One point per row.
    pub points: Array2<f64>,
    pub masses: Array1<f64>,
}

impl WeightedPointCloud {
    pub fn new(points: Array2<f64>, masses: Array1<f64>) -> Result<Self> {
        if points.nrows() != masses.len() {
            return Err(Error::ShapeMismatch { expected: vec![points.nrows()], got: vec![masses.len()] });
        }
        check_nonnegative(&masses)?;
        let total = masses.sum();
        if total > 1.0 + 1e-8 {
            return Err(Error::InvalidArgument(format!("point cloud mass {total} exceeds 1")));
        }
        Ok(Self { points, masses })
    }

    pub fn mass(&self) -> f64 {
        self.masses.sum()
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }
}

/// Barycentric push-forward of `coupling`: one Dirac of mass `pi_j` at
/// `A_j(x)` per entry, omitting entries below `1e-12` times the total mass.
pub fn barycenter_measure(coupling: &ArrayD<f64>, points: &[Array2<f64>], weights: &[f64]) -> Result<WeightedPointCloud> {
    let d = check_supports(points, weights)?;
    if coupling.ndim() != points.len() {
        return Err(Error::ShapeMismatch { expected: vec![points.len()], got: vec![coupling.ndim()] });
    }
    check_nonnegative(coupling)?;
    let threshold = 1e-12 * coupling.sum();
    let mut coords = Vec::new();
    let mut masses = Vec::new();
    let mut dropped = 0.0;
    let mut a = vec![0.0; d];
    for (j, &m) in coupling.indexed_iter() {
        if m == 0.0 {
            continue;
        }
        if m < threshold {
            dropped += m;
            continue;
        }
        weighted_point(points, weights, j.slice(), &mut a);
        coords.extend_from_slice(&a);
        masses.push(m);
    }
    if dropped > 0.0 {
        log::debug!("barycenter measure dropped mass {dropped:e}");
    }
    let n = masses.len();
    let pts = Array2::from_shape_vec((n, d), coords).expect("d coordinates per point");
    WeightedPointCloud::new(pts, Array1::from(masses))
}

/// Axis-aligned box split into `cells[i]` equal intervals along axis `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
}

impl GridSpec {
    /// `n^d` cells on the unit cube.
    pub fn unit(n: usize, d: usize) -> Self {
        Self { lower: vec![0.0; d], upper: vec![1.0; d], cells: vec![n; d] }
    }

    fn cell(&self, axis: usize, x: f64) -> Option<usize> {
        let n = self.cells[axis];
        let t = (x - self.lower[axis]) / (self.upper[axis] - self.lower[axis]) * n as f64;
        if !(0.0..=n as f64).contains(&t) {
            return None;
        }
        // A point on a shared edge belongs to the lower cell.
        Some((t.ceil() as usize).saturating_sub(1))
    }
}

/// Total mass of `cloud` in each grid cell, flattened row-major.
pub fn bin_point_cloud(cloud: &WeightedPointCloud, grid: &GridSpec) -> Result<Array1<f64>> {
    let d = grid.cells.len();
    if cloud.points.ncols() != d || grid.lower.len() != d || grid.upper.len() != d {
        return Err(Error::ShapeMismatch { expected: vec![d], got: vec![cloud.points.ncols()] });
    }
    let total: usize = grid.cells.iter().product();
    let mut out = Array1::zeros(total);
    for (i, (x, &m)) in cloud.points.outer_iter().zip(&cloud.masses).enumerate() {
        let mut flat = 0;
        for (axis, &c) in x.iter().enumerate() {
            let cell = grid.cell(axis, c).ok_or(Error::PointOutsideGrid { index: i })?;
            flat = flat * grid.cells[axis] + cell;
        }
        out[flat] += m;
    }
    Ok(out)
}

/// `K = 2` helper: `p ⊗ q` as a dynamic tensor.
pub fn rank_one(factors: &[ArrayView1<'_, f64>]) -> ArrayD<f64> {
    let shape: Vec<usize> = factors.iter().map(|f| f.len()).collect();
    let owned: Vec<Array1<f64>> = factors.iter().map(|f| f.to_owned()).collect();
    ArrayD::from_shape_vec(IxDyn(&shape), kron(&owned).to_vec()).expect("kron has the product length")
}
