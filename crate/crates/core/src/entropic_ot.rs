//! Two-marginal entropic transport: Sinkhorn/IPFP scaling.
//!
//! The regularized plan is `diag(u) K diag(v)` with `K = exp(-C/gamma)`; the
//! fast path only stores `(u, v)` and touches `K` through matrix-vector
//! products. A log-domain variant keeps `log u`, `log v` and evaluates
//! log-sum-exp reductions against the cost instead of the kernel, which stays
//! accurate when `K` underflows.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use crate::engine::{bregman_solve, ConstraintSet, Diagnostics, Solution, SolveOptions};
use crate::error::{Error, Result};
use crate::kernel::{grid_centres, GibbsKernel, KernelOp};
use crate::kl::{check_nonnegative, entropy, scaling_ratio};
use crate::sets::AxisMarginal;

/// Ground cost between two point clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub entries: Array2<f64>,
    pub periodic: bool,
}

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if let Some(index) = entries.iter().position(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite cost entry at flat index {index}")));
        }
        Ok(Self { entries, periodic: false })
    }

    /// `C_ij = |x_i - y_j|^2` for row-wise point sets `x` (n x d) and `y` (m x d).
    pub fn squared_euclidean(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Self {
        let entries = Array2::from_shape_fn((x.nrows(), y.nrows()), |(i, j)| {
            x.row(i)
                .iter()
                .zip(y.row(j).iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum()
        });
        Self { entries, periodic: false }
    }

    /// Quadratic cost on the `n` cell centres of `[0, 1]`.
    pub fn grid_1d(n: usize) -> Self {
        let x = grid_centres(n);
        let entries = Array2::from_shape_fn((n, n), |(i, j)| (x[i] - x[j]).powi(2));
        Self { entries, periodic: false }
    }

    /// Quadratic cost on a circle of `n` points: `min_k (i - j + k n)^2 * scale^2`.
    pub fn periodic_1d(n: usize, scale: f64) -> Self {
        let entries = Array2::from_shape_fn((n, n), |(i, j)| {
            let d = (i as i64 - j as i64).rem_euclid(n as i64);
            let d = d.min(n as i64 - d) as f64;
            (d * scale).powi(2)
        });
        Self { entries, periodic: true }
    }

    pub fn median(&self) -> f64 {
        median(self.entries.iter().copied())
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }
}

pub(crate) fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `K = exp(-C/gamma)`, warning when entries underflow.
pub fn build_gibbs(cost: &CostMatrix, gamma: f64) -> Result<GibbsKernel> {
    GibbsKernel::new(cost.entries.clone(), gamma)
}

/// `diag(p / (plan 1)) plan`.
pub fn project_rows(plan: &Array2<f64>, p: &Array1<f64>) -> Result<Array2<f64>> {
    let mut out = plan.clone();
    AxisMarginal::equal(0, p.clone()).project(&mut out)?;
    Ok(out)
}

/// `plan diag(q / (plan^T 1))`.
pub fn project_cols(plan: &Array2<f64>, q: &Array1<f64>) -> Result<Array2<f64>> {
    let mut out = plan.clone();
    AxisMarginal::equal(1, q.clone()).project(&mut out)?;
    Ok(out)
}

/// Scaling vectors of the fast path; the plan is `diag(u) K diag(v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornState {
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    pub iterations: usize,
}

impl SinkhornState {
    pub fn plan<K: KernelOp + ?Sized>(&self, kernel: &K) -> Array2<f64> {
        plan_from_scalings(&kernel.to_dense(), self.u.view(), self.v.view())
    }

    pub fn row_marginal<K: KernelOp + ?Sized>(&self, kernel: &K) -> Array1<f64> {
        &self.u * &kernel.apply(self.v.view())
    }

    pub fn col_marginal<K: KernelOp + ?Sized>(&self, kernel: &K) -> Array1<f64> {
        &self.v * &kernel.apply_transpose(self.u.view())
    }
}

/// `diag(u) K diag(v)`.
pub fn plan_from_scalings(kernel: &Array2<f64>, u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut plan = kernel.clone();
    plan *= &u.insert_axis(Axis(1));
    plan *= &v.insert_axis(Axis(0));
    plan
}

#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub state: SinkhornState,
    pub diagnostics: Diagnostics,
}

pub(crate) fn check_masses(p: &Array1<f64>, q: &Array1<f64>) -> Result<()> {
    check_nonnegative(p)?;
    check_nonnegative(q)?;
    let (a, b) = (p.sum(), q.sum());
    if (a - b).abs() > 1e-12 * a.max(b) {
        return Err(Error::MassMismatch { left: a, right: b });
    }
    Ok(())
}

fn ratios_into(target: &Array1<f64>, current: &Array1<f64>, out: &mut Array1<f64>) -> Result<()> {
    for (i, ((o, &t), &c)) in out.iter_mut().zip(target).zip(current).enumerate() {
        *o = scaling_ratio(t, c, i)?;
    }
    Ok(())
}

fn sup_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Sinkhorn iterations `u = p / (K v)`, `v = q / (K^T u)` starting from `v = 1`.
///
/// The column marginal is exact after every iteration; the reported residual
/// is the sup-norm row violation and the change is the sup-norm change of the
/// row marginal between iterations.
pub fn sinkhorn<K: KernelOp + ?Sized>(
    kernel: &K,
    p: &Array1<f64>,
    q: &Array1<f64>,
    opts: &SolveOptions,
) -> Result<SinkhornSolution> {
    sinkhorn_observed(kernel, p, q, opts, &mut |_, _, _| {})
}

/// [`sinkhorn`] calling `observer(iteration, u, v)` after each `(u, v)` update.
pub fn sinkhorn_observed<K: KernelOp + ?Sized>(
    kernel: &K,
    p: &Array1<f64>,
    q: &Array1<f64>,
    opts: &SolveOptions,
    observer: &mut dyn FnMut(usize, ArrayView1<'_, f64>, ArrayView1<'_, f64>),
) -> Result<SinkhornSolution> {
    if p.len() != kernel.rows() || q.len() != kernel.cols() {
        return Err(Error::ShapeMismatch {
            expected: vec![kernel.rows(), kernel.cols()],
            got: vec![p.len(), q.len()],
        });
    }
    check_masses(p, q)?;
    let mut u = Array1::<f64>::ones(p.len());
    let mut v = Array1::<f64>::ones(q.len());
    let mut kv = kernel.apply(v.view());
    let mut last_rows: Option<Array1<f64>> = None;
    let mut diagnostics = Diagnostics {
        iterations: 0,
        residual: f64::INFINITY,
        change: f64::INFINITY,
        converged: false,
    };
    for it in 1..=opts.max_iter {
        ratios_into(p, &kv, &mut u)?;
        let ktu = kernel.apply_transpose(u.view());
        ratios_into(q, &ktu, &mut v)?;
        if !u.iter().chain(v.iter()).all(|x| x.is_finite()) {
            return Err(Error::NumericalOverflow { iterations: it });
        }
        observer(it, u.view(), v.view());
        kv = kernel.apply(v.view());
        let rows = &u * &kv;
        let residual = sup_abs_diff(&rows, p);
        let change = last_rows.as_ref().map_or(f64::INFINITY, |r| sup_abs_diff(r, &rows));
        diagnostics = Diagnostics { iterations: it, residual, change, converged: false };
        if residual <= opts.tol && change <= opts.tol {
            diagnostics.converged = true;
            break;
        }
        last_rows = Some(rows);
    }
    if !diagnostics.converged {
        log::warn!("sinkhorn stopped after {} iterations, residual {:.3e}", diagnostics.iterations, diagnostics.residual);
    }
    Ok(SinkhornSolution {
        state: SinkhornState { u, v, iterations: diagnostics.iterations },
        diagnostics,
    })
}

/// Log-scalings of the log-domain path; the plan is `exp(log_u_i + log_v_j - C_ij/gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSinkhornState {
    pub log_u: Array1<f64>,
    pub log_v: Array1<f64>,
    pub gamma: f64,
    pub iterations: usize,
}

impl LogSinkhornState {
    pub fn plan(&self, cost: &CostMatrix) -> Array2<f64> {
        Array2::from_shape_fn(cost.entries.dim(), |(i, j)| {
            (self.log_u[i] + self.log_v[j] - cost.entries[[i, j]] / self.gamma).exp()
        })
    }
}

#[derive(Debug, Clone)]
pub struct LogSinkhornSolution {
    pub state: LogSinkhornState,
    pub diagnostics: Diagnostics,
}

/// Row-wise `log sum_j exp(offset_j - C_ij/gamma)`.
fn lse_rows(cost: &Array2<f64>, gamma: f64, offset: &Array1<f64>) -> Array1<f64> {
    Array1::from_iter(cost.outer_iter().map(|row| {
        let mut max = f64::NEG_INFINITY;
        for (c, o) in row.iter().zip(offset) {
            max = max.max(o - c / gamma);
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        let s: f64 = row.iter().zip(offset).map(|(c, o)| (o - c / gamma - max).exp()).sum();
        max + s.ln()
    }))
}

fn log_ratio(target: &Array1<f64>, lse: &Array1<f64>, out: &mut Array1<f64>) -> Result<()> {
    for (i, ((o, &t), &l)) in out.iter_mut().zip(target).zip(lse).enumerate() {
        *o = if l == f64::NEG_INFINITY {
            if t == 0.0 {
                f64::NEG_INFINITY
            } else {
                return Err(Error::InfeasibleZeroSlice { index: i, target: t });
            }
        } else {
            t.ln() - l
        };
    }
    Ok(())
}

/// Log-domain Sinkhorn on the cost directly.
pub fn sinkhorn_log(
    cost: &CostMatrix,
    gamma: f64,
    p: &Array1<f64>,
    q: &Array1<f64>,
    opts: &SolveOptions,
) -> Result<LogSinkhornSolution> {
    if !(gamma > 0.0) {
        return Err(Error::NonPositiveGamma(gamma));
    }
    let c = &cost.entries;
    if p.len() != c.nrows() || q.len() != c.ncols() {
        return Err(Error::ShapeMismatch {
            expected: vec![c.nrows(), c.ncols()],
            got: vec![p.len(), q.len()],
        });
    }
    check_masses(p, q)?;
    let ct = c.t().to_owned();
    let mut log_u = Array1::<f64>::zeros(p.len());
    let mut log_v = Array1::<f64>::zeros(q.len());
    let mut lse_u = lse_rows(c, gamma, &log_v);
    let mut last_rows: Option<Array1<f64>> = None;
    let mut diagnostics = Diagnostics {
        iterations: 0,
        residual: f64::INFINITY,
        change: f64::INFINITY,
        converged: false,
    };
    for it in 1..=opts.max_iter {
        log_ratio(p, &lse_u, &mut log_u)?;
        let lse_v = lse_rows(&ct, gamma, &log_u);
        log_ratio(q, &lse_v, &mut log_v)?;
        if log_u.iter().chain(log_v.iter()).any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::NumericalOverflow { iterations: it });
        }
        lse_u = lse_rows(c, gamma, &log_v);
        let rows = Array1::from_iter(log_u.iter().zip(&lse_u).map(|(a, b)| (a + b).exp()));
        let residual = sup_abs_diff(&rows, p);
        let change = last_rows.as_ref().map_or(f64::INFINITY, |r| sup_abs_diff(r, &rows));
        diagnostics = Diagnostics { iterations: it, residual, change, converged: false };
        if residual <= opts.tol && change <= opts.tol {
            diagnostics.converged = true;
            break;
        }
        last_rows = Some(rows);
    }
    Ok(LogSinkhornSolution {
        state: LogSinkhornState { log_u, log_v, gamma, iterations: diagnostics.iterations },
        diagnostics,
    })
}

/// Reference path: dense iterates through the generic Bregman engine.
pub fn sinkhorn_dense(
    kernel: &Array2<f64>,
    p: &Array1<f64>,
    q: &Array1<f64>,
    opts: &SolveOptions,
) -> Result<Solution<Array2<f64>>> {
    check_masses(p, q)?;
    let rows = AxisMarginal::equal(0, p.clone());
    let cols = AxisMarginal::equal(1, q.clone());
    let sets: [&dyn ConstraintSet<Array2<f64>>; 2] = [&rows, &cols];
    bregman_solve(kernel, &sets, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransportCost {
    /// `<C, pi>`.
    pub linear: f64,
    /// `<C, pi> - gamma E(pi)`.
    pub regularized: f64,
}

pub fn transport_cost(plan: &Array2<f64>, cost: &CostMatrix, gamma: f64) -> Result<TransportCost> {
    crate::kl::check_same_shape(plan, &cost.entries)?;
    let linear = (plan * &cost.entries).sum();
    let regularized = linear - gamma * entropy(plan)?;
    Ok(TransportCost { linear, regularized })
}
