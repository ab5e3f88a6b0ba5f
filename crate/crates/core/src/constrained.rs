//! Transport under inequality constraints: partial transport, capacity
//! bounds and multi-marginal partial transport. The sets are convex but not
//! affine, so every solver runs Dykstra iterations.

use ndarray::{Array1, Array2, ArrayD};

use crate::engine::{dykstra_solve, ConstraintSet, Diagnostics, Solution, SolveOptions};
use crate::error::{Error, Result};
use crate::kernel::KernelOp;
use crate::kl::{check_nonnegative, col_sums, row_sums};
use crate::sets::{AxisMarginal, EntryUpperBound, TotalMass};

/// `diag(min(p / (plan 1), 1)) plan`.
pub fn project_row_leq(plan: &Array2<f64>, p: &Array1<f64>) -> Result<Array2<f64>> {
    let mut out = plan.clone();
    AxisMarginal::upper(0, p.clone()).project(&mut out)?;
    Ok(out)
}

/// `plan diag(min(q / (plan^T 1), 1))`.
pub fn project_col_leq(plan: &Array2<f64>, q: &Array1<f64>) -> Result<Array2<f64>> {
    let mut out = plan.clone();
    AxisMarginal::upper(1, q.clone()).project(&mut out)?;
    Ok(out)
}

/// `plan * m / sum(plan)`.
pub fn project_total_mass(plan: &Array2<f64>, m: f64) -> Result<Array2<f64>> {
    let mut out = plan.clone();
    TotalMass::new(m).project(&mut out)?;
    Ok(out)
}

/// `min(plan, theta)` entry-wise.
pub fn project_capacity(plan: &Array2<f64>, theta: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = plan.clone();
    EntryUpperBound::new(theta.clone()).project(&mut out)?;
    Ok(out)
}

/// Default threshold for [`active_regions`].
pub const DEFAULT_ETA: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct PartialProblem {
    pub p: Array1<f64>,
    pub q: Array1<f64>,
    /// Mass to transport.
    pub m: f64,
    pub eta: f64,
}

impl PartialProblem {
    pub fn new(p: Array1<f64>, q: Array1<f64>, m: f64) -> Result<Self> {
        check_nonnegative(&p)?;
        check_nonnegative(&q)?;
        let cap = p.sum().min(q.sum());
        if !(0.0..=cap * (1.0 + 1e-12)).contains(&m) {
            return Err(Error::InvalidArgument(format!("mass {m} outside [0, {cap}]")));
        }
        Ok(Self { p, q, m, eta: DEFAULT_ETA })
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }
}

/// Scalings of a partial-transport plan `s * diag(a) K diag(b)`.
#[derive(Debug, Clone)]
pub struct PartialSolution {
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub scale: f64,
    pub diagnostics: Diagnostics,
}

impl PartialSolution {
    pub fn plan<K: KernelOp + ?Sized>(&self, kernel: &K) -> Array2<f64> {
        crate::entropic_ot::plan_from_scalings(&kernel.to_dense(), self.a.view(), self.b.view()) * self.scale
    }

    pub fn row_marginal<K: KernelOp + ?Sized>(&self, kernel: &K) -> Array1<f64> {
        &self.a * &kernel.apply(self.b.view()) * self.scale
    }

    pub fn col_marginal<K: KernelOp + ?Sized>(&self, kernel: &K) -> Array1<f64> {
        &self.b * &kernel.apply_transpose(self.a.view()) * self.scale
    }
}

/// Factor `min(target / current, 1)` and its Dykstra correction (`1/factor`,
/// or 0 on a row the projection empties).
fn leq_step(target: f64, current: f64) -> (f64, f64) {
    if current <= target {
        (1.0, 1.0)
    } else {
        let f = target / current;
        (f, if f > 0.0 { 1.0 / f } else { 0.0 })
    }
}

/// Dykstra over `{rows <= p}`, `{cols <= q}`, `{total = m}` in that order,
/// on the scalings of the plan. Three kernel products per cycle.
pub fn partial_transport<K: KernelOp + ?Sized>(kernel: &K, problem: &PartialProblem, opts: &SolveOptions) -> Result<PartialSolution> {
    let (p, q, m) = (&problem.p, &problem.q, problem.m);
    if p.len() != kernel.rows() || q.len() != kernel.cols() {
        return Err(Error::ShapeMismatch { expected: vec![kernel.rows(), kernel.cols()], got: vec![p.len(), q.len()] });
    }
    let mut a = Array1::<f64>::ones(p.len());
    let mut b = Array1::<f64>::ones(q.len());
    let mut s = 1.0;
    if m == 0.0 {
        let zero = Diagnostics { iterations: 0, residual: 0.0, change: 0.0, converged: true };
        return Ok(PartialSolution { a, b, scale: 0.0, diagnostics: zero });
    }
    let mut corr_rows = Array1::<f64>::ones(p.len());
    let mut corr_cols = Array1::<f64>::ones(q.len());
    let mut corr_mass = 1.0;
    let mut kb = kernel.apply(b.view());
    let mut last: Option<(Array1<f64>, Array1<f64>)> = None;
    let mut diagnostics = Diagnostics { iterations: 0, residual: f64::INFINITY, change: f64::INFINITY, converged: false };
    for it in 1..=opts.max_iter {
        // Corrections can keep moving while the plan sits still, so their
        // relative change, weighted by the marginal they act on, joins the
        // change measure.
        let mut correction_change = 0.0f64;
        let moved = |old: f64, new: f64| if new == 0.0 { if old == 0.0 { 0.0 } else { 1.0 } } else { (1.0 - old / new).abs() };
        a *= &corr_rows;
        for i in 0..a.len() {
            let (f, c) = leq_step(p[i], s * a[i] * kb[i]);
            a[i] *= f;
            correction_change = correction_change.max(moved(corr_rows[i], c) * s * a[i] * kb[i]);
            corr_rows[i] = c;
        }
        b *= &corr_cols;
        let kta = kernel.apply_transpose(a.view());
        for j in 0..b.len() {
            let (f, c) = leq_step(q[j], s * b[j] * kta[j]);
            b[j] *= f;
            correction_change = correction_change.max(moved(corr_cols[j], c) * s * b[j] * kta[j]);
            corr_cols[j] = c;
        }
        s *= corr_mass;
        kb = kernel.apply(b.view());
        let total = s * a.dot(&kb);
        if !(total > 0.0) {
            return Err(Error::ZeroTotalMass { mass: m });
        }
        let g = m / total;
        s *= g;
        correction_change = correction_change.max(moved(corr_mass, 1.0 / g) * m);
        corr_mass = 1.0 / g;
        if !(s.is_finite() && a.iter().chain(b.iter()).all(|x| x.is_finite())) {
            return Err(Error::NumericalOverflow { iterations: it });
        }
        let rows = &a * &kb * s;
        let cols = &b * &kta * s;
        let residual = rows
            .iter()
            .zip(p)
            .chain(cols.iter().zip(q))
            .map(|(x, t)| (x - t).max(0.0))
            .fold(0.0, f64::max);
        let change = last
            .as_ref()
            .map_or(f64::INFINITY, |(r, c)| crate::kl::sup_diff(r, &rows).max(crate::kl::sup_diff(c, &cols)))
            .max(correction_change);
        diagnostics = Diagnostics { iterations: it, residual, change, converged: false };
        if residual <= opts.tol && change <= opts.tol {
            diagnostics.converged = true;
            break;
        }
        last = Some((rows, cols));
    }
    if !diagnostics.converged {
        log::warn!("partial transport stopped after {} cycles", diagnostics.iterations);
    }
    Ok(PartialSolution { a, b, scale: s, diagnostics })
}

/// Reference path: dense iterates through the generic Dykstra engine.
pub fn partial_transport_dense(kernel: &Array2<f64>, problem: &PartialProblem, opts: &SolveOptions) -> Result<Solution<Array2<f64>>> {
    let rows = AxisMarginal::upper(0, problem.p.clone());
    let cols = AxisMarginal::upper(1, problem.q.clone());
    let mass = TotalMass::new(problem.m);
    let sets: [&dyn ConstraintSet<Array2<f64>>; 3] = [&rows, &cols, &mass];
    dykstra_solve(kernel, &sets, opts)
}

/// Source and target cells carrying a normalized marginal of at least `eta`.
pub fn active_regions(plan: &Array2<f64>, m: f64, eta: f64) -> (Vec<bool>, Vec<bool>) {
    active_regions_from_marginals(&row_sums(plan), &col_sums(plan), m, eta)
}

pub fn active_regions_from_marginals(rows: &Array1<f64>, cols: &Array1<f64>, m: f64, eta: f64) -> (Vec<bool>, Vec<bool>) {
    if !(m > 0.0) {
        return (vec![false; rows.len()], vec![false; cols.len()]);
    }
    let mask = |v: &Array1<f64>| v.iter().map(|&x| x / m >= eta).collect();
    (mask(rows), mask(cols))
}

#[derive(Debug, Clone)]
pub struct CapacityProblem {
    pub p: Array1<f64>,
    pub q: Array1<f64>,
    pub theta: Array2<f64>,
}

impl CapacityProblem {
    pub fn new(p: Array1<f64>, q: Array1<f64>, theta: Array2<f64>) -> Result<Self> {
        crate::entropic_ot::check_masses(&p, &q)?;
        if theta.dim() != (p.len(), q.len()) {
            return Err(Error::ShapeMismatch { expected: vec![p.len(), q.len()], got: theta.shape().to_vec() });
        }
        crate::kl::check_positive(&theta)?;
        Ok(Self { p, q, theta })
    }

    /// Same bound `theta` on every entry.
    pub fn uniform_bound(p: Array1<f64>, q: Array1<f64>, theta: f64) -> Result<Self> {
        let shape = (p.len(), q.len());
        Self::new(p, q, Array2::from_elem(shape, theta))
    }
}

/// Dykstra over `{rows = p}`, `{cols = q}`, `{plan <= theta}`.
pub fn capacity_transport(kernel: &Array2<f64>, problem: &CapacityProblem, opts: &SolveOptions) -> Result<Solution<Array2<f64>>> {
    let rows = AxisMarginal::equal(0, problem.p.clone());
    let cols = AxisMarginal::equal(1, problem.q.clone());
    let cap = EntryUpperBound::new(problem.theta.clone());
    let sets: [&dyn ConstraintSet<Array2<f64>>; 3] = [&rows, &cols, &cap];
    dykstra_solve(kernel, &sets, opts)
}

/// Dykstra over `{S_k(pi) <= p_k}` for every slot, then `{sum = m}`.
pub fn multimarginal_partial(kernel: &ArrayD<f64>, marginals: &[Array1<f64>], m: f64, opts: &SolveOptions) -> Result<Solution<ArrayD<f64>>> {
    if kernel.ndim() != marginals.len() {
        return Err(Error::ShapeMismatch { expected: vec![kernel.ndim()], got: vec![marginals.len()] });
    }
    let cap = marginals.iter().map(|p| p.sum()).fold(f64::INFINITY, f64::min);
    if !(0.0..=cap * (1.0 + 1e-12)).contains(&m) {
        return Err(Error::InvalidArgument(format!("mass {m} outside [0, {cap}]")));
    }
    if m == 0.0 {
        let zero = Diagnostics { iterations: 0, residual: 0.0, change: 0.0, converged: true };
        return Ok(Solution { plan: ArrayD::zeros(kernel.raw_dim()), diagnostics: zero });
    }
    let uppers: Vec<AxisMarginal> = marginals
        .iter()
        .enumerate()
        .map(|(k, p)| AxisMarginal::upper(k, p.clone()))
        .collect();
    let mass = TotalMass::new(m);
    let mut sets: Vec<&dyn ConstraintSet<ArrayD<f64>>> = uppers.iter().map(|s| s as &dyn ConstraintSet<ArrayD<f64>>).collect();
    sets.push(&mass);
    dykstra_solve(kernel, &sets, opts)
}
