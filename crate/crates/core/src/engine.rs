//! Generic KL projection engines.
//!
//! Both engines start from the kernel and cycle through the constraint sets in
//! the order given by the caller. [`bregman_solve`] is only valid when every set
//! is affine; [`dykstra_solve`] carries one multiplicative correction per set
//! and handles general closed convex sets.
//!
//! Stopping rule: after each full cycle, the largest constraint violation
//! (sup-norm, set specific) and the sup-norm change of the iterate over the
//! cycle must both be `<= tol`.

use ndarray::{Array, Dimension};
use serde::Serialize;

use crate::error::{Error, Result};

/// Storage of an iterate: any flat, contiguous collection of nonnegative scalars.
pub trait Plan: Clone {
    fn as_flat(&self) -> &[f64];
    fn as_flat_mut(&mut self) -> &mut [f64];

    fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for x in self.as_flat_mut() {
            *x = f(*x);
        }
    }

    fn filled_like(&self, value: f64) -> Self {
        let mut out = self.clone();
        out.as_flat_mut().fill(value);
        out
    }
}

impl<D: Dimension> Plan for Array<f64, D> {
    fn as_flat(&self) -> &[f64] {
        self.as_slice_memory_order()
            .expect("plans are stored contiguously")
    }

    fn as_flat_mut(&mut self) -> &mut [f64] {
        self.as_slice_memory_order_mut()
            .expect("plans are stored contiguously")
    }
}

/// A closed convex set together with its KL projection.
pub trait ConstraintSet<P: Plan> {
    /// Replaces `plan` by its KL projection onto the set.
    fn project(&self, plan: &mut P) -> Result<()>;

    /// Same projection acting on entry-wise logarithms.
    ///
    /// The default round-trips through the linear domain and therefore offers
    /// no protection against underflow; sets used in log-domain mode override it.
    fn project_log(&self, log_plan: &mut P) -> Result<()> {
        log_plan.map_inplace(f64::exp);
        self.project(log_plan)?;
        log_plan.map_inplace(f64::ln);
        Ok(())
    }

    /// Violation of the set's defining constraint at `plan` (sup-norm).
    fn residual(&self, plan: &P) -> f64;

    fn is_affine(&self) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Store the iterate (and Dykstra corrections) as logarithms.
    pub log_domain: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 10_000,
            log_domain: false,
        }
    }
}

impl SolveOptions {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_log_domain(mut self, log_domain: bool) -> Self {
        self.log_domain = log_domain;
        self
    }
}

/// Convergence report shared by every solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub residual: f64,
    pub change: f64,
    pub converged: bool,
}

impl Diagnostics {
    /// Turns a non-converged run into [`Error::MaxIterExceeded`].
    pub fn check(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::MaxIterExceeded {
                iterations: self.iterations,
                residual: self.residual,
            })
        }
    }
}

/// Final iterate and its diagnostics. A run that hit `max_iter` still returns
/// its last iterate with `converged == false`.
#[derive(Debug, Clone)]
pub struct Solution<P> {
    pub plan: P,
    pub diagnostics: Diagnostics,
}

fn all_finite(values: &[f64], log_domain: bool) -> bool {
    if log_domain {
        values.iter().all(|x| !x.is_nan() && *x != f64::INFINITY)
    } else {
        values.iter().all(|x| x.is_finite())
    }
}

fn exp_plan<P: Plan>(plan: &P) -> P {
    let mut out = plan.clone();
    out.map_inplace(f64::exp);
    out
}

fn sup_change(a: &[f64], b: &[f64], log_domain: bool) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if log_domain {
                (x.exp() - y.exp()).abs()
            } else {
                (x - y).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// `out * |1 - old/new|` for a correction moving from `old` to `new` on an
/// entry whose projected value is `out`.
fn weighted_correction_change(old: f64, new: f64, out: f64, log: bool) -> f64 {
    if log {
        if old == new {
            return 0.0;
        }
        out.exp() * (1.0 - (old - new).exp()).abs()
    } else if new == 0.0 {
        if old == 0.0 { 0.0 } else { out }
    } else {
        out * (1.0 - old / new).abs()
    }
}

fn max_residual<P: Plan>(constraints: &[&dyn ConstraintSet<P>], plan: &P) -> f64 {
    constraints
        .iter()
        .map(|c| c.residual(plan))
        .fold(0.0, f64::max)
}

/// Cyclic KL projections onto affine sets.
pub fn bregman_solve<P: Plan>(
    kernel: &P,
    constraints: &[&dyn ConstraintSet<P>],
    opts: &SolveOptions,
) -> Result<Solution<P>> {
    bregman_solve_observed(kernel, constraints, opts, &mut |_, _| {})
}

/// [`bregman_solve`] calling `observer(cycle, plan)` after every full cycle
/// with the iterate in the linear domain.
pub fn bregman_solve_observed<P: Plan>(
    kernel: &P,
    constraints: &[&dyn ConstraintSet<P>],
    opts: &SolveOptions,
    observer: &mut dyn FnMut(usize, &P),
) -> Result<Solution<P>> {
    if let Some(index) = constraints.iter().position(|c| !c.is_affine()) {
        return Err(Error::NonAffineConstraint { index });
    }
    let start = kernel_in_domain(kernel, opts.log_domain);
    run_cycles(start, constraints, opts.log_domain, opts, None, observer)
}

/// [`bregman_solve`] in log-domain mode, starting from `log_kernel = ln(kernel)`.
/// Use this when the kernel itself would underflow. The returned plan is in
/// the linear domain.
pub fn bregman_solve_log<P: Plan>(
    log_kernel: &P,
    constraints: &[&dyn ConstraintSet<P>],
    opts: &SolveOptions,
) -> Result<Solution<P>> {
    if let Some(index) = constraints.iter().position(|c| !c.is_affine()) {
        return Err(Error::NonAffineConstraint { index });
    }
    run_cycles(log_kernel.clone(), constraints, true, opts, None, &mut |_, _| {})
}

/// Dykstra iterations with multiplicative corrections `q`:
/// `pi_n = P_n(pi_{n-1} * q_{n-L})`, `q_n = q_{n-L} * pi_{n-1} / pi_n`.
///
/// An entry the projection sends to zero gets a zero correction; multiplicative
/// projections never revive such an entry, so its correction is never used.
pub fn dykstra_solve<P: Plan>(
    kernel: &P,
    constraints: &[&dyn ConstraintSet<P>],
    opts: &SolveOptions,
) -> Result<Solution<P>> {
    dykstra_solve_observed(kernel, constraints, opts, &mut |_, _| {})
}

pub fn dykstra_solve_observed<P: Plan>(
    kernel: &P,
    constraints: &[&dyn ConstraintSet<P>],
    opts: &SolveOptions,
    observer: &mut dyn FnMut(usize, &P),
) -> Result<Solution<P>> {
    let neutral = if opts.log_domain { 0.0 } else { 1.0 };
    let corrections = vec![kernel.filled_like(neutral); constraints.len()];
    let start = kernel_in_domain(kernel, opts.log_domain);
    run_cycles(start, constraints, opts.log_domain, opts, Some(corrections), observer)
}

/// [`dykstra_solve`] in log-domain mode, starting from `log_kernel = ln(kernel)`.
/// The returned plan is in the linear domain.
pub fn dykstra_solve_log<P: Plan>(
    log_kernel: &P,
    constraints: &[&dyn ConstraintSet<P>],
    opts: &SolveOptions,
) -> Result<Solution<P>> {
    let corrections = vec![log_kernel.filled_like(0.0); constraints.len()];
    run_cycles(log_kernel.clone(), constraints, true, opts, Some(corrections), &mut |_, _| {})
}

fn run_cycles<P: Plan>(
    start: P,
    constraints: &[&dyn ConstraintSet<P>],
    log: bool,
    opts: &SolveOptions,
    mut corrections: Option<Vec<P>>,
    observer: &mut dyn FnMut(usize, &P),
) -> Result<Solution<P>> {
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {}", opts.tol)));
    }
    let mut plan = start.clone();
    let project = |c: &dyn ConstraintSet<P>, x: &mut P| {
        if log {
            c.project_log(x)
        } else {
            c.project(x)
        }
    };
    let linear = |x: &P| if log { exp_plan(x) } else { x.clone() };

    // A single set is reached by one projection.
    if constraints.len() == 1 {
        project(constraints[0], &mut plan)?;
        let lin = linear(&plan);
        observer(1, &lin);
        let residual = constraints[0].residual(&lin);
        let change = sup_change(plan.as_flat(), start.as_flat(), log);
        return Ok(Solution {
            plan: lin,
            diagnostics: Diagnostics {
                iterations: 1,
                residual,
                change,
                converged: residual <= opts.tol,
            },
        });
    }

    let mut diagnostics = Diagnostics {
        iterations: 0,
        residual: f64::INFINITY,
        change: f64::INFINITY,
        converged: false,
    };
    // Dykstra can hold every projection output still for several cycles
    // while its corrections unwind, so the change also counts correction
    // movement, weighted by the mass it acts on.
    for cycle in 1..=opts.max_iter {
        let before = plan.clone();
        let mut correction_change = 0.0f64;
        for (l, c) in constraints.iter().enumerate() {
            match corrections.as_mut() {
                None => project(*c, &mut plan)?,
                Some(qs) => {
                    let q = &mut qs[l];
                    // input = plan (*) q
                    for (x, &qv) in plan.as_flat_mut().iter_mut().zip(q.as_flat()) {
                        *x = if log { *x + qv } else { *x * qv };
                    }
                    let input = plan.clone();
                    project(*c, &mut plan)?;
                    for ((qv, &inp), &out) in q
                        .as_flat_mut()
                        .iter_mut()
                        .zip(input.as_flat())
                        .zip(plan.as_flat())
                    {
                        let old = *qv;
                        *qv = if log {
                            if out == f64::NEG_INFINITY {
                                f64::NEG_INFINITY
                            } else {
                                inp - out
                            }
                        } else if out == 0.0 {
                            0.0
                        } else {
                            inp / out
                        };
                        correction_change = correction_change.max(weighted_correction_change(old, *qv, out, log));
                    }
                }
            }
        }
        if !all_finite(plan.as_flat(), log) {
            return Err(Error::NumericalOverflow { iterations: cycle });
        }
        let lin = linear(&plan);
        observer(cycle, &lin);
        diagnostics = Diagnostics {
            iterations: cycle,
            residual: max_residual(constraints, &lin),
            change: sup_change(plan.as_flat(), before.as_flat(), log).max(correction_change),
            converged: false,
        };
        if diagnostics.residual <= opts.tol && diagnostics.change <= opts.tol {
            diagnostics.converged = true;
            return Ok(Solution { plan: lin, diagnostics });
        }
    }
    log::warn!(
        "projection engine stopped after {} cycles, residual {:.3e}",
        diagnostics.iterations,
        diagnostics.residual
    );
    Ok(Solution {
        plan: linear(&plan),
        diagnostics,
    })
}

fn kernel_in_domain<P: Plan>(kernel: &P, log: bool) -> P {
    let mut k = kernel.clone();
    if log {
        k.map_inplace(f64::ln);
    }
    k
}
