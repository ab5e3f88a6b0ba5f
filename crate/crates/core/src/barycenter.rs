//! Entropic Wasserstein barycenters of histograms on a shared grid.
//!
//! Each input `p_k` gets its own plan `diag(u_k) K diag(v_k)`. One iteration
//! fixes the second marginals (`v_k = p_k / K^T u_k`), takes the weighted
//! geometric mean of the first marginals as the new barycenter `p`, then
//! scales every plan onto it (`u_k = p / K v_k`).

use ndarray::{Array1, Array2, Axis};

use crate::engine::{Diagnostics, SolveOptions};
use crate::error::{Error, Result};
use crate::kernel::KernelOp;
use crate::kl::{check_nonnegative, check_simplex, row_sums, scaling_ratios};

#[derive(Debug, Clone)]
pub struct BarycenterProblem {
    pub marginals: Vec<Array1<f64>>,
    pub weights: Vec<f64>,
}

impl BarycenterProblem {
    pub fn new(marginals: Vec<Array1<f64>>, weights: Vec<f64>) -> Result<Self> {
        if marginals.is_empty() {
            return Err(Error::InvalidArgument("barycenter needs at least one marginal".into()));
        }
        if marginals.len() != weights.len() {
            return Err(Error::ShapeMismatch { expected: vec![marginals.len()], got: vec![weights.len()] });
        }
        check_simplex(&weights)?;
        let n = marginals[0].len();
        let mass = marginals[0].sum();
        for p in &marginals {
            if p.len() != n {
                return Err(Error::ShapeMismatch { expected: vec![n], got: vec![p.len()] });
            }
            check_nonnegative(p)?;
            let m = p.sum();
            if (m - mass).abs() > 1e-12 * m.max(mass) {
                return Err(Error::MassMismatch { left: mass, right: m });
            }
        }
        Ok(Self { marginals, weights })
    }

    /// Uniform weights.
    pub fn uniform(marginals: Vec<Array1<f64>>) -> Result<Self> {
        let k = marginals.len().max(1);
        Self::new(marginals, vec![1.0 / k as f64; k])
    }

    pub fn len(&self) -> usize {
        self.marginals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marginals.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarycenterState {
    pub u: Vec<Array1<f64>>,
    pub v: Vec<Array1<f64>>,
    /// Current barycenter estimate.
    pub p: Array1<f64>,
    pub iterations: usize,
}

impl BarycenterState {
    /// Plan of slot `k`, `diag(u_k) K diag(v_k)`.
    pub fn plan<K: KernelOp + ?Sized>(&self, kernel: &K, k: usize) -> Array2<f64> {
        crate::entropic_ot::plan_from_scalings(&kernel.to_dense(), self.u[k].view(), self.v[k].view())
    }
}

#[derive(Debug, Clone)]
pub struct BarycenterSolution {
    pub state: BarycenterState,
    pub diagnostics: Diagnostics,
}

/// Weighted geometric mean `prod_k a_k^{w_k}`, skipping zero weights.
fn geometric_mean(vectors: &[Array1<f64>], weights: &[f64]) -> Array1<f64> {
    if let Some(k) = weights.iter().position(|&w| w == 1.0) {
        return vectors[k].clone();
    }
    let n = vectors[0].len();
    let mut log_p = Array1::<f64>::zeros(n);
    for (a, &w) in vectors.iter().zip(weights) {
        if w > 0.0 {
            log_p.zip_mut_with(a, |l, &x| *l += w * x.ln());
        }
    }
    log_p.mapv_into(f64::exp)
}

fn ratio_vec(target: &Array1<f64>, current: &Array1<f64>) -> Result<Array1<f64>> {
    scaling_ratios(target.view(), current.view())
}

/// KL projection of `(plans_k)` onto plans sharing a common row marginal,
/// weighted by `weights`. Returns the projected plans and the shared marginal.
pub fn project_shared_marginal(plans: &[Array2<f64>], weights: &[f64]) -> Result<(Vec<Array2<f64>>, Array1<f64>)> {
    if plans.is_empty() || plans.len() != weights.len() {
        return Err(Error::ShapeMismatch { expected: vec![plans.len()], got: vec![weights.len()] });
    }
    check_simplex(weights)?;
    let sums: Vec<Array1<f64>> = plans.iter().map(row_sums).collect();
    if let Some(s) = sums.iter().find(|s| s.len() != sums[0].len()) {
        return Err(Error::ShapeMismatch { expected: vec![sums[0].len()], got: vec![s.len()] });
    }
    let p = geometric_mean(&sums, weights);
    let mut out = Vec::with_capacity(plans.len());
    for (plan, s) in plans.iter().zip(&sums) {
        let f = ratio_vec(&p, s)?;
        out.push(plan * &f.insert_axis(Axis(1)));
    }
    Ok((out, p))
}

pub fn barycenter_solve<K: KernelOp + ?Sized>(
    kernel: &K,
    problem: &BarycenterProblem,
    opts: &SolveOptions,
) -> Result<BarycenterSolution> {
    barycenter_solve_observed(kernel, problem, opts, &mut |_, _| {})
}

/// [`barycenter_solve`] calling `observer(iteration, state)` after each full iteration.
///
/// Slots with zero weight stay in the iteration (their plans follow the
/// barycenter) but do not enter the geometric mean.
pub fn barycenter_solve_observed<K: KernelOp + ?Sized>(
    kernel: &K,
    problem: &BarycenterProblem,
    opts: &SolveOptions,
    observer: &mut dyn FnMut(usize, &BarycenterState),
) -> Result<BarycenterSolution> {
    let n = kernel.rows();
    if kernel.cols() != n {
        return Err(Error::ShapeMismatch { expected: vec![n, n], got: vec![kernel.rows(), kernel.cols()] });
    }
    if problem.marginals[0].len() != n {
        return Err(Error::ShapeMismatch { expected: vec![n], got: vec![problem.marginals[0].len()] });
    }
    let slots = problem.len();
    let mut state = BarycenterState {
        u: vec![Array1::ones(n); slots],
        v: vec![Array1::ones(n); slots],
        p: Array1::zeros(n),
        iterations: 0,
    };
    let mut ktu: Vec<Array1<f64>> = state.u.iter().map(|u| kernel.apply_transpose(u.view())).collect();
    let mut last_p: Option<Array1<f64>> = None;
    let mut diagnostics = Diagnostics {
        iterations: 0,
        residual: f64::INFINITY,
        change: f64::INFINITY,
        converged: false,
    };
    for it in 1..=opts.max_iter {
        let mut rows = Vec::with_capacity(slots);
        let mut kv = Vec::with_capacity(slots);
        for k in 0..slots {
            state.v[k] = ratio_vec(&problem.marginals[k], &ktu[k])?;
            let kvk = kernel.apply(state.v[k].view());
            rows.push(&state.u[k] * &kvk);
            kv.push(kvk);
        }
        state.p = geometric_mean(&rows, &problem.weights);
        let mut residual: f64 = 0.0;
        for k in 0..slots {
            state.u[k] = ratio_vec(&state.p, &kv[k])?;
            ktu[k] = kernel.apply_transpose(state.u[k].view());
            let cols = &state.v[k] * &ktu[k];
            residual = residual.max(crate::kl::sup_diff(&cols, &problem.marginals[k]));
        }
        if !state.p.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericalOverflow { iterations: it });
        }
        state.iterations = it;
        observer(it, &state);
        let change = last_p.as_ref().map_or(f64::INFINITY, |q| crate::kl::sup_diff(q, &state.p));
        diagnostics = Diagnostics { iterations: it, residual, change, converged: false };
        if residual <= opts.tol && change <= opts.tol {
            diagnostics.converged = true;
            break;
        }
        last_p = Some(state.p.clone());
    }
    if !diagnostics.converged {
        log::warn!("barycenter stopped after {} iterations, residual {:.3e}", diagnostics.iterations, diagnostics.residual);
    }
    Ok(BarycenterSolution { state, diagnostics })
}
