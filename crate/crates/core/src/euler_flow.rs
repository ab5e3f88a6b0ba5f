//! Generalized incompressible Euler flows on a 1-D grid.
//!
//! The flow is a K-marginal transport problem with uniform marginals whose
//! kernel factors along a cycle of time steps:
//! `xi_j = prod_{k<K} xi0[j_k, j_{k+1}] * xi1[j_K, j_1]`, where `xi1` closes the
//! cycle through the final map `sigma`. With `M_k = diag(u^k) W_k`, every
//! marginal is the diagonal of a cyclic product of N x N matrices, so the
//! solver never forms the N^K tensor.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn, Zip};

use crate::engine::{Diagnostics, SolveOptions};
use crate::error::{Error, Result};
use crate::kernel::grid_centres;
use crate::kl::sup_diff;
use crate::multimarginal::check_memory;

/// Final configuration maps on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EulerMap {
    Identity,
    /// `x -> min(2x, 2 - 2x)`.
    Fold,
    /// `x -> (x + 1/2) mod 1`.
    HalfShift,
    /// `x -> 1 - x`.
    Reverse,
}

impl EulerMap {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            EulerMap::Identity => x,
            EulerMap::Fold => (2.0 * x).min(2.0 - 2.0 * x),
            EulerMap::HalfShift => (x + 0.5).rem_euclid(1.0),
            EulerMap::Reverse => 1.0 - x,
        }
    }

    /// Discrete permutation of the `n` cell centres: `sigma(i)` is the rank of
    /// the image of `x_i` among all images (ties broken by index).
    pub fn permutation(self, n: usize) -> Vec<usize> {
        let x = grid_centres(n);
        permutation_from_images(&x.mapv(|t| self.apply(t)))
    }
}

impl std::str::FromStr for EulerMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(EulerMap::Identity),
            "fold" => Ok(EulerMap::Fold),
            "shift" | "half-shift" => Ok(EulerMap::HalfShift),
            "invert" | "reverse" => Ok(EulerMap::Reverse),
            other => Err(Error::InvalidArgument(format!("unknown map '{other}'"))),
        }
    }
}

/// Rank permutation of `images` (stable in the index).
pub fn permutation_from_images(images: &Array1<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.sort_by(|&a, &b| images[a].total_cmp(&images[b]).then(a.cmp(&b)));
    let mut sigma = vec![0; images.len()];
    for (rank, &i) in order.iter().enumerate() {
        sigma[i] = rank;
    }
    sigma
}

fn check_permutation(sigma: &[usize], n: usize) -> Result<()> {
    if sigma.len() != n {
        return Err(Error::InvalidPermutation(format!("length {} on a grid of {n}", sigma.len())));
    }
    let mut seen = vec![false; n];
    for &s in sigma {
        if s >= n || seen[s] {
            return Err(Error::InvalidPermutation(format!("{s} is out of range or repeated")));
        }
        seen[s] = true;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FactoredEulerKernel {
    /// `exp(-|x_a - x_b|^2 / gamma)`.
    pub xi0: Array2<f64>,
    /// `xi1[b, a] = exp(-|x_b - x_{sigma(a)}|^2 / gamma)`.
    pub xi1: Array2<f64>,
    /// `-|x_a - x_b|^2 / gamma`, kept exactly for log-domain runs.
    pub log_xi0: Array2<f64>,
    pub log_xi1: Array2<f64>,
    pub sigma: Vec<usize>,
    pub steps: usize,
    pub gamma: f64,
}

impl FactoredEulerKernel {
    pub fn n(&self) -> usize {
        self.xi0.nrows()
    }

    /// Link matrix between time step `k` and `k + 1` (cyclically), 0-based.
    pub fn link(&self, k: usize) -> &Array2<f64> {
        if k + 1 < self.steps {
            &self.xi0
        } else {
            &self.xi1
        }
    }

    fn log_link(&self, k: usize) -> &Array2<f64> {
        if k + 1 < self.steps {
            &self.log_xi0
        } else {
            &self.log_xi1
        }
    }

    /// Dense `N^K` kernel, for validation on tiny problems.
    pub fn dense(&self, limit: u128) -> Result<ArrayD<f64>> {
        let shape = vec![self.n(); self.steps];
        check_memory(&shape, limit)?;
        Ok(ArrayD::from_shape_fn(IxDyn(&shape), |j| {
            (0..self.steps).map(|k| self.link(k)[[j[k], j[(k + 1) % self.steps]]]).product()
        }))
    }
}

/// Builds the factored kernel on 1-D `points` with final permutation `sigma`.
pub fn build_euler_kernel(points: &Array1<f64>, sigma: &[usize], steps: usize, gamma: f64) -> Result<FactoredEulerKernel> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::NonPositiveGamma(gamma));
    }
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("an Euler flow needs at least 2 time steps, got {steps}")));
    }
    let n = points.len();
    check_permutation(sigma, n)?;
    let log_xi0 = Array2::from_shape_fn((n, n), |(a, b)| -(points[a] - points[b]).powi(2) / gamma);
    let log_xi1 = Array2::from_shape_fn((n, n), |(b, a)| -(points[b] - points[sigma[a]]).powi(2) / gamma);
    let xi0 = log_xi0.mapv(f64::exp);
    let xi1 = log_xi1.mapv(f64::exp);
    Ok(FactoredEulerKernel { xi0, xi1, log_xi0, log_xi1, sigma: sigma.to_vec(), steps, gamma })
}

/// How suffix products are obtained within a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SweepStrategy {
    /// Keep all K suffix products: about 2K matrix products per sweep, K N^2 memory.
    Cached,
    /// Rebuild each suffix: about K^2/2 products per sweep, O(N^2) memory.
    #[default]
    Recompute,
}

#[derive(Debug, Clone)]
pub struct EulerScalings {
    /// `exp(log_u)`; entries may leave the floating-point range at small gamma.
    pub u: Vec<Array1<f64>>,
    /// Logarithms of the scalings, set by log-domain runs.
    pub log_u: Option<Vec<Array1<f64>>>,
    pub diagnostics: Diagnostics,
}

/// Matrix arithmetic of one sweep: plain products, or log-sum-exp products
/// on log-kernels and log-scalings.
trait Arith {
    fn link<'a>(&self, kernel: &'a FactoredEulerKernel, k: usize) -> &'a Array2<f64>;
    /// `W diag(u)`.
    fn scale_cols(&self, w: &Array2<f64>, u: &Array1<f64>) -> Array2<f64>;
    /// `diag(u) W`.
    fn scale_rows(&self, w: &Array2<f64>, u: &Array1<f64>) -> Array2<f64>;
    fn mul(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64>;
    fn diag(&self, a: &Array2<f64>) -> Array1<f64> {
        a.diag().to_owned()
    }
    /// `diag(a b)`.
    fn diag_product(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array1<f64>;
    /// New scaling for a diagonal `d`, or `None` on an empty slice.
    fn update(&self, target: f64, d: f64) -> Option<f64>;
    /// Marginal mass `u * d`.
    fn marginal(&self, u: f64, d: f64) -> f64;
}

struct Linear;
struct Log;

impl Arith for Linear {
    fn link<'a>(&self, kernel: &'a FactoredEulerKernel, k: usize) -> &'a Array2<f64> {
        kernel.link(k)
    }
    fn scale_cols(&self, w: &Array2<f64>, u: &Array1<f64>) -> Array2<f64> {
        w * &u.view().insert_axis(Axis(0))
    }
    fn scale_rows(&self, w: &Array2<f64>, u: &Array1<f64>) -> Array2<f64> {
        w * &u.view().insert_axis(Axis(1))
    }
    fn mul(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        a.dot(b)
    }
    fn diag_product(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
        let mut d = Array1::zeros(a.nrows());
        Zip::from(&mut d)
            .and(a.rows())
            .and(b.columns())
            .for_each(|d, r, c| *d = r.dot(&c));
        d
    }
    fn update(&self, target: f64, d: f64) -> Option<f64> {
        (d > 0.0).then(|| target / d)
    }
    fn marginal(&self, u: f64, d: f64) -> f64 {
        u * d
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let top = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + values.map(|v| (v - top).exp()).sum::<f64>().ln()
}

impl Arith for Log {
    fn link<'a>(&self, kernel: &'a FactoredEulerKernel, k: usize) -> &'a Array2<f64> {
        kernel.log_link(k)
    }
    fn scale_cols(&self, w: &Array2<f64>, u: &Array1<f64>) -> Array2<f64> {
        w + &u.view().insert_axis(Axis(0))
    }
    fn scale_rows(&self, w: &Array2<f64>, u: &Array1<f64>) -> Array2<f64> {
        w + &u.view().insert_axis(Axis(1))
    }
    /// Shifts rows of `a` and columns of `b` to a zero maximum and uses a
    /// plain product; entries that underflow there are summed exactly.
    fn mul(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let row_max = a.map_axis(Axis(1), |r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v)));
        let col_max = b.map_axis(Axis(0), |c| c.fold(f64::NEG_INFINITY, |m, &v| m.max(v)));
        let shift = |v: f64, m: f64| if m == f64::NEG_INFINITY { 0.0 } else { (v - m).exp() };
        let ea = Array2::from_shape_fn(a.dim(), |(i, k)| shift(a[[i, k]], row_max[i]));
        let eb = Array2::from_shape_fn(b.dim(), |(k, j)| shift(b[[k, j]], col_max[j]));
        let mut out = ea.dot(&eb);
        for ((i, j), v) in out.indexed_iter_mut() {
            *v = if *v > 1e-280 {
                row_max[i] + col_max[j] + v.ln()
            } else {
                log_sum_exp(a.row(i).iter().zip(b.column(j)).map(|(x, y)| x + y))
            };
        }
        out
    }
    fn diag_product(&self, a: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
        Array1::from_shape_fn(a.nrows(), |i| log_sum_exp(a.row(i).iter().zip(b.column(i)).map(|(x, y)| x + y)))
    }
    fn update(&self, target: f64, d: f64) -> Option<f64> {
        (d > f64::NEG_INFINITY).then(|| target.ln() - d)
    }
    fn marginal(&self, u: f64, d: f64) -> f64 {
        (u + d).exp()
    }
}

/// `W_k M_{k+1} ... M_{K-1}` from the right end.
fn suffix(ar: &dyn Arith, kernel: &FactoredEulerKernel, u: &[Array1<f64>], k: usize) -> Array2<f64> {
    let last = kernel.steps - 1;
    let mut r = ar.link(kernel, last).clone();
    for l in (k..last).rev() {
        r = ar.mul(&ar.scale_cols(ar.link(kernel, l), &u[l + 1]), &r);
    }
    r
}

fn all_suffixes_reversed(ar: &dyn Arith, kernel: &FactoredEulerKernel, u: &[Array1<f64>]) -> Vec<Array2<f64>> {
    let last = kernel.steps - 1;
    let mut out = Vec::with_capacity(kernel.steps);
    out.push(ar.link(kernel, last).clone());
    for l in (0..last).rev() {
        let next = ar.mul(&ar.scale_cols(ar.link(kernel, l), &u[l + 1]), out.last().expect("non-empty"));
        out.push(next);
    }
    out
}

/// One Gauss-Seidel pass over `k = 0..K`. Returns the marginal of each slot
/// seen right before its update; with `update == false` these are the exact
/// marginals of the current scalings.
fn sweep(
    ar: &dyn Arith,
    kernel: &FactoredEulerKernel,
    u: &mut [Array1<f64>],
    strategy: SweepStrategy,
    update: bool,
) -> Result<Vec<Array1<f64>>> {
    let steps = kernel.steps;
    let target = 1.0 / kernel.n() as f64;
    let mut cached = match strategy {
        SweepStrategy::Cached => all_suffixes_reversed(ar, kernel, u),
        SweepStrategy::Recompute => Vec::new(),
    };
    let mut prefix: Option<Array2<f64>> = None;
    let mut seen = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = match strategy {
            SweepStrategy::Cached => cached.pop().expect("one suffix per step"),
            SweepStrategy::Recompute => suffix(ar, kernel, u, k),
        };
        let d = match &prefix {
            None => ar.diag(&t),
            Some(p) => ar.diag_product(&t, p),
        };
        drop(t);
        seen.push(Zip::from(&u[k]).and(&d).map_collect(|&uk, &dk| ar.marginal(uk, dk)));
        if update {
            for (i, (uk, &dk)) in u[k].iter_mut().zip(d.iter()).enumerate() {
                *uk = ar.update(target, dk).ok_or(Error::InfeasibleZeroSlice { index: i, target })?;
            }
        }
        if k + 1 < steps {
            prefix = Some(match prefix.take() {
                None => ar.scale_rows(ar.link(kernel, k), &u[k]),
                Some(p) => ar.mul(&ar.scale_cols(&p, &u[k]), ar.link(kernel, k)),
            });
        }
    }
    Ok(seen)
}

/// Rescales `u^2..u^K` to unit maximum, moving the factor into `u^1`.
fn fix_gauge(u: &mut [Array1<f64>], log: bool) {
    let (first, rest) = u.split_first_mut().expect("at least two steps");
    for v in rest {
        let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if log {
            if m.is_finite() {
                v.mapv_inplace(|x| x - m);
                first.mapv_inplace(|x| x + m);
            }
        } else if m > 0.0 && m.is_finite() {
            v.mapv_inplace(|x| x / m);
            first.mapv_inplace(|x| x * m);
        }
    }
}

/// IPFP on the factored kernel with the default sweep strategy.
pub fn ipfp_factored(kernel: &FactoredEulerKernel, opts: &SolveOptions) -> Result<EulerScalings> {
    ipfp_factored_with(kernel, opts, SweepStrategy::default())
}

/// IPFP on the factored kernel: `u^k = (1/N) / diag(W_k M_{k+1} ... M_{k-1})`
/// for `k = 1..K` in turn, each update using the latest neighbours. With
/// `opts.log_domain` all products are log-sum-exp products, which keeps
/// small-gamma runs with large displacements representable.
pub fn ipfp_factored_with(kernel: &FactoredEulerKernel, opts: &SolveOptions, strategy: SweepStrategy) -> Result<EulerScalings> {
    let n = kernel.n();
    let log = opts.log_domain;
    let ar: &dyn Arith = if log { &Log } else { &Linear };
    let target = Array1::from_elem(n, 1.0 / n as f64);
    let mut u = vec![Array1::from_elem(n, if log { 0.0 } else { 1.0 }); kernel.steps];
    let mut last: Option<Vec<Array1<f64>>> = None;
    let mut diagnostics = Diagnostics {
        iterations: 0,
        residual: f64::INFINITY,
        change: f64::INFINITY,
        converged: false,
    };
    for it in 1..=opts.max_iter {
        let seen = sweep(ar, kernel, &mut u, strategy, true)?;
        fix_gauge(&mut u, log);
        if !u.iter().all(|v| v.iter().all(|x| x.is_finite())) {
            return Err(Error::NumericalOverflow { iterations: it });
        }
        let in_sweep = seen.iter().map(|m| sup_diff(m, &target)).fold(0.0, f64::max);
        let change = last.as_ref().map_or(f64::INFINITY, |prev| {
            prev.iter().zip(&seen).map(|(a, b)| sup_diff(a, b)).fold(0.0, f64::max)
        });
        last = Some(seen);
        let residual = if in_sweep <= opts.tol && change <= opts.tol {
            let mut copy = u.clone();
            sweep(ar, kernel, &mut copy, strategy, false)?
                .iter()
                .map(|m| sup_diff(m, &target))
                .fold(0.0, f64::max)
        } else {
            in_sweep
        };
        diagnostics = Diagnostics { iterations: it, residual, change, converged: false };
        if residual <= opts.tol && change <= opts.tol {
            diagnostics.converged = true;
            break;
        }
    }
    // A last first-slot update makes the first marginal uniform to round-off.
    let d = ar.diag(&suffix(ar, kernel, &u, 0));
    u[0] = d.mapv(|x| ar.update(1.0 / n as f64, x).unwrap_or(if log { f64::NEG_INFINITY } else { 0.0 }));
    if !diagnostics.converged {
        log::warn!("euler flow stopped after {} sweeps, residual {:.3e}", diagnostics.iterations, diagnostics.residual);
    }
    if log {
        let linear = u.iter().map(|v| v.mapv(f64::exp)).collect();
        Ok(EulerScalings { u: linear, log_u: Some(u), diagnostics })
    } else {
        Ok(EulerScalings { u, log_u: None, diagnostics })
    }
}

impl EulerScalings {
    fn arith(&self) -> (&dyn Arith, &[Array1<f64>]) {
        match &self.log_u {
            Some(lu) => (&Log, lu),
            None => (&Linear, &self.u),
        }
    }
}

/// Marginal of every time step for the given scalings.
pub fn factored_marginals(kernel: &FactoredEulerKernel, u: &[Array1<f64>]) -> Vec<Array1<f64>> {
    let mut copy = u.to_vec();
    sweep(&Linear, kernel, &mut copy, SweepStrategy::default(), false).expect("no division without updates")
}

/// Marginal of every time step, in the domain the scalings were solved in.
pub fn scalings_marginals(kernel: &FactoredEulerKernel, scalings: &EulerScalings) -> Vec<Array1<f64>> {
    let (ar, u) = scalings.arith();
    let mut copy = u.to_vec();
    sweep(ar, kernel, &mut copy, SweepStrategy::default(), false).expect("no division without updates")
}

/// Two-time transition matrix between time 1 and time `step + 1` (0-based
/// `step`): `(M_1 ... M_step) ⊙ (M_{step+1} ... M_K)^T`.
pub fn transition_matrix(scalings: &EulerScalings, kernel: &FactoredEulerKernel, step: usize) -> Result<Array2<f64>> {
    let steps = kernel.steps;
    if step >= steps {
        return Err(Error::IndexOutOfRange { index: step, len: steps });
    }
    let (ar, u) = scalings.arith();
    let log = scalings.log_u.is_some();
    let mut back = ar.scale_rows(ar.link(kernel, steps - 1), &u[steps - 1]);
    for l in (step..steps - 1).rev() {
        back = ar.mul(&ar.scale_rows(ar.link(kernel, l), &u[l]), &back);
    }
    if step == 0 {
        let d = ar.diag(&back);
        return Ok(Array2::from_diag(&if log { d.mapv(f64::exp) } else { d }));
    }
    let mut front = ar.scale_rows(ar.link(kernel, 0), &u[0]);
    for l in 1..step {
        front = ar.mul(&front, &ar.scale_rows(ar.link(kernel, l), &u[l]));
    }
    Ok(if log { (front + &back.t()).mapv(f64::exp) } else { front * &back.t() })
}

/// Dense plan `xi_j prod_k u^k_{j_k}`, for validation on tiny problems.
pub fn dense_plan(scalings: &EulerScalings, kernel: &FactoredEulerKernel, limit: u128) -> Result<ArrayD<f64>> {
    let dense = kernel.dense(limit)?;
    Ok(crate::multimarginal::scaled_tensor(&dense, &scalings.u))
}
