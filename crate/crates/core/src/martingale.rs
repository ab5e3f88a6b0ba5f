//! Entropic martingale transport.
//!
//! The martingale constraint `pi y = p x` is bilinear in `(pi, y)`, so the
//! problem is lifted to a pair `(pi, phi)` with `phi = pi diag(y)`:
//!
//! * C1: rows of `pi` sum to `p`, rows of `phi` sum to `p x`;
//! * C2: columns of `pi` sum to `q`, rows of `phi` sum to `p x`;
//! * C3: `phi = pi diag(y)`, projected in closed form.
//!
//! All three sets are affine, so plain cyclic projections converge.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use serde::Serialize;

use crate::engine::{bregman_solve, bregman_solve_log, ConstraintSet, Diagnostics, Plan, SolveOptions};
use crate::error::{Error, Result};
use crate::kl::{check_nonnegative, scaling_ratio};

#[derive(Debug, Clone)]
pub struct MartingaleProblem {
    pub x: Array1<f64>,
    pub y: Array1<f64>,
    pub p: Array1<f64>,
    pub q: Array1<f64>,
    pub cost: Array2<f64>,
    pub gamma: f64,
}

fn check_support(v: &Array1<f64>) -> Result<()> {
    match v.iter().position(|&t| !(t > 0.0 && t.is_finite())) {
        Some(index) => Err(Error::NonPositiveSupport { index, value: v[index] }),
        None => Ok(()),
    }
}

impl MartingaleProblem {
    pub fn new(x: Array1<f64>, y: Array1<f64>, p: Array1<f64>, q: Array1<f64>, cost: Array2<f64>, gamma: f64) -> Result<Self> {
        check_support(&x)?;
        check_support(&y)?;
        check_nonnegative(&p)?;
        check_nonnegative(&q)?;
        if p.len() != x.len() || q.len() != y.len() || cost.dim() != (x.len(), y.len()) {
            return Err(Error::ShapeMismatch {
                expected: vec![x.len(), y.len()],
                got: vec![p.len(), q.len(), cost.nrows(), cost.ncols()],
            });
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::NonPositiveGamma(gamma));
        }
        Ok(Self { x, y, p, q, cost, gamma })
    }

    /// `p_i x_i`.
    pub fn px(&self) -> Array1<f64> {
        &self.p * &self.x
    }
}

/// `(pi, phi)` stacked along the first axis of a `2 x N x M` array.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingalePair(pub Array3<f64>);

impl MartingalePair {
    pub fn from_parts(pi: &Array2<f64>, phi: &Array2<f64>) -> Result<Self> {
        if pi.dim() != phi.dim() {
            return Err(Error::ShapeMismatch { expected: pi.shape().to_vec(), got: phi.shape().to_vec() });
        }
        let (n, m) = pi.dim();
        let mut data = Array3::zeros((2, n, m));
        data.slice_mut(s![0, .., ..]).assign(pi);
        data.slice_mut(s![1, .., ..]).assign(phi);
        Ok(Self(data))
    }

    pub fn pi(&self) -> ArrayView2<'_, f64> {
        self.0.index_axis(Axis(0), 0)
    }

    pub fn phi(&self) -> ArrayView2<'_, f64> {
        self.0.index_axis(Axis(0), 1)
    }

    fn parts_mut(&mut self) -> (ArrayViewMut2<'_, f64>, ArrayViewMut2<'_, f64>) {
        let (a, b) = self.0.view_mut().split_at(Axis(0), 1);
        (a.index_axis_move(Axis(0), 0), b.index_axis_move(Axis(0), 0))
    }
}

impl Plan for MartingalePair {
    fn as_flat(&self) -> &[f64] {
        self.0.as_flat()
    }

    fn as_flat_mut(&mut self) -> &mut [f64] {
        self.0.as_flat_mut()
    }
}

/// `(exp(-C/gamma), exp(-C_ij / (y_j gamma)))`.
pub fn build_martingale_kernels(problem: &MartingaleProblem) -> MartingalePair {
    let mut pair = build_log_kernels(problem);
    pair.0.mapv_inplace(f64::exp);
    pair
}

fn build_log_kernels(problem: &MartingaleProblem) -> MartingalePair {
    let (n, m) = problem.cost.dim();
    let g = problem.gamma;
    let mut data = Array3::zeros((2, n, m));
    for ((i, j), &c) in problem.cost.indexed_iter() {
        data[[0, i, j]] = -c / g;
        data[[1, i, j]] = -c / (problem.y[j] * g);
    }
    MartingalePair(data)
}

/// Scales each slice along `axis` of `m` to the matching `target` entry.
fn scale_slices(mut m: ArrayViewMut2<'_, f64>, axis: usize, target: &Array1<f64>, log: bool) -> Result<()> {
    if m.len_of(Axis(axis)) != target.len() {
        return Err(Error::ShapeMismatch { expected: vec![target.len()], got: vec![m.len_of(Axis(axis))] });
    }
    for (i, mut slice) in m.axis_iter_mut(Axis(axis)).enumerate() {
        if log {
            shift_log_slice(&mut slice, target[i], i)?;
        } else {
            let f = scaling_ratio(target[i], slice.sum(), i)?;
            slice.mapv_inplace(|x| x * f);
        }
    }
    Ok(())
}

fn shift_log_slice(slice: &mut ArrayViewMut1<'_, f64>, target: f64, index: usize) -> Result<()> {
    let lse = crate::kl::log_sum_exp(slice.iter());
    if lse == f64::NEG_INFINITY {
        return if target == 0.0 { Ok(()) } else { Err(Error::InfeasibleZeroSlice { index, target }) };
    }
    let shift = target.ln() - lse;
    slice.mapv_inplace(|x| x + shift);
    Ok(())
}

fn sup_abs(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    crate::kl::sup_diff(a, b)
}

/// Rows of `pi` to `p`, rows of `phi` to `p x`.
#[derive(Debug, Clone)]
pub struct MartingaleRows {
    pub p: Array1<f64>,
    pub px: Array1<f64>,
}

/// Columns of `pi` to `q`, rows of `phi` to `p x`.
#[derive(Debug, Clone)]
pub struct MartingaleCols {
    pub q: Array1<f64>,
    pub px: Array1<f64>,
}

/// `phi = pi diag(y)`.
#[derive(Debug, Clone)]
pub struct MartingaleLink {
    pub y: Array1<f64>,
}

fn phi_row_residual(pair: &MartingalePair, px: &Array1<f64>) -> f64 {
    let scale = px.fold(0.0f64, |a, &b| a.max(b));
    let r = sup_abs(&pair.phi().sum_axis(Axis(1)), px);
    if scale > 0.0 {
        r / scale
    } else {
        r
    }
}

impl ConstraintSet<MartingalePair> for MartingaleRows {
    fn project(&self, pair: &mut MartingalePair) -> Result<()> {
        let (pi, phi) = pair.parts_mut();
        scale_slices(pi, 0, &self.p, false)?;
        scale_slices(phi, 0, &self.px, false)
    }

    fn project_log(&self, pair: &mut MartingalePair) -> Result<()> {
        let (pi, phi) = pair.parts_mut();
        scale_slices(pi, 0, &self.p, true)?;
        scale_slices(phi, 0, &self.px, true)
    }

    /// Row violation of `pi`, and of `phi` relative to `max(p x)`.
    fn residual(&self, pair: &MartingalePair) -> f64 {
        sup_abs(&pair.pi().sum_axis(Axis(1)), &self.p).max(phi_row_residual(pair, &self.px))
    }

    fn is_affine(&self) -> bool {
        true
    }
}

impl ConstraintSet<MartingalePair> for MartingaleCols {
    fn project(&self, pair: &mut MartingalePair) -> Result<()> {
        let (pi, phi) = pair.parts_mut();
        scale_slices(pi, 1, &self.q, false)?;
        scale_slices(phi, 0, &self.px, false)
    }

    fn project_log(&self, pair: &mut MartingalePair) -> Result<()> {
        let (pi, phi) = pair.parts_mut();
        scale_slices(pi, 1, &self.q, true)?;
        scale_slices(phi, 0, &self.px, true)
    }

    fn residual(&self, pair: &MartingalePair) -> f64 {
        sup_abs(&pair.pi().sum_axis(Axis(0)), &self.q).max(phi_row_residual(pair, &self.px))
    }

    fn is_affine(&self) -> bool {
        true
    }
}

impl MartingaleLink {
    fn apply(&self, pair: &mut MartingalePair, log: bool) -> Result<()> {
        if pair.0.len_of(Axis(2)) != self.y.len() {
            return Err(Error::ShapeMismatch { expected: vec![self.y.len()], got: vec![pair.0.len_of(Axis(2))] });
        }
        let (mut pi, mut phi) = pair.parts_mut();
        for (mut pi_row, mut phi_row) in pi.outer_iter_mut().zip(phi.outer_iter_mut()) {
            for ((a, b), &y) in pi_row.iter_mut().zip(phi_row.iter_mut()).zip(&self.y) {
                let (la, lb) = if log { (*a, *b) } else { (a.ln(), b.ln()) };
                let lpi = (y * (lb - y.ln()) + la) / (y + 1.0);
                if log {
                    *a = lpi;
                    *b = lpi + y.ln();
                } else {
                    *a = lpi.exp();
                    *b = *a * y;
                }
            }
        }
        Ok(())
    }
}

impl ConstraintSet<MartingalePair> for MartingaleLink {
    fn project(&self, pair: &mut MartingalePair) -> Result<()> {
        self.apply(pair, false)
    }

    fn project_log(&self, pair: &mut MartingalePair) -> Result<()> {
        self.apply(pair, true)
    }

    fn residual(&self, pair: &MartingalePair) -> f64 {
        let target = &pair.pi() * &self.y.view().insert_axis(Axis(0));
        crate::kl::sup_diff(&pair.phi(), &target)
    }

    fn is_affine(&self) -> bool {
        true
    }
}

pub fn project_c1_mart(pair: &MartingalePair, p: &Array1<f64>, x: &Array1<f64>) -> Result<MartingalePair> {
    let mut out = pair.clone();
    MartingaleRows { p: p.clone(), px: p * x }.project(&mut out)?;
    Ok(out)
}

pub fn project_c2_mart(pair: &MartingalePair, q: &Array1<f64>, p: &Array1<f64>, x: &Array1<f64>) -> Result<MartingalePair> {
    let mut out = pair.clone();
    MartingaleCols { q: q.clone(), px: p * x }.project(&mut out)?;
    Ok(out)
}

/// Closed-form KL projection onto `{phi = pi diag(y)}`:
/// `pi = exp((y log(phi/y) + log pi) / (y + 1))`, `phi = pi y`.
pub fn project_c3_mart(pair: &MartingalePair, y: &Array1<f64>) -> Result<MartingalePair> {
    check_support(y)?;
    if let Some(i) = pair.0.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::NonPositiveKernel { index: i, value: pair.0.as_flat()[i] });
    }
    let mut out = pair.clone();
    MartingaleLink { y: y.clone() }.project(&mut out)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MartingaleSolution {
    pub pair: MartingalePair,
    pub diagnostics: Diagnostics,
    /// `<C, pi>`.
    pub cost: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MartingaleReport {
    pub row_residual: f64,
    pub col_residual: f64,
    /// `max_i |(pi y)_i - p_i x_i| / max(p x)`.
    pub martingale_residual: f64,
    pub cost: f64,
}

impl MartingaleSolution {
    pub fn plan(&self) -> Array2<f64> {
        self.pair.pi().to_owned()
    }

    pub fn report(&self, problem: &MartingaleProblem) -> MartingaleReport {
        let pi = self.pair.pi();
        let px = problem.px();
        let scale = px.fold(0.0f64, |a, &b| a.max(b));
        MartingaleReport {
            row_residual: sup_abs(&pi.sum_axis(Axis(1)), &problem.p),
            col_residual: sup_abs(&pi.sum_axis(Axis(0)), &problem.q),
            martingale_residual: sup_abs(&pi.dot(&problem.y), &px) / scale,
            cost: self.cost,
        }
    }
}

/// Cyclic projections over C1, C2, C3. In log-domain mode the kernels are
/// built as logarithms, so they never underflow.
pub fn martingale_solve(problem: &MartingaleProblem, opts: &SolveOptions) -> Result<MartingaleSolution> {
    let rows = MartingaleRows { p: problem.p.clone(), px: problem.px() };
    let cols = MartingaleCols { q: problem.q.clone(), px: problem.px() };
    let link = MartingaleLink { y: problem.y.clone() };
    let sets: [&dyn ConstraintSet<MartingalePair>; 3] = [&rows, &cols, &link];
    let sol = if opts.log_domain {
        bregman_solve_log(&build_log_kernels(problem), &sets, opts)?
    } else {
        bregman_solve(&build_martingale_kernels(problem), &sets, opts)?
    };
    if !sol.diagnostics.converged {
        log::warn!(
            "martingale solve did not converge; marginals may not be in convex order (row {:.3e}, col {:.3e})",
            rows.residual(&sol.plan),
            cols.residual(&sol.plan)
        );
    }
    let cost = (&sol.plan.pi() * &problem.cost).sum();
    Ok(MartingaleSolution { pair: sol.plan, diagnostics: sol.diagnostics, cost })
}

/// Density of `exp(Z)` with `Z ~ N(m, sigma^2)`.
pub fn lognormal_density(t: f64, m: f64, sigma: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::NonPositiveArgument(t));
    }
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveArgument(sigma));
    }
    let z = (t.ln() - m) / sigma;
    Ok((-0.5 * z * z).exp() / (t * sigma * (2.0 * std::f64::consts::PI).sqrt()))
}

/// Lognormal pair with log-variances `sigma0_sq < sigma1_sq` and unit means.
///
/// Both laws live on one geometric grid covering `±4 sigma1` around the wider
/// law's log-mean. Cell masses are `density(x) * x`, i.e. the log-space
/// density at the log-grid nodes, normalized to one. The discretization
/// perturbs the means slightly, so `q` is exponentially tilted to the mean of
/// `p`; without that, no martingale coupling exists.
pub fn build_lognormal_case(n: usize, sigma0_sq: f64, sigma1_sq: f64, gamma: f64) -> Result<MartingaleProblem> {
    if !(sigma0_sq > 0.0 && sigma0_sq < sigma1_sq) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < sigma0^2 < sigma1^2, got {sigma0_sq} and {sigma1_sq}"
        )));
    }
    if n < 3 {
        return Err(Error::GridTooCoarse(n as f64));
    }
    let (s0, s1) = (sigma0_sq.sqrt(), sigma1_sq.sqrt());
    let centre = -sigma1_sq / 2.0;
    let (lo, hi) = (centre - 4.0 * s1, centre + 4.0 * s1);
    let step = (hi - lo) / (n - 1) as f64;
    let x = Array1::from_shape_fn(n, |i| (lo + step * i as f64).exp());
    let masses = |m: f64, s: f64| -> Result<(Array1<f64>, f64)> {
        let raw = x
            .iter()
            .map(|&t| lognormal_density(t, m, s).map(|d| d * t))
            .collect::<Result<Vec<_>>>()?;
        let raw = Array1::from(raw);
        let captured = raw.sum() * step;
        let total = raw.sum();
        Ok((raw / total, (1.0 - captured).abs()))
    };
    let (p, _) = masses(-sigma0_sq / 2.0, s0)?;
    let (q, tail) = masses(-sigma1_sq / 2.0, s1)?;
    if tail > 1e-4 {
        log::warn!("lognormal grid truncates about {tail:.2e} of the mass");
    }
    let q = tilt_to_mean(&q, &x, p.dot(&x));
    let cost = Array2::from_shape_fn((n, n), |(i, j)| (x[j] / x[i]).ln().powi(2));
    MartingaleProblem::new(x.clone(), x, p, q, cost, gamma)
}

/// `q_j e^{t log y_j}`, renormalized, with `t` chosen by bisection so the mean is `target`.
fn tilt_to_mean(q: &Array1<f64>, y: &Array1<f64>, target: f64) -> Array1<f64> {
    let tilted = |t: f64| {
        let w = Array1::from_shape_fn(q.len(), |j| q[j] * (t * y[j].ln()).exp());
        let s = w.sum();
        w / s
    };
    let mean = |t: f64| tilted(t).dot(y);
    let (mut a, mut b) = (-1.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mean(mid) < target {
            a = mid;
        } else {
            b = mid;
        }
    }
    tilted(0.5 * (a + b))
}
