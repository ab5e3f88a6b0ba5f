//! Discrete partial Radon transform on a cyclic `n0 x n0` grid and
//! reconstruction with a transport-based fidelity term.
//!
//! Images are `n0 x n0` arrays indexed `[row, col]` and flattened row-major.
//! For an angle `theta` with `theta mod pi` in `[0, pi/4] U [3pi/4, pi)`, ray
//! `s1` visits the pixels `(s2, s1 + round(s2 tan theta) mod n0)`; otherwise it
//! visits `(s1 + round(s2 cot theta) mod n0, s2)`, for `s2 = 0..n0`.
//!
//! The reconstruction couples a 2-D plan `pi` (rows: unknown image, columns:
//! template) with one 1-D plan `pi_k` per angle (rows: Radon transform of the
//! image, columns: measurement `r_k`). The sets are
//! `C_k = { pi^T 1 = g0, pi_k^T 1 = r_k }` and `C~_k = { R_k(pi 1) = pi_k 1 }`,
//! projected cyclically under `lambda1 KL(pi) + lambda2 sum_k KL(pi_k)`.

use std::f64::consts::{FRAC_PI_4, PI};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::engine::{Diagnostics, SolveOptions};
use crate::entropic_ot::CostMatrix;
use crate::error::{Error, Result};
use crate::kernel::{GibbsKernel, KernelOp, SeparableKernel};
use crate::kl::{check_nonnegative, col_sums, row_sums, scaling_ratios, sup_diff};

pub const DEFAULT_CG_TOL: f64 = 1e-10;

/// Per-angle pixel tables of the nearest-neighbour cyclic Radon transform.
#[derive(Debug, Clone)]
pub struct RadonOperator {
    n0: usize,
    angles: Vec<f64>,
    /// `lines[k][s1 * n0 + s2]` is the flat pixel index of cell `s2` on ray `s1`.
    lines: Vec<Vec<usize>>,
}

/// True when `theta` uses the `tan` branch (rays run along columns).
pub fn uses_first_branch(theta: f64) -> bool {
    let t = theta.rem_euclid(PI);
    t <= FRAC_PI_4 || t >= 3.0 * FRAC_PI_4
}

fn line_table(n0: usize, theta: f64) -> Vec<usize> {
    let first = uses_first_branch(theta);
    let slope = if first { theta.tan() } else { 1.0 / theta.tan() };
    let n = n0 as i64;
    let mut table = vec![0; n0 * n0];
    for s2 in 0..n0 {
        let offset = (s2 as f64 * slope).round() as i64;
        for s1 in 0..n0 {
            let shifted = (s1 as i64 + offset).rem_euclid(n) as usize;
            let (row, col) = if first { (s2, shifted) } else { (shifted, s2) };
            table[s1 * n0 + s2] = row * n0 + col;
        }
    }
    table
}

impl RadonOperator {
    pub fn new(n0: usize, angles: Vec<f64>) -> Result<Self> {
        if n0 == 0 {
            return Err(Error::InvalidArgument("grid side must be positive".into()));
        }
        if let Some(&bad) = angles.iter().find(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument(format!("angle {bad} is not finite")));
        }
        let lines = angles.iter().map(|&t| line_table(n0, t)).collect();
        Ok(Self { n0, angles, lines })
    }

    /// `k` angles `j pi / k`, `j = 0..k`.
    pub fn equispaced(n0: usize, k: usize) -> Result<Self> {
        Self::new(n0, (0..k).map(|j| j as f64 * PI / k as f64).collect())
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    /// Flat pixel indices of ray `s1` at angle slot `k`.
    pub fn line(&self, k: usize, s1: usize) -> &[usize] {
        &self.lines[k][s1 * self.n0..(s1 + 1) * self.n0]
    }

    fn check_image(&self, f: ArrayView2<'_, f64>) -> Result<()> {
        if f.dim() != (self.n0, self.n0) {
            return Err(Error::ShapeMismatch { expected: vec![self.n0, self.n0], got: f.shape().to_vec() });
        }
        Ok(())
    }

    fn check_slot(&self, k: usize) -> Result<()> {
        if k >= self.angles.len() {
            return Err(Error::IndexOutOfRange { index: k, len: self.angles.len() });
        }
        Ok(())
    }

    fn radon_flat(&self, k: usize, f: &[f64]) -> Array1<f64> {
        Array1::from_shape_fn(self.n0, |s1| self.line(k, s1).iter().map(|&p| f[p]).sum())
    }

    fn back_project_flat(&self, k: usize, r: ArrayView1<'_, f64>, out: &mut [f64]) {
        for s1 in 0..self.n0 {
            for &p in self.line(k, s1) {
                out[p] += r[s1];
            }
        }
    }

    /// Ray sums of `f` at angle slot `k`.
    pub fn radon(&self, f: ArrayView2<'_, f64>, k: usize) -> Result<Array1<f64>> {
        self.check_image(f)?;
        self.check_slot(k)?;
        let flat = f.as_standard_layout();
        Ok(self.radon_flat(k, flat.as_slice().expect("standard layout")))
    }

    /// Adjoint of [`RadonOperator::radon`]: spreads `r[s1]` along ray `s1`.
    pub fn back_project(&self, r: ArrayView1<'_, f64>, k: usize) -> Result<Array2<f64>> {
        self.check_slot(k)?;
        if r.len() != self.n0 {
            return Err(Error::ShapeMismatch { expected: vec![self.n0], got: vec![r.len()] });
        }
        let mut out = vec![0.0; self.n0 * self.n0];
        self.back_project_flat(k, r, &mut out);
        Ok(Array2::from_shape_vec((self.n0, self.n0), out).expect("square image"))
    }

    /// Sinogram `R(f)`, one row per angle.
    pub fn forward(&self, f: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_image(f)?;
        let flat = f.as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        let mut out = Array2::zeros((self.n_angles(), self.n0));
        for k in 0..self.n_angles() {
            out.row_mut(k).assign(&self.radon_flat(k, flat));
        }
        Ok(out)
    }

    /// `R^*(sinogram)`.
    pub fn adjoint(&self, sinogram: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_sinogram(sinogram)?;
        let mut out = vec![0.0; self.n0 * self.n0];
        for (k, r) in sinogram.outer_iter().enumerate() {
            self.back_project_flat(k, r, &mut out);
        }
        Ok(Array2::from_shape_vec((self.n0, self.n0), out).expect("square image"))
    }

    fn check_sinogram(&self, sinogram: ArrayView2<'_, f64>) -> Result<()> {
        if sinogram.dim() != (self.n_angles(), self.n0) {
            return Err(Error::ShapeMismatch {
                expected: vec![self.n_angles(), self.n0],
                got: sinogram.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Minimum-norm solution `R^* (R R^*)^{-1} r` with `R R^*` inverted by
    /// conjugate gradients to relative residual `cg_tol`.
    pub fn least_squares_inverse(&self, sinogram: ArrayView2<'_, f64>, cg_tol: f64) -> Result<Array2<f64>> {
        self.check_sinogram(sinogram)?;
        let rhs = sinogram.to_owned();
        let rhs_norm = norm(&rhs);
        let mut x = Array2::<f64>::zeros(rhs.dim());
        if rhs_norm == 0.0 {
            return self.adjoint(x.view());
        }
        let normal = |y: &Array2<f64>| -> Array2<f64> {
            self.forward(self.adjoint(y.view()).expect("shape checked").view())
                .expect("shape checked")
        };
        let mut res = rhs.clone();
        let mut dir = res.clone();
        let mut rr = dot(&res, &res);
        let max_iter = 10 * self.n0 * self.n_angles();
        let mut it = 0;
        while rr.sqrt() > cg_tol * rhs_norm {
            if it == max_iter {
                return Err(Error::CgNotConverged { iterations: it, residual: rr.sqrt() / rhs_norm });
            }
            let ad = normal(&dir);
            let alpha = rr / dot(&dir, &ad);
            x.scaled_add(alpha, &dir);
            res.scaled_add(-alpha, &ad);
            let next = dot(&res, &res);
            dir = &res + &(&dir * (next / rr));
            rr = next;
            it += 1;
        }
        log::debug!("least-squares inverse: {it} CG iterations");
        self.adjoint(x.view())
    }
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &Array2<f64>) -> f64 {
    dot(a, a).sqrt()
}

/// Ray sums of an `n0 x n0` image at a single angle.
pub fn radon(f: ArrayView2<'_, f64>, theta: f64) -> Result<Array1<f64>> {
    RadonOperator::new(f.nrows(), vec![theta])?.radon(f, 0)
}

/// Back-projection of `r` onto an `n x n` image at a single angle.
pub fn back_project(r: ArrayView1<'_, f64>, theta: f64) -> Result<Array2<f64>> {
    RadonOperator::new(r.len(), vec![theta])?.back_project(r, 0)
}

/// Projection onto `C_k` for an explicit pair: the columns of `pi` are scaled
/// onto `g0` and the columns of `pi_k` onto `r_k`.
pub fn project_radon_marginals(
    pi: &mut Array2<f64>,
    pi_k: &mut Array2<f64>,
    g0: ArrayView1<'_, f64>,
    r_k: ArrayView1<'_, f64>,
) -> Result<()> {
    let f = scaling_ratios(g0, col_sums(pi).view())?;
    *pi *= &f.insert_axis(Axis(0));
    let f = scaling_ratios(r_k, col_sums(pi_k).view())?;
    *pi_k *= &f.insert_axis(Axis(0));
    Ok(())
}

/// Weighted-KL projection onto `C~_k` for an explicit pair.
///
/// With `alpha = R_k(pi 1)`, `beta = pi_k 1` and
/// `delta = alpha^lambda1 beta^(1 - lambda1)`, rows of `pi` are scaled by
/// `R_k^*(delta / alpha)` and rows of `pi_k` by `delta / beta`.
pub fn project_radon_coupling(
    pi: &mut Array2<f64>,
    pi_k: &mut Array2<f64>,
    op: &RadonOperator,
    k: usize,
    lambda1: f64,
) -> Result<()> {
    check_lambda(lambda1)?;
    let n0 = op.n0();
    let image = row_sums(pi).into_shape_with_order((n0, n0)).map_err(|_| Error::ShapeMismatch {
        expected: vec![n0 * n0],
        got: vec![pi.nrows()],
    })?;
    let alpha = op.radon(image.view(), k)?;
    let beta = row_sums(pi_k);
    let (fa, fb) = coupling_factors(&alpha, &beta, lambda1, k)?;
    let spread = op.back_project(fa.view(), k)?;
    let spread = Array1::from_iter(spread);
    *pi *= &spread.insert_axis(Axis(1));
    *pi_k *= &fb.insert_axis(Axis(1));
    Ok(())
}

fn check_lambda(lambda1: f64) -> Result<()> {
    if lambda1 > 0.0 && lambda1 <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("lambda1 must lie in (0, 1], got {lambda1}")))
    }
}

/// `(delta / alpha, delta / beta)` with `0/0 := 0`.
fn coupling_factors(alpha: &Array1<f64>, beta: &Array1<f64>, lambda1: f64, k: usize) -> Result<(Array1<f64>, Array1<f64>)> {
    let lambda2 = 1.0 - lambda1;
    let mut fa = Array1::zeros(alpha.len());
    let mut fb = Array1::zeros(alpha.len());
    for (s, (&a, &b)) in alpha.iter().zip(beta).enumerate() {
        if a > 0.0 && b > 0.0 {
            let delta = a.powf(lambda1) * b.powf(lambda2);
            fa[s] = delta / a;
            fb[s] = delta / b;
        } else if lambda2 == 0.0 && a > 0.0 {
            fa[s] = 1.0;
        } else if a > 0.0 || b > 0.0 {
            return Err(Error::ZeroRaySum { angle: k, ray: s });
        }
    }
    Ok((fa, fb))
}

/// Template, measurements and weights of an OT-fidelity reconstruction.
#[derive(Debug, Clone)]
pub struct ReconstructionProblem {
    pub operator: RadonOperator,
    pub template: Array2<f64>,
    /// Sinogram, one row per angle.
    pub measurements: Array2<f64>,
    pub lambda1: f64,
    pub gamma: f64,
}

impl ReconstructionProblem {
    /// Validates the inputs and rescales every measurement row whose mass
    /// differs from the template's.
    pub fn new(
        operator: RadonOperator,
        template: Array2<f64>,
        mut measurements: Array2<f64>,
        lambda1: f64,
        gamma: f64,
    ) -> Result<Self> {
        check_lambda(lambda1)?;
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::NonPositiveGamma(gamma));
        }
        operator.check_image(template.view())?;
        operator.check_sinogram(measurements.view())?;
        check_nonnegative(&template)?;
        check_nonnegative(&measurements)?;
        let mass = template.sum();
        if mass <= 0.0 {
            return Err(Error::ZeroTotalMass { mass });
        }
        for (k, mut row) in measurements.outer_iter_mut().enumerate() {
            let m = row.sum();
            if m <= 0.0 {
                return Err(Error::ZeroTotalMass { mass: m });
            }
            if (m - mass).abs() > 1e-12 * mass {
                log::warn!("measurement {k} has mass {m:.6e}, rescaled to the template mass {mass:.6e}");
                row *= mass / m;
            }
        }
        Ok(Self { operator, template, measurements, lambda1, gamma })
    }

    pub fn lambda2(&self) -> f64 {
        1.0 - self.lambda1
    }

    /// Gibbs kernel of the 2-D plan: squared distance on the unit square.
    pub fn image_kernel(&self) -> Result<SeparableKernel> {
        SeparableKernel::unit_square(self.operator.n0(), self.operator.n0(), self.gamma)
    }

    /// Gibbs kernel of each 1-D plan: squared periodic distance on the unit circle.
    pub fn ray_kernel(&self) -> Result<GibbsKernel> {
        let n0 = self.operator.n0();
        GibbsKernel::new(CostMatrix::periodic_1d(n0, 1.0 / n0 as f64).entries, self.gamma)
    }
}

/// Scalings of `pi = diag(a) xi diag(b)` and `pi_k = diag(c_k) xi_1 diag(d_k)`.
#[derive(Debug, Clone)]
pub struct ReconstructionSolution {
    pub image: Array2<f64>,
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub c: Vec<Array1<f64>>,
    pub d: Vec<Array1<f64>>,
    /// `2K` residuals: entries `2k` for `C_k`, `2k + 1` for `C~_k`.
    pub residuals: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl ReconstructionSolution {
    /// Dense plans; intended for small grids.
    pub fn plans(&self, problem: &ReconstructionProblem) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        let xi = problem.image_kernel()?.to_dense();
        let xi1 = problem.ray_kernel()?.entries;
        let pi = crate::entropic_ot::plan_from_scalings(&xi, self.a.view(), self.b.view());
        let pis = self
            .c
            .iter()
            .zip(&self.d)
            .map(|(c, d)| crate::entropic_ot::plan_from_scalings(&xi1, c.view(), d.view()))
            .collect();
        Ok((pi, pis))
    }
}

fn residuals(
    problem: &ReconstructionProblem,
    xi: &SeparableKernel,
    xi1: &GibbsKernel,
    state: (&Array1<f64>, &Array1<f64>, &[Array1<f64>], &[Array1<f64>]),
) -> (Array1<f64>, Vec<f64>) {
    let (a, b, c, d) = state;
    let n0 = problem.operator.n0();
    let f = a * &xi.apply(b.view());
    let g = b * &xi.apply_transpose(a.view());
    let g0 = Array1::from_iter(problem.template.iter().copied());
    let template_res = sup_diff(&g, &g0);
    let image = f.view().into_shape_with_order((n0, n0)).expect("square image");
    let flat = image.as_standard_layout();
    let flat = flat.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(2 * c.len());
    for k in 0..c.len() {
        let cols = &d[k] * &xi1.apply_transpose(c[k].view());
        let rows = &c[k] * &xi1.apply(d[k].view());
        out.push(template_res.max(sup_diff(&cols, &problem.measurements.row(k))));
        out.push(sup_diff(&problem.operator.radon_flat(k, flat), &rows));
    }
    (f, out)
}

/// Cyclic projections `C_1, C~_1, ..., C_K, C~_K` on the scalings.
///
/// Stops when every one of the `2K` residuals and the sup change of the image
/// over a cycle are `<= opts.tol`.
pub fn ot_reconstruct(problem: &ReconstructionProblem, opts: &SolveOptions) -> Result<ReconstructionSolution> {
    let op = &problem.operator;
    let n0 = op.n0();
    let n = n0 * n0;
    let k_count = op.n_angles();
    let xi = problem.image_kernel()?;
    let xi1 = problem.ray_kernel()?;
    let g0 = Array1::from_iter(problem.template.iter().copied());
    let mut a = Array1::<f64>::ones(n);
    let mut b = Array1::<f64>::ones(n);
    let mut c = vec![Array1::<f64>::ones(n0); k_count];
    let mut d = vec![Array1::<f64>::ones(n0); k_count];
    let mut last_f: Option<Array1<f64>> = None;
    let mut diagnostics = Diagnostics { iterations: 0, residual: f64::INFINITY, change: f64::INFINITY, converged: false };
    let mut res = vec![f64::INFINITY; 2 * k_count];
    let mut f = Array1::zeros(n);
    for it in 1..=opts.max_iter {
        for k in 0..k_count {
            b = scaling_ratios(g0.view(), xi.apply_transpose(a.view()).view())?;
            d[k] = scaling_ratios(problem.measurements.row(k), xi1.apply_transpose(c[k].view()).view())?;

            let rows = &a * &xi.apply(b.view());
            let alpha = op.radon_flat(k, rows.as_slice().expect("contiguous"));
            let beta = &c[k] * &xi1.apply(d[k].view());
            let (fa, fb) = coupling_factors(&alpha, &beta, problem.lambda1, k)?;
            let mut spread = vec![0.0; n];
            op.back_project_flat(k, fa.view(), &mut spread);
            a.zip_mut_with(&Array1::from(spread), |x, &s| *x *= s);
            c[k] *= &fb;
        }
        if !a.iter().chain(b.iter()).all(|x| x.is_finite()) {
            return Err(Error::NumericalOverflow { iterations: it });
        }
        let (image, r) = residuals(problem, &xi, &xi1, (&a, &b, &c, &d));
        f = image;
        res = r;
        let residual = res.iter().copied().fold(0.0, f64::max);
        let change = last_f.as_ref().map_or(f64::INFINITY, |p| sup_diff(p, &f));
        diagnostics = Diagnostics { iterations: it, residual, change, converged: false };
        if residual <= opts.tol && change <= opts.tol {
            diagnostics.converged = true;
            break;
        }
        last_f = Some(f.clone());
    }
    if !diagnostics.converged {
        log::warn!("reconstruction stopped after {} cycles, residual {:.3e}", diagnostics.iterations, diagnostics.residual);
    }
    let image = f.into_shape_with_order((n0, n0)).expect("square image");
    Ok(ReconstructionSolution { image, a, b, c, d, residuals: res, diagnostics })
}
