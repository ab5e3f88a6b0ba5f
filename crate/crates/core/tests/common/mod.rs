//! Independent reference solvers shared by the integration tests.
//!
//! None of these reuse the crate's projection code: KL projections are found
//! by enumerating active sets and solving each equality-constrained problem
//! through its dual with Newton's method, linear programs by enumerating
//! basic feasible solutions.

#![allow(dead_code)]

use itertools_free::combinations;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_simplex(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let v = Array1::from_shape_fn(n, |_| rng.random_range(0.2..1.0));
    let s = v.sum();
    v / s
}

pub fn random_positive(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(0.1..1.0))
}

pub fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

pub fn unflat(v: &[f64], shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_vec(shape, v.to_vec()).unwrap()
}

pub fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Linear constraint `coeffs . x (= or <=) rhs`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

impl Linear {
    pub fn new(coeffs: Vec<f64>, rhs: f64) -> Self {
        Self { coeffs, rhs }
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().zip(x).map(|(a, b)| a * b).sum()
    }
}

/// Row sums of an `n x m` row-major plan.
pub fn row_constraints(n: usize, m: usize, target: &[f64]) -> Vec<Linear> {
    (0..n)
        .map(|i| {
            let mut c = vec![0.0; n * m];
            c[i * m..(i + 1) * m].fill(1.0);
            Linear::new(c, target[i])
        })
        .collect()
}

pub fn col_constraints(n: usize, m: usize, target: &[f64]) -> Vec<Linear> {
    (0..m)
        .map(|j| {
            let mut c = vec![0.0; n * m];
            for i in 0..n {
                c[i * m + j] = 1.0;
            }
            Linear::new(c, target[j])
        })
        .collect()
}

pub fn total_constraint(len: usize, mass: f64) -> Linear {
    Linear::new(vec![1.0; len], mass)
}

/// Weighted KL `sum w_i (x_i log(x_i/y_i) - x_i + y_i)`.
pub fn weighted_kl(x: &[f64], y: &[f64], w: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .zip(w)
        .map(|((&a, &b), &c)| if a == 0.0 { c * b } else { c * (a * (a / b).ln() - a + b) })
        .sum()
}

/// Minimizer of the weighted KL from `y` subject to equalities only, found by
/// damped Newton on the dual. Returns `(x, multipliers)` or `None` when the
/// dual does not converge (infeasible system).
fn equality_projection(y: &[f64], w: &[f64], eq: &[&Linear]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = y.len();
    let m = eq.len();
    if m == 0 {
        return Some((y.to_vec(), vec![]));
    }
    let a = DMatrix::from_fn(m, n, |r, c| eq[r].coeffs[c]);
    let b = DVector::from_iterator(m, eq.iter().map(|l| l.rhs));
    let primal = |lam: &DVector<f64>| -> Vec<f64> {
        let at = a.transpose() * lam;
        (0..n).map(|i| y[i] * (-at[i] / w[i]).exp()).collect()
    };
    let dual = |lam: &DVector<f64>| -> f64 {
        let x = primal(lam);
        x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + lam.dot(&b)
    };
    let mut lam = DVector::zeros(m);
    for _ in 0..80 {
        let x = primal(&lam);
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let ax = &a * DVector::from_column_slice(&x);
        let grad = &b - &ax;
        if grad.amax() < 1e-14 {
            return Some((x, lam.iter().copied().collect()));
        }
        let d = DMatrix::from_fn(n, n, |r, c| if r == c { x[r] / w[r] } else { 0.0 });
        let h = &a * d * a.transpose();
        let svd = h.svd(true, true);
        let smax = svd.singular_values.max();
        let step = svd.solve(&grad, 1e-13 * smax.max(1e-300)).ok()?;
        let f0 = dual(&lam);
        let slope = -grad.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &lam - &step * t;
            let f = dual(&cand);
            if f.is_finite() && f <= f0 + 1e-4 * t * slope + 1e-15 * f0.abs() {
                lam = cand;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                return None;
            }
        }
    }
    let x = primal(&lam);
    let ax = &a * DVector::from_column_slice(&x);
    if (&b - &ax).amax() < 1e-11 {
        Some((x, lam.iter().copied().collect()))
    } else {
        None
    }
}

/// Weighted KL projection of `y` onto `{eq} ∩ {ineq}` by exhaustive active-set
/// search: each subset of inequalities is treated as equalities, and the
/// subset whose solution satisfies the KKT conditions is returned.
pub fn kl_projection_weighted(y: &[f64], w: &[f64], eq: &[Linear], ineq: &[Linear]) -> Vec<f64> {
    assert!(ineq.len() <= 14, "active-set enumeration is exponential");
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1 << ineq.len()) {
        let active: Vec<usize> = (0..ineq.len()).filter(|k| mask & (1 << k) != 0).collect();
        let mut rows: Vec<&Linear> = eq.iter().collect();
        rows.extend(active.iter().map(|&k| &ineq[k]));
        let Some((x, lam)) = equality_projection(y, w, &rows) else { continue };
        let feasible = ineq.iter().all(|c| c.value(&x) <= c.rhs + 1e-10);
        let signs_ok = lam[eq.len()..].iter().all(|&mu| mu >= -1e-9);
        if feasible && signs_ok {
            let f = weighted_kl(&x, y, w);
            if best.as_ref().is_none_or(|(g, _)| f < *g - 1e-15) {
                best = Some((f, x));
            }
        }
    }
    best.expect("no KKT point found").1
}

pub fn kl_projection(y: &[f64], eq: &[Linear], ineq: &[Linear]) -> Vec<f64> {
    kl_projection_weighted(y, &vec![1.0; y.len()], eq, ineq)
}

/// Minimum of `c . x` over `{A x = b, x >= 0}` by enumerating every basis.
pub fn lp_min(c: &[f64], eq: &[Linear]) -> (f64, Vec<f64>) {
    let n = c.len();
    let rows = independent_rows(eq);
    let r = rows.len();
    let a = DMatrix::from_fn(r, n, |i, j| rows[i].coeffs[j]);
    let b = DVector::from_iterator(r, rows.iter().map(|l| l.rhs));
    let mut best: Option<(f64, Vec<f64>)> = None;
    for basis in combinations(n, r) {
        let sub = DMatrix::from_fn(r, r, |i, j| a[(i, basis[j])]);
        let lu = sub.lu();
        if lu.determinant().abs() < 1e-10 {
            continue;
        }
        let Some(xb) = lu.solve(&b) else { continue };
        if xb.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let mut x = vec![0.0; n];
        for (k, &j) in basis.iter().enumerate() {
            x[j] = xb[k].max(0.0);
        }
        let val: f64 = x.iter().zip(c).map(|(a, b)| a * b).sum();
        if best.as_ref().is_none_or(|(v, _)| val < *v) {
            best = Some((val, x));
        }
    }
    best.expect("LP infeasible")
}

/// Keeps a maximal linearly independent subset of the constraint rows.
fn independent_rows(eq: &[Linear]) -> Vec<Linear> {
    let mut kept: Vec<Linear> = Vec::new();
    for row in eq {
        let mut cand = kept.clone();
        cand.push(row.clone());
        let m = DMatrix::from_fn(cand.len(), row.coeffs.len(), |i, j| cand[i].coeffs[j]);
        if m.rank(1e-9) == cand.len() {
            kept = cand;
        }
    }
    kept
}

/// Golden-section minimization of a unimodal function on `[a, b]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    while (b - a).abs() > tol {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    0.5 * (a + b)
}

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + h * i as f64;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

/// Index combinations without an external dependency.
mod itertools_free {
    pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur = Vec::with_capacity(k);
        fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in start..n {
                if n - i < k - cur.len() {
                    break;
                }
                cur.push(i);
                rec(i + 1, n, k, cur, out);
                cur.pop();
            }
        }
        rec(0, n, k, &mut cur, &mut out);
        out
    }
}

/// Naive three-index loop: `sum_{j,l} T[i,j,l] a_j b_l` along axis 0.
pub fn naive_contract3(t: &ndarray::Array3<f64>, s: [&Array1<f64>; 3], keep: usize) -> Array1<f64> {
    let (n0, n1, n2) = t.dim();
    let len = [n0, n1, n2][keep];
    let mut out = Array1::zeros(len);
    for i in 0..n0 {
        for j in 0..n1 {
            for l in 0..n2 {
                let idx = [i, j, l];
                let mut v = t[[i, j, l]];
                for (ax, sc) in s.iter().enumerate() {
                    if ax != keep {
                        v *= sc[idx[ax]];
                    }
                }
                out[idx[keep]] += v;
            }
        }
    }
    out
}
