//! Entropy and Kullback-Leibler primitives.
//!
//! The divergence uses the unnormalized convention
//! `KL(x|y) = sum x (log(x/y) - 1)` with `0 log 0 = 0`. Several closed-form
//! projections (the martingale linking set in particular) are exact minimizers
//! only under this convention.

use ndarray::{Array1, Array2, ArrayBase, ArrayView1, Axis, Data, Dimension, Zip};

use crate::error::{Error, Result};

/// Nonnegative weight vector on a point grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram(Array1<f64>);

impl Histogram {
    pub fn new(weights: Array1<f64>) -> Result<Self> {
        check_nonnegative(&weights)?;
        Ok(Self(weights))
    }

    /// Builds a histogram and rescales it to unit mass.
    pub fn normalized(weights: Array1<f64>) -> Result<Self> {
        let h = Self::new(weights)?;
        let total = h.mass();
        if total <= 0.0 {
            return Err(Error::ZeroTotalMass { mass: 1.0 });
        }
        Ok(Self(h.0 / total))
    }

    pub fn uniform(n: usize) -> Self {
        Self(Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn mass(&self) -> f64 {
        self.0.sum()
    }

    /// True when the histogram lies on the probability simplex up to `tol`.
    pub fn is_simplex(&self, tol: f64) -> bool {
        (self.mass() - 1.0).abs() <= tol
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

impl AsRef<Array1<f64>> for Histogram {
    fn as_ref(&self) -> &Array1<f64> {
        &self.0
    }
}

/// Returns an error on the first negative or non-finite entry.
pub fn check_nonnegative<S, D>(a: &ArrayBase<S, D>) -> Result<()>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    for (index, &value) in a.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::NegativeEntry { index, value });
        }
    }
    Ok(())
}

pub fn check_positive<S, D>(a: &ArrayBase<S, D>) -> Result<()>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    for (index, &value) in a.iter().enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::NonPositiveKernel { index, value });
        }
    }
    Ok(())
}

pub(crate) fn check_same_shape<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<()>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `x log x - x`, continuous at zero.
#[inline]
fn xlogx_minus_x(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x.ln() - 1.0)
    }
}

/// Entropy `-sum x (log x - 1)`.
pub fn entropy<S, D>(plan: &ArrayBase<S, D>) -> Result<f64>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    check_nonnegative(plan)?;
    Ok(-plan.iter().map(|&x| xlogx_minus_x(x)).sum::<f64>())
}

/// `KL(plan|kernel) = sum plan (log(plan/kernel) - 1)`.
pub fn kl_divergence<S1, S2, D>(plan: &ArrayBase<S1, D>, kernel: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    check_same_shape(plan, kernel)?;
    check_positive(kernel)?;
    check_nonnegative(plan)?;
    let mut acc = 0.0;
    Zip::from(plan).and(kernel).for_each(|&x, &k| {
        if x > 0.0 {
            acc += x * ((x / k).ln() - 1.0);
        }
    });
    Ok(acc)
}

/// Validates `weights` as a point of the probability simplex.
pub fn check_simplex(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::WeightNotSimplex { sum });
    }
    Ok(())
}

/// `sum_k weights_k KL(plans_k|kernels_k)`; slots with zero weight are skipped.
pub fn weighted_kl<S1, S2, D>(
    plans: &[ArrayBase<S1, D>],
    kernels: &[ArrayBase<S2, D>],
    weights: &[f64],
) -> Result<f64>
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    if plans.len() != kernels.len() || plans.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![weights.len()],
            got: vec![plans.len(), kernels.len()],
        });
    }
    check_simplex(weights)?;
    let mut acc = 0.0;
    for ((p, k), &w) in plans.iter().zip(kernels).zip(weights) {
        if w > 0.0 {
            acc += w * kl_divergence(p, k)?;
        }
    }
    Ok(acc)
}

/// Row marginal `plan * 1`.
pub fn row_sums<S: Data<Elem = f64>>(plan: &ArrayBase<S, ndarray::Ix2>) -> Array1<f64> {
    plan.sum_axis(Axis(1))
}

/// Column marginal `plan^T * 1`.
pub fn col_sums<S: Data<Elem = f64>>(plan: &ArrayBase<S, ndarray::Ix2>) -> Array1<f64> {
    plan.sum_axis(Axis(0))
}

/// Scaling ratio `target / current` with `0/0 := 0`; positive mass over zero is infeasible.
#[inline]
pub fn scaling_ratio(target: f64, current: f64, index: usize) -> Result<f64> {
    if current > 0.0 {
        Ok(target / current)
    } else if target == 0.0 {
        Ok(0.0)
    } else {
        Err(Error::InfeasibleZeroSlice { index, target })
    }
}

/// Entry-wise ratios `target / current` under the `0/0 := 0` rule.
pub fn scaling_ratios(target: ArrayView1<'_, f64>, current: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if target.len() != current.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![target.len()],
            got: vec![current.len()],
        });
    }
    target
        .iter()
        .zip(current.iter())
        .enumerate()
        .map(|(i, (&t, &c))| scaling_ratio(t, c, i))
        .collect::<Result<Vec<_>>>()
        .map(Array1::from)
}

/// Sup-norm of `a - b`.
pub fn sup_diff<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> f64
where
    S1: Data<Elem = f64>,
    S2: Data<Elem = f64>,
    D: Dimension,
{
    let mut m: f64 = 0.0;
    Zip::from(a).and(b).for_each(|&x, &y| m = m.max((x - y).abs()));
    m
}

/// Outer product `p q^T`.
pub fn outer(p: ArrayView1<'_, f64>, q: ArrayView1<'_, f64>) -> Array2<f64> {
    let pc = p.insert_axis(Axis(1));
    let qr = q.insert_axis(Axis(0));
    &pc * &qr
}

/// Numerically stable `log(sum(exp(v)))`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp<'a, I: IntoIterator<Item = &'a f64> + Clone>(values: I) -> f64 {
    let max = values
        .clone()
        .into_iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.into_iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&Array2::<f64>::ones((2, 2))).unwrap(), 4.0);
        assert_eq!(entropy(&Array2::<f64>::zeros((2, 2))).unwrap(), 0.0);
        let pi = array![[0.5, 0.0], [0.0, 0.5]];
        let e = entropy(&pi).unwrap();
        // 1 + ln 2 evaluated with more digits than the f64 result carries.
        assert!((e - 1.693_147_180_559_945_3).abs() < 1e-15);
        assert!(matches!(
            entropy(&array![[0.5, -1e-3]]),
            Err(Error::NegativeEntry { index: 1, .. })
        ));
    }

    #[test]
    fn kl_values() {
        let ones = Array2::<f64>::ones((2, 2));
        assert_eq!(kl_divergence(&ones, &ones).unwrap(), -4.0);
        assert_eq!(kl_divergence(&Array2::zeros((2, 2)), &ones).unwrap(), 0.0);
        let e = Array2::from_elem((2, 2), std::f64::consts::E);
        assert!((kl_divergence(&ones, &e).unwrap() + 8.0).abs() < 1e-14);
    }

    #[test]
    fn kl_errors() {
        let ones = Array2::<f64>::ones((2, 2));
        assert!(matches!(
            kl_divergence(&ones, &Array2::ones((2, 3))),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut k = ones.clone();
        k[[1, 0]] = 0.0;
        assert!(matches!(
            kl_divergence(&ones, &k),
            Err(Error::NonPositiveKernel { index: 2, .. })
        ));
    }

    #[test]
    fn weighted_kl_reduces_to_kl() {
        let a = array![[0.2, 0.3], [0.1, 0.4]];
        let b = array![[0.9, 0.5], [0.3, 0.7]];
        let kl = kl_divergence(&a, &b).unwrap();
        let one = weighted_kl(&[a.clone()], &[b.clone()], &[1.0]).unwrap();
        assert_eq!(one, kl);
        let first = weighted_kl(&[a.clone(), b.clone()], &[b.clone(), a.clone()], &[1.0, 0.0]).unwrap();
        assert_eq!(first, kl);
        let half = weighted_kl(&[a.clone(), a.clone()], &[b.clone(), b.clone()], &[0.5, 0.5]).unwrap();
        assert!((half - kl).abs() < 1e-15);
        assert!(matches!(
            weighted_kl(&[a.clone()], &[b.clone()], &[0.7]),
            Err(Error::WeightNotSimplex { .. })
        ));
    }

    #[test]
    fn continuity_at_zero() {
        // Perturbing a zero entry by eps moves the entropy by O(eps log eps).
        let base = array![[0.5, 0.0], [0.0, 0.5]];
        let e0 = entropy(&base).unwrap();
        for &eps in &[1e-4, 1e-8, 1e-12] {
            let mut p = base.clone();
            p[[0, 1]] = eps;
            let d = (entropy(&p).unwrap() - e0).abs();
            assert!(d <= 2.0 * eps * (1.0 - eps.ln()));
        }
    }

    #[test]
    fn ratio_rules() {
        assert_eq!(scaling_ratio(0.0, 0.0, 0).unwrap(), 0.0);
        assert_eq!(scaling_ratio(1.0, 2.0, 0).unwrap(), 0.5);
        assert!(matches!(
            scaling_ratio(1.0, 0.0, 3),
            Err(Error::InfeasibleZeroSlice { index: 3, .. })
        ));
    }

    #[test]
    fn lse() {
        let v = [0.0f64, (2.0f64).ln()];
        assert!((log_sum_exp(&v) - 3.0f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
