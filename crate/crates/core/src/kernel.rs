//! Gibbs kernels `exp(-C/gamma)` and the linear-operator view the scaling
//! solvers need.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// A nonnegative matrix used only through products with vectors.
pub trait KernelOp {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// `K v`.
    fn apply(&self, v: ArrayView1<'_, f64>) -> Array1<f64>;
    /// `K^T u`.
    fn apply_transpose(&self, u: ArrayView1<'_, f64>) -> Array1<f64>;
    /// Materializes the operator. Only sensible for small problems.
    fn to_dense(&self) -> Array2<f64>;
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveGamma(gamma))
    }
}

/// Dense `exp(-C/gamma)` together with the cost it came from.
#[derive(Debug, Clone)]
pub struct GibbsKernel {
    pub entries: Array2<f64>,
    pub cost: Array2<f64>,
    pub gamma: f64,
}

impl GibbsKernel {
    pub fn new(cost: Array2<f64>, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let entries = cost.mapv(|c| (-c / gamma).exp());
        let underflow = entries.iter().filter(|&&x| x == 0.0).count();
        if underflow > 0 {
            log::warn!(
                "{underflow} kernel entries underflow to zero at gamma = {gamma:e}; consider log-domain mode"
            );
        }
        Ok(Self { entries, cost, gamma })
    }

    /// Number of entries that underflowed to zero.
    pub fn underflow_count(&self) -> usize {
        self.entries.iter().filter(|&&x| x == 0.0).count()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }
}

impl KernelOp for GibbsKernel {
    fn rows(&self) -> usize {
        self.entries.nrows()
    }

    fn cols(&self) -> usize {
        self.entries.ncols()
    }

    fn apply(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        self.entries.dot(&v)
    }

    fn apply_transpose(&self, u: ArrayView1<'_, f64>) -> Array1<f64> {
        self.entries.t().dot(&u)
    }

    fn to_dense(&self) -> Array2<f64> {
        self.entries.clone()
    }
}

impl KernelOp for Array2<f64> {
    fn rows(&self) -> usize {
        self.nrows()
    }

    fn cols(&self) -> usize {
        self.ncols()
    }

    fn apply(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        self.dot(&v)
    }

    fn apply_transpose(&self, u: ArrayView1<'_, f64>) -> Array1<f64> {
        self.t().dot(&u)
    }

    fn to_dense(&self) -> Array2<f64> {
        self.clone()
    }
}

/// Kernel on a 2-D tensor grid whose cost splits over the two axes:
/// `K[(s1,s2),(t1,t2)] = A[s1,t1] * B[s2,t2]`.
///
/// Grid index `(s1, s2)` is flattened row-major as `s1 * n2 + s2`.
#[derive(Debug, Clone)]
pub struct SeparableKernel {
    pub first: Array2<f64>,
    pub second: Array2<f64>,
}

impl SeparableKernel {
    pub fn new(first: Array2<f64>, second: Array2<f64>) -> Self {
        Self { first, second }
    }

    /// Squared-Euclidean Gibbs kernel on the cell centres of an `n1 x n2` grid
    /// covering the unit square.
    pub fn unit_square(n1: usize, n2: usize, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let axis = |n: usize| {
            let x = grid_centres(n);
            Array2::from_shape_fn((n, n), |(i, j)| (-(x[i] - x[j]).powi(2) / gamma).exp())
        };
        Ok(Self::new(axis(n1), axis(n2)))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.first.nrows(), self.second.nrows())
    }

    fn reshape(&self, v: ArrayView1<'_, f64>, n1: usize, n2: usize) -> Array2<f64> {
        v.to_owned()
            .into_shape_with_order((n1, n2))
            .expect("vector length matches the grid")
    }
}

impl KernelOp for SeparableKernel {
    fn rows(&self) -> usize {
        self.first.nrows() * self.second.nrows()
    }

    fn cols(&self) -> usize {
        self.first.ncols() * self.second.ncols()
    }

    fn apply(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        let m = self.reshape(v, self.first.ncols(), self.second.ncols());
        let out = self.first.dot(&m).dot(&self.second.t());
        Array1::from_iter(out)
    }

    fn apply_transpose(&self, u: ArrayView1<'_, f64>) -> Array1<f64> {
        let m = self.reshape(u, self.first.nrows(), self.second.nrows());
        let out = self.first.t().dot(&m).dot(&self.second);
        Array1::from_iter(out)
    }

    fn to_dense(&self) -> Array2<f64> {
        let (r1, c1) = self.first.dim();
        let (r2, c2) = self.second.dim();
        Array2::from_shape_fn((r1 * r2, c1 * c2), |(s, t)| {
            self.first[[s / r2, t / c2]] * self.second[[s % r2, t % c2]]
        })
    }
}

/// Cell centres `(i + 1/2) / n` of a uniform partition of `[0, 1]`.
pub fn grid_centres(n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |i| (i as f64 + 0.5) / n as f64)
}
