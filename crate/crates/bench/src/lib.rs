//! Problem fixtures shared by the solver benchmarks.

use bregmanot::shapes::gaussian_mixture;
use bregmanot::{CostMatrix, GibbsKernel, SeparableKernel};
use ndarray::{Array1, Array2};

/// Two smooth histograms on `n` cells of `[0, 1]`.
pub fn histogram_pair(n: usize) -> (Array1<f64>, Array1<f64>) {
    let p = gaussian_mixture(n, &[(1.0, 0.3, 0.1)], 1e-3).expect("valid mixture");
    let q = gaussian_mixture(n, &[(0.6, 0.6, 0.08), (0.4, 0.85, 0.05)], 1e-3).expect("valid mixture");
    (p, q)
}

pub fn gibbs_1d(n: usize, gamma: f64) -> GibbsKernel {
    GibbsKernel::new(CostMatrix::grid_1d(n).entries, gamma).expect("positive gamma")
}

/// Separable kernel for the squared distance on an `n x n` image grid.
pub fn gibbs_2d(n: usize, gamma: f64) -> SeparableKernel {
    let k: Array2<f64> = gibbs_1d(n, gamma).entries;
    SeparableKernel::new(k.clone(), k)
}
