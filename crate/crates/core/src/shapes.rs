//! Test densities on regular grids: indicator shapes on the unit square and
//! Gaussian mixtures on `[0, 1]`. All outputs are normalized to unit mass.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::kernel::grid_centres;

fn normalized2(mut a: Array2<f64>) -> Result<Array2<f64>> {
    let s = a.sum();
    if s <= 0.0 {
        return Err(Error::ZeroTotalMass { mass: s });
    }
    a /= s;
    Ok(a)
}

/// Indicator of `{(x, y) : inside(x, y)}` sampled at the cell centres of an
/// `n x n` grid (`x` along rows, `y` along columns), normalized.
pub fn indicator(n: usize, inside: impl Fn(f64, f64) -> bool) -> Result<Array2<f64>> {
    let c = grid_centres(n);
    normalized2(Array2::from_shape_fn((n, n), |(i, j)| if inside(c[i], c[j]) { 1.0 } else { 0.0 }))
}

pub fn disk(n: usize, centre: (f64, f64), radius: f64) -> Result<Array2<f64>> {
    indicator(n, |x, y| (x - centre.0).powi(2) + (y - centre.1).powi(2) <= radius * radius)
}

pub fn annulus(n: usize, centre: (f64, f64), inner: f64, outer: f64) -> Result<Array2<f64>> {
    indicator(n, |x, y| {
        let r2 = (x - centre.0).powi(2) + (y - centre.1).powi(2);
        r2 >= inner * inner && r2 <= outer * outer
    })
}

/// Axis-aligned square of half side `half`.
pub fn square(n: usize, centre: (f64, f64), half: f64) -> Result<Array2<f64>> {
    indicator(n, |x, y| (x - centre.0).abs() <= half && (y - centre.1).abs() <= half)
}

/// L1 ball of radius `radius`.
pub fn diamond(n: usize, centre: (f64, f64), radius: f64) -> Result<Array2<f64>> {
    indicator(n, |x, y| (x - centre.0).abs() + (y - centre.1).abs() <= radius)
}

pub fn ellipse(n: usize, centre: (f64, f64), axes: (f64, f64)) -> Result<Array2<f64>> {
    indicator(n, |x, y| ((x - centre.0) / axes.0).powi(2) + ((y - centre.1) / axes.1).powi(2) <= 1.0)
}

/// Gaussian mixture `sum w_i N(mu_i, s_i^2)` sampled at `n` cell centres of
/// `[0, 1]` plus a floor `floor` per cell, normalized.
pub fn gaussian_mixture(n: usize, components: &[(f64, f64, f64)], floor: f64) -> Result<Array1<f64>> {
    let x = grid_centres(n);
    let a = x.mapv(|t| {
        floor
            + components
                .iter()
                .map(|&(w, mu, s)| w * (-(t - mu).powi(2) / (2.0 * s * s)).exp())
                .sum::<f64>()
    });
    let s = a.sum();
    if s <= 0.0 {
        return Err(Error::ZeroTotalMass { mass: s });
    }
    Ok(a / s)
}

/// Mass-weighted mean position `(x, y)` of a density on the unit-square grid.
pub fn grid_mean(density: &Array2<f64>) -> (f64, f64) {
    let (n1, n2) = density.dim();
    let (c1, c2) = (grid_centres(n1), grid_centres(n2));
    let mass = density.sum();
    let mut m = (0.0, 0.0);
    for ((i, j), &w) in density.indexed_iter() {
        m.0 += w * c1[i];
        m.1 += w * c2[j];
    }
    (m.0 / mass, m.1 / mass)
}
