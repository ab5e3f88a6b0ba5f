//! Constraint sets whose KL projections are diagonal scalings or clippings.

use ndarray::{Array, Array1, ArrayBase, Axis, Data, Dimension, RemoveAxis};

use crate::engine::ConstraintSet;
use crate::error::{Error, Result};
use crate::kl::scaling_ratio;

/// Sum of all entries sharing index `i` along `axis`: the push-forward on that axis.
pub fn axis_marginal<S, D>(plan: &ArrayBase<S, D>, axis: usize) -> Array1<f64>
where
    S: Data<Elem = f64>,
    D: RemoveAxis,
{
    let n = plan.len_of(Axis(axis));
    Array1::from_shape_fn(n, |i| plan.index_axis(Axis(axis), i).sum())
}

fn axis_log_marginal<D: RemoveAxis>(log_plan: &Array<f64, D>, axis: usize) -> Array1<f64> {
    let n = log_plan.len_of(Axis(axis));
    Array1::from_shape_fn(n, |i| {
        let slice = log_plan.index_axis(Axis(axis), i);
        let max = slice.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            max + slice.fold(0.0, |s, &v| s + (v - max).exp()).ln()
        }
    })
}

fn check_axis<D: Dimension>(plan: &Array<f64, D>, axis: usize, target_len: usize) -> Result<()> {
    if axis >= plan.ndim() {
        return Err(Error::IndexOutOfRange { index: axis, len: plan.ndim() });
    }
    let n = plan.len_of(Axis(axis));
    if n != target_len {
        return Err(Error::ShapeMismatch { expected: vec![target_len], got: vec![n] });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    Equal,
    Upper,
}

/// `S_axis(pi) = target` or `S_axis(pi) <= target`.
///
/// For matrices, axis 0 constrains row sums and axis 1 column sums.
#[derive(Debug, Clone)]
pub struct AxisMarginal {
    pub axis: usize,
    pub target: Array1<f64>,
    pub bound: Bound,
}

impl AxisMarginal {
    pub fn equal(axis: usize, target: Array1<f64>) -> Self {
        Self { axis, target, bound: Bound::Equal }
    }

    pub fn upper(axis: usize, target: Array1<f64>) -> Self {
        Self { axis, target, bound: Bound::Upper }
    }

    /// Per-slice multiplicative factors for the current marginal `current`.
    pub fn factors(&self, current: &Array1<f64>) -> Result<Array1<f64>> {
        self.target
            .iter()
            .zip(current.iter())
            .enumerate()
            .map(|(i, (&t, &s))| match self.bound {
                Bound::Equal => scaling_ratio(t, s, i),
                Bound::Upper => Ok(if s <= t { 1.0 } else { t / s }),
            })
            .collect::<Result<Vec<_>>>()
            .map(Array1::from)
    }

    fn log_shifts(&self, log_current: &Array1<f64>) -> Result<Array1<f64>> {
        self.target
            .iter()
            .zip(log_current.iter())
            .enumerate()
            .map(|(i, (&t, &ls))| {
                let lt = t.ln();
                match self.bound {
                    Bound::Equal => {
                        if ls == f64::NEG_INFINITY {
                            if t == 0.0 {
                                Ok(0.0)
                            } else {
                                Err(Error::InfeasibleZeroSlice { index: i, target: t })
                            }
                        } else {
                            Ok(lt - ls)
                        }
                    }
                    Bound::Upper => Ok(if ls <= lt { 0.0 } else { lt - ls }),
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(Array1::from)
    }
}

impl<D: RemoveAxis> ConstraintSet<Array<f64, D>> for AxisMarginal {
    fn project(&self, plan: &mut Array<f64, D>) -> Result<()> {
        check_axis(plan, self.axis, self.target.len())?;
        let current = axis_marginal(plan, self.axis);
        let factors = self.factors(&current)?;
        for (i, &f) in factors.iter().enumerate() {
            if f != 1.0 {
                plan.index_axis_mut(Axis(self.axis), i).mapv_inplace(|x| x * f);
            }
        }
        Ok(())
    }

    fn project_log(&self, log_plan: &mut Array<f64, D>) -> Result<()> {
        check_axis(log_plan, self.axis, self.target.len())?;
        let current = axis_log_marginal(log_plan, self.axis);
        let shifts = self.log_shifts(&current)?;
        for (i, &s) in shifts.iter().enumerate() {
            if s != 0.0 {
                log_plan.index_axis_mut(Axis(self.axis), i).mapv_inplace(|x| x + s);
            }
        }
        Ok(())
    }

    fn residual(&self, plan: &Array<f64, D>) -> f64 {
        let current = axis_marginal(plan, self.axis);
        current
            .iter()
            .zip(self.target.iter())
            .map(|(&s, &t)| match self.bound {
                Bound::Equal => (s - t).abs(),
                Bound::Upper => (s - t).max(0.0),
            })
            .fold(0.0, f64::max)
    }

    fn is_affine(&self) -> bool {
        self.bound == Bound::Equal
    }
}

/// `sum(pi) = mass`.
#[derive(Debug, Clone, Copy)]
pub struct TotalMass {
    pub mass: f64,
}

impl TotalMass {
    pub fn new(mass: f64) -> Self {
        Self { mass }
    }
}

impl<D: Dimension> ConstraintSet<Array<f64, D>> for TotalMass {
    fn project(&self, plan: &mut Array<f64, D>) -> Result<()> {
        let total = plan.sum();
        if total > 0.0 {
            let f = self.mass / total;
            plan.mapv_inplace(|x| x * f);
            Ok(())
        } else if self.mass == 0.0 {
            Ok(())
        } else {
            Err(Error::ZeroTotalMass { mass: self.mass })
        }
    }

    fn project_log(&self, log_plan: &mut Array<f64, D>) -> Result<()> {
        let lse = crate::kl::log_sum_exp(log_plan.as_slice_memory_order().unwrap_or(&[]));
        if lse == f64::NEG_INFINITY {
            return if self.mass == 0.0 { Ok(()) } else { Err(Error::ZeroTotalMass { mass: self.mass }) };
        }
        let shift = self.mass.ln() - lse;
        log_plan.mapv_inplace(|x| x + shift);
        Ok(())
    }

    fn residual(&self, plan: &Array<f64, D>) -> f64 {
        (plan.sum() - self.mass).abs()
    }

    fn is_affine(&self) -> bool {
        true
    }
}

/// Entry-wise upper bound `pi <= theta`.
#[derive(Debug, Clone)]
pub struct EntryUpperBound<D: Dimension> {
    pub theta: Array<f64, D>,
}

impl<D: Dimension> EntryUpperBound<D> {
    pub fn new(theta: Array<f64, D>) -> Self {
        Self { theta }
    }
}

impl<D: Dimension> ConstraintSet<Array<f64, D>> for EntryUpperBound<D> {
    fn project(&self, plan: &mut Array<f64, D>) -> Result<()> {
        crate::kl::check_same_shape(plan, &self.theta)?;
        plan.zip_mut_with(&self.theta, |x, &t| *x = x.min(t));
        Ok(())
    }

    fn project_log(&self, log_plan: &mut Array<f64, D>) -> Result<()> {
        crate::kl::check_same_shape(log_plan, &self.theta)?;
        log_plan.zip_mut_with(&self.theta, |x, &t| *x = x.min(t.ln()));
        Ok(())
    }

    fn residual(&self, plan: &Array<f64, D>) -> f64 {
        let mut m: f64 = 0.0;
        ndarray::Zip::from(plan)
            .and(&self.theta)
            .for_each(|&x, &t| m = m.max(x - t));
        m
    }

    fn is_affine(&self) -> bool {
        false
    }
}
