//! Product-space lifting of a KL projection onto `C_1 ∩ ... ∩ C_L`.
//!
//! The plan is replicated into `L` copies and the weighted divergence
//! `sum_l lambda_l KL(pi^l | xi)` is minimized over the intersection of the
//! separable set `{pi^l ∈ C_l}` and the diagonal set `{pi^1 = ... = pi^L}`.
//! Both lifted projections are symmetric in the slot order, so the result
//! does not depend on how the constraints are listed.

use crate::engine::{bregman_solve, dykstra_solve, ConstraintSet, Plan, Solution, SolveOptions};
use crate::error::{Error, Result};
use crate::kl::check_simplex;

/// `L` copies of a plan stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPlan<P: Plan> {
    template: P,
    data: Vec<f64>,
    copies: usize,
}

impl<P: Plan> LiftedPlan<P> {
    pub fn replicate(plan: &P, copies: usize) -> Self {
        let data = plan.as_flat().repeat(copies);
        Self { template: plan.clone(), data, copies }
    }

    pub fn from_copies(copies: &[P]) -> Result<Self> {
        let first = copies
            .first()
            .ok_or_else(|| Error::InvalidArgument("a lifted plan needs at least one copy".into()))?;
        let len = first.as_flat().len();
        let mut data = Vec::with_capacity(len * copies.len());
        for c in copies {
            if c.as_flat().len() != len {
                return Err(Error::ShapeMismatch { expected: vec![len], got: vec![c.as_flat().len()] });
            }
            data.extend_from_slice(c.as_flat());
        }
        Ok(Self { template: first.clone(), data, copies: copies.len() })
    }

    pub fn len(&self) -> usize {
        self.copies
    }

    pub fn is_empty(&self) -> bool {
        self.copies == 0
    }

    fn copy_len(&self) -> usize {
        self.template.as_flat().len()
    }

    pub fn slot(&self, l: usize) -> &[f64] {
        let n = self.copy_len();
        &self.data[l * n..(l + 1) * n]
    }

    fn slot_mut(&mut self, l: usize) -> &mut [f64] {
        let n = self.copy_len();
        &mut self.data[l * n..(l + 1) * n]
    }

    /// Copy `l` as a standalone plan.
    pub fn copy(&self, l: usize) -> P {
        let mut out = self.template.clone();
        out.as_flat_mut().copy_from_slice(self.slot(l));
        out
    }

    pub fn copies(&self) -> Vec<P> {
        (0..self.copies).map(|l| self.copy(l)).collect()
    }

    /// Largest spread `max_l - min_l` over entries; zero on the diagonal set.
    pub fn diagonal_gap(&self) -> f64 {
        let n = self.copy_len();
        (0..n)
            .map(|i| {
                let (lo, hi) = (0..self.copies).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), l| {
                    let x = self.data[l * n + i];
                    (lo.min(x), hi.max(x))
                });
                hi - lo
            })
            .fold(0.0, f64::max)
    }
}

impl<P: Plan> Plan for LiftedPlan<P> {
    fn as_flat(&self) -> &[f64] {
        &self.data
    }

    fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Validates lifting weights: a point of the simplex with no zero entry.
pub fn check_lifting_weights(weights: &[f64]) -> Result<()> {
    check_simplex(weights)?;
    match weights.iter().position(|&w| w <= 0.0) {
        Some(index) => Err(Error::ZeroWeight { index }),
        None => Ok(()),
    }
}

/// `{pi^1 = ... = pi^L}` under the `weights`-weighted KL divergence.
#[derive(Debug, Clone)]
pub struct DiagonalSet {
    weights: Vec<f64>,
}

impl DiagonalSet {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_lifting_weights(&weights)?;
        Ok(Self { weights })
    }

    fn check_len<P: Plan>(&self, plan: &LiftedPlan<P>) -> Result<()> {
        if plan.len() != self.weights.len() {
            return Err(Error::ShapeMismatch { expected: vec![self.weights.len()], got: vec![plan.len()] });
        }
        Ok(())
    }
}

impl<P: Plan> ConstraintSet<LiftedPlan<P>> for DiagonalSet {
    /// Every copy becomes the entry-wise weighted geometric mean.
    fn project(&self, plan: &mut LiftedPlan<P>) -> Result<()> {
        self.check_len(plan)?;
        let n = plan.copy_len();
        for i in 0..n {
            let mut log_mean = 0.0;
            for (l, &w) in self.weights.iter().enumerate() {
                let x = plan.data[l * n + i];
                if x <= 0.0 {
                    return Err(Error::ZeroEntryUnderPositiveWeight { slot: l, index: i });
                }
                log_mean += w * x.ln();
            }
            let mean = log_mean.exp();
            for l in 0..plan.copies {
                plan.data[l * n + i] = mean;
            }
        }
        Ok(())
    }

    fn project_log(&self, log_plan: &mut LiftedPlan<P>) -> Result<()> {
        self.check_len(log_plan)?;
        let n = log_plan.copy_len();
        for i in 0..n {
            let mut mean = 0.0;
            for (l, &w) in self.weights.iter().enumerate() {
                let x = log_plan.data[l * n + i];
                if x == f64::NEG_INFINITY {
                    return Err(Error::ZeroEntryUnderPositiveWeight { slot: l, index: i });
                }
                mean += w * x;
            }
            for l in 0..log_plan.copies {
                log_plan.data[l * n + i] = mean;
            }
        }
        Ok(())
    }

    fn residual(&self, plan: &LiftedPlan<P>) -> f64 {
        plan.diagonal_gap()
    }

    fn is_affine(&self) -> bool {
        true
    }
}

/// `{pi^l ∈ C_l for every l}`: one constraint per copy.
pub struct SeparableSet<'a, P: Plan> {
    constraints: Vec<&'a dyn ConstraintSet<P>>,
}

impl<'a, P: Plan> SeparableSet<'a, P> {
    pub fn new(constraints: Vec<&'a dyn ConstraintSet<P>>) -> Self {
        Self { constraints }
    }

    fn check_len(&self, plan: &LiftedPlan<P>) -> Result<()> {
        if plan.len() != self.constraints.len() {
            return Err(Error::ShapeMismatch { expected: vec![self.constraints.len()], got: vec![plan.len()] });
        }
        Ok(())
    }

    fn each(&self, plan: &mut LiftedPlan<P>, log: bool) -> Result<()> {
        self.check_len(plan)?;
        for (l, c) in self.constraints.iter().enumerate() {
            let mut copy = plan.copy(l);
            let out = if log { c.project_log(&mut copy) } else { c.project(&mut copy) };
            out.map_err(|e| Error::InSlot { slot: l, source: Box::new(e) })?;
            plan.slot_mut(l).copy_from_slice(copy.as_flat());
        }
        Ok(())
    }
}

impl<P: Plan> ConstraintSet<LiftedPlan<P>> for SeparableSet<'_, P> {
    fn project(&self, plan: &mut LiftedPlan<P>) -> Result<()> {
        self.each(plan, false)
    }

    fn project_log(&self, log_plan: &mut LiftedPlan<P>) -> Result<()> {
        self.each(log_plan, true)
    }

    fn residual(&self, plan: &LiftedPlan<P>) -> f64 {
        self.constraints
            .iter()
            .enumerate()
            .map(|(l, c)| c.residual(&plan.copy(l)))
            .fold(0.0, f64::max)
    }

    fn is_affine(&self) -> bool {
        self.constraints.iter().all(|c| c.is_affine())
    }
}

/// Entry-wise weighted geometric mean of `copies`, written into every copy.
pub fn project_diagonal<P: Plan>(copies: &[P], weights: &[f64]) -> Result<Vec<P>> {
    let mut lifted = LiftedPlan::from_copies(copies)?;
    DiagonalSet::new(weights.to_vec())?.project(&mut lifted)?;
    Ok(lifted.copies())
}

/// Copy `l` replaced by its projection onto `constraints[l]`.
pub fn project_separable<P: Plan>(copies: &[P], constraints: &[&dyn ConstraintSet<P>]) -> Result<Vec<P>> {
    let mut lifted = LiftedPlan::from_copies(copies)?;
    SeparableSet::new(constraints.to_vec()).project(&mut lifted)?;
    Ok(lifted.copies())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LiftedMode {
    /// Bregman when every constraint is affine, Dykstra otherwise.
    #[default]
    Auto,
    Bregman,
    Dykstra,
}

impl std::str::FromStr for LiftedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "bregman" => Ok(Self::Bregman),
            "dykstra" => Ok(Self::Dykstra),
            other => Err(Error::InvalidArgument(format!("unknown solver mode {other:?}"))),
        }
    }
}

/// Uniform lifting weights.
pub fn uniform_weights(l: usize) -> Vec<f64> {
    vec![1.0 / l as f64; l]
}

/// Full lifted iterate; each cycle projects onto the separable set, then the diagonal.
pub fn lifted_solve_copies<P: Plan>(
    kernel: &P,
    constraints: &[&dyn ConstraintSet<P>],
    weights: &[f64],
    mode: LiftedMode,
    opts: &SolveOptions,
) -> Result<Solution<LiftedPlan<P>>> {
    if constraints.len() != weights.len() {
        return Err(Error::ShapeMismatch { expected: vec![constraints.len()], got: vec![weights.len()] });
    }
    let diagonal = DiagonalSet::new(weights.to_vec())?;
    let separable = SeparableSet::new(constraints.to_vec());
    let start = LiftedPlan::replicate(kernel, constraints.len());
    let sets: [&dyn ConstraintSet<LiftedPlan<P>>; 2] = [&separable, &diagonal];
    let affine = separable.is_affine();
    match mode {
        LiftedMode::Bregman if !affine => Err(Error::NonAffineConstraint {
            index: constraints.iter().position(|c| !c.is_affine()).unwrap_or(0),
        }),
        LiftedMode::Bregman => bregman_solve(&start, &sets, opts),
        LiftedMode::Auto if affine => bregman_solve(&start, &sets, opts),
        LiftedMode::Auto | LiftedMode::Dykstra => dykstra_solve(&start, &sets, opts),
    }
}

/// Lifted solve returning the common copy.
pub fn lifted_solve<P: Plan>(
    kernel: &P,
    constraints: &[&dyn ConstraintSet<P>],
    weights: &[f64],
    mode: LiftedMode,
    opts: &SolveOptions,
) -> Result<Solution<P>> {
    let sol = lifted_solve_copies(kernel, constraints, weights, mode, opts)?;
    Ok(Solution { plan: sol.plan.copy(0), diagnostics: sol.diagnostics })
}
