//! Subcommand implementations: read inputs, solve, write outputs, report.

use std::path::{Path, PathBuf};

use bregmanot::barycenter::{barycenter_solve, BarycenterProblem};
use bregmanot::constrained::{active_regions_from_marginals, capacity_transport, multimarginal_partial, partial_transport, CapacityProblem, PartialProblem};
use bregmanot::entropic_ot::{build_gibbs, sinkhorn, sinkhorn_log, transport_cost};
use bregmanot::euler_flow::{build_euler_kernel, ipfp_factored_with, scalings_marginals, transition_matrix, EulerMap, SweepStrategy};
use bregmanot::io::{read_matrix_csv, read_pgm, read_vector_csv, write_matrix_csv, write_pgm_heatmap, write_vector_csv, PgmDepth};
use bregmanot::lifting::{lifted_solve, LiftedMode};
use bregmanot::martingale::{build_lognormal_case, martingale_solve, MartingaleProblem};
use bregmanot::multimarginal::{barycenter_cost_tensor, barycenter_measure, gibbs_tensor, multimarginal_solve, push_forward, DEFAULT_MEMORY_LIMIT};
use bregmanot::tomography::{ot_reconstruct, RadonOperator, ReconstructionProblem};
use bregmanot::{
    grid_centres, AxisMarginal, ConstraintSet, CostMatrix, Diagnostics, Error, Result, SeparableKernel,
    SolveOptions, TotalMass,
};
use ndarray::{Array1, Array2, Axis};
use serde_json::{json, Value};

use crate::{Command, Common, Mode, Strategy};

pub struct Report {
    pub json: Value,
    pub converged: bool,
}

/// Thread count after applying the `BREGMANOT_THREADS` override.
fn threads(common: &Common) -> Result<usize> {
    match std::env::var("BREGMANOT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("BREGMANOT_THREADS must be a positive integer, got {v:?}"))),
        Err(_) if common.threads == 0 => Err(Error::InvalidArgument("--threads must be positive".into())),
        Err(_) => Ok(common.threads),
    }
}

fn options(common: &Common) -> Result<SolveOptions> {
    if !(common.gamma > 0.0 && common.gamma.is_finite()) {
        return Err(Error::NonPositiveGamma(common.gamma));
    }
    if !(common.tol > 0.0) {
        return Err(Error::InvalidArgument(format!("--tol must be positive, got {}", common.tol)));
    }
    std::fs::create_dir_all(&common.out)?;
    Ok(SolveOptions::default()
        .with_tol(common.tol)
        .with_max_iter(common.max_iter)
        .with_log_domain(common.log_domain))
}

fn out_path(common: &Common, name: &str) -> PathBuf {
    common.out.join(name)
}

fn report(command: &str, common: &Common, diag: &Diagnostics, extra: Value) -> Result<Report> {
    let mut json = json!({
        "command": command,
        "iterations": diag.iterations,
        "residual": diag.residual,
        "change": diag.change,
        "converged": diag.converged,
        "gamma": common.gamma,
        "threads": threads(common)?,
    });
    if let (Value::Object(map), Value::Object(more)) = (&mut json, extra) {
        map.extend(more);
    }
    Ok(Report { json, converged: diag.converged })
}

fn is_pgm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn read_cost(path: &Path) -> Result<CostMatrix> {
    CostMatrix::new(read_matrix_csv(path)?)
}

/// 1-D supports of several histograms, one `n x 1` point matrix each.
fn line_supports(marginals: &[Array1<f64>]) -> Vec<Array2<f64>> {
    marginals
        .iter()
        .map(|m| grid_centres(m.len()).insert_axis(Axis(1)))
        .collect()
}

fn uniform_or(weights: Option<Vec<f64>>, k: usize) -> Vec<f64> {
    weights.unwrap_or_else(|| vec![1.0 / k as f64; k])
}

pub fn run(command: Command) -> Result<Report> {
    match command {
        Command::Sinkhorn { p, q, cost, common } => {
            let opts = options(&common)?;
            let (p, q, cost) = (read_vector_csv(p)?, read_vector_csv(q)?, read_cost(&cost)?);
            let (plan, diag) = if common.log_domain {
                let sol = sinkhorn_log(&cost, common.gamma, &p, &q, &opts)?;
                (sol.state.plan(&cost), sol.diagnostics)
            } else {
                let kernel = build_gibbs(&cost, common.gamma)?;
                let sol = sinkhorn(&kernel, &p, &q, &opts)?;
                (sol.state.plan(&kernel), sol.diagnostics)
            };
            write_matrix_csv(out_path(&common, "plan.csv"), &plan)?;
            let c = transport_cost(&plan, &cost, common.gamma)?;
            report("sinkhorn", &common, &diag, json!({ "cost": c.linear, "regularized_cost": c.regularized }))
        }
        Command::Barycenter { inputs, weights, cost, common } => {
            let opts = options(&common)?;
            let weights = uniform_or(weights, inputs.len());
            if inputs.iter().all(|p| is_pgm(p)) {
                let images = inputs.iter().map(read_pgm).collect::<Result<Vec<_>>>()?;
                let (n1, n2) = images[0].dim();
                let marginals = images
                    .iter()
                    .map(|img| {
                        if img.dim() != (n1, n2) {
                            return Err(Error::ShapeMismatch { expected: vec![n1, n2], got: img.shape().to_vec() });
                        }
                        Ok(Array1::from_iter(img.iter().copied()) / img.sum())
                    })
                    .collect::<Result<Vec<_>>>()?;
                let kernel = SeparableKernel::unit_square(n1, n2, common.gamma)?;
                let sol = barycenter_solve(&kernel, &BarycenterProblem::new(marginals, weights)?, &opts)?;
                let image = sol.state.p.clone().into_shape_with_order((n1, n2)).expect("grid shape");
                write_matrix_csv(out_path(&common, "barycenter.csv"), &image)?;
                write_pgm_heatmap(out_path(&common, "barycenter.pgm"), &image, PgmDepth::Sixteen)?;
                report("barycenter", &common, &sol.diagnostics, json!({ "mass": sol.state.p.sum() }))
            } else {
                let cost = cost.ok_or_else(|| Error::InvalidArgument("--cost is required for CSV inputs".into()))?;
                let marginals = inputs.iter().map(read_vector_csv).collect::<Result<Vec<_>>>()?;
                let kernel = build_gibbs(&read_cost(&cost)?, common.gamma)?;
                let sol = barycenter_solve(&kernel, &BarycenterProblem::new(marginals, weights)?, &opts)?;
                write_vector_csv(out_path(&common, "barycenter.csv"), &sol.state.p)?;
                report("barycenter", &common, &sol.diagnostics, json!({ "mass": sol.state.p.sum() }))
            }
        }
        Command::Multimarginal { marginals, weights, common } => {
            let opts = options(&common)?;
            let marginals = marginals.iter().map(read_vector_csv).collect::<Result<Vec<_>>>()?;
            let weights = uniform_or(weights, marginals.len());
            let points = line_supports(&marginals);
            let cost = barycenter_cost_tensor(&points, &weights, DEFAULT_MEMORY_LIMIT)?;
            let kernel = gibbs_tensor(&cost, common.gamma)?;
            let sol = multimarginal_solve(&kernel, &marginals, &opts)?;
            let plan = sol.plan(&kernel);
            let objective = (&plan * &cost).sum();
            let cloud = barycenter_measure(&plan, &points, &weights)?;
            let table = ndarray::concatenate(Axis(1), &[cloud.points.view(), cloud.masses.view().insert_axis(Axis(1))])
                .expect("matching rows");
            write_matrix_csv(out_path(&common, "barycenter_points.csv"), &table)?;
            for k in 0..marginals.len() {
                write_vector_csv(out_path(&common, &format!("marginal_{}.csv", k + 1)), &push_forward(&plan, k)?)?;
            }
            report("multimarginal", &common, &sol.diagnostics, json!({ "cost": objective, "support_points": cloud.len() }))
        }
        Command::EulerFlow { n, k, map, strategy, common } => {
            let opts = options(&common)?;
            let map: EulerMap = map.parse()?;
            let x = grid_centres(n);
            let kernel = build_euler_kernel(&x, &map.permutation(n), k, common.gamma)?;
            let strategy = match strategy {
                Strategy::Recompute => SweepStrategy::Recompute,
                Strategy::Cached => SweepStrategy::Cached,
            };
            let sol = ipfp_factored_with(&kernel, &opts, strategy)?;
            let mut worst: f64 = 0.0;
            for step in 0..k {
                let t = transition_matrix(&sol, &kernel, step)?;
                let name = format!("T_1_{:02}", step + 1);
                write_matrix_csv(out_path(&common, &format!("{name}.csv")), &t)?;
                write_pgm_heatmap(out_path(&common, &format!("{name}.pgm")), &t, PgmDepth::Sixteen)?;
                for axis in [0, 1] {
                    let dev = t.sum_axis(Axis(axis)).iter().map(|v| (v - 1.0 / n as f64).abs()).fold(0.0, f64::max);
                    worst = worst.max(dev);
                }
            }
            let marg = scalings_marginals(&kernel, &sol);
            let slot = marg.iter().flat_map(|m| m.iter().map(|v| (v - 1.0 / n as f64).abs())).fold(0.0, f64::max);
            report("euler-flow", &common, &sol.diagnostics, json!({ "transition_marginal_error": worst, "slot_marginal_error": slot }))
        }
        Command::Partial { p, q, cost, mass, common } => {
            let opts = options(&common)?;
            let (p, q) = (read_vector_csv(p)?, read_vector_csv(q)?);
            let cost = read_cost(&cost)?;
            let m = mass.unwrap_or(0.7 * p.sum().min(q.sum()));
            let problem = PartialProblem::new(p, q, m)?;
            let kernel = build_gibbs(&cost, common.gamma)?;
            let sol = partial_transport(&kernel, &problem, &opts)?;
            let plan = sol.plan(&kernel);
            write_matrix_csv(out_path(&common, "plan.csv"), &plan)?;
            let (rows, cols) = (sol.row_marginal(&kernel), sol.col_marginal(&kernel));
            let (src, dst) = active_regions_from_marginals(&rows, &cols, m, problem.eta);
            let mask = |v: Vec<bool>| Array1::from_iter(v.into_iter().map(|b| if b { 1.0 } else { 0.0 }));
            write_vector_csv(out_path(&common, "active_source.csv"), &mask(src))?;
            write_vector_csv(out_path(&common, "active_target.csv"), &mask(dst))?;
            let c = transport_cost(&plan, &cost, common.gamma)?;
            report("partial", &common, &sol.diagnostics, json!({ "mass": plan.sum(), "target_mass": m, "cost": c.linear }))
        }
        Command::Capacity { p, q, cost, theta, theta_file, common } => {
            let opts = options(&common)?;
            let (p, q) = (read_vector_csv(p)?, read_vector_csv(q)?);
            let cost = read_cost(&cost)?;
            let problem = match (theta, theta_file) {
                (Some(t), None) => CapacityProblem::uniform_bound(p, q, t)?,
                (None, Some(path)) => CapacityProblem::new(p, q, read_matrix_csv(path)?)?,
                _ => return Err(Error::InvalidArgument("one of --theta or --theta-file is required".into())),
            };
            let sol = if common.log_domain {
                let log_kernel = cost.entries.mapv(|c| -c / common.gamma);
                let rows = AxisMarginal::equal(0, problem.p.clone());
                let cols = AxisMarginal::equal(1, problem.q.clone());
                let cap = bregmanot::EntryUpperBound::new(problem.theta.clone());
                let sets: [&dyn ConstraintSet<Array2<f64>>; 3] = [&rows, &cols, &cap];
                bregmanot::dykstra_solve_log(&log_kernel, &sets, &opts)?
            } else {
                capacity_transport(&build_gibbs(&cost, common.gamma)?.entries, &problem, &opts)?
            };
            write_matrix_csv(out_path(&common, "plan.csv"), &sol.plan)?;
            let saturated = sol.plan.iter().zip(&problem.theta).filter(|(v, t)| **v >= 0.99 * **t).count();
            let c = transport_cost(&sol.plan, &cost, common.gamma)?;
            report("capacity", &common, &sol.diagnostics, json!({ "cost": c.linear, "saturated_entries": saturated }))
        }
        Command::PartialMm { marginals, mass, common } => {
            let opts = options(&common)?;
            let marginals = marginals.iter().map(read_vector_csv).collect::<Result<Vec<_>>>()?;
            let k = marginals.len();
            let min = marginals.iter().map(|m| m.sum()).fold(f64::INFINITY, f64::min);
            let m = mass.unwrap_or(0.7 * min);
            let points = line_supports(&marginals);
            let cost = barycenter_cost_tensor(&points, &vec![1.0 / k as f64; k], DEFAULT_MEMORY_LIMIT)?;
            let kernel = gibbs_tensor(&cost, common.gamma)?;
            let sol = multimarginal_partial(&kernel, &marginals, m, &opts)?;
            for slot in 0..k {
                write_vector_csv(out_path(&common, &format!("marginal_{}.csv", slot + 1)), &push_forward(&sol.plan, slot)?)?;
            }
            let objective = (&sol.plan * &cost).sum();
            report("partial-mm", &common, &sol.diagnostics, json!({ "mass": sol.plan.sum(), "target_mass": m, "cost": objective }))
        }
        Command::Martingale { lognormal, sigma0sq, sigma1sq, n, x, y, p, q, cost, common } => {
            let opts = options(&common)?;
            let problem = if lognormal {
                build_lognormal_case(n, sigma0sq, sigma1sq, common.gamma)?
            } else {
                let need = |v: Option<PathBuf>, name: &str| v.ok_or_else(|| Error::InvalidArgument(format!("--{name} is required")));
                MartingaleProblem::new(
                    read_vector_csv(need(x, "x")?)?,
                    read_vector_csv(need(y, "y")?)?,
                    read_vector_csv(need(p, "p")?)?,
                    read_vector_csv(need(q, "q")?)?,
                    read_matrix_csv(need(cost, "cost")?)?,
                    common.gamma,
                )?
            };
            let sol = martingale_solve(&problem, &opts)?;
            write_matrix_csv(out_path(&common, "plan.csv"), &sol.plan())?;
            write_vector_csv(out_path(&common, "x.csv"), &problem.x)?;
            write_vector_csv(out_path(&common, "y.csv"), &problem.y)?;
            let r = sol.report(&problem);
            report(
                "martingale",
                &common,
                &sol.diagnostics,
                json!({
                    "cost": r.cost,
                    "row_residual": r.row_residual,
                    "col_residual": r.col_residual,
                    "martingale_residual": r.martingale_residual,
                }),
            )
        }
        Command::Radon { sinogram, image, angles, template, lambda1, common } => {
            let opts = options(&common)?;
            let (op, sino) = match (sinogram, image) {
                (Some(path), _) => {
                    let s = read_matrix_csv(path)?;
                    (RadonOperator::equispaced(s.ncols(), s.nrows())?, s)
                }
                (None, Some(path)) => {
                    let f = read_pgm(path)?;
                    if f.nrows() != f.ncols() {
                        return Err(Error::ShapeMismatch { expected: vec![f.nrows(), f.nrows()], got: f.shape().to_vec() });
                    }
                    let op = RadonOperator::equispaced(f.nrows(), angles)?;
                    let s = op.forward(f.view())?;
                    write_matrix_csv(out_path(&common, "sinogram.csv"), &s)?;
                    (op, s)
                }
                (None, None) => return Err(Error::InvalidArgument("--sinogram or --image is required".into())),
            };
            let ls = op.least_squares_inverse(sino.view(), 1e-10)?;
            write_matrix_csv(out_path(&common, "least_squares.csv"), &ls)?;
            write_pgm_heatmap(out_path(&common, "least_squares.pgm"), &ls.mapv(|v| v.max(0.0)), PgmDepth::Sixteen)?;
            let Some(template) = template else {
                let done = Diagnostics { iterations: 0, residual: 0.0, change: 0.0, converged: true };
                return report("radon", &common, &done, json!({ "method": "least-squares" }));
            };
            let g0 = read_pgm(template)?;
            let g0 = &g0 / g0.sum();
            let sino = &sino / sino.row(0).sum();
            let problem = ReconstructionProblem::new(op, g0.clone(), sino, lambda1, common.gamma)?;
            let sol = ot_reconstruct(&problem, &opts)?;
            write_matrix_csv(out_path(&common, "reconstruction.csv"), &sol.image)?;
            write_pgm_heatmap(out_path(&common, "reconstruction.pgm"), &sol.image, PgmDepth::Sixteen)?;
            let worst = sol.residuals.iter().copied().fold(0.0, f64::max);
            let rel = (&sol.image - &g0).mapv(f64::abs).sum() / g0.sum();
            report("radon", &common, &sol.diagnostics, json!({ "method": "ot", "max_residual": worst, "relative_l1_to_template": rel }))
        }
        Command::Lifted { p, q, cost, mass, mode, common } => {
            let opts = options(&common)?;
            let (p, q) = (read_vector_csv(p)?, read_vector_csv(q)?);
            let cost = read_cost(&cost)?;
            let kernel = build_gibbs(&cost, common.gamma)?.entries;
            let mode = match mode {
                Mode::Auto => LiftedMode::Auto,
                Mode::Bregman => LiftedMode::Bregman,
                Mode::Dykstra => LiftedMode::Dykstra,
            };
            let sol = match mass {
                None => {
                    let rows = AxisMarginal::equal(0, p);
                    let cols = AxisMarginal::equal(1, q);
                    lifted_solve(&kernel, &[&rows, &cols], &[0.5, 0.5], mode, &opts)?
                }
                Some(m) => {
                    let rows = AxisMarginal::upper(0, p);
                    let cols = AxisMarginal::upper(1, q);
                    let total = TotalMass::new(m);
                    lifted_solve(&kernel, &[&rows, &cols, &total], &[1.0 / 3.0; 3], mode, &opts)?
                }
            };
            write_matrix_csv(out_path(&common, "plan.csv"), &sol.plan)?;
            let c = transport_cost(&sol.plan, &cost, common.gamma)?;
            report("lifted", &common, &sol.diagnostics, json!({ "mass": sol.plan.sum(), "cost": c.linear }))
        }
    }
}
