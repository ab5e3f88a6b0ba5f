//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (no libtest harness) so every line is printed.
//! `BREGMANOT_ACCEPTANCE=2,5` restricts the run to the listed criteria.

mod common;

use std::alloc::{GlobalAlloc, Layout, System};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use bregmanot::barycenter::{barycenter_solve, barycenter_solve_observed, BarycenterProblem};
use bregmanot::constrained::{capacity_transport, partial_transport, project_capacity, project_col_leq, project_row_leq, CapacityProblem, PartialProblem};
use bregmanot::entropic_ot::{build_gibbs, sinkhorn, sinkhorn_log, sinkhorn_observed, transport_cost};
use bregmanot::euler_flow::{
    build_euler_kernel, dense_plan, ipfp_factored, ipfp_factored_with, transition_matrix, EulerMap, SweepStrategy,
};
use bregmanot::kl::{col_sums, row_sums};
use bregmanot::lifting::{lifted_solve, project_diagonal, LiftedMode};
use bregmanot::martingale::{build_lognormal_case, martingale_solve, project_c3_mart, MartingalePair, MartingaleProblem};
use bregmanot::multimarginal::{multimarginal_solve, DEFAULT_MEMORY_LIMIT};
use bregmanot::shapes;
use bregmanot::tomography::{ot_reconstruct, RadonOperator, ReconstructionProblem};
use bregmanot::{
    entropy, grid_centres, AxisMarginal, ConstraintSet, CostMatrix, KernelOp, SeparableKernel, SolveOptions, TotalMass,
};
use common::*;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let ptr = unsafe { System.alloc(layout) };
        if !ptr.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        ptr
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Runs `f` and returns its value with the peak heap growth in bytes.
fn peak_during<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    (out, PEAK.load(Ordering::Relaxed).saturating_sub(base))
}

#[derive(Default)]
struct Outcome {
    ok: bool,
    notes: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self { ok: true, notes: Vec::new() }
    }

    fn check(&mut self, cond: bool, note: impl Into<String>) {
        let note = note.into();
        if !cond {
            self.ok = false;
            self.notes.push(format!("FAILED {note}"));
        } else {
            self.notes.push(note);
        }
    }

    fn info(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }
}

fn l1(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(f64::abs).sum()
}

fn sci(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn sup_vec(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    sup(a.as_slice().unwrap(), b.as_slice().unwrap())
}

// 1. Projections against the active-set oracle.
fn engine_oracles() -> Outcome {
    let mut out = Outcome::new();
    let mut r = rng(101);
    let cases = 20;
    let mut worst = [0.0f64; 5];
    for _ in 0..cases {
        let xi = random_positive((3, 3), &mut r);
        let p = random_simplex(3, &mut r);
        let q = random_simplex(3, &mut r);

        let rows = AxisMarginal::equal(0, p.clone());
        let cols = AxisMarginal::equal(1, q.clone());
        let sets: [&dyn ConstraintSet<Array2<f64>>; 2] = [&rows, &cols];
        let opts = SolveOptions::default().with_tol(1e-13).with_max_iter(200_000);
        let got = bregmanot::bregman_solve(&xi, &sets, &opts).unwrap();
        let mut eq = row_constraints(3, 3, p.as_slice().unwrap());
        eq.extend(col_constraints(3, 3, q.as_slice().unwrap()));
        worst[0] = worst[0].max(sup(&flat(&got.plan), &kl_projection(&flat(&xi), &eq, &[])));

        let upper = &p * 0.8;
        let mut got = project_row_leq(&xi, &upper).unwrap();
        got = project_col_leq(&got, &(&q * 0.8)).unwrap();
        let mid = project_row_leq(&xi, &upper).unwrap();
        let want_rows = kl_projection(&flat(&xi), &[], &row_constraints(3, 3, upper.as_slice().unwrap()));
        let want_cols = kl_projection(&flat(&mid), &[], &col_constraints(3, 3, (&q * 0.8).as_slice().unwrap()));
        worst[1] = worst[1].max(sup(&flat(&mid), &want_rows)).max(sup(&flat(&got), &want_cols));

        let free = sinkhorn(&xi, &p, &q, &opts).unwrap().state.plan(&xi);
        let theta = (0.85 * free.iter().copied().fold(0.0, f64::max)).max(0.36);
        let cap = capacity_transport(&xi, &CapacityProblem::uniform_bound(p.clone(), q.clone(), theta).unwrap(), &opts).unwrap();
        let ineq: Vec<Linear> = (0..9)
            .map(|k| {
                let mut c = vec![0.0; 9];
                c[k] = 1.0;
                Linear::new(c, theta)
            })
            .collect();
        worst[2] = worst[2].max(sup(&flat(&cap.plan), &kl_projection(&flat(&xi), &eq, &ineq)));
        let clipped = project_capacity(&xi, &Array2::from_elem((3, 3), 0.5)).unwrap();
        let single: Vec<Linear> = ineq.iter().map(|l| Linear::new(l.coeffs.clone(), 0.5)).collect();
        worst[2] = worst[2].max(sup(&flat(&clipped), &kl_projection(&flat(&xi), &[], &single)));

        let pi = random_positive((3, 3), &mut r);
        let phi = random_positive((3, 3), &mut r);
        let pair = MartingalePair::from_parts(&pi, &phi).unwrap();
        let y = Array1::from_shape_fn(3, |_| r.random_range(0.5..2.0));
        let got = project_c3_mart(&pair, &y).unwrap();
        let link: Vec<Linear> = (0..9)
            .map(|k| {
                let mut c = vec![0.0; 18];
                c[9 + k] = 1.0;
                c[k] = -y[k % 3];
                Linear::new(c, 0.0)
            })
            .collect();
        let y0: Vec<f64> = pair.0.iter().copied().collect();
        worst[3] = worst[3].max(sup(got.0.as_slice().unwrap(), &kl_projection(&y0, &link, &[])));

        let copies: Vec<Array2<f64>> = (0..3).map(|_| random_positive((3, 3), &mut r)).collect();
        let weights = random_simplex(3, &mut r).to_vec();
        let got = project_diagonal(&copies, &weights).unwrap();
        let y0: Vec<f64> = copies.iter().flat_map(flat).collect();
        let w: Vec<f64> = weights.iter().flat_map(|&l| vec![l; 9]).collect();
        let mut diag = Vec::new();
        for l in 1..3 {
            for i in 0..9 {
                let mut c = vec![0.0; 27];
                c[l * 9 + i] = 1.0;
                c[i] = -1.0;
                diag.push(Linear::new(c, 0.0));
            }
        }
        let got: Vec<f64> = got.iter().flat_map(flat).collect();
        worst[4] = worst[4].max(sup(&got, &kl_projection_weighted(&y0, &w, &diag, &[])));
    }
    for (name, err) in ["marginals", "inequalities", "capacity", "martingale link", "diagonal"].iter().zip(worst) {
        out.check(err <= 1e-5, format!("{name} {err:.1e}"));
    }
    out.info(format!("{cases} instances per family"));
    out
}

// 2. Sinkhorn cost against the transport LP as gamma shrinks.
fn sinkhorn_limit() -> Outcome {
    let mut out = Outcome::new();
    let mut r = rng(202);
    let n = 4;
    let cost = Array2::from_shape_fn((n, n), |_| r.random_range(0.0..1.0));
    let p = random_simplex(n, &mut r);
    let q = random_simplex(n, &mut r);
    let mut eq = row_constraints(n, n, p.as_slice().unwrap());
    eq.extend(col_constraints(n, n, q.as_slice().unwrap()));
    let (opt, _) = lp_min(&flat(&cost), &eq);
    let c = CostMatrix::new(cost).unwrap();
    let median = c.median();
    let opts = SolveOptions::default().with_tol(1e-13).with_max_iter(1_000_000);
    let mut gaps = Vec::new();
    for scale in [1e-1, 1e-2, 1e-3, 1e-4] {
        let gamma = scale * median;
        let sol = sinkhorn_log(&c, gamma, &p, &q, &opts).unwrap();
        out.check(sol.diagnostics.converged, format!("converged at {scale:.0e}"));
        gaps.push(transport_cost(&sol.state.plan(&c), &c, gamma).unwrap().linear - opt);
    }
    out.check(gaps.windows(2).all(|w| w[1] <= w[0]), format!("gaps {} decreasing", sci(&gaps)));
    let last = *gaps.last().unwrap();
    out.check(last.abs() <= 0.01 * opt.abs(), format!("final gap {:.2e} of OPT {opt:.4}", last / opt));
    out
}

// 3. Entropy of the plan grows with gamma.
fn entropic_spreading() -> Outcome {
    let mut out = Outcome::new();
    let n = 256;
    let p = shapes::gaussian_mixture(n, &[(1.0, 0.2, 0.05), (0.6, 0.55, 0.08)], 1e-3).unwrap();
    let q = shapes::gaussian_mixture(n, &[(0.8, 0.4, 0.06), (1.0, 0.8, 0.04)], 1e-3).unwrap();
    let cost = CostMatrix::grid_1d(n);
    let opts = SolveOptions::default().with_tol(1e-9).with_max_iter(200_000);
    let mut last = f64::NEG_INFINITY;
    let mut strictly = true;
    let mut worst: f64 = 0.0;
    let mut values = Vec::new();
    for k in [3.0, 6.0, 10.0, 20.0, 40.0, 60.0] {
        let kernel = build_gibbs(&cost, k / n as f64).unwrap();
        let sol = sinkhorn(&kernel, &p, &q, &opts).unwrap();
        let plan = sol.state.plan(&kernel);
        worst = worst.max(sup_vec(&row_sums(&plan), &p)).max(sup_vec(&col_sums(&plan), &q));
        let h = entropy(&plan).unwrap();
        strictly &= h > last;
        last = h;
        values.push(h);
    }
    out.check(strictly, format!("entropies {values:.3?}"));
    out.check(worst <= 1e-6, format!("marginal residual {worst:.1e}"));
    out
}

// 4. Barycenter with weights (0, 1) retraces Sinkhorn.
fn barycenter_special_case() -> Outcome {
    let mut out = Outcome::new();
    let n = 40;
    let p1 = shapes::gaussian_mixture(n, &[(1.0, 0.3, 0.07)], 1e-4).unwrap();
    let p2 = shapes::gaussian_mixture(n, &[(1.0, 0.65, 0.1), (0.5, 0.9, 0.03)], 1e-4).unwrap();
    let kernel = build_gibbs(&CostMatrix::grid_1d(n), 0.02).unwrap();
    let steps = 50;
    let opts = SolveOptions::default().with_tol(0.0).with_max_iter(steps);
    let mut bary = Vec::new();
    let problem = BarycenterProblem::new(vec![p1.clone(), p2.clone()], vec![0.0, 1.0]).unwrap();
    barycenter_solve_observed(&kernel, &problem, &opts, &mut |_, s| bary.push((s.v[0].clone(), s.u[0].clone())))
        .unwrap();
    let p_hat = kernel.apply((&p2 / &kernel.apply_transpose(Array1::ones(n).view())).view());
    let mut sink = Vec::new();
    sinkhorn_observed(&kernel, &p1, &p_hat, &opts, &mut |_, u, v| sink.push((u.to_owned(), v.to_owned()))).unwrap();
    out.check(bary.len() == steps && sink.len() == steps, format!("{} steps", bary.len()));
    let mut worst: f64 = 0.0;
    for ((a, b), (u, v)) in bary.iter().zip(&sink) {
        let rel = |x: &Array1<f64>, y: &Array1<f64>| {
            x.iter().zip(y).map(|(s, t)| (s - t).abs() / t.abs().max(1e-300)).fold(0.0, f64::max)
        };
        worst = worst.max(rel(a, u)).max(rel(b, v));
    }
    out.check(worst <= 1e-12, format!("worst per-step relative deviation {worst:.1e}"));
    out
}

// 5. Barycenter of three shapes keeps the weighted mean.
fn barycenter_mean() -> Outcome {
    let mut out = Outcome::new();
    let n0 = 64;
    let gamma = 2.0 / (n0 * n0) as f64;
    let inputs = [
        shapes::disk(n0, (0.32, 0.35), 0.14).unwrap(),
        shapes::square(n0, (0.68, 0.38), 0.12).unwrap(),
        shapes::annulus(n0, (0.5, 0.68), 0.07, 0.15).unwrap(),
    ];
    let weights = vec![0.5, 0.3, 0.2];
    let kernel = SeparableKernel::unit_square(n0, n0, gamma).unwrap();
    let problem = BarycenterProblem::new(
        inputs.iter().map(|s| Array1::from_iter(s.iter().copied())).collect(),
        weights.clone(),
    )
    .unwrap();
    let sol = barycenter_solve(&kernel, &problem, &SolveOptions::default().with_max_iter(100_000)).unwrap();
    out.check(sol.diagnostics.converged, format!("{} iterations", sol.diagnostics.iterations));
    out.check(sol.diagnostics.residual <= 1e-6, format!("marginal residual {:.1e}", sol.diagnostics.residual));
    let bary = sol.state.p.clone().into_shape_with_order((n0, n0)).unwrap();
    let (bx, by) = shapes::grid_mean(&bary);
    let (mut wx, mut wy) = (0.0, 0.0);
    for (s, &w) in inputs.iter().zip(&weights) {
        let (x, y) = shapes::grid_mean(s);
        wx += w * x;
        wy += w * y;
    }
    let cells = (bx - wx).abs().max((by - wy).abs()) * n0 as f64;
    out.check(cells <= 1.0, format!("mean offset {cells:.3} cells"));
    out
}

// 6. Generalized Euler flows.
fn euler_flows() -> Outcome {
    let mut out = Outcome::new();
    let (n, steps, gamma) = (200, 16, 1e-3);
    let x = grid_centres(n);
    let opts = SolveOptions::default().with_tol(1e-5).with_max_iter(5000);
    let budget = 8 * (steps * n + n * n);
    for map in [EulerMap::Fold, EulerMap::HalfShift, EulerMap::Reverse] {
        let start = Instant::now();
        let kernel = build_euler_kernel(&x, &map.permutation(n), steps, gamma).unwrap();
        let (sol, peak) = peak_during(|| ipfp_factored_with(&kernel, &opts, SweepStrategy::Recompute).unwrap());
        out.check(sol.diagnostics.converged, format!("{map:?} {} sweeps in {:.0?}", sol.diagnostics.iterations, start.elapsed()));
        let mut worst: f64 = 0.0;
        for k in 0..steps {
            let t = transition_matrix(&sol, &kernel, k).unwrap();
            let u = 1.0 / n as f64;
            for axis in [0, 1] {
                worst = worst.max(t.sum_axis(Axis(axis)).iter().map(|v| (v - u).abs()).fold(0.0, f64::max));
            }
            if k == 0 {
                let offdiag = t.indexed_iter().filter(|((a, b), _)| a != b).map(|(_, v)| v.abs()).fold(0.0, f64::max);
                let diag = t.diag().iter().map(|v| (v - u).abs()).fold(0.0, f64::max);
                out.check(offdiag == 0.0 && diag <= 1e-15, format!("{map:?} first transition diag dev {diag:.0e}"));
            }
        }
        out.check(worst <= 1e-4, format!("{map:?} transition marginals {worst:.1e}"));
        out.check(
            peak <= 8 * budget,
            format!("{map:?} peak heap {:.2} MB = {:.1} x (KN + N^2) doubles", peak as f64 / 1e6, peak as f64 / budget as f64),
        );
    }
    let tiny = grid_centres(5);
    let tight = SolveOptions::default().with_tol(1e-13).with_max_iter(200_000);
    let mut worst: f64 = 0.0;
    for map in [EulerMap::Fold, EulerMap::HalfShift, EulerMap::Reverse] {
        let kernel = build_euler_kernel(&tiny, &map.permutation(5), 3, 0.1).unwrap();
        let fact = ipfp_factored(&kernel, &tight).unwrap();
        let dense = kernel.dense(DEFAULT_MEMORY_LIMIT).unwrap();
        let uniform = vec![Array1::from_elem(5, 0.2); 3];
        let reference = multimarginal_solve(&dense, &uniform, &tight).unwrap().plan(&dense);
        let plan = dense_plan(&fact, &kernel, DEFAULT_MEMORY_LIMIT).unwrap();
        worst = worst.max(sup(plan.as_slice().unwrap(), reference.as_slice().unwrap()));
    }
    out.check(worst <= 1e-8, format!("dense oracle N=5 K=3 {worst:.1e}"));
    out
}

/// `<C, s diag(a) K diag(b)>` for a separable kernel and the squared distance
/// on the unit square, without forming the plan.
fn separable_cost(kernel: &SeparableKernel, a: &Array1<f64>, b: &Array1<f64>, s: f64) -> f64 {
    let (n1, n2) = kernel.shape();
    let (x1, x2) = (grid_centres(n1), grid_centres(n2));
    let weighted = |k: &Array2<f64>, x: &Array1<f64>| Array2::from_shape_fn(k.dim(), |(i, j)| k[[i, j]] * (x[i] - x[j]).powi(2));
    let (c1, c2) = (weighted(&kernel.first, &x1), weighted(&kernel.second, &x2));
    let a = a.view().into_shape_with_order((n1, n2)).unwrap();
    let b = b.view().into_shape_with_order((n1, n2)).unwrap();
    let first = (&a * &c1.dot(&b).dot(&kernel.second.t())).sum();
    let second = (&a * &kernel.first.dot(&b).dot(&c2.t())).sum();
    s * (first + second)
}

// 7. Partial transport on a 64 x 64 grid.
fn partial() -> Outcome {
    let mut out = Outcome::new();
    let n0 = 64;
    let p = Array1::from_iter(shapes::annulus(n0, (0.4, 0.45), 0.12, 0.25).unwrap());
    let q = Array1::from_iter(shapes::ellipse(n0, (0.62, 0.55), (0.22, 0.12)).unwrap()) * 1.3;
    let kernel = SeparableKernel::unit_square(n0, n0, 1e-3).unwrap();
    let opts = SolveOptions::default().with_tol(1e-9).with_max_iter(200_000);
    let top = 0.7 * p.sum().min(q.sum());
    let mut costs = Vec::new();
    for frac in [0.3, 0.45, 0.6, 0.7, 0.85] {
        let m = top * frac / 0.7;
        let start = Instant::now();
        let sol = partial_transport(&kernel, &PartialProblem::new(p.clone(), q.clone(), m).unwrap(), &opts).unwrap();
        let rows = sol.row_marginal(&kernel);
        let cols = sol.col_marginal(&kernel);
        let mass = rows.sum();
        let excess = rows.iter().zip(&p).chain(cols.iter().zip(&q)).map(|(a, b)| a - b).fold(0.0, f64::max);
        if frac == 0.7 {
            out.check(
                sol.diagnostics.converged,
                format!("m = 0.7 min: {} cycles in {:.1?}", sol.diagnostics.iterations, start.elapsed()),
            );
        } else {
            out.check(sol.diagnostics.converged, format!("m/min = {frac}"));
        }
        out.check((mass - m).abs() <= 1e-8, format!("mass gap {:.0e}", (mass - m).abs()));
        out.check(excess <= 1e-9, format!("marginal excess {excess:.0e}"));
        costs.push(separable_cost(&kernel, &sol.a, &sol.b, sol.scale));
    }
    out.check(costs.windows(2).all(|w| w[1] >= w[0]), format!("costs {} non-decreasing", sci(&costs)));
    out
}

// 8. Capacity bounds whose reciprocals sum to one give complementary plans.
fn capacity_symmetry() -> Outcome {
    let mut out = Outcome::new();
    let n = 100;
    let p = Array1::from_elem(n, 1.0 / n as f64);
    let cost = CostMatrix::grid_1d(n);
    let gamma = 1e-3;
    let log_kernel = cost.entries.mapv(|c| -c / gamma);
    let opts = SolveOptions::default().with_tol(1e-9).with_max_iter(200_000).with_log_domain(true);
    let unit = (n * n) as f64;
    let solve = |theta: f64| {
        let problem = CapacityProblem::uniform_bound(p.clone(), p.clone(), theta / unit).unwrap();
        let rows = AxisMarginal::equal(0, problem.p.clone());
        let cols = AxisMarginal::equal(1, problem.q.clone());
        let cap = bregmanot::EntryUpperBound::new(problem.theta.clone());
        let sets: [&dyn ConstraintSet<Array2<f64>>; 3] = [&rows, &cols, &cap];
        let sol = bregmanot::dykstra_solve_log(&log_kernel, &sets, &opts).unwrap();
        (sol.plan, sol.diagnostics)
    };
    for (theta, dual) in [(1.5, 3.0), (2.0, 2.0)] {
        let start = Instant::now();
        let (a, da) = solve(theta);
        let (b, db) = solve(dual);
        out.check(da.converged && db.converged, format!("theta {theta}: {} + {} cycles in {:.1?}", da.iterations, db.iterations, start.elapsed()));
        let mut inside = 0;
        for i in 0..n {
            for j in 0..n {
                let s = a[[i, j]] * unit / theta + b[[i, n - 1 - j]] * unit / dual;
                if (0.95..=1.05).contains(&s) {
                    inside += 1;
                }
            }
        }
        let frac = inside as f64 / unit;
        out.check(frac >= 0.9, format!("({theta}, {dual}) {:.1}% of entries within 5%", 100.0 * frac));
    }
    out
}

// 9. Martingale transport.
fn martingale() -> Outcome {
    let mut out = Outcome::new();
    let start = Instant::now();
    let problem = build_lognormal_case(50, 0.04, 0.32, 1e-2).unwrap();
    let opts = SolveOptions::default().with_log_domain(true).with_max_iter(200_000);
    let sol = martingale_solve(&problem, &opts).unwrap();
    let report = sol.report(&problem);
    out.check(sol.diagnostics.converged, format!("lognormal {} cycles in {:.1?}", sol.diagnostics.iterations, start.elapsed()));
    out.check(report.martingale_residual <= 1e-6, format!("martingale residual {:.1e} (relative)", report.martingale_residual));
    out.check(
        report.row_residual.max(report.col_residual) <= 1e-6,
        format!("marginal residuals {:.1e}/{:.1e}", report.row_residual, report.col_residual),
    );

    let x: Array1<f64> = Array1::from(vec![1.25, 2.25, 2.75, 3.75]);
    let y: Array1<f64> = Array1::from(vec![0.5, 2.0, 3.0, 4.5]);
    let p = Array1::from(vec![0.25; 4]);
    let q = Array1::from(vec![0.25; 4]);
    let cost = Array2::from_shape_fn((4, 4), |(i, j)| (x[i] - y[j]).abs().powf(1.5) + 0.1 * ((i + 2 * j) % 3) as f64);
    let mut eq = row_constraints(4, 4, p.as_slice().unwrap());
    eq.extend(col_constraints(4, 4, q.as_slice().unwrap()));
    for i in 0..4 {
        let mut c = vec![0.0; 16];
        c[i * 4..(i + 1) * 4].copy_from_slice(y.as_slice().unwrap());
        eq.push(Linear::new(c, p[i] * x[i]));
    }
    let (opt, _) = lp_min(&flat(&cost), &eq);
    let gamma = 1e-3 * CostMatrix::new(cost.clone()).unwrap().median();
    let problem = MartingaleProblem::new(x, y, p, q, cost, gamma).unwrap();
    let opts = SolveOptions::default().with_tol(1e-10).with_max_iter(2_000_000).with_log_domain(true);
    let sol = martingale_solve(&problem, &opts).unwrap();
    out.check(sol.diagnostics.converged, format!("N=4 {} cycles", sol.diagnostics.iterations));
    let gap = (sol.cost - opt) / opt.abs();
    out.check(gap.abs() <= 0.01, format!("N=4 LP gap {:.2e} of OPT {opt:.4}", gap));
    out
}

fn raised_cosine_disk(n0: usize) -> Array2<f64> {
    let c = grid_centres(n0);
    let mut g = Array2::from_shape_fn((n0, n0), |(i, j)| {
        let r = ((c[i] - 0.5).powi(2) + (c[j] - 0.5).powi(2)).sqrt();
        if r < 0.15 {
            1.0
        } else if r < 0.4 {
            0.5 * (1.0 + (std::f64::consts::PI * (r - 0.15) / 0.25).cos())
        } else {
            0.0
        }
    });
    g /= g.sum();
    g
}

// 10. Partial Radon inversion.
fn tomography() -> Outcome {
    let mut out = Outcome::new();
    let mut r = rng(1010);
    let op = RadonOperator::equispaced(40, 12).unwrap();
    let mut adj: f64 = 0.0;
    let mut tiled = true;
    for k in 0..op.n_angles() {
        let f = Array2::from_shape_fn((40, 40), |_| r.random_range(-1.0..1.0));
        let v = Array1::from_shape_fn(40, |_| r.random_range(-1.0..1.0));
        let lhs = op.radon(f.view(), k).unwrap().dot(&v);
        let rhs = (&f * &op.back_project(v.view(), k).unwrap()).sum();
        adj = adj.max((lhs - rhs).abs());
        let mut hits = vec![0u32; 1600];
        for s1 in 0..40 {
            for &pix in op.line(k, s1) {
                hits[pix] += 1;
            }
        }
        tiled &= hits.iter().all(|&h| h == 1);
    }
    out.check(adj <= 1e-12, format!("adjointness {adj:.1e}"));
    out.check(tiled, "lines tile the grid at every angle");

    let n0 = 40;
    let truth = shapes::ellipse(n0, (0.55, 0.45), (0.3, 0.2)).unwrap();
    let sino = op.forward(truth.view()).unwrap();
    let gamma = 2.0 / (n0 * n0) as f64;
    let opts = SolveOptions::default().with_max_iter(100_000);
    let start = Instant::now();
    let g0 = raised_cosine_disk(n0);
    let problem = ReconstructionProblem::new(op.clone(), g0.clone(), sino.clone(), 0.99, gamma).unwrap();
    let sol = ot_reconstruct(&problem, &opts).unwrap();
    let worst = sol.residuals.iter().copied().fold(0.0, f64::max);
    out.check(sol.diagnostics.converged, format!("{} cycles in {:.1?}", sol.diagnostics.iterations, start.elapsed()));
    out.check(worst <= 1e-6, format!("2K residuals <= {worst:.1e}"));
    let rel = l1(&sol.image, &g0) / g0.sum();
    out.check(rel <= 0.05, format!("relative L1(f, g0) {rel:.4} (smooth-edged disk template)"));

    let binary = shapes::disk(n0, (0.5, 0.5), 0.3).unwrap();
    let problem = ReconstructionProblem::new(op, binary.clone(), sino, 0.99, gamma).unwrap();
    let sol = ot_reconstruct(&problem, &opts).unwrap();
    let rel = l1(&sol.image, &binary) / binary.sum();
    out.info(format!("binary disk template: relative L1 {rel:.4} (entropic blur floor, not asserted)"));
    out
}

// 11. Lifted solves.
fn lifting() -> Outcome {
    let mut out = Outcome::new();
    let mut r = rng(1111);
    let opts = SolveOptions::default().with_tol(1e-12).with_max_iter(500_000);
    let (mut sink, mut part, mut perm) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10 {
        let xi = random_positive((3, 3), &mut r);
        let p = random_simplex(3, &mut r);
        let q = random_simplex(3, &mut r);
        let rows = AxisMarginal::equal(0, p.clone());
        let cols = AxisMarginal::equal(1, q.clone());
        let lifted = lifted_solve(&xi, &[&rows, &cols], &[0.5, 0.5], LiftedMode::Auto, &opts).unwrap();
        let direct = sinkhorn(&xi, &p, &q, &opts).unwrap().state.plan(&xi);
        sink = sink.max(sup(&flat(&lifted.plan), &flat(&direct)));

        let q = &q * 0.8;
        let row_leq = AxisMarginal::upper(0, p.clone());
        let col_leq = AxisMarginal::upper(1, q.clone());
        let mass = TotalMass::new(0.6);
        let w = [1.0 / 3.0; 3];
        let a = lifted_solve(&xi, &[&row_leq, &col_leq, &mass], &w, LiftedMode::Dykstra, &opts).unwrap();
        let b = lifted_solve(&xi, &[&mass, &col_leq, &row_leq], &w, LiftedMode::Dykstra, &opts).unwrap();
        let direct = partial_transport(&xi, &PartialProblem::new(p, q, 0.6).unwrap(), &opts).unwrap();
        part = part.max(sup(&flat(&a.plan), &flat(&direct.plan(&xi))));
        perm = perm.max(sup(&flat(&a.plan), &flat(&b.plan)));
    }
    out.check(sink <= 1e-5, format!("vs Sinkhorn {sink:.1e}"));
    out.check(part <= 1e-5, format!("vs partial transport {part:.1e}"));
    out.check(perm <= 1e-6, format!("slot permutation {perm:.1e}"));
    out
}

// 12. Dropping the corrections changes the answer.
fn corrections_matter() -> Outcome {
    let mut out = Outcome::new();
    let mut r = rng(1212);
    let opts = SolveOptions::default().with_tol(1e-13).with_max_iter(500_000);
    let mut best: Option<(f64, f64)> = None;
    for _ in 0..20 {
        let xi = random_positive((3, 3), &mut r);
        let p = random_simplex(3, &mut r);
        let q = random_simplex(3, &mut r) * 0.8;
        let m = 0.6;
        let rows = AxisMarginal::upper(0, p.clone());
        let cols = AxisMarginal::upper(1, q.clone());
        let mass = TotalMass::new(m);
        let sets: [&dyn ConstraintSet<Array2<f64>>; 3] = [&rows, &cols, &mass];
        let mut plain = xi.clone();
        for _ in 0..100_000 {
            for s in sets {
                s.project(&mut plain).unwrap();
            }
        }
        let dyk = bregmanot::dykstra_solve(&xi, &sets, &opts).unwrap();
        let mut ineq = row_constraints(3, 3, p.as_slice().unwrap());
        ineq.extend(col_constraints(3, 3, q.as_slice().unwrap()));
        let want = kl_projection(&flat(&xi), &[total_constraint(9, m)], &ineq);
        let gap = sup(&flat(&plain), &flat(&dyk.plan));
        let err = sup(&flat(&dyk.plan), &want);
        if best.is_none_or(|(g, _)| gap > g) {
            best = Some((gap, err));
        }
    }
    let (gap, err) = best.unwrap();
    out.check(gap > 1e-3, format!("plain vs Dykstra {gap:.2e}"));
    out.check(err <= 1e-6, format!("Dykstra vs oracle {err:.1e}"));
    out
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("BREGMANOT_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("projections vs oracle", engine_oracles),
        ("sinkhorn small-gamma limit", sinkhorn_limit),
        ("entropic spreading", entropic_spreading),
        ("barycenter special case", barycenter_special_case),
        ("barycenter mean preservation", barycenter_mean),
        ("euler flows", euler_flows),
        ("partial transport", partial),
        ("capacity symmetry", capacity_symmetry),
        ("martingale transport", martingale),
        ("tomography", tomography),
        ("lifting", lifting),
        ("dykstra vs plain cycles", corrections_matter),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome { ok: false, notes: vec![format!("panicked: {msg}")] }
        });
        if !outcome.ok {
            failed += 1;
        }
        println!(
            "criterion {id:>2}: {} {name} ({:.1} s) [{}]",
            if outcome.ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            outcome.notes.join("; ")
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
