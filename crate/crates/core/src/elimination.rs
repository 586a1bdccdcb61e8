//! Double-loop baseline: per-sample inner maximization of the penalized
//! objective by warm-started BFGS, a first-order outer theta step, and
//! gradient-evaluation accounting.
//!
//! The inner problem at sample x is `max_v l(theta, v) - ||v - x||^2/(2 gamma)`,
//! solved in minimization form on the negated objective. Dimensions are small
//! (d <= 64), so the inverse Hessian is kept dense.

use crate::data::Dataset;
use crate::diagnostics::GradNorms;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::particles::ParticleState;
use crate::problem::{grad_t_component, inner_objective, LossModel, ProblemSpec, SolverConfig};
use crate::runlog::{RunLog, ELIM_COLUMNS};

/// Outcome of one inner solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSolveReport {
    pub iterations: usize,
    pub gradient_evals: usize,
    pub function_evals: usize,
    /// Final optimality residual, i.e. the gradient norm of the inner
    /// objective at the returned point.
    pub final_grad_norm: f64,
    pub converged: bool,
}

/// Dense BFGS workspace: inverse-Hessian approximation, current point and
/// gradient. The approximation is reset to the identity whenever the
/// curvature condition fails, keeping it symmetric positive definite.
#[derive(Debug, Clone)]
pub struct BfgsState {
    pub inv_hessian: Matrix,
    pub point: Vec<f64>,
    pub gradient: Vec<f64>,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

/// Minimizes a smooth function with BFGS and backtracking Armijo line search.
///
/// A warm start whose gradient norm is already at `tol` is accepted with a
/// single gradient evaluation; once the solver has to move, it iterates down
/// to `polish_tol` (pass `polish_tol = tol` for plain behavior). Polishing
/// below the acceptance tolerance keeps warm-started re-solves cheap: the
/// returned point has slack before parameter drift pushes its residual back
/// over `tol`. A line-search failure ends the solve at the best point found,
/// with `converged` reflecting whether that point meets `tol`.
pub fn bfgs_minimize(
    f: &dyn Fn(&[f64]) -> f64,
    grad: &dyn Fn(&[f64]) -> Vec<f64>,
    x0: &[f64],
    tol: f64,
    polish_tol: f64,
    max_iters: usize,
) -> (Vec<f64>, InnerSolveReport) {
    let n = x0.len();
    let mut fe = 0usize;
    let mut ge = 0usize;
    let mut st = BfgsState {
        inv_hessian: Matrix::identity(n),
        point: x0.to_vec(),
        gradient: {
            ge += 1;
            grad(x0)
        },
    };
    let mut fx = {
        fe += 1;
        f(&st.point)
    };
    let mut iterations = 0usize;
    let mut first_update = true;

    loop {
        let gnorm = linalg::norm(&st.gradient);
        let target = if iterations == 0 { tol } else { polish_tol };
        if gnorm <= target {
            return (
                st.point,
                InnerSolveReport {
                    iterations,
                    gradient_evals: ge,
                    function_evals: fe,
                    final_grad_norm: gnorm,
                    converged: true,
                },
            );
        }
        if iterations >= max_iters {
            return (
                st.point,
                InnerSolveReport {
                    iterations,
                    gradient_evals: ge,
                    function_evals: fe,
                    final_grad_norm: gnorm,
                    converged: gnorm <= tol,
                },
            );
        }

        let mut dir = st.inv_hessian.matvec(&st.gradient);
        for d in dir.iter_mut() {
            *d = -*d;
        }
        let mut slope = linalg::dot(&dir, &st.gradient);
        if slope >= 0.0 || !slope.is_finite() {
            // Not a descent direction; fall back to steepest descent.
            st.inv_hessian = Matrix::identity(n);
            dir = st.gradient.iter().map(|g| -g).collect();
            slope = -linalg::dot(&st.gradient, &st.gradient);
        }

        // Backtracking Armijo.
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let trial: Vec<f64> = st
                .point
                .iter()
                .zip(&dir)
                .map(|(x, d)| x + alpha * d)
                .collect();
            fe += 1;
            let ft = f(&trial);
            if ft.is_finite() && ft <= fx + ARMIJO_C1 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xnew, fnew)) = accepted else {
            return (
                st.point,
                InnerSolveReport {
                    iterations,
                    gradient_evals: ge,
                    function_evals: fe,
                    final_grad_norm: gnorm,
                    converged: gnorm <= tol,
                },
            );
        };

        ge += 1;
        let gnew = grad(&xnew);
        let s: Vec<f64> = xnew.iter().zip(&st.point).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&st.gradient).map(|(a, b)| a - b).collect();
        let sy = linalg::dot(&s, &y);
        if sy > 1e-12 * linalg::norm(&s) * linalg::norm(&y) {
            if first_update {
                // Scale the initial approximation to the secant curvature.
                let yy = linalg::dot(&y, &y);
                if yy > 0.0 {
                    st.inv_hessian = Matrix::identity(n).scaled(sy / yy);
                }
                first_update = false;
            }
            bfgs_update(&mut st.inv_hessian, &s, &y, sy);
        } else {
            st.inv_hessian = Matrix::identity(n);
        }
        st.point = xnew;
        st.gradient = gnew;
        fx = fnew;
        iterations += 1;
    }
}

/// H <- (I - rho s y') H (I - rho y s') + rho s s', rho = 1/(s'y)
fn bfgs_update(h: &mut Matrix, s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy = h.matvec(y);
    let yhy = linalg::dot(y, &hy);
    // Expanded form: H - rho (s (Hy)' + (Hy) s') + rho^2 (y'Hy) s s' + rho s s'
    let mut out = h.clone();
    out.add_outer(-rho, s, &hy);
    out.add_outer(-rho, &hy, s);
    out.add_outer(rho * rho * yhy + rho, s, s);
    *h = out;
    // Re-symmetrize against rounding drift.
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = avg;
            h[(j, i)] = avg;
        }
    }
}

/// Solves `argmax_v l(theta, v) - ||v - x||^2/(2 gamma)` from the warm start
/// `v_init`.
pub fn inner_maximize(
    loss: &dyn LossModel,
    theta: &[f64],
    x: &[f64],
    y: usize,
    gamma: f64,
    v_init: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, InnerSolveReport)> {
    if !(tol > 0.0) {
        return Err(Error::config("inner tolerance must be positive"));
    }
    if v_init.len() != x.len() {
        return Err(Error::config("warm start and sample dimensions differ"));
    }
    let f = |v: &[f64]| -> f64 { -inner_objective(loss, theta, v, x, y, gamma).unwrap_or(f64::NAN) };
    let g = |v: &[f64]| -> Vec<f64> {
        let mut gr = grad_t_component(loss, theta, v, x, y, gamma)
            .expect("dimension checked at entry");
        for q in gr.iter_mut() {
            *q = -*q;
        }
        gr
    };
    // Validate dimensions once up front so the closures cannot hide errors.
    let _ = inner_objective(loss, theta, v_init, x, y, gamma)?;
    let (v, report) = bfgs_minimize(&f, &g, v_init, tol, tol, max_iters);
    Ok((v, report))
}

/// Per-iteration gradient-evaluation statistics over a batch of inner solves.
#[derive(Debug, Clone, Copy)]
pub struct BatchNge {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
}

fn batch_nge(reports: &[InnerSolveReport]) -> BatchNge {
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    let mut sum = 0.0;
    for r in reports {
        let ge = r.gradient_evals as f64;
        max = max.max(ge);
        min = min.min(ge);
        sum += ge;
    }
    BatchNge {
        max,
        min,
        mean: sum / reports.len() as f64,
    }
}

/// Maximum inner-solve iterations per outer iteration.
pub const INNER_MAX_ITERS: usize = 200;

/// Double-loop run: every outer iteration solves the inner problem for each
/// batch sample (warm-started from the previous particle), checks the
/// dual-norm stopping rule at (theta, v*), and applies the first-order theta
/// step. Non-converged inner solves leave a warning and the run continues
/// with the best iterate found.
pub fn elim_run(
    state: &mut ParticleState,
    loss: &dyn LossModel,
    data: &Dataset,
    problem: &ProblemSpec,
    cfg: &SolverConfig,
    log: &mut RunLog,
) -> Result<()> {
    state.validate_against(loss, data, problem)?;
    debug_assert_eq!(log.columns, ELIM_COLUMNS);
    let n = data.n();
    let d = data.dim();
    let m = state.schedule.batch_size();
    let gamma = problem.gamma;
    let mut inner_failures = 0usize;

    loop {
        let k = state.iter;
        if k >= cfg.max_iters {
            log.converged = false;
            log.iterations = k;
            log.nge_total = state.nge_units;
            log.warnings
                .push(format!("hit max_iters = {} before tolerance", cfg.max_iters));
            if inner_failures > 0 {
                log.warnings
                    .push(format!("{inner_failures} inner solve(s) did not converge"));
            }
            return Ok(());
        }

        let batch = state.schedule.next_batch(&mut state.rng);
        let mb = batch.len() as f64;

        // Inner loop: maximize at every batch sample, warm-started. The
        // solver's final gradient doubles as the optimality residual.
        let mut reports = Vec::with_capacity(batch.len());
        let mut resid_sq = 0.0;
        let mut max_resid = 0.0f64;
        for &i in &batch {
            let x = data.sample(i);
            let y = data.label(i);
            let warm = state.v[i * d..(i + 1) * d].to_vec();
            let (vstar, report) =
                inner_maximize(loss, &state.theta, x, y, gamma, &warm, cfg.inner_tol, INNER_MAX_ITERS)?;
            if !report.converged {
                inner_failures += 1;
                log.warnings.push(format!(
                    "iteration {k}: inner solve at sample {i} stopped at residual {:.3e}",
                    report.final_grad_norm
                ));
            }
            state.v[i * d..(i + 1) * d].copy_from_slice(&vstar);
            let res = report.final_grad_norm;
            resid_sq += res * res;
            max_resid = max_resid.max(res);
            reports.push(report);
        }
        let nge = batch_nge(&reports);
        state.nge_units += nge.mean;
        log.push_side("inner_residual_max", max_resid);

        // Outer gradient and objective at the solved particles.
        let mut theta_grad = vec![0.0; state.theta.len()];
        let mut obj = 0.0;
        for &i in &batch {
            let v = &state.v[i * d..(i + 1) * d];
            let y = data.label(i);
            let (val, gt, _) = loss.value_grads(&state.theta, v, y);
            linalg::axpy(&mut theta_grad, 1.0, &gt);
            let x = data.sample(i);
            let pen: f64 = v.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            obj += val - pen / (2.0 * gamma);
        }
        for g in theta_grad.iter_mut() {
            *g /= mb;
        }
        if !linalg::all_finite(&theta_grad) {
            return Err(Error::Divergence {
                iteration: k,
                message: "non-finite outer gradient".into(),
            });
        }
        let norms = GradNorms {
            gn_theta: linalg::norm(&theta_grad),
            gn_t: (resid_sq / mb).sqrt(),
        };

        log.push_row(vec![
            Some(k as f64),
            Some(norms.gn_theta),
            Some(norms.gn_t),
            Some(obj / mb),
            None,
            Some(state.nge_units),
            Some(nge.max),
            Some(nge.min),
            Some(nge.mean),
        ])?;
        log.final_batch_norms = Some(norms);

        let mut accepted = norms.both_below(cfg.tol);
        if accepted && m < n {
            // Confirm on a full-data pass: inner-solve all samples.
            let mut full_resid_sq = 0.0;
            let mut full_theta = vec![0.0; state.theta.len()];
            let mut evals = 0.0;
            for i in 0..n {
                let x = data.sample(i);
                let y = data.label(i);
                let warm = state.v[i * d..(i + 1) * d].to_vec();
                let (vstar, report) = inner_maximize(
                    loss,
                    &state.theta,
                    x,
                    y,
                    gamma,
                    &warm,
                    cfg.inner_tol,
                    INNER_MAX_ITERS,
                )?;
                evals += report.gradient_evals as f64;
                state.v[i * d..(i + 1) * d].copy_from_slice(&vstar);
                let res = report.final_grad_norm;
                full_resid_sq += res * res;
                linalg::axpy(&mut full_theta, 1.0, &loss.grad_theta(&state.theta, &vstar, y));
            }
            state.nge_units += evals / m as f64;
            for g in full_theta.iter_mut() {
                *g /= n as f64;
            }
            let full = GradNorms {
                gn_theta: linalg::norm(&full_theta),
                gn_t: (full_resid_sq / n as f64).sqrt(),
            };
            accepted = full.both_below(cfg.tol);
            log.final_full_norms = Some(full);
        } else if accepted {
            log.final_full_norms = Some(norms);
        }

        if accepted {
            log.converged = true;
            log.iterations = k;
            log.nge_total = state.nge_units;
            if inner_failures > 0 {
                log.warnings
                    .push(format!("{inner_failures} inner solve(s) did not converge"));
            }
            return Ok(());
        }

        // Outer first-order step.
        for (t, g) in state.theta.iter_mut().zip(&theta_grad) {
            *t -= cfg.tau * g;
        }
        state.iter += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_regression_2d;
    use crate::losses::GlmRegressionLoss;
    use crate::problem::{QuadraticLoss, ZeroLoss};

    #[test]
    fn quadratic_inner_solution_matches_linear_solve() {
        // l(theta, v) = a'v + v'Bv/2 with (1/gamma) I - B positive definite:
        // the maximizer solves ((1/gamma) I - B) v = a + x/gamma.
        let a = vec![0.4, -0.3];
        let b = Matrix::from_rows(&[&[0.6, 0.2], &[0.2, -0.1]]);
        let loss = QuadraticLoss::in_v(a.clone(), b.clone(), 1);
        let gamma = 0.8;
        let x = vec![0.5, 1.5];

        let mut lhs = b.scaled(-1.0);
        lhs[(0, 0)] += 1.0 / gamma;
        lhs[(1, 1)] += 1.0 / gamma;
        let rhs: Vec<f64> = a.iter().zip(&x).map(|(ai, xi)| ai + xi / gamma).collect();
        let expect = lhs.solve(&rhs).unwrap();

        let (v, report) =
            inner_maximize(&loss, &[0.0], &x, 0, gamma, &[0.0, 0.0], 1e-10, 100).unwrap();
        assert!(report.converged);
        assert!(linalg::dist(&v, &expect) <= 1e-8, "{v:?} vs {expect:?}");
    }

    #[test]
    fn zero_loss_inner_returns_sample_quickly() {
        let loss = ZeroLoss {
            param_dim: 1,
            data_dim: 3,
        };
        let x = vec![0.3, -0.8, 2.0];
        let (v, report) =
            inner_maximize(&loss, &[0.0], &x, 0, 1.0, &[0.0, 0.0, 0.0], 1e-8, 100).unwrap();
        assert!(report.converged);
        assert!(report.iterations <= 2, "took {} iterations", report.iterations);
        assert!(linalg::dist(&v, &x) <= 1e-8);
    }

    #[test]
    fn warm_start_at_optimum_costs_one_gradient() {
        let loss = ZeroLoss {
            param_dim: 1,
            data_dim: 2,
        };
        let x = vec![0.25, -0.75];
        // v = x is the exact maximizer of the pure penalty.
        let (v, report) = inner_maximize(&loss, &[0.0], &x, 0, 0.5, &x, 1e-5, 100).unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 0);
        assert!(report.gradient_evals <= 2);
        assert_eq!(v, x);
    }

    #[test]
    fn report_gradient_evals_cover_iterations() {
        let loss = GlmRegressionLoss::new(2);
        let (_, report) = inner_maximize(
            &loss,
            &[0.8, -0.3],
            &[0.2, 0.4],
            0,
            0.5,
            &[0.0, 0.0],
            1e-9,
            100,
        )
        .unwrap();
        assert!(report.converged);
        assert!(report.gradient_evals >= report.iterations + 1);
        assert!(report.function_evals >= report.iterations);
    }

    #[test]
    fn converged_residual_holds_by_reevaluation() {
        let loss = GlmRegressionLoss::new(2);
        let theta = [0.6, 0.9];
        let tol = 1e-6;
        for (i, x) in [[0.5, -0.5], [-0.9, 0.1], [0.0, 0.7]].iter().enumerate() {
            let (v, report) =
                inner_maximize(&loss, &theta, x, 0, 0.5, &[0.1, 0.1], tol, 100).unwrap();
            assert!(report.converged, "probe {i}");
            let res = linalg::norm(&grad_t_component(&loss, &theta, &v, x, 0, 0.5).unwrap());
            assert!(res <= tol, "probe {i}: residual {res}");
        }
    }

    #[test]
    fn zero_loss_outer_converges_immediately() {
        let data = gen_regression_2d(10, 2);
        let loss = ZeroLoss {
            param_dim: 2,
            data_dim: 2,
        };
        let problem = ProblemSpec::unconditioned(1.0, 2, 2);
        let cfg = SolverConfig {
            tau: 0.2,
            seed: 2,
            max_iters: 50,
            ..SolverConfig::default()
        };
        let theta0 = vec![0.4, -0.4];
        let mut state = ParticleState::new(theta0.clone(), &data, &cfg).unwrap();
        let mut log = RunLog::new(ELIM_COLUMNS);
        elim_run(&mut state, &loss, &data, &problem, &cfg, &mut log).unwrap();
        assert!(log.converged);
        assert!(log.iterations <= 1);
        assert_eq!(state.theta, theta0); // zero outer gradient never moves theta
    }
}
