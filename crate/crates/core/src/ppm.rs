//! One-sided damped proximal-point scheme for the theta-fast max-min
//! formulation: an exact-to-tolerance proximal step on the transport
//! particles, damped averaging, and an explicit first-order theta step.
//!
//! Pointwise, the proximal subproblem at sample x with anchor t is
//!
//! ```text
//! t+ = argmin_v  -l(theta, v) + ||v - x||^2/(2 gamma) + ||v - t||^2/(2 s)
//! ```
//!
//! which is strongly convex whenever `1/gamma + 1/s` exceeds the positive
//! curvature of `l` in v. One iteration then applies
//!
//! ```text
//! t <- (1 - eta/s) t + (eta/s) t+,    theta <- theta - tau * mean dl/dtheta(theta, t+).
//! ```

use crate::data::Dataset;
use crate::diagnostics::{estimate_l0, GradNorms, ProbeRanges};
use crate::elimination::{bfgs_minimize, InnerSolveReport, INNER_MAX_ITERS};
use crate::error::{Error, Result};
use crate::linalg;
use crate::particles::ParticleState;
use crate::problem::{LossModel, ProblemSpec, SolverConfig};
use crate::runlog::{RunLog, PPM_COLUMNS};

/// The PPM iterate: decision parameters, current particles t, their latest
/// proximal images t+, and the proximal step s.
#[derive(Debug, Clone)]
pub struct PpmIterate {
    pub theta: Vec<f64>,
    pub t: Vec<f64>,
    pub t_plus: Vec<f64>,
    pub s: f64,
}

/// Inner solver for the proximal subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxMethod {
    Bfgs,
    /// Newton steps using the loss's v-Hessian; requires the capability.
    Newton,
}

/// Validates the scheme parameters against the weak-concavity estimate.
pub fn validate_ppm_config(
    s: f64,
    eta: f64,
    gamma: f64,
    rho_est: f64,
) -> Result<()> {
    if !(s > 0.0) {
        return Err(Error::config("ppm_s must be positive"));
    }
    if rho_est > 0.0 && s >= 1.0 / rho_est {
        return Err(Error::config(format!(
            "ppm_s = {s} must be below 1/rho_est = {}",
            1.0 / rho_est
        )));
    }
    let damping = eta / s;
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::config(format!(
            "damping eta/s = {damping} must lie in (0, 1]"
        )));
    }
    if 1.0 / gamma + 1.0 / s <= rho_est {
        return Err(Error::config(format!(
            "1/gamma + 1/s = {} must exceed rho_est = {rho_est} for a strongly convex prox subproblem",
            1.0 / gamma + 1.0 / s
        )));
    }
    Ok(())
}

/// Gradient of the proximal subproblem at v.
fn prox_grad(
    loss: &dyn LossModel,
    theta: &[f64],
    v: &[f64],
    x: &[f64],
    t: &[f64],
    y: usize,
    gamma: f64,
    s: f64,
) -> Vec<f64> {
    let mut g = loss.grad_v(theta, v, y);
    for j in 0..v.len() {
        g[j] = -g[j] + (v[j] - x[j]) / gamma + (v[j] - t[j]) / s;
    }
    g
}

fn prox_value(
    loss: &dyn LossModel,
    theta: &[f64],
    v: &[f64],
    x: &[f64],
    t: &[f64],
    y: usize,
    gamma: f64,
    s: f64,
) -> f64 {
    let mut pen_x = 0.0;
    let mut pen_t = 0.0;
    for j in 0..v.len() {
        pen_x += (v[j] - x[j]) * (v[j] - x[j]);
        pen_t += (v[j] - t[j]) * (v[j] - t[j]);
    }
    -loss.value(theta, v, y) + pen_x / (2.0 * gamma) + pen_t / (2.0 * s)
}

/// Solves the pointwise proximal subproblem from the warm start t.
/// On success the returned point satisfies
/// `|| -dl/dv + (v - x)/gamma + (v - t)/s || <= inner_tol`.
pub fn prox_step(
    loss: &dyn LossModel,
    theta: &[f64],
    t: &[f64],
    x: &[f64],
    y: usize,
    gamma: f64,
    s: f64,
    inner_tol: f64,
    method: ProxMethod,
) -> Result<(Vec<f64>, InnerSolveReport)> {
    if t.len() != x.len() || t.len() != loss.data_dim() {
        return Err(Error::config("prox_step: dimension mismatch"));
    }
    if !(inner_tol > 0.0) {
        return Err(Error::config("inner tolerance must be positive"));
    }
    match method {
        ProxMethod::Bfgs => {
            let f = |v: &[f64]| prox_value(loss, theta, v, x, t, y, gamma, s);
            let g = |v: &[f64]| prox_grad(loss, theta, v, x, t, y, gamma, s);
            Ok(bfgs_minimize(&f, &g, t, inner_tol, inner_tol, INNER_MAX_ITERS))
        }
        ProxMethod::Newton => prox_step_newton(loss, theta, t, x, y, gamma, s, inner_tol),
    }
}

#[allow(clippy::too_many_arguments)]
fn prox_step_newton(
    loss: &dyn LossModel,
    theta: &[f64],
    t: &[f64],
    x: &[f64],
    y: usize,
    gamma: f64,
    s: f64,
    inner_tol: f64,
) -> Result<(Vec<f64>, InnerSolveReport)> {
    let d = t.len();
    let shift = 1.0 / gamma + 1.0 / s;
    let mut v = t.to_vec();
    let mut ge = 0usize;
    let mut fe = 0usize;
    for it in 0..INNER_MAX_ITERS {
        let g = prox_grad(loss, theta, &v, x, t, y, gamma, s);
        ge += 1;
        let gnorm = linalg::norm(&g);
        if gnorm <= inner_tol {
            return Ok((
                v,
                InnerSolveReport {
                    iterations: it,
                    gradient_evals: ge,
                    function_evals: fe,
                    final_grad_norm: gnorm,
                    converged: true,
                },
            ));
        }
        let hl = loss.hessian_v_v(theta, &v, y).ok_or_else(|| {
            Error::capability("Newton prox step requires the loss's v-Hessian")
        })?;
        let mut hess = hl.scaled(-1.0);
        for j in 0..d {
            hess[(j, j)] += shift;
        }
        let delta = match hess.solve(&g) {
            Ok(sol) => sol,
            Err(_) => g.clone(), // singular curvature: gradient fallback
        };
        // Backtrack on the subproblem value.
        let f0 = prox_value(loss, theta, &v, x, t, y, gamma, s);
        fe += 1;
        let slope: f64 = -linalg::dot(&g, &delta);
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let trial: Vec<f64> = v.iter().zip(&delta).map(|(a, b)| a - alpha * b).collect();
            let ft = prox_value(loss, theta, &trial, x, t, y, gamma, s);
            fe += 1;
            if ft.is_finite() && ft <= f0 + 1e-4 * alpha * slope {
                v = trial;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            return Ok((
                v,
                InnerSolveReport {
                    iterations: it,
                    gradient_evals: ge,
                    function_evals: fe,
                    final_grad_norm: gnorm,
                    converged: false,
                },
            ));
        }
    }
    let g = prox_grad(loss, theta, &v, x, t, y, gamma, s);
    let gnorm = linalg::norm(&g);
    Ok((
        v,
        InnerSolveReport {
            iterations: INNER_MAX_ITERS,
            gradient_evals: ge + 1,
            function_evals: fe,
            final_grad_norm: gnorm,
            converged: gnorm <= inner_tol,
        },
    ))
}

/// Damped particle average `t <- t + (eta/s)(t+ - t)`, written exactly in
/// this form so repeated evaluation is bitwise reproducible.
pub fn damped_update(t: &mut [f64], t_plus: &[f64], damping: f64) {
    for (a, b) in t.iter_mut().zip(t_plus) {
        *a += damping * (b - *a);
    }
}

/// Runs the one-sided damped PPM scheme. `rho_est` bounds the loss's weak
/// concavity; when absent it falls back to the sampled smoothness estimate
/// (an upper bound on the weak-concavity constant).
pub fn ppm_run(
    state: &mut ParticleState,
    loss: &dyn LossModel,
    data: &Dataset,
    problem: &ProblemSpec,
    cfg: &SolverConfig,
    rho_est: Option<f64>,
    log: &mut RunLog,
) -> Result<()> {
    state.validate_against(loss, data, problem)?;
    debug_assert_eq!(log.columns, PPM_COLUMNS);
    let rho = match rho_est {
        Some(r) => r,
        None => estimate_l0(loss, &ProbeRanges::from_dataset(data), cfg.seed),
    };
    let s = cfg.ppm_s;
    validate_ppm_config(s, cfg.eta, problem.gamma, rho)?;
    let damping = cfg.eta / s;
    let n = data.n();
    let d = data.dim();
    let m = state.schedule.batch_size();
    let gamma = problem.gamma;
    let mut iterate = PpmIterate {
        theta: state.theta.clone(),
        t: state.v.clone(),
        t_plus: state.v.clone(),
        s,
    };
    let mut inner_failures = 0usize;

    let result = loop {
        let k = state.iter;
        if k >= cfg.max_iters {
            log.converged = false;
            log.iterations = k;
            log.warnings
                .push(format!("hit max_iters = {} before tolerance", cfg.max_iters));
            break Ok(());
        }
        let batch = state.schedule.next_batch(&mut state.rng);
        let mb = batch.len() as f64;

        // Proximal solves on the batch; t itself is untouched here.
        let mut tplus_sq = 0.0;
        let mut inner_iters = 0.0;
        let mut max_viol = 0.0f64;
        for &i in &batch {
            let x = data.sample(i);
            let y = data.label(i);
            let ti = &iterate.t[i * d..(i + 1) * d];
            let (tp, report) = prox_step(
                loss,
                &iterate.theta,
                ti,
                x,
                y,
                gamma,
                s,
                cfg.inner_tol,
                ProxMethod::Bfgs,
            )?;
            if !report.converged {
                inner_failures += 1;
                log.warnings.push(format!(
                    "iteration {k}: prox solve at sample {i} stopped at residual {:.3e}",
                    report.final_grad_norm
                ));
            }
            inner_iters += report.iterations as f64;
            // Re-evaluated optimality residual of the subproblem; this is
            // exactly the deviation in the Moreau gradient identity.
            let viol = linalg::norm(&prox_grad(
                loss,
                &iterate.theta,
                &tp,
                x,
                ti,
                y,
                gamma,
                s,
            ));
            max_viol = max_viol.max(viol);
            let dt = linalg::sub(ti, &tp);
            tplus_sq += linalg::dot(&dt, &dt) / (s * s);
            iterate.t_plus[i * d..(i + 1) * d].copy_from_slice(&tp);
        }
        log.push_side("moreau_violation_max", max_viol);

        // Surrogate gradients: dH_s/dT = (t - t+)/s on the batch, and the
        // theta gradient of H evaluated at the prox points.
        let mut theta_grad = vec![0.0; iterate.theta.len()];
        let mut obj = 0.0;
        for &i in &batch {
            let tp = &iterate.t_plus[i * d..(i + 1) * d];
            let y = data.label(i);
            linalg::axpy(&mut theta_grad, 1.0, &loss.grad_theta(&iterate.theta, tp, y));
            let ti = &iterate.t[i * d..(i + 1) * d];
            let x = data.sample(i);
            let pen: f64 = ti.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            obj += loss.value(&iterate.theta, ti, y) - pen / (2.0 * gamma);
        }
        for g in theta_grad.iter_mut() {
            *g /= mb;
        }
        if !linalg::all_finite(&theta_grad) || !tplus_sq.is_finite() {
            break Err(Error::Divergence {
                iteration: k,
                message: "non-finite PPM gradients".into(),
            });
        }
        let norms = GradNorms {
            gn_theta: linalg::norm(&theta_grad),
            gn_t: (tplus_sq / mb).sqrt(),
        };

        log.push_row(vec![
            Some(k as f64),
            Some(norms.gn_theta),
            Some(norms.gn_t),
            Some(obj / mb),
            Some(inner_iters / mb),
        ])?;
        log.final_batch_norms = Some(norms);

        let mut accepted = norms.both_below(cfg.tol);
        if accepted && m < n {
            // Full-data confirmation pass; leaves t untouched.
            let mut sq = 0.0;
            let mut tg = vec![0.0; iterate.theta.len()];
            for i in 0..n {
                let x = data.sample(i);
                let y = data.label(i);
                let ti = &iterate.t[i * d..(i + 1) * d];
                let (tp, _) = prox_step(
                    loss,
                    &iterate.theta,
                    ti,
                    x,
                    y,
                    gamma,
                    s,
                    cfg.inner_tol,
                    ProxMethod::Bfgs,
                )?;
                let dt = linalg::dist(ti, &tp);
                sq += (dt / s) * (dt / s);
                linalg::axpy(&mut tg, 1.0, &loss.grad_theta(&iterate.theta, &tp, y));
            }
            for g in tg.iter_mut() {
                *g /= n as f64;
            }
            let full = GradNorms {
                gn_theta: linalg::norm(&tg),
                gn_t: (sq / n as f64).sqrt(),
            };
            accepted = full.both_below(cfg.tol);
            log.final_full_norms = Some(full);
        } else if accepted {
            log.final_full_norms = Some(norms);
        }
        if accepted {
            log.converged = true;
            log.iterations = k;
            break Ok(());
        }

        // Damped averaging on the batch, then the explicit theta step.
        for &i in &batch {
            let tp = iterate.t_plus[i * d..(i + 1) * d].to_vec();
            damped_update(&mut iterate.t[i * d..(i + 1) * d], &tp, damping);
            let nsq = linalg::dot(
                &iterate.t[i * d..(i + 1) * d],
                &iterate.t[i * d..(i + 1) * d],
            );
            if !nsq.is_finite() || nsq > 1e12 {
                return Err(Error::Divergence {
                    iteration: k,
                    message: format!("particle {i} escaped the guard radius"),
                });
            }
        }
        for (t, g) in iterate.theta.iter_mut().zip(&theta_grad) {
            *t -= cfg.tau * g;
        }
        state.iter += 1;
    };

    if inner_failures > 0 {
        log.warnings
            .push(format!("{inner_failures} prox solve(s) did not converge"));
    }
    // Sync the bundle back into the persistent state.
    state.theta = iterate.theta;
    state.v = iterate.t;
    result
}

/// Closed-form prox point for the zero loss:
/// `(x/gamma + t/s) / (1/gamma + 1/s)` per coordinate.
pub fn zero_loss_prox(t: &[f64], x: &[f64], gamma: f64, s: f64) -> Vec<f64> {
    let denom = 1.0 / gamma + 1.0 / s;
    t.iter()
        .zip(x)
        .map(|(ti, xi)| (xi / gamma + ti / s) / denom)
        .collect()
}
