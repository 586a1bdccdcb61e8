//! Convergence metrics, the finite-difference oracle, and numerical probes
//! of the smoothness / error-bound / curvature conditions the solvers rely on.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::elimination;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::problem::{grad_t_component, LossModel, ProblemSpec};
use crate::rng::Rng;

/// Empirical gradient norms on a batch:
/// `gn_theta = || mean_i grad_theta l ||` and
/// `gn_t = ( mean_i || grad_v l - (v_i - x_i)/gamma ||^2 )^(1/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub gn_theta: f64,
    pub gn_t: f64,
}

impl GradNorms {
    pub fn both_below(&self, tol: f64) -> bool {
        self.gn_theta < tol && self.gn_t < tol
    }
}

/// Batch gradient norms. The batch is reduced in ascending index order, so
/// the result is exactly invariant to the caller's batch ordering.
pub fn grad_norms(
    loss: &dyn LossModel,
    theta: &[f64],
    particles: &[f64],
    data: &Dataset,
    batch: &[usize],
    gamma: f64,
) -> Result<GradNorms> {
    if batch.is_empty() {
        return Err(Error::usage("grad_norms requires a non-empty batch"));
    }
    let d = data.dim();
    let mut sorted = batch.to_vec();
    sorted.sort_unstable();
    let m = sorted.len() as f64;
    let mut theta_sum = vec![0.0; theta.len()];
    let mut t_sq = 0.0;
    for &i in &sorted {
        let v = &particles[i * d..(i + 1) * d];
        let gt = loss.grad_theta(theta, v, data.label(i));
        linalg::axpy(&mut theta_sum, 1.0, &gt);
        let gv = grad_t_component(loss, theta, v, data.sample(i), data.label(i), gamma)?;
        t_sq += linalg::dot(&gv, &gv);
    }
    for g in theta_sum.iter_mut() {
        *g /= m;
    }
    Ok(GradNorms {
        gn_theta: linalg::norm(&theta_sum),
        gn_t: (t_sq / m).sqrt(),
    })
}

/// Empirical transport cost `(1/n) sum_i ||v_i - x_i||^2`.
pub fn transport_cost(particles: &[f64], data: &Dataset) -> f64 {
    let d = data.dim();
    let n = data.n();
    let mut total = 0.0;
    for i in 0..n {
        let v = &particles[i * d..(i + 1) * d];
        let x = data.sample(i);
        total += v
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    total / n as f64
}

/// Mean particle displacement `(1/n) sum_i ||v_i - x_i||`.
pub fn mean_displacement(particles: &[f64], data: &Dataset) -> f64 {
    let d = data.dim();
    let n = data.n();
    let mut total = 0.0;
    for i in 0..n {
        total += linalg::dist(&particles[i * d..(i + 1) * d], data.sample(i));
    }
    total / n as f64
}

/// Central finite differences `(f(z + h e_j) - f(z - h e_j)) / (2h)`.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::usage("finite-difference step must be positive"));
    }
    let mut grad = vec![0.0; z.len()];
    let mut zp = z.to_vec();
    for j in 0..z.len() {
        let orig = zp[j];
        zp[j] = orig + h;
        let fp = f(&zp);
        zp[j] = orig - h;
        let fm = f(&zp);
        zp[j] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective returned {fp} / {fm} at coordinate {j}"
            )));
        }
        grad[j] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst relative disagreement between the analytic gradients of a loss and
/// central finite differences over seeded probe points in
/// `||theta||_inf, ||v||_inf <= radius`. The relative error of one probe is
/// `||analytic - fd|| / max(||analytic||, ||fd||, 1e-8)`.
pub fn gradient_check_loss(
    loss: &dyn LossModel,
    probes: usize,
    radius: f64,
    step: f64,
    seed: u64,
) -> Result<f64> {
    let p = loss.param_dim();
    let d = loss.data_dim();
    let mut rng = Rng::new(seed).split(0xF0D);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let theta: Vec<f64> = (0..p).map(|_| rng.uniform_in(-radius, radius)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.uniform_in(-radius, radius)).collect();
        let y = if loss.num_classes() > 1 {
            rng.below(loss.num_classes())
        } else {
            0
        };
        let analytic_t = loss.grad_theta(&theta, &v, y);
        let f_t = |t: &[f64]| loss.value(t, &v, y);
        let fd_t = fd_gradient(&f_t, &theta, step)?;
        worst = worst.max(relative_vec_error(&analytic_t, &fd_t));

        let analytic_v = loss.grad_v(&theta, &v, y);
        let f_v = |vv: &[f64]| loss.value(&theta, vv, y);
        let fd_v = fd_gradient(&f_v, &v, step)?;
        worst = worst.max(relative_vec_error(&analytic_v, &fd_v));
    }
    Ok(worst)
}

pub fn relative_vec_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = linalg::dist(a, b);
    diff / linalg::norm(a).max(linalg::norm(b)).max(1e-8)
}

/// Probe sampling region: a parameter-norm ball and a per-coordinate box for
/// particles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRanges {
    pub theta_radius: f64,
    pub box_lo: Vec<f64>,
    pub box_hi: Vec<f64>,
    /// Probe-pair count for the smoothness estimate.
    pub pairs: usize,
    /// Sampled (theta, particle-set) pairs for the error-bound and Hessian probes.
    pub sets: usize,
    /// Particles per sampled set.
    pub particles_per_set: usize,
}

impl ProbeRanges {
    /// Defaults: theta ball of radius 3, data bounding box inflated 2x.
    pub fn from_dataset(data: &Dataset) -> Self {
        let d = data.dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..data.n() {
            for (j, x) in data.sample(i).iter().enumerate() {
                lo[j] = lo[j].min(*x);
                hi[j] = hi[j].max(*x);
            }
        }
        for j in 0..d {
            let mid = 0.5 * (lo[j] + hi[j]);
            let half = 0.5 * (hi[j] - lo[j]).max(1e-6);
            lo[j] = mid - 2.0 * half;
            hi[j] = mid + 2.0 * half;
        }
        ProbeRanges {
            theta_radius: 3.0,
            box_lo: lo,
            box_hi: hi,
            pairs: 500,
            sets: 5,
            particles_per_set: 40,
        }
    }
}

/// Measured premises of the convergence analysis, with the probe metadata
/// they were computed under.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Max sampled gradient-difference ratio: a lower estimate of the
    /// gradient Lipschitz constant of the loss.
    pub l0_estimate: f64,
    /// Min sampled ratio ||dL/dT|| / ||T - T*||; a lower estimate of the
    /// error-bound constant. `None` when inner solves failed.
    pub eb_t_ratio_min: Option<f64>,
    /// Min eigenvalue of the averaged theta-theta Hessian over sampled
    /// (theta, particle-set) pairs. `None` when the loss lacks the Hessian
    /// capability.
    pub hessian_min_eig: Option<f64>,
    pub seed: u64,
    pub ranges: ProbeRanges,
    pub warnings: Vec<String>,
}

fn sample_theta(rng: &mut Rng, p: usize, radius: f64) -> Vec<f64> {
    // Uniform in the p-ball: normal direction, radius ~ r * u^(1/p).
    let dir: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
    let norm = linalg::norm(&dir).max(1e-300);
    let r = radius * rng.uniform().powf(1.0 / p as f64);
    dir.iter().map(|x| r * x / norm).collect()
}

fn sample_box(rng: &mut Rng, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter()
        .zip(hi)
        .map(|(l, h)| rng.uniform_in(*l, *h))
        .collect()
}

/// Sampled gradient-Lipschitz estimate of the loss over the probe region:
/// max over probe pairs of `||grad l(z + dz) - grad l(z)|| / ||dz||`, with
/// z = (theta, v).
pub fn estimate_l0(loss: &dyn LossModel, ranges: &ProbeRanges, seed: u64) -> f64 {
    let p = loss.param_dim();
    let d = loss.data_dim();
    let mut rng = Rng::new(seed).split(0x10);
    let eps = 1e-4;
    let mut best = 0.0f64;
    for _ in 0..ranges.pairs {
        let theta = sample_theta(&mut rng, p, ranges.theta_radius);
        let v = sample_box(&mut rng, &ranges.box_lo, &ranges.box_hi);
        let y = if loss.num_classes() > 1 {
            rng.below(loss.num_classes())
        } else {
            0
        };
        let mut dz: Vec<f64> = (0..p + d).map(|_| rng.normal()).collect();
        let nz = linalg::norm(&dz).max(1e-300);
        for x in dz.iter_mut() {
            *x *= eps / nz;
        }
        let g0 = [loss.grad_theta(&theta, &v, y), loss.grad_v(&theta, &v, y)].concat();
        let theta1: Vec<f64> = theta.iter().zip(&dz[..p]).map(|(a, b)| a + b).collect();
        let v1: Vec<f64> = v.iter().zip(&dz[p..]).map(|(a, b)| a + b).collect();
        let g1 = [
            loss.grad_theta(&theta1, &v1, y),
            loss.grad_v(&theta1, &v1, y),
        ]
        .concat();
        let ratio = linalg::dist(&g1, &g0) / linalg::norm(&dz);
        if ratio.is_finite() {
            best = best.max(ratio);
        }
    }
    best
}

/// Min eigenvalue of `(1/n) sum_i d^2l/dtheta^2 (theta, v_i)`; `None` when
/// the capability is absent.
pub fn averaged_theta_hessian_min_eig(
    loss: &dyn LossModel,
    theta: &[f64],
    particles: &[f64],
    labels: Option<&[usize]>,
) -> Result<Option<f64>> {
    let p = loss.param_dim();
    let d = loss.data_dim();
    let n = particles.len() / d;
    let mut avg = Matrix::zeros(p, p);
    for i in 0..n {
        let y = labels.map_or(0, |l| l[i]);
        match loss.hessian_theta_theta(theta, &particles[i * d..(i + 1) * d], y) {
            Some(h) => avg.add_assign(&h),
            None => return Ok(None),
        }
    }
    let avg = avg.scaled(1.0 / n as f64);
    Ok(Some(avg.symmetric_eigenvalues()?[0]))
}

/// Runs the full probe battery.
pub fn probe_assumptions(
    loss: &dyn LossModel,
    problem: &ProblemSpec,
    ranges: &ProbeRanges,
    seed: u64,
) -> Result<AssumptionReport> {
    problem.validate()?;
    let d = loss.data_dim();
    let gamma = problem.gamma;
    let mut warnings = Vec::new();

    let l0_estimate = estimate_l0(loss, ranges, seed);

    // Error-bound probe: perturb particles around sampled base points and
    // compare the functional gradient norm against the distance to the
    // inner-solver maximizer.
    let mut rng = Rng::new(seed).split(0xEB);
    let mut eb_min: Option<f64> = None;
    let mut failed_solves = 0usize;
    for _ in 0..ranges.sets {
        let theta = sample_theta(&mut rng, loss.param_dim(), ranges.theta_radius);
        let mut grad_sq = 0.0;
        let mut dist_sq = 0.0;
        let mut ok = true;
        for _ in 0..ranges.particles_per_set {
            let x = sample_box(&mut rng, &ranges.box_lo, &ranges.box_hi);
            let y = if loss.num_classes() > 1 {
                rng.below(loss.num_classes())
            } else {
                0
            };
            let mut v = x.clone();
            for (j, q) in v.iter_mut().enumerate() {
                let span = ranges.box_hi[j] - ranges.box_lo[j];
                *q += rng.uniform_in(-0.1, 0.1) * span;
            }
            let (vstar, report) =
                elimination::inner_maximize(loss, &theta, &x, y, gamma, &v, 1e-8, 200)?;
            if !report.converged {
                ok = false;
                failed_solves += 1;
                break;
            }
            let g = grad_t_component(loss, &theta, &v, &x, y, gamma)?;
            grad_sq += linalg::dot(&g, &g);
            let dv = linalg::dist(&v, &vstar);
            dist_sq += dv * dv;
        }
        if ok && dist_sq > 0.0 {
            let ratio = (grad_sq / ranges.particles_per_set as f64).sqrt()
                / (dist_sq / ranges.particles_per_set as f64).sqrt();
            eb_min = Some(eb_min.map_or(ratio, |m: f64| m.min(ratio)));
        }
    }
    if failed_solves > 0 {
        warnings.push(format!(
            "{failed_solves} error-bound probe(s) skipped: inner solver did not converge"
        ));
    }

    // Averaged-curvature probe on sampled (theta, particle-set) pairs.
    let mut rng = Rng::new(seed).split(0x4E55);
    let mut hessian_min_eig: Option<f64> = None;
    let mut capability = true;
    for _ in 0..ranges.sets {
        let theta = sample_theta(&mut rng, loss.param_dim(), ranges.theta_radius);
        let mut particles = Vec::with_capacity(ranges.particles_per_set * d);
        let mut labels = Vec::with_capacity(ranges.particles_per_set);
        for _ in 0..ranges.particles_per_set {
            particles.extend(sample_box(&mut rng, &ranges.box_lo, &ranges.box_hi));
            labels.push(if loss.num_classes() > 1 {
                rng.below(loss.num_classes())
            } else {
                0
            });
        }
        match averaged_theta_hessian_min_eig(loss, &theta, &particles, Some(&labels))? {
            Some(eig) => {
                hessian_min_eig = Some(hessian_min_eig.map_or(eig, |m: f64| m.min(eig)));
            }
            None => {
                capability = false;
                break;
            }
        }
    }
    if !capability {
        warnings.push("loss does not provide the theta-theta Hessian; curvature probe skipped".into());
        hessian_min_eig = None;
    }

    Ok(AssumptionReport {
        l0_estimate,
        eb_t_ratio_min: eb_min,
        hessian_min_eig,
        seed,
        ranges: ranges.clone(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_regression_2d;
    use crate::losses::GlmRegressionLoss;
    use crate::problem::{QuadraticLoss, ZeroLoss};

    #[test]
    fn grad_norms_zero_loss_at_data() {
        let data = gen_regression_2d(10, 3);
        let loss = ZeroLoss {
            param_dim: 2,
            data_dim: 2,
        };
        let v = data.samples_flat();
        let batch: Vec<usize> = (0..10).collect();
        let gn = grad_norms(&loss, &[0.1, 0.2], &v, &data, &batch, 1.0).unwrap();
        assert_eq!(gn.gn_theta, 0.0);
        assert_eq!(gn.gn_t, 0.0);
    }

    #[test]
    fn grad_norms_three_four_five() {
        let data = gen_regression_2d(1, 3);
        let loss = ZeroLoss {
            param_dim: 2,
            data_dim: 2,
        };
        let x = data.sample(0);
        let v = vec![x[0] + 3.0, x[1] + 4.0];
        let gn = grad_norms(&loss, &[0.0, 0.0], &v, &data, &[0], 1.0).unwrap();
        assert!((gn.gn_t - 5.0).abs() < 1e-12);
        assert_eq!(gn.gn_theta, 0.0);
    }

    #[test]
    fn grad_norms_batch_order_invariant() {
        let data = gen_regression_2d(20, 5);
        let loss = GlmRegressionLoss::new(2);
        let mut v = data.samples_flat();
        for (j, q) in v.iter_mut().enumerate() {
            *q += 0.01 * (j as f64).sin();
        }
        let theta = [0.4, -0.2];
        let fwd: Vec<usize> = (0..20).collect();
        let rev: Vec<usize> = (0..20).rev().collect();
        let a = grad_norms(&loss, &theta, &v, &data, &fwd, 0.5).unwrap();
        let b = grad_norms(&loss, &theta, &v, &data, &rev, 0.5).unwrap();
        assert_eq!(a.gn_theta, b.gn_theta);
        assert_eq!(a.gn_t, b.gn_t);
    }

    #[test]
    fn transport_cost_examples() {
        let data = gen_regression_2d(5, 9);
        let v = data.samples_flat();
        assert_eq!(transport_cost(&v, &data), 0.0);
        let shifted: Vec<f64> = v
            .iter()
            .enumerate()
            .map(|(j, q)| if j % 2 == 0 { q + 1.0 } else { *q })
            .collect();
        assert!((transport_cost(&shifted, &data) - 1.0).abs() < 1e-12);
        assert!((mean_displacement(&shifted, &data) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fd_gradient_quadratic_is_near_exact() {
        let f = |z: &[f64]| 0.5 * z.iter().map(|x| x * x).sum::<f64>();
        let z = vec![0.3, -1.7, 2.4];
        let g = fd_gradient(&f, &z, 1e-5).unwrap();
        for (gi, zi) in g.iter().zip(&z) {
            assert!((gi - zi).abs() <= 1e-8);
        }
    }

    #[test]
    fn fd_gradient_affine_exact_even_with_large_step() {
        let f = |z: &[f64]| 3.0 * z[0] - 0.5 * z[1] + 7.0;
        let g = fd_gradient(&f, &[1.0, 2.0], 0.5).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-12);
        assert!((g[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn fd_gradient_error_shrinks_quadratically() {
        let f = |z: &[f64]| (z[0]).sin() * (z[1]).exp();
        let z: Vec<f64> = vec![0.7, -0.3];
        let exact = vec![z[0].cos() * z[1].exp(), z[0].sin() * z[1].exp()];
        let err = |h: f64| {
            let g = fd_gradient(&f, &z, h).unwrap();
            linalg::dist(&g, &exact)
        };
        let e1 = err(1e-2);
        let e2 = err(5e-3);
        assert!(e1 / e2 >= 3.0, "O(h^2) decay violated: {e1} vs {e2}");
    }

    #[test]
    fn fd_gradient_flags_non_finite() {
        let f = |z: &[f64]| 1.0 / z[0];
        // Stepping across the pole produces an infinity.
        let err = fd_gradient(&f, &[0.0], 1e-5);
        assert!(err.is_ok()); // 1/h is finite
        let f = |_: &[f64]| f64::NAN;
        assert!(matches!(
            fd_gradient(&f, &[0.0], 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn gradient_check_glm() {
        let loss = GlmRegressionLoss::new(2);
        let worst = gradient_check_loss(&loss, 100, 3.0, 1e-5, 42).unwrap();
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn l0_estimate_recovers_known_constant() {
        // Quadratic with v-Hessian diag(1.5, 0.75) and theta block zero:
        // gradient Lipschitz constant is exactly 1.5.
        let b = Matrix::from_rows(&[&[1.5, 0.0], &[0.0, 0.75]]);
        let loss = QuadraticLoss::in_v(vec![0.0, 0.0], b, 2);
        let ranges = ProbeRanges {
            theta_radius: 3.0,
            box_lo: vec![-2.0, -2.0],
            box_hi: vec![2.0, 2.0],
            pairs: 500,
            sets: 3,
            particles_per_set: 20,
        };
        let est = estimate_l0(&loss, &ranges, 7);
        assert!(est <= 1.5 + 1e-9, "estimate {est} exceeds the true constant");
        assert!(est >= 0.9 * 1.5, "estimate {est} below 90% of the constant");
    }

    #[test]
    fn eb_ratio_for_zero_loss_is_inverse_gamma() {
        let loss = ZeroLoss {
            param_dim: 2,
            data_dim: 2,
        };
        let problem = ProblemSpec::unconditioned(0.8, 2, 2);
        let ranges = ProbeRanges {
            theta_radius: 1.0,
            box_lo: vec![-1.0, -1.0],
            box_hi: vec![1.0, 1.0],
            pairs: 10,
            sets: 3,
            particles_per_set: 10,
        };
        let report = probe_assumptions(&loss, &problem, &ranges, 3).unwrap();
        let eb = report.eb_t_ratio_min.unwrap();
        assert!((eb - 1.0 / 0.8).abs() < 1e-6, "eb ratio {eb}");
    }
}
