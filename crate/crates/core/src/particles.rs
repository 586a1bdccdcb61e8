//! Finite-sample particle state and the GDA family of updates.
//!
//! The transport map is represented by its values `v_i = T(x_i)` on the
//! training samples. One iteration loads a batch B, ascends the particles
//! along `dl/dv - (v_i - x_i)/gamma`, and descends theta along the batch-mean
//! `dl/dtheta`, with optional momentum velocities and an optional alternating
//! theta update that reuses the freshly moved particles.

use crate::data::Dataset;
use crate::diagnostics::{grad_norms, GradNorms};
use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{LossModel, ProblemSpec, SolverConfig};
use crate::rng::Rng;
use crate::runlog::{RunLog, GDA_COLUMNS};

/// Guard radius: a particle escaping this ball aborts the run.
pub const DIVERGENCE_RADIUS: f64 = 1e6;

const SCHEDULE_STREAM: u64 = 0x5C4E;
const THETA_STREAM: u64 = 0x7E7A;

/// Cyclic batch scheduler: successive batches partition [n] before any index
/// repeats. Returned batches are sorted ascending so reductions are
/// order-deterministic. With m = n the schedule is the identity and consumes
/// no randomness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSchedule {
    perm: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSchedule {
    pub fn new(n: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::config(format!(
                "batch size {batch_size} invalid for {n} samples"
            )));
        }
        Ok(BatchSchedule {
            perm: (0..n).collect(),
            cursor: usize::MAX, // forces a reshuffle on the first batch
            batch_size,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn next_batch(&mut self, rng: &mut Rng) -> Vec<usize> {
        let n = self.perm.len();
        if self.cursor >= n {
            if self.batch_size < n {
                rng.shuffle(&mut self.perm);
            }
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(n);
        let mut batch = self.perm[self.cursor..end].to_vec();
        self.cursor = end;
        batch.sort_unstable();
        batch
    }

    pub fn serialize_state(&self) -> (Vec<usize>, usize, usize) {
        (self.perm.clone(), self.cursor, self.batch_size)
    }

    pub fn from_state(perm: Vec<usize>, cursor: usize, batch_size: usize) -> Self {
        BatchSchedule {
            perm,
            cursor,
            batch_size,
        }
    }
}

/// The full mutable state of a particle run: iterate, momentum velocities,
/// batch schedule, RNG, and the cumulative gradient-evaluation counter.
#[derive(Debug, Clone)]
pub struct ParticleState {
    pub theta: Vec<f64>,
    /// Particles, n x d row-major; initialized to the data matrix.
    pub v: Vec<f64>,
    /// Per-particle momentum velocities, n x d.
    pub g: Vec<f64>,
    /// Theta momentum velocity.
    pub h: Vec<f64>,
    pub iter: usize,
    pub rng: Rng,
    pub schedule: BatchSchedule,
    /// Gradient evaluations in units of one batch-sized pass.
    pub nge_units: f64,
    n: usize,
    d: usize,
}

impl ParticleState {
    /// Fresh state: particles start at the samples, velocities at zero.
    pub fn new(theta: Vec<f64>, data: &Dataset, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.effective_batch(data.n())?;
        Ok(ParticleState {
            theta,
            v: data.samples_flat(),
            g: vec![0.0; data.n() * data.dim()],
            h: Vec::new(), // sized on first use
            iter: 0,
            rng: Rng::new(cfg.seed).split(SCHEDULE_STREAM),
            schedule: BatchSchedule::new(data.n(), m)?,
            nge_units: 0.0,
            n: data.n(),
            d: data.dim(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.v[i * self.d..(i + 1) * self.d]
    }

    pub fn bind_dims(&mut self, n: usize, d: usize) {
        self.n = n;
        self.d = d;
    }

    pub fn validate_against(
        &self,
        loss: &dyn LossModel,
        data: &Dataset,
        problem: &ProblemSpec,
    ) -> Result<()> {
        problem.validate()?;
        if loss.param_dim() != self.theta.len() {
            return Err(Error::config(format!(
                "theta has dimension {}, loss expects {}",
                self.theta.len(),
                loss.param_dim()
            )));
        }
        if loss.data_dim() != data.dim() || self.d != data.dim() || self.n != data.n() {
            return Err(Error::config("state, loss, and dataset dimensions disagree"));
        }
        if data.num_classes() > loss.num_classes() {
            return Err(Error::config(format!(
                "dataset has {} classes, loss supports {}",
                data.num_classes(),
                loss.num_classes()
            )));
        }
        Ok(())
    }
}

/// Seeded default initialization for theta: uniform in [-scale, scale]^p.
pub fn seeded_theta(p: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = Rng::new(seed).split(THETA_STREAM);
    (0..p).map(|_| rng.uniform_in(-scale, scale)).collect()
}

/// Concurrent transport-map trainer plugged into the particle loop; receives
/// the batch's fresh (x_i, v_i, y_i) teacher pairs after each particle update
/// and returns the pre-update mean matching loss.
pub trait MapTrainer {
    fn train_on_pairs(&mut self, xs: &[&[f64]], vs: &[&[f64]], ys: &[usize]) -> Result<f64>;
}

/// What one GDA step observed before updating: the batch it used and the
/// gradient norms / objective at the pre-update iterate.
#[derive(Debug, Clone)]
pub struct StepInfo {
    pub batch: Vec<usize>,
    pub norms: GradNorms,
    pub objective: f64,
}

fn check_finite(x: &[f64], iteration: usize, what: &str) -> Result<()> {
    if !linalg::all_finite(x) {
        return Err(Error::Divergence {
            iteration,
            message: format!("non-finite {what}"),
        });
    }
    Ok(())
}

/// Batch gradients at the current iterate: the mean theta gradient, the
/// per-particle functional gradients, the gradient norms they induce, and
/// the batch objective. One call is one gradient-evaluation unit.
struct BatchEval {
    theta_grad: Vec<f64>,
    t_grads: Vec<Vec<f64>>,
    norms: GradNorms,
    objective: f64,
}

fn eval_batch(
    state: &mut ParticleState,
    loss: &dyn LossModel,
    data: &Dataset,
    gamma: f64,
    batch: &[usize],
) -> Result<BatchEval> {
    let k = state.iter;
    let d = state.d;
    let m = batch.len() as f64;
    let mut theta_grad = vec![0.0; state.theta.len()];
    let mut t_grads = Vec::with_capacity(batch.len());
    let mut obj = 0.0;
    let mut t_sq = 0.0;
    for &i in batch {
        let v = &state.v[i * d..(i + 1) * d];
        let x = data.sample(i);
        let y = data.label(i);
        let (val, gt, mut gv) = loss.value_grads(&state.theta, v, y);
        let mut penalty = 0.0;
        for j in 0..d {
            let diff = v[j] - x[j];
            penalty += diff * diff;
            gv[j] -= diff / gamma;
        }
        obj += val - penalty / (2.0 * gamma);
        linalg::axpy(&mut theta_grad, 1.0, &gt);
        t_sq += linalg::dot(&gv, &gv);
        t_grads.push(gv);
    }
    for g in theta_grad.iter_mut() {
        *g /= m;
    }
    check_finite(&theta_grad, k, "theta gradient")?;
    let norms = GradNorms {
        gn_theta: linalg::norm(&theta_grad),
        gn_t: (t_sq / m).sqrt(),
    };
    if !norms.gn_t.is_finite() {
        return Err(Error::Divergence {
            iteration: k,
            message: "non-finite particle gradient".into(),
        });
    }
    state.nge_units += 1.0;
    Ok(BatchEval {
        theta_grad,
        t_grads,
        norms,
        objective: obj / m,
    })
}

/// Applies the GDA update from precomputed batch gradients:
///
/// ```text
/// g_i <- nu g_i + [ dl/dv(theta, v_i) - (v_i - x_i)/gamma ],  v_i <- v_i + eta g_i   (i in B)
/// h   <- nu h + mean_B dl/dtheta(theta, v_i),                 theta <- theta - tau h
/// ```
///
/// With `cfg.alternating` the theta gradient is re-evaluated at the updated
/// particles. Velocities of particles outside the batch are frozen.
fn apply_update(
    state: &mut ParticleState,
    loss: &dyn LossModel,
    data: &Dataset,
    cfg: &SolverConfig,
    batch: &[usize],
    eval: &BatchEval,
) -> Result<()> {
    let k = state.iter;
    let d = state.d;
    let p = state.theta.len();
    let m = batch.len() as f64;
    if state.h.is_empty() {
        state.h = vec![0.0; p];
    }
    let nu = cfg.momentum;
    for (bi, &i) in batch.iter().enumerate() {
        let gv = &eval.t_grads[bi];
        let gs = &mut state.g[i * d..(i + 1) * d];
        for j in 0..d {
            gs[j] = nu * gs[j] + gv[j];
        }
        let vs = &mut state.v[i * d..(i + 1) * d];
        let mut norm_sq = 0.0;
        for j in 0..d {
            vs[j] += cfg.eta * state.g[i * d + j];
            norm_sq += vs[j] * vs[j];
        }
        if !norm_sq.is_finite() || norm_sq > DIVERGENCE_RADIUS * DIVERGENCE_RADIUS {
            return Err(Error::Divergence {
                iteration: k,
                message: format!("particle {i} escaped the guard radius"),
            });
        }
    }

    // Theta descent; the alternating variant re-evaluates at v^{k+1}.
    let mut theta_grad = eval.theta_grad.clone();
    if cfg.alternating {
        theta_grad = vec![0.0; p];
        for &i in batch {
            let v = &state.v[i * d..(i + 1) * d];
            let gt = loss.grad_theta(&state.theta, v, data.label(i));
            linalg::axpy(&mut theta_grad, 1.0, &gt);
        }
        for g in theta_grad.iter_mut() {
            *g /= m;
        }
        check_finite(&theta_grad, k, "theta gradient")?;
    }
    for j in 0..p {
        state.h[j] = nu * state.h[j] + theta_grad[j];
        state.theta[j] -= cfg.tau * state.h[j];
    }
    check_finite(&state.theta, k, "theta")?;
    state.iter += 1;
    Ok(())
}

/// One GDA step on the next scheduled batch.
pub fn gda_step(
    state: &mut ParticleState,
    loss: &dyn LossModel,
    data: &Dataset,
    problem: &ProblemSpec,
    cfg: &SolverConfig,
) -> Result<StepInfo> {
    let batch = state.schedule.next_batch(&mut state.rng);
    let eval = eval_batch(state, loss, data, problem.gamma, &batch)?;
    let info = StepInfo {
        batch: batch.clone(),
        norms: eval.norms,
        objective: eval.objective,
    };
    apply_update(state, loss, data, cfg, &batch, &eval)?;
    Ok(info)
}

/// Iterates `gda_step` until both batch gradient norms fall below `cfg.tol`
/// (confirmed on a full-data pass when m < n) or `cfg.max_iters` is reached.
/// Appends one row per iteration to `log`; a converged run logs a final row
/// for the accepted iterate without stepping past it. The optional trainer
/// consumes each batch's fresh (x_i, v_i^{k+1}) pairs.
pub fn run(
    state: &mut ParticleState,
    loss: &dyn LossModel,
    data: &Dataset,
    problem: &ProblemSpec,
    cfg: &SolverConfig,
    mut trainer: Option<&mut dyn MapTrainer>,
    log: &mut RunLog,
) -> Result<()> {
    state.validate_against(loss, data, problem)?;
    debug_assert_eq!(log.columns, GDA_COLUMNS);
    let n = data.n();
    let m = state.schedule.batch_size();
    loop {
        let k = state.iter;
        if k >= cfg.max_iters {
            log.converged = false;
            log.iterations = k;
            log.nge_total = state.nge_units;
            log.warnings
                .push(format!("hit max_iters = {} before tolerance", cfg.max_iters));
            return Ok(());
        }

        // One gradient pass serves both the stopping check and the update.
        let batch = state.schedule.next_batch(&mut state.rng);
        let eval = eval_batch(state, loss, data, problem.gamma, &batch)?;
        let mut accepted = eval.norms.both_below(cfg.tol);
        let mut full_norms = None;
        if accepted && m < n {
            let all: Vec<usize> = (0..n).collect();
            let fnorms = grad_norms(loss, &state.theta, &state.v, data, &all, problem.gamma)?;
            state.nge_units += n as f64 / m as f64;
            accepted = fnorms.both_below(cfg.tol);
            full_norms = Some(fnorms);
        }
        if accepted {
            // Final row: the accepted iterate, measured but not stepped.
            log.push_row(vec![
                Some(k as f64),
                Some(eval.norms.gn_theta),
                Some(eval.norms.gn_t),
                Some(eval.objective),
                None,
                Some(state.nge_units),
            ])?;
            log.converged = true;
            log.iterations = k;
            log.final_batch_norms = Some(eval.norms);
            log.final_full_norms = full_norms.or(Some(eval.norms));
            log.nge_total = state.nge_units;
            return Ok(());
        }

        apply_update(state, loss, data, cfg, &batch, &eval)?;
        let matching = match trainer.as_deref_mut() {
            Some(t) => {
                let d = data.dim();
                let xs: Vec<&[f64]> = batch.iter().map(|&i| data.sample(i)).collect();
                let vs: Vec<&[f64]> = batch
                    .iter()
                    .map(|&i| &state.v[i * d..(i + 1) * d])
                    .collect();
                let ys: Vec<usize> = batch.iter().map(|&i| data.label(i)).collect();
                Some(t.train_on_pairs(&xs, &vs, &ys)?)
            }
            None => None,
        };
        log.push_row(vec![
            Some(k as f64),
            Some(eval.norms.gn_theta),
            Some(eval.norms.gn_t),
            Some(eval.objective),
            matching,
            Some(state.nge_units),
        ])?;
        log.final_batch_norms = Some(eval.norms);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_regression_2d;
    use crate::losses::GlmRegressionLoss;
    use crate::problem::ZeroLoss;

    fn cfg_full_batch(eta: f64, tau: f64, seed: u64) -> SolverConfig {
        SolverConfig {
            eta,
            tau,
            seed,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn schedule_partitions_before_repeat() {
        let mut rng = Rng::new(3);
        let mut sched = BatchSchedule::new(10, 3).unwrap();
        let mut seen = Vec::new();
        // 10 = 3 + 3 + 3 + 1: four batches per cycle.
        for _ in 0..4 {
            seen.extend(sched.next_batch(&mut rng));
        }
        let mut sorted = seen.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn schedule_full_batch_is_identity() {
        let mut rng = Rng::new(3);
        let mut sched = BatchSchedule::new(5, 5).unwrap();
        for _ in 0..3 {
            assert_eq!(sched.next_batch(&mut rng), vec![0, 1, 2, 3, 4]);
        }
        // Identity schedule consumes no randomness.
        assert_eq!(rng.state(), Rng::new(3).state());
    }

    #[test]
    fn stationary_point_is_fixed() {
        let data = gen_regression_2d(6, 1);
        let loss = ZeroLoss {
            param_dim: 2,
            data_dim: 2,
        };
        let problem = ProblemSpec::unconditioned(1.0, 2, 2);
        let cfg = cfg_full_batch(0.3, 0.3, 1);
        let mut state = ParticleState::new(vec![0.5, -0.5], &data, &cfg).unwrap();
        let before = state.clone();
        gda_step(&mut state, &loss, &data, &problem, &cfg).unwrap();
        assert_eq!(state.theta, before.theta);
        assert_eq!(state.v, before.v);
        assert_eq!(state.g, before.g);
    }

    #[test]
    fn single_particle_hand_unrolled_step() {
        let data = gen_regression_2d(1, 5);
        let loss = GlmRegressionLoss::new(2);
        let problem = ProblemSpec::unconditioned(0.5, 2, 2);
        let cfg = cfg_full_batch(0.4, 0.2, 5);
        let theta0 = vec![0.3, -0.7];
        let mut state = ParticleState::new(theta0.clone(), &data, &cfg).unwrap();
        let x = data.sample(0).to_vec();
        gda_step(&mut state, &loss, &data, &problem, &cfg).unwrap();
        // Hand evaluation: v = x initially, so the penalty part vanishes.
        let gv = loss.grad_v(&theta0, &x, 0);
        let gt = loss.grad_theta(&theta0, &x, 0);
        for j in 0..2 {
            let expect_v = x[j] + 0.4 * gv[j];
            assert!((state.particle(0)[j] - expect_v).abs() < 1e-15);
            let expect_t = theta0[j] - 0.2 * gt[j];
            assert!((state.theta[j] - expect_t).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_zero_equals_velocity_reset() {
        let data = gen_regression_2d(12, 2);
        let loss = GlmRegressionLoss::new(2);
        let problem = ProblemSpec::unconditioned(0.5, 2, 2);
        let plain = cfg_full_batch(0.2, 0.1, 2);
        let mut with_momentum = plain.clone();
        with_momentum.momentum = 0.7;
        let theta0 = seeded_theta(2, 2, 1.0);

        let mut a = ParticleState::new(theta0.clone(), &data, &plain).unwrap();
        let mut b = ParticleState::new(theta0, &data, &with_momentum).unwrap();
        for _ in 0..5 {
            gda_step(&mut a, &loss, &data, &problem, &plain).unwrap();
            gda_step(&mut b, &loss, &data, &problem, &with_momentum).unwrap();
            // Forcing the velocities to zero each step collapses momentum
            // onto plain GDA.
            b.g.iter_mut().for_each(|g| *g = 0.0);
            b.h.iter_mut().for_each(|h| *h = 0.0);
        }
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.v, b.v);
    }

    #[test]
    fn out_of_batch_particles_bitwise_unchanged() {
        let data = gen_regression_2d(10, 4);
        let loss = GlmRegressionLoss::new(2);
        let problem = ProblemSpec::unconditioned(0.5, 2, 2);
        let mut cfg = cfg_full_batch(0.2, 0.1, 4);
        cfg.batch_size = Some(3);
        cfg.momentum = 0.5;
        let mut state = ParticleState::new(seeded_theta(2, 4, 1.0), &data, &cfg).unwrap();
        for _ in 0..7 {
            let before_v = state.v.clone();
            let before_g = state.g.clone();
            let info = gda_step(&mut state, &loss, &data, &problem, &cfg).unwrap();
            for i in 0..10 {
                if !info.batch.contains(&i) {
                    assert_eq!(state.particle(i), &before_v[i * 2..(i + 1) * 2]);
                    assert_eq!(&state.g[i * 2..(i + 1) * 2], &before_g[i * 2..(i + 1) * 2]);
                }
            }
        }
    }

    #[test]
    fn full_batch_run_is_bitwise_reproducible() {
        let data = gen_regression_2d(30, 7);
        let loss = GlmRegressionLoss::new(2);
        let problem = ProblemSpec::unconditioned(0.5, 2, 2);
        let mut cfg = cfg_full_batch(0.4, 0.2, 7);
        cfg.max_iters = 50;
        let run_once = || {
            let mut state = ParticleState::new(seeded_theta(2, 7, 1.0), &data, &cfg).unwrap();
            let mut log = RunLog::new(GDA_COLUMNS);
            run(&mut state, &loss, &data, &problem, &cfg, None, &mut log).unwrap();
            (state.theta.clone(), state.v.clone(), log.to_csv())
        };
        assert_eq!(run_once(), run_once());
    }

    #[test]
    fn max_iters_zero_leaves_state_untouched() {
        let data = gen_regression_2d(8, 3);
        let loss = GlmRegressionLoss::new(2);
        let problem = ProblemSpec::unconditioned(0.5, 2, 2);
        let mut cfg = cfg_full_batch(0.4, 0.2, 3);
        cfg.max_iters = 0;
        let mut state = ParticleState::new(seeded_theta(2, 3, 1.0), &data, &cfg).unwrap();
        let before = state.clone();
        let mut log = RunLog::new(GDA_COLUMNS);
        run(&mut state, &loss, &data, &problem, &cfg, None, &mut log).unwrap();
        assert!(log.rows.is_empty());
        assert!(!log.converged);
        assert_eq!(state.theta, before.theta);
        assert_eq!(state.v, before.v);
        assert_eq!(state.iter, 0);
    }

    #[test]
    fn divergent_step_size_reports_iteration() {
        let data = gen_regression_2d(8, 3);
        let loss = GlmRegressionLoss::new(2);
        let problem = ProblemSpec::unconditioned(0.5, 2, 2);
        // eta/gamma = 40 makes the penalty recursion wildly unstable.
        let mut cfg = cfg_full_batch(20.0, 0.2, 3);
        cfg.max_iters = 500;
        let mut state = ParticleState::new(vec![2.0, 2.0], &data, &cfg).unwrap();
        let mut log = RunLog::new(GDA_COLUMNS);
        let err = run(&mut state, &loss, &data, &problem, &cfg, None, &mut log).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }
}
