//! Problem configuration and the loss-model interface shared by all solvers.
//!
//! The minimax objective is, over decision parameters `theta` and a transport
//! map represented by its values `v_i = T(x_i)` on samples,
//!
//! ```text
//! min_theta max_T  E_x [ l(theta, T(x)) - ||T(x) - x||^2 / (2 gamma) ]
//! ```
//!
//! with `gamma > 0` the Wasserstein penalty weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Static description of the minimax problem instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemSpec {
    /// Wasserstein penalty weight, strictly positive.
    pub gamma: f64,
    /// Sample dimension d.
    pub data_dim: usize,
    /// Decision-parameter dimension p.
    pub param_dim: usize,
    /// Number of classes K; 1 means the unconditioned problem.
    pub num_classes: usize,
    /// Class proportions p_y, length K, summing to 1.
    pub class_proportions: Vec<f64>,
}

impl ProblemSpec {
    /// Unconditioned (K = 1) problem.
    pub fn unconditioned(gamma: f64, data_dim: usize, param_dim: usize) -> Self {
        ProblemSpec {
            gamma,
            data_dim,
            param_dim,
            num_classes: 1,
            class_proportions: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.data_dim == 0 || self.param_dim == 0 {
            return Err(Error::config("data_dim and param_dim must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        if self.class_proportions.len() != self.num_classes {
            return Err(Error::config(format!(
                "class_proportions has length {}, expected {}",
                self.class_proportions.len(),
                self.num_classes
            )));
        }
        if self.class_proportions.iter().any(|p| *p < 0.0) {
            return Err(Error::config("class proportions must be nonnegative"));
        }
        let sum: f64 = self.class_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "class proportions must sum to 1 (got {sum})"
            )));
        }
        Ok(())
    }
}

/// Hyperparameters of the iterative solvers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Step size on the transport particles.
    pub eta: f64,
    /// Step size on theta.
    pub tau: f64,
    /// Momentum coefficient in [0, 1); 0 disables momentum.
    pub momentum: f64,
    /// Batch size m, in [1, n] once bound to a dataset; `None` means the
    /// full dataset every iteration.
    pub batch_size: Option<usize>,
    pub max_iters: usize,
    /// Stopping tolerance applied to both gradient norms.
    pub tol: f64,
    pub seed: u64,
    /// When set, the theta update uses the already-updated particles.
    pub alternating: bool,
    /// Proximal step s (PPM only).
    pub ppm_s: f64,
    /// Optimality tolerance of inner solvers (elimination and PPM).
    pub inner_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            eta: 0.1,
            tau: 0.1,
            momentum: 0.0,
            batch_size: None,
            max_iters: 10_000,
            tol: 1e-5,
            seed: 0,
            alternating: false,
            ppm_s: 0.5,
            inner_tol: 1e-5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta", self.eta),
            ("tau", self.tau),
            ("tol", self.tol),
            ("inner_tol", self.inner_tol),
            ("ppm_s", self.ppm_s),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Batch size bound to a dataset of size n.
    pub fn effective_batch(&self, n: usize) -> Result<usize> {
        match self.batch_size {
            None => Ok(n),
            Some(m) if m <= n => Ok(m),
            Some(m) => Err(Error::config(format!(
                "batch_size {m} exceeds dataset size {n}"
            ))),
        }
    }
}

/// A differentiable loss `l(theta, v)` with optional class conditioning and
/// optional second-order blocks.
///
/// Implementations must be safe for concurrent read-only evaluation; solver
/// state owns all mutation. The class index `y` is threaded through every
/// call and ignored by unconditioned losses.
pub trait LossModel: Send + Sync {
    fn param_dim(&self) -> usize;
    fn data_dim(&self) -> usize;
    fn num_classes(&self) -> usize {
        1
    }

    fn value(&self, theta: &[f64], v: &[f64], y: usize) -> f64;
    fn grad_theta(&self, theta: &[f64], v: &[f64], y: usize) -> Vec<f64>;
    fn grad_v(&self, theta: &[f64], v: &[f64], y: usize) -> Vec<f64>;

    /// Value and both gradients in one pass; override when sharing work.
    fn value_grads(&self, theta: &[f64], v: &[f64], y: usize) -> (f64, Vec<f64>, Vec<f64>) {
        (
            self.value(theta, v, y),
            self.grad_theta(theta, v, y),
            self.grad_v(theta, v, y),
        )
    }

    /// d^2 l / dtheta dtheta, when the implementation provides it.
    fn hessian_theta_theta(&self, _theta: &[f64], _v: &[f64], _y: usize) -> Option<Matrix> {
        None
    }

    /// d^2 l / dv dv.
    fn hessian_v_v(&self, _theta: &[f64], _v: &[f64], _y: usize) -> Option<Matrix> {
        None
    }

    /// d^2 l / dtheta dv (p x d).
    fn hessian_theta_v(&self, _theta: &[f64], _v: &[f64], _y: usize) -> Option<Matrix> {
        None
    }
}

fn check_dims(loss: &dyn LossModel, theta: &[f64], v: &[f64], x: Option<&[f64]>) -> Result<()> {
    if theta.len() != loss.param_dim() {
        return Err(Error::config(format!(
            "theta has dimension {}, loss expects {}",
            theta.len(),
            loss.param_dim()
        )));
    }
    if v.len() != loss.data_dim() {
        return Err(Error::config(format!(
            "v has dimension {}, loss expects {}",
            v.len(),
            loss.data_dim()
        )));
    }
    if let Some(x) = x {
        if x.len() != v.len() {
            return Err(Error::config(format!(
                "x has dimension {}, v has dimension {}",
                x.len(),
                v.len()
            )));
        }
    }
    Ok(())
}

/// Pointwise inner objective `h(theta, v; x) = l(theta, v) - ||v - x||^2 / (2 gamma)`.
pub fn inner_objective(
    loss: &dyn LossModel,
    theta: &[f64],
    v: &[f64],
    x: &[f64],
    y: usize,
    gamma: f64,
) -> Result<f64> {
    check_dims(loss, theta, v, Some(x))?;
    let penalty: f64 = v
        .iter()
        .zip(x)
        .map(|(vi, xi)| (vi - xi) * (vi - xi))
        .sum::<f64>()
        / (2.0 * gamma);
    Ok(loss.value(theta, v, y) - penalty)
}

/// Pointwise functional gradient of the objective in the transport map,
/// `dl/dv (theta, v) - (v - x) / gamma`, evaluated at one particle.
pub fn grad_t_component(
    loss: &dyn LossModel,
    theta: &[f64],
    v: &[f64],
    x: &[f64],
    y: usize,
    gamma: f64,
) -> Result<Vec<f64>> {
    check_dims(loss, theta, v, Some(x))?;
    let mut g = loss.grad_v(theta, v, y);
    for ((gi, vi), xi) in g.iter_mut().zip(v).zip(x) {
        *gi -= (vi - xi) / gamma;
    }
    Ok(g)
}

/// Zero loss; useful for isolating the quadratic penalty in tests.
pub struct ZeroLoss {
    pub param_dim: usize,
    pub data_dim: usize,
}

impl LossModel for ZeroLoss {
    fn param_dim(&self) -> usize {
        self.param_dim
    }
    fn data_dim(&self) -> usize {
        self.data_dim
    }
    fn value(&self, _theta: &[f64], _v: &[f64], _y: usize) -> f64 {
        0.0
    }
    fn grad_theta(&self, _theta: &[f64], _v: &[f64], _y: usize) -> Vec<f64> {
        vec![0.0; self.param_dim]
    }
    fn grad_v(&self, _theta: &[f64], _v: &[f64], _y: usize) -> Vec<f64> {
        vec![0.0; self.data_dim]
    }
    fn hessian_theta_theta(&self, _theta: &[f64], _v: &[f64], _y: usize) -> Option<Matrix> {
        Some(Matrix::zeros(self.param_dim, self.param_dim))
    }
    fn hessian_v_v(&self, _theta: &[f64], _v: &[f64], _y: usize) -> Option<Matrix> {
        Some(Matrix::zeros(self.data_dim, self.data_dim))
    }
}

/// Quadratic loss `l(theta, v) = a'v + v'B v / 2 + c'theta + theta'D theta / 2`
/// with constant Hessian blocks; the closed-form oracle for inner solvers.
pub struct QuadraticLoss {
    pub a: Vec<f64>,
    pub b: Matrix,
    pub c: Vec<f64>,
    pub d: Matrix,
}

impl QuadraticLoss {
    /// Loss quadratic in v only (theta block zero).
    pub fn in_v(a: Vec<f64>, b: Matrix, param_dim: usize) -> Self {
        QuadraticLoss {
            a,
            b,
            c: vec![0.0; param_dim],
            d: Matrix::zeros(param_dim, param_dim),
        }
    }
}

impl LossModel for QuadraticLoss {
    fn param_dim(&self) -> usize {
        self.c.len()
    }
    fn data_dim(&self) -> usize {
        self.a.len()
    }
    fn value(&self, theta: &[f64], v: &[f64], _y: usize) -> f64 {
        linalg::dot(&self.a, v)
            + 0.5 * linalg::dot(v, &self.b.matvec(v))
            + linalg::dot(&self.c, theta)
            + 0.5 * linalg::dot(theta, &self.d.matvec(theta))
    }
    fn grad_theta(&self, theta: &[f64], _v: &[f64], _y: usize) -> Vec<f64> {
        let mut g = self.d.matvec(theta);
        axpy_inplace(&mut g, &self.c);
        g
    }
    fn grad_v(&self, _theta: &[f64], v: &[f64], _y: usize) -> Vec<f64> {
        let mut g = self.b.matvec(v);
        axpy_inplace(&mut g, &self.a);
        g
    }
    fn hessian_theta_theta(&self, _theta: &[f64], _v: &[f64], _y: usize) -> Option<Matrix> {
        Some(self.d.clone())
    }
    fn hessian_v_v(&self, _theta: &[f64], _v: &[f64], _y: usize) -> Option<Matrix> {
        Some(self.b.clone())
    }
    fn hessian_theta_v(&self, _theta: &[f64], _v: &[f64], _y: usize) -> Option<Matrix> {
        Some(Matrix::zeros(self.param_dim(), self.data_dim()))
    }
}

fn axpy_inplace(g: &mut [f64], add: &[f64]) {
    for (gi, ai) in g.iter_mut().zip(add) {
        *gi += ai;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inner_objective_zero_displacement_is_loss_value() {
        let loss = QuadraticLoss::in_v(
            vec![0.3, -0.7],
            Matrix::from_rows(&[&[0.5, 0.1], &[0.1, -0.2]]),
            2,
        );
        let theta = vec![0.0, 0.0];
        let x = vec![0.9, -1.4];
        let h = inner_objective(&loss, &theta, &x, &x, 0, 0.7).unwrap();
        // Penalty term contributes exactly zero when v = x.
        assert_eq!(h, loss.value(&theta, &x, 0));
    }

    #[test]
    fn inner_objective_pure_quadratic() {
        let loss = ZeroLoss {
            param_dim: 2,
            data_dim: 2,
        };
        let theta = vec![0.0, 0.0];
        let v = vec![1.0, 0.0];
        let x = vec![0.0, 0.0];
        let h = inner_objective(&loss, &theta, &v, &x, 0, 0.5).unwrap();
        assert_eq!(h, -1.0);
    }

    #[test]
    fn grad_t_component_fixed_point() {
        let loss = ZeroLoss {
            param_dim: 1,
            data_dim: 2,
        };
        let g = grad_t_component(&loss, &[0.0], &[0.5, -0.5], &[0.5, -0.5], 0, 1.0).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn grad_t_component_penalty_only() {
        let loss = ZeroLoss {
            param_dim: 1,
            data_dim: 2,
        };
        let g = grad_t_component(&loss, &[0.0], &[2.0, 0.0], &[0.0, 0.0], 0, 2.0).unwrap();
        assert_eq!(g, vec![-1.0, 0.0]);
    }

    #[test]
    fn grad_t_penalty_is_linear_in_inverse_gamma() {
        let loss = ZeroLoss {
            param_dim: 1,
            data_dim: 3,
        };
        let v = vec![1.5, -2.0, 0.25];
        let x = vec![0.5, 1.0, 0.0];
        let gamma = 0.8;
        let g1 = grad_t_component(&loss, &[0.0], &v, &x, 0, gamma).unwrap();
        let g2 = grad_t_component(&loss, &[0.0], &v, &x, 0, 2.0 * gamma).unwrap();
        for j in 0..3 {
            let expect = -(v[j] - x[j]) / (2.0 * gamma);
            assert!((g1[j] - g2[j] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let loss = ZeroLoss {
            param_dim: 2,
            data_dim: 2,
        };
        let bad = inner_objective(&loss, &[0.0], &[0.0, 0.0], &[0.0, 0.0], 0, 1.0);
        assert!(matches!(bad, Err(Error::Config(_))));
        let bad = grad_t_component(&loss, &[0.0, 0.0], &[0.0], &[0.0], 0, 1.0);
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn problem_spec_validation() {
        let mut spec = ProblemSpec::unconditioned(0.5, 2, 2);
        spec.validate().unwrap();
        spec.gamma = 0.0;
        assert!(spec.validate().is_err());
        spec.gamma = 1.0;
        spec.class_proportions = vec![0.5, 0.5];
        assert!(spec.validate().is_err()); // length mismatch with K = 1
    }

    #[test]
    fn solver_config_validation() {
        let mut cfg = SolverConfig::default();
        cfg.validate().unwrap();
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        cfg.momentum = 0.5;
        cfg.eta = -0.1;
        assert!(cfg.validate().is_err());
    }
}
