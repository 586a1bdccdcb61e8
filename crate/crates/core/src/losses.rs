//! Concrete loss models.
//!
//! `GlmRegressionLoss` is the 2D generalized-linear regression loss
//! `l(theta, v) = (sigmoid(theta'v) - y*(v))^2 / 2` against the radial true
//! response `y*(v) = exp(-||v||^2 / (2 sigma_y^2))`. It carries hand-coded
//! Hessian blocks used by the curvature probes and the Newton prox path.
//!
//! `ClassifierLoss` is class-conditional cross entropy on MLP logits with an
//! L2 weight-decay term; the flattened network parameters are the decision
//! vector theta.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::{sigmoid, MlpArch};
use crate::problem::LossModel;

/// Regression loss with a logistic link.
#[derive(Debug, Clone)]
pub struct GlmRegressionLoss {
    pub data_dim: usize,
    /// Bandwidth of the true response; the testbed default is 0.5.
    pub sigma_y: f64,
}

impl GlmRegressionLoss {
    pub fn new(data_dim: usize) -> Self {
        GlmRegressionLoss {
            data_dim,
            sigma_y: 0.5,
        }
    }

    /// True response y*(v) in (0, 1].
    pub fn true_response(&self, v: &[f64]) -> f64 {
        let sq: f64 = v.iter().map(|x| x * x).sum();
        (-sq / (2.0 * self.sigma_y * self.sigma_y)).exp()
    }

    /// Gradient of the true response: -v y*(v) / sigma_y^2.
    fn true_response_grad(&self, v: &[f64], ystar: f64) -> Vec<f64> {
        let c = -ystar / (self.sigma_y * self.sigma_y);
        v.iter().map(|x| c * x).collect()
    }
}

impl LossModel for GlmRegressionLoss {
    fn param_dim(&self) -> usize {
        self.data_dim
    }
    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn value(&self, theta: &[f64], v: &[f64], _y: usize) -> f64 {
        let e = sigmoid(linalg::dot(theta, v)) - self.true_response(v);
        0.5 * e * e
    }

    fn grad_theta(&self, theta: &[f64], v: &[f64], _y: usize) -> Vec<f64> {
        let t = linalg::dot(theta, v);
        let s = sigmoid(t);
        let e = s - self.true_response(v);
        let c = e * s * (1.0 - s);
        v.iter().map(|x| c * x).collect()
    }

    fn grad_v(&self, theta: &[f64], v: &[f64], _y: usize) -> Vec<f64> {
        let t = linalg::dot(theta, v);
        let s = sigmoid(t);
        let ystar = self.true_response(v);
        let e = s - ystar;
        let sp = s * (1.0 - s);
        let gstar = self.true_response_grad(v, ystar);
        theta
            .iter()
            .zip(&gstar)
            .map(|(th, g)| e * (sp * th - g))
            .collect()
    }

    fn value_grads(&self, theta: &[f64], v: &[f64], _y: usize) -> (f64, Vec<f64>, Vec<f64>) {
        let t = linalg::dot(theta, v);
        let s = sigmoid(t);
        let ystar = self.true_response(v);
        let e = s - ystar;
        let sp = s * (1.0 - s);
        let gstar = self.true_response_grad(v, ystar);
        let gt = v.iter().map(|x| e * sp * x).collect();
        let gv = theta
            .iter()
            .zip(&gstar)
            .map(|(th, g)| e * (sp * th - g))
            .collect();
        (0.5 * e * e, gt, gv)
    }

    /// `((y_theta(v) - y*(v)) sigma''(t) + sigma'(t)^2) v v'` with t = theta'v.
    fn hessian_theta_theta(&self, theta: &[f64], v: &[f64], _y: usize) -> Option<Matrix> {
        let t = linalg::dot(theta, v);
        let s = sigmoid(t);
        let sp = s * (1.0 - s);
        let spp = sp * (1.0 - 2.0 * s);
        let e = s - self.true_response(v);
        let coeff = e * spp + sp * sp;
        let mut h = Matrix::zeros(self.data_dim, self.data_dim);
        h.add_outer(coeff, v, v);
        Some(h)
    }

    fn hessian_v_v(&self, theta: &[f64], v: &[f64], _y: usize) -> Option<Matrix> {
        let d = self.data_dim;
        let t = linalg::dot(theta, v);
        let s = sigmoid(t);
        let sp = s * (1.0 - s);
        let spp = sp * (1.0 - 2.0 * s);
        let ystar = self.true_response(v);
        let e = s - ystar;
        let gstar = self.true_response_grad(v, ystar);
        // de/dv = sigma'(t) theta - grad y*
        let dedv: Vec<f64> = theta.iter().zip(&gstar).map(|(th, g)| sp * th - g).collect();
        let mut h = Matrix::zeros(d, d);
        h.add_outer(1.0, &dedv, &dedv);
        // Hessian of y*: (v v' / sigma_y^4 - I / sigma_y^2) y*
        let s2 = self.sigma_y * self.sigma_y;
        let mut hy = Matrix::zeros(d, d);
        hy.add_outer(ystar / (s2 * s2), v, v);
        for i in 0..d {
            hy[(i, i)] -= ystar / s2;
        }
        let mut second = Matrix::zeros(d, d);
        second.add_outer(spp, theta, theta);
        second.add_assign(&hy.scaled(-1.0));
        h.add_assign(&second.scaled(e));
        Some(h)
    }

    fn hessian_theta_v(&self, theta: &[f64], v: &[f64], _y: usize) -> Option<Matrix> {
        let d = self.data_dim;
        let t = linalg::dot(theta, v);
        let s = sigmoid(t);
        let sp = s * (1.0 - s);
        let spp = sp * (1.0 - 2.0 * s);
        let ystar = self.true_response(v);
        let e = s - ystar;
        let gstar = self.true_response_grad(v, ystar);
        let mut h = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                h[(i, j)] = v[i] * (sp * sp * theta[j] - sp * gstar[j] + e * spp * theta[j]);
                if i == j {
                    h[(i, j)] += e * sp;
                }
            }
        }
        Some(h)
    }
}

/// Cross-entropy loss over MLP logits with decoupled-in-notation L2 decay
/// `omega/2 ||theta||^2` added to the objective itself.
#[derive(Debug, Clone)]
pub struct ClassifierLoss {
    pub arch: MlpArch,
    pub weight_decay: f64,
}

impl ClassifierLoss {
    pub fn new(arch: MlpArch, weight_decay: f64) -> Self {
        ClassifierLoss { arch, weight_decay }
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.arch.output_dim() {
            return Err(Error::usage(format!(
                "class index {y} out of range for {} classes",
                self.arch.output_dim()
            )));
        }
        Ok(())
    }

    /// Value plus both gradients in a single forward/backward pass.
    pub fn value_grads_checked(
        &self,
        theta: &[f64],
        v: &[f64],
        y: usize,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self.check_class(y)?;
        let (logits, tape) = self.arch.forward(theta, v)?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let log_denom = max + denom.ln();
        let theta_sq: f64 = theta.iter().map(|t| t * t).sum();
        let value = log_denom - logits[y] + 0.5 * self.weight_decay * theta_sq;
        // d value / d logits = softmax - onehot(y)
        let mut out_grad: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        out_grad[y] -= 1.0;
        let (mut grad_theta, grad_v) = self.arch.backward(theta, &tape, &out_grad)?;
        if self.weight_decay != 0.0 {
            for (g, t) in grad_theta.iter_mut().zip(theta) {
                *g += self.weight_decay * t;
            }
        }
        Ok((value, grad_theta, grad_v))
    }
}

impl LossModel for ClassifierLoss {
    fn param_dim(&self) -> usize {
        self.arch.param_count()
    }
    fn data_dim(&self) -> usize {
        self.arch.input_dim()
    }
    fn num_classes(&self) -> usize {
        self.arch.output_dim()
    }

    fn value(&self, theta: &[f64], v: &[f64], y: usize) -> f64 {
        self.value_grads(theta, v, y).0
    }

    fn grad_theta(&self, theta: &[f64], v: &[f64], y: usize) -> Vec<f64> {
        self.value_grads(theta, v, y).1
    }

    fn grad_v(&self, theta: &[f64], v: &[f64], y: usize) -> Vec<f64> {
        self.value_grads(theta, v, y).2
    }

    fn value_grads(&self, theta: &[f64], v: &[f64], y: usize) -> (f64, Vec<f64>, Vec<f64>) {
        self.value_grads_checked(theta, v, y)
            .expect("classifier loss called with invalid inputs")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mlp;
    use crate::rng::Rng;

    #[test]
    fn glm_value_at_origin() {
        let loss = GlmRegressionLoss::new(2);
        // sigmoid(0) = 0.5, y*(0) = 1, so l = (0.5 - 1)^2 / 2 = 0.125.
        assert_eq!(loss.value(&[0.0, 0.0], &[0.0, 0.0], 0), 0.125);
    }

    #[test]
    fn glm_value_sign_flip_invariance() {
        let loss = GlmRegressionLoss::new(2);
        let theta = [0.7, -1.3];
        let v = [0.4, 0.9];
        let neg_theta = [-0.7, 1.3];
        let neg_v = [-0.4, -0.9];
        assert_eq!(
            loss.value(&theta, &v, 0),
            loss.value(&neg_theta, &neg_v, 0)
        );
    }

    #[test]
    fn glm_bounded_on_probes() {
        let loss = GlmRegressionLoss::new(2);
        let mut rng = Rng::new(17);
        for _ in 0..10_000 {
            let theta = [rng.uniform_in(-3.0, 3.0), rng.uniform_in(-3.0, 3.0)];
            let v = [rng.uniform_in(-3.0, 3.0), rng.uniform_in(-3.0, 3.0)];
            let val = loss.value(&theta, &v, 0);
            assert!((0.0..=0.5).contains(&val), "value {val} out of [0, 1/2]");
        }
    }

    #[test]
    fn glm_hessian_theta_theta_closed_form() {
        let loss = GlmRegressionLoss::new(2);
        // v = 0 kills the vv' factor.
        let h = loss
            .hessian_theta_theta(&[0.3, -0.4], &[0.0, 0.0], 0)
            .unwrap();
        assert!(h.data.iter().all(|x| *x == 0.0));
        // theta = 0, v = e1: sigma'(0)^2 = 0.0625, sigma''(0) = 0.
        let h = loss
            .hessian_theta_theta(&[0.0, 0.0], &[1.0, 0.0], 0)
            .unwrap();
        assert!((h[(0, 0)] - 0.0625).abs() < 1e-15);
        for (i, j) in [(0, 1), (1, 0), (1, 1)] {
            assert_eq!(h[(i, j)], 0.0);
        }
    }

    #[test]
    fn glm_hessians_match_finite_differences() {
        let loss = GlmRegressionLoss::new(2);
        let mut rng = Rng::new(4);
        let h = 1e-5;
        for _ in 0..25 {
            let theta: Vec<f64> = (0..2).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let v: Vec<f64> = (0..2).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let htt = loss.hessian_theta_theta(&theta, &v, 0).unwrap();
            let hvv = loss.hessian_v_v(&theta, &v, 0).unwrap();
            let htv = loss.hessian_theta_v(&theta, &v, 0).unwrap();
            for j in 0..2 {
                let mut tp = theta.clone();
                tp[j] += h;
                let mut tm = theta.clone();
                tm[j] -= h;
                let gp = loss.grad_theta(&tp, &v, 0);
                let gm = loss.grad_theta(&tm, &v, 0);
                for i in 0..2 {
                    let fd = (gp[i] - gm[i]) / (2.0 * h);
                    let denom = fd.abs().max(htt[(i, j)].abs()).max(1e-3);
                    assert!(
                        ((htt[(i, j)] - fd) / denom).abs() <= 1e-3,
                        "theta-theta block ({i},{j})"
                    );
                }
                let mut vp = v.clone();
                vp[j] += h;
                let mut vm = v.clone();
                vm[j] -= h;
                let gvp = loss.grad_v(&theta, &vp, 0);
                let gvm = loss.grad_v(&theta, &vm, 0);
                let gtp = loss.grad_theta(&theta, &vp, 0);
                let gtm = loss.grad_theta(&theta, &vm, 0);
                for i in 0..2 {
                    let fd_vv = (gvp[i] - gvm[i]) / (2.0 * h);
                    let denom = fd_vv.abs().max(hvv[(i, j)].abs()).max(1e-3);
                    assert!(
                        ((hvv[(i, j)] - fd_vv) / denom).abs() <= 1e-3,
                        "v-v block ({i},{j})"
                    );
                    let fd_tv = (gtp[i] - gtm[i]) / (2.0 * h);
                    let denom = fd_tv.abs().max(htv[(i, j)].abs()).max(1e-3);
                    assert!(
                        ((htv[(i, j)] - fd_tv) / denom).abs() <= 1e-3,
                        "theta-v block ({i},{j})"
                    );
                }
            }
        }
    }

    fn classifier_fixture(widths: &[usize], seed: u64, omega: f64) -> (ClassifierLoss, Vec<f64>) {
        let mut rng = Rng::new(seed);
        let net = Mlp::new_seeded(MlpArch::new(widths.to_vec()).unwrap(), &mut rng);
        let theta = net.params.clone();
        (ClassifierLoss::new(net.arch, omega), theta)
    }

    #[test]
    fn ce_uniform_logits_value() {
        // Zeroed network gives uniform logits, so value = log K + decay term.
        let (loss, theta) = classifier_fixture(&[2, 8, 3], 1, 0.01);
        let zeros = vec![0.0; theta.len()];
        let v = [0.3, -0.4];
        let val = loss.value(&zeros, &v, 1);
        assert!((val - 3.0f64.ln()).abs() < 1e-12);
        // With nonzero theta but still-uniform logits (zero final layer):
        let mut net = Mlp {
            arch: loss.arch.clone(),
            params: theta.clone(),
        };
        net.zero_final_layer();
        let tsq: f64 = net.params.iter().map(|t| t * t).sum();
        let val = loss.value(&net.params, &v, 2);
        assert!((val - (3.0f64.ln() + 0.5 * 0.01 * tsq)).abs() < 1e-12);
    }

    #[test]
    fn ce_vanishes_with_margin() {
        // Single linear layer, logits set through biases.
        let arch = MlpArch::new(vec![2, 3]).unwrap();
        let loss = ClassifierLoss::new(arch.clone(), 0.0);
        let value_at_margin = |margin: f64| {
            let mut theta = vec![0.0; arch.param_count()];
            // Bias block starts after the 3x2 weight matrix.
            theta[6] = margin;
            loss.value(&theta, &[0.0, 0.0], 0)
        };
        let v10 = value_at_margin(10.0);
        assert!(v10 < 1e-4, "value at margin 10 is {v10}");
        assert!(value_at_margin(1.0) > value_at_margin(5.0));
        assert!(value_at_margin(5.0) > v10);
    }

    #[test]
    fn ce_invalid_class_is_usage_error() {
        let (loss, theta) = classifier_fixture(&[2, 4, 3], 2, 0.0);
        let err = loss.value_grads_checked(&theta, &[0.1, 0.2], 3).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn ce_weight_decay_term_is_exactly_omega_theta() {
        let (loss_w, theta) = classifier_fixture(&[2, 6, 3], 5, 0.037);
        let loss_0 = ClassifierLoss::new(loss_w.arch.clone(), 0.0);
        let v = [0.5, -1.1];
        let g_w = loss_w.grad_theta(&theta, &v, 1);
        let g_0 = loss_0.grad_theta(&theta, &v, 1);
        for ((a, b), t) in g_w.iter().zip(&g_0).zip(&theta) {
            assert!((a - b - 0.037 * t).abs() <= 1e-12);
        }
    }

    #[test]
    fn glm_smoothness_ratio_is_finite() {
        // Sampled gradient-difference ratios stay bounded on the probe box.
        let loss = GlmRegressionLoss::new(2);
        let mut rng = Rng::new(23);
        let mut max_ratio = 0.0f64;
        for _ in 0..500 {
            let z: Vec<f64> = (0..4).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
            let dz: Vec<f64> = (0..4).map(|_| rng.uniform_in(-1e-3, 1e-3)).collect();
            let g0 = [
                loss.grad_theta(&z[0..2], &z[2..4], 0),
                loss.grad_v(&z[0..2], &z[2..4], 0),
            ]
            .concat();
            let z1: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + b).collect();
            let g1 = [
                loss.grad_theta(&z1[0..2], &z1[2..4], 0),
                loss.grad_v(&z1[0..2], &z1[2..4], 0),
            ]
            .concat();
            let num = linalg::dist(&g1, &g0);
            let den = linalg::norm(&dz);
            if den > 0.0 {
                max_ratio = max_ratio.max(num / den);
            }
        }
        assert!(max_ratio.is_finite());
        assert!(max_ratio > 0.0);
    }
}
