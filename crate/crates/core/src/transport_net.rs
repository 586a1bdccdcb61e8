//! Neural transport map `T(x) = x + R(x)` trained concurrently with particle
//! optimization by an L2 matching loss against teacher pairs (x_i, v_i).
//!
//! The residual network R is an MLP with SiLU hidden layers and a
//! zero-initialized final layer, so the initial map is exactly the identity.
//! Class conditioning concatenates a learnable label embedding to the input.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{Mlp, MlpArch, OptimState};
use crate::particles::MapTrainer;
use crate::rng::Rng;

/// Architecture and training hyperparameters of the transport net.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransportConfig {
    /// Hidden layer widths of the residual net; may be empty for a linear R.
    pub hidden: Vec<usize>,
    /// Width of the label embedding; forced to 0 when there is one class.
    pub embed_width: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// `Some(momentum)` selects SGD with momentum; `None` selects Adam.
    pub sgd_momentum: Option<f64>,
    /// Sub-batch size m' for matching updates; `None` uses the whole batch.
    pub sub_batch: Option<usize>,
    /// Optimizer passes over each teacher batch.
    pub epochs_per_batch: usize,
    pub seed: u64,
}

impl TransportConfig {
    /// Defaults: two hidden layers of width 2d, embedding width equal to the
    /// hidden width, Adam with lr 1e-4 and weight decay 1e-5.
    pub fn defaults(data_dim: usize, num_classes: usize) -> Self {
        let hidden = vec![2 * data_dim, 2 * data_dim];
        TransportConfig {
            embed_width: if num_classes > 1 { hidden[0] } else { 0 },
            hidden,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            sgd_momentum: None,
            sub_batch: None,
            epochs_per_batch: 1,
            seed: 0,
        }
    }
}

/// Residual transport map with optional label conditioning and its optimizer
/// state. Parameters are stored flat: MLP parameters first, then the K x e
/// embedding table.
#[derive(Debug, Clone)]
pub struct TransportNet {
    arch: MlpArch,
    params: Vec<f64>,
    opt: OptimState,
    data_dim: usize,
    embed_width: usize,
    num_classes: usize,
    sub_batch: Option<usize>,
    epochs_per_batch: usize,
}

impl TransportNet {
    pub fn new(cfg: &TransportConfig, data_dim: usize, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        if cfg.epochs_per_batch == 0 {
            return Err(Error::config("epochs_per_batch must be >= 1"));
        }
        let embed_width = if num_classes > 1 { cfg.embed_width } else { 0 };
        let mut widths = vec![data_dim + embed_width];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(data_dim);
        let arch = MlpArch::new(widths)?;
        let mut rng = Rng::new(cfg.seed).split(0x7A9);
        let mut mlp = Mlp::new_seeded(arch.clone(), &mut rng);
        mlp.zero_final_layer();
        let mut params = mlp.params;
        for _ in 0..num_classes * embed_width {
            params.push(rng.uniform_in(-0.5, 0.5));
        }
        let opt = match cfg.sgd_momentum {
            Some(momentum) => OptimState::sgd_momentum(
                cfg.learning_rate,
                momentum,
                cfg.weight_decay,
                params.len(),
            ),
            None => OptimState::adam(cfg.learning_rate, cfg.weight_decay, params.len()),
        };
        Ok(TransportNet {
            arch,
            params,
            opt,
            data_dim,
            embed_width,
            num_classes,
            sub_batch: cfg.sub_batch,
            epochs_per_batch: cfg.epochs_per_batch,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn mlp_param_count(&self) -> usize {
        self.arch.param_count()
    }

    fn embed_slice(&self, y: usize) -> &[f64] {
        let base = self.mlp_param_count() + y * self.embed_width;
        &self.params[base..base + self.embed_width]
    }

    fn net_input(&self, x: &[f64], y: usize) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.data_dim + self.embed_width);
        input.extend_from_slice(x);
        input.extend_from_slice(self.embed_slice(y));
        input
    }

    /// `T(x) = x + R([x; embed(y)])`.
    pub fn apply(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        if x.len() != self.data_dim {
            return Err(Error::config(format!(
                "input has dimension {}, map expects {}",
                x.len(),
                self.data_dim
            )));
        }
        if y >= self.num_classes {
            return Err(Error::usage(format!(
                "class index {y} out of range for {} classes",
                self.num_classes
            )));
        }
        let input = self.net_input(x, y);
        let (residual, _) = self.arch.forward(&self.params[..self.mlp_param_count()], &input)?;
        Ok(x.iter().zip(&residual).map(|(a, b)| a + b).collect())
    }

    /// Mean matching loss over the pairs without touching parameters.
    pub fn matching_loss(&self, xs: &[&[f64]], vs: &[&[f64]], ys: &[usize]) -> Result<f64> {
        if xs.is_empty() {
            return Err(Error::usage("matching loss over an empty batch"));
        }
        let mut total = 0.0;
        for ((x, v), &y) in xs.iter().zip(vs).zip(ys) {
            let out = self.apply(x, y)?;
            let r = linalg::dist(&out, v);
            total += r * r;
        }
        Ok(total / xs.len() as f64)
    }

    /// Gradient of the mean matching loss over a sub-batch, flat over MLP
    /// parameters plus the embedding table.
    fn matching_grad(&self, xs: &[&[f64]], vs: &[&[f64]], ys: &[usize]) -> Result<Vec<f64>> {
        let mlp_n = self.mlp_param_count();
        let mut grads = vec![0.0; self.params.len()];
        let scale = 1.0 / xs.len() as f64;
        let mlp_params = &self.params[..mlp_n];
        for ((x, v), &y) in xs.iter().zip(vs).zip(ys) {
            let input = self.net_input(x, y);
            let (residual, tape) = self.arch.forward(mlp_params, &input)?;
            // d/d out of ||x + R - v||^2, averaged over the sub-batch.
            let out_grad: Vec<f64> = x
                .iter()
                .zip(&residual)
                .zip(*v)
                .map(|((xi, ri), vi)| 2.0 * scale * (xi + ri - vi))
                .collect();
            let (pg, input_grad) = self.arch.backward(mlp_params, &tape, &out_grad)?;
            for (slot, g) in grads[..mlp_n].iter_mut().zip(&pg) {
                *slot += g;
            }
            if self.embed_width > 0 {
                let base = mlp_n + y * self.embed_width;
                for (slot, g) in grads[base..base + self.embed_width]
                    .iter_mut()
                    .zip(&input_grad[self.data_dim..])
                {
                    *slot += g;
                }
            }
        }
        Ok(grads)
    }

    /// One matching update over a teacher batch: `ceil(m / m')` optimizer
    /// steps over disjoint sub-batches (per configured epoch). Returns the
    /// pre-update mean loss over the full batch.
    pub fn matching_update(
        &mut self,
        xs: &[&[f64]],
        vs: &[&[f64]],
        ys: &[usize],
        sub_batch: usize,
    ) -> Result<f64> {
        if xs.is_empty() {
            return Err(Error::usage("matching update on an empty batch"));
        }
        if xs.len() != vs.len() || xs.len() != ys.len() {
            return Err(Error::config("teacher pair arrays must have equal length"));
        }
        if sub_batch == 0 || sub_batch > xs.len() {
            return Err(Error::config(format!(
                "sub-batch size {sub_batch} invalid for batch of {}",
                xs.len()
            )));
        }
        let pre_loss = self.matching_loss(xs, vs, ys)?;
        for _ in 0..self.epochs_per_batch {
            let mut start = 0;
            while start < xs.len() {
                let end = (start + sub_batch).min(xs.len());
                let grads = self.matching_grad(&xs[start..end], &vs[start..end], &ys[start..end])?;
                let mut params = std::mem::take(&mut self.params);
                self.opt.step(&mut params, &grads)?;
                self.params = params;
                start = end;
            }
        }
        Ok(pre_loss)
    }

    /// Flat JSON checkpoint payload: MLP layers plus the embedding table.
    pub fn to_named_params(&self) -> Map<String, Value> {
        let mlp = Mlp {
            arch: self.arch.clone(),
            params: self.params[..self.mlp_param_count()].to_vec(),
        };
        let mut map = mlp.to_named_params();
        map.insert(
            "embed".into(),
            Value::from(self.params[self.mlp_param_count()..].to_vec()),
        );
        map
    }

    pub fn load_named_params(&mut self, map: &Map<String, Value>) -> Result<()> {
        let mlp = Mlp::from_named_params(self.arch.clone(), map)?;
        let mlp_n = self.mlp_param_count();
        self.params[..mlp_n].copy_from_slice(&mlp.params);
        let embed = map
            .get("embed")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::config("checkpoint missing 'embed'"))?;
        if embed.len() != self.params.len() - mlp_n {
            return Err(Error::config("embed table size mismatch"));
        }
        for (slot, v) in self.params[mlp_n..].iter_mut().zip(embed) {
            *slot = v
                .as_f64()
                .ok_or_else(|| Error::config("non-numeric entry in 'embed'"))?;
        }
        Ok(())
    }

    /// Optimizer state for exact checkpoint resume.
    pub fn optimizer(&self) -> &OptimState {
        &self.opt
    }

    pub fn set_optimizer(&mut self, opt: OptimState) {
        self.opt = opt;
    }
}

impl MapTrainer for TransportNet {
    fn train_on_pairs(&mut self, xs: &[&[f64]], vs: &[&[f64]], ys: &[usize]) -> Result<f64> {
        let sub = self.sub_batch.unwrap_or(xs.len()).min(xs.len());
        self.matching_update(xs, vs, ys, sub)
    }
}

/// Mean squared map error over pairs.
pub fn mse_on_pairs(
    net: &TransportNet,
    xs: &[&[f64]],
    targets: &[&[f64]],
    ys: &[usize],
) -> Result<f64> {
    net.matching_loss(xs, targets, ys)
}

/// Train/test errors of a trained map: train pairs are the teacher pairs,
/// test inputs come with oracle targets (for example the converged particles
/// of their nearest training neighbors).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_generalization(
    net: &TransportNet,
    train_xs: &[&[f64]],
    train_targets: &[&[f64]],
    train_ys: &[usize],
    test_xs: &[&[f64]],
    test_targets: &[&[f64]],
    test_ys: &[usize],
) -> Result<(f64, f64)> {
    let train = mse_on_pairs(net, train_xs, train_targets, train_ys)?;
    let test = mse_on_pairs(net, test_xs, test_targets, test_ys)?;
    Ok((train, test))
}

/// Oracle targets for test inputs: the particle of the nearest training
/// sample (restricted to the same class when labels are present). Ties break
/// to the lowest index.
pub fn nearest_neighbor_targets(
    train_xs: &[&[f64]],
    train_vs: &[&[f64]],
    train_ys: &[usize],
    test_xs: &[&[f64]],
    test_ys: &[usize],
) -> Vec<Vec<f64>> {
    test_xs
        .iter()
        .zip(test_ys)
        .map(|(tx, ty)| {
            let mut best = (f64::INFINITY, 0usize);
            for (i, x) in train_xs.iter().enumerate() {
                if !train_ys.is_empty() && train_ys[i] != *ty {
                    continue;
                }
                let dist = linalg::dist(tx, x);
                if dist < best.0 {
                    best = (dist, i);
                }
            }
            train_vs[best.1].to_vec()
        })
        .collect()
}

/// Interpolation trajectory `x + (j/J)(T(x) - x)` for j = 0..=J.
pub fn interpolation_trajectory(
    net: &TransportNet,
    x: &[f64],
    y: usize,
    points: usize,
) -> Result<Vec<Vec<f64>>> {
    if points == 0 {
        return Err(Error::usage("trajectory needs at least one segment"));
    }
    let target = net.apply(x, y)?;
    Ok((0..=points)
        .map(|j| {
            let w = j as f64 / points as f64;
            x.iter()
                .zip(&target)
                .map(|(a, b)| a + w * (b - a))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg(d: usize, k: usize) -> TransportConfig {
        TransportConfig {
            seed: 3,
            ..TransportConfig::defaults(d, k)
        }
    }

    #[test]
    fn fresh_net_is_identity_everywhere() {
        let net = TransportNet::new(&toy_cfg(2, 3), 2, 3).unwrap();
        let mut rng = Rng::new(8);
        for _ in 0..1000 {
            let x = [rng.uniform_in(-5.0, 5.0), rng.uniform_in(-5.0, 5.0)];
            let y = rng.below(3);
            let out = net.apply(&x, y).unwrap();
            assert_eq!(out, x.to_vec());
        }
    }

    #[test]
    fn single_class_drops_embedding() {
        let cfg = toy_cfg(2, 1);
        let net = TransportNet::new(&cfg, 2, 1).unwrap();
        assert_eq!(net.embed_width, 0);
        assert_eq!(net.params.len(), net.mlp_param_count());
        let out = net.apply(&[0.4, -0.7], 0).unwrap();
        assert_eq!(out, vec![0.4, -0.7]);
    }

    #[test]
    fn invalid_class_is_usage_error() {
        let net = TransportNet::new(&toy_cfg(2, 2), 2, 2).unwrap();
        assert!(matches!(
            net.apply(&[0.0, 0.0], 2).unwrap_err(),
            Error::Usage(_)
        ));
    }

    #[test]
    fn perfect_fit_leaves_parameters_bitwise_unchanged() {
        let mut cfg = toy_cfg(2, 1);
        cfg.weight_decay = 0.0;
        let mut net = TransportNet::new(&cfg, 2, 1).unwrap();
        // At identity initialization, v = x pairs already have zero loss.
        let xs: Vec<Vec<f64>> = vec![vec![0.1, 0.2], vec![-0.5, 0.9]];
        let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let before = net.params.clone();
        let loss = net.matching_update(&xr, &xr, &[0, 0], 2).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(net.params, before);
    }

    #[test]
    fn single_pair_linear_sgd_step_closed_form() {
        // Linear residual R(x) = Wx + b, loss ||x + Wx + b - v||^2.
        let cfg = TransportConfig {
            hidden: vec![],
            embed_width: 0,
            learning_rate: 0.05,
            weight_decay: 0.0,
            sgd_momentum: Some(0.0),
            sub_batch: None,
            epochs_per_batch: 1,
            seed: 1,
        };
        let mut net = TransportNet::new(&cfg, 2, 1).unwrap();
        let x = vec![0.8, -0.4];
        let v = vec![0.2, 0.3];
        // Residual is zero at init; r = x - v.
        let r = [x[0] - v[0], x[1] - v[1]];
        net.matching_update(&[&x], &[&v], &[0], 1).unwrap();
        // grad W_ij = 2 r_i x_j, grad b_i = 2 r_i; SGD subtracts lr * grad.
        for i in 0..2 {
            for j in 0..2 {
                let expect = -0.05 * 2.0 * r[i] * x[j];
                assert!((net.params[i * 2 + j] - expect).abs() < 1e-14);
            }
            let expect_b = -0.05 * 2.0 * r[i];
            assert!((net.params[4 + i] - expect_b).abs() < 1e-14);
        }
    }

    #[test]
    fn train_to_fit_toy_pairs() {
        // 50 pairs with a smooth displacement field; train until the
        // matching loss crosses 1e-6, then every pair is mapped to within
        // 1e-2.
        let cfg = TransportConfig {
            hidden: vec![16, 16],
            embed_width: 0,
            learning_rate: 5e-3,
            weight_decay: 0.0,
            sgd_momentum: None,
            sub_batch: None,
            epochs_per_batch: 1,
            seed: 12,
        };
        let mut net = TransportNet::new(&cfg, 2, 1).unwrap();
        let mut rng = Rng::new(40);
        let xs: Vec<Vec<f64>> = (0..50)
            .map(|_| vec![rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)])
            .collect();
        let vs: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| {
                vec![
                    x[0] + 0.2 * (x[1] * 2.0).sin(),
                    x[1] - 0.2 * (x[0] * 2.0).cos(),
                ]
            })
            .collect();
        let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let vr: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        let ys = vec![0usize; 50];
        let mut fitted = false;
        for _ in 0..20_000 {
            let loss = net.matching_update(&xr, &vr, &ys, 50).unwrap();
            if loss < 1e-6 {
                fitted = true;
                break;
            }
        }
        assert!(fitted, "matching loss never crossed 1e-6");
        for (x, v) in xs.iter().zip(&vs) {
            let out = net.apply(x, 0).unwrap();
            assert!(linalg::dist(&out, v) <= 1e-2);
        }
    }

    #[test]
    fn matching_gradient_matches_finite_differences() {
        let mut cfg = toy_cfg(2, 3);
        cfg.hidden = vec![6, 6];
        cfg.embed_width = 4;
        let net = TransportNet::new(&cfg, 2, 3).unwrap();
        // Move off the identity so residual gradients are non-trivial.
        let mut net = net;
        let mut rng = Rng::new(77);
        for p in net.params.iter_mut() {
            *p += rng.uniform_in(-0.2, 0.2);
        }
        let xs = [vec![0.3, -0.6], vec![0.9, 0.1]];
        let vs = [vec![0.0, 0.2], vec![0.5, 0.4]];
        let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let vr: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        let ys = [0usize, 2];
        let analytic = net.matching_grad(&xr, &vr, &ys).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for j in 0..net.params.len() {
            let orig = net.params[j];
            net.params[j] = orig + h;
            let fp = net.matching_loss(&xr, &vr, &ys).unwrap();
            net.params[j] = orig - h;
            let fm = net.matching_loss(&xr, &vr, &ys).unwrap();
            net.params[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = analytic[j].abs().max(fd.abs()).max(1e-8);
            worst = worst.max((analytic[j] - fd).abs() / denom);
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn generalization_on_identical_sets_is_equal() {
        let net = TransportNet::new(&toy_cfg(2, 1), 2, 1).unwrap();
        let xs = [vec![0.1, 0.4], vec![-0.3, 0.2]];
        let vs = [vec![0.2, 0.5], vec![-0.2, 0.1]];
        let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let vr: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        let ys = [0, 0];
        let (train, test) =
            evaluate_generalization(&net, &xr, &vr, &ys, &xr, &vr, &ys).unwrap();
        assert_eq!(train, test);
    }

    #[test]
    fn constant_target_map_predicts_constant() {
        // Fit every target to one constant c; any test input then maps near c.
        let cfg = TransportConfig {
            hidden: vec![8, 8],
            embed_width: 0,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            sgd_momentum: None,
            sub_batch: None,
            epochs_per_batch: 1,
            seed: 5,
        };
        let mut net = TransportNet::new(&cfg, 2, 1).unwrap();
        let c = vec![0.5, -0.25];
        let mut rng = Rng::new(50);
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|_| vec![rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)])
            .collect();
        let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let vr: Vec<&[f64]> = xs.iter().map(|_| c.as_slice()).collect();
        let ys = vec![0usize; xs.len()];
        let mut final_loss = f64::INFINITY;
        for _ in 0..8000 {
            final_loss = net.matching_update(&xr, &vr, &ys, 40).unwrap();
            if final_loss < 1e-5 {
                break;
            }
        }
        let fit_err = final_loss.sqrt();
        let probe = net.apply(&[0.05, 0.05], 0).unwrap();
        assert!(linalg::dist(&probe, &c) <= 10.0 * fit_err.max(1e-2));
    }

    #[test]
    fn nearest_neighbor_respects_classes() {
        let train_x = [vec![0.0, 0.0], vec![1.0, 1.0]];
        let train_v = [vec![9.0, 9.0], vec![7.0, 7.0]];
        let xr: Vec<&[f64]> = train_x.iter().map(|x| x.as_slice()).collect();
        let vr: Vec<&[f64]> = train_v.iter().map(|v| v.as_slice()).collect();
        // Test point closest to sample 0, but class restricts it to sample 1.
        let test_x = [vec![0.1, 0.1]];
        let tr: Vec<&[f64]> = test_x.iter().map(|x| x.as_slice()).collect();
        let targets = nearest_neighbor_targets(&xr, &vr, &[0, 1], &tr, &[1]);
        assert_eq!(targets[0], vec![7.0, 7.0]);
        let targets = nearest_neighbor_targets(&xr, &vr, &[], &tr, &[0]);
        assert_eq!(targets[0], vec![9.0, 9.0]);
    }

    #[test]
    fn trajectory_endpoints_and_count() {
        let mut cfg = toy_cfg(2, 1);
        cfg.hidden = vec![4];
        let mut net = TransportNet::new(&cfg, 2, 1).unwrap();
        let mut rng = Rng::new(9);
        for p in net.params.iter_mut() {
            *p += rng.uniform_in(-0.3, 0.3);
        }
        let x = vec![0.2, -0.8];
        let traj = interpolation_trajectory(&net, &x, 0, 10).unwrap();
        assert_eq!(traj.len(), 11);
        assert_eq!(traj[0], x);
        let target = net.apply(&x, 0).unwrap();
        assert!(linalg::dist(&traj[10], &target) < 1e-12);
    }

    #[test]
    fn named_params_roundtrip() {
        let mut net = TransportNet::new(&toy_cfg(2, 3), 2, 3).unwrap();
        let mut rng = Rng::new(31);
        for p in net.params.iter_mut() {
            *p += rng.uniform_in(-0.1, 0.1);
        }
        let map = net.to_named_params();
        let mut fresh = TransportNet::new(&toy_cfg(2, 3), 2, 3).unwrap();
        fresh.load_named_params(&map).unwrap();
        assert_eq!(fresh.params, net.params);
    }
}
