//! Run configuration: a flat, merge-friendly file format and its resolved
//! in-memory form.
//!
//! Precedence: command-line flags override file values, which override
//! defaults; the `WDRO_SEED` environment variable overrides the seed from
//! any source. The solve command writes the fully resolved configuration to
//! `config.json` in the run directory, and re-running from that file
//! reproduces the run bitwise.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use wdro_core::data::Dataset;
use wdro_core::losses::{ClassifierLoss, GlmRegressionLoss};
use wdro_core::nn::{Mlp, MlpArch};
use wdro_core::particles::seeded_theta;
use wdro_core::problem::{LossModel, ProblemSpec, SolverConfig};
use wdro_core::rng::Rng;
use wdro_core::transport_net::TransportConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Gda,
    GdaMomentum,
    GdaAlternating,
    Elim,
    Ppm,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Gda => "gda",
            Method::GdaMomentum => "gda-momentum",
            Method::GdaAlternating => "gda-alternating",
            Method::Elim => "elim",
            Method::Ppm => "ppm",
        }
    }
}

/// Which loss model a run optimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossSpec {
    /// 2D generalized-linear regression loss.
    Glm { sigma_y: f64 },
    /// Cross-entropy over MLP logits; theta is the flattened network.
    Classifier {
        hidden: Vec<usize>,
        weight_decay: f64,
    },
}

/// Flat configuration file: every field optional, unknown fields rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RawConfig {
    pub method: Option<Method>,
    pub dataset: Option<PathBuf>,
    pub gamma: Option<f64>,
    pub num_classes: Option<usize>,
    pub class_proportions: Option<Vec<f64>>,
    pub eta: Option<f64>,
    pub tau: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    pub ppm_s: Option<f64>,
    pub inner_tol: Option<f64>,
    pub rho_est: Option<f64>,
    pub loss: Option<LossSpec>,
    /// Scale of the seeded uniform theta initialization (GLM loss).
    pub theta_scale: Option<f64>,
    pub with_map: Option<bool>,
    pub transport: Option<TransportConfig>,
    pub output_dir: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
    pub allow_max_iters: Option<bool>,
}

impl RawConfig {
    pub fn from_file(path: &Path) -> Result<RawConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Field-wise merge; `other` wins where present.
    pub fn merged_with(mut self, other: RawConfig) -> RawConfig {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            method,
            dataset,
            gamma,
            num_classes,
            class_proportions,
            eta,
            tau,
            momentum,
            batch_size,
            max_iters,
            tol,
            seed,
            ppm_s,
            inner_tol,
            rho_est,
            loss,
            theta_scale,
            with_map,
            transport,
            output_dir,
            checkpoint_every,
            allow_max_iters
        );
        self
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub method: Method,
    pub problem: ProblemSpec,
    pub solver: SolverConfig,
    pub loss: LossSpec,
    pub dataset_path: PathBuf,
    pub theta_scale: f64,
    pub rho_est: Option<f64>,
    pub with_map: bool,
    pub transport: TransportConfig,
    pub output_dir: PathBuf,
    pub checkpoint_every: usize,
    pub allow_max_iters: bool,
}

impl RunConfig {
    /// Resolves a merged raw configuration against the dataset it references.
    /// Method-specific constraints are validated here, before any compute.
    pub fn resolve(raw: &RawConfig, data: &Dataset) -> Result<RunConfig> {
        let method = raw.method.context("method is required")?;
        let dataset_path = raw.dataset.clone().context("dataset path is required")?;
        let output_dir = raw.output_dir.clone().context("output_dir is required")?;

        let mut seed = raw.seed.unwrap_or(0);
        if let Ok(env_seed) = std::env::var("WDRO_SEED") {
            seed = env_seed
                .parse()
                .context("WDRO_SEED must be an unsigned integer")?;
        }

        let num_classes = raw.num_classes.unwrap_or_else(|| data.num_classes());
        if num_classes != data.num_classes() {
            bail!(
                "config says {num_classes} classes, dataset has {}",
                data.num_classes()
            );
        }
        let class_proportions = raw
            .class_proportions
            .clone()
            .unwrap_or_else(|| data.class_proportions());

        let loss = raw.loss.clone().unwrap_or(LossSpec::Glm { sigma_y: 0.5 });
        if let LossSpec::Glm { .. } = loss {
            if num_classes != 1 {
                bail!("the GLM regression loss is unconditioned; dataset has labels");
            }
        }
        let param_dim = match &loss {
            LossSpec::Glm { .. } => data.dim(),
            LossSpec::Classifier { hidden, .. } => {
                let mut widths = vec![data.dim()];
                widths.extend_from_slice(hidden);
                widths.push(num_classes);
                MlpArch::new(widths)
                    .map_err(|e| anyhow::anyhow!("{e}"))?
                    .param_count()
            }
        };

        let problem = ProblemSpec {
            gamma: raw.gamma.context("gamma is required")?,
            data_dim: data.dim(),
            param_dim,
            num_classes,
            class_proportions,
        };
        problem.validate().map_err(|e| anyhow::anyhow!("{e}"))?;

        let defaults = SolverConfig::default();
        let momentum = raw.momentum.unwrap_or(match method {
            Method::GdaMomentum => 0.7,
            _ => 0.0,
        });
        match method {
            Method::Gda | Method::GdaAlternating | Method::Elim | Method::Ppm
                if momentum != 0.0 =>
            {
                bail!("momentum is only available with method gda-momentum");
            }
            Method::GdaMomentum if momentum == 0.0 => {
                bail!("gda-momentum requires momentum > 0");
            }
            _ => {}
        }
        let solver = SolverConfig {
            eta: raw.eta.unwrap_or(defaults.eta),
            tau: raw.tau.unwrap_or(defaults.tau),
            momentum,
            batch_size: Some(raw.batch_size.unwrap_or_else(|| data.n())),
            max_iters: raw.max_iters.unwrap_or(defaults.max_iters),
            tol: raw.tol.unwrap_or(defaults.tol),
            seed,
            alternating: method == Method::GdaAlternating,
            ppm_s: raw.ppm_s.unwrap_or(defaults.ppm_s),
            inner_tol: raw.inner_tol.unwrap_or(defaults.inner_tol),
        };
        solver.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        solver
            .effective_batch(data.n())
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        if method == Method::Ppm && raw.ppm_s.is_none() {
            bail!("method ppm requires ppm_s");
        }

        let with_map = raw.with_map.unwrap_or(false);
        let mut transport = raw
            .transport
            .clone()
            .unwrap_or_else(|| TransportConfig::defaults(data.dim(), num_classes));
        if raw.transport.is_none() {
            transport.seed = seed;
        }
        if with_map && method == Method::Ppm {
            bail!("concurrent map training is wired to the GDA family");
        }

        Ok(RunConfig {
            method,
            problem,
            solver,
            loss,
            dataset_path,
            theta_scale: raw.theta_scale.unwrap_or(1.0),
            rho_est: raw.rho_est,
            with_map,
            transport,
            output_dir,
            checkpoint_every: raw.checkpoint_every.unwrap_or(0),
            allow_max_iters: raw.allow_max_iters.unwrap_or(false),
        })
    }

    /// The fully populated flat form written to `config.json`.
    pub fn to_raw(&self) -> RawConfig {
        RawConfig {
            method: Some(self.method),
            dataset: Some(self.dataset_path.clone()),
            gamma: Some(self.problem.gamma),
            num_classes: Some(self.problem.num_classes),
            class_proportions: Some(self.problem.class_proportions.clone()),
            eta: Some(self.solver.eta),
            tau: Some(self.solver.tau),
            momentum: Some(self.solver.momentum),
            batch_size: self.solver.batch_size,
            max_iters: Some(self.solver.max_iters),
            tol: Some(self.solver.tol),
            seed: Some(self.solver.seed),
            ppm_s: Some(self.solver.ppm_s),
            inner_tol: Some(self.solver.inner_tol),
            rho_est: self.rho_est,
            loss: Some(self.loss.clone()),
            theta_scale: Some(self.theta_scale),
            with_map: Some(self.with_map),
            transport: Some(self.transport.clone()),
            output_dir: Some(self.output_dir.clone()),
            checkpoint_every: Some(self.checkpoint_every),
            allow_max_iters: Some(self.allow_max_iters),
        }
    }

    /// Builds the configured loss model.
    pub fn build_loss(&self, data: &Dataset) -> Result<Box<dyn LossModel>> {
        match &self.loss {
            LossSpec::Glm { sigma_y } => {
                let mut l = GlmRegressionLoss::new(data.dim());
                l.sigma_y = *sigma_y;
                Ok(Box::new(l))
            }
            LossSpec::Classifier {
                hidden,
                weight_decay,
            } => {
                let mut widths = vec![data.dim()];
                widths.extend_from_slice(hidden);
                widths.push(self.problem.num_classes);
                let arch = MlpArch::new(widths).map_err(|e| anyhow::anyhow!("{e}"))?;
                Ok(Box::new(ClassifierLoss::new(arch, *weight_decay)))
            }
        }
    }

    /// Seeded initial decision parameters. The GLM theta is uniform in
    /// [-theta_scale, theta_scale]^p; the classifier uses He-style fan-in
    /// initialization of its network from the run seed.
    pub fn initial_theta(&self) -> Result<Vec<f64>> {
        match &self.loss {
            LossSpec::Glm { .. } => Ok(seeded_theta(
                self.problem.param_dim,
                self.solver.seed,
                self.theta_scale,
            )),
            LossSpec::Classifier { hidden, .. } => {
                let mut widths = vec![self.problem.data_dim];
                widths.extend_from_slice(hidden);
                widths.push(self.problem.num_classes);
                let arch = MlpArch::new(widths).map_err(|e| anyhow::anyhow!("{e}"))?;
                let mut rng = Rng::new(self.solver.seed).split(0xC1A55);
                Ok(Mlp::new_seeded(arch, &mut rng).params)
            }
        }
    }

    /// Hash over everything that determines the trajectory (excludes
    /// max_iters, output paths, and checkpoint cadence) plus the dataset file
    /// contents. Checkpoints store it so resumes can verify they continue
    /// the same run.
    pub fn dynamics_hash(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Dynamics<'a> {
            method: Method,
            problem: &'a ProblemSpec,
            eta: f64,
            tau: f64,
            momentum: f64,
            batch_size: Option<usize>,
            tol: f64,
            seed: u64,
            alternating: bool,
            ppm_s: f64,
            inner_tol: f64,
            rho_est: Option<f64>,
            loss: &'a LossSpec,
            theta_scale: f64,
            with_map: bool,
            transport: &'a TransportConfig,
        }
        let view = Dynamics {
            method: self.method,
            problem: &self.problem,
            eta: self.solver.eta,
            tau: self.solver.tau,
            momentum: self.solver.momentum,
            batch_size: self.solver.batch_size,
            tol: self.solver.tol,
            seed: self.solver.seed,
            alternating: self.solver.alternating,
            ppm_s: self.solver.ppm_s,
            inner_tol: self.solver.inner_tol,
            rho_est: self.rho_est,
            loss: &self.loss,
            theta_scale: self.theta_scale,
            with_map: self.with_map,
            transport: &self.transport,
        };
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&view)?);
        let bytes = std::fs::read(&self.dataset_path)
            .with_context(|| format!("reading dataset {}", self.dataset_path.display()))?;
        hasher.update(&bytes);
        Ok(format!("{:x}", hasher.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use wdro_core::data::gen_regression_2d;

    fn tmpdir() -> PathBuf {
        let dir = std::env::temp_dir().join(format!("wdro_cfg_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn base_raw(dataset: &Path, out: &Path) -> RawConfig {
        RawConfig {
            method: Some(Method::Gda),
            dataset: Some(dataset.to_path_buf()),
            gamma: Some(0.5),
            output_dir: Some(out.to_path_buf()),
            ..RawConfig::default()
        }
    }

    #[test]
    fn merge_prefers_override() {
        let a = RawConfig {
            gamma: Some(0.5),
            eta: Some(0.1),
            ..RawConfig::default()
        };
        let b = RawConfig {
            eta: Some(0.4),
            ..RawConfig::default()
        };
        let m = a.merged_with(b);
        assert_eq!(m.gamma, Some(0.5));
        assert_eq!(m.eta, Some(0.4));
    }

    #[test]
    fn resolve_fills_dataset_facts() {
        let dir = tmpdir();
        let path = dir.join("reg.csv");
        gen_regression_2d(50, 3).save(&path).unwrap();
        let data = Dataset::load(&path).unwrap();
        let cfg = RunConfig::resolve(&base_raw(&path, &dir), &data).unwrap();
        assert_eq!(cfg.problem.data_dim, 2);
        assert_eq!(cfg.problem.param_dim, 2);
        assert_eq!(cfg.solver.batch_size, Some(50));
        assert_eq!(cfg.problem.class_proportions, vec![1.0]);
    }

    #[test]
    fn ppm_requires_explicit_s() {
        let dir = tmpdir();
        let path = dir.join("reg2.csv");
        gen_regression_2d(10, 3).save(&path).unwrap();
        let data = Dataset::load(&path).unwrap();
        let mut raw = base_raw(&path, &dir);
        raw.method = Some(Method::Ppm);
        assert!(RunConfig::resolve(&raw, &data).is_err());
        raw.ppm_s = Some(0.5);
        raw.eta = Some(0.25);
        RunConfig::resolve(&raw, &data).unwrap();
    }

    #[test]
    fn momentum_requires_matching_method() {
        let dir = tmpdir();
        let path = dir.join("reg3.csv");
        gen_regression_2d(10, 3).save(&path).unwrap();
        let data = Dataset::load(&path).unwrap();
        let mut raw = base_raw(&path, &dir);
        raw.momentum = Some(0.7);
        assert!(RunConfig::resolve(&raw, &data).is_err());
        raw.method = Some(Method::GdaMomentum);
        let cfg = RunConfig::resolve(&raw, &data).unwrap();
        assert_eq!(cfg.solver.momentum, 0.7);
    }

    #[test]
    fn resolved_roundtrip_through_raw() {
        let dir = tmpdir();
        let path = dir.join("reg4.csv");
        gen_regression_2d(10, 3).save(&path).unwrap();
        let data = Dataset::load(&path).unwrap();
        let cfg = RunConfig::resolve(&base_raw(&path, &dir), &data).unwrap();
        let raw = cfg.to_raw();
        let text = serde_json::to_string_pretty(&raw).unwrap();
        let parsed: RawConfig = serde_json::from_str(&text).unwrap();
        let cfg2 = RunConfig::resolve(&parsed, &data).unwrap();
        assert_eq!(cfg.solver.seed, cfg2.solver.seed);
        assert_eq!(cfg.dynamics_hash().unwrap(), cfg2.dynamics_hash().unwrap());
    }
}
