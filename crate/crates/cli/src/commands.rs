//! The five subcommands: gen-data, solve, eval, probe, export-traj.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use wdro_core::data::{gen_blobs, gen_regression_2d, ring_centers, Dataset};
use wdro_core::diagnostics::{
    mean_displacement, probe_assumptions, transport_cost, GradNorms, ProbeRanges,
};
use wdro_core::elimination::elim_run;
use wdro_core::error::Error as CoreError;
use wdro_core::linalg::Matrix;
use wdro_core::losses::GlmRegressionLoss;
use wdro_core::particles::{run as gda_run, MapTrainer, ParticleState};
use wdro_core::ppm::ppm_run;
use wdro_core::problem::{ProblemSpec, QuadraticLoss, ZeroLoss};
use wdro_core::runlog::{RunLog, ELIM_COLUMNS, GDA_COLUMNS, PPM_COLUMNS};
use wdro_core::transport_net::{
    interpolation_trajectory, mse_on_pairs, nearest_neighbor_targets, TransportNet,
};

use crate::checkpoint::Checkpoint;
use crate::config::{Method, RawConfig, RunConfig};

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Dataset family: regression2d | blobs
    #[arg(long)]
    pub kind: String,
    /// Sample count (regression2d).
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Samples per class (blobs).
    #[arg(long, default_value_t = 100)]
    pub n_per_class: usize,
    /// Class count (blobs).
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Blob standard deviation.
    #[arg(long, default_value_t = 0.5)]
    pub scale: f64,
    /// Radius of the circle the blob centers sit on.
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    /// Sample dimension (blobs).
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing output file.
    #[arg(long)]
    pub force: bool,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    if args.out.exists() && !args.force {
        bail!(
            "refusing to overwrite {} (pass --force to allow)",
            args.out.display()
        );
    }
    let data = match args.kind.as_str() {
        "regression2d" => gen_regression_2d(args.n, args.seed),
        "blobs" => {
            let centers = ring_centers(args.k, args.separation, args.dim);
            gen_blobs(args.n_per_class, &centers, args.scale, args.seed)
                .map_err(|e| anyhow::anyhow!("{e}"))?
        }
        other => bail!("unknown dataset kind '{other}' (regression2d | blobs)"),
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    data.save(&args.out).map_err(|e| anyhow::anyhow!("{e}"))?;
    println!(
        "wrote {} samples (d = {}, k = {}) to {}",
        data.n(),
        data.dim(),
        data.num_classes(),
        args.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- solve

#[derive(Debug, Default, Args)]
pub struct SolveArgs {
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Resume from a checkpoint written by a previous run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ppm_s: Option<f64>,
    #[arg(long)]
    pub inner_tol: Option<f64>,
    /// Weak-concavity bound for the PPM prox subproblem; estimated by
    /// sampling when omitted.
    #[arg(long)]
    pub rho_est: Option<f64>,
    /// Scale of the seeded uniform theta initialization.
    #[arg(long)]
    pub theta_scale: Option<f64>,
    /// Train the neural transport map concurrently.
    #[arg(long)]
    pub with_map: bool,
    /// Sub-batch size m' for matching updates.
    #[arg(long)]
    pub map_sub_batch: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a checkpoint every C iterations (0: only at exit).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Exit 0 even when the run stops at max_iters.
    #[arg(long)]
    pub allow_max_iters: bool,
}

impl SolveArgs {
    fn as_raw(&self) -> RawConfig {
        RawConfig {
            method: self.method,
            dataset: self.data.clone(),
            gamma: self.gamma,
            num_classes: None,
            class_proportions: None,
            eta: self.eta,
            tau: self.tau,
            momentum: self.momentum,
            batch_size: self.batch_size,
            max_iters: self.max_iters,
            tol: self.tol,
            seed: self.seed,
            ppm_s: self.ppm_s,
            inner_tol: self.inner_tol,
            rho_est: self.rho_est,
            loss: None,
            theta_scale: self.theta_scale,
            with_map: if self.with_map { Some(true) } else { None },
            transport: None,
            output_dir: self.out.clone(),
            checkpoint_every: self.checkpoint_every,
            allow_max_iters: if self.allow_max_iters { Some(true) } else { None },
        }
    }
}

/// Final run summary written as `summary.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub converged: bool,
    pub iterations: usize,
    pub final_batch_norms: Option<GradNorms>,
    pub final_full_norms: Option<GradNorms>,
    pub nge_total: f64,
    pub transport_cost: f64,
    pub mean_displacement: f64,
    pub matching_loss_last: Option<f64>,
    pub warnings: Vec<String>,
    /// Iteration at which the run aborted, when it diverged.
    pub failed_iteration: Option<usize>,
    pub error: Option<String>,
}

pub struct SolveOutcome {
    pub converged: bool,
    pub allow_max_iters: bool,
    pub diverged: bool,
    pub summary_path: PathBuf,
}

pub fn cmd_solve(args: &SolveArgs) -> Result<SolveOutcome> {
    // Resolve configuration: defaults < checkpoint-config < file < flags.
    let mut raw = RawConfig::default();
    let resume_ckpt = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            raw = raw.merged_with(ckpt.config.clone());
            Some(ckpt)
        }
        None => None,
    };
    if let Some(path) = &args.config {
        raw = raw.merged_with(RawConfig::from_file(path)?);
    }
    raw = raw.merged_with(args.as_raw());

    let dataset_path = raw
        .dataset
        .clone()
        .context("dataset path is required (--data or config)")?;
    let data = Dataset::load(&dataset_path).map_err(|e| anyhow::anyhow!("{e}"))?;
    let cfg = RunConfig::resolve(&raw, &data)?;

    fs::create_dir_all(&cfg.output_dir)?;
    let config_json = serde_json::to_string_pretty(&cfg.to_raw())?;
    fs::write(cfg.output_dir.join("config.json"), config_json)?;

    let loss = cfg.build_loss(&data)?;

    // State and transport net, fresh or restored.
    let (mut state, mut net) = match &resume_ckpt {
        Some(ckpt) => {
            let state = ckpt.restore_state(&cfg, &data)?;
            let net = ckpt.restore_transport(&cfg)?;
            if cfg.with_map && net.is_none() {
                bail!("resume requested --with-map but the checkpoint has no transport net");
            }
            (state, net)
        }
        None => {
            let theta0 = cfg.initial_theta()?;
            let state = ParticleState::new(theta0, &data, &cfg.solver)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            let net = if cfg.with_map {
                let mut tc = cfg.transport.clone();
                if let Some(sub) = args.map_sub_batch {
                    tc.sub_batch = Some(sub);
                }
                Some(
                    TransportNet::new(&tc, cfg.problem.data_dim, cfg.problem.num_classes)
                        .map_err(|e| anyhow::anyhow!("{e}"))?,
                )
            } else {
                None
            };
            (state, net)
        }
    };

    let columns = match cfg.method {
        Method::Elim => ELIM_COLUMNS,
        Method::Ppm => PPM_COLUMNS,
        _ => GDA_COLUMNS,
    };
    let log_file = File::create(cfg.output_dir.join("log.csv"))?;
    let mut log = RunLog::with_writer(columns, Box::new(BufWriter::new(log_file)))
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    // Run in segments so checkpoints can be written between iterations.
    let mut solver_error: Option<CoreError> = None;
    loop {
        let segment_end = if cfg.checkpoint_every > 0 {
            ((state.iter / cfg.checkpoint_every) + 1) * cfg.checkpoint_every
        } else {
            cfg.solver.max_iters
        }
        .min(cfg.solver.max_iters);
        let mut seg_cfg = cfg.solver.clone();
        seg_cfg.max_iters = segment_end;

        let result = match cfg.method {
            Method::Gda | Method::GdaMomentum | Method::GdaAlternating => {
                let trainer = net.as_mut().map(|n| n as &mut dyn MapTrainer);
                gda_run(&mut state, loss.as_ref(), &data, &cfg.problem, &seg_cfg, trainer, &mut log)
            }
            Method::Elim => elim_run(&mut state, loss.as_ref(), &data, &cfg.problem, &seg_cfg, &mut log),
            Method::Ppm => ppm_run(
                &mut state,
                loss.as_ref(),
                &data,
                &cfg.problem,
                &seg_cfg,
                cfg.rho_est,
                &mut log,
            ),
        };
        if let Err(e) = result {
            solver_error = Some(e);
            break;
        }
        if log.converged || state.iter >= cfg.solver.max_iters {
            break;
        }
        // Segment boundary: drop the intermediate max_iters warning and
        // checkpoint.
        log.warnings.retain(|w| !w.starts_with("hit max_iters"));
        Checkpoint::capture(&cfg, &state, net.as_ref(), false)?
            .save(&cfg.output_dir.join(format!("checkpoint_{:06}.json", state.iter)))?;
    }

    Checkpoint::capture(&cfg, &state, net.as_ref(), log.converged)?
        .save(&cfg.output_dir.join("checkpoint_final.json"))?;

    let matching_loss_last = log.column("matching_loss").last().copied();
    let (failed_iteration, error) = match &solver_error {
        Some(CoreError::Divergence { iteration, message }) => {
            (Some(*iteration), Some(format!("divergence at iteration {iteration}: {message}")))
        }
        Some(e) => (None, Some(e.to_string())),
        None => (None, None),
    };
    let summary = Summary {
        method: cfg.method.as_str().to_string(),
        converged: log.converged,
        iterations: log.iterations,
        final_batch_norms: log.final_batch_norms,
        final_full_norms: log.final_full_norms,
        nge_total: log.nge_total,
        transport_cost: transport_cost(&state.v, &data),
        mean_displacement: mean_displacement(&state.v, &data),
        matching_loss_last,
        warnings: log.warnings.clone(),
        failed_iteration,
        error,
    };
    let summary_path = cfg.output_dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;

    if let Some(e) = solver_error {
        eprintln!("solver aborted: {e}");
        return Ok(SolveOutcome {
            converged: false,
            allow_max_iters: cfg.allow_max_iters,
            diverged: true,
            summary_path,
        });
    }
    println!(
        "{}: converged = {}, iterations = {}, final norms = {:?}",
        cfg.method.as_str(),
        log.converged,
        log.iterations,
        log.final_batch_norms
            .map(|n| (n.gn_theta, n.gn_t))
            .unwrap_or((f64::NAN, f64::NAN)),
    );
    Ok(SolveOutcome {
        converged: log.converged,
        allow_max_iters: cfg.allow_max_iters,
        diverged: false,
        summary_path,
    })
}

// -------------------------------------------------------------------- eval

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint holding the trained transport net and particles.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Held-out inputs; defaults to the training set when omitted.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated training-sample indices to export trajectories for.
    #[arg(long, value_delimiter = ',')]
    pub traj_samples: Vec<usize>,
    /// Interpolation segments J per trajectory (J + 1 points).
    #[arg(long, default_value_t = 10)]
    pub traj_points: usize,
}

/// Metrics written by eval as `metrics.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub train_mse: f64,
    pub test_mse: f64,
    pub generalization_ratio: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalMetrics> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let train = Dataset::load(
        ckpt.config
            .dataset
            .as_ref()
            .context("checkpoint config lacks a dataset path")?,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    let cfg = RunConfig::resolve(&ckpt.config, &train)?;
    let net = ckpt
        .restore_transport(&cfg)?
        .context("usage error: checkpoint has no transport net (run solve with --with-map)")?;

    let d = train.dim();
    let train_xs: Vec<&[f64]> = (0..train.n()).map(|i| train.sample(i)).collect();
    let train_vs: Vec<&[f64]> = (0..train.n())
        .map(|i| &ckpt.particles[i * d..(i + 1) * d])
        .collect();
    let train_ys: Vec<usize> = (0..train.n()).map(|i| train.label(i)).collect();

    let train_mse = mse_on_pairs(&net, &train_xs, &train_vs, &train_ys)
        .map_err(|e| anyhow::anyhow!("{e}"))?;

    let (test_mse, test_n) = match &args.test {
        Some(path) => {
            let test = Dataset::load(path).map_err(|e| anyhow::anyhow!("{e}"))?;
            if test.dim() != d {
                bail!("test dataset dimension {} != train {}", test.dim(), d);
            }
            let test_xs: Vec<&[f64]> = (0..test.n()).map(|i| test.sample(i)).collect();
            let test_ys: Vec<usize> = (0..test.n()).map(|i| test.label(i)).collect();
            let nn_train_ys = if train.num_classes() > 1 {
                train_ys.clone()
            } else {
                Vec::new()
            };
            let targets =
                nearest_neighbor_targets(&train_xs, &train_vs, &nn_train_ys, &test_xs, &test_ys);
            let target_refs: Vec<&[f64]> = targets.iter().map(|t| t.as_slice()).collect();
            (
                mse_on_pairs(&net, &test_xs, &target_refs, &test_ys)
                    .map_err(|e| anyhow::anyhow!("{e}"))?,
                test.n(),
            )
        }
        None => (train_mse, train.n()),
    };

    fs::create_dir_all(&args.out)?;
    let metrics = EvalMetrics {
        train_mse,
        test_mse,
        generalization_ratio: test_mse / train_mse.max(f64::MIN_POSITIVE),
        train_samples: train.n(),
        test_samples: test_n,
    };
    fs::write(
        args.out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;

    for &i in &args.traj_samples {
        if i >= train.n() {
            bail!("trajectory sample index {i} out of range");
        }
        write_trajectory(
            &net,
            train.sample(i),
            train.label(i),
            args.traj_points,
            &args.out.join(format!("traj_{i:04}.csv")),
        )?;
    }
    println!(
        "train mse = {:.6e}, test mse = {:.6e}, ratio = {:.3}",
        metrics.train_mse, metrics.test_mse, metrics.generalization_ratio
    );
    Ok(metrics)
}

fn write_trajectory(
    net: &TransportNet,
    x: &[f64],
    y: usize,
    points: usize,
    path: &Path,
) -> Result<()> {
    let traj =
        interpolation_trajectory(net, x, y, points).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut out = String::from("j");
    for j in 0..x.len() {
        out.push_str(&format!(",x_{j}"));
    }
    out.push('\n');
    for (j, point) in traj.iter().enumerate() {
        out.push_str(&j.to_string());
        for c in point {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

// ------------------------------------------------------------- export-traj

#[derive(Debug, Args)]
pub struct ExportTrajArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated training-sample indices.
    #[arg(long, value_delimiter = ',', required = true)]
    pub samples: Vec<usize>,
    /// Interpolation segments J (J + 1 rows per sample).
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_export_traj(args: &ExportTrajArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let train = Dataset::load(
        ckpt.config
            .dataset
            .as_ref()
            .context("checkpoint config lacks a dataset path")?,
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    let cfg = RunConfig::resolve(&ckpt.config, &train)?;
    let net = ckpt
        .restore_transport(&cfg)?
        .context("usage error: checkpoint has no transport net (run solve with --with-map)")?;
    fs::create_dir_all(&args.out)?;
    for &i in &args.samples {
        if i >= train.n() {
            bail!("sample index {i} out of range (n = {})", train.n());
        }
        write_trajectory(
            &net,
            train.sample(i),
            train.label(i),
            args.points,
            &args.out.join(format!("traj_{i:04}.csv")),
        )?;
    }
    println!("wrote {} trajectories to {}", args.samples.len(), args.out.display());
    Ok(())
}

// ------------------------------------------------------------------- probe

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Dataset defining the probe region.
    #[arg(long)]
    pub data: PathBuf,
    /// Loss to probe: glm | zero | quadratic
    #[arg(long, default_value = "glm")]
    pub loss: String,
    /// Top curvature of the quadratic test loss.
    #[arg(long, default_value_t = 1.5)]
    pub quad_curvature: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Probe pairs for the smoothness estimate.
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_probe(args: &ProbeArgs) -> Result<()> {
    let data = Dataset::load(&args.data).map_err(|e| anyhow::anyhow!("{e}"))?;
    let d = data.dim();
    let loss: Box<dyn wdro_core::problem::LossModel> = match args.loss.as_str() {
        "glm" => Box::new(GlmRegressionLoss::new(d)),
        "zero" => Box::new(ZeroLoss {
            param_dim: d,
            data_dim: d,
        }),
        "quadratic" => {
            // Diagonal spectrum c, c/2, c/4, ... with known top curvature c.
            let mut b = Matrix::zeros(d, d);
            for j in 0..d {
                b[(j, j)] = args.quad_curvature / (1 << j.min(20)) as f64;
            }
            Box::new(QuadraticLoss::in_v(vec![0.0; d], b, d))
        }
        other => bail!("unknown probe loss '{other}' (glm | zero | quadratic)"),
    };
    let problem = ProblemSpec {
        gamma: args.gamma,
        data_dim: d,
        param_dim: loss.param_dim(),
        num_classes: 1,
        class_proportions: vec![1.0],
    };
    let mut ranges = ProbeRanges::from_dataset(&data);
    if let Some(pairs) = args.pairs {
        ranges.pairs = pairs;
    }
    let report = probe_assumptions(loss.as_ref(), &problem, &ranges, args.seed)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    println!(
        "l0 estimate = {:.4}, eb ratio min = {:?}, hessian min eig = {:?}",
        report.l0_estimate, report.eb_t_ratio_min, report.hessian_min_eig
    );
    Ok(())
}
