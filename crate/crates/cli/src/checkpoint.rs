//! Checkpointing: the full solver state plus the resolved configuration, as
//! one JSON file. Resuming reproduces the uninterrupted trajectory bitwise.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use wdro_core::data::Dataset;
use wdro_core::nn::OptimState;
use wdro_core::particles::{BatchSchedule, ParticleState};
use wdro_core::rng::Rng;
use wdro_core::transport_net::TransportNet;

use crate::config::{RawConfig, RunConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransportCheckpoint {
    /// Flat layer-name -> row-major array map, plus the embedding table.
    pub params: Map<String, Value>,
    pub optimizer: OptimState,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Fully resolved configuration of the run that produced this state.
    pub config: RawConfig,
    /// Hash of the trajectory-determining parts of the configuration and the
    /// dataset contents.
    pub config_hash: String,
    pub iteration: usize,
    pub converged: bool,
    pub theta: Vec<f64>,
    pub particles: Vec<f64>,
    pub velocities: Vec<f64>,
    pub theta_velocity: Vec<f64>,
    pub rng_seed: u64,
    pub rng_state: u64,
    pub schedule_perm: Vec<usize>,
    pub schedule_cursor: usize,
    pub schedule_batch: usize,
    pub nge_units: f64,
    pub transport: Option<TransportCheckpoint>,
}

impl Checkpoint {
    pub fn capture(
        cfg: &RunConfig,
        state: &ParticleState,
        net: Option<&TransportNet>,
        converged: bool,
    ) -> Result<Checkpoint> {
        let (rng_seed, rng_state) = state.rng.state();
        let (schedule_perm, schedule_cursor, schedule_batch) = state.schedule.serialize_state();
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg.to_raw(),
            config_hash: cfg.dynamics_hash()?,
            iteration: state.iter,
            converged,
            theta: state.theta.clone(),
            particles: state.v.clone(),
            velocities: state.g.clone(),
            theta_velocity: state.h.clone(),
            rng_seed,
            rng_state,
            schedule_perm,
            schedule_cursor,
            schedule_batch,
            nge_units: state.nge_units,
            transport: net.map(|n| TransportCheckpoint {
                params: n.to_named_params(),
                optimizer: n.optimizer().clone(),
            }),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)
            .with_context(|| format!("writing checkpoint {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading checkpoint {}", path.display()))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .with_context(|| format!("parsing checkpoint {}", path.display()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            bail!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            );
        }
        Ok(ckpt)
    }

    /// Rebuilds the particle state this checkpoint captured.
    pub fn restore_state(&self, cfg: &RunConfig, data: &Dataset) -> Result<ParticleState> {
        let expected = cfg.dynamics_hash()?;
        if expected != self.config_hash {
            bail!(
                "checkpoint belongs to a different run (config hash {} != {})",
                self.config_hash,
                expected
            );
        }
        let mut state = ParticleState::new(self.theta.clone(), data, &cfg.solver)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        if self.particles.len() != data.n() * data.dim() {
            bail!("checkpoint particle count does not match the dataset");
        }
        state.v = self.particles.clone();
        state.g = self.velocities.clone();
        state.h = self.theta_velocity.clone();
        state.iter = self.iteration;
        state.rng = Rng::from_state(self.rng_seed, self.rng_state);
        state.schedule = BatchSchedule::from_state(
            self.schedule_perm.clone(),
            self.schedule_cursor,
            self.schedule_batch,
        );
        state.nge_units = self.nge_units;
        Ok(state)
    }

    /// Rebuilds the transport net, when one was checkpointed.
    pub fn restore_transport(&self, cfg: &RunConfig) -> Result<Option<TransportNet>> {
        let Some(tc) = &self.transport else {
            return Ok(None);
        };
        let mut net = TransportNet::new(
            &cfg.transport,
            cfg.problem.data_dim,
            cfg.problem.num_classes,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        net.load_named_params(&tc.params)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        net.set_optimizer(tc.optimizer.clone());
        Ok(Some(net))
    }
}
