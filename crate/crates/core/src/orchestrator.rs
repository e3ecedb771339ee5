//! GPU sharing policy: per-app shares and how they are enforced.
//!
//! Shares are computed once per run from the GPU-placed placement units (a
//! workflow node, or a shared server) and never change afterwards.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BenchmarkSpec, Mode, Policy};
use crate::dag::placement_unit;
use crate::simgpu::{share_to_sms, SimDevice, SimError};

pub const MPS_SHARE_VAR: &str = "CUDA_MPS_ACTIVE_THREAD_PERCENTAGE";

#[derive(Debug, Error, PartialEq)]
pub enum OrchestratorError {
    #[error("static partitioning needs at least one GPU app")]
    EmptySet,
    #[error("GPU partitioning unavailable: {0}")]
    UnsupportedPlatform(String),
    #[error("share {0} is outside (0, 100]")]
    InvalidShare(u32),
    #[error("app `{0}` has no share in this run")]
    UnknownApp(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Percent of the GPU granted to each app: 100 under greedy, `⌊100/n⌋` under static partitioning.
pub fn assign_shares(policy: Policy, gpu_apps: &[String]) -> Result<BTreeMap<String, u32>, OrchestratorError> {
    let share = match policy {
        Policy::Greedy => 100,
        Policy::StaticPartition => {
            if gpu_apps.is_empty() {
                return Err(OrchestratorError::EmptySet);
            }
            100 / gpu_apps.len() as u32
        }
    };
    Ok(gpu_apps.iter().map(|a| (a.clone(), share)).collect())
}

/// GPU-placed placement units of a spec in workflow order, without repeats.
pub fn gpu_units(spec: &BenchmarkSpec) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for n in &spec.workflow {
        let Some(task) = spec.task_for(n) else { continue };
        if !task.device.uses_gpu() {
            continue;
        }
        let unit = placement_unit(spec, &n.node_id);
        if !out.contains(&unit) {
            out.push(unit);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyContext {
    pub policy: Policy,
    shares: BTreeMap<String, u32>,
}

impl PolicyContext {
    pub fn new(policy: Policy, gpu_apps: &[String]) -> Result<Self, OrchestratorError> {
        Ok(Self {
            policy,
            shares: assign_shares(policy, gpu_apps)?,
        })
    }

    /// Context for a spec; a partition run without GPU apps has nothing to divide and yields an empty context.
    pub fn for_spec(spec: &BenchmarkSpec) -> Result<Self, OrchestratorError> {
        let units = gpu_units(spec);
        if units.is_empty() {
            return Ok(Self {
                policy: spec.options.policy,
                shares: BTreeMap::new(),
            });
        }
        Self::new(spec.options.policy, &units)
    }

    pub fn share_of(&self, app: &str) -> Option<u32> {
        self.shares.get(app).copied()
    }

    pub fn active_apps(&self) -> impl Iterator<Item = &str> {
        self.shares.keys().map(String::as_str)
    }

    pub fn shares(&self) -> &BTreeMap<String, u32> {
        &self.shares
    }

    /// The simulated device for this run, partitioned when the policy asks for it.
    pub fn sim_device(&self, sm_count: u32) -> Result<SimDevice, OrchestratorError> {
        match self.policy {
            Policy::Greedy => Ok(SimDevice::new(sm_count)),
            Policy::StaticPartition => {
                Ok(SimDevice::with_shares(sm_count, self.shares.iter().map(|(a, s)| (a.as_str(), *s)))?)
            }
        }
    }
}

/// Environment for a launched subprocess.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub vars: BTreeMap<String, String>,
}

impl EnvSpec {
    pub fn is_partition_free(&self) -> bool {
        !self.vars.contains_key(MPS_SHARE_VAR)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimPolicyBinding {
    pub app: String,
    /// SM quota under partitioning; `None` means unconstrained.
    pub sm_quota: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Binding {
    Env(EnvSpec),
    Sim(SimPolicyBinding),
}

/// What the host offers for enforcing shares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Platform {
    pub mps_daemon: bool,
    pub sm_count: u32,
}

impl Platform {
    /// Looks for the control pipe of a running MPS daemon.
    pub fn detect(sm_count: u32) -> Self {
        let dir = std::env::var_os("CUDA_MPS_PIPE_DIRECTORY")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("/tmp/nvidia-mps"));
        Self {
            mps_daemon: dir.join("control").exists(),
            sm_count,
        }
    }
}

pub fn apply_placement(
    app: &str,
    share: u32,
    policy: Policy,
    mode: Mode,
    platform: &Platform,
) -> Result<Binding, OrchestratorError> {
    if share == 0 || share > 100 {
        return Err(OrchestratorError::InvalidShare(share));
    }
    match (mode, policy) {
        (Mode::Live, Policy::Greedy) => Ok(Binding::Env(EnvSpec::default())),
        (Mode::Live, Policy::StaticPartition) => {
            if !platform.mps_daemon {
                return Err(OrchestratorError::UnsupportedPlatform(
                    "no MPS control daemon is running".into(),
                ));
            }
            let mut env = EnvSpec::default();
            env.vars.insert(MPS_SHARE_VAR.into(), share.to_string());
            Ok(Binding::Env(env))
        }
        (Mode::Simulated, Policy::Greedy) => Ok(Binding::Sim(SimPolicyBinding {
            app: app.into(),
            sm_quota: None,
        })),
        (Mode::Simulated, Policy::StaticPartition) => Ok(Binding::Sim(SimPolicyBinding {
            app: app.into(),
            sm_quota: Some(share_to_sms(share, platform.sm_count)),
        })),
    }
}

/// Bindings for every app of a context, in app order.
pub fn apply_all(ctx: &PolicyContext, mode: Mode, platform: &Platform) -> Result<BTreeMap<String, Binding>, OrchestratorError> {
    ctx.shares
        .iter()
        .map(|(app, share)| Ok((app.clone(), apply_placement(app, *share, ctx.policy, mode, platform)?)))
        .collect()
}
