// SPDX-License-Identifier: Apache-2.0

//! Tale instance lifecycle.
//!
//! A launch runs seven steps in order, each leaving one audit record:
//! validate the request, create a volume, create the container, mount the
//! tale's data session, start the container and route it, return
//! connection info, record the instance. If a step fails, everything done
//! by earlier steps is undone and the instance ends in `Error`.

mod proxy;
mod runtime;

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::auth::{Action, AuthService, DenyReason, Scope};
use crate::clock::SharedClock;
use crate::dms::{Dms, DmsError, SessionId, VirtualFs};
use crate::error::ErrorCode;
use crate::store::{Store, StoreError};
use crate::tale::{ImageStatus, TaleError, TaleService};

pub use proxy::{Endpoint, ProxyTable};
pub use runtime::{
    ContainerInfo, ContainerView, RuntimeAdapter, RuntimeError, RuntimeOp, RuntimePolicy, SimulatedRuntime,
};

const INSTANCES: &str = "orchestrator.instances";

/// Where the tale's data appears inside the container.
pub const DATA_MOUNTPOINT: &str = "/home/wt/data";

pub fn route_path(instance_id: &str) -> String {
    format!("/instance/{instance_id}")
}

pub fn tale_resource(tale_id: &str) -> String {
    format!("tale:{tale_id}")
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("unauthorized: {0}")]
    Unauthorized(DenyReason),
    #[error("image {0} is not ready")]
    ImageNotReady(String),
    #[error("launch step {step} ({name:?}) failed: {detail}")]
    StepFailed {
        step: u8,
        name: StepName,
        detail: String,
        instance: String,
    },
    #[error("instance {id} is {state:?}")]
    InvalidState { id: String, state: InstanceState },
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("no route for {0}")]
    NoRoute(String),
    #[error(transparent)]
    Tale(#[from] TaleError),
    #[error(transparent)]
    Dms(#[from] DmsError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ErrorCode for OrchestratorError {
    fn code(&self) -> &'static str {
        match self {
            OrchestratorError::Unauthorized(_) => "Unauthorized",
            OrchestratorError::ImageNotReady(_) => "ImageNotReady",
            OrchestratorError::StepFailed { .. } => "StepFailed",
            OrchestratorError::InvalidState { .. } => "InvalidState",
            OrchestratorError::UnknownInstance(_) => "UnknownInstance",
            OrchestratorError::NoRoute(_) => "NoRoute",
            OrchestratorError::Tale(e) => e.code(),
            OrchestratorError::Dms(e) => e.code(),
            OrchestratorError::Runtime(_) => "RuntimeError",
            OrchestratorError::Store(_) => "StorageError",
        }
    }
}

pub type Result<T, E = OrchestratorError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceState {
    Launching,
    Running,
    Suspended,
    Deleted,
    Error,
}

impl InstanceState {
    pub fn can_become(self, next: InstanceState) -> bool {
        use InstanceState::*;
        matches!(
            (self, next),
            (Launching, Running)
                | (Launching, Error)
                | (Running, Suspended)
                | (Suspended, Running)
                | (Running, Deleted)
                | (Suspended, Deleted)
                | (Error, Deleted)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepName {
    RequestValidated,
    VolumeCreated,
    ContainerCreated,
    DataMounted,
    ContainerStarted,
    ConnectionReturned,
    InstanceRecorded,
}

impl StepName {
    pub const SEQUENCE: [StepName; 7] = [
        StepName::RequestValidated,
        StepName::VolumeCreated,
        StepName::ContainerCreated,
        StepName::DataMounted,
        StepName::ContainerStarted,
        StepName::ConnectionReturned,
        StepName::InstanceRecorded,
    ];

    pub fn index(self) -> u8 {
        Self::SEQUENCE.iter().position(|s| *s == self).expect("listed") as u8 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepOutcome {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchStep {
    pub index: u8,
    pub name: StepName,
    pub outcome: StepOutcome,
    pub detail: String,
    pub at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Connection {
    pub route_path: String,
    pub host: String,
    pub internal_port: u16,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub tale_id: String,
    pub image_digest: String,
    pub container_id: Option<String>,
    pub volume_id: Option<String>,
    pub session_id: Option<SessionId>,
    pub route_path: String,
    pub host: String,
    pub internal_port: Option<u16>,
    pub state: InstanceState,
    pub audit: Vec<LaunchStep>,
    pub owner: Option<String>,
    pub created: DateTime<Utc>,
    pub updated: DateTime<Utc>,
}

/// Chooses the host an instance runs on.
pub trait Scheduler: Send + Sync {
    fn place(&self, tale_id: &str) -> String;
}

#[derive(Debug, Clone)]
pub struct SingleHostScheduler {
    pub host: String,
}

impl Default for SingleHostScheduler {
    fn default() -> Self {
        Self {
            host: "localhost".into(),
        }
    }
}

impl Scheduler for SingleHostScheduler {
    fn place(&self, _tale_id: &str) -> String {
        self.host.clone()
    }
}

/// Admission check for images before a container is created from them.
pub trait ImagePolicy: Send + Sync {
    fn admit(&self, image_digest: &str) -> Result<(), String>;
}

#[derive(Debug, Default, Clone)]
pub struct AllowAllImages;

impl ImagePolicy for AllowAllImages {
    fn admit(&self, _image_digest: &str) -> Result<(), String> {
        Ok(())
    }
}

type Slot = Arc<Mutex<Instance>>;

pub struct Orchestrator {
    instances: RwLock<HashMap<String, Slot>>,
    proxy: ProxyTable,
    runtime: Arc<dyn RuntimeAdapter>,
    scheduler: Arc<dyn Scheduler>,
    image_policy: Arc<dyn ImagePolicy>,
    dms: Arc<Dms>,
    tales: Arc<TaleService>,
    auth: Arc<AuthService>,
    store: Arc<Store>,
    clock: SharedClock,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("instances", &self.instances.read().len())
            .field("routes", &self.proxy.len())
            .finish()
    }
}

/// Resources acquired so far by a launch, undone in reverse on failure.
#[derive(Default)]
struct Acquired {
    volume: Option<String>,
    container: Option<String>,
    session: Option<SessionId>,
    started: bool,
    route: Option<String>,
}

impl Orchestrator {
    /// Restores instances. Running instances whose container is gone are
    /// re-provisioned and re-routed; if that fails they come back
    /// Suspended. Launches cut short by a restart become Error.
    #[allow(clippy::too_many_arguments)]
    pub fn open(
        dms: Arc<Dms>,
        tales: Arc<TaleService>,
        auth: Arc<AuthService>,
        runtime: Arc<dyn RuntimeAdapter>,
        scheduler: Arc<dyn Scheduler>,
        store: Arc<Store>,
        clock: SharedClock,
    ) -> Result<Self> {
        let mut instances = HashMap::new();
        for (_, mut inst) in store.scan::<Instance>(INSTANCES)? {
            if inst.state == InstanceState::Deleted {
                continue;
            }
            if inst.state == InstanceState::Launching {
                inst.state = InstanceState::Error;
                inst.updated = clock.now();
                store.put(INSTANCES, &inst.id, &inst)?;
            }
            instances.insert(inst.id.clone(), Arc::new(Mutex::new(inst)));
        }
        let this = Self {
            instances: RwLock::new(instances),
            proxy: ProxyTable::new(),
            runtime,
            scheduler,
            image_policy: Arc::new(AllowAllImages),
            dms,
            tales,
            auth,
            store,
            clock,
        };
        for slot in this.instances.read().values() {
            let mut inst = slot.lock();
            match inst.state {
                InstanceState::Running => this.restore_running(&mut inst)?,
                InstanceState::Suspended => {
                    if let Err(e) = this.remount(&inst) {
                        log::warn!("instance {} left without data mount: {e}", inst.id);
                    }
                }
                _ => {}
            }
        }
        Ok(this)
    }

    fn restore_running(&self, inst: &mut Instance) -> Result<()> {
        let before = (
            inst.state,
            inst.container_id.clone(),
            inst.volume_id.clone(),
            inst.internal_port,
        );
        let restored = (|| -> Result<()> {
            let alive = inst
                .container_id
                .as_deref()
                .is_some_and(|c| self.runtime.has_container(c));
            if alive {
                self.remount(inst)?;
            } else {
                self.reprovision(inst)?;
            }
            self.runtime
                .start(inst.container_id.as_deref().expect("container assigned"))?;
            if let Some(s) = &inst.session_id {
                self.dms.resume_session(s)?;
            }
            let endpoint = Endpoint {
                host: inst.host.clone(),
                internal_port: inst.internal_port.expect("port assigned with container"),
            };
            self.proxy.register(&inst.route_path, endpoint);
            Ok(())
        })();
        if let Err(e) = restored {
            log::warn!("instance {} could not be restored, suspending: {e}", inst.id);
            inst.state = InstanceState::Suspended;
            if let Some(s) = &inst.session_id {
                let _ = self.dms.suspend_session(s);
            }
        }
        if before
            != (
                inst.state,
                inst.container_id.clone(),
                inst.volume_id.clone(),
                inst.internal_port,
            )
        {
            inst.updated = self.clock.now();
            self.save(inst)?;
        }
        Ok(())
    }

    pub fn set_image_policy(&mut self, policy: Arc<dyn ImagePolicy>) {
        self.image_policy = policy;
    }

    pub fn proxy(&self) -> &ProxyTable {
        &self.proxy
    }

    pub fn runtime(&self) -> &Arc<dyn RuntimeAdapter> {
        &self.runtime
    }

    fn save(&self, inst: &Instance) -> Result<()> {
        self.store.put(INSTANCES, &inst.id, inst)?;
        Ok(())
    }

    fn slot(&self, id: &str) -> Result<Slot> {
        self.instances
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| OrchestratorError::UnknownInstance(id.to_string()))
    }

    fn push_step(&self, inst: &mut Instance, name: StepName, outcome: StepOutcome, detail: String) {
        inst.audit.push(LaunchStep {
            index: name.index(),
            name,
            outcome,
            detail,
            at: self.clock.now(),
        });
    }

    fn rollback(&self, acq: &Acquired) {
        if let Some(r) = &acq.route {
            self.proxy.remove(r);
        }
        if let Some(c) = &acq.container {
            if acq.started {
                let _ = self.runtime.stop(c);
            }
            if let Err(e) = self.runtime.destroy_container(c) {
                log::warn!("rollback: {e}");
            }
        }
        if let Some(s) = &acq.session {
            let _ = self.dms.delete_session(s);
        }
        if let Some(v) = &acq.volume {
            if let Err(e) = self.runtime.destroy_volume(v) {
                log::warn!("rollback: {e}");
            }
        }
    }

    /// Runs the launch protocol for `tale_id` on behalf of `token`.
    pub fn launch_instance(&self, tale_id: &str, token: &str) -> Result<Instance> {
        // step 1: nothing is created until the request checks out
        let principal = self
            .auth
            .validate(token, None)
            .map_err(OrchestratorError::Unauthorized)?;
        if !principal.has_scope(Scope::InstanceLaunch) {
            return Err(OrchestratorError::Unauthorized(DenyReason::InsufficientScope));
        }
        let tale = self.tales.tale(tale_id)?;
        let decision = self
            .auth
            .authorize_principal(&principal, &[tale_resource(tale_id).as_str()], Action::Launch);
        if let crate::auth::Decision::Deny(r) = decision {
            return Err(OrchestratorError::Unauthorized(r));
        }
        let image = self.tales.image(&tale.image_id)?;
        let digest = match (image.status, image.digest) {
            (ImageStatus::Ready, Some(d)) => d,
            _ => return Err(OrchestratorError::ImageNotReady(image.id)),
        };

        let now = self.clock.now();
        let id = uuid::Uuid::new_v4().simple().to_string();
        let mut inst = Instance {
            id: id.clone(),
            tale_id: tale_id.to_string(),
            image_digest: digest.clone(),
            container_id: None,
            volume_id: None,
            session_id: None,
            route_path: route_path(&id),
            host: self.scheduler.place(tale_id),
            internal_port: None,
            state: InstanceState::Launching,
            audit: Vec::new(),
            owner: Some(principal.identity.clone()),
            created: now,
            updated: now,
        };
        self.push_step(
            &mut inst,
            StepName::RequestValidated,
            StepOutcome::Ok,
            format!("tale {tale_id}"),
        );
        let slot = Arc::new(Mutex::new(inst.clone()));
        let mut guard = slot.lock();
        self.instances.write().insert(id.clone(), slot.clone());

        let mut acq = Acquired::default();
        let outcome = self.run_steps(&mut guard, &mut acq, &tale.folder_id, &digest);
        match outcome {
            Ok(()) => Ok(guard.clone()),
            Err((name, detail)) => {
                self.rollback(&acq);
                self.push_step(&mut guard, name, StepOutcome::Failed, detail.clone());
                guard.state = InstanceState::Error;
                guard.container_id = None;
                guard.volume_id = None;
                guard.session_id = None;
                guard.internal_port = None;
                guard.updated = self.clock.now();
                self.save(&guard)?;
                Err(OrchestratorError::StepFailed {
                    step: name.index(),
                    name,
                    detail,
                    instance: id,
                })
            }
        }
    }

    fn run_steps(
        &self,
        inst: &mut Instance,
        acq: &mut Acquired,
        folder: &crate::catalog::NodeId,
        digest: &str,
    ) -> std::result::Result<(), (StepName, String)> {
        use StepName::*;

        let volume = self
            .runtime
            .create_volume()
            .map_err(|e| (VolumeCreated, e.to_string()))?;
        acq.volume = Some(volume.clone());
        inst.volume_id = Some(volume.clone());
        self.push_step(inst, VolumeCreated, StepOutcome::Ok, volume.clone());

        self.image_policy.admit(digest).map_err(|e| (ContainerCreated, e))?;
        let info = self
            .runtime
            .create_container(digest, &volume)
            .map_err(|e| (ContainerCreated, e.to_string()))?;
        acq.container = Some(info.id.clone());
        inst.container_id = Some(info.id.clone());
        inst.internal_port = Some(info.internal_port);
        self.push_step(inst, ContainerCreated, StepOutcome::Ok, info.id.clone());

        let session = self
            .dms
            .create_session(std::slice::from_ref(folder), inst.owner.clone())
            .map_err(|e| (DataMounted, e.to_string()))?;
        acq.session = Some(session.id.clone());
        inst.session_id = Some(session.id.clone());
        let fs = Arc::new(VirtualFs::new(self.dms.clone(), session.id.clone()));
        self.runtime
            .mount(&info.id, DATA_MOUNTPOINT, fs)
            .map_err(|e| (DataMounted, e.to_string()))?;
        self.push_step(
            inst,
            DataMounted,
            StepOutcome::Ok,
            format!("{} files at {DATA_MOUNTPOINT}", session.mount_table.len()),
        );

        self.runtime
            .start(&info.id)
            .map_err(|e| (ContainerStarted, e.to_string()))?;
        acq.started = true;
        let endpoint = Endpoint {
            host: inst.host.clone(),
            internal_port: info.internal_port,
        };
        if !self.proxy.register(&inst.route_path, endpoint) {
            return Err((ContainerStarted, format!("route {} already taken", inst.route_path)));
        }
        acq.route = Some(inst.route_path.clone());
        self.push_step(inst, ContainerStarted, StepOutcome::Ok, inst.route_path.clone());

        self.push_step(
            inst,
            ConnectionReturned,
            StepOutcome::Ok,
            format!("{}:{}", inst.host, info.internal_port),
        );

        inst.state = InstanceState::Running;
        inst.updated = self.clock.now();
        self.push_step(inst, InstanceRecorded, StepOutcome::Ok, inst.id.clone());
        self.save(inst).map_err(|e| (InstanceRecorded, e.to_string()))?;
        Ok(())
    }

    pub fn instance(&self, id: &str) -> Result<Instance> {
        Ok(self.slot(id)?.lock().clone())
    }

    pub fn instances(&self) -> Vec<Instance> {
        let slots: Vec<Slot> = self.instances.read().values().cloned().collect();
        let mut v: Vec<Instance> = slots.iter().map(|s| s.lock().clone()).collect();
        v.sort_by(|a, b| a.created.cmp(&b.created).then_with(|| a.id.cmp(&b.id)));
        v
    }

    pub fn connection(&self, id: &str) -> Result<Connection> {
        let inst = self.instance(id)?;
        match (inst.state, inst.internal_port) {
            (InstanceState::Running, Some(port)) => Ok(Connection {
                route_path: inst.route_path,
                host: inst.host,
                internal_port: port,
            }),
            (state, _) => Err(OrchestratorError::InvalidState { id: inst.id, state }),
        }
    }

    fn transition(&self, inst: &mut Instance, next: InstanceState) -> Result<()> {
        if !inst.state.can_become(next) {
            return Err(OrchestratorError::InvalidState {
                id: inst.id.clone(),
                state: inst.state,
            });
        }
        inst.state = next;
        inst.updated = self.clock.now();
        Ok(())
    }

    pub fn suspend_instance(&self, id: &str) -> Result<Instance> {
        let slot = self.slot(id)?;
        let mut inst = slot.lock();
        if inst.state != InstanceState::Running {
            return Err(OrchestratorError::InvalidState {
                id: inst.id.clone(),
                state: inst.state,
            });
        }
        if let Some(c) = &inst.container_id {
            self.runtime.stop(c)?;
        }
        self.proxy.remove(&inst.route_path);
        if let Some(s) = &inst.session_id {
            self.dms.suspend_session(s)?;
        }
        self.transition(&mut inst, InstanceState::Suspended)?;
        self.save(&inst)?;
        Ok(inst.clone())
    }

    pub fn resume_instance(&self, id: &str) -> Result<Instance> {
        let slot = self.slot(id)?;
        let mut inst = slot.lock();
        if inst.state != InstanceState::Suspended {
            return Err(OrchestratorError::InvalidState {
                id: inst.id.clone(),
                state: inst.state,
            });
        }
        let alive = inst
            .container_id
            .as_deref()
            .is_some_and(|c| self.runtime.has_container(c));
        if !alive {
            self.reprovision(&mut inst)?;
        }
        let container = inst.container_id.clone().expect("container present");
        self.runtime.start(&container)?;
        if let Some(s) = &inst.session_id {
            self.dms.resume_session(s)?;
        }
        let endpoint = Endpoint {
            host: inst.host.clone(),
            internal_port: inst.internal_port.expect("port assigned with container"),
        };
        self.proxy.register(&inst.route_path, endpoint);
        self.transition(&mut inst, InstanceState::Running)?;
        self.save(&inst)?;
        Ok(inst.clone())
    }

    /// Recreates volume and container for an instance whose runtime
    /// resources are gone (after a service restart).
    /// Mounts are process-bound, so a surviving container needs its data
    /// mount re-established after a restart.
    fn remount(&self, inst: &Instance) -> Result<()> {
        let (Some(container), Some(session)) = (&inst.container_id, &inst.session_id) else {
            return Ok(());
        };
        if !self.runtime.has_container(container) || self.dms.session(session).is_err() {
            return Ok(());
        }
        let fs = Arc::new(VirtualFs::new(self.dms.clone(), session.clone()));
        self.runtime.mount(container, DATA_MOUNTPOINT, fs)?;
        Ok(())
    }

    fn reprovision(&self, inst: &mut Instance) -> Result<()> {
        let volume = self.runtime.create_volume()?;
        let info = match self.runtime.create_container(&inst.image_digest, &volume) {
            Ok(i) => i,
            Err(e) => {
                let _ = self.runtime.destroy_volume(&volume);
                return Err(e.into());
            }
        };
        let session = match &inst.session_id {
            Some(s) if self.dms.session(s).is_ok() => s.clone(),
            _ => {
                let tale = self.tales.tale(&inst.tale_id)?;
                let s = self.dms.create_session(&[tale.folder_id], inst.owner.clone())?;
                self.dms.suspend_session(&s.id)?;
                s.id
            }
        };
        let fs = Arc::new(VirtualFs::new(self.dms.clone(), session.clone()));
        if let Err(e) = self.runtime.mount(&info.id, DATA_MOUNTPOINT, fs) {
            let _ = self.runtime.destroy_container(&info.id);
            let _ = self.runtime.destroy_volume(&volume);
            return Err(e.into());
        }
        inst.volume_id = Some(volume);
        inst.container_id = Some(info.id);
        inst.internal_port = Some(info.internal_port);
        inst.session_id = Some(session);
        Ok(())
    }

    pub fn delete_instance(&self, id: &str) -> Result<()> {
        let slot = self.slot(id)?;
        let mut inst = slot.lock();
        if inst.state == InstanceState::Launching {
            return Err(OrchestratorError::InvalidState {
                id: inst.id.clone(),
                state: inst.state,
            });
        }
        self.proxy.remove(&inst.route_path);
        if let Some(c) = inst.container_id.take() {
            if self.runtime.has_container(&c) {
                if inst.state == InstanceState::Running {
                    let _ = self.runtime.stop(&c);
                }
                self.runtime.destroy_container(&c)?;
            }
        }
        if let Some(v) = inst.volume_id.take() {
            let _ = self.runtime.destroy_volume(&v);
        }
        if let Some(s) = inst.session_id.take() {
            let _ = self.dms.delete_session(&s);
        }
        inst.internal_port = None;
        self.transition(&mut inst, InstanceState::Deleted)?;
        self.save(&inst)?;
        self.instances.write().remove(id);
        Ok(())
    }

    pub fn route_lookup(&self, route: &str) -> Result<Endpoint> {
        self.proxy
            .lookup(route)
            .ok_or_else(|| OrchestratorError::NoRoute(route.to_string()))
    }

    /// Sessions held by live instances.
    pub fn sessions_in_use(&self) -> Vec<SessionId> {
        self.instances().into_iter().filter_map(|i| i.session_id).collect()
    }
}

#[cfg(test)]
mod tests;
