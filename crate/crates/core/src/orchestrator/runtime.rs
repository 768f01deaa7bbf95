// SPDX-License-Identifier: Apache-2.0

//! Container runtime adapters.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::dms::SessionFs;
use crate::store::{Store, StoreError};

const RUNTIME_TABLE: &str = "runtime.sim";
const RUNTIME_KEY: &str = "state";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{op}: {message}")]
pub struct RuntimeError {
    pub op: RuntimeOp,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeOp {
    CreateVolume,
    CreateContainer,
    Mount,
    Start,
    Stop,
    DestroyContainer,
    DestroyVolume,
}

impl RuntimeOp {
    pub fn as_str(self) -> &'static str {
        match self {
            RuntimeOp::CreateVolume => "create_volume",
            RuntimeOp::CreateContainer => "create_container",
            RuntimeOp::Mount => "mount",
            RuntimeOp::Start => "start",
            RuntimeOp::Stop => "stop",
            RuntimeOp::DestroyContainer => "destroy_container",
            RuntimeOp::DestroyVolume => "destroy_volume",
        }
    }
}

impl std::fmt::Display for RuntimeOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RuntimePolicy {
    pub intra_container_comm: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerInfo {
    pub id: String,
    pub image: String,
    pub volume: String,
    pub internal_port: u16,
}

pub trait RuntimeAdapter: Send + Sync {
    fn policy(&self) -> RuntimePolicy;
    fn create_volume(&self) -> Result<String, RuntimeError>;
    fn create_container(&self, image_digest: &str, volume: &str) -> Result<ContainerInfo, RuntimeError>;
    /// Exposes `fs` inside the container at `mountpoint`.
    fn mount(&self, container: &str, mountpoint: &str, fs: Arc<dyn SessionFs>) -> Result<(), RuntimeError>;
    fn start(&self, container: &str) -> Result<(), RuntimeError>;
    fn stop(&self, container: &str) -> Result<(), RuntimeError>;
    fn destroy_container(&self, container: &str) -> Result<(), RuntimeError>;
    fn destroy_volume(&self, volume: &str) -> Result<(), RuntimeError>;
    fn has_container(&self, container: &str) -> bool;
}

struct SimContainer {
    info: ContainerInfo,
    running: bool,
    mounts: BTreeMap<String, Arc<dyn SessionFs>>,
}

#[derive(Default)]
struct SimState {
    next_volume: u64,
    next_container: u64,
    volumes: BTreeSet<String>,
    containers: HashMap<String, SimContainer>,
    ports: BTreeSet<u16>,
    faults: HashMap<RuntimeOp, u32>,
    events: Vec<String>,
}

/// Durable part of the simulated engine. Mounts are not kept: like a FUSE
/// layer they vanish with the process that served them.
#[derive(Serialize, Deserialize)]
struct Persisted {
    next_volume: u64,
    next_container: u64,
    volumes: BTreeSet<String>,
    containers: Vec<(ContainerInfo, bool)>,
    rng_word_pos: u128,
}

/// In-process stand-in for a container engine. Ids are sequential and
/// ports are drawn from a seeded generator, so runs are reproducible.
pub struct SimulatedRuntime {
    state: Mutex<SimState>,
    rng: Mutex<ChaCha8Rng>,
    policy: RuntimePolicy,
    clock: SharedClock,
    store: Option<Arc<Store>>,
}

impl std::fmt::Debug for SimulatedRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = self.state.lock();
        f.debug_struct("SimulatedRuntime")
            .field("volumes", &s.volumes.len())
            .field("containers", &s.containers.len())
            .finish()
    }
}

/// A running container's view of one mounted path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContainerView {
    pub info: ContainerInfo,
    pub running: bool,
    pub mountpoints: Vec<String>,
}

impl SimulatedRuntime {
    pub fn new(seed: u64, clock: SharedClock) -> Self {
        Self {
            state: Mutex::new(SimState::default()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            policy: RuntimePolicy::default(),
            clock,
            store: None,
        }
    }

    /// A runtime whose volumes and containers outlive the process, the way
    /// a container daemon outlives the service that drives it.
    pub fn persistent(seed: u64, clock: SharedClock, store: Arc<Store>) -> Result<Self, StoreError> {
        let mut rt = Self::new(seed, clock);
        if let Some(p) = store.get::<Persisted>(RUNTIME_TABLE, RUNTIME_KEY)? {
            let st = rt.state.get_mut();
            st.next_volume = p.next_volume;
            st.next_container = p.next_container;
            st.volumes = p.volumes;
            for (info, running) in p.containers {
                st.ports.insert(info.internal_port);
                st.containers.insert(
                    info.id.clone(),
                    SimContainer {
                        info,
                        running,
                        mounts: BTreeMap::new(),
                    },
                );
            }
            rt.rng.get_mut().set_word_pos(p.rng_word_pos);
        }
        rt.store = Some(store);
        Ok(rt)
    }

    fn persist(&self, st: &SimState, op: RuntimeOp) -> Result<(), RuntimeError> {
        let Some(store) = &self.store else { return Ok(()) };
        let mut containers: Vec<(ContainerInfo, bool)> =
            st.containers.values().map(|c| (c.info.clone(), c.running)).collect();
        containers.sort_by(|a, b| a.0.id.cmp(&b.0.id));
        let p = Persisted {
            next_volume: st.next_volume,
            next_container: st.next_container,
            volumes: st.volumes.clone(),
            containers,
            rng_word_pos: self.rng.lock().get_word_pos(),
        };
        store.put(RUNTIME_TABLE, RUNTIME_KEY, &p).map_err(|e| RuntimeError {
            op,
            message: e.to_string(),
        })
    }

    /// The next `count` calls of `op` fail.
    pub fn inject_fault(&self, op: RuntimeOp, count: u32) {
        *self.state.lock().faults.entry(op).or_default() += count;
    }

    fn check_fault(st: &mut SimState, op: RuntimeOp) -> Result<(), RuntimeError> {
        if let Some(n) = st.faults.get_mut(&op) {
            if *n > 0 {
                *n -= 1;
                return Err(RuntimeError {
                    op,
                    message: "injected fault".into(),
                });
            }
        }
        Ok(())
    }

    fn record(&self, st: &mut SimState, op: RuntimeOp, id: &str) {
        let ts = self.clock.now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
        st.events
            .push(serde_json::json!({"ts": ts, "op": op.as_str(), "id": id}).to_string());
    }

    pub fn volume_count(&self) -> usize {
        self.state.lock().volumes.len()
    }

    pub fn container_count(&self) -> usize {
        self.state.lock().containers.len()
    }

    pub fn running_count(&self) -> usize {
        self.state.lock().containers.values().filter(|c| c.running).count()
    }

    pub fn container(&self, id: &str) -> Option<ContainerView> {
        let st = self.state.lock();
        st.containers.get(id).map(|c| ContainerView {
            info: c.info.clone(),
            running: c.running,
            mountpoints: c.mounts.keys().cloned().collect(),
        })
    }

    /// The filesystem mounted at `mountpoint` in `container`, as a process
    /// inside it would see it.
    pub fn mounted(&self, container: &str, mountpoint: &str) -> Option<Arc<dyn SessionFs>> {
        self.state
            .lock()
            .containers
            .get(container)?
            .mounts
            .get(mountpoint)
            .cloned()
    }

    /// Event log lines, oldest first.
    pub fn events(&self) -> Vec<String> {
        self.state.lock().events.clone()
    }

    pub fn write_event_log(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        for line in self.events() {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    fn missing(op: RuntimeOp, what: &str) -> RuntimeError {
        RuntimeError {
            op,
            message: format!("no such {what}"),
        }
    }
}

impl RuntimeAdapter for SimulatedRuntime {
    fn policy(&self) -> RuntimePolicy {
        self.policy
    }

    fn create_volume(&self) -> Result<String, RuntimeError> {
        let mut st = self.state.lock();
        Self::check_fault(&mut st, RuntimeOp::CreateVolume)?;
        st.next_volume += 1;
        let id = format!("vol-{}", st.next_volume);
        st.volumes.insert(id.clone());
        self.record(&mut st, RuntimeOp::CreateVolume, &id);
        self.persist(&st, RuntimeOp::CreateVolume)?;
        Ok(id)
    }

    fn create_container(&self, image_digest: &str, volume: &str) -> Result<ContainerInfo, RuntimeError> {
        let mut st = self.state.lock();
        Self::check_fault(&mut st, RuntimeOp::CreateContainer)?;
        if !st.volumes.contains(volume) {
            return Err(Self::missing(RuntimeOp::CreateContainer, "volume"));
        }
        let port = {
            let mut rng = self.rng.lock();
            loop {
                let p: u16 = rng.random_range(20000..60000);
                if !st.ports.contains(&p) {
                    break p;
                }
            }
        };
        st.next_container += 1;
        let info = ContainerInfo {
            id: format!("ctr-{}", st.next_container),
            image: image_digest.to_string(),
            volume: volume.to_string(),
            internal_port: port,
        };
        st.ports.insert(port);
        st.containers.insert(
            info.id.clone(),
            SimContainer {
                info: info.clone(),
                running: false,
                mounts: BTreeMap::new(),
            },
        );
        self.record(&mut st, RuntimeOp::CreateContainer, &info.id);
        self.persist(&st, RuntimeOp::CreateContainer)?;
        Ok(info)
    }

    fn mount(&self, container: &str, mountpoint: &str, fs: Arc<dyn SessionFs>) -> Result<(), RuntimeError> {
        let mut st = self.state.lock();
        Self::check_fault(&mut st, RuntimeOp::Mount)?;
        let c = st
            .containers
            .get_mut(container)
            .ok_or_else(|| Self::missing(RuntimeOp::Mount, "container"))?;
        c.mounts.insert(mountpoint.to_string(), fs);
        self.record(&mut st, RuntimeOp::Mount, container);
        Ok(())
    }

    fn start(&self, container: &str) -> Result<(), RuntimeError> {
        let mut st = self.state.lock();
        Self::check_fault(&mut st, RuntimeOp::Start)?;
        let c = st
            .containers
            .get_mut(container)
            .ok_or_else(|| Self::missing(RuntimeOp::Start, "container"))?;
        c.running = true;
        self.record(&mut st, RuntimeOp::Start, container);
        self.persist(&st, RuntimeOp::Start)?;
        Ok(())
    }

    fn stop(&self, container: &str) -> Result<(), RuntimeError> {
        let mut st = self.state.lock();
        Self::check_fault(&mut st, RuntimeOp::Stop)?;
        let c = st
            .containers
            .get_mut(container)
            .ok_or_else(|| Self::missing(RuntimeOp::Stop, "container"))?;
        c.running = false;
        self.record(&mut st, RuntimeOp::Stop, container);
        self.persist(&st, RuntimeOp::Stop)?;
        Ok(())
    }

    fn destroy_container(&self, container: &str) -> Result<(), RuntimeError> {
        let mut st = self.state.lock();
        Self::check_fault(&mut st, RuntimeOp::DestroyContainer)?;
        let c = st
            .containers
            .remove(container)
            .ok_or_else(|| Self::missing(RuntimeOp::DestroyContainer, "container"))?;
        st.ports.remove(&c.info.internal_port);
        self.record(&mut st, RuntimeOp::DestroyContainer, container);
        self.persist(&st, RuntimeOp::DestroyContainer)?;
        Ok(())
    }

    fn destroy_volume(&self, volume: &str) -> Result<(), RuntimeError> {
        let mut st = self.state.lock();
        Self::check_fault(&mut st, RuntimeOp::DestroyVolume)?;
        if !st.volumes.remove(volume) {
            return Err(Self::missing(RuntimeOp::DestroyVolume, "volume"));
        }
        self.record(&mut st, RuntimeOp::DestroyVolume, volume);
        self.persist(&st, RuntimeOp::DestroyVolume)?;
        Ok(())
    }

    fn has_container(&self, container: &str) -> bool {
        self.state.lock().containers.contains_key(container)
    }
}
