// SPDX-License-Identifier: Apache-2.0

//! All subsystems wired together behind one authorization-checked facade.
//! This is what the REST service calls.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::auth::{
    Acl, Action, AuthError, AuthService, Credentials, Decision, DenyReason, IdentitySet, LocalIdentityProvider,
    Principal, Scope, Token,
};
use crate::catalog::{Catalog, CatalogError, FileRef, Node, NodeId, NodeKind};
use crate::clock::SharedClock;
use crate::dms::{CacheStats, DirBlobStore, Dms, DmsError, FileKind, GcTask, MemBlobStore, SessionId, StorageConfig};
use crate::error::ErrorCode;
use crate::jobs::{JobError, JobEvent, JobKind, JobRecord, JobRegistry, JobStatus};
use crate::orchestrator::{
    tale_resource, Endpoint, Instance, Orchestrator, OrchestratorError, SimulatedRuntime, SingleHostScheduler,
};
use crate::registration::{register_dataset, RegistrationError};
use crate::repository::{HttpProvider, LocalProvider, MockProvider, ProviderError, ProviderRegistry, RetryPolicy};
use crate::store::{Store, StoreError};
use crate::tale::{
    config_from_json, Image, Manifest, PublicationStatus, Recipe, SimulatedBuilder, Tale, TaleConfig, TaleError,
    TaleMetadata, TaleService,
};

const HOMES: &str = "engine.homes";
pub const JOURNAL_FILE: &str = "journal.wtc";
pub const CACHE_DIR: &str = "cache";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserFixture {
    pub issuer: String,
    pub subject: String,
    pub secret: String,
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    /// Journal and cache live here; `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub storage: StorageConfig,
    pub build_workers: usize,
    pub build_delay: Duration,
    pub runtime_seed: u64,
    pub host: String,
    pub mock_fixture: Option<PathBuf>,
    pub local_provider: bool,
    pub http_provider: bool,
    pub retry: RetryPolicy,
    pub users: Vec<UserFixture>,
    pub background_gc: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            storage: StorageConfig::default(),
            build_workers: 2,
            build_delay: Duration::from_millis(200),
            runtime_seed: 0,
            host: "localhost".into(),
            mock_fixture: None,
            local_provider: true,
            http_provider: true,
            retry: RetryPolicy::default(),
            users: Vec::new(),
            background_gc: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    BadRequest,
    Unauthenticated,
    Forbidden,
    NotFound,
    Conflict,
    Unavailable,
    Internal,
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("not authenticated: {0}")]
    Unauthenticated(DenyReason),
    #[error("forbidden: {0}")]
    Forbidden(DenyReason),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Dms(#[from] DmsError),
    #[error(transparent)]
    Tale(#[from] TaleError),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Orchestrator(OrchestratorError),
    #[error(transparent)]
    Job(#[from] JobError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<OrchestratorError> for EngineError {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Unauthorized(r) if r.is_authentication() => EngineError::Unauthenticated(r),
            OrchestratorError::Unauthorized(r) => EngineError::Forbidden(r),
            other => EngineError::Orchestrator(other),
        }
    }
}

impl ErrorCode for EngineError {
    fn code(&self) -> &'static str {
        match self {
            EngineError::Unauthenticated(r) | EngineError::Forbidden(r) => r.as_str(),
            EngineError::BadRequest(_) => "BadRequest",
            EngineError::Catalog(e) => e.code(),
            EngineError::Provider(e) => e.code(),
            EngineError::Registration(e) => e.code(),
            EngineError::Dms(e) => e.code(),
            EngineError::Tale(e) => e.code(),
            EngineError::Auth(e) => e.code(),
            EngineError::Orchestrator(e) => e.code(),
            EngineError::Job(e) => e.code(),
            EngineError::Store(_) => "StorageError",
        }
    }
}

impl EngineError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            EngineError::Unauthenticated(_) => ErrorKind::Unauthenticated,
            EngineError::Forbidden(_) => ErrorKind::Forbidden,
            _ => kind_of(self.code()),
        }
    }
}

/// HTTP-level class of a stable error code.
pub fn kind_of(code: &str) -> ErrorKind {
    match code {
        "UnknownNode" | "UnknownParent" | "NoSuchPath" | "UnknownSession" | "UnknownRecipe" | "UnknownImage"
        | "UnknownFolder" | "UnknownTale" | "UnknownInstance" | "UnknownJob" | "NoRoute" | "UnknownIdentifier"
        | "UnknownToken" | "UnknownIdentity" | "StaleHandle" => ErrorKind::NotFound,
        "InvalidName"
        | "InvalidUrl"
        | "EmptyCommit"
        | "InvalidConfig"
        | "ValidationFailed"
        | "SchemaInvalid"
        | "KindMismatch"
        | "NotAContainer"
        | "UnknownScope"
        | "UnsupportedProtocol"
        | "InvalidRange"
        | "IsADirectory"
        | "NotADirectory"
        | "ConfigInvalid"
        | "BadRequest" => ErrorKind::BadRequest,
        "DuplicateName" | "CycleDetected" | "InvalidState" | "ImageNotReady" | "JobTerminal" | "ProgressRegression"
        | "Referenced" | "DuplicateIssuer" | "DuplicateProvider" | "CyclicDataset" | "SessionSuspended" => {
            ErrorKind::Conflict
        }
        "BadCredentials" | "UnknownIssuer" | "Expired" | "Revoked" | "WrongAudience" => ErrorKind::Unauthenticated,
        "InsufficientScope" | "Forbidden" | "NoAcl" | "ScopeEscalation" | "InvalidToken" => ErrorKind::Forbidden,
        "ProviderUnavailable"
        | "TransferFailed"
        | "SourceNotFound"
        | "ChecksumMismatch"
        | "EvictionImpossible"
        | "StepFailed" => ErrorKind::Unavailable,
        _ => ErrorKind::Internal,
    }
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

/// A catalog node with its location and immediate contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeView {
    pub node: Node,
    pub path: String,
    pub children: Vec<Node>,
    pub files: Vec<FileRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeEntry {
    pub path: String,
    pub kind: FileKind,
    pub size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionTree {
    pub id: SessionId,
    pub roots: Vec<NodeId>,
    pub suspended: bool,
    pub entries: Vec<TreeEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheReport {
    #[serde(flatten)]
    pub stats: CacheStats,
    pub transferred: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
}

/// Partial update of a node.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodePatch {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub parent: Option<NodeId>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

pub struct Engine {
    catalog: Arc<Catalog>,
    providers: Arc<ProviderRegistry>,
    mock: Arc<MockProvider>,
    dms: Arc<Dms>,
    jobs: Arc<JobRegistry>,
    tales: Arc<TaleService>,
    auth: Arc<AuthService>,
    orchestrator: Arc<Orchestrator>,
    runtime: Arc<SimulatedRuntime>,
    store: Arc<Store>,
    homes: Mutex<()>,
    workers: Mutex<Vec<std::thread::JoinHandle<()>>>,
    _gc: Option<GcTask>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("store", &self.store.path()).finish()
    }
}

fn node_resource(id: &NodeId) -> String {
    format!("node:{id}")
}

fn resource(kind: &str, id: &str) -> String {
    format!("{kind}:{id}")
}

impl Engine {
    pub fn open(config: EngineConfig, clock: SharedClock) -> Result<Self> {
        config
            .storage
            .validate()
            .map_err(|e| EngineError::Dms(DmsError::ConfigInvalid(e)))?;
        let (store, blobs): (Arc<Store>, Arc<dyn crate::dms::BlobStore>) = match &config.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| EngineError::Dms(DmsError::Io(e.to_string())))?;
                let blobs = DirBlobStore::new(dir.join(CACHE_DIR)).map_err(|e| DmsError::Io(e.to_string()))?;
                (Arc::new(Store::open(dir.join(JOURNAL_FILE))?), Arc::new(blobs))
            }
            None => (Arc::new(Store::in_memory()), Arc::new(MemBlobStore::new())),
        };

        let providers = Arc::new(ProviderRegistry::with_retry(config.retry));
        let mock = Arc::new(match &config.mock_fixture {
            Some(p) => MockProvider::from_path("mock", p)?,
            None => MockProvider::new("mock"),
        });
        providers.register_provider(mock.clone())?;
        if config.local_provider {
            providers.register_provider(Arc::new(LocalProvider::new()))?;
        }
        if config.http_provider {
            providers.register_provider(Arc::new(HttpProvider::new()))?;
        }

        let catalog = Arc::new(Catalog::open(store.clone(), clock.clone())?);
        let dms = Arc::new(Dms::with_store(
            catalog.clone(),
            providers.clone(),
            blobs,
            config.storage,
            store.clone(),
            clock.clone(),
        )?);
        let jobs = Arc::new(JobRegistry::open(store.clone(), clock.clone())?);
        let tales = Arc::new(TaleService::open(
            catalog.clone(),
            providers.clone(),
            jobs.clone(),
            Arc::new(SimulatedBuilder::new(config.build_delay)),
            TaleConfig {
                build_workers: config.build_workers,
            },
            store.clone(),
            clock.clone(),
        )?);
        let auth = Arc::new(AuthService::open(store.clone(), clock.clone())?);
        let mut issuers: BTreeMap<String, LocalIdentityProvider> = BTreeMap::new();
        for u in &config.users {
            issuers
                .entry(u.issuer.clone())
                .or_insert_with(|| LocalIdentityProvider::new(&u.issuer))
                .add_user(&u.subject, &u.secret);
        }
        for (_, p) in issuers {
            auth.register_provider(Arc::new(p))?;
        }
        let runtime = Arc::new(match &config.data_dir {
            Some(_) => SimulatedRuntime::persistent(config.runtime_seed, clock.clone(), store.clone())?,
            None => SimulatedRuntime::new(config.runtime_seed, clock.clone()),
        });
        let orchestrator = Arc::new(Orchestrator::open(
            dms.clone(),
            tales.clone(),
            auth.clone(),
            runtime.clone(),
            Arc::new(SingleHostScheduler {
                host: config.host.clone(),
            }),
            store.clone(),
            clock,
        )?);
        let gc = config.background_gc.then(|| dms.spawn_gc(config.storage.gc_period));
        Ok(Self {
            catalog,
            providers,
            mock,
            dms,
            jobs,
            tales,
            auth,
            orchestrator,
            runtime,
            store,
            homes: Mutex::new(()),
            workers: Mutex::new(Vec::new()),
            _gc: gc,
        })
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }
    pub fn providers(&self) -> &Arc<ProviderRegistry> {
        &self.providers
    }
    pub fn mock(&self) -> &Arc<MockProvider> {
        &self.mock
    }
    pub fn dms(&self) -> &Arc<Dms> {
        &self.dms
    }
    pub fn jobs(&self) -> &Arc<JobRegistry> {
        &self.jobs
    }
    pub fn tales(&self) -> &Arc<TaleService> {
        &self.tales
    }
    pub fn auth(&self) -> &Arc<AuthService> {
        &self.auth
    }
    pub fn orchestrator(&self) -> &Arc<Orchestrator> {
        &self.orchestrator
    }
    pub fn runtime(&self) -> &Arc<SimulatedRuntime> {
        &self.runtime
    }

    // --- authentication ---------------------------------------------------

    pub fn authenticate(&self, creds: &Credentials, scopes: Option<Vec<String>>) -> Result<Token> {
        let scopes = scopes
            .map(|v| v.iter().map(|s| s.parse::<Scope>()).collect::<Result<BTreeSet<_>, _>>())
            .transpose()?;
        let token = self.auth.authenticate(creds, scopes)?;
        self.ensure_home(&token.subject)?;
        Ok(token)
    }

    pub fn link_identities(&self, a: &Credentials, b: &Credentials) -> Result<IdentitySet> {
        let set = self.auth.link_identities(a, b)?;
        for id in &set.members {
            self.ensure_home(id)?;
        }
        Ok(set)
    }

    pub fn principal(&self, token: &str) -> Result<Principal> {
        self.auth.validate(token, None).map_err(EngineError::Unauthenticated)
    }

    fn require(&self, p: &Principal, scope: Scope) -> Result<()> {
        if p.has_scope(scope) {
            Ok(())
        } else {
            Err(EngineError::Forbidden(DenyReason::InsufficientScope))
        }
    }

    fn check(&self, p: &Principal, chain: &[String], action: Action) -> Result<()> {
        let refs: Vec<&str> = chain.iter().map(String::as_str).collect();
        match self.auth.authorize_principal(p, &refs, action) {
            Decision::Allow => Ok(()),
            Decision::Deny(r) => Err(EngineError::Forbidden(r)),
        }
    }

    fn node_chain(&self, id: &NodeId) -> Result<Vec<String>> {
        let mut out = Vec::new();
        let mut cur = Some(id.clone());
        while let Some(c) = cur {
            let node = self.catalog.get(&c)?;
            out.push(node_resource(&node.id));
            cur = node.parent;
        }
        Ok(out)
    }

    fn check_node(&self, p: &Principal, id: &NodeId, action: Action) -> Result<Node> {
        let node = self.catalog.get(id)?;
        if node.deleted {
            return Err(CatalogError::UnknownNode(id.clone()).into());
        }
        self.check(p, &self.node_chain(id)?, action)?;
        Ok(node)
    }

    fn ensure_home(&self, identity: &str) -> Result<Node> {
        let _g = self.homes.lock();
        if let Some(id) = self.store.get::<NodeId>(HOMES, identity)? {
            if let Ok(n) = self.catalog.get(&id) {
                return Ok(n);
            }
        }
        let who = self.auth.identity(identity)?;
        let node = self.catalog.create_unique(None, NodeKind::Collection, &who.subject)?;
        self.auth.set_acl(&node_resource(&node.id), Acl::owned_by(identity))?;
        self.store.put(HOMES, identity, &node.id)?;
        Ok(node)
    }

    pub fn home(&self, p: &Principal) -> Result<Node> {
        self.require(p, Scope::DataRead)?;
        self.ensure_home(&p.identity)
    }

    // --- catalog ----------------------------------------------------------

    pub fn collections(&self, p: &Principal) -> Result<Vec<Node>> {
        self.require(p, Scope::DataRead)?;
        Ok(self
            .catalog
            .collections()
            .into_iter()
            .filter(|c| self.check(p, &[node_resource(&c.id)], Action::ReadData).is_ok())
            .collect())
    }

    fn view(&self, node: Node) -> Result<NodeView> {
        let children = if node.kind.is_container() {
            self.catalog.list_children(&node.id)?
        } else {
            Vec::new()
        };
        let files = if node.kind == NodeKind::Item {
            self.catalog.files(&node.id)?
        } else {
            Vec::new()
        };
        Ok(NodeView {
            path: self.catalog.path_of(&node.id)?,
            node,
            children,
            files,
        })
    }

    pub fn node(&self, p: &Principal, id: &NodeId) -> Result<NodeView> {
        self.require(p, Scope::DataRead)?;
        let node = self.check_node(p, id, Action::ReadData)?;
        self.view(node)
    }

    pub fn node_by_path(&self, p: &Principal, path: &str) -> Result<NodeView> {
        self.require(p, Scope::DataRead)?;
        let node = self.catalog.resolve_path(path)?;
        let node = self.check_node(p, &node.id, Action::ReadData)?;
        self.view(node)
    }

    /// A Collection when `parent` is `None`, otherwise a Folder under it.
    pub fn create_folder(&self, p: &Principal, parent: Option<&NodeId>, name: &str) -> Result<Node> {
        self.require(p, Scope::DataWrite)?;
        match parent {
            Some(parent) => {
                self.check_node(p, parent, Action::WriteData).map_err(|e| match e {
                    EngineError::Catalog(CatalogError::UnknownNode(id)) => CatalogError::UnknownParent(id).into(),
                    other => other,
                })?;
                Ok(self.catalog.create_folder(parent, name)?)
            }
            None => {
                let node = self.catalog.create_collection(name)?;
                self.auth
                    .set_acl(&node_resource(&node.id), Acl::owned_by(&p.identity))?;
                Ok(node)
            }
        }
    }

    pub fn update_node(&self, p: &Principal, id: &NodeId, patch: &NodePatch) -> Result<Node> {
        self.require(p, Scope::DataWrite)?;
        let mut node = self.check_node(p, id, Action::WriteData)?;
        if let Some(parent) = &patch.parent {
            self.check_node(p, parent, Action::WriteData)?;
            node = self.catalog.move_node(id, parent)?;
        }
        if let Some(name) = &patch.name {
            node = self.catalog.rename_node(id, name)?;
        }
        for (k, v) in &patch.metadata {
            node = self.catalog.annotate(id, k, v)?;
        }
        Ok(node)
    }

    /// Starts a background registration job under `parent` (default: the
    /// caller's home collection).
    pub fn register(&self, p: &Principal, identifier: &str, parent: Option<&NodeId>) -> Result<JobRecord> {
        self.require(p, Scope::DataWrite)?;
        let parent = match parent {
            Some(id) => self.check_node(p, id, Action::WriteData)?.id,
            None => self.ensure_home(&p.identity)?.id,
        };
        let job = self.jobs.create(JobKind::Register, Some(p.identity.clone()))?;
        let (catalog, providers, jobs) = (self.catalog.clone(), self.providers.clone(), self.jobs.clone());
        let (id, identifier) = (job.id.clone(), identifier.to_string());
        let handle = std::thread::Builder::new()
            .name("register".into())
            .spawn(move || {
                let _ = jobs.start(&id, &format!("registering {identifier}"));
                let mut progress = |pct: u8, msg: &str| {
                    let _ = jobs.notify(&id, msg, Some(pct.min(99)));
                };
                match register_dataset(&catalog, &providers, &identifier, &parent, &mut progress) {
                    Ok(report) => {
                        let _ = jobs.complete(&id, serde_json::to_value(&report).expect("report serializes"));
                    }
                    Err(e) => {
                        let _ = jobs.fail(&id, e.code(), &e.to_string());
                    }
                }
            })
            .expect("spawn registration");
        let mut workers = self.workers.lock();
        workers.retain(|h| !h.is_finished());
        workers.push(handle);
        Ok(job)
    }

    // --- jobs -------------------------------------------------------------

    fn check_job(&self, p: &Principal, id: &str) -> Result<JobRecord> {
        self.require(p, Scope::DataRead)?;
        let job = self.jobs.get(id)?;
        match &job.owner {
            Some(o) if p.identities.contains(o) => Ok(job),
            _ => Err(EngineError::Forbidden(DenyReason::Forbidden)),
        }
    }

    pub fn job(&self, p: &Principal, id: &str) -> Result<JobRecord> {
        self.check_job(p, id)
    }

    pub fn job_events(
        &self,
        p: &Principal,
        id: &str,
        after: u64,
        wait: Duration,
    ) -> Result<(Vec<JobEvent>, JobStatus)> {
        self.check_job(p, id)?;
        Ok(self.jobs.wait_events(id, after, wait)?)
    }

    pub fn jobs_for(&self, p: &Principal) -> Result<Vec<JobRecord>> {
        self.require(p, Scope::DataRead)?;
        Ok(self
            .jobs
            .list()
            .into_iter()
            .filter(|j| j.owner.as_ref().is_some_and(|o| p.identities.contains(o)))
            .collect())
    }

    /// Blocks until no registration thread is running.
    pub fn drain(&self) {
        let handles: Vec<_> = self.workers.lock().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }

    // --- sessions ---------------------------------------------------------

    pub fn create_session(&self, p: &Principal, roots: &[NodeId]) -> Result<SessionTree> {
        self.require(p, Scope::DataRead)?;
        if roots.is_empty() {
            return Err(EngineError::BadRequest("a session needs at least one root".into()));
        }
        for r in roots {
            self.check_node(p, r, Action::ReadData)?;
        }
        let s = self.dms.create_session(roots, Some(p.identity.clone()))?;
        self.auth
            .set_acl(&resource("session", s.id.as_str()), Acl::owned_by(&p.identity))?;
        self.session_tree(p, &s.id)
    }

    pub fn session_tree(&self, p: &Principal, id: &SessionId) -> Result<SessionTree> {
        self.require(p, Scope::DataRead)?;
        let s = self.dms.session(id)?;
        self.check(p, &[resource("session", id.as_str())], Action::ReadData)?;
        let mut entries: Vec<TreeEntry> = s
            .directories
            .iter()
            .filter(|d| d.as_str() != "/")
            .map(|d| TreeEntry {
                path: d.clone(),
                kind: FileKind::Directory,
                size: s.stat(d).map(|a| a.size).unwrap_or(0),
                checksum: None,
            })
            .chain(s.mount_table.iter().map(|(path, f)| TreeEntry {
                path: path.clone(),
                kind: FileKind::File,
                size: f.size,
                checksum: f.provenance.checksum.clone(),
            }))
            .collect();
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(SessionTree {
            id: s.id,
            roots: s.roots,
            suspended: s.suspended,
            entries,
        })
    }

    pub fn delete_session(&self, p: &Principal, id: &SessionId) -> Result<()> {
        self.require(p, Scope::DataRead)?;
        self.dms.session(id)?;
        self.check(p, &[resource("session", id.as_str())], Action::ReadData)?;
        if self.orchestrator.sessions_in_use().contains(id) {
            return Err(EngineError::Dms(DmsError::SessionSuspended(id.clone())));
        }
        self.dms.delete_session(id)?;
        self.auth.remove_acl(&resource("session", id.as_str()))?;
        Ok(())
    }

    pub fn cache_report(&self, p: &Principal) -> Result<CacheReport> {
        self.require(p, Scope::DataRead)?;
        Ok(CacheReport {
            stats: self.dms.cache().stats(),
            transferred: self
                .providers
                .bindings()
                .iter()
                .map(|b| (b.name().to_string(), b.transfer_counter()))
                .collect(),
            warnings: self.dms.cache().warnings(),
        })
    }

    // --- recipes, images, tales -------------------------------------------

    pub fn create_recipe(
        &self,
        p: &Principal,
        name: &str,
        repo_url: &str,
        commit_id: &str,
        config: &serde_json::Value,
    ) -> Result<Recipe> {
        self.require(p, Scope::TaleWrite)?;
        let config = config_from_json(config)?;
        let r = self
            .tales
            .create_recipe(name, repo_url, commit_id, config, Some(p.identity.clone()))?;
        let res = resource("recipe", &r.id);
        if self.auth.acl(&res).is_none() {
            let mut acl = Acl::owned_by(&p.identity);
            acl.public_read = true;
            self.auth.set_acl(&res, acl)?;
        }
        Ok(r)
    }

    pub fn recipe(&self, p: &Principal, id: &str) -> Result<Recipe> {
        self.require(p, Scope::DataRead)?;
        let r = self.tales.recipe(id)?;
        self.check(p, &[resource("recipe", id)], Action::ReadData)?;
        Ok(r)
    }

    pub fn recipes(&self, p: &Principal) -> Result<Vec<Recipe>> {
        self.require(p, Scope::DataRead)?;
        Ok(self
            .tales
            .recipes()
            .into_iter()
            .filter(|r| self.check(p, &[resource("recipe", &r.id)], Action::ReadData).is_ok())
            .collect())
    }

    pub fn build_image(&self, p: &Principal, recipe_id: &str) -> Result<(Image, JobRecord)> {
        self.require(p, Scope::TaleWrite)?;
        self.tales.recipe(recipe_id)?;
        self.check(p, &[resource("recipe", recipe_id)], Action::ReadData)?;
        let img = self.tales.build_image(recipe_id, Some(p.identity.clone()))?;
        self.share_image(p, &img.id)?;
        let job = self.jobs.get(img.job.as_deref().expect("builds carry a job"))?;
        Ok((img, job))
    }

    fn share_image(&self, p: &Principal, id: &str) -> Result<()> {
        let mut acl = Acl::owned_by(&p.identity);
        acl.public_read = true;
        self.auth.set_acl(&resource("image", id), acl)?;
        Ok(())
    }

    pub fn image(&self, p: &Principal, id: &str) -> Result<Image> {
        self.require(p, Scope::DataRead)?;
        let img = self.tales.image(id)?;
        self.check(p, &[resource("image", id)], Action::ReadData)?;
        Ok(img)
    }

    pub fn images(&self, p: &Principal) -> Result<Vec<Image>> {
        self.require(p, Scope::DataRead)?;
        Ok(self
            .tales
            .images()
            .into_iter()
            .filter(|i| self.check(p, &[resource("image", &i.id)], Action::ReadData).is_ok())
            .collect())
    }

    pub fn create_tale(&self, p: &Principal, image_id: &str, folder: &NodeId, metadata: TaleMetadata) -> Result<Tale> {
        self.require(p, Scope::TaleWrite)?;
        if metadata.publication_status == PublicationStatus::Published {
            self.require(p, Scope::Publish)?;
        }
        self.tales.image(image_id)?;
        self.check(p, &[resource("image", image_id)], Action::ReadData)?;
        match self.catalog.get(folder) {
            Ok(n) if !n.deleted && n.kind.is_container() => {}
            _ => return Err(TaleError::UnknownFolder(folder.to_string()).into()),
        }
        self.check(p, &self.node_chain(folder)?, Action::ReadData)?;
        let tale = self
            .tales
            .create_tale(image_id, folder, metadata, Some(p.identity.clone()))?;
        self.set_tale_acl(p, &tale)?;
        Ok(tale)
    }

    fn set_tale_acl(&self, p: &Principal, tale: &Tale) -> Result<()> {
        let mut acl = Acl::owned_by(&p.identity);
        acl.public_read = tale.metadata.publication_status == PublicationStatus::Published;
        self.auth.set_acl(&tale_resource(&tale.id), acl)?;
        Ok(())
    }

    pub fn tale(&self, p: &Principal, id: &str) -> Result<Tale> {
        self.require(p, Scope::DataRead)?;
        let t = self.tales.tale(id)?;
        self.check(p, &[tale_resource(id)], Action::ReadData)?;
        Ok(t)
    }

    pub fn tales_for(&self, p: &Principal) -> Result<Vec<Tale>> {
        self.require(p, Scope::DataRead)?;
        Ok(self
            .tales
            .tales()
            .into_iter()
            .filter(|t| self.check(p, &[tale_resource(&t.id)], Action::ReadData).is_ok())
            .collect())
    }

    pub fn update_tale(&self, p: &Principal, id: &str, metadata: TaleMetadata) -> Result<Tale> {
        self.require(p, Scope::TaleWrite)?;
        if metadata.publication_status == PublicationStatus::Published {
            self.require(p, Scope::Publish)?;
        }
        self.tales.tale(id)?;
        self.check(p, &[tale_resource(id)], Action::WriteTale)?;
        let t = self.tales.update_metadata(id, metadata)?;
        self.set_tale_acl(p, &t)?;
        Ok(t)
    }

    pub fn publish_tale(&self, p: &Principal, id: &str, identifier: Option<String>) -> Result<Tale> {
        self.require(p, Scope::Publish)?;
        self.tales.tale(id)?;
        self.check(p, &[tale_resource(id)], Action::Publish)?;
        let t = self.tales.publish(id, identifier)?;
        let mut acl = self
            .auth
            .acl(&tale_resource(id))
            .unwrap_or_else(|| Acl::owned_by(&p.identity));
        acl.public_read = true;
        self.auth.set_acl(&tale_resource(id), acl)?;
        Ok(t)
    }

    pub fn export_tale(&self, p: &Principal, id: &str) -> Result<Manifest> {
        self.tale(p, id)?;
        Ok(self.tales.export_tale(id)?)
    }

    pub fn import_tale(&self, p: &Principal, manifest: serde_json::Value) -> Result<Tale> {
        self.require(p, Scope::TaleWrite)?;
        self.require(p, Scope::DataWrite)?;
        let manifest = Manifest::from_value(manifest)?;
        if manifest.metadata.publication_status == PublicationStatus::Published {
            self.require(p, Scope::Publish)?;
        }
        let tale = self
            .tales
            .import_tale(&manifest, "imported", Some(p.identity.clone()))?;
        let folder = self.catalog.get(&tale.folder_id)?;
        if let Some(collection) = folder.parent {
            self.auth
                .set_acl(&node_resource(&collection), Acl::owned_by(&p.identity))?;
        }
        let image = self.tales.image(&tale.image_id)?;
        let recipe_res = resource("recipe", &image.recipe_id);
        if self.auth.acl(&recipe_res).is_none() {
            let mut acl = Acl::owned_by(&p.identity);
            acl.public_read = true;
            self.auth.set_acl(&recipe_res, acl)?;
        }
        self.share_image(p, &image.id)?;
        self.set_tale_acl(p, &tale)?;
        Ok(tale)
    }

    // --- instances --------------------------------------------------------

    pub fn launch(&self, p: &Principal, tale_id: &str) -> Result<Instance> {
        self.require(p, Scope::InstanceLaunch)?;
        let inst = match self.orchestrator.launch_instance(tale_id, &p.token) {
            Ok(i) => i,
            Err(OrchestratorError::StepFailed {
                step,
                name,
                detail,
                instance,
            }) => {
                self.auth
                    .set_acl(&resource("instance", &instance), Acl::owned_by(&p.identity))?;
                return Err(OrchestratorError::StepFailed {
                    step,
                    name,
                    detail,
                    instance,
                }
                .into());
            }
            Err(e) => return Err(e.into()),
        };
        self.auth
            .set_acl(&resource("instance", &inst.id), Acl::owned_by(&p.identity))?;
        Ok(inst)
    }

    fn check_instance(&self, p: &Principal, id: &str, scope: Scope, action: Action) -> Result<()> {
        self.require(p, scope)?;
        self.orchestrator.instance(id)?;
        self.check(p, &[resource("instance", id)], action)
    }

    pub fn instance(&self, p: &Principal, id: &str) -> Result<Instance> {
        self.check_instance(p, id, Scope::DataRead, Action::ReadData)?;
        Ok(self.orchestrator.instance(id)?)
    }

    pub fn instances(&self, p: &Principal) -> Result<Vec<Instance>> {
        self.require(p, Scope::DataRead)?;
        Ok(self
            .orchestrator
            .instances()
            .into_iter()
            .filter(|i| self.check(p, &[resource("instance", &i.id)], Action::ReadData).is_ok())
            .collect())
    }

    pub fn suspend(&self, p: &Principal, id: &str) -> Result<Instance> {
        self.check_instance(p, id, Scope::InstanceLaunch, Action::Launch)?;
        Ok(self.orchestrator.suspend_instance(id)?)
    }

    pub fn resume(&self, p: &Principal, id: &str) -> Result<Instance> {
        self.check_instance(p, id, Scope::InstanceLaunch, Action::Launch)?;
        Ok(self.orchestrator.resume_instance(id)?)
    }

    pub fn delete_instance(&self, p: &Principal, id: &str) -> Result<()> {
        self.check_instance(p, id, Scope::InstanceLaunch, Action::Launch)?;
        self.orchestrator.delete_instance(id)?;
        self.auth.remove_acl(&resource("instance", id))?;
        Ok(())
    }

    pub fn route(&self, p: &Principal, route_path: &str) -> Result<Endpoint> {
        self.require(p, Scope::DataRead)?;
        Ok(self.orchestrator.route_lookup(route_path)?)
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.drain();
    }
}
