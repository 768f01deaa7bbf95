// SPDX-License-Identifier: Apache-2.0

//! Recipes, asynchronously built images, tales and their manifests.

mod build;
mod manifest;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use crossbeam_channel::{Receiver, Sender};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, CatalogError, NodeId, NodeKind};
use crate::clock::SharedClock;
use crate::dms::Session;
use crate::error::ErrorCode;
use crate::jobs::{JobError, JobKind, JobRegistry};
use crate::repository::{DatasetDescriptor, ProviderError, ProviderRegistry};
use crate::store::{Store, StoreError};

pub use build::{simulated_digest, Builder, SimulatedBuilder};
pub use manifest::{DataEntry, Environment, Manifest, MANIFEST_EXTENSION, MANIFEST_VERSION};

const RECIPES: &str = "tale.recipes";
const IMAGES: &str = "tale.images";
const TALES: &str = "tale.tales";

#[derive(Debug, thiserror::Error)]
pub enum TaleError {
    #[error("unknown recipe {0}")]
    UnknownRecipe(String),
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("unknown folder {0}")]
    UnknownFolder(String),
    #[error("unknown tale {0}")]
    UnknownTale(String),
    #[error("invalid repository url {0:?}")]
    InvalidUrl(String),
    #[error("commit id must not be empty")]
    EmptyCommit,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("validation failed: {0}")]
    ValidationFailed(String),
    #[error("manifest rejected: {0}")]
    SchemaInvalid(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Job(#[from] JobError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ErrorCode for TaleError {
    fn code(&self) -> &'static str {
        match self {
            TaleError::UnknownRecipe(_) => "UnknownRecipe",
            TaleError::UnknownImage(_) => "UnknownImage",
            TaleError::UnknownFolder(_) => "UnknownFolder",
            TaleError::UnknownTale(_) => "UnknownTale",
            TaleError::InvalidUrl(_) => "InvalidUrl",
            TaleError::EmptyCommit => "EmptyCommit",
            TaleError::InvalidConfig(_) => "InvalidConfig",
            TaleError::ValidationFailed(_) => "ValidationFailed",
            TaleError::SchemaInvalid(_) => "SchemaInvalid",
            TaleError::Catalog(e) => e.code(),
            TaleError::Job(e) => e.code(),
            TaleError::Store(_) => "StorageError",
        }
    }
}

pub type Result<T, E = TaleError> = std::result::Result<T, E>;

fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipe {
    pub id: String,
    pub name: String,
    pub repo_url: String,
    pub commit_id: String,
    pub config: BTreeMap<String, String>,
    pub created: DateTime<Utc>,
    #[serde(default)]
    pub owner: Option<String>,
}

/// Accepts only a flat JSON object of strings.
pub fn config_from_json(value: &serde_json::Value) -> Result<BTreeMap<String, String>> {
    match value {
        serde_json::Value::Null => Ok(BTreeMap::new()),
        serde_json::Value::Object(map) => map
            .iter()
            .map(|(k, v)| match v {
                serde_json::Value::String(s) => Ok((k.clone(), s.clone())),
                other => Err(TaleError::InvalidConfig(format!("{k}: expected a string, got {other}"))),
            })
            .collect(),
        other => Err(TaleError::InvalidConfig(format!("expected an object, got {other}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageStatus {
    Queued,
    Building,
    Ready,
    Failed,
}

impl ImageStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, ImageStatus::Ready | ImageStatus::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub id: String,
    pub recipe_id: String,
    pub status: ImageStatus,
    pub digest: Option<String>,
    pub build_log: String,
    pub job: Option<String>,
    pub created: DateTime<Utc>,
    pub updated: DateTime<Utc>,
    #[serde(default)]
    pub owner: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PublicationStatus {
    #[default]
    Private,
    Shared,
    Published,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Licenses {
    #[serde(default)]
    pub environment: Option<String>,
    #[serde(default)]
    pub data: Option<String>,
    #[serde(default)]
    pub scripts: Option<String>,
}

impl Licenses {
    fn missing(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for (name, v) in [
            ("environment", &self.environment),
            ("data", &self.data),
            ("scripts", &self.scripts),
        ] {
            if v.as_deref().is_none_or(|s| s.trim().is_empty()) {
                out.push(name);
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaleMetadata {
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub authors: Vec<String>,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub icon: Option<String>,
    #[serde(default)]
    pub illustration: Option<String>,
    #[serde(default)]
    pub category: Vec<String>,
    #[serde(default)]
    pub publication_status: PublicationStatus,
    #[serde(default)]
    pub licenses: Licenses,
    /// Persistent identifier assigned on publication, stored opaquely.
    #[serde(default)]
    pub identifier: Option<String>,
}

impl TaleMetadata {
    pub fn validate(&self) -> Result<()> {
        for (field, uri) in [("icon", &self.icon), ("illustration", &self.illustration)] {
            if let Some(u) = uri {
                if url::Url::parse(u).is_err() {
                    return Err(TaleError::ValidationFailed(format!("{field} is not a URI: {u:?}")));
                }
            }
        }
        if self.publication_status == PublicationStatus::Published {
            if self.title.trim().is_empty() {
                return Err(TaleError::ValidationFailed("published tales need a title".into()));
            }
            if self.authors.iter().all(|a| a.trim().is_empty()) {
                return Err(TaleError::ValidationFailed(
                    "published tales need at least one author".into(),
                ));
            }
            let missing = self.licenses.missing();
            if !missing.is_empty() {
                return Err(TaleError::ValidationFailed(format!(
                    "published tales need a license for: {}",
                    missing.join(", ")
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaleState {
    #[default]
    Ok,
    Degraded,
}

/// A data entry that could not be re-resolved on import.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedEntry {
    pub posix_path: String,
    pub identifier: String,
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tale {
    pub id: String,
    pub image_id: String,
    pub folder_id: NodeId,
    pub metadata: TaleMetadata,
    #[serde(default)]
    pub state: TaleState,
    #[serde(default)]
    pub flagged: Vec<FlaggedEntry>,
    pub created: DateTime<Utc>,
    pub modified: DateTime<Utc>,
    #[serde(default)]
    pub owner: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TaleConfig {
    pub build_workers: usize,
}

impl Default for TaleConfig {
    fn default() -> Self {
        Self { build_workers: 2 }
    }
}

#[derive(Default)]
struct State {
    recipes: HashMap<String, Recipe>,
    images: HashMap<String, Image>,
    tales: HashMap<String, Tale>,
}

struct Shared {
    state: Mutex<State>,
    image_changed: Condvar,
    store: Arc<Store>,
    catalog: Arc<Catalog>,
    providers: Arc<ProviderRegistry>,
    jobs: Arc<JobRegistry>,
    builder: Arc<dyn Builder>,
    clock: SharedClock,
}

pub struct TaleService {
    shared: Arc<Shared>,
    queue: Mutex<Option<Sender<String>>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl std::fmt::Debug for TaleService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = self.shared.state.lock();
        f.debug_struct("TaleService")
            .field("recipes", &s.recipes.len())
            .field("images", &s.images.len())
            .field("tales", &s.tales.len())
            .finish()
    }
}

impl Shared {
    fn run_build(&self, image_id: &str) {
        let (recipe, job) = {
            let mut st = self.state.lock();
            let Some(img) = st.images.get(image_id).cloned() else {
                return;
            };
            if img.status != ImageStatus::Queued {
                return;
            }
            let Some(recipe) = st.recipes.get(&img.recipe_id).cloned() else {
                return;
            };
            let img = st.images.get_mut(image_id).expect("checked");
            img.status = ImageStatus::Building;
            img.updated = self.clock.now();
            if let Err(e) = self.store.put(IMAGES, image_id, &*img) {
                log::error!("persisting image {image_id}: {e}");
            }
            self.image_changed.notify_all();
            (recipe, img.job.clone())
        };
        if let Some(job) = &job {
            let _ = self.jobs.start(job, "building");
            let _ = self.jobs.notify(job, "build started", Some(10));
        }
        let mut lines = Vec::new();
        let outcome = self.builder.build(&recipe, &mut |line| lines.push(line.to_string()));
        let mut st = self.state.lock();
        let Some(img) = st.images.get_mut(image_id) else { return };
        if !img.build_log.is_empty() && !lines.is_empty() {
            img.build_log.push('\n');
        }
        img.build_log.push_str(&lines.join("\n"));
        img.updated = self.clock.now();
        match &outcome {
            Ok(digest) => {
                img.status = ImageStatus::Ready;
                img.digest = Some(digest.clone());
            }
            Err(msg) => {
                img.status = ImageStatus::Failed;
                img.digest = None;
                if img.build_log.is_empty() {
                    img.build_log = msg.clone();
                }
            }
        }
        if let Err(e) = self.store.put(IMAGES, image_id, &*img) {
            log::error!("persisting image {image_id}: {e}");
        }
        if let Some(job) = &job {
            let _ = match outcome {
                Ok(digest) => self
                    .jobs
                    .complete(job, serde_json::json!({"image_id": image_id, "digest": digest})),
                Err(msg) => self.jobs.fail(job, "BuildFailed", &msg),
            };
        }
        self.image_changed.notify_all();
    }
}

fn worker(shared: Arc<Shared>, rx: Receiver<String>) {
    while let Ok(id) = rx.recv() {
        shared.run_build(&id);
    }
}

impl TaleService {
    /// Loads persisted state and starts the build workers. Images that were
    /// queued or mid-build when the previous process stopped are rebuilt.
    #[allow(clippy::too_many_arguments)]
    pub fn open(
        catalog: Arc<Catalog>,
        providers: Arc<ProviderRegistry>,
        jobs: Arc<JobRegistry>,
        builder: Arc<dyn Builder>,
        config: TaleConfig,
        store: Arc<Store>,
        clock: SharedClock,
    ) -> Result<Self> {
        let mut st = State::default();
        for (_, r) in store.scan::<Recipe>(RECIPES)? {
            st.recipes.insert(r.id.clone(), r);
        }
        let mut requeue = Vec::new();
        for (_, mut img) in store.scan::<Image>(IMAGES)? {
            if img.status == ImageStatus::Building {
                img.status = ImageStatus::Queued;
                store.put(IMAGES, &img.id, &img)?;
            }
            if img.status == ImageStatus::Queued {
                requeue.push((img.created, img.id.clone()));
            }
            st.images.insert(img.id.clone(), img);
        }
        for (_, t) in store.scan::<Tale>(TALES)? {
            st.tales.insert(t.id.clone(), t);
        }
        let shared = Arc::new(Shared {
            state: Mutex::new(st),
            image_changed: Condvar::new(),
            store,
            catalog,
            providers,
            jobs,
            builder,
            clock,
        });
        let (tx, rx) = crossbeam_channel::unbounded();
        let workers = (0..config.build_workers.max(1))
            .map(|i| {
                let shared = shared.clone();
                let rx = rx.clone();
                std::thread::Builder::new()
                    .name(format!("image-build-{i}"))
                    .spawn(move || worker(shared, rx))
                    .expect("spawn build worker")
            })
            .collect();
        requeue.sort();
        for (_, id) in requeue {
            let _ = tx.send(id);
        }
        Ok(Self {
            shared,
            queue: Mutex::new(Some(tx)),
            workers: Mutex::new(workers),
        })
    }

    pub fn in_memory(
        catalog: Arc<Catalog>,
        providers: Arc<ProviderRegistry>,
        builder: Arc<dyn Builder>,
        clock: SharedClock,
    ) -> Self {
        let jobs = Arc::new(JobRegistry::in_memory(clock.clone()));
        Self::open(
            catalog,
            providers,
            jobs,
            builder,
            TaleConfig::default(),
            Arc::new(Store::in_memory()),
            clock,
        )
        .expect("empty store")
    }

    pub fn jobs(&self) -> &Arc<JobRegistry> {
        &self.shared.jobs
    }

    pub fn create_recipe(
        &self,
        name: &str,
        repo_url: &str,
        commit_id: &str,
        config: BTreeMap<String, String>,
        owner: Option<String>,
    ) -> Result<Recipe> {
        let parsed = url::Url::parse(repo_url).map_err(|_| TaleError::InvalidUrl(repo_url.to_string()))?;
        if !parsed.has_host() && parsed.scheme() != "file" {
            return Err(TaleError::InvalidUrl(repo_url.to_string()));
        }
        if commit_id.trim().is_empty() {
            return Err(TaleError::EmptyCommit);
        }
        let mut st = self.shared.state.lock();
        if let Some(existing) = st
            .recipes
            .values()
            .filter(|r| r.repo_url == repo_url && r.commit_id == commit_id && r.config == config)
            .min_by(|a, b| a.created.cmp(&b.created).then_with(|| a.id.cmp(&b.id)))
        {
            return Ok(existing.clone());
        }
        let recipe = Recipe {
            id: new_id(),
            name: name.to_string(),
            repo_url: repo_url.to_string(),
            commit_id: commit_id.to_string(),
            config,
            created: self.shared.clock.now(),
            owner,
        };
        self.shared.store.put(RECIPES, &recipe.id, &recipe)?;
        st.recipes.insert(recipe.id.clone(), recipe.clone());
        Ok(recipe)
    }

    pub fn recipe(&self, id: &str) -> Result<Recipe> {
        self.shared
            .state
            .lock()
            .recipes
            .get(id)
            .cloned()
            .ok_or_else(|| TaleError::UnknownRecipe(id.to_string()))
    }

    pub fn recipes(&self) -> Vec<Recipe> {
        let mut v: Vec<_> = self.shared.state.lock().recipes.values().cloned().collect();
        v.sort_by(|a, b| a.created.cmp(&b.created).then_with(|| a.id.cmp(&b.id)));
        v
    }

    /// Queues a build. The returned image is in `Queued`; its `job` tracks
    /// progress.
    pub fn build_image(&self, recipe_id: &str, owner: Option<String>) -> Result<Image> {
        let image = {
            let mut st = self.shared.state.lock();
            if !st.recipes.contains_key(recipe_id) {
                return Err(TaleError::UnknownRecipe(recipe_id.to_string()));
            }
            let job = self.shared.jobs.create(JobKind::ImageBuild, owner.clone())?;
            let now = self.shared.clock.now();
            let image = Image {
                id: new_id(),
                recipe_id: recipe_id.to_string(),
                status: ImageStatus::Queued,
                digest: None,
                build_log: String::new(),
                job: Some(job.id),
                created: now,
                updated: now,
                owner,
            };
            self.shared.store.put(IMAGES, &image.id, &image)?;
            st.images.insert(image.id.clone(), image.clone());
            image
        };
        if let Some(tx) = self.queue.lock().as_ref() {
            let _ = tx.send(image.id.clone());
        }
        Ok(image)
    }

    pub fn image(&self, id: &str) -> Result<Image> {
        self.shared
            .state
            .lock()
            .images
            .get(id)
            .cloned()
            .ok_or_else(|| TaleError::UnknownImage(id.to_string()))
    }

    pub fn images(&self) -> Vec<Image> {
        let mut v: Vec<_> = self.shared.state.lock().images.values().cloned().collect();
        v.sort_by(|a, b| a.created.cmp(&b.created).then_with(|| a.id.cmp(&b.id)));
        v
    }

    /// Blocks until the image is Ready or Failed, or `timeout` passes.
    pub fn wait_image(&self, id: &str, timeout: Duration) -> Result<Image> {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.state.lock();
        loop {
            let img = st
                .images
                .get(id)
                .ok_or_else(|| TaleError::UnknownImage(id.to_string()))?;
            if img.status.is_terminal() {
                return Ok(img.clone());
            }
            if self.shared.image_changed.wait_until(&mut st, deadline).timed_out() {
                return Ok(st.images.get(id).cloned().expect("image exists"));
            }
        }
    }

    fn check_folder(&self, folder_id: &NodeId) -> Result<()> {
        match self.shared.catalog.get(folder_id) {
            Ok(n) if n.kind != NodeKind::Item && !n.deleted => Ok(()),
            _ => Err(TaleError::UnknownFolder(folder_id.to_string())),
        }
    }

    pub fn create_tale(
        &self,
        image_id: &str,
        folder_id: &NodeId,
        metadata: TaleMetadata,
        owner: Option<String>,
    ) -> Result<Tale> {
        self.image(image_id)?;
        self.check_folder(folder_id)?;
        metadata.validate()?;
        let now = self.shared.clock.now();
        let tale = Tale {
            id: new_id(),
            image_id: image_id.to_string(),
            folder_id: folder_id.clone(),
            metadata,
            state: TaleState::Ok,
            flagged: Vec::new(),
            created: now,
            modified: now,
            owner,
        };
        self.save_tale(&tale)?;
        Ok(tale)
    }

    fn save_tale(&self, tale: &Tale) -> Result<()> {
        let mut st = self.shared.state.lock();
        self.shared.store.put(TALES, &tale.id, tale)?;
        st.tales.insert(tale.id.clone(), tale.clone());
        Ok(())
    }

    pub fn tale(&self, id: &str) -> Result<Tale> {
        self.shared
            .state
            .lock()
            .tales
            .get(id)
            .cloned()
            .ok_or_else(|| TaleError::UnknownTale(id.to_string()))
    }

    pub fn tales(&self) -> Vec<Tale> {
        let mut v: Vec<_> = self.shared.state.lock().tales.values().cloned().collect();
        v.sort_by(|a, b| a.created.cmp(&b.created).then_with(|| a.id.cmp(&b.id)));
        v
    }

    pub fn update_metadata(&self, id: &str, metadata: TaleMetadata) -> Result<Tale> {
        metadata.validate()?;
        let mut tale = self.tale(id)?;
        tale.metadata = metadata;
        tale.modified = self.shared.clock.now();
        self.save_tale(&tale)?;
        Ok(tale)
    }

    /// Moves the tale to Published, recording `identifier` if given.
    pub fn publish(&self, id: &str, identifier: Option<String>) -> Result<Tale> {
        let mut meta = self.tale(id)?.metadata;
        meta.publication_status = PublicationStatus::Published;
        if identifier.is_some() {
            meta.identifier = identifier;
        }
        self.update_metadata(id, meta)
    }

    pub fn export_tale(&self, id: &str) -> Result<Manifest> {
        let tale = self.tale(id)?;
        let image = self.image(&tale.image_id)?;
        let recipe = self.recipe(&image.recipe_id)?;
        let catalog = &self.shared.catalog;
        let session = Session::snapshot(
            catalog,
            std::slice::from_ref(&tale.folder_id),
            None,
            self.shared.clock.now(),
        )
        .map_err(|e| match e {
            crate::dms::DmsError::Catalog(c) => TaleError::Catalog(c),
            other => TaleError::ValidationFailed(other.to_string()),
        })?;
        let mut multi: HashMap<NodeId, bool> = HashMap::new();
        let mut data = Vec::new();
        for (path, f) in &session.mount_table {
            let bundle = match multi.get(&f.item) {
                Some(b) => *b,
                None => {
                    let b = catalog.files(&f.item)?.len() > 1;
                    multi.insert(f.item.clone(), b);
                    b
                }
            };
            let p = &f.provenance;
            data.push(DataEntry {
                posix_path: path.trim_start_matches('/').to_string(),
                size: f.size,
                source_url: p.source_url.clone(),
                protocol: p.protocol.clone(),
                provider: p.provider.clone(),
                identifier: p.identifier.clone(),
                original_name: p.original_name.clone(),
                checksum: p.checksum.clone(),
                bundle,
            });
        }
        Ok(Manifest {
            wholetale_manifest_version: MANIFEST_VERSION.to_string(),
            environment: Environment {
                name: recipe.name,
                repo_url: recipe.repo_url,
                commit_id: recipe.commit_id,
                config: recipe.config,
            },
            data,
            metadata: tale.metadata,
        })
    }

    /// Re-materializes a tale from a manifest.
    ///
    /// Data is recreated by reference in a new collection (named after
    /// `collection_name`) with provenance copied verbatim. Each entry's
    /// identifier is re-resolved; entries that fail are kept but flagged,
    /// and the tale is marked Degraded. The environment recipe is
    /// deduplicated and a fresh build is queued.
    pub fn import_tale(&self, manifest: &Manifest, collection_name: &str, owner: Option<String>) -> Result<Tale> {
        manifest.metadata.validate()?;
        let env = &manifest.environment;
        let recipe = self.create_recipe(
            &env.name,
            &env.repo_url,
            &env.commit_id,
            env.config.clone(),
            owner.clone(),
        )?;

        let catalog = &self.shared.catalog;
        let root_name = manifest
            .data
            .first()
            .map(|d| d.posix_path.split('/').next().unwrap_or_default().to_string())
            .unwrap_or_else(|| "data".to_string());
        let collection = catalog.create_unique(None, NodeKind::Collection, collection_name)?;
        let root = catalog.create_folder(&collection.id, &root_name)?;

        let mut dirs: HashMap<String, NodeId> = HashMap::new();
        dirs.insert(root_name.clone(), root.id.clone());
        let mut items: HashMap<String, NodeId> = HashMap::new();
        let mut resolved: HashMap<String, std::result::Result<DatasetDescriptor, ProviderError>> = HashMap::new();
        let mut flagged = Vec::new();

        let schema = |e: CatalogError| TaleError::SchemaInvalid(format!("data layout: {e}"));
        for entry in &manifest.data {
            let parts: Vec<&str> = entry.posix_path.split('/').collect();
            let item_depth = if entry.bundle { parts.len() - 1 } else { parts.len() };
            let mut parent = root.id.clone();
            for depth in 2..item_depth {
                let key = parts[..depth].join("/");
                parent = match dirs.get(&key) {
                    Some(id) => id.clone(),
                    None => {
                        let f = catalog.create_folder(&parent, parts[depth - 1]).map_err(schema)?;
                        dirs.insert(key, f.id.clone());
                        f.id
                    }
                };
            }
            let item_key = parts[..item_depth].join("/");
            let item = match items.get(&item_key) {
                Some(id) => id.clone(),
                None => {
                    let it = catalog.create_item(&parent, parts[item_depth - 1]).map_err(schema)?;
                    items.insert(item_key, it.id.clone());
                    it.id
                }
            };
            catalog.add_file(&item, entry.provenance(), entry.size)?;

            let lookup = resolved
                .entry(entry.identifier.clone())
                .or_insert_with(|| self.shared.providers.resolve(&entry.identifier));
            let problem = match lookup {
                Err(e) => Some((e.code().to_string(), e.to_string())),
                Ok(desc) if !desc.entries.iter().any(|f| f.source_url == entry.source_url) => Some((
                    "SourceNotFound".to_string(),
                    format!("{} no longer lists {}", entry.identifier, entry.source_url),
                )),
                Ok(_) => None,
            };
            if let Some((code, message)) = problem {
                flagged.push(FlaggedEntry {
                    posix_path: entry.posix_path.clone(),
                    identifier: entry.identifier.clone(),
                    code,
                    message,
                });
            }
        }

        let image = self.build_image(&recipe.id, owner.clone())?;
        let now = self.shared.clock.now();
        let tale = Tale {
            id: new_id(),
            image_id: image.id,
            folder_id: root.id,
            metadata: manifest.metadata.clone(),
            state: if flagged.is_empty() {
                TaleState::Ok
            } else {
                TaleState::Degraded
            },
            flagged,
            created: now,
            modified: now,
            owner,
        };
        self.save_tale(&tale)?;
        Ok(tale)
    }

    /// Folder ids referenced by tales; these must not be purged.
    pub fn referenced_folders(&self) -> Vec<NodeId> {
        self.shared
            .state
            .lock()
            .tales
            .values()
            .map(|t| t.folder_id.clone())
            .collect()
    }
}

impl Drop for TaleService {
    fn drop(&mut self) {
        self.queue.lock().take();
        for w in self.workers.lock().drain(..) {
            let _ = w.join();
        }
    }
}

#[cfg(test)]
mod tests;
