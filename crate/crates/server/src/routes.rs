// SPDX-License-Identifier: Apache-2.0

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::header::{AUTHORIZATION, CONTENT_TYPE, LOCATION};
use axum::http::request::Parts;
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tale_core::auth::{Credentials, Principal};
use tale_core::catalog::{Node, NodeId};
use tale_core::dms::SessionId;
use tale_core::engine::{Engine, EngineError, NodePatch};
use tale_core::jobs::JobRecord;
use tale_core::tale::{Image, TaleMetadata};

use crate::error::ApiError;

pub const NDJSON: &str = "application/x-ndjson";

/// Upper bound of one blocking wait inside an event stream.
const EVENT_POLL: Duration = Duration::from_millis(500);

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
}

/// The authenticated caller.
pub struct Caller(pub Principal);

impl FromRequestParts<AppState> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &AppState) -> Result<Self, ApiError> {
        let token = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .ok_or_else(ApiError::missing_token)?;
        Ok(Caller(state.engine.principal(token)?))
    }
}

/// JSON request body with errors in the API's own format.
pub struct JsonBody<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for JsonBody<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        serde_json::from_slice(&bytes)
            .map(JsonBody)
            .map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
    }
}

async fn run<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, EngineError> + Send + 'static,
{
    let engine = state.engine.clone();
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(ApiError::from)
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    let v1 = Router::new()
        .route("/auth/token", post(auth_token))
        .route("/auth/link", post(auth_link))
        .route("/whoami", get(whoami))
        .route("/dataset/register", post(register))
        .route("/collection", get(collections))
        .route("/catalog", get(catalog_path))
        .route("/folder", post(create_folder))
        .route("/folder/{id}", get(folder))
        .route("/node/{id}", patch(update_node))
        .route("/session", post(create_session))
        .route("/session/{id}", axum::routing::delete(delete_session))
        .route("/session/{id}/tree", get(session_tree))
        .route("/cache/stats", get(cache_stats))
        .route("/recipe", post(create_recipe).get(recipes))
        .route("/recipe/{id}", get(recipe))
        .route("/image", post(build_image).get(images))
        .route("/image/{id}", get(image))
        .route("/tale", post(create_tale).get(tales))
        .route("/tale/import", post(import_tale))
        .route("/tale/{id}", get(tale).patch(update_tale))
        .route("/tale/{id}/export", get(export_tale))
        .route("/tale/{id}/publish", post(publish_tale))
        .route("/instance", post(launch).get(instances))
        .route("/instance/{id}", get(instance).delete(delete_instance))
        .route("/instance/{id}/suspend", post(suspend))
        .route("/instance/{id}/resume", post(resume))
        .route("/job", get(jobs))
        .route("/job/{id}", get(job))
        .route("/job/{id}/events", get(job_events));
    Router::new()
        .route("/health", get(health))
        .route("/v1/health", get(health))
        .nest("/v1", v1)
        .fallback(not_found)
        .with_state(state)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such endpoint")
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok"}))
}

fn created<T: Serialize>(location: String, body: T) -> Response {
    let mut resp = (StatusCode::CREATED, Json(body)).into_response();
    if let Ok(v) = HeaderValue::from_str(&location) {
        resp.headers_mut().insert(LOCATION, v);
    }
    resp
}

// --- auth -----------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenRequest {
    issuer: String,
    subject: String,
    proof: String,
    #[serde(default)]
    scopes: Option<Vec<String>>,
}

async fn auth_token(State(s): State<AppState>, JsonBody(req): JsonBody<TokenRequest>) -> ApiResult<impl IntoResponse> {
    let token = run(&s, move |e| {
        e.authenticate(&Credentials::new(&req.issuer, &req.subject, &req.proof), req.scopes)
    })
    .await?;
    Ok(Json(token))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkRequest {
    first: Credentials,
    second: Credentials,
}

async fn auth_link(State(s): State<AppState>, JsonBody(req): JsonBody<LinkRequest>) -> ApiResult<impl IntoResponse> {
    Ok(Json(
        run(&s, move |e| e.link_identities(&req.first, &req.second)).await?,
    ))
}

#[derive(Serialize)]
struct WhoAmI {
    identity: String,
    identities: Vec<String>,
    scopes: Vec<String>,
    home: Option<Node>,
}

async fn whoami(State(s): State<AppState>, Caller(p): Caller) -> ApiResult<impl IntoResponse> {
    let me = run(&s, move |e| {
        Ok(WhoAmI {
            home: e.home(&p).ok(),
            identity: p.identity.clone(),
            identities: p.identities.iter().cloned().collect(),
            scopes: p.scopes.iter().map(|s| s.as_str().to_string()).collect(),
        })
    })
    .await?;
    Ok(Json(me))
}

// --- data -----------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterRequest {
    identifier: String,
    #[serde(default)]
    parent: Option<NodeId>,
}

fn accepted(job: JobRecord) -> Response {
    let location = format!("/v1/job/{}", job.id);
    let mut resp = (StatusCode::ACCEPTED, Json(job)).into_response();
    if let Ok(v) = HeaderValue::from_str(&location) {
        resp.headers_mut().insert(LOCATION, v);
    }
    resp
}

async fn register(
    State(s): State<AppState>,
    Caller(p): Caller,
    JsonBody(req): JsonBody<RegisterRequest>,
) -> ApiResult<Response> {
    let job = run(&s, move |e| e.register(&p, &req.identifier, req.parent.as_ref())).await?;
    Ok(accepted(job))
}

async fn collections(State(s): State<AppState>, Caller(p): Caller) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.collections(&p)).await?))
}

#[derive(Deserialize)]
struct PathQuery {
    path: String,
}

async fn catalog_path(
    State(s): State<AppState>,
    Caller(p): Caller,
    Query(q): Query<PathQuery>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.node_by_path(&p, &q.path)).await?))
}

async fn folder(State(s): State<AppState>, Caller(p): Caller, Path(id): Path<NodeId>) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.node(&p, &id)).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FolderRequest {
    #[serde(default)]
    parent: Option<NodeId>,
    name: String,
}

async fn create_folder(
    State(s): State<AppState>,
    Caller(p): Caller,
    JsonBody(req): JsonBody<FolderRequest>,
) -> ApiResult<Response> {
    let node = run(&s, move |e| e.create_folder(&p, req.parent.as_ref(), &req.name)).await?;
    Ok(created(format!("/v1/folder/{}", node.id), node))
}

async fn update_node(
    State(s): State<AppState>,
    Caller(p): Caller,
    Path(id): Path<NodeId>,
    JsonBody(patch): JsonBody<NodePatch>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.update_node(&p, &id, &patch)).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionRequest {
    roots: Vec<NodeId>,
}

async fn create_session(
    State(s): State<AppState>,
    Caller(p): Caller,
    JsonBody(req): JsonBody<SessionRequest>,
) -> ApiResult<Response> {
    let tree = run(&s, move |e| e.create_session(&p, &req.roots)).await?;
    Ok(created(format!("/v1/session/{}/tree", tree.id.as_str()), tree))
}

async fn session_tree(
    State(s): State<AppState>,
    Caller(p): Caller,
    Path(id): Path<SessionId>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.session_tree(&p, &id)).await?))
}

async fn delete_session(
    State(s): State<AppState>,
    Caller(p): Caller,
    Path(id): Path<SessionId>,
) -> ApiResult<StatusCode> {
    run(&s, move |e| e.delete_session(&p, &id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn cache_stats(State(s): State<AppState>, Caller(p): Caller) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.cache_report(&p)).await?))
}

// --- recipes, images, tales -----------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecipeRequest {
    name: String,
    repo_url: String,
    commit_id: String,
    #[serde(default)]
    config: serde_json::Value,
}

async fn create_recipe(
    State(s): State<AppState>,
    Caller(p): Caller,
    JsonBody(req): JsonBody<RecipeRequest>,
) -> ApiResult<Response> {
    let config = if req.config.is_null() {
        serde_json::json!({})
    } else {
        req.config
    };
    let r = run(&s, move |e| {
        e.create_recipe(&p, &req.name, &req.repo_url, &req.commit_id, &config)
    })
    .await?;
    Ok(created(format!("/v1/recipe/{}", r.id), r))
}

async fn recipes(State(s): State<AppState>, Caller(p): Caller) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.recipes(&p)).await?))
}

async fn recipe(State(s): State<AppState>, Caller(p): Caller, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.recipe(&p, &id)).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRequest {
    recipe_id: String,
}

/// A build job plus the image it produces.
#[derive(Serialize, Deserialize)]
pub struct ImageJob {
    #[serde(flatten)]
    pub job: JobRecord,
    pub image: Image,
}

async fn build_image(
    State(s): State<AppState>,
    Caller(p): Caller,
    JsonBody(req): JsonBody<ImageRequest>,
) -> ApiResult<Response> {
    let (image, job) = run(&s, move |e| e.build_image(&p, &req.recipe_id)).await?;
    let location = format!("/v1/job/{}", job.id);
    let mut resp = (StatusCode::ACCEPTED, Json(ImageJob { job, image })).into_response();
    if let Ok(v) = HeaderValue::from_str(&location) {
        resp.headers_mut().insert(LOCATION, v);
    }
    Ok(resp)
}

async fn images(State(s): State<AppState>, Caller(p): Caller) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.images(&p)).await?))
}

async fn image(State(s): State<AppState>, Caller(p): Caller, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.image(&p, &id)).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaleRequest {
    image_id: String,
    folder_id: NodeId,
    #[serde(default)]
    metadata: TaleMetadata,
}

async fn create_tale(
    State(s): State<AppState>,
    Caller(p): Caller,
    JsonBody(req): JsonBody<TaleRequest>,
) -> ApiResult<Response> {
    let t = run(&s, move |e| {
        e.create_tale(&p, &req.image_id, &req.folder_id, req.metadata)
    })
    .await?;
    Ok(created(format!("/v1/tale/{}", t.id), t))
}

async fn tales(State(s): State<AppState>, Caller(p): Caller) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.tales_for(&p)).await?))
}

async fn tale(State(s): State<AppState>, Caller(p): Caller, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.tale(&p, &id)).await?))
}

async fn update_tale(
    State(s): State<AppState>,
    Caller(p): Caller,
    Path(id): Path<String>,
    JsonBody(metadata): JsonBody<TaleMetadata>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.update_tale(&p, &id, metadata)).await?))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct PublishRequest {
    #[serde(default)]
    identifier: Option<String>,
}

async fn publish_tale(
    State(s): State<AppState>,
    Caller(p): Caller,
    Path(id): Path<String>,
    JsonBody(req): JsonBody<PublishRequest>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.publish_tale(&p, &id, req.identifier)).await?))
}

async fn export_tale(State(s): State<AppState>, Caller(p): Caller, Path(id): Path<String>) -> ApiResult<Response> {
    let manifest = run(&s, move |e| e.export_tale(&p, &id)).await?;
    Ok(([(CONTENT_TYPE, "application/json")], manifest.to_canonical_string()).into_response())
}

async fn import_tale(
    State(s): State<AppState>,
    Caller(p): Caller,
    JsonBody(manifest): JsonBody<serde_json::Value>,
) -> ApiResult<Response> {
    let t = run(&s, move |e| e.import_tale(&p, manifest)).await?;
    Ok(created(format!("/v1/tale/{}", t.id), t))
}

// --- instances ------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LaunchRequest {
    tale_id: String,
}

async fn launch(
    State(s): State<AppState>,
    Caller(p): Caller,
    JsonBody(req): JsonBody<LaunchRequest>,
) -> ApiResult<Response> {
    let inst = run(&s, move |e| e.launch(&p, &req.tale_id)).await?;
    Ok(created(format!("/v1/instance/{}", inst.id), inst))
}

async fn instances(State(s): State<AppState>, Caller(p): Caller) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.instances(&p)).await?))
}

async fn instance(
    State(s): State<AppState>,
    Caller(p): Caller,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.instance(&p, &id)).await?))
}

async fn suspend(State(s): State<AppState>, Caller(p): Caller, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.suspend(&p, &id)).await?))
}

async fn resume(State(s): State<AppState>, Caller(p): Caller, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.resume(&p, &id)).await?))
}

async fn delete_instance(
    State(s): State<AppState>,
    Caller(p): Caller,
    Path(id): Path<String>,
) -> ApiResult<StatusCode> {
    run(&s, move |e| e.delete_instance(&p, &id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

// --- jobs -----------------------------------------------------------------

async fn jobs(State(s): State<AppState>, Caller(p): Caller) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.jobs_for(&p)).await?))
}

async fn job(State(s): State<AppState>, Caller(p): Caller, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(run(&s, move |e| e.job(&p, &id)).await?))
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    after: u64,
    #[serde(default = "yes")]
    follow: bool,
}

fn yes() -> bool {
    true
}

/// Newline-delimited job events. With `follow` the stream stays open until
/// the job is terminal.
async fn job_events(
    State(s): State<AppState>,
    Caller(p): Caller,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Response> {
    let (first, status) = {
        let (p, id) = (p.clone(), id.clone());
        run(&s, move |e| e.job_events(&p, &id, q.after, Duration::ZERO)).await?
    };
    let (tx, rx) = tokio::sync::mpsc::channel::<Bytes>(16);
    let engine = s.engine.clone();
    tokio::task::spawn_blocking(move || {
        let mut after = q.after;
        let mut batch = first;
        let mut status = status;
        loop {
            for ev in &batch {
                after = after.max(ev.seq);
                let mut line = serde_json::to_vec(ev).expect("event serializes");
                line.push(b'\n');
                if tx.blocking_send(Bytes::from(line)).is_err() {
                    return;
                }
            }
            if status.is_terminal() || !q.follow {
                return;
            }
            match engine.job_events(&p, &id, after, EVENT_POLL) {
                Ok((b, st)) => {
                    batch = b;
                    status = st;
                }
                Err(_) => return,
            }
            if tx.is_closed() {
                return;
            }
        }
    });
    let stream = futures_util::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|b| (Ok::<_, Infallible>(b), rx))
    });
    Ok(([(CONTENT_TYPE, NDJSON)], Body::from_stream(stream)).into_response())
}
