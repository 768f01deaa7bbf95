// SPDX-License-Identifier: Apache-2.0

//! REST service over the tale engine. All routes live under `/v1` and take
//! a bearer token, except `/health` and the credential exchange.

mod config;
mod error;
mod routes;

use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::http::{header, HeaderValue, Method};
use tale_core::clock::{self, SharedClock};
use tale_core::engine::{Engine, EngineError};
use tale_core::error::ErrorCode;
use tower_http::cors::CorsLayer;

pub use config::{ServerConfig, DEFAULT_CORS_ORIGIN};
pub use error::{status_of, ApiError, ErrorBody, ErrorDetail};
pub use routes::{router, AppState, ImageJob, NDJSON};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("address {0} already in use")]
    PortInUse(SocketAddr),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl ErrorCode for ServeError {
    fn code(&self) -> &'static str {
        match self {
            ServeError::PortInUse(_) => "PortInUse",
            ServeError::ConfigInvalid(_) => "ConfigInvalid",
            ServeError::Engine(e) => e.code(),
            ServeError::Io(_) => "IoError",
        }
    }
}

/// A running service. Dropping it shuts the service down.
pub struct ServerHandle {
    addr: SocketAddr,
    engine: Arc<Engine>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl std::fmt::Debug for ServerHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerHandle").field("addr", &self.addr).finish()
    }
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    /// Stops accepting connections, drains in-flight requests and waits for
    /// the service thread to exit.
    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t
                .join()
                .unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

fn cors(origin: &str) -> Result<CorsLayer, ServeError> {
    let origin: HeaderValue = origin
        .parse()
        .map_err(|_| ServeError::ConfigInvalid(format!("bad cors origin {origin:?}")))?;
    Ok(CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST, Method::PATCH, Method::DELETE])
        .allow_headers([header::AUTHORIZATION, header::CONTENT_TYPE]))
}

fn bind(listen: SocketAddr) -> Result<TcpListener, ServeError> {
    TcpListener::bind(listen).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => ServeError::PortInUse(listen),
        _ => ServeError::Io(e),
    })
}

/// Serves `engine` on `listen` from a dedicated thread.
pub fn serve(engine: Arc<Engine>, listen: SocketAddr, cors_origin: &str) -> Result<ServerHandle, ServeError> {
    serve_on(engine, bind(listen)?, cors_origin)
}

fn serve_on(engine: Arc<Engine>, listener: TcpListener, cors_origin: &str) -> Result<ServerHandle, ServeError> {
    let cors = cors(cors_origin)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let app = router(AppState { engine: engine.clone() }).layer(cors);
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .thread_name("wt-server")
        .build()?;
    let thread = std::thread::Builder::new().name("wt-server".into()).spawn(move || {
        let result = rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, app)
                .with_graceful_shutdown(async move {
                    let _ = rx.await;
                })
                .await
        });
        rt.shutdown_timeout(Duration::from_secs(5));
        result
    })?;
    log::info!("listening on {addr}");
    Ok(ServerHandle {
        addr,
        engine,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Opens the engine described by `config` and serves it.
pub fn start(config: &ServerConfig) -> Result<ServerHandle, ServeError> {
    start_with_clock(config, clock::system())
}

pub fn start_with_clock(config: &ServerConfig, clock: SharedClock) -> Result<ServerHandle, ServeError> {
    config.validate()?;
    // bind before opening the journal so a busy port leaves nothing behind
    let listener = bind(config.listen)?;
    let engine = Arc::new(Engine::open(config.engine_config(), clock)?);
    serve_on(engine, listener, &config.cors_origin)
}
