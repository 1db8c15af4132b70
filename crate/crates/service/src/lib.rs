//! HTTP front end for one loaded scene and its feature store.
//!
//! The scene loads in the background after the listener is up; until then
//! `/api/scene` answers 503 with `Retry-After`. Everything loaded is
//! immutable, so requests only share the query table and the render cache.

mod api;
mod state;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::http::{header, HeaderValue, Method};
use axum::Router;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use splatfield_core::scene_io::{load_feature_store, load_prompt_bank};
use splatfield_core::{PromptBank, SceneBundle};

pub use state::{AppState, RenderMode, Session};

/// Everything needed to start the service.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub scene: PathBuf,
    pub cameras: PathBuf,
    pub store: PathBuf,
    pub prompts: Option<PathBuf>,
    pub background: [f64; 3],
    pub theta_default: f64,
    /// Where exports are written.
    pub out_dir: PathBuf,
    /// Static viewer assets served at `/`.
    pub static_dir: Option<PathBuf>,
}

/// Loads scene, cameras, store and optional prompt bank, checking they fit
/// together.
pub fn load_session(config: &ServiceConfig) -> splatfield_core::Result<Session> {
    let scene = SceneBundle::load(&config.scene, &config.cameras, config.background)?;
    let store = load_feature_store(&config.store, Some(scene.cloud.len()))?;
    let prompts = match &config.prompts {
        Some(p) => {
            let bank = load_prompt_bank(p)?;
            if bank.dim() != store.dim() {
                return Err(splatfield_core::Error::Dimension(format!(
                    "prompt bank has D={}, feature store has D={}",
                    bank.dim(),
                    store.dim()
                )));
            }
            bank
        }
        None => PromptBank::new(store.dim(), Vec::new())?,
    };
    Ok(Session::new(scene, store, prompts, config.theta_default))
}

fn is_local_origin(origin: &HeaderValue) -> bool {
    let Ok(o) = origin.to_str() else {
        return false;
    };
    let rest = o.strip_prefix("http://").or_else(|| o.strip_prefix("https://"));
    let Some(host) = rest else {
        return false;
    };
    let host = if host.starts_with('[') {
        host.split_inclusive(']').next()
    } else {
        host.split(['/', ':']).next()
    }
    .unwrap_or("");
    matches!(host, "localhost" | "127.0.0.1" | "[::1]")
}

/// The full router: API under `/api`, optional static files elsewhere.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(|o, _| is_local_origin(o)))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let app = Router::new().nest("/api", api::routes()).with_state(state);
    let app = match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.fallback(api::not_found),
    };
    app.layer(cors)
}

/// Binds `addr`, starts loading in the background and serves until the
/// process is stopped.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    serve_on(config, listener).await
}

pub async fn serve_on(config: ServiceConfig, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    let state = AppState::loading(config.out_dir.clone());
    let loader = state.clone();
    let cfg = Arc::new(config);
    let load_cfg = cfg.clone();
    tokio::task::spawn_blocking(move || match load_session(&load_cfg) {
        Ok(session) => {
            tracing::info!(
                "loaded {} Gaussians, {} views, D={}",
                session.scene.cloud.len(),
                session.scene.view_count(),
                session.store.dim()
            );
            loader.set_session(session);
        }
        Err(e) => {
            tracing::error!("loading failed: {e}");
            loader.set_failed(e.to_string());
        }
    });
    axum::serve(listener, router(state, cfg.static_dir.clone())).await
}
