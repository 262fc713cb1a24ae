//! Read-only HTTP view of a node: `/health`, `/stats` and `/status`.

use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use eduction_core::manager::StatusReport;
use eduction_core::StoreHandle;
use serde_json::{json, Value as JsonValue};
use tokio::sync::watch;

pub type StatusSource = Arc<dyn Fn() -> Result<StatusReport, String> + Send + Sync>;

#[derive(Clone, Default)]
pub struct Gateway {
    pub store: Option<Arc<dyn StoreHandle>>,
    pub status: Option<StatusSource>,
}

fn unavailable(what: &str) -> Response {
    (StatusCode::NOT_FOUND, Json(json!({ "error": format!("no {what} on this node") }))).into_response()
}

fn failed(e: String) -> Response {
    (StatusCode::BAD_GATEWAY, Json(json!({ "error": e }))).into_response()
}

async fn health() -> Json<JsonValue> {
    Json(json!({ "status": "ok" }))
}

async fn stats(State(g): State<Gateway>) -> Response {
    let Some(store) = g.store else { return unavailable("demand store") };
    match tokio::task::spawn_blocking(move || store.stats()).await {
        Ok(Ok(s)) => Json(json!({
            "deposits": s.deposits,
            "hits": s.hits,
            "misses": s.misses,
            "computed": s.computed,
            "pending": s.pending,
            "in_process": s.in_process,
            "redeliveries": s.redeliveries,
        }))
        .into_response(),
        Ok(Err(e)) => failed(e.to_string()),
        Err(e) => failed(e.to_string()),
    }
}

pub fn status_json(r: &StatusReport) -> JsonValue {
    json!({
        "nodes": r.nodes.iter().map(|n| json!({
            "id": n.node_id,
            "address": n.address,
            "status": n.status.name(),
            "last_heartbeat": n.last_heartbeat,
        })).collect::<Vec<_>>(),
        "tiers": r.tiers.iter().map(|t| json!({
            "id": t.tier_id,
            "kind": t.kind.name(),
            "node": t.node_id,
            "config": t.config,
            "state": t.state.name(),
        })).collect::<Vec<_>>(),
    })
}

async fn status(State(g): State<Gateway>) -> Response {
    let Some(src) = g.status else { return unavailable("manager") };
    match tokio::task::spawn_blocking(move || src()).await {
        Ok(Ok(r)) => Json(status_json(&r)).into_response(),
        Ok(Err(e)) => failed(e),
        Err(e) => failed(e.to_string()),
    }
}

pub fn router(g: Gateway) -> Router {
    Router::new().route("/health", get(health)).route("/stats", get(stats)).route("/status", get(status)).with_state(g)
}

pub struct HttpGateway {
    addr: SocketAddr,
    stop: watch::Sender<bool>,
    runtime: Option<tokio::runtime::Runtime>,
}

impl HttpGateway {
    pub fn start(addr: &str, gateway: Gateway) -> io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(1)
            .thread_name("http-gateway")
            .enable_all()
            .build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
        let local = listener.local_addr()?;
        let (stop, mut rx) = watch::channel(false);
        runtime.spawn(async move {
            let shutdown = async move {
                let _ = rx.changed().await;
            };
            if let Err(e) = axum::serve(listener, router(gateway)).with_graceful_shutdown(shutdown).await {
                tracing::error!(error = %e, "http gateway failed");
            }
        });
        tracing::info!(addr = %local, "http gateway listening");
        Ok(Self { addr: local, stop, runtime: Some(runtime) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for HttpGateway {
    fn drop(&mut self) {
        let _ = self.stop.send(true);
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}
