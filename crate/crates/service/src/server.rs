use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::header;
pub use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use rcms_core::wire::{Envelope, ErrorBody, Kind, ENVELOPE_PATH};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use uuid::Uuid;

/// What a handler sends back over HTTP.
pub struct Reply {
    pub status: StatusCode,
    pub env: Option<Envelope>,
}

impl Reply {
    pub fn ok(env: Envelope) -> Self {
        Self {
            status: StatusCode::OK,
            env: Some(env),
        }
    }

    pub fn status(status: StatusCode) -> Self {
        Self { status, env: None }
    }

    /// Replies to `req` with `kind` and `body`.
    pub fn to(req: &Envelope, source: &str, kind: Kind, body: impl Into<rcms_core::wire::Body>) -> Self {
        Self::ok(req.reply(kind, source, body))
    }

    pub fn error(req: &Envelope, source: &str, err: ErrorBody) -> Self {
        Self::ok(req.error_reply(source, err))
    }

    pub fn unsupported(req: &Envelope, source: &str) -> Self {
        Self::error(
            req,
            source,
            ErrorBody::new(
                "Unsupported",
                format!("{source} does not handle {} {}", req.kind, req.body.tag()),
            ),
        )
    }
}

#[async_trait]
pub trait EnvelopeHandler: Send + Sync + 'static {
    /// Source name used in replies.
    fn name(&self) -> String;

    async fn handle(&self, env: Envelope) -> Reply;
}

impl IntoResponse for Reply {
    fn into_response(self) -> Response {
        match self.env.map(|e| e.encode()) {
            None => self.status.into_response(),
            Some(Ok(bytes)) => (self.status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
            Some(Err(e)) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        }
    }
}

pub async fn envelope_endpoint(State(h): State<Arc<dyn EnvelopeHandler>>, body: Bytes) -> Reply {
    match Envelope::decode(&body) {
        Ok(env) => h.handle(env).await,
        Err(e) => {
            // Point the error at the request id if one can be salvaged.
            let id = serde_json::from_slice::<serde_json::Value>(&body)
                .ok()
                .and_then(|v| v.get("id")?.as_str()?.parse::<Uuid>().ok())
                .unwrap_or(Uuid::nil());
            let mut err = Envelope::new(Kind::Error, h.name(), "", ErrorBody::new(e.code(), e.to_string()));
            err.correlation_id = Some(id);
            Reply {
                status: StatusCode::BAD_REQUEST,
                env: Some(err),
            }
        }
    }
}

/// A router serving `handler` on the envelope path.
pub fn envelope_router(handler: Arc<dyn EnvelopeHandler>) -> Router {
    Router::new()
        .route(ENVELOPE_PATH, post(envelope_endpoint))
        .with_state(handler)
}

/// A running HTTP server. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting, lets in-flight requests finish for up to a second,
    /// then abandons the rest.
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let task = &mut self.task;
        if tokio::time::timeout(Duration::from_secs(1), &mut *task).await.is_err() {
            task.abort();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

pub async fn bind(addr: &str) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}

/// Serves `router` on `listener` in a background task.
pub fn serve_on(listener: TcpListener, router: Router) -> std::io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel();
    let task = tokio::spawn(async move {
        let result = axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
        if let Err(e) = result {
            tracing::warn!(%addr, "server stopped: {e}");
        }
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        task,
    })
}

/// Serves on an ephemeral loopback port.
pub async fn serve_local(router: Router) -> std::io::Result<ServerHandle> {
    serve_on(bind("127.0.0.1:0").await?, router)
}

pub async fn serve_handler(handler: Arc<dyn EnvelopeHandler>, addr: &str) -> std::io::Result<ServerHandle> {
    serve_on(bind(addr).await?, envelope_router(handler))
}
