//! In-process chat-completion server for tests and offline runs.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
pub use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::task::JoinHandle;

/// Reply for one request: a status and, on success, the message content.
pub type Responder = dyn Fn(&StubRequest) -> (StatusCode, String) + Send + Sync;

#[derive(Debug, Clone)]
pub struct StubRequest {
    /// 0-based arrival order.
    pub index: usize,
    pub prompt: String,
    pub temperature: f64,
    pub body: Value,
}

struct Shared {
    responder: Box<Responder>,
    delay: Duration,
    requests: AtomicUsize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

pub struct StubServer {
    pub addr: SocketAddr,
    shared: Arc<Shared>,
    handle: JoinHandle<()>,
}

impl StubServer {
    /// Serves on an ephemeral localhost port; `delay` holds each request open
    /// so overlapping requests are observable.
    pub async fn start<F>(delay: Duration, responder: F) -> std::io::Result<Self>
    where
        F: Fn(&StubRequest) -> (StatusCode, String) + Send + Sync + 'static,
    {
        let shared = Arc::new(Shared {
            responder: Box::new(responder),
            delay,
            requests: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
        });
        let app = Router::new()
            .route("/v1/chat/completions", post(handle))
            .with_state(shared.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let handle = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(Self { addr, shared, handle })
    }

    /// Always answers 200 with `content`.
    pub async fn fixed(content: impl Into<String>) -> std::io::Result<Self> {
        let content = content.into();
        Self::start(Duration::ZERO, move |_| (StatusCode::OK, content.clone())).await
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    pub fn requests(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }

    pub fn peak_in_flight(&self) -> usize {
        self.shared.peak_in_flight.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

async fn handle(State(shared): State<Arc<Shared>>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let index = shared.requests.fetch_add(1, Ordering::SeqCst);
    let now = shared.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    shared.peak_in_flight.fetch_max(now, Ordering::SeqCst);
    if !shared.delay.is_zero() {
        tokio::time::sleep(shared.delay).await;
    }
    let request = StubRequest {
        index,
        prompt: body
            .pointer("/messages/0/content")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string(),
        temperature: body.get("temperature").and_then(Value::as_f64).unwrap_or(f64::NAN),
        body: body.clone(),
    };
    let (status, content) = (shared.responder)(&request);
    shared.in_flight.fetch_sub(1, Ordering::SeqCst);
    let reply = if status.is_success() {
        json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]})
    } else {
        json!({"error": content})
    };
    (status, Json(reply))
}
