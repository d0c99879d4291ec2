//! Websocket transport: `/ingest` for pose streams, `/jury` for consoles.

use std::collections::HashSet;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use kickscore_core::ClassifierModel;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc};
use tracing::{info, warn};

use crate::engine::{Engine, IngestError, VerdictReply};
use crate::messages::{IngestNotice, JuryMessage};

const BROADCAST_CAPACITY: usize = 1024;
const EXPIRY_TICK: Duration = Duration::from_millis(250);

pub struct AppState {
    pub engine: Engine,
    tx: broadcast::Sender<Arc<str>>,
    claims: Mutex<HashSet<(String, String)>>,
}

impl AppState {
    pub fn new(engine: Engine) -> Arc<Self> {
        let (tx, _) = broadcast::channel(BROADCAST_CAPACITY);
        Arc::new(Self {
            engine,
            tx,
            claims: Mutex::new(HashSet::new()),
        })
    }

    pub fn broadcast(&self, msg: &JuryMessage) {
        // No subscribers is fine; the decision is already logged.
        let _ = self.tx.send(Arc::from(msg.to_json()));
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<str>> {
        self.tx.subscribe()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/ingest", get(ingest_upgrade))
        .route("/jury", get(jury_upgrade))
        .route("/health", get(health))
        .route("/model", post(swap_model))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    Json(state.engine.health())
}

async fn swap_model(State(state): State<Arc<AppState>>, Json(model): Json<ClassifierModel>) -> Response {
    match state.engine.swap_model(model) {
        Ok(v) => Json(serde_json::json!({ "model_version": v })).into_response(),
        Err(e) => (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()).into_response(),
    }
}

async fn ingest_upgrade(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> Response {
    ws.on_upgrade(move |socket| ingest_session(socket, state))
}

async fn jury_upgrade(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> Response {
    ws.on_upgrade(move |socket| jury_session(socket, state))
}

async fn ingest_session(mut socket: WebSocket, state: Arc<AppState>) {
    let mut mine: HashSet<(String, String)> = HashSet::new();
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
            Message::Close(_) => break,
            _ => continue,
        };
        let mut notices = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(n) = ingest_line(&state, &mut mine, line) {
                notices.push(n);
            }
        }
        for n in notices {
            if socket.send(Message::Text(n.to_json().into())).await.is_err() {
                break;
            }
        }
    }
    let mut claims = state.claims.lock().expect("claims lock");
    for key in mine {
        claims.remove(&key);
    }
}

fn ingest_line(state: &AppState, mine: &mut HashSet<(String, String)>, line: &str) -> Option<IngestNotice> {
    let frame = match state.engine.parse_frame(line) {
        Ok(f) => f,
        Err(e) => {
            warn!(error = %e, "skipping malformed line");
            return Some(skipped(&e));
        }
    };
    let key = (frame.match_id.clone(), frame.athlete_id.clone());
    if !mine.contains(&key) {
        if !state.claims.lock().expect("claims lock").insert(key.clone()) {
            return Some(IngestNotice::StreamBusy { match_id: key.0, athlete: key.1 });
        }
        mine.insert(key);
    }
    match state.engine.ingest_frame(frame) {
        Ok(Some(emitted)) => {
            state.broadcast(&JuryMessage::decision(&emitted));
            None
        }
        Ok(None) => None,
        Err(e) => {
            warn!(error = %e, "frame dropped");
            Some(skipped(&e))
        }
    }
}

fn skipped(e: &IngestError) -> IngestNotice {
    IngestNotice::Skipped {
        reason: e.code().to_string(),
        detail: e.to_string(),
    }
}

async fn jury_session(socket: WebSocket, state: Arc<AppState>) {
    let (mut sink, mut stream) = socket.split();
    let mut rx = state.subscribe();
    let (reply_tx, mut reply_rx) = mpsc::unbounded_channel::<String>();

    for msg in state.engine.pending_messages() {
        if sink.send(Message::Text(msg.to_json().into())).await.is_err() {
            return;
        }
    }

    let writer = tokio::spawn(async move {
        loop {
            let text: String = tokio::select! {
                b = rx.recv() => match b {
                    Ok(s) => s.to_string(),
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        warn!(missed = n, "jury console lagging");
                        continue;
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                r = reply_rx.recv() => match r {
                    Some(s) => s,
                    None => break,
                },
            };
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });

    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match state.engine.submit_verdict_json(&text) {
            Ok(r) => r,
            Err(e) => {
                warn!(error = %e, "verdict not persisted");
                VerdictReply::Nack { event: None, reason: "internal", detail: e.to_string() }
            }
        };
        if let VerdictReply::Ack(record) = &reply {
            state.broadcast(&JuryMessage::Final { record: record.clone() });
        }
        if reply_tx.send(reply.to_message().to_json()).is_err() {
            break;
        }
    }
    drop(reply_tx);
    writer.abort();
}

/// Periodically auto-finalizes decisions nobody ruled on.
pub fn spawn_expiry(state: Arc<AppState>) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(EXPIRY_TICK);
        loop {
            tick.tick().await;
            match state.engine.expire_pending() {
                Ok(records) => {
                    for record in records {
                        state.broadcast(&JuryMessage::Final { record });
                    }
                }
                Err(e) => warn!(error = %e, "auto-final failed"),
            }
        }
    })
}

/// Serves until `shutdown` resolves or the listener fails.
pub async fn serve<F>(listener: TcpListener, state: Arc<AppState>, shutdown: F) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    let addr: SocketAddr = listener.local_addr()?;
    info!(%addr, "serving");
    let expiry = spawn_expiry(state.clone());
    let result = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await;
    expiry.abort();
    result
}
