use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use kickscore_core::simulator::{generate_match, SimConfig};
use kickscore_core::{ClassifierModel, MonotonicClock};
use kickscore_service::{AppState, Engine, EngineConfig, IngestNotice, JuryMessage};
use serde_json::Value;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<TcpStream>>;

async fn start(dir: &std::path::Path) -> std::net::SocketAddr {
    let engine = Engine::new(EngineConfig::new(dir), ClassifierModel::rule_based(), Arc::new(MonotonicClock::new())).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(kickscore_service::serve(listener, AppState::new(engine), std::future::pending()));
    addr
}

async fn connect(addr: std::net::SocketAddr, path: &str) -> Ws {
    tokio_tungstenite::connect_async(format!("ws://{addr}{path}")).await.unwrap().0
}

async fn next_text(ws: &mut Ws) -> String {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.expect("timed out").unwrap().unwrap();
        if let Message::Text(t) = msg {
            return t.to_string();
        }
    }
}

fn frames(seed: u64, events: usize) -> Vec<String> {
    let cfg = SimConfig { seed, n_events: events, event_mix: [0.0, 0.5, 0.5], ..SimConfig::default() };
    generate_match(&cfg).unwrap().frames.iter().map(|f| f.to_json()).collect()
}

async fn health(addr: std::net::SocketAddr) -> Value {
    let mut s = TcpStream::connect(addr).await.unwrap();
    s.write_all(b"GET /health HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).await.unwrap();
    let body = buf.split("\r\n\r\n").nth(1).unwrap();
    serde_json::from_str(body.trim()).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn ingest_to_console_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let addr = start(dir.path()).await;
    let mut jury = connect(addr, "/jury").await;
    let mut ingest = connect(addr, "/ingest").await;

    let lines = frames(1, 1);
    ingest.send(Message::text("garbage")).await.unwrap();
    let notice: IngestNotice = serde_json::from_str(&next_text(&mut ingest).await).unwrap();
    assert!(matches!(notice, IngestNotice::Skipped { ref reason, .. } if reason == "malformed"));

    for chunk in lines.chunks(50) {
        ingest.send(Message::text(chunk.join("\n"))).await.unwrap();
    }
    let msg: JuryMessage = serde_json::from_str(&next_text(&mut jury).await).unwrap();
    let JuryMessage::Decision { decision, frames } = msg else { panic!("{msg:?}") };
    assert_eq!(decision.event_id, "E1");
    assert_eq!(frames.len(), 30);

    let h = health(addr).await;
    assert_eq!(h["status"], "ok");
    assert_eq!(h["sessions"], 1);
    assert_eq!(h["model_version"], 0);

    jury.send(Message::text(r#"{"event":"E1","verdict":"confirm","juror":"j1","t":3.0}"#)).await.unwrap();
    let mut kinds = Vec::new();
    for _ in 0..2 {
        let v: Value = serde_json::from_str(&next_text(&mut jury).await).unwrap();
        kinds.push(v["type"].as_str().unwrap().to_string());
        assert_eq!(v["record"]["source"], "confirm");
    }
    kinds.sort();
    assert_eq!(kinds, ["ack", "final"]);

    jury.send(Message::text(r#"{"event":"E1","verdict":"confirm","juror":"j2","t":3.5}"#)).await.unwrap();
    let v: Value = serde_json::from_str(&next_text(&mut jury).await).unwrap();
    assert_eq!(v["type"], "nack");
    assert_eq!(v["event"], "E1");
    assert_eq!(v["reason"], "already_resolved");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn one_connection_per_athlete_stream() {
    let dir = tempfile::tempdir().unwrap();
    let addr = start(dir.path()).await;
    let lines = frames(2, 1);
    let mut first = connect(addr, "/ingest").await;
    first.send(Message::text(lines[0].clone())).await.unwrap();
    // Round-trip a bad line so the first frame is known to be processed.
    first.send(Message::text("x")).await.unwrap();
    next_text(&mut first).await;

    let mut second = connect(addr, "/ingest").await;
    second.send(Message::text(lines[2].clone())).await.unwrap();
    let notice: IngestNotice = serde_json::from_str(&next_text(&mut second).await).unwrap();
    assert_eq!(notice, IngestNotice::StreamBusy { match_id: "M1".into(), athlete: "blue".into() });

    first.close(None).await.unwrap();
    tokio::time::sleep(Duration::from_millis(200)).await;
    second.send(Message::text(lines[2].clone())).await.unwrap();
    second.send(Message::text("x")).await.unwrap();
    let notice: IngestNotice = serde_json::from_str(&next_text(&mut second).await).unwrap();
    assert!(matches!(notice, IngestNotice::Skipped { .. }), "{notice:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn late_console_sees_pending_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let addr = start(dir.path()).await;
    let mut ingest = connect(addr, "/ingest").await;
    for chunk in frames(3, 1).chunks(100) {
        ingest.send(Message::text(chunk.join("\n"))).await.unwrap();
    }
    ingest.send(Message::text("x")).await.unwrap();
    next_text(&mut ingest).await;
    let mut jury = connect(addr, "/jury").await;
    let v: Value = serde_json::from_str(&next_text(&mut jury).await).unwrap();
    assert_eq!(v["type"], "decision");
    assert_eq!(v["decision"]["event"], "E1");
}
