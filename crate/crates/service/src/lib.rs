//! Live service around the officiating pipeline: websocket ingest, jury
//! console fan-out, verdict handling and durable logs.

pub mod engine;
pub mod messages;
pub mod replay;
pub mod server;

pub use engine::{decision_log_path, Engine, EngineConfig, EngineStats, Health, IngestError, ServiceError, VerdictReply};
pub use messages::{IngestNotice, JuryMessage};
pub use replay::{replay, Pacing, ReplayStats};
pub use server::{router, serve, AppState};
