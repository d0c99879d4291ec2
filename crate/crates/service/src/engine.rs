//! Transport-independent service core: sessions, decision logs, pending
//! verdicts and the active model.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use kickscore_core::feedback::{FeedbackError, FeedbackLog, FinalRecord, JuryVerdict, VerdictBook, AUTO_FINAL_SECS};
use kickscore_core::jsonl::{JsonlAppender, JsonlError};
use kickscore_core::kinematics::WindowFeatures;
use kickscore_core::pipeline::{Emitted, MatchPipeline, OverlayFrame, PipelineError};
use kickscore_core::{Clock, ClassifierModel, DecisionPackage, FeedbackSample, FilterParams, PipelineConfig, PoseFrame};
use serde::Serialize;
use thiserror::Error;
use tracing::{debug, warn};

use crate::messages::JuryMessage;

pub const FINALS_LOG: &str = "finals.jsonl";
pub const FEEDBACK_LOG: &str = "feedback.jsonl";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Log(#[from] JsonlError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error("model rejected: {0}")]
    Model(String),
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Log(#[from] JsonlError),
}

impl IngestError {
    pub fn code(&self) -> &'static str {
        match self {
            IngestError::Malformed(_) => "malformed",
            IngestError::Pipeline(e) => e.code(),
            IngestError::Log(_) => "io",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub pipeline: PipelineConfig,
    pub filter: FilterParams,
    pub log_dir: PathBuf,
    pub auto_final_after: Duration,
}

impl EngineConfig {
    pub fn new(log_dir: impl Into<PathBuf>) -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            filter: FilterParams::default(),
            log_dir: log_dir.into(),
            auto_final_after: Duration::from_secs_f64(AUTO_FINAL_SECS),
        }
    }
}

/// Decision log file for a match; unsafe filename characters become `_`.
pub fn decision_log_path(dir: &Path, match_id: &str) -> PathBuf {
    let safe: String = match_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    dir.join(format!("decisions-{safe}.jsonl"))
}

struct Session {
    pipeline: MatchPipeline,
    log: JsonlAppender,
}

struct Pending {
    decision: DecisionPackage,
    features: WindowFeatures,
    frames: Vec<OverlayFrame>,
    emitted_at: Duration,
    seq: u64,
}

struct Jury {
    pending: HashMap<(String, String), Pending>,
    next_seq: u64,
    book: VerdictBook,
    finals: JsonlAppender,
    feedback: FeedbackLog,
}

/// Reply to a verdict submission.
#[derive(Debug, Clone, PartialEq)]
pub enum VerdictReply {
    Ack(FinalRecord),
    Nack { event: Option<String>, reason: &'static str, detail: String },
}

impl VerdictReply {
    pub fn to_message(&self) -> JuryMessage {
        match self {
            VerdictReply::Ack(record) => JuryMessage::Ack { record: record.clone() },
            VerdictReply::Nack { event, reason, detail } => JuryMessage::Nack {
                event: event.clone(),
                reason: reason.to_string(),
                detail: detail.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EngineStats {
    pub frames: u64,
    pub skipped: u64,
    pub decisions: u64,
    pub pending: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Health {
    pub status: &'static str,
    pub sessions: usize,
    pub model_version: u64,
}

pub struct Engine {
    cfg: EngineConfig,
    clock: Arc<dyn Clock>,
    model: RwLock<Arc<ClassifierModel>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    jury: Mutex<Jury>,
    frames: AtomicU64,
    skipped: AtomicU64,
    decisions: AtomicU64,
}

impl Engine {
    pub fn new(cfg: EngineConfig, model: ClassifierModel, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        model.check_shape().map_err(|e| ServiceError::Model(e.to_string()))?;
        let finals = JsonlAppender::open(cfg.log_dir.join(FINALS_LOG))?;
        let feedback = FeedbackLog::open(cfg.log_dir.join(FEEDBACK_LOG))?;
        Ok(Self {
            cfg,
            clock,
            model: RwLock::new(Arc::new(model)),
            sessions: Mutex::new(HashMap::new()),
            jury: Mutex::new(Jury {
                pending: HashMap::new(),
                next_seq: 0,
                book: VerdictBook::new(),
                finals,
                feedback,
            }),
            frames: AtomicU64::new(0),
            skipped: AtomicU64::new(0),
            decisions: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn model(&self) -> Arc<ClassifierModel> {
        self.model.read().expect("model lock").clone()
    }

    /// Replaces the active model; decisions already in flight keep the
    /// version they were made with.
    pub fn swap_model(&self, model: ClassifierModel) -> Result<u64, ServiceError> {
        model.check_shape().map_err(|e| ServiceError::Model(e.to_string()))?;
        let version = model.version;
        *self.model.write().expect("model lock") = Arc::new(model);
        Ok(version)
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok",
            sessions: self.sessions.lock().expect("sessions lock").len(),
            model_version: self.model().version,
        }
    }

    pub fn stats(&self) -> EngineStats {
        EngineStats {
            frames: self.frames.load(Ordering::Relaxed),
            skipped: self.skipped.load(Ordering::Relaxed),
            decisions: self.decisions.load(Ordering::Relaxed),
            pending: self.jury.lock().expect("jury lock").pending.len(),
        }
    }

    pub fn parse_frame(&self, line: &str) -> Result<PoseFrame, IngestError> {
        PoseFrame::from_json(line).map_err(|e| {
            self.skipped.fetch_add(1, Ordering::Relaxed);
            IngestError::Malformed(e.to_string())
        })
    }

    pub fn ingest_line(&self, line: &str) -> Result<Option<Emitted>, IngestError> {
        let frame = self.parse_frame(line)?;
        self.ingest_frame(frame)
    }

    fn session(&self, match_id: &str) -> Result<Arc<Mutex<Session>>, IngestError> {
        let mut sessions = self.sessions.lock().expect("sessions lock");
        if let Some(s) = sessions.get(match_id) {
            return Ok(s.clone());
        }
        let log = JsonlAppender::open(decision_log_path(&self.cfg.log_dir, match_id))?;
        let pipeline = MatchPipeline::new(match_id, self.cfg.pipeline.clone(), self.cfg.filter, self.clock.clone());
        let s = Arc::new(Mutex::new(Session { pipeline, log }));
        sessions.insert(match_id.to_string(), s.clone());
        Ok(s)
    }

    /// Runs one frame. A resulting decision is durably logged and entered
    /// as pending before this returns, so callers may broadcast it.
    pub fn ingest_frame(&self, frame: PoseFrame) -> Result<Option<Emitted>, IngestError> {
        self.frames.fetch_add(1, Ordering::Relaxed);
        let session = self.session(&frame.match_id)?;
        let mut session = session.lock().expect("session lock");
        let model = self.model();
        let emitted = match session.pipeline.process(frame, &model) {
            Ok(Some(e)) => e,
            Ok(None) => return Ok(None),
            Err(e) => {
                self.skipped.fetch_add(1, Ordering::Relaxed);
                return Err(e.into());
            }
        };
        session.log.append(&emitted.decision)?;
        self.decisions.fetch_add(1, Ordering::Relaxed);
        let key = (emitted.decision.match_id.clone(), emitted.decision.event_id.clone());
        let mut jury = self.jury.lock().expect("jury lock");
        let seq = jury.next_seq;
        jury.next_seq += 1;
        jury.pending.insert(
            key,
            Pending {
                decision: emitted.decision.clone(),
                features: emitted.window.features.clone(),
                frames: emitted.overlay(),
                emitted_at: self.clock.now(),
                seq,
            },
        );
        drop(jury);
        Ok(Some(emitted))
    }

    /// Decisions still awaiting a verdict, oldest first.
    pub fn pending_messages(&self) -> Vec<JuryMessage> {
        let jury = self.jury.lock().expect("jury lock");
        let mut items: Vec<_> = jury.pending.values().collect();
        items.sort_by_key(|p| p.seq);
        items
            .into_iter()
            .map(|p| JuryMessage::Decision {
                decision: p.decision.clone(),
                frames: p.frames.clone(),
            })
            .collect()
    }

    pub fn submit_verdict_json(&self, text: &str) -> Result<VerdictReply, ServiceError> {
        match JuryVerdict::from_json(text) {
            Ok(v) => self.submit_verdict(v),
            Err(e) => {
                let event = serde_json::from_str::<serde_json::Value>(text)
                    .ok()
                    .and_then(|v| v.get("event").and_then(|e| e.as_str()).map(str::to_string));
                Ok(VerdictReply::Nack {
                    event,
                    reason: e.code(),
                    detail: e.to_string(),
                })
            }
        }
    }

    pub fn submit_verdict(&self, mut verdict: JuryVerdict) -> Result<VerdictReply, ServiceError> {
        let nack = |reason: &'static str, detail: String| {
            Ok(VerdictReply::Nack {
                event: Some(verdict.event_id.clone()),
                reason,
                detail,
            })
        };
        let mut jury = self.jury.lock().expect("jury lock");
        let key = match &verdict.match_id {
            Some(m) => (m.clone(), verdict.event_id.clone()),
            None => {
                let mut hits = jury.pending.keys().filter(|(_, e)| *e == verdict.event_id);
                match (hits.next(), hits.next()) {
                    (Some(k), None) => k.clone(),
                    (Some(_), Some(_)) => return nack("ambiguous_event", "event id is live in several matches; add \"match\"".into()),
                    (None, _) => {
                        let resolved = self.sessions.lock().expect("sessions lock").keys().any(|m| jury.book.is_resolved(m, &verdict.event_id));
                        return if resolved {
                            nack("already_resolved", format!("{} is final", verdict.event_id))
                        } else {
                            nack("unknown_event", format!("no pending decision {}", verdict.event_id))
                        };
                    }
                }
            }
        };
        let Some(pending) = jury.pending.get(&key) else {
            return if jury.book.is_resolved(&key.0, &key.1) {
                nack("already_resolved", format!("{} is final", key.1))
            } else {
                nack("unknown_event", format!("no pending decision {}", key.1))
            };
        };
        verdict.elapsed_ms = Some((self.clock.now().saturating_sub(pending.emitted_at)).as_secs_f64() * 1e3);
        let decision = pending.decision.clone();
        let record = match jury.book.resolve(&decision, &verdict) {
            Ok(r) => r,
            Err(e) => return nack(e.code(), e.to_string()),
        };
        let pending = jury.pending.remove(&key).expect("present above");
        jury.finals.append(&record)?;
        let sample = FeedbackSample::from_final(&pending.decision, pending.features, &record);
        jury.feedback.append(&sample)?;
        debug!(event = %record.event_id, source = ?record.source, "verdict resolved");
        Ok(VerdictReply::Ack(record))
    }

    /// Finalizes every decision older than the verdict window.
    pub fn expire_pending(&self) -> Result<Vec<FinalRecord>, ServiceError> {
        let now = self.clock.now();
        let mut jury = self.jury.lock().expect("jury lock");
        let mut due: Vec<_> = jury
            .pending
            .iter()
            .filter(|(_, p)| now.saturating_sub(p.emitted_at) >= self.cfg.auto_final_after)
            .map(|(k, p)| (p.seq, k.clone()))
            .collect();
        due.sort();
        let mut out = Vec::with_capacity(due.len());
        for (_, key) in due {
            let pending = jury.pending.remove(&key).expect("listed above");
            match jury.book.auto_finalize(&pending.decision) {
                Ok(record) => {
                    jury.finals.append(&record)?;
                    out.push(record);
                }
                Err(e) => warn!(event = %key.1, error = %e, "auto-final skipped"),
            }
        }
        Ok(out)
    }
}
