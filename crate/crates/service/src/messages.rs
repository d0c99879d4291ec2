//! Messages pushed to jury consoles and ingest clients.

use kickscore_core::feedback::FinalRecord;
use kickscore_core::pipeline::{Emitted, OverlayFrame};
use kickscore_core::DecisionPackage;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JuryMessage {
    /// A new decision with the window's smoothed skeleton for playback.
    Decision {
        decision: DecisionPackage,
        frames: Vec<OverlayFrame>,
    },
    /// A decision became final (verdict or timeout).
    Final { record: FinalRecord },
    Ack { record: FinalRecord },
    Nack {
        event: Option<String>,
        reason: String,
        detail: String,
    },
}

impl JuryMessage {
    pub fn decision(e: &Emitted) -> Self {
        JuryMessage::Decision {
            decision: e.decision.clone(),
            frames: e.overlay(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

/// Feedback to an ingest client about a line it sent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum IngestNotice {
    Skipped { reason: String, detail: String },
    StreamBusy { match_id: String, athlete: String },
}

impl IngestNotice {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("notice serializes")
    }
}
