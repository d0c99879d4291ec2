//! Contact verification, point assignment and decision packaging.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionWindow, ClassProbabilities};
use crate::kinematics::{deceleration, foot_bbox, head_bbox, iou};
use crate::model::{ActionClass, LatencyBreakdown, PipelineConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImpactError {
    #[error("incomplete_timing: missing {0} stage timer")]
    IncompleteTiming(&'static str),
}

impl ImpactError {
    pub fn code(&self) -> &'static str {
        "incomplete_timing"
    }
}

/// Annotations carried on decisions and final records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    BudgetExceeded,
    RotationPromoted,
    NoImpact,
    HeadUnresolved,
    Padded,
    AutoFinal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactEvidence {
    #[serde(rename = "decel")]
    pub decel_m_s2: f64,
    #[serde(rename = "iou")]
    pub iou_value: f64,
    #[serde(rename = "t_impact")]
    pub impact_frame_t: f64,
    #[serde(rename = "rot_deg")]
    pub rotation_deg: f64,
    #[serde(rename = "impact")]
    pub impact_detected: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub head_unresolved: bool,
}

impl ImpactEvidence {
    /// Evidence with `impact_detected` derived from the two gates.
    pub fn new(decel_m_s2: f64, iou_value: f64, impact_frame_t: f64, rotation_deg: f64, config: &PipelineConfig) -> Self {
        Self {
            decel_m_s2,
            iou_value,
            impact_frame_t,
            rotation_deg,
            impact_detected: impact_gate(decel_m_s2, iou_value, config),
            head_unresolved: false,
        }
    }
}

pub fn impact_gate(decel_m_s2: f64, iou_value: f64, config: &PipelineConfig) -> bool {
    decel_m_s2 > config.a_threshold && iou_value > config.iou_threshold
}

/// Scans the kicking ankle for its sharpest slowdown (over 1..=`decel_max_span`
/// frame steps) and tests foot/head overlap at that frame.
pub fn detect_impact(window: &ActionWindow, config: &PipelineConfig) -> ImpactEvidence {
    let speeds = &window.features.ankle_speed_series;
    let frames = &window.frames;
    let n = speeds.len().min(frames.len());

    let mut best: Option<(f64, usize)> = None;
    for i in 2..n {
        for span in 1..=config.decel_max_span.min(i - 1) {
            let dt = frames[i].t() - frames[i - span].t();
            let Ok(a) = deceleration(speeds[i - span], speeds[i], dt) else {
                continue;
            };
            if best.is_none_or(|(b, _)| a > b) {
                best = Some((a, i));
            }
        }
    }
    let (decel, at) = best.unwrap_or((0.0, n.saturating_sub(1)));

    let frame = &frames[at];
    let side = window.features.kicking_side;
    let foot = foot_bbox(frame.pose.joint(side.ankle()), config);
    let head = head_bbox(frame.opponent_head, config);
    let rotation = window.features.torso_rotation_deg;
    match (foot, head) {
        (Ok(f), Ok(h)) => ImpactEvidence::new(decel, iou(&f, &h), frame.t(), rotation, config),
        (_, head) => ImpactEvidence {
            decel_m_s2: decel,
            iou_value: 0.0,
            impact_frame_t: frame.t(),
            rotation_deg: rotation,
            impact_detected: false,
            head_unresolved: head.is_err(),
        },
    }
}

/// Result of the scoring table, after any rotation promotion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scored {
    pub action: ActionClass,
    pub points: u8,
    pub promoted: bool,
}

pub fn assign_score(action: ActionClass, evidence: &ImpactEvidence, config: &PipelineConfig) -> Scored {
    let promoted = action == ActionClass::StandardHeadKick && evidence.rotation_deg > config.rotation_turning_deg;
    let action = if promoted { ActionClass::TurningHeadKick } else { action };
    let points = if evidence.impact_detected { action.points_on_impact() } else { 0 };
    Scored { action, points, promoted }
}

/// Stage timings booked for one event; all three are required.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimers {
    /// Tracking plus feature extraction.
    pub pose_ms: Option<f64>,
    pub class_ms: Option<f64>,
    pub impact_ms: Option<f64>,
}

impl StageTimers {
    pub fn new(pose_ms: f64, class_ms: f64, impact_ms: f64) -> Self {
        Self {
            pose_ms: Some(pose_ms),
            class_ms: Some(class_ms),
            impact_ms: Some(impact_ms),
        }
    }

    pub fn breakdown(&self) -> Result<LatencyBreakdown, ImpactError> {
        Ok(LatencyBreakdown::from_stages(
            self.pose_ms.ok_or(ImpactError::IncompleteTiming("pose"))?,
            self.class_ms.ok_or(ImpactError::IncompleteTiming("class"))?,
            self.impact_ms.ok_or(ImpactError::IncompleteTiming("impact"))?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRef {
    pub id: String,
    pub t_start: f64,
    pub t_end: f64,
    #[serde(default)]
    pub padded: bool,
}

/// The unit of officiating output shown to the jury and logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPackage {
    #[serde(rename = "event")]
    pub event_id: String,
    #[serde(rename = "match")]
    pub match_id: String,
    pub athlete: String,
    #[serde(rename = "class")]
    pub action_class: ActionClass,
    pub score: u8,
    #[serde(rename = "conf")]
    pub confidence: f64,
    /// Classifier output before any rotation promotion.
    pub predicted: ActionClass,
    pub probs: [f64; 3],
    pub evidence: ImpactEvidence,
    pub window: WindowRef,
    pub latency_ms: LatencyBreakdown,
    pub model_version: u64,
    pub flags: Vec<Flag>,
}

impl DecisionPackage {
    pub fn has_flag(&self, flag: Flag) -> bool {
        self.flags.contains(&flag)
    }

    /// Checks the score table against class and evidence.
    pub fn score_consistent(&self) -> bool {
        let expected = if self.evidence.impact_detected {
            self.action_class.points_on_impact()
        } else {
            0
        };
        self.score == expected
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("decision serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

pub fn build_decision(
    window: &ActionWindow,
    probs: &ClassProbabilities,
    evidence: &ImpactEvidence,
    timers: &StageTimers,
    config: &PipelineConfig,
    model_version: u64,
) -> Result<DecisionPackage, ImpactError> {
    let latency = timers.breakdown()?;
    let scored = assign_score(probs.predicted, evidence, config);
    let mut flags = Vec::new();
    if latency.t_total_ms > config.latency_budget_ms {
        flags.push(Flag::BudgetExceeded);
    }
    if scored.promoted {
        flags.push(Flag::RotationPromoted);
    }
    if scored.action.is_kick() && !evidence.impact_detected {
        flags.push(Flag::NoImpact);
    }
    if evidence.head_unresolved {
        flags.push(Flag::HeadUnresolved);
    }
    if window.padded {
        flags.push(Flag::Padded);
    }
    Ok(DecisionPackage {
        event_id: window.event_id.clone(),
        match_id: window.match_id.clone(),
        athlete: window.athlete_id.clone(),
        action_class: scored.action,
        score: scored.points,
        confidence: probs.confidence,
        predicted: probs.predicted,
        probs: probs.p,
        evidence: *evidence,
        window: WindowRef {
            id: window.event_id.clone(),
            t_start: window.t_start,
            t_end: window.t_end,
            padded: window.padded,
        },
        latency_ms: latency,
        model_version,
        flags,
    })
}
