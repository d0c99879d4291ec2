//! Jury verdicts, final decisions, feedback samples and retraining.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::action::{softmax, ActionError, ClassProbabilities, ClassifierModel, ModelKind};
use crate::impact::{DecisionPackage, Flag};
use crate::jsonl::{self, JsonlAppender, JsonlError};
use crate::kinematics::WindowFeatures;
use crate::model::{ActionClass, PipelineConfig};

/// Probability floor inside the log term of the feedback loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Seconds after emission at which an unanswered decision becomes final.
pub const AUTO_FINAL_SECS: f64 = 30.0;

#[derive(Debug, Error)]
pub enum FeedbackError {
    #[error("verdict_event_mismatch: verdict for {verdict} applied to {decision}")]
    VerdictEventMismatch { verdict: String, decision: String },
    #[error("already_resolved: {0}")]
    AlreadyResolved(String),
    #[error("inconsistent_override: {class} cannot score {score}")]
    InconsistentOverride { class: ActionClass, score: u8 },
    #[error("invalid_verdict: {0}")]
    InvalidVerdict(String),
    #[error("no_feedback: feedback log is empty")]
    NoFeedback,
    #[error("invalid_sample: {0}")]
    InvalidSample(String),
    #[error("length_mismatch: {0} decisions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ActionError),
    #[error(transparent)]
    Log(#[from] JsonlError),
}

impl FeedbackError {
    pub fn code(&self) -> &'static str {
        match self {
            FeedbackError::VerdictEventMismatch { .. } => "verdict_event_mismatch",
            FeedbackError::AlreadyResolved(_) => "already_resolved",
            FeedbackError::InconsistentOverride { .. } => "inconsistent_override",
            FeedbackError::InvalidVerdict(_) => "invalid_verdict",
            FeedbackError::NoFeedback => "no_feedback",
            FeedbackError::InvalidSample(_) => "invalid_sample",
            FeedbackError::LengthMismatch(..) => "length_mismatch",
            FeedbackError::Model(e) => e.code(),
            FeedbackError::Log(_) => "io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Confirm,
    Override,
}

/// Juror input, as received on the console channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JuryVerdict {
    #[serde(rename = "event")]
    pub event_id: String,
    /// Disambiguates event ids when several matches are live.
    #[serde(rename = "match", default, skip_serializing_if = "Option::is_none")]
    pub match_id: Option<String>,
    pub verdict: Verdict,
    #[serde(rename = "class", default, skip_serializing_if = "Option::is_none")]
    pub corrected_class: Option<ActionClass>,
    #[serde(rename = "score", default, skip_serializing_if = "Option::is_none")]
    pub corrected_score: Option<u8>,
    #[serde(rename = "juror")]
    pub juror_id: String,
    #[serde(rename = "t")]
    pub t_verdict: f64,
    /// Filled in by the server from the decision's emission time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

impl JuryVerdict {
    pub fn confirm(event_id: &str, juror: &str, t: f64) -> Self {
        Self {
            event_id: event_id.into(),
            match_id: None,
            verdict: Verdict::Confirm,
            corrected_class: None,
            corrected_score: None,
            juror_id: juror.into(),
            t_verdict: t,
            elapsed_ms: None,
        }
    }

    pub fn override_to(event_id: &str, class: ActionClass, score: u8, juror: &str, t: f64) -> Self {
        Self {
            verdict: Verdict::Override,
            corrected_class: Some(class),
            corrected_score: Some(score),
            ..Self::confirm(event_id, juror, t)
        }
    }

    pub fn from_json(s: &str) -> Result<Self, FeedbackError> {
        let v: Self = serde_json::from_str(s).map_err(|e| FeedbackError::InvalidVerdict(e.to_string()))?;
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), FeedbackError> {
        match (self.verdict, self.corrected_class, self.corrected_score) {
            (Verdict::Confirm, None, None) => Ok(()),
            (Verdict::Confirm, ..) => Err(FeedbackError::InvalidVerdict("confirm carries no correction".into())),
            (Verdict::Override, Some(class), Some(score)) => {
                if class.admits_score(score) {
                    Ok(())
                } else {
                    Err(FeedbackError::InconsistentOverride { class, score })
                }
            }
            (Verdict::Override, ..) => Err(FeedbackError::InvalidVerdict("override needs class and score".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalSource {
    Confirm,
    Override,
    AutoFinal,
}

/// Jury minus AI, in class ordinals and points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeedbackSignal {
    pub class_delta: i32,
    pub score_delta: i32,
}

impl FeedbackSignal {
    pub fn between(ai: (ActionClass, u8), jury: (ActionClass, u8)) -> Self {
        Self {
            class_delta: jury.0.ordinal() as i32 - ai.0.ordinal() as i32,
            score_delta: jury.1 as i32 - ai.1 as i32,
        }
    }

    pub fn is_agreement(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    #[serde(rename = "event")]
    pub event_id: String,
    #[serde(rename = "match")]
    pub match_id: String,
    pub athlete: String,
    #[serde(rename = "class")]
    pub final_class: ActionClass,
    #[serde(rename = "score")]
    pub final_score: u8,
    pub source: FinalSource,
    pub ai_class: ActionClass,
    pub ai_score: u8,
    pub feedback: FeedbackSignal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub juror: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
    pub model_version: u64,
    pub flags: Vec<Flag>,
}

fn final_from(decision: &DecisionPackage, class: ActionClass, score: u8, source: FinalSource) -> FinalRecord {
    let mut flags = decision.flags.clone();
    if source == FinalSource::AutoFinal {
        flags.push(Flag::AutoFinal);
    }
    FinalRecord {
        event_id: decision.event_id.clone(),
        match_id: decision.match_id.clone(),
        athlete: decision.athlete.clone(),
        final_class: class,
        final_score: score,
        source,
        ai_class: decision.action_class,
        ai_score: decision.score,
        feedback: FeedbackSignal::between((decision.action_class, decision.score), (class, score)),
        juror: None,
        elapsed_ms: None,
        model_version: decision.model_version,
        flags,
    }
}

/// Combines an AI decision with a jury verdict.
pub fn resolve_final(decision: &DecisionPackage, verdict: &JuryVerdict) -> Result<FinalRecord, FeedbackError> {
    let match_ok = verdict.match_id.as_ref().is_none_or(|m| *m == decision.match_id);
    if verdict.event_id != decision.event_id || !match_ok {
        return Err(FeedbackError::VerdictEventMismatch {
            verdict: verdict.event_id.clone(),
            decision: decision.event_id.clone(),
        });
    }
    verdict.validate()?;
    let mut record = match verdict.verdict {
        Verdict::Confirm => final_from(decision, decision.action_class, decision.score, FinalSource::Confirm),
        Verdict::Override => final_from(
            decision,
            verdict.corrected_class.expect("validated"),
            verdict.corrected_score.expect("validated"),
            FinalSource::Override,
        ),
    };
    record.juror = Some(verdict.juror_id.clone());
    record.elapsed_ms = verdict.elapsed_ms;
    Ok(record)
}

/// The AI decision standing on its own after the verdict window lapsed.
pub fn auto_final(decision: &DecisionPackage) -> FinalRecord {
    final_from(decision, decision.action_class, decision.score, FinalSource::AutoFinal)
}

/// Final records keyed by (match, event); a second resolution is refused.
#[derive(Debug, Default, Clone)]
pub struct VerdictBook {
    finals: HashMap<(String, String), FinalRecord>,
}

impl VerdictBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, match_id: &str, event_id: &str) -> Option<&FinalRecord> {
        self.finals.get(&(match_id.to_string(), event_id.to_string()))
    }

    pub fn is_resolved(&self, match_id: &str, event_id: &str) -> bool {
        self.get(match_id, event_id).is_some()
    }

    pub fn resolve(&mut self, decision: &DecisionPackage, verdict: &JuryVerdict) -> Result<FinalRecord, FeedbackError> {
        if self.is_resolved(&decision.match_id, &decision.event_id) {
            return Err(FeedbackError::AlreadyResolved(decision.event_id.clone()));
        }
        let record = resolve_final(decision, verdict)?;
        self.insert(record.clone());
        Ok(record)
    }

    pub fn auto_finalize(&mut self, decision: &DecisionPackage) -> Result<FinalRecord, FeedbackError> {
        if self.is_resolved(&decision.match_id, &decision.event_id) {
            return Err(FeedbackError::AlreadyResolved(decision.event_id.clone()));
        }
        let record = auto_final(decision);
        self.insert(record.clone());
        Ok(record)
    }

    fn insert(&mut self, record: FinalRecord) {
        self.finals.insert((record.match_id.clone(), record.event_id.clone()), record);
    }

    pub fn len(&self) -> usize {
        self.finals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.finals.is_empty()
    }
}

/// One (X, y_ai, y_jury) training triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSample {
    #[serde(rename = "event")]
    pub event_id: String,
    pub model_version: u64,
    pub features: WindowFeatures,
    pub y_ai: ActionClass,
    pub p_ai: [f64; 3],
    pub y_jury: ActionClass,
    pub p_jury: [f64; 3],
}

impl FeedbackSample {
    pub fn new(event_id: &str, model_version: u64, features: WindowFeatures, p_ai: [f64; 3], y_jury: ActionClass) -> Self {
        Self {
            event_id: event_id.into(),
            model_version,
            features,
            y_ai: ClassProbabilities::from_probs(p_ai).predicted,
            p_ai,
            y_jury,
            p_jury: ClassProbabilities::one_hot(y_jury).p,
        }
    }

    /// Sample for a decision and its final record. `y_ai` is the classifier
    /// output, before any rotation promotion.
    pub fn from_final(decision: &DecisionPackage, features: WindowFeatures, record: &FinalRecord) -> Self {
        Self {
            y_ai: decision.predicted,
            ..Self::new(&decision.event_id, decision.model_version, features, decision.probs, record.final_class)
        }
    }

    pub fn validate(&self) -> Result<(), FeedbackError> {
        let ai = ClassProbabilities::from_probs(self.p_ai);
        if !ai.is_valid_simplex() {
            return Err(FeedbackError::InvalidSample(format!("p_ai {:?} is not a distribution", self.p_ai)));
        }
        if self.p_jury != ClassProbabilities::one_hot(self.y_jury).p {
            return Err(FeedbackError::InvalidSample("p_jury must be one-hot on y_jury".into()));
        }
        if !self.features.is_finite() {
            return Err(FeedbackError::InvalidSample("non-finite features".into()));
        }
        Ok(())
    }
}

/// Classification plus calibration loss for a single prediction.
pub fn feedback_loss_probs(p_ai: &[f64; 3], y_jury: ActionClass, lambda_cross: f64, lambda_conf: f64) -> f64 {
    let p_y = p_ai[y_jury.ordinal()];
    if p_y < PROB_FLOOR {
        debug!(p_y, "clamped");
    }
    let ce = -p_y.max(PROB_FLOOR).ln();
    let p_max = p_ai.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let calib = (p_max - 1.0).powi(2);
    lambda_cross * ce + lambda_conf * calib
}

pub fn feedback_loss(sample: &FeedbackSample, lambda_cross: f64, lambda_conf: f64) -> f64 {
    feedback_loss_probs(&sample.p_ai, sample.y_jury, lambda_cross, lambda_conf)
}

/// Loss and its gradient with respect to the logits behind `p`.
fn feedback_objective(p: &[f64; 3], y: ActionClass, lambda_cross: f64, lambda_conf: f64) -> (f64, [f64; 3]) {
    let loss = feedback_loss_probs(p, y, lambda_cross, lambda_conf);
    let m = ClassProbabilities::from_probs(*p).predicted.ordinal();
    let mut grad = [0.0; 3];
    for (j, g) in grad.iter_mut().enumerate() {
        let onehot = if j == y.ordinal() { 1.0 } else { 0.0 };
        let dpm = p[m] * (if j == m { 1.0 } else { 0.0 } - p[j]);
        *g = lambda_cross * (p[j] - onehot) + lambda_conf * 2.0 * (p[m] - 1.0) * dpm;
    }
    (loss, grad)
}

/// Gradient descent on the mean feedback loss, starting from `model`'s
/// weights and keeping its standardization. Returns the new model
/// (version + 1) and the loss trajectory.
pub fn retrain(
    model: &ClassifierModel,
    samples: &[FeedbackSample],
    epochs: usize,
    learning_rate: f64,
    lambda_cross: f64,
    lambda_conf: f64,
) -> Result<(ClassifierModel, Vec<f64>), FeedbackError> {
    if model.kind != ModelKind::Linear {
        return Err(ActionError::NotLinear.into());
    }
    model.check_shape()?;
    if samples.is_empty() {
        return Err(FeedbackError::NoFeedback);
    }
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(ActionError::InvalidTraining("learning rate must be > 0".into()).into());
    }
    for s in samples {
        s.validate()?;
    }
    let inputs: Vec<_> = samples.iter().map(|s| model.standardize(&s.features.summary())).collect();
    let labels: Vec<_> = samples.iter().map(|s| s.y_jury).collect();
    let objective = |i: usize, p: &[f64; 3]| feedback_objective(p, labels[i], lambda_cross, lambda_conf);
    let mut w = model.weight_array();
    let losses = crate::action::gradient_descent(&mut w, &inputs, &objective, epochs, learning_rate);
    let mut next = model.clone();
    next.version = model.version + 1;
    next.weights = w.iter().map(|r| r.to_vec()).collect();
    Ok((next, losses))
}

/// `retrain` with loss weights from the pipeline config.
pub fn retrain_with_config(
    model: &ClassifierModel,
    samples: &[FeedbackSample],
    epochs: usize,
    learning_rate: f64,
    config: &PipelineConfig,
) -> Result<(ClassifierModel, Vec<f64>), FeedbackError> {
    retrain(model, samples, epochs, learning_rate, config.lambda_cross, config.lambda_conf)
}

/// Mean feedback loss of `model` over `samples`, re-evaluated with current weights.
pub fn mean_model_loss(model: &ClassifierModel, samples: &[FeedbackSample], lambda_cross: f64, lambda_conf: f64) -> Result<f64, FeedbackError> {
    if samples.is_empty() {
        return Err(FeedbackError::NoFeedback);
    }
    model.check_shape()?;
    let w = model.weight_array();
    let total: f64 = samples
        .iter()
        .map(|s| {
            let x = model.standardize(&s.features.summary());
            let z = w.map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum());
            feedback_loss_probs(&softmax(z), s.y_jury, lambda_cross, lambda_conf)
        })
        .sum();
    Ok(total / samples.len() as f64)
}

/// Fraction of non-kick truth events that were awarded points.
pub fn fp_rate(scores: &[u8], truth: &[ActionClass]) -> Result<f64, FeedbackError> {
    if scores.len() != truth.len() {
        return Err(FeedbackError::LengthMismatch(scores.len(), truth.len()));
    }
    let (mut slides, mut scored) = (0usize, 0usize);
    for (score, class) in scores.iter().zip(truth) {
        if !class.is_kick() {
            slides += 1;
            if *score > 0 {
                scored += 1;
            }
        }
    }
    Ok(if slides == 0 { 0.0 } else { scored as f64 / slides as f64 })
}

/// Append-only store of feedback samples.
#[derive(Debug)]
pub struct FeedbackLog {
    out: JsonlAppender,
}

impl FeedbackLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, FeedbackError> {
        Ok(Self {
            out: JsonlAppender::open(path)?,
        })
    }

    pub fn append(&mut self, sample: &FeedbackSample) -> Result<(), FeedbackError> {
        self.out.append(sample)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vec<FeedbackSample>, FeedbackError> {
        Ok(jsonl::read_all(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impact::{ImpactEvidence, WindowRef};
    use crate::model::{LatencyBreakdown, Side};
    use proptest::prelude::*;

    fn decision(class: ActionClass, score: u8) -> DecisionPackage {
        DecisionPackage {
            event_id: "E17".into(),
            match_id: "M1".into(),
            athlete: "blue".into(),
            action_class: class,
            score,
            confidence: 0.9,
            predicted: class,
            probs: ClassProbabilities::one_hot(class).p,
            evidence: ImpactEvidence {
                decel_m_s2: 106.1,
                iou_value: 0.36,
                impact_frame_t: 10.0,
                rotation_deg: 156.0,
                impact_detected: score > 0,
                head_unresolved: false,
            },
            window: WindowRef {
                id: "E17".into(),
                t_start: 9.5,
                t_end: 10.0,
                padded: false,
            },
            latency_ms: LatencyBreakdown::from_stages(9.0, 43.0, 8.0),
            model_version: 3,
            flags: vec![],
        }
    }

    fn features(speed: f64) -> WindowFeatures {
        WindowFeatures {
            knee_angle_deg_series: vec![150.0; 30],
            ankle_speed_series: vec![speed; 30],
            peak_ankle_speed: speed,
            peak_knee_angle_deg: 160.0,
            torso_rotation_deg: 10.0,
            mean_torso_angular_velocity_deg_s: 20.0,
            ankle_head_dy_min: 0.0,
            ankle_head_dx_min: 0.03,
            kicking_side: Side::Right,
        }
    }

    #[test]
    fn worked_loss_value() {
        // Independent scalar oracle: -ln 0.8 + 0.5 * 0.04.
        let oracle = -(0.8f64).ln() + 0.5 * (0.8f64 - 1.0).powi(2);
        assert!((oracle - 0.2431).abs() < 1e-4);
        let got = feedback_loss_probs(&[0.1, 0.8, 0.1], ActionClass::StandardHeadKick, 1.0, 0.5);
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.2431).abs() < 1e-4);
    }

    #[test]
    fn loss_edge_cases() {
        assert_eq!(feedback_loss_probs(&[0.0, 1.0, 0.0], ActionClass::StandardHeadKick, 3.0, 2.0), 0.0);
        assert_eq!(feedback_loss_probs(&[0.2, 0.3, 0.5], ActionClass::Slide, 0.0, 0.0), 0.0);
        let clamped = feedback_loss_probs(&[0.0, 1.0, 0.0], ActionClass::Slide, 1.0, 0.0);
        assert!((clamped - 12.0 * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn confirm_and_override() {
        let d = decision(ActionClass::TurningHeadKick, 5);
        let f = resolve_final(&d, &JuryVerdict::confirm("E17", "J1", 1.0)).unwrap();
        assert_eq!((f.final_class, f.final_score, f.source), (ActionClass::TurningHeadKick, 5, FinalSource::Confirm));
        assert!(f.feedback.is_agreement());

        let f = resolve_final(&d, &JuryVerdict::override_to("E17", ActionClass::Slide, 0, "J2", 812.4)).unwrap();
        assert_eq!((f.final_class, f.final_score), (ActionClass::Slide, 0));
        assert_eq!(f.feedback, FeedbackSignal { class_delta: -2, score_delta: -5 });
        assert_eq!(f.juror.as_deref(), Some("J2"));

        let err = resolve_final(&d, &JuryVerdict::override_to("E17", ActionClass::StandardHeadKick, 5, "J2", 1.0)).unwrap_err();
        assert_eq!(err.code(), "inconsistent_override");
        let err = resolve_final(&d, &JuryVerdict::confirm("E18", "J1", 1.0)).unwrap_err();
        assert_eq!(err.code(), "verdict_event_mismatch");
        let mut other_match = JuryVerdict::confirm("E17", "J1", 1.0);
        other_match.match_id = Some("M2".into());
        assert_eq!(resolve_final(&d, &other_match).unwrap_err().code(), "verdict_event_mismatch");
    }

    #[test]
    fn second_verdict_is_refused_and_first_stands() {
        let d = decision(ActionClass::TurningHeadKick, 5);
        let mut book = VerdictBook::new();
        let first = book.resolve(&d, &JuryVerdict::confirm("E17", "J1", 1.0)).unwrap();
        let err = book
            .resolve(&d, &JuryVerdict::override_to("E17", ActionClass::Slide, 0, "J2", 2.0))
            .unwrap_err();
        assert_eq!(err.code(), "already_resolved");
        assert_eq!(book.get("M1", "E17"), Some(&first));
        assert_eq!(book.auto_finalize(&d).unwrap_err().code(), "already_resolved");
    }

    #[test]
    fn auto_final_keeps_ai_decision() {
        let d = decision(ActionClass::StandardHeadKick, 3);
        let f = auto_final(&d);
        assert_eq!((f.final_class, f.final_score, f.source), (ActionClass::StandardHeadKick, 3, FinalSource::AutoFinal));
        assert!(f.flags.contains(&Flag::AutoFinal));
    }

    #[test]
    fn verdict_wire_format() {
        let v = JuryVerdict::from_json(r#"{"event":"E17","verdict":"override","class":"slide","score":0,"juror":"J2","t":812.4}"#).unwrap();
        assert_eq!(v, JuryVerdict::override_to("E17", ActionClass::Slide, 0, "J2", 812.4));
        assert_eq!(JuryVerdict::from_json(&serde_json::to_string(&v).unwrap()).unwrap(), v);
        assert!(JuryVerdict::from_json(r#"{"event":"E1","verdict":"confirm","class":"slide","juror":"J","t":1}"#).is_err());
        assert!(JuryVerdict::from_json(r#"{"event":"E1","verdict":"override","juror":"J","t":1}"#).is_err());
        let e = JuryVerdict::from_json(r#"{"event":"E1","verdict":"override","class":"slide","score":3,"juror":"J","t":1}"#).unwrap_err();
        assert_eq!(e.code(), "inconsistent_override");
    }

    fn corrupted_model() -> ClassifierModel {
        let mut m = ClassifierModel::zero_linear(4);
        m.means = vec![3.0, 160.0, 10.0, 20.0, 0.0, 0.03];
        // Predicts a kick for every input; speed is irrelevant.
        m.weights[1][6] = 2.0;
        m
    }

    #[test]
    fn retrain_fixes_misclassified_slides() {
        let m = corrupted_model();
        let cfg = PipelineConfig::default();
        let slides: Vec<_> = [0.8, 1.0, 1.2]
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let f = features(s);
                let p = m.classify(&f, &cfg).unwrap();
                assert_eq!(p.predicted, ActionClass::StandardHeadKick);
                FeedbackSample::new(&format!("E{i}"), m.version, f, p.p, ActionClass::Slide)
            })
            .collect();
        let (next, losses) = retrain(&m, &slides, 200, 0.5, 1.0, 0.5).unwrap();
        assert_eq!(next.version, 5);
        assert_eq!(m, corrupted_model());
        assert!(losses.last() < losses.first());
        for s in &slides {
            assert_eq!(next.classify(&s.features, &cfg).unwrap().predicted, ActionClass::Slide);
        }
    }

    #[test]
    fn retrain_on_confirmations_does_not_raise_loss() {
        let m = corrupted_model();
        let cfg = PipelineConfig::default();
        let confirms: Vec<_> = (0..4)
            .map(|i| {
                let f = features(3.0 + i as f64 * 0.1);
                let p = m.classify(&f, &cfg).unwrap();
                FeedbackSample::new("E", m.version, f, p.p, p.predicted)
            })
            .collect();
        let before = mean_model_loss(&m, &confirms, 1.0, 0.5).unwrap();
        let (next, losses) = retrain(&m, &confirms, 50, 0.5, 1.0, 0.5).unwrap();
        let after = mean_model_loss(&next, &confirms, 1.0, 0.5).unwrap();
        assert!(after <= before);
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn retrain_errors() {
        let m = corrupted_model();
        assert_eq!(retrain(&m, &[], 10, 0.1, 1.0, 0.5).unwrap_err().code(), "no_feedback");
        let s = FeedbackSample::new("E", 0, features(1.0), [0.2, 0.3, 0.5], ActionClass::Slide);
        assert_eq!(retrain(&ClassifierModel::rule_based(), &[s], 10, 0.1, 1.0, 0.5).unwrap_err().code(), "not_linear");
    }

    #[test]
    fn fp_rate_examples() {
        let truth = vec![ActionClass::Slide; 10];
        let mut scores = vec![0u8; 10];
        scores[..3].fill(3);
        assert!((fp_rate(&scores, &truth).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(fp_rate(&[0; 10], &truth).unwrap(), 0.0);
        assert_eq!(fp_rate(&[5, 3], &[ActionClass::TurningHeadKick, ActionClass::StandardHeadKick]).unwrap(), 0.0);
        assert_eq!(fp_rate(&[0], &truth).unwrap_err().code(), "length_mismatch");
    }

    #[test]
    fn feedback_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feedback.jsonl");
        let s = FeedbackSample::new("E1", 3, features(1.1), [0.1, 0.8, 0.1], ActionClass::Slide);
        let mut log = FeedbackLog::open(&path).unwrap();
        log.append(&s).unwrap();
        log.append(&s).unwrap();
        let back = FeedbackLog::load(&path).unwrap();
        assert_eq!(back, vec![s.clone(), s]);
    }

    fn arb_simplex() -> impl Strategy<Value = [f64; 3]> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0usize..4).prop_map(|(a, b, c, hot)| {
            if hot < 3 {
                let mut p = [0.0; 3];
                p[hot] = 1.0;
                return p;
            }
            let s = a + b + c;
            if s == 0.0 {
                [1.0 / 3.0; 3]
            } else {
                [a / s, b / s, c / s]
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn loss_zero_iff_one_hot_agreement(p in arb_simplex(), y in 0usize..3, lc in 0.01..5.0f64, lf in 0.01..5.0f64) {
            let y = ActionClass::from_ordinal(y).unwrap();
            let loss = feedback_loss_probs(&p, y, lc, lf);
            prop_assert!(loss >= 0.0);
            let agree = p[y.ordinal()] == 1.0;
            prop_assert_eq!(loss == 0.0, agree);
        }
    }
}
