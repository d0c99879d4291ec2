//! Candidate detection, window segmentation and action classification.
//!
//! Two classifiers share one output type: a deterministic rule baseline and
//! a multinomial logistic model over the six window summary features.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::kinematics::{extract_features, WindowFeatures, WindowFrame, FEATURE_DIM};
use crate::model::{ActionClass, PipelineConfig, Point, Side};
use crate::tracking::SmoothedPose;

/// Below this peak ankle speed (m/s) a motion is never a kick.
pub const SLIDE_SPEED_FLOOR: f64 = 1.5;

/// Probability the rule baseline puts on its chosen class.
pub const RULE_CONFIDENCE: f64 = 0.9;
const RULE_REST: f64 = 0.05;

const NUM_CLASSES: usize = ActionClass::COUNT;
const INPUT_DIM: usize = FEATURE_DIM + 1;
const STD_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("model_shape_mismatch: {0}")]
    ModelShapeMismatch(String),
    #[error("class_unrepresented: no sample labelled {0}")]
    ClassUnrepresented(ActionClass),
    #[error("not_linear: operation needs a linear model")]
    NotLinear,
    #[error("invalid_training: {0}")]
    InvalidTraining(String),
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
}

impl ActionError {
    pub fn code(&self) -> &'static str {
        match self {
            ActionError::ModelShapeMismatch(_) => "model_shape_mismatch",
            ActionError::ClassUnrepresented(_) => "class_unrepresented",
            ActionError::NotLinear => "not_linear",
            ActionError::InvalidTraining(_) => "invalid_training",
            ActionError::Io(_) => "io",
            ActionError::Json(_) => "json",
        }
    }
}

/// Ankle-near-head trigger result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateHit {
    pub side: Side,
    /// Euclidean ankle-to-head distance in meters.
    pub distance: f64,
}

/// Fires when an ankle is at or above `head − head_margin` and strictly
/// within `horiz_margin` of the opponent's head horizontally.
pub fn detect_candidate(pose: &SmoothedPose, defender_head: Option<Point>, config: &PipelineConfig) -> Option<CandidateHit> {
    let Some(head) = defender_head else {
        debug!(t = pose.t, "candidate check skipped: opponent head unresolved");
        return None;
    };
    Side::BOTH
        .into_iter()
        .filter_map(|side| {
            let ankle = pose.joint(side.ankle())?;
            let high = ankle.y >= head.y - config.head_margin_m;
            let close = (ankle.x - head.x).abs() < config.horiz_margin_m;
            (high && close).then(|| CandidateHit {
                side,
                distance: ankle.distance(&head),
            })
        })
        .min_by(|a, b| a.distance.total_cmp(&b.distance))
}

/// Window cut from the stream, before feature extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindow {
    pub frames: Vec<WindowFrame>,
    pub padded: bool,
}

#[derive(Debug, Clone, Copy)]
struct Armed {
    opened_at: u64,
    best_at: u64,
    best_distance: f64,
}

/// Incremental segmenter for one attacker stream.
///
/// A candidate run stays open for up to `settle_frames` frames; the window
/// is right-aligned on the frame of closest ankle-head approach within that
/// run. After emission, `window_frames` frames are suppressed.
#[derive(Debug, Clone, Default)]
pub struct Segmenter {
    history: VecDeque<WindowFrame>,
    frames_seen: u64,
    refractory: usize,
    armed: Option<Armed>,
}

impl Segmenter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, frame: WindowFrame, config: &PipelineConfig) -> Option<RawWindow> {
        let k = self.frames_seen;
        self.frames_seen += 1;
        let hit = detect_candidate(&frame.pose, frame.opponent_head, config);
        self.history.push_back(frame);
        while self.history.len() > config.window_frames + config.settle_frames + 1 {
            self.history.pop_front();
        }

        if self.refractory > 0 {
            self.refractory -= 1;
            return None;
        }

        let anchor = match (self.armed.as_mut(), hit) {
            (None, None) => None,
            (None, Some(h)) => {
                self.armed = Some(Armed {
                    opened_at: k,
                    best_at: k,
                    best_distance: h.distance,
                });
                (config.settle_frames == 0).then_some(k)
            }
            (Some(a), hit) => {
                if let Some(h) = hit {
                    if h.distance < a.best_distance {
                        a.best_at = k;
                        a.best_distance = h.distance;
                    }
                }
                let expired = (k - a.opened_at) as usize >= config.settle_frames;
                (hit.is_none() || expired).then_some(a.best_at)
            }
        }?;

        self.armed = None;
        self.refractory = config.window_frames;
        Some(self.cut(anchor, config.window_frames))
    }

    fn cut(&self, anchor: u64, window: usize) -> RawWindow {
        let oldest = self.frames_seen - self.history.len() as u64;
        let end = (anchor - oldest) as usize;
        let start = end as i64 - window as i64 + 1;
        if start >= 0 {
            let frames = self.history.range(start as usize..=end).cloned().collect();
            return RawWindow { frames, padded: false };
        }
        let pad = (-start) as usize;
        let first = self.history.front().expect("non-empty history").clone();
        let mut frames = vec![first; pad];
        frames.extend(self.history.range(..=end).cloned());
        RawWindow { frames, padded: true }
    }
}

/// A classified-ready window.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionWindow {
    pub event_id: String,
    pub match_id: String,
    pub athlete_id: String,
    pub frames: Vec<WindowFrame>,
    pub t_start: f64,
    pub t_end: f64,
    pub padded: bool,
    pub features: WindowFeatures,
}

impl ActionWindow {
    pub fn from_raw(
        event_id: String,
        match_id: String,
        athlete_id: String,
        raw: RawWindow,
        config: &PipelineConfig,
    ) -> Result<Self, crate::kinematics::KinematicsError> {
        let features = extract_features(&raw.frames, config)?;
        Ok(Self {
            event_id,
            match_id,
            athlete_id,
            t_start: raw.frames[0].t(),
            t_end: raw.frames[raw.frames.len() - 1].t(),
            frames: raw.frames,
            padded: raw.padded,
            features,
        })
    }
}

/// Batch segmentation of one attacker stream. Windows whose features
/// cannot be extracted are skipped.
pub fn segment<I>(frames: I, match_id: &str, athlete_id: &str, config: &PipelineConfig) -> Vec<ActionWindow>
where
    I: IntoIterator<Item = WindowFrame>,
{
    let mut seg = Segmenter::new();
    let mut out = Vec::new();
    for frame in frames {
        if let Some(raw) = seg.push(frame, config) {
            let id = format!("E{}", out.len() + 1);
            match ActionWindow::from_raw(id, match_id.to_string(), athlete_id.to_string(), raw, config) {
                Ok(w) => out.push(w),
                Err(e) => debug!(error = %e, "window dropped"),
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub p: [f64; NUM_CLASSES],
    pub predicted: ActionClass,
    pub confidence: f64,
}

impl ClassProbabilities {
    /// Argmax with ties going to the lowest ordinal.
    pub fn from_probs(p: [f64; NUM_CLASSES]) -> Self {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if p[i] > p[best] {
                best = i;
            }
        }
        Self {
            p,
            predicted: ActionClass::from_ordinal(best).expect("ordinal in range"),
            confidence: p[best],
        }
    }

    pub fn from_logits(logits: [f64; NUM_CLASSES]) -> Self {
        Self::from_probs(softmax(logits))
    }

    pub fn one_hot(class: ActionClass) -> Self {
        let mut p = [0.0; NUM_CLASSES];
        p[class.ordinal()] = 1.0;
        Self::from_probs(p)
    }

    pub fn is_valid_simplex(&self) -> bool {
        self.p.iter().all(|v| (0.0..=1.0).contains(v)) && (self.p.iter().sum::<f64>() - 1.0).abs() <= 1e-9
    }
}

pub fn softmax(logits: [f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.map(|z| (z - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Deterministic baseline over the kinematic thresholds.
pub fn classify_rules(features: &WindowFeatures, config: &PipelineConfig) -> ClassProbabilities {
    let reached_head = features.ankle_head_dy_min <= config.head_margin_m;
    let class = if features.peak_ankle_speed < SLIDE_SPEED_FLOOR || !reached_head {
        ActionClass::Slide
    } else if features.torso_rotation_deg > config.rotation_turning_deg {
        ActionClass::TurningHeadKick
    } else {
        ActionClass::StandardHeadKick
    };
    let rest = RULE_REST;
    let mut p = [rest; NUM_CLASSES];
    p[class.ordinal()] = RULE_CONFIDENCE;
    ClassProbabilities::from_probs(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    RuleBased,
    Linear,
}

/// Versioned classifier parameters. The rule baseline carries no weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub version: u64,
    pub kind: ModelKind,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// `3 × (d + 1)`, bias in the last column.
    pub weights: Vec<Vec<f64>>,
}

impl ClassifierModel {
    pub fn rule_based() -> Self {
        Self {
            version: 0,
            kind: ModelKind::RuleBased,
            means: Vec::new(),
            stds: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Linear model with all-zero weights and identity standardization.
    pub fn zero_linear(version: u64) -> Self {
        Self {
            version,
            kind: ModelKind::Linear,
            means: vec![0.0; FEATURE_DIM],
            stds: vec![1.0; FEATURE_DIM],
            weights: vec![vec![0.0; INPUT_DIM]; NUM_CLASSES],
        }
    }

    pub fn check_shape(&self) -> Result<(), ActionError> {
        if self.kind != ModelKind::Linear {
            return Ok(());
        }
        if self.means.len() != FEATURE_DIM || self.stds.len() != FEATURE_DIM {
            return Err(ActionError::ModelShapeMismatch(format!(
                "expected {FEATURE_DIM} means/stds, got {}/{}",
                self.means.len(),
                self.stds.len()
            )));
        }
        if self.weights.len() != NUM_CLASSES || self.weights.iter().any(|r| r.len() != INPUT_DIM) {
            return Err(ActionError::ModelShapeMismatch(format!(
                "expected {NUM_CLASSES}x{INPUT_DIM} weights"
            )));
        }
        if self.stds.iter().any(|s| !(*s > 0.0)) {
            return Err(ActionError::ModelShapeMismatch("feature stds must be > 0".into()));
        }
        Ok(())
    }

    /// Dispatches on `kind`.
    pub fn classify(&self, features: &WindowFeatures, config: &PipelineConfig) -> Result<ClassProbabilities, ActionError> {
        match self.kind {
            ModelKind::RuleBased => Ok(classify_rules(features, config)),
            ModelKind::Linear => classify_linear(features, self),
        }
    }

    pub(crate) fn standardize(&self, features: &[f64; FEATURE_DIM]) -> [f64; INPUT_DIM] {
        let mut x = [1.0; INPUT_DIM];
        for i in 0..FEATURE_DIM {
            x[i] = (features[i] - self.means[i]) / self.stds[i];
        }
        x
    }

    pub(crate) fn weight_array(&self) -> [[f64; INPUT_DIM]; NUM_CLASSES] {
        let mut w = [[0.0; INPUT_DIM]; NUM_CLASSES];
        for (row, src) in w.iter_mut().zip(&self.weights) {
            row.copy_from_slice(src);
        }
        w
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ActionError> {
        let model: ClassifierModel = serde_json::from_str(s)?;
        model.check_shape()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ActionError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ActionError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn logits(weights: &[[f64; INPUT_DIM]; NUM_CLASSES], x: &[f64; INPUT_DIM]) -> [f64; NUM_CLASSES] {
    weights.map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
}

pub fn classify_linear(features: &WindowFeatures, model: &ClassifierModel) -> Result<ClassProbabilities, ActionError> {
    if model.kind != ModelKind::Linear {
        return Err(ActionError::NotLinear);
    }
    model.check_shape()?;
    let x = model.standardize(&features.summary());
    Ok(ClassProbabilities::from_logits(logits(&model.weight_array(), &x)))
}

/// Per-sample objective: returns the loss and its gradient w.r.t. logits.
pub(crate) type Objective<'a> = dyn Fn(usize, &[f64; NUM_CLASSES]) -> (f64, [f64; NUM_CLASSES]) + 'a;

fn mean_loss_and_grad(
    weights: &[[f64; INPUT_DIM]; NUM_CLASSES],
    inputs: &[[f64; INPUT_DIM]],
    objective: &Objective<'_>,
) -> (f64, [[f64; INPUT_DIM]; NUM_CLASSES]) {
    let n = inputs.len() as f64;
    let mut loss = 0.0;
    let mut grad = [[0.0; INPUT_DIM]; NUM_CLASSES];
    for (i, x) in inputs.iter().enumerate() {
        let p = softmax(logits(weights, x));
        let (l, dz) = objective(i, &p);
        loss += l;
        for c in 0..NUM_CLASSES {
            for j in 0..INPUT_DIM {
                grad[c][j] += dz[c] * x[j];
            }
        }
    }
    for row in grad.iter_mut() {
        for g in row.iter_mut() {
            *g /= n;
        }
    }
    (loss / n, grad)
}

fn mean_loss(weights: &[[f64; INPUT_DIM]; NUM_CLASSES], inputs: &[[f64; INPUT_DIM]], objective: &Objective<'_>) -> f64 {
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| objective(i, &softmax(logits(weights, x))).0)
        .sum::<f64>()
        / inputs.len() as f64
}

/// Full-batch gradient descent with step halving whenever a step would
/// raise the loss. Returns the loss before each epoch plus the final loss.
pub(crate) fn gradient_descent(
    weights: &mut [[f64; INPUT_DIM]; NUM_CLASSES],
    inputs: &[[f64; INPUT_DIM]],
    objective: &Objective<'_>,
    epochs: usize,
    learning_rate: f64,
) -> Vec<f64> {
    let mut lr = learning_rate;
    let mut losses = Vec::with_capacity(epochs + 1);
    for _ in 0..epochs {
        let (loss, grad) = mean_loss_and_grad(weights, inputs, objective);
        losses.push(loss);
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = *weights;
            for c in 0..NUM_CLASSES {
                for j in 0..INPUT_DIM {
                    trial[c][j] -= lr * grad[c][j];
                }
            }
            if mean_loss(&trial, inputs, objective) <= loss {
                *weights = trial;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    losses.push(mean_loss(weights, inputs, objective));
    debug_assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    losses
}

pub(crate) fn cross_entropy_grad(p: &[f64; NUM_CLASSES], target: ActionClass) -> (f64, [f64; NUM_CLASSES]) {
    let y = target.ordinal();
    let loss = -p[y].max(1e-300).ln();
    let mut dz = *p;
    dz[y] -= 1.0;
    (loss, dz)
}

fn standardization(samples: &[(WindowFeatures, ActionClass)]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let mut means = vec![0.0; FEATURE_DIM];
    for (f, _) in samples {
        for (m, v) in means.iter_mut().zip(f.summary()) {
            *m += v / n;
        }
    }
    let mut stds = vec![0.0; FEATURE_DIM];
    for (f, _) in samples {
        for ((s, v), m) in stds.iter_mut().zip(f.summary()).zip(&means) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in stds.iter_mut() {
        *s = s.sqrt();
        if !(*s > STD_FLOOR) {
            *s = 1.0;
        }
    }
    (means, stds)
}

/// Fits a fresh linear model (version 1) and returns it with the loss
/// trajectory.
pub fn fit_linear(
    samples: &[(WindowFeatures, ActionClass)],
    epochs: usize,
    learning_rate: f64,
) -> Result<(ClassifierModel, Vec<f64>), ActionError> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(ActionError::InvalidTraining("learning rate must be > 0".into()));
    }
    for class in ActionClass::ALL {
        if !samples.iter().any(|(_, y)| *y == class) {
            return Err(ActionError::ClassUnrepresented(class));
        }
    }
    if samples.iter().any(|(f, _)| !f.is_finite()) {
        return Err(ActionError::InvalidTraining("non-finite features".into()));
    }
    let (means, stds) = standardization(samples);
    let mut model = ClassifierModel {
        version: 1,
        kind: ModelKind::Linear,
        means,
        stds,
        weights: vec![vec![0.0; INPUT_DIM]; NUM_CLASSES],
    };
    let inputs: Vec<_> = samples.iter().map(|(f, _)| model.standardize(&f.summary())).collect();
    let labels: Vec<_> = samples.iter().map(|(_, y)| *y).collect();
    let objective = |i: usize, p: &[f64; NUM_CLASSES]| cross_entropy_grad(p, labels[i]);
    let mut w = model.weight_array();
    let losses = gradient_descent(&mut w, &inputs, &objective, epochs, learning_rate);
    model.weights = w.iter().map(|r| r.to_vec()).collect();
    Ok((model, losses))
}

pub fn train_linear(
    samples: &[(WindowFeatures, ActionClass)],
    epochs: usize,
    learning_rate: f64,
) -> Result<ClassifierModel, ActionError> {
    fit_linear(samples, epochs, learning_rate).map(|(m, _)| m)
}
