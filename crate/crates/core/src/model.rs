//! Shared domain types: the 18-point keypoint layout, pose frames, boxes,
//! action classes, pipeline configuration and frame validation.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of keypoints per athlete per frame.
pub const NUM_KEYPOINTS: usize = 18;

/// OpenPose-style 18-point body layout.
pub struct KeypointLayout;

impl KeypointLayout {
    pub const NAMES: [&'static str; NUM_KEYPOINTS] = [
        "nose",
        "neck",
        "right_shoulder",
        "right_elbow",
        "right_wrist",
        "left_shoulder",
        "left_elbow",
        "left_wrist",
        "right_hip",
        "right_knee",
        "right_ankle",
        "left_hip",
        "left_knee",
        "left_ankle",
        "right_eye",
        "left_eye",
        "right_ear",
        "left_ear",
    ];

    pub const NOSE: usize = 0;
    pub const HEAD: usize = Self::NOSE;
    pub const NECK: usize = 1;
    pub const R_SHOULDER: usize = 2;
    pub const R_ELBOW: usize = 3;
    pub const R_WRIST: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    pub const R_HIP: usize = 8;
    pub const R_KNEE: usize = 9;
    pub const R_ANKLE: usize = 10;
    pub const L_HIP: usize = 11;
    pub const L_KNEE: usize = 12;
    pub const L_ANKLE: usize = 13;
    pub const R_EYE: usize = 14;
    pub const L_EYE: usize = 15;
    pub const R_EAR: usize = 16;
    pub const L_EAR: usize = 17;

    pub fn index_of(name: &str) -> Option<usize> {
        Self::NAMES.iter().position(|n| *n == name)
    }

    /// Midpoint of the two hips, when both are present.
    pub fn hip_mid(points: &[Option<Point>]) -> Option<Point> {
        match (points.get(Self::R_HIP)?, points.get(Self::L_HIP)?) {
            (Some(r), Some(l)) => Some(r.midpoint(l)),
            _ => None,
        }
    }
}

/// Leg side, used to address hip/knee/ankle triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Right,
    Left,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Right, Side::Left];

    pub fn hip(self) -> usize {
        match self {
            Side::Right => KeypointLayout::R_HIP,
            Side::Left => KeypointLayout::L_HIP,
        }
    }

    pub fn knee(self) -> usize {
        match self {
            Side::Right => KeypointLayout::R_KNEE,
            Side::Left => KeypointLayout::L_KNEE,
        }
    }

    pub fn ankle(self) -> usize {
        match self {
            Side::Right => KeypointLayout::R_ANKLE,
            Side::Left => KeypointLayout::L_ANKLE,
        }
    }
}

/// A position in court coordinates: meters, y up, origin at mat floor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn midpoint(&self, other: &Point) -> Point {
        Point::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// One detected joint. Serialized as `[x, y, confidence]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub const fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self { x, y, confidence }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

impl From<[f64; 3]> for Keypoint {
    fn from([x, y, confidence]: [f64; 3]) -> Self {
        Keypoint { x, y, confidence }
    }
}

impl From<Keypoint> for [f64; 3] {
    fn from(k: Keypoint) -> Self {
        [k.x, k.y, k.confidence]
    }
}

/// Keypoints of one athlete at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub t: f64,
    #[serde(rename = "match")]
    pub match_id: String,
    #[serde(rename = "athlete")]
    pub athlete_id: String,
    #[serde(rename = "kp")]
    pub keypoints: Vec<Keypoint>,
}

impl PoseFrame {
    pub fn from_json(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("pose frame serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Returns `None` when the corners are inverted or non-finite.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Option<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        (finite && x_min <= x_max && y_min <= y_max).then_some(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Axis-aligned square of side `side` centered on `center`.
    pub fn square(center: Point, side: f64) -> Self {
        let h = 0.5 * side.abs();
        Self {
            x_min: center.x - h,
            y_min: center.y - h,
            x_max: center.x + h,
            y_max: center.y + h,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        (x_min < x_max && y_min < y_max).then_some(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionClass {
    Slide = 0,
    StandardHeadKick = 1,
    TurningHeadKick = 2,
}

impl ActionClass {
    pub const ALL: [ActionClass; 3] = [
        ActionClass::Slide,
        ActionClass::StandardHeadKick,
        ActionClass::TurningHeadKick,
    ];
    pub const COUNT: usize = 3;

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActionClass::Slide => "slide",
            ActionClass::StandardHeadKick => "standard_head_kick",
            ActionClass::TurningHeadKick => "turning_head_kick",
        }
    }

    /// Points awarded for this class when contact is verified.
    pub fn points_on_impact(self) -> u8 {
        match self {
            ActionClass::Slide => 0,
            ActionClass::StandardHeadKick => 3,
            ActionClass::TurningHeadKick => 5,
        }
    }

    /// Whether `score` is one this class can legitimately receive.
    pub fn admits_score(self, score: u8) -> bool {
        score == 0 || score == self.points_on_impact()
    }

    pub fn is_kick(self) -> bool {
        self != ActionClass::Slide
    }
}

impl fmt::Display for ActionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ActionClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown action class {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Thresholds and knobs for the whole pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Minimum deceleration (m/s²) for a contact.
    pub a_threshold: f64,
    pub iou_threshold: f64,
    pub rotation_turning_deg: f64,
    pub head_margin_m: f64,
    pub horiz_margin_m: f64,
    pub window_frames: usize,
    pub min_confidence: f64,
    pub foot_box_side_m: f64,
    pub head_box_side_m: f64,
    pub latency_budget_ms: f64,
    pub lambda_cross: f64,
    pub lambda_conf: f64,
    /// Frames a candidate stays open while the closest approach is located.
    pub settle_frames: usize,
    /// Longest frame span (in steps) evaluated by the deceleration scan.
    pub decel_max_span: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            a_threshold: 50.0,
            iou_threshold: 0.3,
            rotation_turning_deg: 120.0,
            head_margin_m: 0.2,
            horiz_margin_m: 0.1,
            window_frames: 30,
            min_confidence: 0.5,
            foot_box_side_m: 0.25,
            head_box_side_m: 0.25,
            latency_budget_ms: 200.0,
            lambda_cross: 1.0,
            lambda_conf: 0.5,
            settle_frames: 6,
            decel_max_span: 2,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("a_threshold", self.a_threshold),
            ("iou_threshold", self.iou_threshold),
            ("rotation_turning_deg", self.rotation_turning_deg),
            ("head_margin_m", self.head_margin_m),
            ("horiz_margin_m", self.horiz_margin_m),
            ("min_confidence", self.min_confidence),
            ("foot_box_side_m", self.foot_box_side_m),
            ("head_box_side_m", self.head_box_side_m),
            ("latency_budget_ms", self.latency_budget_ms),
            ("lambda_cross", self.lambda_cross),
            ("lambda_conf", self.lambda_conf),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be > 0, got {value}")));
            }
        }
        if self.iou_threshold >= 1.0 {
            return Err(ConfigError::Invalid("iou_threshold must lie in (0, 1)".into()));
        }
        if self.min_confidence > 1.0 {
            return Err(ConfigError::Invalid("min_confidence must lie in (0, 1]".into()));
        }
        if self.window_frames < 2 {
            return Err(ConfigError::Invalid("window_frames must be >= 2".into()));
        }
        if self.decel_max_span < 1 {
            return Err(ConfigError::Invalid("decel_max_span must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let config: PipelineConfig = toml::from_str(s)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Per-event stage timings in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    #[serde(rename = "pose")]
    pub t_pose_ms: f64,
    #[serde(rename = "class")]
    pub t_class_ms: f64,
    #[serde(rename = "impact")]
    pub t_impact_ms: f64,
    #[serde(rename = "total")]
    pub t_total_ms: f64,
}

impl LatencyBreakdown {
    pub fn from_stages(t_pose_ms: f64, t_class_ms: f64, t_impact_ms: f64) -> Self {
        Self {
            t_pose_ms,
            t_class_ms,
            t_impact_ms,
            t_total_ms: t_pose_ms + t_class_ms + t_impact_ms,
        }
    }

    pub fn is_additive(&self) -> bool {
        self.t_total_ms == self.t_pose_ms + self.t_class_ms + self.t_impact_ms
    }
}

/// Why a frame was refused at the door.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrameRejection {
    #[error("bad_layout: expected {NUM_KEYPOINTS} keypoints, got {0}")]
    BadLayout(usize),
    #[error("non_finite: keypoint {0} or timestamp is not finite")]
    NonFinite(usize),
    #[error("bad_confidence: keypoint {0} confidence outside [0, 1]")]
    BadConfidence(usize),
    #[error("non_monotonic: t={t} does not advance past {last}")]
    NonMonotonic { t: f64, last: f64 },
}

impl FrameRejection {
    pub fn code(&self) -> &'static str {
        match self {
            FrameRejection::BadLayout(_) => "bad_layout",
            FrameRejection::NonFinite(_) => "non_finite",
            FrameRejection::BadConfidence(_) => "bad_confidence",
            FrameRejection::NonMonotonic { .. } => "non_monotonic",
        }
    }
}

/// A structurally valid frame plus its occlusion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedFrame {
    pub frame: PoseFrame,
    pub occluded: [bool; NUM_KEYPOINTS],
}

impl ValidatedFrame {
    /// Measurement for joint `i`, or `None` when occluded.
    pub fn measurement(&self, i: usize) -> Option<Keypoint> {
        (!self.occluded[i]).then(|| self.frame.keypoints[i])
    }
}

/// Stateless structural checks. `last_t` is the previous accepted timestamp
/// of the same (match, athlete) stream.
pub fn validate_frame(
    frame: PoseFrame,
    config: &PipelineConfig,
    last_t: Option<f64>,
) -> Result<ValidatedFrame, FrameRejection> {
    if frame.keypoints.len() != NUM_KEYPOINTS {
        return Err(FrameRejection::BadLayout(frame.keypoints.len()));
    }
    if !frame.t.is_finite() {
        return Err(FrameRejection::NonFinite(0));
    }
    let mut occluded = [false; NUM_KEYPOINTS];
    for (i, kp) in frame.keypoints.iter().enumerate() {
        if !(kp.x.is_finite() && kp.y.is_finite() && kp.confidence.is_finite()) {
            return Err(FrameRejection::NonFinite(i));
        }
        if !(0.0..=1.0).contains(&kp.confidence) {
            return Err(FrameRejection::BadConfidence(i));
        }
        occluded[i] = kp.confidence < config.min_confidence;
    }
    if let Some(last) = last_t {
        if frame.t <= last {
            return Err(FrameRejection::NonMonotonic { t: frame.t, last });
        }
    }
    Ok(ValidatedFrame { frame, occluded })
}

/// Tracks the last accepted timestamp per (match, athlete) stream.
#[derive(Debug, Default, Clone)]
pub struct FrameValidator {
    last_t: HashMap<(String, String), f64>,
}

impl FrameValidator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn validate(
        &mut self,
        frame: PoseFrame,
        config: &PipelineConfig,
    ) -> Result<ValidatedFrame, FrameRejection> {
        let key = (frame.match_id.clone(), frame.athlete_id.clone());
        let last = self.last_t.get(&key).copied();
        let validated = validate_frame(frame, config, last)?;
        self.last_t.insert(key, validated.frame.t);
        Ok(validated)
    }
}
