//! Geometry and kinematics over smoothed joint trajectories.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BoundingBox, KeypointLayout, PipelineConfig, Point, Side, NUM_KEYPOINTS};
use crate::tracking::SmoothedPose;

const MIN_SEGMENT_M: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("degenerate_angle: coincident points")]
    DegenerateAngle,
    #[error("non_positive_dt: {0}")]
    NonPositiveDt(f64),
    #[error("insufficient_orientation_data: {0} resolvable frames")]
    InsufficientOrientationData(usize),
    #[error("unresolved_keypoint")]
    UnresolvedKeypoint,
    #[error("track_lost: {0}")]
    TrackLost(&'static str),
    #[error("window_length: expected {expected} frames, got {got}")]
    WindowLength { expected: usize, got: usize },
}

impl KinematicsError {
    pub fn code(&self) -> &'static str {
        match self {
            KinematicsError::DegenerateAngle => "degenerate_angle",
            KinematicsError::NonPositiveDt(_) => "non_positive_dt",
            KinematicsError::InsufficientOrientationData(_) => "insufficient_orientation_data",
            KinematicsError::UnresolvedKeypoint => "unresolved_keypoint",
            KinematicsError::TrackLost(_) => "track_lost",
            KinematicsError::WindowLength { .. } => "window_length",
        }
    }
}

/// Interior angle at `p_mid` in degrees, in [0, 180].
pub fn joint_angle(p_prev: Point, p_mid: Point, p_next: Point) -> Result<f64, KinematicsError> {
    let (ax, ay) = (p_prev.x - p_mid.x, p_prev.y - p_mid.y);
    let (bx, by) = (p_next.x - p_mid.x, p_next.y - p_mid.y);
    if ax.hypot(ay) <= MIN_SEGMENT_M || bx.hypot(by) <= MIN_SEGMENT_M {
        return Err(KinematicsError::DegenerateAngle);
    }
    let cross = ax * by - ay * bx;
    let dot = ax * bx + ay * by;
    Ok(cross.abs().atan2(dot).to_degrees())
}

/// Euclidean displacement over `dt`, in m/s.
pub fn speed(p_prev: Point, p_curr: Point, dt: f64) -> Result<f64, KinematicsError> {
    if !(dt > 0.0) {
        return Err(KinematicsError::NonPositiveDt(dt));
    }
    Ok(p_prev.distance(&p_curr) / dt)
}

/// `(v_prev − v_curr) / dt`; positive when slowing down.
pub fn deceleration(v_prev: f64, v_curr: f64, dt: f64) -> Result<f64, KinematicsError> {
    if !(dt > 0.0) {
        return Err(KinematicsError::NonPositiveDt(dt));
    }
    Ok((v_prev - v_curr) / dt)
}

fn wrap_degrees(delta: f64) -> f64 {
    // Into (-180, 180].
    let mut d = delta % 360.0;
    if d <= -180.0 {
        d += 360.0;
    } else if d > 180.0 {
        d -= 360.0;
    }
    d
}

fn line_angle(points: &[Option<Point>; NUM_KEYPOINTS], right: usize, left: usize) -> Option<f64> {
    let (r, l) = (points[right]?, points[left]?);
    if r.distance(&l) <= MIN_SEGMENT_M {
        return None;
    }
    Some((l.y - r.y).atan2(l.x - r.x).to_degrees())
}

/// Total unsigned rotation (degrees) of the shoulder line across the frames,
/// falling back to the hip line where the shoulders are unresolved.
pub fn torso_rotation<'a, I>(frames: I) -> Result<f64, KinematicsError>
where
    I: IntoIterator<Item = &'a [Option<Point>; NUM_KEYPOINTS]>,
{
    type Orientation = (Option<f64>, Option<f64>);
    let orientations: Vec<Orientation> = frames
        .into_iter()
        .map(|pts| {
            (
                line_angle(pts, KeypointLayout::R_SHOULDER, KeypointLayout::L_SHOULDER),
                line_angle(pts, KeypointLayout::R_HIP, KeypointLayout::L_HIP),
            )
        })
        .filter(|(s, h)| s.is_some() || h.is_some())
        .collect();
    if orientations.len() < 2 {
        return Err(KinematicsError::InsufficientOrientationData(orientations.len()));
    }
    let total = orientations
        .windows(2)
        .filter_map(|w| match (w[0], w[1]) {
            ((Some(a), _), (Some(b), _)) => Some(b - a),
            ((_, Some(a)), (_, Some(b))) => Some(b - a),
            _ => None,
        })
        .map(|d| wrap_degrees(d).abs())
        .sum();
    Ok(total)
}

pub fn foot_bbox(ankle: Option<Point>, config: &PipelineConfig) -> Result<BoundingBox, KinematicsError> {
    ankle
        .map(|p| BoundingBox::square(p, config.foot_box_side_m))
        .ok_or(KinematicsError::UnresolvedKeypoint)
}

pub fn head_bbox(head: Option<Point>, config: &PipelineConfig) -> Result<BoundingBox, KinematicsError> {
    head.map(|p| BoundingBox::square(p, config.head_box_side_m))
        .ok_or(KinematicsError::UnresolvedKeypoint)
}

/// Intersection over union; 0 for disjoint or zero-area pairs.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b).map_or(0.0, |i| i.area());
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// One attacker frame in a window, paired with the opponent's head.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowFrame {
    pub pose: SmoothedPose,
    pub opponent_head: Option<Point>,
}

impl WindowFrame {
    pub fn t(&self) -> f64 {
        self.pose.t
    }
}

/// Number of scalar summary features fed to the classifier.
pub const FEATURE_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowFeatures {
    pub knee_angle_deg_series: Vec<f64>,
    pub ankle_speed_series: Vec<f64>,
    pub peak_ankle_speed: f64,
    pub peak_knee_angle_deg: f64,
    pub torso_rotation_deg: f64,
    pub mean_torso_angular_velocity_deg_s: f64,
    pub ankle_head_dy_min: f64,
    pub ankle_head_dx_min: f64,
    pub kicking_side: Side,
}

impl WindowFeatures {
    /// Summary vector in classifier order.
    pub fn summary(&self) -> [f64; FEATURE_DIM] {
        [
            self.peak_ankle_speed,
            self.peak_knee_angle_deg,
            self.torso_rotation_deg,
            self.mean_torso_angular_velocity_deg_s,
            self.ankle_head_dy_min,
            self.ankle_head_dx_min,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.summary().iter().all(|v| v.is_finite())
            && self.knee_angle_deg_series.iter().all(|v| v.is_finite())
            && self.ankle_speed_series.iter().all(|v| v.is_finite())
    }
}

/// Per-frame speeds of joint `joint`; element 0 repeats element 1.
/// Repeated (padding) frames contribute zero speed.
pub fn speed_series(frames: &[WindowFrame], joint: usize) -> Result<Vec<f64>, KinematicsError> {
    let mut out = Vec::with_capacity(frames.len());
    for w in frames.windows(2) {
        let (a, b) = (&w[0].pose, &w[1].pose);
        let (pa, pb) = a
            .joint(joint)
            .zip(b.joint(joint))
            .ok_or(KinematicsError::TrackLost("ankle"))?;
        let dt = b.t - a.t;
        out.push(if dt > 0.0 { speed(pa, pb, dt)? } else { 0.0 });
    }
    let first = out.first().copied().unwrap_or(0.0);
    out.insert(0, first);
    Ok(out)
}

fn resolved_throughout(frames: &[WindowFrame], joint: usize) -> bool {
    frames.iter().all(|f| f.pose.joint(joint).is_some())
}

pub fn extract_features(frames: &[WindowFrame], config: &PipelineConfig) -> Result<WindowFeatures, KinematicsError> {
    if frames.len() != config.window_frames {
        return Err(KinematicsError::WindowLength {
            expected: config.window_frames,
            got: frames.len(),
        });
    }
    if frames.iter().any(|f| f.opponent_head.is_none()) {
        return Err(KinematicsError::TrackLost("opponent head"));
    }

    let mut best: Option<(Side, Vec<f64>, f64)> = None;
    for side in Side::BOTH {
        if !resolved_throughout(frames, side.ankle()) {
            continue;
        }
        let series = speed_series(frames, side.ankle())?;
        let peak = series.iter().copied().fold(0.0, f64::max);
        if best.as_ref().is_none_or(|(_, _, p)| peak > *p) {
            best = Some((side, series, peak));
        }
    }
    let (side, ankle_speed_series, peak_ankle_speed) = best.ok_or(KinematicsError::TrackLost("ankle"))?;

    let mut knee_angle_deg_series = Vec::with_capacity(frames.len());
    let mut last_angle = 180.0;
    for f in frames {
        let p = &f.pose;
        if let (Some(h), Some(k), Some(a)) = (p.joint(side.hip()), p.joint(side.knee()), p.joint(side.ankle())) {
            if let Ok(angle) = joint_angle(h, k, a) {
                last_angle = angle;
            }
        }
        knee_angle_deg_series.push(last_angle);
    }
    let peak_knee_angle_deg = knee_angle_deg_series.iter().copied().fold(0.0, f64::max);

    let torso_rotation_deg = torso_rotation(frames.iter().map(|f| &f.pose.joints)).unwrap_or(0.0);
    let span = frames[frames.len() - 1].t() - frames[0].t();
    let mean_torso_angular_velocity_deg_s = if span > 0.0 { torso_rotation_deg / span } else { 0.0 };

    let mut dy_min = f64::INFINITY;
    let mut dx_min = f64::INFINITY;
    for f in frames {
        let ankle = f.pose.joint(side.ankle()).expect("checked above");
        let head = f.opponent_head.expect("checked above");
        dy_min = dy_min.min(head.y - ankle.y);
        dx_min = dx_min.min((ankle.x - head.x).abs());
    }

    Ok(WindowFeatures {
        knee_angle_deg_series,
        ankle_speed_series,
        peak_ankle_speed,
        peak_knee_angle_deg,
        torso_rotation_deg,
        mean_torso_angular_velocity_deg_s,
        ankle_head_dy_min: dy_min,
        ankle_head_dx_min: dx_min,
        kicking_side: side,
    })
}
