//! Per-joint constant-velocity Kalman tracking with occlusion coasting.
//!
//! State is `[x, y, vx, vy]`; only position is observed. Each joint is
//! filtered independently, so a bank of 18 tracks covers one athlete.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{PipelineConfig, Point, ValidatedFrame, NUM_KEYPOINTS};

/// Coasted frames tolerated before a track is declared lost.
pub const MAX_COASTED_FRAMES: u32 = 30;

const PSD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackingError {
    #[error("non_positive_dt: {0}")]
    NonPositiveDt(f64),
    #[error("bad_observation")]
    BadObservation,
}

impl TrackingError {
    pub fn code(&self) -> &'static str {
        match self {
            TrackingError::NonPositiveDt(_) => "non_positive_dt",
            TrackingError::BadObservation => "bad_observation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// Process-noise spectral density (m²/s³), white-acceleration model.
    pub q: f64,
    /// Measurement variance (m²).
    pub r: f64,
    /// Initial covariance scale.
    pub p0: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self { q: 5.0, r: 1e-4, p0: 1.0 }
    }
}

impl FilterParams {
    pub fn is_valid(&self) -> bool {
        [self.q, self.r, self.p0].iter().all(|v| v.is_finite() && *v > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    pub x_hat: Vector4<f64>,
    pub p: Matrix4<f64>,
    pub t_last: f64,
}

/// Position selector `[I₂ 0]`.
pub fn observation_matrix() -> Matrix2x4<f64> {
    Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
}

impl KalmanState {
    /// Starts at `position` with zero velocity and covariance `p0 · I`.
    pub fn new(position: Point, t: f64, params: &FilterParams) -> Self {
        Self {
            x_hat: Vector4::new(position.x, position.y, 0.0, 0.0),
            p: Matrix4::identity() * params.p0,
            t_last: t,
        }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x_hat[0], self.x_hat[1])
    }

    pub fn velocity(&self) -> Point {
        Point::new(self.x_hat[2], self.x_hat[3])
    }

    /// Symmetric within tolerance and no eigenvalue below `-tol`.
    pub fn covariance_is_psd(&self, tol: f64) -> bool {
        let p = &self.p;
        if (p - p.transpose()).amax() > tol {
            return false;
        }
        p.symmetric_eigen().eigenvalues.iter().all(|&e| e >= -tol)
    }
}

fn transition(dt: f64) -> Matrix4<f64> {
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

fn process_noise(dt: f64, q: f64) -> Matrix4<f64> {
    let a = q * dt.powi(3) / 3.0;
    let b = q * dt.powi(2) / 2.0;
    let c = q * dt;
    Matrix4::new(
        a, 0.0, b, 0.0, //
        0.0, a, 0.0, b, //
        b, 0.0, c, 0.0, //
        0.0, b, 0.0, c,
    )
}

fn symmetrize(p: Matrix4<f64>) -> Matrix4<f64> {
    (p + p.transpose()) * 0.5
}

/// Constant-velocity prediction over `dt` seconds.
pub fn predict(state: &KalmanState, dt: f64, params: &FilterParams) -> Result<KalmanState, TrackingError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(TrackingError::NonPositiveDt(dt));
    }
    let f = transition(dt);
    let next = KalmanState {
        x_hat: f * state.x_hat,
        p: symmetrize(f * state.p * f.transpose() + process_noise(dt, params.q)),
        t_last: state.t_last + dt,
    };
    debug_assert!(next.covariance_is_psd(PSD_TOLERANCE));
    Ok(next)
}

/// Posterior mean for an explicit gain: `x̂ + K (z − H x̂)`.
pub fn apply_gain(prior: &Vector4<f64>, z: &Vector2<f64>, gain: &Matrix4x2<f64>) -> Vector4<f64> {
    let innovation = z - observation_matrix() * prior;
    prior + gain * innovation
}

/// Kalman gain from the covariance recursion.
pub fn kalman_gain(p: &Matrix4<f64>, params: &FilterParams) -> Matrix4x2<f64> {
    let h = observation_matrix();
    let s = h * p * h.transpose() + Matrix2::identity() * params.r;
    // s is 2x2 SPD whenever p is PSD and r > 0.
    let s_inv = s.try_inverse().expect("innovation covariance is invertible");
    p * h.transpose() * s_inv
}

/// Measurement update with observed position `z`.
pub fn update(state: &KalmanState, z: Point, params: &FilterParams) -> Result<KalmanState, TrackingError> {
    if !z.is_finite() {
        return Err(TrackingError::BadObservation);
    }
    let h = observation_matrix();
    let gain = kalman_gain(&state.p, params);
    let x_hat = apply_gain(&state.x_hat, &Vector2::new(z.x, z.y), &gain);
    // Joseph form keeps P symmetric PSD under rounding.
    let i_kh = Matrix4::identity() - gain * h;
    let p = i_kh * state.p * i_kh.transpose() + gain * gain.transpose() * params.r;
    let next = KalmanState {
        x_hat,
        p: symmetrize(p),
        t_last: state.t_last,
    };
    debug_assert!(next.covariance_is_psd(PSD_TOLERANCE));
    Ok(next)
}

/// One joint's filter plus occlusion bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTrack {
    pub joint_index: usize,
    pub state: KalmanState,
    pub frames_coasted: u32,
    pub lost: bool,
}

/// Outcome of stepping a track by one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackStep {
    /// Posterior position; `None` once the track is lost.
    pub position: Option<Point>,
    pub coasted: bool,
}

impl JointTrack {
    pub fn new(joint_index: usize, position: Point, t: f64, params: &FilterParams) -> Self {
        Self {
            joint_index,
            state: KalmanState::new(position, t, params),
            frames_coasted: 0,
            lost: false,
        }
    }

    /// Advance to `frame_t`, folding in `measurement` when it is confident
    /// enough; otherwise coast on the motion model.
    pub fn step(
        &mut self,
        frame_t: f64,
        measurement: Option<(f64, f64, f64)>,
        config: &PipelineConfig,
        params: &FilterParams,
    ) -> Result<TrackStep, TrackingError> {
        let dt = frame_t - self.state.t_last;
        let predicted = predict(&self.state, dt, params)?;
        let usable = measurement.filter(|&(_, _, c)| c >= config.min_confidence);
        match usable {
            Some((x, y, _)) => {
                self.state = update(&predicted, Point::new(x, y), params)?;
                self.frames_coasted = 0;
            }
            None => {
                self.state = predicted;
                self.frames_coasted += 1;
                if self.frames_coasted > MAX_COASTED_FRAMES {
                    self.lost = true;
                }
            }
        }
        Ok(TrackStep {
            position: (!self.lost).then(|| self.state.position()),
            coasted: usable.is_none(),
        })
    }
}

/// Functional form of [`JointTrack::step`].
pub fn step_track(
    track: &JointTrack,
    frame_t: f64,
    measurement: Option<(f64, f64, f64)>,
    config: &PipelineConfig,
    params: &FilterParams,
) -> Result<(JointTrack, TrackStep), TrackingError> {
    let mut next = track.clone();
    let step = next.step(frame_t, measurement, config, params)?;
    Ok((next, step))
}

/// Smoothed joint positions of one athlete at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedPose {
    pub t: f64,
    /// `None` for joints never seen or lost.
    pub joints: [Option<Point>; NUM_KEYPOINTS],
    pub coasted: [bool; NUM_KEYPOINTS],
}

impl SmoothedPose {
    pub fn joint(&self, i: usize) -> Option<Point> {
        self.joints[i]
    }
}

/// All 18 joint tracks of one athlete. Tracks are (re)initialized from the
/// first confident measurement after start or loss.
#[derive(Debug, Clone)]
pub struct TrackerBank {
    tracks: Vec<Option<JointTrack>>,
    params: FilterParams,
}

impl TrackerBank {
    pub fn new(params: FilterParams) -> Self {
        Self {
            tracks: vec![None; NUM_KEYPOINTS],
            params,
        }
    }

    pub fn params(&self) -> &FilterParams {
        &self.params
    }

    pub fn track(&self, i: usize) -> Option<&JointTrack> {
        self.tracks[i].as_ref()
    }

    pub fn step(&mut self, frame: &ValidatedFrame, config: &PipelineConfig) -> Result<SmoothedPose, TrackingError> {
        let t = frame.frame.t;
        let mut joints = [None; NUM_KEYPOINTS];
        let mut coasted = [false; NUM_KEYPOINTS];
        for i in 0..NUM_KEYPOINTS {
            let measurement = frame.measurement(i);
            let slot = &mut self.tracks[i];
            let needs_init = slot.as_ref().is_none_or(|tr| tr.lost);
            if needs_init {
                if let Some(kp) = measurement {
                    *slot = Some(JointTrack::new(i, kp.position(), t, &self.params));
                    joints[i] = Some(kp.position());
                } else if let Some(tr) = slot.as_mut() {
                    // Still lost; keep the clock moving so a later re-init is clean.
                    tr.state.t_last = t;
                }
                coasted[i] = measurement.is_none();
                continue;
            }
            let track = slot.as_mut().expect("initialized track");
            let step = track.step(
                t,
                measurement.map(|k| (k.x, k.y, k.confidence)),
                config,
                &self.params,
            )?;
            joints[i] = step.position;
            coasted[i] = step.coasted;
        }
        Ok(SmoothedPose { t, joints, coasted })
    }

    /// Prior position of joint `i` at time `t` without mutating the track.
    pub fn predicted_position(&self, i: usize, t: f64) -> Option<Point> {
        let track = self.tracks[i].as_ref().filter(|tr| !tr.lost)?;
        let dt = t - track.state.t_last;
        if dt > 0.0 {
            predict(&track.state, dt, &self.params).ok().map(|s| s.position())
        } else {
            Some(track.state.position())
        }
    }
}
