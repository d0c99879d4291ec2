//! Seeded synthetic matches with exact ground truth.
//!
//! Two athletes face each other on the x axis. Between events both sway
//! gently; during an event the attacker either kicks at the defender's
//! head along a quadratic Bezier arc or slides forward along the mat.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlAppender, JsonlError};
use crate::model::{ActionClass, Keypoint, KeypointLayout as K, PoseFrame, Point, NUM_KEYPOINTS};

pub const ATTACKER_BLUE: &str = "blue";
pub const ATTACKER_RED: &str = "red";

const VISIBLE_CONFIDENCE: f64 = 0.95;
const DROPPED_CONFIDENCE: f64 = 0.1;
const LEAD_IN_S: f64 = 1.0;
const GAP_S: f64 = 1.0;
const TAIL_S: f64 = 1.0;
const STEP_IN_M: f64 = 0.35;
const CONTACT_HOLD_S: f64 = 0.15;
const RETRACT_S: f64 = 0.8;
const ROTATION_LEAD_S: f64 = 0.35;
const STANDARD_LEAN_DEG: f64 = 8.0;
const SLIDE_TRAVEL_M: f64 = 0.4;
const SLIDE_HALF_S: f64 = 0.5;
const SLIDE_FOOT_LIFT_M: f64 = 0.06;
const STANCE_HALF_M: f64 = 0.15;
const SWAY_M: f64 = 0.015;
const SWAY_HZ: f64 = 0.4;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid sim config: {0}")]
    InvalidConfig(String),
    #[error("infeasible_event: {event} needs {reach:.3} m of reach, leg is {leg:.3} m")]
    InfeasibleEvent { event: String, reach: f64, leg: f64 },
    #[error(transparent)]
    Io(#[from] JsonlError),
}

impl SimError {
    pub fn code(&self) -> &'static str {
        match self {
            SimError::InvalidConfig(_) => "invalid_config",
            SimError::InfeasibleEvent { .. } => "infeasible_event",
            SimError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub fps: f64,
    pub n_events: usize,
    /// Probabilities over slide, standard kick, turning kick.
    pub event_mix: [f64; 3],
    pub noise_sigma_m: f64,
    pub occlusion_prob: f64,
    pub athlete_height_m: f64,
    pub kick_peak_speed_m_s: f64,
    pub turning_rotation_deg: f64,
    pub match_id: String,
    /// Horizontal distance between the two hip centers at rest.
    pub opponent_distance_m: f64,
    /// Share of slides in which a slow foot is raised to the opponent's head.
    pub head_slide_fraction: f64,
    pub head_slide_speed_m_s: f64,
    /// Share of standard kicks that stop short of the head.
    pub near_miss_fraction: f64,
    /// Relative jitter applied to each kick's peak speed.
    pub speed_jitter: f64,
    /// Alternate the attacking athlete between events.
    pub alternate_attacker: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fps: 60.0,
            n_events: 10,
            event_mix: [1.0 / 3.0; 3],
            noise_sigma_m: 0.0,
            occlusion_prob: 0.0,
            athlete_height_m: 1.7,
            kick_peak_speed_m_s: 4.0,
            turning_rotation_deg: 156.0,
            match_id: "M1".into(),
            opponent_distance_m: 0.8,
            head_slide_fraction: 0.0,
            head_slide_speed_m_s: 2.0,
            near_miss_fraction: 0.0,
            speed_jitter: 0.05,
            alternate_attacker: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
        if self.event_mix.iter().any(|p| !(*p >= 0.0)) || (self.event_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("event_mix must be non-negative and sum to 1");
        }
        if !(self.fps >= 30.0 && self.fps.is_finite()) {
            return bad("fps must be >= 30");
        }
        for (name, v) in [
            ("athlete_height_m", self.athlete_height_m),
            ("kick_peak_speed_m_s", self.kick_peak_speed_m_s),
            ("turning_rotation_deg", self.turning_rotation_deg),
            ("opponent_distance_m", self.opponent_distance_m),
            ("head_slide_speed_m_s", self.head_slide_speed_m_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be > 0"));
            }
        }
        if !(self.noise_sigma_m >= 0.0 && self.noise_sigma_m.is_finite()) {
            return bad("noise_sigma_m must be >= 0");
        }
        for (name, v) in [
            ("occlusion_prob", self.occlusion_prob),
            ("head_slide_fraction", self.head_slide_fraction),
            ("near_miss_fraction", self.near_miss_fraction),
            ("speed_jitter", self.speed_jitter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.occlusion_prob >= 1.0 {
            return bad("occlusion_prob must be < 1");
        }
        Ok(())
    }
}

/// Generator-level event variant; finer than the scored class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Slide,
    HeadSlide,
    Standard,
    NearMiss,
    Turning,
}

impl EventKind {
    pub fn class(self) -> ActionClass {
        match self {
            EventKind::Slide | EventKind::HeadSlide => ActionClass::Slide,
            EventKind::Standard | EventKind::NearMiss => ActionClass::StandardHeadKick,
            EventKind::Turning => ActionClass::TurningHeadKick,
        }
    }

    pub fn score(self) -> u8 {
        match self {
            EventKind::NearMiss => 0,
            k => k.class().points_on_impact(),
        }
    }

    fn is_arc(self) -> bool {
        !matches!(self, EventKind::Slide)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEvent {
    #[serde(rename = "event")]
    pub event_id: String,
    #[serde(rename = "match")]
    pub match_id: String,
    pub athlete: String,
    pub kind: EventKind,
    #[serde(rename = "class")]
    pub true_class: ActionClass,
    #[serde(rename = "score")]
    pub true_score: u8,
    pub t_impact: f64,
    #[serde(rename = "rot_deg")]
    pub true_rotation_deg: f64,
    /// Inclusive tick range covered by the event.
    #[serde(rename = "frames")]
    pub frame_range: [u64; 2],
    pub peak_speed_m_s: f64,
}

impl GroundTruthEvent {
    pub fn score_consistent(&self) -> bool {
        self.true_class.admits_score(self.true_score) && (self.kind == EventKind::NearMiss || self.true_score == self.true_class.points_on_impact())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// Interleaved per tick: blue then red.
    pub frames: Vec<PoseFrame>,
    pub truth: Vec<GroundTruthEvent>,
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Integral of smoothstep from 0 to u.
fn smoothstep_integral(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u - 0.5 * u * u * u * u
}

fn lerp(a: Point, b: Point, u: f64) -> Point {
    Point::new(a.x + (b.x - a.x) * u, a.y + (b.y - a.y) * u)
}

#[derive(Debug, Clone)]
struct Bezier {
    p0: Point,
    p1: Point,
    p2: Point,
    /// Cumulative arc length at evenly spaced parameters.
    table: Vec<f64>,
}

impl Bezier {
    const SAMPLES: usize = 1024;

    fn new(p0: Point, p1: Point, p2: Point) -> Self {
        let mut b = Self { p0, p1, p2, table: Vec::with_capacity(Self::SAMPLES + 1) };
        let mut acc = 0.0;
        let mut prev = p0;
        b.table.push(0.0);
        for i in 1..=Self::SAMPLES {
            let p = b.at(i as f64 / Self::SAMPLES as f64);
            acc += p.distance(&prev);
            b.table.push(acc);
            prev = p;
        }
        b
    }

    fn at(&self, u: f64) -> Point {
        let v = 1.0 - u;
        Point::new(
            v * v * self.p0.x + 2.0 * v * u * self.p1.x + u * u * self.p2.x,
            v * v * self.p0.y + 2.0 * v * u * self.p1.y + u * u * self.p2.y,
        )
    }

    fn length(&self) -> f64 {
        self.table[Self::SAMPLES]
    }

    fn at_arc_length(&self, s: f64) -> Point {
        if s <= 0.0 {
            return self.p0;
        }
        if s >= self.length() {
            return self.p2;
        }
        let i = self.table.partition_point(|&v| v < s).max(1);
        let (a, b) = (self.table[i - 1], self.table[i]);
        let frac = if b > a { (s - a) / (b - a) } else { 0.0 };
        self.at((i as f64 - 1.0 + frac) / Self::SAMPLES as f64)
    }
}

/// Speed profile: smoothstep ramp up, cruise, linear stop.
#[derive(Debug, Clone, Copy)]
struct Profile {
    v: f64,
    t_acc: f64,
    t_cruise: f64,
    t_stop: f64,
}

impl Profile {
    fn fit(length: f64, v: f64, t_acc: f64, t_stop: f64) -> Self {
        let ramps = 0.5 * v * (t_acc + t_stop);
        let scale = if ramps > length { length / ramps } else { 1.0 };
        let t_cruise = ((length - ramps * scale) / v).max(0.0);
        Self { v, t_acc: t_acc * scale, t_cruise, t_stop: t_stop * scale }
    }

    fn duration(&self) -> f64 {
        self.t_acc + self.t_cruise + self.t_stop
    }

    fn distance(&self, t: f64) -> f64 {
        let d_acc = 0.5 * self.v * self.t_acc;
        if t <= self.t_acc {
            return self.v * self.t_acc * smoothstep_integral(t / self.t_acc);
        }
        let t = t - self.t_acc;
        if t <= self.t_cruise {
            return d_acc + self.v * t;
        }
        let tau = (t - self.t_cruise).min(self.t_stop);
        d_acc + self.v * self.t_cruise + self.v * (tau - tau * tau / (2.0 * self.t_stop))
    }
}

/// Body dimensions derived from height.
#[derive(Debug, Clone, Copy)]
struct Body {
    h: f64,
}

impl Body {
    fn hip_y(&self) -> f64 {
        0.53 * self.h
    }
    fn neck_rise(&self) -> f64 {
        0.29 * self.h
    }
    fn nose_rise(&self) -> f64 {
        0.11 * self.h
    }
    fn foot_y(&self) -> f64 {
        0.05 * self.h
    }
    fn segment(&self) -> f64 {
        0.25 * self.h
    }
    fn leg(&self) -> f64 {
        2.0 * self.segment()
    }
}

/// Per-tick pose parameters for one athlete, before rendering.
#[derive(Debug, Clone, Copy)]
struct Pose {
    hip: Point,
    facing: f64,
    torso_deg: f64,
    kick_ankle: Option<Point>,
    front_lift: f64,
}

fn rotate_about(center: Point, half: f64, deg: f64) -> (Point, Point) {
    let (s, c) = deg.to_radians().sin_cos();
    (
        Point::new(center.x - half * c, center.y - half * s),
        Point::new(center.x + half * c, center.y + half * s),
    )
}

/// Knee for a two-segment leg, bent toward the facing direction.
fn knee(hip: Point, ankle: Point, seg: f64, facing: f64) -> Point {
    let d = hip.distance(&ankle);
    let mid = hip.midpoint(&ankle);
    if d >= 2.0 * seg - 1e-9 || d < 1e-9 {
        return mid;
    }
    let off = (seg * seg - 0.25 * d * d).sqrt();
    let (ux, uy) = ((ankle.x - hip.x) / d, (ankle.y - hip.y) / d);
    let (mut nx, mut ny) = (-uy, ux);
    if nx * facing < 0.0 || (nx.abs() < 1e-6 && ny < 0.0) {
        nx = -nx;
        ny = -ny;
    }
    Point::new(mid.x + off * nx, mid.y + off * ny)
}

fn render(body: &Body, pose: &Pose) -> [Point; NUM_KEYPOINTS] {
    let f = pose.facing;
    let mut p = [Point::default(); NUM_KEYPOINTS];
    let neck = Point::new(pose.hip.x + f * 0.05, pose.hip.y + body.neck_rise());
    let nose = Point::new(neck.x + f * 0.06, neck.y + body.nose_rise());
    let (rs, ls) = rotate_about(neck, 0.19, pose.torso_deg);
    let (rh, lh) = rotate_about(pose.hip, 0.09, pose.torso_deg);
    p[K::NOSE] = nose;
    p[K::NECK] = neck;
    p[K::R_SHOULDER] = rs;
    p[K::L_SHOULDER] = ls;
    for (sh, el, wr) in [(K::R_SHOULDER, K::R_ELBOW, K::R_WRIST), (K::L_SHOULDER, K::L_ELBOW, K::L_WRIST)] {
        p[el] = Point::new(p[sh].x + f * 0.08, p[sh].y - 0.22);
        p[wr] = Point::new(p[el].x + f * 0.15, p[el].y + 0.12);
    }
    p[K::R_HIP] = rh;
    p[K::L_HIP] = lh;
    let rest_r = Point::new(pose.hip.x - f * STANCE_HALF_M, body.foot_y());
    let r_ankle = pose.kick_ankle.unwrap_or(rest_r);
    let l_ankle = Point::new(pose.hip.x + f * STANCE_HALF_M, body.foot_y() + pose.front_lift);
    p[K::R_ANKLE] = r_ankle;
    p[K::L_ANKLE] = l_ankle;
    p[K::R_KNEE] = knee(rh, r_ankle, body.segment(), f);
    p[K::L_KNEE] = knee(lh, l_ankle, body.segment(), f);
    p[K::R_EYE] = Point::new(nose.x - f * 0.02, nose.y + 0.03);
    p[K::L_EYE] = Point::new(nose.x - f * 0.01, nose.y + 0.035);
    p[K::R_EAR] = Point::new(nose.x - f * 0.09, nose.y + 0.02);
    p[K::L_EAR] = Point::new(nose.x - f * 0.07, nose.y + 0.025);
    p
}

#[derive(Debug, Clone, Copy)]
struct Athlete {
    base_x: f64,
    facing: f64,
    sway_phase: f64,
}

impl Athlete {
    fn idle_hip(&self, body: &Body, t: f64) -> Point {
        let w = std::f64::consts::TAU * SWAY_HZ;
        Point::new(
            self.base_x + SWAY_M * (w * t + self.sway_phase).sin(),
            body.hip_y() + 0.004 * (2.0 * w * t + self.sway_phase).sin(),
        )
    }

    fn idle_pose(&self, body: &Body, t: f64) -> Pose {
        Pose {
            hip: self.idle_hip(body, t),
            facing: self.facing,
            torso_deg: 0.0,
            kick_ankle: None,
            front_lift: 0.0,
        }
    }

    fn nose(&self, body: &Body, t: f64) -> Point {
        render(body, &self.idle_pose(body, t))[K::NOSE]
    }
}

/// A planned event on the timeline.
#[derive(Debug, Clone)]
struct Plan {
    kind: EventKind,
    attacker: usize,
    t0: f64,
    t_impact: f64,
    t_end: f64,
    rotation_deg: f64,
    peak_speed: f64,
    arc: Option<Arc>,
}

#[derive(Debug, Clone)]
struct Arc {
    path: Bezier,
    profile: Profile,
    contact: Point,
    retract_to: Point,
}

impl Plan {
    fn step_in(&self, t: f64) -> f64 {
        let tau = t - self.t0;
        let t_ext = self.t_impact - self.t0;
        let t_back = self.t_impact + CONTACT_HOLD_S;
        if t <= self.t_impact {
            STEP_IN_M * smoothstep(tau / t_ext)
        } else if t <= t_back {
            STEP_IN_M
        } else {
            STEP_IN_M * (1.0 - smoothstep((t - t_back) / RETRACT_S))
        }
    }

    fn rotation(&self, t: f64) -> f64 {
        let t_back = self.t_impact + CONTACT_HOLD_S;
        if t <= self.t_impact {
            self.rotation_deg * smoothstep((t - (self.t_impact - ROTATION_LEAD_S)) / ROTATION_LEAD_S)
        } else if t <= t_back {
            self.rotation_deg
        } else {
            self.rotation_deg * (1.0 - smoothstep((t - t_back) / RETRACT_S))
        }
    }

    fn attacker_pose(&self, who: &Athlete, body: &Body, t: f64) -> Pose {
        let mut pose = who.idle_pose(body, t);
        match &self.arc {
            Some(arc) => {
                pose.hip.x += who.facing * self.step_in(t);
                pose.torso_deg = self.rotation(t);
                let t_back = self.t_impact + CONTACT_HOLD_S;
                pose.kick_ankle = Some(if t <= self.t_impact {
                    arc.path.at_arc_length(arc.profile.distance(t - self.t0))
                } else if t <= t_back {
                    arc.contact
                } else {
                    lerp(arc.contact, arc.retract_to, smoothstep((t - t_back) / RETRACT_S))
                });
            }
            None => {
                let out = smoothstep((t - self.t0) / SLIDE_HALF_S);
                let back = smoothstep((t - self.t0 - SLIDE_HALF_S) / SLIDE_HALF_S);
                pose.hip.x += who.facing * SLIDE_TRAVEL_M * (out - back);
                let u = ((t - self.t0) / (2.0 * SLIDE_HALF_S)).clamp(0.0, 1.0);
                pose.front_lift = SLIDE_FOOT_LIFT_M * (std::f64::consts::PI * u).sin();
            }
        }
        pose
    }
}

fn pick_kind(rng: &mut ChaCha8Rng, cfg: &SimConfig) -> EventKind {
    let r: f64 = rng.random();
    let sub: f64 = rng.random();
    let [slide, standard, _] = cfg.event_mix;
    if r < slide {
        if sub < cfg.head_slide_fraction {
            EventKind::HeadSlide
        } else {
            EventKind::Slide
        }
    } else if r < slide + standard {
        if sub < cfg.near_miss_fraction {
            EventKind::NearMiss
        } else {
            EventKind::Standard
        }
    } else {
        EventKind::Turning
    }
}

fn plan_events(cfg: &SimConfig, body: &Body, athletes: &[Athlete; 2], rng: &mut ChaCha8Rng) -> Result<Vec<Plan>, SimError> {
    let mut plans = Vec::with_capacity(cfg.n_events);
    let mut t = LEAD_IN_S;
    for i in 0..cfg.n_events {
        let kind = pick_kind(rng, cfg);
        let jitter = 1.0 + cfg.speed_jitter * (2.0 * rng.random::<f64>() - 1.0);
        let attacker = if cfg.alternate_attacker { i % 2 } else { 0 };
        let (me, other) = (&athletes[attacker], &athletes[1 - attacker]);
        // Start on a tick boundary so impact timing is reproducible.
        let t0 = (t * cfg.fps).ceil() / cfg.fps;
        let plan = if kind.is_arc() {
            let (speed, t_acc, stop_frames, rotation) = match kind {
                EventKind::HeadSlide => (cfg.head_slide_speed_m_s, 0.25, 1.0, 0.0),
                EventKind::Turning => (cfg.kick_peak_speed_m_s * jitter, 0.12, 2.0, cfg.turning_rotation_deg),
                _ => (cfg.kick_peak_speed_m_s * jitter, 0.12, 2.0, STANDARD_LEAN_DEG),
            };
            let start = Point::new(me.idle_hip(body, t0).x - me.facing * STANCE_HALF_M, body.foot_y());
            // Contact time depends on path length, which depends on the
            // target; two passes settle the defender's sway.
            let mut t_impact = t0 + 0.5;
            let mut arc = None;
            for _ in 0..3 {
                let nose = other.nose(body, t_impact);
                let contact = match kind {
                    EventKind::NearMiss => Point::new(nose.x - me.facing * 0.05, nose.y - 0.15),
                    _ => Point::new(nose.x - me.facing * 0.03, nose.y),
                };
                let control = Point::new(start.x + me.facing * 0.1, contact.y + 0.05);
                let path = Bezier::new(start, control, contact);
                let profile = Profile::fit(path.length(), speed, t_acc, stop_frames / cfg.fps);
                t_impact = t0 + profile.duration();
                let t_back_end = t_impact + CONTACT_HOLD_S + RETRACT_S;
                let retract_to = Point::new(me.idle_hip(body, t_back_end).x - me.facing * STANCE_HALF_M, body.foot_y());
                arc = Some(Arc { path, profile, contact, retract_to });
            }
            let arc = arc.expect("at least one pass");
            let hip = Point::new(me.idle_hip(body, t_impact).x + me.facing * STEP_IN_M, body.hip_y());
            let reach = hip.distance(&arc.contact);
            if reach > body.leg() {
                return Err(SimError::InfeasibleEvent {
                    event: format!("E{}", i + 1),
                    reach,
                    leg: body.leg(),
                });
            }
            Plan {
                kind,
                attacker,
                t0,
                t_impact,
                t_end: t_impact + CONTACT_HOLD_S + RETRACT_S,
                rotation_deg: rotation,
                peak_speed: speed,
                arc: Some(arc),
            }
        } else {
            Plan {
                kind,
                attacker,
                t0,
                t_impact: t0 + SLIDE_HALF_S,
                t_end: t0 + 2.0 * SLIDE_HALF_S,
                rotation_deg: 0.0,
                peak_speed: 1.5 * SLIDE_TRAVEL_M / SLIDE_HALF_S,
                arc: None,
            }
        };
        t = plan.t_end + GAP_S;
        plans.push(plan);
    }
    Ok(plans)
}

/// Generates the interleaved two-athlete stream and its ground truth.
pub fn generate_match(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let body = Body { h: cfg.athlete_height_m };
    let mut plan_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let athletes = [
        Athlete { base_x: 0.0, facing: 1.0, sway_phase: plan_rng.random::<f64>() * std::f64::consts::TAU },
        Athlete { base_x: cfg.opponent_distance_m, facing: -1.0, sway_phase: plan_rng.random::<f64>() * std::f64::consts::TAU },
    ];
    let names = [ATTACKER_BLUE, ATTACKER_RED];
    let plans = plan_events(cfg, &body, &athletes, &mut plan_rng)?;

    let t_last = plans.last().map_or(LEAD_IN_S, |p| p.t_end + GAP_S) + TAIL_S;
    let ticks = (t_last * cfg.fps).ceil() as u64;
    let noise = (cfg.noise_sigma_m > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma_m).expect("sigma validated"));

    let mut frames = Vec::with_capacity(2 * ticks as usize);
    let mut active = 0usize;
    for tick in 0..ticks {
        let t = tick as f64 / cfg.fps;
        while active < plans.len() && t > plans[active].t_end {
            active += 1;
        }
        let current = plans.get(active).filter(|p| t >= p.t0);
        for (i, who) in athletes.iter().enumerate() {
            let pose = match current {
                Some(plan) if plan.attacker == i => plan.attacker_pose(who, &body, t),
                _ => who.idle_pose(&body, t),
            };
            let points = render(&body, &pose);
            let keypoints = points
                .iter()
                .map(|p| {
                    let (mut x, mut y) = (p.x, p.y);
                    if let Some(n) = &noise {
                        x += n.sample(&mut noise_rng);
                        y += n.sample(&mut noise_rng);
                    }
                    let dropped = noise_rng.random::<f64>() < cfg.occlusion_prob;
                    Keypoint::new(x, y, if dropped { DROPPED_CONFIDENCE } else { VISIBLE_CONFIDENCE })
                })
                .collect();
            frames.push(PoseFrame {
                t,
                match_id: cfg.match_id.clone(),
                athlete_id: names[i].to_string(),
                keypoints,
            });
        }
    }

    let truth = plans
        .iter()
        .enumerate()
        .map(|(i, p)| GroundTruthEvent {
            event_id: format!("E{}", i + 1),
            match_id: cfg.match_id.clone(),
            athlete: names[p.attacker].to_string(),
            kind: p.kind,
            true_class: p.kind.class(),
            true_score: p.kind.score(),
            t_impact: p.t_impact,
            true_rotation_deg: p.rotation_deg,
            frame_range: [(p.t0 * cfg.fps).round() as u64, (p.t_end * cfg.fps).floor() as u64],
            peak_speed_m_s: p.peak_speed,
        })
        .collect();
    Ok(SimOutput { frames, truth })
}

/// Jury minutes saved per day when manual replay reviews are avoided.
pub fn review_time_savings(matches_per_day: f64, requests_per_match: f64, minutes_per_review: f64) -> f64 {
    matches_per_day * requests_per_match * minutes_per_review
}

/// `<stem>.truth.jsonl` next to a stream file.
pub fn truth_path_for(stream: &Path) -> std::path::PathBuf {
    let stem = stream.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stream.with_file_name(format!("{stem}.truth.jsonl"))
}

pub fn write_output(out: &SimOutput, stream: &Path, truth: &Path) -> Result<(), SimError> {
    let _ = std::fs::remove_file(stream);
    let _ = std::fs::remove_file(truth);
    let mut s = JsonlAppender::open(stream)?.without_sync();
    for f in &out.frames {
        s.append(f)?;
    }
    let mut g = JsonlAppender::open(truth)?.without_sync();
    for e in &out.truth {
        g.append(e)?;
    }
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<Vec<GroundTruthEvent>, SimError> {
    Ok(jsonl::read_all(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::torso_rotation;

    fn cfg(mix: [f64; 3], n: usize) -> SimConfig {
        SimConfig { seed: 42, n_events: n, event_mix: mix, ..SimConfig::default() }
    }

    fn stream_of<'a>(out: &'a SimOutput, athlete: &'a str) -> impl Iterator<Item = &'a PoseFrame> + 'a {
        out.frames.iter().filter(move |f| f.athlete_id == athlete)
    }

    fn joints(f: &PoseFrame) -> [Option<Point>; NUM_KEYPOINTS] {
        let mut j = [None; NUM_KEYPOINTS];
        for (i, kp) in f.keypoints.iter().enumerate() {
            j[i] = Some(kp.position());
        }
        j
    }

    #[test]
    fn same_seed_same_stream() {
        let c = SimConfig { noise_sigma_m: 0.02, occlusion_prob: 0.05, ..cfg([0.3, 0.3, 0.4], 10) };
        let a = generate_match(&c).unwrap();
        let b = generate_match(&c).unwrap();
        assert_eq!(a, b);
        let other = generate_match(&SimConfig { seed: 43, ..c }).unwrap();
        assert_ne!(a.frames, other.frames);
    }

    #[test]
    fn zero_events_is_a_valid_idle_stream() {
        let out = generate_match(&cfg([1.0, 0.0, 0.0], 0)).unwrap();
        assert!(out.truth.is_empty());
        assert!(!out.frames.is_empty());
        assert!(out.frames.iter().all(|f| f.keypoints.len() == NUM_KEYPOINTS));
    }

    #[test]
    fn turning_kick_rotates_by_configured_amount() {
        let out = generate_match(&SimConfig { alternate_attacker: false, ..cfg([0.0, 0.0, 1.0], 3) }).unwrap();
        for e in &out.truth {
            let frames: Vec<_> = stream_of(&out, &e.athlete)
                .filter(|f| f.t >= e.t_impact - 0.5 && f.t <= e.t_impact + 1e-9)
                .map(joints)
                .collect();
            let rot = torso_rotation(frames.iter()).unwrap();
            assert!((rot - 156.0).abs() <= 2.0, "rotation {rot}");
        }
    }

    #[test]
    fn slides_stay_below_head_band() {
        let c = cfg([1.0, 0.0, 0.0], 6);
        let out = generate_match(&c).unwrap();
        let blue: Vec<_> = stream_of(&out, "blue").collect();
        let red: Vec<_> = stream_of(&out, "red").collect();
        for e in &out.truth {
            assert_eq!(e.kind, EventKind::Slide);
            let (me, other) = if e.athlete == "blue" { (&blue, &red) } else { (&red, &blue) };
            for (a, d) in me.iter().zip(other.iter()) {
                let head = d.keypoints[K::NOSE].y;
                for ankle in [K::R_ANKLE, K::L_ANKLE] {
                    assert!(a.keypoints[ankle].y <= head - 0.2);
                }
            }
        }
    }

    #[test]
    fn kicks_reach_head_with_prescribed_speed() {
        let c = SimConfig { speed_jitter: 0.0, alternate_attacker: false, ..cfg([0.0, 1.0, 0.0], 2) };
        let out = generate_match(&c).unwrap();
        let blue: Vec<_> = stream_of(&out, "blue").collect();
        let red: Vec<_> = stream_of(&out, "red").collect();
        for e in &out.truth {
            let k = blue.iter().position(|f| (f.t - e.t_impact).abs() < 0.5 / c.fps).expect("impact tick");
            let ankle = blue[k].keypoints[K::R_ANKLE].position();
            let nose = red[k].keypoints[K::NOSE].position();
            assert!(ankle.distance(&nose) < 0.05, "{:?} vs {:?}", ankle, nose);
            let v = blue[k - 10].keypoints[K::R_ANKLE].position().distance(&blue[k - 11].keypoints[K::R_ANKLE].position()) * c.fps;
            assert!((v - 4.0).abs() < 0.05, "cruise speed {v}");
        }
    }

    #[test]
    fn truth_scores_follow_the_table() {
        let c = SimConfig { head_slide_fraction: 0.5, near_miss_fraction: 0.5, ..cfg([0.4, 0.3, 0.3], 40) };
        let out = generate_match(&c).unwrap();
        assert!(out.truth.iter().all(GroundTruthEvent::score_consistent));
        let kinds: std::collections::HashSet<_> = out.truth.iter().map(|e| e.kind).collect();
        assert_eq!(kinds.len(), 5);
    }

    #[test]
    fn unreachable_opponent_is_infeasible() {
        let c = SimConfig { opponent_distance_m: 2.0, ..cfg([0.0, 1.0, 0.0], 1) };
        assert_eq!(generate_match(&c).unwrap_err().code(), "infeasible_event");
        let c = SimConfig { opponent_distance_m: 2.0, ..cfg([1.0, 0.0, 0.0], 1) };
        assert!(generate_match(&c).is_ok());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate_match(&cfg([0.5, 0.5, 0.5], 1)).is_err());
        assert!(generate_match(&SimConfig { fps: 20.0, ..SimConfig::default() }).is_err());
        assert!(generate_match(&SimConfig { athlete_height_m: 0.0, ..SimConfig::default() }).is_err());
    }

    #[test]
    fn review_time_examples() {
        assert_eq!(review_time_savings(40.0, 3.0, 1.5), 180.0);
        assert_eq!(review_time_savings(0.0, 3.0, 1.5), 0.0);
        assert_eq!(review_time_savings(10.0, 2.0, 1.5), 30.0);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stream = dir.path().join("m.jsonl");
        let truth = truth_path_for(&stream);
        assert_eq!(truth.file_name().unwrap(), "m.truth.jsonl");
        let out = generate_match(&cfg([0.3, 0.3, 0.4], 3)).unwrap();
        write_output(&out, &stream, &truth).unwrap();
        assert_eq!(read_truth(&truth).unwrap(), out.truth);
        let frames: Vec<PoseFrame> = jsonl::read_all(&stream).unwrap();
        assert_eq!(frames, out.frames);
    }
}
