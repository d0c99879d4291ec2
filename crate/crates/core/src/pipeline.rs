//! Per-match frame processing: validation, tracking, segmentation,
//! classification, impact scoring and timing.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::action::{ActionError, ActionWindow, ClassifierModel, Segmenter};
use crate::clock::{millis_between, Clock};
use crate::impact::{build_decision, detect_impact, DecisionPackage, ImpactError, StageTimers};
use crate::kinematics::WindowFrame;
use crate::model::{FrameRejection, FrameValidator, KeypointLayout, PipelineConfig, PoseFrame, Point};
use crate::tracking::{FilterParams, TrackerBank, TrackingError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame rejected: {0}")]
    Rejected(#[from] FrameRejection),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error(transparent)]
    Classifier(#[from] ActionError),
    #[error(transparent)]
    Impact(#[from] ImpactError),
    #[error("frame for match {got} routed to pipeline {expected}")]
    WrongMatch { expected: String, got: String },
}

impl PipelineError {
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Rejected(r) => r.code(),
            PipelineError::Tracking(e) => e.code(),
            PipelineError::Classifier(e) => e.code(),
            PipelineError::Impact(e) => e.code(),
            PipelineError::WrongMatch { .. } => "wrong_match",
        }
    }
}

/// Smoothed frame as shown in the jury overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayFrame {
    pub t: f64,
    /// Attacker joints in layout order; `null` where unresolved.
    pub kp: Vec<Option<Point>>,
    pub head: Option<Point>,
}

impl From<&WindowFrame> for OverlayFrame {
    fn from(f: &WindowFrame) -> Self {
        Self {
            t: f.t(),
            kp: f.pose.joints.to_vec(),
            head: f.opponent_head,
        }
    }
}

/// A decision together with the window that produced it.
#[derive(Debug, Clone)]
pub struct Emitted {
    pub decision: DecisionPackage,
    pub window: ActionWindow,
}

impl Emitted {
    pub fn overlay(&self) -> Vec<OverlayFrame> {
        self.window.frames.iter().map(OverlayFrame::from).collect()
    }
}

#[derive(Debug, Clone)]
struct AthleteState {
    id: String,
    trackers: TrackerBank,
    segmenter: Segmenter,
}

/// Counters for one match.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PipelineStats {
    pub frames: u64,
    pub rejected: u64,
    pub windows: u64,
    pub dropped_windows: u64,
    pub decisions: u64,
}

/// Processing state for one match. Frames must arrive in per-athlete time
/// order; the two athletes' streams may interleave freely.
pub struct MatchPipeline {
    match_id: String,
    config: PipelineConfig,
    params: FilterParams,
    clock: Arc<dyn Clock>,
    validator: FrameValidator,
    athletes: Vec<AthleteState>,
    stats: PipelineStats,
}

impl MatchPipeline {
    pub fn new(match_id: &str, config: PipelineConfig, params: FilterParams, clock: Arc<dyn Clock>) -> Self {
        Self {
            match_id: match_id.to_string(),
            config,
            params,
            clock,
            validator: FrameValidator::new(),
            athletes: Vec::new(),
            stats: PipelineStats::default(),
        }
    }

    pub fn match_id(&self) -> &str {
        &self.match_id
    }

    pub fn stats(&self) -> PipelineStats {
        self.stats
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn athlete_index(&mut self, id: &str) -> usize {
        if let Some(i) = self.athletes.iter().position(|a| a.id == id) {
            return i;
        }
        self.athletes.push(AthleteState {
            id: id.to_string(),
            trackers: TrackerBank::new(self.params),
            segmenter: Segmenter::new(),
        });
        self.athletes.len() - 1
    }

    /// Opponent head predicted to `t`; with more than two athletes the
    /// nearest other head is taken.
    fn opponent_head(&self, me: usize, t: f64, from: Option<Point>) -> Option<Point> {
        self.athletes
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != me)
            .filter_map(|(_, a)| a.trackers.predicted_position(KeypointLayout::HEAD, t))
            .min_by(|a, b| match from {
                Some(p) => a.distance(&p).total_cmp(&b.distance(&p)),
                None => std::cmp::Ordering::Equal,
            })
    }

    /// Runs one frame through the pipeline. At most one decision results.
    pub fn process(&mut self, frame: PoseFrame, model: &ClassifierModel) -> Result<Option<Emitted>, PipelineError> {
        if frame.match_id != self.match_id {
            return Err(PipelineError::WrongMatch {
                expected: self.match_id.clone(),
                got: frame.match_id,
            });
        }
        let started = self.clock.now();
        self.stats.frames += 1;
        let validated = match self.validator.validate(frame, &self.config) {
            Ok(v) => v,
            Err(e) => {
                self.stats.rejected += 1;
                return Err(e.into());
            }
        };
        let me = self.athlete_index(&validated.frame.athlete_id);
        let pose = self.athletes[me].trackers.step(&validated, &self.config)?;
        let head = self.opponent_head(me, pose.t, pose.joint(KeypointLayout::NOSE));
        let window_frame = WindowFrame { pose, opponent_head: head };

        let Some(raw) = self.athletes[me].segmenter.push(window_frame, &self.config) else {
            return Ok(None);
        };
        self.stats.windows += 1;
        let event_id = format!("E{}", self.stats.decisions + 1);
        let athlete = self.athletes[me].id.clone();
        let window = match ActionWindow::from_raw(event_id, self.match_id.clone(), athlete, raw, &self.config) {
            Ok(w) => w,
            Err(e) => {
                self.stats.dropped_windows += 1;
                warn!(match_id = %self.match_id, error = %e, "candidate window dropped");
                return Ok(None);
            }
        };
        let features_done = self.clock.now();
        let probs = model.classify(&window.features, &self.config)?;
        let classified = self.clock.now();
        let evidence = detect_impact(&window, &self.config);
        let scored = self.clock.now();

        let timers = StageTimers::new(
            millis_between(started, features_done),
            millis_between(features_done, classified),
            millis_between(classified, scored),
        );
        let decision = build_decision(&window, &probs, &evidence, &timers, &self.config, model.version)?;
        self.stats.decisions += 1;
        debug!(event = %decision.event_id, class = %decision.action_class, score = decision.score, "decision");
        Ok(Some(Emitted { decision, window }))
    }
}

/// Routes frames to per-match pipelines, creating them on first sight.
pub struct MatchRouter {
    config: PipelineConfig,
    params: FilterParams,
    clock: Arc<dyn Clock>,
    matches: HashMap<String, MatchPipeline>,
}

impl MatchRouter {
    pub fn new(config: PipelineConfig, params: FilterParams, clock: Arc<dyn Clock>) -> Self {
        Self {
            config,
            params,
            clock,
            matches: HashMap::new(),
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn get(&self, match_id: &str) -> Option<&MatchPipeline> {
        self.matches.get(match_id)
    }

    pub fn pipeline(&mut self, match_id: &str) -> &mut MatchPipeline {
        self.matches
            .entry(match_id.to_string())
            .or_insert_with(|| MatchPipeline::new(match_id, self.config.clone(), self.params, self.clock.clone()))
    }

    pub fn process(&mut self, frame: PoseFrame, model: &ClassifierModel) -> Result<Option<Emitted>, PipelineError> {
        let id = frame.match_id.clone();
        self.pipeline(&id).process(frame, model)
    }

    pub fn stats(&self) -> PipelineStats {
        let mut total = PipelineStats::default();
        for p in self.matches.values() {
            let s = p.stats();
            total.frames += s.frames;
            total.rejected += s.rejected;
            total.windows += s.windows;
            total.dropped_windows += s.dropped_windows;
            total.decisions += s.decisions;
        }
        total
    }
}

/// Runs a whole frame sequence and collects every decision.
pub fn run_frames<I>(frames: I, config: &PipelineConfig, params: FilterParams, model: &ClassifierModel, clock: Arc<dyn Clock>) -> (Vec<Emitted>, PipelineStats)
where
    I: IntoIterator<Item = PoseFrame>,
{
    let mut router = MatchRouter::new(config.clone(), params, clock);
    let mut out = Vec::new();
    for frame in frames {
        match router.process(frame, model) {
            Ok(Some(e)) => out.push(e),
            Ok(None) => {}
            Err(e) => debug!(error = %e, "frame skipped"),
        }
    }
    (out, router.stats())
}
