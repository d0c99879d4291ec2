//! Scoring decisions against simulator ground truth.

use serde::{Deserialize, Serialize};

use crate::impact::DecisionPackage;
use crate::model::ActionClass;
use crate::simulator::GroundTruthEvent;

/// Maximum gap between a window's end and the true impact time for a
/// decision to be credited to that event.
pub const MATCH_TOLERANCE_S: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean: f64,
    pub p95: f64,
    pub max: f64,
}

impl LatencySummary {
    /// Nearest-rank percentiles; all zero for an empty slice.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self { mean: 0.0, p95: 0.0, max: 0.0 };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p95: percentile(&sorted, 95.0),
            max: sorted[sorted.len() - 1],
        }
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Outcome for one ground-truth event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventOutcome {
    pub event: String,
    pub true_class: ActionClass,
    pub true_score: u8,
    /// `None` when no decision was emitted for the event.
    pub decision: Option<String>,
    pub class: ActionClass,
    pub score: u8,
}

impl EventOutcome {
    pub fn class_correct(&self) -> bool {
        self.class == self.true_class
    }

    pub fn score_correct(&self) -> bool {
        self.score == self.true_score
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub outcomes: Vec<EventOutcome>,
    /// Decisions credited to no event.
    pub spurious: Vec<String>,
}

impl Evaluation {
    pub fn events(&self) -> usize {
        self.outcomes.len()
    }

    pub fn correct(&self) -> usize {
        self.outcomes.iter().filter(|o| o.class_correct()).count()
    }

    /// Class accuracy; spurious decisions count as errors.
    pub fn accuracy(&self) -> f64 {
        let denom = self.outcomes.len() + self.spurious.len();
        if denom == 0 {
            1.0
        } else {
            self.correct() as f64 / denom as f64
        }
    }

    /// Correctly classified events whose score still differs.
    pub fn score_mismatches(&self) -> Vec<&EventOutcome> {
        self.outcomes.iter().filter(|o| o.class_correct() && !o.score_correct()).collect()
    }

    /// Fraction of truth slides that received points.
    pub fn fp_rate(&self) -> f64 {
        let scores: Vec<u8> = self.outcomes.iter().map(|o| o.score).collect();
        let truth: Vec<ActionClass> = self.outcomes.iter().map(|o| o.true_class).collect();
        crate::feedback::fp_rate(&scores, &truth).expect("aligned by construction")
    }
}

/// Credits each truth event with the nearest unclaimed decision from the
/// same match and athlete whose window ends within the tolerance.
/// Events without a decision count as "no score" (class slide, 0 points).
pub fn evaluate(decisions: &[DecisionPackage], truth: &[GroundTruthEvent], tolerance_s: f64) -> Evaluation {
    let mut claimed = vec![false; decisions.len()];
    let mut outcomes = Vec::with_capacity(truth.len());
    for ev in truth {
        let best = decisions
            .iter()
            .enumerate()
            .filter(|(i, d)| !claimed[*i] && d.match_id == ev.match_id && d.athlete == ev.athlete)
            .map(|(i, d)| (i, (d.window.t_end - ev.t_impact).abs()))
            .filter(|(_, gap)| *gap <= tolerance_s)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let outcome = match best {
            Some((i, _)) => {
                claimed[i] = true;
                let d = &decisions[i];
                EventOutcome {
                    event: ev.event_id.clone(),
                    true_class: ev.true_class,
                    true_score: ev.true_score,
                    decision: Some(d.event_id.clone()),
                    class: d.action_class,
                    score: d.score,
                }
            }
            None => EventOutcome {
                event: ev.event_id.clone(),
                true_class: ev.true_class,
                true_score: ev.true_score,
                decision: None,
                class: ActionClass::Slide,
                score: 0,
            },
        };
        outcomes.push(outcome);
    }
    let spurious = decisions
        .iter()
        .zip(&claimed)
        .filter(|(_, c)| !**c)
        .map(|(d, _)| d.event_id.clone())
        .collect();
    Evaluation { outcomes, spurious }
}

/// Summary written by `replay --metrics`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub events: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fp_rate: Option<f64>,
    pub latency_ms: LatencySummary,
    pub budget_violations: usize,
    pub decisions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_mismatches: Option<usize>,
}

impl Metrics {
    pub fn new(decisions: &[DecisionPackage], evaluation: Option<&Evaluation>, budget_ms: f64) -> Self {
        let totals: Vec<f64> = decisions.iter().map(|d| d.latency_ms.t_total_ms).collect();
        Self {
            events: evaluation.map_or(decisions.len(), Evaluation::events),
            accuracy: evaluation.map(Evaluation::accuracy),
            fp_rate: evaluation.map(Evaluation::fp_rate),
            latency_ms: LatencySummary::from_samples(&totals),
            budget_violations: totals.iter().filter(|t| **t > budget_ms).count(),
            decisions: decisions.len(),
            score_mismatches: evaluation.map(|e| e.score_mismatches().len()),
        }
    }
}
