//! Head-kick officiating engine: pose streams in, scored decisions out.
//!
//! Frames flow through [`pipeline::MatchPipeline`]: validation, per-joint
//! Kalman tracking, candidate segmentation, feature extraction,
//! classification and impact verification. Decisions are resolved by a jury
//! in [`feedback`], whose verdicts feed retraining of the linear classifier.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` deliberately rejects NaN

pub mod action;
pub mod clock;
pub mod eval;
pub mod feedback;
pub mod impact;
pub mod jsonl;
pub mod kinematics;
pub mod model;
pub mod pipeline;
pub mod simulator;
pub mod tracking;

pub use action::{ClassProbabilities, ClassifierModel, ModelKind};
pub use clock::{Clock, FixedClock, ManualClock, MonotonicClock};
pub use feedback::{FeedbackSample, FinalRecord, JuryVerdict};
pub use impact::{DecisionPackage, Flag};
pub use model::{ActionClass, PipelineConfig, PoseFrame};
pub use pipeline::{Emitted, MatchPipeline, MatchRouter};
pub use tracking::FilterParams;
