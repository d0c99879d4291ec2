//! Feeding a recorded stream through the same pipeline the server uses.

use std::io::BufRead;
use std::time::{Duration, Instant};

use kickscore_core::{ClassifierModel, Emitted, MatchRouter, PoseFrame};
use serde::Serialize;
use tracing::warn;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ReplayStats {
    pub lines: u64,
    pub frames: u64,
    pub skipped: u64,
    pub decisions: u64,
    pub wall_s: f64,
}

/// `None` runs as fast as possible. `Some(f)` waits until wall time since
/// the first frame reaches `(t - t0) * f`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Pacing(pub Option<f64>);

/// Replays JSONL pose frames. Malformed or rejected lines are counted and
/// skipped; `sink` sees each decision in emission order.
pub fn replay<R, F, E>(reader: R, router: &mut MatchRouter, model: &ClassifierModel, pacing: Pacing, mut sink: F) -> Result<ReplayStats, E>
where
    R: BufRead,
    F: FnMut(&Emitted) -> Result<(), E>,
    E: From<std::io::Error>,
{
    let start = Instant::now();
    let mut stats = ReplayStats::default();
    let mut t0: Option<f64> = None;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        let frame = match PoseFrame::from_json(&line) {
            Ok(f) => f,
            Err(e) => {
                warn!(line = n + 1, error = %e, "skipping malformed line");
                stats.skipped += 1;
                continue;
            }
        };
        if let Pacing(Some(factor)) = pacing {
            let origin = *t0.get_or_insert(frame.t);
            let due = Duration::from_secs_f64(((frame.t - origin) * factor).max(0.0));
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        stats.frames += 1;
        match router.process(frame, model) {
            Ok(Some(emitted)) => {
                stats.decisions += 1;
                sink(&emitted)?;
            }
            Ok(None) => {}
            Err(e) => {
                warn!(line = n + 1, error = %e, "frame dropped");
                stats.skipped += 1;
            }
        }
    }
    stats.wall_s = start.elapsed().as_secs_f64();
    Ok(stats)
}
