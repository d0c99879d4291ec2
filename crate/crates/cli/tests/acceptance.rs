//! End-to-end acceptance checks. Each test prints one `[PASS]`/`[FAIL]`
//! line to stderr, bypassing the harness's output capture.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use kickscore_core::feedback::feedback_loss_probs;
use kickscore_core::impact::{assign_score, ImpactEvidence};
use kickscore_core::kinematics::deceleration;
use kickscore_core::tracking::{predict, update, KalmanState};
use kickscore_core::{ActionClass, ClassifierModel, DecisionPackage, FilterParams, PipelineConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde_json::Value;
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio_tungstenite::tungstenite::Message;

fn verdict(name: &str, pass: bool, detail: &str) {
    let line = format!("[{}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "{name}: {detail}");
}

fn kickscore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kickscore")).args(args).output().expect("spawn kickscore")
}

fn ok_json(args: &[&str]) -> Value {
    let out = kickscore(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn deceleration_arithmetic() {
    let a = deceleration(4.1, 0.6, 0.033).unwrap();
    let b = deceleration(3.5, 0.4, 0.033).unwrap();
    let pass = close(a, 106.06, 0.1) && close(b, 93.94, 0.1);
    verdict("deceleration arithmetic", pass, &format!("{a:.2} and {b:.2} m/s^2"));
}

#[test]
fn impact_conjunction() {
    let cfg = PipelineConfig::default();
    let score = |decel: f64, iou: f64, class: ActionClass| {
        let ev = ImpactEvidence::new(decel, iou, 1.0, 156.0, &cfg);
        (ev.impact_detected, assign_score(class, &ev, &cfg))
    };
    let (hit, turning) = score(93.9, 0.35, ActionClass::TurningHeadKick);
    let (_, promoted) = score(93.9, 0.35, ActionClass::StandardHeadKick);
    let (low_iou_hit, low_iou) = score(93.9, 0.29, ActionClass::TurningHeadKick);
    let (low_a_hit, low_a) = score(40.0, 0.35, ActionClass::TurningHeadKick);
    let pass = hit
        && turning.points == 5
        && promoted.points == 5
        && promoted.action == ActionClass::TurningHeadKick
        && !low_iou_hit
        && low_iou.points == 0
        && !low_a_hit
        && low_a.points == 0;
    verdict(
        "impact conjunction",
        pass,
        &format!(
            "a=93.9 iou=0.35 rot=156 -> {} ({}); iou 0.29 -> {}; a 40 -> {}",
            turning.points, promoted.action, low_iou.points, low_a.points
        ),
    );
}

#[test]
fn latency_budget() {
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("bench.jsonl");
    ok_json(&["simulate", "--seed", "100", "--events", "100", "--noise", "0.01", "--out", p(&stream)]);
    let v = ok_json(&["bench", "--in", p(&stream)]);
    let p95 = v["latency_ms"]["p95"].as_f64().unwrap();
    let additive = v["additive"].as_bool().unwrap();
    let decisions = v["decisions"].as_u64().unwrap();
    let pass = decisions > 0 && p95 <= 200.0 && additive;
    verdict("latency budget", pass, &format!("{decisions} decisions, p95 {p95:.3} ms, additive {additive}"));
}

fn replay_metrics(dir: &Path, name: &str, extra: &[&str]) -> Value {
    let stream = dir.join(format!("{name}.jsonl"));
    let mut args = vec!["simulate", "--out", p(&stream)];
    args.extend_from_slice(extra);
    ok_json(&args);
    ok_json(&[
        "replay",
        "--in",
        p(&stream),
        "--truth",
        p(&dir.join(format!("{name}.truth.jsonl"))),
        "--out",
        p(&dir.join(format!("{name}.decisions.jsonl"))),
    ])
}

#[test]
fn end_to_end_oracle_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let clean = replay_metrics(dir.path(), "clean", &["--seed", "2024", "--events", "200"]);
    let noisy = replay_metrics(
        dir.path(),
        "noisy",
        &["--seed", "2024", "--events", "200", "--noise", "0.02", "--occlusion", "0.05"],
    );
    let acc_clean = clean["accuracy"].as_f64().unwrap();
    let mismatches = clean["score_mismatches"].as_u64().unwrap();
    let acc_noisy = noisy["accuracy"].as_f64().unwrap();
    let pass = clean["events"] == 200 && acc_clean >= 0.99 && mismatches == 0 && acc_noisy >= 0.90;
    verdict(
        "end-to-end oracle equivalence",
        pass,
        &format!("clean accuracy {acc_clean:.3} with {mismatches} score mismatches; noisy accuracy {acc_noisy:.3}"),
    );
}

#[test]
fn kalman_smoothing() {
    const TRIALS: u64 = 100;
    const STEPS: usize = 120;
    const SIGMA: f64 = 0.02;
    let params = FilterParams::default();
    let dt = 1.0 / 60.0;
    let noise = Normal::new(0.0, SIGMA).unwrap();
    let start = Uniform::new(-2.0, 2.0).unwrap();
    let vel = Uniform::new(-3.0, 3.0).unwrap();
    let (mut wins, mut psd_ok) = (0, true);
    for seed in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x0, y0, vx, vy) = (start.sample(&mut rng), start.sample(&mut rng), vel.sample(&mut rng), vel.sample(&mut rng));
        let truth = |k: usize| (x0 + vx * k as f64 * dt, y0 + vy * k as f64 * dt);
        let measure = |k: usize, rng: &mut ChaCha8Rng| {
            let (x, y) = truth(k);
            kickscore_core::model::Point::new(x + noise.sample(rng), y + noise.sample(rng))
        };
        let z0 = measure(0, &mut rng);
        let mut state = KalmanState::new(z0, 0.0, &params);
        let (mut raw_se, mut filt_se) = (0.0, 0.0);
        for k in 1..STEPS {
            let z = measure(k, &mut rng);
            let prior = predict(&state, dt, &params).unwrap();
            psd_ok &= prior.covariance_is_psd(1e-9);
            state = update(&prior, z, &params).unwrap();
            psd_ok &= state.covariance_is_psd(1e-9);
            let (tx, ty) = truth(k);
            let est = state.position();
            raw_se += (z.x - tx).powi(2) + (z.y - ty).powi(2);
            filt_se += (est.x - tx).powi(2) + (est.y - ty).powi(2);
        }
        if filt_se < raw_se {
            wins += 1;
        }
    }
    verdict(
        "kalman smoothing",
        wins >= 95 && psd_ok,
        &format!("filtered beats raw RMSE in {wins}/{TRIALS} tracks, covariance PSD throughout: {psd_ok}"),
    );
}

#[test]
fn feedback_loss() {
    let independent = -(0.8f64).ln() + 0.5 * (0.8f64 - 1.0).powi(2);
    let value = feedback_loss_probs(&[0.1, 0.8, 0.1], ActionClass::from_ordinal(1).unwrap(), 1.0, 0.5);
    let worked = close(independent, 0.2431, 1e-4) && close(value, independent, 1e-12);

    let sample = (0usize..3, prop::bool::ANY, prop::array::uniform3(0.0f64..1.0)).prop_map(|(y, hot, raw)| {
        if hot {
            let mut p = [0.0; 3];
            p[(y + usize::from(raw[0] > 0.5)) % 3] = 1.0;
            (p, y)
        } else {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            (raw.map(|r| (r + 1e-9 / 3.0) / s), y)
        }
    });
    let mut runner = TestRunner::new(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() });
    let fuzz = runner.run(&sample, |(p, y)| {
        let loss = feedback_loss_probs(&p, ActionClass::from_ordinal(y).unwrap(), 1.0, 0.5);
        let one_hot_agree = p[y] == 1.0;
        prop_assert!(loss >= 0.0);
        prop_assert_eq!(loss == 0.0, one_hot_agree, "p={:?} y={} loss={}", p, y, loss);
        Ok(())
    });
    verdict(
        "feedback loss",
        worked && fuzz.is_ok(),
        &format!("worked value {value:.6} (independent {independent:.6}); zero-iff-one-hot over 1000 samples: {}", fuzz.is_ok()),
    );
}

#[test]
fn retraining_efficacy() {
    let dir = tempfile::tempdir().unwrap();
    let path = |n: &str| dir.path().join(n);

    // A sound linear model from labelled simulator windows.
    ok_json(&["simulate", "--seed", "71", "--events", "200", "--head-slides", "0.5", "--out", p(&path("train.jsonl"))]);
    ok_json(&[
        "replay",
        "--in",
        p(&path("train.jsonl")),
        "--truth",
        p(&path("train.truth.jsonl")),
        "--out",
        p(&path("train.decisions.jsonl")),
        "--features-out",
        p(&path("features.jsonl")),
        "--labels-out",
        p(&path("labels.jsonl")),
    ]);
    ok_json(&["train", "--features", p(&path("features.jsonl")), "--labels", p(&path("labels.jsonl")), "--out", p(&path("sound.json"))]);

    // Corrupt it: swapping the slide and standard rows turns slides into kicks.
    let mut model = ClassifierModel::load(path("sound.json")).unwrap();
    model.weights.swap(0, 1);
    model.save(path("corrupted.json")).unwrap();

    // The jury corrects what the corrupted model gets wrong.
    ok_json(&[
        "simulate", "--seed", "72", "--events", "60", "--mix", "0.6,0.2,0.2", "--head-slides", "1", "--out", p(&path("feedback.jsonl")),
    ]);
    ok_json(&[
        "replay",
        "--in",
        p(&path("feedback.jsonl")),
        "--truth",
        p(&path("feedback.truth.jsonl")),
        "--model",
        p(&path("corrupted.json")),
        "--out",
        p(&path("feedback.decisions.jsonl")),
        "--simulate-jury",
        p(&path("feedback.log.jsonl")),
    ]);
    let trained = ok_json(&[
        "train",
        "--feedback-log",
        p(&path("feedback.log.jsonl")),
        "--model",
        p(&path("corrupted.json")),
        "--out",
        p(&path("retrained.json")),
    ]);

    ok_json(&["simulate", "--seed", "73", "--events", "100", "--mix", "1,0,0", "--head-slides", "1", "--out", p(&path("held.jsonl"))]);
    let fp = |model: &str| {
        let v = ok_json(&[
            "replay",
            "--in",
            p(&path("held.jsonl")),
            "--truth",
            p(&path("held.truth.jsonl")),
            "--model",
            p(&path(model)),
            "--out",
            p(&path("held.decisions.jsonl")),
        ]);
        assert_eq!(v["events"], 100);
        v["fp_rate"].as_f64().unwrap()
    };
    let (before, after) = (fp("corrupted.json"), fp("retrained.json"));
    verdict(
        "retraining efficacy",
        after < before && trained["model_version"] == 2,
        &format!("held-out slide fp_rate {before:.2} -> {after:.2} (model v{})", trained["model_version"]),
    );
}

#[test]
fn review_time_report() {
    let out = kickscore(&["report", "--matches", "40", "--requests", "3", "--minutes", "1.5"]);
    let text = String::from_utf8_lossy(&out.stdout).trim().to_string();
    verdict("review-time report", out.status.success() && text == "180 minutes", &format!("printed {text:?}"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn audit_durability() {
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("live.jsonl");
    ok_json(&["simulate", "--seed", "90", "--events", "40", "--out", p(&stream)]);
    let lines: Vec<String> = std::fs::read_to_string(&stream).unwrap().lines().map(str::to_string).collect();
    let log_dir = dir.path().join("logs");

    let mut child = tokio::process::Command::new(env!("CARGO_BIN_EXE_kickscore"))
        .args(["serve", "--port", "0", "--log-dir", p(&log_dir)])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .kill_on_drop(true)
        .spawn()
        .unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap()).lines();
    let first = tokio::time::timeout(Duration::from_secs(10), stdout.next_line()).await.unwrap().unwrap().unwrap();
    let addr = serde_json::from_str::<Value>(&first).unwrap()["listening"].as_str().unwrap().to_string();

    let (mut jury, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/jury")).await.unwrap();
    let (mut ingest, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ingest")).await.unwrap();
    let total = lines.len();
    let sender = tokio::spawn(async move {
        let mut sent = 0;
        for chunk in lines.chunks(40) {
            if ingest.send(Message::text(chunk.join("\n"))).await.is_err() {
                break;
            }
            sent += chunk.len();
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        sent
    });

    let mut broadcast: Vec<String> = Vec::new();
    let mut killed = false;
    while let Ok(Some(Ok(msg))) = tokio::time::timeout(Duration::from_secs(20), jury.next()).await {
        let Message::Text(text) = msg else { continue };
        let v: Value = serde_json::from_str(&text).unwrap();
        if v["type"] == "decision" {
            broadcast.push(v["decision"]["event"].as_str().unwrap().to_string());
        }
        if broadcast.len() == 5 && !killed {
            child.start_kill().unwrap();
            killed = true;
        }
    }
    let status = child.wait().await.unwrap();
    let sent = sender.await.unwrap();

    let raw = std::fs::read_to_string(log_dir.join("decisions-M1.jsonl")).unwrap();
    let ends_clean = raw.is_empty() || raw.ends_with('\n');
    let parsed: Vec<Result<DecisionPackage, _>> = raw.lines().map(DecisionPackage::from_json).collect();
    let partial = parsed.iter().filter(|r| r.is_err()).count();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for d in parsed.iter().flatten() {
        *counts.entry(d.event_id.clone()).or_default() += 1;
    }
    let all_once = broadcast.iter().all(|e| counts.get(e) == Some(&1));
    let no_dupes = counts.values().all(|c| *c == 1);
    let mid_stream = killed && !status.success() && sent < total;
    verdict(
        "audit durability",
        mid_stream && ends_clean && partial == 0 && all_once && no_dupes && broadcast.len() >= 5,
        &format!(
            "killed after {sent}/{total} lines; log has {} records, {partial} partial; {} broadcast events each logged once: {all_once}",
            parsed.len(),
            broadcast.len()
        ),
    );
}
