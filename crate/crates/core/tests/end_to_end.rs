use std::sync::Arc;

use kickscore_core::action::fit_linear;
use kickscore_core::eval::{evaluate, MATCH_TOLERANCE_S};
use kickscore_core::feedback::{retrain, FeedbackLog, VerdictBook};
use kickscore_core::pipeline::run_frames;
use kickscore_core::simulator::{generate_match, EventKind, SimConfig};
use kickscore_core::{
    ActionClass, ClassifierModel, Emitted, FeedbackSample, FilterParams, FixedClock, JuryVerdict, MonotonicClock, PipelineConfig,
};

fn run(cfg: &SimConfig, model: &ClassifierModel) -> (Vec<Emitted>, Vec<kickscore_core::simulator::GroundTruthEvent>) {
    let out = generate_match(cfg).expect("sim");
    let (emitted, stats) = run_frames(
        out.frames,
        &PipelineConfig::default(),
        FilterParams::default(),
        model,
        Arc::new(FixedClock::default()),
    );
    assert_eq!(stats.rejected, 0);
    (emitted, out.truth)
}

#[test]
fn clean_mixed_stream_matches_ground_truth() {
    let cfg = SimConfig { seed: 11, n_events: 60, ..SimConfig::default() };
    let (emitted, truth) = run(&cfg, &ClassifierModel::rule_based());
    let decisions: Vec<_> = emitted.iter().map(|e| e.decision.clone()).collect();
    let ev = evaluate(&decisions, &truth, MATCH_TOLERANCE_S);
    assert!(ev.accuracy() >= 0.99, "accuracy {}", ev.accuracy());
    assert!(ev.score_mismatches().is_empty(), "{:?}", ev.score_mismatches());
    assert!(ev.spurious.is_empty());
}

#[test]
fn every_decision_is_internally_consistent() {
    let cfg = SimConfig { seed: 5, n_events: 40, noise_sigma_m: 0.02, occlusion_prob: 0.05, ..SimConfig::default() };
    let out = generate_match(&cfg).unwrap();
    let config = PipelineConfig::default();
    let (emitted, _) = run_frames(out.frames, &config, FilterParams::default(), &ClassifierModel::rule_based(), Arc::new(MonotonicClock::new()));
    assert!(!emitted.is_empty());
    for e in &emitted {
        let d = &e.decision;
        assert!(d.score_consistent(), "{d:?}");
        assert!(d.latency_ms.is_additive());
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(d.window.t_start <= d.window.t_end);
        assert_eq!(e.window.frames.len(), config.window_frames);
        assert_eq!(e.overlay().len(), config.window_frames);
        let back = kickscore_core::DecisionPackage::from_json(&d.to_json()).unwrap();
        assert_eq!(&back, d);
    }
}

#[test]
fn replay_with_frozen_clock_is_reproducible() {
    let cfg = SimConfig { seed: 8, n_events: 20, noise_sigma_m: 0.01, ..SimConfig::default() };
    let render = || {
        let (emitted, _) = run(&cfg, &ClassifierModel::rule_based());
        emitted.iter().map(|e| e.decision.to_json()).collect::<Vec<_>>().join("\n")
    };
    let a = render();
    assert!(!a.is_empty());
    assert_eq!(a, render());
}

fn labelled(emitted: &[Emitted], truth: &[kickscore_core::simulator::GroundTruthEvent]) -> Vec<(kickscore_core::kinematics::WindowFeatures, ActionClass)> {
    let decisions: Vec<_> = emitted.iter().map(|e| e.decision.clone()).collect();
    let ev = evaluate(&decisions, truth, MATCH_TOLERANCE_S);
    ev.outcomes
        .iter()
        .filter_map(|o| {
            let id = o.decision.as_ref()?;
            let e = emitted.iter().find(|e| &e.decision.event_id == id)?;
            Some((e.window.features.clone(), o.true_class))
        })
        .collect()
}

#[test]
fn linear_model_learns_to_reject_head_slides() {
    let train_cfg = SimConfig { seed: 21, n_events: 90, head_slide_fraction: 0.5, ..SimConfig::default() };
    let (emitted, truth) = run(&train_cfg, &ClassifierModel::rule_based());
    let samples = labelled(&emitted, &truth);
    assert!(samples.iter().any(|(_, c)| *c == ActionClass::Slide));
    let (model, losses) = fit_linear(&samples, 300, 0.5).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);

    let held_out = SimConfig { seed: 22, n_events: 30, event_mix: [1.0, 0.0, 0.0], head_slide_fraction: 1.0, ..SimConfig::default() };
    let (rule_emitted, truth) = run(&held_out, &ClassifierModel::rule_based());
    let (lin_emitted, _) = run(&held_out, &model);
    let fp = |em: &[Emitted]| {
        let d: Vec<_> = em.iter().map(|e| e.decision.clone()).collect();
        evaluate(&d, &truth, MATCH_TOLERANCE_S).fp_rate()
    };
    assert!(truth.iter().all(|t| t.kind == EventKind::HeadSlide));
    assert!(fp(&rule_emitted) > 0.5, "rule baseline should be fooled");
    assert_eq!(fp(&lin_emitted), 0.0);
}

#[test]
fn jury_overrides_flow_into_a_better_model() {
    let train_cfg = SimConfig { seed: 31, n_events: 90, head_slide_fraction: 0.5, ..SimConfig::default() };
    let (emitted, truth) = run(&train_cfg, &ClassifierModel::rule_based());
    let (good, _) = fit_linear(&labelled(&emitted, &truth), 300, 0.5).unwrap();
    let mut bad = good.clone();
    bad.weights.swap(0, 1);

    let fb_cfg = SimConfig { seed: 32, n_events: 30, event_mix: [0.6, 0.2, 0.2], head_slide_fraction: 1.0, ..SimConfig::default() };
    let (emitted, truth) = run(&fb_cfg, &bad);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feedback.jsonl");
    let mut log = FeedbackLog::open(&path).unwrap();
    let mut book = VerdictBook::new();
    let decisions: Vec<_> = emitted.iter().map(|e| e.decision.clone()).collect();
    let ev = evaluate(&decisions, &truth, MATCH_TOLERANCE_S);
    for (o, e) in ev.outcomes.iter().zip(&truth) {
        let Some(id) = &o.decision else { continue };
        let em = emitted.iter().find(|x| &x.decision.event_id == id).unwrap();
        let verdict = JuryVerdict::override_to(id, e.true_class, e.true_score, "j1", 0.0);
        let record = book.resolve(&em.decision, &verdict).unwrap();
        log.append(&FeedbackSample::from_final(&em.decision, em.window.features.clone(), &record)).unwrap();
    }
    let samples = FeedbackLog::load(&path).unwrap();
    assert!(!samples.is_empty());
    let (fixed, losses) = retrain(&bad, &samples, 300, 0.5, 1.0, 0.5).unwrap();
    assert_eq!(fixed.version, bad.version + 1);
    assert!(losses.last().unwrap() < &losses[0]);

    let held_out = SimConfig { seed: 33, n_events: 30, event_mix: [1.0, 0.0, 0.0], head_slide_fraction: 1.0, ..SimConfig::default() };
    let fp = |m: &ClassifierModel| {
        let (em, truth) = run(&held_out, m);
        let d: Vec<_> = em.iter().map(|e| e.decision.clone()).collect();
        evaluate(&d, &truth, MATCH_TOLERANCE_S).fp_rate()
    };
    let (before, after) = (fp(&bad), fp(&fixed));
    assert!(after < before, "fp {before} -> {after}");
}
