use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use kickscore_core::action::fit_linear;
use kickscore_core::eval::{evaluate, percentile, Metrics, MATCH_TOLERANCE_S};
use kickscore_core::feedback::{retrain_with_config, FeedbackLog, FinalSource, VerdictBook};
use kickscore_core::jsonl::{read_all, JsonlAppender};
use kickscore_core::kinematics::WindowFeatures;
use kickscore_core::simulator::{generate_match, read_truth, review_time_savings, truth_path_for, write_output, GroundTruthEvent, SimConfig};
use kickscore_core::{
    ActionClass, ClassifierModel, Clock, DecisionPackage, FeedbackSample, FilterParams, FixedClock, JuryVerdict, MatchRouter,
    MonotonicClock, PipelineConfig,
};
use kickscore_service::{replay, AppState, Engine, EngineConfig, Pacing};
use serde::{Deserialize, Serialize};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "kickscore", version, about = "Real-time head-kick officiating engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-athlete match with ground truth.
    Simulate(SimulateArgs),
    /// Run a recorded stream through the pipeline.
    Replay(ReplayArgs),
    /// Start the websocket service.
    Serve(ServeArgs),
    /// Measure per-decision latency on a stream.
    Bench(BenchArgs),
    /// Fit a linear classifier, or retrain one from jury feedback.
    Train(TrainArgs),
    /// Jury review minutes saved per day.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    events: usize,
    /// Keypoint noise sigma in meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    occlusion: f64,
    /// Share of slides that raise a slow foot to the head.
    #[arg(long, default_value_t = 0.0)]
    head_slides: f64,
    /// Share of standard kicks that stop short of the head.
    #[arg(long, default_value_t = 0.0)]
    near_misses: f64,
    /// Slide,standard,turning probabilities.
    #[arg(long, value_delimiter = ',')]
    mix: Option<Vec<f64>>,
    #[arg(long = "match")]
    match_id: Option<String>,
    #[arg(long)]
    fps: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth sidecar; defaults to `<stem>.truth.jsonl`.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Classifier model JSON; rule-based when absent.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Decision log to write.
    #[arg(long)]
    out: PathBuf,
    /// Ground truth for accuracy metrics.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Pace by timestamps scaled by this factor; unpaced when absent.
    #[arg(long)]
    speed: Option<f64>,
    /// Freeze the stage clock so logs are byte-reproducible.
    #[arg(long)]
    fake_clock: bool,
    /// Window features of truth-matched decisions, for `train`.
    #[arg(long)]
    features_out: Option<PathBuf>,
    /// Truth labels aligned with `--features-out`.
    #[arg(long)]
    labels_out: Option<PathBuf>,
    /// Append feedback from a jury that always rules per ground truth.
    #[arg(long)]
    simulate_jury: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, default_value = "logs")]
    log_dir: PathBuf,
    #[arg(long)]
    auto_final_secs: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, requires = "labels", conflicts_with = "feedback_log")]
    features: Option<PathBuf>,
    #[arg(long, requires = "features")]
    labels: Option<PathBuf>,
    #[arg(long, requires = "model")]
    feedback_log: Option<PathBuf>,
    /// Model to retrain from feedback.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    matches: f64,
    #[arg(long)]
    requests: f64,
    #[arg(long)]
    minutes: f64,
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const USAGE: u8 = 1;
const IO: u8 = 2;
const INTERNAL: u8 = 3;

type CliResult<T> = Result<T, Failure>;

trait Exit<T> {
    fn exit(self, code: u8, what: &str) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Exit<T> for Result<T, E> {
    fn exit(self, code: u8, what: &str) -> CliResult<T> {
        self.map_err(|e| Failure {
            code,
            error: e.into().context(what.to_string()),
        })
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: USAGE, error: anyhow!(msg.into()) }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Replay(a) => replay_cmd(a),
        Command::Serve(a) => serve(a),
        Command::Bench(a) => bench(a),
        Command::Train(a) => train(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", describe(&f.error));
            ExitCode::from(f.code)
        }
    }
}

/// Error chain joined with `: `, skipping causes a parent already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string(value).exit(INTERNAL, "serializing output")?);
    Ok(())
}

fn load_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    use kickscore_core::model::ConfigError;
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => PipelineConfig::load(p).map_err(|e| {
            let code = if matches!(e, ConfigError::Io(_)) { IO } else { USAGE };
            Failure { code, error: anyhow::Error::new(e).context(format!("loading {}", p.display())) }
        }),
    }
}

fn load_model(path: Option<&Path>) -> CliResult<ClassifierModel> {
    match path {
        None => Ok(ClassifierModel::rule_based()),
        Some(p) => ClassifierModel::load(p).exit(IO, &format!("loading model {}", p.display())),
    }
}

fn open_input(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).exit(IO, &format!("opening {}", path.display()))
}

fn fresh_appender(path: &Path) -> CliResult<JsonlAppender> {
    if path.exists() {
        std::fs::remove_file(path).exit(IO, &format!("replacing {}", path.display()))?;
    }
    Ok(JsonlAppender::open(path).exit(IO, &format!("creating {}", path.display()))?.without_sync())
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let mut cfg = SimConfig {
        seed: a.seed,
        n_events: a.events,
        noise_sigma_m: a.noise,
        occlusion_prob: a.occlusion,
        head_slide_fraction: a.head_slides,
        near_miss_fraction: a.near_misses,
        ..SimConfig::default()
    };
    if let Some(mix) = a.mix {
        let [s, k, t] = mix[..] else {
            return Err(usage("--mix takes three comma-separated probabilities"));
        };
        cfg.event_mix = [s, k, t];
    }
    if let Some(m) = a.match_id {
        cfg.match_id = m;
    }
    if let Some(fps) = a.fps {
        cfg.fps = fps;
    }
    let out = generate_match(&cfg).map_err(|e| Failure {
        code: if matches!(e, kickscore_core::simulator::SimError::Io(_)) { IO } else { USAGE },
        error: e.into(),
    })?;
    let truth = a.truth.unwrap_or_else(|| truth_path_for(&a.out));
    write_output(&out, &a.out, &truth).exit(IO, "writing simulation")?;
    eprintln!("simulated {} events in {} frames", out.truth.len(), out.frames.len());
    print_json(&serde_json::json!({
        "frames": out.frames.len(),
        "events": out.truth.len(),
        "stream": a.out,
        "truth": truth,
    }))
}

/// One line of `--features-out`.
#[derive(Debug, Serialize, Deserialize)]
struct FeatureRecord {
    event: String,
    #[serde(rename = "match")]
    match_id: String,
    athlete: String,
    features: WindowFeatures,
}

/// One line of `--labels-out`.
#[derive(Debug, Serialize, Deserialize)]
struct LabelRecord {
    event: String,
    #[serde(rename = "match")]
    match_id: String,
    class: ActionClass,
}

fn replay_cmd(a: ReplayArgs) -> CliResult<()> {
    if (a.features_out.is_some() || a.labels_out.is_some() || a.simulate_jury.is_some()) && a.truth.is_none() {
        return Err(usage("--features-out, --labels-out and --simulate-jury need --truth"));
    }
    if let Some(s) = a.speed {
        if !(s > 0.0 && s.is_finite()) {
            return Err(usage("--speed must be > 0"));
        }
    }
    let config = load_config(a.pipeline.config.as_deref())?;
    let model = load_model(a.pipeline.model.as_deref())?;
    let truth = a
        .truth
        .as_deref()
        .map(|p| read_truth(p).exit(IO, &format!("reading truth {}", p.display())))
        .transpose()?;
    let reader = open_input(&a.input)?;
    let clock: Arc<dyn Clock> = if a.fake_clock { Arc::new(FixedClock::default()) } else { Arc::new(MonotonicClock::new()) };
    let mut router = MatchRouter::new(config.clone(), FilterParams::default(), clock);
    let mut log = fresh_appender(&a.out)?;
    let mut decisions: Vec<DecisionPackage> = Vec::new();
    let mut features: Vec<WindowFeatures> = Vec::new();
    let stats = replay(reader, &mut router, &model, Pacing(a.speed), |e| -> anyhow::Result<()> {
        log.append(&e.decision)?;
        decisions.push(e.decision.clone());
        features.push(e.window.features.clone());
        Ok(())
    })
    .exit(IO, "replaying stream")?;

    let evaluation = truth.as_ref().map(|t| evaluate(&decisions, t, MATCH_TOLERANCE_S));
    if let (Some(truth), Some(ev)) = (&truth, &evaluation) {
        let matched: Vec<(&GroundTruthEvent, usize)> = truth
            .iter()
            .zip(&ev.outcomes)
            .filter_map(|(t, o)| {
                let id = o.decision.as_ref()?;
                decisions.iter().position(|d| d.match_id == t.match_id && &d.event_id == id).map(|i| (t, i))
            })
            .collect();
        if let (Some(fp), Some(lp)) = (&a.features_out, &a.labels_out) {
            let mut f = fresh_appender(fp)?;
            let mut l = fresh_appender(lp)?;
            for (t, i) in &matched {
                let d = &decisions[*i];
                f.append(&FeatureRecord {
                    event: d.event_id.clone(),
                    match_id: d.match_id.clone(),
                    athlete: d.athlete.clone(),
                    features: features[*i].clone(),
                })
                .exit(IO, "writing features")?;
                l.append(&LabelRecord { event: d.event_id.clone(), match_id: d.match_id.clone(), class: t.true_class })
                    .exit(IO, "writing labels")?;
            }
        } else if a.features_out.is_some() != a.labels_out.is_some() {
            return Err(usage("--features-out and --labels-out go together"));
        }
        if let Some(path) = &a.simulate_jury {
            let n = simulate_jury(path, &decisions, &features, &matched)?;
            eprintln!("simulated jury wrote {n} feedback samples to {}", path.display());
        }
    }

    let metrics = Metrics::new(&decisions, evaluation.as_ref(), config.latency_budget_ms);
    if let Some(p) = &a.metrics {
        let text = serde_json::to_string_pretty(&metrics).exit(INTERNAL, "serializing metrics")?;
        std::fs::write(p, text + "\n").exit(IO, &format!("writing {}", p.display()))?;
    }
    eprintln!(
        "replayed {} frames ({} skipped), {} decisions in {:.2}s",
        stats.frames, stats.skipped, stats.decisions, stats.wall_s
    );
    if let Some(acc) = metrics.accuracy {
        eprintln!("accuracy {:.3}, slide false-positive rate {:.3}", acc, metrics.fp_rate.unwrap_or(0.0));
    }
    print_json(&metrics)
}

/// Rules on every decision the way a perfect jury would: confirm when the
/// decision matches ground truth, otherwise override to it. Decisions
/// credited to no event are overridden to a scoreless slide.
fn simulate_jury(
    path: &Path,
    decisions: &[DecisionPackage],
    features: &[WindowFeatures],
    matched: &[(&GroundTruthEvent, usize)],
) -> CliResult<usize> {
    let mut log = FeedbackLog::open(path).exit(IO, &format!("opening {}", path.display()))?;
    let mut book = VerdictBook::new();
    let mut n = 0;
    for (i, d) in decisions.iter().enumerate() {
        let truth = matched.iter().find(|(_, j)| *j == i).map(|(t, _)| *t);
        let (class, score) = truth.map_or((ActionClass::Slide, 0), |t| (t.true_class, t.true_score));
        let mut verdict = if (d.action_class, d.score) == (class, score) {
            JuryVerdict::confirm(&d.event_id, "sim-jury", d.window.t_end)
        } else {
            JuryVerdict::override_to(&d.event_id, class, score, "sim-jury", d.window.t_end)
        };
        verdict.match_id = Some(d.match_id.clone());
        let record = book.resolve(d, &verdict).exit(INTERNAL, "resolving simulated verdict")?;
        debug_assert_ne!(record.source, FinalSource::AutoFinal);
        log.append(&FeedbackSample::from_final(d, features[i].clone(), &record))
            .exit(IO, "writing feedback")?;
        n += 1;
    }
    Ok(n)
}

fn serve(a: ServeArgs) -> CliResult<()> {
    let config = load_config(a.pipeline.config.as_deref())?;
    let model = load_model(a.pipeline.model.as_deref())?;
    let mut ec = EngineConfig::new(&a.log_dir);
    ec.pipeline = config;
    if let Some(s) = a.auto_final_secs {
        if !(s > 0.0 && s.is_finite()) {
            return Err(usage("--auto-final-secs must be > 0"));
        }
        ec.auto_final_after = Duration::from_secs_f64(s);
    }
    let engine = Engine::new(ec, model, Arc::new(MonotonicClock::new())).exit(IO, "starting engine")?;
    let state = AppState::new(engine);
    let rt = tokio::runtime::Runtime::new().exit(INTERNAL, "starting runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port))
            .await
            .exit(IO, &format!("binding {}:{}", a.host, a.port))?;
        let addr = listener.local_addr().exit(IO, "reading bound address")?;
        print_json(&serde_json::json!({ "listening": addr.to_string() }))?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        kickscore_service::serve(listener, state, shutdown).await.exit(IO, "serving")
    })
}

#[derive(Serialize)]
struct BenchLatency {
    mean: f64,
    p50: f64,
    p95: f64,
    p99: f64,
    max: f64,
}

#[derive(Serialize)]
struct BenchReport {
    frames: u64,
    decisions: usize,
    wall_s: f64,
    latency_ms: BenchLatency,
    budget_ms: f64,
    budget_violations: usize,
    within_budget: bool,
    additive: bool,
}

fn bench(a: BenchArgs) -> CliResult<()> {
    let config = load_config(a.pipeline.config.as_deref())?;
    let model = load_model(a.pipeline.model.as_deref())?;
    let reader = open_input(&a.input)?;
    let mut router = MatchRouter::new(config.clone(), FilterParams::default(), Arc::new(MonotonicClock::new()));
    let mut decisions = Vec::new();
    let stats = replay(reader, &mut router, &model, Pacing(None), |e| -> std::io::Result<()> {
        decisions.push(e.decision.clone());
        Ok(())
    })
    .exit(IO, "reading stream")?;
    let mut totals: Vec<f64> = decisions.iter().map(|d: &DecisionPackage| d.latency_ms.t_total_ms).collect();
    totals.sort_by(f64::total_cmp);
    let mean = if totals.is_empty() { 0.0 } else { totals.iter().sum::<f64>() / totals.len() as f64 };
    let p95 = percentile(&totals, 95.0);
    let report = BenchReport {
        frames: stats.frames,
        decisions: decisions.len(),
        wall_s: stats.wall_s,
        latency_ms: BenchLatency {
            mean,
            p50: percentile(&totals, 50.0),
            p95,
            p99: percentile(&totals, 99.0),
            max: totals.last().copied().unwrap_or(0.0),
        },
        budget_ms: config.latency_budget_ms,
        budget_violations: totals.iter().filter(|t| **t > config.latency_budget_ms).count(),
        within_budget: p95 <= config.latency_budget_ms,
        additive: decisions.iter().all(|d| d.latency_ms.is_additive()),
    };
    eprintln!(
        "{} decisions: p95 {:.3} ms against a {} ms budget",
        report.decisions, report.latency_ms.p95, report.budget_ms
    );
    print_json(&report)
}

fn train(a: TrainArgs) -> CliResult<()> {
    if a.epochs == 0 {
        return Err(usage("--epochs must be > 0"));
    }
    let (model, losses) = match (&a.features, &a.labels, &a.feedback_log) {
        (Some(fp), Some(lp), None) => {
            let features: Vec<FeatureRecord> = read_all(fp).exit(IO, &format!("reading {}", fp.display()))?;
            let labels: Vec<LabelRecord> = read_all(lp).exit(IO, &format!("reading {}", lp.display()))?;
            if features.len() != labels.len() {
                return Err(usage(format!("{} feature rows but {} labels", features.len(), labels.len())));
            }
            let mut samples = Vec::with_capacity(features.len());
            for (f, l) in features.into_iter().zip(labels) {
                if (&f.event, &f.match_id) != (&l.event, &l.match_id) {
                    return Err(usage(format!("feature row {}/{} has label for {}/{}", f.match_id, f.event, l.match_id, l.event)));
                }
                samples.push((f.features, l.class));
            }
            fit_linear(&samples, a.epochs, a.lr).exit(USAGE, "fitting model")?
        }
        (None, None, Some(fb)) => {
            let config = load_config(a.config.as_deref())?;
            let base = load_model(a.model.as_deref())?;
            let samples = FeedbackLog::load(fb).exit(IO, &format!("reading {}", fb.display()))?;
            retrain_with_config(&base, &samples, a.epochs, a.lr, &config).exit(USAGE, "retraining model")?
        }
        _ => return Err(usage("give either --features and --labels, or --feedback-log and --model")),
    };
    model.save(&a.out).exit(IO, &format!("writing {}", a.out.display()))?;
    eprintln!("model v{} written to {}", model.version, a.out.display());
    print_json(&serde_json::json!({
        "model_version": model.version,
        "loss_start": losses.first(),
        "loss_end": losses.last(),
        "out": a.out,
    }))
}

fn report(a: ReportArgs) -> CliResult<()> {
    for (name, v) in [("--matches", a.matches), ("--requests", a.requests), ("--minutes", a.minutes)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(usage(format!("{name} must be >= 0")));
        }
    }
    let minutes = review_time_savings(a.matches, a.requests, a.minutes);
    let text = if minutes.fract().abs() < 1e-9 { format!("{minutes:.0}") } else { format!("{minutes:.2}") };
    println!("{text} minutes");
    eprintln!("{:.2} jury hours per day", minutes / 60.0);
    Ok(())
}
