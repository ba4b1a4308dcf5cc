//! Subcommands behind the `crackseg` binary.

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crackseg::checkpoint;
use crackseg::config::RunConfig;
use crackseg::data::{generate_synthetic, load_dataset, resize_bilinear, save_dataset, AnnotatedSample, SYNTHETIC_SIDES};
use crackseg::fewshot::{predict_all, refine_loop, ExpertMode, RefineOutcome, RefineReport, SimulatedExpert};
use crackseg::mask::ProbabilityMask;
use crackseg::metrics::{table_header, wilcoxon_signed_rank, MetricReport, WilcoxonResult};
use crackseg::model::{build_model, Model};
use crackseg::training::{save_run, split_80_20, train, StopReason, TrainHistory};
use crackseg_service::{AppState, JobStatus, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "crackseg", version, about = "Crack segmentation with confidence-ranked few-shot refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic crack dataset (images/ and masks/).
    Synth(SynthArgs),
    /// Train on an 80/20 split of a dataset and write a run directory.
    Train(TrainArgs),
    /// Score a checkpoint; with --compare, test two checkpoints against each other.
    Eval(EvalArgs),
    /// Run one refinement round and write the refined checkpoint and report.
    Refine(RefineArgs),
    /// Serve the rectification API until interrupted.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON document with model, train and refine sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one value, e.g. `--set train.epochs=20`. Repeatable; wins over --config.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        Ok(base.with_overrides(&self.overrides)?)
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root holding images/ and optionally masks/.
    #[arg(long)]
    pub data: PathBuf,
    /// Square side images are resized to; 0 keeps the stored size.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Second checkpoint for a paired comparison.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Simulated,
    Interactive,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory for refined.ckpt and refine_report.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides refine.expert_mode.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Learning rate the checkpoint was last trained with. Defaults to the
    /// run's history.json next to the checkpoint, else train.lr0.
    #[arg(long)]
    pub prior_lr: Option<f64>,
    /// Listen address in interactive mode.
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Original training data mixed into fine-tuning when refine.replay is set.
    #[arg(long)]
    pub replay_data: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Where each finished round's checkpoint and report are written.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub prior_lr: Option<f64>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration: exit code 2.
    Usage(String),
    /// Anything that failed while running: exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<crackseg::Error> for CliError {
    fn from(e: crackseg::Error) -> Self {
        match e {
            crackseg::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Refine(a) => cmd_refine(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    if !SYNTHETIC_SIDES.contains(&a.size) {
        return Err(CliError::Usage(format!("--size must be one of {SYNTHETIC_SIDES:?}")));
    }
    let samples = generate_synthetic(a.n, a.size, a.seed)?;
    save_dataset(&samples, &a.out)?;
    println!("wrote {} samples of {}x{} to {}", a.n, a.size, a.size, a.out.display());
    Ok(())
}

/// Loads a dataset and resizes every sample to `size × size` (0 keeps it).
pub fn load(data: &DataArgs) -> Result<Vec<AnnotatedSample>, CliError> {
    let samples = load_dataset(&data.data)?;
    if data.size == 0 {
        return Ok(samples);
    }
    samples
        .iter()
        .map(|s| {
            if (s.image.height, s.image.width) == (data.size, data.size) {
                Ok(s.clone())
            } else {
                resize_bilinear(s, data.size).map_err(CliError::from)
            }
        })
        .collect()
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve()?;
    let samples = load(&a.data)?;
    let (train_set, val_set) = split_80_20(&samples, cfg.train.seed)?;
    let mut model = build_model(&cfg.model, cfg.train.seed)?;
    log::info!(
        "training {} parameters on {} images, validating on {}",
        model.params.scalar_count(),
        train_set.len(),
        val_set.len()
    );
    let history = train(&mut model, &train_set, &val_set, &cfg.train)?;
    save_run(&a.out, &cfg.to_canonical(), &history, &model)?;
    println!(
        "best epoch {} of {}: val loss {:.5}; stop: {}",
        history.best_epoch,
        history.epochs.len(),
        history.best_val_loss,
        stop_text(&history.stop)
    );
    println!("run written to {}", a.out.display());
    if let StopReason::Diverged { detail, .. } = &history.stop {
        return Err(CliError::Runtime(format!("training diverged: {detail}")));
    }
    Ok(())
}

fn stop_text(s: &StopReason) -> String {
    match s {
        StopReason::EpochsExhausted => "all epochs ran".into(),
        StopReason::EarlyStop => "early stop".into(),
        StopReason::Diverged { epoch, detail } => format!("diverged in epoch {epoch} ({detail})"),
    }
}

/// Anything that maps a batch of samples to probability masks.
pub trait Predictor {
    fn predict(&self, samples: &[AnnotatedSample]) -> crackseg::Result<Vec<ProbabilityMask>>;
}

/// Model plus the batch size it predicts with.
pub struct Batched<'a>(pub &'a Model, pub usize);

impl Predictor for Batched<'_> {
    fn predict(&self, samples: &[AnnotatedSample]) -> crackseg::Result<Vec<ProbabilityMask>> {
        predict_all(self.0, samples, self.1)
    }
}

pub fn evaluate(predictor: &dyn Predictor, samples: &[AnnotatedSample]) -> crackseg::Result<MetricReport> {
    let preds = predictor.predict(samples)?;
    let gts = samples.iter().map(|s| s.require_mask()).collect::<crackseg::Result<Vec<_>>>()?;
    MetricReport::evaluate(samples.iter().zip(&preds).zip(gts).map(|((s, p), g)| (s.id.as_str(), p, g)))
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub dice: Option<WilcoxonResult>,
    pub iou: Option<WilcoxonResult>,
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub checkpoint: String,
    pub report: MetricReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare_checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare_report: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

fn label(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Paired tests on per-image scores; `None` where the test is undefined.
pub fn compare(a: &MetricReport, b: &MetricReport) -> Comparison {
    let test = |x: &[f64], y: &[f64]| match wilcoxon_signed_rank(x, y) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("paired test skipped: {e}");
            None
        }
    };
    Comparison {
        dice: test(&a.dice, &b.dice),
        iou: test(&a.iou, &b.iou),
    }
}

pub fn eval_with(
    predictor: &dyn Predictor,
    other: Option<&dyn Predictor>,
    samples: &[AnnotatedSample],
    names: (&str, &str),
) -> Result<EvalOutput, CliError> {
    let report = evaluate(predictor, samples)?;
    println!("{}", table_header());
    println!("{}", report.table_row(names.0));
    let mut out = EvalOutput {
        checkpoint: names.0.to_owned(),
        report,
        compare_checkpoint: None,
        compare_report: None,
        comparison: None,
    };
    if let Some(other) = other {
        let second = evaluate(other, samples)?;
        println!("{}", second.table_row(names.1));
        let cmp = compare(&out.report, &second);
        for (metric, r) in [("dice", &cmp.dice), ("iou", &cmp.iou)] {
            if let Some(r) = r {
                println!("wilcoxon {metric}: n={} W={} p={:.3e}", r.n_effective, r.statistic, r.p_value);
            }
        }
        out.compare_checkpoint = Some(names.1.to_owned());
        out.compare_report = Some(second);
        out.comparison = Some(cmp);
    }
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    if a.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be at least 1".into()));
    }
    let samples = load(&a.data)?;
    let model = checkpoint::load(&a.checkpoint)?;
    let other = a.compare.as_deref().map(checkpoint::load).transpose()?;
    let first = Batched(&model, a.batch_size);
    let second = other.as_ref().map(|m| Batched(m, a.batch_size));
    let names = (
        label(&a.checkpoint),
        a.compare.as_deref().map(label).unwrap_or_default(),
    );
    let out = eval_with(&first, second.as_ref().map(|p| p as &dyn Predictor), &samples, (&names.0, &names.1))?;
    if let Some(path) = &a.out {
        std::fs::write(path, serde_json::to_string_pretty(&out)?)?;
    }
    Ok(())
}

/// Explicit flag, else the run history beside the checkpoint, else `lr0`.
fn prior_lr(flag: Option<f64>, checkpoint: &Path, cfg: &RunConfig) -> f64 {
    if let Some(lr) = flag {
        return lr;
    }
    let history = checkpoint.parent().map(|d| d.join("history.json"));
    history
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|t| serde_json::from_str::<TrainHistory>(&t).ok())
        .and_then(|h| h.last_lr())
        .unwrap_or(cfg.train.lr0)
}

fn write_round(out: &Path, model: &Model, report: &RefineReport, suffix: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    checkpoint::save(model, &out.join(format!("refined{suffix}.ckpt")))?;
    std::fs::write(out.join(format!("refine_report{suffix}.json")), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

fn print_refine(report: &RefineReport) {
    let ids: Vec<&str> = report.selected.iter().map(|r| r.image_id.as_str()).collect();
    println!("selected {}: {}", ids.len(), ids.join(", "));
    println!("evaluated on {} remaining images", report.evaluated_ids.len());
    if let (Some(b), Some(a)) = (&report.before, &report.after) {
        println!("{}", table_header());
        println!("{}", b.table_row("before"));
        println!("{}", a.table_row("after"));
    }
}

pub fn cmd_refine(a: &RefineArgs) -> Result<(), CliError> {
    let mut cfg = a.config.resolve()?;
    if let Some(m) = a.mode {
        cfg.refine.expert_mode = match m {
            Mode::Simulated => ExpertMode::Simulated,
            Mode::Interactive => ExpertMode::Interactive,
        };
    }
    let replay = match (cfg.refine.replay, &a.replay_data, cfg.refine.expert_mode) {
        (false, _, _) => Vec::new(),
        (true, _, ExpertMode::Interactive) => {
            return Err(CliError::Usage("refine.replay is only supported in simulated mode".into()))
        }
        (true, None, _) => return Err(CliError::Usage("refine.replay needs --replay-data".into())),
        (true, Some(dir), _) => load(&DataArgs { data: dir.clone(), size: a.data.size })?,
    };
    let samples = load(&a.data)?;
    let mut model = checkpoint::load(&a.checkpoint)?;
    let lr = prior_lr(a.prior_lr, &a.checkpoint, &cfg);
    match cfg.refine.expert_mode {
        ExpertMode::Simulated => {
            let mut expert = SimulatedExpert { dataset: &samples };
            match refine_loop(&mut model, samples.clone(), &mut expert, lr, &cfg.train, &cfg.refine, &replay)? {
                RefineOutcome::Done(report) => {
                    write_round(&a.out, &model, &report, "")?;
                    print_refine(&report);
                    Ok(())
                }
                RefineOutcome::Pending(_) => Err(CliError::Runtime("simulated expert left corrections pending".into())),
            }
        }
        ExpertMode::Interactive => {
            let state = AppState::new(model, samples, service_config(&cfg, lr))?;
            run_service(state, a.addr, Some(&a.out), true)
        }
    }
}

fn service_config(cfg: &RunConfig, prior_lr: f64) -> ServiceConfig {
    ServiceConfig {
        train: cfg.train.clone(),
        refine: cfg.refine.clone(),
        prior_lr,
    }
}

pub fn cmd_serve(a: &ServeArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve()?;
    if cfg.refine.replay {
        return Err(CliError::Usage("refine.replay is not supported by the service".into()));
    }
    let samples = load(&a.data)?;
    let model = checkpoint::load(&a.checkpoint)?;
    let lr = prior_lr(a.prior_lr, &a.checkpoint, &cfg);
    let state = AppState::new(model, samples, service_config(&cfg, lr))?;
    run_service(state, a.addr, a.out.as_deref(), false)
}

/// Serves until interrupted, or until the first finished job when `once`.
/// Each successful job's model and report are written to `out`.
fn run_service(state: AppState, addr: SocketAddr, out: Option<&Path>, once: bool) -> Result<(), CliError> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        println!("listening on http://{}", listener.local_addr()?);
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(crackseg_service::serve(listener, state.clone(), async move {
            let _ = stop_rx.await;
        }));
        let mut finished = state.subscribe();
        let result = loop {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => break Ok(()),
                changed = finished.changed() => {
                    if changed.is_err() {
                        break Ok(());
                    }
                    let Some(id) = *finished.borrow_and_update() else { continue };
                    let Some(job) = state.job(id) else { continue };
                    match (job.status, job.report) {
                        (JobStatus::Done, Some(report)) => {
                            print_refine(&report);
                            if let Some(dir) = out {
                                let suffix = if once { String::new() } else { format!("_round{}", job.round) };
                                if let Err(e) = write_round(dir, &state.model(), &report, &suffix) {
                                    break Err(e);
                                }
                            }
                            if once {
                                break Ok(());
                            }
                        }
                        _ => {
                            let msg = job.error.unwrap_or_else(|| "unknown failure".into());
                            log::error!("job {id} failed: {msg}");
                            if once {
                                break Err(CliError::Runtime(format!("fine-tune job failed: {msg}")));
                            }
                        }
                    }
                }
            }
        };
        let _ = stop_tx.send(());
        server.await.map_err(|e| CliError::Runtime(e.to_string()))??;
        result
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_lr_prefers_flag_then_history_then_lr0() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("best.ckpt");
        let cfg = RunConfig::default();
        assert_eq!(prior_lr(Some(0.5), &ckpt, &cfg), 0.5);
        assert_eq!(prior_lr(None, &ckpt, &cfg), cfg.train.lr0);
        std::fs::write(dir.path().join("history.json"), "not json").unwrap();
        assert_eq!(prior_lr(None, &ckpt, &cfg), cfg.train.lr0);
    }

    #[test]
    fn config_errors_are_usage_errors() {
        let e: CliError = crackseg::Error::Config("bad".into()).into();
        assert_eq!(e.exit_code(), 2);
        let e: CliError = crackseg::Error::UnknownId("x".into()).into();
        assert_eq!(e.exit_code(), 1);
    }
}
