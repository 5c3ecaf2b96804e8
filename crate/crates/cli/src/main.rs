//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hdpgpc::inference::{fit_offline, predict, InferenceConfig, ModelState, OnlineFitter};
use hdpgpc::io::{
    atomic_write, elbo_trace_csv, load_model, load_segments, plot_data_csv, save_model, save_segments, segment_stream,
    Format,
};
use hdpgpc::metrics::MetricsReport;
use hdpgpc::respiration::{respiration_fit, respiration_predict, RespirationModel};
use hdpgpc::synth::{synth_generate, SynthSpec};
use hdpgpc::Segment;

#[derive(Parser)]
#[command(name = "hdpgpc", version, about = "Dynamical clustering of time-series segments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Batch fit over all segments.
    Fit(FitArgs),
    /// Single pass over segments read incrementally.
    Stream(FitArgs),
    /// Generate a labelled synthetic data set.
    Synth(SynthArgs),
    /// Respiration reconstruction from warps.
    #[command(subcommand)]
    Resp(RespCommand),
    /// Assign segments with a saved model and write a metrics report.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// JSON inference configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Segment file format; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<Format>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Segment file (CSV or JSONL).
    input: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Also write per-cluster mean and 95% bands as CSV.
    #[arg(long)]
    plot_data: bool,
    /// Grid points per cluster in the plot data.
    #[arg(long, default_value_t = 200)]
    plot_points: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synthetic spec; missing fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    format: Option<Format>,
    /// Output segment file.
    #[arg(long, default_value = "synth.csv")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum RespCommand {
    /// Fit the linear map from warped times to respiration windows.
    Fit(RespFitArgs),
    /// Reconstruct respiration for new segments.
    Predict(RespPredictArgs),
}

#[derive(Args)]
struct RespFitArgs {
    /// Saved clustering model.
    #[arg(long)]
    model: PathBuf,
    /// ECG (or other) segments the warps are computed from.
    #[arg(long)]
    segments: PathBuf,
    /// Respiration windows, one per segment, in segment-file format.
    #[arg(long)]
    resp: PathBuf,
    #[arg(long)]
    format: Option<Format>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RespPredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Fitted respiration model.
    #[arg(long)]
    resp_model: PathBuf,
    #[arg(long)]
    segments: PathBuf,
    #[arg(long)]
    format: Option<Format>,
    /// Moving-average window in samples.
    #[arg(long, default_value_t = 1)]
    smoothing: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    segments: PathBuf,
    #[arg(long)]
    format: Option<Format>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn format_for(path: &Path, explicit: Option<Format>) -> Format {
    explicit.unwrap_or_else(|| Format::from_path(path))
}

fn read_config(path: Option<&Path>, base: InferenceConfig) -> Result<InferenceConfig> {
    let Some(path) = path else { return Ok(base) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value = serde_json::to_value(&base)?;
    let patch: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let (Some(obj), Some(over)) = (value.as_object_mut(), patch.as_object()) else {
        bail!("{} must hold a JSON object", path.display());
    };
    for (k, v) in over {
        if !obj.contains_key(k) {
            bail!("unknown config field {k:?} in {}", path.display());
        }
        obj.insert(k.clone(), v.clone());
    }
    let config: InferenceConfig = serde_json::from_value(value)?;
    config.validate()?;
    Ok(config)
}

fn set_threads(config: &InferenceConfig) {
    if let Some(n) = config.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
}

fn write_outputs(out: &Path, model: &ModelState, segments: &[Segment], plot: Option<usize>) -> Result<()> {
    fs::create_dir_all(out)?;
    save_model(out.join("model.json"), model)?;
    atomic_write(out.join("elbo_trace.csv"), elbo_trace_csv(&model.elbo_trace).as_bytes())?;
    let report = MetricsReport::new(model, segments)?;
    atomic_write(out.join("metrics.json"), report.to_json()?.as_bytes())?;
    if let Some(points) = plot {
        atomic_write(out.join("plot_data.csv"), plot_data_csv(model, points)?.as_bytes())?;
    }
    Ok(())
}

fn fit(args: &FitArgs) -> Result<bool> {
    let config = read_config(args.common.config.as_deref(), InferenceConfig::default())?;
    set_threads(&config);
    let segments = load_segments(&args.input, format_for(&args.input, args.common.format))?;
    let model = fit_offline(&segments, &config)?;
    write_outputs(
        &args.common.out,
        &model,
        &segments,
        args.plot_data.then_some(args.plot_points),
    )?;
    log::info!(
        "K = {}, {} iterations, converged: {}",
        model.k(),
        model.iterations,
        model.converged
    );
    Ok(model.converged)
}

fn stream(args: &FitArgs) -> Result<bool> {
    let config = read_config(args.common.config.as_deref(), InferenceConfig::streaming())?;
    set_threads(&config);
    let format = format_for(&args.input, args.common.format);
    let file = fs::File::open(&args.input).with_context(|| format!("opening {}", args.input.display()))?;
    let mut fitter = OnlineFitter::new(config)?;
    let mut segments = Vec::new();
    for seg in segment_stream(file, format)? {
        let seg = seg?;
        segments.push(seg.clone());
        for r in fitter.push(seg)? {
            if r.spawned {
                log::info!("segment {}: new cluster (K = {})", r.index, r.k);
            }
        }
    }
    let model = fitter.finish()?;
    write_outputs(
        &args.common.out,
        &model,
        &segments,
        args.plot_data.then_some(args.plot_points),
    )?;
    Ok(model.converged)
}

fn synth(args: &SynthArgs) -> Result<bool> {
    let mut spec = match &args.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SynthSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let segments = synth_generate(&spec)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_segments(&args.out, &segments, format_for(&args.out, args.format))?;
    Ok(true)
}

fn warps_for(model: &ModelState, segments: &[Segment]) -> Result<Vec<Vec<f64>>> {
    Ok(predict(model, segments)?.into_iter().map(|p| p.warped_times).collect())
}

fn resp_fit(args: &RespFitArgs) -> Result<bool> {
    let model = load_model(&args.model)?;
    let segments = load_segments(&args.segments, format_for(&args.segments, args.format))?;
    let resp = load_segments(&args.resp, format_for(&args.resp, args.format))?;
    if resp.len() != segments.len() {
        bail!("{} respiration windows for {} segments", resp.len(), segments.len());
    }
    let warps = warps_for(&model, &segments)?;
    let targets: Vec<Vec<f64>> = resp.into_iter().map(|s| s.y).collect();
    let fitted = respiration_fit(&warps, &targets)?;
    fs::create_dir_all(&args.out)?;
    atomic_write(
        args.out.join("resp_model.json"),
        serde_json::to_string_pretty(&fitted)?.as_bytes(),
    )?;
    Ok(true)
}

fn resp_predict(args: &RespPredictArgs) -> Result<bool> {
    let model = load_model(&args.model)?;
    let resp: RespirationModel = serde_json::from_str(&fs::read_to_string(&args.resp_model)?)
        .with_context(|| format!("parsing {}", args.resp_model.display()))?;
    let segments = load_segments(&args.segments, format_for(&args.segments, args.format))?;
    let signal = respiration_predict(&resp, &warps_for(&model, &segments)?, args.smoothing)?;
    let mut csv = String::from("index,value\n");
    for (i, v) in signal.iter().enumerate() {
        csv.push_str(&format!("{i},{v:?}\n"));
    }
    fs::create_dir_all(&args.out)?;
    atomic_write(args.out.join("respiration.csv"), csv.as_bytes())?;
    Ok(true)
}

fn report(args: &ReportArgs) -> Result<bool> {
    let model = load_model(&args.model)?;
    let segments = load_segments(&args.segments, format_for(&args.segments, args.format))?;
    let preds = predict(&model, &segments)?;
    let mut report = MetricsReport::new(&model, &[])?;
    report.fill_predictions(&preds, &segments)?;
    fs::create_dir_all(&args.out)?;
    atomic_write(
        args.out.join("elbo_trace.csv"),
        elbo_trace_csv(&model.elbo_trace).as_bytes(),
    )?;
    atomic_write(args.out.join("metrics.json"), report.to_json()?.as_bytes())?;
    atomic_write(
        args.out.join("predictions.json"),
        serde_json::to_string_pretty(&preds)?.as_bytes(),
    )?;
    Ok(model.converged)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Fit(a) => fit(a),
        Command::Stream(a) => stream(a),
        Command::Synth(a) => synth(a),
        Command::Resp(RespCommand::Fit(a)) => resp_fit(a),
        Command::Resp(RespCommand::Predict(a)) => resp_predict(a),
        Command::Report(a) => report(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: the fit did not converge");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
