//! `das`: synthesize, explore, label, train, scan and summarize DAS recordings.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when a command fails
//! at run time. Every run logs its seed and a SHA-256 hash of its effective
//! configuration on stderr.

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use das_core::infer::{daily_curve, infer_segment, scan_corpus, DEFAULT_DOWNSAMPLE, DEFAULT_KERNEL_SIGMA};
use das_core::label::{build_training_set, LabelCriteria};
use das_core::metrics::{average_spectral_amplitude, channel_spectra, fit_gaussians, histogram, region_sigma, GaussianFitReport, DEFAULT_BINS};
use das_core::net::{load_checkpoint, ModelConfig};
use das_core::store::{read_segment, write_segment, CorpusManifest, DasSegment};
use das_core::synth::{gen_scene, SceneConfig};
use das_core::train::{throughput_benchmark, train, write_epoch_csv, Hyperparams, TrainOptions};
use serde::{de::DeserializeOwned, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

type Result<T, E = Box<dyn Error + Send + Sync>> = std::result::Result<T, E>;

#[derive(Parser, Debug)]
#[command(name = "das", version, about = "Surface-wave detection in distributed acoustic sensing recordings")]
struct Cli {
    /// Write log records to stderr as JSON lines.
    #[arg(long, global = true)]
    json: bool,
    /// Only log the start and end of a run.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene and its per-tile ground truth.
    Synth(SynthArgs),
    /// Fit single and double Gaussians to a region's amplitude histogram.
    Fit(FitArgs),
    /// Average amplitude spectrum of a region.
    Spectra(SpectraArgs),
    /// Label tiles of recordings and export a balanced training corpus.
    Label(LabelArgs),
    /// Train the residual network on a corpus.
    Train(TrainArgs),
    /// Scan recordings with a trained model.
    Infer(InferArgs),
    /// Downsample and smooth per-file probabilities into a daily curve.
    Daily(DailyArgs),
    /// Measure data-parallel training throughput.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    /// Scene description (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output segment (DASF).
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth JSON; defaults to the output path with `.truth.json`.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    tile: usize,
    /// Defaults to the tile size.
    #[arg(long)]
    stride: Option<usize>,
    /// Overrides the seed in the scene file.
    #[arg(long)]
    seed: Option<u64>,
}

/// Half-open channel and sample windows of a segment.
#[derive(Args, Debug, Serialize)]
struct RegionArgs {
    /// Channel rows `start:end`; all if omitted.
    #[arg(long, value_parser = parse_range)]
    channels: Option<(usize, usize)>,
    /// Sample columns `start:end`; all if omitted.
    #[arg(long, value_parser = parse_range)]
    samples: Option<(usize, usize)>,
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    /// Input segment (DASF).
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    region: RegionArgs,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Fit report (JSON); stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Histogram with both fitted curves (CSV).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SpectraArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    region: RegionArgs,
    /// Spectrum CSV; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct LabelArgs {
    /// Segments, or directories of `.dasf` files.
    #[arg(long = "in", required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Tiles to export per class.
    #[arg(long)]
    per_label: usize,
    /// Corpus directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    tile: usize,
    /// Labeling thresholds (JSON); defaults if omitted.
    #[arg(long)]
    criteria: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Corpus manifest.
    #[arg(long)]
    corpus: PathBuf,
    /// Model configuration (JSON); depth 8 at the corpus tile size if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hyperparameters (JSON); defaults if omitted.
    #[arg(long)]
    hyper: Option<PathBuf>,
    /// Data-parallel replicas.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the checkpoint, report and epoch CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct InferArgs {
    /// Checkpoint written by `das train`.
    #[arg(long)]
    model: PathBuf,
    /// Segments, directories of `.dasf` files, or `.txt` lists of paths.
    #[arg(long = "in", required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Defaults to the model input size.
    #[arg(long)]
    tile: Option<usize>,
    /// Defaults to the tile size.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write each file's probability map (CSV and PGM).
    #[arg(long)]
    maps: bool,
}

#[derive(Args, Debug, Serialize)]
struct DailyArgs {
    /// Per-file table written by `das infer`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DOWNSAMPLE)]
    factor: usize,
    #[arg(long, default_value_t = DEFAULT_KERNEL_SIGMA)]
    sigma: f64,
    /// Curve CSV; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    /// Model configuration (JSON); depth 8 at 50x50 if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// World sizes to time.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    workers: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Samples per replica per step.
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Table CSV; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected start:end, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("bad start in {s:?}: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("bad end in {s:?}: {e}"))?;
    if a >= b {
        return Err(format!("empty range {s:?}"));
    }
    Ok((a, b))
}

struct Log {
    json: bool,
    quiet: bool,
    command: &'static str,
}

impl Log {
    fn record(&self, event: &str, fields: Value) {
        if self.json {
            let mut obj = json!({ "command": self.command, "event": event });
            if let (Some(o), Value::Object(f)) = (obj.as_object_mut(), fields) {
                o.extend(f);
            }
            eprintln!("{obj}");
        } else {
            let mut line = format!("das {}: {event}", self.command);
            if let Value::Object(f) = fields {
                for (k, v) in f {
                    match v {
                        Value::String(s) => line.push_str(&format!(" {k}={s}")),
                        other => line.push_str(&format!(" {k}={other}")),
                    }
                }
            }
            eprintln!("{line}");
        }
    }

    fn progress(&self, event: &str, fields: Value) {
        if !self.quiet {
            self.record(event, fields);
        }
    }

    fn start(&self, seed: Option<u64>, config: &Value) {
        self.record("start", json!({ "seed": seed, "config_hash": config_hash(config) }));
    }
}

/// SHA-256 of the canonical (key-sorted) JSON encoding.
fn config_hash(config: &Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values always serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("configuration serializes")
}

/// Expands directories to their `.dasf` files (sorted) and `.txt` files to
/// the paths they list, one per line.
fn expand_inputs(inputs: &[PathBuf], allow_lists: bool) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| format!("{}: {e}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "dasf"))
                .collect();
            found.sort();
            files.extend(found);
        } else if allow_lists && p.extension().is_some_and(|x| x == "txt") {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            let base = p.parent().unwrap_or(Path::new(""));
            files.extend(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(|l| base.join(l)));
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err("no input files".into());
    }
    Ok(files)
}

fn region(segment: &DasSegment, r: &RegionArgs) -> Result<ndarray::Array2<f64>> {
    let (c, s) = (segment.n_channels(), segment.n_samples());
    let (c0, c1) = r.channels.unwrap_or((0, c));
    let (s0, s1) = r.samples.unwrap_or((0, s));
    if c1 > c || s1 > s {
        return Err(format!("region {c0}:{c1} x {s0}:{s1} exceeds segment {c} x {s}").into());
    }
    Ok(segment.data().slice(ndarray::s![c0..c1, s0..s1]).mapv(f64::from))
}

fn run_synth(a: &SynthArgs, log: &Log) -> Result<()> {
    let mut config: SceneConfig = read_json(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    let stride = a.stride.unwrap_or(a.tile);
    log.start(Some(config.seed), &json!({ "args": to_value(a), "scene": to_value(&config) }));
    let (segment, mask) = gen_scene(&config, a.tile, stride)?;
    ensure_parent(&a.out)?;
    write_segment(&segment, &a.out)?;
    let truth = a.truth.clone().unwrap_or_else(|| a.out.with_extension("truth.json"));
    write_text(&truth, &serde_json::to_string_pretty(&mask)?)?;
    log.record(
        "done",
        json!({ "segment": a.out.display().to_string(), "truth": truth.display().to_string(), "tiles": mask.labels.len() }),
    );
    Ok(())
}

fn fit_json(r: &GaussianFitReport<f64>) -> Value {
    json!({
        "components": r.components,
        "chi2_red": r.chi2_red,
        "df": r.df,
        "converged": r.converged,
        "iterations": r.iterations,
    })
}

fn run_fit(a: &FitArgs, log: &Log) -> Result<()> {
    log.start(None, &json!({ "args": to_value(a) }));
    let seg = read_segment(&a.input)?;
    let values = region(&seg, &a.region)?;
    let flat: Vec<f64> = values.iter().cloned().collect();
    let hist = histogram(&flat, a.bins)?;
    let single = fit_gaussians(&hist, 1, None)?;
    let double = fit_gaussians(&hist, 2, None)?;
    let preferred = if double.chi2_red < single.chi2_red { "double" } else { "single" };
    let report = json!({
        "input": a.input.display().to_string(),
        "n_values": flat.len(),
        "n_bins": a.bins,
        "region_sigma": region_sigma(values.view()),
        "single": fit_json(&single),
        "double": fit_json(&double),
        "preferred": preferred,
    });
    if let Some(csv) = &a.csv {
        let mut text = String::from("center,density,single,double\n");
        for (x, d) in hist.centers().iter().zip(&hist.density) {
            let s1 = das_core::metrics::gaussian_sum(&single.components, *x);
            let s2 = das_core::metrics::gaussian_sum(&double.components, *x);
            text.push_str(&format!("{x},{d},{s1},{s2}\n"));
        }
        write_text(csv, &text)?;
    }
    emit(a.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&report)?))?;
    log.record("done", json!({ "preferred": preferred, "single_chi2_red": single.chi2_red, "double_chi2_red": double.chi2_red }));
    Ok(())
}

fn run_spectra(a: &SpectraArgs, log: &Log) -> Result<()> {
    log.start(None, &json!({ "args": to_value(a) }));
    let seg = read_segment(&a.input)?;
    let values = region(&seg, &a.region)?;
    let spectra = channel_spectra(values.view(), seg.sample_rate_hz())?;
    let summary = average_spectral_amplitude(&spectra);
    emit(a.out.as_deref(), &summary.to_csv())?;
    log.record("done", json!({ "bins": summary.freqs.len(), "f_min_hz": summary.f_min() }));
    Ok(())
}

fn run_label(a: &LabelArgs, log: &Log) -> Result<()> {
    let criteria: LabelCriteria = match &a.criteria {
        Some(p) => read_json(p)?,
        None => LabelCriteria::default(),
    };
    let files = expand_inputs(&a.input, false)?;
    log.start(Some(a.seed), &json!({ "args": to_value(a), "criteria": to_value(&criteria) }));
    let mut sources = Vec::with_capacity(files.len());
    for f in &files {
        let seg = read_segment(f)?;
        criteria.validate(seg.sample_rate_hz())?;
        let name = f.file_stem().map_or_else(|| "segment".into(), |s| s.to_string_lossy().into_owned());
        sources.push((name, seg));
    }
    log.progress("loaded", json!({ "segments": sources.len() }));
    let manifest = build_training_set(&sources, &criteria, a.tile, &a.out, a.per_label, a.seed)?;
    log.record("done", json!({ "manifest": manifest.manifest_path().display().to_string(), "tiles": manifest.len() }));
    Ok(())
}

fn run_train(a: &TrainArgs, log: &Log) -> Result<()> {
    let manifest = CorpusManifest::load(&a.corpus)?;
    manifest.validate()?;
    let mut hyper: Hyperparams = match &a.hyper {
        Some(p) => read_json(p)?,
        None => Hyperparams::default(),
    };
    if let Some(e) = a.epochs {
        hyper.epochs = e;
    }
    if let Some(s) = a.seed {
        hyper.seed = s;
    }
    hyper.validate()?;
    let config: ModelConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ModelConfig::new(8, manifest.tile_size, hyper.seed),
    };
    config.validate()?;
    if a.workers == 0 {
        return Err("--workers must be at least 1".into());
    }
    log.start(
        Some(hyper.seed),
        &json!({ "args": to_value(a), "model": to_value(&config), "hyper": to_value(&hyper) }),
    );
    fs::create_dir_all(&a.out).map_err(|e| format!("{}: {e}", a.out.display()))?;
    let options = TrainOptions {
        checkpoint: Some(a.out.join("model.ckpt")),
    };
    let (report, _) = train::<f32>(&manifest, &config, &hyper, a.workers, &options, |e| {
        log.progress("epoch", to_value(e));
    })?;
    write_text(&a.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    write_epoch_csv(&report, a.out.join("epochs.csv"))?;
    log.record(
        "done",
        json!({
            "checkpoint": a.out.join("model.ckpt").display().to_string(),
            "val_acc": report.final_val_acc(),
            "wall_time_s": report.wall_time_s,
        }),
    );
    Ok(())
}

fn run_infer(a: &InferArgs, log: &Log) -> Result<()> {
    let ck = load_checkpoint::<f32>(&a.model)?;
    let tile = a.tile.unwrap_or(ck.model.config().input_size);
    let stride = a.stride.unwrap_or(tile);
    if a.workers == 0 {
        return Err("--workers must be at least 1".into());
    }
    let files = expand_inputs(&a.input, true)?;
    log.start(None, &json!({ "args": to_value(a), "model": to_value(ck.model.config()), "files": files }));
    let table = scan_corpus(&ck.model, &files, tile, stride, a.workers)?;
    fs::create_dir_all(&a.out).map_err(|e| format!("{}: {e}", a.out.display()))?;
    write_text(&a.out.join("files.csv"), &table.to_csv())?;
    if a.maps {
        for (i, row) in table.rows.iter().enumerate() {
            if row.error.is_some() {
                continue;
            }
            let seg = read_segment(&row.path)?;
            let map = infer_segment(&ck.model, &seg, tile, stride)?;
            let stem = format!("{i:05}-{}", row.path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()));
            write_text(&a.out.join(format!("{stem}.map.csv")), &map.to_csv())?;
            map.write_heatmap(a.out.join(format!("{stem}.pgm")))?;
        }
    }
    log.record("done", json!({ "files": table.rows.len(), "errors": table.errors() }));
    Ok(())
}

/// `mean_p` of every successfully scanned row of a `das infer` table.
fn read_scan_means(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let col = reader
        .headers()?
        .iter()
        .position(|h| h == "mean_p")
        .ok_or_else(|| format!("{}: no mean_p column", path.display()))?;
    let mut means = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let field = rec.get(col).unwrap_or("");
        if !field.is_empty() {
            means.push(field.parse::<f64>().map_err(|e| format!("{}: bad mean_p {field:?}: {e}", path.display()))?);
        }
    }
    Ok(means)
}

fn run_daily(a: &DailyArgs, log: &Log) -> Result<()> {
    log.start(None, &json!({ "args": to_value(a) }));
    let means = read_scan_means(&a.input)?;
    let curve = daily_curve(&means, a.factor, a.sigma)?;
    emit(a.out.as_deref(), &curve.to_csv())?;
    log.record("done", json!({ "files": means.len(), "points": curve.smoothed.len() }));
    Ok(())
}

fn run_bench(a: &BenchArgs, log: &Log) -> Result<()> {
    let config: ModelConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ModelConfig::new(8, 50, a.seed),
    };
    config.validate()?;
    if a.workers.is_empty() || a.workers.contains(&0) {
        return Err("--workers needs positive world sizes".into());
    }
    log.start(Some(a.seed), &json!({ "args": to_value(a), "model": to_value(&config) }));
    let report = throughput_benchmark::<f32>(&config, &a.workers, a.steps, a.batch, a.seed)?;
    if report.available_workers < a.workers.iter().copied().max().unwrap_or(1) {
        log.record("warning", json!({ "message": "more replicas than available cores", "available": report.available_workers }));
    }
    emit(a.out.as_deref(), &report.to_csv())?;
    log.record("done", to_value(&report.rows));
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let command = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Fit(_) => "fit",
        Command::Spectra(_) => "spectra",
        Command::Label(_) => "label",
        Command::Train(_) => "train",
        Command::Infer(_) => "infer",
        Command::Daily(_) => "daily",
        Command::Bench(_) => "bench",
    };
    let log = Log {
        json: cli.json,
        quiet: cli.quiet,
        command,
    };
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a, &log),
        Command::Fit(a) => run_fit(a, &log),
        Command::Spectra(a) => run_spectra(a, &log),
        Command::Label(a) => run_label(a, &log),
        Command::Train(a) => run_train(a, &log),
        Command::Infer(a) => run_infer(a, &log),
        Command::Daily(a) => run_daily(a, &log),
        Command::Bench(a) => run_bench(a, &log),
    };
    if let Err(e) = &result {
        log.record("error", json!({ "message": e.to_string() }));
    }
    result
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(_) => ExitCode::from(2),
    }
}
