//! spinemark: vertebrae identification and localization from volumetric
//! images. Subcommands cover the whole workflow: phantom synthesis, CNN
//! training, FCN conversion, Bi-RNN training, prediction, evaluation, and
//! the built-in verification suite.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spinemark_core::checkpoint;
use spinemark_core::config::RunConfig;
use spinemark_core::data::{
    generate_corpus, load_volume, resample, save_volume, sidecar_path, AnnotationSet, CorpusSpec,
    Volume,
};
use spinemark_core::eval::{
    identification_records, predict_volume, records_to_report, EvaluationFile, PredictionPaths,
    PredictionsFile,
};
use spinemark_core::net::convert_to_fcn;
use spinemark_core::selftest::run_selftest;

#[derive(Parser)]
#[command(
    name = "spinemark",
    about = "Joint vertebrae identification and localization pipeline",
    version
)]
struct Cli {
    /// Worker threads (falls back to SPINEMARK_THREADS, then to the logical
    /// core count).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom corpus from a corpus-spec JSON file.
    Synth(SynthArgs),
    /// Train the multi-task 3D CNN on a directory of annotated volumes.
    TrainCnn(TrainArgs),
    /// Convert a trained CNN checkpoint into its fully convolutional form.
    Convert(ConvertArgs),
    /// Train the bidirectional RNN on feature sequences extracted by the FCN.
    TrainRnn(TrainRnnArgs),
    /// Run both inference paths over a volume and write the predictions.
    Predict(PredictArgs),
    /// Score predictions against ground-truth annotations.
    Evaluate(EvaluateArgs),
    /// Run the built-in verification suites and a miniature end-to-end run.
    Selftest(SelftestArgs),
    /// Print the default configuration as JSON.
    EmitConfig(EmitConfigArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Corpus-spec JSON file.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for `.vvol` volumes and `.ann.json` sidecars.
    #[arg(long)]
    out_dir: PathBuf,
    /// File-name prefix.
    #[arg(long, default_value = "phantom")]
    prefix: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration JSON; omitted sections use the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of training volumes; overrides `data.train_dir`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Run directory for checkpoints, curves and the manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    /// CNN checkpoint produced by train-cnn.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output FCN checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainRnnArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// FCN checkpoint used to extract feature sequences.
    #[arg(long)]
    fcn: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Volume to scan.
    #[arg(long)]
    volume: PathBuf,
    /// Checkpoint files; together they must provide the fcn section and,
    /// for the full path, the birnn section.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Resample the volume to this spacing first (mm, comma separated).
    #[arg(long, value_delimiter = ',', num_args = 3)]
    resample_mm: Option<Vec<f64>>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions JSON written by predict.
    #[arg(long)]
    predictions: PathBuf,
    /// Ground-truth annotation sidecar (`.ann.json`).
    #[arg(long)]
    annotations: PathBuf,
    /// Identification distance threshold in millimeters.
    #[arg(long, default_value_t = 20.0)]
    threshold_mm: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    /// Directory for the end-to-end artifacts (volumes, checkpoints,
    /// predictions, evaluations). Omit to skip writing artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmitConfigArgs {
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_threads(flag: Option<usize>, config: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("SPINEMARK_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .or(config)
    .unwrap_or_else(num_threads_default)
}

fn num_threads_default() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn init_thread_pool(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("building the thread pool")?;
    Ok(())
}

fn write_manifest(dir: &Path, command: &str, detail: serde_json::Value) -> Result<()> {
    let manifest = serde_json::json!({
        "tool": "spinemark",
        "command": command,
        "detail": detail,
    });
    std::fs::create_dir_all(dir)?;
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Loads every `.vvol` in a directory (sorted by name) with its annotations.
fn load_training_dir(dir: &Path, cfg: &RunConfig) -> Result<Vec<(Volume, AnnotationSet)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "vvol").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .vvol volumes found in {}", dir.display());
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in &paths {
        let (volume, annotations) = load_volume(p)?;
        let annotations = annotations
            .with_context(|| format!("{} has no {} sidecar", p.display(), sidecar_path(p).display()))?;
        let (volume, annotations) = if cfg.data.resample {
            resample(&volume, &annotations, cfg.data.target_spacing_mm)?
        } else {
            (volume, annotations)
        };
        out.push((volume, annotations));
    }
    Ok(out)
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))?;
    let spec: CorpusSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", args.spec.display()))?;
    let corpus = generate_corpus(&spec)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let mut outputs = Vec::new();
    for (i, (volume, annotations)) in corpus.iter().enumerate() {
        let name = format!("{}_{i:03}.vvol", args.prefix);
        let path = args.out_dir.join(&name);
        save_volume(&path, volume, Some(annotations))?;
        outputs.push(name);
    }
    write_manifest(
        &args.out_dir,
        "synth",
        serde_json::json!({ "spec": spec, "outputs": outputs }),
    )?;
    println!("synthesized {} volumes into {}", corpus.len(), args.out_dir.display());
    Ok(())
}

fn cmd_train_cnn(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(d) = &args.data_dir {
        cfg.data.train_dir = Some(d.clone());
    }
    let data_dir = cfg
        .data
        .train_dir
        .clone()
        .context("no training data directory (set data.train_dir or --data-dir)")?;
    let volumes = load_training_dir(&data_dir, &cfg)?;

    let sample_dims = cfg.cnn_arch.sample_dims;
    let (samples, warnings) = spinemark_core::data::generate_cnn_samples(
        &volumes,
        sample_dims,
        cfg.data.positives_per_vertebra,
        cfg.data.negatives_per_vertebra,
        cfg.sampling_seed(),
    );
    for w in &warnings {
        log::warn!("volume {}: {}", w.volume_index, w.message);
    }
    let mut cnn_cfg = cfg.cnn_train.clone();
    cnn_cfg.seed = cfg.cnn_seed();
    log::info!("training cnn on {} samples", samples.len());
    let (params, curve) = spinemark_core::train::train_cnn(&samples, &cfg.cnn_arch, &cnn_cfg)?;

    std::fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("cnn.spmk");
    checkpoint::save_cnn(&ckpt, &params)?;
    std::fs::write(
        args.out.join("cnn_curve.json"),
        serde_json::to_string_pretty(&curve)?,
    )?;
    write_manifest(
        &args.out,
        "train-cnn",
        serde_json::json!({
            "config": cfg,
            "data_dir": data_dir,
            "samples": samples.len(),
            "outputs": ["cnn.spmk", "cnn_curve.json"],
        }),
    )?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn cmd_convert(args: &ConvertArgs) -> Result<()> {
    let models = checkpoint::load_models(&[args.checkpoint.as_path()])?;
    let cnn = models
        .cnn
        .with_context(|| format!("{} has no cnn section", args.checkpoint.display()))?;
    let fcn = convert_to_fcn(&cnn)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    checkpoint::save_fcn(&args.out, &fcn)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_train_rnn(args: &TrainRnnArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(d) = &args.data_dir {
        cfg.data.train_dir = Some(d.clone());
    }
    let data_dir = cfg
        .data
        .train_dir
        .clone()
        .context("no training data directory (set data.train_dir or --data-dir)")?;
    let volumes = load_training_dir(&data_dir, &cfg)?;
    let models = checkpoint::load_models(&[args.fcn.as_path()])?;
    let fcn = models
        .fcn
        .with_context(|| format!("{} has no fcn section", args.fcn.display()))?;
    if fcn.arch != cfg.cnn_arch {
        bail!(
            "fcn checkpoint architecture {:?} does not match the configured cnn architecture",
            fcn.arch
        );
    }

    let subimages = spinemark_core::data::generate_rnn_subimages(
        &volumes,
        cfg.cnn_arch.sample_dims,
        cfg.data.subimages_per_vertebra,
        spinemark_core::data::mix_seed(cfg.sampling_seed(), 0x535542, 0),
    );
    log::info!("extracting sequences from {} subimages", subimages.len());
    let mut sequences = Vec::new();
    for (sub_vol, sub_ann) in &subimages {
        let maps = spinemark_core::net::fcn_forward(&fcn, &sub_vol.intensities)?;
        let seq = spinemark_core::pipeline::ground_truth_sequence(
            &maps,
            sub_vol,
            sub_ann,
            cfg.cnn_arch.sample_dims,
        );
        if !seq.is_empty() {
            sequences.push(seq);
        }
    }
    let mut rnn_cfg = cfg.rnn_train.clone();
    rnn_cfg.seed = cfg.rnn_seed();
    log::info!("training birnn on {} sequences", sequences.len());
    let (birnn, curve) =
        spinemark_core::sequence::train_birnn(&sequences, &cfg.rnn_arch, &rnn_cfg)?;

    std::fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("birnn.spmk");
    checkpoint::save_birnn(&ckpt, &birnn)?;
    std::fs::write(
        args.out.join("rnn_curve.json"),
        serde_json::to_string_pretty(&curve)?,
    )?;
    write_manifest(
        &args.out,
        "train-rnn",
        serde_json::json!({
            "config": cfg,
            "data_dir": data_dir,
            "fcn": args.fcn,
            "sequences": sequences.len(),
            "outputs": ["birnn.spmk", "rnn_curve.json"],
        }),
    )?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let paths: Vec<&Path> = args.checkpoints.iter().map(|p| p.as_path()).collect();
    let models = checkpoint::load_models(&paths)?;
    let fcn = models.fcn.context("checkpoints provide no fcn section")?;
    let birnn = models.birnn.context("checkpoints provide no birnn section")?;

    let (volume, _) = load_volume(&args.volume)?;
    let volume = match &args.resample_mm {
        Some(sp) => {
            let spacing = [sp[0], sp[1], sp[2]];
            resample(&volume, &AnnotationSet::default(), spacing)?.0
        }
        None => volume,
    };
    let prediction = predict_volume(&fcn, &birnn, &volume)?;

    let volume_name = args
        .volume
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| args.volume.display().to_string());
    let file = PredictionsFile {
        volume: volume_name,
        spacing_mm: volume.spacing_mm,
        paths: PredictionPaths {
            cnn_bi_rnn: prediction.rnn,
            cnn_only: prediction.cnn_only,
        },
    };
    std::fs::create_dir_all(&args.out)?;
    let stem = args
        .volume
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".into());
    let out_path = args.out.join(format!("{stem}.predictions.json"));
    std::fs::write(&out_path, serde_json::to_string_pretty(&file)?)?;
    write_manifest(
        &args.out,
        "predict",
        serde_json::json!({
            "volume": args.volume,
            "checkpoints": args.checkpoints,
            "outputs": [out_path.file_name().map(|n| n.to_string_lossy().into_owned())],
        }),
    )?;
    println!(
        "wrote {} ({} labels via bi-rnn, {} via cnn-only)",
        out_path.display(),
        file.paths.cnn_bi_rnn.len(),
        file.paths.cnn_only.len()
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.predictions)
        .with_context(|| format!("reading {}", args.predictions.display()))?;
    let preds: PredictionsFile = serde_json::from_str(&text)?;

    let ann_text = std::fs::read_to_string(&args.annotations)
        .with_context(|| format!("reading {}", args.annotations.display()))?;
    let gt = spinemark_core::data::parse_annotations(&ann_text, &args.annotations)?;

    let spacing = preds.spacing_mm;
    let file = EvaluationFile {
        cnn_bi_rnn: records_to_report(
            &identification_records(&preds.paths.cnn_bi_rnn, &gt, spacing, args.threshold_mm),
            None,
        ),
        cnn_only: records_to_report(
            &identification_records(&preds.paths.cnn_only, &gt, spacing, args.threshold_mm),
            None,
        ),
    };
    std::fs::create_dir_all(&args.out)?;
    let stem = args
        .predictions
        .file_stem()
        .and_then(|s| s.to_string_lossy().strip_suffix(".predictions").map(String::from))
        .unwrap_or_else(|| "volume".into());
    let out_path = args.out.join(format!("{stem}.eval.json"));
    std::fs::write(&out_path, serde_json::to_string_pretty(&file)?)?;
    write_manifest(
        &args.out,
        "evaluate",
        serde_json::json!({
            "predictions": args.predictions,
            "annotations": args.annotations,
            "threshold_mm": args.threshold_mm,
            "outputs": [out_path.file_name().map(|n| n.to_string_lossy().into_owned())],
        }),
    )?;
    println!(
        "wrote {} (bi-rnn id rate {:.3}, cnn-only {:.3})",
        out_path.display(),
        file.cnn_bi_rnn.id_rate_all,
        file.cnn_only.id_rate_all
    );
    Ok(())
}

fn cmd_selftest(args: &SelftestArgs) -> Result<()> {
    let report = run_selftest(args.out.as_deref())?;
    for check in &report.checks {
        println!(
            "[{}] {} — {}",
            if check.passed { "PASS" } else { "FAIL" },
            check.name,
            check.detail
        );
    }
    if !report.passed() {
        bail!("selftest failed");
    }
    println!("selftest passed ({} checks)", report.checks.len());
    Ok(())
}

fn cmd_emit_config(args: &EmitConfigArgs) -> Result<()> {
    let json = RunConfig::default().to_json()?;
    match &args.out {
        Some(p) => {
            std::fs::write(p, &json)?;
            println!("wrote {}", p.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    let config_threads = match &cli.command {
        Command::TrainCnn(a) => load_config(&a.config).ok().and_then(|c| c.threads),
        Command::TrainRnn(a) => load_config(&a.config).ok().and_then(|c| c.threads),
        _ => None,
    };
    let threads = resolve_threads(cli.threads, config_threads);
    if let Err(e) = init_thread_pool(threads) {
        log::warn!("thread pool: {e}");
    }

    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::TrainCnn(a) => cmd_train_cnn(a),
        Command::Convert(a) => cmd_convert(a),
        Command::TrainRnn(a) => cmd_train_rnn(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Selftest(a) => cmd_selftest(a),
        Command::EmitConfig(a) => cmd_emit_config(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
