mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use stars_core::checkpoint::{self, STAGE_INIT};
use stars_core::contrastive::{run_stage2, TuneMode};
use stars_core::data::{generate_synthetic, Dataset, SynthConfig};
use stars_core::eval::{
    extract_features, few_shot_eval, knn_eval, linear_probe, read_features, select_exemplars, write_features,
    EvalResult, FeatureSet,
};
use stars_core::nn::ModelParams;
use stars_core::pretrain::{run_stage1, EpochRecord, LOG_FILE};

use config::{resolve, Resolved, SEED_ENV};

/// Usage and configuration problems exit with 2, everything else with 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

#[derive(Parser)]
#[command(
    name = "stars",
    version,
    about = "Masked motion pretraining and contrastive tuning for skeleton sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `stage2.tau2=0.07`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Resolved, Failure> {
        resolve(self.config.as_deref(), &self.overrides, std::env::var(SEED_ENV).ok()).usage()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled dataset.
    GenSynth(GenSynthArgs),
    /// Stage 1: masked motion prediction.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train on one side of a protocol split instead of the whole dataset.
        #[arg(long)]
        protocol: Option<String>,
    },
    /// Stage 2: nearest-neighbor contrastive tuning from a stage-1 checkpoint.
    Tune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        head_epochs: Option<usize>,
        #[arg(long)]
        protocol: Option<String>,
    },
    /// Write pooled encoder features of a dataset split to an FTS1 file.
    Extract {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Evaluate features with one protocol.
    Eval {
        #[command(subcommand)]
        protocol: EvalCommand,
    },
    /// Plot a numeric training-log field against epoch as SVG.
    Plot {
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value = "mean_loss")]
        field: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 120)]
    frames: usize,
    #[arg(long, default_value_t = 25)]
    joints: usize,
    /// Samples per class assigned to the held-out side.
    #[arg(long, default_value_t = 0)]
    test_per_class: usize,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    pose_jitter: Option<f64>,
    #[arg(long)]
    nuisance_amplitude: Option<f64>,
    #[arg(long)]
    rotation_jitter_deg: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalFiles {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Also plot `mean_loss` of this training log to an SVG beside it.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    Knn {
        #[command(flatten)]
        files: EvalFiles,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    Fewshot {
        #[command(flatten)]
        files: EvalFiles,
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Use the first `n` rows of each class in `--train` as exemplars
        /// instead of requiring exactly `n` per class.
        #[arg(long)]
        select: bool,
    },
    Linear {
        #[command(flatten)]
        files: EvalFiles,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    TwoStage,
    ThreeStage,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            println!("{}", json!({ "status": "error", "error": format!("{e:#}") }));
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::GenSynth(args) => gen_synth(args),
        Command::Pretrain {
            cfg,
            data,
            out,
            protocol,
        } => pretrain(&cfg, &data, &out, protocol.as_deref()),
        Command::Tune {
            cfg,
            data,
            init,
            out,
            mode,
            head_epochs,
            protocol,
        } => tune(&cfg, &data, &init, &out, mode, head_epochs, protocol.as_deref()),
        Command::Extract {
            cfg,
            ckpt,
            data,
            out,
            protocol,
            split,
        } => extract(&cfg, &ckpt, &data, &out, protocol.as_deref(), split),
        Command::Eval { protocol } => eval(protocol),
        Command::Plot { logs, field, out } => {
            plot_logs(&logs, &field, &out).runtime()?;
            emit(&json!({ "series": logs.len(), "field": field, "out": out.display().to_string() }));
            Ok(())
        }
    }
}

fn emit(value: &serde_json::Value) {
    println!("{value}");
}

fn log_epoch(r: &EpochRecord) {
    match &r.phase {
        Some(phase) => log::info!(
            "{phase} epoch {:>4}  loss {:.6}  lr {:.3e}  {} ms",
            r.epoch,
            r.mean_loss,
            r.lr,
            r.wall_ms
        ),
        None => log::info!(
            "epoch {:>4}  loss {:.6}  lr {:.3e}  {} ms",
            r.epoch,
            r.mean_loss,
            r.lr,
            r.wall_ms
        ),
    }
}

fn gen_synth(a: GenSynthArgs) -> CmdResult {
    let mut cfg = SynthConfig {
        classes: a.classes,
        per_class: a.per_class,
        frames: a.frames,
        joints: a.joints,
        test_per_class: a.test_per_class,
        ..Default::default()
    };
    let knobs = [
        (a.noise_std, &mut cfg.noise_std),
        (a.pose_jitter, &mut cfg.pose_jitter),
        (a.nuisance_amplitude, &mut cfg.nuisance_amplitude),
        (a.rotation_jitter_deg, &mut cfg.rotation_jitter_deg),
    ];
    for (flag, field) in knobs {
        if let Some(v) = flag {
            *field = v;
        }
    }
    cfg.validate().usage()?;
    let dataset = generate_synthetic(&cfg, a.seed).runtime()?;
    dataset.save(&a.out).runtime()?;
    emit(&json!({
        "classes": a.classes,
        "per_class": a.per_class,
        "frames": a.frames,
        "joints": a.joints,
        "seed": a.seed,
    }));
    Ok(())
}

fn load_dataset(dir: &Path, protocol: Option<&str>, test_side: bool) -> Result<Dataset, Failure> {
    let dataset = Dataset::load(dir)
        .with_context(|| format!("loading dataset {}", dir.display()))
        .runtime()?;
    match protocol {
        Some(p) => dataset.subset(Some(p), test_side).runtime(),
        None => Ok(dataset),
    }
}

fn check_dataset(dataset: &Dataset, model: &stars_core::nn::ModelConfig) -> Result<(), Failure> {
    if let Some(seq) = dataset.sequences.first() {
        if seq.num_joints() != model.joints || seq.num_channels() != model.channels {
            return Err(Failure::Runtime(anyhow!(
                "dataset has {} joints x {} channels, model expects {} x {}",
                seq.num_joints(),
                seq.num_channels(),
                model.joints,
                model.channels
            )));
        }
    }
    Ok(())
}

fn pretrain(cfg: &ConfigArgs, data: &Path, out: &Path, protocol: Option<&str>) -> CmdResult {
    let Resolved { config, .. } = cfg.resolve()?;
    let dataset = load_dataset(data, protocol, false)?;
    check_dataset(&dataset, &config.model)?;
    let params = ModelParams::init(&config.model, config.seed).runtime()?;
    log::info!(
        "stage 1: {} sequences, {} parameters, {} epochs",
        dataset.len(),
        params.parameter_count(),
        config.stage1.epochs
    );
    let meta = run_stage1(&dataset, &config.stage1, &config.data, params, out, log_epoch).runtime()?;
    emit(&json!({
        "stage": meta.stage,
        "epochs": meta.epoch,
        "content_hash": meta.content_hash,
        "out": out.display().to_string(),
    }));
    Ok(())
}

fn tune(
    cfg: &ConfigArgs,
    data: &Path,
    init: &Path,
    out: &Path,
    mode: Option<ModeArg>,
    head_epochs: Option<usize>,
    protocol: Option<&str>,
) -> CmdResult {
    let Resolved {
        mut config,
        model_explicit,
        data_explicit,
    } = cfg.resolve()?;
    if let Some(m) = mode {
        config.stage2.mode = match m {
            ModeArg::TwoStage => TuneMode::TwoStage,
            ModeArg::ThreeStage => TuneMode::ThreeStage,
        };
    }
    if let Some(h) = head_epochs {
        config.stage2.head_epochs = h;
    }
    let (params, meta) = checkpoint::load_checkpoint(init)
        .with_context(|| format!("loading checkpoint {}", init.display()))
        .runtime()?;
    adopt_checkpoint(&mut config, &meta, model_explicit, data_explicit, init)?;
    if meta.stage == STAGE_INIT {
        log::warn!("{} is an untrained initialization", init.display());
    }
    let dataset = load_dataset(data, protocol, false)?;
    check_dataset(&dataset, &config.model)?;
    log::info!(
        "stage 2 ({:?}): {} sequences from {} checkpoint {}",
        config.stage2.mode,
        dataset.len(),
        meta.stage,
        &meta.content_hash[..12]
    );
    let meta = run_stage2(&dataset, &config.stage2, &config.data, params, out, log_epoch).runtime()?;
    emit(&json!({
        "stage": meta.stage,
        "mode": config.stage2.mode,
        "epochs": meta.epoch,
        "content_hash": meta.content_hash,
        "out": out.display().to_string(),
    }));
    Ok(())
}

fn extract(
    cfg: &ConfigArgs,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    protocol: Option<&str>,
    split: SplitArg,
) -> CmdResult {
    let Resolved {
        mut config,
        model_explicit,
        data_explicit,
    } = cfg.resolve()?;
    let (params, meta) = checkpoint::load_checkpoint(ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))
        .runtime()?;
    adopt_checkpoint(&mut config, &meta, model_explicit, data_explicit, ckpt)?;
    let dataset = Dataset::load(data)
        .with_context(|| format!("loading dataset {}", data.display()))
        .runtime()?;
    let dataset = match split {
        SplitArg::All => dataset,
        side => {
            let protocol = match protocol {
                Some(p) => p.to_string(),
                None => match dataset.manifest.splits.keys().collect::<Vec<_>>()[..] {
                    [only] => only.clone(),
                    _ => return Err(Failure::Usage(anyhow!("--protocol is required to pick a split"))),
                },
            };
            dataset
                .subset(Some(&protocol), matches!(side, SplitArg::Test))
                .runtime()?
        }
    };
    let fs = extract_features(
        &params,
        &dataset,
        &config.data.preprocess,
        Some(meta.content_hash.clone()),
        Some(meta.stage.clone()),
    )
    .runtime()?;
    write_features(out, &fs).runtime()?;
    emit(&json!({
        "rows": fs.len(),
        "dim": fs.dim(),
        "checkpoint": meta.content_hash,
        "out": out.display().to_string(),
    }));
    Ok(())
}

/// Takes the model config from the checkpoint, and its recorded data config
/// unless one was given. An explicit model config must match.
fn adopt_checkpoint(
    config: &mut config::RunConfig,
    meta: &checkpoint::CheckpointMeta,
    model_explicit: bool,
    data_explicit: bool,
    dir: &Path,
) -> CmdResult {
    if model_explicit && meta.config != config.model {
        return Err(Failure::Runtime(anyhow!(
            "checkpoint mismatch: model config of {} differs from the run config",
            dir.display()
        )));
    }
    config.model = meta.config.clone();
    if !data_explicit {
        if let Some(data) = meta.details.get("data") {
            config.data = serde_json::from_value(data.clone())
                .with_context(|| format!("data config recorded in {}", dir.display()))
                .runtime()?;
        }
    }
    config::validate(config).runtime()
}

fn load_pair(files: &EvalFiles) -> Result<(FeatureSet, FeatureSet), Failure> {
    let train = read_features(&files.train)
        .with_context(|| format!("reading {}", files.train.display()))
        .runtime()?;
    let test = read_features(&files.test)
        .with_context(|| format!("reading {}", files.test.display()))
        .runtime()?;
    if train.dim() != test.dim() {
        return Err(Failure::Runtime(anyhow!(
            "feature dimension mismatch: {} has {}, {} has {}",
            files.train.display(),
            train.dim(),
            files.test.display(),
            test.dim()
        )));
    }
    Ok((train, test))
}

fn eval(command: EvalCommand) -> CmdResult {
    let (files, protocol, k_or_n) = match &command {
        EvalCommand::Knn { files, k } => (files, "knn", *k),
        EvalCommand::Fewshot { files, n, .. } => (files, "fewshot", *n),
        EvalCommand::Linear { files, .. } => (files, "linear", 0),
    };
    if k_or_n == 0 && protocol != "linear" {
        return Err(Failure::Usage(anyhow!("k and n must be >= 1")));
    }
    let mut probe = None;
    if let EvalCommand::Linear { cfg, epochs, .. } = &command {
        let mut p = cfg.resolve()?.config.eval.probe;
        if let Some(e) = epochs {
            p.epochs = *e;
        }
        probe = Some(p);
    }
    let (mut train, test) = load_pair(files)?;
    if let EvalCommand::Fewshot { n, select: true, .. } = &command {
        train = select_exemplars(&train, *n).runtime()?;
    }
    let accuracy = match &command {
        EvalCommand::Knn { k, .. } => knn_eval(&train, &test, *k),
        EvalCommand::Fewshot { n, .. } => few_shot_eval(&train, &test, *n),
        EvalCommand::Linear { .. } => linear_probe(&train, &test, probe.as_ref().expect("set above")),
    }
    .runtime()?;
    if let Some(log) = &files.plot {
        let svg = log.with_extension("svg");
        plot_logs(std::slice::from_ref(log), "mean_loss", &svg).runtime()?;
        log::info!("wrote {}", svg.display());
    }
    let result = EvalResult {
        protocol: protocol.to_string(),
        k_or_n,
        accuracy,
        train_size: train.len(),
        test_size: test.len(),
    };
    emit(&serde_json::to_value(result).runtime()?);
    Ok(())
}

fn plot_logs(logs: &[PathBuf], field: &str, out: &Path) -> anyhow::Result<()> {
    let logs: Vec<PathBuf> = logs
        .iter()
        .map(|p| if p.is_dir() { p.join(LOG_FILE) } else { p.clone() })
        .collect();
    let series = logs
        .iter()
        .map(|p| plot::read_series(p, field))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if series.is_empty() {
        bail!("no logs given");
    }
    let svg = plot::render_svg(&series, "epoch", field);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(out, svg).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
