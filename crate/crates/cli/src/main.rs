use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hipnet::config::{self, RunConfig};
use hipnet::data::{self, Manifest, Split};
use hipnet::densenet::{Network, NetworkSpec};
use hipnet::dicom::{self, PhiPolicy};
use hipnet::train::{self, InitMode, TrainError, TrainOutcome};
use hipnet::{image, phantom, saliency, weights};

/// Implant-design classification on synthetic radiographs.
#[derive(Debug, Parser)]
#[command(name = "hipnet", version)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the phantom corpus with masks and a manifest.
    Phantoms(CorpusArgs),
    /// Render the unrelated shape corpus used to pretrain donors.
    Shapes(CorpusArgs),
    /// Assign a stratified train/val/test split to a manifest.
    Split(SplitArgs),
    /// Train a classifier.
    Train(TrainArgs),
    /// Train a donor network on the shape corpus.
    Pretrain(RunArgs),
    /// Train every grid point and keep the best by validation accuracy.
    Gridsearch(GridArgs),
    /// Evaluate saved weights on one split.
    Eval(EvalArgs),
    /// Train from Gaussian and from frozen donor weights and compare.
    Compare(RunArgs),
    /// Saliency overlay for one image.
    Saliency(SaliencyArgs),
    /// Anonymize a DICOM file and export its pixels as PNG.
    Ingest(IngestArgs),
}

#[derive(Debug, Args)]
struct CorpusArgs {
    #[arg(long)]
    out: PathBuf,
    /// Images per class, comma separated.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    #[arg(long, default_value_t = phantom::DEFAULT_SIZE)]
    size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Train, val and test ratios; must sum to 1.
    #[arg(long, value_delimiter = ',', default_values_t = data::DEFAULT_RATIOS)]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write here instead of rewriting the input manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Options shared by every training command. Flags override the config
/// file, which overrides the preset.
#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: desk (100 epochs) or paper (350 epochs).
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    donor: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// gaussian or pretrained-frozen.
    #[arg(long)]
    init: Option<InitMode>,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Grid file; a small learning-rate and decay grid by default.
    #[arg(long)]
    grid: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Architecture config; the class count is read from the weights.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prediction log (JSON Lines).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Score saliency against phantom masks found beside each image.
    #[arg(long)]
    localize: bool,
}

#[derive(Debug, Args)]
struct SaliencyArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Overlay PNG; the map and scores go beside it as JSON.
    #[arg(long)]
    out: PathBuf,
    /// Directory holding the image's phantom masks.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Class to explain; the predicted class by default.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, default_value_t = saliency::DEFAULT_TOP_FRACTION)]
    top_fraction: f64,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    dicom: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sidecar receiving the removed elements (JSON Lines).
    #[arg(long)]
    quarantine: PathBuf,
    /// Also write the anonymized DICOM file.
    #[arg(long)]
    anonymized: Option<PathBuf>,
}

/// Bad flags or a config that cannot describe a run.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<config::ConfigError>() {
            return EXIT_USAGE;
        }
        if let Some(TrainError::Diverged { .. }) = cause.downcast_ref::<TrainError>() {
            return EXIT_NUMERIC;
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The cause chain, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("building the thread pool")?;
    pool.install(|| dispatch(cli.command))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Phantoms(a) => corpus(a, phantom::DEFAULT_COUNTS, phantom::generate_dataset),
        Command::Shapes(a) => corpus(a, [60, 60, 60], phantom::generate_shapes),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Gridsearch(a) => gridsearch(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Saliency(a) => saliency_cmd(a),
        Command::Ingest(a) => ingest(a),
    }
}

fn three<T: Copy>(values: &[T], what: &str) -> Result<[T; 3]> {
    values
        .try_into()
        .map_err(|_| usage(format!("{what} needs exactly three comma-separated values")))
}

fn corpus<E>(a: CorpusArgs, default: [usize; 3], generate: fn([usize; 3], usize, u64, &Path) -> Result<Manifest, E>) -> Result<()>
where
    E: std::error::Error + Send + Sync + 'static,
{
    let counts = match &a.counts {
        Some(c) => three(c, "--counts")?,
        None => default,
    };
    if counts.contains(&0) {
        return Err(usage("--counts must be positive"));
    }
    if a.size < phantom::MIN_SIZE {
        return Err(usage(format!("--size must be at least {}", phantom::MIN_SIZE)));
    }
    let manifest = generate(counts, a.size, a.seed, &a.out)?;
    println!(
        "wrote {} images and {} to {}",
        manifest.len(),
        data::MANIFEST_FILE,
        a.out.display()
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let ratios = three(&a.ratios, "--ratios")?;
    data::check_ratios(ratios).map_err(|e| usage(e.to_string()))?;
    let manifest = Manifest::load(&a.manifest)?;
    let split = data::stratified_split(&manifest, ratios, a.seed)?;
    let out = a.out.as_ref().unwrap_or(&a.manifest);
    split.save(out)?;
    let counts = split.counts();
    println!("label,train,val,test");
    for label in split.classes() {
        let n = |s| counts.get(&(label.clone(), s)).copied().unwrap_or(0);
        println!("{label},{},{},{}", n(Split::Train), n(Split::Val), n(Split::Test));
    }
    Ok(())
}

/// Preset, then config file, then flags.
fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(&a.preset)?;
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg = RunConfig::parse_over(cfg, &text).with_context(|| format!("in {}", path.display()))?;
    }
    let mut set = |key: &str, value: String| cfg.set(key, &value);
    if let Some(p) = &a.manifest {
        set("manifest", p.display().to_string())?;
    }
    if let Some(p) = &a.donor {
        set("donor", p.display().to_string())?;
    }
    if let Some(p) = &a.out {
        set("out_dir", p.display().to_string())?;
    }
    if let Some(n) = a.epochs {
        set("epochs", n.to_string())?;
    }
    if let Some(n) = a.seed {
        set("seed", n.to_string())?;
    }
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn manifest_of(cfg: &RunConfig) -> Result<Manifest> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| usage("no manifest: pass --manifest or set `manifest` in the config"))?;
    Ok(Manifest::load(path)?)
}

/// Donor weights, with the class count taken from the stored head.
fn load_donor(path: &Path, spec: &NetworkSpec) -> Result<Network> {
    let state = weights::load_state(path).context("loading weights")?;
    let classes = weights::head_classes(&state).ok_or_else(|| anyhow!("{} has no classifier head", path.display()))?;
    let spec = NetworkSpec {
        num_classes: classes,
        ..spec.clone()
    };
    Ok(Network::from_state(spec, state)?)
}

fn load_network(path: &Path, config: Option<&Path>) -> Result<Network> {
    let spec = match config {
        Some(c) => {
            let text = std::fs::read_to_string(c).with_context(|| format!("reading {}", c.display()))?;
            RunConfig::parse(&text)?.train.spec
        }
        None => RunConfig::default().train.spec,
    };
    load_donor(path, &spec)
}

fn create_out_dir(cfg: &RunConfig) -> Result<&Path> {
    let dir = cfg.out_dir.as_path();
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(dir)
}

/// Metrics, weights, audit log and, when the manifest has a test or
/// validation split, the prediction log.
fn write_run(dir: &Path, outcome: &TrainOutcome, manifest: &Manifest) -> Result<()> {
    std::fs::write(dir.join("metrics.csv"), outcome.record.metrics_csv())?;
    weights::save(outcome.network.state(), &dir.join("weights.thrw"))?;
    let audit: String = outcome
        .record
        .audit
        .iter()
        .map(|e| serde_json::to_string(e).map(|s| s + "\n"))
        .collect::<Result<_, _>>()?;
    std::fs::write(dir.join("audit.jsonl"), audit)?;
    let record = &outcome.record;
    println!(
        "{} epochs in {:.1} s, best epoch {} (val accuracy {:.4})",
        record.epochs.len(),
        record.wall_time_secs,
        record.best_epoch,
        record.best_val_accuracy
    );
    if let Some(reason) = &record.stop_reason {
        println!("stopped early: {reason}");
    }
    let split = [Split::Test, Split::Val]
        .into_iter()
        .find(|&s| !manifest.in_split(s).is_empty());
    if let Some(split) = split {
        let report = train::evaluate(&outcome.network, manifest, split, &manifest.classes())?;
        std::fs::write(dir.join("predictions.jsonl"), report.predictions_jsonl())?;
        println!("{split} split");
        print!("{}", report.summary());
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = run_config(&a.run)?;
    if let Some(init) = a.init {
        cfg.train.init_mode = init;
    }
    let donor = match (cfg.train.init_mode, &cfg.donor) {
        (InitMode::PretrainedFrozen, None) => return Err(usage("--init pretrained-frozen requires --donor")),
        (InitMode::PretrainedFrozen, Some(path)) => Some(load_donor(path, &cfg.train.spec)?),
        (InitMode::Gaussian, _) => None,
    };
    let manifest = manifest_of(&cfg)?;
    let dir = create_out_dir(&cfg)?;
    let outcome = train::train(&cfg.train, &manifest, donor.as_ref())?;
    write_run(dir, &outcome, &manifest)
}

fn pretrain(a: RunArgs) -> Result<()> {
    let cfg = run_config(&a)?;
    let manifest = manifest_of(&cfg)?;
    let dir = create_out_dir(&cfg)?;
    let outcome = train::pretrain_donor(&cfg.train, &manifest)?;
    write_run(dir, &outcome, &manifest)
}

fn gridsearch(a: GridArgs) -> Result<()> {
    let cfg = run_config(&a.run)?;
    let grid = match &a.grid {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            config::parse_grid(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => config::default_grid(),
    };
    let donor = match (cfg.train.init_mode, &cfg.donor) {
        (InitMode::PretrainedFrozen, None) => return Err(usage("pretrained-frozen grid search requires --donor")),
        (InitMode::PretrainedFrozen, Some(path)) => Some(load_donor(path, &cfg.train.spec)?),
        (InitMode::Gaussian, _) => None,
    };
    let manifest = manifest_of(&cfg)?;
    let dir = create_out_dir(&cfg)?;
    let result = train::grid_search(&cfg.train, &grid, &manifest, donor.as_ref())?;
    let table = result.table_csv();
    std::fs::write(dir.join("trials.csv"), &table)?;
    let best = RunConfig {
        train: result.best_trial().config.clone(),
        ..cfg.clone()
    };
    std::fs::write(dir.join("best_config.txt"), best.to_text())?;
    print!("{table}");
    println!("selected trial {}", result.best);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let net = load_network(&a.weights, a.config.as_deref())?;
    let manifest = Manifest::load(&a.manifest)?;
    let mut report = train::evaluate(&net, &manifest, a.split, &manifest.classes())?;
    if a.localize {
        let mut scores = Vec::new();
        for p in &mut report.predictions {
            let record = manifest
                .records()
                .iter()
                .find(|r| r.id == p.id)
                .expect("predictions come from the manifest");
            p.localization = saliency::score_phantom(&net, &manifest.resolve(record), saliency::DEFAULT_TOP_FRACTION)?;
            if p.label == p.predicted {
                scores.extend(p.localization);
            }
        }
        if !scores.is_empty() {
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            println!("mean localization {mean:.4} over {} correct images", scores.len());
        }
    }
    print!("{}", report.summary());
    if let Some(path) = &a.predictions {
        std::fs::write(path, report.predictions_jsonl()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn compare(a: RunArgs) -> Result<()> {
    let cfg = run_config(&a)?;
    let donor_path = cfg.donor.as_ref().ok_or_else(|| usage("compare requires --donor"))?;
    let donor = load_donor(donor_path, &cfg.train.spec)?;
    let manifest = manifest_of(&cfg)?;
    let dir = create_out_dir(&cfg)?;
    let comparison = train::compare_init_modes(&cfg.train, &manifest, &donor)?;
    for (name, outcome) in [("gaussian", &comparison.gaussian), ("pretrained-frozen", &comparison.frozen)] {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub)?;
        std::fs::write(sub.join("metrics.csv"), outcome.record.metrics_csv())?;
        weights::save(outcome.network.state(), &sub.join("weights.thrw"))?;
    }
    let table = comparison.verdict.table();
    std::fs::write(dir.join("verdict.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn saliency_cmd(a: SaliencyArgs) -> Result<()> {
    let net = load_network(&a.weights, a.config.as_deref())?;
    let img = image::load_gray(&a.image)?;
    let size = net.spec().input_size;
    if img.width() != size || img.height() != size {
        bail!("{} is {}x{}, the network expects {size}x{size}", a.image.display(), img.width(), img.height());
    }
    let map = saliency::compute_saliency(&net, &data::normalize(&img), a.class)?;
    image::write_bytes(&a.out, &saliency::render_overlay(&img, &map)?)?;
    let mut scores = serde_json::Map::new();
    if let Some(dir) = &a.masks {
        let beside = dir.join(a.image.file_name().ok_or_else(|| usage("--image has no file name"))?);
        let masks = phantom::load_masks(&beside)?;
        let mut line = String::new();
        let union = masks.union();
        for (name, mask) in masks.named().into_iter().chain([("union", &union)]) {
            if mask.is_empty() {
                continue;
            }
            let score = saliency::localization_score(&map, mask, a.top_fraction)?;
            scores.insert(name.to_string(), score.into());
            write!(line, " {name}={score:.4}")?;
        }
        println!("localization (top {}):{line}", a.top_fraction);
    }
    let report = serde_json::json!({
        "image": a.image.display().to_string(),
        "class_index": map.class_index,
        "degenerate": map.degenerate,
        "top_fraction": a.top_fraction,
        "localization": scores,
        "width": map.width,
        "height": map.height,
        "scores": map.scores,
    });
    let json_path = a.out.with_extension("json");
    std::fs::write(&json_path, serde_json::to_string(&report)? + "\n")?;
    println!("class {} overlay {} scores {}", map.class_index, a.out.display(), json_path.display());
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let bytes = std::fs::read(&a.dicom).with_context(|| format!("reading {}", a.dicom.display()))?;
    let file = dicom::parse(&bytes).with_context(|| format!("parsing {}", a.dicom.display()))?;
    let (clean, removed) = dicom::anonymize(&file, &PhiPolicy::default());
    let img = dicom::export_image(&clean)?;
    image::save_gray(&img, &a.out)?;
    std::fs::write(&a.quarantine, dicom::quarantine_jsonl(&removed))
        .with_context(|| format!("writing {}", a.quarantine.display()))?;
    if let Some(path) = &a.anonymized {
        std::fs::write(path, dicom::write(&clean)?).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "{}x{} image to {}, {} elements quarantined",
        img.width(),
        img.height(),
        a.out.display(),
        removed.len()
    );
    Ok(())
}
