//! `inctrl`: train, evaluate, score, and visualize a few-shot anomaly
//! detector that compares query images against normal in-context prompts.

mod viz;

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use inctrl_core::checkpoint::Checkpoint;
use inctrl_core::config::LoadedConfig;
use inctrl_core::data::{build_protocol, load_manifest, DatasetManifest};
use inctrl_core::eval::{evaluate, prompt_diversity_sweep, PromptSelection};
use inctrl_core::persist::write_atomic;
use inctrl_core::pipeline::Pipeline;
use inctrl_core::training::fit;

#[derive(Parser)]
#[command(
    name = "inctrl",
    version,
    about = "Few-shot anomaly detection with in-context normal image prompts"
)]
struct Cli {
    /// Config file (TOML). Falls back to the INCTRL_CONFIG environment
    /// variable when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config value, e.g. --set scoring.alpha=0.5 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the detector on an auxiliary dataset manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a target dataset manifest.
    Eval(EvalArgs),
    /// Score one image against prompt images.
    Score(ScoreArgs),
    /// Emit residual-map heatmaps and score sidecars for query images.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training manifest CSV (path,label,category,split).
    #[arg(long, value_name = "MANIFEST")]
    data: PathBuf,
    /// Checkpoint output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Prompts per episode (config train.k).
    #[arg(long)]
    k: Option<usize>,
    /// Training epochs (config train.epochs).
    #[arg(long)]
    epochs: Option<usize>,
    /// Random seed (config train.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory produced by `train`.
    #[arg(long, value_name = "DIR")]
    ckpt: PathBuf,
    /// Target manifest CSV.
    #[arg(long, value_name = "MANIFEST")]
    data: PathBuf,
    /// Number of normal prompt images.
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated evaluation seeds.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Report output directory.
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Run the prompt-class-diversity sweep over these comma-separated
    /// class counts instead of a single evaluation.
    #[arg(long, value_name = "COUNTS")]
    class_counts: Option<String>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Checkpoint directory.
    #[arg(long, value_name = "DIR")]
    ckpt: PathBuf,
    /// Query image.
    #[arg(long, value_name = "IMAGE")]
    image: PathBuf,
    /// Normal prompt images.
    #[arg(long, value_name = "IMAGE", num_args = 1.., required = true)]
    prompts: Vec<PathBuf>,
    /// Class label for the text prompts.
    #[arg(long, default_value = "object")]
    class: String,
}

#[derive(Args)]
struct VisualizeArgs {
    /// Checkpoint directory.
    #[arg(long, value_name = "DIR")]
    ckpt: PathBuf,
    /// Query image(s); one heatmap is written per query.
    #[arg(long = "image", value_name = "IMAGE", num_args = 1.., required = true)]
    images: Vec<PathBuf>,
    /// Normal prompt images.
    #[arg(long, value_name = "IMAGE", num_args = 1.., required = true)]
    prompts: Vec<PathBuf>,
    /// Output directory for heatmaps and sidecars.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Class label for the text prompts.
    #[arg(long, default_value = "object")]
    class: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", err.category());
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> inctrl_core::Result<()> {
    match cli.command {
        Command::Train(args) => train(&cli.config, &cli.set, args),
        Command::Eval(args) => eval(&cli.config, &cli.set, args),
        Command::Score(args) => score(&cli.set, args),
        Command::Visualize(args) => visualize(&cli.set, args),
    }
}

/// Resolve --config / INCTRL_CONFIG and apply --set overrides.
fn load_config(flag: &Option<PathBuf>, sets: &[String]) -> inctrl_core::Result<LoadedConfig> {
    let path = flag
        .clone()
        .or_else(|| std::env::var_os("INCTRL_CONFIG").map(PathBuf::from));
    let mut loaded = LoadedConfig::load(path.as_deref())?;
    apply_sets(&mut loaded, sets)?;
    Ok(loaded)
}

fn apply_sets(loaded: &mut LoadedConfig, sets: &[String]) -> inctrl_core::Result<()> {
    for entry in sets {
        let (key, value) = entry.split_once('=').ok_or_else(|| {
            inctrl_core::Error::InvalidInput(format!(
                "--set expects KEY=VALUE, got {entry:?}"
            ))
        })?;
        loaded.set_flag(key.trim(), value.trim())?;
    }
    Ok(())
}

fn load_protocol_manifest(
    path: &Path,
    config: &inctrl_core::RunConfig,
) -> inctrl_core::Result<DatasetManifest> {
    let manifest = load_manifest(path)?;
    build_protocol(&manifest, &config.protocol_spec()?)
}

fn train(
    config_flag: &Option<PathBuf>,
    sets: &[String],
    args: TrainArgs,
) -> inctrl_core::Result<()> {
    let mut loaded = load_config(config_flag, sets)?;
    if let Some(k) = args.k {
        loaded.config.train.k = k;
        loaded.mark_flag("train.k");
    }
    if let Some(epochs) = args.epochs {
        loaded.config.train.epochs = epochs;
        loaded.mark_flag("train.epochs");
    }
    if let Some(seed) = args.seed {
        loaded.config.train.seed = seed;
        loaded.mark_flag("train.seed");
    }
    loaded.config.validate()?;
    let manifest = load_protocol_manifest(&args.data, &loaded.config)?;

    let outcome = fit(&manifest, &loaded.config)?;
    outcome.checkpoint.save(&args.out)?;
    let final_loss = outcome
        .checkpoint
        .loss_history
        .last()
        .map(|p| p.loss)
        .unwrap_or(f64::NAN);
    println!(
        "trained {} steps over {} epochs (k={}, seed={}), final loss {:.6}",
        outcome.checkpoint.loss_history.len(),
        outcome.checkpoint.epochs_completed,
        loaded.config.train.k,
        loaded.config.train.seed,
        final_loss
    );
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> inctrl_core::Result<Vec<T>> {
    raw.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>().map_err(|_| {
                inctrl_core::Error::InvalidInput(format!("cannot parse {what} entry {s:?}"))
            })
        })
        .collect()
}

fn eval(
    config_flag: &Option<PathBuf>,
    sets: &[String],
    args: EvalArgs,
) -> inctrl_core::Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    // Model settings come from the checkpoint; evaluation-time settings may
    // be overridden by a config file or --set/--k flags.
    let mut loaded = match config_flag {
        Some(path) => LoadedConfig::load(Some(path))?,
        None => LoadedConfig::from_config(ckpt.config.clone()),
    };
    apply_sets(&mut loaded, sets)?;
    if let Some(k) = args.k {
        loaded.config.train.k = k;
        loaded.mark_flag("train.k");
    }
    loaded.config.validate()?;

    let seeds: Vec<u64> = parse_list(&args.seeds, "--seeds")?;
    let manifest = load_protocol_manifest(&args.data, &loaded.config)?;
    let k = loaded.config.train.k;
    let pipeline = Pipeline::from_checkpoint_with_config(ckpt, loaded.config.clone())?;

    if let Some(counts_raw) = &args.class_counts {
        let counts: Vec<usize> = parse_list(counts_raw, "--class-counts")?;
        let sweep = prompt_diversity_sweep(&pipeline, &manifest, k, &counts, &seeds)?;
        let mut csv = String::from("class_count,auroc_mean\n");
        for (count, auroc) in &sweep {
            println!("classes {count}: AUROC {auroc:.4}");
            csv.push_str(&format!("{count},{auroc:.6}\n"));
        }
        write_atomic(&args.out.join("sweep.csv"), csv.as_bytes())?;
        println!("sweep written to {}", args.out.join("sweep.csv").display());
        return Ok(());
    }

    let report = evaluate(
        &pipeline,
        &manifest,
        PromptSelection {
            k,
            class_count: None,
        },
        &seeds,
    )?;
    report.write_files(&args.out)?;
    println!(
        "{} k={}: AUROC {:.3}+/-{:.3}, AUPRC {:.3}+/-{:.3} over {} seeds",
        report.dataset,
        report.k,
        report.auroc_mean,
        report.auroc_std,
        report.auprc_mean,
        report.auprc_std,
        report.seeds.len()
    );
    println!(
        "report written to {} and {}",
        args.out.join("report.json").display(),
        args.out.join("report.csv").display()
    );
    Ok(())
}

fn score(sets: &[String], args: ScoreArgs) -> inctrl_core::Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let mut loaded = LoadedConfig::from_config(ckpt.config.clone());
    apply_sets(&mut loaded, sets)?;
    loaded.config.validate()?;
    let pipeline = Pipeline::from_checkpoint_with_config(ckpt, loaded.config)?;
    let breakdown = pipeline.score_paths(&args.image, &args.prompts, &args.class)?;
    println!("{}\t{}", args.image.display(), breakdown.score);
    Ok(())
}

fn visualize(sets: &[String], args: VisualizeArgs) -> inctrl_core::Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let mut loaded = LoadedConfig::from_config(ckpt.config.clone());
    apply_sets(&mut loaded, sets)?;
    loaded.config.validate()?;
    let resolution = loaded.config.encoder.resolution as u32;
    let pipeline = Pipeline::from_checkpoint_with_config(ckpt, loaded.config)?;

    let mut used_stems = std::collections::HashMap::new();
    for query in &args.images {
        let breakdown = pipeline.score_paths(query, &args.prompts, &args.class)?;
        let base = query
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "query".to_string());
        // Queries from different directories can share a file stem.
        let count = used_stems.entry(base.clone()).or_insert(0usize);
        *count += 1;
        let stem = if *count == 1 {
            base
        } else {
            format!("{base}_{count}")
        };

        let heatmap = viz::render_heatmap(breakdown.holistic.values(), resolution);
        let mut png = Vec::new();
        heatmap
            .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
            .map_err(|e| inctrl_core::Error::Persistence(format!("png encoding failed: {e}")))?;
        let heatmap_path = args.out.join(format!("{stem}_residual.png"));
        write_atomic(&heatmap_path, &png)?;

        let sidecar = format!(
            "s_p\t{}\ns_i\t{}\ns_a\t{}\nscore\t{}\n",
            breakdown.s_p, breakdown.s_i, breakdown.s_a, breakdown.score
        );
        let sidecar_path = args.out.join(format!("{stem}_scores.txt"));
        write_atomic(&sidecar_path, sidecar.as_bytes())?;
        println!(
            "{} -> {} + {}",
            query.display(),
            heatmap_path.display(),
            sidecar_path.display()
        );
    }
    Ok(())
}
