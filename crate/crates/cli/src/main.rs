//! `i2i`: train, evaluate and inspect domain adaptation runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use i2i_core::config::{DatasetConfig, ExperimentConfig, ExperimentData};
use i2i_core::eval::{
    embed_latents, evaluate, export_csv, export_image_grid, load_checkpoint, translate, Checkpoint,
    MetricsRecord, Translation,
};
use i2i_core::experiment::{probe_seed, run_experiment, EMBEDDINGS_CSV, METRICS_CSV};
use i2i_core::losses::preset_table;
use i2i_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "i2i",
    version,
    about = "Unsupervised domain adaptation through a shared latent space"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; overrides RUN_DIR and the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the source and target splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset description (keys of a `[dataset]` block); defaults to the run's.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Directory for the metrics CSV; defaults to `eval/` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export an image grid for one translation direction.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of x2y, y2x, identity, cycle.
        #[arg(long)]
        direction: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print which loss coefficients each preset enables.
    Presets,
    /// Export the 2-D PCA of both domains' latent codes.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

const EMBED_SAMPLES: usize = 500;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// The configuration embedded in a checkpoint.
fn run_config(ck: &Checkpoint) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(&ck.config)
}

fn checkpoint_data(ck: &Checkpoint, dataset: Option<&Path>) -> Result<ExperimentData> {
    match dataset {
        Some(p) => DatasetConfig::load(p)?.load_data(),
        None => run_config(ck)?.load_data(),
    }
}

fn train(config: &Path, out: Option<PathBuf>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.apply_env();
    if let Some(out) = out {
        cfg.output.run_dir = out;
    }
    println!("{}", cfg.to_toml()?);
    let data = cfg.load_data()?;
    let resume = resume.map(load_checkpoint).transpose()?;
    let dir = cfg.output.run_dir.clone();
    let s = run_experiment(&cfg, &data, &dir, resume)?;
    if let Some(init) = &s.initial {
        println!(
            "initial target accuracy {:.4}, probe {:.4}",
            init.accuracy,
            init.probe.unwrap_or(f64::NAN)
        );
    }
    println!("{}", s.last);
    println!("artifacts in {}", s.run_dir.display());
    Ok(())
}

fn eval(checkpoint: &Path, dataset: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = checkpoint_data(&ck, dataset)?;
    let mut bundle = ck.bundle.clone();
    let step = ck.state.step;
    let src = evaluate(&mut bundle, &data.source, None, step, 0)?;
    let tgt = evaluate(
        &mut bundle,
        &data.target_test,
        Some(&data.source),
        step,
        probe_seed(ck.train.seed),
    )?;
    println!("{src}");
    println!("{tgt}");
    let dir = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    create_dir(&dir)?;
    let rows: Vec<MetricsRecord> = vec![src.record(), tgt.record()];
    export_csv(&dir.join(METRICS_CSV), &rows)
}

fn translate_cmd(
    checkpoint: &Path,
    direction: &str,
    dataset: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let direction: Translation = direction.parse()?;
    let ck = load_checkpoint(checkpoint)?;
    let data = checkpoint_data(&ck, dataset)?;
    let (count, cols) = match run_config(&ck) {
        Ok(cfg) => (
            cfg.output.grid_images.max(1),
            cfg.output.grid_columns.max(1),
        ),
        Err(_) => (32, 8),
    };
    let input = match direction {
        Translation::Y2x => data.target_test.head(count),
        _ => data.source.head(count),
    };
    let mut bundle = ck.bundle.clone();
    let images = translate(&mut bundle, &input, direction)?;
    create_dir(out)?;
    let name = direction.name();
    export_image_grid(
        &input.tensor(),
        cols,
        &out.join(format!("{name}_input.pgm")),
    )?;
    export_image_grid(&images, cols, &out.join(format!("{name}.pgm")))?;
    println!("wrote {}", out.join(format!("{name}.pgm")).display());
    Ok(())
}

fn export_embeddings(checkpoint: &Path, dataset: Option<&Path>, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = checkpoint_data(&ck, dataset)?;
    let mut bundle = ck.bundle.clone();
    let rows = embed_latents(
        &mut bundle,
        &data.source.head(EMBED_SAMPLES),
        &data.target_test.head(EMBED_SAMPLES),
    )?;
    create_dir(out)?;
    export_csv(&out.join(EMBEDDINGS_CSV), &rows)?;
    println!("wrote {}", out.join(EMBEDDINGS_CSV).display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            checkpoint,
        } => train(&config, out, checkpoint.as_deref()),
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => eval(&checkpoint, dataset.as_deref(), out),
        Command::Translate {
            checkpoint,
            direction,
            dataset,
            out,
        } => translate_cmd(&checkpoint, &direction, dataset.as_deref(), &out),
        Command::Presets => {
            print!("{}", preset_table()?);
            Ok(())
        }
        Command::ExportEmbeddings {
            checkpoint,
            dataset,
            out,
        } => export_embeddings(&checkpoint, dataset.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
