//! End-to-end runs: training with periodic evaluation and every artifact a run
//! directory holds.

use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, ExperimentData};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{
    embed_latents, evaluate, export_csv, export_image_grid, save_checkpoint, translate, Checkpoint,
    CsvLog, EvalReport, LossRecord, MetricsRecord, Translation,
};
use crate::losses::TermValues;
use crate::models::ModelBundle;
use crate::trainer::{mix_seed, Hooks, Trainer};

pub const CONFIG_ECHO: &str = "config.toml";
pub const LOSSES_CSV: &str = "losses.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const EMBEDDINGS_CSV: &str = "embeddings.csv";
pub const INITIAL_CHECKPOINT: &str = "initial.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

const PROBE_TAG: u64 = 0x9b0be;

/// Seed of the domain probe for a run trained with `train_seed`.
pub fn probe_seed(train_seed: u64) -> u64 {
    mix_seed(train_seed, PROBE_TAG)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    /// Target evaluation before the first step (absent when resuming).
    pub initial: Option<EvalReport>,
    pub last: EvalReport,
    pub steps: u64,
    pub run_dir: PathBuf,
}

struct RunHooks<'a> {
    dir: &'a Path,
    cfg: &'a ExperimentConfig,
    text: &'a str,
    data: &'a ExperimentData,
    losses: CsvLog<LossRecord>,
    metrics: CsvLog<MetricsRecord>,
    last: Option<EvalReport>,
}

impl RunHooks<'_> {
    fn evaluate(&mut self, trainer: &Trainer) -> Result<()> {
        let mut bundle = trainer.bundle.clone();
        let step = trainer.state.step;
        let src = evaluate(&mut bundle, &self.data.source, None, step, 0)?;
        let mut tgt = evaluate(
            &mut bundle,
            &self.data.target_test,
            Some(&self.data.source),
            step,
            probe_seed(self.cfg.trainer.seed),
        )?;
        tgt.losses = trainer.state.history.back().copied();
        self.metrics.push(&src.record())?;
        self.metrics.push(&tgt.record())?;
        self.metrics.flush()?;
        log::info!(
            "step {step}: source acc {:.4}, target acc {:.4}, probe {:.4}",
            src.accuracy,
            tgt.accuracy,
            tgt.probe.unwrap_or(f64::NAN)
        );
        self.last = Some(tgt);
        Ok(())
    }

    fn checkpoint(&self, trainer: &Trainer, name: &str) -> Result<()> {
        save_checkpoint(
            &self.dir.join(name),
            &Checkpoint::from_trainer(trainer, self.text),
        )
    }
}

impl Hooks for RunHooks<'_> {
    fn on_step(&mut self, trainer: &Trainer, values: &TermValues) -> Result<()> {
        let step = trainer.state.step;
        self.losses.push(&LossRecord::new(step, values))?;
        let out = &self.cfg.output;
        if out.eval_every > 0 && step % out.eval_every as u64 == 0 {
            self.losses.flush()?;
            self.evaluate(trainer)?;
        }
        if out.checkpoint_every > 0 && step % out.checkpoint_every as u64 == 0 {
            self.checkpoint(trainer, &format!("step_{step:06}.ckpt"))?;
        }
        Ok(())
    }

    fn on_stage_end(&mut self, trainer: &Trainer, stage: usize) -> Result<()> {
        let name = &trainer.plan.stages[stage].name;
        self.checkpoint(trainer, &format!("stage_{stage}_{name}.ckpt"))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the four translation grids plus the two input grids.
pub fn export_translations(
    bundle: &mut ModelBundle<f32>,
    source: &Dataset,
    target: &Dataset,
    count: usize,
    cols: usize,
    dir: &Path,
) -> Result<()> {
    let (s, t) = (source.head(count), target.head(count));
    export_image_grid(&s.tensor(), cols, &dir.join("source.pgm"))?;
    export_image_grid(&t.tensor(), cols, &dir.join("target.pgm"))?;
    for tr in Translation::ALL {
        let input = if tr == Translation::Y2x { &t } else { &s };
        let out = translate(bundle, input, tr)?;
        export_image_grid(&out, cols, &dir.join(format!("{}.pgm", tr.name())))?;
    }
    Ok(())
}

/// Trains per `cfg`, writing artifacts into `dir`. With `resume`, continues
/// that checkpoint's run and appends to the existing loss log.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<RunSummary> {
    create_dir(dir)?;
    let text = cfg.to_toml()?;
    std::fs::write(dir.join(CONFIG_ECHO), &text)
        .map_err(|e| Error::io(dir.join(CONFIG_ECHO), e))?;
    let resuming = resume.is_some();
    let mut trainer = match resume {
        Some(ck) => {
            if ck.config_hash() != crate::eval::config_hash(&text) {
                log::warn!("resuming a checkpoint written under a different configuration");
            }
            ck.into_trainer()
        }
        None => {
            let k = data.source.num_classes;
            Trainer::new(cfg.build_bundle(k)?, cfg.train_config(), cfg.plan()?)?
        }
    };

    let losses_path = dir.join(LOSSES_CSV);
    let metrics_path = dir.join(METRICS_CSV);
    let (losses, metrics) = if resuming && losses_path.exists() && metrics_path.exists() {
        (
            CsvLog::append(&losses_path)?,
            CsvLog::append(&metrics_path)?,
        )
    } else {
        (
            CsvLog::create(&losses_path)?,
            CsvLog::create(&metrics_path)?,
        )
    };
    let mut hooks = RunHooks {
        dir,
        cfg,
        text: &text,
        data,
        losses,
        metrics,
        last: None,
    };

    let mut initial = None;
    if !resuming {
        hooks.checkpoint(&trainer, INITIAL_CHECKPOINT)?;
        hooks.evaluate(&trainer)?;
        initial = hooks.last.clone();
    }
    trainer.run(&data.source, data.target.unlabeled(), &mut hooks)?;
    hooks.losses.flush()?;
    let evaluated_now = hooks
        .last
        .as_ref()
        .is_some_and(|r| r.step == trainer.state.step);
    if !evaluated_now {
        hooks.evaluate(&trainer)?;
    }
    hooks.checkpoint(&trainer, FINAL_CHECKPOINT)?;

    let out = &cfg.output;
    let mut bundle = trainer.bundle.clone();
    if out.grid_images > 0 {
        export_translations(
            &mut bundle,
            &data.source,
            &data.target_test,
            out.grid_images,
            out.grid_columns,
            dir,
        )?;
    }
    if out.embeddings {
        let rows = embed_latents(
            &mut bundle,
            &data.source.head(500),
            &data.target_test.head(500),
        )?;
        export_csv(&dir.join(EMBEDDINGS_CSV), &rows)?;
    }
    Ok(RunSummary {
        initial,
        last: hooks.last.expect("evaluated at least once"),
        steps: trainer.state.step,
        run_dir: dir.to_path_buf(),
    })
}
