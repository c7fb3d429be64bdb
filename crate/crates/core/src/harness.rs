//! Wires a validated [`ExperimentConfig`] into a training run and writes its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::accounting::{jitter, measured_bp_cost};
use crate::config::{ExperimentConfig, Generator, LayerSpec, PlanKind};
use crate::data::{gaussian_blobs, token_classes, Dataset, FixedBatch, ShuffledBatches};
use crate::error::{Error, Result};
use crate::model::{forward, Batch, Model};
use crate::partition::{partition, partition_by_groups, partition_per_tensor, ChunkPlan};
use crate::schedule::{run_training, write_transfer_log, BatchSource, TrainingRun};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub plan: PlanKind,
    pub plan_digest: String,
    pub min_chunk_bytes: u64,
    pub max_chunk_bytes: u64,
    pub imbalance_bytes: f64,
    pub peak_bytes: u64,
    pub jitter: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bp_ratio: Option<f64>,
    pub final_loss: f64,
    pub stall_ticks: u64,
}

impl RunSummary {
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub run: TrainingRun,
    pub plan: ChunkPlan,
}

pub fn build_dataset(config: &ExperimentConfig) -> Result<Option<Dataset>> {
    let d = &config.data;
    let seed = config.data_seed();
    match d.generator {
        Generator::None => Ok(None),
        Generator::Blobs => match config.model.layers.first() {
            Some(LayerSpec::Linear { in_dim, .. }) => gaussian_blobs(d.samples, *in_dim, d.classes, d.spread, seed).map(Some),
            _ => Err(Error::config("data.generator", "blobs need a model starting with a linear layer")),
        },
        Generator::Tokens => match config.model.layers.first() {
            Some(LayerSpec::Embedding { vocab, .. }) => token_classes(d.samples, *vocab, d.classes, seed).map(Some),
            _ => Err(Error::config("data.generator", "tokens need a model starting with an embedding layer")),
        },
    }
}

pub fn build_plan(config: &ExperimentConfig, model: &Model) -> Result<ChunkPlan> {
    let metas = model.params.metas();
    let policy = config.policy.policy()?;
    let plan = match config.schedule.plan {
        PlanKind::Balanced => partition(&metas, config.k(), &policy)?,
        PlanKind::PerLayer => partition_by_groups(&metas, &model.layer_tensors(), &policy)?,
        PlanKind::PerTensor => partition_per_tensor(&metas, &policy)?,
    };
    if plan.k() != config.k() {
        return Err(Error::config("schedule.K", format!("K must equal {} for this plan kind", plan.k())));
    }
    Ok(plan)
}

/// Mean loss over the whole dataset, or the data-free loss for quadratic models.
pub fn evaluate_loss(model: &Model, data: Option<&Dataset>) -> Result<f64> {
    let batch = match data {
        Some(d) => d.batch(&(0..d.len()).collect::<Vec<_>>()),
        None => Batch::empty(),
    };
    Ok(forward(model, &batch)?.0)
}

/// Trains and summarizes without touching the filesystem.
pub fn execute(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let model = config.build_model()?;
    let plan = build_plan(config, &model)?;
    let dataset = build_dataset(config)?;
    let mut source: Box<dyn BatchSource> = match &dataset {
        Some(d) => Box::new(ShuffledBatches::new(d.clone(), config.data.batch, config.data_seed())?),
        None if model.layers.is_empty() => Box::new(FixedBatch(Batch::empty())),
        None => return Err(Error::config("data.generator", "layer models need a data generator")),
    };
    let schedule = config.schedule_config();
    let run = run_training(model, source.as_mut(), &plan, &schedule, &config.optimizer.optimizer())?;
    let final_loss = evaluate_loss(&run.model, dataset.as_ref())?;
    let summary = RunSummary {
        steps: config.steps,
        k: config.k(),
        t: config.interval(),
        plan: config.schedule.plan,
        plan_digest: hex::encode(plan.digest()),
        min_chunk_bytes: plan.min_chunk_bytes(),
        max_chunk_bytes: plan.max_chunk_bytes(),
        imbalance_bytes: plan.imbalance(),
        peak_bytes: run.trace.peak().map_or(0, |s| s.total),
        jitter: jitter(&run.trace)?,
        bp_ratio: measured_bp_cost(&run.flops, schedule.k, schedule.interval).ok(),
        final_loss,
        stall_ticks: run.stall_ticks,
    };
    Ok(RunArtifacts { summary, run, plan })
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Writes the trace CSVs, summary, plan and per-chunk checkpoints under `out`.
pub fn write_artifacts(art: &RunArtifacts, config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let mut written = Vec::new();
    let mut file = |name: &str| -> Result<(PathBuf, fs::File)> {
        let p = out.join(name);
        let f = create(&p)?;
        written.push(p.clone());
        Ok((p, f))
    };
    let (_, f) = file("memory_trace.csv")?;
    art.run.trace.write_csv(f)?;
    let (_, f) = file("transfer_log.csv")?;
    write_transfer_log(&art.run.transfers, art.run.ticks_per_step, f)?;
    let (_, f) = file("trajectory.csv")?;
    art.run.write_trajectory(f)?;
    let (p, _) = file("summary.toml")?;
    fs::write(&p, art.summary.to_text()).map_err(|e| Error::io(&p, e))?;
    let (p, _) = file("plan.json")?;
    fs::write(&p, art.plan.to_json()).map_err(|e| Error::io(&p, e))?;
    let (p, _) = file("config.toml")?;
    fs::write(&p, config.to_toml()).map_err(|e| Error::io(&p, e))?;
    for (k, blob) in art.run.host_blobs.iter().enumerate() {
        let p = ckpt_dir.join(format!("chunk_{k}.bin"));
        fs::write(&p, blob).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}

pub fn run(config: &ExperimentConfig, out: &Path) -> Result<RunArtifacts> {
    let art = execute(config)?;
    write_artifacts(&art, config, out)?;
    Ok(art)
}
