//! Named presets: experiment runs and self-checks runnable from the command line.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::accounting::{jitter_of, layerwise_suffix_bp_cost, measured_bp_cost, model_peak_bytes};
use crate::autodiff::{backward_chunked, backward_dense};
use crate::config::{validate_config, ExperimentConfig, PlanKind};
use crate::convergence::{
    block_gradient_chunkft, check_descent, diagonal_quadratic, loglog_slope, random_quadratic, rotation_stationarity,
    stationarity_bound, synthetic_logistic,
};
use crate::data::{gaussian_blobs, ShuffledBatches};
use crate::error::Result;
use crate::harness::{evaluate_loss, execute, write_artifacts, RunArtifacts};
use crate::model::{forward, Batch, LossHead, Model, ModelBuilder};
use crate::optim::{
    accumulate_grad, adamw_chunk_step, decode_checkpoint, encode_checkpoint, init_chunk_states, take_mean_grad,
    AdamWHyper, Optimizer, Tier,
};
use crate::partition::{partition, CostPolicy};
use crate::reference::train_dense_adamw;
use crate::schedule::{memory_trace, run_training, simulate_schedule, MemoryLayout, ScheduleConfig, TransferModel};
use crate::tensor::{Matrix, Precision, TensorId, TensorMeta};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name, passed, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    run: fn(Option<&Path>, u64) -> Result<CheckResult>,
}

pub const PRESETS: &[Preset] = &[
    Preset { name: "sparse-exactness", description: "masked gradients equal dense slices on random stacks", run: sparse_exactness },
    Preset { name: "dense-reduction", description: "K=1, T=1 matches a dense AdamW loop bit for bit", run: dense_reduction },
    Preset { name: "memory-model", description: "simulated peak of a 7e9-element model against 2M + 16M/K", run: memory_model },
    Preset { name: "bp-cost", description: "measured gradient FLOPs per rotation and layer-wise suffix cost", run: bp_cost },
    Preset { name: "jitter-contrast", description: "byte-balanced vs layer-identity plans on an embedding-heavy model", run: jitter_contrast },
    Preset { name: "convergence", description: "descent, stationarity and rate checks on analytic problems", run: convergence },
    Preset { name: "state-continuity", description: "offload/reload round trips leave optimizer state untouched", run: state_continuity },
    Preset { name: "overlap-transparency", description: "prefetch and transfer timing never change checkpoints", run: overlap_transparency },
    Preset { name: "training-sanity", description: "K=T=8 reaches dense AdamW's loss on a small classification task", run: training_sanity },
    Preset { name: "quadratic-k2", description: "two-chunk quadratic run: zero jitter, unit BP ratio", run: quadratic_k2 },
    Preset { name: "mlp-imbalanced-layers", description: "per-layer vs balanced plans on an MLP with uneven layers", run: mlp_imbalanced_layers },
];

pub fn find_preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

pub fn run_preset(name: &str, out: Option<&Path>, seed: u64) -> Result<CheckResult> {
    let preset = find_preset(name).ok_or_else(|| crate::Error::config("preset", format!("unknown preset `{name}`")))?;
    (preset.run)(out, seed)
}

fn with_seed(doc: &str, seed: u64) -> Result<ExperimentConfig> {
    let mut cfg = validate_config(doc)?;
    cfg.seed = seed;
    cfg.data.seed = None;
    Ok(cfg)
}

fn execute_into(cfg: &ExperimentConfig, out: Option<&Path>, sub: &str) -> Result<RunArtifacts> {
    let art = execute(cfg)?;
    if let Some(dir) = out {
        write_artifacts(&art, cfg, &dir.join(sub))?;
    }
    Ok(art)
}

// ---------------------------------------------------------------------------
// Experiment presets

pub const QUADRATIC_K2: &str = r#"
steps = 8
[model]
quadratic = [[4, 3], [4, 3]]
[schedule]
K = 2
T = 1
[optimizer]
kind = "sgd"
eta = 1.0
"#;

pub const MLP_IMBALANCED: &str = r#"
steps = 64
[model]
layers = [{ type = "linear", in = 16, out = 256 }, { type = "tanh" }, { type = "linear", in = 256, out = 4 }]
[data]
generator = "blobs"
samples = 256
batch = 16
[schedule]
K = 2
T = 4
[optimizer]
eta = 0.003
"#;

pub const EMBEDDING_HEAVY: &str = r#"
steps = 64
[model]
layers = [{ type = "embedding", vocab = 2000, dim = 16 }, { type = "tanh" }, { type = "linear", in = 16, out = 4 }]
[data]
generator = "tokens"
samples = 512
batch = 16
[schedule]
K = 2
T = 4
[optimizer]
eta = 0.01
"#;

pub const TRAINING_SANITY: &str = r#"
steps = 128000
[model]
layers = [{ type = "linear", in = 8, out = 16 }, { type = "tanh" }, { type = "linear", in = 16, out = 4 }]
[data]
generator = "blobs"
samples = 1000
batch = 32
classes = 4
spread = 2.0
[schedule]
K = 8
T = 8
[optimizer]
eta = 0.01
lambda = 0.5
"#;

fn quadratic_k2(out: Option<&Path>, seed: u64) -> Result<CheckResult> {
    let cfg = with_seed(QUADRATIC_K2, seed)?;
    let art = execute_into(&cfg, out, "quadratic-k2")?;
    let s = &art.summary;
    let zeroed = art.run.model.params.iter().all(|p| p.values.as_slice().iter().all(|v| *v == 0.0));
    let passed = s.jitter == 0.0 && s.bp_ratio == Some(1.0) && zeroed;
    Ok(CheckResult::new(
        "quadratic-k2",
        passed,
        format!("jitter = {}, bp_ratio = {:?}, parameters zero after one rotation: {zeroed}", s.jitter, s.bp_ratio),
    ))
}

fn paired_plans(doc: &str, seed: u64, out: Option<&Path>, name: &str) -> Result<(f64, f64)> {
    let mut layered = with_seed(doc, seed)?;
    layered.schedule.plan = PlanKind::PerLayer;
    let balanced = with_seed(doc, seed)?;
    let a = execute_into(&layered, out, &format!("{name}/layer_identity"))?;
    let b = execute_into(&balanced, out, &format!("{name}/balanced"))?;
    Ok((a.summary.jitter, b.summary.jitter))
}

fn mlp_imbalanced_layers(out: Option<&Path>, seed: u64) -> Result<CheckResult> {
    let (layered, balanced) = paired_plans(MLP_IMBALANCED, seed, out, "mlp-imbalanced-layers")?;
    Ok(CheckResult::new(
        "mlp-imbalanced-layers",
        layered > 0.2 && balanced <= 0.02,
        format!("layer-identity jitter = {layered:.4} (> 0.2), balanced jitter = {balanced:.4} (<= 0.02)"),
    ))
}

// ---------------------------------------------------------------------------
// Criteria

/// Random Linear/Embedding/LayerNorm stack with at most ~10^4 parameters, plus a matching batch.
pub fn random_stack(rng: &mut impl Rng) -> Result<(Model, Batch)> {
    let mut b = ModelBuilder::new(rng.random());
    let batch_rows = rng.random_range(1..=5);
    let mut width;
    let input = if rng.random_bool(0.4) {
        let vocab = rng.random_range(3..=40);
        width = rng.random_range(2..=12);
        b.embedding(vocab, width)?;
        (0..batch_rows).map(|_| rng.random_range(0..vocab)).collect::<Vec<_>>()
    } else {
        width = rng.random_range(2..=12);
        Vec::new()
    };
    let in_width = width;
    for _ in 0..rng.random_range(1..=4) {
        match rng.random_range(0..4) {
            0 | 1 => {
                let out = rng.random_range(2..=16);
                b.linear(width, out, rng.random_bool(0.7))?;
                width = out;
            }
            2 => {
                b.layer_norm(width, 1e-5)?;
            }
            _ => {
                if rng.random_bool(0.5) {
                    b.tanh();
                } else {
                    b.relu();
                }
            }
        }
    }
    b.linear(width, width, true)?;
    let head = [LossHead::Sum, LossHead::Mse, LossHead::CrossEntropy][rng.random_range(0..3)];
    let model = b.build(head);
    let target_rows = batch_rows;
    let dense = |rng: &mut dyn rand::RngCore, r: usize, c: usize| {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
    };
    let input = if input.is_empty() {
        crate::model::BatchInput::Dense(dense(rng, batch_rows, in_width))
    } else {
        crate::model::BatchInput::Tokens(input)
    };
    let target = match head {
        LossHead::Mse => crate::model::Target::Dense(dense(rng, target_rows, width)),
        LossHead::CrossEntropy => crate::model::Target::Labels((0..target_rows).map(|_| rng.random_range(0..width)).collect()),
        _ => crate::model::Target::None,
    };
    Ok((model, Batch { input, target }))
}

fn sparse_exactness(_: Option<&Path>, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = CostPolicy::default();
    let (mut worst, mut exact, mut max_params) = (0.0f64, true, 0u64);
    for _ in 0..200 {
        let (model, batch) = random_stack(&mut rng)?;
        max_params = max_params.max(model.params.num_elements());
        let metas = model.params.metas();
        let rows: usize = metas.iter().map(|m| m.rows).sum();
        let k = rng.random_range(1..=rows.min(12));
        let plan = partition(&metas, k, &policy)?;
        let (_, tape) = forward(&model, &batch)?;
        let dense = backward_dense(&tape)?;
        let mut assembled: Vec<Matrix> = model.params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        for chunk in &plan.chunks {
            let bag = backward_chunked(&tape, &chunk.mask())?;
            for (slice, g) in bag.iter() {
                let d = dense.slice(slice);
                for (a, b) in g.as_slice().iter().zip(d.as_slice()) {
                    worst = worst.max((a - b).abs() / b.abs().max(1e-300).max(a.abs()));
                }
                let dst = &mut assembled[slice.tensor.0];
                let cols = dst.cols();
                dst.as_mut_slice()[slice.row_begin * cols..slice.row_end * cols].copy_from_slice(g.as_slice());
            }
        }
        exact &= assembled.iter().enumerate().all(|(i, m)| m == dense.get(TensorId(i)));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(CheckResult::new(
        "sparse-exactness",
        worst <= 1e-10 && exact && max_params <= 10_000 && secs < 60.0,
        format!("200 models (<= {max_params} params), max rel err {worst:e}, full-rotation concat exact: {exact}, {secs:.2}s"),
    ))
}

fn blobs_mlp(seed: u64) -> Result<(Model, ShuffledBatches)> {
    let model = Model::mlp(&[6, 16, 3], LossHead::CrossEntropy, seed)?;
    let data = gaussian_blobs(200, 6, 3, 3.0, seed + 1)?;
    Ok((model, ShuffledBatches::new(data, 16, seed + 2)?))
}

fn dense_reduction(_: Option<&Path>, seed: u64) -> Result<CheckResult> {
    let hyper = AdamWHyper { eta: 1e-2, lambda: 1e-3, ..Default::default() };
    let (model, mut data) = blobs_mlp(seed)?;
    let plan = partition(&model.params.metas(), 1, &CostPolicy::default())?;
    let chunked = run_training(model.clone(), &mut data, &plan, &ScheduleConfig::new(1, 100).with_interval(1), &Optimizer::AdamW(hyper))?;
    let (_, mut data) = blobs_mlp(seed)?;
    let dense = train_dense_adamw(model, &mut data, 100, &hyper)?;
    let losses: Vec<f64> = chunked.trajectory.iter().map(|e| e.loss).collect();
    let same_losses = losses.iter().zip(&dense.losses).all(|(a, b)| a.to_bits() == b.to_bits());
    let same_params = chunked.model.params == dense.model.params;
    Ok(CheckResult::new(
        "dense-reduction",
        same_losses && same_params,
        format!("100 steps: losses bit-identical {same_losses}, parameters bit-identical {same_params}"),
    ))
}

fn memory_model(_: Option<&Path>, _seed: u64) -> Result<CheckResult> {
    let meta = TensorMeta {
        id: TensorId(0),
        name: "virtual".into(),
        rows: 7_000_000,
        cols: 1000,
        precision: Precision::Fp16,
        reg_order: 0,
        trainable: true,
    };
    let m = meta.elements();
    let policy = CostPolicy::default();
    let activation = 8 * 4096 * 32 * 4;
    let mut lines = Vec::new();
    let mut passed = true;
    for k in [1usize, 4, 8, 64] {
        let plan = partition(std::slice::from_ref(&meta), k, &policy)?;
        let layout = MemoryLayout {
            resident_param_bytes: 2 * m,
            chunk_elements: plan.chunks.iter().map(|c| c.elements()).collect(),
            policy,
            activation_bytes: activation,
        };
        for bandwidth in [None, Some(20_000_000)] {
            let mut cfg = ScheduleConfig::new(k, 3 * k * 2).with_interval(2).with_prefetch(bandwidth.is_some());
            cfg.transfer = TransferModel { ticks_per_step: 1000, bytes_per_tick: bandwidth };
            let trace = memory_trace(&simulate_schedule(cfg, layout.state_bytes())?, &layout)?;
            let peak = trace.peak().expect("nonempty");
            let expected = model_peak_bytes(m, k, 2, &policy);
            let transfer = trace.samples().iter().map(|s| s.transfer_buffer_bytes).max().unwrap_or(0);
            let allowance = plan.max_chunk_bytes() as f64 - plan.total_bytes() as f64 / k as f64 + (activation + transfer) as f64;
            let dev = peak.total as f64 - expected;
            passed &= dev.abs() <= allowance;
            if bandwidth.is_none() {
                lines.push(format!("K={k}: peak {} vs {expected} (+A)", peak.total));
                if k == 1 {
                    passed &= peak.resident_param_bytes == 14_000_000_000
                        && peak.active_state_bytes == 112_000_000_000
                        && expected == 126e9;
                }
                if k == 8 {
                    passed &= expected == 28e9 && peak.total == 28_000_000_000 + activation;
                }
            }
        }
    }
    Ok(CheckResult::new("memory-model", passed, lines.join("; ")))
}

fn bp_cost(_: Option<&Path>, seed: u64) -> Result<CheckResult> {
    let mut ratios = Vec::new();
    for k in [1usize, 4] {
        let model = Model::mlp(&[6, 8, 8, 3], LossHead::CrossEntropy, seed)?;
        let data = gaussian_blobs(64, 6, 3, 2.0, seed + 1)?;
        let mut src = ShuffledBatches::new(data, 8, seed + 2)?;
        let plan = partition(&model.params.metas(), k, &CostPolicy::default())?;
        let run = run_training(model, &mut src, &plan, &ScheduleConfig::new(k, k * k), &Optimizer::AdamW(AdamWHyper::default()))?;
        ratios.push(measured_bp_cost(&run.flops, k, k)?);
    }
    let mut b = ModelBuilder::new(seed);
    for i in 0..4 {
        if i > 0 {
            b.tanh();
        }
        b.linear(8, 8, true)?;
    }
    let uniform = b.build(LossHead::Sum);
    let x = Matrix::from_vec(4, 8, (0..32).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let suffix = layerwise_suffix_bp_cost(&uniform, &Batch { input: crate::model::BatchInput::Dense(x), target: crate::model::Target::None }, &uniform.layer_tensors())?;
    Ok(CheckResult::new(
        "bp-cost",
        ratios.iter().all(|r| *r == 1.0) && suffix == 2.5,
        format!("measured ratio K=1: {}, K=4: {}; layer-wise suffix over 4 uniform layers: {suffix}", ratios[0], ratios[1]),
    ))
}

fn jitter_contrast(out: Option<&Path>, seed: u64) -> Result<CheckResult> {
    let (layered, balanced) = paired_plans(EMBEDDING_HEAVY, seed, out, "jitter-contrast")?;
    let endpoints = jitter_of([26.34, 26.71, 26.5])?;
    Ok(CheckResult::new(
        "jitter-contrast",
        balanced <= 0.02 && layered >= 0.2 && (endpoints - 0.014).abs() < 0.0005,
        format!("balanced {balanced:.4}, layer-identity {layered:.4}, 26.34/26.71 GB endpoints {endpoints:.4}"),
    ))
}

fn convergence(_: Option<&Path>, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut passed = true;
    let mut notes = Vec::new();
    let identity = diagonal_quadratic(&[1.0, 1.0], vec![1.0, 1.0])?;
    let t = block_gradient_chunkft(&identity, 1, 1, 1.0)?;
    let s = stationarity_bound(&t, &identity);
    passed &= s.lhs == 1.0 && s.rhs == 1.0;
    notes.push(format!("identity lhs = rhs = {}", s.lhs));

    let diag = diagonal_quadratic(&[1.0, 4.0], vec![1.0, 1.0])?;
    let quad = random_quadratic(16, 4, 0.1, seed)?;
    let logistic = synthetic_logistic(20, 8, 4, 0.0, seed)?;
    let runs = [
        (&diag, 1, 50, 0.25),
        (&quad, 2, 100, 1.0 / quad.l_bar()),
        (&logistic, 2, 50, 0.1),
        (&logistic, 2, 50, 1.0 / logistic.l_bar()),
    ];
    let mut steps = 0;
    for (p, h, r, eta) in runs {
        let t = block_gradient_chunkft(p, h, r, eta)?;
        steps += t.entries.len();
        passed &= check_descent(&t, p).passed();
        let s = stationarity_bound(&t, p);
        passed &= s.holds && s.precondition_met;
        passed &= rotation_stationarity(&t, p).holds;
    }
    notes.push(format!("descent/stationarity/rotation bounds on {steps} inner steps"));

    let rs = [100usize, 200, 400, 800, 1600];
    let lhs: Vec<f64> = rs
        .iter()
        .map(|&r| block_gradient_chunkft(&quad, 2, r, 1.0 / quad.l_bar()).map(|t| stationarity_bound(&t, &quad).lhs))
        .collect::<Result<_>>()?;
    let slope = loglog_slope(&rs.iter().map(|&r| r as f64).collect::<Vec<_>>(), &lhs);
    passed &= (slope + 1.0).abs() <= 0.1;
    let secs = start.elapsed().as_secs_f64();
    passed &= secs < 120.0;
    notes.push(format!("rate slope {slope:.4}, {secs:.2}s"));
    Ok(CheckResult::new("convergence", passed, notes.join("; ")))
}

fn state_continuity(_: Option<&Path>, seed: u64) -> Result<CheckResult> {
    let (model, mut data) = blobs_mlp(seed)?;
    let hyper = AdamWHyper { eta: 5e-3, ..Default::default() };
    let (k, interval, steps) = (3, 2, 30);
    let plan = partition(&model.params.metas(), k, &CostPolicy::default())?;
    let digest = plan.digest();
    let run = run_training(model.clone(), &mut data, &plan, &ScheduleConfig::new(k, steps).with_interval(interval), &Optimizer::AdamW(hyper))?;

    // Same schedule with every chunk's states kept in memory for the whole run.
    let (_, mut data) = blobs_mlp(seed)?;
    let mut m = model;
    let mut states = (0..k).map(|c| init_chunk_states(&plan, c, &m.params)).collect::<Result<Vec<_>>>()?;
    let mut round_trip = true;
    for s in &mut states {
        s.tier = Tier::Device;
    }
    for t in 0..steps {
        let c = (t / interval) % k;
        let batch = crate::schedule::BatchSource::next_batch(&mut data)?;
        let bag = {
            let (_, tape) = forward(&m, &batch)?;
            backward_chunked(&tape, &plan.chunks[c].mask())?
        };
        accumulate_grad(&mut states[c], &bag)?;
        let g = take_mean_grad(&mut states[c])?;
        adamw_chunk_step(&mut states[c], &g, &hyper)?;
        states[c].write_back(&mut m.params)?;
        let blob = encode_checkpoint(&states[c], &digest);
        let mut back = decode_checkpoint(&blob, &plan, &digest)?;
        back.tier = Tier::Device;
        round_trip &= back == states[c];
    }
    let engine = run.chunk_states(&plan)?;
    let continuous = engine.iter().zip(&states).all(|(a, b)| a.master == b.master && a.m == b.m && a.v == b.v && a.n == b.n);
    let params = run.model.params == m.params;
    Ok(CheckResult::new(
        "state-continuity",
        round_trip && continuous && params,
        format!("round trip bit-identical {round_trip}; rotating run vs never-offloaded states: states {continuous}, params {params}"),
    ))
}

fn overlap_transparency(_: Option<&Path>, seed: u64) -> Result<CheckResult> {
    let mut configs = Vec::new();
    for doc in [QUADRATIC_K2, MLP_IMBALANCED, EMBEDDING_HEAVY] {
        let cfg = with_seed(doc, seed)?;
        let mut layered = cfg.clone();
        layered.schedule.plan = PlanKind::PerLayer;
        configs.push(cfg);
        if !layered.model.layers.is_empty() {
            configs.push(layered);
        }
    }
    let mut sanity = with_seed(TRAINING_SANITY, seed)?;
    sanity.steps = 256;
    configs.push(sanity);
    let mut identical = 0;
    for cfg in &configs {
        let a = execute(cfg)?;
        let mut overlapped = cfg.clone();
        overlapped.schedule.prefetch = true;
        overlapped.schedule.bytes_per_tick = Some(1);
        let b = execute(&overlapped)?;
        if a.run.host_blobs == b.run.host_blobs && a.run.model.params == b.run.model.params {
            identical += 1;
        }
    }
    Ok(CheckResult::new(
        "overlap-transparency",
        identical == configs.len(),
        format!("{identical}/{} preset runs byte-identical with prefetch and slow transfers", configs.len()),
    ))
}

/// ChunkFT over `C` rotations (`C * K * T` steps) against dense AdamW over `C` steps,
/// each being one full-parameter cycle of its method.
pub fn training_sanity_losses(cfg: &ExperimentConfig, cycles: usize) -> Result<(f64, f64)> {
    let mut cfg = cfg.clone();
    cfg.steps = cycles * cfg.k() * cfg.interval();
    let art = execute(&cfg)?;
    let model = cfg.build_model()?;
    let data = crate::harness::build_dataset(&cfg)?.expect("blobs dataset");
    let mut src = ShuffledBatches::new(data.clone(), cfg.data.batch, cfg.data_seed())?;
    let dense = train_dense_adamw(model, &mut src, cycles, &cfg.optimizer.adamw())?;
    Ok((art.summary.final_loss, evaluate_loss(&dense.model, Some(&data))?))
}

fn training_sanity(out: Option<&Path>, seed: u64) -> Result<CheckResult> {
    let cfg = with_seed(TRAINING_SANITY, seed)?;
    let cycles = cfg.steps / (cfg.k() * cfg.interval());
    if let Some(dir) = out {
        write_artifacts(&execute(&cfg)?, &cfg, &dir.join("training-sanity"))?;
    }
    let (chunked, dense) = training_sanity_losses(&cfg, cycles)?;
    let rel = (chunked - dense).abs() / dense;
    Ok(CheckResult::new(
        "training-sanity",
        rel <= 0.05,
        format!("{cycles} cycles: ChunkFT loss {chunked:.5}, dense AdamW loss {dense:.5}, relative gap {rel:.4}"),
    ))
}
