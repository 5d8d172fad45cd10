//! Continual training and evaluation driver: per-task optimization with
//! past-logit masking, growing classifier heads, accuracy/forgetting
//! metrics, and the multi-trial experiment runner.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::coda::{key_pull_loss, PerTaskPrompts, PerTaskQuery, PromptBank, PromptPool};
use crate::config::{RunConfig, StrategyKind};
use crate::data::{apply_dual_shift, generate_benchmark, pretext_split, TaskStream};
use crate::error::{Error, Result};
use crate::opt::{Adam, CosineSchedule};
use crate::subseed;
use crate::tensor::{Tape, Tensor};
use crate::vit::{argmax, pretrain, shuffle, ViTEncoder};

// ── Classifier head ─────────────────────────────────────────────────

/// Growing linear head: one weight/bias block per task. Earlier blocks
/// are retained untouched; past-task rows receive zero gradient during
/// new-task training as a consequence of logit masking.
pub struct ClassifierHead {
    pub blocks: Vec<(Tensor, Tensor)>,
    /// Per-task logit ranges [lo, hi).
    pub class_ranges: Vec<(usize, usize)>,
    embed_dim: usize,
}

impl ClassifierHead {
    pub fn new(embed_dim: usize) -> ClassifierHead {
        ClassifierHead { blocks: Vec::new(), class_ranges: Vec::new(), embed_dim }
    }

    /// Append rows for a new task's classes. Weights use the same
    /// initialization scheme as prompt keys; biases start at zero.
    pub fn grow(&mut self, num_new_classes: usize, seed: u64) {
        let d = self.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, 0x68656164 + self.blocks.len() as u64));
        let bound = 1.0 / (d as f64).sqrt();
        let w = Tensor::uniform(vec![num_new_classes, d], -bound, bound, &mut rng);
        w.set_requires_grad(true);
        let b = Tensor::zeros(vec![num_new_classes]);
        b.set_requires_grad(true);
        let lo = self.num_classes();
        self.blocks.push((w, b));
        self.class_ranges.push((lo, lo + num_new_classes));
    }

    pub fn num_classes(&self) -> usize {
        self.class_ranges.last().map(|r| r.1).unwrap_or(0)
    }

    /// Logits over all classes seen so far, from a [1×D] embedding.
    pub fn logits(&self, tape: &Tape, emb: &Tensor) -> Tensor {
        assert!(!self.blocks.is_empty(), "logits on an empty head");
        let parts: Vec<Tensor> = self
            .blocks
            .iter()
            .map(|(w, b)| tape.add_row(&tape.matmul_nt(emb, w), b))
            .collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        tape.concat_cols(&refs)
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.blocks.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Largest absolute gradient entry across past-task blocks (blocks
    /// before `current_task`, 0-based). Used by the masking invariant.
    pub fn past_grad_max(&self, current_task: usize) -> f64 {
        let mut max = 0.0f64;
        for (w, b) in self.blocks.iter().take(current_task) {
            for t in [w, b] {
                if let Some(g) = t.grad() {
                    for v in g {
                        max = max.max(v.abs());
                    }
                }
            }
        }
        max
    }
}

/// Past-class logits replaced by −inf before softmax cross-entropy, so
/// past probabilities are 0 and past head rows receive zero gradient.
pub fn mask_past_logits(tape: &Tape, logits: &Tensor, current_range: (usize, usize)) -> Tensor {
    tape.mask_outside(logits, current_range.0, current_range.1)
}

// ── Strategy state ──────────────────────────────────────────────────

pub enum StrategyState {
    Decomposed(PromptBank),
    Pool(PromptPool),
    PerTask(PerTaskPrompts),
    FineTune,
}

impl StrategyState {
    pub fn new(kind: StrategyKind, cfg: &RunConfig, seed: u64) -> Result<StrategyState> {
        let d = cfg.encoder.embed_dim;
        Ok(match kind {
            StrategyKind::Decomposed => {
                let mut bank_cfg = cfg.bank.clone();
                bank_cfg.embed_dim = d;
                StrategyState::Decomposed(PromptBank::new(
                    bank_cfg,
                    cfg.encoder.prompt_layers.len(),
                    seed,
                ))
            }
            StrategyKind::PoolTopK => StrategyState::Pool(PromptPool::new(
                cfg.pool.pool_size,
                cfg.pool.top_k,
                cfg.pool.prompt_len,
                d,
                seed,
            )?),
            StrategyKind::PerTask => StrategyState::PerTask(PerTaskPrompts::new(
                cfg.benchmark.num_tasks,
                cfg.per_task_prompt_len,
                d,
                seed,
            )?),
            StrategyKind::FineTune => StrategyState::FineTune,
        })
    }

    pub fn kind(&self) -> StrategyKind {
        match self {
            StrategyState::Decomposed(_) => StrategyKind::Decomposed,
            StrategyState::Pool(_) => StrategyKind::PoolTopK,
            StrategyState::PerTask(_) => StrategyKind::PerTask,
            StrategyState::FineTune => StrategyKind::FineTune,
        }
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        match self {
            StrategyState::Decomposed(bank) => bank.parameters(),
            StrategyState::Pool(pool) => pool.parameters(),
            StrategyState::PerTask(pts) => pts.parameters(),
            StrategyState::FineTune => Vec::new(),
        }
    }

    pub fn needs_query(&self) -> bool {
        !matches!(self, StrategyState::FineTune)
    }
}

/// Frozen-encoder query embeddings, computed once per sample.
#[derive(Default)]
pub struct QueryCache {
    map: HashMap<(u8, usize, usize), Tensor>,
}

#[derive(Clone, Copy)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl QueryCache {
    pub fn get(
        &mut self,
        encoder: &ViTEncoder,
        stream: &TaskStream,
        split: Split,
        task: usize,
        idx: usize,
    ) -> Result<Tensor> {
        let key = (split as u8, task, idx);
        if let Some(q) = self.map.get(&key) {
            return Ok(q.clone());
        }
        let sample = match split {
            Split::Train => &stream.tasks[task].train[idx],
            Split::Val => &stream.tasks[task].val[idx],
            Split::Test => &stream.tasks[task].test[idx],
        };
        let q = encoder.query(&sample.image)?;
        self.map.insert(key, q.clone());
        Ok(q)
    }
}

// ── Forward paths ───────────────────────────────────────────────────

struct ForwardOut {
    logits: Tensor,
    matched_keys: Vec<Tensor>,
}

/// One prompted forward pass through encoder and head. `train_task_id`
/// selects the per-task prompt during training; inference uses the query.
fn forward_logits(
    tape: &Tape,
    image: &[f64],
    query: Option<&Tensor>,
    state: &StrategyState,
    encoder: &ViTEncoder,
    head: &ClassifierHead,
    prompt_layers: &[usize],
    train_task_id: Option<usize>,
) -> Result<ForwardOut> {
    let mut matched_keys = Vec::new();
    let prompts: Option<HashMap<usize, Tensor>> = match state {
        StrategyState::FineTune => None,
        StrategyState::Decomposed(bank) => {
            let q = query.ok_or_else(|| Error::State("prompted forward requires a query".into()))?;
            let mut map = HashMap::new();
            for (bank_layer, &enc_layer) in prompt_layers.iter().enumerate() {
                map.insert(enc_layer, bank.prompt_for(tape, q, bank_layer));
            }
            Some(map)
        }
        StrategyState::Pool(pool) => {
            let q = query.ok_or_else(|| Error::State("prompted forward requires a query".into()))?;
            let (p, picked) = pool.select(tape, q);
            matched_keys = picked.iter().map(|&i| pool.keys[i].clone()).collect();
            let mut map = HashMap::new();
            // pool prompts go to the first prompted layer only
            map.insert(prompt_layers[0], p);
            Some(map)
        }
        StrategyState::PerTask(pts) => {
            let (p, idx) = match train_task_id {
                Some(id) => pts.select(PerTaskQuery::TaskId(id))?,
                None => {
                    let q = query
                        .ok_or_else(|| Error::State("prompted forward requires a query".into()))?;
                    pts.select(PerTaskQuery::Query(q))?
                }
            };
            if train_task_id.is_some() {
                matched_keys.push(pts.keys[idx].clone());
            }
            // per-task prompts go to the two shallowest prompted layers
            let mut map = HashMap::new();
            for &enc_layer in prompt_layers.iter().take(2) {
                map.insert(enc_layer, p.clone());
            }
            Some(map)
        }
    };
    let emb = encoder.encode(tape, image, prompts.as_ref())?;
    let logits = head.logits(tape, &emb);
    Ok(ForwardOut { logits, matched_keys })
}

/// Class scores over all seen classes for one input, with no masking.
pub fn forward_inference(
    image: &[f64],
    query: Option<&Tensor>,
    state: &StrategyState,
    encoder: &ViTEncoder,
    head: &ClassifierHead,
    prompt_layers: &[usize],
) -> Result<Tensor> {
    let tape = Tape::no_grad();
    Ok(forward_logits(&tape, image, query, state, encoder, head, prompt_layers, None)?.logits)
}

// ── Task training ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TaskLog {
    pub epoch_losses: Vec<f64>,
    /// Largest past-head gradient magnitude observed at any step.
    pub past_head_grad_max: f64,
    pub final_train_accuracy: f64,
}

/// Minimize the masked classification loss (plus orthogonality penalty
/// for the decomposed strategy, plus key pull loss for the baselines)
/// over task `n`'s training data. `n` is 1-based; expansion must already
/// have been applied.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    n: usize,
    stream: &TaskStream,
    state: &mut StrategyState,
    encoder: &mut ViTEncoder,
    head: &mut ClassifierHead,
    cfg: &RunConfig,
    trial_seed: u64,
    queries: &mut QueryCache,
) -> Result<TaskLog> {
    let task = &stream.tasks[n - 1];
    let range = head.class_ranges[n - 1];
    let needs_query = state.needs_query();
    if needs_query && !encoder.is_frozen() {
        return Err(Error::State("prompted training requires a frozen encoder".into()));
    }

    // parameters trained this task
    let mut params: Vec<Tensor> = match state {
        StrategyState::Decomposed(bank) => bank.trainable_params(),
        StrategyState::Pool(pool) => pool.parameters(),
        StrategyState::PerTask(pts) => {
            vec![pts.prompts[n - 1].clone(), pts.keys[n - 1].clone()]
        }
        StrategyState::FineTune => {
            encoder.unfreeze();
            encoder.parameters()
        }
    };
    if let StrategyState::PerTask(pts) = state {
        pts.prompts[n - 1].set_requires_grad(true);
        pts.keys[n - 1].set_requires_grad(true);
    }
    if let StrategyState::Pool(pool) = state {
        for p in pool.parameters() {
            p.set_requires_grad(true);
        }
    }
    let head_block = head.blocks[n - 1].clone();
    params.push(head_block.0.clone());
    params.push(head_block.1.clone());

    let lr = match state {
        StrategyState::FineTune => cfg.optimizer.lr_finetune,
        _ => cfg.optimizer.lr_prompt,
    };
    let mut adam = Adam::new(&params, lr);
    let bs = cfg.optimizer.batch_size;
    let steps_per_epoch = task.train.len().div_ceil(bs);
    let schedule = CosineSchedule::new(lr, (cfg.optimizer.epochs_per_task * steps_per_epoch).max(1));
    let mut log = TaskLog::default();
    let mut step = 0usize;

    for epoch in 0..cfg.optimizer.epochs_per_task {
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        let mut erng = ChaCha8Rng::seed_from_u64(subseed(
            trial_seed,
            0x65706f63 ^ ((n as u64) << 16) ^ epoch as u64,
        ));
        shuffle(&mut order, &mut erng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(bs) {
            for p in &params {
                p.zero_grad();
            }
            for &idx in chunk {
                let sample = &task.train[idx];
                let label = stream
                    .label_of(sample.class_id)
                    .ok_or_else(|| Error::State(format!("unknown class id {}", sample.class_id)))?;
                let q = if needs_query {
                    Some(queries.get(encoder, stream, Split::Train, n - 1, idx)?)
                } else {
                    None
                };
                let tape = Tape::new();
                let fwd = forward_logits(
                    &tape,
                    &sample.image,
                    q.as_ref(),
                    state,
                    encoder,
                    head,
                    &cfg.encoder.prompt_layers,
                    Some(n - 1),
                )?;
                let masked = mask_past_logits(&tape, &fwd.logits, range);
                let mut loss = tape.cross_entropy(&masked, label);
                if !fwd.matched_keys.is_empty() && cfg.optimizer.pull_weight > 0.0 {
                    let key_refs: Vec<&Tensor> = fwd.matched_keys.iter().collect();
                    let pull = key_pull_loss(&tape, q.as_ref().unwrap(), &key_refs);
                    loss = tape.add(&loss, &tape.scale(&pull, cfg.optimizer.pull_weight));
                }
                let lv = loss.value();
                if !lv.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at task {n} epoch {epoch} (class {}, domain {})",
                        sample.class_id, sample.domain
                    )));
                }
                epoch_loss += lv;
                tape.backward_seeded(&loss, 1.0 / chunk.len() as f64);
            }
            // orthogonality penalty, once per optimizer step
            if let StrategyState::Decomposed(bank) = state {
                if bank.config.lambda > 0.0 {
                    let tape = Tape::new();
                    let lo = bank.ortho_loss_total(&tape);
                    if !lo.value().is_finite() {
                        return Err(Error::Numeric("non-finite orthogonality loss".into()));
                    }
                    tape.backward_seeded(&lo, bank.config.lambda);
                }
            }
            log.past_head_grad_max = log.past_head_grad_max.max(head.past_grad_max(n - 1));
            adam.step(schedule.lr_at(step));
            step += 1;
        }
        log.epoch_losses.push(epoch_loss / task.train.len() as f64);
    }

    if let StrategyState::FineTune = state {
        // keep the encoder frozen between tasks so queries stay stable
        // if a prompted strategy shares it later; FT uses its own clone.
        encoder.freeze();
    }

    // training accuracy on the task's own data (masked prediction range)
    let mut correct = 0usize;
    for (idx, sample) in task.train.iter().enumerate() {
        let q = if needs_query {
            Some(queries.get(encoder, stream, Split::Train, n - 1, idx)?)
        } else {
            None
        };
        let logits = forward_inference(
            &sample.image,
            q.as_ref(),
            state,
            encoder,
            head,
            &cfg.encoder.prompt_layers,
        )?;
        let data = logits.data();
        let pred = range.0 + argmax(&data[range.0..range.1]);
        if pred == stream.label_of(sample.class_id).unwrap() {
            correct += 1;
        }
    }
    log.final_train_accuracy = correct as f64 / task.train.len().max(1) as f64;
    Ok(log)
}

// ── Metrics ─────────────────────────────────────────────────────────

/// Lower-triangular per-task accuracy matrix a[t][j] plus the
/// all-seen-classes accuracy after each task.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub per_task: Vec<Vec<f64>>,
    pub seen: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.per_task.len() != self.seen.len() {
            return Err(Error::State("accuracy matrix rows and seen-accuracy length differ".into()));
        }
        for (t, row) in self.per_task.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::State(format!(
                    "accuracy matrix row {t} has {} entries, expected {}",
                    row.len(),
                    t + 1
                )));
            }
            if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::State(format!("accuracy matrix row {t} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Average accuracy A_N: all-seen-classes accuracy after each task,
/// averaged over the N tasks.
pub fn avg_accuracy(matrix: &AccuracyMatrix) -> Result<f64> {
    matrix.validate()?;
    if matrix.seen.is_empty() {
        return Err(Error::State("accuracy matrix is empty".into()));
    }
    Ok(matrix.seen.iter().sum::<f64>() / matrix.seen.len() as f64)
}

/// Average forgetting F_N: per task, the drop from its best historical
/// accuracy to its final accuracy, averaged over the first N−1 tasks.
/// Undefined for a single task.
pub fn avg_forgetting(matrix: &AccuracyMatrix) -> Option<f64> {
    let n = matrix.per_task.len();
    if n < 2 {
        return None;
    }
    let last = &matrix.per_task[n - 1];
    let mut sum = 0.0;
    for j in 0..n - 1 {
        let mut best = f64::NEG_INFINITY;
        for t in j..n {
            best = best.max(matrix.per_task[t][j]);
        }
        sum += best - last[j];
    }
    Some(sum / (n - 1) as f64)
}

/// Accuracy on every task seen so far. Returns (per-task accuracies for
/// tasks 0..=t, accuracy over the union of their test splits).
pub fn evaluate_seen(
    stream: &TaskStream,
    state: &StrategyState,
    encoder: &ViTEncoder,
    head: &ClassifierHead,
    upto_task: usize,
    prompt_layers: &[usize],
    queries: &mut QueryCache,
) -> Result<(Vec<f64>, f64)> {
    let needs_query = state.needs_query();
    let mut per_task = Vec::with_capacity(upto_task + 1);
    let mut total_correct = 0usize;
    let mut total_count = 0usize;
    for j in 0..=upto_task {
        let task = &stream.tasks[j];
        let mut correct = 0usize;
        for (idx, sample) in task.test.iter().enumerate() {
            let q = if needs_query {
                Some(queries.get(encoder, stream, Split::Test, j, idx)?)
            } else {
                None
            };
            let logits =
                forward_inference(&sample.image, q.as_ref(), state, encoder, head, prompt_layers)?;
            if argmax(&logits.data()) == stream.label_of(sample.class_id).unwrap() {
                correct += 1;
            }
        }
        per_task.push(correct as f64 / task.test.len().max(1) as f64);
        total_correct += correct;
        total_count += task.test.len();
    }
    Ok((per_task, total_correct as f64 / total_count.max(1) as f64))
}

// ── Experiment runner ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub strategy: String,
    pub matrix: AccuracyMatrix,
    pub avg_accuracy: f64,
    pub avg_forgetting: Option<f64>,
    /// Accuracy over all classes after the final task (for comparison
    /// with the checkpoint-averaged A_N).
    pub final_accuracy: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub encoder_params: usize,
    pub pretext_val_accuracy: f64,
    pub task_logs: Vec<TaskLog>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub a_n_mean: f64,
    pub a_n_std: f64,
    pub f_n_mean: f64,
    pub f_n_std: f64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub encoder_params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub trials: Vec<TrialResult>,
    pub summary: Vec<StrategySummary>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Count of parameters unlocked at any point during the run.
fn trainable_param_count(state: &StrategyState, encoder: &ViTEncoder, head: &ClassifierHead) -> usize {
    let strategy: usize = state.parameters().iter().map(|p| p.numel()).sum();
    let base = match state {
        StrategyState::FineTune => encoder.param_count(),
        _ => 0,
    };
    base + strategy + head.param_count()
}

/// One strategy over one trial's task stream. `out_dir` enables
/// per-task checkpoints and resume.
#[allow(clippy::too_many_arguments)]
pub fn run_strategy(
    kind: StrategyKind,
    stream: &TaskStream,
    pretrained: &ViTEncoder,
    cfg: &RunConfig,
    trial_seed: u64,
    pretext_val_accuracy: f64,
    out_dir: Option<&Path>,
    queries: &mut QueryCache,
) -> Result<TrialResult> {
    let n_tasks = stream.tasks.len();
    let per_task_classes = stream.tasks[0].class_ids.len();
    let mut state = StrategyState::new(kind, cfg, trial_seed)?;
    // prompts never train the shared encoder; fine-tuning gets a clone
    let mut encoder = pretrained.deep_clone();
    let mut head = ClassifierHead::new(cfg.encoder.embed_dim);
    let mut matrix = AccuracyMatrix::default();
    let mut task_logs: Vec<TaskLog> = Vec::new();

    // one checkpoint file per completed task; resume from the latest
    let ck_path = |n: usize| -> Option<PathBuf> {
        out_dir.map(|d| d.join(format!("ck_{}_{}_task{}.bin", kind.name(), trial_seed, n)))
    };
    let mut done = 0usize;
    let mut resume_ck: Option<Checkpoint> = None;
    for n in (1..=n_tasks).rev() {
        let Some(path) = ck_path(n) else { break };
        if !path.exists() {
            continue;
        }
        let ck = Checkpoint::read(&path)?;
        let t = ck.meta["tasks_done"].as_u64().unwrap_or(0) as usize;
        if t != n {
            return Err(Error::Format(format!(
                "checkpoint {} claims {} tasks done",
                path.display(),
                t
            )));
        }
        done = t;
        matrix = serde_json::from_value(ck.meta["matrix"].clone())
            .map_err(|e| Error::Format(format!("checkpoint matrix: {e}")))?;
        task_logs = serde_json::from_value(ck.meta["task_logs"].clone())
            .map_err(|e| Error::Format(format!("checkpoint logs: {e}")))?;
        resume_ck = Some(ck);
        break;
    }

    // replay structure growth for completed tasks, then load parameters
    for n in 1..=done {
        if let StrategyState::Decomposed(bank) = &mut state {
            bank.expand(n, n_tasks)?;
        }
        head.grow(per_task_classes, trial_seed);
    }
    if let Some(ck) = resume_ck {
        restore_params(&ck, &state, &encoder, &head)?;
    }

    for n in (done + 1)..=n_tasks {
        if let StrategyState::Decomposed(bank) = &mut state {
            bank.expand(n, n_tasks)?;
        }
        head.grow(per_task_classes, trial_seed);
        let log = train_task(
            n,
            stream,
            &mut state,
            &mut encoder,
            &mut head,
            cfg,
            trial_seed,
            queries,
        )?;
        task_logs.push(log);
        let (per_task, seen) = evaluate_seen(
            stream,
            &state,
            &encoder,
            &head,
            n - 1,
            &cfg.encoder.prompt_layers,
            queries,
        )?;
        matrix.per_task.push(per_task);
        matrix.seen.push(seen);
        if let Some(path) = ck_path(n) {
            save_checkpoint(&path, n, &matrix, &task_logs, cfg, trial_seed, &state, &encoder, &head)?;
        }
    }

    let a_n = avg_accuracy(&matrix)?;
    let f_n = avg_forgetting(&matrix);
    Ok(TrialResult {
        seed: trial_seed,
        strategy: kind.name().to_string(),
        final_accuracy: *matrix.seen.last().unwrap(),
        matrix,
        avg_accuracy: a_n,
        avg_forgetting: f_n,
        trainable_params: trainable_param_count(&state, &encoder, &head),
        total_params: encoder.param_count()
            + state.parameters().iter().map(|p| p.numel()).sum::<usize>()
            + head.param_count(),
        encoder_params: encoder.param_count(),
        pretext_val_accuracy,
        task_logs,
    })
}

#[allow(clippy::too_many_arguments)]
fn save_checkpoint(
    path: &Path,
    tasks_done: usize,
    matrix: &AccuracyMatrix,
    task_logs: &[TaskLog],
    cfg: &RunConfig,
    trial_seed: u64,
    state: &StrategyState,
    encoder: &ViTEncoder,
    head: &ClassifierHead,
) -> Result<()> {
    let mut ck = Checkpoint {
        meta: serde_json::json!({
            "tasks_done": tasks_done,
            "matrix": matrix,
            "task_logs": task_logs,
            "seed": trial_seed,
            "strategy": state.kind().name(),
            "config": cfg,
        }),
        ..Default::default()
    };
    for (i, p) in state.parameters().iter().enumerate() {
        ck.push_tensor(&format!("sp{i}"), p);
    }
    for (t, (w, b)) in head.blocks.iter().enumerate() {
        ck.push_tensor(&format!("hw{t}"), w);
        ck.push_tensor(&format!("hb{t}"), b);
    }
    if matches!(state, StrategyState::FineTune) {
        for (i, p) in encoder.parameters().iter().enumerate() {
            ck.push_tensor(&format!("enc{i}"), p);
        }
    }
    ck.write(path)
}

fn restore_params(
    ck: &Checkpoint,
    state: &StrategyState,
    encoder: &ViTEncoder,
    head: &ClassifierHead,
) -> Result<()> {
    for (i, p) in state.parameters().iter().enumerate() {
        ck.load_into(&format!("sp{i}"), p)?;
    }
    for (t, (w, b)) in head.blocks.iter().enumerate() {
        ck.load_into(&format!("hw{t}"), w)?;
        ck.load_into(&format!("hb{t}"), b)?;
    }
    if matches!(state, StrategyState::FineTune) {
        for (i, p) in encoder.parameters().iter().enumerate() {
            ck.load_into(&format!("enc{i}"), p)?;
        }
    }
    Ok(())
}

/// Build the streams for one trial: shuffled benchmark (optionally
/// dual-shifted) plus the pretext stream, with disjointness checked.
pub fn build_trial_streams(cfg: &RunConfig, trial_seed: u64) -> Result<(TaskStream, TaskStream)> {
    let mut stream = generate_benchmark(&cfg.benchmark, trial_seed)?;
    if cfg.dual_shift_fraction > 0.0 {
        stream = apply_dual_shift(&stream, cfg.dual_shift_fraction, subseed(trial_seed, 0x6473))?;
    }
    let pretext = pretext_split(&cfg.benchmark, cfg.pretext_classes, trial_seed)?;
    let bench_ids = stream.all_class_ids();
    for id in pretext.all_class_ids() {
        if bench_ids.contains(&id) {
            return Err(Error::Benchmark(format!(
                "pretext class {id} overlaps the continual stream"
            )));
        }
    }
    Ok((stream, pretext))
}

/// Pretrain a fresh encoder for one trial and freeze it.
pub fn build_trial_encoder(cfg: &RunConfig, pretext: &TaskStream, trial_seed: u64) -> Result<(ViTEncoder, f64)> {
    let mut encoder = ViTEncoder::new(cfg.encoder.clone(), subseed(trial_seed, 0x656e63))?;
    let val_acc = pretrain(
        &mut encoder,
        pretext,
        cfg.optimizer.pretrain_epochs,
        cfg.optimizer.pretrain_lr,
        cfg.optimizer.batch_size,
        trial_seed,
    )?;
    Ok((encoder, val_acc))
}

/// Full experiment: for every trial seed, build streams, pretrain the
/// shared frozen encoder, and run every configured strategy over the same
/// task stream. Trials run in parallel; results are merged in seed order.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let trial_results: Vec<Result<Vec<TrialResult>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<TrialResult>> {
            let (stream, pretext) = build_trial_streams(cfg, seed)?;
            let (encoder, pre_acc) = build_trial_encoder(cfg, &pretext, seed)?;
            let hash_before = encoder.param_hash();
            // the encoder is frozen, so query embeddings are shared by
            // every strategy in the trial
            let mut queries = QueryCache::default();
            let mut results = Vec::new();
            for &kind in &cfg.strategies {
                let r = run_strategy(
                    kind,
                    &stream,
                    &encoder,
                    cfg,
                    seed,
                    pre_acc,
                    cfg.out_dir.as_deref(),
                    &mut queries,
                )?;
                results.push(r);
            }
            if encoder.param_hash() != hash_before {
                return Err(Error::State("shared frozen encoder was mutated during the trial".into()));
            }
            Ok(results)
        })
        .collect();

    let mut trials = Vec::new();
    for r in trial_results {
        trials.extend(r?);
    }

    let mut summary = Vec::new();
    for &kind in &cfg.strategies {
        let of_kind: Vec<&TrialResult> =
            trials.iter().filter(|t| t.strategy == kind.name()).collect();
        let (a_mean, a_std) = mean_std(&of_kind.iter().map(|t| t.avg_accuracy).collect::<Vec<_>>());
        let (f_mean, f_std) = mean_std(
            &of_kind.iter().filter_map(|t| t.avg_forgetting).collect::<Vec<_>>(),
        );
        summary.push(StrategySummary {
            strategy: kind.name().to_string(),
            a_n_mean: a_mean,
            a_n_std: a_std,
            f_n_mean: f_mean,
            f_n_std: f_std,
            trainable_params: of_kind.first().map(|t| t.trainable_params).unwrap_or(0),
            total_params: of_kind.first().map(|t| t.total_params).unwrap_or(0),
            encoder_params: of_kind.first().map(|t| t.encoder_params).unwrap_or(0),
        });
    }
    Ok(RunReport { config: cfg.clone(), trials, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn mask_past_logits_definition() {
        let tape = Tape::no_grad();
        let logits = Tensor::new(vec![1, 4], vec![5.0, 5.0, 1.0, 2.0]);
        let masked = mask_past_logits(&tape, &logits, (2, 4));
        let d = masked.data();
        assert_eq!(d, vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 1.0, 2.0]);
    }

    #[test]
    fn masked_cross_entropy_zero_grad_on_past_head_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut head = ClassifierHead::new(4);
        head.grow(2, 1);
        head.grow(2, 1);
        let emb = Tensor::uniform(vec![1, 4], -1.0, 1.0, &mut rng);
        emb.set_requires_grad(true);
        let tape = Tape::new();
        let logits = head.logits(&tape, &emb);
        let masked = mask_past_logits(&tape, &logits, head.class_ranges[1]);
        let loss = tape.cross_entropy(&masked, 3);
        tape.backward(&loss);
        assert_eq!(head.past_grad_max(1), 0.0, "past head rows must get exactly zero gradient");
        // current block does receive gradient
        assert!(head.blocks[1].0.grad().is_some());
    }

    #[test]
    fn avg_accuracy_examples() {
        let m = AccuracyMatrix { per_task: vec![vec![0.9], vec![0.6, 0.8]], seen: vec![0.9, 0.7] };
        assert!((avg_accuracy(&m).unwrap() - 0.8).abs() < 1e-15);
        let single = AccuracyMatrix { per_task: vec![vec![0.42]], seen: vec![0.42] };
        assert_eq!(avg_accuracy(&single).unwrap(), 0.42);
        assert!(avg_forgetting(&single).is_none());
    }

    #[test]
    fn avg_forgetting_examples() {
        let m = AccuracyMatrix { per_task: vec![vec![0.9], vec![0.8, 0.7]], seen: vec![0.9, 0.75] };
        assert!((avg_forgetting(&m).unwrap() - 0.1).abs() < 1e-15);
        // no degradation anywhere
        let m = AccuracyMatrix {
            per_task: vec![vec![0.5], vec![0.5, 0.6], vec![0.5, 0.6, 0.7]],
            seen: vec![0.5, 0.55, 0.6],
        };
        assert_eq!(avg_forgetting(&m).unwrap(), 0.0);
    }

    #[test]
    fn metrics_match_brute_force_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..10 {
            let n = 3 + (trial % 2);
            let mut per_task = Vec::new();
            let mut seen = Vec::new();
            for t in 0..n {
                per_task.push((0..=t).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>());
                seen.push(rng.random_range(0.0..1.0));
            }
            let m = AccuracyMatrix { per_task: per_task.clone(), seen: seen.clone() };
            // independent loops
            let a_expect = seen.iter().sum::<f64>() / n as f64;
            assert!((avg_accuracy(&m).unwrap() - a_expect).abs() < 1e-12);
            let mut f_sum = 0.0;
            for j in 0..n - 1 {
                let mut best = f64::MIN;
                for t in j..n {
                    if per_task[t][j] > best {
                        best = per_task[t][j];
                    }
                }
                f_sum += best - per_task[n - 1][j];
            }
            let f_expect = f_sum / (n - 1) as f64;
            assert!((avg_forgetting(&m).unwrap() - f_expect).abs() < 1e-12);
        }
    }

    #[test]
    fn incomplete_matrix_rejected() {
        let m = AccuracyMatrix { per_task: vec![vec![0.9], vec![0.8]], seen: vec![0.9, 0.8] };
        assert!(avg_accuracy(&m).is_err());
    }

    #[test]
    fn head_grows_monotonically() {
        let mut head = ClassifierHead::new(8);
        head.grow(3, 7);
        let first = head.blocks[0].0.data();
        head.grow(3, 7);
        assert_eq!(head.num_classes(), 6);
        assert_eq!(head.class_ranges, vec![(0, 3), (3, 6)]);
        // earlier rows retained bitwise
        assert!(first.iter().zip(head.blocks[0].0.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
