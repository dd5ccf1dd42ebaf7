//! Pretraining (uniformly sampled multi-task objectives) and contrastive
//! finetuning with validation-based checkpoint selection.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{build_image_encoder, build_text_encoder, ModelParams};
use crate::error::{LdError, Result};
use crate::eval::evaluate;
use crate::graph::{value_and_grad, Graph, NodeId};
use crate::objectives::{
    cmr_loss_node, mlm_loss_node, mrc_kl_loss_node, mrfr_loss_node, plan_region_mask,
    plan_text_mask, DEFAULT_MASK_RATE,
};
use crate::optim::{adamw_step, lr_schedule_with, AdamWHyper, AdamWState};
use crate::synth::Corpus;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Cmr,
    Vmlm,
    Smrm,
    Mlm,
    Mrm,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Cmr, Task::Vmlm, Task::Smrm, Task::Mlm, Task::Mrm];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Task::Cmr => "cmr",
            Task::Vmlm => "vmlm",
            Task::Smrm => "smrm",
            Task::Mlm => "mlm",
            Task::Mrm => "mrm",
        };
        f.write_str(s)
    }
}

impl FromStr for Task {
    type Err = LdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cmr" => Ok(Task::Cmr),
            "vmlm" => Ok(Task::Vmlm),
            "smrm" => Ok(Task::Smrm),
            "mlm" => Ok(Task::Mlm),
            "mrm" => Ok(Task::Mrm),
            other => Err(LdError::InvalidArgument(format!(
                "unknown task '{other}' (expected cmr, vmlm, smrm, mlm or mrm)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub tasks: Vec<Task>,
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    /// Finetuning: validate every this many steps (and at the last step).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tasks: Task::ALL.to_vec(),
            steps: 100,
            batch_size: 96,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            warmup_frac: 0.1,
            seed: 42,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(LdError::EmptyInput("task list"));
        }
        if self.steps == 0 {
            return Err(LdError::InvalidArgument("steps must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(LdError::InvalidArgument("batch size must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(LdError::InvalidArgument(
                "warmup fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    fn hyper(&self, lr: f64) -> AdamWHyper {
        AdamWHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub task: Task,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} task {} loss {:.6} lr {:.6e}",
            self.step, self.task, self.loss, self.lr
        )
    }
}

/// Uniform task choice; exposed so sampling statistics can be audited.
pub fn sample_task(tasks: &[Task], rng: &mut impl Rng) -> Task {
    tasks[rng.gen_range(0..tasks.len())]
}

fn sample_batch(pool: &[u64], n: usize, rng: &mut impl Rng) -> Vec<u64> {
    let n = n.min(pool.len());
    rand::seq::index::sample(rng, pool.len(), n)
        .iter()
        .map(|i| pool[i])
        .collect()
}

/// Averages per-example scalar loss nodes.
fn mean_of(g: &mut Graph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(g.scale(acc, 1.0 / nodes.len() as f64))
}

fn batch_loss_node(
    g: &mut Graph,
    params: &ModelParams,
    corpus: &Corpus,
    ids: &[u64],
    task: Task,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let vocab = params.config.vocab;
    match task {
        Task::Cmr => {
            let mut text_rows = Vec::with_capacity(ids.len());
            let mut image_rows = Vec::with_capacity(ids.len());
            for &id in ids {
                let ex = corpus.example(id)?;
                let th = build_text_encoder(g, params, &ex.caption.ids)?;
                text_rows.push(g.rows(th, &[0])?);
                let ih = build_image_encoder(g, params, &ex.regions, &[])?;
                image_rows.push(g.rows(ih, &[0])?);
            }
            let z = g.concat_rows(&text_rows)?;
            let h = g.concat_rows(&image_rows)?;
            cmr_loss_node(g, z, h)
        }
        Task::Mlm | Task::Vmlm => {
            let mut losses = Vec::with_capacity(ids.len());
            for &id in ids {
                let ex = corpus.example(id)?;
                let plan = plan_text_mask(&ex.caption, vocab, DEFAULT_MASK_RATE, rng);
                let fused = matches!(task, Task::Vmlm).then_some(&ex.regions);
                losses.push(mlm_loss_node(g, params, &ex.caption, &plan, fused)?);
            }
            mean_of(g, &losses)
        }
        Task::Mrm | Task::Smrm => {
            // the two masked-region variants alternate by fair coin
            let use_kl = rng.gen_bool(0.5);
            let mut losses = Vec::with_capacity(ids.len());
            for &id in ids {
                let ex = corpus.example(id)?;
                let plan = plan_region_mask(&ex.regions, DEFAULT_MASK_RATE, rng);
                let fused = matches!(task, Task::Smrm).then_some(&ex.caption);
                let node = if use_kl {
                    mrc_kl_loss_node(g, params, &ex.regions, &plan, fused)?
                } else {
                    mrfr_loss_node(g, params, &ex.regions, &plan, fused)?
                };
                losses.push(node);
            }
            mean_of(g, &losses)
        }
    }
}

fn train_step(
    params: &mut ModelParams,
    corpus: &Corpus,
    config: &TrainConfig,
    state: &mut AdamWState,
    step: u64,
    task: Task,
    rng: &mut impl Rng,
) -> Result<LogRecord> {
    let ids = sample_batch(&corpus.splits.train, config.batch_size, rng);
    let mut g = Graph::new();
    let loss_node = batch_loss_node(&mut g, params, corpus, &ids, task, rng)?;
    let (loss, grads) = value_and_grad(&mut g, loss_node)?;
    if !loss.is_finite() {
        return Err(LdError::NonFinite {
            what: format!("loss at step {step} (task {task})"),
        });
    }
    let lr = lr_schedule_with(step, config.steps, config.peak_lr, config.warmup_frac)?;
    adamw_step(&mut params.tensors, &grads, state, &config.hyper(lr))?;
    Ok(LogRecord { step, task, loss, lr })
}

/// Multi-task pretraining: one uniformly sampled objective per step over a
/// fresh batch of distinct pairs. Fails fast on any non-finite loss.
pub fn pretrain(
    params: &mut ModelParams,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<Vec<LogRecord>> {
    config.validate()?;
    if corpus.splits.train.is_empty() {
        return Err(LdError::EmptyInput("training split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamWState::default();
    let mut logs = Vec::with_capacity(config.steps as usize);
    for step in 1..=config.steps {
        let task = sample_task(&config.tasks, &mut rng);
        logs.push(train_step(params, corpus, config, &mut state, step, task, &mut rng)?);
    }
    Ok(logs)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub logs: Vec<LogRecord>,
    /// Step at which the returned parameters were snapshotted.
    pub best_step: u64,
    /// Validation average recall of the snapshot.
    pub best_val_ar: f64,
}

/// Contrastive finetuning. Periodically scores validation average recall and
/// leaves `params` at the best-scoring snapshot, not the last step.
pub fn finetune(
    params: &mut ModelParams,
    corpus: &Corpus,
    config: &TrainConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if config.tasks != vec![Task::Cmr] {
        return Err(LdError::InvalidArgument(
            "finetuning uses the contrastive task only".into(),
        ));
    }
    if corpus.splits.val.is_empty() {
        return Err(LdError::EmptyInput("validation split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamWState::default();
    let mut logs = Vec::with_capacity(config.steps as usize);
    let mut best: Option<(u64, f64, ModelParams)> = None;
    for step in 1..=config.steps {
        logs.push(train_step(params, corpus, config, &mut state, step, Task::Cmr, &mut rng)?);
        if step % config.eval_every == 0 || step == config.steps {
            let report = evaluate(params, corpus, &corpus.splits.val, &corpus.splits.val, None)?;
            let ar = report.average_recall;
            if best.as_ref().is_none_or(|(_, b, _)| ar > *b) {
                best = Some((step, ar, params.clone()));
            }
        }
    }
    let (best_step, best_val_ar, best_params) = best.expect("at least one validation pass");
    *params = best_params;
    Ok(FinetuneOutcome {
        logs,
        best_step,
        best_val_ar,
    })
}
