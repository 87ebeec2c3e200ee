//! The online training protocol: a budgeted, single-pass labeled stream.
//!
//! A stream presents labeled batches in a fixed order. For every batch the
//! learner must apply *exactly* the budgeted number of parameter updates —
//! no fewer, no more — through the auditing [`StepContext`]; exceeding the
//! budget fails immediately, undershooting fails when the step ends. Batches
//! are materialized once, handed to the learner once, and dropped: there is
//! no rewind and no second pass.
//!
//! Two orderings are supported:
//!
//! * **Sequential** — domains arrive back-to-back. The first batch of each
//!   domain carries a boundary flag (step 1 included); that flag is the only
//!   domain-change information a learner ever receives. Evaluation runs on
//!   every domain's held-out set at the end of each domain, which builds a
//!   full transfer matrix including not-yet-seen domains.
//! * **Mixed** — every batch holds an equal per-domain quota, so there are
//!   no boundaries at all. Evaluation runs at every tenth of the stream.
//!
//! Plans are lazy: they hold `(domain, sample seed)` pairs, and samples are
//! rendered only when their batch is due.

use serde::{Deserialize, Serialize};

use crate::domains::{collate, generate_sample, make_split, DomainSpec, LabeledSample};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, TransferMatrix};
use crate::model::Model;
use crate::rng::{rng_for, Stream};
use crate::tensor::{MaskTensor, ParamSet, Tensor};

use rand::seq::SliceRandom;

/// How domains are interleaved in the stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    Sequential,
    Mixed,
}

/// Full description of a stream: domains, split sizes, batching, budget.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    /// Ordered training domains; all must share one label space.
    pub domains: Vec<DomainSpec>,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    /// Samples per stream batch.
    pub batch_size: usize,
    /// Mandatory parameter updates per batch.
    pub budget: usize,
    pub mode: StreamMode,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::config("stream needs at least one domain"));
        }
        for d in &self.domains {
            d.validate()?;
        }
        let space = &self.domains[0].label_space;
        for d in &self.domains[1..] {
            if &d.label_space != space {
                return Err(Error::config(format!(
                    "stream domains must share a label space; {:?} differs from {:?}",
                    d.name, self.domains[0].name
                )));
            }
        }
        if self.train_per_domain == 0 || self.test_per_domain == 0 {
            return Err(Error::config("train and test split sizes must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.budget == 0 {
            return Err(Error::config("update budget must be positive"));
        }
        if self.mode == StreamMode::Mixed {
            if self.batch_size % self.domains.len() != 0 {
                return Err(Error::config(format!(
                    "mixed stream: batch size {} not divisible by {} domains",
                    self.batch_size,
                    self.domains.len()
                )));
            }
            let quota = self.batch_size / self.domains.len();
            if self.train_per_domain % quota != 0 {
                return Err(Error::config(format!(
                    "mixed stream: training size {} not divisible by per-batch quota {quota}",
                    self.train_per_domain
                )));
            }
        }
        Ok(())
    }
}

/// One stream item: which domain, which sample seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlannedItem {
    pub domain_idx: usize,
    pub sample_seed: u64,
}

/// A domain change visible to the learner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DomainBoundary {
    /// Index of the domain that starts at this step.
    pub domain_idx: usize,
    /// How many boundaries the stream has produced so far, this one
    /// included; 1 at the very first step.
    pub count: usize,
}

/// One planned batch.
#[derive(Clone, Debug)]
pub struct PlannedBatch {
    /// 1-indexed step number.
    pub step: usize,
    pub items: Vec<PlannedItem>,
    pub boundary: Option<DomainBoundary>,
}

/// Why an evaluation happened.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EvalTag {
    /// Sequential: the stream just finished this domain index.
    DomainEnd(usize),
    /// Mixed: this fraction of the stream has elapsed.
    Fraction(f64),
}

/// The fully laid-out stream: batches plus evaluation points.
#[derive(Clone, Debug)]
pub struct StreamPlan {
    batches: Vec<PlannedBatch>,
    /// `(step, tag)` pairs, ascending by step; evaluation runs after the
    /// step completes.
    evals: Vec<(usize, EvalTag)>,
}

impl StreamPlan {
    pub fn batches(&self) -> &[PlannedBatch] {
        &self.batches
    }

    pub fn evals(&self) -> &[(usize, EvalTag)] {
        &self.evals
    }

    pub fn num_steps(&self) -> usize {
        self.batches.len()
    }
}

/// Shuffled training seed order for one domain.
fn domain_train_order(cfg: &StreamConfig, domain_idx: usize, order_seed: u64) -> Vec<u64> {
    let (train, _) = make_split(cfg.train_per_domain, cfg.test_per_domain);
    let mut seeds: Vec<u64> = train.seeds().collect();
    let mut rng = rng_for(order_seed, Stream::Shuffle, domain_idx as u64);
    seeds.shuffle(&mut rng);
    seeds
}

/// Lay out the whole stream for a given ordering seed. Deterministic in
/// `(cfg, order_seed)`.
pub fn build_plan(cfg: &StreamConfig, order_seed: u64) -> Result<StreamPlan> {
    cfg.validate()?;
    let mut batches = Vec::new();
    let mut evals = Vec::new();
    match cfg.mode {
        StreamMode::Sequential => {
            let mut step = 0usize;
            let mut boundaries = 0usize;
            for (d, _) in cfg.domains.iter().enumerate() {
                let seeds = domain_train_order(cfg, d, order_seed);
                for (i, chunk) in seeds.chunks(cfg.batch_size).enumerate() {
                    step += 1;
                    let boundary = if i == 0 {
                        boundaries += 1;
                        Some(DomainBoundary {
                            domain_idx: d,
                            count: boundaries,
                        })
                    } else {
                        None
                    };
                    batches.push(PlannedBatch {
                        step,
                        items: chunk
                            .iter()
                            .map(|s| PlannedItem {
                                domain_idx: d,
                                sample_seed: *s,
                            })
                            .collect(),
                        boundary,
                    });
                }
                evals.push((step, EvalTag::DomainEnd(d)));
            }
        }
        StreamMode::Mixed => {
            let quota = cfg.batch_size / cfg.domains.len();
            let orders: Vec<Vec<u64>> = (0..cfg.domains.len())
                .map(|d| domain_train_order(cfg, d, order_seed))
                .collect();
            let steps = cfg.train_per_domain / quota;
            for step in 1..=steps {
                let mut items = Vec::with_capacity(cfg.batch_size);
                for (d, order) in orders.iter().enumerate() {
                    for i in 0..quota {
                        items.push(PlannedItem {
                            domain_idx: d,
                            sample_seed: order[(step - 1) * quota + i],
                        });
                    }
                }
                batches.push(PlannedBatch {
                    step,
                    items,
                    boundary: None,
                });
            }
            for tenth in 1..=10usize {
                let at = (steps * tenth).div_ceil(10);
                if evals.last().map(|(s, _)| *s) != Some(at) {
                    evals.push((at, EvalTag::Fraction(tenth as f64 / 10.0)));
                }
            }
        }
    }
    Ok(StreamPlan { batches, evals })
}

/// The labeled batch a learner observes: collated tensors plus the raw
/// samples (for replay buffers and the like).
pub struct BatchView<'a> {
    pub step: usize,
    pub images: &'a Tensor,
    pub labels: &'a MaskTensor,
    pub samples: &'a [LabeledSample],
    /// How many of `samples` the stream actually revealed this step. A
    /// strategy wrapper may hand its inner strategy a widened batch; this
    /// count stays what the stream delivered, so anything sized against
    /// the revealed batch (such as a replay draw) is unaffected.
    pub stream_len: usize,
    pub boundary: Option<DomainBoundary>,
}

/// Budget auditor handed to the learner for one step. Every parameter
/// update must go through [`StepContext::apply_update`].
pub struct StepContext {
    step: usize,
    budget: usize,
    used: usize,
}

impl StepContext {
    fn new(step: usize, budget: usize) -> StepContext {
        StepContext {
            step,
            budget,
            used: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn updates_used(&self) -> usize {
        self.used
    }

    pub fn updates_remaining(&self) -> usize {
        self.budget - self.used
    }

    /// Apply one audited SGD update. Exceeding the per-batch budget is a
    /// protocol violation and fails immediately.
    pub fn apply_update(&mut self, model: &mut Model, grads: &ParamSet, lr: f64) -> Result<()> {
        if self.used >= self.budget {
            return Err(Error::protocol(format!(
                "step {}: learner attempted update {} of a budget of {}",
                self.step,
                self.used + 1,
                self.budget
            )));
        }
        model.apply_sgd(grads, lr)?;
        self.used += 1;
        Ok(())
    }
}

/// A continual learner driven by the stream engine.
pub trait Learner {
    /// Handle one batch, spending the full update budget through `ctx`.
    fn observe_batch(&mut self, ctx: &mut StepContext, batch: &BatchView<'_>) -> Result<()>;

    /// The model under training, used for held-out evaluation.
    fn model(&self) -> &Model;
}

/// One evaluation: mean IoU (and per-class IoU) on every domain's test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub tag: EvalTag,
    pub per_domain_miou: Vec<f64>,
    pub per_domain_class_iou: Vec<Vec<Option<f64>>>,
}

/// Everything a finished stream run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRunResult {
    pub domains: Vec<String>,
    pub steps_run: usize,
    /// Total audited updates; always `steps_run * budget` on success.
    pub updates_applied: usize,
    pub evals: Vec<EvalRow>,
    /// Square stage-by-domain matrix; sequential streams only.
    pub transfer: Option<TransferMatrix>,
    /// Mean IoU per domain at the end of the stream.
    pub final_per_domain_miou: Vec<f64>,
}

impl StreamRunResult {
    /// Mean over domains of the final per-domain IoU.
    pub fn final_mean_miou(&self) -> f64 {
        self.final_per_domain_miou.iter().sum::<f64>() / self.final_per_domain_miou.len() as f64
    }
}

const EVAL_CHUNK: usize = 32;

/// Held-out evaluation of one model on a list of per-domain test sets.
pub fn evaluate_on(model: &Model, test_sets: &[Vec<LabeledSample>]) -> Result<EvalRow> {
    let classes = model.config().num_classes;
    let mut per_domain_miou = Vec::with_capacity(test_sets.len());
    let mut per_domain_class_iou = Vec::with_capacity(test_sets.len());
    for set in test_sets {
        let mut cm = ConfusionMatrix::new(classes);
        for chunk in set.chunks(EVAL_CHUNK) {
            let (images, labels) = collate(chunk.iter())?;
            let preds = model.predict(&images)?;
            cm.accumulate(&labels, &preds)?;
        }
        let miou = cm
            .miou()
            .ok_or_else(|| Error::data("evaluation set has no labeled pixels"))?;
        per_domain_miou.push(miou);
        per_domain_class_iou.push(cm.per_class_iou());
    }
    Ok(EvalRow {
        step: 0,
        tag: EvalTag::Fraction(0.0),
        per_domain_miou,
        per_domain_class_iou,
    })
}

/// Materialize every domain's held-out set once.
pub fn materialize_test_sets(cfg: &StreamConfig) -> Result<Vec<Vec<LabeledSample>>> {
    let (_, test) = make_split(cfg.train_per_domain, cfg.test_per_domain);
    cfg.domains
        .iter()
        .map(|d| test.seeds().map(|s| generate_sample(d, s)).collect())
        .collect()
}

/// Drive a learner down the full stream and evaluate at the planned points.
pub fn run_stream(
    cfg: &StreamConfig,
    order_seed: u64,
    learner: &mut dyn Learner,
) -> Result<StreamRunResult> {
    let plan = build_plan(cfg, order_seed)?;
    let space = &cfg.domains[0].label_space;
    if learner.model().config().num_classes != space.num_classes() {
        return Err(Error::config(format!(
            "model has {} classes but the stream labels {} classes",
            learner.model().config().num_classes,
            space.num_classes()
        )));
    }
    let test_sets = materialize_test_sets(cfg)?;

    let mut evals: Vec<EvalRow> = Vec::new();
    let mut eval_iter = plan.evals().iter().peekable();
    let mut updates_applied = 0usize;
    for batch in plan.batches() {
        let samples: Vec<LabeledSample> = batch
            .items
            .iter()
            .map(|it| generate_sample(&cfg.domains[it.domain_idx], it.sample_seed))
            .collect::<Result<_>>()?;
        let (images, labels) = collate(samples.iter())?;
        let view = BatchView {
            step: batch.step,
            images: &images,
            labels: &labels,
            samples: &samples,
            stream_len: samples.len(),
            boundary: batch.boundary,
        };
        let mut ctx = StepContext::new(batch.step, cfg.budget);
        learner.observe_batch(&mut ctx, &view)?;
        if ctx.updates_used() != cfg.budget {
            return Err(Error::protocol(format!(
                "step {}: learner applied {} of {} budgeted updates",
                batch.step,
                ctx.updates_used(),
                cfg.budget
            )));
        }
        updates_applied += ctx.updates_used();

        while let Some((at, tag)) = eval_iter.peek().copied() {
            if *at != batch.step {
                break;
            }
            let mut row = evaluate_on(learner.model(), &test_sets)?;
            row.step = *at;
            row.tag = *tag;
            evals.push(row);
            eval_iter.next();
        }
    }

    let transfer = match cfg.mode {
        StreamMode::Sequential => {
            let rows: Vec<Vec<f64>> = evals.iter().map(|e| e.per_domain_miou.clone()).collect();
            Some(TransferMatrix::new(
                cfg.domains.iter().map(|d| d.name.clone()).collect(),
                rows,
            )?)
        }
        StreamMode::Mixed => None,
    };
    let final_per_domain_miou = evals
        .last()
        .map(|e| e.per_domain_miou.clone())
        .ok_or_else(|| Error::protocol("stream produced no evaluations"))?;

    Ok(StreamRunResult {
        domains: cfg.domains.iter().map(|d| d.name.clone()).collect(),
        steps_run: plan.num_steps(),
        updates_applied,
        evals,
        transfer,
        final_per_domain_miou,
    })
}

/// Budget pairing for compute-matched comparisons: a learner that mixes in
/// simulated samples at ratio `rho` per update, running at budget `n`, costs
/// as much as a plain learner running at `n * (1 + rho)` — which must come
/// out to a whole number of updates.
pub fn budget_normalized_pair(n: usize, rho: f64) -> Result<(usize, usize)> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(Error::config(format!(
            "sim ratio {rho} must be finite and >= 0"
        )));
    }
    let raw = n as f64 * (1.0 + rho);
    let rounded = raw.round();
    if (raw - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::config(format!(
            "budget {n} at sim ratio {rho} gives non-integer matched budget {raw}"
        )));
    }
    Ok((n, rounded as usize))
}
