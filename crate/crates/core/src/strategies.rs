//! Continual-learning strategies for the budgeted stream.
//!
//! Every strategy plugs the same interface: it may react to domain
//! boundaries, do one-time work per batch, and must produce a loss and
//! gradient for each budgeted update iteration. A [`StrategyLearner`] drives
//! a strategy through the [`crate::stream::Learner`] contract.
//!
//! The implemented strategies:
//!
//! * [`Nt`] — plain online SGD on the incoming batch; the baseline every
//!   other strategy must degenerate to when its knob is turned off.
//! * [`Ewc`] — at each boundary past the first, freezes an anchor of the
//!   current parameters weighted by a diagonal curvature estimate (mean of
//!   squared recent data gradients) and adds `(λ/2) Σ F (θ - θ*)²`.
//! * [`Mas`] — same anchor scheme, but weighted by the mean absolute
//!   gradient of the squared-logits energy, a label-free importance signal;
//!   adds `λ Σ Ω (θ - θ*)²`.
//! * [`Lwf`] — at each boundary past the first, freezes the whole model as a
//!   teacher and distills its tempered class distributions into the student
//!   on every new batch.
//! * [`Er`] — a FIFO replay buffer; each update trains on the incoming
//!   batch concatenated with a uniform without-replacement draw from memory.
//! * [`SimWrap`] — decorates any of the above, adding a cross-entropy term
//!   on freshly rendered simulator samples (relabeled through a
//!   [`LabelMap`]) to every update.
//!
//! Degenerate settings are exact: zero regularization weight, a zero
//! capacity buffer, or an all-dropping label map perform the *identical*
//! floating-point update sequence as [`Nt`] — the degenerate term is never
//! computed, no random draw is consumed, and nothing is added.

use std::collections::VecDeque;

use crate::domains::{collate, generate_sample, make_split, DomainSpec, LabeledSample};
use crate::error::{Error, Result};
use crate::labelspace::LabelMap;
use crate::model::{loss_and_grads_from_logits, Model, ModelConfig, ModelSnapshot};
use crate::rng::{rng_for, Stream};
use crate::stream::{BatchView, DomainBoundary, Learner, StepContext};
use crate::tensor::{masked_softmax_cross_entropy, MaskTensor, ParamSet, Tensor, IGNORE_INDEX};

use rand::Rng;

/// Default regularization weight for [`Ewc`].
pub const DEFAULT_EWC_LAMBDA: f64 = 10.0;
/// Default regularization weight for [`Mas`].
pub const DEFAULT_MAS_LAMBDA: f64 = 1.0;
/// Default distillation weight for [`Lwf`].
pub const DEFAULT_LWF_LAMBDA: f64 = 50.0;
/// Default distillation temperature for [`Lwf`].
pub const DEFAULT_LWF_TEMPERATURE: f64 = 2.0;
/// Default number of recent batches kept for curvature/importance estimates.
pub const DEFAULT_ESTIMATE_WINDOW: usize = 25;
/// Default replay buffer capacity for [`Er`].
pub const DEFAULT_REPLAY_CAPACITY: usize = 800;
/// Default simulator mixing ratio for [`SimWrap`].
pub const DEFAULT_SIM_RATIO: f64 = 1.0;
/// The simulator mixing ratios the bench accepts.
pub const ACCEPTED_SIM_RATIOS: [f64; 8] = [0.25, 0.5, 1.0, 2.0, 4.0, 5.0, 8.0, 10.0];
/// First sample seed of the simulator pretraining pool, above any plausible
/// stream split so pretraining images never coincide with stream images.
pub const PRETRAIN_SEED_BASE: u64 = 1_000_000;

/// One continual-learning strategy, driven by [`StrategyLearner`].
pub trait Strategy {
    /// Short human-readable name for records.
    fn name(&self) -> String;

    /// The stream flagged a domain change (first step included).
    fn on_boundary(&mut self, model: &Model, boundary: &DomainBoundary) -> Result<()> {
        let _ = (model, boundary);
        Ok(())
    }

    /// One-time work per batch, before the update iterations (e.g. a
    /// teacher forward pass reused by all of them).
    fn prepare_step(&mut self, model: &Model, batch: &BatchView<'_>) -> Result<()> {
        let _ = (model, batch);
        Ok(())
    }

    /// Objective value and parameter gradient for one update iteration.
    fn loss_and_grads(&mut self, model: &Model, batch: &BatchView<'_>) -> Result<(f64, ParamSet)>;

    /// Bookkeeping after the batch's budget is spent (buffer insertion,
    /// estimate windows).
    fn after_step(&mut self, model: &Model, batch: &BatchView<'_>) -> Result<()> {
        let _ = (model, batch);
        Ok(())
    }
}

impl Strategy for Box<dyn Strategy> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn on_boundary(&mut self, model: &Model, boundary: &DomainBoundary) -> Result<()> {
        (**self).on_boundary(model, boundary)
    }

    fn prepare_step(&mut self, model: &Model, batch: &BatchView<'_>) -> Result<()> {
        (**self).prepare_step(model, batch)
    }

    fn loss_and_grads(&mut self, model: &Model, batch: &BatchView<'_>) -> Result<(f64, ParamSet)> {
        (**self).loss_and_grads(model, batch)
    }

    fn after_step(&mut self, model: &Model, batch: &BatchView<'_>) -> Result<()> {
        (**self).after_step(model, batch)
    }
}

/// Drives a [`Strategy`] through the stream protocol: boundary notification,
/// per-step preparation, exactly the budgeted number of audited updates,
/// then bookkeeping.
pub struct StrategyLearner<S: Strategy> {
    model: Model,
    strategy: S,
    lr: f64,
}

impl<S: Strategy> StrategyLearner<S> {
    pub fn new(model: Model, strategy: S, lr: f64) -> Result<StrategyLearner<S>> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate {lr} must be positive"
            )));
        }
        Ok(StrategyLearner {
            model,
            strategy,
            lr,
        })
    }

    pub fn strategy(&self) -> &S {
        &self.strategy
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

impl<S: Strategy> Learner for StrategyLearner<S> {
    fn observe_batch(&mut self, ctx: &mut StepContext, batch: &BatchView<'_>) -> Result<()> {
        if let Some(boundary) = batch.boundary {
            self.strategy.on_boundary(&self.model, &boundary)?;
        }
        self.strategy.prepare_step(&self.model, batch)?;
        for _ in 0..ctx.budget() {
            let (_, grads) = self.strategy.loss_and_grads(&self.model, batch)?;
            ctx.apply_update(&mut self.model, &grads, self.lr)?;
        }
        self.strategy.after_step(&self.model, batch)
    }

    fn model(&self) -> &Model {
        &self.model
    }
}

fn ensure_finite(loss: f64, grads: &ParamSet) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::numeric("training loss is not finite"));
    }
    if !grads.is_finite() {
        return Err(Error::numeric("training gradient is not finite"));
    }
    Ok(())
}

/// Weighted quadratic pull toward an anchor parameter set.
///
/// With `half` set: loss `(λ/2) Σ w (θ - θ*)²`, gradient `λ w (θ - θ*)`.
/// Without: loss `λ Σ w (θ - θ*)²`, gradient `2 λ w (θ - θ*)`.
fn quadratic_penalty(
    params: &ParamSet,
    anchor: &ParamSet,
    weights: &ParamSet,
    lambda: f64,
    half: bool,
) -> Result<(f64, ParamSet)> {
    if !params.same_structure(anchor) || !params.same_structure(weights) {
        return Err(Error::config(
            "anchor penalty: parameter sets have mismatched structure",
        ));
    }
    let mut loss = 0.0;
    let mut grads = params.zeros_like();
    let (loss_scale, grad_scale) = if half {
        (lambda / 2.0, lambda)
    } else {
        (lambda, 2.0 * lambda)
    };
    for (((_, p), (_, a)), ((_, w), (_, g))) in params
        .iter()
        .zip(anchor.iter())
        .zip(weights.iter().zip(grads.iter_mut()))
    {
        for (((pv, av), wv), gv) in p
            .values()
            .iter()
            .zip(a.values())
            .zip(w.values())
            .zip(g.values_mut())
        {
            let d = pv - av;
            loss += loss_scale * wv * d * d;
            *gv = grad_scale * wv * d;
        }
    }
    Ok((loss, grads))
}

/// A consolidated reference point: parameters plus per-parameter weights.
struct Anchor {
    params: ParamSet,
    weights: ParamSet,
}

/// Recent labeled batches kept for curvature/importance estimation.
struct RecentBatches {
    window: usize,
    batches: VecDeque<(Tensor, MaskTensor)>,
}

impl RecentBatches {
    fn new(window: usize) -> RecentBatches {
        RecentBatches {
            window,
            batches: VecDeque::new(),
        }
    }

    fn push(&mut self, images: &Tensor, labels: &MaskTensor) {
        self.batches.push_back((images.clone(), labels.clone()));
        while self.batches.len() > self.window {
            self.batches.pop_front();
        }
    }

    fn iter(&self) -> impl Iterator<Item = &(Tensor, MaskTensor)> {
        self.batches.iter()
    }

    fn len(&self) -> usize {
        self.batches.len()
    }
}

/// Plain online SGD on each incoming batch.
pub struct Nt;

impl Strategy for Nt {
    fn name(&self) -> String {
        "nt".into()
    }

    fn loss_and_grads(&mut self, model: &Model, batch: &BatchView<'_>) -> Result<(f64, ParamSet)> {
        model.loss_and_grads(batch.images, batch.labels, &[])
    }
}

/// Quadratic consolidation weighted by a diagonal curvature estimate: the
/// elementwise mean of squared data-loss gradients over recent batches.
pub struct Ewc {
    lambda: f64,
    recent: RecentBatches,
    anchor: Option<Anchor>,
}

impl Ewc {
    pub fn new(lambda: f64, window: usize) -> Result<Ewc> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::config(format!(
                "curvature penalty weight {lambda} must be finite and >= 0"
            )));
        }
        if window == 0 {
            return Err(Error::config(
                "estimate window must hold at least one batch",
            ));
        }
        Ok(Ewc {
            lambda,
            recent: RecentBatches::new(window),
            anchor: None,
        })
    }
}

impl Strategy for Ewc {
    fn name(&self) -> String {
        "ewc".into()
    }

    fn on_boundary(&mut self, model: &Model, boundary: &DomainBoundary) -> Result<()> {
        // The first boundary opens the first domain: nothing has been
        // learned, so there is nothing to consolidate. A zero weight keeps
        // the strategy on the plain training path entirely.
        if boundary.count < 2 || self.lambda == 0.0 || self.recent.len() == 0 {
            return Ok(());
        }
        let mut fisher = model.params().zeros_like();
        for (images, labels) in self.recent.iter() {
            let (_, g) = model.data_loss_and_grads(images, labels)?;
            for ((_, acc), (_, gt)) in fisher.iter_mut().zip(g.iter()) {
                for (a, v) in acc.values_mut().iter_mut().zip(gt.values()) {
                    *a += v * v;
                }
            }
        }
        fisher.scale(1.0 / self.recent.len() as f64);
        self.anchor = Some(Anchor {
            params: model.params().clone(),
            weights: fisher,
        });
        Ok(())
    }

    fn loss_and_grads(&mut self, model: &Model, batch: &BatchView<'_>) -> Result<(f64, ParamSet)> {
        let (mut loss, mut grads) = model.loss_and_grads(batch.images, batch.labels, &[])?;
        if let Some(anchor) = &self.anchor {
            let (pl, pg) = quadratic_penalty(
                model.params(),
                &anchor.params,
                &anchor.weights,
                self.lambda,
                true,
            )?;
            loss += pl;
            grads.add_scaled(&pg, 1.0)?;
            ensure_finite(loss, &grads)?;
        }
        Ok((loss, grads))
    }

    fn after_step(&mut self, _model: &Model, batch: &BatchView<'_>) -> Result<()> {
        if self.lambda != 0.0 {
            self.recent.push(batch.images, batch.labels);
        }
        Ok(())
    }
}

/// The label-free importance objective: mean over all pixels of the squared
/// logit energy, whose logits gradient is `2 z / pixel count`.
fn squared_logits_probe(logits: &Tensor) -> (f64, Tensor) {
    let shape = logits.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let pixels = (n * h * w) as f64;
    let mut energy = 0.0;
    let mut dlogits = Tensor::zeros(shape);
    for (z, d) in logits.values().iter().zip(dlogits.values_mut()) {
        energy += z * z;
        *d = 2.0 * z / pixels;
    }
    let _ = c;
    (energy / pixels, dlogits)
}

/// Quadratic consolidation weighted by the mean absolute gradient of the
/// squared-logits energy over recent batches — importance without labels.
pub struct Mas {
    lambda: f64,
    recent: RecentBatches,
    anchor: Option<Anchor>,
}

impl Mas {
    pub fn new(lambda: f64, window: usize) -> Result<Mas> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::config(format!(
                "importance penalty weight {lambda} must be finite and >= 0"
            )));
        }
        if window == 0 {
            return Err(Error::config(
                "estimate window must hold at least one batch",
            ));
        }
        Ok(Mas {
            lambda,
            recent: RecentBatches::new(window),
            anchor: None,
        })
    }
}

impl Strategy for Mas {
    fn name(&self) -> String {
        "mas".into()
    }

    fn on_boundary(&mut self, model: &Model, boundary: &DomainBoundary) -> Result<()> {
        if boundary.count < 2 || self.lambda == 0.0 || self.recent.len() == 0 {
            return Ok(());
        }
        let mut omega = model.params().zeros_like();
        for (images, _) in self.recent.iter() {
            let (_, g) =
                loss_and_grads_from_logits(model.config(), model.params(), images, |logits| {
                    Ok(squared_logits_probe(logits))
                })?;
            for ((_, acc), (_, gt)) in omega.iter_mut().zip(g.iter()) {
                for (a, v) in acc.values_mut().iter_mut().zip(gt.values()) {
                    *a += v.abs();
                }
            }
        }
        omega.scale(1.0 / self.recent.len() as f64);
        self.anchor = Some(Anchor {
            params: model.params().clone(),
            weights: omega,
        });
        Ok(())
    }

    fn loss_and_grads(&mut self, model: &Model, batch: &BatchView<'_>) -> Result<(f64, ParamSet)> {
        let (mut loss, mut grads) = model.loss_and_grads(batch.images, batch.labels, &[])?;
        if let Some(anchor) = &self.anchor {
            let (pl, pg) = quadratic_penalty(
                model.params(),
                &anchor.params,
                &anchor.weights,
                self.lambda,
                false,
            )?;
            loss += pl;
            grads.add_scaled(&pg, 1.0)?;
            ensure_finite(loss, &grads)?;
        }
        Ok((loss, grads))
    }

    fn after_step(&mut self, _model: &Model, batch: &BatchView<'_>) -> Result<()> {
        if self.lambda != 0.0 {
            self.recent.push(batch.images, batch.labels);
        }
        Ok(())
    }
}

/// Tempered distillation of teacher class distributions into the student,
/// averaged over labeled pixels.
///
/// Loss: `weight * T² * mean_valid KL(softmax(teacher/T) || softmax(student/T))`;
/// student logits gradient: `weight * T * (q - p) / n_valid`.
fn distillation_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &MaskTensor,
    temperature: f64,
    weight: f64,
) -> Result<(f64, Tensor)> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::config(format!(
            "distillation: student logits {:?} vs teacher logits {:?}",
            student_logits.shape(),
            teacher_logits.shape()
        )));
    }
    let shape = student_logits.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if labels.shape() != [n, h, w] {
        return Err(Error::config(format!(
            "distillation: labels {:?} for logits {:?}",
            labels.shape(),
            shape
        )));
    }
    let n_valid = labels
        .values()
        .iter()
        .filter(|v| **v != IGNORE_INDEX)
        .count();
    let mut dlogits = Tensor::zeros(shape);
    if n_valid == 0 {
        return Ok((0.0, dlogits));
    }
    let t = temperature;
    let plane = h * w;
    let mut total_kl = 0.0;
    let mut p = vec![0.0f64; c];
    let mut q = vec![0.0f64; c];
    for img in 0..n {
        for pix in 0..plane {
            if labels.values()[img * plane + pix] == IGNORE_INDEX {
                continue;
            }
            let at = |logits: &Tensor, k: usize| logits.values()[(img * c + k) * plane + pix];
            // Stable tempered softmax for both distributions.
            for (dst, src) in [(&mut p, teacher_logits), (&mut q, student_logits)] {
                let mut max = f64::NEG_INFINITY;
                for k in 0..c {
                    max = max.max(at(src, k) / t);
                }
                let mut z = 0.0;
                for k in 0..c {
                    dst[k] = (at(src, k) / t - max).exp();
                    z += dst[k];
                }
                for v in dst.iter_mut() {
                    *v /= z;
                }
            }
            for k in 0..c {
                if p[k] > 0.0 {
                    total_kl += p[k] * (p[k].ln() - q[k].ln());
                }
                dlogits.values_mut()[(img * c + k) * plane + pix] =
                    weight * t * (q[k] - p[k]) / n_valid as f64;
            }
        }
    }
    let loss = weight * t * t * total_kl / n_valid as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("distillation loss is not finite"));
    }
    Ok((loss, dlogits))
}

/// Distills a frozen copy of the model taken at each boundary past the
/// first into the student on every subsequent batch.
pub struct Lwf {
    lambda: f64,
    temperature: f64,
    teacher: Option<ModelSnapshot>,
}

impl Lwf {
    pub fn new(lambda: f64, temperature: f64) -> Result<Lwf> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::config(format!(
                "distillation weight {lambda} must be finite and >= 0"
            )));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::config(format!(
                "distillation temperature {temperature} must be positive"
            )));
        }
        Ok(Lwf {
            lambda,
            temperature,
            teacher: None,
        })
    }

    #[cfg(test)]
    fn teacher_snapshot(&self) -> Option<&ModelSnapshot> {
        self.teacher.as_ref()
    }
}

impl Strategy for Lwf {
    fn name(&self) -> String {
        "lwf".into()
    }

    fn on_boundary(&mut self, model: &Model, boundary: &DomainBoundary) -> Result<()> {
        if boundary.count < 2 || self.lambda == 0.0 {
            return Ok(());
        }
        self.teacher = Some(model.snapshot());
        Ok(())
    }

    fn loss_and_grads(&mut self, model: &Model, batch: &BatchView<'_>) -> Result<(f64, ParamSet)> {
        match &self.teacher {
            None => model.loss_and_grads(batch.images, batch.labels, &[]),
            Some(teacher) => {
                // The teacher runs on whatever batch this iteration trains
                // on (a wrapper may change its composition between
                // iterations), so its logits are computed here rather than
                // once per step.
                let teacher_logits = teacher.forward(batch.images)?;
                // One forward and one backward: cross-entropy and
                // distillation both read the same student logits.
                let (loss, grads) = loss_and_grads_from_logits(
                    model.config(),
                    model.params(),
                    batch.images,
                    |logits| {
                        let (ce, mut dl) = masked_softmax_cross_entropy(logits, batch.labels)?;
                        let (kd, dkd) = distillation_loss(
                            logits,
                            &teacher_logits,
                            batch.labels,
                            self.temperature,
                            self.lambda,
                        )?;
                        for (a, b) in dl.values_mut().iter_mut().zip(dkd.values()) {
                            *a += b;
                        }
                        Ok((ce + kd, dl))
                    },
                )?;
                ensure_finite(loss, &grads)?;
                Ok((loss, grads))
            }
        }
    }
}

/// FIFO replay: remember up to `capacity` stream samples; every update
/// trains on the incoming batch concatenated with a uniform
/// without-replacement draw from memory, matched to the revealed batch
/// size (one draw per update iteration). The incoming batch enters memory
/// only after its step finishes. A wrapper that widens the training batch
/// widens neither the draw nor the memory: both follow the stream.
pub struct Er {
    capacity: usize,
    buffer: VecDeque<LabeledSample>,
    replay_seed: u64,
    draws: u64,
}

impl Er {
    pub fn new(capacity: usize, replay_seed: u64) -> Er {
        Er {
            capacity,
            buffer: VecDeque::new(),
            replay_seed,
            draws: 0,
        }
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    #[cfg(test)]
    fn buffer_samples(&self) -> impl Iterator<Item = &LabeledSample> {
        self.buffer.iter()
    }
}

impl Strategy for Er {
    fn name(&self) -> String {
        "er".into()
    }

    fn loss_and_grads(&mut self, model: &Model, batch: &BatchView<'_>) -> Result<(f64, ParamSet)> {
        // An empty memory (capacity zero included) is the plain path: no
        // random draw happens and no term is added.
        if self.buffer.is_empty() {
            return model.loss_and_grads(batch.images, batch.labels, &[]);
        }
        let k = batch.stream_len.min(self.buffer.len());
        let mut rng = rng_for(self.replay_seed, Stream::Replay, self.draws);
        self.draws += 1;
        let picked = rand::seq::index::sample(&mut rng, self.buffer.len(), k);
        let replayed: Vec<&LabeledSample> = picked.iter().map(|i| &self.buffer[i]).collect();
        let joint: Vec<&LabeledSample> = batch.samples.iter().chain(replayed.into_iter()).collect();
        let (images, labels) = collate(joint)?;
        model.loss_and_grads(&images, &labels, &[])
    }

    fn after_step(&mut self, _model: &Model, batch: &BatchView<'_>) -> Result<()> {
        if self.capacity == 0 {
            return Ok(());
        }
        for s in batch.samples {
            self.buffer.push_back(s.clone());
        }
        while self.buffer.len() > self.capacity {
            self.buffer.pop_front();
        }
        Ok(())
    }
}

/// Decorator mixing freshly rendered simulator samples into every update of
/// the wrapped strategy.
///
/// Per update iteration it renders `round(ratio * batch size)` new simulator
/// samples, relabels them through the map, and concatenates them onto the
/// revealed batch before handing it to the wrapped strategy. The loss is
/// whatever the wrapped strategy computes on the combined batch, so the
/// simulator's share of the gradient grows with the ratio — at ratio 1 an
/// update costs as much as two plain ones, and at large ratios the labeled
/// pixels are dominated by simulator pixels. A map that drops everything
/// disables mixing exactly (no rendering, no random draws).
pub struct SimWrap<S> {
    inner: S,
    sim: DomainSpec,
    map: LabelMap,
    ratio: f64,
    sim_seed: u64,
    draws: u64,
}

impl<S: Strategy> SimWrap<S> {
    pub fn new(
        inner: S,
        sim: DomainSpec,
        map: LabelMap,
        ratio: f64,
        sim_seed: u64,
    ) -> Result<SimWrap<S>> {
        sim.validate()?;
        if !ACCEPTED_SIM_RATIOS.contains(&ratio) {
            return Err(Error::config(format!(
                "sim ratio {ratio} not in the accepted set {ACCEPTED_SIM_RATIOS:?}"
            )));
        }
        if map.source_space() != sim.label_space.name() {
            return Err(Error::config(format!(
                "label map reads from {:?} but the simulator labels in {:?}",
                map.source_space(),
                sim.label_space.name()
            )));
        }
        Ok(SimWrap {
            inner,
            sim,
            map,
            ratio,
            sim_seed,
            draws: 0,
        })
    }
}

impl<S: Strategy> Strategy for SimWrap<S> {
    fn name(&self) -> String {
        format!("{}+{}", self.inner.name(), self.sim.name)
    }

    fn on_boundary(&mut self, model: &Model, boundary: &DomainBoundary) -> Result<()> {
        self.inner.on_boundary(model, boundary)
    }

    fn prepare_step(&mut self, model: &Model, batch: &BatchView<'_>) -> Result<()> {
        self.inner.prepare_step(model, batch)
    }

    fn loss_and_grads(&mut self, model: &Model, batch: &BatchView<'_>) -> Result<(f64, ParamSet)> {
        let k = (self.ratio * batch.stream_len as f64).round() as usize;
        if k == 0 || self.map.drops_everything() {
            return self.inner.loss_and_grads(model, batch);
        }
        let mut rng = rng_for(self.sim_seed, Stream::SimBatch, self.draws);
        self.draws += 1;
        let mut combined: Vec<LabeledSample> = Vec::with_capacity(batch.samples.len() + k);
        combined.extend(batch.samples.iter().cloned());
        for _ in 0..k {
            let mut s = generate_sample(&self.sim, rng.gen::<u64>())?;
            s.mask = self.map.apply(&s.mask)?;
            combined.push(s);
        }
        let (images, labels) = collate(combined.iter())?;
        let mixed = BatchView {
            step: batch.step,
            images: &images,
            labels: &labels,
            samples: &combined,
            stream_len: batch.stream_len,
            boundary: batch.boundary,
        };
        self.inner.loss_and_grads(model, &mixed)
    }

    fn after_step(&mut self, model: &Model, batch: &BatchView<'_>) -> Result<()> {
        self.inner.after_step(model, batch)
    }
}

/// One dataset an offline trainer draws from: a domain, an explicit seed
/// list, and an optional relabeling into the model's space.
pub struct OfflineSource {
    pub spec: DomainSpec,
    pub seeds: Vec<u64>,
    pub map: Option<LabelMap>,
}

/// The simulator pretraining pool: `total` samples from a dedicated seed
/// range, relabeled through the simulator's built-in map.
pub fn sim_pretrain_source(sim: &DomainSpec, total: usize) -> Result<OfflineSource> {
    let map = crate::labelspace::builtin_map(&sim.name)
        .ok_or_else(|| Error::config(format!("domain {:?} has no built-in label map", sim.name)))?;
    Ok(OfflineSource {
        spec: sim.clone(),
        seeds: (PRETRAIN_SEED_BASE..PRETRAIN_SEED_BASE + total as u64).collect(),
        map: Some(map),
    })
}

/// The training splits of a list of same-space domains, unmapped.
pub fn real_train_sources(
    domains: &[DomainSpec],
    train_per_domain: usize,
    test_per_domain: usize,
) -> Vec<OfflineSource> {
    let (train, _) = make_split(train_per_domain, test_per_domain);
    domains
        .iter()
        .map(|d| OfflineSource {
            spec: d.clone(),
            seeds: train.seeds().collect(),
            map: None,
        })
        .collect()
}

/// Multi-epoch offline SGD over shuffled sources — used both for simulator
/// pretraining and for the everything-at-once upper bound. Returns the mean
/// batch loss of each epoch. Offline training is exempt from the stream
/// budget by definition; it exists to bracket the online strategies.
pub fn offline_train(
    model: &mut Model,
    sources: &[OfflineSource],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    shuffle_seed: u64,
) -> Result<Vec<f64>> {
    if sources.is_empty() || sources.iter().any(|s| s.seeds.is_empty()) {
        return Err(Error::config("offline training needs non-empty sources"));
    }
    if batch_size == 0 || epochs == 0 {
        return Err(Error::config(
            "offline training needs a batch size and epoch count",
        ));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::config(format!(
            "learning rate {lr} must be positive"
        )));
    }
    for s in sources {
        s.spec.validate()?;
        if let Some(map) = &s.map {
            if map.source_space() != s.spec.label_space.name() {
                return Err(Error::config(format!(
                    "offline source {:?}: label map reads from {:?}",
                    s.spec.name,
                    map.source_space()
                )));
            }
        }
    }
    let items: Vec<(usize, u64)> = sources
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.seeds.iter().map(move |seed| (i, *seed)))
        .collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order = items.clone();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_for(
            shuffle_seed,
            Stream::OfflineEpoch,
            epoch as u64,
        ));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut samples = Vec::with_capacity(chunk.len());
            for (src_idx, seed) in chunk {
                let source = &sources[*src_idx];
                let mut s = generate_sample(&source.spec, *seed)?;
                if let Some(map) = &source.map {
                    s.mask = map.apply(&s.mask)?;
                }
                samples.push(s);
            }
            if samples
                .iter()
                .all(|s| s.mask.values().iter().all(|v| *v == IGNORE_INDEX))
            {
                continue;
            }
            let (images, labels) = collate(samples.iter())?;
            let (loss, grads) = model.loss_and_grads(&images, &labels, &[])?;
            model.apply_sgd(&grads, lr)?;
            loss_sum += loss;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::data(
                "offline training epoch saw no batch with labeled pixels",
            ));
        }
        epoch_losses.push(loss_sum / batches as f64);
    }
    Ok(epoch_losses)
}

/// Convenience: a fresh model for a label space, seeded.
pub fn model_for_space(num_classes: usize, init_seed: u64) -> Result<Model> {
    Model::init(ModelConfig {
        num_classes,
        init_seed,
        ..ModelConfig::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{real_domain_presets, sim_domain_presets};
    use crate::labelspace::{builtin_map, MapTarget};
    use crate::model::{data_loss_and_grads_with, forward_with, Precision};
    use crate::stream::{run_stream, StreamConfig, StreamMode};
    use crate::tensor::finite_diff_check;
    use approx::assert_abs_diff_eq;

    /// 1x1 images, one conv layer: small enough to brute-force.
    fn tiny_model(seed: u64) -> Model {
        Model::init(ModelConfig {
            in_channels: 2,
            hidden_channels: 1,
            num_layers: 1,
            num_classes: 3,
            kernel_size: 1,
            init_seed: seed,
            precision: Precision::Double,
        })
        .unwrap()
    }

    fn tiny_batch(seed: u64, label: u8) -> (Tensor, MaskTensor) {
        let mut rng = rng_for(seed, Stream::Sample, 0);
        let images = Tensor::from_values(
            &[1, 2, 1, 1],
            (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let labels = MaskTensor::from_values(&[1, 1, 1], vec![label]).unwrap();
        (images, labels)
    }

    fn view<'a>(
        images: &'a Tensor,
        labels: &'a MaskTensor,
        samples: &'a [LabeledSample],
        boundary: Option<DomainBoundary>,
    ) -> BatchView<'a> {
        BatchView {
            step: 1,
            images,
            labels,
            samples,
            stream_len: samples.len(),
            boundary,
        }
    }

    #[test]
    fn quadratic_penalty_gradients_match_finite_differences() {
        let model = tiny_model(3);
        let anchor = tiny_model(4).params().clone();
        let mut weights = model.params().zeros_like();
        for (i, (_, t)) in weights.iter_mut().enumerate() {
            for (j, v) in t.values_mut().iter_mut().enumerate() {
                *v = 0.1 + ((i + j) % 5) as f64 * 0.3;
            }
        }
        for half in [true, false] {
            let params = model.params().clone();
            let (_, analytic) = quadratic_penalty(&params, &anchor, &weights, 2.5, half).unwrap();
            let worst = finite_diff_check(
                |p| Ok(quadratic_penalty(p, &anchor, &weights, 2.5, half)?.0),
                &params,
                &analytic,
                1e-5,
                64,
                0,
            )
            .unwrap();
            assert!(worst < 1e-6, "half={half}: worst relative error {worst}");
        }
    }

    #[test]
    fn curvature_weights_are_the_mean_of_squared_recent_gradients() {
        let model = tiny_model(0);
        let mut ewc = Ewc::new(1.0, 10).unwrap();
        let batches: Vec<(Tensor, MaskTensor)> =
            (0..3).map(|i| tiny_batch(i, (i % 3) as u8)).collect();
        for (images, labels) in &batches {
            let samples = [];
            ewc.after_step(&model, &view(images, labels, &samples, None))
                .unwrap();
        }
        ewc.on_boundary(
            &model,
            &DomainBoundary {
                domain_idx: 1,
                count: 2,
            },
        )
        .unwrap();
        let anchor = ewc
            .anchor
            .as_ref()
            .expect("anchor created at second boundary");

        let mut expected = model.params().zeros_like();
        for (images, labels) in &batches {
            let (_, g) = model.data_loss_and_grads(images, labels).unwrap();
            for ((_, acc), (_, gt)) in expected.iter_mut().zip(g.iter()) {
                for (a, v) in acc.values_mut().iter_mut().zip(gt.values()) {
                    *a += v * v;
                }
            }
        }
        expected.scale(1.0 / 3.0);
        assert!(anchor.weights.max_abs_diff(&expected).unwrap() < 1e-13);
        assert!(anchor.params.max_abs_diff(model.params()).unwrap() == 0.0);
    }

    #[test]
    fn estimate_window_only_keeps_the_most_recent_batches() {
        let model = tiny_model(0);
        let mut short = Ewc::new(1.0, 2).unwrap();
        let batches: Vec<(Tensor, MaskTensor)> =
            (0..5).map(|i| tiny_batch(100 + i, (i % 3) as u8)).collect();
        for (images, labels) in &batches {
            let samples = [];
            short
                .after_step(&model, &view(images, labels, &samples, None))
                .unwrap();
        }
        short
            .on_boundary(
                &model,
                &DomainBoundary {
                    domain_idx: 1,
                    count: 2,
                },
            )
            .unwrap();

        // Oracle over only the final two batches.
        let mut expected = model.params().zeros_like();
        for (images, labels) in &batches[3..] {
            let (_, g) = model.data_loss_and_grads(images, labels).unwrap();
            for ((_, acc), (_, gt)) in expected.iter_mut().zip(g.iter()) {
                for (a, v) in acc.values_mut().iter_mut().zip(gt.values()) {
                    *a += v * v;
                }
            }
        }
        expected.scale(0.5);
        let anchor = short.anchor.as_ref().unwrap();
        assert!(anchor.weights.max_abs_diff(&expected).unwrap() < 1e-13);
    }

    #[test]
    fn first_boundary_consolidates_nothing() {
        let model = tiny_model(0);
        for strategy in ["ewc", "mas"] {
            let (images, labels) = tiny_batch(7, 1);
            let samples = [];
            let v = view(&images, &labels, &samples, None);
            let plain = model.data_loss_and_grads(&images, &labels).unwrap();
            let got = match strategy {
                "ewc" => {
                    let mut s = Ewc::new(5.0, 4).unwrap();
                    s.after_step(&model, &v).unwrap();
                    s.on_boundary(
                        &model,
                        &DomainBoundary {
                            domain_idx: 0,
                            count: 1,
                        },
                    )
                    .unwrap();
                    assert!(s.anchor.is_none());
                    s.loss_and_grads(&model, &v).unwrap()
                }
                _ => {
                    let mut s = Mas::new(5.0, 4).unwrap();
                    s.after_step(&model, &v).unwrap();
                    s.on_boundary(
                        &model,
                        &DomainBoundary {
                            domain_idx: 0,
                            count: 1,
                        },
                    )
                    .unwrap();
                    assert!(s.anchor.is_none());
                    s.loss_and_grads(&model, &v).unwrap()
                }
            };
            assert_eq!(got.0, plain.0);
            assert_eq!(got.1.max_abs_diff(&plain.1).unwrap(), 0.0);
        }
        // A teacher is likewise only frozen from the second boundary on.
        let mut lwf = Lwf::new(5.0, 2.0).unwrap();
        lwf.on_boundary(
            &model,
            &DomainBoundary {
                domain_idx: 0,
                count: 1,
            },
        )
        .unwrap();
        assert!(lwf.teacher.is_none());
        lwf.on_boundary(
            &model,
            &DomainBoundary {
                domain_idx: 1,
                count: 2,
            },
        )
        .unwrap();
        assert!(lwf.teacher.is_some());
    }

    #[test]
    fn consolidated_objective_gradient_matches_finite_differences() {
        // Build an anchor, move the parameters, then check the full
        // objective (data + penalty) against central differences through an
        // independent reimplementation of the objective value.
        let mut model = tiny_model(1);
        let (images, labels) = tiny_batch(11, 2);
        let samples = [];
        let v = view(&images, &labels, &samples, None);

        for use_mas in [false, true] {
            let mut ewc = Ewc::new(3.0, 4).unwrap();
            let mut mas = Mas::new(3.0, 4).unwrap();
            let s: &mut dyn Strategy = if use_mas { &mut mas } else { &mut ewc };
            s.after_step(&model, &v).unwrap();
            s.on_boundary(
                &model,
                &DomainBoundary {
                    domain_idx: 1,
                    count: 2,
                },
            )
            .unwrap();

            // Drift away from the anchor so the penalty is active.
            let (_, g) = model.data_loss_and_grads(&images, &labels).unwrap();
            model.apply_sgd(&g, 0.5).unwrap();

            let (_, analytic) = s.loss_and_grads(&model, &v).unwrap();
            let (anchor_params, anchor_weights) = if use_mas {
                let a = mas.anchor.as_ref().unwrap();
                (a.params.clone(), a.weights.clone())
            } else {
                let a = ewc.anchor.as_ref().unwrap();
                (a.params.clone(), a.weights.clone())
            };
            let cfg = model.config().clone();
            let worst = finite_diff_check(
                |p| {
                    let (data, _) = data_loss_and_grads_with(&cfg, p, &images, &labels)?;
                    let (pen, _) =
                        quadratic_penalty(p, &anchor_params, &anchor_weights, 3.0, !use_mas)?;
                    Ok(data + pen)
                },
                model.params(),
                &analytic,
                1e-5,
                64,
                7,
            )
            .unwrap();
            assert!(
                worst < 1e-4,
                "use_mas={use_mas}: worst relative error {worst}"
            );
        }
    }

    #[test]
    fn importance_weights_match_brute_force_probe_gradients() {
        let model = tiny_model(2);
        let mut mas = Mas::new(1.0, 8).unwrap();
        let batches: Vec<(Tensor, MaskTensor)> = (0..2).map(|i| tiny_batch(50 + i, 0)).collect();
        for (images, labels) in &batches {
            let samples = [];
            mas.after_step(&model, &view(images, labels, &samples, None))
                .unwrap();
        }
        mas.on_boundary(
            &model,
            &DomainBoundary {
                domain_idx: 1,
                count: 2,
            },
        )
        .unwrap();
        let omega = &mas.anchor.as_ref().unwrap().weights;

        // Brute force: central differences of the squared-logits energy per
        // coordinate, per batch, absolute values averaged.
        let cfg = model.config().clone();
        let energy = |params: &ParamSet, images: &Tensor| -> f64 {
            let logits = forward_with(&cfg, params, images).unwrap();
            let shape = logits.shape();
            let pixels = (shape[0] * shape[2] * shape[3]) as f64;
            logits.values().iter().map(|z| z * z).sum::<f64>() / pixels
        };
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let len = model.params().get(&name).unwrap().len();
            for i in 0..len {
                let mut mean_abs = 0.0;
                for (images, _) in &batches {
                    let eps = 1e-5;
                    let mut plus = model.params().clone();
                    plus.get_mut(&name).unwrap().values_mut()[i] += eps;
                    let mut minus = model.params().clone();
                    minus.get_mut(&name).unwrap().values_mut()[i] -= eps;
                    let fd = (energy(&plus, images) - energy(&minus, images)) / (2.0 * eps);
                    mean_abs += fd.abs();
                }
                mean_abs /= batches.len() as f64;
                let got = omega.get(&name).unwrap().values()[i];
                assert_abs_diff_eq!(got, mean_abs, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn distillation_matches_a_hand_computed_case() {
        // One pixel, two classes, teacher logits (2, 0), student (1, 0),
        // temperature 2, weight 3.
        let student = Tensor::from_values(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let teacher = Tensor::from_values(&[1, 2, 1, 1], vec![2.0, 0.0]).unwrap();
        let labels = MaskTensor::from_values(&[1, 1, 1], vec![0]).unwrap();
        let (t, w) = (2.0, 3.0);
        let (loss, dl) = distillation_loss(&student, &teacher, &labels, t, w).unwrap();

        let softmax2 = |a: f64, b: f64| {
            let (ea, eb) = (a.exp(), b.exp());
            (ea / (ea + eb), eb / (ea + eb))
        };
        let (p0, p1) = softmax2(2.0 / t, 0.0);
        let (q0, q1) = softmax2(1.0 / t, 0.0);
        let kl = p0 * (p0.ln() - q0.ln()) + p1 * (p1.ln() - q1.ln());
        assert_abs_diff_eq!(loss, w * t * t * kl, epsilon = 1e-12);
        assert_abs_diff_eq!(dl.values()[0], w * t * (q0 - p0), epsilon = 1e-12);
        assert_abs_diff_eq!(dl.values()[1], w * t * (q1 - p1), epsilon = 1e-12);
    }

    #[test]
    fn distillation_logits_gradient_matches_finite_differences() {
        let mut rng = rng_for(9, Stream::Sample, 0);
        let shape = [2, 3, 2, 2];
        let randn = |rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::from_values(
                &shape,
                (0..2 * 3 * 2 * 2)
                    .map(|_| rng.gen_range(-2.0..2.0))
                    .collect(),
            )
            .unwrap()
        };
        let student = randn(&mut rng);
        let teacher = randn(&mut rng);
        let labels = MaskTensor::from_values(
            &[2, 2, 2],
            vec![0, IGNORE_INDEX, 2, 1, IGNORE_INDEX, 0, 1, 2],
        )
        .unwrap();
        let (t, w) = (2.0, 5.0);
        let (_, dl) = distillation_loss(&student, &teacher, &labels, t, w).unwrap();
        let eps = 1e-6;
        for i in 0..student.len() {
            let mut plus = student.clone();
            plus.values_mut()[i] += eps;
            let mut minus = student.clone();
            minus.values_mut()[i] -= eps;
            let fd = (distillation_loss(&plus, &teacher, &labels, t, w).unwrap().0
                - distillation_loss(&minus, &teacher, &labels, t, w)
                    .unwrap()
                    .0)
                / (2.0 * eps);
            assert_abs_diff_eq!(dl.values()[i], fd, epsilon = 1e-7);
        }
        // Ignored pixels receive no distillation gradient.
        let plane = 4;
        for c in 0..3 {
            assert_eq!(dl.values()[c * plane + 1], 0.0);
        }
    }

    #[test]
    fn distillation_of_an_all_ignored_batch_is_silent() {
        let student = Tensor::from_values(&[1, 2, 1, 1], vec![1.0, -1.0]).unwrap();
        let teacher = Tensor::from_values(&[1, 2, 1, 1], vec![0.5, 0.5]).unwrap();
        let labels = MaskTensor::from_values(&[1, 1, 1], vec![IGNORE_INDEX]).unwrap();
        let (loss, dl) = distillation_loss(&student, &teacher, &labels, 2.0, 50.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(dl.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn distillation_strategy_gradient_matches_finite_differences() {
        let model = tiny_model(5);
        let teacher_model = tiny_model(6);
        let mut lwf = Lwf::new(4.0, 2.0).unwrap();
        lwf.teacher = Some(teacher_model.snapshot());

        let (images, labels) = tiny_batch(21, 1);
        let samples = [];
        let v = view(&images, &labels, &samples, None);
        lwf.prepare_step(&model, &v).unwrap();
        let (_, analytic) = lwf.loss_and_grads(&model, &v).unwrap();

        let cfg = model.config().clone();
        let teacher_logits = teacher_model.forward(&images).unwrap();
        let worst = finite_diff_check(
            |p| {
                let logits = forward_with(&cfg, p, &images)?;
                let (ce, _) = masked_softmax_cross_entropy(&logits, &labels)?;
                let (kd, _) = distillation_loss(&logits, &teacher_logits, &labels, 2.0, 4.0)?;
                Ok(ce + kd)
            },
            model.params(),
            &analytic,
            1e-5,
            64,
            3,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn teacher_is_frozen_between_boundaries_and_followed_per_batch() {
        let model = tiny_model(5);
        let mut lwf = Lwf::new(4.0, 2.0).unwrap();
        lwf.teacher = Some(tiny_model(6).snapshot());
        let (images, labels) = tiny_batch(30, 0);
        let samples = [];
        let v = view(&images, &labels, &samples, None);
        // Repeated evaluation on the same batch is exact: the teacher is a
        // frozen snapshot, not a moving target.
        let a = lwf.loss_and_grads(&model, &v).unwrap();
        let b = lwf.loss_and_grads(&model, &v).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        // A different batch gets its own teacher distribution: the teacher
        // runs on whatever this iteration trains on.
        let (images2, labels2) = tiny_batch(31, 2);
        let v2 = view(&images2, &labels2, &samples, None);
        let c = lwf.loss_and_grads(&model, &v2).unwrap();
        assert_ne!(a.0, c.0);
        assert!(lwf.teacher_snapshot().is_some());
    }

    fn marked_sample(id: u8) -> LabeledSample {
        LabeledSample {
            image: Tensor::filled(&[3, 32, 32], f64::from(id) / 255.0),
            mask: MaskTensor::filled(&[32, 32], id),
            domain: "synthetic".into(),
        }
    }

    #[test]
    fn replay_buffer_is_fifo_with_exact_capacity() {
        let model = model_for_space(19, 0).unwrap();
        let mut er = Er::new(5, 0);
        let mut oracle: Vec<u8> = Vec::new();
        for round in 0..4u8 {
            let samples: Vec<LabeledSample> =
                (0..3).map(|i| marked_sample(round * 3 + i)).collect();
            let (images, labels) = collate(samples.iter()).unwrap();
            er.after_step(&model, &view(&images, &labels, &samples, None))
                .unwrap();
            for s in &samples {
                oracle.push(s.mask.values()[0]);
            }
            while oracle.len() > 5 {
                oracle.remove(0);
            }
            let got: Vec<u8> = er.buffer_samples().map(|s| s.mask.values()[0]).collect();
            assert_eq!(got, oracle, "after round {round}");
        }
        assert_eq!(er.buffer_len(), 5);
    }

    #[test]
    fn replay_draws_are_deterministic_and_batch_sized() {
        let model = model_for_space(19, 1).unwrap();
        let build = || {
            let mut er = Er::new(100, 42);
            let warm: Vec<LabeledSample> = (0..10).map(marked_sample).collect();
            let (wi, wl) = collate(warm.iter()).unwrap();
            er.after_step(&model, &view(&wi, &wl, &warm, None)).unwrap();
            er
        };
        let current: Vec<LabeledSample> = (12..16).map(marked_sample).collect();
        let (ci, cl) = collate(current.iter()).unwrap();
        let mut a = build();
        let mut b = build();
        let la = a
            .loss_and_grads(&model, &view(&ci, &cl, &current, None))
            .unwrap();
        let lb = b
            .loss_and_grads(&model, &view(&ci, &cl, &current, None))
            .unwrap();
        assert_eq!(la.0, lb.0);
        assert_eq!(la.1.max_abs_diff(&lb.1).unwrap(), 0.0);
        // A different replay seed draws a different memory subset.
        let mut c = Er::new(100, 43);
        let warm: Vec<LabeledSample> = (0..10).map(marked_sample).collect();
        let (wi, wl) = collate(warm.iter()).unwrap();
        c.after_step(&model, &view(&wi, &wl, &warm, None)).unwrap();
        let lc = c
            .loss_and_grads(&model, &view(&ci, &cl, &current, None))
            .unwrap();
        assert_ne!(la.0, lc.0);
        // Successive iterations draw fresh subsets.
        let l2 = a
            .loss_and_grads(&model, &view(&ci, &cl, &current, None))
            .unwrap();
        assert_ne!(la.0, l2.0);
    }

    fn two_domain_cfg() -> StreamConfig {
        StreamConfig {
            domains: real_domain_presets().into_iter().take(2).collect(),
            train_per_domain: 16,
            test_per_domain: 4,
            batch_size: 4,
            budget: 2,
            mode: StreamMode::Sequential,
        }
    }

    fn small_model(seed: u64) -> Model {
        Model::init(ModelConfig {
            num_classes: 19,
            hidden_channels: 4,
            init_seed: seed,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn degenerate_strategies_are_bit_identical_to_plain_training() {
        let cfg = two_domain_cfg();
        let run = |strategy: Box<dyn Strategy>| {
            let mut learner = StrategyLearner::new(small_model(7), strategy, 0.05).unwrap();
            let result = run_stream(&cfg, 3, &mut learner).unwrap();
            (result, learner.into_model().params().clone())
        };
        let (base_result, base_params) = run(Box::new(Nt));

        let sim = sim_domain_presets()[0].clone();
        let drop_rules: Vec<(String, MapTarget)> = sim
            .label_space
            .class_names()
            .map(|c| (c.to_string(), MapTarget::Drop))
            .collect();
        let borrowed: Vec<(&str, MapTarget)> = drop_rules
            .iter()
            .map(|(n, v)| (n.as_str(), v.clone()))
            .collect();
        let all_drop = LabelMap::new(
            &sim.label_space,
            &crate::domains::target_label_space(),
            &borrowed,
        )
        .unwrap();

        let contenders: Vec<(&str, Box<dyn Strategy>)> = vec![
            ("ewc(0)", Box::new(Ewc::new(0.0, 5).unwrap())),
            ("mas(0)", Box::new(Mas::new(0.0, 5).unwrap())),
            ("lwf(0)", Box::new(Lwf::new(0.0, 2.0).unwrap())),
            ("er(cap 0)", Box::new(Er::new(0, 9))),
            (
                "sim(all drop)",
                Box::new(SimWrap::new(Nt, sim.clone(), all_drop, 1.0, 11).unwrap()),
            ),
        ];
        for (name, strategy) in contenders {
            let (result, params) = run(strategy);
            assert_eq!(result, base_result, "{name} diverged from plain training");
            assert_eq!(
                params.max_abs_diff(&base_params).unwrap(),
                0.0,
                "{name} parameters diverged"
            );
        }
    }

    #[test]
    fn budgeted_updates_reduce_the_batch_loss() {
        let mut improved = 0;
        for trial in 0..20 {
            let mut model = small_model(trial);
            let spec = &real_domain_presets()[(trial % 4) as usize];
            let samples: Vec<LabeledSample> = (0..4)
                .map(|i| generate_sample(spec, 500 + trial * 8 + i).unwrap())
                .collect();
            let (images, labels) = collate(samples.iter()).unwrap();
            let (before, _) = model.data_loss_and_grads(&images, &labels).unwrap();
            for _ in 0..4 {
                let (_, g) = model.data_loss_and_grads(&images, &labels).unwrap();
                model.apply_sgd(&g, 0.05).unwrap();
            }
            let (after, _) = model.data_loss_and_grads(&images, &labels).unwrap();
            assert!(
                after <= before + 1e-12,
                "trial {trial}: loss rose from {before} to {after}"
            );
            if after < before - 1e-9 {
                improved += 1;
            }
        }
        assert!(
            improved >= 15,
            "only {improved}/20 trials strictly improved"
        );
    }

    #[test]
    fn sim_mixing_validates_its_configuration() {
        let sim = sim_domain_presets()[0].clone();
        let map = builtin_map("sima").unwrap();
        assert!(SimWrap::new(Nt, sim.clone(), map.clone(), 0.3, 0).is_err());
        assert!(SimWrap::new(Nt, sim.clone(), map.clone(), 0.25, 0).is_ok());
        // Wrong map for the simulator.
        let wrong = builtin_map("simb").unwrap();
        assert!(SimWrap::new(Nt, sim, wrong, 1.0, 0).is_err());
    }

    #[test]
    fn sim_mixing_concatenates_the_draw_onto_the_batch() {
        let model = small_model(3);
        let spec = &real_domain_presets()[0];
        let samples: Vec<LabeledSample> = (0..4)
            .map(|i| generate_sample(spec, 900 + i).unwrap())
            .collect();
        let (images, labels) = collate(samples.iter()).unwrap();
        let v = view(&images, &labels, &samples, None);

        let mut nt = Nt;
        let (plain_loss, plain_grads) = nt.loss_and_grads(&model, &v).unwrap();
        let sim = sim_domain_presets()[0].clone();
        let mut wrapped =
            SimWrap::new(Nt, sim.clone(), builtin_map("sima").unwrap(), 1.0, 5).unwrap();
        let (mixed_loss, mixed_grads) = wrapped.loss_and_grads(&model, &v).unwrap();
        assert_ne!(mixed_loss, plain_loss);
        assert!(mixed_grads.max_abs_diff(&plain_grads).unwrap() > 0.0);

        // The wrapper trains on exactly [batch, then the drawn simulator
        // samples]: reproducing its draw reproduces its loss bit for bit.
        let map = builtin_map("sima").unwrap();
        let mut rng = rng_for(5, Stream::SimBatch, 0);
        let mut union: Vec<LabeledSample> = samples.clone();
        for _ in 0..4 {
            let mut s = generate_sample(&sim, rng.gen::<u64>()).unwrap();
            s.mask = map.apply(&s.mask).unwrap();
            union.push(s);
        }
        let (ui, ul) = collate(union.iter()).unwrap();
        let (expected_loss, expected_grads) = model.loss_and_grads(&ui, &ul, &[]).unwrap();
        assert_eq!(mixed_loss, expected_loss);
        assert_eq!(mixed_grads.max_abs_diff(&expected_grads).unwrap(), 0.0);

        // Determinism: a fresh wrapper with the same seed reproduces the
        // draw; a different seed renders different simulator samples.
        let mut again =
            SimWrap::new(Nt, sim.clone(), builtin_map("sima").unwrap(), 1.0, 5).unwrap();
        let (loss_again, grads_again) = again.loss_and_grads(&model, &v).unwrap();
        assert_eq!(mixed_loss, loss_again);
        assert_eq!(mixed_grads.max_abs_diff(&grads_again).unwrap(), 0.0);
        let mut other = SimWrap::new(Nt, sim, builtin_map("sima").unwrap(), 1.0, 6).unwrap();
        let (loss_other, _) = other.loss_and_grads(&model, &v).unwrap();
        assert_ne!(mixed_loss, loss_other);
    }

    #[test]
    fn boxed_strategies_match_their_unboxed_selves() {
        let cfg = two_domain_cfg();
        let mut plain = StrategyLearner::new(small_model(8), Nt, 0.05).unwrap();
        let a = run_stream(&cfg, 1, &mut plain).unwrap();
        let boxed: Box<dyn Strategy> = Box::new(Nt);
        let mut wrapped = StrategyLearner::new(small_model(8), boxed, 0.05).unwrap();
        let b = run_stream(&cfg, 1, &mut wrapped).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            plain
                .into_model()
                .params()
                .max_abs_diff(wrapped.into_model().params())
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn offline_training_reduces_the_loss() {
        let mut model = small_model(10);
        let sources = real_train_sources(&real_domain_presets()[..2], 12, 4);
        let losses = offline_train(&mut model, &sources, 5, 4, 0.05, 0).unwrap();
        assert_eq!(losses.len(), 5);
        assert!(losses.iter().all(|l| l.is_finite()));
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "epoch losses did not fall: {losses:?}"
        );
    }

    #[test]
    fn sim_pretraining_trains_through_the_label_map() {
        let mut model = small_model(11);
        let sim = &sim_domain_presets()[0];
        let source = sim_pretrain_source(sim, 16).unwrap();
        assert_eq!(source.seeds.len(), 16);
        assert!(source.seeds.iter().all(|s| *s >= PRETRAIN_SEED_BASE));
        let losses = offline_train(&mut model, &[source], 3, 4, 0.05, 1).unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn offline_training_rejects_bad_setups() {
        let mut model = small_model(0);
        assert!(offline_train(&mut model, &[], 1, 4, 0.05, 0).is_err());
        let sources = real_train_sources(&real_domain_presets()[..1], 8, 2);
        assert!(offline_train(&mut model, &sources, 0, 4, 0.05, 0).is_err());
        assert!(offline_train(&mut model, &sources, 1, 0, 0.05, 0).is_err());
        assert!(offline_train(&mut model, &sources, 1, 4, -0.1, 0).is_err());
    }
}
