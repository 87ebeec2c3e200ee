//! The per-pixel segmentation model.
//!
//! A deliberately small fully-convolutional network: `num_layers` same-padded
//! convolutions with ReLU between them and no downsampling, so the logits
//! have the input's spatial resolution and each pixel is classified from a
//! local receptive field. With the default three 3x3 layers that field is
//! 7x7 — big enough to use local texture, far too small to memorize scenes,
//! which keeps training cheap and forgetting dynamics visible.
//!
//! The forward and backward passes are written out explicitly against the
//! kernels in [`crate::tensor`]; there is no autodiff. Anything that adds to
//! the training objective beyond the data term implements [`PenaltyTerm`]
//! and returns its own hand-derived `(loss, gradient)` contribution, which
//! [`Model::loss_and_grads`] sums into the data gradient. The
//! finite-difference checker referees all of it in the tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};
use crate::tensor::{
    conv2d, conv2d_backward, masked_softmax_cross_entropy, relu, relu_backward, sgd_step,
    MaskTensor, ParamSet, Tensor,
};

/// On-disk checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Numeric precision of the model.
///
/// All arithmetic is f64 either way; `Single` additionally rounds
/// activations after every layer and parameters after initialization and
/// every update through f32, emulating a single-precision model with
/// deterministic, platform-independent results.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Double,
    Single,
}

/// Architecture and initialization of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input image channels.
    pub in_channels: usize,
    /// Channels of every hidden layer.
    pub hidden_channels: usize,
    /// Total convolution layers (the last one maps to class logits).
    pub num_layers: usize,
    /// Number of output classes.
    pub num_classes: usize,
    /// Square odd kernel size shared by all layers.
    pub kernel_size: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
    /// Numeric precision mode.
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            hidden_channels: 16,
            num_layers: 3,
            num_classes: 8,
            kernel_size: 3,
            init_seed: 0,
            precision: Precision::Double,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::config("model channels must be positive"));
        }
        if self.num_layers == 0 {
            return Err(Error::config("model needs at least one layer"));
        }
        if !(2..=254).contains(&self.num_classes) {
            return Err(Error::config(format!(
                "num_classes must be in [2, 254], got {}",
                self.num_classes
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// `(in, out)` channel pairs, one per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.num_layers)
            .map(|l| {
                let cin = if l == 0 {
                    self.in_channels
                } else {
                    self.hidden_channels
                };
                let cout = if l + 1 == self.num_layers {
                    self.num_classes
                } else {
                    self.hidden_channels
                };
                (cin, cout)
            })
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        self.layer_dims()
            .iter()
            .map(|(cin, cout)| k2 * cin * cout + cout)
            .sum()
    }
}

/// A term added to the training objective on top of the data loss.
///
/// Implementations return their loss value and gradient with respect to the
/// parameters; the gradient must have the same structure as `params`.
pub trait PenaltyTerm {
    fn eval(&self, cfg: &ModelConfig, params: &ParamSet) -> Result<(f64, ParamSet)>;
}

/// An immutable deep copy of a model at a point in time.
///
/// Snapshots back penalty anchors, distillation teachers, and evaluation;
/// mutating the live model never changes an existing snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    config: ModelConfig,
    params: ParamSet,
}

impl ModelSnapshot {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Forward pass of the frozen parameters.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        forward_with(&self.config, &self.params, images)
    }

    /// Per-pixel argmax predictions of the frozen parameters.
    pub fn predict(&self, images: &Tensor) -> Result<MaskTensor> {
        argmax_predictions(&self.forward(images)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    config: ModelConfig,
    params: ParamSet,
}

/// The live, trainable model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamSet,
}

impl Model {
    /// Initialize with He-normal weights and zero biases from the config's
    /// seed. Initialization is a pure function of the config.
    pub fn init(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let mut params = ParamSet::new();
        for (l, (cin, cout)) in cfg.layer_dims().into_iter().enumerate() {
            let mut rng = rng_for(cfg.init_seed, Stream::ModelInit, l as u64);
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let dist = rand_distr::Normal::new(0.0, std)
                .map_err(|e| Error::config(format!("bad init distribution: {e}")))?;
            let mut weight = Tensor::zeros(&[cout, cin, k, k]);
            for v in weight.values_mut() {
                *v = rand_distr::Distribution::sample(&dist, &mut rng);
            }
            params.register(&format!("conv{l}.weight"), weight)?;
            params.register(&format!("conv{l}.bias"), Tensor::zeros(&[cout]))?;
        }
        if cfg.precision == Precision::Single {
            params.round_to_single();
        }
        Ok(Model { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Class logits for a batch of images (`N x in_channels x H x W`).
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        forward_with(&self.cfg, &self.params, images)
    }

    /// Per-pixel argmax predictions for a batch of images.
    pub fn predict(&self, images: &Tensor) -> Result<MaskTensor> {
        argmax_predictions(&self.forward(images)?)
    }

    /// Mean masked cross-entropy on a labeled batch and its gradient.
    pub fn data_loss_and_grads(
        &self,
        images: &Tensor,
        labels: &MaskTensor,
    ) -> Result<(f64, ParamSet)> {
        data_loss_and_grads_with(&self.cfg, &self.params, images, labels)
    }

    /// Full training objective: data loss plus every extra term.
    ///
    /// With an empty term list this is exactly [`Model::data_loss_and_grads`]
    /// — no zero-valued additions are performed, so degenerate strategies
    /// that contribute no terms behave bit-identically to plain training.
    pub fn loss_and_grads(
        &self,
        images: &Tensor,
        labels: &MaskTensor,
        extra: &[Box<dyn PenaltyTerm>],
    ) -> Result<(f64, ParamSet)> {
        let (mut total, mut grads) = self.data_loss_and_grads(images, labels)?;
        for term in extra {
            let (l, g) = term.eval(&self.cfg, &self.params)?;
            total += l;
            grads.add_scaled(&g, 1.0)?;
        }
        if !total.is_finite() {
            return Err(Error::numeric("training loss is not finite"));
        }
        if !grads.is_finite() {
            return Err(Error::numeric("training gradient is not finite"));
        }
        Ok((total, grads))
    }

    /// Apply one SGD step in place. Under single precision the updated
    /// parameters are rounded back onto the f32 grid, mirroring what a
    /// 32-bit optimizer would hold.
    pub fn apply_sgd(&mut self, grads: &ParamSet, lr: f64) -> Result<()> {
        sgd_step(&mut self.params, grads, lr)?;
        if self.cfg.precision == Precision::Single {
            self.params.round_to_single();
        }
        Ok(())
    }

    /// Freeze the current parameters into an immutable snapshot.
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            config: self.cfg.clone(),
            params: self.params.clone(),
        }
    }

    /// Rebuild a live model from a snapshot.
    pub fn from_snapshot(snap: &ModelSnapshot) -> Model {
        Model {
            cfg: snap.config().clone(),
            params: snap.params().clone(),
        }
    }

    /// Write a versioned checkpoint. The JSON round-trip is value-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = CheckpointDoc {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            params: self.params.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    /// Load a checkpoint written by [`Model::save`].
    pub fn load(path: &Path) -> Result<Model> {
        let doc: CheckpointDoc = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                doc.version
            )));
        }
        doc.config.validate()?;
        let model = Model {
            cfg: doc.config,
            params: doc.params,
        };
        let fresh = Model::init(model.cfg.clone())?;
        if !model.params.same_structure(fresh.params()) {
            return Err(Error::config(
                "checkpoint parameters do not match the declared architecture",
            ));
        }
        Ok(model)
    }
}

/// Activations recorded during a forward pass, enough to run backward.
struct ForwardTrace {
    /// Pre-activation outputs of every layer (the last entry is the logits).
    zs: Vec<Tensor>,
    /// Post-ReLU activations of every non-final layer.
    acts: Vec<Tensor>,
}

fn forward_trace(cfg: &ModelConfig, params: &ParamSet, images: &Tensor) -> Result<ForwardTrace> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(Error::config(format!(
            "model expects N x {} x H x W images, got {shape:?}",
            cfg.in_channels
        )));
    }
    let single = cfg.precision == Precision::Single;
    let mut zs = Vec::with_capacity(cfg.num_layers);
    let mut acts = Vec::with_capacity(cfg.num_layers.saturating_sub(1));
    for l in 0..cfg.num_layers {
        let w = params
            .get(&format!("conv{l}.weight"))
            .ok_or_else(|| Error::config(format!("missing parameter conv{l}.weight")))?;
        let b = params
            .get(&format!("conv{l}.bias"))
            .ok_or_else(|| Error::config(format!("missing parameter conv{l}.bias")))?;
        let input = if l == 0 {
            images
        } else {
            acts.last().expect("previous activation present")
        };
        let mut z = conv2d(input, w, b)?;
        if single {
            z.round_to_single();
        }
        if l + 1 < cfg.num_layers {
            acts.push(relu(&z));
        }
        zs.push(z);
    }
    Ok(ForwardTrace { zs, acts })
}

/// Forward pass through arbitrary parameters (used by penalty terms that
/// evaluate teachers or probe perturbed parameter sets).
pub fn forward_with(cfg: &ModelConfig, params: &ParamSet, images: &Tensor) -> Result<Tensor> {
    let mut trace = forward_trace(cfg, params, images)?;
    Ok(trace.zs.pop().expect("at least one layer"))
}

/// Backpropagate a logits gradient through the trace to parameter space.
fn backward_from_logits(
    cfg: &ModelConfig,
    params: &ParamSet,
    images: &Tensor,
    trace: &ForwardTrace,
    dlogits: &Tensor,
) -> Result<ParamSet> {
    let mut grads = params.zeros_like();
    let mut upstream = dlogits.clone();
    for l in (0..cfg.num_layers).rev() {
        let w = params
            .get(&format!("conv{l}.weight"))
            .expect("weight present");
        let input = if l == 0 { images } else { &trace.acts[l - 1] };
        let (dinput, dw, db) = conv2d_backward(input, w, &upstream)?;
        *grads
            .get_mut(&format!("conv{l}.weight"))
            .expect("weight slot") = dw;
        *grads.get_mut(&format!("conv{l}.bias")).expect("bias slot") = db;
        if l > 0 {
            // Gradient w.r.t. the previous pre-activation.
            upstream = relu_backward(&trace.zs[l - 1], &dinput)?;
        }
    }
    Ok(grads)
}

/// Forward once, let the caller turn the logits into a loss value and a
/// logits gradient, then backpropagate — one forward and one backward pass
/// no matter how many loss terms read the logits. This is how objectives
/// other than plain cross-entropy (distillation, importance probes) reach
/// parameter space.
pub fn loss_and_grads_from_logits<F>(
    cfg: &ModelConfig,
    params: &ParamSet,
    images: &Tensor,
    loss_fn: F,
) -> Result<(f64, ParamSet)>
where
    F: FnOnce(&Tensor) -> Result<(f64, Tensor)>,
{
    let trace = forward_trace(cfg, params, images)?;
    let logits = trace.zs.last().expect("at least one layer");
    let (loss, dlogits) = loss_fn(logits)?;
    if dlogits.shape() != logits.shape() {
        return Err(Error::config(format!(
            "logits gradient shape {:?} does not match logits {:?}",
            dlogits.shape(),
            logits.shape()
        )));
    }
    let grads = backward_from_logits(cfg, params, images, &trace, &dlogits)?;
    Ok((loss, grads))
}

/// Data loss and gradient for arbitrary parameters.
pub fn data_loss_and_grads_with(
    cfg: &ModelConfig,
    params: &ParamSet,
    images: &Tensor,
    labels: &MaskTensor,
) -> Result<(f64, ParamSet)> {
    loss_and_grads_from_logits(cfg, params, images, |logits| {
        masked_softmax_cross_entropy(logits, labels)
    })
}

/// Per-pixel argmax over the class axis of `N x C x H x W` logits.
///
/// Ties resolve to the lowest class index, so predictions are deterministic.
pub fn argmax_predictions(logits: &Tensor) -> Result<MaskTensor> {
    let shape = logits.shape();
    if shape.len() != 4 {
        return Err(Error::config(format!(
            "argmax expects 4-d logits, got {shape:?}"
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c > 254 {
        return Err(Error::config(format!(
            "argmax supports at most 254 classes, got {c}"
        )));
    }
    let plane = h * w;
    let lv = logits.values();
    let mut out = MaskTensor::filled(&[n, h, w], 0);
    let ov = out.values_mut();
    for ni in 0..n {
        for p in 0..plane {
            let base = ni * c * plane + p;
            let mut best = 0usize;
            let mut best_v = lv[base];
            for ci in 1..c {
                let v = lv[base + ci * plane];
                if v > best_v {
                    best_v = v;
                    best = ci;
                }
            }
            ov[ni * plane + p] = best as u8;
        }
    }
    Ok(out)
}
