//! Frozen-backbone classification: feature extraction through a freeze-
//! tracked encoder, a two-layer dropout head, and focal loss.

use ndarray::{Array2, Array4, ArrayViewD, ArrayViewMutD, Ix2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layer::{Block, Layer, Linear, RunMode};
use crate::nn::params::{checksum_params, GradStore, Model};
use crate::vae::Encoder;

/// Shape of the classification head: two affine layers with a ReLU and
/// dropout between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub dropout_rate: f64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            in_dim: 768,
            hidden_dim: 256,
            out_dim: 3,
            dropout_rate: 0.5,
        }
    }
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::InvalidConfig(
                "head dimensions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must lie in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Focal-loss parameters: focusing exponent and per-class weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: Vec<f64>,
}

impl FocalParams {
    pub fn new(gamma: f64, alpha: Vec<f64>) -> Result<Self> {
        let p = Self { gamma, alpha };
        p.validate()?;
        Ok(p)
    }

    /// Uniform weights: with `gamma` 0 this is plain cross-entropy.
    pub fn uniform(gamma: f64, classes: usize) -> Self {
        Self {
            gamma,
            alpha: vec![1.0; classes],
        }
    }

    /// Weights proportional to inverse class frequency, rescaled to mean 1
    /// so the overall loss magnitude stays comparable to unweighted CE.
    pub fn inverse_frequency(gamma: f64, class_counts: &[usize]) -> Result<Self> {
        if class_counts.contains(&0) {
            return Err(Error::InvalidConfig(
                "inverse-frequency weights need at least one sample per class".into(),
            ));
        }
        let raw: Vec<f64> = class_counts.iter().map(|&c| 1.0 / c as f64).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        Self::new(gamma, raw.iter().map(|r| r / mean).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "focal gamma must be a nonnegative finite number, got {}",
                self.gamma
            )));
        }
        if self.alpha.is_empty() || self.alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::InvalidConfig(
                "focal alpha entries must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Keeps p_t in the open unit interval so logs and (1-p)^(gamma-1) stay finite.
const PROB_FLOOR: f64 = 1e-12;

fn check_focal_inputs(logits: &Array2<f64>, targets: &[usize], params: &FocalParams) -> Result<()> {
    params.validate()?;
    if logits.shape()[1] != params.alpha.len() {
        return Err(Error::ShapeMismatch {
            context: "focal alpha".into(),
            expected: format!("{} classes", logits.shape()[1]),
            actual: format!("{} weights", params.alpha.len()),
        });
    }
    if logits.shape()[0] != targets.len() {
        return Err(Error::ShapeMismatch {
            context: "focal targets".into(),
            expected: format!("{} rows", logits.shape()[0]),
            actual: format!("{} targets", targets.len()),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    if let Some(t) = targets.iter().find(|t| **t >= logits.shape()[1]) {
        return Err(Error::InvalidConfig(format!(
            "target class {t} out of range for {} classes",
            logits.shape()[1]
        )));
    }
    Ok(())
}

/// Mean over the batch of -alpha_t (1 - p_t)^gamma ln(p_t) with
/// p_t = softmax(logits)[target].
pub fn focal_loss(logits: &Array2<f64>, targets: &[usize], params: &FocalParams) -> Result<f64> {
    check_focal_inputs(logits, targets, params)?;
    let probs = softmax(logits);
    let mut acc = 0.0;
    for (row, &t) in probs.rows().into_iter().zip(targets) {
        let pt = row[t].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        acc += -params.alpha[t] * (1.0 - pt).powf(params.gamma) * pt.ln();
    }
    Ok(acc / targets.len() as f64)
}

/// Focal loss plus its gradient with respect to the logits.
pub fn focal_loss_grad(
    logits: &Array2<f64>,
    targets: &[usize],
    params: &FocalParams,
) -> Result<(f64, Array2<f64>)> {
    check_focal_inputs(logits, targets, params)?;
    let probs = softmax(logits);
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros(logits.raw_dim());
    for (i, &t) in targets.iter().enumerate() {
        let row = probs.row(i);
        let pt = row[t].clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let one_m = 1.0 - pt;
        loss += -params.alpha[t] * one_m.powf(params.gamma) * pt.ln();
        // dFL/dp_t; the gamma term vanishes identically at gamma = 0
        let mut dl_dpt = -params.alpha[t] * one_m.powf(params.gamma) / pt;
        if params.gamma > 0.0 {
            dl_dpt += params.alpha[t] * params.gamma * one_m.powf(params.gamma - 1.0) * pt.ln();
        }
        // dp_t/dl_j = p_t (delta_tj - p_j)
        for (j, &pj) in row.iter().enumerate() {
            let delta = if j == t { 1.0 } else { 0.0 };
            grad[[i, j]] = dl_dpt * pt * (delta - pj) / n;
        }
    }
    Ok((loss / n, grad))
}

/// The two-layer classification head. Parameter paths are `0/{w,b}` for
/// the hidden layer and `3/{w,b}` for the output layer.
#[derive(Debug, Clone)]
pub struct Head {
    pub spec: HeadSpec,
    pub block: Block,
}

impl Head {
    pub fn new(spec: HeadSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let block = Block::new(vec![
            Layer::Linear(Linear::new(spec.in_dim, spec.hidden_dim, rng)),
            Layer::Relu,
            Layer::Dropout(spec.dropout_rate),
            Layer::Linear(Linear::new(spec.hidden_dim, spec.out_dim, rng)),
        ]);
        Ok(Self { spec, block })
    }

    /// All-zero weights; useful as a fixed point for tests.
    pub fn zeros(spec: HeadSpec) -> Result<Self> {
        spec.validate()?;
        let block = Block::new(vec![
            Layer::Linear(Linear::zeros(spec.in_dim, spec.hidden_dim)),
            Layer::Relu,
            Layer::Dropout(spec.dropout_rate),
            Layer::Linear(Linear::zeros(spec.hidden_dim, spec.out_dim)),
        ]);
        Ok(Self { spec, block })
    }

    fn check_input(&self, features: &Array2<f64>) -> Result<()> {
        if features.shape()[1] != self.spec.in_dim {
            return Err(Error::ShapeMismatch {
                context: "head input".into(),
                expected: format!("[N, {}]", self.spec.in_dim),
                actual: format!("{:?}", features.shape()),
            });
        }
        Ok(())
    }

    /// Logits for a feature batch. Train mode applies dropout and needs
    /// an rng; eval mode is deterministic.
    pub fn classify(
        &self,
        features: &Array2<f64>,
        mode: RunMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Array2<f64>> {
        self.check_input(features)?;
        let y = self.block.forward(features.clone().into_dyn(), mode, rng);
        Ok(y.into_dimensionality::<Ix2>().unwrap())
    }

    pub fn forward_cached(
        &self,
        features: &Array2<f64>,
        rng: &mut ChaCha8Rng,
        caches: &mut Vec<crate::nn::layer::Cache>,
    ) -> Result<Array2<f64>> {
        self.check_input(features)?;
        let y = self.block.forward_cached(
            features.clone().into_dyn(),
            RunMode::Train,
            Some(rng),
            caches,
        );
        Ok(y.into_dimensionality::<Ix2>().unwrap())
    }

    pub fn param_count(&self) -> usize {
        self.spec.in_dim * self.spec.hidden_dim
            + self.spec.hidden_dim
            + self.spec.hidden_dim * self.spec.out_dim
            + self.spec.out_dim
    }
}

impl Model for Head {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
        self.block.visit("", f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
        self.block.visit_mut("", f);
    }
}

/// Whether backbone parameters may receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FreezeState {
    /// Freshly built, never frozen; not usable as a feature extractor.
    Trainable,
    Frozen,
    /// Last stage (and its normalization) trainable, everything earlier frozen.
    FinalStageTrainable,
}

/// An encoder plus freeze bookkeeping. Gradient exclusion is enforced by
/// `grad_filter`; the checksum recorded at freeze time supports integrity
/// audits across a training run.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub encoder: Encoder,
    state: FreezeState,
    frozen_checksum: Option<String>,
}

impl Backbone {
    pub fn new(encoder: Encoder) -> Self {
        Self {
            encoder,
            state: FreezeState::Trainable,
            frozen_checksum: None,
        }
    }

    pub fn state(&self) -> FreezeState {
        self.state
    }

    /// Checksum recorded by the most recent `freeze` call.
    pub fn frozen_checksum(&self) -> Option<&str> {
        self.frozen_checksum.as_deref()
    }

    /// Marks every parameter frozen and records the integrity checksum.
    /// Idempotent: weights are untouched, so refreezing recomputes the
    /// same digest.
    pub fn freeze(&mut self) -> String {
        let sum = checksum_params(&self.encoder, "");
        self.frozen_checksum = Some(sum.clone());
        self.state = FreezeState::Frozen;
        sum
    }

    /// Makes the final stage trainable again. Requires a prior `freeze`.
    pub fn unfreeze_final_stage(&mut self) -> Result<()> {
        if self.frozen_checksum.is_none() {
            return Err(Error::NeverFrozen);
        }
        self.state = FreezeState::FinalStageTrainable;
        Ok(())
    }

    /// Section names whose parameters may currently train.
    pub fn trainable_sections(&self) -> Vec<String> {
        match self.state {
            FreezeState::Trainable => self
                .encoder
                .net
                .sections
                .iter()
                .map(|(n, _)| n.clone())
                .collect(),
            FreezeState::Frozen => Vec::new(),
            FreezeState::FinalStageTrainable => self.encoder.final_stage_sections(),
        }
    }

    /// True if the encoder-relative parameter path may receive updates.
    pub fn grad_filter(&self, path: &str) -> bool {
        match self.state {
            FreezeState::Trainable => true,
            FreezeState::Frozen => false,
            FreezeState::FinalStageTrainable => self
                .encoder
                .final_stage_sections()
                .iter()
                .any(|s| path.starts_with(&format!("{s}/"))),
        }
    }

    /// Pooled features for a batch. The backbone must have been frozen;
    /// a never-frozen backbone is a misuse and errors.
    pub fn extract_features(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        if self.state == FreezeState::Trainable {
            return Err(Error::UnfrozenBackbone);
        }
        self.encoder.forward(x)
    }
}

/// Backbone and head as one parameter tree: `backbone/...` and `head/...`.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub backbone: Backbone,
    pub head: Head,
}

impl Classifier {
    pub fn new(backbone: Backbone, head: Head) -> Self {
        Self { backbone, head }
    }

    /// Trainable scalars under the current freeze state.
    pub fn trainable_param_count(&self) -> usize {
        let mut n = self.head.param_count();
        self.backbone.encoder.visit_params(&mut |path, v| {
            if self.backbone.grad_filter(path) {
                n += v.len();
            }
        });
        n
    }

    /// Drops gradients for frozen backbone parameters; head gradients and
    /// trainable backbone gradients pass through.
    pub fn retain_trainable(&self, grads: &mut GradStore) {
        grads.retain(|path| match path.strip_prefix("backbone/") {
            Some(rest) => self.backbone.grad_filter(rest),
            None => true,
        });
    }
}

impl Model for Classifier {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ArrayViewD<f64>)) {
        self.backbone.encoder.net.visit("backbone/", f);
        self.head.block.visit("head", f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<f64>)) {
        self.backbone.encoder.net.visit_mut("backbone/", f);
        self.head.block.visit_mut("head", f);
    }
}
