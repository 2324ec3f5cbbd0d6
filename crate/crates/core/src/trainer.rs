//! A small feed-forward trainer: an MLP feature map followed by a bias-free
//! linear classifier that is either learned or anchored to fixed prototypes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{self, LossSpec};
use crate::matrix::{axpy, norm, Matrix};
use crate::prototypes::{cosine_lr, sgd_update, PrototypeSet};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => libm::tanh(x),
        }
    }

    /// Derivative given the pre-activation `a` and the output `h`.
    fn slope(self, a: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClassifierConfig {
    Learnable { k: usize, seed: u64 },
    Anchored { prototypes: PrototypeSet },
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    pub classifier: ClassifierConfig,
}

impl ModelConfig {
    pub fn k(&self) -> usize {
        match &self.classifier {
            ClassifierConfig::Learnable { k, .. } => *k,
            ClassifierConfig::Anchored { prototypes } => prototypes.k(),
        }
    }

    pub fn is_anchored(&self) -> bool {
        matches!(self.classifier, ClassifierConfig::Anchored { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::DimMismatch("all layer widths must be at least 1".into()));
        }
        if self.hidden_dims.is_empty() && self.input_dim != self.feature_dim {
            return Err(Error::DimMismatch(format!(
                "without hidden layers the features are the inputs, so input_dim {} must equal feature_dim {}",
                self.input_dim, self.feature_dim
            )));
        }
        match &self.classifier {
            ClassifierConfig::Anchored { prototypes } if prototypes.d() != self.feature_dim => {
                Err(Error::DimMismatch(format!(
                    "prototype dimension {} differs from feature_dim {}",
                    prototypes.d(),
                    self.feature_dim
                )))
            }
            ClassifierConfig::Learnable { k, .. } if *k < 2 => {
                Err(Error::DimMismatch(format!("need at least two classes, got {k}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub epochs: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub cosine_annealing: bool,
    /// Period of the cosine schedule; the epoch count when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<u64>,
    /// Reseeds the shuffling generator when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_momentum() -> f64 {
    0.9
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.t_max == Some(0) {
            return Err(Error::config("t_max must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate used during epoch `t` of a run.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.cosine_annealing {
            cosine_lr(self.learning_rate, t, self.t_max.unwrap_or(self.epochs).max(1))
        } else {
            self.learning_rate
        }
    }
}

/// `weights` is `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Dense {
        Dense {
            weights: Matrix::zeros(self.weights.rows(), self.weights.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut out = x.mul_transpose(&self.weights);
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        out
    }
}

/// Feature layers in forward order followed by the classifier (`k x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub layers: Vec<Dense>,
    pub classifier: Matrix,
}

impl Parameters {
    fn zeros_like(&self) -> Parameters {
        Parameters {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
            classifier: Matrix::zeros(self.classifier.rows(), self.classifier.cols()),
        }
    }
}

/// Position of a ChaCha generator, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(r: &Rng) -> RngState {
        RngState {
            seed: r.get_seed(),
            stream: r.get_stream(),
            word_pos: r.get_word_pos(),
        }
    }

    fn restore(&self) -> Rng {
        let mut r = Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    config: ModelConfig,
    params: Parameters,
    momentum: Parameters,
    epoch: u64,
    rng: Rng,
}

impl TrainState {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &Parameters {
        &self.params
    }

    pub fn momentum(&self) -> &Parameters {
        &self.momentum
    }

    pub fn classifier(&self) -> &Matrix {
        &self.params.classifier
    }

    pub fn is_anchored(&self) -> bool {
        self.config.is_anchored()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// Rebuild a state from stored parts, checking every shape against the
    /// config. Missing momentum starts at zero.
    pub fn from_parts(
        config: ModelConfig,
        params: Parameters,
        momentum: Option<Parameters>,
        epoch: u64,
        rng_state: &RngState,
    ) -> Result<TrainState> {
        config.validate()?;
        let template = init_model(&config, 0)?;
        check_like(&template.params, &params)?;
        if let ClassifierConfig::Anchored { prototypes } = &config.classifier {
            if prototypes.vectors() != &params.classifier {
                return Err(Error::IncompatibleSpec("stored classifier differs from the anchored prototypes".into()));
            }
        }
        let momentum = match momentum {
            Some(m) => {
                check_like(&template.params, &m)?;
                m
            }
            None => params.zeros_like(),
        };
        Ok(TrainState {
            config,
            params,
            momentum,
            epoch,
            rng: rng_state.restore(),
        })
    }
}

fn check_like(want: &Parameters, got: &Parameters) -> Result<()> {
    let same = |a: &Matrix, b: &Matrix| a.rows() == b.rows() && a.cols() == b.cols();
    let ok = want.layers.len() == got.layers.len()
        && want
            .layers
            .iter()
            .zip(&got.layers)
            .all(|(a, b)| same(&a.weights, &b.weights) && a.bias.len() == b.bias.len())
        && same(&want.classifier, &got.classifier);
    if ok {
        Ok(())
    } else {
        Err(Error::DimMismatch("stored parameters do not match the model config".into()))
    }
}

/// Fan-in scaled Gaussian initialization with zero biases.
///
/// Hidden weights use variance `2/fan_in` for ReLU and `1/fan_in` for tanh;
/// the final feature layer and a learnable classifier use `1/fan_in`. An
/// anchored classifier is copied verbatim.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<TrainState> {
    cfg.validate()?;
    let mut r = rng::seeded(seed);
    let mut layers = Vec::new();
    if !cfg.hidden_dims.is_empty() {
        let mut widths = vec![cfg.input_dim];
        widths.extend_from_slice(&cfg.hidden_dims);
        widths.push(cfg.feature_dim);
        let last = widths.len() - 2;
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let gain = if l < last && cfg.activation == Activation::Relu { 2.0 } else { 1.0 };
            layers.push(Dense {
                weights: gaussian(&mut r, fan_out, fan_in, libm::sqrt(gain / fan_in as f64)),
                bias: vec![0.0; fan_out],
            });
        }
    }
    let classifier = match &cfg.classifier {
        ClassifierConfig::Anchored { prototypes } => prototypes.vectors().clone(),
        ClassifierConfig::Learnable { k, seed } => {
            let mut cr = rng::seeded(*seed);
            gaussian(&mut cr, *k, cfg.feature_dim, libm::sqrt(1.0 / cfg.feature_dim as f64))
        }
    };
    let params = Parameters { layers, classifier };
    Ok(TrainState {
        config: cfg.clone(),
        momentum: params.zeros_like(),
        params,
        epoch: 0,
        rng: rng::seeded(rng::derive(seed, SHUFFLE_SALT)),
    })
}

const SHUFFLE_SALT: u64 = 0x5348_5546;

fn gaussian(r: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut *r)).collect()).expect("sized")
}

struct Trace {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Matrix>,
}

fn forward(state: &TrainState, x: &Matrix, keep: bool) -> (Matrix, Option<Trace>) {
    let layers = &state.params.layers;
    if layers.is_empty() {
        return (x.clone(), keep.then(|| Trace { inputs: vec![], pre: vec![] }));
    }
    let act = state.config.activation;
    let mut inputs = Vec::new();
    let mut pre = Vec::new();
    let mut h = x.clone();
    for (l, layer) in layers.iter().enumerate() {
        let a = layer.forward(&h);
        let next = if l + 1 < layers.len() {
            let mut out = a.clone();
            out.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            if keep {
                pre.push(a);
            }
            out
        } else {
            a
        };
        if keep {
            inputs.push(h);
        }
        h = next;
    }
    (h, keep.then_some(Trace { inputs, pre }))
}

fn backward(state: &TrainState, trace: &Trace, grad_out: Matrix) -> Vec<Dense> {
    let layers = &state.params.layers;
    let act = state.config.activation;
    let mut grads: Vec<Dense> = layers.iter().map(Dense::zeros_like).collect();
    let mut delta = grad_out;
    for l in (0..layers.len()).rev() {
        let input = &trace.inputs[l];
        let w = &layers[l].weights;
        let g = &mut grads[l];
        let mut down = Matrix::zeros(delta.rows(), w.cols());
        for r in 0..delta.rows() {
            let dr = delta.row(r);
            for (o, &c) in dr.iter().enumerate() {
                if c != 0.0 {
                    axpy(c, input.row(r), g.weights.row_mut(o));
                    axpy(c, w.row(o), down.row_mut(r));
                }
                g.bias[o] += c;
            }
        }
        if l > 0 {
            let a = &trace.pre[l - 1];
            for ((dv, av), hv) in down.as_mut_slice().iter_mut().zip(a.as_slice()).zip(input.as_slice()) {
                *dv *= act.slope(*av, *hv);
            }
        }
        delta = down;
    }
    grads
}

/// Penultimate features `z = phi(x)` for each input row.
pub fn extract_features(state: &TrainState, inputs: &Matrix) -> Result<Matrix> {
    if inputs.cols() != state.config.input_dim {
        return Err(Error::shape(format!(
            "inputs have {} columns, model expects {}",
            inputs.cols(),
            state.config.input_dim
        )));
    }
    Ok(forward(state, inputs, false).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub classes: Vec<usize>,
    pub probabilities: Matrix,
}

/// Argmax and softmax of the prediction logits under `loss`'s scale and
/// normalization.
pub fn predict(state: &TrainState, inputs: &Matrix, loss: &LossSpec) -> Result<Prediction> {
    let z = extract_features(state, inputs)?;
    predict_from_features(&z, state.classifier(), loss)
}

fn predict_from_features(z: &Matrix, w: &Matrix, loss: &LossSpec) -> Result<Prediction> {
    let mut probs = losses::prediction_logits(loss, z, w)?;
    let mut classes = Vec::with_capacity(z.rows());
    for r in 0..probs.rows() {
        let row = probs.row_mut(r);
        classes.push(argmax(row));
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - m);
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(Prediction {
        classes,
        probabilities: probs,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based count of completed epochs.
    pub epoch: u64,
    pub train_loss: f64,
    /// Against the observed (possibly noisy) training labels.
    pub train_acc: f64,
    /// Against the clean labels of the evaluation set.
    pub eval_acc: f64,
    /// `None` for classes absent from the evaluation set.
    pub per_class_acc: Vec<Option<f64>>,
    pub min_sample_margin: f64,
    /// Largest sample margin on the training set.
    pub max_sample_margin: f64,
    pub mean_feature_norm: f64,
    pub mean_prototype_norm: f64,
    pub min_prototype_angle_deg: f64,
    pub learning_rate: f64,
}

/// Shuffled mini-batch SGD with momentum.
///
/// Weight decay applies to every learnable tensor (biases included). An
/// anchored classifier receives no update. Metrics are measured on the full
/// training and evaluation sets after each epoch.
pub fn train(
    mut state: TrainState,
    data: &LabeledDataset,
    loss: &LossSpec,
    opt: &OptimConfig,
    eval: &LabeledDataset,
) -> Result<(TrainState, Vec<EpochMetrics>)> {
    loss.validate()?;
    opt.validate()?;
    if loss.anchored != state.is_anchored() {
        return Err(Error::IncompatibleSpec(format!(
            "loss anchored = {} but classifier is {}",
            loss.anchored,
            if state.is_anchored() { "anchored" } else { "learnable" }
        )));
    }
    for (name, set) in [("training", data), ("evaluation", eval)] {
        if set.input_dim() != state.config.input_dim || set.k() != state.config.k() {
            return Err(Error::DimMismatch(format!(
                "{name} set has input_dim {} and k {}, model has {} and {}",
                set.input_dim(),
                set.k(),
                state.config.input_dim,
                state.config.k()
            )));
        }
    }
    if data.is_empty() || eval.is_empty() {
        return Err(Error::shape("training and evaluation sets must be nonempty"));
    }
    if opt.epochs == 0 {
        return Ok((state, Vec::new()));
    }
    if let Some(seed) = opt.seed {
        state.rng = rng::seeded(rng::derive(seed, SHUFFLE_SALT));
    }

    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(opt.epochs as usize);
    for t in 0..opt.epochs {
        let lr = opt.lr_at(t);
        order.shuffle(&mut state.rng);
        for batch in order.chunks(opt.batch_size) {
            let x = data.features().select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
            let (z, trace) = forward(&state, &x, true);
            let out = losses::evaluate(loss, &z, &y, state.classifier())?;
            let grads = backward(&state, &trace.expect("kept"), out.grad_features);
            step(&mut state, &grads, &out.grad_prototypes, lr, opt);
        }
        state.epoch += 1;
        history.push(measure(&state, data, eval, loss, lr)?);
    }
    Ok((state, history))
}

fn step(state: &mut TrainState, grads: &[Dense], grad_w: &Matrix, lr: f64, opt: &OptimConfig) {
    let (mu, wd) = (opt.momentum, opt.weight_decay);
    let TrainState { params, momentum, .. } = state;
    for ((p, g), m) in params.layers.iter_mut().zip(grads).zip(momentum.layers.iter_mut()) {
        sgd_update(p.weights.as_mut_slice(), g.weights.as_slice(), m.weights.as_mut_slice(), lr, mu, wd);
        sgd_update(&mut p.bias, &g.bias, &mut m.bias, lr, mu, wd);
    }
    if !state.config.is_anchored() {
        sgd_update(
            params.classifier.as_mut_slice(),
            grad_w.as_slice(),
            momentum.classifier.as_mut_slice(),
            lr,
            mu,
            wd,
        );
    }
}

fn measure(state: &TrainState, data: &LabeledDataset, eval: &LabeledDataset, loss: &LossSpec, lr: f64) -> Result<EpochMetrics> {
    let w = state.classifier();
    let z = extract_features(state, data.features())?;
    let train_loss = losses::evaluate(loss, &z, data.labels(), w)?.loss;
    let train_pred = predict_from_features(&z, w, loss)?;
    let train_acc = accuracy(&train_pred.classes, data.labels());

    // margins are taken in the space the classifier sees
    let margin_z = if loss.feature_normalize { unit_rows(&z)? } else { z.clone() };
    let margins = analysis::sample_margins(&margin_z, data.labels(), w, loss.scale)?;

    let ze = extract_features(state, eval.features())?;
    let eval_pred = predict_from_features(&ze, w, loss)?;
    let truth = eval.true_labels();
    let k = state.config.k();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (p, &y) in eval_pred.classes.iter().zip(truth) {
        totals[y] += 1;
        hits[y] += usize::from(*p == y);
    }
    let per_class_acc = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();

    let mean = |m: &Matrix| m.iter_rows().map(norm).sum::<f64>() / m.rows() as f64;
    Ok(EpochMetrics {
        epoch: state.epoch,
        train_loss,
        train_acc,
        eval_acc: accuracy(&eval_pred.classes, truth),
        per_class_acc,
        min_sample_margin: margins.min_margin,
        max_sample_margin: margins.per_sample.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_feature_norm: mean(&z),
        mean_prototype_norm: mean(w),
        min_prototype_angle_deg: analysis::min_prototype_angle(w).unwrap_or(0.0),
        learning_rate: lr,
    })
}

fn unit_rows(z: &Matrix) -> Result<Matrix> {
    let mut out = z.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = norm(row);
        if n == 0.0 {
            return Err(Error::Normalization { row: r });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupThresholds {
    pub many_min: usize,
    pub few_max: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        GroupThresholds {
            many_min: 100,
            few_max: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl GroupThresholds {
    pub fn group_of(&self, train_count: usize) -> Group {
        if train_count > self.many_min {
            Group::Many
        } else if train_count < self.few_max {
            Group::Few
        } else {
            Group::Medium
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub group: Group,
    pub train_count: usize,
    pub eval_count: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedAccuracy {
    pub thresholds: GroupThresholds,
    /// Mean per-class accuracy within a group; `None` when no class of the
    /// group has evaluation samples.
    pub many_acc: Option<f64>,
    pub medium_acc: Option<f64>,
    pub few_acc: Option<f64>,
    /// Sample accuracy over the whole evaluation set.
    pub overall: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// Classes without evaluation samples, left out of their group mean.
    pub excluded_classes: Vec<usize>,
}

/// Accuracy per Many/Medium/Few group, grouping classes by `train_counts`.
pub fn evaluate_grouped(
    state: &TrainState,
    data: &LabeledDataset,
    loss: &LossSpec,
    train_counts: &[usize],
    thresholds: GroupThresholds,
) -> Result<GroupedAccuracy> {
    let k = state.config.k();
    if train_counts.len() != k || data.k() != k {
        return Err(Error::shape(format!("expected {k} classes")));
    }
    let pred = predict(state, data.features(), loss)?;
    let truth = data.true_labels();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (p, &y) in pred.classes.iter().zip(truth) {
        totals[y] += 1;
        hits[y] += usize::from(*p == y);
    }
    let per_class: Vec<ClassAccuracy> = (0..k)
        .map(|c| ClassAccuracy {
            class: c,
            group: thresholds.group_of(train_counts[c]),
            train_count: train_counts[c],
            eval_count: totals[c],
            accuracy: (totals[c] > 0).then(|| hits[c] as f64 / totals[c] as f64),
        })
        .collect();
    let group_mean = |g: Group| {
        let accs: Vec<f64> = per_class.iter().filter(|c| c.group == g).filter_map(|c| c.accuracy).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    };
    Ok(GroupedAccuracy {
        thresholds,
        many_acc: group_mean(Group::Many),
        medium_acc: group_mean(Group::Medium),
        few_acc: group_mean(Group::Few),
        overall: accuracy(&pred.classes, truth),
        excluded_classes: per_class.iter().filter(|c| c.eval_count == 0).map(|c| c.class).collect(),
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_blobs_split, BlobSpec};
    use crate::prototypes::generate_closed_form;

    fn blobs(k: usize, m: usize, per_class: usize, sep: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
        let spec = BlobSpec {
            k,
            m,
            per_class,
            center_scale: sep,
            noise_sigma: 1.0,
            seed,
        };
        synth_blobs_split(&spec, per_class / 2).unwrap()
    }

    fn learnable(m: usize, hidden: Vec<usize>, d: usize, k: usize) -> ModelConfig {
        ModelConfig {
            input_dim: m,
            hidden_dims: hidden,
            feature_dim: d,
            activation: Activation::Relu,
            classifier: ClassifierConfig::Learnable { k, seed: 5 },
        }
    }

    fn anchored(m: usize, hidden: Vec<usize>, k: usize, d: usize) -> ModelConfig {
        ModelConfig {
            input_dim: m,
            hidden_dims: hidden,
            feature_dim: d,
            activation: Activation::Relu,
            classifier: ClassifierConfig::Anchored {
                prototypes: generate_closed_form(k, d).unwrap(),
            },
        }
    }

    fn opt(epochs: u64) -> OptimConfig {
        OptimConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs,
            batch_size: 32,
            cosine_annealing: true,
            t_max: None,
            seed: None,
        }
    }

    #[test]
    fn init_is_deterministic_and_copies_anchors() {
        let cfg = anchored(6, vec![16, 16], 4, 8);
        let a = init_model(&cfg, 3).unwrap();
        let b = init_model(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let ClassifierConfig::Anchored { prototypes } = &cfg.classifier else { unreachable!() };
        assert_eq!(a.classifier().to_le_bytes(), prototypes.vectors().to_le_bytes());
        assert_ne!(init_model(&cfg, 4).unwrap().parameters(), a.parameters());
    }

    #[test]
    fn empty_hidden_is_identity() {
        let cfg = learnable(5, vec![], 5, 3);
        let s = init_model(&cfg, 0).unwrap();
        let x = Matrix::from_vec(2, 5, (0..10).map(f64::from).collect()).unwrap();
        assert_eq!(extract_features(&s, &x).unwrap(), x);
        assert!(matches!(init_model(&learnable(5, vec![], 4, 3), 0), Err(Error::DimMismatch(_))));
        assert!(matches!(init_model(&anchored(5, vec![8], 4, 6), 0).map(|_| ()), Ok(())));
        let mut bad = anchored(5, vec![8], 4, 6);
        bad.feature_dim = 7;
        assert!(matches!(init_model(&bad, 0), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn zero_epochs_leave_state_alone() {
        let (tr, te) = blobs(3, 4, 20, 3.0, 1);
        let s = init_model(&learnable(4, vec![8], 4, 3), 1).unwrap();
        let (after, hist) = train(s.clone(), &tr, &LossSpec::softmax(), &opt(0), &te).unwrap();
        assert!(hist.is_empty());
        assert_eq!(after, s);
    }

    #[test]
    fn separable_two_class_reaches_full_accuracy() {
        let (tr, te) = blobs(2, 4, 100, 6.0, 2);
        let s = init_model(&learnable(4, vec![16, 16], 4, 2), 2).unwrap();
        let (_, hist) = train(s, &tr, &LossSpec::softmax(), &opt(200), &te).unwrap();
        assert_eq!(hist.len(), 200);
        assert_eq!(hist.last().unwrap().train_acc, 1.0);
    }

    #[test]
    fn chance_accuracy_at_init() {
        let mut accs = Vec::new();
        for seed in 0..8 {
            let (tr, te) = blobs(10, 16, 40, 3.0, 100 + seed);
            let s = init_model(&learnable(16, vec![32, 32], 16, 10), seed).unwrap();
            let p = predict(&s, te.features(), &LossSpec::softmax()).unwrap();
            accs.push(accuracy(&p.classes, te.labels()));
            let _ = tr;
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.1).abs() <= 0.05, "{mean}");
    }

    #[test]
    fn anchored_training_keeps_classifier_bytes() {
        let (tr, te) = blobs(4, 6, 30, 4.0, 3);
        let cfg = anchored(6, vec![16], 4, 8);
        let s = init_model(&cfg, 3).unwrap();
        let before = s.classifier().to_le_bytes();
        let loss = LossSpec::softmax().fnpal(5.0);
        let (after, hist) = train(s, &tr, &loss, &opt(5), &te).unwrap();
        assert_eq!(after.classifier().to_le_bytes(), before);
        assert_eq!(after.epoch(), 5);
        for m in &hist {
            assert!(m.max_sample_margin <= 5.0 * 4.0 / 3.0 + 1e-9);
            assert!(m.min_sample_margin <= m.max_sample_margin);
            assert!((m.mean_prototype_norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_mode_must_match_loss() {
        let (tr, te) = blobs(4, 6, 10, 4.0, 3);
        let s = init_model(&learnable(6, vec![8], 8, 4), 0).unwrap();
        let err = train(s.clone(), &tr, &LossSpec::nsl(), &opt(1), &te).unwrap_err();
        assert!(matches!(err, Error::IncompatibleSpec(_)));
        let err = train(s, &tr, &LossSpec::nsl().anchored(false), &opt(1), &te).unwrap_err();
        assert_eq!(err, Error::Anchoring);
        let a = init_model(&anchored(6, vec![8], 4, 8), 0).unwrap();
        assert!(matches!(train(a, &tr, &LossSpec::softmax(), &opt(1), &te), Err(Error::IncompatibleSpec(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, te) = blobs(3, 4, 30, 3.0, 9);
        let cfg = learnable(4, vec![12], 6, 3);
        let run = || train(init_model(&cfg, 1).unwrap(), &tr, &LossSpec::softmax(), &opt(4), &te).unwrap();
        let (sa, ha) = run();
        let (sb, hb) = run();
        assert_eq!(ha, hb);
        assert_eq!(sa, sb);
    }

    /// Finite-difference check of the backward pass through the MLP.
    #[test]
    fn backward_matches_finite_differences() {
        for act in [Activation::Relu, Activation::Tanh] {
            let (tr, _) = blobs(3, 4, 4, 2.0, 4);
            let mut cfg = learnable(4, vec![5, 6], 3, 3);
            cfg.activation = act;
            let state = init_model(&cfg, 8).unwrap();
            let loss = LossSpec::softmax();
            let objective = |s: &TrainState| {
                let (z, _) = forward(s, tr.features(), false);
                losses::evaluate(&loss, &z, tr.labels(), s.classifier()).unwrap().loss
            };
            let (z, trace) = forward(&state, tr.features(), true);
            let out = losses::evaluate(&loss, &z, tr.labels(), state.classifier()).unwrap();
            let grads = backward(&state, &trace.unwrap(), out.grad_features);
            let h = 1e-6;
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            for l in 0..grads.len() {
                for idx in 0..grads[l].weights.as_slice().len() {
                    let mut up = state.clone();
                    up.params.layers[l].weights.as_mut_slice()[idx] += h;
                    let mut dn = state.clone();
                    dn.params.layers[l].weights.as_mut_slice()[idx] -= h;
                    numeric.push((objective(&up) - objective(&dn)) / (2.0 * h));
                    analytic.push(grads[l].weights.as_slice()[idx]);
                }
                for idx in 0..grads[l].bias.len() {
                    let mut up = state.clone();
                    up.params.layers[l].bias[idx] += h;
                    let mut dn = state.clone();
                    dn.params.layers[l].bias[idx] -= h;
                    numeric.push((objective(&up) - objective(&dn)) / (2.0 * h));
                    analytic.push(grads[l].bias[idx]);
                }
            }
            let err = losses::relative_error(&analytic, &numeric);
            assert!(err < 1e-6, "{act:?}: {err}");
        }
    }

    #[test]
    fn prediction_properties() {
        let cfg = anchored(8, vec![], 4, 8);
        let s = init_model(&cfg, 0).unwrap();
        let w = s.classifier().clone();
        let p = predict(&s, &w, &LossSpec::softmax().fnpal(1.0)).unwrap();
        assert_eq!(p.classes, vec![0, 1, 2, 3]);
        let p3 = predict(&s, &w, &LossSpec::softmax().fnpal(30.0)).unwrap();
        assert_eq!(p.classes, p3.classes);
        for r in p.probabilities.iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(predict(&s, &Matrix::zeros(1, 3), &LossSpec::softmax()), Err(Error::Shape(_))));
    }

    #[test]
    fn grouped_accuracy() {
        let (tr, te) = blobs(4, 6, 40, 4.0, 12);
        let s = init_model(&learnable(6, vec![8], 6, 4), 0).unwrap();
        let loss = LossSpec::softmax();
        let counts = tr.class_counts();
        let all_many = GroupThresholds { many_min: 0, few_max: 0 };
        let g = evaluate_grouped(&s, &te, &loss, &counts, all_many).unwrap();
        assert!((g.many_acc.unwrap() - g.overall).abs() < 1e-12);
        assert_eq!(g.few_acc, None);

        let keep: Vec<usize> = (0..te.len()).filter(|&i| te.labels()[i] != 2).collect();
        let partial = te.subset(&keep);
        let g = evaluate_grouped(&s, &partial, &loss, &counts, all_many).unwrap();
        assert_eq!(g.excluded_classes, vec![2]);
        assert_eq!(g.per_class[2].accuracy, None);

        let t = GroupThresholds::default();
        assert_eq!(t.group_of(101), Group::Many);
        assert_eq!(t.group_of(100), Group::Medium);
        assert_eq!(t.group_of(20), Group::Medium);
        assert_eq!(t.group_of(19), Group::Few);
    }

    #[test]
    fn rng_state_roundtrip() {
        let s = init_model(&learnable(4, vec![4], 4, 3), 0).unwrap();
        let r = s.rng_state();
        let back = TrainState::from_parts(s.config().clone(), s.parameters().clone(), None, 0, &r).unwrap();
        assert_eq!(back, s);
    }
}
