//! Optimizers, the learning-rate schedule and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{forward, gradients_wrt, EvalOptions, ExprGraph, GraphError, NodeId, Tensor, Trace};
use crate::backbone::{build_backbone, predict, BackboneSpec, Model, ModelError};
use crate::data::{augment, AugmentConfig, Dataset};
use crate::knowledge::DistanceMatrix;
use crate::qtr::{measure_alignment, sample_triplet, triplet_terms, LossConfig, ObjectiveError};
use crate::rng::{self, Pcg32};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("gradient for `{name}` has shape {got:?}, weight has {expected:?}")]
    GradShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("missing gradient for `{0}`")]
    MissingGrad(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Weights = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Wrap the base optimizer in sharpness-aware minimization.
    pub sam: bool,
    pub sam_rho: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            sam: false,
            sam_rho: 0.05,
        }
    }
}

/// Adam moments and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptState {
    pub step: u64,
    pub m: Weights,
    pub v: Weights,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held a non-finite value; weights are unchanged.
    SkippedNonFinite,
}

fn check_grads(weights: &Weights, grads: &Weights) -> Result<bool, TrainError> {
    let mut finite = true;
    for (name, w) in weights {
        let g = grads.get(name).ok_or_else(|| TrainError::MissingGrad(name.clone()))?;
        if g.shape() != w.shape() {
            return Err(TrainError::GradShape {
                name: name.clone(),
                got: g.shape().to_vec(),
                expected: w.shape().to_vec(),
            });
        }
        finite &= g.is_finite();
    }
    Ok(finite)
}

/// One update of the base optimizer.
pub fn optimizer_step(
    weights: &mut Weights,
    grads: &Weights,
    state: &mut OptState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<StepOutcome, TrainError> {
    if !check_grads(weights, grads)? {
        return Ok(StepOutcome::SkippedNonFinite);
    }
    state.step += 1;
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (name, w) in weights.iter_mut() {
                for (x, g) in w.data_mut().iter_mut().zip(grads[name].data()) {
                    *x -= lr * g;
                }
            }
        }
        OptimizerKind::Adam => {
            let t = state.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            for (name, w) in weights.iter_mut() {
                let g = grads[name].data();
                let m = state
                    .m
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(w.shape()));
                let v = state
                    .v
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(w.shape()));
                for i in 0..g.len() {
                    let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g[i];
                    let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    w.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(StepOutcome::Applied)
}

pub fn global_norm(grads: &Weights) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Sharpness-aware step: evaluates `grad_at` at `w + rho * g / |g|`, then
/// applies the base optimizer from `w` with those gradients.
pub fn sam_step<F>(
    weights: &mut Weights,
    grads: &Weights,
    state: &mut OptState,
    cfg: &OptimizerConfig,
    lr: f64,
    mut grad_at: F,
) -> Result<StepOutcome, TrainError>
where
    F: FnMut(&Weights) -> Result<Weights, TrainError>,
{
    if !check_grads(weights, grads)? {
        return Ok(StepOutcome::SkippedNonFinite);
    }
    let norm = global_norm(grads);
    if cfg.sam_rho == 0.0 || norm == 0.0 {
        return optimizer_step(weights, grads, state, cfg, lr);
    }
    let scale = cfg.sam_rho / norm;
    let mut perturbed = weights.clone();
    for (name, w) in perturbed.iter_mut() {
        for (x, g) in w.data_mut().iter_mut().zip(grads[name].data()) {
            *x += scale * g;
        }
    }
    let sharp = grad_at(&perturbed)?;
    optimizer_step(weights, &sharp, state, cfg, lr)
}

/// Linear interpolation from `initial` at step 0 to `final_` at the last step.
pub fn learning_rate(initial: f64, final_: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return initial;
    }
    let f = step as f64 / (total_steps - 1) as f64;
    (1.0 - f) * initial + f * final_
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr_initial: 1e-3,
            lr_final: 1e-4,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            augment: AugmentConfig::none(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch size must be >= 1".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return Err(TrainError::Config("learning rates must be > 0".into()));
        }
        if self.optimizer.sam_rho < 0.0 {
            return Err(TrainError::Config("sam_rho must be >= 0".into()));
        }
        self.loss.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_ce: f64,
    /// `None` when the QTR term is disabled.
    pub mean_qtr: Option<f64>,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    pub pearson: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub skipped_steps: usize,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_ce,mean_qtr,val_top1,val_top5,pearson\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.9},{},{},{},{}",
                r.epoch,
                r.mean_ce,
                cell(r.mean_qtr),
                cell(r.val_top1),
                cell(r.val_top5),
                cell(r.pearson)
            );
        }
        out
    }
}

/// Training objective for one step: rows `0..b` of `x` are the batch, rows
/// `b..b + 3` the triplet. The batch CE and the triplet CE are averaged over
/// `b + 1` samples and the weighted QTR term is added.
struct StepGraph {
    graph: ExprGraph,
    loss: NodeId,
    ce: NodeId,
    qtr: Option<NodeId>,
}

fn step_graph(
    spec: &BackboneSpec,
    batch_labels: &[usize],
    triplet_labels: [usize; 3],
    prior: Option<&DistanceMatrix>,
    loss_cfg: &LossConfig,
) -> Result<StepGraph, TrainError> {
    let net = spec.build_graph(0);
    let mut g = net.graph;
    let b = batch_labels.len();
    let rows: Vec<usize> = (0..b).collect();
    let batch_logits = g.select_rows(net.logits, &rows);
    let y = g.constant(Tensor::vector(&batch_labels.iter().map(|&l| l as f64).collect::<Vec<_>>()));
    let nll = g.softmax_nll(batch_logits, y);
    let batch_ce = g.sum_all(nll);
    let pick = |g: &mut ExprGraph, node, i: usize| g.select_rows(node, &[b + i]);
    let latents = [0, 1, 2].map(|i| pick(&mut g, net.latent, i));
    let logits = [0, 1, 2].map(|i| pick(&mut g, net.logits, i));
    let empty;
    let prior = match prior {
        Some(p) => p,
        None if loss_cfg.alpha == 0.0 => {
            empty = DistanceMatrix::from_values(Vec::new(), Vec::new()).expect("empty matrix");
            &empty
        }
        None => return Err(TrainError::Config("alpha > 0 needs a prior distance matrix".into())),
    };
    let terms = triplet_terms(&mut g, latents, logits, triplet_labels, prior, loss_cfg)?;
    let ce_sum = g.add(batch_ce, terms.ce);
    let ce = g.scale(ce_sum, 1.0 / (b + 1) as f64);
    let loss = match terms.qtr {
        Some(q) => {
            let wq = g.scale(q, loss_cfg.alpha);
            g.add(ce, wq)
        }
        None => ce,
    };
    Ok(StepGraph {
        graph: g,
        loss,
        ce,
        qtr: terms.qtr,
    })
}

/// The scalar training objective of one step as a graph over the model
/// weights and `x` (batch rows followed by the three triplet rows).
pub fn objective_graph(
    spec: &BackboneSpec,
    batch_labels: &[usize],
    triplet_labels: [usize; 3],
    prior: Option<&DistanceMatrix>,
    loss_cfg: &LossConfig,
) -> Result<(ExprGraph, NodeId), TrainError> {
    let sg = step_graph(spec, batch_labels, triplet_labels, prior, loss_cfg)?;
    Ok((sg.graph, sg.loss))
}

fn weight_grads(sg: &StepGraph, model: &Model, x: &Tensor, seed: u64) -> Result<(Trace, Weights), TrainError> {
    let bindings = model.bindings(x.clone());
    let trace = forward(&sg.graph, &bindings, EvalOptions::train(seed))?;
    let names: Vec<&str> = model.weights.keys().map(String::as_str).collect();
    let grads = gradients_wrt(&sg.graph, &trace, sg.loss, &names)?;
    Ok((trace, grads.into_iter().collect()))
}

fn batch_tensor(ds: &Dataset, rows: &[usize], aug: &AugmentConfig, spec: &BackboneSpec, rng: &mut Pcg32) -> Tensor {
    if aug.is_identity() && aug.size.is_none() {
        return ds.batch(rows);
    }
    let (c, h, w) = spec.input_shape();
    let mut data = Vec::with_capacity(rows.len() * c * h * w);
    for &i in rows {
        data.extend(augment(ds.image(i), ds.image_shape(), aug, rng));
    }
    Tensor::new(vec![rows.len(), c, h, w], data).expect("augmented batch")
}

/// Validation metrics recorded after each epoch.
fn evaluate_epoch(
    model: &Model,
    val: &Dataset,
    prior: Option<&DistanceMatrix>,
    ell: f64,
) -> Result<(f64, f64, Option<f64>), TrainError> {
    let p = predict(model, val)?;
    let pearson = match prior {
        Some(d) => measure_alignment(&p.by_class(&val.labels, val.class_count()), d, ell)
            .ok()
            .map(|r| r.pearson),
        None => None,
    };
    Ok((p.top1_accuracy(&val.labels), p.top5_accuracy(&val.labels), pearson))
}

/// Trains a fresh model. Each step draws a shuffled batch and one triplet
/// from `train_set`, builds the objective, backpropagates and updates.
/// `prior` rows follow the dataset's label order and are consulted by the
/// objective only when `alpha > 0`.
pub fn train(
    cfg: &TrainConfig,
    spec: &BackboneSpec,
    train_set: &Dataset,
    val: Option<&Dataset>,
    prior: Option<&DistanceMatrix>,
) -> Result<(Model, TrainHistory), TrainError> {
    cfg.validate()?;
    spec.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let (c, h, w) = train_set.image_shape();
    if cfg.augment.size.unwrap_or((h, w)) != (spec.input[1], spec.input[2]) || c != spec.input[0] {
        return Err(TrainError::Config("dataset image shape does not match the backbone input".into()));
    }
    if let Some(d) = prior {
        if cfg.loss.alpha > 0.0 && d.len() < train_set.class_count() {
            return Err(TrainError::Config("prior does not cover every class".into()));
        }
    }
    let mut model = build_backbone(spec, &mut rng::stream(cfg.seed, 0))?;
    model.training = true;
    let mut order_rng = rng::stream(cfg.seed, 1);
    let mut triplet_rng = rng::stream(cfg.seed, 2);
    let mut aug_rng = rng::stream(cfg.seed, 3);
    let mut state = OptState::default();
    let mut history = TrainHistory::default();
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut global_step = 0;
    for epoch in 0..cfg.epochs {
        rng::shuffle(&mut order, &mut order_rng);
        let (mut ce_sum, mut qtr_sum) = (0.0, 0.0);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let triplet = sample_triplet(&train_set.labels, &mut triplet_rng)?;
            let members = triplet.members();
            let mut rows = batch.to_vec();
            rows.extend(members.iter().map(|m| m.index));
            let x = batch_tensor(train_set, &rows, &cfg.augment, spec, &mut aug_rng);
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let sg = step_graph(spec, &labels, members.map(|m| m.label), prior, &cfg.loss)?;
            let seed = rng::derive_seed(cfg.seed, global_step as u64);
            let (trace, grads) = weight_grads(&sg, &model, &x, seed)?;
            let loss = trace.value(sg.loss).item().unwrap_or(f64::NAN);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            ce_sum += trace.value(sg.ce).item().unwrap_or(f64::NAN);
            if let Some(q) = sg.qtr {
                qtr_sum += trace.value(q).item().unwrap_or(f64::NAN);
            }
            let lr = learning_rate(cfg.lr_initial, cfg.lr_final, global_step, total);
            let outcome = if cfg.optimizer.sam {
                let mut probe = model.clone();
                let grad_at = |w: &Weights| {
                    probe.weights = w.clone();
                    weight_grads(&sg, &probe, &x, seed).map(|(_, g)| g)
                };
                let mut weights = model.weights.clone();
                let out = sam_step(&mut weights, &grads, &mut state, &cfg.optimizer, lr, grad_at)?;
                model.weights = weights;
                out
            } else {
                optimizer_step(&mut model.weights, &grads, &mut state, &cfg.optimizer, lr)?
            };
            if outcome == StepOutcome::SkippedNonFinite {
                history.skipped_steps += 1;
            }
            global_step += 1;
        }
        let (val_top1, val_top5, pearson) = match val {
            Some(v) if !v.is_empty() => {
                let (t1, t5, p) = evaluate_epoch(&model, v, prior, cfg.loss.ell)?;
                (Some(t1), Some(t5), p)
            }
            _ => (None, None, None),
        };
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            mean_ce: ce_sum / steps_per_epoch as f64,
            mean_qtr: (cfg.loss.alpha > 0.0).then(|| qtr_sum / steps_per_epoch as f64),
            val_top1,
            val_top5,
            pearson,
        });
    }
    model.training = false;
    Ok((model, history))
}
