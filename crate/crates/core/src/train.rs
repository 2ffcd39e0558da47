//! Losses (semantic cross-entropy, weighted adjacency BCE, their panoptic
//! combination), ground-truth adjacency construction, the Adam optimizer
//! with a step-decay schedule, and the epoch loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor};
use crate::classes::ClassTable;
use crate::extract::{extract, ground_truth_prediction};
use crate::graph::DrawingGraph;
use crate::metrics::{match_symbols, MetricsError, PqAccumulator, PqTriple};
use crate::model::{BoundParams, Checkpoint, ModelError, ModelParams, OptimizerSnapshot};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("graph has {graph} vertices but {labels} labels were supplied")]
    LabelCountMismatch { graph: usize, labels: usize },
}

/// Loss weights for the adjacency BCE, keyed on (same ground-truth class?,
/// ground-truth adjacency). Same class but different instance is punished
/// hardest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceWeightTable {
    pub same_class_diff_instance: f64,
    pub same_class_same_instance: f64,
    pub diff_class_not_adjacent: f64,
    pub diff_class_adjacent: f64,
}

impl Default for InstanceWeightTable {
    fn default() -> Self {
        InstanceWeightTable {
            same_class_diff_instance: 20.0,
            same_class_same_instance: 2.0,
            diff_class_not_adjacent: 1.0,
            diff_class_adjacent: 0.0,
        }
    }
}

impl InstanceWeightTable {
    pub fn weight_for(&self, same_class: bool, adjacent: bool) -> f64 {
        match (same_class, adjacent) {
            (true, false) => self.same_class_diff_instance,
            (true, true) => self.same_class_same_instance,
            (false, false) => self.diff_class_not_adjacent,
            (false, true) => self.diff_class_adjacent,
        }
    }
}

/// Optimizer and schedule settings; defaults are the reference values:
/// Adam(0.9, 0.99), lr 0.001 decayed by 0.7 every 20 epochs, lambda 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub adam_epsilon: f64,
    pub rng_seed: u64,
    /// Prune threshold used when extracting instances for validation.
    pub prune_threshold: f64,
    pub weights: InstanceWeightTable,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.99,
            decay: 0.7,
            decay_every: 20,
            epochs: 100,
            lambda: 2.0,
            adam_epsilon: 1e-8,
            rng_seed: 0,
            prune_threshold: 0.7,
            weights: InstanceWeightTable::default(),
        }
    }
}

/// Learning rate at an epoch: `lr * decay^(epoch / decay_every)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

/// Per-parameter first/second moment accumulators.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &ModelParams) -> Self {
        let m = model.param_values().iter().map(|p| vec![0.0; p.len()]).collect();
        let v = model.param_values().iter().map(|p| vec![0.0; p.len()]).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn snapshot(&self, model: &ModelParams) -> OptimizerSnapshot {
        let names = model.param_names();
        OptimizerSnapshot {
            step: self.step,
            first_moment: names.iter().cloned().zip(self.m.iter().cloned()).collect(),
            second_moment: names.iter().cloned().zip(self.v.iter().cloned()).collect(),
        }
    }

    pub fn from_snapshot(snap: &OptimizerSnapshot, model: &ModelParams) -> Result<Self, ModelError> {
        let names = model.param_names();
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in &names {
            let mm = snap.first_moment.get(name).ok_or_else(|| {
                ModelError::CheckpointMismatch(format!("optimizer state missing {name}"))
            })?;
            let vv = snap.second_moment.get(name).ok_or_else(|| {
                ModelError::CheckpointMismatch(format!("optimizer state missing {name}"))
            })?;
            m.push(mm.clone());
            v.push(vv.clone());
        }
        Ok(AdamState {
            m,
            v,
            step: snap.step,
        })
    }
}

/// One Adam update with bias correction at the given epoch's learning rate.
pub fn adam_step(
    model: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
    epoch: usize,
) {
    state.step += 1;
    let t = state.step as i32;
    let lr = lr_at(cfg, epoch);
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let store = model.store_mut();
    for p in 0..grads.len() {
        let m = &mut state.m[p];
        let v = &mut state.v[p];
        let value = store.value_mut(p);
        let g = &grads[p];
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }
}

/// Ground-truth adjacency per directed edge: 1 iff both endpoints carry the
/// same non-negative instance id.
pub fn build_gt_adjacency(graph: &DrawingGraph) -> Vec<f64> {
    (0..graph.num_edges())
        .map(|e| {
            let a = graph.vertex(graph.edge_src(e));
            let b = graph.vertex(graph.edge_dst(e));
            if a.instance_id >= 0 && a.instance_id == b.instance_id {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Per-edge loss weights from the weight table and the ground truth.
pub fn instance_weights(
    graph: &DrawingGraph,
    zgt: &[f64],
    table: &InstanceWeightTable,
) -> Vec<f64> {
    (0..graph.num_edges())
        .map(|e| {
            let same_class = graph.vertex(graph.edge_src(e)).semantic_label
                == graph.vertex(graph.edge_dst(e)).semantic_label;
            table.weight_for(same_class, zgt[e] == 1.0)
        })
        .collect()
}

/// Mean cross-entropy `-ln Y[i, gt_i]` over vertices, on row-stochastic
/// class probabilities.
pub fn semantic_loss(
    tape: &mut Tape,
    semantic_probs: Tensor,
    gt_labels: &[usize],
) -> Result<Tensor, TrainError> {
    Ok(tape.nll_from_probs(semantic_probs, gt_labels)?)
}

/// Weighted adjacency BCE normalized by the weight sum. Takes the
/// pre-sigmoid adjacency predictions; the value equals the weighted BCE of
/// their sigmoid but stays finite when predictions saturate.
pub fn instance_loss(
    tape: &mut Tape,
    adjacency_logits: Tensor,
    zgt: &[f64],
    graph: &DrawingGraph,
    table: &InstanceWeightTable,
) -> Result<Tensor, TrainError> {
    let weights = instance_weights(graph, zgt, table);
    Ok(tape.bce_with_logits_weighted(adjacency_logits, zgt.to_vec(), weights)?)
}

/// Panoptic training loss: `sem + lambda * ins`.
pub fn panoptic_loss(
    tape: &mut Tape,
    sem: Tensor,
    ins: Tensor,
    lambda: f64,
) -> Result<Tensor, TrainError> {
    let scaled = tape.scale(ins, lambda)?;
    Ok(tape.add(sem, scaled)?)
}

/// Loss values of one forward/backward step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub semantic: f64,
    pub instance: f64,
    pub total: f64,
}

/// Run forward + losses on one drawing; returns the scalar loss handle and
/// its components.
pub fn drawing_loss(
    tape: &mut Tape,
    model: &ModelParams,
    bound: &BoundParams,
    graph: &DrawingGraph,
    cfg: &TrainConfig,
) -> Result<(Tensor, StepLosses), TrainError> {
    let labels = graph.semantic_labels();
    if labels.len() != graph.num_vertices() {
        return Err(TrainError::LabelCountMismatch {
            graph: graph.num_vertices(),
            labels: labels.len(),
        });
    }
    let out = model.forward_bound(tape, graph, bound)?;
    let sem = semantic_loss(tape, out.semantic_probs, &labels)?;
    let zgt = build_gt_adjacency(graph);
    let ins = instance_loss(tape, out.adjacency_logits, &zgt, graph, &cfg.weights)?;
    let total = panoptic_loss(tape, sem, ins, cfg.lambda)?;
    Ok((
        total,
        StepLosses {
            semantic: tape.scalar_value(sem),
            instance: tape.scalar_value(ins),
            total: tape.scalar_value(total),
        },
    ))
}

/// One line of the per-epoch training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss_sem: f64,
    pub train_loss_ins: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_pq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_sq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_rq: Option<f64>,
}

pub struct TrainOutcome {
    /// Checkpoint of the best validation PQ (or the final epoch when no
    /// validation set was given).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_val_pq: Option<f64>,
    pub log: Vec<EpochRecord>,
}

/// Pooled panoptic quality of a model over a set of drawings.
pub fn evaluate_pq(
    model: &ModelParams,
    graphs: &[DrawingGraph],
    classes: &ClassTable,
    prune_threshold: f64,
) -> Result<PqTriple, TrainError> {
    let mut acc = PqAccumulator::default();
    for graph in graphs {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, graph)?;
        let pred = extract(
            tape.value(out.semantic_probs),
            model.config.num_classes,
            tape.value(out.adjacency_probs),
            graph,
            prune_threshold,
            classes,
        );
        let gt = ground_truth_prediction(graph, classes);
        let preds: Vec<_> = pred.symbols().cloned().collect();
        let gts: Vec<_> = gt.symbols().cloned().collect();
        acc.add_match(&match_symbols(&preds, &gts, graph)?);
    }
    Ok(acc.finish())
}

/// Mean per-vertex classification accuracy over a set of drawings.
pub fn evaluate_accuracy(model: &ModelParams, graphs: &[DrawingGraph]) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for graph in graphs {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, graph)?;
        let pred = out.predicted_classes(&tape, model.config.num_classes);
        for (p, g) in pred.iter().zip(graph.semantic_labels()) {
            if *p == g {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Train with one optimizer step per drawing. After each epoch the
/// validation split is scored with pooled PQ and the best checkpoint is
/// retained. `resume` continues from a previous optimizer state and epoch.
/// `on_epoch` may return false to stop early.
pub fn train(
    model: &mut ModelParams,
    train_graphs: &[DrawingGraph],
    val_graphs: &[DrawingGraph],
    classes: &ClassTable,
    cfg: &TrainConfig,
    resume: Option<(AdamState, usize)>,
    mut on_epoch: impl FnMut(&EpochRecord) -> bool,
) -> Result<TrainOutcome, TrainError> {
    if train_graphs.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let (mut state, start_epoch) = match resume {
        Some((s, e)) => (s, e),
        None => (AdamState::new(model), 0),
    };

    let mut best: Option<(Checkpoint, usize, Option<f64>)> = None;
    let mut log = Vec::new();

    for epoch in start_epoch..cfg.epochs {
        let mut sem_sum = 0.0;
        let mut ins_sum = 0.0;
        for graph in train_graphs {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let (loss, parts) = drawing_loss(&mut tape, model, &bound, graph, cfg)?;
            let grads = tape.backward(loss)?;
            let by_param = model.gradients_by_param(&grads, &bound);
            adam_step(model, &by_param, &mut state, cfg, epoch);
            sem_sum += parts.semantic;
            ins_sum += parts.instance;
        }

        let val = if val_graphs.is_empty() {
            None
        } else {
            Some(evaluate_pq(model, val_graphs, classes, cfg.prune_threshold)?)
        };

        let record = EpochRecord {
            epoch,
            lr: lr_at(cfg, epoch),
            train_loss_sem: sem_sum / train_graphs.len() as f64,
            train_loss_ins: ins_sum / train_graphs.len() as f64,
            val_pq: val.map(|v| v.pq),
            val_sq: val.map(|v| v.sq),
            val_rq: val.map(|v| v.rq),
        };

        let is_best = match (&best, val) {
            (None, _) => true,
            (Some((_, _, Some(best_pq))), Some(v)) => v.pq > *best_pq,
            (Some(_), Some(_)) => true,
            // No validation: keep the latest epoch.
            (Some(_), None) => true,
        };
        if is_best {
            let mut ckpt = Checkpoint::from_model(model);
            ckpt.optimizer = Some(state.snapshot(model));
            ckpt.epoch = Some(epoch);
            ckpt.best_val_pq = val.map(|v| v.pq);
            best = Some((ckpt, epoch, val.map(|v| v.pq)));
        }

        let keep_going = on_epoch(&record);
        log.push(record);
        if !keep_going {
            break;
        }
    }

    let (best, best_epoch, best_val_pq) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_pq,
        log,
    })
}
