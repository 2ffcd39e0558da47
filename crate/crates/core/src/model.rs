//! The panoptic spotting network: vertex/edge embedding, relative spatial
//! encoding (RSE), a cascade of graph attention stages, a semantic
//! classification head, and an adjacency (instance) head fed by cascaded
//! edge encoding (CEE) of the per-stage attention scores.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, AdResult, EdgeScores, EdgeTopology, Gradients, Shape, Tape, Tensor};
use crate::geom::{EdgeFeature, VertexFeature};
use crate::graph::DrawingGraph;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unsupported checkpoint version {0}, expected {CHECKPOINT_VERSION}")]
    CheckpointVersion(u32),
    #[error("checkpoint does not match config: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Architecture hyperparameters. Defaults follow the reference
/// configuration: 8 stages, 8 heads, width 128, 36 classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub stages: usize,
    pub heads: usize,
    pub model_width: usize,
    pub num_classes: usize,
    pub vertex_embed_width: usize,
    pub edge_embed_width: usize,
    pub embed_hidden: Vec<usize>,
    pub rse_hidden: Vec<usize>,
    pub stage_mlp_hidden: Vec<usize>,
    pub semantic_hidden: Vec<usize>,
    pub instance_hidden: Vec<usize>,
    /// Scale attention scores by 1/sqrt(head_dim). Off by default: raw
    /// query-key dot products.
    pub scaled_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_width(8, 8, 128, 36)
    }
}

impl ModelConfig {
    /// Config with hidden widths scaled from the model width.
    pub fn with_width(stages: usize, heads: usize, width: usize, num_classes: usize) -> Self {
        ModelConfig {
            stages,
            heads,
            model_width: width,
            num_classes,
            vertex_embed_width: width / 2,
            edge_embed_width: width / 2,
            embed_hidden: vec![width / 2],
            rse_hidden: vec![width / 2],
            stage_mlp_hidden: vec![width],
            semantic_hidden: vec![width],
            instance_hidden: vec![width, (width / 4).max(1)],
            scaled_attention: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_width / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stages == 0 || self.heads == 0 {
            return Err(ModelError::InvalidConfig(
                "stages and heads must be >= 1".into(),
            ));
        }
        if self.model_width % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "model_width {} must be divisible by heads {}",
                self.model_width, self.heads
            )));
        }
        if self.vertex_embed_width + self.edge_embed_width != self.model_width {
            return Err(ModelError::InvalidConfig(
                "vertex_embed_width + edge_embed_width must equal model_width".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    fn vertex_mlp_widths(&self) -> Vec<usize> {
        let mut w = vec![VertexFeature::DIM];
        w.extend_from_slice(&self.embed_hidden);
        w.push(self.vertex_embed_width);
        w
    }

    fn edge_mlp_widths(&self) -> Vec<usize> {
        let mut w = vec![EdgeFeature::DIM];
        w.extend_from_slice(&self.embed_hidden);
        w.push(self.edge_embed_width);
        w
    }

    fn rse_mlp_widths(&self) -> Vec<usize> {
        let mut w = vec![EdgeFeature::DIM];
        w.extend_from_slice(&self.rse_hidden);
        w.push(self.heads);
        w
    }

    fn stage_mlp_widths(&self) -> Vec<usize> {
        let mut w = vec![self.model_width];
        w.extend_from_slice(&self.stage_mlp_hidden);
        w.push(self.model_width);
        w
    }

    fn semantic_mlp_widths(&self) -> Vec<usize> {
        let mut w = vec![self.model_width];
        w.extend_from_slice(&self.semantic_hidden);
        w.push(self.num_classes);
        w
    }

    fn instance_mlp_widths(&self, ablation: &AblationConfig) -> Vec<usize> {
        let cee_width = if ablation.cee == CeeMode::Off {
            0
        } else {
            self.heads
        };
        let mut w = vec![cee_width + 2 * self.model_width];
        w.extend_from_slice(&self.instance_hidden);
        w.push(1);
        w
    }
}

/// Which per-stage attention scores feed the instance head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "stage")]
pub enum CeeMode {
    /// No attention-score features: the instance head sees only the two
    /// endpoint vertex features.
    Off,
    /// Element-wise sum of the scores of every stage.
    SumAll,
    /// Scores of a single stage (0-based index).
    Single(usize),
}

/// Ablation switches: relative spatial encoding on/off and the cascaded
/// edge encoding mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub rse: bool,
    pub cee: CeeMode,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            rse: true,
            cee: CeeMode::SumAll,
        }
    }
}

impl AblationConfig {
    pub fn baseline() -> Self {
        AblationConfig {
            rse: false,
            cee: CeeMode::Off,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if let CeeMode::Single(s) = self.cee {
            if s >= config.stages {
                return Err(ModelError::InvalidConfig(format!(
                    "single-stage cee index {s} out of {} stages",
                    config.stages
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    shape: Shape,
    value: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub(crate) struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    fn add(&mut self, name: String, shape: Shape, value: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.len(), value.len());
        self.params.push(Param { name, shape, value });
        ParamId(self.params.len() - 1)
    }

    pub(crate) fn len(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn value_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.params[i].value
    }
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct MlpIds {
    layers: Vec<LinearIds>,
}

#[derive(Clone, Debug)]
struct StageIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    mlp: MlpIds,
}

/// All learnable weights plus the architecture and ablation configuration
/// they were built for.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub ablation: AblationConfig,
    store: ParamStore,
    vertex_mlp: MlpIds,
    edge_mlp: MlpIds,
    rse_mlp: MlpIds,
    stages: Vec<StageIds>,
    semantic_mlp: MlpIds,
    instance_mlp: MlpIds,
}

fn xavier_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect()
}

fn build_mlp(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    widths: &[usize],
    bias_on_last: bool,
) -> MlpIds {
    let mut layers = Vec::new();
    for l in 0..widths.len() - 1 {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let w = store.add(
            format!("{prefix}.{l}.w"),
            Shape::matrix(fan_in, fan_out),
            xavier_init(rng, fan_in, fan_out),
        );
        let b = (bias_on_last || l + 2 < widths.len()).then(|| {
            store.add(
                format!("{prefix}.{l}.b"),
                Shape::vector(fan_out),
                vec![0.0; fan_out],
            )
        });
        layers.push(LinearIds { w, b });
    }
    MlpIds { layers }
}

impl ModelParams {
    pub fn new(config: ModelConfig, ablation: AblationConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        ablation.validate(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let width = config.model_width;

        let vertex_mlp = build_mlp(
            &mut store,
            &mut rng,
            "vertex_mlp",
            &config.vertex_mlp_widths(),
            true,
        );
        let edge_mlp = build_mlp(&mut store, &mut rng, "edge_mlp", &config.edge_mlp_widths(), true);
        // No bias on the RSE output layer: the attention softmax is
        // shift-invariant per head, which would make it a dead parameter.
        let rse_mlp = build_mlp(&mut store, &mut rng, "rse_mlp", &config.rse_mlp_widths(), false);
        let mut stages = Vec::with_capacity(config.stages);
        for s in 0..config.stages {
            let wq = store.add(
                format!("stage.{s}.wq"),
                Shape::matrix(width, width),
                xavier_init(&mut rng, width, width),
            );
            let wk = store.add(
                format!("stage.{s}.wk"),
                Shape::matrix(width, width),
                xavier_init(&mut rng, width, width),
            );
            let wv = store.add(
                format!("stage.{s}.wv"),
                Shape::matrix(width, width),
                xavier_init(&mut rng, width, width),
            );
            let mlp = build_mlp(
                &mut store,
                &mut rng,
                &format!("stage.{s}.mlp"),
                &config.stage_mlp_widths(),
                true,
            );
            stages.push(StageIds { wq, wk, wv, mlp });
        }
        let semantic_mlp = build_mlp(
            &mut store,
            &mut rng,
            "semantic_head",
            &config.semantic_mlp_widths(),
            true,
        );
        let instance_mlp = build_mlp(
            &mut store,
            &mut rng,
            "instance_head",
            &config.instance_mlp_widths(&ablation),
            true,
        );

        let model = ModelParams {
            config,
            ablation,
            store,
            vertex_mlp,
            edge_mlp,
            rse_mlp,
            stages,
            semantic_mlp,
            instance_mlp,
        };
        log::debug!(
            "model constructed: {} parameters in {} arrays",
            model.num_parameters(),
            model.store.len()
        );
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.store
            .params
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.value.as_slice())
    }

    pub fn param_shape(&self, name: &str) -> Option<&[usize]> {
        self.store
            .params
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.shape.dims())
    }

    pub fn param_values(&self) -> Vec<Vec<f64>> {
        self.store.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn set_param_values(&mut self, values: &[Vec<f64>]) -> Result<(), ModelError> {
        if values.len() != self.store.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "expected {} parameter arrays, got {}",
                self.store.len(),
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if v.len() != self.store.params[i].value.len() {
                return Err(ModelError::CheckpointMismatch(format!(
                    "parameter {} expects {} values, got {}",
                    self.store.params[i].name,
                    self.store.params[i].value.len(),
                    v.len()
                )));
            }
            self.store.params[i].value.clone_from(v);
        }
        Ok(())
    }

    /// Overwrite one parameter array by name.
    pub fn set_param(&mut self, name: &str, value: Vec<f64>) -> Result<(), ModelError> {
        let p = self
            .store
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| ModelError::CheckpointMismatch(format!("unknown parameter {name}")))?;
        if p.value.len() != value.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "parameter {name} expects {} values, got {}",
                p.value.len(),
                value.len()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Load every parameter onto a tape as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> AdResult<BoundParams> {
        let mut tensors = Vec::with_capacity(self.store.len());
        for p in &self.store.params {
            tensors.push(tape.param(p.value.clone(), p.shape)?);
        }
        Ok(BoundParams { tensors })
    }

    /// Gradients per parameter array, aligned with the store order. Params
    /// outside the computation (e.g. the RSE block with RSE off) get zeros.
    pub fn gradients_by_param(&self, grads: &Gradients, bound: &BoundParams) -> Vec<Vec<f64>> {
        self.store
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                grads
                    .wrt(bound.tensors[i])
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.value.len()])
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, graph: &DrawingGraph) -> Result<ForwardOutput, ModelError> {
        let bound = self.bind(tape)?;
        self.forward_bound(tape, graph, &bound)
    }

    /// Forward pass with already-bound parameters (one step may bind once
    /// and reuse for the loss).
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        graph: &DrawingGraph,
        bound: &BoundParams,
    ) -> Result<ForwardOutput, ModelError> {
        let topo = graph.topology();
        let v0 = embed_inputs(tape, graph, self, bound)?;
        let rse = if self.ablation.rse {
            Some(rse_encode(tape, graph, self, bound)?)
        } else {
            None
        };

        let mut v = v0;
        let mut stage_scores = Vec::with_capacity(self.config.stages);
        for s in 0..self.config.stages {
            let (next, scores) = gat_stage(tape, v, topo, rse.as_ref(), self, bound, s)?;
            v = next;
            stage_scores.push(scores);
        }

        let (semantic_logits, semantic_probs) = semantic_head(tape, v, self, bound)?;
        let cee_sum = cee_aggregate(tape, &stage_scores, self.ablation.cee)?;
        let (adjacency_logits, adjacency_probs) =
            instance_head(tape, cee_sum.as_ref(), v, topo, self, bound)?;

        Ok(ForwardOutput {
            semantic_logits,
            semantic_probs,
            stage_scores,
            rse,
            cee_sum,
            adjacency_logits,
            adjacency_probs,
            final_vertex_features: v,
        })
    }
}

/// Parameters materialized as tape leaves, aligned with the store order.
pub struct BoundParams {
    tensors: Vec<Tensor>,
}

impl BoundParams {
    fn linear(&self, ids: LinearIds) -> (Tensor, Option<Tensor>) {
        (self.tensors[ids.w.0], ids.b.map(|b| self.tensors[b.0]))
    }

    fn mlp(&self, ids: &MlpIds) -> Vec<(Tensor, Option<Tensor>)> {
        ids.layers.iter().map(|l| self.linear(*l)).collect()
    }
}

/// Alternating affine + relu layers, final layer affine.
pub fn mlp_forward(
    tape: &mut Tape,
    x: Tensor,
    layers: &[(Tensor, Option<Tensor>)],
) -> AdResult<Tensor> {
    let mut h = x;
    for (i, (w, b)) in layers.iter().enumerate() {
        h = tape.matmul(h, *w)?;
        if let Some(b) = b {
            h = tape.add_bias(h, *b)?;
        }
        if i + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Initial vertex features: embedded 7-dim vertex features concatenated
/// with the max-pool of the embedded features of outgoing edges. Isolated
/// vertices pool to zero.
pub fn embed_inputs(
    tape: &mut Tape,
    graph: &DrawingGraph,
    model: &ModelParams,
    bound: &BoundParams,
) -> Result<Tensor, ModelError> {
    let n = graph.num_vertices();
    let e = graph.num_edges();
    let vx = tape.constant(
        graph.vertex_feature_matrix(),
        Shape::matrix(n, VertexFeature::DIM),
    )?;
    let ex = tape.constant(
        graph.edge_feature_matrix(),
        Shape::matrix(e, EdgeFeature::DIM),
    )?;
    let v_emb = mlp_forward(tape, vx, &bound.mlp(&model.vertex_mlp))?;
    let e_emb = mlp_forward(tape, ex, &bound.mlp(&model.edge_mlp))?;
    let pooled = tape.segment_max_pool(e_emb, graph.topology())?;
    Ok(tape.concat_lastdim(&[v_emb, pooled])?)
}

/// Per-edge spatial encoding: the raw 7-dim edge features through an MLP,
/// one bias vector of `heads` channels per directed edge, reused additively
/// at every attention stage.
pub fn rse_encode(
    tape: &mut Tape,
    graph: &DrawingGraph,
    model: &ModelParams,
    bound: &BoundParams,
) -> Result<EdgeScores, ModelError> {
    let e = graph.num_edges();
    let ex = tape.constant(
        graph.edge_feature_matrix(),
        Shape::matrix(e, EdgeFeature::DIM),
    )?;
    let r = mlp_forward(tape, ex, &bound.mlp(&model.rse_mlp))?;
    Ok(EdgeScores::wrap(r))
}

/// One attention stage. Returns the next vertex features (post-MLP residual
/// add) and the raw pre-softmax attention scores that feed the CEE module.
pub fn gat_stage(
    tape: &mut Tape,
    v_prev: Tensor,
    topo: &Arc<EdgeTopology>,
    rse: Option<&EdgeScores>,
    model: &ModelParams,
    bound: &BoundParams,
    stage: usize,
) -> Result<(Tensor, EdgeScores), ModelError> {
    let heads = model.config.heads;
    let ids = &model.stages[stage];
    let q = tape.matmul(v_prev, bound.tensors[ids.wq.0])?;
    let k = tape.matmul(v_prev, bound.tensors[ids.wk.0])?;
    let v = tape.matmul(v_prev, bound.tensors[ids.wv.0])?;

    let q_edge = tape.gather_by_src(q, topo)?;
    let k_edge = tape.gather_by_dst(k, topo)?;
    let mut raw = tape.edge_dot_per_head(q_edge, k_edge, heads)?;
    if model.config.scaled_attention {
        raw = tape.scale(raw, 1.0 / (model.config.head_dim() as f64).sqrt())?;
    }
    let raw_scores = EdgeScores::wrap(raw);

    let softmax_input = match rse {
        Some(r) => tape.add_scores(&raw_scores, r)?,
        None => raw_scores,
    };
    let weights = tape.row_softmax_over_neighbors(softmax_input, topo)?;
    let v_edge = tape.gather_by_dst(v, topo)?;
    let aggregated = tape.edge_weighted_sum(weights, v_edge, topo)?;
    let transformed = mlp_forward(tape, aggregated, &bound.mlp(&ids.mlp))?;
    let v_next = tape.add(transformed, v_prev)?;
    Ok((v_next, raw_scores))
}

/// Per-vertex class logits and row-stochastic probabilities.
pub fn semantic_head(
    tape: &mut Tape,
    v_final: Tensor,
    model: &ModelParams,
    bound: &BoundParams,
) -> Result<(Tensor, Tensor), ModelError> {
    let logits = mlp_forward(tape, v_final, &bound.mlp(&model.semantic_mlp))?;
    let probs = tape.row_softmax(logits)?;
    Ok((logits, probs))
}

/// Combine per-stage attention scores into the edge encoding the instance
/// head consumes: element-wise sum over stages, a single stage's scores, or
/// none at all.
pub fn cee_aggregate(
    tape: &mut Tape,
    stage_scores: &[EdgeScores],
    mode: CeeMode,
) -> AdResult<Option<EdgeScores>> {
    match mode {
        CeeMode::Off => Ok(None),
        CeeMode::Single(s) => Ok(Some(stage_scores[s])),
        CeeMode::SumAll => {
            let mut it = stage_scores.iter();
            let first = *it.next().expect("at least one stage");
            let mut acc = first;
            for s in it {
                acc = tape.add_scores(&acc, s)?;
            }
            Ok(Some(acc))
        }
    }
}

/// Adjacency prediction on graph edges: for each directed edge, the edge
/// encoding (when present) is concatenated with the final features of both
/// endpoints and mapped to a logit; `sigmoid` gives the probability that
/// the two primitives belong to the same instance.
pub fn instance_head(
    tape: &mut Tape,
    cee: Option<&EdgeScores>,
    v_final: Tensor,
    topo: &Arc<EdgeTopology>,
    model: &ModelParams,
    bound: &BoundParams,
) -> Result<(Tensor, Tensor), ModelError> {
    let vi = tape.gather_by_src(v_final, topo)?;
    let vj = tape.gather_by_dst(v_final, topo)?;
    let features = match cee {
        Some(c) => tape.concat_lastdim(&[c.tensor, vi, vj])?,
        None => tape.concat_lastdim(&[vi, vj])?,
    };
    let logits = mlp_forward(tape, features, &bound.mlp(&model.instance_mlp))?;
    let probs = tape.sigmoid(logits)?;
    Ok((logits, probs))
}

/// Everything one forward pass produces, as tape handles.
pub struct ForwardOutput {
    /// N x C class logits.
    pub semantic_logits: Tensor,
    /// N x C row-stochastic class probabilities.
    pub semantic_probs: Tensor,
    /// Raw pre-softmax attention scores per stage, each E x H.
    pub stage_scores: Vec<EdgeScores>,
    /// Relative spatial encoding, E x H; absent when the RSE switch is off.
    pub rse: Option<EdgeScores>,
    /// Aggregated edge encoding fed to the instance head; absent when the
    /// CEE switch is off.
    pub cee_sum: Option<EdgeScores>,
    /// E x 1 pre-sigmoid adjacency predictions.
    pub adjacency_logits: Tensor,
    /// E x 1 adjacency probabilities in (0, 1).
    pub adjacency_probs: Tensor,
    /// N x width vertex features after the last stage.
    pub final_vertex_features: Tensor,
}

impl ForwardOutput {
    /// Predicted class per vertex (argmax; ties to the lowest id).
    pub fn predicted_classes(&self, tape: &Tape, num_classes: usize) -> Vec<usize> {
        let probs = tape.value(self.semantic_probs);
        probs
            .chunks(num_classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// Adam moment estimates snapshotted into a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub first_moment: BTreeMap<String, Vec<f64>>,
    pub second_moment: BTreeMap<String, Vec<f64>>,
}

/// Versioned JSON container for a trained model: config, ablation, flat
/// parameter arrays keyed by canonical names, and optionally the optimizer
/// state for exact training resumption.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub ablation: AblationConfig,
    pub params: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSnapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_pq: Option<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &ModelParams) -> Self {
        let params = model
            .store
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            ablation: model.ablation,
            params,
            optimizer: None,
            epoch: None,
            best_val_pq: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::CheckpointVersion(ckpt.format_version));
        }
        Ok(ckpt)
    }

    /// Rebuild the model; every parameter must be present with the exact
    /// shape the config dictates.
    pub fn into_model(self) -> Result<ModelParams, ModelError> {
        let mut model = ModelParams::new(self.config.clone(), self.ablation, 0)?;
        if self.params.len() != model.store.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "expected {} parameter arrays, checkpoint has {}",
                model.store.len(),
                self.params.len()
            )));
        }
        for i in 0..model.store.len() {
            let name = model.store.params[i].name.clone();
            let value = self.params.get(&name).ok_or_else(|| {
                ModelError::CheckpointMismatch(format!("missing parameter {name}"))
            })?;
            model.set_param(&name, value.clone())?;
        }
        Ok(model)
    }

    /// Reject a checkpoint that was produced under a different architecture.
    pub fn require_config(
        &self,
        config: &ModelConfig,
        ablation: &AblationConfig,
    ) -> Result<(), ModelError> {
        if &self.config != config {
            return Err(ModelError::CheckpointMismatch(
                "model config differs from checkpoint".into(),
            ));
        }
        if &self.ablation != ablation {
            return Err(ModelError::CheckpointMismatch(
                "ablation config differs from checkpoint".into(),
            ));
        }
        Ok(())
    }
}
