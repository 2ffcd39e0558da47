//! Panoptic symbol spotting on vector CAD drawings.
//!
//! A drawing of geometric primitives (segments, arcs, circles, ellipses)
//! becomes a graph: one vertex per primitive via its segment approximation,
//! edges between nearby or collinear primitives. A sparse multi-head graph
//! attention network maps vertex features to per-primitive class
//! probabilities, and its stage-wise attention scores to per-edge adjacency
//! probabilities; connected components of the pruned adjacency yield symbol
//! instances. Everything runs on a small reverse-mode autodiff tape and is
//! evaluated with the panoptic quality metric (PQ = RQ x SQ), semantic F1,
//! and box AP.

pub mod ablate;
pub mod autodiff;
pub mod classes;
pub mod dataset;
pub mod extract;
pub mod geom;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod train;

pub use classes::{ClassInfo, ClassKind, ClassTable};
pub use dataset::{
    load_dataset, load_manifest, load_record, save_manifest, save_record, write_dataset,
    DatasetManifest, DrawingRecord,
};
pub use extract::{extract, ground_truth_prediction, PanopticPrediction, SymbolInstance};
pub use geom::{
    approximate_segment, edge_feature, vertex_feature, ApproxSegment, BoundingBox, EdgeFeature,
    Point, Primitive, PrimitiveGeometry, PrimitiveKind, RegularityConfig, VertexFeature,
};
pub use graph::{build_graph, collinear, segment_distance, DrawingGraph, GraphConfig};
pub use metrics::{
    detection_ap, panoptic_quality, panoptic_quality_symbols, semantic_f1, symbol_iou,
    EvaluationReport, PqTriple,
};
pub use model::{AblationConfig, CeeMode, Checkpoint, ForwardOutput, ModelConfig, ModelParams};
pub use train::{
    adam_step, build_gt_adjacency, instance_loss, lr_at, panoptic_loss, semantic_loss, train,
    AdamState, EpochRecord, InstanceWeightTable, TrainConfig, TrainOutcome,
};
