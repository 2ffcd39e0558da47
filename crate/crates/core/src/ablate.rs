//! Configuration sweeps: train and evaluate a list of (name, config,
//! ablation) variants on the same data. Covers the module on/off axis
//! (baseline, +RSE, +CEE, single-stage CEE, full) and the stage-count axis.

use serde::{Deserialize, Serialize};

use crate::classes::ClassTable;
use crate::graph::DrawingGraph;
use crate::metrics::PqTriple;
use crate::model::{AblationConfig, CeeMode, ModelConfig, ModelParams};
use crate::train::{evaluate_accuracy, evaluate_pq, train, TrainConfig, TrainError};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblateRow {
    pub name: String,
    pub stages: usize,
    pub rse: bool,
    pub cee: String,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub semantic_accuracy: f64,
}

/// One sweep variant.
#[derive(Clone, Debug)]
pub struct AblateVariant {
    pub name: String,
    pub config: ModelConfig,
    pub ablation: AblationConfig,
}

/// The standard module sweep: baseline, +RSE, +CEE, RSE + single-stage
/// CEE (middle stage), and the full configuration.
pub fn module_sweep(config: &ModelConfig) -> Vec<AblateVariant> {
    let single = CeeMode::Single(config.stages / 2);
    [
        ("baseline", AblationConfig { rse: false, cee: CeeMode::Off }),
        ("rse", AblationConfig { rse: true, cee: CeeMode::Off }),
        ("cee", AblationConfig { rse: false, cee: CeeMode::SumAll }),
        ("single_stage_cee", AblationConfig { rse: true, cee: single }),
        ("full", AblationConfig { rse: true, cee: CeeMode::SumAll }),
    ]
    .into_iter()
    .map(|(name, ablation)| AblateVariant {
        name: name.to_string(),
        config: config.clone(),
        ablation,
    })
    .collect()
}

/// Stage-count sweep of the full configuration.
pub fn stage_sweep(config: &ModelConfig, stage_counts: &[usize]) -> Vec<AblateVariant> {
    stage_counts
        .iter()
        .map(|&s| {
            let mut c = config.clone();
            c.stages = s;
            AblateVariant {
                name: format!("stages_{s}"),
                config: c,
                ablation: AblationConfig::default(),
            }
        })
        .collect()
}

/// Train each variant from the same seed on the same split and score it.
/// Evaluation uses the validation split when non-empty, else the train
/// split.
pub fn run_ablation(
    variants: &[AblateVariant],
    train_graphs: &[DrawingGraph],
    val_graphs: &[DrawingGraph],
    classes: &ClassTable,
    train_cfg: &TrainConfig,
    seed: u64,
    mut on_progress: impl FnMut(&str, usize),
) -> Result<Vec<AblateRow>, TrainError> {
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        on_progress(&variant.name, rows.len());
        let mut model = ModelParams::new(variant.config.clone(), variant.ablation, seed)?;
        train(
            &mut model,
            train_graphs,
            &[],
            classes,
            train_cfg,
            None,
            |_| true,
        )?;
        let eval_graphs = if val_graphs.is_empty() {
            train_graphs
        } else {
            val_graphs
        };
        let pq: PqTriple = evaluate_pq(&model, eval_graphs, classes, train_cfg.prune_threshold)?;
        let acc = evaluate_accuracy(&model, eval_graphs)?;
        rows.push(AblateRow {
            name: variant.name.clone(),
            stages: variant.config.stages,
            rse: variant.ablation.rse,
            cee: match variant.ablation.cee {
                CeeMode::Off => "off".to_string(),
                CeeMode::SumAll => "sum".to_string(),
                CeeMode::Single(s) => format!("stage {}", s + 1),
            },
            pq: pq.pq,
            sq: pq.sq,
            rq: pq.rq,
            semantic_accuracy: acc,
        });
    }
    Ok(rows)
}

/// Plain-text comparison table.
pub fn format_table(rows: &[AblateRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:>6} {:>5} {:>9} {:>7} {:>7} {:>7} {:>7}\n",
        "config", "stages", "rse", "cee", "PQ", "SQ", "RQ", "acc"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<18} {:>6} {:>5} {:>9} {:>7.3} {:>7.3} {:>7.3} {:>7.3}\n",
            r.name,
            r.stages,
            if r.rse { "on" } else { "off" },
            r.cee,
            r.pq,
            r.sq,
            r.rq,
            r.semantic_accuracy
        ));
    }
    out
}
