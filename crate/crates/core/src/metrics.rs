//! Evaluation: length-weighted primitive IoU, panoptic quality
//! (PQ = RQ x SQ), micro-averaged semantic F1 (plain and length-weighted),
//! and box average precision for detection-style comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::{PanopticPrediction, SymbolInstance};
use crate::geom::BoundingBox;
use crate::graph::DrawingGraph;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("instances overlap: vertex {0} appears in more than one symbol")]
    OverlappingInstances(usize),
    #[error("matching produced a double match, which IoU > 0.5 on partitions forbids")]
    DoubleMatch,
}

/// Matched pairs and leftovers of one drawing's matching.
#[derive(Clone, Debug, Default)]
pub struct MatchResult {
    /// (prediction index, ground-truth index, IoU); every IoU > 0.5.
    pub tp: Vec<(usize, usize, f64)>,
    /// Unmatched prediction indices.
    pub fp: Vec<usize>,
    /// Unmatched ground-truth indices.
    pub fn_: Vec<usize>,
}

/// Length-weighted IoU of two symbols: summed mm length of the shared
/// members over the summed length of the union; 0 when classes differ.
pub fn symbol_iou(a: &SymbolInstance, b: &SymbolInstance, graph: &DrawingGraph) -> f64 {
    if a.class_id != b.class_id {
        return 0.0;
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    let (mut i, mut j) = (0, 0);
    // Member lists are sorted.
    while i < a.members.len() && j < b.members.len() {
        let (va, vb) = (a.members[i], b.members[j]);
        if va == vb {
            let len = graph.vertex(va).segment.length();
            inter += len;
            union += len;
            i += 1;
            j += 1;
        } else if va < vb {
            union += graph.vertex(va).segment.length();
            i += 1;
        } else {
            union += graph.vertex(vb).segment.length();
            j += 1;
        }
    }
    for &v in &a.members[i..] {
        union += graph.vertex(v).segment.length();
    }
    for &v in &b.members[j..] {
        union += graph.vertex(v).segment.length();
    }
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn check_partition(symbols: &[&SymbolInstance], n: usize) -> Result<(), MetricsError> {
    let mut seen = vec![false; n];
    for s in symbols {
        for &m in &s.members {
            if seen[m] {
                return Err(MetricsError::OverlappingInstances(m));
            }
            seen[m] = true;
        }
    }
    Ok(())
}

/// Match predictions to ground truth at IoU > 0.5. On partitions that
/// threshold makes the match unique; uniqueness is asserted, not assumed.
pub fn match_symbols(
    preds: &[SymbolInstance],
    gts: &[SymbolInstance],
    graph: &DrawingGraph,
) -> Result<MatchResult, MetricsError> {
    check_partition(&preds.iter().collect::<Vec<_>>(), graph.num_vertices())?;
    check_partition(&gts.iter().collect::<Vec<_>>(), graph.num_vertices())?;

    let mut result = MatchResult::default();
    let mut pred_matched = vec![false; preds.len()];
    let mut gt_matched = vec![false; gts.len()];
    for (pi, p) in preds.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            let iou = symbol_iou(p, g, graph);
            if iou > 0.5 {
                if pred_matched[pi] || gt_matched[gi] {
                    return Err(MetricsError::DoubleMatch);
                }
                pred_matched[pi] = true;
                gt_matched[gi] = true;
                result.tp.push((pi, gi, iou));
            }
        }
    }
    result.fp = (0..preds.len()).filter(|&i| !pred_matched[i]).collect();
    result.fn_ = (0..gts.len()).filter(|&i| !gt_matched[i]).collect();
    Ok(result)
}

/// Pooled panoptic counts; accumulates across drawings and classes.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct PqAccumulator {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

impl PqAccumulator {
    pub fn add_match(&mut self, m: &MatchResult) {
        self.tp += m.tp.len();
        self.fp += m.fp.len();
        self.fn_ += m.fn_.len();
        self.iou_sum += m.tp.iter().map(|(_, _, iou)| iou).sum::<f64>();
    }

    pub fn merge(&mut self, other: &PqAccumulator) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }

    pub fn finish(&self) -> PqTriple {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        let rq = if denom == 0.0 {
            0.0
        } else {
            self.tp as f64 / denom
        };
        let sq = if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        };
        PqTriple {
            pq: rq * sq,
            sq,
            rq,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqTriple {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// Panoptic quality of one drawing: overall (pooled over all symbols),
/// per class, and the class-count-weighted total.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PanopticReport {
    pub overall: PqTriple,
    pub per_class: BTreeMap<usize, PqTriple>,
    /// Per-class values averaged with ground-truth symbol counts as weights.
    pub class_weighted: PqTriple,
}

pub fn panoptic_quality(
    pred: &PanopticPrediction,
    gt: &PanopticPrediction,
    graph: &DrawingGraph,
) -> Result<PanopticReport, MetricsError> {
    let preds: Vec<SymbolInstance> = pred.symbols().cloned().collect();
    let gts: Vec<SymbolInstance> = gt.symbols().cloned().collect();
    panoptic_quality_symbols(&preds, &gts, graph)
}

/// Panoptic quality over raw symbol lists (things and stuff alike).
pub fn panoptic_quality_symbols(
    preds: &[SymbolInstance],
    gts: &[SymbolInstance],
    graph: &DrawingGraph,
) -> Result<PanopticReport, MetricsError> {
    let mut agg = PqAggregate::default();
    agg.add_drawing(preds, gts, graph)?;
    Ok(agg.finish())
}

/// Pooled panoptic quality over any number of drawings: overall counts,
/// per-class counts, and ground-truth class frequencies for the weighted
/// total.
#[derive(Clone, Debug, Default)]
pub struct PqAggregate {
    overall: PqAccumulator,
    per_class: BTreeMap<usize, PqAccumulator>,
    gt_counts: BTreeMap<usize, usize>,
}

impl PqAggregate {
    pub fn add_drawing(
        &mut self,
        preds: &[SymbolInstance],
        gts: &[SymbolInstance],
        graph: &DrawingGraph,
    ) -> Result<(), MetricsError> {
        let m = match_symbols(preds, gts, graph)?;
        self.overall.add_match(&m);
        for &(pi, _, iou) in &m.tp {
            let acc = self.per_class.entry(preds[pi].class_id).or_default();
            acc.tp += 1;
            acc.iou_sum += iou;
        }
        for &pi in &m.fp {
            self.per_class.entry(preds[pi].class_id).or_default().fp += 1;
        }
        for &gi in &m.fn_ {
            self.per_class.entry(gts[gi].class_id).or_default().fn_ += 1;
        }
        for g in gts {
            *self.gt_counts.entry(g.class_id).or_default() += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> PanopticReport {
        let per_class: BTreeMap<usize, PqTriple> = self
            .per_class
            .iter()
            .map(|(&c, acc)| (c, acc.finish()))
            .collect();
        let mut weighted = PqTriple::default();
        let total: usize = self.gt_counts.values().sum();
        if total > 0 {
            for (&c, &count) in &self.gt_counts {
                if let Some(t) = per_class.get(&c) {
                    let w = count as f64 / total as f64;
                    weighted.pq += w * t.pq;
                    weighted.sq += w * t.sq;
                    weighted.rq += w * t.rq;
                }
            }
        }
        PanopticReport {
            overall: self.overall.finish(),
            per_class,
            class_weighted: weighted,
        }
    }
}

/// Micro-averaged semantic F1 over non-background primitives.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct F1Report {
    pub f1: f64,
    pub length_weighted_f1: f64,
    /// True when either side has no non-background primitives at all and
    /// the score was pinned to 0 instead of being undefined.
    pub degenerate: bool,
}

pub fn semantic_f1(
    pred_classes: &[usize],
    gt_classes: &[usize],
    lengths_mm: &[f64],
    background_id: usize,
) -> F1Report {
    assert_eq!(pred_classes.len(), gt_classes.len());
    assert_eq!(pred_classes.len(), lengths_mm.len());
    let mut tp = 0.0f64;
    let mut pred_pos = 0.0f64;
    let mut gt_pos = 0.0f64;
    let mut tp_w = 0.0f64;
    let mut pred_pos_w = 0.0f64;
    let mut gt_pos_w = 0.0f64;
    for i in 0..pred_classes.len() {
        let w = lengths_mm[i];
        if pred_classes[i] != background_id {
            pred_pos += 1.0;
            pred_pos_w += w;
        }
        if gt_classes[i] != background_id {
            gt_pos += 1.0;
            gt_pos_w += w;
        }
        if pred_classes[i] == gt_classes[i] && gt_classes[i] != background_id {
            tp += 1.0;
            tp_w += w;
        }
    }
    let f1_of = |tp: f64, pred: f64, gt: f64| {
        if pred == 0.0 || gt == 0.0 {
            return (0.0, true);
        }
        let precision = tp / pred;
        let recall = tp / gt;
        if precision + recall == 0.0 {
            (0.0, false)
        } else {
            (2.0 * precision * recall / (precision + recall), false)
        }
    };
    let (f1, d1) = f1_of(tp, pred_pos, gt_pos);
    let (f1w, d2) = f1_of(tp_w, pred_pos_w, gt_pos_w);
    F1Report {
        f1,
        length_weighted_f1: f1w,
        degenerate: d1 || d2,
    }
}

/// A detection for box AP: axis-aligned box, class, and confidence.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ApReport {
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
}

/// Detections and ground-truth boxes of one drawing.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DrawingDetections {
    pub preds: Vec<Detection>,
    pub gts: Vec<GtBox>,
}

/// Average precision with greedy matching by descending confidence and
/// 101-point interpolation. `map` averages the IoU thresholds
/// 0.50:0.05:0.95; classes without ground truth are skipped.
pub fn detection_ap(preds: &[Detection], gts: &[GtBox]) -> ApReport {
    detection_ap_multi(&[DrawingDetections {
        preds: preds.to_vec(),
        gts: gts.to_vec(),
    }])
}

/// AP pooled over drawings: matching is per drawing, the precision-recall
/// curve is global over all detections ranked by confidence.
pub fn detection_ap_multi(drawings: &[DrawingDetections]) -> ApReport {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        per_threshold.push(mean_ap_at(drawings, t));
    }
    ApReport {
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        map: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
    }
}

fn mean_ap_at(drawings: &[DrawingDetections], iou_threshold: f64) -> f64 {
    let mut class_ids: Vec<usize> = drawings
        .iter()
        .flat_map(|d| d.gts.iter().map(|g| g.class_id))
        .collect();
    class_ids.sort_unstable();
    class_ids.dedup();
    if class_ids.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &class_ids {
        total += ap_single_class(drawings, c, iou_threshold);
    }
    total / class_ids.len() as f64
}

fn ap_single_class(drawings: &[DrawingDetections], class_id: usize, iou_threshold: f64) -> f64 {
    // Rank all detections of the class globally by confidence (stable on
    // ties by drawing then index), matching greedily within each drawing.
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    let mut n_gt = 0usize;
    for (di, d) in drawings.iter().enumerate() {
        for (pi, p) in d.preds.iter().enumerate() {
            if p.class_id == class_id {
                ranked.push((di, pi));
            }
        }
        n_gt += d.gts.iter().filter(|g| g.class_id == class_id).count();
    }
    if n_gt == 0 {
        return 0.0;
    }
    ranked.sort_by(|&(da, pa), &(db, pb)| {
        drawings[db].preds[pb]
            .confidence
            .partial_cmp(&drawings[da].preds[pa].confidence)
            .unwrap()
            .then(da.cmp(&db))
            .then(pa.cmp(&pb))
    });

    let mut gt_used: Vec<Vec<bool>> = drawings.iter().map(|d| vec![false; d.gts.len()]).collect();
    let mut tps = Vec::with_capacity(ranked.len());
    for &(di, pi) in &ranked {
        let d = &drawings[di];
        let mut best = -1.0f64;
        let mut best_g = None;
        for (gi, g) in d.gts.iter().enumerate() {
            if g.class_id != class_id || gt_used[di][gi] {
                continue;
            }
            let iou = d.preds[pi].bbox.iou(&g.bbox);
            if iou >= iou_threshold && iou > best {
                best = iou;
                best_g = Some(gi);
            }
        }
        match best_g {
            Some(gi) => {
                gt_used[di][gi] = true;
                tps.push(true);
            }
            None => tps.push(false),
        }
    }

    // Precision-recall curve, then 101-point interpolated AP.
    let n_gt = n_gt as f64;
    let mut tp_cum = 0.0;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tps.len());
    for (rank, &is_tp) in tps.iter().enumerate() {
        if is_tp {
            tp_cum += 1.0;
        }
        let precision = tp_cum / (rank as f64 + 1.0);
        let recall = tp_cum / n_gt;
        points.push((recall, precision));
    }
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, prec)| *prec)
            .fold(0.0f64, f64::max);
        ap += p;
    }
    ap / 101.0
}

/// Full evaluation output over a dataset split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub drawings: usize,
    pub panoptic: PqTriple,
    pub per_class: BTreeMap<usize, PqTriple>,
    pub class_names: BTreeMap<usize, String>,
    pub class_weighted: PqTriple,
    pub f1: F1Report,
    pub detection: ApReport,
}
