//! Turn per-vertex class probabilities and per-edge adjacency predictions
//! into panoptic output: thing instances from connected components of the
//! pruned adjacency, plus one region per stuff class.

use serde::{Deserialize, Serialize};

use crate::classes::ClassTable;
use crate::geom::BoundingBox;
use crate::graph::DrawingGraph;

/// A predicted or ground-truth symbol: a class plus a set of member vertex
/// indices with a confidence score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolInstance {
    pub class_id: usize,
    /// Member vertex indices, ascending.
    pub members: Vec<usize>,
    pub confidence: f64,
    pub bbox: BoundingBox,
}

impl SymbolInstance {
    pub fn from_members(
        class_id: usize,
        mut members: Vec<usize>,
        confidence: f64,
        graph: &DrawingGraph,
    ) -> Self {
        members.sort_unstable();
        let bbox = BoundingBox::from_points(members.iter().flat_map(|&i| {
            let s = &graph.vertex(i).segment;
            [s.p, s.q]
        }));
        SymbolInstance {
            class_id,
            members,
            confidence,
            bbox,
        }
    }
}

/// Panoptic output for one drawing: per-vertex classes, thing instances,
/// and stuff regions. Thing instances partition the thing-labeled vertices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticPrediction {
    pub vertex_classes: Vec<usize>,
    pub instances: Vec<SymbolInstance>,
    pub stuff_regions: Vec<SymbolInstance>,
}

impl PanopticPrediction {
    pub fn symbols(&self) -> impl Iterator<Item = &SymbolInstance> {
        self.instances.iter().chain(self.stuff_regions.iter())
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.rank[ra] < self.rank[rb] {
            self.parent[ra] = rb;
        } else if self.rank[ra] > self.rank[rb] {
            self.parent[rb] = ra;
        } else {
            self.parent[rb] = ra;
            self.rank[ra] += 1;
        }
    }
}

/// Extraction procedure: symmetrize the directed adjacency by averaging,
/// keep edges above the prune threshold whose endpoints share the same
/// predicted thing class, and read instances off the connected components
/// within each class group. Singleton thing vertices become singleton
/// instances with confidence 1. Stuff vertices are grouped into one region
/// per class.
pub fn extract(
    y_probs: &[f64],
    num_classes: usize,
    z: &[f64],
    graph: &DrawingGraph,
    prune_threshold: f64,
    classes: &ClassTable,
) -> PanopticPrediction {
    let n = graph.num_vertices();
    assert_eq!(y_probs.len(), n * num_classes);
    assert_eq!(z.len(), graph.num_edges());

    let vertex_classes: Vec<usize> = y_probs
        .chunks(num_classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect();

    extract_with_classes(&vertex_classes, z, graph, prune_threshold, classes)
}

/// Same procedure, starting from already-decided per-vertex classes.
pub fn extract_with_classes(
    vertex_classes: &[usize],
    z: &[f64],
    graph: &DrawingGraph,
    prune_threshold: f64,
    classes: &ClassTable,
) -> PanopticPrediction {
    let n = graph.num_vertices();
    let mut uf = UnionFind::new(n);
    // Symmetrized intensity per directed edge.
    let z_bar: Vec<f64> = (0..graph.num_edges())
        .map(|e| 0.5 * (z[e] + z[graph.reverse_edge(e)]))
        .collect();

    let mut kept: Vec<usize> = Vec::new();
    for e in 0..graph.num_edges() {
        let (i, j) = (graph.edge_src(e), graph.edge_dst(e));
        if i >= j {
            continue; // one direction per undirected pair
        }
        if z_bar[e] > prune_threshold
            && vertex_classes[i] == vertex_classes[j]
            && classes.is_thing(vertex_classes[i])
        {
            uf.union(i, j);
            kept.push(e);
        }
    }

    // Components over thing vertices, in order of their lowest member.
    let mut component_of: Vec<Option<usize>> = vec![None; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for v in 0..n {
        if !classes.is_thing(vertex_classes[v]) {
            continue;
        }
        let root = uf.find(v);
        let slot = match component_of[root] {
            Some(s) => s,
            None => {
                members.push(Vec::new());
                component_of[root] = Some(members.len() - 1);
                members.len() - 1
            }
        };
        members[slot].push(v);
    }

    // Confidence: mean symmetrized intensity over the kept internal edges.
    let mut conf_sum = vec![0.0f64; members.len()];
    let mut conf_count = vec![0usize; members.len()];
    for &e in &kept {
        let root = uf.find(graph.edge_src(e));
        if let Some(slot) = component_of[root] {
            conf_sum[slot] += z_bar[e];
            conf_count[slot] += 1;
        }
    }

    let instances: Vec<SymbolInstance> = members
        .into_iter()
        .enumerate()
        .map(|(slot, m)| {
            let confidence = if conf_count[slot] == 0 {
                1.0
            } else {
                conf_sum[slot] / conf_count[slot] as f64
            };
            let class_id = vertex_classes[m[0]];
            SymbolInstance::from_members(class_id, m, confidence, graph)
        })
        .collect();

    let stuff_regions = stuff_regions(vertex_classes, classes, graph);

    PanopticPrediction {
        vertex_classes: vertex_classes.to_vec(),
        instances,
        stuff_regions,
    }
}

fn stuff_regions(
    vertex_classes: &[usize],
    classes: &ClassTable,
    graph: &DrawingGraph,
) -> Vec<SymbolInstance> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (v, &c) in vertex_classes.iter().enumerate() {
        if classes.is_stuff(c) {
            by_class.entry(c).or_default().push(v);
        }
    }
    by_class
        .into_iter()
        .map(|(c, m)| SymbolInstance::from_members(c, m, 1.0, graph))
        .collect()
}

/// Panoptic ground truth straight from the graph labels: one instance per
/// distinct instance id, one region per stuff class present.
pub fn ground_truth_prediction(graph: &DrawingGraph, classes: &ClassTable) -> PanopticPrediction {
    let vertex_classes = graph.semantic_labels();
    let mut by_instance: std::collections::BTreeMap<i64, Vec<usize>> = Default::default();
    for v in 0..graph.num_vertices() {
        let id = graph.vertex(v).instance_id;
        if id >= 0 {
            by_instance.entry(id).or_default().push(v);
        }
    }
    let instances = by_instance
        .into_values()
        .map(|m| {
            let class_id = vertex_classes[m[0]];
            SymbolInstance::from_members(class_id, m, 1.0, graph)
        })
        .collect();
    let stuff_regions = stuff_regions(&vertex_classes, classes, graph);
    PanopticPrediction {
        vertex_classes,
        instances,
        stuff_regions,
    }
}
