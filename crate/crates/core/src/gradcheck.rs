//! End-to-end gradient verification: the full network and panoptic loss on
//! a small fixed drawing, checked against central finite differences over
//! every parameter.

use crate::autodiff::{finite_difference_check, FdReport, Tape};
use crate::geom::{Point, Primitive};
use crate::graph::{build_graph, DrawingGraph, GraphConfig};
use crate::model::{AblationConfig, ModelConfig, ModelParams};
use crate::train::{drawing_loss, TrainConfig, TrainError};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckSettings {
    pub seed: u64,
    /// Central-difference step.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        // Seed chosen so no relu activation sits within the probe step of
        // its kink; finite differences are meaningless across a kink.
        GradCheckSettings {
            seed: 101,
            h: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// Twelve primitives: a door-like chain, a window-like quad, two wall
/// segments, and background clutter; mixed kinds and angles. Every vertex
/// has at least one neighbor, so no attention aggregate is exactly zero
/// (an all-zero aggregate with zero-initialized biases would park relu
/// activations exactly on their kink, which finite differences cannot
/// probe meaningfully).
pub fn fixture_drawing() -> Vec<Primitive> {
    vec![
        // Door-ish instance 0 (class 2): chained segments and an arc.
        Primitive::segment(Point::new(0.0, 0.0), Point::new(0.0, 900.0), 2, 0),
        Primitive::arc(Point::new(0.0, 0.0), 900.0, 0.0, std::f64::consts::FRAC_PI_2, 2, 0),
        Primitive::segment(Point::new(900.0, -60.0), Point::new(900.0, 60.0), 2, 0),
        // Window-ish instance 1 (class 3): four parallel segments.
        Primitive::segment(Point::new(2000.0, 100.0), Point::new(3200.0, 100.0), 3, 1),
        Primitive::segment(Point::new(2000.0, 180.0), Point::new(3200.0, 180.0), 3, 1),
        Primitive::segment(Point::new(2000.0, 260.0), Point::new(3200.0, 260.0), 3, 1),
        Primitive::segment(Point::new(2000.0, 340.0), Point::new(3200.0, 340.0), 3, 1),
        // Wall (stuff, class 1).
        Primitive::segment(Point::new(-500.0, -200.0), Point::new(3500.0, -200.0), 1, -1),
        Primitive::segment(Point::new(-500.0, -320.0), Point::new(3500.0, -320.0), 1, -1),
        // Background clutter (class 0), one circle and one ellipse for
        // kind coverage, each within reach of the symbols above.
        Primitive::circle(Point::new(1800.0, 250.0), 200.0, 0, -1),
        Primitive::ellipse(Point::new(2600.0, 550.0), 300.0, 150.0, 0.5, 0, -1),
        Primitive::segment(Point::new(350.0, 950.0), Point::new(700.0, 1100.0), 0, -1),
    ]
}

pub fn fixture_graph() -> DrawingGraph {
    build_graph(&fixture_drawing(), &GraphConfig::default()).expect("fixture graph builds")
}

fn fixture_model(seed: u64) -> Result<ModelParams, TrainError> {
    // Small full model: 2 stages, 2 heads, width 32, 4 classes.
    let config = ModelConfig::with_width(2, 2, 32, 4);
    Ok(ModelParams::new(config, AblationConfig::default(), seed)?)
}

/// Analytic gradients of the panoptic loss on the fixture versus central
/// finite differences over all parameters.
pub fn model_gradient_check(settings: &GradCheckSettings) -> Result<FdReport, TrainError> {
    let graph = fixture_graph();
    let model = fixture_model(settings.seed)?;
    let train_cfg = TrainConfig::default();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let (loss, _) = drawing_loss(&mut tape, &model, &bound, &graph, &train_cfg)?;
    let grads = tape.backward(loss)?;
    let ad_grads = model.gradients_by_param(&grads, &bound);

    let names = model.param_names();
    let mut values = model.param_values();
    let template = model.clone();
    let eval = |params: &[Vec<f64>]| {
        let mut m = template.clone();
        m.set_param_values(params).expect("aligned parameter arrays");
        let mut t = Tape::new();
        let b = m.bind(&mut t).expect("bind");
        let (l, _) = drawing_loss(&mut t, &m, &b, &graph, &train_cfg).expect("loss");
        t.scalar_value(l)
    };

    Ok(finite_difference_check(
        eval,
        &mut values,
        &names,
        &ad_grads,
        settings.h,
        settings.tolerance,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_has_twelve_vertices_and_edges() {
        let g = fixture_graph();
        assert_eq!(g.num_vertices(), 12);
        assert!(g.num_edges() > 0);
    }

    #[test]
    fn gradients_are_finite_on_fixture() {
        let graph = fixture_graph();
        let model = fixture_model(1).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let (loss, parts) =
            drawing_loss(&mut tape, &model, &bound, &graph, &TrainConfig::default()).unwrap();
        assert!(parts.total.is_finite());
        let grads = tape.backward(loss).unwrap();
        for g in model.gradients_by_param(&grads, &bound) {
            assert!(g.iter().all(|v| v.is_finite()));
        }
    }
}
