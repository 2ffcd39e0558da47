//! SVG 1.1 rendering of drawings: one path element per primitive with a
//! class-indexed color palette, plus optional translucent instance boxes
//! with class and confidence labels.

use std::fmt::Write as _;

use crate::classes::ClassTable;
use crate::dataset::DrawingRecord;
use crate::extract::PanopticPrediction;
use crate::geom::{Point, PrimitiveGeometry};

#[derive(Clone, Copy, Debug)]
pub struct RenderOptions {
    pub stroke_width: f64,
    pub margin: f64,
    pub show_instances: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            stroke_width: 15.0,
            margin: 200.0,
            show_instances: true,
        }
    }
}

const BACKGROUND_COLOR: &str = "#c8c8c8";

/// Stable per-class color: golden-angle hue walk; background light gray.
pub fn class_color(class_id: usize, classes: &ClassTable) -> String {
    if class_id == classes.background_id() {
        return BACKGROUND_COLOR.to_string();
    }
    let hue = (class_id as f64 * 137.508) % 360.0;
    hsv_to_hex(hue, 0.70, 0.80)
}

fn hsv_to_hex(h: f64, s: f64, v: f64) -> String {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    format!(
        "#{:02x}{:02x}{:02x}",
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8
    )
}

/// Render a record (and optionally a panoptic prediction overlay) as an
/// SVG document. Geometry is in millimeters with +y up; the renderer flips
/// to SVG screen coordinates.
pub fn render_svg(
    record: &DrawingRecord,
    prediction: Option<&PanopticPrediction>,
    classes: &ClassTable,
    options: &RenderOptions,
) -> String {
    let [w, h] = record.block_extent;
    let m = options.margin;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" viewBox="{} {} {} {}">"#,
        -m,
        -m,
        w + 2.0 * m,
        h + 2.0 * m
    )
    .unwrap();
    writeln!(
        svg,
        r##"  <rect x="{}" y="{}" width="{}" height="{}" fill="#ffffff"/>"##,
        -m,
        -m,
        w + 2.0 * m,
        h + 2.0 * m
    )
    .unwrap();

    let flip = |p: Point| Point::new(p.x, h - p.y);
    for prim in &record.primitives {
        let color = class_color(prim.semantic_label, classes);
        let d = path_data(&prim.geometry, &flip);
        writeln!(
            svg,
            r#"  <path d="{d}" fill="none" stroke="{color}" stroke-width="{}" stroke-linecap="round"/>"#,
            options.stroke_width
        )
        .unwrap();
    }

    if let (Some(pred), true) = (prediction, options.show_instances) {
        for inst in &pred.instances {
            let color = class_color(inst.class_id, classes);
            let min = flip(Point::new(inst.bbox.min.x, inst.bbox.max.y));
            writeln!(
                svg,
                r#"  <rect x="{}" y="{}" width="{}" height="{}" fill="{color}" fill-opacity="0.15" stroke="{color}" stroke-width="{}" stroke-dasharray="40,40"/>"#,
                min.x,
                min.y,
                inst.bbox.width(),
                inst.bbox.height(),
                options.stroke_width * 0.6
            )
            .unwrap();
            writeln!(
                svg,
                r#"  <text x="{}" y="{}" font-size="140" fill="{color}">{} {:.2}</text>"#,
                min.x,
                min.y - 40.0,
                classes.name(inst.class_id),
                inst.confidence
            )
            .unwrap();
        }
    }

    svg.push_str("</svg>\n");
    svg
}

fn path_data(geometry: &PrimitiveGeometry, flip: &impl Fn(Point) -> Point) -> String {
    match geometry {
        PrimitiveGeometry::Segment { p, q } => {
            let (p, q) = (flip(*p), flip(*q));
            format!("M {} {} L {} {}", p.x, p.y, q.x, q.y)
        }
        PrimitiveGeometry::Arc {
            center,
            radius,
            start_angle,
            end_angle,
        } => {
            let at = |a: f64| {
                flip(Point::new(
                    center.x + radius * a.cos(),
                    center.y + radius * a.sin(),
                ))
            };
            let sweep = (end_angle - start_angle).rem_euclid(2.0 * std::f64::consts::PI);
            let start = at(*start_angle);
            let end = at(*end_angle);
            let large_arc = i32::from(sweep > std::f64::consts::PI);
            // Counterclockwise in drawing coordinates becomes sweep=0 after
            // the y flip.
            format!(
                "M {} {} A {radius} {radius} 0 {large_arc} 0 {} {}",
                start.x, start.y, end.x, end.y
            )
        }
        PrimitiveGeometry::Circle { center, radius } => {
            let west = flip(Point::new(center.x - radius, center.y));
            let east = flip(Point::new(center.x + radius, center.y));
            format!(
                "M {} {} A {radius} {radius} 0 1 0 {} {} A {radius} {radius} 0 1 0 {} {}",
                west.x, west.y, east.x, east.y, west.x, west.y
            )
        }
        PrimitiveGeometry::Ellipse {
            center,
            semi_major,
            semi_minor,
            rotation,
        } => {
            let axis = Point::new(semi_major * rotation.cos(), semi_major * rotation.sin());
            let p0 = flip(center.sub(axis));
            let p1 = flip(center.add(axis));
            let rot_deg = -rotation.to_degrees();
            format!(
                "M {} {} A {semi_major} {semi_minor} {rot_deg} 1 0 {} {} A {semi_major} {semi_minor} {rot_deg} 1 0 {} {}",
                p0.x, p0.y, p1.x, p1.y, p0.x, p0.y
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{generate_drawing, SynthSpec};
    use crate::extract::ground_truth_prediction;
    use crate::geom::Primitive;
    use crate::graph::{build_graph, GraphConfig};

    fn classes() -> ClassTable {
        SynthSpec::default().class_table()
    }

    #[test]
    fn empty_record_renders_canvas_only() {
        let record = DrawingRecord::new("empty");
        let svg = render_svg(&record, None, &classes(), &RenderOptions::default());
        assert!(svg.starts_with("<?xml"));
        assert!(svg.contains("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<path").count(), 0);
    }

    #[test]
    fn one_path_per_primitive() {
        let mut record = DrawingRecord::new("wall");
        record.primitives = vec![Primitive::segment(
            Point::new(0.0, 0.0),
            Point::new(1000.0, 0.0),
            1,
            -1,
        )];
        let svg = render_svg(&record, None, &classes(), &RenderOptions::default());
        assert_eq!(svg.matches("<path").count(), 1);

        let record = generate_drawing(5, 0, &SynthSpec::default());
        let svg = render_svg(&record, None, &classes(), &RenderOptions::default());
        assert_eq!(svg.matches("<path").count(), record.primitives.len());
    }

    #[test]
    fn overlay_adds_one_rect_per_thing_instance() {
        let spec = SynthSpec::default();
        let record = generate_drawing(9, 1, &spec);
        let graph = build_graph(&record.primitives, &GraphConfig::default()).unwrap();
        let gt = ground_truth_prediction(&graph, &spec.class_table());
        let svg = render_svg(&record, Some(&gt), &classes(), &RenderOptions::default());
        // Canvas rect plus one rect per instance.
        assert_eq!(svg.matches("<rect").count(), 1 + gt.instances.len());
        assert_eq!(svg.matches("<text").count(), gt.instances.len());
    }
}
