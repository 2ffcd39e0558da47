//! Procedural labeled floor plans for desk-scale training and tests:
//! a wall grid with doors (arc + two segments), windows (four parallel
//! segments), tables (rectangle + corner legs), and optional background
//! clutter. Labels are assigned by construction and every thing instance
//! is chained within the default graph epsilon.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::{ClassInfo, ClassKind, ClassTable};
use crate::dataset::DrawingRecord;
use crate::geom::{Point, Primitive};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub rooms_x: usize,
    pub rooms_y: usize,
    /// Probability of a door per interior wall run.
    pub door_prob: f64,
    /// Probability of a window per boundary wall run.
    pub window_prob: f64,
    /// Probability of a table per room; 0 drops the class entirely.
    pub table_prob: f64,
    /// Maximum number of unlabeled clutter segments per drawing.
    pub clutter_max: usize,
    pub block_extent: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            rooms_x: 2,
            rooms_y: 2,
            door_prob: 0.7,
            window_prob: 0.6,
            table_prob: 0.7,
            clutter_max: 3,
            block_extent: 10_000.0,
        }
    }
}

impl SynthSpec {
    /// Variant without the table class (4 classes total).
    pub fn without_tables() -> Self {
        SynthSpec {
            table_prob: 0.0,
            ..SynthSpec::default()
        }
    }

    /// Class table implied by the enabled templates: background and wall
    /// always; door/window/table only when their probability is positive.
    pub fn class_table(&self) -> ClassTable {
        let mut classes = vec![
            ClassInfo {
                id: 0,
                name: "background".into(),
                kind: ClassKind::Background,
            },
            ClassInfo {
                id: 1,
                name: "wall".into(),
                kind: ClassKind::Stuff,
            },
        ];
        let mut next = 2;
        let mut push = |name: &str| {
            classes.push(ClassInfo {
                id: next,
                name: name.into(),
                kind: ClassKind::Thing,
            });
            next += 1;
        };
        if self.door_prob > 0.0 {
            push("door");
        }
        if self.window_prob > 0.0 {
            push("window");
        }
        if self.table_prob > 0.0 {
            push("table");
        }
        ClassTable::new(classes).expect("synthetic class table is valid")
    }

    fn door_class(&self) -> Option<usize> {
        (self.door_prob > 0.0).then_some(2)
    }

    fn window_class(&self) -> Option<usize> {
        (self.window_prob > 0.0).then(|| 2 + usize::from(self.door_prob > 0.0))
    }

    fn table_class(&self) -> Option<usize> {
        (self.table_prob > 0.0).then(|| {
            2 + usize::from(self.door_prob > 0.0) + usize::from(self.window_prob > 0.0)
        })
    }

    pub fn door_slots(&self) -> usize {
        (self.rooms_y.saturating_sub(1)) * self.rooms_x
            + (self.rooms_x.saturating_sub(1)) * self.rooms_y
    }

    pub fn window_slots(&self) -> usize {
        2 * self.rooms_x + 2 * self.rooms_y
    }

    pub fn table_slots(&self) -> usize {
        self.rooms_x * self.rooms_y
    }
}

const WALL_HALF_THICKNESS: f64 = 60.0;
const DOOR_WIDTH: f64 = 900.0;
const WINDOW_HALF_LEN: f64 = 600.0;
/// Offsets of the four window lines from the wall centerline.
const WINDOW_OFFSETS: [f64; 4] = [-200.0, -80.0, 80.0, 200.0];
const MIN_WALL_PIECE: f64 = 50.0;

struct WallRun {
    start: Point,
    /// Unit direction along the run.
    dir: Point,
    /// Unit normal (left of dir).
    normal: Point,
    length: f64,
    interior: bool,
}

enum Cut {
    Door { at: f64, flip: bool },
    Window { at: f64 },
}

impl Cut {
    fn interval(&self) -> (f64, f64) {
        match self {
            Cut::Door { at, .. } => (*at, *at + DOOR_WIDTH),
            Cut::Window { at } => (*at - WINDOW_HALF_LEN, *at + WINDOW_HALF_LEN),
        }
    }
}

/// Generate `n_drawings` labeled drawings. Deterministic per seed.
pub fn generate_synthetic(
    seed: u64,
    n_drawings: usize,
    spec: &SynthSpec,
) -> (ClassTable, Vec<DrawingRecord>) {
    let classes = spec.class_table();
    let records = (0..n_drawings)
        .map(|i| generate_drawing(seed, i, spec))
        .collect();
    (classes, records)
}

/// Generate a single drawing (`index` distinguishes drawings of one seed).
pub fn generate_drawing(seed: u64, index: usize, spec: &SynthSpec) -> DrawingRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64),
    );
    let mut record = DrawingRecord::new(format!("synth-{seed}-{index:04}"));
    record.block_extent = [spec.block_extent, spec.block_extent];
    let mut next_instance: i64 = 0;

    let margin = 500.0;
    let span_x = (spec.block_extent - 2.0 * margin) / spec.rooms_x as f64;
    let span_y = (spec.block_extent - 2.0 * margin) / spec.rooms_y as f64;
    let xs: Vec<f64> = (0..=spec.rooms_x).map(|i| margin + i as f64 * span_x).collect();
    let ys: Vec<f64> = (0..=spec.rooms_y).map(|j| margin + j as f64 * span_y).collect();

    let mut runs: Vec<WallRun> = Vec::new();
    for (j, &y) in ys.iter().enumerate() {
        for i in 0..spec.rooms_x {
            runs.push(WallRun {
                start: Point::new(xs[i], y),
                dir: Point::new(1.0, 0.0),
                normal: Point::new(0.0, 1.0),
                length: xs[i + 1] - xs[i],
                interior: j > 0 && j < spec.rooms_y,
            });
        }
    }
    for (i, &x) in xs.iter().enumerate() {
        for j in 0..spec.rooms_y {
            runs.push(WallRun {
                start: Point::new(x, ys[j]),
                dir: Point::new(0.0, 1.0),
                normal: Point::new(-1.0, 0.0),
                length: ys[j + 1] - ys[j],
                interior: i > 0 && i < spec.rooms_x,
            });
        }
    }

    for run in &runs {
        let mut cuts: Vec<Cut> = Vec::new();
        if run.interior && spec.door_prob > 0.0 && rng.random_bool(spec.door_prob) {
            let lo = 300.0;
            let hi = run.length - DOOR_WIDTH - 300.0;
            if hi > lo {
                cuts.push(Cut::Door {
                    at: rng.random_range(lo..hi),
                    flip: rng.random_bool(0.5),
                });
            }
        }
        if !run.interior && spec.window_prob > 0.0 && rng.random_bool(spec.window_prob) {
            let lo = WINDOW_HALF_LEN + 300.0;
            let hi = run.length - WINDOW_HALF_LEN - 300.0;
            if hi > lo {
                cuts.push(Cut::Window {
                    at: rng.random_range(lo..hi),
                });
            }
        }

        emit_wall_pieces(&mut record, run, &cuts);
        for cut in &cuts {
            match cut {
                Cut::Door { at, flip } => {
                    emit_door(
                        &mut record,
                        run,
                        *at,
                        *flip,
                        spec.door_class().unwrap(),
                        next_instance,
                    );
                    next_instance += 1;
                }
                Cut::Window { at } => {
                    emit_window(
                        &mut record,
                        run,
                        *at,
                        spec.window_class().unwrap(),
                        next_instance,
                    );
                    next_instance += 1;
                }
            }
        }
    }

    if let Some(table_class) = spec.table_class() {
        for i in 0..spec.rooms_x {
            for j in 0..spec.rooms_y {
                if !rng.random_bool(spec.table_prob) {
                    continue;
                }
                let cx = 0.5 * (xs[i] + xs[i + 1]) + rng.random_range(-200.0..200.0);
                let cy = 0.5 * (ys[j] + ys[j + 1]) + rng.random_range(-200.0..200.0);
                let half_w = rng.random_range(500.0..800.0);
                let half_h = rng.random_range(300.0..450.0);
                emit_table(
                    &mut record,
                    Point::new(cx, cy),
                    half_w,
                    half_h,
                    table_class,
                    next_instance,
                );
                next_instance += 1;
            }
        }
    }

    let clutter = if spec.clutter_max == 0 {
        0
    } else {
        rng.random_range(0..=spec.clutter_max)
    };
    for _ in 0..clutter {
        let x = rng.random_range(margin + 300.0..spec.block_extent - margin - 700.0);
        let y = rng.random_range(margin + 300.0..spec.block_extent - margin - 700.0);
        let len = rng.random_range(100.0..400.0);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        record.primitives.push(Primitive::segment(
            Point::new(x, y),
            Point::new(x + len * angle.cos(), y + len * angle.sin()),
            0,
            -1,
        ));
    }

    record
}

fn emit_wall_pieces(record: &mut DrawingRecord, run: &WallRun, cuts: &[Cut]) {
    let mut intervals: Vec<(f64, f64)> = cuts.iter().map(|c| c.interval()).collect();
    intervals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut pieces: Vec<(f64, f64)> = Vec::new();
    let mut cursor = 0.0;
    for (lo, hi) in intervals {
        if lo - cursor >= MIN_WALL_PIECE {
            pieces.push((cursor, lo));
        }
        cursor = hi;
    }
    if run.length - cursor >= MIN_WALL_PIECE {
        pieces.push((cursor, run.length));
    }
    for offset in [-WALL_HALF_THICKNESS, WALL_HALF_THICKNESS] {
        let shift = run.normal.scale(offset);
        for &(a, b) in &pieces {
            record.primitives.push(Primitive::segment(
                run.start.add(run.dir.scale(a)).add(shift),
                run.start.add(run.dir.scale(b)).add(shift),
                1,
                -1,
            ));
        }
    }
}

/// Door: leaf segment from the hinge, quarter arc to the far jamb, and a
/// jamb stub across the wall. All three chain through shared endpoints.
fn emit_door(
    record: &mut DrawingRecord,
    run: &WallRun,
    at: f64,
    flip: bool,
    class: usize,
    instance: i64,
) {
    let normal = if flip {
        run.normal.scale(-1.0)
    } else {
        run.normal
    };
    let hinge = run.start.add(run.dir.scale(at));
    let far = hinge.add(run.dir.scale(DOOR_WIDTH));
    let tip = hinge.add(normal.scale(DOOR_WIDTH));
    record
        .primitives
        .push(Primitive::segment(hinge, tip, class, instance));
    let start_angle = run.dir.y.atan2(run.dir.x);
    let end_angle = normal.y.atan2(normal.x);
    record.primitives.push(Primitive::arc(
        hinge,
        DOOR_WIDTH,
        start_angle,
        end_angle,
        class,
        instance,
    ));
    record.primitives.push(Primitive::segment(
        far.add(run.normal.scale(-WALL_HALF_THICKNESS)),
        far.add(run.normal.scale(WALL_HALF_THICKNESS)),
        class,
        instance,
    ));
}

/// Window: four parallel segments across the wall gap.
fn emit_window(record: &mut DrawingRecord, run: &WallRun, at: f64, class: usize, instance: i64) {
    let center = run.start.add(run.dir.scale(at));
    for offset in WINDOW_OFFSETS {
        let shift = run.normal.scale(offset);
        record.primitives.push(Primitive::segment(
            center.add(run.dir.scale(-WINDOW_HALF_LEN)).add(shift),
            center.add(run.dir.scale(WINDOW_HALF_LEN)).add(shift),
            class,
            instance,
        ));
    }
}

/// Table: rectangle plus a short diagonal leg mark at each corner.
fn emit_table(
    record: &mut DrawingRecord,
    center: Point,
    half_w: f64,
    half_h: f64,
    class: usize,
    instance: i64,
) {
    let corners = [
        Point::new(center.x - half_w, center.y - half_h),
        Point::new(center.x + half_w, center.y - half_h),
        Point::new(center.x + half_w, center.y + half_h),
        Point::new(center.x - half_w, center.y + half_h),
    ];
    for i in 0..4 {
        record.primitives.push(Primitive::segment(
            corners[i],
            corners[(i + 1) % 4],
            class,
            instance,
        ));
    }
    let leg = 150.0;
    let inward = [
        Point::new(leg, leg),
        Point::new(-leg, leg),
        Point::new(-leg, -leg),
        Point::new(leg, -leg),
    ];
    for i in 0..4 {
        record.primitives.push(Primitive::segment(
            corners[i],
            corners[i].add(inward[i]),
            class,
            instance,
        ));
    }
}
