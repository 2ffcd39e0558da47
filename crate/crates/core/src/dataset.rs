//! Dataset serialization: one JSON record per drawing, a manifest per
//! split listing record paths plus the class table. Numbers round-trip at
//! full precision.

use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classes::{ClassTable, ClassTableError};
use crate::geom::{BoundingBox, Point, Primitive, PrimitiveGeometry};

pub mod render;
pub mod synth;

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: unsupported schema version {found}, expected {RECORD_SCHEMA_VERSION}")]
    VersionMismatch { path: PathBuf, found: u32 },
    #[error("{path}: invalid record: {reason}")]
    InvalidRecord { path: PathBuf, reason: String },
    #[error(transparent)]
    ClassTable(#[from] ClassTableError),
}

/// One drawing: primitives with ground truth inside a block extent
/// (default 10 m x 10 m).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrawingRecord {
    pub id: String,
    pub block_extent: [f64; 2],
    pub primitives: Vec<Primitive>,
}

impl DrawingRecord {
    pub fn new(id: impl Into<String>) -> Self {
        DrawingRecord {
            id: id.into(),
            block_extent: [10_000.0, 10_000.0],
            primitives: Vec::new(),
        }
    }

    /// Warn (don't reject) about coordinates outside the block extent.
    pub fn warn_out_of_extent(&self) {
        let bb = BoundingBox {
            min: Point::new(0.0, 0.0),
            max: Point::new(self.block_extent[0], self.block_extent[1]),
        };
        let mut outside = 0usize;
        for p in &self.primitives {
            let pts = primitive_sample_points(p);
            if pts.iter().any(|pt| !bb.contains(*pt)) {
                outside += 1;
            }
        }
        if outside > 0 {
            log::warn!(
                "record {}: {} primitives extend outside the {}x{} mm block",
                self.id,
                outside,
                self.block_extent[0],
                self.block_extent[1]
            );
        }
    }
}

fn primitive_sample_points(p: &Primitive) -> Vec<Point> {
    match &p.geometry {
        PrimitiveGeometry::Segment { p, q } => vec![*p, *q],
        PrimitiveGeometry::Arc { center, radius, .. }
        | PrimitiveGeometry::Circle { center, radius } => vec![
            Point::new(center.x - radius, center.y - radius),
            Point::new(center.x + radius, center.y + radius),
        ],
        PrimitiveGeometry::Ellipse {
            center,
            semi_major,
            semi_minor,
            ..
        } => {
            let r = semi_major.max(*semi_minor);
            vec![
                Point::new(center.x - r, center.y - r),
                Point::new(center.x + r, center.y + r),
            ]
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RecordFile {
    schema_version: u32,
    #[serde(flatten)]
    record: DrawingRecord,
}

pub fn save_record(path: &Path, record: &DrawingRecord) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path).map_err(|source| DatasetError::Io {
        path: path.into(),
        source,
    })?;
    serde_json::to_writer_pretty(
        BufWriter::new(file),
        &RecordFile {
            schema_version: RECORD_SCHEMA_VERSION,
            record: record.clone(),
        },
    )
    .map_err(|source| DatasetError::Parse {
        path: path.into(),
        source,
    })
}

pub fn load_record(path: &Path) -> Result<DrawingRecord, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.into(),
        source,
    })?;
    let parsed: RecordFile =
        serde_json::from_reader(BufReader::new(file)).map_err(|source| DatasetError::Parse {
            path: path.into(),
            source,
        })?;
    if parsed.schema_version != RECORD_SCHEMA_VERSION {
        return Err(DatasetError::VersionMismatch {
            path: path.into(),
            found: parsed.schema_version,
        });
    }
    parsed.record.warn_out_of_extent();
    Ok(parsed.record)
}

/// Check a record's labels against a class table: labels in range, thing
/// primitives carry instance ids, stuff/background never do.
pub fn validate_record(
    record: &DrawingRecord,
    classes: &ClassTable,
    path: &Path,
) -> Result<(), DatasetError> {
    for (i, p) in record.primitives.iter().enumerate() {
        if p.semantic_label >= classes.num_classes() {
            return Err(DatasetError::InvalidRecord {
                path: path.into(),
                reason: format!(
                    "primitive {i}: label {} out of range for {} classes",
                    p.semantic_label,
                    classes.num_classes()
                ),
            });
        }
        let is_thing = classes.is_thing(p.semantic_label);
        if is_thing && p.instance_id < 0 {
            return Err(DatasetError::InvalidRecord {
                path: path.into(),
                reason: format!(
                    "primitive {i}: thing class {} requires instance_id >= 0",
                    p.semantic_label
                ),
            });
        }
        if !is_thing && p.instance_id >= 0 {
            return Err(DatasetError::InvalidRecord {
                path: path.into(),
                reason: format!(
                    "primitive {i}: non-thing class {} must have instance_id -1",
                    p.semantic_label
                ),
            });
        }
        p.validate().map_err(|e| DatasetError::InvalidRecord {
            path: path.into(),
            reason: format!("primitive {i}: {e}"),
        })?;
    }
    Ok(())
}

/// Split manifest: record paths (relative to the manifest file) plus the
/// class table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub records: Vec<PathBuf>,
    pub classes: ClassTable,
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path).map_err(|source| DatasetError::Io {
        path: path.into(),
        source,
    })?;
    serde_json::to_writer_pretty(BufWriter::new(file), manifest).map_err(|source| {
        DatasetError::Parse {
            path: path.into(),
            source,
        }
    })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.into(),
        source,
    })?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| DatasetError::Parse {
        path: path.into(),
        source,
    })
}

/// Load and validate every record of a manifest, in manifest order,
/// in parallel across files.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<DrawingRecord>), DatasetError> {
    use rayon::prelude::*;
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let records: Result<Vec<DrawingRecord>, DatasetError> = manifest
        .records
        .par_iter()
        .map(|rel| {
            let path = base.join(rel);
            let record = load_record(&path)?;
            validate_record(&record, &manifest.classes, &path)?;
            Ok(record)
        })
        .collect();
    Ok((manifest, records?))
}

/// Write records plus a manifest under `dir`; returns the manifest path.
pub fn write_dataset(
    dir: &Path,
    split: &str,
    records: &[DrawingRecord],
    classes: &ClassTable,
) -> Result<PathBuf, DatasetError> {
    std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.into(),
        source,
    })?;
    let mut rel_paths = Vec::with_capacity(records.len());
    for record in records {
        let rel = PathBuf::from(format!("{}.json", record.id));
        save_record(&dir.join(&rel), record)?;
        rel_paths.push(rel);
    }
    let manifest = DatasetManifest {
        split: split.to_string(),
        records: rel_paths,
        classes: classes.clone(),
    };
    let manifest_path = dir.join(format!("{split}.manifest.json"));
    save_manifest(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

/// Adapter hook for external corpora: anything that can rewrite a foreign
/// record (different units, label vocabularies, coordinate conventions)
/// into the native schema. The primitive model maps 1:1 onto DXF
/// LINE/ARC/CIRCLE/ELLIPSE entities, so converters stay record-to-record.
pub trait RecordConverter {
    fn convert(&self, record: DrawingRecord) -> Result<DrawingRecord, DatasetError>;
}

/// Pass-through converter for data already in the native schema.
pub struct IdentityConverter;

impl RecordConverter for IdentityConverter {
    fn convert(&self, record: DrawingRecord) -> Result<DrawingRecord, DatasetError> {
        Ok(record)
    }
}

/// Split a record into square blocks of the given size, assigning each
/// primitive by the midpoint of its approximated extent. For drawings past
/// the vertex cap.
pub fn tile_record(record: &DrawingRecord, block_mm: f64) -> Vec<DrawingRecord> {
    let mut tiles: std::collections::BTreeMap<(i64, i64), DrawingRecord> = Default::default();
    for p in &record.primitives {
        let pts = primitive_sample_points(p);
        let bb = BoundingBox::from_points(pts.into_iter());
        let cx = 0.5 * (bb.min.x + bb.max.x);
        let cy = 0.5 * (bb.min.y + bb.max.y);
        let key = (
            (cx / block_mm).floor() as i64,
            (cy / block_mm).floor() as i64,
        );
        let tile = tiles.entry(key).or_insert_with(|| {
            let mut r = DrawingRecord::new(format!("{}-tile-{}-{}", record.id, key.0, key.1));
            r.block_extent = [block_mm, block_mm];
            r
        });
        tile.primitives.push(p.clone());
    }
    tiles.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::{ClassInfo, ClassKind};

    fn classes() -> ClassTable {
        ClassTable::new(vec![
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
            ClassInfo {
                id: 2,
                name: "door".into(),
                kind: ClassKind::Thing,
            },
        ])
        .unwrap()
    }

    fn sample_record() -> DrawingRecord {
        let mut r = DrawingRecord::new("sample");
        r.primitives = vec![
            Primitive::segment(Point::new(1.5, 2.25), Point::new(999.125, 2.25), 1, -1),
            Primitive::arc(Point::new(500.0, 500.0), 300.7, 0.1234567890123, 1.5, 2, 0),
            Primitive::circle(Point::new(100.0, 900.0), 250.5, 2, 1),
            Primitive::ellipse(Point::new(5000.0, 5000.0), 400.0, 200.0, 0.7853981633974483, 0, -1),
        ];
        r
    }

    #[test]
    fn record_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let record = sample_record();
        save_record(&path, &record).unwrap();
        let loaded = load_record(&path).unwrap();
        assert_eq!(record, loaded);
    }

    #[test]
    fn unknown_kind_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"schema_version":1,"id":"x","block_extent":[10000.0,10000.0],
               "primitives":[{"kind":"blob","p":{"x":0.0,"y":0.0},"q":{"x":1.0,"y":1.0},
               "semantic_label":0,"instance_id":-1}]}"#,
        )
        .unwrap();
        let err = load_record(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("kind") || msg.contains("blob") || msg.contains("variant"), "{msg}");
    }

    #[test]
    fn missing_instance_id_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"{"schema_version":1,"id":"x","block_extent":[10000.0,10000.0],
               "primitives":[{"kind":"segment","p":{"x":0.0,"y":0.0},"q":{"x":1.0,"y":1.0},
               "semantic_label":2}]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_record(&path),
            Err(DatasetError::Parse { .. })
        ));
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.json");
        std::fs::write(
            &path,
            r#"{"schema_version":9,"id":"x","block_extent":[10000.0,10000.0],"primitives":[]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_record(&path),
            Err(DatasetError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn validation_enforces_instance_rules() {
        let path = Path::new("mem");
        let mut r = DrawingRecord::new("v");
        // Thing without instance id.
        r.primitives = vec![Primitive::segment(
            Point::new(0.0, 0.0),
            Point::new(10.0, 0.0),
            2,
            -1,
        )];
        assert!(validate_record(&r, &classes(), path).is_err());
        // Stuff with an instance id.
        r.primitives = vec![Primitive::segment(
            Point::new(0.0, 0.0),
            Point::new(10.0, 0.0),
            1,
            3,
        )];
        assert!(validate_record(&r, &classes(), path).is_err());
        // Label out of range.
        r.primitives = vec![Primitive::segment(
            Point::new(0.0, 0.0),
            Point::new(10.0, 0.0),
            9,
            -1,
        )];
        assert!(validate_record(&r, &classes(), path).is_err());
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut record = sample_record();
        // Make it pass class validation: arc/circle are class 2 things.
        record.primitives[0].semantic_label = 1;
        let manifest_path = write_dataset(dir.path(), "train", &[record.clone()], &classes()).unwrap();
        let (manifest, records) = load_dataset(&manifest_path).unwrap();
        assert_eq!(manifest.split, "train");
        assert_eq!(records, vec![record]);
        assert_eq!(manifest.classes, classes());
    }

    #[test]
    fn tiling_assigns_by_midpoint() {
        let mut r = DrawingRecord::new("big");
        r.block_extent = [20_000.0, 10_000.0];
        r.primitives = vec![
            Primitive::segment(Point::new(100.0, 100.0), Point::new(200.0, 100.0), 1, -1),
            Primitive::segment(Point::new(15_000.0, 100.0), Point::new(15_200.0, 100.0), 1, -1),
        ];
        let tiles = tile_record(&r, 10_000.0);
        assert_eq!(tiles.len(), 2);
        assert!(tiles.iter().all(|t| t.primitives.len() == 1));
    }
}
