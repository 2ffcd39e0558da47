//! The semantic class vocabulary: countable thing classes, region-only
//! stuff classes, and exactly one background class.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClassTableError {
    #[error("class ids must be dense from 0; missing id {0}")]
    NonDenseIds(usize),
    #[error("expected exactly one background class, found {0}")]
    BackgroundCount(usize),
    #[error("duplicate class id {0}")]
    DuplicateId(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Thing,
    Stuff,
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub kind: ClassKind,
}

/// Dense id -> class mapping shared by datasets, extraction, and metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassInfo>", into = "Vec<ClassInfo>")]
pub struct ClassTable {
    classes: Vec<ClassInfo>,
}

impl TryFrom<Vec<ClassInfo>> for ClassTable {
    type Error = ClassTableError;

    fn try_from(classes: Vec<ClassInfo>) -> Result<Self, Self::Error> {
        ClassTable::new(classes)
    }
}

impl From<ClassTable> for Vec<ClassInfo> {
    fn from(t: ClassTable) -> Vec<ClassInfo> {
        t.classes
    }
}

impl ClassTable {
    pub fn new(mut classes: Vec<ClassInfo>) -> Result<Self, ClassTableError> {
        classes.sort_by_key(|c| c.id);
        for (i, c) in classes.iter().enumerate() {
            if c.id != i {
                if classes.iter().filter(|d| d.id == c.id).count() > 1 {
                    return Err(ClassTableError::DuplicateId(c.id));
                }
                return Err(ClassTableError::NonDenseIds(i));
            }
        }
        let backgrounds = classes
            .iter()
            .filter(|c| c.kind == ClassKind::Background)
            .count();
        if backgrounds != 1 {
            return Err(ClassTableError::BackgroundCount(backgrounds));
        }
        Ok(ClassTable { classes })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, id: usize) -> Option<&ClassInfo> {
        self.classes.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassInfo> {
        self.classes.iter()
    }

    pub fn is_thing(&self, id: usize) -> bool {
        self.classes.get(id).map_or(false, |c| c.kind == ClassKind::Thing)
    }

    pub fn is_stuff(&self, id: usize) -> bool {
        self.classes.get(id).map_or(false, |c| c.kind == ClassKind::Stuff)
    }

    pub fn background_id(&self) -> usize {
        self.classes
            .iter()
            .position(|c| c.kind == ClassKind::Background)
            .expect("class table always has a background class")
    }

    pub fn name(&self, id: usize) -> &str {
        self.classes.get(id).map_or("?", |c| c.name.as_str())
    }
}
