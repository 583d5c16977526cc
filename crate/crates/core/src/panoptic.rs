//! Panoptic label encoding and the class registry.
//!
//! A panoptic id packs `class_id * 1000 + instance_id` into a `u32`. Class 0 is
//! reserved for unlabeled points so that id 0 is the ignore id.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::mask::PointMask;

pub const IGNORE_ID: u32 = 0;
pub const INSTANCE_BASE: u32 = 1000;

pub fn encode_panoptic(class_id: u32, instance_id: u32) -> Result<u32> {
    if instance_id >= INSTANCE_BASE {
        return Err(Error::EncodingOverflow(instance_id));
    }
    class_id
        .checked_mul(INSTANCE_BASE)
        .and_then(|v| v.checked_add(instance_id))
        .ok_or(Error::EncodingOverflow(instance_id))
}

pub fn decode_panoptic(id: u32) -> (u32, u32) {
    (id / INSTANCE_BASE, id % INSTANCE_BASE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassKind {
    Thing,
    Stuff,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassInfo {
    pub name: String,
    pub kind: ClassKind,
}

/// Ordered list of semantic classes. Index 0 is always the unlabeled class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRegistry {
    classes: Vec<ClassInfo>,
}

impl Default for ClassRegistry {
    fn default() -> Self {
        ClassRegistry::new(vec![
            ("ground", ClassKind::Stuff),
            ("wall", ClassKind::Stuff),
            ("box", ClassKind::Thing),
            ("cylinder", ClassKind::Thing),
            ("sphere", ClassKind::Thing),
        ])
        .expect("default registry is valid")
    }
}

impl ClassRegistry {
    /// Builds a registry from the labeled classes; the unlabeled class is prepended.
    pub fn new<S: Into<String>>(classes: Vec<(S, ClassKind)>) -> Result<Self> {
        let mut out = vec![ClassInfo {
            name: "unlabeled".into(),
            kind: ClassKind::Stuff,
        }];
        out.extend(classes.into_iter().map(|(name, kind)| ClassInfo {
            name: name.into(),
            kind,
        }));
        let registry = ClassRegistry { classes: out };
        if registry.things().next().is_none() || registry.stuff().next().is_none() {
            return Err(Error::Config(
                "class registry needs at least one thing and one stuff class".into(),
            ));
        }
        Ok(registry)
    }

    /// Total number of classes including the unlabeled class 0.
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.len() <= 1
    }

    /// Number of predictable classes (excludes class 0).
    pub fn num_semantic(&self) -> usize {
        self.classes.len() - 1
    }

    pub fn get(&self, class_id: u32) -> Option<&ClassInfo> {
        self.classes.get(class_id as usize)
    }

    pub fn name(&self, class_id: u32) -> &str {
        self.get(class_id).map(|c| c.name.as_str()).unwrap_or("?")
    }

    pub fn is_thing(&self, class_id: u32) -> bool {
        class_id != 0 && matches!(self.get(class_id), Some(c) if c.kind == ClassKind::Thing)
    }

    pub fn is_stuff(&self, class_id: u32) -> bool {
        class_id != 0 && matches!(self.get(class_id), Some(c) if c.kind == ClassKind::Stuff)
    }

    /// Labeled class ids, `1..len`.
    pub fn semantic_ids(&self) -> impl Iterator<Item = u32> + '_ {
        1..self.classes.len() as u32
    }

    pub fn things(&self) -> impl Iterator<Item = u32> + '_ {
        self.semantic_ids().filter(|&c| self.is_thing(c))
    }

    pub fn stuff(&self) -> impl Iterator<Item = u32> + '_ {
        self.semantic_ids().filter(|&c| self.is_stuff(c))
    }
}

/// Per-point panoptic ids together with the registry that interprets them.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticLabeling {
    ids: Vec<u32>,
    registry: Arc<ClassRegistry>,
}

impl PanopticLabeling {
    pub fn new(ids: Vec<u32>, registry: Arc<ClassRegistry>) -> Result<Self> {
        for (i, &id) in ids.iter().enumerate() {
            if id == IGNORE_ID {
                continue;
            }
            let (class, inst) = decode_panoptic(id);
            if class == 0 || class as usize >= registry.len() {
                return Err(shape_err(format!("point {i}: class {class} not in registry")));
            }
            if registry.is_stuff(class) && inst != 0 {
                return Err(shape_err(format!(
                    "point {i}: stuff class {class} carries instance {inst}"
                )));
            }
            if registry.is_thing(class) && inst == 0 {
                return Err(shape_err(format!(
                    "point {i}: thing class {class} without instance id"
                )));
            }
        }
        Ok(PanopticLabeling { ids, registry })
    }

    /// All points ignored.
    pub fn unlabeled(n: usize, registry: Arc<ClassRegistry>) -> Self {
        PanopticLabeling {
            ids: vec![IGNORE_ID; n],
            registry,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn registry(&self) -> &Arc<ClassRegistry> {
        &self.registry
    }

    pub fn class_of(&self, i: usize) -> u32 {
        self.ids[i] / INSTANCE_BASE
    }

    pub fn instance_of(&self, i: usize) -> u32 {
        self.ids[i] % INSTANCE_BASE
    }

    /// Per-point semantic class ids (0 = ignore).
    pub fn semantic(&self) -> Vec<u32> {
        self.ids.iter().map(|id| id / INSTANCE_BASE).collect()
    }

    /// Distinct non-ignore segments keyed by panoptic id.
    pub fn segments(&self) -> BTreeMap<u32, PointMask> {
        let mut out: BTreeMap<u32, PointMask> = BTreeMap::new();
        let n = self.ids.len();
        for (i, &id) in self.ids.iter().enumerate() {
            if id != IGNORE_ID {
                out.entry(id).or_insert_with(|| PointMask::new(n)).insert(i);
            }
        }
        out
    }

    /// Labels of the points listed in `keep`, in that order.
    pub fn select(&self, keep: &[usize]) -> PanopticLabeling {
        PanopticLabeling {
            ids: keep.iter().map(|&i| self.ids[i]).collect(),
            registry: self.registry.clone(),
        }
    }
}
