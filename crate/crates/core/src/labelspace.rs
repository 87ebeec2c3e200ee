//! Label-space alignment between simulator and target annotations.
//!
//! Simulator domains annotate in their own class vocabularies. Before their
//! samples can contribute to a loss over the 19-class target space, every
//! simulator class must either be renamed to a target class or dropped; a
//! dropped class becomes the ignore index and contributes nothing to losses,
//! gradients, or metrics.
//!
//! A [`LabelMap`] is total over its source space — every source class has an
//! explicit verdict — and is validated against both label spaces when built,
//! whether from code or from the text format:
//!
//! ```text
//! # comment
//! road line -> road
//! tunnel -> DROP
//! ```

use crate::domains::{domain_preset, target_label_space, LabelSpaceSpec};
use crate::error::{Error, Result};
use crate::tensor::{MaskTensor, IGNORE_INDEX};

/// Verdict for one source class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MapTarget {
    /// Rename to this target-space class.
    Class(String),
    /// Discard: pixels become the ignore index.
    Drop,
}

/// A total mapping from one label space onto another.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    source_space: String,
    target_space: String,
    /// Source class name and verdict, in source id order.
    rules: Vec<(String, MapTarget)>,
    /// Per source id: target id, or the ignore index for dropped classes.
    table: Vec<u8>,
}

impl LabelMap {
    /// Build a map from explicit rules. Every source class must appear
    /// exactly once and every named target class must exist.
    pub fn new(
        source: &LabelSpaceSpec,
        target: &LabelSpaceSpec,
        rules: &[(&str, MapTarget)],
    ) -> Result<LabelMap> {
        let mut table = vec![None; source.num_classes()];
        let mut ordered: Vec<Option<(String, MapTarget)>> = vec![None; source.num_classes()];
        for (name, verdict) in rules {
            let sid = source.id_of(name).ok_or_else(|| {
                Error::config(format!(
                    "label map {} -> {}: unknown source class {name:?}",
                    source.name(),
                    target.name()
                ))
            })?;
            let slot = &mut table[usize::from(sid)];
            if slot.is_some() {
                return Err(Error::config(format!(
                    "label map {} -> {}: class {name:?} mapped twice",
                    source.name(),
                    target.name()
                )));
            }
            let tid = match verdict {
                MapTarget::Drop => IGNORE_INDEX,
                MapTarget::Class(t) => target.id_of(t).ok_or_else(|| {
                    Error::config(format!(
                        "label map {} -> {}: unknown target class {t:?}",
                        source.name(),
                        target.name()
                    ))
                })?,
            };
            *slot = Some(tid);
            ordered[usize::from(sid)] = Some((name.to_string(), verdict.clone()));
        }
        for (id, slot) in table.iter().enumerate() {
            if slot.is_none() {
                return Err(Error::config(format!(
                    "label map {} -> {}: source class {:?} has no rule",
                    source.name(),
                    target.name(),
                    source.class_name(id as u8).unwrap_or("?")
                )));
            }
        }
        Ok(LabelMap {
            source_space: source.name().to_string(),
            target_space: target.name().to_string(),
            rules: ordered
                .into_iter()
                .map(|r| r.expect("checked above"))
                .collect(),
            table: table
                .into_iter()
                .map(|t| t.expect("checked above"))
                .collect(),
        })
    }

    /// The identity map of a space onto itself.
    pub fn identity(space: &LabelSpaceSpec) -> LabelMap {
        let rules: Vec<(String, MapTarget)> = space
            .class_names()
            .map(|c| (c.to_string(), MapTarget::Class(c.to_string())))
            .collect();
        let borrowed: Vec<(&str, MapTarget)> =
            rules.iter().map(|(n, v)| (n.as_str(), v.clone())).collect();
        LabelMap::new(space, space, &borrowed).expect("identity map is always valid")
    }

    pub fn source_space(&self) -> &str {
        &self.source_space
    }

    pub fn target_space(&self) -> &str {
        &self.target_space
    }

    pub fn num_source_classes(&self) -> usize {
        self.table.len()
    }

    /// Number of *distinct* target classes the source space reaches — the
    /// size of the semantic overlap between the vocabularies.
    pub fn overlap_count(&self) -> usize {
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.table {
            if *t != IGNORE_INDEX {
                seen.insert(*t);
            }
        }
        seen.len()
    }

    /// True when every source class is dropped (the map erases all labels).
    pub fn drops_everything(&self) -> bool {
        self.table.iter().all(|t| *t == IGNORE_INDEX)
    }

    /// Verdict for a source id, if the id is in range.
    pub fn verdict(&self, source_id: u8) -> Option<&MapTarget> {
        self.rules.get(usize::from(source_id)).map(|(_, v)| v)
    }

    /// Relabel a mask of source ids into target ids; dropped classes become
    /// the ignore index. Works on any mask shape. Ids outside the source
    /// space are a data error.
    pub fn apply(&self, mask: &MaskTensor) -> Result<MaskTensor> {
        let mut out = Vec::with_capacity(mask.len());
        for v in mask.values() {
            let id = usize::from(*v);
            if id >= self.table.len() {
                return Err(Error::data(format!(
                    "mask id {id} outside source space {:?} ({} classes)",
                    self.source_space,
                    self.table.len()
                )));
            }
            out.push(self.table[id]);
        }
        MaskTensor::from_values(mask.shape(), out)
    }

    /// Serialize as the line-oriented text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, verdict) in &self.rules {
            match verdict {
                MapTarget::Drop => s.push_str(&format!("{name} -> DROP\n")),
                MapTarget::Class(t) => s.push_str(&format!("{name} -> {t}\n")),
            }
        }
        s
    }

    /// Parse the text format against explicit source and target spaces.
    /// Blank lines and `#` comments are allowed; everything else must be
    /// `source class -> target class` or `source class -> DROP`.
    pub fn parse(source: &LabelSpaceSpec, target: &LabelSpaceSpec, text: &str) -> Result<LabelMap> {
        let mut rules = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (lhs, rhs) = line.split_once("->").ok_or_else(|| {
                Error::config(format!(
                    "label map line {}: expected `class -> class` or `class -> DROP`, got {line:?}",
                    lineno + 1
                ))
            })?;
            let (lhs, rhs) = (lhs.trim().to_string(), rhs.trim());
            if rhs == "DROP" {
                rules.push((lhs, MapTarget::Drop));
            } else {
                rules.push((lhs, MapTarget::Class(rhs.to_string())));
            }
        }
        let borrowed: Vec<(&str, MapTarget)> =
            rules.iter().map(|(n, v)| (n.as_str(), v.clone())).collect();
        LabelMap::new(source, target, &borrowed)
    }
}

fn sim_space(name: &str) -> LabelSpaceSpec {
    domain_preset(name)
        .unwrap_or_else(|| panic!("built-in domain {name:?} exists"))
        .label_space
        .clone()
}

/// The raw relabeling rules for the 23-class simulator, by class name —
/// pure data, usable without constructing any label space. Eleven target
/// classes are reachable; simulator-only concepts are dropped.
pub fn sima_rules() -> Vec<(&'static str, MapTarget)> {
    use MapTarget::{Class, Drop};
    let c = |n: &str| Class(n.to_string());
    vec![
        ("unlabeled", Drop),
        ("building", c("building")),
        ("fence", c("fence")),
        ("other", Drop),
        ("pedestrian", c("person")),
        ("road line", c("road")),
        ("road", c("road")),
        ("sidewalk", c("sidewalk")),
        ("vegetation", c("vegetation")),
        ("vehicles", c("car")),
        ("wall", c("wall")),
        ("traffic sign", c("traffic sign")),
        ("sky", c("sky")),
        ("ground", Drop),
        ("bridge", Drop),
        ("rail track", Drop),
        ("guard rail", Drop),
        ("static", Drop),
        ("dynamic", Drop),
        ("water", Drop),
        ("terrain", c("terrain")),
        ("tunnel", Drop),
        ("debris", Drop),
    ]
}

/// The raw relabeling rules for the 31-class simulator, by class name.
/// Fifteen target classes are reachable.
pub fn simb_rules() -> Vec<(&'static str, MapTarget)> {
    use MapTarget::{Class, Drop};
    let c = |n: &str| Class(n.to_string());
    vec![
        ("ambiguous", Drop),
        ("sky", c("sky")),
        ("road", c("road")),
        ("sidewalk", c("sidewalk")),
        ("rail track", Drop),
        ("terrain", c("terrain")),
        ("tree", Drop),
        ("vegetation", c("vegetation")),
        ("building", c("building")),
        ("infrastructure", Drop),
        ("fence", c("fence")),
        ("billboard", Drop),
        ("traffic light", c("traffic light")),
        ("traffic sign", c("traffic sign")),
        ("mobile barrier", Drop),
        ("fire hydrant", Drop),
        ("chair", Drop),
        ("trash", Drop),
        ("trash can", Drop),
        ("person", c("person")),
        ("animal", Drop),
        ("bicycle", c("bicycle")),
        ("motorcycle", c("motorcycle")),
        ("car", c("car")),
        ("van", c("car")),
        ("bus", c("bus")),
        ("truck", c("truck")),
        ("trailer", Drop),
        ("train", Drop),
        ("plane", Drop),
        ("boat", Drop),
    ]
}

/// Built-in map from the 23-class simulator onto the target space.
pub fn sima_to_target() -> LabelMap {
    LabelMap::new(&sim_space("sima"), &target_label_space(), &sima_rules())
        .expect("built-in map is valid")
}

/// Built-in map from the 31-class simulator onto the target space.
pub fn simb_to_target() -> LabelMap {
    LabelMap::new(&sim_space("simb"), &target_label_space(), &simb_rules())
        .expect("built-in map is valid")
}

/// Look up the built-in map for a simulator domain by name.
pub fn builtin_map(source_domain: &str) -> Option<LabelMap> {
    match source_domain {
        "sima" => Some(sima_to_target()),
        "simb" => Some(simb_to_target()),
        _ => None,
    }
}
