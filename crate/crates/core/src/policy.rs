//! Policy genomes: the evolvable specification set for the four-module
//! tool-use policy, plus the lineage metadata produced by targeted mutation.
//!
//! A genome is immutable after construction; every edit goes through
//! [`PolicyGenome::with_replaced_module`] and returns a fresh value, so
//! genomes can be shared freely across concurrent evaluators.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The four roles of the modular policy, in fixed pipeline order.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    #[default]
    Planner,
    Selector,
    Caller,
    Synthesizer,
}

impl ModuleKind {
    /// All four kinds in pipeline order.
    pub const PIPELINE: [ModuleKind; 4] = [
        ModuleKind::Planner,
        ModuleKind::Selector,
        ModuleKind::Caller,
        ModuleKind::Synthesizer,
    ];

    /// Position in the pipeline, 0-based.
    pub fn pipeline_index(self) -> usize {
        match self {
            ModuleKind::Planner => 0,
            ModuleKind::Selector => 1,
            ModuleKind::Caller => 2,
            ModuleKind::Synthesizer => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Planner => "planner",
            ModuleKind::Selector => "selector",
            ModuleKind::Caller => "caller",
            ModuleKind::Synthesizer => "synthesizer",
        }
    }

    /// Parses a module name, case-insensitively.
    pub fn parse(name: &str) -> Option<ModuleKind> {
        match name.trim().to_ascii_lowercase().as_str() {
            "planner" => Some(ModuleKind::Planner),
            "selector" => Some(ModuleKind::Selector),
            "caller" => Some(ModuleKind::Caller),
            "synthesizer" => Some(ModuleKind::Synthesizer),
            _ => None,
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One module's evolvable specification text plus its revision counter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    #[serde(skip)]
    pub kind: ModuleKind,
    pub text: String,
    pub revision: u32,
}

/// A complete policy configuration: one spec per module, with lineage.
///
/// Invariants enforced at construction:
/// - `specs` contains every [`ModuleKind`] exactly once, all non-empty;
/// - a seed genome has neither `parent_id` nor `mutated_module`;
/// - a child differs from its parent in exactly the `mutated_module` spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyGenome {
    pub id: String,
    pub parent_id: Option<String>,
    pub mutated_module: Option<ModuleKind>,
    pub created_generation: u32,
    #[serde(deserialize_with = "deserialize_specs")]
    specs: BTreeMap<ModuleKind, ModuleSpec>,
}

// The JSON form keys each spec by module name and omits the kind inside the
// entry; put it back when loading.
fn deserialize_specs<'de, D>(
    deserializer: D,
) -> Result<BTreeMap<ModuleKind, ModuleSpec>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    use serde::de::Error;
    let mut map = BTreeMap::<ModuleKind, ModuleSpec>::deserialize(deserializer)?;
    if map.len() != ModuleKind::PIPELINE.len() {
        return Err(D::Error::custom(format!(
            "genome must carry exactly 4 module specs, found {}",
            map.len()
        )));
    }
    for (kind, spec) in map.iter_mut() {
        spec.kind = *kind;
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("MissingModule: no specification for {0}")]
    MissingModule(ModuleKind),
    #[error("EmptySpec: specification for {0} is empty")]
    EmptySpec(ModuleKind),
    #[error("NoOpEdit: replacement text for {0} equals the current text")]
    NoOpEdit(ModuleKind),
}

impl PolicyGenome {
    /// Builds a seed genome from the four initial module texts.
    ///
    /// All revisions start at 0 and the genome carries no lineage.
    pub fn new_seed(texts: &BTreeMap<ModuleKind, String>) -> Result<PolicyGenome, PolicyError> {
        let mut specs = BTreeMap::new();
        for kind in ModuleKind::PIPELINE {
            let text = texts
                .get(&kind)
                .ok_or(PolicyError::MissingModule(kind))?;
            if text.is_empty() {
                return Err(PolicyError::EmptySpec(kind));
            }
            specs.insert(
                kind,
                ModuleSpec {
                    kind,
                    text: text.clone(),
                    revision: 0,
                },
            );
        }
        let id = derive_id(None, None, 0, &specs);
        Ok(PolicyGenome {
            id,
            parent_id: None,
            mutated_module: None,
            created_generation: 0,
            specs,
        })
    }

    /// Returns a child genome in which exactly `target`'s text is replaced.
    ///
    /// The target revision increments by one; the other three specs are
    /// carried over byte-identical.
    pub fn with_replaced_module(
        &self,
        target: ModuleKind,
        new_text: &str,
        generation: u32,
    ) -> Result<PolicyGenome, PolicyError> {
        if new_text.is_empty() {
            return Err(PolicyError::EmptySpec(target));
        }
        let old = &self.specs[&target];
        if old.text == new_text {
            return Err(PolicyError::NoOpEdit(target));
        }
        let mut specs = self.specs.clone();
        specs.insert(
            target,
            ModuleSpec {
                kind: target,
                text: new_text.to_string(),
                revision: old.revision + 1,
            },
        );
        let id = derive_id(Some(&self.id), Some(target), generation, &specs);
        Ok(PolicyGenome {
            id,
            parent_id: Some(self.id.clone()),
            mutated_module: Some(target),
            created_generation: generation,
            specs,
        })
    }

    pub fn spec(&self, kind: ModuleKind) -> &ModuleSpec {
        &self.specs[&kind]
    }

    pub fn spec_text(&self, kind: ModuleKind) -> &str {
        &self.specs[&kind].text
    }

    /// The four specs in pipeline order.
    pub fn specs(&self) -> impl Iterator<Item = &ModuleSpec> {
        self.specs.values()
    }

    /// Content digest over the four spec texts only.
    ///
    /// Ids, lineage and generation do not participate, so two genomes with
    /// equal texts always fingerprint identically.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for kind in ModuleKind::PIPELINE {
            let text = &self.specs[&kind].text;
            hasher.update((text.len() as u64).to_be_bytes());
            hasher.update(text.as_bytes());
        }
        to_hex(&hasher.finalize())
    }

    /// Module kinds whose text differs from `other`'s.
    pub fn diff_modules(&self, other: &PolicyGenome) -> Vec<ModuleKind> {
        ModuleKind::PIPELINE
            .into_iter()
            .filter(|k| self.specs[k].text != other.specs[k].text)
            .collect()
    }
}

// Ids are derived from lineage and content rather than drawn from a counter
// or clock, so identical runs mint identical ids.
fn derive_id(
    parent: Option<&str>,
    mutated: Option<ModuleKind>,
    generation: u32,
    specs: &BTreeMap<ModuleKind, ModuleSpec>,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(parent.unwrap_or("").as_bytes());
    hasher.update([0u8]);
    hasher.update(mutated.map(|m| m.name()).unwrap_or("").as_bytes());
    hasher.update(generation.to_be_bytes());
    for spec in specs.values() {
        hasher.update((spec.text.len() as u64).to_be_bytes());
        hasher.update(spec.text.as_bytes());
        hasher.update(spec.revision.to_be_bytes());
    }
    let digest = to_hex(&hasher.finalize());
    format!("g{}-{}", generation, &digest[..12])
}

fn to_hex(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{:02x}", b));
    }
    out
}
