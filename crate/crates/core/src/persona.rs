//! Persona records, their eight dimensions, and the JSONL persistence format.
//!
//! A persona file starts with a header line
//! `{"schema":"upcs-persona/1","stage":"initial"}` followed by one persona
//! object per line. Absent dimensions are simply not present in the
//! `dimensions` map; there is no empty-string sentinel.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::PersonaError;
use crate::fsutil;

pub const PERSONA_SCHEMA: &str = "upcs-persona/1";
pub const MAX_AGE: u32 = 130;

/// The eight persona dimensions. Iteration order (and serialization order)
/// is the declaration order below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionKey {
    Personality,
    Experience,
    Hobbies,
    SpecialSkills,
    LivingEnvironment,
    Habits,
    CulturalBackground,
    ExternalFeatures,
}

impl DimensionKey {
    pub const ALL: [DimensionKey; 8] = [
        DimensionKey::Personality,
        DimensionKey::Experience,
        DimensionKey::Hobbies,
        DimensionKey::SpecialSkills,
        DimensionKey::LivingEnvironment,
        DimensionKey::Habits,
        DimensionKey::CulturalBackground,
        DimensionKey::ExternalFeatures,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DimensionKey::Personality => "personality",
            DimensionKey::Experience => "experience",
            DimensionKey::Hobbies => "hobbies",
            DimensionKey::SpecialSkills => "special_skills",
            DimensionKey::LivingEnvironment => "living_environment",
            DimensionKey::Habits => "habits",
            DimensionKey::CulturalBackground => "cultural_background",
            DimensionKey::ExternalFeatures => "external_features",
        }
    }

    pub fn parse(s: &str) -> Option<DimensionKey> {
        DimensionKey::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// True for the seven dimensions holding free text.
    pub fn is_text(self) -> bool {
        self != DimensionKey::ExternalFeatures
    }
}

impl fmt::Display for DimensionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named attribute label attached to a text dimension, e.g. `hobby=painting`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attribute {
    pub name: String,
    pub value: String,
}

impl Attribute {
    pub fn new(name: impl Into<String>, value: impl Into<String>) -> Self {
        Attribute {
            name: name.into(),
            value: value.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextDimension {
    pub text: String,
    #[serde(default)]
    pub attributes: Vec<Attribute>,
}

impl TextDimension {
    pub fn new(text: impl Into<String>) -> Self {
        TextDimension {
            text: text.into(),
            attributes: Vec::new(),
        }
    }

    pub fn with_attributes(text: impl Into<String>, attributes: Vec<Attribute>) -> Self {
        TextDimension {
            text: text.into(),
            attributes,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalFeatures {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub race: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_text: Option<String>,
}

impl ExternalFeatures {
    fn validate(&self) -> Result<(), String> {
        if let Some(age) = self.age {
            if age > MAX_AGE {
                return Err(format!("age {age} outside 0..={MAX_AGE}"));
            }
        }
        let labels = [&self.race, &self.gender, &self.free_text];
        if labels
            .iter()
            .any(|s| matches!(s, Some(t) if t.trim().is_empty()))
        {
            return Err("external_features fields must be non-empty when present".into());
        }
        if self.age.is_none() && labels.iter().all(|s| s.is_none()) {
            return Err("external_features present but has no fields".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DimensionValue {
    Text(TextDimension),
    External(ExternalFeatures),
}

impl DimensionValue {
    pub fn text(s: impl Into<String>) -> Self {
        DimensionValue::Text(TextDimension::new(s))
    }

    pub fn as_text(&self) -> Option<&TextDimension> {
        match self {
            DimensionValue::Text(t) => Some(t),
            DimensionValue::External(_) => None,
        }
    }

    pub fn as_external(&self) -> Option<&ExternalFeatures> {
        match self {
            DimensionValue::External(e) => Some(e),
            DimensionValue::Text(_) => None,
        }
    }

    fn validate(&self, key: DimensionKey) -> Result<(), String> {
        match (key.is_text(), self) {
            (true, DimensionValue::Text(t)) => {
                if t.text.trim().is_empty() {
                    return Err(format!("{key}: text is empty"));
                }
                if t.attributes.iter().any(|a| a.name.trim().is_empty()) {
                    return Err(format!("{key}: attribute with empty name"));
                }
                Ok(())
            }
            (false, DimensionValue::External(e)) => e.validate().map_err(|m| format!("{key}: {m}")),
            (true, DimensionValue::External(_)) => Err(format!("{key}: expected a text dimension")),
            (false, DimensionValue::Text(_)) => {
                Err(format!("{key}: expected structured external features"))
            }
        }
    }

    /// Canonical text rendering used by persona_text.
    fn render(&self) -> String {
        match self {
            DimensionValue::Text(t) => {
                if t.attributes.is_empty() {
                    t.text.clone()
                } else {
                    let labels: Vec<String> = t
                        .attributes
                        .iter()
                        .map(|a| format!("{}={}", a.name, a.value))
                        .collect();
                    format!("{} [{}]", t.text, labels.join(", "))
                }
            }
            DimensionValue::External(e) => {
                let mut parts = Vec::new();
                if let Some(age) = e.age {
                    parts.push(format!("age {age}"));
                }
                if let Some(race) = &e.race {
                    parts.push(format!("race {race}"));
                }
                if let Some(gender) = &e.gender {
                    parts.push(format!("gender {gender}"));
                }
                if let Some(free) = &e.free_text {
                    parts.push(free.clone());
                }
                parts.join("; ")
            }
        }
    }
}

/// Pipeline stage of a persona set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    IncompleteDebiased,
    Debiased,
    Unbiased,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::IncompleteDebiased => "incomplete_debiased",
            Stage::Debiased => "debiased",
            Stage::Unbiased => "unbiased",
        }
    }

    /// initial → incomplete_debiased → debiased, and incomplete_debiased → unbiased.
    pub fn can_advance_to(self, next: Stage) -> bool {
        matches!(
            (self, next),
            (Stage::Initial, Stage::IncompleteDebiased)
                | (Stage::IncompleteDebiased, Stage::Debiased)
                | (Stage::IncompleteDebiased, Stage::Unbiased)
        )
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceEntry {
    pub stage: Stage,
    pub action: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPersona {
    id: String,
    #[serde(default)]
    dimensions: BTreeMap<DimensionKey, DimensionValue>,
    #[serde(default)]
    provenance: Vec<ProvenanceEntry>,
}

impl TryFrom<RawPersona> for Persona {
    type Error = PersonaError;

    fn try_from(raw: RawPersona) -> Result<Self, Self::Error> {
        Persona::new(raw.id, raw.dimensions, raw.provenance)
    }
}

/// An immutable, validated persona. Modifications produce new values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPersona")]
pub struct Persona {
    id: String,
    dimensions: BTreeMap<DimensionKey, DimensionValue>,
    provenance: Vec<ProvenanceEntry>,
}

impl Persona {
    pub fn new(
        id: impl Into<String>,
        dimensions: BTreeMap<DimensionKey, DimensionValue>,
        provenance: Vec<ProvenanceEntry>,
    ) -> Result<Self, PersonaError> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(PersonaError::Invalid("persona id is empty".into()));
        }
        for (key, value) in &dimensions {
            value
                .validate(*key)
                .map_err(|m| PersonaError::Invalid(format!("persona {id}: {m}")))?;
        }
        Ok(Persona {
            id,
            dimensions,
            provenance,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dimensions(&self) -> &BTreeMap<DimensionKey, DimensionValue> {
        &self.dimensions
    }

    pub fn dimension(&self, key: DimensionKey) -> Option<&DimensionValue> {
        self.dimensions.get(&key)
    }

    pub fn provenance(&self) -> &[ProvenanceEntry] {
        &self.provenance
    }

    pub fn is_complete(&self) -> bool {
        self.dimensions.len() == DimensionKey::ALL.len()
    }

    /// Keys absent from this persona, in iteration order.
    pub fn missing_dimensions(&self) -> BTreeSet<DimensionKey> {
        DimensionKey::ALL
            .into_iter()
            .filter(|k| !self.dimensions.contains_key(k))
            .collect()
    }

    /// Canonical text: present dimensions in key order, one per line, each
    /// prefixed by its key name.
    pub fn text(&self) -> String {
        self.dimensions
            .iter()
            .map(|(k, v)| format!("{}: {}", k.as_str(), v.render()))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// A copy with `key` set to `value` (validated).
    pub fn with_dimension(
        &self,
        key: DimensionKey,
        value: DimensionValue,
    ) -> Result<Persona, PersonaError> {
        value
            .validate(key)
            .map_err(|m| PersonaError::Invalid(format!("persona {}: {m}", self.id)))?;
        let mut next = self.clone();
        next.dimensions.insert(key, value);
        Ok(next)
    }

    pub fn without_dimension(&self, key: DimensionKey) -> Persona {
        let mut next = self.clone();
        next.dimensions.remove(&key);
        next
    }

    /// A copy with one more provenance entry appended.
    pub fn with_provenance(&self, stage: Stage, action: impl Into<String>) -> Persona {
        let mut next = self.clone();
        next.provenance.push(ProvenanceEntry {
            stage,
            action: action.into(),
        });
        next
    }
}

/// Free-function form of [`Persona::missing_dimensions`].
pub fn missing_dimensions(p: &Persona) -> BTreeSet<DimensionKey> {
    p.missing_dimensions()
}

/// Free-function form of [`Persona::text`].
pub fn persona_text(p: &Persona) -> String {
    p.text()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonaSet {
    stage: Stage,
    personas: Vec<Persona>,
}

impl PersonaSet {
    pub fn new(stage: Stage, personas: Vec<Persona>) -> Result<Self, PersonaError> {
        let mut seen = HashSet::with_capacity(personas.len());
        for p in &personas {
            if !seen.insert(p.id()) {
                return Err(PersonaError::Integrity(format!(
                    "duplicate persona id {}",
                    p.id()
                )));
            }
        }
        Ok(PersonaSet { stage, personas })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn personas(&self) -> &[Persona] {
        &self.personas
    }

    pub fn len(&self) -> usize {
        self.personas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.personas.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Persona> {
        self.personas.iter().find(|p| p.id() == id)
    }

    /// Builds the next-stage set, enforcing the stage DAG.
    pub fn advance(&self, next: Stage, personas: Vec<Persona>) -> Result<PersonaSet, PersonaError> {
        if !self.stage.can_advance_to(next) {
            return Err(PersonaError::Integrity(format!(
                "illegal stage transition {} -> {}",
                self.stage, next
            )));
        }
        PersonaSet::new(next, personas)
    }

    /// Canonical JSONL bytes: header line then one persona per line, LF-terminated.
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            schema: PERSONA_SCHEMA.to_string(),
            stage: self.stage,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for p in &self.personas {
            out.push_str(&serde_json::to_string(p).expect("persona serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<PersonaSet, PersonaError> {
        let mut stage = None;
        let mut personas = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match stage {
                None => {
                    let header: Header =
                        serde_json::from_str(&line).map_err(|e| PersonaError::Parse {
                            line: line_no,
                            message: format!("bad header: {e}"),
                        })?;
                    if header.schema != PERSONA_SCHEMA {
                        return Err(PersonaError::Parse {
                            line: line_no,
                            message: format!("unsupported schema {:?}", header.schema),
                        });
                    }
                    stage = Some(header.stage);
                }
                Some(_) => {
                    let p: Persona =
                        serde_json::from_str(&line).map_err(|e| PersonaError::Parse {
                            line: line_no,
                            message: e.to_string(),
                        })?;
                    personas.push(p);
                }
            }
        }
        let stage = stage.ok_or(PersonaError::Parse {
            line: 1,
            message: "missing header line".into(),
        })?;
        PersonaSet::new(stage, personas)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    stage: Stage,
}

pub fn load_set(path: &Path) -> Result<PersonaSet, PersonaError> {
    let file = File::open(path)?;
    PersonaSet::from_jsonl(BufReader::new(file))
}

/// Writes the set atomically (temp file + rename), replacing any existing file.
pub fn save_set(set: &PersonaSet, path: &Path) -> Result<(), PersonaError> {
    fsutil::write_atomic(path, set.to_jsonl().as_bytes())?;
    Ok(())
}
