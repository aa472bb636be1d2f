//! Unbiased persona set construction by attribute resampling.
//!
//! Every attribute listed in a [`DistributionSpec`] is redrawn for every
//! persona, independently, from one ChaCha8 stream seeded with the run seed.
//! Draw order is persona order, then dimension order, then attribute name
//! order, so output is a pure function of (set, spec, seed). Experience is
//! never resampled and is copied through byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DistributionError, PipelineError};
use crate::persona::{
    Attribute, DimensionKey, DimensionValue, ExternalFeatures, Persona, PersonaSet, Stage,
    TextDimension, MAX_AGE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeBucket {
    pub lo: i64,
    pub hi: i64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttributeTable {
    Categorical { weights: BTreeMap<String, f64> },
    Range { buckets: Vec<RangeBucket> },
}

impl AttributeTable {
    fn validate(&self) -> Result<(), String> {
        let check = |ws: &mut dyn Iterator<Item = f64>| -> Result<(), String> {
            let mut sum = 0.0;
            for w in ws {
                if !(w.is_finite() && w >= 0.0) {
                    return Err(format!("weight {w} is not a finite non-negative number"));
                }
                sum += w;
            }
            if sum > 0.0 {
                Ok(())
            } else {
                Err("weights must have a positive sum".into())
            }
        };
        match self {
            AttributeTable::Categorical { weights } => {
                if weights.keys().any(|k| k.trim().is_empty()) {
                    return Err("empty category value".into());
                }
                check(&mut weights.values().copied())
            }
            AttributeTable::Range { buckets } => {
                if let Some(b) = buckets.iter().find(|b| b.lo > b.hi) {
                    return Err(format!("empty range bucket [{}, {}]", b.lo, b.hi));
                }
                check(&mut buckets.iter().map(|b| b.weight))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampledValue {
    Integer(i64),
    Label(String),
}

impl SampledValue {
    pub fn render(&self) -> String {
        match self {
            SampledValue::Integer(n) => n.to_string(),
            SampledValue::Label(s) => s.clone(),
        }
    }
}

/// Per-dimension attribute distributions (the default unbiased one or a
/// caller-supplied custom one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    pub version: String,
    pub source: String,
    pub dimensions: BTreeMap<DimensionKey, BTreeMap<String, AttributeTable>>,
}

const EXTERNAL_ATTRIBUTES: [&str; 3] = ["age", "race", "gender"];

impl DistributionSpec {
    pub fn validate(&self) -> Result<(), DistributionError> {
        let mut problems = Vec::new();
        if self.dimensions.contains_key(&DimensionKey::Experience) {
            problems.push("experience is never resampled and must not have a table".to_string());
        }
        for (dim, attrs) in &self.dimensions {
            if attrs.is_empty() {
                problems.push(format!("{dim}: no attributes"));
            }
            for (name, table) in attrs {
                if name.trim().is_empty() {
                    problems.push(format!("{dim}: empty attribute name"));
                }
                if let Err(m) = table.validate() {
                    problems.push(format!("{dim}.{name}: {m}"));
                }
                if *dim != DimensionKey::ExternalFeatures {
                    continue;
                }
                match (name.as_str(), table) {
                    ("age", AttributeTable::Range { buckets }) => {
                        if buckets.iter().any(|b| b.lo < 0 || b.hi > MAX_AGE as i64) {
                            problems
                                .push(format!("{dim}.age: buckets must lie within 0..={MAX_AGE}"));
                        }
                    }
                    ("age", _) => problems.push(format!("{dim}.age must be a range table")),
                    ("race" | "gender", AttributeTable::Categorical { .. }) => {}
                    ("race" | "gender", _) => {
                        problems.push(format!("{dim}.{name} must be a categorical table"))
                    }
                    _ => problems.push(format!(
                        "{dim}.{name}: external_features supports only {EXTERNAL_ATTRIBUTES:?}"
                    )),
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DistributionError::Validation(problems.join("; ")))
        }
    }

    pub fn from_json(text: &str) -> Result<Self, DistributionError> {
        let spec: DistributionSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// The bundled default distribution.
    pub fn bundled() -> Self {
        DistributionSpec::from_json(include_str!("../data/d_unbias.v1.json"))
            .expect("bundled distribution is valid")
    }

    pub fn table(&self, dimension: DimensionKey, attribute: &str) -> Option<&AttributeTable> {
        self.dimensions.get(&dimension)?.get(attribute)
    }

    /// `(dimension, attribute, table)` in sampling order.
    pub fn attributes(&self) -> impl Iterator<Item = (DimensionKey, &str, &AttributeTable)> {
        self.dimensions
            .iter()
            .flat_map(|(d, attrs)| attrs.iter().map(move |(a, t)| (*d, a.as_str(), t)))
    }
}

pub fn load_distribution(path: &Path) -> Result<DistributionSpec, DistributionError> {
    DistributionSpec::from_json(&std::fs::read_to_string(path)?)
}

fn draw(table: &AttributeTable, rng: &mut impl Rng) -> SampledValue {
    match table {
        AttributeTable::Categorical { weights } => {
            let dist = WeightedIndex::new(weights.values().copied()).expect("validated weights");
            let (value, _) = weights
                .iter()
                .nth(dist.sample(rng))
                .expect("index in range");
            SampledValue::Label(value.clone())
        }
        AttributeTable::Range { buckets } => {
            let dist =
                WeightedIndex::new(buckets.iter().map(|b| b.weight)).expect("validated weights");
            let b = &buckets[dist.sample(rng)];
            SampledValue::Integer(rng.random_range(b.lo..=b.hi))
        }
    }
}

/// Draws one value for `dimension.attribute`.
pub fn sample_attribute(
    spec: &DistributionSpec,
    dimension: DimensionKey,
    attribute: &str,
    rng: &mut impl Rng,
) -> Result<SampledValue, DistributionError> {
    let table =
        spec.table(dimension, attribute)
            .ok_or_else(|| DistributionError::UnknownAttribute {
                dimension: dimension.to_string(),
                attribute: attribute.to_string(),
            })?;
    Ok(draw(table, rng))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rewrite {
    pub dimension: DimensionKey,
    pub attribute: String,
    pub value: SampledValue,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersonaRewrite {
    pub id: String,
    pub rewritten: Vec<Rewrite>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResampleReport {
    pub seed: u64,
    pub spec_version: String,
    /// `"dimension.attribute"` → sampled value → count.
    pub frequencies: BTreeMap<String, BTreeMap<String, usize>>,
    pub personas: Vec<PersonaRewrite>,
}

fn apply(persona: &Persona, dim: DimensionKey, draws: &[(&str, SampledValue)]) -> Persona {
    let value = if dim == DimensionKey::ExternalFeatures {
        let mut e = persona
            .dimension(dim)
            .and_then(DimensionValue::as_external)
            .cloned()
            .unwrap_or_else(ExternalFeatures::default);
        for (name, v) in draws {
            match (*name, v) {
                ("age", SampledValue::Integer(n)) => e.age = Some(*n as u32),
                ("race", v) => e.race = Some(v.render()),
                ("gender", v) => e.gender = Some(v.render()),
                _ => unreachable!("validated external attribute"),
            }
        }
        DimensionValue::External(e)
    } else {
        let t = match persona.dimension(dim).and_then(DimensionValue::as_text) {
            Some(t) => {
                let mut t = t.clone();
                for (name, v) in draws {
                    match t.attributes.iter_mut().find(|a| a.name == *name) {
                        Some(a) => a.value = v.render(),
                        None => t.attributes.push(Attribute::new(*name, v.render())),
                    }
                }
                t
            }
            None => {
                let text = draws
                    .iter()
                    .map(|(n, v)| format!("{n}: {}", v.render()))
                    .collect::<Vec<_>>()
                    .join("; ");
                TextDimension::with_attributes(
                    format!("{text}."),
                    draws
                        .iter()
                        .map(|(n, v)| Attribute::new(*n, v.render()))
                        .collect(),
                )
            }
        };
        DimensionValue::Text(t)
    };
    persona
        .with_dimension(dim, value)
        .expect("sampled values satisfy persona invariants")
}

/// Resamples every attribute in `spec` for every persona.
///
/// Present text dimensions keep their text and get their attribute labels
/// rewritten; an absent text dimension is created with a short text listing
/// the sampled labels. External features get sampled structured fields and
/// keep any free text.
pub fn resample_set(
    set: &PersonaSet,
    spec: &DistributionSpec,
    seed: u64,
) -> Result<(PersonaSet, ResampleReport), PipelineError> {
    if set.stage() != Stage::IncompleteDebiased {
        return Err(PipelineError::Validation(format!(
            "resample expects a set at stage incomplete_debiased, got {}",
            set.stage()
        )));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frequencies: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (d, a, _) in spec.attributes() {
        frequencies.insert(format!("{d}.{a}"), BTreeMap::new());
    }
    let mut personas = Vec::with_capacity(set.len());
    let mut rewrites = Vec::with_capacity(set.len());
    for persona in set.personas() {
        let mut next = persona.clone();
        let mut rewritten = Vec::new();
        for (dim, attrs) in &spec.dimensions {
            let draws: Vec<(&str, SampledValue)> = attrs
                .iter()
                .map(|(name, table)| (name.as_str(), draw(table, &mut rng)))
                .collect();
            next = apply(&next, *dim, &draws);
            for (name, value) in draws {
                *frequencies
                    .get_mut(&format!("{dim}.{name}"))
                    .expect("attribute registered")
                    .entry(value.render())
                    .or_insert(0) += 1;
                rewritten.push(Rewrite {
                    dimension: *dim,
                    attribute: name.to_string(),
                    value,
                });
            }
        }
        personas.push(next.with_provenance(
            Stage::Unbiased,
            format!("resample:spec={},seed={seed}", spec.version),
        ));
        rewrites.push(PersonaRewrite {
            id: persona.id().to_string(),
            rewritten,
        });
    }
    Ok((
        set.advance(Stage::Unbiased, personas)?,
        ResampleReport {
            seed,
            spec_version: spec.version.clone(),
            frequencies,
            personas: rewrites,
        },
    ))
}

/// Same contract as [`resample_set`] with a caller-supplied distribution.
pub fn resample_with_custom(
    set: &PersonaSet,
    custom: &DistributionSpec,
    seed: u64,
) -> Result<(PersonaSet, ResampleReport), PipelineError> {
    resample_set(set, custom, seed)
}
