//! Character description generation and initial persona construction.
//!
//! Two backends sit behind [`Generator`]: a remote chat-completion client
//! driven by the bundled prompt templates, and a deterministic mock that
//! fills templates from fixed phrase banks keyed by a hash of its inputs.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::chat::{extract_fenced_json, ChatClient, PromptSet};
use crate::error::ProviderError;
use crate::persona::{
    Attribute, DimensionKey, DimensionValue, ExternalFeatures, Persona, Stage, TextDimension,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterDescription {
    pub motivations: String,
    pub abilities: String,
    pub desires: String,
    pub other_traits: String,
    pub summary: String,
}

impl CharacterDescription {
    pub fn validate(&self) -> Result<(), String> {
        if self.summary.trim().is_empty() {
            return Err("summary is empty".into());
        }
        Ok(())
    }

    fn render(&self) -> String {
        format!(
            "Motivations: {}\nAbilities: {}\nDesires: {}\nOther traits: {}\nSummary: {}",
            self.motivations, self.abilities, self.desires, self.other_traits, self.summary
        )
    }
}

pub trait Generator: Send + Sync {
    /// Backend label recorded in provenance.
    fn name(&self) -> &str;

    fn generate_description(
        &self,
        seed_prompt: &str,
    ) -> Result<CharacterDescription, ProviderError>;

    /// Builds a persona (stage initial) whose dimensions come from the
    /// completion. Any subset of dimensions may be absent.
    fn build_initial_persona(
        &self,
        id: &str,
        desc: &CharacterDescription,
    ) -> Result<Persona, ProviderError>;
}

fn empty_seed() -> ProviderError {
    ProviderError::Generation {
        message: "seed prompt is empty".into(),
        raw: String::new(),
    }
}

pub struct RemoteGenerator {
    client: Arc<ChatClient>,
    prompts: PromptSet,
    max_retries: u32,
}

impl RemoteGenerator {
    pub fn new(client: Arc<ChatClient>, prompts: PromptSet, max_retries: u32) -> Self {
        RemoteGenerator {
            client,
            prompts,
            max_retries,
        }
    }
}

impl Generator for RemoteGenerator {
    fn name(&self) -> &str {
        "remote"
    }

    fn generate_description(
        &self,
        seed_prompt: &str,
    ) -> Result<CharacterDescription, ProviderError> {
        if seed_prompt.trim().is_empty() {
            return Err(empty_seed());
        }
        let prompt = self
            .prompts
            .description
            .render(&[("seed_prompt", seed_prompt.trim())]);
        self.client
            .complete_parsed(&prompt, self.max_retries, parse_description)
    }

    fn build_initial_persona(
        &self,
        id: &str,
        desc: &CharacterDescription,
    ) -> Result<Persona, ProviderError> {
        let prompt = self
            .prompts
            .persona
            .render(&[("description", &desc.render())]);
        self.client
            .complete_parsed(&prompt, self.max_retries, |raw| parse_persona(id, raw))
    }
}

/// Parses a description completion; every field must be present.
pub fn parse_description(raw: &str) -> Result<CharacterDescription, String> {
    let map = extract_fenced_json(raw)?;
    let field = |name: &str| -> Result<String, String> {
        match map.get(name) {
            Some(Value::String(s)) => Ok(s.trim().to_string()),
            Some(_) => Err(format!("field {name} is not a string")),
            None => Err(format!("missing field {name}")),
        }
    };
    let desc = CharacterDescription {
        motivations: field("motivations")?,
        abilities: field("abilities")?,
        desires: field("desires")?,
        other_traits: field("other_traits")?,
        summary: field("summary")?,
    };
    desc.validate()?;
    Ok(desc)
}

/// Parses a persona completion into a validated stage-initial persona.
/// Unknown keys, empty texts and malformed external features are rejected.
pub fn parse_persona(id: &str, raw: &str) -> Result<Persona, String> {
    let map = extract_fenced_json(raw)?;
    let mut dims = BTreeMap::new();
    for (k, v) in &map {
        let key = DimensionKey::parse(k).ok_or_else(|| format!("unknown dimension {k:?}"))?;
        if v.is_null() {
            continue;
        }
        let value = if key.is_text() {
            match v {
                Value::String(s) => DimensionValue::Text(TextDimension::new(s.trim())),
                Value::Object(_) => DimensionValue::Text(
                    serde_json::from_value::<TextDimension>(v.clone())
                        .map_err(|e| format!("{k}: {e}"))?,
                ),
                _ => return Err(format!("{k}: expected text")),
            }
        } else {
            match v {
                Value::String(s) => DimensionValue::External(ExternalFeatures {
                    free_text: Some(s.trim().to_string()),
                    ..Default::default()
                }),
                Value::Object(_) => DimensionValue::External(
                    serde_json::from_value::<ExternalFeatures>(v.clone())
                        .map_err(|e| format!("{k}: {e}"))?,
                ),
                _ => return Err(format!("{k}: expected object or text")),
            }
        };
        dims.insert(key, value);
    }
    if dims.is_empty() {
        return Err("completion has no dimensions".into());
    }
    Persona::new(
        id,
        dims,
        vec![crate::persona::ProvenanceEntry {
            stage: Stage::Initial,
            action: "generate:remote".into(),
        }],
    )
    .map_err(|e| e.to_string())
}

/// Deterministic offline generator: a pure function of (inputs, seed).
#[derive(Debug, Clone)]
pub struct MockGenerator {
    seed: u64,
}

impl MockGenerator {
    pub fn new(seed: u64) -> Self {
        MockGenerator { seed }
    }

    fn rng_for(&self, salt: u64, key: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(xxh3_64_with_seed(key.as_bytes(), self.seed ^ salt))
    }
}

const MOTIVATIONS: &[&str] = &[
    "wants to prove that quiet people can lead",
    "is driven by a promise made to a late grandparent",
    "hopes to rebuild the community garden",
    "needs to pay off a family debt",
    "is searching for a sibling who moved abroad",
    "wants to be remembered for kindness",
];
const ABILITIES: &[&str] = &[
    "can calm a crowded room",
    "repairs almost any machine",
    "remembers every face",
    "speaks three languages",
    "cooks for fifty people without a recipe",
    "reads maps better than anyone",
];
const DESIRES: &[&str] = &[
    "a quiet house by the sea",
    "recognition from a stern mentor",
    "a second chance at music",
    "to travel without a schedule",
    "a stable job with good colleagues",
];
const OTHER_TRAITS: &[&str] = &[
    "laughs loudly",
    "keeps a detailed diary",
    "distrusts smartphones",
    "collects old postcards",
    "always arrives early",
];

type Bank = &'static [(&'static str, &'static str)];

const PERSONALITY: Bank = &[
    ("Cheerful and quick to encourage others.", "cheerful"),
    (
        "Empathetic; notices when friends are struggling.",
        "empathetic",
    ),
    (
        "Highly organized and keeps lists for everything.",
        "organized",
    ),
    ("Curious about how things work.", "curious"),
    ("Calm under pressure and patient with strangers.", "calm"),
    ("Shy at first but warm once comfortable.", "reserved"),
];
const EXPERIENCE: &[&str] = &[
    "Worked ten years as a hospital nurse.",
    "Volunteered at a food bank every weekend during college.",
    "Ran a small bakery with a cousin.",
    "Served as a high school chemistry teacher.",
    "Drove long-haul trucks across the country for six years.",
    "Managed a team of software developers.",
    "Trained as a carpenter and built furniture for neighbors.",
];
const HOBBIES: Bank = &[
    ("Paints landscapes on weekends.", "painting"),
    ("Plays basketball with friends twice a week.", "basketball"),
    ("Collects stamps from around the world.", "stamp collecting"),
    ("Hikes mountain trails every summer.", "hiking"),
    ("Plays chess online late at night.", "chess"),
    ("Grows tomatoes and herbs on a balcony.", "gardening"),
];
const SKILLS: Bank = &[
    ("Fluent in Spanish and Mandarin.", "multilingual"),
    ("An exceptional cook of regional dishes.", "cooking"),
    ("Can fix bicycles and small engines.", "mechanics"),
    ("Writes short programs to automate chores.", "programming"),
    ("Sings in a community choir.", "singing"),
];
const LIVING: Bank = &[
    ("Lives in a small city apartment near the river.", "urban"),
    ("Lives in a countryside farmhouse with two dogs.", "rural"),
    ("Shares a house in a busy metropolitan suburb.", "urban"),
    ("Lives in a village at the foot of the hills.", "rural"),
];
const HABITS: Bank = &[
    ("Goes for a morning run before work.", "morning runs"),
    ("Reads for an hour at bedtime.", "bedtime reading"),
    ("Makes a pot of tea every afternoon.", "afternoon tea"),
    ("Writes in a journal every evening.", "journaling"),
    ("Walks to the market every Saturday.", "weekly market"),
];
const CULTURE: &[(&str, &str, &str)] = &[
    (
        "Chinese-American and practices Christianity.",
        "christianity",
        "english",
    ),
    ("Grew up in a Muslim family in Cairo.", "islam", "arabic"),
    (
        "Raised in a Hindu household in Chennai.",
        "hinduism",
        "tamil",
    ),
    (
        "Comes from a secular family in Berlin.",
        "unaffiliated",
        "german",
    ),
    (
        "Grew up in a Buddhist community in Kyoto.",
        "buddhism",
        "japanese",
    ),
    (
        "Raised Catholic in a small town in Mexico.",
        "christianity",
        "spanish",
    ),
];
/// Stereotyped sentences the mock sometimes appends so the debias stage has
/// something to remove. Each contains a phrase from the bundled lexicon.
const BIASED: &[(DimensionKey, &str)] = &[
    (
        DimensionKey::Habits,
        "Avoids driving at night because women are bad drivers.",
    ),
    (
        DimensionKey::Personality,
        "Believes that women are too emotional to lead.",
    ),
    (
        DimensionKey::Hobbies,
        "Tells friends that old people cannot learn technology.",
    ),
    (
        DimensionKey::LivingEnvironment,
        "Says the neighbors are poor people and poor people are lazy.",
    ),
    (
        DimensionKey::CulturalBackground,
        "Often repeats that immigrants steal jobs.",
    ),
    (
        DimensionKey::SpecialSkills,
        "Thinks asian people are good at math by nature.",
    ),
];
const GENDERS: &[&str] = &["female", "male", "non-binary"];
const RACES: &[&str] = &[
    "east asian",
    "south asian",
    "black",
    "white",
    "hispanic",
    "middle eastern",
];

fn pick<'a, T>(rng: &mut ChaCha8Rng, bank: &'a [T]) -> &'a T {
    bank.choose(rng).expect("non-empty bank")
}

fn labeled(text: &str, name: &str, value: &str) -> DimensionValue {
    DimensionValue::Text(TextDimension::with_attributes(
        text,
        vec![Attribute::new(name, value)],
    ))
}

impl Generator for MockGenerator {
    fn name(&self) -> &str {
        "mock"
    }

    fn generate_description(
        &self,
        seed_prompt: &str,
    ) -> Result<CharacterDescription, ProviderError> {
        let seed_prompt = seed_prompt.trim();
        if seed_prompt.is_empty() {
            return Err(empty_seed());
        }
        let mut rng = self.rng_for(0xD35C, seed_prompt);
        let motivations = pick(&mut rng, MOTIVATIONS).to_string();
        let abilities = pick(&mut rng, ABILITIES).to_string();
        let desires = pick(&mut rng, DESIRES).to_string();
        let other_traits = pick(&mut rng, OTHER_TRAITS).to_string();
        let summary = format!("{seed_prompt}: someone who {motivations} and {abilities}.");
        Ok(CharacterDescription {
            motivations,
            abilities,
            desires,
            other_traits,
            summary,
        })
    }

    fn build_initial_persona(
        &self,
        id: &str,
        desc: &CharacterDescription,
    ) -> Result<Persona, ProviderError> {
        desc.validate().map_err(ProviderError::Validation)?;
        let mut rng = self.rng_for(0x9E45, &desc.render());
        let mut dims = BTreeMap::new();
        for key in DimensionKey::ALL {
            if !rng.random_bool(0.75) {
                continue;
            }
            let value = match key {
                DimensionKey::Personality => {
                    let (t, a) = pick(&mut rng, PERSONALITY);
                    labeled(t, "trait", a)
                }
                DimensionKey::Experience => DimensionValue::text(*pick(&mut rng, EXPERIENCE)),
                DimensionKey::Hobbies => {
                    let (t, a) = pick(&mut rng, HOBBIES);
                    labeled(t, "hobby", a)
                }
                DimensionKey::SpecialSkills => {
                    let (t, a) = pick(&mut rng, SKILLS);
                    labeled(t, "skill", a)
                }
                DimensionKey::LivingEnvironment => {
                    let (t, a) = pick(&mut rng, LIVING);
                    labeled(t, "setting", a)
                }
                DimensionKey::Habits => {
                    let (t, a) = pick(&mut rng, HABITS);
                    labeled(t, "habit", a)
                }
                DimensionKey::CulturalBackground => {
                    let (t, religion, language) = pick(&mut rng, CULTURE);
                    DimensionValue::Text(TextDimension::with_attributes(
                        *t,
                        vec![
                            Attribute::new("religion", *religion),
                            Attribute::new("language", *language),
                        ],
                    ))
                }
                DimensionKey::ExternalFeatures => DimensionValue::External(ExternalFeatures {
                    age: Some(rng.random_range(18..=80)),
                    race: Some(pick(&mut rng, RACES).to_string()),
                    gender: Some(pick(&mut rng, GENDERS).to_string()),
                    free_text: None,
                }),
            };
            dims.insert(key, value);
        }
        if dims.is_empty() {
            dims.insert(
                DimensionKey::Experience,
                DimensionValue::text(*pick(&mut rng, EXPERIENCE)),
            );
        }
        if rng.random_bool(0.4) {
            let (key, sentence) = pick(&mut rng, BIASED);
            if let Some(DimensionValue::Text(t)) = dims.get_mut(key) {
                t.text = format!("{} {}", t.text, sentence);
            }
        }
        let p =
            Persona::new(id, dims, vec![]).map_err(|e| ProviderError::Validation(e.to_string()))?;
        Ok(p.with_provenance(Stage::Initial, "generate:mock"))
    }
}
