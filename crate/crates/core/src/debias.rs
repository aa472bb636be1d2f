//! Bias elimination: a reviewer pass over every persona sentence, then a
//! lexicon screen (normalized BM25 against curated bias expressions) whose
//! hits get exactly one re-review. Deletion is per sentence; a dimension
//! left with no sentences becomes absent.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::chat::{ChatClient, PromptSet};
use crate::error::{LexiconError, PipelineError, ProviderError};
use crate::persona::{DimensionKey, DimensionValue, Persona, PersonaSet, Stage};
use crate::similarity::{bm25_normalized, Bm25Index, Bm25Params};

pub const DEFAULT_SCREEN_THRESHOLD: f64 = 0.75;

/// Splits on `.`, `!` or `?` when followed by whitespace or end of text.
/// Sentences are trimmed; empties are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = match chars.peek() {
                None => true,
                Some((_, next)) => next.is_whitespace(),
            };
            if at_boundary {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s.to_string());
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconEntry {
    pub expression: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasLexicon {
    version: String,
    entries: Vec<LexiconEntry>,
}

impl BiasLexicon {
    pub fn new(
        version: impl Into<String>,
        entries: Vec<LexiconEntry>,
    ) -> Result<Self, LexiconError> {
        if entries.is_empty() {
            return Err(LexiconError::Empty);
        }
        if let Some(i) = entries.iter().position(|e| e.expression.trim().is_empty()) {
            return Err(LexiconError::Parse {
                line: i + 1,
                message: "empty expression".into(),
            });
        }
        Ok(BiasLexicon {
            version: version.into(),
            entries,
        })
    }

    /// Parses JSONL lines of `{"expression","category"}`.
    pub fn from_jsonl<R: BufRead>(version: &str, reader: R) -> Result<Self, LexiconError> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: LexiconEntry =
                serde_json::from_str(&line).map_err(|e| LexiconError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if entry.expression.trim().is_empty() {
                return Err(LexiconError::Parse {
                    line: i + 1,
                    message: "empty expression".into(),
                });
            }
            entries.push(entry);
        }
        BiasLexicon::new(version, entries)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let version = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        let file = std::fs::File::open(path)?;
        BiasLexicon::from_jsonl(&version, std::io::BufReader::new(file))
    }

    /// The starter lexicon shipped with the crate.
    pub fn bundled() -> Self {
        BiasLexicon::from_jsonl(
            "bundled-v1",
            include_str!("../data/lexicon.v1.jsonl").as_bytes(),
        )
        .expect("bundled lexicon is valid")
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn entries(&self) -> &[LexiconEntry] {
        &self.entries
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreenResult {
    pub flagged: bool,
    pub best_score: f64,
    pub matched_entry: Option<LexiconEntry>,
}

/// BM25 index over the lexicon entries, built once and reused per sentence.
#[derive(Debug, Clone)]
pub struct LexiconScreen {
    lexicon: BiasLexicon,
    index: Bm25Index,
    params: Bm25Params,
    threshold: f64,
}

impl LexiconScreen {
    pub fn new(lexicon: BiasLexicon, params: Bm25Params, threshold: f64) -> Self {
        let texts: Vec<&str> = lexicon
            .entries
            .iter()
            .map(|e| e.expression.as_str())
            .collect();
        let index = Bm25Index::from_texts(&texts, &params);
        LexiconScreen {
            lexicon,
            index,
            params,
            threshold,
        }
    }

    pub fn lexicon(&self) -> &BiasLexicon {
        &self.lexicon
    }

    /// Highest normalized BM25 of the sentence against any entry, and that
    /// entry (lowest index wins ties).
    pub fn best_match(&self, sentence: &str) -> (f64, Option<usize>) {
        let query = self.params.analyze(sentence);
        if query.is_empty() {
            return (0.0, None);
        }
        let mut best = (0.0, None);
        for i in 0..self.index.len() {
            let s = bm25_normalized(&self.index, &query, i, &self.params)
                .expect("index within lexicon");
            if s > best.0 {
                best = (s, Some(i));
            }
        }
        best
    }

    /// Flags iff the best score strictly exceeds the threshold.
    pub fn screen(&self, sentence: &str) -> ScreenResult {
        let (best_score, idx) = self.best_match(sentence);
        ScreenResult {
            flagged: best_score > self.threshold,
            best_score,
            matched_entry: idx.map(|i| self.lexicon.entries[i].clone()),
        }
    }
}

/// One-shot form: builds the index over `lexicon` and screens `sentence`
/// at the default 0.75 threshold.
pub fn screen_sentence(sentence: &str, lexicon: &BiasLexicon, params: &Bm25Params) -> ScreenResult {
    LexiconScreen::new(lexicon.clone(), *params, DEFAULT_SCREEN_THRESHOLD).screen(sentence)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Biased,
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewPass {
    Initial,
    ReReview,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasReviewVerdict {
    pub sentence: String,
    pub verdict: Verdict,
    pub rationale: String,
    pub reviewer: String,
}

pub trait Reviewer: Send + Sync {
    fn id(&self) -> &str;

    fn review(&self, sentence: &str, pass: ReviewPass) -> Result<BiasReviewVerdict, ProviderError>;
}

/// Keyword reviewer for offline runs: a sentence is biased on the initial
/// pass if it contains any `initial_markers` phrase, and on re-review if it
/// contains any phrase from either list. Matching is case-insensitive on
/// whitespace-normalized text.
#[derive(Debug, Clone)]
pub struct MockReviewer {
    initial_markers: Vec<String>,
    rereview_markers: Vec<String>,
}

impl MockReviewer {
    pub fn new(initial_markers: Vec<String>, rereview_markers: Vec<String>) -> Self {
        let norm = |v: Vec<String>| v.into_iter().map(|m| normalize(&m)).collect();
        MockReviewer {
            initial_markers: norm(initial_markers),
            rereview_markers: norm(rereview_markers),
        }
    }
}

impl Default for MockReviewer {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        MockReviewer::new(
            s(&["too emotional", "immigrants steal", "belong in the kitchen"]),
            s(&[
                "bad drivers",
                "cannot learn",
                "are lazy",
                "by nature",
                "good at math",
                "naturally",
            ]),
        )
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

impl Reviewer for MockReviewer {
    fn id(&self) -> &str {
        "mock"
    }

    fn review(&self, sentence: &str, pass: ReviewPass) -> Result<BiasReviewVerdict, ProviderError> {
        let text = normalize(sentence);
        let hit = |markers: &[String]| markers.iter().find(|m| text.contains(m.as_str())).cloned();
        let found = match pass {
            ReviewPass::Initial => hit(&self.initial_markers),
            ReviewPass::ReReview => {
                hit(&self.initial_markers).or_else(|| hit(&self.rereview_markers))
            }
        };
        Ok(BiasReviewVerdict {
            sentence: sentence.to_string(),
            verdict: if found.is_some() {
                Verdict::Biased
            } else {
                Verdict::Clean
            },
            rationale: match found {
                Some(m) => format!("contains {m:?}"),
                None => "no marker".into(),
            },
            reviewer: "mock".into(),
        })
    }
}

/// Reviewer backed by a closure; handy for scripted verdicts.
pub struct FnReviewer<F> {
    id: String,
    f: F,
}

impl<F> FnReviewer<F>
where
    F: Fn(&str, ReviewPass) -> Result<Verdict, ProviderError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        FnReviewer { id: id.into(), f }
    }
}

impl<F> Reviewer for FnReviewer<F>
where
    F: Fn(&str, ReviewPass) -> Result<Verdict, ProviderError> + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn review(&self, sentence: &str, pass: ReviewPass) -> Result<BiasReviewVerdict, ProviderError> {
        let verdict = (self.f)(sentence, pass)?;
        Ok(BiasReviewVerdict {
            sentence: sentence.to_string(),
            verdict,
            rationale: String::new(),
            reviewer: self.id.clone(),
        })
    }
}

/// Reviewer that asks a chat model for `{"verdict","rationale"}`.
pub struct RemoteReviewer {
    client: Arc<ChatClient>,
    prompts: PromptSet,
    max_retries: u32,
}

impl RemoteReviewer {
    pub fn new(client: Arc<ChatClient>, prompts: PromptSet, max_retries: u32) -> Self {
        RemoteReviewer {
            client,
            prompts,
            max_retries,
        }
    }
}

/// Accepts a bare JSON object or one inside a fence.
pub(crate) fn parse_json_object(raw: &str) -> Result<serde_json::Map<String, Value>, String> {
    match serde_json::from_str::<Value>(raw.trim()) {
        Ok(Value::Object(m)) => Ok(m),
        _ => crate::chat::extract_fenced_json(raw),
    }
}

pub fn parse_verdict(raw: &str) -> Result<(Verdict, String), String> {
    let map = parse_json_object(raw)?;
    let verdict = match map.get("verdict").and_then(Value::as_str) {
        Some("biased") => Verdict::Biased,
        Some("clean") => Verdict::Clean,
        other => {
            return Err(format!(
                "verdict must be \"biased\" or \"clean\", got {other:?}"
            ))
        }
    };
    let rationale = map
        .get("rationale")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Ok((verdict, rationale))
}

impl Reviewer for RemoteReviewer {
    fn id(&self) -> &str {
        "remote"
    }

    fn review(
        &self,
        sentence: &str,
        _pass: ReviewPass,
    ) -> Result<BiasReviewVerdict, ProviderError> {
        let prompt = self.prompts.review.render(&[("sentence", sentence)]);
        let (verdict, rationale) =
            self.client
                .complete_parsed(&prompt, self.max_retries, parse_verdict)?;
        Ok(BiasReviewVerdict {
            sentence: sentence.to_string(),
            verdict,
            rationale,
            reviewer: "remote".into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeletionPhase {
    Reviewer,
    ReReview,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Deletion {
    pub dimension: DimensionKey,
    pub sentence: String,
    pub phase: DeletionPhase,
    pub verdict: BiasReviewVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreenFlag {
    pub dimension: DimensionKey,
    pub sentence: String,
    pub score: f64,
    pub matched: Option<LexiconEntry>,
    pub rereview: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PersonaDebias {
    pub id: String,
    pub sentences_in: usize,
    pub sentences_out: usize,
    pub deletions: Vec<Deletion>,
    pub screen_flags: Vec<ScreenFlag>,
    pub emptied: Vec<DimensionKey>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DebiasCounts {
    pub sentences_in: usize,
    pub sentences_out: usize,
    pub reviewer_deleted: usize,
    pub screen_flagged: usize,
    pub rereview_deleted: usize,
    pub dimensions_emptied: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DebiasReport {
    pub reviewer: String,
    pub lexicon_version: String,
    pub screen_threshold: f64,
    pub counts: DebiasCounts,
    pub personas: Vec<PersonaDebias>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EliminationConfig {
    pub screen_threshold: f64,
    pub bm25: Bm25Params,
}

impl Default for EliminationConfig {
    fn default() -> Self {
        EliminationConfig {
            screen_threshold: DEFAULT_SCREEN_THRESHOLD,
            bm25: Bm25Params::default(),
        }
    }
}

struct Pruned {
    kept: Vec<String>,
    deletions: Vec<Deletion>,
    flags: Vec<ScreenFlag>,
}

fn prune(
    dimension: DimensionKey,
    text: &str,
    reviewer: &dyn Reviewer,
    screen: &LexiconScreen,
) -> Result<Pruned, ProviderError> {
    let mut deletions = Vec::new();
    let mut survivors = Vec::new();
    for sentence in split_sentences(text) {
        let v = reviewer.review(&sentence, ReviewPass::Initial)?;
        if v.verdict == Verdict::Biased {
            deletions.push(Deletion {
                dimension,
                sentence,
                phase: DeletionPhase::Reviewer,
                verdict: v,
            });
        } else {
            survivors.push(sentence);
        }
    }
    let mut kept = Vec::new();
    let mut flags = Vec::new();
    for sentence in survivors {
        let s = screen.screen(&sentence);
        if !s.flagged {
            kept.push(sentence);
            continue;
        }
        let v = reviewer.review(&sentence, ReviewPass::ReReview)?;
        flags.push(ScreenFlag {
            dimension,
            sentence: sentence.clone(),
            score: s.best_score,
            matched: s.matched_entry,
            rereview: v.verdict,
        });
        if v.verdict == Verdict::Biased {
            deletions.push(Deletion {
                dimension,
                sentence,
                phase: DeletionPhase::ReReview,
                verdict: v,
            });
        } else {
            kept.push(sentence);
        }
    }
    Ok(Pruned {
        kept,
        deletions,
        flags,
    })
}

fn debias_persona(
    persona: &Persona,
    reviewer: &dyn Reviewer,
    screen: &LexiconScreen,
) -> Result<(Persona, PersonaDebias), ProviderError> {
    let mut dims = BTreeMap::new();
    let mut record = PersonaDebias {
        id: persona.id().to_string(),
        sentences_in: 0,
        sentences_out: 0,
        deletions: Vec::new(),
        screen_flags: Vec::new(),
        emptied: Vec::new(),
    };
    for (&key, value) in persona.dimensions() {
        let text = match value {
            DimensionValue::Text(t) => Some(t.text.as_str()),
            DimensionValue::External(e) => e.free_text.as_deref(),
        };
        let Some(text) = text else {
            dims.insert(key, value.clone());
            continue;
        };
        let n_in = split_sentences(text).len();
        let pruned = prune(key, text, reviewer, screen)?;
        record.sentences_in += n_in;
        record.sentences_out += pruned.kept.len();
        let changed = !pruned.deletions.is_empty();
        record.deletions.extend(pruned.deletions);
        record.screen_flags.extend(pruned.flags);
        if !changed {
            dims.insert(key, value.clone());
            continue;
        }
        let joined = pruned.kept.join(" ");
        let next = match value {
            DimensionValue::Text(t) if !joined.is_empty() => {
                let mut t = t.clone();
                t.text = joined;
                Some(DimensionValue::Text(t))
            }
            DimensionValue::Text(_) => None,
            DimensionValue::External(e) => {
                let mut e = e.clone();
                e.free_text = (!joined.is_empty()).then_some(joined);
                let empty = e.age.is_none()
                    && e.race.is_none()
                    && e.gender.is_none()
                    && e.free_text.is_none();
                (!empty).then_some(DimensionValue::External(e))
            }
        };
        match next {
            Some(v) => {
                dims.insert(key, v);
            }
            None => record.emptied.push(key),
        }
    }
    let out = Persona::new(persona.id(), dims, persona.provenance().to_vec())
        .expect("deletion preserves persona invariants");
    Ok((out, record))
}

/// Runs the two-step elimination over every persona (in parallel on the
/// current rayon pool); output order and report order follow the input.
pub fn eliminate(
    set: &PersonaSet,
    reviewer: &dyn Reviewer,
    lexicon: &BiasLexicon,
    config: &EliminationConfig,
) -> Result<(PersonaSet, DebiasReport), PipelineError> {
    if set.stage() != Stage::Initial {
        return Err(PipelineError::Validation(format!(
            "debias expects a set at stage initial, got {}",
            set.stage()
        )));
    }
    let screen = LexiconScreen::new(lexicon.clone(), config.bm25, config.screen_threshold);
    let results: Vec<(Persona, PersonaDebias)> = set
        .personas()
        .par_iter()
        .map(|p| debias_persona(p, reviewer, &screen))
        .collect::<Result<_, _>>()?;

    let mut counts = DebiasCounts::default();
    let mut personas = Vec::with_capacity(results.len());
    let mut records = Vec::with_capacity(results.len());
    for (p, r) in results {
        counts.sentences_in += r.sentences_in;
        counts.sentences_out += r.sentences_out;
        counts.reviewer_deleted += r
            .deletions
            .iter()
            .filter(|d| d.phase == DeletionPhase::Reviewer)
            .count();
        counts.rereview_deleted += r
            .deletions
            .iter()
            .filter(|d| d.phase == DeletionPhase::ReReview)
            .count();
        counts.screen_flagged += r.screen_flags.len();
        counts.dimensions_emptied += r.emptied.len();
        let action = format!(
            "debias:reviewer={},lexicon={},deleted={}",
            reviewer.id(),
            lexicon.version(),
            r.deletions.len()
        );
        personas.push(p.with_provenance(Stage::IncompleteDebiased, action));
        records.push(r);
    }
    let out = set.advance(Stage::IncompleteDebiased, personas)?;
    Ok((
        out,
        DebiasReport {
            reviewer: reviewer.id().to_string(),
            lexicon_version: lexicon.version().to_string(),
            screen_threshold: config.screen_threshold,
            counts,
            personas: records,
        },
    ))
}
