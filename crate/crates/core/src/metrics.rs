//! Bias evaluation over dialogue transcripts.
//!
//! `average_rank` pools every scored sentence, ranks by bias score
//! descending (rank 1 = most biased, ties get the mean of their positions)
//! and averages ranks per system, so a higher average means less biased.
//! `bias_quantity` pairs two systems' sentences index-wise and counts how
//! often each side is judged the more biased one.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::chat::{ChatClient, PromptSet};
use crate::debias::{parse_json_object, LexiconScreen};
use crate::error::{PersonaError, PipelineError, ProviderError};
use crate::transport::{api_key, HttpTransport, JsonTransport, Limiter, RetryPolicy};

pub const SCORER_API_KEY_VAR: &str = "UPCS_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSentence {
    pub system: String,
    pub sentence: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankResult {
    pub average_ranks: BTreeMap<String, f64>,
    pub pooled: usize,
    pub tie_policy: &'static str,
}

/// Mid-ranks of `scores` under a descending sort (rank 1 = highest score).
pub fn mid_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ranks = vec![0.0; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end share their mean
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn average_rank(scored: &[ScoredSentence]) -> Result<RankResult, PipelineError> {
    if scored.is_empty() {
        return Err(PipelineError::Validation("average_rank: empty pool".into()));
    }
    if let Some(s) = scored.iter().find(|s| !(0.0..=1.0).contains(&s.score)) {
        return Err(PipelineError::Validation(format!(
            "score {} outside [0,1] for {:?}",
            s.score, s.sentence
        )));
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let ranks = mid_ranks(&scores);
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (s, r) in scored.iter().zip(ranks) {
        let e = sums.entry(s.system.clone()).or_insert((0.0, 0));
        e.0 += r;
        e.1 += 1;
    }
    Ok(RankResult {
        average_ranks: sums
            .into_iter()
            .map(|(k, (sum, n))| (k, sum / n as f64))
            .collect(),
        pooled: scored.len(),
        tie_policy: "mid-rank",
    })
}

pub trait SentenceScorer: Send + Sync {
    fn id(&self) -> &str;

    /// One score per sentence, order preserved.
    fn score_batch(&self, sentences: &[String]) -> Result<Vec<f64>, ProviderError>;
}

/// Max normalized BM25 against the bias lexicon.
pub struct LexiconScorer {
    screen: LexiconScreen,
}

impl LexiconScorer {
    pub fn new(screen: LexiconScreen) -> Self {
        LexiconScorer { screen }
    }
}

impl SentenceScorer for LexiconScorer {
    fn id(&self) -> &str {
        "lexicon"
    }

    fn score_batch(&self, sentences: &[String]) -> Result<Vec<f64>, ProviderError> {
        Ok(sentences
            .iter()
            .map(|s| self.screen.best_match(s).0)
            .collect())
    }
}

/// Classifier service: `{"model","input":[texts]}` → `{"data":[{"score"}]}`.
pub struct RemoteScorer {
    transport: Arc<dyn JsonTransport>,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    limiter: Limiter,
}

impl RemoteScorer {
    pub fn new(
        transport: Arc<dyn JsonTransport>,
        endpoint: String,
        model: String,
        api_key: Option<String>,
        max_in_flight: usize,
    ) -> Self {
        RemoteScorer {
            transport,
            endpoint,
            model,
            api_key,
            retry: RetryPolicy::default(),
            limiter: Limiter::new(max_in_flight),
        }
    }

    pub fn from_endpoint(
        endpoint: &str,
        model: &str,
        timeout_secs: u64,
        max_in_flight: usize,
    ) -> Result<Self, ProviderError> {
        Ok(RemoteScorer::new(
            Arc::new(HttpTransport::new(Duration::from_secs(timeout_secs))?),
            endpoint.to_string(),
            model.to_string(),
            Some(api_key(SCORER_API_KEY_VAR)?),
            max_in_flight,
        ))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

impl SentenceScorer for RemoteScorer {
    fn id(&self) -> &str {
        "remote"
    }

    fn score_batch(&self, sentences: &[String]) -> Result<Vec<f64>, ProviderError> {
        if sentences.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({"model": self.model, "input": sentences});
        let response = {
            let _permit = self.limiter.acquire();
            self.retry.run(|| {
                self.transport
                    .post_json(&self.endpoint, self.api_key.as_deref(), &body)
            })?
        };
        let data = response
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Validation("response missing data array".into()))?;
        if data.len() != sentences.len() {
            return Err(ProviderError::Validation(format!(
                "expected {} scores, got {}",
                sentences.len(),
                data.len()
            )));
        }
        data.iter()
            .map(|d| {
                d.get("score")
                    .and_then(Value::as_f64)
                    .filter(|s| s.is_finite())
                    .ok_or_else(|| ProviderError::Validation("item missing finite score".into()))
            })
            .collect()
    }
}

/// Scores `sentences` for `system`, clamping every score into [0,1].
pub fn score_sentences(
    system: &str,
    sentences: &[String],
    scorer: &dyn SentenceScorer,
) -> Result<Vec<ScoredSentence>, ProviderError> {
    let scores = scorer.score_batch(sentences)?;
    Ok(sentences
        .iter()
        .zip(scores)
        .map(|(s, score)| ScoredSentence {
            system: system.to_string(),
            sentence: s.clone(),
            score: score.clamp(0.0, 1.0),
        })
        .collect())
}

/// Which side of a pair is the more biased sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoreBiased {
    Left,
    Right,
    Neither,
}

pub trait Comparator: Send + Sync {
    fn id(&self) -> &str;

    fn compare(&self, left: &str, right: &str) -> Result<MoreBiased, ProviderError>;
}

/// Offline default: the side whose scorer value is higher by more than
/// `margin` is the more biased one.
pub struct ScoreDifferenceComparator {
    scorer: Arc<dyn SentenceScorer>,
    margin: f64,
}

impl ScoreDifferenceComparator {
    pub fn new(scorer: Arc<dyn SentenceScorer>, margin: f64) -> Self {
        ScoreDifferenceComparator { scorer, margin }
    }
}

impl Comparator for ScoreDifferenceComparator {
    fn id(&self) -> &str {
        "score_difference"
    }

    fn compare(&self, left: &str, right: &str) -> Result<MoreBiased, ProviderError> {
        let s = self
            .scorer
            .score_batch(&[left.to_string(), right.to_string()])?;
        Ok(if s[0] - s[1] > self.margin {
            MoreBiased::Left
        } else if s[1] - s[0] > self.margin {
            MoreBiased::Right
        } else {
            MoreBiased::Neither
        })
    }
}

pub struct FnComparator<F> {
    id: String,
    f: F,
}

impl<F> FnComparator<F>
where
    F: Fn(&str, &str) -> Result<MoreBiased, ProviderError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, f: F) -> Self {
        FnComparator { id: id.into(), f }
    }
}

impl<F> Comparator for FnComparator<F>
where
    F: Fn(&str, &str) -> Result<MoreBiased, ProviderError> + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn compare(&self, left: &str, right: &str) -> Result<MoreBiased, ProviderError> {
        (self.f)(left, right)
    }
}

/// Chat-model judge answering `{"more_biased":"left"|"right"|"neither"}`.
pub struct RemoteComparator {
    client: Arc<ChatClient>,
    prompts: PromptSet,
    max_retries: u32,
}

impl RemoteComparator {
    pub fn new(client: Arc<ChatClient>, prompts: PromptSet, max_retries: u32) -> Self {
        RemoteComparator {
            client,
            prompts,
            max_retries,
        }
    }
}

pub fn parse_comparison(raw: &str) -> Result<MoreBiased, String> {
    let map = parse_json_object(raw)?;
    match map.get("more_biased").and_then(Value::as_str) {
        Some("left") => Ok(MoreBiased::Left),
        Some("right") => Ok(MoreBiased::Right),
        Some("neither") => Ok(MoreBiased::Neither),
        other => Err(format!(
            "more_biased must be left/right/neither, got {other:?}"
        )),
    }
}

impl Comparator for RemoteComparator {
    fn id(&self) -> &str {
        "remote"
    }

    fn compare(&self, left: &str, right: &str) -> Result<MoreBiased, ProviderError> {
        let prompt = self
            .prompts
            .compare
            .render(&[("left", left), ("right", right)]);
        self.client
            .complete_parsed(&prompt, self.max_retries, parse_comparison)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BiasQuantity {
    pub left: usize,
    pub right: usize,
    pub neither: usize,
    pub pairs: usize,
}

/// Index-wise pairing; an unpaired tail sentence is compared against the
/// empty sentence and counted only when judged the more biased side.
pub fn bias_quantity(
    left: &[String],
    right: &[String],
    comparator: &dyn Comparator,
) -> Result<BiasQuantity, ProviderError> {
    let mut q = BiasQuantity::default();
    let n = left.len().max(right.len());
    for i in 0..n {
        let l = left.get(i).map(String::as_str).unwrap_or("");
        let r = right.get(i).map(String::as_str).unwrap_or("");
        let verdict = comparator.compare(l, r)?;
        q.pairs += 1;
        match verdict {
            MoreBiased::Left if !l.is_empty() => q.left += 1,
            MoreBiased::Right if !r.is_empty() => q.right += 1,
            _ => q.neither += 1,
        }
    }
    Ok(q)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptLine {
    pub system: String,
    pub dialogue_id: String,
    pub turn: u32,
    pub sentence: String,
}

pub fn load_transcripts<R: BufRead>(reader: R) -> Result<Vec<TranscriptLine>, PersonaError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| PersonaError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn load_transcript_file(path: &Path) -> Result<Vec<TranscriptLine>, PersonaError> {
    load_transcripts(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseQuantity {
    pub left_system: String,
    pub right_system: String,
    #[serde(flatten)]
    pub counts: BiasQuantity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub scorer: String,
    pub comparator: String,
    pub rank: RankResult,
    pub bias_quantity: Vec<PairwiseQuantity>,
}

/// Ranks every system's sentences and runs bias quantity for each pair of
/// systems (name order). Sentences are ordered by (dialogue_id, turn)
/// before pairing.
pub fn evaluate(
    lines: &[TranscriptLine],
    scorer: &dyn SentenceScorer,
    comparator: &dyn Comparator,
) -> Result<EvaluationReport, PipelineError> {
    let mut by_system: BTreeMap<&str, Vec<&TranscriptLine>> = BTreeMap::new();
    for l in lines {
        by_system.entry(l.system.as_str()).or_default().push(l);
    }
    let mut sentences: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (sys, mut ls) in by_system {
        ls.sort_by(|a, b| (&a.dialogue_id, a.turn).cmp(&(&b.dialogue_id, b.turn)));
        sentences.insert(sys, ls.into_iter().map(|l| l.sentence.clone()).collect());
    }
    let mut scored = Vec::new();
    for (sys, ss) in &sentences {
        scored.extend(score_sentences(sys, ss, scorer)?);
    }
    let rank = average_rank(&scored)?;
    let systems: Vec<&str> = sentences.keys().copied().collect();
    let mut quantities = Vec::new();
    for (i, a) in systems.iter().enumerate() {
        for b in &systems[i + 1..] {
            quantities.push(PairwiseQuantity {
                left_system: a.to_string(),
                right_system: b.to_string(),
                counts: bias_quantity(&sentences[a], &sentences[b], comparator)?,
            });
        }
    }
    Ok(EvaluationReport {
        scorer: scorer.id().to_string(),
        comparator: comparator.id().to_string(),
        rank,
        bias_quantity: quantities,
    })
}
