//! Completion of missing dimensions from the most similar persona.
//!
//! Each incomplete persona picks one donor, the argmax of
//! `alpha * cosine + beta * pearson` over persona embeddings (lowest index on
//! ties), and copies the donor's values for its missing dimensions only when
//! the normalized BM25 of target text (query) against donor text (document,
//! whole-set index) is at least `theta`. Donor values always come from the
//! input snapshot, so the result does not depend on processing order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingProvider, EmbeddingVector};
use crate::error::PipelineError;
use crate::persona::{DimensionKey, PersonaSet, Stage};
use crate::similarity::{
    bm25_normalized, combined_similarity, Bm25Index, Bm25Params, SimilarityWeights,
};

pub const DEFAULT_THETA: f64 = 0.5;
const PARALLEL_MIN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FillConfig {
    pub weights: SimilarityWeights,
    pub theta: f64,
    pub bm25: Bm25Params,
}

impl Default for FillConfig {
    fn default() -> Self {
        FillConfig {
            weights: SimilarityWeights::default(),
            theta: DEFAULT_THETA,
            bm25: Bm25Params::default(),
        }
    }
}

/// Pairwise S scores. `None` on the diagonal and for any pair involving a
/// persona whose embedding is degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    scores: Vec<Vec<Option<f64>>>,
    excluded: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn from_embeddings(
        embeddings: &[EmbeddingVector],
        weights: &SimilarityWeights,
    ) -> Result<Self, PipelineError> {
        let n = embeddings.len();
        let excluded: Vec<usize> = (0..n).filter(|&i| embeddings[i].is_degenerate()).collect();
        let row = |i: usize| {
            ((i + 1)..n)
                .map(|j| {
                    if excluded.contains(&i) || excluded.contains(&j) {
                        return Ok(None);
                    }
                    combined_similarity(embeddings[i].values(), embeddings[j].values(), weights)
                        .map(Some)
                })
                .collect::<Result<Vec<_>, _>>()
        };
        // Small sets are cheaper without a pool handoff.
        let upper: Vec<Vec<Option<f64>>> = if n < PARALLEL_MIN {
            (0..n).map(row).collect::<Result<_, _>>()?
        } else {
            (0..n).into_par_iter().map(row).collect::<Result<_, _>>()?
        };
        let mut scores = vec![vec![None; n]; n];
        for (i, row) in upper.into_iter().enumerate() {
            for (k, s) in row.into_iter().enumerate() {
                let j = i + 1 + k;
                scores[i][j] = s;
                scores[j][i] = s;
            }
        }
        Ok(SimilarityMatrix { scores, excluded })
    }

    pub fn from_rows(scores: Vec<Vec<Option<f64>>>) -> Self {
        SimilarityMatrix {
            scores,
            excluded: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.scores[i][j]
    }

    /// Indices whose embeddings were degenerate and are never donors.
    pub fn excluded(&self) -> &[usize] {
        &self.excluded
    }
}

/// Embeds every persona text and computes the pairwise S matrix.
pub fn similarity_matrix(
    set: &PersonaSet,
    provider: &dyn EmbeddingProvider,
    weights: &SimilarityWeights,
) -> Result<SimilarityMatrix, PipelineError> {
    if set.len() < 2 {
        return Err(PipelineError::Validation(format!(
            "similarity matrix needs at least 2 personas, got {}",
            set.len()
        )));
    }
    let texts: Vec<String> = set.personas().iter().map(|p| p.text()).collect();
    let embeddings = provider.embed_batch(&texts)?;
    SimilarityMatrix::from_embeddings(&embeddings, weights)
}

/// Argmax over `j != m` of row `m`; lowest index wins ties.
pub fn select_donor(matrix: &SimilarityMatrix, m: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for j in 0..matrix.len() {
        if j == m {
            continue;
        }
        if let Some(s) = matrix.get(m, j) {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
    }
    best.map(|(j, _)| j)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateOutcome {
    Pass,
    Fail,
    NoDonor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillRecord {
    pub target: String,
    pub donor: Option<String>,
    pub filled: Vec<DimensionKey>,
    pub similarity: Option<f64>,
    pub bm25: Option<f64>,
    pub gate: GateOutcome,
}

pub fn fill(
    set: &PersonaSet,
    provider: &dyn EmbeddingProvider,
    config: &FillConfig,
) -> Result<(PersonaSet, Vec<FillRecord>), PipelineError> {
    if set.stage() != Stage::IncompleteDebiased {
        return Err(PipelineError::Validation(format!(
            "fill expects a set at stage incomplete_debiased, got {}",
            set.stage()
        )));
    }
    let personas = set.personas();
    let matrix = if personas.len() >= 2 {
        Some(similarity_matrix(set, provider, &config.weights)?)
    } else {
        None
    };
    let texts: Vec<String> = personas.iter().map(|p| p.text()).collect();
    let index = Bm25Index::from_texts(&texts, &config.bm25);

    let mut out = Vec::with_capacity(personas.len());
    let mut records = Vec::new();
    for (m, target) in personas.iter().enumerate() {
        let missing = target.missing_dimensions();
        if missing.is_empty() {
            out.push(target.with_provenance(Stage::Debiased, "fill:complete"));
            continue;
        }
        let Some(n) = matrix.as_ref().and_then(|mx| select_donor(mx, m)) else {
            records.push(FillRecord {
                target: target.id().to_string(),
                donor: None,
                filled: Vec::new(),
                similarity: None,
                bm25: None,
                gate: GateOutcome::NoDonor,
            });
            out.push(target.with_provenance(Stage::Debiased, "fill:no-donor"));
            continue;
        };
        let donor = &personas[n];
        let query = index.document(m).expect("target indexed");
        let bm25 = bm25_normalized(&index, query, n, &config.bm25)?;
        let pass = bm25 >= config.theta;
        let mut next = target.clone();
        let mut filled = Vec::new();
        if pass {
            for key in &missing {
                if let Some(value) = donor.dimension(*key) {
                    next = next.with_dimension(*key, value.clone())?;
                    filled.push(*key);
                }
            }
        }
        let action = if pass {
            let keys: Vec<&str> = filled.iter().map(|k| k.as_str()).collect();
            format!("fill:donor={},filled=[{}]", donor.id(), keys.join(","))
        } else {
            format!("fill:donor={},gate=fail", donor.id())
        };
        records.push(FillRecord {
            target: target.id().to_string(),
            donor: Some(donor.id().to_string()),
            filled,
            similarity: matrix.as_ref().and_then(|mx| mx.get(m, n)),
            bm25: Some(bm25),
            gate: if pass {
                GateOutcome::Pass
            } else {
                GateOutcome::Fail
            },
        });
        out.push(next.with_provenance(Stage::Debiased, action));
    }
    Ok((set.advance(Stage::Debiased, out)?, records))
}
