//! Text and vector similarity: tokenization, BM25 with self-score
//! normalization, cosine, Pearson, and the weighted combination of the two.

use std::collections::HashMap;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::error::SimilarityError;

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "from", "has", "have", "he",
    "her", "his", "i", "in", "is", "it", "its", "of", "on", "or", "she", "that", "the", "their",
    "them", "they", "this", "to", "was", "were", "with",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    /// Drop a small set of English function words before scoring.
    pub stopwords: bool,
    /// Snowball English stemming before scoring.
    pub stemming: bool,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: 1.2,
            b: 0.75,
            stopwords: false,
            stemming: false,
        }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self, String> {
        let p = Bm25Params {
            k1,
            b,
            ..Default::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(format!("k1 must be > 0, got {}", self.k1));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(format!("b must be in [0,1], got {}", self.b));
        }
        Ok(())
    }

    /// Tokenizes `text` and applies the optional stopword and stemming passes.
    pub fn analyze(&self, text: &str) -> Vec<String> {
        let mut tokens = tokenize(text);
        if self.stopwords {
            tokens.retain(|t| !STOPWORDS.contains(&t.as_str()));
        }
        if self.stemming {
            let stemmer = Stemmer::create(Algorithm::English);
            tokens = tokens
                .into_iter()
                .map(|t| stemmer.stem(&t).into_owned())
                .collect();
        }
        tokens
    }
}

/// Read-only BM25 corpus statistics.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    documents: Vec<Vec<String>>,
    term_freqs: Vec<HashMap<String, usize>>,
    doc_freqs: HashMap<String, usize>,
    avg_len: f64,
}

impl Bm25Index {
    pub fn new(documents: Vec<Vec<String>>) -> Self {
        let mut doc_freqs: HashMap<String, usize> = HashMap::new();
        let term_freqs: Vec<HashMap<String, usize>> = documents
            .iter()
            .map(|doc| {
                let mut tf = HashMap::new();
                for t in doc {
                    *tf.entry(t.clone()).or_insert(0) += 1;
                }
                for t in tf.keys() {
                    *doc_freqs.entry(t.clone()).or_insert(0) += 1;
                }
                tf
            })
            .collect();
        let total: usize = documents.iter().map(Vec::len).sum();
        let avg_len = if documents.is_empty() {
            0.0
        } else {
            total as f64 / documents.len() as f64
        };
        Bm25Index {
            documents,
            term_freqs,
            doc_freqs,
            avg_len,
        }
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S], params: &Bm25Params) -> Self {
        Bm25Index::new(texts.iter().map(|t| params.analyze(t.as_ref())).collect())
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn document(&self, i: usize) -> Option<&[String]> {
        self.documents.get(i).map(Vec::as_slice)
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freqs.get(term).copied().unwrap_or(0)
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    /// ln(1 + (N - df + 0.5) / (df + 0.5)), floored at 0.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.documents.len() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln().max(0.0)
    }

    fn check(&self, doc_index: usize) -> Result<(), SimilarityError> {
        if doc_index >= self.documents.len() {
            return Err(SimilarityError::DocOutOfRange {
                index: doc_index,
                len: self.documents.len(),
            });
        }
        Ok(())
    }
}

/// BM25 score of `query` against document `doc_index`. Each query token
/// occurrence contributes; tokens absent from the document contribute 0.
pub fn bm25_score<S: AsRef<str>>(
    index: &Bm25Index,
    query: &[S],
    doc_index: usize,
    params: &Bm25Params,
) -> Result<f64, SimilarityError> {
    index.check(doc_index)?;
    let tf = &index.term_freqs[doc_index];
    let doc_len = index.documents[doc_index].len() as f64;
    let norm = params.k1 * (1.0 - params.b + params.b * doc_len / index.avg_len);
    let mut score = 0.0;
    for term in query {
        let term = term.as_ref();
        let f = match tf.get(term) {
            Some(&f) => f as f64,
            None => continue,
        };
        score += index.idf(term) * f * (params.k1 + 1.0) / (f + norm);
    }
    Ok(score)
}

/// Score of document `doc_index` against its own tokens.
pub fn bm25_self_score(
    index: &Bm25Index,
    doc_index: usize,
    params: &Bm25Params,
) -> Result<f64, SimilarityError> {
    index.check(doc_index)?;
    bm25_score(index, &index.documents[doc_index], doc_index, params)
}

/// `bm25_score / self score`, clamped to [0,1]; 0 when the self score is 0.
pub fn bm25_normalized<S: AsRef<str>>(
    index: &Bm25Index,
    query: &[S],
    doc_index: usize,
    params: &Bm25Params,
) -> Result<f64, SimilarityError> {
    let own = bm25_self_score(index, doc_index, params)?;
    if own <= 0.0 {
        return Ok(0.0);
    }
    let raw = bm25_score(index, query, doc_index, params)?;
    Ok((raw / own).clamp(0.0, 1.0))
}

fn check_lengths(u: &[f64], v: &[f64]) -> Result<(), SimilarityError> {
    if u.len() != v.len() {
        return Err(SimilarityError::LengthMismatch(u.len(), v.len()));
    }
    Ok(())
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, SimilarityError> {
    check_lengths(u, v)?;
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(SimilarityError::DegenerateInput);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Pearson correlation over vector elements. Returns 0 when either vector
/// has zero variance.
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64, SimilarityError> {
    check_lengths(u, v)?;
    if u.len() < 2 {
        return Err(SimilarityError::TooShort(u.len()));
    }
    let n = u.len() as f64;
    let mu = u.iter().sum::<f64>() / n;
    let mv = v.iter().sum::<f64>() / n;
    let (mut cov, mut su, mut sv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (da, db) = (a - mu, b - mv);
        cov += da * db;
        su += da * da;
        sv += db * db;
    }
    if su == 0.0 || sv == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (su.sqrt() * sv.sqrt())).clamp(-1.0, 1.0))
}

/// Weights of the cosine and Pearson terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        SimilarityWeights {
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl SimilarityWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, String> {
        let w = SimilarityWeights { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err("alpha + beta must be > 0".into());
        }
        Ok(())
    }
}

/// `alpha * cosine(u, v) + beta * pearson(u, v)`.
pub fn combined_similarity(
    u: &[f64],
    v: &[f64],
    weights: &SimilarityWeights,
) -> Result<f64, SimilarityError> {
    let cs = cosine(u, v)?;
    let pc = pearson(u, v)?;
    Ok(weights.alpha * cs + weights.beta * pc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Morning runs!"), ["morning", "runs"]);
        assert_eq!(
            tokenize("Café-au-lait, 3 times"),
            ["café", "au", "lait", "3", "times"]
        );
    }

    #[test]
    fn analyzer_options() {
        let p = Bm25Params {
            stopwords: true,
            stemming: true,
            ..Default::default()
        };
        assert_eq!(p.analyze("She is running to the parks"), ["run", "park"]);
        assert_eq!(Bm25Params::default().analyze("The Runs"), ["the", "runs"]);
    }

    #[test]
    fn params_validation() {
        assert!(Bm25Params::new(0.0, 0.5).is_err());
        assert!(Bm25Params::new(1.2, 1.5).is_err());
        assert!(Bm25Params::new(1.2, 0.0).is_ok());
        assert!(SimilarityWeights::new(-0.1, 1.0).is_err());
        assert!(SimilarityWeights::new(0.0, 0.0).is_err());
    }

    #[test]
    fn disjoint_query_scores_zero() {
        let idx = Bm25Index::new(vec![toks(&["a", "b"]), toks(&["b", "c"])]);
        let p = Bm25Params::default();
        assert_eq!(bm25_score(&idx, &toks(&["z"]), 0, &p).unwrap(), 0.0);
        assert_eq!(bm25_normalized(&idx, &toks(&["z"]), 1, &p).unwrap(), 0.0);
    }

    #[test]
    fn single_doc_self_query_positive() {
        let idx = Bm25Index::new(vec![toks(&["x", "y"])]);
        let p = Bm25Params::default();
        assert!(bm25_score(&idx, &toks(&["x", "y"]), 0, &p).unwrap() > 0.0);
        assert_eq!(
            bm25_normalized(&idx, &toks(&["x", "y"]), 0, &p).unwrap(),
            1.0
        );
    }

    #[test]
    fn two_doc_hand_evaluation() {
        // N=2, df(a)=1: idf = ln(1 + 1.5/1.5) = ln 2. Doc 0 has len 2 = avg,
        // so tf part = 1 * 2.2 / (1 + 1.2) = 1.
        let idx = Bm25Index::new(vec![toks(&["a", "b"]), toks(&["b", "c"])]);
        let p = Bm25Params::default();
        let s = bm25_score(&idx, &toks(&["a"]), 0, &p).unwrap();
        assert_relative_eq!(s, std::f64::consts::LN_2, max_relative = 1e-12);
        assert_eq!(bm25_score(&idx, &toks(&["a"]), 1, &p).unwrap(), 0.0);
    }

    #[test]
    fn subset_query_ratio() {
        let idx = Bm25Index::new(vec![toks(&["a", "b", "c"]), toks(&["c", "d"])]);
        let p = Bm25Params::default();
        let n = bm25_normalized(&idx, &toks(&["a", "c"]), 0, &p).unwrap();
        let ratio = bm25_score(&idx, &toks(&["a", "c"]), 0, &p).unwrap()
            / bm25_score(&idx, &toks(&["a", "b", "c"]), 0, &p).unwrap();
        assert!(n > 0.0 && n < 1.0);
        assert_relative_eq!(n, ratio, max_relative = 1e-12);
    }

    #[test]
    fn out_of_range_doc() {
        let idx = Bm25Index::new(vec![toks(&["a"])]);
        assert_eq!(
            bm25_score(&idx, &toks(&["a"]), 3, &Bm25Params::default()),
            Err(SimilarityError::DocOutOfRange { index: 3, len: 1 })
        );
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let expected = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        assert_relative_eq!(
            cosine(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(),
            expected,
            max_relative = 1e-12
        );
        assert_relative_eq!(expected, 0.97463, epsilon = 1e-5);
        assert_eq!(
            cosine(&[0.0, 0.0], &[1.0, 1.0]),
            Err(SimilarityError::DegenerateInput)
        );
        assert_eq!(
            cosine(&[1.0], &[1.0, 1.0]),
            Err(SimilarityError::LengthMismatch(1, 2))
        );
    }

    #[test]
    fn pearson_examples() {
        assert_relative_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_relative_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // centered: (-1,0,1) and (-2/3,1/3,1/3): cov = 1, var sums 2 and 2/3.
        let expected = 1.0 / (2f64.sqrt() * (2.0f64 / 3.0).sqrt());
        assert_relative_eq!(
            pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0]).unwrap(),
            expected,
            max_relative = 1e-12
        );
        assert_relative_eq!(expected, 0.86603, epsilon = 1e-5);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(pearson(&[1.0], &[1.0]), Err(SimilarityError::TooShort(1)));
    }

    #[test]
    fn combined_examples() {
        let u = [1.0, 2.0, 3.0];
        let w = SimilarityWeights::default();
        assert_relative_eq!(combined_similarity(&u, &u, &w).unwrap(), 1.0);
        let v = [1.0, 2.0, 2.0];
        let only_cos = SimilarityWeights::new(1.0, 0.0).unwrap();
        assert_eq!(
            combined_similarity(&u, &v, &only_cos).unwrap(),
            cosine(&u, &v).unwrap()
        );
        let cs = 11.0 / (14f64.sqrt() * 9f64.sqrt());
        let pc = 1.0 / (2f64.sqrt() * (2.0f64 / 3.0).sqrt());
        assert_relative_eq!(
            combined_similarity(&u, &v, &w).unwrap(),
            0.5 * cs + 0.5 * pc,
            max_relative = 1e-12
        );
    }

    fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..24).prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn symmetric((u, v) in vec_pair()) {
            let w = SimilarityWeights::default();
            let a = combined_similarity(&u, &v, &w);
            let b = combined_similarity(&v, &u, &w);
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_scale_invariant((u, v) in vec_pair(), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = u.iter().map(|x| x * c).collect();
            if let (Ok(a), Ok(b)) = (cosine(&scaled, &v), cosine(&u, &v)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn pearson_affine_invariant((u, v) in vec_pair(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let t: Vec<f64> = u.iter().map(|x| a * x + b).collect();
            let lhs = pearson(&t, &v).unwrap();
            let rhs = pearson(&u, &v).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn bm25_bounds(
            docs in prop::collection::vec(prop::collection::vec(0u8..6, 1..8), 1..6),
            query in prop::collection::vec(0u8..8, 0..10),
        ) {
            let docs: Vec<Vec<String>> = docs.iter()
                .map(|d| d.iter().map(|t| format!("t{t}")).collect()).collect();
            let query: Vec<String> = query.iter().map(|t| format!("t{t}")).collect();
            let idx = Bm25Index::new(docs);
            let p = Bm25Params::default();
            for i in 0..idx.len() {
                prop_assert!(bm25_score(&idx, &query, i, &p).unwrap() >= 0.0);
                let n = bm25_normalized(&idx, &query, i, &p).unwrap();
                prop_assert!((0.0..=1.0).contains(&n));
            }
        }
    }
}
