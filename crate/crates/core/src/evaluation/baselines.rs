//! Lexical baselines: TF-IDF cosine and Okapi BM25.

use std::collections::{BTreeMap, BTreeSet};

use crate::encoder::tokenize;
use crate::error::{Error, Result};
use crate::retrieval::RankedResult;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

struct Doc {
    id: String,
    tf: BTreeMap<String, usize>,
    len: usize,
}

struct Corpus {
    docs: Vec<Doc>,
    df: BTreeMap<String, usize>,
    positions: BTreeMap<String, usize>,
}

fn term_counts(text: &str) -> (BTreeMap<String, usize>, usize) {
    let tokens = tokenize(text);
    let len = tokens.len();
    let mut tf = BTreeMap::new();
    for t in tokens {
        *tf.entry(t).or_insert(0) += 1;
    }
    (tf, len)
}

impl Corpus {
    fn new(docs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut out = Corpus {
            docs: Vec::new(),
            df: BTreeMap::new(),
            positions: BTreeMap::new(),
        };
        for (id, text) in docs {
            if out.positions.insert(id.clone(), out.docs.len()).is_some() {
                return Err(Error::DuplicateTrial(id));
            }
            let (tf, len) = term_counts(&text);
            for term in tf.keys() {
                *out.df.entry(term.clone()).or_insert(0) += 1;
            }
            out.docs.push(Doc { id, tf, len });
        }
        if out.docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(out)
    }

    fn n(&self) -> f64 {
        self.docs.len() as f64
    }

    fn select(&self, candidates: Option<&[String]>) -> Result<Vec<&Doc>> {
        match candidates {
            None => Ok(self.docs.iter().collect()),
            Some(ids) => ids
                .iter()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .map(|id| {
                    self.positions
                        .get(id)
                        .map(|&i| &self.docs[i])
                        .ok_or_else(|| Error::UnknownCandidate(id.clone()))
                })
                .collect(),
        }
    }
}

/// Raw term frequency times smoothed idf `ln((1+N)/(1+df)) + 1`, ranked by
/// cosine. Query terms absent from the corpus are dropped.
pub struct TfIdf {
    corpus: Corpus,
    idf: BTreeMap<String, f64>,
    doc_norms: Vec<f64>,
}

impl TfIdf {
    pub fn new(docs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let corpus = Corpus::new(docs)?;
        let n = corpus.n();
        let idf: BTreeMap<String, f64> = corpus
            .df
            .iter()
            .map(|(t, &df)| (t.clone(), ((1.0 + n) / (1.0 + df as f64)).ln() + 1.0))
            .collect();
        let doc_norms = corpus
            .docs
            .iter()
            .map(|d| {
                d.tf.iter()
                    .map(|(t, &c)| (c as f64 * idf[t]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(TfIdf {
            corpus,
            idf,
            doc_norms,
        })
    }

    pub fn scores(&self, query: &str, candidates: Option<&[String]>) -> Result<Vec<(String, f64)>> {
        let (qtf, _) = term_counts(query);
        let qv: BTreeMap<&str, f64> = qtf
            .iter()
            .filter_map(|(t, &c)| self.idf.get(t).map(|w| (t.as_str(), c as f64 * w)))
            .collect();
        let qnorm = qv.values().map(|w| w * w).sum::<f64>().sqrt();
        let docs = self.corpus.select(candidates)?;
        Ok(docs
            .into_iter()
            .map(|d| {
                let i = self.corpus.positions[&d.id];
                let dot: f64 = qv
                    .iter()
                    .filter_map(|(t, &w)| d.tf.get(*t).map(|&c| w * c as f64 * self.idf[*t]))
                    .sum();
                let denom = qnorm * self.doc_norms[i];
                let score = if denom > 0.0 { dot / denom } else { 0.0 };
                (d.id.clone(), score)
            })
            .collect())
    }

    pub fn rank(
        &self,
        query_id: &str,
        query: &str,
        candidates: Option<&[String]>,
        k: usize,
    ) -> Result<RankedResult> {
        Ok(RankedResult::from_scores(
            query_id,
            self.scores(query, candidates)?,
            k,
        ))
    }
}

/// Okapi BM25 over distinct query terms with
/// `idf = ln(1 + (N − df + 0.5)/(df + 0.5))`; unseen terms score zero.
pub struct Bm25 {
    corpus: Corpus,
    avgdl: f64,
    k1: f64,
    b: f64,
}

impl Bm25 {
    pub fn new(docs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        Self::with_params(docs, BM25_K1, BM25_B)
    }

    pub fn with_params(
        docs: impl IntoIterator<Item = (String, String)>,
        k1: f64,
        b: f64,
    ) -> Result<Self> {
        let corpus = Corpus::new(docs)?;
        let avgdl = corpus.docs.iter().map(|d| d.len as f64).sum::<f64>() / corpus.n();
        Ok(Bm25 {
            corpus,
            avgdl,
            k1,
            b,
        })
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.corpus.df.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (self.corpus.n() - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn scores(&self, query: &str, candidates: Option<&[String]>) -> Result<Vec<(String, f64)>> {
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let weighted: Vec<(&String, f64)> = terms.iter().map(|t| (t, self.idf(t))).collect();
        let docs = self.corpus.select(candidates)?;
        Ok(docs
            .into_iter()
            .map(|d| {
                let norm = self.k1 * (1.0 - self.b + self.b * d.len as f64 / self.avgdl);
                let score = weighted
                    .iter()
                    .filter_map(|(t, idf)| {
                        d.tf.get(*t).map(|&c| {
                            let tf = c as f64;
                            idf * tf * (self.k1 + 1.0) / (tf + norm)
                        })
                    })
                    .sum();
                (d.id.clone(), score)
            })
            .collect())
    }

    pub fn rank(
        &self,
        query_id: &str,
        query: &str,
        candidates: Option<&[String]>,
        k: usize,
    ) -> Result<RankedResult> {
        Ok(RankedResult::from_scores(
            query_id,
            self.scores(query, candidates)?,
            k,
        ))
    }
}
