//! Okapi BM25 over API documents, and a wrapper that forces the target API's
//! document into (or out of) the results according to a seeded inclusion plan.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api_index::{retrieval_key, ApiIndex, ApiSpec, Provider};

#[derive(Debug, Error, PartialEq)]
pub enum RetrieverError {
    #[error("invalid retriever config: {0}")]
    Config(String),
    #[error("asked for {k} documents but only {available} are eligible")]
    NotEnoughDocuments { k: usize, available: usize },
    #[error("target API `{0}` has no document in the index")]
    TargetMissing(String),
    #[error("task `{0}` has no entry in the inclusion plan")]
    NotPlanned(String),
    #[error("duplicate task id `{0}` in inclusion plan")]
    DuplicateTask(String),
}

/// Lowercases and splits on anything that is not a letter or digit
/// (underscores included). Empty pieces are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Collection statistics BM25 needs: document count, average length and
/// per-term document frequency.
#[derive(Debug, Clone, Default)]
pub struct CorpusStats {
    pub doc_count: usize,
    pub avg_doc_len: f64,
    pub doc_freq: HashMap<String, usize>,
}

impl CorpusStats {
    pub fn from_docs<'a, I>(docs: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut doc_count = 0usize;
        let mut total_len = 0usize;
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            doc_count += 1;
            total_len += doc.len();
            let unique: BTreeSet<&String> = doc.iter().collect();
            for t in unique {
                *doc_freq.entry(t.clone()).or_insert(0) += 1;
            }
        }
        let avg_doc_len = if doc_count == 0 {
            0.0
        } else {
            total_len as f64 / doc_count as f64
        };
        Self {
            doc_count,
            avg_doc_len,
            doc_freq,
        }
    }

    /// ln((N - df + 0.5) / (df + 0.5) + 1); never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

/// Okapi BM25. Every occurrence of a term in the query contributes.
pub fn bm25_score(
    query_tokens: &[String],
    doc_tokens: &[String],
    stats: &CorpusStats,
    params: Bm25Params,
) -> f64 {
    if doc_tokens.is_empty() || query_tokens.is_empty() {
        return 0.0;
    }
    let doc_len = doc_tokens.len() as f64;
    let norm = if stats.avg_doc_len > 0.0 {
        1.0 - params.b + params.b * doc_len / stats.avg_doc_len
    } else {
        1.0
    };
    query_tokens
        .iter()
        .map(|q| {
            let tf = doc_tokens.iter().filter(|t| *t == q).count() as f64;
            if tf == 0.0 {
                0.0
            } else {
                stats.idf(q) * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
            }
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub k: usize,
    pub precision_x: f64,
    pub seed: u64,
    #[serde(default = "default_k1")]
    pub bm25_k1: f64,
    #[serde(default = "default_b")]
    pub bm25_b: f64,
    #[serde(default)]
    pub pin_target_first: bool,
}

fn default_k1() -> f64 {
    Bm25Params::default().k1
}

fn default_b() -> f64 {
    Bm25Params::default().b
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            k: 1,
            precision_x: 0.5,
            seed: 0,
            bm25_k1: default_k1(),
            bm25_b: default_b(),
            pin_target_first: false,
        }
    }
}

impl RetrieverConfig {
    pub fn validate(&self) -> Result<(), RetrieverError> {
        if self.k == 0 {
            return Err(RetrieverError::Config("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.precision_x) {
            return Err(RetrieverError::Config(format!(
                "precision must lie in [0, 1], got {}",
                self.precision_x
            )));
        }
        if !(self.bm25_k1.is_finite() && self.bm25_k1 >= 0.0) {
            return Err(RetrieverError::Config("bm25 k1 must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.bm25_b) {
            return Err(RetrieverError::Config("bm25 b must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn bm25(&self) -> Bm25Params {
        Bm25Params {
            k1: self.bm25_k1,
            b: self.bm25_b,
        }
    }
}

/// Which tasks get the target document forced into their results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionPlan {
    pub precision_x: f64,
    pub seed: u64,
    pub include: BTreeMap<String, bool>,
}

impl InclusionPlan {
    pub fn bit(&self, task_id: &str) -> Option<bool> {
        self.include.get(task_id).copied()
    }

    pub fn included_count(&self) -> usize {
        self.include.values().filter(|b| **b).count()
    }

    pub fn len(&self) -> usize {
        self.include.len()
    }

    pub fn is_empty(&self) -> bool {
        self.include.is_empty()
    }
}

/// Number of tasks that include the target: round(x * n), halves away from zero.
pub fn inclusion_count(precision_x: f64, n: usize) -> usize {
    (precision_x * n as f64).round() as usize
}

/// Marks exactly round(x * N) tasks for inclusion, chosen by a seeded uniform
/// shuffle of the task ids.
pub fn plan_inclusions<S: AsRef<str>>(
    task_ids: &[S],
    precision_x: f64,
    seed: u64,
) -> Result<InclusionPlan, RetrieverError> {
    if !(0.0..=1.0).contains(&precision_x) {
        return Err(RetrieverError::Config(format!(
            "precision must lie in [0, 1], got {precision_x}"
        )));
    }
    let mut include = BTreeMap::new();
    for id in task_ids {
        if include.insert(id.as_ref().to_string(), false).is_some() {
            return Err(RetrieverError::DuplicateTask(id.as_ref().to_string()));
        }
    }
    let mut order: Vec<usize> = (0..task_ids.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    for &i in order.iter().take(inclusion_count(precision_x, task_ids.len())) {
        include.insert(task_ids[i].as_ref().to_string(), true);
    }
    Ok(InclusionPlan {
        precision_x,
        seed,
        include,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Retrieved<'a> {
    pub spec: &'a ApiSpec,
    pub score: f64,
}

#[derive(Debug, Clone)]
struct Doc {
    spec: ApiSpec,
    tokens: Vec<String>,
}

/// BM25 retriever over the retrieval keys of every spec in an index.
#[derive(Debug, Clone)]
pub struct Bm25Retriever {
    docs: Vec<Doc>,
    stats: CorpusStats,
    params: Bm25Params,
}

fn rank_order(a: &Retrieved<'_>, b: &Retrieved<'_>) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.spec.identity().cmp(&b.spec.identity()))
}

impl Bm25Retriever {
    pub fn new(index: &ApiIndex, params: Bm25Params) -> Self {
        let docs: Vec<Doc> = index
            .specs()
            .into_iter()
            .map(|s| Doc {
                tokens: retrieval_key(s),
                spec: s.clone(),
            })
            .collect();
        let stats = CorpusStats::from_docs(docs.iter().map(|d| d.tokens.as_slice()));
        Self {
            docs,
            stats,
            params,
        }
    }

    pub fn doc_count(&self) -> usize {
        self.docs.len()
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    /// Every document scored and ranked: descending score, then ascending
    /// (provider, service, name).
    pub fn rank_all(&self, query_tokens: &[String]) -> Vec<Retrieved<'_>> {
        let mut ranked: Vec<Retrieved<'_>> = self
            .docs
            .iter()
            .map(|d| Retrieved {
                spec: &d.spec,
                score: bm25_score(query_tokens, &d.tokens, &self.stats, self.params),
            })
            .collect();
        ranked.sort_by(rank_order);
        ranked
    }

    pub fn retrieve_topk(
        &self,
        query_tokens: &[String],
        k: usize,
    ) -> Result<Vec<Retrieved<'_>>, RetrieverError> {
        if k > self.docs.len() {
            return Err(RetrieverError::NotEnoughDocuments {
                k,
                available: self.docs.len(),
            });
        }
        let mut ranked = self.rank_all(query_tokens);
        ranked.truncate(k);
        Ok(ranked)
    }

    /// Retrieval with controlled precision. When `include` is set, the first
    /// target's document is forced in alongside the best k-1 non-target
    /// documents; otherwise every document of every target is excluded.
    ///
    /// When the first target name exists in several services, the document
    /// from `provider` with the smallest service name is used.
    pub fn precision_retrieve(
        &self,
        targets: &[String],
        provider: Provider,
        query_tokens: &[String],
        config: &RetrieverConfig,
        include: bool,
    ) -> Result<Vec<Retrieved<'_>>, RetrieverError> {
        config.validate()?;
        let k = config.k;
        let target_names: BTreeSet<&str> = targets.iter().map(String::as_str).collect();
        let ranked = self.rank_all(query_tokens);
        let (target_docs, others): (Vec<_>, Vec<_>) = ranked
            .into_iter()
            .partition(|r| target_names.contains(r.spec.name.as_str()));

        if !include {
            if others.len() < k {
                return Err(RetrieverError::NotEnoughDocuments {
                    k,
                    available: others.len(),
                });
            }
            return Ok(others.into_iter().take(k).collect());
        }

        let first = targets
            .first()
            .ok_or_else(|| RetrieverError::Config("task has no target APIs".into()))?;
        let forced = target_docs
            .iter()
            .filter(|r| r.spec.name == *first)
            .min_by(|a, b| {
                (a.spec.provider != provider, a.spec.identity())
                    .cmp(&(b.spec.provider != provider, b.spec.identity()))
            })
            .copied()
            .ok_or_else(|| RetrieverError::TargetMissing(first.clone()))?;
        if others.len() < k - 1 {
            return Err(RetrieverError::NotEnoughDocuments {
                k,
                available: others.len() + 1,
            });
        }
        let mut out: Vec<Retrieved<'_>> = others.into_iter().take(k - 1).collect();
        if config.pin_target_first {
            out.insert(0, forced);
        } else {
            out.push(forced);
            out.sort_by(rank_order);
        }
        Ok(out)
    }
}
