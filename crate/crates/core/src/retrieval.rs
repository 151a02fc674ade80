//! Similarity search, the retrieval indicator, candidate selection, and the
//! R@k / top-k accuracy metrics.
//!
//! Similarity is the dot product against unit-norm gallery rows. Rankings are
//! by descending similarity with ties going to the smaller index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{dot, norm2, Tensor};

pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// Matrix of unit-norm rows, shape `(M, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    rows: Tensor,
}

impl EmbeddingIndex {
    pub fn new(rows: Tensor) -> Result<Self> {
        if rows.shape().len() != 2 {
            return invalid(format!("embedding index must be (M, d), got {:?}", rows.shape()));
        }
        for i in 0..rows.shape()[0] {
            let n = norm2(rows.row(i));
            if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return invalid(format!("row {i} has norm {n}, expected 1"));
            }
        }
        Ok(Self { rows })
    }

    /// Stacks unit-norm vectors into an index.
    pub fn from_rows(rows: &[Tensor]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return invalid("cannot build an empty embedding index");
        };
        let d = first.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return invalid("embedding rows differ in length");
            }
            data.extend_from_slice(r.data());
        }
        Self::new(Tensor::new(vec![rows.len(), d], data)?)
    }

    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.rows
    }

    pub fn similarities(&self, query: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|i| dot(self.row(i), query)).collect()
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.dim() {
            return invalid(format!("query has {} values, index rows have {}", query.len(), self.dim()));
        }
        Ok(())
    }
}

/// Whether `a` ranks strictly ahead of `b`.
fn ranks_ahead(scores: &[f64], a: usize, b: usize) -> bool {
    scores[a] > scores[b] || (scores[a] == scores[b] && a < b)
}

/// All indices ordered by (score desc, index asc).
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Indicator on precomputed scores: true iff some match is in the top `k`.
pub fn indicator_from_scores(scores: &[f64], matches: &[usize], k: usize) -> bool {
    let Some(best) = matches
        .iter()
        .copied()
        .reduce(|a, b| if ranks_ahead(scores, b, a) { b } else { a })
    else {
        return false;
    };
    let ahead = (0..scores.len()).filter(|&i| ranks_ahead(scores, i, best)).count();
    ahead < k
}

fn check_k_and_matches(len: usize, matches: &[usize], k: usize) -> Result<()> {
    if k == 0 || k > len {
        return invalid(format!("k must be in 1..={len}, got {k}"));
    }
    if matches.is_empty() {
        return invalid("match set must be nonempty");
    }
    if let Some(m) = matches.iter().find(|&&m| m >= len) {
        return invalid(format!("match index {m} out of range for {len} items"));
    }
    Ok(())
}

/// True iff at least one of `matches` is among the `k` gallery items most
/// similar to `query`.
pub fn indicator(query: &[f64], index: &EmbeddingIndex, matches: &[usize], k: usize) -> Result<bool> {
    index.check_query(query)?;
    check_k_and_matches(index.len(), matches, k)?;
    Ok(indicator_from_scores(&index.similarities(query), matches, k))
}

/// The `k` most similar non-matching items, most similar first.
pub fn select_nonmatching_topk(
    query: &[f64],
    index: &EmbeddingIndex,
    matches: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    index.check_query(query)?;
    let available = index.len() - matches.iter().filter(|&&m| m < index.len()).count();
    if k == 0 || k > available {
        return invalid(format!("need {k} non-matching candidates, only {available} available"));
    }
    Ok(nonmatching_topk_from_scores(&index.similarities(query), matches, k))
}

pub(crate) fn nonmatching_topk_from_scores(scores: &[f64], matches: &[usize], k: usize) -> Vec<usize> {
    ranking(scores)
        .into_iter()
        .filter(|i| !matches.contains(i))
        .take(k)
        .collect()
}

/// Mean over queries of the indicator. Queries are scored in parallel; the
/// result does not depend on evaluation order.
pub fn recall_at_k(
    queries: &EmbeddingIndex,
    gallery: &EmbeddingIndex,
    matches: &[Vec<usize>],
    k: usize,
) -> Result<f64> {
    if queries.dim() != gallery.dim() {
        return invalid("query and gallery dimensions differ");
    }
    if matches.len() != queries.len() {
        return invalid(format!(
            "{} match sets for {} queries",
            matches.len(),
            queries.len()
        ));
    }
    let hits = (0..queries.len())
        .into_par_iter()
        .map(|q| indicator(queries.row(q), gallery, &matches[q], k).map(usize::from))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / queries.len() as f64)
}

/// Fraction of images whose true class prototype ranks in the top `k`.
pub fn topk_class_accuracy(
    image_embeddings: &EmbeddingIndex,
    class_prototypes: &EmbeddingIndex,
    labels: &[usize],
    k: usize,
) -> Result<f64> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_prototypes.len()) {
        return invalid(format!(
            "label {bad} out of range for {} classes",
            class_prototypes.len()
        ));
    }
    let matches: Vec<Vec<usize>> = labels.iter().map(|&l| vec![l]).collect();
    recall_at_k(image_embeddings, class_prototypes, &matches, k)
}

/// Bidirectional match annotations: every text matches exactly one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchAnnotation {
    pub image_to_texts: Vec<Vec<usize>>,
    pub text_to_image: Vec<usize>,
}

impl MatchAnnotation {
    pub fn from_text_to_image(n_images: usize, text_to_image: Vec<usize>) -> Result<Self> {
        let mut image_to_texts = vec![Vec::new(); n_images];
        for (t, &v) in text_to_image.iter().enumerate() {
            if v >= n_images {
                return Err(Error::CorruptDataset(format!("text {t} maps to missing image {v}")));
            }
            image_to_texts[v].push(t);
        }
        let ann = Self { image_to_texts, text_to_image };
        ann.validate()?;
        Ok(ann)
    }

    /// Checks `t ∈ image_to_texts[v] ⇔ text_to_image[t] = v` and that every
    /// image has at least one text.
    pub fn validate(&self) -> Result<()> {
        let corrupt = |m: String| Err(Error::CorruptDataset(m));
        let mut seen = vec![false; self.text_to_image.len()];
        for (v, texts) in self.image_to_texts.iter().enumerate() {
            if texts.is_empty() {
                return corrupt(format!("image {v} has no matching text"));
            }
            for &t in texts {
                if t >= self.text_to_image.len() {
                    return corrupt(format!("image {v} lists missing text {t}"));
                }
                if seen[t] {
                    return corrupt(format!("text {t} is listed under more than one image"));
                }
                seen[t] = true;
                if self.text_to_image[t] != v {
                    return corrupt(format!(
                        "text {t} listed under image {v} but maps to image {}",
                        self.text_to_image[t]
                    ));
                }
            }
        }
        if let Some(t) = seen.iter().position(|s| !s) {
            return corrupt(format!("text {t} is not listed under its image"));
        }
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        self.image_to_texts.len()
    }

    pub fn n_texts(&self) -> usize {
        self.text_to_image.len()
    }

    /// Per-text match sets for text-to-image retrieval.
    pub fn text_matches(&self) -> Vec<Vec<usize>> {
        self.text_to_image.iter().map(|&v| vec![v]).collect()
    }
}

/// One metric line of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub n_queries: usize,
    pub seed: u64,
}
