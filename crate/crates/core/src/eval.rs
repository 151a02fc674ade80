//! Clean versus adversarial retrieval metrics, and the JSON report written by
//! the `uap` binary.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackTrace, ConfigEcho, EpochMetrics, Perturbation};
use crate::datagen::Dataset;
use crate::encoder::Encoder;
use crate::error::{invalid, Result};
use crate::retrieval::{recall_at_k, topk_class_accuracy, EmbeddingIndex};

pub const REPORT_SCHEMA: &str = "uap-report/1";

/// Text retrieval recall (image queries).
pub const TR_RECALL: &str = "tr_recall";
/// Image retrieval recall (text queries).
pub const IR_RECALL: &str = "ir_recall";
/// Prototype classification accuracy.
pub const TOPK_ACCURACY: &str = "topk_accuracy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub k: usize,
    pub clean: f64,
    pub adversarial: f64,
    pub n_queries: usize,
}

/// Embeddings of every dataset image after applying `perturbation`.
pub fn adversarial_embeddings(
    encoder: &Encoder,
    dataset: &Dataset,
    perturbation: &Perturbation,
) -> Result<EmbeddingIndex> {
    let rows = dataset
        .images
        .par_iter()
        .map(|v| encoder.encode_image(&perturbation.apply(v)?))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingIndex::from_rows(&rows)
}

/// TR and IR recall at each of `recall_ks`, and prototype accuracy at each of
/// `class_ks`, before and after the perturbation. Values of `k` larger than
/// the gallery are clamped to it.
pub fn evaluate(
    encoder: &Encoder,
    dataset: &Dataset,
    perturbation: &Perturbation,
    recall_ks: &[usize],
    class_ks: &[usize],
) -> Result<Vec<MetricComparison>> {
    if recall_ks.iter().chain(class_ks).any(|&k| k == 0) {
        return invalid("k must be positive");
    }
    if perturbation.delta.shape() != dataset.params.image_shape {
        return invalid(format!(
            "perturbation shape {:?} does not match images {:?}",
            perturbation.delta.shape(),
            dataset.params.image_shape
        ));
    }
    let clean = dataset.embed_images(encoder)?;
    let adv = adversarial_embeddings(encoder, dataset, perturbation)?;
    let ann = &dataset.annotations;
    let ir_matches: Vec<Vec<usize>> = ann.text_to_image.iter().map(|&i| vec![i]).collect();

    let mut out = Vec::new();
    for &k in recall_ks {
        let k_tr = k.min(dataset.n_texts());
        out.push(MetricComparison {
            metric: TR_RECALL.into(),
            k: k_tr,
            clean: recall_at_k(&clean, &dataset.texts, &ann.image_to_texts, k_tr)?,
            adversarial: recall_at_k(&adv, &dataset.texts, &ann.image_to_texts, k_tr)?,
            n_queries: dataset.n_images(),
        });
    }
    for &k in recall_ks {
        let k_ir = k.min(dataset.n_images());
        out.push(MetricComparison {
            metric: IR_RECALL.into(),
            k: k_ir,
            clean: recall_at_k(&dataset.texts, &clean, &ir_matches, k_ir)?,
            adversarial: recall_at_k(&dataset.texts, &adv, &ir_matches, k_ir)?,
            n_queries: dataset.n_texts(),
        });
    }
    for &k in class_ks {
        let k = k.min(dataset.prototypes.len());
        out.push(MetricComparison {
            metric: TOPK_ACCURACY.into(),
            k,
            clean: topk_class_accuracy(&clean, &dataset.prototypes, &dataset.labels, k)?,
            adversarial: topk_class_accuracy(&adv, &dataset.prototypes, &dataset.labels, k)?,
            n_queries: dataset.n_images(),
        });
    }
    Ok(out)
}

/// The entry for `metric` at `k`, if it was computed.
pub fn find<'a>(metrics: &'a [MetricComparison], metric: &str, k: usize) -> Option<&'a MetricComparison> {
    metrics.iter().find(|m| m.metric == metric && m.k == k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub inner_loops: usize,
    pub converged_fraction: f64,
    pub degenerate_loops: usize,
    pub commits: usize,
    pub final_l2_norm: f64,
    pub final_linf_norm: f64,
    pub epochs: Vec<EpochMetrics>,
}

impl TraceSummary {
    pub fn from_trace(trace: &AttackTrace) -> Self {
        let last = trace.commits.last();
        Self {
            inner_loops: trace.samples.len(),
            converged_fraction: trace.converged_fraction(),
            degenerate_loops: trace.samples.iter().filter(|s| s.degenerate).count(),
            commits: trace.commits.len(),
            final_l2_norm: last.map_or(0.0, |c| c.l2_norm),
            final_linf_norm: last.map_or(0.0, |c| c.linf_norm),
            epochs: trace.epochs.clone(),
        }
    }
}

/// Everything a CLI run reports. Two runs with the same inputs serialize to
/// identical bytes except for `wall_clock_seconds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub command: String,
    pub library_version: String,
    pub encoder_hash: String,
    pub dataset_hash: String,
    pub perturbation_hash: Option<String>,
    pub config: Option<ConfigEcho>,
    /// The perturbation was built against a different dataset or encoder.
    pub cross_dataset: bool,
    pub metrics: Vec<MetricComparison>,
    pub trace: Option<TraceSummary>,
    pub wall_clock_seconds: f64,
}

impl Report {
    pub fn new(command: &str, encoder_hash: String, dataset_hash: String) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            command: command.into(),
            library_version: env!("CARGO_PKG_VERSION").into(),
            encoder_hash,
            dataset_hash,
            perturbation_hash: None,
            config: None,
            cross_dataset: false,
            metrics: Vec::new(),
            trace: None,
            wall_clock_seconds: 0.0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
