//! Evaluation: per-attribute accuracy and mean accuracy (mA) for attribute
//! recognition; CMC Rank-1 and mAP for re-identification.
//!
//! Feature matching uses squared Euclidean distance on L2-normalized vectors
//! (equivalently `2 - 2 cos`). Distance ties break by gallery index so all
//! rankings are deterministic.

use thiserror::Error;

use crate::codec::{AttributeRecord, MappingTable};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("misaligned lists: {lhs} predictions vs {rhs} truths")]
    Misaligned { lhs: usize, rhs: usize },
    #[error("feature length mismatch: {lhs} vs {rhs}")]
    DimensionMismatch { lhs: usize, rhs: usize },
    #[error("empty gallery")]
    EmptyGallery,
    #[error("metrics: {0}")]
    Contract(String),
}

// ── Attribute accuracy ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AttributeEvalReport {
    /// (group name, accuracy in [0,1]) in table group order.
    pub per_group: Vec<(String, f64)>,
    /// Arithmetic mean of the per-group accuracies.
    pub mean_accuracy: f64,
    /// (group name, count of samples whose prediction lacked the group).
    pub missing_counts: Vec<(String, usize)>,
}

impl AttributeEvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,accuracy\n");
        for (g, a) in &self.per_group {
            out.push_str(&format!("{g},{a:.6}\n"));
        }
        out.push_str(&format!("mA,{:.6}\n", self.mean_accuracy));
        out
    }

    pub fn to_table_text(&self) -> String {
        let width = self
            .per_group
            .iter()
            .map(|(g, _)| g.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!("{:width$}  accuracy  missing\n", "group");
        for ((g, a), (_, miss)) in self.per_group.iter().zip(&self.missing_counts) {
            out.push_str(&format!("{g:width$}  {a:8.4}  {miss:7}\n"));
        }
        out.push_str(&format!("{:width$}  {:8.4}\n", "mA", self.mean_accuracy));
        out
    }
}

/// Per group: the fraction of samples whose predicted value equals the true
/// value. A prediction missing the group counts as wrong; a truth missing
/// the group drops the sample from that group's total.
pub fn attribute_accuracy(
    predictions: &[AttributeRecord],
    truths: &[AttributeRecord],
    table: &MappingTable,
) -> Result<AttributeEvalReport, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::Misaligned {
            lhs: predictions.len(),
            rhs: truths.len(),
        });
    }
    let mut per_group = Vec::new();
    let mut missing_counts = Vec::new();
    for group in table.group_names() {
        let mut total = 0usize;
        let mut correct = 0usize;
        let mut missing = 0usize;
        for (pred, truth) in predictions.iter().zip(truths) {
            let Some(t) = truth.get(group) else { continue };
            total += 1;
            match pred.get(group) {
                Some(p) if p == t => correct += 1,
                Some(_) => {}
                None => missing += 1,
            }
        }
        let acc = if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        };
        per_group.push((group.to_string(), acc));
        missing_counts.push((group.to_string(), missing));
    }
    let mean_accuracy =
        per_group.iter().map(|(_, a)| a).sum::<f64>() / per_group.len().max(1) as f64;
    Ok(AttributeEvalReport {
        per_group,
        mean_accuracy,
        missing_counts,
    })
}

// ── Re-identification ───────────────────────────────────────────────────

pub fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Squared Euclidean distance between equal-length L2-normalized vectors.
pub fn pairwise_distance(q: &[f64], g: &[f64]) -> Result<f64, MetricsError> {
    if q.len() != g.len() {
        return Err(MetricsError::DimensionMismatch {
            lhs: q.len(),
            rhs: g.len(),
        });
    }
    Ok(q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemMeta {
    pub pid: u32,
    pub camera: u32,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Protocol {
    /// Drop gallery entries sharing both identity and camera with the query
    /// (also removes the query's own image when the sets coincide).
    pub exclude_same_camera: bool,
}

/// One query's ranking over the (filtered) gallery.
#[derive(Debug, Clone)]
pub struct QueryRanking {
    /// Gallery indices ordered by ascending distance (ties by index).
    pub order: Vec<usize>,
    pub average_precision: f64,
    pub rank1_hit: bool,
}

#[derive(Debug, Clone)]
pub struct ReidSummary {
    pub rank1: f64,
    pub mean_ap: f64,
    pub evaluated_queries: usize,
    /// Queries with no valid relevant gallery item, excluded and counted.
    pub excluded_queries: usize,
}

impl ReidSummary {
    pub fn to_csv(&self) -> String {
        format!(
            "rank1,{:.6}\nmAP,{:.6}\nevaluated,{}\nexcluded,{}\n",
            self.rank1, self.mean_ap, self.evaluated_queries, self.excluded_queries
        )
    }
}

/// Ranks one query against the gallery. Gallery items failing the protocol
/// filter are omitted from the order entirely.
pub fn rank_gallery(
    query: &[f64],
    query_meta: ItemMeta,
    gallery: &[Vec<f64>],
    gallery_meta: &[ItemMeta],
    protocol: &Protocol,
) -> Result<QueryRanking, MetricsError> {
    if gallery.is_empty() {
        return Err(MetricsError::EmptyGallery);
    }
    if gallery.len() != gallery_meta.len() {
        return Err(MetricsError::Misaligned {
            lhs: gallery.len(),
            rhs: gallery_meta.len(),
        });
    }
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(gallery.len());
    for (idx, (g, meta)) in gallery.iter().zip(gallery_meta).enumerate() {
        if protocol.exclude_same_camera
            && meta.pid == query_meta.pid
            && meta.camera == query_meta.camera
        {
            continue;
        }
        scored.push((pairwise_distance(query, g)?, idx));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
    let order: Vec<usize> = scored.iter().map(|&(_, i)| i).collect();

    let relevant_total = order
        .iter()
        .filter(|&&i| gallery_meta[i].pid == query_meta.pid)
        .count();
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if gallery_meta[i].pid == query_meta.pid {
            hits += 1;
            precision_sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    let average_precision = if relevant_total == 0 {
        0.0
    } else {
        precision_sum / relevant_total as f64
    };
    let rank1_hit = order
        .first()
        .is_some_and(|&i| gallery_meta[i].pid == query_meta.pid);
    Ok(QueryRanking {
        order,
        average_precision,
        rank1_hit,
    })
}

/// CMC Rank-1 and mAP over a query set. Queries without any relevant gallery
/// item after filtering are excluded from the averages and counted.
pub fn cmc_map(
    queries: &[Vec<f64>],
    query_meta: &[ItemMeta],
    gallery: &[Vec<f64>],
    gallery_meta: &[ItemMeta],
    protocol: &Protocol,
) -> Result<ReidSummary, MetricsError> {
    if queries.len() != query_meta.len() {
        return Err(MetricsError::Misaligned {
            lhs: queries.len(),
            rhs: query_meta.len(),
        });
    }
    if gallery.is_empty() {
        return Err(MetricsError::EmptyGallery);
    }
    let mut rank1_hits = 0usize;
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for (q, &meta) in queries.iter().zip(query_meta) {
        let ranking = rank_gallery(q, meta, gallery, gallery_meta, protocol)?;
        let has_relevant = ranking
            .order
            .iter()
            .any(|&i| gallery_meta[i].pid == meta.pid);
        if !has_relevant {
            excluded += 1;
            continue;
        }
        evaluated += 1;
        if ranking.rank1_hit {
            rank1_hits += 1;
        }
        ap_sum += ranking.average_precision;
    }
    if evaluated == 0 {
        return Err(MetricsError::Contract(
            "no query had a relevant gallery item".into(),
        ));
    }
    Ok(ReidSummary {
        rank1: rank1_hits as f64 / evaluated as f64,
        mean_ap: ap_sum / evaluated as f64,
        evaluated_queries: evaluated,
        excluded_queries: excluded,
    })
}
