//! Downstream evaluation of any embedding matrix: next-POI recommendation,
//! user classification, visitor-flow forecasting, clustering and pairwise
//! distances.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CheckinSequence, PoiId};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::euclidean;

mod classify;
mod cluster;
mod flow;
mod lstm;
mod recommend;

pub use classify::{classification_splits, eval_classification, macro_f1};
pub use cluster::{eval_cluster, kmeans, nmi, KMeansResult};
pub use flow::{build_flow_series, eval_flow, FlowSeries, FlowSeriesSet};
pub use lstm::{Dense, LstmStack};
pub use recommend::eval_recommendation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub epochs: usize,
    /// Learning rate for recommendation.
    pub lr_rec: f64,
    /// Learning rate for classification and flow.
    pub lr_other: f64,
    pub max_slice: usize,
    pub flow_window_hours: u32,
    pub min_flow_len: usize,
    /// Steps the flow decoder predicts.
    pub flow_horizon: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            lstm_hidden: 512,
            lstm_layers: 2,
            epochs: 100,
            lr_rec: 1e-3,
            lr_other: 1e-4,
            max_slice: 128,
            flow_window_hours: 1,
            min_flow_len: 6,
            flow_horizon: 1,
            batch_size: 32,
            clip_norm: Some(5.0),
            kmeans_restarts: 10,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lstm_hidden", self.lstm_hidden),
            ("lstm_layers", self.lstm_layers),
            ("epochs", self.epochs),
            ("flow_window_hours", self.flow_window_hours as usize),
            ("flow_horizon", self.flow_horizon),
            ("batch_size", self.batch_size),
            ("kmeans_restarts", self.kmeans_restarts),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        for (key, v) in [("lr_rec", self.lr_rec), ("lr_other", self.lr_other)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be a positive number, got {v}")));
            }
        }
        if self.max_slice < 2 {
            return Err(Error::config("max_slice", "must be at least 2"));
        }
        if self.min_flow_len <= self.flow_horizon {
            return Err(Error::config("min_flow_len", "must exceed flow_horizon"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    /// Bookkeeping counts (evaluated items, excluded users, dropped series).
    #[serde(default)]
    pub counts: BTreeMap<String, usize>,
    pub provenance: String,
}

impl MetricReport {
    pub fn new(task: &str, provenance: &str) -> Self {
        MetricReport {
            task: task.into(),
            metrics: BTreeMap::new(),
            counts: BTreeMap::new(),
            provenance: provenance.into(),
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// Checks metric ranges and the orderings between related metrics.
    pub fn validate(&self) -> Result<()> {
        for (name, &v) in &self.metrics {
            let unit = matches!(name.as_str(), "hit@1" | "hit@5" | "acc" | "macro_f1" | "nmi");
            if !v.is_finite() || v < 0.0 || (unit && v > 1.0) {
                return Err(Error::Numeric(format!("{} metric {name} = {v} is out of range", self.task)));
            }
        }
        if let (Some(h1), Some(h5)) = (self.metric("hit@1"), self.metric("hit@5")) {
            if h1 > h5 {
                return Err(Error::Numeric(format!("hit@1 {h1} exceeds hit@5 {h5}")));
            }
        }
        if let (Some(mae), Some(rmse)) = (self.metric("mae"), self.metric("rmse")) {
            if rmse < mae * (1.0 - 1e-12) {
                return Err(Error::Numeric(format!("rmse {rmse} below mae {mae}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Cuts every sequence into consecutive slices of at most `max_slice`
/// records; slices shorter than two records are dropped.
pub fn slice_sequences(sequences: &[CheckinSequence], max_slice: usize) -> Vec<CheckinSequence> {
    assert!(max_slice >= 2, "max_slice must be at least 2");
    sequences
        .iter()
        .flat_map(|s| {
            s.records.chunks(max_slice).filter(|c| c.len() >= 2).map(|c| CheckinSequence {
                user: s.user.clone(),
                records: c.to_vec(),
            })
        })
        .collect()
}

/// 1 if `truth` is among the first `k` entries of `ranked`.
pub fn hit_at_k(ranked: &[PoiId], truth: PoiId, k: usize) -> u8 {
    assert!(k >= 1 && ranked.len() >= k, "need k >= 1 and at least k ranked entries");
    u8::from(ranked[..k].contains(&truth))
}

pub fn pairwise_distance(emb: &EmbeddingMatrix, a: PoiId, b: PoiId) -> Result<f64> {
    let row = |id: PoiId| {
        emb.row_of(id)
            .ok_or_else(|| Error::invalid(format!("poi {id} has no embedding")))
    };
    Ok(euclidean(row(a)?, row(b)?))
}

/// Row indices of `ids` in `emb`, failing on the first absent id.
pub(crate) fn embedding_rows(emb: &EmbeddingMatrix, ids: impl IntoIterator<Item = PoiId>) -> Result<Vec<usize>> {
    let index = emb.index();
    ids.into_iter()
        .map(|id| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| Error::invalid(format!("poi {id} has no embedding")))
        })
        .collect()
}

#[cfg(test)]
mod tests;
