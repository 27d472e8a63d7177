//! Base POI embeddings: loading external files and a reference skip-gram.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::{info, warn};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CheckinSequence, Dataset, PoiId};
use crate::embedding::{EmbeddingMatrix, EmbeddingRole};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct BaseEmbeddingSet {
    pub embeddings: EmbeddingMatrix,
    /// File path, or `skipgram-ref` for the built-in trainer.
    pub provenance: String,
    /// POIs whose rows are placeholders (absent from the source).
    pub flagged: Vec<PoiId>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignReport {
    pub missing: Vec<PoiId>,
    pub extra: Vec<PoiId>,
}

/// Loads an `N d` embedding file and aligns it to the dataset's POIs in
/// ascending id order. Extra ids are dropped with a warning; missing ids are
/// fatal unless `allow_missing`, in which case they are simply absent.
pub fn load_base_embeddings(
    path: &Path,
    ds: &Dataset,
    d: usize,
    allow_missing: bool,
) -> Result<(BaseEmbeddingSet, AlignReport)> {
    let raw = EmbeddingMatrix::load(path, EmbeddingRole::BasePoi)?;
    if raw.dim() != d {
        return Err(Error::Shape(format!(
            "{} has dimension {}, configured d = {d}",
            path.display(),
            raw.dim()
        )));
    }
    let index = raw.index();
    let mut report = AlignReport::default();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for &id in ds.pois.keys() {
        match index.get(&id) {
            Some(&i) => {
                ids.push(id);
                rows.extend_from_slice(raw.rows.row(i));
            }
            None => report.missing.push(id),
        }
    }
    report.extra = raw
        .poi_ids
        .iter()
        .copied()
        .filter(|id| !ds.pois.contains_key(id))
        .collect();
    if !report.extra.is_empty() {
        warn!(
            "{}: ignoring {} rows for POIs not in the dataset",
            path.display(),
            report.extra.len()
        );
    }
    if !report.missing.is_empty() {
        let msg = format!(
            "{}: {} dataset POIs have no embedding (first: {})",
            path.display(),
            report.missing.len(),
            report.missing[0]
        );
        if !allow_missing {
            return Err(Error::invalid(msg));
        }
        warn!("{msg}");
    }
    let n = ids.len();
    let embeddings = EmbeddingMatrix::new(EmbeddingRole::BasePoi, ids, Matrix::new(n, d, rows))?;
    Ok((
        BaseEmbeddingSet {
            embeddings,
            provenance: path.display().to_string(),
            flagged: Vec::new(),
        },
        report,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkipGramConfig {
    pub d: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Initial learning rate, decayed linearly towards 1e-4 of itself.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            d: 256,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SkipGramResult {
    pub set: BaseEmbeddingSet,
    /// Mean negative-sampling loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Skip-gram with negative sampling over POI-id sequences. Every POI of
/// `ds` gets a row; POIs never seen in `train` keep their random
/// initialization and are flagged.
pub fn train_skipgram_reference(
    ds: &Dataset,
    train: &[CheckinSequence],
    cfg: &SkipGramConfig,
) -> Result<SkipGramResult> {
    if cfg.d == 0 || cfg.window == 0 || cfg.epochs == 0 {
        return Err(Error::config("skipgram", "d, window and epochs must be positive"));
    }
    let total_tokens: usize = train.iter().map(|s| s.len()).sum();
    if total_tokens == 0 {
        return Err(Error::invalid("skip-gram needs a non-empty training split"));
    }
    let ids: Vec<PoiId> = ds.pois.keys().copied().collect();
    let pos: BTreeMap<PoiId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let n = ids.len();
    let d = cfg.d;
    let mut counts = vec![0usize; n];
    let corpus: Vec<Vec<usize>> = train
        .iter()
        .map(|s| {
            s.poi_ids()
                .map(|id| {
                    let i = *pos
                        .get(&id)
                        .ok_or_else(|| Error::invalid(format!("training sequence references unknown poi {id}")))?;
                    counts[i] += 1;
                    Ok(i)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
    let sampler = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 0.5 / d as f64;
    let mut w_in = Matrix::uniform(n, d, bound, &mut rng);
    let mut w_out = Matrix::zeros(n, d);
    let total_steps = (cfg.epochs * total_tokens) as f64;
    let mut step = 0usize;
    let mut grad = vec![0.0; d];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut loss = 0.0;
        let mut pairs = 0usize;
        for seq in &corpus {
            for (i, &center) in seq.iter().enumerate() {
                let lr = (cfg.learning_rate * (1.0 - step as f64 / total_steps)).max(cfg.learning_rate * 1e-4);
                step += 1;
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window).min(seq.len() - 1);
                for (j, &ctx) in seq.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let mut targets = Vec::with_capacity(1 + cfg.negatives);
                    targets.push((ctx, 1.0));
                    for _ in 0..cfg.negatives {
                        let neg = sampler.sample(&mut rng);
                        if neg != ctx {
                            targets.push((neg, 0.0));
                        }
                    }
                    for (t, label) in targets {
                        let dot: f64 = w_in.row(center).iter().zip(w_out.row(t)).map(|(a, b)| a * b).sum();
                        let s = sigmoid(dot);
                        loss -= if label > 0.0 { s.max(1e-12).ln() } else { (1.0 - s).max(1e-12).ln() };
                        let gcoef = lr * (label - s);
                        for k in 0..d {
                            grad[k] += gcoef * w_out.get(t, k);
                        }
                        let center_row: Vec<f64> = w_in.row(center).to_vec();
                        for (o, c) in w_out.row_mut(t).iter_mut().zip(&center_row) {
                            *o += gcoef * c;
                        }
                    }
                    for (v, g) in w_in.row_mut(center).iter_mut().zip(&grad) {
                        *v += g;
                    }
                    pairs += 1;
                }
            }
        }
        let mean = if pairs == 0 { 0.0 } else { loss / pairs as f64 };
        info!("skip-gram epoch {}: loss {mean:.6}", epoch + 1);
        epoch_losses.push(mean);
    }

    let seen: BTreeSet<usize> = corpus.iter().flatten().copied().collect();
    let flagged: Vec<PoiId> = (0..n).filter(|i| !seen.contains(i)).map(|i| ids[i]).collect();
    if !flagged.is_empty() {
        warn!("{} POIs never occur in training sequences; their rows stay random", flagged.len());
    }
    // Input plus output vectors, so direct co-occurrence also shows up as
    // similarity and not only shared context.
    for (v, o) in w_in.data_mut().iter_mut().zip(w_out.data()) {
        *v += o;
    }
    Ok(SkipGramResult {
        set: BaseEmbeddingSet {
            embeddings: EmbeddingMatrix::new(EmbeddingRole::BasePoi, ids, w_in)?,
            provenance: "skipgram-ref".into(),
            flagged,
        },
        epoch_losses,
    })
}

/// Uniform random base embeddings for every POI of `ds`.
pub fn random_embeddings(ds: &Dataset, d: usize, seed: u64) -> Result<EmbeddingMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<PoiId> = ds.pois.keys().copied().collect();
    let rows = Matrix::from_fn(ids.len(), d, |_, _| rng.gen_range(-1.0..1.0));
    EmbeddingMatrix::new(EmbeddingRole::BasePoi, ids, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CheckinRecord, Poi};
    use crate::tensor::cosine;

    fn dataset(n: u32, seqs: Vec<Vec<PoiId>>) -> Dataset {
        let pois = (0..n)
            .map(|i| {
                (
                    i,
                    Poi {
                        id: i,
                        name: format!("p{i}"),
                        category: "c".into(),
                        lon: 0.0,
                        lat: 0.0,
                    },
                )
            })
            .collect();
        let sequences = seqs
            .into_iter()
            .enumerate()
            .map(|(u, ids)| CheckinSequence {
                user: u.to_string(),
                records: ids
                    .into_iter()
                    .enumerate()
                    .map(|(t, p)| CheckinRecord {
                        user: u.to_string(),
                        poi_id: p,
                        timestamp: t as i64 * 60,
                        tz_offset_minutes: 0,
                    })
                    .collect(),
            })
            .collect();
        Dataset::new(pois, sequences).unwrap()
    }

    #[test]
    fn loader_aligns_and_tolerates_extras() {
        let ds = dataset(3, vec![]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.txt");
        std::fs::write(&path, "4 2\n2 1 1\n0 0 1\n9 5 5\n1 1 0\n").unwrap();
        let (set, rep) = load_base_embeddings(&path, &ds, 2, false).unwrap();
        assert_eq!(set.embeddings.poi_ids, vec![0, 1, 2]);
        assert_eq!(set.embeddings.rows.row(2), &[1.0, 1.0]);
        assert_eq!(rep.extra, vec![9]);
        assert!(load_base_embeddings(&path, &ds, 3, false).is_err());

        std::fs::write(&path, "1 2\n0 1 1\n").unwrap();
        assert!(load_base_embeddings(&path, &ds, 2, false).is_err());
        let (set, rep) = load_base_embeddings(&path, &ds, 2, true).unwrap();
        assert_eq!(set.embeddings.len(), 1);
        assert_eq!(rep.missing, vec![1, 2]);
    }

    #[test]
    fn skipgram_is_deterministic_and_learns_adjacency() {
        // Noise POIs 2..102 form a ring walked forward; 0 and 1 are always
        // inserted side by side at a random point.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seqs: Vec<Vec<PoiId>> = (0..150)
            .map(|_| {
                let mut at = rng.gen_range(0..100u32);
                let mut s: Vec<PoiId> = (0..20)
                    .map(|_| {
                        at = (at + rng.gen_range(1..3)) % 100;
                        at + 2
                    })
                    .collect();
                let k = rng.gen_range(0..20);
                s.insert(k, 1);
                s.insert(k, 0);
                s
            })
            .collect();
        let ds = dataset(103, seqs);
        let cfg = SkipGramConfig {
            d: 16,
            seed: 3,
            ..SkipGramConfig::default()
        };
        let a = train_skipgram_reference(&ds, &ds.sequences, &cfg).unwrap();
        let b = train_skipgram_reference(&ds, &ds.sequences, &cfg).unwrap();
        assert_eq!(a.set.embeddings, b.set.embeddings);
        assert_eq!(a.set.embeddings.rows.shape(), (103, 16));
        assert_eq!(a.set.flagged, vec![102]);
        assert!(a.epoch_losses[1] < a.epoch_losses[0] && a.epoch_losses[2] < a.epoch_losses[1]);

        let e = &a.set.embeddings.rows;
        let mut sims = Vec::new();
        for i in 2..102 {
            for j in (i + 1)..102 {
                sims.push(cosine(e.row(i), e.row(j)));
            }
        }
        sims.sort_by(f64::total_cmp);
        let median = sims[sims.len() / 2];
        assert!(cosine(e.row(0), e.row(1)) > median);
    }
}
