use std::collections::HashMap;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::lstm::{masked_cross_entropy, train_minibatches, Dense, LstmStack};
use super::{embedding_rows, hit_at_k, slice_sequences, MetricReport, TaskConfig};
use crate::autograd::Graph;
use crate::corpus::{CheckinSequence, PoiId, Splits};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::optim::{Bound, ParamStore};
use crate::tensor::Matrix;

struct NextPoiModel {
    lstm: LstmStack,
    head: Dense,
}

/// Class-index sequences: input embeddings and targets both index the
/// POI table in ascending id order.
fn encode(slices: &[CheckinSequence], class_of: &HashMap<PoiId, usize>) -> Result<Vec<Vec<usize>>> {
    slices
        .iter()
        .map(|s| {
            s.poi_ids()
                .map(|id| {
                    class_of
                        .get(&id)
                        .copied()
                        .ok_or_else(|| Error::invalid(format!("poi {id} is not in the POI table")))
                })
                .collect()
        })
        .collect()
}

/// Unrolls the model over a batch and returns per-step logits together
/// with the target of each row at that step.
fn unroll(
    model: &NextPoiModel,
    g: &mut Graph,
    b: &Bound,
    inputs: &Matrix,
    seqs: &[&Vec<usize>],
) -> Vec<(crate::autograd::Var, Vec<Option<usize>>)> {
    let steps = seqs.iter().map(|s| s.len() - 1).max().unwrap_or(0);
    let d = inputs.cols();
    let mut state = model.lstm.zero_state(g, seqs.len());
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = Matrix::from_fn(seqs.len(), d, |r, j| {
            if t + 1 < seqs[r].len() {
                inputs.get(seqs[r][t], j)
            } else {
                0.0
            }
        });
        let x = g.constant(x);
        let h = model.lstm.step(g, b, x, &mut state, None);
        let logits = model.head.forward(g, b, h);
        let targets = seqs.iter().map(|s| s.get(t + 1).copied()).collect();
        out.push((logits, targets));
    }
    out
}

/// Trains a stacked LSTM next-POI model on the frozen embeddings over the
/// train split and reports Hit@1 and Hit@5 on the test split.
pub fn eval_recommendation(emb: &EmbeddingMatrix, splits: &Splits, cfg: &TaskConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let snapshot = emb.rows.clone();
    let poi_ids = splits.train.poi_ids();
    let rows = embedding_rows(emb, poi_ids.iter().copied())?;
    let inputs = emb.rows.select_rows(&rows);
    let class_of: HashMap<PoiId, usize> = poi_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let train = encode(&slice_sequences(&splits.train.sequences, cfg.max_slice), &class_of)?;
    let test = encode(&slice_sequences(&splits.test.sequences, cfg.max_slice), &class_of)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("recommendation needs train and test sequences of length >= 2"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = NextPoiModel {
        lstm: LstmStack::new(&mut store, "rec.lstm", emb.dim(), cfg.lstm_hidden, cfg.lstm_layers, &mut rng),
        head: Dense::new(&mut store, "rec.head", cfg.lstm_hidden, poi_ids.len(), &mut rng),
    };
    info!(
        "recommendation: {} train slices, {} test slices, {} POIs",
        train.len(),
        test.len(),
        poi_ids.len()
    );
    let history = train_minibatches(
        &mut store,
        train.len(),
        cfg.epochs,
        cfg.batch_size,
        cfg.lr_rec,
        cfg.clip_norm,
        cfg.seed,
        |g, b, idx| {
            let seqs: Vec<&Vec<usize>> = idx.iter().map(|&i| &train[i]).collect();
            let count: usize = seqs.iter().map(|s| s.len() - 1).sum();
            let mut total = None;
            for (logits, targets) in unroll(&model, g, b, &inputs, &seqs) {
                let l = masked_cross_entropy(g, logits, &targets);
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l),
                });
            }
            let total = total.ok_or_else(|| Error::invalid("empty batch"))?;
            Ok(g.scale(total, 1.0 / count as f64))
        },
    )?;

    let (mut hit1, mut hit5, mut predictions) = (0usize, 0usize, 0usize);
    let k = 5.min(poi_ids.len());
    for chunk in test.chunks(cfg.batch_size) {
        let seqs: Vec<&Vec<usize>> = chunk.iter().collect();
        let mut g = Graph::new();
        let b = store.attach(&mut g, false);
        for (logits, targets) in unroll(&model, &mut g, &b, &inputs, &seqs) {
            let scores = g.value(logits);
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                let row = scores.row(r);
                let mut order: Vec<usize> = (0..row.len()).collect();
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                let ranked: Vec<PoiId> = order[..k].iter().map(|&i| poi_ids[i]).collect();
                hit1 += usize::from(hit_at_k(&ranked, poi_ids[t], 1));
                hit5 += usize::from(hit_at_k(&ranked, poi_ids[t], k));
                predictions += 1;
            }
        }
    }
    if emb.rows.data().iter().zip(snapshot.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Numeric("embeddings changed during downstream training".into()));
    }

    let mut report = MetricReport::new("poi_recommendation", "");
    report.metrics.insert("hit@1".into(), hit1 as f64 / predictions as f64);
    report.metrics.insert("hit@5".into(), hit5 as f64 / predictions as f64);
    if let Some(&last) = history.last() {
        report.metrics.insert("final_train_loss".into(), last);
    }
    report.counts.insert("predictions".into(), predictions);
    report.counts.insert("train_slices".into(), train.len());
    report.counts.insert("test_slices".into(), test.len());
    report.validate()?;
    Ok(report)
}
