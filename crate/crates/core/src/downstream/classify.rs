use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::lstm::{masked_cross_entropy, train_minibatches, Dense, LstmStack};
use super::{embedding_rows, slice_sequences, MetricReport, TaskConfig};
use crate::autograd::{Graph, Var};
use crate::corpus::{largest_remainder, CheckinSequence, Dataset, PoiId, Splits};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::optim::{Bound, ParamStore};
use crate::tensor::Matrix;

/// Slices every user's check-ins and distributes each user's slices over
/// (test, val, train) by `ratios`, so that users recur across splits.
pub fn classification_splits(ds: &Dataset, max_slice: usize, ratios: (u32, u32, u32), seed: u64) -> Result<Splits> {
    let mut by_user: BTreeMap<String, Vec<CheckinSequence>> = BTreeMap::new();
    for s in slice_sequences(&ds.sequences, max_slice) {
        by_user.entry(s.user.clone()).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut test, mut val, mut train) = (Vec::new(), Vec::new(), Vec::new());
    for (_, mut slices) in by_user {
        slices.shuffle(&mut rng);
        let sizes = largest_remainder(slices.len(), &[ratios.2, ratios.0, ratios.1]);
        let rest = slices.split_off(sizes[0]);
        train.extend(slices);
        let mut rest = rest.into_iter();
        test.extend(rest.by_ref().take(sizes[1]));
        val.extend(rest);
    }
    Ok(Splits {
        test: Dataset::new(ds.pois.clone(), test)?,
        val: Dataset::new(ds.pois.clone(), val)?,
        train: Dataset::new(ds.pois.clone(), train)?,
    })
}

/// Macro-averaged F1 over the union of true and predicted labels.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    let labels: BTreeSet<usize> = truth.iter().chain(pred).copied().collect();
    if labels.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &labels {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
        let fn_ = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
        if tp > 0.0 {
            total += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
    }
    total / labels.len() as f64
}

struct UserModel {
    lstm: LstmStack,
    head: Dense,
}

fn final_logits(model: &UserModel, g: &mut Graph, b: &Bound, inputs: &Matrix, seqs: &[&Vec<usize>]) -> Var {
    let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let d = inputs.cols();
    let mut state = model.lstm.zero_state(g, seqs.len());
    let mut h = state.last().expect("at least one layer").0;
    for t in 0..steps {
        let x = Matrix::from_fn(seqs.len(), d, |r, j| seqs[r].get(t).map_or(0.0, |&p| inputs.get(p, j)));
        let mask = Matrix::from_fn(seqs.len(), 1, |r, _| if t < seqs[r].len() { 1.0 } else { 0.0 });
        let x = g.constant(x);
        h = model.lstm.step(g, b, x, &mut state, Some(&mask));
    }
    model.head.forward(g, b, h)
}

/// Trains a stacked LSTM to name the user of each check-in slice and
/// reports accuracy and macro-F1 on test slices. Test users never seen in
/// training are excluded and counted.
pub fn eval_classification(emb: &EmbeddingMatrix, splits: &Splits, cfg: &TaskConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let snapshot = emb.rows.clone();
    let poi_ids: Vec<PoiId> = splits.train.poi_ids();
    let rows = embedding_rows(emb, poi_ids.iter().copied())?;
    let inputs = emb.rows.select_rows(&rows);
    let class_of: HashMap<PoiId, usize> = poi_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let encode = |s: &CheckinSequence| -> Result<Vec<usize>> {
        s.poi_ids()
            .map(|id| {
                class_of
                    .get(&id)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("poi {id} is not in the POI table")))
            })
            .collect()
    };

    let train_slices = slice_sequences(&splits.train.sequences, cfg.max_slice);
    let users: Vec<String> = train_slices
        .iter()
        .map(|s| s.user.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if users.is_empty() {
        return Err(Error::invalid("classification needs training slices"));
    }
    let label_of: HashMap<&str, usize> = users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect();
    let train: Vec<(Vec<usize>, usize)> = train_slices
        .iter()
        .map(|s| Ok((encode(s)?, label_of[s.user.as_str()])))
        .collect::<Result<_>>()?;

    let mut excluded_users = BTreeSet::new();
    let mut excluded_slices = 0usize;
    let mut test = Vec::new();
    for s in slice_sequences(&splits.test.sequences, cfg.max_slice) {
        match label_of.get(s.user.as_str()) {
            Some(&label) => test.push((encode(&s)?, label)),
            None => {
                excluded_users.insert(s.user.clone());
                excluded_slices += 1;
            }
        }
    }
    if !excluded_users.is_empty() {
        warn!(
            "classification: {} test users absent from training excluded ({excluded_slices} slices)",
            excluded_users.len()
        );
    }
    if test.is_empty() {
        return Err(Error::invalid("no test slices belong to users seen in training"));
    }
    info!(
        "classification: {} users, {} train slices, {} test slices",
        users.len(),
        train.len(),
        test.len()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = UserModel {
        lstm: LstmStack::new(&mut store, "cls.lstm", emb.dim(), cfg.lstm_hidden, cfg.lstm_layers, &mut rng),
        head: Dense::new(&mut store, "cls.head", cfg.lstm_hidden, users.len(), &mut rng),
    };
    train_minibatches(
        &mut store,
        train.len(),
        cfg.epochs,
        cfg.batch_size,
        cfg.lr_other,
        cfg.clip_norm,
        cfg.seed,
        |g, b, idx| {
            let seqs: Vec<&Vec<usize>> = idx.iter().map(|&i| &train[i].0).collect();
            let targets: Vec<Option<usize>> = idx.iter().map(|&i| Some(train[i].1)).collect();
            let logits = final_logits(&model, g, b, &inputs, &seqs);
            let l = masked_cross_entropy(g, logits, &targets);
            Ok(g.scale(l, 1.0 / idx.len() as f64))
        },
    )?;

    let mut truth = Vec::with_capacity(test.len());
    let mut pred = Vec::with_capacity(test.len());
    for chunk in test.chunks(cfg.batch_size) {
        let seqs: Vec<&Vec<usize>> = chunk.iter().map(|(s, _)| s).collect();
        let mut g = Graph::new();
        let b = store.attach(&mut g, false);
        let logits = final_logits(&model, &mut g, &b, &inputs, &seqs);
        let scores = g.value(logits);
        for (r, (_, label)) in chunk.iter().enumerate() {
            let row = scores.row(r);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("at least one class");
            truth.push(*label);
            pred.push(best);
        }
    }
    if emb.rows.data().iter().zip(snapshot.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Numeric("embeddings changed during downstream training".into()));
    }

    let correct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count();
    let mut report = MetricReport::new("user_classification", "");
    report.metrics.insert("acc".into(), correct as f64 / truth.len() as f64);
    report.metrics.insert("macro_f1".into(), macro_f1(&truth, &pred));
    report.counts.insert("classes".into(), users.len());
    report.counts.insert("test_slices".into(), truth.len());
    report.counts.insert("excluded_users".into(), excluded_users.len());
    report.counts.insert("excluded_slices".into(), excluded_slices);
    report.validate()?;
    Ok(report)
}
