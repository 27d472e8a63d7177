use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{train_minibatches, Dense, LstmStack, LstmState};
use super::{embedding_rows, MetricReport, TaskConfig};
use crate::autograd::{Graph, Var};
use crate::corpus::{largest_remainder, Dataset, PoiId};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::optim::{Bound, ParamStore};
use crate::tensor::Matrix;

const HOURS: usize = 24;

/// One maximal run of non-empty check-in windows at a POI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSeries {
    pub poi_id: PoiId,
    /// Index of the first window since the epoch, in local time.
    pub start_window: i64,
    /// Local hour of day at which the first window starts.
    pub start_hour: u32,
    pub counts: Vec<u32>,
    pub mean: f64,
    pub std: f64,
    /// Counts z-scored with the mean and std of the observed portion.
    pub values: Vec<f64>,
}

impl FlowSeries {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    fn hour_at(&self, t: usize, window_hours: u32) -> usize {
        (self.start_hour as usize + t * window_hours as usize) % HOURS
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowSeriesSet {
    pub series: Vec<FlowSeries>,
    pub dropped_constant: usize,
    pub window_hours: u32,
    pub horizon: usize,
}

/// Builds per-POI visitor-count series over local-time windows. Only runs
/// of consecutive non-empty windows at least `min_flow_len` long are kept.
/// The last `flow_horizon` values of each run are the forecast target and
/// are excluded from the normalization statistics.
pub fn build_flow_series(ds: &Dataset, cfg: &TaskConfig) -> Result<FlowSeriesSet> {
    cfg.validate()?;
    let window_secs = 3600 * i64::from(cfg.flow_window_hours);
    let mut counts: BTreeMap<PoiId, BTreeMap<i64, u32>> = BTreeMap::new();
    for r in ds.sequences.iter().flat_map(|s| &s.records) {
        let local = r.timestamp + i64::from(r.tz_offset_minutes) * 60;
        *counts.entry(r.poi_id).or_default().entry(local.div_euclid(window_secs)).or_insert(0) += 1;
    }
    let mut set = FlowSeriesSet {
        window_hours: cfg.flow_window_hours,
        horizon: cfg.flow_horizon,
        ..FlowSeriesSet::default()
    };
    for (poi_id, windows) in counts {
        let mut runs: Vec<(i64, Vec<u32>)> = Vec::new();
        for (w, c) in windows {
            match runs.last_mut() {
                Some((start, run)) if *start + run.len() as i64 == w => run.push(c),
                _ => runs.push((w, vec![c])),
            }
        }
        for (start_window, run) in runs {
            if run.len() < cfg.min_flow_len {
                continue;
            }
            let observed = &run[..run.len() - cfg.flow_horizon];
            let n = observed.len() as f64;
            let mean = observed.iter().map(|&c| f64::from(c)).sum::<f64>() / n;
            let var = observed.iter().map(|&c| (f64::from(c) - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std == 0.0 {
                set.dropped_constant += 1;
                continue;
            }
            let start_hour = (start_window * i64::from(cfg.flow_window_hours)).rem_euclid(24) as u32;
            set.series.push(FlowSeries {
                poi_id,
                start_window,
                start_hour,
                values: run.iter().map(|&c| (f64::from(c) - mean) / std).collect(),
                counts: run,
                mean,
                std,
            });
        }
    }
    if set.dropped_constant > 0 {
        warn!("dropped {} flow series with zero variance", set.dropped_constant);
    }
    Ok(set)
}

struct FlowModel {
    encoder: LstmStack,
    decoder: LstmStack,
    head: Dense,
}

fn one_hot_hour(row: &mut [f64], hour: usize) {
    row.iter_mut().for_each(|v| *v = 0.0);
    row[hour] = 1.0;
}

/// Runs encoder and decoder over a batch; returns the prediction `Var` of
/// every horizon step (B x 1). With `teacher` the decoder is fed the true
/// previous value, otherwise its own prediction.
fn forecast(
    model: &FlowModel,
    g: &mut Graph,
    b: &Bound,
    batch: &[(&FlowSeries, &[f64])],
    set: &FlowSeriesSet,
    teacher: bool,
) -> Vec<Var> {
    let n = batch.len();
    let d = batch[0].1.len();
    let h = set.horizon;
    let enc_len: Vec<usize> = batch.iter().map(|(s, _)| s.len() - h).collect();
    let steps = *enc_len.iter().max().expect("non-empty batch");
    let mut state: LstmState = model.encoder.zero_state(g, n);
    for t in 0..steps {
        let mut x = Matrix::zeros(n, 1 + d + HOURS);
        for (r, (s, e)) in batch.iter().enumerate() {
            if t < enc_len[r] {
                let row = x.row_mut(r);
                row[0] = s.values[t];
                row[1..1 + d].copy_from_slice(e);
                one_hot_hour(&mut row[1 + d..], s.hour_at(t, set.window_hours));
            }
        }
        let mask = Matrix::from_fn(n, 1, |r, _| if t < enc_len[r] { 1.0 } else { 0.0 });
        let x = g.constant(x);
        model.encoder.step(g, b, x, &mut state, Some(&mask));
    }
    let mut prev: Option<Var> = None;
    let mut out = Vec::with_capacity(h);
    for k in 0..h {
        let mut x = Matrix::zeros(n, 1 + HOURS);
        for (r, (s, _)) in batch.iter().enumerate() {
            let t = enc_len[r] + k;
            let row = x.row_mut(r);
            row[0] = s.values[t - 1];
            one_hot_hour(&mut row[1..], s.hour_at(t, set.window_hours));
        }
        let x = g.constant(x);
        let x = match prev {
            Some(p) if !teacher => {
                let hours = g.slice_cols(x, 1, HOURS);
                g.concat_cols(&[p, hours])
            }
            _ => x,
        };
        let top = model.decoder.step(g, b, x, &mut state, None);
        let y = model.head.forward(g, b, top);
        prev = Some(y);
        out.push(y);
    }
    out
}

fn targets(batch: &[(&FlowSeries, &[f64])], horizon: usize, k: usize) -> Matrix {
    Matrix::from_fn(batch.len(), 1, |r, _| {
        let s = batch[r].0;
        s.values[s.len() - horizon + k]
    })
}

/// Trains an LSTM encoder-decoder forecaster on 70% of the series and
/// reports MAE and RMSE (normalized units) on the rest, with the error of
/// predicting each series' observed mean as the naive floor.
pub fn eval_flow(emb: &EmbeddingMatrix, set: &FlowSeriesSet, cfg: &TaskConfig) -> Result<MetricReport> {
    cfg.validate()?;
    if set.series.len() < 10 {
        return Err(Error::invalid(format!(
            "flow evaluation needs at least 10 series, have {}",
            set.series.len()
        )));
    }
    if set.horizon == 0 || set.series.iter().any(|s| s.len() <= set.horizon) {
        return Err(Error::invalid("every flow series must be longer than the horizon"));
    }
    let snapshot = emb.rows.clone();
    let rows = embedding_rows(emb, set.series.iter().map(|s| s.poi_id))?;
    let examples: Vec<(&FlowSeries, &[f64])> = set
        .series
        .iter()
        .zip(&rows)
        .map(|(s, &r)| (s, emb.rows.row(r)))
        .collect();

    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let sizes = largest_remainder(order.len(), &[7, 3]);
    let (train_idx, test_idx) = order.split_at(sizes[0]);
    info!("flow: {} train series, {} test series", train_idx.len(), test_idx.len());

    let d = emb.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = FlowModel {
        encoder: LstmStack::new(&mut store, "flow.enc", 1 + d + HOURS, cfg.lstm_hidden, cfg.lstm_layers, &mut rng),
        decoder: LstmStack::new(&mut store, "flow.dec", 1 + HOURS, cfg.lstm_hidden, cfg.lstm_layers, &mut rng),
        head: Dense::new(&mut store, "flow.head", cfg.lstm_hidden, 1, &mut rng),
    };
    let horizon = set.horizon;
    train_minibatches(
        &mut store,
        train_idx.len(),
        cfg.epochs,
        cfg.batch_size,
        cfg.lr_other,
        cfg.clip_norm,
        cfg.seed,
        |g, b, idx| {
            let batch: Vec<_> = idx.iter().map(|&i| examples[train_idx[i]]).collect();
            let preds = forecast(&model, g, b, &batch, set, true);
            let mut total = None;
            for (k, p) in preds.into_iter().enumerate() {
                let y = g.constant(targets(&batch, horizon, k));
                let diff = g.sub(p, y);
                let sq = g.mul(diff, diff);
                let s = g.sum(sq);
                total = Some(match total {
                    None => s,
                    Some(acc) => g.add(acc, s),
                });
            }
            let total = total.expect("horizon >= 1");
            Ok(g.scale(total, 1.0 / (batch.len() * horizon) as f64))
        },
    )?;

    let (mut abs, mut sq, mut naive_abs, mut naive_sq, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for chunk in test_idx.chunks(cfg.batch_size) {
        let batch: Vec<_> = chunk.iter().map(|&i| examples[i]).collect();
        let mut g = Graph::new();
        let b = store.attach(&mut g, false);
        let preds = forecast(&model, &mut g, &b, &batch, set, false);
        for (k, p) in preds.into_iter().enumerate() {
            let y = targets(&batch, horizon, k);
            for (p, y) in g.value(p).data().iter().zip(y.data()) {
                abs += (p - y).abs();
                sq += (p - y).powi(2);
                // The observed mean is 0 in normalized units.
                naive_abs += y.abs();
                naive_sq += y * y;
                n += 1;
            }
        }
    }
    if emb.rows.data().iter().zip(snapshot.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Numeric("embeddings changed during downstream training".into()));
    }
    let nf = n as f64;
    let mut report = MetricReport::new("flow_prediction", "");
    report.metrics.insert("mae".into(), abs / nf);
    report.metrics.insert("rmse".into(), (sq / nf).sqrt());
    report.metrics.insert("naive_mae".into(), naive_abs / nf);
    report.metrics.insert("naive_rmse".into(), (naive_sq / nf).sqrt());
    report.counts.insert("train_series".into(), train_idx.len());
    report.counts.insert("test_series".into(), test_idx.len());
    report.counts.insert("targets".into(), n);
    report.counts.insert("dropped_constant".into(), set.dropped_constant);
    report.validate()?;
    Ok(report)
}
