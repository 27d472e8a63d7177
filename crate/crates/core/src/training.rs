//! Contrastive and similarity-preservation losses, and the training loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::PoiId;
use crate::embedding::EmbeddingMatrix;
use crate::enhancer::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::enhancer::{feature_matrices, BatchInputs, EnhancerModel};
use crate::error::{Error, Result};
use crate::extractor::FeatureBundle;
use crate::fsutil::{write_atomic, write_jsonl};
use crate::optim::AdamW;
use crate::sampling::{BatchSampler, TrainingBatch};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// InfoNCE temperature.
    pub gamma: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Global gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
    /// Caps the batches drawn per epoch; all batches when unset.
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.1,
            epochs: 100,
            learning_rate: 0.001,
            weight_decay: 0.001,
            seed: 0,
            clip_norm: None,
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(Error::config("max_batches_per_epoch", "must be at least 1"));
        }
        Ok(())
    }
}

fn check_rows_nonzero(m: &Matrix, what: &str) -> Result<()> {
    for i in 0..m.rows() {
        if m.row(i).iter().all(|&v| v == 0.0) {
            return Err(Error::Numeric(format!(
                "{what} row {i} has zero norm; cosine similarity is undefined"
            )));
        }
    }
    Ok(())
}

/// InfoNCE over a batch whose row 0 is the anchor, row 1 the positive and
/// the remaining rows negatives. Similarity is cosine; the softmax runs over
/// the `m − 1` non-anchor rows.
pub fn infonce_graph(g: &mut Graph, fused: Var, gamma: f64) -> Result<Var> {
    let m = g.value(fused).rows();
    if m < 2 {
        return Err(Error::invalid("InfoNCE needs an anchor and at least one candidate"));
    }
    check_rows_nonzero(g.value(fused), "fused embedding")?;
    let unit = g.normalize_rows(fused);
    let anchor = g.slice_rows(unit, 0, 1);
    let others = g.slice_rows(unit, 1, m - 1);
    let sims = g.matmul_nt(anchor, others);
    let logits = g.scale(sims, 1.0 / gamma);
    let logp = g.log_softmax_rows(logits);
    let pos = g.pick(logp, 0, 0);
    Ok(g.scale(pos, -1.0))
}

/// `(1/m²) Σ_ij |cos(F_i, F_j) − cos(P_i, P_j)|`; `base` is treated as fixed.
pub fn similarity_graph(g: &mut Graph, fused: Var, base: &Matrix) -> Result<Var> {
    if g.value(fused).shape() != base.shape() {
        return Err(Error::Shape(format!(
            "fused {:?} vs base {:?}",
            g.value(fused).shape(),
            base.shape()
        )));
    }
    check_rows_nonzero(g.value(fused), "fused embedding")?;
    check_rows_nonzero(base, "base embedding")?;
    let uf = g.normalize_rows(fused);
    let sf = g.matmul_nt(uf, uf);
    let sp = g.constant(cosine_matrix(base));
    let diff = g.sub(sf, sp);
    let a = g.abs(diff);
    // Diagonal terms are |1 − 1| = 0 analytically; drop their rounding noise.
    let m = base.rows();
    let off_diag = g.constant(Matrix::from_fn(m, m, |i, j| if i == j { 0.0 } else { 1.0 }));
    let a = g.mul(a, off_diag);
    Ok(g.mean(a))
}

fn cosine_matrix(m: &Matrix) -> Matrix {
    let unit = Matrix::from_fn(m.rows(), m.cols(), |i, j| {
        let n = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.get(i, j) / n
    });
    unit.matmul_nt(&unit)
}

pub fn infonce_loss(fused: &Matrix, gamma: f64) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(fused.clone());
    let l = infonce_graph(&mut g, f, gamma)?;
    Ok(g.scalar(l))
}

pub fn similarity_loss(fused: &Matrix, base: &Matrix) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(fused.clone());
    let l = similarity_graph(&mut g, f, base)?;
    Ok(g.scalar(l))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub l_cont: f64,
    pub l_sim: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub l_cont: f64,
    pub l_sim: f64,
    pub total: f64,
    pub batches: usize,
}

/// Builds the total training loss of one batch on `g`.
pub fn batch_loss_graph(
    model: &EnhancerModel,
    g: &mut Graph,
    bound: &crate::optim::Bound,
    inputs: &BatchInputs,
    gamma: f64,
) -> Result<(Var, Var, Var)> {
    let out = model.forward_graph(g, bound, inputs)?;
    let l_cont = infonce_graph(g, out.e_fuse, gamma)?;
    let l_sim = similarity_graph(g, out.e_fuse, &inputs.e_poi)?;
    let total = g.add(l_cont, l_sim);
    Ok((l_cont, l_sim, total))
}

/// Where training writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
}

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub struct Trainer<'a> {
    pub model: EnhancerModel,
    pub cfg: TrainConfig,
    opt: AdamW,
    bundles: &'a BTreeMap<PoiId, FeatureBundle>,
    base: &'a EmbeddingMatrix,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: EnhancerModel,
        cfg: TrainConfig,
        bundles: &'a BTreeMap<PoiId, FeatureBundle>,
        base: &'a EmbeddingMatrix,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        opt.clip_norm = cfg.clip_norm;
        Ok(Trainer {
            model,
            cfg,
            opt,
            bundles,
            base,
        })
    }

    pub fn batch_inputs(&self, ids: &[PoiId]) -> Result<BatchInputs> {
        let (ev, ea, es) = feature_matrices(self.bundles, ids)?;
        let e_poi = self
            .base
            .gather(ids)
            .ok_or_else(|| Error::invalid("batch references a POI without a base embedding"))?;
        Ok(BatchInputs { ev, ea, es, e_poi })
    }

    /// One optimizer step on `batch`, processed as a single attention chunk.
    pub fn step(&mut self, batch: &TrainingBatch) -> Result<StepLoss> {
        let inputs = self.batch_inputs(&batch.ids())?;
        let mut g = Graph::new();
        let bound = self.model.params.attach(&mut g, true);
        let (lc, ls, total) = batch_loss_graph(&self.model, &mut g, &bound, &inputs, self.cfg.gamma)?;
        let loss = StepLoss {
            l_cont: g.scalar(lc),
            l_sim: g.scalar(ls),
            total: g.scalar(total),
        };
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss on batch anchored at poi {}",
                batch.anchor
            )));
        }
        let mut grads = g.backward(total);
        let grads = self.model.params.collect_grads(&bound, &mut grads);
        self.opt.step(&mut self.model.params, grads);
        Ok(loss)
    }

    /// Runs every epoch, writing the loss log, the latest checkpoint and the
    /// best-loss checkpoint to `out` when given.
    pub fn fit(&mut self, sampler: &BatchSampler, out: Option<&TrainOutput>) -> Result<Vec<LossReport>> {
        if sampler.num_batches() == 0 {
            return Err(Error::invalid("the sampler produced no training batches"));
        }
        let per_epoch = self
            .cfg
            .max_batches_per_epoch
            .map_or(sampler.num_batches(), |c| c.min(sampler.num_batches()));
        info!(
            "training {} parameters for {} epochs, {per_epoch} batches of {} each",
            self.model.param_count(),
            self.cfg.epochs,
            sampler.batch_size()
        );
        let mut reports = Vec::with_capacity(self.cfg.epochs);
        let mut best = f64::INFINITY;
        for epoch in 0..self.cfg.epochs {
            let (mut sc, mut ss) = (0.0, 0.0);
            let mut n = 0usize;
            for batch in sampler.epoch_batches(epoch).take(per_epoch) {
                match self.step(&batch) {
                    Ok(l) => {
                        sc += l.l_cont;
                        ss += l.l_sim;
                        n += 1;
                    }
                    Err(e) => {
                        if let Some(o) = out {
                            let path = o.dir.join("failed_batch.json");
                            let _ = write_atomic(&path, &serde_json::to_vec_pretty(&batch)?);
                            warn!("offending batch written to {}", path.display());
                        }
                        return Err(e);
                    }
                }
            }
            let (l_cont, l_sim) = (sc / n as f64, ss / n as f64);
            let report = LossReport {
                epoch: epoch + 1,
                l_cont,
                l_sim,
                total: l_cont + l_sim,
                batches: n,
            };
            info!(
                "epoch {}: L_cont {:.6} L_sim {:.6} total {:.6}",
                report.epoch, report.l_cont, report.l_sim, report.total
            );
            reports.push(report.clone());
            if let Some(o) = out {
                write_jsonl(&o.dir.join(TRAIN_LOG), &reports)?;
                let meta = CheckpointMeta {
                    epoch: Some(report.epoch),
                    ..o.meta.clone()
                };
                save_checkpoint(&o.dir.join(LAST_CHECKPOINT), &self.model, &meta)?;
                if report.total < best {
                    best = report.total;
                    save_checkpoint(&o.dir.join(BEST_CHECKPOINT), &self.model, &meta)?;
                }
            }
        }
        Ok(reports)
    }
}

/// Reads a training log written by [`Trainer::fit`].
pub fn read_train_log(path: &Path) -> Result<Vec<LossReport>> {
    crate::fsutil::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_infonce(f: &Matrix, gamma: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| crate::tensor::cosine(a, b);
        let num = (cos(f.row(0), f.row(1)) / gamma).exp();
        let mut den = 0.0;
        for c in 1..f.rows() {
            den += (cos(f.row(0), f.row(c)) / gamma).exp();
        }
        -(num / den).ln()
    }

    fn naive_sim(f: &Matrix, p: &Matrix) -> f64 {
        let m = f.rows();
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                s += (crate::tensor::cosine(f.row(i), f.row(j)) - crate::tensor::cosine(p.row(i), p.row(j))).abs();
            }
        }
        s / (m * m) as f64
    }

    #[test]
    fn infonce_uniform_and_hand_cases() {
        for m in [3usize, 5, 16] {
            let f = Matrix::filled(m, 4, 1.0);
            let l = infonce_loss(&f, 0.1).unwrap();
            assert!((l - ((m - 1) as f64).ln()).abs() < 1e-9, "m={m}: {l}");
        }
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = infonce_loss(&f, 1.0).unwrap();
        assert!((l - 0.313262).abs() < 1e-6);
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn losses_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Matrix::uniform(8, 5, 1.0, &mut rng);
        assert!((infonce_loss(&f, 0.1).unwrap() - naive_infonce(&f, 0.1)).abs() < 1e-9);
        let f6 = Matrix::uniform(6, 5, 1.0, &mut rng);
        let p6 = Matrix::uniform(6, 5, 1.0, &mut rng);
        assert!((similarity_loss(&f6, &p6).unwrap() - naive_sim(&f6, &p6)).abs() < 1e-9);
        assert!((similarity_loss(&f6, &p6).unwrap() - similarity_loss(&p6, &f6).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn similarity_loss_identity_and_single_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Matrix::uniform(5, 3, 1.0, &mut rng);
        assert_eq!(similarity_loss(&f, &f).unwrap(), 0.0);
        let one = Matrix::uniform(1, 3, 1.0, &mut rng);
        assert_eq!(similarity_loss(&one, &Matrix::uniform(1, 3, 1.0, &mut rng)).unwrap(), 0.0);
    }

    #[test]
    fn zero_rows_are_rejected() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 1.0]]);
        assert!(infonce_loss(&f, 0.1).is_err());
        assert!(similarity_loss(&f, &Matrix::filled(3, 2, 1.0)).is_err());
    }

    #[test]
    fn infonce_decreases_as_positive_aligns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = Matrix::uniform(6, 4, 1.0, &mut rng);
        let mut last = f64::INFINITY;
        for t in 0..=10 {
            let a = t as f64 / 10.0;
            let mut f = base.clone();
            let row: Vec<f64> = (0..4).map(|j| a * base.get(0, j) + (1.0 - a) * base.get(1, j)).collect();
            f.row_mut(1).copy_from_slice(&row);
            let l = infonce_loss(&f, 0.1).unwrap();
            assert!(l >= 0.0);
            assert!(l < last + 1e-12);
            last = l;
        }
    }
}
