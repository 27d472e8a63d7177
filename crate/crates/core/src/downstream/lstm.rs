//! Stacked LSTM and dense head built on the autograd graph, plus the
//! minibatch loop shared by the supervised tasks.

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamW, Bound, ParamId, ParamStore};
use crate::tensor::Matrix;

/// LSTM layers with fused gate weights `[x, h] -> [i, f, g, o]`.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub input: usize,
    pub hidden: usize,
    layers: Vec<(ParamId, ParamId)>,
}

/// Per-layer `(h, c)`.
pub type LstmState = Vec<(Var, Var)>;

impl LstmStack {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let layers = (0..layers)
            .map(|l| {
                let in_dim = if l == 0 { input } else { hidden };
                let w = Matrix::uniform(in_dim + hidden, 4 * hidden, bound, rng);
                // Forget gate bias starts at 1.
                let b = Matrix::from_fn(1, 4 * hidden, |_, j| if (hidden..2 * hidden).contains(&j) { 1.0 } else { 0.0 });
                (
                    store.add(format!("{prefix}.{l}.w"), w),
                    store.add(format!("{prefix}.{l}.b"), b),
                )
            })
            .collect();
        LstmStack { input, hidden, layers }
    }

    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> LstmState {
        (0..self.layers.len())
            .map(|_| {
                let h = g.constant(Matrix::zeros(batch, self.hidden));
                let c = g.constant(Matrix::zeros(batch, self.hidden));
                (h, c)
            })
            .collect()
    }

    /// Advances every layer by one step and returns the top hidden state.
    /// Rows whose `mask` entry is 0 keep their previous state.
    pub fn step(&self, g: &mut Graph, b: &Bound, x: Var, state: &mut LstmState, mask: Option<&Matrix>) -> Var {
        let h_dim = self.hidden;
        let (mask, keep) = match mask {
            Some(m) => (Some(g.constant(m.clone())), Some(g.constant(m.map(|v| 1.0 - v)))),
            None => (None, None),
        };
        let mut input = x;
        for (l, &(w, bias)) in self.layers.iter().enumerate() {
            let (h_prev, c_prev) = state[l];
            let xh = g.concat_cols(&[input, h_prev]);
            let z = g.matmul(xh, b.var(w));
            let z = g.add_row(z, b.var(bias));
            let i = g.slice_cols(z, 0, h_dim);
            let f = g.slice_cols(z, h_dim, h_dim);
            let u = g.slice_cols(z, 2 * h_dim, h_dim);
            let o = g.slice_cols(z, 3 * h_dim, h_dim);
            let (i, f, u, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(u), g.sigmoid(o));
            let fc = g.mul(f, c_prev);
            let iu = g.mul(i, u);
            let mut c = g.add(fc, iu);
            let tc = g.tanh(c);
            let mut h = g.mul(o, tc);
            if let (Some(m), Some(k)) = (mask, keep) {
                let (hn, ho) = (g.mul_col(h, m), g.mul_col(h_prev, k));
                h = g.add(hn, ho);
                let (cn, co) = (g.mul_col(c, m), g.mul_col(c_prev, k));
                c = g.add(cn, co);
            }
            state[l] = (h, c);
            input = h;
        }
        input
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Dense {
            w: store.add(format!("{prefix}.w"), Matrix::uniform(input, output, bound, rng)),
            b: store.add(format!("{prefix}.b"), Matrix::zeros(1, output)),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let y = g.matmul(x, b.var(self.w));
        g.add_row(y, b.var(self.b))
    }
}

/// Summed cross-entropy of `logits` rows against `targets`; `None` rows
/// contribute nothing.
pub fn masked_cross_entropy(g: &mut Graph, logits: Var, targets: &[Option<usize>]) -> Var {
    let (rows, cols) = g.value(logits).shape();
    let mut y = Matrix::zeros(rows, cols);
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            y.set(r, t, 1.0);
        }
    }
    let y = g.constant(y);
    let lp = g.log_softmax_rows(logits);
    let picked = g.mul(lp, y);
    let s = g.sum(picked);
    g.scale(s, -1.0)
}

/// Runs `epochs` of shuffled minibatch Adam over `n` items. `loss` builds
/// the mean loss of one batch of item indices on a fresh graph.
pub fn train_minibatches(
    store: &mut ParamStore,
    n: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    clip_norm: Option<f64>,
    seed: u64,
    loss: impl Fn(&mut Graph, &Bound, &[usize]) -> Result<Var>,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("no training examples"));
    }
    let mut opt = AdamW::new(lr, 0.0);
    opt.clip_norm = clip_norm;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut g = Graph::new();
            let bound = store.attach(&mut g, true);
            let l = loss(&mut g, &bound, chunk)?;
            let value = g.scalar(l);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite downstream loss in epoch {}", epoch + 1)));
            }
            let mut grads = g.backward(l);
            let grads = store.collect_grads(&bound, &mut grads);
            opt.step(store, grads);
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        debug!("downstream epoch {}: loss {mean:.6}", epoch + 1);
        history.push(mean);
    }
    Ok(history)
}
