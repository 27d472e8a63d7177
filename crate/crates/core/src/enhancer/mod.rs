//! The enhancement network: feature projection, dual feature alignment,
//! semantic feature fusion and cross attention fusion.
//!
//! Attention runs across the rows of a batch: each POI is one row, so the
//! output for a POI depends on the other POIs processed with it.

pub mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::PoiId;
use crate::embedding::{EmbeddingMatrix, EmbeddingRole};
use crate::error::{Error, Result};
use crate::extractor::FeatureBundle;
use crate::optim::{Bound, ParamId, ParamStore};
use crate::tensor::Matrix;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    pub d: usize,
    /// SFF latent width.
    pub d_prime: usize,
    pub heads: usize,
    pub d_h: usize,
    /// DFA layers.
    pub l1: usize,
    /// CAF layers.
    pub l2: usize,
    /// Language-model feature width.
    pub feature_dim: usize,
    pub ffn_mult: usize,
    /// Parallel attention + FFN in CAF layers instead of the sequential form.
    pub paf_parallel: bool,
    /// Scale attention logits by `1/√d_h` instead of `1/√d`.
    pub scale_by_head_dim: bool,
    pub ln_eps: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            d: 256,
            d_prime: 256,
            heads: 8,
            d_h: 32,
            l1: 4,
            l2: 2,
            feature_dim: 4096,
            ffn_mult: 4,
            paf_parallel: false,
            scale_by_head_dim: false,
            ln_eps: 1e-5,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("d", self.d),
            ("d_prime", self.d_prime),
            ("heads", self.heads),
            ("d_h", self.d_h),
            ("l1", self.l1),
            ("l2", self.l2),
            ("feature_dim", self.feature_dim),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::config("ln_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn attention_scale(&self) -> f64 {
        let denom = if self.scale_by_head_dim { self.d_h } else { self.d };
        1.0 / (denom as f64).sqrt()
    }
}

/// Parameter handles of one attention block (attention, FFN, two layer norms).
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayer {
    pub name: String,
    pub multi_query: bool,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    FanIn,
    Zeros,
    Ones,
}

fn layer_layout(
    prefix: &str,
    hp: &HyperParams,
    multi_query: bool,
) -> Vec<(String, usize, usize, Init)> {
    let (d, hd) = (hp.d, hp.heads * hp.d_h);
    let kv = if multi_query { hp.d_h } else { hd };
    let f = hp.ffn_mult * d;
    [
        ("wq", d, hd, Init::FanIn),
        ("wk", d, kv, Init::FanIn),
        ("wv", d, kv, Init::FanIn),
        ("wo", hd, d, Init::FanIn),
        ("w1", d, f, Init::FanIn),
        ("b1", 1, f, Init::Zeros),
        ("w2", f, d, Init::FanIn),
        ("b2", 1, d, Init::Zeros),
        ("ln1_g", 1, d, Init::Ones),
        ("ln1_b", 1, d, Init::Zeros),
        ("ln2_g", 1, d, Init::Ones),
        ("ln2_b", 1, d, Init::Zeros),
    ]
    .into_iter()
    .map(|(n, r, c, i)| (format!("{prefix}.{n}"), r, c, i))
    .collect()
}

fn layout(hp: &HyperParams) -> Vec<(String, usize, usize, Init)> {
    let mut out = vec![
        ("proj_v".to_string(), hp.feature_dim, hp.d, Init::FanIn),
        ("proj_a".to_string(), hp.feature_dim, hp.d, Init::FanIn),
        ("proj_s".to_string(), hp.feature_dim, hp.d, Init::FanIn),
    ];
    for stack in ["dfa_av", "dfa_as"] {
        for k in 0..hp.l1 {
            out.extend(layer_layout(&format!("{stack}.{k}"), hp, false));
        }
    }
    out.push(("sff.w1".into(), hp.d, hp.d_prime, Init::FanIn));
    out.push(("sff.w2".into(), 2 * hp.d_prime, 1, Init::FanIn));
    for k in 0..hp.l2 {
        out.extend(layer_layout(&format!("caf.{k}"), hp, true));
    }
    out
}

fn init_matrix(rows: usize, cols: usize, init: Init, rng: &mut ChaCha8Rng) -> Matrix {
    match init {
        Init::FanIn => Matrix::uniform(rows, cols, 1.0 / (rows as f64).sqrt(), rng),
        Init::Zeros => Matrix::zeros(rows, cols),
        Init::Ones => Matrix::filled(rows, cols, 1.0),
    }
}

/// Creates a standalone attention block in `store` (used by tests and tools).
pub fn add_attn_layer(
    store: &mut ParamStore,
    prefix: &str,
    hp: &HyperParams,
    multi_query: bool,
    rng: &mut ChaCha8Rng,
) -> AttnLayer {
    for (name, r, c, init) in layer_layout(prefix, hp, multi_query) {
        store.add(name, init_matrix(r, c, init, rng));
    }
    resolve_layer(store, prefix, multi_query).expect("just added")
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::invalid(format!("missing parameter tensor `{name}`")))
}

fn resolve_layer(store: &ParamStore, prefix: &str, multi_query: bool) -> Result<AttnLayer> {
    let id = |n: &str| lookup(store, &format!("{prefix}.{n}"));
    Ok(AttnLayer {
        name: prefix.to_string(),
        multi_query,
        wq: id("wq")?,
        wk: id("wk")?,
        wv: id("wv")?,
        wo: id("wo")?,
        w1: id("w1")?,
        b1: id("b1")?,
        w2: id("w2")?,
        b2: id("b2")?,
        ln1_g: id("ln1_g")?,
        ln1_b: id("ln1_b")?,
        ln2_g: id("ln2_g")?,
        ln2_b: id("ln2_b")?,
    })
}

/// Multi-head attention with `q_src` rows attending over `kv_src` rows.
/// Multi-query layers share one key/value projection across heads.
pub fn attention(
    g: &mut Graph,
    b: &Bound,
    layer: &AttnLayer,
    hp: &HyperParams,
    q_src: Var,
    kv_src: Var,
) -> Result<Var> {
    let q = g.matmul(q_src, b.var(layer.wq));
    let k = g.matmul(kv_src, b.var(layer.wk));
    let v = g.matmul(kv_src, b.var(layer.wv));
    let scale = hp.attention_scale();
    let mut heads = Vec::with_capacity(hp.heads);
    for h in 0..hp.heads {
        let qh = g.slice_cols(q, h * hp.d_h, hp.d_h);
        let (kh, vh) = if layer.multi_query {
            (k, v)
        } else {
            (g.slice_cols(k, h * hp.d_h, hp.d_h), g.slice_cols(v, h * hp.d_h, hp.d_h))
        };
        let raw = g.matmul_nt(qh, kh);
        let logits = g.scale(raw, scale);
        if !g.value(logits).is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite attention scores in layer {} head {h}",
                layer.name
            )));
        }
        let weights = g.softmax_rows(logits);
        heads.push(g.matmul(weights, vh));
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
    Ok(g.matmul(cat, b.var(layer.wo)))
}

fn ffn(g: &mut Graph, b: &Bound, layer: &AttnLayer, x: Var) -> Var {
    let h = g.matmul(x, b.var(layer.w1));
    let h = g.add_row(h, b.var(layer.b1));
    let h = g.gelu(h);
    let o = g.matmul(h, b.var(layer.w2));
    g.add_row(o, b.var(layer.b2))
}

fn ln(g: &mut Graph, b: &Bound, gamma: ParamId, beta: ParamId, x: Var, eps: f64) -> Var {
    g.layer_norm(x, b.var(gamma), b.var(beta), eps)
}

/// One sequential block: `Z = LN(resid + Attn(q, kv))`, `Z' = LN(Z + FFN(Z))`.
fn sequential_block(
    g: &mut Graph,
    b: &Bound,
    layer: &AttnLayer,
    hp: &HyperParams,
    q: Var,
    kv: Var,
    resid: Var,
) -> Result<Var> {
    let a = attention(g, b, layer, hp, q, kv)?;
    let z = g.add(resid, a);
    let z = ln(g, b, layer.ln1_g, layer.ln1_b, z, hp.ln_eps);
    let f = ffn(g, b, layer, z);
    let z2 = g.add(z, f);
    Ok(ln(g, b, layer.ln2_g, layer.ln2_b, z2, hp.ln_eps))
}

/// Dual feature alignment of `other` (visit or surrounding) with the address
/// stream. Layer 1 queries with `other`; later layers query with the address
/// features over the previous layer's output.
pub fn dfa_forward(
    g: &mut Graph,
    b: &Bound,
    layers: &[AttnLayer],
    hp: &HyperParams,
    other: Var,
    addr: Var,
) -> Result<Var> {
    let mut z = sequential_block(g, b, &layers[0], hp, other, addr, addr)?;
    for layer in &layers[1..] {
        z = sequential_block(g, b, layer, hp, addr, z, z)?;
    }
    Ok(z)
}

/// Semantic feature fusion; returns `(E^LLM, ω)` with `ω` of shape `n×2`.
pub fn sff_forward(
    g: &mut Graph,
    b: &Bound,
    w1: ParamId,
    w2: ParamId,
    e_av: Var,
    e_as: Var,
) -> (Var, Var) {
    let h_av = g.matmul(e_av, b.var(w1));
    let h_as = g.matmul(e_as, b.var(w1));
    let cat_av = g.concat_cols(&[h_av, h_as]);
    let cat_as = g.concat_cols(&[h_as, h_av]);
    let act_av = g.leaky_relu(cat_av, LEAKY_SLOPE);
    let act_as = g.leaky_relu(cat_as, LEAKY_SLOPE);
    let theta_av = g.matmul(act_av, b.var(w2));
    let theta_as = g.matmul(act_as, b.var(w2));
    let theta = g.concat_cols(&[theta_av, theta_as]);
    let omega = g.softmax_rows(theta);
    let w_av = g.slice_cols(omega, 0, 1);
    let w_as = g.slice_cols(omega, 1, 1);
    let part_av = g.mul_col(e_av, w_av);
    let part_as = g.mul_col(e_as, w_as);
    (g.add(part_av, part_as), omega)
}

/// Cross attention fusion of semantic features into base embeddings.
pub fn caf_forward(
    g: &mut Graph,
    b: &Bound,
    layers: &[AttnLayer],
    hp: &HyperParams,
    e_llm: Var,
    e_poi: Var,
) -> Result<Var> {
    let mut x = e_poi;
    for layer in layers {
        x = if hp.paf_parallel {
            let normed = ln(g, b, layer.ln1_g, layer.ln1_b, x, hp.ln_eps);
            let a = attention(g, b, layer, hp, e_llm, normed)?;
            let f = ffn(g, b, layer, normed);
            let s = g.add(x, a);
            g.add(s, f)
        } else {
            sequential_block(g, b, layer, hp, e_llm, x, x)?
        };
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub tilde_v: Var,
    pub tilde_a: Var,
    pub tilde_s: Var,
    pub e_av: Var,
    pub e_as: Var,
    pub e_llm: Var,
    pub omega: Var,
    pub e_fuse: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardValues {
    pub tilde_v: Matrix,
    pub tilde_a: Matrix,
    pub tilde_s: Matrix,
    pub e_av: Matrix,
    pub e_as: Matrix,
    pub e_llm: Matrix,
    pub omega: Matrix,
    pub e_fuse: Matrix,
}

/// Features of one batch, `n×D` each, rows aligned with `e_poi`.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub ev: Matrix,
    pub ea: Matrix,
    pub es: Matrix,
    pub e_poi: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancerModel {
    pub hp: HyperParams,
    pub params: ParamStore,
    proj_v: ParamId,
    proj_a: ParamId,
    proj_s: ParamId,
    dfa_av: Vec<AttnLayer>,
    dfa_as: Vec<AttnLayer>,
    sff_w1: ParamId,
    sff_w2: ParamId,
    caf: Vec<AttnLayer>,
}

impl EnhancerModel {
    /// Fan-in scaled uniform weights, unit layer-norm gains, zero biases.
    pub fn new(hp: HyperParams, seed: u64) -> Result<Self> {
        hp.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, r, c, init) in layout(&hp) {
            store.add(name, init_matrix(r, c, init, &mut rng));
        }
        Self::from_params(hp, store)
    }

    /// Wraps an existing parameter store, checking every tensor's presence
    /// and shape against the hyperparameters.
    pub fn from_params(hp: HyperParams, params: ParamStore) -> Result<Self> {
        hp.validate()?;
        let expected = layout(&hp);
        if expected.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, r, c, _) in &expected {
            let m = params.get(lookup(&params, name)?);
            if m.shape() != (*r, *c) {
                return Err(Error::Shape(format!(
                    "`{name}` is {:?}, expected {:?}",
                    m.shape(),
                    (r, c)
                )));
            }
            if !m.is_finite() {
                return Err(Error::Numeric(format!("`{name}` has non-finite entries")));
            }
        }
        let stack = |prefix: &str, n: usize, mq: bool| -> Result<Vec<AttnLayer>> {
            (0..n)
                .map(|k| resolve_layer(&params, &format!("{prefix}.{k}"), mq))
                .collect()
        };
        Ok(EnhancerModel {
            proj_v: lookup(&params, "proj_v")?,
            proj_a: lookup(&params, "proj_a")?,
            proj_s: lookup(&params, "proj_s")?,
            dfa_av: stack("dfa_av", hp.l1, false)?,
            dfa_as: stack("dfa_as", hp.l1, false)?,
            sff_w1: lookup(&params, "sff.w1")?,
            sff_w2: lookup(&params, "sff.w2")?,
            caf: stack("caf", hp.l2, true)?,
            hp,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn dfa_av_layers(&self) -> &[AttnLayer] {
        &self.dfa_av
    }

    pub fn dfa_as_layers(&self) -> &[AttnLayer] {
        &self.dfa_as
    }

    pub fn caf_layers(&self) -> &[AttnLayer] {
        &self.caf
    }

    pub fn proj_ids(&self) -> (ParamId, ParamId, ParamId) {
        (self.proj_v, self.proj_a, self.proj_s)
    }

    pub fn sff_ids(&self) -> (ParamId, ParamId) {
        (self.sff_w1, self.sff_w2)
    }

    fn check_inputs(&self, x: &BatchInputs) -> Result<()> {
        let n = x.e_poi.rows();
        for (label, m) in [("visit", &x.ev), ("address", &x.ea), ("surrounding", &x.es)] {
            if m.cols() != self.hp.feature_dim {
                return Err(Error::Shape(format!(
                    "{label} features have dimension {}, model expects {}",
                    m.cols(),
                    self.hp.feature_dim
                )));
            }
            if m.rows() != n {
                return Err(Error::Shape(format!("{label} features have {} rows, base has {n}", m.rows())));
            }
        }
        if x.e_poi.cols() != self.hp.d {
            return Err(Error::Shape(format!(
                "base embeddings have dimension {}, model expects d = {}",
                x.e_poi.cols(),
                self.hp.d
            )));
        }
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        Ok(())
    }

    /// Builds the full forward pass on `g` with parameters already bound.
    pub fn forward_graph(&self, g: &mut Graph, b: &Bound, x: &BatchInputs) -> Result<ForwardVars> {
        self.check_inputs(x)?;
        let ev = g.constant(x.ev.clone());
        let ea = g.constant(x.ea.clone());
        let es = g.constant(x.es.clone());
        let e_poi = g.constant(x.e_poi.clone());
        let tilde_v = g.matmul(ev, b.var(self.proj_v));
        let tilde_a = g.matmul(ea, b.var(self.proj_a));
        let tilde_s = g.matmul(es, b.var(self.proj_s));
        let e_av = dfa_forward(g, b, &self.dfa_av, &self.hp, tilde_v, tilde_a)?;
        let e_as = dfa_forward(g, b, &self.dfa_as, &self.hp, tilde_s, tilde_a)?;
        let (e_llm, omega) = sff_forward(g, b, self.sff_w1, self.sff_w2, e_av, e_as);
        let e_fuse = caf_forward(g, b, &self.caf, &self.hp, e_llm, e_poi)?;
        Ok(ForwardVars {
            tilde_v,
            tilde_a,
            tilde_s,
            e_av,
            e_as,
            e_llm,
            omega,
            e_fuse,
        })
    }

    /// Inference forward pass over one batch.
    pub fn forward(&self, x: &BatchInputs) -> Result<ForwardValues> {
        let mut g = Graph::new();
        let b = self.params.attach(&mut g, false);
        let v = self.forward_graph(&mut g, &b, x)?;
        let out = ForwardValues {
            tilde_v: g.value(v.tilde_v).clone(),
            tilde_a: g.value(v.tilde_a).clone(),
            tilde_s: g.value(v.tilde_s).clone(),
            e_av: g.value(v.e_av).clone(),
            e_as: g.value(v.e_as).clone(),
            e_llm: g.value(v.e_llm).clone(),
            omega: g.value(v.omega).clone(),
            e_fuse: g.value(v.e_fuse).clone(),
        };
        if !out.e_fuse.is_finite() {
            return Err(Error::Numeric("non-finite fused embeddings".into()));
        }
        Ok(out)
    }

    /// Linear maps of the three feature matrices to width `d`.
    pub fn project(&self, ev: &Matrix, ea: &Matrix, es: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        for m in [ev, ea, es] {
            if m.cols() != self.hp.feature_dim {
                return Err(Error::Shape(format!(
                    "feature dimension {} does not match model D = {}",
                    m.cols(),
                    self.hp.feature_dim
                )));
            }
        }
        Ok((
            ev.matmul(self.params.get(self.proj_v)),
            ea.matmul(self.params.get(self.proj_a)),
            es.matmul(self.params.get(self.proj_s)),
        ))
    }
}

/// Stacks the three feature views of `ids` into `n×D` matrices.
pub fn feature_matrices(
    bundles: &BTreeMap<PoiId, FeatureBundle>,
    ids: &[PoiId],
) -> Result<(Matrix, Matrix, Matrix)> {
    let dim = ids
        .first()
        .and_then(|id| bundles.get(id))
        .map(|b| b.dim())
        .unwrap_or(0);
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for id in ids {
        let b = bundles
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no features for poi {id}")))?;
        for (buf, fv) in out.iter_mut().zip([&b.e_visit, &b.e_address, &b.e_surrounding]) {
            if fv.values.len() != dim {
                return Err(Error::Shape(format!("poi {id}: feature dimension {}", fv.values.len())));
            }
            buf.extend(fv.values.iter().map(|&v| v as f64));
        }
    }
    let [v, a, s] = out;
    let n = ids.len();
    Ok((Matrix::new(n, dim, v), Matrix::new(n, dim, a), Matrix::new(n, dim, s)))
}

#[derive(Clone, Debug)]
pub struct EnhanceOutput {
    pub fused: EmbeddingMatrix,
    /// POIs with features but no base embedding.
    pub skipped: Vec<PoiId>,
}

/// Runs the model over every POI with features, in ascending id order and
/// fixed chunks of `chunk_size`.
pub fn enhance(
    model: &EnhancerModel,
    bundles: &BTreeMap<PoiId, FeatureBundle>,
    base: &EmbeddingMatrix,
    chunk_size: usize,
    skip_missing: bool,
) -> Result<EnhanceOutput> {
    if chunk_size == 0 {
        return Err(Error::config("chunk_size", "must be at least 1"));
    }
    let index = base.index();
    let (ids, skipped): (Vec<PoiId>, Vec<PoiId>) = bundles.keys().partition(|id| index.contains_key(id));
    if !skipped.is_empty() && !skip_missing {
        return Err(Error::invalid(format!(
            "{} POIs have features but no base embedding (first: {})",
            skipped.len(),
            skipped[0]
        )));
    }
    if ids.is_empty() {
        return Err(Error::invalid("no POI has both features and a base embedding"));
    }
    let chunks: Vec<&[PoiId]> = ids.chunks(chunk_size).collect();
    let results: Vec<Result<Matrix>> = chunks
        .par_iter()
        .map(|chunk| {
            let (ev, ea, es) = feature_matrices(bundles, chunk)?;
            let e_poi = base.gather(chunk).expect("filtered to indexed ids");
            Ok(model.forward(&BatchInputs { ev, ea, es, e_poi })?.e_fuse)
        })
        .collect();
    let mut data = Vec::with_capacity(ids.len() * model.hp.d);
    for r in results {
        data.extend(r?.into_data());
    }
    let rows = Matrix::new(ids.len(), model.hp.d, data);
    Ok(EnhanceOutput {
        fused: EmbeddingMatrix::new(EmbeddingRole::Fused, ids, rows)?,
        skipped,
    })
}
