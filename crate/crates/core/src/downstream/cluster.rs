use std::collections::BTreeMap;

use log::info;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MetricReport, TaskConfig};
use crate::corpus::Dataset;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAX_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn plus_plus_init(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = data.rows();
    let mut centers = vec![rng.gen_range(0..n)];
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(centers[0]))).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&best) {
            Ok(w) => w.sample(rng),
            // Every point coincides with a center already.
            Err(_) => rng.gen_range(0..n),
        };
        centers.push(next);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(data.row(i), data.row(next)));
        }
    }
    data.select_rows(&centers)
}

fn lloyd(data: &Matrix, mut centroids: Matrix) -> KMeansResult {
    let (n, d) = data.shape();
    let k = centroids.rows();
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for (i, a) in assignment.iter_mut().enumerate() {
            let c = (0..k)
                .map(|c| (c, sq_dist(data.row(i), centroids.row(c))))
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .expect("k >= 1")
                .0;
            changed |= *a != c;
            *a = c;
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, d);
        let mut sizes = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            sizes[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if sizes[c] == 0 {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let far = (0..n)
                    .max_by(|&x, &y| {
                        let dx = sq_dist(data.row(x), centroids.row(assignment[x]));
                        let dy = sq_dist(data.row(y), centroids.row(assignment[y]));
                        dx.total_cmp(&dy)
                    })
                    .expect("n >= 1");
                centroids.row_mut(c).copy_from_slice(data.row(far));
            } else {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / sizes[c] as f64;
                }
            }
        }
    }
    let inertia = assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(data.row(i), centroids.row(c)))
        .sum();
    KMeansResult {
        assignment,
        centroids,
        inertia,
    }
}

/// k-means++ seeding followed by Lloyd iterations, keeping the lowest
/// inertia over `restarts` runs.
pub fn kmeans(data: &Matrix, k: usize, restarts: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 || k > data.rows() {
        return Err(Error::invalid(format!(
            "k-means needs 1 <= k <= N, got k = {k}, N = {}",
            data.rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let init = plus_plus_init(data, k, &mut rng);
        let run = lloyd(data, init);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "label vectors differ in length");
    if a.is_empty() {
        return 0.0;
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0) += 1;
        *ca.entry(x).or_insert(0) += 1;
        *cb.entry(y).or_insert(0) += 1;
    }
    // A one-to-one correspondence of labels is a perfect match.
    if joint.len() == ca.len() && joint.len() == cb.len() {
        return 1.0;
    }
    let (ha, hb) = (entropy(ca.values().copied(), n), entropy(cb.values().copied(), n));
    if ha == 0.0 || hb == 0.0 {
        return 0.0;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    (2.0 * mi / (ha + hb)).clamp(0.0, 1.0)
}

/// Clusters the embeddings of the dataset's POIs into as many clusters as
/// there are categories and scores the clustering against the categories.
pub fn eval_cluster(emb: &EmbeddingMatrix, ds: &Dataset, cfg: &TaskConfig) -> Result<MetricReport> {
    let k = ds.category_vocab.len();
    if k < 2 {
        return Err(Error::invalid(format!("clustering needs at least 2 categories, have {k}")));
    }
    let index = emb.index();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut missing = 0usize;
    for p in ds.pois.values() {
        match index.get(&p.id) {
            Some(&r) => {
                rows.push(r);
                labels.push(ds.category_index(&p.category).expect("category in vocabulary"));
            }
            None => missing += 1,
        }
    }
    if k > rows.len() {
        return Err(Error::invalid(format!(
            "{k} categories but only {} embedded POIs to cluster",
            rows.len()
        )));
    }
    let data = emb.rows.select_rows(&rows);
    let result = kmeans(&data, k, cfg.kmeans_restarts, cfg.seed)?;
    let score = nmi(&result.assignment, &labels);
    info!("clustering {} POIs into {k} clusters: NMI {score:.4}", rows.len());
    let mut report = MetricReport::new("clustering", "");
    report.metrics.insert("nmi".into(), score);
    report.metrics.insert("inertia".into(), result.inertia);
    report.counts.insert("pois".into(), rows.len());
    report.counts.insert("clusters".into(), k);
    report.counts.insert("missing".into(), missing);
    report.validate()?;
    Ok(report)
}
