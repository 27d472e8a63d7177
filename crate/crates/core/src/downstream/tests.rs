use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{CheckinRecord, Dataset, Poi, Splits};
use crate::embedding::EmbeddingRole;
use crate::tensor::Matrix;

const T0: i64 = 1_333_476_000;

fn pois(n: u32, categories: u32) -> BTreeMap<PoiId, Poi> {
    (0..n)
        .map(|i| {
            (
                i,
                Poi {
                    id: i,
                    name: format!("p{i}"),
                    category: format!("cat{}", i % categories),
                    lon: 0.0,
                    lat: 0.0,
                },
            )
        })
        .collect()
}

fn seq(user: &str, visits: &[(PoiId, i64)]) -> CheckinSequence {
    CheckinSequence {
        user: user.into(),
        records: visits
            .iter()
            .map(|&(p, t)| CheckinRecord {
                user: user.into(),
                poi_id: p,
                timestamp: t,
                tz_offset_minutes: 0,
            })
            .collect(),
    }
}

fn hourly(user: &str, ids: &[PoiId]) -> CheckinSequence {
    let visits: Vec<(PoiId, i64)> = ids.iter().enumerate().map(|(i, &p)| (p, T0 + 3600 * i as i64)).collect();
    seq(user, &visits)
}

fn random_embeddings(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingMatrix::new(
        EmbeddingRole::BasePoi,
        (0..n as PoiId).collect(),
        Matrix::uniform(n, d, 1.0, &mut rng),
    )
    .unwrap()
}

fn small_cfg() -> TaskConfig {
    TaskConfig {
        lstm_hidden: 24,
        lstm_layers: 2,
        epochs: 40,
        lr_rec: 1e-2,
        lr_other: 1e-2,
        batch_size: 8,
        ..TaskConfig::default()
    }
}

#[test]
fn defaults_and_validation() {
    let cfg = TaskConfig::default();
    assert_eq!((cfg.lstm_hidden, cfg.lstm_layers, cfg.epochs), (512, 2, 100));
    assert_eq!((cfg.lr_rec, cfg.lr_other, cfg.max_slice), (1e-3, 1e-4, 128));
    assert_eq!((cfg.flow_window_hours, cfg.min_flow_len), (1, 6));
    cfg.validate().unwrap();
    for bad in [
        TaskConfig { lstm_hidden: 0, ..cfg.clone() },
        TaskConfig { max_slice: 1, ..cfg.clone() },
        TaskConfig { lr_rec: 0.0, ..cfg.clone() },
        TaskConfig { min_flow_len: 1, ..cfg.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn slicing_cuts_in_order_and_drops_short_tails() {
    let long: Vec<PoiId> = (0..300).map(|i| i % 7).collect();
    let out = slice_sequences(&[hourly("u", &long)], 128);
    assert_eq!(out.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![128, 128, 44]);
    let flat: Vec<PoiId> = out.iter().flat_map(|s| s.poi_ids()).collect();
    assert_eq!(flat, long);

    let short: Vec<PoiId> = (0..100).collect();
    let out = slice_sequences(&[hourly("u", &short)], 128);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].len(), 100);

    assert_eq!(slice_sequences(&[hourly("u", &[1; 129])], 128).len(), 1);
}

#[test]
fn slicing_conserves_records_minus_dropped_tails() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seqs: Vec<CheckinSequence> = (0..200)
        .map(|u| {
            let len = rng.gen_range(1..400);
            hourly(&u.to_string(), &vec![0; len])
        })
        .collect();
    let max = 17;
    let out = slice_sequences(&seqs, max);
    let before: usize = seqs.iter().map(|s| s.len()).sum();
    let after: usize = out.iter().map(|s| s.len()).sum();
    let dropped: usize = seqs.iter().filter(|s| s.len() % max == 1).count();
    assert_eq!(after, before - dropped);
    assert!(out.iter().all(|s| (2..=max).contains(&s.len())));
}

#[test]
fn hit_at_k_contract() {
    assert_eq!(hit_at_k(&[4, 1, 2], 4, 1), 1);
    assert_eq!(hit_at_k(&[0, 1, 2, 3, 4, 9], 9, 5), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut h1, mut h5) = (0u32, 0u32);
    for _ in 0..1000 {
        let mut ranked: Vec<PoiId> = (0..20).collect();
        rand::seq::SliceRandom::shuffle(ranked.as_mut_slice(), &mut rng);
        let truth = rng.gen_range(0..20);
        let (a, b) = (hit_at_k(&ranked, truth, 1), hit_at_k(&ranked, truth, 5));
        assert!(a <= b);
        h1 += u32::from(a);
        h5 += u32::from(b);
    }
    assert!(h1 <= h5);
}

#[test]
fn pairwise_distance_cases() {
    let emb = EmbeddingMatrix::new(
        EmbeddingRole::Fused,
        vec![1, 2, 3],
        Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 0.0]]),
    )
    .unwrap();
    assert_eq!(pairwise_distance(&emb, 1, 2).unwrap(), 5.0);
    assert_eq!(pairwise_distance(&emb, 1, 3).unwrap(), 0.0);
    let err = pairwise_distance(&emb, 1, 42).unwrap_err().to_string();
    assert!(err.contains("42"), "{err}");

    let emb = random_embeddings(10, 7, 1);
    for a in 0..10 {
        for b in 0..10 {
            let (ra, rb) = (emb.row_of(a).unwrap(), emb.row_of(b).unwrap());
            let mut acc = 0.0;
            for k in 0..7 {
                acc += (ra[k] - rb[k]) * (ra[k] - rb[k]);
            }
            assert!((pairwise_distance(&emb, a, b).unwrap() - acc.sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn nmi_reference_values() {
    let a = [0, 0, 1, 1];
    let b = [0, 0, 1, 2];
    // 2 ln2 / (ln2 + 1.5 ln2)
    assert!((nmi(&a, &b) - 0.8).abs() < 1e-12);
    assert_eq!(nmi(&[0, 0, 1, 1, 2], &[5, 5, 3, 3, 1]), 1.0);
    let c = [0, 1, 0, 1];
    assert!(nmi(&a, &c).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let x: Vec<usize> = (0..40).map(|_| rng.gen_range(0..4)).collect();
        let y: Vec<usize> = (0..40).map(|_| rng.gen_range(0..5)).collect();
        let v = nmi(&x, &y);
        assert!((0.0..=1.0).contains(&v));
        assert!((v - nmi(&y, &x)).abs() < 1e-12);
    }
}

#[test]
fn one_hot_category_embeddings_cluster_perfectly() {
    let ds = Dataset::new(pois(60, 6), vec![]).unwrap();
    let rows = Matrix::from_fn(60, 6, |i, j| if i % 6 == j { 1.0 } else { 0.0 });
    let emb = EmbeddingMatrix::new(EmbeddingRole::BasePoi, ds.poi_ids(), rows).unwrap();
    let r = eval_cluster(&emb, &ds, &TaskConfig::default()).unwrap();
    assert_eq!(r.metric("nmi"), Some(1.0));
}

#[test]
fn random_embeddings_cluster_near_chance() {
    let ds = Dataset::new(pois(500, 10), vec![]).unwrap();
    let emb = random_embeddings(500, 16, 11);
    let r = eval_cluster(&emb, &ds, &TaskConfig::default()).unwrap();
    let v = r.metric("nmi").unwrap();
    assert!(v < 0.1, "nmi {v}");
    let again = eval_cluster(&emb, &ds, &TaskConfig::default()).unwrap();
    assert_eq!(r, again);
}

#[test]
fn clustering_rejects_more_clusters_than_points() {
    let ds = Dataset::new(pois(4, 4), vec![]).unwrap();
    let emb = EmbeddingMatrix::new(EmbeddingRole::BasePoi, vec![0, 1, 2], Matrix::zeros(3, 2)).unwrap();
    assert!(eval_cluster(&emb, &ds, &TaskConfig::default()).is_err());
    assert!(kmeans(&Matrix::zeros(3, 2), 4, 1, 0).is_err());
}

#[test]
fn macro_f1_hand_case() {
    // both classes: tp 1, fp 1, fn 1
    let truth = [0, 0, 1, 1];
    let pred = [0, 1, 0, 1];
    assert!((macro_f1(&truth, &pred) - 0.5).abs() < 1e-12);
    assert_eq!(macro_f1(&[2, 2], &[2, 2]), 1.0);
    assert_eq!(macro_f1(&[0, 1], &[1, 2]), 0.0);
}

fn flow_dataset(counts: &[(PoiId, Vec<u32>)]) -> Dataset {
    let mut visits = Vec::new();
    for (p, cs) in counts {
        for (h, &c) in cs.iter().enumerate() {
            for k in 0..c {
                visits.push((*p, T0 + 3600 * h as i64 + i64::from(k)));
            }
        }
    }
    visits.sort_by_key(|v| v.1);
    let n = counts.iter().map(|(p, _)| p + 1).max().unwrap_or(1);
    Dataset::new(pois(n, 1), vec![seq("u", &visits)]).unwrap()
}

#[test]
fn flow_run_extraction() {
    let ds = flow_dataset(&[(0, vec![0, 1, 2, 3, 1, 2, 1, 0]), (1, vec![0; 8])]);
    let set = build_flow_series(&ds, &TaskConfig::default()).unwrap();
    assert_eq!(set.series.len(), 1);
    let s = &set.series[0];
    assert_eq!(s.poi_id, 0);
    assert_eq!(s.counts, vec![1, 2, 3, 1, 2, 1]);
    // T0 is 18:00 UTC; the run starts one hour later.
    assert_eq!(s.start_hour, 19);
    let observed = [1.0, 2.0, 3.0, 1.0, 2.0];
    let mean = 1.8;
    let std = (observed.iter().map(|v: &f64| (v - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
    assert!((s.mean - mean).abs() < 1e-12 && (s.std - std).abs() < 1e-12);
    assert!((s.values[5] - (1.0 - mean) / std).abs() < 1e-12);

    let flat = flow_dataset(&[(0, vec![2; 7])]);
    let set = build_flow_series(&flat, &TaskConfig::default()).unwrap();
    assert!(set.series.is_empty());
    assert_eq!(set.dropped_constant, 1);
}

#[test]
fn flow_runs_match_a_dense_scanner() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let hours = 200;
    let counts: Vec<(PoiId, Vec<u32>)> = (0..15)
        .map(|p| {
            let rate: f64 = rng.gen_range(0.3..4.0);
            let cs = (0..hours)
                .map(|_| {
                    // Poisson by inversion.
                    let (mut k, mut prob, u) = (0u32, (-rate).exp(), rng.gen::<f64>());
                    let mut cdf = prob;
                    while u > cdf {
                        k += 1;
                        prob *= rate / f64::from(k);
                        cdf += prob;
                    }
                    k
                })
                .collect();
            (p, cs)
        })
        .collect();
    let ds = flow_dataset(&counts);
    let cfg = TaskConfig::default();
    let set = build_flow_series(&ds, &cfg).unwrap();

    let mut expected = Vec::new();
    for (p, cs) in &counts {
        let mut h = 0;
        while h < cs.len() {
            if cs[h] == 0 {
                h += 1;
                continue;
            }
            let start = h;
            while h < cs.len() && cs[h] > 0 {
                h += 1;
            }
            let run = cs[start..h].to_vec();
            let head = &run[..run.len() - 1];
            let constant = head.iter().all(|&c| c == head[0]);
            if run.len() > 5 && !constant {
                expected.push((*p, start, run));
            }
        }
    }
    let got: Vec<(PoiId, usize, Vec<u32>)> = set
        .series
        .iter()
        .map(|s| (s.poi_id, (s.start_window - T0 / 3600) as usize, s.counts.clone()))
        .collect();
    assert_eq!(got, expected);
}

fn flow_set(n: usize, pattern: impl Fn(usize) -> Vec<u32>) -> FlowSeriesSet {
    let counts: Vec<(PoiId, Vec<u32>)> = (0..n)
        .map(|p| {
            let mut cs = vec![0];
            cs.extend(pattern(p));
            cs.push(0);
            (p as PoiId, cs)
        })
        .collect();
    build_flow_series(&flow_dataset(&counts), &TaskConfig::default()).unwrap()
}

#[test]
fn flow_needs_ten_series() {
    let set = flow_set(9, |_| vec![1, 2, 3, 1, 2, 3]);
    assert_eq!(set.series.len(), 9);
    assert!(eval_flow(&random_embeddings(9, 4, 0), &set, &small_cfg()).is_err());
}

#[test]
fn identical_series_are_learned_and_metrics_are_consistent() {
    let set = flow_set(12, |_| vec![1, 3, 2, 4, 1, 3, 2]);
    let cfg = TaskConfig {
        lstm_hidden: 12,
        lstm_layers: 1,
        epochs: 150,
        ..small_cfg()
    };
    let emb = random_embeddings(12, 4, 5);
    let r = eval_flow(&emb, &set, &cfg).unwrap();
    let (mae, rmse) = (r.metric("mae").unwrap(), r.metric("rmse").unwrap());
    assert!(rmse >= mae);
    assert!(mae < 0.05, "mae {mae}");

    // Naive floor: |target z-score| of the shared series.
    let s = &set.series[0];
    assert!((r.metric("naive_mae").unwrap() - s.values[6].abs()).abs() < 1e-12);
}

#[test]
fn flow_naive_floor_matches_analytic_mean_prediction() {
    let set = flow_set(20, |p| (0..8).map(|k| 1 + ((p * 3 + k * 5) % 7) as u32).collect());
    let cfg = TaskConfig {
        lstm_hidden: 6,
        lstm_layers: 1,
        epochs: 2,
        ..small_cfg()
    };
    let r = eval_flow(&random_embeddings(20, 3, 1), &set, &cfg).unwrap();
    assert!(r.metric("rmse").unwrap() >= r.metric("mae").unwrap());

    let mut order: Vec<usize> = (0..20).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let test = &order[14..];
    let floor: f64 = test
        .iter()
        .map(|&i| {
            let s = &set.series[i];
            let last = *s.counts.last().unwrap() as f64;
            ((last - s.mean) / s.std).abs()
        })
        .sum::<f64>()
        / test.len() as f64;
    assert!((r.metric("naive_mae").unwrap() - floor).abs() < 1e-12);
}

fn splits_of(pois_n: u32, train: Vec<CheckinSequence>, test: Vec<CheckinSequence>) -> Splits {
    let p = pois(pois_n, 3);
    Splits {
        train: Dataset::new(p.clone(), train).unwrap(),
        val: Dataset::new(p.clone(), vec![]).unwrap(),
        test: Dataset::new(p, test).unwrap(),
    }
}

fn successor_walks(n: u32, count: usize, len: usize, seed: u64, user: &str) -> Vec<CheckinSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut cur = rng.gen_range(0..n);
            let ids: Vec<PoiId> = (0..len)
                .map(|_| {
                    let v = cur;
                    cur = (cur * 5 + 3) % n;
                    v
                })
                .collect();
            hourly(user, &ids)
        })
        .collect()
}

#[test]
fn recommendation_memorizes_a_deterministic_successor() {
    let n = 12;
    let splits = splits_of(
        n,
        successor_walks(n, 40, 8, 1, "a"),
        successor_walks(n, 10, 8, 2, "b"),
    );
    let emb = random_embeddings(n as usize, 8, 3);
    let before = emb.clone();
    let r = eval_recommendation(&emb, &splits, &small_cfg()).unwrap();
    assert_eq!(emb, before);
    let (h1, h5) = (r.metric("hit@1").unwrap(), r.metric("hit@5").unwrap());
    assert!(h1 <= h5);
    assert!(h1 >= 0.95, "hit@1 {h1}");
    assert_eq!(r.counts["predictions"], 70);
}

#[test]
fn recommendation_scores_pois_unseen_in_training() {
    let splits = splits_of(
        6,
        vec![hourly("a", &[0, 1, 2, 0, 1, 2])],
        vec![hourly("b", &[5, 4, 5, 4])],
    );
    let cfg = TaskConfig {
        epochs: 2,
        ..small_cfg()
    };
    let r = eval_recommendation(&random_embeddings(6, 4, 0), &splits, &cfg).unwrap();
    assert_eq!(r.counts["predictions"], 3);
    r.validate().unwrap();

    let partial = EmbeddingMatrix::new(EmbeddingRole::BasePoi, vec![0, 1, 2], Matrix::zeros(3, 2)).unwrap();
    let err = eval_recommendation(&partial, &splits, &cfg).unwrap_err().to_string();
    assert!(err.contains("poi 3"), "{err}");
}

#[test]
fn single_user_classification_is_trivially_exact() {
    let splits = splits_of(
        5,
        vec![hourly("a", &[0, 1, 2]), hourly("a", &[2, 3])],
        vec![hourly("a", &[4, 0]), hourly("z", &[1, 2])],
    );
    let cfg = TaskConfig {
        epochs: 1,
        ..small_cfg()
    };
    let r = eval_classification(&random_embeddings(5, 4, 0), &splits, &cfg).unwrap();
    assert_eq!(r.metric("acc"), Some(1.0));
    assert_eq!(r.metric("macro_f1"), Some(1.0));
    assert_eq!(r.counts["excluded_users"], 1);
    assert_eq!(r.counts["excluded_slices"], 1);
}

#[test]
fn users_with_disjoint_vocabularies_are_separable() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut walk = |user: &str, lo: u32| {
        let ids: Vec<PoiId> = (0..6).map(|_| rng.gen_range(lo..lo + 5)).collect();
        hourly(user, &ids)
    };
    let mut all = Vec::new();
    for _ in 0..30 {
        all.push(walk("a", 0));
        all.push(walk("b", 5));
    }
    let ds = Dataset::new(pois(10, 2), all).unwrap();
    let splits = classification_splits(&ds, 128, (2, 1, 7), 0).unwrap();
    assert_eq!(splits.train.sequences.len(), 42);
    assert_eq!(splits.test.sequences.len(), 12);
    let r = eval_classification(&random_embeddings(10, 6, 2), &splits, &small_cfg()).unwrap();
    let acc = r.metric("acc").unwrap();
    assert!(acc >= 0.9, "acc {acc}");
    assert!((0.0..=1.0).contains(&r.metric("macro_f1").unwrap()));
}

#[test]
fn report_json_round_trip_and_range_checks() {
    let mut r = MetricReport::new("poi_recommendation", "emb.txt");
    r.metrics.insert("hit@1".into(), 0.2);
    r.metrics.insert("hit@5".into(), 0.4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    r.save(&path).unwrap();
    assert_eq!(MetricReport::load(&path).unwrap(), r);
    r.metrics.insert("hit@1".into(), 0.5);
    assert!(r.validate().is_err());
}
