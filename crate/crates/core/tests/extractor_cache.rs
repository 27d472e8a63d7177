mod common;

use std::fs;

use poi_enhancer::extractor::backend::{FeatureBackend, Pooling, StructuredMockBackend};
use poi_enhancer::extractor::{extract_corpus, prompt_digest, FeatureCache};
use poi_enhancer::prompts::PromptKind;
use poi_enhancer::tensor::cosine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn warm_cache_skips_the_backend_and_one_deletion_costs_one_call() {
    let ds = common::synthetic_dataset(40, 4, 12, 15, 1);
    let attrs = common::attributes(&ds);
    let prompts = common::prompts(&ds, &attrs);
    let backend = StructuredMockBackend::new(16, Pooling::LastToken, 7, 0.1, ds.category_vocab.clone());
    let dir = tempfile::tempdir().unwrap();

    let mut cache = FeatureCache::open(dir.path()).unwrap();
    let first = extract_corpus(&prompts, &backend, &mut cache, 4).unwrap();
    assert_eq!(first.backend_calls, prompts.len());
    assert!(first.missing.is_empty());

    let mut cache = FeatureCache::open(dir.path()).unwrap();
    let second = extract_corpus(&prompts, &backend, &mut cache, 4).unwrap();
    assert_eq!(second.backend_calls, 0);
    assert_eq!(second.bundles, first.bundles);

    let victim = &prompts[7];
    let id = &backend.descriptor().backend_id;
    fs::remove_file(cache.vector_path(id, &prompt_digest(victim))).unwrap();
    let mut cache = FeatureCache::open(dir.path()).unwrap();
    let third = extract_corpus(&prompts, &backend, &mut cache, 4).unwrap();
    assert_eq!(third.backend_calls, 1);
    assert_eq!(third.bundles, first.bundles);
}

#[test]
fn another_backend_does_not_share_entries() {
    let ds = common::synthetic_dataset(20, 2, 6, 12, 2);
    let attrs = common::attributes(&ds);
    let prompts = common::prompts(&ds, &attrs);
    let dir = tempfile::tempdir().unwrap();
    let a = StructuredMockBackend::new(8, Pooling::LastToken, 7, 0.1, ds.category_vocab.clone());
    let b = StructuredMockBackend::new(8, Pooling::MeanPool, 7, 0.1, ds.category_vocab.clone());
    let mut cache = FeatureCache::open(dir.path()).unwrap();
    extract_corpus(&prompts, &a, &mut cache, 2).unwrap();
    let out = extract_corpus(&prompts, &b, &mut cache, 2).unwrap();
    assert_eq!(out.backend_calls, prompts.len());
}

#[test]
fn structured_mock_separates_categories() {
    let ds = common::synthetic_dataset(120, 6, 30, 20, 3);
    let attrs = common::attributes(&ds);
    let dir = tempfile::tempdir().unwrap();
    let bundles = common::structured_features(&ds, &attrs, 32, 0.1, dir.path());
    let ids: Vec<_> = bundles.keys().copied().collect();
    let cat = |id: &u32| ds.pois[id].category.clone();
    let vec_of = |id: &u32| -> Vec<f64> {
        bundles[id].get(PromptKind::Surrounding).values.iter().map(|&v| f64::from(v)).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut wins = 0;
    for _ in 0..100 {
        let a = ids[rng.gen_range(0..ids.len())];
        let same: Vec<_> = ids.iter().filter(|i| **i != a && cat(i) == cat(&a)).collect();
        let other: Vec<_> = ids.iter().filter(|i| cat(i) != cat(&a)).collect();
        let s = *same[rng.gen_range(0..same.len())];
        let o = *other[rng.gen_range(0..other.len())];
        if cosine(&vec_of(&a), &vec_of(&s)) > cosine(&vec_of(&a), &vec_of(&o)) {
            wins += 1;
        }
    }
    assert_eq!(wins, 100);
}
