#![allow(dead_code)]

use std::collections::BTreeMap;

use poi_enhancer::attributes::{derive_all, FixtureGeocoder, PoiAttributes};
use poi_enhancer::corpus::{CheckinRecord, CheckinSequence, Dataset, Poi, PoiId};
use poi_enhancer::extractor::backend::{Pooling, StructuredMockBackend};
use poi_enhancer::extractor::{extract_corpus, FeatureBundle, FeatureCache};
use poi_enhancer::prompts::{generate_prompt, Prompt, PromptKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const T0: i64 = 1_333_476_000;

/// Synthetic city: each category occupies its own neighbourhood and users
/// mostly move between POIs of one category.
pub fn synthetic_dataset(n_pois: u32, n_categories: u32, n_users: usize, seq_len: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pois: BTreeMap<PoiId, Poi> = (0..n_pois)
        .map(|i| {
            let c = i % n_categories;
            // Neighbourhood centres 3 km apart on a line.
            let lat = 40.70 + f64::from(c) * 0.027 + rng.gen_range(-0.002..0.002);
            let lon = -74.00 + rng.gen_range(-0.002..0.002);
            (
                i,
                Poi {
                    id: i,
                    name: format!("Place {i}"),
                    category: format!("Category {c:02}"),
                    lon,
                    lat,
                },
            )
        })
        .collect();
    let by_cat: Vec<Vec<PoiId>> = (0..n_categories)
        .map(|c| (0..n_pois).filter(|i| i % n_categories == c).collect())
        .collect();
    let sequences = (0..n_users)
        .map(|u| {
            let user = format!("user{u:04}");
            let mut cat = rng.gen_range(0..n_categories) as usize;
            let mut t = T0 + rng.gen_range(0..86_400);
            let records = (0..seq_len)
                .map(|_| {
                    if rng.gen_bool(0.15) {
                        cat = rng.gen_range(0..n_categories) as usize;
                    }
                    let poi_id = by_cat[cat][rng.gen_range(0..by_cat[cat].len())];
                    t += rng.gen_range(1800..4 * 3600);
                    CheckinRecord {
                        user: user.clone(),
                        poi_id,
                        timestamp: t,
                        tz_offset_minutes: -240,
                    }
                })
                .collect();
            CheckinSequence { user, records }
        })
        .collect::<Vec<CheckinSequence>>();
    // POIs nobody visited have no attributes; leave them out.
    let used: std::collections::BTreeSet<PoiId> = sequences.iter().flat_map(|s| s.poi_ids()).collect();
    pois.retain(|id, _| used.contains(id));
    Dataset::new(pois, sequences).unwrap()
}

pub fn attributes(ds: &Dataset) -> BTreeMap<PoiId, PoiAttributes> {
    derive_all::<FixtureGeocoder>(ds, None, 0.5).unwrap()
}

pub fn prompts(ds: &Dataset, attrs: &BTreeMap<PoiId, PoiAttributes>) -> Vec<Prompt> {
    ds.pois
        .values()
        .flat_map(|p| PromptKind::ALL.map(|k| generate_prompt(p, &attrs[&p.id], k)))
        .collect()
}

pub fn structured_features(
    ds: &Dataset,
    attrs: &BTreeMap<PoiId, PoiAttributes>,
    dim: usize,
    noise: f64,
    cache_dir: &std::path::Path,
) -> BTreeMap<PoiId, FeatureBundle> {
    let backend = StructuredMockBackend::new(dim, Pooling::LastToken, 7, noise, ds.category_vocab.clone());
    let mut cache = FeatureCache::open(cache_dir).unwrap();
    let out = extract_corpus(&prompts(ds, attrs), &backend, &mut cache, 4).unwrap();
    assert!(out.missing.is_empty());
    out.bundles
}
