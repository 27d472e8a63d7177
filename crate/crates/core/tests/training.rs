mod common;

use std::collections::BTreeSet;

use poi_enhancer::baselines::random_embeddings;
use poi_enhancer::corpus::{split_sequences, PoiId};
use poi_enhancer::enhancer::checkpoint::{load_checkpoint, CheckpointMeta};
use poi_enhancer::enhancer::{enhance, EnhancerModel, HyperParams};
use poi_enhancer::sampling::{BatchSampler, PositiveSets, SamplerConfig};
use poi_enhancer::training::{read_train_log, TrainConfig, TrainOutput, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT};

fn hp(feature_dim: usize) -> HyperParams {
    HyperParams {
        d: 16,
        d_prime: 8,
        heads: 2,
        d_h: 8,
        l1: 1,
        l2: 1,
        feature_dim,
        ffn_mult: 2,
        ..HyperParams::default()
    }
}

#[test]
fn loss_falls_over_ten_epochs_and_artifacts_are_written() {
    let ds = common::synthetic_dataset(200, 8, 80, 25, 4);
    let splits = split_sequences(&ds, (2, 1, 7), 0).unwrap();
    let attrs = common::attributes(&ds);
    let dir = tempfile::tempdir().unwrap();
    let bundles = common::structured_features(&ds, &attrs, 24, 0.1, &dir.path().join("cache"));
    let base = random_embeddings(&ds, 16, 2).unwrap();
    let universe: BTreeSet<PoiId> = ds.pois.keys().copied().collect();
    let scfg = SamplerConfig { m: 10, seed: 1, ..SamplerConfig::default() };
    let pos = PositiveSets::build(&ds, &splits.train.sequences, &attrs, &universe, &scfg).unwrap();
    let sampler = BatchSampler::new(pos, &universe, &scfg).unwrap();
    let tcfg = TrainConfig { epochs: 10, max_batches_per_epoch: Some(60), ..TrainConfig::default() };
    let mut trainer = Trainer::new(EnhancerModel::new(hp(24), 3).unwrap(), tcfg, &bundles, &base).unwrap();
    let out = TrainOutput { dir: dir.path().to_path_buf(), meta: CheckpointMeta { seed: 3, ..Default::default() } };
    let log = trainer.fit(&sampler, Some(&out)).unwrap();
    assert_eq!(log.len(), 10);
    assert!(log[9].total < log[0].total, "epoch 1 {} epoch 10 {}", log[0].total, log[9].total);
    let logged = read_train_log(&dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(logged.len(), log.len());
    for (a, b) in logged.iter().zip(&log) {
        assert_eq!(a.epoch, b.epoch);
        assert!((a.total - b.total).abs() <= 1e-12 * b.total.abs());
    }

    let (last, meta) = load_checkpoint(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(meta.epoch, Some(10));
    assert_eq!(last.hp, trainer.model.hp);
    let (_, best_meta) = load_checkpoint(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    let best_epoch = log
        .iter()
        .min_by(|a, b| a.total.total_cmp(&b.total))
        .unwrap()
        .epoch;
    assert_eq!(best_meta.epoch, Some(best_epoch));

    let fused = enhance(&last, &bundles, &base, 64, false).unwrap();
    assert_eq!(fused.fused.len(), ds.num_pois());
    assert_eq!(fused.fused.dim(), 16);
}

#[test]
fn same_seed_gives_identical_traces_and_other_seeds_differ() {
    let ds = common::synthetic_dataset(60, 4, 20, 15, 5);
    let attrs = common::attributes(&ds);
    let dir = tempfile::tempdir().unwrap();
    let bundles = common::structured_features(&ds, &attrs, 12, 0.1, dir.path());
    let base = random_embeddings(&ds, 16, 2).unwrap();
    let universe: BTreeSet<PoiId> = ds.pois.keys().copied().collect();
    let trace = |model_seed: u64| -> Vec<u64> {
        let scfg = SamplerConfig { m: 6, seed: 8, ..SamplerConfig::default() };
        let pos = PositiveSets::build(&ds, &ds.sequences, &attrs, &universe, &scfg).unwrap();
        let sampler = BatchSampler::new(pos, &universe, &scfg).unwrap();
        let mut t = Trainer::new(EnhancerModel::new(hp(12), model_seed).unwrap(), TrainConfig::default(), &bundles, &base).unwrap();
        sampler.epoch_batches(0).take(5).map(|b| t.step(&b).unwrap().total.to_bits()).collect()
    };
    assert_eq!(trace(1), trace(1));
    assert_ne!(trace(1), trace(2));
}

#[test]
fn enhancement_output_does_not_depend_on_thread_count() {
    let ds = common::synthetic_dataset(150, 5, 30, 15, 6);
    let attrs = common::attributes(&ds);
    let dir = tempfile::tempdir().unwrap();
    let bundles = common::structured_features(&ds, &attrs, 12, 0.1, dir.path());
    let base = random_embeddings(&ds, 16, 2).unwrap();
    let model = EnhancerModel::new(hp(12), 4).unwrap();
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let one = serial.install(|| enhance(&model, &bundles, &base, 32, false).unwrap());
    let many = enhance(&model, &bundles, &base, 32, false).unwrap();
    assert_eq!(one.fused, many.fused);
}
