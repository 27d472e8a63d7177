//! Multi-view positive sets (sequence-time, geography, function) and
//! contrastive batch assembly.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::grid::GridIndex;
use crate::attributes::{PoiAttributes, VisitPattern};
use crate::corpus::{CheckinSequence, Dataset, Poi, PoiId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SeqTime,
    Geo,
    Func,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::SeqTime, Strategy::Geo, Strategy::Func];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::SeqTime => "seq_time",
            Strategy::Geo => "geo",
            Strategy::Func => "func",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq_time" => Ok(Strategy::SeqTime),
            "geo" => Ok(Strategy::Geo),
            "func" => Ok(Strategy::Func),
            other => Err(Error::invalid(format!("unknown sampling strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Sequence-time window in records.
    pub lambda: usize,
    /// Side of the geography square in km.
    pub side_km: f64,
    /// Batch size: anchor, positive and `m − 2` negatives.
    pub m: usize,
    pub strategies: Vec<Strategy>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            lambda: 2,
            side_km: 0.5,
            m: 64,
            strategies: Strategy::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 3 {
            return Err(Error::config("m", "batch size must be at least 3"));
        }
        if !(self.side_km > 0.0 && self.side_km.is_finite()) {
            return Err(Error::config("side_km", "must be positive"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("strategies", "enable at least one strategy"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub anchor: PoiId,
    pub positive: PoiId,
    pub negatives: Vec<PoiId>,
    /// Strategies that produced the positive pair.
    pub sources: Vec<Strategy>,
}

impl TrainingBatch {
    /// Anchor, positive, then negatives: the row order the losses expect.
    pub fn ids(&self) -> Vec<PoiId> {
        let mut v = Vec::with_capacity(2 + self.negatives.len());
        v.push(self.anchor);
        v.push(self.positive);
        v.extend(&self.negatives);
        v
    }
}

/// POIs of the records within `lambda` positions of record `j` that fall on
/// the same local date. The record at `j` itself is excluded.
pub fn sequence_time_positives(j: usize, seq: &CheckinSequence, lambda: usize) -> BTreeSet<PoiId> {
    let recs = &seq.records;
    let date = recs[j].local_date();
    let lo = j.saturating_sub(lambda);
    let hi = (j + lambda).min(recs.len() - 1);
    (lo..=hi)
        .filter(|&k| k != j && recs[k].local_date() == date)
        .map(|k| recs[k].poi_id)
        .collect()
}

/// Same-category POIs inside the square of side `side_km` around `poi`.
/// `grid` must be built with cells at least `side_km` wide.
pub fn geography_positives(poi: &Poi, grid: &GridIndex, side_km: f64) -> BTreeSet<PoiId> {
    grid.square_neighbors(poi, side_km)
        .into_iter()
        .filter(|p| p.category == poi.category)
        .map(|p| p.id)
        .collect()
}

/// Groups POIs by `(category, visit pattern)`.
pub struct FunctionalIndex {
    groups: HashMap<(String, VisitPattern), Vec<PoiId>>,
    keys: HashMap<PoiId, (String, VisitPattern)>,
}

impl FunctionalIndex {
    pub fn new<'a>(
        pois: impl IntoIterator<Item = &'a Poi>,
        attrs: &BTreeMap<PoiId, PoiAttributes>,
    ) -> Result<Self> {
        let mut groups: HashMap<_, Vec<PoiId>> = HashMap::new();
        let mut keys = HashMap::new();
        for p in pois {
            let a = attrs.get(&p.id).ok_or_else(|| {
                Error::invalid(format!("no attributes for poi {}; derive attributes first", p.id))
            })?;
            let key = (p.category.clone(), a.visit_pattern);
            groups.entry(key.clone()).or_default().push(p.id);
            keys.insert(p.id, key);
        }
        Ok(FunctionalIndex { groups, keys })
    }

    /// POIs other than `poi` sharing its category and visit pattern.
    pub fn positives(&self, poi: PoiId) -> Result<BTreeSet<PoiId>> {
        let key = self
            .keys
            .get(&poi)
            .ok_or_else(|| Error::invalid(format!("poi {poi} is not in the functional index")))?;
        Ok(self.groups[key].iter().copied().filter(|&p| p != poi).collect())
    }
}

pub fn functional_positives(
    poi: &Poi,
    pois: &BTreeMap<PoiId, Poi>,
    attrs: &BTreeMap<PoiId, PoiAttributes>,
) -> Result<BTreeSet<PoiId>> {
    let mine = attrs
        .get(&poi.id)
        .ok_or_else(|| Error::invalid(format!("no attributes for poi {}", poi.id)))?;
    let mut out = BTreeSet::new();
    for p in pois.values() {
        if p.id == poi.id || p.category != poi.category {
            continue;
        }
        let a = attrs
            .get(&p.id)
            .ok_or_else(|| Error::invalid(format!("no attributes for poi {}", p.id)))?;
        if a.visit_pattern == mine.visit_pattern {
            out.insert(p.id);
        }
    }
    Ok(out)
}

/// Union over all occurrences of each POI in `sequences` of its
/// sequence-time positives, keyed by anchor.
pub fn sequence_time_sets(sequences: &[CheckinSequence], lambda: usize) -> BTreeMap<PoiId, BTreeSet<PoiId>> {
    let mut out: BTreeMap<PoiId, BTreeSet<PoiId>> = BTreeMap::new();
    for seq in sequences {
        for (j, r) in seq.records.iter().enumerate() {
            let pos = sequence_time_positives(j, seq, lambda);
            out.entry(r.poi_id).or_default().extend(pos);
        }
    }
    out
}

/// Per-anchor positive sets with the strategies behind each pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PositiveSets {
    pub sets: BTreeMap<PoiId, BTreeMap<PoiId, Vec<Strategy>>>,
}

impl PositiveSets {
    /// Builds `P⁺` for every POI in `universe`. Sequence-time positives come
    /// from `train` only; positives outside `universe` and the anchor itself
    /// are dropped.
    pub fn build(
        ds: &Dataset,
        train: &[CheckinSequence],
        attrs: &BTreeMap<PoiId, PoiAttributes>,
        universe: &BTreeSet<PoiId>,
        cfg: &SamplerConfig,
    ) -> Result<Self> {
        let pois: Vec<&Poi> = universe
            .iter()
            .map(|id| ds.poi(*id).ok_or_else(|| Error::invalid(format!("unknown poi {id}"))))
            .collect::<Result<_>>()?;
        let mut sets: BTreeMap<PoiId, BTreeMap<PoiId, Vec<Strategy>>> =
            universe.iter().map(|&id| (id, BTreeMap::new())).collect();
        let mut add = |anchor: PoiId, pos: BTreeSet<PoiId>, s: Strategy| {
            if let Some(entry) = sets.get_mut(&anchor) {
                for p in pos {
                    if p != anchor && universe.contains(&p) {
                        let tags = entry.entry(p).or_default();
                        if !tags.contains(&s) {
                            tags.push(s);
                        }
                    }
                }
            }
        };
        let enabled: BTreeSet<Strategy> = cfg.strategies.iter().copied().collect();
        if enabled.contains(&Strategy::SeqTime) {
            for (anchor, pos) in sequence_time_sets(train, cfg.lambda) {
                add(anchor, pos, Strategy::SeqTime);
            }
        }
        if enabled.contains(&Strategy::Geo) {
            let grid = GridIndex::new(pois.iter().copied(), cfg.side_km);
            for p in &pois {
                add(p.id, geography_positives(p, &grid, cfg.side_km), Strategy::Geo);
            }
        }
        if enabled.contains(&Strategy::Func) {
            let index = FunctionalIndex::new(pois.iter().copied(), attrs)?;
            for p in &pois {
                add(p.id, index.positives(p.id)?, Strategy::Func);
            }
        }
        for tags in sets.values_mut().flat_map(|m| m.values_mut()) {
            tags.sort();
        }
        Ok(PositiveSets { sets })
    }

    pub fn positives(&self, anchor: PoiId) -> impl Iterator<Item = PoiId> + '_ {
        self.sets.get(&anchor).into_iter().flat_map(|m| m.keys().copied())
    }

    pub fn contains(&self, anchor: PoiId, other: PoiId) -> bool {
        self.sets.get(&anchor).is_some_and(|m| m.contains_key(&other))
    }

    pub fn pair_count(&self) -> usize {
        self.sets.values().map(|m| m.len()).sum()
    }
}

/// Deterministic producer of contrastive batches, one per deduplicated
/// (anchor, positive) pair.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    pub positives: PositiveSets,
    universe: Vec<PoiId>,
    pairs: Vec<(PoiId, PoiId)>,
    m: usize,
    seed: u64,
    /// Anchors whose positive set is empty.
    pub skipped_anchors: Vec<PoiId>,
}

impl BatchSampler {
    pub fn new(positives: PositiveSets, universe: &BTreeSet<PoiId>, cfg: &SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut pairs = Vec::new();
        let mut skipped = Vec::new();
        for (&anchor, set) in &positives.sets {
            if set.is_empty() {
                skipped.push(anchor);
            }
            pairs.extend(set.keys().map(|&p| (anchor, p)));
        }
        if !skipped.is_empty() {
            warn!("{} anchors have no positives and are skipped", skipped.len());
        }
        Ok(BatchSampler {
            positives,
            universe: universe.iter().copied().collect(),
            pairs,
            m: cfg.m,
            seed: cfg.seed,
            skipped_anchors: skipped,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.m
    }

    pub fn num_batches(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(PoiId, PoiId)] {
        &self.pairs
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }

    /// Batches for `epoch`: pairs in a seeded shuffled order, each with
    /// freshly drawn negatives.
    pub fn epoch_batches(&self, epoch: usize) -> impl Iterator<Item = TrainingBatch> + '_ {
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut rng);
        order.into_iter().map(move |k| {
            let (anchor, positive) = self.pairs[k];
            let negatives = self.draw_negatives(anchor, &mut rng);
            TrainingBatch {
                anchor,
                positive,
                negatives,
                sources: self.positives.sets[&anchor][&positive].clone(),
            }
        })
    }

    fn draw_negatives(&self, anchor: PoiId, rng: &mut ChaCha8Rng) -> Vec<PoiId> {
        let need = self.m - 2;
        let pos = &self.positives.sets[&anchor];
        let allowed_count = self.universe.len() - 1 - pos.len();
        let excluded = |id: &PoiId| *id == anchor || pos.contains_key(id);
        if allowed_count < need || allowed_count < 4 * need {
            let allowed: Vec<PoiId> = self.universe.iter().copied().filter(|id| !excluded(id)).collect();
            if allowed.is_empty() {
                warn!("anchor {anchor}: no candidate negatives; using the positive itself");
                return Vec::new();
            }
            if allowed.len() < need {
                warn!(
                    "anchor {anchor}: only {} candidate negatives for {need} slots; drawing with replacement",
                    allowed.len()
                );
                return (0..need).map(|_| allowed[rng.gen_range(0..allowed.len())]).collect();
            }
            return rand::seq::index::sample(rng, allowed.len(), need)
                .into_iter()
                .map(|i| allowed[i])
                .collect();
        }
        let mut chosen = HashSet::with_capacity(need);
        let mut out = Vec::with_capacity(need);
        while out.len() < need {
            let id = self.universe[rng.gen_range(0..self.universe.len())];
            if !excluded(&id) && chosen.insert(id) {
                out.push(id);
            }
        }
        out
    }
}
