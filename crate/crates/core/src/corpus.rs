//! Check-in corpus: POIs, per-user check-in sequences, loading, filtering
//! and splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Datelike, FixedOffset, NaiveDate, NaiveDateTime, Timelike, Utc, Weekday};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type PoiId = u32;

/// Fraction of malformed lines above which a load is rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

const CANONICAL_HEADER: &str =
    "user_id\tpoi_id\tpoi_name\tcategory\tlat\tlon\ttimestamp\ttz_offset_minutes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: PoiId,
    pub name: String,
    pub category: String,
    pub lon: f64,
    pub lat: f64,
}

impl Poi {
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::invalid(format!("poi {}: latitude {} out of range", self.id, self.lat)));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::invalid(format!("poi {}: longitude {} out of range", self.id, self.lon)));
        }
        if self.category.trim().is_empty() {
            return Err(Error::invalid(format!("poi {}: empty category", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckinRecord {
    pub user: String,
    pub poi_id: PoiId,
    /// Seconds since the Unix epoch (UTC).
    pub timestamp: i64,
    pub tz_offset_minutes: i32,
}

impl CheckinRecord {
    pub fn local_time(&self) -> NaiveDateTime {
        local_time(self.timestamp, self.tz_offset_minutes)
    }

    pub fn local_date(&self) -> NaiveDate {
        self.local_time().date()
    }

    pub fn local_hour(&self) -> u32 {
        self.local_time().hour()
    }

    pub fn weekday(&self) -> Weekday {
        self.local_time().weekday()
    }
}

/// Wall-clock time at `tz_offset_minutes` east of UTC.
pub fn local_time(timestamp: i64, tz_offset_minutes: i32) -> NaiveDateTime {
    let shifted = timestamp + i64::from(tz_offset_minutes) * 60;
    DateTime::<Utc>::from_timestamp(shifted, 0)
        .unwrap_or(DateTime::<Utc>::UNIX_EPOCH)
        .naive_utc()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckinSequence {
    pub user: String,
    pub records: Vec<CheckinRecord>,
}

impl CheckinSequence {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn poi_ids(&self) -> impl Iterator<Item = PoiId> + '_ {
        self.records.iter().map(|r| r.poi_id)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub pois: BTreeMap<PoiId, Poi>,
    pub sequences: Vec<CheckinSequence>,
    pub category_vocab: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, deriving the category vocabulary and checking that
    /// every record resolves.
    pub fn new(pois: BTreeMap<PoiId, Poi>, sequences: Vec<CheckinSequence>) -> Result<Self> {
        for seq in &sequences {
            for r in &seq.records {
                if !pois.contains_key(&r.poi_id) {
                    return Err(Error::invalid(format!(
                        "record of user {} references unknown poi {}",
                        r.user, r.poi_id
                    )));
                }
            }
        }
        let category_vocab = category_vocab(pois.values());
        Ok(Dataset {
            pois,
            sequences,
            category_vocab,
        })
    }

    pub fn num_pois(&self) -> usize {
        self.pois.len()
    }

    pub fn num_records(&self) -> usize {
        self.sequences.iter().map(CheckinSequence::len).sum()
    }

    pub fn poi(&self, id: PoiId) -> Option<&Poi> {
        self.pois.get(&id)
    }

    pub fn poi_ids(&self) -> Vec<PoiId> {
        self.pois.keys().copied().collect()
    }

    pub fn category_index(&self, category: &str) -> Option<usize> {
        self.category_vocab.binary_search_by(|c| c.as_str().cmp(category)).ok()
    }

    pub fn checkin_counts(&self) -> BTreeMap<PoiId, usize> {
        let mut counts = BTreeMap::new();
        for r in self.sequences.iter().flat_map(|s| &s.records) {
            *counts.entry(r.poi_id).or_insert(0) += 1;
        }
        counts
    }

    pub fn records_by_poi(&self) -> BTreeMap<PoiId, Vec<&CheckinRecord>> {
        let mut out: BTreeMap<PoiId, Vec<&CheckinRecord>> = BTreeMap::new();
        for r in self.sequences.iter().flat_map(|s| &s.records) {
            out.entry(r.poi_id).or_default().push(r);
        }
        out
    }

    /// Replaces every record's timezone offset.
    pub fn set_timezone_offset(&mut self, minutes: i32) {
        for r in self.sequences.iter_mut().flat_map(|s| s.records.iter_mut()) {
            r.tz_offset_minutes = minutes;
        }
    }

    fn with_sequences(&self, sequences: Vec<CheckinSequence>) -> Dataset {
        Dataset {
            pois: self.pois.clone(),
            sequences,
            category_vocab: self.category_vocab.clone(),
        }
    }
}

fn category_vocab<'a>(pois: impl Iterator<Item = &'a Poi>) -> Vec<String> {
    pois.map(|p| p.category.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adapter {
    /// `user_id, poi_id, poi_name, category, lat, lon, ISO-8601, tz minutes`
    Canonical,
    /// The public Foursquare NYC/TKY check-in dump.
    Foursquare,
}

impl FromStr for Adapter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "canonical" | "tsv" => Ok(Adapter::Canonical),
            "foursquare" => Ok(Adapter::Foursquare),
            other => Err(Error::invalid(format!("unknown check-in adapter `{other}`"))),
        }
    }
}

impl fmt::Display for Adapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Adapter::Canonical => "canonical",
            Adapter::Foursquare => "foursquare",
        })
    }
}

struct ParsedLine {
    poi: Poi,
    record: CheckinRecord,
}

fn parse_canonical(line: &str) -> std::result::Result<ParsedLine, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 8 {
        return Err(format!("expected 8 tab-separated fields, found {}", f.len()));
    }
    let poi_id: PoiId = f[1].parse().map_err(|e| format!("poi_id: {e}"))?;
    let lat: f64 = f[4].parse().map_err(|e| format!("lat: {e}"))?;
    let lon: f64 = f[5].parse().map_err(|e| format!("lon: {e}"))?;
    let timestamp = parse_iso_timestamp(f[6])?;
    let tz_offset_minutes: i32 = f[7].parse().map_err(|e| format!("tz offset: {e}"))?;
    Ok(ParsedLine {
        poi: Poi {
            id: poi_id,
            name: f[2].to_string(),
            category: f[3].to_string(),
            lon,
            lat,
        },
        record: CheckinRecord {
            user: f[0].to_string(),
            poi_id,
            timestamp,
            tz_offset_minutes,
        },
    })
}

fn parse_iso_timestamp(s: &str) -> std::result::Result<i64, String> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp());
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .map(|dt| dt.and_utc().timestamp())
        .map_err(|e| format!("timestamp `{s}`: {e}"))
}

/// Foursquare columns: user, venue id, venue category id, venue category
/// name, lat, lon, tz offset minutes, UTC time (`Tue Apr 03 18:00:09 +0000 2012`).
fn parse_foursquare(
    line: &str,
    venue_ids: &mut HashMap<String, PoiId>,
) -> std::result::Result<ParsedLine, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 8 {
        return Err(format!("expected 8 tab-separated fields, found {}", f.len()));
    }
    let lat: f64 = f[4].parse().map_err(|e| format!("lat: {e}"))?;
    let lon: f64 = f[5].parse().map_err(|e| format!("lon: {e}"))?;
    let tz_offset_minutes: i32 = f[6].parse().map_err(|e| format!("tz offset: {e}"))?;
    let timestamp = DateTime::<FixedOffset>::parse_from_str(f[7].trim(), "%a %b %d %H:%M:%S %z %Y")
        .map_err(|e| format!("timestamp `{}`: {e}", f[7]))?
        .timestamp();
    let next = venue_ids.len() as PoiId;
    let poi_id = *venue_ids.entry(f[1].to_string()).or_insert(next);
    Ok(ParsedLine {
        poi: Poi {
            id: poi_id,
            name: f[1].to_string(),
            category: f[3].to_string(),
            lon,
            lat,
        },
        record: CheckinRecord {
            user: f[0].to_string(),
            poi_id,
            timestamp,
            tz_offset_minutes,
        },
    })
}

/// Outcome of [`load_checkins`].
#[derive(Debug)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub lines: usize,
    pub malformed: usize,
}

/// Loads a check-in file, grouping records per user and sorting each
/// sequence by time.
pub fn load_checkins(path: &Path, adapter: Adapter) -> Result<LoadReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pois: BTreeMap<PoiId, Poi> = BTreeMap::new();
    let mut by_user: BTreeMap<String, Vec<CheckinRecord>> = BTreeMap::new();
    let mut venue_ids = HashMap::new();
    let (mut lines, mut malformed) = (0usize, 0usize);
    let mut first_error: Option<(usize, String)> = None;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || (lineno == 0 && line.starts_with("user_id\t")) {
            continue;
        }
        lines += 1;
        let parsed = match adapter {
            Adapter::Canonical => parse_canonical(line),
            Adapter::Foursquare => parse_foursquare(line, &mut venue_ids),
        }
        .and_then(|p| p.poi.validate().map(|_| p).map_err(|e| e.to_string()));
        match parsed {
            Ok(ParsedLine { poi, record }) => {
                pois.entry(poi.id).or_insert(poi);
                by_user.entry(record.user.clone()).or_default().push(record);
            }
            Err(msg) => {
                malformed += 1;
                first_error.get_or_insert((lineno + 1, msg));
            }
        }
    }

    if malformed > 0 {
        warn!("{}: {malformed} of {lines} lines malformed", path.display());
        if malformed as f64 > MAX_MALFORMED_FRACTION * lines as f64 {
            let (line, message) = first_error.unwrap_or_default();
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!(
                    "{message} ({malformed}/{lines} lines malformed; wrong adapter `{adapter}`?)"
                ),
            });
        }
    }

    let sequences = by_user
        .into_iter()
        .map(|(user, mut records)| {
            records.sort_by_key(|r| r.timestamp);
            CheckinSequence { user, records }
        })
        .collect();
    let dataset = Dataset::new(pois, sequences)?;
    info!(
        "loaded {} pois, {} sequences, {} records from {}",
        dataset.num_pois(),
        dataset.sequences.len(),
        dataset.num_records(),
        path.display()
    );
    Ok(LoadReport {
        dataset,
        lines,
        malformed,
    })
}

/// Writes the canonical TSV form of `ds`.
pub fn save_checkins(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(CANONICAL_HEADER);
    out.push('\n');
    for seq in &ds.sequences {
        for r in &seq.records {
            let poi = &ds.pois[&r.poi_id];
            let ts = DateTime::<Utc>::from_timestamp(r.timestamp, 0)
                .ok_or_else(|| Error::invalid(format!("timestamp {} out of range", r.timestamp)))?;
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.user,
                r.poi_id,
                poi.name,
                poi.category,
                poi.lat,
                poi.lon,
                ts.format("%Y-%m-%dT%H:%M:%SZ"),
                r.tz_offset_minutes
            ));
        }
    }
    crate::fsutil::write_atomic(path, out.as_bytes())
}

/// Repeatedly drops POIs with fewer than `min_poi_checkins` check-ins and
/// sequences with fewer than `min_seq_len` records until both hold.
pub fn filter_dataset(ds: &Dataset, min_poi_checkins: usize, min_seq_len: usize) -> Result<Dataset> {
    if min_poi_checkins < 1 || min_seq_len < 1 {
        return Err(Error::invalid("filter thresholds must be at least 1"));
    }
    let mut sequences = ds.sequences.clone();
    let mut rounds = 0;
    loop {
        rounds += 1;
        let mut counts: HashMap<PoiId, usize> = HashMap::new();
        for r in sequences.iter().flat_map(|s| &s.records) {
            *counts.entry(r.poi_id).or_insert(0) += 1;
        }
        let keep = |id: &PoiId| counts.get(id).copied().unwrap_or(0) >= min_poi_checkins;
        let before: usize = sequences.iter().map(CheckinSequence::len).sum::<usize>() + sequences.len();
        for s in &mut sequences {
            s.records.retain(|r| keep(&r.poi_id));
        }
        sequences.retain(|s| s.len() >= min_seq_len);
        let after: usize = sequences.iter().map(CheckinSequence::len).sum::<usize>() + sequences.len();
        if before == after {
            break;
        }
    }
    let used: BTreeSet<PoiId> = sequences.iter().flat_map(|s| s.poi_ids()).collect();
    if sequences.is_empty() || used.is_empty() {
        return Err(Error::invalid(format!(
            "filtering (min {min_poi_checkins} check-ins per POI, min {min_seq_len} records per sequence) \
             removed everything: input had {} POIs, {} sequences, {} records",
            ds.num_pois(),
            ds.sequences.len(),
            ds.num_records()
        )));
    }
    let pois: BTreeMap<PoiId, Poi> = ds
        .pois
        .iter()
        .filter(|(id, _)| used.contains(id))
        .map(|(id, p)| (*id, p.clone()))
        .collect();
    info!(
        "filter fixpoint after {rounds} rounds: {} pois, {} sequences",
        pois.len(),
        sequences.len()
    );
    Dataset::new(pois, sequences)
}

/// Largest-remainder apportionment of `total` items over `weights`. Ties
/// in the fractional part go to the earlier weight.
pub fn largest_remainder(total: usize, weights: &[u32]) -> Vec<usize> {
    let wsum: u64 = weights.iter().map(|&w| u64::from(w)).sum();
    let mut sizes: Vec<usize> = weights
        .iter()
        .map(|&w| (total as u64 * u64::from(w) / wsum) as usize)
        .collect();
    let mut rema: Vec<(u64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| (total as u64 * u64::from(w) % wsum, i))
        .collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let assigned: usize = sizes.iter().sum();
    for &(_, i) in rema.iter().take(total - assigned) {
        sizes[i] += 1;
    }
    sizes
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub test: Dataset,
    pub val: Dataset,
    pub train: Dataset,
}

/// Shuffles sequences with `seed` and partitions them by `ratios`
/// (test, val, train). All three keep the full POI table.
pub fn split_sequences(ds: &Dataset, ratios: (u32, u32, u32), seed: u64) -> Result<Splits> {
    if ratios.0 == 0 || ratios.1 == 0 || ratios.2 == 0 {
        return Err(Error::invalid("split ratios must be positive"));
    }
    if ds.sequences.len() < 10 {
        return Err(Error::invalid(format!(
            "need at least 10 sequences to split, have {}",
            ds.sequences.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.sequences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sizes = largest_remainder(order.len(), &[ratios.0, ratios.1, ratios.2]);
    let take = |range: std::ops::Range<usize>| {
        ds.with_sequences(order[range].iter().map(|&i| ds.sequences[i].clone()).collect())
    };
    let (a, b) = (sizes[0], sizes[0] + sizes[1]);
    Ok(Splits {
        test: take(0..a),
        val: take(a..b),
        train: take(b..order.len()),
    })
}
