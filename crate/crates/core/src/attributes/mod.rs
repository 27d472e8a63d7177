//! Derived POI attributes: visit pattern, street address and surrounding
//! categories.

pub mod geocode;
pub mod grid;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use chrono::{Datelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::corpus::{local_time, CheckinRecord, Dataset, Poi, PoiId};
use crate::error::{Error, Result};
use crate::fsutil::{read_jsonl, write_jsonl};

pub use geocode::{CachedGeocoder, FixtureGeocoder, NominatimClient, NominatimConfig, ReverseGeocoder};
pub use grid::{square_contains, GridIndex, KM_PER_DEGREE};

pub const DEFAULT_SIDE_KM: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WeeklyPattern {
    Weekday,
    Weekend,
}

/// The seven daily visit slots, in tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DaySlot {
    EarlyMorning,
    Morning,
    Noon,
    Afternoon,
    Evening,
    Night,
    Midnight,
}

impl DaySlot {
    pub const ALL: [DaySlot; 7] = [
        DaySlot::EarlyMorning,
        DaySlot::Morning,
        DaySlot::Noon,
        DaySlot::Afternoon,
        DaySlot::Evening,
        DaySlot::Night,
        DaySlot::Midnight,
    ];

    pub fn from_hour(hour: u32) -> DaySlot {
        match hour {
            6..=8 => DaySlot::EarlyMorning,
            9..=10 => DaySlot::Morning,
            11..=12 => DaySlot::Noon,
            13..=16 => DaySlot::Afternoon,
            17..=18 => DaySlot::Evening,
            19..=23 => DaySlot::Night,
            _ => DaySlot::Midnight,
        }
    }

    /// Human phrasing used in prompts.
    pub fn describe(self) -> &'static str {
        match self {
            DaySlot::EarlyMorning => "Between 6 am and 9 am",
            DaySlot::Morning => "Between 9 am and 11 am",
            DaySlot::Noon => "Between 11 am and 1 pm",
            DaySlot::Afternoon => "Between 1 pm and 5 pm",
            DaySlot::Evening => "Between 5 pm and 7 pm",
            DaySlot::Night => "Between 7 pm and 12 pm",
            DaySlot::Midnight => "Between 0 am and 6 am",
        }
    }
}

impl fmt::Display for WeeklyPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeeklyPattern::Weekday => "Weekday",
            WeeklyPattern::Weekend => "Weekend",
        })
    }
}

/// Local daily slot of a timestamp.
pub fn day_slot(timestamp: i64, tz_offset_minutes: i32) -> DaySlot {
    use chrono::Timelike;
    DaySlot::from_hour(local_time(timestamp, tz_offset_minutes).hour())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VisitPattern {
    pub weekly: WeeklyPattern,
    pub daily: DaySlot,
}

/// Dominant weekday/weekend class and dominant daily slot. Ties go to
/// `Weekday` and to the earliest slot in [`DaySlot::ALL`].
pub fn derive_visit_pattern(records: &[&CheckinRecord]) -> Result<VisitPattern> {
    if records.is_empty() {
        return Err(Error::invalid("visit pattern needs at least one check-in"));
    }
    let (mut weekday, mut weekend) = (0usize, 0usize);
    let mut slots = [0usize; 7];
    for r in records {
        let t = r.local_time();
        match t.weekday() {
            Weekday::Sat | Weekday::Sun => weekend += 1,
            _ => weekday += 1,
        }
        let slot = DaySlot::from_hour(chrono::Timelike::hour(&t));
        slots[slot as usize] += 1;
    }
    let weekly = if weekend > weekday {
        WeeklyPattern::Weekend
    } else {
        WeeklyPattern::Weekday
    };
    let best = slots.iter().copied().max().unwrap_or(0);
    let daily = DaySlot::ALL[slots.iter().position(|&c| c == best).unwrap_or(0)];
    Ok(VisitPattern { weekly, daily })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum GeocodeStatus {
    Found,
    /// The service answered but had no street, number or postcode.
    NoAddress,
    NetworkFailure,
    /// HTTP 4xx from the service.
    ClientError,
    #[default]
    NotRequested,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Address {
    pub street: Option<String>,
    pub house_number: Option<String>,
    pub postal_code: Option<String>,
    #[serde(default)]
    pub status: GeocodeStatus,
}

impl Address {
    pub fn absent(status: GeocodeStatus) -> Self {
        Address {
            status,
            ..Address::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.street.is_none() && self.house_number.is_none() && self.postal_code.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Surrounding {
    pub top_categories: Vec<String>,
}

/// Top three categories by count (descending), ties broken by name.
pub fn top_categories<'a>(categories: impl IntoIterator<Item = &'a str>, k: usize) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for c in categories {
        *counts.entry(c).or_insert(0) += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.into_iter().take(k).map(|(c, _)| c.to_string()).collect()
}

/// Categories of the other POIs inside the `side_km` square around `poi`.
pub fn derive_surrounding(poi: &Poi, grid: &GridIndex, side_km: f64) -> Surrounding {
    let neighbors = grid.square_neighbors(poi, side_km);
    Surrounding {
        top_categories: top_categories(neighbors.iter().map(|p| p.category.as_str()), 3),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoiAttributes {
    pub poi_id: PoiId,
    pub visit_pattern: VisitPattern,
    pub address: Address,
    pub surrounding: Surrounding,
}

/// Derives attributes for every POI in `ds`. Without a geocoder the
/// address is left absent.
pub fn derive_all<G: ReverseGeocoder>(
    ds: &Dataset,
    geocoder: Option<&CachedGeocoder<G>>,
    side_km: f64,
) -> Result<BTreeMap<PoiId, PoiAttributes>> {
    if ds.pois.is_empty() {
        return Err(Error::invalid("dataset has no POIs"));
    }
    let grid = GridIndex::new(ds.pois.values(), side_km);
    let by_poi = ds.records_by_poi();
    let mut out = BTreeMap::new();
    for poi in ds.pois.values() {
        let records = by_poi.get(&poi.id).map(Vec::as_slice).unwrap_or(&[]);
        let visit_pattern = derive_visit_pattern(records)
            .map_err(|_| Error::invalid(format!("poi {} has no check-ins", poi.id)))?;
        let address = match geocoder {
            Some(g) => g.reverse_geocode(poi.lat, poi.lon),
            None => Address::absent(GeocodeStatus::NotRequested),
        };
        out.insert(
            poi.id,
            PoiAttributes {
                poi_id: poi.id,
                visit_pattern,
                address,
                surrounding: derive_surrounding(poi, &grid, side_km),
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct AttributeLine {
    poi_id: PoiId,
    weekly: WeeklyPattern,
    daily: DaySlot,
    street: Option<String>,
    house_number: Option<String>,
    postal_code: Option<String>,
    surrounding: Vec<String>,
}

pub fn write_attributes<'a>(path: &Path, attrs: impl IntoIterator<Item = &'a PoiAttributes>) -> Result<()> {
    write_jsonl(
        path,
        attrs.into_iter().map(|a| AttributeLine {
            poi_id: a.poi_id,
            weekly: a.visit_pattern.weekly,
            daily: a.visit_pattern.daily,
            street: a.address.street.clone(),
            house_number: a.address.house_number.clone(),
            postal_code: a.address.postal_code.clone(),
            surrounding: a.surrounding.top_categories.clone(),
        }),
    )
}

pub fn read_attributes(path: &Path) -> Result<BTreeMap<PoiId, PoiAttributes>> {
    let lines: Vec<AttributeLine> = read_jsonl(path)?;
    Ok(lines
        .into_iter()
        .map(|l| {
            let mut address = Address {
                street: l.street,
                house_number: l.house_number,
                postal_code: l.postal_code,
                status: GeocodeStatus::Found,
            };
            if address.is_empty() {
                address.status = GeocodeStatus::NoAddress;
            }
            (
                l.poi_id,
                PoiAttributes {
                    poi_id: l.poi_id,
                    visit_pattern: VisitPattern {
                        weekly: l.weekly,
                        daily: l.daily,
                    },
                    address,
                    surrounding: Surrounding {
                        top_categories: l.surrounding,
                    },
                },
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn rec(y: i32, m: u32, d: u32, h: u32, min: u32) -> CheckinRecord {
        let ts = NaiveDate::from_ymd_opt(y, m, d)
            .unwrap()
            .and_hms_opt(h, min, 0)
            .unwrap()
            .and_utc()
            .timestamp();
        CheckinRecord {
            user: "u".into(),
            poi_id: 0,
            timestamp: ts,
            tz_offset_minutes: 0,
        }
    }

    #[test]
    fn day_slot_boundaries() {
        assert_eq!(day_slot(rec(2012, 4, 2, 7, 30).timestamp, 0), DaySlot::EarlyMorning);
        assert_eq!(day_slot(rec(2012, 4, 2, 0, 0).timestamp, 0), DaySlot::Midnight);
        assert_eq!(day_slot(rec(2012, 4, 2, 23, 59).timestamp, 0), DaySlot::Night);
        // 07:30 local at UTC-4 is 11:30 UTC.
        assert_eq!(day_slot(rec(2012, 4, 2, 11, 30).timestamp, -240), DaySlot::EarlyMorning);
    }

    #[test]
    fn every_hour_maps_to_one_slot_and_all_slots_are_used() {
        let mut hours_per_slot = [0; 7];
        for h in 0..24 {
            hours_per_slot[DaySlot::from_hour(h) as usize] += 1;
        }
        assert_eq!(hours_per_slot, [3, 2, 2, 4, 2, 5, 6]);
    }

    #[test]
    fn visit_pattern_cases() {
        // 2012-04-02 is a Monday.
        let one = [rec(2012, 4, 2, 7, 30)];
        let refs: Vec<&CheckinRecord> = one.iter().collect();
        assert_eq!(
            derive_visit_pattern(&refs).unwrap(),
            VisitPattern {
                weekly: WeeklyPattern::Weekday,
                daily: DaySlot::EarlyMorning
            }
        );

        let five = [
            rec(2012, 4, 7, 12, 0),
            rec(2012, 4, 7, 11, 30),
            rec(2012, 4, 14, 12, 15),
            rec(2012, 4, 3, 12, 0),
            rec(2012, 4, 10, 11, 0),
        ];
        let refs: Vec<&CheckinRecord> = five.iter().collect();
        assert_eq!(
            derive_visit_pattern(&refs).unwrap(),
            VisitPattern {
                weekly: WeeklyPattern::Weekend,
                daily: DaySlot::Noon
            }
        );

        let tie = [
            rec(2012, 4, 2, 9, 0),
            rec(2012, 4, 3, 20, 0),
            rec(2012, 4, 7, 9, 0),
            rec(2012, 4, 8, 20, 0),
        ];
        let refs: Vec<&CheckinRecord> = tie.iter().collect();
        let vp = derive_visit_pattern(&refs).unwrap();
        assert_eq!(vp.weekly, WeeklyPattern::Weekday);
        assert_eq!(vp.daily, DaySlot::Morning);

        assert!(derive_visit_pattern(&[]).is_err());
    }

    #[test]
    fn top_categories_ordering() {
        let cats = ["Road", "Office", "Building", "Office", "Building", "Office", "Cafe", "Road"];
        assert_eq!(top_categories(cats, 3), vec!["Office", "Building", "Road"]);
        assert!(top_categories(std::iter::empty(), 3).is_empty());
    }

    #[test]
    fn isolated_poi_has_empty_surrounding() {
        let p = Poi {
            id: 1,
            name: "a".into(),
            category: "Cafe".into(),
            lat: 10.0,
            lon: 10.0,
        };
        let far = Poi { id: 2, lat: 11.0, ..p.clone() };
        let grid = GridIndex::new([&p, &far], 0.5);
        assert!(derive_surrounding(&p, &grid, 0.5).top_categories.is_empty());
    }
}
