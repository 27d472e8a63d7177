use std::collections::HashMap;

use crate::corpus::{Poi, PoiId};

/// Kilometres per degree of latitude (and of longitude at the equator).
pub const KM_PER_DEGREE: f64 = 111.32;

/// Whether `candidate` falls inside the axis-aligned square of side
/// `side_km` centred on `center`, using an equirectangular projection.
pub fn square_contains(center: &Poi, candidate: &Poi, side_km: f64) -> bool {
    let half = side_km / 2.0;
    let dlat_km = (candidate.lat - center.lat).abs() * KM_PER_DEGREE;
    let dlon_km =
        (candidate.lon - center.lon).abs() * KM_PER_DEGREE * center.lat.to_radians().cos();
    dlat_km <= half && dlon_km <= half
}

/// Uniform lat/lon bucket grid. Cells are at least `side_km` wide at every
/// latitude in the indexed set, so a square query only has to visit the
/// 3×3 block of cells around its centre.
#[derive(Debug, Clone)]
pub struct GridIndex {
    lat_step: f64,
    lon_step: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
    pois: Vec<Poi>,
}

impl GridIndex {
    pub fn new<'a>(pois: impl IntoIterator<Item = &'a Poi>, side_km: f64) -> Self {
        assert!(side_km > 0.0, "side_km must be positive");
        let pois: Vec<Poi> = pois.into_iter().cloned().collect();
        let max_abs_lat = pois.iter().map(|p| p.lat.abs()).fold(0.0, f64::max);
        let min_cos = max_abs_lat.to_radians().cos();
        let lat_step = side_km / KM_PER_DEGREE;
        let lon_step = if min_cos > 1e-9 {
            (side_km / (KM_PER_DEGREE * min_cos)).min(360.0)
        } else {
            360.0
        };
        let mut grid = GridIndex {
            lat_step,
            lon_step,
            cells: HashMap::new(),
            pois: Vec::new(),
        };
        for (i, p) in pois.iter().enumerate() {
            grid.cells.entry(grid.cell_of(p)).or_default().push(i);
        }
        grid.pois = pois;
        grid
    }

    fn cell_of(&self, p: &Poi) -> (i64, i64) {
        (
            (p.lat / self.lat_step).floor() as i64,
            (p.lon / self.lon_step).floor() as i64,
        )
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    /// All indexed POIs other than `center` itself inside its square,
    /// in ascending id order.
    pub fn square_neighbors(&self, center: &Poi, side_km: f64) -> Vec<&Poi> {
        let (ci, cj) = self.cell_of(center);
        let mut out: Vec<&Poi> = Vec::new();
        for di in -1..=1 {
            for dj in -1..=1 {
                let Some(bucket) = self.cells.get(&(ci + di, cj + dj)) else {
                    continue;
                };
                out.extend(
                    bucket
                        .iter()
                        .map(|&i| &self.pois[i])
                        .filter(|p| p.id != center.id && square_contains(center, p, side_km)),
                );
            }
        }
        out.sort_by_key(|p| p.id);
        out
    }

    pub fn square_neighbor_ids(&self, center: &Poi, side_km: f64) -> Vec<PoiId> {
        self.square_neighbors(center, side_km)
            .into_iter()
            .map(|p| p.id)
            .collect()
    }
}
