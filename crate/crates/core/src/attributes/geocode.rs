//! Reverse geocoding against a Nominatim-compatible endpoint, with a
//! permanent on-disk cache and a fixture-backed client for offline runs.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Address, GeocodeStatus};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Cache key: coordinates rounded to 6 decimals.
pub fn coord_key(lat: f64, lon: f64) -> String {
    format!("{lat:.6}_{lon:.6}")
}

/// A raw reverse-geocoding response.
#[derive(Debug, Clone)]
pub enum RawResponse {
    Ok(Value),
    /// The service rejected the request (HTTP 4xx).
    ClientError(u16, String),
}

/// Anything that can answer a reverse lookup with a JSON payload.
pub trait ReverseGeocoder: Send + Sync {
    /// Transport failures are `Err`; HTTP 4xx answers are
    /// `Ok(RawResponse::ClientError)`.
    fn lookup(&self, lat: f64, lon: f64) -> Result<RawResponse>;
}

/// Extracts street, house number and postal code from a Nominatim
/// `reverse?format=jsonv2` payload.
pub fn parse_address(payload: &Value) -> Address {
    let addr = payload.get("address");
    let field = |names: &[&str]| -> Option<String> {
        names.iter().find_map(|n| {
            addr.and_then(|a| a.get(*n))
                .and_then(Value::as_str)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
        })
    };
    let mut out = Address {
        street: field(&["road", "pedestrian", "footway", "street"]),
        house_number: field(&["house_number"]),
        postal_code: field(&["postcode"]),
        status: GeocodeStatus::Found,
    };
    if out.is_empty() {
        out.status = GeocodeStatus::NoAddress;
    }
    out
}

#[derive(Debug, Clone)]
pub struct NominatimConfig {
    pub endpoint: String,
    pub email: Option<String>,
    pub requests_per_second: f64,
    pub retries: u32,
    pub timeout: Duration,
}

impl Default for NominatimConfig {
    fn default() -> Self {
        NominatimConfig {
            endpoint: "https://nominatim.openstreetmap.org/reverse".into(),
            email: None,
            requests_per_second: 1.0,
            retries: 3,
            timeout: Duration::from_secs(20),
        }
    }
}

/// HTTP client for the `reverse` endpoint. Calls are serialized behind a
/// rate limiter.
pub struct NominatimClient {
    config: NominatimConfig,
    http: reqwest::blocking::Client,
    last_call: Mutex<Option<Instant>>,
}

impl NominatimClient {
    pub fn new(config: NominatimConfig) -> Result<Self> {
        if config.requests_per_second <= 0.0 {
            return Err(Error::config("geocoder_rate_limit", "must be positive"));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .user_agent(concat!("poi-enhancer/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| Error::Geocode(e.to_string()))?;
        Ok(NominatimClient {
            config,
            http,
            last_call: Mutex::new(None),
        })
    }

    fn once(&self, lat: f64, lon: f64) -> Result<RawResponse> {
        let mut last = self.last_call.lock().expect("rate limiter poisoned");
        let min_gap = Duration::from_secs_f64(1.0 / self.config.requests_per_second);
        if let Some(t) = *last {
            let since = t.elapsed();
            if since < min_gap {
                thread::sleep(min_gap - since);
            }
        }
        *last = Some(Instant::now());
        let mut query = vec![
            ("format", "jsonv2".to_string()),
            ("lat", format!("{lat:.6}")),
            ("lon", format!("{lon:.6}")),
            ("addressdetails", "1".to_string()),
        ];
        if let Some(email) = &self.config.email {
            query.push(("email", email.clone()));
        }
        let resp = self
            .http
            .get(&self.config.endpoint)
            .query(&query)
            .send()
            .map_err(|e| Error::Geocode(e.to_string()))?;
        let status = resp.status();
        if status.is_client_error() {
            let body = resp.text().unwrap_or_default();
            return Ok(RawResponse::ClientError(status.as_u16(), body));
        }
        if !status.is_success() {
            return Err(Error::Geocode(format!("HTTP {status}")));
        }
        let body: Value = resp.json().map_err(|e| Error::Geocode(e.to_string()))?;
        Ok(RawResponse::Ok(body))
    }
}

impl ReverseGeocoder for NominatimClient {
    fn lookup(&self, lat: f64, lon: f64) -> Result<RawResponse> {
        let mut last_err = None;
        for attempt in 0..=self.config.retries {
            match self.once(lat, lon) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    debug!("geocode attempt {attempt} for ({lat}, {lon}) failed: {e}");
                    last_err = Some(e);
                    thread::sleep(Duration::from_millis(250 << attempt.min(4)));
                }
            }
        }
        Err(last_err.unwrap_or_else(|| Error::Geocode("no attempts made".into())))
    }
}

/// Serves canned payloads keyed by [`coord_key`]; unknown coordinates get an
/// empty result.
#[derive(Debug, Default)]
pub struct FixtureGeocoder {
    responses: HashMap<String, Value>,
    calls: Mutex<usize>,
}

impl FixtureGeocoder {
    pub fn new() -> Self {
        FixtureGeocoder::default()
    }

    pub fn with(mut self, lat: f64, lon: f64, payload: Value) -> Self {
        self.responses.insert(coord_key(lat, lon), payload);
        self
    }

    /// Loads a JSON object mapping coordinate keys to payloads.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let responses: HashMap<String, Value> = serde_json::from_str(&text)?;
        Ok(FixtureGeocoder {
            responses,
            calls: Mutex::new(0),
        })
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().expect("poisoned")
    }
}

impl ReverseGeocoder for FixtureGeocoder {
    fn lookup(&self, lat: f64, lon: f64) -> Result<RawResponse> {
        *self.calls.lock().expect("poisoned") += 1;
        Ok(RawResponse::Ok(
            self.responses
                .get(&coord_key(lat, lon))
                .cloned()
                .unwrap_or_else(|| serde_json::json!({})),
        ))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    raw: Value,
    address: Address,
}

/// Permanent per-coordinate cache in front of a [`ReverseGeocoder`].
/// Only successful lookups are cached so failures are retried next run.
pub struct CachedGeocoder<G> {
    inner: G,
    dir: PathBuf,
    /// Every outcome seen this run, so each key hits the network at most once.
    memo: Mutex<HashMap<String, Address>>,
}

impl<G: ReverseGeocoder> CachedGeocoder<G> {
    pub fn new(inner: G, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(CachedGeocoder {
            inner,
            dir,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Never fails: transport errors and HTTP 4xx come back as an all-absent
    /// address with a distinguishing status.
    pub fn reverse_geocode(&self, lat: f64, lon: f64) -> Address {
        let key = coord_key(lat, lon);
        let mut memo = self.memo.lock().expect("poisoned");
        if let Some(hit) = memo.get(&key) {
            return hit.clone();
        }
        let address = self.resolve(&key, lat, lon);
        memo.insert(key, address.clone());
        address
    }

    fn resolve(&self, key: &str, lat: f64, lon: f64) -> Address {
        let path = self.path_for(key);
        if let Ok(bytes) = fs::read(&path) {
            match serde_json::from_slice::<CacheEntry>(&bytes) {
                Ok(entry) => return entry.address,
                Err(e) => warn!("discarding unreadable geocode cache {}: {e}", path.display()),
            }
        }
        match self.inner.lookup(lat, lon) {
            Ok(RawResponse::Ok(raw)) => {
                let address = parse_address(&raw);
                let entry = CacheEntry {
                    key: key.to_string(),
                    raw,
                    address: address.clone(),
                };
                match serde_json::to_vec_pretty(&entry) {
                    Ok(bytes) => {
                        if let Err(e) = write_atomic(&path, &bytes) {
                            warn!("could not persist geocode cache for {key}: {e}");
                        }
                    }
                    Err(e) => warn!("could not encode geocode cache for {key}: {e}"),
                }
                address
            }
            Ok(RawResponse::ClientError(code, body)) => {
                warn!("geocoder rejected ({lat}, {lon}) with HTTP {code}: {body}");
                Address::absent(GeocodeStatus::ClientError)
            }
            Err(e) => {
                warn!("geocoding ({lat}, {lon}) failed: {e}");
                Address::absent(GeocodeStatus::NetworkFailure)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn wall_street() -> Value {
        json!({
            "place_id": 1,
            "display_name": "11, Wall Street, Financial District, Manhattan, New York, 10005, United States",
            "address": {
                "house_number": "11",
                "road": "Wall Street",
                "city": "New York",
                "postcode": "10005",
                "country_code": "us"
            }
        })
    }

    #[test]
    fn fixture_payload_hand_parse() {
        let a = parse_address(&wall_street());
        assert_eq!(a.street.as_deref(), Some("Wall Street"));
        assert_eq!(a.house_number.as_deref(), Some("11"));
        assert_eq!(a.postal_code.as_deref(), Some("10005"));
        assert_eq!(a.status, GeocodeStatus::Found);
    }

    #[test]
    fn cache_hit_skips_network() {
        let dir = tempfile::tempdir().unwrap();
        let fixture = FixtureGeocoder::new().with(40.706806, -74.011154, wall_street());
        let geo = CachedGeocoder::new(fixture, dir.path()).unwrap();
        let first = geo.reverse_geocode(40.706806, -74.011154);
        let second = geo.reverse_geocode(40.706806, -74.011154);
        assert_eq!(first, second);
        assert_eq!(geo.inner().calls(), 1);

        // A fresh client over the same directory never calls out.
        let geo2 = CachedGeocoder::new(FixtureGeocoder::new(), dir.path()).unwrap();
        assert_eq!(geo2.reverse_geocode(40.7068064, -74.0111539), first);
        assert_eq!(geo2.inner().calls(), 0);
    }

    struct Failing(u16);
    impl ReverseGeocoder for Failing {
        fn lookup(&self, _: f64, _: f64) -> Result<RawResponse> {
            if self.0 == 0 {
                Err(Error::Geocode("connection refused".into()))
            } else {
                Ok(RawResponse::ClientError(self.0, "bad request".into()))
            }
        }
    }

    #[test]
    fn failures_yield_absent_addresses_with_distinct_flags() {
        let dir = tempfile::tempdir().unwrap();
        let net = CachedGeocoder::new(Failing(0), dir.path()).unwrap();
        let a = net.reverse_geocode(1.0, 2.0);
        assert!(a.is_empty());
        assert_eq!(a.status, GeocodeStatus::NetworkFailure);
        let http = CachedGeocoder::new(Failing(400), dir.path()).unwrap();
        let b = http.reverse_geocode(1.0, 2.0);
        assert!(b.is_empty());
        assert_eq!(b.status, GeocodeStatus::ClientError);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
