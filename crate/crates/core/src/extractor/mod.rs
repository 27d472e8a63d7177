//! Semantic features from a frozen language model, one vector per prompt.

pub mod backend;
pub mod cache;

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::PoiId;
use crate::error::{Error, Result};
use crate::fsutil::{read_jsonl, write_jsonl};
use crate::prompts::{Prompt, PromptKind};

pub use backend::{
    BackendDescriptor, FeatureBackend, MockBackend, Pooling, RemoteBackend, StructuredMockBackend,
};
pub use cache::FeatureCache;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub backend_id: String,
    pub prompt_digest: String,
}

/// `sha256(kind ∥ template_version ∥ text)`, hex encoded.
pub fn prompt_digest(prompt: &Prompt) -> String {
    let mut h = Sha256::new();
    h.update(prompt.kind.as_str().as_bytes());
    h.update([0x1f]);
    h.update(prompt.template_version.as_bytes());
    h.update([0x1f]);
    h.update(prompt.text.as_bytes());
    hex::encode(h.finalize())
}

fn check_vector(values: &[f32], desc: &BackendDescriptor) -> Result<()> {
    if values.len() != desc.dim {
        return Err(Error::Backend(format!(
            "{} returned {} values, declared dimension {}",
            desc.backend_id,
            values.len(),
            desc.dim
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Backend(format!("{} returned non-finite values", desc.backend_id)));
    }
    Ok(())
}

pub fn extract_feature(prompt: &Prompt, backend: &dyn FeatureBackend) -> Result<FeatureVector> {
    let desc = backend.descriptor();
    let values = backend.hidden_state(&prompt.text)?;
    check_vector(&values, desc)?;
    Ok(FeatureVector {
        values,
        backend_id: desc.backend_id.clone(),
        prompt_digest: prompt_digest(prompt),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub poi_id: PoiId,
    pub e_visit: FeatureVector,
    pub e_address: FeatureVector,
    pub e_surrounding: FeatureVector,
}

impl FeatureBundle {
    pub fn dim(&self) -> usize {
        self.e_visit.values.len()
    }

    pub fn get(&self, kind: PromptKind) -> &FeatureVector {
        match kind {
            PromptKind::VisitPattern => &self.e_visit,
            PromptKind::Address => &self.e_address,
            PromptKind::Surrounding => &self.e_surrounding,
        }
    }
}

#[derive(Debug, Default)]
pub struct ExtractionOutcome {
    pub bundles: BTreeMap<PoiId, FeatureBundle>,
    /// POIs that could not get all three vectors, with the reason.
    pub missing: Vec<(PoiId, String)>,
    pub backend_calls: usize,
}

/// Extracts every prompt, serving cached vectors where available and
/// fanning out at most `max_in_flight` concurrent backend calls.
pub fn extract_corpus(
    prompts: &[Prompt],
    backend: &dyn FeatureBackend,
    cache: &mut FeatureCache,
    max_in_flight: usize,
) -> Result<ExtractionOutcome> {
    let desc = backend.descriptor().clone();
    let mut vectors: BTreeMap<(PoiId, PromptKind), FeatureVector> = BTreeMap::new();
    let mut pending: Vec<(&Prompt, String)> = Vec::new();
    for p in prompts {
        let digest = prompt_digest(p);
        match cache.get(&desc.backend_id, &digest) {
            Some(values) if values.len() == desc.dim => {
                vectors.insert(
                    (p.poi_id, p.kind),
                    FeatureVector {
                        values,
                        backend_id: desc.backend_id.clone(),
                        prompt_digest: digest,
                    },
                );
            }
            _ => pending.push((p, digest)),
        }
    }
    info!(
        "{} prompts: {} cached, {} to extract with {}",
        prompts.len(),
        prompts.len() - pending.len(),
        pending.len(),
        desc.backend_id
    );

    let mut failures: BTreeMap<PoiId, String> = BTreeMap::new();
    let mut calls = 0;
    for chunk in pending.chunks(max_in_flight.max(1)) {
        let results: Vec<Result<Vec<f32>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(p, _)| s.spawn(move || backend.hidden_state(&p.text)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Backend("worker panicked".into()))))
                .collect()
        });
        calls += chunk.len();
        for ((p, digest), res) in chunk.iter().zip(results) {
            match res.and_then(|v| check_vector(&v, &desc).map(|_| v)) {
                Ok(values) => {
                    cache.put(&desc.backend_id, digest, &values)?;
                    vectors.insert(
                        (p.poi_id, p.kind),
                        FeatureVector {
                            values,
                            backend_id: desc.backend_id.clone(),
                            prompt_digest: digest.clone(),
                        },
                    );
                }
                Err(e) => {
                    warn!("poi {} {}: {e}", p.poi_id, p.kind);
                    failures.entry(p.poi_id).or_insert_with(|| e.to_string());
                }
            }
        }
    }

    let poi_ids: std::collections::BTreeSet<PoiId> = prompts.iter().map(|p| p.poi_id).collect();
    let mut outcome = ExtractionOutcome {
        backend_calls: calls,
        ..Default::default()
    };
    for id in poi_ids {
        let mut take = |k| vectors.remove(&(id, k));
        match (
            take(PromptKind::VisitPattern),
            take(PromptKind::Address),
            take(PromptKind::Surrounding),
        ) {
            (Some(v), Some(a), Some(s)) => {
                outcome.bundles.insert(
                    id,
                    FeatureBundle {
                        poi_id: id,
                        e_visit: v,
                        e_address: a,
                        e_surrounding: s,
                    },
                );
            }
            _ => outcome.missing.push((
                id,
                failures
                    .remove(&id)
                    .unwrap_or_else(|| "not all three prompt kinds requested".into()),
            )),
        }
    }
    Ok(outcome)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    poi_id: PoiId,
    backend_id: String,
    dim: usize,
    visit: String,
    address: String,
    surrounding: String,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Records which cached vectors make up each bundle, next to the cache.
pub fn write_manifest(dir: &Path, bundles: &BTreeMap<PoiId, FeatureBundle>) -> Result<()> {
    write_jsonl(
        &dir.join(MANIFEST_FILE),
        bundles.values().map(|b| ManifestLine {
            poi_id: b.poi_id,
            backend_id: b.e_visit.backend_id.clone(),
            dim: b.dim(),
            visit: b.e_visit.prompt_digest.clone(),
            address: b.e_address.prompt_digest.clone(),
            surrounding: b.e_surrounding.prompt_digest.clone(),
        }),
    )
}

/// Loads the bundles listed in a features directory's manifest.
pub fn load_features(dir: &Path) -> Result<BTreeMap<PoiId, FeatureBundle>> {
    let lines: Vec<ManifestLine> = read_jsonl(&dir.join(MANIFEST_FILE))?;
    let mut cache = FeatureCache::open(dir)?;
    let mut out = BTreeMap::new();
    for l in lines {
        let mut get = |digest: &str| -> Result<FeatureVector> {
            let values = cache.get(&l.backend_id, digest).ok_or_else(|| Error::Corrupt {
                path: dir.to_path_buf(),
                message: format!("missing or corrupt vector {digest} for poi {}", l.poi_id),
            })?;
            Ok(FeatureVector {
                values,
                backend_id: l.backend_id.clone(),
                prompt_digest: digest.to_string(),
            })
        };
        let bundle = FeatureBundle {
            poi_id: l.poi_id,
            e_visit: get(&l.visit)?,
            e_address: get(&l.address)?,
            e_surrounding: get(&l.surrounding)?,
        };
        if bundle.e_address.values.len() != l.dim || bundle.e_surrounding.values.len() != l.dim {
            return Err(Error::Corrupt {
                path: dir.to_path_buf(),
                message: format!("poi {}: inconsistent vector dimensions", l.poi_id),
            });
        }
        out.insert(l.poi_id, bundle);
    }
    Ok(out)
}
