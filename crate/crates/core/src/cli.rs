//! Command-line pipeline. Each subcommand reads the files earlier stages
//! left in the run directory and writes its own.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::attributes::{self, CachedGeocoder, FixtureGeocoder, NominatimClient, NominatimConfig, PoiAttributes};
use crate::baselines::{load_base_embeddings, random_embeddings, train_skipgram_reference};
use crate::config::{BackendKind, GeocoderKind, RunConfig};
use crate::corpus::{filter_dataset, load_checkins, save_checkins, split_sequences, Adapter, Dataset, PoiId, Splits};
use crate::downstream::{
    build_flow_series, classification_splits, eval_classification, eval_cluster, eval_flow, eval_recommendation,
    pairwise_distance, MetricReport,
};
use crate::embedding::{EmbeddingMatrix, EmbeddingRole};
use crate::enhancer::checkpoint::{load_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC};
use crate::enhancer::{enhance, EnhancerModel};
use crate::error::{Error, Result};
use crate::extractor::backend::{FeatureBackend, MockBackend, RemoteBackend, StructuredMockBackend};
use crate::extractor::{extract_corpus, load_features, write_manifest, FeatureCache};
use crate::fsutil::{read_jsonl, write_atomic, write_jsonl};
use crate::prompts::{generate_prompt, Prompt, PromptKind, TEMPLATE_VERSION};
use crate::sampling::{BatchSampler, PositiveSets};
use crate::training::{Trainer, TrainOutput, BEST_CHECKPOINT};

pub const DATA_FILE: &str = "data/checkins.tsv";
pub const SPLIT_FILE: &str = "data/split.json";
pub const ATTRIBUTES_FILE: &str = "attributes.jsonl";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const FEATURES_DIR: &str = "features";
pub const BASE_FILE: &str = "base/base.txt";
pub const ENHANCER_DIR: &str = "enhancer";
pub const FUSED_FILE: &str = "fused.txt";
pub const EVAL_DIR: &str = "eval";

#[derive(Debug, Parser)]
#[command(name = "poi-enhancer", version, about = "Enhance POI embeddings with language-model features")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; overrides the configured `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, filter and split check-ins, then derive POI attributes.
    DeriveAttributes {
        /// Check-in file; overrides the configured `checkins`.
        #[arg(long)]
        checkins: Option<PathBuf>,
        #[arg(long)]
        adapter: Option<Adapter>,
    },
    /// Render the three prompts of every POI.
    GenPrompts,
    /// Run the prompts through the configured backend, with caching.
    ExtractFeatures,
    /// Produce base embeddings (reference skip-gram or random).
    TrainBase {
        #[arg(long, value_enum, default_value_t = BaseMethod::Skipgram)]
        method: BaseMethod,
    },
    /// Train the enhancer against base embeddings.
    TrainEnhancer {
        /// Base embedding file; defaults to the configured one, then the run's own.
        #[arg(long = "base-embeddings")]
        base: Option<PathBuf>,
        /// Feature directory; defaults to the run's own.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Write fused embeddings from a trained checkpoint.
    Enhance {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "base-embeddings")]
        base: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Skip POIs without a base embedding instead of failing.
        #[arg(long)]
        skip_missing: bool,
    },
    /// Next-POI recommendation (Hit@1, Hit@5).
    EvalPoirec(EvalArgs),
    /// User classification (accuracy, macro-F1).
    EvalClassify(EvalArgs),
    /// Visitor-flow forecasting (MAE, RMSE).
    EvalFlow(EvalArgs),
    /// k-means clustering against categories (NMI).
    EvalCluster(EvalArgs),
    /// Euclidean distance between two POIs in one or more embedding files.
    Compare {
        #[arg(long = "embeddings", required = true)]
        embeddings: Vec<PathBuf>,
        #[arg(long)]
        a: PoiId,
        #[arg(long)]
        b: PoiId,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaseMethod {
    Skipgram,
    Random,
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    seed: u64,
    test: Vec<String>,
    val: Vec<String>,
    train: Vec<String>,
}

#[derive(Serialize)]
struct Seeds {
    seed: u64,
    backend_seed: u64,
}

#[derive(Serialize)]
struct Versions {
    poi_enhancer: &'static str,
    prompt_template: &'static str,
    checkpoint_format: String,
    feature_cache_format: &'static str,
}

/// Resolved configuration plus the run directory.
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    pub fn open(cli: &Cli) -> Result<Run> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(o) = &cli.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        let dir = cfg.out.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        cfg.echo(&dir)?;
        let seeds = Seeds {
            seed: cfg.seed,
            backend_seed: cfg.backend_seed,
        };
        write_atomic(&dir.join("seeds.json"), serde_json::to_string_pretty(&seeds)?.as_bytes())?;
        let versions = Versions {
            poi_enhancer: env!("CARGO_PKG_VERSION"),
            prompt_template: TEMPLATE_VERSION,
            checkpoint_format: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            feature_cache_format: "POIFEAT1",
        };
        write_atomic(&dir.join("versions.json"), serde_json::to_string_pretty(&versions)?.as_bytes())?;
        Ok(Run { cfg, dir })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn require(&self, rel: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::invalid(format!("{} not found; run `{stage}` first", p.display())))
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let path = self.require(DATA_FILE, "derive-attributes")?;
        Ok(load_checkins(&path, Adapter::Canonical)?.dataset)
    }

    pub fn splits(&self, ds: &Dataset) -> Result<Splits> {
        let path = self.require(SPLIT_FILE, "derive-attributes")?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: SplitFile = serde_json::from_str(&text)?;
        let pick = |users: &[String]| {
            let users: BTreeSet<&str> = users.iter().map(String::as_str).collect();
            Dataset::new(
                ds.pois.clone(),
                ds.sequences
                    .iter()
                    .filter(|s| users.contains(s.user.as_str()))
                    .cloned()
                    .collect(),
            )
        };
        Ok(Splits {
            test: pick(&file.test)?,
            val: pick(&file.val)?,
            train: pick(&file.train)?,
        })
    }

    pub fn attributes(&self) -> Result<BTreeMap<PoiId, PoiAttributes>> {
        attributes::read_attributes(&self.require(ATTRIBUTES_FILE, "derive-attributes")?)
    }

    fn backend(&self, ds: &Dataset) -> Result<Box<dyn FeatureBackend>> {
        let c = &self.cfg;
        Ok(match c.backend {
            BackendKind::Mock => Box::new(MockBackend::new(c.backend_dim, c.pooling, c.backend_seed)),
            BackendKind::StructuredMock => Box::new(StructuredMockBackend::new(
                c.backend_dim,
                c.pooling,
                c.backend_seed,
                c.backend_noise,
                ds.category_vocab.clone(),
            )),
            BackendKind::Remote => Box::new(RemoteBackend::new(
                c.backend_endpoint.as_deref().expect("validated"),
                c.backend_model.as_deref().unwrap_or("model"),
                c.backend_dim,
                c.pooling,
                c.backend_max_tokens,
            )?),
        })
    }

    fn features_dir(&self, explicit: Option<PathBuf>) -> Result<PathBuf> {
        match explicit {
            Some(p) => Ok(p),
            None => self.require(FEATURES_DIR, "extract-features"),
        }
    }

    fn base_path(&self, explicit: Option<&PathBuf>) -> Result<PathBuf> {
        match explicit.or(self.cfg.base_embeddings.as_ref()) {
            Some(p) => Ok(p.clone()),
            None => self.require(BASE_FILE, "train-base"),
        }
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            template_version: TEMPLATE_VERSION.into(),
            backend_id: String::new(),
            chunk_size: self.cfg.chunk_size,
            seed: self.cfg.seed,
            epoch: None,
        }
    }
}

fn print_report(run: &Run, report: &MetricReport, embeddings: &Path) -> Result<()> {
    let stem = embeddings
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "embeddings".into());
    let path = run.path(EVAL_DIR).join(format!("{}-{stem}.json", report.task));
    report.save(&path)?;
    println!("{}", serde_json::to_string(report)?);
    info!("report written to {}", path.display());
    Ok(())
}

fn load_eval_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::load(path, EmbeddingRole::BasePoi)
}

pub fn run(cli: Cli) -> Result<()> {
    let run = Run::open(&cli)?;
    let cfg = &run.cfg;
    match cli.command {
        Command::DeriveAttributes { checkins, adapter } => {
            let path = checkins
                .or_else(|| cfg.checkins.clone())
                .ok_or_else(|| Error::config("checkins", "no check-in file configured or given"))?;
            let mut ds = load_checkins(&path, adapter.unwrap_or(cfg.adapter))?.dataset;
            if let Some(tz) = cfg.tz_offset_minutes {
                ds.set_timezone_offset(tz);
            }
            let ds = filter_dataset(&ds, cfg.min_poi_checkins, cfg.min_seq_len)?;
            let splits = split_sequences(&ds, cfg.split_ratios(), cfg.seed)?;
            save_checkins(&ds, &run.path(DATA_FILE))?;
            let users = |d: &Dataset| d.sequences.iter().map(|s| s.user.clone()).collect();
            let split = SplitFile {
                seed: cfg.seed,
                test: users(&splits.test),
                val: users(&splits.val),
                train: users(&splits.train),
            };
            write_atomic(&run.path(SPLIT_FILE), serde_json::to_string_pretty(&split)?.as_bytes())?;
            let attrs = match cfg.geocoder {
                GeocoderKind::None => attributes::derive_all::<FixtureGeocoder>(&ds, None, cfg.side_km)?,
                GeocoderKind::Fixture => {
                    let g = CachedGeocoder::new(
                        FixtureGeocoder::from_file(cfg.geocoder_fixture.as_deref().expect("validated"))?,
                        run.path("geocode_cache"),
                    )?;
                    attributes::derive_all(&ds, Some(&g), cfg.side_km)?
                }
                GeocoderKind::Nominatim => {
                    let mut conf = NominatimConfig {
                        email: cfg.geocoder_email.clone(),
                        requests_per_second: cfg.geocoder_rate_limit,
                        ..NominatimConfig::default()
                    };
                    if let Some(e) = &cfg.geocoder_endpoint {
                        conf.endpoint = e.clone();
                    }
                    let g = CachedGeocoder::new(NominatimClient::new(conf)?, run.path("geocode_cache"))?;
                    attributes::derive_all(&ds, Some(&g), cfg.side_km)?
                }
            };
            attributes::write_attributes(&run.path(ATTRIBUTES_FILE), attrs.values())?;
            println!(
                "{} POIs, {} sequences (test {}, val {}, train {}), attributes for {} POIs",
                ds.num_pois(),
                ds.sequences.len(),
                splits.test.sequences.len(),
                splits.val.sequences.len(),
                splits.train.sequences.len(),
                attrs.len()
            );
        }
        Command::GenPrompts => {
            let ds = run.dataset()?;
            let attrs = run.attributes()?;
            let mut prompts = Vec::with_capacity(3 * ds.num_pois());
            for poi in ds.pois.values() {
                let a = attrs
                    .get(&poi.id)
                    .ok_or_else(|| Error::invalid(format!("poi {} has no attributes", poi.id)))?;
                for kind in PromptKind::ALL {
                    prompts.push(generate_prompt(poi, a, kind));
                }
            }
            write_jsonl(&run.path(PROMPTS_FILE), &prompts)?;
            println!("{} prompts for {} POIs", prompts.len(), ds.num_pois());
        }
        Command::ExtractFeatures => {
            let ds = run.dataset()?;
            let prompts: Vec<Prompt> = read_jsonl(&run.require(PROMPTS_FILE, "gen-prompts")?)?;
            let backend = run.backend(&ds)?;
            let dir = run.path(FEATURES_DIR);
            let mut cache = FeatureCache::open(&dir)?;
            let outcome = extract_corpus(&prompts, backend.as_ref(), &mut cache, cfg.max_in_flight)?;
            for (id, why) in &outcome.missing {
                warn!("poi {id}: {why}");
            }
            write_manifest(&dir, &outcome.bundles)?;
            println!(
                "{} POIs with features, {} missing, {} backend calls",
                outcome.bundles.len(),
                outcome.missing.len(),
                outcome.backend_calls
            );
        }
        Command::TrainBase { method } => {
            let ds = run.dataset()?;
            let emb = match method {
                BaseMethod::Skipgram => {
                    let splits = run.splits(&ds)?;
                    let r = train_skipgram_reference(&ds, &splits.train.sequences, &cfg.skipgram())?;
                    if !r.set.flagged.is_empty() {
                        warn!("{} POIs absent from training sequences keep random rows", r.set.flagged.len());
                    }
                    r.set.embeddings
                }
                BaseMethod::Random => random_embeddings(&ds, cfg.d, cfg.seed)?,
            };
            emb.save(&run.path(BASE_FILE))?;
            println!("{} base embeddings of dimension {}", emb.len(), emb.dim());
        }
        Command::TrainEnhancer { base, features } => {
            let ds = run.dataset()?;
            let splits = run.splits(&ds)?;
            let attrs = run.attributes()?;
            let bundles = load_features(&run.features_dir(features)?)?;
            let (base, _) = load_base_embeddings(&run.base_path(base.as_ref())?, &ds, cfg.d, cfg.allow_missing_base)?;
            let base = base.embeddings;
            let index = base.index();
            let universe: BTreeSet<PoiId> = bundles.keys().copied().filter(|id| index.contains_key(id)).collect();
            let positives = PositiveSets::build(&ds, &splits.train.sequences, &attrs, &universe, &cfg.sampler())?;
            let sampler = BatchSampler::new(positives, &universe, &cfg.sampler())?;
            let model = EnhancerModel::new(cfg.hyperparams(), cfg.seed)?;
            let mut meta = run.meta();
            meta.backend_id = bundles
                .values()
                .next()
                .map(|b| b.e_visit.backend_id.clone())
                .unwrap_or_default();
            let out = TrainOutput {
                dir: run.path(ENHANCER_DIR),
                meta,
            };
            fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
            let mut trainer = Trainer::new(model, cfg.train(), &bundles, &base)?;
            let reports = trainer.fit(&sampler, Some(&out))?;
            let last = reports.last().expect("at least one epoch");
            println!(
                "{} epochs; final L_cont {:.6} L_sim {:.6} total {:.6}",
                reports.len(),
                last.l_cont,
                last.l_sim,
                last.total
            );
        }
        Command::Enhance {
            checkpoint,
            base,
            features,
            skip_missing,
        } => {
            let ds = run.dataset()?;
            let ckpt = match checkpoint {
                Some(p) => p,
                None => run.require(&format!("{ENHANCER_DIR}/{BEST_CHECKPOINT}"), "train-enhancer")?,
            };
            let (model, meta) = load_checkpoint(&ckpt)?;
            if meta.template_version != TEMPLATE_VERSION {
                warn!(
                    "checkpoint was trained on prompt template {}, current is {TEMPLATE_VERSION}",
                    meta.template_version
                );
            }
            let bundles = load_features(&run.features_dir(features)?)?;
            let (base, _) = load_base_embeddings(&run.base_path(base.as_ref())?, &ds, model.hp.d, true)?;
            let chunk = if meta.chunk_size > 0 { meta.chunk_size } else { cfg.chunk_size };
            let out = enhance(&model, &bundles, &base.embeddings, chunk, skip_missing)?;
            out.fused.save(&run.path(FUSED_FILE))?;
            #[derive(Serialize)]
            struct FusedMeta<'a> {
                checkpoint: String,
                chunk_size: usize,
                skipped: &'a [PoiId],
            }
            let fm = FusedMeta {
                checkpoint: ckpt.display().to_string(),
                chunk_size: chunk,
                skipped: &out.skipped,
            };
            write_atomic(&run.path("fused.meta.json"), serde_json::to_string_pretty(&fm)?.as_bytes())?;
            println!("{} fused embeddings, {} skipped", out.fused.len(), out.skipped.len());
        }
        Command::EvalPoirec(a) => {
            let ds = run.dataset()?;
            let splits = run.splits(&ds)?;
            let emb = load_eval_embeddings(&a.embeddings)?;
            let mut r = eval_recommendation(&emb, &splits, &cfg.task())?;
            r.provenance = a.embeddings.display().to_string();
            print_report(&run, &r, &a.embeddings)?;
        }
        Command::EvalClassify(a) => {
            let ds = run.dataset()?;
            let splits = classification_splits(&ds, cfg.max_slice, cfg.split_ratios(), cfg.seed)?;
            let emb = load_eval_embeddings(&a.embeddings)?;
            let mut r = eval_classification(&emb, &splits, &cfg.task())?;
            r.provenance = a.embeddings.display().to_string();
            print_report(&run, &r, &a.embeddings)?;
        }
        Command::EvalFlow(a) => {
            let ds = run.dataset()?;
            let set = build_flow_series(&ds, &cfg.task())?;
            let emb = load_eval_embeddings(&a.embeddings)?;
            let mut r = eval_flow(&emb, &set, &cfg.task())?;
            r.provenance = a.embeddings.display().to_string();
            print_report(&run, &r, &a.embeddings)?;
        }
        Command::EvalCluster(a) => {
            let ds = run.dataset()?;
            let emb = load_eval_embeddings(&a.embeddings)?;
            let mut r = eval_cluster(&emb, &ds, &cfg.task())?;
            r.provenance = a.embeddings.display().to_string();
            print_report(&run, &r, &a.embeddings)?;
        }
        Command::Compare { embeddings, a, b } => {
            for path in embeddings {
                let emb = load_eval_embeddings(&path)?;
                println!("{}\t{a}\t{b}\t{:.8}", path.display(), pairwise_distance(&emb, a, b)?);
            }
        }
    }
    Ok(())
}

/// Exit code for an error: 1 for user errors, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_user_error() {
        1
    } else {
        2
    }
}
