//! Run configuration: one flat TOML document covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::SkipGramConfig;
use crate::corpus::Adapter;
use crate::downstream::TaskConfig;
use crate::enhancer::HyperParams;
use crate::error::{Error, Result};
use crate::extractor::backend::Pooling;
use crate::fsutil::write_atomic;
use crate::sampling::{SamplerConfig, Strategy};
use crate::training::TrainConfig;

pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    StructuredMock,
    Remote,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeocoderKind {
    None,
    Nominatim,
    Fixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // data
    pub checkins: Option<PathBuf>,
    pub adapter: Adapter,
    /// Overrides every record's timezone offset when set.
    pub tz_offset_minutes: Option<i32>,
    pub min_poi_checkins: usize,
    pub min_seq_len: usize,
    pub split_test: u32,
    pub split_val: u32,
    pub split_train: u32,

    // attributes
    /// Side of the square used for surroundings and geography positives.
    pub side_km: f64,
    pub geocoder: GeocoderKind,
    pub geocoder_endpoint: Option<String>,
    pub geocoder_email: Option<String>,
    pub geocoder_rate_limit: f64,
    pub geocoder_fixture: Option<PathBuf>,

    // features
    pub backend: BackendKind,
    pub backend_dim: usize,
    pub pooling: Pooling,
    pub backend_seed: u64,
    pub backend_noise: f64,
    pub backend_endpoint: Option<String>,
    pub backend_model: Option<String>,
    pub backend_max_tokens: Option<usize>,
    pub max_in_flight: usize,

    // enhancer
    pub d: usize,
    pub d_prime: usize,
    pub heads: usize,
    pub d_h: usize,
    pub l1: usize,
    pub l2: usize,
    pub ffn_mult: usize,
    pub paf_parallel: bool,
    pub scale_by_head_dim: bool,
    pub ln_eps: f64,
    pub chunk_size: usize,

    // sampling and training
    pub lambda: usize,
    pub m: usize,
    pub strategies: Vec<Strategy>,
    pub gamma: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub max_batches_per_epoch: Option<usize>,

    // base embeddings
    pub base_embeddings: Option<PathBuf>,
    pub allow_missing_base: bool,
    pub sg_window: usize,
    pub sg_negatives: usize,
    pub sg_epochs: usize,
    pub sg_learning_rate: f64,

    // downstream
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub task_epochs: usize,
    pub lr_rec: f64,
    pub lr_other: f64,
    pub max_slice: usize,
    pub flow_window_hours: u32,
    pub min_flow_len: usize,
    pub flow_horizon: usize,
    pub task_batch_size: usize,
    pub task_clip_norm: Option<f64>,
    pub kmeans_restarts: usize,

    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        let sampler = SamplerConfig::default();
        let train = TrainConfig::default();
        let sg = SkipGramConfig::default();
        let task = TaskConfig::default();
        RunConfig {
            checkins: None,
            adapter: Adapter::Canonical,
            tz_offset_minutes: None,
            min_poi_checkins: 5,
            min_seq_len: 10,
            split_test: 2,
            split_val: 1,
            split_train: 7,
            side_km: sampler.side_km,
            geocoder: GeocoderKind::None,
            geocoder_endpoint: None,
            geocoder_email: None,
            geocoder_rate_limit: 1.0,
            geocoder_fixture: None,
            backend: BackendKind::Mock,
            backend_dim: hp.feature_dim,
            pooling: Pooling::LastToken,
            backend_seed: 0,
            backend_noise: 0.1,
            backend_endpoint: None,
            backend_model: None,
            backend_max_tokens: None,
            max_in_flight: 4,
            d: hp.d,
            d_prime: hp.d_prime,
            heads: hp.heads,
            d_h: hp.d_h,
            l1: hp.l1,
            l2: hp.l2,
            ffn_mult: hp.ffn_mult,
            paf_parallel: hp.paf_parallel,
            scale_by_head_dim: hp.scale_by_head_dim,
            ln_eps: hp.ln_eps,
            chunk_size: sampler.m,
            lambda: sampler.lambda,
            m: sampler.m,
            strategies: sampler.strategies,
            gamma: train.gamma,
            epochs: train.epochs,
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            clip_norm: train.clip_norm,
            max_batches_per_epoch: train.max_batches_per_epoch,
            base_embeddings: None,
            allow_missing_base: false,
            sg_window: sg.window,
            sg_negatives: sg.negatives,
            sg_epochs: sg.epochs,
            sg_learning_rate: sg.learning_rate,
            lstm_hidden: task.lstm_hidden,
            lstm_layers: task.lstm_layers,
            task_epochs: task.epochs,
            lr_rec: task.lr_rec,
            lr_other: task.lr_other,
            max_slice: task.max_slice,
            flow_window_hours: task.flow_window_hours,
            min_flow_len: task.min_flow_len,
            flow_horizon: task.flow_horizon,
            task_batch_size: task.batch_size,
            task_clip_norm: task.clip_norm,
            kmeans_restarts: task.kmeans_restarts,
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .unwrap_or("<document>")
                .to_string();
            Error::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration to `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(CONFIG_ECHO);
        write_atomic(&path, self.to_toml().as_bytes())?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperparams().validate()?;
        self.sampler().validate()?;
        self.train().validate()?;
        self.task().validate()?;
        let positive = [
            ("min_poi_checkins", self.min_poi_checkins),
            ("min_seq_len", self.min_seq_len),
            ("split_test", self.split_test as usize),
            ("split_val", self.split_val as usize),
            ("split_train", self.split_train as usize),
            ("max_in_flight", self.max_in_flight),
            ("chunk_size", self.chunk_size),
            ("sg_window", self.sg_window),
            ("sg_epochs", self.sg_epochs),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.geocoder_rate_limit > 0.0) {
            return Err(Error::config("geocoder_rate_limit", "must be positive"));
        }
        if !(self.backend_noise >= 0.0 && self.backend_noise.is_finite()) {
            return Err(Error::config("backend_noise", "must be non-negative"));
        }
        if !(self.sg_learning_rate > 0.0) {
            return Err(Error::config("sg_learning_rate", "must be positive"));
        }
        if self.backend == BackendKind::Remote && self.backend_endpoint.is_none() {
            return Err(Error::config("backend_endpoint", "required for the remote backend"));
        }
        if self.geocoder == GeocoderKind::Fixture && self.geocoder_fixture.is_none() {
            return Err(Error::config("geocoder_fixture", "required for the fixture geocoder"));
        }
        if let Some(tz) = self.tz_offset_minutes {
            if tz.abs() > 18 * 60 {
                return Err(Error::config("tz_offset_minutes", "must lie within ±18 hours"));
            }
        }
        Ok(())
    }

    pub fn hyperparams(&self) -> HyperParams {
        HyperParams {
            d: self.d,
            d_prime: self.d_prime,
            heads: self.heads,
            d_h: self.d_h,
            l1: self.l1,
            l2: self.l2,
            feature_dim: self.backend_dim,
            ffn_mult: self.ffn_mult,
            paf_parallel: self.paf_parallel,
            scale_by_head_dim: self.scale_by_head_dim,
            ln_eps: self.ln_eps,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            lambda: self.lambda,
            side_km: self.side_km,
            m: self.m,
            strategies: self.strategies.clone(),
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            seed: self.seed,
            clip_norm: self.clip_norm,
            max_batches_per_epoch: self.max_batches_per_epoch,
        }
    }

    pub fn skipgram(&self) -> SkipGramConfig {
        SkipGramConfig {
            d: self.d,
            window: self.sg_window,
            negatives: self.sg_negatives,
            epochs: self.sg_epochs,
            learning_rate: self.sg_learning_rate,
            seed: self.seed,
        }
    }

    pub fn task(&self) -> TaskConfig {
        TaskConfig {
            lstm_hidden: self.lstm_hidden,
            lstm_layers: self.lstm_layers,
            epochs: self.task_epochs,
            lr_rec: self.lr_rec,
            lr_other: self.lr_other,
            max_slice: self.max_slice,
            flow_window_hours: self.flow_window_hours,
            min_flow_len: self.min_flow_len,
            flow_horizon: self.flow_horizon,
            batch_size: self.task_batch_size,
            clip_norm: self.task_clip_norm,
            kmeans_restarts: self.kmeans_restarts,
            seed: self.seed,
        }
    }

    pub fn split_ratios(&self) -> (u32, u32, u32) {
        (self.split_test, self.split_val, self.split_train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_documented_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let echo = cfg.to_toml();
        for line in [
            "d = 256", "heads = 8", "d_h = 32", "l1 = 4", "l2 = 2", "gamma = 0.1", "lambda = 2", "side_km = 0.5",
        ] {
            assert!(echo.lines().any(|l| l == line), "missing `{line}` in echo");
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_fatal() {
        match RunConfig::parse("dd = 3").unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "dd"),
            e => panic!("unexpected {e}"),
        }
        match RunConfig::parse("m = 2").unwrap_err() {
            Error::Config { key, .. } => assert_eq!(key, "m"),
            e => panic!("unexpected {e}"),
        }
        assert!(RunConfig::parse("d = \"wide\"").is_err());
        assert!(RunConfig::parse("backend = \"remote\"").is_err());
        assert!(RunConfig::parse("heads = 0").is_err());
    }

    #[test]
    fn echo_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::parse(
            "d = 32\nheads = 2\nd_h = 8\nstrategies = [\"geo\", \"func\"]\nclip_norm = 1.5\ntz_offset_minutes = -240\nlearning_rate = 0.0003\n",
        )
        .unwrap();
        let path = cfg.echo(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
        assert_eq!(RunConfig::load(&path).unwrap().to_toml(), cfg.to_toml());
    }
}
