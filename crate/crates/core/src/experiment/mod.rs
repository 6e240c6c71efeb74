//! Experiment orchestration: configuration, checkpoints, runs, sweeps and
//! rendered reports.

mod checkpoint;
mod report;
mod run;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use report::{
    directional_check, fmt_pct, load_run, render_report, render_sweep, summarize, DirectionalCheck, EvalReport,
    MetricSummary, SweepReport,
};
pub use run::{backbone_for, run, run_seed, sweep, Manifest, RunOutcome, SeedRecord, SeedStatus, SweepSpec};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::PromptConfig;
use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::data::{DataError, SyntheticSpec};
use crate::tensor::{to_hex, TensorError};
use crate::train::{CorollaryConfig, TrainConfig};

/// Environment variable naming the directory that receives all artifacts.
pub const OUTPUT_ROOT_ENV: &str = "BMIP_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "bmip-output";

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("{field}: {message}")]
    Config { field: String, message: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: config digest {found} does not match {expected}")]
    Digest {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{0}")]
    Report(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

pub(crate) fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn field(field: &str, message: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Config {
        field: field.to_string(),
        message: message.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    OpenWorld,
    CrossDataset,
    DomainGeneralization,
    Corollary,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub enabled: Vec<Protocol>,
    pub base_fraction: f64,
    /// Class-permuted copies of the source used as transfer targets.
    pub cross_targets: usize,
    /// Non-zero shift magnitudes applied with every shift kind.
    pub shift_magnitudes: Vec<f64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            enabled: vec![Protocol::OpenWorld, Protocol::CrossDataset, Protocol::DomainGeneralization],
            base_fraction: 0.5,
            cross_targets: 3,
            shift_magnitudes: vec![0.15, 0.3],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    /// Seeds trained concurrently; 0 lets the pool decide.
    pub workers: usize,
    /// Overrides the output root; not part of the digest.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            workers: 0,
            output_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub corollary: CorollaryConfig,
    pub protocols: ProtocolConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Every semantic check, reported against the offending key.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        d.validate().map_err(|e| field("data", e))?;
        let b = &self.backbone;
        b.validate().map_err(|e| field("backbone", e))?;
        for (name, dv, bv) in [
            ("caption_len", d.caption_len, b.caption_len),
            ("vocab_size", d.vocab_size, b.vocab_size),
            ("image_side", d.image_side, b.image_side),
            ("channels", d.channels, b.channels),
        ] {
            if dv != bv {
                return Err(field(
                    &format!("backbone.{name}"),
                    format!("{bv} disagrees with data.{name} = {dv}"),
                ));
            }
        }
        let p = &self.pretrain;
        if p.batch < 2 || p.batch > d.classes {
            return Err(field("pretrain.batch", format!("must lie in 2..={}", d.classes)));
        }
        if !(p.lr >= 0.0 && p.lr.is_finite()) {
            return Err(field("pretrain.lr", "must be finite and non-negative"));
        }
        if p.per_class == 0 {
            return Err(field("pretrain.per_class", "must be positive"));
        }
        if !(p.visual_variance >= 0.0 && p.visual_variance.is_finite()) {
            return Err(field("pretrain.visual_variance", "must be finite and non-negative"));
        }
        let q = &self.prompt;
        if q.depth > b.depth {
            return Err(field("prompt.depth", format!("{} exceeds backbone.depth {}", q.depth, b.depth)));
        }
        if q.length == 0 {
            return Err(field("prompt.length", "must be at least 1"));
        }
        if !(q.init_std >= 0.0 && q.init_std.is_finite()) {
            return Err(field("prompt.init_std", "must be finite and non-negative"));
        }
        if !(q.similarity_temperature > 0.0) {
            return Err(field("prompt.similarity_temperature", "must be positive"));
        }
        self.train.validate().map_err(|e| field("train", e))?;
        let c = &self.corollary;
        if !(c.lr >= 0.0 && c.lr.is_finite()) {
            return Err(field("corollary.lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&c.momentum) {
            return Err(field("corollary.momentum", "must lie in [0, 1)"));
        }
        let pr = &self.protocols;
        if !(pr.base_fraction > 0.0 && pr.base_fraction < 1.0) {
            return Err(field("protocols.base_fraction", "must lie strictly between 0 and 1"));
        }
        if pr.shift_magnitudes.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(field("protocols.shift_magnitudes", "magnitudes must be positive"));
        }
        if self.run.seeds.is_empty() {
            return Err(field("run.seeds", "at least one seed is required"));
        }
        let mut seeds = self.run.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.run.seeds.len() {
            return Err(field("run.seeds", "seeds must be distinct"));
        }
        Ok(())
    }

    /// Canonical JSON of every semantic field (the output location excluded).
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.run.output_dir = None;
        let value = serde_json::to_value(&c).expect("config serialises");
        serde_json::to_string(&value).expect("json value serialises")
    }

    pub fn digest(&self) -> String {
        to_hex(&Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Output root from the config, the environment, or the default.
    pub fn output_root(&self) -> PathBuf {
        if let Some(dir) = &self.run.output_dir {
            return dir.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(DEFAULT_OUTPUT_ROOT),
        }
    }

    /// Key of the pretrained backbone these settings produce.
    pub fn backbone_key(&self) -> String {
        let world = SyntheticSpec {
            sample_seed: 0,
            ..self.data.clone()
        };
        let value = serde_json::json!({
            "data": world,
            "backbone": self.backbone,
            "pretrain": self.pretrain,
        });
        to_hex(&Sha256::digest(value.to_string().as_bytes()))
    }

    /// Human-readable plan printed by dry runs.
    pub fn plan(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("config digest   {}\n", self.digest()));
        s.push_str(&format!("output root     {}\n", self.output_root().display()));
        s.push_str(&format!("backbone key    {}\n", &self.backbone_key()[..16]));
        s.push_str(&format!(
            "data            N={} shots={} test/class={} sigma_v={} delta_t={}\n",
            self.data.classes,
            self.data.shots,
            self.data.test_per_class,
            self.data.visual_variance,
            self.data.text_separation
        ));
        s.push_str(&format!(
            "pretrain        {} steps, batch {}, sigma_v={}\n",
            self.pretrain.steps, self.pretrain.batch, self.pretrain.visual_variance
        ));
        s.push_str(&format!(
            "prompts         {} J={} b={}\n",
            self.prompt.aggregation, self.prompt.depth, self.prompt.length
        ));
        s.push_str(&format!(
            "train           {} epochs, batch {}, lr {}, momentum {}\n",
            self.train.epochs, self.train.batch, self.train.lr, self.train.momentum
        ));
        let protocols: Vec<String> = self
            .protocols
            .enabled
            .iter()
            .map(|p| serde_json::to_value(p).expect("protocol").as_str().unwrap_or_default().to_string())
            .collect();
        s.push_str(&format!("protocols       {}\n", protocols.join(", ")));
        s.push_str(&format!("seeds           {:?}\n", self.run.seeds));
        s
    }
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Pretty JSON with object keys in sorted order.
pub fn canonical_pretty<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serialisable record");
    let mut s = serde_json::to_string_pretty(&v).expect("json value serialises");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_ignores_formatting_and_output_dir() {
        let a = ExperimentConfig::from_toml("[train]\nepochs = 3\n").unwrap();
        let b = ExperimentConfig::from_toml("# comment\n[train]\n  epochs   =   3  \n[run]\noutput_dir = \"/tmp/x\"\n")
            .unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = ExperimentConfig::from_toml("[train]\nepochs = 4\n").unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn unknown_and_invalid_fields_are_named() {
        let e = ExperimentConfig::from_toml("[train]\nepoch = 3\n").unwrap_err();
        assert!(e.to_string().contains("epoch"), "{e}");
        let e = ExperimentConfig::from_toml("[prompt]\ndepth = 9\n").unwrap_err();
        assert!(e.to_string().starts_with("prompt.depth"), "{e}");
        let e = ExperimentConfig::from_toml("[run]\nseeds = []\n").unwrap_err();
        assert!(e.to_string().starts_with("run.seeds"), "{e}");
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        assert!(cfg.to_toml().contains("aggregation = \"bmip\""));
    }
}
