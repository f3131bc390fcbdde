//! Run configuration: a single TOML document with explicit schema
//! versioning. The resolved config re-serializes to a canonical text;
//! every run directory embeds that text, and its hash is stamped into
//! checkpoints.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CorpusSpec;
use crate::meta::{Method, MetaConfig, OuterKind, TrainSettings};
use crate::model::{AdaptMode, EncoderConfig};
use crate::optim::{AdamWConfig, CyclicSchedule};
use crate::rng::fnv1a64;

pub const CONFIG_SCHEMA: u32 = 1;
pub const DEFAULT_SEEDS: [u64; 5] = [999, 2023, 555, 123, 42];

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Io(String),
    Parse(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "config i/o: {e}"),
            ConfigError::Parse(e) => write!(f, "config parse error: {e}"),
            ConfigError::Invalid(e) => write!(f, "invalid config: {e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptChoice {
    Full,
    Head,
    Lora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub method: Method,
    pub adapt: AdaptChoice,
    /// Adapter rank; required when `adapt = "lora"`.
    pub rank: Option<usize>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub lr_min: f64,
    pub lr_max: f64,
    pub step_size_epochs: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub erm_batch: usize,
    pub outer: OuterKind,
}

impl Default for OptimSection {
    fn default() -> Self {
        let s = CyclicSchedule::default();
        let a = AdamWConfig::default();
        OptimSection {
            lr_min: s.lr_min,
            lr_max: s.lr_max,
            step_size_epochs: s.step_size_epochs,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            erm_batch: 16,
            outer: OuterKind::Adamw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            max_epochs: 100,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub seed: u64,
    /// Omitted: the built-in benchmark corpus. Resolution expands it so
    /// the persisted config is self-contained.
    pub spec: Option<CorpusSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSet {
    pub name: String,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub run: RunSection,
    pub model: EncoderConfig,
    pub optim: OptimSection,
    pub meta: MetaConfig,
    pub train: TrainSection,
    pub data: DataSection,
    #[serde(default)]
    pub eval: Vec<EvalSet>,
}

impl RunConfig {
    /// Desk-scale benchmark preset: rank-16 adapters on the synthetic
    /// six-domain corpus, five seeds, learning rates raised to suit the
    /// small trainable set.
    pub fn toy_benchmark() -> RunConfig {
        RunConfig {
            schema: CONFIG_SCHEMA,
            run: RunSection {
                method: Method::Mldg,
                adapt: AdaptChoice::Lora,
                rank: Some(16),
                seeds: DEFAULT_SEEDS.to_vec(),
                out_dir: PathBuf::from("runs/toy"),
            },
            model: EncoderConfig::default(),
            optim: OptimSection {
                lr_min: 1e-4,
                lr_max: 3e-3,
                step_size_epochs: 12.0,
                erm_batch: 16,
                ..OptimSection::default()
            },
            meta: MetaConfig {
                inner_lr: 0.01,
                ..MetaConfig::default()
            },
            train: TrainSection {
                max_epochs: 30,
                patience: 10,
            },
            data: DataSection {
                manifest: None,
                synthetic: Some(SyntheticSection {
                    seed: 7,
                    spec: Some(CorpusSpec::default_benchmark()),
                }),
            },
            eval: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema != CONFIG_SCHEMA {
            return Err(ConfigError::Invalid(format!(
                "schema {} unsupported (expected {CONFIG_SCHEMA})",
                self.schema
            )));
        }
        if self.run.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must be non-empty".into()));
        }
        match (self.run.adapt, self.run.rank) {
            (AdaptChoice::Lora, None) => {
                return Err(ConfigError::Invalid("adapt = \"lora\" requires rank".into()))
            }
            (AdaptChoice::Lora, Some(0)) => {
                return Err(ConfigError::Invalid("rank must be >= 1".into()))
            }
            (AdaptChoice::Full | AdaptChoice::Head, Some(_)) => {
                return Err(ConfigError::Invalid(
                    "rank is only meaningful with adapt = \"lora\"".into(),
                ))
            }
            _ => {}
        }
        match (&self.data.manifest, &self.data.synthetic) {
            (None, None) => {
                return Err(ConfigError::Invalid(
                    "data needs either `manifest` or `synthetic`".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "data cannot have both `manifest` and `synthetic`".into(),
                ))
            }
            _ => {}
        }
        if let Some(synth) = &self.data.synthetic {
            if let Some(spec) = &synth.spec {
                if spec.d_model != self.model.d_model || spec.seq_len != self.model.seq_len {
                    return Err(ConfigError::Invalid(format!(
                        "synthetic corpus is {}x{} but the model expects {}x{}",
                        spec.seq_len, spec.d_model, self.model.seq_len, self.model.d_model
                    )));
                }
            }
        }
        self.model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Fill in defaults (expand the implicit synthetic spec) so the
    /// persisted config is self-contained.
    pub fn resolve(mut self) -> Result<RunConfig, ConfigError> {
        if let Some(synth) = &mut self.data.synthetic {
            if synth.spec.is_none() {
                synth.spec = Some(CorpusSpec::default_benchmark());
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn adapt_mode(&self) -> AdaptMode {
        match self.run.adapt {
            AdaptChoice::Full => AdaptMode::Full,
            AdaptChoice::Head => AdaptMode::HeadOnly,
            AdaptChoice::Lora => AdaptMode::Lora {
                rank: self.run.rank.expect("validated"),
            },
        }
    }

    pub fn schedule(&self) -> CyclicSchedule {
        CyclicSchedule {
            lr_min: self.optim.lr_min,
            lr_max: self.optim.lr_max,
            step_size_epochs: self.optim.step_size_epochs,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.optim.lr_max,
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
            weight_decay: self.optim.weight_decay,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            method: self.run.method,
            meta: self.meta,
            erm_batch: self.optim.erm_batch,
            schedule: self.schedule(),
            adamw: self.adamw(),
            outer: self.optim.outer,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
        }
    }

    /// Canonical serialized form; field order is fixed by the struct.
    pub fn canonical_text(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn content_hash(&self) -> u64 {
        fnv1a64(self.canonical_text().as_bytes())
    }

    pub fn from_str(text: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.resolve()
    }

    pub fn from_path(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        Self::from_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::toy_benchmark().resolve().unwrap();
        let text = cfg.canonical_text();
        let parsed = RunConfig::from_str(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.canonical_text(), text);
        assert_eq!(parsed.content_hash(), cfg.content_hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::toy_benchmark().canonical_text();
        text.push_str("\n[bogus]\nx = 1\n");
        assert!(matches!(
            RunConfig::from_str(&text).unwrap_err(),
            ConfigError::Parse(_)
        ));
    }

    #[test]
    fn lora_without_rank_is_invalid() {
        let mut cfg = RunConfig::toy_benchmark();
        cfg.run.rank = None;
        assert!(matches!(cfg.validate().unwrap_err(), ConfigError::Invalid(_)));
    }

    #[test]
    fn data_source_must_be_exclusive() {
        let mut cfg = RunConfig::toy_benchmark();
        cfg.data.manifest = Some(PathBuf::from("x/manifest.csv"));
        assert!(matches!(cfg.validate().unwrap_err(), ConfigError::Invalid(_)));
        cfg.data.manifest = None;
        cfg.data.synthetic = None;
        assert!(matches!(cfg.validate().unwrap_err(), ConfigError::Invalid(_)));
    }

    #[test]
    fn dimension_mismatch_is_caught_before_training() {
        let mut cfg = RunConfig::toy_benchmark();
        cfg.model.d_model = 8;
        cfg.model.n_heads = 2;
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)), "{err}");
    }

    #[test]
    fn implicit_synthetic_spec_expands_on_resolve() {
        let mut cfg = RunConfig::toy_benchmark();
        cfg.data.synthetic.as_mut().unwrap().spec = None;
        let resolved = cfg.resolve().unwrap();
        assert_eq!(
            resolved.data.synthetic.unwrap().spec.unwrap(),
            CorpusSpec::default_benchmark()
        );
    }

    #[test]
    fn default_seeds_match_the_published_set() {
        assert_eq!(DEFAULT_SEEDS, [999, 2023, 555, 123, 42]);
        assert_eq!(RunConfig::toy_benchmark().run.seeds, DEFAULT_SEEDS.to_vec());
    }
}
