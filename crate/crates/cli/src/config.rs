//! Pipeline configuration: one TOML file, every section optional.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use urban_align::capture::{CaptureWeights, GroupLexicon};
use urban_align::downstream::HeadConfig;
use urban_align::ipsi::IpsiConfig;
use urban_align::pretrain::{EncoderConfig, TrainConfig};
use urban_align::refinery::RefineConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config key {key}: {message}")]
    Key { key: String, message: String },
    #[error("config key {key}: {key} ∈ {range} required (got {value})")]
    Range { key: String, range: String, value: String },
}

fn key_error(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Key {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Input and output locations. Relative paths resolve against the config
/// file's directory.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Fixture directory for the stub model clients (build-captions).
    pub fixtures: Option<PathBuf>,
    /// Caption candidates, line-delimited (score-captions).
    pub candidates: Option<PathBuf>,
    /// Phrase vocabulary for candidates that carry no scene graph.
    pub vocabulary: Option<PathBuf>,
    /// Image-caption pairs, line-delimited (pretrain).
    pub pairs: Option<PathBuf>,
    /// Directory of `<image_id>.json` matrices (pretrain, extract).
    pub images: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Region manifest, line-delimited (extract, predict).
    pub manifest: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    /// Parent of the run-stamped output directories.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptureSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Groups of interchangeable phrases for the synonym matching stage.
    pub synonyms: Vec<Vec<String>>,
    /// Phrases ignored on both sides, such as boilerplate subjects.
    pub stop_list: Vec<String>,
    /// Use the hashing phrase encoder for soft matching; otherwise no soft
    /// credit is given.
    pub soft_matching: bool,
}

impl Default for CaptureSection {
    fn default() -> Self {
        let w = CaptureWeights::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            synonyms: Vec::new(),
            stop_list: Vec::new(),
            soft_matching: true,
        }
    }
}

impl CaptureSection {
    pub fn weights(&self) -> CaptureWeights {
        CaptureWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn lexicon(&self) -> GroupLexicon {
        GroupLexicon::new(self.synonyms.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSection {
    /// Indicator regressed by `predict`.
    pub indicator: String,
}

impl Default for DownstreamSection {
    fn default() -> Self {
        Self {
            indicator: "population".into(),
        }
    }
}

/// Shape of the workspace written by `synth`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub samples: usize,
    pub image_noise: f64,
    /// Fraction of captions rotated onto the wrong image.
    pub mispair_fraction: f64,
    pub regions: usize,
    pub views_per_region: usize,
    /// Noise standard deviation of the log indicator.
    pub indicator_noise: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            samples: 512,
            image_noise: 0.3,
            mispair_fraction: 0.0,
            regions: 100,
            views_per_region: 4,
            indicator_noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root seed; every stage derives its own seed from it.
    pub seed: u64,
    pub paths: Paths,
    pub refine: RefineConfig,
    pub capture: CaptureSection,
    pub ipsi: IpsiConfig,
    pub encoder: EncoderConfig,
    pub pretrain: TrainConfig,
    pub head: HeadConfig,
    pub downstream: DownstreamSection,
    pub synth: SynthSection,
}

/// Keys that the pipeline derives itself and will not take from the file.
const DERIVED_KEYS: &[(&str, &str, &str)] = &[
    ("pretrain", "seed", "derived from the top-level seed"),
    ("encoder", "vocab_size", "derived from the fitted tokenizer"),
];

fn reject_derived(table: &toml::Table) -> Result<(), ConfigError> {
    for (section, key, why) in DERIVED_KEYS {
        if table
            .get(*section)
            .and_then(toml::Value::as_table)
            .is_some_and(|t| t.contains_key(*key))
        {
            return Err(key_error(&format!("{section}.{key}"), format!("not settable, {why}")));
        }
    }
    Ok(())
}

fn range(key: &str, range: &str, value: impl ToString) -> ConfigError {
    ConfigError::Range {
        key: key.to_string(),
        range: range.to_string(),
        value: value.to_string(),
    }
}

impl PipelineConfig {
    /// Parses and validates configuration text. `base` anchors relative paths.
    pub fn from_toml(text: &str, base: &Path, origin: &Path) -> Result<Self, ConfigError> {
        let parse_error = |message: String| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: message.replace('\n', " ").trim().to_string(),
        };
        let table: toml::Table = toml::from_str(text).map_err(|e| parse_error(e.message().to_string()))?;
        reject_derived(&table)?;
        let mut cfg: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| parse_error(e.message().to_string()))?;
        cfg.paths.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks for every section.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.refine.validate().map_err(|e| key_error("refine", e.to_string()))?;
        self.capture
            .weights()
            .validate()
            .map_err(|e| key_error("capture", e.to_string()))?;
        self.ipsi
            .validate(self.encoder.native_text_positions)
            .map_err(|e| key_error("ipsi", e.to_string()))?;
        let encoder = EncoderConfig {
            vocab_size: 1,
            ..self.encoder.clone()
        };
        encoder.validate().map_err(|e| key_error("encoder", e.to_string()))?;
        if let Err(e) = self.pretrain.validate() {
            return Err(range(&format!("pretrain.{}", e.key), e.range, e.value));
        }
        self.head.validate().map_err(|e| key_error("head", e.to_string()))?;
        for (key, v) in [
            ("synth.samples", self.synth.samples),
            ("synth.views_per_region", self.synth.views_per_region),
        ] {
            if v == 0 {
                return Err(range(key, "[1,inf)", v));
            }
        }
        if self.downstream.indicator.trim().is_empty() {
            return Err(key_error("downstream.indicator", "must name an indicator"));
        }
        if !(0.0..=1.0).contains(&self.synth.mispair_fraction) {
            return Err(range("synth.mispair_fraction", "[0,1]", self.synth.mispair_fraction));
        }
        for (key, v) in [
            ("synth.image_noise", self.synth.image_noise),
            ("synth.indicator_noise", self.synth.indicator_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(range(key, "[0,inf)", v));
            }
        }
        if self.synth.regions < 5 {
            return Err(range("synth.regions", "[5,inf)", self.synth.regions));
        }
        Ok(())
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.fixtures,
            &mut self.candidates,
            &mut self.vocabulary,
            &mut self.pairs,
            &mut self.images,
            &mut self.checkpoint,
            &mut self.manifest,
            &mut self.embeddings,
            &mut self.predictions,
            &mut self.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Returns the configured input path for `key`, checking that it exists.
pub fn require(path: &Option<PathBuf>, key: &str, command: &str) -> Result<PathBuf, ConfigError> {
    let p = path
        .as_ref()
        .ok_or_else(|| key_error(&format!("paths.{key}"), format!("required by {command}")))?;
    if !p.exists() {
        return Err(key_error(&format!("paths.{key}"), format!("{} does not exist", p.display())));
    }
    Ok(p.clone())
}

/// Loads the file at `path`, or the defaults when no path is given.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig, ConfigError> {
    let Some(path) = path else {
        let cwd = std::env::current_dir().unwrap_or_default();
        return PipelineConfig::from_toml("", &cwd, Path::new("<defaults>"));
    };
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    PipelineConfig::from_toml(&text, &base, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<PipelineConfig, ConfigError> {
        PipelineConfig::from_toml(text, Path::new("/base"), Path::new("t.toml"))
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.ipsi.ratio, 4);
        assert_eq!(cfg.pretrain.mu, 0.5);
        assert_eq!(cfg.pretrain.momentum, 0.995);
        assert_eq!(cfg.pretrain.queue_size, 4096);
        assert_eq!((cfg.capture.alpha, cfg.capture.beta, cfg.capture.gamma), (5.0, 5.0, 2.0));
        assert_eq!(cfg.refine.phrase_score_threshold, 0.01);
    }

    #[test]
    fn mu_out_of_range_names_the_key_and_range() {
        let err = parse("[pretrain]\nmu = 1.5\n").unwrap_err().to_string();
        assert!(err.contains("mu ∈ (0,1)"), "{err}");
        assert!(err.contains("pretrain.mu"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse("foo = 1\n").unwrap_err().to_string();
        assert!(err.contains("foo"), "{err}");
        assert!(parse("[pretrain]\nfoo = 1\n").is_err());
        assert!(parse("[capture]\ndelta = 1.0\n").is_err());
    }

    #[test]
    fn type_errors_are_reported() {
        assert!(parse("seed = \"seven\"\n").is_err());
    }

    #[test]
    fn derived_keys_are_not_settable() {
        let err = parse("[pretrain]\nseed = 3\n").unwrap_err().to_string();
        assert!(err.contains("pretrain.seed"), "{err}");
        assert!(parse("[encoder]\nvocab_size = 10\n").is_err());
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let cfg = parse("[paths]\nmanifest = \"m.jsonl\"\nimages = \"/abs/img\"\n").unwrap();
        assert_eq!(cfg.paths.manifest.unwrap(), Path::new("/base/m.jsonl"));
        assert_eq!(cfg.paths.images.unwrap(), Path::new("/abs/img"));
    }
}
