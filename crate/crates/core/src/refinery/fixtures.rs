//! Fixture-backed stub clients.
//!
//! A fixture directory holds one `<image_id>.json` record per image and an
//! optional `vocabulary.json` for the rule-based parser:
//!
//! ```json
//! {
//!   "image_id": "img-001",
//!   "masks": [{"segment_id": "s0", "rows": ["0110", "0110"]}],
//!   "captions": {
//!     "agent-a": {"long": "...", "local": ["...", "..."], "merge": null, "fail": []}
//!   },
//!   "detector": {"red car": 0.31},
//!   "parses": {"<exact caption text>": {"objects": [], "attributes": [], "relations": []}}
//! }
//! ```
//!
//! Local captions are returned by box index. A merge request returns the
//! recorded `merge` text when present and otherwise echoes the rendered
//! merge context. `fail` lists prompt kinds (`long`, `local`, `merge`) that
//! return a client error. Detector phrases not listed score 0.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::clients::{Agent, Captioner, ClientError, Detector, ModelClients, PromptKind, SceneParser, Segmenter};
use super::geometry::SegmentMask;
use super::parser::{Vocabulary, VocabularyParser};
use super::ScoredPhrase;
use crate::scene_graph::{normalize_phrase, Phrase, SceneGraph, SceneGraphRecord};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("duplicate fixture for image `{0}`")]
    Duplicate(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRecord {
    pub segment_id: String,
    pub rows: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentFixture {
    #[serde(default)]
    pub long: Option<String>,
    #[serde(default)]
    pub local: Vec<String>,
    #[serde(default)]
    pub merge: Option<String>,
    #[serde(default)]
    pub fail: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageFixture {
    pub image_id: String,
    #[serde(default)]
    pub masks: Vec<MaskRecord>,
    #[serde(default)]
    pub captions: BTreeMap<String, AgentFixture>,
    #[serde(default)]
    pub detector: BTreeMap<String, f64>,
    #[serde(default)]
    pub parses: BTreeMap<String, SceneGraphRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct FixtureStore {
    images: BTreeMap<String, ImageFixture>,
    vocabulary: Vocabulary,
}

const VOCABULARY_FILE: &str = "vocabulary.json";

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, FixtureError> {
    let text = fs::read_to_string(path).map_err(|source| FixtureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| FixtureError::Json {
        path: path.to_path_buf(),
        source,
    })
}

impl FixtureStore {
    pub fn new(images: Vec<ImageFixture>, vocabulary: Vocabulary) -> Result<Self, FixtureError> {
        let mut map = BTreeMap::new();
        for img in images {
            let id = img.image_id.clone();
            if map.insert(id.clone(), img).is_some() {
                return Err(FixtureError::Duplicate(id));
            }
        }
        Ok(Self { images: map, vocabulary })
    }

    pub fn load(dir: &Path) -> Result<Self, FixtureError> {
        let io = |source| FixtureError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(io)?;
        paths.sort();
        let mut images = Vec::new();
        let mut vocabulary = Vocabulary::default();
        for path in paths {
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            if path.file_name().and_then(|n| n.to_str()) == Some(VOCABULARY_FILE) {
                vocabulary = read_json(&path)?;
            } else {
                images.push(read_json(&path)?);
            }
        }
        Self::new(images, vocabulary)
    }

    /// Image ids in lexicographic order.
    pub fn image_ids(&self) -> Vec<String> {
        self.images.keys().cloned().collect()
    }

    /// Every agent named by any fixture, sorted.
    pub fn agent_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .images
            .values()
            .flat_map(|i| i.captions.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn image(&self, image_ref: &str) -> Option<&ImageFixture> {
        self.images.get(image_ref)
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    /// Builds one agent per name, all sharing this store.
    pub fn agents(self: &Arc<Self>, names: &[String]) -> Vec<Agent> {
        let parser: Arc<dyn SceneParser> = Arc::new(FixtureParser::new(self.clone()));
        let segmenter: Arc<dyn Segmenter> = Arc::new(FixtureSegmenter(self.clone()));
        let detector: Arc<dyn Detector> = Arc::new(FixtureDetector(self.clone()));
        names
            .iter()
            .map(|name| Agent {
                name: name.clone(),
                clients: ModelClients {
                    captioner: Arc::new(FixtureCaptioner {
                        store: self.clone(),
                        agent: name.clone(),
                    }),
                    segmenter: segmenter.clone(),
                    detector: detector.clone(),
                    parser: parser.clone(),
                },
            })
            .collect()
    }
}

fn missing(client: &str, what: String) -> ClientError {
    ClientError::new(client, format!("no fixture for {what}"))
}

pub struct FixtureCaptioner {
    store: Arc<FixtureStore>,
    agent: String,
}

impl Captioner for FixtureCaptioner {
    fn caption(&self, image_ref: &str, prompt: PromptKind<'_>) -> Result<String, ClientError> {
        let client = format!("captioner[{}]", self.agent);
        let fixture = self
            .store
            .image(image_ref)
            .and_then(|i| i.captions.get(&self.agent))
            .ok_or_else(|| missing(&client, format!("image `{image_ref}`")))?;
        if fixture.fail.iter().any(|k| k == prompt.name()) {
            return Err(ClientError::new(client, format!("recorded failure for {} prompt", prompt.name())));
        }
        match prompt {
            PromptKind::Long => fixture
                .long
                .clone()
                .ok_or_else(|| missing(&client, format!("long caption of `{image_ref}`"))),
            PromptKind::Local { index, .. } => fixture
                .local
                .get(index)
                .cloned()
                .ok_or_else(|| missing(&client, format!("local caption {index} of `{image_ref}`"))),
            PromptKind::Merge(ctx) => Ok(fixture.merge.clone().unwrap_or_else(|| ctx.render())),
        }
    }
}

pub struct FixtureSegmenter(Arc<FixtureStore>);

impl Segmenter for FixtureSegmenter {
    fn segment(&self, image_ref: &str) -> Result<Vec<SegmentMask>, ClientError> {
        let fixture = self
            .0
            .image(image_ref)
            .ok_or_else(|| missing("segmenter", format!("image `{image_ref}`")))?;
        fixture
            .masks
            .iter()
            .map(|m| SegmentMask::from_rows(m.segment_id.clone(), &m.rows))
            .collect::<Result<_, _>>()
            .map_err(|e| ClientError::new("segmenter", e.to_string()))
    }
}

pub struct FixtureDetector(Arc<FixtureStore>);

impl Detector for FixtureDetector {
    fn score(&self, image_ref: &str, phrases: &[Phrase]) -> Result<Vec<ScoredPhrase>, ClientError> {
        let fixture = self
            .0
            .image(image_ref)
            .ok_or_else(|| missing("detector", format!("image `{image_ref}`")))?;
        let table: BTreeMap<String, f64> = fixture
            .detector
            .iter()
            .filter_map(|(k, v)| normalize_phrase(k).ok().map(|k| (k, *v)))
            .collect();
        Ok(phrases
            .iter()
            .map(|p| ScoredPhrase {
                score: table.get(p.text()).copied().unwrap_or(0.0),
                phrase: p.clone(),
            })
            .collect())
    }
}

/// Recorded parses by exact text, falling back to the vocabulary parser.
pub struct FixtureParser {
    recorded: BTreeMap<String, SceneGraph>,
    fallback: VocabularyParser,
}

impl FixtureParser {
    pub fn new(store: Arc<FixtureStore>) -> Self {
        let recorded = store
            .images
            .values()
            .flat_map(|i| i.parses.iter().map(|(k, v)| (k.clone(), SceneGraph::from(v))))
            .collect();
        Self {
            recorded,
            fallback: VocabularyParser::new(store.vocabulary()),
        }
    }
}

impl SceneParser for FixtureParser {
    fn parse(&self, text: &str) -> Result<SceneGraph, ClientError> {
        Ok(self
            .recorded
            .get(text)
            .cloned()
            .unwrap_or_else(|| self.fallback.extract(text)))
    }
}
