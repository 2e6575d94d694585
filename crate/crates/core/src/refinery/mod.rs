//! Divide-and-conquer caption refinement and consensus dataset building.
//!
//! Per image and agent: segment, take one maximal rectangle per surviving
//! mask, suppress overlapping boxes, caption each box, parse long and local
//! captions into phrases, score phrases with the detector, drop phrases
//! scored below the threshold and ask the agent to merge what is left into
//! its long caption. The refined candidates of all agents are then scored
//! against each other and the consensus winner is kept.

mod clients;
mod fixtures;
mod geometry;
mod parser;

use std::collections::BTreeSet;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clients::{
    Agent, Captioner, ClientError, Detector, MergeContext, ModelClients, PromptKind, SceneParser, Segmenter,
};
pub use fixtures::{AgentFixture, FixtureError, FixtureStore, ImageFixture, MaskRecord};
pub use geometry::{dedup_boxes, largest_rectangle, BoundingBox, MaskError, SegmentMask};
pub use parser::{Vocabulary, VocabularyParser};

use crate::capture::CaptureScorer;
use crate::scene_graph::{CaptionCandidate, Phrase, SceneGraph};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPhrase {
    pub phrase: Phrase,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub phrase_score_threshold: f64,
    pub box_iou_threshold: f64,
    pub max_boxes: usize,
    /// Masks covering less than this fraction of the image are ignored.
    pub min_area_fraction: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            phrase_score_threshold: 0.01,
            box_iou_threshold: 0.5,
            max_boxes: 8,
            min_area_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefineConfigError {
    #[error("refine.{key} must be in {range} (got {value})")]
    OutOfRange { key: &'static str, range: &'static str, value: f64 },
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineConfigError> {
        let unit = |key, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(RefineConfigError::OutOfRange {
                    key,
                    range: "[0, 1]",
                    value,
                })
            }
        };
        unit("phrase_score_threshold", self.phrase_score_threshold)?;
        unit("box_iou_threshold", self.box_iou_threshold)?;
        unit("min_area_fraction", self.min_area_fraction)?;
        if self.max_boxes == 0 {
            return Err(RefineConfigError::OutOfRange {
                key: "max_boxes",
                range: "[1, inf)",
                value: 0.0,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Segment,
    LocalCaption,
    Parse,
    Detect,
    Merge,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Segment => "segment",
            Stage::LocalCaption => "local-caption",
            Stage::Parse => "parse",
            Stage::Detect => "detect",
            Stage::Merge => "merge",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{stage} stage failed: {source}")]
pub struct RefineError {
    pub stage: Stage,
    #[source]
    pub source: ClientError,
}

fn at(stage: Stage) -> impl FnOnce(ClientError) -> RefineError {
    move |source| RefineError { stage, source }
}

/// Splits phrases into kept (`score >= threshold`) and discarded.
pub fn filter_phrases(scored: &[ScoredPhrase], cfg: &RefineConfig) -> (Vec<ScoredPhrase>, Vec<ScoredPhrase>) {
    scored
        .iter()
        .cloned()
        .partition(|p| p.score >= cfg.phrase_score_threshold)
}

/// Salient boxes for an image: one maximal rectangle per large-enough mask,
/// then overlap suppression.
pub fn salient_boxes(masks: &[SegmentMask], cfg: &RefineConfig) -> Vec<BoundingBox> {
    let boxes: Vec<BoundingBox> = masks
        .iter()
        .filter(|m| m.set_count() > 0 && m.area_fraction() >= cfg.min_area_fraction)
        .filter_map(|m| largest_rectangle(m).ok())
        .collect();
    dedup_boxes(&boxes, cfg.box_iou_threshold, cfg.max_boxes)
}

fn push_unique(list: &mut Vec<String>, seen: &mut BTreeSet<String>, text: &str) {
    if seen.insert(text.to_string()) {
        list.push(text.to_string());
    }
}

pub fn refine_caption(
    image_ref: &str,
    long_caption: &str,
    clients: &ModelClients,
    cfg: &RefineConfig,
) -> Result<String, RefineError> {
    let masks = clients.segmenter.segment(image_ref).map_err(at(Stage::Segment))?;
    let boxes = salient_boxes(&masks, cfg);
    if boxes.is_empty() {
        return Ok(long_caption.to_string());
    }

    let local_captions = boxes
        .iter()
        .enumerate()
        .map(|(index, &bbox)| clients.captioner.caption(image_ref, PromptKind::Local { index, bbox }))
        .collect::<Result<Vec<_>, _>>()
        .map_err(at(Stage::LocalCaption))?;

    let long_graph = clients.parser.parse(long_caption).map_err(at(Stage::Parse))?;
    let mut local_graph = SceneGraph::default();
    for text in &local_captions {
        let g = clients.parser.parse(text).map_err(at(Stage::Parse))?;
        for p in g.phrases() {
            local_graph.bag_mut(p.category()).insert_raw(p.text());
        }
    }

    // distinct phrases, long caption first
    let mut seen = BTreeSet::new();
    let queries: Vec<Phrase> = long_graph
        .phrases()
        .into_iter()
        .chain(local_graph.phrases())
        .filter(|p| seen.insert(p.clone()))
        .collect();
    let scored = clients.detector.score(image_ref, &queries).map_err(at(Stage::Detect))?;
    let (kept, discarded) = filter_phrases(&scored, cfg);

    let mut ctx = MergeContext {
        long_caption: long_caption.to_string(),
        ..MergeContext::default()
    };
    let mut listed = BTreeSet::new();
    for p in &kept {
        let (text, cat) = (p.phrase.text(), p.phrase.category());
        if local_graph.bag(cat).count(text) > 0 && long_graph.bag(cat).count(text) == 0 {
            push_unique(&mut ctx.local_phrases, &mut listed, text);
        }
    }
    let mut listed = BTreeSet::new();
    for p in &discarded {
        let (text, cat) = (p.phrase.text(), p.phrase.category());
        if long_graph.bag(cat).count(text) > 0 {
            push_unique(&mut ctx.rejected_phrases, &mut listed, text);
        }
    }

    clients
        .captioner
        .caption(image_ref, PromptKind::Merge(&ctx))
        .map_err(at(Stage::Merge))
}

/// One image-text pair of the consensus dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub image_id: String,
    pub caption_text: String,
    pub source_agent: String,
    pub consensus_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedImage {
    pub image_id: String,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairDataset {
    pub pairs: Vec<PairRecord>,
    /// Every refined candidate, with its graph, in image then agent order.
    pub candidates: Vec<CaptionCandidate>,
    pub skipped: Vec<SkippedImage>,
    /// Agent failures on images that still produced a pair.
    pub agent_failures: Vec<(String, String, String)>,
}

impl PairDataset {
    pub fn skip_count(&self) -> usize {
        self.skipped.len()
    }
}

fn agent_candidate(image_id: &str, agent: &Agent, cfg: &RefineConfig) -> Result<CaptionCandidate, String> {
    let clients = &agent.clients;
    let long = clients
        .captioner
        .caption(image_id, PromptKind::Long)
        .map_err(|e| format!("long-caption stage failed: {e}"))?;
    let text = refine_caption(image_id, &long, clients, cfg).map_err(|e| e.to_string())?;
    let graph = clients
        .parser
        .parse(&text)
        .map_err(|e| format!("parse stage failed: {e}"))?;
    Ok(CaptionCandidate {
        id: format!("{image_id}/{}", agent.name),
        image_id: image_id.to_string(),
        source_agent: agent.name.clone(),
        text,
        graph: Some(graph),
    })
}

enum ImageOutcome {
    Pair {
        record: PairRecord,
        candidates: Vec<CaptionCandidate>,
        failures: Vec<(String, String, String)>,
    },
    Skipped(SkippedImage),
}

fn build_one(image_id: &str, agents: &[Agent], cfg: &RefineConfig, scorer: &CaptureScorer) -> ImageOutcome {
    let mut candidates = Vec::new();
    let mut failures = Vec::new();
    for agent in agents {
        match agent_candidate(image_id, agent, cfg) {
            Ok(c) => candidates.push(c),
            Err(reason) => {
                warn!("image {image_id}: agent {} skipped: {reason}", agent.name);
                failures.push((image_id.to_string(), agent.name.clone(), reason));
            }
        }
    }
    if candidates.is_empty() {
        warn!("image {image_id}: every agent failed, image skipped");
        return ImageOutcome::Skipped(SkippedImage {
            image_id: image_id.to_string(),
            reasons: failures.into_iter().map(|f| format!("{}: {}", f.1, f.2)).collect(),
        });
    }
    let result = scorer
        .select_caption(&candidates)
        .expect("candidates are non-empty and carry graphs");
    let winner = &candidates[result.selected_index];
    ImageOutcome::Pair {
        record: PairRecord {
            image_id: image_id.to_string(),
            caption_text: winner.text.clone(),
            source_agent: winner.source_agent.clone(),
            consensus_score: result.selected_score,
        },
        candidates,
        failures,
    }
}

/// Builds the consensus image-text dataset. Images are processed in
/// parallel only when every agent's clients are safe for concurrent calls;
/// output order always follows `images`.
pub fn build_pair_dataset(images: &[String], agents: &[Agent], cfg: &RefineConfig, scorer: &CaptureScorer) -> PairDataset {
    let parallel = agents.iter().all(|a| a.clients.concurrent_safe());
    let outcomes: Vec<ImageOutcome> = if parallel {
        images.par_iter().map(|i| build_one(i, agents, cfg, scorer)).collect()
    } else {
        images.iter().map(|i| build_one(i, agents, cfg, scorer)).collect()
    };
    let mut ds = PairDataset::default();
    for outcome in outcomes {
        match outcome {
            ImageOutcome::Pair {
                record,
                candidates,
                failures,
            } => {
                ds.pairs.push(record);
                ds.candidates.extend(candidates);
                ds.agent_failures.extend(failures);
            }
            ImageOutcome::Skipped(s) => ds.skipped.push(s),
        }
    }
    ds
}
