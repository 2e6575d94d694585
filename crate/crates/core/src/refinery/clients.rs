//! Interfaces to the captioning, segmentation, detection and parsing models.

use std::sync::Arc;

use thiserror::Error;

use super::geometry::{BoundingBox, SegmentMask};
use super::ScoredPhrase;
use crate::scene_graph::{Phrase, SceneGraph};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{client}: {message}")]
pub struct ClientError {
    pub client: String,
    pub message: String,
}

impl ClientError {
    pub fn new(client: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            client: client.into(),
            message: message.into(),
        }
    }
}

/// Material handed to the captioner when it rewrites the long caption.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeContext {
    pub long_caption: String,
    /// Phrases from local captions that passed the detector filter and are
    /// not already in the long caption.
    pub local_phrases: Vec<String>,
    /// Phrases of the long caption that the detector filtered out.
    pub rejected_phrases: Vec<String>,
}

impl MergeContext {
    /// Plain-text rendering used as the merge prompt body.
    pub fn render(&self) -> String {
        let mut out = self.long_caption.clone();
        if !self.local_phrases.is_empty() {
            out.push_str("\nAdd details: ");
            out.push_str(&self.local_phrases.join("; "));
        }
        if !self.rejected_phrases.is_empty() {
            out.push_str("\nRemove: ");
            out.push_str(&self.rejected_phrases.join("; "));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind<'a> {
    Long,
    Local { index: usize, bbox: BoundingBox },
    Merge(&'a MergeContext),
}

impl PromptKind<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            PromptKind::Long => "long",
            PromptKind::Local { .. } => "local",
            PromptKind::Merge(_) => "merge",
        }
    }
}

/// Every client reports whether it tolerates concurrent calls; the
/// orchestrator only fans out when all clients of an agent agree.
pub trait Captioner: Send + Sync {
    fn caption(&self, image_ref: &str, prompt: PromptKind<'_>) -> Result<String, ClientError>;

    fn concurrent_safe(&self) -> bool {
        true
    }
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, image_ref: &str) -> Result<Vec<SegmentMask>, ClientError>;

    fn concurrent_safe(&self) -> bool {
        true
    }
}

pub trait Detector: Send + Sync {
    /// Scores each phrase against the whole image. Phrases missing from the
    /// result count as score 0.
    fn score(&self, image_ref: &str, phrases: &[Phrase]) -> Result<Vec<ScoredPhrase>, ClientError>;

    fn concurrent_safe(&self) -> bool {
        true
    }
}

pub trait SceneParser: Send + Sync {
    fn parse(&self, text: &str) -> Result<SceneGraph, ClientError>;

    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// The four model clients used by one captioning agent.
#[derive(Clone)]
pub struct ModelClients {
    pub captioner: Arc<dyn Captioner>,
    pub segmenter: Arc<dyn Segmenter>,
    pub detector: Arc<dyn Detector>,
    pub parser: Arc<dyn SceneParser>,
}

impl ModelClients {
    pub fn concurrent_safe(&self) -> bool {
        self.captioner.concurrent_safe()
            && self.segmenter.concurrent_safe()
            && self.detector.concurrent_safe()
            && self.parser.concurrent_safe()
    }
}

/// A named captioning agent with its clients.
#[derive(Clone)]
pub struct Agent {
    pub name: String,
    pub clients: ModelClients,
}
