//! Rule-based scene-graph extraction over a fixed vocabulary.
//!
//! Objects are vocabulary terms found in the text (longest match first). An
//! attribute phrase is an attribute term immediately before an object
//! ("red car"). A relation phrase joins the nearest object before and after a
//! relation term within one sentence ("tree beside road").

use serde::{Deserialize, Serialize};

use super::clients::{ClientError, SceneParser};
use crate::scene_graph::{normalize_phrase, SceneGraph};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Vocabulary {
    pub objects: Vec<String>,
    pub attributes: Vec<String>,
    pub relations: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct VocabularyParser {
    objects: Vec<Vec<String>>,
    attributes: Vec<Vec<String>>,
    relations: Vec<Vec<String>>,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn prepare(terms: &[String]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = terms
        .iter()
        .filter_map(|t| normalize_phrase(t).ok())
        .map(|t| tokenize(&t))
        .filter(|t| !t.is_empty())
        .collect();
    // longest first, then lexicographic
    out.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    out.dedup();
    out
}

/// Non-overlapping term occurrences as (start, end, term).
fn find_terms<'a>(tokens: &[String], terms: &'a [Vec<String>]) -> Vec<(usize, usize, &'a [String])> {
    let mut hits = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if let Some(term) = terms
            .iter()
            .find(|t| tokens.len() - i >= t.len() && tokens[i..i + t.len()] == t[..])
        {
            hits.push((i, i + term.len(), term.as_slice()));
            i += term.len();
        } else {
            i += 1;
        }
    }
    hits
}

impl VocabularyParser {
    pub fn new(vocab: &Vocabulary) -> Self {
        Self {
            objects: prepare(&vocab.objects),
            attributes: prepare(&vocab.attributes),
            relations: prepare(&vocab.relations),
        }
    }

    pub fn extract(&self, text: &str) -> SceneGraph {
        let mut graph = SceneGraph::default();
        for sentence in text.split(['.', '!', '?', ';', '\n']) {
            let tokens = tokenize(sentence);
            let objects = find_terms(&tokens, &self.objects);
            let attrs = find_terms(&tokens, &self.attributes);
            let rels = find_terms(&tokens, &self.relations);
            for &(start, _, obj) in &objects {
                graph.objects.insert_raw(&obj.join(" "));
                if let Some(&(_, _, attr)) = attrs.iter().find(|a| a.1 == start) {
                    graph
                        .attributes
                        .insert_raw(&format!("{} {}", attr.join(" "), obj.join(" ")));
                }
            }
            for &(rs, re, rel) in &rels {
                let subject = objects.iter().rev().find(|o| o.1 <= rs);
                let object = objects.iter().find(|o| o.0 >= re);
                if let (Some(s), Some(o)) = (subject, object) {
                    graph
                        .relations
                        .insert_raw(&format!("{} {} {}", s.2.join(" "), rel.join(" "), o.2.join(" ")));
                }
            }
        }
        graph
    }
}

impl SceneParser for VocabularyParser {
    fn parse(&self, text: &str) -> Result<SceneGraph, ClientError> {
        Ok(self.extract(text))
    }
}
