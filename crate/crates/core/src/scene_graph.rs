//! Caption content as object / attribute / relation phrase multisets.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Object,
    Attribute,
    Relation,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Object, Category::Attribute, Category::Relation];

    /// Key used for this category in scene-graph records.
    pub fn field(self) -> &'static str {
        match self {
            Category::Object => "objects",
            Category::Attribute => "attributes",
            Category::Relation => "relations",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.field())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("phrase is empty after normalization")]
pub struct EmptyPhrase;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("scene-graph record is not an object")]
    NotAnObject,
    #[error("scene-graph record is missing field `{0}`")]
    MissingField(&'static str),
    #[error("scene-graph field `{0}` is not a list")]
    NotAList(&'static str),
    #[error("scene-graph field `{field}` entry {index} is not a string")]
    NonStringEntry { field: &'static str, index: usize },
    #[error("scene-graph record has unknown field `{0}`")]
    UnknownField(String),
}

/// Lowercases, trims and collapses internal whitespace runs to a single space.
pub fn normalize_phrase(raw: &str) -> Result<String, EmptyPhrase> {
    let mut out = String::with_capacity(raw.len());
    for token in raw.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&token.to_lowercase());
    }
    if out.is_empty() {
        Err(EmptyPhrase)
    } else {
        Ok(out)
    }
}

/// A canonical phrase tagged with its category.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Phrase {
    text: String,
    category: Category,
}

impl Phrase {
    pub fn new(raw: &str, category: Category) -> Result<Self, EmptyPhrase> {
        Ok(Self {
            text: normalize_phrase(raw)?,
            category,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn category(&self) -> Category {
        self.category
    }
}

/// Multiset of canonical phrase strings. Iteration order is lexicographic.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhraseBag {
    counts: BTreeMap<String, usize>,
}

impl PhraseBag {
    pub fn new() -> Self {
        Self::default()
    }

    /// Normalizes and inserts; empty phrases are dropped and reported as `false`.
    pub fn insert_raw(&mut self, raw: &str) -> bool {
        match normalize_phrase(raw) {
            Ok(text) => {
                *self.counts.entry(text).or_insert(0) += 1;
                true
            }
            Err(EmptyPhrase) => false,
        }
    }

    pub fn count(&self, phrase: &str) -> usize {
        self.counts.get(phrase).copied().unwrap_or(0)
    }

    /// Total number of phrase occurrences.
    pub fn len(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Distinct phrases with their multiplicities.
    pub fn distinct(&self) -> impl Iterator<Item = (&str, usize)> {
        self.counts.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Every occurrence, repeated phrases adjacent.
    pub fn occurrences(&self) -> impl Iterator<Item = &str> {
        self.counts
            .iter()
            .flat_map(|(k, &v)| std::iter::repeat_n(k.as_str(), v))
    }

    /// Copy without the listed phrases (already canonical).
    pub fn without<'a>(&self, stop: impl IntoIterator<Item = &'a str>) -> PhraseBag {
        let mut counts = self.counts.clone();
        for s in stop {
            counts.remove(s);
        }
        PhraseBag { counts }
    }
}

impl<'a> FromIterator<&'a str> for PhraseBag {
    fn from_iter<I: IntoIterator<Item = &'a str>>(iter: I) -> Self {
        let mut bag = PhraseBag::new();
        for raw in iter {
            bag.insert_raw(raw);
        }
        bag
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneGraph {
    pub objects: PhraseBag,
    pub attributes: PhraseBag,
    pub relations: PhraseBag,
}

impl SceneGraph {
    pub fn new(objects: PhraseBag, attributes: PhraseBag, relations: PhraseBag) -> Self {
        Self {
            objects,
            attributes,
            relations,
        }
    }

    pub fn bag(&self, category: Category) -> &PhraseBag {
        match category {
            Category::Object => &self.objects,
            Category::Attribute => &self.attributes,
            Category::Relation => &self.relations,
        }
    }

    pub fn bag_mut(&mut self, category: Category) -> &mut PhraseBag {
        match category {
            Category::Object => &mut self.objects,
            Category::Attribute => &mut self.attributes,
            Category::Relation => &mut self.relations,
        }
    }

    pub fn is_empty(&self) -> bool {
        Category::ALL.iter().all(|&c| self.bag(c).is_empty())
    }

    /// All phrases, categories in object / attribute / relation order.
    pub fn phrases(&self) -> Vec<Phrase> {
        Category::ALL
            .iter()
            .flat_map(|&c| {
                self.bag(c).occurrences().map(move |t| Phrase {
                    text: t.to_string(),
                    category: c,
                })
            })
            .collect()
    }

    /// Strictly ingests a JSON record with keys `objects`, `attributes` and
    /// `relations`, each a list of strings.
    pub fn from_json(value: &Value) -> Result<Self, IngestError> {
        let map = value.as_object().ok_or(IngestError::NotAnObject)?;
        if let Some(unknown) = map
            .keys()
            .find(|k| !Category::ALL.iter().any(|c| c.field() == k.as_str()))
        {
            return Err(IngestError::UnknownField(unknown.clone()));
        }
        let mut graph = SceneGraph::default();
        for category in Category::ALL {
            let field = category.field();
            let list = map
                .get(field)
                .ok_or(IngestError::MissingField(field))?
                .as_array()
                .ok_or(IngestError::NotAList(field))?;
            let bag = graph.bag_mut(category);
            for (index, entry) in list.iter().enumerate() {
                let s = entry
                    .as_str()
                    .ok_or(IngestError::NonStringEntry { field, index })?;
                bag.insert_raw(s);
            }
        }
        Ok(graph)
    }

    pub fn to_record(&self) -> SceneGraphRecord {
        let list = |c| self.bag(c).occurrences().map(str::to_string).collect();
        SceneGraphRecord {
            objects: list(Category::Object),
            attributes: list(Category::Attribute),
            relations: list(Category::Relation),
        }
    }
}

/// Serialized form of a [`SceneGraph`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGraphRecord {
    pub objects: Vec<String>,
    pub attributes: Vec<String>,
    pub relations: Vec<String>,
}

impl From<&SceneGraphRecord> for SceneGraph {
    fn from(r: &SceneGraphRecord) -> Self {
        SceneGraph {
            objects: r.objects.iter().map(String::as_str).collect(),
            attributes: r.attributes.iter().map(String::as_str).collect(),
            relations: r.relations.iter().map(String::as_str).collect(),
        }
    }
}

impl Serialize for SceneGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_record().serialize(s)
    }
}

impl<'de> Deserialize<'de> for SceneGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        SceneGraph::from_json(&value).map_err(serde::de::Error::custom)
    }
}

/// One generated caption for an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionCandidate {
    pub id: String,
    pub image_id: String,
    pub source_agent: String,
    pub text: String,
    pub graph: Option<SceneGraph>,
}
