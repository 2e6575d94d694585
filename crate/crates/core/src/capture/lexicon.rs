use std::collections::{BTreeMap, BTreeSet};

use crate::scene_graph::normalize_phrase;

/// Synonym lookup. `lookup(x)` always contains `x`.
pub trait SynonymLexicon: Send + Sync {
    fn lookup(&self, phrase: &str) -> BTreeSet<String>;

    fn overlaps(&self, a: &str, b: &str) -> bool {
        if a == b {
            return true;
        }
        let sa = self.lookup(a);
        self.lookup(b).iter().any(|s| sa.contains(s))
    }
}

/// Every phrase is only its own synonym.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityLexicon;

impl SynonymLexicon for IdentityLexicon {
    fn lookup(&self, phrase: &str) -> BTreeSet<String> {
        BTreeSet::from([phrase.to_string()])
    }

    fn overlaps(&self, a: &str, b: &str) -> bool {
        a == b
    }
}

/// Lexicon built from synonym groups; a phrase's synonym set is the union of
/// every group it appears in, plus itself.
#[derive(Debug, Clone, Default)]
pub struct GroupLexicon {
    index: BTreeMap<String, BTreeSet<String>>,
}

impl GroupLexicon {
    pub fn new<G, S>(groups: G) -> Self
    where
        G: IntoIterator,
        G::Item: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for group in groups {
            let members: BTreeSet<String> = group
                .into_iter()
                .filter_map(|s| normalize_phrase(s.as_ref()).ok())
                .collect();
            for m in &members {
                index.entry(m.clone()).or_default().extend(members.iter().cloned());
            }
        }
        Self { index }
    }
}

impl SynonymLexicon for GroupLexicon {
    fn lookup(&self, phrase: &str) -> BTreeSet<String> {
        let mut set = self.index.get(phrase).cloned().unwrap_or_default();
        set.insert(phrase.to_string());
        set
    }
}
