//! Scene-graph caption similarity and consensus caption selection.
//!
//! Two captions are compared category by category. Phrases are paired one to
//! one in three passes: exact string equality, synonym-set overlap, then soft
//! pairing by descending cosine similarity where each soft pair adds its
//! similarity as fractional matched mass. Per-category F1 scores are combined
//! with the `alpha`/`beta`/`gamma` weights.

mod encoder;
mod lexicon;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use encoder::{HashingEncoder, NullEncoder, PhraseEncoder, DEFAULT_ENCODER_DIM};
pub use lexicon::{GroupLexicon, IdentityLexicon, SynonymLexicon};

use crate::scene_graph::{normalize_phrase, CaptionCandidate, Category, PhraseBag, SceneGraph};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CaptureError {
    #[error("capture weights must be finite, non-negative and sum to a positive value (got alpha={alpha}, beta={beta}, gamma={gamma})")]
    InvalidWeights { alpha: f64, beta: f64, gamma: f64 },
    #[error("candidate `{0}` has no scene graph")]
    MissingGraph(String),
    #[error("no caption candidates to select from")]
    NoCandidates,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptureWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for CaptureWeights {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 5.0,
            gamma: 2.0,
        }
    }
}

impl CaptureWeights {
    pub fn validate(&self) -> Result<(), CaptureError> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().all(|x| x.is_finite() && *x >= 0.0) && w.iter().sum::<f64>() > 0.0 {
            Ok(())
        } else {
            Err(CaptureError::InvalidWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
            })
        }
    }

    pub fn weight(&self, category: Category) -> f64 {
        match category {
            Category::Object => self.alpha,
            Category::Attribute => self.beta,
            Category::Relation => self.gamma,
        }
    }
}

/// Matching outcome for one category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CategoryMatch {
    pub matched_mass: f64,
    pub cand_count: usize,
    pub ref_count: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl CategoryMatch {
    fn from_mass(matched_mass: f64, cand_count: usize, ref_count: usize) -> Self {
        let precision = (cand_count > 0).then(|| matched_mass / cand_count as f64);
        let recall = (ref_count > 0).then(|| matched_mass / ref_count as f64);
        let f1 = match (precision, recall) {
            (None, None) => None,
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => Some(0.0),
        };
        Self {
            matched_mass,
            cand_count,
            ref_count,
            precision,
            recall,
            f1,
        }
    }
}

/// Per-category match results for a pair of scene graphs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchReport {
    pub objects: CategoryMatch,
    pub attributes: CategoryMatch,
    pub relations: CategoryMatch,
}

impl MatchReport {
    pub fn get(&self, category: Category) -> &CategoryMatch {
        match category {
            Category::Object => &self.objects,
            Category::Attribute => &self.attributes,
            Category::Relation => &self.relations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub scores: Vec<f64>,
    pub selected_index: usize,
    pub selected_score: f64,
}

/// One-to-one matching of `cand` against `ref_bag` (both canonical).
pub fn match_category(
    cand: &PhraseBag,
    ref_bag: &PhraseBag,
    lexicon: &dyn SynonymLexicon,
    encoder: &dyn PhraseEncoder,
) -> CategoryMatch {
    let mut mass = 0.0;
    let mut rest_cand: Vec<&str> = Vec::new();
    let mut rest_ref: Vec<&str> = Vec::new();

    // exact
    for (phrase, n) in cand.distinct() {
        let m = n.min(ref_bag.count(phrase));
        mass += m as f64;
        rest_cand.extend(std::iter::repeat_n(phrase, n - m));
    }
    for (phrase, n) in ref_bag.distinct() {
        let m = n.min(cand.count(phrase));
        rest_ref.extend(std::iter::repeat_n(phrase, n - m));
    }

    // synonym: maximum bipartite matching on the overlap relation
    let adjacency: Vec<Vec<usize>> = rest_cand
        .iter()
        .map(|c| {
            (0..rest_ref.len())
                .filter(|&j| lexicon.overlaps(c, rest_ref[j]))
                .collect()
        })
        .collect();
    let ref_partner = max_bipartite_matching(&adjacency, rest_ref.len());
    let mut cand_used = vec![false; rest_cand.len()];
    let mut ref_used = vec![false; rest_ref.len()];
    for (j, partner) in ref_partner.iter().enumerate() {
        if let Some(i) = *partner {
            cand_used[i] = true;
            ref_used[j] = true;
            mass += 1.0;
        }
    }

    // soft: greedy by descending clipped similarity
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, c) in rest_cand.iter().enumerate().filter(|(i, _)| !cand_used[*i]) {
        for (j, r) in rest_ref.iter().enumerate().filter(|(j, _)| !ref_used[*j]) {
            let s = encoder.similarity(c, r).clamp(0.0, 1.0);
            if s > 0.0 {
                pairs.push((s, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (s, i, j) in pairs {
        if !cand_used[i] && !ref_used[j] {
            cand_used[i] = true;
            ref_used[j] = true;
            mass += s;
        }
    }

    CategoryMatch::from_mass(mass, cand.len(), ref_bag.len())
}

/// Kuhn's augmenting-path matching. Returns, for each right vertex, its left partner.
fn max_bipartite_matching(adjacency: &[Vec<usize>], n_right: usize) -> Vec<Option<usize>> {
    fn augment(
        u: usize,
        adjacency: &[Vec<usize>],
        seen: &mut [bool],
        partner: &mut [Option<usize>],
    ) -> bool {
        for &v in &adjacency[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if partner[v].is_none_or(|w| augment(w, adjacency, seen, partner)) {
                partner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let mut partner = vec![None; n_right];
    for u in 0..adjacency.len() {
        let mut seen = vec![false; n_right];
        augment(u, adjacency, &mut seen, &mut partner);
    }
    partner
}

/// Weighted per-category F1 with matching backends and an optional stop list.
#[derive(Clone)]
pub struct CaptureScorer {
    weights: CaptureWeights,
    lexicon: Arc<dyn SynonymLexicon>,
    encoder: Arc<dyn PhraseEncoder>,
    stop_list: BTreeSet<String>,
}

impl std::fmt::Debug for CaptureScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CaptureScorer")
            .field("weights", &self.weights)
            .field("stop_list", &self.stop_list)
            .finish_non_exhaustive()
    }
}

impl CaptureScorer {
    pub fn new(
        weights: CaptureWeights,
        lexicon: Arc<dyn SynonymLexicon>,
        encoder: Arc<dyn PhraseEncoder>,
    ) -> Result<Self, CaptureError> {
        weights.validate()?;
        Ok(Self {
            weights,
            lexicon,
            encoder,
            stop_list: BTreeSet::new(),
        })
    }

    /// Default weights, identity lexicon, hashing encoder.
    pub fn with_defaults() -> Self {
        Self::new(
            CaptureWeights::default(),
            Arc::new(IdentityLexicon),
            Arc::new(HashingEncoder::default()),
        )
        .expect("default weights are valid")
    }

    /// Exact-only scorer: identity lexicon and no soft credit.
    pub fn exact(weights: CaptureWeights) -> Result<Self, CaptureError> {
        Self::new(weights, Arc::new(IdentityLexicon), Arc::new(NullEncoder))
    }

    /// Phrases removed from both sides before matching.
    pub fn with_stop_list<I, S>(mut self, phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.stop_list = phrases
            .into_iter()
            .filter_map(|s| normalize_phrase(s.as_ref()).ok())
            .collect();
        self
    }

    pub fn weights(&self) -> CaptureWeights {
        self.weights
    }

    pub fn match_graphs(&self, cand: &SceneGraph, reference: &SceneGraph) -> MatchReport {
        let run = |c: Category| {
            let stop = self.stop_list.iter().map(String::as_str);
            let a = cand.bag(c).without(stop.clone());
            let b = reference.bag(c).without(stop);
            match_category(&a, &b, self.lexicon.as_ref(), self.encoder.as_ref())
        };
        MatchReport {
            objects: run(Category::Object),
            attributes: run(Category::Attribute),
            relations: run(Category::Relation),
        }
    }

    /// Weighted F1 over categories present on at least one side; 0 when no
    /// category qualifies.
    pub fn capture(&self, g1: &SceneGraph, g2: &SceneGraph) -> f64 {
        let report = self.match_graphs(g1, g2);
        let (mut num, mut den) = (0.0, 0.0);
        for c in Category::ALL {
            if let Some(f1) = report.get(c).f1 {
                let w = self.weights.weight(c);
                num += w * f1;
                den += w;
            }
        }
        if den > 0.0 {
            (num / den).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    /// Mean similarity of each graph against every other one.
    pub fn consensus_over_graphs(&self, graphs: &[&SceneGraph]) -> Vec<f64> {
        let n = graphs.len();
        if n < 2 {
            return vec![0.0; n];
        }
        (0..n)
            .map(|i| {
                let total: f64 = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| self.capture(graphs[i], graphs[j]))
                    .sum();
                total / (n - 1) as f64
            })
            .collect()
    }

    pub fn consensus_scores(&self, candidates: &[CaptionCandidate]) -> Result<Vec<f64>, CaptureError> {
        let graphs = candidates
            .iter()
            .map(|c| c.graph.as_ref().ok_or_else(|| CaptureError::MissingGraph(c.id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.consensus_over_graphs(&graphs))
    }

    pub fn select_caption(&self, candidates: &[CaptionCandidate]) -> Result<ConsensusResult, CaptureError> {
        if candidates.is_empty() {
            return Err(CaptureError::NoCandidates);
        }
        let scores = self.consensus_scores(candidates)?;
        Ok(select_from_scores(scores))
    }
}

/// Argmax with lowest-index tie-break. `scores` must be non-empty.
pub fn select_from_scores(scores: Vec<f64>) -> ConsensusResult {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    ConsensusResult {
        selected_score: scores[best],
        selected_index: best,
        scores,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(items: &[&str]) -> PhraseBag {
        items.iter().copied().collect()
    }

    fn graph(o: &[&str], a: &[&str], r: &[&str]) -> SceneGraph {
        SceneGraph::new(bag(o), bag(a), bag(r))
    }

    fn cand(id: &str, g: SceneGraph) -> CaptionCandidate {
        CaptionCandidate {
            id: id.into(),
            image_id: "img".into(),
            source_agent: id.into(),
            text: String::new(),
            graph: Some(g),
        }
    }

    #[test]
    fn identical_bags_match_fully() {
        let m = match_category(&bag(&["car", "tree"]), &bag(&["car", "tree"]), &IdentityLexicon, &NullEncoder);
        assert_eq!(m.matched_mass, 2.0);
        assert_eq!(m.f1, Some(1.0));
    }

    #[test]
    fn disjoint_bags_get_no_credit() {
        let m = match_category(&bag(&["car"]), &bag(&["boat"]), &IdentityLexicon, &NullEncoder);
        assert_eq!(m.f1, Some(0.0));
        assert_eq!(m.matched_mass, 0.0);
    }

    #[test]
    fn partial_overlap_precision_recall() {
        let m = match_category(&bag(&["car", "tree"]), &bag(&["car"]), &IdentityLexicon, &NullEncoder);
        assert_eq!(m.precision, Some(0.5));
        assert_eq!(m.recall, Some(1.0));
        assert!((m.f1.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_definedness() {
        let empty = PhraseBag::new();
        let m = match_category(&empty, &empty, &IdentityLexicon, &NullEncoder);
        assert_eq!(m.f1, None);
        let m = match_category(&bag(&["a"]), &empty, &IdentityLexicon, &NullEncoder);
        assert_eq!(m.f1, Some(0.0));
        assert_eq!(m.recall, None);
    }

    #[test]
    fn synonyms_match_after_exact() {
        let lex = GroupLexicon::new([["car", "automobile"]]);
        let m = match_category(&bag(&["car", "automobile"]), &bag(&["automobile", "tree"]), &lex, &NullEncoder);
        // automobile exact; car ~ nothing left but tree
        assert_eq!(m.matched_mass, 1.0);
        let m = match_category(&bag(&["car"]), &bag(&["automobile"]), &lex, &NullEncoder);
        assert_eq!(m.matched_mass, 1.0);
    }

    #[test]
    fn soft_stage_adds_fractional_mass() {
        let enc = HashingEncoder::default();
        let m = match_category(&bag(&["red car"]), &bag(&["red cars"]), &IdentityLexicon, &enc);
        let s = enc.similarity("red car", "red cars");
        assert!((m.matched_mass - s).abs() < 1e-12);
        assert!(m.matched_mass > 0.0 && m.matched_mass < 1.0);
    }

    #[test]
    fn worked_one_third_example() {
        let scorer = CaptureScorer::exact(CaptureWeights::default()).unwrap();
        let g1 = graph(&["car", "tree"], &["red car"], &[]);
        let g2 = graph(&["car"], &[], &[]);
        assert!((scorer.capture(&g1, &g2) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_graphs_score_zero() {
        let scorer = CaptureScorer::with_defaults();
        assert_eq!(scorer.capture(&SceneGraph::default(), &SceneGraph::default()), 0.0);
    }

    #[test]
    fn self_similarity_is_one() {
        let scorer = CaptureScorer::with_defaults();
        let g = graph(&["car", "tree"], &["red car"], &["car beside tree"]);
        assert!((scorer.capture(&g, &g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stop_list_removes_phrases() {
        let scorer = CaptureScorer::exact(CaptureWeights::default()).unwrap().with_stop_list(["Image"]);
        let g1 = graph(&["car", "image"], &[], &[]);
        let g2 = graph(&["car"], &[], &[]);
        assert_eq!(scorer.capture(&g1, &g2), 1.0);
    }

    #[test]
    fn invalid_weights_rejected() {
        let w = CaptureWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 };
        assert!(matches!(CaptureScorer::exact(w), Err(CaptureError::InvalidWeights { .. })));
        let w = CaptureWeights { alpha: -1.0, beta: 5.0, gamma: 2.0 };
        assert!(w.validate().is_err());
    }

    #[test]
    fn consensus_examples() {
        let scorer = CaptureScorer::exact(CaptureWeights::default()).unwrap();
        let a = graph(&["car"], &["red car"], &["car on road"]);
        let b = graph(&["boat"], &["blue boat"], &["boat on lake"]);
        let cs = [cand("0", a.clone()), cand("1", a.clone()), cand("2", b.clone())];
        assert_eq!(scorer.consensus_scores(&cs).unwrap(), vec![0.5, 0.5, 0.0]);
        let sel = scorer.select_caption(&cs).unwrap();
        assert_eq!(sel.selected_index, 0);
        assert_eq!(sel.selected_score, 0.5);

        let permuted = [cand("0", b), cand("1", a.clone()), cand("2", a.clone())];
        assert_eq!(scorer.select_caption(&permuted).unwrap().selected_index, 1);

        let single = [cand("0", a.clone())];
        assert_eq!(scorer.consensus_scores(&single).unwrap(), vec![0.0]);
        assert_eq!(scorer.select_caption(&single).unwrap().selected_index, 0);

        let pair = [cand("0", a.clone()), cand("1", a)];
        assert_eq!(scorer.consensus_scores(&pair).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn consensus_errors() {
        let scorer = CaptureScorer::with_defaults();
        assert_eq!(scorer.select_caption(&[]), Err(CaptureError::NoCandidates));
        let mut c = cand("x7", SceneGraph::default());
        c.graph = None;
        assert_eq!(scorer.consensus_scores(&[c]), Err(CaptureError::MissingGraph("x7".into())));
    }
}
