use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use urban_align::capture::CaptureScorer;
use urban_align::refinery::{
    build_pair_dataset, refine_caption, Agent, AgentFixture, Captioner, ClientError, FixtureStore, ImageFixture,
    MaskRecord, MergeContext, PromptKind, RefineConfig, Stage, Vocabulary,
};

fn vocab() -> Vocabulary {
    Vocabulary {
        objects: ["car", "tree", "road", "bus", "boat", "lake", "bench"].map(String::from).to_vec(),
        attributes: ["red", "tall", "blue"].map(String::from).to_vec(),
        relations: ["beside", "on"].map(String::from).to_vec(),
    }
}

fn mask(id: &str, rows: &[&str]) -> MaskRecord {
    MaskRecord {
        segment_id: id.into(),
        rows: rows.iter().map(|r| r.to_string()).collect(),
    }
}

fn agent(long: &str, local: &[&str]) -> AgentFixture {
    AgentFixture {
        long: Some(long.into()),
        local: local.iter().map(|s| s.to_string()).collect(),
        ..AgentFixture::default()
    }
}

fn one_image(masks: Vec<MaskRecord>, captions: Vec<(&str, AgentFixture)>, detector: &[(&str, f64)]) -> Arc<FixtureStore> {
    let img = ImageFixture {
        image_id: "img".into(),
        masks,
        captions: captions.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        detector: detector.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        parses: BTreeMap::new(),
    };
    Arc::new(FixtureStore::new(vec![img], vocab()).unwrap())
}

const LONG: &str = "A red car on the road.";

#[test]
fn echo_merge_contains_long_caption_and_kept_phrase() {
    let store = one_image(
        vec![mask("s0", &["1100", "1100", "0000"])],
        vec![("a", agent(LONG, &["A wooden bench."]))],
        &[("car", 0.9), ("road", 0.9), ("red car", 0.9), ("car on road", 0.9), ("bench", 0.4)],
    );
    let agents = store.agents(&["a".to_string()]);
    let out = refine_caption("img", LONG, &agents[0].clients, &RefineConfig::default()).unwrap();
    assert!(out.contains(LONG), "{out}");
    assert!(out.contains("bench"), "{out}");
}

#[test]
fn fully_filtered_local_phrases_leave_only_the_long_caption() {
    let store = one_image(
        vec![mask("s0", &["1100", "1100", "0000"])],
        vec![("a", agent(LONG, &["A tall tree beside a bus."]))],
        &[("car", 0.9), ("road", 0.9), ("red car", 0.9), ("car on road", 0.9)],
    );
    let agents = store.agents(&["a".to_string()]);
    let out = refine_caption("img", LONG, &agents[0].clients, &RefineConfig::default()).unwrap();
    let alone = MergeContext {
        long_caption: LONG.into(),
        ..MergeContext::default()
    };
    assert_eq!(out, alone.render());
}

#[test]
fn rejected_long_phrases_reach_the_merge_context() {
    let store = one_image(
        vec![mask("s0", &["11", "11"])],
        vec![("a", agent(LONG, &["A road."]))],
        &[("car", 0.9), ("road", 0.9), ("red car", 0.005), ("car on road", 0.01)],
    );
    let agents = store.agents(&["a".to_string()]);
    let out = refine_caption("img", LONG, &agents[0].clients, &RefineConfig::default()).unwrap();
    assert!(out.contains("Remove: red car"), "{out}");
    assert!(!out.contains("car on road"), "boundary score 0.01 is kept: {out}");
}

#[test]
fn no_masks_returns_long_caption_unchanged() {
    let store = one_image(vec![], vec![("a", agent(LONG, &[]))], &[]);
    let agents = store.agents(&["a".to_string()]);
    let out = refine_caption("img", LONG, &agents[0].clients, &RefineConfig::default()).unwrap();
    assert_eq!(out, LONG);
}

#[test]
fn refinement_is_deterministic() {
    let store = one_image(
        vec![mask("s0", &["1100", "1100"]), mask("s1", &["0011", "0011"])],
        vec![("a", agent(LONG, &["A bench.", "A tall tree."]))],
        &[("bench", 0.3), ("tree", 0.2), ("tall tree", 0.2), ("car", 0.5)],
    );
    let agents = store.agents(&["a".to_string()]);
    let cfg = RefineConfig::default();
    let first = refine_caption("img", LONG, &agents[0].clients, &cfg).unwrap();
    let second = refine_caption("img", LONG, &agents[0].clients, &cfg).unwrap();
    assert_eq!(first, second);
    assert!(first.contains("bench") && first.contains("tall tree"), "{first}");
}

#[test]
fn client_errors_carry_their_stage() {
    let mut a = agent(LONG, &[]);
    a.fail = vec!["local".into()];
    let store = one_image(vec![mask("s0", &["11", "11"])], vec![("a", a)], &[]);
    let agents = store.agents(&["a".to_string()]);
    let err = refine_caption("img", LONG, &agents[0].clients, &RefineConfig::default()).unwrap_err();
    assert_eq!(err.stage, Stage::LocalCaption);
    assert!(err.to_string().starts_with("local-caption stage failed"));
}

fn consensus_store() -> Arc<FixtureStore> {
    let a = "A red car on the road beside a tall tree.";
    let b = "A blue boat on the lake.";
    one_image(
        vec![],
        vec![("agent-1", agent(a, &[])), ("agent-2", agent(a, &[])), ("agent-3", agent(b, &[]))],
        &[],
    )
}

fn names(n: &[&str]) -> Vec<String> {
    n.iter().map(|s| s.to_string()).collect()
}

#[test]
fn dataset_keeps_the_consensus_caption() {
    let store = consensus_store();
    let agents = store.agents(&names(&["agent-1", "agent-2", "agent-3"]));
    let scorer = CaptureScorer::with_defaults();
    let ds = build_pair_dataset(&["img".to_string()], &agents, &RefineConfig::default(), &scorer);
    assert_eq!(ds.pairs.len(), 1);
    assert_eq!(ds.pairs[0].source_agent, "agent-1");
    assert_eq!(ds.pairs[0].caption_text, "A red car on the road beside a tall tree.");
    assert_eq!(ds.candidates.len(), 3);
    assert_eq!(ds.skip_count(), 0);
}

#[test]
fn empty_image_list_gives_empty_dataset() {
    let store = consensus_store();
    let agents = store.agents(&names(&["agent-1"]));
    let ds = build_pair_dataset(&[], &agents, &RefineConfig::default(), &CaptureScorer::with_defaults());
    assert!(ds.pairs.is_empty() && ds.skipped.is_empty());
}

#[test]
fn failing_agent_is_dropped_from_the_candidate_set() {
    let mut broken = agent("whatever", &[]);
    broken.fail = vec!["long".into()];
    let a = "A red car on the road.";
    let store = one_image(
        vec![],
        vec![("agent-1", agent(a, &[])), ("agent-2", broken), ("agent-3", agent(a, &[]))],
        &[],
    );
    let agents = store.agents(&names(&["agent-1", "agent-2", "agent-3"]));
    let ds = build_pair_dataset(&["img".to_string()], &agents, &RefineConfig::default(), &CaptureScorer::with_defaults());
    assert_eq!(ds.candidates.len(), 2);
    assert_eq!(ds.agent_failures.len(), 1);
    assert_eq!(ds.agent_failures[0].1, "agent-2");
    assert_eq!(ds.pairs.len(), 1);
}

#[test]
fn image_with_only_failing_agents_is_skipped() {
    let store = consensus_store();
    let agents = store.agents(&names(&["ghost"]));
    let images = vec!["img".to_string(), "missing".to_string()];
    let ds = build_pair_dataset(&images, &agents, &RefineConfig::default(), &CaptureScorer::with_defaults());
    assert!(ds.pairs.is_empty());
    assert_eq!(ds.skip_count(), 2);
}

/// Captioner that refuses concurrent use and counts overlapping calls.
struct SerialOnly {
    active: AtomicUsize,
    max_seen: AtomicUsize,
    inner: Arc<dyn Captioner>,
}

impl Captioner for SerialOnly {
    fn caption(&self, image_ref: &str, prompt: PromptKind<'_>) -> Result<String, ClientError> {
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_seen.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(std::time::Duration::from_millis(1));
        let out = self.inner.caption(image_ref, prompt);
        self.active.fetch_sub(1, Ordering::SeqCst);
        out
    }

    fn concurrent_safe(&self) -> bool {
        false
    }
}

#[test]
fn unsafe_clients_are_called_serially() {
    let images: Vec<ImageFixture> = (0..6)
        .map(|i| ImageFixture {
            image_id: format!("img-{i}"),
            captions: [("a".to_string(), agent("A car.", &[]))].into_iter().collect(),
            ..ImageFixture::default()
        })
        .collect();
    let store = Arc::new(FixtureStore::new(images, vocab()).unwrap());
    let base = store.agents(&names(&["a"])).remove(0);
    let serial = Arc::new(SerialOnly {
        active: AtomicUsize::new(0),
        max_seen: AtomicUsize::new(0),
        inner: base.clients.captioner.clone(),
    });
    let mut clients = base.clients.clone();
    clients.captioner = serial.clone();
    let agents = [Agent {
        name: "a".into(),
        clients,
    }];
    let ids = store.image_ids();
    let ds = build_pair_dataset(&ids, &agents, &RefineConfig::default(), &CaptureScorer::with_defaults());
    assert_eq!(ds.pairs.len(), 6);
    assert_eq!(serial.max_seen.load(Ordering::SeqCst), 1);
    let order: Vec<_> = ds.pairs.iter().map(|p| p.image_id.clone()).collect();
    assert_eq!(order, ids);
}

#[test]
fn fixture_directory_loads() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("vocabulary.json"),
        serde_json::to_string(&vocab()).unwrap(),
    )
    .unwrap();
    let img = serde_json::json!({
        "image_id": "img-9",
        "masks": [{"segment_id": "s0", "rows": ["11", "11"]}],
        "captions": {"x": {"long": "A car.", "local": ["A tree."]}},
        "detector": {"Tree": 0.5}
    });
    std::fs::write(dir.path().join("img-9.json"), img.to_string()).unwrap();
    let store = Arc::new(FixtureStore::load(dir.path()).unwrap());
    assert_eq!(store.image_ids(), ["img-9"]);
    assert_eq!(store.agent_names(), ["x"]);
    let agents = store.agents(&store.agent_names());
    let out = refine_caption("img-9", "A car.", &agents[0].clients, &RefineConfig::default()).unwrap();
    assert!(out.contains("tree"), "{out}");

    std::fs::write(dir.path().join("bad.json"), "{\"image_id\": 3}").unwrap();
    let err = FixtureStore::load(dir.path()).unwrap_err();
    assert!(err.to_string().contains("bad.json"));
}
