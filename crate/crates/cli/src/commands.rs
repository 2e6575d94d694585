//! One function per subcommand. Each reads its inputs from the config's
//! paths and writes only inside its run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use urban_align::capture::{CaptureScorer, HashingEncoder, NullEncoder, PhraseEncoder};
use urban_align::downstream::{
    evaluate, extract_features, fit_head, read_manifest, region_embeddings, scatter_report, split_dataset,
    task_targets, EvalReport, FrozenEncoder, ImageDir, ImageSource, RegionEmbedding, RegionRecord, ScatterPoint,
    SplitName,
};
use urban_align::pretrain::{self, Checkpoint, PairedCorpus, TrainConfig, TrainState, Tokenizer};
use urban_align::refinery::{build_pair_dataset, FixtureStore, PairRecord, Vocabulary, VocabularyParser};
use urban_align::scene_graph::{CaptionCandidate, SceneGraph};
use urban_align::seed;

use crate::config::{require, PipelineConfig};
use crate::output::{read_json, read_jsonl, RunDir};

/// One caption candidate as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateRecord {
    pub image_id: String,
    pub candidate_id: String,
    pub source_agent: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_graph: Option<SceneGraph>,
}

impl From<&CaptionCandidate> for CandidateRecord {
    fn from(c: &CaptionCandidate) -> Self {
        Self {
            image_id: c.image_id.clone(),
            candidate_id: c.id.clone(),
            source_agent: c.source_agent.clone(),
            text: c.text.clone(),
            scene_graph: c.graph.clone(),
        }
    }
}

/// Consensus outcome for one image; `scores` follow the candidates' input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusRecord {
    pub image_id: String,
    pub scores: Vec<f64>,
    pub selected_id: String,
}

#[derive(Debug, Serialize)]
struct Skipped {
    id: String,
    reason: String,
}

fn skipped(items: impl IntoIterator<Item = (String, String)>) -> Vec<Skipped> {
    items.into_iter().map(|(id, reason)| Skipped { id, reason }).collect()
}

fn scorer(cfg: &PipelineConfig) -> Result<CaptureScorer> {
    let encoder: Arc<dyn PhraseEncoder> = if cfg.capture.soft_matching {
        Arc::new(HashingEncoder::default())
    } else {
        Arc::new(NullEncoder)
    };
    Ok(CaptureScorer::new(cfg.capture.weights(), Arc::new(cfg.capture.lexicon()), encoder)?
        .with_stop_list(&cfg.capture.stop_list))
}

pub fn build_captions(cfg: &PipelineConfig, run: &RunDir) -> Result<()> {
    let dir = require(&cfg.paths.fixtures, "fixtures", "build-captions")?;
    let store = Arc::new(FixtureStore::load(&dir)?);
    let agents = store.agents(&store.agent_names());
    if agents.is_empty() {
        bail!("fixtures in {} name no captioning agents", dir.display());
    }
    let images = store.image_ids();
    let ds = build_pair_dataset(&images, &agents, &cfg.refine, &scorer(cfg)?);
    let candidates: Vec<CandidateRecord> = ds.candidates.iter().map(CandidateRecord::from).collect();
    run.write_jsonl("pairs.jsonl", &ds.pairs)?;
    run.write_jsonl("candidates.jsonl", &candidates)?;
    let mut skips = skipped(ds.skipped.iter().map(|s| (s.image_id.clone(), s.reasons.join("; "))));
    skips.extend(
        ds.agent_failures
            .iter()
            .map(|(img, agent, reason)| Skipped {
                id: format!("{img}/{agent}"),
                reason: reason.clone(),
            }),
    );
    run.write_json("skipped.json", &skips)?;
    info!(
        "{} images, {} pairs, {} skipped images, {} agent failures",
        images.len(),
        ds.pairs.len(),
        ds.skip_count(),
        ds.agent_failures.len()
    );
    if ds.pairs.is_empty() {
        bail!("no image produced a caption pair");
    }
    Ok(())
}

/// Groups candidates by image in first-appearance order.
fn group_candidates(records: Vec<CandidateRecord>) -> Result<Vec<(String, Vec<CandidateRecord>)>> {
    let mut order: Vec<(String, Vec<CandidateRecord>)> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        let slot = *index.entry(r.image_id.clone()).or_insert_with(|| {
            order.push((r.image_id.clone(), Vec::new()));
            order.len() - 1
        });
        let group = &mut order[slot].1;
        if group.iter().any(|c| c.candidate_id == r.candidate_id) {
            bail!("duplicate candidate_id `{}` for image `{}`", r.candidate_id, r.image_id);
        }
        group.push(r);
    }
    Ok(order)
}

pub fn score_captions(cfg: &PipelineConfig, run: &RunDir) -> Result<()> {
    let path = require(&cfg.paths.candidates, "candidates", "score-captions")?;
    let parser = match &cfg.paths.vocabulary {
        Some(_) => {
            let vocab: Vocabulary = read_json(&require(&cfg.paths.vocabulary, "vocabulary", "score-captions")?)?;
            Some(VocabularyParser::new(&vocab))
        }
        None => None,
    };
    let scorer = scorer(cfg)?;
    let groups = group_candidates(read_jsonl(&path)?)?;
    let mut out = Vec::new();
    let mut skips = Vec::new();
    for (image_id, group) in groups {
        let graphs: Option<Vec<SceneGraph>> = group
            .iter()
            .map(|c| {
                c.scene_graph
                    .clone()
                    .or_else(|| parser.as_ref().map(|p| p.extract(&c.text)))
            })
            .collect();
        let Some(graphs) = graphs else {
            warn!("image {image_id}: a candidate has no scene graph and no vocabulary is configured; skipped");
            skips.push((image_id, "candidate without scene graph".to_string()));
            continue;
        };
        let refs: Vec<&SceneGraph> = graphs.iter().collect();
        let result = urban_align::capture::select_from_scores(scorer.consensus_over_graphs(&refs));
        out.push(ConsensusRecord {
            selected_id: group[result.selected_index].candidate_id.clone(),
            image_id,
            scores: result.scores,
        });
    }
    run.write_jsonl("consensus.jsonl", &out)?;
    run.write_json("skipped.json", &skipped(skips))?;
    info!("scored {} images", out.len());
    Ok(())
}

#[derive(Debug, Serialize)]
struct PretrainSummary {
    pairs: usize,
    steps: u64,
    final_l_c: f64,
    final_l_d: f64,
    final_total: f64,
    tau: f64,
    train_top1: f64,
}

/// Loads every image in `ids`, reporting the ones that fail.
fn load_images(source: &dyn ImageSource, ids: &[String]) -> (Vec<Option<Array2<f64>>>, Vec<(String, String)>) {
    let mut failures = Vec::new();
    let images = ids
        .iter()
        .map(|id| match source.image(id) {
            Ok(img) => Some(img),
            Err(e) => {
                warn!("image {id}: {e}; skipped");
                failures.push((id.clone(), e));
                None
            }
        })
        .collect();
    (images, failures)
}

pub fn pretrain(cfg: &PipelineConfig, run: &RunDir) -> Result<()> {
    let pairs: Vec<PairRecord> = read_jsonl(&require(&cfg.paths.pairs, "pairs", "pretrain")?)?;
    let source = ImageDir(require(&cfg.paths.images, "images", "pretrain")?);
    let ids: Vec<String> = pairs.iter().map(|p| p.image_id.clone()).collect();
    let (loaded, failures) = load_images(&source, &ids);
    let (images, captions): (Vec<Array2<f64>>, Vec<String>) = loaded
        .into_iter()
        .zip(&pairs)
        .filter_map(|(img, p)| img.map(|i| (i, p.caption_text.clone())))
        .unzip();
    run.write_json("skipped.json", &skipped(failures))?;
    if images.is_empty() {
        bail!("no pair has a readable image");
    }

    let tokenizer = Tokenizer::fit(captions.iter().map(String::as_str));
    let mut encoder = cfg.encoder.clone();
    encoder.vocab_size = tokenizer.vocab_size();
    let train_cfg = TrainConfig {
        seed: seed::derive(cfg.seed, "cli/pretrain"),
        ..cfg.pretrain.clone()
    };
    let mut state = TrainState::init(&encoder, &cfg.ipsi, &train_cfg)?;
    let corpus = PairedCorpus::from_captions(images, &captions, &tokenizer, state.encoder.max_text_tokens());
    let per_epoch = pretrain::trainer::steps_per_epoch(corpus.len(), train_cfg.batch_size) as u64;
    let records = pretrain::train(&mut state, &train_cfg, &corpus, None, |r| {
        if (r.step + 1) % per_epoch == 0 {
            info!(
                "epoch {} l_c {:.4} l_d {:.4} tau {:.4}",
                (r.step + 1) / per_epoch,
                r.l_c,
                r.l_d,
                r.tau
            );
        }
        Ok(())
    })?;

    let mut metrics = Vec::new();
    pretrain::trainer::write_metrics(&mut metrics, &records)?;
    run.write("metrics.jsonl", &metrics)?;
    let checkpoint = Checkpoint {
        state,
        train: train_cfg,
        ipsi: cfg.ipsi,
        tokenizer: Some(tokenizer),
    };
    run.write("checkpoint.bin", &checkpoint.to_bytes())?;
    let last = records.last().context("training ran no steps")?;
    run.write_json(
        "summary.json",
        &PretrainSummary {
            pairs: corpus.len(),
            steps: checkpoint.state.step,
            final_l_c: last.l_c,
            final_l_d: last.l_d,
            final_total: last.total,
            tau: checkpoint.state.tau(),
            train_top1: checkpoint.state.retrieval_top1(&corpus)?,
        },
    )?;
    Ok(())
}

fn load_manifest(cfg: &PipelineConfig, command: &str) -> Result<Vec<RegionRecord>> {
    let path = require(&cfg.paths.manifest, "manifest", command)?;
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_manifest(BufReader::new(file))?)
}

pub fn extract(cfg: &PipelineConfig, run: &RunDir) -> Result<()> {
    let checkpoint = Checkpoint::load(&require(&cfg.paths.checkpoint, "checkpoint", "extract")?)?;
    let source = ImageDir(require(&cfg.paths.images, "images", "extract")?);
    let records = load_manifest(cfg, "extract")?;
    let ids: Vec<String> = records
        .iter()
        .flat_map(|r| r.image_ids())
        .map(str::to_string)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let encoder = FrozenEncoder::new(checkpoint.state.encoder, checkpoint.state.student);
    let mut features = BTreeMap::new();
    let mut failures = Vec::new();
    for (id, result) in ids.iter().zip(extract_features(&encoder, &source, &ids)) {
        match result {
            Ok(f) => {
                features.insert(id.clone(), f);
            }
            Err(e) => {
                warn!("{e}; skipped");
                failures.push((id.clone(), e.message));
            }
        }
    }
    let (embeddings, skipped_regions) = region_embeddings(&records, &features);
    failures.extend(skipped_regions);
    run.write_jsonl("embeddings.jsonl", &embeddings)?;
    run.write_json("skipped.json", &skipped(failures))?;
    info!("{} images, {} region embeddings", features.len(), embeddings.len());
    if embeddings.is_empty() {
        bail!("no region has a usable image");
    }
    Ok(())
}

fn stack(rows: &[&[f64]], dim: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        if src.len() != dim {
            bail!("embedding width {} does not match {dim}", src.len());
        }
        dst.assign(&ndarray::ArrayView1::from(*src));
    }
    Ok(out)
}

pub fn predict(cfg: &PipelineConfig, run: &RunDir) -> Result<()> {
    let embeddings: Vec<RegionEmbedding> = read_jsonl(&require(&cfg.paths.embeddings, "embeddings", "predict")?)?;
    let records = load_manifest(cfg, "predict")?;
    let indicator = &cfg.downstream.indicator;
    let targets = task_targets(&records, indicator)?;
    let mut missing = Vec::new();
    let rows: Vec<(&RegionEmbedding, f64)> = embeddings
        .iter()
        .filter_map(|e| match targets.get(&e.region_id) {
            Some(&t) => Some((e, t)),
            None => {
                missing.push((e.region_id.clone(), format!("no `{indicator}` value")));
                None
            }
        })
        .collect();
    for (id, reason) in &missing {
        warn!("region {id}: {reason}; skipped");
    }
    let dim = rows.first().map(|r| r.0.vector.len()).context("no region has both an embedding and a target")?;
    let split = split_dataset(&(0..rows.len()).collect::<Vec<_>>(), cfg.seed)?;
    let take = |idx: &[usize]| -> Result<(Array2<f64>, Array1<f64>)> {
        let x = stack(&idx.iter().map(|&i| rows[i].0.vector.as_slice()).collect::<Vec<_>>(), dim)?;
        Ok((x, idx.iter().map(|&i| rows[i].1).collect()))
    };
    let (tx, ty) = take(&split.train)?;
    let (vx, vy) = take(&split.val)?;
    let head = fit_head(&tx, &ty, &vx, &vy, &cfg.head, cfg.seed)?;
    info!("head trained for {} epochs", head.epochs_run);

    let mut points = Vec::with_capacity(rows.len());
    for (name, idx) in [
        (SplitName::Train, &split.train),
        (SplitName::Val, &split.val),
        (SplitName::Test, &split.test),
    ] {
        let (x, y) = take(idx)?;
        let pred = head.predict(&x)?;
        for ((&i, truth), prediction) in idx.iter().zip(y).zip(pred) {
            points.push(ScatterPoint {
                region_id: rows[i].0.region_id.clone(),
                split: name,
                truth,
                prediction,
            });
        }
    }
    run.write_jsonl("predictions.jsonl", &points)?;
    run.write_json("head.json", &head)?;
    run.write_json("skipped.json", &skipped(missing))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Evaluation {
    indicator: String,
    train: Option<EvalReport>,
    val: Option<EvalReport>,
    test: Option<EvalReport>,
    /// The training-split head applied to every region, without refitting.
    all: EvalReport,
}

fn eval_split(points: &[ScatterPoint], split: Option<SplitName>) -> Result<Option<EvalReport>> {
    let (p, t): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|pt| split.is_none_or(|s| pt.split == s))
        .map(|pt| (pt.prediction, pt.truth))
        .unzip();
    if p.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(&p, &t)?))
}

pub fn evaluate_predictions(cfg: &PipelineConfig, run: &RunDir) -> Result<()> {
    let points: Vec<ScatterPoint> = read_jsonl(&require(&cfg.paths.predictions, "predictions", "evaluate")?)?;
    let report = Evaluation {
        indicator: cfg.downstream.indicator.clone(),
        train: eval_split(&points, Some(SplitName::Train))?,
        val: eval_split(&points, Some(SplitName::Val))?,
        test: eval_split(&points, Some(SplitName::Test))?,
        all: eval_split(&points, None)?.context("predictions file is empty")?,
    };
    if let Some(t) = &report.test {
        info!("test R2 {:.4} RMSE {:.4} MAE {:.4} (n={})", t.r2, t.rmse, t.mae, t.n_test);
    }
    run.write_json("evaluation.json", &report)?;
    Ok(())
}

pub fn report(cfg: &PipelineConfig, run: &RunDir) -> Result<()> {
    let points: Vec<ScatterPoint> = read_jsonl(&require(&cfg.paths.predictions, "predictions", "report")?)?;
    let r = scatter_report(points, &run.join("scatter.json"), Some(&run.join("scatter.svg")))?;
    info!("R2 test {:.4}, all regions {:.4}", r.r2_test, r.r2_all);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(image: &str, id: &str) -> CandidateRecord {
        CandidateRecord {
            image_id: image.into(),
            candidate_id: id.into(),
            source_agent: "a".into(),
            text: String::new(),
            scene_graph: None,
        }
    }

    #[test]
    fn candidates_group_by_first_appearance() {
        let groups = group_candidates(vec![rec("b", "1"), rec("a", "1"), rec("b", "2")]).unwrap();
        let ids: Vec<(&str, usize)> = groups.iter().map(|(k, v)| (k.as_str(), v.len())).collect();
        assert_eq!(ids, vec![("b", 2), ("a", 1)]);
        assert!(group_candidates(vec![rec("a", "1"), rec("a", "1")]).is_err());
    }

    #[test]
    fn candidate_record_uses_the_file_field_names() {
        let line = r#"{"image_id":"i","candidate_id":"c","source_agent":"s","text":"t","scene_graph":{"objects":["Car"],"attributes":[],"relations":[]}}"#;
        let r: CandidateRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.scene_graph.unwrap().objects.count("car"), 1);
        let bare: CandidateRecord =
            serde_json::from_str(r#"{"image_id":"i","candidate_id":"c","source_agent":"s","text":"t"}"#).unwrap();
        assert!(bare.scene_graph.is_none());
    }
}
