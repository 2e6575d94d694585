use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use urban_align::ipsi::IpsiConfig;
use urban_align::pretrain::checkpoint::FORMAT_VERSION;
use urban_align::pretrain::tape::Tape;
use urban_align::pretrain::*;

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        image_patches: 4,
        patch_dim: 5,
        vocab_size: 12,
        width: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        embed_dim: 8,
        ..EncoderConfig::default()
    }
}

fn corpus(n: usize, seed: u64) -> PairedCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n)
        .map(|_| Array2::from_shape_simple_fn((4, 5), || rng.sample(StandardNormal)))
        .collect();
    let texts = (0..n)
        .map(|_| {
            let len = rng.random_range(1..30);
            (0..len).map(|_| rng.random_range(2..12)).collect()
        })
        .collect();
    PairedCorpus { images, texts }
}

fn batch(c: &PairedCorpus) -> (Vec<&Array2<f64>>, Vec<Vec<usize>>) {
    (c.images.iter().collect(), c.texts.clone())
}

fn config(queue: usize) -> TrainConfig {
    TrainConfig {
        queue_size: queue,
        batch_size: 4,
        epochs: 3,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn embeddings_are_unit_norm_and_deterministic() {
    let cfg = config(8);
    let state = TrainState::init(&tiny_encoder(), &IpsiConfig::default(), &cfg).unwrap();
    let c = corpus(6, 1);
    let (imgs, txts) = batch(&c);
    let a = state.embed(&state.student, &imgs, &txts).unwrap();
    let b = state.embed(&state.student, &imgs, &txts).unwrap();
    assert_eq!(a, b);
    for row in a.image.rows().into_iter().chain(a.text.rows()) {
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn stretched_text_positions_and_truncation() {
    let state = TrainState::init(&tiny_encoder(), &IpsiConfig::default(), &config(0)).unwrap();
    assert_eq!(state.encoder.max_text_tokens(), 248);
    let long = vec![(0..400).map(|i| 2 + i % 10).collect::<Vec<usize>>()];
    let cut = vec![long[0][..248].to_vec()];
    let img = corpus(1, 2).images;
    let a = state.embed(&state.student, &[&img[0]], &long).unwrap();
    let b = state.embed(&state.student, &[&img[0]], &cut).unwrap();
    assert_eq!(a.text, b.text);
}

#[test]
fn teacher_embeddings_do_not_depend_on_student() {
    let cfg = config(8);
    let mut state = TrainState::init(&tiny_encoder(), &IpsiConfig::default(), &cfg).unwrap();
    let c = corpus(4, 3);
    let (imgs, txts) = batch(&c);
    let before = state.embed(&state.teacher, &imgs, &txts).unwrap();
    let idx = state.student.index_of("text.tokens").unwrap();
    state.student.get_mut(idx).mapv_inplace(|v| v * 3.0 + 1.0);
    assert_eq!(state.embed(&state.teacher, &imgs, &txts).unwrap(), before);
    let (_, teacher, grads) = state.loss_and_grads(&cfg, &imgs, &txts).unwrap();
    assert_eq!(teacher, before);
    assert!(grads.len() <= state.student.len());
}

#[test]
fn distillation_vanishes_when_teacher_equals_student() {
    let cfg = config(16);
    let mut state = TrainState::init(&tiny_encoder(), &IpsiConfig::default(), &cfg).unwrap();
    let c = corpus(8, 4);
    let (imgs, txts) = batch(&c);
    state.train_step(&cfg, &imgs[..4], &txts[..4]).unwrap();
    state.teacher = state.student.clone();
    let (loss, _, _) = state.loss_and_grads(&cfg, &imgs[4..], &txts[4..]).unwrap();
    assert!(loss.l_d.abs() < 1e-12, "{loss:?}");
    assert!(loss.l_c > 0.0);
}

#[test]
fn loss_is_permutation_equivariant() {
    let cfg = config(0);
    let state = TrainState::init(&tiny_encoder(), &IpsiConfig::default(), &cfg).unwrap();
    let c = corpus(5, 5);
    let (imgs, txts) = batch(&c);
    let perm = [3, 0, 4, 1, 2];
    let pi: Vec<&Array2<f64>> = perm.iter().map(|&i| imgs[i]).collect();
    let pt: Vec<Vec<usize>> = perm.iter().map(|&i| txts[i].clone()).collect();
    let (a, _, _) = state.loss_and_grads(&cfg, &imgs, &txts).unwrap();
    let (b, _, _) = state.loss_and_grads(&cfg, &pi, &pt).unwrap();
    assert!((a.total - b.total).abs() < 1e-12);
    assert!((a.l_c - b.l_c).abs() < 1e-12);
}

fn in_batch_infonce(img: &Array2<f64>, txt: &Array2<f64>, tau: f64) -> f64 {
    let logits = img.dot(&txt.t()) / tau;
    let n = logits.nrows();
    let lse = |row: ndarray::ArrayView1<f64>| {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        m + row.mapv(|v| (v - m).exp()).sum().ln()
    };
    let mut total = 0.0;
    for i in 0..n {
        total += lse(logits.row(i)) - logits[[i, i]];
        total += lse(logits.column(i)) - logits[[i, i]];
    }
    total / (2.0 * n as f64)
}

#[test]
fn contrastive_only_configuration() {
    let cfg = TrainConfig {
        mu: 0.0,
        momentum: 0.0,
        ..config(0)
    };
    let mut state = TrainState::init(&tiny_encoder(), &IpsiConfig::default(), &cfg).unwrap();
    let c = corpus(8, 6);
    let (imgs, txts) = batch(&c);
    state.train_step(&cfg, &imgs[..4], &txts[..4]).unwrap();
    assert_eq!(state.teacher, state.student);
    assert!(state.image_queue.is_empty());
    let (loss, _, _) = state.loss_and_grads(&cfg, &imgs[4..], &txts[4..]).unwrap();
    assert_eq!(loss.total, loss.l_c);
    let e = state.embed(&state.student, &imgs[4..], &txts[4..]).unwrap();
    let oracle = in_batch_infonce(&e.image, &e.text, state.tau());
    assert!((loss.l_c - oracle).abs() < 1e-10, "{} vs {oracle}", loss.l_c);

    let frozen = TrainConfig {
        momentum: 1.0,
        ..cfg.clone()
    };
    let before = state.teacher.clone();
    state.train_step(&frozen, &imgs[4..], &txts[4..]).unwrap();
    assert_eq!(state.teacher, before);
}

#[test]
fn queue_fills_after_each_step() {
    let cfg = config(6);
    let mut state = TrainState::init(&tiny_encoder(), &IpsiConfig::default(), &cfg).unwrap();
    let c = corpus(12, 7);
    let (imgs, txts) = batch(&c);
    state.train_step(&cfg, &imgs[..4], &txts[..4]).unwrap();
    assert_eq!(state.image_queue.len(), 4);
    state.train_step(&cfg, &imgs[4..8], &txts[4..8]).unwrap();
    assert_eq!(state.text_queue.len(), 6);
    for row in state.image_queue.to_array().rows() {
        assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn tau_stays_in_its_clamp() {
    let cfg = TrainConfig {
        lr: 0.5,
        ..config(0)
    };
    let mut state = TrainState::init(&tiny_encoder(), &IpsiConfig::default(), &cfg).unwrap();
    let c = corpus(8, 8);
    train(&mut state, &cfg, &c, None, |r| {
        assert!((5e-3 - 1e-12..=0.5 + 1e-12).contains(&r.tau), "{}", r.tau);
        Ok(())
    })
    .unwrap();
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let cfg = config(0);
    let mut state = TrainState::init(&tiny_encoder(), &IpsiConfig::default(), &cfg).unwrap();
    let idx = state.student.index_of("image.patch_proj.weight").unwrap();
    state.student.get_mut(idx)[[0, 0]] = f64::NAN;
    let snapshot = state.clone();
    let c = corpus(4, 9);
    let (imgs, txts) = batch(&c);
    let err = state.train_step(&cfg, &imgs, &txts).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("non-finite") && msg.contains("tau="), "{msg}");
    assert_eq!(state.step, snapshot.step);
    assert_eq!(state.teacher, snapshot.teacher);
}

#[test]
fn mismatched_batch_and_bad_config_are_rejected() {
    let cfg = config(0);
    let mut state = TrainState::init(&tiny_encoder(), &IpsiConfig::default(), &cfg).unwrap();
    let c = corpus(3, 10);
    let (imgs, txts) = batch(&c);
    assert!(matches!(state.train_step(&cfg, &imgs, &txts[..2]), Err(TrainError::Mismatch { .. })));
    let bad = TrainConfig { mu: 1.5, ..cfg.clone() };
    assert!(bad.validate().unwrap_err().to_string().contains("mu ∈ (0,1)"));
    let zero = TrainConfig { mu: 0.0, ..cfg };
    assert!(zero.validate().is_err());
    assert!(zero.validate_allowing_endpoints().is_ok());
}

#[test]
fn metrics_log_is_line_delimited_json() {
    let cfg = config(4);
    let mut state = TrainState::init(&tiny_encoder(), &IpsiConfig::default(), &cfg).unwrap();
    let log = train(&mut state, &cfg, &corpus(8, 11), Some(3), |_| Ok(())).unwrap();
    let mut buf = Vec::new();
    urban_align::pretrain::trainer::write_metrics(&mut buf, &log).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let v: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["l_c", "l_d", "step", "tau", "total"]);
    assert_eq!(v["step"], 2);
}

fn trained_checkpoint(steps: u64) -> (Checkpoint, PairedCorpus, TrainConfig) {
    let cfg = config(5);
    let mut state = TrainState::init(&tiny_encoder(), &IpsiConfig::default(), &cfg).unwrap();
    let c = corpus(10, 12);
    train(&mut state, &cfg, &c, Some(steps), |_| Ok(())).unwrap();
    let ck = Checkpoint {
        state,
        train: cfg.clone(),
        ipsi: IpsiConfig::default(),
        tokenizer: Some(Tokenizer::fit(["a b c"])),
    };
    (ck, c, cfg)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (ck, _, _) = trained_checkpoint(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.state.student.fingerprint(), ck.state.student.fingerprint());
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1, "temp files left behind");
}

#[test]
fn checkpoint_errors_name_the_problem() {
    let (ck, _, _) = trained_checkpoint(2);
    let bytes = ck.to_bytes();

    let truncated = &bytes[..bytes.len() / 2];
    assert!(matches!(Checkpoint::from_bytes(truncated), Err(CheckpointError::Checksum)));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(CheckpointError::Truncated(_))));

    let mut flipped = bytes.clone();
    let mid = flipped.len() - 100;
    flipped[mid] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(CheckpointError::Checksum)));

    let mut versioned = bytes.clone();
    versioned[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&versioned).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");

    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&magic), Err(CheckpointError::Magic)));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (ck, c, cfg) = trained_checkpoint(5);
    let mut resumed = Checkpoint::from_bytes(&ck.to_bytes()).unwrap().state;
    let after = train(&mut resumed, &cfg, &c, Some(7), |_| Ok(())).unwrap();

    let mut straight = TrainState::init(&tiny_encoder(), &IpsiConfig::default(), &cfg).unwrap();
    let full = train(&mut straight, &cfg, &c, Some(7), |_| Ok(())).unwrap();
    assert_eq!(after, full[5..]);
    assert_eq!(resumed, straight);
}

#[test]
fn pooled_feature_gradient_is_finite_for_padded_batches() {
    // Mixed lengths exercise masking in attention and pooling.
    let state = TrainState::init(&tiny_encoder(), &IpsiConfig::default(), &config(0)).unwrap();
    let texts = vec![vec![2], vec![3, 4, 5, 6, 7, 8, 9]];
    let mut tape = Tape::new();
    let v = state.encoder.encode_texts(&mut tape, &state.student, &texts).unwrap();
    let seed = Array2::ones(tape.value(v).raw_dim());
    let grads = tape.backward_seeded(v, seed);
    assert!(grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite())));
    let norms: Array1<f64> = tape.value(v).map_axis(Axis(1), |r| r.dot(&r).sqrt());
    assert!(norms.iter().all(|n| (n - 1.0).abs() < 1e-6));
}
