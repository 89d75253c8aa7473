//! Acceptance suite: every release criterion as one test, each printing a
//! `criterion N: PASS` line (visible with `--nocapture`). Criteria 7-9 share
//! one expensive trained world, built once.
//!
//! Run with: `cargo test --test acceptance -- --nocapture`

use std::sync::LazyLock;
use std::time::Instant;

use numkit::gradcheck::{check_op, run_core_op_suite, Tolerance};
use numkit::init::{mix_seed, seeded_rng, uniform};
use numkit::{ParamStore, Tape};

use seqattr::codec::{
    decode_sequence, encode_record, extend_with_blanks, AttributeRecord, Label, MappingTable,
};
use seqattr::ctc::{
    ctc_brute_force, ctc_log_prob, ctc_loss, enumerate_collapsed_outputs, min_steps,
    PosteriorMatrix,
};
use seqattr::data::{default_table, generate_dataset, load_dataset, Dataset, SyntheticSpec};
use seqattr::decoder::{AttnDecoder, TransformerConfig};
use seqattr::encoder::{Encoder, EncoderConfig, FeatureLayer};
use seqattr::metrics::{cmc_map, pairwise_distance, rank_gallery, ItemMeta, Protocol};
use seqattr::trainer::{
    ablate, evaluate, loss_log_csv, train, AblationKind, EvalConfig, EvalReport, Model,
    ModelConfig, TrainArm, TrainConfig,
};

/// Training budget for the learnability runs; the criterion allows up to 30.
const DESK_EPOCHS: usize = 16;

// ── Shared trained world (criteria 7, 8, 9 and diagnostics) ─────────────

struct TrainedArm {
    checkpoint: Vec<u8>,
    log: String,
    report: EvalReport,
}

struct World {
    _dir: tempfile::TempDir,
    table: MappingTable,
    test_data: Dataset,
    joint_model: Model,
    joint: TrainedArm,
    joint_rerun_checkpoint: Vec<u8>,
    joint_rerun_log: String,
    attr_only: TrainedArm,
    attr_only_rerun_checkpoint: Vec<u8>,
    attr_only_rerun_log: String,
    untrained_report: EvalReport,
    /// Wall time of the criterion pipeline: generate + both arms + evals.
    pipeline_seconds: f64,
}

fn train_arm(
    table: &MappingTable,
    train_data: &Dataset,
    stats: &seqattr::data::ChannelStats,
    lambda: f64,
) -> (Model, Vec<u8>, String) {
    let n_ids = train_data.manifest.identities().len();
    let mut model = Model::new(&ModelConfig::desk(), table, n_ids, stats.clone(), 7)
        .expect("desk model builds");
    let cfg = TrainConfig {
        epochs: DESK_EPOCHS,
        lambda,
        ..TrainConfig::default()
    };
    let out = train(&mut model, train_data, &cfg, TrainArm::Full).expect("training runs");
    let tmp = tempfile::NamedTempFile::new().expect("temp checkpoint");
    model
        .save_checkpoint(tmp.path(), Some(&out.adam))
        .expect("checkpoint writes");
    let bytes = std::fs::read(tmp.path()).expect("checkpoint readable");
    (model, bytes, loss_log_csv(&out.log))
}

static WORLD: LazyLock<World> = LazyLock::new(|| {
    let dir = tempfile::tempdir().expect("tempdir");
    let started = Instant::now();
    let spec = SyntheticSpec {
        train_identities: 200,
        test_identities: 200,
        images_per_identity: 20,
        seed: 7,
        ..Default::default()
    };
    let generated = generate_dataset(&spec, dir.path()).expect("dataset generates");
    let table = generated.table.clone();
    let stats = generated.stats.clone();
    let train_data = load_dataset(generated.train).expect("train loads");
    let test_data = load_dataset(generated.test).expect("test loads");

    let untrained_model = Model::new(
        &ModelConfig::desk(),
        &table,
        train_data.manifest.identities().len(),
        stats.clone(),
        7,
    )
    .expect("untrained model");
    let untrained_report =
        evaluate(&untrained_model, &test_data, &EvalConfig::default()).expect("untrained eval");

    let (joint_model, joint_ckpt, joint_log) = train_arm(&table, &train_data, &stats, 4.0);
    let joint_report =
        evaluate(&joint_model, &test_data, &EvalConfig::default()).expect("joint eval");
    let (_attr_model, attr_ckpt, attr_log) = train_arm(&table, &train_data, &stats, 0.0);
    let attr_report =
        evaluate(&_attr_model, &test_data, &EvalConfig::default()).expect("attr-only eval");
    let pipeline_seconds = started.elapsed().as_secs_f64();

    // determinism reruns of both arms (criterion 9), outside the clock
    let (_m1, joint_rerun_ckpt, joint_rerun_log) = train_arm(&table, &train_data, &stats, 4.0);
    let (_m2, attr_rerun_ckpt, attr_rerun_log) = train_arm(&table, &train_data, &stats, 0.0);

    World {
        _dir: dir,
        table,
        test_data,
        joint_model,
        joint: TrainedArm {
            checkpoint: joint_ckpt,
            log: joint_log,
            report: joint_report,
        },
        joint_rerun_checkpoint: joint_rerun_ckpt,
        joint_rerun_log,
        attr_only: TrainedArm {
            checkpoint: attr_ckpt,
            log: attr_log,
            report: attr_report,
        },
        attr_only_rerun_checkpoint: attr_rerun_ckpt,
        attr_only_rerun_log: attr_rerun_log,
        untrained_report,
        pipeline_seconds,
    }
});

// ── Criterion 1: CTC oracle equivalence ─────────────────────────────────

#[test]
fn acceptance_01_ctc_oracle_equivalence() {
    let started = Instant::now();
    let mut checked = 0usize;
    let mut seed = 0u64;
    let mut worst: f64 = 0.0;
    while checked < 1000 {
        seed += 1;
        let t = 1 + (mix_seed(seed, 1) % 6) as usize;
        let k = 1 + (mix_seed(seed, 2) % 3) as usize;
        let u = (mix_seed(seed, 3) % 4) as usize;
        let labels: Vec<Label> = (0..u)
            .map(|i| 1 + (mix_seed(seed, 10 + i as u64) % k as u64) as Label)
            .collect();
        if t < min_steps(&labels) {
            continue;
        }
        let logits = uniform(&mut seeded_rng(mix_seed(seed, 4)), vec![t, k + 1], 3.0);
        let mut tape = Tape::inference();
        let lv = tape.constant(logits);
        let sm = tape.softmax(lv, 1).unwrap();
        let q = PosteriorMatrix::new(tape.value(sm).clone()).unwrap();
        let forward = ctc_log_prob(&q, &labels).unwrap().exp();
        let brute = ctc_brute_force(&q, &labels).unwrap();
        let diff = (forward - brute).abs();
        worst = worst.max(diff);
        assert!(
            diff <= 1e-10,
            "instance {seed} (T={t}, K={k}, y={labels:?}): |{forward} - {brute}| = {diff}"
        );
        checked += 1;
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "oracle equivalence took {elapsed:?}, budget is one minute"
    );
    println!(
        "criterion 1: PASS - {checked} instances, worst |forward - brute| = {worst:.2e}, {elapsed:.1?}"
    );
}

// ── Criterion 2: CTC completeness ───────────────────────────────────────

#[test]
fn acceptance_02_ctc_completeness() {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let t = 2 + (mix_seed(seed, 5) % 3) as usize; // 2..=4
        let k = 1 + (mix_seed(seed, 6) % 3) as usize; // 1..=3
        let logits = uniform(&mut seeded_rng(mix_seed(seed, 7)), vec![t, k + 1], 3.0);
        let mut tape = Tape::inference();
        let lv = tape.constant(logits);
        let sm = tape.softmax(lv, 1).unwrap();
        let q = PosteriorMatrix::new(tape.value(sm).clone()).unwrap();
        let mut total = 0.0;
        for y in enumerate_collapsed_outputs(&q).unwrap() {
            total += ctc_brute_force(&q, &y).unwrap();
        }
        worst = worst.max((total - 1.0).abs());
        assert!(
            (total - 1.0).abs() <= 1e-9,
            "seed {seed} (T={t}, K={k}): total probability {total}"
        );
    }
    println!("criterion 2: PASS - 100 posteriors, worst |total - 1| = {worst:.2e}");
}

// ── Criterion 3: gradient suite ─────────────────────────────────────────

#[test]
fn acceptance_03_gradient_suite() {
    // every differentiable kernel op
    let ops = run_core_op_suite(0xACC3).expect("all op gradients match finite differences");

    let tol = Tolerance::default();

    // identity classification loss through the dense-model chain
    check_op(
        "identity_loss",
        &[
            uniform(&mut seeded_rng(1), vec![2, 4], 1.0),
            uniform(&mut seeded_rng(2), vec![8, 6], 1.0),
            uniform(&mut seeded_rng(3), vec![6], 0.5),
            uniform(&mut seeded_rng(4), vec![6, 5], 1.0),
            uniform(&mut seeded_rng(5), vec![5], 0.5),
        ],
        &tol,
        |t, v| {
            let flat = t.reshape(v[0], vec![1, 8])?;
            let c = t.matmul(flat, v[1])?;
            let c = t.add_bias(c, v[2])?;
            let a = t.relu(c)?;
            let z = t.matmul(a, v[3])?;
            let z = t.add_bias(z, v[4])?;
            let z = t.reshape(z, vec![5])?;
            t.cross_entropy(z, 3)
        },
    )
    .expect("identity loss gradient");

    // CTC loss from logits
    check_op(
        "ctc_loss",
        &[uniform(&mut seeded_rng(6), vec![6, 4], 2.0)],
        &tol,
        |t, v| ctc_loss(t, v[0], &[2, 1, 3]).map_err(|e| numkit::NumError::Contract(e.to_string())),
    )
    .expect("ctc loss gradient");

    // attribute loss through the full attention decoder
    let mut store = ParamStore::new();
    let dec = AttnDecoder::new(
        TransformerConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            ffn_dim: 32,
            max_len: 6,
            beam_width: 3,
        },
        12,
        5,
        100,
        &mut store,
        &mut seeded_rng(9),
    )
    .expect("tiny decoder");
    check_op(
        "attribute_loss",
        &[uniform(&mut seeded_rng(10), vec![4, 12], 1.0)],
        &tol,
        |t, v| {
            let mem = dec
                .encode_memory(t, &store, v[0])
                .map_err(|e| numkit::NumError::Contract(e.to_string()))?;
            let logits = dec
                .decode_teacher_forced(t, &store, mem, &[100, 2, 4, 0, 0])
                .map_err(|e| numkit::NumError::Contract(e.to_string()))?;
            dec.attribute_loss(t, logits, &[2, 4, 0, 0, 0])
                .map_err(|e| numkit::NumError::Contract(e.to_string()))
        },
    )
    .expect("attribute loss gradient");

    println!(
        "criterion 3: PASS - {} kernel ops + identity/ctc/attribute losses match finite differences",
        ops.len()
    );
}

// ── Criterion 4: shape contract ─────────────────────────────────────────

#[test]
fn acceptance_04_shape_contract() {
    // full-width configuration, structural forward without any training
    let cfg = EncoderConfig::paper_scale();
    let plan = cfg.validate().unwrap();
    assert_eq!((plan.t, plan.d, plan.conv_channels), (28, 1024, 2048));
    assert_eq!(plan.conv_feature_len(), 57344);
    // the dense head's low-dimensional feature is 1024 at full width
    assert_eq!(1024 / cfg.scale, 1024);

    let mut store = ParamStore::new();
    let encoder = Encoder::new(cfg, &mut store, &mut seeded_rng(11)).unwrap();
    let image = uniform(&mut seeded_rng(12), vec![224, 112, 3], 1.0);
    let mut tape = Tape::inference();
    let out = encoder.forward(&mut tape, &store, &image).unwrap();
    assert_eq!(tape.value(out.x).shape(), [28, 1024]);
    assert_eq!(tape.value(out.conv_seq).shape(), [28, 2048]);
    assert!(tape.value(out.x).is_finite());

    // desk configuration: width 28 collapses to T = 7
    let desk = EncoderConfig::desk();
    let desk_plan = desk.validate().unwrap();
    assert_eq!(desk_plan.t, 7);
    let mut store = ParamStore::new();
    let encoder = Encoder::new(desk, &mut store, &mut seeded_rng(13)).unwrap();
    let image = uniform(&mut seeded_rng(14), vec![56, 28, 3], 1.0);
    let mut tape = Tape::inference();
    let out = encoder.forward(&mut tape, &store, &image).unwrap();
    assert_eq!(tape.value(out.x).dim(0), 7);

    println!(
        "criterion 4: PASS - 224x112 -> T=28, D=1024 (conv 57344); width 28 -> T=7, structurally"
    );
}

// ── Criterion 5: codec round trip ───────────────────────────────────────

#[test]
fn acceptance_05_codec_round_trip() {
    let table = default_table();
    let groups: Vec<(&str, Vec<String>)> = table
        .group_names()
        .into_iter()
        .map(|g| (g, table.values_of(g).unwrap().to_vec()))
        .collect();
    let mut rng = seeded_rng(0xC0DEC);
    let mut done = 0usize;
    while done < 10_000 {
        let pick = uniform(&mut rng, vec![groups.len()], 1.0);
        let mut record = AttributeRecord::new(None);
        for (gi, (g, values)) in groups.iter().enumerate() {
            let v = pick.data()[gi];
            if v < -0.5 {
                continue; // group left unassigned
            }
            let idx = ((v + 0.5) / 1.5 * values.len() as f64) as usize;
            record.set(g, &values[idx.min(values.len() - 1)]);
        }
        if record.is_empty() {
            continue;
        }
        let y = encode_record(&record, &table).expect("encodable record");
        let back = decode_sequence(y.labels(), &table);
        assert!(
            back.same_attributes(&record),
            "round trip failed: {record} -> {y:?} -> {back}"
        );
        done += 1;
    }

    // the published worked example: y = (1,5,8) -> (-,1,-,5,-,8,-)
    assert_eq!(extend_with_blanks(&[1, 5, 8]), vec![0, 1, 0, 5, 0, 8, 0]);

    println!("criterion 5: PASS - 10000 record round trips; blank extension matches the worked example");
}

// ── Criterion 6: metric oracles ─────────────────────────────────────────

fn exhaustive_ap(relevance: &[bool]) -> f64 {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 1..=relevance.len() {
        if relevance[k - 1] {
            sum += relevance[..k].iter().filter(|&&r| r).count() as f64 / k as f64;
        }
    }
    sum / total as f64
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    seqattr::metrics::l2_normalize(&mut v);
    v
}

#[test]
fn acceptance_06_metric_oracles() {
    let meta = |pid: u32, cam: u32| ItemMeta { pid, camera: cam };

    // staircase AP equals the exhaustive definition on every gallery <= 6
    let mut cases = 0usize;
    for size in 1..=6usize {
        for mask in 1u32..(1 << size) {
            let relevance: Vec<bool> = (0..size).map(|i| mask >> i & 1 == 1).collect();
            let q = unit(vec![1.0, 0.0]);
            let gallery: Vec<Vec<f64>> = (0..size)
                .map(|i| {
                    let angle = 0.1 + 0.2 * i as f64;
                    unit(vec![angle.cos(), angle.sin()])
                })
                .collect();
            let gmeta: Vec<ItemMeta> = relevance
                .iter()
                .map(|&r| meta(if r { 1 } else { 2 }, 2))
                .collect();
            let r = rank_gallery(&q, meta(1, 1), &gallery, &gmeta, &Protocol::default()).unwrap();
            let expected = exhaustive_ap(&relevance);
            assert!(
                (r.average_precision - expected).abs() < 1e-12,
                "size {size} mask {mask:b}"
            );
            cases += 1;
        }
    }

    // hand cases: AP = 1/2 and AP = 5/6
    let q = unit(vec![1.0, 0.0]);
    let gallery = vec![
        unit(vec![0.95, 0.312]),
        unit(vec![0.9, 0.436]),
        unit(vec![0.0, 1.0]),
    ];
    let gmeta = vec![meta(9, 1), meta(1, 2), meta(8, 1)];
    let r = rank_gallery(&q, meta(1, 1), &gallery, &gmeta, &Protocol::default()).unwrap();
    assert_eq!(r.average_precision, 0.5);
    let gallery = vec![
        unit(vec![0.99, 0.141]),
        unit(vec![0.9, 0.436]),
        unit(vec![0.8, 0.6]),
    ];
    let gmeta = vec![meta(1, 2), meta(7, 1), meta(1, 3)];
    let r = rank_gallery(&q, meta(1, 1), &gallery, &gmeta, &Protocol::default()).unwrap();
    assert!((r.average_precision - 5.0 / 6.0).abs() < 1e-15);

    // monotone-transform invariance of Rank-1/mAP: recompute both metrics
    // from explicit distance matrices under increasing transforms
    let queries: Vec<Vec<f64>> = (0..6)
        .map(|i| unit(vec![1.0, 0.21 * i as f64, 0.4]))
        .collect();
    let qmeta: Vec<ItemMeta> = (0..6).map(|i| meta(i as u32 % 4, 1)).collect();
    let gallery: Vec<Vec<f64>> = (0..9)
        .map(|i| unit(vec![0.3 * i as f64, 1.0, (i % 4) as f64]))
        .collect();
    let gmeta: Vec<ItemMeta> = (0..9).map(|i| meta(i as u32 % 4, 2)).collect();
    let reference = cmc_map(&queries, &qmeta, &gallery, &gmeta, &Protocol::default()).unwrap();

    let metrics_from_distances = |transform: &dyn Fn(f64) -> f64| -> (f64, f64) {
        let mut rank1 = 0usize;
        let mut ap_sum = 0.0;
        for (q, qm) in queries.iter().zip(&qmeta) {
            let mut scored: Vec<(f64, usize)> = gallery
                .iter()
                .enumerate()
                .map(|(i, g)| (transform(pairwise_distance(q, g).unwrap()), i))
                .collect();
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let relevance: Vec<bool> = scored
                .iter()
                .map(|&(_, i)| gmeta[i].pid == qm.pid)
                .collect();
            if relevance[0] {
                rank1 += 1;
            }
            ap_sum += exhaustive_ap(&relevance);
        }
        (
            rank1 as f64 / queries.len() as f64,
            ap_sum / queries.len() as f64,
        )
    };
    let base = metrics_from_distances(&|d| d);
    assert!((base.0 - reference.rank1).abs() < 1e-12);
    assert!((base.1 - reference.mean_ap).abs() < 1e-12);
    for transform in [
        &(|d: f64| 3.0 * d + 1.0) as &dyn Fn(f64) -> f64,
        &|d: f64| d.exp(),
        &|d: f64| (d + 1.0).powi(3),
    ] {
        let transformed = metrics_from_distances(transform);
        assert_eq!(base, transformed, "metrics moved under a monotone transform");
    }

    println!("criterion 6: PASS - {cases} exhaustive AP cases, hand values 1/2 and 5/6, monotone invariance");
}

// ── Criterion 7: desk-scale learnability ────────────────────────────────

#[test]
fn acceptance_07_desk_scale_learnability() {
    let world = &*WORLD;
    let chance = world.table.chance_level();
    let ma = world.joint.report.attribute.mean_accuracy;
    assert!(
        ma >= chance + 0.30,
        "(a) mA {ma:.4} below chance {chance:.4} + 0.30"
    );

    let gallery_ids = world.test_data.manifest.identities().len() as f64;
    let rank1 = world.joint.report.reid.rank1;
    assert!(
        rank1 >= 5.0 / gallery_ids,
        "(b) Rank-1 {rank1:.4} below 5x chance {:.4}",
        5.0 / gallery_ids
    );

    let attr_ma = world.attr_only.report.attribute.mean_accuracy;
    assert!(
        ma >= attr_ma - 0.01,
        "(c) joint mA {ma:.4} more than a point below attribute-only mA {attr_ma:.4}"
    );

    assert!(
        world.pipeline_seconds <= 1800.0,
        "(d) pipeline took {:.0} s, budget 1800 s",
        world.pipeline_seconds
    );

    println!(
        "criterion 7: PASS - mA {ma:.4} (chance {chance:.4}, attr-only {attr_ma:.4}), rank1 {rank1:.4}, mAP {:.4}, {:.0} s",
        world.joint.report.reid.mean_ap, world.pipeline_seconds
    );
}

// ── Criterion 8: beam search ────────────────────────────────────────────

#[test]
fn acceptance_08_beam_search() {
    let world = &*WORLD;
    let model = &world.joint_model;
    let mut exact_matches = 0usize;
    for (row, img) in world
        .test_data
        .manifest
        .rows
        .iter()
        .zip(&world.test_data.images)
        .take(100)
    {
        let image = model.prepare_image(img);
        let inference = model.infer(&image).unwrap();
        let beam1 = model
            .attn
            .beam_search(&model.store, &inference.memory, 1, model.attn.cfg.max_len)
            .unwrap();

        // independent greedy rollout
        let mut tokens = vec![model.table.start_symbol()];
        loop {
            let mut tape = Tape::inference();
            let mem = tape.constant(inference.memory.clone());
            let logits = model
                .attn
                .decode_teacher_forced(&mut tape, &model.store, mem, &tokens)
                .unwrap();
            let last = tape.value(logits).row(tokens.len() - 1);
            let mut best = 0usize;
            for c in 0..=model.table.k() {
                if last[c] > last[best] {
                    best = c;
                }
            }
            tokens.push(best as Label);
            if best == 0 || tokens.len() == model.attn.cfg.max_len {
                break;
            }
        }
        let greedy: Vec<Label> = tokens[1..].iter().copied().take_while(|&t| t != 0).collect();
        assert_eq!(
            beam1.labels, greedy,
            "width-1 beam diverged from greedy on {}",
            row.image
        );

        let beam3 = model
            .attn
            .beam_search(&model.store, &inference.memory, 3, model.attn.cfg.max_len)
            .unwrap();
        assert!(
            beam3.log_prob >= beam1.log_prob - 1e-12,
            "width-3 log-prob {} below width-1 {} on {}",
            beam3.log_prob,
            beam1.log_prob,
            row.image
        );
        if beam3.labels == beam1.labels {
            exact_matches += 1;
        }
    }
    println!(
        "criterion 8: PASS - width-1 = greedy on 100 images; width-3 never worse ({exact_matches} identical)"
    );
}

// ── Criterion 9: determinism ────────────────────────────────────────────

#[test]
fn acceptance_09_determinism() {
    let world = &*WORLD;
    assert_eq!(
        world.joint.checkpoint, world.joint_rerun_checkpoint,
        "joint checkpoints differ between identical runs"
    );
    assert_eq!(
        world.joint.log, world.joint_rerun_log,
        "joint loss logs differ between identical runs"
    );
    assert_eq!(
        world.attr_only.checkpoint, world.attr_only_rerun_checkpoint,
        "attribute-only checkpoints differ between identical runs"
    );
    assert_eq!(
        world.attr_only.log, world.attr_only_rerun_log,
        "attribute-only loss logs differ between identical runs"
    );
    println!(
        "criterion 9: PASS - byte-identical checkpoints ({} bytes) and logs across reruns of both arms",
        world.joint.checkpoint.len()
    );
}

// ── Criterion 10: ablation harness ──────────────────────────────────────

#[test]
fn acceptance_10_ablation_harness() {
    // structural check at a miniature budget: the harness runs every
    // variant end to end and emits one CSV row per variant
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        train_identities: 8,
        test_identities: 6,
        images_per_identity: 3,
        seed: 5,
        ..Default::default()
    };
    let generated = generate_dataset(&spec, dir.path()).unwrap();
    let train_data = load_dataset(generated.train).unwrap();
    let test_data = load_dataset(generated.test).unwrap();
    let model_cfg = ModelConfig {
        encoder: EncoderConfig {
            input_h: 56,
            input_w: 28,
            scale: 16,
            blocks_per_stage: [1, 1, 1, 1],
            rnn_hidden_1: 12,
            rnn_hidden_2: 8,
            rnn_cell: seqattr::encoder::RnnCell::Gru,
        },
        decoder: TransformerConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            ffn_dim: 32,
            max_len: 8,
            beam_width: 3,
        },
    };
    let train_cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let eval_cfg = EvalConfig::default();

    let check = |kind: AblationKind, rows: usize, cols: usize| {
        let tbl = ablate(
            kind,
            &model_cfg,
            &train_cfg,
            &eval_cfg,
            &generated.table,
            &train_data,
            &test_data,
            &generated.stats,
        )
        .expect("ablation runs");
        assert_eq!(tbl.rows.len(), rows, "{}: row count", kind.name());
        assert_eq!(tbl.header.len(), cols, "{}: column count", kind.name());
        let csv = tbl.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), rows + 1, "{}: csv line count", kind.name());
        for line in &lines {
            assert_eq!(
                line.split(',').count(),
                cols,
                "{}: ragged csv line `{line}`",
                kind.name()
            );
        }
        csv
    };

    // lambda sweep: 6 rows with rank1 and mAP columns
    let sweep = check(AblationKind::LambdaSweep, 6, 4);
    assert!(sweep.starts_with("lambda,rank1,mAP,mA\n"));
    for lambda in ["0", "1", "2", "4", "8", "16"] {
        assert!(
            sweep.lines().any(|l| l.starts_with(&format!("{lambda},"))),
            "missing lambda {lambda} row"
        );
    }

    // three training arms
    let arms = check(AblationKind::JointVsSeparate, 3, 3);
    for arm in ["joint", "without_reid", "without_attributes"] {
        assert!(arms.lines().any(|l| l.starts_with(arm)), "missing {arm} row");
    }

    // one row per dropped attribute group
    let dropped = check(
        AblationKind::DropAttribute,
        generated.table.group_count(),
        3,
    );
    for group in generated.table.group_names() {
        assert!(
            dropped.lines().any(|l| l.starts_with(group)),
            "missing dropped-{group} row"
        );
    }

    // table-order permutations and the feature-layer comparison
    check(AblationKind::OrderPermutation, 3, 4);
    let layers = check(AblationKind::FeatureLayer, 2, 4);
    assert!(layers.lines().any(|l| l.starts_with("conv,")));
    assert!(layers.lines().any(|l| l.starts_with("fc0,")));

    println!("criterion 10: PASS - lambda sweep (6 rows), 3 training arms, per-attribute drops, permutations, feature layers");
}

// ── Trained-model diagnostics from the operation examples ───────────────

#[test]
fn trained_model_decoding_diagnostics() {
    let world = &*WORLD;
    let report = &world.joint.report;

    // greedy CTC decoding agrees with attention decoding on >= 90% of the
    // held-out set
    assert!(
        report.ctc_attention_agreement >= 0.90,
        "ctc/attention agreement {:.4}",
        report.ctc_attention_agreement
    );

    // decoded sequences resolve >= 99% of attribute groups
    assert!(
        report.groups_resolved >= 0.99,
        "groups resolved {:.4}",
        report.groups_resolved
    );

    // an untrained model sits near (or below) chance: missing groups count
    // as wrong, so the untrained decoder cannot sit meaningfully above it
    let chance = world.table.chance_level();
    let untrained = world.untrained_report.attribute.mean_accuracy;
    assert!(
        untrained <= chance + 0.15,
        "untrained mA {untrained:.4} unexpectedly above chance {chance:.4}"
    );
    let trained = report.attribute.mean_accuracy;
    assert!(trained > untrained + 0.25, "training barely moved mA");

    // re-ID features have unit norm
    let img = world.joint_model.prepare_image(&world.test_data.images[0]);
    for layer in [FeatureLayer::Conv, FeatureLayer::Fc0] {
        let f = world
            .joint_model
            .extract_reid_features(&img, layer)
            .unwrap();
        let norm: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12, "{layer:?} norm {norm}");
    }

    println!(
        "diagnostics: PASS - agreement {:.3}, groups resolved {:.3}, untrained mA {untrained:.3} vs trained {trained:.3}",
        report.ctc_attention_agreement, report.groups_resolved
    );
}
