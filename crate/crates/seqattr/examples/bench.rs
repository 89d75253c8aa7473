//! Rough step/eval timing at acceptance scale; not part of the test suite.

use std::time::Instant;

use seqattr::data::{generate_dataset, load_dataset, SyntheticSpec};
use seqattr::trainer::{evaluate, train, EvalConfig, Model, ModelConfig, TrainArm, TrainConfig};

fn main() {
    let dir = std::env::temp_dir().join("seqattr_bench");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let t0 = Instant::now();
    let spec = SyntheticSpec {
        train_identities: 200,
        test_identities: 200,
        images_per_identity: 20,
        seed: 7,
        ..Default::default()
    };
    let g = generate_dataset(&spec, &dir).unwrap();
    println!("gen: {:.1?}", t0.elapsed());

    let t0 = Instant::now();
    let train_data = load_dataset(g.train).unwrap();
    let test_data = load_dataset(g.test).unwrap();
    let _ = &test_data;
    println!("load: {:.1?}", t0.elapsed());

    let n_ids = train_data.manifest.identities().len();
    let mut model = Model::new(&ModelConfig::desk(), &g.table, n_ids, g.stats.clone(), 7).unwrap();
    println!("params: {}", model.store.iter().map(|(_, t)| t.numel()).sum::<usize>());

    // component timing on one image
    {
        use numkit::Tape;
        let img = model.prepare_image(&train_data.images[0]);
        let reps = 20;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::inference();
            model.encoder.forward_trunk(&mut tape, &model.store, &img).unwrap();
        }
        println!("trunk fwd: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::inference();
            model.encoder.forward(&mut tape, &model.store, &img).unwrap();
        }
        println!("enc fwd: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::new();
            let enc = model.encoder.forward(&mut tape, &model.store, &img).unwrap();
            let loss = tape.mean(enc.x).unwrap();
            tape.backward(loss).unwrap();
        }
        println!("enc fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::new();
            let enc = model.encoder.forward(&mut tape, &model.store, &img).unwrap();
            let mem = model.attn.encode_memory(&mut tape, &model.store, enc.x).unwrap();
            let logits = model.attn.decode_teacher_forced(&mut tape, &model.store, mem, &[100, 1, 3, 5, 9, 13, 0]).unwrap();
            let loss = model.attn.attribute_loss(&mut tape, logits, &[1, 3, 5, 9, 13, 0, 0]).unwrap();
            tape.backward(loss).unwrap();
        }
        println!("enc+attn fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::new();
            let enc = model.encoder.forward(&mut tape, &model.store, &img).unwrap();
            let z = model.id_head.logits(&mut tape, &model.store, enc.conv_seq).unwrap();
            let loss = tape.cross_entropy(z, 0).unwrap();
            tape.backward(loss).unwrap();
        }
        println!("enc+id fwd+bwd: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    }

    // training trajectory: N epochs, eval snapshots on a test slice
    let epochs: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(2);
    let slice = test_data;
    // a single continuous run, with snapshot evaluations along the way
    let t_all = Instant::now();
    let snapshots: Vec<usize> = vec![epochs];
    let mut done = 0usize;
    for &target in &snapshots {
        let chunk = target - done;
        let cfg = TrainConfig {
            epochs: chunk,
            ..TrainConfig::default()
        };
        // NOTE: restarts Adam per chunk; real runs train in one call
        let t0 = Instant::now();
        let out = train(&mut model, &train_data, &cfg, TrainArm::Full).unwrap();
        done = target;
        let last = out.log.last().unwrap();
        let report = evaluate(&model, &slice, &EvalConfig::default()).unwrap();
        println!(
            "after {done} epochs (+{:.0?}): joint {:.3} (id {:.3} ctc {:.3} at {:.3}) | mA {:.3} rank1 {:.3} agree {:.3} resolved {:.3}",
            t0.elapsed(),
            last.joint,
            last.l_id,
            last.l_ctc.unwrap(),
            last.l_at.unwrap(),
            report.attribute.mean_accuracy,
            report.reid.rank1,
            report.ctc_attention_agreement,
            report.groups_resolved,
        );
    }
    println!("total: {:.0?}", t_all.elapsed());
}
