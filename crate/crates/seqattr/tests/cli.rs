//! End-to-end command-line pipeline on a miniature dataset.

use std::fs;
use std::path::Path;

use seqattr::cli::run;

const MICRO_CFG: &str = "\
[data]
train_identities = 6
test_identities = 4
images_per_identity = 3

[encoder]
scale = 16
rnn_hidden_1 = 12
rnn_hidden_2 = 8

[decoder]
layers = 1
heads = 2
d_model = 16
ffn_dim = 32

[train]
epochs = 1
batch_size = 8
learning_rate = 0.001
seed = 7
";

fn args(parts: &[&str]) -> Vec<String> {
    let mut v = vec!["seqattr".to_string()];
    v.extend(parts.iter().map(|s| s.to_string()));
    v
}

fn dir_digest(path: &Path) -> Vec<(String, u64)> {
    let mut entries = Vec::new();
    fn walk(p: &Path, base: &Path, out: &mut Vec<(String, u64)>) {
        for entry in fs::read_dir(p).unwrap() {
            let entry = entry.unwrap();
            let path = entry.path();
            if path.is_dir() {
                walk(&path, base, out);
            } else {
                let bytes = fs::read(&path).unwrap();
                let mut h = 1469598103934665603u64;
                for b in bytes {
                    h ^= b as u64;
                    h = h.wrapping_mul(1099511628211);
                }
                out.push((path.strip_prefix(base).unwrap().display().to_string(), h));
            }
        }
    }
    walk(path, path, &mut entries);
    entries.sort();
    entries
}

#[test]
fn full_pipeline_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("micro.cfg");
    fs::write(&cfg_path, MICRO_CFG).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let data = tmp.path().join("data");
    let data_s = data.to_str().unwrap().to_string();

    // gen-data
    assert_eq!(run(args(&["gen-data", "--config", cfg, "--out", &data_s])), 0);
    for f in ["train.csv", "test.csv", "table.tsv", "stats.csv", "run.json"] {
        assert!(data.join(f).is_file(), "missing {f}");
    }

    // inputs must not be mutated by later stages
    let before = dir_digest(&data);

    // train
    let run_dir = tmp.path().join("run");
    let run_s = run_dir.to_str().unwrap().to_string();
    assert_eq!(
        run(args(&["train", "--config", cfg, "--data", &data_s, "--out", &run_s])),
        0
    );
    assert!(run_dir.join("checkpoint.bin").is_file());
    let log = fs::read_to_string(run_dir.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,l_id,l_ctc,l_at,joint,lr\n"));
    assert!(log.lines().count() > 1);

    // eval
    let eval_dir = tmp.path().join("eval");
    let eval_s = eval_dir.to_str().unwrap().to_string();
    let ckpt = run_dir.join("checkpoint.bin");
    let ckpt_s = ckpt.to_str().unwrap().to_string();
    assert_eq!(
        run(args(&[
            "eval", "--config", cfg, "--data", &data_s, "--ckpt", &ckpt_s, "--out", &eval_s
        ])),
        0
    );
    let report = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert!(report.contains("mA,") && report.contains("rank1,") && report.contains("mAP,"));

    // decode one image
    let manifest = fs::read_to_string(data.join("test.csv")).unwrap();
    let first_image = manifest.lines().nth(1).unwrap().split(',').next().unwrap();
    let image = data.join(first_image);
    let table = data.join("table.tsv");
    assert_eq!(
        run(args(&[
            "decode",
            "--config",
            cfg,
            "--ckpt",
            &ckpt_s,
            "--image",
            image.to_str().unwrap(),
            "--table",
            table.to_str().unwrap(),
        ])),
        0
    );

    // convert-image
    let ppm = tmp.path().join("x.ppm");
    assert_eq!(
        run(args(&[
            "convert-image",
            "--input",
            image.to_str().unwrap(),
            "--out",
            ppm.to_str().unwrap(),
        ])),
        0
    );
    let ppm_bytes = fs::read(&ppm).unwrap();
    assert!(ppm_bytes.starts_with(b"P6\n"));

    // ablate (single-training kind to stay quick)
    let ab_dir = tmp.path().join("ablate");
    assert_eq!(
        run(args(&[
            "ablate",
            "--config",
            cfg,
            "--kind",
            "feature_layer",
            "--data",
            &data_s,
            "--out",
            ab_dir.to_str().unwrap(),
        ])),
        0
    );
    let csv = fs::read_to_string(ab_dir.join("ablation_feature_layer.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header + 2 layer rows:\n{csv}");

    // nothing mutated the dataset directory (run.json from gen-data included)
    assert_eq!(before, dir_digest(&data));

    // usage and error exit codes
    assert_eq!(run(args(&[])), 1, "missing subcommand");
    assert_eq!(
        run(args(&["train", "--config", cfg, "--data", &data_s, "--out", &run_s, "--set", "train.bogus=1"])),
        1,
        "override must reference an existing key"
    );
    assert_eq!(
        run(args(&["ablate", "--config", cfg, "--kind", "nope", "--data", &data_s, "--out", &run_s])),
        1,
        "unknown ablation kind"
    );
    assert_eq!(
        run(args(&["gen-data", "--config", "/nonexistent.cfg", "--out", &data_s])),
        2,
        "missing config file"
    );
    let bad_ckpt = tmp.path().join("junk.bin");
    fs::write(&bad_ckpt, b"not a checkpoint").unwrap();
    assert_eq!(
        run(args(&[
            "eval", "--config", cfg, "--data", &data_s,
            "--ckpt", bad_ckpt.to_str().unwrap(), "--out", &eval_s
        ])),
        2,
        "corrupt checkpoint"
    );
}

#[test]
fn rerunnable_from_provenance_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("micro.cfg");
    fs::write(&cfg_path, MICRO_CFG).unwrap();
    let data1 = tmp.path().join("d1");
    assert_eq!(
        run(args(&[
            "gen-data",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            data1.to_str().unwrap(),
        ])),
        0
    );

    // reconstruct the run purely from run.json
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data1.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["command"], "gen-data");
    let config_text = record["config"].as_str().unwrap();
    let cfg2_path = tmp.path().join("from_provenance.cfg");
    fs::write(&cfg2_path, config_text).unwrap();
    let data2 = tmp.path().join("d2");
    assert_eq!(
        run(args(&[
            "gen-data",
            "--config",
            cfg2_path.to_str().unwrap(),
            "--out",
            data2.to_str().unwrap(),
        ])),
        0
    );
    assert_eq!(
        fs::read(data1.join("train.csv")).unwrap(),
        fs::read(data2.join("train.csv")).unwrap()
    );
    assert_eq!(
        fs::read(data1.join("stats.csv")).unwrap(),
        fs::read(data2.join("stats.csv")).unwrap()
    );
}
