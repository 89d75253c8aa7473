//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/configuration error,
//! 3 numeric/training failure. Pipeline commands write a `run.json`
//! provenance record (effective config, seed, version, inputs, outputs)
//! into their output directory; a run is reproducible from that record
//! alone. No command mutates its inputs.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::codec::{CodecError, MappingTable};
use crate::config::{AppConfig, ConfigError, ConfigMap};
use crate::data::{
    channel_stats, generate_dataset, load_dataset, load_manifest, ChannelStats, DataError,
    Dataset, Simg, Split,
};
use crate::trainer::{
    ablate, evaluate, loss_log_csv, train, AblationKind, Model, TrainArm, TrainError,
};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("provenance: {0}")]
    Json(#[from] serde_json::Error),
}

fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::Usage(_) => 1,
        CliError::Config(_) | CliError::Codec(_) | CliError::Data(_) | CliError::Io(_)
        | CliError::Json(_) => 2,
        CliError::Train(e) => match e {
            // file-shaped problems are data errors even when they surface
            // through the numeric kernel (checkpoint containers, IO)
            TrainError::Num(numkit::NumError::Checkpoint(_))
            | TrainError::Num(numkit::NumError::Io(_)) => 2,
            TrainError::Sample { .. }
            | TrainError::Objective(_)
            | TrainError::Ctc(_)
            | TrainError::Num(_)
            | TrainError::Metrics(_) => 3,
            TrainError::Codec(_)
            | TrainError::Data(_)
            | TrainError::Model(_)
            | TrainError::Config(_)
            | TrainError::CheckpointMismatch(_) => 2,
        },
    }
}

#[derive(Parser)]
#[command(
    name = "seqattr",
    version,
    about = "Sequence-based person attribute recognition and re-identification"
)]
struct Cli {
    /// INI configuration file; omitted keys use desk-scale defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (overrides train.seed and the dataset seed)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration override, repeatable: --set section.key=value
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic pedestrian dataset
    GenData {
        /// Output directory for images, manifests, table, and stats
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the joint model on a generated dataset
    Train {
        /// Dataset directory produced by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint.bin and loss_log.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: attribute decoding plus re-identification
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam-decode one image and print its attribute record
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Mapping table file (table.tsv from gen-data)
        #[arg(long)]
        table: PathBuf,
        /// Optional directory for decode.json and run.json
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation study and emit a comparison CSV
    Ablate {
        /// lambda_sweep | joint_vs_separate | feature_layer | drop_attribute | order_permutation
        #[arg(long)]
        kind: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a raw .simg image to binary PPM
    ConvertImage {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Output .ppm path
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct Provenance {
    command: String,
    version: String,
    seed: u64,
    overrides: Vec<String>,
    /// Effective configuration, every key explicit.
    config: String,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn write_provenance(
    out_dir: &Path,
    command: &str,
    cfg: &AppConfig,
    overrides: &[String],
    inputs: &[(&str, &Path)],
    outputs: &[&str],
) -> Result<(), CliError> {
    let record = Provenance {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.train.seed,
        overrides: overrides.to_vec(),
        config: cfg.to_ini(),
        inputs: inputs
            .iter()
            .map(|(k, p)| (k.to_string(), p.display().to_string()))
            .collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    std::fs::write(
        out_dir.join("run.json"),
        serde_json::to_string_pretty(&record)?,
    )?;
    Ok(())
}

/// Parses and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message (help/version go to stdout)
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn effective_config(cli: &Cli) -> Result<AppConfig, CliError> {
    let mut map = match &cli.config {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::default(),
    };
    for spec in &cli.overrides {
        map.apply_override(spec)
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(seed) = cli.seed {
        map.set("train", "seed", &seed.to_string());
    }
    Ok(AppConfig::from_map(&map)?)
}

fn load_world(
    data_dir: &Path,
    cfg: &AppConfig,
) -> Result<(MappingTable, Dataset, Dataset, ChannelStats), CliError> {
    let table = MappingTable::load(data_dir.join("table.tsv"))?;
    let train_manifest = load_manifest(data_dir.join("train.csv"), &table, Split::Train)?;
    let test_manifest = load_manifest(data_dir.join("test.csv"), &table, Split::Test)?;
    let stats = match std::fs::read_to_string(data_dir.join("stats.csv")) {
        Ok(text) => ChannelStats::parse(&text)?,
        Err(_) => channel_stats(&train_manifest)?,
    };
    let train_data = load_dataset(train_manifest)?;
    let test_data = load_dataset(test_manifest)?;
    let _ = cfg;
    Ok((table, train_data, test_data, stats))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli)?;
    let overrides = cli.overrides.clone();
    match &cli.command {
        Command::GenData { out } => {
            std::fs::create_dir_all(out)?;
            let generated = generate_dataset(&cfg.data, out)?;
            println!(
                "generated {} train / {} test images under {}",
                generated.train.rows.len(),
                generated.test.rows.len(),
                out.display()
            );
            write_provenance(
                out,
                "gen-data",
                &cfg,
                &overrides,
                &[],
                &["train.csv", "test.csv", "table.tsv", "stats.csv", "images/"],
            )
        }
        Command::Train { data, out } => {
            std::fs::create_dir_all(out)?;
            let (table, train_data, _test, stats) = load_world(data, &cfg)?;
            let n_ids = train_data.manifest.identities().len();
            let mut model = Model::new(&cfg.model, &table, n_ids, stats, cfg.train.seed)?;
            let outcome = train(&mut model, &train_data, &cfg.train, TrainArm::Full)?;
            model.save_checkpoint(out.join("checkpoint.bin"), Some(&outcome.adam))?;
            std::fs::write(out.join("loss_log.csv"), loss_log_csv(&outcome.log))?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "trained {} steps; final joint loss {:.4}",
                    outcome.log.len(),
                    last.joint
                );
            }
            write_provenance(
                out,
                "train",
                &cfg,
                &overrides,
                &[("data", data)],
                &["checkpoint.bin", "loss_log.csv"],
            )
        }
        Command::Eval { data, ckpt, out } => {
            std::fs::create_dir_all(out)?;
            let (table, _train, test_data, _stats) = load_world(data, &cfg)?;
            let model = Model::from_checkpoint(&cfg.model, &table, ckpt)?;
            let report = evaluate(&model, &test_data, &cfg.eval)?;
            std::fs::write(out.join("report.csv"), report.to_csv())?;
            std::fs::write(out.join("attribute_report.txt"), report.attribute.to_table_text())?;
            println!(
                "mA {:.4}  rank1 {:.4}  mAP {:.4}",
                report.attribute.mean_accuracy, report.reid.rank1, report.reid.mean_ap
            );
            write_provenance(
                out,
                "eval",
                &cfg,
                &overrides,
                &[("data", data), ("ckpt", ckpt)],
                &["report.csv", "attribute_report.txt"],
            )
        }
        Command::Decode {
            ckpt,
            image,
            table,
            out,
        } => {
            let table = MappingTable::load(table)?;
            let model = Model::from_checkpoint(&cfg.model, &table, ckpt)?;
            let img = Simg::read_from(image)?;
            let prepared = model.prepare_image(&img);
            let (hyp, record) = model.decode_image(&prepared, cfg.eval.beam_width)?;
            let labels: Vec<String> = hyp.labels.iter().map(|l| l.to_string()).collect();
            println!("labels: ({})", labels.join(","));
            println!("record: {record}");
            println!("log_prob: {:.6}", hyp.log_prob);
            if let Some(out) = out {
                std::fs::create_dir_all(out)?;
                let decoded = serde_json::json!({
                    "image": image.display().to_string(),
                    "labels": hyp.labels,
                    "log_prob": hyp.log_prob,
                    "record": record.to_string(),
                });
                std::fs::write(out.join("decode.json"), serde_json::to_string_pretty(&decoded)?)?;
                write_provenance(
                    out,
                    "decode",
                    &cfg,
                    &overrides,
                    &[("ckpt", ckpt), ("image", image)],
                    &["decode.json"],
                )?;
            }
            Ok(())
        }
        Command::Ablate { kind, data, out } => {
            let kind = AblationKind::parse(kind).map_err(|e| CliError::Usage(e.to_string()))?;
            std::fs::create_dir_all(out)?;
            let (table, train_data, test_data, stats) = load_world(data, &cfg)?;
            let comparison = ablate(
                kind,
                &cfg.model,
                &cfg.train,
                &cfg.eval,
                &table,
                &train_data,
                &test_data,
                &stats,
            )?;
            let file = format!("ablation_{}.csv", kind.name());
            std::fs::write(out.join(&file), comparison.to_csv())?;
            print!("{}", comparison.to_csv());
            write_provenance(out, "ablate", &cfg, &overrides, &[("data", data)], &[&file])
        }
        Command::ConvertImage { input, out } => {
            let img = Simg::read_from(input)?;
            std::fs::write(out, img.to_ppm()?)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}
