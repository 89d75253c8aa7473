//! Training loop, evaluation driver, and the ablation harness.
//!
//! One forward pass per image per step feeds all three streams: the identity
//! head reads the trunk output, the CTC projection and the attention decoder
//! read the recurrent output, and the joint loss composes them. Batch items
//! run in parallel on independent tapes; gradients are reduced sequentially
//! in item order, so results are bit-identical regardless of thread count.
//! Per-batch losses are means over items before composition.

use std::path::Path;

use numkit::checkpoint;
use numkit::init::{mix_seed, seeded_rng};
use numkit::{AdamHyper, AdamState, NumError, ParamId, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{
    decode_sequence, encode_record, prepare_decoder_io, AttributeRecord, CodecError, Label,
    MappingTable,
};
use crate::ctc::{self, CtcError, PosteriorMatrix};
use crate::data::{
    flip_augment, normalize, ChannelStats, DataError, Dataset, Split,
};
use crate::decoder::{AttnDecoder, BeamHypothesis, TransformerConfig};
use crate::encoder::{CtcProjection, Encoder, EncoderConfig, FeatureLayer, IdHead, ModelError};
use crate::metrics::{
    attribute_accuracy, cmc_map, l2_normalize, AttributeEvalReport, ItemMeta, MetricsError,
    Protocol, ReidSummary,
};
use crate::objective::{joint_loss, JointLossConfig, ObjectiveError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("sample {image}: {source}")]
    Sample { image: String, source: CtcError },
    #[error("checkpoint does not match the model configuration: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative per-epoch learning-rate decay.
    pub decay: f64,
    pub lambda: f64,
    pub seed: u64,
    pub warm_start: Option<std::path::PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-4,
            decay: 0.9,
            lambda: 4.0,
            seed: 7,
            warm_start: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(TrainError::Config("decay must lie in (0, 1]".into()));
        }
        if self.lambda < 0.0 {
            return Err(TrainError::Config("lambda must be nonnegative".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during epoch `e` (0-based): `lr * decay^e`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi(epoch as i32)
    }
}

/// Which streams train. "Without re-ID" is `Full` with lambda 0; dropping
/// the attribute streams entirely trains the identity loss alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainArm {
    Full,
    WithoutAttributes,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: TransformerConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            decoder: TransformerConfig::desk(),
        }
    }
}

struct ParamGroups {
    /// Everything unreachable from the identity loss alone: the CTC
    /// projection, the attention stacks, and the recurrent layers feeding
    /// them.
    attribute_streams: Vec<ParamId>,
}

pub struct Model {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub id_head: IdHead,
    pub ctc_proj: CtcProjection,
    pub attn: AttnDecoder,
    pub table: MappingTable,
    pub stats: ChannelStats,
    pub n_ids: usize,
    groups: ParamGroups,
}

impl Model {
    pub fn new(
        cfg: &ModelConfig,
        table: &MappingTable,
        n_ids: usize,
        stats: ChannelStats,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(mix_seed(seed, 0x30DE1));
        let encoder = Encoder::new(cfg.encoder.clone(), &mut store, &mut rng)?;
        let plan = encoder.plan.clone();
        let fc0_dim = (1024 / cfg.encoder.scale).max(1);
        let id_head = IdHead::new(&mut store, &mut rng, plan.conv_feature_len(), fc0_dim, n_ids)?;
        let ctc_proj = CtcProjection::new(&mut store, &mut rng, plan.d, table.k())?;
        let attn = AttnDecoder::new(
            cfg.decoder.clone(),
            plan.d,
            table.k(),
            table.start_symbol(),
            &mut store,
            &mut rng,
        )?;
        let groups = ParamGroups {
            attribute_streams: store
                .ids()
                .into_iter()
                .filter(|&id| {
                    let name = store.name(id);
                    name.starts_with("ctc/")
                        || name.starts_with("attn/")
                        || name.starts_with("encoder/rnn")
                })
                .collect(),
        };
        Ok(Self {
            store,
            encoder,
            id_head,
            ctc_proj,
            attn,
            table: table.clone(),
            stats,
            n_ids,
            groups,
        })
    }

    fn shape_fingerprint(&self) -> Vec<f64> {
        let plan = &self.encoder.plan;
        let dc = &self.attn.cfg;
        vec![
            plan.t as f64,
            plan.d as f64,
            plan.conv_channels as f64,
            self.table.k() as f64,
            self.attn.vocab_size() as f64,
            dc.layers as f64,
            dc.heads as f64,
            dc.d_model as f64,
            dc.ffn_dim as f64,
            dc.max_len as f64,
            self.n_ids as f64,
            self.id_head.fc0_dim as f64,
        ]
    }

    /// Writes parameters, optimizer state, normalization statistics, and a
    /// shape fingerprint.
    pub fn save_checkpoint<P: AsRef<Path>>(
        &self,
        path: P,
        adam: Option<&AdamState>,
    ) -> Result<(), TrainError> {
        let extra = vec![
            (
                "norm/mean".to_string(),
                Tensor::new(vec![3], self.stats.mean.clone())?,
            ),
            (
                "norm/std".to_string(),
                Tensor::new(vec![3], self.stats.std.clone())?,
            ),
            (
                "cfg/shape".to_string(),
                Tensor::new(vec![12], self.shape_fingerprint())?,
            ),
        ];
        checkpoint::write_tensors(path, &checkpoint::training_entries(&self.store, adam, &extra))?;
        Ok(())
    }

    /// Rebuilds a model from a checkpoint; the identity count comes from the
    /// stored fingerprint. A fingerprint mismatch is a version error.
    pub fn from_checkpoint<P: AsRef<Path>>(
        cfg: &ModelConfig,
        table: &MappingTable,
        path: P,
    ) -> Result<Self, TrainError> {
        let entries = checkpoint::read_tensors(path)?;
        let fingerprint = entries
            .iter()
            .find(|(n, _)| n == "cfg/shape")
            .map(|(_, t)| t.data().to_vec())
            .ok_or_else(|| TrainError::CheckpointMismatch("missing cfg/shape".into()))?;
        if fingerprint.len() != 12 {
            return Err(TrainError::CheckpointMismatch("bad cfg/shape length".into()));
        }
        let n_ids = fingerprint[10] as usize;
        let placeholder = ChannelStats {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        let mut model = Model::new(cfg, table, n_ids, placeholder, 0)?;
        if model.shape_fingerprint() != fingerprint {
            return Err(TrainError::CheckpointMismatch(format!(
                "stored {fingerprint:?} vs configured {:?}",
                model.shape_fingerprint()
            )));
        }
        let rest = checkpoint::restore_training_state(entries, &mut model.store, None)?;
        for (name, tensor) in rest {
            match name.as_str() {
                "norm/mean" => model.stats.mean = tensor.data().to_vec(),
                "norm/std" => model.stats.std = tensor.data().to_vec(),
                _ => {}
            }
        }
        Ok(model)
    }

    /// Standardized `[H, W, 3]` tensor for one stored image.
    pub fn prepare_image(&self, img: &crate::data::Simg) -> Tensor {
        normalize(&img.to_unit_tensor(), &self.stats)
    }

    /// Inference products for one image: re-ID descriptors, the attention
    /// memory, and the CTC posterior.
    pub fn infer(&self, image: &Tensor) -> Result<Inference, TrainError> {
        let mut tape = Tape::inference();
        let enc = self.encoder.forward(&mut tape, &self.store, image)?;
        let conv_flat = {
            let mut v = tape.value(enc.conv_seq).data().to_vec();
            l2_normalize(&mut v);
            v
        };
        let c = self.id_head.features_c(&mut tape, &self.store, enc.conv_seq)?;
        let fc0 = {
            let mut v = tape.value(c).data().to_vec();
            l2_normalize(&mut v);
            v
        };
        let logits = self.ctc_proj.forward(&mut tape, &self.store, enc.x)?;
        let sm = tape.softmax(logits, 1)?;
        let posterior = PosteriorMatrix::new(tape.value(sm).clone())?;
        let memory = self.attn.encode_memory(&mut tape, &self.store, enc.x)?;
        Ok(Inference {
            conv_features: conv_flat,
            fc0_features: fc0,
            memory: tape.value(memory).clone(),
            posterior,
        })
    }

    /// L2-normalized re-identification descriptor of a standardized image.
    pub fn extract_reid_features(
        &self,
        image: &Tensor,
        layer: FeatureLayer,
    ) -> Result<Vec<f64>, TrainError> {
        let inference = self.infer(image)?;
        Ok(match layer {
            FeatureLayer::Conv => inference.conv_features,
            FeatureLayer::Fc0 => inference.fc0_features,
        })
    }

    /// Beam-search attribute prediction for a standardized image.
    pub fn decode_image(
        &self,
        image: &Tensor,
        beam_width: usize,
    ) -> Result<(BeamHypothesis, AttributeRecord), TrainError> {
        let inference = self.infer(image)?;
        let hyp = self
            .attn
            .beam_search(&self.store, &inference.memory, beam_width, self.attn.cfg.max_len)?;
        let record = decode_sequence(&hyp.labels, &self.table);
        Ok((hyp, record))
    }
}

pub struct Inference {
    pub conv_features: Vec<f64>,
    pub fc0_features: Vec<f64>,
    pub memory: Tensor,
    pub posterior: PosteriorMatrix,
}

// ── Training ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub l_id: f64,
    pub l_ctc: Option<f64>,
    pub l_at: Option<f64>,
    pub joint: f64,
    pub lr: f64,
}

pub fn loss_log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,epoch,l_id,l_ctc,l_at,joint,lr\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step,
            r.epoch,
            r.l_id,
            opt(r.l_ctc),
            opt(r.l_at),
            r.joint,
            r.lr
        ));
    }
    out
}

pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub adam: AdamState,
}

struct PreparedItem {
    image: Tensor,
    image_name: String,
    class: usize,
    labels: Vec<Label>,
    dec_input: Vec<Label>,
    dec_target: Vec<Label>,
}

struct ItemResult {
    grads: Vec<(ParamId, Vec<f64>)>,
    l_id: f64,
    l_ctc: Option<f64>,
    l_at: Option<f64>,
}

fn forward_backward(
    model: &Model,
    item: &PreparedItem,
    lambda: f64,
    arm: TrainArm,
) -> Result<ItemResult, TrainError> {
    let mut tape = Tape::new();
    let (loss, l_id, l_ctc_v, l_at_v) = match arm {
        TrainArm::WithoutAttributes => {
            let conv_seq = model
                .encoder
                .forward_trunk(&mut tape, &model.store, &item.image)?;
            let z = model.id_head.logits(&mut tape, &model.store, conv_seq)?;
            let l_id = crate::encoder::id_loss(&mut tape, z, item.class)?;
            (l_id, l_id, None, None)
        }
        TrainArm::Full => {
            let enc = model.encoder.forward(&mut tape, &model.store, &item.image)?;
            let z = model.id_head.logits(&mut tape, &model.store, enc.conv_seq)?;
            let l_id = crate::encoder::id_loss(&mut tape, z, item.class)?;
            let ctc_logits = model.ctc_proj.forward(&mut tape, &model.store, enc.x)?;
            let l_ctc = ctc::ctc_loss(&mut tape, ctc_logits, &item.labels).map_err(|source| {
                TrainError::Sample {
                    image: item.image_name.clone(),
                    source,
                }
            })?;
            let memory = model.attn.encode_memory(&mut tape, &model.store, enc.x)?;
            let logits = model
                .attn
                .decode_teacher_forced(&mut tape, &model.store, memory, &item.dec_input)?;
            let l_at = model.attn.attribute_loss(&mut tape, logits, &item.dec_target)?;
            let joint = joint_loss(
                &mut tape,
                l_id,
                l_ctc,
                l_at,
                &JointLossConfig { lambda },
            )?;
            (
                joint,
                l_id,
                Some(tape.value(l_ctc).item()?),
                Some(tape.value(l_at).item()?),
            )
        }
    };
    let l_id_value = tape.value(l_id).item()?;
    tape.backward(loss)?;
    Ok(ItemResult {
        grads: tape.param_grads(),
        l_id: l_id_value,
        l_ctc: l_ctc_v,
        l_at: l_at_v,
    })
}

/// Trains in place. Deterministic for a fixed config: parameter init, batch
/// order, flip augmentation, and gradient reduction order all derive from
/// the seed alone.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    arm: TrainArm,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.manifest.split != Split::Train {
        return Err(TrainError::Config("training needs the train split".into()));
    }
    if let Some(path) = &cfg.warm_start {
        let entries = checkpoint::read_tensors(path)?;
        let params: Vec<_> = entries
            .into_iter()
            .filter(|(n, _)| !n.starts_with("adam/") && !n.starts_with("norm/") && !n.starts_with("cfg/"))
            .collect();
        checkpoint::restore_training_state(params, &mut model.store, None)?;
    }

    // dense class index per training identity
    let ids = dataset.manifest.identities();
    if ids.len() != model.n_ids {
        return Err(TrainError::Config(format!(
            "model built for {} identities, manifest has {}",
            model.n_ids,
            ids.len()
        )));
    }
    let class_of = |pid: u32| -> usize {
        ids.binary_search(&pid).expect("pid from this manifest")
    };

    let mut adam = AdamState::new(&model.store, AdamHyper::default());
    let active: Vec<ParamId> = match arm {
        TrainArm::Full => model.store.ids(),
        TrainArm::WithoutAttributes => model
            .store
            .ids()
            .into_iter()
            .filter(|id| !model.groups.attribute_streams.contains(id))
            .collect(),
    };

    let n = dataset.manifest.rows.len();
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, 0xB47C + epoch as u64));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            // sequential preparation: augmentation draws stay in batch order
            let mut items = Vec::with_capacity(batch.len());
            for &idx in batch {
                let row = &dataset.manifest.rows[idx];
                let mut image = model.prepare_image(&dataset.images[idx]);
                if rng.random_bool(0.5) {
                    image = flip_augment(&image);
                }
                let record = row.record.restricted_to(&model.table);
                let labels = encode_record(&record, &model.table)?;
                let (dec_input, dec_target) =
                    prepare_decoder_io(&labels, &model.table, model.attn.cfg.max_len)?;
                items.push(PreparedItem {
                    image,
                    image_name: row.image.clone(),
                    class: class_of(row.pid),
                    labels: labels.labels().to_vec(),
                    dec_input,
                    dec_target,
                });
            }
            let results: Vec<ItemResult> = items
                .par_iter()
                .map(|item| forward_backward(model, item, cfg.lambda, arm))
                .collect::<Result<_, _>>()?;

            // fixed-order reduction, then the 1/B batch mean
            model.store.zero_grads();
            for r in &results {
                for (id, g) in &r.grads {
                    model.store.accumulate_grad(*id, g);
                }
            }
            model.store.scale_grads(1.0 / results.len() as f64);
            adam.step(&mut model.store, lr, &active)?;

            let b = results.len() as f64;
            let mean_id = results.iter().map(|r| r.l_id).sum::<f64>() / b;
            let (mean_ctc, mean_at, joint) = match arm {
                TrainArm::Full => {
                    let mc = results.iter().map(|r| r.l_ctc.expect("full arm")).sum::<f64>() / b;
                    let ma = results.iter().map(|r| r.l_at.expect("full arm")).sum::<f64>() / b;
                    (Some(mc), Some(ma), cfg.lambda * mean_id + mc + ma)
                }
                TrainArm::WithoutAttributes => (None, None, mean_id),
            };
            if !joint.is_finite() {
                return Err(TrainError::Config(format!(
                    "non-finite joint loss at step {step}"
                )));
            }
            log.push(LogRow {
                step,
                epoch,
                l_id: mean_id,
                l_ctc: mean_ctc,
                l_at: mean_at,
                joint,
                lr,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome { log, adam })
}

// ── Evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub beam_width: usize,
    pub feature_layer: FeatureLayer,
    pub protocol: Protocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam_width: 3,
            feature_layer: FeatureLayer::Conv,
            protocol: Protocol {
                exclude_same_camera: true,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub attribute: AttributeEvalReport,
    pub reid: ReidSummary,
    /// Fraction of images where greedy CTC decoding and attention decoding
    /// emit the same label sequence (diagnostic).
    pub ctc_attention_agreement: f64,
    /// Mean fraction of attribute groups the decoded sequences resolve.
    pub groups_resolved: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = self.attribute.to_csv();
        out.push_str(&self.reid.to_csv());
        out.push_str(&format!(
            "ctc_attention_agreement,{:.6}\ngroups_resolved,{:.6}\n",
            self.ctc_attention_agreement, self.groups_resolved
        ));
        out
    }
}

/// Decodes every test image with beam search, scores attribute accuracy,
/// and runs the re-ID protocol with the test split as query and gallery.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    cfg: &EvalConfig,
) -> Result<EvalReport, TrainError> {
    struct PerImage {
        prediction: AttributeRecord,
        features: Vec<f64>,
        agree: bool,
        resolved: usize,
    }
    let outputs: Vec<PerImage> = dataset
        .manifest
        .rows
        .par_iter()
        .zip(&dataset.images)
        .map(|(row, img)| -> Result<PerImage, TrainError> {
            let image = model.prepare_image(img);
            let inference = model.infer(&image)?;
            let hyp = model.attn.beam_search(
                &model.store,
                &inference.memory,
                cfg.beam_width,
                model.attn.cfg.max_len,
            )?;
            let prediction = decode_sequence(&hyp.labels, &model.table);
            let greedy = ctc::ctc_greedy_decode(&inference.posterior);
            let features = match cfg.feature_layer {
                FeatureLayer::Conv => inference.conv_features,
                FeatureLayer::Fc0 => inference.fc0_features,
            };
            let _ = row;
            Ok(PerImage {
                resolved: prediction.len(),
                agree: greedy == hyp.labels,
                prediction,
                features,
            })
        })
        .collect::<Result<_, _>>()?;

    let truths: Vec<AttributeRecord> = dataset
        .manifest
        .rows
        .iter()
        .map(|r| r.record.clone())
        .collect();
    let predictions: Vec<AttributeRecord> =
        outputs.iter().map(|o| o.prediction.clone()).collect();
    let attribute = attribute_accuracy(&predictions, &truths, &model.table)?;

    let features: Vec<Vec<f64>> = outputs.iter().map(|o| o.features.clone()).collect();
    let meta: Vec<ItemMeta> = dataset
        .manifest
        .rows
        .iter()
        .map(|r| ItemMeta {
            pid: r.pid,
            camera: r.camera,
        })
        .collect();
    let reid = cmc_map(&features, &meta, &features, &meta, &cfg.protocol)?;

    let n = outputs.len().max(1) as f64;
    let agreement = outputs.iter().filter(|o| o.agree).count() as f64 / n;
    let resolved = outputs.iter().map(|o| o.resolved).sum::<usize>() as f64
        / (n * model.table.group_count() as f64);
    Ok(EvalReport {
        attribute,
        reid,
        ctc_attention_agreement: agreement,
        groups_resolved: resolved,
    })
}

// ── Ablation harness ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    LambdaSweep,
    JointVsSeparate,
    FeatureLayer,
    DropAttribute,
    OrderPermutation,
}

impl AblationKind {
    pub fn parse(s: &str) -> Result<Self, TrainError> {
        match s {
            "lambda_sweep" => Ok(Self::LambdaSweep),
            "joint_vs_separate" => Ok(Self::JointVsSeparate),
            "feature_layer" => Ok(Self::FeatureLayer),
            "drop_attribute" => Ok(Self::DropAttribute),
            "order_permutation" => Ok(Self::OrderPermutation),
            other => Err(TrainError::Config(format!("unknown ablation kind `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::LambdaSweep => "lambda_sweep",
            Self::JointVsSeparate => "joint_vs_separate",
            Self::FeatureLayer => "feature_layer",
            Self::DropAttribute => "drop_attribute",
            Self::OrderPermutation => "order_permutation",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub kind: &'static str,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// Runs a set of training variants with a shared seed and returns one
/// comparison row per variant.
pub fn ablate(
    kind: AblationKind,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    table: &MappingTable,
    train_data: &Dataset,
    test_data: &Dataset,
    stats: &ChannelStats,
) -> Result<ComparisonTable, TrainError> {
    let n_ids = train_data.manifest.identities().len();
    let fit = |table: &MappingTable,
               lambda: f64,
               arm: TrainArm|
     -> Result<(Model, EvalReport), TrainError> {
        let mut model = Model::new(model_cfg, table, n_ids, stats.clone(), train_cfg.seed)?;
        let cfg = TrainConfig {
            lambda,
            ..train_cfg.clone()
        };
        train(&mut model, train_data, &cfg, arm)?;
        let report = evaluate(&model, test_data, eval_cfg)?;
        Ok((model, report))
    };

    match kind {
        AblationKind::LambdaSweep => {
            // lambda is selected on a validation split carved from the last
            // 10% of training identities, not on the test set
            let ids = train_data.manifest.identities();
            let val_count = (ids.len() / 10).max(1);
            let val_ids: Vec<u32> = ids[ids.len() - val_count..].to_vec();
            let split = |keep_val: bool| -> Dataset {
                let mut rows = Vec::new();
                let mut images = Vec::new();
                for (row, img) in train_data.manifest.rows.iter().zip(&train_data.images) {
                    if val_ids.binary_search(&row.pid).is_ok() == keep_val {
                        rows.push(row.clone());
                        images.push(img.clone());
                    }
                }
                Dataset {
                    manifest: crate::data::DatasetManifest {
                        split: if keep_val { Split::Test } else { Split::Train },
                        base_dir: train_data.manifest.base_dir.clone(),
                        rows,
                    },
                    images,
                }
            };
            let fit_train = split(false);
            let validation = split(true);
            let fit_ids = fit_train.manifest.identities().len();
            let mut rows = Vec::new();
            for lambda in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0] {
                let mut model =
                    Model::new(model_cfg, table, fit_ids, stats.clone(), train_cfg.seed)?;
                let cfg = TrainConfig {
                    lambda,
                    ..train_cfg.clone()
                };
                train(&mut model, &fit_train, &cfg, TrainArm::Full)?;
                let report = evaluate(&model, &validation, eval_cfg)?;
                rows.push(vec![
                    format!("{lambda}"),
                    fmt(report.reid.rank1),
                    fmt(report.reid.mean_ap),
                    fmt(report.attribute.mean_accuracy),
                ]);
            }
            Ok(ComparisonTable {
                kind: kind.name(),
                header: vec!["lambda".into(), "rank1".into(), "mAP".into(), "mA".into()],
                rows,
            })
        }
        AblationKind::JointVsSeparate => {
            let mut rows = Vec::new();
            let (_, full) = fit(table, train_cfg.lambda, TrainArm::Full)?;
            rows.push(vec![
                "joint".into(),
                fmt(full.reid.rank1),
                fmt(full.attribute.mean_accuracy),
            ]);
            let (_, attrs_only) = fit(table, 0.0, TrainArm::Full)?;
            rows.push(vec![
                "without_reid".into(),
                String::new(),
                fmt(attrs_only.attribute.mean_accuracy),
            ]);
            let (_, id_only) = fit(table, train_cfg.lambda, TrainArm::WithoutAttributes)?;
            rows.push(vec![
                "without_attributes".into(),
                fmt(id_only.reid.rank1),
                String::new(),
            ]);
            Ok(ComparisonTable {
                kind: kind.name(),
                header: vec!["arm".into(), "rank1".into(), "mA".into()],
                rows,
            })
        }
        AblationKind::FeatureLayer => {
            let (model, _) = fit(table, train_cfg.lambda, TrainArm::Full)?;
            let mut rows = Vec::new();
            for (layer, dim) in [
                (FeatureLayer::Conv, model.encoder.plan.conv_feature_len()),
                (FeatureLayer::Fc0, model.id_head.fc0_dim),
            ] {
                let cfg = EvalConfig {
                    feature_layer: layer,
                    ..eval_cfg.clone()
                };
                let report = evaluate(&model, test_data, &cfg)?;
                rows.push(vec![
                    match layer {
                        FeatureLayer::Conv => "conv".into(),
                        FeatureLayer::Fc0 => "fc0".into(),
                    },
                    dim.to_string(),
                    fmt(report.reid.rank1),
                    fmt(report.reid.mean_ap),
                ]);
            }
            Ok(ComparisonTable {
                kind: kind.name(),
                header: vec!["layer".into(), "dim".into(), "rank1".into(), "mAP".into()],
                rows,
            })
        }
        AblationKind::DropAttribute => {
            let mut rows = Vec::new();
            for group in table.group_names() {
                let reduced = table.without_group(group)?;
                let (_, report) = fit(&reduced, train_cfg.lambda, TrainArm::Full)?;
                rows.push(vec![
                    group.to_string(),
                    fmt(report.reid.rank1),
                    fmt(report.attribute.mean_accuracy),
                ]);
            }
            Ok(ComparisonTable {
                kind: kind.name(),
                header: vec!["dropped".into(), "rank1".into(), "mA".into()],
                rows,
            })
        }
        AblationKind::OrderPermutation => {
            let g = table.group_count();
            let mut orders = vec![(0..g).collect::<Vec<usize>>()];
            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(train_cfg.seed, 0x06D3));
            for _ in 0..2 {
                let mut order: Vec<usize> = (0..g).collect();
                order.shuffle(&mut rng);
                orders.push(order);
            }
            let mut rows = Vec::new();
            for (i, order) in orders.iter().enumerate() {
                let permuted = table.permuted(order)?;
                let (_, report) = fit(&permuted, train_cfg.lambda, TrainArm::Full)?;
                let order_str = order
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                rows.push(vec![
                    i.to_string(),
                    order_str,
                    fmt(report.attribute.mean_accuracy),
                    fmt(report.reid.rank1),
                ]);
            }
            Ok(ComparisonTable {
                kind: kind.name(),
                header: vec!["permutation".into(), "order".into(), "mA".into(), "rank1".into()],
                rows,
            })
        }
    }
}
