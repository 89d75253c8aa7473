//! The base model: a bottleneck convolutional trunk whose stages stride in
//! height only, a final pool collapsing height to 1, and two bidirectional
//! recurrent layers producing the feature sequence `x`; plus the dense
//! identity head and the per-timestep CTC projection.
//!
//! Shape contract, for any config that validates: the trunk halves the width
//! twice (7x7 stride-2 stem, 3x3 stride-2 pool) and never again, so
//! `T = input_width / 4`; the four stages stride `[2, 1]` at their first
//! convolution; the final `3x1` stride-`[3, 1]` pool (kernel clamped to the
//! remaining height) must collapse height to exactly 1. `D` is twice the
//! second recurrent hidden size (bidirectional concatenation).
//!
//! The identity head reads the flattened convolutional output (not the
//! recurrent output): re-ID features come from the CNN, with the head's
//! first layer output `c` as the low-dimensional alternative.

use numkit::init::{self, mix_seed};
use numkit::{NumError, ParamId, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RnnCell {
    Gru,
    Tanh,
}

impl RnnCell {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "gru" => Ok(Self::Gru),
            "tanh" => Ok(Self::Tanh),
            other => Err(ModelError::Config(format!("unknown rnn_cell `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gru => "gru",
            Self::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Channel divisor: 1 reproduces the full-width trunk, 8 is desk scale.
    pub scale: usize,
    pub blocks_per_stage: [usize; 4],
    /// Per-direction hidden sizes of the two recurrent layers.
    pub rnn_hidden_1: usize,
    pub rnn_hidden_2: usize,
    pub rnn_cell: RnnCell,
}

impl EncoderConfig {
    /// Full-width configuration: 224x112 input, 3+4+6+3 bottleneck blocks,
    /// 2048 trunk channels, recurrent sizes 1024 then 512 per direction.
    pub fn paper_scale() -> Self {
        Self {
            input_h: 224,
            input_w: 112,
            scale: 1,
            blocks_per_stage: [3, 4, 6, 3],
            rnn_hidden_1: 1024,
            rnn_hidden_2: 512,
            rnn_cell: RnnCell::Gru,
        }
    }

    /// Desk-scale default: same stage/stride topology, channels / 16, one
    /// block per stage.
    pub fn desk() -> Self {
        Self {
            input_h: 56,
            input_w: 28,
            scale: 16,
            blocks_per_stage: [1, 1, 1, 1],
            rnn_hidden_1: 48,
            rnn_hidden_2: 32,
            rnn_cell: RnnCell::Gru,
        }
    }

    pub fn stem_channels(&self) -> usize {
        64 / self.scale
    }

    /// Bottleneck inner widths per stage; block outputs are 4x these.
    pub fn stage_widths(&self) -> [usize; 4] {
        [
            64 / self.scale,
            128 / self.scale,
            256 / self.scale,
            512 / self.scale,
        ]
    }

    pub fn validate(&self) -> Result<ShapePlan, ModelError> {
        if self.scale == 0 || 64 % self.scale != 0 {
            return Err(ModelError::Config(format!(
                "scale {} must divide 64",
                self.scale
            )));
        }
        if self.input_w % 4 != 0 || self.input_w < 8 {
            return Err(ModelError::Config(format!(
                "input width {} must be a positive multiple of 4",
                self.input_w
            )));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(ModelError::Config("every stage needs >= 1 block".into()));
        }
        if self.rnn_hidden_1 == 0 || self.rnn_hidden_2 == 0 {
            return Err(ModelError::Config("recurrent hidden sizes must be positive".into()));
        }
        let ceil_half = |v: usize| v.div_ceil(2);
        let mut h = ceil_half(self.input_h); // 7x7 stride-2 stem, pad 3
        let mut heights = vec![h];
        h = ceil_half(h); // 3x3 stride-2 pool, pad 1
        heights.push(h);
        for _ in 0..4 {
            h = ceil_half(h); // stage stride [2, 1] on a padded 3x3
            heights.push(h);
        }
        if h == 0 {
            return Err(ModelError::Config(format!(
                "input height {} collapses before the final pool",
                self.input_h
            )));
        }
        let kernel = h.min(3);
        let pooled = (h - kernel) / 3 + 1;
        if pooled != 1 {
            return Err(ModelError::Config(format!(
                "input height {} leaves height {h} before the final pool; it must collapse to 1",
                self.input_h
            )));
        }
        Ok(ShapePlan {
            t: self.input_w / 4,
            d: 2 * self.rnn_hidden_2,
            conv_channels: 4 * self.stage_widths()[3],
            stage_heights: heights,
            final_pool_kernel: kernel,
        })
    }
}

/// Derived shape facts of a validated config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    /// Output sequence length, always `input_w / 4`.
    pub t: usize,
    /// Feature dimension of `x`, always `2 * rnn_hidden_2`.
    pub d: usize,
    /// Trunk output channels (2048 / scale).
    pub conv_channels: usize,
    /// Heights after stem, pool, and each stage.
    pub stage_heights: Vec<usize>,
    pub final_pool_kernel: usize,
}

impl ShapePlan {
    /// Dimension of the flattened convolutional re-ID feature.
    pub fn conv_feature_len(&self) -> usize {
        self.t * self.conv_channels
    }
}

// ── Layers ──────────────────────────────────────────────────────────────

struct Conv {
    w: ParamId,
    b: ParamId,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        co: usize,
        ci: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self, ModelError> {
        let w = store.register(
            &format!("{name}/w"),
            init::he_uniform(rng, vec![co, ci, kh, kw], ci * kh * kw),
        )?;
        let b = store.register(&format!("{name}/b"), Tensor::zeros(vec![co]))?;
        Ok(Self { w, b, stride, pad })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        Ok(tape.conv2d(x, w, b, self.stride, self.pad)?)
    }
}

struct Bottleneck {
    reduce: Conv,
    spatial: Conv,
    expand: Conv,
    shortcut: Option<Conv>,
}

impl Bottleneck {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_ch: usize,
        width: usize,
        stride: (usize, usize),
    ) -> Result<Self, ModelError> {
        let out_ch = 4 * width;
        let reduce = Conv::new(store, rng, &format!("{name}/c1"), width, in_ch, 1, 1, stride, (0, 0))?;
        let spatial = Conv::new(store, rng, &format!("{name}/c2"), width, width, 3, 3, (1, 1), (1, 1))?;
        let expand = Conv::new(store, rng, &format!("{name}/c3"), out_ch, width, 1, 1, (1, 1), (0, 0))?;
        let shortcut = if in_ch != out_ch || stride != (1, 1) {
            Some(Conv::new(store, rng, &format!("{name}/short"), out_ch, in_ch, 1, 1, stride, (0, 0))?)
        } else {
            None
        };
        Ok(Self {
            reduce,
            spatial,
            expand,
            shortcut,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let y = self.reduce.forward(tape, store, x)?;
        let y = tape.relu(y)?;
        let y = self.spatial.forward(tape, store, y)?;
        let y = tape.relu(y)?;
        let y = self.expand.forward(tape, store, y)?;
        let s = match &self.shortcut {
            Some(conv) => conv.forward(tape, store, x)?,
            None => x,
        };
        let sum = tape.add(y, s)?;
        Ok(tape.relu(sum)?)
    }
}

struct RnnDir {
    w: ParamId,
    u: ParamId,
    b: ParamId,
    hidden: usize,
    cell: RnnCell,
}

impl RnnDir {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        input: usize,
        hidden: usize,
        cell: RnnCell,
    ) -> Result<Self, ModelError> {
        let gates = match cell {
            RnnCell::Gru => 3 * hidden,
            RnnCell::Tanh => hidden,
        };
        let limit = (1.0 / hidden as f64).sqrt();
        let w = store.register(&format!("{name}/w"), init::uniform(rng, vec![input, gates], limit))?;
        let u = store.register(&format!("{name}/u"), init::uniform(rng, vec![hidden, gates], limit))?;
        let b = store.register(&format!("{name}/b"), init::uniform(rng, vec![gates], limit))?;
        Ok(Self {
            w,
            u,
            b,
            hidden,
            cell,
        })
    }

    /// One recurrence step over `[1, in]` input and `[1, hidden]` state.
    fn step(
        &self,
        tape: &mut Tape,
        w: Var,
        u: Var,
        b: Var,
        x: Var,
        h: Var,
    ) -> Result<Var, ModelError> {
        let hid = self.hidden;
        match self.cell {
            RnnCell::Tanh => {
                let xa = tape.matmul(x, w)?;
                let xa = tape.add_bias(xa, b)?;
                let ha = tape.matmul(h, u)?;
                let pre = tape.add(xa, ha)?;
                Ok(tape.tanh(pre)?)
            }
            RnnCell::Gru => {
                let xa = tape.matmul(x, w)?;
                let xa = tape.add_bias(xa, b)?;
                let ha = tape.matmul(h, u)?;
                let xz = tape.slice_cols(xa, 0, hid)?;
                let hz = tape.slice_cols(ha, 0, hid)?;
                let zs = tape.add(xz, hz)?;
                let z = tape.sigmoid(zs)?;
                let xr = tape.slice_cols(xa, hid, hid)?;
                let hr = tape.slice_cols(ha, hid, hid)?;
                let rs = tape.add(xr, hr)?;
                let r = tape.sigmoid(rs)?;
                let xn = tape.slice_cols(xa, 2 * hid, hid)?;
                let hn = tape.slice_cols(ha, 2 * hid, hid)?;
                let gated = tape.mul(r, hn)?;
                let ns = tape.add(xn, gated)?;
                let n = tape.tanh(ns)?;
                // h' = n + z * (h - n)
                let diff = tape.sub(h, n)?;
                let carry = tape.mul(z, diff)?;
                Ok(tape.add(n, carry)?)
            }
        }
    }

    fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: Var,
        reverse: bool,
    ) -> Result<Vec<Var>, ModelError> {
        let t_len = tape.value(seq).dim(0);
        let in_dim = tape.value(seq).dim(1);
        let w = tape.param(store, self.w);
        let u = tape.param(store, self.u);
        let b = tape.param(store, self.b);
        let mut h = tape.constant(Tensor::zeros(vec![1, self.hidden]));
        let mut states = vec![h; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let xt = tape.row(seq, t)?;
            let xt = tape.reshape(xt, vec![1, in_dim])?;
            h = self.step(tape, w, u, b, xt, h)?;
            states[t] = h;
        }
        Ok(states)
    }
}

struct BiRnn {
    fwd: RnnDir,
    bwd: RnnDir,
}

impl BiRnn {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        input: usize,
        hidden: usize,
        cell: RnnCell,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            fwd: RnnDir::new(store, rng, &format!("{name}/fwd"), input, hidden, cell)?,
            bwd: RnnDir::new(store, rng, &format!("{name}/bwd"), input, hidden, cell)?,
        })
    }

    /// `[T, in] -> [T, 2 * hidden]`, forward and backward states concatenated.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Result<Var, ModelError> {
        let f = self.fwd.run(tape, store, seq, false)?;
        let b = self.bwd.run(tape, store, seq, true)?;
        let mut rows = Vec::with_capacity(f.len());
        for (hf, hb) in f.into_iter().zip(b) {
            rows.push(tape.concat_cols(&[hf, hb])?);
        }
        Ok(tape.concat_rows(&rows)?)
    }
}

// ── Encoder ─────────────────────────────────────────────────────────────

/// Both sequences produced by one forward pass: the trunk output feeding the
/// identity stream and re-ID features, and the recurrent output `x` feeding
/// CTC and the attention decoder.
pub struct EncodedSeqs {
    /// `[T, conv_channels]`
    pub conv_seq: Var,
    /// `[T, D]`
    pub x: Var,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    pub plan: ShapePlan,
    stem: Conv,
    stages: Vec<Vec<Bottleneck>>,
    /// Normalization over the pooled trunk sequence (the full-width trunk
    /// is a batch-normalized architecture; at batch size 1 a learned
    /// per-position layer norm stands in).
    seq_norm: (ParamId, ParamId),
    mid_norm: (ParamId, ParamId),
    rnn1: BiRnn,
    rnn2: BiRnn,
}

impl Encoder {
    pub fn new(
        cfg: EncoderConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self, ModelError> {
        let plan = cfg.validate()?;
        let stem = Conv::new(store, rng, "encoder/stem", cfg.stem_channels(), 3, 7, 7, (2, 2), (3, 3))?;
        let mut stages = Vec::new();
        let mut in_ch = cfg.stem_channels();
        for (si, (&width, &blocks)) in cfg
            .stage_widths()
            .iter()
            .zip(&cfg.blocks_per_stage)
            .enumerate()
        {
            let mut stage = Vec::new();
            for bi in 0..blocks {
                let stride = if bi == 0 { (2, 1) } else { (1, 1) };
                stage.push(Bottleneck::new(
                    store,
                    rng,
                    &format!("encoder/s{si}/b{bi}"),
                    in_ch,
                    width,
                    stride,
                )?);
                in_ch = 4 * width;
            }
            stages.push(stage);
        }
        let seq_norm = (
            store.register("encoder/seq_norm/g", Tensor::full(vec![plan.conv_channels], 1.0))?,
            store.register("encoder/seq_norm/b", Tensor::zeros(vec![plan.conv_channels]))?,
        );
        // named under encoder/rnn so it groups with the recurrent stream
        let mid_norm = (
            store.register("encoder/rnn_mid_norm/g", Tensor::full(vec![2 * cfg.rnn_hidden_1], 1.0))?,
            store.register("encoder/rnn_mid_norm/b", Tensor::zeros(vec![2 * cfg.rnn_hidden_1]))?,
        );
        let rnn1 = BiRnn::new(store, rng, "encoder/rnn1", plan.conv_channels, cfg.rnn_hidden_1, cfg.rnn_cell)?;
        let rnn2 = BiRnn::new(store, rng, "encoder/rnn2", 2 * cfg.rnn_hidden_1, cfg.rnn_hidden_2, cfg.rnn_cell)?;
        Ok(Self {
            cfg,
            plan,
            stem,
            stages,
            seq_norm,
            mid_norm,
            rnn1,
            rnn2,
        })
    }

    /// `[H, W, 3]` standardized image -> channel-major `[3, H, W]` input.
    pub fn image_to_input(&self, img: &Tensor) -> Result<Tensor, ModelError> {
        let shape = img.shape();
        if shape != [self.cfg.input_h, self.cfg.input_w, 3] {
            return Err(ModelError::Config(format!(
                "image shape {:?} does not match configured {}x{}x3",
                shape, self.cfg.input_h, self.cfg.input_w
            )));
        }
        let (h, w) = (shape[0], shape[1]);
        let src = img.data();
        let mut data = vec![0.0; 3 * h * w];
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    data[ch * h * w + r * w + c] = src[(r * w + c) * 3 + ch];
                }
            }
        }
        Ok(Tensor::new(vec![3, h, w], data)?)
    }

    /// Convolutional trunk only: `[H, W, 3]` image to the `[T, C5]`
    /// width-indexed feature sequence.
    pub fn forward_trunk(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        img: &Tensor,
    ) -> Result<Var, ModelError> {
        let input = tape.constant(self.image_to_input(img)?);
        let mut y = self.stem.forward(tape, store, input)?;
        y = tape.relu(y)?;
        y = tape.maxpool2d(y, (3, 3), (2, 2), (1, 1))?;
        for stage in &self.stages {
            for block in stage {
                y = block.forward(tape, store, y)?;
            }
        }
        // collapse the remaining height
        let h_left = tape.value(y).dim(1);
        let kernel = h_left.min(3);
        y = tape.maxpool2d(y, (kernel, 1), (3, 1), (0, 0))?;
        // [C5, 1, T] -> [T, C5], normalized per position
        let c5 = tape.value(y).dim(0);
        let t_len = tape.value(y).dim(2);
        debug_assert_eq!(t_len, self.plan.t);
        let flat = tape.reshape(y, vec![c5, t_len])?;
        let seq = tape.transpose(flat)?;
        let g = tape.param(store, self.seq_norm.0);
        let b = tape.param(store, self.seq_norm.1);
        Ok(tape.layer_norm(seq, g, b, 1e-5)?)
    }

    /// Full forward pass from a standardized `[H, W, 3]` image.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        img: &Tensor,
    ) -> Result<EncodedSeqs, ModelError> {
        let conv_seq = self.forward_trunk(tape, store, img)?;
        let h1 = self.rnn1.forward(tape, store, conv_seq)?;
        let g = tape.param(store, self.mid_norm.0);
        let b = tape.param(store, self.mid_norm.1);
        let h1 = tape.layer_norm(h1, g, b, 1e-5)?;
        let x = self.rnn2.forward(tape, store, h1)?;
        Ok(EncodedSeqs { conv_seq, x })
    }
}

// ── Identity head ───────────────────────────────────────────────────────

pub struct IdHead {
    fc0_w: ParamId,
    fc0_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    pub in_dim: usize,
    pub fc0_dim: usize,
    pub n_ids: usize,
}

impl IdHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        in_dim: usize,
        fc0_dim: usize,
        n_ids: usize,
    ) -> Result<Self, ModelError> {
        if n_ids == 0 {
            return Err(ModelError::Config("identity head needs n_ids >= 1".into()));
        }
        let fc0_w = store.register("id/fc0/w", init::glorot_uniform(rng, vec![in_dim, fc0_dim], in_dim, fc0_dim))?;
        let fc0_b = store.register("id/fc0/b", Tensor::zeros(vec![fc0_dim]))?;
        let fc1_w = store.register("id/fc1/w", init::glorot_uniform(rng, vec![fc0_dim, n_ids], fc0_dim, n_ids))?;
        let fc1_b = store.register("id/fc1/b", Tensor::zeros(vec![n_ids]))?;
        Ok(Self {
            fc0_w,
            fc0_b,
            fc1_w,
            fc1_b,
            in_dim,
            fc0_dim,
            n_ids,
        })
    }

    /// The low-dimensional feature `c`: first layer output over the
    /// flattened trunk sequence.
    pub fn features_c(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        conv_seq: Var,
    ) -> Result<Var, ModelError> {
        let numel = tape.value(conv_seq).numel();
        if numel != self.in_dim {
            return Err(ModelError::Config(format!(
                "identity head expects {} flattened features, got {numel}",
                self.in_dim
            )));
        }
        let flat = tape.reshape(conv_seq, vec![1, self.in_dim])?;
        let w0 = tape.param(store, self.fc0_w);
        let b0 = tape.param(store, self.fc0_b);
        let c = tape.matmul(flat, w0)?;
        Ok(tape.add_bias(c, b0)?)
    }

    /// Identity logits `z` of shape `[n_ids]`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        conv_seq: Var,
    ) -> Result<Var, ModelError> {
        let c = self.features_c(tape, store, conv_seq)?;
        let a = tape.relu(c)?;
        let w1 = tape.param(store, self.fc1_w);
        let b1 = tape.param(store, self.fc1_b);
        let z = tape.matmul(a, w1)?;
        let z = tape.add_bias(z, b1)?;
        Ok(tape.reshape(z, vec![self.n_ids])?)
    }
}

/// Identity classification loss: `-log softmax(z)[g]`.
pub fn id_loss(tape: &mut Tape, z: Var, g: usize) -> Result<Var, ModelError> {
    Ok(tape.cross_entropy(z, g)?)
}

// ── CTC projection ──────────────────────────────────────────────────────

pub struct CtcProjection {
    norm: (ParamId, ParamId),
    w: ParamId,
    b: ParamId,
    pub classes: usize,
}

impl CtcProjection {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        d: usize,
        k: usize,
    ) -> Result<Self, ModelError> {
        let classes = k + 1;
        let norm = (
            store.register("ctc/norm/g", Tensor::full(vec![d], 1.0))?,
            store.register("ctc/norm/b", Tensor::zeros(vec![d]))?,
        );
        let w = store.register("ctc/w", init::glorot_uniform(rng, vec![d, classes], d, classes))?;
        let b = store.register("ctc/b", Tensor::zeros(vec![classes]))?;
        Ok(Self { norm, w, b, classes })
    }

    /// Per-timestep logits `[T, K+1]` from the normalized feature sequence;
    /// softmax rows form the posterior matrix.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let g = tape.param(store, self.norm.0);
        let nb = tape.param(store, self.norm.1);
        let x = tape.layer_norm(x, g, nb, 1e-5)?;
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let logits = tape.matmul(x, w)?;
        Ok(tape.add_bias(logits, b)?)
    }
}

/// Which activations to use as the re-identification descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLayer {
    /// Flattened trunk sequence (`T * conv_channels` dimensions).
    Conv,
    /// The identity head's first-layer output `c`.
    Fc0,
}

impl FeatureLayer {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "conv" => Ok(Self::Conv),
            "fc0" => Ok(Self::Fc0),
            other => Err(ModelError::Config(format!("unknown feature layer `{other}`"))),
        }
    }
}

/// Deterministic rng for encoder construction at a given seed.
pub fn encoder_rng(seed: u64) -> ChaCha12Rng {
    init::seeded_rng(mix_seed(seed, 0xE6C0))
}
