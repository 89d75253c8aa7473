//! Attention decoder: a transformer encoder-decoder aligning the encoded
//! image sequence with the attribute label sequence.
//!
//! The encoder stack consumes the base model's feature sequence directly
//! (continuous inputs need no embedding; an affine adapter maps `D` to
//! `d_model` only when they differ). The decoder stack is trained with
//! teacher forcing on the shift-right input and queried with length-bounded
//! beam search. Vocabulary is `K + 2`: labels `1..=K`, pad/EOS `0`, and the
//! start marker, whose logit is masked to `-inf` since it is never a valid
//! output. Pad positions are real training targets, which is how the model
//! learns to stop. Sublayers are post-norm residuals; positions enter
//! through sinusoidal encodings on both stacks. Inference recomputes the
//! decoder for every emitted token; at desk scale this costs little and an
//! incremental cache would only obscure the arithmetic.

use std::cmp::Ordering;

use numkit::init;
use numkit::{ParamId, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha12Rng;

use crate::codec::Label;
use crate::encoder::ModelError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub beam_width: usize,
}

impl TransformerConfig {
    /// Published scale: 6 layers, 8 heads, d_model 1024, max length 28.
    pub fn paper_scale() -> Self {
        Self {
            layers: 6,
            heads: 8,
            d_model: 1024,
            ffn_dim: 4096,
            max_len: 28,
            beam_width: 3,
        }
    }

    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 64,
            ffn_dim: 96,
            max_len: 7,
            beam_width: 3,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 || self.max_len < 2 || self.beam_width == 0 {
            return Err(ModelError::Config(
                "layers, ffn_dim, beam_width must be positive and max_len >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// `softmax(Q Kᵀ / sqrt(d_k) + mask) V`; masked scores receive `-inf`
/// before the softmax, so attention rows stay stochastic.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor>,
) -> Result<Var, ModelError> {
    let dk = tape.value(q).dim(1);
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let scores = match mask {
        Some(m) => tape.add_masked(scores, m)?,
        None => scores,
    };
    let weights = tape.softmax(scores, 1)?;
    Ok(tape.matmul(weights, v)?)
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        input: usize,
        output: usize,
    ) -> Result<Self, ModelError> {
        let w = store.register(
            &format!("{name}/w"),
            init::glorot_uniform(rng, vec![input, output], input, output),
        )?;
        let b = store.register(&format!("{name}/b"), Tensor::zeros(vec![output]))?;
        Ok(Self { w, b })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    }
}

struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, ModelError> {
        let gain = store.register(&format!("{name}/g"), Tensor::full(vec![dim], 1.0))?;
        let bias = store.register(&format!("{name}/b"), Tensor::zeros(vec![dim]))?;
        Ok(Self { gain, bias })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        Ok(tape.layer_norm(x, g, b, 1e-5)?)
    }
}

struct MultiHead {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    dk: usize,
}

impl MultiHead {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            wq: Linear::new(store, rng, &format!("{name}/q"), d_model, d_model)?,
            wk: Linear::new(store, rng, &format!("{name}/k"), d_model, d_model)?,
            wv: Linear::new(store, rng, &format!("{name}/v"), d_model, d_model)?,
            wo: Linear::new(store, rng, &format!("{name}/o"), d_model, d_model)?,
            heads,
            dk: d_model / heads,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_q: Var,
        x_kv: Var,
        mask: Option<&Tensor>,
    ) -> Result<Var, ModelError> {
        let q = self.wq.forward(tape, store, x_q)?;
        let k = self.wk.forward(tape, store, x_kv)?;
        let v = self.wv.forward(tape, store, x_kv)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * self.dk, self.dk)?;
            let kh = tape.slice_cols(k, h * self.dk, self.dk)?;
            let vh = tape.slice_cols(v, h * self.dk, self.dk)?;
            heads.push(scaled_dot_attention(tape, qh, kh, vh, mask)?);
        }
        let cat = tape.concat_cols(&heads)?;
        self.wo.forward(tape, store, cat)
    }
}

struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_model: usize,
        ffn_dim: usize,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            inner: Linear::new(store, rng, &format!("{name}/in"), d_model, ffn_dim)?,
            outer: Linear::new(store, rng, &format!("{name}/out"), ffn_dim, d_model)?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.outer.forward(tape, store, h)
    }
}

struct EncoderLayer {
    attn: MultiHead,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

impl EncoderLayer {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, ModelError> {
        let a = self.attn.forward(tape, store, x, x, None)?;
        let x = {
            let s = tape.add(x, a)?;
            self.ln1.forward(tape, store, s)?
        };
        let f = self.ffn.forward(tape, store, x)?;
        let s = tape.add(x, f)?;
        self.ln2.forward(tape, store, s)
    }
}

struct DecoderLayer {
    self_attn: MultiHead,
    ln1: LayerNorm,
    cross_attn: MultiHead,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

impl DecoderLayer {
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Var,
        causal: &Tensor,
    ) -> Result<Var, ModelError> {
        let a = self.self_attn.forward(tape, store, x, x, Some(causal))?;
        let x = {
            let s = tape.add(x, a)?;
            self.ln1.forward(tape, store, s)?
        };
        let c = self.cross_attn.forward(tape, store, x, memory, None)?;
        let x = {
            let s = tape.add(x, c)?;
            self.ln2.forward(tape, store, s)?
        };
        let f = self.ffn.forward(tape, store, x)?;
        let s = tape.add(x, f)?;
        self.ln3.forward(tape, store, s)
    }
}

/// Sinusoidal position table `[len, d_model]`.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in 0..d_model {
            let exponent = 2.0 * (i / 2) as f64 / d_model as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d_model], data).expect("positional table")
}

fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(vec![len, len], data).expect("causal mask")
}

/// A (partial or finished) beam hypothesis: emitted labels, accumulated
/// log probability, and whether EOS was produced or the length bound hit.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub labels: Vec<Label>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Higher log-probability first; ties prefer the shorter sequence, then the
/// lexicographically smaller one.
fn better(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .expect("finite log probabilities")
        .then(a.labels.len().cmp(&b.labels.len()))
        .then(a.labels.cmp(&b.labels))
}

pub struct AttnDecoder {
    pub cfg: TransformerConfig,
    /// Attribute label count; vocabulary is `k + 2`.
    pub k: usize,
    pub start_symbol: Label,
    d_in: usize,
    adapter: Option<Linear>,
    embedding: ParamId,
    enc_layers: Vec<EncoderLayer>,
    dec_layers: Vec<DecoderLayer>,
    output: Linear,
}

impl AttnDecoder {
    pub fn new(
        cfg: TransformerConfig,
        d_in: usize,
        k: usize,
        start_symbol: Label,
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let vocab = k + 2;
        let adapter = if d_in == cfg.d_model {
            None
        } else {
            Some(Linear::new(store, rng, "attn/adapter", d_in, cfg.d_model)?)
        };
        let embedding = store.register(
            "attn/embedding",
            init::uniform(rng, vec![vocab, cfg.d_model], (3.0 / cfg.d_model as f64).sqrt()),
        )?;
        let mut enc_layers = Vec::with_capacity(cfg.layers);
        let mut dec_layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            enc_layers.push(EncoderLayer {
                attn: MultiHead::new(store, rng, &format!("attn/enc{l}/mha"), cfg.d_model, cfg.heads)?,
                ln1: LayerNorm::new(store, &format!("attn/enc{l}/ln1"), cfg.d_model)?,
                ffn: FeedForward::new(store, rng, &format!("attn/enc{l}/ffn"), cfg.d_model, cfg.ffn_dim)?,
                ln2: LayerNorm::new(store, &format!("attn/enc{l}/ln2"), cfg.d_model)?,
            });
            dec_layers.push(DecoderLayer {
                self_attn: MultiHead::new(store, rng, &format!("attn/dec{l}/self"), cfg.d_model, cfg.heads)?,
                ln1: LayerNorm::new(store, &format!("attn/dec{l}/ln1"), cfg.d_model)?,
                cross_attn: MultiHead::new(store, rng, &format!("attn/dec{l}/cross"), cfg.d_model, cfg.heads)?,
                ln2: LayerNorm::new(store, &format!("attn/dec{l}/ln2"), cfg.d_model)?,
                ffn: FeedForward::new(store, rng, &format!("attn/dec{l}/ffn"), cfg.d_model, cfg.ffn_dim)?,
                ln3: LayerNorm::new(store, &format!("attn/dec{l}/ln3"), cfg.d_model)?,
            });
        }
        let output = Linear::new(store, rng, "attn/out", cfg.d_model, vocab)?;
        Ok(Self {
            cfg,
            k,
            start_symbol,
            d_in,
            adapter,
            embedding,
            enc_layers,
            dec_layers,
            output,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.k + 2
    }

    /// Logit/embedding row of the start marker.
    pub fn start_class(&self) -> usize {
        self.k + 1
    }

    fn class_of_token(&self, token: Label) -> Result<usize, ModelError> {
        if token == self.start_symbol {
            Ok(self.start_class())
        } else if (token as usize) <= self.k {
            Ok(token as usize)
        } else {
            Err(ModelError::Config(format!(
                "token {token} outside decoder vocabulary (K = {})",
                self.k
            )))
        }
    }

    /// Runs the encoder stack over the base model output `x` (`[T, D]`).
    pub fn encode_memory(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var, ModelError> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.d_in {
            return Err(ModelError::Config(format!(
                "memory input shape {shape:?}, expected [T, {}]",
                self.d_in
            )));
        }
        let mut h = match &self.adapter {
            Some(a) => a.forward(tape, store, x)?,
            None => x,
        };
        let pe = tape.constant(positional_encoding(shape[0], self.cfg.d_model));
        h = tape.add(h, pe)?;
        for layer in &self.enc_layers {
            h = layer.forward(tape, store, h)?;
        }
        Ok(h)
    }

    /// Teacher-forced decoder pass over a shift-right token sequence;
    /// returns `[len, vocab]` logits with the start class masked out.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        memory: Var,
        tokens: &[Label],
    ) -> Result<Var, ModelError> {
        if tokens.is_empty() || tokens.len() > self.cfg.max_len {
            return Err(ModelError::Config(format!(
                "decoder input length {} outside 1..={}",
                tokens.len(),
                self.cfg.max_len
            )));
        }
        let classes: Vec<usize> = tokens
            .iter()
            .map(|&t| self.class_of_token(t))
            .collect::<Result<_, _>>()?;
        let len = tokens.len();
        let table = tape.param(store, self.embedding);
        let mut h = tape.embed(table, &classes)?;
        h = tape.scale(h, (self.cfg.d_model as f64).sqrt())?;
        let pe = tape.constant(positional_encoding(len, self.cfg.d_model));
        h = tape.add(h, pe)?;
        let causal = causal_mask(len);
        for layer in &self.dec_layers {
            h = layer.forward(tape, store, h, memory, &causal)?;
        }
        let logits = self.output.forward(tape, store, h)?;
        // the start marker is never a valid output class
        let mut mask = vec![0.0; len * self.vocab_size()];
        for row in 0..len {
            mask[row * self.vocab_size() + self.start_class()] = f64::NEG_INFINITY;
        }
        let mask = Tensor::new(vec![len, self.vocab_size()], mask).expect("output mask");
        Ok(tape.add_masked(logits, &mask)?)
    }

    /// Mean cross-entropy over all positions, pad positions included as
    /// class 0 so the model learns to emit EOS.
    pub fn attribute_loss(
        &self,
        tape: &mut Tape,
        logits: Var,
        target: &[Label],
    ) -> Result<Var, ModelError> {
        let shape = tape.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != target.len() || shape[1] != self.vocab_size() {
            return Err(ModelError::Config(format!(
                "attribute loss: logits {shape:?} vs {} targets",
                target.len()
            )));
        }
        let mut position_losses = Vec::with_capacity(target.len());
        for (pos, &t) in target.iter().enumerate() {
            if t as usize > self.k {
                return Err(ModelError::Config(format!(
                    "target label {t} outside 0..={}",
                    self.k
                )));
            }
            let row = tape.row(logits, pos)?;
            position_losses.push(tape.cross_entropy(row, t as usize)?);
        }
        Ok(tape.mean_of(&position_losses)?)
    }

    /// Length-bounded beam search from the start marker. Hypotheses finish
    /// on EOS(0) or at the length bound; the best finished hypothesis wins
    /// by log probability (ties: shorter, then lexicographically smaller).
    /// Width 1 is exactly greedy decoding.
    pub fn beam_search(
        &self,
        store: &ParamStore,
        memory: &Tensor,
        width: usize,
        max_len: usize,
    ) -> Result<BeamHypothesis, ModelError> {
        if width == 0 {
            return Err(ModelError::Config("beam width must be >= 1".into()));
        }
        let max_len = max_len.min(self.cfg.max_len);
        struct Partial {
            tokens: Vec<Label>,
            log_prob: f64,
        }
        let mut live = vec![Partial {
            tokens: vec![self.start_symbol],
            log_prob: 0.0,
        }];
        let mut finished: Vec<BeamHypothesis> = Vec::new();
        while !live.is_empty() {
            let mut candidates: Vec<Partial> = Vec::new();
            for hyp in &live {
                let mut tape = Tape::inference();
                let mem = tape.constant(memory.clone());
                let logits = self.decode_teacher_forced(&mut tape, store, mem, &hyp.tokens)?;
                let last = tape.value(logits).row(hyp.tokens.len() - 1);
                let log_probs = log_softmax_slice(last);
                for class in 0..=self.k {
                    candidates.push(Partial {
                        tokens: {
                            let mut t = hyp.tokens.clone();
                            t.push(class as Label);
                            t
                        },
                        log_prob: hyp.log_prob + log_probs[class],
                    });
                }
            }
            candidates.sort_by(|a, b| {
                b.log_prob
                    .partial_cmp(&a.log_prob)
                    .expect("finite scores")
                    .then(a.tokens.len().cmp(&b.tokens.len()))
                    .then(a.tokens.cmp(&b.tokens))
            });
            live = Vec::new();
            for cand in candidates {
                if live.len() >= width {
                    break;
                }
                let emitted = *cand.tokens.last().expect("nonempty");
                if emitted == 0 {
                    finished.push(BeamHypothesis {
                        labels: cand.tokens[1..cand.tokens.len() - 1].to_vec(),
                        log_prob: cand.log_prob,
                        finished: true,
                    });
                } else if cand.tokens.len() == max_len {
                    finished.push(BeamHypothesis {
                        labels: cand.tokens[1..].to_vec(),
                        log_prob: cand.log_prob,
                        finished: true,
                    });
                } else {
                    live.push(cand);
                }
            }
        }
        finished.sort_by(better);
        finished
            .into_iter()
            .next()
            .ok_or_else(|| ModelError::Config("beam search produced no hypothesis".into()))
    }
}

fn log_softmax_slice(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}
