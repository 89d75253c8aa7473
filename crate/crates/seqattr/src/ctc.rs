//! Connectionist temporal classification.
//!
//! The marginal probability of a label sequence over all alignments is
//! computed by the standard forward recursion over the blank-extended
//! sequence, entirely in log space. Two routes exist on purpose: a plain-f64
//! recursion over a [`PosteriorMatrix`] for scoring and diagnostics, and a
//! tape-built recursion from raw logits whose gradient comes from autodiff
//! rather than the classical alpha-beta closed form. [`ctc_brute_force`]
//! enumerates every alignment and is the oracle both are checked against.
//!
//! Infeasible instances (T shorter than the minimum alignment length) are
//! explicit errors rather than silent `-inf`, so data-pipeline bugs surface.

use numkit::{NumError, Tape, Tensor, Var};
use thiserror::Error;

use crate::codec::{extend_with_blanks, Label, BLANK};

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("label {0} outside alphabet 1..={1}")]
    LabelOutOfRange(Label, usize),
    #[error("infeasible: sequence needs at least {required} timesteps, posterior has {got}")]
    Infeasible { required: usize, got: usize },
    #[error("posterior row {row} sums to {sum}, expected 1")]
    RowNotNormalized { row: usize, sum: f64 },
    #[error("posterior entry at ({row}, {col}) = {value} outside [0, 1]")]
    EntryOutOfRange { row: usize, col: usize, value: f64 },
    #[error("instance too large for enumeration: (K+1)^T = {paths} exceeds {limit}")]
    TooLarge { paths: f64, limit: f64 },
    #[error("posterior must be rank-2 [T, K+1], got {0:?}")]
    BadShape(Vec<usize>),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Per-timestep label distributions: row `t` is the softmax over
/// `{0 = blank, 1..=K}` at timestep `t`.
#[derive(Debug, Clone)]
pub struct PosteriorMatrix {
    q: Tensor,
}

impl PosteriorMatrix {
    pub fn new(q: Tensor) -> Result<Self, CtcError> {
        if q.rank() != 2 {
            return Err(CtcError::BadShape(q.shape().to_vec()));
        }
        let (t, c) = (q.dim(0), q.dim(1));
        for row in 0..t {
            let mut sum = 0.0;
            for col in 0..c {
                let v = q.row(row)[col];
                if !(-1e-12..=1.0 + 1e-9).contains(&v) {
                    return Err(CtcError::EntryOutOfRange {
                        row,
                        col,
                        value: v,
                    });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CtcError::RowNotNormalized { row, sum });
            }
        }
        Ok(Self { q })
    }

    /// Timestep count T.
    pub fn t(&self) -> usize {
        self.q.dim(0)
    }

    /// Alphabet size K (blank excluded).
    pub fn k(&self) -> usize {
        self.q.dim(1) - 1
    }

    pub fn prob(&self, t: usize, label: Label) -> f64 {
        self.q.row(t)[label as usize]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.q
    }
}

/// The many-to-one CTC collapse B: remove consecutive repeats, then blanks.
pub fn collapse(path: &[Label]) -> Vec<Label> {
    let mut out = Vec::new();
    let mut prev: Option<Label> = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Minimum number of timesteps an alignment for `y` can take: U plus one
/// separating blank per adjacent repeat.
pub fn min_steps(labels: &[Label]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

fn check_labels(labels: &[Label], k: usize) -> Result<(), CtcError> {
    for &l in labels {
        if l == BLANK || l as usize > k {
            return Err(CtcError::LabelOutOfRange(l, k));
        }
    }
    Ok(())
}

/// Whether the forward recursion may skip from `ext[s-2]` to `ext[s]`.
fn skip_allowed(ext: &[Label], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// `ln P(y | x)` by the forward recursion in log space over a posterior
/// matrix. The empty sequence is legal (all-blank paths).
pub fn ctc_log_prob(q: &PosteriorMatrix, labels: &[Label]) -> Result<f64, CtcError> {
    check_labels(labels, q.k())?;
    let required = min_steps(labels);
    if q.t() < required {
        return Err(CtcError::Infeasible {
            required,
            got: q.t(),
        });
    }
    let ext = extend_with_blanks(labels);
    let s_len = ext.len();
    let logq = |t: usize, s: usize| q.prob(t, ext[s]).ln();

    let mut alpha = vec![f64::NEG_INFINITY; s_len];
    alpha[0] = logq(0, 0);
    if s_len > 1 {
        alpha[1] = logq(0, 1);
    }
    let mut next = vec![f64::NEG_INFINITY; s_len];
    for t in 1..q.t() {
        for s in 0..s_len {
            let mut acc = alpha[s];
            if s >= 1 {
                acc = logaddexp(acc, alpha[s - 1]);
            }
            if skip_allowed(&ext, s) {
                acc = logaddexp(acc, alpha[s - 2]);
            }
            next[s] = if acc == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                acc + logq(t, s)
            };
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    let answer = if s_len == 1 {
        alpha[0]
    } else {
        logaddexp(alpha[s_len - 1], alpha[s_len - 2])
    };
    Ok(answer)
}

fn logaddexp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// Differentiable CTC loss `-ln P(y | x)` from per-timestep logits
/// `[T, K+1]`, built on the tape through row softmax and the same forward
/// recursion realized with log-domain tape ops.
pub fn ctc_loss(tape: &mut Tape, logits: Var, labels: &[Label]) -> Result<Var, CtcError> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(CtcError::BadShape(shape));
    }
    let (t_len, k) = (shape[0], shape[1] - 1);
    check_labels(labels, k)?;
    let required = min_steps(labels);
    if t_len < required {
        return Err(CtcError::Infeasible {
            required,
            got: t_len,
        });
    }

    let ext = extend_with_blanks(labels);
    let s_len = ext.len();
    let cols: Vec<usize> = ext.iter().map(|&l| l as usize).collect();

    let logq = tape.log_softmax_rows(logits)?;
    // g[t][s] = log q_t(ext[s])
    let g = tape.gather_cols(logq, &cols)?;

    // transitions that may skip over a blank
    let skip_mask = Tensor::new(
        vec![s_len],
        (0..s_len)
            .map(|s| {
                if skip_allowed(&ext, s) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect(),
    )
    .expect("mask construction");
    let any_skip = (0..s_len).any(|s| skip_allowed(&ext, s));

    // alpha_0: only positions 0 (leading blank) and 1 (first label) start
    let init_mask = Tensor::new(
        vec![s_len],
        (0..s_len)
            .map(|s| if s < 2 { 0.0 } else { f64::NEG_INFINITY })
            .collect(),
    )
    .expect("mask construction");
    let g0 = tape.row(g, 0)?;
    let mut alpha = tape.add_masked(g0, &init_mask)?;

    for t in 1..t_len {
        let stay = alpha;
        let step1 = tape.shift_right(alpha, 1, f64::NEG_INFINITY)?;
        let mut comb = tape.logaddexp(stay, step1)?;
        if any_skip {
            let step2 = tape.shift_right(alpha, 2, f64::NEG_INFINITY)?;
            let step2 = tape.add_masked(step2, &skip_mask)?;
            comb = tape.logaddexp(comb, step2)?;
        }
        let gt = tape.row(g, t)?;
        alpha = tape.add(gt, comb)?;
    }

    let log_prob = if s_len == 1 {
        tape.index(alpha, 0)?
    } else {
        let last = tape.index(alpha, s_len - 1)?;
        let prev = tape.index(alpha, s_len - 2)?;
        tape.logaddexp(last, prev)?
    };
    Ok(tape.scale(log_prob, -1.0)?)
}

/// Reference probability by exhaustive enumeration of all `(K+1)^T`
/// alignments. Guarded to desk scale; not differentiable. Infeasible targets
/// sum over an empty path set and return 0.
pub fn ctc_brute_force(q: &PosteriorMatrix, labels: &[Label]) -> Result<f64, CtcError> {
    check_labels(labels, q.k())?;
    let t = q.t();
    let alphabet = q.k() + 1;
    let paths = (alphabet as f64).powi(t as i32);
    const LIMIT: f64 = 1e7;
    if paths > LIMIT {
        return Err(CtcError::TooLarge {
            paths,
            limit: LIMIT,
        });
    }
    let mut total = 0.0;
    let mut path = vec![0u32; t];
    loop {
        if collapse(&path) == labels {
            let mut p = 1.0;
            for (ti, &l) in path.iter().enumerate() {
                p *= q.prob(ti, l);
            }
            total += p;
        }
        // odometer over the alphabet
        let mut pos = 0;
        loop {
            if pos == t {
                return Ok(total);
            }
            path[pos] += 1;
            if (path[pos] as usize) < alphabet {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Every distinct collapsed output reachable from some alignment of `q`,
/// including the empty sequence.
pub fn enumerate_collapsed_outputs(q: &PosteriorMatrix) -> Result<Vec<Vec<Label>>, CtcError> {
    let t = q.t();
    let alphabet = q.k() + 1;
    let paths = (alphabet as f64).powi(t as i32);
    const LIMIT: f64 = 1e7;
    if paths > LIMIT {
        return Err(CtcError::TooLarge {
            paths,
            limit: LIMIT,
        });
    }
    let mut outputs: Vec<Vec<Label>> = Vec::new();
    let mut path = vec![0u32; t];
    loop {
        let c = collapse(&path);
        if !outputs.contains(&c) {
            outputs.push(c);
        }
        let mut pos = 0;
        loop {
            if pos == t {
                outputs.sort();
                return Ok(outputs);
            }
            path[pos] += 1;
            if (path[pos] as usize) < alphabet {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Best-label-per-timestep diagnostic decode: argmax each row (ties to the
/// smaller index), then collapse.
pub fn ctc_greedy_decode(q: &PosteriorMatrix) -> Vec<Label> {
    let mut path = Vec::with_capacity(q.t());
    for t in 0..q.t() {
        let row = q.tensor().row(t);
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        path.push(best as Label);
    }
    collapse(&path)
}
