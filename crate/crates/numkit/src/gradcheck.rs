//! Central finite-difference verification of tape gradients.
//!
//! The numeric side re-evaluates the caller's forward closure from scratch,
//! so it shares nothing with the backward implementation it checks. Kept in
//! the library (not `cfg(test)`) because downstream crates verify their own
//! losses with the same harness.

use crate::error::{NumError, Result};
use crate::init;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-6,
            rtol: 1e-5,
            atol: 1e-7,
        }
    }
}

impl Tolerance {
    pub fn with_rtol(rtol: f64) -> Self {
        Self {
            rtol,
            ..Self::default()
        }
    }
}

/// Central differences of a scalar function, one element at a time.
pub fn central_diff<F>(f: &mut F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?;
        probe[i] = x[i] - step;
        let down = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

pub fn compare(analytic: &[f64], numeric: &[f64], tol: &Tolerance, what: &str) -> Result<()> {
    if analytic.len() != numeric.len() {
        return Err(NumError::Contract(format!(
            "{what}: gradient length mismatch {} vs {}",
            analytic.len(),
            numeric.len()
        )));
    }
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let diff = (a - n).abs();
        let bound = tol.atol + tol.rtol * a.abs().max(n.abs());
        if !(diff <= bound) {
            return Err(NumError::Contract(format!(
                "{what}: gradient mismatch at element {i}: analytic {a:.12e}, numeric {n:.12e}, |diff| {diff:.3e} > {bound:.3e}"
            )));
        }
    }
    Ok(())
}

/// Checks d loss / d inputs[k] for every input of a tape-built scalar
/// function against central differences.
///
/// `build` receives leaves in the order of `inputs` and must return a scalar.
pub fn check_op<F>(what: &str, inputs: &[Tensor], tol: &Tolerance, build: F) -> Result<()>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(NumError::Contract(format!("{what}: build must return a scalar")));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();

    // numeric pass, one input at a time
    for (k, input) in inputs.iter().enumerate() {
        let mut f = |x: &[f64]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    if j == k {
                        tape.leaf(Tensor::new(t.shape().to_vec(), x.to_vec()).expect("probe shape"))
                    } else {
                        tape.leaf(t.clone())
                    }
                })
                .collect();
            let loss = build(&mut tape, &vars)?;
            tape.value(loss).item()
        };
        let numeric = central_diff(&mut f, input.data(), tol.step)?;
        compare(&analytic[k], &numeric, tol, &format!("{what}[input {k}]"))?;
    }
    Ok(())
}

/// Reduces any tensor to a scalar through a fixed pseudo-random weighting so
/// every output element contributes a distinct gradient path.
pub fn scalarize(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let n = tape.value(v).numel();
    let flat = tape.reshape(v, vec![n])?;
    let w = init::uniform(&mut init::seeded_rng(init::mix_seed(seed, 0xC0FE)), vec![n], 1.0);
    let wv = tape.constant(w);
    let prod = tape.mul(flat, wv)?;
    tape.sum(prod)
}

fn rand_tensor(seed: u64, shape: Vec<usize>) -> Tensor {
    init::uniform(&mut init::seeded_rng(seed), shape, 2.0)
}

/// Random values in [-2, 2] kept away from zero (for kinked ops like relu).
fn rand_tensor_off_kink(seed: u64, shape: Vec<usize>) -> Tensor {
    let t = rand_tensor(seed, shape.clone());
    let data: Vec<f64> = t
        .data()
        .iter()
        .map(|&x| if x.abs() < 1e-2 { x + 0.05 } else { x })
        .collect();
    Tensor::new(shape, data).expect("finite")
}

/// Finite-difference checks for every differentiable tape operation, on
/// randomized inputs in [-2, 2]. Returns the list of checked op names.
pub fn run_core_op_suite(seed: u64) -> Result<Vec<String>> {
    let tol = Tolerance::default();
    let mut checked: Vec<String> = Vec::new();
    let s = |k: u64| init::mix_seed(seed, k);

    check_op(
        "matmul",
        &[rand_tensor(s(1), vec![3, 4]), rand_tensor(s(2), vec![4, 2])],
        &Tolerance::with_rtol(1e-6),
        |t, v| {
            let m = t.matmul(v[0], v[1])?;
            scalarize(t, m, 11)
        },
    )?;
    checked.push("matmul".into());

    check_op(
        "add",
        &[rand_tensor(s(3), vec![2, 3]), rand_tensor(s(4), vec![2, 3])],
        &tol,
        |t, v| {
            let m = t.add(v[0], v[1])?;
            scalarize(t, m, 12)
        },
    )?;
    checked.push("add".into());

    check_op(
        "sub",
        &[rand_tensor(s(5), vec![5]), rand_tensor(s(6), vec![5])],
        &tol,
        |t, v| {
            let m = t.sub(v[0], v[1])?;
            scalarize(t, m, 13)
        },
    )?;
    checked.push("sub".into());

    check_op(
        "mul",
        &[rand_tensor(s(7), vec![2, 4]), rand_tensor(s(8), vec![2, 4])],
        &tol,
        |t, v| {
            let m = t.mul(v[0], v[1])?;
            scalarize(t, m, 14)
        },
    )?;
    checked.push("mul".into());

    check_op(
        "add_bias",
        &[rand_tensor(s(9), vec![3, 4]), rand_tensor(s(10), vec![4])],
        &tol,
        |t, v| {
            let m = t.add_bias(v[0], v[1])?;
            scalarize(t, m, 15)
        },
    )?;
    checked.push("add_bias".into());

    check_op("scale", &[rand_tensor(s(11), vec![6])], &tol, |t, v| {
        let m = t.scale(v[0], -1.7)?;
        scalarize(t, m, 16)
    })?;
    checked.push("scale".into());

    check_op("tanh", &[rand_tensor(s(12), vec![7])], &tol, |t, v| {
        let m = t.tanh(v[0])?;
        scalarize(t, m, 17)
    })?;
    checked.push("tanh".into());

    check_op("sigmoid", &[rand_tensor(s(13), vec![7])], &tol, |t, v| {
        let m = t.sigmoid(v[0])?;
        scalarize(t, m, 18)
    })?;
    checked.push("sigmoid".into());

    check_op(
        "relu",
        &[rand_tensor_off_kink(s(14), vec![7])],
        &tol,
        |t, v| {
            let m = t.relu(v[0])?;
            scalarize(t, m, 19)
        },
    )?;
    checked.push("relu".into());

    check_op("sum", &[rand_tensor(s(15), vec![3, 2])], &tol, |t, v| {
        t.sum(v[0])
    })?;
    checked.push("sum".into());

    check_op("mean", &[rand_tensor(s(16), vec![3, 3])], &tol, |t, v| {
        t.mean(v[0])
    })?;
    checked.push("mean".into());

    check_op(
        "mean_of",
        &[rand_tensor(s(17), vec![1]), rand_tensor(s(18), vec![1])],
        &tol,
        |t, v| t.mean_of(v),
    )?;
    checked.push("mean_of".into());

    for axis in [0usize, 1] {
        check_op(
            &format!("softmax(axis={axis})"),
            &[rand_tensor(s(19 + axis as u64), vec![3, 4])],
            &tol,
            |t, v| {
                let m = t.softmax(v[0], axis)?;
                scalarize(t, m, 20 + axis as u64)
            },
        )?;
        checked.push(format!("softmax(axis={axis})"));
    }

    check_op(
        "log_softmax_rows",
        &[rand_tensor(s(21), vec![3, 5])],
        &tol,
        |t, v| {
            let m = t.log_softmax_rows(v[0])?;
            scalarize(t, m, 22)
        },
    )?;
    checked.push("log_softmax_rows".into());

    check_op(
        "cross_entropy",
        &[rand_tensor(s(22), vec![6])],
        &tol,
        |t, v| t.cross_entropy(v[0], 2),
    )?;
    checked.push("cross_entropy".into());

    check_op(
        "layer_norm",
        &[
            rand_tensor(s(23), vec![3, 6]),
            rand_tensor(s(24), vec![6]),
            rand_tensor(s(25), vec![6]),
        ],
        &tol,
        |t, v| {
            let m = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            scalarize(t, m, 23)
        },
    )?;
    checked.push("layer_norm".into());

    check_op("reshape", &[rand_tensor(s(26), vec![2, 6])], &tol, |t, v| {
        let m = t.reshape(v[0], vec![3, 4])?;
        let m = t.tanh(m)?;
        scalarize(t, m, 24)
    })?;
    checked.push("reshape".into());

    check_op(
        "transpose",
        &[rand_tensor(s(27), vec![3, 4])],
        &tol,
        |t, v| {
            let m = t.transpose(v[0])?;
            scalarize(t, m, 25)
        },
    )?;
    checked.push("transpose".into());

    check_op("row", &[rand_tensor(s(28), vec![4, 3])], &tol, |t, v| {
        let m = t.row(v[0], 2)?;
        scalarize(t, m, 26)
    })?;
    checked.push("row".into());

    check_op("index", &[rand_tensor(s(29), vec![7])], &tol, |t, v| {
        t.index(v[0], 3)
    })?;
    checked.push("index".into());

    check_op(
        "slice_cols",
        &[rand_tensor(s(30), vec![3, 6])],
        &tol,
        |t, v| {
            let m = t.slice_cols(v[0], 1, 3)?;
            scalarize(t, m, 27)
        },
    )?;
    checked.push("slice_cols".into());

    check_op(
        "gather_cols",
        &[rand_tensor(s(31), vec![3, 4])],
        &tol,
        |t, v| {
            // repeated columns exercise the scatter-add
            let m = t.gather_cols(v[0], &[0, 2, 0, 3])?;
            scalarize(t, m, 28)
        },
    )?;
    checked.push("gather_cols".into());

    check_op(
        "concat_rows",
        &[rand_tensor(s(32), vec![2, 3]), rand_tensor(s(33), vec![3])],
        &tol,
        |t, v| {
            let m = t.concat_rows(v)?;
            scalarize(t, m, 29)
        },
    )?;
    checked.push("concat_rows".into());

    check_op(
        "concat_cols",
        &[rand_tensor(s(34), vec![2, 3]), rand_tensor(s(35), vec![2, 2])],
        &tol,
        |t, v| {
            let m = t.concat_cols(v)?;
            scalarize(t, m, 30)
        },
    )?;
    checked.push("concat_cols".into());

    check_op(
        "shift_right",
        &[rand_tensor(s(36), vec![6])],
        &tol,
        |t, v| {
            // -inf fill lanes are made finite again before reduction
            let sh = t.shift_right(v[0], 2, f64::NEG_INFINITY)?;
            let zero = t.constant(Tensor::zeros(vec![6]));
            let m = t.logaddexp(sh, zero)?;
            scalarize(t, m, 31)
        },
    )?;
    checked.push("shift_right".into());

    check_op(
        "logaddexp",
        &[rand_tensor(s(37), vec![5]), rand_tensor(s(38), vec![5])],
        &tol,
        |t, v| {
            let m = t.logaddexp(v[0], v[1])?;
            scalarize(t, m, 32)
        },
    )?;
    checked.push("logaddexp".into());

    check_op(
        "add_masked",
        &[rand_tensor(s(39), vec![6])],
        &tol,
        |t, v| {
            let mask = Tensor::new(
                vec![6],
                vec![0.0, f64::NEG_INFINITY, 0.5, 0.0, f64::NEG_INFINITY, -0.25],
            )
            .expect("mask");
            let m = t.add_masked(v[0], &mask)?;
            let zero = t.constant(Tensor::zeros(vec![6]));
            let m = t.logaddexp(m, zero)?;
            scalarize(t, m, 33)
        },
    )?;
    checked.push("add_masked".into());

    check_op("embed", &[rand_tensor(s(40), vec![5, 3])], &tol, |t, v| {
        let m = t.embed(v[0], &[1, 4, 1, 0])?;
        scalarize(t, m, 34)
    })?;
    checked.push("embed".into());

    check_op(
        "conv2d",
        &[
            rand_tensor(s(41), vec![2, 5, 4]),
            rand_tensor(s(42), vec![3, 2, 3, 3]),
            rand_tensor(s(43), vec![3]),
        ],
        &tol,
        |t, v| {
            let m = t.conv2d(v[0], v[1], v[2], (2, 1), (1, 1))?;
            scalarize(t, m, 35)
        },
    )?;
    checked.push("conv2d".into());

    check_op(
        "conv2d(1x1)",
        &[
            rand_tensor(s(50), vec![3, 4, 5]),
            rand_tensor(s(51), vec![2, 3, 1, 1]),
            rand_tensor(s(52), vec![2]),
        ],
        &tol,
        |t, v| {
            let m = t.conv2d(v[0], v[1], v[2], (2, 1), (0, 0))?;
            scalarize(t, m, 37)
        },
    )?;
    checked.push("conv2d(1x1)".into());

    check_op(
        "maxpool2d",
        &[rand_tensor(s(44), vec![2, 4, 4])],
        &tol,
        |t, v| {
            let m = t.maxpool2d(v[0], (2, 2), (2, 2), (0, 0))?;
            scalarize(t, m, 36)
        },
    )?;
    checked.push("maxpool2d".into());

    // two-layer composite: full chain through matmul/bias/tanh/softmax/CE
    check_op(
        "two_layer_network",
        &[
            rand_tensor(s(45), vec![1, 5]),
            rand_tensor(s(46), vec![5, 4]),
            rand_tensor(s(47), vec![4]),
            rand_tensor(s(48), vec![4, 3]),
            rand_tensor(s(49), vec![3]),
        ],
        &tol,
        |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_bias(h, v[2])?;
            let h = t.tanh(h)?;
            let z = t.matmul(h, v[3])?;
            let z = t.add_bias(z, v[4])?;
            let z = t.reshape(z, vec![3])?;
            t.cross_entropy(z, 1)
        },
    )?;
    checked.push("two_layer_network".into());

    Ok(checked)
}
