//! Cross-cutting invariants of the kernel, checked on randomized inputs.

use numkit::init::{mix_seed, seeded_rng, uniform};
use numkit::{Tape, Tensor};
use proptest::prelude::*;

proptest! {
    /// Softmax lanes are probability vectors: nonnegative, sum 1 within 1e-12.
    #[test]
    fn softmax_rows_are_probability_vectors(rows in 1usize..5, cols in 1usize..7, seed in 0u64..500) {
        let data = uniform(&mut seeded_rng(seed), vec![rows, cols], 50.0);
        let mut tape = Tape::new();
        let v = tape.constant(data);
        let s = tape.softmax(v, 1).unwrap();
        for r in 0..rows {
            let row = tape.value(s).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
    }

    /// Gradient of a sum of losses equals the sum of the individual
    /// gradients (additive accumulation through a shared tensor).
    #[test]
    fn grad_of_sum_equals_sum_of_grads(n in 1usize..6, seed in 0u64..500) {
        let x = uniform(&mut seeded_rng(mix_seed(seed, 1)), vec![n], 1.5);

        let grad_of = |combined: bool| -> Vec<f64> {
            let mut grads = vec![0.0; n];
            if combined {
                let mut tape = Tape::new();
                let a = tape.leaf(x.clone());
                let t = tape.tanh(a).unwrap();
                let l1 = tape.sum(t).unwrap();
                let sq = tape.mul(a, a).unwrap();
                let l2 = tape.mean(sq).unwrap();
                let loss = tape.add(l1, l2).unwrap();
                tape.backward(loss).unwrap();
                grads.copy_from_slice(tape.grad(a).unwrap());
            } else {
                for branch in 0..2 {
                    let mut tape = Tape::new();
                    let a = tape.leaf(x.clone());
                    let loss = if branch == 0 {
                        let t = tape.tanh(a).unwrap();
                        tape.sum(t).unwrap()
                    } else {
                        let sq = tape.mul(a, a).unwrap();
                        tape.mean(sq).unwrap()
                    };
                    tape.backward(loss).unwrap();
                    for (g, c) in grads.iter_mut().zip(tape.grad(a).unwrap()) {
                        *g += c;
                    }
                }
            }
            grads
        };

        let combined = grad_of(true);
        let separate = grad_of(false);
        for (c, s) in combined.iter().zip(&separate) {
            prop_assert!((c - s).abs() < 1e-12, "{c} vs {s}");
        }
    }

    /// Identical inputs produce bit-identical outputs across tape rebuilds.
    #[test]
    fn forward_passes_are_bit_deterministic(seed in 0u64..500) {
        let a = uniform(&mut seeded_rng(mix_seed(seed, 2)), vec![3, 4], 2.0);
        let b = uniform(&mut seeded_rng(mix_seed(seed, 3)), vec![4, 2], 2.0);
        let run = || -> Vec<u64> {
            let mut tape = Tape::new();
            let av = tape.leaf(a.clone());
            let bv = tape.leaf(b.clone());
            let m = tape.matmul(av, bv).unwrap();
            let s = tape.sigmoid(m).unwrap();
            let sm = tape.softmax(s, 1).unwrap();
            tape.value(sm).data().iter().map(|v| v.to_bits()).collect()
        };
        prop_assert_eq!(run(), run());
    }

    /// Reshape/transpose round trips preserve contents exactly.
    #[test]
    fn transpose_is_an_involution(r in 1usize..5, c in 1usize..5, seed in 0u64..200) {
        let x = uniform(&mut seeded_rng(seed), vec![r, c], 3.0);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let t = tape.transpose(v).unwrap();
        let back = tape.transpose(t).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }
}

/// The documented checkpoint container invariants on an arbitrary tensor set.
#[test]
fn checkpoint_preserves_arbitrary_tensor_sets() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.bin");
    let entries: Vec<(String, Tensor)> = (0..7)
        .map(|i| {
            let shape = match i % 3 {
                0 => vec![2, 3],
                1 => vec![4],
                _ => vec![2, 2, 2],
            };
            (
                format!("module{}/tensor{i}", i % 2),
                uniform(&mut seeded_rng(i as u64), shape, 10.0),
            )
        })
        .collect();
    numkit::checkpoint::write_tensors(&path, &entries).unwrap();
    assert_eq!(numkit::checkpoint::read_tensors(&path).unwrap(), entries);
}
