//! Joint training objective: `L = lambda * L_id + L_ctc + L_at`.
//!
//! Per-batch losses are means over the batch items before composition, so
//! the meaning of lambda does not depend on batch size.

use numkit::{NumError, Tape, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("non-finite {stream} loss ({value}) entering the joint objective")]
    NonFinite { stream: &'static str, value: f64 },
    #[error("lambda must be nonnegative, got {0}")]
    NegativeLambda(f64),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Debug, Clone, Copy)]
pub struct JointLossConfig {
    /// Weight on the identity loss (paper-validated default 4).
    pub lambda: f64,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        Self { lambda: 4.0 }
    }
}

impl JointLossConfig {
    pub fn new(lambda: f64) -> Result<Self, ObjectiveError> {
        if lambda < 0.0 {
            return Err(ObjectiveError::NegativeLambda(lambda));
        }
        Ok(Self { lambda })
    }
}

/// `lambda * l_id + l_ctc + l_at` on the tape; exactly linear in each
/// component, so the gradient distributes to the three streams untouched.
pub fn joint_loss(
    tape: &mut Tape,
    l_id: Var,
    l_ctc: Var,
    l_at: Var,
    cfg: &JointLossConfig,
) -> Result<Var, ObjectiveError> {
    for (stream, v) in [("id", l_id), ("ctc", l_ctc), ("at", l_at)] {
        let value = tape.value(v).item()?;
        if !value.is_finite() {
            return Err(ObjectiveError::NonFinite { stream, value });
        }
    }
    let weighted = tape.scale(l_id, cfg.lambda)?;
    let partial = tape.add(weighted, l_ctc)?;
    Ok(tape.add(partial, l_at)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use numkit::Tensor;

    fn scalars(tape: &mut Tape, values: [f64; 3]) -> (Var, Var, Var) {
        (
            tape.leaf(Tensor::scalar(values[0])),
            tape.leaf(Tensor::scalar(values[1])),
            tape.leaf(Tensor::scalar(values[2])),
        )
    }

    #[test]
    fn arithmetic_example() {
        let mut tape = Tape::new();
        let (a, b, c) = scalars(&mut tape, [1.0, 2.0, 3.0]);
        let j = joint_loss(&mut tape, a, b, c, &JointLossConfig { lambda: 4.0 }).unwrap();
        assert_eq!(tape.value(j).item().unwrap(), 9.0);
    }

    #[test]
    fn lambda_zero_drops_identity_term_and_gradient() {
        let mut tape = Tape::new();
        let (a, b, c) = scalars(&mut tape, [5.0, 2.0, 3.0]);
        let j = joint_loss(&mut tape, a, b, c, &JointLossConfig { lambda: 0.0 }).unwrap();
        assert_eq!(tape.value(j).item().unwrap(), 5.0);
        tape.backward(j).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0]);
        assert_eq!(tape.grad(c).unwrap(), &[1.0]);
    }

    #[test]
    fn gradient_wrt_identity_loss_is_exactly_lambda() {
        for lambda in [0.5, 1.0, 4.0, 16.0] {
            let mut tape = Tape::new();
            let (a, b, c) = scalars(&mut tape, [0.3, 0.7, 0.1]);
            let j = joint_loss(&mut tape, a, b, c, &JointLossConfig { lambda }).unwrap();
            tape.backward(j).unwrap();
            assert_eq!(tape.grad(a).unwrap(), &[lambda]);
        }
    }

    #[test]
    fn linearity_in_each_component() {
        let eval = |values: [f64; 3]| {
            let mut tape = Tape::new();
            let (a, b, c) = scalars(&mut tape, values);
            let j = joint_loss(&mut tape, a, b, c, &JointLossConfig { lambda: 4.0 }).unwrap();
            tape.value(j).item().unwrap()
        };
        let base = eval([1.0, 1.0, 1.0]);
        assert_eq!(eval([2.0, 1.0, 1.0]) - base, 4.0);
        assert_eq!(eval([1.0, 2.0, 1.0]) - base, 1.0);
        assert_eq!(eval([1.0, 1.0, 2.0]) - base, 1.0);
    }

    #[test]
    fn non_finite_stream_is_identified() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0));
        let b = tape.leaf(Tensor::new(vec![1], vec![f64::NEG_INFINITY]).unwrap());
        let c = tape.leaf(Tensor::scalar(1.0));
        let err = joint_loss(&mut tape, a, b, c, &JointLossConfig::default()).unwrap_err();
        assert!(err.to_string().contains("ctc"), "{err}");
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(JointLossConfig::new(-0.1).is_err());
        assert!(JointLossConfig::new(0.0).is_ok());
    }
}
