//! Differentiable losses. All reduce to a scalar mean over the batch.

use crate::ctensor::{RealTensor, Tape, Var};
use crate::error::{Error, Result};

/// Mean of `softplus(z) - y z` over every entry, the stable form of binary
/// cross-entropy on logits.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, targets: &RealTensor) -> Result<Var> {
    if tape.shape(logits) != targets.shape() {
        return Err(Error::dim(
            "bce_with_logits",
            format!(
                "logits {:?} vs targets {:?}",
                tape.shape(logits),
                targets.shape()
            ),
        ));
    }
    if let Some(bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::contract(format!(
            "binary target expected, got {bad}"
        )));
    }
    let sp = tape.softplus(logits)?;
    let y = tape.constant(targets.clone());
    let yz = tape.mul(y, logits)?;
    let per = tape.sub(sp, yz)?;
    tape.mean(per)
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = match *tape.shape(logits) {
        [b, k] => (b, k),
        ref other => {
            return Err(Error::dim(
                "cross_entropy",
                format!("expected [B, K] logits, got {other:?}"),
            ))
        }
    };
    if labels.len() != b {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} labels for batch {b}", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!("label {bad} outside [0, {k})")));
    }
    let mut onehot = vec![0.0; b * k];
    for (row, &l) in labels.iter().enumerate() {
        onehot[row * k + l] = 1.0;
    }
    let lsm = tape.log_softmax(logits, 1)?;
    let mask = tape.constant(RealTensor::new(vec![b, k], onehot)?);
    let picked = tape.mul(lsm, mask)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Mean over rows of `H(q, p) = -sum q log p` with `q = softmax(target / tau)`
/// and `p = softmax(anchor / tau)`. The target is detached first, so no
/// gradient ever reaches it.
pub fn ssl_loss(tape: &mut Tape, anchor: Var, target: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::contract(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if tape.shape(anchor) != tape.shape(target) {
        return Err(Error::dim(
            "ssl_loss",
            format!(
                "anchor {:?} vs target {:?}",
                tape.shape(anchor),
                tape.shape(target)
            ),
        ));
    }
    let rows = match *tape.shape(anchor) {
        [b, _] => b,
        ref other => {
            return Err(Error::dim(
                "ssl_loss",
                format!("expected [B, D], got {other:?}"),
            ))
        }
    };
    let target = tape.detach(target)?;
    let t = tape.scale(target, 1.0 / temperature)?;
    let q = tape.softmax(t, 1)?;
    let a = tape.scale(anchor, 1.0 / temperature)?;
    let log_p = tape.log_softmax(a, 1)?;
    let prod = tape.mul(q, log_p)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -1.0 / rows as f64)
}
