//! Central finite-difference check of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::RealTensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Upper bound on probed entries per leaf; `None` probes every entry.
    pub max_entries_per_leaf: Option<usize>,
    /// One-sided slopes differing by more than this (relative) mark a kink.
    pub kink_tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries_per_leaf: None,
            kink_tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic - central| / max(1, |central|) over probed entries
    pub max_rel_error: f64,
    /// (leaf position, flat entry) of the worst entry
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// entries whose perturbation straddled a non-differentiable point
    pub skipped_kinks: usize,
}

/// Compares the tape gradient of the scalar `f` against central differences.
pub fn grad_check<F>(f: F, leaves: &[RealTensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(
        f,
        leaves,
        &GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

pub fn grad_check_with<F>(
    f: F,
    leaves: &[RealTensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(Error::contract("grad_check eps must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).item();
    let grads = tape.backward(loss)?;

    let eval = |values: &[RealTensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let out = f(&mut t, &vs)?;
        let v = t.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numeric { op: "grad_check" });
        }
        Ok(v)
    };

    let mut report = GradCheckReport::default();
    let mut probe = leaves.to_vec();
    for (leaf_pos, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(vars[leaf_pos])
            .expect("every leaf has a gradient");
        for entry in probe_entries(leaf.len(), opts.max_entries_per_leaf) {
            let original = leaf.data()[entry];
            probe[leaf_pos].data_mut()[entry] = original + opts.eps;
            let plus = eval(&probe)?;
            probe[leaf_pos].data_mut()[entry] = original - opts.eps;
            let minus = eval(&probe)?;
            probe[leaf_pos].data_mut()[entry] = original;

            let central = (plus - minus) / (2.0 * opts.eps);
            let forward = (plus - base) / opts.eps;
            let backward = (base - minus) / opts.eps;
            let scale = central.abs().max(1.0);
            if (forward - backward).abs() > opts.kink_tolerance * scale {
                report.skipped_kinks += 1;
                continue;
            }
            let rel = (analytic.data()[entry] - central).abs() / scale;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((leaf_pos, entry));
            }
        }
    }
    Ok(report)
}

fn probe_entries(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(max) if max < len && max > 0 => (0..max).map(|i| i * len / max).collect(),
        _ => (0..len).collect(),
    }
}
