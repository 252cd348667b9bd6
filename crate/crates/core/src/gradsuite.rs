//! The gradient-check suite: every tape op, every complex layer, a tiny
//! complete model and the three losses, each compared against central
//! finite differences.
//!
//! A fault can be injected into one op's backward rule to confirm that the
//! suite notices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctensor::{
    complex_affine, complex_layernorm, complex_linear, crelu, grad_check_with, pearson_project,
    CVar, ComplexNorm, ComplexWeight, GradCheckOptions, OpKind, PearsonMode, RealTensor, Tape, Var,
};
use crate::error::Result;
use crate::model::{standard_normal, CMixerConfig, CMixerModel, ForwardOptions, Head};
use crate::train::{bce_with_logits, cross_entropy, ssl_loss};

/// Pass threshold on the max relative error of every check.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(SuiteEntry::passed)
    }

    pub fn failing(&self) -> Vec<&SuiteEntry> {
        self.entries.iter().filter(|e| !e.passed()).collect()
    }

    pub fn worst(&self) -> Option<&SuiteEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> RealTensor {
    let n: usize = shape.iter().product();
    RealTensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("sized by shape")
}

/// Contracts `y` with fixed pseudo-random weights so every entry matters.
fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let n = t.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.7 + 0.3).sin()).collect();
    let w = t.constant(RealTensor::new(t.shape(y).to_vec(), w)?);
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn complex_sum(t: &mut Tape, y: CVar) -> Result<Var> {
    let a = weighted_sum(t, y.re)?;
    let b = weighted_sum(t, y.im)?;
    t.add(a, b)
}

struct Runner {
    fault: Option<OpKind>,
    opts: GradCheckOptions,
    report: SuiteReport,
}

impl Runner {
    fn check<F>(&mut self, name: &str, leaves: &[RealTensor], f: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let fault = self.fault;
        let r = grad_check_with(
            |t, v| {
                if let Some(k) = fault {
                    t.inject_fault(k);
                }
                f(t, v)
            },
            leaves,
            &self.opts,
        )?;
        self.report.entries.push(SuiteEntry {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            skipped_kinks: r.skipped_kinks,
        });
        Ok(())
    }
}

/// Runs every check; `fault` scales one op's backward rule by 1.5.
pub fn run_suite(fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut r = Runner {
        fault,
        opts: GradCheckOptions::default(),
        report: SuiteReport::default(),
    };
    let x = uniform(&[3, 4], -1.5, 1.5, &mut rng);
    let y = uniform(&[3, 4], -1.5, 1.5, &mut rng);
    let pos = uniform(&[3, 4], 0.2, 3.0, &mut rng);
    let cube = uniform(&[2, 3, 4], -1.5, 1.5, &mut rng);

    // one check per differentiable tape op
    r.check("add", &[x.clone(), y.clone()], |t, v| {
        let o = t.add(v[0], v[1])?;
        weighted_sum(t, o)
    })?;
    r.check("sub", &[x.clone(), y.clone()], |t, v| {
        let o = t.sub(v[0], v[1])?;
        weighted_sum(t, o)
    })?;
    r.check("mul", &[x.clone(), y.clone()], |t, v| {
        let o = t.mul(v[0], v[1])?;
        t.sum(o)
    })?;
    r.check("scale", std::slice::from_ref(&x), |t, v| {
        let o = t.scale(v[0], -1.3)?;
        weighted_sum(t, o)
    })?;
    r.check("add_scalar", std::slice::from_ref(&x), |t, v| {
        let o = t.add_scalar(v[0], 0.7)?;
        weighted_sum(t, o)
    })?;
    r.check(
        "add_bias",
        &[cube.clone(), uniform(&[3], -1.0, 1.0, &mut rng)],
        |t, v| {
            let o = t.add_bias(v[0], v[1], 1)?;
            weighted_sum(t, o)
        },
    )?;
    r.check(
        "matmul",
        &[x.clone(), uniform(&[4, 2], -1.0, 1.0, &mut rng)],
        |t, v| {
            let o = t.matmul(v[0], v[1])?;
            weighted_sum(t, o)
        },
    )?;
    r.check(
        "matmul_nt",
        &[x.clone(), uniform(&[5, 4], -1.0, 1.0, &mut rng)],
        |t, v| {
            let o = t.matmul_nt(v[0], v[1])?;
            weighted_sum(t, o)
        },
    )?;
    r.check("relu", std::slice::from_ref(&x), |t, v| {
        let o = t.relu(v[0])?;
        weighted_sum(t, o)
    })?;
    r.check("tanh", std::slice::from_ref(&x), |t, v| {
        let o = t.tanh(v[0])?;
        weighted_sum(t, o)
    })?;
    r.check("exp", std::slice::from_ref(&x), |t, v| {
        let o = t.exp(v[0])?;
        weighted_sum(t, o)
    })?;
    r.check("log", &[pos], |t, v| {
        let o = t.log(v[0])?;
        weighted_sum(t, o)
    })?;
    r.check("softplus", std::slice::from_ref(&x), |t, v| {
        let o = t.softplus(v[0])?;
        weighted_sum(t, o)
    })?;
    r.check("softmax", std::slice::from_ref(&cube), |t, v| {
        let o = t.softmax(v[0], 1)?;
        weighted_sum(t, o)
    })?;
    r.check("log_softmax", std::slice::from_ref(&cube), |t, v| {
        let o = t.log_softmax(v[0], 2)?;
        weighted_sum(t, o)
    })?;
    r.check("sum", std::slice::from_ref(&x), |t, v| {
        let o = t.tanh(v[0])?;
        t.sum(o)
    })?;
    r.check("mean", std::slice::from_ref(&x), |t, v| {
        let o = t.tanh(v[0])?;
        t.mean(o)
    })?;
    r.check("mean_axis", std::slice::from_ref(&cube), |t, v| {
        let o = t.mean_axis(v[0], 1)?;
        weighted_sum(t, o)
    })?;
    r.check(
        "layernorm",
        &[
            cube.clone(),
            uniform(&[4], 0.5, 1.5, &mut rng),
            uniform(&[4], -0.5, 0.5, &mut rng),
        ],
        |t, v| {
            let o = t.layernorm(v[0], v[1], v[2], 2, 1e-5)?;
            weighted_sum(t, o)
        },
    )?;
    r.check("reshape", std::slice::from_ref(&cube), |t, v| {
        let o = t.reshape(v[0], &[6, 4])?;
        weighted_sum(t, o)
    })?;
    r.check("swap_last_two", std::slice::from_ref(&cube), |t, v| {
        let o = t.swap_last_two(v[0])?;
        weighted_sum(t, o)
    })?;
    r.check(
        "broadcast_cols",
        &[uniform(&[3, 1], -1.0, 1.0, &mut rng)],
        |t, v| {
            let o = t.broadcast_cols(v[0], 4)?;
            weighted_sum(t, o)
        },
    )?;
    r.check("slice_cols", std::slice::from_ref(&x), |t, v| {
        let o = t.slice_cols(v[0], 1, 2)?;
        weighted_sum(t, o)
    })?;

    // complex layers
    let (a, b) = (
        uniform(&[3, 4], -1.0, 1.0, &mut rng),
        uniform(&[3, 4], -1.0, 1.0, &mut rng),
    );
    let (hr, hi) = (
        uniform(&[4, 2], -1.0, 1.0, &mut rng),
        uniform(&[4, 2], -1.0, 1.0, &mut rng),
    );
    let (br, bi) = (
        uniform(&[3], -1.0, 1.0, &mut rng),
        uniform(&[3], -1.0, 1.0, &mut rng),
    );
    r.check(
        "complex_affine",
        &[a.clone(), b.clone(), hr, hi, br.clone(), bi.clone()],
        |t, v| {
            let o = complex_affine(
                t,
                v[0],
                v[1],
                CVar::new(v[2], v[3]),
                Some(CVar::new(v[4], v[5])),
            )?;
            complex_sum(t, o)
        },
    )?;
    let (xr, xi) = (
        uniform(&[5, 4], -1.0, 1.0, &mut rng),
        uniform(&[5, 4], -1.0, 1.0, &mut rng),
    );
    r.check(
        "complex_linear",
        &[a, b, xr.clone(), xi.clone(), br, bi],
        |t, v| {
            let w = ComplexWeight {
                a: v[0],
                b: v[1],
                bias: Some(CVar::new(v[4], v[5])),
            };
            let o = complex_linear(t, CVar::new(v[2], v[3]), &w)?;
            complex_sum(t, o)
        },
    )?;
    r.check("crelu", &[xr.clone(), xi.clone()], |t, v| {
        let o = crelu(t, CVar::new(v[0], v[1]))?;
        complex_sum(t, o)
    })?;
    let norm_leaves = [
        xr.clone(),
        xi.clone(),
        uniform(&[4], 0.5, 1.5, &mut rng),
        uniform(&[4], -0.5, 0.5, &mut rng),
        uniform(&[4], 0.5, 1.5, &mut rng),
        uniform(&[4], -0.5, 0.5, &mut rng),
    ];
    r.check("complex_layernorm", &norm_leaves, |t, v| {
        let n = ComplexNorm {
            gamma_re: v[2],
            beta_re: v[3],
            gamma_im: v[4],
            beta_im: v[5],
        };
        let o = complex_layernorm(t, CVar::new(v[0], v[1]), &n, 1, 1e-5)?;
        complex_sum(t, o)
    })?;
    for (name, mode) in [
        ("pearson_full", PearsonMode::Full),
        ("pearson_real_only", PearsonMode::RealOnly),
        ("pearson_imag_only", PearsonMode::ImagOnly),
    ] {
        r.check(name, &[xr.clone(), xi.clone()], move |t, v| {
            let o = pearson_project(t, CVar::new(v[0], v[1]), mode)?;
            weighted_sum(t, o)
        })?;
    }

    // tiny model: 2 layers, C = 8, S = 4 (4x4 images, 2x2 patches)
    let cfg = CMixerConfig::new(2, 8, 2, 0, 0, 3, 1, 4)?.with_incentive_hidden(6);
    let mut model = CMixerModel::new(cfg, &mut rng)?;
    // a non-zero sampler output layer so gradient reaches its hidden layer
    let out_w = model.incentive_param_indices()[2];
    model.params_mut().values_mut()[out_w] = uniform(&[2, 6], -0.5, 0.5, &mut rng);
    let params = model.params().values().to_vec();
    let n_params = params.len();
    let images = uniform(&[2, 1, 4, 4], -1.0, 1.0, &mut rng);
    let eps = standard_normal(&[2, 1, 4, 4], &mut rng);

    let mut block_leaves = params.clone();
    block_leaves.push(uniform(&[2, 4, 8], -1.0, 1.0, &mut rng));
    block_leaves.push(uniform(&[2, 4, 8], -1.0, 1.0, &mut rng));
    r.check("mixer_block", &block_leaves, |t, v| {
        let o = model.block_forward(
            t,
            &v[..n_params],
            0,
            CVar::new(v[n_params], v[n_params + 1]),
        )?;
        complex_sum(t, o)
    })?;
    r.check("incentive_sampler", &params, |t, v| {
        let h = model.sample_incentive(t, v, &images, &eps)?;
        complex_sum(t, h)
    })?;
    r.check("model_classify", &params, |t, v| {
        let o = model.forward(
            t,
            v,
            &images,
            &eps,
            Head::Classify,
            ForwardOptions::default(),
        )?;
        cross_entropy(t, o, &[2, 0])
    })?;
    r.check("model_ssl", &params, |t, v| {
        let o = model.forward(t, v, &images, &eps, Head::Ssl, ForwardOptions::default())?;
        weighted_sum(t, o)
    })?;

    // losses
    let logits = uniform(&[4, 3], -2.0, 2.0, &mut rng);
    let targets = RealTensor::new(
        vec![4, 3],
        (0..12).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect(),
    )?;
    r.check("bce_with_logits", std::slice::from_ref(&logits), |t, v| {
        bce_with_logits(t, v[0], &targets)
    })?;
    r.check("cross_entropy", std::slice::from_ref(&logits), |t, v| {
        cross_entropy(t, v[0], &[0, 2, 1, 2])
    })?;
    let target_out = uniform(&[4, 3], -1.0, 1.0, &mut rng);
    r.check("ssl_loss", &[logits], |t, v| {
        let tv = t.constant(target_out.clone());
        ssl_loss(t, v[0], tv, 0.5)
    })?;

    Ok(r.report)
}
