//! Complex operations built from real-pair tape nodes.
//!
//! A complex value is a pair of real nodes; every rule below is the
//! separated real/imaginary form, so the tape never sees a complex number.

use super::tape::{Tape, Var};
use super::tensor::{ComplexTensor, RealTensor};
use crate::error::{Error, Result};

/// A complex tensor living on a tape as two real nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl CVar {
    pub fn new(re: Var, im: Var) -> Self {
        Self { re, im }
    }

    pub fn constant(tape: &mut Tape, value: &ComplexTensor) -> Self {
        Self {
            re: tape.constant(value.re.clone()),
            im: tape.constant(value.im.clone()),
        }
    }

    pub fn leaf(tape: &mut Tape, value: &ComplexTensor) -> Self {
        Self {
            re: tape.leaf(value.re.clone()),
            im: tape.leaf(value.im.clone()),
        }
    }

    pub fn value(&self, tape: &Tape) -> ComplexTensor {
        ComplexTensor {
            re: tape.value(self.re).clone(),
            im: tape.value(self.im).clone(),
        }
    }

    pub fn shape<'t>(&self, tape: &'t Tape) -> &'t [usize] {
        tape.shape(self.re)
    }

    pub fn reshape(self, tape: &mut Tape, shape: &[usize]) -> Result<Self> {
        Ok(Self {
            re: tape.reshape(self.re, shape)?,
            im: tape.reshape(self.im, shape)?,
        })
    }

    pub fn swap_last_two(self, tape: &mut Tape) -> Result<Self> {
        Ok(Self {
            re: tape.swap_last_two(self.re)?,
            im: tape.swap_last_two(self.im)?,
        })
    }

    pub fn add(self, tape: &mut Tape, other: CVar) -> Result<Self> {
        Ok(Self {
            re: tape.add(self.re, other.re)?,
            im: tape.add(self.im, other.im)?,
        })
    }

    pub fn mean_axis(self, tape: &mut Tape, axis: usize) -> Result<Self> {
        Ok(Self {
            re: tape.mean_axis(self.re, axis)?,
            im: tape.mean_axis(self.im, axis)?,
        })
    }
}

/// Weight `W = A + iB` with an optional complex bias.
#[derive(Clone, Copy, Debug)]
pub struct ComplexWeight {
    pub a: Var,
    pub b: Var,
    pub bias: Option<CVar>,
}

/// `W h = (A a - B b) + i (B a + A b)` for `A, B: [m x n]`, `h: [n x k]`;
/// the optional bias `[m]` is added to every column.
pub fn complex_affine(
    tape: &mut Tape,
    a: Var,
    b: Var,
    h: CVar,
    bias: Option<CVar>,
) -> Result<CVar> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(
            "complex_affine",
            format!("A {:?} vs B {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    let aa = tape.matmul(a, h.re)?;
    let bb = tape.matmul(b, h.im)?;
    let ba = tape.matmul(b, h.re)?;
    let ab = tape.matmul(a, h.im)?;
    let mut re = tape.sub(aa, bb)?;
    let mut im = tape.add(ba, ab)?;
    if let Some(bias) = bias {
        re = tape.add_bias(re, bias.re, 0)?;
        im = tape.add_bias(im, bias.im, 0)?;
    }
    Ok(CVar { re, im })
}

/// Row-vector form used by the network: `x: [r x n]`, `A, B: [m x n]`,
/// result `x W^T: [r x m]` with the bias added to every row.
pub fn complex_linear(tape: &mut Tape, x: CVar, w: &ComplexWeight) -> Result<CVar> {
    if tape.shape(w.a) != tape.shape(w.b) {
        return Err(Error::dim(
            "complex_linear",
            format!("A {:?} vs B {:?}", tape.shape(w.a), tape.shape(w.b)),
        ));
    }
    let aa = tape.matmul_nt(x.re, w.a)?;
    let bb = tape.matmul_nt(x.im, w.b)?;
    let ba = tape.matmul_nt(x.re, w.b)?;
    let ab = tape.matmul_nt(x.im, w.a)?;
    let mut re = tape.sub(aa, bb)?;
    let mut im = tape.add(ba, ab)?;
    if let Some(bias) = w.bias {
        re = tape.add_bias(re, bias.re, 1)?;
        im = tape.add_bias(im, bias.im, 1)?;
    }
    Ok(CVar { re, im })
}

/// `ReLU(a) + i ReLU(b)`.
pub fn crelu(tape: &mut Tape, h: CVar) -> Result<CVar> {
    Ok(CVar {
        re: tape.relu(h.re)?,
        im: tape.relu(h.im)?,
    })
}

/// LayerNorm parameters for a complex tensor: one affine pair per part.
#[derive(Clone, Copy, Debug)]
pub struct ComplexNorm {
    pub gamma_re: Var,
    pub beta_re: Var,
    pub gamma_im: Var,
    pub beta_im: Var,
}

/// Normalizes the real and imaginary parts independently along `axis`.
pub fn complex_layernorm(
    tape: &mut Tape,
    x: CVar,
    norm: &ComplexNorm,
    axis: usize,
    eps: f64,
) -> Result<CVar> {
    Ok(CVar {
        re: tape.layernorm(x.re, norm.gamma_re, norm.beta_re, axis, eps)?,
        im: tape.layernorm(x.im, norm.gamma_im, norm.beta_im, axis, eps)?,
    })
}

/// Which parts of a complex feature feed the real projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PearsonMode {
    /// `tanh(re + im)`
    #[default]
    Full,
    /// `tanh(re)`
    RealOnly,
    /// `tanh(im)`
    ImagOnly,
}

/// Projects complex features to bounded real scores.
pub fn pearson_project(tape: &mut Tape, y: CVar, mode: PearsonMode) -> Result<Var> {
    let pre = match mode {
        PearsonMode::Full => tape.add(y.re, y.im)?,
        PearsonMode::RealOnly => y.re,
        PearsonMode::ImagOnly => y.im,
    };
    tape.tanh(pre)
}

/// Value-level helpers that run a single op on a scratch tape.
pub mod eval {
    use super::*;

    pub fn complex_affine(
        a: &RealTensor,
        b: &RealTensor,
        h: &ComplexTensor,
        bias: Option<&ComplexTensor>,
    ) -> Result<ComplexTensor> {
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let hv = CVar::constant(&mut tape, h);
        let biasv = bias.map(|b| CVar::constant(&mut tape, b));
        let out = super::complex_affine(&mut tape, av, bv, hv, biasv)?;
        Ok(out.value(&tape))
    }

    pub fn crelu(h: &ComplexTensor) -> ComplexTensor {
        ComplexTensor {
            re: h.re.map(|v| v.max(0.0)),
            im: h.im.map(|v| v.max(0.0)),
        }
    }

    pub fn pearson_project(y: &ComplexTensor) -> RealTensor {
        let data =
            y.re.data()
                .iter()
                .zip(y.im.data())
                .map(|(r, i)| (r + i).tanh())
                .collect();
        RealTensor::new(y.re.shape().to_vec(), data).expect("shapes of a ComplexTensor agree")
    }
}
