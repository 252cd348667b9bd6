//! Optimizers, learning-rate schedules, EMA and gradient clipping. Complex
//! parameters are just pairs of real buffers here.

use crate::ctensor::RealTensor;
use crate::error::{Error, Result};

fn check_step(
    op: &'static str,
    params: &[RealTensor],
    grads: &[RealTensor],
    state: &[RealTensor],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::contract(format!(
            "{op}: {} params, {} grads, {} state buffers",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(state) {
        if p.shape() != g.shape() || p.shape() != s.shape() {
            return Err(Error::contract(format!(
                "{op}: shape {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric { op });
        }
    }
    Ok(())
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<RealTensor>,
    v: Vec<RealTensor>,
}

impl AdamW {
    pub fn new(params: &[RealTensor], weight_decay: f64) -> Self {
        let zeros: Vec<RealTensor> = params
            .iter()
            .map(|p| RealTensor::zeros(p.shape()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [RealTensor], grads: &[RealTensor], lr: f64) -> Result<()> {
        check_step("adamw_step", params, grads, &self.m)?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, decay) = (
            self.beta1,
            self.beta2,
            self.eps,
            1.0 - lr * self.weight_decay,
        );
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p *= decay;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v <- m v + g`, `p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<RealTensor>,
}

impl SgdMomentum {
    pub fn new(params: &[RealTensor], momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params
                .iter()
                .map(|p| RealTensor::zeros(p.shape()))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut [RealTensor], grads: &[RealTensor], lr: f64) -> Result<()> {
        check_step("sgd_momentum_step", params, grads, &self.velocity)?;
        let mu = self.momentum;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    WarmupLinear,
    WarmupCosine,
}

/// Linear warmup from 0 to `peak`, then linear or half-cosine decay to 0 at
/// `total_steps`. A warmup longer than the run is clamped to the run length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(
        kind: ScheduleKind,
        peak: f64,
        warmup_steps: usize,
        total_steps: usize,
    ) -> Result<Self> {
        if !(peak >= 0.0 && peak.is_finite()) {
            return Err(Error::contract(format!(
                "peak lr {peak} must be finite and >= 0"
            )));
        }
        Ok(Self {
            kind,
            peak,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::contract(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        let w = self.warmup_steps;
        if step < w || (step == w && w == self.total_steps) {
            return Ok(self.peak * step as f64 / w.max(1) as f64);
        }
        let t = (step - w) as f64 / (self.total_steps - w) as f64;
        Ok(match self.kind {
            ScheduleKind::WarmupLinear => self.peak * (1.0 - t),
            ScheduleKind::WarmupCosine => {
                self.peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        })
    }
}

/// `shadow <- decay * shadow + (1 - decay) * params`, buffer by buffer.
pub fn ema_update(shadow: &mut [RealTensor], params: &[RealTensor], decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::contract(format!("EMA decay {decay} outside [0, 1]")));
    }
    if shadow.len() != params.len()
        || shadow
            .iter()
            .zip(params)
            .any(|(s, p)| s.shape() != p.shape())
    {
        return Err(Error::contract("EMA shadow does not match the model"));
    }
    for (s, p) in shadow.iter_mut().zip(params) {
        for (s, &p) in s.data_mut().iter_mut().zip(p.data()) {
            *s = decay * *s + (1.0 - decay) * p;
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[RealTensor]) -> f64 {
    grads
        .iter()
        .map(RealTensor::sum_squares)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [RealTensor], max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::contract(format!(
            "clip norm must be > 0, got {max_norm}"
        )));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads
            .iter_mut()
            .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
    }
    Ok(norm)
}
