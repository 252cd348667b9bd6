//! The C-Mixer classifier and its incentive-noise sampler.
//!
//! Pipeline for a batch `[B, ch, H, W]` of normalized images:
//!
//! 1. the incentive network maps each flattened image to `(mu, sigma)`;
//! 2. the imaginary input is `mu + sigma * eps` (reparameterized, one
//!    `(mu, sigma)` per image broadcast over its pixels), the real input is
//!    the image itself;
//! 3. patches are embedded with a shared complex affine map;
//! 4. `num_layers` complex Mixer blocks (token mixing, then channel mixing,
//!    both residual with CReLU activations);
//! 5. mean over the sequence, a complex head, and `tanh(re + im)`.

pub mod checkpoint;
pub mod config;
pub mod params;
pub mod patch;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::ctensor::{
    complex_layernorm, complex_linear, crelu, pearson_project, CVar, ComplexNorm, ComplexTensor,
    ComplexWeight, PearsonMode, RealTensor, Tape, Var,
};
use crate::error::{Error, Result};

pub use config::CMixerConfig;
pub use params::ParamSet;

/// Which projection head the forward pass ends in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Classify,
    Ssl,
}

/// Forward-pass switches used by the ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Feed the sampled incentive matrix as the imaginary input; when off the
    /// imaginary input is identically zero.
    pub incentive: bool,
    pub pearson: PearsonMode,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            incentive: true,
            pearson: PearsonMode::Full,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LinearIx {
    a: usize,
    b: usize,
    bias: Option<(usize, usize)>,
}

impl LinearIx {
    fn bind(&self, vars: &[Var]) -> ComplexWeight {
        ComplexWeight {
            a: vars[self.a],
            b: vars[self.b],
            bias: self.bias.map(|(re, im)| CVar::new(vars[re], vars[im])),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct NormIx {
    gamma_re: usize,
    beta_re: usize,
    gamma_im: usize,
    beta_im: usize,
}

impl NormIx {
    fn bind(&self, vars: &[Var]) -> ComplexNorm {
        ComplexNorm {
            gamma_re: vars[self.gamma_re],
            beta_re: vars[self.beta_re],
            gamma_im: vars[self.gamma_im],
            beta_im: vars[self.beta_im],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockIx {
    norm1: NormIx,
    token1: LinearIx,
    token2: LinearIx,
    norm2: NormIx,
    channel1: LinearIx,
    channel2: LinearIx,
}

#[derive(Clone, Copy, Debug)]
struct IncentiveIx {
    hidden_w: usize,
    hidden_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    incentive: IncentiveIx,
    embed: LinearIx,
    blocks: Vec<BlockIx>,
    head: LinearIx,
    ssl_head: LinearIx,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// one part of a complex weight with the given fan-in
    Complex(usize),
    /// real weight, He-scaled for the given fan-in
    He(usize),
    Zeros,
    Ones,
}

struct Builder<'a> {
    params: ParamSet,
    init: &'a mut dyn FnMut(&[usize], Init) -> RealTensor,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], kind: Init) -> usize {
        let value = (self.init)(shape, kind);
        self.params.push(name, value)
    }

    fn linear(&mut self, prefix: &str, out: usize, inp: usize, bias: bool) -> LinearIx {
        let a = self.add(
            format!("{prefix}.weight.re"),
            &[out, inp],
            Init::Complex(inp),
        );
        let b = self.add(
            format!("{prefix}.weight.im"),
            &[out, inp],
            Init::Complex(inp),
        );
        let bias = bias.then(|| {
            (
                self.add(format!("{prefix}.bias.re"), &[out], Init::Zeros),
                self.add(format!("{prefix}.bias.im"), &[out], Init::Zeros),
            )
        });
        LinearIx { a, b, bias }
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> NormIx {
        NormIx {
            gamma_re: self.add(format!("{prefix}.gamma.re"), &[dim], Init::Ones),
            beta_re: self.add(format!("{prefix}.beta.re"), &[dim], Init::Zeros),
            gamma_im: self.add(format!("{prefix}.gamma.im"), &[dim], Init::Ones),
            beta_im: self.add(format!("{prefix}.beta.im"), &[dim], Init::Zeros),
        }
    }
}

fn build(
    config: &CMixerConfig,
    init: &mut dyn FnMut(&[usize], Init) -> RealTensor,
) -> (ParamSet, Layout) {
    let mut b = Builder {
        params: ParamSet::new(),
        init,
    };
    let flat = config.image_len();
    let ih = config.incentive_hidden;
    let incentive = IncentiveIx {
        hidden_w: b.add(
            "incentive.hidden.weight".into(),
            &[ih, flat],
            Init::He(flat),
        ),
        hidden_b: b.add("incentive.hidden.bias".into(), &[ih], Init::Zeros),
        // zero output layer: an untrained sampler emits mu = 0, sigma = 0.5
        out_w: b.add("incentive.out.weight".into(), &[2, ih], Init::Zeros),
        out_b: b.add("incentive.out.bias".into(), &[2], Init::Zeros),
    };
    let (c, s) = (config.hidden, config.seq_len);
    let embed = b.linear("embed", c, config.patch_dim(), true);
    let blocks = (0..config.num_layers)
        .map(|i| BlockIx {
            norm1: b.norm(&format!("block{i}.norm1"), c),
            token1: b.linear(&format!("block{i}.token1"), config.token_hidden, s, false),
            token2: b.linear(&format!("block{i}.token2"), s, config.token_hidden, false),
            norm2: b.norm(&format!("block{i}.norm2"), c),
            channel1: b.linear(
                &format!("block{i}.channel1"),
                config.channel_hidden,
                c,
                false,
            ),
            channel2: b.linear(
                &format!("block{i}.channel2"),
                c,
                config.channel_hidden,
                false,
            ),
        })
        .collect();
    let head = b.linear("head", config.num_classes, c, true);
    let ssl_head = b.linear("ssl_head", config.ssl_dim, c, true);
    (
        b.params,
        Layout {
            incentive,
            embed,
            blocks,
            head,
            ssl_head,
        },
    )
}

/// Stored scalars of a model with this config, re and im buffers counted separately.
pub fn param_count(config: &CMixerConfig) -> usize {
    let complex =
        |out: usize, inp: usize, bias: bool| 2 * out * inp + if bias { 2 * out } else { 0 };
    let (c, s) = (config.hidden, config.seq_len);
    let incentive = config.incentive_hidden * config.image_len()
        + config.incentive_hidden
        + 2 * config.incentive_hidden
        + 2;
    let block = 2 * 4 * c
        + complex(config.token_hidden, s, false)
        + complex(s, config.token_hidden, false)
        + complex(config.channel_hidden, c, false)
        + complex(c, config.channel_hidden, false);
    incentive
        + complex(c, config.patch_dim(), true)
        + config.num_layers * block
        + complex(config.num_classes, c, true)
        + complex(config.ssl_dim, c, true)
}

/// A C-Mixer: config, parameters and the index layout tying them together.
#[derive(Clone, Debug)]
pub struct CMixerModel {
    config: CMixerConfig,
    params: ParamSet,
    layout: Layout,
}

impl CMixerModel {
    /// Random initialization: complex weights draw both parts from
    /// `N(0, 1 / (2 fan_in))`, the incentive hidden layer is He-initialized.
    pub fn new<R: Rng + ?Sized>(config: CMixerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut init = |shape: &[usize], kind: Init| -> RealTensor {
            let n: usize = shape.iter().product();
            let std = match kind {
                Init::Zeros => return RealTensor::zeros(shape),
                Init::Ones => return RealTensor::ones(shape),
                Init::Complex(fan_in) => (1.0 / (2.0 * fan_in as f64)).sqrt(),
                Init::He(fan_in) => (2.0 / fan_in as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            let data = (0..n).map(|_| normal.sample(rng)).collect();
            RealTensor::new(shape.to_vec(), data).expect("sized by shape")
        };
        let (params, layout) = build(&config, &mut init);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Model with every buffer zero (layer norms included).
    pub fn zeros(config: CMixerConfig) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config, &mut |shape, _| RealTensor::zeros(shape));
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Reassembles a model from named buffers; names and shapes must match the config.
    pub fn from_params(config: CMixerConfig, params: ParamSet) -> Result<Self> {
        let model = Self::zeros(config)?;
        model.params.check_compatible(&params)?;
        Ok(Self { params, ..model })
    }

    pub fn config(&self) -> &CMixerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_scalars()
    }

    /// Index range of the incentive network's buffers inside [`Self::params`].
    pub fn incentive_param_indices(&self) -> [usize; 4] {
        let ix = self.layout.incentive;
        [ix.hidden_w, ix.hidden_b, ix.out_w, ix.out_b]
    }

    /// Pins the incentive sampler to a fixed `(mu, sigma)` for every image by
    /// zeroing its output weights and setting the output bias.
    /// `sigma` of exactly 0 or 1 saturates the tanh.
    pub fn force_incentive(&mut self, mu: f64, sigma: f64) -> Result<()> {
        if !(mu > -1.0 && mu < 1.0) || !(0.0..=1.0).contains(&sigma) {
            return Err(Error::contract(format!(
                "cannot force mu={mu}, sigma={sigma}"
            )));
        }
        let ix = self.layout.incentive;
        let values = self.params.values_mut();
        values[ix.out_w].data_mut().fill(0.0);
        let raw_sigma = (2.0 * sigma - 1.0).clamp(-1.0, 1.0);
        let raw_sigma = if raw_sigma.abs() == 1.0 {
            40.0 * raw_sigma
        } else {
            raw_sigma.atanh()
        };
        values[ix.out_b]
            .data_mut()
            .copy_from_slice(&[mu.atanh(), raw_sigma]);
        Ok(())
    }

    /// Puts all parameters on `tape` and returns their handles in parameter order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    fn check_images(&self, images: &RealTensor) -> Result<usize> {
        let cfg = &self.config;
        match *images.shape() {
            [b, c, h, w] if c == cfg.in_channels && h == cfg.image_side && w == cfg.image_side => {
                Ok(b)
            }
            _ => Err(Error::dim(
                "forward",
                format!(
                    "expected [B, {}, {}, {}], got {:?}",
                    cfg.in_channels,
                    cfg.image_side,
                    cfg.image_side,
                    images.shape()
                ),
            )),
        }
    }

    /// `(mu, sigma)` per image, each `[B, 1]`, from flattened images `[B, ch*H*W]`.
    pub fn incentive_params(&self, tape: &mut Tape, vars: &[Var], flat: Var) -> Result<(Var, Var)> {
        let ix = self.layout.incentive;
        let h = tape.matmul_nt(flat, vars[ix.hidden_w])?;
        let h = tape.add_bias(h, vars[ix.hidden_b], 1)?;
        let h = tape.relu(h)?;
        let raw = tape.matmul_nt(h, vars[ix.out_w])?;
        let raw = tape.add_bias(raw, vars[ix.out_b], 1)?;
        let mu_raw = tape.slice_cols(raw, 0, 1)?;
        let sigma_raw = tape.slice_cols(raw, 1, 1)?;
        let mu = tape.tanh(mu_raw)?;
        let sigma = tape.tanh(sigma_raw)?;
        let sigma = tape.scale(sigma, 0.5)?;
        let sigma = tape.add_scalar(sigma, 0.5)?;
        Ok((mu, sigma))
    }

    /// Complex input `image + i (mu + sigma * eps)`.
    ///
    /// `images` is `[B, ch, H, W]` or a single `[ch, H, W]`; `eps` must match it
    /// and hold i.i.d. standard-normal draws. The output keeps the input shape.
    pub fn sample_incentive(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        images: &RealTensor,
        eps: &RealTensor,
    ) -> Result<CVar> {
        if images.shape() != eps.shape() {
            return Err(Error::dim(
                "sample_incentive",
                format!("image {:?} vs eps {:?}", images.shape(), eps.shape()),
            ));
        }
        let batch = if images.rank() == 3 {
            1
        } else {
            images.shape()[0]
        };
        let batched = images
            .clone()
            .reshape(&[batch, images.len() / batch.max(1)])?;
        let img_shape = images.shape().to_vec();
        let flat = tape.constant(batched);
        let (mu, sigma) = self.incentive_params(tape, vars, flat)?;
        let re = tape.constant(images.clone());
        let im = fuse_noise(
            tape,
            mu,
            sigma,
            &eps.clone().reshape(&[batch, eps.len() / batch.max(1)])?,
        )?;
        let im = tape.reshape(im, &img_shape)?;
        Ok(CVar::new(re, im))
    }

    /// One Mixer block on `[B, S, C]`.
    fn block(&self, tape: &mut Tape, vars: &[Var], ix: &BlockIx, x: CVar) -> Result<CVar> {
        let (b, s, c) = match *x.shape(tape) {
            [b, s, c] => (b, s, c),
            ref other => {
                return Err(Error::dim(
                    "mixer_block",
                    format!("expected [B, S, C], got {other:?}"),
                ))
            }
        };
        if s != self.config.seq_len || c != self.config.hidden {
            return Err(Error::dim(
                "mixer_block",
                format!(
                    "expected S={} C={}, got S={s} C={c}",
                    self.config.seq_len, self.config.hidden
                ),
            ));
        }
        let eps = self.config.ln_eps;
        let dt = self.config.token_hidden;
        let dc = self.config.channel_hidden;

        // token mixing: every channel column of length S goes through W2 CReLU(W1 .)
        let t = complex_layernorm(tape, x, &ix.norm1.bind(vars), 2, eps)?;
        let t = t.swap_last_two(tape)?.reshape(tape, &[b * c, s])?;
        let t = complex_linear(tape, t, &ix.token1.bind(vars))?;
        debug_assert_eq!(t.shape(tape), &[b * c, dt]);
        let t = crelu(tape, t)?;
        let t = complex_linear(tape, t, &ix.token2.bind(vars))?;
        let t = t.reshape(tape, &[b, c, s])?.swap_last_two(tape)?;
        let u = x.add(tape, t)?;

        // channel mixing: every token row of length C goes through W4 CReLU(W3 .)
        let h = complex_layernorm(tape, u, &ix.norm2.bind(vars), 2, eps)?;
        let h = h.reshape(tape, &[b * s, c])?;
        let h = complex_linear(tape, h, &ix.channel1.bind(vars))?;
        debug_assert_eq!(h.shape(tape), &[b * s, dc]);
        let h = crelu(tape, h)?;
        let h = complex_linear(tape, h, &ix.channel2.bind(vars))?;
        let h = h.reshape(tape, &[b, s, c])?;
        u.add(tape, h)
    }

    /// Differentiable Mixer block `index` on `[B, S, C]`, for gradient checks.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        index: usize,
        x: CVar,
    ) -> Result<CVar> {
        let ix = *self
            .layout
            .blocks
            .get(index)
            .ok_or_else(|| Error::contract(format!("no block {index}")))?;
        self.block(tape, vars, &ix, x)
    }

    /// Runs Mixer block `index` on a single `[S, C]` complex input.
    pub fn mixer_block_forward(&self, index: usize, x: &ComplexTensor) -> Result<ComplexTensor> {
        let ix = *self
            .layout
            .blocks
            .get(index)
            .ok_or_else(|| Error::contract(format!("no block {index}")))?;
        let (s, c) = match *x.shape() {
            [s, c] => (s, c),
            ref other => {
                return Err(Error::dim(
                    "mixer_block",
                    format!("expected [S, C], got {other:?}"),
                ))
            }
        };
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = CVar::constant(&mut tape, &x.clone().reshape(&[1, s, c])?);
        let y = self.block(&mut tape, &vars, &ix, xv)?;
        y.value(&tape).reshape(&[s, c])
    }

    /// Differentiable forward pass on `images: [B, ch, H, W]`.
    ///
    /// `eps` holds the standard-normal draws for the incentive sampler (same
    /// shape as `images`); it is ignored when `opts.incentive` is off.
    /// Returns `[B, num_classes]` or `[B, ssl_dim]` scores in `(-1, 1)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        images: &RealTensor,
        eps: &RealTensor,
        head: Head,
        opts: ForwardOptions,
    ) -> Result<Var> {
        let batch = self.check_images(images)?;
        let cfg = &self.config;
        let (s, pd) = (cfg.seq_len, cfg.patch_dim());

        let patched = patch::patchify(images, cfg.patch)?.reshape(&[batch * s, pd])?;
        let re = tape.constant(patched);
        let im = if opts.incentive {
            if eps.shape() != images.shape() {
                return Err(Error::dim(
                    "forward",
                    format!("eps {:?} vs images {:?}", eps.shape(), images.shape()),
                ));
            }
            let flat = tape.constant(images.clone().reshape(&[batch, cfg.image_len()])?);
            let (mu, sigma) = self.incentive_params(tape, vars, flat)?;
            // the noise is elementwise, so it can be fused directly in patch layout
            let eps_p = patch::patchify(eps, cfg.patch)?.reshape(&[batch, s * pd])?;
            let im = fuse_noise(tape, mu, sigma, &eps_p)?;
            tape.reshape(im, &[batch * s, pd])?
        } else {
            tape.constant(RealTensor::zeros(&[batch * s, pd]))
        };

        let x = complex_linear(tape, CVar::new(re, im), &self.layout.embed.bind(vars))?;
        let mut x = x.reshape(tape, &[batch, s, cfg.hidden])?;
        for ix in &self.layout.blocks {
            x = self.block(tape, vars, ix, x)?;
        }
        let pooled = x.mean_axis(tape, 1)?;
        let head = match head {
            Head::Classify => &self.layout.head,
            Head::Ssl => &self.layout.ssl_head,
        };
        let y = complex_linear(tape, pooled, &head.bind(vars))?;
        pearson_project(tape, y, opts.pearson)
    }

    /// Non-differentiable forward in chunks of at most `chunk` images.
    pub fn predict(
        &self,
        images: &RealTensor,
        eps: &RealTensor,
        head: Head,
        opts: ForwardOptions,
        chunk: usize,
    ) -> Result<RealTensor> {
        let batch = self.check_images(images)?;
        let chunk = chunk.max(1);
        let mut out = Vec::new();
        let mut width = 0;
        let mut start = 0;
        while start < batch {
            let n = chunk.min(batch - start);
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let eps_chunk = if opts.incentive {
                eps.rows(start, n)?
            } else {
                RealTensor::zeros(&[0])
            };
            let y = self.forward(
                &mut tape,
                &vars,
                &images.rows(start, n)?,
                &eps_chunk,
                head,
                opts,
            )?;
            width = tape.shape(y)[1];
            out.extend_from_slice(tape.value(y).data());
            start += n;
        }
        RealTensor::new(vec![batch, width], out)
    }

    /// `(mu, sigma)` for each image without building gradients.
    pub fn noise_params(&self, images: &RealTensor) -> Result<Vec<(f64, f64)>> {
        let batch = self.check_images(images)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let flat = tape.constant(images.clone().reshape(&[batch, self.config.image_len()])?);
        let (mu, sigma) = self.incentive_params(&mut tape, &vars, flat)?;
        Ok(tape
            .value(mu)
            .data()
            .iter()
            .zip(tape.value(sigma).data())
            .map(|(&m, &s)| (m, s))
            .collect())
    }
}

/// `mu + sigma * eps` with per-row `mu, sigma: [B, 1]` and `eps: [B, n]`.
fn fuse_noise(tape: &mut Tape, mu: Var, sigma: Var, eps: &RealTensor) -> Result<Var> {
    let cols = eps.shape()[1];
    let mu = tape.broadcast_cols(mu, cols)?;
    let sigma = tape.broadcast_cols(sigma, cols)?;
    let eps = tape.constant(eps.clone());
    let scaled = tape.mul(sigma, eps)?;
    tape.add(mu, scaled)
}

/// I.i.d. standard-normal tensor of the given shape.
pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> RealTensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    RealTensor::new(shape.to_vec(), data).expect("sized by shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> CMixerConfig {
        CMixerConfig::new(2, 8, 2, 0, 0, 3, 1, 4)
            .unwrap()
            .with_incentive_hidden(5)
    }

    #[test]
    fn closed_form_count_matches_built_model() {
        for cfg in [
            tiny(),
            CMixerConfig::new(0, 1, 4, 0, 0, 1, 1, 4)
                .unwrap()
                .with_incentive_hidden(1),
        ] {
            let model = CMixerModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(model.param_count(), param_count(&cfg));
        }
    }

    #[test]
    fn zero_layer_unit_config_is_hand_countable() {
        // 1x4x4 image, P=4 (S=1, patch dim 16), C=1, 1 class, ssl width 128, incentive width 1:
        // incentive 16 + 1 + 2 + 2 = 21; embed 2*16 + 2 = 34; head 2 + 2 = 4; ssl head 256 + 256 = 512
        let cfg = CMixerConfig::new(0, 1, 4, 0, 0, 1, 1, 4)
            .unwrap()
            .with_incentive_hidden(1);
        assert_eq!(param_count(&cfg), 21 + 34 + 4 + 512);
    }

    #[test]
    fn block_parameters_scale_linearly_with_depth() {
        let mut cfg = CMixerConfig::medmnist(9, 3);
        cfg.num_layers = 0;
        let base = param_count(&cfg);
        cfg.num_layers = 4;
        let four = param_count(&cfg) - base;
        cfg.num_layers = 8;
        let eight = param_count(&cfg) - base;
        assert_eq!(eight, 2 * four);
    }

    #[test]
    fn parameter_names_follow_block_role_part() {
        let model = CMixerModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let names = model.params().names();
        assert!(names.contains(&"block1.token2.weight.im".to_string()));
        assert!(names.contains(&"block0.norm1.gamma.re".to_string()));
        assert!(names.contains(&"embed.bias.re".to_string()));
        assert!(names.contains(&"incentive.hidden.weight".to_string()));
    }

    #[test]
    fn forward_shape_and_range() {
        let cfg = CMixerConfig::new(2, 8, 2, 0, 0, 9, 1, 4)
            .unwrap()
            .with_incentive_hidden(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = CMixerModel::new(cfg, &mut rng).unwrap();
        let images = standard_normal(&[2, 1, 4, 4], &mut rng);
        let eps = standard_normal(&[2, 1, 4, 4], &mut rng);
        let out = model
            .predict(&images, &eps, Head::Classify, ForwardOptions::default(), 8)
            .unwrap();
        assert_eq!(out.shape(), &[2, 9]);
        assert!(out.data().iter().all(|v| v.abs() < 1.0));
        let ssl = model
            .predict(&images, &eps, Head::Ssl, ForwardOptions::default(), 1)
            .unwrap();
        assert_eq!(ssl.shape(), &[2, 128]);
    }

    #[test]
    fn forward_rejects_wrong_image_shape() {
        let model = CMixerModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bad = RealTensor::zeros(&[1, 1, 6, 6]);
        assert!(matches!(
            model.predict(&bad, &bad, Head::Classify, ForwardOptions::default(), 4),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn untrained_sampler_gives_mu_zero_sigma_half() {
        let model = CMixerModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let images = standard_normal(&[3, 1, 4, 4], &mut ChaCha8Rng::seed_from_u64(9));
        for (mu, sigma) in model.noise_params(&images).unwrap() {
            assert_eq!(mu, 0.0);
            assert_eq!(sigma, 0.5);
        }
    }

    #[test]
    fn sample_incentive_shape_mismatch() {
        let model = CMixerModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let err = model.sample_incentive(
            &mut tape,
            &vars,
            &RealTensor::zeros(&[1, 4, 4]),
            &RealTensor::zeros(&[1, 4, 3]),
        );
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    fn set(model: &mut CMixerModel, pred: impl Fn(&str) -> bool, value: f64) {
        let names = model.params().names().to_vec();
        for (name, t) in names.iter().zip(model.params_mut().values_mut()) {
            if pred(name) {
                t.data_mut().fill(value);
            }
        }
    }

    fn random_complex(shape: &[usize], seed: u64) -> ComplexTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexTensor::new(
            standard_normal(shape, &mut rng),
            standard_normal(shape, &mut rng),
        )
        .unwrap()
    }

    #[test]
    fn medmnist_config_is_about_six_million() {
        let count = param_count(&CMixerConfig::medmnist(9, 3));
        assert_eq!(count, 6_482_780);
        assert!((5_500_000..=6_500_000).contains(&count));
    }

    #[test]
    fn zero_weight_block_is_exact_identity() {
        let mut model = CMixerModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        set(
            &mut model,
            |n| n.starts_with("block0.") && n.contains(".weight."),
            0.0,
        );
        let x = random_complex(&[4, 8], 3);
        assert_eq!(model.mixer_block_forward(0, &x).unwrap(), x);
    }

    #[test]
    fn random_block_keeps_shape() {
        let model = CMixerModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let y = model
            .mixer_block_forward(1, &random_complex(&[4, 8], 4))
            .unwrap();
        assert_eq!(y.shape(), &[4, 8]);
        assert!(matches!(
            model.mixer_block_forward(0, &random_complex(&[3, 8], 4)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn singleton_block_with_unit_weights_returns_input() {
        // S = 1, C = 1: layer norm of a single value is 0, so both residual branches vanish
        let cfg = CMixerConfig::new(1, 1, 4, 0, 0, 1, 1, 4).unwrap();
        let mut model = CMixerModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        set(
            &mut model,
            |n| n.starts_with("block0.") && n.ends_with(".re") && n.contains("weight"),
            1.0,
        );
        set(
            &mut model,
            |n| n.starts_with("block0.") && n.ends_with(".im") && n.contains("weight"),
            0.0,
        );
        let x = ComplexTensor::new(RealTensor::ones(&[1, 1]), RealTensor::zeros(&[1, 1])).unwrap();
        assert_eq!(model.mixer_block_forward(0, &x).unwrap(), x);
    }

    #[test]
    fn degenerate_noise_gives_zero_or_constant_imaginary_part() {
        let mut model = CMixerModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = standard_normal(&[1, 4, 4], &mut rng);
        let eps = standard_normal(&[1, 4, 4], &mut rng);
        for (mu, expect) in [(0.0, 0.0), (0.5, 0.5)] {
            model.force_incentive(mu, 0.0).unwrap();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, false);
            let h = model
                .sample_incentive(&mut tape, &vars, &img, &eps)
                .unwrap()
                .value(&tape);
            assert_eq!(h.re, img);
            assert!(h.im.data().iter().all(|&v| (v - expect).abs() < 1e-15));
        }
    }

    #[test]
    fn sampled_noise_matches_requested_moments() {
        let mut model = CMixerModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        model.force_incentive(0.2, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // 62_500 images of 16 pixels = 10^6 draws
        let imgs = standard_normal(&[62_500, 1, 4, 4], &mut rng);
        let eps = standard_normal(&[62_500, 1, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let h = model
            .sample_incentive(&mut tape, &vars, &imgs, &eps)
            .unwrap()
            .value(&tape);
        let n = h.im.len() as f64;
        let mean = h.im.sum() / n;
        let std = (h.im.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - 0.2).abs() <= 3.0 * 0.3 / 1e3, "mean {mean}");
        assert!((std - 0.3).abs() <= 0.003, "std {std}");
    }

    #[test]
    fn without_incentive_output_ignores_noise() {
        let model = CMixerModel::new(tiny(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let imgs = standard_normal(&[3, 1, 4, 4], &mut rng);
        let off = ForwardOptions {
            incentive: false,
            ..Default::default()
        };
        let a = model
            .predict(
                &imgs,
                &standard_normal(&[3, 1, 4, 4], &mut rng),
                Head::Classify,
                off,
                4,
            )
            .unwrap();
        let b = model
            .predict(
                &imgs,
                &standard_normal(&[3, 1, 4, 4], &mut rng),
                Head::Classify,
                off,
                4,
            )
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_seed_reproduces_outputs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let model = CMixerModel::new(tiny(), &mut rng).unwrap();
            let imgs = standard_normal(&[2, 1, 4, 4], &mut rng);
            let eps = standard_normal(&[2, 1, 4, 4], &mut rng);
            model
                .predict(&imgs, &eps, Head::Classify, ForwardOptions::default(), 2)
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn chunking_does_not_change_predictions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = CMixerModel::new(tiny(), &mut rng).unwrap();
        let imgs = standard_normal(&[5, 1, 4, 4], &mut rng);
        let eps = standard_normal(&[5, 1, 4, 4], &mut rng);
        let whole = model
            .predict(&imgs, &eps, Head::Ssl, ForwardOptions::default(), 5)
            .unwrap();
        let split = model
            .predict(&imgs, &eps, Head::Ssl, ForwardOptions::default(), 2)
            .unwrap();
        for (a, b) in whole.data().iter().zip(split.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = CMixerModel::new(tiny(), &mut rng).unwrap();
        model.force_incentive(0.1, 0.4).unwrap();
        let imgs = standard_normal(&[3, 1, 4, 4], &mut rng);
        let eps = standard_normal(&[3, 1, 4, 4], &mut rng);
        let perm = [2usize, 0, 1];
        let gather = |t: &RealTensor| {
            let rows: Vec<f64> = perm
                .iter()
                .flat_map(|&p| t.rows(p, 1).unwrap().into_data())
                .collect();
            RealTensor::new(t.shape().to_vec(), rows).unwrap()
        };
        let opts = ForwardOptions::default();
        let out = model.predict(&imgs, &eps, Head::Classify, opts, 8).unwrap();
        let permuted = model
            .predict(&gather(&imgs), &gather(&eps), Head::Classify, opts, 8)
            .unwrap();
        for (a, b) in gather(&out).data().iter().zip(permuted.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn projection_ablations_stay_bounded_and_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = CMixerModel::new(tiny(), &mut rng).unwrap();
        let imgs = standard_normal(&[2, 1, 4, 4], &mut rng);
        let eps = standard_normal(&[2, 1, 4, 4], &mut rng);
        let run = |pearson| {
            let opts = ForwardOptions {
                pearson,
                ..Default::default()
            };
            model.predict(&imgs, &eps, Head::Classify, opts, 2).unwrap()
        };
        let full = run(PearsonMode::Full);
        for mode in [PearsonMode::RealOnly, PearsonMode::ImagOnly] {
            let out = run(mode);
            assert!(out.data().iter().all(|v| v.abs() < 1.0));
            assert_ne!(out, full);
        }
    }

    #[test]
    fn gradients_reach_the_incentive_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut model = CMixerModel::new(tiny(), &mut rng).unwrap();
        let imgs = standard_normal(&[2, 1, 4, 4], &mut rng);
        let eps = standard_normal(&[2, 1, 4, 4], &mut rng);
        let grads = |model: &CMixerModel| {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let y = model
                .forward(
                    &mut tape,
                    &vars,
                    &imgs,
                    &eps,
                    Head::Classify,
                    ForwardOptions::default(),
                )
                .unwrap();
            let loss = tape.sum(y).unwrap();
            let g = tape.backward(loss).unwrap();
            model
                .incentive_param_indices()
                .map(|i| g.get(vars[i]).unwrap().max_abs())
        };
        let [_, _, out_w, out_b] = grads(&model);
        assert!(out_w > 0.0 && out_b > 0.0);
        // once the output layer is non-zero the hidden layer receives gradient too
        let ix = model.incentive_param_indices();
        let w = standard_normal(&[2, 5], &mut rng);
        model.params_mut().values_mut()[ix[2]] = w;
        assert!(grads(&model).iter().all(|&g| g > 0.0));
    }
}
