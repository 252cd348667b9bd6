//! Training: masked self-supervised pre-training against an EMA target tower,
//! then supervised fine-tuning.
//!
//! Both loops split each batch into micro-batches of at most
//! `TrainConfig::micro_batch` samples, run them in order on fresh tapes and
//! sum their gradients weighted by size, so a step's gradient equals the
//! gradient of the full-batch mean loss and runs are bitwise reproducible.

pub mod loss;
pub mod optim;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctensor::{PearsonMode, RealTensor, Tape, Var};
use crate::data::{
    augment_target, random_mask, to_tensor, AugmentSpec, DatasetBundle, Image, MaskSpec, Split,
    TaskKind,
};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::model::{standard_normal, CMixerModel, ForwardOptions, Head, ParamSet};

pub use loss::{bce_with_logits, cross_entropy, ssl_loss};
pub use optim::{
    clip_global_norm, ema_update, global_norm, AdamW, LrSchedule, ScheduleKind, SgdMomentum,
};

/// The five ablation switches; all on is the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Ablation {
    /// self-supervised pre-training
    pub ssl: bool,
    /// random masking of both views
    pub rm: bool,
    /// incentive (imaginary) input
    pub il: bool,
    /// real part in the final projection
    pub p_r: bool,
    /// imaginary part in the final projection
    pub p_i: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            ssl: true,
            rm: true,
            il: true,
            p_r: true,
            p_i: true,
        }
    }
}

impl Ablation {
    pub const TOGGLES: [&'static str; 5] =
        ["no-ssl", "no-rm", "no-il", "p-real-only", "p-imag-only"];

    /// Applies a toggle by its command-line name.
    pub fn apply(&mut self, toggle: &str) -> Result<()> {
        match toggle {
            "no-ssl" => self.ssl = false,
            "no-rm" => self.rm = false,
            "no-il" => self.il = false,
            "p-real-only" => self.p_i = false,
            "p-imag-only" => self.p_r = false,
            other => {
                return Err(Error::Config {
                    key: "toggle".into(),
                    detail: format!(
                        "unknown toggle `{other}` (expected one of {})",
                        Self::TOGGLES.join(", ")
                    ),
                })
            }
        }
        self.pearson_mode().map(|_| ())
    }

    pub fn pearson_mode(&self) -> Result<PearsonMode> {
        match (self.p_r, self.p_i) {
            (true, true) => Ok(PearsonMode::Full),
            (true, false) => Ok(PearsonMode::RealOnly),
            (false, true) => Ok(PearsonMode::ImagOnly),
            (false, false) => Err(Error::Config {
                key: "toggle".into(),
                detail: "p-real-only and p-imag-only cannot both be set".into(),
            }),
        }
    }

    pub fn forward_options(&self) -> Result<ForwardOptions> {
        Ok(ForwardOptions {
            incentive: self.il,
            pearson: self.pearson_mode()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub micro_batch: usize,

    pub pretrain_batch: usize,
    pub pretrain_epochs: usize,
    /// overrides `pretrain_epochs` when non-zero
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_weight_decay: f64,
    pub pretrain_warmup: usize,
    pub mask_rate: f64,
    pub ssl_temperature: f64,
    pub ema_decay: f64,
    pub augment: AugmentSpec,

    pub finetune_batch: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_momentum: f64,
    pub finetune_warmup: usize,
    pub clip_norm: f64,
    /// evaluate the validation split every this many epochs (0 disables)
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ablation: Ablation::default(),
            micro_batch: 64,
            pretrain_batch: 500,
            pretrain_epochs: 100,
            pretrain_steps: 0,
            pretrain_lr: 1e-3,
            pretrain_weight_decay: 0.05,
            pretrain_warmup: 1000,
            mask_rate: 0.2,
            ssl_temperature: 0.5,
            ema_decay: 0.99,
            augment: AugmentSpec::default(),
            finetune_batch: 512,
            finetune_epochs: 100,
            finetune_lr: 0.05,
            finetune_momentum: 0.9,
            finetune_warmup: 100,
            clip_norm: 1.0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: &str| {
            Err(Error::Config {
                key: key.into(),
                detail: detail.into(),
            })
        };
        for (key, v) in [
            ("train.micro_batch", self.micro_batch),
            ("train.pretrain_batch", self.pretrain_batch),
            ("train.finetune_batch", self.finetune_batch),
        ] {
            if v == 0 {
                return bad(key, "must be >= 1");
            }
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad("train.mask_rate", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("train.ema_decay", "must lie in [0, 1]");
        }
        if !(self.ssl_temperature > 0.0) {
            return bad("train.ssl_temperature", "must be > 0");
        }
        if !(self.clip_norm > 0.0) {
            return bad("train.clip_norm", "must be > 0");
        }
        if self.augment.validate().is_err() {
            return bad(
                "train.augment",
                "flip probability or contrast range out of bounds",
            );
        }
        self.ablation.pearson_mode()?;
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let a = &self.ablation;
        let g = &self.augment;
        [
            ("train.seed", self.seed.to_string()),
            ("train.micro_batch", self.micro_batch.to_string()),
            ("train.pretrain_batch", self.pretrain_batch.to_string()),
            ("train.pretrain_epochs", self.pretrain_epochs.to_string()),
            ("train.pretrain_steps", self.pretrain_steps.to_string()),
            ("train.pretrain_lr", self.pretrain_lr.to_string()),
            (
                "train.pretrain_weight_decay",
                self.pretrain_weight_decay.to_string(),
            ),
            ("train.pretrain_warmup", self.pretrain_warmup.to_string()),
            ("train.mask_rate", self.mask_rate.to_string()),
            ("train.ssl_temperature", self.ssl_temperature.to_string()),
            ("train.ema_decay", self.ema_decay.to_string()),
            ("train.crop_padding", g.crop_padding.to_string()),
            ("train.hflip_prob", g.hflip_prob.to_string()),
            ("train.contrast_min", g.contrast.0.to_string()),
            ("train.contrast_max", g.contrast.1.to_string()),
            ("train.finetune_batch", self.finetune_batch.to_string()),
            ("train.finetune_epochs", self.finetune_epochs.to_string()),
            ("train.finetune_lr", self.finetune_lr.to_string()),
            (
                "train.finetune_momentum",
                self.finetune_momentum.to_string(),
            ),
            ("train.finetune_warmup", self.finetune_warmup.to_string()),
            ("train.clip_norm", self.clip_norm.to_string()),
            ("train.eval_every", self.eval_every.to_string()),
            ("ablation.ssl", a.ssl.to_string()),
            ("ablation.rm", a.rm.to_string()),
            ("ablation.il", a.il.to_string()),
            ("ablation.p_r", a.p_r.to_string()),
            ("ablation.p_i", a.p_i.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one `train.*` or `ablation.*` key; unknown keys are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| Error::Config {
                key: key.into(),
                detail: format!("cannot parse `{value}`"),
            })
        }
        match key {
            "train.seed" => self.seed = parse(key, value)?,
            "train.micro_batch" => self.micro_batch = parse(key, value)?,
            "train.pretrain_batch" => self.pretrain_batch = parse(key, value)?,
            "train.pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "train.pretrain_steps" => self.pretrain_steps = parse(key, value)?,
            "train.pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "train.pretrain_weight_decay" => self.pretrain_weight_decay = parse(key, value)?,
            "train.pretrain_warmup" => self.pretrain_warmup = parse(key, value)?,
            "train.mask_rate" => self.mask_rate = parse(key, value)?,
            "train.ssl_temperature" => self.ssl_temperature = parse(key, value)?,
            "train.ema_decay" => self.ema_decay = parse(key, value)?,
            "train.crop_padding" => self.augment.crop_padding = parse(key, value)?,
            "train.hflip_prob" => self.augment.hflip_prob = parse(key, value)?,
            "train.contrast_min" => self.augment.contrast.0 = parse(key, value)?,
            "train.contrast_max" => self.augment.contrast.1 = parse(key, value)?,
            "train.finetune_batch" => self.finetune_batch = parse(key, value)?,
            "train.finetune_epochs" => self.finetune_epochs = parse(key, value)?,
            "train.finetune_lr" => self.finetune_lr = parse(key, value)?,
            "train.finetune_momentum" => self.finetune_momentum = parse(key, value)?,
            "train.finetune_warmup" => self.finetune_warmup = parse(key, value)?,
            "train.clip_norm" => self.clip_norm = parse(key, value)?,
            "train.eval_every" => self.eval_every = parse(key, value)?,
            "ablation.ssl" => self.ablation.ssl = parse(key, value)?,
            "ablation.rm" => self.ablation.rm = parse(key, value)?,
            "ablation.il" => self.ablation.il = parse(key, value)?,
            "ablation.p_r" => self.ablation.p_r = parse(key, value)?,
            "ablation.p_i" => self.ablation.p_i = parse(key, value)?,
            other => {
                return Err(Error::Config {
                    key: other.into(),
                    detail: "unknown training key".into(),
                })
            }
        }
        Ok(())
    }
}

/// One row of the `step,epoch,split,metric,value` log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl LogRow {
    pub fn new(step: usize, epoch: usize, split: &str, metric: &str, value: f64) -> Self {
        Self {
            step,
            epoch,
            split: split.into(),
            metric: metric.into(),
            value,
        }
    }
}

/// The noise stream used for evaluation. It is separate from the training
/// stream so evaluating never shifts training draws, and fixed per seed so
/// evaluation noise is frozen.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15)
}

pub const LOG_HEADER: &str = "step,epoch,split,metric,value";

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.epoch, r.split, r.metric, r.value
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn eval_rows(report: &EvalReport, step: usize, epoch: usize, split: &str) -> Vec<LogRow> {
    let mut rows = vec![
        LogRow::new(step, epoch, split, "acc", report.acc),
        LogRow::new(step, epoch, split, "auc", report.auc),
    ];
    for (c, v) in report.per_class_auc.iter().enumerate() {
        if let Some(v) = v {
            rows.push(LogRow::new(
                step,
                epoch,
                split,
                &format!("auc_class{c}"),
                *v,
            ));
        }
    }
    rows
}

struct Accumulated {
    loss: f64,
    grads: Vec<RealTensor>,
    /// largest gradient magnitude on the extra leaves `loss_of` reported
    extra_grad_max: f64,
}

/// Runs `loss_of` over consecutive micro-batches of `batch` and returns the
/// batch-mean loss with its gradient for every parameter buffer. `loss_of`
/// returns the loss and any further leaves whose gradients should be watched.
fn accumulate<F>(
    model: &CMixerModel,
    batch_len: usize,
    micro: usize,
    mut loss_of: F,
) -> Result<Accumulated>
where
    F: FnMut(&mut Tape, &[Var], std::ops::Range<usize>) -> Result<(Var, Vec<Var>)>,
{
    let mut extra_grad_max: f64 = 0.0;
    let mut grads: Vec<RealTensor> = model
        .params()
        .values()
        .iter()
        .map(|p| RealTensor::zeros(p.shape()))
        .collect();
    let mut total = 0.0;
    let mut start = 0;
    while start < batch_len {
        let end = (start + micro).min(batch_len);
        let weight = (end - start) as f64 / batch_len as f64;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let (loss, extra) = loss_of(&mut tape, &vars, start..end)?;
        total += weight * tape.value(loss).item();
        let g = tape.backward(loss)?;
        for v in extra {
            extra_grad_max = extra_grad_max.max(g.get(v).map_or(0.0, RealTensor::max_abs));
        }
        for (acc, &v) in grads.iter_mut().zip(&vars) {
            let gv = g.get(v).expect("every parameter is a leaf");
            for (a, &b) in acc.data_mut().iter_mut().zip(gv.data()) {
                *a += weight * b;
            }
        }
        start = end;
    }
    Ok(Accumulated {
        loss: total,
        grads,
        extra_grad_max,
    })
}

fn eps_like<R: Rng + ?Sized>(x: &RealTensor, on: bool, rng: &mut R) -> RealTensor {
    if on {
        standard_normal(x.shape(), rng)
    } else {
        RealTensor::zeros(&[0])
    }
}

/// What the observer sees after each pre-training step.
pub struct PretrainStep<'a> {
    pub step: usize,
    pub loss: f64,
    /// largest gradient magnitude that reached any target-tower buffer
    pub target_grad_max: f64,
    pub live: &'a ParamSet,
    pub target: &'a ParamSet,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// EMA target weights at the end of the run
    pub ema: ParamSet,
    pub losses: Vec<f64>,
    pub log: Vec<LogRow>,
}

/// Self-supervised pre-training on the images of the training splits.
pub fn pretrain<R: Rng + ?Sized>(
    model: &mut CMixerModel,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<PretrainOutcome> {
    pretrain_observed(model, bundle, cfg, rng, &mut |_| {})
}

/// [`pretrain`] with a callback after every optimizer and EMA update.
///
/// Each step masks every image (anchor view) and masks an augmented copy
/// (target view); the live model embeds the anchor, the EMA model the target,
/// and the live model follows the gradient of [`ssl_loss`]. Without the `ssl`
/// toggle nothing is trained; without `rm` neither view is masked.
pub fn pretrain_observed<R: Rng + ?Sized>(
    model: &mut CMixerModel,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    rng: &mut R,
    observer: &mut dyn FnMut(&PretrainStep),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let mut pool = bundle.indices(Split::TrainLabeled);
    pool.extend(bundle.indices(Split::TrainUnlabeled));
    pool.sort_unstable();
    if pool.is_empty() {
        return Err(Error::contract("pre-training needs training images"));
    }
    if !cfg.ablation.ssl {
        return Ok(PretrainOutcome {
            ema: model.params().clone(),
            losses: Vec::new(),
            log: Vec::new(),
        });
    }
    let opts = cfg.ablation.forward_options()?;
    let batch = cfg.pretrain_batch.min(pool.len());
    let per_epoch = pool.len().div_ceil(batch);
    let total = if cfg.pretrain_steps > 0 {
        cfg.pretrain_steps
    } else {
        cfg.pretrain_epochs * per_epoch
    };
    let schedule = LrSchedule::new(
        ScheduleKind::WarmupLinear,
        cfg.pretrain_lr,
        cfg.pretrain_warmup,
        total,
    )?;
    let mut opt = AdamW::new(model.params().values(), cfg.pretrain_weight_decay);
    let mut target = model.clone();
    let mask = MaskSpec {
        rate: if cfg.ablation.rm { cfg.mask_rate } else { 0.0 },
        fill: 0,
    };

    let mut order = pool.clone();
    let mut losses = Vec::with_capacity(total);
    let mut log = Vec::new();
    for step in 0..total {
        let (epoch, slot) = (step / per_epoch, step % per_epoch);
        if slot == 0 {
            order.copy_from_slice(&pool);
            order.shuffle(rng);
        }
        let ids = &order[slot * batch..((slot + 1) * batch).min(order.len())];

        let mut anchors: Vec<Image> = Vec::with_capacity(ids.len());
        let mut targets: Vec<Image> = Vec::with_capacity(ids.len());
        for &i in ids {
            let img = bundle.image(i);
            anchors.push(random_mask(&img, &mask, rng)?);
            let aug = augment_target(&img, &cfg.augment, rng)?;
            targets.push(random_mask(&aug, &mask, rng)?);
        }
        let xa = to_tensor(&anchors)?;
        let xt = to_tensor(&targets)?;
        let ea = eps_like(&xa, opts.incentive, rng);
        let et = eps_like(&xt, opts.incentive, rng);

        let acc = accumulate(model, ids.len(), cfg.micro_batch, |tape, vars, range| {
            let n = range.len();
            let rows = |x: &RealTensor| x.rows(range.start, n);
            let eps_rows = |e: &RealTensor| {
                if opts.incentive {
                    e.rows(range.start, n)
                } else {
                    Ok(e.clone())
                }
            };
            let za = model.forward(tape, vars, &rows(&xa)?, &eps_rows(&ea)?, Head::Ssl, opts)?;
            // the target tower is bound as leaves only so the stop-gradient can be verified
            let tvars = target.bind(tape, true);
            let zt = target.forward(tape, &tvars, &rows(&xt)?, &eps_rows(&et)?, Head::Ssl, opts)?;
            Ok((ssl_loss(tape, za, zt, cfg.ssl_temperature)?, tvars))
        })?;
        let (loss, grads, target_grad_max) = (acc.loss, acc.grads, acc.extra_grad_max);

        let lr = schedule.lr_at(step)?;
        opt.step(model.params_mut().values_mut(), &grads, lr)?;
        ema_update(
            target.params_mut().values_mut(),
            model.params().values(),
            cfg.ema_decay,
        )?;

        losses.push(loss);
        log.push(LogRow::new(step, epoch, "pretrain", "ssl_loss", loss));
        log.push(LogRow::new(step, epoch, "pretrain", "lr", lr));
        log.push(LogRow::new(
            step,
            epoch,
            "pretrain",
            "target_grad_max",
            target_grad_max,
        ));
        observer(&PretrainStep {
            step,
            loss,
            target_grad_max,
            live: model.params(),
            target: target.params(),
        });
    }
    Ok(PretrainOutcome {
        ema: target.params().clone(),
        losses,
        log,
    })
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// mean training loss per epoch
    pub epoch_losses: Vec<f64>,
    /// training accuracy per epoch, from the forward passes of that epoch
    pub epoch_train_acc: Vec<f64>,
    /// largest |score| the classifier produced during the run
    pub max_abs_logit: f64,
    pub log: Vec<LogRow>,
}

/// Supervised training on the labeled training split with momentum SGD, a
/// warmup-cosine schedule and global-norm clipping. Multilabel tasks use
/// binary cross-entropy per label, all others softmax cross-entropy.
pub fn finetune<R: Rng + ?Sized>(
    model: &mut CMixerModel,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let labeled = bundle.indices(Split::TrainLabeled);
    if labeled.is_empty() {
        return Err(Error::contract(
            "fine-tuning needs labeled training samples",
        ));
    }
    if model.config().num_classes != bundle.num_classes {
        return Err(Error::contract(format!(
            "model has {} outputs, dataset {} classes",
            model.config().num_classes,
            bundle.num_classes
        )));
    }
    let opts = cfg.ablation.forward_options()?;
    let multilabel = bundle.task == TaskKind::Multilabel;
    let k = bundle.num_classes;
    let batch = cfg.finetune_batch.min(labeled.len());
    let per_epoch = labeled.len().div_ceil(batch);
    let total = cfg.finetune_epochs * per_epoch;
    let schedule = LrSchedule::new(
        ScheduleKind::WarmupCosine,
        cfg.finetune_lr,
        cfg.finetune_warmup,
        total,
    )?;
    let mut opt = SgdMomentum::new(model.params().values(), cfg.finetune_momentum);
    let mut eval_rng = eval_rng(cfg.seed);

    let mut order = labeled.clone();
    let mut out = FinetuneOutcome {
        epoch_losses: Vec::with_capacity(cfg.finetune_epochs),
        epoch_train_acc: Vec::with_capacity(cfg.finetune_epochs),
        max_abs_logit: 0.0,
        log: Vec::new(),
    };
    let mut step = 0;
    for epoch in 0..cfg.finetune_epochs {
        order.copy_from_slice(&labeled);
        order.shuffle(rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0.0, 0usize);
        for ids in order.chunks(batch) {
            let images: Vec<Image> = ids.iter().map(|&i| bundle.image(i)).collect();
            let x = to_tensor(&images)?;
            let eps = eps_like(&x, opts.incentive, rng);
            let labels: Vec<u32> = ids.iter().flat_map(|&i| bundle.label(i)).copied().collect();

            let mut batch_scores: Vec<f64> = Vec::with_capacity(ids.len() * k);
            let acc = accumulate(model, ids.len(), cfg.micro_batch, |tape, vars, range| {
                let n = range.len();
                let e = if opts.incentive {
                    eps.rows(range.start, n)?
                } else {
                    eps.clone()
                };
                let y = model.forward(
                    tape,
                    vars,
                    &x.rows(range.start, n)?,
                    &e,
                    Head::Classify,
                    opts,
                )?;
                batch_scores.extend_from_slice(tape.value(y).data());
                let loss = if multilabel {
                    let t = labels[range.start * k..range.end * k]
                        .iter()
                        .map(|&l| l as f64)
                        .collect();
                    bce_with_logits(tape, y, &RealTensor::new(vec![n, k], t)?)?
                } else {
                    let l: Vec<usize> = labels[range].iter().map(|&l| l as usize).collect();
                    cross_entropy(tape, y, &l)?
                };
                Ok((loss, Vec::new()))
            })?;
            let (loss, mut grads) = (acc.loss, acc.grads);
            let pre = clip_global_norm(&mut grads, cfg.clip_norm)?;
            let post = global_norm(&grads);
            let lr = schedule.lr_at(step)?;
            opt.step(model.params_mut().values_mut(), &grads, lr)?;

            let scores = RealTensor::new(vec![ids.len(), k], batch_scores)?;
            out.max_abs_logit = out.max_abs_logit.max(scores.max_abs());
            let report_acc = if multilabel {
                metrics::multilabel_accuracy(scores.data(), &labels, k)?
            } else {
                let truth: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
                metrics::accuracy(&metrics::argmax_rows(&scores), &truth)?
            };
            loss_sum += loss * ids.len() as f64;
            correct += report_acc * ids.len() as f64;
            seen += ids.len();

            out.log
                .push(LogRow::new(step, epoch, "train", "loss", loss));
            out.log.push(LogRow::new(step, epoch, "train", "lr", lr));
            out.log
                .push(LogRow::new(step, epoch, "train", "grad_norm_pre", pre));
            out.log
                .push(LogRow::new(step, epoch, "train", "grad_norm_post", post));
            step += 1;
        }
        let (epoch_loss, epoch_acc) = (loss_sum / seen as f64, correct / seen as f64);
        out.epoch_losses.push(epoch_loss);
        out.epoch_train_acc.push(epoch_acc);
        out.log
            .push(LogRow::new(step, epoch, "train", "epoch_loss", epoch_loss));
        out.log
            .push(LogRow::new(step, epoch, "train", "epoch_acc", epoch_acc));

        let last = epoch + 1 == cfg.finetune_epochs;
        if cfg.eval_every > 0
            && ((epoch + 1) % cfg.eval_every == 0 || last)
            && bundle.count(Split::Val) > 0
        {
            match metrics::evaluate(model, bundle, Split::Val, opts, &mut eval_rng) {
                Ok(report) => out.log.extend(eval_rows(&report, step, epoch, "val")),
                Err(Error::UndefinedMetric(why)) => {
                    log::warn!("epoch {epoch}: validation metric undefined: {why}")
                }
                Err(e) => return Err(e),
            }
        }
        log::info!("epoch {epoch}: loss {epoch_loss:.5} train acc {epoch_acc:.4}");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::model::CMixerConfig;

    fn small_setup(seed: u64) -> (CMixerModel, DatasetBundle) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bundle = synth_dataset(2, 20, 8, &mut rng).unwrap();
        let cfg = CMixerConfig::new(1, 4, 4, 0, 0, 2, 1, 8)
            .unwrap()
            .with_incentive_hidden(4);
        (CMixerModel::new(cfg, &mut rng).unwrap(), bundle)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            pretrain_batch: 8,
            pretrain_steps: 3,
            pretrain_warmup: 1,
            finetune_batch: 8,
            finetune_epochs: 2,
            finetune_warmup: 1,
            micro_batch: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn toggles_map_to_switches() {
        let mut a = Ablation::default();
        a.apply("p-real-only").unwrap();
        assert_eq!(a.pearson_mode().unwrap(), PearsonMode::RealOnly);
        assert!(a.apply("p-imag-only").is_err());
        assert!(matches!(
            Ablation::default().apply("no-foo"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn config_kv_round_trip_and_unknown_key() {
        let mut cfg = quick();
        cfg.ablation.il = false;
        let mut back = TrainConfig::default();
        for (k, v) in cfg.to_kv() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(
            matches!(back.set("train.bogus", "1"), Err(Error::Config { key, .. }) if key == "train.bogus")
        );
    }

    #[test]
    fn no_ssl_pretraining_leaves_weights_untouched() {
        let (mut model, bundle) = small_setup(1);
        let before = model.params().clone();
        let mut cfg = quick();
        cfg.ablation.ssl = false;
        let out = pretrain(&mut model, &bundle, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(model.params(), &before);
        assert_eq!(out.ema, before);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn micro_batching_does_not_change_the_step() {
        let run = |micro| {
            let (mut model, bundle) = small_setup(2);
            let cfg = TrainConfig {
                micro_batch: micro,
                ..quick()
            };
            pretrain(&mut model, &bundle, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            model.params().clone()
        };
        let (a, b) = (run(8), run(3));
        for (x, y) in a.values().iter().zip(b.values()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
            }
        }
    }

    #[test]
    fn pretrain_stops_target_gradient() {
        let (mut model, bundle) = small_setup(4);
        let mut max_seen: f64 = 0.0;
        pretrain_observed(
            &mut model,
            &bundle,
            &quick(),
            &mut ChaCha8Rng::seed_from_u64(1),
            &mut |s| max_seen = max_seen.max(s.target_grad_max),
        )
        .unwrap();
        assert_eq!(max_seen, 0.0);
    }

    #[test]
    fn finetune_is_reproducible_and_clips() {
        let run = || {
            let (mut model, bundle) = small_setup(5);
            let cfg = TrainConfig {
                clip_norm: 0.01,
                ..quick()
            };
            finetune(&mut model, &bundle, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.log, b.log);
        for r in a.log.iter().filter(|r| r.metric == "grad_norm_post") {
            assert!(r.value <= 0.01 + 1e-9);
        }
        assert!(a.log.iter().any(|r| r.split == "val" && r.metric == "auc"));
        assert!(a.max_abs_logit < 1.0);
    }

    #[test]
    fn finetune_requires_labels_and_matching_head() {
        let (mut model, mut bundle) = small_setup(6);
        bundle.num_classes = 3;
        assert!(matches!(
            finetune(
                &mut model,
                &bundle,
                &quick(),
                &mut ChaCha8Rng::seed_from_u64(0)
            ),
            Err(Error::Contract(_))
        ));
        bundle.num_classes = 2;
        bundle
            .splits
            .iter_mut()
            .filter(|s| **s == Split::TrainLabeled)
            .for_each(|s| *s = Split::Test);
        assert!(matches!(
            finetune(
                &mut model,
                &bundle,
                &quick(),
                &mut ChaCha8Rng::seed_from_u64(0)
            ),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn log_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_log_csv(&[LogRow::new(0, 0, "train", "loss", 0.5)], &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(path).unwrap(),
            "step,epoch,split,metric,value\n0,0,train,loss,0.5\n"
        );
    }
}
