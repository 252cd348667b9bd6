//! Command bodies. Each returns the names of the artifacts it wrote into the
//! output directory; the caller checksums them into the manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cmixer::ctensor::OpKind;
use cmixer::data::{self, corrupt_labels, make_semi, synth_dataset, DatasetBundle, Split};
use cmixer::gradsuite::{self, SuiteReport};
use cmixer::metrics::{predict_samples, report_from_scores};
use cmixer::model::{checkpoint, standard_normal, CMixerModel};
use cmixer::train::{self, eval_rng, eval_rows, write_log_csv, LOG_HEADER};
use cmixer::{Error, Result};

use crate::settings::Settings;
use crate::Failure;

pub const DEFAULT_CORRUPT_RATE: f64 = 0.1;
pub const HIST_BINS: usize = 64;
pub const HIST_RANGE: (f64, f64) = (-3.0, 3.0);

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Refuses to write an artifact over one of the run's inputs.
fn guard_inputs(s: &Settings, out: &Path, artifacts: &[&str]) -> Result<()> {
    let inputs: Vec<PathBuf> = ["data.path", "run.checkpoint"]
        .iter()
        .filter_map(|k| s.path(k))
        .filter_map(|p| p.canonicalize().ok())
        .collect();
    for name in artifacts {
        if let Ok(target) = out.join(name).canonicalize() {
            if inputs.contains(&target) {
                return Err(Error::Config {
                    key: "--out".into(),
                    detail: format!("{name} would overwrite an input file"),
                });
            }
        }
    }
    Ok(())
}

fn load_data(s: &Settings) -> Result<DatasetBundle> {
    let path = s.require_path("data.path")?;
    let bundle = data::load_npz(&path)?;
    log::info!("loaded {} samples from {}", bundle.len(), path.display());
    Ok(bundle)
}

/// The starting model: `run.checkpoint` when set, otherwise a fresh one
/// drawn from `rng`. The architecture used is recorded in the settings.
fn init_model(
    s: &mut Settings,
    bundle: &DatasetBundle,
    rng: &mut ChaCha8Rng,
) -> Result<CMixerModel> {
    let model = match s.path("run.checkpoint") {
        Some(path) => {
            let model = checkpoint::load(&path)?;
            log::info!("loaded checkpoint {}", path.display());
            model
        }
        None => CMixerModel::new(s.model_config(bundle)?, rng)?,
    };
    s.record_model(model.config());
    log::info!("model has {} parameters", model.param_count());
    Ok(model)
}

pub fn synth(s: &mut Settings, out: &Path) -> Result<Vec<String>, Failure> {
    let seed: u64 = s.parse("train.seed")?;
    let bundle = synth_dataset(
        s.parse("synth.classes")?,
        s.parse("synth.per_class")?,
        s.parse("synth.side")?,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    data::write_npz(&bundle, &out.join("synth.npz"))?;
    println!(
        "wrote {} samples to {}",
        bundle.len(),
        out.join("synth.npz").display()
    );
    Ok(vec!["synth.npz".into()])
}

pub fn pretrain(s: &mut Settings, out: &Path) -> Result<Vec<String>, Failure> {
    let artifacts = ["checkpoint.npz", "ema.npz", "pretrain_log.csv"];
    guard_inputs(s, out, &artifacts)?;
    let cfg = s.train_config()?;
    let bundle = load_data(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(s, &bundle, &mut rng)?;
    let outcome = train::pretrain(&mut model, &bundle, &cfg, &mut rng)?;
    let ema = CMixerModel::from_params(model.config().clone(), outcome.ema)?;
    checkpoint::save(&model, &out.join(artifacts[0]))?;
    checkpoint::save(&ema, &out.join(artifacts[1]))?;
    write_log_csv(&outcome.log, &out.join(artifacts[2]))?;
    match (outcome.losses.first(), outcome.losses.last()) {
        (Some(a), Some(b)) => println!(
            "pretrain: {} steps, ssl loss {a:.6} -> {b:.6}",
            outcome.losses.len()
        ),
        _ => println!("pretrain: skipped (no-ssl)"),
    }
    Ok(artifacts.map(String::from).to_vec())
}

pub fn finetune(s: &mut Settings, out: &Path) -> Result<Vec<String>, Failure> {
    let artifacts = ["checkpoint.npz", "finetune_log.csv"];
    guard_inputs(s, out, &artifacts)?;
    let cfg = s.train_config()?;
    let bundle = load_data(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(s, &bundle, &mut rng)?;
    let mut outcome = train::finetune(&mut model, &bundle, &cfg, &mut rng)?;
    let steps = outcome.log.iter().map(|r| r.step).max().unwrap_or(0);
    let epochs = outcome.epoch_losses.len();
    if bundle.count(Split::Test) > 0 {
        let opts = cfg.ablation.forward_options()?;
        let report =
            cmixer::metrics::evaluate(&model, &bundle, Split::Test, opts, &mut eval_rng(cfg.seed))?;
        println!("finetune: test acc {:.4} auc {:.4}", report.acc, report.auc);
        outcome
            .log
            .extend(eval_rows(&report, steps, epochs.saturating_sub(1), "test"));
    }
    if let Some(acc) = outcome.epoch_train_acc.last() {
        println!("finetune: {epochs} epochs, final train acc {acc:.4}");
    }
    checkpoint::save(&model, &out.join(artifacts[0]))?;
    write_log_csv(&outcome.log, &out.join(artifacts[1]))?;
    Ok(artifacts.map(String::from).to_vec())
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::TrainLabeled),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config {
            key: "eval.split".into(),
            detail: format!("expected train, val or test, got `{other}`"),
        }),
    }
}

pub fn eval(s: &mut Settings, out: &Path) -> Result<Vec<String>, Failure> {
    let artifacts = ["eval.csv", "scores.csv"];
    guard_inputs(s, out, &artifacts)?;
    let cfg = s.train_config()?;
    let split = parse_split(s.get("eval.split"))?;
    let ckpt = s.require_path("run.checkpoint")?;
    let model = checkpoint::load(&ckpt)?;
    s.record_model(model.config());
    let bundle = load_data(s)?;
    let indices = bundle.indices(split);
    if indices.is_empty() {
        return Err(Error::Contract(format!("split {split:?} is empty")).into());
    }
    let scores = predict_samples(
        &model,
        &bundle,
        &indices,
        cfg.ablation.forward_options()?,
        &mut eval_rng(cfg.seed),
    )?;
    let labels: Vec<u32> = indices
        .iter()
        .flat_map(|&i| bundle.label(i))
        .copied()
        .collect();
    let report = report_from_scores(&scores, &labels, bundle.label_width, bundle.task)?;

    let mut text = format!("{LOG_HEADER}\n");
    for row in report.csv_rows(0, 0, s.get("eval.split")) {
        text.push_str(&row);
        text.push('\n');
    }
    write_text(&out.join(artifacts[0]), &text)?;

    let k = scores.shape()[1];
    let mut text = String::from("index,label");
    for c in 0..k {
        let _ = write!(text, ",score{c}");
    }
    text.push('\n');
    for (row, &i) in indices.iter().enumerate() {
        let label: Vec<String> = bundle.label(i).iter().map(u32::to_string).collect();
        let _ = write!(text, "{i},{}", label.join(";"));
        for v in &scores.data()[row * k..(row + 1) * k] {
            let _ = write!(text, ",{v}");
        }
        text.push('\n');
    }
    write_text(&out.join(artifacts[1]), &text)?;
    println!(
        "eval {}: acc {:.4} auc {:.4} on {} samples",
        s.get("eval.split"),
        report.acc,
        report.auc,
        report.samples
    );
    Ok(artifacts.map(String::from).to_vec())
}

pub fn splits(s: &mut Settings, out: &Path) -> Result<Vec<String>, Failure> {
    let artifacts = ["splits.npz", "corrupted.csv"];
    guard_inputs(s, out, &artifacts)?;
    let frac: f64 = s.parse("splits.semi_frac")?;
    let rate: f64 = s.parse("splits.corrupt_rate")?;
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Config {
            key: "splits.semi_frac".into(),
            detail: format!("{frac} outside (0, 1]"),
        }
        .into());
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config {
            key: "splits.corrupt_rate".into(),
            detail: format!("{rate} outside [0, 1]"),
        }
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.parse("train.seed")?);
    let mut bundle = load_data(s)?;
    if frac < 1.0 {
        let (semi, report) = make_semi(&bundle, frac, &mut rng)?;
        log::info!("semi split moved {} samples to test", report.moved_to_test);
        bundle = semi;
    }
    // sidecar indices refer to sample positions in the written NPZ
    let mut text = String::from("index,old,new\n");
    let mut corrupted = 0;
    if rate > 0.0 {
        let (weak, record) = corrupt_labels(&bundle, rate, &mut rng)?;
        let mut position = vec![0; weak.len()];
        for (pos, i) in data::storage_order(&weak).into_iter().enumerate() {
            position[i] = pos;
        }
        let join = |l: &[u32]| l.iter().map(u32::to_string).collect::<Vec<_>>().join(";");
        let mut rows: Vec<(usize, String)> = record
            .indices
            .iter()
            .zip(&record.old)
            .zip(&record.new)
            .map(|((&i, old), new)| (position[i], format!("{},{}", join(old), join(new))))
            .collect();
        rows.sort_unstable();
        for (pos, labels) in rows {
            let _ = writeln!(text, "{pos},{labels}");
        }
        corrupted = record.indices.len();
        bundle = weak;
    }
    data::write_npz(&bundle, &out.join(artifacts[0]))?;
    write_text(&out.join(artifacts[1]), &text)?;
    println!(
        "splits: labeled {} unlabeled {} val {} test {} corrupted {corrupted}",
        bundle.count(Split::TrainLabeled),
        bundle.count(Split::TrainUnlabeled),
        bundle.count(Split::Val),
        bundle.count(Split::Test),
    );
    Ok(artifacts.map(String::from).to_vec())
}

/// Bin of `v` among [`HIST_BINS`] equal bins over [`HIST_RANGE`]; values
/// outside the range land in the edge bins.
pub fn hist_bin(v: f64) -> usize {
    let (lo, hi) = HIST_RANGE;
    let t = ((v - lo) / (hi - lo) * HIST_BINS as f64).floor();
    if t.is_nan() {
        0
    } else {
        t.clamp(0.0, (HIST_BINS - 1) as f64) as usize
    }
}

pub fn noise_stats(s: &mut Settings, out: &Path) -> Result<Vec<String>, Failure> {
    let artifacts = ["noise_stats.csv"];
    guard_inputs(s, out, &artifacts)?;
    let seed: u64 = s.parse("train.seed")?;
    let n: usize = s.parse("noise.samples")?;
    let bundle = load_data(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = init_model(s, &bundle, &mut rng)?;
    let count = n.min(bundle.len());
    let images: Vec<_> = (0..count).map(|i| bundle.image(i)).collect();
    let x = data::to_tensor(&images)?;
    let params = model.noise_params(&x)?;
    let eps = standard_normal(x.shape(), &mut eval_rng(seed));
    let per = bundle.image_len();

    let mut text = String::from("index,mu,sigma");
    for b in 0..HIST_BINS {
        let _ = write!(text, ",bin{b}");
    }
    text.push('\n');
    for (i, &(mu, sigma)) in params.iter().enumerate() {
        let mut hist = [0usize; HIST_BINS];
        for &e in &eps.data()[i * per..(i + 1) * per] {
            hist[hist_bin(mu + sigma * e)] += 1;
        }
        let _ = write!(text, "{i},{mu},{sigma}");
        for h in hist {
            let _ = write!(text, ",{h}");
        }
        text.push('\n');
    }
    write_text(&out.join(artifacts[0]), &text)?;
    println!("noise-stats: {count} images");
    Ok(artifacts.map(String::from).to_vec())
}

/// Renders the per-check table printed by `gradcheck`.
pub fn render_suite(report: &SuiteReport) -> String {
    let mut text = String::from("check,max_rel_error,checked,skipped_kinks,status\n");
    for e in &report.entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        let _ = writeln!(
            text,
            "{},{:.3e},{},{},{status}",
            e.name, e.max_rel_error, e.checked, e.skipped_kinks
        );
    }
    text
}

pub fn gradcheck(out: Option<&Path>, fault: Option<&str>) -> Result<(), Failure> {
    let fault = match fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Error::Config {
            key: "--inject-fault".into(),
            detail: format!("unknown op `{name}`"),
        })?),
        None => None,
    };
    let started = std::time::Instant::now();
    let report = gradsuite::run_suite(fault)?;
    let table = render_suite(&report);
    print!("{table}");
    if let Some(w) = report.worst() {
        println!("worst: {} ({:.3e})", w.name, w.max_rel_error);
    }
    println!(
        "tolerance {:e}, {:.1}s",
        gradsuite::TOLERANCE,
        started.elapsed().as_secs_f64()
    );
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_text(&dir.join("gradcheck.csv"), &table)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failing().iter().map(|e| e.name.as_str()).collect();
        Err(Failure::Check(format!(
            "gradient check failed: {}",
            names.join(", ")
        )))
    }
}
