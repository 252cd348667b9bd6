//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails that is not a documented gap.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmixer::ctensor::{complex::eval::complex_affine, ComplexTensor, RealTensor};
use cmixer::data::{
    self, random_mask, synth_dataset, DatasetBundle, Image, MaskSpec, Split, TaskKind,
};
use cmixer::metrics::auc_binary;
use cmixer::model::{checkpoint, param_count, CMixerConfig, CMixerModel};
use cmixer::train::{finetune, pretrain, pretrain_observed, TrainConfig};
use common::*;

/// Criteria that cannot pass as specified; see the README.
const KNOWN_GAPS: &[u32] = &[6, 10];

// pinned tolerances
const GRAD_TOL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 60.0;
const AFFINE_REL: f64 = 1e-12;
const PARAM_BAND: (usize, usize) = (5_500_000, 6_500_000);
const OVERFIT_ACC: f64 = 0.99;
const OVERFIT_SECONDS: f64 = 300.0;
const SSL_DROP: f64 = 0.20;
const EMA_TOL: f64 = 1e-9;
const E2E_AUC: f64 = 0.70;
const E2E_SECONDS: f64 = 1800.0;

type Criterion = (u32, &'static str, Box<dyn Fn() -> Outcome>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn smoke_config(classes: usize, side: usize) -> CMixerConfig {
    CMixerConfig::new(2, 16, 4, 0, 0, classes, 1, side)
        .unwrap()
        .with_incentive_hidden(16)
}

fn c1_gradients() -> Outcome {
    let started = Instant::now();
    let r = cmixer(&["gradcheck"]);
    let secs = started.elapsed().as_secs_f64();
    let worst = r
        .stdout
        .lines()
        .find(|l| l.starts_with("worst:"))
        .unwrap_or("worst: ?")
        .to_string();
    let faulty = cmixer(&["gradcheck", "--inject-fault", "matmul"]);
    let caught = faulty.code == 1 && faulty.stderr.contains("matmul");
    outcome(
        r.code == 0 && secs < GRAD_SECONDS && caught,
        format!("exit {}, {worst}, {secs:.1}s (tol {GRAD_TOL:e}); injected matmul fault caught: {caught}", r.code),
    )
}

fn c2_complex_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (m, n, k) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        );
        let mut draw =
            |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-10.0..10.0)).collect() };
        let (a, b, hr, hi) = (draw(m * n), draw(m * n), draw(n * k), draw(n * k));
        let got = complex_affine(
            &RealTensor::new(vec![m, n], a.clone()).unwrap(),
            &RealTensor::new(vec![m, n], b.clone()).unwrap(),
            &ComplexTensor::new(
                RealTensor::new(vec![n, k], hr.clone()).unwrap(),
                RealTensor::new(vec![n, k], hi.clone()).unwrap(),
            )
            .unwrap(),
            None,
        )
        .unwrap();
        for i in 0..m {
            for j in 0..k {
                let want: Complex64 = (0..n)
                    .map(|p| {
                        Complex64::new(a[i * n + p], b[i * n + p])
                            * Complex64::new(hr[p * k + j], hi[p * k + j])
                    })
                    .sum();
                let g = Complex64::new(got.re.data()[i * k + j], got.im.data()[i * k + j]);
                let scale: f64 = (0..n)
                    .map(|p| {
                        Complex64::new(a[i * n + p], b[i * n + p]).norm()
                            * Complex64::new(hr[p * k + j], hi[p * k + j]).norm()
                    })
                    .sum();
                worst = worst.max((g - want).norm() / scale.max(f64::MIN_POSITIVE));
            }
        }
    }
    outcome(
        worst <= AFFINE_REL,
        format!("1000 instances, worst relative error {worst:.2e}"),
    )
}

fn c3_param_budget() -> Outcome {
    let cfg = CMixerConfig::medmnist(9, 3);
    let n = param_count(&cfg);
    outcome(
        (PARAM_BAND.0..=PARAM_BAND.1).contains(&n),
        format!(
            "{n} parameters (8 layers, C=218, S={}, D_S={}, D_C={})",
            cfg.seq_len, cfg.token_hidden, cfg.channel_hidden
        ),
    )
}

fn c4_auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut tested = 0;
    while tested < 1000 {
        let n = rng.random_range(2..60);
        // coarse scores force ties
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..8) as f64 / 4.0)
            .collect();
        let pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let p = pos.iter().filter(|&&b| b).count();
        if p == 0 || p == n {
            continue;
        }
        tested += 1;
        let mut twice = 0u64;
        for i in (0..n).filter(|&i| pos[i]) {
            for j in (0..n).filter(|&j| !pos[j]) {
                twice += if scores[i] > scores[j] {
                    2
                } else if scores[i] == scores[j] {
                    1
                } else {
                    0
                };
            }
        }
        let oracle = twice as f64 / (2 * p * (n - p)) as f64;
        if auc_binary(&scores, &pos).unwrap() != oracle {
            mismatches += 1;
        }
    }
    let worked = auc_binary(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    outcome(
        mismatches == 0 && worked == 0.75,
        format!("{mismatches} mismatches in 1000 tied instances; worked example {worked}"),
    )
}

fn c5_overfit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bundle = synth_dataset(2, 100, 28, &mut rng).unwrap();
    let mut model = CMixerModel::new(smoke_config(2, 28), &mut rng).unwrap();
    let cfg = TrainConfig {
        finetune_epochs: 200,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let out = finetune(&mut model, &bundle, &cfg, &mut rng).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let reached = out.epoch_train_acc.iter().position(|&a| a >= OVERFIT_ACC);
    outcome(
        reached.is_some() && secs < OVERFIT_SECONDS && out.max_abs_logit < 1.0,
        format!(
            "train acc >= {OVERFIT_ACC} first at epoch {}, {secs:.1}s, max |logit| = 1 - {:.2e}",
            reached.map_or("never".into(), |e| (e + 1).to_string()),
            1.0 - out.max_abs_logit
        ),
    )
}

fn c6_ssl() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bundle = synth_dataset(2, 100, 28, &mut rng).unwrap();
    let mut model = CMixerModel::new(smoke_config(2, 28), &mut rng).unwrap();
    let cfg = TrainConfig {
        pretrain_steps: 50,
        pretrain_batch: 64,
        pretrain_warmup: 5,
        ..TrainConfig::default()
    };
    let d = cfg.ema_decay;
    let mut prev_target = model.params().clone();
    let (mut max_target_grad, mut ema_err) = (0.0f64, 0.0f64);
    let out = pretrain_observed(&mut model, &bundle, &cfg, &mut rng, &mut |step| {
        max_target_grad = max_target_grad.max(step.target_grad_max);
        for ((t, p), l) in step
            .target
            .values()
            .iter()
            .zip(prev_target.values())
            .zip(step.live.values())
        {
            for ((&t, &p), &l) in t.data().iter().zip(p.data()).zip(l.data()) {
                ema_err = ema_err.max((t - (d * p + (1.0 - d) * l)).abs());
            }
        }
        prev_target = step.target.clone();
    })
    .unwrap();
    let l = &out.losses;
    let smoothed = l[l.len() - 5..].iter().sum::<f64>() / 5.0;
    let drop = 1.0 - smoothed / l[0];
    outcome(
        drop >= SSL_DROP && max_target_grad == 0.0 && ema_err <= EMA_TOL,
        format!(
            "{} steps, loss {:.4} -> {smoothed:.4} (5-step mean), drop {:.1}% (need {:.0}%); target grad max {max_target_grad}; EMA error {ema_err:.1e}",
            l.len(),
            l[0],
            drop * 100.0,
            SSL_DROP * 100.0
        ),
    )
}

fn c7_masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let image = Image::new(28, 28, 1, vec![200; 28 * 28]).unwrap();
    let spec = MaskSpec::default();
    let mut zeroed = 0usize;
    for _ in 0..100 {
        zeroed += random_mask(&image, &spec, &mut rng)
            .unwrap()
            .data
            .iter()
            .filter(|&&v| v == 0)
            .count();
    }
    let n = (100 * 28 * 28) as f64;
    let frac = zeroed as f64 / n;
    let sigma = (spec.rate * (1.0 - spec.rate) / n).sqrt();
    outcome(
        (frac - spec.rate).abs() <= 3.0 * sigma,
        format!(
            "zeroed fraction {frac:.5}, 3-sigma interval [{:.5}, {:.5}]",
            spec.rate - 3.0 * sigma,
            spec.rate + 3.0 * sigma
        ),
    )
}

fn c8_ablations(dir: &Path) -> Outcome {
    let (config, data) = setup(dir);
    let mut runs = vec![("full".to_string(), Vec::<&str>::new())];
    for t in cmixer::train::Ablation::TOGGLES {
        runs.push((t.to_string(), vec!["--toggle", t]));
    }
    let mut manifests = Vec::new();
    let mut scores = Vec::new();
    for (name, toggle) in &runs {
        let pre = dir.join(format!("{name}-pre"));
        let ft = dir.join(format!("{name}-ft"));
        let ev = dir.join(format!("{name}-ev"));
        let base = |out: &Path| -> Vec<String> {
            let mut a: Vec<String> = ["--config", s(&config), "--data", s(&data), "--out", s(out)]
                .iter()
                .map(|v| v.to_string())
                .collect();
            a.extend(toggle.iter().map(|v| v.to_string()));
            a
        };
        let call = |cmd: &str, mut args: Vec<String>, ckpt: Option<&Path>| {
            args.insert(0, cmd.to_string());
            if let Some(c) = ckpt {
                args.extend(["--checkpoint".to_string(), s(c).to_string()]);
            }
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            ok(&refs);
        };
        call("pretrain", base(&pre), None);
        call("finetune", base(&ft), Some(&pre.join("checkpoint.npz")));
        call("eval", base(&ev), Some(&ft.join("checkpoint.npz")));
        manifests.push(manifest_body(&pre));
        scores.push(read(&ev.join("scores.csv")));
    }
    let mut same = Vec::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            if manifests[i] == manifests[j] || scores[i] == scores[j] {
                same.push(format!("{}/{}", runs[i].0, runs[j].0));
            }
        }
    }

    // no-ssl must hand back exactly the initial weights, both in process and via the CLI
    let bundle = data::load_npz(&data).unwrap();
    let cfg_model = smoke_config(2, 16);
    let seed = 0;
    let init = CMixerModel::new(cfg_model.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut trained = init.clone();
    let mut cfg = TrainConfig::default();
    cfg.ablation.apply("no-ssl").unwrap();
    let skipped = pretrain(
        &mut trained,
        &bundle,
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    let unchanged = trained.params() == init.params() && skipped.losses.is_empty();
    let init_path = dir.join("init.npz");
    checkpoint::save(&init, &init_path).unwrap();
    let cli_unchanged = fs::read(&init_path).unwrap()
        == fs::read(dir.join("no-ssl-pre").join("checkpoint.npz")).unwrap();

    outcome(
        same.is_empty() && unchanged && cli_unchanged,
        format!(
            "{} runs, identical pairs {:?}; no-ssl weights unchanged: in process {unchanged}, via CLI {cli_unchanged}",
            runs.len(),
            same
        ),
    )
}

/// A bundle with PathMNIST's split sizes and 2x2 images.
fn pathmnist_shaped(path: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let counts = [
        (Split::TrainLabeled, 89_996),
        (Split::Val, 10_004),
        (Split::Test, 7_180),
    ];
    let total: usize = counts.iter().map(|c| c.1).sum();
    let bundle = DatasetBundle {
        height: 2,
        width: 2,
        channels: 1,
        images: (0..total * 4).map(|_| rng.random()).collect(),
        labels: (0..total).map(|_| rng.random_range(0..9)).collect(),
        label_width: 1,
        splits: counts
            .iter()
            .flat_map(|&(s, n)| std::iter::repeat_n(s, n))
            .collect(),
        task: TaskKind::Multiclass,
        num_classes: 9,
    };
    data::write_npz(&bundle, path).unwrap();
}

fn c9_splits(dir: &Path) -> Outcome {
    let src = dir.join("pathmnist_shaped.npz");
    pathmnist_shaped(&src);
    let semi = dir.join("semi");
    let weak = dir.join("weak");
    ok(&[
        "splits",
        "--data",
        s(&src),
        "--semi-frac",
        "0.1",
        "--seed",
        "1",
        "--out",
        s(&semi),
    ]);
    ok(&[
        "splits",
        "--data",
        s(&src),
        "--semi-frac",
        "0.1",
        "--corrupt-rate",
        "0.1",
        "--seed",
        "1",
        "--out",
        s(&weak),
    ]);
    let a = data::load_npz(&semi.join("splits.npz")).unwrap();
    let b = data::load_npz(&weak.join("splits.npz")).unwrap();
    let labeled = a.count(Split::TrainLabeled);
    let test = a.count(Split::Test);
    let changed: Vec<usize> = (0..a.len()).filter(|&i| a.label(i) != b.label(i)).collect();
    let sidecar: Vec<usize> = read(&weak.join("corrupted.csv"))
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    let expected = (0.1 * labeled as f64).round() as usize;
    let same_split = a.splits == b.splits;
    outcome(
        labeled == 8_999 && test == 88_177 && changed.len() == expected && changed == sidecar && same_split,
        format!(
            "labeled {labeled}, test {test}; corrupt-rate 0.1 changed {} labels (expected {expected}), all recorded: {}",
            changed.len(),
            changed == sidecar
        ),
    )
}

fn c10_breastmnist(dir: &Path) -> Outcome {
    let Ok(path) = std::env::var("CMIXER_BREASTMNIST") else {
        return outcome(false, "not run: set CMIXER_BREASTMNIST to breastmnist.npz");
    };
    let config = dir.join("breast.txt");
    fs::write(
        &config,
        "model.layers=4\nmodel.hidden=64\ntrain.pretrain_epochs=20\ntrain.finetune_epochs=50\n",
    )
    .unwrap();
    let started = Instant::now();
    let pre = dir.join("breast-pre");
    let ft = dir.join("breast-ft");
    let r = cmixer(&[
        "pretrain",
        "--config",
        s(&config),
        "--data",
        &path,
        "--out",
        s(&pre),
    ]);
    if r.code != 0 {
        return outcome(false, format!("pretrain failed: {}", r.stderr.trim()));
    }
    let ckpt = pre.join("checkpoint.npz");
    let r = cmixer(&[
        "finetune",
        "--config",
        s(&config),
        "--data",
        &path,
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&ft),
    ]);
    if r.code != 0 {
        return outcome(false, format!("finetune failed: {}", r.stderr.trim()));
    }
    let secs = started.elapsed().as_secs_f64();
    let auc = read(&ft.join("finetune_log.csv"))
        .lines()
        .find_map(|l| {
            l.contains(",test,auc,")
                .then(|| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        })
        .unwrap_or(f64::NAN);
    outcome(
        auc >= E2E_AUC && secs < E2E_SECONDS,
        format!("4-layer C=64 model, test AUC {auc:.4}, {secs:.0}s"),
    )
}

fn c11_determinism(dir: &Path) -> Outcome {
    let (config, data) = setup(dir);
    let mut logs = Vec::new();
    let mut sums = Vec::new();
    for rep in ["one", "two"] {
        let pre = dir.join(format!("{rep}-pre"));
        let ft = dir.join(format!("{rep}-ft"));
        let ev = dir.join(format!("{rep}-ev"));
        ok(&[
            "pretrain",
            "--config",
            s(&config),
            "--data",
            s(&data),
            "--out",
            s(&pre),
        ]);
        let pre_ckpt = pre.join("checkpoint.npz");
        ok(&[
            "finetune",
            "--config",
            s(&config),
            "--data",
            s(&data),
            "--checkpoint",
            s(&pre_ckpt),
            "--out",
            s(&ft),
        ]);
        let ft_ckpt = ft.join("checkpoint.npz");
        ok(&[
            "eval",
            "--config",
            s(&config),
            "--data",
            s(&data),
            "--checkpoint",
            s(&ft_ckpt),
            "--out",
            s(&ev),
        ]);
        logs.push([
            read(&pre.join("pretrain_log.csv")),
            read(&ft.join("finetune_log.csv")),
            read(&ev.join("eval.csv")),
            read(&ev.join("scores.csv")),
        ]);
        // the replicas differ only in where their input checkpoint lives
        let body = |d: &Path| -> String {
            manifest_body(d)
                .lines()
                .filter(|l| !l.starts_with("run.checkpoint="))
                .collect::<Vec<_>>()
                .join("\n")
        };
        sums.push([body(&pre), body(&ft), body(&ev)]);
    }
    // and once more straight from the first fine-tune manifest
    let replay = dir.join("replay-ft");
    ok(&[
        "finetune",
        "--config",
        s(&dir.join("one-ft").join("manifest.txt")),
        "--out",
        s(&replay),
    ]);
    let replayed = manifest_body(&replay) == manifest_body(&dir.join("one-ft"));
    outcome(
        logs[0] == logs[1] && sums[0] == sums[1] && replayed,
        format!(
            "CSV logs identical: {}; manifests and checksums identical: {}; manifest replay identical: {replayed}",
            logs[0] == logs[1],
            sums[0] == sums[1]
        ),
    )
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let sub = |name: &str| {
        let p = work.path().join(name);
        fs::create_dir_all(&p).unwrap();
        p
    };
    let criteria: Vec<Criterion> = vec![
        (1, "gradient fidelity", Box::new(c1_gradients)),
        (2, "complex arithmetic oracle", Box::new(c2_complex_oracle)),
        (3, "parameter budget", Box::new(c3_param_budget)),
        (4, "AUC oracle", Box::new(c4_auc_oracle)),
        (5, "overfit smoke", Box::new(c5_overfit)),
        (6, "SSL smoke", Box::new(c6_ssl)),
        (7, "masking statistics", Box::new(c7_masking)),
        (
            8,
            "ablation wiring",
            Box::new({
                let d = sub("c8");
                move || c8_ablations(&d)
            }),
        ),
        (
            9,
            "split arithmetic",
            Box::new({
                let d = sub("c9");
                move || c9_splits(&d)
            }),
        ),
        (
            10,
            "BreastMNIST end-to-end",
            Box::new({
                let d = sub("c10");
                move || c10_breastmnist(&d)
            }),
        ),
        (
            11,
            "determinism",
            Box::new({
                let d = sub("c11");
                move || c11_determinism(&d)
            }),
        ),
    ];
    let mut unexpected = Vec::new();
    for (id, name, check) in &criteria {
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} {id:>2} {name}: {}", o.detail);
        if !o.pass && !KNOWN_GAPS.contains(id) {
            unexpected.push(*id);
        }
    }
    if unexpected.is_empty() {
        println!("acceptance: no failures outside the documented gaps {KNOWN_GAPS:?}");
    } else {
        println!("acceptance: unexpected failures {unexpected:?}");
        std::process::exit(1);
    }
}
