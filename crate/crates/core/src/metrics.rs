//! ACC and AUC.
//!
//! AUC is the Mann-Whitney statistic computed from midranks, so ties count
//! one half. Multiclass and multilabel AUC are macro averages of per-class
//! one-vs-rest values; classes with no positive or no negative example are
//! skipped. Index tasks are scored on softmax probabilities, multilabel
//! tasks on the raw scores (the ranking is the same as under a sigmoid).

use rand::Rng;

use crate::ctensor::RealTensor;
use crate::data::{to_tensor, DatasetBundle, Split, TaskKind};
use crate::error::{Error, Result};
use crate::model::{standard_normal, CMixerModel, ForwardOptions, Head};

/// Exact-match accuracy of predicted class indices.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::contract("accuracy of an empty set"));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Mean over labels of per-label accuracy, predicting positive when the score is > 0.
pub fn multilabel_accuracy(scores: &[f64], labels: &[u32], width: usize) -> Result<f64> {
    if scores.len() != labels.len() || width == 0 || !scores.len().is_multiple_of(width) {
        return Err(Error::contract("score and label matrices differ in shape"));
    }
    if scores.is_empty() {
        return Err(Error::contract("accuracy of an empty set"));
    }
    let n = scores.len() / width;
    let per_label = (0..width).map(|l| {
        let hits = (0..n)
            .filter(|&i| (scores[i * width + l] > 0.0) == (labels[i * width + l] == 1))
            .count();
        hits as f64 / n as f64
    });
    Ok(per_label.sum::<f64>() / width as f64)
}

/// Probability that a random positive outscores a random negative, ties counting 1/2.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative examples".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric { op: "auc_binary" });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the midrank keeps every quantity an integer
    let mut rank2_sum_pos: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let twice_midrank = (start + 1 + end) as u128;
        rank2_sum_pos +=
            twice_midrank * order[start..end].iter().filter(|&&i| positive[i]).count() as u128;
        start = end;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // 2U = 2R - p(p+1), the doubled count of positive-over-negative pairs
    let twice_u = rank2_sum_pos - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * q) as f64)
}

/// Per-class AUC plus its macro mean over the classes where it is defined.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskAuc {
    pub macro_auc: f64,
    pub per_class: Vec<Option<f64>>,
}

/// `scores` is `[N, K]` model output; `labels` is `N x label_width`.
pub fn auc_task(
    scores: &RealTensor,
    labels: &[u32],
    label_width: usize,
    task: TaskKind,
) -> Result<TaskAuc> {
    let (n, k) = match *scores.shape() {
        [n, k] => (n, k),
        ref other => {
            return Err(Error::dim(
                "auc_task",
                format!("expected [N, K] scores, got {other:?}"),
            ))
        }
    };
    if labels.len() != n * label_width {
        return Err(Error::contract("label count does not match scores"));
    }
    let columns: Vec<(Vec<f64>, Vec<bool>)> = match task {
        TaskKind::Multilabel => {
            if label_width != k {
                return Err(Error::contract(format!(
                    "{k} score columns for {label_width} labels"
                )));
            }
            (0..k)
                .map(|c| {
                    let s = (0..n).map(|i| scores.data()[i * k + c]).collect();
                    let y = (0..n).map(|i| labels[i * k + c] == 1).collect();
                    (s, y)
                })
                .collect()
        }
        _ => {
            if label_width != 1 {
                return Err(Error::contract("index tasks take one label per sample"));
            }
            let probs = softmax_rows(scores.data(), k);
            let classes: Vec<usize> = if task == TaskKind::Binary && k == 2 {
                vec![1]
            } else {
                (0..k).collect()
            };
            classes
                .into_iter()
                .map(|c| {
                    let s = (0..n).map(|i| probs[i * k + c]).collect();
                    let y = labels.iter().map(|&l| l as usize == c).collect();
                    (s, y)
                })
                .collect()
        }
    };
    let mut per_class = Vec::with_capacity(columns.len());
    for (c, (s, y)) in columns.iter().enumerate() {
        match auc_binary(s, y) {
            Ok(v) => per_class.push(Some(v)),
            Err(Error::UndefinedMetric(_)) => {
                log::warn!("AUC undefined for class {c}; excluded from the macro average");
                per_class.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric(
            "no class has both positive and negative examples".into(),
        ));
    }
    Ok(TaskAuc {
        macro_auc: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class,
    })
}

fn softmax_rows(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Argmax per row; the lowest index wins ties.
pub fn argmax_rows(scores: &RealTensor) -> Vec<usize> {
    let k = scores.shape().last().copied().unwrap_or(1).max(1);
    scores
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub acc: f64,
    pub auc: f64,
    /// per-class (or per-label) AUC, `None` where undefined
    pub per_class_auc: Vec<Option<f64>>,
    pub samples: usize,
}

impl EvalReport {
    /// Rows of a `step,epoch,split,metric,value` log.
    pub fn csv_rows(&self, step: usize, epoch: usize, split: &str) -> Vec<String> {
        let mut rows = vec![
            format!("{step},{epoch},{split},acc,{}", self.acc),
            format!("{step},{epoch},{split},auc,{}", self.auc),
            format!("{step},{epoch},{split},samples,{}", self.samples),
        ];
        for (c, v) in self.per_class_auc.iter().enumerate() {
            if let Some(v) = v {
                rows.push(format!("{step},{epoch},{split},auc_class{c},{v}"));
            }
        }
        rows
    }
}

/// ACC and AUC from a score matrix.
pub fn report_from_scores(
    scores: &RealTensor,
    labels: &[u32],
    label_width: usize,
    task: TaskKind,
) -> Result<EvalReport> {
    let n = scores.shape().first().copied().unwrap_or(0);
    let acc = if task == TaskKind::Multilabel {
        multilabel_accuracy(scores.data(), labels, label_width)?
    } else {
        let truth: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        accuracy(&argmax_rows(scores), &truth)?
    };
    let auc = auc_task(scores, labels, label_width, task)?;
    Ok(EvalReport {
        acc,
        auc: auc.macro_auc,
        per_class_auc: auc.per_class,
        samples: n,
    })
}

/// Classifier scores for the given samples, in chunks; `eps` is drawn from
/// `rng` chunk by chunk only when the incentive input is on.
pub fn predict_samples<R: Rng + ?Sized>(
    model: &CMixerModel,
    bundle: &DatasetBundle,
    indices: &[usize],
    opts: ForwardOptions,
    rng: &mut R,
) -> Result<RealTensor> {
    const CHUNK: usize = 256;
    let mut data = Vec::new();
    let mut width = 0;
    for chunk in indices.chunks(CHUNK) {
        let images: Vec<_> = chunk.iter().map(|&i| bundle.image(i)).collect();
        let x = to_tensor(&images)?;
        let eps = if opts.incentive {
            standard_normal(x.shape(), rng)
        } else {
            RealTensor::zeros(&[0])
        };
        let y = model.predict(&x, &eps, Head::Classify, opts, CHUNK)?;
        width = y.shape()[1];
        data.extend(y.into_data());
    }
    RealTensor::new(vec![indices.len(), width], data)
}

/// Evaluates `model` on one split of `bundle`.
pub fn evaluate<R: Rng + ?Sized>(
    model: &CMixerModel,
    bundle: &DatasetBundle,
    split: Split,
    opts: ForwardOptions,
    rng: &mut R,
) -> Result<EvalReport> {
    let indices = bundle.indices(split);
    if indices.is_empty() {
        return Err(Error::contract(format!("split {split:?} is empty")));
    }
    let scores = predict_samples(model, bundle, &indices, opts, rng)?;
    let labels: Vec<u32> = indices
        .iter()
        .flat_map(|&i| bundle.label(i))
        .copied()
        .collect();
    report_from_scores(&scores, &labels, bundle.label_width, bundle.task)
}
