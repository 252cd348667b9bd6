//! Label-scarce variants of a bundle: a small stratified labeled subset, and
//! symmetric label noise on that subset.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{DatasetBundle, Split, TaskKind};
use crate::error::{Error, Result};

/// What [`make_semi`] did.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemiReport {
    pub labeled: usize,
    pub moved_to_test: usize,
    /// classes present in the training pool that received no labeled sample
    pub empty_classes: Vec<usize>,
}

/// Keeps `floor(fraction * N_train)` labeled training samples, stratified by
/// class with largest-remainder rounding, and re-tags the rest as test.
pub fn make_semi<R: Rng + ?Sized>(
    bundle: &DatasetBundle,
    fraction: f64,
    rng: &mut R,
) -> Result<(DatasetBundle, SemiReport)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!(
            "labeled fraction {fraction} outside (0, 1]"
        )));
    }
    let pool = bundle.indices(Split::TrainLabeled);
    let target = ((fraction * pool.len() as f64) + 1e-9).floor() as usize;

    // multilabel samples have no single class; they form one stratum
    let strata = if bundle.task == TaskKind::Multilabel {
        1
    } else {
        bundle.num_classes
    };
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); strata];
    for &i in &pool {
        let class = if strata == 1 {
            0
        } else {
            bundle.label(i)[0] as usize
        };
        by_class[class].push(i);
    }

    let quotas = largest_remainder(&by_class.iter().map(Vec::len).collect::<Vec<_>>(), target);
    let mut keep = vec![false; bundle.len()];
    for (members, &quota) in by_class.iter_mut().zip(&quotas) {
        members.shuffle(rng);
        members[..quota].iter().for_each(|&i| keep[i] = true);
    }

    let empty_classes: Vec<usize> = (0..strata)
        .filter(|&c| !by_class[c].is_empty() && quotas[c] == 0)
        .collect();
    if !empty_classes.is_empty() {
        log::warn!("no labeled samples for classes {empty_classes:?} at fraction {fraction}");
    }

    let mut out = bundle.clone();
    for &i in &pool {
        if !keep[i] {
            out.splits[i] = Split::Test;
        }
    }
    let report = SemiReport {
        labeled: target,
        moved_to_test: pool.len() - target,
        empty_classes,
    };
    Ok((out, report))
}

/// Splits `total` across groups proportionally to `sizes`: floors first, then
/// one extra each to the largest fractional parts (lower index wins ties).
fn largest_remainder(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| s as f64 * total as f64 / n as f64)
        .collect();
    let mut quotas: Vec<usize> = exact
        .iter()
        .zip(sizes)
        .map(|(e, &s)| (e.floor() as usize).min(s))
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = total - quotas.iter().sum::<usize>();
    while left > 0 {
        let before = left;
        for &g in &order {
            if left > 0 && quotas[g] < sizes[g] {
                quotas[g] += 1;
                left -= 1;
            }
        }
        if left == before {
            break;
        }
    }
    quotas
}

/// Audit trail of [`corrupt_labels`]: sample indices with old and new labels.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CorruptionRecord {
    pub indices: Vec<usize>,
    pub old: Vec<Vec<u32>>,
    pub new: Vec<Vec<u32>>,
}

/// Replaces the label of exactly `round(rate * N_labeled)` labeled training
/// samples with a uniformly chosen different one. Multilabel samples get one
/// uniformly chosen bit flipped.
pub fn corrupt_labels<R: Rng + ?Sized>(
    bundle: &DatasetBundle,
    rate: f64,
    rng: &mut R,
) -> Result<(DatasetBundle, CorruptionRecord)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::contract(format!(
            "corruption rate {rate} outside [0, 1]"
        )));
    }
    if bundle.num_classes < 2 {
        return Err(Error::contract(
            "label corruption needs at least two classes",
        ));
    }
    let pool = bundle.indices(Split::TrainLabeled);
    let count = (rate * pool.len() as f64).round() as usize;
    let mut chosen: Vec<usize> = sample(rng, pool.len(), count)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    chosen.sort_unstable();

    let mut out = bundle.clone();
    let mut record = CorruptionRecord::default();
    let w = bundle.label_width;
    for &i in &chosen {
        let old = bundle.label(i).to_vec();
        let mut new = old.clone();
        if bundle.task == TaskKind::Multilabel {
            let bit = rng.random_range(0..w);
            new[bit] ^= 1;
        } else {
            let k = bundle.num_classes as u32;
            new[0] = (old[0] + 1 + rng.random_range(0..k - 1)) % k;
        }
        out.labels[i * w..(i + 1) * w].copy_from_slice(&new);
        record.indices.push(i);
        record.old.push(old);
        record.new.push(new);
    }
    Ok((out, record))
}
