//! Desk-scale synthetic data: one Gaussian blob per class at a
//! class-specific position, plus pixel noise.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetBundle, Split, TaskKind};
use crate::error::{Error, Result};

const BACKGROUND: f64 = 40.0;
const PEAK: f64 = 170.0;
const NOISE_STD: f64 = 20.0;

/// `num_classes * n_per_class` single-channel `side x side` images. Each
/// class is split 70/10/20 into train/val/test (counts rounded, test takes
/// the remainder); samples are stored class by class.
pub fn synth_dataset<R: Rng + ?Sized>(
    num_classes: usize,
    n_per_class: usize,
    side: usize,
    rng: &mut R,
) -> Result<DatasetBundle> {
    if side < 8 {
        return Err(Error::contract(format!(
            "synthetic images need side >= 8, got {side}"
        )));
    }
    if num_classes == 0 {
        return Err(Error::contract("at least one class is required"));
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("finite std");
    let center = (side as f64 - 1.0) / 2.0;
    let radius = side as f64 / 3.0;
    let width = side as f64 / 8.0;
    let n_train = (0.7 * n_per_class as f64).round() as usize;
    let n_val = ((0.1 * n_per_class as f64).round() as usize).min(n_per_class - n_train);

    let mut images = Vec::with_capacity(num_classes * n_per_class * side * side);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    let mut splits = Vec::with_capacity(num_classes * n_per_class);
    for class in 0..num_classes {
        let angle = TAU * class as f64 / num_classes as f64;
        let (cy, cx) = (center + radius * angle.sin(), center + radius * angle.cos());
        for k in 0..n_per_class {
            for y in 0..side {
                for x in 0..side {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let v =
                        BACKGROUND + PEAK * (-d2 / (2.0 * width * width)).exp() + noise.sample(rng);
                    images.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
            labels.push(class as u32);
            splits.push(if k < n_train {
                Split::TrainLabeled
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    let task = if num_classes == 2 {
        TaskKind::Binary
    } else {
        TaskKind::Multiclass
    };
    Ok(DatasetBundle {
        height: side,
        width: side,
        channels: 1,
        images,
        labels,
        label_width: 1,
        splits,
        task,
        num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_counts() {
        let b = synth_dataset(2, 100, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.len(), 200);
        assert_eq!(
            (
                b.count(Split::TrainLabeled),
                b.count(Split::Val),
                b.count(Split::Test)
            ),
            (140, 20, 40)
        );
        b.validate().unwrap();
    }

    #[test]
    fn same_seed_same_bundle() {
        let a = synth_dataset(3, 20, 12, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = synth_dataset(3, 20, 12, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_side_is_rejected() {
        assert!(synth_dataset(2, 10, 7, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn nearest_centroid_separates_classes() {
        let k = 4;
        let b = synth_dataset(k, 100, 16, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let n = b.image_len();
        let mut centroids = vec![vec![0.0; n]; k];
        let mut counts = vec![0usize; k];
        for i in b.indices(Split::TrainLabeled) {
            let c = b.label(i)[0] as usize;
            counts[c] += 1;
            for (acc, &v) in centroids[c].iter_mut().zip(&b.images[i * n..(i + 1) * n]) {
                *acc += v as f64;
            }
        }
        for (c, cnt) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *cnt as f64);
        }
        let test = b.indices(Split::Test);
        let correct = test
            .iter()
            .filter(|&&i| {
                let img = &b.images[i * n..(i + 1) * n];
                let dist = |c: &Vec<f64>| {
                    c.iter()
                        .zip(img)
                        .map(|(m, &v)| (m - v as f64).powi(2))
                        .sum::<f64>()
                };
                let best = (0..k)
                    .min_by(|&a, &bb| dist(&centroids[a]).total_cmp(&dist(&centroids[bb])))
                    .unwrap();
                best == b.label(i)[0] as usize
            })
            .count();
        assert!(correct as f64 / test.len() as f64 >= 0.95);
    }
}
