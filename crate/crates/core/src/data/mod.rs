//! Datasets: NPZ ingestion, synthetic data, label-scarcity splits and the
//! image transforms used during pre-training.
//!
//! A [`DatasetBundle`] keeps every sample of every split in one array; the
//! split a sample belongs to is a per-sample tag. Pixels stay `u8` until a
//! batch is converted to a tensor with [`to_tensor`].

pub mod augment;
pub mod npy;
pub mod npz;
pub mod semi;
pub mod synth;

use std::path::Path;

use crate::ctensor::RealTensor;
use crate::error::{Error, Result};
use npy::NpyArray;
use npz::{NpzArchive, NpzWriter};

pub use augment::{augment_target, random_mask, AugmentSpec, MaskSpec};
pub use semi::{corrupt_labels, make_semi, CorruptionRecord, SemiReport};
pub use synth::synth_dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Multiclass,
    Binary,
    Multilabel,
    /// ordinal grades, trained and scored as multiclass
    Ordinal,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Multiclass => "multiclass",
            Self::Binary => "binary",
            Self::Multilabel => "multilabel",
            Self::Ordinal => "ordinal",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            Self::Multiclass,
            Self::Binary,
            Self::Multilabel,
            Self::Ordinal,
        ]
        .into_iter()
        .find(|t| t.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    TrainLabeled,
    TrainUnlabeled,
    Val,
    Test,
}

/// One `H x W x ch` image, channel-last like the archives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dim(
                "image",
                format!("{} bytes for {height}x{width}x{channels}", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[u8] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `N x H x W x ch`, row-major
    pub images: Vec<u8>,
    /// `N x label_width`; one class index per sample, or a 0/1 vector for multilabel
    pub labels: Vec<u32>,
    pub label_width: usize,
    pub splits: Vec<Split>,
    pub task: TaskKind,
    pub num_classes: usize,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> Image {
        let n = self.image_len();
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.images[i * n..(i + 1) * n].to_vec(),
        }
    }

    pub fn label(&self, i: usize) -> &[u32] {
        &self.labels[i * self.label_width..(i + 1) * self.label_width]
    }

    /// Sample indices carrying `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }

    /// Checks the structural invariants: buffer sizes, label ranges and widths.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.images.len() != n * self.image_len() {
            return Err(Error::contract(format!(
                "{} image bytes for {n} samples of {}",
                self.images.len(),
                self.image_len()
            )));
        }
        if self.labels.len() != n * self.label_width {
            return Err(Error::contract("label buffer does not match sample count"));
        }
        let multilabel = self.task == TaskKind::Multilabel;
        if multilabel && self.label_width != self.num_classes {
            return Err(Error::contract("multilabel width must equal num_classes"));
        }
        if !multilabel && self.label_width != 1 {
            return Err(Error::contract("index tasks carry one label per sample"));
        }
        let bound = if multilabel {
            2
        } else {
            self.num_classes as u32
        };
        if let Some(bad) = self.labels.iter().find(|&&l| l >= bound) {
            return Err(Error::contract(format!(
                "label {bad} out of range [0, {bound})"
            )));
        }
        Ok(())
    }

    /// Sub-bundle holding the listed samples in the given order.
    pub fn select(&self, indices: &[usize]) -> DatasetBundle {
        let n = self.image_len();
        let w = self.label_width;
        DatasetBundle {
            images: indices
                .iter()
                .flat_map(|&i| &self.images[i * n..(i + 1) * n])
                .copied()
                .collect(),
            labels: indices
                .iter()
                .flat_map(|&i| &self.labels[i * w..(i + 1) * w])
                .copied()
                .collect(),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> DatasetBundle {
        DatasetBundle {
            height: self.height,
            width: self.width,
            channels: self.channels,
            images: Vec::new(),
            labels: Vec::new(),
            label_width: self.label_width,
            splits: Vec::new(),
            task: self.task,
            num_classes: self.num_classes,
        }
    }
}

/// Maps a pixel to `[-1, 1]`.
pub fn normalize_pixel(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Stacks images into a normalized `[B, ch, H, W]` tensor.
pub fn to_tensor(images: &[Image]) -> Result<RealTensor> {
    let Some(first) = images.first() else {
        return Err(Error::contract("empty image batch"));
    };
    let (h, w, ch) = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * h * w * ch);
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, ch) {
            return Err(Error::dim("to_tensor", "images in a batch differ in shape"));
        }
        for c in 0..ch {
            for y in 0..h {
                for x in 0..w {
                    data.push(normalize_pixel(img.data[(y * w + x) * ch + c]));
                }
            }
        }
    }
    RealTensor::new(vec![images.len(), ch, h, w], data)
}

const SPLIT_ENTRIES: [(&str, Split); 3] = [
    ("train", Split::TrainLabeled),
    ("val", Split::Val),
    ("test", Split::Test),
];
const TASK_MEMBER: &str = "task.txt";

/// Reads a MedMNIST-style archive. The task kind comes from an optional
/// `task.txt` member, else from the file name, else from the labels.
pub fn load_npz(path: &Path) -> Result<DatasetBundle> {
    let archive = NpzArchive::read(path)?;
    let mut geometry: Option<(usize, usize, usize)> = None;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut label_width: Option<usize> = None;

    for (prefix, split) in SPLIT_ENTRIES {
        let (img_name, lab_name) = (format!("{prefix}_images"), format!("{prefix}_labels"));
        let (n, img_data) = read_images(&archive, &img_name, &mut geometry)?;
        let lab = archive.array(&lab_name)?;
        let width = match *lab.shape() {
            [m] if m == n => 1,
            [m, w] if m == n && w >= 1 => w,
            ref other => {
                return Err(Error::format(
                    &lab_name,
                    format!("shape {other:?} does not match {n} images"),
                ));
            }
        };
        if *label_width.get_or_insert(width) != width {
            return Err(Error::format(
                &lab_name,
                "label width differs between splits",
            ));
        }
        for v in lab.to_i64(&lab_name)? {
            let v = u32::try_from(v)
                .map_err(|_| Error::format(&lab_name, format!("negative or huge label {v}")))?;
            labels.push(v);
        }
        images.extend(img_data);
        splits.extend(std::iter::repeat_n(split, n));
    }
    if archive.contains("train_unlabeled_images") {
        let (n, img_data) = read_images(&archive, "train_unlabeled_images", &mut geometry)?;
        let lab = archive.array("train_unlabeled_labels")?;
        if lab.len() != n * label_width.unwrap_or(1) {
            return Err(Error::format(
                "train_unlabeled_labels",
                "does not match image count",
            ));
        }
        labels.extend(
            lab.to_i64("train_unlabeled_labels")?
                .into_iter()
                .map(|v| v.max(0) as u32),
        );
        images.extend(img_data);
        splits.extend(std::iter::repeat_n(Split::TrainUnlabeled, n));
    }

    let (height, width, channels) = geometry.expect("train split was read");
    let label_width = label_width.expect("train split was read");
    let (task, num_classes) = match archive.raw(TASK_MEMBER) {
        Some(text) => parse_task(text)?,
        None => infer_task(path, label_width, &labels),
    };
    let bundle = DatasetBundle {
        height,
        width,
        channels,
        images,
        labels,
        label_width,
        splits,
        task,
        num_classes,
    };
    bundle
        .validate()
        .map_err(|e| Error::format("labels", e.to_string()))?;
    Ok(bundle)
}

fn read_images(
    archive: &NpzArchive,
    name: &str,
    geometry: &mut Option<(usize, usize, usize)>,
) -> Result<(usize, Vec<u8>)> {
    let (shape, data) = match archive.array(name)? {
        NpyArray::U8 { shape, data } => (shape, data),
        _ => return Err(Error::format(name, "images must be u1")),
    };
    let (n, g) = match *shape {
        [n, h, w] => (n, (h, w, 1)),
        [n, h, w, c] => (n, (h, w, c)),
        ref other => {
            return Err(Error::format(
                name,
                format!("expected N x H x W [x ch], got {other:?}"),
            ))
        }
    };
    if *geometry.get_or_insert(g) != g {
        return Err(Error::format(
            name,
            "image geometry differs from the train split",
        ));
    }
    Ok((n, data))
}

fn parse_task(text: &[u8]) -> Result<(TaskKind, usize)> {
    let err = |d: &str| Error::format(TASK_MEMBER, d);
    let text = std::str::from_utf8(text).map_err(|_| err("not UTF-8"))?;
    let mut task = None;
    let mut classes = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
            Some(("task", v)) => {
                task = Some(TaskKind::from_name(v).ok_or_else(|| err("unknown task"))?)
            }
            Some(("num_classes", v)) => {
                classes = Some(v.parse().map_err(|_| err("bad num_classes"))?)
            }
            _ => return Err(err("unrecognized line")),
        }
    }
    Ok((
        task.ok_or_else(|| err("missing task"))?,
        classes.ok_or_else(|| err("missing num_classes"))?,
    ))
}

fn infer_task(path: &Path, label_width: usize, labels: &[u32]) -> (TaskKind, usize) {
    if label_width > 1 {
        return (TaskKind::Multilabel, label_width);
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    let classes = labels.iter().max().map_or(1, |&m| m as usize + 1);
    let known = [
        ("pathmnist", TaskKind::Multiclass, 9),
        ("dermamnist", TaskKind::Multiclass, 7),
        ("octmnist", TaskKind::Multiclass, 4),
        ("bloodmnist", TaskKind::Multiclass, 8),
        ("tissuemnist", TaskKind::Multiclass, 8),
        ("organamnist", TaskKind::Multiclass, 11),
        ("organcmnist", TaskKind::Multiclass, 11),
        ("organsmnist", TaskKind::Multiclass, 11),
        ("pneumoniamnist", TaskKind::Binary, 2),
        ("breastmnist", TaskKind::Binary, 2),
        ("retinamnist", TaskKind::Ordinal, 5),
    ];
    if let Some(&(_, task, k)) = known.iter().find(|(name, ..)| stem.starts_with(name)) {
        return (task, k.max(classes));
    }
    if classes <= 2 {
        (TaskKind::Binary, 2)
    } else {
        (TaskKind::Multiclass, classes)
    }
}

/// Writes the bundle in the archive layout [`load_npz`] reads, plus a
/// `task.txt` member so the task kind survives the round trip.
/// Member prefixes in file order; [`load_npz`] concatenates them in this order.
const GROUPS: [(&str, Split); 4] = [
    ("train", Split::TrainLabeled),
    ("val", Split::Val),
    ("test", Split::Test),
    ("train_unlabeled", Split::TrainUnlabeled),
];

/// Sample indices of `bundle` in the order [`write_npz`] stores them, which is
/// also the order of the bundle read back from that file.
pub fn storage_order(bundle: &DatasetBundle) -> Vec<usize> {
    GROUPS
        .iter()
        .flat_map(|&(_, split)| bundle.indices(split))
        .collect()
}

pub fn write_npz(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let mut writer = NpzWriter::new();
    for (prefix, split) in GROUPS {
        let idx = bundle.indices(split);
        if split == Split::TrainUnlabeled && idx.is_empty() {
            continue;
        }
        let sub = bundle.select(&idx);
        let mut img_shape = vec![idx.len(), bundle.height, bundle.width];
        if bundle.channels != 1 {
            img_shape.push(bundle.channels);
        }
        writer.array(
            &format!("{prefix}_images"),
            &NpyArray::U8 {
                shape: img_shape,
                data: sub.images,
            },
        );
        writer.array(
            &format!("{prefix}_labels"),
            &NpyArray::I64 {
                shape: vec![idx.len(), bundle.label_width],
                data: sub.labels.iter().map(|&l| l as i64).collect(),
            },
        );
    }
    writer.raw(
        TASK_MEMBER,
        format!(
            "task={}\nnum_classes={}\n",
            bundle.task.name(),
            bundle.num_classes
        )
        .into_bytes(),
    );
    writer.write(path)
}
