//! Datasets, batch samplers and augmentation.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `channels x height x width`
    pub pixels: Tensor,
    pub label: usize,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<LabeledImage>,
    classes: usize,
    by_class: Vec<Vec<usize>>,
    image_dims: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset from `(pixels, label)` pairs; indices follow input order.
    pub fn new(classes: usize, items: Vec<(Tensor, usize)>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Data(format!("{classes} classes; need at least 2")));
        }
        let first = items.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
        let image_dims: [usize; 3] = first
            .0
            .dims()
            .try_into()
            .map_err(|_| Error::Data(format!("images must be 3-D, got {:?}", first.0.dims())))?;
        let mut by_class = vec![Vec::new(); classes];
        let mut images = Vec::with_capacity(items.len());
        for (index, (pixels, label)) in items.into_iter().enumerate() {
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            if pixels.dims() != image_dims {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    left: image_dims.to_vec(),
                    right: pixels.dims().to_vec(),
                });
            }
            by_class[label].push(index);
            images.push(LabeledImage { pixels, label, index });
        }
        Ok(Dataset {
            images,
            classes,
            by_class,
            image_dims,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_dims(&self) -> [usize; 3] {
        self.image_dims
    }

    pub fn images(&self) -> &[LabeledImage] {
        &self.images
    }

    pub fn image(&self, index: usize) -> &LabeledImage {
        &self.images[index]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    /// Dataset indices of each class, ascending.
    pub fn class_indices(&self) -> &[Vec<usize>] {
        &self.by_class
    }

    /// Stacks the given images into one `m x c x h x w` batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let per = self.image_dims.iter().product::<usize>();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self
                .images
                .get(i)
                .ok_or_else(|| Error::Data(format!("index {i} out of range for {} images", self.len())))?;
            data.extend_from_slice(img.pixels.data());
            labels.push(img.label);
        }
        let [c, h, w] = self.image_dims;
        Ok(Batch {
            images: Tensor::from_vec(&[indices.len(), c, h, w], data)?,
            labels,
            indices: indices.to_vec(),
        })
    }
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Class templates for the synthetic benchmark: class `k` images are
/// `template_k + noise * N(0, 1)` per element.
#[derive(Debug, Clone)]
pub struct SyntheticTemplates {
    pub templates: Vec<Tensor>,
}

impl SyntheticTemplates {
    pub fn new(classes: usize, dims: [usize; 3], rng: &mut Rng) -> Result<Self> {
        let n: usize = dims.iter().product();
        let templates = (0..classes)
            .map(|_| Tensor::from_vec(&dims, (0..n).map(|_| rng.next_gaussian() as f32).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(SyntheticTemplates { templates })
    }

    /// `per_class` images of every class, ordered class-major.
    pub fn sample(&self, per_class: usize, noise: f32, rng: &mut Rng) -> Result<Dataset> {
        let mut items = Vec::with_capacity(per_class * self.templates.len());
        for (label, t) in self.templates.iter().enumerate() {
            for _ in 0..per_class {
                let data = t
                    .data()
                    .iter()
                    .map(|&v| v + noise * rng.next_gaussian() as f32)
                    .collect();
                items.push((Tensor::from_vec(t.dims(), data)?, label));
            }
        }
        Dataset::new(self.templates.len(), items)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub size: usize,
    pub noise: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Train and test splits drawn around the same templates.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        if self.classes < 2 {
            return Err(Error::Data(format!("{} classes; need at least 2", self.classes)));
        }
        let mut rng = Rng::new(self.seed);
        let templates = SyntheticTemplates::new(self.classes, [self.channels, self.size, self.size], &mut rng)?;
        let train = templates.sample(self.train_per_class, self.noise, &mut rng.fork(1))?;
        let test = templates.sample(self.test_per_class, self.noise, &mut rng.fork(2))?;
        Ok((train, test))
    }
}

pub fn make_synthetic(
    classes: usize,
    per_class: usize,
    dims: [usize; 3],
    noise: f32,
    rng: &mut Rng,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Data(format!("{classes} classes; need at least 2")));
    }
    SyntheticTemplates::new(classes, dims, rng)?.sample(per_class, noise, rng)
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary format

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";
/// Zero border added around each 32x32 image (32 -> 40).
pub const CIFAR_PAD: usize = 4;

/// One raw CIFAR record: label byte and the R, G, B planes.
#[derive(Debug, Clone, PartialEq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

pub fn parse_cifar_records(bytes: &[u8], expected: usize) -> Result<Vec<CifarRecord>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) || bytes.len() / CIFAR_RECORD != expected {
        return Err(Error::Data(format!(
            "expected {expected} records of {CIFAR_RECORD} bytes, got {} bytes",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|r| {
            if r[0] > 9 {
                return Err(Error::Data(format!("label {} > 9", r[0])));
            }
            Ok(CifarRecord {
                label: r[0],
                pixels: r[1..].to_vec(),
            })
        })
        .collect()
}

/// Scales bytes to `[0, 1]` and zero-pads each plane by `pad` on every side.
pub fn pad_image(pixels: &[u8], pad: usize) -> Vec<f32> {
    let side = 32 + 2 * pad;
    let mut out = vec![0f32; 3 * side * side];
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                out[(c * side + y + pad) * side + x + pad] = pixels[(c * 32 + y) * 32 + x] as f32 / 255.0;
            }
        }
    }
    out
}

/// Per-channel mean and standard deviation of the unpadded `[0, 1]` pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelNormalizer {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl PixelNormalizer {
    pub fn fit(records: &[CifarRecord]) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for r in records {
            for c in 0..3 {
                for &p in &r.pixels[c * 1024..(c + 1) * 1024] {
                    let v = p as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (records.len() * 1024).max(1) as f64;
        let mut mean = [0f32; 3];
        let mut std = [0f32; 3];
        for c in 0..3 {
            let m = sum[c] / n;
            mean[c] = m as f32;
            std[c] = ((sq[c] / n - m * m).max(1e-12)).sqrt() as f32;
        }
        PixelNormalizer { mean, std }
    }

    /// Normalizes a padded canvas in place; the zero border becomes `-mean / std`.
    pub fn apply(&self, canvas: &mut [f32]) {
        let plane = canvas.len() / 3;
        for (i, v) in canvas.iter_mut().enumerate() {
            let c = i / plane;
            *v = (*v - self.mean[c]) / self.std[c];
        }
    }
}

fn cifar_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.join(CIFAR_TEST_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn read_records(path: &Path, expected: usize) -> Result<Vec<CifarRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_records(&bytes, expected).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Loads the CIFAR-10 binary distribution from `dir` (or `dir/cifar-10-batches-bin`).
///
/// Images are padded to 40x40 and normalized with the training-split statistics.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset, PixelNormalizer)> {
    load_cifar10_with(dir, CIFAR_RECORDS_PER_FILE)
}

pub fn load_cifar10_with(dir: &Path, records_per_file: usize) -> Result<(Dataset, Dataset, PixelNormalizer)> {
    let dir = cifar_dir(dir);
    let mut train = Vec::with_capacity(5 * records_per_file);
    for name in CIFAR_TRAIN_FILES {
        train.extend(read_records(&dir.join(name), records_per_file)?);
    }
    let test = read_records(&dir.join(CIFAR_TEST_FILE), records_per_file)?;
    let norm = PixelNormalizer::fit(&train);
    let side = 32 + 2 * CIFAR_PAD;
    let to_dataset = |records: Vec<CifarRecord>| -> Result<Dataset> {
        let items = records
            .into_iter()
            .map(|r| {
                let mut canvas = pad_image(&r.pixels, CIFAR_PAD);
                norm.apply(&mut canvas);
                Ok((Tensor::from_vec(&[3, side, side], canvas)?, r.label as usize))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(10, items)
    };
    Ok((to_dataset(train)?, to_dataset(test)?, norm))
}

// ---------------------------------------------------------------------------
// Samplers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanKind {
    Random,
    Balanced,
    ShuffledBalanced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub kind: PlanKind,
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchPlan {
    pub fn random(batch_size: usize, seed: u64) -> Self {
        BatchPlan {
            kind: PlanKind::Random,
            batch_size,
            seed,
        }
    }

    /// Balanced batches always hold exactly one image per class.
    pub fn balanced(classes: usize, seed: u64) -> Self {
        BatchPlan {
            kind: PlanKind::Balanced,
            batch_size: classes,
            seed,
        }
    }

    pub fn shuffled_balanced(classes: usize, seed: u64) -> Self {
        BatchPlan {
            kind: PlanKind::ShuffledBalanced,
            batch_size: classes,
            seed,
        }
    }

    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        match self.kind {
            PlanKind::Random => {
                if self.batch_size == 0 || self.batch_size > dataset.len() {
                    return Err(Error::Data(format!(
                        "batch size {} for {} images",
                        self.batch_size,
                        dataset.len()
                    )));
                }
            }
            PlanKind::Balanced | PlanKind::ShuffledBalanced => {
                if self.batch_size != dataset.classes() {
                    return Err(Error::Data(format!(
                        "balanced batch size must equal the class count {}, got {}",
                        dataset.classes(),
                        self.batch_size
                    )));
                }
                if let Some(k) = dataset.class_indices().iter().position(|l| l.is_empty()) {
                    return Err(Error::Data(format!("class {k} has no images; cannot balance")));
                }
            }
        }
        Ok(())
    }
}

/// Index lists for one balanced epoch.
///
/// Every per-class list is shuffled independently; batch `t` takes element `t`
/// of each list and is then shuffled internally. With unequal class counts the
/// epoch has `max count` batches and short classes are topped up by sampling
/// with replacement.
pub fn balanced_epoch(dataset: &Dataset, rng: &mut Rng) -> Vec<Vec<usize>> {
    let longest = dataset.class_indices().iter().map(Vec::len).max().unwrap_or(0);
    let lists: Vec<Vec<usize>> = dataset
        .class_indices()
        .iter()
        .map(|members| {
            let mut l = members.clone();
            rng.shuffle(&mut l);
            while l.len() < longest {
                l.push(members[rng.next_below(members.len())]);
            }
            l
        })
        .collect();
    (0..longest)
        .map(|t| {
            let mut batch: Vec<usize> = lists.iter().map(|l| l[t]).collect();
            rng.shuffle(&mut batch);
            batch
        })
        .collect()
}

/// Uniform shuffle cut into full batches; the remainder is dropped.
pub fn random_epoch(len: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut order);
    order.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

/// Emits batches according to a [`BatchPlan`], one epoch at a time.
#[derive(Debug, Clone)]
pub struct Sampler {
    plan: BatchPlan,
    rng: Rng,
    epoch: usize,
    pending: VecDeque<Vec<usize>>,
}

impl Sampler {
    pub fn new(plan: BatchPlan) -> Self {
        let rng = Rng::new(plan.seed);
        Sampler {
            plan,
            rng,
            epoch: 0,
            pending: VecDeque::new(),
        }
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    /// Epochs generated so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Index lists of the next full epoch.
    pub fn next_epoch(&mut self, dataset: &Dataset) -> Result<Vec<Vec<usize>>> {
        self.plan.validate(dataset)?;
        self.epoch += 1;
        Ok(match self.plan.kind {
            PlanKind::Random => random_epoch(dataset.len(), self.plan.batch_size, &mut self.rng),
            PlanKind::Balanced | PlanKind::ShuffledBalanced => balanced_epoch(dataset, &mut self.rng),
        })
    }

    pub fn next_batch(&mut self, dataset: &Dataset) -> Result<Batch> {
        if self.pending.is_empty() {
            self.pending = self.next_epoch(dataset)?.into();
        }
        let indices = self.pending.pop_front().expect("non-empty epoch");
        dataset.gather(&indices)
    }
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Output side length; `None` keeps the canvas size.
    pub crop: Option<usize>,
    pub flip: bool,
    /// Per-channel additive jitter drawn from `[-b, b]`.
    pub brightness: f32,
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            crop: None,
            flip: false,
            brightness: 0.0,
        }
    }
}

pub fn crop_offset(canvas: usize, target: usize, rng: &mut Rng) -> Result<usize> {
    if target > canvas {
        return Err(Error::Data(format!("crop {target} larger than canvas {canvas}")));
    }
    Ok(rng.next_below(canvas - target + 1))
}

fn crop_image(src: &[f32], c: usize, side: usize, target: usize, (oy, ox): (usize, usize), out: &mut Vec<f32>) {
    for ch in 0..c {
        for y in 0..target {
            let row = (ch * side + oy + y) * side + ox;
            out.extend_from_slice(&src[row..row + target]);
        }
    }
}

fn batch_dims(images: &Tensor) -> Result<[usize; 4]> {
    match images.dims() {
        &[n, c, h, w] if h == w => Ok([n, c, h, w]),
        d => Err(Error::Data(format!(
            "augmentation expects square 4-D batches, got {d:?}"
        ))),
    }
}

/// Central `target x target` crop of every image.
pub fn center_crop(images: &Tensor, target: usize) -> Result<Tensor> {
    let [n, c, side, _] = batch_dims(images)?;
    if target > side {
        return Err(Error::Data(format!("crop {target} larger than canvas {side}")));
    }
    if target == side {
        return Ok(images.clone());
    }
    let off = (side - target) / 2;
    let per = c * side * side;
    let mut out = Vec::with_capacity(n * c * target * target);
    for b in 0..n {
        crop_image(
            &images.data()[b * per..(b + 1) * per],
            c,
            side,
            target,
            (off, off),
            &mut out,
        );
    }
    Tensor::from_vec(&[n, c, target, target], out)
}

/// Mirrors every image left to right.
pub fn flip_horizontal(images: &Tensor) -> Result<Tensor> {
    let [_, _, _, w] = batch_dims(images)?;
    let data = images
        .data()
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Tensor::from_vec(images.dims(), data)
}

/// Random crop, flip with probability 0.5 and brightness jitter, per image.
pub fn augment(images: &Tensor, rng: &mut Rng, config: &AugmentConfig) -> Result<Tensor> {
    let [n, c, side, _] = batch_dims(images)?;
    let target = config.crop.unwrap_or(side);
    if target > side {
        return Err(Error::Data(format!("crop {target} larger than canvas {side}")));
    }
    if !config.enabled {
        return center_crop(images, target);
    }
    let per = c * side * side;
    let mut out = Vec::with_capacity(n * c * target * target);
    for b in 0..n {
        let oy = crop_offset(side, target, rng)?;
        let ox = crop_offset(side, target, rng)?;
        let start = out.len();
        crop_image(
            &images.data()[b * per..(b + 1) * per],
            c,
            side,
            target,
            (oy, ox),
            &mut out,
        );
        let img = &mut out[start..];
        if config.flip && rng.next_uniform() < 0.5 {
            img.chunks_mut(target).for_each(|row| row.reverse());
        }
        if config.brightness > 0.0 {
            for plane in img.chunks_mut(target * target) {
                let shift = config.brightness * (2.0 * rng.next_uniform() as f32 - 1.0);
                plane.iter_mut().for_each(|v| *v += shift);
            }
        }
    }
    Tensor::from_vec(&[n, c, target, target], out)
}
