//! Datasets, minibatches and augmentation.
//!
//! CIFAR-10 binary records are one label byte followed by 3072 pixel bytes
//! (red plane, green plane, blue plane, each 32×32 row-major). Pixels are
//! scaled to `[0, 1]` by `v / 255`.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, Purpose};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// `(dataset index, duplicate index)` for every row.
    pub provenance: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if n != labels.len() {
            return Err(Error::dim(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::format(format!("label {l} outside [0, {classes})")));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn gather(&self, indices: &[usize]) -> Minibatch {
        let row: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Minibatch {
            images: Tensor::from_parts(shape, data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: indices.iter().map(|&i| (i, 0)).collect(),
        }
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let b = self.gather(&idx);
        Dataset { images: b.images, labels: b.labels, classes: self.classes }
    }

    fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::format("no data"))?;
        let mut shape = first.images.shape().to_vec();
        let classes = first.classes;
        shape[0] = parts.iter().map(Dataset::len).sum();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            data.extend(p.images.into_data());
            labels.extend(p.labels);
        }
        Dataset::new(Tensor::from_parts(shape, data), labels, classes)
    }
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Parses concatenated CIFAR-10 binary records.
pub fn decode_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::format("empty CIFAR-10 file"));
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(format!(
            "truncated CIFAR-10 file: {} bytes is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::format(format!("record {i}: label {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&v| f64::from(v) / 255.0));
    }
    let images = Tensor::from_parts(vec![n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], pixels);
    Dataset::new(images, labels, CIFAR_CLASSES)
}

/// Serializes a `[N, 3, 32, 32]` dataset back to CIFAR-10 binary records.
pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.sample_shape() != [CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(Error::format(format!("CIFAR-10 records are 3x32x32, got {:?}", ds.sample_shape())));
    }
    let row = CIFAR_RECORD - 1;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (i, &label) in ds.labels.iter().enumerate() {
        if label >= CIFAR_CLASSES {
            return Err(Error::format(format!("label {label} > 9")));
        }
        out.push(label as u8);
        out.extend(
            ds.images.data()[i * row..(i + 1) * row].iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}

pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_cifar10(&fs::read(path)?)
}

/// Training batches 1-5 and the test batch from a `cifar-10-batches-bin` directory.
pub fn load_cifar10_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train =
        (1..=5).map(|i| load_cifar10_binary(dir.join(format!("data_batch_{i}.bin")))).collect::<Result<Vec<_>>>()?;
    let test = load_cifar10_binary(dir.join("test_batch.bin"))?;
    Ok((Dataset::concat(train)?, test))
}

/// Gaussian class clusters around random class means in `[0, 1]^D`,
/// clamped back to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Per-sample `[C, H, W]`; flat vectors use `[D, 1, 1]`.
    pub shape: Vec<usize>,
    pub spread: f64,
    pub seed: u64,
}

impl SynthSpec {
    fn means(&self) -> Vec<Vec<f64>> {
        let dim: usize = self.shape.iter().product();
        let mut rng = keyed_rng(self.seed, Purpose::Synth, &[0]);
        (0..self.classes).map(|_| (0..dim).map(|_| rng.random::<f64>()).collect()).collect()
    }

    fn draw(&self, means: &[Vec<f64>], per_class: usize, stream: u64) -> Result<Dataset> {
        let dim = means[0].len();
        let mut rng = keyed_rng(self.seed, Purpose::Synth, &[stream]);
        let mut data = Vec::with_capacity(self.classes * per_class * dim);
        let mut labels = Vec::with_capacity(self.classes * per_class);
        for i in 0..per_class {
            for (k, mu) in means.iter().enumerate() {
                let _ = i;
                for &m in mu {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push((m + self.spread * z).clamp(0.0, 1.0));
                }
                labels.push(k);
            }
        }
        let mut shape = vec![labels.len()];
        shape.extend(&self.shape);
        Dataset::new(Tensor::new(shape, data)?, labels, self.classes)
    }

    fn check(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.per_class == 0 || self.shape.len() != 3 || self.shape.contains(&0) {
            return Err(Error::config("synthetic data needs samples and a [C,H,W] shape"));
        }
        if self.spread.is_nan() || self.spread < 0.0 {
            return Err(Error::config("spread must be non-negative"));
        }
        Ok(())
    }
}

pub fn synth_blobs(spec: &SynthSpec) -> Result<Dataset> {
    spec.check()?;
    spec.draw(&spec.means(), spec.per_class, 1)
}

/// Training set plus a held-out set drawn around the same class means.
pub fn synth_split(spec: &SynthSpec, val_per_class: usize) -> Result<(Dataset, Dataset)> {
    spec.check()?;
    let means = spec.means();
    Ok((spec.draw(&means, spec.per_class, 1)?, spec.draw(&means, val_per_class.max(1), 2)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub pad: usize,
    pub crop: (usize, usize),
    pub hflip_prob: f64,
}

impl AugmentSpec {
    /// No padding, full-size crop, no flips.
    pub fn identity(h: usize, w: usize) -> Self {
        AugmentSpec { pad: 0, crop: (h, w), hflip_prob: 0.0 }
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.crop.0 == 0 || self.crop.1 == 0 || self.crop.0 > h + 2 * self.pad || self.crop.1 > w + 2 * self.pad {
            return Err(Error::config(format!(
                "crop {}x{} does not fit {h}x{w} padded by {}",
                self.crop.0, self.crop.1, self.pad
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config("flip probability must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn is_identity(&self, h: usize, w: usize) -> bool {
        self.pad == 0 && self.crop == (h, w) && self.hflip_prob == 0.0
    }
}

/// Copies the `crop` window at `(oy, ox)` of the zero-padded image.
#[allow(clippy::too_many_arguments)]
fn crop_one(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    spec: &AugmentSpec,
    oy: usize,
    ox: usize,
    flip: bool,
    dst: &mut Vec<f64>,
) {
    let (ch, cw) = spec.crop;
    for plane in 0..c {
        for y in 0..ch {
            let sy = (oy + y) as isize - spec.pad as isize;
            for x in 0..cw {
                let xx = if flip { cw - 1 - x } else { x };
                let sx = (ox + xx) as isize - spec.pad as isize;
                let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                    0.0
                } else {
                    src[plane * h * w + sy as usize * w + sx as usize]
                };
                dst.push(v);
            }
        }
    }
}

/// Random crop from the zero-padded image plus random horizontal flip. Draws
/// are keyed by `(seed, epoch, dataset index)`.
pub fn augment(batch: &Minibatch, spec: &AugmentSpec, seed: u64, epoch: u64) -> Result<Minibatch> {
    let (n, c, h, w) = batch.images.dims4()?;
    spec.check(h, w)?;
    let (ch, cw) = spec.crop;
    let row = c * h * w;
    let mut data = Vec::with_capacity(n * c * ch * cw);
    for (i, &(index, _)) in batch.provenance.iter().enumerate() {
        let mut rng = keyed_rng(seed, Purpose::Augment, &[epoch, index as u64]);
        let oy = rng.random_range(0..=h + 2 * spec.pad - ch);
        let ox = rng.random_range(0..=w + 2 * spec.pad - cw);
        let flip = rng.random::<f64>() < spec.hflip_prob;
        crop_one(&batch.images.data()[i * row..(i + 1) * row], c, h, w, spec, oy, ox, flip, &mut data);
    }
    Ok(Minibatch {
        images: Tensor::from_parts(vec![n, c, ch, cw], data),
        labels: batch.labels.clone(),
        provenance: batch.provenance.clone(),
    })
}

/// Evaluation-time view: the centered crop, never flipped.
pub fn center_crop(images: &Tensor, spec: &AugmentSpec) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4()?;
    spec.check(h, w)?;
    let (ch, cw) = spec.crop;
    if spec.is_identity(h, w) {
        return Ok(images.clone());
    }
    let oy = (h + 2 * spec.pad - ch) / 2;
    let ox = (w + 2 * spec.pad - cw) / 2;
    let row = c * h * w;
    let mut data = Vec::with_capacity(n * c * ch * cw);
    for i in 0..n {
        crop_one(&images.data()[i * row..(i + 1) * row], c, h, w, spec, oy, ox, false, &mut data);
    }
    Ok(Tensor::from_parts(vec![n, c, ch, cw], data))
}

/// Repeats every sample `m` times consecutively: `<A, B>` becomes `<A, A, B, B>` for `m = 2`.
pub fn duplicate_minibatch(batch: &Minibatch, m: usize) -> Result<Minibatch> {
    if m == 0 {
        return Err(Error::config("duplication factor must be at least 1"));
    }
    let n = batch.len();
    let row = batch.images.numel() / n;
    let mut data = Vec::with_capacity(batch.images.numel() * m);
    let mut labels = Vec::with_capacity(n * m);
    let mut provenance = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            data.extend_from_slice(&batch.images.data()[i * row..(i + 1) * row]);
            labels.push(batch.labels[i]);
            provenance.push((batch.provenance[i].0, j));
        }
    }
    let mut shape = batch.images.shape().to_vec();
    shape[0] = n * m;
    Ok(Minibatch { images: Tensor::from_parts(shape, data), labels, provenance })
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, Purpose::Shuffle, &[epoch]));
    order
}

/// Consecutive `[start, end)` batch ranges; the last may be short.
pub fn batch_ranges(n: usize, batch: usize) -> impl Iterator<Item = Range<usize>> {
    (0..n.div_ceil(batch)).map(move |i| i * batch..((i + 1) * batch).min(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; CIFAR_RECORD];
        r[0] = label;
        r
    }

    #[test]
    fn empty_file_is_rejected() {
        assert!(matches!(decode_cifar10(&[]), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_and_bad_label_rejected() {
        let mut bytes = record(3, 7);
        bytes.pop();
        assert!(matches!(decode_cifar10(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_cifar10(&record(10, 0)), Err(Error::Format(_))));
    }

    #[test]
    fn white_record_decodes_to_ones() {
        let ds = decode_cifar10(&record(3, 255)).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels, vec![3]);
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        assert!(ds.images.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn planes_are_in_rgb_order() {
        let mut r = record(0, 0);
        r[1] = 10; // red (0,0)
        r[1 + 1024] = 20; // green (0,0)
        r[1 + 2048 + 33] = 30; // blue (1,1)
        let ds = decode_cifar10(&r).unwrap();
        let d = ds.images.data();
        assert_eq!(d[0], 10.0 / 255.0);
        assert_eq!(d[1024], 20.0 / 255.0);
        assert_eq!(d[2048 + 32 + 1], 30.0 / 255.0);
    }

    #[test]
    fn synth_is_seeded() {
        let spec = SynthSpec { classes: 3, per_class: 4, shape: vec![2, 2, 2], spread: 0.2, seed: 5 };
        assert_eq!(synth_blobs(&spec).unwrap(), synth_blobs(&spec).unwrap());
        let other = SynthSpec { seed: 6, ..spec.clone() };
        assert_ne!(synth_blobs(&spec).unwrap(), synth_blobs(&other).unwrap());
        let bad = SynthSpec { classes: 1, ..spec };
        assert!(matches!(synth_blobs(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn augment_identity_and_flip() {
        let ds = Dataset::new(Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap(), vec![0], 2).unwrap();
        let b = ds.gather(&[0]);
        let same = augment(&b, &AugmentSpec::identity(2, 2), 1, 0).unwrap();
        assert_eq!(same, b);
        let flip = AugmentSpec { pad: 0, crop: (2, 2), hflip_prob: 1.0 };
        assert_eq!(augment(&b, &flip, 1, 0).unwrap().images.data(), &[2., 1., 4., 3.]);
        let too_big = AugmentSpec { pad: 0, crop: (3, 2), hflip_prob: 0.0 };
        assert!(matches!(augment(&b, &too_big, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn augment_replays_and_keeps_labels() {
        let spec = SynthSpec { classes: 2, per_class: 3, shape: vec![1, 4, 4], spread: 0.1, seed: 1 };
        let ds = synth_blobs(&spec).unwrap();
        let b = ds.gather(&[4, 0, 2]);
        let aug = AugmentSpec { pad: 1, crop: (4, 4), hflip_prob: 0.5 };
        let a1 = augment(&b, &aug, 9, 3).unwrap();
        let a2 = augment(&b, &aug, 9, 3).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1.labels, b.labels);
        assert_eq!(a1.images.shape(), b.images.shape());
    }

    #[test]
    fn center_crop_of_padded_image_is_original() {
        let img = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let spec = AugmentSpec { pad: 2, crop: (3, 3), hflip_prob: 0.5 };
        assert_eq!(center_crop(&img, &spec).unwrap(), img);
    }

    #[test]
    fn duplicate_repeats_consecutively() {
        let ds = Dataset::new(Tensor::new(vec![2, 1, 1, 1], vec![10., 20.]).unwrap(), vec![0, 1], 2).unwrap();
        let b = ds.gather(&[0, 1]);
        let d = duplicate_minibatch(&b, 2).unwrap();
        assert_eq!(d.images.data(), &[10., 10., 20., 20.]);
        assert_eq!(d.labels, vec![0, 0, 1, 1]);
        assert_eq!(d.provenance, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(duplicate_minibatch(&b, 1).unwrap(), b);
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(17, 3, 2);
        assert_eq!(o, epoch_order(17, 3, 2));
        o.sort_unstable();
        assert_eq!(o, (0..17).collect::<Vec<_>>());
        let ranges: Vec<_> = batch_ranges(17, 5).collect();
        assert_eq!(ranges, vec![0..5, 5..10, 10..15, 15..17]);
    }
}
