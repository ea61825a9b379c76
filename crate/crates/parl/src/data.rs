//! Dataset provisioning: deterministic synthetic tasks for desk-scale runs,
//! CIFAR-10/100 binary ingestion for scale-up, and dynamic augmentation.
//!
//! All inputs live in `[0, 1]`; synthetic generators min-max scale their raw
//! features and the CIFAR loader divides pixel bytes by 255.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{digest_bytes, load_tensors, save_tensors};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Labeled inputs. `inputs` is `[n, example shape...]`, labels are class
/// ids below `num_classes`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.shape().first().copied().unwrap_or(0) != self.labels.len() {
            return Err(Error::contract("input batch dimension differs from label count"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::contract(format!(
                "label {bad} out of {} classes",
                self.num_classes
            )));
        }
        if self.inputs.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract("inputs must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Rows at the given indices, preserving order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let rows: Vec<Tensor> = indices.iter().map(|&i| self.inputs.example(i)).collect();
        Dataset {
            inputs: Tensor::stack(&rows),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            num_classes: self.num_classes,
        }
    }

    /// Disjoint train/test split by a seeded index shuffle.
    pub fn split(self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        assert!(
            (0.0..=1.0).contains(&train_fraction),
            "train fraction {train_fraction} out of range"
        );
        let mut indices: Vec<usize> = (0..self.len()).collect();
        let mut stream = rng::stream(&[seed, 0x73706c6974]);
        rng::shuffle(&mut stream, &mut indices);
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let mut train = self.select(&indices[..cut]);
        let mut test = self.select(&indices[cut..]);
        train.split = Split::Train;
        test.split = Split::Test;
        (train, test)
    }

    /// Seeded subsample without replacement (all rows if `count >= len`).
    pub fn subsample(&self, count: usize, seed: u64) -> Dataset {
        if count >= self.len() {
            return self.clone();
        }
        let mut indices: Vec<usize> = (0..self.len()).collect();
        let mut stream = rng::stream(&[seed, 0x737562]);
        rng::shuffle(&mut stream, &mut indices);
        indices.truncate(count);
        self.select(&indices)
    }

    /// Export to the checkpoint tensor container: inputs, labels, and a
    /// small metadata tensor.
    pub fn save(&self, path: &Path) -> Result<()> {
        let labels = Tensor::from_vec(
            vec![self.labels.len()],
            self.labels.iter().map(|&l| l as Scalar).collect(),
        );
        let meta = Tensor::from_vec(
            vec![2],
            vec![self.num_classes as Scalar, matches!(self.split, Split::Test) as u8 as Scalar],
        );
        save_tensors(path, &digest_bytes(b"parl dataset v1"), &[&self.inputs, &labels, &meta])
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let (digest, mut tensors) = load_tensors(path)?;
        if digest != digest_bytes(b"parl dataset v1") {
            return Err(Error::contract(format!("{} is not a dataset file", path.display())));
        }
        if tensors.len() != 3 {
            return Err(Error::contract("dataset file must hold inputs, labels, metadata"));
        }
        let meta = tensors.pop().unwrap();
        let labels = tensors.pop().unwrap();
        let inputs = tensors.pop().unwrap();
        let data = Dataset {
            inputs,
            labels: labels.data().iter().map(|&v| v as usize).collect(),
            split: if meta.data()[1] == 0.0 { Split::Train } else { Split::Test },
            num_classes: meta.data()[0] as usize,
        };
        data.validate()?;
        Ok(data)
    }
}

/// Min-max scale each feature (trailing-dims position) to `[0, 1]`.
fn min_max_scale(raw: &mut Tensor) {
    let n = raw.shape()[0];
    let features: usize = raw.shape()[1..].iter().product();
    for f in 0..features {
        let mut lo = Scalar::INFINITY;
        let mut hi = Scalar::NEG_INFINITY;
        for i in 0..n {
            let v = raw.data()[i * features + f];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = (hi - lo).max(Scalar::MIN_POSITIVE);
        for i in 0..n {
            let v = &mut raw.data_mut()[i * features + f];
            *v = (*v - lo) / range;
        }
    }
}

/// Two interleaved half-circles ("two moons"), labels 0/1, Gaussian noise,
/// features min-max scaled to `[0, 1]`. Deterministic per seed.
pub fn synth_two_moons(n: usize, noise: Scalar, seed: u64) -> Dataset {
    assert!(n >= 2, "two moons needs at least two points");
    assert!(noise >= 0.0, "noise must be non-negative");
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let mut stream = rng::stream(&[seed, 0x6d6f6f6e73]);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let arc = |count: usize, i: usize| -> Scalar {
        if count <= 1 {
            0.0
        } else {
            std::f64::consts::PI as Scalar * i as Scalar / (count - 1) as Scalar
        }
    };
    for i in 0..n_outer {
        let t = arc(n_outer, i);
        data.push(t.cos() + noise * rng::normal(&mut stream));
        data.push(t.sin() + noise * rng::normal(&mut stream));
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = arc(n_inner, i);
        data.push(1.0 - t.cos() + noise * rng::normal(&mut stream));
        data.push(0.5 - t.sin() + noise * rng::normal(&mut stream));
        labels.push(1);
    }
    let mut inputs = Tensor::from_vec(vec![n, 2], data);
    min_max_scale(&mut inputs);
    Dataset { inputs, labels, split: Split::Train, num_classes: 2 }
}

/// `classes` isotropic Gaussian blobs in the plane with seeded centers,
/// min-max scaled to `[0, 1]`.
pub fn synth_blobs(n: usize, classes: usize, spread: Scalar, seed: u64) -> Dataset {
    assert!(n >= classes && classes >= 1, "need at least one point per class");
    assert!(spread >= 0.0, "spread must be non-negative");
    let mut center_stream = rng::stream(&[seed, 0x63656e]);
    let centers: Vec<(Scalar, Scalar)> = (0..classes)
        .map(|_| {
            (rng::uniform(&mut center_stream, 0.2, 0.8), rng::uniform(&mut center_stream, 0.2, 0.8))
        })
        .collect();
    let mut stream = rng::stream(&[seed, 0x626c6f6273]);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        let (cx, cy) = centers[class];
        data.push(cx + spread * rng::normal(&mut stream));
        data.push(cy + spread * rng::normal(&mut stream));
        labels.push(class);
    }
    let mut inputs = Tensor::from_vec(vec![n, 2], data);
    min_max_scale(&mut inputs);
    Dataset { inputs, labels, split: Split::Train, num_classes: classes }
}

/// Tiny single-channel image task: each class is a smooth seeded template,
/// examples are the template plus Gaussian pixel noise, clamped to `[0, 1]`.
/// Inputs are `[n, 1, size, size]`.
pub fn synth_images(n: usize, classes: usize, size: usize, noise: Scalar, seed: u64) -> Dataset {
    assert!(classes >= 1 && size >= 2, "need classes >= 1 and size >= 2");
    const COARSE: usize = 4;
    let templates: Vec<Vec<Scalar>> = (0..classes)
        .map(|c| {
            let mut stream = rng::stream(&[seed, c as u64, 0x746d706c]);
            let coarse: Vec<Scalar> =
                (0..COARSE * COARSE).map(|_| rng::unit(&mut stream)).collect();
            // bilinear upsample of the coarse grid, squeezed into [0.25, 0.75]
            (0..size * size)
                .map(|p| {
                    let (y, x) = (p / size, p % size);
                    let fy = y as Scalar / (size - 1) as Scalar * (COARSE - 1) as Scalar;
                    let fx = x as Scalar / (size - 1) as Scalar * (COARSE - 1) as Scalar;
                    let (y0, x0) = (fy as usize, fx as usize);
                    let (y1, x1) = ((y0 + 1).min(COARSE - 1), (x0 + 1).min(COARSE - 1));
                    let (wy, wx) = (fy - y0 as Scalar, fx - x0 as Scalar);
                    let v = coarse[y0 * COARSE + x0] * (1.0 - wy) * (1.0 - wx)
                        + coarse[y0 * COARSE + x1] * (1.0 - wy) * wx
                        + coarse[y1 * COARSE + x0] * wy * (1.0 - wx)
                        + coarse[y1 * COARSE + x1] * wy * wx;
                    0.25 + 0.5 * v
                })
                .collect()
        })
        .collect();
    let mut stream = rng::stream(&[seed, 0x696d67]);
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for &t in &templates[class] {
            data.push((t + noise * rng::normal(&mut stream)).clamp(0.0, 1.0));
        }
        labels.push(class);
    }
    Dataset {
        inputs: Tensor::from_vec(vec![n, 1, size, size], data),
        labels,
        split: Split::Train,
        num_classes: classes,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    fn record_len(&self) -> usize {
        match self {
            CifarVariant::Cifar10 => 3073,
            CifarVariant::Cifar100 => 3074,
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Parse a CIFAR binary batch file.
///
/// CIFAR-10 records are 3073 bytes: one label byte then 3072 pixel bytes
/// (channel-planar R, G, B, each a row-major 32x32 plane). CIFAR-100
/// records carry a coarse then a fine label byte; the fine label is used.
/// Pixels are scaled to `[0, 1]`.
pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let record_len = variant.record_len();
    if bytes.len() % record_len != 0 {
        let offset = (bytes.len() / record_len) * record_len;
        return Err(Error::parse(
            offset as u64,
            format!(
                "file size {} is not a multiple of the {record_len}-byte record length",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / record_len;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(record_len).enumerate() {
        let offset = (i * record_len) as u64;
        let label = match variant {
            CifarVariant::Cifar10 => {
                let l = record[0] as usize;
                if l >= 10 {
                    return Err(Error::parse(offset, format!("label byte {l} out of range 0..10")));
                }
                l
            }
            CifarVariant::Cifar100 => {
                let coarse = record[0] as usize;
                let fine = record[1] as usize;
                if coarse >= 20 {
                    return Err(Error::parse(
                        offset,
                        format!("coarse label byte {coarse} out of range 0..20"),
                    ));
                }
                if fine >= 100 {
                    return Err(Error::parse(
                        offset + 1,
                        format!("fine label byte {fine} out of range 0..100"),
                    ));
                }
                fine
            }
        };
        labels.push(label);
        let pixel_start = record_len - 3072;
        data.extend(record[pixel_start..].iter().map(|&b| b as Scalar / 255.0));
    }
    Ok(Dataset {
        inputs: Tensor::from_vec(vec![n, 3, 32, 32], data),
        labels,
        split: Split::Train,
        num_classes: variant.num_classes(),
    })
}

/// Augmentation policy: applied per example, per call, never materialized
/// ahead of time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Maximum integer shift in pixels (both axes), zero fill.
    pub max_shift: usize,
    /// Horizontal flip with probability one half.
    pub flip: bool,
    /// Zero-pad by this much on every side, then crop at a random offset.
    pub crop_pad: usize,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn none() -> Self {
        AugmentSpec { max_shift: 0, flip: false, crop_pad: 0, seed: 0 }
    }

    pub fn is_identity(&self) -> bool {
        self.max_shift == 0 && !self.flip && self.crop_pad == 0
    }
}

/// Horizontal flip of one `[c, h, w]` image.
pub fn hflip(img: &Tensor) -> Tensor {
    assert_eq!(img.rank(), 3, "hflip needs [c, h, w]");
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = img.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(ch * h + y) * w + x] = img.data()[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    out
}

/// Integer shift with zero fill: output pixel (y, x) reads input
/// (y - dy, x - dx).
pub fn shift_image(img: &Tensor, dy: isize, dx: isize) -> Tensor {
    assert_eq!(img.rank(), 3, "shift needs [c, h, w]");
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros(img.shape());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sy = y as isize - dy;
                let sx = x as isize - dx;
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    out.data_mut()[(ch * h + y) * w + x] =
                        img.data()[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Zero-pad by `pad` on every side and crop back to the original size at
/// offset (oy, ox) in `0..=2*pad`.
fn pad_crop(img: &Tensor, pad: usize, oy: usize, ox: usize) -> Tensor {
    // reading the padded image at (oy + y, ox + x) equals a shift by
    // (pad - oy, pad - ox) with zero fill
    shift_image(img, pad as isize - oy as isize, pad as isize - ox as isize)
}

/// Apply the augmentation policy to an image batch `[b, c, h, w]`.
///
/// Per example, independently: pad-and-random-crop, horizontal flip with
/// probability one half, then a random integer shift. Each example draws
/// from its own derived stream, so the result is deterministic under the
/// spec seed and independent of batch order.
pub fn augment(batch: &Tensor, spec: &AugmentSpec) -> Result<Tensor> {
    if batch.rank() != 4 {
        return Err(Error::contract(format!(
            "augmentation needs an image batch [b, c, h, w], got {:?}",
            batch.shape()
        )));
    }
    if spec.is_identity() {
        return Ok(batch.clone());
    }
    let n = batch.shape()[0];
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut stream = rng::stream(&[spec.seed, i as u64, 0x617567]);
        let mut img = batch.example(i);
        if spec.crop_pad > 0 {
            let oy = rng::below(&mut stream, 2 * spec.crop_pad + 1);
            let ox = rng::below(&mut stream, 2 * spec.crop_pad + 1);
            img = pad_crop(&img, spec.crop_pad, oy, ox);
        }
        if spec.flip && rng::unit(&mut stream) < 0.5 {
            img = hflip(&img);
        }
        if spec.max_shift > 0 {
            let range = 2 * spec.max_shift + 1;
            let dy = rng::below(&mut stream, range) as isize - spec.max_shift as isize;
            let dx = rng::below(&mut stream, range) as isize - spec.max_shift as isize;
            img = shift_image(&img, dy, dx);
        }
        rows.push(img);
    }
    Ok(Tensor::stack(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moons_is_deterministic() {
        let a = synth_two_moons(100, 0.1, 7);
        let b = synth_two_moons(100, 0.1, 7);
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.labels, b.labels);
        let c = synth_two_moons(100, 0.1, 8);
        assert_ne!(a.inputs, c.inputs);
    }

    #[test]
    fn noiseless_moons_lie_on_the_canonical_arcs() {
        // regenerate the raw arcs in the test, recover the min-max transform,
        // and check the circle equations exactly
        let n = 80;
        let data = synth_two_moons(n, 0.0, 3);
        data.validate().unwrap();
        let n_outer = n / 2;
        let mut raw = Vec::with_capacity(n * 2);
        for i in 0..n_outer {
            let t = std::f64::consts::PI * i as f64 / (n_outer - 1) as f64;
            raw.push(t.cos());
            raw.push(t.sin());
        }
        for i in 0..(n - n_outer) {
            let t = std::f64::consts::PI * i as f64 / ((n - n_outer) - 1) as f64;
            raw.push(1.0 - t.cos());
            raw.push(0.5 - t.sin());
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for pair in raw.chunks(2) {
            for d in 0..2 {
                lo[d] = lo[d].min(pair[d]);
                hi[d] = hi[d].max(pair[d]);
            }
        }
        for i in 0..n {
            let x = data.inputs.row(i)[0] as f64 * (hi[0] - lo[0]) + lo[0];
            let y = data.inputs.row(i)[1] as f64 * (hi[1] - lo[1]) + lo[1];
            let on_outer = (x * x + y * y - 1.0).abs() < 1e-9 && y >= -1e-9;
            let on_inner =
                ((x - 1.0).powi(2) + (y - 0.5).powi(2) - 1.0).abs() < 1e-9 && y <= 0.5 + 1e-9;
            assert!(on_outer || on_inner, "point {i} ({x}, {y}) is off both arcs");
            assert_eq!(data.labels[i] == 0, on_outer, "label mismatch at {i}");
        }
    }

    #[test]
    fn moons_inputs_stay_in_unit_range() {
        for seed in 0..3 {
            synth_two_moons(500, 0.25, seed).validate().unwrap();
        }
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let d = synth_blobs(90, 3, 0.05, 11);
        d.validate().unwrap();
        for class in 0..3 {
            assert_eq!(d.labels.iter().filter(|&&l| l == class).count(), 30);
        }
        assert_eq!(d.inputs, synth_blobs(90, 3, 0.05, 11).inputs);
    }

    #[test]
    fn images_are_deterministic_and_in_range() {
        let d = synth_images(20, 2, 8, 0.1, 5);
        d.validate().unwrap();
        assert_eq!(d.inputs.shape(), &[20, 1, 8, 8]);
        assert_eq!(d.inputs, synth_images(20, 2, 8, 0.1, 5).inputs);
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let d = synth_two_moons(101, 0.1, 2);
        let inputs = d.inputs.clone();
        let (train, test) = d.split(0.7, 9);
        assert_eq!(train.split, Split::Train);
        assert_eq!(test.split, Split::Test);
        assert_eq!(train.len() + test.len(), 101);
        // recombine and compare as multisets of rows
        let mut seen: Vec<Vec<u64>> = Vec::new();
        for set in [&train, &test] {
            for i in 0..set.len() {
                seen.push(set.inputs.example(i).data().iter().map(|v| v.to_bits()).collect());
            }
        }
        let mut expect: Vec<Vec<u64>> = (0..101)
            .map(|i| inputs.example(i).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        seen.sort();
        expect.sort();
        assert_eq!(seen, expect);
    }

    #[test]
    fn dataset_round_trips_through_container() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("moons.parl");
        let d = synth_two_moons(30, 0.05, 4);
        d.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(loaded.inputs, d.inputs);
        assert_eq!(loaded.labels, d.labels);
        assert_eq!(loaded.num_classes, 2);
    }

    // ── CIFAR parsing ────────────────────────────────────────────────────

    fn cifar10_record(label: u8, fill: u8) -> Vec<u8> {
        let mut rec = vec![label];
        rec.extend(std::iter::repeat(fill).take(3072));
        rec
    }

    #[test]
    fn cifar10_fixture_decodes_to_known_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        // two records with hand-picked bytes: first has R plane 10, G 20,
        // B 30; second is all 255
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat(10u8).take(1024));
        bytes.extend(std::iter::repeat(20u8).take(1024));
        bytes.extend(std::iter::repeat(30u8).take(1024));
        bytes.extend(cifar10_record(7, 255));
        std::fs::write(&path, &bytes).unwrap();

        let d = load_cifar_binary(&path, CifarVariant::Cifar10).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![3, 7]);
        assert_eq!(d.inputs.shape(), &[2, 3, 32, 32]);
        let ex0 = d.inputs.example(0);
        assert!((ex0.data()[0] - 10.0 / 255.0).abs() < 1e-12); // R plane
        assert!((ex0.data()[1024] - 20.0 / 255.0).abs() < 1e-12); // G plane
        assert!((ex0.data()[2048] - 30.0 / 255.0).abs() < 1e-12); // B plane
        assert!(d.inputs.example(1).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cifar10_all_zero_record_is_black_label_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.bin");
        std::fs::write(&path, cifar10_record(0, 0)).unwrap();
        let d = load_cifar_binary(&path, CifarVariant::Cifar10).unwrap();
        assert_eq!(d.labels, vec![0]);
        assert!(d.inputs.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cifar10_truncated_record_names_the_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        let mut bytes = cifar10_record(1, 9);
        bytes.extend_from_slice(&[5u8, 1, 2, 3]); // 4 stray bytes
        std::fs::write(&path, &bytes).unwrap();
        let err = load_cifar_binary(&path, CifarVariant::Cifar10).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 3073),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn cifar10_label_out_of_range_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("badlabel.bin");
        std::fs::write(&path, cifar10_record(10, 0)).unwrap();
        let err = load_cifar_binary(&path, CifarVariant::Cifar10).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
    }

    #[test]
    fn cifar100_uses_the_fine_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c100.bin");
        let mut bytes = vec![4u8, 42u8];
        bytes.extend(std::iter::repeat(128u8).take(3072));
        std::fs::write(&path, &bytes).unwrap();
        let d = load_cifar_binary(&path, CifarVariant::Cifar100).unwrap();
        assert_eq!(d.labels, vec![42]);
        assert_eq!(d.num_classes, 100);
    }

    // ── Augmentation ─────────────────────────────────────────────────────

    #[test]
    fn identity_augmentation_is_identity() {
        let d = synth_images(6, 2, 8, 0.1, 1);
        let out = augment(&d.inputs, &AugmentSpec::none()).unwrap();
        assert_eq!(out, d.inputs);
    }

    #[test]
    fn flipping_twice_restores_the_image() {
        let d = synth_images(1, 1, 8, 0.2, 2);
        let img = d.inputs.example(0);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_ne!(hflip(&img), img);
    }

    #[test]
    fn shift_matches_hand_computed_pixels() {
        // 1-channel 4x4 ramp shifted one pixel right: column 0 becomes zero
        // fill and every other column picks up its left neighbor
        let img = Tensor::from_vec(vec![1, 4, 4], (0..16).map(|v| v as Scalar / 16.0).collect());
        let shifted = shift_image(&img, 0, 1);
        for y in 0..4 {
            assert_eq!(shifted.data()[y * 4], 0.0);
            for x in 1..4 {
                assert_eq!(shifted.data()[y * 4 + x], img.data()[y * 4 + x - 1]);
            }
        }
        // and shifting down by one zeroes the first row
        let down = shift_image(&img, 1, 0);
        assert!(down.data()[..4].iter().all(|&v| v == 0.0));
        assert_eq!(down.data()[4..8], img.data()[0..4]);
    }

    #[test]
    fn augmentation_is_deterministic_and_keeps_range() {
        let d = synth_images(10, 2, 8, 0.1, 3);
        let spec = AugmentSpec { max_shift: 2, flip: true, crop_pad: 1, seed: 77 };
        let a = augment(&d.inputs, &spec).unwrap();
        let b = augment(&d.inputs, &spec).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let other = augment(&d.inputs, &AugmentSpec { seed: 78, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn augmenting_flat_data_is_a_contract_violation() {
        let d = synth_two_moons(10, 0.1, 1);
        let err = augment(&d.inputs, &AugmentSpec::none()).unwrap_err();
        let err2 =
            augment(&d.inputs, &AugmentSpec { max_shift: 1, flip: false, crop_pad: 0, seed: 0 });
        assert!(matches!(err, Error::Contract(_)));
        assert!(err2.is_err());
    }
}
