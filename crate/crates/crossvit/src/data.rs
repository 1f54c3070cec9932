//! Dataset ingestion: CIFAR-10 binary batches and a seeded synthetic set.
//!
//! Images are channels-first `[3×S×S]` tensors scaled to `[0, 1]` (byte 255
//! maps to exactly 1.0). Resizing to the model's input side is bilinear and
//! happens once at load time.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::resize::resize_image_bilinear;
use crate::tensor::Tensor;

/// CIFAR-10 binary record: one label byte, then 32×32 pixels stored
/// channel-planar (all red, all green, all blue), row-major.
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// An in-memory labelled image set.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub side: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Bilinearly resizes every image to `side` pixels.
    pub fn resized(&self, side: usize) -> Result<Dataset> {
        if side == self.side {
            return Ok(self.clone());
        }
        let images = self
            .images
            .iter()
            .map(|img| resize_image_bilinear(img, side, side))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            images,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            side,
        })
    }

    /// Applies per-channel normalization `(v − mean[c]) / std[c]`.
    pub fn normalized(&self, mean: [f64; 3], std: [f64; 3]) -> Result<Dataset> {
        for (c, &s) in std.iter().enumerate() {
            if s <= 0.0 {
                return Err(Error::Dataset(format!(
                    "std[{c}] must be positive, got {s}"
                )));
            }
        }
        let plane = self.side * self.side;
        let images = self
            .images
            .iter()
            .map(|img| {
                Tensor::from_fn(img.shape().to_vec(), |i| {
                    let c = i / plane;
                    (img.data()[i] - mean[c]) / std[c]
                })
            })
            .collect();
        Ok(Dataset {
            images,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            side: self.side,
        })
    }

    fn check_consistent(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Parses one CIFAR-10 binary batch file.
pub fn load_cifar10_file(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar_records(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn parse_cifar_records(bytes: &[u8]) -> std::result::Result<Dataset, String> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(format!(
            "file length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        let label = rec[0] as usize;
        if label > 9 {
            return Err(format!("record {i}: label byte {label} > 9"));
        }
        labels.push(label);
        let pixels = &rec[1..];
        images.push(Tensor::from_fn(vec![3, CIFAR_SIDE, CIFAR_SIDE], |j| {
            pixels[j] as f64 / 255.0
        }));
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: 10,
        side: CIFAR_SIDE,
    })
}

/// Loads every `*.bin` batch file in a directory, in name order.
pub fn load_cifar10_binary(dir: &Path) -> Result<Dataset> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "bin").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!(
            "no .bin files found in {}",
            dir.display()
        )));
    }
    let mut out: Option<Dataset> = None;
    for f in files {
        let part = load_cifar10_file(&f)?;
        match &mut out {
            None => out = Some(part),
            Some(ds) => {
                ds.images.extend(part.images);
                ds.labels.extend(part.labels);
            }
        }
    }
    let ds = out.expect("at least one file");
    ds.check_consistent()?;
    Ok(ds)
}

/// Writes records in the CIFAR-10 binary layout (label byte, then
/// channel-planar pixels). Values are clamped to `[0, 1]` and rounded to
/// bytes; sides other than 32 produce the same layout with longer records.
pub fn write_cifar_binary(ds: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut bytes = Vec::with_capacity(ds.len() * (1 + 3 * ds.side * ds.side));
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        bytes.push(label as u8);
        for &v in img.data() {
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Seeded synthetic dataset: one Gaussian blob per image whose position and
/// color are class-conditional, plus a little jitter. Labels cycle through
/// the classes, so counts are uniform whenever `n` is a multiple of
/// `num_classes`. Linearly separable enough for a pixel-space probe.
pub fn synth_dataset(n: usize, num_classes: usize, side: usize, seed: u64) -> Dataset {
    assert!(num_classes >= 1 && side >= 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let s = side as f64;
    for i in 0..n {
        let label = i % num_classes;
        let angle = 2.0 * std::f64::consts::PI * label as f64 / num_classes as f64;
        let jitter_r = 0.9 + 0.2 * rng.gen::<f64>();
        let cx = s / 2.0 + 0.3 * s * angle.cos() * jitter_r;
        let cy = s / 2.0 + 0.3 * s * angle.sin() * jitter_r;
        let sigma = s / 8.0;
        let color = class_color(label, num_classes);
        let amplitude = 0.8 + 0.2 * rng.gen::<f64>();
        let plane = side * side;
        // one deterministic noise draw per pixel, after the blob parameters
        let noise: Vec<f64> = (0..3 * plane).map(|_| rng.gen::<f64>() * 0.02).collect();
        images.push(Tensor::from_fn(vec![3, side, side], |j| {
            let c = j / plane;
            let y = (j % plane) / side;
            let x = j % side;
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let blob = amplitude * color[c] * (-d2 / (2.0 * sigma * sigma)).exp();
            (0.05 + blob + noise[j]).clamp(0.0, 1.0)
        }));
        labels.push(label);
    }
    Dataset {
        images,
        labels,
        num_classes,
        side,
    }
}

/// Distinct, saturated RGB color for each class.
fn class_color(label: usize, num_classes: usize) -> [f64; 3] {
    let h = 6.0 * label as f64 / num_classes as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_two_record_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[1] = 255; // first red pixel of record 0
        bytes[CIFAR_RECORD] = 9;
        bytes[CIFAR_RECORD + 1] = 128;
        std::fs::write(&path, &bytes).unwrap();

        let ds = load_cifar10_file(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 9]);
        assert_eq!(ds.images[0].data()[0], 1.0); // 255 -> exactly 1.0
        assert!((ds.images[1].data()[0] - 128.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn record_count_is_file_len_over_record_size() {
        let bytes = vec![0u8; 5 * CIFAR_RECORD];
        let ds = parse_cifar_records(&bytes).unwrap();
        assert_eq!(ds.len(), 5);
    }

    #[test]
    fn bad_length_and_bad_label_rejected() {
        assert!(parse_cifar_records(&vec![0u8; CIFAR_RECORD + 1]).is_err());
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 10;
        assert!(parse_cifar_records(&bytes).is_err());
    }

    #[test]
    fn loader_reads_directory_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        let rec = |label: u8| {
            let mut b = vec![0u8; CIFAR_RECORD];
            b[0] = label;
            b
        };
        std::fs::write(dir.path().join("b.bin"), rec(2)).unwrap();
        std::fs::write(dir.path().join("a.bin"), rec(1)).unwrap();
        std::fs::write(dir.path().join("ignored.txt"), b"x").unwrap();
        let ds = load_cifar10_binary(dir.path()).unwrap();
        assert_eq!(ds.labels, vec![1, 2]);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_dataset(20, 5, 16, 9);
        let b = synth_dataset(20, 5, 16, 9);
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert!(x.bit_eq(y));
        }
        for class in 0..5 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 4);
        }
        let c = synth_dataset(20, 5, 16, 10);
        assert!(!a.images[0].bit_eq(&c.images[0]));
    }

    #[test]
    fn synth_pixels_stay_in_unit_range() {
        let ds = synth_dataset(12, 3, 16, 0);
        for img in &ds.images {
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn cifar_write_read_round_trip() {
        let ds = synth_dataset(6, 3, 32, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.bin");
        write_cifar_binary(&ds, &path).unwrap();
        let back = load_cifar10_file(&path).unwrap();
        assert_eq!(back.labels, ds.labels);
        // bytes quantize to 1/255 steps
        for (a, b) in ds.images.iter().zip(&back.images) {
            assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn linear_probe_separates_synthetic_classes() {
        // dual-form ridge regression on raw pixels as an independent
        // separability oracle: train accuracy must clear 80%
        let ds = synth_dataset(60, 5, 16, 3);
        let n = ds.len();
        let k = ds.num_classes;
        let gram: Vec<f64> = (0..n * n)
            .map(|ij| {
                let (i, j) = (ij / n, ij % n);
                ds.images[i]
                    .data()
                    .iter()
                    .zip(ds.images[j].data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + 1.0 // bias feature
            })
            .collect();
        // solve (G + λI) A = Y by Gaussian elimination
        let lambda = 1e-3;
        let mut m = vec![0.0; n * (n + k)];
        for i in 0..n {
            for j in 0..n {
                m[i * (n + k) + j] = gram[i * n + j] + if i == j { lambda } else { 0.0 };
            }
            m[i * (n + k) + n + ds.labels[i]] = 1.0;
        }
        let w = n + k;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&a, &b| {
                    m[a * w + col]
                        .abs()
                        .partial_cmp(&m[b * w + col].abs())
                        .unwrap()
                })
                .unwrap();
            for j in 0..w {
                m.swap(col * w + j, pivot * w + j);
            }
            let p = m[col * w + col];
            for j in 0..w {
                m[col * w + j] /= p;
            }
            for row in 0..n {
                if row != col {
                    let factor = m[row * w + col];
                    for j in 0..w {
                        m[row * w + j] -= factor * m[col * w + j];
                    }
                }
            }
        }
        // predictions: G · A
        let mut correct = 0;
        for i in 0..n {
            let mut scores = vec![0.0; k];
            for j in 0..n {
                for c in 0..k {
                    scores[c] += gram[i * n + j] * m[j * w + n + c];
                }
            }
            let pred = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == ds.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / n as f64;
        assert!(acc > 0.8, "linear probe accuracy {acc}");
    }

    #[test]
    fn resize_changes_side_only() {
        let ds = synth_dataset(3, 3, 16, 0);
        let r = ds.resized(24).unwrap();
        assert_eq!(r.side, 24);
        assert_eq!(r.images[0].shape(), &[3, 24, 24]);
        assert_eq!(r.labels, ds.labels);
    }
}
