//! Image datasets: the CIFAR-10 binary archive and a seeded synthetic
//! stand-in with the same in-memory layout.
//!
//! Pixels are kept as bytes and mapped to reals (`v / 127.5 − 1`) only when
//! a batch is assembled.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Zero-padding (in pixels) before the random crop.
pub const AUGMENT_PAD: usize = 4;

/// Maps a pixel byte to `[−1, 1]`.
pub fn pixel_to_real(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Labelled images stored channel-major as bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        pixels: Vec<u8>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::data(
                format!(
                    "{} pixel bytes do not fit {} images of {channels}×{height}×{width}",
                    pixels.len(),
                    labels.len()
                ),
                None,
            ));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
            return Err(Error::data(
                format!("label {} of image {i} is not below {classes}", labels[i]),
                None,
            ));
        }
        Ok(Dataset {
            channels,
            height,
            width,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.image_len();
        &self.pixels[i * per..(i + 1) * per]
    }

    /// The first `n` images (all when `n ≥ len`).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_empty()
        }
    }

    /// The first `n` images and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let cut = n * self.image_len();
        (
            self.take(n),
            Dataset {
                pixels: self.pixels[cut..].to_vec(),
                labels: self.labels[n..].to_vec(),
                ..self.clone_empty()
            },
        )
    }

    fn clone_empty(&self) -> Dataset {
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Assembles images `indices` into an `(n, C, H, W)` tensor. With an rng
    /// every image gets a random crop of its 4-pixel padded version and a
    /// random horizontal flip; padding pixels read as −1.
    pub fn batch<R: Rng + ?Sized>(&self, indices: &[usize], mut augment: Option<&mut R>) -> (Tensor, Vec<usize>) {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            let img = self.image(i);
            let (dy, dx, flip) = match augment.as_deref_mut() {
                Some(rng) => (
                    rng.gen_range(0..=2 * AUGMENT_PAD) as isize - AUGMENT_PAD as isize,
                    rng.gen_range(0..=2 * AUGMENT_PAD) as isize - AUGMENT_PAD as isize,
                    rng.gen_bool(0.5),
                ),
                None => (0, 0, false),
            };
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let xs = if flip { w - 1 - x } else { x };
                        let (sy, sx) = (y as isize + dy, xs as isize + dx);
                        let v = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            -1.0
                        } else {
                            pixel_to_real(img[(ci * h + sy as usize) * w + sx as usize])
                        };
                        data.push(v);
                    }
                }
            }
        }
        let labels = indices.iter().map(|&i| self.label(i)).collect();
        (Tensor::from_parts([indices.len(), c, h, w], data), labels)
    }

    /// Index batches for one epoch; shuffled when an rng is given. The last
    /// batch may be short.
    pub fn epoch_batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: Option<&mut R>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Class-structured synthetic images: every class has a smooth random
    /// template and samples add independent pixel noise. Deterministic in
    /// `seed`; labels cycle so classes stay balanced.
    pub fn synthetic(n: usize, channels: usize, height: usize, width: usize, classes: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per = channels * height * width;
        let templates: Vec<Vec<f32>> = (0..classes)
            .map(|_| {
                // a few random low-frequency waves per class
                let waves: Vec<(f32, f32, f32, f32)> = (0..3)
                    .map(|_| {
                        (
                            rng.gen_range(0.5..2.5),
                            rng.gen_range(0.5..2.5),
                            rng.gen_range(0.0..std::f32::consts::TAU),
                            rng.gen_range(-1.0..1.0),
                        )
                    })
                    .collect();
                let mut t = Vec::with_capacity(per);
                for c in 0..channels {
                    for y in 0..height {
                        for x in 0..width {
                            let (u, v) = (y as f32 / height as f32, x as f32 / width as f32);
                            let s: f32 = waves
                                .iter()
                                .enumerate()
                                .map(|(k, &(fy, fx, ph, amp))| {
                                    let phase = ph + c as f32 * (k as f32 + 1.0);
                                    amp * (std::f32::consts::TAU * (fy * u + fx * v) + phase).sin()
                                })
                                .sum();
                            t.push(s / 3.0);
                        }
                    }
                }
                t
            })
            .collect();
        let mut pixels = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            labels.push(class as u8);
            for &t in &templates[class] {
                let v = t + rng.gen_range(-0.6f32..0.6);
                pixels.push(((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8);
            }
        }
        Dataset {
            channels,
            height,
            width,
            classes,
            pixels,
            labels,
        }
    }
}

/// Parses CIFAR-10 binary records. Truncation or a label above 9 is a data
/// error carrying the byte offset of the offending record.
pub fn parse_cifar_records(bytes: &[u8]) -> Result<Dataset> {
    let whole = bytes.len() / CIFAR_RECORD;
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = (whole * CIFAR_RECORD) as u64;
        return Err(Error::data(
            format!(
                "truncated record: {} trailing bytes (records are {CIFAR_RECORD} bytes)",
                bytes.len() - whole * CIFAR_RECORD
            ),
            Some(offset),
        ));
    }
    let mut pixels = Vec::with_capacity(whole * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(whole);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::data(
                format!("label byte {} is not a CIFAR-10 class", rec[0]),
                Some((i * CIFAR_RECORD) as u64),
            ));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(Dataset {
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        classes: CIFAR_CLASSES,
        pixels,
        labels,
    })
}

fn read_archive_file(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingData(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let ds = parse_cifar_records(&bytes).map_err(|e| match e {
        Error::Data { message, offset } => Error::Data {
            message: format!("{}: {message}", path.display()),
            offset,
        },
        other => other,
    })?;
    if ds.len() != CIFAR_RECORDS_PER_FILE {
        return Err(Error::data(
            format!(
                "{}: {} records, expected {CIFAR_RECORDS_PER_FILE}",
                path.display(),
                ds.len()
            ),
            Some(bytes.len() as u64),
        ));
    }
    Ok(ds)
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut out = parts[0].clone_empty();
    for p in parts {
        out.pixels.extend(p.pixels);
        out.labels.extend(p.labels);
    }
    out
}

pub struct Cifar10 {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads the five training archives and the test archive from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<Cifar10> {
    if !dir.is_dir() {
        return Err(Error::MissingData(dir.to_path_buf()));
    }
    // report an incomplete download before reading ~180 MB
    if let Some(missing) = CIFAR_TRAIN_FILES
        .iter()
        .chain([&CIFAR_TEST_FILE])
        .map(|f| dir.join(f))
        .find(|p| !p.is_file())
    {
        return Err(Error::MissingData(missing));
    }
    let train = CIFAR_TRAIN_FILES
        .iter()
        .map(|f| read_archive_file(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let test = read_archive_file(&dir.join(CIFAR_TEST_FILE))?;
    Ok(Cifar10 {
        train: concat(train),
        test,
    })
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
    fn affine_endpoints() {
        assert!((pixel_to_real(0) + 1.0).abs() < 1e-6);
        assert!((pixel_to_real(255) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn parses_channel_major_records() {
        let mut r = record(7, 0);
        // first pixel of the green plane
        r[1 + 1024] = 255;
        let ds = parse_cifar_records(&r).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.label(0), 7);
        let (x, y) = ds.batch::<ChaCha8Rng>(&[0], None);
        assert_eq!(y, vec![7]);
        assert_eq!(x.at([0, 1, 0, 0]), 1.0);
        assert_eq!(x.at([0, 0, 0, 0]), -1.0);
    }

    #[test]
    fn label_ten_is_data_error_with_offset() {
        let mut bytes = record(1, 3);
        bytes.extend(record(10, 3));
        match parse_cifar_records(&bytes) {
            Err(Error::Data { offset, .. }) => assert_eq!(offset, Some(CIFAR_RECORD as u64)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut bytes = record(1, 3);
        bytes.extend(&record(2, 3)[..100]);
        match parse_cifar_records(&bytes) {
            Err(Error::Data { offset, .. }) => assert_eq!(offset, Some(CIFAR_RECORD as u64)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loads_five_train_files_and_test() {
        let dir = tempfile::tempdir().unwrap();
        let file: Vec<u8> = (0..CIFAR_RECORDS_PER_FILE)
            .flat_map(|i| record((i % 10) as u8, 128))
            .collect();
        for f in CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]) {
            fs::write(dir.path().join(f), &file).unwrap();
        }
        let c = load_cifar10(dir.path()).unwrap();
        assert_eq!(c.train.len(), 50_000);
        assert_eq!(c.test.len(), 10_000);
        fs::remove_file(dir.path().join(CIFAR_TEST_FILE)).unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::MissingData(_))));
    }

    #[test]
    fn augmentation_only_moves_pixels() {
        let ds = Dataset::synthetic(4, 3, 8, 8, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, _) = ds.batch(&[0, 1, 2, 3], Some(&mut rng));
        assert_eq!(x.shape(), [4, 3, 8, 8]);
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let (plain, _) = ds.batch::<ChaCha8Rng>(&[0], None);
        let (again, _) = ds.batch::<ChaCha8Rng>(&[0], None);
        assert!(plain.bit_eq(&again));
    }

    #[test]
    fn synthetic_is_seeded_and_balanced() {
        let a = Dataset::synthetic(30, 3, 8, 8, 10, 9);
        assert_eq!(a, Dataset::synthetic(30, 3, 8, 8, 10, 9));
        assert_ne!(a, Dataset::synthetic(30, 3, 8, 8, 10, 10));
        for c in 0..10 {
            assert_eq!(a.labels().iter().filter(|&&l| l as usize == c).count(), 3);
        }
    }

    #[test]
    fn epoch_batches_cover_every_index_once() {
        let ds = Dataset::synthetic(10, 1, 2, 2, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = ds.epoch_batches(4, Some(&mut rng));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
