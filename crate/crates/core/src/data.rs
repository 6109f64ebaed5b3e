//! MNIST (IDX) and CIFAR-10 (binary) datasets with seeded epoch shuffling.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Published MNIST pixel statistics on the `[0, 1]` scale.
pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, H, W, C]`, pixels in `[0, 1]` unless standardized.
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Mean and standard deviation over every pixel.
    pub fn pixel_stats(&self) -> (f64, f64) {
        let n = self.images.len().max(1) as f64;
        let (s, s2) = self
            .images
            .data()
            .iter()
            .fold((0.0f64, 0.0f64), |(a, b), &v| (a + v as f64, b + (v as f64) * (v as f64)));
        let mean = s / n;
        (mean, (s2 / n - mean * mean).max(0.0).sqrt())
    }

    /// `(x - mean) / std` on every pixel.
    pub fn standardize(&mut self, mean: f32, std: f32) {
        self.images.data_mut().iter_mut().for_each(|v| *v = (*v - mean) / std);
    }

    /// The examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (h, w, c) = self.image_shape();
        let per = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Dataset {
            images: Tensor::new([indices.len(), h, w, c], data).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format { path: path.into(), msg: "truncated header".into() })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic { path: path.into(), expected, found });
    }
    Ok(())
}

/// Raw IDX image bytes as `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read(path)?;
    check_magic(&bytes, IDX_IMAGES_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format {
            path: path.into(),
            msg: format!("header promises {n} images of {rows}x{cols}, file holds {} pixel bytes", body.len()),
        });
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    check_magic(&bytes, IDX_LABELS_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format {
            path: path.into(),
            msg: format!("header promises {n} labels, file holds {}", body.len()),
        });
    }
    Ok(body.to_vec())
}

/// Loads an IDX image/label pair, scaling pixels by 1/255.
pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(images)?;
    let labels_v = read_idx_labels(labels)?;
    if labels_v.len() != n {
        return Err(Error::Format {
            path: labels.into(),
            msg: format!("{} labels for {n} images in {}", labels_v.len(), images.display()),
        });
    }
    if let Some(bad) = labels_v.iter().find(|&&l| l > 9) {
        return Err(Error::Format { path: labels.into(), msg: format!("label {bad} outside 0..=9") });
    }
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Dataset { images: Tensor::new([n, rows, cols, 1], data)?, labels: labels_v, classes: 10, split })
}

/// File names under an MNIST directory.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (dir.join(format!("{prefix}-images-idx3-ubyte")), dir.join(format!("{prefix}-labels-idx1-ubyte")))
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split);
    load_mnist_idx(&images, &labels, split)
}

/// `MNIST_DIR` if set, otherwise `data/mnist` under the workspace root, if it
/// holds the training images.
pub fn default_mnist_dir() -> Option<PathBuf> {
    let candidates = std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .into_iter()
        .chain([Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"), PathBuf::from("data/mnist")]);
    for dir in candidates {
        if mnist_paths(&dir, Split::Train).0.is_file() {
            return Some(dir);
        }
    }
    None
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary records (label byte, then planar R, G, B) into
/// `[N, 32, 32, 3]` images.
pub fn parse_cifar10(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            path: path.into(),
            msg: format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format { path: path.into(), msg: format!("label {} outside 0..=9", rec[0]) });
        }
        labels.push(rec[0]);
        let planes = &rec[1..];
        for px in 0..1024 {
            for ch in 0..3 {
                data.push(planes[ch * 1024 + px] as f32 / 255.0);
            }
        }
    }
    Ok(Dataset { images: Tensor::new([n, 32, 32, 3], data)?, labels, classes: 10, split })
}

/// `data_batch_{1..5}.bin` or `test_batch.bin` under `dir`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut bytes = Vec::new();
    for f in &files {
        bytes.extend(read(f)?);
    }
    parse_cifar10(&bytes, &files[0], split)
}

/// Example order for one epoch: a Fisher-Yates shuffle from a stream derived
/// from `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(seed, 0x6461_7461).derive(epoch).shuffle(&mut order);
    order
}

/// One minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B, H, W, C]`.
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    /// `[B, K]`.
    pub one_hot: Tensor<f32>,
}

/// Iterator over minibatches in a fixed order.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    drop_last: bool,
    pos: usize,
}

/// Shuffled minibatches for epoch `epoch`.
pub fn batches(data: &Dataset, batch_size: usize, seed: u64, epoch: u64, drop_last: bool) -> Batches<'_> {
    assert!(batch_size >= 1, "batch size must be positive");
    Batches { data, order: epoch_order(data.len(), seed, epoch), batch_size, drop_last, pos: 0 }
}

/// Minibatches in dataset order, for evaluation.
pub fn sequential_batches(data: &Dataset, batch_size: usize) -> Batches<'_> {
    assert!(batch_size >= 1, "batch size must be positive");
    Batches { data, order: (0..data.len()).collect(), batch_size, drop_last: false, pos: 0 }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let take = remaining.min(self.batch_size);
        let indices = self.order[self.pos..self.pos + take].to_vec();
        self.pos += take;
        let sub = self.data.subset(&indices);
        let one_hot = crate::losses::one_hot(&sub.labels, sub.classes);
        Some(Batch { indices, images: sub.images, labels: sub.labels, one_hot })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two 2x3 images with known bytes.
    fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
        let img = dir.join("img");
        let lbl = dir.join("lbl");
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        b.extend([0, 51, 102, 153, 204, 255, 255, 0, 255, 0, 255, 0]);
        std::fs::write(&img, b).unwrap();
        std::fs::write(&lbl, [0, 0, 8, 1, 0, 0, 0, 2, 7, 3]).unwrap();
        (img, lbl)
    }

    #[test]
    fn idx_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture(dir.path());
        let d = load_mnist_idx(&img, &lbl, Split::Train).unwrap();
        assert_eq!(d.images.shape(), [2, 2, 3, 1]);
        assert_eq!(d.labels, [7, 3]);
        assert_eq!(&d.images.data()[..6], &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(&d.images.data()[6..], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn corrupted_magic_names_file_and_expectation() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture(dir.path());
        let mut b = std::fs::read(&img).unwrap();
        b[3] = 0x01;
        std::fs::write(&img, b).unwrap();
        let err = load_mnist_idx(&img, &lbl, Split::Train).unwrap_err();
        assert!(matches!(err, Error::BadMagic { expected: IDX_IMAGES_MAGIC, found: 0x801, .. }));
        let msg = err.to_string();
        assert!(msg.contains("img") && msg.contains("0x00000803"), "{msg}");
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = fixture(dir.path());
        let b = std::fs::read(&img).unwrap();
        std::fs::write(&img, &b[..b.len() - 1]).unwrap();
        assert!(matches!(load_mnist_idx(&img, &lbl, Split::Train), Err(Error::Format { .. })));
        std::fs::write(&img, &b).unwrap();
        std::fs::write(&lbl, [0, 0, 8, 1, 0, 0, 0, 1, 7]).unwrap();
        let err = load_mnist_idx(&img, &lbl, Split::Train).unwrap_err().to_string();
        assert!(err.contains("1 labels for 2 images"), "{err}");
        std::fs::write(&img, [0, 0, 8]).unwrap();
        assert!(matches!(load_mnist_idx(&img, &lbl, Split::Train), Err(Error::Format { .. })));
        assert!(matches!(
            load_mnist_idx(&dir.path().join("missing"), &lbl, Split::Train),
            Err(Error::Io { .. })
        ));
    }

    fn toy(n: usize) -> Dataset {
        Dataset {
            images: Tensor::from_fn([n, 1, 1, 1], |i| i as f32),
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
            classes: 10,
            split: Split::Train,
        }
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let d = toy(17);
        let all: Vec<Batch> = batches(&d, 17, 3, 0, false).collect();
        assert_eq!(all.len(), 1);
        let mut idx = all[0].indices.clone();
        assert_ne!(idx, (0..17).collect::<Vec<_>>());
        idx.sort();
        assert_eq!(idx, (0..17).collect::<Vec<_>>());
        for (k, &i) in all[0].indices.iter().enumerate() {
            assert_eq!(all[0].images.data()[k], i as f32);
            assert_eq!(all[0].one_hot.data()[k * 10 + i % 10], 1.0);
        }
    }

    #[test]
    fn epochs_are_reproducible_and_distinct() {
        let d = toy(50);
        let a: Vec<_> = batches(&d, 8, 1, 4, false).map(|b| b.indices).collect();
        let b: Vec<_> = batches(&d, 8, 1, 4, false).map(|b| b.indices).collect();
        let c: Vec<_> = batches(&d, 8, 1, 5, false).map(|b| b.indices).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn batches_partition_the_epoch() {
        let d = toy(50);
        let sizes: Vec<usize> = batches(&d, 8, 2, 0, false).map(|b| b.indices.len()).collect();
        assert_eq!(sizes, [8, 8, 8, 8, 8, 8, 2]);
        let mut all: Vec<usize> = batches(&d, 8, 2, 0, false).flat_map(|b| b.indices).collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(batches(&d, 8, 2, 0, true).count(), 6);
    }

    #[test]
    fn cifar_records_are_interleaved() {
        let mut rec = vec![4u8];
        rec.extend((0..3072).map(|i| (i / 1024) as u8 * 100));
        let d = parse_cifar10(&rec, Path::new("x.bin"), Split::Test).unwrap();
        assert_eq!(d.labels, [4]);
        assert_eq!(d.images.shape(), [1, 32, 32, 3]);
        assert_eq!(&d.images.data()[..3], &[0.0, 100.0 / 255.0, 200.0 / 255.0]);
        assert!(parse_cifar10(&rec[1..], Path::new("x.bin"), Split::Test).is_err());
    }

    #[test]
    fn mnist_files_when_present() {
        let Some(dir) = default_mnist_dir() else {
            eprintln!("MNIST not found; skipping");
            return;
        };
        let train = load_mnist(&dir, Split::Train).unwrap();
        let test = load_mnist(&dir, Split::Test).unwrap();
        assert_eq!(train.images.shape(), [60000, 28, 28, 1]);
        assert_eq!(test.len(), 10000);
        assert!(train.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let (mean, std) = train.pixel_stats();
        assert!((mean - MNIST_MEAN as f64).abs() < 5e-5, "mean {mean}");
        assert!((std - MNIST_STD as f64).abs() < 5e-5, "std {std}");
    }
}
