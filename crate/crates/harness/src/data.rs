//! MNIST IDX loading, train/validation/test splits and Split-MNIST task streams.

use std::fs;
use std::path::{Path, PathBuf};

use backman_core::network::{Batch, Targets};
use backman_core::tensor::Mat;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const PIXEL_MEAN: f64 = 0.1307;
pub const PIXEL_STD: f64 = 0.3081;
pub const VALIDATION_SIZE: usize = 10_000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated, need {needed} bytes, have {have}")]
    Truncated { path: PathBuf, needed: usize, have: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Normalized images, one row per sample, with their class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Mat,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.cols()
    }

    pub fn select(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset { images: self.images.select_rows(idx), labels: idx.iter().map(|&i| self.labels[i]).collect(), split }
    }

    pub fn head(&self, n: usize, split: Split) -> Dataset {
        let n = n.min(self.len());
        Dataset { images: self.images.slice_rows(0, n), labels: self.labels[..n].to_vec(), split }
    }

    pub fn batch(&self) -> Batch {
        Batch::Flat(self.images.clone())
    }

    pub fn targets(&self) -> Targets {
        Targets::Classes(self.labels.clone())
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn header(bytes: &[u8], path: &Path, magic: u32, words: usize) -> Result<Vec<usize>, DataError> {
    let need = 4 * words;
    if bytes.len() < need {
        return Err(DataError::Truncated { path: path.to_path_buf(), needed: need, have: bytes.len() });
    }
    let vals: Vec<u32> = bytes[..need].chunks_exact(4).map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]])).collect();
    if vals[0] != magic {
        return Err(DataError::BadMagic { path: path.to_path_buf(), expected: magic, found: vals[0] });
    }
    Ok(vals[1..].iter().map(|&v| v as usize).collect())
}

/// Parses an IDX image file into raw pixels; returns `(count, rows*cols, pixels)`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let h = header(bytes, path, IMAGES_MAGIC, 4)?;
    let (n, size) = (h[0], h[1] * h[2]);
    let needed = n
        .checked_mul(size)
        .and_then(|p| p.checked_add(16))
        .ok_or_else(|| DataError::Invalid(format!("{}: header overflows", path.display())))?;
    if bytes.len() < needed {
        return Err(DataError::Truncated { path: path.to_path_buf(), needed, have: bytes.len() });
    }
    Ok((n, size, bytes[16..needed].to_vec()))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>, DataError> {
    let h = header(bytes, path, LABELS_MAGIC, 2)?;
    let needed = 8 + h[0];
    if bytes.len() < needed {
        return Err(DataError::Truncated { path: path.to_path_buf(), needed, have: bytes.len() });
    }
    Ok(bytes[8..needed].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label file pair. Pixels go to `[0, 1]` and are then
/// standardized with the usual MNIST mean and deviation.
pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset, DataError> {
    let (n, size, pixels) = parse_images(&read(images)?, images)?;
    let labels = parse_labels(&read(labels)?, labels)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch { images: n, labels: labels.len() });
    }
    let data = pixels.iter().map(|&p| (p as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD).collect();
    let images = Mat::new(n, size, data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Ok(Dataset { images, labels, split })
}

/// Locations of the four MNIST files.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistPaths {
    pub fn in_dir(dir: &Path) -> Self {
        MnistPaths {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    /// `MNIST_IMAGES` / `MNIST_LABELS` name the training files; the test
    /// files are looked up next to them. Falls back to `data/mnist`.
    pub fn from_env() -> Self {
        let mut p = MnistPaths::in_dir(Path::new("data/mnist"));
        if let Some(img) = std::env::var_os("MNIST_IMAGES") {
            let img = PathBuf::from(img);
            if let Some(dir) = img.parent() {
                p = MnistPaths::in_dir(dir);
            }
            p.train_images = img;
        }
        if let Some(lab) = std::env::var_os("MNIST_LABELS") {
            p.train_labels = PathBuf::from(lab);
        }
        p
    }

    pub fn exist(&self) -> bool {
        [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels].iter().all(|p| p.is_file())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

impl Mnist {
    pub fn load(paths: &MnistPaths) -> Result<Mnist, DataError> {
        Ok(Mnist {
            train: load_mnist_idx(&paths.train_images, &paths.train_labels, Split::Train)?,
            test: load_mnist_idx(&paths.test_images, &paths.test_labels, Split::Test)?,
        })
    }
}

/// Train, validation and test sets for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Shuffles the training set with `seed` and keeps its last 10,000 images for
/// validation. `train_size` then subsamples the remaining training images and
/// `test_size` draws a seeded sample of the test set (0 keeps everything).
pub fn make_splits(mnist: &Mnist, seed: u64, train_size: usize, test_size: usize) -> Result<Splits, DataError> {
    let n = mnist.train.len();
    if n <= VALIDATION_SIZE {
        return Err(DataError::Invalid(format!("{n} training images leave no room for validation")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pool = n - VALIDATION_SIZE;
    let keep = if train_size == 0 { pool } else { train_size.min(pool) };
    let test = if test_size == 0 || test_size >= mnist.test.len() {
        mnist.test.head(mnist.test.len(), Split::Test)
    } else {
        let mut idx: Vec<usize> = (0..mnist.test.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7e57));
        mnist.test.select(&idx[..test_size], Split::Test)
    };
    Ok(Splits {
        train: mnist.train.select(&order[..keep], Split::Train),
        val: mnist.train.select(&order[pool..], Split::Val),
        test,
    })
}

/// One binary task of Split-MNIST.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub classes: [usize; 2],
    pub train: Dataset,
    pub test: Dataset,
}

/// Five binary tasks that partition the ten digits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

/// Seeded pairing of digits `0..10`.
pub fn digit_pairs(seed: u64) -> Vec<[usize; 2]> {
    let mut digits: Vec<usize> = (0..10).collect();
    digits.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    digits.chunks_exact(2).map(|p| [p[0], p[1]]).collect()
}

fn task_subset(data: &Dataset, pair: [usize; 2]) -> Dataset {
    let idx: Vec<usize> = (0..data.len()).filter(|&i| pair.contains(&data.labels[i])).collect();
    let mut sub = data.select(&idx, data.split);
    for y in &mut sub.labels {
        *y = usize::from(*y == pair[1]);
    }
    sub
}

/// Splits `train` and `test` into five binary tasks labelled `{0, 1}`.
pub fn build_split_mnist(train: &Dataset, test: &Dataset, seed: u64) -> Result<TaskStream, DataError> {
    for (name, d) in [("train", train), ("test", test)] {
        if let Some(c) = (0..10).find(|c| !d.labels.contains(c)) {
            return Err(DataError::Invalid(format!("{name} set has no digit {c}")));
        }
    }
    let tasks = digit_pairs(seed)
        .into_iter()
        .map(|classes| Task { classes, train: task_subset(train, classes), test: task_subset(test, classes) })
        .collect();
    Ok(TaskStream { tasks })
}
