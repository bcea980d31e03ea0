//! CIFAR-10 ingestion, deterministic splits and preprocessing.
//!
//! The binary release stores 10000 records per file; each record is one label
//! byte followed by 3072 pixel bytes (the red plane, then green, then blue,
//! each row-major 32x32). Examples are addressed by a single global id: the
//! official training images are `0..50000` and the test images follow.

mod preprocess;
mod split;
pub mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub use preprocess::{example_stream, preprocess, preprocess_batch, PreprocessSpec};
pub use split::{make_splits, partition_labels, LabeledPartition, SplitIndex, SplitManifest};

use crate::error::{Error, IoContext, Result};

pub const NUM_CLASSES: usize = 10;
pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const IMAGE_BYTES: usize = IMAGE_SIDE * IMAGE_SIDE * CHANNELS;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Decoded dataset plus the digest of its raw record bytes.
#[derive(Debug, Clone)]
pub struct DatasetSource {
    pub root_path: PathBuf,
    /// Hex SHA-256 over the raw records, train files in order then test.
    pub checksum: String,
    pub num_classes: usize,
    pub image_shape: (usize, usize, usize),
    train_count: usize,
    images: Vec<u8>,
    labels: Vec<u8>,
}

impl DatasetSource {
    /// Builds a source from decoded parts. Used by the synthetic generator and
    /// tests; `ingest` is the path for the real archive. The checksum is the
    /// same one `ingest` would compute over the equivalent files.
    pub fn from_parts(
        train_images: Vec<u8>,
        train_labels: Vec<u8>,
        test_images: Vec<u8>,
        test_labels: Vec<u8>,
    ) -> Result<Self> {
        if train_images.len() != train_labels.len() * IMAGE_BYTES || test_images.len() != test_labels.len() * IMAGE_BYTES
        {
            return Err(Error::shape("image bytes do not match label count"));
        }
        if let Some(&l) = train_labels.iter().chain(&test_labels).find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        let train_count = train_labels.len();
        let mut images = train_images;
        images.extend_from_slice(&test_images);
        let mut labels = train_labels;
        labels.extend_from_slice(&test_labels);
        let mut hasher = Sha256::new();
        for (i, &l) in labels.iter().enumerate() {
            hasher.update([l]);
            hasher.update(&images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]);
        }
        Ok(Self {
            root_path: PathBuf::new(),
            checksum: hex::encode(hasher.finalize()),
            num_classes: NUM_CLASSES,
            image_shape: (IMAGE_SIDE, IMAGE_SIDE, CHANNELS),
            train_count,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn train_count(&self) -> usize {
        self.train_count
    }

    pub fn test_count(&self) -> usize {
        self.labels.len() - self.train_count
    }

    /// Raw CHW bytes of example `id`.
    pub fn image(&self, id: usize) -> &[u8] {
        &self.images[id * IMAGE_BYTES..(id + 1) * IMAGE_BYTES]
    }

    pub fn label(&self, id: usize) -> usize {
        self.labels[id] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// A copy with every ground-truth label in `ids` replaced by `f(label)`.
    /// Only used to prove that distillation never consumes labels; the
    /// checksum is left untouched so provenance checks still pass.
    pub fn with_relabelled(&self, ids: &[usize], f: impl Fn(u8) -> u8) -> Self {
        let mut out = self.clone();
        for &i in ids {
            out.labels[i] = f(out.labels[i]) % NUM_CLASSES as u8;
        }
        out
    }

    /// Read-only image access that does not expose labels.
    pub fn images_only(&self) -> ImageView<'_> {
        ImageView { source: self }
    }
}

/// Image-only view over a source. The distillation path receives this type
/// so the optimizer cannot read ground truth.
#[derive(Clone, Copy)]
pub struct ImageView<'a> {
    source: &'a DatasetSource,
}

impl<'a> ImageView<'a> {
    pub fn image(&self, id: usize) -> &'a [u8] {
        self.source.image(id)
    }

    pub fn checksum(&self) -> &'a str {
        &self.source.checksum
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

fn locate(root: &Path, name: &str) -> Result<PathBuf> {
    let direct = root.join(name);
    if direct.is_file() {
        return Ok(direct);
    }
    let nested = root.join("cifar-10-batches-bin").join(name);
    if nested.is_file() {
        return Ok(nested);
    }
    Err(Error::MissingFile(direct))
}

/// Splits one batch file into (labels, images), checking record size and
/// label range. `path` is only used for error messages.
pub fn parse_batch(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let expected = RECORDS_PER_FILE * RECORD_BYTES;
    if bytes.len() != expected {
        return Err(Error::RecordSize {
            path: path.to_path_buf(),
            len: bytes.len(),
            expected,
        });
    }
    let mut labels = Vec::with_capacity(RECORDS_PER_FILE);
    let mut images = Vec::with_capacity(RECORDS_PER_FILE * IMAGE_BYTES);
    for (record, chunk) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = chunk[0];
        if label as usize >= NUM_CLASSES {
            return Err(Error::LabelRange {
                path: path.to_path_buf(),
                record,
                label,
            });
        }
        labels.push(label);
        images.extend_from_slice(&chunk[1..]);
    }
    Ok((labels, images))
}

/// Reads and validates the six binary batch files under `root`.
pub fn ingest(root: impl AsRef<Path>) -> Result<DatasetSource> {
    let root = root.as_ref();
    let mut paths = Vec::with_capacity(6);
    for name in TRAIN_FILES.iter().chain(std::iter::once(&TEST_FILE)) {
        paths.push(locate(root, name)?);
    }
    let mut hasher = Sha256::new();
    let mut images = Vec::with_capacity(6 * RECORDS_PER_FILE * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(6 * RECORDS_PER_FILE);
    for path in &paths {
        let bytes = fs::read(path).at(path)?;
        let (l, i) = parse_batch(&bytes, path)?;
        hasher.update(&bytes);
        labels.extend_from_slice(&l);
        images.extend_from_slice(&i);
    }
    log::info!("ingested {} examples from {}", labels.len(), root.display());
    Ok(DatasetSource {
        root_path: root.to_path_buf(),
        checksum: hex::encode(hasher.finalize()),
        num_classes: NUM_CLASSES,
        image_shape: (IMAGE_SIDE, IMAGE_SIDE, CHANNELS),
        train_count: TRAIN_FILES.len() * RECORDS_PER_FILE,
        images,
        labels,
    })
}

/// Encodes records in the binary layout.
pub fn encode_records(labels: &[u8], images: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.len() * RECORD_BYTES);
    for (i, &l) in labels.iter().enumerate() {
        out.push(l);
        out.extend_from_slice(&images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]);
    }
    out
}

/// Writes a full-size source (50000 + 10000) as the six binary batch files.
pub fn write_cifar_dir(source: &DatasetSource, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if source.train_count() != TRAIN_FILES.len() * RECORDS_PER_FILE || source.test_count() != RECORDS_PER_FILE {
        return Err(Error::invalid("binary layout needs exactly 50000 train and 10000 test examples"));
    }
    fs::create_dir_all(dir).at(dir)?;
    let names = TRAIN_FILES.iter().chain(std::iter::once(&TEST_FILE));
    for (f, name) in names.enumerate() {
        let lo = f * RECORDS_PER_FILE;
        let hi = lo + RECORDS_PER_FILE;
        let bytes = encode_records(&source.labels[lo..hi], &source.images[lo * IMAGE_BYTES..hi * IMAGE_BYTES]);
        let path = dir.join(name);
        fs::write(&path, bytes).at(&path)?;
    }
    Ok(())
}
