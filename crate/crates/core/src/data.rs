//! MNIST ingestion and client partitioning.
//!
//! IDX layout (all integers big-endian):
//!
//! ```text
//! images: 0x00000803 | count u32 | rows u32 | cols u32 | count*rows*cols bytes
//! labels: 0x00000801 | count u32 | count bytes
//! ```
//!
//! Pixels are scaled to `[0, 1]` by dividing by 255.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabeledExample;
use crate::rng;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub split: Split,
    pub rows: usize,
    pub cols: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.rows * self.cols
    }

    /// Copies the examples at `indices` into a standalone shard.
    pub fn subset(&self, indices: &[usize]) -> Vec<LabeledExample> {
        indices.iter().map(|&i| self.examples[i].clone()).collect()
    }

    /// Serializes back to `(images, labels)` IDX byte streams.
    pub fn to_idx_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let n = self.examples.len() as u32;
        let mut images = Vec::with_capacity(16 + self.examples.len() * self.n_features());
        images.extend(IMAGE_MAGIC.to_be_bytes());
        images.extend(n.to_be_bytes());
        images.extend((self.rows as u32).to_be_bytes());
        images.extend((self.cols as u32).to_be_bytes());
        let mut labels = Vec::with_capacity(8 + self.examples.len());
        labels.extend(LABEL_MAGIC.to_be_bytes());
        labels.extend(n.to_be_bytes());
        for ex in &self.examples {
            images.extend(ex.features.iter().map(|&f| (f * 255.0).round() as u8));
            labels.push(ex.label as u8);
        }
        (images, labels)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let end = self.pos + 4;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Ingestion {
                path: self.path.to_path_buf(),
                field,
                reason: "file ends inside the header".into(),
            })?;
        self.pos = end;
        Ok(u32::from_be_bytes(slice.try_into().expect("4-byte slice")))
    }

    fn payload(&self, field: &'static str, len: usize) -> Result<&'a [u8]> {
        let rest = &self.bytes[self.pos..];
        if rest.len() < len {
            return Err(Error::Ingestion {
                path: self.path.to_path_buf(),
                field,
                reason: format!("expected {len} bytes, found {}", rest.len()),
            });
        }
        Ok(&rest[..len])
    }
}

fn bad_magic(path: &Path, expected: u32, found: u32) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        field: "magic",
        reason: format!("expected {expected:#010x}, found {found:#010x}"),
    }
}

/// Parses IDX image and label byte streams. Paths are used only in error messages.
pub fn parse_idx(
    image_bytes: &[u8],
    label_bytes: &[u8],
    images_path: &Path,
    labels_path: &Path,
    split: Split,
) -> Result<Dataset> {
    let mut img = Reader {
        bytes: image_bytes,
        pos: 0,
        path: images_path,
    };
    let magic = img.u32("magic")?;
    if magic != IMAGE_MAGIC {
        return Err(bad_magic(images_path, IMAGE_MAGIC, magic));
    }
    let count = img.u32("count")? as usize;
    let rows = img.u32("rows")? as usize;
    let cols = img.u32("cols")? as usize;
    let pixels = img.payload("pixels", count * rows * cols)?;

    let mut lab = Reader {
        bytes: label_bytes,
        pos: 0,
        path: labels_path,
    };
    let magic = lab.u32("magic")?;
    if magic != LABEL_MAGIC {
        return Err(bad_magic(labels_path, LABEL_MAGIC, magic));
    }
    let label_count = lab.u32("count")? as usize;
    if label_count != count {
        return Err(Error::Ingestion {
            path: labels_path.to_path_buf(),
            field: "count",
            reason: format!("{label_count} labels for {count} images"),
        });
    }
    let labels = lab.payload("labels", count)?;
    if count == 0 {
        return Err(Error::Ingestion {
            path: images_path.to_path_buf(),
            field: "count",
            reason: "dataset is empty".into(),
        });
    }

    let dim = rows * cols;
    let mut examples = Vec::with_capacity(count);
    for (i, &label) in labels.iter().enumerate() {
        if label as usize >= NUM_CLASSES {
            return Err(Error::Ingestion {
                path: labels_path.to_path_buf(),
                field: "labels",
                reason: format!("label {label} at index {i} outside [0, {NUM_CLASSES})"),
            });
        }
        let features = pixels[i * dim..(i + 1) * dim]
            .iter()
            .map(|&p| f64::from(p) / 255.0)
            .collect();
        examples.push(LabeledExample {
            features,
            label: label as usize,
        });
    }
    Ok(Dataset {
        examples,
        split,
        rows,
        cols,
    })
}

pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels, images_path, labels_path, split)
}

/// Canonical file names inside an MNIST directory.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir, split);
    load_idx(&images, &labels, split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Equal,
    Random,
}

impl PartitionMode {
    pub fn group_name(self) -> &'static str {
        match self {
            PartitionMode::Equal => "Equal",
            PartitionMode::Random => "Random",
        }
    }
}

/// Example indices held by each client.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
    pub mode: PartitionMode,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, rng::Stream::Partition, 0, 0));
    idx
}

fn cut(indices: Vec<usize>, sizes: &[usize], mode: PartitionMode) -> Partition {
    let mut rest = indices.as_slice();
    let mut assignments = Vec::with_capacity(sizes.len());
    for &s in sizes {
        let (head, tail) = rest.split_at(s);
        assignments.push(head.to_vec());
        rest = tail;
    }
    Partition { assignments, mode }
}

fn check_clients(n_examples: usize, clients: usize) -> Result<()> {
    if clients == 0 {
        return Err(Error::config("total_clients", "must be at least 1"));
    }
    if clients > n_examples {
        return Err(Error::config(
            "total_clients",
            format!("{clients} clients for {n_examples} examples"),
        ));
    }
    Ok(())
}

/// Shuffle, then cut into `M` shards of `⌊n/M⌋`; the first `n mod M` clients get one extra.
pub fn partition_equal(n_examples: usize, clients: usize, seed: u64) -> Result<Partition> {
    check_clients(n_examples, clients)?;
    let base = n_examples / clients;
    let extra = n_examples % clients;
    let sizes: Vec<usize> = (0..clients)
        .map(|i| base + usize::from(i < extra))
        .collect();
    Ok(cut(
        shuffled_indices(n_examples, seed),
        &sizes,
        PartitionMode::Equal,
    ))
}

/// Shuffle, reserve `min_size` per client, then split the remaining pool at
/// `M − 1` uniform cut points.
pub fn partition_random(
    n_examples: usize,
    clients: usize,
    seed: u64,
    min_size: usize,
) -> Result<Partition> {
    check_clients(n_examples, clients)?;
    if min_size == 0 {
        return Err(Error::config("min_shard_size", "must be at least 1"));
    }
    let reserved = clients
        .checked_mul(min_size)
        .filter(|&r| r <= n_examples)
        .ok_or_else(|| {
            Error::config(
                "min_shard_size",
                format!("{clients} clients x {min_size} exceeds {n_examples} examples"),
            )
        })?;
    let pool = n_examples - reserved;
    let mut r = rng::stream(seed, rng::Stream::Partition, 1, 0);
    let mut cuts: Vec<usize> = (0..clients - 1).map(|_| r.random_range(0..=pool)).collect();
    cuts.sort_unstable();
    let mut sizes = Vec::with_capacity(clients);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(pool)) {
        sizes.push(min_size + (c - prev));
        prev = c;
    }
    Ok(cut(
        shuffled_indices(n_examples, seed),
        &sizes,
        PartitionMode::Random,
    ))
}

pub fn partition(
    mode: PartitionMode,
    n_examples: usize,
    clients: usize,
    seed: u64,
    min_size: usize,
) -> Result<Partition> {
    match mode {
        PartitionMode::Equal => partition_equal(n_examples, clients, seed),
        PartitionMode::Random => partition_random(n_examples, clients, seed, min_size),
    }
}
