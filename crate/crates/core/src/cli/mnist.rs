//! MNIST IDX reader (big-endian headers, optionally gzipped) and the
//! known/unknown split used for open-set experiments.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datastore::{LabeledDataset, Matrix};
use crate::error::{PmalError, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let len = self.rows * self.cols;
        &self.pixels[i * len..(i + 1) * len]
    }
}

/// Reads a file, inflating it when it carries the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| PmalError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| PmalError::archive(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| PmalError::archive(path, "truncated IDX header"))
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(PmalError::archive(
            path,
            format!("bad IDX image magic {magic:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(PmalError::archive(
            path,
            format!(
                "IDX body holds {} bytes, header implies {}",
                body.len(),
                count * rows * cols
            ),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(PmalError::archive(
            path,
            format!("bad IDX label magic {magic:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(PmalError::archive(
            path,
            format!("IDX body holds {} labels, header says {count}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&read_maybe_gz(path)?, path)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read_maybe_gz(path)?, path)
}

/// One IDX image/label file pair.
#[derive(Debug, Clone)]
pub struct IdxSet {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

impl IdxSet {
    pub fn read(images: &Path, labels: &Path) -> Result<Self> {
        let images = read_idx_images(images)?;
        let labels = read_idx_labels(labels)?;
        if images.count != labels.len() {
            return Err(PmalError::Alignment(format!(
                "{} images but {} labels",
                images.count,
                labels.len()
            )));
        }
        Ok(IdxSet { images, labels })
    }

    /// Reads `train-*` and `t10k-*` files (plain or `.gz`) from `dir`.
    pub fn read_dir(dir: &Path) -> Result<(IdxSet, IdxSet)> {
        let find = |stem: &str| {
            let plain = dir.join(stem);
            let gz = dir.join(format!("{stem}.gz"));
            if gz.exists() {
                gz
            } else {
                plain
            }
        };
        Ok((
            IdxSet::read(
                &find("train-images-idx3-ubyte"),
                &find("train-labels-idx1-ubyte"),
            )?,
            IdxSet::read(
                &find("t10k-images-idx3-ubyte"),
                &find("t10k-labels-idx1-ubyte"),
            )?,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct MnistSplit {
    /// Original digit of each remapped known label.
    pub known_classes: Vec<u8>,
    pub unknown_classes: Vec<u8>,
    pub known_train: LabeledDataset,
    pub known_test: LabeledDataset,
    pub unknown_test: LabeledDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub known: Vec<u8>,
    /// Per-class cap on training samples; `None` keeps all.
    pub train_per_class: Option<usize>,
    /// Per-class cap on test samples, known and unknown alike.
    pub test_per_class: Option<usize>,
    pub seed: u64,
}

/// `count` distinct digits drawn with `seed`, ascending.
pub fn random_known_classes(count: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ks: Vec<u8> = sample(&mut rng, 10, count.min(10))
        .into_iter()
        .map(|k| k as u8)
        .collect();
    ks.sort_unstable();
    ks
}

/// Pixels scaled to `[0, 1]`; labels remapped to the position of the digit
/// in `classes`. Sample ids are indices into the source file.
fn to_dataset(
    set: &IdxSet,
    classes: &[u8],
    per_class: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset> {
    let mut chosen = Vec::new();
    for &digit in classes {
        let members: Vec<usize> = (0..set.labels.len())
            .filter(|&i| set.labels[i] == digit)
            .collect();
        match per_class {
            Some(cap) if cap < members.len() => chosen.extend(
                sample(rng, members.len(), cap)
                    .into_iter()
                    .map(|j| members[j]),
            ),
            _ => chosen.extend(members),
        }
    }
    chosen.sort_unstable();
    let dim = set.images.rows * set.images.cols;
    let mut data = Vec::with_capacity(chosen.len() * dim);
    let mut labels = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        data.extend(set.images.image(i).iter().map(|&p| p as f64 / 255.0));
        let digit = set.labels[i];
        labels.push(classes.iter().position(|&c| c == digit).unwrap() as u32);
    }
    LabeledDataset::new(
        chosen.iter().map(|&i| i as u32).collect(),
        Matrix::from_vec(chosen.len(), dim, data)?,
        labels,
        classes.len(),
    )
}

/// Known training set from `train`; known and unknown test sets from `test`.
pub fn build_split(train: &IdxSet, test: &IdxSet, cfg: &SplitConfig) -> Result<MnistSplit> {
    let mut known = cfg.known.clone();
    known.sort_unstable();
    known.dedup();
    if known.len() != cfg.known.len() || known.iter().any(|&k| k > 9) {
        return Err(PmalError::Validation(
            "known: digits must be distinct and in 0..=9".into(),
        ));
    }
    if known.len() < 2 || known.len() > 9 {
        return Err(PmalError::Validation(
            "known: need between 2 and 9 known digits".into(),
        ));
    }
    let unknown: Vec<u8> = (0..10).filter(|d| !known.contains(d)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(MnistSplit {
        known_train: to_dataset(train, &known, cfg.train_per_class, &mut rng)?,
        known_test: to_dataset(test, &known, cfg.test_per_class, &mut rng)?,
        unknown_test: to_dataset(test, &unknown, cfg.test_per_class, &mut rng)?,
        known_classes: known,
        unknown_classes: unknown,
    })
}
