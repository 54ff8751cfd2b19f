//! Datasets, dense matrices and the on-disk archive formats shared by all
//! pipeline stages.
//!
//! Every matrix file is a 16-byte little-endian header (`PMAL`, version,
//! rows, cols) followed by `rows * cols` little-endian `f32` values in
//! row-major order. A directory groups matrix files under a `manifest.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PmalError, Result};

pub const MAGIC: &[u8; 4] = b"PMAL";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(PmalError::Dimension {
                expected: rows * cols,
                actual: data.len(),
                context: "matrix data length",
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(PmalError::Dimension {
                    expected: cols,
                    actual: r.len(),
                    context: "ragged matrix rows",
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(PmalError::Dimension {
                expected: self.cols,
                actual: other.rows,
                context: "matmul inner dimension",
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (p, &aip) in a.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                for (oj, &bpj) in o.iter_mut().zip(other.row(p)) {
                    *oj += aip * bpj;
                }
            }
        }
        Ok(out)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every entry survives an `f32` round trip unchanged.
    pub fn is_f32_exact(&self) -> bool {
        self.data.iter().all(|&v| (v as f32) as f64 == v)
    }

    /// Rounds every entry to the nearest `f32`.
    pub fn quantized(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| (v as f32) as f64).collect(),
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv1a {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

pub fn checksum_hex(sum: u64) -> String {
    format!("{sum:016x}")
}

pub fn parse_checksum(s: &str) -> Option<u64> {
    u64::from_str_radix(s, 16).ok()
}

/// Labelled samples with stable ids. Features are held at `f32` precision so
/// the in-memory value always matches its archived form.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    ids: Vec<u32>,
    features: Matrix,
    labels: Vec<u32>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(
        ids: Vec<u32>,
        features: Matrix,
        labels: Vec<u32>,
        class_count: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if ids.len() != n || labels.len() != n {
            return Err(PmalError::Validation(format!(
                "dataset has {n} feature rows but {} ids and {} labels",
                ids.len(),
                labels.len()
            )));
        }
        if let Some(w) = ids.windows(2).find(|w| w[0] >= w[1]) {
            return Err(PmalError::Validation(format!(
                "sample ids must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(PmalError::Validation(format!(
                "label {l} out of range for {class_count} classes"
            )));
        }
        if !features.is_finite() {
            return Err(PmalError::Validation("non-finite feature value".into()));
        }
        Ok(LabeledDataset {
            ids,
            features: features.quantized(),
            labels,
            class_count,
        })
    }

    /// Dataset whose ids are `0..n`.
    pub fn with_sequential_ids(
        features: Matrix,
        labels: Vec<u32>,
        class_count: usize,
    ) -> Result<Self> {
        let ids = (0..features.rows() as u32).collect();
        Self::new(ids, features, labels, class_count)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature(&self, index: usize) -> &[f64] {
        self.features.row(index)
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index] as usize
    }

    /// Storage index of a sample id.
    pub fn index_of(&self, id: u32) -> Result<usize> {
        self.ids
            .binary_search(&id)
            .map_err(|_| PmalError::UnknownSample(id))
    }

    /// Storage indices of the samples of class `k`, in storage order.
    pub fn class_indices(&self, k: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.label(i) == k).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        LabeledDataset::new(
            sorted.iter().map(|&i| self.ids[i]).collect(),
            self.features.select_rows(&sorted),
            sorted.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
        )
    }

    /// Seeded draw of up to `per_class` samples from every class.
    pub fn sample_per_class(&self, per_class: usize, seed: u64) -> Result<LabeledDataset> {
        let (picked, _) = self.partition_per_class(per_class, seed);
        self.subset(&picked)
    }

    /// Seeded per-class split: `test_per_class` samples of every class go to
    /// the second set, the rest to the first.
    pub fn split_per_class(
        &self,
        test_per_class: usize,
        seed: u64,
    ) -> Result<(LabeledDataset, LabeledDataset)> {
        let (test, train) = self.partition_per_class(test_per_class, seed);
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    fn partition_per_class(&self, per_class: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut picked, mut rest) = (Vec::new(), Vec::new());
        for k in 0..self.class_count {
            let members = self.class_indices(k);
            let take = per_class.min(members.len());
            let mut chosen = vec![false; members.len()];
            for j in sample(&mut rng, members.len(), take) {
                chosen[j] = true;
            }
            for (j, &i) in members.iter().enumerate() {
                if chosen[j] {
                    picked.push(i);
                } else {
                    rest.push(i);
                }
            }
        }
        (picked, rest)
    }

    /// FNV-1a over the little-endian `f32` feature bytes followed by the
    /// little-endian `u32` labels, both in storage order.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::default();
        for &v in self.features.as_slice() {
            h.update(&(v as f32).to_le_bytes());
        }
        for &l in &self.labels {
            h.update(&l.to_le_bytes());
        }
        h.finish()
    }
}

/// One trained run: embeddings of every dataset sample plus its softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSpace {
    pub run_id: u32,
    embeddings: Matrix,
    head_weights: Matrix,
    head_bias: Vec<f64>,
    source_checksum: u64,
}

impl EmbeddingSpace {
    pub fn new(
        run_id: u32,
        embeddings: Matrix,
        head_weights: Matrix,
        head_bias: Vec<f64>,
        source_checksum: u64,
    ) -> Result<Self> {
        if embeddings.cols() != head_weights.rows() {
            return Err(PmalError::Dimension {
                expected: embeddings.cols(),
                actual: head_weights.rows(),
                context: "head weight rows vs embedding dimension",
            });
        }
        if head_bias.len() != head_weights.cols() {
            return Err(PmalError::Dimension {
                expected: head_weights.cols(),
                actual: head_bias.len(),
                context: "head bias length vs class count",
            });
        }
        if !embeddings.is_finite()
            || !head_weights.is_finite()
            || head_bias.iter().any(|v| !v.is_finite())
        {
            return Err(PmalError::Validation(
                "embedding space contains non-finite values".into(),
            ));
        }
        Ok(EmbeddingSpace {
            run_id,
            embeddings,
            head_weights,
            head_bias,
            source_checksum,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn class_count(&self) -> usize {
        self.head_weights.cols()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embedding(&self, index: usize) -> &[f64] {
        self.embeddings.row(index)
    }

    /// D×K; column k is the class-k weight vector.
    pub fn head_weights(&self) -> &Matrix {
        &self.head_weights
    }

    pub fn head_bias(&self) -> &[f64] {
        &self.head_bias
    }

    pub fn source_checksum(&self) -> u64 {
        self.source_checksum
    }

    pub fn quantized(&self) -> EmbeddingSpace {
        EmbeddingSpace {
            run_id: self.run_id,
            embeddings: self.embeddings.quantized(),
            head_weights: self.head_weights.quantized(),
            head_bias: self.head_bias.iter().map(|&v| (v as f32) as f64).collect(),
            source_checksum: self.source_checksum,
        }
    }

    /// FNV-1a over the `f32` bytes of all three matrices.
    pub fn content_checksum(&self) -> u64 {
        let mut h = Fnv1a::default();
        for v in self
            .embeddings
            .as_slice()
            .iter()
            .chain(self.head_weights.as_slice())
            .chain(&self.head_bias)
        {
            h.update(&(*v as f32).to_le_bytes());
        }
        h.finish()
    }
}

/// U ≥ 2 embedding spaces over the same dataset, aligned by storage order.
#[derive(Debug, Clone)]
pub struct RunBundle {
    runs: Vec<EmbeddingSpace>,
}

impl RunBundle {
    pub fn runs(&self) -> &[EmbeddingSpace] {
        &self.runs
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn sample_count(&self) -> usize {
        self.runs[0].len()
    }

    pub fn source_checksum(&self) -> u64 {
        self.runs[0].source_checksum()
    }
}

pub fn align_runs(spaces: Vec<EmbeddingSpace>) -> Result<RunBundle> {
    if spaces.len() < 2 {
        return Err(PmalError::Alignment(format!(
            "need at least 2 runs, got {}",
            spaces.len()
        )));
    }
    let first = &spaces[0];
    for (pos, s) in spaces.iter().enumerate().skip(1) {
        if s.source_checksum() != first.source_checksum() {
            return Err(PmalError::Alignment(format!(
                "run #1 was built from dataset {} but run #{} from {}",
                checksum_hex(first.source_checksum()),
                pos + 1,
                checksum_hex(s.source_checksum())
            )));
        }
        if s.len() != first.len()
            || s.embedding_dim() != first.embedding_dim()
            || s.class_count() != first.class_count()
        {
            return Err(PmalError::Alignment(format!(
                "run shapes differ: (n={}, d={}, k={}) vs (n={}, d={}, k={})",
                first.len(),
                first.embedding_dim(),
                first.class_count(),
                s.len(),
                s.embedding_dim(),
                s.class_count()
            )));
        }
    }
    Ok(RunBundle { runs: spaces })
}

// ---------------------------------------------------------------------------
// Binary containers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorEntry {
    pub file: String,
    pub count: usize,
}

pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    if !m.is_finite() {
        return Err(PmalError::Validation(
            "matrix contains non-finite values".into(),
        ));
    }
    if !m.is_f32_exact() {
        return Err(PmalError::Validation(
            "matrix values are not representable as f32; quantize before archiving".into(),
        ));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(PmalError::archive(path, "file shorter than header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(PmalError::archive(path, "bad magic"));
    }
    let version = le_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(PmalError::archive(
            path,
            format!("version mismatch: file {version}, supported {FORMAT_VERSION}"),
        ));
    }
    let rows = le_u32(bytes, 8) as usize;
    let cols = le_u32(bytes, 12) as usize;
    let expected = HEADER_LEN + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(PmalError::archive(
            path,
            format!(
                "shape disagreement: header says {rows}x{cols} ({expected} bytes), file has {} bytes",
                bytes.len()
            ),
        ));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(PmalError::archive(path, "non-finite entry"));
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn write_matrix_file(path: &Path, m: &Matrix) -> Result<()> {
    let bytes = encode_matrix(m)?;
    fs::write(path, bytes).map_err(|e| PmalError::io(path, e))
}

pub fn read_matrix_file(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| PmalError::io(path, e))?;
    decode_matrix(&bytes, path)
}

fn read_matrix_entry(dir: &Path, entry: &MatrixEntry) -> Result<Matrix> {
    let path = dir.join(&entry.file);
    let m = read_matrix_file(&path)?;
    if m.shape() != (entry.rows, entry.cols) {
        return Err(PmalError::archive(
            path,
            format!(
                "manifest says {}x{}, file holds {}x{}",
                entry.rows,
                entry.cols,
                m.rows(),
                m.cols()
            ),
        ));
    }
    Ok(m)
}

pub fn write_u32_file(path: &Path, values: &[u32]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| PmalError::io(path, e))?;
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    f.write_all(&bytes).map_err(|e| PmalError::io(path, e))
}

pub fn read_u32_file(path: &Path, count: usize) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| PmalError::io(path, e))?;
    if bytes.len() != 4 * count {
        return Err(PmalError::archive(
            path,
            format!(
                "expected {count} u32 values, file has {} bytes",
                bytes.len()
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

/// Creates `dir`, refusing to touch an existing manifest unless `force`.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    let manifest = dir.join("manifest.json");
    if manifest.exists() && !force {
        return Err(PmalError::Validation(format!(
            "{} already exists; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| PmalError::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| PmalError::Validation(format!("cannot serialize manifest: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| PmalError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PmalError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PmalError::archive(path, format!("bad manifest: {e}")))
}

fn check_header(path: &Path, format: &str, version: u32) -> Result<()> {
    if format != "PMAL" {
        return Err(PmalError::archive(
            path,
            format!("unexpected format tag {format:?}"),
        ));
    }
    if version != FORMAT_VERSION {
        return Err(PmalError::archive(
            path,
            format!("version mismatch: manifest {version}, supported {FORMAT_VERSION}"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Embedding archives
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub format: String,
    pub version: u32,
    pub run_id: u32,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub source_checksum: String,
    #[serde(rename = "Z")]
    pub z: MatrixEntry,
    #[serde(rename = "W")]
    pub w: MatrixEntry,
    pub b: MatrixEntry,
}

pub fn write_embedding_archive(space: &EmbeddingSpace, dir: &Path, force: bool) -> Result<()> {
    let bias = Matrix::from_vec(1, space.head_bias.len(), space.head_bias.clone())?;
    let z = encode_matrix(&space.embeddings)?;
    let w = encode_matrix(&space.head_weights)?;
    let b = encode_matrix(&bias)?;
    prepare_output_dir(dir, force)?;
    let entry = |file: &str, m: &Matrix| MatrixEntry {
        file: file.to_string(),
        rows: m.rows(),
        cols: m.cols(),
    };
    let manifest = EmbeddingManifest {
        format: "PMAL".into(),
        version: FORMAT_VERSION,
        run_id: space.run_id,
        n: space.len(),
        d: space.embedding_dim(),
        k: space.class_count(),
        source_checksum: checksum_hex(space.source_checksum),
        z: entry("Z.bin", &space.embeddings),
        w: entry("W.bin", &space.head_weights),
        b: entry("b.bin", &bias),
    };
    for (name, bytes) in [("Z.bin", z), ("W.bin", w), ("b.bin", b)] {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| PmalError::io(&p, e))?;
    }
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_embedding_archive(dir: &Path) -> Result<EmbeddingSpace> {
    let manifest_path = dir.join("manifest.json");
    let m: EmbeddingManifest = read_json(&manifest_path)?;
    check_header(&manifest_path, &m.format, m.version)?;
    let expect = |what: &str, entry: &MatrixEntry, rows: usize, cols: usize| {
        if entry.rows != rows || entry.cols != cols {
            Err(PmalError::archive(
                &manifest_path,
                format!(
                    "{what} declared {}x{} but n/d/k imply {rows}x{cols}",
                    entry.rows, entry.cols
                ),
            ))
        } else {
            Ok(())
        }
    };
    expect("Z", &m.z, m.n, m.d)?;
    expect("W", &m.w, m.d, m.k)?;
    expect("b", &m.b, 1, m.k)?;
    let checksum = parse_checksum(&m.source_checksum)
        .ok_or_else(|| PmalError::archive(&manifest_path, "bad source_checksum"))?;
    let z = read_matrix_entry(dir, &m.z)?;
    let w = read_matrix_entry(dir, &m.w)?;
    let b = read_matrix_entry(dir, &m.b)?;
    EmbeddingSpace::new(m.run_id, z, w, b.as_slice().to_vec(), checksum)
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub n: usize,
    pub f: usize,
    pub k: usize,
    pub source_checksum: String,
    pub features: MatrixEntry,
    pub labels: VectorEntry,
    pub ids: VectorEntry,
}

pub fn write_dataset(ds: &LabeledDataset, dir: &Path, force: bool) -> Result<()> {
    prepare_output_dir(dir, force)?;
    write_matrix_file(&dir.join("features.bin"), &ds.features)?;
    write_u32_file(&dir.join("labels.bin"), &ds.labels)?;
    write_u32_file(&dir.join("ids.bin"), &ds.ids)?;
    let manifest = DatasetManifest {
        format: "PMAL".into(),
        version: FORMAT_VERSION,
        n: ds.len(),
        f: ds.feature_dim(),
        k: ds.class_count,
        source_checksum: checksum_hex(ds.checksum()),
        features: MatrixEntry {
            file: "features.bin".into(),
            rows: ds.len(),
            cols: ds.feature_dim(),
        },
        labels: VectorEntry {
            file: "labels.bin".into(),
            count: ds.len(),
        },
        ids: VectorEntry {
            file: "ids.bin".into(),
            count: ds.len(),
        },
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_dataset(dir: &Path) -> Result<LabeledDataset> {
    let manifest_path = dir.join("manifest.json");
    let m: DatasetManifest = read_json(&manifest_path)?;
    check_header(&manifest_path, &m.format, m.version)?;
    if m.features.rows != m.n
        || m.features.cols != m.f
        || m.labels.count != m.n
        || m.ids.count != m.n
    {
        return Err(PmalError::archive(
            &manifest_path,
            "entry shapes disagree with n/f",
        ));
    }
    let features = read_matrix_entry(dir, &m.features)?;
    let labels = read_u32_file(&dir.join(&m.labels.file), m.n)?;
    let ids = read_u32_file(&dir.join(&m.ids.file), m.n)?;
    let ds = LabeledDataset::new(ids, features, labels, m.k)?;
    if checksum_hex(ds.checksum()) != m.source_checksum {
        return Err(PmalError::archive(
            &manifest_path,
            "content checksum does not match manifest",
        ));
    }
    Ok(ds)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_class_split_is_seeded_and_disjoint() {
        let labels: Vec<u32> = (0..30).map(|i| (i % 3) as u32).collect();
        let ds = LabeledDataset::with_sequential_ids(Matrix::zeros(30, 1), labels, 3).unwrap();
        let (train, test) = ds.split_per_class(4, 9).unwrap();
        assert_eq!(test.len(), 12);
        assert_eq!(train.len(), 18);
        for k in 0..3 {
            assert_eq!(test.class_indices(k).len(), 4);
        }
        assert!(test.ids().iter().all(|id| !train.ids().contains(id)));
        let (_, again) = ds.split_per_class(4, 9).unwrap();
        assert_eq!(again.ids(), test.ids());
        assert_eq!(ds.sample_per_class(20, 1).unwrap().len(), 30);
    }

    fn small_space() -> EmbeddingSpace {
        let z = Matrix::from_rows(&[vec![0.5, -1.25], vec![3.0, 0.0], vec![1.0, 2.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![1.0, -1.0, 0.5], vec![0.25, 0.0, 2.0]]).unwrap();
        EmbeddingSpace::new(1, z, w, vec![0.0, 0.5, -0.5], 0xdead_beef).unwrap()
    }

    #[test]
    fn archive_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let space = small_space();
        write_embedding_archive(&space, dir.path(), false).unwrap();
        let back = read_embedding_archive(dir.path()).unwrap();
        assert_eq!(space, back);
        let zbytes = fs::read(dir.path().join("Z.bin")).unwrap();
        assert_eq!(zbytes.len(), 16 + 3 * 2 * 4);
        assert_eq!(&zbytes[..4], b"PMAL");
        assert_eq!(le_u32(&zbytes, 4), 1);
        assert_eq!(le_u32(&zbytes, 8), 3);
        assert_eq!(le_u32(&zbytes, 12), 2);
        assert_eq!(&zbytes[16..20], &0.5f32.to_le_bytes());
    }

    #[test]
    fn refuses_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let space = small_space();
        write_embedding_archive(&space, dir.path(), false).unwrap();
        assert!(write_embedding_archive(&space, dir.path(), false).is_err());
        write_embedding_archive(&space, dir.path(), true).unwrap();
    }

    #[test]
    fn nan_is_rejected() {
        let z = Matrix::from_rows(&[vec![f64::NAN, 1.0]]).unwrap();
        let w = Matrix::zeros(2, 2);
        assert!(matches!(
            EmbeddingSpace::new(0, z.clone(), w, vec![0.0; 2], 0),
            Err(PmalError::Validation(_))
        ));
        assert!(matches!(encode_matrix(&z), Err(PmalError::Validation(_))));
    }

    #[test]
    fn non_f32_values_are_not_archived_silently() {
        let z = Matrix::from_rows(&[vec![0.1, 1.0]]).unwrap();
        let space = EmbeddingSpace::new(0, z, Matrix::zeros(2, 2), vec![0.0; 2], 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(write_embedding_archive(&space, dir.path(), false).is_err());
        write_embedding_archive(&space.quantized(), dir.path(), false).unwrap();
    }

    #[test]
    fn manifest_reports_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let space = EmbeddingSpace::new(
            3,
            Matrix::zeros(1000, 64),
            Matrix::zeros(64, 10),
            vec![0.0; 10],
            7,
        )
        .unwrap();
        write_embedding_archive(&space, dir.path(), false).unwrap();
        let m: EmbeddingManifest = read_json(&dir.path().join("manifest.json")).unwrap();
        assert_eq!((m.z.rows, m.z.cols), (1000, 64));
        assert_eq!((m.w.rows, m.w.cols), (64, 10));
        assert_eq!(m.source_checksum, "0000000000000007");
        let raw: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(raw["format"], "PMAL");
        assert_eq!(raw["version"], 1);
        assert_eq!(raw["Z"]["rows"], 1000);
    }

    #[test]
    fn truncated_matrix_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        write_embedding_archive(&small_space(), dir.path(), false).unwrap();
        let p = dir.path().join("Z.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_embedding_archive(dir.path()).unwrap_err();
        assert!(err.to_string().contains("shape disagreement"), "{err}");
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_embedding_archive(&small_space(), dir.path(), false).unwrap();
        let p = dir.path().join("W.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(read_embedding_archive(dir.path())
            .unwrap_err()
            .to_string()
            .contains("bad magic"));
        bytes[0] = b'P';
        bytes[4] = 2;
        fs::write(&p, &bytes).unwrap();
        assert!(read_embedding_archive(dir.path())
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn manifest_class_count_disagreeing_with_w_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let space =
            EmbeddingSpace::new(0, Matrix::zeros(4, 3), Matrix::zeros(3, 9), vec![0.0; 9], 1)
                .unwrap();
        write_embedding_archive(&space, dir.path(), false).unwrap();
        let mp = dir.path().join("manifest.json");
        let mut m: EmbeddingManifest = read_json(&mp).unwrap();
        m.k = 10;
        write_json(&mp, &m).unwrap();
        assert!(read_embedding_archive(dir.path()).is_err());
    }

    #[test]
    fn dataset_round_trip_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let ds = LabeledDataset::new(
            vec![2, 5, 9],
            Matrix::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]]).unwrap(),
            vec![0, 1, 0],
            2,
        )
        .unwrap();
        write_dataset(&ds, dir.path(), false).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
        assert_eq!(ds.checksum(), back.checksum());
        let relabeled =
            LabeledDataset::new(vec![2, 5, 9], ds.features().clone(), vec![1, 1, 0], 2).unwrap();
        assert_ne!(ds.checksum(), relabeled.checksum());
    }

    #[test]
    fn dataset_invariants() {
        let f = Matrix::zeros(2, 1);
        assert!(LabeledDataset::new(vec![1, 1], f.clone(), vec![0, 0], 1).is_err());
        assert!(LabeledDataset::new(vec![0, 1], f.clone(), vec![0, 2], 2).is_err());
        let bad = Matrix::from_rows(&[vec![f64::INFINITY], vec![0.0]]).unwrap();
        assert!(LabeledDataset::new(vec![0, 1], bad, vec![0, 0], 1).is_err());
    }

    #[test]
    fn fnv1a_known_vectors() {
        let mut h = Fnv1a::default();
        assert_eq!(h.finish(), 0xcbf29ce484222325);
        h.update(b"a");
        assert_eq!(h.finish(), 0xaf63dc4c8601ec8c);
        let mut h = Fnv1a::default();
        h.update(b"foobar");
        assert_eq!(h.finish(), 0x85944171f73967e8);
    }

    #[test]
    fn align_runs_checks() {
        let a = small_space();
        let mut b = small_space();
        b.run_id = 2;
        let bundle = align_runs(vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(bundle.len(), 2);
        let five = align_runs(vec![a.clone(); 5]).unwrap();
        assert_eq!(five.len(), 5);
        assert!(align_runs(vec![a.clone()]).is_err());
        let other = EmbeddingSpace::new(
            2,
            Matrix::zeros(4, 2),
            a.head_weights().clone(),
            a.head_bias().to_vec(),
            a.source_checksum(),
        )
        .unwrap();
        assert!(align_runs(vec![a.clone(), other]).is_err());
        let foreign = EmbeddingSpace::new(
            2,
            a.embeddings().clone(),
            a.head_weights().clone(),
            a.head_bias().to_vec(),
            1,
        )
        .unwrap();
        assert!(matches!(
            align_runs(vec![a, foreign]),
            Err(PmalError::Alignment(_))
        ));
    }
}
