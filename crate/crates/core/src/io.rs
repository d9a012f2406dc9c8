//! On-disk formats: dataset CSV, EMB1 embeddings, BIN1 codes, PXE1
//! checkpoints and plain label lists. All binary formats are little-endian.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::BinaryCodeMatrix;
use crate::linalg::Matrix;
use crate::losses::ProxyMatrix;
use crate::sampling::Dataset;
use crate::trainer::{EmbeddingModel, Trunk};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const BIN_MAGIC: &[u8; 4] = b"BIN1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PXE1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Maps raw CSV labels to dense class indices. Integer labels keep their
/// numeric order; anything else is indexed by first appearance.
fn densify_labels(raw: &[String]) -> Vec<usize> {
    let ints: Option<Vec<i64>> = raw.iter().map(|s| s.parse().ok()).collect();
    if let Some(ints) = ints {
        let mut distinct = ints.clone();
        distinct.sort_unstable();
        distinct.dedup();
        return ints.iter().map(|v| distinct.binary_search(v).unwrap()).collect();
    }
    let mut map: HashMap<&str, usize> = HashMap::new();
    raw.iter()
        .map(|s| {
            let next = map.len();
            *map.entry(s.as_str()).or_insert(next)
        })
        .collect()
}

/// Parses a dataset CSV: label first, features after, optional header
/// (detected when any feature cell of the first row is non-numeric).
pub fn read_dataset_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut raw_labels = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.is_empty() || (rec.len() == 1 && rec[0].is_empty()) {
            continue;
        }
        if rec.len() < 2 {
            return Err(Error::Format(format!(
                "row {}: need a label and at least one feature",
                line + 1
            )));
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().skip(1).map(str::parse::<f64>).collect();
        let feats = match parsed {
            Ok(f) => f,
            Err(_) if line == 0 => continue,
            Err(e) => return Err(Error::Format(format!("row {}: {e}", line + 1))),
        };
        if let Some(w) = width {
            if w != feats.len() {
                return Err(Error::Format(format!(
                    "row {}: {} features, expected {w}",
                    line + 1,
                    feats.len()
                )));
            }
        }
        if feats.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("row {}: non-finite feature", line + 1)));
        }
        width = Some(feats.len());
        raw_labels.push(rec[0].to_string());
        data.extend(feats);
    }
    let Some(width) = width else {
        return Err(Error::Format("dataset has no rows".into()));
    };
    let features = Matrix::new(raw_labels.len(), width, data)?;
    Dataset::new(features, densify_labels(&raw_labels))
}

pub fn load_dataset_csv(path: &Path) -> Result<Dataset> {
    read_dataset_csv(File::open(path)?)
}

pub fn write_dataset_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["label".to_string()];
    header.extend((0..dataset.feature_dim()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (row, label) in dataset.features().row_iter().zip(dataset.labels()) {
        let mut rec = vec![label.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    write_dataset_csv(dataset, BufWriter::new(File::create(path)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut b = [0u8; 1];
    if r.read(&mut b)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(())
}

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
}

/// EMB1: `"EMB1"`, u32 N, u32 D, then N·D f32 values row-major.
pub fn write_embeddings<W: Write>(embeddings: &Matrix, mut w: W) -> Result<()> {
    w.write_all(EMB_MAGIC)?;
    w.write_all(&dim_u32(embeddings.rows(), "N")?.to_le_bytes())?;
    w.write_all(&dim_u32(embeddings.cols(), "D")?.to_le_bytes())?;
    for &v in embeddings.as_slice() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings<R: Read>(mut r: R) -> Result<Matrix> {
    expect_magic(&mut r, EMB_MAGIC)?;
    let n = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let mut buf = vec![0u8; n * d * 4];
    r.read_exact(&mut buf)?;
    expect_eof(&mut r)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::new(n, d, data)
}

pub fn save_embeddings(embeddings: &Matrix, path: &Path) -> Result<()> {
    write_embeddings(embeddings, BufWriter::new(File::create(path)?))
}

pub fn load_embeddings(path: &Path) -> Result<Matrix> {
    read_embeddings(BufReader::new(File::open(path)?))
}

/// BIN1: `"BIN1"`, u32 N, u32 D_bits, then N·ceil(D/64) u64 words.
pub fn write_codes<W: Write>(codes: &BinaryCodeMatrix, mut w: W) -> Result<()> {
    w.write_all(BIN_MAGIC)?;
    w.write_all(&dim_u32(codes.len(), "N")?.to_le_bytes())?;
    w.write_all(&dim_u32(codes.dim_bits(), "D_bits")?.to_le_bytes())?;
    for &word in codes.words() {
        w.write_all(&word.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_codes<R: Read>(mut r: R) -> Result<BinaryCodeMatrix> {
    expect_magic(&mut r, BIN_MAGIC)?;
    let n = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let mut buf = vec![0u8; n * BinaryCodeMatrix::words_per_row(d) * 8];
    r.read_exact(&mut buf)?;
    expect_eof(&mut r)?;
    let words = buf
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    BinaryCodeMatrix::new(n, d, words)
}

pub fn save_codes(codes: &BinaryCodeMatrix, path: &Path) -> Result<()> {
    write_codes(codes, BufWriter::new(File::create(path)?))
}

pub fn load_codes(path: &Path) -> Result<BinaryCodeMatrix> {
    read_codes(BufReader::new(File::open(path)?))
}

pub fn write_labels<W: Write>(labels: &[usize], mut w: W) -> Result<()> {
    for l in labels {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels<R: Read>(r: R) -> Result<Vec<usize>> {
    BufReader::new(r)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|(i, l)| {
            let l = l?;
            l.trim()
                .parse()
                .map_err(|e| Error::Format(format!("labels line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn save_labels(labels: &[usize], path: &Path) -> Result<()> {
    write_labels(labels, BufWriter::new(File::create(path)?))
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    read_labels(File::open(path)?)
}

/// A trained model together with its class proxies.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EmbeddingModel,
    pub proxies: ProxyMatrix,
}

fn write_tensor<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    (0..len).map(|_| read_f64(r)).collect()
}

/// PXE1 layout after the magic: u32 version, u32 input_dim, u32 hidden
/// (0 for no hidden layer), u32 embed_dim, u32 class_count, u32 layer_norm
/// flag, f64 epsilon; then f64 tensors row-major: hidden weights and bias
/// (only when hidden > 0), projection, proxies.
pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut w: W) -> Result<()> {
    let m = &ckpt.model;
    m.validate()?;
    if ckpt.proxies.dim() != m.embed_dim() {
        return Err(Error::ShapeMismatch(format!(
            "proxy dim {} vs embed dim {}",
            ckpt.proxies.dim(),
            m.embed_dim()
        )));
    }
    let hidden = match &m.trunk {
        Trunk::Identity => 0,
        Trunk::Hidden { weights, .. } => weights.rows(),
    };
    w.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        CHECKPOINT_VERSION,
        dim_u32(m.input_dim, "input_dim")?,
        dim_u32(hidden, "hidden")?,
        dim_u32(m.embed_dim(), "embed_dim")?,
        dim_u32(ckpt.proxies.class_count(), "class_count")?,
        u32::from(m.layer_norm),
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&m.layer_norm_epsilon.to_le_bytes())?;
    if let Trunk::Hidden { weights, bias } = &m.trunk {
        write_tensor(&mut w, weights.as_slice())?;
        write_tensor(&mut w, bias)?;
    }
    write_tensor(&mut w, m.projection.as_slice())?;
    write_tensor(&mut w, ckpt.proxies.weights().as_slice())?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    expect_magic(&mut r, CHECKPOINT_MAGIC)?;
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let input_dim = read_u32(&mut r)? as usize;
    let hidden = read_u32(&mut r)? as usize;
    let embed_dim = read_u32(&mut r)? as usize;
    let class_count = read_u32(&mut r)? as usize;
    let layer_norm = match read_u32(&mut r)? {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("bad layer_norm flag {v}"))),
    };
    let layer_norm_epsilon = read_f64(&mut r)?;
    let trunk = if hidden > 0 {
        let weights = Matrix::new(hidden, input_dim, read_tensor(&mut r, hidden * input_dim)?)?;
        let bias = read_tensor(&mut r, hidden)?;
        Trunk::Hidden { weights, bias }
    } else {
        Trunk::Identity
    };
    let in_dim = trunk.output_dim(input_dim);
    let projection = Matrix::new(embed_dim, in_dim, read_tensor(&mut r, embed_dim * in_dim)?)?;
    let proxies = ProxyMatrix::new(Matrix::new(
        class_count,
        embed_dim,
        read_tensor(&mut r, class_count * embed_dim)?,
    )?);
    expect_eof(&mut r)?;
    let model = EmbeddingModel {
        input_dim,
        trunk,
        projection,
        layer_norm,
        layer_norm_epsilon,
    };
    model.validate()?;
    Ok(Checkpoint { model, proxies })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_checkpoint(ckpt, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
