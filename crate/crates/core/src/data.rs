//! Dataset loaders and minibatching.
//!
//! IDX files (MNIST, Fashion-MNIST) are big-endian: a magic number (2051
//! for images, 2049 for labels), the record count, then rows and columns
//! for images, followed by one unsigned byte per pixel or label. Files may
//! be gzip-compressed; compression is detected from the content.
//!
//! CIFAR-10 binary batches are a flat sequence of 3,073-byte records: one
//! label byte followed by 1,024 red, 1,024 green and 1,024 blue bytes.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Array;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const CIFAR_RECORD: usize = 1 + 3 * 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N × input_dim]`, values in `[0, 1]`.
    pub inputs: Array,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(inputs: Array, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} rows, {} labels", inputs.rows(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Domain(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// The first `n` samples (or all of them when `n` is larger).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let rows: Vec<usize> = (0..n).collect();
        Dataset {
            inputs: self.inputs.select_rows(&rows),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Reads a whole file, gunzipping when it starts with the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Header of an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub header_len: usize,
}

pub fn parse_idx_header(bytes: &[u8], path: &Path) -> Result<IdxHeader> {
    if bytes.len() < 8 {
        return Err(Error::format(path, "truncated IDX header"));
    }
    let magic = be_u32(bytes, 0);
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => {
            return Err(Error::format(
                path,
                format!("bad IDX magic {other} (expected {IDX_IMAGES_MAGIC} or {IDX_LABELS_MAGIC})"),
            ))
        }
    };
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(Error::format(path, "truncated IDX header"));
    }
    let dims = (0..ndims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    Ok(IdxHeader {
        magic,
        dims,
        header_len,
    })
}

/// Loads an IDX image/label pair, scaling pixels by 1/255 and flattening
/// each image.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images_path)?;
    let head = parse_idx_header(&img, images_path)?;
    if head.magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(images_path, "expected an IDX image file (magic 2051)"));
    }
    let (n, rows, cols) = (head.dims[0], head.dims[1], head.dims[2]);
    let dim = rows * cols;
    let body = &img[head.header_len..];
    if body.len() != n * dim {
        return Err(Error::format(
            images_path,
            format!("header claims {n} images of {dim} bytes, file holds {} bytes", body.len()),
        ));
    }

    let lab = read_maybe_gz(labels_path)?;
    let lhead = parse_idx_header(&lab, labels_path)?;
    if lhead.magic != IDX_LABELS_MAGIC {
        return Err(Error::format(labels_path, "expected an IDX label file (magic 2049)"));
    }
    let labels_body = &lab[lhead.header_len..];
    if labels_body.len() != lhead.dims[0] {
        return Err(Error::format(
            labels_path,
            format!("header claims {} labels, file holds {}", lhead.dims[0], labels_body.len()),
        ));
    }
    if lhead.dims[0] != n {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {n} images in {}", lhead.dims[0], images_path.display()),
        ));
    }

    let labels: Vec<usize> = labels_body.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    let inputs = Array::new(vec![n, dim], body.iter().map(|&b| b as f64 / 255.0).collect())?;
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(inputs, labels, num_classes, name)
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10<P: AsRef<Path>>(batch_files: &[P]) -> Result<Dataset> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for path in batch_files {
        let path = path.as_ref();
        let bytes = read_maybe_gz(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                path,
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] >= 10 {
                return Err(Error::format(path, format!("label {} outside [0, 10)", rec[0])));
            }
            labels.push(rec[0] as usize);
            inputs.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(Array::new(vec![n, CIFAR_RECORD - 1], inputs)?, labels, 10, "cifar10")
}

pub const SYNTHETIC_VARIANCE: f64 = 0.01;

/// Class centroid for the synthetic blobs: one-hot when there are at most
/// `input_dim` classes, otherwise the binary code of the class index.
/// Distinct centroids are at least distance 1 apart.
pub fn synthetic_centroid(class: usize, input_dim: usize, num_classes: usize) -> Vec<f64> {
    let mut c = vec![0.0; input_dim];
    if num_classes <= input_dim {
        c[class] = 1.0;
    } else {
        for (j, v) in c.iter_mut().enumerate() {
            if j < usize::BITS as usize && (class >> j) & 1 == 1 {
                *v = 1.0;
            }
        }
    }
    c
}

/// Gaussian blobs around [`synthetic_centroid`] with variance 0.01,
/// clipped to `[0, 1]`.
pub fn make_synthetic(n: usize, input_dim: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    make_synthetic_with_variance(n, input_dim, num_classes, seed, SYNTHETIC_VARIANCE)
}

pub fn make_synthetic_with_variance(
    n: usize,
    input_dim: usize,
    num_classes: usize,
    seed: u64,
    variance: f64,
) -> Result<Dataset> {
    if num_classes == 0 || n < num_classes {
        return Err(Error::Domain(format!("need n ({n}) >= num_classes ({num_classes}) >= 1")));
    }
    if num_classes > input_dim && (input_dim >= usize::BITS as usize || (1usize << input_dim) < num_classes) {
        return Err(Error::Domain(format!(
            "{num_classes} classes cannot be separated in {input_dim} dimensions"
        )));
    }
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::Domain(format!("variance {variance} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, variance.sqrt()).expect("valid std");
    let centroids: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| synthetic_centroid(c, input_dim, num_classes))
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * input_dim);
    for &l in &labels {
        data.extend(centroids[l].iter().map(|&c| (c + noise.sample(&mut rng)).clamp(0.0, 1.0)));
    }
    Dataset::new(
        Array::new(vec![n, input_dim], data)?,
        labels,
        num_classes,
        "synthetic",
    )
}

/// One minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Array,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Dataset order for `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffled minibatches for one epoch; the last batch may be short.
pub fn batches(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> impl Iterator<Item = Batch> + '_ {
    let order = epoch_permutation(ds.len(), seed, epoch);
    ordered_batches(ds, order, batch_size)
}

/// Minibatches in dataset order.
pub fn sequential_batches(ds: &Dataset, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
    ordered_batches(ds, (0..ds.len()).collect(), batch_size)
}

fn ordered_batches(ds: &Dataset, order: Vec<usize>, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
    let size = batch_size.max(1);
    let chunks: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |indices| Batch {
        inputs: ds.inputs.select_rows(&indices),
        labels: indices.iter().map(|&i| ds.labels[i]).collect(),
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend(x.to_be_bytes());
        }
        v.extend(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(IDX_LABELS_MAGIC.to_be_bytes());
        v.extend((labels.len() as u32).to_be_bytes());
        v.extend(labels);
        v
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..2 * 28 * 28).map(|i| (i % 256) as u8).collect();
        let img = write(dir.path(), "img", &idx_images(2, 28, 28, &pixels));
        let lab = write(dir.path(), "lab", &idx_labels(&[7, 3]));
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!((ds.len(), ds.input_dim(), ds.num_classes), (2, 784, 10));
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(ds.inputs.data()[255], 1.0);
        assert!(ds.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));

        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        gz.write_all(&idx_images(2, 28, 28, &pixels)).unwrap();
        let img_gz = write(dir.path(), "img.gz", &gz.finish().unwrap());
        assert_eq!(load_idx(&img_gz, &lab).unwrap(), Dataset { name: "img.gz".into(), ..ds });

        let mut bad = idx_images(2, 28, 28, &pixels);
        bad[3] = 0x04;
        let bad = write(dir.path(), "corrupt-images", &bad);
        let err = load_idx(&bad, &lab).unwrap_err().to_string();
        assert!(err.contains("corrupt-images") && err.contains("magic"), "{err}");

        let short = write(dir.path(), "short", &idx_images(2, 28, 28, &pixels[..100]));
        assert!(load_idx(&short, &lab).unwrap_err().to_string().contains("short"));

        let three = write(dir.path(), "three", &idx_labels(&[1, 2, 3]));
        assert!(load_idx(&img, &three).unwrap_err().to_string().contains("3 labels for 2 images"));
    }

    #[test]
    fn cifar_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![6u8];
        rec.extend((0..3072).map(|i| (i * 7 % 256) as u8));
        rec[1] = 51;
        let mut two = rec.clone();
        two.extend(&rec);
        two[CIFAR_RECORD] = 9;
        let p = write(dir.path(), "data_batch_1.bin", &two);
        let ds = load_cifar10(&[&p]).unwrap();
        assert_eq!((ds.len(), ds.input_dim()), (2, 3072));
        assert_eq!(ds.labels, vec![6, 9]);
        assert_eq!(ds.inputs.data()[0], 51.0 / 255.0);

        let broken = write(dir.path(), "broken.bin", &two[..5000]);
        assert!(load_cifar10(&[&broken]).unwrap_err().to_string().contains("3073"));
    }

    #[test]
    fn synthetic_properties() {
        let a = make_synthetic(100, 8, 4, 1).unwrap();
        assert_eq!(a, make_synthetic(100, 8, 4, 1).unwrap());
        assert_ne!(a, make_synthetic(100, 8, 4, 2).unwrap());
        let counts = a.class_counts();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert!(a.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));

        // nearest-centroid oracle
        let cents: Vec<Vec<f64>> = (0..4).map(|c| synthetic_centroid(c, 8, 4)).collect();
        let correct = (0..a.len())
            .filter(|&i| {
                let x = a.inputs.row(i);
                let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
                let best = (0..4).min_by(|&p, &q| dist(&cents[p]).total_cmp(&dist(&cents[q]))).unwrap();
                best == a.labels[i]
            })
            .count();
        assert_eq!(correct, a.len());

        let many = make_synthetic(40, 3, 7, 0).unwrap();
        assert_eq!(many.num_classes, 7);
        assert!(make_synthetic(40, 2, 7, 0).is_err());
        assert!(make_synthetic(3, 8, 4, 0).is_err());
    }

    #[test]
    fn batching() {
        let ds = make_synthetic(10, 3, 2, 5).unwrap();
        let sizes: Vec<usize> = batches(&ds, 4, 1, 0).map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let a: Vec<usize> = batches(&ds, 4, 1, 3).flat_map(|b| b.indices).collect();
        let b: Vec<usize> = batches(&ds, 4, 1, 3).flat_map(|b| b.indices).collect();
        assert_eq!(a, b);
        let c: Vec<usize> = batches(&ds, 4, 1, 4).flat_map(|b| b.indices).collect();
        assert_ne!(a, c);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        for batch in batches(&ds, 3, 9, 1) {
            for (row, &i) in batch.indices.iter().enumerate() {
                assert_eq!(batch.inputs.row(row), ds.inputs.row(i));
                assert_eq!(batch.labels[row], ds.labels[i]);
            }
        }
    }
}
