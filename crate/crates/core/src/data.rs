//! Datasets: the two synthetic 2D tasks, MNIST IDX ingestion, stratified
//! subsampling and digit filtering. All inputs lie in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// A line `a*x1 + b*x2 + c = 0` in the original `[-1, 1]^2` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearBoundary {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LinearBoundary {
    /// Label of a point before rescaling; points on the line get 1.
    pub fn label(&self, x1: f64, x2: f64) -> usize {
        usize::from(self.a * x1 + self.b * x2 + self.c >= 0.0)
    }

    /// `a / b`, the ratio a trained 2-input perceptron's weights approach.
    pub fn weight_ratio(&self) -> f64 {
        self.a / self.b
    }
}

impl Default for LinearBoundary {
    fn default() -> Self {
        Self {
            a: 0.5,
            b: 1.0,
            c: -0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Set for the linear task.
    pub boundary: Option<LinearBoundary>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.len(),
                labels: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!("label {l} outside 0..{n_classes}")));
        }
        if inputs.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("inputs must lie in [0, 1]"));
        }
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|x| x.len() != first.len()) {
                return Err(Error::invalid("inputs differ in dimension"));
            }
        }
        Ok(Self {
            inputs,
            labels,
            n_classes,
            boundary: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn one_hot(&self, label: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_classes];
        v[label] = 1.0;
        v
    }

    /// One-hot rows, one per sample.
    pub fn encoded_labels(&self) -> Vec<Vec<f64>> {
        self.labels.iter().map(|&l| self.one_hot(l)).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            boundary: self.boundary,
        }
    }
}

fn to_unit(v: f64) -> f64 {
    (v + 1.0) / 2.0
}

fn gen_2d<R: Rng + ?Sized>(n: usize, rng: &mut R, label: impl Fn(f64, f64) -> usize) -> Dataset {
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x1 = rng.random_range(-1.0..=1.0);
        let x2 = rng.random_range(-1.0..=1.0);
        labels.push(label(x1, x2));
        inputs.push(vec![to_unit(x1), to_unit(x2)]);
    }
    Dataset {
        inputs,
        labels,
        n_classes: 2,
        boundary: None,
    }
}

/// `n` points uniform on `[-1, 1]^2` labelled by side of `boundary`, then
/// rescaled to `[0, 1]^2`.
pub fn gen_linear2d<R: Rng + ?Sized>(n: usize, boundary: LinearBoundary, rng: &mut R) -> Result<Dataset> {
    if boundary.a == 0.0 && boundary.b == 0.0 {
        return Err(Error::invalid("linear boundary needs a or b nonzero"));
    }
    let mut ds = gen_2d(n, rng, |x1, x2| boundary.label(x1, x2));
    ds.boundary = Some(boundary);
    Ok(ds)
}

/// Label 1 when `x2 >= tanh(3 x1)` in the original coordinates.
pub fn tanh_label(x1: f64, x2: f64) -> usize {
    usize::from(x2 >= (3.0 * x1).tanh())
}

pub fn gen_tanh2d<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Dataset {
    gen_2d(n, rng, tanh_label)
}

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)
    } else {
        BufReader::new(file).read_to_end(&mut bytes)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends at byte {}", bytes.len()),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(header..header + len).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        detail: format!("expected {} payload bytes, found {}", len, bytes.len().saturating_sub(header)),
    })
}

/// Reads an IDX image/label file pair (optionally gzipped, by `.gz`
/// extension). Pixels are scaled by `1/255`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_all(images_path)?;
    check_magic(&img, IMAGE_MAGIC, images_path)?;
    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let dim = rows * cols;
    let pixels = payload(&img, 16, count * dim, images_path)?;

    let lab = read_all(labels_path)?;
    check_magic(&lab, LABEL_MAGIC, labels_path)?;
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    if n_labels != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: n_labels,
        });
    }
    let raw_labels = payload(&lab, 8, n_labels, labels_path)?;

    let inputs = if dim == 0 {
        vec![Vec::new(); count]
    } else {
        pixels
            .chunks_exact(dim)
            .map(|c| c.iter().map(|&p| f64::from(p) / 255.0).collect())
            .collect()
    };
    let labels: Vec<usize> = raw_labels.iter().map(|&l| usize::from(l)).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(inputs, labels, n_classes)
}

/// Keeps `round(fraction * count)` samples of every class, in shuffled order.
pub fn stratified_subsample<R: Rng + ?Sized>(ds: &Dataset, fraction: f64, rng: &mut R) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut keep = Vec::new();
    for mut idx in by_class {
        let take = (fraction * idx.len() as f64).round() as usize;
        idx.shuffle(rng);
        keep.extend_from_slice(&idx[..take]);
    }
    keep.shuffle(rng);
    Ok(ds.select(&keep))
}

/// Keeps the samples whose label is in `keep`, relabelled `0..keep.len()` in
/// ascending order of the original labels.
pub fn filter_digits(ds: &Dataset, keep: &[usize]) -> Result<Dataset> {
    let mut sorted = keep.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() {
        return Err(Error::invalid("no labels to keep"));
    }
    let remap = |l: usize| sorted.binary_search(&l).ok();
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| remap(ds.labels[i]).is_some()).collect();
    if idx.is_empty() {
        return Err(Error::invalid(format!("no samples with labels {sorted:?}")));
    }
    let mut out = ds.select(&idx);
    out.labels = out.labels.iter().map(|&l| remap(l).expect("filtered")).collect();
    out.n_classes = sorted.len();
    out.boundary = None;
    Ok(out)
}
