//! Dataset construction: synthetic hierarchical classes, IDX image loading,
//! CSV feature loading, and the sparsity / step-imbalance corpus transforms.

use crate::util::{seeded_stream, sha256_hex, stream};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    InvalidParam(String),
    BadMagic { path: String, expected: u32, got: u32 },
    Truncated { path: String, needed: usize, got: usize },
    CountMismatch { images: usize, labels: usize },
    Parse { path: String, line: usize, message: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "i/o error: {e}"),
            DataError::InvalidParam(msg) => write!(f, "invalid parameter: {msg}"),
            DataError::BadMagic { path, expected, got } => {
                write!(f, "{path}: bad magic {got:#010x}, expected {expected:#010x}")
            }
            DataError::Truncated { path, needed, got } => {
                write!(f, "{path}: truncated, needed {needed} bytes but found {got}")
            }
            DataError::CountMismatch { images, labels } => {
                write!(f, "image/label count mismatch: {images} images vs {labels} labels")
            }
            DataError::Parse { path, line, message } => {
                write!(f, "{path}:{line}: {message}")
            }
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Where a dataset came from; recorded into run manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic {
        classes: usize,
        superclasses: usize,
        input_dim: usize,
        per_class: usize,
        within_spread: f64,
        between_spread: f64,
        seed: u64,
    },
    Idx {
        images_digest: String,
        labels_digest: String,
    },
    Csv {
        digest: String,
    },
    Sparsified {
        base: Box<Provenance>,
        keep_fraction: f64,
        seed: u64,
    },
    StepImbalanced {
        base: Box<Provenance>,
        minority_fraction: f64,
        seed: u64,
    },
}

/// An immutable labeled dataset with flat row-major inputs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    /// Shape of one input, e.g. `[32]` for feature vectors, `[1, 28, 28]`
    /// for channel-first images.
    pub input_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_size(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.input_size();
        &self.inputs[i * w..(i + 1) * w]
    }

    /// Copies the selected samples into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let w = self.input_size();
        let mut inputs = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        (inputs, labels)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    fn check_invariants(&self) {
        assert_eq!(self.inputs.len(), self.labels.len() * self.input_size());
        assert!(self.labels.iter().all(|&y| y < self.num_classes), "label out of range");
    }
}

/// Synthetic hierarchical fine-grained classes.
///
/// Superclass means are i.i.d. Gaussian(0, between²·I); each subclass mean
/// adds Gaussian(0, (between/4)²·I); samples add Gaussian(0, within²·I).
/// The train split gets `n_per_class` samples per class and the test split
/// one quarter of that (ceiling), an 80/20 split per class.
#[allow(clippy::too_many_arguments)]
pub fn gen_synthetic(
    classes: usize,
    superclasses: usize,
    input_dim: usize,
    n_per_class: usize,
    within_spread: f64,
    between_spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if classes == 0 || superclasses == 0 || classes % superclasses != 0 {
        return Err(DataError::InvalidParam(format!(
            "classes ({classes}) must be a positive multiple of superclasses ({superclasses})"
        )));
    }
    if input_dim == 0 || n_per_class == 0 {
        return Err(DataError::InvalidParam("input_dim and n_per_class must be positive".into()));
    }
    if within_spread <= 0.0 || between_spread <= 0.0 {
        return Err(DataError::InvalidParam("spreads must be positive".into()));
    }

    let mut rng = seeded_stream(seed, stream::DATA);

    let mut super_means = vec![0.0; superclasses * input_dim];
    super_means
        .iter_mut()
        .for_each(|v| *v = between_spread * rng.sample::<f64, _>(StandardNormal));

    let per_super = classes / superclasses;
    let mut class_means = vec![0.0; classes * input_dim];
    for k in 0..classes {
        let s = k / per_super;
        for j in 0..input_dim {
            class_means[k * input_dim + j] = super_means[s * input_dim + j]
                + (between_spread / 4.0) * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let provenance = Provenance::Synthetic {
        classes,
        superclasses,
        input_dim,
        per_class: n_per_class,
        within_spread,
        between_spread,
        seed,
    };
    let n_test = n_per_class.div_ceil(4);
    let mut draw_split = |count: usize, split: Split| -> Dataset {
        let mut inputs = Vec::with_capacity(classes * count * input_dim);
        let mut labels = Vec::with_capacity(classes * count);
        for k in 0..classes {
            for _ in 0..count {
                for j in 0..input_dim {
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal);
                    inputs.push(class_means[k * input_dim + j] + within_spread * noise);
                }
                labels.push(k);
            }
        }
        Dataset {
            inputs,
            input_shape: vec![input_dim],
            labels,
            num_classes: classes,
            split,
            provenance: provenance.clone(),
        }
    };
    let train = draw_split(n_per_class, Split::Train);
    let test = draw_split(n_test, Split::Test);
    train.check_invariants();
    test.check_invariants();
    Ok((train, test))
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated { path: path.into(), needed: end, got: bytes.len() });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Loads an IDX image/label file pair (the MNIST container format).
/// Pixels are scaled to [0, 1]; images come out channel-first [1, H, W].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;
    let img_name = images_path.display().to_string();
    let lbl_name = labels_path.display().to_string();

    let magic = read_u32_be(&img_bytes, 0, &img_name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { path: img_name, expected: IDX_IMAGES_MAGIC, got: magic });
    }
    let count = read_u32_be(&img_bytes, 4, &img_name)? as usize;
    let rows = read_u32_be(&img_bytes, 8, &img_name)? as usize;
    let cols = read_u32_be(&img_bytes, 12, &img_name)? as usize;
    let needed = 16 + count * rows * cols;
    if img_bytes.len() < needed {
        return Err(DataError::Truncated { path: img_name, needed, got: img_bytes.len() });
    }

    let lbl_magic = read_u32_be(&lbl_bytes, 0, &lbl_name)?;
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: lbl_name,
            expected: IDX_LABELS_MAGIC,
            got: lbl_magic,
        });
    }
    let lbl_count = read_u32_be(&lbl_bytes, 4, &lbl_name)? as usize;
    if lbl_bytes.len() < 8 + lbl_count {
        return Err(DataError::Truncated {
            path: lbl_name,
            needed: 8 + lbl_count,
            got: lbl_bytes.len(),
        });
    }
    if count != lbl_count {
        return Err(DataError::CountMismatch { images: count, labels: lbl_count });
    }

    let inputs: Vec<f64> = img_bytes[16..needed].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = lbl_bytes[8..8 + count].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().map(|&y| y + 1).max().unwrap_or(0);
    let ds = Dataset {
        inputs,
        input_shape: vec![1, rows, cols],
        labels,
        num_classes,
        split: Split::Train,
        provenance: Provenance::Idx {
            images_digest: sha256_hex(&img_bytes),
            labels_digest: sha256_hex(&lbl_bytes),
        },
    };
    ds.check_invariants();
    Ok(ds)
}

/// Loads a feature CSV: a header row naming `d_in` feature columns plus a
/// final label column, then one row per sample with the integer label last.
pub fn load_csv_features(path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path)?;
    let name = path.display().to_string();
    let text = String::from_utf8(bytes.clone()).map_err(|e| DataError::Parse {
        path: name.clone(),
        line: 0,
        message: format!("not valid UTF-8: {e}"),
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DataError::Parse {
        path: name.clone(),
        line: 1,
        message: "missing header row".into(),
    })?;
    let columns = header.split(',').count();
    if columns < 2 {
        return Err(DataError::Parse {
            path: name,
            line: 1,
            message: "header must name at least one feature column and a label".into(),
        });
    }
    let d_in = columns - 1;

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(DataError::Parse {
                path: name,
                line: idx + 1,
                message: format!("expected {columns} fields, found {}", fields.len()),
            });
        }
        for f in &fields[..d_in] {
            let v: f64 = f.trim().parse().map_err(|e| DataError::Parse {
                path: name.clone(),
                line: idx + 1,
                message: format!("bad feature value {f:?}: {e}"),
            })?;
            inputs.push(v);
        }
        let label: usize = fields[d_in].trim().parse().map_err(|e| DataError::Parse {
            path: name.clone(),
            line: idx + 1,
            message: format!("bad label {:?}: {e}", fields[d_in]),
        })?;
        labels.push(label);
    }
    let num_classes = labels.iter().map(|&y| y + 1).max().unwrap_or(0);
    let ds = Dataset {
        inputs,
        input_shape: vec![d_in],
        labels,
        num_classes,
        split: Split::Train,
        provenance: Provenance::Csv { digest: sha256_hex(&bytes) },
    };
    ds.check_invariants();
    Ok(ds)
}

/// Keeps a seeded per-class subset of ⌈keep_fraction·n⌉ samples (never
/// fewer than one), leaving the class set and sample order intact.
pub fn sparsify(train: &Dataset, keep_fraction: f64, seed: u64) -> Dataset {
    assert!(
        keep_fraction > 0.0 && keep_fraction <= 1.0,
        "keep_fraction must be in (0, 1], got {keep_fraction}"
    );
    let mut rng = seeded_stream(seed, stream::DATA.wrapping_add(100));
    let mut kept: Vec<usize> = Vec::new();
    for class in 0..train.num_classes {
        let mut idx: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        let keep = ((keep_fraction * idx.len() as f64).ceil() as usize).max(1);
        idx.shuffle(&mut rng);
        kept.extend_from_slice(&idx[..keep.min(idx.len())]);
    }
    kept.sort_unstable();
    subset(
        train,
        &kept,
        Provenance::Sparsified {
            base: Box::new(train.provenance.clone()),
            keep_fraction,
            seed,
        },
    )
}

/// Step imbalance: a seeded subset of ⌊minority_fraction·K⌋ classes keeps
/// exactly half (floor) of its samples; the rest keep everything.
pub fn step_imbalance(train: &Dataset, minority_fraction: f64, seed: u64) -> Dataset {
    assert!(
        (0.0..=1.0).contains(&minority_fraction),
        "minority_fraction must be in [0, 1], got {minority_fraction}"
    );
    let mut rng = seeded_stream(seed, stream::DATA.wrapping_add(200));
    let mut classes: Vec<usize> = (0..train.num_classes).collect();
    classes.shuffle(&mut rng);
    let minority_count = (minority_fraction * train.num_classes as f64).floor() as usize;
    let mut minority = vec![false; train.num_classes];
    for &c in &classes[..minority_count] {
        minority[c] = true;
    }

    let mut kept: Vec<usize> = Vec::new();
    for class in 0..train.num_classes {
        let mut idx: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == class).collect();
        if minority[class] {
            let keep = (idx.len() / 2).max(1);
            idx.shuffle(&mut rng);
            idx.truncate(keep);
        }
        kept.extend_from_slice(&idx);
    }
    kept.sort_unstable();
    subset(
        train,
        &kept,
        Provenance::StepImbalanced {
            base: Box::new(train.provenance.clone()),
            minority_fraction,
            seed,
        },
    )
}

fn subset(base: &Dataset, indices: &[usize], provenance: Provenance) -> Dataset {
    let (inputs, labels) = base.gather(indices);
    let ds = Dataset {
        inputs,
        input_shape: base.input_shape.clone(),
        labels,
        num_classes: base.num_classes,
        split: base.split,
        provenance,
    };
    ds.check_invariants();
    ds
}
