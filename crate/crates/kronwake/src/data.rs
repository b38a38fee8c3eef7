//! Dataset ingestion: IDX files, seeded shuffled batching, and synthetic
//! generators for regression and oracle-scale tests.

use crate::error::{Error, Result};
use crate::network::{forward, standard_normal, Activation, Labels, LayerSpec, NetParams};
use crate::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::path::Path;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Classification { n_classes: usize },
    Regression,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// N × input_dim, entries finite (loaded pixels land in [0,1]).
    pub inputs: Matrix,
    pub labels: Labels,
    pub kind: DataKind,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> (Matrix, Labels) {
        let mut inputs = Matrix::zeros(idx.len(), self.inputs.cols());
        for (r, &i) in idx.iter().enumerate() {
            inputs.row_mut(r).copy_from_slice(self.inputs.row(i));
        }
        (inputs, self.labels.subset(idx))
    }
}

fn read_be_u32(bytes: &[u8], off: usize, what: &str) -> Result<u32> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!("truncated file while reading {what}")));
    }
    Ok(u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]))
}

/// Load an IDX image/label pair into a classification dataset. Pixels are
/// scaled to [0,1] by /255 and flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lab_bytes = std::fs::read(labels_path)?;

    let img_magic = read_be_u32(&img_bytes, 0, "image magic")?;
    if img_magic != IMAGES_MAGIC {
        return Err(Error::Format(format!("bad image magic 0x{img_magic:08x}, want 0x{IMAGES_MAGIC:08x}")));
    }
    let lab_magic = read_be_u32(&lab_bytes, 0, "label magic")?;
    if lab_magic != LABELS_MAGIC {
        return Err(Error::Format(format!("bad label magic 0x{lab_magic:08x}, want 0x{LABELS_MAGIC:08x}")));
    }

    let n_images = read_be_u32(&img_bytes, 4, "image count")? as usize;
    let rows = read_be_u32(&img_bytes, 8, "image rows")? as usize;
    let cols = read_be_u32(&img_bytes, 12, "image cols")? as usize;
    let n_labels = read_be_u32(&lab_bytes, 4, "label count")? as usize;

    let input_dim = rows * cols;
    let want_img = 16 + n_images * input_dim;
    if img_bytes.len() < want_img {
        return Err(Error::Format(format!("truncated image file: {} < {want_img} bytes", img_bytes.len())));
    }
    let want_lab = 8 + n_labels;
    if lab_bytes.len() < want_lab {
        return Err(Error::Format(format!("truncated label file: {} < {want_lab} bytes", lab_bytes.len())));
    }
    if n_images == 0 {
        return Err(Error::Format("empty dataset: image count is 0".into()));
    }
    if n_images != n_labels {
        return Err(Error::Format(format!("count mismatch: {n_images} images vs {n_labels} labels")));
    }

    let mut inputs = Matrix::zeros(n_images, input_dim);
    for i in 0..n_images {
        let src = &img_bytes[16 + i * input_dim..16 + (i + 1) * input_dim];
        let dst = inputs.row_mut(i);
        for (d, &b) in dst.iter_mut().zip(src) {
            *d = b as f64 / 255.0;
        }
    }
    let classes: Vec<usize> = lab_bytes[8..8 + n_labels].iter().map(|&b| b as usize).collect();
    let n_classes = classes.iter().max().map(|m| m + 1).unwrap_or(0).max(2);
    Ok(Dataset {
        inputs,
        labels: Labels::Classes(classes),
        kind: DataKind::Classification { n_classes },
    })
}

/// Batch schedule: a seeded permutation per epoch, final partial batch kept.
#[derive(Clone, Copy, Debug)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
}

/// Index batches for one epoch, deterministic in (seed, epoch).
pub fn batches(n: usize, plan: &BatchPlan, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng =
        ChaCha12Rng::seed_from_u64(plan.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    Ok(perm.chunks(plan.batch_size).map(|c| c.to_vec()).collect())
}

fn teacher_arch(input_dim: usize, out_dim: usize) -> Vec<LayerSpec> {
    let hidden = (input_dim + out_dim).max(4);
    vec![
        LayerSpec { in_dim: input_dim, out_dim: hidden, activation: Activation::Relu },
        LayerSpec { in_dim: hidden, out_dim, activation: Activation::Identity },
    ]
}

/// The (deterministic) teacher network behind `synth_regression`.
pub fn synth_teacher(input_dim: usize, out_dim: usize, teacher_seed: u64) -> Result<NetParams> {
    let mut rng = ChaCha12Rng::seed_from_u64(teacher_seed);
    NetParams::init(&teacher_arch(input_dim, out_dim), &mut rng)
}

/// Teacher-network targets plus Gaussian noise of the given scale (the unit
/// scale matches a N(y | h(x); I) predictive model).
pub fn synth_regression(
    n: usize,
    input_dim: usize,
    out_dim: usize,
    teacher_seed: u64,
    noise_std: f64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("synth_regression: n must be positive".into()));
    }
    let teacher = synth_teacher(input_dim, out_dim, teacher_seed)?;
    // Separate stream so the teacher is reproducible on its own.
    let mut rng = ChaCha12Rng::seed_from_u64(teacher_seed ^ 0xA5A5_5A5A_DEAD_BEEF);
    let inputs = Matrix::from_fn(n, input_dim, |_, _| rng.gen_range(-1.0..1.0));
    let (outputs, _) = forward(&teacher, &inputs)?;
    let mut targets = outputs.clone();
    if noise_std != 0.0 {
        for i in 0..n {
            for j in 0..out_dim {
                let v = targets.get(i, j) + noise_std * standard_normal(&mut rng);
                targets.set(i, j, v);
            }
        }
    }
    Ok(Dataset { inputs, labels: Labels::Targets(targets), kind: DataKind::Regression })
}

/// Teacher-argmax classification set for smoke runs and CLI tests.
pub fn synth_classification(
    n: usize,
    input_dim: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || n_classes < 2 {
        return Err(Error::Config("synth_classification: need n > 0 and ≥ 2 classes".into()));
    }
    let teacher = synth_teacher(input_dim, n_classes, seed)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5151_1515_CAFE_F00D);
    let inputs = Matrix::from_fn(n, input_dim, |_, _| rng.gen_range(-1.0..1.0));
    let (outputs, _) = forward(&teacher, &inputs)?;
    let classes: Vec<usize> = (0..n)
        .map(|i| {
            let row = outputs.row(i);
            let mut best = 0;
            for c in 1..n_classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(Dataset {
        inputs,
        labels: Labels::Classes(classes),
        kind: DataKind::Classification { n_classes },
    })
}
