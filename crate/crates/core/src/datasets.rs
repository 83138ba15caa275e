//! Dataset parsers (MNIST IDX, CIFAR-100 binary) and task constructors.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, format_err, shape_err, Result};
use crate::rngcore::{random_permutation, Purpose, RngStream};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 3074;

/// Images as rows of `C·H·W` values in `[0, 1]`, with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    images: Array2<f32>,
    shape: [usize; 3],
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledSet {
    pub fn new(
        images: Array2<f32>,
        shape: [usize; 3],
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let n = images.nrows();
        if n == 0 {
            return Err(shape_err("a labeled set needs at least one sample"));
        }
        if images.ncols() != shape.iter().product::<usize>() {
            return Err(shape_err(format!(
                "image rows hold {} values, shape {shape:?} needs {}",
                images.ncols(),
                shape.iter().product::<usize>()
            )));
        }
        if labels.len() != n {
            return Err(shape_err(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(shape_err(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            images,
            shape,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Array2<f32> {
        &self.images
    }

    pub fn image(&self, i: usize) -> ArrayView1<'_, f32> {
        self.images.row(i)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(images, self.shape, labels, self.classes)
    }

    /// First `n` samples (all of them if `n` is larger).
    pub fn truncate(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

fn read_u32_be(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(format!("{what}: truncated header")))
}

/// Parses an IDX image file: returns `(n, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32_be(bytes, 0, "idx images")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(format_err(format!(
            "idx images: magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(bytes, 4, "idx images")? as usize;
    let rows = read_u32_be(bytes, 8, "idx images")? as usize;
    let cols = read_u32_be(bytes, 12, "idx images")? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() != want {
        return Err(format_err(format!(
            "idx images: {n}×{rows}×{cols} declared, {} pixel bytes present",
            body.len()
        )));
    }
    Ok((n, rows, cols, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32_be(bytes, 0, "idx labels")?;
    if magic != IDX_LABEL_MAGIC {
        return Err(format_err(format!(
            "idx labels: magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(bytes, 4, "idx labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(format_err(format!(
            "idx labels: {n} declared, {} present",
            body.len()
        )));
    }
    Ok(body)
}

/// Builds a set from raw IDX bytes.
pub fn mnist_from_idx_bytes(images: &[u8], labels: &[u8]) -> Result<LabeledSet> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(format_err(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(format_err(format!("digit label {bad} out of range")));
    }
    let data: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Array2::from_shape_vec((n, rows * cols), data).expect("sizes checked");
    LabeledSet::new(
        images,
        [1, rows, cols],
        labels.iter().map(|&l| l as usize).collect(),
        10,
    )
    .map_err(|e| format_err(e.to_string()))
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledSet> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    mnist_from_idx_bytes(&images, &labels)
}

/// Serializes 8-bit images and labels in IDX form.
pub fn write_idx(pixels: &[u8], n: usize, rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    assert_eq!(pixels.len(), n * rows * cols);
    assert_eq!(labels.len(), n);
    let mut img = Vec::with_capacity(16 + pixels.len());
    for word in [IDX_IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&word.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Parses CIFAR-100 binary records, keeping the fine label.
pub fn cifar100_from_bytes(bytes: &[u8]) -> Result<LabeledSet> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(format_err(format!(
            "cifar-100: {} bytes is not a whole number of {CIFAR_RECORD_LEN}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        let fine = rec[1] as usize;
        if fine >= 100 {
            return Err(format_err(format!("cifar-100: fine label {fine} out of range")));
        }
        labels.push(fine);
        data.extend(rec[2..].iter().map(|&p| p as f32 / 255.0));
    }
    let images = Array2::from_shape_vec((n, 3072), data).expect("sizes checked");
    LabeledSet::new(images, [3, 32, 32], labels, 100)
}

pub fn load_cifar100(path: &Path) -> Result<LabeledSet> {
    cifar100_from_bytes(&fs::read(path)?)
}

/// One CIFAR-100 record per `(coarse, fine, pixels)` triple.
pub fn write_cifar100(records: &[(u8, u8, &[u8])]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD_LEN);
    for &(coarse, fine, pixels) in records {
        assert_eq!(pixels.len(), 3072);
        out.push(coarse);
        out.push(fine);
        out.extend_from_slice(pixels);
    }
    out
}

fn right_angle_trig(degrees: u32) -> Option<(f64, f64)> {
    match degrees {
        0 => Some((1.0, 0.0)),
        90 => Some((0.0, 1.0)),
        180 => Some((-1.0, 0.0)),
        270 => Some((0.0, -1.0)),
        _ => None,
    }
}

pub fn check_rotation(degrees: u32) -> Result<()> {
    if degrees % 10 != 0 || degrees > 350 {
        return Err(config_err(format!(
            "rotation must be a multiple of 10 in [0, 350], got {degrees}"
        )));
    }
    Ok(())
}

/// Rotates one `h × w` plane counter-clockwise about its center.
/// Bilinear sampling, zero outside the source.
pub fn rotate_plane(src: &[f32], h: usize, w: usize, degrees: u32, dst: &mut [f32]) {
    let (cos, sin) = right_angle_trig(degrees).unwrap_or_else(|| {
        let rad = (degrees as f64).to_radians();
        (rad.cos(), rad.sin())
    });
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[y as usize * w + x as usize] as f64
        }
    };
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // inverse map: where did this output pixel come from
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut v = (1.0 - fx) * (1.0 - fy) * at(y0, x0);
            if fx != 0.0 {
                v += fx * (1.0 - fy) * at(y0, x0 + 1);
            }
            if fy != 0.0 {
                v += (1.0 - fx) * fy * at(y0 + 1, x0);
                if fx != 0.0 {
                    v += fx * fy * at(y0 + 1, x0 + 1);
                }
            }
            dst[y * w + x] = v as f32;
        }
    }
}

pub fn rotate_task(set: &LabeledSet, degrees: u32) -> Result<LabeledSet> {
    check_rotation(degrees)?;
    if degrees == 0 {
        return Ok(set.clone());
    }
    let [c, h, w] = set.shape;
    let mut images = Array2::zeros(set.images.dim());
    for (src, mut dst) in set.images.axis_iter(Axis(0)).zip(images.axis_iter_mut(Axis(0))) {
        let src = src.as_slice().expect("rows are contiguous");
        let dst = dst.as_slice_mut().expect("rows are contiguous");
        for ch in 0..c {
            let plane = ch * h * w..(ch + 1) * h * w;
            rotate_plane(&src[plane.clone()], h, w, degrees, &mut dst[plane]);
        }
    }
    LabeledSet::new(images, set.shape, set.labels.clone(), set.classes)
}

/// Pixel permutation for a P-MNIST task. Task 0 is the identity.
pub fn task_permutation(seed: u64, task_id: u32, len: usize) -> Result<Vec<usize>> {
    if task_id == 0 {
        return Ok((0..len).collect());
    }
    let mut rng = RngStream::derive(seed, Purpose::Permutation, 0, task_id);
    random_permutation(len, &mut rng)
}

/// Output pixel `i` takes input pixel `perm[i]`.
pub fn permute_task(set: &LabeledSet, perm: &[usize]) -> Result<LabeledSet> {
    let d = set.images.ncols();
    let mut seen = vec![false; d];
    if perm.len() != d || perm.iter().any(|&p| p >= d || std::mem::replace(&mut seen[p], true)) {
        return Err(config_err(format!("not a permutation of {d} pixels")));
    }
    let images = set.images.select(Axis(1), perm);
    LabeledSet::new(images, set.shape, set.labels.clone(), set.classes)
}

/// Disjoint class subsets of size `ways`, drawn from a seeded shuffle.
pub fn split_classes(
    classes: usize,
    ways: usize,
    task_count: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if ways == 0 || task_count == 0 {
        return Err(config_err("ways and task count must be positive"));
    }
    if ways * task_count > classes {
        return Err(config_err(format!(
            "{task_count} tasks of {ways} classes need {} classes, only {classes} available",
            ways * task_count
        )));
    }
    let mut rng = RngStream::derive(seed, Purpose::Split, 0, 0);
    let order = random_permutation(classes, &mut rng)?;
    Ok(order
        .chunks_exact(ways)
        .take(task_count)
        .map(|c| c.to_vec())
        .collect())
}

/// Samples whose label is in `classes`, relabeled by position in `classes`.
pub fn class_subset(set: &LabeledSet, classes: &[usize]) -> Result<LabeledSet> {
    let mut remap = vec![usize::MAX; set.classes];
    for (new, &old) in classes.iter().enumerate() {
        if old >= set.classes || remap[old] != usize::MAX {
            return Err(config_err(format!("bad class subset {classes:?}")));
        }
        remap[old] = new;
    }
    let idx: Vec<usize> = (0..set.len())
        .filter(|&i| remap[set.labels[i]] != usize::MAX)
        .collect();
    if idx.is_empty() {
        return Err(config_err(format!("no samples for classes {classes:?}")));
    }
    let images = set.images.select(Axis(0), &idx);
    let labels = idx.iter().map(|&i| remap[set.labels[i]]).collect();
    LabeledSet::new(images, set.shape, labels, classes.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Mnist,
    Cifar100,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Rotate { degrees: u32 },
    Permute { seed: u64 },
    ClassSubset { classes: Vec<usize> },
}

/// How one task's data is derived from its source split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: u32,
    pub transform: Transform,
    pub source: Source,
}

impl TaskSpec {
    /// R-MNIST task `task_id` (0-based) rotates by `10 · task_id` degrees.
    pub fn rotated(task_id: u32) -> Self {
        Self {
            task_id,
            transform: Transform::Rotate {
                degrees: 10 * task_id,
            },
            source: Source::Mnist,
        }
    }

    pub fn permuted(task_id: u32, seed: u64) -> Self {
        Self {
            task_id,
            transform: Transform::Permute { seed },
            source: Source::Mnist,
        }
    }

    pub fn split(task_id: u32, classes: Vec<usize>) -> Self {
        Self {
            task_id,
            transform: Transform::ClassSubset { classes },
            source: Source::Cifar100,
        }
    }

    /// Applies the transform; the same call serves train and test splits.
    pub fn apply(&self, set: &LabeledSet) -> Result<LabeledSet> {
        match &self.transform {
            Transform::Rotate { degrees } => rotate_task(set, *degrees),
            Transform::Permute { seed } => {
                let perm = task_permutation(*seed, self.task_id, set.images.ncols())?;
                permute_task(set, &perm)
            }
            Transform::ClassSubset { classes } => class_subset(set, classes),
        }
    }

    pub fn classes(&self, source_classes: usize) -> usize {
        match &self.transform {
            Transform::ClassSubset { classes } => classes.len(),
            _ => source_classes,
        }
    }
}

/// Expected dataset file, relative to the data directory.
#[derive(Debug, Clone, Copy)]
pub struct ExpectedFile {
    pub path: &'static str,
    pub size: u64,
    pub sha256: Option<&'static str>,
}

pub const MNIST_FILES: [ExpectedFile; 4] = [
    ExpectedFile {
        path: "mnist/train-images-idx3-ubyte",
        size: 47_040_016,
        sha256: Some("ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    },
    ExpectedFile {
        path: "mnist/train-labels-idx1-ubyte",
        size: 60_008,
        sha256: Some("65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    },
    ExpectedFile {
        path: "mnist/t10k-images-idx3-ubyte",
        size: 7_840_016,
        sha256: Some("0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    },
    ExpectedFile {
        path: "mnist/t10k-labels-idx1-ubyte",
        size: 10_008,
        sha256: Some("ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
    },
];

pub const CIFAR100_FILES: [ExpectedFile; 2] = [
    ExpectedFile {
        path: "cifar-100-binary/train.bin",
        size: 50_000 * CIFAR_RECORD_LEN as u64,
        sha256: None,
    },
    ExpectedFile {
        path: "cifar-100-binary/test.bin",
        size: 10_000 * CIFAR_RECORD_LEN as u64,
        sha256: None,
    },
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileStatus {
    Ok,
    Missing,
    WrongSize { found: u64 },
    WrongChecksum { found: String },
}

#[derive(Debug, Clone)]
pub struct FileReport {
    pub path: PathBuf,
    pub status: FileStatus,
}

/// Checks presence, size and (where known) SHA-256 of each file.
pub fn verify_files(data_dir: &Path, files: &[ExpectedFile]) -> Result<Vec<FileReport>> {
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let path = data_dir.join(f.path);
        let status = match fs::metadata(&path) {
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => FileStatus::Missing,
            Err(e) => return Err(e.into()),
            Ok(meta) if meta.len() != f.size => FileStatus::WrongSize { found: meta.len() },
            Ok(_) => match f.sha256 {
                None => FileStatus::Ok,
                Some(want) => {
                    let found = hex_digest(&fs::read(&path)?);
                    if found == want {
                        FileStatus::Ok
                    } else {
                        FileStatus::WrongChecksum { found }
                    }
                }
            },
        };
        out.push(FileReport { path, status });
    }
    Ok(out)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// MNIST train and test splits from `data_dir/mnist`.
pub fn load_mnist(data_dir: &Path) -> Result<(LabeledSet, LabeledSet)> {
    let p = |i: usize| data_dir.join(MNIST_FILES[i].path);
    Ok((load_mnist_idx(&p(0), &p(1))?, load_mnist_idx(&p(2), &p(3))?))
}

/// CIFAR-100 train and test splits from `data_dir/cifar-100-binary`.
pub fn load_cifar(data_dir: &Path) -> Result<(LabeledSet, LabeledSet)> {
    Ok((
        load_cifar100(&data_dir.join(CIFAR100_FILES[0].path))?,
        load_cifar100(&data_dir.join(CIFAR100_FILES[1].path))?,
    ))
}
