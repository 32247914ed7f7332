//! Dataset loading (IDX for MNIST/Fashion-MNIST, CIFAR-10 binary batches)
//! and affine training-set augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::rng::{rng_for, stream, Rng};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
}

impl DatasetKind {
    pub fn image_shape(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, CIFAR_SIDE, CIFAR_SIDE],
        }
    }

    /// Load one split from a directory holding the standard file names
    /// (`train-images-idx3-ubyte`, ... or `data_batch_1.bin`, ...). CIFAR
    /// files may also sit in a `cifar-10-batches-bin/` subdirectory.
    pub fn load(self, dir: &Path, split: Split) -> Result<Dataset> {
        match self {
            DatasetKind::Mnist | DatasetKind::FashionMnist => {
                let prefix = match split {
                    Split::Train => "train",
                    Split::Test => "t10k",
                };
                let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
                let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
                require(&[&images, &labels])?;
                load_idx(&images, &labels, split)
            }
            DatasetKind::Cifar10 => {
                let root = if dir.join("cifar-10-batches-bin").is_dir() {
                    dir.join("cifar-10-batches-bin")
                } else {
                    dir.to_path_buf()
                };
                let files: Vec<PathBuf> = match split {
                    Split::Train => (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect(),
                    Split::Test => vec![root.join("test_batch.bin")],
                };
                require(&files.iter().collect::<Vec<_>>())?;
                load_cifar10(&files, split)
            }
        }
    }
}

fn require(paths: &[&PathBuf]) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(DataError::Missing(missing.join(", ")).into())
    }
}

/// Images `[N,C,H,W]` scaled to `[0,1]` and their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim("dataset images", images.shape(), &[0, 0, 0, 0]));
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            }
            .into());
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= NUM_CLASSES) {
            return Err(DataError::LabelRange {
                index,
                label,
                classes: NUM_CLASSES,
            }
            .into());
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C,H,W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len: usize = self.image_shape().iter().product();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// The first `limit` samples.
    pub fn take(self, limit: usize) -> Result<Self> {
        if limit >= self.len() {
            return Ok(self);
        }
        if limit == 0 {
            return Err(DataError::Empty.into());
        }
        let images = self.images.slice_outer(0, limit)?;
        Dataset::new(images, self.labels[..limit].to_vec(), self.split)
    }

    /// Gather samples into a batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, file: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            DataError::Truncated {
                file: file.to_string(),
                expected: at + 4,
                found: bytes.len(),
            }
            .into()
        })
}

fn expect_magic(bytes: &[u8], expected: u32, file: &str) -> Result<()> {
    let found = be_u32(bytes, 0, file)?;
    if found != expected {
        return Err(DataError::BadMagic {
            file: file.to_string(),
            expected,
            found,
        }
        .into());
    }
    Ok(())
}

fn payload<'b>(bytes: &'b [u8], header: usize, len: usize, file: &str) -> Result<&'b [u8]> {
    bytes.get(header..header + len).ok_or_else(|| {
        DataError::Truncated {
            file: file.to_string(),
            expected: header + len,
            found: bytes.len(),
        }
        .into()
    })
}

/// Decode an IDX3 image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    expect_magic(bytes, IDX_IMAGES_MAGIC, file)?;
    let n = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let pixels = payload(bytes, 16, n * rows * cols, file)?;
    Ok((n, rows, cols, pixels.to_vec()))
}

/// Decode an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<u8>> {
    expect_magic(bytes, IDX_LABELS_MAGIC, file)?;
    let n = be_u32(bytes, 4, file)? as usize;
    Ok(payload(bytes, 8, n, file)?.to_vec())
}

pub fn idx_from_bytes(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images, "images")?;
    let labels = parse_idx_labels(labels, "labels")?;
    build_idx(n, rows, cols, &pixels, &labels, split)
}

fn build_idx(n: usize, rows: usize, cols: usize, pixels: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    if n != labels.len() {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    if n == 0 {
        return Err(DataError::Empty.into());
    }
    let data = pixels.iter().map(|&b| f32::from(b) / 255.0).collect();
    Dataset::new(
        Tensor::new(vec![n, 1, rows, cols], data)?,
        labels.iter().map(|&l| usize::from(l)).collect(),
        split,
    )
}

/// Load an MNIST-style pair of IDX files. Pixel byte `b` becomes `b / 255`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let image_name = images_path.display().to_string();
    let label_name = labels_path.display().to_string();
    let (n, rows, cols, pixels) = parse_idx_images(&read(images_path)?, &image_name)?;
    let labels = parse_idx_labels(&read(labels_path)?, &label_name)?;
    build_idx(n, rows, cols, &pixels, &labels, split)
}

/// Decode concatenated CIFAR-10 records: a label byte then 1024 R, 1024 G
/// and 1024 B bytes.
pub fn parse_cifar10(bytes: &[u8], file: &str) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::RecordLength {
            file: file.to_string(),
            len: bytes.len(),
            record: CIFAR_RECORD,
        }
        .into());
    }
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(usize::from(record[0]));
        pixels.extend(record[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Ok((pixels, labels))
}

pub fn cifar10_from_bytes(chunks: &[&[u8]], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (i, bytes) in chunks.iter().enumerate() {
        let (p, l) = parse_cifar10(bytes, &format!("chunk {i}"))?;
        pixels.extend(p);
        labels.extend(l);
    }
    build_cifar(pixels, labels, split)
}

fn build_cifar(pixels: Vec<f32>, labels: Vec<usize>, split: Split) -> Result<Dataset> {
    if labels.is_empty() {
        return Err(DataError::Empty.into());
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?,
        labels,
        split,
    )
}

pub fn load_cifar10(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let (p, l) = parse_cifar10(&read(path)?, &path.display().to_string())?;
        pixels.extend(p);
        labels.extend(l);
    }
    build_cifar(pixels, labels, split)
}

/// Uniform sampling ranges for the four augmentation transforms. Shifts are
/// fractions of the image width/height; angles are in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub rotate_deg: [f64; 2],
    pub scale: [f64; 2],
    pub shift_frac: [f64; 2],
    pub shear_deg: [f64; 2],
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl AugmentSpec {
    pub fn identity() -> Self {
        AugmentSpec {
            rotate_deg: [0.0, 0.0],
            scale: [1.0, 1.0],
            shift_frac: [0.0, 0.0],
            shear_deg: [0.0, 0.0],
        }
    }

    /// Ranges used for MNIST and CIFAR-10.
    pub fn mnist() -> Self {
        AugmentSpec {
            rotate_deg: [-10.0, 10.0],
            scale: [0.8, 1.2],
            shift_frac: [-0.08, 0.08],
            shear_deg: [-0.3, 0.3],
        }
    }

    pub fn fashion_mnist() -> Self {
        AugmentSpec {
            rotate_deg: [-5.0, 5.0],
            ..Self::identity()
        }
    }

    pub fn cifar10() -> Self {
        Self::mnist()
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.rotate_deg, self.scale, self.shift_frac, self.shear_deg];
        if ranges.iter().any(|[lo, hi]| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::Config(format!("augmentation range with lo > hi: {self:?}")));
        }
        if self.scale[0] <= 0.0 || self.shear_deg.iter().any(|s| s.abs() >= 90.0) {
            return Err(Error::Config(format!("degenerate augmentation range: {self:?}")));
        }
        Ok(())
    }
}

/// One concrete transform drawn from an [`AugmentSpec`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub rotate_deg: f64,
    pub scale: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub shear_deg: f64,
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            rotate_deg: 0.0,
            scale: 1.0,
            shift_x: 0.0,
            shift_y: 0.0,
            shear_deg: 0.0,
        }
    }

    pub fn sample(spec: &AugmentSpec, rng: &mut Rng) -> Self {
        let mut draw = |[lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        AffineParams {
            rotate_deg: draw(spec.rotate_deg),
            scale: draw(spec.scale),
            shift_x: draw(spec.shift_frac),
            shift_y: draw(spec.shift_frac),
            shear_deg: draw(spec.shear_deg),
        }
    }

    /// Forward matrix `rotation · shear · scale` in image coordinates
    /// (x right, y down); positive angles rotate counter-clockwise on screen.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotate_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        let z = self.scale;
        // R = [[c, s], [-s, c]], Sh = [[1, k], [0, 1]]
        [[c * z, (c * k + s) * z], [-s * z, (-s * k + c) * z]]
    }
}

/// Resample every channel of a `[C,H,W]` image under `params`, about the
/// image center, with bilinear interpolation and zero fill. Output values
/// are clamped to `[0,1]`.
pub fn warp(image: &[f32], shape: [usize; 3], params: &AffineParams) -> Vec<f32> {
    let [channels, h, w] = shape;
    let a = params.matrix();
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (tx, ty) = (params.shift_x * w as f64, params.shift_y * h as f64);

    let mut out = vec![0.0f32; image.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - tx;
            let dy = y as f64 - cy - ty;
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for ch in 0..channels {
                let plane = &image[ch * h * w..(ch + 1) * h * w];
                let mut acc = 0.0f64;
                for &(px, py, wt) in &taps {
                    if wt != 0.0 && px >= 0.0 && py >= 0.0 && px < w as f64 && py < h as f64 {
                        acc += wt * f64::from(plane[py as usize * w + px as usize]);
                    }
                }
                out[ch * h * w + y * w + x] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

pub fn augment(image: &[f32], shape: [usize; 3], spec: &AugmentSpec, rng: &mut Rng) -> Vec<f32> {
    warp(image, shape, &AffineParams::sample(spec, rng))
}

/// Augment samples `indices` of `dataset` for `epoch`. Each image draws
/// from its own stream keyed by `(seed, epoch, index)`.
pub fn augment_batch(
    dataset: &Dataset,
    indices: &[usize],
    spec: &AugmentSpec,
    seed: u64,
    epoch: usize,
) -> (Tensor<f32>, Vec<usize>) {
    let shape = dataset.image_shape();
    let mut data = Vec::with_capacity(indices.len() * shape.iter().product::<usize>());
    for &i in indices {
        let mut rng = rng_for(seed, &[stream::AUGMENT, epoch as u64, i as u64]);
        data.extend(augment(dataset.image(i), shape, spec, &mut rng));
    }
    let [c, h, w] = shape;
    (
        Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape"),
        indices.iter().map(|&i| dataset.labels[i]).collect(),
    )
}

/// Pre-expanded augmentation: the originals followed by `copies` augmented
/// copies of every image.
pub fn expand_static(dataset: &Dataset, spec: &AugmentSpec, seed: u64, copies: usize) -> Result<Dataset> {
    let shape = dataset.image_shape();
    let mut data = dataset.images.data().to_vec();
    let mut labels = dataset.labels.clone();
    for copy in 0..copies {
        for i in 0..dataset.len() {
            let mut rng = rng_for(seed, &[stream::STATIC_AUGMENT, copy as u64, i as u64]);
            data.extend(augment(dataset.image(i), shape, spec, &mut rng));
            labels.push(dataset.labels[i]);
        }
    }
    let [c, h, w] = shape;
    Dataset::new(Tensor::new(vec![labels.len(), c, h, w], data)?, labels, dataset.split)
}
