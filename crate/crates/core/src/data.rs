//! Dataset ingestion (IDX, amat), rotated-variant generation, padding and
//! batch assembly.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transform::{RotationRange, Transform, TransformSet};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const AMAT_FIELDS: usize = 785;

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    pub rotation: Option<RotationRange>,
    /// Bumped whenever angle sampling changes, so stale files are detectable.
    pub angles_version: u32,
}

pub const ANGLES_VERSION: u32 = 1;

/// Grayscale images `[M, H, W]` in `[0, 1]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub provenance: Provenance,
}

impl LabeledImageSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, provenance: Provenance) -> Result<Self> {
        if images.rank() != 3 {
            return Err(Error::shape(format!("images must be [M, H, W], got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        let mut images = images;
        for v in images.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { images, labels, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W)` of every image.
    pub fn image_size(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let (h, w) = self.image_size();
        &self.images.data()[i * h * w..(i + 1) * h * w]
    }

    /// Images at the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let (h, w) = self.image_size();
        let mut data = Vec::with_capacity(indices.len() * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("index {i} out of range for {} images", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self::new(
            Tensor::from_vec(&[indices.len(), h, w], data)?,
            labels,
            self.provenance.clone(),
        )
    }

    /// Contiguous slice `[start, start + count)`.
    pub fn slice(&self, start: usize, count: usize) -> Result<Self> {
        self.select(&(start..start + count).collect::<Vec<_>>())
    }

    /// Subsamples every class down to the size of the rarest one.
    pub fn balanced(&self, seed: u64) -> Result<Self> {
        let n_classes = self.labels.iter().max().map_or(0, |&m| m + 1);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let keep = by_class.iter().filter(|v| !v.is_empty()).map(Vec::len).min().unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = by_class
            .iter_mut()
            .flat_map(|v| {
                v.shuffle(&mut rng);
                v.iter().copied().take(keep).collect::<Vec<_>>()
            })
            .collect();
        picked.sort_unstable();
        self.select(&picked)
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let mut file = BufReader::new(File::open(path)?);
    let head = file.fill_buf()?;
    if head.len() >= 2 && head[0] == 0x1f && head[1] == 0x8b {
        Ok(Box::new(GzDecoder::new(file)))
    } else {
        Ok(Box::new(file))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Reads an IDX image/label file pair (optionally gzip-compressed).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let mut img = open_maybe_gz(images_path.as_ref())?;
    let magic = read_u32(&mut img)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let (m, h, w) = (read_u32(&mut img)? as usize, read_u32(&mut img)? as usize, read_u32(&mut img)? as usize);

    let mut lab = open_maybe_gz(labels_path.as_ref())?;
    let magic = read_u32(&mut lab)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n_labels = read_u32(&mut lab)? as usize;
    if n_labels != m {
        return Err(Error::Consistency(format!("{m} images but {n_labels} labels")));
    }
    if m == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("empty IDX dimensions {m}x{h}x{w}")));
    }

    let mut pixels = vec![0u8; m * h * w];
    img.read_exact(&mut pixels)?;
    let mut labels = vec![0u8; m];
    lab.read_exact(&mut labels)?;

    let data = pixels.into_iter().map(|p| f32::from(p) / 255.0).collect();
    LabeledImageSet::new(
        Tensor::from_vec(&[m, h, w], data)?,
        labels.into_iter().map(usize::from).collect(),
        Provenance {
            source: images_path.as_ref().display().to_string(),
            ..Provenance::default()
        },
    )
}

/// Writes an uncompressed IDX pair; pixels are quantized to bytes.
pub fn write_idx(set: &LabeledImageSet, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = set.image_size();
    let mut img = BufWriter::new(File::create(images_path)?);
    for v in [IDX_IMAGES_MAGIC, set.len() as u32, h as u32, w as u32] {
        img.write_all(&v.to_be_bytes())?;
    }
    let bytes: Vec<u8> = set.images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    img.write_all(&bytes)?;
    img.flush()?;

    let mut lab = BufWriter::new(File::create(labels_path)?);
    for v in [IDX_LABELS_MAGIC, set.len() as u32] {
        lab.write_all(&v.to_be_bytes())?;
    }
    let labels = set
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    lab.write_all(&labels)?;
    lab.flush()?;
    Ok(())
}

/// Reads whitespace-separated text rows of 784 pixel values and a label.
pub fn load_amat(path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields = line
            .split_whitespace()
            .map(|f| {
                f.parse::<f32>()
                    .map_err(|_| Error::Format(format!("line {}: `{f}` is not a number", lineno + 1)))
            })
            .collect::<Result<Vec<f32>>>()?;
        if fields.len() != AMAT_FIELDS {
            return Err(Error::Format(format!(
                "line {}: {} fields, expected {AMAT_FIELDS}",
                lineno + 1,
                fields.len()
            )));
        }
        let label = fields[AMAT_FIELDS - 1];
        if label < 0.0 || !label.is_finite() {
            return Err(Error::Format(format!("line {}: invalid label {label}", lineno + 1)));
        }
        labels.push(label.trunc() as usize);
        data.extend_from_slice(&fields[..AMAT_FIELDS - 1]);
    }
    if labels.is_empty() {
        return Err(Error::Format("no rows".into()));
    }
    LabeledImageSet::new(
        Tensor::from_vec(&[labels.len(), 28, 28], data)?,
        labels,
        Provenance {
            source: path.as_ref().display().to_string(),
            ..Provenance::default()
        },
    )
}

/// Independent uniform angles: `[0, 2 pi)` for the full circle,
/// `[-pi/2, pi/2]` for the half circle.
pub fn sample_angles(count: usize, range: RotationRange, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| match range {
            RotationRange::Full => rng.gen_range(0.0..2.0 * PI),
            RotationRange::Half => rng.gen_range(-FRAC_PI_2..=FRAC_PI_2),
        })
        .collect()
}

/// Rotates every image by its own random angle (bilinear, zero background).
pub fn make_rotated_variant(base: &LabeledImageSet, range: RotationRange, seed: u64) -> Result<LabeledImageSet> {
    let (h, w) = base.image_size();
    if h != w {
        return Err(Error::shape(format!("rotated variants need square images, got {h}x{w}")));
    }
    let angles = sample_angles(base.len(), range, seed);
    let mut out = vec![0f32; base.images.len()];
    for (i, (dst, &angle)) in out.chunks_exact_mut(h * w).zip(&angles).enumerate() {
        Transform::rotate(angle).apply_slice(base.image(i), h, w, dst)?;
    }
    LabeledImageSet::new(
        Tensor::from_vec(base.images.shape(), out)?,
        base.labels.clone(),
        Provenance {
            source: base.provenance.source.clone(),
            seed: Some(seed),
            rotation: Some(range),
            angles_version: ANGLES_VERSION,
        },
    )
}

/// Zero-pads images to `size x size`, centered.
pub fn pad_centered(set: &LabeledImageSet, size: usize) -> Result<LabeledImageSet> {
    let (h, w) = set.image_size();
    if h > size || w > size || !(size - h).is_multiple_of(2) || !(size - w).is_multiple_of(2) {
        return Err(Error::shape(format!("cannot center a {h}x{w} image in {size}x{size}")));
    }
    let (top, left) = ((size - h) / 2, (size - w) / 2);
    let mut out = vec![0f32; set.len() * size * size];
    for (i, dst) in out.chunks_exact_mut(size * size).enumerate() {
        for (r, row) in set.image(i).chunks_exact(w).enumerate() {
            let start = (r + top) * size + left;
            dst[start..start + w].copy_from_slice(row);
        }
    }
    LabeledImageSet::new(
        Tensor::from_vec(&[set.len(), size, size], out)?,
        set.labels.clone(),
        set.provenance.clone(),
    )
}

/// MNIST 28x28 to the network's 32x32 input.
pub fn pad_to_32(set: &LabeledImageSet) -> Result<LabeledImageSet> {
    if set.image_size() != (28, 28) {
        return Err(Error::shape(format!("pad_to_32 expects 28x28 images, got {:?}", set.image_size())));
    }
    pad_centered(set, 32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    /// Every sample expanded to all transformed instances.
    Ti,
    /// Every sample replaced by one randomly chosen transformed instance.
    Augment,
}

/// Stacked network input `[N, P, 1, H, W]` with labels and source indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    /// Image instances in this batch.
    pub fn presentations(&self) -> usize {
        self.inputs.shape()[0] * self.inputs.shape()[1]
    }
}

/// Stacks the given samples under every transform of `transforms`.
pub fn stack_samples(set: &LabeledImageSet, transforms: &TransformSet, indices: &[usize]) -> Result<Batch> {
    let sub = set.select(indices)?;
    Ok(Batch {
        inputs: transforms.stack(&sub.images)?,
        labels: sub.labels,
        indices: indices.to_vec(),
    })
}

/// One epoch of shuffled batches.
pub struct BatchStream<'a, R> {
    set: &'a LabeledImageSet,
    transforms: &'a TransformSet,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    mode: BatchMode,
    rng: R,
}

/// Shuffles the sample order with `rng` and streams batches. In augment mode
/// the per-sample transform choice is drawn from the same generator after
/// the shuffle.
pub fn make_batches<'a, R: Rng>(
    set: &'a LabeledImageSet,
    transforms: &'a TransformSet,
    batch_size: usize,
    mode: BatchMode,
    mut rng: R,
) -> Result<BatchStream<'a, R>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut rng);
    Ok(BatchStream {
        set,
        transforms,
        order,
        pos: 0,
        batch_size,
        mode,
        rng,
    })
}

impl<R: Rng> BatchStream<'_, R> {
    fn assemble(&mut self, indices: &[usize]) -> Result<Batch> {
        match self.mode {
            BatchMode::Ti => stack_samples(self.set, self.transforms, indices),
            BatchMode::Augment => {
                let (h, w) = self.set.image_size();
                let mut data = vec![0f32; indices.len() * h * w];
                for (&i, dst) in indices.iter().zip(data.chunks_exact_mut(h * w)) {
                    let choice = if self.transforms.len() == 1 {
                        0
                    } else {
                        self.rng.gen_range(0..self.transforms.len())
                    };
                    let t = self.transforms.get(choice).expect("choice below len");
                    t.apply_slice(self.set.image(i), h, w, dst)?;
                }
                Ok(Batch {
                    inputs: Tensor::from_vec(&[indices.len(), 1, 1, h, w], data)?,
                    labels: indices.iter().map(|&i| self.set.labels[i]).collect(),
                    indices: indices.to_vec(),
                })
            }
        }
    }
}

impl<R: Rng> Iterator for BatchStream<'_, R> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.assemble(&indices))
    }
}
