//! Image transformations and the ordered transformation set the network
//! pools over.
//!
//! Rotations use image coordinates (row down, column right) about the pixel
//! center `((H-1)/2, (W-1)/2)`. A positive angle turns the image clockwise on
//! screen, so `Rotate(pi/2)` and `Rot90(1)` agree: pixel `(r, c)` lands on
//! `(c, H-1-r)`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReflectAxis {
    /// Left-right mirror (columns reversed).
    Horizontal,
    /// Top-bottom mirror (rows reversed).
    Vertical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// Exact rotation by `k` quarter turns.
    Rot90 { k: u8 },
    /// Bilinear rotation; samples falling outside the image read `fill`.
    Rotate {
        radians: f64,
        #[serde(default)]
        fill: f64,
    },
    Reflect { axis: ReflectAxis },
    /// `Compose([a, b])` applies `b` first, then `a`.
    Compose { parts: Vec<Transform> },
}

impl Transform {
    pub fn rot90(k: u8) -> Self {
        Transform::Rot90 { k: k % 4 }
    }

    pub fn rotate(radians: f64) -> Self {
        Transform::Rotate { radians, fill: 0.0 }
    }

    pub fn reflect(axis: ReflectAxis) -> Self {
        Transform::Reflect { axis }
    }

    /// True if applying the transform only permutes pixels.
    pub fn is_exact(&self) -> bool {
        match self {
            Transform::Identity | Transform::Rot90 { .. } | Transform::Reflect { .. } => true,
            Transform::Rotate { .. } => false,
            Transform::Compose { parts } => parts.iter().all(Transform::is_exact),
        }
    }

    /// Rotation angle in radians, if the transform is a pure rotation.
    pub fn angle(&self) -> Option<f64> {
        match self {
            Transform::Identity => Some(0.0),
            Transform::Rot90 { k } => Some(f64::from(*k % 4) * FRAC_PI_2),
            Transform::Rotate { radians, .. } => Some(*radians),
            Transform::Reflect { .. } => None,
            Transform::Compose { parts } => parts.iter().map(Transform::angle).sum(),
        }
    }

    fn needs_square(&self) -> bool {
        match self {
            Transform::Rot90 { k } => k % 2 == 1,
            Transform::Rotate { .. } => true,
            Transform::Compose { parts } => parts.iter().any(Transform::needs_square),
            _ => false,
        }
    }

    /// Applies the transform to a rank-2 image.
    pub fn apply<T: Scalar>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        if img.rank() != 2 {
            return Err(Error::shape(format!(
                "transforms act on rank-2 images, got {:?}",
                img.shape()
            )));
        }
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let mut out = vec![T::zero(); h * w];
        self.apply_slice(img.data(), h, w, &mut out)?;
        Tensor::from_vec(&[h, w], out)
    }

    /// Slice form of [`Transform::apply`]: writes the transformed `h x w`
    /// image `src` into `dst`.
    pub fn apply_slice<T: Scalar>(&self, src: &[T], h: usize, w: usize, dst: &mut [T]) -> Result<()> {
        if src.len() != h * w || dst.len() != h * w {
            return Err(Error::shape(format!(
                "buffer lengths {} / {} for a {h}x{w} image",
                src.len(),
                dst.len()
            )));
        }
        if self.needs_square() && h != w {
            return Err(Error::shape(format!("rotation of a non-square {h}x{w} image")));
        }
        match self {
            Transform::Identity => dst.copy_from_slice(src),
            Transform::Rot90 { k } => rot90(src, h, *k % 4, dst),
            Transform::Reflect { axis } => {
                for r in 0..h {
                    for c in 0..w {
                        let (sr, sc) = match axis {
                            ReflectAxis::Horizontal => (r, w - 1 - c),
                            ReflectAxis::Vertical => (h - 1 - r, c),
                        };
                        dst[r * w + c] = src[sr * w + sc];
                    }
                }
            }
            Transform::Rotate { radians, fill } => rotate_bilinear(src, h, *radians, *fill, dst),
            Transform::Compose { parts } => {
                dst.copy_from_slice(src);
                let mut scratch = vec![T::zero(); h * w];
                for part in parts.iter().rev() {
                    part.apply_slice(dst, h, w, &mut scratch)?;
                    dst.copy_from_slice(&scratch);
                }
            }
        }
        Ok(())
    }
}

fn rot90<T: Scalar>(src: &[T], n: usize, k: u8, dst: &mut [T]) {
    for r in 0..n {
        for c in 0..n {
            let (sr, sc) = match k {
                0 => (r, c),
                1 => (n - 1 - c, r),
                2 => (n - 1 - r, n - 1 - c),
                _ => (c, n - 1 - r),
            };
            dst[r * n + c] = src[sr * n + sc];
        }
    }
}

fn rotate_bilinear<T: Scalar>(src: &[T], n: usize, radians: f64, fill: f64, dst: &mut [T]) {
    let center = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = radians.sin_cos();
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= n as isize || c >= n as isize {
            fill
        } else {
            src[r as usize * n + c as usize].as_f64()
        }
    };
    for r in 0..n {
        let y = r as f64 - center;
        for c in 0..n {
            let x = c as f64 - center;
            // inverse map of the forward rotation (x, y) -> (x cos - y sin, x sin + y cos)
            let sx = x * cos + y * sin + center;
            let sy = -x * sin + y * cos + center;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (c0, r0) = (x0 as isize, y0 as isize);
            let v = if fx == 0.0 && fy == 0.0 {
                at(r0, c0)
            } else {
                let top = at(r0, c0) * (1.0 - fx) + at(r0, c0 + 1) * fx;
                let bottom = at(r0 + 1, c0) * (1.0 - fx) + at(r0 + 1, c0 + 1) * fx;
                top * (1.0 - fy) + bottom * fy
            };
            dst[r * n + c] = T::from_f64_lossy(v);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationRange {
    /// Angles `2 pi k / n` for `k = 0..n`.
    Full,
    /// `n` angles spanning `[-pi/2, pi/2]`, endpoints included.
    Half,
}

/// Ordered, non-empty transformation set. Index order is part of a trained
/// model: argmax indices refer to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    transforms: Vec<Transform>,
}

impl TransformSet {
    pub fn new(transforms: Vec<Transform>) -> Result<Self> {
        if transforms.is_empty() {
            return Err(Error::invalid("transformation set must not be empty"));
        }
        Ok(Self { transforms })
    }

    pub fn identity() -> Self {
        Self {
            transforms: vec![Transform::Identity],
        }
    }

    /// `n` rotations over the chosen range. Angles that are whole quarter
    /// turns become exact [`Transform::Rot90`] permutations.
    pub fn rotations(n: usize, range: RotationRange) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("rotation count must be at least 1"));
        }
        let transforms = (0..n)
            .map(|k| {
                // quarter-turn count as the exact fraction num / den
                let (num, den) = match range {
                    RotationRange::Full => (4 * k as i64, n as i64),
                    RotationRange::Half if n == 1 => (0, 1),
                    RotationRange::Half => (2 * k as i64 - (n as i64 - 1), n as i64 - 1),
                };
                if num % den == 0 {
                    let q = (num / den).rem_euclid(4) as u8;
                    if q == 0 {
                        Transform::Identity
                    } else {
                        Transform::rot90(q)
                    }
                } else {
                    Transform::rotate(num as f64 / den as f64 * FRAC_PI_2)
                }
            })
            .collect();
        Self::new(transforms)
    }

    /// The cyclic group of the four exact quarter turns.
    pub fn quarter_turns() -> Self {
        Self::rotations(4, RotationRange::Full).expect("n > 0")
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, index: usize) -> Option<&Transform> {
        self.transforms.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transform> {
        self.transforms.iter()
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    /// Applies every transform to every image of `images: [N, H, W]` and
    /// stacks the results as `[N, |set|, 1, H, W]`; branch `i` of sample `n`
    /// is transform `i` applied to image `n`.
    pub fn stack<T: Scalar>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, h, w] = *images.shape() else {
            return Err(Error::shape(format!("expected [N, H, W] images, got {:?}", images.shape())));
        };
        let p = self.len();
        let mut out = vec![T::zero(); n * p * h * w];
        for (img, dst) in images.data().chunks_exact(h * w).zip(out.chunks_exact_mut(p * h * w)) {
            for (t, branch) in self.transforms.iter().zip(dst.chunks_exact_mut(h * w)) {
                t.apply_slice(img, h, w, branch)?;
            }
        }
        Tensor::from_vec(&[n, p, 1, h, w], out)
    }

    /// Checks the group axioms on a probe image: an identity element, closure
    /// of every ordered pair, and an inverse for every element. Two images
    /// match when their mean absolute difference over the inscribed disc is
    /// at most `tol` (the disc excludes corners that rotations push out of
    /// support). Associativity holds for composition and is not checked.
    pub fn is_group(&self, probe: &Tensor<f64>, tol: f64) -> bool {
        if probe.rank() != 2 || probe.shape()[0] != probe.shape()[1] || tol < 0.0 {
            return false;
        }
        let n = probe.shape()[0];
        let images: Option<Vec<Tensor<f64>>> =
            self.transforms.iter().map(|t| t.apply(probe).ok()).collect();
        let Some(images) = images else { return false };
        let close = |a: &Tensor<f64>, b: &Tensor<f64>| disc_mae(a.data(), b.data(), n) <= tol;

        if !images.iter().any(|img| close(img, probe)) {
            return false;
        }
        for outer in &self.transforms {
            for inner_img in &images {
                let Ok(composed) = outer.apply(inner_img) else { return false };
                if !images.iter().any(|img| close(img, &composed)) {
                    return false;
                }
            }
        }
        images.iter().all(|img| {
            self.transforms
                .iter()
                .any(|t| t.apply(img).map(|back| close(&back, probe)).unwrap_or(false))
        })
    }
}

/// Mean absolute difference over pixels inside the disc inscribed in an
/// `n x n` image.
pub fn disc_mae(a: &[f64], b: &[f64], n: usize) -> f64 {
    let center = (n as f64 - 1.0) / 2.0;
    let radius = n as f64 / 2.0;
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in 0..n {
        for c in 0..n {
            let (dy, dx) = (r as f64 - center, c as f64 - center);
            if dy * dy + dx * dx <= radius * radius {
                sum += (a[r * n + c] - b[r * n + c]).abs();
                count += 1;
            }
        }
    }
    sum / count.max(1) as f64
}

/// Wraps an angle into `[0, 2 pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    theta.rem_euclid(2.0 * PI)
}
