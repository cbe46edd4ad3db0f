//! Canonical-instance export: for a feature, the transformed copy of an
//! image on which it fires most strongly.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tipool::data::LabeledImageSet;
use tipool::network::ti_pool_forward;
use tipool::{Network32, Tensor32};

use crate::checkpoint::Checkpoint;
use crate::error::{HarnessError, Result};
use crate::io::write_atomic;
use crate::train::network_from_checkpoint;

pub const CANONICAL_HEADER: &str = "image_id,feature_id,transform_index,angle_deg";

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalRow {
    pub image_id: usize,
    pub feature_id: usize,
    pub transform_index: usize,
    /// Rotation angle in degrees; `None` for non-rotations.
    pub angle_deg: Option<f64>,
}

/// Binary (P5) 8-bit PGM with values in [0, 1] mapped to 0..=255.
pub fn pgm_bytes(image: &Tensor32) -> Result<Vec<u8>> {
    let &[h, w] = image.shape() else {
        return Err(HarnessError::Config(format!("pgm needs a 2-d image, got {:?}", image.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// `sqrt(-2 ln R)` with `R` the mean resultant length; radians in and out.
pub fn circular_std(angles: &[f64]) -> f64 {
    let n = angles.len() as f64;
    let (s, c) = angles.iter().fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    let r = ((s / n).powi(2) + (c / n).powi(2)).sqrt().min(1.0);
    (-2.0 * r.ln()).sqrt()
}

fn image(set: &LabeledImageSet, id: usize) -> Result<Tensor32> {
    if id >= set.len() {
        return Err(HarnessError::Config(format!("image id {id} out of range ({} images)", set.len())));
    }
    let (h, w) = set.image_size();
    Ok(Tensor32::from_vec(&[h, w], set.image(id).to_vec())?)
}

/// Canonical rows for each image and feature, with the canonical images.
pub fn canonical_instances(
    net: &mut Network32,
    set: &LabeledImageSet,
    image_ids: &[usize],
    feature_ids: &[usize],
) -> Result<Vec<(CanonicalRow, Tensor32)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::new();
    for &id in image_ids {
        let img = image(set, id)?;
        for c in net.canonical_instances(&img, feature_ids, &mut rng)? {
            let t = net.transforms().get(c.transform_index).expect("index below |Phi|");
            out.push((
                CanonicalRow {
                    image_id: id,
                    feature_id: c.feature,
                    transform_index: c.transform_index,
                    angle_deg: t.angle().map(f64::to_degrees),
                },
                c.image,
            ));
        }
    }
    Ok(out)
}

/// The feature with the largest mean pooled activation over `image_ids`.
pub fn most_active_feature(net: &mut Network32, set: &LabeledImageSet, image_ids: &[usize]) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sub = set.select(image_ids)?;
    let mode = net.mode();
    net.set_mode(tipool::Mode::Eval);
    let features = net.features(&net.transforms().clone().stack(&sub.images)?, &mut rng);
    net.set_mode(mode);
    let (g, _) = ti_pool_forward(&features?)?;
    let k = g.shape()[1];
    let mut totals = vec![0.0f64; k];
    for row in g.data().chunks(k) {
        for (t, &v) in totals.iter_mut().zip(row) {
            *t += f64::from(v);
        }
    }
    Ok((0..k).fold(0, |best, i| if totals[i] > totals[best] { i } else { best }))
}

/// Circular spread (radians) of the orientation `feature` brings each image
/// to. `offsets[i]` is the rotation already applied to image `i`, so that
/// orientations are measured relative to the unrotated originals. The
/// network's transforms must all be rotations.
pub fn angle_spread(
    net: &mut Network32,
    set: &LabeledImageSet,
    image_ids: &[usize],
    feature: usize,
    offsets: Option<&[f64]>,
) -> Result<f64> {
    let rows = canonical_instances(net, set, image_ids, &[feature])?;
    let angles = rows
        .iter()
        .map(|(r, _)| {
            let offset = offsets.map_or(0.0, |o| o[r.image_id]);
            r.angle_deg.map(|a| a.to_radians() + offset)
        })
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| HarnessError::Config("transform set contains non-rotations".into()))?;
    Ok(circular_std(&angles))
}

/// Writes `img<id>.pgm`, `img<id>_f<k>.pgm` and `canonical.csv` to `out`.
pub fn cmd_canonical(
    ck: &Checkpoint,
    set: &LabeledImageSet,
    image_ids: &[usize],
    feature_ids: &[usize],
    out: &Path,
) -> Result<Vec<CanonicalRow>> {
    let mut net = network_from_checkpoint(ck)?;
    let rows = canonical_instances(&mut net, set, image_ids, feature_ids)?;
    for &id in image_ids {
        write_atomic(&out.join(format!("img{id}.pgm")), &pgm_bytes(&image(set, id)?)?)?;
    }
    let mut csv = format!("{CANONICAL_HEADER}\n");
    for (r, img) in &rows {
        write_atomic(&out.join(format!("img{}_f{}.pgm", r.image_id, r.feature_id)), &pgm_bytes(img)?)?;
        let angle = r.angle_deg.map(|a| format!("{a:.4}")).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{},{angle}", r.image_id, r.feature_id, r.transform_index);
    }
    write_atomic(&out.join("canonical.csv"), csv.as_bytes())?;
    Ok(rows.into_iter().map(|(r, _)| r).collect())
}
