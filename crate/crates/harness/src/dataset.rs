//! Loading the configured train/test subsets and materializing them to disk.

use std::path::{Path, PathBuf};

use tipool::data::{self, LabeledImageSet};

use crate::config::{DataConfig, DataFormat};
use crate::error::{HarnessError, Result};
use crate::io::write_atomic;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
    /// Rotation applied to each test image, when the data was rotated here.
    pub test_angles: Option<Vec<f64>>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_raw(cfg: &DataConfig, base: &Path, images: &Path, labels: Option<&Path>) -> Result<LabeledImageSet> {
    let images = resolve(base, images);
    Ok(match cfg.format {
        DataFormat::Idx => {
            let labels = labels.ok_or_else(|| HarnessError::Config("idx data needs a labels file".into()))?;
            data::load_idx(images, resolve(base, labels))?
        }
        DataFormat::Amat => data::load_amat(images)?,
    })
}

fn split(set: &LabeledImageSet, s: crate::config::Split, what: &str) -> Result<LabeledImageSet> {
    if s.offset + s.count > set.len() {
        return Err(HarnessError::Config(format!(
            "{what} split {}..{} exceeds the {} available samples",
            s.offset,
            s.offset + s.count,
            set.len()
        )));
    }
    Ok(set.slice(s.offset, s.count)?)
}

/// The rotated (but unpadded) train/test subsets described by `cfg`.
pub fn load_unpadded(cfg: &DataConfig, base: &Path) -> Result<Dataset> {
    let raw = load_raw(cfg, base, &cfg.images, cfg.labels.as_deref())?;
    let raw = match cfg.rotate.range() {
        Some(range) => data::make_rotated_variant(&raw, range, cfg.rotate_seed)?,
        None => raw,
    };
    let mut train = split(&raw, cfg.train, "train")?;
    let angles = |n: usize, seed: u64| {
        cfg.rotate.range().map(|range| {
            let all = data::sample_angles(n, range, seed);
            all[cfg.test.offset..cfg.test.offset + cfg.test.count].to_vec()
        })
    };
    let (test, test_angles) = match &cfg.test_images {
        Some(images) => {
            let set = load_raw(cfg, base, images, cfg.test_labels.as_deref())?;
            // distinct stream so test angles are not a copy of the train angles
            let seed = cfg.rotate_seed.wrapping_add(1);
            let set = match cfg.rotate.range() {
                Some(range) => data::make_rotated_variant(&set, range, seed)?,
                None => set,
            };
            let test = split(&set, cfg.test, "test")?;
            (test, angles(set.len(), seed))
        }
        None => (split(&raw, cfg.test, "test")?, angles(raw.len(), cfg.rotate_seed)),
    };
    if cfg.balance {
        train = train.balanced(cfg.rotate_seed)?;
    }
    Ok(Dataset { train, test, test_angles })
}

pub fn load(cfg: &DataConfig, base: &Path) -> Result<Dataset> {
    let set = load_unpadded(cfg, base)?;
    if !cfg.pad {
        return Ok(set);
    }
    Ok(Dataset {
        train: data::pad_to_32(&set.train)?,
        test: data::pad_to_32(&set.test)?,
        test_angles: set.test_angles,
    })
}

/// Writes the configured subsets as IDX files plus a TOML provenance
/// sidecar each; returns the written image paths.
pub fn gen_data(cfg: &DataConfig, base: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let set = load_unpadded(cfg, base)?;
    let mut written = Vec::new();
    for (name, part) in [("train", &set.train), ("test", &set.test)] {
        let images = out.join(format!("{name}-images-idx3-ubyte"));
        let labels = out.join(format!("{name}-labels-idx1-ubyte"));
        std::fs::create_dir_all(out)?;
        data::write_idx(part, &images, &labels)?;
        let mut provenance = part.provenance.clone();
        if provenance.source.is_empty() {
            provenance.source = cfg.images.display().to_string();
        }
        let sidecar = toml::to_string(&provenance)?;
        write_atomic(&out.join(format!("{name}.provenance.toml")), sidecar.as_bytes())?;
        written.push(images);
    }
    Ok(written)
}
