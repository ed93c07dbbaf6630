//! Geometric augmentation of image/label pairs: rotation, horizontal
//! mirroring and random erasing.
//!
//! Rotation maps each destination pixel back to its source with nearest
//! neighbour sampling, about the center `((w-1)/2, (h-1)/2)`. Positive angles
//! turn the content counter-clockwise as displayed (y axis pointing down).
//! Pixels whose source falls outside the canvas become white / background.
//! Erasing whitens a square window of the image and leaves the labels alone.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{Dataset, DatasetItem, GrayImage, LabelMap, BACKGROUND, WHITE};
use crate::seed::item_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Rotation angles in degrees.
    pub angles: Vec<f64>,
    pub mirror: bool,
    pub erase_size: usize,
    /// Erased copies appended per rotation/mirror variant.
    pub erase_count: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            angles: vec![-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0],
            mirror: true,
            erase_size: 31,
            erase_count: 1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.angles.is_empty() {
            return Err(Error::InvalidArgument("angle list is empty".into()));
        }
        if self.angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("rotation angle"));
        }
        if self.erase_count > 0 && self.erase_size == 0 {
            return Err(Error::InvalidArgument("erase size must be positive".into()));
        }
        Ok(())
    }

    /// Rotation/mirror variants produced per source item.
    pub fn variants_per_item(&self) -> usize {
        self.angles.len() * if self.mirror { 2 } else { 1 }
    }

    pub fn outputs_per_item(&self) -> usize {
        self.variants_per_item() * (1 + self.erase_count)
    }
}

fn check_pair(img: &GrayImage, labels: &LabelMap) -> Result<()> {
    if labels.same_shape(img) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "image {}x{} vs labels {}x{}",
            img.width(),
            img.height(),
            labels.width(),
            labels.height()
        )))
    }
}

/// Source coordinate for destination `(x, y)` under rotation by `degrees`,
/// or `None` when it falls outside the canvas.
pub fn rotation_source(x: usize, y: usize, width: usize, height: usize, degrees: f64) -> Option<(usize, usize)> {
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let dx = x as f64 - cx;
    let dy = y as f64 - cy;
    let sx = (cx + dx * c - dy * s).round();
    let sy = (cy + dx * s + dy * c).round();
    if sx < 0.0 || sy < 0.0 || sx >= width as f64 || sy >= height as f64 {
        None
    } else {
        Some((sx as usize, sy as usize))
    }
}

pub fn rotate_pair(img: &GrayImage, labels: &LabelMap, degrees: f64) -> Result<(GrayImage, LabelMap)> {
    check_pair(img, labels)?;
    if degrees == 0.0 {
        return Ok((img.clone(), labels.clone()));
    }
    let (w, h) = (img.width(), img.height());
    let mut out_img = vec![WHITE; w * h];
    let mut out_lab = vec![BACKGROUND; w * h];
    for y in 0..h {
        for x in 0..w {
            if let Some((sx, sy)) = rotation_source(x, y, w, h, degrees) {
                out_img[y * w + x] = img.get(sx, sy);
                out_lab[y * w + x] = labels.get(sx, sy);
            }
        }
    }
    Ok((GrayImage::new(w, h, out_img)?, LabelMap::new(w, h, labels.classes(), out_lab)?))
}

pub fn mirror_pair(img: &GrayImage, labels: &LabelMap) -> Result<(GrayImage, LabelMap)> {
    check_pair(img, labels)?;
    let w = img.width();
    let flip = |data: &[u8]| -> Vec<u8> { data.chunks_exact(w).flat_map(|row| row.iter().rev().copied()).collect() };
    Ok((
        GrayImage::new(w, img.height(), flip(img.data()))?,
        LabelMap::new(w, img.height(), labels.classes(), flip(labels.data()))?,
    ))
}

/// Whitens one uniformly placed `erase_size`² window. Labels are returned
/// unchanged.
pub fn erase_pair<R: Rng + ?Sized>(
    img: &GrayImage,
    labels: &LabelMap,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(GrayImage, LabelMap)> {
    check_pair(img, labels)?;
    let size = cfg.erase_size;
    let (w, h) = (img.width(), img.height());
    if size == 0 || size > w || size > h {
        return Err(Error::InvalidArgument(format!("erase size {size} does not fit a {w}x{h} image")));
    }
    let x0 = rng.gen_range(0..=w - size);
    let y0 = rng.gen_range(0..=h - size);
    let mut out = img.clone();
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            out.set(x, y, WHITE);
        }
    }
    Ok((out, labels.clone()))
}

fn expand_item(item: &DatasetItem, index: usize, cfg: &AugmentConfig) -> Result<Vec<DatasetItem>> {
    let mut rng = item_rng(cfg.seed, index as u64);
    let mut bases = Vec::with_capacity(cfg.variants_per_item());
    let mirrored = if cfg.mirror { Some(mirror_pair(&item.image, &item.labels)?) } else { None };
    for &angle in &cfg.angles {
        bases.push(rotate_pair(&item.image, &item.labels, angle)?);
        if let Some((mi, ml)) = &mirrored {
            bases.push(rotate_pair(mi, ml, angle)?);
        }
    }
    let mut out = Vec::with_capacity(cfg.outputs_per_item());
    let wrap = |(image, labels): (GrayImage, LabelMap)| DatasetItem {
        image,
        labels,
        category: item.category.clone(),
        super_category: item.super_category.clone(),
    };
    let mut erased = Vec::with_capacity(bases.len() * cfg.erase_count);
    for (img, lab) in &bases {
        for _ in 0..cfg.erase_count {
            erased.push(wrap(erase_pair(img, lab, cfg, &mut rng)?));
        }
    }
    out.extend(bases.into_iter().map(wrap));
    out.extend(erased);
    Ok(out)
}

/// Expands every item into its rotation/mirror variants followed by their
/// erased copies. Each item draws from its own seeded stream, so the result
/// does not depend on the thread count.
pub fn expand(dataset: &Dataset, cfg: &AugmentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let per_item: Vec<Vec<DatasetItem>> =
        dataset.items().par_iter().enumerate().map(|(i, item)| expand_item(item, i, cfg)).collect::<Result<_>>()?;
    Dataset::new(per_item.into_iter().flatten().collect(), dataset.class_names.clone())
}
