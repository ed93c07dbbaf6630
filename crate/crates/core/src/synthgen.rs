//! Procedural stick-figure sketches with per-pixel part labels.
//!
//! Each category is a template of polylines and ellipse outlines in a
//! 64-unit model frame, jittered per image (shift, scale, rotation, vertex
//! noise) and rendered as black strokes on white. Parts are drawn in a fixed
//! order and a later part overwrites an earlier one, so every stroke pixel has
//! exactly one label and every white pixel is background.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::homotrans::{homogeneous_transform, HtConfig};
use crate::metrics::RetrievalRun;
use crate::raster::{Dataset, DatasetItem, GrayImage, LabelMap, BLACK};
use crate::seed::{item_rng, mix64};

/// Global part classes shared by every template.
pub const CLASS_NAMES: [&str; 10] =
    ["background", "head", "torso", "leg", "tail", "wing", "body", "wheel", "window", "handlebar"];
pub const HEAD: u8 = 1;
pub const TORSO: u8 = 2;
pub const LEG: u8 = 3;
pub const TAIL: u8 = 4;
pub const WING: u8 = 5;
pub const BODY: u8 = 6;
pub const WHEEL: u8 = 7;
pub const WINDOW: u8 = 8;
pub const HANDLEBAR: u8 = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Quadruped,
    Bird,
    Car,
    Bicycle,
}

impl Shape {
    /// Part classes the template draws, background included.
    pub fn classes(self) -> Vec<u8> {
        match self {
            Shape::Quadruped => vec![0, HEAD, TORSO, LEG, TAIL],
            Shape::Bird => vec![0, HEAD, TORSO, TAIL, WING],
            Shape::Car => vec![0, BODY, WHEEL, WINDOW],
            Shape::Bicycle => vec![0, BODY, WHEEL, HANDLEBAR],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryTemplate {
    pub name: String,
    pub super_category: String,
    pub shape: Shape,
}

/// Per-image perturbation ranges, in model units (64 per canvas side) and degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub shift: f64,
    pub scale: f64,
    pub rotate_deg: f64,
    pub vertex: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self { shift: 3.0, scale: 0.08, rotate_deg: 6.0, vertex: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub categories: Vec<CategoryTemplate>,
    pub images_per_category: usize,
    pub canvas: usize,
    pub stroke_thickness: f64,
    pub jitter: Jitter,
    /// Length multiplier for the small parts (tails, windows, handlebars).
    /// At 1 a quadruped torso has well over ten times the pixels of its tail.
    pub minority_scale: f64,
    pub seed: u64,
}

pub fn default_categories() -> Vec<CategoryTemplate> {
    let t = |name: &str, sup: &str, shape| CategoryTemplate { name: name.into(), super_category: sup.into(), shape };
    vec![
        t("quadruped", "animal", Shape::Quadruped),
        t("bird", "animal", Shape::Bird),
        t("car", "vehicle", Shape::Car),
        t("bicycle", "vehicle", Shape::Bicycle),
    ]
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            categories: default_categories(),
            images_per_category: 200,
            canvas: 64,
            stroke_thickness: 3.0,
            jitter: Jitter::default(),
            minority_scale: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.canvas < 16 {
            return bad("canvas must be at least 16 pixels");
        }
        if !(self.stroke_thickness >= 1.0 && self.stroke_thickness.is_finite()) {
            return bad("stroke thickness must be at least 1");
        }
        if !(self.minority_scale > 0.0 && self.minority_scale.is_finite()) {
            return bad("minority scale must be positive");
        }
        let j = self.jitter;
        if [j.shift, j.scale, j.rotate_deg, j.vertex].iter().any(|v| !(v.is_finite() && *v >= 0.0)) || j.scale >= 1.0 {
            return bad("jitter ranges must be non-negative, scale below 1");
        }
        for (i, c) in self.categories.iter().enumerate() {
            if self.categories[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::InvalidArgument(format!("duplicate category {}", c.name)));
            }
        }
        Ok(())
    }
}

/// Model-to-pixel mapping for one image.
struct Frame {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    unit: f64,
}

impl Frame {
    fn map(&self, (u, v): (f64, f64)) -> (f64, f64) {
        (self.cx + self.unit * (u * self.cos - v * self.sin), self.cy + self.unit * (u * self.sin + v * self.cos))
    }
}

struct Painter<'a> {
    frame: Frame,
    rng: &'a mut ChaCha8Rng,
    vertex: f64,
    radius: f64,
    img: GrayImage,
    labels: LabelMap,
}

impl Painter<'_> {
    fn nudge(&mut self, (u, v): (f64, f64)) -> (f64, f64) {
        if self.vertex == 0.0 {
            return (u, v);
        }
        let a = self.rng.gen_range(-self.vertex..=self.vertex);
        let b = self.rng.gen_range(-self.vertex..=self.vertex);
        (u + a, v + b)
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), class: u8) -> Result<()> {
        let r = self.radius;
        let (w, h) = (self.img.width() as f64, self.img.height() as f64);
        let (x0, x1) = (a.0.min(b.0) - r, a.0.max(b.0) + r);
        let (y0, y1) = (a.1.min(b.1) - r, a.1.max(b.1) + r);
        if x0 < -0.5 || y0 < -0.5 || x1 > w - 0.5 || y1 > h - 0.5 {
            return Err(Error::InvalidArgument(format!(
                "template stroke ({:.1},{:.1})-({:.1},{:.1}) leaves the {}x{} canvas",
                a.0,
                a.1,
                b.0,
                b.1,
                self.img.width(),
                self.img.height()
            )));
        }
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        for y in y0.ceil().max(0.0) as usize..=(y1.floor() as usize).min(self.img.height() - 1) {
            for x in x0.ceil().max(0.0) as usize..=(x1.floor() as usize).min(self.img.width() - 1) {
                let (px, py) = (x as f64 - a.0, y as f64 - a.1);
                let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (ex, ey) = (px - t * dx, py - t * dy);
                if ex * ex + ey * ey <= r * r {
                    self.img.set(x, y, BLACK);
                    self.labels.set(x, y, class);
                }
            }
        }
        Ok(())
    }

    /// Polyline through jittered model points.
    fn polyline(&mut self, pts: &[(f64, f64)], class: u8) -> Result<()> {
        let mapped: Vec<(f64, f64)> = pts
            .iter()
            .map(|&p| {
                let q = self.nudge(p);
                self.frame.map(q)
            })
            .collect();
        if mapped.len() == 1 {
            return self.segment(mapped[0], mapped[0], class);
        }
        for w in mapped.windows(2) {
            self.segment(w[0], w[1], class)?;
        }
        Ok(())
    }

    /// Ellipse outline; only the centre is jittered.
    fn ellipse(&mut self, c: (f64, f64), rx: f64, ry: f64, class: u8) -> Result<()> {
        let c = self.nudge(c);
        let n = 28;
        let pts: Vec<(f64, f64)> = (0..=n)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / n as f64;
                self.frame.map((c.0 + rx * t.cos(), c.1 + ry * t.sin()))
            })
            .collect();
        for w in pts.windows(2) {
            self.segment(w[0], w[1], class)?;
        }
        Ok(())
    }
}

fn draw(shape: Shape, p: &mut Painter, small: f64) -> Result<()> {
    match shape {
        Shape::Quadruped => {
            p.ellipse((0.0, 0.0), 15.0, 8.0, TORSO)?;
            for x in [-10.0, -5.0, 5.0, 10.0] {
                p.polyline(&[(x, 7.0), (x, 18.0)], LEG)?;
            }
            p.polyline(&[(-12.0, -4.0), (-16.0, -8.0)], HEAD)?;
            p.ellipse((-19.0, -10.0), 4.5, 4.0, HEAD)?;
            p.polyline(&[(17.0, -3.0), (17.0 + small, -3.0 - small)], TAIL)?;
        }
        Shape::Bird => {
            p.ellipse((0.0, 0.0), 11.0, 7.0, TORSO)?;
            p.polyline(&[(-3.0, 6.0), (-8.0, 17.0)], WING)?;
            p.polyline(&[(4.0, 6.0), (9.0, 17.0)], WING)?;
            p.ellipse((-14.0, -9.0), 4.5, 4.0, HEAD)?;
            p.polyline(&[(-18.5, -9.0), (-22.0, -8.0)], HEAD)?;
            p.polyline(&[(12.0, -1.0), (12.0 + 4.0 * small, -4.0 * small)], TAIL)?;
            p.polyline(&[(12.0, 1.0), (12.0 + 4.0 * small, 1.0 + 2.0 * small)], TAIL)?;
        }
        Shape::Car => {
            p.polyline(&[(-20.0, -2.0), (20.0, -2.0), (20.0, 7.0), (-20.0, 7.0), (-20.0, -2.0)], BODY)?;
            p.polyline(&[(-10.0, -2.0), (-6.0, -11.0), (8.0, -11.0), (12.0, -2.0)], BODY)?;
            p.polyline(&[(-2.0 * small, -6.0), (2.0 * small, -6.0)], WINDOW)?;
            p.ellipse((-12.0, 10.0), 4.5, 4.5, WHEEL)?;
            p.ellipse((12.0, 10.0), 4.5, 4.5, WHEEL)?;
        }
        Shape::Bicycle => {
            p.ellipse((-13.0, 6.0), 7.5, 7.5, WHEEL)?;
            p.ellipse((13.0, 6.0), 7.5, 7.5, WHEEL)?;
            p.polyline(&[(-13.0, 6.0), (-1.0, 6.0), (7.0, -6.0), (-5.0, -6.0), (-13.0, 6.0)], BODY)?;
            p.polyline(&[(-1.0, 6.0), (-5.0, -6.0), (-6.0, -10.0)], BODY)?;
            p.polyline(&[(7.0, -6.0), (9.0, -10.0), (9.0 + 4.0 * small, -10.0)], HANDLEBAR)?;
        }
    }
    Ok(())
}

/// Renders one image of `template` with the given RNG stream.
pub fn render(spec: &SynthSpec, template: &CategoryTemplate, rng: &mut ChaCha8Rng) -> Result<DatasetItem> {
    let n = spec.canvas;
    let unit = n as f64 / 64.0 * 0.9;
    let j = spec.jitter;
    let mid = (n as f64 - 1.0) / 2.0;
    let shift = |rng: &mut ChaCha8Rng| if j.shift > 0.0 { rng.gen_range(-j.shift..=j.shift) } else { 0.0 };
    let cx = mid + shift(rng) * n as f64 / 64.0;
    let cy = mid + shift(rng) * n as f64 / 64.0;
    let scale = if j.scale > 0.0 { rng.gen_range(1.0 - j.scale..=1.0 + j.scale) } else { 1.0 };
    let theta = if j.rotate_deg > 0.0 { rng.gen_range(-j.rotate_deg..=j.rotate_deg) } else { 0.0 }.to_radians();
    let mut p = Painter {
        frame: Frame { cx, cy, cos: theta.cos(), sin: theta.sin(), unit: unit * scale },
        rng,
        vertex: j.vertex,
        radius: spec.stroke_thickness / 2.0,
        img: GrayImage::blank(n, n)?,
        labels: LabelMap::background(n, n, CLASS_NAMES.len())?,
    };
    draw(template.shape, &mut p, spec.minority_scale)?;
    Ok(DatasetItem {
        image: p.img,
        labels: p.labels,
        category: template.name.clone(),
        super_category: template.super_category.clone(),
    })
}

/// Held-out split: same templates and jitter, `per_category` items drawn
/// under a seed derived from (and distinct from) `spec.seed`.
pub fn test_split(spec: &SynthSpec, per_category: usize) -> SynthSpec {
    SynthSpec { images_per_category: per_category, seed: mix64(spec.seed ^ TEST_SEED_TAG), ..spec.clone() }
}

const TEST_SEED_TAG: u64 = 0x7465_7374;

/// Category-major corpus; item `k` draws from stream `k` of `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let per = spec.images_per_category;
    let items = (0..spec.categories.len() * per)
        .into_par_iter()
        .map(|k| render(spec, &spec.categories[k / per], &mut item_rng(spec.seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(items, CLASS_NAMES.iter().map(|s| s.to_string()).collect())
}

/// Grows every stroke by one pixel in the 4-neighbourhood.
pub fn thicken(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let ink = |xx: usize, yy: usize| img.get(xx, yy) != 255;
            if ink(x, y)
                || (x > 0 && ink(x - 1, y))
                || (x + 1 < w && ink(x + 1, y))
                || (y > 0 && ink(x, y - 1))
                || (y + 1 < h && ink(x, y + 1))
            {
                out.set(x, y, BLACK);
            }
        }
    }
    out
}

/// Query sketches, their thickened gallery partners and the ranking of the
/// gallery for each query.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalFixture {
    pub queries: Vec<GrayImage>,
    pub gallery: Vec<GrayImage>,
    pub run: RetrievalRun,
}

/// Pixel disagreement between two equally sized images.
fn hamming(a: &GrayImage, b: &GrayImage) -> usize {
    a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count()
}

/// Ranks gallery items for each query by ascending distance, ties by index.
pub fn rank_by_distance(
    queries: &[GrayImage],
    gallery: &[GrayImage],
    dist: impl Fn(&GrayImage, &GrayImage) -> usize + Sync,
) -> Vec<Vec<usize>> {
    queries
        .par_iter()
        .map(|q| {
            let mut order: Vec<(usize, usize)> = gallery.iter().enumerate().map(|(i, g)| (dist(q, g), i)).collect();
            order.sort_unstable();
            order.into_iter().map(|(_, i)| i).collect()
        })
        .collect()
}

/// Pairs each generated sketch with a thickened copy and ranks the gallery by
/// pixel disagreement after homogeneous transformation of both sides.
pub fn generate_retrieval(spec: &SynthSpec) -> Result<RetrievalFixture> {
    let data = generate(spec)?;
    let queries: Vec<GrayImage> = data.items().iter().map(|it| it.image.clone()).collect();
    let gallery: Vec<GrayImage> = queries.par_iter().map(thicken).collect();
    let ht = |v: &[GrayImage]| -> Vec<GrayImage> {
        v.par_iter().map(|i| homogeneous_transform(i, HtConfig::default())).collect()
    };
    let (tq, tg) = (ht(&queries), ht(&gallery));
    let rankings = rank_by_distance(&tq, &tg, hamming);
    let truth = (0..queries.len()).collect();
    Ok(RetrievalFixture { queries, gallery, run: RetrievalRun::new(rankings, truth)? })
}

/// Every query paired with an identical gallery item.
pub fn exact_match_run(images: &[GrayImage]) -> Result<RetrievalRun> {
    let rankings = rank_by_distance(images, images, hamming);
    RetrievalRun::new(rankings, (0..images.len()).collect())
}

/// `n` queries over `n ≥ 2` candidates with the truth always ranked second.
pub fn second_place_run(n: usize) -> Result<RetrievalRun> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two candidates".into()));
    }
    let rankings = (0..n)
        .map(|q| {
            let decoy = (q + 1) % n;
            let mut r = vec![decoy, q];
            r.extend((0..n).filter(|&c| c != q && c != decoy));
            r
        })
        .collect();
    RetrievalRun::new(rankings, (0..n).collect())
}
