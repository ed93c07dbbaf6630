//! Homogeneous transformation: maps any stroke image to a canonical form in
//! which every stroke is one pixel thick.
//!
//! The pipeline is threshold -> thinning -> redraw. Thinning is Guo–Hall
//! (two sub-iterations over the 8-neighbourhood) run to a fixpoint, followed
//! by a sequential pass that removes topology-simple pixels from any 2×2
//! foreground block the parallel rule leaves behind, and a last pass that
//! detours around blocks whose four pixels are all needed. Pixels outside the
//! image count as background. The result is deterministic but is not
//! pixel-identical to other morphological skeleton implementations; no spur
//! pruning is done.

use crate::raster::{BinaryImage, GrayImage, BLACK, WHITE};

pub const DEFAULT_THRESHOLD: u8 = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HtConfig {
    /// Pixels strictly darker than this are strokes.
    pub threshold: u8,
}

impl Default for HtConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD }
    }
}

pub fn binarize(img: &GrayImage, cfg: HtConfig) -> BinaryImage {
    let data = img.data().iter().map(|&v| v < cfg.threshold).collect();
    BinaryImage::new(img.width(), img.height(), data).expect("dimensions come from a valid image")
}

/// Neighbours clockwise from north: `[N, NE, E, SE, S, SW, W, NW]`.
#[inline]
fn ring(mask: &BinaryImage, x: usize, y: usize) -> [bool; 8] {
    let (x, y) = (x as isize, y as isize);
    [
        mask.get_or_false(x, y - 1),
        mask.get_or_false(x + 1, y - 1),
        mask.get_or_false(x + 1, y),
        mask.get_or_false(x + 1, y + 1),
        mask.get_or_false(x, y + 1),
        mask.get_or_false(x - 1, y + 1),
        mask.get_or_false(x - 1, y),
        mask.get_or_false(x - 1, y - 1),
    ]
}

fn guo_hall_deletable(n: [bool; 8], second: bool) -> bool {
    let [p2, p3, p4, p5, p6, p7, p8, p9] = n.map(u8::from);
    let c = ((p2 ^ 1) & (p3 | p4)) + ((p4 ^ 1) & (p5 | p6)) + ((p6 ^ 1) & (p7 | p8)) + ((p8 ^ 1) & (p9 | p2));
    let n1 = (p9 | p2) + (p3 | p4) + (p5 | p6) + (p7 | p8);
    let n2 = (p2 | p3) + (p4 | p5) + (p6 | p7) + (p8 | p9);
    let nn = n1.min(n2);
    let m = if second { (p2 | p3 | (p5 ^ 1)) & p4 } else { (p6 | p7 | (p9 ^ 1)) & p8 };
    c == 1 && (2..=3).contains(&nn) && m == 0
}

/// One parallel sub-iteration; returns the number of deleted pixels.
fn guo_hall_pass(mask: &mut BinaryImage, second: bool, marks: &mut Vec<(usize, usize)>) -> usize {
    marks.clear();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) && guo_hall_deletable(ring(mask, x, y), second) {
                marks.push((x, y));
            }
        }
    }
    for &(x, y) in marks.iter() {
        mask.set(x, y, false);
    }
    marks.len()
}

/// Yokoi 8-connectivity number; a foreground pixel whose value is 1 can be
/// removed without changing the 8-connected topology.
fn connectivity_number(n: [bool; 8]) -> u8 {
    // Counter-clockwise from east, complemented.
    let [north, ne, east, se, south, sw, west, nw] = n;
    let ccw = [east, ne, north, nw, west, sw, south, se];
    let bg = ccw.map(|v| u8::from(!v));
    (0..4)
        .map(|k| {
            let i = 2 * k;
            bg[i] - bg[i] * bg[(i + 1) % 8] * bg[(i + 2) % 8]
        })
        .sum()
}

/// Removes simple pixels from remaining 2×2 blocks in raster order.
fn break_blocks(mask: &mut BinaryImage) -> usize {
    let (w, h) = (mask.width(), mask.height());
    let mut removed = 0;
    if w < 2 || h < 2 {
        return 0;
    }
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let corners = [(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)];
            if !corners.iter().all(|&(cx, cy)| mask.get(cx, cy)) {
                continue;
            }
            if let Some(&(cx, cy)) = corners.iter().find(|&&(cx, cy)| connectivity_number(ring(mask, cx, cy)) == 1) {
                mask.set(cx, cy, false);
                removed += 1;
            }
        }
    }
    removed
}

fn is_block(mask: &BinaryImage, x: usize, y: usize) -> bool {
    x + 1 < mask.width()
        && y + 1 < mask.height()
        && mask.get(x, y)
        && mask.get(x + 1, y)
        && mask.get(x, y + 1)
        && mask.get(x + 1, y + 1)
}

/// Whether any 2×2 block contains `(x, y)`.
fn in_block(mask: &BinaryImage, x: usize, y: usize) -> bool {
    (y.saturating_sub(1)..=y).any(|by| (x.saturating_sub(1)..=x).any(|bx| is_block(mask, bx, by)))
}

/// Breaks blocks in which no corner is simple, such as two diagonal strokes
/// crossing between pixel centres. A corner is moved onto a neighbouring
/// pixel of `original`: the neighbour is added when that is a simple change,
/// then the corner is removed if it has become simple. The swap is undone
/// when it would leave any 2×2 block around the new pixel.
fn reroute_blocks(mask: &mut BinaryImage, original: &BinaryImage) -> usize {
    let (w, h) = (mask.width(), mask.height());
    let mut moved = 0;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            if !is_block(mask, x, y) {
                continue;
            }
            'corners: for (cx, cy) in [(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)] {
                for (dx, dy) in [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)] {
                    let (qx, qy) = (cx as isize + dx, cy as isize + dy);
                    if !original.get_or_false(qx, qy) || mask.get_or_false(qx, qy) {
                        continue;
                    }
                    let (qx, qy) = (qx as usize, qy as usize);
                    if connectivity_number(ring(mask, qx, qy)) != 1 {
                        continue;
                    }
                    mask.set(qx, qy, true);
                    if connectivity_number(ring(mask, cx, cy)) == 1 {
                        mask.set(cx, cy, false);
                        if !in_block(mask, qx, qy) && !is_block(mask, x, y) {
                            moved += 1;
                            break 'corners;
                        }
                        mask.set(cx, cy, true);
                    }
                    mask.set(qx, qy, false);
                }
            }
        }
    }
    moved
}

/// Upper bound on thin/reroute rounds; each round needs a successful swap.
const MAX_ROUNDS: usize = 64;

/// Thins a binary mask to its 1-pixel centerline.
///
/// The result is a subset of `mask` with the same number of 8-connected
/// components. A 2×2 block survives only where every pixel in it is needed
/// for connectivity and the mask offers no detour (e.g. an X of 1-pixel
/// diagonals crossing at a square).
pub fn skeletonize(mask: &BinaryImage) -> BinaryImage {
    let mut out = mask.clone();
    let mut marks = Vec::new();
    for _ in 0..MAX_ROUNDS {
        loop {
            loop {
                let a = guo_hall_pass(&mut out, false, &mut marks);
                let b = guo_hall_pass(&mut out, true, &mut marks);
                if a + b == 0 {
                    break;
                }
            }
            if break_blocks(&mut out) == 0 {
                break;
            }
        }
        if reroute_blocks(&mut out, mask) == 0 {
            break;
        }
    }
    out
}

pub fn homogeneous_transform(img: &GrayImage, cfg: HtConfig) -> GrayImage {
    let skeleton = skeletonize(&binarize(img, cfg));
    let data = skeleton.data().iter().map(|&s| if s { BLACK } else { WHITE }).collect();
    GrayImage::new(img.width(), img.height(), data).expect("same dimensions as input")
}
