//! Fixed class colours for label-map previews.
//!
//! | class | colour | RGB |
//! |------:|--------|-----|
//! | 0 | white (background) | 255 255 255 |
//! | 1 | red | 230 25 75 |
//! | 2 | green | 60 180 75 |
//! | 3 | blue | 0 130 200 |
//! | 4 | orange | 245 130 48 |
//! | 5 | purple | 145 30 180 |
//! | 6 | cyan | 70 240 240 |
//! | 7 | magenta | 240 50 230 |
//! | 8 | lime | 210 245 60 |
//! | 9 | brown | 170 110 40 |
//! | 10 | navy | 0 0 128 |
//! | 11 | teal | 0 128 128 |
//! | 12 | maroon | 128 0 0 |
//! | 13 | olive | 128 128 0 |
//! | 14 | grey | 128 128 128 |
//! | 15 | black | 0 0 0 |
//!
//! Labels from 16 up reuse the table cyclically (`label % 16`).

use anyhow::Context;
use sketchparse::raster::GrayImage;

pub const COLORS: [[u8; 3]; 16] = [
    [255, 255, 255],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [170, 110, 40],
    [0, 0, 128],
    [0, 128, 128],
    [128, 0, 0],
    [128, 128, 0],
    [128, 128, 128],
    [0, 0, 0],
];

pub fn color(label: u8) -> [u8; 3] {
    COLORS[label as usize % COLORS.len()]
}

/// 8-bit indexed PNG whose palette entry `i` is `color(i)`; pixel indices are
/// the raw labels.
pub fn encode(labels: &GrayImage) -> anyhow::Result<Vec<u8>> {
    let palette: Vec<u8> = (0..=255u8).flat_map(color).collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, labels.width() as u32, labels.height() as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette);
        let mut w = enc.write_header().context("png header")?;
        w.write_image_data(labels.data()).context("png data")?;
    }
    Ok(out)
}
