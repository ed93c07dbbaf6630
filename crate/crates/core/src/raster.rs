//! Raster containers shared by every stage of the pipeline, plus bit-exact
//! PGM (P5) / 8-bit grayscale PNG codecs and the tab-separated dataset
//! manifest.
//!
//! Intensities follow the sketch convention: `0` is a black stroke and `255`
//! is white background. Label maps store raw class indices, `0` being background.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Cursor, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const WHITE: u8 = 255;
pub const BLACK: u8 = 0;
pub const BACKGROUND: u8 = 0;

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::DimensionMismatch(format!("image must be at least 1x1, got {width}x{height}")));
    }
    if width.checked_mul(height) != Some(len) {
        return Err(Error::DimensionMismatch(format!(
            "{width}x{height} needs {} values, got {len}",
            width.saturating_mul(height)
        )));
    }
    Ok(())
}

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        Ok(Self { width, height, data })
    }

    /// All-white canvas.
    pub fn blank(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, WHITE)
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }
}

/// Boolean mask; `true` marks a stroke / foreground pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-bounds coordinates read as background.
    #[inline]
    pub fn get_or_false(&self, x: isize, y: isize) -> bool {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            false
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Per-pixel class indices in `[0, classes)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: usize,
    height: usize,
    classes: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, classes: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(width, height, data.len())?;
        if classes == 0 || classes > 256 {
            return Err(Error::InvalidArgument(format!("class count must be in 1..=256, got {classes}")));
        }
        if let Some(&value) = data.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::LabelOutOfRange { value, classes });
        }
        Ok(Self { width, height, classes, data })
    }

    pub fn background(width: usize, height: usize, classes: usize) -> Result<Self> {
        Self::new(width, height, classes, vec![BACKGROUND; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Panics if `value` is not a valid class.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        assert!((value as usize) < self.classes, "label {value} >= {}", self.classes);
        self.data[y * self.width + x] = value;
    }

    /// Same indices under a different class count.
    pub fn with_classes(&self, classes: usize) -> Result<Self> {
        Self::new(self.width, self.height, classes, self.data.clone())
    }

    /// Relabels every pixel through `table` (indexed by old class).
    pub fn remap(&self, table: &[u8], classes: usize) -> Result<Self> {
        let data = self
            .data
            .iter()
            .map(|&v| table.get(v as usize).copied().ok_or(Error::LabelOutOfRange { value: v, classes: table.len() }))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.width, self.height, classes, data)
    }

    /// Sorted distinct labels that occur in the map.
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn same_shape(&self, img: &GrayImage) -> bool {
        self.width == img.width && self.height == img.height
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetItem {
    pub image: GrayImage,
    pub labels: LabelMap,
    pub category: String,
    pub super_category: String,
}

/// Paired sketches and part annotations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    items: Vec<DatasetItem>,
    /// Global class vocabulary, index = class id. May be empty when unknown.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(items: Vec<DatasetItem>, class_names: Vec<String>) -> Result<Self> {
        let mut ds = Self { items: Vec::with_capacity(items.len()), class_names };
        for item in items {
            ds.push(item)?;
        }
        Ok(ds)
    }

    /// Rejects shape mismatches and a category reassigned to a second
    /// super-category.
    pub fn push(&mut self, item: DatasetItem) -> Result<()> {
        if !item.labels.same_shape(&item.image) {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{} vs labels {}x{}",
                item.image.width(),
                item.image.height(),
                item.labels.width(),
                item.labels.height()
            )));
        }
        if let Some(prev) = self.items.iter().find(|i| i.category == item.category) {
            if prev.super_category != item.super_category {
                return Err(Error::InvalidArgument(format!(
                    "category `{}` assigned to both `{}` and `{}`",
                    item.category, prev.super_category, item.super_category
                )));
            }
        }
        self.items.push(item);
        Ok(())
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn into_items(self) -> Vec<DatasetItem> {
        self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Largest class count across items.
    pub fn classes(&self) -> usize {
        self.items.iter().map(|i| i.labels.classes()).max().unwrap_or(1)
    }

    /// Categories in first-appearance order.
    pub fn categories(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for item in &self.items {
            if !out.contains(&item.category) {
                out.push(item.category.clone());
            }
        }
        out
    }

    /// Category -> super-category.
    pub fn category_parents(&self) -> BTreeMap<String, String> {
        self.items.iter().map(|i| (i.category.clone(), i.super_category.clone())).collect()
    }

    /// Sorted labels observed in each category, background always included.
    pub fn category_classes(&self) -> BTreeMap<String, Vec<u8>> {
        let mut seen: BTreeMap<String, [bool; 256]> = BTreeMap::new();
        for item in &self.items {
            let mask = seen.entry(item.category.clone()).or_insert([false; 256]);
            mask[BACKGROUND as usize] = true;
            for &v in item.labels.data() {
                mask[v as usize] = true;
            }
        }
        seen.into_iter().map(|(k, mask)| (k, (0..=255u8).filter(|&c| mask[c as usize]).collect())).collect()
    }

    pub fn filter_category(&self, category: &str) -> Dataset {
        Dataset {
            items: self.items.iter().filter(|i| i.category == category).cloned().collect(),
            class_names: self.class_names.clone(),
        }
    }
}

fn is_pgm_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

/// Reads one header integer, skipping whitespace and `#` comments.
fn pgm_header_int(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(&b) if is_pgm_space(b) => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err(Error::MalformedHeader(format!("missing {what}"))),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::MalformedHeader(format!("expected {what}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::MalformedHeader(format!("{what} out of range")))
}

/// Decodes a binary PGM. Sample values are returned untouched (no maxval
/// rescaling); maxval above 255 means 16-bit samples and is rejected.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::MalformedHeader("missing P5 magic".into()));
    }
    let mut pos = 2;
    let width = pgm_header_int(bytes, &mut pos, "width")?;
    let height = pgm_header_int(bytes, &mut pos, "height")?;
    let maxval = pgm_header_int(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("zero dimension {width}x{height}")));
    }
    match maxval {
        1..=255 => {}
        256..=65535 => return Err(Error::UnsupportedFormat(format!("16-bit PGM (maxval {maxval})"))),
        _ => return Err(Error::MalformedHeader(format!("invalid maxval {maxval}"))),
    }
    match bytes.get(pos) {
        Some(&b) if is_pgm_space(b) => pos += 1,
        _ => return Err(Error::MalformedHeader("no whitespace after maxval".into())),
    }
    let expected = width.checked_mul(height).ok_or_else(|| Error::MalformedHeader("dimensions overflow".into()))?;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload { expected, found: payload.len() });
    }
    GrayImage::new(width, height, payload[..expected].to_vec())
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn png_error(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) if io.kind() == io::ErrorKind::UnexpectedEof => {
            Error::TruncatedPayload { expected: 0, found: 0 }
        }
        png::DecodingError::IoError(io) => Error::Io(io),
        other => Error::Png(other.to_string()),
    }
}

pub fn decode_png(bytes: &[u8]) -> Result<GrayImage> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(png_error)?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if color != png::ColorType::Grayscale {
        return Err(Error::UnsupportedFormat(format!("PNG color type {color:?}")));
    }
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!("PNG bit depth {depth:?}")));
    }
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(png_error)?;
    buf.truncate(frame.buffer_size());
    GrayImage::new(frame.width as usize, frame.height as usize, buf)
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(&img.data).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

/// Sniffs the magic bytes and decodes PGM or PNG.
pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P") {
        decode_pgm(bytes)
    } else {
        Err(Error::MalformedHeader("neither PGM nor PNG signature".into()))
    }
}

pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_gray(&fs::read(path)?)
}

/// Writes PNG when the extension is `.png`, binary PGM otherwise.
pub fn save_gray(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png { encode_png(img)? } else { encode_pgm(img) };
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>, classes: usize) -> Result<LabelMap> {
    let img = load_gray(path)?;
    LabelMap::new(img.width, img.height, classes, img.data)
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let img = GrayImage::new(labels.width, labels.height, labels.data.clone())?;
    save_gray(&img, path)
}

/// One manifest row. Paths are stored as written in the file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub labels: PathBuf,
    pub category: String,
    pub super_category: String,
}

pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Manifest {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: format!("expected 4 non-empty tab-separated fields, got {}", fields.len()),
            });
        }
        out.push(ManifestEntry {
            image: PathBuf::from(fields[0]),
            labels: PathBuf::from(fields[1]),
            category: fields[2].to_string(),
            super_category: fields[3].to_string(),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    parse_manifest(&fs::read_to_string(path)?, path)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from("# image\tlabels\tcategory\tsuper-category\n");
    for e in entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.image.display(),
            e.labels.display(),
            e.category,
            e.super_category
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Relative manifest paths resolve against the manifest's directory.
pub fn resolve_entry_path(manifest: &Path, entry_path: &Path) -> PathBuf {
    if entry_path.is_absolute() {
        entry_path.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(entry_path)
    }
}

/// Loads every manifest row. Labels are read against `classes`.
pub fn load_dataset(manifest: impl AsRef<Path>, classes: usize) -> Result<Dataset> {
    let manifest = manifest.as_ref();
    let mut ds = Dataset::default();
    for e in read_manifest(manifest)? {
        let image = load_gray(resolve_entry_path(manifest, &e.image))?;
        let labels = load_labels(resolve_entry_path(manifest, &e.labels), classes)?;
        ds.push(DatasetItem { image, labels, category: e.category, super_category: e.super_category })?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pgm(w: usize, h: usize, payload: &[u8]) -> Vec<u8> {
        let mut b = format!("P5\n{w} {h}\n255\n").into_bytes();
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn decodes_small_p5() {
        let img = decode_gray(&pgm(2, 2, &[0, 255, 128, 7])).unwrap();
        assert_eq!(img, GrayImage::new(2, 2, vec![0, 255, 128, 7]).unwrap());
        let one = decode_gray(&pgm(1, 1, &[255])).unwrap();
        assert_eq!(one.data(), &[255]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5 # made by hand\n3 # width\n1\n255\n\x01\x02\x03".to_vec();
        assert_eq!(decode_pgm(&bytes).unwrap().data(), &[1, 2, 3]);
    }

    #[test]
    fn distinct_decode_errors() {
        assert!(matches!(decode_gray(&pgm(2, 2, &[1, 2, 3])), Err(Error::TruncatedPayload { expected: 4, found: 3 })));
        assert!(matches!(decode_gray(b"P5\n2 x\n255\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_gray(b"GIF89a"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_gray(b"P5\n1 1\n65535\n\x00\x00"), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn png_rejects_rgb_and_16_bit() {
        for (color, depth) in
            [(png::ColorType::Rgb, png::BitDepth::Eight), (png::ColorType::Grayscale, png::BitDepth::Sixteen)]
        {
            let mut out = Vec::new();
            {
                let mut enc = png::Encoder::new(&mut out, 1, 1);
                enc.set_color(color);
                enc.set_depth(depth);
                let mut w = enc.write_header().unwrap();
                let n = if color == png::ColorType::Rgb { 3 } else { 2 };
                w.write_image_data(&vec![9u8; n]).unwrap();
            }
            assert!(matches!(decode_gray(&out), Err(Error::UnsupportedFormat(_))));
        }
    }

    #[test]
    fn constructors_reject_length_mismatch() {
        assert!(GrayImage::new(2, 2, vec![0; 3]).is_err());
        assert!(GrayImage::new(0, 2, vec![]).is_err());
        assert!(BinaryImage::new(3, 1, vec![true; 2]).is_err());
        assert!(LabelMap::new(1, 2, 2, vec![0]).is_err());
    }

    #[test]
    fn labels_round_trip_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.pgm");
        fs::write(&p, pgm(2, 1, &[0, 1])).unwrap();
        assert_eq!(load_labels(&p, 2).unwrap(), LabelMap::new(2, 1, 2, vec![0, 1]).unwrap());

        fs::write(&p, pgm(2, 1, &[0, 5])).unwrap();
        assert!(matches!(load_labels(&p, 4), Err(Error::LabelOutOfRange { value: 5, classes: 4 })));

        fs::write(&p, pgm(1, 1, &[0])).unwrap();
        let bg = load_labels(&p, 1).unwrap();
        assert_eq!(bg.present_classes(), vec![0]);
    }

    #[test]
    fn save_to_unwritable_path_is_io_error() {
        let img = GrayImage::new(1, 1, vec![0]).unwrap();
        let err = save_gray(&img, "/nonexistent-dir/x/y.pgm").unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn manifest_parsing() {
        let text = "# comment\na.pgm\tb.pgm\tcat\tanimal\n\nc.png\td.pgm\tbus\tvehicle\n";
        let rows = parse_manifest(text, Path::new("m.tsv")).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].category, "bus");
        assert!(parse_manifest("a\tb\tc\n", Path::new("m.tsv")).is_err());
    }

    #[test]
    fn dataset_rejects_conflicting_super_category() {
        let img = GrayImage::blank(2, 2).unwrap();
        let lab = LabelMap::background(2, 2, 2).unwrap();
        let mk = |sup: &str| DatasetItem {
            image: img.clone(),
            labels: lab.clone(),
            category: "cow".into(),
            super_category: sup.into(),
        };
        let mut ds = Dataset::default();
        ds.push(mk("large")).unwrap();
        assert!(ds.push(mk("small")).is_err());
        let bad = DatasetItem {
            image: GrayImage::blank(3, 2).unwrap(),
            labels: lab,
            category: "x".into(),
            super_category: "y".into(),
        };
        assert!(ds.push(bad).is_err());
    }

    proptest! {
        #[test]
        fn save_load_round_trip(
            (w, h, data) in (1usize..12, 1usize..12)
                .prop_flat_map(|(w, h)| (Just(w), Just(h), proptest::collection::vec(any::<u8>(), w * h))),
            as_png in any::<bool>(),
        ) {
            let img = GrayImage::new(w, h, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join(if as_png { "x.png" } else { "x.pgm" });
            save_gray(&img, &p).unwrap();
            prop_assert_eq!(load_gray(&p).unwrap(), img);
        }
    }
}
