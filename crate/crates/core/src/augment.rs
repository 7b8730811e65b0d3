//! Color prompt augmentation for vehicle rasters.
//!
//! The detector maps every pixel to its nearest palette entry and takes the
//! mode; the prompt is a solid square of the detected color flush with the
//! top-left corner. [`image_to_features`] turns a raster into the 48-dim
//! encoder input (4×4 grid of block means per channel).

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgb(pub [u8; 3]);

impl Rgb {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Rgb([r, g, b])
    }

    pub fn squared_distance(self, other: Rgb) -> u32 {
        let mut d = 0u32;
        for c in 0..3 {
            let diff = self.0[c] as i32 - other.0[c] as i32;
            d += (diff * diff) as u32;
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub id: usize,
    pub name: String,
    pub rgb: Rgb,
}

/// Named colors the detector can report, kept sorted by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PaletteFile", into = "PaletteFile")]
pub struct Palette {
    entries: Vec<PaletteEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PaletteFile {
    entries: Vec<PaletteEntry>,
}

impl TryFrom<PaletteFile> for Palette {
    type Error = Error;
    fn try_from(f: PaletteFile) -> Result<Self> {
        Palette::new(f.entries)
    }
}

impl From<Palette> for PaletteFile {
    fn from(p: Palette) -> Self {
        PaletteFile { entries: p.entries }
    }
}

/// Names of the palette entries that are easy to mix up.
pub const CONFUSABLE_COLORS: [&str; 3] = ["white", "silver", "gray"];

impl Default for Palette {
    fn default() -> Self {
        let raw: [(&str, [u8; 3]); 8] = [
            ("white", [240, 240, 240]),
            ("silver", [190, 190, 195]),
            ("gray", [128, 128, 128]),
            ("black", [20, 20, 20]),
            ("red", [200, 30, 30]),
            ("blue", [30, 60, 200]),
            ("green", [30, 160, 60]),
            ("yellow", [230, 200, 40]),
        ];
        let entries = raw
            .iter()
            .enumerate()
            .map(|(id, (name, rgb))| PaletteEntry {
                id,
                name: (*name).to_string(),
                rgb: Rgb(*rgb),
            })
            .collect();
        Palette { entries }
    }
}

impl Palette {
    pub fn new(mut entries: Vec<PaletteEntry>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::ConfigInvalid("palette needs at least 2 entries".into()));
        }
        entries.sort_by_key(|e| e.id);
        for (i, a) in entries.iter().enumerate() {
            for b in &entries[i + 1..] {
                if a.id == b.id || a.rgb == b.rgb || a.name == b.name {
                    return Err(Error::ConfigInvalid(format!(
                        "palette entries {} and {} collide",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(Palette { entries })
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&PaletteEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn by_name(&self, name: &str) -> Option<&PaletteEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Position of the nearest entry by squared RGB distance; ties go to the lower id.
    pub fn nearest_index(&self, rgb: Rgb) -> usize {
        let mut best = 0;
        let mut best_d = u32::MAX;
        for (k, e) in self.entries.iter().enumerate() {
            let d = e.rgb.squared_distance(rgb);
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }

    pub fn nearest(&self, rgb: Rgb) -> &PaletteEntry {
        &self.entries[self.nearest_index(rgb)]
    }

    pub fn is_confusable(&self, id: usize) -> bool {
        self.get(id)
            .is_some_and(|e| CONFUSABLE_COLORS.contains(&e.name.as_str()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn filled(width: usize, height: usize, rgb: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb.0);
        }
        Raster { width, height, data }
    }

    pub fn from_bytes(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dims(width * height * 3, data.len()));
        }
        Ok(Raster { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let o = (y * self.width + x) * 3;
        Rgb([self.data[o], self.data[o + 1], self.data[o + 2]])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: Rgb) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb.0);
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.data.chunks_exact(3).map(|c| Rgb([c[0], c[1], c[2]]))
    }

    /// Binary PPM (P6) encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 20);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height).expect("vec write");
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Malformed(format!("ppm: {m}"));
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("not a P6 file"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("header number"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err(bad("truncated raster"));
        }
        Raster::from_bytes(w, h, bytes[pos..pos + need].to_vec())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Solid square anchored at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub side: usize,
}

impl PatchSpec {
    /// One cell of the 4×4 feature grid.
    pub fn for_image(side: usize) -> Self {
        PatchSpec { side: side / 4 }
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec::for_image(32)
    }
}

/// Modal palette entry over the pixels selected by `mask` (all pixels when `None`).
///
/// Each pixel votes for its nearest entry; equal vote counts go to the lower id.
pub fn dominant_color<'p>(image: &Raster, palette: &'p Palette, mask: Option<&[bool]>) -> Result<&'p PaletteEntry> {
    if image.pixel_count() == 0 {
        return Err(Error::EmptyImage);
    }
    if let Some(m) = mask {
        if m.len() != image.pixel_count() {
            return Err(Error::dims(image.pixel_count(), m.len()));
        }
    }
    let mut votes = vec![0usize; palette.len()];
    for (k, px) in image.pixels().enumerate() {
        if mask.is_none_or(|m| m[k]) {
            votes[palette.nearest_index(px)] += 1;
        }
    }
    if votes.iter().all(|&v| v == 0) {
        return Err(Error::EmptyImage);
    }
    let mut best = 0;
    for k in 1..votes.len() {
        if votes[k] > votes[best] {
            best = k;
        }
    }
    Ok(&palette.entries()[best])
}

/// Copy of `image` with the top-left `side × side` block painted `rgb`.
pub fn apply_color_patch(image: &Raster, rgb: Rgb, spec: PatchSpec) -> Result<Raster> {
    if spec.side == 0 || spec.side > image.width() || spec.side > image.height() {
        return Err(Error::PatchOutOfBounds {
            side: spec.side,
            width: image.width(),
            height: image.height(),
        });
    }
    let mut out = image.clone();
    for y in 0..spec.side {
        for x in 0..spec.side {
            out.set(x, y, rgb);
        }
    }
    Ok(out)
}

/// Side length the feature extractor expects.
pub const FEATURE_IMAGE_SIDE: usize = 32;
pub const FEATURE_GRID: usize = 4;
/// `4 × 4` blocks × 3 channels.
pub const FEATURE_DIM: usize = FEATURE_GRID * FEATURE_GRID * 3;

/// Block-mean features of a 32×32 raster scaled to `[0, 1]`.
///
/// Layout: `features[(block_row * 4 + block_col) * 3 + channel]`.
pub fn image_to_features(image: &Raster) -> Result<Vec<f64>> {
    if image.width() != FEATURE_IMAGE_SIDE || image.height() != FEATURE_IMAGE_SIDE {
        return Err(Error::dims(
            format!("{FEATURE_IMAGE_SIDE}x{FEATURE_IMAGE_SIDE}"),
            format!("{}x{}", image.width(), image.height()),
        ));
    }
    let cell = FEATURE_IMAGE_SIDE / FEATURE_GRID;
    let mut out = vec![0.0; FEATURE_DIM];
    for by in 0..FEATURE_GRID {
        for bx in 0..FEATURE_GRID {
            let mut sums = [0u32; 3];
            for y in by * cell..(by + 1) * cell {
                for x in bx * cell..(bx + 1) * cell {
                    let px = image.get(x, y);
                    for c in 0..3 {
                        sums[c] += px.0[c] as u32;
                    }
                }
            }
            let n = (cell * cell) as f64 * 255.0;
            for c in 0..3 {
                out[(by * FEATURE_GRID + bx) * 3 + c] = sums[c] as f64 / n;
            }
        }
    }
    Ok(out)
}

/// Pixels differing from `background` by more than `threshold` on some channel.
pub fn foreground_mask(image: &Raster, background: &Raster, threshold: u8) -> Result<Vec<bool>> {
    if image.width() != background.width() || image.height() != background.height() {
        return Err(Error::dims(
            format!("{}x{}", background.width(), background.height()),
            format!("{}x{}", image.width(), image.height()),
        ));
    }
    Ok(image
        .pixels()
        .zip(background.pixels())
        .map(|(a, b)| (0..3).any(|c| a.0[c].abs_diff(b.0[c]) > threshold))
        .collect())
}

/// Detector plus patch painter used on every vehicle image.
#[derive(Debug, Clone)]
pub struct ColorPrompter {
    pub palette: Palette,
    /// Known scene background; when set, only foreground pixels vote.
    pub background: Option<Raster>,
    pub threshold: u8,
    pub patch: PatchSpec,
}

impl ColorPrompter {
    /// Detected palette entry. Falls back to all pixels if the mask is empty.
    pub fn detect(&self, image: &Raster) -> Result<&PaletteEntry> {
        if let Some(bg) = &self.background {
            let mask = foreground_mask(image, bg, self.threshold)?;
            if mask.iter().any(|&m| m) {
                return dominant_color(image, &self.palette, Some(&mask));
            }
        }
        dominant_color(image, &self.palette, None)
    }

    pub fn prompt(&self, image: &Raster) -> Result<(PaletteEntry, Raster)> {
        let entry = self.detect(image)?.clone();
        let patched = apply_color_patch(image, entry.rgb, self.patch)?;
        Ok((entry, patched))
    }
}
