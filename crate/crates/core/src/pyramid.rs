//! Multi-level RGB image store with physical resolutions, sparse label
//! masks and concentric multi-resolution patch extraction.
//!
//! On disk a pyramid is a directory holding `meta.json`, one RGB PNG per
//! level (`level_<k>.png`) and, optionally, an 8-bit grayscale `mask.png`
//! with class indices at level 0.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shape::{power_of_two_ratio, ResolutionPair, ShapeError};

pub const WHITE: [u8; 3] = [255, 255, 255];

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("image of {width}x{height} cannot hold {levels} levels")]
    TooManyLevels {
        width: usize,
        height: usize,
        levels: usize,
    },
    #[error("pyramid needs at least one level")]
    NoLevels,
    #[error("level {0} does not exist")]
    NoSuchLevel(usize),
    #[error("resolution {requested} um/px is not a level of a pyramid with base {base} and {levels} levels")]
    ResolutionNotInPyramid {
        requested: f64,
        base: f64,
        levels: usize,
    },
    #[error("region must be at least 1x1, got {0}x{1}")]
    EmptyRegion(usize, usize),
    #[error("buffer of length {len} does not match {width}x{height}x{channels}")]
    BufferSize {
        len: usize,
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("mask is {mask_w}x{mask_h} but image is {image_w}x{image_h}")]
    MaskDimensions {
        mask_w: usize,
        mask_h: usize,
        image_w: usize,
        image_h: usize,
    },
    #[error("mask value {value} exceeds class count {classes}")]
    MaskValue { value: u8, classes: u8 },
    #[error("invalid pyramid metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png decode error: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("png encode error: {0}")]
    PngEncode(#[from] png::EncodingError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, PyramidError> {
        if data.len() != width * height * 3 {
            return Err(PyramidError::BufferSize {
                len: data.len(),
                width,
                height,
                channels: 3,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// 2x2 average pooling, rounding half up; odd edges replicate the last row/column.
    pub fn downsample2(&self) -> RgbImage {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut data = vec![0u8; w * h * 3];
        for y in 0..h {
            let y0 = 2 * y;
            let y1 = (2 * y + 1).min(self.height - 1);
            for x in 0..w {
                let x0 = 2 * x;
                let x1 = (2 * x + 1).min(self.width - 1);
                for c in 0..3 {
                    let s = self.data[(y0 * self.width + x0) * 3 + c] as u32
                        + self.data[(y0 * self.width + x1) * 3 + c] as u32
                        + self.data[(y1 * self.width + x0) * 3 + c] as u32
                        + self.data[(y1 * self.width + x1) * 3 + c] as u32;
                    data[(y * w + x) * 3 + c] = ((s + 2) / 4) as u8;
                }
            }
        }
        RgbImage {
            width: w,
            height: h,
            data,
        }
    }
}

/// Level-0 class-index mask; 0 means unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub num_classes: u8,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn new(
        width: usize,
        height: usize,
        num_classes: u8,
        data: Vec<u8>,
    ) -> Result<Self, PyramidError> {
        if data.len() != width * height {
            return Err(PyramidError::BufferSize {
                len: data.len(),
                width,
                height,
                channels: 1,
            });
        }
        if let Some(&value) = data.iter().find(|&&v| v > num_classes) {
            return Err(PyramidError::MaskValue {
                value,
                classes: num_classes,
            });
        }
        Ok(Self {
            width,
            height,
            num_classes,
            data,
        })
    }

    pub fn unlabeled(width: usize, height: usize, num_classes: u8) -> Self {
        Self {
            width,
            height,
            num_classes,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: i64, y: i64) -> u8 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    /// Labeled pixel count per class, index 0 holding unlabeled pixels.
    pub fn class_histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.num_classes as usize + 1];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    /// Nearest-neighbour view of the mask at pyramid `level`: pixel `(i, j)`
    /// takes the level-0 sample at the center of its `2^level` block.
    pub fn region_at_level(&self, level: usize, x: i64, y: i64, w: usize, h: usize) -> Vec<u8> {
        let scale = 1i64 << level;
        let half = scale / 2;
        let mut out = Vec::with_capacity(w * h);
        for j in 0..h as i64 {
            for i in 0..w as i64 {
                out.push(self.get((x + i) * scale + half, (y + j) * scale + half));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidImage {
    pub base_resolution: f64,
    pub levels: Vec<RgbImage>,
}

/// Pixels of a read region plus per-pixel inside-image flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub valid: Vec<bool>,
}

impl Region {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Builds `n_levels` levels by repeated 2x2 average pooling.
pub fn build_pyramid(
    level0: RgbImage,
    n_levels: usize,
    base_resolution: f64,
) -> Result<PyramidImage, PyramidError> {
    if n_levels == 0 {
        return Err(PyramidError::NoLevels);
    }
    if !(base_resolution.is_finite() && base_resolution > 0.0) {
        return Err(ShapeError::InvalidResolution(base_resolution).into());
    }
    let need = 1usize << (n_levels - 1).min(63);
    if level0.width < need || level0.height < need || n_levels > 63 {
        return Err(PyramidError::TooManyLevels {
            width: level0.width,
            height: level0.height,
            levels: n_levels,
        });
    }
    let mut levels = Vec::with_capacity(n_levels);
    levels.push(level0);
    for _ in 1..n_levels {
        let next = levels.last().unwrap().downsample2();
        levels.push(next);
    }
    Ok(PyramidImage {
        base_resolution,
        levels,
    })
}

impl PyramidImage {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn width(&self) -> usize {
        self.levels[0].width
    }

    pub fn height(&self) -> usize {
        self.levels[0].height
    }

    pub fn level_resolution(&self, level: usize) -> f64 {
        self.base_resolution * 2f64.powi(level as i32)
    }

    /// Maps a resolution in μm/px to its pyramid level.
    pub fn level_for_resolution(&self, r: f64) -> Result<usize, PyramidError> {
        let not_found = || PyramidError::ResolutionNotInPyramid {
            requested: r,
            base: self.base_resolution,
            levels: self.levels.len(),
        };
        let q = power_of_two_ratio(self.base_resolution, r).map_err(|e| match e {
            ShapeError::InvalidResolution(_) => PyramidError::Shape(e),
            _ => not_found(),
        })?;
        if q < 0 || q as usize >= self.levels.len() {
            return Err(not_found());
        }
        Ok(q as usize)
    }

    /// Copies a `w x h` window at `level`; out-of-image pixels are white and
    /// flagged invalid.
    pub fn read_region(
        &self,
        level: usize,
        x: i64,
        y: i64,
        w: usize,
        h: usize,
    ) -> Result<Region, PyramidError> {
        let img = self
            .levels
            .get(level)
            .ok_or(PyramidError::NoSuchLevel(level))?;
        if w == 0 || h == 0 {
            return Err(PyramidError::EmptyRegion(w, h));
        }
        let mut pixels = Vec::with_capacity(w * h * 3);
        let mut valid = Vec::with_capacity(w * h);
        for j in 0..h as i64 {
            let yy = y + j;
            let row_ok = yy >= 0 && yy < img.height as i64;
            for i in 0..w as i64 {
                let xx = x + i;
                if row_ok && xx >= 0 && xx < img.width as i64 {
                    pixels.extend_from_slice(&img.pixel(xx as usize, yy as usize));
                    valid.push(true);
                } else {
                    pixels.extend_from_slice(&WHITE);
                    valid.push(false);
                }
            }
        }
        Ok(Region {
            width: w,
            height: h,
            pixels,
            valid,
        })
    }

    /// Top-left corner, at `level`, of an `m x m` patch centered on a level-0 point.
    pub fn patch_origin(level: usize, center: (i64, i64), m: usize) -> (i64, i64) {
        let half = (m / 2) as i64;
        (
            center.0.div_euclid(1 << level) - half,
            center.1.div_euclid(1 << level) - half,
        )
    }

    pub fn extract_patch(
        &self,
        center: (i64, i64),
        m: usize,
        r: f64,
    ) -> Result<Region, PyramidError> {
        let level = self.level_for_resolution(r)?;
        let (x, y) = Self::patch_origin(level, center, m);
        self.read_region(level, x, y, m, m)
    }
}

/// One member of an MFMR pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub resolution: f64,
    pub level: usize,
    pub size: usize,
    pub pixels: Vec<u8>,
    pub valid: Vec<bool>,
    pub mask: Vec<u8>,
}

impl Patch {
    pub fn field_of_view_um(&self) -> f64 {
        self.size as f64 * self.resolution
    }
}

/// Concentric target/context patches of equal pixel size.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub center: (i64, i64),
    pub size: usize,
    pub target: Patch,
    pub context: Patch,
}

fn extract_with_mask(
    img: &PyramidImage,
    mask: &LabelMask,
    center: (i64, i64),
    m: usize,
    r: f64,
) -> Result<Patch, PyramidError> {
    let level = img.level_for_resolution(r)?;
    let (x, y) = PyramidImage::patch_origin(level, center, m);
    let region = img.read_region(level, x, y, m, m)?;
    let mask = mask.region_at_level(level, x, y, m, m);
    Ok(Patch {
        resolution: r,
        level,
        size: m,
        pixels: region.pixels,
        valid: region.valid,
        mask,
    })
}

/// Extracts a single patch with its mask (the single-resolution case).
pub fn extract_labeled_patch(
    img: &PyramidImage,
    mask: &LabelMask,
    center: (i64, i64),
    m: usize,
    r: f64,
) -> Result<Patch, PyramidError> {
    check_mask(img, mask)?;
    extract_with_mask(img, mask, center, m, r)
}

pub fn extract_mfmr_pair(
    img: &PyramidImage,
    mask: &LabelMask,
    center: (i64, i64),
    m: usize,
    res: &ResolutionPair,
) -> Result<PatchPair, PyramidError> {
    check_mask(img, mask)?;
    let target = extract_with_mask(img, mask, center, m, res.target)?;
    let context = if res.context == res.target {
        target.clone()
    } else {
        extract_with_mask(img, mask, center, m, res.context)?
    };
    Ok(PatchPair {
        center,
        size: m,
        target,
        context,
    })
}

fn check_mask(img: &PyramidImage, mask: &LabelMask) -> Result<(), PyramidError> {
    if mask.width != img.width() || mask.height != img.height() {
        return Err(PyramidError::MaskDimensions {
            mask_w: mask.width,
            mask_h: mask.height,
            image_w: img.width(),
            image_h: img.height(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Directory format

pub const META_FORMAT: &str = "hooknet-pyramid";
pub const META_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelMeta {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    pub resolution_um: f64,
    pub file: String,
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidMeta {
    pub format: String,
    pub version: u32,
    /// Level-0 resolution r0 in μm/px.
    pub base_resolution_um: f64,
    pub width: usize,
    pub height: usize,
    pub levels: Vec<LevelMeta>,
    /// Class count K; mask values lie in `0..=K`.
    pub num_classes: u8,
    /// Names of classes `1..=K`.
    pub class_names: Vec<String>,
    pub mask_file: Option<String>,
}

impl PyramidMeta {
    pub fn describe(
        img: &PyramidImage,
        num_classes: u8,
        class_names: &[String],
        has_mask: bool,
    ) -> Self {
        Self {
            format: META_FORMAT.into(),
            version: META_VERSION,
            base_resolution_um: img.base_resolution,
            width: img.width(),
            height: img.height(),
            levels: img
                .levels
                .iter()
                .enumerate()
                .map(|(k, l)| LevelMeta {
                    level: k,
                    width: l.width,
                    height: l.height,
                    resolution_um: img.level_resolution(k),
                    file: format!("level_{k}.png"),
                })
                .collect(),
            num_classes,
            class_names: class_names.to_vec(),
            mask_file: has_mask.then(|| "mask.png".to_string()),
        }
    }
}

pub fn save_pyramid(
    dir: &Path,
    img: &PyramidImage,
    mask: Option<&LabelMask>,
    num_classes: u8,
    class_names: &[String],
) -> Result<PyramidMeta, PyramidError> {
    std::fs::create_dir_all(dir)?;
    if let Some(m) = mask {
        check_mask(img, m)?;
    }
    let meta = PyramidMeta::describe(img, num_classes, class_names, mask.is_some());
    for (lm, level) in meta.levels.iter().zip(&img.levels) {
        write_png(
            &dir.join(&lm.file),
            level.width,
            level.height,
            png::ColorType::Rgb,
            &level.data,
        )?;
    }
    if let (Some(m), Some(file)) = (mask, &meta.mask_file) {
        write_png(
            &dir.join(file),
            m.width,
            m.height,
            png::ColorType::Grayscale,
            &m.data,
        )?;
    }
    let f = BufWriter::new(File::create(dir.join("meta.json"))?);
    serde_json::to_writer_pretty(f, &meta)?;
    Ok(meta)
}

pub fn load_meta(dir: &Path) -> Result<PyramidMeta, PyramidError> {
    let meta: PyramidMeta =
        serde_json::from_reader(BufReader::new(File::open(dir.join("meta.json"))?))?;
    if meta.format != META_FORMAT {
        return Err(PyramidError::Meta(format!(
            "unknown format {:?}",
            meta.format
        )));
    }
    if meta.version != META_VERSION {
        return Err(PyramidError::Meta(format!(
            "unsupported version {}",
            meta.version
        )));
    }
    if meta.levels.is_empty() {
        return Err(PyramidError::NoLevels);
    }
    Ok(meta)
}

pub fn load_pyramid(
    dir: &Path,
) -> Result<(PyramidImage, Option<LabelMask>, PyramidMeta), PyramidError> {
    let meta = load_meta(dir)?;
    let mut levels = Vec::with_capacity(meta.levels.len());
    for (k, lm) in meta.levels.iter().enumerate() {
        if lm.level != k {
            return Err(PyramidError::Meta(format!(
                "level {} listed at position {k}",
                lm.level
            )));
        }
        let (w, h, data) = read_png(&dir.join(&lm.file), 3)?;
        if (w, h) != (lm.width, lm.height) {
            return Err(PyramidError::Meta(format!(
                "{} is {w}x{h}, meta says {}x{}",
                lm.file, lm.width, lm.height
            )));
        }
        levels.push(RgbImage::new(w, h, data)?);
    }
    let img = PyramidImage {
        base_resolution: meta.base_resolution_um,
        levels,
    };
    let mask = match &meta.mask_file {
        Some(file) => {
            let (w, h, data) = read_png(&dir.join(file), 1)?;
            let m = LabelMask::new(w, h, meta.num_classes, data)?;
            check_mask(&img, &m)?;
            Some(m)
        }
        None => None,
    };
    Ok((img, mask, meta))
}

pub(crate) fn write_png(
    path: &Path,
    w: usize,
    h: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<(), PyramidError> {
    let f = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(f, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Fast);
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    Ok(())
}

/// Writes 8-bit pixels with `channels` 1 (grey) or 3 (RGB) as PNG.
pub fn save_png(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    data: &[u8],
) -> Result<(), PyramidError> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(PyramidError::Meta(format!("cannot write {c}-channel png"))),
    };
    if data.len() != width * height * channels {
        return Err(PyramidError::Meta(format!(
            "{} bytes for a {width}x{height}x{channels} image",
            data.len()
        )));
    }
    write_png(path, width, height, color, data)
}

/// Reads an 8-bit PNG, converting to `channels` (1 or 3).
pub fn read_png(path: &Path, channels: usize) -> Result<(usize, usize, Vec<u8>), PyramidError> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let out = match (src_channels, channels) {
        (a, b) if a == b => buf,
        (1, 3) => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        (2, 3) => buf.chunks(2).flat_map(|c| [c[0], c[0], c[0]]).collect(),
        (4, 3) => buf.chunks(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
        (3, 1) => buf.chunks(3).map(|c| c[0]).collect(),
        (2, 1) => buf.chunks(2).map(|c| c[0]).collect(),
        (4, 1) => buf.chunks(4).map(|c| c[0]).collect(),
        (a, b) => {
            return Err(PyramidError::Meta(format!(
                "cannot convert {a}-channel png to {b} channels"
            )))
        }
    };
    Ok((w, h, out))
}
