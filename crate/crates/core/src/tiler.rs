//! Whole-region inference by tiling concentric input pairs with a stride
//! equal to the output window.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{argmax_labels, center_window, pixels_to_tensor, HookNet, ModelError};
use crate::pyramid::{PyramidError, PyramidImage};
use crate::shape::{power_of_two_ratio, ShapeError};
use crate::tensor::{Scalar, TensorError};

#[derive(Debug, Error)]
pub enum TileError {
    #[error("region must be non-empty, got {0}x{1}")]
    EmptyRegion(usize, usize),
    #[error("worker count must be positive")]
    NoWorkers,
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("png encode error: {0}")]
    Png(#[from] png::EncodingError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Axis-aligned rectangle in level-0 pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: i64, y: i64, width: usize, height: usize) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }
}

/// One tile: the level-0 center of its input pair and the part of the
/// output map (in r_T pixels) its window fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub col: usize,
    pub row: usize,
    pub center: (i64, i64),
    pub out_x: usize,
    pub out_y: usize,
    pub out_w: usize,
    pub out_h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub region: Rect,
    /// Level-0 pixels per output pixel (`r_T / r0`).
    pub scale: usize,
    pub input_size: usize,
    pub output_size: usize,
    /// Region origin in r_T pixels.
    pub origin: (i64, i64),
    /// Output map size in r_T pixels.
    pub width: usize,
    pub height: usize,
    pub cols: usize,
    pub rows: usize,
    pub tiles: Vec<Tile>,
}

impl TilePlan {
    /// Level-0 distance between neighbouring tile centers.
    pub fn stride(&self) -> usize {
        self.output_size * self.scale
    }
}

/// Lays a `ceil(region / window)` grid of output windows over `region`,
/// whose origin is floored and extent ceiled to whole r_T pixels. The last
/// row and column are clipped to the region.
pub fn plan_tiles(
    region: Rect,
    input_size: usize,
    output_size: usize,
    target_resolution: f64,
    base_resolution: f64,
) -> Result<TilePlan, TileError> {
    if region.width == 0 || region.height == 0 {
        return Err(TileError::EmptyRegion(region.width, region.height));
    }
    let exp = power_of_two_ratio(base_resolution, target_resolution)?;
    if exp < 0 {
        return Err(ShapeError::InvalidResolution(target_resolution).into());
    }
    let scale = 1usize << exp;
    let s = scale as i64;
    let origin = (region.x.div_euclid(s), region.y.div_euclid(s));
    let end_x = (region.x + region.width as i64 + s - 1).div_euclid(s);
    let end_y = (region.y + region.height as i64 + s - 1).div_euclid(s);
    let (width, height) = ((end_x - origin.0) as usize, (end_y - origin.1) as usize);
    let (cols, rows) = (width.div_ceil(output_size), height.div_ceil(output_size));
    let half = (output_size / 2) as i64;
    let mut tiles = Vec::with_capacity(cols * rows);
    for row in 0..rows {
        for col in 0..cols {
            let (out_x, out_y) = (col * output_size, row * output_size);
            // The input patch starts one crop border before the window, so
            // its center sits half a window past the window origin.
            let cx = origin.0 + out_x as i64 + half;
            let cy = origin.1 + out_y as i64 + half;
            tiles.push(Tile {
                col,
                row,
                center: (cx * s, cy * s),
                out_x,
                out_y,
                out_w: output_size.min(width - out_x),
                out_h: output_size.min(height - out_y),
            });
        }
    }
    Ok(TilePlan {
        region,
        scale,
        input_size,
        output_size,
        origin,
        width,
        height,
        cols,
        rows,
        tiles,
    })
}

/// Stitched labels at r_T; `valid` is false where the input pixel under an
/// output pixel lay outside the image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TiledOutput {
    pub width: usize,
    pub height: usize,
    pub origin: (i64, i64),
    pub scale: usize,
    pub labels: Vec<u8>,
    pub valid: Vec<bool>,
}

impl TiledOutput {
    /// Label at r_T pixel `(x, y)` in absolute r_T coordinates, if covered.
    pub fn label_at(&self, x: i64, y: i64) -> Option<u8> {
        let (lx, ly) = (x - self.origin.0, y - self.origin.1);
        if lx < 0 || ly < 0 || lx >= self.width as i64 || ly >= self.height as i64 {
            return None;
        }
        Some(self.labels[ly as usize * self.width + lx as usize])
    }

    /// Nearest-neighbour labels on the level-0 grid of `region`.
    pub fn labels_on_level0(&self, region: Rect) -> Vec<u8> {
        let s = self.scale as i64;
        let mut out = Vec::with_capacity(region.width * region.height);
        for j in 0..region.height as i64 {
            for i in 0..region.width as i64 {
                let l = self
                    .label_at((region.x + i).div_euclid(s), (region.y + j).div_euclid(s))
                    .unwrap_or(0);
                out.push(l);
            }
        }
        out
    }
}

fn predict_tile<T: Scalar>(
    model: &HookNet<T>,
    image: &PyramidImage,
    tile: &Tile,
) -> Result<(Vec<u8>, Vec<bool>), TileError> {
    let cfg = model.config();
    let res = cfg.extraction_pair()?;
    let m = cfg.input_size;
    let out = model.output_size();
    let target = image.extract_patch(tile.center, m, res.target)?;
    let context = if model.is_hooked() {
        let c = image.extract_patch(tile.center, m, res.context)?;
        Some(pixels_to_tensor::<T>(&[&c.pixels], m)?)
    } else {
        None
    };
    let (probs, _) = model.predict(pixels_to_tensor(&[&target.pixels], m)?, context)?;
    Ok((argmax_labels(&probs), center_window(&target.valid, m, out)))
}

/// Runs every tile of `plan` on `workers` threads and stitches the argmax
/// labels of the target branch.
pub fn run_tiled<T: Scalar>(
    model: &HookNet<T>,
    image: &PyramidImage,
    plan: &TilePlan,
    workers: usize,
) -> Result<TiledOutput, TileError> {
    if workers == 0 {
        return Err(TileError::NoWorkers);
    }
    let exp = power_of_two_ratio(image.base_resolution, model.config().target_resolution)?;
    if plan.scale != 1usize << exp.max(0)
        || plan.input_size != model.input_size()
        || plan.output_size != model.output_size()
    {
        return Err(
            ModelError::Config("tile plan does not match the model and image".into()).into(),
        );
    }
    let next = AtomicUsize::new(0);
    let results: Vec<Result<Vec<(usize, Vec<u8>, Vec<bool>)>, TileError>> =
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers.min(plan.tiles.len()))
                .map(|_| {
                    s.spawn(|| {
                        let mut done = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            let Some(tile) = plan.tiles.get(i) else { break };
                            let (labels, valid) = predict_tile(model, image, tile)?;
                            done.push((i, labels, valid));
                        }
                        Ok(done)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("tile worker panicked"))
                .collect()
        });
    let out = plan.output_size;
    let mut labels = vec![0u8; plan.width * plan.height];
    let mut valid = vec![false; plan.width * plan.height];
    for batch in results {
        for (i, tl, tv) in batch? {
            let t = &plan.tiles[i];
            for y in 0..t.out_h {
                let dst = (t.out_y + y) * plan.width + t.out_x;
                labels[dst..dst + t.out_w].copy_from_slice(&tl[y * out..y * out + t.out_w]);
                valid[dst..dst + t.out_w].copy_from_slice(&tv[y * out..y * out + t.out_w]);
            }
        }
    }
    Ok(TiledOutput {
        width: plan.width,
        height: plan.height,
        origin: plan.origin,
        scale: plan.scale,
        labels,
        valid,
    })
}

/// Palette entry 0 is unlabeled; classes 1..=K follow.
pub const PALETTE: [[u8; 3]; 9] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

fn palette_colour(i: usize) -> [u8; 3] {
    PALETTE.get(i).copied().unwrap_or_else(|| {
        let v = (i * 37 % 256) as u8;
        [v, 255 - v, (i * 91 % 256) as u8]
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub index: u8,
    pub name: String,
    pub colour: [u8; 3],
}

/// Sidecar describing an indexed label PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelLegend {
    pub resolution_um: f64,
    /// Level-0 pixels per label pixel along each axis.
    pub scale: usize,
    pub region: Rect,
    pub origin: (i64, i64),
    pub width: usize,
    pub height: usize,
    pub classes: Vec<LegendEntry>,
    pub validity_file: String,
    pub valid_fraction: f64,
}

/// Paths written by [`write_label_map`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFiles {
    pub labels: PathBuf,
    pub validity: PathBuf,
    pub legend: PathBuf,
}

/// Writes `path` (indexed PNG), `<stem>.valid.png` (255 where valid) and
/// `<stem>.json` (legend).
pub fn write_label_map(
    path: &Path,
    output: &TiledOutput,
    region: Rect,
    resolution_um: f64,
    class_names: &[String],
) -> Result<LabelFiles, TileError> {
    let k = output.labels.iter().copied().max().unwrap_or(0) as usize;
    let k = k.max(class_names.len());
    let mut palette = Vec::with_capacity(3 * (k + 1));
    for i in 0..=k {
        palette.extend_from_slice(&palette_colour(i));
    }
    let f = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(f, output.width as u32, output.height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette);
    enc.write_header()?.write_image_data(&output.labels)?;

    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("labels")
        .to_string();
    let validity = path.with_file_name(format!("{stem}.valid.png"));
    let valid: Vec<u8> = output
        .valid
        .iter()
        .map(|&v| if v { 255 } else { 0 })
        .collect();
    crate::pyramid::write_png(
        &validity,
        output.width,
        output.height,
        png::ColorType::Grayscale,
        &valid,
    )?;

    let legend_path = path.with_file_name(format!("{stem}.json"));
    let mut classes = vec![LegendEntry {
        index: 0,
        name: "unlabeled".into(),
        colour: palette_colour(0),
    }];
    for i in 1..=k {
        classes.push(LegendEntry {
            index: i as u8,
            name: class_names
                .get(i - 1)
                .cloned()
                .unwrap_or_else(|| format!("class{i}")),
            colour: palette_colour(i),
        });
    }
    let n_valid = output.valid.iter().filter(|&&v| v).count();
    let legend = LabelLegend {
        resolution_um,
        scale: output.scale,
        region,
        origin: output.origin,
        width: output.width,
        height: output.height,
        classes,
        validity_file: validity
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string(),
        valid_fraction: n_valid as f64 / output.valid.len().max(1) as f64,
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(&legend_path)?), &legend)?;
    Ok(LabelFiles {
        labels: path.to_path_buf(),
        validity,
        legend: legend_path,
    })
}

/// Reads a label map written by [`write_label_map`] back into a
/// [`TiledOutput`], with its legend.
pub fn read_label_map(path: &Path) -> Result<(TiledOutput, LabelLegend), TileError> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("labels")
        .to_string();
    let legend: LabelLegend = serde_json::from_reader(BufReader::new(File::open(
        path.with_file_name(format!("{stem}.json")),
    )?))?;
    let dec = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = dec.read_info().map_err(PyramidError::from)?;
    let mut labels = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut labels).map_err(PyramidError::from)?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(
            PyramidError::Meta(format!("{} is not an 8-bit indexed png", path.display())).into(),
        );
    }
    labels.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    if (w, h) != (legend.width, legend.height) {
        return Err(PyramidError::Meta(format!(
            "{} is {w}x{h}, legend says {}x{}",
            path.display(),
            legend.width,
            legend.height
        ))
        .into());
    }
    let (_, _, valid) = crate::pyramid::read_png(&path.with_file_name(&legend.validity_file), 1)?;
    let valid: Vec<bool> = valid.into_iter().map(|v| v > 127).collect();
    if valid.len() != labels.len() {
        return Err(PyramidError::Meta("validity map size differs from label map".into()).into());
    }
    if legend.scale == 0 {
        return Err(PyramidError::Meta("legend scale must be positive".into()).into());
    }
    let output = TiledOutput {
        width: w,
        height: h,
        origin: legend.origin,
        scale: legend.scale,
        labels,
        valid,
    };
    Ok((output, legend))
}
