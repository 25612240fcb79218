use std::path::PathBuf;

use anyhow::Context as _;
use clap::Subcommand;
use hooknet_core::pyramid::{extract_labeled_patch, load_meta, read_png, save_png};
use hooknet_core::{build_pyramid, load_pyramid, save_pyramid, LabelMask, RgbImage};
use serde_json::json;

use super::parse_point;
use crate::Context;

#[derive(Debug, Subcommand)]
pub enum PyramidCmd {
    /// Build a pyramid directory from a level-0 PNG and optional mask PNG.
    Build {
        #[arg(long)]
        image: PathBuf,
        /// Grey PNG of class indices, 0 meaning unlabeled.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Level-0 resolution in μm/px.
        #[arg(long, default_value_t = 0.5)]
        resolution: f64,
        #[arg(long, default_value_t = 5)]
        levels: usize,
        /// Names of classes 1..K, comma separated.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a pyramid's metadata and label histogram.
    Info { dir: PathBuf },
    /// Cut one patch out of a pyramid.
    Patch {
        dir: PathBuf,
        /// Level-0 center `x,y`.
        #[arg(long, allow_hyphen_values = true)]
        center: String,
        #[arg(long, default_value_t = 284)]
        size: usize,
        /// Resolution in μm/px; must match a level.
        #[arg(long, default_value_t = 0.5)]
        resolution: f64,
        /// RGB output; the mask patch goes to `<stem>.mask.png` when labeled.
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(ctx: &Context, cmd: PyramidCmd) -> anyhow::Result<()> {
    match cmd {
        PyramidCmd::Build {
            image,
            mask,
            resolution,
            levels,
            mut classes,
            out,
        } => {
            let (w, h, data) =
                read_png(&image, 3).with_context(|| format!("reading {}", image.display()))?;
            let img = build_pyramid(RgbImage::new(w, h, data)?, levels, resolution)?;
            let mask = match mask {
                Some(path) => {
                    let (mw, mh, data) = read_png(&path, 1)
                        .with_context(|| format!("reading {}", path.display()))?;
                    let top = data.iter().copied().max().unwrap_or(0) as usize;
                    if classes.is_empty() {
                        classes = (1..=top).map(|i| format!("class{i}")).collect();
                    }
                    anyhow::ensure!(classes.len() <= 255, "at most 255 classes");
                    Some(LabelMask::new(mw, mh, classes.len() as u8, data)?)
                }
                None => None,
            };
            let meta = save_pyramid(&out, &img, mask.as_ref(), classes.len() as u8, &classes)?;
            ctx.out.emit(&meta, || {
                format!(
                    "wrote {} ({}x{}, {} levels, {} classes)",
                    out.display(),
                    meta.width,
                    meta.height,
                    meta.levels.len(),
                    meta.num_classes
                )
            })
        }
        PyramidCmd::Info { dir } => {
            let meta = load_meta(&dir)?;
            let histogram = match &meta.mask_file {
                Some(file) => {
                    let (w, h, data) = read_png(&dir.join(file), 1)?;
                    Some(LabelMask::new(w, h, meta.num_classes, data)?.class_histogram())
                }
                None => None,
            };
            let record = json!({"meta": meta, "class_histogram": histogram});
            ctx.out.emit(&record, || {
                let mut s = format!(
                    "{}: {}x{} at {} μm/px, {} classes {:?}\n",
                    dir.display(),
                    meta.width,
                    meta.height,
                    meta.base_resolution_um,
                    meta.num_classes,
                    meta.class_names
                );
                for l in &meta.levels {
                    s += &format!(
                        "  level {}: {}x{} at {} μm/px ({})\n",
                        l.level, l.width, l.height, l.resolution_um, l.file
                    );
                }
                if let Some(hist) = &histogram {
                    s += &format!("  label histogram (0 = unlabeled): {hist:?}\n");
                }
                s
            })
        }
        PyramidCmd::Patch {
            dir,
            center,
            size,
            resolution,
            out,
        } => {
            let center = parse_point(&center)?;
            let (img, mask, _) = load_pyramid(&dir)?;
            let region = img.extract_patch(center, size, resolution)?;
            save_png(&out, region.width, region.height, 3, &region.pixels)?;
            let mut mask_file = None;
            if let Some(mask) = &mask {
                let patch = extract_labeled_patch(&img, mask, center, size, resolution)?;
                let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("patch");
                let path = out.with_file_name(format!("{stem}.mask.png"));
                save_png(&path, size, size, 1, &patch.mask)?;
                mask_file = Some(path);
            }
            let level = img.level_for_resolution(resolution)?;
            let record = json!({
                "center": center,
                "size": size,
                "resolution_um": resolution,
                "level": level,
                "valid_pixels": region.valid_count(),
                "image": out,
                "mask": mask_file,
            });
            ctx.out.emit(&record, || {
                format!(
                    "wrote {} ({size}x{size} at level {level}, {} of {} pixels inside the image)",
                    out.display(),
                    region.valid_count(),
                    size * size
                )
            })
        }
    }
}
