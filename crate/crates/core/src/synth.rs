//! Deterministic "context versus detail" worlds.
//!
//! Four classes: A = ring lumens, B = round fields outside rings, C = ring
//! walls, D = background. Lumens and background carry the same solid dots;
//! fields carry hollow dots that blur to the same colour as a solid dot. A is told
//! from D only by large-scale context (inside a ring or not), B from D only
//! by fine detail (hollow or solid).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pyramid::{build_pyramid, LabelMask, PyramidError, PyramidImage, RgbImage};

pub const CLASS_A: u8 = 1;
pub const CLASS_B: u8 = 2;
pub const CLASS_C: u8 = 3;
pub const CLASS_D: u8 = 4;
pub const NUM_CLASSES: u8 = 4;

/// Side in pixels of the square blocks dropped by [`sparsify_mask`].
pub const SPARSE_BLOCK: usize = 32;

pub fn class_names() -> Vec<String> {
    ["ring_lumen", "hollow_field", "ring_wall", "background"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

const BACKGROUND: [u8; 3] = [236, 212, 226];
const DOT: [u8; 3] = [150, 88, 160];
const WALL: [u8; 3] = [176, 70, 110];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("canvas {width}x{height} px cannot hold a ring of {ring_px} px")]
    CanvasTooSmall {
        width: usize,
        height: usize,
        ring_px: usize,
    },
    #[error("ring diameter {ring_um} um fits inside the {fov_um} um target view")]
    RingInsideTargetView { ring_um: f64, fov_um: f64 },
    #[error("dot diameter {dot_um} um is resolvable at {context} um/px")]
    DotVisibleInContext { dot_um: f64, context: f64 },
    #[error("invalid world parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub width_px: usize,
    pub height_px: usize,
    /// Level-0 resolution in μm/px.
    pub base_resolution: f64,
    pub levels: usize,
    /// Outer ring diameter.
    pub ring_diameter_um: f64,
    pub wall_thickness_um: f64,
    pub dot_diameter_um: f64,
    /// Mean spacing of the jittered dot lattice.
    pub dot_pitch_um: f64,
    /// Diameter of the dot fields outside rings.
    pub field_diameter_um: f64,
    /// Share of the canvas covered by rings (wall plus lumen).
    pub ring_fraction: f64,
    /// Share of the canvas covered by dot fields outside rings.
    pub field_fraction: f64,
    /// Clearance between placed discs.
    pub gap_um: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width_px: 6144,
            height_px: 6144,
            base_resolution: 0.5,
            levels: 5,
            ring_diameter_um: 400.0,
            wall_thickness_um: 24.0,
            dot_diameter_um: 6.0,
            dot_pitch_um: 10.0,
            field_diameter_um: 400.0,
            ring_fraction: 0.2,
            field_fraction: 0.2,
            gap_um: 20.0,
        }
    }
}

impl WorldSpec {
    fn px(&self, um: f64) -> f64 {
        um / self.base_resolution
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let positive = [
            ("base_resolution", self.base_resolution),
            ("ring_diameter_um", self.ring_diameter_um),
            ("wall_thickness_um", self.wall_thickness_um),
            ("dot_diameter_um", self.dot_diameter_um),
            ("dot_pitch_um", self.dot_pitch_um),
            ("field_diameter_um", self.field_diameter_um),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SynthError::Parameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if 2.0 * self.wall_thickness_um >= self.ring_diameter_um {
            return Err(SynthError::Parameter(
                "wall thicker than ring radius".into(),
            ));
        }
        if self.dot_pitch_um < self.dot_diameter_um {
            return Err(SynthError::Parameter("dot pitch below dot diameter".into()));
        }
        for (name, v) in [
            ("ring_fraction", self.ring_fraction),
            ("field_fraction", self.field_fraction),
        ] {
            if !(0.0..0.5).contains(&v) {
                return Err(SynthError::Parameter(format!(
                    "{name} must lie in [0, 0.5), got {v}"
                )));
            }
        }
        if self.levels == 0 {
            return Err(SynthError::Parameter("levels must be at least 1".into()));
        }
        let ring_px = self.px(self.ring_diameter_um).ceil() as usize;
        if self.width_px < 2 * ring_px || self.height_px < 2 * ring_px {
            return Err(SynthError::CanvasTooSmall {
                width: self.width_px,
                height: self.height_px,
                ring_px,
            });
        }
        Ok(())
    }

    /// Checks that rings exceed the target field of view and dots vanish at
    /// the context resolution.
    pub fn check_resolutions(
        &self,
        input_size: usize,
        target: f64,
        context: f64,
    ) -> Result<(), SynthError> {
        let fov_um = input_size as f64 * target;
        if self.ring_diameter_um <= fov_um {
            return Err(SynthError::RingInsideTargetView {
                ring_um: self.ring_diameter_um,
                fov_um,
            });
        }
        if self.dot_diameter_um >= 2.0 * context {
            return Err(SynthError::DotVisibleInContext {
                dot_um: self.dot_diameter_um,
                context,
            });
        }
        Ok(())
    }

    /// Expected pixel share of classes A, B, C, D.
    pub fn expected_shares(&self) -> [f64; 4] {
        let r = self.ring_diameter_um / 2.0;
        let lumen = ((r - self.wall_thickness_um) / r).powi(2);
        let a = self.ring_fraction * lumen;
        let c = self.ring_fraction * (1.0 - lumen);
        let b = self.field_fraction;
        [a, b, c, 1.0 - a - b - c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Disc {
    x: f64,
    y: f64,
    r: f64,
    ring: bool,
}

/// Random sequential placement of non-overlapping discs until each kind
/// reaches its area share.
fn place_discs(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Vec<Disc> {
    let (w, h) = (spec.width_px as f64, spec.height_px as f64);
    let gap = spec.px(spec.gap_um);
    let mut discs: Vec<Disc> = Vec::new();
    let kinds = [
        (
            true,
            spec.px(spec.ring_diameter_um) / 2.0,
            spec.ring_fraction,
        ),
        (
            false,
            spec.px(spec.field_diameter_um) / 2.0,
            spec.field_fraction,
        ),
    ];
    for (ring, r, fraction) in kinds {
        if r * 2.0 >= w.min(h) {
            continue;
        }
        let goal = fraction * w * h;
        let mut area = 0.0;
        let mut attempts = 0;
        while area + 0.5 * std::f64::consts::PI * r * r <= goal && attempts < 20_000 {
            attempts += 1;
            let x = rng.gen_range(r..w - r);
            let y = rng.gen_range(r..h - r);
            let clear = discs
                .iter()
                .all(|d| (d.x - x).hypot(d.y - y) >= d.r + r + gap);
            if clear {
                discs.push(Disc { x, y, r, ring });
                area += std::f64::consts::PI * r * r;
            }
        }
    }
    discs
}

fn stamp(
    canvas: &mut RgbImage,
    cx: f64,
    cy: f64,
    radius: f64,
    hole: f64,
    outer: [u8; 3],
    inner: [u8; 3],
) {
    let x0 = (cx - radius).floor().max(0.0) as usize;
    let y0 = (cy - radius).floor().max(0.0) as usize;
    let x1 = ((cx + radius).ceil() as usize).min(canvas.width);
    let y1 = ((cy + radius).ceil() as usize).min(canvas.height);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
            if d < hole {
                canvas.put(x, y, inner);
            } else if d < radius {
                canvas.put(x, y, outer);
            }
        }
    }
}

/// Pixels a dot of `radius` (and hole `hole`) covers at an integer centre.
fn dot_area(radius: f64, hole: f64) -> f64 {
    let r = radius.ceil() as i64;
    let mut n = 0usize;
    for y in -r..r {
        for x in -r..r {
            let d = (x as f64 + 0.5).hypot(y as f64 + 0.5);
            n += usize::from(d < radius && d >= hole);
        }
    }
    n as f64
}

/// Ring geometry and colour of a hollow dot that matches a solid dot of
/// `radius` in total darkness and in its second moment, so the two blur to
/// the same thing once the dot shrinks below a pixel.
fn hollow_dot(radius: f64) -> (f64, f64, [u8; 3]) {
    // Ring second moment (R² + H²)/2 with H = R/2 equals the disc's r²/2.
    let outer = radius / 1.25f64.sqrt();
    let hole = outer / 2.0;
    let ratio = dot_area(radius, 0.0) / dot_area(outer, hole);
    let mut rim = [0u8; 3];
    for c in 0..3 {
        let dark = (BACKGROUND[c] as f64 - DOT[c] as f64) * ratio;
        rim[c] = (BACKGROUND[c] as f64 - dark).round().clamp(0.0, 255.0) as u8;
    }
    (outer, hole, rim)
}

/// Renders a world and its dense level-0 mask.
pub fn generate_world(spec: &WorldSpec) -> Result<(PyramidImage, LabelMask), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let discs = place_discs(spec, &mut rng);
    let (w, h) = (spec.width_px, spec.height_px);
    let wall = spec.px(spec.wall_thickness_um);

    let mut mask = vec![CLASS_D; w * h];
    for d in &discs {
        let x0 = (d.x - d.r).floor().max(0.0) as usize;
        let y0 = (d.y - d.r).floor().max(0.0) as usize;
        let x1 = ((d.x + d.r).ceil() as usize).min(w);
        let y1 = ((d.y + d.r).ceil() as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let dist = (x as f64 + 0.5 - d.x).hypot(y as f64 + 0.5 - d.y);
                if dist < d.r {
                    mask[y * w + x] = match (d.ring, dist >= d.r - wall) {
                        (true, true) => CLASS_C,
                        (true, false) => CLASS_A,
                        (false, _) => CLASS_B,
                    };
                }
            }
        }
    }

    let mut canvas = RgbImage::filled(w, h, BACKGROUND);
    let radius = spec.px(spec.dot_diameter_um) / 2.0;
    let (outer, hole, rim) = hollow_dot(radius);
    let pitch = spec.px(spec.dot_pitch_um);
    let jitter = (pitch - 2.0 * radius).max(0.0) / 2.0;
    let (nx, ny) = (
        (w as f64 / pitch) as usize + 1,
        (h as f64 / pitch) as usize + 1,
    );
    for j in 0..ny {
        for i in 0..nx {
            let cx = ((i as f64 + 0.5) * pitch + rng.gen_range(-1.0..=1.0) * jitter).round();
            let cy = ((j as f64 + 0.5) * pitch + rng.gen_range(-1.0..=1.0) * jitter).round();
            let (px, py) = (cx as usize, cy as usize);
            if px >= w || py >= h {
                continue;
            }
            match mask[py * w + px] {
                CLASS_A | CLASS_D => stamp(&mut canvas, cx, cy, radius, 0.0, DOT, DOT),
                CLASS_B => stamp(&mut canvas, cx, cy, outer, hole, rim, BACKGROUND),
                _ => {}
            }
        }
    }
    for (px, &m) in canvas.data.chunks_exact_mut(3).zip(&mask) {
        if m == CLASS_C {
            px.copy_from_slice(&WALL);
        }
    }

    let img = build_pyramid(canvas, spec.levels, spec.base_resolution)?;
    let mask = LabelMask::new(w, h, NUM_CLASSES, mask)?;
    Ok((img, mask))
}

/// Zeroes whole `SPARSE_BLOCK` squares of `mask` so that about
/// `keep_fraction` of the annotated blocks survive. Labels are never changed.
pub fn sparsify_mask(
    mask: &LabelMask,
    keep_fraction: f64,
    seed: u64,
) -> Result<LabelMask, SynthError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(SynthError::Parameter(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    if keep_fraction == 1.0 {
        return Ok(mask.clone());
    }
    let (bw, bh) = (
        mask.width.div_ceil(SPARSE_BLOCK),
        mask.height.div_ceil(SPARSE_BLOCK),
    );
    let annotated: Vec<usize> = (0..bw * bh)
        .filter(|&b| block_pixels(mask, b, bw).any(|i| mask.data[i] != 0))
        .collect();
    let keep = (keep_fraction * annotated.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped = vec![true; annotated.len()];
    for i in sample(&mut rng, annotated.len(), keep).iter() {
        dropped[i] = false;
    }
    let mut out = mask.clone();
    for (&b, _) in annotated.iter().zip(&dropped).filter(|(_, &d)| d) {
        for i in block_pixels(mask, b, bw).collect::<Vec<_>>() {
            out.data[i] = 0;
        }
    }
    Ok(out)
}

fn block_pixels(
    mask: &LabelMask,
    block: usize,
    blocks_per_row: usize,
) -> impl Iterator<Item = usize> + '_ {
    let (bx, by) = (
        block % blocks_per_row * SPARSE_BLOCK,
        block / blocks_per_row * SPARSE_BLOCK,
    );
    let (x1, y1) = (
        (bx + SPARSE_BLOCK).min(mask.width),
        (by + SPARSE_BLOCK).min(mask.height),
    );
    (by..y1).flat_map(move |y| (bx..x1).map(move |x| y * mask.width + x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldSpec {
        WorldSpec {
            seed: 3,
            width_px: 1024,
            height_px: 1024,
            levels: 3,
            ring_diameter_um: 160.0,
            wall_thickness_um: 12.0,
            field_diameter_um: 160.0,
            gap_um: 8.0,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn defaults_satisfy_resolution_rules() {
        let spec = WorldSpec::default();
        spec.validate().unwrap();
        spec.check_resolutions(284, 0.5, 8.0).unwrap();
        assert!(matches!(
            spec.check_resolutions(284, 2.0, 8.0),
            Err(SynthError::RingInsideTargetView { .. })
        ));
        assert!(matches!(
            spec.check_resolutions(284, 0.5, 2.0),
            Err(SynthError::DotVisibleInContext { .. })
        ));
    }

    #[test]
    fn canvas_too_small() {
        let spec = WorldSpec {
            width_px: 1000,
            ..WorldSpec::default()
        };
        assert!(matches!(
            generate_world(&spec),
            Err(SynthError::CanvasTooSmall { .. })
        ));
    }

    #[test]
    fn deterministic_under_seed() {
        let (a, ma) = generate_world(&small()).unwrap();
        let (b, mb) = generate_world(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let (c, _) = generate_world(&WorldSpec { seed: 4, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn class_shares_follow_density() {
        let spec = WorldSpec {
            width_px: 2048,
            height_px: 2048,
            ..small()
        };
        let (_, mask) = generate_world(&spec).unwrap();
        let hist = mask.class_histogram();
        let total = (spec.width_px * spec.height_px) as f64;
        assert_eq!(hist[0], 0);
        for (c, want) in spec.expected_shares().iter().enumerate() {
            let got = hist[c + 1] as f64 / total;
            assert!(
                (got - want).abs() <= 0.2 * want,
                "class {}: {got} vs {want}",
                c + 1
            );
        }
    }

    #[test]
    fn lumen_and_background_dots_identical() {
        let spec = small();
        let (img, mask) = generate_world(&spec).unwrap();
        let level0 = &img.levels[0];
        let r = (spec.dot_diameter_um / spec.base_resolution / 2.0) as usize;
        // Dot centers are pixel corners whose 2r x 2r window is entirely A or B.
        let window = |x: usize, y: usize| -> Vec<[u8; 3]> {
            (y - r..y + r)
                .flat_map(|yy| (x - r..x + r).map(move |xx| (xx, yy)))
                .map(|(xx, yy)| level0.pixel(xx, yy))
                .collect()
        };
        let slot = |class: u8| match class {
            CLASS_A => Some(0),
            CLASS_D => Some(1),
            _ => None,
        };
        let mut found: [Option<Vec<[u8; 3]>>; 2] = [None, None];
        for y in r + 1..spec.height_px - r - 1 {
            for x in r + 1..spec.width_px - r - 1 {
                let class = mask.data[y * spec.width_px + x];
                let Some(k) = slot(class).filter(|&k| found[k].is_none()) else {
                    continue;
                };
                // A dot centred at (x, y) has its four central pixels dark and
                // the pixels just outside its radius light.
                let w = window(x, y);
                let dark = w.iter().filter(|p| **p == DOT).count();
                let corners_light = [(x - r - 1, y), (x + r, y), (x, y - r - 1), (x, y + r)]
                    .iter()
                    .all(|&(xx, yy)| level0.pixel(xx, yy) == BACKGROUND);
                if corners_light
                    && dark * 10 > w.len() * 7
                    && (y - r..y + r).all(|yy| {
                        (x - r..x + r).all(|xx| mask.data[yy * spec.width_px + xx] == class)
                    })
                {
                    found[k] = Some(w);
                }
            }
            if found.iter().all(Option::is_some) {
                break;
            }
        }
        let [a, b] = found;
        let (a, b) = (
            a.expect("dot inside a ring"),
            b.expect("dot in the background"),
        );
        assert_eq!(
            a.iter().filter(|p| **p == DOT).count(),
            b.iter().filter(|p| **p == DOT).count()
        );
    }

    #[test]
    fn hollow_dots_match_solid_colour_in_context() {
        let spec = WorldSpec {
            width_px: 4096,
            height_px: 4096,
            levels: 5,
            ..small()
        };
        let (img, mask) = generate_world(&spec).unwrap();
        let coarse = &img.levels[4];
        let mut sums = [[0f64; 3]; 2];
        let mut squares = [0f64; 2];
        let mut counts = [0f64; 2];
        for y in 0..coarse.height {
            for x in 0..coarse.width {
                let class = mask.get(x as i64 * 16 + 8, y as i64 * 16 + 8);
                let bucket = match class {
                    CLASS_B => 0,
                    CLASS_D => 1,
                    _ => continue,
                };
                let p = coarse.pixel(x, y);
                for c in 0..3 {
                    sums[bucket][c] += p[c] as f64;
                }
                squares[bucket] += (p[0] as f64).powi(2);
                counts[bucket] += 1.0;
            }
        }
        for c in 0..3 {
            let (b, d) = (sums[0][c] / counts[0], sums[1][c] / counts[1]);
            assert!((b - d).abs() < 3.0, "channel {c}: {b} vs {d}");
        }
        // Same spread too, so the coarse texture carries no hint.
        let spread = |k: usize| (squares[k] / counts[k] - (sums[k][0] / counts[k]).powi(2)).sqrt();
        assert!(
            (spread(0) / spread(1) - 1.0).abs() < 0.03,
            "{} vs {}",
            spread(0),
            spread(1)
        );
    }

    #[test]
    fn sparsify_keeps_labels() {
        let (_, mask) = generate_world(&small()).unwrap();
        assert_eq!(sparsify_mask(&mask, 1.0, 1).unwrap(), mask);
        let half = sparsify_mask(&mask, 0.5, 1).unwrap();
        let labeled = half.data.iter().filter(|&&v| v != 0).count() as f64;
        let total = mask.data.len() as f64;
        assert!((labeled / total - 0.5).abs() <= 0.05);
        assert!(half
            .data
            .iter()
            .zip(&mask.data)
            .all(|(&s, &d)| s == 0 || s == d));
        assert!(sparsify_mask(&mask, 0.0, 1).is_err());
    }
}
