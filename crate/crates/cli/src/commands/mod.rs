pub mod eval;
pub mod infer;
pub mod model;
pub mod pyramid;
pub mod shapes;
pub mod synth;
pub mod train;

use std::str::FromStr;

use anyhow::{bail, Context as _};
use hooknet_core::Rect;

/// Parses `x,y,w,h` in level-0 pixels.
pub fn parse_region(s: &str) -> anyhow::Result<Rect> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        bail!("region must be x,y,width,height, got {s:?}");
    }
    let x = i64::from_str(parts[0]).with_context(|| format!("region x {:?}", parts[0]))?;
    let y = i64::from_str(parts[1]).with_context(|| format!("region y {:?}", parts[1]))?;
    let w = usize::from_str(parts[2]).with_context(|| format!("region width {:?}", parts[2]))?;
    let h = usize::from_str(parts[3]).with_context(|| format!("region height {:?}", parts[3]))?;
    Ok(Rect::new(x, y, w, h))
}

/// Parses `x,y` in level-0 pixels.
pub fn parse_point(s: &str) -> anyhow::Result<(i64, i64)> {
    match s.split_once(',') {
        Some((x, y)) => Ok((x.trim().parse()?, y.trim().parse()?)),
        None => bail!("point must be x,y, got {s:?}"),
    }
}
