use std::path::Path;

use crate::error::{Error, Result};

/// `round(v * 255)` with halves rounded up, clamped to a byte.
pub fn to_byte(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn check_unit(values: &[f32], what: &str) -> Result<()> {
    match values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Config(format!("{what} value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Binary PGM of an `h x w` gate map.
pub fn mask_pgm(mask: &[f32], h: usize, w: usize) -> Result<Vec<u8>> {
    if mask.len() != h * w {
        return Err(Error::shape("mask_pgm", &[mask.len()], &[h, w]));
    }
    check_unit(mask, "mask")?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Binary PPM of a `[3, h, w]` observation, greyed out (blended halfway
/// with 0.5) wherever the gate is below 0.5.
pub fn overlay_ppm(obs: &[f32], mask: &[f32], h: usize, w: usize) -> Result<Vec<u8>> {
    if obs.len() != 3 * h * w || mask.len() != h * w {
        return Err(Error::shape("overlay_ppm", &[obs.len(), mask.len()], &[3, h, w]));
    }
    check_unit(obs, "observation")?;
    check_unit(mask, "mask")?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (i, &m) in mask.iter().enumerate() {
        for c in 0..3 {
            let v = obs[c * h * w + i];
            out.push(to_byte(if m < 0.5 { 0.5 * v + 0.25 } else { v }));
        }
    }
    Ok(out)
}

pub fn render_mask_pgm(mask: &[f32], h: usize, w: usize, path: &Path) -> Result<()> {
    std::fs::write(path, mask_pgm(mask, h, w)?).map_err(|e| Error::io(path, e))
}

pub fn render_overlay_ppm(obs: &[f32], mask: &[f32], h: usize, w: usize, path: &Path) -> Result<()> {
    std::fs::write(path, overlay_ppm(obs, mask, h, w)?).map_err(|e| Error::io(path, e))
}
