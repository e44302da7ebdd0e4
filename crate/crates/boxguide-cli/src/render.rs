//! Grayscale heatmap rendering: 8-bit binary portable graymaps (PGM, P5)
//! with layout box outlines burned in at full white.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use boxguide::grid::{rasterize_mask, LayoutSpec, TokenAttention};

/// Writes `attention` as a P5 PGM, linearly scaled so the maximum value maps
/// to 255, with the outline cells of every layout box forced to 255.
pub fn render_heatmap(
    attention: &TokenAttention,
    layout: &LayoutSpec,
    path: &Path,
) -> Result<()> {
    let values = attention.values();
    let (h, w) = (values.nrows(), values.ncols());
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let mut pixels: Vec<u8> = values
        .iter()
        .map(|v| {
            if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    for entry in &layout.tokens {
        let mask = rasterize_mask(&entry.box_, h, w)?;
        for ((r, c), m) in mask.values().indexed_iter() {
            if *m < 0.5 {
                continue;
            }
            let on_edge = r == 0
                || c == 0
                || r == h - 1
                || c == w - 1
                || !mask.contains(r - 1, c)
                || !mask.contains(r + 1, c)
                || !mask.contains(r, c - 1)
                || !mask.contains(r, c + 1);
            if on_edge {
                pixels[r * w + c] = 255;
            }
        }
    }
    let mut out = Vec::with_capacity(pixels.len() + 32);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.extend_from_slice(&pixels);
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
