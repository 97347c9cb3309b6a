//! PNG figure rendering: generation trace panels, sample grids, and
//! reconstruction rows with context points circled.
//!
//! Rendering clamps to [0, 1] and upscales by [`TILE_SCALE`]; tests assert on
//! dumped arrays, never on encoded bytes.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::generative::GenerationTrace;
use crate::tensor::Tensor;

/// Nearest-neighbour upscale factor for every tile.
pub const TILE_SCALE: usize = 8;
/// Padding frame around and between tiles, in output pixels.
pub const TILE_PAD: usize = 2;

const PAD_COLOR: Rgb<u8> = Rgb([90, 90, 90]);

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Clamp and upscale a C×H×W tensor (C in {1, 3}) to an RGB tile.
pub fn tile(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(Error::contract("renderable tensors must be 1- or 3-channel maps"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut img = RgbImage::new((w * TILE_SCALE) as u32, (h * TILE_SCALE) as u32);
    for y in 0..h {
        for x in 0..w {
            let px = if c == 1 {
                let g = to_u8(t.data()[y * w + x]);
                Rgb([g, g, g])
            } else {
                Rgb([
                    to_u8(t.data()[y * w + x]),
                    to_u8(t.data()[(h + y) * w + x]),
                    to_u8(t.data()[(2 * h + y) * w + x]),
                ])
            };
            for sy in 0..TILE_SCALE {
                for sx in 0..TILE_SCALE {
                    img.put_pixel((x * TILE_SCALE + sx) as u32, (y * TILE_SCALE + sy) as u32, px);
                }
            }
        }
    }
    Ok(img)
}

/// Binary mask as a strictly two-colour tile.
pub fn mask_tile(mask: &Tensor) -> Result<RgbImage> {
    if !mask.is_binary() {
        return Err(Error::contract("mask tile needs a binary mask"));
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    tile(&Tensor::from_vec(&[1, h, w], mask.data().to_vec())?)
}

/// Lay tiles out in a grid with padding; `cols` tiles per row.
pub fn compose_grid(tiles: &[RgbImage], cols: usize) -> Result<RgbImage> {
    if tiles.is_empty() || cols == 0 {
        return Err(Error::contract("grid needs tiles and a positive column count"));
    }
    let tw = tiles[0].width() as usize;
    let th = tiles[0].height() as usize;
    let rows = tiles.len().div_ceil(cols);
    let width = cols * tw + (cols + 1) * TILE_PAD;
    let height = rows * th + (rows + 1) * TILE_PAD;
    let mut out = RgbImage::from_pixel(width as u32, height as u32, PAD_COLOR);
    for (i, t) in tiles.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let ox = TILE_PAD + c * (tw + TILE_PAD);
        let oy = TILE_PAD + r * (th + TILE_PAD);
        for y in 0..th {
            for x in 0..tw {
                out.put_pixel((ox + x) as u32, (oy + y) as u32, *t.get_pixel(x as u32, y as u32));
            }
        }
    }
    Ok(out)
}

/// Four-panel strip for one generation trace: mask, context values, imputed
/// targets, final image.
pub fn trace_panels(trace: &GenerationTrace) -> Result<RgbImage> {
    let tiles = vec![
        mask_tile(&trace.mask)?,
        tile(&trace.context_values)?,
        tile(&trace.target_values)?,
        tile(&trace.image)?,
    ];
    compose_grid(&tiles, 4)
}

/// Ring overlay marking one context pixel on an upscaled tile. The colour is
/// picked per circle for contrast against the local patch.
fn draw_circle(img: &mut RgbImage, cy: usize, cx: usize) {
    let r = (TILE_SCALE / 2) as f64;
    let center = |v: usize| (v * TILE_SCALE + TILE_SCALE / 2) as f64;
    let (fy, fx) = (center(cy), center(cx));
    // Local luminance decides black-on-bright or white-on-dark.
    let probe = img.get_pixel((fx as u32).min(img.width() - 1), (fy as u32).min(img.height() - 1));
    let lum = 0.299 * probe[0] as f64 + 0.587 * probe[1] as f64 + 0.114 * probe[2] as f64;
    let color = if lum > 127.0 { Rgb([0, 0, 0]) } else { Rgb([255, 255, 255]) };
    let (h, w) = (img.height() as i64, img.width() as i64);
    for dy in -(r as i64 + 1)..=(r as i64 + 1) {
        for dx in -(r as i64 + 1)..=(r as i64 + 1) {
            let y = fy as i64 + dy;
            let x = fx as i64 + dx;
            if y < 0 || x < 0 || y >= h || x >= w {
                continue;
            }
            let d = ((dy * dy + dx * dx) as f64).sqrt();
            if (d - r).abs() <= 0.8 {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// Two-row figure: originals with their context points circled on top,
/// reconstructions underneath.
pub fn reconstruction_rows(
    originals: &[Tensor],
    masks: &[Tensor],
    reconstructions: &[Tensor],
) -> Result<RgbImage> {
    if originals.len() != masks.len() || originals.len() != reconstructions.len() {
        return Err(Error::contract("row lengths must match"));
    }
    let mut tiles = Vec::with_capacity(2 * originals.len());
    for (orig, mask) in originals.iter().zip(masks.iter()) {
        let mut t = tile(orig)?;
        let (h, w) = (mask.shape()[0], mask.shape()[1]);
        for y in 0..h {
            for x in 0..w {
                if mask.data()[y * w + x] == 1.0 {
                    draw_circle(&mut t, y, x);
                }
            }
        }
        tiles.push(t);
    }
    for recon in reconstructions {
        tiles.push(tile(recon)?);
    }
    compose_grid(&tiles, originals.len())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Ingestion {
        path: path.display().to_string(),
        reason: format!("png encode failed: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_dimensions_and_clamping() {
        let t = Tensor::from_vec(&[1, 2, 3], vec![-0.5, 0.0, 0.5, 1.0, 1.5, 0.25]).unwrap();
        let img = tile(&t).unwrap();
        assert_eq!(img.width() as usize, 3 * TILE_SCALE);
        assert_eq!(img.height() as usize, 2 * TILE_SCALE);
        assert_eq!(img.get_pixel(0, 0)[0], 0); // clamped below
        assert_eq!(img.get_pixel((4 * TILE_SCALE) as u32, (TILE_SCALE) as u32)[0], 255);
    }

    #[test]
    fn mask_tile_two_colors() {
        let m = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let img = mask_tile(&m).unwrap();
        let mut colors: Vec<[u8; 3]> = img.pixels().map(|p| p.0).collect();
        colors.sort_unstable();
        colors.dedup();
        assert_eq!(colors.len(), 2);
        assert!(mask_tile(&Tensor::full(&[2, 2], 0.5)).is_err());
    }

    #[test]
    fn grid_geometry() {
        let t = Tensor::zeros(&[1, 4, 4]);
        let tiles: Vec<RgbImage> = (0..5).map(|_| tile(&t).unwrap()).collect();
        let g = compose_grid(&tiles, 2).unwrap();
        let tile_px = 4 * TILE_SCALE;
        assert_eq!(g.width() as usize, 2 * tile_px + 3 * TILE_PAD);
        assert_eq!(g.height() as usize, 3 * tile_px + 4 * TILE_PAD);
    }

    #[test]
    fn reconstruction_layout_and_circles() {
        let orig = vec![Tensor::full(&[1, 4, 4], 0.9); 3];
        let mut mask = Tensor::zeros(&[4, 4]);
        mask.data_mut()[5] = 1.0;
        let masks = vec![mask; 3];
        let recon = vec![Tensor::full(&[1, 4, 4], 0.2); 3];
        let img = reconstruction_rows(&orig, &masks, &recon).unwrap();
        let tile_px = 4 * TILE_SCALE;
        assert_eq!(img.width() as usize, 3 * tile_px + 4 * TILE_PAD);
        assert_eq!(img.height() as usize, 2 * tile_px + 3 * TILE_PAD);
        // Bright background gets a dark ring: some black pixels in tile 0.
        let dark = img.pixels().filter(|p| p.0 == [0, 0, 0]).count();
        assert!(dark > 0);
    }
}
