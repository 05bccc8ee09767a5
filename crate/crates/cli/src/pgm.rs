//! Binary PGM image grids.

use gpcs_core::data::denormalize_pixel;
use gpcs_core::Tensor;

use crate::error::{CliError, Result};

/// Separator grey level.
pub const SEPARATOR: u8 = 128;

/// Tiles the rows of `images` (each `rows x cols`, pixels in `[-1, 1]`)
/// row-major into a grid `grid_cols` wide, with 1-pixel separators.
pub fn pgm_grid(images: &[&[f64]], rows: usize, cols: usize, grid_cols: usize) -> Result<Vec<u8>> {
    if images.is_empty() || rows == 0 || cols == 0 || grid_cols == 0 {
        return Err(CliError::Invalid("grid needs at least one non-empty image and one column".into()));
    }
    if let Some(bad) = images.iter().find(|im| im.len() != rows * cols) {
        return Err(CliError::Invalid(format!(
            "image with {} pixels in a grid of {rows}x{cols} images",
            bad.len()
        )));
    }
    let tiles_x = grid_cols.min(images.len());
    let tiles_y = images.len().div_ceil(tiles_x);
    let width = tiles_x * cols + tiles_x - 1;
    let height = tiles_y * rows + tiles_y - 1;
    let mut pix = vec![SEPARATOR; width * height];
    for (i, im) in images.iter().enumerate() {
        let (ty, tx) = (i / tiles_x, i % tiles_x);
        let (oy, ox) = (ty * (rows + 1), tx * (cols + 1));
        for r in 0..rows {
            for c in 0..cols {
                pix[(oy + r) * width + ox + c] = denormalize_pixel(im[r * cols + c]);
            }
        }
    }
    let mut out = format!("P5 {width} {height} 255\n").into_bytes();
    out.extend_from_slice(&pix);
    Ok(out)
}

/// Grid of the rows of a `[count x rows*cols]` tensor.
pub fn tensor_grid(images: &Tensor, rows: usize, cols: usize, grid_cols: usize) -> Result<Vec<u8>> {
    let list: Vec<&[f64]> = (0..images.rows()).map(|i| images.row_slice(i)).collect();
    pgm_grid(&list, rows, cols, grid_cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_image_header() {
        let im = vec![0.0; 784];
        let out = pgm_grid(&[&im], 28, 28, 8).unwrap();
        assert!(out.starts_with(b"P5 28 28 255\n"));
        assert_eq!(out.len(), 13 + 784);
    }

    #[test]
    fn sixty_four_tiles() {
        let im = vec![1.0; 784];
        let list: Vec<&[f64]> = (0..64).map(|_| im.as_slice()).collect();
        let out = pgm_grid(&list, 28, 28, 8).unwrap();
        let w = 8 * 28 + 7;
        let header = format!("P5 {w} {w} 255\n");
        assert!(out.starts_with(header.as_bytes()));
        let body = &out[header.len()..];
        assert_eq!(body.len(), w * w);
        assert_eq!(body[28], SEPARATOR);
        assert_eq!(body[0], 255);
    }

    #[test]
    fn black_image_is_zero_bytes() {
        let im = vec![-1.0; 9];
        let out = pgm_grid(&[&im], 3, 3, 1).unwrap();
        assert!(out[out.len() - 9..].iter().all(|&b| b == 0));
    }

    #[test]
    fn mixed_sizes_are_rejected() {
        let (a, b) = (vec![0.0; 4], vec![0.0; 6]);
        assert!(pgm_grid(&[&a, &b], 2, 2, 2).is_err());
    }
}
