//! Image grids for visual inspection of training runs.

use synthrefine::imageops::resize;
use synthrefine::{ImageTensor, Result};

/// Pixels of white between tiles and around the border.
pub const GAP: usize = 2;

/// Lay out rows of tiles, each resized to `tile` x `tile`. Missing tiles
/// stay white.
pub fn mosaic<const C: usize>(rows: &[[Option<&ImageTensor>; C]], tile: usize) -> Result<ImageTensor> {
    let h = GAP + rows.len() * (tile + GAP);
    let w = GAP + C * (tile + GAP);
    let mut data = vec![1.0f32; 3 * h * w];
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let Some(image) = cell else { continue };
            let t = resize(image, tile, tile)?;
            let (y0, x0) = (GAP + r * (tile + GAP), GAP + c * (tile + GAP));
            for ch in 0..3 {
                for y in 0..tile {
                    for x in 0..tile {
                        data[ch * h * w + (y0 + y) * w + x0 + x] = t.get(ch, y, x);
                    }
                }
            }
        }
    }
    ImageTensor::new(h, w, data)
}
