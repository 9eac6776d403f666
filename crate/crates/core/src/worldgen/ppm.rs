//! Binary PPM (P6) dumps for eyeballing clips.

use std::path::Path;

use crate::error::{invalid, Result};
use crate::numerics::Tensor;

/// Lay out clips `[F, 3, H, W]` as rows of frames separated by a 1 pixel gutter,
/// each pixel magnified `zoom` times.
pub fn grid(rows: &[&Tensor], zoom: usize) -> Result<(usize, usize, Vec<u8>)> {
    let first = rows.first().ok_or_else(|| invalid("ppm", "no clips to draw"))?;
    let shape = first.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(invalid("ppm", format!("expected [F, 3, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[2], shape[3]);
    let cols = rows.iter().map(|r| r.shape()[0]).max().unwrap_or(1);
    for r in rows {
        if r.rank() != 4 || r.shape()[1..] != shape[1..] {
            return Err(invalid("ppm", format!("clip shape {:?} differs from {:?}", r.shape(), shape)));
        }
    }
    let cell_w = w * zoom + 1;
    let cell_h = h * zoom + 1;
    let (width, height) = (cols * cell_w + 1, rows.len() * cell_h + 1);
    let mut px = vec![40u8; width * height * 3];
    let plane = h * w;
    for (ri, clip) in rows.iter().enumerate() {
        let d = clip.data();
        for f in 0..clip.shape()[0] {
            for y in 0..h * zoom {
                for x in 0..w * zoom {
                    let src = (y / zoom) * w + x / zoom;
                    let oy = 1 + ri * cell_h + y;
                    let ox = 1 + f * cell_w + x;
                    for c in 0..3 {
                        let v = d[(f * 3 + c) * plane + src];
                        px[(oy * width + ox) * 3 + c] = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                    }
                }
            }
        }
    }
    Ok((width, height, px))
}

pub fn write_grid(path: &Path, rows: &[&Tensor], zoom: usize) -> Result<()> {
    let (w, h, px) = grid(rows, zoom)?;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&px);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
