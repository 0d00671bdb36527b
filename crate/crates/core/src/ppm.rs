use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::tensor::Scalar;
use crate::trainer::dataset::DatasetSpec;

/// Encodes a batch as one binary PPM grid with `cols` images per row and a
/// one-pixel black gutter. Single-channel images become gray; three-channel
/// images map to RGB. Pixels are de-normalized and clamped to `[0, 255]`.
pub fn encode_grid<T: Scalar>(images: &ImageBatch<T>, spec: &DatasetSpec, cols: usize) -> Result<Vec<u8>> {
    if images.channels != 1 && images.channels != 3 {
        return Err(Error::Shape(format!("PPM output needs 1 or 3 channels, got {}", images.channels)));
    }
    if images.batch == 0 || cols == 0 {
        return Err(Error::Shape("empty image grid".into()));
    }
    let cols = cols.min(images.batch);
    let rows = images.batch.div_ceil(cols);
    let (h, w) = (images.height, images.width);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut px = vec![0u8; gh * gw * 3];
    for b in 0..images.batch {
        let (oy, ox) = ((b / cols) * (h + 1) + 1, (b % cols) * (w + 1) + 1);
        let img = images.image(b);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let src = if images.channels == 1 { 0 } else { ch };
                    let v = spec.denormalize(img[(src * h + y) * w + x].as_f64());
                    let byte = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                    px[((oy + y) * gw + ox + x) * 3 + ch] = byte;
                }
            }
        }
    }
    let mut out = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

pub fn write_grid<T: Scalar>(images: &ImageBatch<T>, spec: &DatasetSpec, cols: usize, path: &Path) -> Result<()> {
    std::fs::write(path, encode_grid(images, spec, cols)?)?;
    Ok(())
}
