//! Raster image loading and saving as f64 tensors in [0, 1].

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Load a raster image as [c, h, w] with values in [0, 1]. Grayscale
/// files produce one channel, color files three.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = ImageReader::open(path)?
        .decode()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(match img {
        DynamicImage::ImageLuma8(g) => gray_to_tensor(&g),
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            let (w, h) = (w as usize, h as usize);
            let mut data = vec![0.0; 3 * h * w];
            for (x, y, p) in rgb.enumerate_pixels() {
                let (x, y) = (x as usize, y as usize);
                for c in 0..3 {
                    data[c * h * w + y * w + x] = p.0[c] as f64 / 255.0;
                }
            }
            Tensor::new(vec![3, h, w], data)?
        }
    })
}

fn gray_to_tensor(g: &GrayImage) -> Tensor {
    let (w, h) = g.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; h * w];
    for (x, y, p) in g.enumerate_pixels() {
        data[y as usize * w + x as usize] = p.0[0] as f64 / 255.0;
    }
    Tensor::new(vec![1, h, w], data).expect("consistent dims")
}

/// Mean over channels, producing [1, h, w]. One-channel input passes
/// through unchanged.
pub fn to_gray(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Data(format!("expected [c, h, w] image, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if c == 1 {
        return Ok(img.clone());
    }
    let mut data = vec![0.0; h * w];
    for ch in 0..c {
        for i in 0..h * w {
            data[i] += img.data()[ch * h * w + i] / c as f64;
        }
    }
    Tensor::new(vec![1, h, w], data)
}

/// Save a [1, h, w] or [h, w] tensor as an 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    let (h, w) = match s {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => return Err(Error::Data(format!("expected grayscale image, got {other:?}"))),
    };
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = img.data()[y * w + x].clamp(0.0, 1.0);
            out.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    out.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
