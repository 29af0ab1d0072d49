//! Face alignment by similarity transform.
//!
//! The transform is solved in the complex plane: mapping the two eye
//! centers onto fixed canonical positions determines rotation, uniform
//! scale, and translation in one division. The image is resampled
//! bilinearly with edge clamping and the landmarks are mapped by the
//! same transform, so image and coordinates stay consistent by
//! construction.

pub use num_complex::Complex64;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::data::manifest::Manifest;

/// Canonical eye-center fractions of the output square.
pub const CANON_LEFT: (f64, f64) = (0.30, 0.35);
pub const CANON_RIGHT: (f64, f64) = (0.70, 0.35);

#[derive(Debug, Clone)]
pub struct AlignSpec {
    pub out_size: usize,
    pub left_eye: Vec<usize>,
    pub right_eye: Vec<usize>,
}

impl AlignSpec {
    pub fn new(out_size: usize, left_eye: Vec<usize>, right_eye: Vec<usize>) -> Self {
        AlignSpec { out_size, left_eye, right_eye }
    }

    pub fn from_manifest(m: &Manifest, out_size: usize) -> Self {
        AlignSpec { out_size, left_eye: m.left_eye.clone(), right_eye: m.right_eye.clone() }
    }
}

fn eye_center_px(landmarks: &[f64], eye: &[usize], w: f64, h: f64) -> Complex64 {
    let n = eye.len() as f64;
    let mut c = Complex64::new(0.0, 0.0);
    for &i in eye {
        c += Complex64::new(landmarks[2 * i] * w, landmarks[2 * i + 1] * h) / n;
    }
    c
}

/// Sample a [c, h, w] image at a continuous pixel position, bilinear with
/// edge clamping. Positions use the corner convention: (0, 0) is the top
/// left image corner and pixel centers sit at half-integers.
pub fn sample_bilinear(img: &Tensor, ch: usize, x: f64, y: f64) -> f64 {
    let s = img.shape();
    let (h, w) = (s[1] as isize, s[2] as isize);
    let plane = &img.data()[ch * (h * w) as usize..(ch + 1) * (h * w) as usize];
    let u = x - 0.5;
    let v = y - 0.5;
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let clamp = |i: isize, n: isize| i.clamp(0, n - 1) as usize;
    let (x0i, y0i) = (x0 as isize, y0 as isize);
    let at = |xi: isize, yi: isize| plane[clamp(yi, h) * w as usize + clamp(xi, w)];
    let top = at(x0i, y0i) * (1.0 - fx) + at(x0i + 1, y0i) * fx;
    let bot = at(x0i, y0i + 1) * (1.0 - fx) + at(x0i + 1, y0i + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Resample `img` under the similarity `T(z) = a z + b` (input pixel
/// coordinates to output pixel coordinates) onto an `out` square.
pub fn warp_similarity(img: &Tensor, a: Complex64, b: Complex64, out: usize) -> Result<Tensor> {
    if a.norm() < 1e-12 {
        return Err(Error::Data("similarity transform collapses the image".into()));
    }
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Data(format!("expected [c, h, w] image, got {s:?}")));
    }
    let c = s[0];
    let mut data = vec![0.0; c * out * out];
    for ch in 0..c {
        for yo in 0..out {
            for xo in 0..out {
                let zo = Complex64::new(xo as f64 + 0.5, yo as f64 + 0.5);
                let zi = (zo - b) / a;
                data[ch * out * out + yo * out + xo] = sample_bilinear(img, ch, zi.re, zi.im);
            }
        }
    }
    Tensor::new(vec![c, out, out], data)
}

/// Align a face image so its eye centers land on the canonical positions
/// of a square output. Returns the resampled image, the landmarks mapped
/// by the same transform (normalized to the output), and the new
/// normalized inter-ocular distance.
pub fn align_face(
    image: &Tensor,
    landmarks: &[f64],
    spec: &AlignSpec,
) -> Result<(Tensor, Vec<f64>, f64)> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Data(format!("expected [c, h, w] image, got {s:?}")));
    }
    let (h, w) = (s[1] as f64, s[2] as f64);
    let n_land = landmarks.len() / 2;
    for idx in [&spec.left_eye, &spec.right_eye] {
        if idx.is_empty() || idx.iter().any(|&i| i >= n_land) {
            return Err(Error::Data("eye index list is empty or out of range".into()));
        }
    }

    let e_l = eye_center_px(landmarks, &spec.left_eye, w, h);
    let e_r = eye_center_px(landmarks, &spec.right_eye, w, h);
    let span = e_r - e_l;
    if span.norm() < 1e-6 {
        return Err(Error::Data("eye centers coincide; cannot derive similarity".into()));
    }

    let out = spec.out_size as f64;
    let c_l = Complex64::new(CANON_LEFT.0 * out, CANON_LEFT.1 * out);
    let c_r = Complex64::new(CANON_RIGHT.0 * out, CANON_RIGHT.1 * out);
    let a = (c_r - c_l) / span;
    let b = c_l - a * e_l;

    let aligned = warp_similarity(image, a, b, spec.out_size)?;
    let mut mapped = Vec::with_capacity(landmarks.len());
    for i in 0..n_land {
        let z = Complex64::new(landmarks[2 * i] * w, landmarks[2 * i + 1] * h);
        let t = a * z + b;
        mapped.push(t.re / out);
        mapped.push(t.im / out);
    }
    let inter_ocular = (c_r - c_l).norm() / out;
    Ok((aligned, mapped, inter_ocular))
}
