//! Procedural two-domain face generator.
//!
//! Faces are Gaussian blobs at a symmetric landmark template under a
//! per-sample similarity jitter. Each action unit, when positive, adds a
//! truncated horizontal bar at a fixed anchor landmark, so positive and
//! negative samples differ only inside that bar's support. The two
//! domains differ purely in background statistics: a smooth low-frequency
//! wash for the source, high-frequency stripes for the target. All
//! landmark coordinates and labels in the emitted manifests are exact by
//! construction.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::autodiff::Tensor;
use crate::data::image_io::save_gray_png;
use crate::data::manifest::Domain;
use crate::error::{Error, Result};

/// The landmark branch pools five times, so images must be at least 2^5.
pub const MIN_SYNTH_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub size: usize,
    pub n_land: usize,
    pub n_au: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub n_eval_source: usize,
    pub n_eval_target: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 64,
            n_land: 5,
            n_au: 2,
            n_source: 200,
            n_target: 200,
            n_eval_source: 40,
            n_eval_target: 40,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_SYNTH_SIZE {
            return Err(Error::Config(format!(
                "image size {} is below the five-pool minimum of {MIN_SYNTH_SIZE}",
                self.size
            )));
        }
        if self.n_land < 2 {
            return Err(Error::Config("need at least the two eye landmarks".into()));
        }
        if self.n_au == 0 {
            return Err(Error::Config("need at least one action unit".into()));
        }
        if self.n_source == 0 || self.n_target == 0 {
            return Err(Error::Config("both training domains need at least one sample".into()));
        }
        Ok(())
    }

    /// Per-unit occurrence probabilities, spread over [0.35, 0.65].
    pub fn au_probabilities(&self) -> Vec<f64> {
        (0..self.n_au)
            .map(|i| {
                if self.n_au == 1 {
                    0.5
                } else {
                    0.35 + 0.3 * i as f64 / (self.n_au - 1) as f64
                }
            })
            .collect()
    }
}

/// Symmetric landmark template: eyes first, then mirrored pairs walking
/// down the face, with a centerline point absorbing an odd remainder.
/// Returns normalized positions and the mirror swap table.
pub fn face_template(n_land: usize) -> (Vec<(f64, f64)>, Vec<usize>) {
    let mut pos = vec![(0.35, 0.38), (0.65, 0.38)];
    let mut swap = vec![1, 0];
    let mut level = 0usize;
    while pos.len() < n_land {
        let y = 0.52 + 0.10 * (level % 4) as f64;
        let r = 0.10 + 0.04 * (level / 4) as f64;
        let k = pos.len();
        if k + 1 < n_land {
            pos.push((0.5 - r, y));
            pos.push((0.5 + r, y));
            swap.push(k + 1);
            swap.push(k);
        } else {
            pos.push((0.5, y));
            swap.push(k);
        }
        level += 1;
    }
    (pos, swap)
}

/// Background parameters drawn once per sample.
#[derive(Debug, Clone)]
enum Background {
    /// Low-frequency wash: frequencies below ~1.5 cycles per image.
    Smooth { fx: f64, fy: f64, phase: f64 },
    /// High-frequency stripes at an arbitrary orientation.
    Stripes { cycles: f64, angle: f64, phase: f64 },
}

impl Background {
    fn draw(domain: Domain, rng: &mut ChaCha20Rng) -> Self {
        match domain {
            Domain::Source => Background::Smooth {
                fx: rng.gen_range(0.6..1.4),
                fy: rng.gen_range(0.6..1.4),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            },
            Domain::Target => Background::Stripes {
                cycles: rng.gen_range(7.0..11.0),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            },
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        match self {
            Background::Smooth { fx, fy, phase } => {
                0.30 + 0.18 * (std::f64::consts::TAU * (fx * x + fy * y) + phase).sin()
            }
            Background::Stripes { cycles, angle, phase } => {
                let t = x * angle.cos() + y * angle.sin();
                0.30 + 0.18 * (std::f64::consts::TAU * cycles * t + phase).sin()
            }
        }
    }
}

/// One generated sample before quantization.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: Tensor,
    pub landmarks: Vec<f64>,
    pub au_labels: Vec<u8>,
    pub domain: Domain,
}

/// Blob width in normalized units for a given image size.
pub fn blob_sigma(size: usize) -> f64 {
    (size as f64 / 22.0).max(1.6) / size as f64
}

/// Anchor landmark index for an action unit's bar.
pub fn au_anchor(i: usize, n_land: usize) -> usize {
    (2 + i) % n_land
}

/// Bar center offset below its anchor, in normalized units.
pub fn au_offset(size: usize) -> f64 {
    2.4 * blob_sigma(size)
}

fn render(
    size: usize,
    landmarks: &[f64],
    au_labels: &[u8],
    background: &Background,
) -> Tensor {
    let sigma = blob_sigma(size);
    let n_land = landmarks.len() / 2;
    let mut data = vec![0.0; size * size];
    let bar_dx = 2.0 * sigma;
    let bar_dy = 0.5 * sigma;
    for iy in 0..size {
        for ix in 0..size {
            let x = (ix as f64 + 0.5) / size as f64;
            let y = (iy as f64 + 0.5) / size as f64;
            let mut v = background.at(x, y);
            for k in 0..n_land {
                let dx = x - landmarks[2 * k];
                let dy = y - landmarks[2 * k + 1];
                let amp = if k < 2 { 0.85 } else { 0.55 };
                v += amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
            for (i, &label) in au_labels.iter().enumerate() {
                if label == 0 {
                    continue;
                }
                let a = au_anchor(i, n_land);
                let cx = landmarks[2 * a];
                let cy = landmarks[2 * a + 1] + au_offset(size);
                let dx = (x - cx) / bar_dx;
                let dy = (y - cy) / bar_dy;
                let q = dx * dx + dy * dy;
                // Hard truncation keeps the pattern's support strictly
                // local, so label toggles change nothing outside it.
                if q <= 25.0 {
                    v += 0.70 * (-q / 2.0).exp();
                }
            }
            data[iy * size + ix] = v.clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![1, size, size], data).expect("consistent dims")
}

/// Generate one sample. Labels are drawn per unit from the spec's
/// occurrence probabilities; geometry gets a bounded similarity jitter.
pub fn synth_sample(spec: &SynthSpec, domain: Domain, rng: &mut ChaCha20Rng) -> SynthSample {
    let (template, _) = face_template(spec.n_land);
    let theta: f64 = rng.gen_range(-0.15..0.15);
    let scale = rng.gen_range(0.9..1.1);
    let tx = rng.gen_range(-0.04..0.04);
    let ty = rng.gen_range(-0.04..0.04);
    let (sin, cos) = theta.sin_cos();
    let mut landmarks = Vec::with_capacity(2 * spec.n_land);
    for &(px, py) in &template {
        let (ux, uy) = (px - 0.5, py - 0.5);
        let rx = scale * (cos * ux - sin * uy);
        let ry = scale * (sin * ux + cos * uy);
        let jx = rng.gen_range(-0.008..0.008);
        let jy = rng.gen_range(-0.008..0.008);
        landmarks.push(0.5 + rx + tx + jx);
        landmarks.push(0.5 + ry + ty + jy);
    }
    let probs = spec.au_probabilities();
    let au_labels: Vec<u8> = probs.iter().map(|&p| u8::from(rng.gen_bool(p))).collect();
    let background = Background::draw(domain, rng);
    let image = render(spec.size, &landmarks, &au_labels, &background);
    SynthSample { image, landmarks, au_labels, domain }
}

/// Render a face with explicit geometry and labels over a seeded
/// background, for tests that need the same face with different labels.
pub fn render_probe(
    size: usize,
    landmarks: &[f64],
    au_labels: &[u8],
    domain: Domain,
    bg_seed: u64,
) -> Tensor {
    let mut rng = ChaCha20Rng::seed_from_u64(bg_seed);
    let background = Background::draw(domain, &mut rng);
    render(size, landmarks, au_labels, &background)
}

/// Mean absolute finite-difference gradient over the four corner patches,
/// which hold background only. Stripes light this up, smooth washes do
/// not; it is the feature the domain-separability probe classifies on.
pub fn corner_gradient_energy(image: &Tensor) -> f64 {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let patch = (h / 8).max(2);
    let data = image.data();
    let mut total = 0.0;
    let mut count = 0usize;
    for &(y0, x0) in &[
        (0, 0),
        (0, w - patch),
        (h - patch, 0),
        (h - patch, w - patch),
    ] {
        for y in y0..y0 + patch {
            for x in x0..x0 + patch {
                if x + 1 < x0 + patch {
                    total += (data[y * w + x + 1] - data[y * w + x]).abs();
                    count += 1;
                }
                if y + 1 < y0 + patch {
                    total += (data[(y + 1) * w + x] - data[y * w + x]).abs();
                    count += 1;
                }
            }
        }
    }
    total / count.max(1) as f64
}

pub struct SynthOutput {
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
}

fn manifest_header(spec: &SynthSpec, swap: &[usize]) -> String {
    let join =
        |v: Vec<usize>| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
    let mut out = String::new();
    let _ = writeln!(out, "@n_land {}", spec.n_land);
    let _ = writeln!(out, "@n_au {}", spec.n_au);
    let _ = writeln!(out, "@train_subset {}", join((0..spec.n_land).collect()));
    let _ = writeln!(out, "@flip_swap {}", join(swap.to_vec()));
    let _ = writeln!(out, "@left_eye 0");
    let _ = writeln!(out, "@right_eye 1");
    out
}

fn record_line(path: &str, sample: &SynthSample, with_labels: bool) -> String {
    let mut line = format!("{path} {}", sample.domain.tag());
    for v in &sample.landmarks {
        let _ = write!(line, " {v}");
    }
    if with_labels {
        for l in &sample.au_labels {
            let _ = write!(line, " {l}");
        }
    } else {
        line.push_str(" -");
    }
    line.push('\n');
    line
}

/// Generate the full dataset on disk: PNG images plus a training manifest
/// (target labels withheld) and a held-out evaluation manifest (labels on
/// both domains). Deterministic in the seed, including file bytes.
pub fn synth_dataset(spec: &SynthSpec, seed: u64, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    let (_, swap) = face_template(spec.n_land);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    std::fs::create_dir_all(out_dir.join("img"))?;

    let mut train_text = manifest_header(spec, &swap);
    let mut eval_text = manifest_header(spec, &swap);

    let splits: [(&str, Domain, usize, bool, bool); 4] = [
        ("train_source", Domain::Source, spec.n_source, true, true),
        ("train_target", Domain::Target, spec.n_target, true, false),
        ("eval_source", Domain::Source, spec.n_eval_source, false, true),
        ("eval_target", Domain::Target, spec.n_eval_target, false, true),
    ];
    for (tag, domain, count, is_train, with_labels) in splits {
        for i in 0..count {
            let sample = synth_sample(spec, domain, &mut rng);
            let rel = format!("img/{tag}_{i:04}.png");
            save_gray_png(&out_dir.join(&rel), &sample.image)?;
            let line = record_line(&rel, &sample, with_labels);
            if is_train {
                train_text.push_str(&line);
            } else {
                eval_text.push_str(&line);
            }
        }
    }

    let train_manifest = out_dir.join("train.manifest");
    let eval_manifest = out_dir.join("eval.manifest");
    std::fs::write(&train_manifest, train_text)?;
    std::fs::write(&eval_manifest, eval_text)?;
    Ok(SynthOutput { train_manifest, eval_manifest })
}
