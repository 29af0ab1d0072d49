//! Line-delimited dataset manifests.
//!
//! A manifest holds one record per line: image path, domain tag, the full
//! set of normalized landmark coordinates, and either per-unit AU labels
//! or a single `-` when labels are absent. Header directives starting
//! with `@` fix the landmark convention: counts, the training subset,
//! the horizontal flip swap table, and the eye index lists used for
//! alignment. Defaults cover the common 68-point convention.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::{class_weights_from_rates, LandmarkTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// One dataset entry. Landmarks are normalized to the stored image size
/// and cover the full convention (not just the training subset).
#[derive(Debug, Clone)]
pub struct Record {
    pub path: PathBuf,
    pub domain: Domain,
    pub landmarks: Vec<f64>,
    pub au_labels: Option<Vec<u8>>,
}

/// Statistics over the source records, fixed once at load time.
#[derive(Debug, Clone)]
pub struct ManifestStats {
    /// Occurrence rate per action unit, always strictly inside (0, 1).
    pub au_rates: Vec<f64>,
    /// Mean normalized coordinates over the full landmark set.
    pub mean_face: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    /// Directory record paths are resolved against.
    pub dir: PathBuf,
    pub n_land: usize,
    pub n_au: usize,
    /// Indices of the landmarks used as training targets.
    pub train_subset: Vec<usize>,
    /// Involution mapping each landmark to its horizontal mirror.
    pub flip_swap: Vec<usize>,
    pub left_eye: Vec<usize>,
    pub right_eye: Vec<usize>,
    pub records: Vec<Record>,
    /// Present when at least one source record exists.
    pub stats: Option<ManifestStats>,
    /// Non-fatal findings (duplicate paths, smoothed rates).
    pub warnings: Vec<String>,
}

pub const DEFAULT_LEFT_EYE_68: [usize; 6] = [36, 37, 38, 39, 40, 41];
pub const DEFAULT_RIGHT_EYE_68: [usize; 6] = [42, 43, 44, 45, 46, 47];

/// The 49 interior landmarks: the full set minus the 17 contour points
/// and the two inner mouth corners.
pub fn default_train_subset_68() -> Vec<usize> {
    (17..68).filter(|&i| i != 60 && i != 64).collect()
}

/// Standard left/right mirror pairs of the 68-point convention.
pub fn default_flip_swap_68() -> Vec<usize> {
    let pairs: [(usize, usize); 29] = [
        (0, 16),
        (1, 15),
        (2, 14),
        (3, 13),
        (4, 12),
        (5, 11),
        (6, 10),
        (7, 9),
        (17, 26),
        (18, 25),
        (19, 24),
        (20, 23),
        (21, 22),
        (31, 35),
        (32, 34),
        (36, 45),
        (37, 44),
        (38, 43),
        (39, 42),
        (40, 47),
        (41, 46),
        (48, 54),
        (49, 53),
        (50, 52),
        (55, 59),
        (56, 58),
        (60, 64),
        (61, 63),
        (65, 67),
    ];
    let mut swap: Vec<usize> = (0..68).collect();
    for (a, b) in pairs {
        swap[a] = b;
        swap[b] = a;
    }
    swap
}

fn err_at(line: usize, detail: impl Into<String>) -> Error {
    Error::Manifest { line, detail: detail.into() }
}

fn parse_indices(line: usize, key: &str, parts: &[&str]) -> Result<Vec<usize>> {
    if parts.is_empty() {
        return Err(err_at(line, format!("directive '@{key}' needs at least one index")));
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| err_at(line, format!("directive '@{key}': bad index '{p}'")))
        })
        .collect()
}

struct Directives {
    n_land: Option<usize>,
    n_au: Option<usize>,
    train_subset: Option<Vec<usize>>,
    flip_swap: Option<Vec<usize>>,
    left_eye: Option<Vec<usize>>,
    right_eye: Option<Vec<usize>>,
}

/// Parse manifest text. `dir` becomes the base directory for record paths.
pub fn parse_manifest(text: &str, dir: &Path) -> Result<Manifest> {
    let mut d = Directives {
        n_land: None,
        n_au: None,
        train_subset: None,
        flip_swap: None,
        left_eye: None,
        right_eye: None,
    };
    let mut records: Vec<Record> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut seen_paths: BTreeSet<String> = BTreeSet::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('@') {
            if !records.is_empty() {
                return Err(err_at(lineno, "directives must appear before the first record"));
            }
            let mut it = rest.split_whitespace();
            let key = it.next().unwrap_or("");
            let args: Vec<&str> = it.collect();
            match key {
                "n_land" | "n_au" => {
                    if args.len() != 1 {
                        return Err(err_at(lineno, format!("'@{key}' takes one integer")));
                    }
                    let v: usize = args[0]
                        .parse()
                        .map_err(|_| err_at(lineno, format!("'@{key}': bad count '{}'", args[0])))?;
                    if v == 0 {
                        return Err(err_at(lineno, format!("'@{key}' must be positive")));
                    }
                    if key == "n_land" {
                        d.n_land = Some(v);
                    } else {
                        d.n_au = Some(v);
                    }
                }
                "train_subset" => d.train_subset = Some(parse_indices(lineno, key, &args)?),
                "flip_swap" => d.flip_swap = Some(parse_indices(lineno, key, &args)?),
                "left_eye" => d.left_eye = Some(parse_indices(lineno, key, &args)?),
                "right_eye" => d.right_eye = Some(parse_indices(lineno, key, &args)?),
                other => return Err(err_at(lineno, format!("unknown directive '@{other}'"))),
            }
            continue;
        }

        let n_land = d.n_land.unwrap_or(68);
        let n_au = d.n_au.unwrap_or(6);
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let want_coords = 2 * n_land;
        if tokens.len() < 2 + want_coords + 1 {
            return Err(err_at(
                lineno,
                format!(
                    "expected path, domain, {want_coords} coordinates and labels, got {} fields",
                    tokens.len()
                ),
            ));
        }
        let path = tokens[0].to_string();
        let domain = match tokens[1] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(err_at(lineno, format!("unknown domain tag '{other}'"))),
        };
        let mut landmarks = Vec::with_capacity(want_coords);
        for t in &tokens[2..2 + want_coords] {
            let v: f64 = t
                .parse()
                .map_err(|_| err_at(lineno, format!("bad coordinate '{t}'")))?;
            if !v.is_finite() {
                return Err(err_at(lineno, format!("non-finite coordinate '{t}'")));
            }
            landmarks.push(v);
        }
        let label_tokens = &tokens[2 + want_coords..];
        let au_labels = if label_tokens == ["-"] {
            None
        } else {
            if label_tokens.len() != n_au {
                return Err(err_at(
                    lineno,
                    format!("expected {n_au} labels or '-', got {}", label_tokens.len()),
                ));
            }
            let mut labels = Vec::with_capacity(n_au);
            for t in label_tokens {
                match *t {
                    "0" => labels.push(0),
                    "1" => labels.push(1),
                    other => {
                        return Err(err_at(lineno, format!("label must be 0 or 1, got '{other}'")))
                    }
                }
            }
            Some(labels)
        };
        if domain == Domain::Source && au_labels.is_none() {
            return Err(err_at(lineno, "source records must carry action-unit labels"));
        }
        if !seen_paths.insert(path.clone()) {
            warnings.push(format!("line {lineno}: duplicate image path '{path}' (both kept)"));
        }
        records.push(Record { path: PathBuf::from(path), domain, landmarks, au_labels });
    }

    let n_land = d.n_land.unwrap_or(68);
    let n_au = d.n_au.unwrap_or(6);
    let train_subset = match d.train_subset {
        Some(s) => s,
        None if n_land == 68 => default_train_subset_68(),
        None => (0..n_land).collect(),
    };
    let flip_swap = match d.flip_swap {
        Some(s) => s,
        None if n_land == 68 => default_flip_swap_68(),
        None => (0..n_land).collect(),
    };
    let (left_eye, right_eye) = match (d.left_eye, d.right_eye) {
        (Some(l), Some(r)) => (l, r),
        (None, None) if n_land == 68 => {
            (DEFAULT_LEFT_EYE_68.to_vec(), DEFAULT_RIGHT_EYE_68.to_vec())
        }
        _ => {
            return Err(err_at(
                0,
                "manifests with a non-standard landmark count must declare both \
                 @left_eye and @right_eye",
            ))
        }
    };

    for (what, idx) in [
        ("train_subset", &train_subset),
        ("left_eye", &left_eye),
        ("right_eye", &right_eye),
    ] {
        if idx.is_empty() {
            return Err(err_at(0, format!("'@{what}' must not be empty")));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n_land) {
            return Err(err_at(0, format!("'@{what}' index {bad} out of range for {n_land}")));
        }
    }
    if flip_swap.len() != n_land {
        return Err(err_at(
            0,
            format!("'@flip_swap' must list {n_land} entries, got {}", flip_swap.len()),
        ));
    }
    if let Some(bad) = flip_swap.iter().find(|&&i| i >= n_land) {
        return Err(err_at(0, format!("'@flip_swap' index {bad} out of range for {n_land}")));
    }
    if (0..n_land).any(|i| flip_swap[flip_swap[i]] != i) {
        return Err(err_at(0, "'@flip_swap' must be an involution"));
    }

    for r in &records {
        debug_assert_eq!(r.landmarks.len(), 2 * n_land);
        if let Some(labels) = &r.au_labels {
            if labels.len() != n_au {
                return Err(err_at(0, "record label count drifted from '@n_au'"));
            }
        }
    }

    let stats = compute_stats(&records, n_land, n_au, &mut warnings);

    Ok(Manifest {
        dir: dir.to_path_buf(),
        n_land,
        n_au,
        train_subset,
        flip_swap,
        left_eye,
        right_eye,
        records,
        stats,
        warnings,
    })
}

fn compute_stats(
    records: &[Record],
    n_land: usize,
    n_au: usize,
    warnings: &mut Vec<String>,
) -> Option<ManifestStats> {
    let sources: Vec<&Record> = records.iter().filter(|r| r.domain == Domain::Source).collect();
    if sources.is_empty() {
        return None;
    }
    let n = sources.len() as f64;
    let mut mean_face = vec![0.0; 2 * n_land];
    let mut counts = vec![0usize; n_au];
    for r in &sources {
        for (m, v) in mean_face.iter_mut().zip(&r.landmarks) {
            *m += v / n;
        }
        if let Some(labels) = &r.au_labels {
            for (c, &l) in counts.iter_mut().zip(labels) {
                *c += l as usize;
            }
        }
    }
    let mut au_rates = Vec::with_capacity(n_au);
    for (i, &k) in counts.iter().enumerate() {
        let raw = k as f64 / n;
        if raw <= 0.0 || raw >= 1.0 {
            // Keep rates inside (0, 1) so inverse-frequency weights stay
            // finite; half a count stands in for the unseen outcome.
            let smoothed = (k as f64).max(0.5).min(n - 0.5) / n;
            warnings.push(format!(
                "action unit {i} occurs in {k}/{} source records; rate smoothed to {smoothed:.6}",
                sources.len()
            ));
            au_rates.push(smoothed);
        } else {
            au_rates.push(raw);
        }
    }
    if mean_face.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        warnings.push("mean face falls outside the unit square".to_string());
    }
    Some(ManifestStats { au_rates, mean_face })
}

/// Read and parse a manifest file.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    parse_manifest(&text, &dir)
}

impl Manifest {
    /// Resolve a record's image path against the manifest directory.
    pub fn image_path(&self, record: &Record) -> PathBuf {
        self.dir.join(&record.path)
    }

    /// Pick the training-subset coordinates out of a full landmark vector.
    pub fn subset_coords(&self, full: &[f64]) -> Result<Vec<f64>> {
        if full.len() != 2 * self.n_land {
            return Err(Error::Data(format!(
                "expected {} coordinates, got {}",
                2 * self.n_land,
                full.len()
            )));
        }
        let mut out = Vec::with_capacity(2 * self.train_subset.len());
        for &i in &self.train_subset {
            out.push(full[2 * i]);
            out.push(full[2 * i + 1]);
        }
        Ok(out)
    }

    fn eye_center(&self, full: &[f64], eye: &[usize]) -> (f64, f64) {
        let n = eye.len() as f64;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for &i in eye {
            cx += full[2 * i] / n;
            cy += full[2 * i + 1] / n;
        }
        (cx, cy)
    }

    pub fn eye_centers(&self, full: &[f64]) -> ((f64, f64), (f64, f64)) {
        (self.eye_center(full, &self.left_eye), self.eye_center(full, &self.right_eye))
    }

    /// Normalized inter-ocular distance; degenerate eyes are rejected.
    pub fn inter_ocular(&self, full: &[f64]) -> Result<f64> {
        let ((lx, ly), (rx, ry)) = self.eye_centers(full);
        let d = ((rx - lx).powi(2) + (ry - ly).powi(2)).sqrt();
        if d < 1e-9 {
            return Err(Error::Data("eye centers coincide; inter-ocular distance is zero".into()));
        }
        Ok(d)
    }

    /// Training target for a full landmark vector: subset coordinates plus
    /// the inter-ocular distance.
    pub fn landmark_target(&self, full: &[f64]) -> Result<LandmarkTarget> {
        LandmarkTarget::new(self.subset_coords(full)?, self.inter_ocular(full)?)
    }

    /// The canonical mean face as a training target, from source stats.
    pub fn mean_face_target(&self) -> Result<LandmarkTarget> {
        let stats = self
            .stats
            .as_ref()
            .ok_or_else(|| Error::Data("no source records; mean face unavailable".into()))?;
        self.landmark_target(&stats.mean_face)
    }

    /// Inverse-frequency class weights from the source occurrence rates.
    pub fn class_weights(&self) -> Result<Vec<f64>> {
        let stats = self
            .stats
            .as_ref()
            .ok_or_else(|| Error::Data("no source records; class weights unavailable".into()))?;
        class_weights_from_rates(&stats.au_rates)
    }

    /// Render the manifest back to its text form, headers first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "@n_land {}", self.n_land);
        let _ = writeln!(out, "@n_au {}", self.n_au);
        let join = |v: &[usize]| {
            v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
        };
        let _ = writeln!(out, "@train_subset {}", join(&self.train_subset));
        let _ = writeln!(out, "@flip_swap {}", join(&self.flip_swap));
        let _ = writeln!(out, "@left_eye {}", join(&self.left_eye));
        let _ = writeln!(out, "@right_eye {}", join(&self.right_eye));
        for r in &self.records {
            let _ = write!(out, "{} {}", r.path.display(), r.domain.tag());
            for v in &r.landmarks {
                let _ = write!(out, " {v}");
            }
            match &r.au_labels {
                Some(labels) => {
                    for l in labels {
                        let _ = write!(out, " {l}");
                    }
                }
                None => {
                    let _ = write!(out, " -");
                }
            }
            let _ = writeln!(out);
        }
        out
    }
}
