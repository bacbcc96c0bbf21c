//! Hyperspectral cubes: on-disk format, band normalization, patch windows and
//! train/test splits.
//!
//! A cube directory holds `manifest.json`, `values.bin` (little-endian `f32`,
//! row-major `H, W, D`) and `labels.bin` (little-endian `u16`, row-major
//! `H, W`). Label 0 marks an unlabeled pixel; classes are numbered `1..=Λ`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VALUES_FILE: &str = "values.bin";
pub const LABELS_FILE: &str = "labels.bin";

/// Patch size used throughout the experiments (5x5 neighbors).
pub const DEFAULT_PATCH_SIZE: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Row-major `H, W, D`.
    pub values: Vec<f32>,
    /// Row-major `H, W`; 0 = unlabeled.
    pub labels: Vec<u16>,
    pub class_count: u16,
    pub class_names: Vec<String>,
}

impl HsiCube {
    /// Builds a cube and checks every invariant: dimensions, finite values,
    /// labels in `0..=class_count` and one name per class.
    pub fn new(
        name: impl Into<String>,
        height: usize,
        width: usize,
        bands: usize,
        values: Vec<f32>,
        labels: Vec<u16>,
        class_count: u16,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let cube = HsiCube {
            name: name.into(),
            height,
            width,
            bands,
            values,
            labels,
            class_count,
            class_names,
        };
        cube.validate()?;
        Ok(cube)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::Validation(format!(
                "empty cube {}x{}x{}",
                self.height, self.width, self.bands
            )));
        }
        let pixels = self.height * self.width;
        if self.values.len() != pixels * self.bands {
            return Err(Error::Validation(format!(
                "values length {} != {}x{}x{}",
                self.values.len(),
                self.height,
                self.width,
                self.bands
            )));
        }
        if self.labels.len() != pixels {
            return Err(Error::Validation(format!(
                "labels length {} != {}x{}",
                self.labels.len(),
                self.height,
                self.width
            )));
        }
        if self.class_names.len() != self.class_count as usize {
            return Err(Error::Validation(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.class_count
            )));
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value at flat index {pos}"
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l > self.class_count) {
            return Err(Error::Validation(format!(
                "label {bad} outside 0..={}",
                self.class_count
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn spectrum(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.bands;
        &self.values[start..start + self.bands]
    }

    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Labeled pixel coordinates of `class`, in row-major order.
    pub fn pixels_of_class(&self, class: u16) -> Vec<(usize, usize)> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count as usize + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    fn check_bounds(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.height || col >= self.width {
            return Err(Error::Bounds {
                row,
                col,
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CubeManifest {
    #[serde(default)]
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub class_count: u16,
    pub class_names: Vec<String>,
    pub dtype: String,
    pub order: String,
    pub endianness: String,
}

impl CubeManifest {
    fn for_cube(cube: &HsiCube) -> Self {
        CubeManifest {
            name: cube.name.clone(),
            height: cube.height,
            width: cube.width,
            bands: cube.bands,
            class_count: cube.class_count,
            class_names: cube.class_names.clone(),
            dtype: "f32".into(),
            order: "row-major H,W,D".into(),
            endianness: "little".into(),
        }
    }
}

pub(crate) fn write_f32_le(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_u16_le(path: &Path, data: &[u16]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 2);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a raw little-endian `f32` payload and checks it holds `expected` values.
pub(crate) fn read_f32_le(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            msg: format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn read_u16_le(path: &Path, expected: usize) -> Result<Vec<u16>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 2 {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            msg: format!("expected {} bytes, found {}", expected * 2, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Format {
            path: path.to_path_buf(),
            msg: "file missing".into(),
        },
        _ => Error::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn save_cube(cube: &HsiCube, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join(MANIFEST_FILE), &CubeManifest::for_cube(cube))?;
    write_f32_le(&dir.join(VALUES_FILE), &cube.values)?;
    write_u16_le(&dir.join(LABELS_FILE), &cube.labels)
}

pub fn load_cube(dir: &Path) -> Result<HsiCube> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: CubeManifest = read_json(&manifest_path)?;
    let format_err = |msg: String| Error::Format {
        path: manifest_path.clone(),
        msg,
    };
    if manifest.dtype != "f32" {
        return Err(format_err(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    if manifest.endianness != "little" {
        return Err(format_err(format!(
            "unsupported endianness {:?}",
            manifest.endianness
        )));
    }
    if manifest.order != "row-major H,W,D" {
        return Err(format_err(format!("unsupported order {:?}", manifest.order)));
    }
    let pixels = manifest.height * manifest.width;
    let values = read_f32_le(&dir.join(VALUES_FILE), pixels * manifest.bands)?;
    let labels = read_u16_le(&dir.join(LABELS_FILE), pixels)?;
    let name = if manifest.name.is_empty() {
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    } else {
        manifest.name
    };
    HsiCube::new(
        name,
        manifest.height,
        manifest.width,
        manifest.bands,
        values,
        labels,
        manifest.class_count,
        manifest.class_names,
    )
}

/// Per-band min-max rescale to `[0, 1]` over the whole cube. Constant bands
/// map to zero.
pub fn normalize_bands(cube: &HsiCube) -> Result<HsiCube> {
    if cube.values.iter().any(|v| v.is_nan()) {
        return Err(Error::Validation("NaN in cube values".into()));
    }
    let d = cube.bands;
    let mut lo = vec![f32::INFINITY; d];
    let mut hi = vec![f32::NEG_INFINITY; d];
    for px in cube.values.chunks_exact(d) {
        for (b, &v) in px.iter().enumerate() {
            lo[b] = lo[b].min(v);
            hi[b] = hi[b].max(v);
        }
    }
    let mut values = cube.values.clone();
    for px in values.chunks_exact_mut(d) {
        for (b, v) in px.iter_mut().enumerate() {
            let range = hi[b] - lo[b];
            *v = if range > 0.0 {
                ((*v - lo[b]) / range).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    Ok(HsiCube {
        values,
        ..cube.clone()
    })
}

/// Maps a possibly out-of-range coordinate into `0..n` by mirror reflection
/// without repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// `s x s x d` window centered on `(row, col)`, row-major `(s, s, d)`, with
/// reflect padding past the borders.
pub fn extract_patch(cube: &HsiCube, row: usize, col: usize, s: usize) -> Result<Vec<f32>> {
    if s == 0 || s % 2 == 0 {
        return Err(Error::Argument(format!("patch size must be odd, got {s}")));
    }
    cube.check_bounds(row, col)?;
    let half = (s / 2) as isize;
    let d = cube.bands;
    let mut out = Vec::with_capacity(s * s * d);
    for dr in -half..=half {
        let r = reflect_index(row as isize + dr, cube.height);
        for dc in -half..=half {
            let c = reflect_index(col as isize + dc, cube.width);
            out.extend_from_slice(cube.spectrum(r, c));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    /// Row-major `(s, s, d)` window.
    pub x: Vec<f32>,
    /// Class label in `1..=Λ`.
    pub y: u16,
    /// Environment pseudo-class in `1..=K`; 0 before assignment.
    pub z: u16,
    pub row: usize,
    pub col: usize,
}

impl PatchSample {
    /// Spectrum of the center pixel of the window.
    pub fn center_spectrum(&self, bands: usize) -> &[f32] {
        let s2 = self.x.len() / bands;
        let center = s2 / 2;
        &self.x[center * bands..(center + 1) * bands]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    /// Uniformly sample `count` training pixels per class; every other
    /// labeled pixel becomes a test pixel.
    PerClass {
        counts: BTreeMap<u16, usize>,
        seed: u64,
    },
    Explicit {
        train: Vec<(usize, usize)>,
        test: Vec<(usize, usize)>,
        seed: u64,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SplitFile {
    Explicit {
        seed: u64,
        train: Vec<[usize; 2]>,
        test: Vec<[usize; 2]>,
    },
    PerClass {
        per_class_train: BTreeMap<String, usize>,
        seed: u64,
    },
}

// Training counts per class, Pavia University / Indian Pines / Houston2013.
const PAVIA_TRAIN: [usize; 9] = [548, 540, 392, 524, 265, 532, 375, 514, 231];
const INDIAN_PINES_TRAIN: [usize; 16] = [
    50, 50, 50, 50, 50, 50, 50, 50, 50, 50, 50, 50, 50, 15, 15, 15,
];
const HOUSTON2013_TRAIN: [usize; 15] = [
    198, 190, 192, 188, 186, 182, 196, 191, 193, 191, 181, 192, 184, 181, 187,
];

impl SplitSpec {
    pub fn per_class(counts: impl IntoIterator<Item = (u16, usize)>, seed: u64) -> Self {
        SplitSpec::PerClass {
            counts: counts.into_iter().collect(),
            seed,
        }
    }

    /// Same training count for every class `1..=class_count`.
    pub fn uniform(class_count: u16, per_class: usize, seed: u64) -> Self {
        Self::per_class((1..=class_count).map(|c| (c, per_class)), seed)
    }

    fn from_table(table: &[usize], seed: u64) -> Self {
        Self::per_class(
            table.iter().enumerate().map(|(i, &n)| (i as u16 + 1, n)),
            seed,
        )
    }

    pub fn pavia_university(seed: u64) -> Self {
        Self::from_table(&PAVIA_TRAIN, seed)
    }

    pub fn indian_pines(seed: u64) -> Self {
        Self::from_table(&INDIAN_PINES_TRAIN, seed)
    }

    pub fn houston2013(seed: u64) -> Self {
        Self::from_table(&HOUSTON2013_TRAIN, seed)
    }

    pub fn seed(&self) -> u64 {
        match self {
            SplitSpec::PerClass { seed, .. } | SplitSpec::Explicit { seed, .. } => *seed,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: SplitFile = read_json(path)?;
        Ok(match file {
            SplitFile::Explicit { seed, train, test } => SplitSpec::Explicit {
                train: train.into_iter().map(|[r, c]| (r, c)).collect(),
                test: test.into_iter().map(|[r, c]| (r, c)).collect(),
                seed,
            },
            SplitFile::PerClass {
                per_class_train,
                seed,
            } => {
                let mut counts = BTreeMap::new();
                for (k, v) in per_class_train {
                    let class: u16 = k.trim().parse().map_err(|_| Error::Format {
                        path: path.to_path_buf(),
                        msg: format!("class key {k:?} is not an integer"),
                    })?;
                    counts.insert(class, v);
                }
                SplitSpec::PerClass { counts, seed }
            }
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = match self {
            SplitSpec::Explicit { train, test, seed } => SplitFile::Explicit {
                seed: *seed,
                train: train.iter().map(|&(r, c)| [r, c]).collect(),
                test: test.iter().map(|&(r, c)| [r, c]).collect(),
            },
            SplitSpec::PerClass { counts, seed } => SplitFile::PerClass {
                per_class_train: counts.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                seed: *seed,
            },
        };
        write_json(path, &file)
    }
}

/// Train/test pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

/// Resolves a split into pixel coordinates. Deterministic in `(cube, spec)`.
pub fn split_indices(cube: &HsiCube, spec: &SplitSpec) -> Result<SplitIndices> {
    match spec {
        SplitSpec::PerClass { counts, seed } => {
            if let Some((&c, _)) = counts
                .iter()
                .find(|(&c, _)| c == 0 || c > cube.class_count)
            {
                return Err(Error::Validation(format!(
                    "split references class {c} outside 1..={}",
                    cube.class_count
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut train = Vec::new();
            let mut test = Vec::new();
            for class in 1..=cube.class_count {
                let pixels = cube.pixels_of_class(class);
                let want = counts.get(&class).copied().unwrap_or(0);
                if want > pixels.len() {
                    return Err(Error::InsufficientSamples {
                        class,
                        requested: want,
                        available: pixels.len(),
                    });
                }
                let mut chosen = vec![false; pixels.len()];
                let picks = index::sample(&mut rng, pixels.len(), want);
                for i in picks.iter() {
                    chosen[i] = true;
                }
                // Train order follows the sampling order; test keeps raster order.
                train.extend(picks.iter().map(|i| pixels[i]));
                test.extend(
                    pixels
                        .iter()
                        .zip(&chosen)
                        .filter(|(_, &c)| !c)
                        .map(|(&p, _)| p),
                );
            }
            Ok(SplitIndices { train, test })
        }
        SplitSpec::Explicit { train, test, .. } => {
            let mut seen = std::collections::HashSet::new();
            for &(r, c) in train {
                cube.check_bounds(r, c)?;
                if cube.label(r, c) == 0 {
                    return Err(Error::Validation(format!(
                        "train pixel ({r}, {c}) is unlabeled"
                    )));
                }
                seen.insert((r, c));
            }
            for &(r, c) in test {
                cube.check_bounds(r, c)?;
                if cube.label(r, c) == 0 {
                    return Err(Error::Validation(format!(
                        "test pixel ({r}, {c}) is unlabeled"
                    )));
                }
                if seen.contains(&(r, c)) {
                    return Err(Error::Validation(format!(
                        "pixel ({r}, {c}) is in both train and test"
                    )));
                }
            }
            Ok(SplitIndices {
                train: train.clone(),
                test: test.clone(),
            })
        }
    }
}

pub fn make_samples(cube: &HsiCube, coords: &[(usize, usize)], s: usize) -> Result<Vec<PatchSample>> {
    coords
        .iter()
        .map(|&(row, col)| {
            Ok(PatchSample {
                x: extract_patch(cube, row, col, s)?,
                y: cube.label(row, col),
                z: 0,
                row,
                col,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<PatchSample>,
    pub test: Vec<PatchSample>,
}

/// Materializes a split as `s x s` patch samples with `z = 0`.
pub fn make_split(cube: &HsiCube, spec: &SplitSpec, s: usize) -> Result<Split> {
    let idx = split_indices(cube, spec)?;
    Ok(Split {
        train: make_samples(cube, &idx.train, s)?,
        test: make_samples(cube, &idx.test, s)?,
    })
}

/// Resolves a possibly relative path against `base`.
pub fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
