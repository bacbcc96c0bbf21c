//! Environment pseudo-classes: k-means over pixel spectra and nearest-center
//! assignment.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, PatchSample};
use crate::error::{Error, Result};

pub const MODEL_FILE: &str = "envmodel.json";
pub const CENTERS_FILE: &str = "centers.bin";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Stop once the largest center shift (L2) is at most this.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Fitted cluster centers `P_1..P_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvModel {
    pub k: usize,
    pub dim: usize,
    /// Row-major `K x dim`.
    pub centers: Vec<f64>,
    /// Sum of squared distances to the assigned centers at the last
    /// assignment.
    pub objective: f64,
    pub iterations_run: usize,
    /// Objective after every assignment step, in order.
    pub objective_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest center; ties go to the lowest
/// index.
fn nearest(x: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

impl EnvModel {
    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.dim..(k + 1) * self.dim]
    }

    /// Pseudo-class of `x` in `1..=K`.
    pub fn assign<T: Copy + Into<f64>>(&self, x: &[T]) -> Result<u16> {
        if x.len() != self.dim {
            return Err(Error::Argument(format!(
                "spectrum has {} bands, model expects {}",
                x.len(),
                self.dim
            )));
        }
        let xs: Vec<f64> = x.iter().map(|&v| v.into()).collect();
        Ok(nearest(&xs, &self.centers, self.dim).0 as u16 + 1)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        data::create_dir(dir)?;
        let manifest = EnvModelManifest {
            k: self.k,
            dim: self.dim,
            objective: self.objective,
            iterations_run: self.iterations_run,
            objective_trace: self.objective_trace.clone(),
            dtype: "f32".into(),
            endianness: "little".into(),
            centers_file: CENTERS_FILE.into(),
        };
        data::write_json(&dir.join(MODEL_FILE), &manifest)?;
        let centers: Vec<f32> = self.centers.iter().map(|&c| c as f32).collect();
        data::write_f32_le(&dir.join(CENTERS_FILE), &centers)
    }

    /// Loads a model written by [`EnvModel::save`]. Centers come back at
    /// `f32` precision.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let m: EnvModelManifest = data::read_json(&path)?;
        if m.dtype != "f32" || m.endianness != "little" {
            return Err(Error::Format {
                path,
                msg: format!("unsupported dtype/endianness {}/{}", m.dtype, m.endianness),
            });
        }
        if m.k == 0 {
            return Err(Error::Validation("env model with K = 0".into()));
        }
        let centers = data::read_f32_le(&dir.join(&m.centers_file), m.k * m.dim)?;
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation("non-finite cluster center".into()));
        }
        Ok(EnvModel {
            k: m.k,
            dim: m.dim,
            centers: centers.into_iter().map(f64::from).collect(),
            objective: m.objective,
            iterations_run: m.iterations_run,
            objective_trace: m.objective_trace,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvModelManifest {
    k: usize,
    dim: usize,
    objective: f64,
    iterations_run: usize,
    #[serde(default)]
    objective_trace: Vec<f64>,
    dtype: String,
    endianness: String,
    centers_file: String,
}

/// Free-function form of [`EnvModel::assign`].
pub fn assign_pseudo_class<T: Copy + Into<f64>>(x: &[T], model: &EnvModel) -> Result<u16> {
    model.assign(x)
}

/// k-means++ seeding: first center uniform, the rest drawn with probability
/// proportional to squared distance from the nearest chosen center.
fn plus_plus_init(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centers = Vec::with_capacity(k * dim);
    centers.extend_from_slice(point(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centers[..dim])).collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // Guard against landing on a zero-weight tail through rounding.
            if d2[chosen] == 0.0 {
                chosen = d2
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(_, &w)| w > 0.0)
                    .map(|(i, _)| i)
                    .unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centers.len();
        centers.extend_from_slice(point(pick));
        let c = centers[start..].to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &c));
        }
    }
    centers
}

/// Lloyd's algorithm with seeded k-means++ initialization over `N x dim`
/// row-major `points`.
///
/// Empty clusters are re-seeded to the point farthest from its assigned
/// center. The objective recorded after every assignment is non-increasing.
pub fn kmeans_fit(
    points: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<EnvModel> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Argument(format!(
            "{} values do not form rows of length {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if k == 0 {
        return Err(Error::Argument("K must be >= 1".into()));
    }
    if n < k {
        return Err(Error::Argument(format!("{n} points for K = {k}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite value in spectra".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(points, dim, k, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    loop {
        let mut objective = 0.0;
        for i in 0..n {
            let (c, d) = nearest(&points[i * dim..(i + 1) * dim], &centers, dim);
            assignment[i] = c;
            dists[i] = d;
            objective += d;
        }
        trace.push(objective);
        if iterations == opts.max_iter {
            break;
        }

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&points[i * dim..(i + 1) * dim])
            {
                *s += v;
            }
        }
        let mut next = sums;
        let mut used = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = counts[c] as f64;
                next[c * dim..(c + 1) * dim].iter_mut().for_each(|v| *v /= inv);
            } else {
                let far = (0..n)
                    .filter(|&i| !used[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k leaves an unused point");
                used[far] = true;
                dists[far] = 0.0;
                next[c * dim..(c + 1) * dim].copy_from_slice(&points[far * dim..(far + 1) * dim]);
            }
        }
        let shift = (0..k)
            .map(|c| sq_dist(&centers[c * dim..(c + 1) * dim], &next[c * dim..(c + 1) * dim]).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        iterations += 1;
        if shift <= opts.tol {
            // One final assignment so the objective matches the returned centers.
            let objective = (0..n)
                .map(|i| nearest(&points[i * dim..(i + 1) * dim], &centers, dim).1)
                .sum();
            trace.push(objective);
            break;
        }
    }

    Ok(EnvModel {
        k,
        dim,
        centers,
        objective: *trace.last().expect("at least one assignment"),
        iterations_run: iterations,
        objective_trace: trace,
    })
}

/// Fits on the center-pixel spectra of `samples`.
pub fn fit_on_samples(
    samples: &[PatchSample],
    bands: usize,
    k: usize,
    seed: u64,
    opts: &KMeansOptions,
) -> Result<EnvModel> {
    let spectra: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.center_spectrum(bands).iter().map(|&v| v as f64))
        .collect();
    kmeans_fit(&spectra, bands, k, seed, opts)
}

/// Sets every sample's `z` from its center-pixel spectrum.
pub fn label_samples(samples: &mut [PatchSample], model: &EnvModel, bands: usize) -> Result<()> {
    for s in samples.iter_mut() {
        s.z = model.assign(s.center_spectrum(bands))?;
    }
    Ok(())
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method,
/// O(n^3)). Returns `col_of_row`.
fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = i64::MAX / 4;
    // 1-based potentials and matching, column 0 is a sentinel.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        if row_of_col[j] > 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Fraction of positions where `a` (labels `1..=ka`) agrees with `b` (labels
/// `1..=kb`) under the best one-to-one relabeling of `a`'s classes.
pub fn matched_agreement(a: &[u16], b: &[u16], ka: usize, kb: usize) -> f64 {
    assert_eq!(a.len(), b.len(), "label vectors differ in length");
    if a.is_empty() {
        return 0.0;
    }
    let n = ka.max(kb);
    let mut counts = vec![vec![0i64; n]; n];
    for (&x, &y) in a.iter().zip(b) {
        counts[x as usize - 1][y as usize - 1] += 1;
    }
    let cost: Vec<Vec<i64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| -c).collect())
        .collect();
    let matching = hungarian(&cost);
    let matched: i64 = matching
        .iter()
        .enumerate()
        .map(|(r, &c)| counts[r][c])
        .sum();
    matched as f64 / a.len() as f64
}
