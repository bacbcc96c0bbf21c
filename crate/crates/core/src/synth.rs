//! Synthetic hyperspectral scenes built from the multiplicative intrinsic
//! model `I(λ) = R(λ) * S(λ)`.
//!
//! Reflectance `R` is a per-class smooth signature and shading `S` a
//! per-environment smooth, wavelength-dependent gain. Classes and
//! environments each tile the image with their own seeded Voronoi blobs, so
//! every class is observed under several environments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{normalize_bands, HsiCube};
use crate::error::{Error, Result};
use crate::pseudo_env::{self, KMeansOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub class_count: u16,
    pub env_count: u16,
    pub shading_amplitude: f64,
    pub noise_sigma: f64,
    /// Characteristic blob size in pixels.
    pub region_scale: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// The desk-scale benchmark scene: 64x64, 40 bands, 5 classes under 3
    /// environments, shading amplitude 0.5, noise 0.01.
    pub fn standard(seed: u64) -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            bands: 40,
            class_count: 5,
            env_count: 3,
            shading_amplitude: 0.5,
            noise_sigma: 0.01,
            region_scale: 12.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Argument(m));
        if self.height == 0 || self.width == 0 {
            return fail(format!("empty scene {}x{}", self.height, self.width));
        }
        if self.class_count < 2 {
            return fail(format!("class_count must be >= 2, got {}", self.class_count));
        }
        if self.env_count < 1 {
            return fail("env_count must be >= 1".into());
        }
        if self.bands < 4 {
            return fail(format!("bands must be >= 4, got {}", self.bands));
        }
        if !(0.0..1.0).contains(&self.shading_amplitude) {
            return fail(format!(
                "shading_amplitude must lie in [0, 1), got {}",
                self.shading_amplitude
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.region_scale >= 1.0 && self.region_scale.is_finite()) {
            return fail(format!("region_scale must be >= 1, got {}", self.region_scale));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub cube: HsiCube,
    /// Row-major `H, W`, values in `1..=E`.
    pub env_map: Vec<u16>,
    /// Row-major `H, W, D`.
    pub reflectance: Vec<f32>,
    /// Row-major `H, W, D`.
    pub shading: Vec<f32>,
    /// Per-class signatures, `Λ x D`.
    pub signatures: Vec<Vec<f32>>,
    /// Per-environment shading curves, `E x D`.
    pub shading_curves: Vec<Vec<f32>>,
}

type Bump = (f64, f64, f64);

fn gaussian_sum(bumps: &[Bump], band: usize) -> f64 {
    bumps
        .iter()
        .map(|&(c, w, a)| a * (-(band as f64 - c).powi(2) / (2.0 * w * w)).exp())
        .sum()
}

/// Broad bump shared by every class of a scene.
fn shared_bump(rng: &mut impl Rng, bands: usize) -> Bump {
    let d = bands as f64;
    let center = rng.random_range(0.3 * d..0.7 * d);
    let width = rng.random_range(d / 4.0..d / 2.5);
    (center, width, 1.0)
}

/// Smooth positive spectrum in `[0.1, 1]`: the shared bump plus 1-3
/// class-specific narrower bumps, rescaled so the peak is 1. Classes thus
/// share an overall shape and differ in local features.
fn class_signature(rng: &mut impl Rng, bands: usize, shared: Bump) -> Vec<f32> {
    let d = bands as f64;
    let mut bumps = vec![shared];
    for _ in 0..rng.random_range(1..=3) {
        let center = rng.random_range(0.0..d - 1.0);
        let width = rng.random_range((d / 20.0).max(1.0)..(d / 8.0).max(1.5));
        let amp = rng.random_range(0.15..0.4);
        bumps.push((center, width, amp));
    }
    let raw: Vec<f64> = (0..bands).map(|b| gaussian_sum(&bumps, b)).collect();
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    raw.iter()
        .map(|&v| (0.1 + 0.9 * v / peak).clamp(0.1, 1.0) as f32)
        .collect()
}

/// Smooth curve `w(λ)` with `max |w| = 1`, built from a few low-frequency
/// cosines.
fn shading_profile(rng: &mut impl Rng, bands: usize) -> Vec<f64> {
    let terms: Vec<(f64, f64, f64)> = (0..rng.random_range(2..=3))
        .map(|_| {
            let freq = rng.random_range(0.3..1.5);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.5..1.0);
            (freq, phase, amp)
        })
        .collect();
    let raw: Vec<f64> = (0..bands)
        .map(|b| {
            let t = b as f64 / bands as f64;
            terms
                .iter()
                .map(|&(f, p, a)| a * (std::f64::consts::TAU * f * t + p).cos())
                .sum()
        })
        .collect();
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return vec![0.0; bands];
    }
    raw.iter().map(|v| (v / peak).clamp(-1.0, 1.0)).collect()
}

/// Voronoi partition of the grid into `labels` regions. Site labels cycle
/// through `1..=labels` so every label owns a share of the sites; ties go to
/// the lower site index.
fn voronoi_regions(
    rng: &mut impl Rng,
    height: usize,
    width: usize,
    labels: u16,
    scale: f64,
) -> Vec<u16> {
    let area = (height * width) as f64;
    let n_sites = ((area / (scale * scale)).round() as usize).max(labels as usize);
    let sites: Vec<(f64, f64, u16)> = (0..n_sites)
        .map(|i| {
            let r = rng.random_range(0.0..height as f64);
            let c = rng.random_range(0.0..width as f64);
            let l = (i % labels as usize) as u16 + 1;
            (r, c, l)
        })
        .collect();
    let mut out = Vec::with_capacity(height * width);
    for row in 0..height {
        for col in 0..width {
            let (pr, pc) = (row as f64 + 0.5, col as f64 + 0.5);
            let mut best = f64::INFINITY;
            let mut label = 1;
            for &(r, c, l) in &sites {
                let d = (r - pr).powi(2) + (c - pc).powi(2);
                if d < best {
                    best = d;
                    label = l;
                }
            }
            out.push(label);
        }
    }
    out
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.bands;
    let shared = shared_bump(&mut rng, d);
    let signatures: Vec<Vec<f32>> = (0..spec.class_count)
        .map(|_| class_signature(&mut rng, d, shared))
        .collect();
    let shading_curves: Vec<Vec<f32>> = (0..spec.env_count)
        .map(|_| {
            shading_profile(&mut rng, d)
                .into_iter()
                .map(|w| (1.0 + spec.shading_amplitude * w) as f32)
                .collect()
        })
        .collect();
    let labels = voronoi_regions(
        &mut rng,
        spec.height,
        spec.width,
        spec.class_count,
        spec.region_scale,
    );
    let env_map = voronoi_regions(
        &mut rng,
        spec.height,
        spec.width,
        spec.env_count,
        spec.region_scale,
    );

    let pixels = spec.height * spec.width;
    let mut reflectance = Vec::with_capacity(pixels * d);
    let mut shading = Vec::with_capacity(pixels * d);
    for p in 0..pixels {
        reflectance.extend_from_slice(&signatures[labels[p] as usize - 1]);
        shading.extend_from_slice(&shading_curves[env_map[p] as usize - 1]);
    }
    let mut values: Vec<f32> = reflectance
        .iter()
        .zip(&shading)
        .map(|(r, s)| r * s)
        .collect();
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma validated");
        for v in values.iter_mut() {
            *v = (*v as f64 + noise.sample(&mut rng)).max(0.0) as f32;
        }
    }

    let cube = HsiCube::new(
        format!("synthetic-{}", spec.seed),
        spec.height,
        spec.width,
        d,
        values,
        labels,
        spec.class_count,
        (1..=spec.class_count).map(|c| format!("class-{c}")).collect(),
    )?;
    Ok(SyntheticScene {
        spec: spec.clone(),
        cube,
        env_map,
        reflectance,
        shading,
        signatures,
        shading_curves,
    })
}

/// Fraction of pixels whose k-means cluster (over normalized pixel spectra)
/// matches the true environment under the best one-to-one relabeling.
pub fn scene_env_recoverability(scene: &SyntheticScene, k: usize, seed: u64) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("K must be >= 1".into()));
    }
    let cube = normalize_bands(&scene.cube)?;
    let d = cube.bands;
    let spectra: Vec<f64> = cube.values.iter().map(|&v| v as f64).collect();
    let model = pseudo_env::kmeans_fit(&spectra, d, k, seed, &KMeansOptions::default())?;
    let assigned: Vec<u16> = spectra
        .chunks_exact(d)
        .map(|x| model.assign(x))
        .collect::<Result<_>>()?;
    Ok(pseudo_env::matched_agreement(
        &assigned,
        &scene.env_map,
        k,
        scene.spec.env_count as usize,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(amp: f64, sigma: f64, seed: u64) -> SceneSpec {
        SceneSpec {
            height: 24,
            width: 20,
            bands: 12,
            class_count: 3,
            env_count: 2,
            shading_amplitude: amp,
            noise_sigma: sigma,
            region_scale: 6.0,
            seed,
        }
    }

    #[test]
    fn identity_shading_reproduces_reflectance() {
        let scene = generate_scene(&small(0.0, 0.0, 1)).unwrap();
        assert_eq!(scene.cube.values, scene.reflectance);
        assert!(scene.shading.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn noiseless_scene_is_exact_product() {
        let scene = generate_scene(&small(0.7, 0.0, 2)).unwrap();
        for ((v, r), s) in scene.cube.values.iter().zip(&scene.reflectance).zip(&scene.shading) {
            assert_eq!(*v, r * s);
        }
    }

    #[test]
    fn positivity_and_ranges() {
        let scene = generate_scene(&small(0.9, 0.0, 3)).unwrap();
        assert!(scene.reflectance.iter().all(|&r| (0.1..=1.0).contains(&r)));
        assert!(scene.shading.iter().all(|&s| s > 0.0));
        assert!(scene.env_map.iter().all(|&e| (1..=2).contains(&e)));
        assert!(scene.cube.labels.iter().all(|&l| (1..=3).contains(&l)));
    }

    #[test]
    fn factors_depend_only_on_region() {
        let scene = generate_scene(&small(0.5, 0.01, 4)).unwrap();
        let d = scene.spec.bands;
        for p in 0..scene.cube.pixel_count() {
            let class = scene.cube.labels[p] as usize - 1;
            let env = scene.env_map[p] as usize - 1;
            assert_eq!(&scene.reflectance[p * d..(p + 1) * d], &scene.signatures[class][..]);
            assert_eq!(&scene.shading[p * d..(p + 1) * d], &scene.shading_curves[env][..]);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_scene(&small(0.5, 0.02, 9)).unwrap();
        let b = generate_scene(&small(0.5, 0.02, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&small(0.5, 0.02, 10)).unwrap();
        assert_ne!(a.cube.values, c.cube.values);
    }

    #[test]
    fn every_class_and_environment_present_in_standard_scene() {
        for seed in 1..=3 {
            let scene = generate_scene(&SceneSpec::standard(seed)).unwrap();
            let hist = scene.cube.class_histogram();
            assert_eq!(hist[0], 0);
            assert!(hist[1..].iter().all(|&n| n >= 50), "seed {seed}: {hist:?}");
            for e in 1..=3u16 {
                assert!(scene.env_map.contains(&e));
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small(0.5, 0.0, 0);
        s.shading_amplitude = 1.0;
        assert!(generate_scene(&s).is_err());
        let mut s = small(0.5, 0.0, 0);
        s.class_count = 1;
        assert!(generate_scene(&s).is_err());
        let mut s = small(0.5, 0.0, 0);
        s.bands = 3;
        assert!(generate_scene(&s).is_err());
        let mut s = small(0.5, 0.0, 0);
        s.env_count = 0;
        assert!(generate_scene(&s).is_err());
        let mut s = small(0.5, 0.0, 0);
        s.noise_sigma = -1.0;
        assert!(generate_scene(&s).is_err());
    }

    #[test]
    fn single_environment_is_fully_recoverable() {
        let mut s = small(0.5, 0.0, 5);
        s.env_count = 1;
        let scene = generate_scene(&s).unwrap();
        assert_eq!(scene_env_recoverability(&scene, 1, 0).unwrap(), 1.0);
    }
}
