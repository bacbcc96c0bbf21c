use adverdecom::data;
use adverdecom::pseudo_env::{self, KMeansOptions};
use adverdecom::synth::{self, SceneSpec};

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Best agreement over every relabeling of the clusters.
fn exhaustive_agreement(assigned: &[u16], truth: &[u16], k: usize) -> f64 {
    permutations(k)
        .iter()
        .map(|perm| {
            assigned
                .iter()
                .zip(truth)
                .filter(|(&a, &t)| perm[a as usize - 1] + 1 == t as usize)
                .count() as f64
                / truth.len() as f64
        })
        .fold(0.0, f64::max)
}

fn cluster_pixels(scene: &synth::SyntheticScene, k: usize, seed: u64) -> Vec<u16> {
    let cube = data::normalize_bands(&scene.cube).unwrap();
    let spectra: Vec<f64> = cube.values.iter().map(|&v| v as f64).collect();
    let model = pseudo_env::kmeans_fit(&spectra, cube.bands, k, seed, &KMeansOptions::default()).unwrap();
    spectra.chunks_exact(cube.bands).map(|x| model.assign(x).unwrap()).collect()
}

#[test]
fn recoverability_matches_exhaustive_permutation_oracle() {
    for seed in 1..=3 {
        let spec = SceneSpec { noise_sigma: 0.0, ..SceneSpec::standard(seed) };
        let scene = synth::generate_scene(&spec).unwrap();
        let got = synth::scene_env_recoverability(&scene, 3, 11).unwrap();
        let oracle = exhaustive_agreement(&cluster_pixels(&scene, 3, 11), &scene.env_map, 3);
        assert!((got - oracle).abs() < 1e-15, "seed {seed}: {got} vs {oracle}");
    }
}

// A fine tiling, so that class and environment blobs are close to
// independent; with a few dozen coarse blobs chance overlap alone can exceed
// the bound.
#[test]
fn no_shading_means_chance_level_recoverability() {
    for seed in 1..=5 {
        let spec = SceneSpec {
            shading_amplitude: 0.0,
            region_scale: 4.0,
            ..SceneSpec::standard(seed)
        };
        let scene = synth::generate_scene(&spec).unwrap();
        let r = synth::scene_env_recoverability(&scene, 3, 0).unwrap();
        assert!(r <= 1.0 / 3.0 + 0.15, "seed {seed}: {r}");
    }
}

#[test]
fn class_means_differ_across_environments() {
    let scene = synth::generate_scene(&SceneSpec::standard(7)).unwrap();
    let (cube, d) = (&scene.cube, scene.cube.bands);
    let mut total = 0.0;
    let mut pairs = 0;
    for class in 1..=5u16 {
        let means: Vec<Option<Vec<f64>>> = (1..=3u16)
            .map(|env| {
                let px: Vec<usize> = (0..cube.pixel_count())
                    .filter(|&p| cube.labels[p] == class && scene.env_map[p] == env)
                    .collect();
                (!px.is_empty()).then(|| {
                    (0..d)
                        .map(|b| px.iter().map(|&p| cube.values[p * d + b] as f64).sum::<f64>() / px.len() as f64)
                        .collect()
                })
            })
            .collect();
        let present: Vec<&Vec<f64>> = means.iter().flatten().collect();
        for i in 0..present.len() {
            for j in i + 1..present.len() {
                total += present[i].iter().zip(present[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                pairs += 1;
            }
        }
    }
    assert!(pairs > 0);
    assert!(total / pairs as f64 > 0.0);
}

#[test]
fn standard_scene_environments_are_recoverable() {
    let scene = synth::generate_scene(&SceneSpec::standard(1)).unwrap();
    assert!(synth::scene_env_recoverability(&scene, 3, 0).unwrap() > 0.5);
}
