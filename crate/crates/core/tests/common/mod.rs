//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use adverdecom::data::{self, PatchSample, SplitSpec};
use adverdecom::nets::{self, Backbone, LossTarget, NetConfig, NetworkParams};
use adverdecom::pseudo_env::{self, EnvModel, KMeansOptions};
use adverdecom::synth::{self, SceneSpec};
use adverdecom::train::{self, loss_c1, loss_l1, loss_l2, TrainConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so that gradients which are
/// zero up to rounding do not divide by ~0.
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_SEEDS: [u64; 3] = [3, 17, 42];

/// N1=8, Λ=3, K=2, s=3, d=6.
pub fn tiny(seed: u64) -> NetConfig {
    NetConfig {
        feature_dim: 8,
        conv_channels: vec![4, 8],
        head_hidden: 16,
        ..NetConfig::new(Backbone::Compact2d, 3, 2, 3, 6, seed)
    }
}

pub struct Point {
    pub params: NetworkParams<f64>,
    pub batch: Array2<f64>,
    pub y: Vec<u16>,
    pub z: Vec<u16>,
}

/// A random point: initialized weights plus a jitter on every parameter, so
/// biases are nonzero and no ReLU sits exactly on its kink.
pub fn random_point(seed: u64) -> Point {
    let mut params = nets::init_params::<f64>(&tiny(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    for t in params.tensors.iter_mut() {
        for v in t.data.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let n = 4;
    let batch = Array2::from_shape_fn((n, 3 * 3 * 6), |_| rng.random_range(0.0..1.0));
    let y = (0..n).map(|_| rng.random_range(1..=3)).collect();
    let z = (0..n).map(|_| rng.random_range(1..=2)).collect();
    Point { params, batch, y, z }
}

fn point_loss(p: &Point, params: &NetworkParams<f64>, alpha: f64, target: LossTarget) -> f64 {
    let out = nets::forward(params, &p.batch).unwrap();
    match target {
        LossTarget::L1 => loss_l1(&out, &p.y, &p.z, alpha).unwrap(),
        LossTarget::L2 => loss_l2(&out, &p.z).unwrap(),
        LossTarget::C1 => loss_c1(&out.class_probs, &p.y).unwrap(),
    }
}

/// Max relative error between analytic and central-difference gradients
/// over every parameter `target` trains. Panics if any other parameter has
/// a nonzero analytic gradient.
pub fn fd_max_rel_error(seed: u64, alpha: f64, target: LossTarget) -> f64 {
    let p = random_point(seed);
    let grads = nets::gradients(&p.params, &p.batch, &p.y, &p.z, alpha, target).unwrap();
    let groups = target.groups();
    let mut worst = 0.0f64;
    let mut work = p.params.clone();
    for (ti, t) in p.params.tensors.iter().enumerate() {
        if !groups.contains(&t.group) {
            assert!(
                grads.tensors[ti].iter().all(|&g| g == 0.0),
                "{} should have zero gradient",
                t.name
            );
            continue;
        }
        for i in 0..t.data.len() {
            let orig = t.data[i];
            work.tensors[ti].data[i] = orig + FD_STEP;
            let up = point_loss(&p, &work, alpha, target);
            work.tensors[ti].data[i] = orig - FD_STEP;
            let down = point_loss(&p, &work, alpha, target);
            work.tensors[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.tensors[ti][i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

// ------------------------------------------------------------------ k-means

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center by a plain scan; ties go to the lower index.
pub fn brute_nearest(x: &[f64], centers: &[f64], dim: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

pub fn objective(points: &[f64], centers: &[f64], dim: usize) -> f64 {
    points
        .chunks_exact(dim)
        .map(|x| sq_dist(x, &centers[brute_nearest(x, centers, dim) * dim..][..dim]))
        .sum()
}

/// Textbook Lloyd iterations from the given centers until assignments stop
/// changing. Returns `(centers, objective)`.
pub fn plain_lloyd(points: &[f64], dim: usize, mut centers: Vec<f64>) -> (Vec<f64>, f64) {
    let k = centers.len() / dim;
    let mut prev: Vec<usize> = Vec::new();
    for _ in 0..1000 {
        let assign: Vec<usize> = points
            .chunks_exact(dim)
            .map(|x| brute_nearest(x, &centers, dim))
            .collect();
        if assign == prev {
            break;
        }
        for c in 0..k {
            let members: Vec<&[f64]> = points
                .chunks_exact(dim)
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(x, _)| x)
                .collect();
            if members.is_empty() {
                continue;
            }
            for j in 0..dim {
                centers[c * dim + j] = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
            }
        }
        prev = assign;
    }
    let obj = objective(points, &centers, dim);
    (centers, obj)
}

pub fn uniform_points(n: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * dim).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// Points whose fitted assignment differs from the brute-force nearest
/// center, for 200 random points in 8 dimensions with K = 3.
pub fn kmeans_assignment_mismatches(seed: u64) -> usize {
    let dim = 8;
    let pts = uniform_points(200, dim, seed);
    let model = pseudo_env::kmeans_fit(&pts, dim, 3, seed, &KMeansOptions::default()).unwrap();
    pts.chunks_exact(dim)
        .filter(|x| model.assign(x).unwrap() as usize - 1 != brute_nearest(x, &model.centers, dim))
        .count()
}

/// Largest increase between consecutive objective values of one fit
/// (`<= 0` means non-increasing).
pub fn max_objective_increase(model: &EnvModel) -> f64 {
    model
        .objective_trace
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max)
}

// ----------------------------------------------------------------- training

/// Standard scene for `seed`, normalized, with the 50-per-class split and
/// samples labeled by k-means (K = 3) on the training spectra.
pub fn standard_training_set(seed: u64) -> (Vec<PatchSample>, EnvModel, usize) {
    let scene = synth::generate_scene(&SceneSpec::standard(seed)).unwrap();
    let cube = data::normalize_bands(&scene.cube).unwrap();
    let split = data::make_split(&cube, &SplitSpec::uniform(5, 50, seed + 1), 5).unwrap();
    let env = pseudo_env::fit_on_samples(&split.train, cube.bands, 3, seed + 2, &KMeansOptions::default()).unwrap();
    let mut train = split.train;
    pseudo_env::label_samples(&mut train, &env, cube.bands).unwrap();
    (train, env, cube.bands)
}

/// Max absolute parameter difference after `steps` steps of the vanilla
/// trainer versus the adversarial trainer at alpha = 0 with discriminator
/// updates disabled, in f64.
pub fn vanilla_reduction_gap(steps: usize) -> f64 {
    let (samples, _, bands) = standard_training_set(1);
    let net = NetConfig::new(Backbone::Compact2d, 5, 3, 5, bands, 4);
    let mut van = nets::init_params::<f64>(&net).unwrap();
    let mut adv = van.clone();
    let base = TrainConfig {
        alpha: 0.0,
        seed: 5,
        ..TrainConfig::default()
    };
    let vcfg = TrainConfig {
        vanilla_mode: true,
        ..base.clone()
    };
    let acfg = TrainConfig {
        update_discriminator: false,
        ..base
    };
    let order = train::epoch_order(5, 1, samples.len());
    let mut gap = 0.0f64;
    for step in 0..steps {
        let idx = &order[(step * 64) % samples.len()..];
        let batch: Vec<&PatchSample> = idx.iter().take(64).map(|&i| &samples[i]).collect();
        train::train_step(&mut van, &batch, &vcfg, 1, step).unwrap();
        train::train_step(&mut adv, &batch, &acfg, 1, step).unwrap();
        gap = van
            .flatten()
            .iter()
            .zip(adv.flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(gap, f64::max);
    }
    gap
}

/// Discriminator accuracy on the training samples after `epochs` epochs of
/// L2-only training on top of frozen, freshly initialized features.
pub fn frozen_feature_disc_accuracy(seed: u64, epochs: usize) -> f64 {
    let (samples, _, bands) = standard_training_set(seed);
    let net = NetConfig::new(Backbone::Compact2d, 5, 3, 5, bands, seed + 3);
    let cfg = TrainConfig {
        epochs,
        seed: seed + 4,
        update_features: false,
        ..TrainConfig::default()
    };
    let (params, _) = train::train::<f32>(&samples, &net, &cfg, None).unwrap();
    let refs: Vec<&PatchSample> = samples.iter().collect();
    let x: Array2<f32> = train::batch_matrix(&refs).unwrap();
    let out = nets::forward(&params, &x).unwrap();
    let hits = out
        .predicted_envs()
        .iter()
        .zip(&samples)
        .filter(|(p, s)| **p == s.z)
        .count();
    hits as f64 / samples.len() as f64
}

// ------------------------------------------------------------------ metrics

/// OA, AA and kappa recounted straight from the label vectors, without a
/// confusion matrix.
pub fn recount(preds: &[u16], truths: &[u16], classes: u16) -> (f64, f64, f64) {
    let n = truths.len() as f64;
    let correct = preds.iter().zip(truths).filter(|(p, t)| p == t).count() as f64;
    let oa = correct / n;
    let mut accs = Vec::new();
    let mut chance = 0.0;
    for c in 1..=classes {
        let of_class: Vec<usize> = (0..truths.len()).filter(|&i| truths[i] == c).collect();
        let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
        chance += of_class.len() as f64 * predicted;
        if !of_class.is_empty() {
            let hit = of_class.iter().filter(|&&i| preds[i] == c).count() as f64;
            accs.push(hit / of_class.len() as f64);
        }
    }
    let aa = accs.iter().sum::<f64>() / accs.len() as f64;
    let pe = chance / (n * n);
    (oa, aa, (oa - pe) / (1.0 - pe))
}

pub fn random_labels(n: usize, classes: u16, seed: u64) -> (Vec<u16>, Vec<u16>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truths: Vec<u16> = (0..n).map(|_| rng.random_range(1..=classes)).collect();
    // Correct about half the time so the matrix is neither diagonal nor flat.
    let preds = truths
        .iter()
        .map(|&t| if rng.random_bool(0.5) { t } else { rng.random_range(1..=classes) })
        .collect();
    (preds, truths)
}
