//! Losses and the alternating adversarial training loop.
//!
//! Each batch gets two plain SGD updates in order: first the feature side
//! (backbone, both heads, classifier) descends `L1 = C1 - alpha * C2` with the
//! discriminator frozen, then the discriminator descends `L2 = C2` on a fresh
//! forward pass of the updated features.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PatchSample;
use crate::error::{Error, Result};
use crate::nets::{self, cast, ForwardOutputs, LossTarget, NetConfig, NetworkParams, Real};
use crate::pseudo_env::{self, EnvModel};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the adversarial term.
    pub alpha: f64,
    pub k_pseudo: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub vanilla_mode: bool,
    /// Run the feature-side update (a). Off only for discriminator probes.
    pub update_features: bool,
    /// Run the discriminator update (b). Ignored in vanilla mode.
    pub update_discriminator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            k_pseudo: 3,
            learning_rate: 0.01,
            epochs: 500,
            batch_size: 64,
            patch_size: 5,
            seed: 0,
            vanilla_mode: false,
            update_features: true,
            update_discriminator: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Argument(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.k_pseudo == 0 {
            return Err(Error::Argument("k_pseudo must be >= 1".into()));
        }
        Ok(())
    }

    fn effective_alpha(&self) -> f64 {
        if self.vanilla_mode {
            0.0
        } else {
            self.alpha
        }
    }
}

fn cross_entropy<T: Real>(probs: &Array2<T>, labels: &[u16], what: &str) -> Result<f64> {
    if labels.len() != probs.nrows() {
        return Err(Error::Argument(format!(
            "{} {what} labels for {} rows",
            labels.len(),
            probs.nrows()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let width = probs.ncols();
    let mut total = 0.0;
    for (row, &l) in probs.rows().into_iter().zip(labels) {
        if l == 0 || l as usize > width {
            return Err(Error::Argument(format!("{what} label {l} outside 1..={width}")));
        }
        let p = row[l as usize - 1].to_f64().unwrap_or(0.0).max(PROB_FLOOR);
        total -= p.ln();
    }
    Ok(total / labels.len() as f64)
}

/// Batch-mean cross-entropy of the class probabilities.
pub fn loss_c1<T: Real>(class_probs: &Array2<T>, y: &[u16]) -> Result<f64> {
    cross_entropy(class_probs, y, "class")
}

/// Batch-mean cross-entropy of the environment probabilities.
pub fn loss_c2<T: Real>(env_probs: &Array2<T>, z: &[u16]) -> Result<f64> {
    cross_entropy(env_probs, z, "environment")
}

pub fn loss_l1<T: Real>(out: &ForwardOutputs<T>, y: &[u16], z: &[u16], alpha: f64) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::Argument(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(loss_c1(&out.class_probs, y)? - alpha * loss_c2(&out.env_probs, z)?)
}

pub fn loss_l2<T: Real>(out: &ForwardOutputs<T>, z: &[u16]) -> Result<f64> {
    loss_c2(&out.env_probs, z)
}

/// Stacks sample windows into a `[B, s*s*d]` batch.
pub fn batch_matrix<T: Real>(samples: &[&PatchSample]) -> Result<Array2<T>> {
    let width = samples.first().map(|s| s.x.len()).unwrap_or(0);
    let mut flat = Vec::with_capacity(samples.len() * width);
    for s in samples {
        if s.x.len() != width {
            return Err(Error::Argument("samples differ in patch size".into()));
        }
        flat.extend(s.x.iter().map(|&v| cast::<T>(v as f64)));
    }
    Array2::from_shape_vec((samples.len(), width), flat)
        .map_err(|e| Error::Argument(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepRecord {
    pub batch: usize,
    pub l1: f64,
    pub c1: f64,
    pub c2: f64,
    pub l2: f64,
    pub class_correct: usize,
    pub env_correct: usize,
}

fn count_matches(pred: &[u16], truth: &[u16]) -> usize {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count()
}

fn diverged(epoch: usize, step: usize, msg: impl Into<String>) -> Error {
    Error::Diverged {
        epoch,
        step,
        msg: msg.into(),
    }
}

fn guard<T>(r: Result<T>, epoch: usize, step: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric { layer } => diverged(epoch, step, format!("non-finite value in {layer}")),
        other => other,
    })
}

/// One alternating step on a batch. `epoch`/`step` only label diagnostics.
pub fn train_step<T: Real>(
    params: &mut NetworkParams<T>,
    batch: &[&PatchSample],
    config: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<StepRecord> {
    let x: Array2<T> = batch_matrix(batch)?;
    let y: Vec<u16> = batch.iter().map(|s| s.y).collect();
    let z: Vec<u16> = batch.iter().map(|s| s.z).collect();
    let lr = cast::<T>(config.learning_rate);
    let alpha = config.effective_alpha();

    let out = guard(nets::forward(params, &x), epoch, step)?;
    let c1 = loss_c1(&out.class_probs, &y)?;
    let mut record = StepRecord {
        batch: batch.len(),
        c1,
        class_correct: count_matches(&out.predicted_classes(), &y),
        ..StepRecord::default()
    };

    if config.vanilla_mode {
        // z may be unassigned; environment columns are reported only when set.
        if z.iter().all(|&v| v >= 1 && v as usize <= params.config.env_count) {
            record.c2 = loss_c2(&out.env_probs, &z)?;
            record.env_correct = count_matches(&out.predicted_envs(), &z);
        }
        record.l1 = c1;
        record.l2 = record.c2;
        if !c1.is_finite() {
            return Err(diverged(epoch, step, format!("non-finite C1 = {c1}")));
        }
        if config.update_features {
            let grads = guard(nets::backward(params, &out, &y, &z, T::zero(), LossTarget::C1), epoch, step)?;
            params.sgd_update(&grads, lr, LossTarget::C1.groups());
        }
        return Ok(record);
    }

    record.c2 = loss_c2(&out.env_probs, &z)?;
    record.l1 = c1 - alpha * record.c2;
    if !record.l1.is_finite() {
        return Err(diverged(
            epoch,
            step,
            format!("non-finite L1 (C1 = {c1}, C2 = {}, alpha = {alpha})", record.c2),
        ));
    }

    let fresh = if config.update_features {
        let grads = guard(
            nets::backward(params, &out, &y, &z, cast(alpha), LossTarget::L1),
            epoch,
            step,
        )?;
        params.sgd_update(&grads, lr, LossTarget::L1.groups());
        if !params.all_finite() {
            return Err(diverged(epoch, step, "feature parameters became non-finite"));
        }
        if config.update_discriminator {
            Some(guard(nets::forward(params, &x), epoch, step)?)
        } else {
            None
        }
    } else {
        None
    };
    let out2 = fresh.as_ref().unwrap_or(&out);
    record.l2 = loss_l2(out2, &z)?;
    record.env_correct = count_matches(&out2.predicted_envs(), &z);
    if !record.l2.is_finite() {
        return Err(diverged(epoch, step, format!("non-finite L2 = {}", record.l2)));
    }
    if config.update_discriminator {
        let grads = guard(
            nets::backward(params, out2, &y, &z, T::zero(), LossTarget::L2),
            epoch,
            step,
        )?;
        params.sgd_update(&grads, lr, LossTarget::L2.groups());
        if !params.all_finite() {
            return Err(diverged(epoch, step, "discriminator parameters became non-finite"));
        }
    }
    Ok(record)
}

/// Sample order for `epoch`, a pure function of `(seed, epoch, n)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l1: f64,
    pub c1: f64,
    pub c2: f64,
    pub l2: f64,
    pub disc_acc: f64,
    pub train_oa: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,L1,C1,C2,L2,disc_acc,train_oa";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.l1, r.c1, r.c2, r.l2, r.disc_acc, r.train_oa
            );
        }
        out
    }
}

/// Runs `config.epochs` epochs of [`train_step`] over seeded shuffles of
/// `samples` (the last partial batch is kept).
///
/// When `env_model` is given, every sample's `z` is first set from its
/// center spectrum; otherwise the samples must already carry `z` (or the run
/// must be vanilla).
pub fn train<T: Real>(
    samples: &[PatchSample],
    net: &NetConfig,
    config: &TrainConfig,
    env_model: Option<&EnvModel>,
) -> Result<(NetworkParams<T>, TrainHistory)> {
    train_with(samples, net, config, env_model, |_| {})
}

pub fn train_with<T: Real>(
    samples: &[PatchSample],
    net: &NetConfig,
    config: &TrainConfig,
    env_model: Option<&EnvModel>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(NetworkParams<T>, TrainHistory)> {
    config.validate()?;
    let params = nets::init_params::<T>(net)?;
    train_from(params, samples, config, env_model, &mut on_epoch)
}

/// Continues training from existing parameters.
pub fn train_from<T: Real>(
    mut params: NetworkParams<T>,
    samples: &[PatchSample],
    config: &TrainConfig,
    env_model: Option<&EnvModel>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(NetworkParams<T>, TrainHistory)> {
    config.validate()?;
    let net = params.config.clone();
    if net.patch_size != config.patch_size {
        return Err(Error::Argument(format!(
            "network patch size {} != training patch size {}",
            net.patch_size, config.patch_size
        )));
    }
    let mut labeled;
    let samples = match env_model {
        Some(model) => {
            labeled = samples.to_vec();
            pseudo_env::label_samples(&mut labeled, model, net.bands)?;
            &labeled[..]
        }
        None => samples,
    };
    let mut history = TrainHistory::default();
    if config.epochs == 0 {
        return Ok((params, history));
    }
    if samples.is_empty() {
        return Err(Error::Argument("no training samples".into()));
    }

    let mut step = 0;
    for epoch in 1..=config.epochs {
        let order = epoch_order(config.seed, epoch, samples.len());
        let mut sums = StepRecord::default();
        let mut n = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PatchSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let r = train_step(&mut params, &batch, config, epoch, step)?;
            let w = r.batch as f64;
            sums.l1 += r.l1 * w;
            sums.c1 += r.c1 * w;
            sums.c2 += r.c2 * w;
            sums.l2 += r.l2 * w;
            sums.class_correct += r.class_correct;
            sums.env_correct += r.env_correct;
            n += r.batch;
            step += 1;
        }
        let nf = n as f64;
        let record = EpochRecord {
            epoch,
            l1: sums.l1 / nf,
            c1: sums.c1 / nf,
            c2: sums.c2 / nf,
            l2: sums.l2 / nf,
            disc_acc: sums.env_correct as f64 / nf,
            train_oa: sums.class_correct as f64 / nf,
        };
        on_epoch(&record);
        history.records.push(record);
    }
    Ok((params, history))
}
