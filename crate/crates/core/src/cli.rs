//! Command-line front end.
//!
//! Every run is driven by an [`ExperimentConfig`], read from a flat
//! `key = value` file and overridden by flags, and written back next to the
//! outputs as `config.cfg`. Failures print one line, `error[<kind>]: <msg>`,
//! and exit 1; usage errors exit 2.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{self, HsiCube, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{self, MapMode, MetricsReport, DEFAULT_PALETTE};
use crate::nets::{self, Backbone, NetConfig};
use crate::pseudo_env::{self, EnvModel, KMeansOptions};
use crate::synth::{self, SceneSpec};
use crate::train::{self, TrainConfig};

pub const CONFIG_FILE: &str = "config.cfg";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const SPLIT_FILE: &str = "split.json";
pub const SCENE_FILE: &str = "scene.json";
pub const ENV_MAP_FILE: &str = "env_map.bin";

/// Sub-seed offsets from the run seed.
pub const SPLIT_SEED_OFFSET: u64 = 1;
pub const KMEANS_SEED_OFFSET: u64 = 2;
pub const INIT_SEED_OFFSET: u64 = 3;
pub const SHUFFLE_SEED_OFFSET: u64 = 4;

const EVAL_BATCH: usize = 256;

/// Everything a training or evaluation run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub cube: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub envmodel: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Training pixels per class when no split file is given.
    pub train_per_class: usize,
    pub alpha: f64,
    pub k_pseudo: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub vanilla_mode: bool,
    pub update_features: bool,
    pub update_discriminator: bool,
    pub backbone: Backbone,
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub conv_channels: Vec<usize>,
    pub disc_hidden: [usize; 2],
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let n = NetConfig::new(Backbone::Compact2d, 1, 1, 1, 1, 0);
        let k = KMeansOptions::default();
        ExperimentConfig {
            name: "run".into(),
            seed: 0,
            cube: None,
            split: None,
            envmodel: None,
            out: None,
            train_per_class: 50,
            alpha: t.alpha,
            k_pseudo: t.k_pseudo,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            patch_size: t.patch_size,
            vanilla_mode: t.vanilla_mode,
            update_features: t.update_features,
            update_discriminator: t.update_discriminator,
            backbone: n.backbone,
            feature_dim: n.feature_dim,
            head_hidden: n.head_hidden,
            conv_channels: n.conv_channels,
            disc_hidden: n.disc_hidden,
            kmeans_max_iter: k.max_iter,
            kmeans_tol: k.tol,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn path_value(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 24] = [
        "name",
        "seed",
        "cube",
        "split",
        "envmodel",
        "out",
        "train_per_class",
        "alpha",
        "k_pseudo",
        "learning_rate",
        "epochs",
        "batch_size",
        "patch_size",
        "vanilla_mode",
        "update_features",
        "update_discriminator",
        "backbone",
        "feature_dim",
        "head_hidden",
        "conv_channels",
        "disc_hidden",
        "kmeans_max_iter",
        "kmeans_tol",
        "deterministic",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "name" => self.name = v.to_string(),
            "seed" => self.seed = parse_value(key, v)?,
            "cube" => self.cube = opt_path(v),
            "split" => self.split = opt_path(v),
            "envmodel" => self.envmodel = opt_path(v),
            "out" => self.out = opt_path(v),
            "train_per_class" => self.train_per_class = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "k_pseudo" => self.k_pseudo = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "patch_size" => self.patch_size = parse_value(key, v)?,
            "vanilla_mode" => self.vanilla_mode = parse_value(key, v)?,
            "update_features" => self.update_features = parse_value(key, v)?,
            "update_discriminator" => self.update_discriminator = parse_value(key, v)?,
            "backbone" => {
                self.backbone = v
                    .parse()
                    .map_err(|_| Error::Config(format!("unknown backbone {v:?}")))?
            }
            "feature_dim" => self.feature_dim = parse_value(key, v)?,
            "head_hidden" => self.head_hidden = parse_value(key, v)?,
            "conv_channels" => self.conv_channels = parse_list(key, v)?,
            "disc_hidden" => {
                let l = parse_list(key, v)?;
                self.disc_hidden = l
                    .try_into()
                    .map_err(|_| Error::Config(format!("disc_hidden needs two widths, got {v:?}")))?;
            }
            "kmeans_max_iter" => self.kmeans_max_iter = parse_value(key, v)?,
            "kmeans_tol" => self.kmeans_tol = parse_value(key, v)?,
            // Runs are always single-threaded; accepted for provenance only.
            "deterministic" => {
                let _: bool = parse_value(key, v)?;
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines. `#` starts a comment; repeated or unknown
    /// keys are errors. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", no + 1))
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", no + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, strip_kind(&e))))?;
        }
        for p in [&mut cfg.cube, &mut cfg.split, &mut cfg.envmodel, &mut cfg.out]
            .into_iter()
            .flatten()
        {
            *p = data::resolve_path(base, p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::ConfigNotFound(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Every key in a fixed order, one per line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("name", self.name.clone());
        put("seed", self.seed.to_string());
        put("cube", path_value(&self.cube));
        put("split", path_value(&self.split));
        put("envmodel", path_value(&self.envmodel));
        put("out", path_value(&self.out));
        put("train_per_class", self.train_per_class.to_string());
        put("alpha", self.alpha.to_string());
        put("k_pseudo", self.k_pseudo.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("patch_size", self.patch_size.to_string());
        put("vanilla_mode", self.vanilla_mode.to_string());
        put("update_features", self.update_features.to_string());
        put("update_discriminator", self.update_discriminator.to_string());
        put("backbone", self.backbone.to_string());
        put("feature_dim", self.feature_dim.to_string());
        put("head_hidden", self.head_hidden.to_string());
        put("conv_channels", join_list(&self.conv_channels));
        put("disc_hidden", join_list(&self.disc_hidden));
        put("kmeans_max_iter", self.kmeans_max_iter.to_string());
        put("kmeans_tol", self.kmeans_tol.to_string());
        put("deterministic", "true".into());
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        data::create_dir(dir)?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            k_pseudo: self.k_pseudo,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patch_size: self.patch_size,
            seed: self.seed + SHUFFLE_SEED_OFFSET,
            vanilla_mode: self.vanilla_mode,
            update_features: self.update_features,
            update_discriminator: self.update_discriminator,
        }
    }

    pub fn net_config(&self, cube: &HsiCube) -> NetConfig {
        NetConfig {
            feature_dim: self.feature_dim,
            conv_channels: self.conv_channels.clone(),
            head_hidden: self.head_hidden,
            disc_hidden: self.disc_hidden,
            ..NetConfig::new(
                self.backbone,
                cube.class_count as usize,
                self.k_pseudo,
                self.patch_size,
                cube.bands,
                self.seed + INIT_SEED_OFFSET,
            )
        }
    }

    pub fn kmeans_options(&self) -> KMeansOptions {
        KMeansOptions {
            max_iter: self.kmeans_max_iter,
            tol: self.kmeans_tol,
        }
    }

    /// The configured split, or `train_per_class` pixels of every class.
    pub fn split_spec(&self, cube: &HsiCube) -> Result<SplitSpec> {
        match &self.split {
            Some(p) => SplitSpec::load(p),
            None => Ok(SplitSpec::uniform(
                cube.class_count,
                self.train_per_class,
                self.seed + SPLIT_SEED_OFFSET,
            )),
        }
    }
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "adverdecom",
    version,
    about = "Adversarial intrinsic decomposition for hyperspectral classification",
    long_about = "Adversarial intrinsic decomposition for hyperspectral classification.\n\n\
        Runs are single-threaded and deterministic; ADVERDECOM_DETERMINISTIC=1 is accepted for \
        compatibility. Errors print one line `error[<kind>]: <message>`; exit code 1 for \
        failures, 2 for usage errors."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene (cube, environment map, scene spec).
    Synth(SynthArgs),
    /// Fit environment pseudo-classes with k-means.
    Cluster(ClusterArgs),
    /// Train a network and write a checkpoint plus history.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test pixels of a split.
    Eval(EvalArgs),
    /// Render a classification map.
    PredictMap(MapArgs),
    /// Run the adversarial and vanilla arms on standard synthetic scenes.
    ReproduceSynth(ReproArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene spec JSON; the standard 64x64 scene when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the reflectance and shading factors (R.bin, S.bin).
    #[arg(long)]
    factors: bool,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Fit on the training pixels of this split; all labeled pixels otherwise.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Output directory; defaults to `<cube>-envmodel` next to the cube.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    cube: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    /// Environment model from `cluster`; fitted on the training pixels when omitted.
    #[arg(long)]
    envmodel: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    vanilla: bool,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print one line per epoch.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    /// Split whose test pixels are scored; defaults to the checkpoint's split.json.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write map.ppm and legend.json.
    #[arg(long)]
    map: bool,
    /// Predict every pixel in the map, not just labeled ones.
    #[arg(long)]
    full_scene: bool,
}

#[derive(Args, Debug)]
struct MapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    full_scene: bool,
}

#[derive(Args, Debug)]
struct ReproArgs {
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run_command<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("usage error")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::PredictMap(a) => cmd_map(a),
        Command::ReproduceSynth(a) => cmd_repro(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => data::read_json::<SceneSpec>(p)?,
        None => SceneSpec::standard(a.seed.unwrap_or(0)),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let scene = synth::generate_scene(&spec)?;
    data::save_cube(&scene.cube, &a.out)?;
    data::write_u16_le(&a.out.join(ENV_MAP_FILE), &scene.env_map)?;
    data::write_json(&a.out.join(SCENE_FILE), &spec)?;
    if a.factors {
        data::write_f32_le(&a.out.join("R.bin"), &scene.reflectance)?;
        data::write_f32_le(&a.out.join("S.bin"), &scene.shading)?;
    }
    println!(
        "wrote {}x{}x{} scene ({} classes, {} environments) to {}",
        spec.height,
        spec.width,
        spec.bands,
        spec.class_count,
        spec.env_count,
        a.out.display()
    );
    Ok(())
}

/// Loads and band-normalizes a cube directory.
fn load_normalized(dir: &Path) -> Result<HsiCube> {
    data::normalize_bands(&data::load_cube(dir)?)
}

fn cmd_cluster(a: ClusterArgs) -> Result<()> {
    let cube = load_normalized(&a.cube)?;
    let coords = match &a.split {
        Some(p) => data::split_indices(&cube, &SplitSpec::load(p)?)?.train,
        None => (0..cube.height)
            .flat_map(|r| (0..cube.width).map(move |c| (r, c)))
            .filter(|&(r, c)| cube.label(r, c) != 0)
            .collect(),
    };
    let spectra: Vec<f64> = coords
        .iter()
        .flat_map(|&(r, c)| cube.spectrum(r, c).iter().map(|&v| v as f64))
        .collect();
    let opts = KMeansOptions {
        max_iter: a.max_iter,
        tol: a.tol,
    };
    let model = pseudo_env::kmeans_fit(&spectra, cube.bands, a.k, a.seed, &opts)?;
    let out = a.out.clone().unwrap_or_else(|| {
        let mut s = a.cube.clone().into_os_string();
        s.push("-envmodel");
        PathBuf::from(s)
    });
    model.save(&out)?;
    let mut line = format!(
        "k-means K={} on {} pixels: objective {:.6}, {} iterations -> {}",
        model.k,
        coords.len(),
        model.objective,
        model.iterations_run,
        out.display()
    );
    let env_path = a.cube.join(ENV_MAP_FILE);
    if env_path.exists() {
        let env_map = data::read_u16_le(&env_path, cube.pixel_count())?;
        let e = env_map.iter().copied().max().unwrap_or(1).max(1) as usize;
        let truth: Vec<u16> = coords.iter().map(|&(r, c)| env_map[r * cube.width + c]).collect();
        let assigned: Vec<u16> = coords
            .iter()
            .map(|&(r, c)| model.assign(cube.spectrum(r, c)))
            .collect::<Result<_>>()?;
        let agree = pseudo_env::matched_agreement(&assigned, &truth, model.k, e);
        let _ = write!(line, "; environment agreement {agree:.4}");
    }
    println!("{line}");
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(p) = a.cube {
        cfg.cube = Some(p);
    }
    if let Some(p) = a.split {
        cfg.split = Some(p);
    }
    if let Some(p) = a.envmodel {
        cfg.envmodel = Some(p);
    }
    if let Some(p) = a.out {
        cfg.out = Some(p);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(x) = a.alpha {
        cfg.alpha = x;
    }
    if a.vanilla {
        cfg.vanilla_mode = true;
    }
    let verbose = a.verbose;
    let run = train_run(&cfg, |r| {
        if verbose {
            eprintln!(
                "epoch {:>4}  L1 {:.4}  C1 {:.4}  C2 {:.4}  disc_acc {:.3}  train_oa {:.3}",
                r.epoch, r.l1, r.c1, r.c2, r.disc_acc, r.train_oa
            );
        }
    })?;
    match run.history.records.last() {
        Some(r) => println!(
            "trained {} epochs: C1 {:.4}  C2 {:.4}  train OA {:.2} -> {}",
            r.epoch,
            r.c1,
            r.c2,
            r.train_oa * 100.0,
            run.out.display()
        ),
        None => println!("0 epochs; wrote initial parameters to {}", run.out.display()),
    }
    Ok(())
}

/// What `train` produced.
pub struct TrainRun {
    pub out: PathBuf,
    pub history: train::TrainHistory,
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// The `train` command as a function: trains per `cfg` and writes the
/// checkpoint, `history.csv`, `split.json` and the resolved `config.cfg`
/// into `cfg.out`.
pub fn train_run(
    cfg: &ExperimentConfig,
    mut on_epoch: impl FnMut(&train::EpochRecord),
) -> Result<TrainRun> {
    let cube_dir = cfg
        .cube
        .clone()
        .ok_or_else(|| Error::Config("no cube given (--cube or cube = ...)".into()))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory given (--out or out = ...)".into()))?;
    let cube = load_normalized(&cube_dir)?;
    let spec = cfg.split_spec(&cube)?;
    let split = data::make_split(&cube, &spec, cfg.patch_size)?;
    let env_model = match &cfg.envmodel {
        Some(p) => EnvModel::load(p)?,
        None => pseudo_env::fit_on_samples(
            &split.train,
            cube.bands,
            cfg.k_pseudo,
            cfg.seed + KMEANS_SEED_OFFSET,
            &cfg.kmeans_options(),
        )?,
    };
    if env_model.k != cfg.k_pseudo || env_model.dim != cube.bands {
        return Err(Error::Validation(format!(
            "environment model has K={} over {} bands; run expects K={} over {}",
            env_model.k, env_model.dim, cfg.k_pseudo, cube.bands
        )));
    }
    let net = cfg.net_config(&cube);
    net.validate()?;
    let tc = cfg.train_config();
    let (params, history) =
        train::train_with::<f32>(&split.train, &net, &tc, Some(&env_model), &mut on_epoch)?;

    data::create_dir(&out)?;
    nets::save_checkpoint(&params, history.records.len(), &out)?;
    let path = out.join(HISTORY_FILE);
    fs::write(&path, history.to_csv()).map_err(|e| Error::io(&path, e))?;
    spec.save(&out.join(SPLIT_FILE))?;
    let mut resolved = cfg.clone();
    resolved.cube = Some(absolute(&cube_dir));
    resolved.split = resolved.split.as_deref().map(absolute);
    resolved.envmodel = resolved.envmodel.as_deref().map(absolute);
    resolved.out = Some(absolute(&out));
    resolved.save(&out)?;
    Ok(TrainRun { out, history })
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (params, _) = nets::load_checkpoint::<f32>(&a.checkpoint)?;
    let cube = load_normalized(&a.cube)?;
    let split_path = a.split.unwrap_or_else(|| a.checkpoint.join(SPLIT_FILE));
    let spec = SplitSpec::load(&split_path)?;
    let idx = data::split_indices(&cube, &spec)?;
    let (_, report) = eval::evaluate(&params, &cube, &idx.test, EVAL_BATCH)?;
    data::create_dir(&a.out)?;
    report.save(&a.out.join(METRICS_FILE))?;
    if a.map {
        let mode = if a.full_scene {
            MapMode::FullScene
        } else {
            MapMode::LabeledOnly
        };
        let map = eval::predict_map(&params, &cube, mode, EVAL_BATCH)?;
        eval::write_map(&a.out, "map", &map, &cube, &DEFAULT_PALETTE)?;
    }
    println!("{}  ({} test pixels)", report.summary_line(), idx.test.len());
    Ok(())
}

fn cmd_map(a: MapArgs) -> Result<()> {
    let (params, _) = nets::load_checkpoint::<f32>(&a.checkpoint)?;
    let cube = load_normalized(&a.cube)?;
    let mode = if a.full_scene {
        MapMode::FullScene
    } else {
        MapMode::LabeledOnly
    };
    let map = eval::predict_map(&params, &cube, mode, EVAL_BATCH)?;
    eval::write_map(&a.out, "map", &map, &cube, &DEFAULT_PALETTE)?;
    data::write_u16_le(&a.out.join("map.bin"), &map)?;
    println!(
        "wrote {}x{} map to {}",
        cube.width,
        cube.height,
        a.out.join("map.ppm").display()
    );
    Ok(())
}

/// Settings shared by both arms of the synthetic comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproOptions {
    pub epochs: usize,
    pub alpha: f64,
    pub k_pseudo: usize,
    pub per_class: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub backbone: Backbone,
}

impl Default for ReproOptions {
    fn default() -> Self {
        ReproOptions {
            epochs: 30,
            alpha: 1.0,
            k_pseudo: 3,
            per_class: 50,
            learning_rate: 0.01,
            batch_size: 64,
            patch_size: 5,
            backbone: Backbone::Compact2d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

impl Scores {
    fn of(r: &MetricsReport) -> Self {
        Scores {
            oa: r.oa,
            aa: r.aa,
            kappa: r.kappa,
        }
    }

    fn mean(rows: &[Scores]) -> Self {
        let n = rows.len() as f64;
        Scores {
            oa: rows.iter().map(|s| s.oa).sum::<f64>() / n,
            aa: rows.iter().map(|s| s.aa).sum::<f64>() / n,
            kappa: rows.iter().map(|s| s.kappa).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproRow {
    pub seed: u64,
    pub arm: String,
    #[serde(flatten)]
    pub scores: Scores,
}

/// Top-level `metrics.json` of `reproduce-synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproSummary {
    pub options: ReproOptions,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReproRow>,
    pub mean_adver: Scores,
    pub mean_vanilla: Scores,
    /// Mean OA difference, adversarial minus vanilla, in percentage points.
    pub oa_gain_pp: f64,
}

impl ReproSummary {
    pub fn table(&self) -> String {
        let mut s = String::from("seed    arm        OA      AA      kappa\n");
        let mut line = |seed: &str, arm: &str, sc: &Scores| {
            let _ = writeln!(
                s,
                "{seed:<7} {arm:<8} {:>6.2}  {:>6.2}  {:>6.2}",
                sc.oa * 100.0,
                sc.aa * 100.0,
                sc.kappa * 100.0
            );
        };
        for r in &self.rows {
            line(&r.seed.to_string(), &r.arm, &r.scores);
        }
        line("mean", "adver", &self.mean_adver);
        line("mean", "vanilla", &self.mean_vanilla);
        s
    }
}

/// One arm on the standard scene for `seed`: scene = seed, split = seed+1,
/// k-means = seed+2, init = seed+3, shuffle = seed+4. Writes the arm's
/// checkpoint, history and metrics into `out` when given.
pub fn synth_arm(
    seed: u64,
    opts: &ReproOptions,
    vanilla: bool,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let scene = synth::generate_scene(&SceneSpec::standard(seed))?;
    let cube = data::normalize_bands(&scene.cube)?;
    let spec = SplitSpec::uniform(cube.class_count, opts.per_class, seed + SPLIT_SEED_OFFSET);
    let idx = data::split_indices(&cube, &spec)?;
    let train_samples = data::make_samples(&cube, &idx.train, opts.patch_size)?;
    let env = pseudo_env::fit_on_samples(
        &train_samples,
        cube.bands,
        opts.k_pseudo,
        seed + KMEANS_SEED_OFFSET,
        &KMeansOptions::default(),
    )?;
    let net = NetConfig::new(
        opts.backbone,
        cube.class_count as usize,
        opts.k_pseudo,
        opts.patch_size,
        cube.bands,
        seed + INIT_SEED_OFFSET,
    );
    let tc = TrainConfig {
        alpha: if vanilla { 0.0 } else { opts.alpha },
        k_pseudo: opts.k_pseudo,
        learning_rate: opts.learning_rate,
        epochs: opts.epochs,
        batch_size: opts.batch_size,
        patch_size: opts.patch_size,
        seed: seed + SHUFFLE_SEED_OFFSET,
        vanilla_mode: vanilla,
        ..TrainConfig::default()
    };
    let (params, history) = train::train::<f32>(&train_samples, &net, &tc, Some(&env))?;
    let (_, report) = eval::evaluate(&params, &cube, &idx.test, EVAL_BATCH)?;
    if let Some(dir) = out {
        data::create_dir(dir)?;
        nets::save_checkpoint(&params, history.records.len(), dir)?;
        let path = dir.join(HISTORY_FILE);
        fs::write(&path, history.to_csv()).map_err(|e| Error::io(&path, e))?;
        report.save(&dir.join(METRICS_FILE))?;
    }
    Ok(report)
}

/// Both arms for every seed; writes per-arm artifacts under
/// `out/seed-<s>/<arm>/` and the summary to `out/metrics.json`.
pub fn reproduce_synth(seeds: &[u64], opts: &ReproOptions, out: &Path) -> Result<ReproSummary> {
    if seeds.is_empty() {
        return Err(Error::Argument("at least one seed is required".into()));
    }
    data::create_dir(out)?;
    let mut rows = Vec::new();
    let (mut adv, mut van) = (Vec::new(), Vec::new());
    for &seed in seeds {
        for (arm, vanilla) in [("adver", false), ("vanilla", true)] {
            let dir = out.join(format!("seed-{seed}")).join(arm);
            let report = synth_arm(seed, opts, vanilla, Some(&dir))?;
            let scores = Scores::of(&report);
            if vanilla {
                van.push(scores)
            } else {
                adv.push(scores)
            }
            rows.push(ReproRow {
                seed,
                arm: arm.into(),
                scores,
            });
        }
    }
    let mean_adver = Scores::mean(&adv);
    let mean_vanilla = Scores::mean(&van);
    let summary = ReproSummary {
        options: opts.clone(),
        seeds: seeds.to_vec(),
        rows,
        mean_adver,
        mean_vanilla,
        oa_gain_pp: (mean_adver.oa - mean_vanilla.oa) * 100.0,
    };
    data::write_json(&out.join(METRICS_FILE), &summary)?;
    let path = out.join("summary.txt");
    fs::write(&path, summary.table()).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

fn cmd_repro(a: ReproArgs) -> Result<()> {
    let opts = ReproOptions {
        epochs: a.epochs,
        alpha: a.alpha,
        k_pseudo: a.k,
        per_class: a.per_class,
        ..ReproOptions::default()
    };
    let summary = reproduce_synth(&a.seeds, &opts, &a.out)?;
    print!("{}", summary.table());
    println!("OA gain (adver - vanilla): {:+.2} pp", summary.oa_gain_pp);
    Ok(())
}
