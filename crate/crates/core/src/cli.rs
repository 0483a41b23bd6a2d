//! Command-line front end: `generate`, `register`, `train`, `eval`, `metrics`.
//!
//! Settings come from an optional TOML file (sections `phantom`, `data`,
//! `model`, `loss`, `train`, `eval`, plus a top-level `seed`), overridden by
//! flags. Every command writes the fully resolved settings next to its
//! outputs as `resolved_config.toml`, and removes whatever it wrote if it
//! fails part-way.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::image::{load_volume, Mask, Slice, Volume};
use crate::loss::LossConfig;
use crate::metrics;
use crate::model::ModelConfig;
use crate::phantom::{build_dataset, split_dataset, PhantomCase, PhantomConfig, PhantomPair};
use crate::registration::{register_rigid, resample, Interpolation, RegistrationOptions, RigidTransform2D};
use crate::seed;
use crate::trainer::{self, checkpoint_paths, EvalOptions, LrSchedule, TrainConfig, Trainer};
use crate::weights::{load_weights, save_weights};

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
/// Largest injected translation (pixels) and rotation (degrees) for `--displace`.
pub const DISPLACE_MAX_PX: f64 = 6.0;
pub const DISPLACE_MAX_DEG: f64 = 12.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub count: usize,
    /// Working slice size after downsampling.
    pub size: usize,
    /// Slices per case.
    pub depth: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            count: 150,
            size: 64,
            depth: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input_size: usize,
    /// Channel counts are the full-width ones divided by this.
    pub width_divisor: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            input_size: 64,
            width_divisor: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub min_learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub augment: bool,
    pub checkpoint_every: usize,
    pub select_best: bool,
    pub recompute_bn_stats: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            lr_schedule: t.lr_schedule,
            min_learning_rate: t.min_learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            augment: t.augment,
            checkpoint_every: t.checkpoint_every,
            select_best: t.select_best,
            recompute_bn_stats: t.recompute_bn_stats,
        }
    }
}

/// Everything a run depends on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub eval: EvalOptions,
    pub registration: RegistrationOptions,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::scaled(
            self.model.input_size,
            self.model.width_divisor,
            seed::derive(self.seed, "model-init"),
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            lr_schedule: t.lr_schedule,
            min_learning_rate: t.min_learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            seed: seed::derive(self.seed, "train"),
            augment: t.augment,
            checkpoint_every: t.checkpoint_every,
            select_best: t.select_best,
            recompute_bn_stats: t.recompute_bn_stats,
            loss: self.loss.clone(),
            model: self.model_config(),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.phantom.validate()?;
        self.train_config().validate()?;
        if self.data.count == 0 || self.data.depth == 0 {
            bail!(Error::Config("data.count and data.depth must be ≥ 1".into()));
        }
        if self.data.size == 0 || self.data.size > self.phantom.image_size {
            bail!(Error::Config(format!(
                "data.size {} must lie in 1..={} (phantom.image_size)",
                self.data.size, self.phantom.image_size
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }
}

/// Removes every tracked output unless [`OutputGuard::commit`] is called.
#[derive(Default)]
pub struct OutputGuard {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    pub fn dir(&mut self, path: &Path) -> anyhow::Result<()> {
        if !path.exists() {
            fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
            self.dirs.push(path.to_path_buf());
        }
        Ok(())
    }

    pub fn write(&mut self, path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
        self.files.push(path.to_path_buf());
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    pub fn track(&mut self, path: &Path) {
        self.files.push(path.to_path_buf());
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        // newest first so nested directories empty out before their parents
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "cect-forge", version, about = "Synthetic contrast enhancement for cardiac CT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; every random stream is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate phantom cases as HUV1 volumes plus a manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        /// Working slice size.
        #[arg(long)]
        size: Option<usize>,
        /// Slices per case.
        #[arg(long)]
        depth: Option<usize>,
        /// Noise standard deviation in HU at the rendered resolution.
        #[arg(long)]
        noise: Option<f32>,
        /// Move each CECT by a random rigid transform and record it.
        #[arg(long)]
        displace: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Rigidly align each slice of a moving volume to a fixed volume.
    Register {
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        /// Resampled moving volume.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Continue from a checkpoint (`.cwt`, with its `.json` sidecar alongside).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate weights on the test split of a dataset.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        weights: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score every case instead of the test split.
        #[arg(long)]
        all: bool,
        /// Use the true CECT as the prediction.
        #[arg(long)]
        oracle: bool,
        #[command(flatten)]
        common: Common,
    },
    /// NMI, PSNR and optionally Dice between two volumes.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Region mask (e.g. the heart mask) restricting every metric.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Also report Dice of the threshold segmentations; needs --mask.
        #[arg(long)]
        dice: bool,
        #[arg(long, default_value_t = 300.0)]
        v_th: f32,
        #[arg(long, default_value_t = metrics::DEFAULT_PSNR_PEAK)]
        peak: f64,
        #[arg(long, default_value_t = metrics::DEFAULT_NMI_BINS)]
        bins: usize,
    },
}

/// Per-case manifest entry. Paths are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestCase {
    pub index: usize,
    pub seed: u64,
    pub ct: String,
    pub cect: String,
    pub chamber_mask: String,
    pub heart_mask: String,
    pub chamber_area_px: Vec<usize>,
    pub chamber_volume_ml: f64,
    pub hu_left: f32,
    pub hu_right: f32,
    /// Transform applied to the CECT and chamber mask (output = input moved by it).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub displacement: Option<RigidTransform2D>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub size: usize,
    pub depth: usize,
    pub slice_thickness_mm: f32,
    pub cases: Vec<ManifestCase>,
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn slices_to_volume(slices: &[Slice], thickness: f32) -> anyhow::Result<Volume> {
    Ok(Volume::from_slices(slices, thickness)?)
}

fn masks_to_volume(masks: &[Mask], spacing: [f32; 2], thickness: f32) -> anyhow::Result<Volume> {
    Ok(Volume::from_masks(masks, [spacing[0], spacing[1], thickness])?)
}

fn case_dir(index: usize) -> String {
    format!("case_{index:04}")
}

pub fn cmd_generate(
    out: &Path,
    overrides: (Option<usize>, Option<usize>, Option<usize>, Option<f32>),
    displace: bool,
    common: &Common,
) -> anyhow::Result<Manifest> {
    let mut cfg = resolve(common)?;
    let (count, size, depth, noise) = overrides;
    if let Some(c) = count {
        if c == 0 {
            bail!(Error::Usage("--count must be ≥ 1".into()));
        }
        cfg.data.count = c;
    }
    if let Some(s) = size {
        cfg.data.size = s;
        cfg.model.input_size = s;
    }
    if let Some(d) = depth {
        cfg.data.depth = d;
    }
    if let Some(n) = noise {
        cfg.phantom.noise_sigma = n;
    }
    cfg.validate()?;
    let mut guard = OutputGuard::default();
    guard.dir(out)?;
    let data_seed = seed::derive(cfg.seed, "data");
    let mut cases = build_dataset(&cfg.phantom, cfg.data.count, cfg.data.depth, cfg.data.size, data_seed)?;
    let thickness = cfg.phantom.slice_thickness_mm;
    let mut entries = Vec::new();
    for case in &mut cases {
        if displace {
            let mut rng = seed::rng(seed::derive_indexed(cfg.seed, "displace", case.index as u64));
            let t = RigidTransform2D::new(
                rng.random_range(-DISPLACE_MAX_PX..=DISPLACE_MAX_PX),
                rng.random_range(-DISPLACE_MAX_PX..=DISPLACE_MAX_PX),
                rng.random_range(-DISPLACE_MAX_DEG..=DISPLACE_MAX_DEG),
            );
            case.slices = case.slices.iter().map(|p| p.displaced(t, cfg.phantom.hu_air)).collect();
        }
        let dir_name = case_dir(case.index);
        let dir = out.join(&dir_name);
        guard.dir(&dir)?;
        let spacing = case.slices[0].ct.spacing;
        let ct: Vec<Slice> = case.slices.iter().map(|p| p.ct.clone()).collect();
        let cect: Vec<Slice> = case.slices.iter().map(|p| p.cect.clone()).collect();
        let chamber: Vec<Mask> = case.slices.iter().map(|p| p.chamber_mask.clone()).collect();
        let heart: Vec<Mask> = case.slices.iter().map(|p| p.heart_mask.clone()).collect();
        for (name, vol) in [
            ("ct.huv", slices_to_volume(&ct, thickness)?),
            ("cect.huv", slices_to_volume(&cect, thickness)?),
            ("chamber_mask.huv", masks_to_volume(&chamber, spacing, thickness)?),
            ("heart_mask.huv", masks_to_volume(&heart, spacing, thickness)?),
        ] {
            guard.write(&dir.join(name), vol.to_bytes())?;
        }
        let first = &case.slices[0];
        entries.push(ManifestCase {
            index: case.index,
            seed: case.seed,
            ct: format!("{dir_name}/ct.huv"),
            cect: format!("{dir_name}/cect.huv"),
            chamber_mask: format!("{dir_name}/chamber_mask.huv"),
            heart_mask: format!("{dir_name}/heart_mask.huv"),
            chamber_area_px: case.slices.iter().map(|p| p.chamber_area_px).collect(),
            chamber_volume_ml: case.chamber_volume_ml(thickness),
            hu_left: first.hu_left,
            hu_right: first.hu_right,
            displacement: first.displacement,
        });
    }
    let manifest = Manifest {
        seed: cfg.seed,
        size: cfg.data.size,
        depth: cfg.data.depth,
        slice_thickness_mm: thickness,
        cases: entries,
    };
    guard.write(&out.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    guard.write(&out.join(RESOLVED_CONFIG), cfg.to_toml())?;
    guard.commit();
    info!("wrote {} cases to {}", manifest.cases.len(), out.display());
    Ok(manifest)
}

/// Load a generated dataset back into memory.
pub fn load_dataset(dir: &Path) -> anyhow::Result<(Manifest, Vec<PhantomCase>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut cases = Vec::with_capacity(manifest.cases.len());
    for entry in &manifest.cases {
        let ct = load_volume(dir.join(&entry.ct))?;
        let cect = load_volume(dir.join(&entry.cect))?;
        let chamber = load_volume(dir.join(&entry.chamber_mask))?;
        let heart = load_volume(dir.join(&entry.heart_mask))?;
        for (name, v) in [("cect", &cect), ("chamber_mask", &chamber), ("heart_mask", &heart)] {
            if (v.width, v.height, v.depth) != (ct.width, ct.height, ct.depth) {
                bail!(Error::dim(
                    "dataset",
                    format!("case {}: {name} shape differs from ct", entry.index)
                ));
            }
        }
        let slices = ct
            .slices()
            .into_iter()
            .zip(cect.slices())
            .zip(chamber.masks())
            .zip(heart.masks())
            .map(|(((ct, cect), chamber_mask), heart_mask)| PhantomPair {
                ct,
                cect,
                chamber_area_px: chamber_mask.count(),
                chamber_mask,
                heart_mask,
                hu_left: entry.hu_left,
                hu_right: entry.hu_right,
                displacement: entry.displacement,
            })
            .collect();
        cases.push(PhantomCase {
            index: entry.index,
            seed: entry.seed,
            slices,
        });
    }
    Ok((manifest, cases))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SliceRegistration {
    pub slice: usize,
    pub tx: f64,
    pub ty: f64,
    pub theta_deg: f64,
    pub mi_initial: f64,
    pub mi_final: f64,
}

pub fn cmd_register(moving: &Path, fixed: &Path, out: &Path, common: &Common) -> anyhow::Result<Vec<SliceRegistration>> {
    let cfg = resolve(common)?;
    let mv = load_volume(moving)?;
    let fx = load_volume(fixed)?;
    if (mv.width, mv.height, mv.depth) != (fx.width, fx.height, fx.depth) {
        bail!(Error::dim(
            "register",
            format!(
                "moving {}×{}×{} vs fixed {}×{}×{}",
                mv.width, mv.height, mv.depth, fx.width, fx.height, fx.depth
            )
        ));
    }
    let mut results = Vec::new();
    let mut warped = Vec::new();
    for (k, (m, f)) in mv.slices().iter().zip(fx.slices()).enumerate() {
        let r = register_rigid(m, &f, &cfg.registration)?;
        warped.push(resample(m, &r.transform, Interpolation::Bilinear, cfg.registration.fill_hu));
        results.push(SliceRegistration {
            slice: k,
            tx: r.transform.tx,
            ty: r.transform.ty,
            theta_deg: r.transform.theta_deg,
            mi_initial: r.mi_initial,
            mi_final: r.mi_final,
        });
    }
    let mut guard = OutputGuard::default();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        guard.dir(parent)?;
    }
    guard.write(out, slices_to_volume(&warped, mv.spacing[2])?.to_bytes())?;
    guard.commit();
    Ok(results)
}

fn split_cases(cases: &[PhantomCase], seed_value: u64) -> anyhow::Result<(Vec<PhantomCase>, Vec<PhantomCase>, Vec<PhantomCase>)> {
    let split = split_dataset(cases.len(), seed::derive(seed_value, "split"))?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| cases[i].clone()).collect::<Vec<_>>();
    Ok((pick(&split.train), pick(&split.val), pick(&split.test)))
}

fn flatten(cases: &[PhantomCase]) -> Vec<PhantomPair> {
    cases.iter().flat_map(|c| c.slices.iter().cloned()).collect()
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub resume: Option<&'a Path>,
}

pub fn cmd_train(args: &TrainArgs, common: &Common) -> anyhow::Result<trainer::TrainHistory> {
    let mut cfg = resolve(common)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.train.learning_rate = lr;
    }
    cfg.train_config().validate()?;
    let (manifest, cases) = load_dataset(args.data)?;
    if manifest.size != cfg.model.input_size {
        bail!(Error::Config(format!(
            "dataset slices are {0}×{0} but model.input_size is {1}",
            manifest.size, cfg.model.input_size
        )));
    }
    let (train_cases, val_cases, _) = split_cases(&cases, manifest.seed)?;
    let (train_set, val_set) = (flatten(&train_cases), flatten(&val_cases));
    let tcfg = cfg.train_config();

    let mut guard = OutputGuard::default();
    guard.dir(args.out)?;
    let ckpt_dir = args.out.join("checkpoints");
    guard.dir(&ckpt_dir)?;
    guard.write(&args.out.join(RESOLVED_CONFIG), cfg.to_toml())?;
    let mut t = match args.resume {
        Some(w) => Trainer::resume(tcfg.clone(), w, &w.with_extension("json"))?,
        None => Trainer::new(tcfg.clone())?,
    };
    let every = tcfg.checkpoint_every;
    let total = tcfg.epochs;
    while t.epoch() < total {
        let r = t.run_epoch(&train_set, &val_set)?.clone();
        info!(
            "epoch {}/{total}: train {:.5} val {:.5} val dice {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.val_dice
        );
        if (every > 0 && r.epoch % every == 0) || r.epoch == total {
            let (w, s) = checkpoint_paths(&ckpt_dir, r.epoch);
            guard.track(&w);
            guard.track(&s);
            if t.best.is_some() {
                guard.track(&trainer::best_weights_path(&w));
            }
            t.save_checkpoint(&ckpt_dir)?;
        }
    }
    let weights = args.out.join("weights.cwt");
    let last = args.out.join("last.cwt");
    guard.track(&weights);
    guard.track(&last);
    save_weights(t.selected_params(), &weights)?;
    save_weights(&t.params, &last)?;
    if let Some(b) = t.best.as_ref().filter(|_| tcfg.select_best) {
        info!("weights.cwt holds epoch {} (val loss {:.5})", b.epoch, b.val_loss);
    }
    guard.write(&args.out.join("history.csv"), t.history.to_csv())?;
    guard.commit();
    Ok(t.history)
}

pub struct EvalArgs<'a> {
    pub weights: Option<&'a Path>,
    pub data: &'a Path,
    pub out: &'a Path,
    pub all: bool,
    pub oracle: bool,
}

pub fn cmd_eval(args: &EvalArgs, common: &Common) -> anyhow::Result<metrics::EvalReport> {
    let cfg = resolve(common)?;
    let (manifest, cases) = load_dataset(args.data)?;
    let cases = if args.all {
        cases
    } else {
        split_cases(&cases, manifest.seed)?.2
    };
    let opts = EvalOptions {
        slice_thickness_mm: manifest.slice_thickness_mm,
        ..cfg.eval.clone()
    };
    let predictions: Vec<Vec<Slice>> = if args.oracle {
        cases.iter().map(|c| c.slices.iter().map(|p| p.cect.clone()).collect()).collect()
    } else {
        let w = args
            .weights
            .ok_or_else(|| Error::Usage("--weights is required unless --oracle is given".into()))?;
        let params = load_weights(w)?;
        trainer::predict_cases(&params, &cases)?
    };
    let e = trainer::evaluate_predictions(&cases, &predictions, &opts)?;

    let mut guard = OutputGuard::default();
    guard.dir(args.out)?;
    let pred_dir = args.out.join("predictions");
    guard.dir(&pred_dir)?;
    for ((case, preds), masks) in cases.iter().zip(&predictions).zip(&e.masks) {
        let spacing = preds[0].spacing;
        let name = case_dir(case.index);
        guard.write(
            &pred_dir.join(format!("{name}_cect.huv")),
            slices_to_volume(preds, opts.slice_thickness_mm)?.to_bytes(),
        )?;
        guard.write(
            &pred_dir.join(format!("{name}_chamber_mask.huv")),
            masks_to_volume(masks, spacing, opts.slice_thickness_mm)?.to_bytes(),
        )?;
    }
    guard.write(&args.out.join("report.json"), serde_json::to_string_pretty(&e.report)? + "\n")?;
    let ba_csv = e.bland_altman.as_ref().map(|b| b.to_csv()).unwrap_or_else(|| "mean,diff\n".into());
    guard.write(&args.out.join("bland_altman.csv"), ba_csv)?;
    let mut per = String::from("case,slice,nmi,psnr_db,dice\n");
    for s in &e.slices {
        per.push_str(&format!("{},{},{},{},{}\n", s.case, s.slice, s.nmi, s.psnr_db, s.dice));
    }
    guard.write(&args.out.join("slices.csv"), per)?;
    let mut vols = String::from("case,predicted_ml,true_ml,dv_percent\n");
    for v in &e.volumes {
        vols.push_str(&format!("{},{},{},{}\n", v.case, v.predicted_ml, v.true_ml, v.dv_percent));
    }
    guard.write(&args.out.join("volumes.csv"), vols)?;
    guard.write(&args.out.join(RESOLVED_CONFIG), cfg.to_toml())?;
    guard.commit();
    Ok(e.report)
}

/// Result of `metrics`; `psnr_db` is `"+inf"` for identical inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub nmi: f64,
    #[serde(with = "metrics::float_repr")]
    pub psnr_db: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
}

/// A volume viewed as one tall slice, so slice metrics cover every voxel.
fn as_slice(v: &Volume) -> Slice {
    Slice {
        width: v.width,
        height: v.height * v.depth,
        spacing: [v.spacing[0], v.spacing[1]],
        data: v.data.clone(),
    }
}

pub struct MetricsArgs<'a> {
    pub a: &'a Path,
    pub b: &'a Path,
    pub mask: Option<&'a Path>,
    pub dice: bool,
    pub v_th: f32,
    pub peak: f64,
    pub bins: usize,
}

pub fn cmd_metrics(args: &MetricsArgs) -> anyhow::Result<PairMetrics> {
    if args.dice && args.mask.is_none() {
        bail!(Error::Usage("--dice needs --mask (the region the threshold segmentation is restricted to)".into()));
    }
    let a = load_volume(args.a)?;
    let b = load_volume(args.b)?;
    if (a.width, a.height, a.depth) != (b.width, b.height, b.depth) {
        bail!(Error::dim(
            "metrics",
            format!(
                "{}×{}×{} vs {}×{}×{}",
                a.width, a.height, a.depth, b.width, b.height, b.depth
            )
        ));
    }
    let (sa, sb) = (as_slice(&a), as_slice(&b));
    let mask = match args.mask {
        Some(p) => {
            let m = load_volume(p)?;
            if (m.width, m.height, m.depth) != (a.width, a.height, a.depth) {
                bail!(Error::dim("metrics", "mask shape differs from the images"));
            }
            Some(Mask::from_slice(&as_slice(&m)))
        }
        None => None,
    };
    let nmi = metrics::nmi(&sa, &sb, mask.as_ref(), args.bins)?;
    let psnr_db = metrics::psnr(&sa, &sb, mask.as_ref(), args.peak)?;
    let dice = match (&mask, args.dice) {
        (Some(m), true) => Some(metrics::dice(
            &metrics::threshold_segment(&sa, args.v_th, m)?,
            &metrics::threshold_segment(&sb, args.v_th, m)?,
        )?),
        _ => None,
    };
    Ok(PairMetrics { nmi, psnr_db, dice })
}

fn configure_threads() {
    if let Some(n) = std::env::var("CECT_FORGE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads();
    match cli.command {
        Command::Generate {
            out,
            count,
            size,
            depth,
            noise,
            displace,
            common,
        } => {
            let m = cmd_generate(&out, (count, size, depth, noise), displace, &common)?;
            println!("generated {} cases in {}", m.cases.len(), out.display());
        }
        Command::Register {
            moving,
            fixed,
            out,
            common,
        } => {
            for r in cmd_register(&moving, &fixed, &out, &common)? {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::Train {
            data,
            out,
            epochs,
            batch_size,
            lr,
            resume,
            common,
        } => {
            let h = cmd_train(
                &TrainArgs {
                    data: &data,
                    out: &out,
                    epochs,
                    batch_size,
                    lr,
                    resume: resume.as_deref(),
                },
                &common,
            )?;
            if let Some(last) = h.epochs.last() {
                println!(
                    "trained {} epochs: train loss {:.6}, val loss {:.6}, val dice {:.4}",
                    last.epoch, last.train_loss, last.val_loss, last.val_dice
                );
            }
        }
        Command::Eval {
            weights,
            data,
            out,
            all,
            oracle,
            common,
        } => {
            let r = cmd_eval(
                &EvalArgs {
                    weights: weights.as_deref(),
                    data: &data,
                    out: &out,
                    all,
                    oracle,
                },
                &common,
            )?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Metrics {
            a,
            b,
            mask,
            dice,
            v_th,
            peak,
            bins,
        } => {
            let m = cmd_metrics(&MetricsArgs {
                a: &a,
                b: &b,
                mask: mask.as_deref(),
                dice,
                v_th,
                peak,
                bins,
            })?;
            println!("{}", serde_json::to_string(&m)?);
        }
    }
    Ok(())
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Error>().is_some_and(|e| matches!(e, Error::Usage(_))) {
                2
            } else {
                1
            }
        }
    }
}
