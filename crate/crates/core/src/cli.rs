//! Command-line front end: `synth`, `sample`, `train`, `eval`, `infer`, `ablate`.
//!
//! Settings resolve as flags > `--config` file > built-in desk defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::baselines::{estimate_baseline, BaselineMethod, BaselineSpec};
use crate::checkpoint::Checkpoint;
use crate::color::{angular_error, diagonal_correct, Illuminant};
use crate::config::{Precision, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, evaluate_model, geomean_report, infer_global, make_folds, FoldSplit, MetricsReport};
use crate::image::LinearImage;
use crate::io::manifest::{load_manifest, ManifestRecord};
use crate::io::patches::{write_patches, PatchRecord};
use crate::io::pnm;
use crate::io::synth::generate_synthetic;
use crate::nets::{EstimateLevel, Variant};
use crate::sampling::{sample_patch_pairs, SamplingMode};
use crate::scalar::Real;
use crate::training::{build_training_set, run_stages, write_trajectory_csv, StageId, StageOutcome, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "illumkit", version, about = "Illuminant estimation: data synthesis, training, evaluation and inference")]
#[command(after_help = "Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 numeric failure.\n\
                        ILLUMKIT_THREADS caps the worker thread count (default: all cores).")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (images, masks, manifest.csv).
    Synth(SynthArgs),
    /// Sample patch pairs from every manifest image and export them.
    Sample(SampleArgs),
    /// Train one stage or the whole stage chain.
    Train(TrainArgs),
    /// Evaluate a checkpoint and/or baselines on a manifest.
    Eval(EvalArgs),
    /// Estimate the illuminant of one image and write the corrected image.
    Infer(InferArgs),
    /// Train and evaluate a variant × sampling-mode grid.
    Ablate(AblateArgs),
}

/// Settings shared by every subcommand that reads a run configuration.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// INI configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set sgd.base_lr=0.005`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Training seed ([train] seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sampler seed ([sampler] seed).
    #[arg(long)]
    pub sampler_seed: Option<u64>,
    /// Steps per stage ([train] max_steps).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Network variant ([arch] variant).
    #[arg(long)]
    pub variant: Option<String>,
    /// Sampling mode: bright_dark or random ([sampler] mode).
    #[arg(long)]
    pub mode: Option<String>,
    /// Patches per image ([sampler] num_patches).
    #[arg(long)]
    pub num_patches: Option<usize>,
    /// Numeric precision: f32 or f64 ([train] precision).
    #[arg(long)]
    pub precision: Option<String>,
    /// Number of cross-validation folds ([data] folds).
    #[arg(long)]
    pub folds: Option<usize>,
    /// Fold-assignment seed ([data] fold_seed).
    #[arg(long)]
    pub fold_seed: Option<u64>,
    /// Fold excluded from training and used for evaluation ([data] holdout_fold).
    #[arg(long)]
    pub holdout_fold: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects SECTION.KEY=VALUE, got {o:?}")))?;
            let (section, key) = key
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("--set expects SECTION.KEY=VALUE, got {o:?}")))?;
            cfg.set(section.trim(), key.trim(), value)?;
        }
        let flags: [(&str, &str, Option<String>); 10] = [
            ("train", "seed", self.seed.map(|v| v.to_string())),
            ("sampler", "seed", self.sampler_seed.map(|v| v.to_string())),
            ("train", "max_steps", self.steps.map(|v| v.to_string())),
            ("arch", "variant", self.variant.clone()),
            ("sampler", "mode", self.mode.clone()),
            ("sampler", "num_patches", self.num_patches.map(|v| v.to_string())),
            ("train", "precision", self.precision.clone()),
            ("data", "folds", self.folds.map(|v| v.to_string())),
            ("data", "fold_seed", self.fold_seed.map(|v| v.to_string())),
            ("data", "holdout_fold", self.holdout_fold.map(|v| v.to_string())),
        ];
        for (section, key, value) in flags {
            if let Some(v) = value {
                cfg.set(section, key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// INI file; only its [synth] section is used, other sections are still validated.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Number of scenes.
    #[arg(long)]
    pub n: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset seed ([synth] seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Additive Gaussian noise std ([synth] noise_std).
    #[arg(long)]
    pub noise_std: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Dataset manifest (defaults to [train] manifest).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory for patches.csv and patches.illk.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest (defaults to [train] manifest).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Stage to train (1a, 1b, 2, 3, 4, joint) or `all` for the remaining chain.
    #[arg(long, default_value = "all")]
    pub stage: String,
    /// Checkpoint of the preceding stage.
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
    /// Output directory for stage_<id>.ckpt and loss_<id>.csv.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Baseline method(s): gray_world, white_patch, shades_of_gray, gray_edge. Repeatable.
    #[arg(long = "method")]
    pub methods: Vec<String>,
    /// Minkowski norm for shades_of_gray / gray_edge (`inf` for max).
    #[arg(long)]
    pub p: Option<f64>,
    /// Derivative order for gray_edge (1 or 2).
    #[arg(long)]
    pub order: Option<u8>,
    /// Gaussian smoothing sigma in pixels.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset manifest (defaults to [train] manifest).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Trained checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub baselines: BaselineArgs,
    /// Output directory for errors_<method>.csv and metrics.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (PFM, or P6 treated as sRGB-encoded unless --linear).
    #[arg(long)]
    pub image: PathBuf,
    /// Exclusion mask (PBM/PGM, nonzero = excluded).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// P6 input already holds linear values.
    #[arg(long)]
    pub linear: bool,
    /// Corrected output image (gamma-encoded P6); defaults to <stem>_corrected.ppm.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Dataset manifest (defaults to [train] manifest).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Comma-separated variants.
    #[arg(long, default_value = "contextual,central_only")]
    pub variants: String,
    /// Comma-separated sampling modes.
    #[arg(long, default_value = "bright_dark,random")]
    pub modes: String,
    /// Last stage trained per cell; the default compares context-level estimates.
    #[arg(long, default_value = "2")]
    pub through: String,
    /// Output directory.
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Train(a) => {
            let cfg = a.cfg.resolve()?;
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(&a, &cfg),
                Precision::F64 => cmd_train::<f64>(&a, &cfg),
            }
        }
        Command::Eval(a) => {
            let cfg = a.cfg.resolve()?;
            match cfg.precision {
                Precision::F32 => cmd_eval::<f32>(&a, &cfg),
                Precision::F64 => cmd_eval::<f64>(&a, &cfg),
            }
        }
        Command::Infer(a) => {
            let cfg = a.cfg.resolve()?;
            match cfg.precision {
                Precision::F32 => cmd_infer::<f32>(&a, &cfg),
                Precision::F64 => cmd_infer::<f64>(&a, &cfg),
            }
        }
        Command::Ablate(a) => {
            let cfg = a.cfg.resolve()?;
            match cfg.precision {
                Precision::F32 => cmd_ablate::<f32>(&a, &cfg),
                Precision::F64 => cmd_ablate::<f64>(&a, &cfg),
            }
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.spec {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    if let Some(n) = a.noise_std {
        cfg.synth.noise_std = n;
    }
    cfg.synth.validate()?;
    let m = generate_synthetic(&cfg.synth, a.n, &a.out)?;
    eprintln!("wrote {} scenes to {}", m.records.len(), a.out.display());
    Ok(())
}

/// Manifest records with their decoded images.
struct Dataset {
    records: Vec<ManifestRecord>,
    images: Vec<(LinearImage, Illuminant)>,
}

impl Dataset {
    fn load(flag: Option<&PathBuf>, cfg: &RunConfig) -> Result<Self> {
        let path = flag
            .or(cfg.train.manifest.as_ref())
            .ok_or_else(|| Error::Config("no manifest given (--manifest or [train] manifest)".into()))?;
        let manifest = load_manifest(path)?;
        if manifest.records.is_empty() {
            return Err(Error::Data(format!("{}: manifest has no records", path.display())));
        }
        let images = manifest
            .records
            .iter()
            .map(|r| Ok((r.load_image()?, r.ground_truth)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            records: manifest.records,
            images,
        })
    }

    fn folds(&self, cfg: &RunConfig) -> Result<FoldSplit> {
        let ids: Vec<usize> = (0..self.records.len()).collect();
        make_folds(&ids, cfg.data.folds, cfg.data.fold_seed)
    }

    /// (training ids, evaluation ids) under the configured hold-out fold.
    fn split(&self, cfg: &RunConfig) -> Result<(Vec<usize>, Vec<usize>)> {
        let all: Vec<usize> = (0..self.records.len()).collect();
        match cfg.data.holdout_fold {
            None => Ok((all.clone(), all)),
            Some(h) => {
                let folds = self.folds(cfg)?;
                let mut test = folds.folds[h].clone();
                test.sort_unstable();
                Ok((folds.train_ids(h), test))
            }
        }
    }

    fn subset(&self, ids: &[usize]) -> Vec<(LinearImage, Illuminant)> {
        ids.iter().map(|&i| self.images[i].clone()).collect()
    }
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let data = Dataset::load(a.manifest.as_ref(), &cfg)?;
    create_dir(&a.out)?;
    let sampler = &cfg.train.sampler;
    let csv_path = a.out.join("patches.csv");
    let mut w = csv_writer(&csv_path)?;
    let err = csv_err(&csv_path);
    w.write_record(["image_id", "center_x", "center_y", "d_used", "mode"]).map_err(&err)?;
    let mut records = Vec::new();
    for (i, ((img, _), rec)) in data.images.iter().zip(&data.records).enumerate() {
        let scfg = sampler.with_seed(sampler.seed.wrapping_add(i as u64));
        let sampled = sample_patch_pairs::<f32>(img, &scfg)?;
        for p in &sampled.pairs {
            w.write_record([
                rec.id(),
                p.center_xy.0.to_string(),
                p.center_xy.1.to_string(),
                p.d_used.map(|d| d.to_string()).unwrap_or_default(),
                p.mode.to_string(),
            ])
            .map_err(&err)?;
            records.push(PatchRecord::from_pair(i, p));
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    write_patches(&a.out.join("patches.illk"), sampler.patch_size, &records)?;
    eprintln!("wrote {} patch pairs to {}", records.len(), a.out.display());
    Ok(())
}

/// Stages `--stage` selects, given the resumed checkpoint's stage.
fn stages_to_run(stage: &str, variant: Variant, resumed: Option<StageId>) -> Result<Vec<StageId>> {
    if stage == "all" {
        let chain = StageId::chain(variant);
        return Ok(match resumed {
            None => chain,
            Some(done) => match chain.iter().position(|&s| s == done) {
                Some(i) => chain[i + 1..].to_vec(),
                None => Vec::new(),
            },
        });
    }
    Ok(vec![stage.parse()?])
}

fn save_outcome(out: &Path, o: &StageOutcome) -> Result<()> {
    o.checkpoint.save(&out.join(format!("stage_{}.ckpt", o.stage)))?;
    write_trajectory_csv(&out.join(format!("loss_{}.csv", o.stage)), &o.trajectory)
}

/// Trains `stages` on `train`, writing each stage's outputs into `out`.
fn train_on<T: Real>(
    train: &[(LinearImage, Illuminant)],
    cfg: &TrainConfig,
    stages: &[StageId],
    resume: Option<Checkpoint>,
    out: &Path,
) -> Result<Checkpoint> {
    let samples = build_training_set::<T>(train, &cfg.sampler)?;
    eprintln!("training on {} patch pairs from {} images", samples.len(), train.len());
    let result = run_stages(
        &samples,
        cfg,
        stages,
        resume,
        |o| {
            let last = o.trajectory.last().map(|r| r.loss).unwrap_or(f64::NAN);
            eprintln!("stage {} done: final loss {last:.6}", o.stage);
            save_outcome(out, o)
        },
        |stage, r| eprintln!("stage {stage} step {} loss {:.6} lr {:e}", r.step + 1, r.loss, r.lr),
    );
    if let Err(Error::NonFiniteLoss { last_good, .. }) = &result {
        let p = out.join("last_good.ckpt");
        last_good.save(&p)?;
        eprintln!("saved last finite parameters to {}", p.display());
    }
    result
}

fn cmd_train<T: Real>(a: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut tcfg = cfg.train.clone();
    if let Some(ck) = &resume {
        // The checkpoint fixes the architecture.
        tcfg.arch = ck.arch.clone();
        tcfg.sampler.patch_size = ck.arch.input_size;
    }
    let stages = stages_to_run(&a.stage, tcfg.arch.variant, resume.as_ref().and_then(|c| c.stage))?;
    if stages.is_empty() {
        return Err(Error::StageOrder("checkpoint already completed the stage chain".into()));
    }
    let data = Dataset::load(a.manifest.as_ref(), cfg)?;
    let (train_ids, _) = data.split(cfg)?;
    create_dir(&a.out)?;
    let ck = train_on::<T>(&data.subset(&train_ids), &tcfg, &stages, resume, &a.out)?;
    eprintln!("final stage {} written to {}", ck.stage.map(|s| s.to_string()).unwrap_or_default(), a.out.display());
    Ok(())
}

fn write_errors(path: &Path, rows: &[(String, Option<usize>, f64)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["image_id", "fold", "error_deg"]).map_err(&err)?;
    for (id, fold, e) in rows {
        w.write_record([id.clone(), fold.map(|f| f.to_string()).unwrap_or_default(), format!("{e:.6}")])
            .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_metrics(path: &Path, rows: &[(String, MetricsReport)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    let mut header = vec!["method"];
    header.extend(MetricsReport::COLUMNS);
    w.write_record(&header).map_err(&err)?;
    for (label, m) in rows {
        let mut rec = vec![label.clone()];
        rec.extend(m.values().iter().map(|v| format!("{v:.4}")));
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Metrics for one method; with several subsets also one row per subset and their geomean.
fn metric_rows(label: &str, errors: &[f64], subsets: &[&str]) -> Result<Vec<(String, MetricsReport)>> {
    let mut rows = vec![(label.to_string(), compute_metrics(errors)?)];
    let mut names: Vec<&str> = subsets.to_vec();
    names.sort_unstable();
    names.dedup();
    if names.len() > 1 {
        let groups: Vec<Vec<f64>> = names
            .iter()
            .map(|s| errors.iter().zip(subsets).filter(|(_, t)| *t == s).map(|(e, _)| *e).collect())
            .collect();
        if groups.iter().any(|g: &Vec<f64>| g.len() < 4) {
            eprintln!("warning: a subset has fewer than 4 images; skipping per-subset metrics for {label}");
            return Ok(rows);
        }
        let mut per = Vec::new();
        for (s, e) in names.iter().zip(&groups) {
            let m = compute_metrics(e)?;
            rows.push((format!("{label}@{s}"), m.clone()));
            per.push(m);
        }
        rows.push((format!("{label}@geomean"), geomean_report(&per)?));
    }
    Ok(rows)
}

fn baseline_specs(b: &BaselineArgs) -> Result<Vec<BaselineSpec>> {
    b.methods
        .iter()
        .map(|m| {
            let mut spec = BaselineSpec::new(m.parse::<BaselineMethod>()?);
            if let Some(p) = b.p {
                spec.minkowski_p = p;
            }
            if let Some(o) = b.order {
                spec.derivative_order = o;
            }
            if let Some(s) = b.sigma {
                spec.smoothing_sigma = s;
            }
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

fn cmd_eval<T: Real>(a: &EvalArgs, cfg: &RunConfig) -> Result<()> {
    let specs = baseline_specs(&a.baselines)?;
    if specs.is_empty() && a.checkpoint.is_none() {
        return Err(Error::InvalidArgument("nothing to evaluate: give --checkpoint and/or --method".into()));
    }
    let data = Dataset::load(a.manifest.as_ref(), cfg)?;
    let (_, test_ids) = data.split(cfg)?;
    let folds = data.folds(cfg).ok();
    let fold_of = |i: usize| folds.as_ref().and_then(|f| f.fold_of(i));
    let test = data.subset(&test_ids);
    let subsets: Vec<&str> = test_ids.iter().map(|&i| data.records[i].subset.as_str()).collect();
    create_dir(&a.out)?;

    let mut methods: Vec<(String, Vec<f64>)> = Vec::new();
    if let Some(p) = &a.checkpoint {
        let ck = Checkpoint::load(p)?;
        let model = ck.to_model::<T>()?;
        let mut sampler = cfg.train.sampler.clone();
        sampler.patch_size = ck.arch.input_size;
        let level = EstimateLevel::for_stage(model.stage);
        let label = format!("{}@{}", ck.arch.variant, ck.stage.map(|s| s.to_string()).unwrap_or("init".into()));
        methods.push((label, evaluate_model(&model, &test, &sampler, level)?));
    }
    for spec in &specs {
        let errors = test
            .iter()
            .map(|(img, gt)| angular_error(estimate_baseline(spec, img)?.rgb(), gt.rgb()))
            .collect::<Result<Vec<_>>>()?;
        methods.push((spec.label(), errors));
    }

    let mut metrics = Vec::new();
    for (label, errors) in &methods {
        let rows: Vec<_> = test_ids
            .iter()
            .zip(errors)
            .map(|(&i, &e)| (data.records[i].id(), fold_of(i), e))
            .collect();
        write_errors(&a.out.join(format!("errors_{}.csv", file_label(label))), &rows)?;
        let m = metric_rows(label, errors, &subsets)?;
        println!("{label}: mean {:.4} median {:.4} ({} images)", m[0].1.mean, m[0].1.median, m[0].1.n);
        metrics.extend(m);
    }
    write_metrics(&a.out.join("metrics.csv"), &metrics)
}

/// Method label made safe for a file name.
fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

fn cmd_infer<T: Real>(a: &InferArgs, cfg: &RunConfig) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.to_model::<T>()?;
    let mut image = pnm::decode_image(&a.image, a.linear)?;
    if let Some(m) = &a.mask {
        let mask = pnm::load_mask(m, image.width(), image.height())?;
        image = image.with_mask(Some(mask))?;
    }
    let mut sampler = cfg.train.sampler.clone();
    sampler.patch_size = ck.arch.input_size;
    let est = infer_global(&model, &image, &sampler)?;
    if est.all_degenerate {
        eprintln!("warning: every patch estimate was degenerate; using the neutral illuminant");
    }
    let corrected = diagonal_correct(&est.illuminant, &image)?;
    let out = a.out.clone().unwrap_or_else(|| {
        let stem = a.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("image".into());
        a.image.with_file_name(format!("{stem}_corrected.ppm"))
    });
    pnm::write_bytes(&out, &pnm::encode_p6_gamma(&corrected))?;
    let [r, g, b] = est.illuminant.rgb();
    println!("{r:.9} {g:.9} {b:.9}");
    Ok(())
}

fn parse_csv_list<V: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<V>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(|t| t.trim().parse()).collect()
}

fn cmd_ablate<T: Real>(a: &AblateArgs, cfg: &RunConfig) -> Result<()> {
    let variants: Vec<Variant> = parse_csv_list(&a.variants)?;
    let modes: Vec<SamplingMode> = parse_csv_list(&a.modes)?;
    let through: StageId = a.through.parse()?;
    let mut cfg = cfg.clone();
    if cfg.data.holdout_fold.is_none() {
        cfg.data.holdout_fold = Some(0);
    }
    let data = Dataset::load(a.manifest.as_ref(), &cfg)?;
    let (train_ids, test_ids) = data.split(&cfg)?;
    let (train, test) = (data.subset(&train_ids), data.subset(&test_ids));
    let subsets: Vec<&str> = test_ids.iter().map(|&i| data.records[i].subset.as_str()).collect();
    create_dir(&a.out)?;

    let mut metrics = Vec::new();
    for &variant in &variants {
        let chain = StageId::chain(variant);
        let end = chain
            .iter()
            .position(|&s| s == through)
            .ok_or_else(|| Error::InvalidArgument(format!("stage {through} is not in the {variant} chain")))?;
        for &mode in &modes {
            let label = format!("{variant}/{mode}");
            eprintln!("ablation cell {label}");
            let mut tcfg = cfg.train.clone();
            tcfg.arch.variant = variant;
            tcfg.sampler.mode = mode;
            let cell_dir = a.out.join(file_label(&label));
            create_dir(&cell_dir)?;
            let ck = train_on::<T>(&train, &tcfg, &chain[..=end], None, &cell_dir)?;
            let model = ck.to_model::<T>()?;
            // Evaluation patches follow the cell's sampling mode.
            let errors = evaluate_model(&model, &test, &tcfg.sampler, EstimateLevel::for_stage(model.stage))?;
            let rows: Vec<_> = test_ids.iter().zip(&errors).map(|(&i, &e)| (data.records[i].id(), cfg.data.holdout_fold, e)).collect();
            write_errors(&cell_dir.join("errors.csv"), &rows)?;
            let m = metric_rows(&label, &errors, &subsets)?;
            println!("{label}: mean {:.4} median {:.4}", m[0].1.mean, m[0].1.median);
            metrics.extend(m);
        }
    }
    write_metrics(&a.out.join("metrics.csv"), &metrics)
}
