//! Stage-wise training: per-stage initialization and freezing, frozen-prefix
//! caching, mini-batch momentum SGD, and checkpoint chaining.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::color::Illuminant;
use crate::error::{Error, Result};
use crate::image::LinearImage;
use crate::nets::{build_net, ArchConfig, IlluminantModel, ParamGroup, PredictionGrads, Variant};
use crate::nn::{layer_forward, sgd_update, Grads, LayerSpec, SgdHyper, Stack, Tensor};
use crate::sampling::{sample_patch_pairs, SamplerConfig};
use crate::scalar::{cast3, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageId {
    /// Central stream with its own 3-unit head.
    S1a,
    /// Surround stream with its own 3-unit head.
    S1b,
    /// Decision head of the contextual net over frozen streams.
    S2,
    /// Refinement trunk and primary head, contextual net frozen.
    S3,
    /// Intermediate head only.
    S4,
    /// Optional end-to-end fine-tuning of everything but the stage-1 heads.
    Joint,
}

impl StageId {
    pub const ALL: [StageId; 6] = [
        StageId::S1a,
        StageId::S1b,
        StageId::S2,
        StageId::S3,
        StageId::S4,
        StageId::Joint,
    ];

    pub(crate) fn code(self) -> u8 {
        self as u8 + 1
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c.checked_sub(1)? as usize).copied()
    }

    /// The standard stage sequence for a variant. Stage 1b exists only when
    /// the variant has a separately weighted surround stream. Joint is opt-in.
    pub fn chain(variant: Variant) -> Vec<StageId> {
        let mut v = vec![StageId::S1a];
        if variant.has_surround_stream() && !variant.shares_streams() {
            v.push(StageId::S1b);
        }
        v.extend([StageId::S2, StageId::S3, StageId::S4]);
        v
    }

    /// Stage whose checkpoint must seed this one.
    pub fn predecessor(self, variant: Variant) -> Option<StageId> {
        if self == StageId::Joint {
            return Some(StageId::S4);
        }
        let chain = Self::chain(variant);
        let i = chain.iter().position(|&s| s == self)?;
        i.checked_sub(1).map(|j| chain[j])
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageId::S1a => "1a",
            StageId::S1b => "1b",
            StageId::S2 => "2",
            StageId::S3 => "3",
            StageId::S4 => "4",
            StageId::Joint => "joint",
        })
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// Prediction a stage's loss is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTarget {
    CentralStream,
    SurroundStream,
    E1,
    E2,
    /// The raw product e2 ∘ e3.
    Product,
    /// e1, e2 and the product, each against the same ground truth.
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: StageId,
    pub trainable: Vec<ParamGroup>,
    /// Groups drawn fresh from the Gaussian initializer on stage entry.
    pub fresh: Vec<ParamGroup>,
    pub target: LossTarget,
}

impl StagePlan {
    pub fn new(stage: StageId) -> Self {
        use ParamGroup::*;
        let (trainable, fresh, target) = match stage {
            StageId::S1a => (vec![CentralStream, CentralAuxHead], vec![CentralStream, CentralAuxHead], LossTarget::CentralStream),
            StageId::S1b => (
                vec![SurroundStream, SurroundAuxHead],
                vec![SurroundStream, SurroundAuxHead],
                LossTarget::SurroundStream,
            ),
            StageId::S2 => (vec![ContextHead], vec![ContextHead], LossTarget::E1),
            // Only the 6-channel entry conv of the trunk is fresh; deeper trunk
            // convs are transferred from the trained central stream.
            StageId::S3 => (vec![RefineTrunk, RefineHead], vec![RefineHead], LossTarget::E2),
            StageId::S4 => (vec![IntermediateHead], vec![IntermediateHead], LossTarget::Product),
            StageId::Joint => (
                vec![CentralStream, SurroundStream, ContextHead, RefineTrunk, RefineHead, IntermediateHead],
                vec![],
                LossTarget::All,
            ),
        };
        StagePlan {
            stage,
            trainable,
            fresh,
            target,
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|g| name.starts_with(g.prefix()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdHyper,
    pub batch_size: usize,
    /// Steps per stage.
    pub max_steps: u64,
    /// Progress-report interval in steps; 0 disables reports.
    pub eval_every: u64,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub sampler: SamplerConfig,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    /// Full-scale defaults: lr 0.001, momentum 0.9, decay 0.0005, batch 23,
    /// lr ×0.1 every 50K steps, 160K steps.
    fn default() -> Self {
        TrainConfig {
            sgd: SgdHyper::default(),
            batch_size: 23,
            max_steps: 160_000,
            eval_every: 1000,
            seed: 0,
            manifest: None,
            sampler: SamplerConfig::default(),
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    /// CPU-sized profile: 2000 steps per stage, batch 16, 32-pixel patches.
    pub fn desk() -> Self {
        let mut c = TrainConfig {
            batch_size: 16,
            max_steps: 2000,
            eval_every: 200,
            ..TrainConfig::default()
        };
        c.sgd.base_lr = DESK_BASE_LR;
        c.arch.input_size = 32;
        c.sampler.patch_size = 32;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.sampler.validate()?;
        self.arch.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.sampler.patch_size != self.arch.input_size {
            return Err(Error::Config(format!(
                "sampler patch_size {} differs from arch input_size {}",
                self.sampler.patch_size, self.arch.input_size
            )));
        }
        Ok(())
    }
}

/// Desk-profile learning rate. Higher than the full-scale 0.001 because the
/// desk budget is ~80× shorter and trunks start from scratch.
pub const DESK_BASE_LR: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct TrainingSample<T> {
    pub central: Tensor<T>,
    pub surround: Tensor<T>,
    pub gt: [T; 3],
}

/// Samples `sampler.num_patches` pairs per image; every pair carries the image's ground truth.
/// Image `i` uses sampler seed `sampler.seed + i`.
pub fn build_training_set<T: Real>(
    images: &[(LinearImage, Illuminant)],
    sampler: &SamplerConfig,
) -> Result<Vec<TrainingSample<T>>> {
    let per_image: Vec<Result<Vec<TrainingSample<T>>>> = images
        .par_iter()
        .enumerate()
        .map(|(i, (img, gt))| {
            let cfg = sampler.with_seed(sampler.seed.wrapping_add(i as u64));
            let sampled = sample_patch_pairs::<T>(img, &cfg)?;
            let gt = cast3(gt.rgb());
            Ok(sampled
                .pairs
                .into_iter()
                .map(|p| TrainingSample {
                    central: p.central,
                    surround: p.surround,
                    gt,
                })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for r in per_image {
        out.extend(r?);
    }
    Ok(out)
}

/// Prepares the model for `stage`: loads `prev` (which must come from the
/// predecessor stage), draws fresh groups, and sets learning-rate multipliers
/// to 1 for trainable groups and 0 elsewhere. Momentum buffers are zeroed.
pub fn init_stage<T: Real>(
    arch: &ArchConfig,
    stage: StageId,
    prev: Option<&Checkpoint>,
    seed: u64,
) -> Result<IlluminantModel<T>> {
    let plan = StagePlan::new(stage);
    let want = stage.predecessor(arch.variant);
    let got = prev.and_then(|c| c.stage);
    if stage == StageId::S1b && !StageId::chain(arch.variant).contains(&StageId::S1b) {
        return Err(Error::StageOrder(format!(
            "variant {} has no separate surround stream to train",
            arch.variant
        )));
    }
    if want.is_some() && got != want {
        return Err(Error::StageOrder(format!(
            "stage {stage} needs a checkpoint from stage {}, got {}",
            want.map_or("-".into(), |s| s.to_string()),
            got.map_or("none".into(), |s| s.to_string())
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((stage.code() as u64) << 56));
    let mut model: IlluminantModel<T> = match prev {
        Some(ck) if want.is_some() => {
            if ck.arch != *arch {
                return Err(Error::Config(
                    "checkpoint architecture differs from the configured one".into(),
                ));
            }
            ck.to_model()?
        }
        _ => build_net(arch, seed)?,
    };
    for &g in &plan.fresh {
        model.init_group(g, &mut rng);
    }
    if stage == StageId::S3 {
        transfer_trunk(&mut model, &mut rng);
    }
    for p in model.store.iter_mut() {
        p.lr_mult = if plan.is_trainable(&p.name) { 1.0 } else { 0.0 };
        p.momentum_buf.fill(T::zero());
        p.grad.fill(T::zero());
    }
    Ok(model)
}

/// Refinement trunk: entry conv drawn fresh, later convs copied from the central stream.
fn transfer_trunk<T: Real>(model: &mut IlluminantModel<T>, rng: &mut ChaCha8Rng) {
    let entry = format!("{}conv1_1", ParamGroup::RefineTrunk.prefix());
    let names: Vec<String> = model
        .store
        .iter()
        .filter(|p| p.name.starts_with(ParamGroup::RefineTrunk.prefix()))
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        if name.starts_with(&format!("{entry}.")) {
            model.store.reinit_gaussian(&name, None, rng);
            continue;
        }
        let src_name = name.replacen(ParamGroup::RefineTrunk.prefix(), ParamGroup::CentralStream.prefix(), 1);
        let src = model.store.by_name(&src_name).map(|p| p.value.clone());
        let dst = model.store.by_name_mut(&name).expect("listed above");
        match src {
            Some(v) if v.shape() == dst.value.shape() => dst.value = v,
            _ => {}
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: StageId,
    pub checkpoint: Checkpoint,
    pub trajectory: Vec<LossRecord>,
}

/// Per-sample inputs to the trainable part of a stage, computed once through frozen layers.
enum Cached<T> {
    Input(Tensor<T>),
    /// Refinement features and e2 for the intermediate head.
    TrunkOut(Tensor<T>, [T; 3]),
    Pair(Tensor<T>, Tensor<T>),
}

fn prepare<T: Real>(model: &IlluminantModel<T>, target: LossTarget, data: &[TrainingSample<T>]) -> Result<Vec<Cached<T>>> {
    data.par_iter()
        .map(|s| -> Result<Cached<T>> {
            Ok(match target {
                LossTarget::CentralStream => Cached::Input(model.stream_input(&s.central, &s.surround)?),
                LossTarget::SurroundStream => Cached::Input(s.surround.clone()),
                LossTarget::E1 => Cached::Input(model.context_features(&s.central, &s.surround)?),
                LossTarget::E2 => {
                    let ctx = model.contextual_forward(&s.central, &s.surround)?;
                    Cached::Input(layer_forward(&LayerSpec::ConcatChannels, &[], &[&s.central, &ctx.p1])?)
                }
                LossTarget::Product => {
                    let ctx = model.contextual_forward(&s.central, &s.surround)?;
                    let x = layer_forward(&LayerSpec::ConcatChannels, &[], &[&s.central, &ctx.p1])?;
                    let f = model.refine_trunk().forward(&model.store, &x)?;
                    let e2 = model.refine_head().forward(&model.store, &f)?;
                    let d = e2.data();
                    Cached::TrunkOut(f, [d[0], d[1], d[2]])
                }
                LossTarget::All => Cached::Pair(s.central.clone(), s.surround.clone()),
            })
        })
        .collect()
}

fn sq_err<T: Real>(e: [T; 3], gt: [T; 3], scale: T) -> (f64, [T; 3]) {
    let mut loss = 0.0;
    let mut g = [T::zero(); 3];
    for c in 0..3 {
        let d = e[c] - gt[c];
        loss += (d * d).as_f64();
        g[c] = T::lit(2.0) * d * scale;
    }
    (loss, g)
}

/// Trainable stacks for the single-path targets: first runs on the cached
/// input, second (if any) on the first's output.
fn stacks_for<T: Real>(model: &IlluminantModel<T>, target: LossTarget) -> Result<(&Stack, Option<&Stack>)> {
    Ok(match target {
        LossTarget::CentralStream => (model.central_stream(), Some(model.central_aux_head())),
        LossTarget::SurroundStream => (
            model
                .surround_stream()
                .ok_or_else(|| Error::StageOrder("variant has no surround stream".into()))?,
            Some(
                model
                    .surround_aux_head()
                    .ok_or_else(|| Error::StageOrder("variant has no surround head".into()))?,
            ),
        ),
        LossTarget::E1 => (model.context_head(), None),
        LossTarget::E2 => (model.refine_trunk(), Some(model.refine_head())),
        _ => unreachable!("multi-path targets are handled separately"),
    })
}

/// Loss and parameter gradients for one sample; gradients are pre-scaled by `scale`.
fn sample_step<T: Real>(
    model: &IlluminantModel<T>,
    target: LossTarget,
    cached: &Cached<T>,
    gt: [T; 3],
    scale: T,
) -> Result<(f64, Grads<T>)> {
    let s = &model.store;
    let mut grads = Grads::new(s.len());
    let loss = match (target, cached) {
        (LossTarget::Product, Cached::TrunkOut(f, e2)) => {
            let head = model.intermediate_head();
            let (e3, tr) = head.forward_traced(s, f.clone())?;
            let e3 = e3.data();
            let prod = [e2[0] * e3[0], e2[1] * e3[1], e2[2] * e3[2]];
            let (loss, g) = sq_err(prod, gt, scale);
            let g3 = Tensor::vector(&[g[0] * e2[0], g[1] * e2[1], g[2] * e2[2]]);
            head.backward(s, &tr, g3, &mut grads, false)?;
            loss
        }
        (LossTarget::All, Cached::Pair(pc, ps)) => {
            let tr = model.forward_full_traced(pc, ps)?;
            let (l1, g1) = sq_err(tr.e1_raw, gt, scale);
            let (l2, g2) = sq_err(tr.e2_raw, gt, scale);
            let (l3, g3) = sq_err(tr.product(), gt, scale);
            let pg = PredictionGrads {
                e1: Some(g1),
                e2: Some(g2),
                product: Some(g3),
            };
            model.backward_full(&tr, pg, &mut grads)?;
            l1 + l2 + l3
        }
        (_, Cached::Input(x)) => {
            let (first, second) = stacks_for(model, target)?;
            let (h, tr1) = first.forward_traced(s, x.clone())?;
            let (out, tr2) = match second {
                Some(st) => {
                    let (o, t) = st.forward_traced(s, h)?;
                    (o, Some(t))
                }
                None => (h, None),
            };
            let d = out.data();
            let (loss, g) = sq_err([d[0], d[1], d[2]], gt, scale);
            let mut g = Tensor::vector(&g);
            if let (Some(st), Some(t)) = (second, &tr2) {
                g = st.backward(s, t, g, &mut grads, true)?.expect("input grad requested");
            }
            first.backward(s, &tr1, g, &mut grads, false)?;
            loss
        }
        _ => unreachable!("cache kind always matches the target"),
    };
    Ok((loss, grads))
}

/// Runs `cfg.max_steps` SGD steps on the stage's loss target.
///
/// Mini-batches are drawn without replacement from a per-epoch shuffle seeded
/// by `cfg.seed` and the stage. Per-sample gradients are merged in batch order,
/// so results do not depend on the thread count. The reported loss is the batch
/// mean of squared Euclidean distances.
pub fn train_stage<T: Real>(
    mut model: IlluminantModel<T>,
    stage: StageId,
    data: &[TrainingSample<T>],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&LossRecord),
) -> Result<StageOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let plan = StagePlan::new(stage);
    let cache = prepare(&model, plan.target, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stage.code() as u64);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch_size;
    let scale = T::one() / T::lit(batch as f64);
    let mut trajectory = Vec::with_capacity(cfg.max_steps as usize);

    for step in 0..cfg.max_steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let results: Vec<Result<(f64, Grads<T>)>> = idx
            .par_iter()
            .map(|&i| sample_step(&model, plan.target, &cache[i], data[i].gt, scale))
            .collect();
        let mut total = Grads::new(model.store.len());
        let mut loss = 0.0;
        for r in results {
            match r {
                Ok((l, g)) => {
                    loss += l;
                    total.merge(&g)?;
                }
                Err(Error::NonFinite { .. }) => loss = f64::NAN,
                Err(e) => return Err(e),
            }
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                last_good: Box::new(Checkpoint::from_model(&model, step)),
            });
        }
        model.store.zero_grads();
        model.store.accumulate(&total)?;
        sgd_update(&mut model.store, &cfg.sgd, step)?;
        let rec = LossRecord {
            step,
            loss,
            lr: cfg.sgd.lr_at(step),
        };
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            progress(&rec);
        }
        trajectory.push(rec);
    }
    model.stage = Some(stage);
    Ok(StageOutcome {
        stage,
        checkpoint: Checkpoint::from_model(&model, cfg.max_steps),
        trajectory,
    })
}

/// Runs `stages` in order starting from `resume`, chaining checkpoints.
/// `on_stage` sees every intermediate outcome (e.g. to write it to disk).
pub fn run_stages<T: Real>(
    data: &[TrainingSample<T>],
    cfg: &TrainConfig,
    stages: &[StageId],
    resume: Option<Checkpoint>,
    mut on_stage: impl FnMut(&StageOutcome) -> Result<()>,
    mut progress: impl FnMut(StageId, &LossRecord),
) -> Result<Checkpoint> {
    let mut prev = resume;
    for &stage in stages {
        let model = init_stage::<T>(&cfg.arch, stage, prev.as_ref(), cfg.seed)?;
        let out = train_stage(model, stage, data, cfg, |r| progress(stage, r))?;
        on_stage(&out)?;
        prev = Some(out.checkpoint);
    }
    prev.ok_or_else(|| Error::InvalidArgument("no stages to run".into()))
}

/// Full chain for the configured variant.
pub fn run_pipeline<T: Real>(
    data: &[TrainingSample<T>],
    cfg: &TrainConfig,
    on_stage: impl FnMut(&StageOutcome) -> Result<()>,
) -> Result<Checkpoint> {
    run_stages(data, cfg, &StageId::chain(cfg.arch.variant), None, on_stage, |_, _| {})
}

/// Mean of the last `window` losses minus the mean of the first `window`.
pub fn windowed_loss_change(trajectory: &[LossRecord], window: usize) -> Option<f64> {
    if window == 0 || trajectory.len() < 2 * window {
        return None;
    }
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    Some(mean(&trajectory[trajectory.len() - window..]) - mean(&trajectory[..window]))
}

pub fn write_trajectory_csv(path: &std::path::Path, trajectory: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["step", "loss", "lr"]).map_err(csv_err)?;
    for r in trajectory {
        w.write_record([r.step.to_string(), format!("{:e}", r.loss), format!("{:e}", r.lr)])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
