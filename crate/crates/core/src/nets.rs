//! Contextual (center-surround) estimation network, the stacked refinement
//! network, and the architecture variants used in the ablations.
//!
//! A single [`IlluminantModel`] owns every parameter group; training stages
//! select which groups move. Streams, heads and trunk are [`Stack`]s that
//! reference parameters in the shared [`ParamStore`], so the siamese variant
//! simply binds both streams to the same ids.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::color::{Illuminant, MIN_CHANNEL};
use crate::error::{Error, Result};
use crate::nn::{layer_forward, Grads, LayerSpec, ParamStore, Stack, StackTrace, Tensor};
use crate::scalar::Real;
use crate::training::StageId;

/// Standard deviation for the final 3-unit layer of every head.
pub const HEAD_OUTPUT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Central stream only; the surround patch is ignored.
    CentralOnly,
    /// One stream over the 6-channel stack of central and surround patches.
    TwoChannel,
    /// Two streams with shared weights, features concatenated.
    Siamese,
    /// Two streams with separate weights, features concatenated.
    PseudoSiamese,
    /// Two streams with separate weights, features summed.
    Contextual,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::CentralOnly,
        Variant::TwoChannel,
        Variant::Siamese,
        Variant::PseudoSiamese,
        Variant::Contextual,
    ];

    pub fn has_surround_stream(self) -> bool {
        matches!(
            self,
            Variant::Siamese | Variant::PseudoSiamese | Variant::Contextual
        )
    }

    pub fn shares_streams(self) -> bool {
        self == Variant::Siamese
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::CentralOnly => "central_only",
            Variant::TwoChannel => "two_channel",
            Variant::Siamese => "siamese",
            Variant::PseudoSiamese => "pseudo_siamese",
            Variant::Contextual => "contextual",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub variant: Variant,
    /// Output channels of each conv block; every block ends in a 2×2 max-pool.
    pub block_channels: Vec<usize>,
    /// 3×3 conv + ReLU pairs per block.
    pub convs_per_block: usize,
    /// Fully connected widths; the last must be 3.
    pub head: Vec<usize>,
    pub input_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            variant: Variant::Contextual,
            block_channels: vec![16, 32, 64],
            convs_per_block: 1,
            head: vec![128, 64, 3],
            input_size: 32,
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad integer {t:?} in list {s:?}")))
        })
        .collect()
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return Err(Error::Config(format!(
                "block_channels must be non-empty and positive: {:?}",
                self.block_channels
            )));
        }
        if self.convs_per_block == 0 {
            return Err(Error::Config("convs_per_block must be >= 1".into()));
        }
        if self.head.last() != Some(&3) || self.head.contains(&0) {
            return Err(Error::Config(format!(
                "head widths must be positive and end in 3: {:?}",
                self.head
            )));
        }
        let down = 1usize << self.block_channels.len();
        if self.input_size == 0 || self.input_size % down != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {down}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Text form stored in checkpoints.
    pub fn to_text(&self) -> String {
        format!(
            "variant={}\nblock_channels={}\nconvs_per_block={}\nhead={}\ninput_size={}\n",
            self.variant,
            join(&self.block_channels),
            self.convs_per_block,
            join(&self.head),
            self.input_size
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ArchConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad architecture line {line:?}")))?;
            match k {
                "variant" => cfg.variant = v.parse()?,
                "block_channels" => cfg.block_channels = parse_list(v)?,
                "convs_per_block" => {
                    cfg.convs_per_block = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad convs_per_block {v:?}")))?
                }
                "head" => cfg.head = parse_list(v)?,
                "input_size" => {
                    cfg.input_size = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad input_size {v:?}")))?
                }
                _ => return Err(Error::Config(format!("unknown architecture key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn stream_input_channels(&self) -> usize {
        if self.variant == Variant::TwoChannel {
            6
        } else {
            3
        }
    }
}

/// Parameter groups, identified by name prefix inside the store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    CentralStream,
    SurroundStream,
    /// Stage-1 head over the central stream alone.
    CentralAuxHead,
    /// Stage-1 head over the surround stream alone.
    SurroundAuxHead,
    /// Decision head of the contextual net, producing e1.
    ContextHead,
    /// Refinement conv trunk over the 6-channel (patch, corrected patch) stack.
    RefineTrunk,
    /// Refinement head producing e2.
    RefineHead,
    /// Extra head over the refinement trunk features producing e3.
    IntermediateHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::CentralStream,
        ParamGroup::SurroundStream,
        ParamGroup::CentralAuxHead,
        ParamGroup::SurroundAuxHead,
        ParamGroup::ContextHead,
        ParamGroup::RefineTrunk,
        ParamGroup::RefineHead,
        ParamGroup::IntermediateHead,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::CentralStream => "central.",
            ParamGroup::SurroundStream => "surround.",
            ParamGroup::CentralAuxHead => "central_aux_head.",
            ParamGroup::SurroundAuxHead => "surround_aux_head.",
            ParamGroup::ContextHead => "context_head.",
            ParamGroup::RefineTrunk => "refine_trunk.",
            ParamGroup::RefineHead => "refine_head.",
            ParamGroup::IntermediateHead => "intermediate_head.",
        }
    }

    fn is_head(self) -> bool {
        !matches!(
            self,
            ParamGroup::CentralStream | ParamGroup::SurroundStream | ParamGroup::RefineTrunk
        )
    }
}

/// Which prediction of the model is read out as its estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EstimateLevel {
    /// Stage-1 auxiliary head over the central stream.
    CentralStream,
    /// e1 of the contextual net.
    Context,
    /// e2 of the refinement net.
    Refine,
    /// e2 ∘ e3.
    Final,
}

impl EstimateLevel {
    pub fn for_stage(stage: Option<StageId>) -> Self {
        match stage {
            Some(StageId::S1a) | Some(StageId::S1b) => EstimateLevel::CentralStream,
            Some(StageId::S2) => EstimateLevel::Context,
            Some(StageId::S3) => EstimateLevel::Refine,
            Some(StageId::S4) | Some(StageId::Joint) | None => EstimateLevel::Final,
        }
    }
}

/// Clamp, normalize, and correct: the differentiable link between e1 and P1.
#[derive(Clone, Debug)]
pub struct Correction<T> {
    /// Unit illuminant after clamping raw values to at least [`MIN_CHANNEL`].
    pub illuminant: Option<Illuminant<T>>,
    /// True when the normalized estimate has a channel at or below [`MIN_CHANNEL`];
    /// the corrected patch then falls back to the input patch.
    pub degenerate: bool,
    clamped: [T; 3],
    passes: [bool; 3],
    gains: [T; 3],
}

impl<T: Real> Correction<T> {
    pub fn new(raw: [T; 3]) -> Self {
        let min = T::lit(MIN_CHANNEL);
        let clamped = raw.map(|v| if v > min { v } else { min });
        let passes = raw.map(|v| v > min);
        let illuminant = Illuminant::normalize(clamped).ok();
        let degenerate = illuminant.is_none_or(|e| !e.is_correctable());
        let gains = match (&illuminant, degenerate) {
            (Some(e), false) => crate::color::diagonal_gains(e).unwrap_or([T::one(); 3]),
            _ => [T::one(); 3],
        };
        Correction {
            illuminant: if degenerate { None } else { illuminant },
            degenerate,
            clamped,
            passes,
            gains,
        }
    }

    pub fn apply(&self, patch: &Tensor<T>) -> Result<Tensor<T>> {
        if self.degenerate {
            return Ok(patch.clone());
        }
        crate::color::scale_channels(patch, self.gains)
    }

    /// Gradient w.r.t. the raw estimate, given the gradient w.r.t. the corrected patch.
    pub fn backward(&self, patch: &Tensor<T>, grad_corrected: &Tensor<T>) -> [T; 3] {
        if self.degenerate {
            return [T::zero(); 3];
        }
        let plane = patch.len() / 3;
        let mut g = [T::zero(); 3];
        for c in 0..3 {
            let r = c * plane..(c + 1) * plane;
            g[c] = crate::nn::dot(&grad_corrected.data()[r.clone()], &patch.data()[r]);
        }
        let c = self.clamped;
        let n = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        let s = Illuminant::<T>::neutral().rgb()[0];
        let weighted = g[0] / c[0] + g[1] / c[1] + g[2] / c[2];
        let mut out = [T::zero(); 3];
        for j in 0..3 {
            if self.passes[j] {
                out[j] = s / n * c[j] * weighted - s * n * g[j] / (c[j] * c[j]);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct ContextualOutput<T> {
    pub e1_raw: [T; 3],
    pub e1: Option<Illuminant<T>>,
    pub p1: Tensor<T>,
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct RefinementOutput<T> {
    pub e2_raw: [T; 3],
    pub e3_raw: [T; 3],
    pub e_final: Option<Illuminant<T>>,
    pub p2: Tensor<T>,
    pub degenerate: bool,
}

/// Outputs of one pass through both networks, with everything needed for backward.
#[derive(Clone, Debug)]
pub struct FullTrace<T> {
    pub e1_raw: [T; 3],
    pub e2_raw: [T; 3],
    pub e3_raw: [T; 3],
    central: StackTrace<T>,
    surround: Option<StackTrace<T>>,
    fusion_split: usize,
    context_head: StackTrace<T>,
    correction: Correction<T>,
    pc: Tensor<T>,
    trunk: StackTrace<T>,
    refine_head: StackTrace<T>,
    intermediate_head: StackTrace<T>,
}

impl<T: Real> FullTrace<T> {
    pub fn product(&self) -> [T; 3] {
        [
            self.e2_raw[0] * self.e3_raw[0],
            self.e2_raw[1] * self.e3_raw[1],
            self.e2_raw[2] * self.e3_raw[2],
        ]
    }
}

/// Loss gradients w.r.t. the three raw predictions; `None` means no loss on it.
#[derive(Clone, Copy, Debug, Default)]
pub struct PredictionGrads<T> {
    pub e1: Option<[T; 3]>,
    pub e2: Option<[T; 3]>,
    pub product: Option<[T; 3]>,
}

#[derive(Clone, Debug)]
pub struct IlluminantModel<T> {
    arch: ArchConfig,
    pub store: ParamStore<T>,
    pub stage: Option<StageId>,
    central: Stack,
    surround: Option<Stack>,
    central_aux: Stack,
    surround_aux: Option<Stack>,
    context_head: Stack,
    refine_trunk: Stack,
    refine_head: Stack,
    intermediate_head: Stack,
}

fn build_stream<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    in_channels: usize,
    arch: &ArchConfig,
) -> Result<Stack> {
    let mut s = Stack::new();
    let mut c = in_channels;
    for (b, &ch) in arch.block_channels.iter().enumerate() {
        for j in 0..arch.convs_per_block {
            s.push_new(store, &format!("{prefix}conv{}_{}", b + 1, j + 1), LayerSpec::conv3x3(c, ch))?;
            s.push_stateless(LayerSpec::Relu);
            c = ch;
        }
        s.push_stateless(LayerSpec::MaxPool2x2);
    }
    Ok(s)
}

fn build_head<T: Real>(store: &mut ParamStore<T>, prefix: &str, in_units: usize, widths: &[usize]) -> Result<Stack> {
    let mut s = Stack::new();
    s.push_stateless(LayerSpec::Flatten);
    let mut u = in_units;
    for (i, &w) in widths.iter().enumerate() {
        s.push_new(store, &format!("{prefix}fc{}", i + 1), LayerSpec::fc(u, w))?;
        if i + 1 < widths.len() {
            s.push_stateless(LayerSpec::Relu);
        }
        u = w;
    }
    Ok(s)
}

fn to3<T: Real>(t: &Tensor<T>) -> Result<[T; 3]> {
    match t.data() {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::shape("head output", format!("{:?} (want [3])", t.shape()))),
    }
}

fn cat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    layer_forward(&LayerSpec::ConcatChannels, &[], &[a, b])
}

fn vec3<T: Real>(v: [T; 3]) -> Tensor<T> {
    Tensor::vector(&v)
}

/// Builds a freshly initialized model: conv layers and hidden fully connected
/// layers draw from N(0, 2/fan_in), final 3-unit layers from N(0, 0.01²), biases zero.
pub fn build_net<T: Real>(cfg: &ArchConfig, init_seed: u64) -> Result<IlluminantModel<T>> {
    let mut model = IlluminantModel::skeleton(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    for g in ParamGroup::ALL {
        model.init_group(g, &mut rng);
    }
    Ok(model)
}

impl<T: Real> IlluminantModel<T> {
    /// Model structure with all-zero parameters.
    pub fn skeleton(cfg: &ArchConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let s = cfg.input_size;
        let central = build_stream(&mut store, ParamGroup::CentralStream.prefix(), cfg.stream_input_channels(), cfg)?;
        let feat_shape = central.output_shape(&[cfg.stream_input_channels(), s, s])?;
        let feat: usize = feat_shape.iter().product();

        let surround = match cfg.variant {
            Variant::Siamese => Some(central.clone()),
            v if v.has_surround_stream() => {
                Some(build_stream(&mut store, ParamGroup::SurroundStream.prefix(), 3, cfg)?)
            }
            _ => None,
        };
        let central_aux = build_head(&mut store, ParamGroup::CentralAuxHead.prefix(), feat, &cfg.head)?;
        let surround_aux = if matches!(cfg.variant, Variant::PseudoSiamese | Variant::Contextual) {
            Some(build_head(&mut store, ParamGroup::SurroundAuxHead.prefix(), feat, &cfg.head)?)
        } else {
            None
        };
        let fused = match cfg.variant {
            Variant::Siamese | Variant::PseudoSiamese => 2 * feat,
            _ => feat,
        };
        let context_head = build_head(&mut store, ParamGroup::ContextHead.prefix(), fused, &cfg.head)?;

        let refine_trunk = build_stream(&mut store, ParamGroup::RefineTrunk.prefix(), 6, cfg)?;
        let trunk_feat: usize = refine_trunk.output_shape(&[6, s, s])?.iter().product();
        let refine_head = build_head(&mut store, ParamGroup::RefineHead.prefix(), trunk_feat, &cfg.head)?;
        let intermediate_head =
            build_head(&mut store, ParamGroup::IntermediateHead.prefix(), trunk_feat, &cfg.head)?;

        Ok(IlluminantModel {
            arch: cfg.clone(),
            store,
            stage: None,
            central,
            surround,
            central_aux,
            surround_aux,
            context_head,
            refine_trunk,
            refine_head,
            intermediate_head,
        })
    }

    /// Rebuilds the graph for `cfg` around parameters loaded from elsewhere.
    /// Every expected parameter must be present with the expected shape.
    pub fn from_store(cfg: &ArchConfig, loaded: ParamStore<T>, stage: Option<StageId>) -> Result<Self> {
        let mut model = Self::skeleton(cfg)?;
        let mut missing = Vec::new();
        for p in model.store.iter_mut() {
            match loaded.by_name(&p.name) {
                Some(src) if src.value.shape() == p.value.shape() => *p = src.clone(),
                Some(src) => {
                    return Err(Error::shape(
                        p.name.clone(),
                        format!("stored {:?}, architecture wants {:?}", src.value.shape(), p.value.shape()),
                    ))
                }
                None => missing.push(p.name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingParameters(missing));
        }
        model.stage = stage;
        Ok(model)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    pub fn central_stream(&self) -> &Stack {
        &self.central
    }

    pub fn surround_stream(&self) -> Option<&Stack> {
        self.surround.as_ref()
    }

    pub fn central_aux_head(&self) -> &Stack {
        &self.central_aux
    }

    pub fn surround_aux_head(&self) -> Option<&Stack> {
        self.surround_aux.as_ref()
    }

    pub fn context_head(&self) -> &Stack {
        &self.context_head
    }

    pub fn refine_trunk(&self) -> &Stack {
        &self.refine_trunk
    }

    pub fn refine_head(&self) -> &Stack {
        &self.refine_head
    }

    pub fn intermediate_head(&self) -> &Stack {
        &self.intermediate_head
    }

    /// Whether the store has any parameter in `group` (e.g. no surround group for `central_only`).
    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.store.iter().any(|p| p.name.starts_with(group.prefix()))
    }

    /// Gaussian re-initialization of one parameter group.
    pub fn init_group<R: rand::Rng>(&mut self, group: ParamGroup, rng: &mut R) {
        self.store.reinit_gaussian(group.prefix(), None, rng);
        if group.is_head() {
            let last = format!("{}fc{}", group.prefix(), self.arch.head.len());
            self.store
                .reinit_gaussian(&format!("{last}.weight"), Some(HEAD_OUTPUT_STD), rng);
            // e3 starts near (1,1,1) so the product initially passes e2 through.
            if group == ParamGroup::IntermediateHead {
                if let Some(b) = self.store.by_name_mut(&format!("{last}.bias")) {
                    b.value.fill(T::one());
                }
            }
        }
    }

    /// Input of the central stream: the central patch, or both patches stacked for `two_channel`.
    pub fn stream_input(&self, pc: &Tensor<T>, ps: &Tensor<T>) -> Result<Tensor<T>> {
        if self.arch.variant == Variant::TwoChannel {
            cat(pc, ps)
        } else {
            Ok(pc.clone())
        }
    }

    /// Combines stream features per the variant. Returns the fused map.
    pub fn fuse(&self, fc: &Tensor<T>, fs: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        match (self.arch.variant, fs) {
            (Variant::Contextual, Some(fs)) => layer_forward(&LayerSpec::EltwiseSum, &[], &[fc, fs]),
            (Variant::Siamese | Variant::PseudoSiamese, Some(fs)) => cat(fc, fs),
            (Variant::CentralOnly | Variant::TwoChannel, None) => Ok(fc.clone()),
            _ => Err(Error::shape("fusion", "stream layout does not match the variant")),
        }
    }

    fn unfuse(&self, grad: Tensor<T>, split: usize) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        match self.arch.variant {
            Variant::Contextual => Ok((grad.clone(), Some(grad))),
            Variant::Siamese | Variant::PseudoSiamese => {
                let shape = grad.shape().to_vec();
                let data = grad.into_vec();
                let mut sc = shape.clone();
                sc[0] = split;
                let mut ss = shape;
                ss[0] -= split;
                let n = sc.iter().product::<usize>();
                Ok((
                    Tensor::from_vec(&sc, data[..n].to_vec())?,
                    Some(Tensor::from_vec(&ss, data[n..].to_vec())?),
                ))
            }
            _ => Ok((grad, None)),
        }
    }

    /// Fused stream features for one patch pair.
    pub fn context_features(&self, pc: &Tensor<T>, ps: &Tensor<T>) -> Result<Tensor<T>> {
        let fc = self.central.forward(&self.store, &self.stream_input(pc, ps)?)?;
        let fs = match &self.surround {
            Some(s) => Some(s.forward(&self.store, ps)?),
            None => None,
        };
        self.fuse(&fc, fs.as_ref())
    }

    /// Raw output of the stage-1 head over the central stream.
    pub fn central_stream_estimate(&self, pc: &Tensor<T>, ps: &Tensor<T>) -> Result<[T; 3]> {
        let f = self.central.forward(&self.store, &self.stream_input(pc, ps)?)?;
        to3(&self.central_aux.forward(&self.store, &f)?)
    }

    /// e1 from the fused center-surround features, and the patch corrected by it.
    pub fn contextual_forward(&self, pc: &Tensor<T>, ps: &Tensor<T>) -> Result<ContextualOutput<T>> {
        let fused = self.context_features(pc, ps)?;
        let e1_raw = to3(&self.context_head.forward(&self.store, &fused)?)?;
        let corr = Correction::new(e1_raw);
        Ok(ContextualOutput {
            e1_raw,
            e1: corr.illuminant,
            p1: corr.apply(pc)?,
            degenerate: corr.degenerate,
        })
    }

    /// Refinement over the stack (pc, p1): e2, e3, their normalized product, and P2.
    pub fn refinement_forward(&self, pc: &Tensor<T>, p1: &Tensor<T>) -> Result<RefinementOutput<T>> {
        let f = self.refine_trunk.forward(&self.store, &cat(pc, p1)?)?;
        let e2_raw = to3(&self.refine_head.forward(&self.store, &f)?)?;
        let e3_raw = to3(&self.intermediate_head.forward(&self.store, &f)?)?;
        let corr = Correction::new([
            e2_raw[0] * e3_raw[0],
            e2_raw[1] * e3_raw[1],
            e2_raw[2] * e3_raw[2],
        ]);
        Ok(RefinementOutput {
            e2_raw,
            e3_raw,
            e_final: corr.illuminant,
            p2: corr.apply(pc)?,
            degenerate: corr.degenerate,
        })
    }

    /// Unit estimate at the requested level, or `None` when it is degenerate.
    pub fn estimate(&self, pc: &Tensor<T>, ps: &Tensor<T>, level: EstimateLevel) -> Result<Option<Illuminant<T>>> {
        let raw = match level {
            EstimateLevel::CentralStream => self.central_stream_estimate(pc, ps)?,
            EstimateLevel::Context => self.contextual_forward(pc, ps)?.e1_raw,
            EstimateLevel::Refine | EstimateLevel::Final => {
                let ctx = self.contextual_forward(pc, ps)?;
                let r = self.refinement_forward(pc, &ctx.p1)?;
                if level == EstimateLevel::Refine {
                    r.e2_raw
                } else {
                    return Ok(r.e_final);
                }
            }
        };
        Ok(Correction::new(raw).illuminant)
    }

    /// Forward through both networks keeping every intermediate for [`Self::backward_full`].
    pub fn forward_full_traced(&self, pc: &Tensor<T>, ps: &Tensor<T>) -> Result<FullTrace<T>> {
        let (fc, central) = self.central.forward_traced(&self.store, self.stream_input(pc, ps)?)?;
        let fusion_split = fc.shape()[0];
        let (fs, surround) = match &self.surround {
            Some(s) => {
                let (f, t) = s.forward_traced(&self.store, ps.clone())?;
                (Some(f), Some(t))
            }
            None => (None, None),
        };
        let fused = self.fuse(&fc, fs.as_ref())?;
        let (e1, context_head) = self.context_head.forward_traced(&self.store, fused)?;
        let e1_raw = to3(&e1)?;
        let correction = Correction::new(e1_raw);
        let p1 = correction.apply(pc)?;
        let (f, trunk) = self.refine_trunk.forward_traced(&self.store, cat(pc, &p1)?)?;
        let (e2, refine_head) = self.refine_head.forward_traced(&self.store, f.clone())?;
        let (e3, intermediate_head) = self.intermediate_head.forward_traced(&self.store, f)?;
        Ok(FullTrace {
            e1_raw,
            e2_raw: to3(&e2)?,
            e3_raw: to3(&e3)?,
            central,
            surround,
            fusion_split,
            context_head,
            correction,
            pc: pc.clone(),
            trunk,
            refine_head,
            intermediate_head,
        })
    }

    /// Back-propagates loss gradients on e1, e2 and e2∘e3 through both networks,
    /// including the path through the corrected patch into the contextual net.
    pub fn backward_full(&self, trace: &FullTrace<T>, g: PredictionGrads<T>, grads: &mut Grads<T>) -> Result<()> {
        let mut g_e2 = g.e2.unwrap_or([T::zero(); 3]);
        let mut g_e3 = [T::zero(); 3];
        if let Some(gp) = g.product {
            for c in 0..3 {
                g_e2[c] += gp[c] * trace.e3_raw[c];
                g_e3[c] = gp[c] * trace.e2_raw[c];
            }
        }
        let s = &self.store;
        let gf2 = self
            .refine_head
            .backward(s, &trace.refine_head, vec3(g_e2), grads, true)?
            .expect("input grad requested");
        let gf3 = self
            .intermediate_head
            .backward(s, &trace.intermediate_head, vec3(g_e3), grads, true)?
            .expect("input grad requested");
        let mut gf = gf2;
        gf.add_assign(&gf3)?;
        let g_stack = self
            .refine_trunk
            .backward(s, &trace.trunk, gf, grads, true)?
            .expect("input grad requested");
        let plane = g_stack.len() / 2;
        let g_p1 = Tensor::from_vec(trace.pc.shape(), g_stack.data()[plane..].to_vec())?;
        let g_corr = trace.correction.backward(&trace.pc, &g_p1);

        let mut g_e1 = g.e1.unwrap_or([T::zero(); 3]);
        for c in 0..3 {
            g_e1[c] += g_corr[c];
        }
        let g_fused = self
            .context_head
            .backward(s, &trace.context_head, vec3(g_e1), grads, true)?
            .expect("input grad requested");
        let (g_c, g_s) = self.unfuse(g_fused, trace.fusion_split)?;
        self.central.backward(s, &trace.central, g_c, grads, false)?;
        if let (Some(stack), Some(tr), Some(g_s)) = (&self.surround, &trace.surround, g_s) {
            stack.backward(s, tr, g_s, grads, false)?;
        }
        Ok(())
    }
}

/// Gradient check of the full contextual + refinement composition with
/// squared-error losses on e1, e2 and e2∘e3 against `gt`. Every parameter,
/// frozen or not, is probed. Returns the worst scaled error.
pub fn full_grad_check(
    model: &IlluminantModel<f64>,
    pc: &Tensor<f64>,
    ps: &Tensor<f64>,
    gt: [f64; 3],
    eps: f64,
) -> Result<f64> {
    let probe = std::cell::RefCell::new(model.clone());
    crate::nn::check_gradients(&model.store, &[], eps, |store, _| {
        let mut m = probe.borrow_mut();
        m.store.clone_from(store);
        let tr = m.forward_full_traced(pc, ps)?;
        let sq = |e: [f64; 3]| {
            let d = [e[0] - gt[0], e[1] - gt[1], e[2] - gt[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2], d.map(|v| 2.0 * v))
        };
        let (l1, g1) = sq(tr.e1_raw);
        let (l2, g2) = sq(tr.e2_raw);
        let (l3, g3) = sq(tr.product());
        let mut grads = Grads::new(m.store.len());
        m.backward_full(
            &tr,
            PredictionGrads {
                e1: Some(g1),
                e2: Some(g2),
                product: Some(g3),
            },
            &mut grads,
        )?;
        Ok((l1 + l2 + l3, grads, Vec::new()))
    })
}
