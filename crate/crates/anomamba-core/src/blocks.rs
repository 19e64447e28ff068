//! Network building blocks: the frozen feature encoders, multi-scale fusion,
//! the context-aware decoder blocks, and feature-space noise injection.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::mathf;
use crate::ops::{self, ConvSpec};
use crate::params::{kaiming_uniform, ParamId, ParamStore, Scope};
use crate::pyramid::{pss_chain, PssWeights, PyramidSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PyramidRole {
    Encoder,
    Perturbed,
    Decoder,
}

/// Multi-level feature stack, shallow to deep. Spatial extent halves and
/// channel count grows strictly at each level.
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub role: PyramidRole,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>, role: PyramidRole) -> Result<Self> {
        if levels.is_empty() {
            return Err(invalid("feature pyramid", "no levels".into()));
        }
        let mut batch = None;
        let mut prev: Option<(usize, usize, usize)> = None;
        for (l, t) in levels.iter().enumerate() {
            let (b, c, h, w) = t.dims4("feature pyramid level")?;
            if *batch.get_or_insert(b) != b {
                return Err(shape_err(
                    "feature pyramid",
                    format!("level {l} batch {b} differs from level 0"),
                ));
            }
            if let Some((pc, ph, pw)) = prev {
                if h * 2 != ph || w * 2 != pw {
                    return Err(shape_err(
                        "feature pyramid",
                        format!("level {l} is {h}x{w}, expected half of {ph}x{pw}"),
                    ));
                }
                if c <= pc {
                    return Err(shape_err(
                        "feature pyramid",
                        format!("level {l} has {c} channels, not more than {pc}"),
                    ));
                }
            }
            prev = Some((c, h, w));
        }
        Ok(FeaturePyramid { levels, role })
    }

    pub fn batch(&self) -> usize {
        self.levels[0].shape()[0]
    }

    pub fn clone_as(&self, role: PyramidRole) -> FeaturePyramid {
        FeaturePyramid { levels: self.levels.clone(), role }
    }
}

/// Local branch: 1x1 conv, depthwise k x k conv, 1x1 conv. No activations,
/// so an identity-configured block is exactly the identity.
pub struct LecWeights {
    pub k: usize,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_dw: ParamId,
    pub b_dw: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl LecWeights {
    pub fn create<R: Rng>(
        store: &mut ParamStore,
        scope: &Scope,
        channels: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return Err(invalid("lec kernel", format!("size {k} must be odd")));
        }
        if channels == 0 {
            return Err(invalid("lec channels", "zero".into()));
        }
        Ok(LecWeights {
            k,
            w_in: store.add(
                scope.name("in.weight"),
                kaiming_uniform(rng, &[channels, channels, 1, 1], channels),
                true,
            )?,
            b_in: store.add(scope.name("in.bias"), Tensor::zeros(&[channels]), true)?,
            w_dw: store.add(
                scope.name("dw.weight"),
                kaiming_uniform(rng, &[channels, 1, k, k], k * k),
                true,
            )?,
            b_dw: store.add(scope.name("dw.bias"), Tensor::zeros(&[channels]), true)?,
            w_out: store.add(
                scope.name("out.weight"),
                kaiming_uniform(rng, &[channels, channels, 1, 1], channels),
                true,
            )?,
            b_out: store.add(scope.name("out.bias"), Tensor::zeros(&[channels]), true)?,
        })
    }
}

pub fn lec(g: &mut Graph, store: &ParamStore, x: Var, w: &LecWeights) -> Result<Var> {
    let (_, c, _, _) = g.value(x).dims4("lec input")?;
    let w_in = g.param(store, w.w_in);
    let b_in = g.param(store, w.b_in);
    let w_dw = g.param(store, w.w_dw);
    let b_dw = g.param(store, w.b_dw);
    let w_out = g.param(store, w.w_out);
    let b_out = g.param(store, w.b_out);
    let h = g.conv2d(x, w_in, Some(b_in), ConvSpec::unit())?;
    let h = g.conv2d(
        h,
        w_dw,
        Some(b_dw),
        ConvSpec { stride: 1, pad: (w.k - 1) / 2, groups: c },
    )?;
    g.conv2d(h, w_out, Some(b_out), ConvSpec::unit())
}

/// Decoder block configuration: channel width, the pyramidal global branch
/// (a chain of `m` scanning blocks), and the two local branches.
#[derive(Clone, Copy, Debug)]
pub struct CssConfig {
    pub channels: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
    pub m: usize,
    pub pyramid: PyramidSpec,
    pub use_global: bool,
    pub use_local: bool,
}

impl CssConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_global && !self.use_local {
            return Err(invalid("css config", "both branches disabled".into()));
        }
        if self.channels == 0 || self.state_dim == 0 || self.dt_rank == 0 {
            return Err(invalid("css config", "zero-sized dimension".into()));
        }
        if self.use_global && self.m == 0 {
            return Err(invalid("css config", "global branch with m = 0".into()));
        }
        Ok(())
    }

    pub fn branch_channels(&self) -> usize {
        let mut n = 0;
        if self.use_global {
            n += self.channels;
        }
        if self.use_local {
            n += 2 * self.channels;
        }
        n
    }
}

pub struct CssWeights {
    pub chain: Vec<PssWeights>,
    pub lec5: Option<LecWeights>,
    pub lec7: Option<LecWeights>,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
}

impl CssWeights {
    pub fn create<R: Rng>(
        store: &mut ParamStore,
        scope: &Scope,
        cfg: &CssConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut chain = Vec::new();
        if cfg.use_global {
            for i in 0..cfg.m {
                chain.push(PssWeights::create(
                    store,
                    &scope.sub(&format!("pss{i}")),
                    cfg.channels,
                    cfg.state_dim,
                    cfg.dt_rank,
                    cfg.pyramid,
                    rng,
                )?);
            }
        }
        let (lec5, lec7) = if cfg.use_local {
            (
                Some(LecWeights::create(store, &scope.sub("lec5"), cfg.channels, 5, rng)?),
                Some(LecWeights::create(store, &scope.sub("lec7"), cfg.channels, 7, rng)?),
            )
        } else {
            (None, None)
        };
        let cin = cfg.branch_channels();
        Ok(CssWeights {
            chain,
            lec5,
            lec7,
            fuse_w: store.add(
                scope.name("fuse.weight"),
                kaiming_uniform(rng, &[cfg.channels, cin, 1, 1], cin),
                true,
            )?,
            fuse_b: store.add(scope.name("fuse.bias"), Tensor::zeros(&[cfg.channels]), true)?,
        })
    }
}

/// Concat of the enabled branches, 1x1 fusion, residual add.
pub fn css(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    w: &CssWeights,
    cfg: &CssConfig,
) -> Result<Var> {
    cfg.validate()?;
    let mut branches = Vec::new();
    if cfg.use_global {
        branches.push(pss_chain(g, store, x, &w.chain, cfg.pyramid)?);
    }
    if cfg.use_local {
        let (l5, l7) = match (&w.lec5, &w.lec7) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(invalid("css weights", "local branch weights missing".into())),
        };
        branches.push(lec(g, store, x, l5)?);
        branches.push(lec(g, store, x, l7)?);
    }
    let catv = g.concat(&branches, 1)?;
    let fw = g.param(store, w.fuse_w);
    let fb = g.param(store, w.fuse_b);
    let fused = g.conv2d(catv, fw, Some(fb), ConvSpec::unit())?;
    g.add(fused, x)
}

/// Multi-scale fusion: each level is brought to the deepest level's spatial
/// extent by stride-2 3x3 convs, all levels are channel-concatenated, and a
/// 1x1 conv maps the stack to the bottleneck width.
pub struct MffWeights {
    pub downs: Vec<Vec<(ParamId, ParamId)>>,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub out_channels: usize,
}

impl MffWeights {
    /// `halvings[l]` is the number of stride-2 convs level `l` needs to reach
    /// the deepest level's spatial extent.
    pub fn create<R: Rng>(
        store: &mut ParamStore,
        scope: &Scope,
        level_channels: &[usize],
        halvings: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if level_channels.is_empty() || level_channels.len() != halvings.len() {
            return Err(invalid(
                "mff geometry",
                format!("{} channel entries, {} halving entries", level_channels.len(), halvings.len()),
            ));
        }
        let mut downs = Vec::new();
        for (l, (&c, &n)) in level_channels.iter().zip(halvings).enumerate() {
            let mut steps = Vec::new();
            for s in 0..n {
                steps.push((
                    store.add(
                        scope.name(&format!("down{l}.{s}.weight")),
                        kaiming_uniform(rng, &[c, c, 3, 3], 9 * c),
                        true,
                    )?,
                    store.add(
                        scope.name(&format!("down{l}.{s}.bias")),
                        Tensor::zeros(&[c]),
                        true,
                    )?,
                ));
            }
            downs.push(steps);
        }
        let total: usize = level_channels.iter().sum();
        let out_channels = *level_channels.last().unwrap();
        Ok(MffWeights {
            downs,
            fuse_w: store.add(
                scope.name("fuse.weight"),
                kaiming_uniform(rng, &[out_channels, total, 1, 1], total),
                true,
            )?,
            fuse_b: store.add(scope.name("fuse.bias"), Tensor::zeros(&[out_channels]), true)?,
            out_channels,
        })
    }
}

pub fn mff(g: &mut Graph, store: &ParamStore, levels: &[Var], w: &MffWeights) -> Result<Var> {
    if levels.len() != w.downs.len() {
        return Err(shape_err(
            "mff",
            format!("{} levels, weights built for {}", levels.len(), w.downs.len()),
        ));
    }
    let (_, _, dh, dw) = g.value(*levels.last().unwrap()).dims4("mff deepest level")?;
    let mut reduced = Vec::with_capacity(levels.len());
    for (l, (&lv, steps)) in levels.iter().zip(&w.downs).enumerate() {
        let mut cur = lv;
        for (wi, bi) in steps {
            let wv = g.param(store, *wi);
            let bv = g.param(store, *bi);
            cur = g.conv2d(cur, wv, Some(bv), ConvSpec { stride: 2, pad: 1, groups: 1 })?;
        }
        let (_, _, h, wd) = g.value(cur).dims4("mff level")?;
        if (h, wd) != (dh, dw) {
            return Err(shape_err(
                "mff",
                format!("level {l} reaches {h}x{wd}, deepest is {dh}x{dw}"),
            ));
        }
        reduced.push(cur);
    }
    let catv = g.concat(&reduced, 1)?;
    let fw = g.param(store, w.fuse_w);
    let fb = g.param(store, w.fuse_b);
    g.conv2d(catv, fw, Some(fb), ConvSpec::unit())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Tiny,
    ResNet34,
}

struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

struct BlockIds {
    conv1: ParamId,
    bn1: BnIds,
    conv2: ParamId,
    bn2: BnIds,
    down: Option<(ParamId, BnIds)>,
    stride: usize,
}

struct ResNetIds {
    conv1: ParamId,
    bn1: BnIds,
    layers: Vec<Vec<BlockIds>>,
}

enum EncoderNet {
    Tiny { stages: Vec<(ParamId, ParamId)> },
    ResNet(Box<ResNetIds>),
}

/// Frozen feature extractor. Owns its own parameter store, which is never
/// bound into a training graph, so its weights cannot receive gradients.
pub struct Encoder {
    kind: EncoderKind,
    store: ParamStore,
    net: EncoderNet,
    channels: Vec<usize>,
}

const BN_EPS: f32 = 1e-5;

pub const TINY_CHANNELS: [usize; 3] = [16, 32, 64];
pub const RESNET34_CHANNELS: [usize; 4] = [64, 128, 256, 512];
const RESNET34_BLOCKS: [usize; 4] = [3, 4, 6, 3];

impl Encoder {
    /// Small three-stage conv net with seeded random weights, for tests and
    /// desk-scale runs. Stage: 3x3 conv stride 2, then silu.
    pub fn tiny(seed: u64) -> Encoder {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &cout) in TINY_CHANNELS.iter().enumerate() {
            let w = store
                .add(
                    format!("stage{i}.weight"),
                    kaiming_uniform(&mut rng, &[cout, cin, 3, 3], 9 * cin),
                    false,
                )
                .expect("fresh store");
            let b = store
                .add(format!("stage{i}.bias"), Tensor::zeros(&[cout]), false)
                .expect("fresh store");
            stages.push((w, b));
            cin = cout;
        }
        Encoder {
            kind: EncoderKind::Tiny,
            store,
            net: EncoderNet::Tiny { stages },
            channels: TINY_CHANNELS.to_vec(),
        }
    }

    /// Wraps a store of pretrained weights using the torchvision resnet34
    /// state-dict naming (`conv1.weight`, `bn1.*`, `layerL.B.convN.weight`,
    /// `layerL.B.bnN.*`, `layerL.B.downsample.0/1.*`).
    pub fn resnet34(store: ParamStore) -> Result<Encoder> {
        let bn = |store: &ParamStore, prefix: &str, ch: usize| -> Result<BnIds> {
            let get = |leaf: &str| -> Result<ParamId> {
                let name = format!("{prefix}.{leaf}");
                let id = store
                    .id(&name)
                    .ok_or_else(|| invalid("encoder weights", format!("missing tensor {name}")))?;
                if store.value(id).shape() != [ch] {
                    return Err(shape_err(
                        "encoder weights",
                        format!("{name} has shape {:?}, want [{ch}]", store.value(id).shape()),
                    ));
                }
                Ok(id)
            };
            Ok(BnIds {
                gamma: get("weight")?,
                beta: get("bias")?,
                mean: get("running_mean")?,
                var: get("running_var")?,
            })
        };
        let conv = |store: &ParamStore, name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| invalid("encoder weights", format!("missing tensor {name}")))?;
            if store.value(id).shape() != shape {
                return Err(shape_err(
                    "encoder weights",
                    format!("{name} has shape {:?}, want {:?}", store.value(id).shape(), shape),
                ));
            }
            Ok(id)
        };
        let conv1 = conv(&store, "conv1.weight".into(), &[64, 3, 7, 7])?;
        let bn1 = bn(&store, "bn1", 64)?;
        let mut layers = Vec::new();
        let mut cin = 64;
        for (li, (&cout, &blocks)) in RESNET34_CHANNELS.iter().zip(&RESNET34_BLOCKS).enumerate() {
            let mut layer = Vec::new();
            for b in 0..blocks {
                let stride = if li > 0 && b == 0 { 2 } else { 1 };
                let p = format!("layer{}.{b}", li + 1);
                let needs_down = stride != 1 || cin != cout;
                let down = if needs_down {
                    Some((
                        conv(&store, format!("{p}.downsample.0.weight"), &[cout, cin, 1, 1])?,
                        bn(&store, &format!("{p}.downsample.1"), cout)?,
                    ))
                } else {
                    None
                };
                layer.push(BlockIds {
                    conv1: conv(&store, format!("{p}.conv1.weight"), &[cout, cin, 3, 3])?,
                    bn1: bn(&store, &format!("{p}.bn1"), cout)?,
                    conv2: conv(&store, format!("{p}.conv2.weight"), &[cout, cout, 3, 3])?,
                    bn2: bn(&store, &format!("{p}.bn2"), cout)?,
                    down,
                    stride,
                });
                cin = cout;
            }
            layers.push(layer);
        }
        Ok(Encoder {
            kind: EncoderKind::ResNet34,
            store,
            net: EncoderNet::ResNet(Box::new(ResNetIds { conv1, bn1, layers })),
            channels: RESNET34_CHANNELS.to_vec(),
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn feature_channels(&self) -> &[usize] {
        &self.channels
    }

    /// log2 of the image-to-deepest-feature downsampling factor.
    pub fn stride_log2(&self) -> usize {
        match self.kind {
            EncoderKind::Tiny => 3,
            EncoderKind::ResNet34 => 5,
        }
    }

    /// Stride-2 steps each level needs to reach the deepest level.
    pub fn level_halvings(&self) -> Vec<usize> {
        (0..self.channels.len()).rev().collect()
    }

    /// Decoder stage depths (deep to shallow) paired with this encoder.
    pub fn default_stage_depths(&self) -> Vec<usize> {
        match self.kind {
            EncoderKind::Tiny => alloc::vec![1, 1, 1],
            EncoderKind::ResNet34 => alloc::vec![3, 6, 4, 3],
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn forward(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, _, _) = image.dims4("encoder input")?;
        if c != 3 {
            return Err(shape_err("encoder input", format!("{c} channels, want 3")));
        }
        let levels = match &self.net {
            EncoderNet::Tiny { stages } => {
                let mut cur = image.clone();
                let mut levels = Vec::new();
                for (w, b) in stages {
                    cur = ops::conv2d(
                        &cur,
                        self.store.value(*w),
                        Some(self.store.value(*b)),
                        ConvSpec { stride: 2, pad: 1, groups: 1 },
                    )?;
                    cur = cur.map(|v| v * mathf::sigmoidf(v));
                    levels.push(cur.clone());
                }
                levels
            }
            EncoderNet::ResNet(ids) => self.resnet_forward(image, ids)?,
        };
        FeaturePyramid::new(levels, PyramidRole::Encoder)
    }

    fn bn(&self, x: &Tensor, ids: &BnIds) -> Result<Tensor> {
        ops::batchnorm2d(
            x,
            self.store.value(ids.gamma),
            self.store.value(ids.beta),
            self.store.value(ids.mean),
            self.store.value(ids.var),
            BN_EPS,
        )
    }

    fn resnet_forward(&self, image: &Tensor, ids: &ResNetIds) -> Result<Vec<Tensor>> {
        let stem = ops::conv2d(
            image,
            self.store.value(ids.conv1),
            None,
            ConvSpec { stride: 2, pad: 3, groups: 1 },
        )?;
        let stem = ops::relu(&self.bn(&stem, &ids.bn1)?);
        let mut cur = ops::maxpool2d(&stem, 3, 2, 1)?;
        let mut levels = Vec::new();
        for layer in &ids.layers {
            for block in layer {
                cur = self.basic_block(&cur, block)?;
            }
            levels.push(cur.clone());
        }
        Ok(levels)
    }

    fn basic_block(&self, x: &Tensor, ids: &BlockIds) -> Result<Tensor> {
        let h = ops::conv2d(
            x,
            self.store.value(ids.conv1),
            None,
            ConvSpec { stride: ids.stride, pad: 1, groups: 1 },
        )?;
        let h = ops::relu(&self.bn(&h, &ids.bn1)?);
        let h = ops::conv2d(
            &h,
            self.store.value(ids.conv2),
            None,
            ConvSpec { stride: 1, pad: 1, groups: 1 },
        )?;
        let h = self.bn(&h, &ids.bn2)?;
        let skip = match &ids.down {
            None => x.clone(),
            Some((w, bn)) => {
                let s = ops::conv2d(
                    x,
                    self.store.value(*w),
                    None,
                    ConvSpec { stride: ids.stride, pad: 0, groups: 1 },
                )?;
                self.bn(&s, bn)?
            }
        };
        let mut out = h;
        if out.shape() != skip.shape() {
            return Err(shape_err(
                "residual block",
                format!("branch {:?} vs skip {:?}", out.shape(), skip.shape()),
            ));
        }
        for (o, s) in out.data_mut().iter_mut().zip(skip.data()) {
            *o += *s;
        }
        Ok(ops::relu(&out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    /// Sigma is scaled by each sample's per-level feature standard deviation.
    Relative,
    /// Sigma is used as-is.
    Absolute,
}

/// Adds i.i.d. Gaussian noise to every feature element. Each sample consumes
/// its own RNG stream (levels in order), so a sample's perturbation depends
/// only on its seed and its own features, not on its batch neighbors.
pub fn inject_noise<R: Rng>(
    features: &FeaturePyramid,
    sigma: f32,
    mode: NoiseMode,
    rngs: &mut [R],
) -> Result<FeaturePyramid> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(invalid("noise sigma", format!("{sigma}")));
    }
    let batch = features.batch();
    if rngs.len() != batch {
        return Err(invalid(
            "noise streams",
            format!("{} streams for batch {batch}", rngs.len()),
        ));
    }
    if sigma == 0.0 {
        return Ok(features.clone_as(PyramidRole::Perturbed));
    }
    let mut levels = Vec::with_capacity(features.levels.len());
    for level in &features.levels {
        let (_, c, h, w) = level.dims4("noise level")?;
        let per_sample = c * h * w;
        let mut out = level.clone();
        for (b, rng) in rngs.iter_mut().enumerate() {
            let slice = &mut out.data_mut()[b * per_sample..(b + 1) * per_sample];
            let eff = match mode {
                NoiseMode::Absolute => sigma,
                NoiseMode::Relative => sigma * sample_std(slice),
            };
            for v in slice.iter_mut() {
                let n: f32 = rng.sample(StandardNormal);
                *v += eff * n;
            }
        }
        levels.push(out);
    }
    Ok(FeaturePyramid { levels, role: PyramidRole::Perturbed })
}

fn sample_std(xs: &[f32]) -> f32 {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
    mathf::sqrt(var) as f32
}

/// Shared knobs for every decoder stage.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOpts {
    pub state_dim: usize,
    /// Rank of the step-size projection; `None` derives max(1, C/16) per stage.
    pub dt_rank: Option<usize>,
    pub m: usize,
    pub pyramid: PyramidSpec,
    pub use_global: bool,
    pub use_local: bool,
}

pub struct DecoderStage {
    pub blocks: Vec<CssWeights>,
    /// Bilinear x2 followed by this 1x1 conv into the next (shallower) stage.
    pub up: Option<(ParamId, ParamId)>,
}

pub struct DecoderWeights {
    pub stages: Vec<DecoderStage>,
    pub configs: Vec<CssConfig>,
}

impl DecoderWeights {
    /// `channels` and `depths` run deep to shallow, mirroring the encoder.
    pub fn create<R: Rng>(
        store: &mut ParamStore,
        scope: &Scope,
        channels: &[usize],
        depths: &[usize],
        opts: &DecoderOpts,
        rng: &mut R,
    ) -> Result<Self> {
        if channels.is_empty() || channels.len() != depths.len() {
            return Err(invalid(
                "decoder geometry",
                format!("{} channel entries, {} depth entries", channels.len(), depths.len()),
            ));
        }
        let mut stages = Vec::new();
        let mut configs = Vec::new();
        for (i, (&c, &depth)) in channels.iter().zip(depths).enumerate() {
            let cfg = CssConfig {
                channels: c,
                state_dim: opts.state_dim,
                dt_rank: opts.dt_rank.unwrap_or_else(|| (c / 16).max(1)),
                m: opts.m,
                pyramid: opts.pyramid,
                use_global: opts.use_global,
                use_local: opts.use_local,
            };
            let sscope = scope.sub(&format!("stage{i}"));
            let mut blocks = Vec::new();
            for j in 0..depth {
                blocks.push(CssWeights::create(store, &sscope.sub(&format!("css{j}")), &cfg, rng)?);
            }
            let up = if i + 1 < channels.len() {
                Some((
                    store.add(
                        sscope.name("up.weight"),
                        kaiming_uniform(rng, &[channels[i + 1], c, 1, 1], c),
                        true,
                    )?,
                    store.add(sscope.name("up.bias"), Tensor::zeros(&[channels[i + 1]]), true)?,
                ))
            } else {
                None
            };
            stages.push(DecoderStage { blocks, up });
            configs.push(cfg);
        }
        Ok(DecoderWeights { stages, configs })
    }
}

/// Runs the decoder from the fused bottleneck. Returns one reconstruction
/// per stage, deep to shallow.
pub fn decoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    fused: Var,
    w: &DecoderWeights,
) -> Result<Vec<Var>> {
    let mut cur = fused;
    let mut outs = Vec::with_capacity(w.stages.len());
    for (stage, cfg) in w.stages.iter().zip(&w.configs) {
        let (_, c, h, wd) = g.value(cur).dims4("decoder stage input")?;
        if c != cfg.channels {
            return Err(shape_err(
                "decoder stage",
                format!("input has {c} channels, stage expects {}", cfg.channels),
            ));
        }
        for block in &stage.blocks {
            cur = css(g, store, cur, block, cfg)?;
        }
        outs.push(cur);
        if let Some((uw, ub)) = stage.up {
            let upsampled = g.bilinear_resize(cur, h * 2, wd * 2)?;
            let wv = g.param(store, uw);
            let bv = g.param(store, ub);
            cur = g.conv2d(upsampled, wv, Some(bv), ConvSpec::unit())?;
        }
    }
    Ok(outs)
}
