//! Feature pyramids and the two-stage attention path over them.
//!
//! Stage A runs the multi-head channel attention inside every pyramid level
//! and fuses the result back with a 3x3 convolution. Stage B treats the five
//! levels themselves as the channels of a reduced, co-resized map, attends
//! across them, and folds the pooled per-level weights back into the full
//! resolution features.

use std::collections::BTreeMap;

use crate::accounting::{self, AccountingReport};
use crate::attention::{self, AttentionParams, OpConfig};
use crate::counter::MacCounter;
use crate::error::{Error, Result};
use crate::ops::{self, ConvParams};
use crate::tensor::Tensor;

pub const LEVEL_COUNT: usize = 5;
pub const STRIDES: [u32; 5] = [4, 8, 16, 32, 64];
pub const LEVEL_NAMES: [&str; 5] = ["S2", "S3", "S4", "S5", "S6"];

/// Spatial extents of the five levels given the finest one; each level halves
/// the previous, rounding up.
pub fn level_dims(s2_h: usize, s2_w: usize) -> [(usize, usize); LEVEL_COUNT] {
    let mut dims = [(0, 0); LEVEL_COUNT];
    let (mut h, mut w) = (s2_h, s2_w);
    for d in dims.iter_mut() {
        *d = (h, w);
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    dims
}

/// Ordered multi-resolution feature maps S2..S6 with fixed strides.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
    strides: [u32; 5],
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        if levels.len() != LEVEL_COUNT {
            return Err(Error::contract(format!(
                "feature pyramid needs exactly {LEVEL_COUNT} levels, got {}",
                levels.len()
            )));
        }
        let [b, c, h0, w0] = levels[0].shape();
        let expected = level_dims(h0, w0);
        for (i, level) in levels.iter().enumerate() {
            let [lb, lc, lh, lw] = level.shape();
            if lb != b || lc != c {
                return Err(Error::contract(format!(
                    "pyramid level {}: batch/channel extents {:?} differ from S2 {:?}",
                    LEVEL_NAMES[i],
                    [lb, lc],
                    [b, c]
                )));
            }
            if (lh, lw) != expected[i] {
                return Err(Error::contract(format!(
                    "pyramid level {}: expected spatial extents {}x{} (halving from S2, rounded up), got {}x{}",
                    LEVEL_NAMES[i], expected[i].0, expected[i].1, lh, lw
                )));
            }
        }
        Ok(FeaturePyramid { levels, strides: STRIDES })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }

    pub fn into_levels(self) -> Vec<Tensor> {
        self.levels
    }

    pub fn strides(&self) -> [u32; 5] {
        self.strides
    }

    pub fn batch(&self) -> usize {
        self.levels[0].batch()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    pub fn s2_dims(&self) -> (usize, usize) {
        (self.levels[0].height(), self.levels[0].width())
    }

    pub fn shapes(&self) -> Vec<[usize; 4]> {
        self.levels.iter().map(Tensor::shape).collect()
    }
}

/// Parameters of the cross-level (stage B) block: per-level 1x1 reductions to
/// one channel, the 5-channel cross attention, and per-level 3x3 restore
/// convolutions mapping the `2C` concatenation back to `C`.
#[derive(Debug, Clone)]
pub struct MpOpParams {
    pub reduce: Vec<ConvParams>,
    pub cross: AttentionParams,
    pub restore: Vec<ConvParams>,
    pub cross_config: OpConfig,
}

impl MpOpParams {
    pub fn seeded<R: rand::Rng>(channels: usize, rng: &mut R) -> Self {
        // reductions start as the channel mean; attention and restore maps are random
        let reduce = (0..LEVEL_COUNT).map(|_| ConvParams::channel_mean(channels)).collect();
        let cross = AttentionParams::seeded(LEVEL_COUNT, rng);
        let restore = (0..LEVEL_COUNT)
            .map(|_| crate::init::conv_params(channels, 2 * channels, 3, true, rng))
            .collect();
        MpOpParams { reduce, cross, restore, cross_config: OpConfig::single_head() }
    }

    /// Restore convolutions copy the original block and ignore the scaled one,
    /// and the cross attention carries a zero value transform: the stage is an
    /// exact identity.
    pub fn residual_identity(channels: usize) -> Self {
        MpOpParams {
            reduce: (0..LEVEL_COUNT).map(|_| ConvParams::channel_mean(channels)).collect(),
            cross: AttentionParams::zero_value(LEVEL_COUNT),
            restore: (0..LEVEL_COUNT).map(|_| ConvParams::pass_through(channels, 1)).collect(),
            cross_config: OpConfig::single_head(),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.reduce.len() != LEVEL_COUNT || self.restore.len() != LEVEL_COUNT {
            return Err(Error::contract(format!(
                "cross-level parameters need {LEVEL_COUNT} reduce and restore maps, got {} and {}",
                self.reduce.len(),
                self.restore.len()
            )));
        }
        for (i, r) in self.reduce.iter().enumerate() {
            if r.c_out() != 1 || r.c_in() != channels || r.kernel() != 1 {
                return Err(Error::contract(format!(
                    "reduce transform for {} must be a 1x1 map {channels}->1, got {:?}",
                    LEVEL_NAMES[i],
                    r.weight.shape()
                )));
            }
        }
        if self.cross.channels() != LEVEL_COUNT {
            return Err(Error::contract(format!(
                "cross attention must act on {LEVEL_COUNT} channels, got {}",
                self.cross.channels()
            )));
        }
        for (i, r) in self.restore.iter().enumerate() {
            if r.c_in() != 2 * channels || r.c_out() != channels || r.kernel() != 3 {
                return Err(Error::contract(format!(
                    "restore convolution for {} must be a 3x3 map {}->{channels}, got {:?}",
                    LEVEL_NAMES[i],
                    2 * channels,
                    r.weight.shape()
                )));
            }
        }
        self.cross_config.validate(LEVEL_COUNT)
    }

    pub fn param_count(&self) -> u64 {
        self.reduce.iter().map(ConvParams::param_count).sum::<u64>()
            + self.cross.param_count()
            + self.restore.iter().map(ConvParams::param_count).sum::<u64>()
    }

    pub fn zeros_like(&self) -> Self {
        MpOpParams {
            reduce: self.reduce.iter().map(ConvParams::zeros_like).collect(),
            cross: self.cross.zeros_like(),
            restore: self.restore.iter().map(ConvParams::zeros_like).collect(),
            cross_config: self.cross_config.clone(),
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, r) in self.reduce.iter().enumerate() {
            v.extend(r.named_tensors(&format!("{prefix}.reduce[{}]", LEVEL_NAMES[i].to_lowercase())));
        }
        v.extend(self.cross.named_tensors(&format!("{prefix}.cross")));
        for (i, r) in self.restore.iter().enumerate() {
            v.extend(r.named_tensors(&format!("{prefix}.restore[{}]", LEVEL_NAMES[i].to_lowercase())));
        }
        v
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (i, r) in self.reduce.iter_mut().enumerate() {
            v.extend(r.named_tensors_mut(&format!("{prefix}.reduce[{}]", LEVEL_NAMES[i].to_lowercase())));
        }
        v.extend(self.cross.named_tensors_mut(&format!("{prefix}.cross")));
        for (i, r) in self.restore.iter_mut().enumerate() {
            v.extend(r.named_tensors_mut(&format!("{prefix}.restore[{}]", LEVEL_NAMES[i].to_lowercase())));
        }
        v
    }
}

/// Per-level stage-A parameters: the in-level attention block and the 3x3
/// fusion convolution over `(original ++ adjusted)`.
#[derive(Debug, Clone)]
pub struct BaseLevelParams {
    pub attention: AttentionParams,
    pub fuse: ConvParams,
}

impl BaseLevelParams {
    pub fn seeded<R: rand::Rng>(channels: usize, rng: &mut R) -> Self {
        BaseLevelParams {
            attention: AttentionParams::seeded(channels, rng),
            fuse: crate::init::conv_params(channels, 2 * channels, 3, true, rng),
        }
    }

    pub fn residual_identity(channels: usize) -> Self {
        BaseLevelParams {
            attention: AttentionParams::zero_value(channels),
            fuse: ConvParams::pass_through(channels, 0),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.attention.channels() != channels {
            return Err(Error::contract(format!(
                "base attention acts on {} channels but the pyramid has {channels}",
                self.attention.channels()
            )));
        }
        if self.fuse.c_in() != 2 * channels || self.fuse.c_out() != channels || self.fuse.kernel() != 3 {
            return Err(Error::contract(format!(
                "fuse convolution must be a 3x3 map {}->{channels}, got {:?}",
                2 * channels,
                self.fuse.weight.shape()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> u64 {
        self.attention.param_count() + self.fuse.param_count()
    }

    pub fn zeros_like(&self) -> Self {
        BaseLevelParams {
            attention: self.attention.zeros_like(),
            fuse: self.fuse.zeros_like(),
        }
    }
}

/// Every learnable tensor of the full feature path.
#[derive(Debug, Clone)]
pub struct OpNetParams {
    pub base: Vec<BaseLevelParams>,
    pub mp: MpOpParams,
}

impl OpNetParams {
    pub fn seeded<R: rand::Rng>(channels: usize, rng: &mut R) -> Self {
        OpNetParams {
            base: (0..LEVEL_COUNT).map(|_| BaseLevelParams::seeded(channels, rng)).collect(),
            mp: MpOpParams::seeded(channels, rng),
        }
    }

    pub fn residual_identity(channels: usize) -> Self {
        OpNetParams {
            base: (0..LEVEL_COUNT).map(|_| BaseLevelParams::residual_identity(channels)).collect(),
            mp: MpOpParams::residual_identity(channels),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.base.len() != LEVEL_COUNT {
            return Err(Error::contract(format!(
                "feature path needs {LEVEL_COUNT} per-level parameter sets, got {}",
                self.base.len()
            )));
        }
        for b in &self.base {
            b.validate(channels)?;
        }
        self.mp.validate(channels)
    }

    pub fn param_count(&self) -> u64 {
        self.base.iter().map(BaseLevelParams::param_count).sum::<u64>() + self.mp.param_count()
    }

    pub fn zeros_like(&self) -> Self {
        OpNetParams {
            base: self.base.iter().map(BaseLevelParams::zeros_like).collect(),
            mp: self.mp.zeros_like(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, b) in self.base.iter().enumerate() {
            let lvl = LEVEL_NAMES[i].to_lowercase();
            v.extend(b.attention.named_tensors(&format!("base[{lvl}].attention")));
            v.extend(b.fuse.named_tensors(&format!("base[{lvl}].fuse")));
        }
        v.extend(self.mp.named_tensors("mp"));
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (i, b) in self.base.iter_mut().enumerate() {
            let lvl = LEVEL_NAMES[i].to_lowercase();
            v.extend(b.attention.named_tensors_mut(&format!("base[{lvl}].attention")));
            v.extend(b.fuse.named_tensors_mut(&format!("base[{lvl}].fuse")));
        }
        v.extend(self.mp.named_tensors_mut("mp"));
        v
    }
}

/// Backward map for the interpolate-and-stack step.
pub type IntpVjpFn = Box<dyn Fn(&Tensor) -> (Vec<Tensor>, Vec<ConvParams>)>;

/// Backward map for pyramid-to-pyramid blocks.
pub type MpVjpFn = Box<dyn Fn(&[Tensor]) -> (Vec<Tensor>, MpOpParams)>;

pub type OpNetVjpFn = Box<dyn Fn(&[Tensor]) -> (Vec<Tensor>, OpNetParams)>;

/// Reduce every level to one channel, resize all maps to the S2 extent, and
/// stack them in level order into a `(B, 5, H_S2, W_S2)` tensor.
pub fn intp_reduce(
    p: &FeaturePyramid,
    params: &MpOpParams,
    counter: Option<&MacCounter>,
) -> Result<(Tensor, IntpVjpFn)> {
    params.validate(p.channels())?;
    let (s2_h, s2_w) = p.s2_dims();
    let mut maps = Vec::with_capacity(LEVEL_COUNT);
    let mut conv_vjps = Vec::with_capacity(LEVEL_COUNT);
    let mut resize_vjps = Vec::with_capacity(LEVEL_COUNT);
    for i in 0..LEVEL_COUNT {
        let (reduced, cv) = ops::conv(p.level(i), &params.reduce[i], counter)?;
        let (resized, rv) = ops::bilinear_resize(&reduced, s2_h, s2_w, counter)?;
        maps.push(resized);
        conv_vjps.push(cv);
        resize_vjps.push(rv);
    }
    let (stacked, concat_vjp) = ops::concat_channels(&maps)?;

    let vjp: IntpVjpFn = Box::new(move |g: &Tensor| {
        let parts = concat_vjp(g);
        let mut d_levels = Vec::with_capacity(LEVEL_COUNT);
        let mut d_reduce = Vec::with_capacity(LEVEL_COUNT);
        for i in 0..LEVEL_COUNT {
            let d_reduced = resize_vjps[i](&parts[i]);
            let (d_level, d_params) = conv_vjps[i](&d_reduced);
            d_levels.push(d_level);
            d_reduce.push(d_params);
        }
        (d_levels, d_reduce)
    });
    Ok((stacked, vjp))
}

/// Cross-level attention with pooled reweighting. The five reduced level maps
/// attend to each other as channels; the spatial mean of each adjusted map
/// scales its original level, and a per-level restore convolution folds
/// `(scaled ++ original)` back to `C` channels. Output shapes equal input
/// shapes.
pub fn mp_op_forward(
    p: &FeaturePyramid,
    params: &MpOpParams,
    counter: Option<&MacCounter>,
) -> Result<(FeaturePyramid, MpVjpFn)> {
    let c = p.channels();
    let (mbar, intp_vjp) = intp_reduce(p, params, counter)?;
    let (rpcg, cross_vjp) =
        attention::op_multihead_forward(&mbar, &params.cross, &params.cross_config, counter)?;
    let (pooled, pool_vjp) = ops::global_avg_pool(&rpcg)?;

    let mut outs = Vec::with_capacity(LEVEL_COUNT);
    let mut expand_vjps = Vec::with_capacity(LEVEL_COUNT);
    let mut mul_vjps = Vec::with_capacity(LEVEL_COUNT);
    let mut cat_vjps = Vec::with_capacity(LEVEL_COUNT);
    let mut conv_vjps = Vec::with_capacity(LEVEL_COUNT);
    for i in 0..LEVEL_COUNT {
        let weight = pooled.slice_channels(i, i + 1)?;
        let (expanded, ev) = ops::expand_channels(&weight, c)?;
        let (scaled, mv) = ops::broadcast_mul(&expanded, p.level(i), counter)?;
        let (cat, catv) = ops::concat_channels(&[scaled, p.level(i).clone()])?;
        let (out, convv) = ops::conv(&cat, &params.restore[i], counter)?;
        outs.push(out);
        expand_vjps.push(ev);
        mul_vjps.push(mv);
        cat_vjps.push(catv);
        conv_vjps.push(convv);
    }
    let out_pyramid = FeaturePyramid::new(outs)?;

    let batch = p.batch();
    let level_shapes = p.shapes();
    let cross_config = params.cross_config.clone();
    let vjp: MpVjpFn = Box::new(move |g: &[Tensor]| {
        assert_eq!(g.len(), LEVEL_COUNT, "pyramid cotangent level count");
        let mut d_levels: Vec<Tensor> =
            level_shapes.iter().map(|&s| Tensor::zeros(s)).collect();
        let mut d_pooled = Tensor::zeros([batch, LEVEL_COUNT, 1, 1]);
        let mut d_restore = Vec::with_capacity(LEVEL_COUNT);
        for i in 0..LEVEL_COUNT {
            let (d_cat, d_conv) = conv_vjps[i](&g[i]);
            let parts = cat_vjps[i](&d_cat);
            let (d_expanded, d_scaled_level) = mul_vjps[i](&parts[0]);
            let d_weight = expand_vjps[i](&d_expanded);
            d_pooled.add_into_channels(i, &d_weight).expect("pooled scatter");
            d_levels[i].add_assign(&parts[1]).expect("level cotangent shapes agree");
            d_levels[i].add_assign(&d_scaled_level).expect("level cotangent shapes agree");
            d_restore.push(d_conv);
        }
        let d_rpcg = pool_vjp(&d_pooled);
        let (d_mbar, d_cross) = cross_vjp(&d_rpcg);
        let (d_from_reduce, d_reduce) = intp_vjp(&d_mbar);
        for i in 0..LEVEL_COUNT {
            d_levels[i].add_assign(&d_from_reduce[i]).expect("level cotangent shapes agree");
        }
        (
            d_levels,
            MpOpParams {
                reduce: d_reduce,
                cross: d_cross,
                restore: d_restore,
                cross_config: cross_config.clone(),
            },
        )
    });
    Ok((out_pyramid, vjp))
}

/// Full feature path: per-level attention plus fusion (stage A), then the
/// cross-level block (stage B). Output pyramid shapes equal input shapes.
pub fn opnet_feature_path(
    p: &FeaturePyramid,
    base: &[BaseLevelParams],
    mp: &MpOpParams,
    cfg: &OpConfig,
    counter: Option<&MacCounter>,
) -> Result<(FeaturePyramid, OpNetVjpFn)> {
    let c = p.channels();
    cfg.validate(c)?;
    if base.len() != LEVEL_COUNT {
        return Err(Error::contract(format!(
            "feature path needs {LEVEL_COUNT} per-level parameter sets, got {}",
            base.len()
        )));
    }
    for b in base {
        b.validate(c)?;
    }

    let mut fused = Vec::with_capacity(LEVEL_COUNT);
    let mut attn_vjps = Vec::with_capacity(LEVEL_COUNT);
    let mut cat_vjps = Vec::with_capacity(LEVEL_COUNT);
    let mut fuse_vjps = Vec::with_capacity(LEVEL_COUNT);
    for i in 0..LEVEL_COUNT {
        let (adjusted, av) = attention::op_multihead_forward(p.level(i), &base[i].attention, cfg, counter)?;
        let (cat, catv) = ops::concat_channels(&[p.level(i).clone(), adjusted])?;
        let (out, fv) = ops::conv(&cat, &base[i].fuse, counter)?;
        fused.push(out);
        attn_vjps.push(av);
        cat_vjps.push(catv);
        fuse_vjps.push(fv);
    }
    let stage_a = FeaturePyramid::new(fused)?;
    let (out_pyramid, mp_vjp) = mp_op_forward(&stage_a, mp, counter)?;

    let vjp: OpNetVjpFn = Box::new(move |g: &[Tensor]| {
        let (d_stage_a, d_mp) = mp_vjp(g);
        let mut d_levels = Vec::with_capacity(LEVEL_COUNT);
        let mut d_base = Vec::with_capacity(LEVEL_COUNT);
        for i in 0..LEVEL_COUNT {
            let (d_cat, d_fuse) = fuse_vjps[i](&d_stage_a[i]);
            let parts = cat_vjps[i](&d_cat);
            let (d_level_attn, d_attn) = attn_vjps[i](&parts[1]);
            let mut d_level = parts[0].clone();
            d_level.add_assign(&d_level_attn).expect("level cotangent shapes agree");
            d_levels.push(d_level);
            d_base.push(BaseLevelParams { attention: d_attn, fuse: d_fuse });
        }
        (d_levels, OpNetParams { base: d_base, mp: d_mp })
    });
    Ok((out_pyramid, vjp))
}

/// Ground-truth box in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub width: f64,
    pub height: f64,
    pub assigned_level: Option<u8>,
}

impl GtBox {
    pub fn new(width: f64, height: f64) -> Self {
        GtBox { width, height, assigned_level: None }
    }
}

/// Canonical pyramid-level assignment: `clamp(4 + floor(log2(sqrt(w*h)/224)), 2, 6)`.
pub fn assign_fpn_level(b: &GtBox) -> Result<u8> {
    if !(b.width > 0.0 && b.height > 0.0 && b.width.is_finite() && b.height.is_finite()) {
        return Err(Error::contract(format!(
            "box dimensions must be positive finite, got {}x{}",
            b.width, b.height
        )));
    }
    let scale = (b.width * b.height).sqrt() / 224.0;
    let k = 4 + scale.log2().floor() as i64;
    Ok(k.clamp(2, 6) as u8)
}

/// Mismatch error rates between chosen and ground-truth levels. Per-level
/// rates partition by ground-truth level; levels with no boxes stay absent.
#[derive(Debug, Clone, PartialEq)]
pub struct MismatchReport {
    pub overall: f64,
    pub per_level: BTreeMap<u8, f64>,
}

pub fn mismatch_rate(pairs: &[(u8, u8)]) -> Result<MismatchReport> {
    let mut total = [0usize; 5];
    let mut wrong = [0usize; 5];
    for &(chosen, gt) in pairs {
        for level in [chosen, gt] {
            if !(2..=6).contains(&level) {
                return Err(Error::contract(format!(
                    "pyramid level {level} outside the valid range [2, 6]"
                )));
            }
        }
        let bucket = (gt - 2) as usize;
        total[bucket] += 1;
        if chosen != gt {
            wrong[bucket] += 1;
        }
    }
    let n: usize = total.iter().sum();
    let overall = if n == 0 { 0.0 } else { wrong.iter().sum::<usize>() as f64 / n as f64 };
    let mut per_level = BTreeMap::new();
    for i in 0..5 {
        if total[i] > 0 {
            per_level.insert(i as u8 + 2, wrong[i] as f64 / total[i] as f64);
        }
    }
    Ok(MismatchReport { overall, per_level })
}

/// Static MAC/parameter report for the full feature path at the given
/// geometry; one entry per named stage.
pub fn count_pyramid_macs_params(
    batch: usize,
    channels: usize,
    s2_h: usize,
    s2_w: usize,
    cfg: &OpConfig,
    cross_cfg: &OpConfig,
) -> Result<AccountingReport> {
    let shapes: Vec<[usize; 4]> = level_dims(s2_h, s2_w)
        .iter()
        .map(|&(h, w)| [batch, channels, h, w])
        .collect();
    accounting::full_report(&shapes, cfg, cross_cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;

    pub(crate) fn random_pyramid(b: usize, c: usize, s2: (usize, usize), seed: u64) -> FeaturePyramid {
        let mut rng = init::rng(seed);
        let levels = level_dims(s2.0, s2.1)
            .iter()
            .map(|&(h, w)| init::standard_normal([b, c, h, w], &mut rng))
            .collect();
        FeaturePyramid::new(levels).unwrap()
    }

    #[test]
    fn pyramid_rejects_wrong_level_count() {
        let err = FeaturePyramid::new(vec![Tensor::zeros([1, 2, 4, 4]); 4]).unwrap_err();
        assert!(err.to_string().contains("exactly 5"));
    }

    #[test]
    fn pyramid_rejects_bad_extent_naming_level() {
        let mut levels: Vec<Tensor> = level_dims(16, 16)
            .iter()
            .map(|&(h, w)| Tensor::zeros([1, 2, h, w]))
            .collect();
        levels[1] = Tensor::zeros([1, 2, 7, 8]);
        let err = FeaturePyramid::new(levels).unwrap_err();
        assert!(err.to_string().contains("S3"), "{err}");
    }

    #[test]
    fn halving_rounds_up() {
        assert_eq!(level_dims(9, 64), [(9, 64), (5, 32), (3, 16), (2, 8), (1, 4)]);
    }

    #[test]
    fn intp_reduce_keeps_constants() {
        let c = 3;
        let consts = [1.5, -2.0, 0.25, 4.0, -0.5];
        let levels: Vec<Tensor> = level_dims(8, 8)
            .iter()
            .zip(consts)
            .map(|(&(h, w), v)| Tensor::filled([1, c, h, w], v))
            .collect();
        let p = FeaturePyramid::new(levels).unwrap();
        let params = MpOpParams::residual_identity(c);
        let (stacked, _) = intp_reduce(&p, &params, None).unwrap();
        assert_eq!(stacked.shape(), [1, 5, 8, 8]);
        for (i, v) in consts.iter().enumerate() {
            let chan = stacked.slice_channels(i, i + 1).unwrap();
            for x in chan.data() {
                assert!((x - v).abs() < 1e-12, "level {i}: {x} vs {v}");
            }
        }
    }

    #[test]
    fn intp_reduce_shape_contract() {
        let p = random_pyramid(2, 4, (64, 64), 29);
        let params = MpOpParams::seeded(4, &mut init::rng(30));
        let (stacked, _) = intp_reduce(&p, &params, None).unwrap();
        assert_eq!(stacked.shape(), [2, 5, 64, 64]);
    }

    #[test]
    fn mp_identical_reduced_maps_give_uniform_cross_weights() {
        // constant identical levels and mean reductions make all five reduced
        // maps equal; with identity q/k the cross softmax rows are uniform
        let c = 2;
        let levels: Vec<Tensor> = level_dims(4, 4)
            .iter()
            .map(|&(h, w)| Tensor::filled([1, c, h, w], 3.0))
            .collect();
        let p = FeaturePyramid::new(levels).unwrap();
        let mut params = MpOpParams::residual_identity(c);
        params.cross = AttentionParams::identity(LEVEL_COUNT);
        let (mbar, _) = intp_reduce(&p, &params, None).unwrap();
        let weights = attention::ca_attention_weights(&mbar, &params.cross, 1.0).unwrap();
        for v in weights.data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
        let (rpcg, _) = attention::op_multihead_forward(&mbar, &params.cross, &params.cross_config, None).unwrap();
        let first = rpcg.slice_channels(0, 1).unwrap();
        for i in 1..LEVEL_COUNT {
            let chan = rpcg.slice_channels(i, i + 1).unwrap();
            assert!(chan.max_abs_diff(&first).unwrap() < 1e-12);
        }
    }

    #[test]
    fn mp_residual_identity_is_exact() {
        let p = random_pyramid(1, 3, (8, 8), 31);
        let params = MpOpParams::residual_identity(3);
        let (out, _) = mp_op_forward(&p, &params, None).unwrap();
        assert_eq!(out.levels(), p.levels());
    }

    #[test]
    fn full_path_residual_identity_is_exact() {
        let p = random_pyramid(1, 4, (8, 8), 37);
        let params = OpNetParams::residual_identity(4);
        let cfg = OpConfig { heads: 2, temperature: 1.0 };
        let (out, _) = opnet_feature_path(&p, &params.base, &params.mp, &cfg, None).unwrap();
        assert_eq!(out.levels(), p.levels());
    }

    #[test]
    fn full_path_preserves_shapes() {
        let p = random_pyramid(2, 4, (9, 7), 38);
        let params = OpNetParams::seeded(4, &mut init::rng(39));
        let cfg = OpConfig { heads: 2, temperature: 1.0 };
        let (out, _) = opnet_feature_path(&p, &params.base, &params.mp, &cfg, None).unwrap();
        assert_eq!(out.shapes(), p.shapes());
    }

    #[test]
    fn level_assignment_examples() {
        assert_eq!(assign_fpn_level(&GtBox::new(224.0, 224.0)).unwrap(), 4);
        assert_eq!(assign_fpn_level(&GtBox::new(1.0, 1.0)).unwrap(), 2);
        assert_eq!(assign_fpn_level(&GtBox::new(2000.0, 2000.0)).unwrap(), 6);
        assert!(assign_fpn_level(&GtBox::new(0.0, 5.0)).is_err());
        assert!(assign_fpn_level(&GtBox::new(5.0, -1.0)).is_err());
    }

    #[test]
    fn mismatch_rate_examples() {
        let all_match = [(2, 2), (5, 5), (6, 6)];
        let r = mismatch_rate(&all_match).unwrap();
        assert_eq!(r.overall, 0.0);

        let pairs = [(2, 2), (3, 4), (4, 4), (6, 5)];
        let r = mismatch_rate(&pairs).unwrap();
        assert_eq!(r.overall, 0.5);
        assert_eq!(r.per_level.get(&4), Some(&0.5));
        assert_eq!(r.per_level.get(&5), Some(&1.0));
        assert_eq!(r.per_level.get(&2), Some(&0.0));
        assert_eq!(r.per_level.get(&3), None);

        assert!(mismatch_rate(&[(1, 4)]).is_err());
        assert!(mismatch_rate(&[(4, 7)]).is_err());
    }

    #[test]
    fn cross_level_weight_rows_sum_to_one() {
        let p = random_pyramid(2, 3, (8, 6), 40);
        let params = MpOpParams::seeded(3, &mut init::rng(41));
        let (mbar, _) = intp_reduce(&p, &params, None).unwrap();
        let weights = attention::ca_attention_weights(&mbar, &params.cross, 1.0).unwrap();
        let [b, rows, _, d] = weights.shape();
        for r in 0..b * rows {
            let s: f64 = weights.data()[r * d..(r + 1) * d].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
