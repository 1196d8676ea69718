//! Channel-relation attention: the single-block channel-attention forward and
//! its multi-head variant, plus the exact multiply-accumulate counter for the
//! block.
//!
//! Queries, keys and values are whole feature channels. Similarity between
//! channels is a dot product over spatial positions; each output channel is a
//! softmax-weighted aggregation of all value channels, so the output keeps the
//! input's shape.

use crate::counter::MacCounter;
use crate::error::{Error, Result};
use crate::ops::{self, ConvParams};
use crate::tensor::Tensor;

/// Learnable channel transforms for queries, keys and values. All three are
/// bias-free 1x1 convolutions preserving the channel count.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: ConvParams,
    pub key: ConvParams,
    pub value: ConvParams,
}

impl AttentionParams {
    pub fn new(query: ConvParams, key: ConvParams, value: ConvParams) -> Result<Self> {
        let c = query.c_out();
        for (name, t) in [("query", &query), ("key", &key), ("value", &value)] {
            if t.kernel() != 1 || t.c_in() != c || t.c_out() != c {
                return Err(Error::contract(format!(
                    "attention {name} transform must be a 1x1 map {c}->{c}, got {:?}",
                    t.weight.shape()
                )));
            }
            if t.bias.is_some() {
                return Err(Error::contract(format!(
                    "attention {name} transform must be bias-free"
                )));
            }
        }
        Ok(AttentionParams { query, key, value })
    }

    pub fn seeded<R: rand::Rng>(channels: usize, rng: &mut R) -> Self {
        let mut mk = || {
            let mut p = crate::init::conv_params(channels, channels, 1, false, rng);
            p.bias = None;
            p
        };
        let query = mk();
        let key = mk();
        let value = mk();
        AttentionParams { query, key, value }
    }

    /// Identity transforms: queries, keys and values are the raw channels.
    pub fn identity(channels: usize) -> Self {
        AttentionParams {
            query: ConvParams::identity(channels),
            key: ConvParams::identity(channels),
            value: ConvParams::identity(channels),
        }
    }

    /// Identity queries/keys with an all-zero value transform; the block then
    /// contributes nothing downstream of the values.
    pub fn zero_value(channels: usize) -> Self {
        AttentionParams {
            query: ConvParams::identity(channels),
            key: ConvParams::identity(channels),
            value: ConvParams::zeros(channels, channels, 1, false),
        }
    }

    pub fn channels(&self) -> usize {
        self.query.c_out()
    }

    pub fn param_count(&self) -> u64 {
        self.query.param_count() + self.key.param_count() + self.value.param_count()
    }

    pub fn zeros_like(&self) -> Self {
        AttentionParams {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = self.query.named_tensors(&format!("{prefix}.query"));
        v.extend(self.key.named_tensors(&format!("{prefix}.key")));
        v.extend(self.value.named_tensors(&format!("{prefix}.value")));
        v
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut v = self.query.named_tensors_mut(&format!("{prefix}.query"));
        v.extend(self.key.named_tensors_mut(&format!("{prefix}.key")));
        v.extend(self.value.named_tensors_mut(&format!("{prefix}.value")));
        v
    }
}

/// Multi-head configuration: `heads` contiguous channel groups, each running
/// its own attention, and a softmax temperature (1.0 leaves similarities
/// untouched).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OpConfig {
    pub heads: usize,
    pub temperature: f64,
}

impl Default for OpConfig {
    fn default() -> Self {
        OpConfig { heads: 2, temperature: 1.0 }
    }
}

impl OpConfig {
    pub fn single_head() -> Self {
        OpConfig { heads: 1, temperature: 1.0 }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::config("head count must be at least 1".to_string()));
        }
        if channels % self.heads != 0 {
            return Err(Error::config(format!(
                "channel count {} is not divisible by head count {}",
                channels, self.heads
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be a positive finite number, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Backward map for attention blocks: input cotangent plus transform grads.
pub type AttentionVjpFn = Box<dyn Fn(&Tensor) -> (Tensor, AttentionParams)>;

type AttendVjp = Box<dyn Fn(&Tensor) -> (Tensor, Tensor, Tensor)>;

/// Core attention given already-transformed q/k/v: similarity gram, optional
/// temperature, row softmax, weighted aggregation. Returns the output, the
/// normalized weight matrix `(B, C, 1, C)` and the backward map to
/// `(d_q, d_k, d_v)`.
fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    temperature: f64,
    counter: Option<&MacCounter>,
) -> Result<(Tensor, Tensor, AttendVjp)> {
    let (sim, gram_vjp) = ops::channel_gram(q, k, counter)?;
    // temperature division is excluded from MAC accounting, like the softmax
    let mut scaled = sim;
    for x in scaled.data_mut() {
        *x /= temperature;
    }
    let (weights, softmax_vjp) = ops::softmax_rows(&scaled)?;
    let (out, sum_vjp) = ops::weighted_channel_sum(&weights, v, counter)?;

    let weights_out = weights.clone();
    let vjp: AttendVjp = Box::new(move |g: &Tensor| {
        let (d_weights, d_v) = sum_vjp(g);
        let d_scaled = softmax_vjp(&d_weights);
        let d_sim = d_scaled.scale(1.0 / temperature);
        let (d_q, d_k) = gram_vjp(&d_sim);
        (d_q, d_k, d_v)
    });
    Ok((out, weights_out, vjp))
}

/// Channel-attention forward: transform the input into q/k/v, weight every
/// channel against every other, and aggregate. Output shape equals input
/// shape.
pub fn ca_forward(
    m: &Tensor,
    params: &AttentionParams,
    temperature: f64,
    counter: Option<&MacCounter>,
) -> Result<(Tensor, AttentionVjpFn)> {
    m.ensure_finite("channel-attention input")?;
    if m.channels() == 0 {
        return Err(Error::contract("channel-attention input has zero channels".to_string()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!(
            "temperature must be a positive finite number, got {temperature}"
        )));
    }
    let (q, q_vjp) = ops::conv(m, &params.query, counter)?;
    let (k, k_vjp) = ops::conv(m, &params.key, counter)?;
    let (v, v_vjp) = ops::conv(m, &params.value, counter)?;
    let (out, _weights, attend_vjp) = attend(&q, &k, &v, temperature, counter)?;

    let vjp: AttentionVjpFn = Box::new(move |g: &Tensor| {
        let (d_q, d_k, d_v) = attend_vjp(g);
        let (d_m_q, d_query) = q_vjp(&d_q);
        let (d_m_k, d_key) = k_vjp(&d_k);
        let (d_m_v, d_value) = v_vjp(&d_v);
        let mut d_m = d_m_q;
        d_m.add_assign(&d_m_k).expect("cotangent shapes agree");
        d_m.add_assign(&d_m_v).expect("cotangent shapes agree");
        (d_m, AttentionParams { query: d_query, key: d_key, value: d_value })
    });
    Ok((out, vjp))
}

/// Normalized attention weight matrix `(B, C, 1, C)` for diagnostics; rows sum
/// to one.
pub fn ca_attention_weights(m: &Tensor, params: &AttentionParams, temperature: f64) -> Result<Tensor> {
    let (q, _) = ops::conv(m, &params.query, None)?;
    let (k, _) = ops::conv(m, &params.key, None)?;
    let (sim, _) = ops::channel_gram(&q, &k, None)?;
    let mut scaled = sim;
    for x in scaled.data_mut() {
        *x /= temperature;
    }
    let (weights, _) = ops::softmax_rows(&scaled)?;
    Ok(weights)
}

/// Per-head normalized weight matrices, each `(B, C/P, 1, C/P)`.
pub fn multihead_attention_weights(
    m: &Tensor,
    params: &AttentionParams,
    cfg: &OpConfig,
) -> Result<Vec<Tensor>> {
    cfg.validate(m.channels())?;
    let (q, _) = ops::conv(m, &params.query, None)?;
    let (k, _) = ops::conv(m, &params.key, None)?;
    let per_head = m.channels() / cfg.heads;
    let mut out = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let lo = head * per_head;
        let hi = lo + per_head;
        let (sim, _) = ops::channel_gram(&q.slice_channels(lo, hi)?, &k.slice_channels(lo, hi)?, None)?;
        let mut scaled = sim;
        for x in scaled.data_mut() {
            *x /= cfg.temperature;
        }
        let (weights, _) = ops::softmax_rows(&scaled)?;
        out.push(weights);
    }
    Ok(out)
}

/// Multi-head attention: q/k/v are computed by the full-width transforms, the
/// transformed channels are split into `heads` contiguous groups, each group
/// attends independently, and head outputs are concatenated in order.
pub fn op_multihead_forward(
    m: &Tensor,
    params: &AttentionParams,
    cfg: &OpConfig,
    counter: Option<&MacCounter>,
) -> Result<(Tensor, AttentionVjpFn)> {
    let [b, c, h, w] = m.shape();
    cfg.validate(c)?;
    m.ensure_finite("multi-head attention input")?;
    if c == 0 {
        return Err(Error::contract("multi-head attention input has zero channels".to_string()));
    }
    let (q, q_vjp) = ops::conv(m, &params.query, counter)?;
    let (k, k_vjp) = ops::conv(m, &params.key, counter)?;
    let (v, v_vjp) = ops::conv(m, &params.value, counter)?;

    let heads = cfg.heads;
    let per_head = c / heads;
    let mut head_outs = Vec::with_capacity(heads);
    let mut head_vjps = Vec::with_capacity(heads);
    for head in 0..heads {
        let lo = head * per_head;
        let hi = lo + per_head;
        let (out_h, _weights, vjp_h) = attend(
            &q.slice_channels(lo, hi)?,
            &k.slice_channels(lo, hi)?,
            &v.slice_channels(lo, hi)?,
            cfg.temperature,
            counter,
        )?;
        head_outs.push(out_h);
        head_vjps.push(vjp_h);
    }
    let (out, _concat_vjp) = ops::concat_channels(&head_outs)?;

    let vjp: AttentionVjpFn = Box::new(move |g: &Tensor| {
        assert_eq!(g.shape(), [b, c, h, w], "multi-head cotangent shape");
        let mut d_q = Tensor::zeros([b, c, h, w]);
        let mut d_k = Tensor::zeros([b, c, h, w]);
        let mut d_v = Tensor::zeros([b, c, h, w]);
        for (head, vjp_h) in head_vjps.iter().enumerate() {
            let lo = head * per_head;
            let g_h = g.slice_channels(lo, lo + per_head).expect("head slice in range");
            let (d_qh, d_kh, d_vh) = vjp_h(&g_h);
            d_q.add_into_channels(lo, &d_qh).expect("head scatter in range");
            d_k.add_into_channels(lo, &d_kh).expect("head scatter in range");
            d_v.add_into_channels(lo, &d_vh).expect("head scatter in range");
        }
        let (d_m_q, d_query) = q_vjp(&d_q);
        let (d_m_k, d_key) = k_vjp(&d_k);
        let (d_m_v, d_value) = v_vjp(&d_v);
        let mut d_m = d_m_q;
        d_m.add_assign(&d_m_k).expect("cotangent shapes agree");
        d_m.add_assign(&d_m_v).expect("cotangent shapes agree");
        (d_m, AttentionParams { query: d_query, key: d_key, value: d_value })
    });
    Ok((out, vjp))
}

/// Exact multiply-accumulate count of one multi-head block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpMacs {
    /// The three full-width channel transforms: `3*B*C*C*H*W`.
    pub transforms: u64,
    /// Similarity gram plus weighted aggregation: `2*B*P*(C/P)^2*H*W`.
    pub similarity_stage: u64,
}

impl OpMacs {
    pub fn total(&self) -> u64 {
        self.transforms + self.similarity_stage
    }
}

pub fn count_op_macs(shape: [usize; 4], cfg: &OpConfig) -> Result<OpMacs> {
    let [b, c, h, w] = shape;
    cfg.validate(c)?;
    let (b, c, h, w) = (b as u64, c as u64, h as u64, w as u64);
    let p = cfg.heads as u64;
    let per_head = c / p;
    Ok(OpMacs {
        transforms: 3 * b * c * c * h * w,
        similarity_stage: 2 * b * p * per_head * per_head * h * w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init;

    #[test]
    fn single_channel_degenerates_to_identity() {
        let m = init::standard_normal([1, 1, 3, 3], &mut init::rng(20));
        let (out, _) = ca_forward(&m, &AttentionParams::identity(1), 1.0, None).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn identical_channels_give_uniform_weights_and_fixed_point() {
        let chan = init::standard_normal([1, 1, 2, 2], &mut init::rng(21));
        let (m, _) = ops::concat_channels(&[chan.clone(), chan.clone(), chan.clone()]).unwrap();
        let params = AttentionParams::identity(3);
        let weights = ca_attention_weights(&m, &params, 1.0).unwrap();
        for v in weights.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let (out, _) = ca_forward(&m, &params, 1.0, None).unwrap();
        assert!(out.max_abs_diff(&m).unwrap() < 1e-12);
    }

    #[test]
    fn single_head_matches_ca_bitwise() {
        let mut rng = init::rng(22);
        let m = init::standard_normal([2, 4, 3, 3], &mut rng);
        let params = AttentionParams::seeded(4, &mut rng);
        let (ca, _) = ca_forward(&m, &params, 1.0, None).unwrap();
        let (mh, _) = op_multihead_forward(&m, &params, &OpConfig::single_head(), None).unwrap();
        assert_eq!(ca, mh);
    }

    #[test]
    fn head_count_must_divide_channels() {
        let m = Tensor::zeros([1, 3, 2, 2]);
        let params = AttentionParams::identity(3);
        let cfg = OpConfig { heads: 2, temperature: 1.0 };
        let err = op_multihead_forward(&m, &params, &cfg, None).err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('2'), "{msg}");
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut m = Tensor::zeros([1, 2, 2, 2]);
        m.set(0, 0, 0, 0, f64::NAN);
        let err = ca_forward(&m, &AttentionParams::identity(2), 1.0, None).err().unwrap();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn default_config_ships_two_heads() {
        assert_eq!(OpConfig::default(), OpConfig { heads: 2, temperature: 1.0 });
    }

    #[test]
    fn mac_count_hand_example() {
        let macs = count_op_macs([1, 2, 1, 1], &OpConfig::single_head()).unwrap();
        assert_eq!(macs.transforms, 12);
        assert_eq!(macs.similarity_stage, 8);
        assert_eq!(macs.total(), 20);
    }

    #[test]
    fn mac_count_zero_channels() {
        let macs = count_op_macs([4, 0, 8, 8], &OpConfig::single_head()).unwrap();
        assert_eq!(macs.total(), 0);
    }

    #[test]
    fn doubling_heads_halves_similarity_stage() {
        for (c, p) in [(8, 1), (8, 2), (16, 4), (32, 2)] {
            let a = count_op_macs([2, c, 5, 3], &OpConfig { heads: p, temperature: 1.0 }).unwrap();
            let b = count_op_macs([2, c, 5, 3], &OpConfig { heads: 2 * p, temperature: 1.0 }).unwrap();
            assert_eq!(a.similarity_stage, 2 * b.similarity_stage);
            assert_eq!(a.transforms, b.transforms);
        }
    }

    #[test]
    fn instrumented_run_matches_static_count() {
        let mut rng = init::rng(23);
        for &(b, c, h, w, p) in &[(1, 4, 2, 3, 2), (2, 6, 3, 2, 3), (1, 8, 4, 4, 1)] {
            let m = init::standard_normal([b, c, h, w], &mut rng);
            let params = AttentionParams::seeded(c, &mut rng);
            let cfg = OpConfig { heads: p, temperature: 1.0 };
            let ctr = MacCounter::new();
            op_multihead_forward(&m, &params, &cfg, Some(&ctr)).unwrap();
            let expected = count_op_macs([b, c, h, w], &cfg).unwrap();
            assert_eq!(ctr.similarity_stage(), expected.similarity_stage);
            assert_eq!(ctr.conv(), expected.transforms);
            assert_eq!(ctr.total(), expected.total());
        }
    }

    #[test]
    fn identity_transform_output_is_convex_combination() {
        let mut rng = init::rng(24);
        let m = init::standard_normal([1, 5, 3, 3], &mut rng);
        let (out, _) = op_multihead_forward(
            &m,
            &AttentionParams::identity(5),
            &OpConfig::single_head(),
            None,
        )
        .unwrap();
        for hh in 0..3 {
            for ww in 0..3 {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for ci in 0..5 {
                    lo = lo.min(m.at(0, ci, hh, ww));
                    hi = hi.max(m.at(0, ci, hh, ww));
                }
                for ci in 0..5 {
                    let v = out.at(0, ci, hh, ww);
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn head_permutation_equivariance() {
        // swapping the two head blocks of the input and permuting the
        // transform weights accordingly swaps the output head blocks
        let mut rng = init::rng(25);
        let c = 6;
        let per = 3;
        let m = init::standard_normal([1, c, 2, 2], &mut rng);
        let params = AttentionParams::seeded(c, &mut rng);
        let cfg = OpConfig { heads: 2, temperature: 1.0 };
        let (out, _) = op_multihead_forward(&m, &params, &cfg, None).unwrap();

        let perm: Vec<usize> = (per..c).chain(0..per).collect();
        let mut m2 = Tensor::zeros([1, c, 2, 2]);
        for (new, &old) in perm.iter().enumerate() {
            let src = m.slice_channels(old, old + 1).unwrap();
            m2.add_into_channels(new, &src).unwrap();
        }
        let permute_conv = |p: &ConvParams| {
            let mut w = Tensor::zeros([c, c, 1, 1]);
            for (ni, &oi) in perm.iter().enumerate() {
                for (nj, &oj) in perm.iter().enumerate() {
                    w.set(ni, nj, 0, 0, p.weight.at(oi, oj, 0, 0));
                }
            }
            ConvParams::new(w, None).unwrap()
        };
        let params2 = AttentionParams {
            query: permute_conv(&params.query),
            key: permute_conv(&params.key),
            value: permute_conv(&params.value),
        };
        let (out2, _) = op_multihead_forward(&m2, &params2, &cfg, None).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            let a = out2.slice_channels(new, new + 1).unwrap();
            let b = out.slice_channels(old, old + 1).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
        }
    }
}
