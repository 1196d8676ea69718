//! Differentiable tensor primitives.
//!
//! Every operation returns its output together with a boxed backward closure
//! mapping an output cotangent to input cotangents (one per differentiable
//! input, parameters included). Cotangent shapes always equal the shapes of
//! the corresponding inputs. There is no graph engine: composite blocks wire
//! these closures together by hand.

use crate::counter::{CountTally, MacCounter, NoTally, Tally};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::threads;

/// Backward map for single-input, single-output operations.
pub type TensorVjpFn = Box<dyn Fn(&Tensor) -> Tensor>;

/// Backward map for `conv`: cotangents for the input and the parameters.
pub type ConvVjpFn = Box<dyn Fn(&Tensor) -> (Tensor, ConvParams)>;

/// Backward map for two-input operations (gram, weighted sum, broadcast mul).
pub type PairVjpFn = Box<dyn Fn(&Tensor) -> (Tensor, Tensor)>;

/// Learnable convolution weights: `weight` shaped `(C_out, C_in, k, k)` with
/// `k` in {1, 3}, plus an optional bias stored as `(1, C_out, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let [c_out, _c_in, k, k2] = weight.shape();
        if k != k2 {
            return Err(Error::contract(format!(
                "convolution kernel must be square, got {k}x{k2}"
            )));
        }
        if k != 1 && k != 3 {
            return Err(Error::contract(format!(
                "convolution kernel size must be 1 or 3, got {k}"
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [1, c_out, 1, 1] {
                return Err(Error::shape_mismatch(
                    "convolution bias",
                    [1, c_out, 1, 1],
                    b.shape(),
                ));
            }
        }
        Ok(ConvParams { weight, bias })
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// 1x1 identity map over `c` channels, bias-free.
    pub fn identity(c: usize) -> Self {
        let mut weight = Tensor::zeros([c, c, 1, 1]);
        for i in 0..c {
            weight.set(i, i, 0, 0, 1.0);
        }
        ConvParams { weight, bias: None }
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize, with_bias: bool) -> Self {
        ConvParams {
            weight: Tensor::zeros([c_out, c_in, k, k]),
            bias: with_bias.then(|| Tensor::zeros([1, c_out, 1, 1])),
        }
    }

    /// 1x1 reduction `c_in -> 1` initialized to the channel mean (weights
    /// `1/c_in`, bias zero).
    pub fn channel_mean(c_in: usize) -> Self {
        let weight = Tensor::filled([1, c_in, 1, 1], 1.0 / c_in as f64);
        ConvParams {
            weight,
            bias: Some(Tensor::zeros([1, 1, 1, 1])),
        }
    }

    /// 3x3 fusion kernel over a `(2c -> c)` concatenation that copies one of
    /// the two channel blocks unchanged and ignores the other. `block` selects
    /// which half passes through (0 = first, 1 = second).
    pub fn pass_through(c: usize, block: usize) -> Self {
        let mut weight = Tensor::zeros([c, 2 * c, 3, 3]);
        for i in 0..c {
            weight.set(i, block * c + i, 1, 1, 1.0);
        }
        ConvParams {
            weight,
            bias: Some(Tensor::zeros([1, c, 1, 1])),
        }
    }

    pub fn param_count(&self) -> u64 {
        (self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)) as u64
    }

    /// Gradient carrier with the same structure, all zeros.
    pub fn zeros_like(&self) -> Self {
        ConvParams {
            weight: Tensor::zeros_like(&self.weight),
            bias: self.bias.as_ref().map(Tensor::zeros_like),
        }
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = vec![(format!("{prefix}.weight"), &self.weight)];
        if let Some(b) = &self.bias {
            v.push((format!("{prefix}.bias"), b));
        }
        v
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![(format!("{prefix}.weight"), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push((format!("{prefix}.bias"), b));
        }
        v
    }
}

fn conv_plane<T: Tally>(
    input: &Tensor,
    weight: &Tensor,
    bias_v: f64,
    bi: usize,
    o: usize,
    out_plane: &mut [f64],
    tally: &mut T,
) {
    let [_, c_in, h, w] = input.shape();
    let k = weight.shape()[2];
    let pad = k / 2;
    let id = input.data();
    let wd = weight.data();
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let mut acc = bias_v;
            for i in 0..c_in {
                let in_base = (bi * c_in + i) * plane;
                let w_base = (o * c_in + i) * k * k;
                for dy in 0..k {
                    let sy = (y + dy).wrapping_sub(pad);
                    for dx in 0..k {
                        let sx = (x + dx).wrapping_sub(pad);
                        // zero padding contributes an explicit multiply so the
                        // dynamic count matches the dense k^2 convention
                        let v = if sy < h && sx < w { id[in_base + sy * w + sx] } else { 0.0 };
                        acc += wd[w_base + dy * k + dx] * v;
                        tally.hit();
                    }
                }
            }
            out_plane[y * w + x] = acc;
        }
    }
}

/// 2-D convolution, stride 1, zero padding `k/2` (so spatial extents are
/// preserved). Linear in both the input and the weight.
pub fn conv(
    input: &Tensor,
    params: &ConvParams,
    counter: Option<&MacCounter>,
) -> Result<(Tensor, ConvVjpFn)> {
    let [b, c_in, h, w] = input.shape();
    let [c_out, w_c_in, k, _] = params.weight.shape();
    if k != 1 && k != 3 {
        return Err(Error::contract(format!(
            "convolution kernel size must be 1 or 3, got {k}"
        )));
    }
    if w_c_in != c_in {
        return Err(Error::shape_mismatch(
            "conv input/weight channels",
            format!("input {:?}", input.shape()),
            format!("weight {:?}", params.weight.shape()),
        ));
    }
    if let Some(bias) = &params.bias {
        if bias.shape() != [1, c_out, 1, 1] {
            return Err(Error::shape_mismatch("conv bias", [1, c_out, 1, 1], bias.shape()));
        }
    }

    let plane = h * w;
    let mut out = Tensor::zeros([b, c_out, h, w]);
    let work = b as u64 * c_out as u64 * c_in as u64 * (k * k) as u64 * plane as u64;
    match counter {
        Some(ctr) => {
            let mut tally = CountTally(0);
            for bi in 0..b {
                for o in 0..c_out {
                    let bias_v = params.bias.as_ref().map_or(0.0, |t| t.data()[o]);
                    let base = (bi * c_out + o) * plane;
                    let (input_ref, weight_ref) = (input, &params.weight);
                    conv_plane(
                        input_ref,
                        weight_ref,
                        bias_v,
                        bi,
                        o,
                        &mut out.data_mut()[base..base + plane],
                        &mut tally,
                    );
                }
            }
            ctr.add_conv(tally.count());
        }
        None if work > (1 << 22) && threads::max_threads() > 1 && plane > 0 => {
            let weight = &params.weight;
            let bias = params.bias.as_ref();
            threads::pool().install(|| {
                use rayon::prelude::*;
                out.data_mut()
                    .par_chunks_mut(plane)
                    .enumerate()
                    .for_each(|(pi, chunk)| {
                        let bi = pi / c_out;
                        let o = pi % c_out;
                        let bias_v = bias.map_or(0.0, |t| t.data()[o]);
                        conv_plane(input, weight, bias_v, bi, o, chunk, &mut NoTally);
                    });
            });
        }
        None => {
            for bi in 0..b {
                for o in 0..c_out {
                    let bias_v = params.bias.as_ref().map_or(0.0, |t| t.data()[o]);
                    let base = (bi * c_out + o) * plane;
                    conv_plane(
                        input,
                        &params.weight,
                        bias_v,
                        bi,
                        o,
                        &mut out.data_mut()[base..base + plane],
                        &mut NoTally,
                    );
                }
            }
        }
    }

    let input_c = input.clone();
    let weight_c = params.weight.clone();
    let has_bias = params.bias.is_some();
    let vjp: ConvVjpFn = Box::new(move |g: &Tensor| {
        assert_eq!(g.shape(), [b, c_out, h, w], "conv cotangent shape");
        let pad = k / 2;
        let gd = g.data();
        let id = input_c.data();
        let wd = weight_c.data();

        let mut d_input = Tensor::zeros([b, c_in, h, w]);
        {
            let dd = d_input.data_mut();
            for bi in 0..b {
                for i in 0..c_in {
                    for sy in 0..h {
                        for sx in 0..w {
                            let mut acc = 0.0;
                            for o in 0..c_out {
                                let g_base = (bi * c_out + o) * plane;
                                let w_base = (o * c_in + i) * k * k;
                                for dy in 0..k {
                                    let y = (sy + pad).wrapping_sub(dy);
                                    if y >= h {
                                        continue;
                                    }
                                    for dx in 0..k {
                                        let x = (sx + pad).wrapping_sub(dx);
                                        if x >= w {
                                            continue;
                                        }
                                        acc += wd[w_base + dy * k + dx] * gd[g_base + y * w + x];
                                    }
                                }
                            }
                            dd[(bi * c_in + i) * plane + sy * w + sx] = acc;
                        }
                    }
                }
            }
        }

        let mut d_weight = Tensor::zeros([c_out, c_in, k, k]);
        {
            let dw = d_weight.data_mut();
            for o in 0..c_out {
                for i in 0..c_in {
                    for dy in 0..k {
                        for dx in 0..k {
                            let mut acc = 0.0;
                            for bi in 0..b {
                                let g_base = (bi * c_out + o) * plane;
                                let in_base = (bi * c_in + i) * plane;
                                for y in 0..h {
                                    let sy = (y + dy).wrapping_sub(pad);
                                    if sy >= h {
                                        continue;
                                    }
                                    for x in 0..w {
                                        let sx = (x + dx).wrapping_sub(pad);
                                        if sx >= w {
                                            continue;
                                        }
                                        acc += gd[g_base + y * w + x] * id[in_base + sy * w + sx];
                                    }
                                }
                            }
                            dw[(o * c_in + i) * k * k + dy * k + dx] = acc;
                        }
                    }
                }
            }
        }

        let d_bias = has_bias.then(|| {
            let mut db = Tensor::zeros([1, c_out, 1, 1]);
            for o in 0..c_out {
                let mut acc = 0.0;
                for bi in 0..b {
                    let g_base = (bi * c_out + o) * plane;
                    for p in 0..plane {
                        acc += gd[g_base + p];
                    }
                }
                db.data_mut()[o] = acc;
            }
            db
        });

        (d_input, ConvParams { weight: d_weight, bias: d_bias })
    });

    Ok((out, vjp))
}

/// Row-wise softmax over the last axis, numerically stabilized by subtracting
/// the row maximum. Rows are the `B*C*H` runs of length `W`.
pub fn softmax_rows(logits: &Tensor) -> Result<(Tensor, TensorVjpFn)> {
    let [b, c, h, d] = logits.shape();
    if d == 0 {
        return Err(Error::contract(
            "softmax_rows: empty axis (row length is zero)".to_string(),
        ));
    }
    let rows = b * c * h;
    let mut out = Tensor::zeros([b, c, h, d]);
    {
        let src = logits.data();
        let dst = out.data_mut();
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                dst[r * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                dst[r * d + j] /= sum;
            }
        }
    }

    let y = out.clone();
    let vjp: TensorVjpFn = Box::new(move |g: &Tensor| {
        assert_eq!(g.shape(), y.shape(), "softmax cotangent shape");
        let mut d = Tensor::zeros(y.shape());
        let yd = y.data();
        let gd = g.data();
        let dd = d.data_mut();
        let dlen = y.shape()[3];
        for r in 0..yd.len() / dlen {
            let base = r * dlen;
            let mut s = 0.0;
            for j in 0..dlen {
                s += gd[base + j] * yd[base + j];
            }
            for j in 0..dlen {
                dd[base + j] = yd[base + j] * (gd[base + j] - s);
            }
        }
        d
    });
    Ok((out, vjp))
}

/// Per-batch channel similarity matrix: entry `(b, i, j)` is the dot product
/// of channel `i` of `a` with channel `j` of `b` over all spatial positions.
/// Returned as a `(B, C_a, 1, C_b)` tensor so rows lie on the last axis.
pub fn channel_gram(
    a: &Tensor,
    b: &Tensor,
    counter: Option<&MacCounter>,
) -> Result<(Tensor, PairVjpFn)> {
    let [ba, ca, ha, wa] = a.shape();
    let [bb, cb, hb, wb] = b.shape();
    if ba != bb || ha != hb || wa != wb {
        return Err(Error::shape_mismatch(
            "channel_gram batch/spatial extents",
            a.shape(),
            b.shape(),
        ));
    }
    let plane = ha * wa;
    let mut out = Tensor::zeros([ba, ca, 1, cb]);
    let mut tally = CountTally(0);
    {
        let ad = a.data();
        let bd = b.data();
        let od = out.data_mut();
        for bi in 0..ba {
            for i in 0..ca {
                let a_base = (bi * ca + i) * plane;
                for j in 0..cb {
                    let b_base = (bi * cb + j) * plane;
                    let mut acc = 0.0;
                    for p in 0..plane {
                        acc += ad[a_base + p] * bd[b_base + p];
                        tally.hit();
                    }
                    od[(bi * ca + i) * cb + j] = acc;
                }
            }
        }
    }
    if let Some(ctr) = counter {
        ctr.add_gram(tally.count());
    }

    let a_c = a.clone();
    let b_c = b.clone();
    let vjp: PairVjpFn = Box::new(move |g: &Tensor| {
        assert_eq!(g.shape(), [ba, ca, 1, cb], "channel_gram cotangent shape");
        let gd = g.data();
        let ad = a_c.data();
        let bd = b_c.data();
        let mut d_a = Tensor::zeros([ba, ca, ha, wa]);
        let mut d_b = Tensor::zeros([bb, cb, hb, wb]);
        {
            let dad = d_a.data_mut();
            for bi in 0..ba {
                for i in 0..ca {
                    let a_base = (bi * ca + i) * plane;
                    for j in 0..cb {
                        let w = gd[(bi * ca + i) * cb + j];
                        let b_base = (bi * cb + j) * plane;
                        for p in 0..plane {
                            dad[a_base + p] += w * bd[b_base + p];
                        }
                    }
                }
            }
        }
        {
            let dbd = d_b.data_mut();
            for bi in 0..ba {
                for j in 0..cb {
                    let b_base = (bi * cb + j) * plane;
                    for i in 0..ca {
                        let w = gd[(bi * ca + i) * cb + j];
                        let a_base = (bi * ca + i) * plane;
                        for p in 0..plane {
                            dbd[b_base + p] += w * ad[a_base + p];
                        }
                    }
                }
            }
        }
        (d_a, d_b)
    });
    Ok((out, vjp))
}

/// Weighted aggregation of value channels: `out[b,i] = sum_j w[b,i,j] * v[b,j]`.
/// Weights are a per-batch matrix stored as `(B, C_out, 1, C_in)`.
pub fn weighted_channel_sum(
    weights: &Tensor,
    values: &Tensor,
    counter: Option<&MacCounter>,
) -> Result<(Tensor, PairVjpFn)> {
    let [bw, c_out, one, c_in] = weights.shape();
    let [bv, cv, h, w] = values.shape();
    if one != 1 {
        return Err(Error::shape_mismatch(
            "weighted_channel_sum weights layout",
            "(B, C_out, 1, C_in)",
            weights.shape(),
        ));
    }
    if bw != bv || c_in != cv {
        return Err(Error::shape_mismatch(
            "weighted_channel_sum extents",
            weights.shape(),
            values.shape(),
        ));
    }
    let plane = h * w;
    let mut out = Tensor::zeros([bv, c_out, h, w]);
    let mut tally = CountTally(0);
    {
        let wd = weights.data();
        let vd = values.data();
        let od = out.data_mut();
        for bi in 0..bv {
            for i in 0..c_out {
                let out_base = (bi * c_out + i) * plane;
                for j in 0..c_in {
                    let coeff = wd[(bi * c_out + i) * c_in + j];
                    let v_base = (bi * c_in + j) * plane;
                    for p in 0..plane {
                        od[out_base + p] += coeff * vd[v_base + p];
                        tally.hit();
                    }
                }
            }
        }
    }
    if let Some(ctr) = counter {
        ctr.add_weighted_sum(tally.count());
    }

    let weights_c = weights.clone();
    let values_c = values.clone();
    let vjp: PairVjpFn = Box::new(move |g: &Tensor| {
        assert_eq!(g.shape(), [bv, c_out, h, w], "weighted_channel_sum cotangent shape");
        let gd = g.data();
        let wd = weights_c.data();
        let vd = values_c.data();
        let mut d_w = Tensor::zeros([bw, c_out, 1, c_in]);
        let mut d_v = Tensor::zeros([bv, c_in, h, w]);
        {
            let dwd = d_w.data_mut();
            for bi in 0..bv {
                for i in 0..c_out {
                    let g_base = (bi * c_out + i) * plane;
                    for j in 0..c_in {
                        let v_base = (bi * c_in + j) * plane;
                        let mut acc = 0.0;
                        for p in 0..plane {
                            acc += gd[g_base + p] * vd[v_base + p];
                        }
                        dwd[(bi * c_out + i) * c_in + j] = acc;
                    }
                }
            }
        }
        {
            let dvd = d_v.data_mut();
            for bi in 0..bv {
                for j in 0..c_in {
                    let v_base = (bi * c_in + j) * plane;
                    for i in 0..c_out {
                        let coeff = wd[(bi * c_out + i) * c_in + j];
                        let g_base = (bi * c_out + i) * plane;
                        for p in 0..plane {
                            dvd[v_base + p] += coeff * gd[g_base + p];
                        }
                    }
                }
            }
        }
        (d_w, d_v)
    });
    Ok((out, vjp))
}

struct ResizeAxis {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn resize_axis(in_len: usize, out_len: usize) -> ResizeAxis {
    let scale = in_len as f64 / out_len as f64;
    let mut lo = Vec::with_capacity(out_len);
    let mut hi = Vec::with_capacity(out_len);
    let mut frac = Vec::with_capacity(out_len);
    for o in 0..out_len {
        // half-pixel-center sampling with edge clamping
        let src = (o as f64 + 0.5) * scale - 0.5;
        let floor = src.floor();
        let f = src - floor;
        let i0 = (floor as i64).clamp(0, in_len as i64 - 1) as usize;
        let i1 = (floor as i64 + 1).clamp(0, in_len as i64 - 1) as usize;
        lo.push(i0);
        hi.push(i1);
        frac.push(f);
    }
    ResizeAxis { lo, hi, frac }
}

/// Bilinear spatial resize under the half-pixel-center convention with edge
/// clamping. A same-size resize is an exact identity.
pub fn bilinear_resize(
    input: &Tensor,
    out_h: usize,
    out_w: usize,
    counter: Option<&MacCounter>,
) -> Result<(Tensor, TensorVjpFn)> {
    let [b, c, h, w] = input.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract(format!(
            "bilinear_resize: target extents must be positive, got {out_h}x{out_w}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::contract(format!(
            "bilinear_resize: input has zero spatial extent {h}x{w}"
        )));
    }
    if out_h == h && out_w == w {
        let out = input.clone();
        let vjp: TensorVjpFn = Box::new(move |g: &Tensor| {
            assert_eq!(g.shape(), [b, c, h, w], "bilinear_resize cotangent shape");
            g.clone()
        });
        return Ok((out, vjp));
    }

    let ys = resize_axis(h, out_h);
    let xs = resize_axis(w, out_w);
    let mut out = Tensor::zeros([b, c, out_h, out_w]);
    let mut tally = CountTally(0);
    {
        let id = input.data();
        let od = out.data_mut();
        let in_plane = h * w;
        let out_plane = out_h * out_w;
        for pi in 0..b * c {
            let in_base = pi * in_plane;
            let out_base = pi * out_plane;
            for oy in 0..out_h {
                let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], ys.frac[oy]);
                for ox in 0..out_w {
                    let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
                    let v00 = id[in_base + y0 * w + x0];
                    let v01 = id[in_base + y0 * w + x1];
                    let v10 = id[in_base + y1 * w + x0];
                    let v11 = id[in_base + y1 * w + x1];
                    let top = v00 + fx * (v01 - v00);
                    tally.hit();
                    let bot = v10 + fx * (v11 - v10);
                    tally.hit();
                    let val = top + fy * (bot - top);
                    tally.hit();
                    od[out_base + oy * out_w + ox] = val;
                }
            }
        }
    }
    if let Some(ctr) = counter {
        ctr.add_resize(tally.count());
    }

    let vjp: TensorVjpFn = Box::new(move |g: &Tensor| {
        assert_eq!(g.shape(), [b, c, out_h, out_w], "bilinear_resize cotangent shape");
        let mut d = Tensor::zeros([b, c, h, w]);
        let gd = g.data();
        let dd = d.data_mut();
        let in_plane = h * w;
        let out_plane = out_h * out_w;
        for pi in 0..b * c {
            let in_base = pi * in_plane;
            let out_base = pi * out_plane;
            for oy in 0..out_h {
                let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], ys.frac[oy]);
                for ox in 0..out_w {
                    let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
                    let gv = gd[out_base + oy * out_w + ox];
                    dd[in_base + y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * gv;
                    dd[in_base + y0 * w + x1] += (1.0 - fy) * fx * gv;
                    dd[in_base + y1 * w + x0] += fy * (1.0 - fx) * gv;
                    dd[in_base + y1 * w + x1] += fy * fx * gv;
                }
            }
        }
        d
    });
    Ok((out, vjp))
}

/// Spatial mean per channel, output shaped `(B, C, 1, 1)`.
pub fn global_avg_pool(input: &Tensor) -> Result<(Tensor, TensorVjpFn)> {
    let [b, c, h, w] = input.shape();
    let plane = h * w;
    if plane == 0 {
        return Err(Error::contract(format!(
            "global_avg_pool: empty spatial extent {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros([b, c, 1, 1]);
    {
        let id = input.data();
        let od = out.data_mut();
        for pi in 0..b * c {
            let base = pi * plane;
            let mut acc = 0.0;
            for p in 0..plane {
                acc += id[base + p];
            }
            od[pi] = acc / plane as f64;
        }
    }
    let vjp: TensorVjpFn = Box::new(move |g: &Tensor| {
        assert_eq!(g.shape(), [b, c, 1, 1], "global_avg_pool cotangent shape");
        let mut d = Tensor::zeros([b, c, h, w]);
        let gd = g.data();
        let dd = d.data_mut();
        for pi in 0..b * c {
            let share = gd[pi] / plane as f64;
            let base = pi * plane;
            for p in 0..plane {
                dd[base + p] = share;
            }
        }
        d
    });
    Ok((out, vjp))
}

/// Concatenate tensors along the channel axis, order preserved.
pub fn concat_channels(parts: &[Tensor]) -> Result<(Tensor, Box<dyn Fn(&Tensor) -> Vec<Tensor>>)> {
    if parts.is_empty() {
        return Err(Error::contract("concat_channels: no parts given".to_string()));
    }
    let [b, _, h, w] = parts[0].shape();
    let mut c_total = 0;
    for (i, p) in parts.iter().enumerate() {
        let [pb, pc, ph, pw] = p.shape();
        if pb != b || ph != h || pw != w {
            return Err(Error::shape_mismatch(
                &format!("concat_channels part {i} batch/spatial extents"),
                parts[0].shape(),
                p.shape(),
            ));
        }
        c_total += pc;
    }
    let plane = h * w;
    let mut out = Tensor::zeros([b, c_total, h, w]);
    {
        let od = out.data_mut();
        for bi in 0..b {
            let mut offset = 0;
            for p in parts {
                let pc = p.channels();
                let src = &p.data()[bi * pc * plane..(bi + 1) * pc * plane];
                let dst_base = (bi * c_total + offset) * plane;
                od[dst_base..dst_base + pc * plane].copy_from_slice(src);
                offset += pc;
            }
        }
    }

    let part_channels: Vec<usize> = parts.iter().map(Tensor::channels).collect();
    let vjp = Box::new(move |g: &Tensor| {
        assert_eq!(g.shape(), [b, c_total, h, w], "concat_channels cotangent shape");
        let mut outs: Vec<Tensor> = part_channels
            .iter()
            .map(|&pc| Tensor::zeros([b, pc, h, w]))
            .collect();
        let gd = g.data();
        for bi in 0..b {
            let mut offset = 0;
            for (pi, &pc) in part_channels.iter().enumerate() {
                let src_base = (bi * c_total + offset) * plane;
                let dst_base = bi * pc * plane;
                outs[pi].data_mut()[dst_base..dst_base + pc * plane]
                    .copy_from_slice(&gd[src_base..src_base + pc * plane]);
                offset += pc;
            }
        }
        outs
    });
    Ok((out, vjp))
}

/// Per-channel scaling: `out[b,c,h,w] = scale[b,c] * input[b,c,h,w]` with
/// `scale` shaped `(B, C, 1, 1)`.
pub fn broadcast_mul(
    scale: &Tensor,
    input: &Tensor,
    counter: Option<&MacCounter>,
) -> Result<(Tensor, PairVjpFn)> {
    let [sb, sc, sh, sw] = scale.shape();
    let [b, c, h, w] = input.shape();
    if sh != 1 || sw != 1 {
        return Err(Error::shape_mismatch("broadcast_mul scale layout", [sb, sc, 1, 1], scale.shape()));
    }
    if sb != b || sc != c {
        return Err(Error::shape_mismatch("broadcast_mul extents", scale.shape(), input.shape()));
    }
    let plane = h * w;
    let mut out = Tensor::zeros([b, c, h, w]);
    let mut tally = CountTally(0);
    {
        let sd = scale.data();
        let id = input.data();
        let od = out.data_mut();
        for pi in 0..b * c {
            let s = sd[pi];
            let base = pi * plane;
            for p in 0..plane {
                od[base + p] = s * id[base + p];
                tally.hit();
            }
        }
    }
    if let Some(ctr) = counter {
        ctr.add_scale(tally.count());
    }

    let scale_c = scale.clone();
    let input_c = input.clone();
    let vjp: PairVjpFn = Box::new(move |g: &Tensor| {
        assert_eq!(g.shape(), [b, c, h, w], "broadcast_mul cotangent shape");
        let gd = g.data();
        let sd = scale_c.data();
        let id = input_c.data();
        let mut d_scale = Tensor::zeros([b, c, 1, 1]);
        let mut d_input = Tensor::zeros([b, c, h, w]);
        {
            let dsd = d_scale.data_mut();
            let did = d_input.data_mut();
            for pi in 0..b * c {
                let base = pi * plane;
                let mut acc = 0.0;
                for p in 0..plane {
                    acc += gd[base + p] * id[base + p];
                    did[base + p] = sd[pi] * gd[base + p];
                }
                dsd[pi] = acc;
            }
        }
        (d_scale, d_input)
    });
    Ok((out, vjp))
}

/// Replicate a `(B, 1, 1, 1)` scalar across `c_out` channels. Backward sums
/// the channel cotangents. Copy only; contributes no multiplies.
pub fn expand_channels(scalar: &Tensor, c_out: usize) -> Result<(Tensor, TensorVjpFn)> {
    let [b, c, h, w] = scalar.shape();
    if c != 1 || h != 1 || w != 1 {
        return Err(Error::shape_mismatch("expand_channels input", [b, 1, 1, 1], scalar.shape()));
    }
    let mut out = Tensor::zeros([b, c_out, 1, 1]);
    for bi in 0..b {
        let v = scalar.data()[bi];
        for ci in 0..c_out {
            out.data_mut()[bi * c_out + ci] = v;
        }
    }
    let vjp: TensorVjpFn = Box::new(move |g: &Tensor| {
        assert_eq!(g.shape(), [b, c_out, 1, 1], "expand_channels cotangent shape");
        let mut d = Tensor::zeros([b, 1, 1, 1]);
        for bi in 0..b {
            let mut acc = 0.0;
            for ci in 0..c_out {
                acc += g.data()[bi * c_out + ci];
            }
            d.data_mut()[bi] = acc;
        }
        d
    });
    Ok((out, vjp))
}
