//! Shared helpers for the integration suites: independent scalar oracles for
//! every operation under test, written as plain loops with their own softmax
//! and interpolation arithmetic so they share no code path with the library.

#![allow(dead_code)]

use opnet_core::attention::AttentionParams;
use opnet_core::init;
use opnet_core::ops::ConvParams;
use opnet_core::pyramid::{level_dims, FeaturePyramid, MpOpParams};
use opnet_core::Tensor;

pub fn seeded(shape: [usize; 4], seed: u64) -> Tensor {
    init::standard_normal(shape, &mut init::rng(seed))
}

pub fn random_pyramid(b: usize, c: usize, s2: (usize, usize), seed: u64) -> FeaturePyramid {
    let mut rng = init::rng(seed);
    let levels = level_dims(s2.0, s2.1)
        .iter()
        .map(|&(h, w)| init::standard_normal([b, c, h, w], &mut rng))
        .collect();
    FeaturePyramid::new(levels).expect("valid pyramid dims")
}

/// Direct convolution: explicit loops over batch, output channel, kernel taps.
pub fn conv_oracle(input: &Tensor, params: &ConvParams) -> Tensor {
    let [b, c_in, h, w] = input.shape();
    let [c_out, _, k, _] = params.weight.shape();
    let pad = (k / 2) as i64;
    let mut out = Tensor::zeros([b, c_out, h, w]);
    for bi in 0..b {
        for o in 0..c_out {
            let bias = params.bias.as_ref().map_or(0.0, |t| t.data()[o]);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias;
                    for i in 0..c_in {
                        for dy in 0..k {
                            for dx in 0..k {
                                let sy = y as i64 + dy as i64 - pad;
                                let sx = x as i64 + dx as i64 - pad;
                                if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                                    acc += params.weight.at(o, i, dy, dx)
                                        * input.at(bi, i, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out.set(bi, o, y, x, acc);
                }
            }
        }
    }
    out
}

/// Direct exponential-sum softmax (no stabilization) over the last axis.
pub fn softmax_oracle(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|row| {
            let exps: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|e| e / sum).collect()
        })
        .collect()
}

/// Triple-loop dot products over flattened spatial positions.
pub fn gram_oracle(a: &Tensor, b: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let [bb, ca, h, w] = a.shape();
    let cb = b.shape()[1];
    let mut out = vec![vec![vec![0.0; cb]; ca]; bb];
    for bi in 0..bb {
        for i in 0..ca {
            for j in 0..cb {
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        acc += a.at(bi, i, y, x) * b.at(bi, j, y, x);
                    }
                }
                out[bi][i][j] = acc;
            }
        }
    }
    out
}

/// Explicit weighted aggregation of value channels.
pub fn weighted_sum_oracle(weights: &[Vec<Vec<f64>>], values: &Tensor) -> Tensor {
    let [b, c_in, h, w] = values.shape();
    let c_out = weights[0].len();
    let mut out = Tensor::zeros([b, c_out, h, w]);
    for bi in 0..b {
        for i in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for j in 0..c_in {
                        acc += weights[bi][i][j] * values.at(bi, j, y, x);
                    }
                    out.set(bi, i, y, x, acc);
                }
            }
        }
    }
    out
}

/// Standalone scalar bilinear sampler: half-pixel centers, edge clamping,
/// expanded four-coefficient form.
pub fn bilinear_oracle(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [b, c, h, w] = input.shape();
    let mut out = Tensor::zeros([b, c, out_h, out_w]);
    let clamp = |v: f64, n: usize| -> (usize, usize, f64) {
        let floor = v.floor();
        let frac = v - floor;
        let i0 = (floor as i64).clamp(0, n as i64 - 1) as usize;
        let i1 = (floor as i64 + 1).clamp(0, n as i64 - 1) as usize;
        (i0, i1, frac)
    };
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..out_h {
                let sy = (oy as f64 + 0.5) * (h as f64 / out_h as f64) - 0.5;
                let (y0, y1, fy) = clamp(sy, h);
                for ox in 0..out_w {
                    let sx = (ox as f64 + 0.5) * (w as f64 / out_w as f64) - 0.5;
                    let (x0, x1, fx) = clamp(sx, w);
                    let v = (1.0 - fy) * (1.0 - fx) * input.at(bi, ci, y0, x0)
                        + (1.0 - fy) * fx * input.at(bi, ci, y0, x1)
                        + fy * (1.0 - fx) * input.at(bi, ci, y1, x0)
                        + fy * fx * input.at(bi, ci, y1, x1);
                    out.set(bi, ci, oy, ox, v);
                }
            }
        }
    }
    out
}

pub fn pool_oracle(input: &Tensor) -> Tensor {
    let [b, c, h, w] = input.shape();
    let mut out = Tensor::zeros([b, c, 1, 1]);
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += input.at(bi, ci, y, x);
                }
            }
            out.set(bi, ci, 0, 0, acc / (h * w) as f64);
        }
    }
    out
}

/// Full channel-attention oracle: explicit q/k/v transforms, dot-product
/// similarities, direct softmax with temperature, explicit aggregation.
pub fn ca_oracle(m: &Tensor, params: &AttentionParams, temperature: f64) -> Tensor {
    let q = conv_oracle(m, &params.query);
    let k = conv_oracle(m, &params.key);
    let v = conv_oracle(m, &params.value);
    attend_oracle(&q, &k, &v, temperature)
}

/// Attention core on already-transformed q/k/v.
pub fn attend_oracle(q: &Tensor, k: &Tensor, v: &Tensor, temperature: f64) -> Tensor {
    let b = q.batch();
    let sim = gram_oracle(q, k);
    let mut weights = Vec::with_capacity(b);
    for bi in 0..b {
        let rows: Vec<Vec<f64>> = sim[bi]
            .iter()
            .map(|row| row.iter().map(|v| v / temperature).collect())
            .collect();
        weights.push(softmax_oracle(&rows));
    }
    weighted_sum_oracle(&weights, v)
}

/// Per-head oracle: full-width q/k/v transforms, contiguous channel slices per
/// head, independent attention per slice, concatenation in head order.
pub fn multihead_oracle(m: &Tensor, params: &AttentionParams, heads: usize, temperature: f64) -> Tensor {
    let q = conv_oracle(m, &params.query);
    let k = conv_oracle(m, &params.key);
    let v = conv_oracle(m, &params.value);
    let c = m.channels();
    let per = c / heads;
    let [b, _, h, w] = m.shape();
    let mut out = Tensor::zeros([b, c, h, w]);
    for head in 0..heads {
        let lo = head * per;
        let hi = lo + per;
        let part = attend_oracle(
            &q.slice_channels(lo, hi).unwrap(),
            &k.slice_channels(lo, hi).unwrap(),
            &v.slice_channels(lo, hi).unwrap(),
            temperature,
        );
        out.add_into_channels(lo, &part).unwrap();
    }
    out
}

/// Interpolate-and-stack oracle composed from the conv and bilinear oracles.
pub fn intp_reduce_oracle(p: &FeaturePyramid, params: &MpOpParams) -> Tensor {
    let (s2_h, s2_w) = p.s2_dims();
    let b = p.batch();
    let mut out = Tensor::zeros([b, 5, s2_h, s2_w]);
    for i in 0..5 {
        let reduced = conv_oracle(p.level(i), &params.reduce[i]);
        let resized = if (reduced.height(), reduced.width()) == (s2_h, s2_w) {
            reduced
        } else {
            bilinear_oracle(&reduced, s2_h, s2_w)
        };
        out.add_into_channels(i, &resized).unwrap();
    }
    out
}

/// Cross-level block oracle: stack, attend across levels (single head), pool
/// per level, scale the original level, concatenate and restore.
pub fn mp_op_oracle(p: &FeaturePyramid, params: &MpOpParams) -> Vec<Tensor> {
    assert_eq!(params.cross_config.heads, 1, "oracle covers the single-head cross block");
    let stacked = intp_reduce_oracle(p, params);
    let adjusted = ca_oracle(&stacked, &params.cross, params.cross_config.temperature);
    let pooled = pool_oracle(&adjusted);
    let b = p.batch();
    let c = p.channels();
    let mut outs = Vec::with_capacity(5);
    for i in 0..5 {
        let level = p.level(i);
        let [_, _, h, w] = level.shape();
        let mut cat = Tensor::zeros([b, 2 * c, h, w]);
        for bi in 0..b {
            let weight = pooled.at(bi, i, 0, 0);
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        cat.set(bi, ci, y, x, weight * level.at(bi, ci, y, x));
                        cat.set(bi, c + ci, y, x, level.at(bi, ci, y, x));
                    }
                }
            }
        }
        outs.push(conv_oracle(&cat, &params.restore[i]));
    }
    outs
}

/// Full path oracle: per-level multihead attention plus fusion, then the
/// cross-level oracle.
pub fn opnet_oracle(
    p: &FeaturePyramid,
    base: &[opnet_core::pyramid::BaseLevelParams],
    mp: &MpOpParams,
    heads: usize,
    temperature: f64,
) -> Vec<Tensor> {
    let b = p.batch();
    let c = p.channels();
    let mut fused = Vec::with_capacity(5);
    for i in 0..5 {
        let level = p.level(i);
        let adjusted = multihead_oracle(level, &base[i].attention, heads, temperature);
        let [_, _, h, w] = level.shape();
        let mut cat = Tensor::zeros([b, 2 * c, h, w]);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        cat.set(bi, ci, y, x, level.at(bi, ci, y, x));
                        cat.set(bi, c + ci, y, x, adjusted.at(bi, ci, y, x));
                    }
                }
            }
        }
        fused.push(conv_oracle(&cat, &base[i].fuse));
    }
    let stage_a = FeaturePyramid::new(fused).expect("fused levels keep pyramid dims");
    mp_op_oracle(&stage_a, mp)
}

/// Jacobi eigenvalue sweep for small symmetric matrices (PSD oracle).
pub fn symmetric_eigenvalues(mat: &[Vec<f64>]) -> Vec<f64> {
    let n = mat.len();
    let mut a: Vec<Vec<f64>> = mat.to_vec();
    for _ in 0..100 {
        let mut off = 0.0;
        let (mut p, mut q) = (0, 1);
        for i in 0..n {
            for j in (i + 1)..n {
                if a[i][j].abs() > off {
                    off = a[i][j].abs();
                    (p, q) = (i, j);
                }
            }
        }
        if off < 1e-14 {
            break;
        }
        let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        for k in 0..n {
            let (akp, akq) = (a[k][p], a[k][q]);
            a[k][p] = c * akp - s * akq;
            a[k][q] = s * akp + c * akq;
        }
        for k in 0..n {
            let (apk, aqk) = (a[p][k], a[q][k]);
            a[p][k] = c * apk - s * aqk;
            a[q][k] = s * apk + c * aqk;
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}
