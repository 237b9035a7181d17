//! Plain-loop reference implementation of the ungated network.
//!
//! Deliberately shares no code with the crate's kernels: convolutions
//! are direct six-deep loops, pooling and normalization are written out
//! longhand. Slow, obvious, and independent, which is what makes it a
//! trustworthy oracle for the gate-open equivalence checks.
#![allow(dead_code)]

use dualskip_core::config::{MergeType, NetworkConfig};
use dualskip_core::net::{BnParams, BranchParams, NetworkParams};
use dualskip_core::tensor::Tensor;

/// Dense NCHW value grid.
#[derive(Clone)]
pub struct Grid {
    pub d: Vec<f64>,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Grid {
        Grid {
            d: vec![0.0; n * c * h * w],
            n,
            c,
            h,
            w,
        }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Grid {
        let s = t.shape();
        assert_eq!(s.len(), 4);
        Grid {
            d: t.data().to_vec(),
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
        }
    }

    #[inline]
    pub fn idx(&self, ni: usize, ci: usize, y: usize, x: usize) -> usize {
        ((ni * self.c + ci) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, ni: usize, ci: usize, y: usize, x: usize) -> f64 {
        self.d[self.idx(ni, ci, y, x)]
    }
}

pub fn ref_conv(x: &Grid, weight: &Tensor<f64>, bias: &Tensor<f64>, stride: usize, pad: usize) -> Grid {
    let ws = weight.shape();
    let (o, ci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(ci, x.c);
    let oh = (x.h + 2 * pad - kh) / stride + 1;
    let ow = (x.w + 2 * pad - kw) / stride + 1;
    let wd = weight.data();
    let bd = bias.data();
    let mut out = Grid::zeros(x.n, o, oh, ow);
    for ni in 0..x.n {
        for oi in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[oi];
                    for cc in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy as usize >= x.h || ix as usize >= x.w {
                                    continue;
                                }
                                let v = x.at(ni, cc, iy as usize, ix as usize);
                                acc += v * wd[((oi * ci + cc) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    let i = out.idx(ni, oi, oy, ox);
                    out.d[i] = acc;
                }
            }
        }
    }
    out
}

pub fn ref_bn(x: &Grid, bn: &mut BnParams<f64>, train: bool, momentum: f64, eps: f64) -> Grid {
    let mut out = x.clone();
    for ci in 0..x.c {
        let (mu, var) = if train {
            let m = (x.n * x.h * x.w) as f64;
            let mut s = 0.0;
            for ni in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        s += x.at(ni, ci, y, xx);
                    }
                }
            }
            let mu = s / m;
            let mut sq = 0.0;
            for ni in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let d = x.at(ni, ci, y, xx) - mu;
                        sq += d * d;
                    }
                }
            }
            let var = sq / m;
            bn.running_mean[ci] = momentum * bn.running_mean[ci] + (1.0 - momentum) * mu;
            bn.running_var[ci] = momentum * bn.running_var[ci] + (1.0 - momentum) * var;
            (mu, var)
        } else {
            (bn.running_mean[ci], bn.running_var[ci])
        };
        let inv = 1.0 / (var + eps).sqrt();
        let g = bn.gamma.data()[ci];
        let b = bn.beta.data()[ci];
        for ni in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let i = x.idx(ni, ci, y, xx);
                    out.d[i] = (x.d[i] - mu) * inv * g + b;
                }
            }
        }
    }
    out
}

pub fn ref_relu(x: &Grid) -> Grid {
    let mut out = x.clone();
    for v in &mut out.d {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn ref_avgpool(x: &Grid, k: usize, stride: usize) -> Grid {
    let oh = (x.h - k) / stride + 1;
    let ow = (x.w - k) / stride + 1;
    let mut out = Grid::zeros(x.n, x.c, oh, ow);
    for ni in 0..x.n {
        for ci in 0..x.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += x.at(ni, ci, oy * stride + ky, ox * stride + kx);
                        }
                    }
                    let i = out.idx(ni, ci, oy, ox);
                    out.d[i] = acc / (k * k) as f64;
                }
            }
        }
    }
    out
}

/// Mean over the spatial extent; rows of `n` by `c`.
pub fn ref_gap(x: &Grid) -> Vec<f64> {
    let mut out = vec![0.0; x.n * x.c];
    for ni in 0..x.n {
        for ci in 0..x.c {
            let mut acc = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    acc += x.at(ni, ci, y, xx);
                }
            }
            out[ni * x.c + ci] = acc / (x.h * x.w) as f64;
        }
    }
    out
}

/// `x` is `n` rows of `d` features; weight is `[d, k]`.
pub fn ref_linear(x: &[f64], n: usize, weight: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<f64> {
    let ws = weight.shape();
    let (d, k) = (ws[0], ws[1]);
    assert_eq!(x.len(), n * d);
    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![0.0; n * k];
    for ni in 0..n {
        for ki in 0..k {
            let mut acc = bd[ki];
            for di in 0..d {
                acc += x[ni * d + di] * wd[di * k + ki];
            }
            out[ni * k + ki] = acc;
        }
    }
    out
}

pub fn ref_concat(a: &Grid, b: &Grid) -> Grid {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
    let mut out = Grid::zeros(a.n, a.c + b.c, a.h, a.w);
    for ni in 0..a.n {
        for ci in 0..a.c {
            for y in 0..a.h {
                for x in 0..a.w {
                    let i = out.idx(ni, ci, y, x);
                    out.d[i] = a.at(ni, ci, y, x);
                }
            }
        }
        for ci in 0..b.c {
            for y in 0..a.h {
                for x in 0..a.w {
                    let i = out.idx(ni, a.c + ci, y, x);
                    out.d[i] = b.at(ni, ci, y, x);
                }
            }
        }
    }
    out
}

pub fn ref_add(a: &Grid, b: &Grid) -> Grid {
    assert_eq!((a.n, a.c, a.h, a.w), (b.n, b.c, b.h, b.w));
    let mut out = a.clone();
    for (o, v) in out.d.iter_mut().zip(&b.d) {
        *o += *v;
    }
    out
}

/// Half-pixel-center bilinear resize to `(oh, ow)`.
pub fn ref_upsample(x: &Grid, oh: usize, ow: usize) -> Grid {
    let taps = |out_i: usize, out_n: usize, in_n: usize| -> (usize, usize, f64, f64) {
        let scale = in_n as f64 / out_n as f64;
        let src = ((out_i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_n - 1);
        if i0 + 1 >= in_n {
            return (i0, i0, 1.0, 0.0);
        }
        let frac = src - i0 as f64;
        (i0, i0 + 1, 1.0 - frac, frac)
    };
    let mut out = Grid::zeros(x.n, x.c, oh, ow);
    for ni in 0..x.n {
        for ci in 0..x.c {
            for oy in 0..oh {
                let (y0, y1, wy0, wy1) = taps(oy, oh, x.h);
                for ox in 0..ow {
                    let (x0, x1, wx0, wx1) = taps(ox, ow, x.w);
                    let top = wx0 * x.at(ni, ci, y0, x0) + wx1 * x.at(ni, ci, y0, x1);
                    let bot = wx0 * x.at(ni, ci, y1, x0) + wx1 * x.at(ni, ci, y1, x1);
                    let i = out.idx(ni, ci, oy, ox);
                    out.d[i] = wy0 * top + wy1 * bot;
                }
            }
        }
    }
    out
}

const REF_BN_MOMENTUM: f64 = 0.9;
const REF_BN_EPS: f64 = 1e-5;

fn ref_branch(
    bp: &mut BranchParams<f64>,
    cfg: &NetworkConfig,
    stem_out: &Grid,
    guide_in: Option<&Grid>,
    train: bool,
) -> (Vec<f64>, Grid) {
    let mut x = stem_out.clone();
    for b in 0..cfg.num_blocks {
        for l in 0..cfg.layers_per_block {
            let layer = &mut bp.blocks[b].layers[l];
            let y = ref_bn(&x, &mut layer.dense.bn, train, REF_BN_MOMENTUM, REF_BN_EPS);
            let y = ref_relu(&y);
            let f = ref_conv(&y, &layer.dense.conv.weight, &layer.dense.conv.bias, 1, 1);
            x = match cfg.merge {
                MergeType::Concat => ref_concat(&x, &f),
                MergeType::Add => ref_add(&x, &f),
            };
        }
        if b + 1 < cfg.num_blocks {
            if b + 2 == cfg.num_blocks {
                if let Some(g) = guide_in {
                    x = ref_concat(&x, g);
                }
            }
            let t = &mut bp.transitions[b];
            let y = ref_bn(&x, &mut t.bn, train, REF_BN_MOMENTUM, REF_BN_EPS);
            let y = ref_relu(&y);
            let y = ref_conv(&y, &t.conv.weight, &t.conv.bias, 1, 0);
            x = ref_avgpool(&y, 2, 2);
        }
    }
    let pooled = ref_gap(&x);
    let logits = ref_linear(&pooled, x.n, &bp.head.weight, &bp.head.bias);
    (logits, x)
}

/// Forward pass of the plain (ungated) network; returns (local logits,
/// global logits), each `n * classes` row-major. Mutates running
/// statistics exactly when `train` is set.
pub fn reference_forward(
    params: &mut NetworkParams<f64>,
    cfg: &NetworkConfig,
    images: &Tensor<f64>,
    train: bool,
) -> (Vec<f64>, Vec<f64>) {
    let x = Grid::from_tensor(images);
    let stem = ref_conv(&x, &params.stem.weight, &params.stem.bias, 1, 1);
    let (global_logits, global_feat) = ref_branch(&mut params.global, cfg, &stem, None, train);
    let guide = if cfg.guide_enabled {
        let th = x.h >> (cfg.num_blocks - 2);
        let tw = x.w >> (cfg.num_blocks - 2);
        Some(ref_upsample(&global_feat, th, tw))
    } else {
        None
    };
    let (local_logits, _) = ref_branch(&mut params.local, cfg, &stem, guide.as_ref(), train);
    (local_logits, global_logits)
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
