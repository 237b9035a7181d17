//! Forward construction and reverse rules for every tape operation.
//!
//! Forward methods validate shapes, compute values eagerly, and append
//! one node; `backward_op` dispatches the matching reverse rule.
//! Reductions that feed statistics (batch moments, bias gradients,
//! per-sample gate sums) accumulate in `f64` in a fixed order, so
//! results are reproducible run to run at either float width.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{bilinear_taps, col2im_add, im2col, matmul_acc, out_extent, transpose};
use crate::scalar::Scalar;
use crate::tape::{BnMode, Node, Op, Tape, Var};
use crate::tensor::{dims2, dims4, numel};

/// Probabilities are clamped this far inside (0, 1) before the logs in
/// `binary_cross_entropy`; the gradient is taken at the clamped value,
/// so saturated inputs keep a finite, nonzero pull.
const BCE_CLAMP: f64 = 1e-7;

impl<F: Scalar> Tape<F> {
    /// 2-d cross-correlation of an NCHW input with OIHW kernels.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = dims4("conv2d", self.shape(x))?;
        let (o, wc, kh, kw) = dims4("conv2d", self.shape(w))?;
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {wc} input channels, input has {c}"),
            ));
        }
        if o == 0 || c == 0 || kh == 0 || kw == 0 {
            return Err(Error::arg("conv2d", "empty kernel"));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d", "stride must be at least 1"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} exceeds padded input {}x{}",
                    h + 2 * pad,
                    wd + 2 * pad
                ),
            ));
        }
        if let Some(bv) = b {
            if self.shape(bv) != &[o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{o}]", self.shape(bv)),
                ));
            }
        }
        let oh = out_extent(h, kh, stride, pad);
        let ow = out_extent(wd, kw, stride, pad);
        let (l, p) = (c * kh * kw, oh * ow);
        let mut out = vec![F::ZERO; n * o * p];
        {
            let xd = self.nodes[x.index()].value.as_slice();
            let wdat = self.nodes[w.index()].value.as_slice();
            let bd = b.map(|bv| self.nodes[bv.index()].value.as_slice());
            // A 1x1 stride-1 unpadded kernel reads the input as-is; the
            // unfold would be an identity copy.
            let direct = kh == 1 && kw == 1 && stride == 1 && pad == 0;
            out.par_chunks_mut(o * p).enumerate().for_each(|(ni, chunk)| {
                if let Some(bd) = bd {
                    for (oi, oc) in chunk.chunks_mut(p).enumerate() {
                        oc.fill(bd[oi]);
                    }
                }
                let xs = &xd[ni * c * h * wd..(ni + 1) * c * h * wd];
                if direct {
                    matmul_acc(wdat, xs, chunk, o, l, p);
                } else {
                    let mut col = vec![F::ZERO; l * p];
                    im2col(xs, c, h, wd, kh, kw, stride, pad, &mut col);
                    matmul_acc(wdat, &col, chunk, o, l, p);
                }
            });
        }
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            vec![n, o, oh, ow],
            out,
            false,
        ))
    }

    /// Per-channel batch normalization over an NCHW tensor.
    ///
    /// The running buffers live outside the tape; train mode folds the
    /// fresh batch statistics into them in place with `running =
    /// momentum * running + (1 - momentum) * batch`. The batch variance
    /// is the biased (divide by count) estimate, in the normalizer and
    /// in the running buffer alike.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [F],
        running_var: &mut [F],
        mode: BnMode,
        momentum: F,
        eps: F,
    ) -> Result<Var> {
        let (n, c, h, w) = dims4("batchnorm2d", self.shape(x))?;
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != &[c] {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("{what} shape {:?}, expected [{c}]", self.shape(v)),
                ));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batchnorm2d",
                format!(
                    "running buffers hold {}/{} channels, expected {c}",
                    running_mean.len(),
                    running_var.len()
                ),
            ));
        }
        if !(0.0..=1.0).contains(&momentum.to_f64()) {
            return Err(Error::arg("batchnorm2d", "momentum must lie in [0, 1]"));
        }
        if eps.to_f64() < 0.0 {
            return Err(Error::arg("batchnorm2d", "eps must be nonnegative"));
        }
        let hw = h * w;
        let m = n * hw;
        if mode == BnMode::Train && m < 2 {
            return Err(Error::arg(
                "batchnorm2d",
                "train mode needs at least two values per channel",
            ));
        }
        let mut mean = vec![F::ZERO; c];
        let mut invstd = vec![F::ZERO; c];
        {
            let xd = self.nodes[x.index()].value.as_slice();
            match mode {
                BnMode::Train => {
                    for ci in 0..c {
                        let mut s = 0.0f64;
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for v in &xd[base..base + hw] {
                                s += v.to_f64();
                            }
                        }
                        let mu = s / m as f64;
                        let mut sq = 0.0f64;
                        for ni in 0..n {
                            let base = (ni * c + ci) * hw;
                            for v in &xd[base..base + hw] {
                                let d = v.to_f64() - mu;
                                sq += d * d;
                            }
                        }
                        let var = sq / m as f64;
                        mean[ci] = F::from_f64(mu);
                        invstd[ci] = F::from_f64(1.0 / (var + eps.to_f64()).sqrt());
                        let keep = momentum;
                        let blend = F::ONE - momentum;
                        running_mean[ci] = keep * running_mean[ci] + blend * F::from_f64(mu);
                        running_var[ci] = keep * running_var[ci] + blend * F::from_f64(var);
                    }
                }
                BnMode::Eval => {
                    for ci in 0..c {
                        mean[ci] = running_mean[ci];
                        invstd[ci] =
                            F::from_f64(1.0 / (running_var[ci].to_f64() + eps.to_f64()).sqrt());
                    }
                }
            }
        }
        let mut out = vec![F::ZERO; n * c * hw];
        {
            let xd = self.nodes[x.index()].value.as_slice();
            let gd = self.nodes[gamma.index()].value.as_slice();
            let bd = self.nodes[beta.index()].value.as_slice();
            for ni in 0..n {
                for ci in 0..c {
                    let (mu, is, g, bt) = (mean[ci], invstd[ci], gd[ci], bd[ci]);
                    let base = (ni * c + ci) * hw;
                    for j in base..base + hw {
                        let xh = (xd[j] - mu) * is;
                        out[j] = xh * g + bt;
                    }
                }
            }
        }
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                train: mode == BnMode::Train,
            },
            vec![n, c, h, w],
            out,
            false,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value: Vec<F> = self.nodes[x.index()]
            .value
            .iter()
            .map(|v| v.maxs(F::ZERO))
            .collect();
        let shape = self.nodes[x.index()].shape.clone();
        self.push(Op::Relu { x }, shape, value, false)
    }

    /// Unpadded average pooling with a square window.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("avg_pool2d", self.shape(x))?;
        if k == 0 || stride == 0 {
            return Err(Error::arg(
                "avg_pool2d",
                "window and stride must be at least 1",
            ));
        }
        if k > h || k > w {
            return Err(Error::shape(
                "avg_pool2d",
                format!("window {k} exceeds input {h}x{w}"),
            ));
        }
        let oh = out_extent(h, k, stride, 0);
        let ow = out_extent(w, k, stride, 0);
        let inv = F::from_f64(1.0 / (k * k) as f64);
        let xd = self.nodes[x.index()].value.as_slice();
        let mut out = vec![F::ZERO; n * c * oh * ow];
        let mut idx = 0;
        for plane_i in 0..n * c {
            let plane = &xd[plane_i * h * w..(plane_i + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = F::ZERO;
                    for ky in 0..k {
                        let row = (oy * stride + ky) * w + ox * stride;
                        for v in &plane[row..row + k] {
                            s += *v;
                        }
                    }
                    out[idx] = s * inv;
                    idx += 1;
                }
            }
        }
        Ok(self.push(
            Op::AvgPool { x, k, stride },
            vec![n, c, oh, ow],
            out,
            false,
        ))
    }

    /// Collapses each channel plane to its mean: NCHW to (N, C).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("global_avg_pool", self.shape(x))?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::arg("global_avg_pool", "empty spatial extent"));
        }
        let xd = self.nodes[x.index()].value.as_slice();
        let mut out = vec![F::ZERO; n * c];
        for (row, slot) in out.iter_mut().enumerate() {
            let mut s = 0.0f64;
            for v in &xd[row * hw..(row + 1) * hw] {
                s += v.to_f64();
            }
            *slot = F::from_f64(s / hw as f64);
        }
        Ok(self.push(Op::GlobalAvgPool { x }, vec![n, c], out, false))
    }

    /// Row-major affine map: `(N, D) x (D, M) + (M,)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d) = dims2("linear", self.shape(x))?;
        let (wd, m) = dims2("linear", self.shape(w))?;
        if wd != d {
            return Err(Error::shape(
                "linear",
                format!("input has {d} features, weight expects {wd}"),
            ));
        }
        if let Some(bv) = b {
            if self.shape(bv) != &[m] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?}, expected [{m}]", self.shape(bv)),
                ));
            }
        }
        let mut out = vec![F::ZERO; n * m];
        {
            if let Some(bv) = b {
                let bd = self.nodes[bv.index()].value.as_slice();
                for row in out.chunks_mut(m) {
                    row.copy_from_slice(bd);
                }
            }
            let xd = self.nodes[x.index()].value.as_slice();
            let wdat = self.nodes[w.index()].value.as_slice();
            matmul_acc(xd, wdat, &mut out, n, d, m);
        }
        Ok(self.push(Op::Linear { x, w, b }, vec![n, m], out, false))
    }

    /// Stacks two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = dims4("concat_channels", self.shape(a))?;
        let (nb, cb, hb, wb) = dims4("concat_channels", self.shape(b))?;
        if na != nb || ha != hb || wa != wb {
            return Err(Error::shape(
                "concat_channels",
                format!(
                    "incompatible shapes {:?} and {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        let hw = ha * wa;
        let mut out = vec![F::ZERO; na * (ca + cb) * hw];
        {
            let ad = self.nodes[a.index()].value.as_slice();
            let bd = self.nodes[b.index()].value.as_slice();
            for ni in 0..na {
                let dst = &mut out[ni * (ca + cb) * hw..(ni + 1) * (ca + cb) * hw];
                dst[..ca * hw].copy_from_slice(&ad[ni * ca * hw..(ni + 1) * ca * hw]);
                dst[ca * hw..].copy_from_slice(&bd[ni * cb * hw..(ni + 1) * cb * hw]);
            }
        }
        Ok(self.push(
            Op::ConcatChannels { a, b },
            vec![na, ca + cb, ha, wa],
            out,
            false,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_elementwise(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                opname,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value: Vec<F> = self.nodes[a.index()]
            .value
            .iter()
            .zip(&self.nodes[b.index()].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(op, shape, value, false))
    }

    /// Half-pixel-aligned bilinear interpolation to a larger extent.
    pub fn bilinear_upsample(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("bilinear_upsample", self.shape(x))?;
        if h == 0 || w == 0 {
            return Err(Error::arg("bilinear_upsample", "empty input"));
        }
        if oh < h || ow < w {
            return Err(Error::arg(
                "bilinear_upsample",
                format!("target {oh}x{ow} is smaller than input {h}x{w}"),
            ));
        }
        let ty = cast_taps::<F>(h, oh);
        let tx = cast_taps::<F>(w, ow);
        let xd = self.nodes[x.index()].value.as_slice();
        let mut out = vec![F::ZERO; n * c * oh * ow];
        let mut idx = 0;
        for plane_i in 0..n * c {
            let plane = &xd[plane_i * h * w..(plane_i + 1) * h * w];
            for &(y0, y1, wy0, wy1) in &ty {
                for &(x0, x1, wx0, wx1) in &tx {
                    let top = wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1];
                    let bot = wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1];
                    out[idx] = wy0 * top + wy1 * bot;
                    idx += 1;
                }
            }
        }
        Ok(self.push(Op::BilinearUp { x }, vec![n, c, oh, ow], out, false))
    }

    /// Piecewise-linear sigmoid `max(0, min(k x + 1/2, 1))` whose
    /// backward is the straight-through estimator: the upstream
    /// gradient passes to `x` unchanged, ignoring both the slope and
    /// the saturation.
    pub fn hard_sigm_ste(&mut self, x: Var, k: F) -> Result<Var> {
        if !(k.to_f64() > 0.0) {
            return Err(Error::arg("hard_sigm_ste", "slope must be positive"));
        }
        let half = F::from_f64(0.5);
        let value: Vec<F> = self.nodes[x.index()]
            .value
            .iter()
            .map(|v| (k * *v + half).clamp01())
            .collect();
        let shape = self.nodes[x.index()].shape.clone();
        Ok(self.push(Op::HardSigmSte { x }, shape, value, false))
    }

    /// Steps to exactly one where `x >= threshold`, else exactly zero;
    /// straight-through backward like [`Tape::hard_sigm_ste`].
    pub fn binarize_ste(&mut self, x: Var, threshold: F) -> Result<Var> {
        if !threshold.is_finite() {
            return Err(Error::arg("binarize_ste", "threshold must be finite"));
        }
        let value: Vec<F> = self.nodes[x.index()]
            .value
            .iter()
            .map(|v| if *v >= threshold { F::ONE } else { F::ZERO })
            .collect();
        let shape = self.nodes[x.index()].shape.clone();
        Ok(self.push(Op::BinarizeSte { x }, shape, value, false))
    }

    /// Multiplies each sample of `x` by its entry of the length-N gate
    /// vector `g`. A gate of exactly one reproduces the input bits; a
    /// gate of exactly zero blanks the sample.
    pub fn scale_by_gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let xs = self.shape(x);
        let Some(&n) = xs.first() else {
            return Err(Error::shape(
                "scale_by_gate",
                "input needs a leading batch dim",
            ));
        };
        if self.shape(g) != &[n] {
            return Err(Error::shape(
                "scale_by_gate",
                format!("gate shape {:?}, expected [{n}]", self.shape(g)),
            ));
        }
        let total = self.nodes[x.index()].value.len();
        let per = if n == 0 { 0 } else { total / n };
        let xd = self.nodes[x.index()].value.as_slice();
        let gd = self.nodes[g.index()].value.as_slice();
        let mut out = vec![F::ZERO; total];
        for ni in 0..n {
            let gv = gd[ni];
            for (slot, v) in out[ni * per..(ni + 1) * per]
                .iter_mut()
                .zip(&xd[ni * per..(ni + 1) * per])
            {
                *slot = gv * *v;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::ScaleByGate { x, g }, shape, out, false))
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = dims2("softmax_cross_entropy", self.shape(logits))?;
        if n == 0 || k == 0 {
            return Err(Error::arg("softmax_cross_entropy", "empty logits"));
        }
        if labels.len() != n {
            return Err(Error::arg(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= k) {
            return Err(Error::arg(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let xd = self.nodes[logits.index()].value.as_slice();
        let mut probs = vec![F::ZERO; n * k];
        let mut zs = vec![0.0f64; k];
        let mut total = 0.0f64;
        for (ni, &label) in labels.iter().enumerate() {
            let row = &xd[ni * k..(ni + 1) * k];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
            let mut s = 0.0f64;
            for (z, v) in zs.iter_mut().zip(row) {
                *z = v.to_f64() - mx;
                s += z.exp();
            }
            let ln_s = s.ln();
            for (slot, z) in probs[ni * k..(ni + 1) * k].iter_mut().zip(&zs) {
                *slot = F::from_f64((z - ln_s).exp());
            }
            total += ln_s - zs[label];
        }
        let loss = F::from_f64(total / n as f64);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            false,
        ))
    }

    /// Mean binary cross-entropy of probabilities against one shared
    /// target value.
    pub fn binary_cross_entropy(&mut self, p: Var, target: F) -> Result<Var> {
        let t = target.to_f64();
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::arg(
                "binary_cross_entropy",
                "target must lie in [0, 1]",
            ));
        }
        let xd = self.nodes[p.index()].value.as_slice();
        if xd.is_empty() {
            return Err(Error::arg("binary_cross_entropy", "empty input"));
        }
        let mut total = 0.0f64;
        for v in xd {
            let vf = v.to_f64();
            let pc = vf.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let qc = (1.0 - vf).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= t * pc.ln() + (1.0 - t) * qc.ln();
        }
        let loss = F::from_f64(total / xd.len() as f64);
        Ok(self.push(Op::Bce { p, target }, vec![1], vec![loss], false))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let value: Vec<F> = self.nodes[x.index()]
            .value
            .iter()
            .map(|v| c * *v)
            .collect();
        let shape = self.nodes[x.index()].shape.clone();
        self.push(Op::Scale { x, c }, shape, value, false)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[x.index()].value.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(x), shape),
            ));
        }
        let value = self.nodes[x.index()].value.clone();
        Ok(self.push(Op::Reshape { x }, shape.to_vec(), value, false))
    }

    /// Reduces everything to one scalar by summation.
    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = F::ZERO;
        for v in &self.nodes[x.index()].value {
            s += *v;
        }
        self.push(Op::Sum { x }, vec![1], vec![s], false)
    }
}

/// Bilinear source taps with weights cast once to the tape scalar.
fn cast_taps<F: Scalar>(in_len: usize, out_len: usize) -> Vec<(usize, usize, F, F)> {
    bilinear_taps(in_len, out_len)
        .into_iter()
        .map(|(i0, i1, w1)| (i0, i1, F::from_f64(1.0 - w1), F::from_f64(w1)))
        .collect()
}

fn val<F: Scalar>(nodes: &[Node<F>], v: Var) -> &[F] {
    &nodes[v.index()].value
}

/// The adjoint buffer for `v`, created zeroed on first touch.
fn grad_buf<'a, F: Scalar>(grads: &'a mut [Option<Vec<F>>], v: Var, n: usize) -> &'a mut [F] {
    let slot = &mut grads[v.index()];
    if slot.is_none() {
        *slot = Some(vec![F::ZERO; n]);
    }
    slot.as_mut().unwrap()
}

fn sh4<F: Scalar>(nodes: &[Node<F>], v: Var) -> (usize, usize, usize, usize) {
    match nodes[v.index()].shape.as_slice() {
        [n, c, h, w] => (*n, *c, *h, *w),
        other => unreachable!("shape validated at construction: {other:?}"),
    }
}

/// Propagates the adjoint of node `id` into its inputs. Every rule
/// accumulates (`+=`) so diamond-shaped graphs sum path contributions.
pub(crate) fn backward_op<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    id: usize,
    gout: &[F],
) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            pad,
        } => conv2d_backward(nodes, grads, *x, *w, *b, *stride, *pad, gout),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            mean,
            invstd,
            train,
        } => batchnorm_backward(nodes, grads, *x, *gamma, *beta, mean, invstd, *train, gout),
        Op::Relu { x } => {
            let xd = val(nodes, *x);
            let dx = grad_buf(grads, *x, xd.len());
            for (i, v) in xd.iter().enumerate() {
                if *v > F::ZERO {
                    dx[i] += gout[i];
                }
            }
        }
        Op::AvgPool { x, k, stride } => {
            let (n, c, h, w) = sh4(nodes, *x);
            let (k, stride) = (*k, *stride);
            let oh = out_extent(h, k, stride, 0);
            let ow = out_extent(w, k, stride, 0);
            let inv = F::from_f64(1.0 / (k * k) as f64);
            let dx = grad_buf(grads, *x, n * c * h * w);
            let mut idx = 0;
            for plane_i in 0..n * c {
                let plane = &mut dx[plane_i * h * w..(plane_i + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gout[idx] * inv;
                        idx += 1;
                        for ky in 0..k {
                            let row = (oy * stride + ky) * w + ox * stride;
                            for slot in &mut plane[row..row + k] {
                                *slot += g;
                            }
                        }
                    }
                }
            }
        }
        Op::GlobalAvgPool { x } => {
            let (n, c, h, w) = sh4(nodes, *x);
            let hw = h * w;
            let inv = F::from_f64(1.0 / hw as f64);
            let dx = grad_buf(grads, *x, n * c * hw);
            for (row, g) in gout.iter().enumerate() {
                let gv = *g * inv;
                for slot in &mut dx[row * hw..(row + 1) * hw] {
                    *slot += gv;
                }
            }
        }
        Op::Linear { x, w, b } => {
            let (n, d) = match nodes[x.index()].shape.as_slice() {
                [n, d] => (*n, *d),
                _ => unreachable!(),
            };
            let m = nodes[w.index()].shape[1];
            let xd = val(nodes, *x);
            let wdat = val(nodes, *w);
            {
                let mut wt = vec![F::ZERO; d * m];
                transpose(wdat, &mut wt, d, m);
                let dx = grad_buf(grads, *x, n * d);
                matmul_acc(gout, &wt, dx, n, m, d);
            }
            {
                let mut xt = vec![F::ZERO; n * d];
                transpose(xd, &mut xt, n, d);
                let dw = grad_buf(grads, *w, d * m);
                matmul_acc(&xt, gout, dw, d, n, m);
            }
            if let Some(bv) = b {
                let mut acc = vec![0.0f64; m];
                for row in gout.chunks(m) {
                    for (a, g) in acc.iter_mut().zip(row) {
                        *a += g.to_f64();
                    }
                }
                let db = grad_buf(grads, *bv, m);
                for (slot, a) in db.iter_mut().zip(&acc) {
                    *slot += F::from_f64(*a);
                }
            }
        }
        Op::ConcatChannels { a, b } => {
            let (n, ca, h, w) = sh4(nodes, *a);
            let cb = nodes[b.index()].shape[1];
            let hw = h * w;
            {
                let da = grad_buf(grads, *a, n * ca * hw);
                for ni in 0..n {
                    let src = &gout[ni * (ca + cb) * hw..];
                    for (slot, g) in da[ni * ca * hw..(ni + 1) * ca * hw]
                        .iter_mut()
                        .zip(&src[..ca * hw])
                    {
                        *slot += *g;
                    }
                }
            }
            {
                let db = grad_buf(grads, *b, n * cb * hw);
                for ni in 0..n {
                    let src = &gout[ni * (ca + cb) * hw + ca * hw..];
                    for (slot, g) in db[ni * cb * hw..(ni + 1) * cb * hw]
                        .iter_mut()
                        .zip(&src[..cb * hw])
                    {
                        *slot += *g;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            {
                let da = grad_buf(grads, *a, gout.len());
                for (slot, g) in da.iter_mut().zip(gout) {
                    *slot += *g;
                }
            }
            let db = grad_buf(grads, *b, gout.len());
            for (slot, g) in db.iter_mut().zip(gout) {
                *slot += *g;
            }
        }
        Op::Mul { a, b } => {
            {
                let bd = val(nodes, *b);
                let da = grad_buf(grads, *a, gout.len());
                for i in 0..gout.len() {
                    da[i] += gout[i] * bd[i];
                }
            }
            let ad = val(nodes, *a);
            let db = grad_buf(grads, *b, gout.len());
            for i in 0..gout.len() {
                db[i] += gout[i] * ad[i];
            }
        }
        Op::BilinearUp { x } => {
            let (n, c, h, w) = sh4(nodes, *x);
            let (oh, ow) = (nodes[id].shape[2], nodes[id].shape[3]);
            let ty = cast_taps::<F>(h, oh);
            let tx = cast_taps::<F>(w, ow);
            let dx = grad_buf(grads, *x, n * c * h * w);
            let mut idx = 0;
            for plane_i in 0..n * c {
                let plane = &mut dx[plane_i * h * w..(plane_i + 1) * h * w];
                for &(y0, y1, wy0, wy1) in &ty {
                    for &(x0, x1, wx0, wx1) in &tx {
                        let g = gout[idx];
                        idx += 1;
                        plane[y0 * w + x0] += (wy0 * wx0) * g;
                        plane[y0 * w + x1] += (wy0 * wx1) * g;
                        plane[y1 * w + x0] += (wy1 * wx0) * g;
                        plane[y1 * w + x1] += (wy1 * wx1) * g;
                    }
                }
            }
        }
        // Straight-through: the estimator ignores the nonlinearity.
        Op::HardSigmSte { x } | Op::BinarizeSte { x } | Op::Reshape { x } => {
            let dx = grad_buf(grads, *x, gout.len());
            for (slot, g) in dx.iter_mut().zip(gout) {
                *slot += *g;
            }
        }
        Op::ScaleByGate { x, g } => {
            let n = nodes[g.index()].value.len();
            let per = if n == 0 { 0 } else { gout.len() / n };
            let xd = val(nodes, *x);
            let gd = val(nodes, *g);
            {
                let dx = grad_buf(grads, *x, gout.len());
                for ni in 0..n {
                    let gv = gd[ni];
                    for i in ni * per..(ni + 1) * per {
                        dx[i] += gv * gout[i];
                    }
                }
            }
            let dg = grad_buf(grads, *g, n);
            for ni in 0..n {
                let mut s = 0.0f64;
                for i in ni * per..(ni + 1) * per {
                    s += gout[i].to_f64() * xd[i].to_f64();
                }
                dg[ni] += F::from_f64(s);
            }
        }
        Op::SoftmaxCe {
            logits,
            labels,
            probs,
        } => {
            let k = nodes[logits.index()].shape[1];
            let n = labels.len();
            let g0 = gout[0];
            let invn = F::from_f64(1.0 / n as f64);
            let dl = grad_buf(grads, *logits, n * k);
            for (ni, &label) in labels.iter().enumerate() {
                for j in 0..k {
                    let idx = ni * k + j;
                    let onehot = if j == label { F::ONE } else { F::ZERO };
                    dl[idx] += g0 * (probs[idx] - onehot) * invn;
                }
            }
        }
        Op::Bce { p, target } => {
            let xd = val(nodes, *p);
            let t = target.to_f64();
            let inv = 1.0 / xd.len() as f64;
            let g0 = gout[0].to_f64();
            let dp = grad_buf(grads, *p, xd.len());
            for (slot, v) in dp.iter_mut().zip(xd) {
                let vf = v.to_f64();
                let pc = vf.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                let qc = (1.0 - vf).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                *slot += F::from_f64(g0 * inv * ((1.0 - t) / qc - t / pc));
            }
        }
        Op::Scale { x, c } => {
            let c = *c;
            let dx = grad_buf(grads, *x, gout.len());
            for (slot, g) in dx.iter_mut().zip(gout) {
                *slot += c * *g;
            }
        }
        Op::Sum { x } => {
            let xn = nodes[x.index()].value.len();
            let g0 = gout[0];
            let dx = grad_buf(grads, *x, xn);
            for slot in dx.iter_mut() {
                *slot += g0;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    gout: &[F],
) {
    let (n, c, h, wd) = sh4(nodes, x);
    let (o, _, kh, kw) = sh4(nodes, w);
    let oh = out_extent(h, kh, stride, pad);
    let ow = out_extent(wd, kw, stride, pad);
    let (l, p) = (c * kh * kw, oh * ow);
    let direct = kh == 1 && kw == 1 && stride == 1 && pad == 0;
    let xd = val(nodes, x);
    let wdat = val(nodes, w);

    // dx: fold w^T * gout back through the unfolding.
    {
        let mut wt = vec![F::ZERO; o * l];
        transpose(wdat, &mut wt, o, l);
        let dx = grad_buf(grads, x, n * c * h * wd);
        dx.par_chunks_mut(c * h * wd)
            .enumerate()
            .for_each(|(ni, dxs)| {
                let gslice = &gout[ni * o * p..(ni + 1) * o * p];
                if direct {
                    matmul_acc(&wt, gslice, dxs, l, o, p);
                } else {
                    let mut dcol = vec![F::ZERO; l * p];
                    matmul_acc(&wt, gslice, &mut dcol, l, o, p);
                    col2im_add(&dcol, c, h, wd, kh, kw, stride, pad, dxs);
                }
            });
    }

    // dw: per-sample partials in transposed [l, o] layout (so the
    // matmul streams the unfolded input rows), reduced in fixed sample
    // order, transposed once.
    let partials: Vec<Vec<F>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let gslice = &gout[ni * o * p..(ni + 1) * o * p];
            let mut gt = vec![F::ZERO; o * p];
            transpose(gslice, &mut gt, o, p);
            let mut dwt = vec![F::ZERO; l * o];
            let xs = &xd[ni * c * h * wd..(ni + 1) * c * h * wd];
            if direct {
                matmul_acc(xs, &gt, &mut dwt, l, p, o);
            } else {
                let mut col = vec![F::ZERO; l * p];
                im2col(xs, c, h, wd, kh, kw, stride, pad, &mut col);
                matmul_acc(&col, &gt, &mut dwt, l, p, o);
            }
            dwt
        })
        .collect();
    let mut dwt_total = vec![F::ZERO; l * o];
    for part in &partials {
        for (slot, v) in dwt_total.iter_mut().zip(part) {
            *slot += *v;
        }
    }
    let mut dw_add = vec![F::ZERO; o * l];
    transpose(&dwt_total, &mut dw_add, l, o);
    let dw = grad_buf(grads, w, o * l);
    for (slot, v) in dw.iter_mut().zip(&dw_add) {
        *slot += *v;
    }

    if let Some(bv) = b {
        let mut acc = vec![0.0f64; o];
        for ni in 0..n {
            for (oi, a) in acc.iter_mut().enumerate() {
                let mut t = 0.0f64;
                for g in &gout[(ni * o + oi) * p..(ni * o + oi + 1) * p] {
                    t += g.to_f64();
                }
                *a += t;
            }
        }
        let db = grad_buf(grads, bv, o);
        for (slot, a) in db.iter_mut().zip(&acc) {
            *slot += F::from_f64(*a);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_backward<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[F],
    invstd: &[F],
    train: bool,
    gout: &[F],
) {
    let (n, c, h, w) = sh4(nodes, x);
    let hw = h * w;
    let m = (n * hw) as f64;
    let xd = val(nodes, x);
    let gd = val(nodes, gamma);

    // Channel reductions first (f64, fixed order), element pass after.
    let mut s_dy = vec![0.0f64; c];
    let mut s_dy_xhat = vec![0.0f64; c];
    for ni in 0..n {
        for ci in 0..c {
            let mu = mean[ci].to_f64();
            let is = invstd[ci].to_f64();
            let base = (ni * c + ci) * hw;
            let (mut a, mut bsum) = (0.0f64, 0.0f64);
            for j in base..base + hw {
                let dy = gout[j].to_f64();
                a += dy;
                bsum += dy * (xd[j].to_f64() - mu) * is;
            }
            s_dy[ci] += a;
            s_dy_xhat[ci] += bsum;
        }
    }
    {
        let dgamma = grad_buf(grads, gamma, c);
        for (slot, s) in dgamma.iter_mut().zip(&s_dy_xhat) {
            *slot += F::from_f64(*s);
        }
    }
    {
        let dbeta = grad_buf(grads, beta, c);
        for (slot, s) in dbeta.iter_mut().zip(&s_dy) {
            *slot += F::from_f64(*s);
        }
    }
    let dx = grad_buf(grads, x, n * c * hw);
    if train {
        // dx = invstd * (dy*g - mean(dy*g) - xhat * mean(dy*g*xhat)),
        // the two means taken over the batch extent per channel.
        let coeff: Vec<(F, F)> = (0..c)
            .map(|ci| {
                let gg = gd[ci].to_f64();
                (
                    F::from_f64(s_dy[ci] * gg / m),
                    F::from_f64(s_dy_xhat[ci] * gg / m),
                )
            })
            .collect();
        for ni in 0..n {
            for ci in 0..c {
                let (mu, is, g) = (mean[ci], invstd[ci], gd[ci]);
                let (mean_dxh, mean_dxh_xh) = coeff[ci];
                let base = (ni * c + ci) * hw;
                for j in base..base + hw {
                    let xh = (xd[j] - mu) * is;
                    let dxh = gout[j] * g;
                    dx[j] += is * (dxh - mean_dxh - xh * mean_dxh_xh);
                }
            }
        }
    } else {
        // Running statistics are constants: a per-channel affine map.
        for ni in 0..n {
            for ci in 0..c {
                let scale = gd[ci] * invstd[ci];
                let base = (ni * c + ci) * hw;
                for j in base..base + hw {
                    dx[j] += gout[j] * scale;
                }
            }
        }
    }
}
