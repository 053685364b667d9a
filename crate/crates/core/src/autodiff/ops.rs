use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernels::{gemm, gemm_at, gemm_bt, ConvGeom};
use super::tape::{accumulate, Node, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;
pub const NORM_FLOOR: f64 = 1e-12;
pub const ARC_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Relu,
    Tanh,
    Add,
    Mul,
    Scale(f64),
}

/// Running mean/variance carried by a batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(dim: usize) -> Self {
        BatchNormStats {
            mean: vec![T::zero(); dim],
            var: vec![T::one(); dim],
        }
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Matmul { a: Var, b: Var },
    MatmulT { a: Var, b: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    Pad2d { x: Var, pad: usize },
    ChannelBias { x: Var, b: Var },
    Relu(Var),
    Tanh(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormInfer { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T>, floored: Vec<bool> },
    Concat { xs: Vec<Var>, widths: Vec<usize> },
    Reshape(Var),
    ConvToSeq { x: Var, dims: [usize; 4] },
    SegmentMean { x: Var, lengths: Vec<usize> },
    SegmentSoftmax { x: Var, lengths: Vec<usize> },
    SegmentWeightedSum { h: Var, w: Var, lengths: Vec<usize> },
    ArcMargin { cos: Var, labels: Vec<usize>, target_slope: Vec<T>, scale: T },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(dim_err(op, shape, &[])),
    }
}

fn check_lengths(op: &'static str, lengths: &[usize], rows: usize) -> Result<()> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::EmptySequence(op));
    }
    let total: usize = lengths.iter().sum();
    if total != rows {
        return Err(dim_err(op, &[rows], &[total]));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// `x[N×D_in] · w[D_in×D_out] + b[D_out]`
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (n, d_in) = matrix_dims("linear", &xs)?;
        let (w_in, d_out) = matrix_dims("linear", &ws)?;
        if d_in != w_in {
            return Err(dim_err("linear", &xs, &ws));
        }
        if bs != [d_out] {
            return Err(dim_err("linear", &ws, &bs));
        }
        let mut out = vec![T::zero(); n * d_out];
        {
            let (xv, wv, bv) = (self.node(x), self.node(w), self.node(b));
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(&bv.value);
            }
            gemm(n, d_in, d_out, &xv.value, &wv.value, &mut out);
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(vec![n, d_out], out, Op::Linear { x, w, b }, needs))
    }

    /// `a[M×K] · b[K×N]`
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        let (m, k) = matrix_dims("matmul", &as_)?;
        let (k2, n) = matrix_dims("matmul", &bs)?;
        if k != k2 {
            return Err(dim_err("matmul", &as_, &bs));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, &self.node(a).value, &self.node(b).value, &mut out);
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b }, needs))
    }

    /// `a[M×K] · b[N×K]ᵀ`
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        let (m, k) = matrix_dims("matmul_t", &as_)?;
        let (n, k2) = matrix_dims("matmul_t", &bs)?;
        if k != k2 {
            return Err(dim_err("matmul_t", &as_, &bs));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_bt(m, k, n, &self.node(a).value, &self.node(b).value, &mut out);
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatmulT { a, b }, needs))
    }

    /// Valid (unpadded) strided cross-correlation of `x[N×C×H×W]` with `k[C'×C×kh×kw]`.
    pub fn conv2d(&self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        let ([n, c, h, w], [c_out, c_in, kh, kw]) = (xs.as_slice(), ks.as_slice()) else {
            return Err(dim_err("conv2d", &xs, &ks));
        };
        let (n, c, h, w, c_out, c_in, kh, kw) = (*n, *c, *h, *w, *c_out, *c_in, *kh, *kw);
        if c != c_in || kh > h || kw > w {
            return Err(dim_err("conv2d", &xs, &ks));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            out_h: 1 + (h - kh) / stride,
            out_w: 1 + (w - kw) / stride,
        };
        let plane = geom.col_cols();
        let mut out = vec![T::zero(); n * c_out * plane];
        {
            let (xv, kv) = (self.node(x), self.node(k));
            let (xvals, kvals): (&[T], &[T]) = (&xv.value, &kv.value);
            let image = c * h * w;
            out.par_chunks_mut(c_out * plane)
                .zip(xvals.par_chunks(image))
                .for_each(|(dst, src)| {
                    let mut col = vec![T::zero(); geom.col_rows() * plane];
                    geom.im2col(src, &mut col);
                    gemm(c_out, geom.col_rows(), plane, kvals, &col, dst);
                });
        }
        let needs = self.needs(&[x, k]);
        Ok(self.push(
            vec![n, c_out, geom.out_h, geom.out_w],
            out,
            Op::Conv2d { x, k, geom },
            needs,
        ))
    }

    /// Zero-pads the two trailing axes of `x[N×C×H×W]` by `pad` on each side.
    pub fn pad2d(&self, x: Var, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let [n, c, h, w] = xs[..] else {
            return Err(dim_err("pad2d", &xs, &[]));
        };
        if pad == 0 {
            return Ok(x);
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![T::zero(); n * c * ph * pw];
        {
            let xv = self.node(x);
            for plane in 0..n * c {
                for r in 0..h {
                    let src = &xv.value[(plane * h + r) * w..(plane * h + r + 1) * w];
                    let start = (plane * ph + r + pad) * pw + pad;
                    out[start..start + w].copy_from_slice(src);
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(vec![n, c, ph, pw], out, Op::Pad2d { x, pad }, needs))
    }

    /// Adds a per-channel bias `b[C]` to `x[N×C×H×W]`.
    pub fn channel_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if xs.len() != 4 || bs != [xs[1]] {
            return Err(dim_err("channel_bias", &xs, &bs));
        }
        let plane = xs[2] * xs[3];
        let c = xs[1];
        let mut out = self.node(x).value.clone();
        {
            let bv = self.node(b);
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bias = bv.value[i % c];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let needs = self.needs(&[x, b]);
        Ok(self.push(xs, out, Op::ChannelBias { x, b }, needs))
    }

    pub fn elementwise(&self, kind: Elementwise, x: Var, other: Option<Var>) -> Result<Var> {
        match (kind, other) {
            (Elementwise::Relu, _) => Ok(self.relu(x)),
            (Elementwise::Tanh, _) => Ok(self.tanh(x)),
            (Elementwise::Scale(c), _) => Ok(self.scale(x, T::lit(c))),
            (Elementwise::Add, Some(y)) => self.add(x, y),
            (Elementwise::Mul, Some(y)) => self.mul(x, y),
            (_, None) => Err(Error::Parameter(format!("{kind:?} needs two operands"))),
        }
    }

    /// `max(x, 0)`; the derivative at 0 is taken as 0.
    pub fn relu(&self, x: Var) -> Var {
        let (shape, out) = {
            let xv = self.node(x);
            let out = xv.value.iter().map(|&v| v.max(T::zero())).collect();
            (xv.shape.clone(), out)
        };
        let needs = self.needs(&[x]);
        self.push(shape, out, Op::Relu(x), needs)
    }

    pub fn tanh(&self, x: Var) -> Var {
        let (shape, out) = {
            let xv = self.node(x);
            (xv.shape.clone(), xv.value.iter().map(|v| v.tanh()).collect())
        };
        let needs = self.needs(&[x]);
        self.push(shape, out, Op::Tanh(x), needs)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_values("add", a, b, |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Add(a, b), needs))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_values("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Mul(a, b), needs))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let (shape, out) = {
            let xv = self.node(x);
            (xv.shape.clone(), xv.value.iter().map(|&v| v * c).collect())
        };
        let needs = self.needs(&[x]);
        self.push(shape, out, Op::Scale(x, c), needs)
    }

    fn zip_values(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>)> {
        let (av, bv) = (self.node(a), self.node(b));
        if av.shape != bv.shape {
            return Err(dim_err(op, &av.shape, &bv.shape));
        }
        let out = av.value.iter().zip(&bv.value).map(|(&x, &y)| f(x, y)).collect();
        Ok((av.shape.clone(), out))
    }

    /// Row-wise softmax over the last axis of a matrix, with max subtraction.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let (_, k) = matrix_dims("softmax", &xs)?;
        let mut out = self.node(x).value.clone();
        out.chunks_mut(k).for_each(softmax_in_place);
        let needs = self.needs(&[x]);
        Ok(self.push(xs, out, Op::Softmax(x), needs))
    }

    /// Batch normalization over the rows of `x[N×D]`.
    ///
    /// Train mode normalizes by the biased batch variance and updates `stats`
    /// with momentum 0.1 (running variance uses the unbiased estimate).
    /// Infer mode normalizes by `stats` and leaves them untouched.
    pub fn batchnorm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let (n, d) = matrix_dims("batchnorm", &xs)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err("batchnorm", &xs, &self.shape(gamma)));
        }
        if stats.mean.len() != d || stats.var.len() != d {
            return Err(dim_err("batchnorm", &xs, &[stats.mean.len()]));
        }
        let eps = T::lit(BATCHNORM_EPS);
        let (xv, gv, bv) = (
            self.node(x).value.clone(),
            self.node(gamma).value.clone(),
            self.node(beta).value.clone(),
        );
        let needs = self.needs(&[x, gamma, beta]);
        match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::BatchSize { op: "batchnorm", got: n });
                }
                let nt = T::lit(n as f64);
                let mut mean = vec![T::zero(); d];
                for row in xv.chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nt);
                let mut var = vec![T::zero(); d];
                for row in xv.chunks(d) {
                    for j in 0..d {
                        let c = row[j] - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v /= nt);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = vec![T::zero(); n * d];
                let mut out = vec![T::zero(); n * d];
                for i in 0..n {
                    for j in 0..d {
                        let h = (xv[i * d + j] - mean[j]) * inv_std[j];
                        xhat[i * d + j] = h;
                        out[i * d + j] = gv[j] * h + bv[j];
                    }
                }
                let mom = T::lit(BATCHNORM_MOMENTUM);
                let unbias = nt / (nt - T::one());
                for j in 0..d {
                    stats.mean[j] = (T::one() - mom) * stats.mean[j] + mom * mean[j];
                    stats.var[j] = (T::one() - mom) * stats.var[j] + mom * var[j] * unbias;
                }
                Ok(self.push(
                    xs,
                    out,
                    Op::BatchNormTrain { x, gamma, beta, xhat, inv_std },
                    needs,
                ))
            }
            Mode::Infer => {
                let inv_std: Vec<T> = stats
                    .var
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                let mut out = vec![T::zero(); n * d];
                for i in 0..n {
                    for j in 0..d {
                        out[i * d + j] = gv[j] * (xv[i * d + j] - stats.mean[j]) * inv_std[j] + bv[j];
                    }
                }
                Ok(self.push(
                    xs,
                    out,
                    Op::BatchNormInfer {
                        x,
                        gamma,
                        beta,
                        mean: stats.mean.clone(),
                        inv_std,
                    },
                    needs,
                ))
            }
        }
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity in infer mode.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        if mode == Mode::Infer || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let (shape, mask, out) = {
            let xv = self.node(x);
            let mask: Vec<T> = (0..xv.value.len())
                .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
                .collect();
            let out = xv.value.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            (xv.shape.clone(), mask, out)
        };
        let needs = self.needs(&[x]);
        Ok(self.push(shape, out, Op::Dropout { x, mask }, needs))
    }

    /// Divides each row of `x[N×D]` by `max(‖row‖₂, 1e-12)`.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let (_, d) = matrix_dims("l2_normalize", &xs)?;
        let floor = T::lit(NORM_FLOOR);
        let mut out = self.node(x).value.clone();
        let mut norms = Vec::new();
        let mut floored = Vec::new();
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let (n, f) = if norm > floor { (norm, false) } else { (floor, true) };
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
            floored.push(f);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(xs, out, Op::L2Normalize { x, norms, floored }, needs))
    }

    /// Concatenates matrices along the feature (second) axis.
    pub fn concat(&self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::EmptySequence("concat"));
        };
        if xs.len() == 1 {
            return Ok(first);
        }
        let (rows, _) = matrix_dims("concat", &self.shape(first))?;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let (r, w) = matrix_dims("concat", &s)?;
            if r != rows {
                return Err(dim_err("concat", &self.shape(first), &s));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.node(v).value[i * w..(i + 1) * w]);
            }
        }
        let needs = self.needs(xs);
        Ok(self.push(vec![rows, total], out, Op::Concat { xs: xs.to_vec(), widths }, needs))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        if shape.iter().product::<usize>() != xs.iter().product::<usize>() || shape.contains(&0) {
            return Err(dim_err("reshape", &xs, shape));
        }
        let out = self.node(x).value.clone();
        let needs = self.needs(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), needs))
    }

    /// Turns a feature map `x[N×C×H×W]` into a frame sequence `[(N·H)×(C·W)]`,
    /// treating H as the time axis.
    pub fn conv_to_seq(&self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let [n, c, h, w] = xs[..] else {
            return Err(dim_err("conv_to_seq", &xs, &[]));
        };
        let mut out = vec![T::zero(); n * c * h * w];
        {
            let xv = self.node(x);
            for b in 0..n {
                for ch in 0..c {
                    for t in 0..h {
                        let src = ((b * c + ch) * h + t) * w;
                        let dst = (b * h + t) * c * w + ch * w;
                        out[dst..dst + w].copy_from_slice(&xv.value[src..src + w]);
                    }
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            vec![n * h, c * w],
            out,
            Op::ConvToSeq { x, dims: [n, c, h, w] },
            needs,
        ))
    }

    /// Mean over consecutive row segments of `x[(ΣT)×D]`, giving `[N×D]`.
    pub fn segment_mean(&self, x: Var, lengths: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        let (rows, d) = matrix_dims("segment_mean", &xs)?;
        check_lengths("segment_mean", lengths, rows)?;
        let mut out = vec![T::zero(); lengths.len() * d];
        {
            let xv = self.node(x);
            let mut start = 0;
            for (i, &len) in lengths.iter().enumerate() {
                let dst = &mut out[i * d..(i + 1) * d];
                for r in start..start + len {
                    for (o, &v) in dst.iter_mut().zip(&xv.value[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                let lt = T::lit(len as f64);
                dst.iter_mut().for_each(|v| *v /= lt);
                start += len;
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            vec![lengths.len(), d],
            out,
            Op::SegmentMean { x, lengths: lengths.to_vec() },
            needs,
        ))
    }

    /// Softmax of a score column `x[(ΣT)×1]` within each segment.
    pub fn segment_softmax(&self, x: Var, lengths: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        let rows = xs.iter().product::<usize>();
        if !(xs.len() == 2 && xs[1] == 1 || xs.len() == 1) {
            return Err(dim_err("segment_softmax", &xs, &[rows, 1]));
        }
        check_lengths("segment_softmax", lengths, rows)?;
        let mut out = self.node(x).value.clone();
        let mut start = 0;
        for &len in lengths {
            softmax_in_place(&mut out[start..start + len]);
            start += len;
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            xs,
            out,
            Op::SegmentSoftmax { x, lengths: lengths.to_vec() },
            needs,
        ))
    }

    /// `out[i] = Σ_{t∈segment i} w[t]·h[t]` for `h[(ΣT)×D]`, `w[(ΣT)×1]`.
    pub fn segment_weighted_sum(&self, h: Var, w: Var, lengths: &[usize]) -> Result<Var> {
        let (hs, ws) = (self.shape(h), self.shape(w));
        let (rows, d) = matrix_dims("segment_weighted_sum", &hs)?;
        if ws.iter().product::<usize>() != rows {
            return Err(dim_err("segment_weighted_sum", &hs, &ws));
        }
        check_lengths("segment_weighted_sum", lengths, rows)?;
        let mut out = vec![T::zero(); lengths.len() * d];
        {
            let (hv, wv) = (self.node(h), self.node(w));
            let mut start = 0;
            for (i, &len) in lengths.iter().enumerate() {
                let dst = &mut out[i * d..(i + 1) * d];
                for r in start..start + len {
                    let a = wv.value[r];
                    for (o, &v) in dst.iter_mut().zip(&hv.value[r * d..(r + 1) * d]) {
                        *o += a * v;
                    }
                }
                start += len;
            }
        }
        let needs = self.needs(&[h, w]);
        Ok(self.push(
            vec![lengths.len(), d],
            out,
            Op::SegmentWeightedSum { h, w, lengths: lengths.to_vec() },
            needs,
        ))
    }

    /// Additive angular margin on cosine logits `cos[N×K]`.
    ///
    /// Non-target entries become `s·cosθ`; the target entry becomes
    /// `s·cos(θ+m)` with `cosθ` clamped to `[-1+1e-7, 1-1e-7]` first.
    pub fn arc_margin(&self, cos: Var, labels: &[usize], scale: f64, margin: f64) -> Result<Var> {
        let cs = self.shape(cos);
        let (n, k) = matrix_dims("arc_margin", &cs)?;
        if labels.len() != n {
            return Err(dim_err("arc_margin", &cs, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label: bad, classes: k });
        }
        let s = T::lit(scale);
        let (cos_m, sin_m) = (T::lit(margin.cos()), T::lit(margin.sin()));
        let lo = T::lit(-1.0 + ARC_CLAMP);
        let hi = T::lit(1.0 - ARC_CLAMP);
        let mut out: Vec<T> = self.node(cos).value.iter().map(|&c| s * c).collect();
        let mut target_slope = Vec::with_capacity(n);
        {
            let cv = self.node(cos);
            for (i, &y) in labels.iter().enumerate() {
                let raw = cv.value[i * k + y];
                let c = raw.max(lo).min(hi);
                let sin_t = (T::one() - c * c).sqrt();
                out[i * k + y] = s * (c * cos_m - sin_t * sin_m);
                let slope = if raw < lo || raw > hi {
                    T::zero()
                } else {
                    s * (cos_m + c * sin_m / sin_t)
                };
                target_slope.push(slope);
            }
        }
        let needs = self.needs(&[cos]);
        Ok(self.push(
            cs,
            out,
            Op::ArcMargin { cos, labels: labels.to_vec(), target_slope, scale: s },
            needs,
        ))
    }

    /// Mean softmax cross-entropy of `logits[N×K]` against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        let (n, k) = matrix_dims("cross_entropy", &ls)?;
        if labels.len() != n {
            return Err(dim_err("cross_entropy", &ls, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label: bad, classes: k });
        }
        let mut probs = self.node(logits).value.clone();
        let mut total = T::zero();
        {
            let lv = self.node(logits);
            for (i, row) in probs.chunks_mut(k).enumerate() {
                let z = &lv.value[i * k..(i + 1) * k];
                let max = z.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                total += lse - z[labels[i]];
                softmax_in_place(row);
            }
        }
        let loss = total / T::lit(n as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            needs,
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.node(x).value.iter().copied().sum::<T>();
        let needs = self.needs(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), needs)
    }

    pub fn mean(&self, x: Var) -> Var {
        let (s, n) = {
            let xv = self.node(x);
            (xv.value.iter().copied().sum::<T>(), xv.value.len())
        };
        let needs = self.needs(&[x]);
        self.push(vec![1], vec![s / T::lit(n as f64)], Op::Mean(x), needs)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Propagates the output gradient `g` of `node` into its inputs.
pub(crate) fn backprop<T: Scalar>(
    node: &Node<T>,
    g: &[T],
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    let val = |v: Var| &nodes[v.0].value;
    let shp = |v: Var| &nodes[v.0].shape;
    let wants = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let (n, d_in) = (shp(*x)[0], shp(*x)[1]);
            let d_out = shp(*w)[1];
            if wants(*x) {
                let mut dx = vec![T::zero(); n * d_in];
                gemm_bt(n, d_out, d_in, g, val(*w), &mut dx);
                accumulate(grads, nodes, *x, dx);
            }
            if wants(*w) {
                let mut dw = vec![T::zero(); d_in * d_out];
                gemm_at(n, d_in, d_out, val(*x), g, &mut dw);
                accumulate(grads, nodes, *w, dw);
            }
            if wants(*b) {
                let mut db = vec![T::zero(); d_out];
                for row in g.chunks(d_out) {
                    for (a, &v) in db.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Matmul { a, b } => {
            let (m, k) = (shp(*a)[0], shp(*a)[1]);
            let n = shp(*b)[1];
            if wants(*a) {
                let mut da = vec![T::zero(); m * k];
                gemm_bt(m, n, k, g, val(*b), &mut da);
                accumulate(grads, nodes, *a, da);
            }
            if wants(*b) {
                let mut db = vec![T::zero(); k * n];
                gemm_at(m, k, n, val(*a), g, &mut db);
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::MatmulT { a, b } => {
            let (m, k) = (shp(*a)[0], shp(*a)[1]);
            let n = shp(*b)[0];
            if wants(*a) {
                let mut da = vec![T::zero(); m * k];
                gemm(m, n, k, g, val(*b), &mut da);
                accumulate(grads, nodes, *a, da);
            }
            if wants(*b) {
                let mut db = vec![T::zero(); n * k];
                gemm_at(m, n, k, g, val(*a), &mut db);
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Conv2d { x, k, geom } => {
            let c_out = shp(*k)[0];
            let plane = geom.col_cols();
            let rows = geom.col_rows();
            let image = geom.channels * geom.height * geom.width;
            let xv = val(*x);
            let kv = val(*k);
            let (need_x, need_k) = (wants(*x), wants(*k));
            // Per-sample partials are reduced in sample order so the result
            // does not depend on the worker count.
            let per_sample: Vec<(Vec<T>, Vec<T>)> = g
                .par_chunks(c_out * plane)
                .zip(xv.par_chunks(image))
                .map(|(gs, xs)| {
                    let mut dk = Vec::new();
                    if need_k {
                        let mut col = vec![T::zero(); rows * plane];
                        geom.im2col(xs, &mut col);
                        dk = vec![T::zero(); c_out * rows];
                        gemm_bt(c_out, plane, rows, gs, &col, &mut dk);
                    }
                    let mut dx = Vec::new();
                    if need_x {
                        let mut dcol = vec![T::zero(); rows * plane];
                        gemm_at(c_out, rows, plane, kv, gs, &mut dcol);
                        dx = vec![T::zero(); image];
                        geom.col2im(&dcol, &mut dx);
                    }
                    (dk, dx)
                })
                .collect();
            if need_k {
                let mut dk = vec![T::zero(); c_out * rows];
                for (part, _) in &per_sample {
                    for (a, &v) in dk.iter_mut().zip(part) {
                        *a += v;
                    }
                }
                accumulate(grads, nodes, *k, dk);
            }
            if need_x {
                let dx = per_sample.into_iter().flat_map(|(_, dx)| dx).collect();
                accumulate(grads, nodes, *x, dx);
            }
        }
        Op::Pad2d { x, pad } => {
            let xs = shp(*x);
            let (h, w) = (xs[2], xs[3]);
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            let mut dx = Vec::with_capacity(xs.iter().product());
            for plane in 0..xs[0] * xs[1] {
                for r in 0..h {
                    let start = (plane * ph + r + pad) * pw + pad;
                    dx.extend_from_slice(&g[start..start + w]);
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::ChannelBias { x, b } => {
            if wants(*b) {
                let xs = shp(*x);
                let (c, plane) = (xs[1], xs[2] * xs[3]);
                let mut db = vec![T::zero(); c];
                for (i, chunk) in g.chunks(plane).enumerate() {
                    db[i % c] += chunk.iter().copied().sum::<T>();
                }
                accumulate(grads, nodes, *b, db);
            }
            accumulate(grads, nodes, *x, g.to_vec());
        }
        Op::Relu(x) => {
            let dx = g
                .iter()
                .zip(val(*x))
                .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            accumulate(grads, nodes, *x, dx);
        }
        Op::Tanh(x) => {
            let dx = g
                .iter()
                .zip(&node.value)
                .map(|(&gv, &y)| gv * (T::one() - y * y))
                .collect();
            accumulate(grads, nodes, *x, dx);
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let da = g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect();
                accumulate(grads, nodes, *a, da);
            }
            if wants(*b) {
                let db = g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect();
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Scale(x, c) => {
            accumulate(grads, nodes, *x, g.iter().map(|&v| v * *c).collect());
        }
        Op::Softmax(x) => {
            let k = node.shape[1];
            let mut dx = vec![T::zero(); g.len()];
            for ((dst, gr), yr) in dx.chunks_mut(k).zip(g.chunks(k)).zip(node.value.chunks(k)) {
                softmax_backward(yr, gr, dst);
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
            let (n, d) = (node.shape[0], node.shape[1]);
            let gam = val(*gamma);
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            for i in 0..n {
                for j in 0..d {
                    dgamma[j] += g[i * d + j] * xhat[i * d + j];
                    dbeta[j] += g[i * d + j];
                }
            }
            if wants(*x) {
                let nt = T::lit(n as f64);
                let mut dx = vec![T::zero(); n * d];
                for j in 0..d {
                    // dxhat = g·γ; dx = inv/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                    let sum_dh = dbeta[j] * gam[j];
                    let sum_dh_xh = dgamma[j] * gam[j];
                    for i in 0..n {
                        let dh = g[i * d + j] * gam[j];
                        dx[i * d + j] =
                            inv_std[j] / nt * (nt * dh - sum_dh - xhat[i * d + j] * sum_dh_xh);
                    }
                }
                accumulate(grads, nodes, *x, dx);
            }
            accumulate(grads, nodes, *gamma, dgamma);
            accumulate(grads, nodes, *beta, dbeta);
        }
        Op::BatchNormInfer { x, gamma, beta, mean, inv_std } => {
            let d = node.shape[1];
            let gam = val(*gamma);
            let xv = val(*x);
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let mut dx = vec![T::zero(); g.len()];
            for (i, &gv) in g.iter().enumerate() {
                let j = i % d;
                dgamma[j] += gv * (xv[i] - mean[j]) * inv_std[j];
                dbeta[j] += gv;
                dx[i] = gv * gam[j] * inv_std[j];
            }
            accumulate(grads, nodes, *x, dx);
            accumulate(grads, nodes, *gamma, dgamma);
            accumulate(grads, nodes, *beta, dbeta);
        }
        Op::Dropout { x, mask } => {
            let dx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
            accumulate(grads, nodes, *x, dx);
        }
        Op::L2Normalize { x, norms, floored } => {
            let d = node.shape[1];
            let mut dx = vec![T::zero(); g.len()];
            for (i, ((dst, gr), yr)) in dx
                .chunks_mut(d)
                .zip(g.chunks(d))
                .zip(node.value.chunks(d))
                .enumerate()
            {
                let n = norms[i];
                if floored[i] {
                    dst.iter_mut().zip(gr).for_each(|(o, &gv)| *o = gv / n);
                } else {
                    let dot = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum::<T>();
                    for ((o, &gv), &y) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - y * dot) / n;
                    }
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::Concat { xs, widths } => {
            let total: usize = widths.iter().sum();
            let rows = node.shape[0];
            let mut offset = 0;
            for (&v, &w) in xs.iter().zip(widths) {
                if wants(v) {
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, nodes, v, part);
                }
                offset += w;
            }
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, g.to_vec()),
        Op::ConvToSeq { x, dims } => {
            let [n, c, h, w] = *dims;
            let mut dx = vec![T::zero(); g.len()];
            for b in 0..n {
                for ch in 0..c {
                    for t in 0..h {
                        let dst = ((b * c + ch) * h + t) * w;
                        let src = (b * h + t) * c * w + ch * w;
                        dx[dst..dst + w].copy_from_slice(&g[src..src + w]);
                    }
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::SegmentMean { x, lengths } => {
            let d = node.shape[1];
            let mut dx = Vec::with_capacity(shp(*x)[0] * d);
            for (i, &len) in lengths.iter().enumerate() {
                let lt = T::lit(len as f64);
                let row: Vec<T> = g[i * d..(i + 1) * d].iter().map(|&v| v / lt).collect();
                for _ in 0..len {
                    dx.extend_from_slice(&row);
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::SegmentSoftmax { x, lengths } => {
            let mut dx = vec![T::zero(); g.len()];
            let mut start = 0;
            for &len in lengths {
                let r = start..start + len;
                softmax_backward(&node.value[r.clone()], &g[r.clone()], &mut dx[r]);
                start += len;
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::SegmentWeightedSum { h, w, lengths } => {
            let d = node.shape[1];
            let (hv, wv) = (val(*h), val(*w));
            let mut dh = vec![T::zero(); hv.len()];
            let mut dw = vec![T::zero(); wv.len()];
            let mut start = 0;
            for (i, &len) in lengths.iter().enumerate() {
                let gi = &g[i * d..(i + 1) * d];
                for r in start..start + len {
                    let hr = &hv[r * d..(r + 1) * d];
                    dw[r] = hr.iter().zip(gi).map(|(&a, &b)| a * b).sum::<T>();
                    for (o, &gv) in dh[r * d..(r + 1) * d].iter_mut().zip(gi) {
                        *o = wv[r] * gv;
                    }
                }
                start += len;
            }
            accumulate(grads, nodes, *h, dh);
            accumulate(grads, nodes, *w, dw);
        }
        Op::ArcMargin { cos, labels, target_slope, scale } => {
            let k = node.shape[1];
            let mut dc: Vec<T> = g.iter().map(|&v| v * *scale).collect();
            for (i, &y) in labels.iter().enumerate() {
                dc[i * k + y] = g[i * k + y] * target_slope[i];
            }
            accumulate(grads, nodes, *cos, dc);
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let k = shp(*logits)[1];
            let n = labels.len();
            let coef = g[0] / T::lit(n as f64);
            let mut dz: Vec<T> = probs.iter().map(|&p| p * coef).collect();
            for (i, &y) in labels.iter().enumerate() {
                dz[i * k + y] -= coef;
            }
            accumulate(grads, nodes, *logits, dz);
        }
        Op::Sum(x) => {
            let n = nodes[x.0].value.len();
            accumulate(grads, nodes, *x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = nodes[x.0].value.len();
            accumulate(grads, nodes, *x, vec![g[0] / T::lit(n as f64); n]);
        }
    }
}

fn softmax_backward<T: Scalar>(y: &[T], g: &[T], out: &mut [T]) {
    let dot = y.iter().zip(g).map(|(&a, &b)| a * b).sum::<T>();
    for ((o, &yv), &gv) in out.iter_mut().zip(y).zip(g) {
        *o = yv * (gv - dot);
    }
}
