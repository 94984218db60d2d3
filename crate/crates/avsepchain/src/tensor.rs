//! Reverse-mode automatic differentiation on `f64` tensors.
//!
//! A [`Tape`] records a computation graph of dynamically shaped arrays.
//! Operations push nodes; [`Tape::backward`] walks the graph in reverse and
//! accumulates gradients into every node that requires them. The op set is
//! deliberately small: dense linear algebra plus the handful of fused kernels
//! (attention, layer norm, 1-D convolutions, STFT power) this crate needs.
//!
//! Values are `f64` throughout so analytic gradients can be validated against
//! central finite differences at tight tolerances.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tx(usize);

/// Window applied before the FFT in [`Tape::power_spec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Rect,
    Hann,
}

/// Framing/FFT parameters for [`Tape::power_spec`].
#[derive(Debug, Clone)]
pub struct SpecConfig {
    pub win_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub n_frames: usize,
    /// Offset of frame 0 relative to sample 0 (negative = left padding).
    pub start_offset: isize,
    pub window: Window,
}

enum Op {
    Leaf,
    Add(Tx, Tx),
    Sub(Tx, Tx),
    Mul(Tx, Tx),
    Div(Tx, Tx),
    AddScalar(Tx),
    MulScalar(Tx, f64),
    Matmul(Tx, Tx),
    Bmm(Tx, Tx),
    Attention {
        q: Tx,
        k: Tx,
        v: Tx,
        scale: f64,
        weights: Array3<f64>,
    },
    Relu(Tx),
    Sigmoid(Tx),
    LnClamped(Tx, f64),
    SqrtEps(Tx),
    SumAll(Tx),
    MeanAll(Tx),
    SumLast(Tx),
    ZeroMean(Tx),
    Reshape(Tx),
    Permute(Tx, Vec<usize>),
    Concat(Vec<Tx>, usize),
    Narrow {
        x: Tx,
        axis: usize,
        start: usize,
    },
    LayerNorm {
        x: Tx,
        gamma: Tx,
        beta: Tx,
        normed: ArrayD<f64>,
        rstd: ArrayD<f64>,
    },
    Conv1d {
        x: Tx,
        w: Tx,
        b: Option<Tx>,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    ConvTranspose1d {
        x: Tx,
        w: Tx,
        stride: usize,
    },
    ChunkOp {
        x: Tx,
        chunk_len: usize,
    },
    UnchunkOp {
        x: Tx,
        coverage: Array1<f64>,
    },
    FoldOp(Tx),
    PowerSpec {
        x: Tx,
        cfg: SpecConfig,
        spectra: Array2<Complex<f64>>,
    },
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. One forward pass per tape; dropped afterwards.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `grad` down to `shape` by reducing broadcast axes.
fn reduce_to_shape(grad: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[i] > 1 {
            let summed = g.sum_axis(Axis(i));
            g = summed.insert_axis(Axis(i));
        }
    }
    g
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().unwrap()
}

fn as3(a: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().unwrap()
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Tx {
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        Tx(self.nodes.len() - 1)
    }

    fn ng(&self, t: Tx) -> bool {
        self.nodes[t.0].needs_grad
    }

    pub fn value(&self, t: Tx) -> &ArrayD<f64> {
        &self.nodes[t.0].value
    }

    pub fn grad(&self, t: Tx) -> Option<&ArrayD<f64>> {
        self.nodes[t.0].grad.as_ref()
    }

    pub fn shape(&self, t: Tx) -> &[usize] {
        self.nodes[t.0].value.shape()
    }

    /// Constant leaf: no gradient is tracked through it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Tx {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (parameter or input that receives gradient).
    pub fn var(&mut self, value: ArrayD<f64>) -> Tx {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: f64) -> Tx {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    #[inline]
    fn binary_forward(&self, a: Tx, b: Tx, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() == bv.shape() {
            let mut out = av.clone();
            out.zip_mut_with(bv, |x, &y| *x = f(*x, y));
            return out;
        }
        let shape = broadcast_shape(av.shape(), bv.shape());
        let ab = av.broadcast(IxDyn(&shape)).unwrap();
        let bb = bv.broadcast(IxDyn(&shape)).unwrap();
        let mut out = ab.to_owned();
        out.zip_mut_with(&bb, |x, &y| *x = f(*x, y));
        out
    }

    pub fn add(&mut self, a: Tx, b: Tx) -> Tx {
        let out = self.binary_forward(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Tx, b: Tx) -> Tx {
        let out = self.binary_forward(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Tx, b: Tx) -> Tx {
        let out = self.binary_forward(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Tx, b: Tx) -> Tx {
        let out = self.binary_forward(a, b, |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Div(a, b), ng)
    }

    pub fn add_scalar(&mut self, a: Tx, c: f64) -> Tx {
        let out = &self.nodes[a.0].value + c;
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn mul_scalar(&mut self, a: Tx, c: f64) -> Tx {
        let out = &self.nodes[a.0].value * c;
        let ng = self.ng(a);
        self.push(out, Op::MulScalar(a, c), ng)
    }

    pub fn neg(&mut self, a: Tx) -> Tx {
        self.mul_scalar(a, -1.0)
    }

    /// `[M, K] x [K, N] -> [M, N]`
    pub fn matmul(&mut self, a: Tx, b: Tx) -> Tx {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
        let out = av.dot(&bv).into_dyn();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Matmul(a, b), ng)
    }

    /// Batched matmul `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&mut self, a: Tx, b: Tx) -> Tx {
        let av = as3(&self.nodes[a.0].value);
        let bv = as3(&self.nodes[b.0].value);
        assert_eq!(av.dim().0, bv.dim().0, "bmm batch mismatch");
        assert_eq!(av.dim().2, bv.dim().1, "bmm inner dim mismatch");
        let (bb, m, _) = av.dim();
        let n = bv.dim().2;
        let mut out = Array3::<f64>::zeros((bb, m, n));
        for i in 0..bb {
            out.index_axis_mut(Axis(0), i)
                .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out.into_dyn(), Op::Bmm(a, b), ng)
    }

    /// Fused scaled dot-product attention over a batch axis.
    ///
    /// `q: [B, M, D]`, `k: [B, N, D]`, `v: [B, N, D]` -> `[B, M, D]`
    /// with row softmax of `q k^T * scale` over the key axis.
    pub fn attention(&mut self, q: Tx, k: Tx, v: Tx, scale: f64) -> Tx {
        let qv = as3(&self.nodes[q.0].value);
        let kv = as3(&self.nodes[k.0].value);
        let vv = as3(&self.nodes[v.0].value);
        let (b, m, d) = qv.dim();
        let n = kv.dim().1;
        assert_eq!(kv.dim(), (b, n, d), "attention k shape");
        assert_eq!(vv.dim(), (b, n, d), "attention v shape");
        let mut weights = Array3::<f64>::zeros((b, m, n));
        let mut out = Array3::<f64>::zeros((b, m, d));
        for i in 0..b {
            let mut s = qv.index_axis(Axis(0), i).dot(&kv.index_axis(Axis(0), i).t());
            s *= scale;
            softmax_rows(&mut s);
            out.index_axis_mut(Axis(0), i)
                .assign(&s.dot(&vv.index_axis(Axis(0), i)));
            weights.index_axis_mut(Axis(0), i).assign(&s);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out.into_dyn(), Op::Attention { q, k, v, scale, weights }, ng)
    }

    /// Attention weights of the most recent [`Tape::attention`] node.
    pub fn attention_weights(&self, t: Tx) -> Option<&Array3<f64>> {
        match &self.nodes[t.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn relu(&mut self, a: Tx) -> Tx {
        let out = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Tx) -> Tx {
        let out = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// `ln(max(x, floor))`; gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, a: Tx, floor: f64) -> Tx {
        let out = self.nodes[a.0].value.mapv(|x| x.max(floor).ln());
        let ng = self.ng(a);
        self.push(out, Op::LnClamped(a, floor), ng)
    }

    pub fn log10(&mut self, a: Tx) -> Tx {
        let l = self.ln_clamped(a, 0.0);
        self.mul_scalar(l, std::f64::consts::LOG10_E)
    }

    /// `sqrt(x + eps)`
    pub fn sqrt_eps(&mut self, a: Tx, eps: f64) -> Tx {
        let out = self.nodes[a.0].value.mapv(|x| (x + eps).sqrt());
        let ng = self.ng(a);
        self.push(out, Op::SqrtEps(a), ng)
    }

    pub fn sum_all(&mut self, a: Tx) -> Tx {
        let s = self.nodes[a.0].value.sum();
        let ng = self.ng(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Tx) -> Tx {
        let s = self.nodes[a.0].value.mean().unwrap();
        let ng = self.ng(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::MeanAll(a), ng)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Tx) -> Tx {
        let nd = self.nodes[a.0].value.ndim();
        let out = self.nodes[a.0].value.sum_axis(Axis(nd - 1));
        let ng = self.ng(a);
        self.push(out, Op::SumLast(a), ng)
    }

    /// Subtract the global mean.
    pub fn zero_mean(&mut self, a: Tx) -> Tx {
        let m = self.nodes[a.0].value.mean().unwrap();
        let out = &self.nodes[a.0].value - m;
        let ng = self.ng(a);
        self.push(out, Op::ZeroMean(a), ng)
    }

    pub fn dot(&mut self, a: Tx, b: Tx) -> Tx {
        let p = self.mul(a, b);
        self.sum_all(p)
    }

    pub fn reshape(&mut self, a: Tx, shape: &[usize]) -> Tx {
        let out = self.nodes[a.0]
            .value
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn permute(&mut self, a: Tx, axes: &[usize]) -> Tx {
        let out = self.nodes[a.0]
            .value
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let ng = self.ng(a);
        self.push(out, Op::Permute(a, axes.to_vec()), ng)
    }

    pub fn concat(&mut self, parts: &[Tx], axis: usize) -> Tx {
        let views: Vec<_> = parts.iter().map(|t| self.nodes[t.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let ng = parts.iter().any(|t| self.ng(*t));
        self.push(out, Op::Concat(parts.to_vec(), axis), ng)
    }

    /// Slice `len` entries along `axis` starting at `start`.
    pub fn narrow(&mut self, a: Tx, axis: usize, start: usize, len: usize) -> Tx {
        let out = self.nodes[a.0]
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let ng = self.ng(a);
        self.push(out, Op::Narrow { x: a, axis, start }, ng)
    }

    /// Layer normalization over the last axis with learnable gain/offset.
    pub fn layer_norm(&mut self, x: Tx, gamma: Tx, beta: Tx, eps: f64) -> Tx {
        let xv = &self.nodes[x.0].value;
        let nd = xv.ndim();
        let d = xv.shape()[nd - 1] as f64;
        let mean = xv.mean_axis(Axis(nd - 1)).unwrap();
        let mut rstd = ArrayD::zeros(mean.raw_dim());
        let mut normed = xv.clone();
        for (mut row, (m, r)) in normed
            .rows_mut()
            .into_iter()
            .zip(mean.iter().zip(rstd.iter_mut()))
        {
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d;
            let rs = 1.0 / (var + eps).sqrt();
            *r = rs;
            row.mapv_inplace(|v| (v - m) * rs);
        }
        let g = self.nodes[gamma.0].value.view();
        let b = self.nodes[beta.0].value.view();
        let out = &normed * &g + &b;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, normed, rstd }, ng)
    }

    /// 1-D convolution: `x [Cin, T]`, `w [Cout, Cin, K]` -> `[Cout, T_out]`,
    /// zero padding `pad` on both sides, `T_out = (T + 2 pad - K) / stride + 1`.
    pub fn conv1d(&mut self, x: Tx, w: Tx, b: Option<Tx>, stride: usize, pad: usize) -> Tx {
        let xv = as2(&self.nodes[x.0].value);
        let wv = &self.nodes[w.0].value;
        let (cin, t) = xv.dim();
        let (cout, wcin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(cin, wcin, "conv1d channel mismatch");
        assert!(t + 2 * pad >= k, "conv1d input shorter than kernel");
        let t_out = (t + 2 * pad - k) / stride + 1;
        let mut cols = Array2::<f64>::zeros((cin * k, t_out));
        for to in 0..t_out {
            for c in 0..cin {
                for kk in 0..k {
                    let ti = (to * stride + kk) as isize - pad as isize;
                    if ti >= 0 && (ti as usize) < t {
                        cols[[c * k + kk, to]] = xv[[c, ti as usize]];
                    }
                }
            }
        }
        let w2 = wv.view().into_shape_with_order((cout, cin * k)).unwrap();
        let mut out = w2.dot(&cols);
        if let Some(bt) = b {
            let bv = self.nodes[bt.0].value.view().into_dimensionality::<Ix1>().unwrap();
            for (mut row, bias) in out.rows_mut().into_iter().zip(bv.iter()) {
                row.mapv_inplace(|v| v + bias);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.map(|bt| self.ng(bt)).unwrap_or(false);
        self.push(out.into_dyn(), Op::Conv1d { x, w, b, stride, pad, cols }, ng)
    }

    /// Transposed 1-D convolution: `x [Cin, T]`, `w [Cin, Cout, K]` ->
    /// `[Cout, (T-1) stride + K]`.
    pub fn conv_transpose1d(&mut self, x: Tx, w: Tx, stride: usize) -> Tx {
        let xv = as2(&self.nodes[x.0].value);
        let wv = &self.nodes[w.0].value;
        let (cin, t) = xv.dim();
        let (wcin, cout, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(cin, wcin, "conv_transpose1d channel mismatch");
        let t_out = (t - 1) * stride + k;
        let w2 = wv.view().into_shape_with_order((cin, cout * k)).unwrap();
        let cols = w2.t().dot(&xv); // [Cout*K, T]
        let mut out = Array2::<f64>::zeros((cout, t_out));
        for ti in 0..t {
            for c in 0..cout {
                for kk in 0..k {
                    out[[c, ti * stride + kk]] += cols[[c * k + kk, ti]];
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(out.into_dyn(), Op::ConvTranspose1d { x, w, stride }, ng)
    }

    /// Split `[N, T]` into half-overlapping chunks `[N, K, S]` with right zero
    /// padding; layout matches `signal::chunk`.
    pub fn chunk_op(&mut self, x: Tx, chunk_len: usize) -> Tx {
        let xv = as2(&self.nodes[x.0].value);
        let (n, t) = xv.dim();
        let (s, _) = chunk_layout(t, chunk_len);
        let stride = chunk_len / 2;
        let mut out = Array3::<f64>::zeros((n, chunk_len, s));
        for si in 0..s {
            for kk in 0..chunk_len {
                let ti = si * stride + kk;
                if ti < t {
                    for c in 0..n {
                        out[[c, kk, si]] = xv[[c, ti]];
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::ChunkOp { x, chunk_len }, ng)
    }

    /// Coverage-normalized overlap-add inverse of [`Tape::chunk_op`],
    /// truncated to `original_time`.
    pub fn unchunk_op(&mut self, x: Tx, original_time: usize) -> Tx {
        let xv = as3(&self.nodes[x.0].value);
        let (n, k, s) = xv.dim();
        let stride = k / 2;
        let padded = k + (s - 1) * stride;
        let mut coverage = Array1::<f64>::zeros(padded);
        for si in 0..s {
            for kk in 0..k {
                coverage[si * stride + kk] += 1.0;
            }
        }
        let mut out = Array2::<f64>::zeros((n, original_time));
        for si in 0..s {
            for kk in 0..k {
                let ti = si * stride + kk;
                if ti < original_time {
                    for c in 0..n {
                        out[[c, ti]] += xv[[c, kk, si]] / coverage[ti];
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::UnchunkOp { x, coverage }, ng)
    }

    /// `[H, T]` -> waveform `[H*T]`: column t maps to samples `[H t, H (t+1))`.
    pub fn fold_frames(&mut self, x: Tx) -> Tx {
        let xv = as2(&self.nodes[x.0].value);
        let (h, t) = xv.dim();
        let mut out = Array1::<f64>::zeros(h * t);
        for ti in 0..t {
            for i in 0..h {
                out[ti * h + i] = xv[[i, ti]];
            }
        }
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::FoldOp(x), ng)
    }

    /// One-sided STFT power spectrogram `[n_frames, fft_size/2 + 1]` of a 1-D
    /// signal. Samples outside the signal are treated as zero.
    pub fn power_spec(&mut self, x: Tx, cfg: SpecConfig) -> Tx {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let bins = cfg.fft_size / 2 + 1;
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(cfg.fft_size);
        let win = make_window(cfg.window, cfg.win_len);
        let mut spectra = Array2::<Complex<f64>>::zeros((cfg.n_frames, bins));
        let mut power = Array2::<f64>::zeros((cfg.n_frames, bins));
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        for f in 0..cfg.n_frames {
            for v in buf.iter_mut() {
                *v = Complex::new(0.0, 0.0);
            }
            let start = cfg.start_offset + (f * cfg.hop) as isize;
            for m in 0..cfg.win_len {
                let idx = start + m as isize;
                if idx >= 0 && (idx as usize) < xv.len() {
                    buf[m] = Complex::new(xv[idx as usize] * win[m], 0.0);
                }
            }
            fft.process(&mut buf);
            for k in 0..bins {
                spectra[[f, k]] = buf[k];
                power[[f, k]] = buf[k].norm_sqr();
            }
        }
        let ng = self.ng(x);
        self.push(power.into_dyn(), Op::PowerSpec { x, cfg, spectra }, ng)
    }

    fn accumulate(&mut self, t: Tx, g: ArrayD<f64>) {
        if !self.nodes[t.0].needs_grad {
            return;
        }
        match &mut self.nodes[t.0].grad {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g.as_standard_layout().into_owned()),
        }
    }

    /// Run reverse-mode accumulation from a scalar output.
    pub fn backward(&mut self, out: Tx) {
        assert_eq!(
            self.nodes[out.0].value.len(),
            1,
            "backward requires a scalar output"
        );
        let seed = ArrayD::from_elem(self.nodes[out.0].value.raw_dim(), 1.0);
        self.nodes[out.0].grad = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad
                || self.nodes[i].grad.is_none()
                || matches!(self.nodes[i].op, Op::Leaf)
            {
                continue;
            }
            // each interior node backprops exactly once; taking its gradient
            // and op avoids cloning the stored context
            let g = self.nodes[i].grad.take().unwrap();
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, op, g);
        }
    }

    fn backprop_node(&mut self, i: usize, op: Op, g: ArrayD<f64>) {
        // Ops only reference lower indices, so reverse index order is a valid
        // topological order. `op` is owned: every stored context (attention
        // weights, im2col buffers, spectra) is consumed without cloning.
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.shape(a) == g.shape() && self.shape(b) == g.shape() {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                    return;
                }
                let ga = reduce_to_shape(&g, &self.shape(a).to_vec());
                let gb = reduce_to_shape(&g, &self.shape(b).to_vec());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Sub(a, b) => {
                let ga = reduce_to_shape(&g, &self.shape(a).to_vec());
                let gb = reduce_to_shape(&(-g), &self.shape(b).to_vec());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Mul(a, b) => {
                if self.shape(a) == g.shape() && self.shape(b) == g.shape() {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&self.nodes[b.0].value, |x, &y| *x *= y);
                    let mut gb = g;
                    gb.zip_mut_with(&self.nodes[a.0].value, |x, &y| *x *= y);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                    return;
                }
                let shape = g.shape().to_vec();
                let (ga, gb) = {
                    let av = self.nodes[a.0].value.broadcast(IxDyn(&shape)).unwrap();
                    let bv = self.nodes[b.0].value.broadcast(IxDyn(&shape)).unwrap();
                    (
                        reduce_to_shape(&(&g * &bv), &self.nodes[a.0].value.shape().to_vec()),
                        reduce_to_shape(&(&g * &av), &self.nodes[b.0].value.shape().to_vec()),
                    )
                };
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Div(a, b) => {
                let shape = g.shape().to_vec();
                let (ga, gb) = {
                    let av = self.nodes[a.0].value.broadcast(IxDyn(&shape)).unwrap();
                    let bv = self.nodes[b.0].value.broadcast(IxDyn(&shape)).unwrap();
                    let gb_full = -(&g * &av) / (&bv.to_owned() * &bv);
                    (
                        reduce_to_shape(&(&g / &bv), &self.nodes[a.0].value.shape().to_vec()),
                        reduce_to_shape(&gb_full, &self.nodes[b.0].value.shape().to_vec()),
                    )
                };
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::AddScalar(a) => {
                self.accumulate(a, g);
            }
            Op::MulScalar(a, c) => {
                self.accumulate(a, g * c);
            }
            Op::Matmul(a, b) => {
                let (ga, gb) = {
                    let g2 = as2(&g);
                    let av = as2(&self.nodes[a.0].value);
                    let bv = as2(&self.nodes[b.0].value);
                    let mut ga = Array2::<f64>::zeros(av.dim());
                    let mut gb = Array2::<f64>::zeros(bv.dim());
                    ndarray::linalg::general_mat_mul(1.0, &g2, &bv.t(), 0.0, &mut ga);
                    ndarray::linalg::general_mat_mul(1.0, &av.t(), &g2, 0.0, &mut gb);
                    (ga, gb)
                };
                self.accumulate(a, ga.into_dyn());
                self.accumulate(b, gb.into_dyn());
            }
            Op::Bmm(a, b) => {
                let (ga, gb) = {
                    let g3 = as3(&g);
                    let av = as3(&self.nodes[a.0].value);
                    let bv = as3(&self.nodes[b.0].value);
                    let (bb, m, k) = av.dim();
                    let n = bv.dim().2;
                    let mut ga = Array3::<f64>::zeros((bb, m, k));
                    let mut gb = Array3::<f64>::zeros((bb, k, n));
                    for idx in 0..bb {
                        let gi = g3.index_axis(Axis(0), idx);
                        let mut gai = ga.index_axis_mut(Axis(0), idx);
                        ndarray::linalg::general_mat_mul(
                            1.0,
                            &gi,
                            &bv.index_axis(Axis(0), idx).t(),
                            0.0,
                            &mut gai,
                        );
                        let mut gbi = gb.index_axis_mut(Axis(0), idx);
                        ndarray::linalg::general_mat_mul(
                            1.0,
                            &av.index_axis(Axis(0), idx).t(),
                            &gi,
                            0.0,
                            &mut gbi,
                        );
                    }
                    (ga, gb)
                };
                self.accumulate(a, ga.into_dyn());
                self.accumulate(b, gb.into_dyn());
            }
            Op::Attention { q, k, v, scale, weights } => {
                let (gq, gk, gv) = {
                    let w = &weights;
                    let g3 = as3(&g);
                    let qv = as3(&self.nodes[q.0].value);
                    let kv = as3(&self.nodes[k.0].value);
                    let vv = as3(&self.nodes[v.0].value);
                    let (b, m, d) = qv.dim();
                    let n = kv.dim().1;
                    let mut gq = Array3::<f64>::zeros((b, m, d));
                    let mut gk = Array3::<f64>::zeros((b, n, d));
                    let mut gv = Array3::<f64>::zeros((b, n, d));
                    let mut da = Array2::<f64>::zeros((m, n));
                    let mut ds = Array2::<f64>::zeros((m, n));
                    for i in 0..b {
                        let gi = g3.index_axis(Axis(0), i);
                        let wi = w.index_axis(Axis(0), i);
                        ndarray::linalg::general_mat_mul(
                            1.0,
                            &gi,
                            &vv.index_axis(Axis(0), i).t(),
                            0.0,
                            &mut da,
                        );
                        // softmax backward: ds = w .* (da - rowsum(da .* w))
                        for r in 0..m {
                            let mut dotv = 0.0;
                            for c in 0..n {
                                dotv += da[[r, c]] * wi[[r, c]];
                            }
                            for c in 0..n {
                                ds[[r, c]] = scale * wi[[r, c]] * (da[[r, c]] - dotv);
                            }
                        }
                        let mut gqi = gq.index_axis_mut(Axis(0), i);
                        ndarray::linalg::general_mat_mul(
                            1.0,
                            &ds.view(),
                            &kv.index_axis(Axis(0), i),
                            0.0,
                            &mut gqi,
                        );
                        let mut gki = gk.index_axis_mut(Axis(0), i);
                        ndarray::linalg::general_mat_mul(
                            1.0,
                            &ds.t(),
                            &qv.index_axis(Axis(0), i),
                            0.0,
                            &mut gki,
                        );
                        let mut gvi = gv.index_axis_mut(Axis(0), i);
                        ndarray::linalg::general_mat_mul(1.0, &wi.t(), &gi, 0.0, &mut gvi);
                    }
                    (gq, gk, gv)
                };
                self.accumulate(q, gq.into_dyn());
                self.accumulate(k, gk.into_dyn());
                self.accumulate(v, gv.into_dyn());
            }
            Op::Relu(a) => {
                let mut ga = g;
                ga.zip_mut_with(&self.nodes[a.0].value, |x, &y| {
                    if y <= 0.0 {
                        *x = 0.0;
                    }
                });
                self.accumulate(a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g;
                ga.zip_mut_with(&self.nodes[i].value, |x, &y| *x *= y * (1.0 - y));
                self.accumulate(a, ga);
            }
            Op::LnClamped(a, floor) => {
                let mut ga = g;
                ga.zip_mut_with(&self.nodes[a.0].value, |x, &y| {
                    *x = if y > floor { *x / y } else { 0.0 };
                });
                self.accumulate(a, ga);
            }
            Op::SqrtEps(a) => {
                let mut ga = g;
                ga.zip_mut_with(&self.nodes[i].value, |x, &y| *x *= 0.5 / y);
                self.accumulate(a, ga);
            }
            Op::SumAll(a) => {
                let gv = *g.iter().next().unwrap();
                let ga = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gv);
                self.accumulate(a, ga);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gv = *g.iter().next().unwrap() / n;
                let ga = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gv);
                self.accumulate(a, ga);
            }
            Op::SumLast(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let last = g.ndim();
                let expanded = g
                    .insert_axis(Axis(last))
                    .broadcast(IxDyn(&shape))
                    .unwrap()
                    .to_owned();
                self.accumulate(a, expanded);
            }
            Op::ZeroMean(a) => {
                let m = g.mean().unwrap();
                self.accumulate(a, g - m);
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let ga = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .unwrap();
                self.accumulate(a, ga);
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0usize; axes.len()];
                for (pos, &ax) in axes.iter().enumerate() {
                    inv[ax] = pos;
                }
                let ga = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .into_owned();
                self.accumulate(a, ga);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0usize;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[axis];
                    let gp = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    self.accumulate(p, gp);
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let mut ga = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                let len = g.shape()[axis];
                ga.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(&g);
                self.accumulate(x, ga);
            }
            Op::LayerNorm { x, gamma, beta, normed, rstd } => {
                let (gx, ggamma, gbeta) = {
                    let gview = self.nodes[gamma.0]
                        .value
                        .view()
                        .into_dimensionality::<Ix1>()
                        .unwrap();
                    let d = normed.shape()[normed.ndim() - 1];
                    let mut gx = ArrayD::zeros(normed.raw_dim());
                    let mut ggamma = Array1::<f64>::zeros(d);
                    let mut gbeta = Array1::<f64>::zeros(d);
                    let rows = normed.len() / d;
                    let n2 = normed.view().into_shape_with_order((rows, d)).unwrap();
                    let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                    let rs = rstd.view().into_shape_with_order(rows).unwrap();
                    {
                        let mut gx2 = gx.view_mut().into_shape_with_order((rows, d)).unwrap();
                        for r in 0..rows {
                            let mut mean_dxhat = 0.0;
                            let mut mean_dxhat_xhat = 0.0;
                            for c in 0..d {
                                let dxhat = g2[[r, c]] * gview[c];
                                mean_dxhat += dxhat;
                                mean_dxhat_xhat += dxhat * n2[[r, c]];
                                ggamma[c] += g2[[r, c]] * n2[[r, c]];
                                gbeta[c] += g2[[r, c]];
                            }
                            mean_dxhat /= d as f64;
                            mean_dxhat_xhat /= d as f64;
                            for c in 0..d {
                                let dxhat = g2[[r, c]] * gview[c];
                                gx2[[r, c]] =
                                    rs[r] * (dxhat - mean_dxhat - n2[[r, c]] * mean_dxhat_xhat);
                            }
                        }
                    }
                    (gx, ggamma, gbeta)
                };
                self.accumulate(x, gx);
                self.accumulate(gamma, ggamma.into_dyn());
                self.accumulate(beta, gbeta.into_dyn());
            }
            Op::Conv1d { x, w, b, stride, pad, cols } => {
                let (gx, gw, gb) = {
                    let g2 = as2(&g);
                    let wshape = self.nodes[w.0].value.shape().to_vec();
                    let (cout, cin, k) = (wshape[0], wshape[1], wshape[2]);
                    let w2 = self.nodes[w.0]
                        .value
                        .view()
                        .into_shape_with_order((cout, cin * k))
                        .unwrap();
                    let mut gw = Array2::<f64>::zeros((cout, cin * k));
                    ndarray::linalg::general_mat_mul(1.0, &g2, &cols.t(), 0.0, &mut gw);
                    let mut dcols = Array2::<f64>::zeros((cin * k, g2.dim().1));
                    ndarray::linalg::general_mat_mul(1.0, &w2.t(), &g2, 0.0, &mut dcols);
                    let t = self.nodes[x.0].value.shape()[1];
                    let mut gx = Array2::<f64>::zeros((cin, t));
                    let t_out = g2.dim().1;
                    for to in 0..t_out {
                        for c in 0..cin {
                            for kk in 0..k {
                                let ti = (to * stride + kk) as isize - pad as isize;
                                if ti >= 0 && (ti as usize) < t {
                                    gx[[c, ti as usize]] += dcols[[c * k + kk, to]];
                                }
                            }
                        }
                    }
                    let gb = b.map(|_| g2.sum_axis(Axis(1)));
                    (
                        gx,
                        gw.into_shape_with_order(IxDyn(&[cout, cin, k])).unwrap(),
                        gb,
                    )
                };
                self.accumulate(x, gx.into_dyn());
                self.accumulate(w, gw);
                if let (Some(bt), Some(gbv)) = (b, gb) {
                    self.accumulate(bt, gbv.into_dyn());
                }
            }
            Op::ConvTranspose1d { x, w, stride } => {
                let (gx, gw) = {
                    let g2 = as2(&g);
                    let wshape = self.nodes[w.0].value.shape().to_vec();
                    let (cin, cout, k) = (wshape[0], wshape[1], wshape[2]);
                    let xv = as2(&self.nodes[x.0].value);
                    let t = xv.dim().1;
                    // dcols[c*k+kk, ti] = g[c, ti*stride + kk]
                    let mut dcols = Array2::<f64>::zeros((cout * k, t));
                    for ti in 0..t {
                        for c in 0..cout {
                            for kk in 0..k {
                                dcols[[c * k + kk, ti]] = g2[[c, ti * stride + kk]];
                            }
                        }
                    }
                    let w2 = self.nodes[w.0]
                        .value
                        .view()
                        .into_shape_with_order((cin, cout * k))
                        .unwrap();
                    let mut gx = Array2::<f64>::zeros((cin, t));
                    ndarray::linalg::general_mat_mul(1.0, &w2, &dcols, 0.0, &mut gx);
                    let mut gw = Array2::<f64>::zeros((cin, cout * k));
                    ndarray::linalg::general_mat_mul(1.0, &xv, &dcols.t(), 0.0, &mut gw);
                    (
                        gx,
                        gw.into_shape_with_order(IxDyn(&[cin, cout, k])).unwrap(),
                    )
                };
                self.accumulate(x, gx.into_dyn());
                self.accumulate(w, gw);
            }
            Op::ChunkOp { x, chunk_len } => {
                let k = chunk_len;
                let gx = {
                    let g3 = as3(&g);
                    let (n, _, s) = g3.dim();
                    let t = self.nodes[x.0].value.shape()[1];
                    let stride = k / 2;
                    let mut gx = Array2::<f64>::zeros((n, t));
                    for si in 0..s {
                        for kk in 0..k {
                            let ti = si * stride + kk;
                            if ti < t {
                                for c in 0..n {
                                    gx[[c, ti]] += g3[[c, kk, si]];
                                }
                            }
                        }
                    }
                    gx
                };
                self.accumulate(x, gx.into_dyn());
            }
            Op::UnchunkOp { x, coverage } => {
                let gx = {
                    let g2 = as2(&g);
                    let xshape = self.nodes[x.0].value.shape().to_vec();
                    let (n, k, s) = (xshape[0], xshape[1], xshape[2]);
                    let stride = k / 2;
                    let t_orig = g2.dim().1;
                    let mut gx = Array3::<f64>::zeros((n, k, s));
                    for si in 0..s {
                        for kk in 0..k {
                            let ti = si * stride + kk;
                            if ti < t_orig {
                                for c in 0..n {
                                    gx[[c, kk, si]] = g2[[c, ti]] / coverage[ti];
                                }
                            }
                        }
                    }
                    gx
                };
                self.accumulate(x, gx.into_dyn());
            }
            Op::FoldOp(x) => {
                let gx = {
                    let xshape = self.nodes[x.0].value.shape().to_vec();
                    let (h, t) = (xshape[0], xshape[1]);
                    let g1 = g.view().into_shape_with_order(h * t).unwrap();
                    let mut gx = Array2::<f64>::zeros((h, t));
                    for ti in 0..t {
                        for ii in 0..h {
                            gx[[ii, ti]] = g1[ti * h + ii];
                        }
                    }
                    gx
                };
                self.accumulate(x, gx.into_dyn());
            }
            Op::PowerSpec { x, cfg, spectra } => {
                let gx = {
                    let g2 = as2(&g);
                    let xlen = self.nodes[x.0].value.len();
                    let bins = cfg.fft_size / 2 + 1;
                    let win = make_window(cfg.window, cfg.win_len);
                    let mut planner = FftPlanner::<f64>::new();
                    let fft = planner.plan_fft_forward(cfg.fft_size);
                    let mut gx = Array1::<f64>::zeros(xlen);
                    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
                    for f in 0..cfg.n_frames {
                        for v in buf.iter_mut() {
                            *v = Complex::new(0.0, 0.0);
                        }
                        for k in 0..bins {
                            buf[k] = spectra[[f, k]].conj() * g2[[f, k]];
                        }
                        fft.process(&mut buf);
                        let start = cfg.start_offset + (f * cfg.hop) as isize;
                        for m in 0..cfg.win_len {
                            let idx = start + m as isize;
                            if idx >= 0 && (idx as usize) < xlen {
                                gx[idx as usize] += 2.0 * buf[m].re * win[m];
                            }
                        }
                    }
                    gx
                };
                self.accumulate(x, gx.into_dyn());
            }
        }
    }
}

/// Chunk layout shared with the non-autodiff signal path:
/// `(num_chunks, padded_len)` for time `t` and even `chunk_len`.
pub fn chunk_layout(t: usize, chunk_len: usize) -> (usize, usize) {
    let stride = chunk_len / 2;
    let s = if t <= chunk_len {
        1
    } else {
        (t - chunk_len).div_ceil(stride) + 1
    };
    (s, chunk_len + (s - 1) * stride)
}

pub fn make_window(kind: Window, len: usize) -> Vec<f64> {
    match kind {
        Window::Rect => vec![1.0; len],
        Window::Hann => (0..len)
            .map(|i| {
                let x = std::f64::consts::PI * i as f64 / len as f64;
                x.sin() * x.sin()
            })
            .collect(),
    }
}
