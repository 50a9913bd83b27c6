//! Minimal NCHW layer library with hand-written backward passes.
//!
//! Every layer supports two entry points: [`Layer::infer`] takes `&self`
//! and keeps no state, [`Layer::forward`] caches what [`Layer::backward`]
//! needs. Gradients accumulate into [`Param::grad`] until zeroed.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// A named parameter tensor. Non-trainable entries hold running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>, trainable: bool) -> Self {
        let len = shape.iter().product();
        assert_eq!(value.len(), len);
        Self {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; len],
            trainable,
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: f32, trainable: bool) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![v; len], trainable)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub trait Layer: Send + Sync {
    fn infer(&self, x: Tensor) -> Tensor;
    fn forward(&mut self, x: Tensor) -> Tensor;
    /// Consumes the gradient of the output, returns the gradient of the input.
    fn backward(&mut self, grad: Tensor) -> Tensor;
    fn params<'a>(&'a self, out: &mut Vec<&'a Param>);
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He normal, fan-in mode, for layers followed by a rectifier.
    Kaiming,
    /// Glorot uniform over fan-in + fan-out.
    Xavier,
    /// Zero-mean normal with a fixed standard deviation.
    Normal(f64),
}

/// `C = A (m x k) * B (k x n) + beta * C`, all row-major with the given row strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe dense
    // row-major (or transposed) matrices that stay within those slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Writes the transpose of the row-major `rows x cols` matrix `src` into `dst`.
fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut Vec<f32>) {
    const B: usize = 32;
    dst.resize(rows * cols, 0.0);
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

fn out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub struct Conv2d {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    /// Skip the input gradient (first layer of the network).
    input_grad: bool,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor>,
}

/// Upper bound on im2col buffer size, in floats.
const COL_BUDGET: usize = 1 << 22;
/// Column count past which batching samples into one product stops paying off.
const TARGET_COLUMNS: usize = 4096;

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let fan_out = out_c * kernel * kernel;
        let len = out_c * fan_in;
        let value: Vec<f32> = match init {
            Init::Kaiming => {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..len).map(|_| normal.sample(rng) as f32).collect()
            }
            Init::Xavier => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..len).map(|_| rng.random_range(-limit..limit) as f32).collect()
            }
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..len).map(|_| normal.sample(rng) as f32).collect()
            }
        };
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            input_grad: true,
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_c, in_c, kernel, kernel],
                value,
                true,
            ),
            bias: bias.then(|| Param::filled(format!("{name}.bias"), vec![out_c], 0.0, true)),
            cache: None,
        }
    }

    pub fn without_input_grad(mut self) -> Self {
        self.input_grad = false;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.out_c
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            out_dim(h, self.kernel, self.stride, self.pad),
            out_dim(w, self.kernel, self.stride, self.pad),
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Samples unrolled together: small planes are batched up to a few
    /// thousand columns so the matrix product stays efficient.
    fn chunk(&self, ohw: usize) -> usize {
        let budget = (COL_BUDGET / (self.in_c * self.kernel * self.kernel * ohw).max(1)).max(1);
        TARGET_COLUMNS.div_ceil(ohw).min(budget).max(1)
    }

    /// Unrolls sample `x` (`in_c x h x w`) into columns `col[row][col_off + p]`
    /// where `row` spans `(c, ky, kx)` and `p` the output positions.
    fn im2col(&self, x: &[f32], h: usize, w: usize, col: &mut [f32], ld: usize, col_off: usize) {
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        for c in 0..self.in_c {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * ld + col_off..row * ld + col_off + oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out_row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        if self.stride == 1 {
                            // ix = ox + kx - pad
                            let shift = kx as isize - self.pad as isize;
                            let lo = (-shift).clamp(0, ow as isize) as usize;
                            let hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                            out_row[..lo].iter_mut().for_each(|v| *v = 0.0);
                            if hi > lo {
                                let s0 = (lo as isize + shift) as usize;
                                out_row[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                            }
                            out_row[hi.max(lo)..].iter_mut().for_each(|v| *v = 0.0);
                        } else {
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                *v = if ix < 0 || ix >= w as isize {
                                    0.0
                                } else {
                                    src[ix as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds columns back onto the input gradient of one sample.
    fn col2im(&self, col: &[f32], ld: usize, col_off: usize, h: usize, w: usize, dx: &mut [f32]) {
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        for c in 0..self.in_c {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * ld + col_off..row * ld + col_off + oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let in_row = &src[oy * ow..(oy + 1) * ow];
                        if self.stride == 1 {
                            let shift = kx as isize - self.pad as isize;
                            let lo = (-shift).clamp(0, ow as isize) as usize;
                            let hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                            if hi > lo {
                                let d0 = (lo as isize + shift) as usize;
                                for (d, &g) in dst[d0..d0 + hi - lo].iter_mut().zip(&in_row[lo..hi]) {
                                    *d += g;
                                }
                            }
                            continue;
                        }
                        for (ox, &g) in in_row.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    fn compute(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "{}: input channels", self.weight.name);
        let (oh, ow) = self.output_size(x.h, x.w);
        let ohw = oh * ow;
        let ckk = self.in_c * self.kernel * self.kernel;
        let mut out = Tensor::zeros(x.n, self.out_c, oh, ow);
        if self.is_pointwise() {
            for i in 0..x.n {
                gemm(
                    self.out_c,
                    ckk,
                    ohw,
                    &self.weight.value,
                    false,
                    x.sample(i),
                    false,
                    0.0,
                    out.sample_mut(i),
                );
            }
        } else {
            let chunk = self.chunk(ohw);
            let mut col = Vec::new();
            let mut tmp = Vec::new();
            let mut start = 0;
            while start < x.n {
                let b = chunk.min(x.n - start);
                let ld = b * ohw;
                col.resize(ckk * ld, 0.0);
                if b == 1 {
                    self.im2col(x.sample(start), x.h, x.w, &mut col, ld, 0);
                    gemm(self.out_c, ckk, ld, &self.weight.value, false, &col, false, 0.0, out.sample_mut(start));
                    start += 1;
                    continue;
                }
                tmp.resize(self.out_c * ld, 0.0);
                for s in 0..b {
                    self.im2col(x.sample(start + s), x.h, x.w, &mut col, ld, s * ohw);
                }
                gemm(self.out_c, ckk, ld, &self.weight.value, false, &col, false, 0.0, &mut tmp);
                for s in 0..b {
                    let dst = out.sample_mut(start + s);
                    for o in 0..self.out_c {
                        dst[o * ohw..(o + 1) * ohw]
                            .copy_from_slice(&tmp[o * ld + s * ohw..o * ld + (s + 1) * ohw]);
                    }
                }
                start += b;
            }
        }
        if let Some(bias) = &self.bias {
            for i in 0..out.n {
                let sample = out.sample_mut(i);
                for (o, &b) in bias.value.iter().enumerate() {
                    sample[o * ohw..(o + 1) * ohw].iter_mut().for_each(|v| *v += b);
                }
            }
        }
        out
    }
}

impl Layer for Conv2d {
    fn infer(&self, x: Tensor) -> Tensor {
        self.compute(&x)
    }

    fn forward(&mut self, x: Tensor) -> Tensor {
        let out = self.compute(&x);
        self.cache = Some(x);
        out
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let x = self.cache.take().expect("Conv2d::backward without forward");
        let ohw = grad.plane();
        let ckk = self.in_c * self.kernel * self.kernel;
        if let Some(bias) = &mut self.bias {
            for i in 0..grad.n {
                let g = grad.sample(i);
                for (o, db) in bias.grad.iter_mut().enumerate() {
                    *db += g[o * ohw..(o + 1) * ohw].iter().sum::<f32>();
                }
            }
        }
        let mut dx = if self.input_grad {
            Tensor::zeros(x.n, x.c, x.h, x.w)
        } else {
            Tensor::zeros(0, 0, 0, 0)
        };

        if self.is_pointwise() {
            for i in 0..x.n {
                // dW += dY (out x hw) * X^T (hw x in)
                gemm(self.out_c, ohw, ckk, grad.sample(i), false, x.sample(i), true, 1.0, &mut self.weight.grad);
                if self.input_grad {
                    gemm(ckk, self.out_c, ohw, &self.weight.value, true, grad.sample(i), false, 0.0, dx.sample_mut(i));
                }
            }
            return dx;
        }

        let chunk = self.chunk(ohw);
        let mut col = Vec::new();
        let mut dy_buf = Vec::new();
        let mut col_t = Vec::new();
        let mut start = 0;
        while start < x.n {
            let b = chunk.min(x.n - start);
            let ld = b * ohw;
            col.resize(ckk * ld, 0.0);
            let dy: &[f32] = if b == 1 {
                self.im2col(x.sample(start), x.h, x.w, &mut col, ld, 0);
                grad.sample(start)
            } else {
                dy_buf.resize(self.out_c * ld, 0.0);
                for s in 0..b {
                    self.im2col(x.sample(start + s), x.h, x.w, &mut col, ld, s * ohw);
                    let g = grad.sample(start + s);
                    for o in 0..self.out_c {
                        dy_buf[o * ld + s * ohw..o * ld + (s + 1) * ohw]
                            .copy_from_slice(&g[o * ohw..(o + 1) * ohw]);
                    }
                }
                &dy_buf
            };
            if ld >= TARGET_COLUMNS {
                // A long shared dimension makes the transposed-operand product
                // slow; transposing the columns first is cheaper.
                transpose(&col, ckk, ld, &mut col_t);
                gemm(self.out_c, ld, ckk, dy, false, &col_t, false, 1.0, &mut self.weight.grad);
            } else {
                gemm(self.out_c, ld, ckk, dy, false, &col, true, 1.0, &mut self.weight.grad);
            }
            if self.input_grad {
                // dcol = W^T (ckk x out) * dY (out x ld); reuse the column buffer.
                gemm(ckk, self.out_c, ld, &self.weight.value, true, dy, false, 0.0, &mut col);
                for s in 0..b {
                    let (h, w) = (x.h, x.w);
                    self.col2im(&col, ld, s * ohw, h, w, dx.sample_mut(start + s));
                }
            }
            start += b;
        }
        dx
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }
}

#[derive(Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn infer(&self, mut x: Tensor) -> Tensor {
        x.data.iter_mut().for_each(|v| *v = v.max(0.0));
        x
    }

    fn forward(&mut self, mut x: Tensor) -> Tensor {
        self.mask = x.data.iter().map(|&v| v > 0.0).collect();
        x.data.iter_mut().for_each(|v| *v = v.max(0.0));
        x
    }

    fn backward(&mut self, mut grad: Tensor) -> Tensor {
        assert_eq!(grad.data.len(), self.mask.len(), "Relu::backward shape");
        for (g, &m) in grad.data.iter_mut().zip(&self.mask) {
            if !m {
                *g = 0.0;
            }
        }
        grad
    }

    fn params<'a>(&'a self, _: &mut Vec<&'a Param>) {}
    fn params_mut<'a>(&'a mut self, _: &mut Vec<&'a mut Param>) {}
}

/// Max pooling. With `ceil_mode` partial windows at the border are kept, so
/// a stride-2 pool maps `h` to `ceil(h / 2)`.
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    pad: usize,
    ceil_mode: bool,
    argmax: Vec<u32>,
    input_shape: [usize; 4],
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize, ceil_mode: bool) -> Self {
        Self {
            kernel,
            stride,
            pad,
            ceil_mode,
            argmax: Vec::new(),
            input_shape: [0; 4],
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let dim = |d: usize| {
            let span = d + 2 * self.pad - self.kernel;
            if self.ceil_mode {
                let mut o = span.div_ceil(self.stride) + 1;
                // the last window must start inside the image or left padding
                if (o - 1) * self.stride >= d + self.pad {
                    o -= 1;
                }
                o
            } else {
                span / self.stride + 1
            }
        };
        (dim(h), dim(w))
    }

    fn compute(&self, x: &Tensor, mut argmax: Option<&mut Vec<u32>>) -> Tensor {
        let (oh, ow) = self.output_size(x.h, x.w);
        let mut out = Tensor::zeros(x.n, x.c, oh, ow);
        if let Some(a) = argmax.as_deref_mut() {
            a.clear();
            a.reserve(out.data.len());
        }
        for (plane_in, plane_out) in x
            .data
            .chunks_exact(x.plane())
            .zip(out.data.chunks_exact_mut(oh * ow))
        {
            for oy in 0..oh {
                let y0 = (oy * self.stride) as isize - self.pad as isize;
                for ox in 0..ow {
                    let x0 = (ox * self.stride) as isize - self.pad as isize;
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for ky in 0..self.kernel as isize {
                        let iy = y0 + ky;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel as isize {
                            let ix = x0 + kx;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let idx = iy as usize * x.w + ix as usize;
                            let v = plane_in[idx];
                            if v > best {
                                best = v;
                                best_idx = idx as u32;
                            }
                        }
                    }
                    plane_out[oy * ow + ox] = best;
                    if let Some(a) = argmax.as_deref_mut() {
                        a.push(best_idx);
                    }
                }
            }
        }
        out
    }
}

impl Layer for MaxPool2d {
    fn infer(&self, x: Tensor) -> Tensor {
        self.compute(&x, None)
    }

    fn forward(&mut self, x: Tensor) -> Tensor {
        let mut argmax = std::mem::take(&mut self.argmax);
        let out = self.compute(&x, Some(&mut argmax));
        self.argmax = argmax;
        self.input_shape = x.shape();
        out
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let [n, c, h, w] = self.input_shape;
        let mut dx = Tensor::zeros(n, c, h, w);
        let out_plane = grad.plane();
        for (p, (g_plane, dx_plane)) in grad
            .data
            .chunks_exact(out_plane)
            .zip(dx.data.chunks_exact_mut(h * w))
            .enumerate()
        {
            let arg = &self.argmax[p * out_plane..(p + 1) * out_plane];
            for (&g, &a) in g_plane.iter().zip(arg) {
                dx_plane[a as usize] += g;
            }
        }
        dx
    }

    fn params<'a>(&'a self, _: &mut Vec<&'a Param>) {}
    fn params_mut<'a>(&'a mut self, _: &mut Vec<&'a mut Param>) {}
}

/// Batch normalization over `(N, H, W)` per channel, running statistics kept
/// for inference.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    momentum: f32,
    eps: f32,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: [usize; 4],
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0, true),
            beta: Param::filled(format!("{name}.beta"), vec![channels], 0.0, true),
            running_mean: Param::filled(format!("{name}.running_mean"), vec![channels], 0.0, false),
            running_var: Param::filled(format!("{name}.running_var"), vec![channels], 1.0, false),
            momentum: 0.1,
            eps: 1e-5,
            xhat: Vec::new(),
            inv_std: Vec::new(),
            shape: [0; 4],
        }
    }
}

impl Layer for BatchNorm2d {
    fn infer(&self, mut x: Tensor) -> Tensor {
        let plane = x.plane();
        let c = x.c;
        for (i, chunk) in x.data.chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            let scale = self.gamma.value[ch] / (self.running_var.value[ch] + self.eps).sqrt();
            let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
            chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        x
    }

    fn forward(&mut self, mut x: Tensor) -> Tensor {
        let plane = x.plane();
        let c = x.c;
        let count = (x.n * plane) as f64;
        let mut mean = vec![0f64; c];
        let mut var = vec![0f64; c];
        for (i, chunk) in x.data.chunks_exact(plane).enumerate() {
            mean[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, chunk) in x.data.chunks_exact(plane).enumerate() {
            let m = mean[i % c];
            var[i % c] += chunk.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count);
        self.inv_std = var.iter().map(|&v| (1.0 / (v + self.eps as f64).sqrt()) as f32).collect();
        let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..c {
            let rm = &mut self.running_mean.value[ch];
            *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[ch] as f32;
            let rv = &mut self.running_var.value[ch];
            *rv = (1.0 - self.momentum) * *rv + self.momentum * (var[ch] * unbiased) as f32;
        }
        self.xhat.clear();
        self.xhat.reserve(x.data.len());
        for (i, chunk) in x.data.chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            let m = mean[ch] as f32;
            let inv = self.inv_std[ch];
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for v in chunk.iter_mut() {
                let xh = (*v - m) * inv;
                self.xhat.push(xh);
                *v = xh * g + b;
            }
        }
        self.shape = x.shape();
        x
    }

    fn backward(&mut self, mut grad: Tensor) -> Tensor {
        let plane = grad.plane();
        let c = grad.c;
        let count = (grad.n * plane) as f32;
        let mut sum_g = vec![0f32; c];
        let mut sum_gx = vec![0f32; c];
        for (i, (g, xh)) in grad
            .data
            .chunks_exact(plane)
            .zip(self.xhat.chunks_exact(plane))
            .enumerate()
        {
            let ch = i % c;
            sum_g[ch] += g.iter().sum::<f32>();
            sum_gx[ch] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>();
        }
        for ch in 0..c {
            self.beta.grad[ch] += sum_g[ch];
            self.gamma.grad[ch] += sum_gx[ch];
        }
        for (i, (g, xh)) in grad
            .data
            .chunks_exact_mut(plane)
            .zip(self.xhat.chunks_exact(plane))
            .enumerate()
        {
            let ch = i % c;
            let k = self.gamma.value[ch] * self.inv_std[ch] / count;
            let (sg, sgx) = (sum_g[ch], sum_gx[ch]);
            for (gv, &x) in g.iter_mut().zip(xh) {
                *gv = k * (count * *gv - sg - x * sgx);
            }
        }
        grad
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.extend([&self.gamma, &self.beta, &self.running_mean, &self.running_var]);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
        out.push(&mut self.running_mean);
        out.push(&mut self.running_var);
    }
}

/// Replicates a single-channel input to `channels` channels.
pub struct ChannelRepeat {
    channels: usize,
}

impl ChannelRepeat {
    pub fn new(channels: usize) -> Self {
        Self { channels }
    }
}

impl Layer for ChannelRepeat {
    fn infer(&self, x: Tensor) -> Tensor {
        assert_eq!(x.c, 1, "ChannelRepeat expects one input channel");
        let mut out = Tensor::zeros(x.n, self.channels, x.h, x.w);
        let plane = x.plane();
        for i in 0..x.n {
            let src = x.sample(i);
            for dst in out.sample_mut(i).chunks_exact_mut(plane) {
                dst.copy_from_slice(src);
            }
        }
        out
    }

    fn forward(&mut self, x: Tensor) -> Tensor {
        self.infer(x)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let plane = grad.plane();
        let mut dx = Tensor::zeros(grad.n, 1, grad.h, grad.w);
        for i in 0..grad.n {
            let dst = dx.sample_mut(i);
            for src in grad.sample(i).chunks_exact(plane) {
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        dx
    }

    fn params<'a>(&'a self, _: &mut Vec<&'a Param>) {}
    fn params_mut<'a>(&'a mut self, _: &mut Vec<&'a mut Param>) {}
}

#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn infer(&self, x: Tensor) -> Tensor {
        self.layers.iter().fold(x, |acc, l| l.infer(acc))
    }

    fn forward(&mut self, x: Tensor) -> Tensor {
        self.layers.iter_mut().fold(x, |acc, l| l.forward(acc))
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        self.layers.iter_mut().rev().fold(grad, |acc, l| l.backward(acc))
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        for l in &self.layers {
            l.params(out);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for l in &mut self.layers {
            l.params_mut(out);
        }
    }
}

/// `relu(body(x) + shortcut(x))`, where the shortcut is the identity when absent.
pub struct Residual {
    body: Sequential,
    shortcut: Option<Sequential>,
    relu: Relu,
}

impl Residual {
    pub fn new(body: Sequential, shortcut: Option<Sequential>) -> Self {
        Self {
            body,
            shortcut,
            relu: Relu::new(),
        }
    }
}

impl Layer for Residual {
    fn infer(&self, x: Tensor) -> Tensor {
        let skip = match &self.shortcut {
            Some(s) => s.infer(x.clone()),
            None => x.clone(),
        };
        let mut out = self.body.infer(x);
        out.add_assign(&skip);
        self.relu.infer(out)
    }

    fn forward(&mut self, x: Tensor) -> Tensor {
        let skip = match &mut self.shortcut {
            Some(s) => s.forward(x.clone()),
            None => x.clone(),
        };
        let mut out = self.body.forward(x);
        out.add_assign(&skip);
        self.relu.forward(out)
    }

    fn backward(&mut self, grad: Tensor) -> Tensor {
        let grad = self.relu.backward(grad);
        let skip = match &mut self.shortcut {
            Some(s) => s.backward(grad.clone()),
            None => grad.clone(),
        };
        let mut dx = self.body.backward(grad);
        dx.add_assign(&skip);
        dx
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.body.params(out);
        if let Some(s) = &self.shortcut {
            s.params(out);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.body.params_mut(out);
        if let Some(s) = &mut self.shortcut {
            s.params_mut(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::from_vec(shape[0], shape[1], shape[2], shape[3], data)
    }

    /// Direct convolution used as an independent reference.
    fn naive_conv(x: &Tensor, conv: &Conv2d) -> Tensor {
        let (oh, ow) = conv.output_size(x.h, x.w);
        let k = conv.kernel;
        let mut out = Tensor::zeros(x.n, conv.out_c, oh, ow);
        for n in 0..x.n {
            for o in 0..conv.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[o]);
                        for c in 0..conv.in_c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((n * x.c + c) * x.h + iy as usize) * x.w + ix as usize];
                                    let wv = conv.weight.value[((o * conv.in_c + c) * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data[((n * conv.out_c + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (7, 2, 3)] {
            let mut conv = Conv2d::new("c", 3, 4, k, stride, pad, true, Init::Kaiming, &mut rng);
            if let Some(b) = &mut conv.bias {
                b.value = vec![0.1, -0.2, 0.3, 0.0];
            }
            let x = random_tensor(&mut rng, [2, 3, 9, 7]);
            let got = conv.infer(x.clone());
            let want = naive_conv(&x, &conv);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-4, "k={k} s={stride}: {a} vs {b}");
            }
        }
    }

    /// Finite-difference check of a layer's input and parameter gradients
    /// against the scalar objective `sum(out * probe)`.
    fn gradient_check(layer: &mut dyn Layer, x: Tensor, rng: &mut ChaCha8Rng) {
        let out = layer.forward(x.clone());
        let probe = random_tensor(rng, out.shape());
        let dx = layer.backward(probe.clone());
        let objective = |layer: &mut dyn Layer, x: Tensor| -> f64 {
            let y = layer.forward(x);
            y.data.iter().zip(&probe.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let h = 1e-2f32;
        for idx in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (objective(layer, xp) - objective(layer, xm)) / (2.0 * h as f64);
            let an = dx.data[idx] as f64;
            assert!((fd - an).abs() < 2e-2 * (1.0 + an.abs()), "input grad {idx}: fd {fd} vs {an}");
        }
        let mut grads: Vec<(String, Vec<f32>)> = Vec::new();
        {
            let mut ps = Vec::new();
            layer.params_mut(&mut ps);
            for p in ps.into_iter().filter(|p| p.trainable) {
                grads.push((p.name.clone(), p.grad.clone()));
            }
        }
        for (name, grad) in grads {
            for idx in (0..grad.len()).step_by(5) {
                let bump = |layer: &mut dyn Layer, delta: f32| {
                    let mut ps = Vec::new();
                    layer.params_mut(&mut ps);
                    let p = ps.into_iter().find(|p| p.name == name).unwrap();
                    p.value[idx] += delta;
                };
                bump(layer, h);
                let fp = objective(layer, x.clone());
                bump(layer, -2.0 * h);
                let fm = objective(layer, x.clone());
                bump(layer, h);
                let fd = (fp - fm) / (2.0 * h as f64);
                let an = grad[idx] as f64;
                assert!((fd - an).abs() < 2e-2 * (1.0 + an.abs()), "{name}[{idx}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let mut conv = Conv2d::new("c", 2, 3, k, stride, pad, true, Init::Kaiming, &mut rng);
            let x = random_tensor(&mut rng, [2, 2, 6, 5]);
            gradient_check(&mut conv, x, &mut rng);
        }
    }

    #[test]
    fn batchnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm2d::new("bn", 3);
        bn.gamma.value = vec![1.5, 0.7, -0.4];
        bn.beta.value = vec![0.1, 0.0, -0.3];
        let x = random_tensor(&mut rng, [3, 3, 4, 4]);
        gradient_check(&mut bn, x, &mut rng);
    }

    #[test]
    fn residual_block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut body = Sequential::new();
        body.push(Conv2d::new("a", 2, 4, 3, 2, 1, false, Init::Kaiming, &mut rng));
        body.push(Relu::new());
        body.push(Conv2d::new("b", 4, 4, 3, 1, 1, true, Init::Kaiming, &mut rng));
        let mut shortcut = Sequential::new();
        shortcut.push(Conv2d::new("s", 2, 4, 1, 2, 0, true, Init::Kaiming, &mut rng));
        let mut block = Residual::new(body, Some(shortcut));
        // shift inputs away from zero so the relu kinks are unlikely to be straddled
        let x = random_tensor(&mut rng, [1, 2, 6, 6]);
        gradient_check(&mut block, x, &mut rng);
    }

    #[test]
    fn maxpool_ceil_mode_and_routing() {
        let mut pool = MaxPool2d::new(2, 2, 0, true);
        assert_eq!(pool.output_size(5, 4), (3, 2));
        assert_eq!(pool.output_size(256, 256), (128, 128));
        let x = Tensor::from_vec(1, 1, 3, 3, vec![1., 5., 2., 3., 4., 0., 9., 8., 7.]);
        let y = pool.forward(x);
        assert_eq!(y.data, vec![5., 2., 9., 7.]);
        let dx = pool.backward(Tensor::from_vec(1, 1, 2, 2, vec![1., 2., 3., 4.]));
        assert_eq!(dx.data, vec![0., 1., 2., 0., 0., 0., 3., 0., 4.]);

        let stem_pool = MaxPool2d::new(3, 2, 1, false);
        assert_eq!(stem_pool.output_size(1664, 1280), (832, 640));
        assert_eq!(stem_pool.output_size(5, 5), (3, 3));
    }

    #[test]
    fn channel_repeat_sums_gradients() {
        let mut rep = ChannelRepeat::new(3);
        let x = Tensor::from_vec(1, 1, 1, 2, vec![1.0, 2.0]);
        let y = rep.forward(x);
        assert_eq!(y.data, vec![1., 2., 1., 2., 1., 2.]);
        let dx = rep.backward(Tensor::from_vec(1, 3, 1, 2, vec![1., 1., 2., 2., 3., 3.]));
        assert_eq!(dx.data, vec![6.0, 6.0]);
    }
}
