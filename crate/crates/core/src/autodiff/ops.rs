use super::{Node, Op, Result, Var};

/// sRGB linear-segment threshold in linear space.
pub(crate) const SRGB_LINEAR_CUTOFF: f64 = 0.0031308;
/// Image of [`SRGB_LINEAR_CUTOFF`] under the linear segment; decoding below
/// this value uses the linear segment so the pair is an exact inverse.
pub(crate) const SRGB_ENCODED_CUTOFF: f64 = 12.92 * SRGB_LINEAR_CUTOFF;

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Sigmoid,
    Softplus,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Square,
    Abs,
    Recip,
    Pow(f64),
    Clamp(f64, f64),
    SrgbEncode,
    SrgbDecode,
    ReinhardEncode,
    ReinhardDecode,
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Abs => "abs",
            Unary::Recip => "recip",
            Unary::Pow(_) => "pow",
            Unary::Clamp(..) => "clamp",
            Unary::SrgbEncode => "srgb_encode",
            Unary::SrgbDecode => "srgb_decode",
            Unary::ReinhardEncode => "reinhard_encode",
            Unary::ReinhardDecode => "reinhard_decode",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Recip => 1.0 / x,
            Unary::Pow(p) => x.powf(p),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::SrgbEncode => {
                if x <= SRGB_LINEAR_CUTOFF {
                    12.92 * x
                } else {
                    // Same curve, arranged so that 1 maps to exactly 1.
                    1.0 + 1.055 * (x.powf(1.0 / 2.4) - 1.0)
                }
            }
            Unary::SrgbDecode => {
                if x <= SRGB_ENCODED_CUTOFF {
                    x / 12.92
                } else {
                    ((x + 0.055) / 1.055).powf(2.4)
                }
            }
            Unary::ReinhardEncode => x / (1.0 + x),
            Unary::ReinhardDecode => x / (1.0 - x),
        }
    }

    /// Derivative at input `x` with output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => Unary::Sigmoid.eval(x),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Recip => -y * y,
            Unary::Pow(p) => p * x.powf(p - 1.0),
            Unary::Clamp(lo, hi) => {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::SrgbEncode => {
                if x <= SRGB_LINEAR_CUTOFF {
                    12.92
                } else {
                    1.055 / 2.4 * x.powf(1.0 / 2.4 - 1.0)
                }
            }
            Unary::SrgbDecode => {
                if x <= SRGB_ENCODED_CUTOFF {
                    1.0 / 12.92
                } else {
                    2.4 / 1.055 * ((x + 0.055) / 1.055).powf(1.4)
                }
            }
            Unary::ReinhardEncode => 1.0 / ((1.0 + x) * (1.0 + x)),
            Unary::ReinhardDecode => 1.0 / ((1.0 - x) * (1.0 - x)),
        }
    }
}

/// `c (+)= A * B` with arbitrary strides on `A` and `B`; `c` is row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PatchGeom {
    n: usize,
    h: usize,
    w: usize,
    pub(crate) c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    pub(crate) ho: usize,
    pub(crate) wo: usize,
}

impl PatchGeom {
    pub(crate) fn new(n: usize, h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            n,
            h,
            w,
            c,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    /// Calls `f(out_offset, in_offset)` for each in-bounds (pixel, tap) pair;
    /// both offsets address runs of `c` contiguous values.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (c, k) = (self.c, self.k);
        let row_len = k * k * c;
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let out_row = ((b * self.ho + oy) * self.wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * c;
                            f(out_row + (ky * k + kx) * c, src);
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn forward(&self, input: &[f64]) -> Vec<f64> {
        let c = self.c;
        let mut out = vec![0.0; self.n * self.ho * self.wo * self.k * self.k * c];
        self.for_each(|dst, src| out[dst..dst + c].copy_from_slice(&input[src..src + c]));
        out
    }

    pub(crate) fn backward(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let c = self.c;
        self.for_each(|dst, src| {
            for (gi, go) in grad_in[src..src + c].iter_mut().zip(&grad_out[dst..dst + c]) {
                *gi += go;
            }
        });
    }
}

#[derive(Debug, Clone)]
pub(crate) struct UpsampleGeom {
    n: usize,
    h: usize,
    w: usize,
    pub(crate) c: usize,
    ytaps: Vec<(usize, usize, f64)>,
    xtaps: Vec<(usize, usize, f64)>,
}

/// Two-tap bilinear weights `(i0, i1, frac)` for each output coordinate.
fn taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl UpsampleGeom {
    pub(crate) fn new(n: usize, h: usize, w: usize, c: usize, factor: usize) -> Self {
        Self {
            n,
            h,
            w,
            c,
            ytaps: taps(h, factor),
            xtaps: taps(w, factor),
        }
    }

    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, [(usize, f64); 4])) {
        let (wo, c) = (self.xtaps.len(), self.c);
        for b in 0..self.n {
            for (oy, &(y0, y1, fy)) in self.ytaps.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.xtaps.iter().enumerate() {
                    let dst = ((b * self.ytaps.len() + oy) * wo + ox) * c;
                    let at = |y: usize, x: usize| ((b * self.h + y) * self.w + x) * c;
                    f(
                        dst,
                        [
                            (at(y0, x0), (1.0 - fy) * (1.0 - fx)),
                            (at(y0, x1), (1.0 - fy) * fx),
                            (at(y1, x0), fy * (1.0 - fx)),
                            (at(y1, x1), fy * fx),
                        ],
                    );
                }
            }
        }
    }

    pub(crate) fn forward(&self, input: &[f64]) -> Vec<f64> {
        let c = self.c;
        let mut out = vec![0.0; self.n * self.ytaps.len() * self.xtaps.len() * c];
        self.for_each(|dst, taps| {
            let o = &mut out[dst..dst + c];
            for (src, wgt) in taps {
                if wgt != 0.0 {
                    for (v, x) in o.iter_mut().zip(&input[src..src + c]) {
                        *v += wgt * x;
                    }
                }
            }
        });
        out
    }

    pub(crate) fn backward(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let c = self.c;
        self.for_each(|dst, taps| {
            let g = &grad_out[dst..dst + c];
            for (src, wgt) in taps {
                if wgt != 0.0 {
                    for (v, x) in grad_in[src..src + c].iter_mut().zip(g) {
                        *v += wgt * x;
                    }
                }
            }
        });
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].tracked {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

/// Propagates `g` (gradient of node `idx`) into its parents.
pub(super) fn backprop(nodes: &[Node], idx: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let out = nodes[idx].value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match op {
        Op::Input => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |s| add_into(s, g));
            accumulate(nodes, grads, *b, |s| add_into(s, g));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |s| add_into(s, g));
            accumulate(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |s| {
                for ((x, gy), w) in s.iter_mut().zip(g).zip(vb) {
                    *x += gy * w;
                }
            });
            accumulate(nodes, grads, *b, |s| {
                for ((x, gy), w) in s.iter_mut().zip(g).zip(va) {
                    *x += gy * w;
                }
            });
        }
        Op::AddRow(a, row) => {
            accumulate(nodes, grads, *a, |s| add_into(s, g));
            let cols = nodes[row.0].value.len();
            accumulate(nodes, grads, *row, |s| {
                for chunk in g.chunks(cols) {
                    add_into(s, chunk);
                }
            });
        }
        Op::ScaleBy(a, k) => {
            let kv = val(*k)[0];
            let va = val(*a);
            accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += kv * y));
            accumulate(nodes, grads, *k, |s| s[0] += g.iter().zip(va).map(|(x, y)| x * y).sum::<f64>());
        }
        Op::Scale(a, k) => accumulate(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y)),
        Op::Offset(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, |s| add_into(s, g)),
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (va, vb) = (val(*a), val(*b));
            // dA = G * B^T, dB = A^T * G
            accumulate(nodes, grads, *a, |s| gemm(m, n, k, g, (n, 1), vb, (1, n), s, true));
            accumulate(nodes, grads, *b, |s| gemm(k, m, n, va, (1, k), g, (n, 1), s, true));
        }
        Op::Map(a, f) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * f.derivative(x[i], out[i]);
                }
            });
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, |s| s.iter_mut().for_each(|x| *x += g[0])),
        Op::Norm(a) => {
            let (x, y) = (val(*a), out[0]);
            if y > 0.0 {
                accumulate(nodes, grads, *a, |s| s.iter_mut().zip(x).for_each(|(d, xi)| *d += g[0] * xi / y));
            }
        }
        Op::RowNorms(a) => {
            let x = val(*a);
            let cols = x.len() / out.len();
            accumulate(nodes, grads, *a, |s| {
                for (r, (&y, &gy)) in out.iter().zip(g).enumerate() {
                    if y > 0.0 {
                        for j in r * cols..(r + 1) * cols {
                            s[j] += gy * x[j] / y;
                        }
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let cols = *nodes[idx].value.shape().last().unwrap_or(&1);
            accumulate(nodes, grads, *a, |s| {
                for ((srow, yrow), grow) in s.chunks_mut(cols).zip(out.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gy)| y * gy).sum();
                    for j in 0..cols {
                        srow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::Gather(a, indices) => accumulate(nodes, grads, *a, |s| {
            for (&i, gy) in indices.iter().zip(g) {
                s[i] += gy;
            }
        }),
        Op::Patches(a, geom) => accumulate(nodes, grads, *a, |s| geom.backward(g, s)),
        Op::Upsample(a, geom) => accumulate(nodes, grads, *a, |s| geom.backward(g, s)),
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
