//! Dense and convolutional layers on top of [`crate::autodiff`], plus the
//! optimizers used for both latent and parameter updates.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Result, Tensor, Unary, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

pub(crate) fn randn(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite normal samples")
}

/// Binds a stored tensor into `g` as a tracked parameter or a constant.
pub fn bind(g: &mut Graph, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}

pub fn leaky(g: &mut Graph, x: Var) -> Result<Var> {
    g.map(x, Unary::LeakyRelu(LEAKY_SLOPE))
}

/// Anything holding named parameter tensors in a fixed order.
pub trait Parameterized {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Fully connected layer `y = x W + b` with `W` stored `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl Dense {
    /// He-style init scaled by `gain`.
    pub fn new(inputs: usize, outputs: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self {
            weight: randn(rng, &[inputs, outputs], gain / (inputs as f64).sqrt()),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DenseVars {
        DenseVars {
            weight: bind(g, &self.weight, trainable),
            bias: bind(g, &self.bias, trainable),
        }
    }
}

impl DenseVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }
}

/// Square-kernel convolution over NHWC maps, evaluated as a matmul on
/// unrolled patches. Weight layout is `(k*k*c_in, c_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    weight: Var,
    bias: Var,
    kernel: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let fan_in = kernel * kernel * c_in;
        Self {
            weight: randn(rng, &[fan_in, c_out], gain / (fan_in as f64).sqrt()),
            bias: Tensor::zeros(&[c_out]),
            kernel,
            stride,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ConvVars {
        ConvVars {
            weight: bind(g, &self.weight, trainable),
            bias: bind(g, &self.bias, trainable),
            kernel: self.kernel,
            stride: self.stride,
        }
    }
}

impl ConvVars {
    pub fn from_parts(weight: Var, bias: Var, kernel: usize, stride: usize) -> Self {
        Self {
            weight,
            bias,
            kernel,
            stride,
        }
    }

    pub fn weight(&self) -> Var {
        self.weight
    }

    pub fn bias(&self) -> Var {
        self.bias
    }

    /// Returns the output map and its spatial size. Padding keeps "same"
    /// geometry for stride 1 and halves it for stride 2.
    pub fn forward(&self, g: &mut Graph, x: Var, n: usize, h: usize, w: usize) -> Result<(Var, usize, usize)> {
        let pad = self.kernel / 2;
        let p = g.patches(x, n, h, w, self.kernel, self.stride, pad)?;
        let y = g.matmul(p, self.weight)?;
        let y = g.add_row(y, self.bias)?;
        let ho = (h + 2 * pad - self.kernel) / self.stride + 1;
        let wo = (w + 2 * pad - self.kernel) / self.stride + 1;
        Ok((y, ho, wo))
    }
}

/// Stride-2 conv stack followed by a dense head. Shared by the
/// discriminators (one output logit) and the encoders (`d_w` outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct DownNet {
    pub in_shape: (usize, usize, usize),
    pub convs: Vec<Conv2d>,
    pub head: Dense,
}

#[derive(Debug, Clone)]
pub struct DownNetVars {
    in_shape: (usize, usize, usize),
    convs: Vec<ConvVars>,
    head: DenseVars,
}

impl DownNet {
    pub fn new(in_shape: (usize, usize, usize), widths: &[usize], outputs: usize, rng: &mut impl Rng) -> Self {
        let (mut h, mut w, mut c) = in_shape;
        let mut convs = Vec::with_capacity(widths.len());
        for &width in widths {
            convs.push(Conv2d::new(c, width, 3, 2, 2f64.sqrt(), rng));
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            c = width;
        }
        Self {
            in_shape,
            convs,
            head: Dense::new(h * w * c, outputs, 1.0, rng),
        }
    }

    pub fn outputs(&self) -> usize {
        self.head.outputs()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DownNetVars {
        DownNetVars {
            in_shape: self.in_shape,
            convs: self.convs.iter().map(|c| c.bind(g, trainable)).collect(),
            head: self.head.bind(g, trainable),
        }
    }
}

impl DownNetVars {
    /// `x` is an NHWC batch laid out `(n*h*w, c)`; returns `(n, outputs)`.
    pub fn forward(&self, g: &mut Graph, x: Var, n: usize) -> Result<Var> {
        let (mut h, mut w, _) = self.in_shape;
        let mut x = x;
        for conv in &self.convs {
            let (y, ho, wo) = conv.forward(g, x, n, h, w)?;
            x = leaky(g, y)?;
            h = ho;
            w = wo;
        }
        let per = g.shape(x).iter().product::<usize>() / n;
        let flat = g.reshape(x, &[n, per])?;
        self.head.forward(g, flat)
    }
}

impl Parameterized for DownNet {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv.{i}.weight"), &c.weight));
            out.push((format!("conv.{i}.bias"), &c.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

impl DownNetVars {
    /// Tracked parameter nodes in [`Parameterized::tensors_mut`] order.
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(c.weight);
            out.push(c.bias);
        }
        out.push(self.head.weight);
        out.push(self.head.bias);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adaptive-moment (or plain) gradient descent over a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn adam(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(lr, 0.0, 0.0)
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64, beta1: f64, beta2: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::adam(lr, beta1, beta2),
            OptimizerKind::Sgd => Self::sgd(lr),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(AutodiffError::InvalidShape {
                shape: vec![params.len(), grads.len()],
                reason: "optimizer parameter/gradient count mismatch".into(),
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, gr)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != gr.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "optimizer",
                    lhs: p.shape().to_vec(),
                    rhs: gr.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, g) in data.iter_mut().zip(gr.data()) {
                        *x -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    for j in 0..data.len() {
                        let g = gr.data()[j];
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                        let mh = if bc1 > 0.0 { m[j] / bc1 } else { m[j] };
                        data[j] -= self.lr * mh / ((v[j] / bc2).sqrt() + self.eps);
                    }
                }
            }
            if !p.is_finite() {
                return Err(AutodiffError::NonFinite { op: "optimizer" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(2, 3, 3, 1, 1.0, &mut rng);
        let x = randn(&mut rng, &[5 * 4, 2], 1.0);
        let mut g = Graph::new();
        let cv = conv.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (y, ho, wo) = cv.forward(&mut g, xv, 1, 5, 4).unwrap();
        assert_eq!((ho, wo), (5, 4));
        let (w, xd) = (conv.weight.data(), x.data());
        for oy in 0..5 {
            for ox in 0..4 {
                for co in 0..3 {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                            if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += xd[(iy as usize * 4 + ix as usize) * 2 + ci] * w[((ky * 3 + kx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    let got = g.value(y).data()[(oy * 4 + ox) * 3 + co];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn strided_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(2, 2, 3, 2, 1.0, &mut rng);
        let x = randn(&mut rng, &[2 * 4 * 4, 2], 1.0);
        let err = grad_check(
            |g, v| {
                let cv = ConvVars {
                    weight: v[1],
                    bias: v[2],
                    kernel: 3,
                    stride: 2,
                };
                let (y, _, _) = cv.forward(g, v[0], 2, 4, 4)?;
                let y = g.map(y, Unary::Tanh)?;
                g.sum(y)
            },
            &[x, conv.weight.clone(), conv.bias.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Tensor::vector(vec![3.0, -2.0]);
        let mut opt = Optimizer::adam(0.1, 0.9, 0.999);
        for _ in 0..500 {
            let grad = Tensor::vector(p.data().iter().map(|x| 2.0 * x).collect());
            opt.step(&mut [&mut p], &[grad]).unwrap();
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2), "{:?}", p.data());
    }

    #[test]
    fn sgd_step_is_plain_descent() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut opt = Optimizer::sgd(0.5);
        opt.step(&mut [&mut p], &[Tensor::vector(vec![2.0])]).unwrap();
        assert_eq!(p.data(), &[0.0]);
    }
}
