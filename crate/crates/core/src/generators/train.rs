use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_z_with, stack_images, stack_rows, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::autodiff::{AutodiffError, Graph, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::image::{ComponentTag, Image};
use crate::nn::{Optimizer, Parameterized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub r1_gamma: f64,
    /// R1 is applied every this many discriminator steps, scaled up to match.
    pub r1_interval: usize,
    /// Step length of the finite difference along the input gradient.
    pub r1_step: f64,
    pub discriminator: DiscriminatorConfig,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 8,
            lr: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            r1_gamma: 1.0,
            r1_interval: 4,
            r1_step: 1e-3,
            discriminator: DiscriminatorConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub g_loss: f64,
    pub d_loss: f64,
    /// Zero on steps without the penalty.
    pub r1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

fn check_dataset(dataset: &[Image], shape: (usize, usize, usize)) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (i, img) in dataset.iter().enumerate() {
        if img.shape() != shape {
            return Err(Error::Shape(format!("image {i} is {:?}, generator makes {shape:?}", img.shape())));
        }
        let (lo, hi) = img.min_max();
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::Domain(format!("image {i} has range [{lo}, {hi}]")));
        }
    }
    Ok(())
}

fn diverged(step: usize, what: &'static str) -> impl Fn(AutodiffError) -> Error {
    move |e| match e {
        AutodiffError::NonFinite { .. } => Error::Diverged { step, what },
        other => Error::Autodiff(other),
    }
}

/// Trains one generator/discriminator pair on tone-mapped component images
/// with the non-saturating logistic loss and a lazy R1 penalty.
pub fn train_gan(
    dataset: &[Image],
    config: GeneratorConfig,
    tag: ComponentTag,
    cfg: &GanConfig,
) -> Result<(Generator, Discriminator, TrainLog)> {
    train(dataset, config, vec![tag], cfg)
}

/// Trains a single generator on channel-stacked components. `single` is the
/// per-component config; the joint network is widened to about
/// `tags.len()` times its parameter count.
pub fn train_joint_gan(
    dataset: &[Image],
    single: &GeneratorConfig,
    tags: &[ComponentTag],
    cfg: &GanConfig,
) -> Result<(Generator, Discriminator, TrainLog)> {
    train(dataset, single.capacity_matched(tags.len()), tags.to_vec(), cfg)
}

fn train(
    dataset: &[Image],
    config: GeneratorConfig,
    tags: Vec<ComponentTag>,
    cfg: &GanConfig,
) -> Result<(Generator, Discriminator, TrainLog)> {
    if cfg.batch == 0 || cfg.r1_interval == 0 || !(cfg.lr > 0.0) || !(cfg.r1_step > 0.0) {
        return Err(Error::InvalidArgument("gan config needs positive batch, lr, r1_interval, r1_step".into()));
    }
    let shape = config.out_shape();
    check_dataset(dataset, shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen = Generator::new(config, tags, rng.gen())?;
    let mut disc = Discriminator::new(shape, &cfg.discriminator, rng.gen());
    let mut opt_g = Optimizer::adam(cfg.lr, cfg.beta1, cfg.beta2);
    let mut opt_d = Optimizer::adam(cfg.lr, cfg.beta1, cfg.beta2);
    let n = cfg.batch;
    let d_z = gen.config.d_z;
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let real: Vec<Image> = (0..n).map(|_| dataset[rng.gen_range(0..dataset.len())].clone()).collect();
        let real = stack_images(&real)?;
        let fake = generate(&gen, &mut rng, n, d_z)?;
        let with_r1 = cfg.r1_gamma > 0.0 && step % cfg.r1_interval == 0;
        let (d_loss, r1) = discriminator_step(&mut disc, &mut opt_d, &real, &fake, n, with_r1, cfg)
            .map_err(diverged(step, "discriminator loss"))?;
        let g_loss = generator_step(&mut gen, &disc, &mut opt_g, &mut rng, n).map_err(|e| match e {
            Error::Autodiff(a) => diverged(step, "generator loss")(a),
            other => other,
        })?;
        if !(g_loss.is_finite() && d_loss.is_finite() && r1.is_finite()) {
            return Err(Error::Diverged { step, what: "loss" });
        }
        log.steps.push(StepLog { g_loss, d_loss, r1 });
    }
    Ok((gen, disc, log))
}

fn sample_batch_z(rng: &mut ChaCha8Rng, n: usize, d_z: usize) -> Result<Tensor> {
    let zs = (0..n).map(|_| sample_z_with(rng, d_z, None)).collect::<Result<Vec<_>>>()?;
    stack_rows(zs.iter().map(|z| z.0.as_slice()), d_z)
}

fn generate(gen: &Generator, rng: &mut ChaCha8Rng, n: usize, d_z: usize) -> Result<Tensor> {
    let z = sample_batch_z(rng, n, d_z)?;
    let mut g = Graph::new();
    let vars = gen.bind(&mut g, false, false);
    let z = g.constant(z);
    let w = vars.map(&mut g, z)?;
    let x = vars.synthesize(&mut g, w, n)?;
    Ok(g.value(x).clone())
}

fn softplus_mean(g: &mut Graph, x: Var, negate: bool) -> crate::autodiff::Result<Var> {
    let x = if negate { g.neg(x)? } else { x };
    let s = g.map(x, Unary::Softplus)?;
    g.mean(s)
}

/// Unit input-gradient direction of the summed scores, per sample.
fn score_gradient_directions(disc: &Discriminator, real: &Tensor, n: usize) -> crate::autodiff::Result<Tensor> {
    let mut g = Graph::new();
    let vars = disc.net.bind(&mut g, false);
    let x = g.param(real.clone());
    let s = vars.forward(&mut g, x, n)?;
    let total = g.sum(s)?;
    g.backward(total)?;
    let mut grad = g.grad(x)?;
    let per = grad.len() / n;
    for chunk in grad.data_mut().chunks_mut(per) {
        let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = if norm > 1e-12 { 1.0 / norm } else { 0.0 };
        chunk.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(grad)
}

fn discriminator_step(
    disc: &mut Discriminator,
    opt: &mut Optimizer,
    real: &Tensor,
    fake: &Tensor,
    n: usize,
    with_r1: bool,
    cfg: &GanConfig,
) -> crate::autodiff::Result<(f64, f64)> {
    let shifted = if with_r1 {
        let u = score_gradient_directions(disc, real, n)?;
        let data = real.data().iter().zip(u.data()).map(|(x, d)| x + cfg.r1_step * d).collect();
        Some(Tensor::new(real.shape().to_vec(), data)?)
    } else {
        None
    };
    let mut g = Graph::new();
    let vars = disc.net.bind(&mut g, true);
    let xr = g.constant(real.clone());
    let xf = g.constant(fake.clone());
    let sr = vars.forward(&mut g, xr, n)?;
    let sf = vars.forward(&mut g, xf, n)?;
    let lf = softplus_mean(&mut g, sf, false)?;
    let lr = softplus_mean(&mut g, sr, true)?;
    let d_loss = g.add(lf, lr)?;
    let mut total = d_loss;
    let mut r1 = 0.0;
    if let Some(shifted) = shifted {
        // (D(x + h u) - D(x)) / h approximates |grad_x D(x)| along u.
        let xs = g.constant(shifted);
        let ss = vars.forward(&mut g, xs, n)?;
        let diff = g.sub(ss, sr)?;
        let slope = g.scale(diff, 1.0 / cfg.r1_step)?;
        let sq = g.map(slope, Unary::Square)?;
        let mean_sq = g.mean(sq)?;
        let pen = g.scale(mean_sq, 0.5 * cfg.r1_gamma * cfg.r1_interval as f64)?;
        r1 = g.scalar(mean_sq);
        total = g.add(total, pen)?;
    }
    g.backward(total)?;
    let grads = vars.params().iter().map(|&p| g.grad(p)).collect::<crate::autodiff::Result<Vec<_>>>()?;
    opt.step(&mut disc.net.tensors_mut(), &grads)?;
    Ok((g.scalar(d_loss), r1))
}

fn generator_step(
    gen: &mut Generator,
    disc: &Discriminator,
    opt: &mut Optimizer,
    rng: &mut ChaCha8Rng,
    n: usize,
) -> Result<f64> {
    let z = sample_batch_z(rng, n, gen.config.d_z)?;
    let mut g = Graph::new();
    let gv = gen.bind(&mut g, true, true);
    let dv = disc.net.bind(&mut g, false);
    let z = g.constant(z);
    let w = gv.map(&mut g, z)?;
    let x = gv.synthesize(&mut g, w, n)?;
    let s = dv.forward(&mut g, x, n)?;
    let loss = softplus_mean(&mut g, s, true)?;
    g.backward(loss)?;
    let grads = gv.params().iter().map(|&p| g.grad(p)).collect::<crate::autodiff::Result<Vec<_>>>()?;
    opt.step(&mut gen.tensors_mut(), &grads)?;
    Ok(g.scalar(loss))
}
