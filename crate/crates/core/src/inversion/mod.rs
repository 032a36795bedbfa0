//! Joint latent optimization over several generators, encoder-based
//! initialization, generator fine-tuning around the recovered pivots, and
//! relighting by latent edits.

use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::forward_models::{decode_component, decode_var, ForwardModel};
use crate::generators::{latent_tensor, EditDirections, Generator, LatentW};
use crate::image::{ColorSpace, ComponentImage, ComponentTag, Image};
use crate::io::{self, Checkpoint};
use crate::metrics::MetricReport;
use crate::nn::{Optimizer, OptimizerKind};
use crate::priors::{build_bank, in_domain_var, knn_var, RegularizerChoice, RegularizerKind, SampleBank};

mod encoder;
mod pti;

pub use encoder::{encoder_init, synthetic_encoder_data, train_encoder, Encoder, EncoderConfig, EncoderSample};
pub use pti::{mean_anchor_score, pti_finetune, DLossForm, PtiConfig};

/// Truncation used when sampling banks and mean codes.
pub const PRIOR_TRUNCATION: f64 = 2.0;

/// Default number of codes in a sample bank.
pub const DEFAULT_BANK_SIZE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    /// Pixel mean squared error.
    #[default]
    Mse,
    /// Pixel MSE plus a weighted L1 penalty on finite-difference gradients
    /// of the residual.
    MsePlusGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub regularizer: RegularizerChoice,
    pub recon_loss: ReconLoss,
    /// Weight of the gradient term under [`ReconLoss::MsePlusGradient`].
    pub gradient_weight: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    /// Seeds sample banks and mean codes built for this run.
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 0.1,
            regularizer: RegularizerChoice::default(),
            recon_loss: ReconLoss::Mse,
            gradient_weight: 0.1,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.gradient_weight >= 0.0) {
            return Err(Error::InvalidArgument("gradient_weight must be nonnegative".into()));
        }
        self.regularizer.validate()
    }
}

/// Per-generator latent statistics used for initialization and
/// regularization.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub mean_w: LatentW,
    pub bank: Option<SampleBank>,
}

impl Prior {
    /// Mean code and a bank of `bank_size` codes, both from truncated draws.
    pub fn build(gen: &Generator, generator_id: &str, bank_size: usize, seed: u64) -> Result<Self> {
        let mean_w = gen.mean_w(bank_size, seed, Some(PRIOR_TRUNCATION))?;
        let mut bank = build_bank(gen, bank_size, seed, Some(PRIOR_TRUNCATION))?;
        bank.generator_id = generator_id.to_string();
        Ok(Self { mean_w, bank: Some(bank) })
    }

    pub fn mean_only(mean_w: LatentW) -> Self {
        Self { mean_w, bank: None }
    }

    fn regularizer(&self, g: &mut Graph, w: Var, choice: &RegularizerChoice) -> Result<Option<Var>> {
        match choice.kind {
            RegularizerKind::None => Ok(None),
            RegularizerKind::InDomain => Ok(Some(in_domain_var(g, w, &self.mean_w)?)),
            RegularizerKind::Knn => {
                let bank = self
                    .bank
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("knn regularizer needs a sample bank".into()))?;
                Ok(Some(knn_var(g, w, bank, choice.k, choice.scale)?))
            }
        }
    }
}

/// A differentiable map from one latent code to tone-mapped component nodes.
pub trait LatentDecoder {
    fn d_w(&self) -> usize;
    /// Components produced, in output order.
    fn tags(&self) -> Vec<ComponentTag>;
    /// `w` is `(1, d_w)`; each output is `(H*W, C)`.
    fn decode(&self, g: &mut Graph, w: Var) -> Result<Vec<Var>>;
}

/// Forms the display image from tone-mapped component nodes.
pub trait ImageFormation {
    fn tags(&self) -> Vec<ComponentTag>;
    /// `components` follow `tags()` order.
    fn form(&self, g: &mut Graph, components: &[Var]) -> Result<Var>;
}

/// Index lists selecting `count` channels from a `(pixels, channels)` node.
fn channel_indices(pixels: usize, channels: usize, start: usize, count: usize) -> Rc<[usize]> {
    (0..pixels)
        .flat_map(|p| (0..count).map(move |c| p * channels + start + c))
        .collect()
}

impl LatentDecoder for Generator {
    fn d_w(&self) -> usize {
        self.config.d_w
    }

    fn tags(&self) -> Vec<ComponentTag> {
        self.tags.clone()
    }

    fn decode(&self, g: &mut Graph, w: Var) -> Result<Vec<Var>> {
        let vars = self.bind(g, false, false);
        let out = vars.synthesize(g, w, 1)?;
        split_channels(g, out, self)
    }
}

/// Splits a multi-component generator output into per-tag nodes.
fn split_channels(g: &mut Graph, out: Var, gen: &Generator) -> Result<Vec<Var>> {
    if gen.tags.len() == 1 {
        return Ok(vec![out]);
    }
    let (h, w, c) = gen.out_shape();
    let per = c / gen.tags.len();
    (0..gen.tags.len())
        .map(|i| Ok(g.gather(out, channel_indices(h * w, c, i * per, per), &[h * w, per])?))
        .collect()
}

impl ImageFormation for ForwardModel {
    fn tags(&self) -> Vec<ComponentTag> {
        ForwardModel::tags(self)
    }

    fn form(&self, g: &mut Graph, components: &[Var]) -> Result<Var> {
        let linear = ForwardModel::tags(self)
            .iter()
            .zip(components)
            .map(|(t, v)| decode_var(g, self.transform(*t), *v))
            .collect::<Result<Vec<_>>>()?;
        self.compose_var(g, &linear)
    }
}

/// One row of a loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub recon: f64,
    pub regularizer: f64,
    pub total: f64,
}

/// Loss nodes of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub recon: Var,
    pub regularizer: Option<Var>,
    pub total: Var,
}

/// The joint inversion objective: reconstruction loss of the formed image
/// plus the weighted per-generator regularizer.
pub struct Objective<'a> {
    target: Tensor,
    height: usize,
    width: usize,
    decoders: Vec<&'a dyn LatentDecoder>,
    formation: &'a dyn ImageFormation,
    priors: &'a [Prior],
    recon_loss: ReconLoss,
    gradient_weight: f64,
    regularizer: RegularizerChoice,
    /// For each formation tag, the (decoder, output) slot that produces it.
    slots: Vec<(usize, usize)>,
}

impl<'a> Objective<'a> {
    pub fn new(
        target: &Image,
        decoders: Vec<&'a dyn LatentDecoder>,
        formation: &'a dyn ImageFormation,
        priors: &'a [Prior],
        cfg: &InversionConfig,
    ) -> Result<Self> {
        if priors.len() != decoders.len() {
            return Err(Error::InvalidArgument(format!(
                "{} priors for {} generators",
                priors.len(),
                decoders.len()
            )));
        }
        let produced: Vec<(ComponentTag, usize, usize)> = decoders
            .iter()
            .enumerate()
            .flat_map(|(i, d)| d.tags().into_iter().enumerate().map(move |(j, t)| (t, i, j)))
            .collect();
        let want = formation.tags();
        let mut sorted_want = want.clone();
        let mut sorted_got: Vec<ComponentTag> = produced.iter().map(|p| p.0).collect();
        sorted_want.sort();
        sorted_got.sort();
        if sorted_want != sorted_got {
            return Err(Error::ComponentMismatch {
                expected: sorted_want.iter().map(|t| t.to_string()).collect(),
                got: sorted_got.iter().map(|t| t.to_string()).collect(),
            });
        }
        let slots = want
            .iter()
            .map(|t| {
                let p = produced.iter().find(|p| p.0 == *t).expect("tags checked");
                (p.1, p.2)
            })
            .collect();
        let (lo, hi) = target.min_max();
        if !(lo >= 0.0 && hi <= 1.0) {
            return Err(Error::Domain(format!("target range [{lo}, {hi}] outside [0, 1]")));
        }
        Ok(Self {
            target: target.to_tensor(),
            height: target.height,
            width: target.width,
            decoders,
            formation,
            priors,
            recon_loss: cfg.recon_loss,
            gradient_weight: cfg.gradient_weight,
            regularizer: cfg.regularizer,
            slots,
        })
    }

    pub fn decoders(&self) -> &[&'a dyn LatentDecoder] {
        &self.decoders
    }

    /// The formed image node for latents `ws` (each `(1, d_w)`).
    pub fn form(&self, g: &mut Graph, ws: &[Var]) -> Result<Var> {
        let outputs = self
            .decoders
            .iter()
            .zip(ws)
            .map(|(d, w)| d.decode(g, *w))
            .collect::<Result<Vec<_>>>()?;
        let ordered: Vec<Var> = self.slots.iter().map(|&(i, j)| outputs[i][j]).collect();
        let formed = self.formation.form(g, &ordered)?;
        if g.shape(formed) != self.target.shape() {
            return Err(Error::Shape(format!(
                "formed image {:?} vs target {:?}",
                g.shape(formed),
                self.target.shape()
            )));
        }
        Ok(formed)
    }

    pub fn recon(&self, g: &mut Graph, formed: Var) -> Result<Var> {
        let target = g.constant(self.target.clone());
        let diff = g.sub(formed, target)?;
        let sq = g.map(diff, Unary::Square)?;
        let mse = g.mean(sq)?;
        if self.recon_loss == ReconLoss::Mse || self.gradient_weight == 0.0 {
            return Ok(mse);
        }
        let grad = residual_gradient_l1(g, diff, self.height, self.width)?;
        let grad = g.scale(grad, self.gradient_weight)?;
        Ok(g.add(mse, grad)?)
    }

    pub fn build(&self, g: &mut Graph, ws: &[Var]) -> Result<ObjectiveTerms> {
        if ws.len() != self.decoders.len() {
            return Err(Error::InvalidArgument(format!("{} latents for {} generators", ws.len(), self.decoders.len())));
        }
        let formed = self.form(g, ws)?;
        let recon = self.recon(g, formed)?;
        let mut reg: Option<Var> = None;
        for (w, prior) in ws.iter().zip(self.priors) {
            if let Some(r) = prior.regularizer(g, *w, &self.regularizer)? {
                reg = Some(match reg {
                    Some(acc) => g.add(acc, r)?,
                    None => r,
                });
            }
        }
        let total = match reg {
            Some(r) => {
                let weighted = g.scale(r, self.regularizer.weight)?;
                g.add(recon, weighted)?
            }
            None => recon,
        };
        Ok(ObjectiveTerms { recon, regularizer: reg, total })
    }
}

/// Mean absolute horizontal plus vertical forward difference of `diff`.
fn residual_gradient_l1(g: &mut Graph, diff: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(diff)[1];
    let at = |y: usize, x: usize, ch: usize| (y * w + x) * c + ch;
    let mut terms = Vec::new();
    for (dy, dx) in [(0, 1), (1, 0)] {
        let (rows, cols) = (h - dy, w - dx);
        if rows == 0 || cols == 0 {
            continue;
        }
        let mut lo = Vec::with_capacity(rows * cols * c);
        let mut hi = Vec::with_capacity(rows * cols * c);
        for y in 0..rows {
            for x in 0..cols {
                for ch in 0..c {
                    lo.push(at(y, x, ch));
                    hi.push(at(y + dy, x + dx, ch));
                }
            }
        }
        let n = lo.len();
        let a = g.gather(diff, lo.into(), &[n])?;
        let b = g.gather(diff, hi.into(), &[n])?;
        let d = g.sub(b, a)?;
        let abs = g.map(d, Unary::Abs)?;
        terms.push(g.mean(abs)?);
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for t in terms {
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// Maps non-finite autodiff failures to a loss error at `step`.
pub(crate) fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Autodiff(AutodiffError::NonFinite { .. }) => Error::NonFiniteLoss { step },
        other => other,
    }
}

/// Gradient-based minimization of `objective` over all latents at once.
/// Returns the final latents and a trace of `steps + 1` records.
pub fn optimize_latents(
    objective: &Objective,
    cfg: &InversionConfig,
    init: &[LatentW],
) -> Result<(Vec<LatentW>, Vec<LossRecord>)> {
    cfg.validate()?;
    let decoders = objective.decoders();
    if init.len() != decoders.len() {
        return Err(Error::InvalidArgument(format!("{} initial codes for {} generators", init.len(), decoders.len())));
    }
    let mut ws = init
        .iter()
        .zip(decoders)
        .map(|(w, d)| latent_tensor(w, d.d_w()))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = match cfg.optimizer {
        OptimizerKind::Adam => Optimizer::adam(cfg.lr, cfg.beta1, cfg.beta2),
        OptimizerKind::Sgd => Optimizer::sgd(cfg.lr),
    };
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let vars: Vec<Var> = ws.iter().map(|w| g.param(w.clone())).collect();
        let terms = objective.build(&mut g, &vars).map_err(at_step(step))?;
        let record = LossRecord {
            recon: g.scalar(terms.recon),
            regularizer: terms.regularizer.map_or(0.0, |r| g.scalar(r)),
            total: g.scalar(terms.total),
        };
        if !record.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        trace.push(record);
        if step == cfg.steps {
            break;
        }
        g.backward(terms.total).map_err(|e| at_step(step)(e.into()))?;
        let grads = vars.iter().map(|v| g.grad(*v)).collect::<std::result::Result<Vec<_>, _>>()?;
        let mut refs: Vec<&mut Tensor> = ws.iter_mut().collect();
        opt.step(&mut refs, &grads)?;
        if refs.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
    }
    Ok((ws.into_iter().map(|t| LatentW(t.into_data())).collect(), trace))
}

/// Recovered component in both color spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredComponent {
    pub tonemapped: ComponentImage,
    pub linear: ComponentImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    /// One code per generator.
    pub w_hats: Vec<LatentW>,
    /// Components each generator produces.
    pub generator_tags: Vec<Vec<ComponentTag>>,
    /// In forward-model order.
    pub components: Vec<RecoveredComponent>,
    pub reconstruction: Image,
    /// Radiance samples clamped at 1 while composing.
    pub clipped: usize,
    pub loss_trace: Vec<LossRecord>,
    pub metrics: Option<MetricReport>,
}

/// Tone-mapped components of one generator at `w`.
pub fn synthesize_components(gen: &Generator, w: &LatentW) -> Result<Vec<ComponentImage>> {
    let img = gen.synthesize_image(w)?;
    let per = img.channels / gen.tags.len();
    gen.tags
        .iter()
        .enumerate()
        .map(|(i, t)| ComponentImage::new(img.channels_range(i * per, per)?, ColorSpace::Tonemapped, *t))
        .collect()
}

impl InversionResult {
    /// Synthesizes and composes the components for `w_hats`.
    pub fn from_latents(
        gens: &[&Generator],
        model: &ForwardModel,
        w_hats: Vec<LatentW>,
        loss_trace: Vec<LossRecord>,
    ) -> Result<Self> {
        let mut recovered = Vec::new();
        for (gen, w) in gens.iter().zip(&w_hats) {
            for tonemapped in synthesize_components(gen, w)? {
                let (linear, _) = decode_component(&tonemapped)?;
                recovered.push(RecoveredComponent { tonemapped, linear });
            }
        }
        let components: Vec<RecoveredComponent> = model
            .tags()
            .iter()
            .map(|t| {
                recovered
                    .iter()
                    .find(|c| c.linear.tag == *t)
                    .cloned()
                    .ok_or_else(|| Error::ComponentMismatch {
                        expected: model.tags().iter().map(|t| t.to_string()).collect(),
                        got: recovered.iter().map(|c| c.linear.tag.to_string()).collect(),
                    })
            })
            .collect::<Result<_>>()?;
        let linear: Vec<ComponentImage> = components.iter().map(|c| c.linear.clone()).collect();
        let composed = model.compose(&linear)?;
        Ok(Self {
            w_hats,
            generator_tags: gens.iter().map(|g| g.tags.clone()).collect(),
            components,
            reconstruction: composed.image,
            clipped: composed.clipped,
            loss_trace,
            metrics: None,
        })
    }

    pub fn component(&self, tag: ComponentTag) -> Option<&RecoveredComponent> {
        self.components.iter().find(|c| c.linear.tag == tag)
    }

    pub fn tonemapped(&self) -> Vec<ComponentImage> {
        self.components.iter().map(|c| c.tonemapped.clone()).collect()
    }

    pub fn linear(&self) -> Vec<ComponentImage> {
        self.components.iter().map(|c| c.linear.clone()).collect()
    }

    /// Scores against tone-mapped ground truth and the target image.
    pub fn evaluate(&mut self, gt_tonemapped: &[ComponentImage], target: &Image) -> Result<&MetricReport> {
        let report = MetricReport::evaluate(&self.tonemapped(), gt_tonemapped, &self.reconstruction, target)?;
        Ok(self.metrics.insert(report))
    }

    /// Writes components (PFM linear, PNG tone-mapped), the reconstruction,
    /// the loss trace, metrics, codes, and `summary` as `result.json`.
    pub fn export(&self, dir: impl AsRef<Path>, summary: &impl Serialize) -> Result<()> {
        let dir = dir.as_ref();
        io::create_dir(dir)?;
        for c in &self.components {
            let tag = c.linear.tag;
            io::write_pfm(dir.join(format!("{tag}.pfm")), &c.linear.image)?;
            io::write_png(dir.join(format!("{tag}.png")), &c.tonemapped.image)?;
        }
        io::write_png(dir.join("reconstruction.png"), &self.reconstruction)?;
        io::write_json(dir.join("loss_trace.json"), &self.loss_trace)?;
        if let Some(m) = &self.metrics {
            io::write_json(dir.join("metrics.json"), m)?;
        }
        self.latents_checkpoint()?.write(dir.join(W_HATS_FILE))?;
        io::write_json(dir.join("result.json"), summary)
    }

    fn latents_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_json("tags", &self.generator_tags)?;
        for (i, w) in self.w_hats.iter().enumerate() {
            ck.push(format!("w.{i}"), w.to_tensor());
        }
        Ok(ck)
    }
}

pub const W_HATS_FILE: &str = "w_hats.jinv";

/// Reads the codes and per-generator tags written by [`InversionResult::export`].
pub fn read_latents(dir: impl AsRef<Path>) -> Result<(Vec<LatentW>, Vec<Vec<ComponentTag>>)> {
    let ck = Checkpoint::read(dir.as_ref().join(W_HATS_FILE))?;
    let tags: Vec<Vec<ComponentTag>> = ck.get_json("tags")?;
    let ws = (0..tags.len())
        .map(|i| Ok(LatentW(ck.require(&format!("w.{i}"))?.data().to_vec())))
        .collect::<Result<Vec<_>>>()?;
    Ok((ws, tags))
}

fn check_generators(gens: &[&Generator], model: &ForwardModel, target: &Image) -> Result<()> {
    let tags: Vec<ComponentTag> = gens.iter().flat_map(|g| g.tags.iter().copied()).collect();
    model.check_tags(&tags)?;
    for g in gens {
        let (h, w, c) = g.out_shape();
        if (h, w) != (target.height, target.width) || c != 3 * g.tags.len() || target.channels != 3 {
            return Err(Error::Shape(format!(
                "generator output {h}x{w}x{c} does not fit target {:?}",
                target.shape()
            )));
        }
    }
    Ok(())
}

/// Jointly inverts `gens` so that composing their decoded outputs under
/// `model` reproduces `target`. Starts from `init` or each prior's mean code.
pub fn joint_invert(
    target: &Image,
    gens: &[&Generator],
    priors: &[Prior],
    model: &ForwardModel,
    cfg: &InversionConfig,
    init: Option<&[LatentW]>,
) -> Result<InversionResult> {
    check_generators(gens, model, target)?;
    let decoders: Vec<&dyn LatentDecoder> = gens.iter().map(|g| *g as &dyn LatentDecoder).collect();
    let objective = Objective::new(target, decoders, model, priors, cfg)?;
    let init: Vec<LatentW> = match init {
        Some(ws) => {
            if ws.len() != gens.len() || ws.iter().zip(gens).any(|(w, g)| w.dim() != g.d_w()) {
                return Err(Error::InvalidArgument("initial codes do not match the generators".into()));
            }
            ws.to_vec()
        }
        None => priors.iter().map(|p| p.mean_w.clone()).collect(),
    };
    let (w_hats, trace) = optimize_latents(&objective, cfg, &init)?;
    InversionResult::from_latents(gens, model, w_hats, trace)
}

/// Recomposes `result` with the shading code moved along one edit
/// direction; all other components are held fixed.
pub fn relight(
    result: &InversionResult,
    shading_gen: &Generator,
    dirs: &EditDirections,
    direction_idx: usize,
    alphas: &[f64],
    model: &ForwardModel,
) -> Result<Vec<Image>> {
    if direction_idx >= dirs.len() {
        return Err(Error::OutOfRange { index: direction_idx, len: dirs.len() });
    }
    if shading_gen.tag()? != ComponentTag::Shading {
        return Err(Error::InvalidArgument("relighting needs a shading generator".into()));
    }
    let slot = result
        .generator_tags
        .iter()
        .position(|t| t.as_slice() == [ComponentTag::Shading])
        .ok_or_else(|| Error::InvalidArgument("result has no separate shading code".into()))?;
    let w_hat = &result.w_hats[slot];
    alphas
        .iter()
        .map(|&alpha| {
            let w = dirs.apply(w_hat, direction_idx, alpha)?;
            let (shading, _) = decode_component(&shading_gen.synthesize(&w)?)?;
            let parts: Vec<ComponentImage> = result
                .components
                .iter()
                .map(|c| if c.linear.tag == ComponentTag::Shading { shading.clone() } else { c.linear.clone() })
                .collect();
            Ok(model.compose(&parts)?.image)
        })
        .collect()
}

#[cfg(test)]
mod tests;
