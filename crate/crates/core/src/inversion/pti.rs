use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{at_step, split_channels, InversionConfig, InversionResult, LatentDecoder, LossRecord, Objective, Prior, ReconLoss, PRIOR_TRUNCATION};
use crate::autodiff::{Graph, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::forward_models::ForwardModel;
use crate::generators::{latent_tensor, Discriminator, Generator, GeneratorVars, LatentW};
use crate::image::{ComponentTag, Image};
use crate::nn::Optimizer;
use crate::priors::{anchor_codes, anchor_scores_var, sample_anchors, RegularizerChoice};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtiConfig {
    pub steps: usize,
    pub lr: f64,
    pub lambda_ld: f64,
    pub n_anchors: usize,
    /// Interpolation weight toward the random anchor code.
    pub beta: f64,
    pub use_d_loss: bool,
    pub d_loss_form: DLossForm,
    pub recon_loss: ReconLoss,
    pub seed: u64,
}

impl Default for PtiConfig {
    fn default() -> Self {
        Self {
            steps: 350,
            lr: 3e-4,
            lambda_ld: 0.1,
            n_anchors: 4,
            beta: 0.3,
            use_d_loss: true,
            d_loss_form: DLossForm::Drift,
            recon_loss: ReconLoss::Mse,
            seed: 0,
        }
    }
}

/// How anchor logits `s_k` enter the fine-tuning objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DLossForm {
    /// `Σ_k softplus(-s_k)`: push every anchor toward "real".
    NonSaturating,
    /// `Σ_k max(0, s0_k - s_k)²`, where `s0_k` is the untuned generator's
    /// logit on the same anchor: only a drop in realism is penalized.
    Drift,
}

impl PtiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.lambda_ld >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda_ld must be nonnegative, got {}", self.lambda_ld)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.use_d_loss && self.n_anchors == 0 {
            return Err(Error::InvalidArgument("the local D loss needs at least one anchor".into()));
        }
        Ok(())
    }

    fn d_loss_active(&self) -> bool {
        self.use_d_loss && self.lambda_ld > 0.0
    }
}

/// A generator whose synthesis tensors are bound as trainable nodes.
struct Bound<'a> {
    gen: &'a Generator,
    vars: GeneratorVars,
}

impl LatentDecoder for Bound<'_> {
    fn d_w(&self) -> usize {
        self.gen.d_w()
    }

    fn tags(&self) -> Vec<ComponentTag> {
        self.gen.tags.clone()
    }

    fn decode(&self, g: &mut Graph, w: Var) -> Result<Vec<Var>> {
        let out = self.vars.synthesize(g, w, 1)?;
        split_channels(g, out, self.gen)
    }
}

/// Fine-tunes the synthesis networks of all generators jointly with the
/// codes `w_hats` held fixed. With the D loss on, each step also draws
/// fresh anchors `(1 - beta) ŵ + beta w_k` and adds `lambda_ld` times the
/// anchor term chosen by `d_loss_form`, per generator.
pub fn pti_finetune(
    gens: &[&Generator],
    discs: &[&Discriminator],
    w_hats: &[LatentW],
    target: &Image,
    model: &ForwardModel,
    cfg: &PtiConfig,
) -> Result<(Vec<Generator>, InversionResult)> {
    cfg.validate()?;
    super::check_generators(gens, model, target)?;
    if w_hats.len() != gens.len() {
        return Err(Error::InvalidArgument(format!("{} codes for {} generators", w_hats.len(), gens.len())));
    }
    if cfg.d_loss_active() {
        if discs.len() != gens.len() {
            return Err(Error::InvalidArgument(format!(
                "local D loss needs one discriminator per generator, got {} for {}",
                discs.len(),
                gens.len()
            )));
        }
        for (d, g) in discs.iter().zip(gens) {
            if d.in_shape() != g.out_shape() {
                return Err(Error::Shape(format!("discriminator {:?} vs generator {:?}", d.in_shape(), g.out_shape())));
            }
        }
    }
    let latents = w_hats
        .iter()
        .zip(gens)
        .map(|(w, g)| latent_tensor(w, g.d_w()))
        .collect::<Result<Vec<Tensor>>>()?;
    let inv_cfg = InversionConfig {
        regularizer: RegularizerChoice::none(),
        recon_loss: cfg.recon_loss,
        ..InversionConfig::default()
    };
    let priors: Vec<Prior> = w_hats.iter().map(|w| Prior::mean_only(w.clone())).collect();
    let mut tuned: Vec<Generator> = gens.iter().map(|g| (*g).clone()).collect();
    let mut opt = Optimizer::adam(cfg.lr, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let bound: Vec<Bound> = tuned
            .iter()
            .map(|gen| Bound { gen, vars: gen.bind(&mut g, false, true) })
            .collect();
        let decoders: Vec<&dyn LatentDecoder> = bound.iter().map(|b| b as &dyn LatentDecoder).collect();
        let objective = Objective::new(target, decoders, model, &priors, &inv_cfg)?;
        let ws: Vec<Var> = latents.iter().map(|t| g.constant(t.clone())).collect();
        let recon = objective.build(&mut g, &ws).map_err(at_step(step))?.recon;

        let mut ld: Option<Var> = None;
        if cfg.d_loss_active() {
            for (((b, disc), w_hat), orig) in bound.iter().zip(discs).zip(w_hats).zip(gens) {
                let anchors = sample_anchors(orig, cfg.n_anchors, &mut rng, Some(PRIOR_TRUNCATION))?;
                let codes = anchor_codes(w_hat, &anchors, cfg.beta)?;
                let scores = anchor_scores_var(&mut g, &b.vars, disc, &codes).map_err(at_step(step))?;
                let per_anchor = match cfg.d_loss_form {
                    DLossForm::NonSaturating => {
                        let neg = g.neg(scores)?;
                        g.map(neg, Unary::Softplus)?
                    }
                    DLossForm::Drift => {
                        let base = g.constant(untuned_scores(orig, disc, &codes)?);
                        let gap = g.sub(base, scores)?;
                        let hinge = g.map(gap, Unary::LeakyRelu(0.0))?;
                        g.map(hinge, Unary::Square)?
                    }
                };
                let term = g.sum(per_anchor)?;
                ld = Some(match ld {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
        }
        let total = match ld {
            Some(l) => {
                let weighted = g.scale(l, cfg.lambda_ld)?;
                g.add(recon, weighted)?
            }
            None => recon,
        };
        let record = LossRecord {
            recon: g.scalar(recon),
            regularizer: ld.map_or(0.0, |l| g.scalar(l)),
            total: g.scalar(total),
        };
        if !record.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        trace.push(record);
        if step == cfg.steps {
            break;
        }
        g.backward(total).map_err(|e| at_step(step)(e.into()))?;
        let mut grads = Vec::new();
        for b in &bound {
            for p in b.vars.synthesis_params() {
                grads.push(g.grad(p)?);
            }
        }
        drop(bound);
        let mut params: Vec<&mut Tensor> = tuned.iter_mut().flat_map(|t| t.synthesis_tensors_mut()).collect();
        opt.step(&mut params, &grads)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
    }
    let refs: Vec<&Generator> = tuned.iter().collect();
    let result = InversionResult::from_latents(&refs, model, w_hats.to_vec(), trace)?;
    Ok((tuned, result))
}

fn untuned_scores(gen: &Generator, disc: &Discriminator, codes: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let gv = gen.bind(&mut g, false, false);
    let s = anchor_scores_var(&mut g, &gv, disc, codes)?;
    Ok(g.value(s).clone())
}

/// Mean discriminator logit over `n` anchors around `w_hat`, drawn from a
/// fixed seed so tuned variants can be compared on the same anchors.
pub fn mean_anchor_score(
    gen: &Generator,
    disc: &Discriminator,
    w_hat: &LatentW,
    n: usize,
    beta: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors = sample_anchors(gen, n, &mut rng, Some(PRIOR_TRUNCATION))?;
    let codes = anchor_codes(w_hat, &anchors, beta)?;
    let mut g = Graph::new();
    let gv = gen.bind(&mut g, false, false);
    let s = anchor_scores_var(&mut g, &gv, disc, &codes)?;
    let v = g.value(s);
    Ok(v.data().iter().sum::<f64>() / v.len() as f64)
}
