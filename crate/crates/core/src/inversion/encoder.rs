use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{synthesize_components, PRIOR_TRUNCATION};
use crate::autodiff::{Graph, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::forward_models::{decode_component, ForwardModel};
use crate::generators::{latent_tensor, sample_z_with, stack_images, Generator, LatentW};
use crate::image::{ComponentImage, Image};
use crate::io::Checkpoint;
use crate::nn::{Dense, DenseVars, DownNet, DownNetVars, Optimizer, Parameterized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub widths: Vec<usize>,
    /// Weight of the squared latent error, for samples with a known code.
    pub latent_weight: f64,
    /// Weight of the squared image error through the frozen generator, for
    /// samples with a known component image.
    pub image_weight: f64,
    pub seed: u64,
    /// Step size of the latent optimization that starts from encoded codes.
    pub refine_lr: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 8,
            lr: 1e-3,
            widths: vec![16, 32],
            latent_weight: 1.0,
            image_weight: 1.0,
            seed: 0,
            refine_lr: 0.01,
        }
    }
}

/// One training pair: a composed image with its code, its generator-space
/// image, or both.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSample {
    pub image: Image,
    pub w: Option<LatentW>,
    /// Target generator output (all of its channels, tone-mapped).
    pub component: Option<Image>,
}

/// Maps a composed image to one generator's latent space: a strided conv
/// stack plus a linear skip from the raw pixels, around a fixed offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub net: DownNet,
    pub skip: Dense,
    pub offset: LatentW,
    pub generator_id: String,
}

struct EncoderVars {
    net: DownNetVars,
    skip: DenseVars,
    offset: Var,
    in_len: usize,
}

impl EncoderVars {
    fn forward(&self, g: &mut Graph, x: Var, n: usize) -> Result<Var> {
        let deep = self.net.forward(g, x, n)?;
        let flat = g.reshape(x, &[n, self.in_len])?;
        let lin = self.skip.forward(g, flat)?;
        let sum = g.add(deep, lin)?;
        Ok(g.add_row(sum, self.offset)?)
    }

    fn params(&self) -> Vec<Var> {
        let mut out = self.net.params();
        out.extend([self.skip.weight, self.skip.bias]);
        out
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    generator_id: String,
    in_shape: (usize, usize, usize),
    widths: Vec<usize>,
    d_w: usize,
    offset: Vec<f64>,
}

impl Encoder {
    pub fn new(
        in_shape: (usize, usize, usize),
        widths: &[usize],
        offset: LatentW,
        generator_id: impl Into<String>,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_w = offset.dim();
        let mut net = DownNet::new(in_shape, widths, d_w, &mut rng);
        // Start at the offset: both heads begin at zero output.
        net.head = Dense::zeros(net.head.inputs(), d_w);
        let (h, w, c) = in_shape;
        Self {
            net,
            skip: Dense::zeros(h * w * c, d_w),
            offset,
            generator_id: generator_id.into(),
        }
    }

    pub fn d_w(&self) -> usize {
        self.offset.dim()
    }

    pub fn in_shape(&self) -> (usize, usize, usize) {
        self.net.in_shape
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Result<EncoderVars> {
        let (h, w, c) = self.in_shape();
        Ok(EncoderVars {
            net: self.net.bind(g, trainable),
            skip: self.skip.bind(g, trainable),
            offset: g.constant(Tensor::vector(self.offset.0.clone())),
            in_len: h * w * c,
        })
    }

    pub fn encode_batch(&self, images: &[Image]) -> Result<Vec<LatentW>> {
        if let Some(img) = images.iter().find(|i| i.shape() != self.in_shape()) {
            return Err(Error::Shape(format!("encoder takes {:?}, got {:?}", self.in_shape(), img.shape())));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let x = g.constant(stack_images(images)?);
        let out = vars.forward(&mut g, x, images.len())?;
        Ok(g.value(out).data().chunks(self.d_w()).map(|r| LatentW(r.to_vec())).collect())
    }

    pub fn encode(&self, image: &Image) -> Result<LatentW> {
        Ok(self.encode_batch(std::slice::from_ref(image))?.remove(0))
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.net.tensors_mut();
        out.push(&mut self.skip.weight);
        out.push(&mut self.skip.bias);
        out
    }

    pub fn write_to(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.push_json(
            format!("{prefix}meta"),
            &EncoderMeta {
                generator_id: self.generator_id.clone(),
                in_shape: self.in_shape(),
                widths: self.net.convs.iter().map(|c| c.c_out()).collect(),
                d_w: self.d_w(),
                offset: self.offset.0.clone(),
            },
        )?;
        for (name, t) in self.net.named_tensors() {
            ck.push(format!("{prefix}net.{name}"), t.clone());
        }
        ck.push(format!("{prefix}skip.weight"), self.skip.weight.clone());
        ck.push(format!("{prefix}skip.bias"), self.skip.bias.clone());
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let meta: EncoderMeta = ck.get_json(&format!("{prefix}meta"))?;
        if meta.offset.len() != meta.d_w {
            return Err(Error::Invariant("encoder offset length differs from d_w".into()));
        }
        let mut enc = Encoder::new(meta.in_shape, &meta.widths, LatentW(meta.offset), meta.generator_id, 0);
        let names: Vec<String> = enc.net.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut loaded = Vec::new();
        for name in names.iter().map(|n| format!("{prefix}net.{n}")).chain([
            format!("{prefix}skip.weight"),
            format!("{prefix}skip.bias"),
        ]) {
            loaded.push(ck.require(&name)?.clone());
        }
        for (slot, t) in enc.tensors_mut().into_iter().zip(loaded) {
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!("encoder tensor {:?} vs {:?}", slot.shape(), t.shape())));
            }
            *slot = t;
        }
        Ok(enc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ck = Checkpoint::new();
        self.write_to(&mut ck, "")?;
        ck.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&Checkpoint::read(path)?, "")
    }
}

/// Trains an encoder for `gen` on `data`. The generator stays frozen; the
/// offset is its mean code.
pub fn train_encoder(gen: &Generator, generator_id: &str, data: &[EncoderSample], cfg: &EncoderConfig) -> Result<Encoder> {
    let first = data.first().ok_or(Error::EmptyDataset)?;
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("encoder training needs batch >= 1 and lr > 0".into()));
    }
    let in_shape = first.image.shape();
    for s in data {
        if s.image.shape() != in_shape {
            return Err(Error::Shape("encoder training images differ in shape".into()));
        }
        if let Some(w) = &s.w {
            latent_tensor(w, gen.d_w())?;
        }
        if let Some(c) = &s.component {
            if c.shape() != gen.out_shape() {
                return Err(Error::Shape(format!("component {:?} vs generator {:?}", c.shape(), gen.out_shape())));
            }
        }
        if s.w.is_none() && s.component.is_none() {
            return Err(Error::InvalidArgument("encoder sample has neither code nor component".into()));
        }
    }
    let offset = gen.mean_w(2048, cfg.seed, Some(PRIOR_TRUNCATION))?;
    let mut enc = Encoder::new(in_shape, &cfg.widths, offset, generator_id, cfg.seed);
    let mut opt = Optimizer::adam(cfg.lr, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x656e_636f_6465_72);
    let (h, w, c) = gen.out_shape();
    for step in 0..cfg.steps {
        let picks: Vec<&EncoderSample> = (0..cfg.batch).map(|_| &data[rng.gen_range(0..data.len())]).collect();
        let mut g = Graph::new();
        let ev = enc.bind(&mut g, true)?;
        let images: Vec<Image> = picks.iter().map(|s| s.image.clone()).collect();
        let x = g.constant(stack_images(&images)?);
        let codes = ev.forward(&mut g, x, picks.len())?;
        let mut total: Option<Var> = None;
        let mut add = |g: &mut Graph, v: Var| -> Result<()> {
            total = Some(match total {
                Some(t) => g.add(t, v)?,
                None => v,
            });
            Ok(())
        };

        let with_w: Vec<usize> = (0..picks.len()).filter(|&i| picks[i].w.is_some()).collect();
        if !with_w.is_empty() && cfg.latent_weight > 0.0 {
            let d = gen.d_w();
            let idx: Vec<usize> = with_w.iter().flat_map(|&i| (0..d).map(move |j| i * d + j)).collect();
            let pred = g.gather(codes, idx.into(), &[with_w.len(), d])?;
            let truth: Vec<f64> = with_w.iter().flat_map(|&i| picks[i].w.as_ref().expect("filtered").0.clone()).collect();
            let truth = g.constant(Tensor::new(vec![with_w.len(), d], truth)?);
            let diff = g.sub(pred, truth)?;
            let sq = g.map(diff, Unary::Square)?;
            let m = g.mean(sq)?;
            let m = g.scale(m, cfg.latent_weight)?;
            add(&mut g, m)?;
        }

        let with_c: Vec<usize> = (0..picks.len()).filter(|&i| picks[i].component.is_some()).collect();
        if !with_c.is_empty() && cfg.image_weight > 0.0 {
            let d = gen.d_w();
            let idx: Vec<usize> = with_c.iter().flat_map(|&i| (0..d).map(move |j| i * d + j)).collect();
            let pred = g.gather(codes, idx.into(), &[with_c.len(), d])?;
            let gv = gen.bind(&mut g, false, false);
            let out = gv.synthesize(&mut g, pred, with_c.len())?;
            let targets: Vec<Image> = with_c.iter().map(|&i| picks[i].component.clone().expect("filtered")).collect();
            let truth = g.constant(stack_images(&targets)?);
            debug_assert_eq!(g.shape(truth), &[with_c.len() * h * w, c]);
            let diff = g.sub(out, truth)?;
            let sq = g.map(diff, Unary::Square)?;
            let m = g.mean(sq)?;
            let m = g.scale(m, cfg.image_weight)?;
            add(&mut g, m)?;
        }

        let Some(loss) = total else { continue };
        if !g.scalar(loss).is_finite() {
            return Err(Error::Diverged { step, what: "encoder loss" });
        }
        g.backward(loss)?;
        let grads = ev.params().iter().map(|v| g.grad(*v)).collect::<std::result::Result<Vec<_>, _>>()?;
        let mut params = enc.tensors_mut();
        opt.step(&mut params, &grads)?;
    }
    Ok(enc)
}

/// One code per generator from its encoder; no optimization.
pub fn encoder_init(encoders: &[&Encoder], gens: &[&Generator], target: &Image) -> Result<Vec<LatentW>> {
    if encoders.len() != gens.len() {
        return Err(Error::InvalidArgument(format!(
            "{} encoders for {} generators",
            encoders.len(),
            gens.len()
        )));
    }
    encoders
        .iter()
        .zip(gens)
        .map(|(e, g)| {
            if e.d_w() != g.d_w() {
                return Err(Error::Shape(format!("encoder emits {} dims, generator takes {}", e.d_w(), g.d_w())));
            }
            e.encode(target)
        })
        .collect()
}

/// Composes `n` random draws from `gens` under `model`. Returns, per
/// generator, samples pairing each composed image with that generator's
/// code and output.
pub fn synthetic_encoder_data(
    gens: &[&Generator],
    model: &ForwardModel,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<EncoderSample>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<EncoderSample>> = vec![Vec::with_capacity(n); gens.len()];
    for _ in 0..n {
        let ws = gens
            .iter()
            .map(|g| g.map_to_w(&sample_z_with(&mut rng, g.config.d_z, Some(PRIOR_TRUNCATION))?))
            .collect::<Result<Vec<_>>>()?;
        let mut linear: Vec<ComponentImage> = Vec::new();
        let mut outputs = Vec::new();
        for (g, w) in gens.iter().zip(&ws) {
            outputs.push(g.synthesize_image(w)?);
            for c in synthesize_components(g, w)? {
                linear.push(decode_component(&c)?.0);
            }
        }
        let composed = model.compose(&linear)?.image;
        for ((slot, w), img) in out.iter_mut().zip(ws).zip(outputs) {
            slot.push(EncoderSample { image: composed.clone(), w: Some(w), component: Some(img) });
        }
    }
    Ok(out)
}
