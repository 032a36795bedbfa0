//! Small style-based generators (mapping network `z -> w`, synthesis network
//! `w -> image`), their discriminators, latent sampling and edit directions.

mod sefa;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::image::{ColorSpace, ComponentImage, ComponentTag, Image};
use crate::io::Checkpoint;
use crate::nn::{leaky, Conv2d, ConvVars, Dense, DenseVars, DownNet, Parameterized};

pub use sefa::{sefa_directions, sefa_from_matrix, EditDirections};
pub use train::{train_gan, train_joint_gan, GanConfig, StepLog, TrainLog};

/// Side length of the synthesis network's first feature map.
pub const BASE_RES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentZ(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentW(pub Vec<f64>);

impl LatentW {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.0.len()], self.0.clone()).expect("finite latent")
    }
}

/// Draws `dim` standard normal entries, resampling any entry with
/// `|x| > truncation`.
pub fn sample_z_with(rng: &mut impl Rng, dim: usize, truncation: Option<f64>) -> Result<LatentZ> {
    if let Some(t) = truncation {
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("truncation must be positive, got {t}")));
        }
    }
    let values = (0..dim)
        .map(|_| loop {
            let x: f64 = rng.sample(StandardNormal);
            match truncation {
                Some(t) if x.abs() > t => continue,
                _ => break x,
            }
        })
        .collect();
    Ok(LatentZ(values))
}

pub fn sample_z(dim: usize, seed: u64, truncation: Option<f64>) -> Result<LatentZ> {
    sample_z_with(&mut ChaCha8Rng::seed_from_u64(seed), dim, truncation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthStage {
    /// Bilinear upsampling factor applied before the conv.
    pub factor: usize,
    /// Conv output channels. The last stage must produce the image channels.
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub d_z: usize,
    pub d_w: usize,
    pub mapping_hidden: usize,
    /// Dense layers in the mapping network; 0 means `w = z`.
    pub mapping_layers: usize,
    pub base_channels: usize,
    pub stages: Vec<SynthStage>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::with_channels(3)
    }
}

impl GeneratorConfig {
    pub fn with_channels(out_channels: usize) -> Self {
        Self {
            d_z: 16,
            d_w: 16,
            mapping_hidden: 64,
            mapping_layers: 2,
            base_channels: 32,
            stages: vec![
                SynthStage { factor: 4, channels: 16 },
                SynthStage {
                    factor: 2,
                    channels: out_channels,
                },
            ],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.base_channels, |s| s.channels)
    }

    pub fn resolution(&self) -> usize {
        self.stages.iter().fold(BASE_RES, |r, s| r * s.factor)
    }

    pub fn out_shape(&self) -> (usize, usize, usize) {
        let r = self.resolution();
        (r, r, self.out_channels())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("generator config: {m}")));
        if self.d_z == 0 || self.d_w == 0 || self.base_channels == 0 {
            return bad("dimensions must be positive");
        }
        if self.mapping_layers == 0 && self.d_z != self.d_w {
            return bad("identity mapping needs d_z == d_w");
        }
        if self.mapping_layers > 1 && self.mapping_hidden == 0 {
            return bad("mapping_hidden must be positive");
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.factor == 0 || s.channels == 0) {
            return bad("need at least one stage with positive factor and channels");
        }
        Ok(())
    }

    /// Parameter count of a generator built from this config.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut d = self.d_z;
        for i in 0..self.mapping_layers {
            let out = if i + 1 == self.mapping_layers { self.d_w } else { self.mapping_hidden };
            n += d * out + out;
            d = out;
        }
        let base = BASE_RES * BASE_RES * self.base_channels;
        n += self.d_w * base + base;
        let mut c = self.base_channels;
        for s in &self.stages {
            n += 9 * c * s.channels + s.channels;
            c = s.channels;
        }
        n
    }

    /// Widens every hidden layer by `scale` and sets the output channels.
    pub fn widened(&self, scale: f64, out_channels: usize) -> Self {
        let w = |x: usize| ((x as f64 * scale).round() as usize).max(1);
        let mut stages: Vec<SynthStage> = self
            .stages
            .iter()
            .map(|s| SynthStage {
                factor: s.factor,
                channels: w(s.channels),
            })
            .collect();
        if let Some(last) = stages.last_mut() {
            last.channels = out_channels;
        }
        Self {
            mapping_hidden: w(self.mapping_hidden),
            base_channels: w(self.base_channels),
            stages,
            ..self.clone()
        }
    }

    /// Config for a generator emitting `n_components` stacked components with
    /// `n_components` times the latent size and about `n_components` times
    /// this config's parameter count.
    pub fn capacity_matched(&self, n_components: usize) -> Self {
        let channels = self.out_channels() * n_components;
        let target = (self.param_count() * n_components) as f64;
        let base = Self { d_z: self.d_z * n_components, d_w: self.d_w * n_components, ..self.clone() };
        (0..=300)
            .map(|i| base.widened(1.0 + i as f64 / 100.0, channels))
            .min_by(|a, b| {
                let da = (a.param_count() as f64 - target).abs();
                let db = (b.param_count() as f64 - target).abs();
                da.total_cmp(&db)
            })
            .expect("non-empty search")
    }
}

/// Generator for one component, or for several stacked along channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub tags: Vec<ComponentTag>,
    pub mapping: Vec<Dense>,
    pub synth_input: Dense,
    pub synth_convs: Vec<Conv2d>,
}

/// A generator's tensors bound into a graph.
#[derive(Debug, Clone)]
pub struct GeneratorVars {
    config: GeneratorConfig,
    mapping: Vec<DenseVars>,
    synth_input: DenseVars,
    synth_convs: Vec<ConvVars>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, tags: Vec<ComponentTag>, seed: u64) -> Result<Self> {
        config.validate()?;
        if tags.is_empty() {
            return Err(Error::InvalidArgument("generator needs at least one component tag".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mapping = Vec::new();
        let mut d = config.d_z;
        for i in 0..config.mapping_layers {
            let last = i + 1 == config.mapping_layers;
            let out = if last { config.d_w } else { config.mapping_hidden };
            let gain = if last { 1.0 } else { 2f64.sqrt() };
            mapping.push(Dense::new(d, out, gain, &mut rng));
            d = out;
        }
        let base = BASE_RES * BASE_RES * config.base_channels;
        let synth_input = Dense::new(config.d_w, base, 2f64.sqrt(), &mut rng);
        let mut synth_convs = Vec::new();
        let mut c = config.base_channels;
        for (i, s) in config.stages.iter().enumerate() {
            let gain = if i + 1 == config.stages.len() { 1.0 } else { 2f64.sqrt() };
            synth_convs.push(Conv2d::new(c, s.channels, 3, 1, gain, &mut rng));
            c = s.channels;
        }
        Ok(Self {
            config,
            tags,
            mapping,
            synth_input,
            synth_convs,
        })
    }

    pub fn d_w(&self) -> usize {
        self.config.d_w
    }

    pub fn out_shape(&self) -> (usize, usize, usize) {
        self.config.out_shape()
    }

    /// The single component this generator models.
    pub fn tag(&self) -> Result<ComponentTag> {
        match self.tags.as_slice() {
            [t] => Ok(*t),
            _ => Err(Error::InvalidArgument(format!("generator models {} components", self.tags.len()))),
        }
    }

    /// Binds mapping and synthesis tensors, each as parameters or constants.
    pub fn bind(&self, g: &mut Graph, train_mapping: bool, train_synthesis: bool) -> GeneratorVars {
        GeneratorVars {
            config: self.config.clone(),
            mapping: self.mapping.iter().map(|d| d.bind(g, train_mapping)).collect(),
            synth_input: self.synth_input.bind(g, train_synthesis),
            synth_convs: self.synth_convs.iter().map(|c| c.bind(g, train_synthesis)).collect(),
        }
    }

    pub fn map_batch(&self, zs: &[LatentZ]) -> Result<Vec<LatentW>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false, false);
        let z = g.constant(stack_rows(zs.iter().map(|z| z.0.as_slice()), self.config.d_z)?);
        let w = vars.map(&mut g, z)?;
        Ok(g.value(w).data().chunks(self.config.d_w).map(|r| LatentW(r.to_vec())).collect())
    }

    pub fn map_to_w(&self, z: &LatentZ) -> Result<LatentW> {
        Ok(self.map_batch(std::slice::from_ref(z))?.remove(0))
    }

    /// Raw `[0, 1]` output for one latent, all channels.
    pub fn synthesize_image(&self, w: &LatentW) -> Result<Image> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false, false);
        let wv = g.constant(latent_tensor(w, self.config.d_w)?);
        let out = vars.synthesize(&mut g, wv, 1)?;
        let (h, wd, c) = self.out_shape();
        Image::from_tensor(g.value(out), h, wd, c)
    }

    /// Tone-mapped component image for a single-component generator.
    pub fn synthesize(&self, w: &LatentW) -> Result<ComponentImage> {
        let tag = self.tag()?;
        ComponentImage::new(self.synthesize_image(w)?, ColorSpace::Tonemapped, tag)
    }

    /// Average of `n_samples` mapped truncated draws.
    pub fn mean_w(&self, n_samples: usize, seed: u64, truncation: Option<f64>) -> Result<LatentW> {
        if n_samples == 0 {
            return Err(Error::InvalidArgument("mean_w needs at least one sample".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Accumulate offsets from the first sample so a constant mapping
        // yields its value exactly.
        let mut origin: Option<Vec<f64>> = None;
        let mut acc = vec![0.0; self.config.d_w];
        let mut left = n_samples;
        while left > 0 {
            let chunk = left.min(1024);
            let zs = (0..chunk)
                .map(|_| sample_z_with(&mut rng, self.config.d_z, truncation))
                .collect::<Result<Vec<_>>>()?;
            for w in self.map_batch(&zs)? {
                let o = origin.get_or_insert_with(|| w.0.clone());
                for ((a, v), o) in acc.iter_mut().zip(&w.0).zip(o.iter()) {
                    *a += v - o;
                }
            }
            left -= chunk;
        }
        let origin = origin.expect("at least one sample");
        Ok(LatentW(
            origin.iter().zip(acc).map(|(o, a)| o + a / n_samples as f64).collect(),
        ))
    }

    /// Synthesis tensors only, in the order of [`GeneratorVars::synthesis_params`].
    pub fn synthesis_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.synth_input.weight, &mut self.synth_input.bias];
        for c in &mut self.synth_convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct GeneratorMeta {
    config: GeneratorConfig,
    tags: Vec<ComponentTag>,
}

#[derive(Serialize, Deserialize)]
struct DiscriminatorMeta {
    in_shape: (usize, usize, usize),
    config: DiscriminatorConfig,
}

impl Generator {
    /// Appends this generator's metadata and tensors under `prefix`.
    pub fn write_to(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        let meta = GeneratorMeta {
            config: self.config.clone(),
            tags: self.tags.clone(),
        };
        ck.push_json(format!("{prefix}meta"), &meta)?;
        for (name, t) in self.named_tensors() {
            ck.push(format!("{prefix}{name}"), t.clone());
        }
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let meta: GeneratorMeta = ck.get_json(&format!("{prefix}meta"))?;
        let mut g = Generator::new(meta.config, meta.tags, 0)?;
        load_tensors(&mut g, ck, prefix)?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut ck = Checkpoint::new();
        self.write_to(&mut ck, "")?;
        ck.write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::read_from(&Checkpoint::read(path)?, "")
    }
}

impl Discriminator {
    pub fn write_to(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        let meta = DiscriminatorMeta {
            in_shape: self.in_shape(),
            config: DiscriminatorConfig {
                widths: self.net.convs.iter().map(|c| c.c_out()).collect(),
            },
        };
        ck.push_json(format!("{prefix}meta"), &meta)?;
        for (name, t) in self.named_tensors() {
            ck.push(format!("{prefix}{name}"), t.clone());
        }
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let meta: DiscriminatorMeta = ck.get_json(&format!("{prefix}meta"))?;
        let mut d = Discriminator::new(meta.in_shape, &meta.config, 0);
        load_tensors(&mut d, ck, prefix)?;
        Ok(d)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut ck = Checkpoint::new();
        self.write_to(&mut ck, "")?;
        ck.write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::read_from(&Checkpoint::read(path)?, "")
    }
}

/// Overwrites every tensor of `model` with the same-named checkpoint entry.
pub(crate) fn load_tensors<M: Parameterized>(model: &mut M, ck: &Checkpoint, prefix: &str) -> Result<()> {
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(model.tensors_mut()) {
        let t = ck.require(&format!("{prefix}{name}"))?;
        if t.shape() != slot.shape() {
            return Err(Error::Shape(format!(
                "tensor '{prefix}{name}' is {:?}, model expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(())
}

impl Parameterized for Generator {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, d) in self.mapping.iter().enumerate() {
            out.push((format!("mapping.{i}.weight"), &d.weight));
            out.push((format!("mapping.{i}.bias"), &d.bias));
        }
        out.push(("synthesis.input.weight".into(), &self.synth_input.weight));
        out.push(("synthesis.input.bias".into(), &self.synth_input.bias));
        for (i, c) in self.synth_convs.iter().enumerate() {
            out.push((format!("synthesis.conv.{i}.weight"), &c.weight));
            out.push((format!("synthesis.conv.{i}.bias"), &c.bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for d in &mut self.mapping {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out.push(&mut self.synth_input.weight);
        out.push(&mut self.synth_input.bias);
        for c in &mut self.synth_convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }
}

impl GeneratorVars {
    /// Wraps existing nodes given in [`Parameterized::tensors_mut`] order.
    #[cfg(test)]
    pub(crate) fn from_params(config: &GeneratorConfig, params: &[Var]) -> Self {
        let pair = |i: usize| (params[2 * i], params[2 * i + 1]);
        let dense = |i: usize| {
            let (weight, bias) = pair(i);
            DenseVars { weight, bias }
        };
        let m = config.mapping_layers;
        Self {
            config: config.clone(),
            mapping: (0..m).map(dense).collect(),
            synth_input: dense(m),
            synth_convs: (0..config.stages.len())
                .map(|i| {
                    let (w, b) = pair(m + 1 + i);
                    ConvVars::from_parts(w, b, 3, 1)
                })
                .collect(),
        }
    }

    /// `(n, d_z) -> (n, d_w)`.
    pub fn map(&self, g: &mut Graph, z: Var) -> crate::autodiff::Result<Var> {
        let mut x = z;
        for (i, layer) in self.mapping.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i + 1 < self.mapping.len() {
                x = leaky(g, x)?;
            }
        }
        Ok(x)
    }

    /// `(n, d_w) -> (n*H*W, C)` in `[0, 1]`.
    pub fn synthesize(&self, g: &mut Graph, w: Var, n: usize) -> crate::autodiff::Result<Var> {
        let c0 = self.config.base_channels;
        let x = self.synth_input.forward(g, w)?;
        let x = leaky(g, x)?;
        let mut x = g.reshape(x, &[n * BASE_RES * BASE_RES, c0])?;
        let mut res = BASE_RES;
        let last = self.synth_convs.len() - 1;
        for (i, (conv, stage)) in self.synth_convs.iter().zip(&self.config.stages).enumerate() {
            if stage.factor > 1 {
                x = g.upsample(x, n, res, res, stage.factor)?;
                res *= stage.factor;
            }
            let (y, _, _) = conv.forward(g, x, n, res, res)?;
            x = if i == last { g.map(y, Unary::Sigmoid)? } else { leaky(g, y)? };
        }
        Ok(x)
    }

    /// Synthesis parameter nodes in [`Generator::synthesis_tensors_mut`] order.
    pub fn synthesis_params(&self) -> Vec<Var> {
        let mut out = vec![self.synth_input.weight, self.synth_input.bias];
        for c in &self.synth_convs {
            out.extend([c.weight(), c.bias()]);
        }
        out
    }

    /// All parameter nodes in [`Parameterized::tensors_mut`] order.
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for d in &self.mapping {
            out.extend([d.weight, d.bias]);
        }
        out.extend(self.synthesis_params());
        out
    }
}

/// Scores images; higher means more real.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub net: DownNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub widths: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { widths: vec![16, 32] }
    }
}

impl Discriminator {
    pub fn new(in_shape: (usize, usize, usize), config: &DiscriminatorConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            net: DownNet::new(in_shape, &config.widths, 1, &mut rng),
        }
    }

    pub fn in_shape(&self) -> (usize, usize, usize) {
        self.net.in_shape
    }

    /// Logit for each image.
    pub fn score(&self, images: &[Image]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.net.bind(&mut g, false);
        let x = g.constant(stack_images(images)?);
        let s = vars.forward(&mut g, x, images.len())?;
        Ok(g.value(s).data().to_vec())
    }
}

impl Parameterized for Discriminator {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.net.named_tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.tensors_mut()
    }
}

pub(crate) fn latent_tensor(w: &LatentW, d_w: usize) -> Result<Tensor> {
    if w.dim() != d_w {
        return Err(Error::Shape(format!("latent has {} dims, generator expects {d_w}", w.dim())));
    }
    Ok(Tensor::new(vec![1, d_w], w.0.clone())?)
}

pub(crate) fn stack_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != dim {
            return Err(Error::Shape(format!("row of {} values, expected {dim}", r.len())));
        }
        data.extend_from_slice(r);
        n += 1;
    }
    Ok(Tensor::new(vec![n, dim], data)?)
}

/// Batch of equally shaped images as an `(n*h*w, c)` tensor.
pub(crate) fn stack_images(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyDataset)?;
    if images.iter().any(|i| i.shape() != first.shape()) {
        return Err(Error::Shape("batch images differ in shape".into()));
    }
    let data: Vec<f64> = images.iter().flat_map(|i| i.data.iter().copied()).collect();
    Ok(Tensor::new(vec![images.len() * first.height * first.width, first.channels], data)?)
}
