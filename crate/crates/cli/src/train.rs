use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ganbank::datasets::{import_dataset, sha256_hex, Dataset};
use ganbank::forward_models::{ForwardModel, ModelKind};
use ganbank::generators::{train_gan, train_joint_gan, GanConfig, Generator, GeneratorConfig};
use ganbank::image::{ComponentTag, Image};
use ganbank::inversion::{synthetic_encoder_data, train_encoder, EncoderConfig, EncoderSample};
use ganbank::{io, Error, Result};
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, DISCRIMINATOR_FILE, GENERATOR_FILE, TRAIN_INFO_FILE, TRAIN_LOG_FILE};
use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Albedo,
    Shading,
    Specular,
    /// Albedo and shading from one six-channel generator.
    Joint,
}

impl Component {
    pub fn tags(self) -> Vec<ComponentTag> {
        match self {
            Component::Albedo => vec![ComponentTag::Albedo],
            Component::Shading => vec![ComponentTag::Shading],
            Component::Specular => vec![ComponentTag::Specular],
            Component::Joint => vec![ComponentTag::Albedo, ComponentTag::Shading],
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub component: Component,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainInfo {
    pub component: Component,
    pub tags: Vec<ComponentTag>,
    pub train_images: usize,
    pub manifest_sha256: String,
    pub param_count: usize,
    pub generator: GeneratorConfig,
    pub gan: GanConfig,
}

fn load_dataset(root: &Path) -> Result<(Dataset, String)> {
    let manifest = root.join("manifest.json");
    artifacts::require_file(&manifest)?;
    let sha = sha256_hex(&std::fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?);
    Ok((import_dataset(root)?, sha))
}

/// Trains one GAN on the dataset's training split. Writes the generator and
/// discriminator checkpoints, the per-step log, and a run summary under
/// `--out`; returns the generator path.
pub fn run(a: &TrainArgs) -> Result<PathBuf> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let gan = GanConfig {
        steps: a.steps.unwrap_or(cfg.gan.steps),
        batch: a.batch.unwrap_or(cfg.gan.batch),
        seed: a.seed.unwrap_or(cfg.gan.seed),
        ..cfg.gan
    };
    let (ds, manifest_sha256) = load_dataset(&a.data)?;
    let tags = a.component.tags();
    let size = ds.scenes.first().ok_or(Error::EmptyDataset)?.composed.height;
    let single = cfg.generator.clone();
    if single.resolution() != size {
        return Err(Error::Shape(format!(
            "generator resolution {} does not match {size}x{size} dataset images",
            single.resolution()
        )));
    }
    let (gen, disc, log) = if a.component == Component::Joint {
        train_joint_gan(&ds.joint_images(&ds.train, &tags)?, &single, &tags, &gan)?
    } else {
        train_gan(&ds.tonemapped_images(&ds.train, tags[0])?, single, tags[0], &gan)?
    };
    io::create_dir(&a.out)?;
    let gen_path = a.out.join(GENERATOR_FILE);
    gen.save(&gen_path)?;
    disc.save(a.out.join(DISCRIMINATOR_FILE))?;
    io::write_json(a.out.join(TRAIN_LOG_FILE), &log.steps)?;
    let info = TrainInfo {
        component: a.component,
        tags,
        train_images: ds.train.len(),
        manifest_sha256,
        param_count: gen.config.param_count(),
        generator: gen.config.clone(),
        gan,
    };
    io::write_json(a.out.join(TRAIN_INFO_FILE), &info)?;
    Ok(gen_path)
}

#[derive(Debug, Clone, Args)]
pub struct TrainEncoderArgs {
    /// Generator directories or checkpoints, one encoder each.
    #[arg(long, num_args = 1.., required = true)]
    pub gens: Vec<PathBuf>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset whose training split adds real composed images.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Composed draws from the generators used as training pairs. Defaults
    /// to 0 with `--data` and 2048 without.
    #[arg(long)]
    pub n_synthetic: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// File name of the encoder for a generator with these components.
pub fn encoder_file(tags: &[ComponentTag]) -> String {
    let names: Vec<&str> = tags.iter().map(|t| t.as_str()).collect();
    format!("{}.jinv", names.join("+"))
}

/// Per-generator samples from real scenes: the composed image paired with
/// the generator-space ground truth.
fn real_encoder_data(ds: &Dataset, gens: &[Generator], model: &ForwardModel) -> Result<Vec<Vec<EncoderSample>>> {
    let mut out = vec![Vec::new(); gens.len()];
    for &i in &ds.train {
        let scene = &ds.scenes[i];
        let image = scene.composed_with(model)?;
        for (slot, g) in out.iter_mut().zip(gens) {
            let parts = g.tags.iter().map(|t| Ok(scene.tonemapped(*t)?.image)).collect::<Result<Vec<Image>>>()?;
            let component = Image::stack_channels(&parts.iter().collect::<Vec<_>>())?;
            slot.push(EncoderSample { image: image.clone(), w: None, component: Some(component) });
        }
    }
    Ok(out)
}

pub fn train_encoders(
    gens: &[Generator],
    model: &ForwardModel,
    real: Option<&Dataset>,
    n_synthetic: usize,
    cfg: &EncoderConfig,
) -> Result<Vec<ganbank::inversion::Encoder>> {
    let refs: Vec<&Generator> = gens.iter().collect();
    let mut data = synthetic_encoder_data(&refs, model, n_synthetic, cfg.seed)?;
    if let Some(ds) = real {
        for (slot, extra) in data.iter_mut().zip(real_encoder_data(ds, gens, model)?) {
            slot.extend(extra);
        }
    }
    gens.iter()
        .zip(&data)
        .map(|(g, d)| {
            let id = encoder_file(&g.tags);
            train_encoder(g, id.trim_end_matches(".jinv"), d, cfg)
        })
        .collect()
}

/// Trains one encoder per generator and writes them to `--out`, named
/// after each generator's components.
pub fn run_encoder(a: &TrainEncoderArgs) -> Result<PathBuf> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let model = ForwardModel::new(a.model.unwrap_or(cfg.model));
    let gens = a.gens.iter().map(|p| artifacts::load_generator(p)).collect::<Result<Vec<_>>>()?;
    let tags: Vec<ComponentTag> = gens.iter().flat_map(|g| g.tags.iter().copied()).collect();
    model.check_tags(&tags)?;
    let enc_cfg = EncoderConfig {
        steps: a.steps.unwrap_or(cfg.encoder.steps),
        seed: a.seed.unwrap_or(cfg.encoder.seed),
        ..cfg.encoder
    };
    let real = match &a.data {
        Some(root) => Some(load_dataset(root)?.0),
        None => None,
    };
    let n_synthetic = a.n_synthetic.unwrap_or(if real.is_some() { 0 } else { 2048 });
    let encoders = train_encoders(&gens, &model, real.as_ref(), n_synthetic, &enc_cfg)?;
    io::create_dir(&a.out)?;
    for (g, e) in gens.iter().zip(&encoders) {
        e.save(a.out.join(encoder_file(&g.tags)))?;
    }
    io::write_json(a.out.join("encoders.json"), &enc_cfg)?;
    Ok(a.out.clone())
}
