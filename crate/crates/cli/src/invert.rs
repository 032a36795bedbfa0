use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ganbank::forward_models::{ForwardModel, ModelKind};
use ganbank::generators::{Discriminator, Generator};
use ganbank::image::ComponentTag;
use ganbank::inversion::{
    encoder_init, joint_invert, pti_finetune, Encoder, InversionConfig, InversionResult, LossRecord, Prior, PtiConfig,
};
use ganbank::metrics::MetricReport;
use ganbank::priors::{RegularizerChoice, RegularizerKind};
use ganbank::{io, Error, Result};
use serde::{Deserialize, Serialize};

use crate::artifacts;
use crate::config::RunConfig;
use crate::train::encoder_file;

pub const RESULT_VERSION: u32 = 1;
pub const TUNED_DIR: &str = "tuned";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegArg {
    None,
    Indomain,
    Knn,
}

impl From<RegArg> for RegularizerKind {
    fn from(r: RegArg) -> Self {
        match r {
            RegArg::None => RegularizerKind::None,
            RegArg::Indomain => RegularizerKind::InDomain,
            RegArg::Knn => RegularizerKind::Knn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PtiMode {
    Off,
    #[value(name = "no_dloss")]
    NoDloss,
    Dloss,
}

#[derive(Debug, Clone, Args)]
pub struct InvertArgs {
    /// Composed image (PNG).
    #[arg(long)]
    pub target: PathBuf,
    /// Generator directories or checkpoints.
    #[arg(long, num_args = 1..)]
    pub gens: Vec<PathBuf>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long, value_enum, default_value_t = RegArg::Knn)]
    pub reg: RegArg,
    /// Start from encoder predictions instead of the mean code.
    #[arg(long)]
    pub encoder_init: bool,
    /// Encoder checkpoints, one per generator, or a directory written by
    /// `train-encoder`.
    #[arg(long, num_args = 1..)]
    pub encoder: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = PtiMode::Off)]
    pub pti: PtiMode,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Defaults to the config's inversion lr, or its encoder refine lr with
    /// `--encoder-init`.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Regularizer weight.
    #[arg(long)]
    pub weight: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bank_size: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Contents of `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertSummary {
    pub version: u32,
    pub target: PathBuf,
    pub model: ModelKind,
    /// Generators that produce the exported components; relative paths
    /// resolve against the result directory first.
    pub generators: Vec<PathBuf>,
    pub source_generators: Vec<PathBuf>,
    pub regularizer: RegularizerKind,
    pub inversion: InversionConfig,
    pub bank_size: usize,
    pub encoder_init: bool,
    pub encoders: Vec<PathBuf>,
    pub pti: PtiMode,
    pub pti_config: Option<PtiConfig>,
    pub final_loss: LossRecord,
    pub clipped: usize,
    pub metrics: Option<MetricReport>,
}

/// Identifier for a generator's sample bank.
pub fn generator_id(g: &Generator) -> String {
    encoder_file(&g.tags).trim_end_matches(".jinv").to_string()
}

pub fn build_priors(gens: &[&Generator], bank_size: usize, seed: u64) -> Result<Vec<Prior>> {
    gens.iter().map(|g| Prior::build(g, &generator_id(g), bank_size, seed)).collect()
}

/// Encoder paths for `gens`: explicit files in generator order, or one
/// directory holding the `train-encoder` outputs.
pub fn resolve_encoders(paths: &[PathBuf], gens: &[&Generator]) -> Result<Vec<PathBuf>> {
    let resolved: Vec<PathBuf> = match paths {
        [dir] if dir.is_dir() => gens.iter().map(|g| dir.join(encoder_file(&g.tags))).collect(),
        _ => paths.to_vec(),
    };
    if resolved.len() != gens.len() {
        return Err(Error::InvalidArgument(format!(
            "--encoder-init needs one encoder per generator ({} given for {})",
            resolved.len(),
            gens.len()
        )));
    }
    for p in &resolved {
        artifacts::require_file(p)?;
    }
    Ok(resolved)
}

pub fn pti_config(base: &PtiConfig, mode: PtiMode) -> Option<PtiConfig> {
    match mode {
        PtiMode::Off => None,
        PtiMode::NoDloss => Some(PtiConfig { use_d_loss: false, ..base.clone() }),
        PtiMode::Dloss => Some(PtiConfig { use_d_loss: true, ..base.clone() }),
    }
}

pub fn run(a: &InvertArgs) -> Result<PathBuf> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let model = ForwardModel::new(a.model.unwrap_or(cfg.model));
    let gen_paths = if a.gens.is_empty() { cfg.paths.gens.clone() } else { a.gens.clone() };
    if gen_paths.is_empty() {
        return Err(Error::InvalidArgument("no generators given (--gens)".into()));
    }
    let gens = gen_paths.iter().map(|p| artifacts::load_generator(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Generator> = gens.iter().collect();
    let tags: Vec<ComponentTag> = gens.iter().flat_map(|g| g.tags.iter().copied()).collect();
    model.check_tags(&tags)?;
    let target = io::read_png(&a.target)?;

    let base = &cfg.inversion;
    let inv = InversionConfig {
        steps: a.steps.unwrap_or(base.steps),
        lr: a.lr.unwrap_or(if a.encoder_init { cfg.encoder.refine_lr } else { base.lr }),
        seed: a.seed.unwrap_or(base.seed),
        regularizer: RegularizerChoice {
            kind: a.reg.into(),
            weight: a.weight.unwrap_or(base.regularizer.weight),
            k: a.k.unwrap_or(base.regularizer.k),
            scale: base.regularizer.scale,
        },
        ..base.clone()
    };
    inv.validate()?;
    let bank_size = a.bank_size.unwrap_or(cfg.bank_size);

    let encoder_paths = if a.encoder_init {
        let given = if a.encoder.is_empty() { &cfg.paths.encoders } else { &a.encoder };
        if given.is_empty() {
            return Err(Error::InvalidArgument("--encoder-init needs encoder checkpoints (--encoder)".into()));
        }
        resolve_encoders(given, &refs)?
    } else {
        Vec::new()
    };
    let init = if a.encoder_init {
        let encoders = encoder_paths.iter().map(Encoder::load).collect::<Result<Vec<_>>>()?;
        Some(encoder_init(&encoders.iter().collect::<Vec<_>>(), &refs, &target)?)
    } else {
        None
    };

    let priors = build_priors(&refs, bank_size, inv.seed)?;
    let mut result = joint_invert(&target, &refs, &priors, &model, &inv, init.as_deref())?;

    let pti_cfg = pti_config(&PtiConfig { seed: inv.seed, ..cfg.pti.clone() }, a.pti);
    let mut generators = gen_paths.clone();
    let mut pti_trace = None;
    if let Some(pc) = &pti_cfg {
        let discs: Vec<Discriminator> = if pc.use_d_loss {
            gen_paths.iter().map(|p| artifacts::load_discriminator(p)).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let (tuned, mut post) =
            pti_finetune(&refs, &discs.iter().collect::<Vec<_>>(), &result.w_hats, &target, &model, pc)?;
        pti_trace = Some(std::mem::replace(&mut post.loss_trace, result.loss_trace.clone()));
        io::create_dir(a.out.join(TUNED_DIR))?;
        generators = Vec::new();
        for g in &tuned {
            let rel = Path::new(TUNED_DIR).join(encoder_file(&g.tags));
            g.save(a.out.join(&rel))?;
            generators.push(rel);
        }
        result = post;
    }

    if let Some(gt) = artifacts::ground_truth(&a.target, &model)? {
        result.evaluate(&gt, &target)?;
    }
    let summary = InvertSummary {
        version: RESULT_VERSION,
        target: a.target.clone(),
        model: model.kind,
        generators,
        source_generators: gen_paths,
        regularizer: inv.regularizer.kind,
        inversion: inv,
        bank_size,
        encoder_init: a.encoder_init,
        encoders: encoder_paths,
        pti: a.pti,
        pti_config: pti_cfg,
        final_loss: *result.loss_trace.last().expect("trace has steps + 1 entries"),
        clipped: result.clipped,
        metrics: result.metrics.clone(),
    };
    result.export(&a.out, &summary)?;
    if let Some(trace) = pti_trace {
        io::write_json(a.out.join("pti_trace.json"), &trace)?;
    }
    Ok(a.out.join("result.json"))
}

/// Rebuilds an exported result from its directory.
pub fn load_result(dir: &Path) -> Result<(InvertSummary, Vec<Generator>, InversionResult)> {
    let path = dir.join("result.json");
    artifacts::require_file(&path)?;
    let summary: InvertSummary = io::read_json(&path)?;
    let gens = summary
        .generators
        .iter()
        .map(|p| {
            let local = dir.join(p);
            artifacts::load_generator(if p.is_relative() && local.exists() { &local } else { p })
        })
        .collect::<Result<Vec<_>>>()?;
    let (w_hats, tags) = ganbank::inversion::read_latents(dir)?;
    if tags != gens.iter().map(|g| g.tags.clone()).collect::<Vec<_>>() {
        return Err(Error::Invariant(format!("{}: saved codes do not match the listed generators", dir.display())));
    }
    let trace: Vec<LossRecord> = io::read_json(dir.join("loss_trace.json"))?;
    let result = InversionResult::from_latents(&gens.iter().collect::<Vec<_>>(), &ForwardModel::new(summary.model), w_hats, trace)?;
    Ok((summary, gens, result))
}
