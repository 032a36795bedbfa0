use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ganbank::datasets::{import_dataset, Dataset, SceneTuple};
use ganbank::forward_models::{ForwardModel, ModelKind};
use ganbank::generators::{Discriminator, Generator, LatentW};
use ganbank::image::{ComponentImage, ComponentTag, Image};
use ganbank::inversion::{
    encoder_init, joint_invert, pti_finetune, Encoder, InversionConfig, InversionResult, Prior, PtiConfig,
};
use ganbank::metrics::{MetricReport, Scores};
use ganbank::priors::RegularizerChoice;
use ganbank::{io, Error, Result};
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, parallel_map, thread_count};
use crate::config::RunConfig;
use crate::invert::build_priors;
use crate::train::encoder_file;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Opt,
    OptInDomain,
    OptKnn,
    EncOptKnn,
    PtiNoD,
    PtiD,
    SingleJoint,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Opt,
        Variant::OptInDomain,
        Variant::OptKnn,
        Variant::EncOptKnn,
        Variant::PtiNoD,
        Variant::PtiD,
        Variant::SingleJoint,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Opt => "Opt",
            Variant::OptInDomain => "Opt+InDomain",
            Variant::OptKnn => "Opt+kNN",
            Variant::EncOptKnn => "Enc+Opt+kNN",
            Variant::PtiNoD => "+PTI w/o D",
            Variant::PtiD => "+PTI w/ D",
            Variant::SingleJoint => "single-joint-GAN",
        }
    }

    fn needs_encoders(self) -> bool {
        matches!(self, Variant::EncOptKnn | Variant::PtiNoD | Variant::PtiD)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    #[value(name = "faces-style")]
    FacesStyle,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Holds `albedo/`, `shading/`, `joint/` (and `specular/`) generator
    /// directories plus `encoders/` from `train-encoder`.
    #[arg(long)]
    pub gens_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of test scenes; defaults to the whole test split.
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bank_size: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Trained networks for the variant grid. Optional parts may be empty when
/// no requested variant uses them.
pub struct Models {
    pub model: ForwardModel,
    /// One generator per component, in model order.
    pub separate: Vec<Generator>,
    /// Discriminators matching `separate`, for the local D loss.
    pub discriminators: Vec<Discriminator>,
    /// Encoders matching `separate`.
    pub encoders: Vec<Encoder>,
    /// The six-channel albedo+shading generator, plus the separate specular
    /// generator under the non-Lambertian model.
    pub joint: Vec<Generator>,
}

impl Models {
    /// Loads what `variants` need from a `--gens-dir` layout.
    pub fn load(dir: &Path, model: ForwardModel, variants: &[Variant]) -> Result<Self> {
        let load = |name: &str| artifacts::load_generator(&dir.join(name));
        let names: Vec<&str> = model.tags().iter().map(|t| t.as_str()).collect();
        let separate = names.iter().map(|n| load(n)).collect::<Result<Vec<_>>>()?;
        let discriminators = if variants.contains(&Variant::PtiD) {
            names.iter().map(|n| artifacts::load_discriminator(&dir.join(n))).collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let encoders = if variants.iter().any(|v| v.needs_encoders()) {
            separate
                .iter()
                .map(|g| {
                    let p = dir.join("encoders").join(encoder_file(&g.tags));
                    artifacts::require_file(&p)?;
                    Encoder::load(p)
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let joint = if variants.contains(&Variant::SingleJoint) {
            let mut j = vec![load("joint")?];
            if model.kind == ModelKind::NonLambertian {
                j.push(load("specular")?);
            }
            j
        } else {
            Vec::new()
        };
        Ok(Self { model, separate, discriminators, encoders, joint })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    /// Shared optimizer settings; the regularizer kind is set per variant.
    pub inversion: InversionConfig,
    pub in_domain_weight: f64,
    pub knn_weight: f64,
    pub k: usize,
    pub pti: PtiConfig,
    pub bank_size: usize,
    /// Step size for the optimization that starts from encoded codes.
    pub encoder_refine_lr: f64,
}

impl SuiteConfig {
    pub fn from_run_config(cfg: &RunConfig) -> Self {
        Self {
            inversion: cfg.inversion.clone(),
            in_domain_weight: cfg.inversion.regularizer.weight,
            knn_weight: cfg.inversion.regularizer.weight,
            k: cfg.inversion.regularizer.k,
            pti: PtiConfig { seed: cfg.inversion.seed, ..cfg.pti.clone() },
            bank_size: cfg.bank_size,
            encoder_refine_lr: cfg.encoder.refine_lr,
        }
    }

    fn with_reg(&self, reg: RegularizerChoice) -> InversionConfig {
        InversionConfig { regularizer: reg, ..self.inversion.clone() }
    }
}

/// Per-variant scores on one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOutcome {
    pub scene: String,
    pub reports: Vec<(Variant, VariantScores)>,
}

impl SceneOutcome {
    pub fn get(&self, v: Variant) -> Option<&VariantScores> {
        self.reports.iter().find(|(x, _)| *x == v).map(|(_, s)| s)
    }
}

/// The four metric groups reported per variant, plus cross-contamination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantScores {
    pub albedo: Scores,
    pub shading: Scores,
    pub specular: Scores,
    pub image: Scores,
    pub contamination: f64,
    /// Mean MSE over the components the model recovers.
    pub component_mse: f64,
}

impl VariantScores {
    pub fn group(&self, tag: ComponentTag) -> &Scores {
        match tag {
            ComponentTag::Albedo => &self.albedo,
            ComponentTag::Shading => &self.shading,
            ComponentTag::Specular => &self.specular,
        }
    }

    /// Under the Lambertian model the specular estimate is zero; its group
    /// scores that zero image against the ground truth.
    fn from_report(report: &MetricReport, gt_specular: &Image) -> Result<Self> {
        let pick = |t: ComponentTag| report.components.get(&t).copied();
        let specular = match pick(ComponentTag::Specular) {
            Some(s) => s,
            None => Scores::between(&gt_specular.map(|_| 0.0), gt_specular)?,
        };
        let missing = || Error::Invariant("report lacks albedo or shading".into());
        Ok(Self {
            albedo: pick(ComponentTag::Albedo).ok_or_else(missing)?,
            shading: pick(ComponentTag::Shading).ok_or_else(missing)?,
            specular,
            image: report.image,
            contamination: report.contamination,
            component_mse: report.mean_component_mse(),
        })
    }

    fn mean(all: &[&VariantScores]) -> Self {
        let n = all.len() as f64;
        let avg = |f: &dyn Fn(&VariantScores) -> f64| all.iter().map(|s| f(s)).sum::<f64>() / n;
        let scores = |g: &dyn Fn(&VariantScores) -> Scores| Scores {
            mse: avg(&|s| g(s).mse),
            psnr: avg(&|s| g(s).psnr),
            ssim: avg(&|s| g(s).ssim),
        };
        Self {
            albedo: scores(&|s| s.albedo),
            shading: scores(&|s| s.shading),
            specular: scores(&|s| s.specular),
            image: scores(&|s| s.image),
            contamination: avg(&|s| s.contamination),
            component_mse: avg(&|s| s.component_mse),
        }
    }
}

/// Shared state for running variants on many scenes.
pub struct Runner<'a> {
    models: &'a Models,
    cfg: SuiteConfig,
    separate_priors: Vec<Prior>,
    joint_priors: Vec<Prior>,
}

impl<'a> Runner<'a> {
    pub fn new(models: &'a Models, cfg: SuiteConfig) -> Result<Self> {
        let sep: Vec<&Generator> = models.separate.iter().collect();
        let joint: Vec<&Generator> = models.joint.iter().collect();
        Ok(Self {
            separate_priors: build_priors(&sep, cfg.bank_size, cfg.inversion.seed)?,
            joint_priors: build_priors(&joint, cfg.bank_size, cfg.inversion.seed)?,
            models,
            cfg,
        })
    }

    fn invert(&self, target: &Image, gens: &[Generator], priors: &[Prior], reg: RegularizerChoice, init: Option<&[LatentW]>) -> Result<InversionResult> {
        let refs: Vec<&Generator> = gens.iter().collect();
        joint_invert(target, &refs, priors, &self.models.model, &self.cfg.with_reg(reg), init)
    }

    fn pti(&self, target: &Image, w_hats: &[LatentW], use_d_loss: bool) -> Result<InversionResult> {
        let refs: Vec<&Generator> = self.models.separate.iter().collect();
        let discs: Vec<&Discriminator> = if use_d_loss { self.models.discriminators.iter().collect() } else { Vec::new() };
        let cfg = PtiConfig { use_d_loss, ..self.cfg.pti.clone() };
        Ok(pti_finetune(&refs, &discs, w_hats, target, &self.models.model, &cfg)?.1)
    }

    /// Raw inversion results for `variants` on one target.
    pub fn results(&self, target: &Image, variants: &[Variant]) -> Result<Vec<(Variant, InversionResult)>> {
        let knn = RegularizerChoice::knn(self.cfg.knn_weight, self.cfg.k);
        let sep = &self.models.separate;
        let mut out = Vec::new();
        let mut enc_result: Option<InversionResult> = None;
        for &v in variants {
            let r = match v {
                Variant::Opt => self.invert(target, sep, &self.separate_priors, RegularizerChoice::none(), None)?,
                Variant::OptInDomain => self.invert(
                    target,
                    sep,
                    &self.separate_priors,
                    RegularizerChoice::in_domain(self.cfg.in_domain_weight),
                    None,
                )?,
                Variant::OptKnn => self.invert(target, sep, &self.separate_priors, knn, None)?,
                Variant::SingleJoint => self.invert(target, &self.models.joint, &self.joint_priors, knn, None)?,
                Variant::EncOptKnn | Variant::PtiNoD | Variant::PtiD => {
                    if enc_result.is_none() {
                        let refs: Vec<&Generator> = sep.iter().collect();
                        let encs: Vec<&Encoder> = self.models.encoders.iter().collect();
                        let init = encoder_init(&encs, &refs, target)?;
                        let cfg = InversionConfig { lr: self.cfg.encoder_refine_lr, ..self.cfg.with_reg(knn) };
                        enc_result = Some(joint_invert(target, &refs, &self.separate_priors, &self.models.model, &cfg, Some(&init))?);
                    }
                    let base = enc_result.as_ref().expect("set above");
                    match v {
                        Variant::EncOptKnn => base.clone(),
                        Variant::PtiNoD => self.pti(target, &base.w_hats, false)?,
                        _ => self.pti(target, &base.w_hats, true)?,
                    }
                }
            };
            out.push((v, r));
        }
        Ok(out)
    }

    /// Scores every requested variant on one scene.
    pub fn run_scene(&self, id: &str, scene: &SceneTuple, variants: &[Variant]) -> Result<SceneOutcome> {
        let model = &self.models.model;
        let target = scene.composed_with(model)?;
        let gt: Vec<ComponentImage> = model.tags().iter().map(|t| scene.tonemapped(*t)).collect::<Result<_>>()?;
        let gt_specular = scene.tonemapped(ComponentTag::Specular)?.image;
        let mut reports = Vec::new();
        for (v, mut r) in self.results(&target, variants)? {
            let report = r.evaluate(&gt, &target)?;
            reports.push((v, VariantScores::from_report(report, &gt_specular)?));
        }
        Ok(SceneOutcome { scene: id.to_string(), reports })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    #[serde(flatten)]
    pub scores: VariantScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: String,
    pub model: ModelKind,
    pub scenes: Vec<String>,
    pub rows: Vec<AblationRow>,
    pub per_scene: Vec<SceneOutcome>,
}

/// Runs `variants` over `scene_indices` of `ds` on up to `threads` workers.
pub fn run_suite(
    models: &Models,
    cfg: SuiteConfig,
    ds: &Dataset,
    scene_indices: &[usize],
    variants: &[Variant],
    threads: usize,
) -> Result<AblationTable> {
    let runner = Runner::new(models, cfg)?;
    let per_scene = parallel_map(scene_indices, threads, |&i| {
        runner.run_scene(&Dataset::scene_id(i), &ds.scenes[i], variants)
    })?;
    let rows = variants
        .iter()
        .map(|&v| {
            let all: Vec<&VariantScores> = per_scene.iter().filter_map(|s| s.get(v)).collect();
            AblationRow { variant: v.label().to_string(), scores: VariantScores::mean(&all) }
        })
        .collect();
    Ok(AblationTable {
        suite: "faces-style".into(),
        model: models.model.kind,
        scenes: per_scene.iter().map(|s| s.scene.clone()).collect(),
        rows,
        per_scene,
    })
}

pub const GROUPS: [&str; 4] = ["albedo", "shading", "specular", "image"];
pub const METRICS: [&str; 3] = ["mse", "psnr", "ssim"];

pub fn csv_header() -> Vec<String> {
    let mut h = vec!["variant".to_string()];
    for g in GROUPS {
        for m in METRICS {
            h.push(format!("{g}_{m}"));
        }
    }
    h
}

pub fn write_csv(table: &AblationTable, path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Invariant(format!("csv: {e}"));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(csv_header()).map_err(csv_err)?;
    for row in &table.rows {
        let s = &row.scores;
        let mut rec = vec![row.variant.clone()];
        for g in [&s.albedo, &s.shading, &s.specular, &s.image] {
            rec.extend([g.mse, g.psnr, g.ssim].iter().map(|v| v.to_string()));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs the full variant grid and writes `ablation.csv` and `ablation.json`.
pub fn run(a: &AblateArgs) -> Result<PathBuf> {
    let Suite::FacesStyle = a.suite;
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.inversion.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.inversion.seed = s;
    }
    if let Some(b) = a.bank_size {
        cfg.bank_size = b;
    }
    cfg.inversion.validate()?;
    let model = ForwardModel::new(a.model.unwrap_or(cfg.model));
    artifacts::require_file(&a.data.join("manifest.json"))?;
    let ds = import_dataset(&a.data)?;
    let n = a.n_test.unwrap_or(ds.test.len()).min(ds.test.len());
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let models = Models::load(&a.gens_dir, model, &Variant::ALL)?;
    let table = run_suite(&models, SuiteConfig::from_run_config(&cfg), &ds, &ds.test[..n], &Variant::ALL, thread_count())?;
    io::create_dir(&a.out)?;
    let csv_path = a.out.join("ablation.csv");
    write_csv(&table, &csv_path)?;
    io::write_json(a.out.join("ablation.json"), &table)?;
    Ok(csv_path)
}
