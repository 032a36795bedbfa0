use std::path::PathBuf;

use clap::Args;
use ganbank::datasets::{export_dataset, synth_dataset};
use ganbank::Result;

use crate::config::RunConfig;

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image side length in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    /// Upper bound on specular blobs per scene; 0 gives Lambertian scenes.
    #[arg(long)]
    pub max_specular: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Writes the dataset and returns the manifest path.
pub fn run(a: &SynthArgs) -> Result<PathBuf> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let mut ranges = cfg.scene_ranges;
    if let Some(size) = a.size {
        ranges.image_size = size;
    }
    if let Some(m) = a.max_specular {
        ranges.specular_count = (0, m);
    }
    let ds = synth_dataset(a.n, a.seed.unwrap_or(cfg.seed), &ranges)?;
    export_dataset(&ds, &a.out)
}
