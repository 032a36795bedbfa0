use std::path::PathBuf;

use clap::Args;
use ganbank::forward_models::ForwardModel;
use ganbank::generators::sefa_directions;
use ganbank::inversion::relight;
use ganbank::{io, Error, Result};
use serde::Serialize;

use crate::artifacts;
use crate::invert::load_result;

#[derive(Debug, Clone, Args)]
pub struct RelightArgs {
    /// Directory written by `invert`.
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long)]
    pub shading_gen: PathBuf,
    /// Index of the edit direction, strongest first.
    #[arg(long)]
    pub direction: usize,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub alphas: Vec<f64>,
    /// Defaults to `<result>/relight`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of directions to compute; defaults to the latent size.
    #[arg(long)]
    pub q: Option<usize>,
}

#[derive(Serialize)]
struct RelightInfo<'a> {
    shading_gen: &'a PathBuf,
    direction: usize,
    eigenvalue: f64,
    alphas: &'a [f64],
    files: Vec<String>,
}

pub fn frame_name(i: usize) -> String {
    format!("relight_{i:03}.png")
}

/// Writes one recomposed PNG per alpha and returns the output directory.
pub fn run(a: &RelightArgs) -> Result<PathBuf> {
    if !a.result.is_dir() {
        return Err(Error::MissingFile(a.result.clone()));
    }
    let (summary, _, result) = load_result(&a.result)?;
    let shading = artifacts::load_generator(&a.shading_gen)?;
    let dirs = sefa_directions(&shading, a.q.unwrap_or(shading.d_w()))?;
    let frames = relight(&result, &shading, &dirs, a.direction, &a.alphas, &ForwardModel::new(summary.model))?;
    let out = a.out.clone().unwrap_or_else(|| a.result.join("relight"));
    io::create_dir(&out)?;
    let mut files = Vec::with_capacity(frames.len());
    for (i, img) in frames.iter().enumerate() {
        let name = frame_name(i);
        io::write_png(out.join(&name), img)?;
        files.push(name);
    }
    let info = RelightInfo {
        shading_gen: &a.shading_gen,
        direction: a.direction,
        eigenvalue: dirs.eigenvalues[a.direction],
        alphas: &a.alphas,
        files,
    };
    io::write_json(out.join("relight.json"), &info)?;
    Ok(out)
}
