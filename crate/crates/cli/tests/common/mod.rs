#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ganbank::Result;

pub fn cli(args: &[&str]) -> Result<PathBuf> {
    ganbank_cli::run_from(std::iter::once("ganbank").chain(args.iter().copied()))
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// 8x8 generators so the whole pipeline runs in a few seconds.
pub const TINY_CONFIG: &str = r#"{
  "version": 1,
  "bank_size": 200,
  "scene_ranges": { "image_size": 8 },
  "generator": {
    "d_z": 4, "d_w": 4, "mapping_hidden": 8, "mapping_layers": 2,
    "base_channels": 8, "stages": [{ "factor": 2, "channels": 3 }]
  },
  "gan": { "batch": 2, "discriminator": { "widths": [4, 8] } },
  "encoder": { "steps": 10, "batch": 2, "widths": [4] },
  "pti": { "steps": 5, "n_anchors": 2 }
}"#;

pub struct Tiny {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub data: PathBuf,
    pub gens: PathBuf,
}

impl Tiny {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn target(&self, scene: usize) -> PathBuf {
        self.data.join("scenes").join(format!("scene_{scene:05}")).join("composed.png")
    }
}

/// Dataset, albedo/shading/joint GANs and encoders under one temp dir.
pub fn tiny() -> Tiny {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let data = dir.path().join("data");
    let gens = dir.path().join("gens");
    cli(&["synth", "--n", "12", "--out", s(&data), "--seed", "3", "--config", s(&config)]).unwrap();
    for c in ["albedo", "shading", "joint"] {
        let out = gens.join(c);
        cli(&["train", "--component", c, "--data", s(&data), "--steps", "6", "--out", s(&out), "--config", s(&config)])
            .unwrap();
    }
    let enc = gens.join("encoders");
    cli(&[
        "train-encoder",
        "--gens",
        s(&gens.join("albedo")),
        s(&gens.join("shading")),
        "--out",
        s(&enc),
        "--data",
        s(&data),
        "--n-synthetic",
        "8",
        "--config",
        s(&config),
    ])
    .unwrap();
    Tiny { dir, config, data, gens }
}
