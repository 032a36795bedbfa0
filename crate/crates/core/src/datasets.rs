//! Procedural scenes with ground-truth albedo, shading and specular layers,
//! plus on-disk persistence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward_models::{encode_component, ForwardModel};
use crate::image::{ColorSpace, ComponentImage, ComponentTag, Image};
use crate::io;

pub const MANIFEST_VERSION: u32 = 1;

/// Fraction of scenes assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.7;

pub fn default_palette() -> Vec<[f64; 3]> {
    vec![
        [0.80, 0.22, 0.20],
        [0.22, 0.60, 0.30],
        [0.20, 0.32, 0.80],
        [0.90, 0.78, 0.30],
        [0.60, 0.30, 0.70],
        [0.30, 0.70, 0.80],
        [0.85, 0.85, 0.85],
        [0.50, 0.35, 0.20],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub image_size: usize,
    pub n_shapes: usize,
    /// Light position in pixels; may lie outside the frame.
    pub light_pos: [f64; 2],
    /// Inverse-square falloff per squared pixel.
    pub light_falloff: f64,
    /// Peak shading value.
    pub light_intensity: f64,
    /// Opacity of cast shadows; 0 disables them.
    pub shadow_strength: f64,
    pub albedo_palette: Vec<[f64; 3]>,
    pub specular_count: usize,
    pub specular_sigma: f64,
    /// Drives geometry and albedo.
    pub seed: u64,
    /// Drives lighting-only randomness (highlight strengths).
    pub light_seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_shapes: 3,
            light_pos: [8.0, 8.0],
            light_falloff: 0.001,
            light_intensity: 1.5,
            shadow_strength: 0.5,
            albedo_palette: default_palette(),
            specular_count: 0,
            specular_sigma: 1.5,
            seed: 0,
            light_seed: 0,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidArgument(what));
        if self.image_size < 4 {
            return bad(format!("image_size must be at least 4, got {}", self.image_size));
        }
        if !self.light_pos.iter().all(|v| v.is_finite()) {
            return bad("light_pos must be finite".into());
        }
        if !(self.light_falloff >= 0.0 && self.light_falloff.is_finite()) {
            return bad(format!("light_falloff must be nonnegative, got {}", self.light_falloff));
        }
        if !(self.light_intensity > 0.0 && self.light_intensity <= 2.0) {
            return bad(format!("light_intensity must be in (0, 2], got {}", self.light_intensity));
        }
        if !(0.0..=0.9).contains(&self.shadow_strength) {
            return bad(format!("shadow_strength must be in [0, 0.9], got {}", self.shadow_strength));
        }
        if self.albedo_palette.is_empty() {
            return bad("albedo_palette is empty".into());
        }
        if self.albedo_palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("albedo_palette entries must lie in [0, 1]".into());
        }
        if !(self.specular_sigma > 0.0 && self.specular_sigma.is_finite()) {
            return bad(format!("specular_sigma must be positive, got {}", self.specular_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneTuple {
    pub albedo: ComponentImage,
    pub shading: ComponentImage,
    pub specular: ComponentImage,
    pub composed: Image,
    pub params: SceneParams,
}

impl SceneTuple {
    /// Linear components in albedo, shading, specular order.
    pub fn components(&self) -> [&ComponentImage; 3] {
        [&self.albedo, &self.shading, &self.specular]
    }

    pub fn linear(&self, tag: ComponentTag) -> &ComponentImage {
        self.components()[tag.index()]
    }

    pub fn tonemapped(&self, tag: ComponentTag) -> Result<ComponentImage> {
        encode_component(self.linear(tag))
    }

    /// The composed image under `model`, from the stored components.
    pub fn composed_with(&self, model: &ForwardModel) -> Result<Image> {
        let parts: Vec<ComponentImage> = model.tags().iter().map(|t| self.linear(*t).clone()).collect();
        Ok(model.compose(&parts)?.image)
    }

    fn verify(&self) -> Result<()> {
        let want = self.composed_with(&ForwardModel::non_lambertian())?;
        if want != self.composed {
            return Err(Error::Invariant("composed image does not match its components".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
}

impl Shape {
    fn center(&self) -> (f64, f64) {
        match *self {
            Shape::Disk { cx, cy, .. } | Shape::Rect { cx, cy, .. } => (cx, cy),
        }
    }

    fn extent(&self) -> f64 {
        match *self {
            Shape::Disk { r, .. } => r,
            Shape::Rect { hw, hh, .. } => hw.max(hh),
        }
    }

    /// Signed distance, negative inside.
    fn sdf(&self, x: f64, y: f64) -> f64 {
        match *self {
            Shape::Disk { cx, cy, r } => ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r,
            Shape::Rect { cx, cy, hw, hh } => {
                let dx = (x - cx).abs() - hw;
                let dy = (y - cy).abs() - hh;
                let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                outside + dx.max(dy).min(0.0)
            }
        }
    }

    fn shifted(&self, ox: f64, oy: f64) -> Shape {
        match *self {
            Shape::Disk { cx, cy, r } => Shape::Disk { cx: cx + ox, cy: cy + oy, r },
            Shape::Rect { cx, cy, hw, hh } => Shape::Rect { cx: cx + ox, cy: cy + oy, hw, hh },
        }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Pixel centers sit at integer coordinates.
pub fn synth_scene(params: &SceneParams) -> Result<SceneTuple> {
    params.validate()?;
    let n = params.image_size;
    let size = n as f64;
    let mut geo = ChaCha8Rng::seed_from_u64(params.seed);
    let palette = &params.albedo_palette;

    let bg = palette[geo.gen_range(0..palette.len())];
    let (fx, fy) = (geo.gen_range(0.05..0.2), geo.gen_range(0.05..0.2));
    let phase = geo.gen_range(0.0..std::f64::consts::TAU);
    let mut shapes = Vec::with_capacity(params.n_shapes);
    let mut colors = Vec::with_capacity(params.n_shapes);
    for _ in 0..params.n_shapes {
        let cx = geo.gen_range(0.15 * size..0.85 * size);
        let cy = geo.gen_range(0.15 * size..0.85 * size);
        let shape = if geo.gen_bool(0.5) {
            Shape::Disk { cx, cy, r: geo.gen_range(0.1 * size..0.22 * size) }
        } else {
            Shape::Rect {
                cx,
                cy,
                hw: geo.gen_range(0.08 * size..0.2 * size),
                hh: geo.gen_range(0.08 * size..0.2 * size),
            }
        };
        shapes.push(shape);
        colors.push(palette[geo.gen_range(0..palette.len())]);
    }

    let mut albedo = Image::filled(n, n, 3, 0.0);
    for y in 0..n {
        for x in 0..n {
            let tex = 0.9 + 0.1 * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
            let mut color = [bg[0] * tex, bg[1] * tex, bg[2] * tex];
            for (s, c) in shapes.iter().zip(&colors) {
                if s.sdf(x as f64, y as f64) <= 0.0 {
                    color = *c;
                }
            }
            for (ch, v) in color.iter().enumerate() {
                albedo.set(y, x, ch, f32_round(*v));
            }
        }
    }

    let [lx, ly] = params.light_pos;
    let shadows: Vec<Shape> = shapes
        .iter()
        .map(|s| {
            let (cx, cy) = s.center();
            let (dx, dy) = (cx - lx, cy - ly);
            let len = (dx * dx + dy * dy).sqrt().max(1e-9);
            let reach = 0.6 * s.extent();
            s.shifted(dx / len * reach, dy / len * reach)
        })
        .collect();
    let softness = 0.05 * size;
    let mut shading = Image::filled(n, n, 3, 0.0);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64, y as f64);
            let d2 = (px - lx).powi(2) + (py - ly).powi(2);
            let direct = params.light_intensity / (1.0 + params.light_falloff * d2);
            let occ = shadows
                .iter()
                .map(|s| 1.0 - smoothstep(-softness, softness, s.sdf(px, py)))
                .fold(0.0, f64::max);
            let v = f32_round(direct * (1.0 - params.shadow_strength * occ));
            for ch in 0..3 {
                shading.set(y, x, ch, v);
            }
        }
    }

    let mut light = ChaCha8Rng::seed_from_u64(params.light_seed);
    let mut specular = Image::filled(n, n, 3, 0.0);
    for i in 0..params.specular_count {
        let amp = light.gen_range(0.2..0.8);
        let (bx, by) = if shapes.is_empty() {
            (light.gen_range(0.0..size), light.gen_range(0.0..size))
        } else {
            // Highlights sit on a shape, pulled toward the light.
            let s = shapes[i % shapes.len()];
            let (cx, cy) = s.center();
            let (dx, dy) = (lx - cx, ly - cy);
            let len = (dx * dx + dy * dy).sqrt().max(1e-9);
            let pull = 0.4 * s.extent();
            (cx + dx / len * pull, cy + dy / len * pull)
        };
        let two_s2 = 2.0 * params.specular_sigma.powi(2);
        for y in 0..n {
            for x in 0..n {
                let r2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                let v = amp * (-r2 / two_s2).exp();
                for ch in 0..3 {
                    let cur = specular.at(y, x, ch);
                    specular.set(y, x, ch, cur + v);
                }
            }
        }
    }
    let specular = specular.map(f32_round);

    let albedo = ComponentImage::new(albedo, ColorSpace::Linear, ComponentTag::Albedo)?;
    let shading = ComponentImage::new(shading, ColorSpace::Linear, ComponentTag::Shading)?;
    let specular = ComponentImage::new(specular, ColorSpace::Linear, ComponentTag::Specular)?;
    let composed = ForwardModel::non_lambertian()
        .compose(&[albedo.clone(), shading.clone(), specular.clone()])?
        .image;
    Ok(SceneTuple { albedo, shading, specular, composed, params: params.clone() })
}

/// Ranges from which per-scene parameters are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneRanges {
    pub image_size: usize,
    pub n_shapes: (usize, usize),
    pub light_falloff: (f64, f64),
    pub light_intensity: (f64, f64),
    pub shadow_strength: (f64, f64),
    pub specular_count: (usize, usize),
    pub specular_sigma: (f64, f64),
    pub albedo_palette: Vec<[f64; 3]>,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            image_size: 32,
            n_shapes: (1, 3),
            light_falloff: (0.0005, 0.003),
            light_intensity: (1.0, 2.0),
            shadow_strength: (0.3, 0.6),
            specular_count: (0, 0),
            specular_sigma: (1.0, 2.0),
            albedo_palette: default_palette(),
        }
    }
}

impl SceneRanges {
    pub fn with_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    pub fn sample(&self, rng: &mut impl Rng) -> SceneParams {
        let size = self.image_size as f64;
        let pick_u = |rng: &mut dyn rand::RngCore, (a, b): (usize, usize)| if b > a { rng.gen_range(a..=b) } else { a };
        let pick_f = |rng: &mut dyn rand::RngCore, (a, b): (f64, f64)| if b > a { rng.gen_range(a..b) } else { a };
        SceneParams {
            image_size: self.image_size,
            n_shapes: pick_u(rng, self.n_shapes),
            light_pos: [rng.gen_range(-0.25 * size..1.25 * size), rng.gen_range(-0.25 * size..1.25 * size)],
            light_falloff: pick_f(rng, self.light_falloff),
            light_intensity: pick_f(rng, self.light_intensity),
            shadow_strength: pick_f(rng, self.shadow_strength),
            albedo_palette: self.albedo_palette.clone(),
            specular_count: pick_u(rng, self.specular_count),
            specular_sigma: pick_f(rng, self.specular_sigma),
            seed: rng.gen(),
            light_seed: rng.gen(),
        }
    }
}

/// SplitMix64 finalizer over a seed and an index.
fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<SceneTuple>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Indices ordered by hash; the first 70% (rounded) train, the rest test.
pub fn split_indices(n: usize, base_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (mix(base_seed, i as u64), i));
    let n_train = ((n as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn synth_dataset(n: usize, base_seed: u64, ranges: &SceneRanges) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument("need ≥ 2 scenes for a split".into()));
    }
    let scenes = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(base_seed, i as u64));
            synth_scene(&ranges.sample(&mut rng))
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, test) = split_indices(n, base_seed);
    Ok(Dataset { scenes, train, test })
}

impl Dataset {
    pub fn scene_id(index: usize) -> String {
        format!("scene_{index:05}")
    }

    /// Tone-mapped component images of the given scenes, the GAN training data.
    pub fn tonemapped_images(&self, indices: &[usize], tag: ComponentTag) -> Result<Vec<Image>> {
        indices.iter().map(|&i| Ok(self.scenes[i].tonemapped(tag)?.image)).collect()
    }

    /// Tone-mapped albedo and shading stacked into six channels.
    pub fn joint_images(&self, indices: &[usize], tags: &[ComponentTag]) -> Result<Vec<Image>> {
        indices
            .iter()
            .map(|&i| {
                let parts = tags
                    .iter()
                    .map(|t| Ok(self.scenes[i].tonemapped(*t)?.image))
                    .collect::<Result<Vec<_>>>()?;
                Image::stack_channels(&parts.iter().collect::<Vec<_>>())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub id: String,
    pub split: Split,
    pub params: SceneParams,
    /// File name to lowercase hex sha256.
    pub sha256: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub scenes: Vec<SceneEntry>,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.scenes.iter().filter(|s| s.split == split).count()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

const FILES: [&str; 4] = ["albedo.pfm", "shading.pfm", "specular.pfm", "composed.png"];

/// Writes `manifest.json` and `scenes/<id>/` under `root`; returns the manifest path.
pub fn export_dataset(ds: &Dataset, root: impl AsRef<Path>) -> Result<std::path::PathBuf> {
    let root = root.as_ref();
    let mut entries = Vec::with_capacity(ds.scenes.len());
    for (i, scene) in ds.scenes.iter().enumerate() {
        let id = Dataset::scene_id(i);
        let dir = root.join("scenes").join(&id);
        io::create_dir(&dir)?;
        let blobs = [
            io::pfm_bytes(&scene.albedo.image)?,
            io::pfm_bytes(&scene.shading.image)?,
            io::pfm_bytes(&scene.specular.image)?,
            io::png_bytes(&scene.composed)?,
        ];
        let mut sha256 = BTreeMap::new();
        for (name, bytes) in FILES.iter().zip(&blobs) {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            sha256.insert(name.to_string(), sha256_hex(bytes));
        }
        let split = if ds.train.contains(&i) { Split::Train } else { Split::Test };
        entries.push(SceneEntry { id, split, params: scene.params.clone(), sha256 });
    }
    let path = root.join("manifest.json");
    io::write_json(&path, &Manifest { version: MANIFEST_VERSION, scenes: entries })?;
    Ok(path)
}

fn read_checked(path: &Path, want: Option<&String>) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match want {
        Some(hex) if *hex == sha256_hex(&bytes) => Ok(bytes),
        _ => Err(Error::Checksum { path: path.to_path_buf() }),
    }
}

/// Reads a dataset written by [`export_dataset`], verifying checksums and the
/// compose invariant for every scene.
pub fn import_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest: Manifest = io::read_json(root.join("manifest.json"))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format {
            path: root.join("manifest.json"),
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let mut ds = Dataset { scenes: Vec::new(), train: Vec::new(), test: Vec::new() };
    for (i, entry) in manifest.scenes.iter().enumerate() {
        let dir = root.join("scenes").join(&entry.id);
        let mut parts = Vec::with_capacity(3);
        for (name, tag) in FILES.iter().zip(ComponentTag::ALL) {
            let path = dir.join(name);
            let bytes = read_checked(&path, entry.sha256.get(*name))?;
            let img = io::parse_pfm(&bytes, &path)?;
            parts.push(ComponentImage::new(img, ColorSpace::Linear, tag)?);
        }
        let png_path = dir.join(FILES[3]);
        let png = read_checked(&png_path, entry.sha256.get(FILES[3]))?;
        let composed = ForwardModel::non_lambertian().compose(&parts)?.image;
        if io::png_bytes(&composed)? != png {
            return Err(Error::Invariant(format!("{}: composed.png does not match components", entry.id)));
        }
        let mut it = parts.into_iter();
        let scene = SceneTuple {
            albedo: it.next().expect("three parts"),
            shading: it.next().expect("three parts"),
            specular: it.next().expect("three parts"),
            composed,
            params: entry.params.clone(),
        };
        scene.verify()?;
        ds.scenes.push(scene);
        match entry.split {
            Split::Train => ds.train.push(i),
            Split::Test => ds.test.push(i),
        }
    }
    if ds.scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests;
