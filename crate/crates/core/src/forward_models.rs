//! Compositing of intrinsic components into an image, and the per-component
//! tone maps relating the generators' `[0, 1]` outputs to linear radiance.
//!
//! Albedo uses the piecewise sRGB transfer curve; shading and specular use
//! Reinhard's global operator `x / (1 + x)` since both are high dynamic range.
//! The composed image is `srgb(albedo * shading [+ specular])`, clamped to 1.
//!
//! Every function here has a graph form (`*_var`) used inside optimization and
//! a plain form built on the same graph ops, so both paths agree bit for bit.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::image::{ColorSpace, ComponentImage, ComponentTag, Image};

/// Upper clamp applied to Reinhard-encoded values before decoding.
pub const REINHARD_MAX_ENCODED: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Srgb,
    Reinhard,
    Identity,
}

impl Transform {
    pub fn for_tag(tag: ComponentTag) -> Self {
        match tag {
            ComponentTag::Albedo => Transform::Srgb,
            ComponentTag::Shading | ComponentTag::Specular => Transform::Reinhard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lambertian,
    NonLambertian,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Lambertian => "lambertian",
            ModelKind::NonLambertian => "non_lambertian",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambertian" => Ok(ModelKind::Lambertian),
            "non_lambertian" | "non-lambertian" => Ok(ModelKind::NonLambertian),
            other => Err(Error::InvalidArgument(format!("unknown forward model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardModel {
    pub kind: ModelKind,
    /// Component order and the inverse transform applied to each.
    pub components: Vec<(ComponentTag, Transform)>,
}

impl ForwardModel {
    pub fn new(kind: ModelKind) -> Self {
        let tags: &[ComponentTag] = match kind {
            ModelKind::Lambertian => &[ComponentTag::Albedo, ComponentTag::Shading],
            ModelKind::NonLambertian => &ComponentTag::ALL,
        };
        Self {
            kind,
            components: tags.iter().map(|&t| (t, Transform::for_tag(t))).collect(),
        }
    }

    pub fn lambertian() -> Self {
        Self::new(ModelKind::Lambertian)
    }

    pub fn non_lambertian() -> Self {
        Self::new(ModelKind::NonLambertian)
    }

    pub fn tags(&self) -> Vec<ComponentTag> {
        self.components.iter().map(|c| c.0).collect()
    }

    pub fn transform(&self, tag: ComponentTag) -> Transform {
        self.components
            .iter()
            .find(|c| c.0 == tag)
            .map(|c| c.1)
            .unwrap_or_else(|| Transform::for_tag(tag))
    }

    /// Checks that `tags` is exactly the model's component set.
    pub fn check_tags(&self, tags: &[ComponentTag]) -> Result<()> {
        let mut want = self.tags();
        let mut got = tags.to_vec();
        want.sort();
        got.sort();
        if want != got {
            return Err(Error::ComponentMismatch {
                expected: want.iter().map(|t| t.to_string()).collect(),
                got: got.iter().map(|t| t.to_string()).collect(),
            });
        }
        Ok(())
    }

    /// Composes linear component nodes given in model order.
    pub fn compose_var(&self, g: &mut Graph, linear: &[Var]) -> Result<Var> {
        if linear.len() != self.components.len() {
            return Err(Error::InvalidArgument(format!(
                "{} model takes {} components, got {}",
                self.kind,
                self.components.len(),
                linear.len()
            )));
        }
        let mut radiance = g.mul(linear[0], linear[1])?;
        if self.kind == ModelKind::NonLambertian {
            radiance = g.add(radiance, linear[2])?;
        }
        let clipped = g.map(radiance, Unary::Clamp(0.0, 1.0))?;
        Ok(g.map(clipped, Unary::SrgbEncode)?)
    }

    /// Composes linear components (any order) into the display image.
    pub fn compose(&self, components: &[ComponentImage]) -> Result<Composed> {
        let tags: Vec<ComponentTag> = components.iter().map(|c| c.tag).collect();
        self.check_tags(&tags)?;
        let shape = components[0].image.shape();
        if components.iter().any(|c| c.image.shape() != shape) {
            return Err(Error::Shape("components differ in shape".into()));
        }
        if let Some(c) = components.iter().find(|c| c.space != ColorSpace::Linear) {
            return Err(Error::InvalidArgument(format!("{} is not in linear space", c.tag)));
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .tags()
            .iter()
            .map(|t| {
                let c = components.iter().find(|c| c.tag == *t).expect("tags checked");
                g.constant(c.image.to_tensor())
            })
            .collect();
        let mut radiance = g.mul(vars[0], vars[1])?;
        if self.kind == ModelKind::NonLambertian {
            radiance = g.add(radiance, vars[2])?;
        }
        let clipped = g.value(radiance).data().iter().filter(|&&v| v > 1.0).count();
        let out = self.compose_var(&mut g, &vars)?;
        let (h, w, c) = shape;
        Ok(Composed {
            image: Image::from_tensor(g.value(out), h, w, c)?,
            clipped,
        })
    }
}

/// A composed display image and the number of samples clamped at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Composed {
    pub image: Image,
    pub clipped: usize,
}

/// Inverse tone map as graph ops. Reinhard inputs are clamped to
/// `[0, REINHARD_MAX_ENCODED]` first.
pub fn decode_var(g: &mut Graph, transform: Transform, encoded: Var) -> Result<Var> {
    Ok(match transform {
        Transform::Srgb => g.map(encoded, Unary::SrgbDecode)?,
        Transform::Reinhard => {
            let c = g.map(encoded, Unary::Clamp(0.0, REINHARD_MAX_ENCODED))?;
            g.map(c, Unary::ReinhardDecode)?
        }
        Transform::Identity => encoded,
    })
}

/// Forward tone map as graph ops (no clamping).
pub fn encode_var(g: &mut Graph, transform: Transform, linear: Var) -> Result<Var> {
    Ok(match transform {
        Transform::Srgb => g.map(linear, Unary::SrgbEncode)?,
        Transform::Reinhard => g.map(linear, Unary::ReinhardEncode)?,
        Transform::Identity => linear,
    })
}

fn apply(img: &Image, f: Unary) -> Image {
    img.map(|v| f.eval(v))
}

/// sRGB-encodes a linear image, clamping inputs above 1 and counting them.
pub fn srgb_encode(linear: &Image) -> Result<(Image, usize)> {
    let (lo, _) = linear.min_max();
    if lo < 0.0 {
        return Err(Error::Domain(format!("srgb_encode input {lo} is negative")));
    }
    let clipped = linear.data.iter().filter(|&&v| v > 1.0).count();
    Ok((linear.map(|v| Unary::SrgbEncode.eval(v.min(1.0))), clipped))
}

pub fn srgb_decode(encoded: &Image) -> Result<Image> {
    check_unit(encoded, "srgb_decode", true)?;
    Ok(apply(encoded, Unary::SrgbDecode))
}

pub fn reinhard_encode(linear: &Image) -> Result<Image> {
    let (lo, _) = linear.min_max();
    if lo < 0.0 {
        return Err(Error::Domain(format!("reinhard_encode input {lo} is negative")));
    }
    Ok(apply(linear, Unary::ReinhardEncode))
}

pub fn reinhard_decode(encoded: &Image) -> Result<Image> {
    check_unit(encoded, "reinhard_decode", false)?;
    Ok(apply(encoded, Unary::ReinhardDecode))
}

fn check_unit(img: &Image, op: &str, closed: bool) -> Result<()> {
    let (lo, hi) = img.min_max();
    if lo < 0.0 || hi > 1.0 || (!closed && hi >= 1.0) {
        return Err(Error::Domain(format!("{op} input range [{lo}, {hi}]")));
    }
    Ok(())
}

/// Tone-maps a linear component into generator space.
pub fn encode_component(c: &ComponentImage) -> Result<ComponentImage> {
    if c.space != ColorSpace::Linear {
        return Err(Error::InvalidArgument(format!("{} is already tone-mapped", c.tag)));
    }
    let image = match Transform::for_tag(c.tag) {
        Transform::Srgb => srgb_encode(&c.image)?.0,
        Transform::Reinhard => reinhard_encode(&c.image)?,
        Transform::Identity => c.image.clone(),
    };
    ComponentImage::new(image, ColorSpace::Tonemapped, c.tag)
}

/// Inverse tone map of a generator-space component. Reinhard inputs at or
/// beyond the pole are clamped; the returned count says how many.
pub fn decode_component(c: &ComponentImage) -> Result<(ComponentImage, usize)> {
    if c.space != ColorSpace::Tonemapped {
        return Err(Error::InvalidArgument(format!("{} is already linear", c.tag)));
    }
    let transform = Transform::for_tag(c.tag);
    let clipped = match transform {
        Transform::Reinhard => c.image.data.iter().filter(|&&v| v > REINHARD_MAX_ENCODED).count(),
        _ => 0,
    };
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![c.image.len()], c.image.data.clone())?);
    let y = decode_var(&mut g, transform, x)?;
    let (h, w, ch) = c.image.shape();
    let image = Image::new(h, w, ch, g.value(y).data().to_vec())?;
    Ok((ComponentImage::new(image, ColorSpace::Linear, c.tag)?, clipped))
}
