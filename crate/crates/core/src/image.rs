use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Row-major HWC image of `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels != data.len() || data.is_empty() {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Selects a contiguous channel range.
    pub fn channels_range(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.channels || count == 0 {
            return Err(Error::Shape(format!(
                "channel range {start}..{} of {}",
                start + count,
                self.channels
            )));
        }
        let data = self
            .data
            .chunks(self.channels)
            .flat_map(|px| px[start..start + count].iter().copied())
            .collect();
        Ok(Self {
            channels: count,
            data,
            ..*self
        })
    }

    /// Stacks images of equal spatial size along the channel axis.
    pub fn stack_channels(parts: &[&Image]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to stack".into()))?;
        if parts.iter().any(|p| p.height != first.height || p.width != first.width) {
            return Err(Error::Shape("stacked images differ in spatial size".into()));
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(first.height * first.width * channels);
        for i in 0..first.height * first.width {
            for p in parts {
                data.extend_from_slice(&p.data[i * p.channels..(i + 1) * p.channels]);
            }
        }
        Image::new(first.height, first.width, channels, data)
    }

    /// `(H*W, C)` tensor view, the layout the networks consume.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height * self.width, self.channels], self.data.clone()).expect("finite image data")
    }

    pub fn from_tensor(t: &Tensor, height: usize, width: usize, channels: usize) -> Result<Self> {
        Image::new(height, width, channels, t.data().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentTag {
    Albedo,
    Shading,
    Specular,
}

impl ComponentTag {
    pub const ALL: [ComponentTag; 3] = [ComponentTag::Albedo, ComponentTag::Shading, ComponentTag::Specular];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentTag::Albedo => "albedo",
            ComponentTag::Shading => "shading",
            ComponentTag::Specular => "specular",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for ComponentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ComponentTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "albedo" => Ok(ComponentTag::Albedo),
            "shading" => Ok(ComponentTag::Shading),
            "specular" => Ok(ComponentTag::Specular),
            other => Err(Error::InvalidArgument(format!("unknown component '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSpace {
    /// Display range `[0, 1]`, the generators' output domain.
    Tonemapped,
    /// Linear radiance, nonnegative.
    Linear,
}

/// One intrinsic component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentImage {
    pub image: Image,
    pub space: ColorSpace,
    pub tag: ComponentTag,
}

impl ComponentImage {
    /// Validates the range invariants for `space` and `tag`.
    pub fn new(image: Image, space: ColorSpace, tag: ComponentTag) -> Result<Self> {
        let (lo, hi) = image.min_max();
        let ok = match space {
            ColorSpace::Tonemapped => lo >= 0.0 && hi <= 1.0,
            ColorSpace::Linear if tag == ComponentTag::Albedo => lo >= 0.0 && hi <= 1.0,
            ColorSpace::Linear => lo >= 0.0,
        };
        if !ok || !hi.is_finite() {
            return Err(Error::Domain(format!(
                "{tag} in {space:?} space has range [{lo}, {hi}]"
            )));
        }
        Ok(Self { image, space, tag })
    }
}
