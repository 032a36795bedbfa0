//! Image quality metrics and the cross-contamination score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ComponentImage, ComponentTag, Image};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal to noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of one channel.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// averaged over channels. Images smaller than the window use the largest
/// odd window that fits.
pub fn ssim(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("peak must be positive, got {peak}")));
    }
    let (h, w, ch) = a.shape();
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mut total = 0.0;
    for c in 0..ch {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data[i * ch + c]).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data[i * ch + c]).collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let (mu_a, ho, wo) = filter(&pa, h, w, &k);
        let (mu_b, ..) = filter(&pb, h, w, &k);
        let (aa, ..) = filter(&prod(&pa, &pa), h, w, &k);
        let (bb, ..) = filter(&prod(&pb, &pb), h, w, &k);
        let (ab, ..) = filter(&prod(&pa, &pb), h, w, &k);
        let mut sum = 0.0;
        for i in 0..ho * wo {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / (ho * wo) as f64;
    }
    Ok(total / ch as f64)
}

/// Per-pixel forward-difference gradient magnitude of the channel mean.
fn gradient_magnitudes(img: &Image) -> Vec<f64> {
    let (h, w, ch) = img.shape();
    let lum = |y: usize, x: usize| (0..ch).map(|c| img.at(y, x, c)).sum::<f64>() / ch as f64;
    let mut out = Vec::with_capacity(h.saturating_sub(1) * w.saturating_sub(1));
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let v = lum(y, x);
            let gx = lum(y, x + 1) - v;
            let gy = lum(y + 1, x) - v;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

fn abs_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // Relative threshold so float noise on a constant field reads as constant.
    let tiny = |s: f64, m: f64| s <= 1e-24 * n * (1.0 + m * m);
    if tiny(saa, ma) || tiny(sbb, mb) {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).abs().min(1.0)
}

/// Absolute Pearson correlation between the gradient-magnitude fields of an
/// estimate and a different ground-truth component. 0 if either is flat.
pub fn contamination(est: &ComponentImage, gt_other: &ComponentImage) -> Result<f64> {
    let (ha, wa, _) = est.image.shape();
    let (hb, wb, _) = gt_other.image.shape();
    if (ha, wa) != (hb, wb) {
        return Err(Error::Shape(format!("{ha}x{wa} vs {hb}x{wb}")));
    }
    Ok(abs_pearson(&gradient_magnitudes(&est.image), &gradient_magnitudes(&gt_other.image)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl Scores {
    pub fn between(est: &Image, gt: &Image) -> Result<Self> {
        Ok(Self {
            mse: mse(est, gt)?,
            psnr: psnr(est, gt, 1.0)?,
            ssim: ssim(est, gt, 1.0)?,
        })
    }
}

/// Metrics of one decomposition against ground truth. Components are scored
/// in tone-mapped space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub components: BTreeMap<ComponentTag, Scores>,
    pub image: Scores,
    pub contamination: f64,
}

impl MetricReport {
    /// `est` and `gt` hold tone-mapped components; matching is by tag.
    /// Contamination is the mean over the albedo/shading cross pairs.
    pub fn evaluate(
        est: &[ComponentImage],
        gt: &[ComponentImage],
        reconstruction: &Image,
        target: &Image,
    ) -> Result<Self> {
        let find = |set: &[ComponentImage], tag: ComponentTag| -> Result<ComponentImage> {
            set.iter().find(|c| c.tag == tag).cloned().ok_or_else(|| Error::ComponentMismatch {
                expected: vec![tag.to_string()],
                got: set.iter().map(|c| c.tag.to_string()).collect(),
            })
        };
        let mut components = BTreeMap::new();
        for e in est {
            let g = find(gt, e.tag)?;
            components.insert(e.tag, Scores::between(&e.image, &g.image)?);
        }
        let mut pairs = Vec::new();
        for (a, b) in [(ComponentTag::Albedo, ComponentTag::Shading), (ComponentTag::Shading, ComponentTag::Albedo)] {
            if let (Ok(e), Ok(g)) = (find(est, a), find(gt, b)) {
                pairs.push(contamination(&e, &g)?);
            }
        }
        let contamination = if pairs.is_empty() { 0.0 } else { pairs.iter().sum::<f64>() / pairs.len() as f64 };
        Ok(Self {
            components,
            image: Scores::between(reconstruction, target)?,
            contamination,
        })
    }

    pub fn mean_component_mse(&self) -> f64 {
        if self.components.is_empty() {
            return 0.0;
        }
        self.components.values().map(|s| s.mse).sum::<f64>() / self.components.len() as f64
    }
}
