use std::collections::VecDeque;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use ganbank::generators::{sample_z_with, LatentW};
use ganbank::image::Image;
use ganbank::priors::{in_domain_loss, knn_loss, SampleBank};
use ganbank::{io, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandscapeLoss {
    Indomain,
    Knn,
}

#[derive(Debug, Clone, Args)]
pub struct LandscapeArgs {
    /// Bank checkpoint with 2-D codes; without it a Gaussian bank is drawn.
    #[arg(long)]
    pub bank_2d: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum)]
    pub loss: LandscapeLoss,
    #[arg(long)]
    pub out: PathBuf,
    /// Size of the drawn bank.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid points per side.
    #[arg(long, default_value_t = 256)]
    pub grid: usize,
}

/// Fraction of the bank's extent added on each side of its bounding box.
pub const MARGIN: f64 = 0.2;

/// A loss sampled on a regular grid. Row 0 is the largest y, so the grid
/// reads like an image of the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub size: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub values: Vec<f64>,
}

impl Landscape {
    pub fn evaluate(bank: &SampleBank, loss: LandscapeLoss, k: usize, size: usize) -> Result<Self> {
        if bank.dim() != 2 {
            return Err(Error::InvalidArgument(format!("landscape needs a 2-D bank, got dimension {}", bank.dim())));
        }
        if bank.is_empty() || size < 2 {
            return Err(Error::InvalidArgument("landscape needs a non-empty bank and a grid of at least 2".into()));
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for r in bank.rows() {
            for d in 0..2 {
                lo[d] = lo[d].min(r[d]);
                hi[d] = hi[d].max(r[d]);
            }
        }
        let pad = |d: usize| {
            let m = MARGIN * (hi[d] - lo[d]).max(1e-9);
            (lo[d] - m, hi[d] + m)
        };
        let mut ls = Self { size, x_range: pad(0), y_range: pad(1), values: Vec::with_capacity(size * size) };
        let mean = bank.mean();
        for row in 0..size {
            for col in 0..size {
                let w = LatentW(ls.point(row, col).to_vec());
                ls.values.push(match loss {
                    LandscapeLoss::Knn => knn_loss(&w, bank, k)?,
                    LandscapeLoss::Indomain => in_domain_loss(&w, &mean)?,
                });
            }
        }
        Ok(ls)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    pub fn point(&self, row: usize, col: usize) -> [f64; 2] {
        let t = |i: usize| i as f64 / (self.size - 1) as f64;
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        [x0 + t(col) * (x1 - x0), y1 - t(row) * (y1 - y0)]
    }

    /// Grid cell whose point is closest to `p`.
    pub fn nearest_cell(&self, p: &[f64]) -> (usize, usize) {
        let idx = |v: f64, (a, b): (f64, f64)| (((v - a) / (b - a) * (self.size - 1) as f64).round().max(0.0) as usize).min(self.size - 1);
        let col = idx(p[0], self.x_range);
        let row = self.size - 1 - idx(p[1], self.y_range);
        (row, col)
    }

    /// Length of a grid cell's diagonal.
    pub fn cell_diameter(&self) -> f64 {
        let dx = (self.x_range.1 - self.x_range.0) / (self.size - 1) as f64;
        let dy = (self.y_range.1 - self.y_range.0) / (self.size - 1) as f64;
        dx.hypot(dy)
    }

    /// Nearest-rank percentile of the grid values, `q` in [0, 100].
    pub fn percentile(&self, q: f64) -> f64 {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
        v[rank.min(v.len()) - 1]
    }

    /// Number of 4-connected components of `{value <= threshold}`.
    pub fn sublevel_components(&self, threshold: f64) -> usize {
        let n = self.size;
        let mut seen = vec![false; n * n];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for start in 0..n * n {
            if seen[start] || self.values[start] > threshold {
                continue;
            }
            count += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                let (r, c) = (i / n, i % n);
                let mut visit = |j: usize| {
                    if !seen[j] && self.values[j] <= threshold {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if r > 0 {
                    visit(i - n);
                }
                if r + 1 < n {
                    visit(i + n);
                }
                if c > 0 {
                    visit(i - 1);
                }
                if c + 1 < n {
                    visit(i + 1);
                }
            }
        }
        count
    }

    /// Grid cells holding the minimum value.
    pub fn argmin(&self) -> Vec<(usize, usize)> {
        let m = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        (0..self.values.len())
            .filter(|&i| self.values[i] == m)
            .map(|i| (i / self.size, i % self.size))
            .collect()
    }

    pub fn raw_image(&self) -> Image {
        Image::new(self.size, self.size, 1, self.values.clone()).expect("square grid")
    }

    /// Values scaled to [0, 1], low loss dark.
    pub fn heatmap(&self) -> Image {
        let (lo, hi) = self.raw_image().min_max();
        let span = if hi > lo { hi - lo } else { 1.0 };
        self.raw_image().map(|v| (v - lo) / span)
    }
}

/// `n` codes from a standard normal in the plane.
pub fn gaussian_bank(n: usize, seed: u64) -> Result<SampleBank> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..n).map(|_| Ok(sample_z_with(&mut rng, 2, None)?.0)).collect::<Result<Vec<_>>>()?;
    SampleBank::from_rows(&rows, "gaussian_2d", seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandscapeSummary {
    pub loss: LandscapeLoss,
    pub k: usize,
    pub bank_size: usize,
    pub grid: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub min: f64,
    pub max: f64,
    pub p10_threshold: f64,
    pub p10_components: usize,
    pub argmin: Vec<(usize, usize)>,
}

pub fn run(a: &LandscapeArgs) -> Result<PathBuf> {
    let bank = match &a.bank_2d {
        Some(p) => {
            artifacts::require_file(p)?;
            SampleBank::load(p)?
        }
        None => gaussian_bank(a.n, a.seed)?,
    };
    let ls = Landscape::evaluate(&bank, a.loss, a.k, a.grid)?;
    io::create_dir(&a.out)?;
    if a.bank_2d.is_none() {
        bank.save(a.out.join("bank.jinv"))?;
    }
    io::write_pfm(a.out.join("landscape.pfm"), &ls.raw_image())?;
    let png = a.out.join("landscape.png");
    io::write_png(&png, &ls.heatmap())?;
    let (min, max) = ls.raw_image().min_max();
    let p10 = ls.percentile(10.0);
    let summary = LandscapeSummary {
        loss: a.loss,
        k: a.k,
        bank_size: bank.len(),
        grid: a.grid,
        x_range: ls.x_range,
        y_range: ls.y_range,
        min,
        max,
        p10_threshold: p10,
        p10_components: ls.sublevel_components(p10),
        argmin: ls.argmin(),
    };
    io::write_json(a.out.join("landscape.json"), &summary)?;
    Ok(png)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_of(values: Vec<f64>, size: usize) -> Landscape {
        Landscape { size, x_range: (0.0, 1.0), y_range: (0.0, 1.0), values }
    }

    #[test]
    fn components_use_four_connectivity() {
        // Diagonal neighbours are separate components.
        let g = grid_of(vec![0.0, 1.0, 1.0, 0.0], 2);
        assert_eq!(g.sublevel_components(0.5), 2);
        let g = grid_of(vec![0.0, 0.0, 1.0, 0.0], 2);
        assert_eq!(g.sublevel_components(0.5), 1);
        assert_eq!(g.sublevel_components(-1.0), 0);
    }

    #[test]
    fn grid_geometry() {
        let g = grid_of(vec![0.0; 9], 3);
        assert_eq!(g.point(0, 0), [0.0, 1.0]);
        assert_eq!(g.point(2, 2), [1.0, 0.0]);
        assert_eq!(g.nearest_cell(&[0.49, 0.9]), (0, 1));
        assert_eq!(g.nearest_cell(&[5.0, -5.0]), (2, 2));
    }

    #[test]
    fn percentile_nearest_rank() {
        let g = grid_of((1..=100).map(f64::from).collect(), 10);
        assert_eq!(g.percentile(10.0), 10.0);
        assert_eq!(g.percentile(0.0), 1.0);
        assert_eq!(g.percentile(100.0), 100.0);
    }

    #[test]
    fn rejects_other_dimensions() {
        let bank = SampleBank::from_rows(&[vec![0.0, 0.0, 0.0]], "x", 0).unwrap();
        assert!(Landscape::evaluate(&bank, LandscapeLoss::Knn, 1, 8).is_err());
    }
}
