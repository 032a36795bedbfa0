//! Latent-space regularizers: the in-domain distance to `w̄`, the kNN loss
//! over a bank of sampled codes, and the localized discriminator loss used
//! while fine-tuning generators.

use std::fmt;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::generators::{latent_tensor, sample_z_with, Discriminator, Generator, GeneratorVars, LatentW};
use crate::io::Checkpoint;

/// Below this mean neighbor distance the kNN loss is defined as zero.
pub const KNN_DEGENERATE: f64 = 1e-12;

/// Immutable `N x d_w` matrix of sampled latent codes.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBank {
    samples: Vec<f64>,
    dim: usize,
    pub generator_id: String,
    pub seed: u64,
}

impl SampleBank {
    pub fn new(samples: Vec<f64>, dim: usize, generator_id: impl Into<String>, seed: u64) -> Result<Self> {
        if dim == 0 || samples.is_empty() || samples.len() % dim != 0 {
            return Err(Error::Shape(format!("{} values do not form rows of {dim}", samples.len())));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("bank sample is not finite".into()));
        }
        Ok(Self {
            samples,
            dim,
            generator_id: generator_id.into(),
            seed,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], generator_id: impl Into<String>, seed: u64) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("bank rows differ in length".into()));
        }
        Self::new(rows.concat(), dim, generator_id, seed)
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks(self.dim)
    }

    /// Arithmetic mean of the rows.
    pub fn mean(&self) -> LatentW {
        let mut acc = vec![0.0; self.dim];
        for r in self.rows() {
            acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        }
        LatentW(acc.into_iter().map(|a| a / self.len() as f64).collect())
    }

    /// Stored as `{prefix}bank` plus a metadata record.
    pub fn write_to(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.push_json(format!("{prefix}bank.meta"), &(self.generator_id.as_str(), self.seed))?;
        ck.push(format!("{prefix}bank"), Tensor::new(vec![self.len(), self.dim], self.samples.clone())?);
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let (generator_id, seed): (String, u64) = ck.get_json(&format!("{prefix}bank.meta"))?;
        let t = ck.require(&format!("{prefix}bank"))?;
        if t.shape().len() != 2 {
            return Err(Error::Shape(format!("bank tensor has shape {:?}", t.shape())));
        }
        Self::new(t.data().to_vec(), t.shape()[1], generator_id, seed)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut ck = Checkpoint::new();
        self.write_to(&mut ck, "")?;
        ck.write(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::read_from(&Checkpoint::read(path)?, "")
    }
}

/// Maps `n` truncated draws through the generator's mapping network.
pub fn build_bank(g: &Generator, n: usize, seed: u64, truncation: Option<f64>) -> Result<SampleBank> {
    if n == 0 {
        return Err(Error::InvalidArgument("bank needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n * g.d_w());
    let mut left = n;
    while left > 0 {
        let chunk = left.min(1024);
        let zs = (0..chunk)
            .map(|_| sample_z_with(&mut rng, g.config.d_z, truncation))
            .collect::<Result<Vec<_>>>()?;
        for w in g.map_batch(&zs)? {
            samples.extend(w.0);
        }
        left -= chunk;
    }
    let id = g.tags.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("+");
    SampleBank::new(samples, g.d_w(), id, seed)
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("latent dimensions differ: {a} vs {b}")));
    }
    Ok(())
}

/// `‖w - w̄‖₂`.
pub fn in_domain_loss(w: &LatentW, w_bar: &LatentW) -> Result<f64> {
    let mut g = Graph::new();
    let wv = g.constant(latent_tensor(w, w.dim())?);
    let loss = in_domain_var(&mut g, wv, w_bar)?;
    Ok(g.scalar(loss))
}

/// Graph form of [`in_domain_loss`] for a `(1, d)` or `(d)` latent node.
pub fn in_domain_var(g: &mut Graph, w: Var, w_bar: &LatentW) -> Result<Var> {
    let n: usize = g.shape(w).iter().product();
    check_dims(n, w_bar.dim())?;
    let shape = g.shape(w).to_vec();
    let c = g.constant(Tensor::new(shape, w_bar.0.clone())?);
    let diff = g.sub(w, c)?;
    Ok(g.norm(diff)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact k nearest rows, ascending by distance, ties to the lower index.
pub fn knn_query(bank: &SampleBank, w: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    check_dims(w.len(), bank.dim())?;
    if k == 0 || k > bank.len() {
        return Err(Error::OutOfRange { index: k, len: bank.len() });
    }
    // Bounded insertion into a sorted buffer keeps this O(N k) with no
    // allocation per row; k is small.
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, row) in bank.rows().enumerate() {
        let d = sq_dist(w, row);
        if best.len() == k && d >= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(bd, _)| bd <= d);
        best.insert(pos, (d, i));
        best.truncate(k);
    }
    Ok(best
        .into_iter()
        .map(|(d, index)| Neighbor {
            index,
            distance: d.sqrt(),
        })
        .collect())
}

/// How the softmax temperature `d̄` is formed from the neighbor distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnScale {
    /// Mean distance (sum / k).
    #[default]
    Mean,
    /// Plain sum of distances.
    Sum,
}

/// Softmax weights `exp(-0.5 d_j / d̄) / D` for the given distances.
pub fn knn_weights(distances: &[f64], scale: KnnScale) -> Vec<f64> {
    let d_bar = neighbor_scale(distances, scale);
    if d_bar < KNN_DEGENERATE {
        return vec![1.0 / distances.len() as f64; distances.len()];
    }
    let logits: Vec<f64> = distances.iter().map(|d| -0.5 * d / d_bar).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn neighbor_scale(distances: &[f64], scale: KnnScale) -> f64 {
    let s: f64 = distances.iter().sum();
    match scale {
        KnnScale::Mean => s / distances.len() as f64,
        KnnScale::Sum => s,
    }
}

/// Softmax-weighted mean distance from `w` to its `k` nearest bank rows.
pub fn knn_loss(w: &LatentW, bank: &SampleBank, k: usize) -> Result<f64> {
    knn_loss_with(w, bank, k, KnnScale::Mean)
}

pub fn knn_loss_with(w: &LatentW, bank: &SampleBank, k: usize, scale: KnnScale) -> Result<f64> {
    let mut g = Graph::new();
    let wv = g.constant(latent_tensor(w, w.dim())?);
    let loss = knn_var(&mut g, wv, bank, k, scale)?;
    Ok(g.scalar(loss))
}

/// Graph form of the kNN loss. Neighbors are found from the node's current
/// value and then held fixed; distances to them and `d̄` are differentiated.
pub fn knn_var(g: &mut Graph, w: Var, bank: &SampleBank, k: usize, scale: KnnScale) -> Result<Var> {
    let dim = bank.dim();
    let wv = g.value(w).data().to_vec();
    let nbrs = knn_query(bank, &wv, k)?;
    let distances: Vec<f64> = nbrs.iter().map(|n| n.distance).collect();
    if neighbor_scale(&distances, scale) < KNN_DEGENERATE {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let rows: Vec<f64> = nbrs.iter().flat_map(|n| bank.row(n.index).iter().copied()).collect();
    let rows = g.constant(Tensor::new(vec![k, dim], rows)?);
    let tile: Rc<[usize]> = (0..k).flat_map(|_| 0..dim).collect();
    let tiled = g.gather(w, tile, &[k, dim])?;
    let diff = g.sub(tiled, rows)?;
    let d = g.row_norms(diff)?;
    let total = g.sum(d)?;
    let d_bar = match scale {
        KnnScale::Mean => g.scale(total, 1.0 / k as f64)?,
        KnnScale::Sum => total,
    };
    let inv = g.map(d_bar, Unary::Recip)?;
    let ratio = g.scale_by(d, inv)?;
    let logits = g.scale(ratio, -0.5)?;
    let weights = g.softmax(logits)?;
    let weighted = g.mul(weights, d)?;
    Ok(g.sum(weighted)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    None,
    #[serde(alias = "indomain")]
    InDomain,
    Knn,
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegularizerKind::None => "none",
            RegularizerKind::InDomain => "in_domain",
            RegularizerKind::Knn => "knn",
        })
    }
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RegularizerKind::None),
            "indomain" | "in_domain" => Ok(RegularizerKind::InDomain),
            "knn" => Ok(RegularizerKind::Knn),
            other => Err(Error::InvalidArgument(format!("unknown regularizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerChoice {
    pub kind: RegularizerKind,
    pub weight: f64,
    pub k: usize,
    #[serde(default)]
    pub scale: KnnScale,
}

impl Default for RegularizerChoice {
    fn default() -> Self {
        Self::knn(1e-4, 50)
    }
}

impl RegularizerChoice {
    pub fn none() -> Self {
        Self {
            kind: RegularizerKind::None,
            weight: 0.0,
            k: 0,
            scale: KnnScale::Mean,
        }
    }

    pub fn in_domain(weight: f64) -> Self {
        Self {
            kind: RegularizerKind::InDomain,
            weight,
            ..Self::none()
        }
    }

    pub fn knn(weight: f64, k: usize) -> Self {
        Self {
            kind: RegularizerKind::Knn,
            weight,
            k,
            scale: KnnScale::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0) || !self.weight.is_finite() {
            return Err(Error::InvalidArgument(format!("regularizer weight {} must be >= 0", self.weight)));
        }
        if self.kind == RegularizerKind::Knn && self.k == 0 {
            return Err(Error::InvalidArgument("knn regularizer needs k >= 1".into()));
        }
        Ok(())
    }
}

/// Anchors `(1 - beta) ŵ + beta w_k` as an `(n_a, d_w)` tensor.
pub fn anchor_codes(w_hat: &LatentW, anchors: &[LatentW], beta: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta {beta} outside [0, 1]")));
    }
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("need at least one anchor".into()));
    }
    let mut data = Vec::with_capacity(anchors.len() * w_hat.dim());
    for a in anchors {
        check_dims(a.dim(), w_hat.dim())?;
        data.extend(w_hat.0.iter().zip(&a.0).map(|(h, k)| (1.0 - beta) * h + beta * k));
    }
    Ok(Tensor::new(vec![anchors.len(), w_hat.dim()], data)?)
}

/// Per-anchor discriminator logits `(n_a, 1)` for the bound generator. The
/// discriminator is bound as constants, so it never receives gradient.
pub fn anchor_scores_var(g: &mut Graph, gen: &GeneratorVars, disc: &Discriminator, codes: &Tensor) -> Result<Var> {
    let n = codes.shape()[0];
    let dv = disc.net.bind(g, false);
    let w = g.constant(codes.clone());
    let img = gen.synthesize(g, w, n)?;
    Ok(dv.forward(g, img, n)?)
}

/// `Σ_k D(G((1 - beta) ŵ + beta w_k))`. Gradients reach only the generator's
/// tracked tensors; `ŵ`, anchors and the discriminator enter as constants.
pub fn local_d_loss_var(
    g: &mut Graph,
    gen: &GeneratorVars,
    disc: &Discriminator,
    w_hat: &LatentW,
    anchors: &[LatentW],
    beta: f64,
) -> Result<Var> {
    let codes = anchor_codes(w_hat, anchors, beta)?;
    let s = anchor_scores_var(g, gen, disc, &codes)?;
    Ok(g.sum(s)?)
}

pub fn local_d_loss(
    gen: &Generator,
    disc: &Discriminator,
    w_hat: &LatentW,
    anchors: &[LatentW],
    beta: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let gv = gen.bind(&mut g, false, false);
    let loss = local_d_loss_var(&mut g, &gv, disc, w_hat, anchors, beta)?;
    Ok(g.scalar(loss))
}

/// Draws `n` random codes `w_k = mapping(z)` for anchor interpolation.
pub fn sample_anchors(gen: &Generator, n: usize, rng: &mut impl Rng, truncation: Option<f64>) -> Result<Vec<LatentW>> {
    let zs = (0..n)
        .map(|_| sample_z_with(rng, gen.config.d_z, truncation))
        .collect::<Result<Vec<_>>>()?;
    gen.map_batch(&zs)
}
