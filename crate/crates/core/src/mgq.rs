//! Multi-group quantization.
//!
//! A latent vector of `C_l` channels is cut into `G` equal sub-tokens; sub-token
//! `i` is replaced by its nearest row in sub-codebook `i`. The quantized
//! latent is the concatenation of the selected rows, so a single site can take
//! `K^G` distinct values while each table stays small.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Real, Tensor};

/// `G` independent tables, each `K x sub_dim`.
#[derive(Debug, Clone)]
pub struct CodebookSet<T: Real = f32> {
    groups: usize,
    size: usize,
    sub_dim: usize,
    tables: Vec<Tensor<T>>,
}

impl CodebookSet<f32> {
    /// Rows drawn from `U(-1/K, 1/K)`, one seeded stream for all groups.
    pub fn init(groups: usize, size: usize, sub_dim: usize, seed: u64) -> Result<Self> {
        if groups == 0 || size == 0 || sub_dim == 0 {
            return Err(Error::invalid(format!(
                "codebook extents must be positive (G={groups}, K={size}, dim={sub_dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / size as f64;
        let tables = (0..groups)
            .map(|_| {
                let rows: Vec<f32> = (0..size * sub_dim)
                    .map(|_| rng.gen_range(-bound..bound) as f32)
                    .collect();
                Tensor::param(&[size, sub_dim], rows)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            groups,
            size,
            sub_dim,
            tables,
        })
    }
}

impl<T: Real> CodebookSet<T> {
    pub fn from_tables(tables: Vec<Tensor<T>>) -> Result<Self> {
        let first = tables
            .first()
            .ok_or_else(|| Error::invalid("codebook set needs at least one table"))?;
        let shape = first.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid(format!(
                "codebook table must be K x dim, got {shape:?}"
            )));
        }
        for t in &tables {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "codebook",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            groups: tables.len(),
            size: shape[0],
            sub_dim: shape[1],
            tables,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.groups * self.sub_dim
    }

    pub fn tables(&self) -> &[Tensor<T>] {
        &self.tables
    }

    pub fn table(&self, group: usize) -> &Tensor<T> {
        &self.tables[group]
    }

    pub fn zero_grad(&self) {
        self.tables.iter().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> CodebookSet<U> {
        CodebookSet {
            groups: self.groups,
            size: self.size,
            sub_dim: self.sub_dim,
            tables: self.tables.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn bit_eq(&self, other: &CodebookSet<T>) -> bool {
        self.groups == other.groups
            && self
                .tables
                .iter()
                .zip(&other.tables)
                .all(|(a, b)| a.bit_eq(b))
    }

    /// Replaces one table; the shape must not change.
    pub fn replace_table(&mut self, group: usize, t: Tensor<T>) -> Result<()> {
        if t.shape() != [self.size, self.sub_dim] {
            return Err(Error::Shape {
                op: "replace_table",
                lhs: vec![self.size, self.sub_dim],
                rhs: t.shape().to_vec(),
            });
        }
        self.tables[group] = t;
        Ok(())
    }

    /// Concatenated rows for per-group site indices; `lead` is the shape of the
    /// site grid. Differentiable with respect to the tables.
    pub fn lookup(&self, indices: &[Vec<u32>], lead: &[usize]) -> Result<Tensor<T>> {
        if indices.len() != self.groups {
            return Err(Error::invalid(format!(
                "expected indices for {} groups, got {}",
                self.groups,
                indices.len()
            )));
        }
        let sites: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.push(self.sub_dim);
        let parts = indices
            .iter()
            .zip(&self.tables)
            .map(|(idx, table)| {
                if idx.len() != sites {
                    return Err(Error::invalid(format!(
                        "expected {sites} indices per group, got {}",
                        idx.len()
                    )));
                }
                let mut flat = Vec::with_capacity(sites * self.sub_dim);
                for &k in idx {
                    let k = k as usize;
                    if k >= self.size {
                        return Err(Error::invalid(format!(
                            "code index {k} out of range for K={}",
                            self.size
                        )));
                    }
                    flat.extend(k * self.sub_dim..(k + 1) * self.sub_dim);
                }
                table.gather(Arc::from(flat), &shape)
            })
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            Ok(parts.into_iter().next().unwrap())
        } else {
            Tensor::concat_channels(&parts)
        }
    }
}

/// Per-group code indices over an `h x w` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMap {
    pub grid_h: usize,
    pub grid_w: usize,
    /// `indices[g]` is the row-major `grid_h x grid_w` index grid of group `g`.
    pub indices: Vec<Vec<u32>>,
}

impl TokenMap {
    pub fn groups(&self) -> usize {
        self.indices.len()
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        if self.indices.is_empty() {
            return Err(Error::invalid("token map has no groups"));
        }
        let sites = self.grid_h * self.grid_w;
        for (g, grid) in self.indices.iter().enumerate() {
            if grid.len() != sites {
                return Err(Error::invalid(format!(
                    "group {g} holds {} indices, grid is {}x{}",
                    grid.len(),
                    self.grid_h,
                    self.grid_w
                )));
            }
            if let Some(&k) = grid.iter().find(|&&k| k as usize >= size) {
                return Err(Error::invalid(format!(
                    "group {g} index {k} not below K={size}"
                )));
            }
        }
        Ok(())
    }
}

/// Probability of keeping `1..=G` groups during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    probs: Vec<f64>,
}

impl MaskSchedule {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("mask schedule is empty"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::invalid(format!(
                "mask probabilities must be non-negative, got {probs:?}"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "mask probabilities must sum to 1, got {total}"
            )));
        }
        Ok(Self { probs })
    }

    /// `0.7` on keeping every group, the remaining `0.3` spread evenly over
    /// the shorter prefixes. For `G = 4` this is `{0.1, 0.1, 0.1, 0.7}`.
    pub fn nested(groups: usize) -> Result<Self> {
        match groups {
            0 => Err(Error::invalid("mask schedule needs at least one group")),
            1 => Self::new(vec![1.0]),
            g => {
                let mut probs = vec![0.3 / (g - 1) as f64; g - 1];
                probs.push(0.7);
                Self::new(probs)
            }
        }
    }

    /// Always keep every group.
    pub fn disabled(groups: usize) -> Result<Self> {
        let mut probs = vec![0.0; groups.max(1)];
        *probs.last_mut().unwrap() = 1.0;
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn groups(&self) -> usize {
        self.probs.len()
    }
}

/// Channel slices `[i*C/G, (i+1)*C/G)` of the last axis.
pub fn split_groups<T: Real>(z: &Tensor<T>, groups: usize) -> Result<Vec<Tensor<T>>> {
    let c = z.channels();
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(format!(
            "latent dimension {c} is not divisible into {groups} groups"
        )));
    }
    if groups == 1 {
        return Ok(vec![z.clone()]);
    }
    let w = c / groups;
    (0..groups)
        .map(|i| z.slice_channels(i * w, (i + 1) * w))
        .collect()
}

/// Index and squared Euclidean distance of the closest table row. Ties go to
/// the lowest index.
pub fn nearest_code<T: Real>(query: &[T], table: &[T], dim: usize) -> Result<(usize, f64)> {
    if dim == 0 || query.len() != dim || table.len() % dim != 0 {
        return Err(Error::invalid(format!(
            "query of length {} does not match table rows of width {dim}",
            query.len()
        )));
    }
    if table.is_empty() {
        return Err(Error::invalid("nearest_code on an empty table"));
    }
    let mut best = (0, f64::INFINITY);
    for (k, row) in table.chunks_exact(dim).enumerate() {
        let d: f64 = query
            .iter()
            .zip(row)
            .map(|(&q, &e)| {
                let diff = q.to_f64() - e.to_f64();
                diff * diff
            })
            .sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best)
}

/// Nearest-row assignment for every site of a flat `[sites, C]` latent.
/// Returns per-group indices and the per-group mean squared distance.
pub fn assign<T: Real>(
    z: &[T],
    sites: usize,
    cb: &CodebookSet<T>,
) -> Result<(Vec<Vec<u32>>, Vec<f64>)> {
    let c = cb.latent_dim();
    if z.len() != sites * c {
        return Err(Error::invalid(format!(
            "latent holds {} values, expected {sites} sites x {c} channels",
            z.len()
        )));
    }
    let d = cb.sub_dim();
    let mut indices = vec![Vec::with_capacity(sites); cb.groups()];
    let mut dist = vec![0.0; cb.groups()];
    for site in z.chunks_exact(c) {
        for (g, sub) in site.chunks_exact(d).enumerate() {
            let (k, sq) = nearest_code(sub, cb.table(g).data(), d)?;
            indices[g].push(k as u32);
            dist[g] += sq;
        }
    }
    for v in &mut dist {
        *v /= sites as f64;
    }
    Ok((indices, dist))
}

#[derive(Debug, Clone)]
pub struct Quantized<T: Real = f32> {
    /// Concatenated codebook rows, same shape as the input latent.
    pub z_q: Tensor<T>,
    /// One token map per image (a single entry for unbatched input).
    pub tokens: Vec<TokenMap>,
    /// Mean squared distance between each sub-token and its code, per group.
    pub group_sq_dist: Vec<f64>,
}

/// Quantizes a latent of shape `h x w x C_l` or `B x h x w x C_l`.
pub fn quantize<T: Real>(z: &Tensor<T>, cb: &CodebookSet<T>) -> Result<Quantized<T>> {
    let (batch, gh, gw) = match *z.shape() {
        [h, w, c] if c == cb.latent_dim() => (1, h, w),
        [b, h, w, c] if c == cb.latent_dim() => (b, h, w),
        _ => {
            return Err(Error::invalid(format!(
                "latent shape {:?} does not end in C_l = {} (G={} x dim {})",
                z.shape(),
                cb.latent_dim(),
                cb.groups(),
                cb.sub_dim()
            )))
        }
    };
    let sites = batch * gh * gw;
    let (indices, group_sq_dist) = assign(z.data(), sites, cb)?;
    let lead = &z.shape()[..z.rank() - 1];
    let z_q = cb.lookup(&indices, lead)?;
    let per_image = gh * gw;
    let tokens = (0..batch)
        .map(|b| TokenMap {
            grid_h: gh,
            grid_w: gw,
            indices: indices
                .iter()
                .map(|grid| grid[b * per_image..(b + 1) * per_image].to_vec())
                .collect(),
        })
        .collect();
    Ok(Quantized {
        z_q,
        tokens,
        group_sq_dist,
    })
}

/// Forward value is `z_q`; the gradient reaching the output flows to `z`
/// unchanged and nothing flows into `z_q`.
pub fn straight_through<T: Real>(z: &Tensor<T>, z_q: &Tensor<T>) -> Result<Tensor<T>> {
    if z.shape() != z_q.shape() {
        return Err(Error::Shape {
            op: "straight-through",
            lhs: z.shape().to_vec(),
            rhs: z_q.shape().to_vec(),
        });
    }
    // (z - z) is exactly zero, so the value is bitwise z_q.
    z.sub(&z.detach())?.add(&z_q.detach())
}

/// Draws how many leading groups to keep: `i + 1` with probability `probs[i]`.
pub fn sample_keep<R: Rng + ?Sized>(sched: &MaskSchedule, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in sched.probs().iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        cum += p;
        if u < cum {
            return i + 1;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    last_nonzero + 1
}

/// Zeroes the channels of groups `keep+1..=G`.
pub fn nested_mask<T: Real>(z_q: &Tensor<T>, keep: usize, groups: usize) -> Result<Tensor<T>> {
    if keep == 0 || keep > groups {
        return Err(Error::invalid(format!(
            "M_keep must be in 1..={groups}, got {keep}"
        )));
    }
    let c = z_q.channels();
    if c % groups != 0 {
        return Err(Error::invalid(format!(
            "latent dimension {c} is not divisible into {groups} groups"
        )));
    }
    if keep == groups {
        return Ok(z_q.clone());
    }
    let w = c / groups;
    let kept = z_q.slice_channels(0, keep * w)?;
    let mut zero_shape = z_q.shape().to_vec();
    *zero_shape.last_mut().unwrap() = (groups - keep) * w;
    Tensor::concat_channels(&[kept, Tensor::zeros(&zero_shape)?])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    /// Fraction of each group's `K` rows selected at least once.
    pub usage: Vec<f64>,
    /// `exp(entropy)` of each group's empirical index distribution.
    pub perplexity: Vec<f64>,
}

impl UsageStats {
    /// Used rows over all `G * K` rows.
    pub fn overall_usage(&self) -> f64 {
        self.usage.iter().sum::<f64>() / self.usage.len() as f64
    }

    pub fn dead_fraction(&self) -> f64 {
        1.0 - self.overall_usage()
    }

    pub fn mean_perplexity(&self) -> f64 {
        self.perplexity.iter().sum::<f64>() / self.perplexity.len() as f64
    }
}

/// Accumulates index counts; [`usage_stats`] over a stream of token maps.
#[derive(Debug, Clone)]
pub struct UsageCounter {
    size: usize,
    counts: Vec<Vec<u64>>,
}

impl UsageCounter {
    pub fn new(size: usize, groups: usize) -> Self {
        Self {
            size,
            counts: vec![vec![0; size]; groups],
        }
    }

    pub fn add_indices(&mut self, group: usize, indices: &[u32]) -> Result<()> {
        let counts = self
            .counts
            .get_mut(group)
            .ok_or_else(|| Error::invalid(format!("group {group} out of range")))?;
        for &k in indices {
            let slot = counts
                .get_mut(k as usize)
                .ok_or_else(|| Error::invalid(format!("index {k} not below K={}", self.size)))?;
            *slot += 1;
        }
        Ok(())
    }

    pub fn add(&mut self, tokens: &TokenMap) -> Result<()> {
        if tokens.groups() != self.counts.len() {
            return Err(Error::invalid(format!(
                "token map has {} groups, expected {}",
                tokens.groups(),
                self.counts.len()
            )));
        }
        for (g, grid) in tokens.indices.iter().enumerate() {
            self.add_indices(g, grid)?;
        }
        Ok(())
    }

    pub fn counts(&self, group: usize) -> &[u64] {
        &self.counts[group]
    }

    pub fn stats(&self) -> UsageStats {
        let mut usage = Vec::with_capacity(self.counts.len());
        let mut perplexity = Vec::with_capacity(self.counts.len());
        for counts in &self.counts {
            let total: u64 = counts.iter().sum();
            let used = counts.iter().filter(|&&c| c > 0).count();
            usage.push(used as f64 / self.size as f64);
            let entropy: f64 = if total == 0 {
                0.0
            } else {
                counts
                    .iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let p = c as f64 / total as f64;
                        -p * p.ln()
                    })
                    .sum()
            };
            perplexity.push(entropy.exp());
        }
        UsageStats { usage, perplexity }
    }
}

pub fn usage_stats(history: &[TokenMap], size: usize, groups: usize) -> Result<UsageStats> {
    if history.is_empty() {
        return Err(Error::invalid(
            "usage statistics need at least one token map",
        ));
    }
    let mut counter = UsageCounter::new(size, groups);
    for t in history {
        counter.add(t)?;
    }
    Ok(counter.stats())
}

/// `log2(K^G) = G * log2(K)`.
pub fn capacity_log2(size: u64, groups: u64) -> f64 {
    groups as f64 * (size as f64).log2()
}
