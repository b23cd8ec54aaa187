//! Patch-MLP autoencoder.
//!
//! The encoder cuts the image into non-overlapping `D x D` patches, flattens
//! each to `D*D*3` values and runs the same MLP on every patch, producing one
//! `latent_dim` vector per patch: a `(H/D) x (W/D) x C_l` latent grid. The
//! decoder mirrors the MLP and finishes with `0.5 * (tanh + 1)` so pixels land
//! in `[0, 1]`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Real, Tensor};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Patch side in pixels.
    pub downsample: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Hidden-to-hidden layers on each side.
    pub depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            downsample: 8,
            latent_dim: 32,
            hidden_dim: 256,
            depth: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 || self.latent_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid(format!(
                "model extents must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.downsample * self.downsample * CHANNELS
    }

    fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.patch_dim()];
        dims.extend(std::iter::repeat(self.hidden_dim).take(self.depth + 1));
        dims.push(self.latent_dim);
        dims
    }

    fn decoder_dims(&self) -> Vec<usize> {
        let mut dims = self.encoder_dims();
        dims.reverse();
        dims
    }

    /// Latent grid extents for an `h x w` image.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let d = self.downsample;
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::invalid(format!(
                "image is {h}x{w}; height and width must be positive multiples of {d}"
            )));
        }
        Ok((h / d, w / d))
    }
}

/// Named parameters in deterministic (sorted) order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Replaces an existing parameter; the shape must not change.
    pub fn replace(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Shape {
                op: "replace",
                lhs: slot.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        *slot = t;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.tensors.values().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn bit_eq(&self, other: &ParamSet<T>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

fn layer_names(side: &str, i: usize) -> (String, String) {
    (
        format!("{side}.{i:02}.weight"),
        format!("{side}.{i:02}.bias"),
    )
}

/// Glorot-uniform weights, zero biases. Same seed, same bytes.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (side, dims) in [
        ("encoder", cfg.encoder_dims()),
        ("decoder", cfg.decoder_dims()),
    ] {
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f32> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-a..a) as f32)
                .collect();
            let (wn, bn) = layer_names(side, i);
            params.insert(wn, Tensor::param(&[fan_in, fan_out], w)?)?;
            params.insert(bn, Tensor::param(&[1, fan_out], vec![0.0; fan_out])?)?;
        }
    }
    Ok(params)
}

fn linear<T: Real>(x: &Tensor<T>, params: &ParamSet<T>, side: &str, i: usize) -> Result<Tensor<T>> {
    let (wn, bn) = layer_names(side, i);
    let w = params.get(&wn)?;
    let b = params.get(&bn)?;
    // Bias broadcast over rows expressed as ones[n,1] x b[1,out].
    let ones = Tensor::full(&[x.shape()[0], 1], T::ONE)?;
    x.matmul(w)?.add(&ones.matmul(b)?)
}

fn mlp<T: Real>(
    x: Tensor<T>,
    params: &ParamSet<T>,
    side: &str,
    layers: usize,
) -> Result<Tensor<T>> {
    let mut margin = f64::INFINITY;
    mlp_tracking(x, params, side, layers, &mut margin)
}

/// [`mlp`] that also lowers `margin` to the smallest `|pre-activation|` seen
/// at a leaky unit.
fn mlp_tracking<T: Real>(
    mut x: Tensor<T>,
    params: &ParamSet<T>,
    side: &str,
    layers: usize,
    margin: &mut f64,
) -> Result<Tensor<T>> {
    for i in 0..layers {
        x = linear(&x, params, side, i)?;
        if i + 1 < layers {
            for v in x.data() {
                *margin = margin.min(v.to_f64().abs());
            }
            x = x.leaky_relu()?;
        }
    }
    Ok(x)
}

/// Distance of the nearest leaky-relu input to its kink when `image` is
/// encoded and the unquantized latent decoded. Finite-difference checks need
/// this to exceed the perturbation they apply.
pub fn activation_margin<T: Real>(
    image: &Tensor<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
) -> Result<f64> {
    let (b, h, w) = image_dims(image.shape())?;
    let (gh, gw) = cfg.grid(h, w)?;
    let d = cfg.downsample;
    let sites = b * gh * gw;
    let patches = image.detach().gather(
        Arc::from(patch_indices(b, h, w, d)),
        &[sites, cfg.patch_dim()],
    )?;
    let mut margin = f64::INFINITY;
    let z = mlp_tracking(patches, params, "encoder", encoder_layers(cfg), &mut margin)?;
    mlp_tracking(z, params, "decoder", encoder_layers(cfg), &mut margin)?;
    Ok(margin)
}

/// `(batch, h, w)` of an image tensor of rank 3 (`H x W x 3`) or 4.
fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w, c] if *c == CHANNELS => Ok((1, *h, *w)),
        [b, h, w, c] if *c == CHANNELS => Ok((*b, *h, *w)),
        _ => Err(Error::invalid(format!(
            "expected an H x W x 3 image (optionally batched), got shape {shape:?}"
        ))),
    }
}

/// Flat indices taking a `[B, H, W, 3]` image to `[B*h*w, D*D*3]` patches.
fn patch_indices(b: usize, h: usize, w: usize, d: usize) -> Vec<usize> {
    let (gh, gw) = (h / d, w / d);
    let mut idx = Vec::with_capacity(b * h * w * CHANNELS);
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for dy in 0..d {
                    for dx in 0..d {
                        let y = gy * d + dy;
                        let x = gx * d + dx;
                        let base = ((bi * h + y) * w + x) * CHANNELS;
                        idx.extend(base..base + CHANNELS);
                    }
                }
            }
        }
    }
    idx
}

fn inverse_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

pub fn encoder_layers(cfg: &ModelConfig) -> usize {
    cfg.depth + 2
}

/// Image (`H x W x 3` or `B x H x W x 3`, values in `[0, 1]`) to latent grid
/// (`h x w x C_l`, batched likewise).
pub fn encode<T: Real>(
    image: &Tensor<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let (b, h, w) = image_dims(image.shape())?;
    let (gh, gw) = cfg.grid(h, w)?;
    let d = cfg.downsample;
    let sites = b * gh * gw;
    let patches = image.gather(
        Arc::from(patch_indices(b, h, w, d)),
        &[sites, cfg.patch_dim()],
    )?;
    let z = mlp(patches, params, "encoder", encoder_layers(cfg))?;
    if image.rank() == 3 {
        z.reshape(&[gh, gw, cfg.latent_dim])
    } else {
        z.reshape(&[b, gh, gw, cfg.latent_dim])
    }
}

/// Latent grid back to an image in `[0, 1]`.
pub fn decode<T: Real>(
    z_q: &Tensor<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    let (b, gh, gw) = match z_q.shape() {
        [gh, gw, c] if *c == cfg.latent_dim => (1, *gh, *gw),
        [b, gh, gw, c] if *c == cfg.latent_dim => (*b, *gh, *gw),
        s => {
            return Err(Error::invalid(format!(
                "latent must be h x w x {} (optionally batched), got shape {s:?}",
                cfg.latent_dim
            )))
        }
    };
    let d = cfg.downsample;
    let (h, w) = (gh * d, gw * d);
    let sites = b * gh * gw;
    let flat = z_q.reshape(&[sites, cfg.latent_dim])?;
    let y = mlp(flat, params, "decoder", encoder_layers(cfg))?;
    let ones = Tensor::full(y.shape(), T::ONE)?;
    let pixels = y.tanh()?.add(&ones)?.scale(0.5)?;
    let out_shape: Vec<usize> = if z_q.rank() == 3 {
        vec![h, w, CHANNELS]
    } else {
        vec![b, h, w, CHANNELS]
    };
    let inv = inverse_permutation(&patch_indices(b, h, w, d));
    pixels.gather(Arc::from(inv), &out_shape)
}
