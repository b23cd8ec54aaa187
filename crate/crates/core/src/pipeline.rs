//! Inference path shared by evaluation, the codec and the experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::mgq::{nested_mask, quantize, CodebookSet, TokenMap, UsageCounter, UsageStats};
use crate::model::{decode, encode, ModelConfig, ParamSet};
use crate::ndgrad::Tensor;
use crate::objectives::{psnr, ssim};
use crate::trainer::Checkpoint;

/// Images are processed in chunks of this many during evaluation.
const EVAL_CHUNK: usize = 32;

/// Frozen encoder, codebooks and decoder.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub model: ModelConfig,
    params: ParamSet<f32>,
    codebooks: CodebookSet<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean per-image PSNR (dB).
    pub psnr: f64,
    pub ssim: f64,
    pub usage: f64,
    pub dead_fraction: f64,
    pub perplexity: f64,
    pub per_group: UsageStats,
}

impl Tokenizer {
    /// Detaches every tensor so inference builds no graph.
    pub fn new(
        model: ModelConfig,
        params: &ParamSet<f32>,
        codebooks: &CodebookSet<f32>,
    ) -> Result<Self> {
        if codebooks.latent_dim() != model.latent_dim {
            return Err(Error::Mismatch(format!(
                "codebooks cover {} latent channels (G={} x {}), model has C_l={}",
                codebooks.latent_dim(),
                codebooks.groups(),
                codebooks.sub_dim(),
                model.latent_dim
            )));
        }
        let mut frozen = ParamSet::new();
        for (name, t) in params.iter() {
            frozen.insert(name, t.detach())?;
        }
        let tables = codebooks.tables().iter().map(|t| t.detach()).collect();
        Ok(Self {
            model,
            params: frozen,
            codebooks: CodebookSet::from_tables(tables)?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::new(ckpt.config.model.clone(), &ckpt.params, &ckpt.codebooks)
    }

    pub fn groups(&self) -> usize {
        self.codebooks.groups()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks.size()
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn codebooks(&self) -> &CodebookSet<f32> {
        &self.codebooks
    }

    /// Token maps for equally sized images whose sides are multiples of `D`.
    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<TokenMap>> {
        let x: Tensor<f32> = Image::batch(images)?;
        let z = encode(&x, &self.params, &self.model)?;
        Ok(quantize(&z, &self.codebooks)?.tokens)
    }

    pub fn encode_tokens(&self, image: &Image) -> Result<TokenMap> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    /// Reconstructs token maps sharing one grid, keeping the first `keep`
    /// groups (all when `None`).
    pub fn decode_batch(&self, tokens: &[TokenMap], keep: Option<usize>) -> Result<Vec<Image>> {
        let first = tokens
            .first()
            .ok_or_else(|| Error::invalid("no token maps to decode"))?;
        let g = self.groups();
        let (gh, gw) = (first.grid_h, first.grid_w);
        let mut indices = vec![Vec::with_capacity(tokens.len() * gh * gw); g];
        for t in tokens {
            if t.groups() != g {
                return Err(Error::Mismatch(format!(
                    "token map has {} groups, codebooks have {g}",
                    t.groups()
                )));
            }
            if (t.grid_h, t.grid_w) != (gh, gw) {
                return Err(Error::invalid(
                    "token maps in a batch must share one grid size",
                ));
            }
            t.validate(self.codebook_size())?;
            for (dst, src) in indices.iter_mut().zip(&t.indices) {
                dst.extend_from_slice(src);
            }
        }
        let z_q = self.codebooks.lookup(&indices, &[tokens.len(), gh, gw])?;
        let z_q = nested_mask(&z_q, keep.unwrap_or(g), g)?;
        let x = decode(&z_q, &self.params, &self.model)?;
        let per = x.numel() / tokens.len();
        let (h, w) = (gh * self.model.downsample, gw * self.model.downsample);
        x.data()
            .chunks_exact(per)
            .map(|c| Image::new(h, w, c.to_vec()))
            .collect()
    }

    pub fn decode_tokens(&self, tokens: &TokenMap, keep: Option<usize>) -> Result<Image> {
        Ok(self
            .decode_batch(std::slice::from_ref(tokens), keep)?
            .remove(0))
    }

    /// Encode, then decode from the tokens.
    pub fn reconstruct(&self, image: &Image, keep: Option<usize>) -> Result<Image> {
        self.decode_tokens(&self.encode_tokens(image)?, keep)
    }

    /// Reconstruction quality and codebook usage over `images`.
    pub fn evaluate(&self, images: &[Image], keep: Option<usize>) -> Result<EvalMetrics> {
        if images.is_empty() {
            return Err(Error::invalid("cannot evaluate on zero images"));
        }
        let mut counter = UsageCounter::new(self.codebook_size(), self.groups());
        let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
        for chunk in images.chunks(EVAL_CHUNK) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let tokens = self.encode_batch(&refs)?;
            for t in &tokens {
                counter.add(t)?;
            }
            let recon = self.decode_batch(&tokens, keep)?;
            for (orig, rec) in chunk.iter().zip(&recon) {
                let (a, b) = (orig.to_tensor::<f32>(), rec.to_tensor::<f32>());
                psnr_sum += psnr(&a, &b)?;
                ssim_sum += ssim(&a, &b)?;
            }
        }
        let n = images.len() as f64;
        let stats = counter.stats();
        Ok(EvalMetrics {
            psnr: psnr_sum / n,
            ssim: ssim_sum / n,
            usage: stats.overall_usage(),
            dead_fraction: stats.dead_fraction(),
            perplexity: stats.mean_perplexity(),
            per_group: stats,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::synthetic::scenes;

    fn tiny() -> Tokenizer {
        let cfg = ModelConfig {
            downsample: 8,
            latent_dim: 8,
            hidden_dim: 16,
            depth: 1,
        };
        let params = init_params(&cfg, 1).unwrap();
        let cb = CodebookSet::init(4, 8, 2, 2).unwrap();
        Tokenizer::new(cfg, &params, &cb).unwrap()
    }

    #[test]
    fn batch_matches_single() {
        let tok = tiny();
        let imgs = scenes(3, 16, 0);
        let refs: Vec<&Image> = imgs.iter().collect();
        let batch = tok.encode_batch(&refs).unwrap();
        for (img, t) in imgs.iter().zip(&batch) {
            assert_eq!(&tok.encode_tokens(img).unwrap(), t);
        }
        let dec = tok.decode_batch(&batch, None).unwrap();
        for (t, d) in batch.iter().zip(&dec) {
            assert_eq!(&tok.decode_tokens(t, None).unwrap(), d);
        }
    }

    #[test]
    fn keep_all_is_default() {
        let tok = tiny();
        let img = &scenes(1, 16, 4)[0];
        let t = tok.encode_tokens(img).unwrap();
        assert_eq!(
            tok.decode_tokens(&t, None).unwrap(),
            tok.decode_tokens(&t, Some(4)).unwrap()
        );
        assert!(tok.decode_tokens(&t, Some(5)).is_err());
    }

    #[test]
    fn evaluate_ranges() {
        let tok = tiny();
        let m = tok.evaluate(&scenes(5, 16, 9), None).unwrap();
        assert!(m.psnr.is_finite() && m.psnr > 0.0);
        assert!((0.0..=1.0).contains(&m.usage));
        assert!((m.usage + m.dead_fraction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_codebook_rejected() {
        let cfg = ModelConfig {
            latent_dim: 8,
            hidden_dim: 16,
            depth: 1,
            ..ModelConfig::default()
        };
        let params = init_params(&cfg, 1).unwrap();
        let cb = CodebookSet::init(4, 8, 4, 2).unwrap();
        assert!(Tokenizer::new(cfg, &params, &cb).is_err());
    }
}
