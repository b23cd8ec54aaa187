//! Optimization loop, datasets and checkpoints.

mod checkpoint;
mod config;
mod dataset;
mod optim;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::TrainConfig;
pub use dataset::{load_dataset, split_holdout, write_corpus};
pub use optim::{adamw_step, OptState};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::mgq::{
    nested_mask, quantize, sample_keep, straight_through, CodebookSet, MaskSchedule, UsageCounter,
};
use crate::model::{decode, encode, init_params, ParamSet};
use crate::ndgrad::{backward, Tensor};
use crate::objectives::{total_loss, LossBreakdown, LossHooks};
use crate::pipeline::{EvalMetrics, Tokenizer};

/// Codebooks are seeded from the run seed offset by this constant so they do
/// not share a stream with the network weights.
const CODEBOOK_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;
/// ChaCha stream used for batch sampling and `M_keep` draws.
const SAMPLER_STREAM: u64 = 1;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub keep: usize,
    pub losses: LossBreakdown,
    /// Fraction of all `G * K` rows selected in this batch.
    pub usage: f64,
    pub perplexity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
}

pub struct Trainer {
    cfg: TrainConfig,
    schedule: MaskSchedule,
    params: ParamSet<f32>,
    codebooks: CodebookSet<f32>,
    opt: OptState,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg.model, cfg.seed)?;
        let codebooks = CodebookSet::init(
            cfg.groups,
            cfg.codebook_size,
            cfg.sub_dim(),
            cfg.seed.wrapping_add(CODEBOOK_SEED_OFFSET),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(Self {
            schedule: cfg.mask_schedule()?,
            cfg,
            params,
            codebooks,
            opt: OptState::new(),
            rng,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let cfg = ckpt.config;
        cfg.validate()?;
        if ckpt.codebooks.groups() != cfg.groups
            || ckpt.codebooks.size() != cfg.codebook_size
            || ckpt.codebooks.sub_dim() != cfg.sub_dim()
        {
            return Err(Error::Mismatch(format!(
                "checkpoint codebooks are G={} K={} dim={}, config says G={} K={} dim={}",
                ckpt.codebooks.groups(),
                ckpt.codebooks.size(),
                ckpt.codebooks.sub_dim(),
                cfg.groups,
                cfg.codebook_size,
                cfg.sub_dim()
            )));
        }
        Ok(Self {
            schedule: cfg.mask_schedule()?,
            rng: ckpt.rng.restore()?,
            cfg,
            params: ckpt.params,
            codebooks: ckpt.codebooks,
            opt: ckpt.opt,
            step: ckpt.step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Changes the total step budget, e.g. to extend a resumed run.
    pub fn set_steps(&mut self, steps: u64) {
        self.cfg.steps = steps;
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn codebooks(&self) -> &CodebookSet<f32> {
        &self.codebooks
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            params: self.params.clone(),
            codebooks: self.codebooks.clone(),
            opt: self.opt.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::new(self.cfg.model.clone(), &self.params, &self.codebooks)
    }

    pub fn evaluate(&self, images: &[Image], keep: Option<usize>) -> Result<EvalMetrics> {
        self.tokenizer()?.evaluate(images, keep)
    }

    /// Loss on `images` with all groups kept; no update, no rng draw.
    pub fn loss_on(&self, images: &[Image]) -> Result<LossBreakdown> {
        let refs: Vec<&Image> = images.iter().collect();
        let x: Tensor<f32> = Image::batch(&refs)?;
        let tok = self.tokenizer()?;
        let z = encode(&x, tok.params(), &self.cfg.model)?;
        let q = quantize(&z, tok.codebooks())?;
        let recon = decode(&q.z_q, tok.params(), &self.cfg.model)?;
        Ok(total_loss(
            &recon,
            &x,
            &z,
            &q.z_q,
            &self.cfg.loss,
            &LossHooks::default(),
        )?
        .1)
    }

    pub fn train_step(
        &mut self,
        data: &[Image],
        keep_override: Option<usize>,
    ) -> Result<StepReport> {
        self.train_step_with(data, keep_override, &LossHooks::default())
    }

    /// Samples a batch with replacement from `data` and applies one update.
    ///
    /// `M_keep` is always drawn, even when overridden, so the sampler stream
    /// stays aligned with an unforced run.
    pub fn train_step_with(
        &mut self,
        data: &[Image],
        keep_override: Option<usize>,
        hooks: &LossHooks<'_, f32>,
    ) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let g = self.cfg.groups;
        let batch: Vec<&Image> = (0..self.cfg.batch_size)
            .map(|_| &data[self.rng.gen_range(0..data.len())])
            .collect();
        let sampled = sample_keep(&self.schedule, &mut self.rng);
        let keep = keep_override.unwrap_or(sampled);

        let x: Tensor<f32> = Image::batch(&batch)?;
        let z = encode(&x, &self.params, &self.cfg.model)?;
        let q = quantize(&z, &self.codebooks)?;
        let z_st = straight_through(&z, &q.z_q)?;
        let z_in = nested_mask(&z_st, keep, g)?;
        let recon = decode(&z_in, &self.params, &self.cfg.model)?;
        let (loss, losses) = total_loss(&recon, &x, &z, &q.z_q, &self.cfg.loss, hooks)?;

        self.params.zero_grad();
        self.codebooks.zero_grad();
        backward(&loss)?;

        let cb_names: Vec<String> = (0..g).map(|i| format!("codebook.{i}")).collect();
        let mut named: Vec<(&str, &Tensor<f32>)> = self.params.iter().collect();
        named.extend(
            cb_names
                .iter()
                .map(String::as_str)
                .zip(self.codebooks.tables()),
        );
        let grads: Vec<Vec<f32>> = named
            .iter()
            .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        let updated = adamw_step(&named, &grads, &mut self.opt, &self.cfg)?;

        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        let mut updated = updated.into_iter();
        for name in &names {
            self.params
                .replace(name, updated.next().expect("one per parameter"))?;
        }
        for gi in 0..g {
            self.codebooks
                .replace_table(gi, updated.next().expect("one per table"))?;
        }

        let mut counter = UsageCounter::new(self.cfg.codebook_size, g);
        for t in &q.tokens {
            counter.add(t)?;
        }
        let stats = counter.stats();
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            keep,
            losses,
            usage: stats.overall_usage(),
            perplexity: stats.mean_perplexity(),
            psnr: None,
        })
    }

    /// Trains until `config().steps`, writing one JSON line per step. Held-out
    /// PSNR is attached every `eval_every` steps when `holdout` is non-empty.
    /// Each line is flushed, so a failure leaves the log up to the last step.
    pub fn fit<W: Write>(&mut self, train: &[Image], holdout: &[Image], log: &mut W) -> Result<()> {
        while self.step < self.cfg.steps {
            let mut report = self.train_step(train, None)?;
            let every = self.cfg.eval_every;
            if every > 0 && report.step % every == 0 && !holdout.is_empty() {
                report.psnr = Some(self.evaluate(holdout, None)?.psnr);
            }
            let line = serde_json::to_string(&report)?;
            writeln!(log, "{line}")
                .and_then(|_| log.flush())
                .map_err(|e| Error::io("metrics log", e))?;
        }
        Ok(())
    }
}

/// Fresh run on `dataset` (last tenth held out). Returns the final checkpoint.
pub fn fit<W: Write>(cfg: TrainConfig, dataset: &[Image], log: &mut W) -> Result<Checkpoint> {
    let (train, holdout) = split_holdout(dataset);
    let mut trainer = Trainer::new(cfg)?;
    trainer.fit(train, holdout, log)?;
    Ok(trainer.checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::scenes;

    fn cfg() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.apply_kv("hidden_dim=16\ndepth=1\nlatent_dim=8\ncodebook_size=8\nimage_size=16\nbatch_size=2\nlr=1e-3")
            .unwrap();
        c
    }

    #[test]
    fn zero_steps_is_initialization() {
        let c = TrainConfig { steps: 0, ..cfg() };
        let ck = fit(c.clone(), &scenes(4, 16, 0), &mut Vec::new()).unwrap();
        assert!(ck.bit_eq(&Trainer::new(c).unwrap().checkpoint()));
    }

    #[test]
    fn zero_weights_only_decay() {
        let mut c = cfg();
        c.loss = crate::objectives::LossWeights {
            eps: 1e-3,
            ..crate::objectives::LossWeights::zero()
        };
        let mut t = Trainer::new(c.clone()).unwrap();
        let before = t.params().clone();
        t.train_step(&scenes(3, 16, 1), None).unwrap();
        let factor = 1.0 - c.learning_rate * c.weight_decay;
        for ((_, a), (_, b)) in before.iter().zip(t.params().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, (*x as f64 * factor) as f32);
            }
        }
    }

    #[test]
    fn forced_full_keep_equals_unmasked_training() {
        let mut masked = cfg();
        masked.mask_probs = vec![0.25; 4];
        let mut plain = cfg();
        plain.mask_probs = vec![0.0, 0.0, 0.0, 1.0];
        let data = scenes(6, 16, 2);
        let mut a = Trainer::new(masked).unwrap();
        let mut b = Trainer::new(plain).unwrap();
        for _ in 0..3 {
            let ra = a.train_step(&data, Some(4)).unwrap();
            let rb = b.train_step(&data, None).unwrap();
            assert_eq!(ra.losses, rb.losses);
        }
        assert!(a.params().bit_eq(b.params()));
    }

    #[test]
    fn log_has_one_line_per_step() {
        let c = TrainConfig {
            steps: 5,
            eval_every: 2,
            ..cfg()
        };
        let mut log = Vec::new();
        fit(c, &scenes(12, 16, 3), &mut log).unwrap();
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].contains("\"psnr\""));
        assert!(!lines[0].contains("\"psnr\""));
        let v: serde_json::Value = serde_json::from_str(lines[4]).unwrap();
        assert_eq!(v["step"], 5);
    }
}
