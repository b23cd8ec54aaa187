//! Diagnostic sweeps that emit CSV tables.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::mgq::MaskSchedule;
use crate::pipeline::Tokenizer;
use crate::synthetic::blob_images;
use crate::trainer::{split_holdout, StepReport, TrainConfig, Trainer};

/// Rows of one experiment; the CSV header comes from the row type, so the
/// column set depends only on the experiment kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport<R> {
    pub rows: Vec<R>,
}

impl<R: Serialize> ExperimentReport<R> {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Mean total loss over the last tenth of a run.
fn tail_loss(reports: &[StepReport]) -> f64 {
    if reports.is_empty() {
        return f64::NAN;
    }
    let n = (reports.len() / 10).max(1);
    let tail = &reports[reports.len() - n..];
    tail.iter().map(|r| r.losses.total).sum::<f64>() / n as f64
}

fn train(cfg: TrainConfig, data: &[Image]) -> Result<(Trainer, f64)> {
    let mut t = Trainer::new(cfg)?;
    let mut reports = Vec::with_capacity(t.config().steps as usize);
    while t.step() < t.config().steps {
        reports.push(t.train_step(data, None)?);
    }
    let loss = tail_loss(&reports);
    Ok((t, loss))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeadpointRow {
    pub sub_dim: usize,
    pub codebook_size: usize,
    pub usage: f64,
    pub dead_fraction: f64,
    pub perplexity: f64,
    pub psnr: f64,
    pub loss: f64,
}

/// Final position of one code in a two-dimensional codebook.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodePoint {
    pub sub_dim: usize,
    pub codebook_size: usize,
    pub code: usize,
    pub x: f32,
    pub y: f32,
    pub used: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeadpointConfig {
    /// `(sub_dim, K)` cells; each trains a single-group quantizer.
    pub cells: Vec<(usize, usize)>,
    pub steps: u64,
    pub train_images: usize,
    pub eval_images: usize,
    /// Blob image side; one latent site per image.
    pub image_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DeadpointConfig {
    fn default() -> Self {
        Self {
            cells: vec![(2, 32), (16, 1024)],
            steps: 3000,
            train_images: 2048,
            eval_images: 4096,
            image_size: 8,
            hidden_dim: 64,
            depth: 1,
            learning_rate: 3e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl DeadpointConfig {
    pub fn cell_config(&self, sub_dim: usize, size: usize) -> Result<TrainConfig> {
        let mut cfg = TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            steps: self.steps,
            seed: self.seed,
            image_size: self.image_size,
            eval_every: 0,
            ..TrainConfig::default()
        }
        .with_groups(1, size)?;
        cfg.model.downsample = self.image_size;
        cfg.model.latent_dim = sub_dim;
        cfg.model.hidden_dim = self.hidden_dim;
        cfg.model.depth = self.depth;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Trains one small quantizing autoencoder per cell on blob images and
/// measures how many codes are ever selected on a fresh evaluation set.
pub fn run_deadpoint_experiment(
    cfg: &DeadpointConfig,
) -> Result<(ExperimentReport<DeadpointRow>, Vec<CodePoint>)> {
    let train_set = blob_images(cfg.train_images, cfg.image_size, cfg.seed);
    let eval_set = blob_images(cfg.eval_images, cfg.image_size, cfg.seed.wrapping_add(1));
    let cells: Vec<(DeadpointRow, Vec<CodePoint>)> = cfg
        .cells
        .par_iter()
        .map(|&(sub_dim, size)| {
            let (trainer, loss) = train(cfg.cell_config(sub_dim, size)?, &train_set)?;
            let tok = trainer.tokenizer()?;
            let m = tok.evaluate(&eval_set, None)?;
            let row = DeadpointRow {
                sub_dim,
                codebook_size: size,
                usage: m.usage,
                dead_fraction: m.dead_fraction,
                perplexity: m.perplexity,
                psnr: m.psnr,
                loss,
            };
            let mut points = Vec::new();
            if sub_dim == 2 {
                let mut used = vec![false; size];
                for chunk in eval_set.chunks(64) {
                    let refs: Vec<&Image> = chunk.iter().collect();
                    for t in tok.encode_batch(&refs)? {
                        for &k in &t.indices[0] {
                            used[k as usize] = true;
                        }
                    }
                }
                let table = tok.codebooks().table(0).data();
                points = (0..size)
                    .map(|code| CodePoint {
                        sub_dim,
                        codebook_size: size,
                        code,
                        x: table[2 * code],
                        y: table[2 * code + 1],
                        used: used[code],
                    })
                    .collect();
            }
            Ok((row, points))
        })
        .collect::<Result<_>>()?;
    let (rows, points): (Vec<_>, Vec<_>) = cells.into_iter().unzip();
    Ok((ExperimentReport { rows }, points.concat()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MkeepRow {
    pub groups: usize,
    pub codebook_size: usize,
    pub m_keep: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Evaluates the decoder with only the first `1..=G` groups.
pub fn run_mkeep_sweep(tok: &Tokenizer, eval: &[Image]) -> Result<ExperimentReport<MkeepRow>> {
    let rows = (1..=tok.groups())
        .map(|keep| {
            let m = tok.evaluate(eval, Some(keep))?;
            Ok(MkeepRow {
                groups: tok.groups(),
                codebook_size: tok.codebook_size(),
                m_keep: keep,
                psnr: m.psnr,
                ssim: m.ssim,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub groups: usize,
    pub codebook_size: usize,
    pub sub_dim: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub usage: f64,
    pub dead_fraction: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    /// `(G, K)` cells sharing the base latent width.
    pub cells: Vec<(usize, usize)>,
    /// Everything except `G`, `K` and the mask schedule.
    pub base: TrainConfig,
    /// Use the nested schedule for `G > 1` (otherwise always keep all groups).
    pub nested_masking: bool,
}

impl GridConfig {
    pub fn cell_config(&self, groups: usize, size: usize) -> Result<TrainConfig> {
        let mut cfg = self.base.clone().with_groups(groups, size)?;
        if !self.nested_masking {
            cfg.mask_probs = MaskSchedule::disabled(groups)?.probs().to_vec();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Trains every cell with the same budget and seed on `dataset` (last tenth
/// held out for evaluation).
pub fn run_ablation_grid(cfg: &GridConfig, dataset: &[Image]) -> Result<ExperimentReport<GridRow>> {
    let (train_set, holdout) = split_holdout(dataset);
    if holdout.is_empty() {
        return Err(Error::invalid("ablation grid needs at least two images"));
    }
    let rows = cfg
        .cells
        .par_iter()
        .map(|&(groups, size)| {
            let tc = cfg.cell_config(groups, size)?;
            let sub_dim = tc.sub_dim();
            let (trainer, loss) = train(tc, train_set)?;
            let m = trainer.evaluate(holdout, None)?;
            Ok(GridRow {
                groups,
                codebook_size: size,
                sub_dim,
                psnr: m.psnr,
                ssim: m.ssim,
                usage: m.usage,
                dead_fraction: m.dead_fraction,
                loss,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ExperimentReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::scenes;

    #[test]
    fn deadpoint_rows_and_points() {
        let cfg = DeadpointConfig {
            cells: vec![(2, 4), (4, 8)],
            steps: 3,
            train_images: 16,
            eval_images: 16,
            hidden_dim: 8,
            batch_size: 4,
            ..DeadpointConfig::default()
        };
        let (report, points) = run_deadpoint_experiment(&cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(
            (report.rows[0].sub_dim, report.rows[1].codebook_size),
            (2, 8)
        );
        assert_eq!(points.len(), 4);
        let csv = report.to_csv().unwrap();
        assert!(csv.starts_with("sub_dim,codebook_size,usage,dead_fraction,perplexity,psnr,loss\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn grid_rows_follow_config_order() {
        let mut base = TrainConfig::default();
        base.apply_kv("hidden_dim=8\ndepth=1\nlatent_dim=8\nimage_size=16\nbatch_size=2\nsteps=2")
            .unwrap();
        let cfg = GridConfig {
            cells: vec![(4, 4), (1, 16), (2, 8)],
            base,
            nested_masking: true,
        };
        let r = run_ablation_grid(&cfg, &scenes(10, 16, 0)).unwrap();
        let keys: Vec<_> = r
            .rows
            .iter()
            .map(|r| (r.groups, r.codebook_size, r.sub_dim))
            .collect();
        assert_eq!(keys, vec![(4, 4, 2), (1, 16, 8), (2, 8, 4)]);
        assert!(r.rows.iter().all(|r| r.usage <= 1.0));
    }

    #[test]
    fn mkeep_has_g_rows() {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv("hidden_dim=8\ndepth=1\nlatent_dim=8\nimage_size=16")
            .unwrap();
        let t = Trainer::new(cfg).unwrap();
        let tok = t.tokenizer().unwrap();
        let eval = scenes(3, 16, 1);
        let r = run_mkeep_sweep(&tok, &eval).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.rows[3].psnr, tok.evaluate(&eval, None).unwrap().psnr);
    }
}
