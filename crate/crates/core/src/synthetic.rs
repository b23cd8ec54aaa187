//! Procedural image corpora for desk-scale training and the experiments.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::Image;

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Scenes of a two-color gradient background with a few filled discs,
/// rectangles and a soft stripe pattern.
pub fn scenes(count: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| scene(&mut rng, size)).collect()
}

fn scene<R: Rng>(rng: &mut R, size: usize) -> Image {
    let s = size as f64;
    let (c0, c1) = (color(rng), color(rng));
    let angle: f64 = rng.gen_range(0.0..TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut px = vec![[0.0f64; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = 0.5 + 0.5 * ((x as f64 / s - 0.5) * dx + (y as f64 / s - 0.5) * dy) * 1.4;
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                px[y * size + x][c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    if rng.gen_bool(0.5) {
        let freq = rng.gen_range(1.0..4.0) * TAU / s;
        let phase: f64 = rng.gen_range(0.0..TAU);
        let a: f64 = rng.gen_range(0.0..TAU);
        let amp = rng.gen_range(0.05..0.2);
        for y in 0..size {
            for x in 0..size {
                let v = amp * ((x as f64 * a.cos() + y as f64 * a.sin()) * freq + phase).sin();
                for c in px[y * size + x].iter_mut() {
                    *c += v;
                }
            }
        }
    }

    for _ in 0..rng.gen_range(1..=3) {
        let col = color(rng);
        let cx = rng.gen_range(0.0..s);
        let cy = rng.gen_range(0.0..s);
        let r = rng.gen_range(0.12..0.35) * s;
        let disc = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if disc {
                    fx * fx + fy * fy <= r * r
                } else {
                    fx.abs() <= r && fy.abs() <= 0.6 * r
                };
                if inside {
                    px[y * size + x] = col;
                }
            }
        }
    }

    let data = px
        .iter()
        .flat_map(|p| p.iter().map(|&v| v.clamp(0.0, 1.0) as f32))
        .collect();
    Image::new(size, size, data).expect("extents match")
}

/// Number of mixture components in [`blob_images`].
pub const BLOB_MODES: usize = 8;

/// Images of a single soft Gaussian spot whose center is drawn from a mixture
/// of [`BLOB_MODES`] Gaussians arranged on a ring. The data therefore has two
/// intrinsic degrees of freedom (the spot position).
pub fn blob_images(count: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let spot = 0.18 * s;
    (0..count)
        .map(|_| {
            let mode = rng.gen_range(0..BLOB_MODES);
            let theta = TAU * mode as f64 / BLOB_MODES as f64;
            let (nx, ny): (f64, f64) = (standard_normal(&mut rng), standard_normal(&mut rng));
            let cx = s * (0.5 + 0.28 * theta.cos() + 0.07 * nx);
            let cy = s * (0.5 + 0.28 * theta.sin() + 0.07 * ny);
            let mut data = Vec::with_capacity(size * size * 3);
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let v = (-(dx * dx + dy * dy) / (2.0 * spot * spot)).exp() as f32;
                    data.extend([v, v, v]);
                }
            }
            Image::new(size, size, data).expect("extents match")
        })
        .collect()
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}
