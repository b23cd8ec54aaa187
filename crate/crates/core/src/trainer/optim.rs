use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::trainer::TrainConfig;

/// AdamW moments keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f32>>,
    pub second: BTreeMap<String, Vec<f32>>,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bit_eq(&self, other: &OptState) -> bool {
        fn same(a: &BTreeMap<String, Vec<f32>>, b: &BTreeMap<String, Vec<f32>>) -> bool {
            a.len() == b.len()
                && a.iter().zip(b).all(|((ka, va), (kb, vb))| {
                    ka == kb
                        && va.len() == vb.len()
                        && va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits())
                })
        }
        self.step == other.step
            && same(&self.first, &other.first)
            && same(&self.second, &other.second)
    }
}

/// One AdamW update with decoupled weight decay.
///
/// `params[i]` is updated with `grads[i]`. All gradients are checked before any
/// state changes, so a rejected step leaves `state` untouched. Returns the new
/// parameter tensors (tracked leaves) in input order.
pub fn adamw_step(
    params: &[(&str, &Tensor<f32>)],
    grads: &[Vec<f32>],
    state: &mut OptState,
    cfg: &TrainConfig,
) -> Result<Vec<Tensor<f32>>> {
    if params.len() != grads.len() {
        return Err(Error::invalid(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(Error::Shape {
                op: "adamw",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{name}[{i}] = {}", g[i])));
        }
        for m in [&state.first, &state.second] {
            if let Some(m) = m.get(*name) {
                if m.len() != p.numel() {
                    return Err(Error::Mismatch(format!(
                        "optimizer moment for {name} has {} entries, parameter has {}",
                        m.len(),
                        p.numel()
                    )));
                }
            }
        }
    }

    let t = state.step + 1;
    let (lr, wd, b1, b2, eps) = (
        cfg.learning_rate,
        cfg.weight_decay,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    );
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let decay = 1.0 - lr * wd;

    let mut out = Vec::with_capacity(params.len());
    for ((name, p), g) in params.iter().zip(grads) {
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; p.numel()]);
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; p.numel()]);
        let data: Vec<f32> = p
            .data()
            .iter()
            .zip(g)
            .zip(m.iter_mut().zip(v.iter_mut()))
            .map(|((&w, &g), (m, v))| {
                let g = g as f64;
                let mn = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = (mn / c1) / ((vn / c2).sqrt() + eps);
                (w as f64 * decay - lr * update) as f32
            })
            .collect();
        out.push(Tensor::param(p.shape(), data)?);
    }
    state.step = t;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: Vec<f32>) -> (String, Tensor<f32>) {
        (name.to_string(), Tensor::param(&[v.len()], v).unwrap())
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let cfg = TrainConfig::default();
        let (n, p) = one("w", vec![1.0, -3.5, 0.25]);
        let mut st = OptState::new();
        let out = adamw_step(&[(&n, &p)], &[vec![0.0; 3]], &mut st, &cfg).unwrap();
        let factor = 1.0 - 5e-7;
        for (a, b) in out[0].data().iter().zip(p.data()) {
            assert_eq!(*a, (*b as f64 * factor) as f32);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        let (n, p) = one("w", vec![0.0]);
        let mut st = OptState::new();
        let out = adamw_step(&[(&n, &p)], &[vec![1.0]], &mut st, &cfg).unwrap();
        // m_hat = v_hat = 1 after bias correction
        let expect = -1e-5 / (1.0 + 1e-8);
        assert!((out[0].data()[0] as f64 - expect).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let cfg = TrainConfig::default();
        let (n1, p1) = one("ok", vec![1.0]);
        let (n2, p2) = one("decoder.bad", vec![1.0, 2.0]);
        let mut st = OptState::new();
        let err = adamw_step(
            &[(&n1, &p1), (&n2, &p2)],
            &[vec![0.5], vec![1.0, f32::NAN]],
            &mut st,
            &cfg,
        )
        .unwrap_err();
        assert!(err.to_string().contains("decoder.bad"), "{err}");
        assert_eq!(st, OptState::new());
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let run = || {
            let (n, mut p) = one("w", vec![0.3, -0.7, 1.1]);
            let mut st = OptState::new();
            for k in 0..50 {
                let g: Vec<f32> = p.data().iter().map(|w| w * 2.0 + k as f32 * 0.01).collect();
                p = adamw_step(&[(&n, &p)], &[g], &mut st, &cfg)
                    .unwrap()
                    .remove(0);
            }
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert!(a.bit_eq(&b));
        assert!(sa.bit_eq(&sb));
        assert_eq!(sa.step, 50);
    }

    #[test]
    fn moment_shape_mismatch_rejected() {
        let cfg = TrainConfig::default();
        let (n, p) = one("w", vec![0.0, 0.0]);
        let mut st = OptState::new();
        st.first.insert("w".into(), vec![0.0]);
        assert!(adamw_step(&[(&n, &p)], &[vec![0.0; 2]], &mut st, &cfg).is_err());
    }
}
