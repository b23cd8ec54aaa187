use std::sync::Arc;

use super::kernels;
use super::tensor::{Node, Tensor};
use super::Real;
use crate::error::{Error, Result};

/// Negative-side slope of the leaky ReLU used throughout the model.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub enum PrimitiveOp {
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// `[n, k] x [k, m] -> [n, m]`.
    MatMul,
    LeakyRelu {
        slope: f64,
    },
    Reshape {
        shape: Vec<usize>,
    },
    /// Concatenation along the last axis; leading extents must agree.
    ConcatChannel,
    /// Half-open range `[start, end)` of the last axis.
    SliceChannel {
        start: usize,
        end: usize,
    },
    /// Mean of all elements, producing shape `[1]`.
    ReduceMean,
    /// Sum of all elements, producing shape `[1]`.
    ReduceSum,
    Square,
    Sqrt,
    ScalarMul {
        factor: f64,
    },
    Tanh,
    /// Flat gather: `out[i] = input[indices[i]]`.
    Gather {
        indices: Arc<[usize]>,
        shape: Vec<usize>,
    },
}

impl PrimitiveOp {
    pub fn name(&self) -> &'static str {
        match self {
            PrimitiveOp::Add => "add",
            PrimitiveOp::Sub => "sub",
            PrimitiveOp::Mul => "mul",
            PrimitiveOp::MatMul => "matmul",
            PrimitiveOp::LeakyRelu { .. } => "leaky-relu",
            PrimitiveOp::Reshape { .. } => "reshape",
            PrimitiveOp::ConcatChannel => "concat-channel",
            PrimitiveOp::SliceChannel { .. } => "slice-channel",
            PrimitiveOp::ReduceMean => "reduce-mean",
            PrimitiveOp::ReduceSum => "reduce-sum",
            PrimitiveOp::Square => "square",
            PrimitiveOp::Sqrt => "sqrt",
            PrimitiveOp::ScalarMul { .. } => "scalar-mul",
            PrimitiveOp::Tanh => "tanh",
            PrimitiveOp::Gather { .. } => "gather",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            PrimitiveOp::Add | PrimitiveOp::Sub | PrimitiveOp::Mul | PrimitiveOp::MatMul => Some(2),
            PrimitiveOp::ConcatChannel => None,
            _ => Some(1),
        }
    }
}

fn shape_err(op: &PrimitiveOp, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op: op.name(),
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn map<T: Real>(x: &[T], f: impl Fn(T) -> T) -> Vec<T> {
    x.iter().map(|&v| f(v)).collect()
}

fn zip<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Leading extents and channel count of a tensor viewed as `[rows, channels]`.
fn rows_channels(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap();
    (shape.iter().product::<usize>() / c, c)
}

/// Evaluates `op` and records a graph node when any input tracks gradients.
pub fn forward<T: Real>(op: &PrimitiveOp, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(Error::invalid(format!(
                "{} takes {n} inputs, got {}",
                op.name(),
                inputs.len()
            )));
        }
    } else if inputs.is_empty() {
        return Err(Error::invalid(format!(
            "{} needs at least one input",
            op.name()
        )));
    }

    let (shape, data) = eval(op, inputs)?;
    let tracked = inputs.iter().any(Tensor::requires_grad);
    let node = tracked.then(|| Node {
        op: op.clone(),
        parents: inputs.to_vec(),
    });
    Ok(Tensor::from_parts(shape, data.into(), tracked, node))
}

fn eval<T: Real>(op: &PrimitiveOp, inputs: &[Tensor<T>]) -> Result<(Vec<usize>, Vec<T>)> {
    let x = &inputs[0];
    let xs = x.shape();
    let xd = x.data();
    let out = match op {
        PrimitiveOp::Add | PrimitiveOp::Sub | PrimitiveOp::Mul => {
            let y = &inputs[1];
            if xs != y.shape() {
                return Err(shape_err(op, xs, y.shape()));
            }
            let data = match op {
                PrimitiveOp::Add => zip(xd, y.data(), |a, b| a + b),
                PrimitiveOp::Sub => zip(xd, y.data(), |a, b| a - b),
                _ => zip(xd, y.data(), |a, b| a * b),
            };
            (xs.to_vec(), data)
        }
        PrimitiveOp::MatMul => {
            let y = &inputs[1];
            let ys = y.shape();
            if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[0] {
                return Err(shape_err(op, xs, ys));
            }
            let (n, k, m) = (xs[0], xs[1], ys[1]);
            (vec![n, m], kernels::matmul(xd, y.data(), n, k, m))
        }
        PrimitiveOp::LeakyRelu { slope } => {
            let s = T::from_f64(*slope);
            (
                xs.to_vec(),
                map(xd, |v| if v > T::ZERO { v } else { s * v }),
            )
        }
        PrimitiveOp::Reshape { shape } => {
            if shape.is_empty()
                || shape.contains(&0)
                || shape.iter().product::<usize>() != x.numel()
            {
                return Err(shape_err(op, xs, shape));
            }
            (shape.clone(), xd.to_vec())
        }
        PrimitiveOp::ConcatChannel => {
            let lead = &xs[..xs.len() - 1];
            let mut total_c = 0;
            for t in inputs {
                let ts = t.shape();
                if ts.len() != xs.len() || &ts[..ts.len() - 1] != lead {
                    return Err(shape_err(op, xs, ts));
                }
                total_c += t.channels();
            }
            let rows = x.numel() / x.channels();
            let mut data = Vec::with_capacity(rows * total_c);
            for r in 0..rows {
                for t in inputs {
                    let c = t.channels();
                    data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total_c);
            (shape, data)
        }
        PrimitiveOp::SliceChannel { start, end } => {
            let (rows, c) = rows_channels(xs);
            if start >= end || *end > c {
                return Err(Error::Shape {
                    op: op.name(),
                    lhs: xs.to_vec(),
                    rhs: vec![*start, *end],
                });
            }
            let w = end - start;
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend_from_slice(&xd[r * c + start..r * c + end]);
            }
            let mut shape = xs.to_vec();
            *shape.last_mut().unwrap() = w;
            (shape, data)
        }
        PrimitiveOp::ReduceSum | PrimitiveOp::ReduceMean => {
            let s: f64 = xd.iter().map(|v| v.to_f64()).sum();
            let v = if matches!(op, PrimitiveOp::ReduceMean) {
                s / xd.len() as f64
            } else {
                s
            };
            (vec![1], vec![T::from_f64(v)])
        }
        PrimitiveOp::Square => (xs.to_vec(), map(xd, |v| v * v)),
        PrimitiveOp::Sqrt => (xs.to_vec(), map(xd, Real::sqrt)),
        PrimitiveOp::ScalarMul { factor } => {
            let f = T::from_f64(*factor);
            (xs.to_vec(), map(xd, |v| v * f))
        }
        PrimitiveOp::Tanh => (xs.to_vec(), map(xd, Real::tanh)),
        PrimitiveOp::Gather { indices, shape } => {
            if shape.is_empty()
                || shape.contains(&0)
                || shape.iter().product::<usize>() != indices.len()
            {
                return Err(shape_err(op, &[indices.len()], shape));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= xd.len()) {
                return Err(Error::invalid(format!(
                    "gather index {bad} out of range for {} elements",
                    xd.len()
                )));
            }
            (shape.clone(), indices.iter().map(|&i| xd[i]).collect())
        }
    };
    Ok(out)
}

/// Vector-Jacobian products for each parent. Entries are `None` for parents
/// that do not track gradients.
pub(crate) fn vjp<T: Real>(
    op: &PrimitiveOp,
    parents: &[Tensor<T>],
    output: &Tensor<T>,
    g: &[T],
) -> Vec<Option<Vec<T>>> {
    let want = |i: usize| parents[i].requires_grad();
    let x = &parents[0];
    let xd = x.data();
    match op {
        PrimitiveOp::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        PrimitiveOp::Sub => vec![want(0).then(|| g.to_vec()), want(1).then(|| map(g, |v| -v))],
        PrimitiveOp::Mul => {
            let yd = parents[1].data();
            vec![
                want(0).then(|| zip(g, yd, |a, b| a * b)),
                want(1).then(|| zip(g, xd, |a, b| a * b)),
            ]
        }
        PrimitiveOp::MatMul => {
            let y = &parents[1];
            let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            // dX = G * Y^T, dY = X^T * G
            let dx = want(0).then(|| {
                let yt = kernels::transpose(y.data(), k, m);
                kernels::matmul(g, &yt, n, m, k)
            });
            let dy = want(1).then(|| {
                let xt = kernels::transpose(xd, n, k);
                kernels::matmul(&xt, g, k, n, m)
            });
            vec![dx, dy]
        }
        PrimitiveOp::LeakyRelu { slope } => {
            let s = T::from_f64(*slope);
            // The kink at exactly zero takes the negative branch.
            vec![Some(zip(
                g,
                xd,
                |gv, v| if v > T::ZERO { gv } else { s * gv },
            ))]
        }
        PrimitiveOp::Reshape { .. } => vec![Some(g.to_vec())],
        PrimitiveOp::ConcatChannel => {
            let rows = output.numel() / output.channels();
            let total_c = output.channels();
            let mut offset = 0;
            parents
                .iter()
                .map(|p| {
                    let c = p.channels();
                    let part = p.requires_grad().then(|| {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let base = r * total_c + offset;
                            d.extend_from_slice(&g[base..base + c]);
                        }
                        d
                    });
                    offset += c;
                    part
                })
                .collect()
        }
        PrimitiveOp::SliceChannel { start, end } => {
            let (rows, c) = rows_channels(x.shape());
            let w = end - start;
            let mut d = vec![T::ZERO; x.numel()];
            for r in 0..rows {
                d[r * c + start..r * c + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![Some(d)]
        }
        PrimitiveOp::ReduceSum => vec![Some(vec![g[0]; x.numel()])],
        PrimitiveOp::ReduceMean => {
            let v = T::from_f64(g[0].to_f64() / x.numel() as f64);
            vec![Some(vec![v; x.numel()])]
        }
        PrimitiveOp::Square => {
            let two = T::from_f64(2.0);
            vec![Some(zip(g, xd, |gv, v| two * v * gv))]
        }
        PrimitiveOp::Sqrt => {
            let half = T::from_f64(0.5);
            vec![Some(zip(g, output.data(), |gv, y| half * gv / y))]
        }
        PrimitiveOp::ScalarMul { factor } => {
            let f = T::from_f64(*factor);
            vec![Some(map(g, |v| v * f))]
        }
        PrimitiveOp::Tanh => vec![Some(zip(g, output.data(), |gv, y| gv * (T::ONE - y * y)))],
        PrimitiveOp::Gather { indices, .. } => {
            let mut d = vec![T::ZERO; x.numel()];
            for (&i, &gv) in indices.iter().zip(g) {
                d[i] += gv;
            }
            vec![Some(d)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let out = t(&[2], &[1.0, 2.0]).add(&t(&[2], &[3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let eye = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let a = t(&[3, 3], &[1.5, -2., 3., 4., 5.25, 6., -7., 8., 9.]);
        let out = eye.matmul(&a).unwrap();
        assert!(out.bit_eq(&a));
    }

    #[test]
    fn leaky_relu_piecewise() {
        let out = t(&[2], &[-1.0, 2.0]).leaky_relu().unwrap();
        assert!((out.data()[0] - (-0.2)).abs() < 1e-7);
        assert_eq!(out.data()[1], 2.0);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let err = t(&[2], &[1., 2.]).add(&t(&[3], &[1., 2., 3.])).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("add") && msg.contains("[2]") && msg.contains("[3]"),
            "{msg}"
        );

        let err = t(&[2, 3], &[0.; 6])
            .matmul(&t(&[2, 3], &[0.; 6]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn concat_and_slice_channels() {
        let a = t(&[2, 1], &[1., 2.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        let c = Tensor::concat_channels(&[a, b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1., 3., 4., 2., 5., 6.]);
        let s = c.slice_channels(1, 3).unwrap();
        assert_eq!(s.data(), &[3., 4., 5., 6.]);
        assert!(c.slice_channels(2, 2).is_err());
        assert!(c.slice_channels(0, 4).is_err());
    }

    #[test]
    fn untracked_inputs_record_no_node() {
        let out = t(&[1], &[1.0]).square().unwrap();
        assert!(out.op().is_none());
        let p = Tensor::<f32>::param(&[1], vec![1.0]).unwrap();
        assert_eq!(p.square().unwrap().op(), Some(&PrimitiveOp::Square));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let a = t(
            &[4, 3],
            &[
                0.1, -0.7, 0.3, 1.1, 2.2, -3.3, 0.01, 0.5, 0.9, -0.2, 0.0, 4.0,
            ],
        );
        let b = t(&[3, 2], &[0.3, -0.1, 0.7, 0.2, -0.5, 0.8]);
        let r1 = a.matmul(&b).unwrap().leaky_relu().unwrap().tanh().unwrap();
        let r2 = a.matmul(&b).unwrap().leaky_relu().unwrap().tanh().unwrap();
        assert!(r1.bit_eq(&r2));
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let x = t(&[2], &[1., 2.]);
        assert!(x.gather(vec![0, 2].into(), &[2]).is_err());
        let y = x.gather(vec![1, 1, 0].into(), &[3]).unwrap();
        assert_eq!(y.data(), &[2., 2., 1.]);
    }
}
