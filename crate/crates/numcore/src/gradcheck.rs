//! Central finite-difference gradient oracle and a per-op check suite.
//!
//! This path only ever evaluates forward values; it never touches the
//! backward rules it is used to verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;

/// Builds a scalar loss from the given inputs (in order).
pub type LossFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn forward(inputs: &[Tensor<f64>], f: &LossFn) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Largest per-input relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-12)`
/// between reverse-mode gradients `a` and central differences `n`.
pub fn max_relative_error(inputs: &[Tensor<f64>], f: &LossFn) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[idx]);
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[j] -= FD_STEP;
            *slot = (forward(&plus, f)? - forward(&minus, f)?) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-12));
    }
    Ok(worst)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive shape")
}

/// Contracts `y` against a fixed random weight so every output element
/// carries a distinct sensitivity.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random_tensor(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Result of checking one op on one random shape.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub shape: String,
    pub rel_err: f64,
}

struct Case {
    op: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: Box<LossFn<'static>>,
}

fn case(op: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        op,
        inputs,
        f: Box::new(f),
    }
}

/// Every differentiable op on `shapes_per_op` random shapes, plus a random
/// three-layer convolution stack.
pub fn standard_suite(seed: u64, shapes_per_op: usize) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for s in 0..shapes_per_op as u64 {
        let d = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi);
        let shape = vec![d(&mut rng, 1, 3), d(&mut rng, 2, 4), d(&mut rng, 2, 5)];
        let r = |rng: &mut ChaCha8Rng, sh: &[usize]| random_tensor(rng, sh, -1.0, 1.0);
        let a = r(&mut rng, &shape);
        let b = r(&mut rng, &shape);
        let sc = r(&mut rng, &[1]);
        cases.push(case("add", vec![a.clone(), b.clone()], move |g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, s)
        }));
        cases.push(case("sub", vec![a.clone(), b.clone()], move |g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted_sum(g, y, s)
        }));
        cases.push(case("mul", vec![a.clone(), b.clone()], move |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, s)
        }));
        cases.push(case("mul_scalar_broadcast", vec![a.clone(), sc.clone()], move |g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, s)
        }));
        cases.push(case("neg", vec![a.clone()], move |g, v| {
            let y = g.neg(v[0]);
            weighted_sum(g, y, s)
        }));
        cases.push(case("scale", vec![a.clone()], move |g, v| {
            let y = g.scale(v[0], -1.7);
            weighted_sum(g, y, s)
        }));
        cases.push(case("add_scalar", vec![a.clone()], move |g, v| {
            let y = g.add_scalar(v[0], 0.3);
            weighted_sum(g, y, s)
        }));
        cases.push(case("tanh", vec![a.clone()], move |g, v| {
            let y = g.tanh(v[0]);
            weighted_sum(g, y, s)
        }));
        cases.push(case("sigmoid", vec![a.clone()], move |g, v| {
            let y = g.sigmoid(v[0]);
            weighted_sum(g, y, s)
        }));
        cases.push(case("exp", vec![a.clone()], move |g, v| {
            let y = g.exp(v[0]);
            weighted_sum(g, y, s)
        }));
        cases.push(case("log", vec![random_tensor(&mut rng, &shape, 0.2, 2.0)], move |g, v| {
            let y = g.log(v[0]);
            weighted_sum(g, y, s)
        }));
        cases.push(case("clamp", vec![a.clone()], move |g, v| {
            // FD probes stay clear of the kinks as long as no value sits
            // within FD_STEP of ±0.95
            let y = g.clamp(v[0], -0.95, 0.95);
            weighted_sum(g, y, s)
        }));
        cases.push(case("sum", vec![a.clone()], move |g, v| {
            let t = g.tanh(v[0]);
            let y = g.sum(t);
            let y2 = g.mul(y, y)?;
            Ok(y2)
        }));
        cases.push(case("mean", vec![a.clone()], move |g, v| {
            let t = g.tanh(v[0]);
            let y = g.mean(t);
            let y2 = g.mul(y, y)?;
            Ok(y2)
        }));

        let (m, k, n) = (d(&mut rng, 1, 5), d(&mut rng, 1, 5), d(&mut rng, 1, 5));
        let ta = s % 2 == 1;
        let tb = s % 3 == 1;
        let sa = if ta { [k, m] } else { [m, k] };
        let sb = if tb { [n, k] } else { [k, n] };
        let bias = r(&mut rng, &[n]);
        cases.push(case(
            "matmul",
            vec![r(&mut rng, &sa), r(&mut rng, &sb), bias],
            move |g, v| {
                let y = g.matmul_ex(v[0], v[1], ta, tb, Some(v[2]))?;
                weighted_sum(g, y, s)
            },
        ));
        let bt = d(&mut rng, 1, 3);
        cases.push(case(
            "batched_matmul",
            vec![r(&mut rng, &[bt, sa[0], sa[1]]), r(&mut rng, &[bt, sb[0], sb[1]])],
            move |g, v| {
                let y = g.matmul_ex(v[0], v[1], ta, tb, None)?;
                weighted_sum(g, y, s)
            },
        ));

        let (nb, c, o) = (d(&mut rng, 1, 2), d(&mut rng, 1, 3), d(&mut rng, 1, 3));
        let kk = d(&mut rng, 1, 3);
        let stride = d(&mut rng, 1, 2);
        let pad = (s % 2) as usize;
        let hw = d(&mut rng, kk + 1, 7);
        cases.push(case(
            "conv2d",
            vec![r(&mut rng, &[nb, c, hw, hw + 1]), r(&mut rng, &[o, c, kk, kk]), r(&mut rng, &[o])],
            move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                weighted_sum(g, y, s)
            },
        ));
        let (hz, hx) = (d(&mut rng, 1, 3), d(&mut rng, 3, 6));
        cases.push(case(
            "cross_correlate",
            vec![r(&mut rng, &[nb, c, hz, hz]), r(&mut rng, &[nb, c, hx, hx + 1])],
            move |g, v| {
                let y = g.cross_correlate(v[0], v[1])?;
                weighted_sum(g, y, s)
            },
        ));
        let (ih, iw, oh, ow) = (d(&mut rng, 1, 4), d(&mut rng, 2, 5), d(&mut rng, 1, 7), d(&mut rng, 1, 7));
        cases.push(case("resize_bilinear", vec![r(&mut rng, &[nb, c, ih, iw])], move |g, v| {
            let y = g.resize_bilinear(v[0], oh, ow)?;
            weighted_sum(g, y, s)
        }));
        cases.push(case("global_avg_pool", vec![r(&mut rng, &[nb, c, ih, iw])], move |g, v| {
            let y = g.global_avg_pool(v[0])?;
            weighted_sum(g, y, s)
        }));
        cases.push(case("softmax", vec![a.clone()], move |g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y, s)
        }));
        cases.push(case("layer_norm", vec![a.clone()], move |g, v| {
            let y = g.layer_norm(v[0], 1e-5)?;
            weighted_sum(g, y, s)
        }));
        let axis = (s as usize) % 3;
        let mut shape2 = shape.clone();
        shape2[axis] = d(&mut rng, 1, 3);
        cases.push(case("concat", vec![a.clone(), r(&mut rng, &shape2)], move |g, v| {
            let y = g.concat(&[v[0], v[1]], axis)?;
            weighted_sum(g, y, s)
        }));
        let len = d(&mut rng, 1, shape[axis]);
        let start = rng.gen_range(0..=shape[axis] - len);
        cases.push(case("slice", vec![a.clone()], move |g, v| {
            let y = g.slice(v[0], axis, start, len)?;
            weighted_sum(g, y, s)
        }));
        let total: usize = shape.iter().product();
        cases.push(case("reshape", vec![a.clone()], move |g, v| {
            let y = g.reshape(v[0], &[total])?;
            let y = g.tanh(y);
            weighted_sum(g, y, s)
        }));
        let perm = [[2, 0, 1], [1, 2, 0], [0, 2, 1], [2, 1, 0], [1, 0, 2]][s as usize % 5];
        cases.push(case("permute", vec![a.clone()], move |g, v| {
            let y = g.permute(v[0], &perm)?;
            weighted_sum(g, y, s)
        }));
        let pads = (d(&mut rng, 0, 2), d(&mut rng, 0, 2), d(&mut rng, 0, 2), d(&mut rng, 0, 2));
        cases.push(case("pad2d", vec![a.clone()], move |g, v| {
            let y = g.pad2d(v[0], pads.0, pads.1, pads.2, pads.3)?;
            weighted_sum(g, y, s)
        }));

        // three stacked convolutions with nonlinearities
        let c1 = d(&mut rng, 2, 3);
        cases.push(case(
            "conv_stack",
            vec![
                r(&mut rng, &[1, 3, 11, 11]),
                r(&mut rng, &[c1, 3, 3, 3]),
                r(&mut rng, &[c1, c1, 3, 3]),
                r(&mut rng, &[2, c1, 2, 2]),
            ],
            move |g, v| {
                let h = g.conv2d(v[0], v[1], None, 2, 0)?;
                let h = g.tanh(h);
                let h = g.conv2d(h, v[2], None, 1, 1)?;
                let h = g.sigmoid(h);
                let y = g.conv2d(h, v[3], None, 1, 0)?;
                weighted_sum(g, y, s)
            },
        ));
    }
    cases
        .into_iter()
        .map(|c| {
            let shape = c.inputs.iter().map(|t| format!("{:?}", t.shape())).collect::<Vec<_>>().join(",");
            Ok(OpCheck {
                op: c.op,
                shape,
                rel_err: max_relative_error(&c.inputs, c.f.as_ref())?,
            })
        })
        .collect()
}
