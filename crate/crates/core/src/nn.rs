//! Small layer helpers shared by the trackers and the generator.

use numcore::{Graph, ParamSet, ParamVars, Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let d = (0..n).map(|_| rng.gen_range(-bound..=bound) as f32).collect();
    Tensor::new(shape, d).expect("shape and data agree")
}

/// Weight drawn uniformly in `±gain·sqrt(3/fan_in)`, bias zero.
pub(crate) fn add_linear(p: &mut ParamSet<f32>, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    p.insert(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], bound));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn add_zero_linear(p: &mut ParamSet<f32>, name: &str, fan_in: usize, fan_out: usize) {
    p.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn add_conv(p: &mut ParamSet<f32>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, k: usize, gain: f64) {
    let fan_in = cin * k * k;
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    p.insert(format!("{name}.w"), uniform(rng, &[cout, cin, k, k], bound));
    p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

pub(crate) fn conv(g: &mut Graph<f32>, v: &ParamVars, name: &str, x: Var, stride: usize) -> Result<Var> {
    let (w, b) = (v.get(&format!("{name}.w"))?, v.get(&format!("{name}.b"))?);
    Ok(g.conv2d(x, w, Some(b), stride, 0)?)
}

/// Applies a `[din, dout]` linear map to the last axis of `x`.
pub(crate) fn linear(g: &mut Graph<f32>, v: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let (w, b) = (v.get(&format!("{name}.w"))?, v.get(&format!("{name}.b"))?);
    let s = g.shape(x).to_vec();
    let din = *s.last().expect("non-empty shape");
    let dout = g.shape(w)[1];
    let rows = s.iter().product::<usize>() / din;
    let x2 = g.reshape(x, &[rows, din])?;
    let y = g.matmul_ex(x2, w, false, false, Some(b))?;
    let mut out = s;
    *out.last_mut().expect("non-empty shape") = dout;
    Ok(g.reshape(y, &out)?)
}

/// `[N, D] → [N, T, D]` by multiplying with a ones column.
pub(crate) fn repeat_tokens(g: &mut Graph<f32>, m: Var, t: usize) -> Result<Var> {
    let (n, d) = (g.shape(m)[0], g.shape(m)[1]);
    let ones = g.constant(Tensor::ones(&[n, t, 1]));
    let m3 = g.reshape(m, &[n, 1, d])?;
    Ok(g.matmul(ones, m3)?)
}

/// `[T, D] → [N, T, D]`.
pub(crate) fn repeat_batch(g: &mut Graph<f32>, x: Var, n: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x3 = g.reshape(x, &[1, s[0], s[1]])?;
    if n == 1 {
        return Ok(x3);
    }
    Ok(g.concat(&vec![x3; n], 0)?)
}

/// Multi-head self-attention over `x: [N, T, D]` with fused `qkv` and `out`
/// projections named `{name}.qkv` and `{name}.out`.
pub(crate) fn self_attention(g: &mut Graph<f32>, v: &ParamVars, name: &str, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, t, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let qkv = linear(g, v, &format!("{name}.qkv"), x)?;
    let qkv = g.reshape(qkv, &[n, t, 3, heads, dh])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, &[3, n * heads, t, dh])?;
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let p = g.slice(qkv, 0, i, 1)?;
        parts.push(g.reshape(p, &[n * heads, t, dh])?);
    }
    let scores = g.matmul_ex(parts[0], parts[1], false, true, None)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let att = g.softmax(scores)?;
    let o = g.matmul(att, parts[2])?;
    let o = g.reshape(o, &[n, heads, t, dh])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[n, t, d])?;
    linear(g, v, &format!("{name}.out"), o)
}

pub(crate) fn mlp(g: &mut Graph<f32>, v: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, v, &format!("{name}.fc1"), x)?;
    let h = g.silu(h)?;
    linear(g, v, &format!("{name}.fc2"), h)
}

/// `N×C×H×W → N×(H·W)×C`.
pub(crate) fn to_tokens(g: &mut Graph<f32>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let x = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    Ok(g.permute(x, &[0, 2, 1])?)
}

/// Row-wise ℓ2 normalisation of `[N, D]`, via `x·exp(−½·log(Σx² + ε))`.
pub(crate) fn l2_normalize(g: &mut Graph<f32>, x: Var) -> Result<Var> {
    let (n, d) = (g.shape(x)[0], g.shape(x)[1]);
    let sq = g.mul(x, x)?;
    let ones = g.constant(Tensor::ones(&[d, 1]));
    let ss = g.matmul(sq, ones)?;
    let ss = g.add_scalar(ss, 1e-12);
    let ls = g.log(ss);
    let inv = g.scale(ls, -0.5);
    let inv = g.exp(inv);
    let row = g.constant(Tensor::ones(&[1, d]));
    let inv = g.matmul(inv, row)?;
    debug_assert_eq!(g.shape(inv), [n, d]);
    Ok(g.mul(x, inv)?)
}

/// [`numcore::eval_and_grad`] for closures returning this crate's errors.
pub(crate) fn value_and_grad<F>(wrt: &ParamSet<f32>, expr: F) -> Result<(f32, numcore::Grads<f32>)>
where
    F: FnOnce(&mut Graph<f32>, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = wrt.bind(&mut g);
    let loss = expr(&mut g, &vars)?;
    let gr = g.backward(loss)?;
    let grads = vars.iter().map(|(k, v)| (k.to_string(), gr.get(v))).collect();
    Ok((g.value(loss).item(), grads))
}
