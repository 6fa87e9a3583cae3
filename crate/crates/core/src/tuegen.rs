//! Box-conditioned noise generator and the temporal contrastive loss.
//!
//! The generator is a small patch transformer: patchify, fixed sin-cos
//! positions, blocks modulated (shift/scale/gate, zero-initialised) by an
//! embedding of the four normalised box coordinates, then a zero-initialised
//! projection back to pixels. The raw field `r` is bounded as `σ·tanh(r)`.

use std::path::Path;

use numcore::{load_checkpoint, save_checkpoint, Graph, ParamSet, ParamVars, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{crop_exact, normalize_bbox, paste_var, BBox, Budget, Image, NormBBox, PasteRegion};
use crate::nn;
use crate::tracker::{PairSample, TrackerParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub input: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cond_width: usize,
    pub sigma: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            input: 32,
            patch: 4,
            width: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 1,
            cond_width: 16,
            sigma: Budget::default().sigma,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        Budget::new(self.sigma)?;
        if self.patch == 0 || !self.input.is_multiple_of(self.patch) {
            return Err(invalid(format!("patch {} must divide input {}", self.patch, self.input)));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) || !self.width.is_multiple_of(4) {
            return Err(invalid(format!("width {} must split into {} heads and 4 sin-cos bands", self.width, self.heads)));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.cond_width == 0 {
            return Err(invalid("depth, mlp_ratio and cond_width must be ≥ 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input / self.patch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub cfg: GeneratorConfig,
    pub params: ParamSet<f32>,
}

/// Bound on the raw field before `tanh`; keeps `tanh` strictly below one in
/// single precision so the output never reaches `σ`.
const RAW_LIMIT: f64 = 8.0;

pub fn init_generator(cfg: &GeneratorConfig, seed: u64) -> Result<GeneratorParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let (w, cw) = (cfg.width, cfg.cond_width);
    nn::add_conv(&mut p, &mut rng, "embed", 3, w, cfg.patch, 1.0);
    nn::add_linear(&mut p, &mut rng, "cond", 4, cw, 2f64.sqrt());
    for b in 0..cfg.depth {
        nn::add_zero_linear(&mut p, &format!("block{b}.ada"), cw, 6 * w);
        nn::add_linear(&mut p, &mut rng, &format!("block{b}.attn.qkv"), w, 3 * w, 1.0);
        nn::add_linear(&mut p, &mut rng, &format!("block{b}.attn.out"), w, w, 1.0);
        nn::add_linear(&mut p, &mut rng, &format!("block{b}.mlp.fc1"), w, w * cfg.mlp_ratio, 2f64.sqrt());
        nn::add_linear(&mut p, &mut rng, &format!("block{b}.mlp.fc2"), w * cfg.mlp_ratio, w, 1.0);
    }
    nn::add_zero_linear(&mut p, "final.ada", cw, 2 * w);
    nn::add_zero_linear(&mut p, "final.proj", w, cfg.patch * cfg.patch * 3);
    Ok(GeneratorParams { cfg: cfg.clone(), params: p })
}

/// Fixed 2-D sin-cos embedding `[g·g, width]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sincos_positions(grid: usize, width: usize) -> Tensor<f32> {
    let quarter = width / 4;
    let mut d = Vec::with_capacity(grid * grid * width);
    for y in 0..grid {
        for x in 0..grid {
            for pos in [y, x] {
                for k in 0..quarter {
                    let freq = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    d.push((pos as f64 * freq).sin() as f32);
                }
                for k in 0..quarter {
                    let freq = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    d.push((pos as f64 * freq).cos() as f32);
                }
            }
        }
    }
    Tensor::new(&[grid * grid, width], d).expect("shape and data agree")
}

fn modulate(g: &mut Graph<f32>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s = g.add_scalar(scale, 1.0);
    let y = g.mul(x, s)?;
    Ok(g.add(y, shift)?)
}

impl GeneratorParams {
    /// Raw-field-bounded perturbation for patches `N×3×S×S` and normalised
    /// boxes `N×4`.
    pub fn forward(&self, g: &mut Graph<f32>, v: &ParamVars, x: Var, cond: Var) -> Result<Var> {
        let c = &self.cfg;
        let (sx, sc) = (g.shape(x).to_vec(), g.shape(cond).to_vec());
        if sx.len() != 4 || sx[1..] != [3, c.input, c.input] {
            return Err(invalid(format!("generator expects N×3×{0}×{0} patches, got {sx:?}", c.input)));
        }
        if sc != [sx[0], 4] {
            return Err(invalid(format!("condition shape {sc:?} for {} patches", sx[0])));
        }
        if g.value(cond).data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("normalised box outside [0,1]"));
        }
        let (n, w, gs, p) = (sx[0], c.width, c.grid(), c.patch);
        let t = gs * gs;
        let x0 = g.add_scalar(x, -0.5);
        let h = nn::conv(g, v, "embed", x0, p)?;
        let h = nn::to_tokens(g, h)?;
        let pos = g.constant(sincos_positions(gs, w));
        let pos = nn::repeat_batch(g, pos, n)?;
        let mut h = g.add(h, pos)?;

        let e = nn::linear(g, v, "cond", cond)?;
        let e = g.silu(e)?;
        for b in 0..c.depth {
            let m = nn::linear(g, v, &format!("block{b}.ada"), e)?;
            let mut mods = Vec::with_capacity(6);
            for k in 0..6 {
                let part = g.slice(m, 1, k * w, w)?;
                mods.push(nn::repeat_tokens(g, part, t)?);
            }
            let a = g.layer_norm(h, 1e-6)?;
            let a = modulate(g, a, mods[0], mods[1])?;
            let a = nn::self_attention(g, v, &format!("block{b}.attn"), a, c.heads)?;
            let a = g.mul(a, mods[2])?;
            h = g.add(h, a)?;
            let f = g.layer_norm(h, 1e-6)?;
            let f = modulate(g, f, mods[3], mods[4])?;
            let f = nn::mlp(g, v, &format!("block{b}.mlp"), f)?;
            let f = g.mul(f, mods[5])?;
            h = g.add(h, f)?;
        }
        let m = nn::linear(g, v, "final.ada", e)?;
        let shift = g.slice(m, 1, 0, w)?;
        let shift = nn::repeat_tokens(g, shift, t)?;
        let scale = g.slice(m, 1, w, w)?;
        let scale = nn::repeat_tokens(g, scale, t)?;
        let h = g.layer_norm(h, 1e-6)?;
        let h = modulate(g, h, shift, scale)?;
        let r = nn::linear(g, v, "final.proj", h)?;
        // tokens → pixels: [N, gy, gx, py, px, 3] → [N, 3, gy, py, gx, px]
        let r = g.reshape(r, &[n, gs, gs, p, p, 3])?;
        let r = g.permute(r, &[0, 5, 1, 3, 2, 4])?;
        let r = g.reshape(r, &[n, 3, c.input, c.input])?;
        let r = g.clamp(r, -RAW_LIMIT, RAW_LIMIT);
        let d = g.tanh(r);
        Ok(g.scale(d, c.sigma))
    }

    /// Inference on a batch of patches with their normalised boxes.
    pub fn generate(&self, patches: &Tensor<f32>, conds: &[NormBBox]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let v = self.params.bind_frozen(&mut g);
        let x = g.constant(patches.clone());
        let c = g.constant(cond_tensor(conds)?);
        let d = self.forward(&mut g, &v, x, c)?;
        Ok(g.value(d).clone())
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "generator", "config": self.cfg, "sigma": self.cfg.sigma })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.params, self.meta())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint(dir)?;
        if meta.extra.get("kind").and_then(|k| k.as_str()) != Some("generator") {
            return Err(Error::Manifest {
                path: dir.join("meta.json"),
                msg: "not a generator checkpoint".into(),
            });
        }
        let cfg: GeneratorConfig = serde_json::from_value(meta.extra["config"].clone())?;
        let reference = init_generator(&cfg, 0)?;
        let same = reference.params.names().eq(params.names())
            && reference.params.iter().zip(params.iter()).all(|((_, a), (_, b))| a.shape() == b.shape());
        if !same {
            return Err(Error::Manifest {
                path: dir.join("meta.json"),
                msg: "parameter layout does not match the generator config".into(),
            });
        }
        Ok(Self { cfg, params })
    }
}

/// `N×4` tensor of normalised boxes; every box must lie in `[0,1]`.
pub fn cond_tensor(conds: &[NormBBox]) -> Result<Tensor<f32>> {
    if conds.iter().any(|c| !c.is_valid()) {
        return Err(invalid("normalised box outside [0,1]"));
    }
    let d: Vec<f64> = conds.iter().flat_map(|c| c.to_array()).collect();
    Ok(Tensor::from_f64(&[conds.len(), 4], &d)?)
}

/// Perturbed triple for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TuePair {
    pub z_hat: Image,
    pub x_hat: Image,
    pub e_hat: Image,
}

/// `ẑ = clamp(z + G(z, b̃_i))`, `e = crop(x, b_j)`, `ê = clamp(e + G(e, b̃_j))`
/// and `x̂ = paste(x, resize(G(e, b̃_j)), b_j)` where `b_j` is given in
/// search-patch pixels and `b̃_i`, `b̃_j` are frame-normalised.
pub fn make_tue_pair(gen: &GeneratorParams, z: &Image, x: &Image, b_i: &NormBBox, b_j: &BBox, b_j_norm: &NormBBox) -> Result<TuePair> {
    let mut g = Graph::new();
    let v = gen.params.bind_frozen(&mut g);
    let e = crop_exact(x, b_j, gen.cfg.input)?;
    let zs = g.constant(Tensor::stack(std::slice::from_ref(z))?);
    let xs = g.constant(Tensor::stack(std::slice::from_ref(x))?);
    let es = g.constant(Tensor::stack(&[e])?);
    let out = tue_batch(&mut g, gen, &v, zs, xs, es, &[*b_i], &[*b_j], &[*b_j_norm])?;
    let take = |t: &Tensor<f32>| t.index0(0);
    Ok(TuePair {
        z_hat: take(g.value(out.z_hat)),
        x_hat: take(g.value(out.x_hat)),
        e_hat: take(g.value(out.e_hat)),
    })
}

/// Graph nodes of a perturbed batch.
#[derive(Clone, Copy, Debug)]
pub struct TueVars {
    pub z_hat: Var,
    pub x_hat: Var,
    pub e_hat: Var,
}

/// Batched [`make_tue_pair`] inside an existing graph, differentiable with
/// respect to the generator. `z`, `x`, `e` are `N×3×·×·` batches.
#[allow(clippy::too_many_arguments)]
pub fn tue_batch(
    g: &mut Graph<f32>,
    gen: &GeneratorParams,
    v: &ParamVars,
    z: Var,
    x: Var,
    e: Var,
    b_i: &[NormBBox],
    b_j: &[BBox],
    b_j_norm: &[NormBBox],
) -> Result<TueVars> {
    let n = b_i.len();
    if b_j.len() != n || b_j_norm.len() != n || g.shape(z)[0] != n || g.shape(x)[0] != n || g.shape(e)[0] != n {
        return Err(invalid("batch sizes of patches and boxes differ"));
    }
    for b in b_j {
        b.validate()?;
    }
    let both = g.concat(&[z, e], 0)?;
    let conds: Vec<NormBBox> = b_i.iter().chain(b_j_norm).copied().collect();
    let c = g.constant(cond_tensor(&conds)?);
    let d = gen.forward(g, v, both, c)?;
    let dz = g.slice(d, 0, 0, n)?;
    let de = g.slice(d, 0, n, n)?;
    let z_hat = g.add(z, dz)?;
    let z_hat = g.clamp(z_hat, 0.0, 1.0);
    let e_hat = g.add(e, de)?;
    let e_hat = g.clamp(e_hat, 0.0, 1.0);
    let mut xs = Vec::with_capacity(n);
    for (k, b) in b_j.iter().enumerate() {
        let r = PasteRegion::of(b);
        let dk = g.slice(de, 0, k, 1)?;
        let tile = g.resize_bilinear(dk, r.h, r.w)?;
        let xk = g.slice(x, 0, k, 1)?;
        xs.push(paste_var(g, xk, tile, r.x0, r.y0)?);
    }
    let x_hat = g.concat(&xs, 0)?;
    Ok(TueVars { z_hat, x_hat, e_hat })
}

/// Clean target crops `e = crop(x, b_j)` and normalised boxes for a batch of
/// training pairs.
pub fn pair_conditions(
    pairs: &[PairSample],
    videos: &[crate::synthvideo::VideoRecord],
    frame_size: usize,
    input: usize,
) -> Result<(Tensor<f32>, Vec<NormBBox>, Vec<NormBBox>)> {
    let mut es = Vec::with_capacity(pairs.len());
    let (mut ni, mut nj) = (Vec::new(), Vec::new());
    for p in pairs {
        es.push(crop_exact(&p.x, &p.x_box, input)?);
        let v = &videos[p.video];
        ni.push(normalize_bbox(&v.boxes[p.i], frame_size, frame_size)?);
        nj.push(normalize_bbox(&v.boxes[p.j], frame_size, frame_size)?);
    }
    Ok((Tensor::stack(&es)?, ni, nj))
}

pub const TCL_TAU: f64 = 0.2;

/// InfoNCE over cosine similarities. `anchors`/`positives` are `[N, C]`,
/// `negatives` is `[M, C]`, and `mask[n, m] = 1` admits negative `m` for
/// anchor `n`. Inputs are ℓ2-normalised here.
pub fn info_nce(g: &mut Graph<f32>, anchors: Var, positives: Var, negatives: Var, mask: &Tensor<f32>, tau: f64) -> Result<Var> {
    let (n, c) = (g.shape(anchors)[0], g.shape(anchors)[1]);
    let m = g.shape(negatives)[0];
    if g.shape(positives) != [n, c] || g.shape(negatives)[1] != c || mask.shape() != [n, m] {
        return Err(invalid("info_nce: inconsistent shapes"));
    }
    for row in mask.data().chunks(m) {
        if row.iter().filter(|&&v| v > 0.5).count() < 2 {
            return Err(invalid("every exemplar needs at least two negatives"));
        }
    }
    if !(tau > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    let a = nn::l2_normalize(g, anchors)?;
    let p = nn::l2_normalize(g, positives)?;
    let q = nn::l2_normalize(g, negatives)?;
    let ones_c = g.constant(Tensor::ones(&[c, 1]));
    let ap = g.mul(a, p)?;
    let sp = g.matmul(ap, ones_c)?;
    let sp = g.scale(sp, 1.0 / tau);
    let sn = g.matmul_ex(a, q, false, true, None)?;
    let sn = g.scale(sn, 1.0 / tau);
    let en = g.exp(sn);
    let mk = g.constant(mask.clone());
    let en = g.mul(en, mk)?;
    let ones_m = g.constant(Tensor::ones(&[m, 1]));
    let neg = g.matmul(en, ones_m)?;
    let ep = g.exp(sp);
    let denom = g.add(ep, neg)?;
    let ld = g.log(denom);
    let per = g.sub(ld, sp)?;
    Ok(g.mean(per))
}

/// Temporal contrastive loss on backbone features: anchor `f(ẑ)`, positive
/// `f(ê)`, negatives the clean `z`, `e` of the same pair and the clean crops
/// of pairs from other videos.
#[allow(clippy::too_many_arguments)]
pub fn tcl_loss(
    g: &mut Graph<f32>,
    tp: &TrackerParams,
    tv: &ParamVars,
    z_hat: Var,
    e_hat: Var,
    z: Var,
    e: Var,
    videos: &[usize],
    tau: f64,
) -> Result<Var> {
    let n = videos.len();
    let feat = |g: &mut Graph<f32>, x: Var| -> Result<Var> {
        let f = tp.features(g, tv, x)?;
        Ok(g.global_avg_pool(f)?)
    };
    let fa = feat(g, z_hat)?;
    let fp = feat(g, e_hat)?;
    let clean = g.concat(&[z, e], 0)?;
    let fneg = feat(g, clean)?;
    let mut mask = vec![0.0f32; n * 2 * n];
    for a in 0..n {
        for (b, &vb) in videos.iter().enumerate() {
            let ok = b == a || vb != videos[a];
            if ok {
                mask[a * 2 * n + b] = 1.0;
                mask[a * 2 * n + n + b] = 1.0;
            }
        }
    }
    let mask = Tensor::new(&[n, 2 * n], mask)?;
    info_nce(g, fa, fp, fneg, &mask, tau)
}
