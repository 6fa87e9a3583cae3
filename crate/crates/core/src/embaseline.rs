//! Error-minimising noise baseline: one fixed target tile (and optionally a
//! context tile) per video, optimised by PGD against a tracker that is itself
//! trained on the noisy data.

use std::path::Path;
use std::time::Instant;

use numcore::{checkpoint_bytes, load_checkpoint, save_checkpoint, Graph, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{context_side, paste_var, BBox, Budget, Image, PasteRegion};
use crate::pipeline::quantize_image;
use crate::synthvideo::{sample_pair, Dataset, Provenance, VideoRecord};
use crate::tracker::{
    balanced_pos_weight, batch_labels, bce_loss, epoch_order, init_tracker, make_pair, sample_pairs, tracker_step, Arch,
    PairConfig, PairSample, TrackerParams,
};

pub const TILE_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseTile {
    pub delta_t: Tensor<f32>,
    /// Stays zero unless the context variant is enabled.
    pub delta_c: Tensor<f32>,
    pub budget: Budget,
}

impl NoiseTile {
    pub fn zeros(budget: Budget) -> Self {
        Self {
            delta_t: Tensor::zeros(&[3, TILE_SIZE, TILE_SIZE]),
            delta_c: Tensor::zeros(&[3, TILE_SIZE, TILE_SIZE]),
            budget,
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.delta_t
            .data()
            .iter()
            .chain(self.delta_c.data())
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// `clip(delta − alpha·sign(grad), −σ, σ)`.
pub fn pgd_step(delta: &Tensor<f32>, grad: &Tensor<f32>, alpha: f64, budget: Budget) -> Result<Tensor<f32>> {
    if delta.shape() != grad.shape() {
        return Err(invalid(format!("delta {:?} vs grad {:?}", delta.shape(), grad.shape())));
    }
    if grad.data().iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite gradient in PGD step"));
    }
    let s = budget.sigma as f32;
    let a = alpha as f32;
    let d = delta
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&d, &g)| {
            let step = if g > 0.0 {
                a
            } else if g < 0.0 {
                -a
            } else {
                0.0
            };
            (d - step).clamp(-s, s)
        })
        .collect();
    Ok(Tensor::new(delta.shape(), d)?)
}

/// Square context region of `b`, rounded to whole pixels.
fn context_region(b: &BBox, factor: f64) -> PasteRegion {
    let side = context_side(b, factor);
    let (cx, cy) = b.center();
    let n = (side.round() as i64).max(1) as usize;
    PasteRegion {
        x0: (cx - side / 2.0).round() as i64,
        y0: (cy - side / 2.0).round() as i64,
        w: n,
        h: n,
    }
}

/// Adds the tiles to one `[1,3,H,W]` image: `delta_t` stretched over the box,
/// `delta_c` stretched over the context square with the box cut out.
fn apply_tiles(g: &mut Graph<f32>, img: Var, dt: Var, dc: Option<Var>, b: &BBox, context: f64) -> Result<Var> {
    let mut out = img;
    let r = PasteRegion::of(b);
    if let Some(dc) = dc {
        let c = context_region(b, context);
        let mut mask = vec![1.0f32; 3 * c.h * c.w];
        for ch in 0..3 {
            for y in 0..c.h {
                for x in 0..c.w {
                    let (fx, fy) = (c.x0 + x as i64, c.y0 + y as i64);
                    if fx >= r.x0 && fx < r.x0 + r.w as i64 && fy >= r.y0 && fy < r.y0 + r.h as i64 {
                        mask[(ch * c.h + y) * c.w + x] = 0.0;
                    }
                }
            }
        }
        let tile = g.resize_bilinear(dc, c.h, c.w)?;
        let m = g.constant(Tensor::new(&[1, 3, c.h, c.w], mask)?);
        let tile = g.mul(tile, m)?;
        out = paste_var(g, out, tile, c.x0, c.y0)?;
    }
    let tile = g.resize_bilinear(dt, r.h, r.w)?;
    paste_var(g, out, tile, r.x0, r.y0)
}

fn tile_vars(g: &mut Graph<f32>, t: &NoiseTile, with_context: bool, trainable: bool) -> Result<(Var, Option<Var>)> {
    let shape = [1, 3, TILE_SIZE, TILE_SIZE];
    let mk = |g: &mut Graph<f32>, d: &Tensor<f32>| -> Result<Var> {
        let d = d.clone().reshaped(&shape)?;
        Ok(if trainable { g.param(d) } else { g.constant(d) })
    };
    let dt = mk(g, &t.delta_t)?;
    let dc = if with_context { Some(mk(g, &t.delta_c)?) } else { None };
    Ok((dt, dc))
}

/// Perturbed template and search batches for `pairs`, one tile per pair.
fn perturbed_batch(
    g: &mut Graph<f32>,
    pairs: &[PairSample],
    tiles: &[(Var, Option<Var>)],
    context: f64,
) -> Result<(Var, Var)> {
    let (mut zs, mut xs) = (Vec::with_capacity(pairs.len()), Vec::with_capacity(pairs.len()));
    for (p, &(dt, dc)) in pairs.iter().zip(tiles) {
        let z = g.constant(p.z.clone().reshaped(&[1, 3, p.z.shape()[1], p.z.shape()[2]])?);
        let x = g.constant(p.x.clone().reshaped(&[1, 3, p.x.shape()[1], p.x.shape()[2]])?);
        zs.push(apply_tiles(g, z, dt, dc, &p.z_box, context)?);
        xs.push(apply_tiles(g, x, dt, dc, &p.x_box, context)?);
    }
    Ok((g.concat(&zs, 0)?, g.concat(&xs, 0)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub outer_epochs: usize,
    pub inner_steps: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub with_context: bool,
    /// Pairs drawn from the video for each PGD step.
    pub pairs_per_step: usize,
    pub surrogate: Arch,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub pairs: PairConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            outer_epochs: 5,
            inner_steps: 20,
            alpha: 2.0 / 255.0,
            sigma: Budget::default().sigma,
            with_context: false,
            pairs_per_step: 2,
            surrogate: Arch::ConvSiamese,
            batch: 8,
            lr: 1e-3,
            seed: 0,
            pairs: PairConfig::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        Budget::new(self.sigma)?;
        if self.inner_steps == 0 {
            return Err(invalid("inner_steps must be ≥ 1"));
        }
        if self.outer_epochs == 0 || self.pairs_per_step == 0 || self.batch == 0 || !(self.lr > 0.0) || !(self.alpha > 0.0) {
            return Err(invalid("outer_epochs, pairs_per_step, batch, lr and alpha must be positive"));
        }
        Ok(())
    }
}

/// BCE of the frozen tracker on `pairs` perturbed by `tile`.
pub fn tile_loss(tp: &TrackerParams, pairs: &[PairSample], tile: &NoiseTile, with_context: bool) -> Result<f64> {
    let labels = batch_labels(tp, pairs, PairConfig::default().radius)?;
    let mut g = Graph::new();
    let tv = tp.params.bind_frozen(&mut g);
    let t = tile_vars(&mut g, tile, with_context, false)?;
    let (z, x) = perturbed_batch(&mut g, pairs, &vec![t; pairs.len()], tp.crop.context)?;
    let r = tp.response(&mut g, &tv, z, x)?;
    let l = bce_loss(&mut g, r, &labels, balanced_pos_weight(&labels))?;
    Ok(g.value(l).item() as f64)
}

/// Draws `n` training pairs from a single video.
pub fn video_pairs(tp: &TrackerParams, v: &VideoRecord, n: usize, pairs: &PairConfig, rng: &mut ChaCha8Rng) -> Result<Vec<PairSample>> {
    (0..n)
        .map(|_| {
            let (i, j) = sample_pair(v.len(), pairs.max_gap, rng)?;
            make_pair(0, v, i, j, &tp.crop, pairs, rng)
        })
        .collect()
}

/// `inner_steps` PGD steps that lower the frozen tracker's loss on pairs from
/// `v`, starting from `init`.
pub fn optimize_video_noise(
    tp: &TrackerParams,
    v: &VideoRecord,
    init: &NoiseTile,
    cfg: &EmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<NoiseTile> {
    if cfg.inner_steps == 0 {
        return Err(invalid("inner_steps must be ≥ 1"));
    }
    let mut tile = init.clone();
    for _ in 0..cfg.inner_steps {
        let pairs = video_pairs(tp, v, cfg.pairs_per_step, &cfg.pairs, rng)?;
        let labels = batch_labels(tp, &pairs, cfg.pairs.radius)?;
        let mut g = Graph::new();
        let tv = tp.params.bind_frozen(&mut g);
        let (dt, dc) = tile_vars(&mut g, &tile, cfg.with_context, true)?;
        let (z, x) = perturbed_batch(&mut g, &pairs, &vec![(dt, dc); pairs.len()], tp.crop.context)?;
        let r = tp.response(&mut g, &tv, z, x)?;
        let loss = bce_loss(&mut g, r, &labels, balanced_pos_weight(&labels))?;
        let grads = g.backward(loss)?;
        let shape = [3, TILE_SIZE, TILE_SIZE];
        tile.delta_t = pgd_step(&tile.delta_t, &grads.get(dt).reshaped(&shape)?, cfg.alpha, tile.budget)?;
        if let Some(dc) = dc {
            tile.delta_c = pgd_step(&tile.delta_c, &grads.get(dc).reshaped(&shape)?, cfg.alpha, tile.budget)?;
        }
    }
    Ok(tile)
}

/// Adds a video's tiles to one raw frame, clamps and quantises.
pub fn apply_to_frame(frame: &Image, b: &BBox, tile: &NoiseTile, with_context: bool, context: f64) -> Result<Image> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let mut g = Graph::new();
    let img = g.constant(frame.clone().reshaped(&[1, 3, h, w])?);
    let (dt, dc) = tile_vars(&mut g, tile, with_context, false)?;
    let out = apply_tiles(&mut g, img, dt, dc, b, context)?;
    let mut out = g.value(out).clone().reshaped(&[3, h, w])?;
    quantize_image(&mut out);
    Ok(out)
}

pub struct EmOutput {
    pub dataset: Dataset,
    /// Tiles in video order, keyed by video id.
    pub tiles: Vec<(String, NoiseTile)>,
    pub surrogate: TrackerParams,
    pub seconds: f64,
    /// Mean inner loss per outer epoch, before and after that epoch's PGD.
    pub inner_loss: Vec<(f64, f64)>,
}

/// Alternates one tracker epoch on the currently perturbed data with `T` PGD
/// steps per video, `E` times, then writes the tiles into the raw frames.
pub fn em_protect_dataset(ds: &Dataset, cfg: &EmConfig) -> Result<EmOutput> {
    ds.require_clean()?;
    cfg.validate()?;
    if ds.videos.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let start = Instant::now();
    let budget = Budget::new(cfg.sigma)?;
    let mut tp = init_tracker(cfg.surrogate, cfg.seed.wrapping_add(1));
    let context = tp.crop.context;
    let mut tiles = vec![NoiseTile::zeros(budget); ds.videos.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x656d_6e6f_6973_6500);
    let mut inner_loss = Vec::with_capacity(cfg.outer_epochs);
    for outer in 0..cfg.outer_epochs {
        let order = epoch_order(ds.videos.len(), 1, &mut rng);
        for chunk in order.chunks(cfg.batch) {
            let pairs = sample_pairs(ds, chunk, &tp.crop, &cfg.pairs, &mut rng)?;
            let labels = batch_labels(&tp, &pairs, cfg.pairs.radius)?;
            let mut g = Graph::new();
            let tv: Vec<_> = pairs
                .iter()
                .map(|p| tile_vars(&mut g, &tiles[p.video], cfg.with_context, false))
                .collect::<Result<_>>()?;
            let (z, x) = perturbed_batch(&mut g, &pairs, &tv, context)?;
            let (z, x) = (g.value(z).clone(), g.value(x).clone());
            tracker_step(&mut tp, &z, &x, &labels, cfg.lr)?;
        }
        let (mut before, mut after) = (0.0, 0.0);
        for (k, v) in ds.videos.iter().enumerate() {
            let mut vr = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((outer as u64) << 32 | k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let probe = video_pairs(&tp, v, cfg.pairs_per_step, &cfg.pairs, &mut vr)?;
            before += tile_loss(&tp, &probe, &tiles[k], cfg.with_context)?;
            tiles[k] = optimize_video_noise(&tp, v, &tiles[k], cfg, &mut vr)?;
            after += tile_loss(&tp, &probe, &tiles[k], cfg.with_context)?;
        }
        let n = ds.videos.len() as f64;
        if !(before.is_finite() && after.is_finite()) {
            return Err(Error::NonFiniteLoss { step: outer });
        }
        inner_loss.push((before / n, after / n));
    }
    let mut frames = Vec::with_capacity(ds.videos.len());
    for (v, t) in ds.videos.iter().zip(&tiles) {
        let out = v
            .frames
            .iter()
            .zip(&v.boxes)
            .map(|(f, b)| apply_to_frame(f, b, t, cfg.with_context, context))
            .collect::<Result<Vec<_>>>()?;
        frames.push(out);
    }
    let dataset = ds.with_frames(frames, Provenance::EmProtected)?;
    let tiles = ds.videos.iter().map(|v| v.id.clone()).zip(tiles).collect();
    Ok(EmOutput {
        dataset,
        tiles,
        surrogate: tp,
        seconds: start.elapsed().as_secs_f64(),
        inner_loss,
    })
}

/// Saves the tile set as one checkpoint with entries `{id}.delta_t` (and
/// `{id}.delta_c` for the context variant). Returns its size in bytes.
pub fn save_tiles(dir: &Path, tiles: &[(String, NoiseTile)], with_context: bool) -> Result<u64> {
    let mut p = ParamSet::new();
    for (id, t) in tiles {
        p.insert(format!("{id}.delta_t"), t.delta_t.clone());
        if with_context {
            p.insert(format!("{id}.delta_c"), t.delta_c.clone());
        }
    }
    let sigma = tiles.first().map(|(_, t)| t.budget.sigma).unwrap_or(Budget::default().sigma);
    save_checkpoint(dir, &p, serde_json::json!({ "kind": "em-tiles", "with_context": with_context, "sigma": sigma }))?;
    Ok(checkpoint_bytes(dir)?)
}

pub fn load_tiles(dir: &Path) -> Result<(Vec<(String, NoiseTile)>, bool)> {
    let (p, meta) = load_checkpoint(dir)?;
    let bad = |msg: &str| Error::Manifest {
        path: dir.join("meta.json"),
        msg: msg.into(),
    };
    if meta.extra.get("kind").and_then(|k| k.as_str()) != Some("em-tiles") {
        return Err(bad("not an EM tile checkpoint"));
    }
    let with_context = meta.extra["with_context"].as_bool().unwrap_or(false);
    let budget = Budget::new(meta.extra["sigma"].as_f64().ok_or_else(|| bad("missing sigma"))?)?;
    let mut out: Vec<(String, NoiseTile)> = Vec::new();
    for (name, t) in p.iter() {
        let (id, part) = name.rsplit_once('.').ok_or_else(|| bad("malformed entry name"))?;
        if out.last().map(|(i, _)| i.as_str()) != Some(id) {
            out.push((id.to_string(), NoiseTile::zeros(budget)));
        }
        let tile = &mut out.last_mut().expect("just pushed").1;
        match part {
            "delta_t" => tile.delta_t = t.clone(),
            "delta_c" => tile.delta_c = t.clone(),
            _ => return Err(bad("unknown tile entry")),
        }
    }
    Ok((out, with_context))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn context_region_is_centred() {
        let b = BBox::new(10.0, 10.0, 8.0, 8.0).unwrap();
        let c = context_region(&b, 0.25);
        assert_eq!((c.w, c.h), (16, 16));
        assert_eq!((c.x0, c.y0), (6, 6));
    }
}
