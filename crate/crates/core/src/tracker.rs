//! Siamese trackers: backbones, response supervision, training, one-pass
//! tracking and OPE-style metrics.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use numcore::{adam_step, load_checkpoint, save_checkpoint, Graph, ParamSet, ParamVars, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{context_side, crop_square, crop_with_context, BBox, Image};
use crate::nn;
use crate::synthvideo::{sample_pair, Dataset, VideoRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    ConvSiamese,
    AttnMini,
}

impl Arch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::ConvSiamese => "conv-siamese",
            Arch::AttnMini => "attn-mini",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv-siamese" => Ok(Arch::ConvSiamese),
            "attn-mini" => Ok(Arch::AttnMini),
            other => Err(invalid(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub template: usize,
    pub search: usize,
    pub context: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            template: 32,
            search: 64,
            context: 0.25,
        }
    }
}

/// Placement of response cells in search-patch pixels: cell `u` is centred
/// at `origin + stride·u`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseGeometry {
    pub size: usize,
    pub stride: f64,
    pub origin: f64,
}

impl ResponseGeometry {
    pub fn cell_of(&self, px: f64) -> f64 {
        (px - self.origin) / self.stride
    }

    pub fn pixel_of(&self, cell: f64) -> f64 {
        self.origin + self.stride * cell
    }
}

const ATTN_WIDTH: usize = 64;
const ATTN_HEADS: usize = 4;
const ATTN_DEPTH: usize = 2;
const ATTN_PATCH: usize = 4;
const ATTN_MLP: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerParams {
    pub arch: Arch,
    pub params: ParamSet<f32>,
    pub crop: CropConfig,
    pub response: ResponseGeometry,
}

/// Deterministic initialisation; weights are uniform with fan-in scaling.
pub fn init_tracker(arch: Arch, seed: u64) -> TrackerParams {
    let crop = CropConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let silu_gain = 2f64.sqrt();
    let response = match arch {
        Arch::ConvSiamese => {
            nn::add_conv(&mut p, &mut rng, "conv1", 3, 16, 5, silu_gain);
            nn::add_conv(&mut p, &mut rng, "conv2", 16, 32, 3, silu_gain);
            nn::add_conv(&mut p, &mut rng, "conv3", 32, 32, 3, 1.0);
            p.insert("head.scale", Tensor::full(&[1], 1e-2));
            p.insert("head.bias", Tensor::full(&[1], -1.0));
            let zf = conv_feature_size(crop.template);
            let xf = conv_feature_size(crop.search);
            ResponseGeometry {
                size: xf - zf + 1,
                stride: 2.0,
                origin: crop.template as f64 / 2.0,
            }
        }
        Arch::AttnMini => {
            let (nz, nx) = ((crop.template / ATTN_PATCH).pow(2), (crop.search / ATTN_PATCH).pow(2));
            nn::add_conv(&mut p, &mut rng, "embed", 3, ATTN_WIDTH, ATTN_PATCH, 1.0);
            p.insert("pos_z", nn::uniform(&mut rng, &[nz, ATTN_WIDTH], 0.1));
            p.insert("pos_x", nn::uniform(&mut rng, &[nx, ATTN_WIDTH], 0.1));
            for b in 0..ATTN_DEPTH {
                nn::add_linear(&mut p, &mut rng, &format!("block{b}.attn.qkv"), ATTN_WIDTH, 3 * ATTN_WIDTH, 1.0);
                nn::add_linear(&mut p, &mut rng, &format!("block{b}.attn.out"), ATTN_WIDTH, ATTN_WIDTH, 0.5);
                nn::add_linear(&mut p, &mut rng, &format!("block{b}.mlp.fc1"), ATTN_WIDTH, ATTN_MLP, silu_gain);
                nn::add_linear(&mut p, &mut rng, &format!("block{b}.mlp.fc2"), ATTN_MLP, ATTN_WIDTH, 0.5);
            }
            nn::add_linear(&mut p, &mut rng, "head", ATTN_WIDTH, 1, 1.0);
            ResponseGeometry {
                size: crop.search / ATTN_PATCH,
                stride: ATTN_PATCH as f64,
                origin: (ATTN_PATCH as f64 - 1.0) / 2.0,
            }
        }
    };
    TrackerParams {
        arch,
        params: p,
        crop,
        response,
    }
}

pub fn init_tracker_named(arch: &str, seed: u64) -> Result<TrackerParams> {
    Ok(init_tracker(arch.parse()?, seed))
}

/// Spatial side of the conv-siamese feature map for an `input`-sized patch.
pub fn conv_feature_size(input: usize) -> usize {
    let a = (input - 5) / 2 + 1;
    a - 4
}

impl TrackerParams {
    /// Backbone feature map (`N×C×h×w`) of a batch of patches.
    pub fn features(&self, g: &mut Graph<f32>, v: &ParamVars, x: Var) -> Result<Var> {
        let x = g.add_scalar(x, -0.5);
        match self.arch {
            Arch::ConvSiamese => {
                let h = nn::conv(g, v, "conv1", x, 2)?;
                let h = g.silu(h)?;
                let h = nn::conv(g, v, "conv2", h, 1)?;
                let h = g.silu(h)?;
                nn::conv(g, v, "conv3", h, 1)
            }
            Arch::AttnMini => nn::conv(g, v, "embed", x, ATTN_PATCH),
        }
    }

    /// Pre-sigmoid response `N×1×s×s` for template batch `z` and search
    /// batch `x`.
    pub fn logits(&self, g: &mut Graph<f32>, v: &ParamVars, z: Var, x: Var) -> Result<Var> {
        let (sz, sx) = (g.shape(z).to_vec(), g.shape(x).to_vec());
        let (t, s) = (self.crop.template, self.crop.search);
        if sz.len() != 4 || sx.len() != 4 || sz[1..] != [3, t, t] || sx[1..] != [3, s, s] || sz[0] != sx[0] {
            return Err(invalid(format!(
                "patch batch shapes {sz:?}/{sx:?} do not match crop config {t}/{s}"
            )));
        }
        match self.arch {
            Arch::ConvSiamese => {
                let fz = self.features(g, v, z)?;
                let fx = self.features(g, v, x)?;
                let r = g.cross_correlate(fz, fx)?;
                let r = g.mul(r, v.get("head.scale")?)?;
                Ok(g.add(r, v.get("head.bias")?)?)
            }
            Arch::AttnMini => {
                let n = sz[0];
                let fz = self.features(g, v, z)?;
                let fx = self.features(g, v, x)?;
                let tz = nn::to_tokens(g, fz)?;
                let tx = nn::to_tokens(g, fx)?;
                let pz = nn::repeat_batch(g, v.get("pos_z")?, n)?;
                let px = nn::repeat_batch(g, v.get("pos_x")?, n)?;
                let tz = g.add(tz, pz)?;
                let tx = g.add(tx, px)?;
                let nz = g.shape(tz)[1];
                let nx = g.shape(tx)[1];
                let mut h = g.concat(&[tz, tx], 1)?;
                for b in 0..ATTN_DEPTH {
                    let a = g.layer_norm(h, 1e-5)?;
                    let a = nn::self_attention(g, v, &format!("block{b}.attn"), a, ATTN_HEADS)?;
                    h = g.add(h, a)?;
                    let m = g.layer_norm(h, 1e-5)?;
                    let m = nn::mlp(g, v, &format!("block{b}.mlp"), m)?;
                    h = g.add(h, m)?;
                }
                let h = g.layer_norm(h, 1e-5)?;
                let hx = g.slice(h, 1, nz, nx)?;
                let r = nn::linear(g, v, "head", hx)?;
                let side = self.response.size;
                Ok(g.reshape(r, &[n, 1, side, side])?)
            }
        }
    }

    /// Sigmoid response in `(0,1)`.
    pub fn response(&self, g: &mut Graph<f32>, v: &ParamVars, z: Var, x: Var) -> Result<Var> {
        let l = self.logits(g, v, z, x)?;
        Ok(g.sigmoid(l))
    }

    /// Response maps for single patches, evaluated without gradients.
    pub fn response_map(&self, z: &Image, x: &Image) -> Result<Tensor<f32>> {
        let zb = Tensor::stack(std::slice::from_ref(z))?;
        let xb = Tensor::stack(std::slice::from_ref(x))?;
        self.response_batch(&zb, &xb)
    }

    pub fn response_batch(&self, z: &Tensor<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let v = self.params.bind_frozen(&mut g);
        let (zv, xv) = (g.constant(z.clone()), g.constant(x.clone()));
        let r = self.response(&mut g, &v, zv, xv)?;
        Ok(g.value(r).clone())
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "tracker",
            "arch": self.arch,
            "crop": self.crop,
            "response": self.response,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.params, self.meta())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (params, meta) = load_checkpoint(dir)?;
        let bad = |m: &str| Error::Manifest {
            path: dir.join("meta.json"),
            msg: m.into(),
        };
        let extra = &meta.extra;
        if extra.get("kind").and_then(|k| k.as_str()) != Some("tracker") {
            return Err(bad("not a tracker checkpoint"));
        }
        let arch: Arch = serde_json::from_value(extra["arch"].clone())?;
        let crop: CropConfig = serde_json::from_value(extra["crop"].clone())?;
        let response: ResponseGeometry = serde_json::from_value(extra["response"].clone())?;
        let reference = init_tracker(arch, 0);
        let names_ok = reference.params.names().eq(params.names());
        let shapes_ok = reference
            .params
            .iter()
            .zip(params.iter())
            .all(|((_, a), (_, b))| a.shape() == b.shape());
        if !names_ok || !shapes_ok || crop != reference.crop || response != reference.response {
            return Err(bad("parameter layout does not match the architecture"));
        }
        Ok(Self {
            arch,
            params,
            crop,
            response,
        })
    }
}

/// `{0,1}` label: cells within Euclidean distance `radius` (in cells) of the
/// target centre are positive.
pub fn gt_response(center: (f64, f64), search_size: usize, geom: &ResponseGeometry, radius: f64) -> Result<Tensor<f32>> {
    let (cx, cy) = center;
    let s = search_size as f64;
    if !(0.0..s).contains(&cx) || !(0.0..s).contains(&cy) {
        return Err(invalid(format!("target centre ({cx}, {cy}) outside the {search_size}px search patch")));
    }
    let (cu, cv) = (geom.cell_of(cx), geom.cell_of(cy));
    let n = geom.size;
    let r2 = radius * radius;
    let mut d = vec![0.0f32; n * n];
    for v in 0..n {
        for u in 0..n {
            let (du, dv) = (u as f64 - cu, v as f64 - cv);
            if du * du + dv * dv <= r2 + 1e-9 {
                d[v * n + u] = 1.0;
            }
        }
    }
    Ok(Tensor::new(&[n, n], d)?)
}

/// Weight making positive and negative cells contribute equally.
pub fn balanced_pos_weight(label: &Tensor<f32>) -> f64 {
    let pos = label.data().iter().filter(|&&v| v > 0.5).count();
    let neg = label.numel() - pos;
    if pos == 0 || neg == 0 {
        1.0
    } else {
        neg as f64 / pos as f64
    }
}

pub const BCE_CLAMP: f64 = 1e-7;

/// Weighted binary cross-entropy,
/// `−(w·Σ_pos log p + Σ_neg log(1−p)) / (w·n_pos + n_neg)`, with `p` clamped
/// to `[1e-7, 1−1e-7]`.
pub fn bce_loss(g: &mut Graph<f32>, response: Var, label: &Tensor<f32>, pos_weight: f64) -> Result<Var> {
    if g.shape(response) != label.shape() {
        return Err(invalid(format!(
            "response {:?} vs label {:?}",
            g.shape(response),
            label.shape()
        )));
    }
    let rv = g.value(response);
    if rv.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(invalid("response values must lie in (0,1)"));
    }
    let pos = label.data().iter().filter(|&&v| v > 0.5).count() as f64;
    let neg = label.numel() as f64 - pos;
    let z = pos_weight * pos + neg;
    let wp = label.map(|y| (pos_weight * y as f64 / z) as f32);
    let wn = label.map(|y| ((1.0 - y as f64) / z) as f32);
    let p = g.clamp(response, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let lp = g.log(p);
    let q = g.neg(p);
    let q = g.add_scalar(q, 1.0);
    let lq = g.log(q);
    let (wp, wn) = (g.constant(wp), g.constant(wn));
    let a = g.mul(lp, wp)?;
    let b = g.mul(lq, wn)?;
    let a = g.sum(a);
    let b = g.sum(b);
    let s = g.add(a, b)?;
    Ok(g.neg(s))
}

/// Sampling and augmentation settings for template/search pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairConfig {
    pub max_gap: usize,
    /// Maximum target offset from the search-patch centre, in patch pixels.
    pub shift: f64,
    /// Maximum relative change of the search side.
    pub scale_jitter: f64,
    pub radius: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            max_gap: 10,
            shift: 8.0,
            scale_jitter: 0.05,
            radius: 2.0,
        }
    }
}

/// One training pair in patch coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub video: usize,
    pub i: usize,
    pub j: usize,
    pub z: Image,
    pub x: Image,
    /// Target box inside the template patch.
    pub z_box: BBox,
    /// Target box inside the search patch.
    pub x_box: BBox,
}

/// Crops a template around `b_i` in frame `i` and a shifted, jittered search
/// region around `b_j` in frame `j`.
pub fn make_pair(
    video: usize,
    v: &VideoRecord,
    i: usize,
    j: usize,
    crop: &CropConfig,
    cfg: &PairConfig,
    rng: &mut impl Rng,
) -> Result<PairSample> {
    let (bi, bj) = (&v.boxes[i], &v.boxes[j]);
    let z = crop_with_context(&v.frames[i], bi, crop.template, crop.context)?;
    let sz_i = context_side(bi, crop.context);
    let kz = crop.template as f64 / sz_i;
    let t = crop.template as f64 / 2.0;
    let z_box = BBox::from_center(t, t, bi.w * kz, bi.h * kz);

    let jitter = if cfg.scale_jitter > 0.0 {
        rng.gen_range(-cfg.scale_jitter..=cfg.scale_jitter)
    } else {
        0.0
    };
    let sx = 2.0 * context_side(bj, crop.context) * (1.0 + jitter);
    let kx = crop.search as f64 / sx;
    let (dx, dy) = if cfg.shift > 0.0 {
        (rng.gen_range(-cfg.shift..=cfg.shift), rng.gen_range(-cfg.shift..=cfg.shift))
    } else {
        (0.0, 0.0)
    };
    let (cx, cy) = bj.center();
    // patch centre sits at target centre minus the shift
    let (ox, oy) = (cx - dx / kx, cy - dy / kx);
    let x = crop_square(&v.frames[j], ox, oy, sx, crop.search)?;
    let h = crop.search as f64 / 2.0;
    let x_box = BBox::from_center(h + dx, h + dy, bj.w * kx, bj.h * kx);
    Ok(PairSample {
        video,
        i,
        j,
        z,
        x,
        z_box,
        x_box,
    })
}

/// Draws `n` pairs, one per entry of `videos`.
pub fn sample_pairs(
    ds: &Dataset,
    videos: &[usize],
    crop: &CropConfig,
    cfg: &PairConfig,
    rng: &mut impl Rng,
) -> Result<Vec<PairSample>> {
    videos
        .iter()
        .map(|&k| {
            let v = &ds.videos[k];
            let (i, j) = sample_pair(v.len(), cfg.max_gap, rng)?;
            make_pair(k, v, i, j, crop, cfg, rng)
        })
        .collect()
}

/// Stacked labels `N×1×s×s` for a batch of pairs.
pub fn batch_labels(tp: &TrackerParams, pairs: &[PairSample], radius: f64) -> Result<Tensor<f32>> {
    let maps = pairs
        .iter()
        .map(|p| {
            let l = gt_response(p.x_box.center(), tp.crop.search, &tp.response, radius)?;
            Ok(l.reshaped(&[1, tp.response.size, tp.response.size])?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&maps)?)
}

/// Batch BCE on already-built patch tensors, with the balanced weight of the
/// whole batch.
pub fn pair_loss(
    g: &mut Graph<f32>,
    tp: &TrackerParams,
    v: &ParamVars,
    z: Var,
    x: Var,
    labels: &Tensor<f32>,
) -> Result<Var> {
    let r = tp.response(g, v, z, x)?;
    bce_loss(g, r, labels, balanced_pos_weight(labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VictimConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Pairs drawn from every video per epoch.
    pub pairs_per_video: usize,
    pub pairs: PairConfig,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 8,
            lr: 1e-3,
            pairs_per_video: 1,
            pairs: PairConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    pub step_loss: Vec<f64>,
}

/// Video visiting order for one epoch.
pub(crate) fn epoch_order(n_videos: usize, per_video: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_videos).flat_map(|k| std::iter::repeat_n(k, per_video)).collect();
    order.shuffle(rng);
    order
}

pub(crate) fn stack_patches(pairs: &[PairSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let z: Vec<_> = pairs.iter().map(|p| p.z.clone()).collect();
    let x: Vec<_> = pairs.iter().map(|p| p.x.clone()).collect();
    Ok((Tensor::stack(&z)?, Tensor::stack(&x)?))
}

/// One Adam step of the tracker on a batch of patches.
pub fn tracker_step(tp: &mut TrackerParams, z: &Tensor<f32>, x: &Tensor<f32>, labels: &Tensor<f32>, lr: f64) -> Result<f64> {
    let (loss, grads) = nn::value_and_grad(&tp.params, |g, v| {
        let (zv, xv) = (g.constant(z.clone()), g.constant(x.clone()));
        pair_loss(g, tp, v, zv, xv, labels)
    })?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: tp.params.step() as usize,
        });
    }
    adam_step(&mut tp.params, &grads, lr)?;
    Ok(loss as f64)
}

/// Trains a fresh tracker on pairs drawn from `ds`.
pub fn train_tracker(ds: &Dataset, arch: Arch, cfg: &VictimConfig, seed: u64) -> Result<(TrackerParams, TrainLog)> {
    let mut tp = init_tracker(arch, seed);
    let log = continue_training(&mut tp, ds, cfg, seed)?;
    Ok((tp, log))
}

pub fn continue_training(tp: &mut TrackerParams, ds: &Dataset, cfg: &VictimConfig, seed: u64) -> Result<TrainLog> {
    if ds.videos.is_empty() {
        return Err(invalid("empty dataset"));
    }
    if cfg.batch == 0 || cfg.epochs == 0 || cfg.pairs_per_video == 0 {
        return Err(invalid("epochs, batch and pairs_per_video must be ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6163_6b65_7200);
    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs {
        let order = epoch_order(ds.videos.len(), cfg.pairs_per_video, &mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch) {
            let pairs = sample_pairs(ds, chunk, &tp.crop, &cfg.pairs, &mut rng)?;
            let labels = batch_labels(tp, &pairs, cfg.pairs.radius)?;
            let (z, x) = stack_patches(&pairs)?;
            let loss = tracker_step(tp, &z, &x, &labels, cfg.lr)?;
            log.step_loss.push(loss);
            total += loss;
            steps += 1;
        }
        log.epoch_loss.push(total / steps as f64);
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    pub scales: Vec<f64>,
    /// Multiplier applied to the peak of every non-unit scale.
    pub scale_penalty: f64,
    /// Damping of the size update towards the selected scale.
    pub scale_lr: f64,
    /// Blend weight of a Hann window centred on the previous position.
    pub window_influence: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.96, 1.0, 1.04],
            scale_penalty: 0.97,
            scale_lr: 0.59,
            window_influence: 0.0,
        }
    }
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Sub-cell peak offset from a three-point parabola.
fn parabolic(l: f64, c: f64, r: f64) -> f64 {
    let d = l - 2.0 * c + r;
    if d.abs() < 1e-12 {
        0.0
    } else {
        (0.5 * (l - r) / d).clamp(-0.5, 0.5)
    }
}

/// One-pass tracking: the template is cut once from frame 0, and every later
/// frame is searched around the previous estimate at several scales.
pub fn track_sequence(tp: &TrackerParams, frames: &[Image], init_box: &BBox, cfg: &TrackConfig) -> Result<Vec<BBox>> {
    let first = frames.first().ok_or_else(|| invalid("empty video"))?;
    init_box.validate()?;
    if cfg.scales.is_empty() {
        return Err(invalid("no search scales"));
    }
    let (fh, fw) = (first.shape()[1], first.shape()[2]);
    let z = crop_with_context(first, init_box, tp.crop.template, tp.crop.context)?;
    let ns = cfg.scales.len();
    let zb = Tensor::stack(&vec![z; ns])?;
    let n = tp.response.size;
    let win = hann(n);
    let search = tp.crop.search as f64;
    let mut out = vec![*init_box];
    let mut cur = *init_box;
    for frame in &frames[1..] {
        let (cx, cy) = cur.center();
        let base = 2.0 * context_side(&cur, tp.crop.context);
        let xs = cfg
            .scales
            .iter()
            .map(|s| crop_square(frame, cx, cy, base * s, tp.crop.search))
            .collect::<Result<Vec<_>>>()?;
        let r = tp.response_batch(&zb, &Tensor::stack(&xs)?)?;
        let mut best = (f64::NEG_INFINITY, 0usize, 0usize, 0usize);
        for (si, s) in cfg.scales.iter().enumerate() {
            let pen = if (*s - 1.0).abs() < 1e-12 { 1.0 } else { cfg.scale_penalty };
            let map = &r.data()[si * n * n..(si + 1) * n * n];
            for v in 0..n {
                for u in 0..n {
                    let raw = map[v * n + u] as f64 * pen;
                    let score = (1.0 - cfg.window_influence) * raw + cfg.window_influence * win[u] * win[v];
                    if score > best.0 {
                        best = (score, si, u, v);
                    }
                }
            }
        }
        let (_, si, u, v) = best;
        let map = &r.data()[si * n * n..(si + 1) * n * n];
        let at = |uu: usize, vv: usize| map[vv * n + uu] as f64;
        let du = if u > 0 && u + 1 < n { parabolic(at(u - 1, v), at(u, v), at(u + 1, v)) } else { 0.0 };
        let dv = if v > 0 && v + 1 < n { parabolic(at(u, v - 1), at(u, v), at(u, v + 1)) } else { 0.0 };
        let s = cfg.scales[si];
        let k = base * s / search;
        let px = tp.response.pixel_of(u as f64 + du) - search / 2.0;
        let py = tp.response.pixel_of(v as f64 + dv) - search / 2.0;
        let grow = 1.0 - cfg.scale_lr + cfg.scale_lr * s;
        let next = BBox::from_center(cx + px * k, cy + py * k, cur.w * grow, cur.h * grow).clamp_to(fw, fh);
        out.push(next);
        cur = next;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackMetrics {
    #[serde(rename = "AO")]
    pub ao: f64,
    #[serde(rename = "SR05")]
    pub sr050: f64,
    #[serde(rename = "SR075")]
    pub sr075: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    #[serde(rename = "Prec")]
    pub prec: f64,
}

/// Metrics over frames `1..`, frame 0 being the initialisation.
pub fn evaluate(pred: &[BBox], gt: &[BBox], frame_size: usize) -> Result<TrackMetrics> {
    if pred.len() != gt.len() {
        return Err(invalid(format!("{} predictions for {} ground-truth boxes", pred.len(), gt.len())));
    }
    if gt.len() < 2 {
        return Err(invalid("need at least two frames"));
    }
    let ious: Vec<f64> = pred[1..].iter().zip(&gt[1..]).map(|(p, g)| p.iou(g)).collect();
    let n = ious.len() as f64;
    let frac = |t: f64| ious.iter().filter(|&&v| v > t).count() as f64 / n;
    let thresholds: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    let auc = thresholds.iter().map(|&t| frac(t)).sum::<f64>() / thresholds.len() as f64;
    let limit = 20.0 * frame_size as f64 / 256.0;
    let prec = pred[1..]
        .iter()
        .zip(&gt[1..])
        .filter(|(p, g)| {
            let ((a, b), (c, d)) = (p.center(), g.center());
            ((a - c).powi(2) + (b - d).powi(2)).sqrt() < limit
        })
        .count() as f64
        / n;
    Ok(TrackMetrics {
        ao: ious.iter().sum::<f64>() / n,
        sr050: frac(0.5),
        sr075: frac(0.75),
        auc,
        prec,
    })
}

/// Mean of per-video metrics over a test corpus.
pub fn evaluate_dataset(tp: &TrackerParams, ds: &Dataset, cfg: &TrackConfig) -> Result<TrackMetrics> {
    if ds.videos.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let mut acc = TrackMetrics::default();
    for v in &ds.videos {
        let pred = track_sequence(tp, &v.frames, &v.boxes[0], cfg)?;
        let m = evaluate(&pred, &v.boxes, ds.frame_size())?;
        acc.ao += m.ao;
        acc.sr050 += m.sr050;
        acc.sr075 += m.sr075;
        acc.auc += m.auc;
        acc.prec += m.prec;
    }
    let n = ds.videos.len() as f64;
    Ok(TrackMetrics {
        ao: acc.ao / n,
        sr050: acc.sr050 / n,
        sr075: acc.sr075 / n,
        auc: acc.auc / n,
        prec: acc.prec / n,
    })
}

/// JSON row emitted for every evaluated tracker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub arch: Arch,
    pub dataset_provenance: String,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: TrackMetrics,
    pub train_loss_curve: Vec<f64>,
}

/// Moving average with a centred window, shrunk at the ends.
pub fn smooth_curve(xs: &[f64], window: usize) -> Vec<f64> {
    let h = window / 2;
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(xs.len());
            xs[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
