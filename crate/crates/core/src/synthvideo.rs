//! Seeded synthetic tracking corpus and its on-disk layout.
//!
//! Each video is a value-noise background with one checkered rectangle
//! drifting across it. Pixels are quantised to 8 bits at generation time so
//! the PNG round trip is exact.
//!
//! ```text
//! root/manifest.json
//! root/<video-id>/frame_0000.png ...
//! root/<video-id>/boxes.json          [[x, y, w, h], ...]
//! ```

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use numcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{BBox, Image};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Clean,
    EmProtected,
    TueProtected,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Clean => "clean",
            Provenance::EmProtected => "em-protected",
            Provenance::TueProtected => "tue-protected",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub frames: Vec<Image>,
    pub boxes: Vec<BBox>,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Error::Video {
            id: self.id.clone(),
            msg,
        };
        if self.frames.len() != self.boxes.len() {
            return Err(err(format!("{} frames but {} boxes", self.frames.len(), self.boxes.len())));
        }
        if self.frames.len() < 2 {
            return Err(err("fewer than two frames".into()));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.validate().map_err(|e| err(format!("frame {i}: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: Split,
    pub frame_size: usize,
    pub seed: u64,
    pub provenance: Provenance,
    pub videos: Vec<VideoEntry>,
    #[serde(skip)]
    pub root: Option<PathBuf>,
}

/// A manifest together with the decoded videos it lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub videos: Vec<VideoRecord>,
}

impl Dataset {
    pub fn provenance(&self) -> Provenance {
        self.manifest.provenance
    }

    pub fn frame_size(&self) -> usize {
        self.manifest.frame_size
    }

    pub fn require_clean(&self) -> Result<()> {
        match self.manifest.provenance {
            Provenance::Clean => Ok(()),
            p => Err(Error::Provenance {
                expected: "clean",
                found: p.as_str().into(),
            }),
        }
    }

    /// Copy with new frames and provenance; ids, boxes and seed are kept.
    pub fn with_frames(&self, frames: Vec<Vec<Image>>, provenance: Provenance) -> Result<Dataset> {
        if frames.len() != self.videos.len() {
            return Err(invalid("frame set does not match video count"));
        }
        let videos = self
            .videos
            .iter()
            .zip(frames)
            .map(|(v, f)| VideoRecord {
                id: v.id.clone(),
                frames: f,
                boxes: v.boxes.clone(),
            })
            .collect::<Vec<_>>();
        for v in &videos {
            v.validate()?;
        }
        let mut manifest = self.manifest.clone();
        manifest.provenance = provenance;
        manifest.root = None;
        Ok(Dataset { manifest, videos })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub n_frames: usize,
    pub frame_size: usize,
    pub seed: u64,
    pub split: Split,
    /// Initial target side range in pixels.
    pub target_min: f64,
    pub target_max: f64,
    /// Standard deviation of the per-frame velocity kick (pixels).
    pub accel: f64,
    /// Velocity retained from one frame to the next.
    pub damping: f64,
    pub max_speed: f64,
    /// Standard deviation of the per-frame log-scale kick.
    pub scale_accel: f64,
    /// Background value-noise amplitude around its base colour.
    pub bg_contrast: f64,
    /// Amplitude of the fine background octave.
    pub bg_detail: f64,
    /// Colour distance between the two checker colours.
    pub target_contrast: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 200,
            n_frames: 20,
            frame_size: 64,
            seed: 0,
            split: Split::Train,
            target_min: 12.0,
            target_max: 20.0,
            accel: 2.0,
            damping: 0.8,
            max_speed: 5.0,
            scale_accel: 0.02,
            bg_contrast: 0.5,
            bg_detail: 1.2,
            target_contrast: 0.6,
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream easy to reason about.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Nearest 8-bit level, as the PNG decoder would return it.
pub(crate) fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Two-octave value noise, one RGB field per video.
struct ValueNoise {
    cell: f64,
    n: usize,
    grid: Vec<[f64; 3]>,
}

impl ValueNoise {
    fn new(rng: &mut impl Rng, size: usize, cell: f64, amp: f64) -> Self {
        let n = (size as f64 / cell).ceil() as usize + 2;
        let grid = (0..n * n)
            .map(|_| {
                let g: f64 = rng.gen_range(-1.0..1.0);
                let mut c = [0.0; 3];
                for v in c.iter_mut() {
                    *v = amp * (0.7 * g + 0.3 * rng.gen_range(-1.0..1.0));
                }
                c
            })
            .collect();
        Self { cell, n, grid }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (tx, ty) = (smooth(gx - gx.floor()), smooth(gy - gy.floor()));
        let g = |i: usize, j: usize| self.grid[j.min(self.n - 1) * self.n + i.min(self.n - 1)];
        let (a, b, c, d) = (g(ix, iy), g(ix + 1, iy), g(ix, iy + 1), g(ix + 1, iy + 1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] + (b[k] - a[k]) * tx;
            let bot = c[k] + (d[k] - c[k]) * tx;
            out[k] = top + (bot - top) * ty;
        }
        out
    }
}

struct Scene {
    base: [f64; 3],
    coarse: ValueNoise,
    fine: ValueNoise,
    colors: [[f64; 3]; 2],
    period: f64,
    w0: f64,
    h0: f64,
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

impl Scene {
    fn new(rng: &mut impl Rng, cfg: &SynthConfig) -> Self {
        let base = random_color(rng, 0.3, 0.7);
        let cell = rng.gen_range(8.0..16.0);
        let coarse = ValueNoise::new(rng, cfg.frame_size, cell, cfg.bg_contrast * 0.5);
        let cell = rng.gen_range(2.0..4.0);
        let fine = ValueNoise::new(rng, cfg.frame_size, cell, cfg.bg_detail);
        let mid = random_color(rng, 0.25, 0.75);
        let dir = random_color(rng, -1.0, 1.0);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        let half = cfg.target_contrast / 2.0;
        let mut colors = [[0.0; 3]; 2];
        for k in 0..3 {
            colors[0][k] = mid[k] + half * dir[k] / norm;
            colors[1][k] = mid[k] - half * dir[k] / norm;
        }
        Self {
            base,
            coarse,
            fine,
            colors,
            period: rng.gen_range(2.0..4.0),
            w0: rng.gen_range(cfg.target_min..=cfg.target_max),
            h0: rng.gen_range(cfg.target_min..=cfg.target_max),
        }
    }

    fn render(&self, size: usize, b: &BBox) -> Image {
        let mut d = vec![0.0f32; 3 * size * size];
        let (sx, sy) = (self.w0 / b.w, self.h0 / b.h);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (c, f) = (self.coarse.at(px, py), self.fine.at(px, py));
                // fraction of the pixel square covered by the target
                let cov_x = ((x as f64 + 1.0).min(b.x + b.w) - (x as f64).max(b.x)).max(0.0);
                let cov_y = ((y as f64 + 1.0).min(b.y + b.h) - (y as f64).max(b.y)).max(0.0);
                let alpha = cov_x * cov_y;
                let tu = ((px - b.x) * sx / self.period).floor() as i64;
                let tv = ((py - b.y) * sy / self.period).floor() as i64;
                let tc = self.colors[((tu + tv).rem_euclid(2)) as usize];
                for k in 0..3 {
                    let bg = self.base[k] + c[k] + f[k];
                    d[(k * size + y) * size + x] = quantize(bg * (1.0 - alpha) + tc[k] * alpha);
                }
            }
        }
        Tensor::new(&[3, size, size], d).expect("shape is consistent")
    }
}

fn trajectory(rng: &mut impl Rng, cfg: &SynthConfig, w0: f64, h0: f64) -> Vec<BBox> {
    let fs = cfg.frame_size as f64;
    let mut x = rng.gen_range(0.0..(fs - w0));
    let mut y = rng.gen_range(0.0..(fs - h0));
    let (mut vx, mut vy) = (normal(rng) * cfg.accel, normal(rng) * cfg.accel);
    let (mut ls, mut vs) = (0.0f64, 0.0f64);
    let (lo, hi) = (0.5f64.ln(), 2.0f64.ln());
    let mut boxes = Vec::with_capacity(cfg.n_frames);
    for t in 0..cfg.n_frames {
        if t > 0 {
            vs = 0.8 * vs + cfg.scale_accel * normal(rng);
            let prev = (ls, w0 * ls.exp(), h0 * ls.exp());
            ls += vs;
            // keep the scale inside [0.5, 2] and the box inside the frame
            let fit = (fs / w0).min(fs / h0).ln();
            if ls < lo || ls > hi.min(fit) {
                ls = ls.clamp(lo, hi.min(fit));
                vs = -vs;
            }
            let (w, h) = (w0 * ls.exp(), h0 * ls.exp());
            x -= (w - prev.1) / 2.0;
            y -= (h - prev.2) / 2.0;
            vx = cfg.damping * vx + cfg.accel * normal(rng);
            vy = cfg.damping * vy + cfg.accel * normal(rng);
            let sp = (vx * vx + vy * vy).sqrt();
            if sp > cfg.max_speed {
                vx *= cfg.max_speed / sp;
                vy *= cfg.max_speed / sp;
            }
            x += vx;
            y += vy;
            (x, vx) = reflect(x, vx, fs - w);
            (y, vy) = reflect(y, vy, fs - h);
        }
        let s = ls.exp();
        boxes.push(BBox {
            x,
            y,
            w: w0 * s,
            h: h0 * s,
        });
    }
    boxes
}

fn reflect(mut p: f64, mut v: f64, max: f64) -> (f64, f64) {
    if p < 0.0 {
        p = -p;
        v = -v;
    }
    if p > max {
        p = 2.0 * max - p;
        v = -v;
    }
    (p.clamp(0.0, max), v)
}

/// Deterministic corpus; video `k` draws from stream `k` of the seeded
/// generator so videos do not depend on each other.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_videos == 0 || cfg.n_frames < 2 || cfg.frame_size < 32 {
        return Err(invalid(format!(
            "need n_videos ≥ 1, n_frames ≥ 2, frame_size ≥ 32 (got {}, {}, {})",
            cfg.n_videos, cfg.n_frames, cfg.frame_size
        )));
    }
    if !(cfg.target_min > 0.0 && cfg.target_min <= cfg.target_max && 2.0 * cfg.target_max <= cfg.frame_size as f64) {
        return Err(invalid("target size range must be positive and fit twice into the frame"));
    }
    let mut videos = Vec::with_capacity(cfg.n_videos);
    for k in 0..cfg.n_videos {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64 + 1);
        let scene = Scene::new(&mut rng, cfg);
        let boxes = trajectory(&mut rng, cfg, scene.w0, scene.h0);
        let frames = boxes.iter().map(|b| scene.render(cfg.frame_size, b)).collect();
        videos.push(VideoRecord {
            id: format!("{}-{:04}", cfg.split.as_str(), k),
            frames,
            boxes,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        split: cfg.split,
        frame_size: cfg.frame_size,
        seed: cfg.seed,
        provenance: Provenance::Clean,
        videos: videos
            .iter()
            .map(|v| VideoEntry {
                id: v.id.clone(),
                frames: v.len(),
            })
            .collect(),
        root: None,
    };
    Ok(Dataset { manifest, videos })
}

/// Uniform draw over ordered frame pairs `(i, j)` with `i ≠ j` and
/// `|i − j| ≤ max_gap`.
pub fn sample_pair(n_frames: usize, max_gap: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if n_frames < 2 {
        return Err(invalid("video shorter than 2 frames"));
    }
    if max_gap == 0 {
        return Err(invalid("max_gap must be ≥ 1"));
    }
    let count = |i: usize| (i + max_gap).min(n_frames - 1) - i.saturating_sub(max_gap);
    let total: usize = (0..n_frames).map(count).sum();
    let mut k = rng.gen_range(0..total);
    for i in 0..n_frames {
        let c = count(i);
        if k < c {
            let lo = i.saturating_sub(max_gap);
            let j = lo + k;
            return Ok((i, if j >= i { j + 1 } else { j }));
        }
        k -= c;
    }
    unreachable!("k < total")
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let plane = h * w;
    let d = img.data();
    let mut buf = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            buf.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&buf).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

fn read_png(path: &Path) -> Result<Image> {
    let png_err = |msg: String| Error::Png {
        path: path.to_path_buf(),
        msg,
    };
    let file = fs::File::open(path)?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| png_err(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(format!("expected 8-bit RGB, got {:?}/{:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let plane = w * h;
    let mut d = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            d[c * plane + p] = buf[p * 3 + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], d)?)
}

pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(root)?;
    for v in &ds.videos {
        v.validate()?;
        let dir = root.join(&v.id);
        fs::create_dir_all(&dir)?;
        for (i, f) in v.frames.iter().enumerate() {
            write_png(&dir.join(format!("frame_{i:04}.png")), f)?;
        }
        let boxes: Vec<[f64; 4]> = v.boxes.iter().map(BBox::to_array).collect();
        fs::write(dir.join("boxes.json"), serde_json::to_string(&boxes)?)?;
    }
    let mut manifest = ds.manifest.clone();
    manifest.videos = ds
        .videos
        .iter()
        .map(|v| VideoEntry {
            id: v.id.clone(),
            frames: v.len(),
        })
        .collect();
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    manifest.root = Some(root.to_path_buf());
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let bad = |msg: String| Error::Manifest {
        path: path.clone(),
        msg,
    };
    let text = fs::read_to_string(&path).map_err(|e| bad(e.to_string()))?;
    let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(bad(format!("unsupported format version {}", m.version)));
    }
    m.root = Some(root.to_path_buf());
    Ok(m)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = load_manifest(root)?;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for e in &manifest.videos {
        let dir = root.join(&e.id);
        let verr = |msg: String| Error::Video {
            id: e.id.clone(),
            msg,
        };
        let text = fs::read_to_string(dir.join("boxes.json")).map_err(|err| verr(format!("box file: {err}")))?;
        let raw: Vec<[f64; 4]> = serde_json::from_str(&text).map_err(|err| verr(format!("box file: {err}")))?;
        if raw.len() != e.frames {
            return Err(verr(format!("manifest lists {} frames, box file has {}", e.frames, raw.len())));
        }
        let boxes = raw
            .iter()
            .map(|b| BBox {
                x: b[0],
                y: b[1],
                w: b[2],
                h: b[3],
            })
            .collect();
        let frames = (0..e.frames)
            .map(|i| read_png(&dir.join(format!("frame_{i:04}.png"))))
            .collect::<Result<Vec<_>>>()?;
        for f in &frames {
            if f.shape() != [3, manifest.frame_size, manifest.frame_size] {
                return Err(verr(format!("frame shape {:?} != frame_size {}", f.shape(), manifest.frame_size)));
            }
        }
        let v = VideoRecord {
            id: e.id.clone(),
            frames,
            boxes,
        };
        v.validate()?;
        videos.push(v);
    }
    Ok(Dataset { manifest, videos })
}
