//! Boxes, crops, resampling and additive pasting.
//!
//! Images are `3×H×W` tensors with values in `[0,1]`. Crops sample pixel
//! centres (`src = x0 + (j + ½)·side/out − ½`) so an integer-aligned crop
//! whose side equals the output size copies pixels exactly; taps that fall
//! outside the frame read the frame's per-channel mean. Tile resizing uses
//! align-corners bilinear interpolation.

use numcore::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type Image = Tensor<f32>;

/// Axis-aligned box in pixels, top-left origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("degenerate box {self:?}")))
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let iw = ((self.x + self.w).min(o.x + o.w) - self.x.max(o.x)).max(0.0);
        let ih = ((self.y + self.h).min(o.y + o.h) - self.y.max(o.y)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + o.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Shrinks and shifts the box so it lies inside a `fw×fh` frame, keeping
    /// at least one pixel of extent.
    pub fn clamp_to(&self, fw: usize, fh: usize) -> BBox {
        let (fw, fh) = (fw as f64, fh as f64);
        let w = self.w.clamp(1.0, fw);
        let h = self.h.clamp(1.0, fh);
        let (cx, cy) = self.center();
        BBox {
            x: (cx - w / 2.0).clamp(0.0, fw - w),
            y: (cy - h / 2.0).clamp(0.0, fh - h),
            w,
            h,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Box in units of frame width/height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBBox {
    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn denormalize(&self, frame_w: usize, frame_h: usize) -> BBox {
        let (fw, fh) = (frame_w as f64, frame_h as f64);
        BBox {
            x: self.x * fw,
            y: self.y * fh,
            w: self.w * fw,
            h: self.h * fh,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v)) && self.w > 0.0 && self.h > 0.0
    }
}

/// ℓ∞ bound on a perturbation, in pixel-value units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub sigma: f64,
}

impl Budget {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma > 0.0 && sigma < 1.0 {
            Ok(Self { sigma })
        } else {
            Err(invalid(format!("budget sigma must lie in (0,1), got {sigma}")))
        }
    }
}

impl Default for Budget {
    fn default() -> Self {
        Self { sigma: 8.0 / 255.0 }
    }
}

pub fn normalize_bbox(b: &BBox, frame_w: usize, frame_h: usize) -> Result<NormBBox> {
    if frame_w == 0 || frame_h == 0 {
        return Err(invalid("frame dimensions must be positive"));
    }
    b.validate()?;
    let (fw, fh) = (frame_w as f64, frame_h as f64);
    Ok(NormBBox {
        x: (b.x / fw).clamp(0.0, 1.0),
        y: (b.y / fh).clamp(0.0, 1.0),
        w: (b.w / fw).clamp(0.0, 1.0),
        h: (b.h / fh).clamp(0.0, 1.0),
    })
}

fn dims(img: &Image) -> Result<(usize, usize)> {
    match img.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(invalid(format!("expected a 3×H×W image, got {s:?}"))),
    }
}

pub fn channel_means(img: &Image) -> [f32; 3] {
    let plane = img.numel() / 3;
    let mut m = [0.0f32; 3];
    for (c, ch) in img.data().chunks(plane).enumerate() {
        m[c] = (ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32;
    }
    m
}

/// Samples the rectangle `[x0, x0+side_w) × [y0, y0+side_h)` onto an
/// `out_h×out_w` grid.
pub fn crop_region(
    img: &Image,
    x0: f64,
    y0: f64,
    side_w: f64,
    side_h: f64,
    out_w: usize,
    out_h: usize,
) -> Result<Image> {
    let (h, w) = dims(img)?;
    if !(side_w > 0.0 && side_h > 0.0) || out_w == 0 || out_h == 0 {
        return Err(invalid(format!("degenerate crop {side_w}×{side_h} → {out_w}×{out_h}")));
    }
    let mean = channel_means(img);
    let src = img.data();
    let coords = |o: f64, side: f64, n: usize| -> Vec<f64> {
        (0..n).map(|j| o + (j as f64 + 0.5) * side / n as f64 - 0.5).collect()
    };
    let (xs, ys) = (coords(x0, side_w, out_w), coords(y0, side_h, out_h));
    let mut out = vec![0.0f32; 3 * out_h * out_w];
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let tap = |yy: i64, xx: i64| -> f64 {
            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                mean[c] as f64
            } else {
                plane[yy as usize * w + xx as usize] as f64
            }
        };
        for (i, &sy) in ys.iter().enumerate() {
            let (fy, ty) = (sy.floor(), sy - sy.floor());
            for (j, &sx) in xs.iter().enumerate() {
                let (fx, tx) = (sx.floor(), sx - sx.floor());
                let (iy, ix) = (fy as i64, fx as i64);
                let mut v = tap(iy, ix) * (1.0 - ty) * (1.0 - tx);
                if tx > 0.0 {
                    v += tap(iy, ix + 1) * (1.0 - ty) * tx;
                }
                if ty > 0.0 {
                    v += tap(iy + 1, ix) * ty * (1.0 - tx);
                    if tx > 0.0 {
                        v += tap(iy + 1, ix + 1) * ty * tx;
                    }
                }
                out[(c * out_h + i) * out_w + j] = v as f32;
            }
        }
    }
    Ok(Tensor::new(&[3, out_h, out_w], out)?)
}

/// Pixels under `b` resampled onto a `size×size` patch.
pub fn crop_exact(img: &Image, b: &BBox, size: usize) -> Result<Image> {
    b.validate()?;
    crop_region(img, b.x, b.y, b.w, b.h, size, size)
}

/// Side of the square context region around `b`:
/// `sqrt((w+2p)(h+2p))` with `p = factor·(w+h)`.
pub fn context_side(b: &BBox, context_factor: f64) -> f64 {
    let p = context_factor * (b.w + b.h);
    ((b.w + 2.0 * p) * (b.h + 2.0 * p)).sqrt()
}

/// Square crop of side `side` centred on `(cx, cy)`.
pub fn crop_square(img: &Image, cx: f64, cy: f64, side: f64, out_size: usize) -> Result<Image> {
    crop_region(img, cx - side / 2.0, cy - side / 2.0, side, side, out_size, out_size)
}

pub fn crop_with_context(img: &Image, b: &BBox, out_size: usize, context_factor: f64) -> Result<Image> {
    b.validate()?;
    if out_size == 0 {
        return Err(invalid("out_size must be positive"));
    }
    let (cx, cy) = b.center();
    crop_square(img, cx, cy, context_side(b, context_factor), out_size)
}

/// Align-corners bilinear resize of the last two axes.
pub fn resize_bilinear(tile: &Tensor<f32>, target_w: usize, target_h: usize) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let v = g.constant(tile.clone());
    let r = g.resize_bilinear(v, target_h, target_w)?;
    Ok(g.value(r).clone())
}

/// Integer pixel region used when pasting onto `b`: rounded top-left corner
/// and extents rounded to the nearest integer, at least one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PasteRegion {
    pub x0: i64,
    pub y0: i64,
    pub w: usize,
    pub h: usize,
}

impl PasteRegion {
    pub fn of(b: &BBox) -> Self {
        Self {
            x0: b.x.round() as i64,
            y0: b.y.round() as i64,
            w: (b.w.round() as i64).max(1) as usize,
            h: (b.h.round() as i64).max(1) as usize,
        }
    }

    /// Overlap with an `fw×fh` image as `(x_start, x_end, y_start, y_end)` in
    /// image coordinates, or `None` if empty.
    pub fn clip(&self, fw: usize, fh: usize) -> Option<(usize, usize, usize, usize)> {
        let xs = self.x0.max(0);
        let xe = (self.x0 + self.w as i64).min(fw as i64);
        let ys = self.y0.max(0);
        let ye = (self.y0 + self.h as i64).min(fh as i64);
        (xs < xe && ys < ye).then_some((xs as usize, xe as usize, ys as usize, ye as usize))
    }
}

/// Adds `tile` over the rounded region of `b` and clamps the touched pixels
/// to `[0,1]`. Pixels outside the region are left bit-exact.
pub fn paste(img: &Image, tile: &Tensor<f32>, b: &BBox) -> Result<Image> {
    let mut out = img.clone();
    paste_into(&mut out, tile, b)?;
    Ok(out)
}

pub fn paste_into(img: &mut Image, tile: &Tensor<f32>, b: &BBox) -> Result<()> {
    b.validate()?;
    let (h, w) = dims(img)?;
    let r = PasteRegion::of(b);
    if tile.shape() != [3, r.h, r.w] {
        return Err(invalid(format!(
            "tile {:?} does not match box extent 3×{}×{}",
            tile.shape(),
            r.h,
            r.w
        )));
    }
    let Some((xs, xe, ys, ye)) = r.clip(w, h) else {
        return Ok(());
    };
    let td = tile.data();
    let d = img.data_mut();
    for c in 0..3 {
        for y in ys..ye {
            let ty = (y as i64 - r.y0) as usize;
            for x in xs..xe {
                let tx = (x as i64 - r.x0) as usize;
                let p = &mut d[(c * h + y) * w + x];
                *p = (*p + td[(c * r.h + ty) * r.w + tx]).clamp(0.0, 1.0);
            }
        }
    }
    Ok(())
}

/// Differentiable paste: adds `tile` (`[..,3,th,tw]`) onto `img`
/// (`[..,3,H,W]`, same leading axes) with its top-left at `(x0, y0)`, then
/// clamps to `[0,1]`. Parts of the tile outside the image are dropped.
pub fn paste_var(g: &mut Graph<f32>, img: Var, tile: Var, x0: i64, y0: i64) -> Result<Var> {
    let (si, st) = (g.shape(img).to_vec(), g.shape(tile).to_vec());
    let r = si.len();
    if r < 3 || st.len() != r || si[..r - 2] != st[..r - 2] {
        return Err(invalid(format!("paste_var: image {si:?} vs tile {st:?}")));
    }
    let (ih, iw, th, tw) = (si[r - 2], si[r - 1], st[r - 2], st[r - 1]);
    let region = PasteRegion { x0, y0, w: tw, h: th };
    let Some((xs, xe, ys, ye)) = region.clip(iw, ih) else {
        return Ok(img);
    };
    let mut t = tile;
    if xe - xs != tw {
        t = g.slice(t, r - 1, (xs as i64 - x0) as usize, xe - xs)?;
    }
    if ye - ys != th {
        t = g.slice(t, r - 2, (ys as i64 - y0) as usize, ye - ys)?;
    }
    let t = g.pad2d(t, ys, ih - ye, xs, iw - xe)?;
    let sum = g.add(img, t)?;
    Ok(g.clamp(sum, 0.0, 1.0))
}
