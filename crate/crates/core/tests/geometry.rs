use numcore::Tensor;
use proptest::prelude::*;
use tueforge::geometry::{
    crop_exact, crop_region, normalize_bbox, paste, resize_bilinear, BBox, Budget, Image, PasteRegion,
};

fn ramp(h: usize, w: usize) -> Image {
    let d = (0..3 * h * w).map(|k| ((k * 37) % 251) as f32 / 251.0).collect();
    Tensor::new(&[3, h, w], d).unwrap()
}

fn at(img: &Image, c: usize, y: usize, x: usize) -> f32 {
    let s = img.shape();
    img.data()[(c * s[1] + y) * s[2] + x]
}

fn bilinear_oracle(src: &[f64], sh: usize, sw: usize, th: usize, tw: usize) -> Vec<f64> {
    let scale = |n: usize, m: usize| if m > 1 { (n - 1) as f64 / (m - 1) as f64 } else { 0.0 };
    let (ry, rx) = (scale(sh, th), scale(sw, tw));
    let mut out = Vec::new();
    for i in 0..th {
        for j in 0..tw {
            let (y, x) = (i as f64 * ry, j as f64 * rx);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(sh - 1), (x0 + 1).min(sw - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let v = |a: usize, b: usize| src[a * sw + b];
            out.push(
                v(y0, x0) * (1.0 - fy) * (1.0 - fx) + v(y0, x1) * (1.0 - fy) * fx + v(y1, x0) * fy * (1.0 - fx) + v(y1, x1) * fy * fx,
            );
        }
    }
    out
}

#[test]
fn two_by_two_to_three_by_three() {
    let t = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let r = resize_bilinear(&t, 3, 3).unwrap();
    let want = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
    for (a, b) in r.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn single_pixel_tile_is_constant() {
    let t = Tensor::new(&[1, 1, 1], vec![0.25]).unwrap();
    let r = resize_bilinear(&t, 2, 2).unwrap();
    assert_eq!(r.data(), &[0.25; 4]);
}

#[test]
fn integer_box_paste_then_crop_returns_tile() {
    let img = Tensor::new(&[3, 40, 40], vec![0.5; 4800]).unwrap();
    let b = BBox::new(10.0, 12.0, 8.0, 6.0).unwrap();
    let tile = Tensor::new(&[3, 6, 8], (0..144).map(|k| (k as f32 / 144.0 - 0.5) * 0.1).collect()).unwrap();
    let out = paste(&img, &tile, &b).unwrap();
    let back = crop_region(&out, 10.0, 12.0, 8.0, 6.0, 8, 6).unwrap();
    for (a, t) in back.data().iter().zip(tile.data()) {
        assert!((a - (0.5 + t)).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resize_matches_oracle(sh in 1usize..6, sw in 1usize..6, th in 1usize..9, tw in 1usize..9, seed in 0u64..1000) {
        let n = sh * sw;
        let src: Vec<f64> = (0..n).map(|k| ((k as u64 * 7919 + seed * 31) % 97) as f64 / 97.0).collect();
        let t = Tensor::new(&[1, sh, sw], src.iter().map(|&v| v as f32).collect()).unwrap();
        let r = resize_bilinear(&t, tw, th).unwrap();
        let want = bilinear_oracle(&src, sh, sw, th, tw);
        for (a, b) in r.data().iter().zip(want) {
            prop_assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn resize_identity(h in 1usize..8, w in 1usize..8) {
        let t = ramp(h, w);
        let r = resize_bilinear(&t, w, h).unwrap();
        prop_assert_eq!(r.data(), t.data());
    }

    #[test]
    fn normalize_round_trip(x in 0.0f64..40.0, y in 0.0f64..40.0, w in 1.0f64..24.0, h in 1.0f64..24.0) {
        let b = BBox::new(x, y, w, h).unwrap();
        let n = normalize_bbox(&b, 64, 64).unwrap();
        prop_assert!(n.is_valid());
        let back = n.denormalize(64, 64);
        for (a, c) in back.to_array().iter().zip(b.to_array()) {
            prop_assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn paste_is_local(x in -10.0f64..60.0, y in -10.0f64..60.0, w in 1.0f64..20.0, h in 1.0f64..20.0, v in -0.2f32..0.2) {
        let img = ramp(48, 48);
        let b = BBox::new(x, y, w, h).unwrap();
        let r = PasteRegion::of(&b);
        let tile = Tensor::new(&[3, r.h, r.w], vec![v; 3 * r.h * r.w]).unwrap();
        let out = paste(&img, &tile, &b).unwrap();
        for c in 0..3 {
            for yy in 0..48 {
                for xx in 0..48 {
                    let inside = (xx as i64) >= r.x0 && (xx as i64) < r.x0 + r.w as i64
                        && (yy as i64) >= r.y0 && (yy as i64) < r.y0 + r.h as i64;
                    let (a, o) = (at(&out, c, yy, xx), at(&img, c, yy, xx));
                    if inside {
                        prop_assert_eq!(a, (o + v).clamp(0.0, 1.0));
                    } else {
                        prop_assert_eq!(a, o);
                    }
                }
            }
        }
    }

    #[test]
    fn integer_crop_copies_pixels(x in 0usize..30, y in 0usize..30, s in 1usize..18) {
        let img = ramp(48, 48);
        let b = BBox::new(x as f64, y as f64, s as f64, s as f64).unwrap();
        let c = crop_exact(&img, &b, s).unwrap();
        for ch in 0..3 {
            for i in 0..s {
                for j in 0..s {
                    prop_assert_eq!(at(&c, ch, i, j), at(&img, ch, y + i, x + j));
                }
            }
        }
    }
}

#[test]
fn degenerate_inputs_are_rejected() {
    assert!(BBox::new(0.0, 0.0, 0.0, 4.0).is_err());
    assert!(BBox::new(f64::NAN, 0.0, 1.0, 4.0).is_err());
    assert!(Budget::new(0.0).is_err());
    assert!(normalize_bbox(&BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), 0, 4).is_err());
    let img = ramp(8, 8);
    let tile = Tensor::new(&[3, 2, 2], vec![0.0; 12]).unwrap();
    assert!(paste(&img, &tile, &BBox::new(0.0, 0.0, 3.0, 3.0).unwrap()).is_err());
}
