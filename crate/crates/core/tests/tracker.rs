use numcore::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tueforge::geometry::{context_side, BBox};
use tueforge::synthvideo::{generate_dataset, SynthConfig};
use tueforge::tracker::{
    bce_loss, evaluate, gt_response, init_tracker, make_pair, track_sequence, train_tracker, Arch, PairConfig,
    TrackConfig, TrackerParams, VictimConfig, BCE_CLAMP,
};

fn bce_oracle(p: &[f64], y: &[f64], w: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&p, &y) in p.iter().zip(y) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        if y > 0.5 {
            num += w * p.ln();
            den += w;
        } else {
            num += (1.0 - p).ln();
            den += 1.0;
        }
    }
    -num / den
}

fn bce(p: &[f32], y: &[f32], w: f64) -> f64 {
    let mut g = Graph::new();
    let r = g.constant(Tensor::new(&[p.len()], p.to_vec()).unwrap());
    let l = bce_loss(&mut g, r, &Tensor::new(&[y.len()], y.to_vec()).unwrap(), w).unwrap();
    g.value(l).item() as f64
}

#[test]
fn bce_uniform_half_is_ln_two() {
    let y = [1.0, 0.0, 0.0, 1.0, 0.0];
    assert!((bce(&[0.5; 5], &y, 1.5) - 2f64.ln()).abs() < 1e-6);
}

#[test]
fn bce_perfect_prediction_is_near_zero() {
    let y = [1.0, 0.0, 0.0, 1.0];
    assert!(bce(&y, &y, 1.0) < 1e-6);
}

#[test]
fn bce_rejects_out_of_range_response() {
    let mut g = Graph::new();
    let r = g.constant(Tensor::new(&[2], vec![1.5f32, 0.2]).unwrap());
    assert!(bce_loss(&mut g, r, &Tensor::new(&[2], vec![1.0f32, 0.0]).unwrap(), 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bce_matches_loop_oracle(ps in prop::collection::vec(0.0f32..=1.0, 2..40), bits in prop::collection::vec(any::<bool>(), 40), w in 0.1f64..20.0) {
        let y: Vec<f32> = bits[..ps.len()].iter().map(|&b| b as u8 as f32).collect();
        let p64: Vec<f64> = ps.iter().map(|&v| v as f64).collect();
        let y64: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let want = bce_oracle(&p64, &y64, w);
        prop_assert!((bce(&ps, &y, w) - want).abs() < 1e-6 * want.max(1.0));
    }

    #[test]
    fn response_lies_in_unit_interval(seed in 0u64..20, attn in any::<bool>()) {
        let arch = if attn { Arch::AttnMini } else { Arch::ConvSiamese };
        let tp = init_tracker(arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = |s: usize| Tensor::new(&[3, s, s], (0..3 * s * s).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let r = tp.response_map(&img(32), &img(64)).unwrap();
        prop_assert!(r.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn iou_of_half_overlapping_boxes() {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
    let b = BBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
    assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-12);
}

#[test]
fn evaluate_extremes() {
    let gt: Vec<BBox> = (0..6).map(|k| BBox::new(k as f64, 10.0, 12.0, 12.0).unwrap()).collect();
    let m = evaluate(&gt, &gt, 64).unwrap();
    assert_eq!((m.ao, m.sr050, m.sr075, m.prec), (1.0, 1.0, 1.0, 1.0));
    assert!((m.auc - 20.0 / 21.0).abs() < 1e-12);
    let mut far = gt.clone();
    for b in &mut far[1..] {
        b.y = 40.0;
    }
    let m = evaluate(&far, &gt, 64).unwrap();
    assert_eq!((m.ao, m.sr050, m.auc, m.prec), (0.0, 0.0, 0.0, 0.0));
    assert!(evaluate(&gt[..3], &gt, 64).is_err());
}

#[test]
fn evaluate_averages_per_frame_iou() {
    let gt = vec![BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(); 3];
    let pred = vec![gt[0], BBox::new(1.0, 1.0, 2.0, 2.0).unwrap(), gt[0]];
    let m = evaluate(&pred, &gt, 64).unwrap();
    assert!((m.ao - (1.0 / 7.0 + 1.0) / 2.0).abs() < 1e-12);
    assert_eq!(m.sr050, 0.5);
}

#[test]
fn label_radius_cases() {
    let tp = init_tracker(Arch::ConvSiamese, 0);
    let n = tp.response.size;
    let count = |l: &Tensor<f32>| l.data().iter().filter(|&&v| v == 1.0).count();
    let c = tp.response.pixel_of((n / 2) as f64);
    assert_eq!(count(&gt_response((c, c), 64, &tp.response, 2.0).unwrap()), 13);
    assert_eq!(count(&gt_response((c, c), 64, &tp.response, 0.0).unwrap()), 1);
    let corner = tp.response.pixel_of(0.0);
    let l = gt_response((corner, corner), 64, &tp.response, 2.0).unwrap();
    assert_eq!(count(&l), 6);
    assert_eq!(l.data()[0], 1.0);
    assert!(gt_response((64.0, 10.0), 64, &tp.response, 2.0).is_err());
}

fn patches(seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = |s: usize| Tensor::new(&[1, 3, s, s], (0..3 * s * s).map(|_| rng.gen::<f32>()).collect()).unwrap();
    (img(32), img(64))
}

fn weighted_response(tp: &TrackerParams, z: &Tensor<f32>, x: &Tensor<f32>, w: &Tensor<f32>) -> (f64, Tensor<f32>) {
    let mut g = Graph::new();
    let v = tp.params.bind_frozen(&mut g);
    let zv = g.param(z.clone());
    let xv = g.constant(x.clone());
    let r = tp.response(&mut g, &v, zv, xv).unwrap();
    let wv = g.constant(w.clone());
    let s = g.mul(r, wv).unwrap();
    let s = g.sum(s);
    let grads = g.backward(s).unwrap();
    (g.value(s).item() as f64, grads.get(zv))
}

#[test]
fn response_gradient_wrt_template_matches_finite_differences() {
    for arch in [Arch::ConvSiamese, Arch::AttnMini] {
        let tp = init_tracker(arch, 4);
        let (z, x) = patches(9);
        let n = tp.response.size;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::new(&[1, 1, n, n], (0..n * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let (_, grad) = weighted_response(&tp, &z, &x, &w);
        let mut idx: Vec<usize> = (0..grad.numel()).collect();
        idx.sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()));
        let h = 1e-2f32;
        for &k in &idx[..8] {
            let mut zp = z.clone();
            zp.data_mut()[k] += h;
            let mut zm = z.clone();
            zm.data_mut()[k] -= h;
            let fd = (weighted_response(&tp, &zp, &x, &w).0 - weighted_response(&tp, &zm, &x, &w).0) / (2.0 * h as f64);
            let an = grad.data()[k] as f64;
            assert!((fd - an).abs() <= 0.05 * an.abs() + 1e-4, "{arch}: fd {fd} vs analytic {an}");
        }
    }
}

#[test]
fn same_seed_same_weights() {
    for arch in [Arch::ConvSiamese, Arch::AttnMini] {
        assert_eq!(init_tracker(arch, 11), init_tracker(arch, 11));
        assert_ne!(init_tracker(arch, 11), init_tracker(arch, 12));
    }
}

#[test]
fn checkpoint_round_trip() {
    let tp = init_tracker(Arch::AttnMini, 2);
    let dir = tempfile::tempdir().unwrap();
    tp.save(dir.path()).unwrap();
    assert_eq!(TrackerParams::load(dir.path()).unwrap(), tp);
}

#[test]
fn one_epoch_on_one_video_lowers_the_loss() {
    let ds = generate_dataset(&SynthConfig {
        n_videos: 1,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = VictimConfig {
        epochs: 1,
        batch: 8,
        pairs_per_video: 64,
        ..VictimConfig::default()
    };
    let (_, log) = train_tracker(&ds, Arch::ConvSiamese, &cfg, 0).unwrap();
    let head = log.step_loss[..2].iter().sum::<f64>() / 2.0;
    let tail = log.step_loss[log.step_loss.len() - 2..].iter().sum::<f64>() / 2.0;
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn pair_boxes_match_patch_geometry() {
    let ds = generate_dataset(&SynthConfig {
        n_videos: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let tp = init_tracker(Arch::ConvSiamese, 0);
    let cfg = PairConfig {
        shift: 0.0,
        scale_jitter: 0.0,
        ..PairConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = make_pair(0, &ds.videos[0], 0, 3, &tp.crop, &cfg, &mut rng).unwrap();
    assert_eq!(p.z.shape(), &[3, 32, 32]);
    assert_eq!(p.x.shape(), &[3, 64, 64]);
    assert_eq!(p.x_box.center(), (32.0, 32.0));
    assert_eq!(p.z_box.center(), (16.0, 16.0));
    let bj = ds.videos[0].boxes[3];
    let side = 2.0 * context_side(&bj, tp.crop.context);
    assert!((p.x_box.w - bj.w * 64.0 / side).abs() < 1e-9);
}

#[test]
fn predictions_start_at_init_and_stay_in_frame() {
    let ds = generate_dataset(&SynthConfig {
        n_videos: 3,
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap();
    let tp = init_tracker(Arch::ConvSiamese, 1);
    for v in &ds.videos {
        let pred = track_sequence(&tp, &v.frames, &v.boxes[0], &TrackConfig::default()).unwrap();
        assert_eq!(pred.len(), v.frames.len());
        assert_eq!(pred[0], v.boxes[0]);
        for b in &pred {
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 64.0 + 1e-9 && b.y + b.h <= 64.0 + 1e-9);
        }
    }
}

#[test]
fn untrained_tracker_is_near_chance() {
    let ds = generate_dataset(&SynthConfig {
        n_videos: 20,
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let tp = init_tracker(Arch::ConvSiamese, 0);
    let m = tueforge::tracker::evaluate_dataset(&tp, &ds, &TrackConfig::default()).unwrap();
    assert!(m.ao < 0.3, "untrained AO {}", m.ao);
}
