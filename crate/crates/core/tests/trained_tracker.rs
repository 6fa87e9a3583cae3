use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tueforge::geometry::{context_side, crop_square, crop_with_context};
use tueforge::synthvideo::{generate_dataset, Split, SynthConfig};
use tueforge::tracker::{
    evaluate_dataset, smooth_curve, train_tracker, Arch, TrackConfig, TrackerParams, TrainLog, VictimConfig,
};

fn trained() -> &'static (TrackerParams, TrainLog) {
    static CELL: OnceLock<(TrackerParams, TrainLog)> = OnceLock::new();
    CELL.get_or_init(|| {
        let ds = generate_dataset(&SynthConfig {
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        train_tracker(&ds, Arch::ConvSiamese, &VictimConfig::default(), 0).unwrap()
    })
}

fn argmax(map: &[f32], n: usize) -> (i64, i64) {
    let k = map
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap();
    ((k % n) as i64, (k / n) as i64)
}

#[test]
fn shifting_the_target_by_one_stride_moves_the_peak_by_one_cell() {
    let (tp, _) = trained();
    let ds = generate_dataset(&SynthConfig {
        n_videos: 100,
        seed: 2,
        split: Split::Test,
        ..SynthConfig::default()
    })
    .unwrap();
    let n = tp.response.size;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut hits = 0;
    for v in &ds.videos {
        let b = v.boxes[0];
        let z = crop_with_context(&v.frames[0], &b, tp.crop.template, tp.crop.context).unwrap();
        let side = 2.0 * context_side(&b, tp.crop.context);
        let px = side / tp.crop.search as f64;
        let (cx, cy) = b.center();
        let (du, dv) = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)][rng.gen_range(0..4)];
        let step = tp.response.stride * px;
        let x0 = crop_square(&v.frames[0], cx, cy, side, tp.crop.search).unwrap();
        let x1 = crop_square(&v.frames[0], cx - du as f64 * step, cy - dv as f64 * step, side, tp.crop.search).unwrap();
        let (a, b) = (tp.response_map(&z, &x0).unwrap(), tp.response_map(&z, &x1).unwrap());
        let (p0, p1) = (argmax(a.data(), n), argmax(b.data(), n));
        if (p1.0 - p0.0, p1.1 - p0.1) == (du, dv) {
            hits += 1;
        }
    }
    assert!(hits >= 80, "{hits}/100 probes moved by one cell");
}

#[test]
fn static_target_is_tracked() {
    let (tp, _) = trained();
    let ds = generate_dataset(&SynthConfig {
        n_videos: 1,
        seed: 4,
        split: Split::Test,
        accel: 0.0,
        scale_accel: 0.0,
        ..SynthConfig::default()
    })
    .unwrap();
    assert!(ds.videos[0].boxes.windows(2).all(|w| w[0] == w[1]));
    let m = evaluate_dataset(tp, &ds, &TrackConfig::default()).unwrap();
    assert!(m.ao >= 0.8, "static AO {}", m.ao);
}

#[test]
fn smoothed_clean_loss_decreases() {
    let (_, log) = trained();
    let s = smooth_curve(&log.epoch_loss, 5);
    for w in s.windows(2) {
        assert!(w[1] < w[0], "smoothed curve rises: {s:?}");
    }
}
