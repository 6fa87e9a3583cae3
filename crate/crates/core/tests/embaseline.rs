use numcore::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tueforge::embaseline::{
    em_protect_dataset, load_tiles, optimize_video_noise, pgd_step, save_tiles, tile_loss, video_pairs, EmConfig,
    NoiseTile, TILE_SIZE,
};
use tueforge::geometry::{context_side, Budget, PasteRegion};
use tueforge::synthvideo::{generate_dataset, Provenance, SynthConfig};
use tueforge::tracker::{train_tracker, Arch, VictimConfig};

const SIGMA: f32 = 8.0 / 255.0;

fn one(v: f32) -> Tensor<f32> {
    Tensor::new(&[1], vec![v]).unwrap()
}

#[test]
fn pgd_examples() {
    let b = Budget::default();
    let a = 2.0 / 255.0;
    let d = pgd_step(&one(0.0), &one(0.3), a, b).unwrap();
    assert!((d.data()[0] + 2.0 / 255.0).abs() < 1e-7);
    let d = pgd_step(&one(7.0 / 255.0), &one(-1.0), a, b).unwrap();
    assert!((d.data()[0] - SIGMA).abs() < 1e-7);
    let d = pgd_step(&one(0.01), &one(0.0), a, b).unwrap();
    assert_eq!(d.data()[0], 0.01);
    assert!(pgd_step(&one(0.0), &one(f32::NAN), a, b).is_err());
    assert!(pgd_step(&one(0.0), &Tensor::zeros(&[2]), a, b).is_err());
}

proptest! {
    #[test]
    fn pgd_never_leaves_the_budget(grads in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 8), 1..40), alpha in 1e-3f64..0.1) {
        let b = Budget::default();
        let mut d = Tensor::zeros(&[8]);
        for g in grads {
            d = pgd_step(&d, &Tensor::new(&[8], g).unwrap(), alpha, b).unwrap();
            prop_assert!(d.data().iter().all(|v| v.abs() <= SIGMA));
        }
    }
}

fn small(n: usize, seed: u64) -> tueforge::synthvideo::Dataset {
    generate_dataset(&SynthConfig {
        n_videos: n,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn inner_loop_lowers_the_tile_loss() {
    let ds = small(40, 1);
    let (tp, _) = train_tracker(
        &ds,
        Arch::ConvSiamese,
        &VictimConfig {
            epochs: 3,
            ..VictimConfig::default()
        },
        0,
    )
    .unwrap();
    let cfg = EmConfig::default();
    let mut better = 0;
    for (k, v) in ds.videos.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let probe = video_pairs(&tp, v, cfg.pairs_per_step, &cfg.pairs, &mut rng).unwrap();
        let init = NoiseTile::zeros(Budget::default());
        let before = tile_loss(&tp, &probe, &init, false).unwrap();
        let tile = optimize_video_noise(&tp, v, &init, &cfg, &mut rng).unwrap();
        assert!(tile.max_abs() <= SIGMA);
        assert!(tile.delta_c.data().iter().all(|&x| x == 0.0));
        if tile_loss(&tp, &probe, &tile, false).unwrap() <= before {
            better += 1;
        }
    }
    assert!(better * 100 >= 95 * ds.videos.len(), "{better}/{} videos improved", ds.videos.len());
}

fn check_protected(with_context: bool) {
    let ds = small(4, 3);
    let cfg = EmConfig {
        outer_epochs: 1,
        inner_steps: 3,
        with_context,
        ..EmConfig::default()
    };
    let out = em_protect_dataset(&ds, &cfg).unwrap();
    assert_eq!(out.dataset.provenance(), Provenance::EmProtected);
    assert_eq!(out.tiles.len(), 4);
    for (id, t) in &out.tiles {
        assert!(t.max_abs() <= SIGMA, "{id}");
        assert_eq!(t.delta_t.shape(), &[3, TILE_SIZE, TILE_SIZE]);
        if !with_context {
            assert!(t.delta_c.data().iter().all(|&x| x == 0.0));
        }
    }
    let mut touched = false;
    for (clean, prot) in ds.videos.iter().zip(&out.dataset.videos) {
        assert_eq!(clean.boxes, prot.boxes);
        for ((a, b), bb) in clean.frames.iter().zip(&prot.frames).zip(&clean.boxes) {
            let r = if with_context {
                let side = context_side(bb, 0.25);
                let (cx, cy) = bb.center();
                let n = side.round() as usize;
                PasteRegion {
                    x0: (cx - side / 2.0).round() as i64,
                    y0: (cy - side / 2.0).round() as i64,
                    w: n,
                    h: n,
                }
            } else {
                PasteRegion::of(bb)
            };
            for c in 0..3 {
                for y in 0..64 {
                    for x in 0..64 {
                        let k = (c * 64 + y) * 64 + x;
                        let d = (a.data()[k] - b.data()[k]).abs();
                        let inside = (x as i64) >= r.x0 && (x as i64) < r.x0 + r.w as i64 && (y as i64) >= r.y0 && (y as i64) < r.y0 + r.h as i64;
                        if inside {
                            assert!(d <= SIGMA + 1.0 / 255.0 + 1e-6, "{d}");
                            touched |= d > 0.0;
                        } else {
                            assert_eq!(d, 0.0);
                        }
                    }
                }
            }
        }
    }
    assert!(touched);
}

#[test]
fn protected_frames_change_only_near_the_target() {
    check_protected(false);
}

#[test]
fn context_variant_stays_inside_the_context_square() {
    check_protected(true);
}

#[test]
fn tiles_round_trip() {
    let ds = small(3, 4);
    let cfg = EmConfig {
        outer_epochs: 1,
        inner_steps: 2,
        with_context: true,
        ..EmConfig::default()
    };
    let out = em_protect_dataset(&ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bytes = save_tiles(dir.path(), &out.tiles, true).unwrap();
    let on_disk: u64 = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().metadata().unwrap().len()).sum();
    assert_eq!(bytes, on_disk);
    let (back, ctx) = load_tiles(dir.path()).unwrap();
    assert!(ctx);
    assert_eq!(back, out.tiles);
}

#[test]
fn rejects_protected_input_and_bad_config() {
    let ds = small(2, 5);
    let p = ds
        .with_frames(ds.videos.iter().map(|v| v.frames.clone()).collect(), Provenance::TueProtected)
        .unwrap();
    assert!(em_protect_dataset(&p, &EmConfig::default()).is_err());
    let bad = EmConfig {
        inner_steps: 0,
        ..EmConfig::default()
    };
    assert!(em_protect_dataset(&ds, &bad).is_err());
}
