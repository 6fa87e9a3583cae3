use std::collections::HashMap;
use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tueforge::synthvideo::{generate_dataset, load_dataset, sample_pair, save_dataset, Provenance, Split, SynthConfig};
use tueforge::Error;

fn cfg(seed: u64, n_videos: usize, n_frames: usize) -> SynthConfig {
    SynthConfig {
        n_videos,
        n_frames,
        seed,
        ..SynthConfig::default()
    }
}

fn file_bytes(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(&generate_dataset(&cfg(7, 2, 5)).unwrap(), a.path()).unwrap();
    save_dataset(&generate_dataset(&cfg(7, 2, 5)).unwrap(), b.path()).unwrap();
    assert_eq!(file_bytes(a.path()), file_bytes(b.path()));
    let c = tempfile::tempdir().unwrap();
    save_dataset(&generate_dataset(&cfg(8, 2, 5)).unwrap(), c.path()).unwrap();
    assert_ne!(file_bytes(a.path()), file_bytes(c.path()));
}

#[test]
fn save_load_round_trip_is_exact() {
    let ds = generate_dataset(&cfg(3, 3, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest.provenance, Provenance::Clean);
    assert_eq!(back.videos.len(), ds.videos.len());
    for (a, b) in ds.videos.iter().zip(&back.videos) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.boxes, b.boxes);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.data(), fb.data());
        }
    }
}

#[test]
fn provenance_survives_disk() {
    let ds = generate_dataset(&cfg(3, 1, 3)).unwrap();
    let frames = ds.videos.iter().map(|v| v.frames.clone()).collect();
    let p = ds.with_frames(frames, Provenance::TueProtected).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&p, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.provenance(), Provenance::TueProtected);
    assert!(back.require_clean().is_err());
}

#[test]
fn missing_box_file_names_the_video() {
    let ds = generate_dataset(&cfg(3, 2, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let id = ds.videos[1].id.clone();
    fs::remove_file(dir.path().join(&id).join("boxes.json")).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::Video { id: got, .. }) => assert_eq!(got, id),
        other => panic!("expected a video error, got {other:?}"),
    }
}

#[test]
fn boxes_stay_in_frame_and_move_smoothly() {
    let ds = generate_dataset(&cfg(11, 40, 20)).unwrap();
    let n = ds.frame_size() as f64;
    let mut ious = Vec::new();
    for v in &ds.videos {
        for b in &v.boxes {
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= n + 1e-9 && b.y + b.h <= n + 1e-9, "{b:?}");
        }
        ious.extend(v.boxes.windows(2).map(|w| w[0].iou(&w[1])));
    }
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    assert!(mean > 0.3, "mean consecutive IoU {mean}");
}

#[test]
fn splits_do_not_share_videos() {
    let train = generate_dataset(&cfg(1, 5, 3)).unwrap();
    let test = generate_dataset(&SynthConfig {
        split: Split::Test,
        ..cfg(2, 5, 3)
    })
    .unwrap();
    for (a, b) in train.videos.iter().zip(&test.videos) {
        assert_ne!(a.id, b.id);
        assert_ne!(a.frames[0].data(), b.frames[0].data());
    }
}

#[test]
fn pair_sampling_is_uniform() {
    let (n, gap, draws) = (6usize, 2usize, 100_000usize);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for _ in 0..draws {
        let (i, j) = sample_pair(n, gap, &mut rng).unwrap();
        assert!(i != j && i.abs_diff(j) <= gap);
        *counts.entry((i, j)).or_default() += 1;
    }
    let support: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && i.abs_diff(j) <= gap)
        .collect();
    assert_eq!(counts.len(), support.len());
    let expected = draws as f64 / support.len() as f64;
    let chi2: f64 = support
        .iter()
        .map(|k| {
            let o = *counts.get(k).unwrap_or(&0) as f64;
            (o - expected).powi(2) / expected
        })
        .sum();
    // 17 degrees of freedom, 0.999 quantile ≈ 40.8
    assert!(chi2 < 40.8, "chi2 {chi2}");
}

#[test]
fn unit_gap_gives_neighbours() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let (i, j) = sample_pair(2, 1, &mut rng).unwrap();
        assert!((i, j) == (0, 1) || (i, j) == (1, 0));
    }
}
