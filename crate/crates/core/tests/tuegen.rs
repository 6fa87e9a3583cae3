use numcore::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tueforge::geometry::{crop_exact, normalize_bbox, BBox, NormBBox, PasteRegion};
use tueforge::pipeline::{train_generator, TrainConfig};
use tueforge::synthvideo::{generate_dataset, SynthConfig};
use tueforge::tracker::{init_tracker, Arch};
use tueforge::tuegen::{info_nce, init_generator, make_tue_pair, tcl_loss, GeneratorConfig, GeneratorParams, TCL_TAU};

const SIGMA: f32 = 8.0 / 255.0;

fn randomized(seed: u64, amp: f32) -> GeneratorParams {
    let mut gen = init_generator(&GeneratorConfig::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = gen.params.names().map(String::from).collect();
    for n in names {
        for v in gen.params.get_mut(&n).unwrap().data_mut() {
            *v = rng.gen_range(-amp..amp);
        }
    }
    gen
}

fn random_images(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Tensor<f32> {
    Tensor::new(&[n, 3, s, s], (0..n * 3 * s * s).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn random_cond(rng: &mut ChaCha8Rng) -> NormBBox {
    let (w, h) = (rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5));
    NormBBox {
        x: rng.gen_range(0.0..1.0 - w),
        y: rng.gen_range(0.0..1.0 - h),
        w,
        h,
    }
}

fn nce(a: &[Vec<f32>], p: &[Vec<f32>], q: &[Vec<f32>], mask: &[f32], tau: f64) -> f64 {
    let n = a.len();
    let m = q.len();
    let c = a[0].len();
    let mut g = Graph::new();
    let t = |rows: &[Vec<f32>]| Tensor::new(&[rows.len(), c], rows.concat()).unwrap();
    let (av, pv, qv) = (g.constant(t(a)), g.constant(t(p)), g.constant(t(q)));
    let l = info_nce(&mut g, av, pv, qv, &Tensor::new(&[n, m], mask.to_vec()).unwrap(), tau).unwrap();
    g.value(l).item() as f64
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn nce_oracle(a: &[Vec<f32>], p: &[Vec<f32>], q: &[Vec<f32>], mask: &[f32], tau: f64) -> f64 {
    let m = q.len();
    let mut total = 0.0;
    for k in 0..a.len() {
        let pos = (cos(&a[k], &p[k]) / tau).exp();
        let mut neg = 0.0;
        for j in 0..m {
            if mask[k * m + j] > 0.5 {
                neg += (cos(&a[k], &q[j]) / tau).exp();
            }
        }
        total += -(pos / (pos + neg)).ln();
    }
    total / a.len() as f64
}

#[test]
fn exchangeable_similarities_give_ln_one_plus_k() {
    let v = vec![vec![1.0f32, 0.0, 0.0]];
    let q = vec![vec![1.0f32, 0.0, 0.0]; 3];
    assert!((nce(&v, &v, &q, &[1.0; 3], TCL_TAU) - 4f64.ln()).abs() < 1e-6);
}

#[test]
fn separated_negatives_give_closed_form() {
    let a = vec![vec![1.0f32, 0.0]];
    let q = vec![vec![-1.0f32, 0.0]; 3];
    let want = -(5f64.exp() / (5f64.exp() + 3.0 * (-5f64).exp())).ln();
    assert!((want - 1.36e-4).abs() < 1e-6);
    assert!((nce(&a, &a, &q, &[1.0; 3], 0.2) - want).abs() < 1e-6);
}

#[test]
fn info_nce_rejects_short_negatives_and_bad_tau() {
    let a = vec![vec![1.0f32, 0.0]];
    let mut g = Graph::new();
    let t = |rows: &[Vec<f32>]| Tensor::new(&[rows.len(), 2], rows.concat()).unwrap();
    let (av, qv) = (g.constant(t(&a)), g.constant(t(&[vec![0.0, 1.0], vec![1.0, 1.0]])));
    let one = Tensor::new(&[1, 2], vec![1.0f32, 0.0]).unwrap();
    assert!(info_nce(&mut g, av, av, qv, &one, 0.2).is_err());
    let two = Tensor::new(&[1, 2], vec![1.0f32, 1.0]).unwrap();
    assert!(info_nce(&mut g, av, av, qv, &two, 0.0).is_err());
    assert!(info_nce(&mut g, av, av, qv, &two, 0.2).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn info_nce_matches_loop_oracle(seed in 0u64..10_000, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = |k: usize| -> Vec<Vec<f32>> {
            (0..k).map(|_| (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect()
        };
        let (a, p, q) = (rows(4), rows(4), rows(8));
        let mut mask = vec![0.0f32; 32];
        for k in 0..4 {
            for j in 0..8 {
                if j % 4 != (k + 1) % 4 {
                    mask[k * 8 + j] = 1.0;
                }
            }
        }
        let got = nce(&a, &p, &q, &mask, tau);
        let want = nce_oracle(&a, &p, &q, &mask, tau);
        prop_assert!((got - want).abs() < 1e-6 * want.max(1.0), "{} vs {}", got, want);
        prop_assert!(got >= 0.0);
    }
}

#[test]
fn generator_output_never_reaches_the_budget() {
    let mut count = 0usize;
    let mut peak = 0.0f32;
    for seed in 0..4u64 {
        let gen = randomized(seed, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        while count < (seed as usize + 1) * 250_000 {
            let x = random_images(&mut rng, 8, 32);
            let conds: Vec<NormBBox> = (0..8).map(|_| random_cond(&mut rng)).collect();
            let d = gen.generate(&x, &conds).unwrap();
            for &v in d.data() {
                assert!(v.abs() < SIGMA, "{v}");
                peak = peak.max(v.abs());
            }
            count += d.numel();
        }
    }
    assert!(count >= 1_000_000);
    assert!(peak > 0.99 * SIGMA, "outputs never approach the bound: {peak}");
}

#[test]
fn output_depends_on_the_condition() {
    let gen = randomized(3, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let x = random_images(&mut rng, 1, 32);
        let c = random_cond(&mut rng);
        let mut c2 = c;
        c2.x += 1e-2;
        let (a, b) = (gen.generate(&x, &[c]).unwrap(), gen.generate(&x, &[c2]).unwrap());
        let diff: f64 = a.data().iter().zip(b.data()).map(|(p, q)| ((p - q) as f64).abs()).sum();
        assert!(diff / 1e-2 > 1e-3, "finite-difference sensitivity {}", diff / 1e-2);
    }
}

#[test]
fn trained_generator_responds_to_the_box() {
    let ds = generate_dataset(&SynthConfig {
        n_videos: 16,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch: 4,
        lr_s: 1e-3,
        ..TrainConfig::default()
    };
    let (gen, _, _) = train_generator(&ds, &cfg).unwrap();
    let v = &ds.videos[0];
    let e = crop_exact(&v.frames[0], &v.boxes[0], 32).unwrap();
    let x = Tensor::stack(&[e]).unwrap();
    let c1 = normalize_bbox(&v.boxes[0], 64, 64).unwrap();
    let c2 = NormBBox { x: 0.7, y: 0.1, w: 0.2, h: 0.25 };
    let (a, b) = (gen.generate(&x, &[c1]).unwrap(), gen.generate(&x, &[c2]).unwrap());
    let l2: f64 = a.data().iter().zip(b.data()).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>().sqrt();
    assert!(l2 > 0.0);
}

fn image(rng: &mut ChaCha8Rng, s: usize) -> Tensor<f32> {
    Tensor::new(&[3, s, s], (0..3 * s * s).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

#[test]
fn zero_generator_is_identity() {
    let gen = init_generator(&GeneratorConfig::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (z, x) = (image(&mut rng, 32), image(&mut rng, 64));
    let bj = BBox::new(20.3, 18.7, 21.0, 25.2).unwrap();
    let nb = NormBBox { x: 0.3, y: 0.3, w: 0.2, h: 0.2 };
    let p = make_tue_pair(&gen, &z, &x, &nb, &bj, &nb).unwrap();
    assert_eq!(p.z_hat, z);
    assert_eq!(p.x_hat, x);
    assert_eq!(p.e_hat, crop_exact(&x, &bj, 32).unwrap());
}

#[test]
fn search_perturbation_is_local_and_consistent() {
    let gen = randomized(5, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let (z, x) = (image(&mut rng, 32), image(&mut rng, 64));
        let (bx, by) = (rng.gen_range(0..32) as f64, rng.gen_range(0..32) as f64);
        let bj = BBox::new(bx, by, 32.0, 32.0).unwrap();
        let nb = NormBBox { x: 0.25, y: 0.25, w: 0.25, h: 0.25 };
        let p = make_tue_pair(&gen, &z, &x, &nb, &bj, &nb).unwrap();
        let r = PasteRegion::of(&bj);
        for c in 0..3 {
            for y in 0..64 {
                for xx in 0..64 {
                    let k = (c * 64 + y) * 64 + xx;
                    let inside = (xx as i64) >= r.x0 && (xx as i64) < r.x0 + 32 && (y as i64) >= r.y0 && (y as i64) < r.y0 + 32;
                    if !inside {
                        assert_eq!(p.x_hat.data()[k], x.data()[k]);
                    }
                }
            }
        }
        assert_eq!(crop_exact(&p.x_hat, &bj, 32).unwrap(), p.e_hat);
        assert!(p.z_hat.data().iter().zip(z.data()).all(|(a, b)| (a - b).abs() < SIGMA + 1e-6));
    }
}

#[test]
fn tue_pair_is_deterministic() {
    let gen = randomized(6, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (z, x) = (image(&mut rng, 32), image(&mut rng, 64));
    let bj = BBox::new(10.5, 12.25, 30.0, 20.0).unwrap();
    let nb = NormBBox { x: 0.1, y: 0.2, w: 0.3, h: 0.2 };
    let a = make_tue_pair(&gen, &z, &x, &nb, &bj, &nb).unwrap();
    let b = make_tue_pair(&gen, &z, &x, &nb, &bj, &nb).unwrap();
    assert_eq!(a, b);
    assert!(make_tue_pair(&gen, &z, &x, &nb, &BBox { x: 0.0, y: 0.0, w: 0.0, h: 3.0 }, &nb).is_err());
}

#[test]
fn tcl_loss_is_non_negative() {
    let tp = init_tracker(Arch::ConvSiamese, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let mut g = Graph::new();
        let tv = tp.params.bind_frozen(&mut g);
        let vars: Vec<_> = (0..4).map(|_| g.constant(random_images(&mut rng, 4, 32))).collect();
        let l = tcl_loss(&mut g, &tp, &tv, vars[0], vars[1], vars[2], vars[3], &[0, 0, 1, 2], TCL_TAU).unwrap();
        assert!(g.value(l).item() >= 0.0);
    }
}
