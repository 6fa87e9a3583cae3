//! Joint generator/surrogate training, dataset protection and the
//! experiment grid.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use numcore::{adam_step, checkpoint_bytes, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embaseline::{em_protect_dataset, save_tiles, EmConfig};
use crate::error::{invalid, Error, Result};
use crate::geometry::{crop_exact, normalize_bbox, paste_into, resize_bilinear, Budget, Image, PasteRegion};
use crate::synthvideo::{generate_dataset, quantize, Dataset, Provenance, Split, SynthConfig};
use crate::tracker::{
    balanced_pos_weight, batch_labels, bce_loss, epoch_order, init_tracker, sample_pairs, stack_patches, tracker_step,
    evaluate_dataset, smooth_curve, train_tracker, Arch, PairConfig, TrackConfig, TrackMetrics, TrackerParams, VictimConfig,
};
use crate::tuegen::{init_generator, pair_conditions, tcl_loss, tue_batch, GeneratorConfig, GeneratorParams, TCL_TAU};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Generator learning rate.
    pub lr_s: f64,
    /// Surrogate learning rate.
    pub lr_g: f64,
    pub lambda: f64,
    pub batch: usize,
    pub seed: u64,
    pub max_gap: usize,
    pub sigma: f64,
    pub tau: f64,
    pub surrogate: Arch,
    pub generator: GeneratorConfig,
    pub pairs: PairConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr_s: 1e-4,
            lr_g: 1e-3,
            lambda: 0.05,
            batch: 16,
            seed: 0,
            max_gap: 10,
            sigma: Budget::default().sigma,
            tau: TCL_TAU,
            surrogate: Arch::ConvSiamese,
            generator: GeneratorConfig::default(),
            pairs: PairConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        Budget::new(self.sigma)?;
        if self.lambda < 0.0 || !(self.lr_s > 0.0) || !(self.lr_g > 0.0) || self.epochs == 0 || self.batch == 0 {
            return Err(invalid("need lambda ≥ 0, positive learning rates, epochs ≥ 1 and batch ≥ 1"));
        }
        if self.lambda > 0.0 && self.batch < 2 {
            return Err(invalid("the contrastive term needs batches of at least two pairs"));
        }
        if self.max_gap == 0 {
            return Err(invalid("max_gap must be ≥ 1"));
        }
        Ok(())
    }
}

/// Per-step losses recorded while training the generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLog {
    pub gen_bce: Vec<f64>,
    pub gen_tcl: Vec<f64>,
    pub surrogate_bce: Vec<f64>,
    pub epoch_gen_bce: Vec<f64>,
    pub steps_per_epoch: usize,
}

/// Alternating optimisation: each batch first takes an Adam step on the
/// generator against `BCE + λ·TCL` with the surrogate frozen, then
/// regenerates the perturbations with the updated generator and takes an
/// Adam step on the surrogate against `BCE`.
pub fn train_generator(ds: &Dataset, cfg: &TrainConfig) -> Result<(GeneratorParams, TrackerParams, GeneratorLog)> {
    ds.require_clean()?;
    cfg.validate()?;
    if ds.videos.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let gcfg = GeneratorConfig {
        sigma: cfg.sigma,
        ..cfg.generator.clone()
    };
    let mut gen = init_generator(&gcfg, cfg.seed)?;
    let mut tp = init_tracker(cfg.surrogate, cfg.seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6765_6e65_7261_746f);
    let pair_cfg = PairConfig {
        max_gap: cfg.max_gap,
        ..cfg.pairs
    };
    let mut log = GeneratorLog::default();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        let order = epoch_order(ds.videos.len(), 1, &mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0;
        for chunk in order.chunks(cfg.batch) {
            let pairs = sample_pairs(ds, chunk, &tp.crop, &pair_cfg, &mut rng)?;
            let labels = batch_labels(&tp, &pairs, pair_cfg.radius)?;
            let (z, x) = stack_patches(&pairs)?;
            let (e, ni, nj) = pair_conditions(&pairs, &ds.videos, ds.frame_size(), gen.cfg.input)?;
            let bj: Vec<_> = pairs.iter().map(|p| p.x_box).collect();
            let videos: Vec<usize> = pairs.iter().map(|p| p.video).collect();
            let pw = balanced_pos_weight(&labels);

            let mut g = Graph::new();
            let gv = gen.params.bind(&mut g);
            let tv = tp.params.bind_frozen(&mut g);
            let (zv, xv, ev) = (g.constant(z.clone()), g.constant(x.clone()), g.constant(e.clone()));
            let out = tue_batch(&mut g, &gen, &gv, zv, xv, ev, &ni, &bj, &nj)?;
            let r = tp.response(&mut g, &tv, out.z_hat, out.x_hat)?;
            let bce = bce_loss(&mut g, r, &labels, pw)?;
            let mut loss = bce;
            let mut tcl_val = 0.0;
            if cfg.lambda > 0.0 && pairs.len() >= 2 {
                let tcl = tcl_loss(&mut g, &tp, &tv, out.z_hat, out.e_hat, zv, ev, &videos, cfg.tau)?;
                tcl_val = g.value(tcl).item() as f64;
                let w = g.scale(tcl, cfg.lambda);
                loss = g.add(bce, w)?;
            }
            let bce_val = g.value(bce).item() as f64;
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = g.backward(loss)?;
            let grads = gv.iter().map(|(k, v)| (k.to_string(), grads.get(v))).collect();
            adam_step(&mut gen.params, &grads, cfg.lr_s)?;

            let mut g = Graph::new();
            let gv = gen.params.bind_frozen(&mut g);
            let (zv, xv, ev) = (g.constant(z), g.constant(x), g.constant(e));
            let out = tue_batch(&mut g, &gen, &gv, zv, xv, ev, &ni, &bj, &nj)?;
            let (z_hat, x_hat) = (g.value(out.z_hat).clone(), g.value(out.x_hat).clone());
            let sur = tracker_step(&mut tp, &z_hat, &x_hat, &labels, cfg.lr_g).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
                other => other,
            })?;

            log.gen_bce.push(bce_val);
            log.gen_tcl.push(tcl_val);
            log.surrogate_bce.push(sur);
            epoch_sum += bce_val;
            epoch_n += 1;
            step += 1;
        }
        log.steps_per_epoch = epoch_n;
        log.epoch_gen_bce.push(epoch_sum / epoch_n as f64);
    }
    Ok((gen, tp, log))
}

pub(crate) fn quantize_image(img: &mut Image) {
    for v in img.data_mut() {
        *v = quantize(*v as f64);
    }
}

/// Perturbs every frame inside its box with the generator's output for the
/// box crop, then quantises to 8 bits. No training happens here.
pub fn protect_dataset(gen: &GeneratorParams, ds: &Dataset) -> Result<Dataset> {
    ds.require_clean()?;
    let fs = ds.frame_size();
    let mut frames = Vec::with_capacity(ds.videos.len());
    for v in &ds.videos {
        if v.boxes.len() != v.frames.len() {
            return Err(Error::Video {
                id: v.id.clone(),
                msg: "missing boxes".into(),
            });
        }
        let crops = v
            .frames
            .iter()
            .zip(&v.boxes)
            .map(|(f, b)| crop_exact(f, b, gen.cfg.input))
            .collect::<Result<Vec<_>>>()?;
        let conds = v
            .boxes
            .iter()
            .map(|b| normalize_bbox(b, fs, fs))
            .collect::<Result<Vec<_>>>()?;
        let deltas = gen.generate(&Tensor::stack(&crops)?, &conds)?;
        let mut out = Vec::with_capacity(v.len());
        for (k, (f, b)) in v.frames.iter().zip(&v.boxes).enumerate() {
            let r = PasteRegion::of(b);
            let tile = resize_bilinear(&deltas.index0(k), r.w, r.h)?;
            let mut img = f.clone();
            paste_into(&mut img, &tile, b)?;
            quantize_image(&mut img);
            out.push(img);
        }
        frames.push(out);
    }
    ds.with_frames(frames, Provenance::TueProtected)
}

/// Data protection strategy of one grid column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "clean")]
    Clean,
    #[serde(rename = "em")]
    Em,
    #[serde(rename = "em+context")]
    EmContext,
    #[serde(rename = "tue")]
    Tue,
    #[serde(rename = "tue-tcl")]
    TueNoTcl,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Clean => "clean",
            Method::Em => "em",
            Method::EmContext => "em+context",
            Method::Tue => "tue",
            Method::TueNoTcl => "tue-tcl",
        }
    }

    pub fn is_generator(self) -> bool {
        matches!(self, Method::Tue | Method::TueNoTcl)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub train: SynthConfig,
    pub test: SynthConfig,
    /// Extra corpus protected by the trained generators without retraining.
    pub heldout: Option<SynthConfig>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            train: SynthConfig {
                seed: 1,
                ..Default::default()
            },
            test: SynthConfig {
                seed: 2,
                n_videos: 50,
                split: Split::Test,
                ..Default::default()
            },
            heldout: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub methods: Vec<Method>,
    pub archs: Vec<Arch>,
    pub seeds: Vec<u64>,
    /// Restricts an architecture to a subset of methods.
    pub arch_methods: BTreeMap<Arch, Vec<Method>>,
    /// Seeds for which the held-out corpus is evaluated.
    pub heldout_seeds: Vec<u64>,
    pub train: TrainConfig,
    pub protect: EmConfig,
    pub victim: VictimConfig,
    pub eval: TrackConfig,
    /// Window of the moving average applied before reading final losses.
    pub smoothing: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            methods: vec![Method::Clean, Method::Tue],
            archs: vec![Arch::ConvSiamese],
            seeds: vec![0],
            arch_methods: BTreeMap::new(),
            heldout_seeds: Vec::new(),
            train: TrainConfig::default(),
            protect: EmConfig::default(),
            victim: VictimConfig::default(),
            eval: TrackConfig::default(),
            smoothing: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.archs.is_empty() || self.seeds.is_empty() {
            return Err(invalid("methods, archs and seeds must be non-empty"));
        }
        if self.methods.iter().any(|m| *m != Method::Clean) && !self.methods.contains(&Method::Clean) {
            return Err(invalid("protection gaps need the clean method in the grid"));
        }
        if self.heldout_seeds.iter().any(|s| !self.seeds.contains(s)) {
            return Err(invalid("heldout_seeds must be a subset of seeds"));
        }
        if !self.heldout_seeds.is_empty() && self.dataset.heldout.is_none() {
            return Err(invalid("heldout_seeds given without a heldout dataset"));
        }
        if self.smoothing == 0 {
            return Err(invalid("smoothing window must be ≥ 1"));
        }
        self.train.validate()?;
        self.protect.validate()?;
        Ok(())
    }

    fn runs(&self, arch: Arch, method: Method) -> bool {
        self.arch_methods.get(&arch).is_none_or(|ms| ms.contains(&method))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: Method,
    pub arch: Arch,
    pub seed: u64,
    pub corpus: String,
    pub provenance: Provenance,
    #[serde(flatten)]
    pub metrics: TrackMetrics,
    /// Last value of the smoothed per-epoch training loss.
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub method: Method,
    pub arch: Arch,
    pub seed: u64,
    pub corpus: String,
    pub ao_clean: f64,
    pub ao_protected: f64,
    pub abs_drop: f64,
    /// `1 − AO_protected / AO_clean`.
    pub rel_drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub method: Method,
    pub seed: u64,
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSize {
    pub method: Method,
    pub seed: u64,
    pub artifact: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: Method,
    pub arch: Option<Arch>,
    pub seed: u64,
    pub corpus: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<MetricRow>,
    pub gaps: Vec<GapRow>,
    /// Named loss curves, also written as CSV.
    pub curves: BTreeMap<String, Vec<f64>>,
    pub artifacts: Vec<ArtifactSize>,
    pub timings: Vec<StageTiming>,
    pub failures: Vec<CellFailure>,
    pub partial: bool,
}

impl ExperimentReport {
    pub fn row(&self, method: Method, arch: Arch, seed: u64, corpus: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.arch == arch && r.seed == seed && r.corpus == corpus)
    }

    pub fn seconds(&self, method: Method, seed: u64, stage: &str) -> Option<f64> {
        self.timings
            .iter()
            .find(|t| t.method == method && t.seed == seed && t.stage == stage)
            .map(|t| t.seconds)
    }

    /// The report without wall-clock fields, for reproducibility checks.
    pub fn without_timings(&self) -> ExperimentReport {
        ExperimentReport {
            timings: Vec::new(),
            ..self.clone()
        }
    }
}

/// Everything one seed contributes to the report.
#[derive(Default)]
struct SeedResult {
    rows: Vec<MetricRow>,
    curves: Vec<(String, Vec<f64>)>,
    artifacts: Vec<ArtifactSize>,
    timings: Vec<StageTiming>,
    failures: Vec<CellFailure>,
}

struct Corpora {
    train: Dataset,
    test: Dataset,
    heldout: Option<Dataset>,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64()))
}

/// Protected copies of the training corpus (and held-out corpus, for
/// generator methods) for one method and seed.
fn protect_stage(
    cfg: &ExperimentConfig,
    data: &Corpora,
    method: Method,
    seed: u64,
    with_heldout: bool,
    dir: &Path,
    res: &mut SeedResult,
) -> Result<(Dataset, Option<Dataset>)> {
    let key = format!("{}-s{seed}", method.tag());
    let mut time = |stage: &str, seconds: f64| {
        res.timings.push(StageTiming {
            method,
            seed,
            stage: stage.into(),
            seconds,
        })
    };
    match method {
        Method::Clean => Ok((data.train.clone(), data.heldout.clone().filter(|_| with_heldout))),
        Method::Em | Method::EmContext => {
            let ecfg = EmConfig {
                seed,
                with_context: method == Method::EmContext,
                ..cfg.protect.clone()
            };
            let out = em_protect_dataset(&data.train, &ecfg)?;
            time("protect", out.seconds);
            let bytes = save_tiles(&dir.join(&key).join("tiles"), &out.tiles, ecfg.with_context)?;
            res.artifacts.push(ArtifactSize {
                method,
                seed,
                artifact: "tiles".into(),
                bytes,
            });
            Ok((out.dataset, None))
        }
        Method::Tue | Method::TueNoTcl => {
            let tcfg = TrainConfig {
                seed,
                lambda: if method == Method::Tue { cfg.train.lambda } else { 0.0 },
                ..cfg.train.clone()
            };
            let ((gen, _, log), t_train) = timed(|| train_generator(&data.train, &tcfg))?;
            time("generator", t_train);
            let (protected, t_apply) = timed(|| protect_dataset(&gen, &data.train))?;
            time("apply", t_apply);
            time("protect", t_train + t_apply);
            let gdir = dir.join(&key).join("generator");
            gen.save(&gdir)?;
            res.artifacts.push(ArtifactSize {
                method,
                seed,
                artifact: "generator".into(),
                bytes: checkpoint_bytes(&gdir)?,
            });
            res.curves.push((format!("{key}-generator-bce"), log.gen_bce));
            res.curves.push((format!("{key}-generator-tcl"), log.gen_tcl));
            res.curves.push((format!("{key}-surrogate-bce"), log.surrogate_bce));
            let heldout = match (&data.heldout, with_heldout) {
                (Some(h), true) => Some(protect_dataset(&gen, h)?),
                _ => None,
            };
            Ok((protected, heldout))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn victim_stage(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    method: Method,
    arch: Arch,
    seed: u64,
    corpus: &str,
    res: &mut SeedResult,
) -> Result<()> {
    let ((tp, log), t_train) = timed(|| train_tracker(train, arch, &cfg.victim, seed))?;
    let (metrics, t_eval) = timed(|| evaluate_dataset(&tp, test, &cfg.eval))?;
    let smooth = smooth_curve(&log.epoch_loss, cfg.smoothing);
    let stage = |s: &str| format!("{s}-{arch}-{corpus}");
    res.timings.push(StageTiming {
        method,
        seed,
        stage: stage("victim"),
        seconds: t_train,
    });
    res.timings.push(StageTiming {
        method,
        seed,
        stage: stage("eval"),
        seconds: t_eval,
    });
    res.curves
        .push((format!("{}-s{seed}-{arch}-{corpus}-victim", method.tag()), log.epoch_loss));
    res.rows.push(MetricRow {
        method,
        arch,
        seed,
        corpus: corpus.into(),
        provenance: train.manifest.provenance,
        metrics,
        final_loss: *smooth.last().expect("at least one epoch"),
    });
    Ok(())
}

fn run_seed(cfg: &ExperimentConfig, data: &Corpora, seed: u64, dir: &Path) -> SeedResult {
    let mut res = SeedResult::default();
    let with_heldout = cfg.heldout_seeds.contains(&seed);
    for &method in &cfg.methods {
        let archs: Vec<Arch> = cfg.archs.iter().copied().filter(|&a| cfg.runs(a, method)).collect();
        if archs.is_empty() {
            continue;
        }
        let fail = |res: &mut SeedResult, arch: Option<Arch>, corpus: &str, e: Error| {
            res.failures.push(CellFailure {
                method,
                arch,
                seed,
                corpus: corpus.into(),
                error: e.to_string(),
            })
        };
        let (train, heldout) = match protect_stage(cfg, data, method, seed, with_heldout, dir, &mut res) {
            Ok(v) => v,
            Err(e) => {
                fail(&mut res, None, "train", e);
                continue;
            }
        };
        for &arch in &archs {
            if let Err(e) = victim_stage(cfg, &train, &data.test, method, arch, seed, "train", &mut res) {
                fail(&mut res, Some(arch), "train", e);
            }
            if let Some(h) = &heldout {
                if let Err(e) = victim_stage(cfg, h, &data.test, method, arch, seed, "heldout", &mut res) {
                    fail(&mut res, Some(arch), "heldout", e);
                }
            }
        }
    }
    res
}

fn write_curves(dir: &Path, curves: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    let cdir = dir.join("curves");
    std::fs::create_dir_all(&cdir)?;
    for (name, values) in curves {
        let mut s = String::from("index,value\n");
        for (i, v) in values.iter().enumerate() {
            s.push_str(&format!("{i},{v}\n"));
        }
        std::fs::write(cdir.join(format!("{}.csv", name.replace('+', "-plus-"))), s)?;
    }
    Ok(())
}

/// Runs the configured grid: generate corpora, protect per method and seed,
/// train victims per architecture, evaluate on the clean test corpus. Seeds
/// run on up to `jobs` threads; a failing cell is recorded and skipped.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = Corpora {
        train: generate_dataset(&cfg.dataset.train)?,
        test: generate_dataset(&cfg.dataset.test)?,
        heldout: cfg.dataset.heldout.as_ref().map(generate_dataset).transpose()?,
    };
    let art = out.join("artifacts");
    let jobs = jobs.max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<SeedResult>>> = cfg.seeds.iter().map(|_| Default::default()).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.min(cfg.seeds.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&seed) = cfg.seeds.get(k) else { break };
                let r = run_seed(cfg, &data, seed, &art);
                *results[k].lock().expect("no poisoned result slot") = Some(r);
            });
        }
    });
    let mut report = ExperimentReport::default();
    for slot in results {
        let r = slot.into_inner().expect("no poisoned result slot").expect("every seed ran");
        report.rows.extend(r.rows);
        report.curves.extend(r.curves);
        report.artifacts.extend(r.artifacts);
        report.timings.extend(r.timings);
        report.failures.extend(r.failures);
    }
    report.partial = !report.failures.is_empty();
    for r in &report.rows {
        if r.method == Method::Clean {
            continue;
        }
        if let Some(c) = report.row(Method::Clean, r.arch, r.seed, &r.corpus) {
            report.gaps.push(GapRow {
                method: r.method,
                arch: r.arch,
                seed: r.seed,
                corpus: r.corpus.clone(),
                ao_clean: c.metrics.ao,
                ao_protected: r.metrics.ao,
                abs_drop: c.metrics.ao - r.metrics.ao,
                rel_drop: if c.metrics.ao > 0.0 { 1.0 - r.metrics.ao / c.metrics.ao } else { 0.0 },
            });
        }
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write_curves(out, &report.curves)?;
    Ok(report)
}
