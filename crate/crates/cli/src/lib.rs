//! Flat verbs over the tueforge stages. Every verb reads an optional JSON
//! config, applies `--override key=value` edits and the seed, and writes
//! `run-meta.json` next to its outputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::{json, Value};

use tueforge::embaseline::{em_protect_dataset, save_tiles, EmConfig};
use tueforge::pipeline::{protect_dataset, run_experiment, train_generator, ExperimentConfig, TrainConfig};
use tueforge::synthvideo::{generate_dataset, load_dataset, load_manifest, save_dataset, SynthConfig};
use tueforge::tracker::{evaluate_dataset, train_tracker, Arch, MetricsReport, TrackConfig, TrackerParams, VictimConfig};
use tueforge::tuegen::GeneratorParams;

pub const SEED_ENV: &str = "TUEFORGE_SEED";

#[derive(Parser, Debug)]
#[command(name = "tueforge", version, about = "Temporal unlearnable examples for desk-scale Siamese tracking")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key edit applied to the config, e.g. `--override train.epochs=3`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; falls back to TUEFORGE_SEED, then to the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Generate a synthetic video corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the perturbation generator jointly with a surrogate tracker.
    TrainGenerator {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Protect a clean corpus with a trained generator.
    Protect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Protect a clean corpus with per-video error-minimising tiles.
    EmProtect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a tracker from scratch on a corpus.
    TrainVictim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track every video of a corpus and report metrics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tracker: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a method × architecture × seed grid.
    RunExperiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Seeds run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarise a corpus; with `--clean`, report its deviation from it.
    Inspect {
        dir: PathBuf,
        #[arg(long)]
        clean: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes 1 and 2.
#[derive(Debug)]
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn validation(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

/// Library errors caused by bad inputs count as validation failures.
fn classify(e: tueforge::Error) -> Failure {
    use tueforge::Error as E;
    match e {
        E::Invalid(_) | E::Provenance { .. } | E::Manifest { .. } | E::Video { .. } => Failure::Validation(e.into()),
        other => Failure::Runtime(other.into()),
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Sets `a.b.c` in a JSON object, creating intermediate objects. The value is
/// parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(cfg: &mut Value, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not KEY=VALUE"))?;
    if key.is_empty() {
        return Err(anyhow!("override `{spec}` has an empty key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = cfg;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{}` is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    unreachable!("split yields at least one part")
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("{SEED_ENV}={s} is not a seed"))?)),
        Err(_) => Ok(None),
    }
}

/// Config file → defaults for missing keys → overrides → seed, checked by
/// deserialising into `T` with unknown keys rejected.
fn resolve<T: Serialize + DeserializeOwned + Default>(common: &Common, seed_key: Option<&str>) -> Outcome<(T, Value)> {
    let mut cfg = serde_json::to_value(T::default()).map_err(validation)?;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(validation)?;
        let file: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(validation)?;
        merge(&mut cfg, file);
    }
    for o in &common.overrides {
        apply_override(&mut cfg, o).map_err(validation)?;
    }
    let seed = match common.seed {
        Some(s) => Some(s),
        None => env_seed().map_err(validation)?,
    };
    if let (Some(seed), Some(key)) = (seed, seed_key) {
        let v = if key == "seeds" { json!([seed]) } else { json!(seed) };
        cfg.as_object_mut().expect("configs are objects").insert(key.into(), v);
    }
    check_keys(&serde_json::to_value(T::default()).map_err(validation)?, &cfg, "").map_err(validation)?;
    let typed: T = serde_json::from_value(cfg).context("invalid config").map_err(validation)?;
    let resolved = serde_json::to_value(&typed).map_err(validation)?;
    Ok((typed, resolved))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Rejects keys absent from the default config, so typos do not pass
/// silently. Map-valued fields (empty objects by default) accept any key.
fn check_keys(reference: &Value, cfg: &Value, path: &str) -> anyhow::Result<()> {
    if let (Value::Object(r), Value::Object(c)) = (reference, cfg) {
        if r.is_empty() {
            return Ok(());
        }
        for (k, v) in c {
            let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match r.get(k) {
                Some(rv) => check_keys(rv, v, &here)?,
                None => return Err(anyhow!("unknown config key `{here}`")),
            }
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RunMeta {
    verb: String,
    config: Value,
    seed: Option<u64>,
    inputs: Value,
    version: String,
    wall_clock_secs: f64,
}

fn write_meta(out: &Path, verb: &str, config: &Value, inputs: Value, start: Instant) -> Outcome<()> {
    let seed = config.get("seed").and_then(Value::as_u64);
    let meta = RunMeta {
        verb: verb.into(),
        config: config.clone(),
        seed,
        inputs,
        version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(e.into()))?;
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Failure::Runtime(e.into()))?;
    std::fs::write(out.join("run-meta.json"), text).map_err(|e| Failure::Runtime(e.into()))
}

fn write_json(path: &Path, v: &impl Serialize) -> Outcome<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.into()))?;
    std::fs::write(path, text).map_err(|e| Failure::Runtime(e.into()))
}

fn print_config(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("values serialise"));
}

/// Resolved settings of `train-victim`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct VictimRun {
    pub arch: Arch,
    pub seed: u64,
    #[serde(flatten)]
    pub victim: VictimConfig,
}

impl Default for VictimRun {
    fn default() -> Self {
        Self {
            arch: Arch::ConvSiamese,
            seed: 0,
            victim: VictimConfig::default(),
        }
    }
}

/// Verbs without settings of their own.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct NoConfig {}

fn run(verb: Verb) -> Outcome<()> {
    let start = Instant::now();
    match verb {
        Verb::GenData { common, out } => {
            let (cfg, resolved) = resolve::<SynthConfig>(&common, Some("seed"))?;
            if common.dry_run {
                print_config(&resolved);
                return Ok(());
            }
            let ds = generate_dataset(&cfg).map_err(classify)?;
            save_dataset(&ds, &out).map_err(classify)?;
            write_meta(&out, "gen-data", &resolved, json!({}), start)
        }
        Verb::TrainGenerator { common, dataset, out } => {
            let (cfg, resolved) = resolve::<TrainConfig>(&common, Some("seed"))?;
            cfg.validate().map_err(classify)?;
            if common.dry_run {
                print_config(&resolved);
                return Ok(());
            }
            let ds = load_dataset(&dataset).map_err(classify)?;
            let (gen, surrogate, log) = train_generator(&ds, &cfg).map_err(classify)?;
            gen.save(&out.join("generator")).map_err(classify)?;
            surrogate.save(&out.join("surrogate")).map_err(classify)?;
            write_json(&out.join("train-log.json"), &log)?;
            write_meta(&out, "train-generator", &resolved, json!({ "dataset": dataset }), start)
        }
        Verb::Protect {
            common,
            generator,
            dataset,
            out,
        } => {
            let (_, resolved) = resolve::<NoConfig>(&common, None)?;
            if common.dry_run {
                print_config(&resolved);
                return Ok(());
            }
            let gdir = if generator.join("generator").is_dir() { generator.join("generator") } else { generator.clone() };
            let gen = GeneratorParams::load(&gdir).map_err(classify)?;
            let ds = load_dataset(&dataset).map_err(classify)?;
            let protected = protect_dataset(&gen, &ds).map_err(classify)?;
            save_dataset(&protected, &out).map_err(classify)?;
            write_meta(&out, "protect", &resolved, json!({ "dataset": dataset, "generator": generator }), start)
        }
        Verb::EmProtect { common, dataset, out } => {
            let (cfg, resolved) = resolve::<EmConfig>(&common, Some("seed"))?;
            cfg.validate().map_err(classify)?;
            if common.dry_run {
                print_config(&resolved);
                return Ok(());
            }
            let ds = load_dataset(&dataset).map_err(classify)?;
            let res = em_protect_dataset(&ds, &cfg).map_err(classify)?;
            save_dataset(&res.dataset, &out).map_err(classify)?;
            let bytes = save_tiles(&out.join("tiles"), &res.tiles, cfg.with_context).map_err(classify)?;
            write_json(
                &out.join("em-log.json"),
                &json!({ "seconds": res.seconds, "tile_bytes": bytes, "inner_loss": res.inner_loss }),
            )?;
            write_meta(&out, "em-protect", &resolved, json!({ "dataset": dataset }), start)
        }
        Verb::TrainVictim { common, dataset, out } => {
            let (cfg, resolved) = resolve::<VictimRun>(&common, Some("seed"))?;
            if common.dry_run {
                print_config(&resolved);
                return Ok(());
            }
            let ds = load_dataset(&dataset).map_err(classify)?;
            let (tp, log) = train_tracker(&ds, cfg.arch, &cfg.victim, cfg.seed).map_err(classify)?;
            tp.save(&out.join("tracker")).map_err(classify)?;
            write_json(
                &out.join("train-log.json"),
                &json!({ "provenance": ds.manifest.provenance, "epoch_loss": log.epoch_loss, "step_loss": log.step_loss }),
            )?;
            write_meta(&out, "train-victim", &resolved, json!({ "dataset": dataset }), start)
        }
        Verb::Evaluate {
            common,
            tracker,
            dataset,
            out,
        } => {
            let (cfg, resolved) = resolve::<TrackConfig>(&common, None)?;
            if common.dry_run {
                print_config(&resolved);
                return Ok(());
            }
            let tdir = if tracker.join("tracker").is_dir() { tracker.join("tracker") } else { tracker.clone() };
            let tp = TrackerParams::load(&tdir).map_err(classify)?;
            let ds = load_dataset(&dataset).map_err(classify)?;
            let metrics = evaluate_dataset(&tp, &ds, &cfg).map_err(classify)?;
            let (provenance, curve, seed) = victim_provenance(&tracker);
            let report = MetricsReport {
                arch: tp.arch,
                dataset_provenance: provenance,
                seed,
                metrics,
                train_loss_curve: curve,
            };
            std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(e.into()))?;
            write_json(&out.join("metrics.json"), &report)?;
            println!("{}", serde_json::to_string(&report.metrics).expect("metrics serialise"));
            write_meta(&out, "evaluate", &resolved, json!({ "dataset": dataset, "tracker": tracker }), start)
        }
        Verb::RunExperiment { common, out, jobs } => {
            let (cfg, resolved) = resolve::<ExperimentConfig>(&common, Some("seeds"))?;
            cfg.validate().map_err(classify)?;
            if common.dry_run {
                print_config(&resolved);
                return Ok(());
            }
            let report = run_experiment(&cfg, &out, jobs).map_err(classify)?;
            for g in &report.gaps {
                println!(
                    "{} {} seed {} {}: AO {:.3} → {:.3} (relative drop {:.3})",
                    g.method, g.arch, g.seed, g.corpus, g.ao_clean, g.ao_protected, g.rel_drop
                );
            }
            write_meta(&out, "run-experiment", &resolved, json!({ "jobs": jobs }), start)?;
            if report.partial {
                for f in &report.failures {
                    eprintln!("cell {} {:?} seed {} failed: {}", f.method, f.arch, f.seed, f.error);
                }
                return Err(Failure::Runtime(anyhow!("{} grid cell(s) failed; report is partial", report.failures.len())));
            }
            Ok(())
        }
        Verb::Inspect { dir, clean } => inspect(&dir, clean.as_deref()),
    }
}

/// Provenance, loss curve and seed recorded by `train-victim` next to the
/// tracker checkpoint, when present.
fn victim_provenance(tracker: &Path) -> (String, Vec<f64>, u64) {
    let read = |p: PathBuf| std::fs::read_to_string(p).ok().and_then(|t| serde_json::from_str::<Value>(&t).ok());
    let log = read(tracker.join("train-log.json"));
    let meta = read(tracker.join("run-meta.json"));
    let provenance = log
        .as_ref()
        .and_then(|l| l["provenance"].as_str().map(String::from))
        .unwrap_or_else(|| "unknown".into());
    let curve = log
        .and_then(|l| serde_json::from_value(l["epoch_loss"].clone()).ok())
        .unwrap_or_default();
    let seed = meta.and_then(|m| m["seed"].as_u64()).unwrap_or(0);
    (provenance, curve, seed)
}

fn inspect(dir: &Path, clean: Option<&Path>) -> Outcome<()> {
    let m = load_manifest(dir).map_err(classify)?;
    let frames: usize = m.videos.iter().map(|v| v.frames).sum();
    println!(
        "{}: {} videos, {} frames, {}×{} px, split {:?}, provenance {}, seed {}",
        dir.display(),
        m.videos.len(),
        frames,
        m.frame_size,
        m.frame_size,
        m.split,
        serde_json::to_value(m.provenance).expect("serialises").as_str().unwrap_or("?"),
        m.seed
    );
    if let Some(c) = clean {
        let a = load_dataset(dir).map_err(classify)?;
        let b = load_dataset(c).map_err(classify)?;
        if a.videos.len() != b.videos.len() {
            return Err(validation(anyhow!("corpora have different video counts")));
        }
        let mut max = 0.0f32;
        let mut changed = 0usize;
        for (va, vb) in a.videos.iter().zip(&b.videos) {
            if va.id != vb.id || va.len() != vb.len() {
                return Err(validation(anyhow!("video {} does not match {}", va.id, vb.id)));
            }
            for (fa, fb) in va.frames.iter().zip(&vb.frames) {
                if fa.shape() != fb.shape() {
                    return Err(validation(anyhow!("frame size mismatch in video {}", va.id)));
                }
                for (x, y) in fa.data().iter().zip(fb.data()) {
                    let d = (x - y).abs();
                    if d > 0.0 {
                        changed += 1;
                    }
                    max = max.max(d);
                }
            }
        }
        println!(
            "max linf deviation {:.6} ({:.2}/255), changed values {}",
            max,
            (max * 255.0).round(),
            changed
        );
    }
    Ok(())
}

/// Parses `argv` and runs the verb: 0 on success, 1 on usage or validation
/// errors, 2 on runtime failures.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.verb) {
        Ok(()) => 0,
        Err(f) => {
            let code = f.code();
            let (Failure::Validation(e) | Failure::Runtime(e)) = f;
            eprintln!("error: {e:#}");
            code
        }
    }
}
