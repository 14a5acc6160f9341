//! Command-line front end: `synth`, `prepare`, `train`, `evaluate`,
//! `ablate` and `plot`. Each command writes a `manifest.json` into its
//! output directory before starting and finalizes it on exit.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{fnv1a, load_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_traverse, Position};
use crate::error::{Error, Result};
use crate::evaluation::{
    build_index, distance_matrix, evaluate, render_plots, write_descriptors, write_report, DescriptorManifest,
    RetrievalReport,
};
use crate::model::{Ablation, FusionVpr, ModelConfig, PreparedSet, ABLATION_PRESETS};
use crate::synthetic::{write_world, WorldConfig};
use crate::training::Trainer;

#[derive(Debug, Parser)]
#[command(name = "fevpr", version, about = "Frame + event place recognition: data prep, training, evaluation")]
pub struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic loop world (database, queries, glare and no-event splits).
    Synth(SynthArgs),
    /// Validate traverse directories and cache resampled frames and event frames.
    Prepare(PrepareArgs),
    /// Train a model on a (database, query) traverse pair.
    Train(TrainArgs),
    /// Score query traverses against a database and write report bundles.
    Evaluate(EvaluateArgs),
    /// Train and score every ablation preset.
    Ablate(AblateArgs),
    /// Re-render plots of existing report bundles.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Args, Default)]
pub struct Common {
    /// Run configuration (TOML). Missing keys take built-in defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Directory holding the traverse sub-directories.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Cache directory (also settable through FEVPR_CACHE_DIR).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub places: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: Common,
    /// Traverses to prepare; defaults to every traverse named in the config.
    pub traverses: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Preset name (e.g. `frame_only`, `single_scale_16`) or switch list
    /// (`frame_only`, `event_only`, `single_scale:{8,16,32}`, `no_attention`,
    /// `flatten_concat`, `max_pool_weights`, comma separated).
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Resume from a checkpoint (parameters and optimizer state).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Database traverse (name under the data root, or a path).
    #[arg(long)]
    pub database: Option<String>,
    /// Query traverses; defaults to the config's test list.
    #[arg(long = "query")]
    pub queries: Vec<String>,
    #[arg(long)]
    pub phi: Option<f64>,
    /// Also write raw descriptors next to each report.
    #[arg(long)]
    pub export_descriptors: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated preset names; defaults to all.
    #[arg(long)]
    pub presets: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Report bundle directories (each holding recalls.json, pr.csv, success_map.csv).
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

// ---- manifest ----------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub version: String,
    pub git_commit: Option<String>,
    pub started_unix_s: f64,
    pub finished_unix_s: Option<f64>,
    pub wall_s: Option<f64>,
    pub timings_s: BTreeMap<String, f64>,
    /// `running`, `ok` or `failed`.
    pub status: String,
    pub error: Option<String>,
    pub outputs: Vec<PathBuf>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn git_commit() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

pub struct Run {
    pub manifest: RunManifest,
    path: PathBuf,
    clock: Instant,
}

impl Run {
    pub fn start(command: &str, config: &RunConfig, inputs: Vec<PathBuf>, out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let manifest = RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: serde_json::to_value(config)?,
            inputs,
            out_dir: out_dir.to_path_buf(),
            seed: config.train.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            git_commit: git_commit(),
            started_unix_s: unix_now(),
            finished_unix_s: None,
            wall_s: None,
            timings_s: BTreeMap::new(),
            status: "running".into(),
            error: None,
            outputs: Vec::new(),
        };
        let run = Self {
            manifest,
            path: out_dir.join("manifest.json"),
            clock: Instant::now(),
        };
        run.write()?;
        Ok(run)
    }

    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&self.path, text).map_err(|e| Error::io(&self.path, e))
    }

    pub fn time(&mut self, label: &str, since: Instant) {
        self.manifest.timings_s.insert(label.to_string(), since.elapsed().as_secs_f64());
    }

    pub fn finish<T>(mut self, result: &Result<T>) -> Result<()> {
        self.manifest.finished_unix_s = Some(unix_now());
        self.manifest.wall_s = Some(self.clock.elapsed().as_secs_f64());
        match result {
            Ok(_) => {
                // Declared outputs must exist for a run to count as successful.
                match self.manifest.outputs.iter().find(|p| !p.exists()) {
                    Some(missing) => {
                        self.manifest.status = "failed".into();
                        self.manifest.error = Some(format!("declared output {} missing", missing.display()));
                    }
                    None => self.manifest.status = "ok".into(),
                }
            }
            Err(e) => {
                self.manifest.status = "failed".into();
                self.manifest.error = Some(e.to_string());
            }
        }
        self.write()?;
        match &self.manifest.error {
            Some(msg) if result.is_ok() => Err(Error::Validation(msg.clone())),
            _ => Ok(()),
        }
    }
}

// ---- config resolution -----------------------------------------------------------

/// File (or default) config, then environment, then CLI flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env();
    if let Some(o) = &common.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(r) = &common.data_root {
        cfg.data.root = r.clone();
    }
    if let Some(c) = &common.cache_dir {
        cfg.data.cache_dir = c.clone();
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.train.mining.seed = s;
    }
    Ok(cfg)
}

/// Preset name first, otherwise a switch list.
pub fn parse_ablation(spec: &str) -> Result<Ablation> {
    Ablation::preset(spec).or_else(|_| Ablation::from_switches(spec))
}

fn out_dir(cfg: &RunConfig, default: &str) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(default))
}

// ---- prepared-set cache -------------------------------------------------------

/// Cache file for a traverse under the given load/model settings.
pub fn cache_path(cfg: &RunConfig, traverse_dir: &Path) -> PathBuf {
    let dir = traverse_dir.canonicalize().unwrap_or_else(|_| traverse_dir.to_path_buf());
    let m = &cfg.train.model;
    let l = &cfg.data.load;
    let key = format!(
        "{}|{}|{:?}|{}|{}x{}|{:?}|{}",
        dir.display(),
        l.window_us,
        l.window_mode,
        l.max_pose_gap_us,
        m.input_width,
        m.input_height,
        m.event_normalization,
        m.frame_channels
    );
    let name = traverse_dir.file_name().and_then(|n| n.to_str()).unwrap_or("traverse");
    cfg.data.cache_dir.join(format!("{name}-{}.safetensors", fnv1a(key.as_bytes())))
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn save_prepared(path: &Path, set: &PreparedSet) -> Result<()> {
    let (fb, eb) = (f32_bytes(&set.frames), f32_bytes(&set.events));
    let views = [
        (
            "frames",
            TensorView::new(StDtype::F32, vec![set.len(), set.frame_channels, set.height, set.width], &fb),
        ),
        ("events", TensorView::new(StDtype::F32, vec![set.len(), 2, set.height, set.width], &eb)),
    ];
    let views: Vec<(&str, TensorView<'_>)> = views
        .into_iter()
        .map(|(n, v)| v.map(|v| (n, v)).map_err(|e| Error::file(path, e.to_string())))
        .collect::<Result<_>>()?;
    let info = HashMap::from([
        ("name".to_string(), set.name.clone()),
        ("positions".to_string(), serde_json::to_string(&set.positions)?),
        ("timestamps".to_string(), serde_json::to_string(&set.timestamps)?),
    ]);
    let bytes = safetensors::serialize(views, Some(info)).map_err(|e| Error::file(path, e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_prepared(path: &Path) -> Result<PreparedSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::file(path, m);
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let info = header.metadata().clone().ok_or_else(|| bad("missing metadata".into()))?;
    let get = |k: &str| info.get(k).cloned().ok_or_else(|| bad(format!("missing '{k}'")));
    let positions: Vec<Position> = serde_json::from_str(&get("positions")?)?;
    let timestamps: Vec<u64> = serde_json::from_str(&get("timestamps")?)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let read = |k: &str| -> Result<(Vec<usize>, Vec<f32>)> {
        let v = st.tensor(k).map_err(|e| bad(e.to_string()))?;
        let data = v
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((v.shape().to_vec(), data))
    };
    let (fs, frames) = read("frames")?;
    let (es, events) = read("events")?;
    if fs.len() != 4 || es.len() != 4 || fs[0] != positions.len() || es[0] != positions.len() {
        return Err(bad("tensor shapes disagree with the sample count".into()));
    }
    Ok(PreparedSet {
        name: get("name")?,
        frames,
        events,
        positions,
        timestamps,
        frame_channels: fs[1],
        width: fs[3],
        height: fs[2],
    })
}

/// Load a traverse through the cache. Returns the set and whether it was computed.
pub fn prepared_set(cfg: &RunConfig, name: &str) -> Result<(PreparedSet, bool)> {
    let dir = cfg.data.traverse_path(name);
    let cache = cache_path(cfg, &dir);
    if cache.exists() {
        match load_prepared(&cache) {
            Ok(set) => return Ok((set, false)),
            Err(e) => log::warn!("ignoring unreadable cache entry: {e}"),
        }
    }
    let traverse = load_traverse(&dir, &cfg.data.load)?;
    let set = PreparedSet::from_traverse(&traverse, &cfg.train.model)?;
    save_prepared(&cache, &set)?;
    Ok((set, true))
}

// ---- commands ------------------------------------------------------------------

pub fn cmd_synth(args: &SynthArgs) -> Result<Vec<String>> {
    let cfg = WorldConfig {
        places: args.places,
        image_size: args.image_size,
        seed: args.seed,
        ..Default::default()
    };
    let names = write_world(&args.out, &cfg)?;
    println!("wrote {} traverses under {}", names.len(), args.out.display());
    Ok(names)
}

pub fn cmd_prepare(args: &PrepareArgs) -> Result<Vec<PathBuf>> {
    let cfg = resolve_config(&args.common)?;
    cfg.validate()?;
    let names: Vec<String> = if args.traverses.is_empty() {
        let d = &cfg.data;
        let mut v = vec![d.database.clone(), d.query.clone()];
        v.extend(d.validation.clone());
        v.extend(d.tests.iter().cloned());
        v.dedup();
        v
    } else {
        args.traverses.clone()
    };
    let mut out = Vec::new();
    for name in &names {
        let (set, computed) = prepared_set(&cfg, name)?;
        let path = cache_path(&cfg, &cfg.data.traverse_path(name));
        println!(
            "{name}: {} samples, {} -> {}",
            set.len(),
            if computed { "cached" } else { "already cached" },
            path.display()
        );
        out.push(path);
    }
    Ok(out)
}

/// Train per the resolved config; returns the output directory.
pub fn train_run(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<crate::training::TrainOutcome> {
    let (db, _) = prepared_set(cfg, &cfg.data.database)?;
    let (q, _) = prepared_set(cfg, &cfg.data.query)?;
    let val = match &cfg.data.validation {
        Some(v) => Some(prepared_set(cfg, v)?.0),
        None => None,
    };
    let trainer = Trainer {
        config: cfg.train.clone(),
        database: &db,
        query: &q,
        validation: val.as_ref().unwrap_or(&q),
        out_dir: Some(out.to_path_buf()),
    };
    match resume {
        None => trainer.run(),
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.meta.config.model != cfg.train.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model config",
                    p.display()
                )));
            }
            log::info!("resuming from {} (iteration {})", p.display(), ck.meta.iteration);
            trainer.run_with(ck.model)
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(a) = &args.ablation {
        cfg.train.model.ablation = parse_ablation(a)?;
    }
    if let Some(n) = args.iterations {
        cfg.train.max_iterations = Some(n);
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.train.learning_rate = lr;
    }
    cfg.validate()?;
    let out = out_dir(&cfg, "train");
    let inputs = [Some(&cfg.data.database), Some(&cfg.data.query), cfg.data.validation.as_ref()]
        .into_iter()
        .flatten()
        .map(|n| cfg.data.traverse_path(n))
        .collect();
    let mut run = Run::start("train", &cfg, inputs, &out)?;
    let t = Instant::now();
    let result = train_run(&cfg, &out, args.resume.as_deref());
    run.time("train", t);
    if let Ok(o) = &result {
        run.manifest.outputs.push(out.join("train_log.jsonl"));
        run.manifest.outputs.push(out.join("last.safetensors"));
        run.manifest.outputs.extend(o.best_checkpoint.clone());
        println!(
            "trained {} iterations, best validation Recall@1 {:.4}",
            o.iterations, o.best_recall_at_1
        );
    }
    run.finish(&result)?;
    result.map(|_| out)
}

/// Rank `query` against `db`, write the bundle to `dir`.
pub fn evaluate_into(
    model: &FusionVpr,
    cfg: &RunConfig,
    db: &PreparedSet,
    db_index: &[f32],
    query: &PreparedSet,
    dir: &Path,
) -> Result<(RetrievalReport, Vec<PathBuf>)> {
    let dim = model.config.descriptor_len();
    let q = build_index(model, query, cfg.eval.batch)?;
    let report = evaluate(
        distance_matrix(&q, db_index, dim)?,
        &query.positions,
        &db.positions,
        cfg.eval.phi,
        &cfg.eval.recall_ns,
        &query.name,
    )?;
    let files = write_report(dir, &report)?;
    Ok((report, files))
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Vec<RetrievalReport>> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(phi) = args.phi {
        cfg.eval.phi = phi;
    }
    let ck = load_checkpoint(&args.checkpoint)?;
    // The model shape comes from the checkpoint, not the file config.
    cfg.train.model = ck.model.config.clone();
    cfg.data.load.frame_channels = cfg.train.model.frame_channels;
    cfg.validate()?;
    if let Some(d) = &args.database {
        cfg.data.database = d.clone();
    }
    let queries = if args.queries.is_empty() { cfg.data.tests.clone() } else { args.queries.clone() };
    let out = out_dir(&cfg, "evaluate");
    let mut inputs = vec![args.checkpoint.clone(), cfg.data.traverse_path(&cfg.data.database)];
    inputs.extend(queries.iter().map(|q| cfg.data.traverse_path(q)));
    let mut run = Run::start("evaluate", &cfg, inputs, &out)?;
    let t = Instant::now();
    let result = (|| {
        let (db, _) = prepared_set(&cfg, &cfg.data.database)?;
        let db_index = build_index(&ck.model, &db, cfg.eval.batch)?;
        let mut reports = Vec::new();
        let mut files = Vec::new();
        if args.export_descriptors {
            let p = out.join(format!("{}.descriptors.f32", db.name));
            write_descriptors(&p, &db_index, &manifest_for(&ck.model, &db, &ck.id))?;
            files.push(p);
        }
        for name in &queries {
            let (q, _) = prepared_set(&cfg, name)?;
            let dir = out.join(&q.name);
            let (report, written) = evaluate_into(&ck.model, &cfg, &db, &db_index, &q, &dir)?;
            if args.export_descriptors {
                let p = dir.join("descriptors.f32");
                let rows = build_index(&ck.model, &q, cfg.eval.batch)?;
                write_descriptors(&p, &rows, &manifest_for(&ck.model, &q, &ck.id))?;
                files.push(p);
            }
            println!(
                "{}: Recall@1 {:.4}  F1-max {:.4}  -> {}",
                q.name,
                report.recall_at_1(),
                report.f1_max,
                dir.display()
            );
            files.extend(written);
            reports.push(report);
        }
        Ok((reports, files))
    })();
    run.time("evaluate", t);
    let result = result.map(|(r, files)| {
        run.manifest.outputs = files;
        r
    });
    run.finish(&result)?;
    result
}

fn manifest_for(model: &FusionVpr, set: &PreparedSet, id: &str) -> DescriptorManifest {
    DescriptorManifest {
        count: set.len(),
        dimension: model.config.descriptor_len(),
        source_traverse: set.name.clone(),
        checkpoint_id: id.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub preset: String,
    pub split: String,
    pub recall_at_1: f64,
    pub recalls: BTreeMap<String, f64>,
    pub f1_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionCheck {
    pub split: String,
    pub fused: f64,
    pub frame_only: f64,
    pub event_only: f64,
    pub fused_not_worse: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    pub fusion_checks: Vec<FusionCheck>,
}

impl AblationSummary {
    pub fn recall(&self, preset: &str, split: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.preset == preset && r.split == split)
            .map(|r| r.recall_at_1)
    }
}

/// Train every preset in `presets` under `cfg`, score each test split.
pub fn run_ablation(cfg: &RunConfig, presets: &[&str], out: &Path) -> Result<AblationSummary> {
    let (db, _) = prepared_set(cfg, &cfg.data.database)?;
    let tests: Vec<PreparedSet> = cfg
        .data
        .tests
        .iter()
        .map(|t| prepared_set(cfg, t).map(|s| s.0))
        .collect::<Result<_>>()?;
    let mut summary = AblationSummary::default();
    for &preset in presets {
        let mut c = cfg.clone();
        c.train.model.ablation = Ablation::preset(preset)?;
        c.validate()?;
        let dir = out.join(preset);
        log::info!("ablation preset {preset}");
        let outcome = train_run(&c, &dir, None)?;
        let index = build_index(&outcome.model, &db, c.eval.batch)?;
        for q in &tests {
            let (r, _) = evaluate_into(&outcome.model, &c, &db, &index, q, &dir.join(&q.name))?;
            summary.rows.push(AblationRow {
                preset: preset.to_string(),
                split: q.name.clone(),
                recall_at_1: r.recall_at_1(),
                recalls: r.recalls.iter().map(|(n, v)| (n.to_string(), *v)).collect(),
                f1_max: r.f1_max,
            });
        }
    }
    for split in ["glare", "no_events"] {
        let (Some(f), Some(fo), Some(eo)) = (
            summary.recall("full", split),
            summary.recall("frame_only", split),
            summary.recall("event_only", split),
        ) else {
            continue;
        };
        summary.fusion_checks.push(FusionCheck {
            split: split.into(),
            fused: f,
            frame_only: fo,
            event_only: eo,
            fused_not_worse: f >= fo && f >= eo,
        });
    }
    let mut csv = String::from("preset,split,recall_at_1,f1_max\n");
    for r in &summary.rows {
        csv.push_str(&format!("{},{},{},{}\n", r.preset, r.split, r.recall_at_1, r.f1_max));
    }
    write(&out.join("ablation.csv"), &csv)?;
    write(&out.join("ablation.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<AblationSummary> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(n) = args.iterations {
        cfg.train.max_iterations = Some(n);
    }
    cfg.validate()?;
    let presets: Vec<String> = match &args.presets {
        Some(p) => p.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => ABLATION_PRESETS.iter().map(|(n, _)| n.to_string()).collect(),
    };
    for p in &presets {
        Ablation::preset(p)?;
    }
    let out = out_dir(&cfg, "ablate");
    let mut inputs = vec![cfg.data.traverse_path(&cfg.data.database), cfg.data.traverse_path(&cfg.data.query)];
    inputs.extend(cfg.data.tests.iter().map(|t| cfg.data.traverse_path(t)));
    let mut run = Run::start("ablate", &cfg, inputs, &out)?;
    let t = Instant::now();
    let names: Vec<&str> = presets.iter().map(String::as_str).collect();
    let result = run_ablation(&cfg, &names, &out);
    run.time("ablate", t);
    if let Ok(s) = &result {
        run.manifest.outputs = vec![out.join("ablation.csv"), out.join("ablation.json")];
        for r in &s.rows {
            println!("{:<30} {:<12} Recall@1 {:.4}", r.preset, r.split, r.recall_at_1);
        }
        for c in &s.fusion_checks {
            println!(
                "{}: fused {:.4} vs frame-only {:.4}, event-only {:.4} -> {}",
                c.split,
                c.fused,
                c.frame_only,
                c.event_only,
                if c.fused_not_worse { "fused not worse" } else { "fused WORSE" }
            );
        }
    }
    run.finish(&result)?;
    result
}

pub fn cmd_plot(args: &PlotArgs) -> Result<Vec<PathBuf>> {
    let mut all = Vec::new();
    for dir in &args.reports {
        let files = render_plots(dir)?;
        for f in &files {
            println!("{}", f.display());
        }
        all.extend(files);
    }
    Ok(all)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(drop),
        Command::Prepare(a) => cmd_prepare(a).map(drop),
        Command::Train(a) => cmd_train(a).map(drop),
        Command::Evaluate(a) => cmd_evaluate(a).map(drop),
        Command::Ablate(a) => cmd_ablate(a).map(drop),
        Command::Plot(a) => cmd_plot(a).map(drop),
    }
}

/// Tiny model config used by tests and the synthetic quick-start.
pub fn compact_model() -> ModelConfig {
    ModelConfig {
        width: 8,
        encoder_blocks: 1,
        stage2_blocks: 1,
        stage3_blocks: 1,
        clusters: 8,
        input_width: 64,
        input_height: 64,
        reduction: 4,
        frozen_bn: true,
        ..Default::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_flag_accepts_presets_and_switches() {
        assert_eq!(parse_ablation("frame_only").unwrap(), Ablation::preset("frame_only").unwrap());
        assert_eq!(
            parse_ablation("single_scale:16,no_attention").unwrap(),
            Ablation::preset("single_scale_16_no_attention").unwrap()
        );
        assert!(parse_ablation("frame_only,event_only").is_err());
        assert!(parse_ablation("bogus").is_err());
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let c = Cli::try_parse_from(["fevpr", "train", "--ablation", "frame_only", "--seed", "7"]).unwrap();
        match c.command {
            Command::Train(t) => {
                assert_eq!(t.ablation.as_deref(), Some("frame_only"));
                assert_eq!(t.common.seed, Some(7));
            }
            _ => panic!(),
        }
    }

    #[test]
    fn precedence_cli_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[train]\nseed = 3\nmargin = 0.2\n[data]\ncache_dir = \"from_file\"\n").unwrap();
        let mut common = Common {
            config: Some(p),
            ..Default::default()
        };
        let c = resolve_config(&common).unwrap();
        assert_eq!((c.train.seed, c.train.margin), (3, 0.2));
        assert_eq!(c.train.learning_rate, 1e-4);
        common.seed = Some(9);
        common.cache_dir = Some("from_flag".into());
        let c = resolve_config(&common).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.data.cache_dir, PathBuf::from("from_flag"));
    }
}
