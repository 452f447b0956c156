use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use mvne::ablation::{format_table, parse_variants, AblationRow, Variant};
use mvne::checkpoint::{load_checkpoint, save_checkpoint, LoadOptions};
use mvne::io::{self, ATTRIBUTE_FILE, LABEL_FILE};
use mvne::kv::KeyValues;
use mvne::synthetic::{self, SPEC_KEYS};
use mvne::{evaluate, EmbeddingSet, EvalConfig, Metric, MultiViewGraph, SynthSpec, Tensor, TrainConfig};

use crate::run::{absolute, read_manifest, InputHash, Run};
use crate::{
    AblateArgs, CellArgs, EvalArgs, EvalOptions, ExportArgs, GenArgs, ModelFlags, TrainArgs, UsageError, WorkerFailed,
    EXIT_DATA,
};

const CHECKPOINT_FILE: &str = "model.ckpt";
const EMBEDDING_FILE: &str = "embeddings.txt";
const LOSS_FILE: &str = "loss.txt";
const VIEW_WEIGHT_FILE: &str = "view_weights.txt";
const CONFIG_FILE: &str = "config.txt";
const RECORD_FILE: &str = "records.txt";
const SUMMARY_FILE: &str = "summary.txt";
const TABLE_FILE: &str = "table.txt";

fn read_kv(path: &Path) -> Result<KeyValues> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(KeyValues::parse(&text, path)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Adds the dataset files the loader reads to `hash`; returns their paths.
fn hash_dataset(dir: &Path, hash: &mut InputHash, run_inputs: &mut Vec<(String, String)>) -> Result<()> {
    let mut files = io::dataset_edge_files(dir)?;
    if files.is_empty() {
        bail!(mvne::Error::Data(format!("{}: no .edges files", dir.display())));
    }
    files.push(dir.join(ATTRIBUTE_FILE));
    let labels = dir.join(LABEL_FILE);
    if labels.exists() {
        files.push(labels);
    }
    for f in files {
        let digest = hash.file(&f)?;
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        run_inputs.push((name, digest));
    }
    Ok(())
}

fn record_inputs(run: &mut Run, dataset: &Path, files: &[(String, String)]) {
    run.set("input.dataset", absolute(dataset));
    for (name, digest) in files {
        run.set(&format!("input.file.{name}"), digest);
    }
}

fn training_config(file: Option<&Path>, flags: &ModelFlags) -> Result<(TrainConfig, Vec<String>)> {
    let mut kv = match file {
        Some(p) => read_kv(p)?,
        None => KeyValues::default(),
    };
    if let Some(s) = flags.seed {
        kv.insert("trainer.seed", s);
    }
    if let Some(e) = flags.encoder {
        kv.insert("encoder.variant", e);
    }
    if let Some(a) = flags.aggregator {
        kv.insert("aggregator.variant", a);
    }
    if flags.no_infomin {
        kv.insert("objective.infomin", false);
    }
    Ok(TrainConfig::from_key_values(&kv)?)
}

fn eval_config(opts: &EvalOptions, seed: u64) -> EvalConfig {
    EvalConfig {
        runs: opts.runs,
        train_ratio: opts.train_ratio,
        base_seed: seed,
        nmi_only: opts.nmi_only,
        ..EvalConfig::default()
    }
}

fn eval_snapshot(run: &mut Run, cfg: &EvalConfig) {
    run.set("eval.runs", cfg.runs);
    run.set("eval.train_ratio", cfg.train_ratio);
    run.set("eval.seed", cfg.base_seed);
    run.set("eval.restarts", cfg.restarts);
    run.set("eval.nmi_only", cfg.nmi_only);
}

fn write_embeddings(run: &mut Run, emb: &EmbeddingSet, dump_view_weights: bool) -> Result<()> {
    io::write_matrix(&run.path(EMBEDDING_FILE), &emb.fused)?;
    run.output("embeddings", EMBEDDING_FILE);
    for (r, z) in emb.views.iter().enumerate() {
        let name = format!("view-{r}.txt");
        io::write_matrix(&run.path(&name), z)?;
        run.output(&format!("view.{r}"), &name);
    }
    if dump_view_weights {
        match &emb.view_weights {
            Some(b) => {
                io::write_matrix(&run.path(VIEW_WEIGHT_FILE), b)?;
                run.output("view_weights", VIEW_WEIGHT_FILE);
            }
            None => warn!("this aggregator has no view weights; nothing to dump"),
        }
    }
    Ok(())
}

/// Trains `cfg` on `g` inside `run`: checkpoint, embeddings, loss log.
fn train_into(run: &mut Run, g: &MultiViewGraph, cfg: &TrainConfig, dump_view_weights: bool) -> Result<EmbeddingSet> {
    let out = mvne::train(g, cfg)?;
    save_checkpoint(&run.path(CHECKPOINT_FILE), &out.params, cfg)?;
    run.output("checkpoint", CHECKPOINT_FILE);
    let mut log = String::from("# epoch loss\n");
    for (e, l) in out.history.iter().enumerate() {
        log.push_str(&format!("{e} {l}\n"));
    }
    write(&run.path(LOSS_FILE), &log)?;
    run.output("loss", LOSS_FILE);
    write_embeddings(run, &out.embeddings, dump_view_weights)?;
    run.set("metric.best_loss", out.best_loss);
    run.set("metric.best_epoch", out.best_epoch);
    run.set("metric.epochs_run", out.history.len());
    run.set("metric.final_loss", out.history.last().copied().unwrap_or(f64::NAN));
    Ok(out.embeddings)
}

fn eval_into(run: &mut Run, z: &Tensor, labels: &[usize], cfg: &EvalConfig) -> Result<mvne::EvalReport> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let report = evaluate(z, labels, classes, cfg)?;
    write(&run.path(RECORD_FILE), &report.to_records())?;
    run.output("records", RECORD_FILE);
    write(&run.path(SUMMARY_FILE), &report.to_table())?;
    run.output("summary", SUMMARY_FILE);
    for s in &report.series {
        run.set(&format!("metric.{}", s.metric), s.mean());
    }
    Ok(report)
}

pub fn gen(root: &Path, a: GenArgs) -> Result<PathBuf> {
    let mut kv = read_kv(&a.spec)?;
    if let Some(s) = a.seed {
        kv.insert("seed", s);
    }
    let defaulted: Vec<&str> = SPEC_KEYS.iter().copied().filter(|k| kv.get(k).is_none()).collect();
    let spec = SynthSpec::from_key_values(&kv)?;
    let mut hash = InputHash::default();
    hash.text("spec", &spec.to_text());
    let mut run = Run::create(root, a.out.as_deref(), "gen", &hash.finish())?;
    run.set("input.spec", absolute(&a.spec));
    run.snapshot("spec", &spec.to_key_values());
    run.set("seed", spec.seed);
    run.set("defaulted", defaulted.join(","));

    let g = synthetic::generate(&spec)?;
    for path in synthetic::save(&g, &run.dir)? {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let digest = crate::run::sha256_hex(&fs::read(&path)?);
        run.output(&name, &name);
        run.set(&format!("output.sha256.{name}"), digest);
    }
    let spec_path = synthetic::write_spec(&spec, &run.dir)?;
    let spec_name = spec_path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    run.output("spec", &spec_name);
    run.set("metric.nodes", g.num_nodes());
    run.set("metric.views", g.num_views());
    run.set("metric.features", g.num_features());
    run.finish()
}

pub fn train(root: &Path, a: TrainArgs) -> Result<PathBuf> {
    let (cfg, defaulted) = training_config(a.config.as_deref(), &a.model)?;
    let mut hash = InputHash::default();
    let mut files = Vec::new();
    hash_dataset(&a.dataset, &mut hash, &mut files)?;
    hash.text("config", &cfg.to_text());
    hash.text("dump_view_weights", &a.dump_view_weights.to_string());
    let mut run = Run::create(root, a.out.as_deref(), "train", &hash.finish())?;
    record_inputs(&mut run, &a.dataset, &files);
    if let Some(c) = &a.config {
        run.set("input.config", absolute(c));
    }
    run.snapshot("config", &cfg.to_key_values());
    run.set("seed", cfg.seed);
    run.set("defaulted", defaulted.join(","));
    run.set("dump_view_weights", a.dump_view_weights);
    write(&run.path(CONFIG_FILE), &cfg.to_text())?;
    run.output("config", CONFIG_FILE);
    run.save()?;

    let g = io::load_dataset(&a.dataset)?;
    let result = train_into(&mut run, &g, &cfg, a.dump_view_weights);
    if let Err(e) = result {
        run.set("status", "failed");
        run.set("error", format!("{e:#}").replace(['#', '\n'], " "));
        run.save()?;
        return Err(e);
    }
    run.finish()
}

fn missing_labels() -> anyhow::Error {
    anyhow::Error::new(UsageError(
        "labels are required: pass --labels FILE (clustering-only mode is --nmi-only, which still needs reference labels)"
            .into(),
    ))
}

pub fn eval(root: &Path, a: EvalArgs) -> Result<PathBuf> {
    let labels_path = a.labels.ok_or_else(missing_labels)?;
    if !labels_path.exists() {
        bail!(mvne::Error::Data(format!("label file {} does not exist", labels_path.display())));
    }
    let emb_path = if a.embeddings.is_dir() {
        a.embeddings.join(EMBEDDING_FILE)
    } else {
        a.embeddings.clone()
    };
    let cfg = eval_config(&a.eval, a.seed.unwrap_or(a.eval.eval_seed));
    let mut hash = InputHash::default();
    let emb_digest = hash.file(&emb_path)?;
    let label_digest = hash.file(&labels_path)?;
    hash.text("eval", &format!("{cfg:?}"));
    let mut run = Run::create(root, a.out.as_deref(), "eval", &hash.finish())?;
    run.set("input.embeddings", absolute(&emb_path));
    run.set("input.labels", absolute(&labels_path));
    run.set("input.file.embeddings", emb_digest);
    run.set("input.file.labels", label_digest);
    eval_snapshot(&mut run, &cfg);
    run.set("seed", cfg.base_seed);
    run.save()?;

    let z = io::read_matrix(&emb_path)?;
    let labels = io::read_labels(&labels_path, z.rows())?;
    let report = eval_into(&mut run, &z, &labels, &cfg)?;
    print!("{}", report.to_table());
    run.finish()
}

fn grid_spec(arg: &str) -> Result<Vec<Variant>> {
    let path = Path::new(arg);
    let spec = if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        text.lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .collect::<Vec<_>>()
            .join(",")
    } else {
        arg.to_string()
    };
    let variants = parse_variants(&spec)?;
    if variants.is_empty() {
        bail!(UsageError(format!("grid {arg:?} selects no variants")));
    }
    Ok(variants)
}

struct Worker {
    key: String,
    child: Child,
}

fn spawn_cell(a: &AblateArgs, run: &Run, key: &str) -> Result<Worker> {
    let exe = std::env::current_exe().context("locating the mvne executable")?;
    let mut cmd = Command::new(exe);
    cmd.arg("cell")
        .arg(&a.dataset)
        .arg("--config")
        .arg(run.path(CONFIG_FILE))
        .arg("--variant")
        .arg(key)
        .arg("--runs")
        .arg(a.eval.runs.to_string())
        .arg("--train-ratio")
        .arg(a.eval.train_ratio.to_string())
        .arg("--eval-seed")
        .arg(a.eval.eval_seed.to_string())
        .arg("--out")
        .arg(run.dir.join("cells").join(key))
        .stdin(Stdio::null())
        .stdout(Stdio::null());
    if a.eval.nmi_only {
        cmd.arg("--nmi-only");
    }
    let child = cmd.spawn().with_context(|| format!("starting worker for {key}"))?;
    info!("started cell {key} (pid {})", child.id());
    Ok(Worker {
        key: key.to_string(),
        child,
    })
}

pub fn ablate(root: &Path, a: AblateArgs) -> Result<PathBuf> {
    if a.jobs == 0 {
        bail!(UsageError("--jobs must be at least 1".into()));
    }
    let variants = grid_spec(&a.grid)?;
    let flags = ModelFlags {
        seed: a.seed,
        ..ModelFlags::default()
    };
    let (base, defaulted) = training_config(a.config.as_deref(), &flags)?;
    let g = io::load_dataset(&a.dataset)?;
    if g.labels().is_none() {
        bail!(mvne::Error::Data(format!("{}: ablation needs {LABEL_FILE}", a.dataset.display())));
    }

    let mut hash = InputHash::default();
    let mut files = Vec::new();
    hash_dataset(&a.dataset, &mut hash, &mut files)?;
    hash.text("config", &base.to_text());
    let keys: Vec<String> = variants.iter().map(Variant::key).collect();
    hash.text("variants", &keys.join(","));
    let eval = eval_config(&a.eval, a.eval.eval_seed);
    hash.text("eval", &format!("{eval:?}"));
    let mut run = Run::resume(root, a.out.as_deref(), "ablate", &hash.finish())?;
    record_inputs(&mut run, &a.dataset, &files);
    if let Some(c) = &a.config {
        run.set("input.config", absolute(c));
    }
    run.snapshot("config", &base.to_key_values());
    run.set("seed", base.seed);
    run.set("defaulted", defaulted.join(","));
    run.set("variants", keys.join(","));
    run.set("jobs", a.jobs);
    eval_snapshot(&mut run, &eval);
    write(&run.path(CONFIG_FILE), &base.to_text())?;
    run.output("config", CONFIG_FILE);
    run.save()?;

    let mut pending: VecDeque<String> = VecDeque::new();
    for key in &keys {
        if run.get(&format!("cell.{key}")) == Some("done") {
            info!("cell {key} already finished; skipping");
        } else {
            pending.push_back(key.clone());
        }
    }
    let mut active: Vec<Worker> = Vec::new();
    let mut failure: Option<WorkerFailed> = None;
    while !pending.is_empty() || !active.is_empty() {
        while active.len() < a.jobs {
            let Some(key) = pending.pop_front() else { break };
            active.push(spawn_cell(&a, &run, &key)?);
        }
        let mut still = Vec::with_capacity(active.len());
        for mut w in active {
            match w.child.try_wait()? {
                None => still.push(w),
                Some(status) if status.success() => {
                    let cell = read_manifest(&run.dir.join("cells").join(&w.key))?;
                    for m in Metric::ALL {
                        if let Some(v) = cell.get(&format!("metric.{m}")) {
                            run.set(&format!("cell.{}.{m}", w.key), v);
                        }
                    }
                    run.set(&format!("cell.{}", w.key), "done");
                    run.save()?;
                    info!("cell {} finished", w.key);
                }
                Some(status) => {
                    let code = status.code().map_or(EXIT_DATA, |c| c.clamp(1, 255) as u8);
                    warn!("cell {} failed ({status})", w.key);
                    run.set(&format!("cell.{}", w.key), "failed");
                    run.save()?;
                    failure.get_or_insert(WorkerFailed { cell: w.key, code });
                }
            }
        }
        active = still;
        if !active.is_empty() {
            thread::sleep(Duration::from_millis(50));
        }
    }

    let rows: Vec<AblationRow> = variants
        .iter()
        .filter(|v| run.get(&format!("cell.{}", v.key())) == Some("done"))
        .map(|v| {
            let get = |m: Metric| {
                run.get(&format!("cell.{}.{m}", v.key()))
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(f64::NAN)
            };
            AblationRow {
                variant: v.name.clone(),
                macro_f1: get(Metric::MacroF1),
                micro_f1: get(Metric::MicroF1),
                nmi: get(Metric::Nmi),
            }
        })
        .collect();
    let table = format_table(&rows);
    write(&run.path(TABLE_FILE), &table)?;
    run.output("table", TABLE_FILE);
    print!("{table}");
    if let Some(f) = failure {
        run.set("status", "failed");
        run.save()?;
        return Err(f.into());
    }
    run.finish()
}

pub fn cell(a: CellArgs) -> Result<PathBuf> {
    let variant = parse_variants(&a.variant)?
        .into_iter()
        .next()
        .ok_or_else(|| UsageError("no variant given".into()))?;
    let (base, _) = TrainConfig::from_key_values(&read_kv(&a.config)?)?;
    let cfg = variant.apply(&base);
    let eval = eval_config(&a.eval, a.eval.eval_seed);
    let mut hash = InputHash::default();
    let mut files = Vec::new();
    hash_dataset(&a.dataset, &mut hash, &mut files)?;
    hash.text("config", &cfg.to_text());
    hash.text("eval", &format!("{eval:?}"));
    let mut run = Run::create(Path::new("."), Some(&a.out), "cell", &hash.finish())?;
    record_inputs(&mut run, &a.dataset, &files);
    run.set("variant", &variant.name);
    run.snapshot("config", &cfg.to_key_values());
    run.set("seed", cfg.seed);
    eval_snapshot(&mut run, &eval);
    run.save()?;

    let g = io::load_dataset(&a.dataset)?;
    let labels = g
        .labels()
        .ok_or_else(|| mvne::Error::Data(format!("{}: no labels", a.dataset.display())))?
        .to_vec();
    let emb = train_into(&mut run, &g, &cfg, false)?;
    eval_into(&mut run, &emb.fused, &labels, &eval)?;
    run.finish()
}

pub fn export(root: &Path, a: ExportArgs) -> Result<PathBuf> {
    let ckpt_path = if a.checkpoint.is_dir() {
        a.checkpoint.join(CHECKPOINT_FILE)
    } else {
        a.checkpoint.clone()
    };
    let mut hash = InputHash::default();
    let ckpt_digest = hash.file(&ckpt_path)?;
    let mut files = Vec::new();
    hash_dataset(&a.dataset, &mut hash, &mut files)?;
    hash.text("which", &a.which);
    let mut run = Run::create(root, a.out.as_deref(), "export", &hash.finish())?;
    run.set("input.checkpoint", absolute(&ckpt_path));
    run.set("input.file.checkpoint", ckpt_digest);
    record_inputs(&mut run, &a.dataset, &files);
    run.set("which", &a.which);
    run.save()?;

    let ck = load_checkpoint(
        &ckpt_path,
        LoadOptions {
            allow_hash_mismatch: a.allow_hash_mismatch,
        },
    )?;
    run.snapshot("config", &ck.config.to_key_values());
    run.set("seed", ck.config.seed);
    let g = io::load_dataset(&a.dataset)?;
    if (g.num_features(), g.num_views()) != (ck.features, ck.views) {
        bail!(mvne::Error::Data(format!(
            "checkpoint expects {} features and {} views, dataset has {} and {}",
            ck.features,
            ck.views,
            g.num_features(),
            g.num_views()
        )));
    }
    let emb = ck.params.embed(&g, &ck.config.model)?;
    let z = match a.which.as_str() {
        "fused" => &emb.fused,
        v => {
            let r: usize = v
                .parse()
                .map_err(|_| UsageError(format!("--which expects fused or a view index, got {v:?}")))?;
            emb.views
                .get(r)
                .ok_or_else(|| UsageError(format!("view {r} out of range (0..{})", emb.views.len())))?
        }
    };
    io::write_matrix(&run.path(EMBEDDING_FILE), z)?;
    run.output("embeddings", EMBEDDING_FILE);
    run.set("metric.rows", z.rows());
    run.set("metric.dim", z.cols());
    if a.dump_view_weights {
        match &emb.view_weights {
            Some(b) => {
                io::write_matrix(&run.path(VIEW_WEIGHT_FILE), b)?;
                run.output("view_weights", VIEW_WEIGHT_FILE);
            }
            None => warn!("this aggregator has no view weights; nothing to dump"),
        }
    }
    run.finish()
}
