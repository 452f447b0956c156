use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvne::eval::evaluate_run;
use mvne::io::{read_labels, read_matrix};
use mvne::kv::KeyValues;
use mvne::EvalConfig;
use tempfile::TempDir;

fn mvne(args: &[&dyn AsRef<std::ffi::OsStr>], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvne"))
        .args(args.iter().map(|a| a.as_ref()))
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn manifest(dir: &Path) -> KeyValues {
    let path = dir.join("manifest.txt");
    KeyValues::parse(&fs::read_to_string(&path).unwrap(), &path).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Smoke dataset plus a short training config.
fn setup() -> (TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(tmp.path(), "spec.txt", "n=100\nc=3\nviews=2\n");
    let data = tmp.path().join("data");
    ok(mvne(&[&"gen", &spec, &"--out", &data], tmp.path()));
    let cfg = write(tmp.path(), "cfg.txt", "trainer.epochs=15\n");
    (tmp, data, cfg)
}

fn train(tmp: &TempDir, data: &Path, cfg: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = tmp.path().join(name);
    let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> = vec![&"train", &data, &"--config", &cfg, &"--out", &out];
    for e in extra {
        args.push(e);
    }
    ok(mvne(&args, tmp.path()));
    out
}

#[test]
fn gen_writes_dataset_and_manifest() {
    let (_tmp, data, _) = setup();
    let mut names: Vec<String> = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["00-view0.edges", "01-view1.edges", "attributes.txt", "labels.txt", "manifest.txt", "spec.txt"]
    );
    let m = manifest(&data);
    assert_eq!(m.get("command"), Some("gen"));
    assert_eq!(m.get("status"), Some("done"));
    assert_eq!(m.get("spec.n"), Some("100"));
    assert!(m.get("defaulted").unwrap().split(',').any(|k| k == "p_in"));
    assert!(m.get("input.hash").is_some_and(|h| h.len() == 64));
    assert!(m.get("started").is_some() && m.get("finished").is_some());
    let g = mvne::io::load_dataset(&data).unwrap();
    assert_eq!((g.num_nodes(), g.num_views()), (100, 2));
}

#[test]
fn gen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(tmp.path(), "spec.txt", "n=60\nc=3\nviews=3\nseed=4\n");
    ok(mvne(&[&"gen", &spec, &"--out", &"a"], tmp.path()));
    ok(mvne(&[&"gen", &spec, &"--out", &"b"], tmp.path()));
    let (a, b) = (manifest(&tmp.path().join("a")), manifest(&tmp.path().join("b")));
    let digests: Vec<_> = a.iter().filter(|(k, _)| k.starts_with("output.sha256.")).collect();
    assert_eq!(digests.len(), 5);
    for (k, v) in digests {
        assert_eq!(b.get(k), Some(v), "{k}");
        let name = k.trim_start_matches("output.sha256.");
        assert_eq!(
            fs::read(tmp.path().join("a").join(name)).unwrap(),
            fs::read(tmp.path().join("b").join(name)).unwrap()
        );
    }
    assert_eq!(a.get("input.hash"), b.get("input.hash"));
}

#[test]
fn gen_rejects_inverted_probabilities() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(tmp.path(), "spec.txt", "p_in=0.01\np_out=0.2\n");
    let o = mvne(&[&"gen", &spec, &"--out", &"x"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("p_out < p_in"), "{}", stderr(&o));
}

#[test]
fn default_run_directory_is_timestamp_and_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(tmp.path(), "spec.txt", "n=30\n");
    let o = ok(mvne(&[&"--runs-root", &"runs", &"gen", &spec], tmp.path()));
    let printed = String::from_utf8(o.stdout).unwrap();
    let dir = tmp.path().join(printed.trim());
    let name = dir.file_name().unwrap().to_str().unwrap().to_string();
    let (stamp, hash) = name.split_once('-').unwrap();
    assert_eq!(stamp.len(), "20260101T000000Z".len());
    assert!(manifest(&dir).get("input.hash").unwrap().starts_with(hash));
}

#[test]
fn train_writes_embeddings_and_records_defaults() {
    let (tmp, data, cfg) = setup();
    let run = train(&tmp, &data, &cfg, "tr", &[]);
    let z = read_matrix(&run.join("embeddings.txt")).unwrap();
    assert_eq!(z.shape(), &[100, 64]);
    assert!(fs::read_to_string(run.join("embeddings.txt")).unwrap().starts_with("100 64\n"));
    let m = manifest(&run);
    let defaulted: Vec<&str> = m.get("defaulted").unwrap().split(',').collect();
    assert!(defaulted.contains(&"trainer.lr"));
    assert!(!defaulted.contains(&"trainer.epochs"));
    assert_eq!(m.get("config.trainer.lr"), Some("0.001"));
    assert_eq!(m.get("config.trainer.epochs"), Some("15"));
    let losses = fs::read_to_string(run.join("loss.txt")).unwrap();
    assert_eq!(losses.lines().filter(|l| !l.starts_with('#')).count(), 15);
    assert!(run.join("model.ckpt").exists());
}

#[test]
fn variant_flags_select_operators_and_objective() {
    let (tmp, data, cfg) = setup();
    let run = train(
        &tmp,
        &data,
        &cfg,
        "tr",
        &["--encoder", "mean", "--aggregator", "max", "--no-infomin", "--seed", "9"],
    );
    let m = manifest(&run);
    assert_eq!(m.get("config.encoder.variant"), Some("mean"));
    assert_eq!(m.get("config.aggregator.variant"), Some("max"));
    assert_eq!(m.get("config.objective.infomin"), Some("false"));
    assert_eq!(m.get("seed"), Some("9"));
    let ck = mvne::checkpoint::load_checkpoint(&run.join("model.ckpt"), Default::default()).unwrap();
    assert_eq!(ck.config.model.encoder, mvne::EncoderVariant::Mean);
    assert_eq!(ck.config.model.aggregator, mvne::AggregatorVariant::Max);
    assert!(!ck.config.model.objective.infomin);

    let o = mvne(&[&"train", &data, &"--encoder", &"sum"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn rerun_from_manifest_reproduces_outputs() {
    let (tmp, data, cfg) = setup();
    let a = train(&tmp, &data, &cfg, "a", &["--dump-view-weights"]);
    let snapshot = manifest(&a);
    let mut cfg_text = String::new();
    for (k, v) in snapshot.iter() {
        if let Some(key) = k.strip_prefix("config.") {
            cfg_text.push_str(&format!("{key}={v}\n"));
        }
    }
    let replay = write(tmp.path(), "replay.txt", &cfg_text);
    let b = train(&tmp, Path::new(snapshot.get("input.dataset").unwrap()), &replay, "b", &["--dump-view-weights"]);
    for f in ["embeddings.txt", "loss.txt", "model.ckpt", "view_weights.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(manifest(&b).get("input.hash"), snapshot.get("input.hash"));
    let beta = read_matrix(&a.join("view_weights.txt")).unwrap();
    assert_eq!(beta.shape(), &[100, 2]);
    for i in 0..100 {
        assert!((beta.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn eval_emits_per_run_and_mean_records() {
    let (tmp, data, cfg) = setup();
    let run = train(&tmp, &data, &cfg, "tr", &[]);
    let labels = data.join("labels.txt");
    ok(mvne(&[&"eval", &run, &"--labels", &labels, &"--runs", &"50", &"--out", &"ev"], tmp.path()));
    let records = fs::read_to_string(tmp.path().join("ev/records.txt")).unwrap();
    for metric in ["macro_f1", "micro_f1", "nmi"] {
        let lines: Vec<&str> = records.lines().filter(|l| l.starts_with(&format!("metric={metric} "))).collect();
        assert_eq!(lines.len(), 51, "{metric}");
        assert_eq!(lines.iter().filter(|l| l.contains("run=mean")).count(), 1);
    }
    let m = manifest(&tmp.path().join("ev"));
    assert!(m.get("metric.nmi").is_some());
    assert_eq!(m.get("eval.runs"), Some("50"));
}

#[test]
fn single_run_eval_matches_direct_evaluation() {
    let (tmp, data, cfg) = setup();
    let run = train(&tmp, &data, &cfg, "tr", &[]);
    let labels_path = data.join("labels.txt");
    ok(mvne(
        &[&"eval", &run.join("embeddings.txt"), &"--labels", &labels_path, &"--runs", &"1", &"--seed", &"6", &"--out", &"ev"],
        tmp.path(),
    ));
    let z = read_matrix(&run.join("embeddings.txt")).unwrap();
    let labels = read_labels(&labels_path, 100).unwrap();
    let direct = evaluate_run(&z, &labels, 3, &EvalConfig::default(), 6).unwrap();
    let records = fs::read_to_string(tmp.path().join("ev/records.txt")).unwrap();
    for (metric, v) in direct {
        assert!(records.contains(&format!("metric={metric} run=0 value={v}\n")), "{metric} {v}\n{records}");
        assert!(records.contains(&format!("metric={metric} run=mean value={v}\n")));
    }
}

#[test]
fn eval_requires_labels() {
    let (tmp, data, cfg) = setup();
    let run = train(&tmp, &data, &cfg, "tr", &[]);
    let o = mvne(&[&"eval", &run, &"--nmi-only"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--nmi-only"), "{}", stderr(&o));

    let o = mvne(&[&"eval", &run, &"--labels", &"missing.txt"], tmp.path());
    assert_eq!(code(&o), 3);

    let labels = data.join("labels.txt");
    ok(mvne(&[&"eval", &run, &"--labels", &labels, &"--runs", &"3", &"--nmi-only", &"--out", &"ev"], tmp.path()));
    let records = fs::read_to_string(tmp.path().join("ev/records.txt")).unwrap();
    assert_eq!(records.lines().count(), 4);
    assert!(records.lines().all(|l| l.starts_with("metric=nmi ")));
}

#[test]
fn export_writes_matrix_with_header() {
    let (tmp, data, cfg) = setup();
    let run = train(&tmp, &data, &cfg, "tr", &[]);
    ok(mvne(&[&"export", &run, &data, &"--out", &"ex", &"--dump-view-weights"], tmp.path()));
    let text = fs::read_to_string(tmp.path().join("ex/embeddings.txt")).unwrap();
    assert!(text.starts_with("100 64\n"));
    assert_eq!(text.lines().count(), 101);
    assert_eq!(text, fs::read_to_string(run.join("embeddings.txt")).unwrap());
    assert!(tmp.path().join("ex/view_weights.txt").exists());

    ok(mvne(&[&"export", &run, &data, &"--which", &"1", &"--out", &"ex1"], tmp.path()));
    assert_eq!(
        fs::read(tmp.path().join("ex1/embeddings.txt")).unwrap(),
        fs::read(run.join("view-1.txt")).unwrap()
    );
    assert_eq!(code(&mvne(&[&"export", &run, &data, &"--which", &"7"], tmp.path())), 2);
}

#[test]
fn export_checks_the_config_hash() {
    let (tmp, data, cfg) = setup();
    let run = train(&tmp, &data, &cfg, "tr", &[]);
    let ckpt = run.join("model.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let needle = b"trainer.patience=50";
    let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
    bytes[at + needle.len() - 1] = b'1';
    let tampered = write(tmp.path(), "tampered.ckpt", "");
    fs::write(&tampered, bytes).unwrap();

    let o = mvne(&[&"export", &tampered, &data, &"--out", &"ex"], tmp.path());
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("hash mismatch"), "{}", stderr(&o));
    ok(mvne(&[&"export", &tampered, &data, &"--allow-hash-mismatch", &"--out", &"ex"], tmp.path()));
}

#[test]
fn exit_codes_for_usage_data_and_numeric_failures() {
    let (tmp, data, _) = setup();
    assert_eq!(code(&mvne(&[&"train"], tmp.path())), 2);
    assert_eq!(code(&mvne(&[&"train", &data, &"--bogus"], tmp.path())), 2);
    let unknown = write(tmp.path(), "unknown.txt", "trainer.nope=1\n");
    assert_eq!(code(&mvne(&[&"train", &data, &"--config", &unknown], tmp.path())), 2);
    assert_eq!(code(&mvne(&[&"train", &"no-such-dir"], tmp.path())), 3);

    let huge = write(tmp.path(), "huge.txt", "trainer.lr=1e300\ntrainer.epochs=5\n");
    let o = mvne(&[&"train", &data, &"--config", &huge, &"--out", &"nf"], tmp.path());
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
    assert_eq!(manifest(&tmp.path().join("nf")).get("status"), Some("failed"));
}

fn table_rows(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("table.txt"))
        .unwrap()
        .lines()
        .skip(2)
        .filter(|l| !l.starts_with("---"))
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect()
}

#[test]
fn ablate_table_layout_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(tmp.path(), "spec.txt", "n=60\nc=3\nviews=2\n");
    ok(mvne(&[&"gen", &spec, &"--out", &"data"], tmp.path()));
    let cfg = write(tmp.path(), "cfg.txt", "trainer.epochs=5\nmodel.dim=16\n");
    let args: Vec<&dyn AsRef<std::ffi::OsStr>> =
        vec![&"ablate", &"data", &"--config", &cfg, &"--runs", &"2", &"--jobs", &"3", &"--out", &"ab"];
    ok(mvne(&args, tmp.path()));
    let ab = tmp.path().join("ab");
    assert_eq!(
        table_rows(&ab),
        ["CRE_V-mean", "CRE_V-max", "CRE_M-mean", "CRE_M-max", "CRE_C-ori", "CREME"]
    );
    let table = fs::read_to_string(ab.join("table.txt")).unwrap();
    assert!(table.starts_with("Variants"));
    assert!(table.lines().nth(1).unwrap().starts_with("---"));
    assert_eq!(table.lines().count(), 9);

    // Simulate an interruption: one cell never finished.
    let redo = "enc-mean_agg-attention_infomin";
    let keep = "enc-attention_agg-attention_infomin";
    let mut m = manifest(&ab);
    for metric in ["", ".macro_f1", ".micro_f1", ".nmi"] {
        m.remove(&format!("cell.{redo}{metric}"));
    }
    fs::write(ab.join("manifest.txt"), m.to_text()).unwrap();
    fs::remove_dir_all(ab.join("cells").join(redo)).unwrap();
    let kept_manifest = fs::read(ab.join("cells").join(keep).join("manifest.txt")).unwrap();
    fs::remove_file(ab.join("cells").join(keep).join("embeddings.txt")).unwrap();

    ok(mvne(&args, tmp.path()));
    assert!(ab.join("cells").join(redo).join("embeddings.txt").exists());
    assert!(!ab.join("cells").join(keep).join("embeddings.txt").exists());
    assert_eq!(fs::read(ab.join("cells").join(keep).join("manifest.txt")).unwrap(), kept_manifest);
    assert_eq!(manifest(&ab).get(&format!("cell.{redo}")), Some("done"));
    assert_eq!(table_rows(&ab).len(), 6);
    assert!(manifest(&ab).get("resumed").is_some());

    // Different settings must not reuse the directory.
    let o = mvne(&[&"ablate", &"data", &"--config", &cfg, &"--runs", &"3", &"--out", &"ab"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn ablate_full_grid_has_eighteen_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(tmp.path(), "spec.txt", "n=30\nc=3\nviews=2\n");
    ok(mvne(&[&"gen", &spec, &"--out", &"data"], tmp.path()));
    let cfg = write(tmp.path(), "cfg.txt", "trainer.epochs=2\nmodel.dim=8\nencoder.heads=2\n");
    ok(mvne(
        &[&"ablate", &"data", &"--grid", &"grid", &"--config", &cfg, &"--runs", &"1", &"--nmi-only", &"--jobs", &"4", &"--out", &"ab"],
        tmp.path(),
    ));
    let rows = table_rows(&tmp.path().join("ab"));
    assert_eq!(rows.len(), 18);
    assert_eq!(rows.last().unwrap(), "CREME");
    let mut unique = rows.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), 18);

    let list = write(tmp.path(), "cells.txt", "# two cells\nCREME\nenc-max_agg-mean_infomax\n");
    ok(mvne(
        &[&"ablate", &"data", &"--grid", &list, &"--config", &cfg, &"--runs", &"1", &"--nmi-only", &"--out", &"two"],
        tmp.path(),
    ));
    assert_eq!(table_rows(&tmp.path().join("two")), ["enc-max_agg-mean_infomax", "CREME"]);
}
