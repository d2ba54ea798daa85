use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robustshift"))
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist5k() -> PathBuf {
    repo().join("data/mnist5k")
}

/// Runs the binary with the cache under `tmp`.
fn run_in(tmp: &Path, args: &[&str]) -> Output {
    bin()
        .args(args)
        .env("ROBUSTSHIFT_CACHE_DIR", tmp.join("cache"))
        .env("ROBUSTSHIFT_DATA_DIR", tmp.join("data"))
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn num(v: &Value) -> f64 {
    v.as_str().expect("numbers are strings").parse().unwrap()
}

const SMOKE: &str = r#"
schema = 1
name = "smoke"
seed = 3
clip_ablation = true

[dataset]
source = "MNIST"
train_size = 200
test_size = 100

[model]
arch = "linear"

[train]
optimizer = "adam"
lr = [[0, 0.01]]
batch_size = 50
total_steps = 20

[attack]
eps = 0.1
alpha = 0.02
iters = 5

[[variants]]
name = "binarized"
transforms = ["binarize"]

[[variants]]
name = "smooth3"
transforms = ["smooth(s=3)"]

[[analysis]]
kind = "volume"
eps = 0.3
"#;

fn write_smoke(dir: &Path, out: &Path) -> PathBuf {
    let text = SMOKE.replace("MNIST", &mnist5k().display().to_string());
    let text = format!("output_dir = \"{}\"\n{text}", out.display());
    let path = dir.join("smoke.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn bounds_demo_reports_both_example_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = repo().join("configs/bounds_demo.cfg");
    let out = run_in(
        tmp.path(),
        &["run", cfg.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap(), "-q"],
    );
    json(&out);
    let report = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
    assert!(report.contains("0.9437"), "{report}");
    assert!(report.contains("0.9781"), "{report}");
    let r: Value = serde_json::from_str(&report).unwrap();
    assert_eq!(r["status"], "ok");
}

#[test]
fn bounds_verbs_print_both_forms() {
    let tmp = tempfile::tempdir().unwrap();
    let v = json(&run_in(tmp.path(), &["bounds", "cube", "--p", "0.9", "--eps", "0.5"]));
    assert!(num(&v["value"]) > 0.99);
    assert!(num(&v["exponential_lower"]) < num(&v["value"]));
    let v = json(&run_in(
        tmp.path(),
        &["bounds", "vuln", "--k", "10", "--eps", "0.09", "--domain", "ball", "--d", "3072"],
    ));
    assert!((0.977..=0.979).contains(&num(&v["value"])));
    assert_eq!(v["form"], "tight");
    let out = run_in(tmp.path(), &["bounds", "vuln", "--k", "10", "--eps", "0.09", "--domain", "ball"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.cfg");
    std::fs::write(&path, "schema = 1\nname = \"x\"\nlearning_rate = 0.1\n").unwrap();
    let out = run_in(tmp.path(), &["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rate"), "{err}");

    std::fs::write(&path, "schema = 1\nname = \"x\"\n[[bounds]]\nkind = \"cube\"\np = 2.0\neps = 0.1\n").unwrap();
    let out = run_in(tmp.path(), &["run", path.to_str().unwrap(), "-q"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bounds"));
}

#[test]
fn failed_stage_leaves_a_marked_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    // A single sphere point has no other class to measure distance to.
    let text = format!(
        r#"schema = 1
name = "fails"
output_dir = "{}"

[dataset]
source = "synthetic"
[dataset.synthetic]
kind = "spheres"
d = 3
n_train = 1
n_test = 1
r_inner = 1.0
r_outer = 1.3

[[analysis]]
kind = "interclass"
"#,
        out_dir.display()
    );
    let path = tmp.path().join("fails.cfg");
    std::fs::write(&path, text).unwrap();
    let out = run_in(tmp.path(), &["run", path.to_str().unwrap(), "-q"]);
    assert_eq!(out.status.code(), Some(3));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["status"], "failed");
    assert_eq!(r["failed_stage"], "analyze");
    assert!(r["error"].as_str().unwrap().contains("class"));
}

#[test]
fn reruns_and_cache_rebuilds_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a_dir, b_dir) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = write_smoke(tmp.path(), &a_dir);
    json(&run_in(tmp.path(), &["run", cfg.to_str().unwrap(), "-q"]));
    let cache = tmp.path().join("cache");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&cache).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 4, "two variants × two splits");
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();

    // Second run: without the cache, into another directory.
    std::fs::remove_dir_all(&cache).unwrap();
    json(&run_in(
        tmp.path(),
        &["run", cfg.to_str().unwrap(), "--output-dir", b_dir.to_str().unwrap(), "-q"],
    ));
    let second: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert!(first == second, "rebuilt caches differ");

    // Third run reads the cache.
    let c_dir = tmp.path().join("c");
    json(&run_in(
        tmp.path(),
        &["run", cfg.to_str().unwrap(), "--output-dir", c_dir.to_str().unwrap(), "-q"],
    ));
    let load = |d: &Path| -> Value { serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap() };
    let (a, b, c) = (load(&a_dir), load(&b_dir), load(&c_dir));
    for key in ["run_id", "runs", "analyses"] {
        assert_eq!(a[key], b[key], "{key}");
        assert_eq!(a[key], c[key], "{key}");
    }
    for r in a["runs"].as_array().unwrap() {
        let f = r["model_file"].as_str().unwrap();
        assert_eq!(std::fs::read(a_dir.join(f)).unwrap(), std::fs::read(c_dir.join(f)).unwrap());
    }
    let csv = std::fs::read_to_string(a_dir.join("results.csv")).unwrap();
    assert!(csv.starts_with("variant,clean_std,clean_adv,robust,robust_wrt_pred,robust_noclip\n"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv, std::fs::read_to_string(b_dir.join("results.csv")).unwrap());
}

#[test]
fn report_merge_concatenates_and_deduplicates() {
    let tmp = tempfile::tempdir().unwrap();
    let one = tmp.path().join("one");
    let two = tmp.path().join("two");
    let cfg = repo().join("configs/bounds_demo.cfg");
    json(&run_in(tmp.path(), &["run", cfg.to_str().unwrap(), "--output-dir", one.to_str().unwrap(), "-q"]));
    let other = tmp.path().join("other.cfg");
    std::fs::write(
        &other,
        "schema = 1\nname = \"other\"\n[[bounds]]\nkind = \"cube\"\np = 0.5\neps = 0.1\n",
    )
    .unwrap();
    json(&run_in(tmp.path(), &["run", other.to_str().unwrap(), "--output-dir", two.to_str().unwrap(), "-q"]));
    let (r1, r2) = (one.join("report.json"), two.join("report.json"));
    let (p1, p2) = (r1.to_str().unwrap(), r2.to_str().unwrap());

    let out = run_in(tmp.path(), &["report", "merge", p1, p2]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("run_id,variant,mode,metric,value"));
    let rows: Vec<&str> = lines.collect();
    // Four bounds and one Monte Carlo estimate, then one bound.
    assert_eq!(rows.len(), 6, "{text}");
    assert!(rows[..5].iter().all(|r| r.starts_with("bounds_demo-")));
    assert!(rows[5].starts_with("other-"));

    let out = run_in(tmp.path(), &["report", "merge", p1, p2, p1]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), text);
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipped 5 rows"));

    let out = run_in(tmp.path(), &["report", "merge"]);
    assert_eq!(out.status.code(), Some(2));

    let clash = tmp.path().join("clash.json");
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&r2).unwrap()).unwrap();
    v["schema"] = Value::from(99);
    std::fs::write(&clash, v.to_string()).unwrap();
    let out = run_in(tmp.path(), &["report", "merge", p1, clash.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema"));
}

#[test]
fn transform_train_attack_analyze_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = mnist5k();
    let s8 = t.join("s8.dsnc");
    let v = json(&run_in(
        t,
        &["transform", "--in", data.to_str().unwrap(), "--op", "saturate", "--p", "8", "--out", s8.to_str().unwrap()],
    ));
    assert_eq!(v["transforms"][0], "saturate(p=8)");
    let chained = t.join("chained.dsnc");
    let v = json(&run_in(
        t,
        &["transform", "--data", s8.to_str().unwrap(), "--chain", "smooth(s=3)", "--output", chained.to_str().unwrap()],
    ));
    assert_eq!(v["transforms"][1], "smooth(s=3)");
    assert_eq!(v["n"], 2000);

    let model = t.join("m.dsnm");
    let v = json(&run_in(
        t,
        &[
            "train", "--data", data.to_str().unwrap(), "--arch", "linear", "--lr", "0.01", "--steps", "30",
            "--train-size", "500", "--output", model.to_str().unwrap(),
        ],
    ));
    assert_eq!(v["model_hash"].as_str().unwrap().len(), 64);

    let attack = |extra: &[&str]| {
        let mut args = vec![
            "attack", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap(), "--eps", "0.1",
            "--iters", "5", "--alpha", "0.02", "--test-size", "200",
        ];
        args.extend_from_slice(extra);
        json(&run_in(t, &args))
    };
    let clipped = attack(&[]);
    assert!(num(&clipped["eval"]["clean_acc"]) > 0.5);
    assert!(num(&clipped["eval"]["robust_acc"]) <= num(&clipped["eval"]["clean_acc"]));
    let free = attack(&["--no-domain-clip", "--vs-prediction"]);
    assert_eq!(free["attack"]["clip_domain"], false);
    assert_eq!(free["attack"]["mode"], "vs-prediction");

    let out = run_in(t, &["analyze", "histogram", "--data", chained.to_str().unwrap(), "--bins", "8"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("bin,lo,hi,count"));
    let counts: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(counts.len(), 8);
    assert_eq!(counts.iter().sum::<f64>(), 2000.0 * 784.0);
    let summary: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(summary["kind"], "histogram");

    let out = run_in(t, &["analyze", "interclass", "--data", chained.to_str().unwrap()]);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().count(), 11, "header and ten classes");
    assert!(csv.starts_with("class,distance\n0,"));

    let summary_path = t.join("mc.json");
    let out = run_in(
        t,
        &["analyze", "mc-linear", "--hyperplane", "e1", "--d", "10", "--eps", "0.1", "--n", "20000", "--summary", summary_path.to_str().unwrap()],
    );
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("estimate,stderr\n"));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&summary_path).unwrap()).unwrap();
    assert!((num(&v["values"][0]) - 0.2).abs() < 4.0 * num(&v["stderr"]));
    let out = run_in(t, &["analyze", "volume", "--data", chained.to_str().unwrap(), "--eps", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fetch_resolves_relative_file_urls_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let src = t.join("src");
    std::fs::create_dir(&src).unwrap();
    std::fs::write(src.join("blob.bin"), b"payload").unwrap();
    let sha = "239f59ed55e737c77147cf55ad0c1b030b6d7ee748a7426952f9b852d5a935e5";
    let manifest = t.join("manifest.toml");
    std::fs::write(
        &manifest,
        format!("[[file]]\nname = \"blob\"\nurl = \"file://src/blob.bin\"\nsha256 = \"{sha}\"\n"),
    )
    .unwrap();
    let dest = t.join("dest");
    let args = ["fetch", manifest.to_str().unwrap(), "--dest", dest.to_str().unwrap()];
    let v = json(&run_in(t, &args));
    assert_eq!(std::fs::read(dest.join("blob.bin")).unwrap(), b"payload");
    // The second call must not read the source.
    std::fs::remove_file(src.join("blob.bin")).unwrap();
    assert_eq!(json(&run_in(t, &args)), v);

    std::fs::write(&manifest, format!("[[file]]\nname = \"blob\"\nurl = \"file://src/missing\"\nsha256 = \"{sha}\"\n")).unwrap();
    let out = run_in(t, &["fetch", manifest.to_str().unwrap(), "--dest", t.join("d2").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn shipped_sweep_config_validates() {
    let cfg = robustshift_cli::ExperimentConfig::load(&repo().join("configs/mnist_smooth_sweep.cfg")).unwrap();
    let names: Vec<String> = cfg.variants().into_iter().map(|v| v.name).collect();
    assert_eq!(names, ["binarized", "original", "smooth3", "smooth5"]);
    assert!(cfg.clip_ablation);
}
