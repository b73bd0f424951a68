//! End-to-end runs of the `cosmo` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn cosmo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cosmo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cosmo(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const CONFIG: &str = "kappa_lower = 0.4\nkappa_upper = 0.6\nkappa_known = 0.6\n";

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, format!("{CONFIG}{extra}")).unwrap();
    path
}

/// Synthetic dataset plus a config, in a fresh directory.
fn synthetic(extra: &str) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--seed", "2"]);
    let cfg = write_config(dir.path(), extra);
    (dir, data, cfg)
}

const OFFICE31: [&str; 31] = [
    "back_pack", "bike", "bike_helmet", "bookcase", "bottle", "calculator", "desk_chair", "desk_lamp",
    "desktop_computer", "file_cabinet", "headphones", "keyboard", "laptop_computer", "letter_tray", "mobile_phone",
    "monitor", "mouse", "mug", "paper_notebook", "pen", "phone", "printer", "projector", "punchers", "ring_binder",
    "ruler", "scissors", "speaker", "stapler", "tape_dispenser", "trash_can",
];
// Images of the first ten classes in the DSLR and Webcam domains.
const DSLR_KNOWN: [usize; 10] = [12, 21, 24, 12, 16, 12, 13, 14, 15, 15];
const WEBCAM_KNOWN: [usize; 10] = [29, 21, 28, 12, 16, 31, 40, 18, 21, 19];

/// Manifest with the Office-31 class list. Known-class counts of DSLR and
/// Webcam follow the dataset; the 21 other classes share each domain's
/// remaining images (498 and 795 images in total).
fn office31_manifest(root: &Path) {
    fs::create_dir_all(root).unwrap();
    let mut text = String::from("relative_path\tclass_name\tdomain\n");
    let mut row = |domain: &str, class: &str, n: usize| {
        for i in 0..n {
            text.push_str(&format!("{domain}/{class}/{i:04}.jpg\t{class}\t{domain}\n"));
        }
    };
    for class in OFFICE31 {
        row("amazon", class, 2);
    }
    for (domain, known, total) in [("dslr", DSLR_KNOWN, 498usize), ("webcam", WEBCAM_KNOWN, 795)] {
        for (class, n) in OFFICE31.iter().zip(known) {
            row(domain, class, n);
        }
        let rest = total - known.iter().sum::<usize>();
        for (i, class) in OFFICE31[10..].iter().enumerate() {
            row(domain, class, rest / 21 + usize::from(i < rest % 21));
        }
    }
    fs::write(root.join("manifest.tsv"), text).unwrap();
}

#[test]
fn split_prints_office31_target_counts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("office31");
    office31_manifest(&root);
    let a = dir.path().join("a.json");
    let out = ok(&[
        "split", "--dataset", p(&root), "--n-known", "10", "--source", "amazon", "--targets", "dslr,webcam", "--out", p(&a),
    ]);
    let totals = out.lines().find(|l| l.starts_with("all targets")).unwrap();
    let numbers: Vec<&str> = totals.split_whitespace().skip(2).collect();
    assert_eq!(numbers, ["389", "904"], "{out}");
    let split = read_json(&a);
    assert_eq!(split["known_classes"].as_array().unwrap().len(), 10);
    assert_eq!(split["unknown_classes"].as_array().unwrap().len(), 21);
    assert_eq!(split["known_classes"][9], "file_cabinet");

    let b = dir.path().join("b.json");
    ok(&["split", "--dataset", p(&root), "--n-known", "10", "--source", "amazon", "--targets", "dslr,webcam", "--out", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn split_rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("office31");
    office31_manifest(&root);
    let out = dir.path().join("s.json");
    let closed = cosmo(&[
        "split", "--dataset", p(&root), "--n-known", "31", "--source", "amazon", "--targets", "dslr", "--out", p(&out),
    ]);
    assert_eq!(closed.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&closed.stderr).contains("closed set"));
    let missing = cosmo(&[
        "split", "--dataset", p(&dir.path().join("nope")), "--n-known", "3", "--source", "a", "--targets", "b", "--out", p(&out),
    ]);
    assert!(!missing.status.success());
}

#[test]
fn missing_kappa_lower_names_the_key() {
    let (dir, data, _) = synthetic("");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "kappa_upper = 0.6\nkappa_known = 0.6\n").unwrap();
    let out = cosmo(&["train", "--config", p(&cfg), "--split", p(&data.join("split.json")), "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kappa_lower"));
}

#[test]
fn toy_smoke_run_writes_manifest_and_finite_reports() {
    let (dir, data, cfg) = synthetic("total_iterations = 40\ncheckpoint_every = 10\n");
    let run = dir.path().join("run");
    let split = data.join("split.json");
    ok(&["train", "--config", p(&cfg), "--split", p(&split), "--out", p(&run), "--seed", "5"]);
    let manifest = read_json(&run.join("run.json"));
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config"]["seed"], 5);
    assert_eq!(manifest["completed_iterations"], 40);
    assert_eq!(manifest["backend"]["kind"], "toy");
    assert_eq!(manifest["tool_version"], env!("CARGO_PKG_VERSION"));
    assert!(Path::new(manifest["checkpoint_dir"].as_str().unwrap()).join("meta.json").is_file());
    let steps = fs::read_to_string(run.join("steps.jsonl")).unwrap();
    assert_eq!(steps.lines().count(), 40);
    for line in steps.lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        assert!(r["l_source"].as_f64().unwrap().is_finite());
        assert!(r["l_target"].as_f64().unwrap().is_finite());
    }
    let snapshot = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("seed = 5"));
}

fn blended(metrics: &Value) -> &Value {
    &metrics["metrics"]["blended"]
}

#[test]
fn resumed_run_matches_unbroken_run() {
    let (dir, data, cfg) = synthetic("total_iterations = 120\ncheckpoint_every = 40\n");
    let split = data.join("split.json");
    let full = dir.path().join("full");
    let parted = dir.path().join("parted");
    ok(&["train", "--config", p(&cfg), "--split", p(&split), "--out", p(&full)]);
    ok(&["train", "--config", p(&cfg), "--split", p(&split), "--out", p(&parted), "--halt-after", "100"]);
    let resumed = ok(&["train", "--config", p(&cfg), "--split", p(&split), "--out", p(&parted), "--resume"]);
    assert!(resumed.contains("resumed from iteration 80"), "{resumed}");
    assert_eq!(
        fs::read_to_string(full.join("steps.jsonl")).unwrap(),
        fs::read_to_string(parted.join("steps.jsonl")).unwrap()
    );
    let heldout = data.join("heldout");
    for run in [&full, &parted] {
        ok(&["eval", "--run", p(run), "--split", p(&split), "--dataset", p(&heldout)]);
    }
    let a = read_json(&full.join("metrics_targets.json"));
    let b = read_json(&parted.join("metrics_targets.json"));
    for key in ["os_star", "unk", "hos", "os"] {
        let (x, y) = (blended(&a)[key].as_f64().unwrap(), blended(&b)[key].as_f64().unwrap());
        assert!((x - y).abs() <= 1e-6, "{key}: {x} vs {y}");
    }
    assert_eq!(a["metrics"], b["metrics"]);
    for name in ["known_context", "unknown_context", "bias.w1", "bias.w2"] {
        let digest = |run: &Path| read_json(&run.join("checkpoint/meta.json"))["tensors"][name]["sha256"].clone();
        assert_eq!(digest(&full), digest(&parted), "{name}");
    }
}

#[test]
fn eval_reports_two_decimals_and_aggregates_per_domain() {
    let (dir, data, cfg) = synthetic("total_iterations = 30\n");
    let split = data.join("split.json");
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--split", p(&split), "--out", p(&run)]);
    let table = ok(&["eval", "--run", p(&run), "--split", p(&split), "--dataset", p(&data.join("heldout"))]);
    assert!(table.contains("HOS"));
    let doc = read_json(&run.join("metrics_targets.json"));
    let hos = blended(&doc)["hos"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&hos));
    assert_eq!((hos * 100.0).round() / 100.0, hos);
    let mut weighted = 0.0;
    let mut total = 0usize;
    for m in doc["metrics"]["per_domain"].as_object().unwrap().values() {
        let n = m["unknown_samples"].as_u64().unwrap() as usize;
        weighted += m["unk"].as_f64().unwrap() * n as f64;
        total += n;
    }
    assert_eq!(total as u64, blended(&doc)["unknown_samples"].as_u64().unwrap());
    // Inputs are rounded to two decimals.
    assert!((weighted / total as f64 - blended(&doc)["unk"].as_f64().unwrap()).abs() < 0.01);
}

#[test]
fn source_pool_reports_unk_as_not_available() {
    let (dir, data, cfg) = synthetic("total_iterations = 10\n");
    let split = data.join("split.json");
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--split", p(&split), "--out", p(&run)]);
    let table = ok(&["eval", "--run", p(&run), "--split", p(&split), "--pool", "source"]);
    assert!(table.contains("n/a"));
    let doc = read_json(&run.join("metrics_source.json"));
    let m = blended(&doc);
    assert_eq!(m["unk"], "n/a");
    assert!(m.get("hos").is_none());
    assert!(m["os_star"].is_number());
}

#[test]
fn eval_rejects_a_different_label_space() {
    let (dir, data, cfg) = synthetic("total_iterations = 5\n");
    let split = data.join("split.json");
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--split", p(&split), "--out", p(&run)]);
    let mut other = read_json(&split);
    let known = other["known_classes"].as_array_mut().unwrap();
    known.pop();
    other["dataset_root"] = Value::String(data.to_str().unwrap().into());
    let other_path = dir.path().join("other.json");
    fs::write(&other_path, serde_json::to_string(&other).unwrap()).unwrap();
    let out = cosmo(&["eval", "--run", p(&run), "--split", p(&other_path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("label space"));
}

#[test]
fn zero_shot_baseline_and_export() {
    let (dir, data, cfg) = synthetic("total_iterations = 5\n");
    let split = data.join("split.json");
    let out_dir = dir.path().join("baseline");
    ok(&["eval", "--baseline", "zero-shot", "--threshold", "0.5", "--split", p(&split), "--out", p(&out_dir)]);
    let doc = read_json(&out_dir.join("metrics_targets.json"));
    assert_eq!(doc["threshold"], 0.5);
    assert!((0.0..=100.0).contains(&blended(&doc)["hos"].as_f64().unwrap()));

    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--split", p(&split), "--out", p(&run)]);
    let exported = dir.path().join("emb");
    ok(&["export", "--run", p(&run), "--split", p(&split), "--out", p(&exported)]);
    let index = read_json(&exported.join("index.json"));
    assert!(index.to_string().contains("text:unknown"));
}

#[test]
fn params_table_matches_published_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "context_length = 8\n");
    let out = ok(&["params", "--config", p(&cfg)]);
    assert!(out.contains("37,408 (37.4K)"));
    assert!(out.contains("41,504 (41.5K)  (configured)"));
    assert!(out.contains("49,696 (49.7K)"));
}

#[test]
fn toy_backend_cannot_read_image_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = image_dataset(dir.path());
    let out = cosmo(&["cache", "--dataset", p(&root)]);
    assert_eq!(out.status.code(), Some(2));
}

fn clip_fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/clip_tiny")
}

/// `root/{photo,sketch}/{bike,mug,pen}/*.png`, one colour per class.
fn image_dataset(dir: &Path) -> PathBuf {
    let root = dir.join("images");
    let colours = [("bike", [200u8, 30, 30]), ("mug", [30, 200, 30]), ("pen", [30, 30, 200])];
    for (d, domain) in ["photo", "sketch"].into_iter().enumerate() {
        for (class, rgb) in colours {
            let class_dir = root.join(domain).join(class);
            fs::create_dir_all(&class_dir).unwrap();
            for i in 0..4u8 {
                let img = image::RgbImage::from_fn(40, 36, |x, y| {
                    let shade = ((x + y) as u8).wrapping_mul(3).wrapping_add(i * 7 + d as u8 * 40);
                    image::Rgb([rgb[0] ^ (shade / 4), rgb[1] ^ (shade / 4), rgb[2] ^ (shade / 4)])
                });
                img.save(class_dir.join(format!("{i}.png"))).unwrap();
            }
        }
    }
    root
}

#[test]
fn clip_backend_caches_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let root = image_dataset(dir.path());
    let weights = clip_fixture();
    let clip = ["--backend", "clip", "--weights", p(&weights)];
    let cached = ok(&[&["cache", "--dataset", p(&root)][..], &clip].concat());
    assert!(cached.contains("cached 24 features"), "{cached}");
    let split = dir.path().join("split.json");
    ok(&["split", "--dataset", p(&root), "--n-known", "2", "--source", "photo", "--targets", "sketch", "--out", p(&split)]);
    let cfg = write_config(dir.path(), "total_iterations = 4\nbatch_size = 4\ncheckpoint_every = 2\n");
    let run = dir.path().join("run");
    ok(&[&["train", "--config", p(&cfg), "--split", p(&split), "--out", p(&run)][..], &clip].concat());
    let manifest = read_json(&run.join("run.json"));
    assert_eq!(manifest["backend"]["kind"], "clip");
    assert_eq!(manifest["backend"]["info"]["feature_dim"], 24);
    ok(&[&["eval", "--run", p(&run), "--split", p(&split)][..], &clip].concat());
    let doc = read_json(&run.join("metrics_targets.json"));
    assert_eq!(blended(&doc)["samples"], 12);
    ok(&[&["eval", "--baseline", "zero-shot", "--split", p(&split)][..], &clip].concat());
}
