use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn tripool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tripool"))
        .args(args)
        .output()
        .expect("spawn tripool")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn dataset(&self) -> PathBuf {
        self.root.join("data")
    }

    /// Desk config pointed at the fixture dataset with the given overrides.
    fn config(&self, name: &str, epochs: usize, k_tokens: usize, d: usize) -> PathBuf {
        let path = self.root.join(format!("{name}.json"));
        let json = serde_json::json!({
            "architecture": { "d": d, "heads": 4, "head_dim": d / 4, "layers": 2, "k_tokens": k_tokens },
            "training": { "epochs": epochs, "batch_size": 8, "optimizer": { "lr": 0.003 } },
            "seed": 7,
            "dataset": self.dataset(),
            "output": self.root.join("runs").join(name),
        });
        fs::write(&path, json.to_string()).unwrap();
        path
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let spec = root.join("spec.json");
        fs::write(&spec, r#"{"train": 24, "valid": 8, "test": 512, "seed": 3}"#).unwrap();
        let out = tripool(&["synth", "--spec", p(&spec), "--out", p(&root.join("data"))]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Fixture { _dir: dir, root }
    })
}

#[test]
fn synth_manifest_lists_three_splits_and_hash_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"train": 6, "valid": 3, "test": 4, "seed": 11}"#).unwrap();
    let hash = |sub: &str| {
        let out = tripool(&["synth", "--spec", p(&spec), "--out", p(&dir.path().join(sub))]);
        assert_eq!(out.status.code(), Some(0));
        stdout(&out)
            .lines()
            .find(|l| l.starts_with("manifest sha256"))
            .unwrap()
            .to_string()
    };
    assert_eq!(hash("a"), hash("b"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    for (split, n) in [("train", 6), ("valid", 3), ("test", 4)] {
        assert_eq!(manifest[split].as_array().unwrap().len(), n);
    }
}

#[test]
fn synth_rejects_bad_geometry_with_exit_2() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"patch": 7}"#).unwrap();
    let out = tripool(&["synth", "--spec", p(&spec), "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn tiny_training_runs_log_each_epoch_and_repeat_exactly() {
    let f = fixture();
    let config = f.config("tiny", 2, 4, 16);
    let run = |out: &str| {
        let o = tripool(&["train", "--config", p(&config), "--output", p(&f.root.join(out))]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let first = run("tiny_a");
    let second = run("tiny_b");
    let final_loss = |s: &str| s.lines().find(|l| l.contains("final train loss")).unwrap().to_string();
    assert_eq!(final_loss(&first), final_loss(&second));
    let log = fs::read_to_string(f.root.join("tiny_a/train_log.csv")).unwrap();
    assert!(log.lines().count() >= 3);
    assert!(f.root.join("tiny_a/checkpoint.bin").exists());
    assert!(f.root.join("tiny_a/config.json").exists());
}

#[test]
fn no_attention_logs_zero_pool_flops() {
    let f = fixture();
    let config = f.config("noattn", 1, 4, 16);
    let o = tripool(&["train", "--config", p(&config), "--variant", "no_attention"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(f.root.join("runs/noattn/train_log.csv")).unwrap();
    assert!(log.lines().next().unwrap().ends_with("pool_flops"));
    assert!(log.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn training_without_dataset_exits_2() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("c.json");
    fs::write(
        &config,
        format!(r#"{{"dataset": "{}"}}"#, p(&dir.path().join("missing"))),
    )
    .unwrap();
    assert_eq!(tripool(&["train", "--config", p(&config)]).status.code(), Some(2));
    let o = tripool(&["train", "--config", p(&config), "--variant", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn overfit_run_is_perfect_on_its_training_split() {
    let f = fixture();
    let config = f.config("overfit", 150, 4, 16);
    let o = tripool(&["train", "--config", p(&config)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv_path = f.root.join("overfit_train.csv");
    let ckpt = f.root.join("runs/overfit/checkpoint.bin");
    let o = tripool(&[
        "eval",
        "--config",
        p(&config),
        "--checkpoint",
        p(&ckpt),
        "--split",
        "train",
        "--out",
        p(&csv_path),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().count(), 4 + 2);
    for line in csv.lines().skip(1) {
        let acc: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(acc, 1.0, "{line}");
    }
}

#[test]
fn untrained_model_is_near_chance() {
    let f = fixture();
    let config = f.config("untrained", 1, 4, 16);
    let o = tripool(&["eval", "--config", p(&config), "--split", "test"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = stdout(&o);
    assert_eq!(csv.lines().count(), 4 + 2);
    for line in csv.lines().skip(1).take(4) {
        let acc: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((acc - 0.5).abs() <= 0.15, "{line}");
    }
}

#[test]
fn checkpoint_shape_mismatch_exits_2() {
    let f = fixture();
    let small = f.config("mismatch_small", 1, 4, 16);
    assert_eq!(tripool(&["train", "--config", p(&small)]).status.code(), Some(0));
    let wide = f.config("mismatch_wide", 1, 4, 32);
    let ckpt = f.root.join("runs/mismatch_small/checkpoint.bin");
    let o = tripool(&["eval", "--config", p(&wide), "--checkpoint", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let o = tripool(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0));
    let table = stdout(&o);
    assert!(table.lines().filter(|l| l.ends_with(" ok")).count() >= 10);
    let o = tripool(&["gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn full_scale_flops_ratio_and_determinism() {
    let args = ["bench", "--mode", "flops", "--k", "32", "--full-scale"];
    let a = tripool(&args);
    assert_eq!(a.status.code(), Some(0));
    let csv = stdout(&a);
    let full = csv.lines().find(|l| l.starts_with("full,")).unwrap();
    let ratio: f64 = full.rsplit(',').next().unwrap().parse().unwrap();
    assert!(ratio >= 2.5, "{full}");
    let alias = args.map(|a| if a == "--full-scale" { "--paper-scale" } else { a });
    assert_eq!(csv, stdout(&tripool(&alias)));
}

#[test]
fn time_bench_has_one_row_per_variant_and_k() {
    let o = tripool(&[
        "bench",
        "--mode",
        "time",
        "--k",
        "4,8",
        "--lengths",
        "16,16,8",
        "--runs",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 1 + 2 * 2);
    assert_eq!(tripool(&["bench", "--variant", "nope"]).status.code(), Some(2));
}

#[test]
fn attention_dump_writes_three_normalized_maps() {
    let f = fixture();
    let config = f.config("dump", 2, 4, 16);
    assert_eq!(tripool(&["train", "--config", p(&config)]).status.code(), Some(0));
    let ckpt = f.root.join("runs/dump/checkpoint.bin");
    let out = f.root.join("maps");
    let o = tripool(&[
        "attn-dump",
        "--config",
        p(&config),
        "--checkpoint",
        p(&ckpt),
        "--sample",
        "0",
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut csvs: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    csvs.sort();
    assert_eq!(csvs, ["acoustic.csv", "visual_pass1.csv", "visual_pass2.csv"]);
    for name in &csvs {
        let mut sums = std::collections::BTreeMap::<usize, f64>::new();
        for line in fs::read_to_string(out.join(name)).unwrap().lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            *sums.entry(cols[1].parse().unwrap()).or_default() += cols[3].parse::<f64>().unwrap();
        }
        assert_eq!(sums.len(), 4);
        assert!(sums.values().all(|s| (s - 1.0).abs() <= 1e-6), "{name}: {sums:?}");
    }
    assert!(stdout(&o).contains("visual_pass2"));

    let o = tripool(&[
        "attn-dump",
        "--config",
        p(&config),
        "--checkpoint",
        p(&ckpt),
        "--sample",
        "99999",
        "--out",
        p(&f.root.join("maps_missing")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let desk: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("configs/desk.json")).unwrap()).unwrap();
    assert_eq!(desk["architecture"]["k_tokens"], 8);
    let dir = TempDir::new().unwrap();
    let spec = root.join("configs/synth.json");
    let text = fs::read_to_string(&spec)
        .unwrap()
        .replace("\"train\": 256", "\"train\": 2");
    let small = dir.path().join("s.json");
    fs::write(&small, text).unwrap();
    assert_eq!(
        tripool(&["synth", "--spec", p(&small), "--out", p(&dir.path().join("d"))])
            .status
            .code(),
        Some(0)
    );
}
