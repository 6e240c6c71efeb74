use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
shots = 4
test_per_class = 4

[backbone]
depth = 2
text_width = 16
vision_width = 16
shared_width = 16
heads = 2

[pretrain]
steps = 3
per_class = 2

[prompt]
depth = 2
length = 1

[train]
epochs = 1
batch = 8

[protocols]
enabled = ["open_world"]
"#;

fn bmip(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bmip"))
        .args(args)
        .env("BMIP_OUTPUT_ROOT", root)
        .output()
        .expect("spawn bmip")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn run_dir_from(out: &str) -> PathBuf {
    let line = out.lines().find(|l| l.starts_with("artifacts in ")).expect("artifact line");
    PathBuf::from(line.trim_start_matches("artifacts in "))
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn dry_run_prints_plan_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("out");
    let cfg = tiny_config(tmp.path(), "");
    let o = bmip(&root, &["run", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("config digest") && text.contains("prompts"));
    assert!(!root.exists());
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[prompt]\ndepth = 9\n").unwrap();
    let o = bmip(tmp.path(), &["run", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("prompt.depth"), "{}", stderr(&o));

    fs::write(&cfg, "[prompt]\ndepht = 2\n").unwrap();
    let o = bmip(tmp.path(), &["run", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("depht"), "{}", stderr(&o));
}

#[test]
fn empty_seed_list_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    for seeds in ["", "0"] {
        let o = bmip(tmp.path(), &["run", "--seeds", seeds, "--dry-run"]);
        assert!(!o.status.success(), "seeds {seeds:?}");
        assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
    }
}

#[test]
fn two_strategies_share_one_backbone_and_report_renders() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("out");
    let cfg = tiny_config(tmp.path(), "");
    let c = cfg.to_str().unwrap();
    let a = bmip(&root, &["run", "--config", c, "--strategy", "independent", "--seeds", "1"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = bmip(&root, &["run", "--config", c, "--strategy", "bmip", "--seeds", "1"]);
    assert!(b.status.success(), "{}", stderr(&b));
    let (da, db) = (run_dir_from(&stdout(&a)), run_dir_from(&stdout(&b)));
    assert_ne!(da, db);
    let (ma, mb) = (manifest(&da), manifest(&db));
    assert_eq!(ma["backbone_digest"], mb["backbone_digest"]);
    assert_eq!(mb["backbone_cached"], true);
    assert_eq!(ma["status"], "complete");

    let r = bmip(&root, &["report", db.to_str().unwrap()]);
    assert!(r.status.success(), "{}", stderr(&r));
    let text = stdout(&r);
    assert!(text.contains("BMIP") && text.contains("± 0.00"), "{text}");
    assert_eq!(fs::read_to_string(db.join("report.txt")).unwrap(), text);
}

#[test]
fn rerun_reproduces_metric_files() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("out");
    let cfg = tiny_config(tmp.path(), "");
    let c = cfg.to_str().unwrap();
    let first = bmip(&root, &["run", "--config", c, "--seeds", "1,2"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let dir = run_dir_from(&stdout(&first));
    let before: Vec<Vec<u8>> = [1, 2].iter().map(|s| fs::read(dir.join(format!("seed-{s}/metrics.json"))).unwrap()).collect();
    let second = bmip(&root, &["run", "--config", c, "--seeds", "1,2"]);
    assert!(second.status.success());
    for (i, s) in [1, 2].iter().enumerate() {
        assert_eq!(fs::read(dir.join(format!("seed-{s}/metrics.json"))).unwrap(), before[i]);
    }
}

#[test]
fn report_refuses_a_tampered_run() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("out");
    let cfg = tiny_config(tmp.path(), "");
    let o = bmip(&root, &["run", "--config", cfg.to_str().unwrap(), "--seeds", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = run_dir_from(&stdout(&o));
    let text = fs::read_to_string(dir.join("config.toml")).unwrap();
    fs::write(dir.join("config.toml"), text.replace("epochs = 1", "epochs = 2")).unwrap();
    let r = bmip(&root, &["report", dir.to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(stderr(&r).contains("digest"), "{}", stderr(&r));
}

#[test]
fn failing_seeds_leave_a_partial_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("out");
    let cfg = tiny_config(tmp.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("epochs = 1", "epochs = 1\nlr = 1e300");
    fs::write(&cfg, text).unwrap();
    let o = bmip(&root, &["run", "--config", cfg.to_str().unwrap(), "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("seed 1 failed"), "{}", stderr(&o));
    let dir = run_dir_from(&stdout(&o));
    let m = manifest(&dir);
    assert_eq!(m["status"], "partial");
    assert_eq!(m["seeds"][0]["ok"], false);
}

#[test]
fn sweep_emits_one_table_for_all_strategies() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("out");
    let cfg = tiny_config(tmp.path(), "");
    let o = bmip(&root, &["sweep", "--config", cfg.to_str().unwrap(), "--seeds", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for label in ["BMIP", "IVLP", "Uni-directional", "Addition", "Attention", "Joint"] {
        assert!(text.lines().any(|l| l.starts_with(label)), "{label} missing:\n{text}");
    }
    assert!(text.contains("BMIP vs IVLP") && text.contains("BMIP vs Uni-directional"));
    let dir = text.lines().find_map(|l| l.strip_prefix("sweep written to ")).unwrap();
    assert!(Path::new(dir).join("sweep.json").exists());
}

#[test]
fn verification_verbs_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let g = bmip(tmp.path(), &["gradcheck", "--seeds", "1"]);
    assert!(g.status.success(), "{}", stdout(&g));
    assert!(stdout(&g).contains("pass"));
    let o = bmip(tmp.path(), &["oracle", "--seeds", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}
