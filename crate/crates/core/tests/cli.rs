use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
master_seed = 3
budget = 20
buffer_capacity = 12
sequence = ["g_pattern", "g_shaping"]
sweep_budgets = [10, 20]

[corpus]
image_size = 24
patch_size = 16
real = { train = 40, val = 0, test = 20 }
baseline = { train = 30, val = 0, test = 21 }
emerging = { train = 20, val = 0, test = 10 }

[detector]
preset = "tiny"

[baseline_train]
epochs = 1
patch_size = 16

[expert_train]
epochs = 1
patch_size = 16

[cl.train]
epochs = 1
patch_size = 16

[ekfn_train]
steps = 5
"#;

fn e3lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_e3lab")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&e3lab(&["--help"])), 0);
    assert_eq!(code(&e3lab(&["frobnicate"])), 1);
    assert_eq!(code(&e3lab(&["run"])), 1);
    let cfg = config(dir.path(), TINY);
    let out = dir.path().join("o");
    let o = e3lab(&["run", "--config", s(&cfg), "--methods", "e3,bogus", "--out", s(&out)]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let o = e3lab(&["run", "--config", s(&cfg), "--protocol", "sweep", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    let o = e3lab(&["ablate", "--config", s(&cfg), "--variant", "deep", "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    let odd = config(dir.path(), &TINY.replace("buffer_capacity = 12", "buffer_capacity = 13"));
    let o = e3lab(&["run", "--config", s(&odd), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("buffer_capacity"));
    assert!(!out.exists());
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = e3lab(&[
        "run",
        "--config",
        s(&dir.path().join("nope.toml")),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.toml"));
    let cfg = config(dir.path(), TINY);
    let o = e3lab(&[
        "run",
        "--config",
        s(&cfg),
        "--corpus",
        s(&dir.path().join("none")),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn reruns_are_byte_identical_and_report_recomputes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = e3lab(&["run", "--config", s(&cfg), "--methods", "e3,finetune,majority", "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["results.csv", "summary.csv", "manifest.json", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ckpt = Path::new("checkpoints/seed3/sequential/e3/payload.bin");
    assert_eq!(fs::read(a.join(ckpt)).unwrap(), fs::read(b.join(ckpt)).unwrap());

    let o = e3lab(&["report", "--in", s(&a)]);
    assert_eq!(code(&o), 0);
    assert_eq!(o.stdout, fs::read(a.join("summary.csv")).unwrap());

    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    let mut lines: Vec<&str> = summary.lines().collect();
    let tampered = lines[1].replacen(",0.", ",1.", 1);
    lines[1] = &tampered;
    fs::write(a.join("summary.csv"), lines.join("\n") + "\n").unwrap();
    assert_eq!(code(&e3lab(&["report", "--in", s(&a)])), 2);
}

#[test]
fn exported_corpus_and_baseline_reproduce_a_fresh_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let corpus = dir.path().join("corpus");
    let f0 = dir.path().join("f0");
    let o = e3lab(&["gen-corpus", "--config", s(&cfg), "--out", s(&corpus)]);
    assert_eq!(code(&o), 0);
    let o = e3lab(&["train-baseline", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&f0)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (fresh, reused) = (dir.path().join("fresh"), dir.path().join("reused"));
    let args = ["run", "--config", s(&cfg), "--methods", "e3,er", "--no-checkpoints"];
    assert_eq!(code(&e3lab(&[&args[..], &["--out", s(&fresh)]].concat())), 0);
    let o = e3lab(&[&args[..], &["--out", s(&reused), "--corpus", s(&corpus), "--baseline", s(&f0)]].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(fresh.join("results.csv")).unwrap(),
        fs::read(reused.join("results.csv")).unwrap()
    );
    assert!(!fresh.join("checkpoints").exists());
}

#[test]
fn sweep_and_multi_seed_ablation_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let out = dir.path().join("sweep");
    let o = e3lab(&[
        "sweep",
        "--config",
        s(&cfg),
        "--budgets",
        "10,20",
        "--no-checkpoints",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    let out = dir.path().join("ablate");
    let o = e3lab(&[
        "ablate",
        "--config",
        s(&cfg),
        "--variant",
        "mlp_only",
        "--seeds",
        "1,2",
        "--no-checkpoints",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let seeds = fs::read_to_string(out.join("seeds.csv")).unwrap();
    assert!(seeds.lines().skip(1).all(|l| l.contains(",2,")), "{seeds}");
}
