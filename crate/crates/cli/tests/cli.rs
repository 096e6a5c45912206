use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TWO_GAUSSIANS: &str = r#"
seed = 0

[data]
source = "gaussians"
n = 2000
domains = [{ mean = [0.0], sd = [1.0] }, { mean = [4.0], sd = [1.0] }]

[model]
k = 2
flow = { kind = "affine", dim = 1 }
density = { kind = "diagonal_gaussian", dim = 1 }

[train]
mode = "aub"
max_epochs = 150
batch_size = 256
flow_optimizer = { learning_rate = 0.02 }
density_optimizer = { learning_rate = 0.02 }

[eval]
energy_max_rows = 200

[translate]
from = 0
to = 1
input = "rows.csv"
"#;

fn aub(args: &[&str]) -> Output {
    aub_env(args, &[])
}

fn aub_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_aub"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn aub")
}

fn run(dir: &Path, sub: &str, config: &str, extra: &[&str]) -> Output {
    let cfg = dir.join(config);
    let out = dir.join("out");
    let mut args = vec![sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    aub(&args)
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "aub failed:\n{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn failed(o: &Output) -> String {
    assert!(!o.status.success(), "aub unexpectedly succeeded:\n{}", String::from_utf8_lossy(&o.stdout));
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(files: &[(&str, &str)]) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in files {
        fs::write(dir.path().join(name), text).unwrap();
    }
    dir
}

fn value(stdout: &str, key: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key}= in {stdout}"))
        .to_string()
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_idempotent() {
    let dir = setup(&[("g.toml", TWO_GAUSSIANS)]);
    let first = ok(&run(dir.path(), "gen-data", "g.toml", &[]));
    let a = read_tree(&dir.path().join("out/data"));
    let second = ok(&run(dir.path(), "gen-data", "g.toml", &[]));
    let b = read_tree(&dir.path().join("out/data"));
    assert_eq!(first, second);
    assert_eq!(a, b);
    assert!(a.iter().any(|(p, _)| p.ends_with("train.csv")));
    assert!(first.contains("domain_1 name=gaussian_1 dim=1 n_train=1600 n_val=200 n_test=200"));
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = setup(&[("g.toml", TWO_GAUSSIANS)]);
    ok(&run(dir.path(), "gen-data", "g.toml", &[]));
    let a = read_tree(&dir.path().join("out/data"));
    ok(&run(dir.path(), "gen-data", "g.toml", &["--seed", "9"]));
    let b = read_tree(&dir.path().join("out/data"));
    assert_ne!(a, b);
}

#[test]
fn tabular_three_feature_split_gives_eight_domains() {
    let cfg = r#"
[data]
source = "tabular"
n = 1000
split = { feature_indices = [5, 6, 7] }

[model]
k = 8
flow = { kind = "affine", dim = 5 }
density = { kind = "standard_normal", dim = 5 }

[train]
mode = "alignflow_mle"
"#;
    let dir = setup(&[("t.toml", cfg)]);
    let stdout = ok(&run(dir.path(), "gen-data", "t.toml", &[]));
    assert_eq!(stdout.lines().filter(|l| l.starts_with("domain_")).count(), 8);
    assert!(stdout.contains("dim=5"));
}

#[test]
fn train_eval_translate_pipeline() {
    let dir = setup(&[("g.toml", TWO_GAUSSIANS), ("rows.csv", "0.0\n1.0\n-1.0\n")]);
    ok(&run(dir.path(), "gen-data", "g.toml", &[]));
    let t = ok(&run(dir.path(), "train", "g.toml", &[]));
    let best: f64 = value(&t, "best_val_aub").parse().unwrap();
    assert!((best - 1.418_938_5).abs() < 0.05, "best_val_aub {best}");
    let out = dir.path().join("out");
    for f in ["checkpoint_best.bin", "checkpoint_final.bin", "trace.ndjson"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let epochs: usize = value(&t, "epochs").parse().unwrap();
    let trace = fs::read_to_string(out.join("trace.ndjson")).unwrap();
    assert_eq!(trace.lines().count(), epochs);

    let e1 = ok(&run(dir.path(), "eval", "g.toml", &[]));
    let r1 = fs::read(out.join("eval_report.json")).unwrap();
    let e2 = ok(&run(dir.path(), "eval", "g.toml", &[]));
    let r2 = fs::read(out.join("eval_report.json")).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(r1, r2);
    let last = e1.lines().last().unwrap();
    let test_aub: f64 = last.strip_prefix("test_aub=").expect(last).parse().unwrap();
    assert!((test_aub - 1.418_938_5).abs() < 0.1, "test_aub {test_aub}");
    let report: serde_json::Value = serde_json::from_slice(&r1).unwrap();
    assert_eq!(report["test_aub"].as_f64().unwrap(), test_aub);
    assert_eq!(report["parameter_counts"]["total"].as_u64().unwrap(), 6);
    assert!(report["roundtrip_max_err"].as_f64().unwrap() < 1e-8);

    let tr = ok(&run(dir.path(), "translate", "g.toml", &[]));
    assert_eq!(value(&tr, "rows"), "3");
    let text = fs::read_to_string(out.join("translated_0_to_1.csv")).unwrap();
    let ys: Vec<f64> = text.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(ys.len(), 3);
    assert!((ys[0] - 4.0).abs() < 0.3, "translated mean point {}", ys[0]);
    assert!(ys[1] > ys[0] && ys[0] > ys[2]);
}

#[test]
fn translate_reports_bad_rows_with_file_line() {
    let dir = setup(&[("g.toml", TWO_GAUSSIANS), ("rows.csv", "0.0\nabc\n")]);
    ok(&run(dir.path(), "gen-data", "g.toml", &[]));
    ok(&run(dir.path(), "train", "g.toml", &[]));
    let err = failed(&run(dir.path(), "translate", "g.toml", &[]));
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn train_without_bundle_asks_for_gen_data() {
    let dir = setup(&[("g.toml", TWO_GAUSSIANS)]);
    let err = failed(&run(dir.path(), "train", "g.toml", &[]));
    assert!(err.contains("gen-data"), "{err}");
}

#[test]
fn lrmf_with_three_domains_is_rejected_before_any_output() {
    let cfg = r#"
[data]
source = "gaussians"
n = 100
domains = [{ mean = [0.0], sd = [1.0] }, { mean = [1.0], sd = [1.0] }, { mean = [2.0], sd = [1.0] }]

[model]
flows = [{ kind = "affine", dim = 1 }, { kind = "identity", dim = 1 }, { kind = "identity", dim = 1 }]
density = { kind = "diagonal_gaussian", dim = 1 }

[train]
mode = "lrmf"
"#;
    let dir = setup(&[("l.toml", cfg)]);
    for sub in ["gen-data", "train"] {
        let err = failed(&run(dir.path(), sub, "l.toml", &[]));
        assert!(err.to_lowercase().contains("lrmf"), "{err}");
    }
    assert!(!dir.path().join("out").exists());
}

#[test]
fn mle_checkpoint_has_no_density_parameters() {
    let cfg = TWO_GAUSSIANS
        .replace(r#"{ kind = "diagonal_gaussian", dim = 1 }"#, r#"{ kind = "standard_normal", dim = 1 }"#)
        .replace(r#"mode = "aub""#, r#"mode = "alignflow_mle""#)
        .replace("max_epochs = 150", "max_epochs = 5");
    let dir = setup(&[("m.toml", &cfg)]);
    ok(&run(dir.path(), "gen-data", "m.toml", &[]));
    ok(&run(dir.path(), "train", "m.toml", &[]));
    ok(&run(dir.path(), "eval", "m.toml", &[]));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("out/eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["parameter_counts"]["density"].as_u64().unwrap(), 0);
    assert_eq!(report["parameter_counts"]["total"].as_u64().unwrap(), 4);
}

#[test]
fn mle_with_learnable_density_is_rejected() {
    let cfg = TWO_GAUSSIANS.replace(r#"mode = "aub""#, r#"mode = "alignflow_mle""#);
    let dir = setup(&[("m.toml", &cfg)]);
    failed(&run(dir.path(), "gen-data", "m.toml", &[]));
}

#[test]
fn checkpoint_from_another_config_is_refused() {
    let other = TWO_GAUSSIANS.replace("mean = [4.0]", "mean = [3.0]");
    let dir = setup(&[("g.toml", TWO_GAUSSIANS), ("h.toml", &other)]);
    let short = |s: &str| s.replace("max_epochs = 150", "max_epochs = 3");
    fs::write(dir.path().join("g.toml"), short(TWO_GAUSSIANS)).unwrap();
    fs::write(dir.path().join("h.toml"), short(&other)).unwrap();
    ok(&run(dir.path(), "gen-data", "g.toml", &[]));
    ok(&run(dir.path(), "train", "g.toml", &[]));
    let ckpt = dir.path().join("out/checkpoint_best.bin");
    let ckpt = ckpt.to_str().unwrap().to_string();
    ok(&run(dir.path(), "eval", "g.toml", &["--checkpoint", &ckpt]));
    ok(&run(dir.path(), "gen-data", "h.toml", &[]));
    let err = failed(&run(dir.path(), "eval", "h.toml", &["--checkpoint", &ckpt]));
    assert!(err.contains("fingerprint"), "{err}");
}

#[test]
fn unknown_keys_are_rejected() {
    let cfg = TWO_GAUSSIANS.replace("[train]\n", "[train]\nlearning_rate = 0.1\n");
    let dir = setup(&[("g.toml", &cfg)]);
    let err = failed(&run(dir.path(), "gen-data", "g.toml", &[]));
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn json_configs_are_accepted() {
    let value: toml::Value = toml::from_str(TWO_GAUSSIANS).unwrap();
    let json = serde_json::to_string_pretty(&value).unwrap();
    let dir = setup(&[("g.json", &json), ("g.toml", TWO_GAUSSIANS)]);
    let a = ok(&run(dir.path(), "gen-data", "g.json", &[]));
    let b = ok(&run(dir.path(), "gen-data", "g.toml", &[]));
    assert_eq!(a, b);
}

fn compare_setup() -> TempDir {
    let a = TWO_GAUSSIANS.replace("max_epochs = 150", "max_epochs = 20");
    let b = a
        .replace(r#"{ kind = "diagonal_gaussian", dim = 1 }"#, r#"{ kind = "standard_normal", dim = 1 }"#)
        .replace(r#"mode = "aub""#, r#"mode = "alignflow_mle""#);
    let head = "[data]\nsource = \"gaussians\"\nn = 2000\ndomains = [{ mean = [0.0], sd = [1.0] }, { mean = [4.0], sd = [1.0] }]\n\n[model]\nk = 2\nflow = { kind = \"identity\", dim = 1 }\ndensity = { kind = \"standard_normal\", dim = 1 }\n\n";
    let one = format!("{head}[compare]\nconfigs = [\"a.toml\"]\n");
    let two = format!("{head}[compare]\nconfigs = [\"a.toml\", \"b.toml\"]\n");
    setup(&[("a.toml", &a), ("b.toml", &b), ("one.toml", &one), ("two.toml", &two)])
}

#[test]
fn compare_single_config_gives_one_row() {
    let dir = compare_setup();
    let md = ok(&run(dir.path(), "compare", "one.toml", &[]));
    let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| a ")).collect();
    assert_eq!(rows.len(), 1, "{md}");
    assert_eq!(md.lines().count(), 3);
    let csv = fs::read_to_string(dir.path().join("out/compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn compare_reuses_cache_and_respects_worker_count() {
    let dir = compare_setup();
    let first = ok(&run(dir.path(), "compare", "two.toml", &[]));
    assert_eq!(first.matches("| no |").count(), 2, "{first}");
    let cfg = dir.path().join("two.toml");
    let out = dir.path().join("out");
    let o = aub_env(
        &["compare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[("AUB_NUM_WORKERS", "1"), ("RUST_LOG", "info")],
    );
    let second = ok(&o);
    assert_eq!(second.matches("| yes |").count(), 2, "{second}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("on 1 worker(s)"));
    let strip = |s: &str| -> Vec<String> {
        s.lines()
            .map(|l| l.split('|').take(9).collect::<Vec<_>>().join("|"))
            .collect()
    };
    assert_eq!(strip(&first), strip(&second));

    let o = aub_env(
        &["compare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[("AUB_NUM_WORKERS", "zero")],
    );
    failed(&o);
}

#[test]
fn compare_rejects_mismatched_bundles() {
    let dir = compare_setup();
    let b = fs::read_to_string(dir.path().join("b.toml")).unwrap().replace("mean = [4.0]", "mean = [5.0]");
    fs::write(dir.path().join("b.toml"), b).unwrap();
    let err = failed(&run(dir.path(), "compare", "two.toml", &[]));
    assert!(err.contains("mismatched bundles"), "{err}");
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(&root).unwrap() {
        let p = e.unwrap().path();
        if p.extension().and_then(|s| s.to_str()) != Some("toml") {
            continue;
        }
        let loaded = aub_cli::config::Loaded::read(&p, None).unwrap();
        loaded.config.validate().unwrap_or_else(|e| panic!("{}: {e:#}", p.display()));
        if let Some(c) = &loaded.config.compare {
            for sub in &c.configs {
                assert!(loaded.relative(sub).exists(), "{} lists missing {}", p.display(), sub.display());
            }
        }
        n += 1;
    }
    assert!(n >= 10);
}
