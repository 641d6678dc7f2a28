//! End-to-end runs of the `dac` binary in a scratch workspace.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "
synthetic.n_survivors = 100
synthetic.n_nonsurvivors = 300
synthetic.steps = 4
pipeline.embedding_dim = 8
pipeline.risk.epochs = 2
pipeline.clone.epochs = 2
pipeline.numerator.epochs = 2
pipeline.train.epochs = 2
pipeline.train.batch_size = 32
adaptation.fractions = [0.0, 0.1]
adaptation.dynamics.fit.epochs = 2
adaptation.dynamics.fine_tune.epochs = 2
";

fn dac(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dac"))
        .args(args)
        .env("DAC_WORKSPACE", root)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(root: &Path, name: &str, extra: &str) -> String {
    let path = root.join(name);
    std::fs::write(&path, format!("{SMALL}\n{extra}\n")).unwrap();
    path.display().to_string()
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("synthetic.kappa = \"lots\"", "synthetic.kappa"),
        ("synthetic.kapa = 1.0", "synthetic.kapa"),
        ("pipeline.train.alpha = 3.0", "pipeline.train"),
    ];
    for (i, (line, key)) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("bad{i}.conf"), line);
        let out = dac(dir.path(), &["generate", "--config", &cfg]);
        assert_eq!(out.status.code(), Some(2), "{line}");
        assert!(stderr(&out).contains(key), "{line}: {}", stderr(&out));
    }
    let out = dac(dir.path(), &["evaluate", "--ablate", "everything"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_command_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, "small.conf", "");

    let gen = dac(root, &["generate", "--config", &cfg]);
    assert!(gen.status.success(), "{}", stderr(&gen));
    let again = dac(root, &["generate", "--config", &cfg]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));
    assert!(dac(root, &["generate", "--config", &cfg, "--force"]).status.success());

    let early = dac(root, &["evaluate", "--config", &cfg]);
    assert_eq!(early.status.code(), Some(2), "evaluate before train");

    let train = dac(root, &["train", "--config", &cfg]);
    assert!(train.status.success(), "{}", stderr(&train));
    assert!(stdout(&train).contains("trained for 2 epochs"));

    let eval = dac(root, &["evaluate", "--config", &cfg]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let table = stdout(&eval);
    for col in ["EM", "WIS", "ACC-3", "ACC-1", "policy", "clone", "clinician"] {
        assert!(table.contains(col), "{col} missing from\n{table}");
    }
    let json = dac(root, &["evaluate", "--config", &cfg, "--json"]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 3);

    let first = dac(root, &["report", "--config", &cfg]);
    assert!(first.status.success(), "{}", stderr(&first));
    let files: Vec<String> = stdout(&first).lines().map(String::from).collect();
    let read_all = || files.iter().map(|f| std::fs::read(f).unwrap()).collect::<Vec<_>>();
    let before = read_all();
    assert!(dac(root, &["report", "--config", &cfg]).status.success());
    assert_eq!(before, read_all());

    let adapt = dac(root, &["adapt", "--config", &cfg]);
    assert!(adapt.status.success(), "{}", stderr(&adapt));
    let adapt_dir = stdout(&adapt).lines().last().unwrap().trim_start_matches("artifacts in ").to_string();
    let adapt_dir = Path::new(&adapt_dir);
    assert_eq!(
        std::fs::read(adapt_dir.join("source-decisions.csv")).unwrap(),
        std::fs::read(adapt_dir.join("decisions-0.00.csv")).unwrap()
    );

    let verify = dac(root, &["verify", "--config", &cfg]);
    assert!(verify.status.success(), "{}", stderr(&verify));
    assert_eq!(stdout(&verify).lines().filter(|l| l.starts_with("ok ")).count(), 5);

    let cfg_file = adapt_dir.join("config.txt");
    let text = std::fs::read_to_string(&cfg_file).unwrap();
    std::fs::write(&cfg_file, text.replace("seed = 0", "seed = 9")).unwrap();
    let broken = dac(root, &["verify", "--config", &cfg]);
    assert_eq!(broken.status.code(), Some(2));
    assert!(stderr(&broken).contains("hash mismatch"));
}

#[test]
fn ablation_flags_give_five_distinct_runs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, "small.conf", "pipeline.train.epochs = 1");
    assert!(dac(root, &["generate", "--config", &cfg]).status.success());
    let expected = [
        (None, [false, false, false, false]),
        (Some("rsp"), [true, false, false, false]),
        (Some("dcf"), [false, true, false, false]),
        (Some("short"), [false, false, true, false]),
        (Some("long"), [false, false, false, true]),
    ];
    let mut dirs = BTreeSet::new();
    for (flag, on) in expected {
        let mut args = vec!["train", "--config", &cfg];
        if let Some(f) = flag {
            args.extend(["--ablate", f]);
        }
        let out = dac(root, &args);
        assert!(out.status.success(), "{}", stderr(&out));
        let line = stdout(&out);
        let run_dir = line.trim().rsplit("artifacts in ").next().unwrap().to_string();
        let config = std::fs::read_to_string(Path::new(&run_dir).join("config.txt")).unwrap();
        for (name, value) in ["no_resample", "no_iptw", "no_short", "no_long"].iter().zip(on) {
            assert!(config.contains(&format!("pipeline.train.ablation.{name} = {value}")), "{flag:?} {name}");
        }
        dirs.insert(run_dir);
    }
    assert_eq!(dirs.len(), 5);
}

#[test]
fn divergence_exits_with_three_and_leaves_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = write_config(root, "wild.conf", "pipeline.train.learning_rate = 1e300");
    assert!(dac(root, &["generate", "--config", &cfg]).status.success());
    let out = dac(root, &["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("divergence.json"));
    let runs: Vec<_> = std::fs::read_dir(root.join("runs")).unwrap().collect();
    let run = runs[0].as_ref().unwrap().path();
    let dump: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("divergence.json")).unwrap()).unwrap();
    assert!(dump["error"].as_str().unwrap().contains("non-finite"));
    assert!(!run.join("manifest.json").exists());
}
