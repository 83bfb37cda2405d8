use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use auxvae::trainer::ModelCheckpoint;
use tempfile::TempDir;

fn auxvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auxvae")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run_ok(args: &[&str]) -> String {
    let out = auxvae(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Generates a small galaxy dataset and returns its path.
fn small_dataset(tmp: &TempDir) -> PathBuf {
    let cfg = write(tmp.path(), "gen.toml", "kind = \"galaxy\"\nn = 60\nseed = 3\noutput = \"g.axvd\"\n");
    let out = tmp.path().join("data");
    run_ok(&["generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    out.join("g.axvd")
}

fn train_config(tmp: &TempDir, dataset: &Path, extra: &str) -> PathBuf {
    let text = format!("dataset = {:?}\nbatch_size = 8\nepochs = 1\n{extra}", dataset.to_str().unwrap());
    write(tmp.path(), "train.toml", &text)
}

#[test]
fn generate_is_reproducible_and_manifested() {
    let tmp = TempDir::new().unwrap();
    let a = small_dataset(&tmp);
    let first = std::fs::read(&a).unwrap();
    let m = manifest(a.parent().unwrap());
    assert_eq!(m["command"], "generate");
    assert_eq!(m["config"]["factor_names"][1], "radius");
    assert_eq!(m["config"]["factor_ranges"][0][1], 1e5);
    let listed = m["outputs"][0]["sha256"].as_str().unwrap().to_string();
    assert_eq!(listed.len(), 64);

    let cfg = tmp.path().join("gen.toml");
    let out2 = tmp.path().join("again");
    run_ok(&["generate", "--config", cfg.to_str().unwrap(), "--out", out2.to_str().unwrap(), "--threads-deterministic"]);
    assert_eq!(std::fs::read(out2.join("g.axvd")).unwrap(), first);
    assert_eq!(manifest(&out2)["outputs"][0]["sha256"], listed.as_str());
}

#[test]
fn error_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let bad_kind = write(tmp.path(), "bad.toml", "kind = \"cars3d\"\nn = 20\n");
    let out = auxvae(&["generate", "--config", bad_kind.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cars3d"));

    let typo = write(tmp.path(), "typo.toml", "kind = \"galaxy\"\nnn = 20\n");
    assert_eq!(auxvae(&["generate", "--config", typo.to_str().unwrap()]).status.code(), Some(2));

    let missing = tmp.path().join("nope.toml");
    assert_eq!(auxvae(&["generate", "--config", missing.to_str().unwrap()]).status.code(), Some(3));

    assert_eq!(auxvae(&["train"]).status.code(), Some(2));
    assert_eq!(auxvae(&["frobnicate"]).status.code(), Some(2));

    let no_data = write(tmp.path(), "t.toml", "dataset = \"/nonexistent/x.axvd\"\n");
    assert_eq!(auxvae(&["train", "--config", no_data.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn train_case2_then_evaluate_and_experiments() {
    let tmp = TempDir::new().unwrap();
    let ds = small_dataset(&tmp);
    let cfg = train_config(&tmp, &ds, "case = \"case2\"\n");
    let run_dir = tmp.path().join("run");
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap(), "--seed", "11"]);
    let ckpt_path = run_dir.join("checkpoint.axvc");
    let ckpt = ModelCheckpoint::load(&ckpt_path).unwrap();
    assert_eq!(ckpt.config.case.factors(), ["radius", "g1", "g2"]);
    assert_eq!((ckpt.model.arch.d, ckpt.seed), (3, 11));
    assert!(std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap().starts_with("epoch,step,total"));
    assert_eq!(manifest(&run_dir)["outputs"].as_array().unwrap().len(), 2);

    let ck = ckpt_path.to_str().unwrap();
    let eval_cfg = write(tmp.path(), "eval.toml", &format!("checkpoint = {ck:?}\nsplit = \"all\"\n"));
    let eval_dir = tmp.path().join("eval");
    run_ok(&["evaluate", "--config", eval_cfg.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()]);
    let metrics = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    let lds: f64 = metrics.lines().find_map(|l| l.strip_prefix("lds,")).unwrap().parse().unwrap();
    assert!((0.1 - 1e-12..=1.0).contains(&lds), "{lds}");

    let trav_cfg = write(tmp.path(), "trav.toml", &format!("checkpoint = {ck:?}\nlatents = [0, 4]\nsteps = 5\n"));
    let trav_dir = tmp.path().join("trav");
    run_ok(&["traverse", "--config", trav_cfg.to_str().unwrap(), "--out", trav_dir.to_str().unwrap()]);
    let pgm = std::fs::read(trav_dir.join("traverse_z4.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n173 33\n255\n"));

    let pert_cfg = write(tmp.path(), "pert.toml", &format!("checkpoint = {ck:?}\nsplit = \"all\"\nsamples = 20\n"));
    let pert_dir = tmp.path().join("pert");
    run_ok(&["perturb", "--config", pert_cfg.to_str().unwrap(), "--out", pert_dir.to_str().unwrap()]);
    let rows = std::fs::read_to_string(pert_dir.join("perturb.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 * 20);

    let atk_cfg = write(tmp.path(), "atk.toml", &format!("checkpoint = {ck:?}\nsamples = 4\nepsilons = [0.0, 0.1]\n"));
    let atk_dir = tmp.path().join("atk");
    run_ok(&["attack", "--config", atk_cfg.to_str().unwrap(), "--out", atk_dir.to_str().unwrap()]);
    let rows = std::fs::read_to_string(atk_dir.join("robustness.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 4);
}

#[test]
fn training_replays_bit_identically() {
    let tmp = TempDir::new().unwrap();
    let ds = small_dataset(&tmp);
    let cfg = train_config(&tmp, &ds, "");
    let bytes: Vec<Vec<u8>> = ["r1", "r2"]
        .iter()
        .map(|d| {
            let dir = tmp.path().join(d);
            run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--threads-deterministic"]);
            std::fs::read(dir.join("checkpoint.axvc")).unwrap()
        })
        .collect();
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn single_cell_gridsearch_returns_that_cell() {
    let tmp = TempDir::new().unwrap();
    let ds = small_dataset(&tmp);
    let text = format!(
        "[train]\ndataset = {:?}\nbatch_size = 8\nepochs = 1\n\n[grid]\nbeta = [2.0]\nlambda1 = [0.5]\nlambda2 = [0.0]\n",
        ds.to_str().unwrap()
    );
    let cfg = write(tmp.path(), "grid.toml", &text);
    let dir = tmp.path().join("grid");
    let stdout = run_ok(&["gridsearch", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--workers", "2"]);
    assert!(stdout.contains("beta=2 lambda1=0.5 lambda2=0"), "{stdout}");
    let best = std::fs::read_to_string(dir.join("best.toml")).unwrap();
    let best: auxvae::trainer::TrainConfig = toml::from_str(&best).unwrap();
    assert_eq!((best.loss.beta, best.loss.lambda1, best.loss.lambda2), (2.0, 0.5, 0.0));
    let csv = std::fs::read_to_string(dir.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn printed_defaults_parse_back() {
    for cmd in ["generate", "train", "gridsearch", "evaluate", "traverse", "perturb", "attack"] {
        let text = run_ok(&[cmd, "--print-config"]);
        assert!(!text.is_empty(), "{cmd}");
        let tmp = TempDir::new().unwrap();
        write(tmp.path(), "c.toml", &text);
        let value: toml::Value = toml::from_str(&text).unwrap();
        assert!(value.is_table());
    }
}
