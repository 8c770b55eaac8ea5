//! Command-level integration: generation reproducibility, run/eval
//! self-consistency, manifest contents, and seed precedence.

use std::fs;
use std::path::{Path, PathBuf};

use ttaforge::cli::{self, EvalArgs, GenArgs, RunArgs};

fn gen(out: &Path, num_images: usize, seed: u64, shift: &str) {
    cli::cmd_gen(&GenArgs {
        out: out.to_path_buf(),
        num_images,
        size: 64,
        seed: Some(seed),
        target_shift: shift.into(),
    })
    .unwrap();
}

fn run(data: &Path, out: &Path, mode: &str, seed: u64, config: Option<PathBuf>) {
    cli::cmd_run(&RunArgs {
        mode: mode.into(),
        config,
        data: data.to_path_buf(),
        out: out.to_path_buf(),
        seed: Some(seed),
        dump_memory: false,
    })
    .unwrap();
}

#[test]
fn adapt_run_can_dump_its_memory() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen(&data, 8, 4, "palette");
    let out = tmp.path().join("run");
    cli::cmd_run(&RunArgs {
        mode: "adapt".into(),
        config: None,
        data,
        out: out.clone(),
        seed: Some(4),
        dump_memory: true,
    })
    .unwrap();
    let memory = out.join("memory");
    assert!(memory.is_dir());
    for name in ["square", "disk", "triangle"] {
        assert!(memory.join(name).join("index.jsonl").exists());
    }
}

#[test]
fn gen_is_reproducible_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    gen(&a, 10, 1, "gauss2");
    gen(&b, 10, 1, "gauss2");
    assert_eq!(
        fs::read(a.join("annotations.json")).unwrap(),
        fs::read(b.join("annotations.json")).unwrap()
    );
    for i in 0..10 {
        let name = format!("images/{i:06}.png");
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn gen_rejects_unknown_shift_and_records_size() {
    let tmp = tempfile::tempdir().unwrap();
    let err = cli::cmd_gen(&GenArgs {
        out: tmp.path().join("x"),
        num_images: 2,
        size: 64,
        seed: Some(0),
        target_shift: "fog3".into(),
    })
    .unwrap_err();
    assert!(format!("{err}").contains("unknown target shift"));

    let out = tmp.path().join("ok");
    gen(&out, 2, 0, "none");
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(parsed["config"]["size"], "64");
    assert_eq!(parsed["status"], "complete");
}

#[test]
fn eval_reproduces_run_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen(&data, 12, 3, "palette");
    let run_out = tmp.path().join("run");
    run(&data, &run_out, "adapt", 3, None);

    let eval_out = tmp.path().join("eval");
    cli::cmd_eval(&EvalArgs {
        data: data.clone(),
        pred: run_out.join("predictions.jsonl"),
        out: eval_out.clone(),
        iou: 0.5,
        tp_fp_hist: true,
        hist_bins: 10,
    })
    .unwrap();

    assert_eq!(
        fs::read(run_out.join("metrics.csv")).unwrap(),
        fs::read(eval_out.join("metrics.csv")).unwrap(),
        "recomputed metrics must equal the run's"
    );
    for name in [
        "hist_square.csv",
        "hist_disk.csv",
        "hist_triangle.csv",
        "hist_all.csv",
    ] {
        assert!(eval_out.join(name).exists(), "{name} missing");
    }
}

#[test]
fn eval_of_empty_predictions_yields_zero_histograms() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen(&data, 3, 5, "none");
    let pred = tmp.path().join("empty.jsonl");
    fs::write(&pred, "").unwrap();
    let out = tmp.path().join("eval");
    cli::cmd_eval(&EvalArgs {
        data,
        pred,
        out: out.clone(),
        iou: 0.5,
        tp_fp_hist: true,
        hist_bins: 5,
    })
    .unwrap();
    let hist = fs::read_to_string(out.join("hist_all.csv")).unwrap();
    for line in hist.lines().skip(1) {
        let mut fields = line.split(',');
        let tp = fields.nth(2).unwrap();
        let fp = fields.next().unwrap();
        assert_eq!((tp, fp), ("0", "0"));
    }
}

#[test]
fn run_manifest_snapshot_reparses_to_the_same_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("ds");
    gen(&data, 4, 2, "none");
    let out = tmp.path().join("run");
    let config_path = tmp.path().join("conf");
    fs::write(&config_path, "th_pl = 0.4\nm = 6\ngamma = 0.99\n").unwrap();
    run(&data, &out, "adapt", 2, Some(config_path));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["th_pl"], "0.4");
    assert_eq!(manifest["config"]["m"], "6");
    assert_eq!(manifest["config"]["gamma"], "0.99");
    assert_eq!(manifest["seed"], 2);
    assert_eq!(manifest["status"], "complete");

    // the flat snapshot itself parses back as a config file
    let text: String = manifest["config"]
        .as_object()
        .unwrap()
        .iter()
        .map(|(k, v)| format!("{k} = {}\n", v.as_str().unwrap()))
        .collect();
    let back = cli::parse_config_text(&text, Path::new("manifest")).unwrap();
    assert_eq!(back.th_pl, 0.4);
    assert_eq!(back.num_prompts, 6);
    assert_eq!(back.gamma, 0.99);
}

#[test]
fn seed_env_var_sits_between_flag_and_config() {
    std::env::set_var(cli::SEED_ENV_VAR, "41");
    assert_eq!(cli::resolve_seed(Some(5), Some(7), 0).unwrap(), 5);
    assert_eq!(cli::resolve_seed(None, Some(7), 0).unwrap(), 41);
    std::env::set_var(cli::SEED_ENV_VAR, "not-a-number");
    assert!(cli::resolve_seed(None, None, 0).is_err());
    std::env::remove_var(cli::SEED_ENV_VAR);
    assert_eq!(cli::resolve_seed(None, Some(7), 0).unwrap(), 7);
}
