use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use polyadapt::config::RunConfig;
use polyadapt::layers::count_language_params;

const TINY: &str = "\
seed = 3

[model]
d_model = 16
n_heads = 2
enc_layers = 2
dec_layers = 1
text_enc_layers = 1
ffn_dim = 32
adapter_hidden = 4
k_bias = 2
feature_dim = 8
rel_window = 8

[data]
medium_langs = 2
low_langs = 1
very_low_langs = 1
medium_count = 40
low_count = 20
very_low_count = 10
unlabeled_factor = 2
text_factor = 2

[train]
frame_budget = 400
warmup_steps = 5
total_updates = 6
eval_interval = 3
dev_per_lang = 3

[pretrain]
enc_steps = 3
dec_steps = 3
frame_budget = 300
text_batch = 4
codebook_size = 8
warmup_steps = 2

[eval]
max_len = 24
max_per_lang = 3
";

fn polyadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polyadapt")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the tiny config and generates its corpus.
fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    let o = polyadapt(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    (s(&cfg).to_string(), s(&data).to_string())
}

#[test]
fn gen_data_is_deterministic_and_writes_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = polyadapt(&["gen-data", "--config", s(&cfg), "--out", s(&out), "--seed", seed]);
        assert_eq!(code(&o), 0);
        assert!(out.join("resolved.cfg").exists());
        assert!(out.join("train.tsv").exists());
        stdout(&o)
    };
    let (a, b, c) = (run("a", "1"), run("b", "1"), run("c", "2"));
    assert_eq!(field(&a, "checksum"), field(&b, "checksum"));
    assert_ne!(field(&a, "checksum"), field(&c, "checksum"));
    assert_eq!(field(&a, "medium"), "2\t80");
    let resolved = RunConfig::load(&dir.path().join("a/resolved.cfg")).unwrap();
    assert_eq!(resolved.seed, 1);
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[model]\nno_such_key = 1\n").unwrap();
    assert_eq!(code(&polyadapt(&["count-params", "--config", s(&bad)])), 2);
    assert_eq!(code(&polyadapt(&["no-such-command"])), 2);
    let file = dir.path().join("file");
    fs::write(&file, "").unwrap();
    let blocked = file.join("out");
    assert_eq!(code(&polyadapt(&["gen-data", "--out", s(&blocked)])), 2);
    assert_eq!(code(&polyadapt(&["evaluate", "--ckpt", "missing.ckpt", "--data", "missing", "--out", s(&dir.path().join("e"))])), 2);
}

#[test]
fn train_names_the_missing_checkpoint_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let out = dir.path().join("t");
    let o = polyadapt(&["train", "--variant", "wm", "--config", &cfg, "--data", &data, "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--dec-ckpt"));
}

#[test]
fn count_params_matches_the_closed_form() {
    let o = polyadapt(&["count-params"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let counts = count_language_params(&RunConfig::default().model);
    assert_eq!(field(&text, "adapter_per_language").parse::<usize>().unwrap(), counts.adapter_per_lang);
    assert_eq!(field(&text, "factorized_per_language").parse::<usize>().unwrap(), counts.factorized_per_lang);
    assert_eq!(field(&text, "per_language_tf"), "0");
    let wmf: usize = field(&text, "trainable_wmf").parse().unwrap();
    let fwmf: usize = field(&text, "trainable_fwmf").parse().unwrap();
    assert!(fwmf < wmf);
}

#[test]
fn pretrain_train_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let mut ckpts = Vec::new();
    for kind in ["encoder", "decoder"] {
        let out = dir.path().join(kind);
        let o = polyadapt(&["pretrain", "--kind", kind, "--config", &cfg, "--data", &data, "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let ckpt = out.join(format!("{kind}.ckpt"));
        let again = dir.path().join(format!("{kind}-again"));
        polyadapt(&["pretrain", "--kind", kind, "--config", &cfg, "--data", &data, "--out", s(&again)]);
        assert_eq!(fs::read(&ckpt).unwrap(), fs::read(again.join(format!("{kind}.ckpt"))).unwrap());
        ckpts.push(ckpt);
    }
    let (enc, dec) = (s(&ckpts[0]), s(&ckpts[1]));
    let mut trainable = Vec::new();
    for variant in ["wmf", "fwmf"] {
        let out = dir.path().join(variant);
        let o = polyadapt(&[
            "train", "--variant", variant, "--config", &cfg, "--data", &data, "--enc-ckpt", enc, "--dec-ckpt", dec, "--rel-pos",
            "--out", s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let resolved = RunConfig::load(&out.join("resolved.cfg")).unwrap();
        assert!(resolved.model.rel_pos);
        assert!(out.join("best.ckpt").exists());
        assert!(fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count() >= 3);
        trainable.push(field(&stdout(&o), "trainable").parse::<usize>().unwrap());
    }
    assert!(trainable[1] < trainable[0]);

    let out = dir.path().join("eval");
    let ckpt = dir.path().join("wmf/best.ckpt");
    let o = polyadapt(&["evaluate", "--ckpt", s(&ckpt), "--data", &data, "--split", "dev", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["report.tsv", "report.txt", "metrics.jsonl", "hypotheses.tsv", "resolved.cfg"] {
        assert!(out.join(name).exists(), "{name}");
    }
}

#[test]
fn ablate_emits_the_full_matrix_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = polyadapt(&["ablate", "--config", &cfg, "--data", &data, "--seeds", "1", "--out", s(&out)]);
        assert!(matches!(code(&o), 0 | 1), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(out.join("report.tsv")).unwrap()
    };
    let a = run("a");
    let header: Vec<&str> = a.lines().next().unwrap().split('\t').collect();
    assert_eq!(&header[2..], ["TF", "W", "WM", "WMA", "WMF", "FWMA", "FWMF"]);
    assert_eq!(a.lines().filter(|l| l.starts_with("average\t")).count(), 3);
    assert!(a.lines().any(|l| l.starts_with("overall\t")));
    assert!(a.lines().all(|l| l.split('\t').count() == 9));
    assert_eq!(a, run("b"));
}
