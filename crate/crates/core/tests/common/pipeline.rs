use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use super::{rng, Grammar};

pub const BIN: &str = env!("CARGO_BIN_EXE_copygec");

pub fn copygec(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = copygec(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn join(s: &[String]) -> String {
    s.join(" ")
}

/// 100 clean sentences for pretraining plus agreement-error pairs for
/// finetuning and testing.
pub fn write_toy_corpus(dir: &Path) {
    let g = Grammar::default();
    let mut r = rng(314);
    let clean: Vec<String> = (0..100).map(|_| join(&g.sentence(&mut r, None))).collect();
    fs::write(dir.join("clean.txt"), clean.join("\n") + "\n").unwrap();
    let pairs: Vec<(String, String)> = (0..100)
        .map(|_| {
            let c = g.sentence(&mut r, None);
            (join(&g.corrupt(&c, &mut r)), join(&c))
        })
        .collect();
    let tsv = |p: &[(String, String)]| p.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect::<String>();
    fs::write(dir.join("train.tsv"), tsv(&pairs[..70])).unwrap();
    fs::write(dir.join("dev.tsv"), tsv(&pairs[70..80])).unwrap();
    fs::write(dir.join("test.src"), pairs[80..].iter().map(|p| format!("{}\n", p.0)).collect::<String>()).unwrap();
    fs::write(dir.join("test.ref"), pairs[80..].iter().map(|p| format!("{}\n", p.1)).collect::<String>()).unwrap();
}

const MODEL: [&str; 12] = ["--d-model", "16", "--n-layers", "1", "--n-heads", "2", "--d-ffn", "32", "--dropout", "0.1", "--max-positions", "64"];
const OPTIM: [&str; 10] = ["--lr", "0.05", "--momentum", "0.9", "--batch-tokens", "300", "--epochs", "100", "--max-steps", "50"];

/// noise → pretrain → finetune → correct → evaluate, single-threaded, in
/// `dir`. Returns the manifests of every stage and the evaluation report.
pub fn run_pipeline(dir: &Path) -> (Vec<String>, String) {
    write_toy_corpus(dir);
    ok(dir, &["noise", "--input", "clean.txt", "--output", "noised.tsv"]);
    let mut pre = vec!["pretrain", "--train", "noised.tsv", "--save-dir", "pre", "--eval-every", "25"];
    pre.extend(MODEL);
    pre.extend(OPTIM);
    ok(dir, &pre);
    let mut ft = vec!["finetune", "--train", "train.tsv", "--dev", "dev.tsv", "--init", "full-dae", "--pretrained", "pre/model.ckpt", "--save-dir", "ft", "--eval-every", "25"];
    ft.extend(OPTIM);
    ok(dir, &ft);
    ok(dir, &["correct", "--model", "ft/model.ckpt", "--input", "test.src", "--output", "test.hyp", "--beam", "4"]);
    let report = ok(dir, &["evaluate", "--hyp", "test.hyp", "--src", "test.src", "--ref", "test.ref", "--output", "report.txt"]);
    let manifests = ["noised.tsv.manifest", "pre/manifest.txt", "ft/manifest.txt", "test.hyp.manifest", "report.txt.eval.manifest"]
        .iter()
        .map(|m| fs::read_to_string(dir.join(m)).unwrap_or_else(|e| panic!("{m}: {e}")))
        .collect();
    (manifests, report)
}

/// The `[metrics]` section of a manifest.
pub fn metrics(manifest: &str) -> &str {
    manifest.split("[metrics]").nth(1).unwrap_or("")
}
