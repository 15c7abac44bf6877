use std::path::Path;
use std::process::{Command, Output};

use convshare_core::model::PositionalKind;
use convshare_core::{Checkpoint, ConvShareViT, ModelConfig, PaddingMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn convshare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convshare"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn tiny_config(depth: usize) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        embed_h: 4,
        embed_w: 4,
        heads: 1,
        depth,
        mlp_ratio: 2,
        positional: PositionalKind::Trainable,
        num_classes: 4,
        weight_sharing: true,
        qkv_padding: PaddingMode::Valid,
        bias: true,
    }
}

fn write_config(dir: &Path, c: &ModelConfig) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, c.to_json()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn plan_reproduces_reference_totals() {
    let dir = tempfile::tempdir().unwrap();
    let o = convshare(&["plan", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let total = out.lines().find(|l| l.starts_with("total")).unwrap();
    assert!(total.contains("5670") && total.contains("2.835 ms"), "{total}");
    assert!(out.contains("2.8 ms"));
    let plan = read_json(&dir.path().join("plan.json"));
    assert_eq!(plan["schema_version"], 1);
    assert_eq!(plan["total"], 5670);
    assert_eq!(plan["capacity"], 86);
    assert_eq!(plan["per_block"]["qkv"], 384);
    assert_eq!(plan["per_block"]["scores"], 50);
    assert_eq!(plan["per_block"]["weighted_sum"], 1);
    assert_eq!(plan["per_block"]["mlp"], 195);
}

#[test]
fn plan_reports_infeasible_devices() {
    let o = convshare(&["plan", "--device-res", "24"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("qkv") && err.contains("capacity 0"), "{err}");
}

#[test]
fn doubling_depth_doubles_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    let c = ModelConfig {
        depth: 18,
        ..ModelConfig::cifar100_13x13()
    };
    let cfg = write_config(dir.path(), &c);
    let o = convshare(&["plan", "--json", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plan: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(plan["total"], 2 * 5670);
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(convshare(&["plan", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(convshare(&[]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{\"image_size\": 32}").unwrap();
    assert_eq!(convshare(&["plan", "--config", p.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(convshare(&["plan", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(convshare(&["plan", "--device-clock", "0"]).status.code(), Some(2));
    let unshared = write_config(
        dir.path(),
        &ModelConfig {
            weight_sharing: false,
            ..tiny_config(1)
        },
    );
    assert_eq!(convshare(&["simulate", "--images", "1", "--config", &unshared]).status.code(), Some(2));
}

#[test]
fn verify_passes_and_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = convshare(&["verify", "--out", d]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let report = read_json(&dir.path().join("verify.json"));
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["passed"], true);
    for s in report["suites"].as_array().unwrap() {
        assert!(s["max_error"].as_f64().unwrap() < s["threshold"].as_f64().unwrap());
    }

    let o = convshare(&["verify", "--inject-fault", "--out", d]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("linear-equivalence"));
    let report = read_json(&dir.path().join("verify.json"));
    assert_eq!(report["passed"], false);
    assert_eq!(report["suites"][0]["passed"], false);
}

#[test]
fn train_is_deterministic_and_feeds_attnmap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(2));
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = convshare(&["train", "--epochs", "3", "--seed", "4", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let csv = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert_eq!(csv, std::fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("model.ckpt")).unwrap(), std::fs::read(b.join("model.ckpt")).unwrap());
    assert_eq!(read_json(&a.join("train.json"))["epochs"], 3);

    let maps = dir.path().join("maps");
    let o = convshare(&[
        "attnmap",
        "--checkpoint",
        a.join("model.ckpt").to_str().unwrap(),
        "--out",
        maps.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for layer in ["layer_01", "layer_02"] {
        check_pgm(&maps.join(format!("{layer}.pgm")), 8);
        let csv = std::fs::read_to_string(maps.join(format!("{layer}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 8);
    }
}

/// Minimal P2 reader: header, then `w * h` values within the max value.
fn check_pgm(path: &Path, side: usize) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut tokens = text.split_whitespace();
    assert_eq!(tokens.next(), Some("P2"));
    let w: usize = tokens.next().unwrap().parse().unwrap();
    let h: usize = tokens.next().unwrap().parse().unwrap();
    let max: u32 = tokens.next().unwrap().parse().unwrap();
    assert_eq!((w, h, max), (side, side, 255));
    let px: Vec<u32> = tokens.map(|t| t.parse().unwrap()).collect();
    assert_eq!(px.len(), w * h);
    assert!(px.iter().all(|&p| p <= max));
}

#[test]
fn attnmap_writes_one_pair_per_block() {
    let dir = tempfile::tempdir().unwrap();
    let model = ConvShareViT::init(&tiny_config(9), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let ck = dir.path().join("m.ckpt");
    Checkpoint::capture(&model, 3, 0).save(&ck).unwrap();
    let out = dir.path().join("maps");
    let o = convshare(&["attnmap", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let count = |ext: &str| {
        std::fs::read_dir(&out)
            .unwrap()
            .filter(|e| {
                let n = e.as_ref().unwrap().file_name().into_string().unwrap();
                n.starts_with("layer_") && n.ends_with(ext)
            })
            .count()
    };
    assert_eq!((count(".csv"), count(".pgm")), (9, 9));
    check_pgm(&out.join("layer_09.pgm"), 8);
    assert_eq!(read_json(&out.join("attnmap.json"))["layers"], 9);
}

#[test]
fn corrupt_checkpoint_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("bad.ckpt");
    std::fs::write(&ck, b"NOTACKPT and some bytes").unwrap();
    let o = convshare(&["attnmap", "--checkpoint", ck.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn simulate_matches_electronic_logits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(2));
    for mode in ["cells", "canvas"] {
        let out = dir.path().join(mode);
        let o = convshare(&[
            "simulate", "--config", &cfg, "--images", "4", "--device-res", "40", "--mode", mode, "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
        let r = read_json(&out.join("simulate.json"));
        assert_eq!(r["schema_version"], 1);
        assert_eq!(r["passed"], true);
        assert!(r["max_rel_deviation"].as_f64().unwrap() < 1e-6);
        assert_eq!(r["argmax_agreement"], 4);
        assert_eq!(r["inferences_per_image"], r["planned_inferences"]);
    }
    let o = convshare(&["simulate", "--config", &cfg, "--images", "1", "--device-res", "6"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("qkv"));
}
