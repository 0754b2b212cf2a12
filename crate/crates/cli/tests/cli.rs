use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.image_size = 16
data.train_pool = 8
data.test_pool = 8
train.cls_epochs = 1
train.episodic_epochs = 1
train.steps_per_epoch = 4
eval.pairs = 6
";

fn camseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camseg")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn tiny_config(dir: &Path, name: &str, extra: &str) -> String {
    let p = dir.join(format!("{name}.cfg"));
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&camseg(&["--help"])), 0);
    assert_eq!(code(&camseg(&["--version"])), 0);
    assert_eq!(code(&camseg(&["frobnicate"])), 1);
    assert_eq!(code(&camseg(&["eval", "--k", "many"])), 1);
    assert_eq!(code(&camseg(&[])), 1);
}

#[test]
fn configuration_and_data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "train.nonsense = 3\n").unwrap();
    let out = camseg(&["train-cls", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.nonsense"));

    let cfg = tiny_config(dir.path(), "tiny", "");
    let out_dir = dir.path().to_str().unwrap();
    assert_eq!(code(&camseg(&["train-cls", "--config", &cfg, "--fold", "7", "--out", out_dir])), 2);
    assert_eq!(code(&camseg(&["eval", "--config", &cfg, "--out", out_dir])), 2);
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "diverge", "train.lr = 1e30\n");
    let out = camseg(&["train-cls", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "tiny", "");
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    let run = |args: &[&str]| {
        let r = camseg(args);
        assert_eq!(code(&r), 0, "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
        r
    };

    run(&["gen-data", "--config", &cfg, "--out", o]);
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 20 * 16);
    assert_eq!(std::fs::read_to_string(out.join("eval_fold0.txt")).unwrap().lines().count(), 7);

    run(&["train-cls", "--config", &cfg, "--out", o]);
    run(&["train-episodic", "--config", &cfg, "--out", o]);
    let log = std::fs::read_to_string(out.join("stage2_log.txt")).unwrap();
    assert!(log.contains("0 0.0001 "), "{log}");

    run(&["eval", "--config", &cfg, "--out", o, "--k", "1"]);
    run(&["eval", "--config", &cfg, "--out", o, "--k", "5"]);
    let kv = std::fs::read_to_string(out.join("eval_fold0_k5.kv")).unwrap();
    assert!(kv.contains("fold0.episodes = 6"), "{kv}");

    run(&["cam-dump", "--config", &cfg, "--out", o, "--episode", "2"]);
    assert!(out.join("cam_ep0002/prior.png").exists());
    assert!(out.join("cam_ep0002/class05.png").exists());

    // a changed training config is refused on resume
    let other = tiny_config(dir.path(), "other", "train.lr = 0.001\n");
    assert_eq!(code(&camseg(&["train-episodic", "--config", &other, "--out", o])), 2);

    let preview = out.join("preview");
    let mut pngs: Vec<_> = std::fs::read_dir(&preview)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_str().unwrap().starts_with(preview.join("class03").to_str().unwrap()) && !p.to_str().unwrap().ends_with("_mask.png"))
        .collect();
    pngs.sort();
    let support = pngs[0].to_str().unwrap().to_string();
    let mask = support.replace(".png", "_mask.png");
    let query = pngs[1].to_str().unwrap().to_string();
    let ckpt = out.join("stage2.ckpt");
    let before = std::fs::read(&ckpt).unwrap();
    let a = out.join("a.png");
    let b = out.join("b.png");
    let prior = out.join("prior.png");
    for target in [&a, &b] {
        run(&[
            "infer", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--support", &support, "--support-mask",
            &mask, "--query", &query, "--out", target.to_str().unwrap(), "--prior-out", prior.to_str().unwrap(),
        ]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read(&ckpt).unwrap(), before);
    assert!(prior.exists());

    // five copies of the same support give the same mask
    let c = out.join("c.png");
    let mut args = vec!["infer", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--query", &query];
    for _ in 0..5 {
        args.extend(["--support", &support, "--support-mask", &mask]);
    }
    let c_str = c.to_str().unwrap().to_string();
    args.extend(["--out", &c_str]);
    run(&args);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let missing = camseg(&[
        "infer", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--support", &support, "--support-mask",
        "/nonexistent.png", "--query", &query, "--out", a.to_str().unwrap(),
    ]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "tiny", "");
    let mut ckpts = Vec::new();
    for name in ["x", "y"] {
        let out = dir.path().join(name);
        let r = camseg(&["train-cls", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "5"]);
        assert_eq!(code(&r), 0);
        ckpts.push(std::fs::read(out.join("stage1.ckpt")).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);
}
