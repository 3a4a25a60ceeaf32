mod common;

use std::path::Path;
use std::process::{Command, Output};

use capgan::scene::MANIFEST_FILE;

fn capgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capgan")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = capgan(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn pngs(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count()
}

#[test]
fn unknown_flag_exits_one_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let res = capgan(&["synth-data", "--seed", "1", "--out", out.to_str().unwrap(), "--colour", "red"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn bad_configuration_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = out.to_str().unwrap();
    let missing_seed = capgan(&["synth-data", "--out", o]);
    assert_eq!(missing_seed.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing_seed.stderr).contains("seed"));
    let unknown_key = capgan(&["synth-data", "--seed", "1", "--out", o, "--set", "colour=red"]);
    assert_eq!(unknown_key.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown_key.stderr).contains("colour"));
    assert!(!out.exists());
}

#[test]
fn synth_train_and_generate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let cfg_path = p("run.cfg");
    let mut cfg = common::tiny_run_config(3);
    cfg.set("n", "12").unwrap();
    cfg.set("grid", "2").unwrap();
    cfg.save(Path::new(&cfg_path)).unwrap();

    ok(&["synth-data", "--config", &cfg_path, "--out", &p("data")]);
    assert!(dir.path().join("data").join(MANIFEST_FILE).exists());
    assert_eq!(pngs(&dir.path().join("data").join("images")), 12);
    // same seed, same bytes
    ok(&["synth-data", "--config", &cfg_path, "--out", &p("data2")]);
    assert_eq!(
        std::fs::read(dir.path().join("data").join(MANIFEST_FILE)).unwrap(),
        std::fs::read(dir.path().join("data2").join(MANIFEST_FILE)).unwrap()
    );

    ok(&["train-captioner", "--config", &cfg_path, "--out", &p("cap")]);
    // a second process must reproduce the captioner exactly
    ok(&["train-captioner", "--config", &cfg_path, "--out", &p("cap2")]);
    for file in ["captioner.ckpt", "captioner_history.csv", "captioner_summary.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("cap").join(file)).unwrap(),
            std::fs::read(dir.path().join("cap2").join(file)).unwrap(),
            "{file}"
        );
    }
    let cap_ckpt = format!("captioner_checkpoint={}", p("cap/captioner.ckpt"));
    let data_dir = format!("data_dir={}", p("data"));
    ok(&["train-gan", "--config", &cfg_path, "--out", &p("gan"), "--set", &data_dir, "--set", &cap_ckpt]);
    let gan_ckpt = format!("gan_checkpoint={}", p("gan/gan.ckpt"));

    let gen = |extra: &[&str], out: &str| {
        let mut args = vec!["generate", "--config", &cfg_path, "--out", out, "--set", &gan_ckpt, "--set", &cap_ckpt];
        args.extend_from_slice(extra);
        capgan(&args)
    };
    let res = gen(&["--caption", "a bedroom with red walls", "--n", "3"], &p("gen"));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for i in 0..3 {
        assert!(dir.path().join("gen").join(format!("sample_{i:03}.png")).exists());
    }
    assert!(dir.path().join("gen").join("grid.png").exists());

    let no_caption = gen(&[], &p("gen2"));
    assert_eq!(no_caption.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&no_caption.stderr).contains("--caption"));
}
