use std::path::Path;
use std::process::{Command, Output};

fn tmcdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tmcdiff")).args(args).output().expect("spawn tmcdiff")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    let o = tmcdiff(&["train", "--condition", "jpeg"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[E_USAGE]: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn runtime_errors_exit_1_with_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = tmcdiff(&["sample", "--checkpoint", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[E_"), "{}", stderr(&o));

    let o = tmcdiff(&["synth", "--out", dir.path().to_str().unwrap(), "--set", "scenes=zero"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("scenes"), "{}", stderr(&o));
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn archived_config_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = tmcdiff(&["synth", "--out", a.to_str().unwrap(), "--seed", "4", "--set", "scenes=3", "--set", "size=16", "--set", "ev_levels=-2,-5", "--set", "zooms=1,2", "--set", "test=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let archived = a.join("resolved_config.txt");
    let text = String::from_utf8(read(&archived)).unwrap();
    assert!(text.starts_with("# tmcdiff synth\n"), "{text}");
    assert!(text.contains("seed = 4"), "{text}");

    let b = dir.path().join("b");
    let o = tmcdiff(&["synth", "--config", archived.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(&a.join("manifest.json")), read(&b.join("manifest.json")));
    let first = a.join("scenes/scene_0000/gt_x2.png");
    assert_eq!(read(&first), read(&b.join("scenes/scene_0000/gt_x2.png")));
}

#[test]
fn set_overrides_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    std::fs::write(&cfg, "scenes = 2\nsize = 16\nzooms = 1\nev_levels = -2\ntest = 0\nseed = 1\n").unwrap();
    let out = dir.path().join("o");
    let o = tmcdiff(&["synth", "--config", cfg.to_str().unwrap(), "--seed", "9", "--set", "scenes=3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(read(&out.join("resolved_config.txt"))).unwrap();
    assert!(text.contains("scenes = 3") && text.contains("seed = 9") && text.contains("size = 16"), "{text}");
}
