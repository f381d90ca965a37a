use std::path::Path;
use std::process::{Command, Output};

fn htr(args: &[&str]) -> Output {
    htr_env(args, &[])
}

fn htr_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_htr"));
    cmd.args(args).env_remove("HTR_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("run htr")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn field(out: &str, key: &str) -> f64 {
    out.lines().find_map(|l| l.strip_prefix(key)?.trim().parse().ok()).unwrap_or_else(|| panic!("{key} missing in {out}"))
}

fn report_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with("# mode=")).map(String::from).collect()
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["frobnicate"][..],
        &["flops", "--height", "32", "--width", "400", "--depth", "3"],
        &["flops", "--height", "32"],
        &["eval", "--ckpt", "x", "--data", "y", "--greedy", "--beam", "2"],
        &["synth", "--out", "d", "--lines", "many"],
        &[],
    ] {
        let o = htr(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(o.stdout.is_empty());
        assert!(!o.stderr.is_empty(), "{args:?}");
    }
}

#[test]
fn flops_ratio_at_four_times_the_height() {
    let hi = htr(&["flops", "--height", "128", "--width", "1600"]);
    let lo = htr(&["flops", "--height", "32", "--width", "400"]);
    assert!(hi.status.success() && lo.status.success());
    let ratio = field(&stdout(&hi), "conv\t") / field(&stdout(&lo), "conv\t");
    assert!((ratio / 16.0 - 1.0).abs() < 0.05, "{ratio}");
    assert_eq!(htr(&["flops", "--height", "0", "--width", "10"]).status.code(), Some(1));
}

#[test]
fn synth_is_seeded_and_honors_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    assert!(htr(&["synth", "--out", &p("a"), "--lines", "3", "--seed", "5"]).status.success());
    assert!(htr_env(&["synth", "--out", &p("b"), "--lines", "3"], &[("HTR_SEED", "5")]).status.success());
    assert!(htr(&["synth", "--out", &p("c"), "--lines", "3"]).status.success());
    let read = |d: &str| std::fs::read(dir.path().join(d).join("lines.tsv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    for i in 0..3 {
        let img = format!("line_{i:05}.pgm");
        assert_eq!(std::fs::read(dir.path().join("a").join(&img)).unwrap(), std::fs::read(dir.path().join("b").join(&img)).unwrap());
    }

    let bad = htr_env(&["synth", "--out", &p("d"), "--lines", "3"], &[("HTR_SEED", "seven")]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(bad.stdout.is_empty());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("HTR_SEED"));

    let unsupported = htr(&["synth", "--out", &p("e"), "--lines", "3", "--alphabet", "aQ"]);
    assert_eq!(unsupported.status.code(), Some(1));
    assert!(!dir.path().join("e").join("lines.tsv").exists());
}

#[test]
fn errors_print_nothing_on_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let garbage = dir.path().join("garbage.htrc");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let report = dir.path().join("r.tsv");
    for args in [
        vec!["decode", "--ckpt", "/nonexistent/m.htrc", "--image", "x.pgm"],
        vec!["decode", "--ckpt", garbage.to_str().unwrap(), "--image", "x.pgm"],
        vec!["eval", "--ckpt", garbage.to_str().unwrap(), "--data", "/nonexistent", "--report", report.to_str().unwrap()],
        vec!["train", "--data", "/nonexistent", "--val", "/nonexistent", "--out", "m.htrc"],
    ] {
        let o = htr(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(o.stdout.is_empty(), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"), "{args:?}");
    }
    assert!(!report.exists());
}

#[test]
fn gradcheck_passes() {
    let o = htr(&["gradcheck", "--seeds", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("gradient checks passed"));
}

#[test]
fn train_eval_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.htrc");
    let (d, c) = (data.to_str().unwrap(), ckpt.to_str().unwrap());
    assert!(htr(&["synth", "--out", d, "--lines", "4", "--seed", "3", "--alphabet", "abc "]).status.success());
    let o = htr(&[
        "train", "--data", d, "--val", d, "--out", c, "--epochs", "120", "--batch", "4", "--lr", "0.003", "--no-augment", "--hidden", "32",
        "--reduced", "--dropout", "0", "--seed", "0",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("best validation CER 0.0000"), "{}", stdout(&o));

    let (rg, rb) = (dir.path().join("greedy.tsv"), dir.path().join("beam1.tsv"));
    let g = htr(&["eval", "--ckpt", c, "--data", d, "--greedy", "--report", rg.to_str().unwrap()]);
    let b = htr(&["eval", "--ckpt", c, "--data", d, "--beam", "1", "--report", rb.to_str().unwrap()]);
    assert!(g.status.success() && b.status.success());
    assert_eq!(report_rows(&rg), report_rows(&rb));
    assert_eq!(field(&stdout(&g), "mean_cer\t"), 0.0);
    assert_eq!(field(&stdout(&g), "mean_wer\t"), 0.0);
    assert_eq!(field(&stdout(&g), "lines\t"), 4.0);

    let index = std::fs::read_to_string(data.join("lines.tsv")).unwrap();
    for row in index.lines() {
        let (img, text) = row.split_once('\t').unwrap();
        let o = htr(&["decode", "--ckpt", c, "--image", data.join(img).to_str().unwrap()]);
        assert!(o.status.success());
        assert_eq!(stdout(&o), format!("{text}\n"));
    }
}
