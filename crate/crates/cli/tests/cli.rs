use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn shadowlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shadowlab")).args(args).output().expect("spawn shadowlab")
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(shadowlab(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(shadowlab(&["synth", "--bogus", "1"]).status.code(), Some(1));
    assert_eq!(shadowlab(&["--help"]).status.code(), Some(0));
    assert_eq!(shadowlab(&["train", "--out", "/tmp/x", "--stage", "2"]).status.code(), Some(1));
}

#[test]
fn missing_files_exit_with_io_status() {
    let out = shadowlab(&["eval", "--pred", "/nonexistent/a.png", "--target", "/nonexistent/b.png", "--mask", "/nonexistent/m.pgm"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn synth_is_reproducible_and_eval_of_identity_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = shadowlab(&["synth", "--n", "4", "--seed", "7", "--size", "32", "--out", s(d)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 13);
    assert_eq!(ta, tb);

    let target = a.join("0000_target.png");
    let report = a.join("report.json");
    let out = shadowlab(&["eval", "--pred", s(&target), "--target", s(&target), "--mask", s(&a.join("0000_mask.pgm")), "--out", s(&report)]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["lab_rmse_all"], 0.0);
    assert_eq!(v["lab_rmse_shadow"], 0.0);
    assert_eq!(v["psnr"], "inf");
    assert_eq!(v["ssim"], 1.0);
    assert_eq!(serde_json::from_slice::<serde_json::Value>(&fs::read(report).unwrap()).unwrap(), v);
}

#[test]
fn colorshift_writes_kept_negatives() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(shadowlab(&["synth", "--n", "1", "--seed", "3", "--out", s(&data)]).status.success());
    let neg = tmp.path().join("neg");
    let out = shadowlab(&[
        "colorshift", "--image", s(&data.join("0000_target.png")), "--mask", s(&data.join("0000_mask.pgm")), "--k", "6", "--out", s(&neg),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(neg.join("manifest.json")).unwrap()).unwrap();
    let kept = m["kept"].as_array().unwrap();
    assert!(!kept.is_empty());
    for k in kept {
        assert!(neg.join(format!("negative_{:02}.png", k.as_u64().unwrap())).is_file());
    }
}

#[test]
fn train_then_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let out = shadowlab(&["train", "--out", s(&run), "--n", "2", "--size", "16", "--stage1-steps", "2", "--stage2-steps", "2", "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["stage1.ckpt", "model.ckpt", "metrics.json", "summary.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let data = tmp.path().join("data");
    assert!(shadowlab(&["synth", "--n", "1", "--size", "16", "--out", s(&data)]).status.success());
    let gates = tmp.path().join("gates");
    let out = shadowlab(&[
        "infer", "--checkpoint", s(&run.join("model.ckpt")), "--image", s(&data.join("0000_input.png")),
        "--mask", s(&data.join("0000_mask.pgm")), "--out", s(&tmp.path().join("pred.png")), "--dump-gates", s(&gates),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["coarse.png", "gate_h.png", "gate_v.png"] {
        assert!(gates.join(f).is_file(), "{f}");
    }
}

#[test]
fn bench_prints_csv() {
    let out = shadowlab(&["bench", "--lengths", "8,16", "--reps", "1"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("L,Z,mode,ns_per_step"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn gradcheck_passes() {
    let out = shadowlab(&["gradcheck", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 9);
}
