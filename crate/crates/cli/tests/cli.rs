use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], out_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_reidmamba"));
    cmd.args(args).env("RUST_LOG", "warn");
    if let Some(d) = out_dir {
        cmd.env("REIDMAMBA_OUTPUT_DIR", d);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--set", "steps=3",
    "--set", "warmup_steps=1",
    "--set", "eval_every=0",
    "--set", "embed_dim=16",
    "--set", "depth=3",
    "--set", "d_state=4",
    "--set", "train_identities=6",
    "--set", "test_identities=4",
    "--set", "batch_p=3",
    "--set", "batch_k=2",
];

#[test]
fn train_then_eval_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    let o = run(&args, Some(dir.path()));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.txt", "metrics.csv", "checkpoint.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("step,lr,loss_total,loss_id,loss_tri,loss_ratr_intra,loss_ratr_inter,mAP,r1,ktau_intra,ktau_inter"));

    let ckpt = dir.path().join("checkpoint.ckpt");
    let cfg = dir.path().join("config.txt");
    let o = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", cfg.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let last = csv.lines().last().unwrap();
    let map_logged: f64 = last.split(',').nth(7).unwrap().parse().unwrap();
    assert!(stdout(&o).contains(&format!("mAP {map_logged:.4}")), "{} vs {last}", stdout(&o));

    let o = run(&["inspect-checkpoint", ckpt.to_str().unwrap()], None);
    assert!(o.status.success());
    assert!(stdout(&o).contains("config embed_dim = 16"));
}

#[test]
fn corrupt_checkpoint_exits_with_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"reidmamba-checkpoint 42\n").unwrap();
    let o = run(&["inspect-checkpoint", path.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("E_VERSION"));
}

#[test]
fn gradcheck_reports_each_component() {
    let o = run(&["gradcheck", "--component", "linear"], None);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("linear"));
    assert!(stdout(&o).contains("ok"));
    let o = run(&["gradcheck", "--component", "nope"], None);
    assert!(!o.status.success());
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = run(&["bench", "--tokens", "32,64", "--width", "8", "--repeats", "2", "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "tokens,scan_ms,attention_ms,scan_floats,attention_floats");
    assert_eq!(lines.len(), 3);
}

#[test]
fn bad_override_is_rejected() {
    let o = run(&["train", "--set", "no_such_key=1"], None);
    assert!(!o.status.success());
}
