use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xview::FlowField;

fn xview(args: &[&str], out_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_xview"));
    cmd.args(args).env("RUST_LOG", "warn");
    match out_dir {
        Some(d) => cmd.env("XVIEW_OUT_DIR", d).current_dir(d),
        None => cmd.env_remove("XVIEW_OUT_DIR"),
    };
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

const TINY: [&str; 18] = [
    "--set", "image_size=32",
    "--set", "enc_layers=4",
    "--set", "dec_layers=2",
    "--set", "enc_dim=32",
    "--set", "dec_dim=32",
    "--set", "n_heads=2",
    "--set", "steps=3",
    "--set", "batch_size=2",
    "--set", "seed=5",
];

/// Dataset of one pair per tier plus a three-step checkpoint.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(&xview(&["gen-data", "--out", data.to_str().unwrap(), "--n-per-tier", "1", "--size", "32"], None));
    let ckpt = dir.join("model.ckpt");
    let mut args = vec!["pretrain", "--ckpt", ckpt.to_str().unwrap()];
    args.extend(TINY);
    ok(&xview(&args, None));
    (data.join("manifest.txt"), ckpt)
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(xview(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(xview(&["match", "--bogus"], None).status.code(), Some(2));
    assert_eq!(xview(&[], None).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    xview::Image::filled(32, 32, [0.5; 3]).save_png(&img).unwrap();
    let out = xview(
        &["match", "--source", img.to_str().unwrap(), "--target", img.to_str().unwrap(), "--ckpt", "/nonexistent/c", "--out", "f.flo"],
        Some(dir.path()),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint error"));
}

#[test]
fn unknown_setting_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = xview(&["pretrain", "--ckpt", "x.ckpt", "--set", "warp_speed=9"], Some(dir.path()));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, ckpt) = fixture(dir.path());
    let (m, c) = (manifest.to_str().unwrap(), ckpt.to_str().unwrap());
    let data = manifest.parent().unwrap();
    let src = data.join("t3_00000_src.png");
    let tgt = data.join("t3_00000_tgt.png");
    let (s, t) = (src.to_str().unwrap(), tgt.to_str().unwrap());

    ok(&xview(&["match", "--source", s, "--target", t, "--ckpt", c, "--out", "f.flo", "--png", "f.png"], Some(dir.path())));
    let flow = FlowField::read_flo(&dir.path().join("f.flo")).unwrap();
    assert_eq!((flow.width, flow.height), (32, 32));
    assert!(dir.path().join("f.png").is_file());

    ok(&xview(&["eval", "--manifest", m, "--ckpt", c, "--sources", "all", "--report", "r1.csv", "--ablation", "abl.csv"], Some(dir.path())));
    ok(&xview(&["eval", "--manifest", m, "--ckpt", c, "--sources", "all", "--report", "r2.csv"], Some(dir.path())));
    let r1 = std::fs::read_to_string(dir.path().join("r1.csv")).unwrap();
    assert_eq!(r1, std::fs::read_to_string(dir.path().join("r2.csv")).unwrap());
    let lines: Vec<&str> = r1.lines().collect();
    assert_eq!(lines[0], "source_kind,tier,n_pairs,aepe_mean,epe_median,wall_ms");
    assert_eq!(lines.len(), 1 + 3 * 5);
    for kind in ["encoder_corr", "decoder_corr", "cross_attention"] {
        assert_eq!(lines.iter().filter(|l| l.starts_with(kind)).count(), 5);
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("abl.csv")).unwrap().lines().count(), 8);

    let out = xview(&["visualize", "--ckpt", c, "--source", s, "--target", t, "--query", "12,20", "--out-dir", "viz"], Some(dir.path()));
    ok(&out);
    for f in ["attention_encoder_corr.png", "attention_decoder_corr.png", "attention_cross_attention.png", "flow.png", "warp.png"] {
        assert!(dir.path().join("viz").join(f).is_file(), "{f}");
    }
    let out = xview(&["visualize", "--ckpt", c, "--source", s, "--target", t, "--query", "40,2"], Some(dir.path()));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("range error"));

    let head_args = [
        "--set", "window_size=2", "--set", "agg_dim=8", "--set", "compressed_dim=32", "--set", "stage1_epochs=1", "--set", "stage2_epochs=1", "--set", "batch_size=2",
    ];
    let mut args = vec!["train-flow", "--ckpt", c, "--out", "head.ckpt", "--pairs", "4"];
    args.extend(head_args);
    ok(&xview(&args, Some(dir.path())));
    ok(&xview(&["match", "--source", s, "--target", t, "--ckpt", c, "--head", "head.ckpt", "--out", "h.flo"], Some(dir.path())));
    assert!(FlowField::read_flo(&dir.path().join("h.flo")).is_ok());

    ok(&xview(&["finetune", "--ckpt", c, "--out", "ft.ckpt", "--pairs", "4", "--set", "epochs=1", "--set", "batch_size=2"], Some(dir.path())));
    assert!(xview::checkpoint::load_checkpoint(&dir.path().join("ft.ckpt"), None).is_ok());
}

#[test]
fn resumed_pretraining_continues_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["pretrain", "--ckpt", "a.ckpt", "--until", "2", "--metrics", "m.csv"];
    args.extend(TINY);
    ok(&xview(&args, Some(dir.path())));
    ok(&xview(&["pretrain", "--ckpt", "b.ckpt", "--resume", "a.ckpt", "--metrics", "m.csv"], Some(dir.path())));
    let (params, _) = xview::checkpoint::load_checkpoint(&dir.path().join("b.ckpt"), None).unwrap();
    assert_eq!(params.step, 3);
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
}
