use std::path::Path;
use std::process::{Command, Output};

use tcvc::checkpoint::{backbone_checksum, Checkpoint};

const SPEC: &str = "height = 16\nwidth = 16\nframes = 6\nbackground_motion = 1,0\nobject = 3,3,5,5,1,1,200,40,40\n";

fn tcvc(args: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcvc")).args(args).output().unwrap()
}

fn p(s: &str) -> &Path {
    Path::new(s)
}

#[test]
fn train_colorize_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = root.join("spec.txt");
    std::fs::write(&spec, SPEC).unwrap();
    let world = root.join("world");
    assert!(tcvc(&[p("synth"), &spec, p("--seed"), p("3"), p("--out"), &world]).status.success());
    let gray = world.join("gray");

    for loss in ["temporal_warping", "ground_truth_l2"] {
        let cfg = root.join(format!("{loss}.cfg"));
        let curve = root.join(format!("{loss}.csv"));
        std::fs::write(
            &cfg,
            format!(
                "interval_len = 4 # short\niterations = 3\nbatch = 1\nlr0 = 1e-3\nffm_hidden = 4\nloss = {loss}\ncurve_csv = {}\n",
                curve.display()
            ),
        )
        .unwrap();
        let ckpt = root.join(format!("{loss}.ckpt"));
        let out = tcvc(&[p("train"), &gray, p("--config"), &cfg, p("--out-ckpt"), &ckpt]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let ck = Checkpoint::load(&ckpt).unwrap();
        assert!(ck.ffm.is_some());
        assert_eq!(
            backbone_checksum(&ck.backbone),
            backbone_checksum(&tcvc::backbone::build_toy_backbone(0))
        );
        assert_eq!(std::fs::read_to_string(&curve).unwrap().lines().count(), 4);
    }

    let pred = root.join("pred");
    let ckpt = root.join("temporal_warping.ckpt");
    let out = tcvc(&[p("colorize"), &gray, p("--ckpt"), &ckpt, p("--N"), p("4"), p("--out"), &pred]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report = root.join("report.json");
    let out = tcvc(&[p("evaluate"), &pred, &world.join("color"), p("--flow-dir"), &world, p("--report"), &report]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["videos"][0]["frames"], 6);
    assert!(json["videos"][0]["warp_error"].as_f64().is_some());
    assert!(json["videos"][0]["psnr"].as_f64().unwrap() > 0.0);
}

#[test]
fn errors_are_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = tcvc(&[p("colorize"), &missing, p("--ckpt"), &missing, p("--out"), tmp.path()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("tcvc: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}
