use std::path::Path;
use std::process::{Command, Output};

fn hdrfield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdrfield")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_on_a_small_scene() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let run = dir.path().join("run");
    ok(&hdrfield(&["gen-scene", "--width", "16", "--frames", "5", "--train-frames", "0,1,2,4", "--out", s(&scene)]));
    assert!(scene.join("manifest.json").exists());
    assert!(scene.join("ldr/0003.png").exists());

    let train = [
        "train", "--scene", s(&scene), "--out", s(&run), "--steps", "3", "--seed", "4", "--net-layers", "1", "--net-width", "8",
        "--batch-rays", "4", "--samples", "6", "--beta-reg", "0.2", "--crf", "piecewise", "--checkpoint-every", "2",
    ];
    ok(&hdrfield(&train));
    for f in ["final.bin", "checkpoint_0000002.bin", "loss_log.txt", "crf.txt", "config.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["weights"]["beta_reg"], 0.2);
    assert_eq!(std::fs::read_to_string(run.join("crf.txt")).unwrap().lines().filter(|l| !l.starts_with('#')).count(), 256 + 4);

    let ckpt = run.join("final.bin");
    let render = |mode: &str, file: &str, extra: &[&str]| {
        let out = dir.path().join(file);
        let mut args = vec!["render", "--ckpt", s(&ckpt), "--scene", s(&scene), "--mode", mode, "--out", s(&out)];
        args.extend_from_slice(extra);
        (hdrfield(&args), out)
    };
    for (mode, file) in [("hdr", "v.pfm"), ("ldr-high", "v.png"), ("mulaw", "m.png"), ("depth", "d.pfm"), ("flow", "f.pfm")] {
        let (o, path) = render(mode, file, &["--frame", "1"]);
        ok(&o);
        assert!(path.exists(), "{mode}");
    }
    let (o, _) = render("hdr", "t.pfm", &["--time", "0.37", "--offset", "0.01,0,0"]);
    ok(&o);
    let (o, _) = render("hdr", "bad.pfm", &["--time", "1.5"]);
    assert!(!o.status.success());
    let (o, _) = render("flow", "bad.pfm", &["--frame", "3"]);
    assert!(!o.status.success());

    let report = dir.path().join("report.json");
    let stdout = ok(&hdrfield(&["eval", "--ckpt", s(&ckpt), "--scene", s(&scene), "--samples", "6", "--out", s(&report)]));
    assert!(stdout.contains("LPIPS") && stdout.contains("curve-monotone"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["summaries"].as_array().unwrap().len(), 3);
    assert!(json["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));

    let figs = dir.path().join("figs");
    ok(&hdrfield(&["plot", "--run", s(&run), "--scene", s(&scene), "--out", s(&figs)]));
    for f in ["loss.svg", "crf.svg", "histogram.svg", "histogram.txt"] {
        assert!(figs.join(f).exists(), "{f} missing");
    }

    // resuming the finished run with the same settings changes nothing
    let mut resume = train.to_vec();
    resume.extend_from_slice(&["--resume", s(&ckpt)]);
    let before = std::fs::read(&ckpt).unwrap();
    ok(&hdrfield(&resume));
    assert_eq!(std::fs::read(&ckpt).unwrap(), before);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = hdrfield(&["train", "--width", "16", "--frames", "3", "--out", s(&out), "--steps", "1", "--enhancer", "magic"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
    assert!(!hdrfield(&["plot", "--run", s(dir.path()), "--out", s(&out)]).status.success());
    assert!(!hdrfield(&["eval", "--ckpt", s(&dir.path().join("none.bin"))]).status.success());
    assert!(!hdrfield(&["gen-scene", "--scene", s(&dir.path().join("missing.json")), "--out", s(&out)]).status.success());
}
