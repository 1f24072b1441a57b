use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_aced");

/// Small enough that training and inference take well under a second.
const TINY: &[&str] = &[
    "--set",
    "k=4",
    "--set",
    "height=16",
    "--set",
    "width=16",
    "--set",
    "base_width=2",
    "--set",
    "fusion_width=2",
    "--set",
    "batch_size=2",
    "--set",
    "max_iter=3",
    "--set",
    "num_samples=3",
];

fn aced(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn aced")
}

fn tiny(args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend_from_slice(TINY);
    aced(&all)
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden")
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(aced(&[]).status.code(), Some(1));
    assert_eq!(aced(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(aced(&["gen-data"]).status.code(), Some(1));
    assert_eq!(
        aced(&["--mode", "fast", "gen-data", "--out", "x"]).status.code(),
        Some(1)
    );
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let bad_key = aced(&["--set", "colour=blue", "gen-data", "--out", s(&out)]);
    assert_eq!(bad_key.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("colour"));
    assert!(!out.exists(), "config must be validated before any work");
    assert_eq!(
        aced(&["--config", "/nonexistent.cfg", "grad-check"]).status.code(),
        Some(1)
    );
    assert_eq!(aced(&["--help"]).status.code(), Some(0));
    assert_eq!(aced(&["--version"]).status.code(), Some(0));
}

#[test]
fn config_layering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# fixture\nseed = 7\nheight = 16\nwidth = 16\nnum_samples = 2\n").unwrap();
    let gen = |extra: &[&str], name: &str| -> Vec<u8> {
        let out = dir.path().join(name);
        let mut args = vec!["--config", s(&cfg)];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["gen-data", "--out", s(&out)]);
        ok(&aced(&args));
        fs::read(out.join("scene_00000.ppm")).unwrap()
    };
    let from_file = gen(&[], "file");
    // the file's seed 7 reproduces the golden scene
    assert_eq!(from_file, fs::read(golden().join("scene_00000.ppm")).unwrap());
    // command line beats file
    let seed3 = gen(&["--seed", "3"], "flag");
    assert_ne!(seed3, from_file);
    assert_eq!(gen(&["--set", "seed=3"], "set"), seed3);
    // --set is applied after --seed
    assert_eq!(gen(&["--seed", "3", "--set", "seed=7"], "both"), from_file);
    // flags after the subcommand combine with those before it
    let split = dir.path().join("split");
    ok(&aced(&[
        "--config",
        s(&cfg),
        "--set",
        "seed=3",
        "gen-data",
        "--out",
        s(&split),
        "--set",
        "num_samples=1",
    ]));
    assert_eq!(fs::read(split.join("scene_00000.ppm")).unwrap(), seed3);
    assert!(!split.join("scene_00001.ppm").exists());
    // defaults fill what the file leaves out: 32x32 without the file's size keys
    fs::write(&cfg, "seed = 7\nnum_samples = 1\n").unwrap();
    let default_size = gen(&[], "defaults");
    assert_eq!(&default_size[..9], b"P6\n32 32\n");
}

#[test]
fn gen_data_is_deterministic_and_matches_goldens() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = golden().join("gen.cfg");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&aced(&["--config", s(&cfg), "gen-data", "--out", s(&a)]));
    ok(&aced(&["--config", s(&cfg), "gen-data", "--out", s(&b)]));
    for name in ["manifest.txt", "scene_00000.ppm", "scene_00001.pgm", "scene_00002.ppm"] {
        let bytes = fs::read(a.join(name)).unwrap();
        assert_eq!(bytes, fs::read(b.join(name)).unwrap(), "{name}");
        assert_eq!(bytes, fs::read(golden().join(name)).unwrap(), "{name}");
    }

    let empty = dir.path().join("empty");
    ok(&aced(&["--set", "num_samples=0", "gen-data", "--out", s(&empty)]));
    assert_eq!(fs::read(empty.join("manifest.txt")).unwrap(), b"");
}

#[test]
fn grad_check_passes_and_fails_under_fault() {
    let out = aced(&["grad-check"]);
    let text = ok(&out);
    for op in [
        "add",
        "conv2d",
        "pair_softmax",
        "confidence",
        "label_to_depth",
        "loss_grad",
        "total_loss_model",
    ] {
        assert!(
            text.lines().any(|l| l.starts_with(op) && l.ends_with("PASS")),
            "{op}:\n{text}"
        );
    }
    assert!(text.contains("grad-check PASS"));

    let bad = aced(&["grad-check", "--inject-fault", "pair_softmax"]);
    assert_eq!(bad.status.code(), Some(2));
    let text = String::from_utf8(bad.stdout).unwrap();
    assert!(text
        .lines()
        .any(|l| l.starts_with("pair_softmax") && l.ends_with("FAIL")));
    assert!(text
        .lines()
        .any(|l| l.starts_with("total_loss_model") && l.ends_with("FAIL")));

    assert_eq!(
        aced(&["grad-check", "--inject-fault", "no_such_op"]).status.code(),
        Some(1)
    );
}

#[test]
fn train_eval_infer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = ok(&tiny(&["gen-data", "--out", s(&data)]));
    let manifest = PathBuf::from(manifest.trim());
    let ckpt = dir.path().join("model.ckpt");
    let log = dir.path().join("train.jsonl");
    ok(&tiny(&[
        "train",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
        "--log",
        s(&log),
    ]));
    let lines: Vec<serde_json::Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["iter"], i);
        assert!(l["loss"].as_f64().unwrap().is_finite());
    }

    // evaluating twice gives identical reports
    let e1 = ok(&tiny(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest)]));
    let e2 = ok(&tiny(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest)]));
    assert_eq!(e1, e2);
    let records: Vec<serde_json::Value> = e1.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let aggregate: Vec<&str> = records
        .iter()
        .filter(|r| r["scope"] == "aggregate")
        .map(|r| r["output"].as_str().unwrap())
        .collect();
    assert_eq!(aggregate, ["coarse", "refined", "hard"]);
    for key in ["rel", "log10", "rms", "delta1", "delta2", "delta3", "dde"] {
        assert!(records[0][key].is_number(), "{key}");
    }

    // a checkpoint that does not fit the config is rejected
    let mismatch = tiny(&[
        "--set",
        "stages=3",
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
    ]);
    assert_eq!(mismatch.status.code(), Some(1));

    let prefix = dir.path().join("pred/scene");
    let image = data.join("scene_00001.ppm");
    ok(&tiny(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&image),
        "--out",
        s(&prefix),
    ]));
    let depth = fs::read(dir.path().join("pred/scene_depth.pgm")).unwrap();
    let conf = fs::read(dir.path().join("pred/scene_confidence.pgm")).unwrap();
    let vis = fs::read(dir.path().join("pred/scene_depth.ppm")).unwrap();
    assert!(depth.starts_with(format!("P5\n# scale {}\n16 16\n65535\n", 8.0 / 65535.0).as_bytes()));
    assert!(conf.starts_with(format!("P5\n# scale {}\n16 16\n65535\n", 1.0 / 65535.0).as_bytes()));
    assert!(vis.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(vis.len(), 13 + 16 * 16 * 3);
}

#[test]
fn vertical_ramp_renders_as_vertical_ramp() {
    let dir = tempfile::tempdir().unwrap();
    let (h, w) = (6usize, 4usize);
    let depth = dir.path().join("ramp.pgm");
    // rows from beta = 8 down to alpha = 0.5
    let scale = 8.0 / 65535.0;
    let mut pgm = format!("P5\n# scale {scale}\n{w} {h}\n65535\n").into_bytes();
    for y in 0..h {
        let d = 8.0 - 7.5 * y as f64 / (h - 1) as f64;
        let raw = (d / scale).round() as u16;
        for _ in 0..w {
            pgm.extend_from_slice(&raw.to_be_bytes());
        }
    }
    fs::write(&depth, pgm).unwrap();
    let out = dir.path().join("ramp.ppm");
    ok(&aced(&["render", "--depth", s(&depth), "--out", s(&out)]));
    let bytes = fs::read(&out).unwrap();
    let header = format!("P6\n{w} {h}\n255\n");
    assert!(bytes.starts_with(header.as_bytes()));
    let px = &bytes[header.len()..];
    let mut previous = u8::MAX;
    for y in 0..h {
        let row = &px[y * w * 3..(y + 1) * w * 3];
        assert!(row.iter().all(|&v| v == row[0]), "row {y} is not uniform gray");
        let want = (255.0 * (1.0 - y as f64 / (h - 1) as f64)).round() as i32;
        assert!((i32::from(row[0]) - want).abs() <= 1, "row {y}: {} vs {want}", row[0]);
        assert!(row[0] <= previous);
        previous = row[0];
    }
    assert_eq!(px[0], 255);
    assert_eq!(px[(h - 1) * w * 3], 0);
}
