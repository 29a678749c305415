use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mirrornet_core::dataset::{load_pairs, GrayImage, RgbImage};
use mirrornet_core::train::predict_records;
use mirrornet_core::{Checkpoint, Network};
use tempfile::TempDir;

const TINY: &str = "\
[network]
resolution = 16
widths = [8, 8, 8, 8]
ccfe_blocks = 1
ccfe_scales = 4
reduction = 2

[optim]
epochs = 1
batch_size = 2

[data]
synthetic_scenes = 4
";

fn mirrornet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mirrornet"))
        .args(args)
        .env_remove("MIRRORNET_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit status 1 and a single `error: <category>: ...` line.
fn fails_with(out: Output, category: &str) -> String {
    assert_eq!(out.status.code(), Some(1), "{out:?}");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with(&format!("error: {category}: ")), "{stderr}");
    stderr
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    dir: TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Run { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("tiny.toml")
    }

    fn train(&self, ckpt: &str, extra: &[&str]) -> String {
        let config = self.config();
        let ckpt = self.path(ckpt);
        let mut args = vec!["train", "--config", s(&config), "--checkpoint", s(&ckpt)];
        args.extend_from_slice(extra);
        ok(mirrornet(&args))
    }
}

#[test]
fn train_writes_a_loadable_checkpoint_and_an_append_only_log() {
    let run = Run::new();
    let log = run.path("train.log");
    let stdout = run.train("a.ckpt", &["--seed", "3", "--log", s(&log)]);
    assert!(stdout.contains("epoch=1 iter=2 loss="), "{stdout}");
    let ck = Checkpoint::<f32>::load(&run.path("a.ckpt")).unwrap();
    assert_eq!(ck.config.run.seed, 3);
    assert_eq!(ck.config.network.resolution, 16);

    run.train("a.ckpt", &["--seed", "3", "--log", s(&log)]);
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 6, "{text}");
    assert_eq!(lines[..3], lines[3..]);
    for line in &lines {
        let mut words = line.split(' ');
        let tag = words.next().unwrap();
        assert!(tag == "start" || tag == "end" || tag.starts_with("epoch="), "{line}");
        assert!(words.all(|w| w.contains('=')), "{line}");
    }
}

#[test]
fn reruns_with_one_seed_agree_and_seeds_differ() {
    let run = Run::new();
    let loss = |out: &str| {
        out.lines()
            .find(|l| l.starts_with("end "))
            .and_then(|l| l.split(' ').find(|w| w.starts_with("final_loss=")))
            .unwrap()
            .to_string()
    };
    let read = || std::fs::read(run.path("a.ckpt")).unwrap();
    let a = loss(&run.train("a.ckpt", &["--seed", "1"]));
    let first = read();
    let b = loss(&run.train("a.ckpt", &["--seed", "1"]));
    assert!(first == read(), "checkpoints differ between identical runs");
    let c = loss(&run.train("c.ckpt", &["--seed", "2"]));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn cross_entropy_ablation_never_runs_the_lovasz_loss() {
    let run = Run::new();
    let config = run.path("bce.toml");
    std::fs::write(&config, TINY.replace("reduction = 2", "reduction = 2\nablation = \"bce_loss\"")).unwrap();
    let ckpt = run.path("bce.ckpt");
    let out = ok(mirrornet(&["train", "--config", s(&config), "--checkpoint", s(&ckpt)]));
    let end = out.lines().find(|l| l.starts_with("end ")).unwrap();
    assert!(end.contains(" ops.lovasz_hinge=0 "), "{end}");
    assert!(!end.contains(" ops.bce=0"), "{end}");

    let out = run.train("full.ckpt", &[]);
    let end = out.lines().find(|l| l.starts_with("end ")).unwrap();
    assert!(!end.contains(" ops.lovasz_hinge=0 "), "{end}");
}

#[test]
fn eval_and_infer_on_generated_data() {
    let run = Run::new();
    let data = run.path("data");
    ok(mirrornet(&["gen-data", "--out", s(&data), "--count", "4", "--resolution", "16", "--seed", "0"]));
    run.train("m.ckpt", &["--data", s(&data)]);
    let ckpt = run.path("m.ckpt");

    let both = ok(mirrornet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]));
    for key in ["iou=", "acc=", "f_beta=", "mae=", "ber=", "n_images=4"] {
        assert!(both.contains(key), "{both}");
    }
    for row in ["IoU", "Acc", "F_beta", "MAE", "BER"] {
        assert!(both.lines().any(|l| l.starts_with(row)), "{both}");
    }
    let records = ok(mirrornet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--format", "records"]));
    assert!(both.starts_with(&records));
    let crf = ok(mirrornet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--crf", "--format", "records"]));
    assert!(crf.contains("n_images=4"), "{crf}");

    // inference reproduces the evaluation pipeline's prediction
    let out = run.path("pred");
    let image = data.join("g0000_00000.ppm");
    ok(mirrornet(&["infer", "--checkpoint", s(&ckpt), "--out", s(&out), s(&image)]));
    let prob = GrayImage::read(&out.join("g0000_00000_prob.pgm")).unwrap();
    let mask = GrayImage::read(&out.join("g0000_00000_mask.pgm")).unwrap();
    assert_eq!((prob.width, prob.height), (16, 16));
    assert!(mask.data.iter().all(|&v| v == 0 || v == 255));
    for (&p, &m) in prob.data.iter().zip(&mask.data) {
        assert_eq!(p as f64 / 255.0 >= 0.5, m == 255);
    }
    let ck = Checkpoint::<f32>::load(&ckpt).unwrap();
    let net = Network::new(ck.config.network.clone()).unwrap();
    let records = load_pairs(&data).unwrap();
    let stored = predict_records(&net, &ck.store, &records[..1], 1, None).unwrap();
    let want: Vec<u8> = stored[0].0.data().iter().map(|&p| (p * 255.0).round() as u8).collect();
    assert_eq!(prob.data, want);
}

#[test]
fn crf_refines_a_probability_map_file() {
    let run = Run::new();
    let data = run.path("data");
    ok(mirrornet(&["gen-data", "--out", s(&data), "--count", "1", "--resolution", "16"]));
    let image = data.join("g0000_00000.ppm");
    let mask = data.join("g0000_00000_mask.pgm");
    let out = run.path("refined.pgm");
    ok(mirrornet(&["crf", "--image", s(&image), "--prob", s(&mask), "--out", s(&out)]));
    let refined = GrayImage::read(&out).unwrap();
    assert_eq!((refined.width, refined.height), (16, 16));

    let small = run.path("small.pgm");
    GrayImage::new(8, 8).write(&small).unwrap();
    fails_with(mirrornet(&["crf", "--image", s(&image), "--prob", s(&small), "--out", s(&out)]), "shape");
}

#[test]
fn gen_data_split_and_stats() {
    let run = Run::new();
    let data = run.path("data");
    let out = ok(mirrornet(&["gen-data", "--out", s(&data), "--count", "12", "--resolution", "16", "--split"]));
    assert_eq!(out.lines().count(), 2, "{out}");
    let train = load_pairs(&data.join("train")).unwrap();
    let test = load_pairs(&data.join("test")).unwrap();
    assert_eq!(train.len() + test.len(), 12);
    assert!(train.iter().all(|a| test.iter().all(|b| a.group != b.group)));

    let stats = ok(mirrornet(&["stats", s(&data.join("train")), "--map-size", "4"]));
    assert!(stats.starts_with("summary "), "{stats}");
    assert_eq!(stats.lines().filter(|l| l.starts_with("location ")).count(), 4);
}

#[test]
fn seed_flag_overrides_the_environment() {
    let run = Run::new();
    let gen = |dir: &str, env: Option<&str>, flag: Option<&str>| {
        let out = run.path(dir);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_mirrornet"));
        cmd.args(["gen-data", "--out", s(&out), "--count", "2", "--resolution", "16"]);
        cmd.env_remove("MIRRORNET_SEED");
        if let Some(v) = env {
            cmd.env("MIRRORNET_SEED", v);
        }
        if let Some(v) = flag {
            cmd.args(["--seed", v]);
        }
        ok(cmd.output().unwrap());
        RgbImage::read(&out.join("g0000_00000.ppm")).unwrap()
    };
    let env7 = gen("a", Some("7"), None);
    assert_eq!(env7, gen("b", None, Some("7")));
    assert_eq!(gen("c", Some("7"), Some("8")), gen("d", None, Some("8")));
    assert_ne!(env7, gen("e", None, None));
}

#[test]
fn errors_are_single_categorized_lines() {
    let run = Run::new();
    let bad = run.path("bad.toml");
    std::fs::write(&bad, "[optim]\nbase_lrr = 0.1\n").unwrap();
    let msg = fails_with(mirrornet(&["train", "--config", s(&bad)]), "config");
    assert!(msg.contains("base_lrr"), "{msg}");

    let ckpt = run.path("m.ckpt");
    run.train("m.ckpt", &[]);
    let empty = run.path("empty");
    std::fs::create_dir(&empty).unwrap();
    fails_with(mirrornet(&["eval", "--checkpoint", s(&ckpt), "--data", s(&empty)]), "data");

    let other = run.path("other.toml");
    std::fs::write(&other, TINY.replace("resolution = 16", "resolution = 32")).unwrap();
    let msg = fails_with(
        mirrornet(&["eval", "--checkpoint", s(&ckpt), "--config", s(&other), "--data", s(&empty)]),
        "config",
    );
    assert!(msg.contains("resolution"), "{msg}");

    let junk = run.path("junk.ppm");
    std::fs::write(&junk, b"P6\n2 2\n255\n\x00").unwrap();
    fails_with(mirrornet(&["infer", "--checkpoint", s(&ckpt), s(&junk)]), "data");

    let env = Command::new(env!("CARGO_BIN_EXE_mirrornet"))
        .args(["gen-data", "--out", s(&run.path("x"))])
        .env("MIRRORNET_SEED", "seven")
        .output()
        .unwrap();
    fails_with(env, "config");
}

#[test]
fn help_documents_the_configuration() {
    let help = ok(mirrornet(&["--help"]));
    for needle in ["CONFIGURATION", "[network]", "ablation", "1B4C", "[data.synth]", "MIRRORNET_SEED", "train", "gen-data"] {
        assert!(help.contains(needle), "missing {needle}");
    }
}
