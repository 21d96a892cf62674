use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use guidance_lab::denoiser::checkpoint;
use guidance_lab::denoiser::{TinyConfig, TinyDenoiser, Trainable};

fn glab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glab"))
        .args(args)
        .env("GLAB_THREADS", "2")
        .output()
        .expect("glab runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small tiny-model checkpoint: 30 steps on 32 images, T = 20.
fn quick_train(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join("train");
    let o = glab(&[
        "train", "--dataset", "procedural", "--steps", "30", "--seed", seed, "--out", s(&out),
        "--set", "dataset_size=32", "--set", "timesteps=20", "--set", "batch_size=4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn read_all(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn missing_dataset_and_unknown_keys_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = glab(&["train", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset"));

    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "dataset = procedural\nlearning_rat = 0.1\n").unwrap();
    let o = glab(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));

    let o = glab(&["sample", "--oracle", "--guidance", "shiny", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&glab(&["sample", "--out", s(tmp.path())])), 2);
    assert_eq!(code(&glab(&["frobnicate"])), 2);
}

#[test]
fn help_lists_defaults() {
    let o = glab(&["sample", "--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for k in guidance_lab::cli::REGISTRY {
        assert!(text.contains(k.name), "{} missing from help", k.name);
    }
}

#[test]
fn zero_step_training_saves_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t0");
    let o = glab(&["train", "--dataset", "procedural", "--steps", "0", "--seed", "5", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let saved = checkpoint::load(&out.join("checkpoint")).unwrap();
    let init = TinyDenoiser::new(
        TinyConfig {
            num_classes: 2,
            ..TinyConfig::default()
        },
        5,
    )
    .unwrap();
    for (a, b) in saved.params().iter().zip(init.params().iter()) {
        assert_eq!(a.name, b.name);
        let rounded: Vec<f64> = b.data.iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(a.data, rounded, "{}", a.name);
    }
}

#[test]
fn divergence_exits_3_with_step() {
    let tmp = tempfile::tempdir().unwrap();
    let o = glab(&[
        "train", "--dataset", "mixture2d", "--steps", "200", "--out", s(tmp.path()),
        "--set", "learning_rate=1e9",
    ]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}

#[test]
fn train_and_sample_are_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ta = quick_train(a.path(), "3");
    let tb = quick_train(b.path(), "3");
    let (files_a, files_b) = (read_all(&ta), read_all(&tb));
    assert_eq!(files_a.len(), files_b.len());
    for (x, y) in files_a.iter().zip(&files_b) {
        if !x.0.ends_with("config.snapshot") {
            assert_eq!(x, y, "{}", x.0.display());
        }
    }

    let run = |root: &Path, ckpt: &Path| {
        let out = root.join("sag");
        let o = glab(&[
            "sample", "--checkpoint", s(&ckpt.join("checkpoint")), "--guidance", "sag", "--n", "4",
            "--seed", "9", "--compare-baseline", "--out", s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (sa, sb) = (run(a.path(), &ta), run(b.path(), &tb));
    let fa = read_all(&sa);
    let names: Vec<String> = fa.iter().map(|f| f.0.display().to_string()).collect();
    for want in ["config.snapshot", "samples/samples.png", "samples/baseline.png", "samples/paired.png", "tensors/samples.glab", "metrics/diagnostics.csv", "metrics/summary.csv"] {
        assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
    }
    let fb = read_all(&sb);
    for (x, y) in fa.iter().zip(&fb) {
        if x.0.ends_with("config.snapshot") {
            continue; // records its own paths
        }
        assert_eq!(x, y, "{}", x.0.display());
    }
}

#[test]
fn sag_at_scale_zero_matches_unguided_pngs() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = quick_train(tmp.path(), "1").join("checkpoint");
    let png = |guidance: &str, scale: &str, name: &str| {
        let out = tmp.path().join(name);
        let o = glab(&[
            "sample", "--checkpoint", s(&ckpt), "--guidance", guidance, "--scale", scale, "--n", "3", "--seed", "4",
            "--out", s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out.join("samples/samples.png")).unwrap()
    };
    assert_eq!(png("sag", "0", "a"), png("none", "0.1", "b"));
}

#[test]
fn cfg_needs_a_class_conditional_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("uncond");
    let o = glab(&[
        "train", "--dataset", "procedural", "--steps", "0", "--out", s(&out), "--set", "num_classes=0",
        "--set", "timesteps=10",
    ]);
    assert_eq!(code(&o), 0);
    let o = glab(&[
        "sample", "--checkpoint", s(&out.join("checkpoint")), "--guidance", "cfg", "--class", "0", "--n", "1",
        "--out", s(&tmp.path().join("s")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("class"));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn ablate_rows_and_collapse() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = quick_train(tmp.path(), "2").join("checkpoint");
    let ablate = |sweep: &str, name: &str| {
        let out = tmp.path().join(name);
        let o = glab(&[
            "ablate", "--checkpoint", s(&ckpt), "--sweep", sweep, "--n", "3", "--seed", "1", "--out", s(&out),
        ]);
        (code(&o), out, String::from_utf8_lossy(&o.stderr).into_owned())
    };
    let (c, out, err) = ablate("scale=-0.1,0,0.1,0.3", "scale");
    assert_eq!(c, 0, "{err}");
    let rows = csv_rows(&out.join("metrics/ablation.csv"));
    assert_eq!(rows.len(), 4);
    let base: Vec<String> = csv_rows(&out.join("metrics/baseline.csv")).into_iter().map(|r| r[1].clone()).collect();
    // base rows: n, energy_distance, frechet, ...
    assert_eq!(rows[1][2], base[1]);
    assert_eq!(rows[1][3], base[2]);
    assert_ne!(rows[3][2], base[1]);

    let (c, out, err) = ablate("sigma=0,1,3", "sigma");
    assert_eq!(c, 0, "{err}");
    let rows = csv_rows(&out.join("metrics/ablation.csv"));
    assert_eq!((rows[0][2].as_str(), rows[0][3].as_str()), (base[1].as_str(), base[2].as_str()));

    let (c, out, err) = ablate("strategy=all", "strategy");
    assert_eq!(c, 0, "{err}");
    let names: Vec<String> = csv_rows(&out.join("metrics/ablation.csv")).into_iter().map(|r| r[1].clone()).collect();
    assert_eq!(names, ["global", "random", "square", "high_frequency", "self_attention"]);

    assert_eq!(ablate("scale=0.1;sigma=1", "multi").0, 2);
}

#[test]
fn analyze_writes_profiles_iou_and_heatmaps() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = quick_train(tmp.path(), "6").join("checkpoint");
    let run = tmp.path().join("run");
    let o = glab(&["sample", "--checkpoint", s(&ckpt), "--n", "4", "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = tmp.path().join("analysis");
    let o = glab(&["analyze", "--run", s(&run), "--out", s(&out), "--set", "probe_images=20"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics/frequency_psi1.0.csv", "metrics/frequency_psi1.3.csv", "metrics/frequency_summary.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let iou = fs::read_to_string(out.join("metrics/iou.csv")).unwrap();
    assert!(iou.starts_with("image,psi,iou,random_iou,pct_diff,both_empty\n"));
    assert_eq!(iou.lines().count(), 1 + 2 * 20);
    // one layer, four heads plus their average
    assert_eq!(fs::read_dir(out.join("figures")).unwrap().count(), 5);

    let oracle = tmp.path().join("oracle");
    let o = glab(&["sample", "--oracle", "--n", "4", "--set", "reference_size=50", "--out", s(&oracle)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = glab(&["analyze", "--run", s(&oracle), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--checkpoint"));
}
