use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cymba_core::config::RunConfig;
use cymba_core::pipeline::{self, condition_paths, label_files};
use cymba_core::train::read_log;
use cymba_core::voxel::{read_voxel_labels, synthetic_condition};

/// A configuration small enough for a full pipeline run in seconds.
fn tiny_config(root: &Path) -> (PathBuf, RunConfig) {
    let cfg = RunConfig {
        dims: [16, 16, 8],
        latent_channels: 2,
        vae_widths: [2, 3],
        ssen_mix_channels: 2,
        ssen_channels: 3,
        denoiser_widths: [4, 4, 4],
        blocks_per_stage: 1,
        d_state: 2,
        toy_scenes: 3,
        data_dir: root.join("data"),
        checkpoint_dir: root.join("ckpt"),
        out_dir: root.join("out"),
        schedule: cymba_core::config::ScheduleConfig {
            steps: 5,
            beta_start: 1e-3,
            beta_end: 0.2,
        },
        ..RunConfig::default()
    };
    let mut cfg = cfg;
    for s in [&mut cfg.vae, &mut cfg.ssen, &mut cfg.diffusion] {
        s.epochs = 2;
        s.batch_size = 2;
    }
    let path = root.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    (path, cfg)
}

fn cymba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cymba")).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_toy_is_seeded() {
    let root = tempfile::tempdir().unwrap();
    let (conf, _) = tiny_config(root.path());
    let (a, b, c) = (root.path().join("a"), root.path().join("b"), root.path().join("c"));
    ok(&cymba(&["gen-toy", "--config", s(&conf), "--seed", "4", "--out", s(&a)]));
    ok(&cymba(&["gen-toy", "--config", s(&conf), "--seed", "4", "--out", s(&b)]));
    ok(&cymba(&["gen-toy", "--config", s(&conf), "--seed", "5", "--out", s(&c), "--count", "2"]));
    let (da, db) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(da.len(), 9);
    assert_eq!(da, db);
    let dc = dir_bytes(&c);
    assert_eq!(dc.len(), 6);
    assert_ne!(da[0], dc[0]);
}

#[test]
fn make_sketch_matches_the_library_and_reports_bad_inputs() {
    let root = tempfile::tempdir().unwrap();
    let (conf, cfg) = tiny_config(root.path());
    let data = root.path().join("src");
    let labels = pipeline::write_toy_dataset(&cfg, 2, 0, &data).unwrap();
    let out = root.path().join("sk");
    let missing = root.path().join("missing.lbl");
    let res = cymba(&["make-sketch", "--config", s(&conf), "--out", s(&out), s(&labels[0]), s(&missing), s(&labels[1])]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("1 of 3 inputs failed") && err.contains("missing.lbl"), "{err}");
    for l in &labels {
        let stem = l.file_stem().unwrap().to_str().unwrap();
        let grid = read_voxel_labels(l, cfg.dims, cfg.num_classes).unwrap();
        let want = synthetic_condition(&grid, cfg.canny()).unwrap();
        let (sk, psa) = condition_paths(&out, stem);
        let got = cymba_core::voxel::read_condition_pair(&sk, &psa, cfg.num_classes).unwrap();
        assert_eq!(got, want);
        // gen-toy already wrote the same condition next to the labels.
        let (sk0, psa0) = condition_paths(&data, stem);
        assert_eq!(std::fs::read(sk).unwrap(), std::fs::read(sk0).unwrap());
        assert_eq!(std::fs::read(psa).unwrap(), std::fs::read(psa0).unwrap());
    }
}

#[test]
fn invalid_configuration_exits_1_without_writing() {
    let root = tempfile::tempdir().unwrap();
    let (_, mut cfg) = tiny_config(root.path());
    cfg.dims = [18, 16, 8];
    let conf = root.path().join("bad.toml");
    std::fs::write(&conf, cfg.to_toml()).unwrap();
    let out = root.path().join("never");
    let res = cymba(&["gen-toy", "--config", s(&conf), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("multiples of 4"));
    assert!(!out.exists());

    std::fs::write(&conf, "dims = [16, 16, 8]\nnot_a_key = 3\n").unwrap();
    assert_eq!(cymba(&["gen-toy", "--config", s(&conf), "--out", s(&out)]).status.code(), Some(1));
    assert_eq!(cymba(&["gen-toy", "--config", s(&root.path().join("absent.toml"))]).status.code(), Some(1));
    assert_eq!(cymba(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(cymba(&["gen-toy", "--epochs", "3", "--out", s(&out)]).status.code(), Some(1));
    assert!(!out.exists());
    assert_eq!(cymba(&["--help"]).status.code(), Some(0));
}

#[test]
fn diffusion_before_its_prerequisites_names_the_stage() {
    let root = tempfile::tempdir().unwrap();
    let (conf, _) = tiny_config(root.path());
    ok(&cymba(&["gen-toy", "--config", s(&conf)]));
    let res = cymba(&["train-diffusion", "--config", s(&conf)]);
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("missing checkpoint vae") && err.contains("train-vae, train-ssen, train-diffusion"), "{err}");
}

#[test]
fn full_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let (conf, cfg) = tiny_config(root.path());
    let c = s(&conf);
    ok(&cymba(&["gen-toy", "--config", c]));
    ok(&cymba(&["train-vae", "--config", c]));
    ok(&cymba(&["train-vae", "--config", c, "--epochs", "3", "--resume"]));
    let log = read_log(cfg.checkpoint_dir.join("vae_loss.csv")).unwrap();
    assert_eq!(log.iter().map(|r| r.0).collect::<Vec<_>>(), [1, 2, 3]);

    // The sampler refuses to run without every checkpoint.
    let (sk, psa) = condition_paths(&cfg.data_dir, "scene_0000");
    let res = cymba(&["sample", "--config", c, s(&sk), s(&psa)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("missing checkpoint ssen"));

    ok(&cymba(&["train-ssen", "--config", c]));
    ok(&cymba(&["train-diffusion", "--config", c]));
    for stage in ["ssen", "diffusion"] {
        assert_eq!(read_log(cfg.checkpoint_dir.join(format!("{stage}_loss.csv"))).unwrap().len(), 2);
    }

    let (sk1, psa1) = condition_paths(&cfg.data_dir, "scene_0001");
    let conds = [s(&sk), s(&psa), s(&sk1), s(&psa1)];
    let out_a = root.path().join("gen_a");
    let out_b = root.path().join("gen_b");
    for out in [&out_a, &out_b] {
        let mut args = vec!["sample", "--config", c, "--seeds", "3,8", "--out", s(out)];
        args.extend(conds);
        ok(&cymba(&args));
    }
    // Manifests name their own output paths, so only the volumes are compared.
    let volumes = |d: &Path| -> Vec<_> { dir_bytes(d).into_iter().filter(|(n, _)| n.ends_with(".lbl")).collect() };
    assert_eq!(volumes(&out_a), volumes(&out_b));
    assert_eq!(label_files(&out_a).unwrap().len(), 4);
    assert!(out_a.join("scene_0001_seed8.lbl").exists());
    let manifest = std::fs::read_to_string(out_a.join("manifest.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1]["seed"], 8);
    let hash = lines[0]["checkpoints"]["diffusion"].as_str().unwrap();
    assert_eq!(hash, pipeline::sha256_file(&cfg.checkpoint_dir.join("diffusion.ckpt")).unwrap());
    assert_eq!(hash.len(), 64);

    // Evaluation: a set against itself, then generated against real.
    let real = root.path().join("real");
    std::fs::create_dir(&real).unwrap();
    for l in label_files(&cfg.data_dir).unwrap() {
        std::fs::copy(&l, real.join(l.file_name().unwrap())).unwrap();
    }
    let report_path = root.path().join("report.json");
    let res = cymba(&["evaluate", "--config", c, "--out", s(&report_path), s(&real), s(&real)]);
    ok(&res);
    let rep: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    for k in ["fid", "mmd", "iou", "miou", "per_class_iou", "m", "d", "bandwidth"] {
        assert!(rep.get(k).is_some(), "missing {k}");
    }
    assert!(rep["fid"].as_f64().unwrap().abs() < 1e-8);
    assert!(rep["mmd"].as_f64().unwrap().abs() < 1e-12);
    assert_eq!(rep["iou"].as_f64(), Some(1.0));
    assert_eq!(rep["m"], 3);
    assert_eq!(rep["d"], 2);
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(saved, rep);

    let res = cymba(&["evaluate", "--config", c, s(&real), s(&out_a)]);
    ok(&res);
    let rep: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    let lib = pipeline::evaluate(&cfg, &real, &out_a).unwrap();
    assert_eq!(rep, serde_json::to_value(&lib).unwrap());
    assert_eq!(rep["m_gen"], 4);

    let empty = root.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(cymba(&["evaluate", "--config", c, s(&real), s(&empty)]).status.code(), Some(2));
    assert_eq!(cymba(&["evaluate", "--config", c, s(&real), s(&root.path().join("nope"))]).status.code(), Some(1));
}
