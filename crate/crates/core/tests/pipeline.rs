use std::path::Path;

use cymba_core::config::{RunConfig, ScheduleConfig};
use cymba_core::pipeline::{
    self, load_scenes, stage_paths, train_diffusion_stage, train_ssen_stage, train_vae_stage, write_toy_dataset, Generator,
    LATENT_SCALE_KEY,
};
use cymba_core::nn::{load_checkpoint, ParamStore};
use cymba_core::voxel::{write_voxel_labels, ConditionPair};
use cymba_core::Error;

fn tiny(root: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        dims: [16, 16, 8],
        latent_channels: 2,
        vae_widths: [2, 3],
        ssen_mix_channels: 2,
        ssen_channels: 3,
        denoiser_widths: [4, 4, 4],
        blocks_per_stage: 1,
        d_state: 2,
        data_dir: root.join("data"),
        checkpoint_dir: root.join("ckpt"),
        out_dir: root.join("out"),
        schedule: ScheduleConfig {
            steps: 4,
            beta_start: 1e-3,
            beta_end: 0.2,
        },
        ..RunConfig::default()
    };
    for s in [&mut cfg.vae, &mut cfg.ssen, &mut cfg.diffusion] {
        s.epochs = 1;
        s.batch_size = 2;
    }
    cfg
}

#[test]
fn defaults_follow_the_toy_setup() {
    let cfg = RunConfig::parse("").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.dims, [64, 64, 8]);
    assert_eq!(cfg.num_classes, 8);
    assert_eq!(cfg.toy_scenes, 16);
    assert_eq!(cfg.schedule.steps, 100);
    assert_eq!(cfg.diffusion.lr, 1e-3);
    assert_eq!(cfg.diffusion.weight_decay, 1e-4);
    assert_eq!(cfg.latent_dims(), [16, 16, 2]);
    assert_eq!(cfg.denoiser_config().cond_channels, 12);
}

#[test]
fn partial_config_overrides_only_its_keys() {
    let cfg = RunConfig::parse("seed = 9\n[diffusion]\nepochs = 7\n").unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.diffusion.epochs, 7);
    assert_eq!(cfg.diffusion.lr, 1e-3);
    assert_eq!(cfg.vae, RunConfig::default().vae);
    let round = RunConfig::parse(&cfg.to_toml()).unwrap();
    assert_eq!(round, cfg);
}

#[test]
fn invalid_configs_are_rejected() {
    for text in [
        "dims = [64, 62, 8]",
        "dims = [0, 64, 8]",
        "num_classes = 1",
        "[schedule]\nsteps = 0",
        "[schedule]\nbeta_start = 0.5\nbeta_end = 0.1",
        "[vae]\nlr = 0.0",
        "[ssen]\nbatch_size = 0",
        "latent_channels = 0",
        "unknown = 1",
        "dims = \"big\"",
        "canny_low = 200.0\ncanny_high = 100.0",
        "data_dir = \"\"",
    ] {
        match RunConfig::parse(text) {
            Err(Error::Config(_)) => {}
            other => panic!("{text:?} gave {other:?}"),
        }
    }
}

#[test]
fn generator_names_each_missing_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(root.path());
    let names = |cfg: &RunConfig| match Generator::load(cfg) {
        Err(Error::MissingCheckpoint { name, .. }) => name,
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("loaded without checkpoints"),
    };
    write_toy_dataset(&cfg, 2, 0, &cfg.data_dir).unwrap();
    assert_eq!(names(&cfg), "vae");
    train_vae_stage(&cfg, false).unwrap();
    assert_eq!(names(&cfg), "ssen");
    match train_diffusion_stage(&cfg, false) {
        Err(Error::MissingCheckpoint { name, .. }) => assert_eq!(name, "ssen"),
        other => panic!("{other:?}"),
    }
    train_ssen_stage(&cfg, false).unwrap();
    assert_eq!(names(&cfg), "diffusion");
    train_diffusion_stage(&cfg, false).unwrap();
    let g = Generator::load(&cfg).unwrap();

    // The stored scale is the one the checkpoint carries.
    let mut store = ParamStore::new();
    let extra = load_checkpoint(stage_paths(&cfg, "diffusion").checkpoint, "diffusion", &mut store).unwrap();
    let (_, t) = extra.iter().find(|(k, _)| k == LATENT_SCALE_KEY).unwrap();
    assert_eq!(t.data()[0], g.latent_scale());

    // A blank condition still yields a valid grid.
    let blank = ConditionPair::blank(16, 16, cfg.num_classes);
    let grid = g.generate_scene(&blank, 0).unwrap();
    assert_eq!(grid.dims(), cfg.dims);
    assert!(grid.labels().iter().all(|&l| l < cfg.num_classes));
    assert_eq!(grid, g.generate_scene(&blank, 0).unwrap());
    assert!(g.generate_scene(&ConditionPair::blank(8, 8, cfg.num_classes), 0).is_err());
    assert!(g.generate_scene(&ConditionPair::blank(16, 16, 5), 0).is_err());
}

#[test]
fn scenes_load_in_name_order_with_their_conditions() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(root.path());
    assert!(load_scenes(&cfg, &cfg.data_dir).is_err());
    let files = write_toy_dataset(&cfg, 3, 1, &cfg.data_dir).unwrap();
    let scenes = load_scenes(&cfg, &cfg.data_dir).unwrap();
    assert_eq!(scenes.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["scene_0000", "scene_0001", "scene_0002"]);
    assert_eq!(files.len(), 3);
    // A label file without its condition files is an error, not a silent skip.
    write_voxel_labels(cfg.data_dir.join("extra.lbl"), &scenes[0].grid).unwrap();
    assert!(load_scenes(&cfg, &cfg.data_dir).is_err());
}

#[test]
fn evaluation_pairs_samples_with_their_sources() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(root.path());
    write_toy_dataset(&cfg, 3, 2, &cfg.data_dir).unwrap();
    train_vae_stage(&cfg, false).unwrap();
    let scenes = load_scenes(&cfg, &cfg.data_dir).unwrap();
    let gen = root.path().join("gen");
    std::fs::create_dir(&gen).unwrap();
    // Seed 1 of scene 0 is an exact copy, seed 2 of scene 1 is scene 2.
    write_voxel_labels(gen.join("scene_0000_seed1.lbl"), &scenes[0].grid).unwrap();
    write_voxel_labels(gen.join("scene_0001_seed2.lbl"), &scenes[2].grid).unwrap();
    write_voxel_labels(gen.join("unmatched.lbl"), &scenes[1].grid).unwrap();
    let rep = pipeline::evaluate(&cfg, &cfg.data_dir, &gen).unwrap();
    let mut acc = cymba_core::metrics::IouAccumulator::new(cfg.num_classes);
    acc.add(&scenes[0].grid, &scenes[0].grid).unwrap();
    acc.add(&scenes[2].grid, &scenes[1].grid).unwrap();
    let want = acc.report();
    assert_eq!(rep.iou, Some(want.iou));
    assert_eq!(rep.miou, Some(want.miou));
    assert_eq!(rep.per_class_iou, want.per_class);
    assert_eq!((rep.m, rep.m_gen, rep.d), (3, 3, 2));
    // Same multiset of scenes on both sides.
    assert!(rep.fid.abs() < 1e-8, "{}", rep.fid);
    assert!(rep.mmd.abs() < 1e-12);
}
