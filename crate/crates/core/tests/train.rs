use cymba_core::nn::{ParamStore, Ssen, SsenConfig};
use cymba_core::toy::{generate_dataset, ToyConfig};
use cymba_core::train::{read_log, train_ssen, train_vae, StagePaths, TrainOptions};
use cymba_core::vae::{Vae, VaeConfig, VaeLossWeights};
use cymba_core::voxel::{synthetic_condition, CannyThresholds, VoxelGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scenes(n: usize) -> Vec<VoxelGrid> {
    generate_dataset(&ToyConfig::new([16, 16, 8], 8), n, 5)
        .unwrap()
        .into_iter()
        .map(|s| s.grid)
        .collect()
}

fn small_vae(store: &mut ParamStore) -> Vae {
    let cfg = VaeConfig {
        num_classes: 8,
        latent_channels: 2,
        widths: [3, 4],
    };
    Vae::new(store, "vae", cfg, &mut ChaCha8Rng::seed_from_u64(2))
}

#[test]
fn log_has_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let paths = StagePaths::in_dir(dir.path(), "vae");
    let data = scenes(3);
    let mut store = ParamStore::new();
    let vae = small_vae(&mut store);
    let opts = TrainOptions::new(3, 2, 5e-3, 1);
    let rows = train_vae(&vae, &mut store, &data, VaeLossWeights::default(), &opts, &paths, false).unwrap();
    assert_eq!(rows.len(), 3);
    let log = read_log(&paths.log).unwrap();
    assert_eq!(log.len(), 3);
    assert_eq!(log.iter().map(|r| r.0).collect::<Vec<_>>(), [1, 2, 3]);
    for ((_, logged), row) in log.iter().zip(&rows) {
        assert_eq!(logged.len(), 4);
        for (a, b) in logged.iter().zip(row) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
    let header = std::fs::read_to_string(&paths.log).unwrap();
    assert!(header.starts_with("epoch,ce,lovasz,kl,total\n"));
}

#[test]
fn resumed_vae_run_matches_uninterrupted_run() {
    let data = scenes(3);
    let full_dir = tempfile::tempdir().unwrap();
    let mut full_store = ParamStore::new();
    let vae = small_vae(&mut full_store);
    let full = train_vae(
        &vae,
        &mut full_store,
        &data,
        VaeLossWeights::default(),
        &TrainOptions::new(4, 2, 5e-3, 9),
        &StagePaths::in_dir(full_dir.path(), "vae"),
        false,
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let paths = StagePaths::in_dir(dir.path(), "vae");
    let mut opts = TrainOptions::new(4, 2, 5e-3, 9);
    opts.stop_after = Some(2);
    let mut store = ParamStore::new();
    let vae = small_vae(&mut store);
    let head = train_vae(&vae, &mut store, &data, VaeLossWeights::default(), &opts, &paths, false).unwrap();
    assert_eq!(head, full[..2].to_vec());

    // Fresh process state: parameters are rebuilt from a different seed and
    // must be replaced by the checkpoint.
    opts.stop_after = None;
    let mut resumed_store = ParamStore::new();
    let vae = Vae::new(
        &mut resumed_store,
        "vae",
        VaeConfig {
            num_classes: 8,
            latent_channels: 2,
            widths: [3, 4],
        },
        &mut ChaCha8Rng::seed_from_u64(77),
    );
    let tail = train_vae(&vae, &mut resumed_store, &data, VaeLossWeights::default(), &opts, &paths, true).unwrap();
    assert_eq!(tail, full[2..].to_vec());
    for (a, b) in resumed_store.params().iter().zip(full_store.params()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let log = read_log(&paths.log).unwrap();
    assert_eq!(log.len(), 4);
}

#[test]
fn resume_truncates_rows_past_the_checkpoint() {
    let data = scenes(2);
    let dir = tempfile::tempdir().unwrap();
    let paths = StagePaths::in_dir(dir.path(), "vae");
    let mut opts = TrainOptions::new(3, 2, 5e-3, 4);
    opts.stop_after = Some(1);
    let mut store = ParamStore::new();
    let vae = small_vae(&mut store);
    train_vae(&vae, &mut store, &data, VaeLossWeights::default(), &opts, &paths, false).unwrap();
    // A row written after the last checkpoint, as a crash mid-write would leave.
    let mut text = std::fs::read_to_string(&paths.log).unwrap();
    text.push_str("2,1,1,1,1\n");
    std::fs::write(&paths.log, text).unwrap();
    opts.stop_after = None;
    train_vae(&vae, &mut store, &data, VaeLossWeights::default(), &opts, &paths, true).unwrap();
    let log = read_log(&paths.log).unwrap();
    assert_eq!(log.iter().map(|r| r.0).collect::<Vec<_>>(), [1, 2, 3]);
    assert_ne!(log[1].1, vec![1.0; 4]);
}

#[test]
fn ssen_training_lowers_its_loss() {
    let data = scenes(2);
    let conds: Vec<_> = data
        .iter()
        .map(|g| synthetic_condition(g, CannyThresholds::default()).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let mut store = ParamStore::new();
    let cfg = SsenConfig {
        num_classes: 8,
        mix_channels: 4,
        channels: 8,
    };
    let ssen = Ssen::new(&mut store, "ssen", cfg, &mut ChaCha8Rng::seed_from_u64(3));
    let opts = TrainOptions::new(12, 2, 1e-2, 0);
    let rows = train_ssen(&ssen, &mut store, &data, &conds, &opts, &StagePaths::in_dir(dir.path(), "ssen"), false).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows[11][0] < rows[0][0], "{rows:?}");
}

#[test]
fn bad_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let paths = StagePaths::in_dir(dir.path(), "vae");
    let mut store = ParamStore::new();
    let vae = small_vae(&mut store);
    let w = VaeLossWeights::default();
    assert!(train_vae(&vae, &mut store, &[], w, &TrainOptions::new(1, 1, 1e-3, 0), &paths, false).is_err());
    let data = scenes(1);
    assert!(train_vae(&vae, &mut store, &data, w, &TrainOptions::new(1, 0, 1e-3, 0), &paths, false).is_err());
    assert!(train_vae(&vae, &mut store, &data, w, &TrainOptions::new(1, 1, 0.0, 0), &paths, false).is_err());
    assert!(!paths.log.exists());
}
