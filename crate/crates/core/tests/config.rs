use critlab_core::config::{Arch, DatasetKind, ExperimentConfig};
use critlab_core::deficits::DeficitKind;
use critlab_core::Error;

#[test]
fn toml_round_trip_preserves_config_and_hash() {
    let mut cfg = ExperimentConfig::default();
    cfg.sweep.deficits = vec![DeficitKind::Blur, DeficitKind::NoiseReplace];
    cfg.timeline.grad_batches = Some((4, 32));
    cfg.model.arch = Arch::Allcnn;
    let text = cfg.to_toml().unwrap();
    let back = ExperimentConfig::from_toml_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_eq!(cfg.hash().len(), 64);
}

#[test]
fn partial_toml_fills_defaults() {
    let cfg = ExperimentConfig::from_toml_str(
        "[data]\ndataset = \"synthetic\"\n[train]\nepochs = 3\nlr0 = 0.1\n",
    )
    .unwrap();
    assert_eq!(cfg.data.dataset, DatasetKind::Synthetic);
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.train.batch_size, 128);
    assert_eq!(cfg.sweep, ExperimentConfig::default().sweep);
    // keys absent from a given table keep the desk values, not the
    // training module's own defaults
    let desk = ExperimentConfig::default();
    assert_eq!(cfg.train.lr_decay, desk.train.lr_decay);
    assert_eq!(cfg.train.weight_decay, desk.train.weight_decay);
    assert_eq!(cfg.train.augment, desk.train.augment);

    let cfg = ExperimentConfig::from_toml_str(
        "[timeline.fisher]
n_y = 4
",
    )
    .unwrap();
    assert_eq!(cfg.timeline.fisher.n_y, 4);
    assert_eq!(cfg.timeline.fisher.n_x, desk.timeline.fisher.n_x);
    assert_eq!(cfg.timeline.epochs, desk.timeline.epochs);
}

#[test]
fn readme_config_block_is_the_default() {
    let readme = include_str!("../../../README.md");
    let start = readme.find("```toml\n").unwrap() + "```toml\n".len();
    let end = start + readme[start..].find("```").unwrap();
    let cfg = ExperimentConfig::from_toml_str(&readme[start..end]).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn unknown_keys_are_rejected() {
    for text in [
        "bogus = 1\n",
        "[train]\nlearning_rate = 0.1\n",
        "[sweep]\nwindows = 3\n",
    ] {
        assert!(
            matches!(ExperimentConfig::from_toml_str(text), Err(Error::Config(_))),
            "{text}"
        );
    }
}

#[test]
fn invalid_values_are_rejected() {
    assert!(ExperimentConfig::from_toml_str("[train]\nlr0 = -1.0\n").is_err());
    assert!(ExperimentConfig::from_toml_str("[sweep]\nwindow = 100\ntotal_epochs = 10\n").is_err());
    assert!(ExperimentConfig::from_toml_str("[timeline.fisher]\nn_x = 0\n").is_err());
}

#[test]
fn hash_changes_with_any_field() {
    let a = ExperimentConfig::default();
    let mut b = a.clone();
    b.train.seed = 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn load_rebases_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(
        &path,
        "[data]\ndir = \"mnist\"\n[fit]\ninput = \"/abs/curve.csv\"\n",
    )
    .unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.data.dir, dir.path().join("mnist"));
    assert_eq!(
        cfg.fit.input.unwrap(),
        std::path::PathBuf::from("/abs/curve.csv")
    );
}

#[test]
fn synthetic_load_is_deterministic_and_disjoint() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.dataset = DatasetKind::Synthetic;
    cfg.data.synthetic_train = 120;
    cfg.data.synthetic_test = 40;
    let (train, test) = cfg.data.load(3).unwrap();
    assert_eq!(train.len(), 120);
    assert_eq!(test.len(), 40);
    assert_eq!(train.image_shape(), [1, 8, 8]);
    let (again, _) = cfg.data.load(3).unwrap();
    assert_eq!(train.digest(), again.digest());
    assert_ne!(train.image(0), test.image(0));

    cfg.data.train_per_class = Some(10);
    let (sub, _) = cfg.data.load(3).unwrap();
    assert_eq!(sub.len(), 40);
    for c in 0..4 {
        assert_eq!(sub.labels.iter().filter(|&&l| l == c).count(), 10);
    }
}
