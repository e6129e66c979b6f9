use lsskd::config::{ConfigFile, KEYS};
use proptest::prelude::*;

#[test]
fn defaults_follow_the_long_schedule() {
    let c = ConfigFile::parse("").unwrap();
    assert_eq!(c, ConfigFile::default());
    assert_eq!(c.train_epochs, 240);
    assert_eq!(c.train_milestones, vec![150, 210]);
    assert_eq!((c.distill_alpha, c.distill_beta, c.distill_gamma, c.distill_tau_kd), (0.8, 0.1, 0.1, 3.0));
}

#[test]
fn parses_comments_and_lists() {
    let c = ConfigFile::parse(
        "# desk run\n  dataset.name = mnist \nmodel.stages=2\nmodel.channels = 8, 16 # widths\ntrain.epochs = 30\ntrain.milestones = 20,26\ndistill.alpha_warmup = true\nseed = 7\n",
    )
    .unwrap();
    assert_eq!(c.dataset_name, "mnist");
    assert_eq!(c.dataset_mean, vec![0.1307]);
    assert_eq!(c.model_channels, vec![8, 16]);
    assert_eq!(c.train_milestones, vec![20, 26]);
    assert!(c.distill_alpha_warmup);
    assert_eq!(c.seed, 7);
}

#[test]
fn rejects_unknown_duplicate_and_ill_typed_keys() {
    assert!(ConfigFile::parse("train.lr = 0.1").unwrap_err().contains("unknown key"));
    assert!(ConfigFile::parse("seed = 1\nseed = 2").unwrap_err().contains("duplicate"));
    assert!(ConfigFile::parse("train.epochs = many").is_err());
    assert!(ConfigFile::parse("distill.alpha_warmup = yes").is_err());
    assert!(ConfigFile::parse("just a line").is_err());
    assert!(ConfigFile::parse("model.stages = 2").unwrap_err().contains("channel"));
    assert!(ConfigFile::parse("train.epochs = 100").is_err(), "milestones beyond the schedule");
    assert!(ConfigFile::parse("dataset.name = other").unwrap_err().contains("dataset.mean"));
    assert!(ConfigFile::parse("dataset.name = other\ndataset.mean = 0.5\ndataset.std = 0.2").is_ok());
    assert!(ConfigFile::parse("dataset.std = 0,0,0").is_err());
}

#[test]
fn serialization_lists_every_key_once() {
    let text = ConfigFile::default().serialize();
    let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
    assert_eq!(keys, KEYS);
}

#[test]
fn digest_tracks_model_identity_only() {
    let base = ConfigFile::default();
    let retrained = ConfigFile { seed: 9, train_lr0: 0.1, out_dir: "elsewhere".into(), ..base.clone() };
    assert_eq!(base.digest(), retrained.digest());
    let wider = ConfigFile { model_channels: vec![16, 32, 128], ..base.clone() };
    assert_ne!(base.digest(), wider.digest());
}

#[test]
fn missing_file_names_the_path() {
    let e = ConfigFile::from_file(std::path::Path::new("/nonexistent/desk.cfg")).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("/nonexistent/desk.cfg"));
}

proptest! {
    #[test]
    fn round_trip(
        lr in 1e-4f64..1.0,
        alpha in 0.0f64..=1.0,
        gamma in 0.0f64..10.0,
        tau in 0.1f64..20.0,
        epochs in 3u32..400,
        seed in any::<u64>(),
        widths in proptest::collection::vec(1usize..256, 2..5),
        warm in any::<bool>(),
    ) {
        let c = ConfigFile {
            train_lr0: lr,
            distill_alpha: alpha,
            distill_gamma: gamma,
            distill_tau_kd: tau,
            train_epochs: epochs,
            train_milestones: vec![1, epochs - 1],
            seed,
            model_stages: widths.len(),
            model_channels: widths,
            distill_alpha_warmup: warm,
            ..ConfigFile::default()
        };
        let once = ConfigFile::parse(&c.serialize()).unwrap();
        prop_assert_eq!(&once, &c);
        prop_assert_eq!(ConfigFile::parse(&once.serialize()).unwrap(), once);
    }
}
