mod common;

use common::{out_dir, run, tiny_config, tiny_dataset};
use lsskd::checkpoint::Checkpoint;
use lsskd::config::ConfigFile;
use lsskd::run::{BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE, STORE_FILE};
use lsskd_core::data::{class_counts, stratified_subset};
use lsskd_core::network::StudentNetwork;
use lsskd_core::train::Sgd;

fn path(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let o = run(&["train", "--config", "/no/such/run.cfg"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("/no/such/run.cfg"), "{}", o.stderr);
    assert_eq!(run(&["train"]).code, 2, "clap usage error");
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "d", 2, "");
    let o = run(&["train", "--config", path(&cfg)]);
    assert_eq!(o.code, 3, "{}", o.stderr);
}

#[test]
fn train_writes_one_row_per_epoch_and_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path(), 100, 40);
    let cfg = tiny_config(dir.path(), "t", 2, "");
    let o = run(&["train", "--config", path(&cfg)]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let out = out_dir(dir.path(), "t");
    let csv = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,lr,train_total,ls_loss,is_loss,test_top1,test_top5,wall_s\n"));
    for f in [LAST_CHECKPOINT, BEST_CHECKPOINT, STORE_FILE] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(Checkpoint::read(&out.join(LAST_CHECKPOINT)).unwrap().epoch, 2);
}

#[test]
fn subset_fraction_logs_stratified_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 200, 20);
    let cfg = tiny_config(dir.path(), "s", 2, "seed = 4\n");
    let o = run(&["train", "--config", path(&cfg), "--subset-fraction", "0.25", "--stop-after", "1"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let c = ConfigFile::from_file(&cfg).unwrap();
    let ds = lsskd::dataset::load("synth10", &data, &c.normalization().unwrap()).unwrap();
    let counts = class_counts(&stratified_subset(&ds.train, 10, 0.25, 4).unwrap(), 10);
    assert_eq!(counts, vec![5; 10]);
    let expect = format!("per_class={}", counts.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    let line = o.stderr.lines().find(|l| l.starts_with("fewshot")).expect("few-shot log line");
    assert!(line.contains("retained=50") && line.ends_with(&expect), "{line}");
}

#[test]
fn eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path(), 100, 40);
    let cfg = tiny_config(dir.path(), "e", 1, "");
    assert_eq!(run(&["train", "--config", path(&cfg)]).code, 0);
    let out = out_dir(dir.path(), "e");
    let full = out.join(LAST_CHECKPOINT);
    let stripped = out.join("stripped.ckpt");

    let ex = run(&["export", "--checkpoint", path(&full), "--out", path(&stripped)]);
    assert_eq!(ex.code, 0, "{}", ex.stderr);
    let counts: Vec<usize> = ex
        .stdout
        .trim()
        .split(' ')
        .skip(1)
        .map(|kv| kv.split('=').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(counts[1] < counts[0], "{}", ex.stdout);

    let again = run(&["export", "--checkpoint", path(&stripped), "--out", path(&out.join("x.ckpt"))]);
    assert_eq!(again.code, 2);
    assert!(again.stderr.contains("already stripped"));

    let a = run(&["eval", "--checkpoint", path(&full), "--config", path(&cfg)]);
    let b = run(&["eval", "--checkpoint", path(&stripped), "--config", path(&cfg), "--seed", "11"]);
    assert_eq!((a.code, b.code), (0, 0), "{}{}", a.stderr, b.stderr);
    assert_eq!(a.stdout, b.stdout);
    let line = a.stdout.trim();
    assert!(line.starts_with("top1=") && line.contains(" top5="), "{line}");
    assert_eq!(line.split(['=', ' ']).nth(1).unwrap().split('.').nth(1).unwrap().len(), 2);
}

#[test]
fn eval_guards_digest_and_magic() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path(), 60, 20);
    let cfg = tiny_config(dir.path(), "g", 1, "");
    assert_eq!(run(&["train", "--config", path(&cfg)]).code, 0);
    let ckpt = out_dir(dir.path(), "g").join(LAST_CHECKPOINT);
    let wider = tiny_config(dir.path(), "w", 1, "").with_file_name("wider.cfg");
    std::fs::write(&wider, std::fs::read_to_string(&cfg).unwrap().replace("4,8", "4,16")).unwrap();
    let o = run(&["eval", "--checkpoint", path(&ckpt), "--config", path(&wider)]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("digest"), "{}", o.stderr);

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[..4].copy_from_slice(b"XXXX");
    let bad = ckpt.with_file_name("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    assert_eq!(run(&["eval", "--checkpoint", path(&bad), "--config", path(&cfg)]).code, 2);
    assert_eq!(run(&["export", "--checkpoint", path(&bad), "--out", path(&ckpt.with_file_name("o"))]).code, 2);
}

#[test]
fn untrained_network_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path(), 10, 500);
    let cfg_path = tiny_config(dir.path(), "c", 1, "");
    let cfg = ConfigFile::from_file(&cfg_path).unwrap();
    let ds = lsskd::dataset::load("synth10", &data, &cfg.normalization().unwrap()).unwrap();
    let mut total = 0.0;
    for seed in 0..3 {
        let mut net = StudentNetwork::<f32>::new(cfg.backbone(10, ds.meta.image_shape)).unwrap();
        net.init_parameters(seed);
        let ckpt = dir.path().join(format!("init{seed}.ckpt"));
        Checkpoint::from_training(cfg.digest(), 0, &net, &Sgd::new(net.params())).write(&ckpt).unwrap();
        let o = run(&["eval", "--checkpoint", path(&ckpt), "--config", path(&cfg_path)]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        total += o.stdout.trim().split(['=', ' ']).nth(1).unwrap().parse::<f64>().unwrap();
    }
    let mean = total / 3.0;
    assert!((mean - 10.0).abs() <= 5.0, "mean top1 {mean}");
}

#[test]
fn gradcheck_exit_codes() {
    let ok = run(&["gradcheck"]);
    assert_eq!(ok.code, 0, "{}", ok.stdout);
    let terms: Vec<&str> = ok.stdout.lines().map(|l| l.split(' ').next().unwrap()).collect();
    assert_eq!(terms, ["ce_resp", "ce_hier", "div", "feat", "total"]);
    let bad = run(&["gradcheck", "--fault-conv-scale", "1.5"]);
    assert_eq!(bad.code, 5);
    assert!(bad.stdout.contains("FAIL"));
}

#[test]
fn resume_rejects_mismatched_store() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path(), 60, 20);
    let cfg = tiny_config(dir.path(), "r", 3, "");
    assert_eq!(run(&["train", "--config", path(&cfg), "--stop-after", "2", "--no-wall-clock"]).code, 0);
    let out = out_dir(dir.path(), "r");
    // pair the epoch-2 checkpoint with a store from a different epoch
    let epoch1 = tiny_config(dir.path(), "r1", 3, "");
    assert_eq!(run(&["train", "--config", path(&epoch1), "--stop-after", "1"]).code, 0);
    std::fs::copy(out_dir(dir.path(), "r1").join(STORE_FILE), out.join(STORE_FILE)).unwrap();
    let o = run(&["train", "--config", path(&cfg), "--resume", path(&out.join(LAST_CHECKPOINT))]);
    assert_eq!(o.code, 2, "{}", o.stderr);
    assert!(o.stderr.contains("epoch"), "{}", o.stderr);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path(), 60, 20);
    let cfg = tiny_config(dir.path(), "a", 1, "seed = 1\n");
    let other = tiny_config(dir.path(), "b", 1, "seed = 2\n");
    assert_eq!(run(&["train", "--config", path(&cfg), "--no-wall-clock"]).code, 0);
    assert_eq!(run(&["train", "--config", path(&other), "--seed", "1", "--no-wall-clock"]).code, 0);
    let read = |n: &str| std::fs::read(out_dir(dir.path(), n).join(METRICS_FILE)).unwrap();
    assert_eq!(read("a"), read("b"));
}
