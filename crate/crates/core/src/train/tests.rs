use super::*;
use crate::distill::{loss_ce_hier, loss_ce_resp, StoreLayout};
use crate::network::{BackboneConfig, ParamKind};
use rand::Rng;
use rand_distr::StandardNormal;

fn toy_net(seed: u64) -> StudentNetwork<f64> {
    let cfg = BackboneConfig { input_shape: [1, 8, 8], classes: 3, transforms: 4, channels: vec![4, 8], blocks: 1 };
    let mut n = StudentNetwork::new(cfg).unwrap();
    n.init_parameters(seed);
    n
}

fn toy_samples(count: usize, seed: u64) -> Vec<ImageSample> {
    let mut r = rng::stream(seed);
    (0..count)
        .map(|i| ImageSample {
            pixels: (0..64).map(|_| r.sample::<f32, _>(StandardNormal)).collect(),
            shape: [1, 8, 8],
            label: i % 3,
            sample_id: i as u32,
        })
        .collect()
}

fn layout(n: &StudentNetwork<f64>) -> StoreLayout {
    let c = n.config();
    StoreLayout { classes: c.classes, transforms: c.transforms, stages: c.stages() }
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(1, &cfg), 0.05);
    assert_eq!(lr_at(150, &cfg), 0.05);
    assert_eq!(lr_at(151, &cfg), 0.005);
    assert_eq!(lr_at(211, &cfg), 0.0005);
    let desk = TrainConfig::desk();
    assert_eq!((lr_at(20, &desk), lr_at(21, &desk), lr_at(27, &desk)), (0.05, 0.005, 0.0005));
    let odd = TrainConfig { decay: 0.3, ..TrainConfig::default() };
    assert!((lr_at(211, &odd) - 0.05 * 0.09).abs() < 1e-15);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig::desk().validate().is_ok());
    assert!(TrainConfig { milestones: vec![20, 20], ..TrainConfig::desk() }.validate().is_err());
    assert!(TrainConfig { milestones: vec![30], ..TrainConfig::desk() }.validate().is_err());
    assert!(TrainConfig { fewshot_fraction: 0.0, ..TrainConfig::desk() }.validate().is_err());
}

#[test]
fn sgd_examples() {
    let (mut w, mut v) = ([1.0f64], [0.0]);
    sgd_step(&mut w, &[0.5], &mut v, 0.1, 0.9, 0.0);
    assert_eq!((v[0], w[0]), (0.5, 0.95));
    sgd_step(&mut w, &[0.5], &mut v, 0.1, 0.9, 0.0);
    assert!((v[0] - 0.95).abs() < 1e-15 && (w[0] - 0.855).abs() < 1e-15);
    let (mut w, mut v) = ([2.0f64, -1.0], [0.0; 2]);
    for _ in 0..3 {
        sgd_step(&mut w, &[0.25, 1.0], &mut v, 0.5, 0.0, 0.0);
    }
    assert_eq!(w, [2.0 - 3.0 * 0.125, -1.0 - 3.0 * 0.5]);
}

#[test]
fn sgd_exempts_norm_parameters_from_decay_and_rejects_nan() {
    let mut n = toy_net(1);
    let mut opt = Sgd::new(n.params());
    let grads: Vec<_> = n.params().iter().map(|p| Some(Tensor::zeros(p.value.shape()))).collect();
    let before = n.params().clone();
    opt.step(n.params_mut(), &grads, 0.1, 0.9, 0.5).unwrap();
    for (a, b) in before.iter().zip(n.params().iter()) {
        let changed = a.value != b.value;
        let expect = matches!(a.kind, ParamKind::ConvWeight | ParamKind::LinearWeight);
        assert_eq!(changed, expect, "{}", a.name);
    }
    let mut bad = grads.clone();
    bad[0] = Some(Tensor::full(n.params().get(0).value.shape(), f64::NAN));
    let err = opt.step(n.params_mut(), &bad, 0.1, 0.9, 0.0).unwrap_err();
    assert_eq!(err, Error::NonFiniteGradient { param: n.params().get(0).name.clone() });
    assert!(err.is_numeric());
}

#[test]
fn top_k_arithmetic() {
    let logits = [0.9, 0.1, 0.0, 0.2, 0.7, 0.1, 0.3, 0.3, 0.4, 0.5, 0.4, 0.1];
    assert_eq!(top_k_hits(&logits, 3, &[0, 1, 2, 1], 1), 3);
    assert_eq!(top_k_hits(&logits, 3, &[0, 1, 2, 1], 2), 4);
    // ties resolve to the lower index
    assert_eq!(top_k_hits(&[1.0, 1.0], 2, &[1], 1), 0);
    assert_eq!(top_k_hits(&[1.0, 1.0], 2, &[0], 1), 1);
}

#[test]
fn evaluate_ratios_and_export_parity() {
    let n = toy_net(2);
    let test = toy_samples(20, 9);
    let full = evaluate(&n, &test, 7).unwrap();
    let stripped = evaluate(&n.strip_export(), &test, 7).unwrap();
    assert_eq!(full, stripped);
    assert!(full.top5 >= full.top1);
    assert_eq!(full.top5, 100.0, "k = min(5, N) = 3 covers every class");
    assert!(evaluate(&n, &[], 4).is_err());
}

#[test]
fn two_epochs_switch_from_hard_to_softened_targets() {
    let mut n = toy_net(3);
    let train = toy_samples(10, 4);
    let mut opt = Sgd::new(n.params());
    let mut store = PredictionStore::new(layout(&n));
    let cfg = TrainConfig { epochs: 2, batch_size: 4, milestones: vec![], ..TrainConfig::default() };
    let e1 = train_epoch(&mut n, &mut opt, &mut store, &train, 1, &cfg).unwrap();
    assert_eq!((e1.hard, e1.softened, e1.samples), (10, 0, 10));
    assert_eq!(store.current().len(), 10);
    let e2 = train_epoch(&mut n, &mut opt, &mut store, &train, 2, &cfg).unwrap();
    assert_eq!((e2.hard, e2.softened), (0, 10));
    assert!(e2.losses.total.is_finite() && e2.losses.div > 0.0 && e2.losses.feat > 0.0);
    assert!((e2.losses.recombine(&cfg.hyper) - e2.losses.total).abs() < 1e-9);
}

#[test]
fn epochs_are_deterministic() {
    let run = || {
        let mut n = toy_net(5);
        let train = toy_samples(9, 6);
        let mut opt = Sgd::new(n.params());
        let mut store = PredictionStore::new(layout(&n));
        let cfg = TrainConfig { epochs: 2, batch_size: 4, milestones: vec![], ..TrainConfig::default() };
        let a = train_epoch(&mut n, &mut opt, &mut store, &train, 1, &cfg).unwrap();
        let b = train_epoch(&mut n, &mut opt, &mut store, &train, 2, &cfg).unwrap();
        (n.params().clone(), a, b)
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_weights_reduce_to_hard_label_training() {
    let n = toy_net(7);
    let train = toy_samples(4, 8);
    let refs: Vec<&ImageSample> = train.iter().collect();
    let images: Tensor<f64> = stack(&refs).unwrap();
    let ids: Vec<u32> = (0..4).collect();
    let classes: Vec<usize> = train.iter().map(|s| s.label).collect();
    let hp = Hyperparams { alpha: 0.0, beta: 0.0, gamma: 0.0, ..Hyperparams::default() };
    let cfg = TrainConfig { hyper: hp, ..TrainConfig::default() };

    // a previous epoch exists, but α = 0 ignores it
    let mut store = PredictionStore::new(layout(&n));
    store.begin_epoch(1).unwrap();
    for &id in &ids {
        let rec = PredictionRecord { final_logits: vec![3.0, -1.0, 0.5], sad: vec![0.25; 2 * 4 * 12] };
        store.update(1, id, rec).unwrap();
    }
    store.begin_epoch(2).unwrap();
    let step = compute_step(&n, &images, &ids, &classes, &store, 2, 0.0, &cfg, None).unwrap();
    assert_eq!(step.softened, 4);

    let hard = hard_targets::<f64>(&classes, 3, 4, 2).unwrap();
    let mut s = n.session(Mode::Train);
    let x = s.input(images.clone()).unwrap();
    let main = n.forward_main(&mut s, x).unwrap();
    let expanded = expand_batch(images.data(), &classes, [1, 8, 8], &JointLabelSpace::new(3, 4).unwrap()).unwrap();
    let xt = s.input(Tensor::new(&[16, 1, 8, 8], expanded.images).unwrap()).unwrap();
    let aux = n.forward_aux(&mut s, xt).unwrap();
    let a = loss_ce_resp(&mut s.graph, main.logits, &hard.final_targets, 1.0).unwrap();
    let b = loss_ce_hier(&mut s.graph, &aux.sad_logits, &hard.sad_targets, hp.tau_kd).unwrap();
    let total = s.graph.weighted_sum(&[(a, 1.0), (b, 1.0)]).unwrap();
    let mut g = s.graph.backward(total).unwrap();
    let reference = s.param_grads(&mut g);

    let apply = |grads: &[Option<Tensor<f64>>]| {
        let mut p = n.params().clone();
        Sgd::new(&p).step(&mut p, grads, 0.05, 0.9, 5e-5).unwrap();
        p
    };
    let (ours, theirs) = (apply(&step.grads), apply(&reference));
    for (x, y) in ours.iter().zip(theirs.iter()) {
        for (u, v) in x.value.data().iter().zip(y.value.data()) {
            assert!((u - v).abs() <= 1e-10, "{}", x.name);
        }
    }
}

#[test]
fn baseline_leaves_branches_untouched() {
    let mut n = toy_net(9);
    let train = toy_samples(8, 10);
    let mut opt = Sgd::new(n.params());
    let mut store = PredictionStore::new(layout(&n));
    let cfg = TrainConfig { objective: Objective::Baseline, batch_size: 4, ..TrainConfig::default() };
    let before = n.params().clone();
    let e = train_epoch(&mut n, &mut opt, &mut store, &train, 1, &cfg).unwrap();
    assert_eq!((e.losses.ce_hier, e.losses.div, e.losses.feat), (0.0, 0.0, 0.0));
    assert!(store.current().is_empty());
    for (id, (a, b)) in before.iter().zip(n.params().iter()).enumerate() {
        if n.is_backbone(id) {
            continue;
        }
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn branches_learn_but_never_touch_evaluation() {
    let mut n = toy_net(11);
    let train = toy_samples(8, 12);
    let test = toy_samples(6, 13);
    let mut opt = Sgd::new(n.params());
    let mut store = PredictionStore::new(layout(&n));
    let cfg = TrainConfig { batch_size: 4, ..TrainConfig::default() };
    let before = n.params().clone();
    train_epoch(&mut n, &mut opt, &mut store, &train, 1, &cfg).unwrap();
    let (w, _) = n.branch_head(0);
    assert_ne!(before.get(w).value, n.params().get(w).value);
    let acc = evaluate(&n, &test, 4).unwrap();
    for p in n.params_mut().iter_mut().filter(|p| p.name.starts_with("branch")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = 7.0);
    }
    assert_eq!(evaluate(&n, &test, 4).unwrap(), acc);
}
