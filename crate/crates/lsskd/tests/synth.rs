use lsskd::dataset::{self, default_normalization};
use lsskd::synth::{generate, write_dataset, SynthSpec};
use lsskd_core::data::class_counts;
use lsskd_core::ss_task::{rotate, RotationId};

fn spec() -> SynthSpec {
    SynthSpec { classes: 10, side: 16, train: 200, test: 50, seed: 4 }
}

#[test]
fn generation_is_seeded_and_balanced() {
    let (a, la) = generate(&spec(), 200, 1);
    let (b, lb) = generate(&spec(), 200, 1);
    assert_eq!((a.clone(), la.clone()), (b, lb));
    let (c, _) = generate(&SynthSpec { seed: 5, ..spec() }, 200, 1);
    assert_ne!(a, c);
    let (d, _) = generate(&spec(), 200, 2);
    assert_ne!(a, d, "train and test splits differ");
    assert_eq!(a.len(), 200 * 256);
    let mut counts = [0usize; 10];
    la.iter().for_each(|&l| counts[l as usize] += 1);
    assert_eq!(counts, [20; 10]);
}

#[test]
fn class_means_are_not_rotation_invariant() {
    // the pretext task needs glyphs whose orientation is recoverable
    let (px, labels) = generate(&SynthSpec { train: 1000, ..spec() }, 1000, 1);
    for class in 0..10u8 {
        let mut mean = vec![0.0f64; 256];
        let members: Vec<usize> = (0..1000).filter(|&i| labels[i] == class).collect();
        for &i in &members {
            for (m, &p) in mean.iter_mut().zip(&px[i * 256..(i + 1) * 256]) {
                *m += p as f64 / members.len() as f64;
            }
        }
        let turned = rotate(&mean, [1, 16, 16], RotationId::new(1).unwrap()).unwrap();
        let diff: f64 = mean.iter().zip(&turned).map(|(a, b)| (a - b).abs()).sum::<f64>() / 256.0;
        assert!(diff > 2.0, "class {class} mean image is nearly rotation-symmetric ({diff:.2})");
    }
}

#[test]
fn written_dataset_loads_with_shipped_normalization() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&spec(), &dir.path().join("synth10")).unwrap();
    let ds = dataset::load("synth10", dir.path(), &default_normalization("synth10").unwrap()).unwrap();
    assert_eq!((ds.train.len(), ds.test.len(), ds.meta.classes), (200, 50, 10));
    assert_eq!(ds.meta.image_shape, [1, 16, 16]);
    assert_eq!(class_counts(&ds.test, 10), vec![5; 10]);
    let n = ds.train.len() * 256;
    let mean = ds.train.iter().flat_map(|s| &s.pixels).map(|&v| v as f64).sum::<f64>() / n as f64;
    assert!(mean.abs() < 0.2, "normalized mean {mean}");
    assert!(write_dataset(&SynthSpec { classes: 1, ..spec() }, dir.path()).is_err());
}
