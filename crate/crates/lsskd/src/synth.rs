//! Procedural glyph dataset for desk-scale runs where no public dataset is
//! available. Each class is a fixed set of asymmetric strokes; samples
//! perturb the prototype (pose, stroke jitter, width, contrast), add a
//! distractor stroke and pixel noise, and render to grayscale bytes.

use std::f64::consts::PI;
use std::path::Path;

use lsskd_core::rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{error::CliError, idx};

/// Seed of the class prototypes; sample draws use the caller's seed.
const PROTOTYPE_SEED: u64 = 0x6C79_7068;
const STROKES: usize = 3;
const POOL: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub side: usize,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { classes: 10, side: 16, train: 5000, test: 1000, seed: 1 }
    }
}

type Segment = [(f64, f64); 2];

/// Classes draw their strokes from a small shared pool, so telling them
/// apart needs the combination rather than any single stroke.
fn prototypes(classes: usize) -> (Vec<Segment>, Vec<Vec<Segment>>) {
    let mut r = rng::stream(PROTOTYPE_SEED);
    let pool: Vec<Segment> = (0..POOL)
        .map(|_| loop {
            let mut point = || -> (f64, f64) { (r.random_range(-0.7..0.7), r.random_range(-0.7..0.7)) };
            let (a, b) = (point(), point());
            // short strokes read as dots; keep them long enough to orient the glyph
            if (a.0 - b.0).hypot(a.1 - b.1) > 0.6 {
                break [a, b];
            }
        })
        .collect();
    let mut seen = Vec::new();
    while seen.len() < classes {
        let mut pick: Vec<usize> = rand::seq::index::sample(&mut r, POOL, STROKES).into_vec();
        pick.sort_unstable();
        if !seen.contains(&pick) {
            seen.push(pick);
        }
    }
    let protos = seen.into_iter().map(|p| p.into_iter().map(|i| pool[i]).collect()).collect();
    (pool, protos)
}

fn segment_distance(p: (f64, f64), s: &Segment) -> f64 {
    let [(ax, ay), (bx, by)] = *s;
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((p.0 - ax) * dx + (p.1 - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    (p.0 - ax - t * dx).hypot(p.1 - ay - t * dy)
}

fn render<R: Rng>(proto: &[Segment], pool: &[Segment], side: usize, r: &mut R) -> Vec<u8> {
    let jitter = Normal::new(0.0, 0.1).unwrap();
    let noise = Normal::new(0.0, 0.15).unwrap();
    let angle = r.random_range(-0.15 * PI..0.15 * PI);
    let scale = r.random_range(0.75..1.15);
    let shift = (r.random_range(-0.12..0.12), r.random_range(-0.12..0.12));
    let (sin, cos) = angle.sin_cos();
    let half = side as f64 / 2.0;
    // glyph coordinates in [-1, 1] map onto the image, y pointing down
    let place = |(x, y): (f64, f64)| {
        let (x, y) = (scale * (cos * x - sin * y) + shift.0, scale * (sin * x + cos * y) + shift.1);
        (half + x * half, half + y * half)
    };
    let mut strokes: Vec<(Segment, f64, f64)> = proto
        .iter()
        .map(|s| {
            let mut s = *s;
            for p in &mut s {
                *p = place((p.0 + jitter.sample(r), p.1 + jitter.sample(r)));
            }
            (s, r.random_range(0.7..1.3), r.random_range(0.6..1.0))
        })
        .collect();
    // a faint stroke from another glyph makes some samples genuinely ambiguous
    if r.random_bool(0.5) {
        let mut s = pool[r.random_range(0..pool.len())];
        for p in &mut s {
            *p = place(*p);
        }
        strokes.push((s, r.random_range(0.7..1.3), r.random_range(0.25..0.55)));
    }
    if r.random_bool(0.7) {
        let mut end = || (r.random_range(0.0..side as f64), r.random_range(0.0..side as f64));
        let s = [end(), end()];
        strokes.push((s, r.random_range(0.5..1.0), r.random_range(0.3..0.8)));
    }
    let background = r.random_range(0.0..0.15);
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let ink = strokes
                .iter()
                .map(|(s, width, level)| level * (1.0 - (segment_distance(p, s) - width / 2.0)).clamp(0.0, 1.0))
                .fold(0.0, f64::max);
            let v = (background + ink + noise.sample(r)).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

/// `(pixels, labels)` for `count` samples with balanced labels `i mod N`.
pub fn generate(spec: &SynthSpec, count: usize, split: u64) -> (Vec<u8>, Vec<u8>) {
    let (pool, protos) = prototypes(spec.classes);
    let mut r = rng::stream(rng::mix64(spec.seed ^ split));
    let mut pixels = Vec::with_capacity(count * spec.side * spec.side);
    let labels: Vec<u8> = (0..count).map(|i| (i % spec.classes) as u8).collect();
    for &l in &labels {
        pixels.extend(render(&protos[l as usize], &pool, spec.side, &mut r));
    }
    (pixels, labels)
}

/// Writes the train/test IDX pair under `dir` using the MNIST file names.
pub fn write_dataset(spec: &SynthSpec, dir: &Path) -> Result<(), CliError> {
    if spec.classes < 2 || spec.classes > 256 {
        return Err(CliError::Data(format!("synthetic dataset needs 2..=256 classes, got {}", spec.classes)));
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (prefix, count, split) in [("train", spec.train, 1), ("t10k", spec.test, 2)] {
        let (pixels, labels) = generate(spec, count, split);
        let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
        std::fs::write(&images, idx::write_images(count, spec.side, spec.side, &pixels)).map_err(|e| CliError::io(&images, e))?;
        let lpath = dir.join(format!("{prefix}-labels-idx1-ubyte"));
        std::fs::write(&lpath, idx::write_labels(&labels)).map_err(|e| CliError::io(&lpath, e))?;
    }
    Ok(())
}
