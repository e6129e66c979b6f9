//! Central finite-difference checking of analytic gradients.

use alloc::vec::Vec;

use alloc::vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{BackwardFault, Var};
use crate::distill::{batch_targets, Hyperparams, LossParts, PredictionRecord, PredictionStore, StoreLayout};
use crate::network::{BackboneConfig, Mode, ParamKind, Session, StudentNetwork};
use crate::train::{build_objective, build_objective_with, Objective};
use crate::{rng, Result, Tensor};

/// Finite-difference step used throughout the crate's checks.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely rather than
/// relatively.
pub const DENOM_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordCheck {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Numeric derivative of `f` at one coordinate; `None` when the one-sided
/// slopes disagree, i.e. the step straddles a kink (ReLU boundary).
pub fn central_difference<F>(inputs: &mut [Tensor<f64>], tensor: usize, index: usize, step: f64, f: &mut F) -> Result<Option<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let original = inputs[tensor].data()[index];
    let centre = f(inputs)?;
    inputs[tensor].data_mut()[index] = original + step;
    let plus = f(inputs);
    inputs[tensor].data_mut()[index] = original - step;
    let minus = f(inputs);
    inputs[tensor].data_mut()[index] = original;
    let (plus, minus) = (plus?, minus?);
    let forward = (plus - centre) / step;
    let backward = (centre - minus) / step;
    if (forward - backward).abs() > 1e-8 + 1e-4 * forward.abs().max(backward.abs()) {
        return Ok(None);
    }
    Ok(Some((plus - minus) / (2.0 * step)))
}

/// Compare `analytic` against central differences on `count` coordinates
/// drawn uniformly over all elements of `inputs`. Coordinates on a kink
/// are redrawn (at most `10 * count` draws in total).
pub fn check_coords<F, R>(
    inputs: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    count: usize,
    rng: &mut R,
    mut f: F,
) -> Result<Vec<CoordCheck>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
    R: Rng,
{
    let sizes: Vec<usize> = inputs.iter().map(|t| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut out = Vec::with_capacity(count);
    let mut draws = 0;
    while out.len() < count && draws < 10 * count.max(1) {
        draws += 1;
        let mut flat = rng.random_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let Some(numeric) = central_difference(inputs, tensor, flat, STEP, &mut f)? else {
            continue;
        };
        let a = analytic[tensor].data()[flat];
        out.push(CoordCheck { tensor, index: flat, analytic: a, numeric, rel_error: relative_error(a, numeric) });
    }
    Ok(out)
}

pub fn max_rel_error(checks: &[CoordCheck]) -> f64 {
    checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
}

/// Names of the checked objective terms, in report order.
pub const SUITE_TERMS: [&str; 5] = ["ce_resp", "ce_hier", "div", "feat", "total"];
/// Tolerance of the network-level suite.
pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_COORDS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct TermReport {
    pub term: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl TermReport {
    pub fn passed(&self) -> bool {
        self.checked == SUITE_COORDS && self.max_rel_error < SUITE_TOLERANCE
    }
}

fn term(parts: &LossParts, i: usize) -> Var {
    [parts.ce_resp, parts.ce_hier, parts.div, parts.feat, parts.total][i]
}

/// Finite-difference check of every objective term with respect to all
/// trainable parameters of a two-stage toy student (channels 4 and 8,
/// three classes, four rotations, batch of two) in 64-bit precision, with
/// softened targets from a synthetic previous epoch. The detached teacher
/// side is held at its base-point value while differencing.
pub fn loss_suite(fault: Option<BackwardFault>, seed: u64) -> Result<Vec<TermReport>> {
    let config = BackboneConfig { input_shape: [1, 8, 8], classes: 3, transforms: 4, channels: vec![4, 8], blocks: 1 };
    let mut net = StudentNetwork::<f64>::new(config)?;
    net.init_parameters(seed);
    let mut r = rng::stream(rng::mix64(seed));
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect() };
    for p in net.params_mut().iter_mut() {
        if matches!(p.kind, ParamKind::NormShift | ParamKind::LinearBias) {
            let noise = normal(p.value.numel());
            p.value.data_mut().iter_mut().zip(noise).for_each(|(v, n)| *v = 0.1 * n);
        }
    }
    let images = Tensor::new(&[2, 1, 8, 8], normal(128))?;
    let classes = [0usize, 2];
    let ids = [0u32, 1];
    let layout = StoreLayout { classes: 3, transforms: 4, stages: 2 };
    let mut store = PredictionStore::new(layout);
    store.begin_epoch(1)?;
    for &id in &ids {
        let rec = PredictionRecord { final_logits: normal(3), sad: normal(layout.sad_len()) };
        store.update(1, id, rec)?;
    }
    store.begin_epoch(2)?;
    let hp = Hyperparams::default();
    let targets = batch_targets(&store, 2, &ids, &classes, hp.alpha, &hp)?;

    let trainable: Vec<usize> = (0..net.params().len()).filter(|&i| net.params().get(i).kind.trainable()).collect();
    let base: Vec<Tensor<f64>> = trainable.iter().map(|&i| net.params().get(i).value.clone()).collect();

    let mut s = Session::with_fault(net.params(), Mode::Train, fault);
    let step = build_objective(&net, &mut s, &images, &targets, Objective::Lsskd, &hp)?;
    let aux = step.aux.as_ref().expect("auxiliary pass");
    let teacher = (s.graph.value(aux.sad_logits[1]).clone(), s.graph.value(aux.final_pooled).clone());
    let analytic: Vec<Vec<Tensor<f64>>> = (0..SUITE_TERMS.len())
        .map(|t| {
            let mut g = s.graph.backward(term(&step.parts, t))?;
            let mut all = s.param_grads(&mut g);
            Ok(trainable
                .iter()
                .map(|&i| all[i].take().unwrap_or_else(|| Tensor::zeros(net.params().get(i).value.shape())))
                .collect())
        })
        .collect::<Result<_>>()?;
    drop(s);

    let mut reports = Vec::with_capacity(SUITE_TERMS.len());
    for (t, grads) in analytic.iter().enumerate() {
        let mut inputs = base.clone();
        let mut probe = net.clone();
        let mut coords = rng::stream(seed ^ 0x9e37);
        let f = |values: &[Tensor<f64>]| -> Result<f64> {
            for (&i, v) in trainable.iter().zip(values) {
                probe.params_mut().get_mut(i).value = v.clone();
            }
            let mut s = probe.session(Mode::Train);
            let step = build_objective_with(&probe, &mut s, &images, &targets, Objective::Lsskd, &hp, Some((&teacher.0, &teacher.1)))?;
            Ok(s.graph.value(term(&step.parts, t)).item())
        };
        let checks = check_coords(&mut inputs, grads, SUITE_COORDS, &mut coords, f)?;
        reports.push(TermReport { term: SUITE_TERMS[t], max_rel_error: max_rel_error(&checks), checked: checks.len() });
    }
    Ok(reports)
}
