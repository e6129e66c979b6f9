//! Optimizer, schedule, one training step/epoch, and evaluation.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::BackwardFault;
use crate::data::{augment, batch_iter, ImageSample};
use crate::distill::{batch_targets, lsskd_loss, lsskd_loss_with, BatchTargets, TeacherSide, Hyperparams, LossParts, LossValues, PredictionRecord, PredictionStore};
use crate::network::{AuxForward, Classifier, MainForward, Mode, ParamStore, RunningUpdates, Session, StudentNetwork};
use crate::ss_task::{expand_batch, JointLabelSpace};
use crate::{rng, Error, Real, Result, Tensor};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    /// Softened final and joint-space targets plus the shallow-to-deep terms.
    #[default]
    Lsskd,
    /// Hard-label cross-entropy on the final head only.
    Baseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Completed-epoch counts after which the rate decays.
    pub milestones: Vec<u32>,
    pub decay: f64,
    pub seed: u64,
    /// Fraction of each class kept for training; 1 keeps everything.
    pub fewshot_fraction: f64,
    pub hyper: Hyperparams,
    pub objective: Objective,
    /// Random crop and horizontal flip of training images.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 240,
            batch_size: 64,
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 5e-5,
            milestones: vec![150, 210],
            decay: 0.1,
            seed: 0,
            fewshot_fraction: 1.0,
            hyper: Hyperparams::default(),
            objective: Objective::Lsskd,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// The 30-epoch schedule with decays after epochs 20 and 26.
    pub fn desk() -> Self {
        TrainConfig { epochs: 30, milestones: vec![20, 26], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: alloc::string::String| Err(Error::invalid("train config", d));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad(format!("epochs {} batch {}", self.epochs, self.batch_size));
        }
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad(format!("lr0 {} momentum {} wd {}", self.lr0, self.momentum, self.weight_decay));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay {}", self.decay));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) || self.milestones.iter().any(|&m| m == 0 || m >= self.epochs) {
            return bad(format!("milestones {:?} must increase strictly within 1..{}", self.milestones, self.epochs));
        }
        if !(self.fewshot_fraction > 0.0 && self.fewshot_fraction <= 1.0) {
            return bad(format!("few-shot fraction {}", self.fewshot_fraction));
        }
        self.hyper.validate()
    }
}

/// `lr0 · decay^n` with `n` the milestones already passed at the start of
/// 1-based `epoch`. A decay that is the reciprocal of an integer divides
/// by that integer, so 0.05 at factor 0.1 yields exactly 0.005.
pub fn lr_at(epoch: u32, cfg: &TrainConfig) -> f64 {
    let passed = cfg.milestones.iter().filter(|&&m| m <= epoch.saturating_sub(1)).count();
    let inv = 1.0 / cfg.decay;
    let whole = libm::round(inv);
    if (inv - whole).abs() < 1e-9 {
        (0..passed).fold(cfg.lr0, |lr, _| lr / whole)
    } else {
        (0..passed).fold(cfg.lr0, |lr, _| lr * cfg.decay)
    }
}

/// `v ← μ·v + g + wd·p; p ← p − lr·v`.
pub fn sgd_step<T: Real>(param: &mut [T], grad: &[T], velocity: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
}

/// Momentum SGD over a [`ParamStore`]; normalization parameters skip
/// weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    velocities: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let velocities = params
            .iter()
            .map(|p| if p.kind.trainable() { vec![T::zero(); p.value.numel()] } else { Vec::new() })
            .collect();
        Sgd { velocities }
    }

    /// Velocity buffer per parameter (empty for buffers).
    pub fn velocities(&self) -> &[Vec<T>] {
        &self.velocities
    }

    pub fn set_velocity(&mut self, id: usize, values: Vec<T>) -> Result<()> {
        if values.len() != self.velocities[id].len() {
            return Err(Error::shape("optimizer state", format!("{} values for slot {id}", values.len())));
        }
        self.velocities[id] = values;
        Ok(())
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("sgd", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get(id);
            if !p.kind.trainable() {
                continue;
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient { param: p.name.to_string() });
            }
            let wd = if p.kind.decays() { weight_decay } else { 0.0 };
            sgd_step(params.get_mut(id).value.data_mut(), g.data(), &mut self.velocities[id], lr, momentum, wd);
        }
        Ok(())
    }
}

/// Stack samples into a `[B, C, H, W]` tensor.
pub fn stack<T: Real>(samples: &[&ImageSample]) -> Result<Tensor<T>> {
    let first = samples.first().ok_or(Error::Empty("batch"))?;
    let [c, h, w] = first.shape;
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if s.shape != first.shape {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", s.shape, first.shape)));
        }
        data.extend(s.pixels.iter().map(|&v| T::of(f64::from(v))));
    }
    Tensor::new(&[samples.len(), c, h, w], data)
}

/// Graph nodes of one full training forward pass.
pub struct StepGraph {
    pub main: MainForward,
    pub aux: Option<AuxForward>,
    pub parts: LossParts,
}

/// Build the objective on `s`: the main pass over `images` (which feeds
/// running statistics) and, for LSSKD, the auxiliary pass over their
/// rotation expansion.
pub fn build_objective<T: Real>(
    net: &StudentNetwork<T>,
    s: &mut Session<T>,
    images: &Tensor<T>,
    targets: &BatchTargets<T>,
    objective: Objective,
    hp: &Hyperparams,
) -> Result<StepGraph> {
    build_objective_with(net, s, images, targets, objective, hp, None)
}

/// [`build_objective`], optionally with the teacher side (deepest joint
/// logits, final pooled feature) replaced by fixed values.
pub fn build_objective_with<T: Real>(
    net: &StudentNetwork<T>,
    s: &mut Session<T>,
    images: &Tensor<T>,
    targets: &BatchTargets<T>,
    objective: Objective,
    hp: &Hyperparams,
    frozen_teacher: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<StepGraph> {
    let x = s.input(images.clone())?;
    let main = net.forward_main(s, x)?;
    if objective == Objective::Baseline {
        let ce = s.graph.cross_entropy_soft(main.logits, &targets.final_targets, 1.0)?;
        let zero = s.graph.constant(Tensor::scalar(T::zero()))?;
        let total = s.graph.weighted_sum(&[(ce, 1.0)])?;
        let parts = LossParts { ce_resp: ce, ce_hier: zero, div: zero, feat: zero, total };
        return Ok(StepGraph { main, aux: None, parts });
    }
    let cfg = net.config();
    let b = images.shape()[0];
    let space = JointLabelSpace::new(cfg.classes, cfg.transforms)?;
    // labels only matter for the targets, which are built separately
    let expanded = expand_batch(images.data(), &vec![0; b], cfg.input_shape, &space)?;
    let [c, h, w] = cfg.input_shape;
    let xt = s.input(Tensor::new(&[cfg.transforms * b, c, h, w], expanded.images)?)?;
    let record = s.record_stats();
    s.set_record_stats(false);
    let aux = net.forward_aux(s, xt)?;
    s.set_record_stats(record);
    let parts = match frozen_teacher {
        None => lsskd_loss(&mut s.graph, main.logits, &aux.sad_logits, &aux.pooled, aux.final_pooled, targets, hp)?,
        Some((logits, pooled)) => {
            let teacher = TeacherSide { deep_logits: s.input(logits.clone())?, final_pooled: s.input(pooled.clone())? };
            lsskd_loss_with(&mut s.graph, main.logits, &aux.sad_logits, &aux.pooled, teacher, targets, hp)?
        }
    };
    Ok(StepGraph { main, aux: Some(aux), parts })
}

/// Everything one step produces before it is applied.
pub struct StepResult<T> {
    pub losses: LossValues,
    pub grads: Vec<Option<Tensor<T>>>,
    pub running: RunningUpdates<T>,
    /// Raw logits per sample for the prediction store.
    pub records: Vec<PredictionRecord<T>>,
    pub softened: usize,
}

/// Hard one-hot targets (no store reads).
pub fn hard_targets<T: Real>(classes: &[usize], n: usize, m: usize, stages: usize) -> Result<BatchTargets<T>> {
    let layout = crate::distill::StoreLayout { classes: n, transforms: m, stages };
    let store = PredictionStore::new(layout);
    let ids: Vec<u32> = (0..classes.len() as u32).collect();
    batch_targets(&store, 1, &ids, classes, 0.0, &Hyperparams::default())
}

#[allow(clippy::too_many_arguments)]
pub fn compute_step<T: Real>(
    net: &StudentNetwork<T>,
    images: &Tensor<T>,
    ids: &[u32],
    classes: &[usize],
    store: &PredictionStore<T>,
    epoch: u32,
    alpha: f64,
    cfg: &TrainConfig,
    fault: Option<BackwardFault>,
) -> Result<StepResult<T>> {
    let nc = net.config();
    let targets = match cfg.objective {
        Objective::Lsskd => batch_targets(store, epoch, ids, classes, alpha, &cfg.hyper)?,
        Objective::Baseline => hard_targets(classes, nc.classes, nc.transforms, nc.stages())?,
    };
    let mut s = Session::with_fault(net.params(), Mode::Train, fault);
    let step = build_objective(net, &mut s, images, &targets, cfg.objective, &cfg.hyper)?;
    let losses = LossValues::read(&s.graph, &step.parts);
    if !losses.total.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    let mut g = s.graph.backward(step.parts.total)?;
    let grads = s.param_grads(&mut g);
    let records = match &step.aux {
        Some(aux) => collect_records(&s, &step.main, aux, ids.len(), nc.transforms),
        None => Vec::new(),
    };
    Ok(StepResult { losses, grads, running: s.into_running_updates(), records, softened: targets.softened })
}

fn collect_records<T: Real>(s: &Session<T>, main: &MainForward, aux: &AuxForward, b: usize, m: usize) -> Vec<PredictionRecord<T>> {
    let z = s.graph.value(main.logits);
    let n = z.shape()[1];
    (0..b)
        .map(|i| {
            let mut sad = Vec::new();
            for &q in &aux.sad_logits {
                let q = s.graph.value(q);
                let k = q.shape()[1];
                for j in 0..m {
                    let row = j * b + i;
                    sad.extend_from_slice(&q.data()[row * k..(row + 1) * k]);
                }
            }
            PredictionRecord { final_logits: z.data()[i * n..(i + 1) * n].to_vec(), sad }
        })
        .collect()
}

/// Sample-weighted epoch means and target provenance counts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochSummary {
    pub losses: LossValues,
    pub samples: usize,
    pub softened: usize,
    pub hard: usize,
    pub lr: f64,
}

/// One epoch over `train`. For LSSKD the store is advanced to `epoch`
/// and receives one record per sample.
pub fn train_epoch<T: Real>(
    net: &mut StudentNetwork<T>,
    opt: &mut Sgd<T>,
    store: &mut PredictionStore<T>,
    train: &[ImageSample],
    epoch: u32,
    cfg: &TrainConfig,
) -> Result<EpochSummary> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.objective == Objective::Lsskd {
        store.begin_epoch(epoch)?;
    }
    let lr = lr_at(epoch, cfg);
    let alpha = cfg.hyper.alpha_at(epoch, cfg.epochs);
    let mut sum = LossValues::default();
    let mut summary = EpochSummary { lr, ..EpochSummary::default() };
    for batch in batch_iter(train.len(), cfg.batch_size, cfg.seed, epoch)? {
        let augmented: Vec<ImageSample> = batch
            .iter()
            .map(|&i| {
                let s = &train[i];
                if cfg.augment {
                    augment(s, &mut rng::sample_stream(cfg.seed, epoch, s.sample_id))
                } else {
                    s.clone()
                }
            })
            .collect();
        let refs: Vec<&ImageSample> = augmented.iter().collect();
        let images = stack::<T>(&refs)?;
        let ids: Vec<u32> = refs.iter().map(|s| s.sample_id).collect();
        let classes: Vec<usize> = refs.iter().map(|s| s.label).collect();
        let step = compute_step(net, &images, &ids, &classes, store, epoch, alpha, cfg, None)?;
        opt.step(net.params_mut(), &step.grads, lr, cfg.momentum, cfg.weight_decay)?;
        step.running.apply(net.params_mut());
        for (&id, rec) in ids.iter().zip(step.records) {
            store.update(epoch, id, rec)?;
        }
        let w = ids.len() as f64;
        let l = &step.losses;
        sum.ce_resp += w * l.ce_resp;
        sum.ce_hier += w * l.ce_hier;
        sum.div += w * l.div;
        sum.feat += w * l.feat;
        sum.total += w * l.total;
        summary.samples += ids.len();
        summary.softened += step.softened;
    }
    let n = summary.samples as f64;
    summary.losses = LossValues {
        ce_resp: sum.ce_resp / n,
        ce_hier: sum.ce_hier / n,
        div: sum.div / n,
        feat: sum.feat / n,
        total: sum.total / n,
    };
    summary.hard = summary.samples - summary.softened;
    Ok(summary)
}

/// Top-1 and top-k accuracy in percent, `k = min(5, N)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Position of `label` when `row` is sorted descending, ties broken by
/// index.
fn rank(row: &[f64], label: usize) -> usize {
    let y = row[label];
    row.iter().enumerate().filter(|&(j, &v)| v > y || (v == y && j < label)).count()
}

/// Hits within the top `k` of each row of a `[B, N]` logit table.
pub fn top_k_hits(logits: &[f64], classes: usize, labels: &[usize], k: usize) -> usize {
    logits.chunks_exact(classes).zip(labels).filter(|(row, &y)| rank(row, y) < k).count()
}

/// Evaluation-mode accuracy over `test`, in batches of `batch_size`.
pub fn evaluate<T: Real, C: Classifier<T>>(net: &C, test: &[ImageSample], batch_size: usize) -> Result<Accuracy> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let n = net.config().classes;
    let k = n.min(5);
    let (mut top1, mut topk) = (0usize, 0usize);
    for chunk in test.chunks(batch_size.max(1)) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let z = net.logits(&stack::<T>(&refs)?)?;
        let z: Vec<f64> = z.data().iter().map(|v| v.f64()).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        top1 += top_k_hits(&z, n, &labels, 1);
        topk += top_k_hits(&z, n, &labels, k);
    }
    let pct = |h: usize| 100.0 * h as f64 / test.len() as f64;
    Ok(Accuracy { top1: pct(top1), top5: pct(topk) })
}

/// One row of the metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub lr: f64,
    pub train_total: f64,
    pub ls_loss: f64,
    pub is_loss: f64,
    pub test_top1: f64,
    pub test_top5: f64,
    pub wall_s: f64,
}

impl EpochMetrics {
    pub fn new(summary: &EpochSummary, epoch: u32, acc: Accuracy, wall_s: f64) -> Self {
        EpochMetrics {
            epoch,
            lr: summary.lr,
            train_total: summary.losses.total,
            ls_loss: summary.losses.ls(),
            is_loss: summary.losses.is(),
            test_top1: acc.top1,
            test_top5: acc.top5,
            wall_s,
        }
    }
}

#[cfg(test)]
mod tests;
