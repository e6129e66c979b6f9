//! Self-distillation objective: label softening from the previous epoch,
//! label-supervised and itself-supervised losses, and the prediction store.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::ss_task::{joint_one_hot, JointLabelSpace};
use crate::{Error, Real, Result, Tensor};

/// Probability floor inside the KL logarithms.
pub const KL_FLOOR: f64 = 1e-12;

/// Argument order of the shallow-to-deep KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `KL(shallow ‖ deep)`.
    #[default]
    ShallowDeep,
    /// `KL(deep ‖ shallow)`.
    DeepShallow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau_ce: f64,
    pub tau_kd: f64,
    /// Ramp α linearly over the epochs, `α·e/E`.
    pub alpha_warmup: bool,
    pub kl_direction: KlDirection,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: 0.8,
            beta: 0.1,
            gamma: 0.1,
            tau_ce: 1.0,
            tau_kd: 3.0,
            alpha_warmup: false,
            kl_direction: KlDirection::ShallowDeep,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.alpha) || !unit(self.beta) || !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(
                "hyperparameters",
                format!("alpha {} beta {} gamma {}", self.alpha, self.beta, self.gamma),
            ));
        }
        if !(self.tau_ce > 0.0 && self.tau_kd > 0.0) || !self.tau_kd.is_finite() {
            return Err(Error::invalid("hyperparameters", format!("tau_ce {} tau_kd {}", self.tau_ce, self.tau_kd)));
        }
        Ok(())
    }

    /// Softening weight in effect at 1-based `epoch` of `epochs`.
    pub fn alpha_at(&self, epoch: u32, epochs: u32) -> f64 {
        if self.alpha_warmup && epochs > 0 {
            self.alpha * f64::from(epoch.min(epochs)) / f64::from(epochs)
        } else {
            self.alpha
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    HardLabel,
    Softened,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftTarget {
    pub probs: Vec<f64>,
    pub provenance: Provenance,
}

fn softmax_f64<T: Real>(logits: &[T], tau: f64) -> Vec<f64> {
    let max = logits.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| libm::exp((v.f64() - max) / tau)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn soften<T: Real>(one_hot: Vec<f64>, prev: Option<&[T]>, alpha: f64, tau: f64) -> Result<SoftTarget> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("soften", format!("alpha {alpha} outside [0, 1]")));
    }
    let Some(prev) = prev else {
        return Ok(SoftTarget { probs: one_hot, provenance: Provenance::HardLabel });
    };
    if prev.len() != one_hot.len() {
        return Err(Error::shape("soften", format!("{} logits for {} classes", prev.len(), one_hot.len())));
    }
    let p = softmax_f64(prev, tau);
    let probs = one_hot.iter().zip(&p).map(|(&y, &q)| (1.0 - alpha) * y + alpha * q).collect();
    Ok(SoftTarget { probs, provenance: Provenance::Softened })
}

/// `(1−α)·y + α·softmax(prev/τ)` for the final head; the one-hot itself
/// when there is no previous prediction.
pub fn soften_final<T: Real>(one_hot: &[f64], prev: Option<&[T]>, alpha: f64, tau_ce: f64) -> Result<SoftTarget> {
    soften(one_hot.to_vec(), prev, alpha, tau_ce)
}

/// Joint-space counterpart of [`soften_final`] for one stage and transform.
pub fn soften_sad<T: Real>(joint_one_hot: &[f64], prev: Option<&[T]>, alpha: f64, tau_kd: f64) -> Result<SoftTarget> {
    soften(joint_one_hot.to_vec(), prev, alpha, tau_kd)
}

/// Sizes of a stored record: `N` final logits and `L·M·K` joint logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreLayout {
    pub classes: usize,
    pub transforms: usize,
    pub stages: usize,
}

impl StoreLayout {
    pub fn joint(&self) -> usize {
        self.classes * self.transforms
    }

    pub fn sad_len(&self) -> usize {
        self.stages * self.transforms * self.joint()
    }
}

/// Raw logits of one sample from one epoch. `sad` is stage-major then
/// transform: entry `(l, j)` starts at `(l·M + j)·K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord<T> {
    pub final_logits: Vec<T>,
    pub sad: Vec<T>,
}

impl<T: Real> PredictionRecord<T> {
    pub fn sad_logits(&self, layout: &StoreLayout, stage: usize, transform: usize) -> &[T] {
        let k = layout.joint();
        let at = (stage * layout.transforms + transform) * k;
        &self.sad[at..at + k]
    }
}

/// Predictions of the previous and the current epoch, keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionStore<T> {
    layout: StoreLayout,
    previous_epoch: u32,
    previous: BTreeMap<u32, PredictionRecord<T>>,
    current_epoch: u32,
    current: BTreeMap<u32, PredictionRecord<T>>,
}

impl<T: Real> PredictionStore<T> {
    pub fn new(layout: StoreLayout) -> Self {
        PredictionStore {
            layout,
            previous_epoch: 0,
            previous: BTreeMap::new(),
            current_epoch: 0,
            current: BTreeMap::new(),
        }
    }

    /// A store whose latest completed epoch is `epoch`.
    pub fn restore(layout: StoreLayout, epoch: u32, records: BTreeMap<u32, PredictionRecord<T>>) -> Result<Self> {
        let mut s = Self::new(layout);
        for r in records.values() {
            s.check(r)?;
        }
        s.current_epoch = epoch;
        s.current = records;
        Ok(s)
    }

    pub fn layout(&self) -> &StoreLayout {
        &self.layout
    }

    /// Start 1-based `epoch`; what was current becomes the previous epoch.
    pub fn begin_epoch(&mut self, epoch: u32) -> Result<()> {
        if epoch != self.current_epoch + 1 {
            return Err(Error::invalid(
                "prediction store",
                format!("epoch {epoch} does not follow {}", self.current_epoch),
            ));
        }
        self.previous = core::mem::take(&mut self.current);
        self.previous_epoch = self.current_epoch;
        self.current_epoch = epoch;
        Ok(())
    }

    fn check(&self, r: &PredictionRecord<T>) -> Result<()> {
        if r.final_logits.len() != self.layout.classes || r.sad.len() != self.layout.sad_len() {
            return Err(Error::shape(
                "prediction store",
                format!("record {}+{} for layout {:?}", r.final_logits.len(), r.sad.len(), self.layout),
            ));
        }
        Ok(())
    }

    pub fn update(&mut self, epoch: u32, sample_id: u32, record: PredictionRecord<T>) -> Result<()> {
        if epoch != self.current_epoch {
            return Err(Error::invalid(
                "prediction store",
                format!("update for epoch {epoch} while epoch {} is open", self.current_epoch),
            ));
        }
        self.check(&record)?;
        if self.current.contains_key(&sample_id) {
            return Err(Error::DuplicateUpdate { epoch, sample_id });
        }
        self.current.insert(sample_id, record);
        Ok(())
    }

    /// The record of `sample_id` from `epoch`, if that epoch is retained.
    pub fn fetch(&self, epoch: u32, sample_id: u32) -> Option<&PredictionRecord<T>> {
        if epoch == 0 {
            return None;
        }
        if epoch == self.previous_epoch {
            self.previous.get(&sample_id)
        } else if epoch == self.current_epoch {
            self.current.get(&sample_id)
        } else {
            None
        }
    }

    pub fn current_epoch(&self) -> u32 {
        self.current_epoch
    }

    pub fn current(&self) -> &BTreeMap<u32, PredictionRecord<T>> {
        &self.current
    }

    pub fn previous_len(&self) -> usize {
        self.previous.len()
    }
}

/// Constant targets for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets<T> {
    /// `[B, N]`.
    pub final_targets: Tensor<T>,
    /// Per stage, `[M·B, K]` in transform-major row order.
    pub sad_targets: Vec<Tensor<T>>,
    /// Samples whose targets were softened by a previous-epoch record.
    pub softened: usize,
}

/// Soft targets for `ids`/`classes` in `epoch`, reading epoch `epoch − 1`.
pub fn batch_targets<T: Real>(
    store: &PredictionStore<T>,
    epoch: u32,
    ids: &[u32],
    classes: &[usize],
    alpha: f64,
    hp: &Hyperparams,
) -> Result<BatchTargets<T>> {
    let layout = *store.layout();
    let space = JointLabelSpace::new(layout.classes, layout.transforms)?;
    let (n, m, k, b) = (layout.classes, layout.transforms, layout.joint(), ids.len());
    if classes.len() != b || b == 0 {
        return Err(Error::shape("batch targets", format!("{b} ids, {} labels", classes.len())));
    }
    let mut finals = Vec::with_capacity(b * n);
    let mut sad = vec![Vec::with_capacity(m * b * k); layout.stages];
    let mut softened = 0;
    let prev: Vec<_> = ids.iter().map(|&id| store.fetch(epoch.saturating_sub(1), id)).collect();
    for (i, &class) in classes.iter().enumerate() {
        if class >= n {
            return Err(Error::invalid("batch targets", format!("label {class} with {n} classes")));
        }
        let mut y = vec![0.0; n];
        y[class] = 1.0;
        let t = soften_final(&y, prev[i].map(|r| r.final_logits.as_slice()), alpha, hp.tau_ce)?;
        if t.provenance == Provenance::Softened {
            softened += 1;
        }
        finals.extend(t.probs.iter().map(|&p| T::of(p)));
    }
    for (l, rows) in sad.iter_mut().enumerate() {
        for j in 0..m {
            for (i, &class) in classes.iter().enumerate() {
                let y = joint_one_hot(class, j, &space)?;
                let t = soften_sad(&y, prev[i].map(|r| r.sad_logits(&layout, l, j)), alpha, hp.tau_kd)?;
                rows.extend(t.probs.iter().map(|&p| T::of(p)));
            }
        }
    }
    Ok(BatchTargets {
        final_targets: Tensor::new(&[b, n], finals)?,
        sad_targets: sad.into_iter().map(|v| Tensor::new(&[m * b, k], v)).collect::<Result<_>>()?,
        softened,
    })
}

/// Loss nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub ce_resp: Var,
    pub ce_hier: Var,
    pub div: Var,
    pub feat: Var,
    pub total: Var,
}

/// Scalar values of [`LossParts`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub ce_resp: f64,
    pub ce_hier: f64,
    pub div: f64,
    pub feat: f64,
    pub total: f64,
}

impl LossValues {
    pub fn read<T: Real>(g: &Graph<T>, p: &LossParts) -> Self {
        let v = |x: Var| g.value(x).item().f64();
        LossValues { ce_resp: v(p.ce_resp), ce_hier: v(p.ce_hier), div: v(p.div), feat: v(p.feat), total: v(p.total) }
    }

    /// Label-supervised part.
    pub fn ls(&self) -> f64 {
        self.ce_resp + self.ce_hier
    }

    /// Itself-supervised part.
    pub fn is(&self) -> f64 {
        self.div + self.feat
    }

    pub fn recombine(&self, hp: &Hyperparams) -> f64 {
        (1.0 - hp.beta) * self.ce_resp + self.ce_hier + hp.beta * self.div + hp.gamma * self.feat
    }
}

pub fn loss_ce_resp<T: Real>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>, tau_ce: f64) -> Result<Var> {
    g.cross_entropy_soft(logits, targets, tau_ce)
}

/// Sum over stages of the soft cross-entropy on the `M·B` joint rows; the
/// row mean realizes the `1/M` average over transforms.
pub fn loss_ce_hier<T: Real>(g: &mut Graph<T>, sad_logits: &[Var], targets: &[Tensor<T>], tau_kd: f64) -> Result<Var> {
    if sad_logits.len() != targets.len() || sad_logits.is_empty() {
        return Err(Error::shape("loss_ce_hier", format!("{} heads, {} targets", sad_logits.len(), targets.len())));
    }
    let terms = sad_logits
        .iter()
        .zip(targets)
        .map(|(&q, t)| Ok((g.cross_entropy_soft(q, t, tau_kd)?, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    g.weighted_sum(&terms)
}

fn zero<T: Real>(g: &mut Graph<T>) -> Result<Var> {
    g.constant(Tensor::scalar(T::zero()))
}

/// `τ²·Σ_l KL` between each shallow head and the detached deepest head.
pub fn loss_div<T: Real>(
    g: &mut Graph<T>,
    shallow: &[Var],
    deep: Var,
    tau_kd: f64,
    direction: KlDirection,
) -> Result<Var> {
    if shallow.is_empty() {
        return zero(g);
    }
    let deep = g.detach(deep)?;
    let p_deep = g.softmax_t(deep, tau_kd)?;
    let mut terms = Vec::with_capacity(shallow.len());
    for &q in shallow {
        let p = g.softmax_t(q, tau_kd)?;
        let kl = match direction {
            KlDirection::ShallowDeep => g.kl_div(p, p_deep, KL_FLOOR)?,
            KlDirection::DeepShallow => g.kl_div(p_deep, p, KL_FLOOR)?,
        };
        terms.push((kl, tau_kd * tau_kd));
    }
    g.weighted_sum(&terms)
}

/// Mean over (stage, row) pairs of `‖F^l − F^o‖²` with `F^o` detached.
pub fn loss_feat<T: Real>(g: &mut Graph<T>, pooled: &[Var], final_pooled: Var) -> Result<Var> {
    if pooled.is_empty() {
        return zero(g);
    }
    let rows = g.shape(final_pooled).first().copied().unwrap_or(1);
    let target = g.detach(final_pooled)?;
    let w = 1.0 / (pooled.len() * rows) as f64;
    let terms = pooled
        .iter()
        .map(|&f| Ok((g.sum_squared_diff(f, target)?, w)))
        .collect::<Result<Vec<_>>>()?;
    g.weighted_sum(&terms)
}

pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    ce_resp: Var,
    ce_hier: Var,
    div: Var,
    feat: Var,
    hp: &Hyperparams,
) -> Result<LossParts> {
    let total = g.weighted_sum(&[(ce_resp, 1.0 - hp.beta), (ce_hier, 1.0), (div, hp.beta), (feat, hp.gamma)])?;
    Ok(LossParts { ce_resp, ce_hier, div, feat, total })
}

/// Values the shallow heads distil towards; always detached.
#[derive(Debug, Clone, Copy)]
pub struct TeacherSide {
    pub deep_logits: Var,
    pub final_pooled: Var,
}

/// All four terms and the total from network outputs. `sad_logits` and
/// `pooled` are per stage; the last stage is the teacher side.
pub fn lsskd_loss<T: Real>(
    g: &mut Graph<T>,
    final_logits: Var,
    sad_logits: &[Var],
    pooled: &[Var],
    final_pooled: Var,
    targets: &BatchTargets<T>,
    hp: &Hyperparams,
) -> Result<LossParts> {
    let Some(&deep_logits) = sad_logits.last() else {
        return Err(Error::Empty("auxiliary heads"));
    };
    lsskd_loss_with(g, final_logits, sad_logits, pooled, TeacherSide { deep_logits, final_pooled }, targets, hp)
}

/// [`lsskd_loss`] with an explicit teacher side, e.g. values frozen from
/// another pass.
pub fn lsskd_loss_with<T: Real>(
    g: &mut Graph<T>,
    final_logits: Var,
    sad_logits: &[Var],
    pooled: &[Var],
    teacher: TeacherSide,
    targets: &BatchTargets<T>,
    hp: &Hyperparams,
) -> Result<LossParts> {
    let l = sad_logits.len();
    if l == 0 || pooled.len() != l {
        return Err(Error::shape("lsskd loss", format!("{l} heads, {} pooled features", pooled.len())));
    }
    let a = loss_ce_resp(g, final_logits, &targets.final_targets, hp.tau_ce)?;
    let b = loss_ce_hier(g, sad_logits, &targets.sad_targets, hp.tau_kd)?;
    let c = loss_div(g, &sad_logits[..l - 1], teacher.deep_logits, hp.tau_kd, hp.kl_direction)?;
    let d = loss_feat(g, &pooled[..l - 1], teacher.final_pooled)?;
    total_loss(g, a, b, c, d, hp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Logits whose unit-temperature softmax is `p`.
    fn logits_for(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    #[test]
    fn soften_final_examples() {
        let y = [1.0, 0.0, 0.0];
        let prev = logits_for(&[0.5, 0.3, 0.2]);
        assert_eq!(soften_final(&y, Some(&prev), 0.0, 1.0).unwrap().probs, y);
        let full = soften_final(&y, Some(&prev), 1.0, 1.0).unwrap();
        assert!(close(&full.probs, &[0.5, 0.3, 0.2], 1e-15));
        let t = soften_final(&y, Some(&prev), 0.8, 1.0).unwrap();
        assert!(close(&t.probs, &[0.6, 0.24, 0.16], 1e-12));
        assert_eq!(t.provenance, Provenance::Softened);
        let first = soften_final::<f64>(&y, None, 0.8, 1.0).unwrap();
        assert_eq!((first.probs.as_slice(), first.provenance), (&y[..], Provenance::HardLabel));
        assert!(soften_final(&y, Some(&prev), 1.2, 1.0).is_err());
    }

    #[test]
    fn soften_sad_examples() {
        let t = soften_sad(&[1.0, 0.0], Some(&logits_for(&[0.25, 0.75])), 0.8, 1.0).unwrap();
        assert!(close(&t.probs, &[0.4, 0.6], 1e-12));
        let y = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(soften_sad(&y, Some(&[3.0f32, 1.0, 2.0, 0.0][..]), 0.0, 3.0).unwrap().probs, y);
        // temperature applies at read time
        let hot = soften_sad(&[1.0, 0.0], Some(&[2.0f64, 0.0][..]), 1.0, 2.0).unwrap();
        assert!(close(&hot.probs, &softmax_f64(&[1.0f64, 0.0], 1.0), 1e-15));
    }

    proptest! {
        #[test]
        fn soft_targets_are_distributions(
            logits in proptest::collection::vec(-30.0f64..30.0, 12),
            hot in 0usize..12,
            alpha in 0.0f64..=1.0,
            tau in 0.5f64..8.0,
        ) {
            let mut y = vec![0.0; 12];
            y[hot] = 1.0;
            let t = soften_sad(&y, Some(&logits), alpha, tau).unwrap();
            prop_assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(t.probs.iter().all(|&p| p >= 0.0));
        }
    }

    fn toy_logits(g: &mut Graph<f64>, rows: usize, values: &[f64]) -> Var {
        g.param(Tensor::from_f64(&[rows, values.len() / rows], values).unwrap()).unwrap()
    }

    #[test]
    fn ce_resp_examples() {
        let mut g = Graph::new();
        let z = toy_logits(&mut g, 1, &[0.0, 0.0]);
        let t = Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
        let l = loss_ce_resp(&mut g, z, &t, 1.0).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_hier_examples() {
        let mut g = Graph::new();
        let z = toy_logits(&mut g, 1, &[0.3, -1.0, 2.0]);
        let t = Tensor::from_f64(&[1, 3], &[0.2, 0.3, 0.5]).unwrap();
        let one = loss_ce_hier(&mut g, &[z], core::slice::from_ref(&t), 2.0).unwrap();
        let direct = g.cross_entropy_soft(z, &t, 2.0).unwrap();
        assert_eq!(g.value(one).item(), g.value(direct).item());

        // margin 50, one-hot at the argmax
        let big = toy_logits(&mut g, 2, &[50.0, 0.0, 0.0, 50.0]);
        let hot = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let sat = loss_ce_hier(&mut g, &[big, big], &[hot.clone(), hot], 1.0).unwrap();
        assert!(g.value(sat).item() < 2e-9);

        // L = 2 stages, M = 2 transforms (2 rows each), every term ln 2:
        // Σ_l (1/M) Σ_j ln 2 = 2 ln 2
        let flat = toy_logits(&mut g, 2, &[0.0; 4]);
        let half = Tensor::from_f64(&[2, 2], &[0.5; 4]).unwrap();
        let v = loss_ce_hier(&mut g, &[flat, flat], &[half.clone(), half], 1.0).unwrap();
        assert!((g.value(v).item() - 1.386294).abs() < 1e-6);

        assert!(loss_ce_hier(&mut g, &[flat], &[], 1.0).is_err());
    }

    #[test]
    fn div_examples() {
        let mut g = Graph::new();
        let a = toy_logits(&mut g, 1, &logits_for(&[0.5, 0.5]));
        let b = toy_logits(&mut g, 1, &logits_for(&[0.25, 0.75]));
        let v = loss_div(&mut g, &[a], b, 1.0, KlDirection::ShallowDeep).unwrap();
        assert!((g.value(v).item() - 0.143841).abs() < 1e-6);
        let same = loss_div(&mut g, &[b], b, 3.0, KlDirection::ShallowDeep).unwrap();
        assert!(g.value(same).item().abs() < 1e-12);

        let q = [0.7, -0.4, 1.3, 0.1];
        let d = [-0.2, 0.9, 0.4, -1.1];
        let q1 = toy_logits(&mut g, 1, &q);
        let d1 = toy_logits(&mut g, 1, &d);
        let q2 = toy_logits(&mut g, 1, &q.map(|v| 2.0 * v));
        let d2 = toy_logits(&mut g, 1, &d.map(|v| 2.0 * v));
        let base = loss_div(&mut g, &[q1], d1, 1.5, KlDirection::ShallowDeep).unwrap();
        let doubled = loss_div(&mut g, &[q2], d2, 3.0, KlDirection::ShallowDeep).unwrap();
        assert!((g.value(doubled).item() - 4.0 * g.value(base).item()).abs() < 1e-12);

        let rev = loss_div(&mut g, &[a], b, 1.0, KlDirection::DeepShallow).unwrap();
        let expect = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        assert!((g.value(rev).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn div_and_feat_do_not_reach_teacher_side() {
        let mut g = Graph::new();
        let shallow = toy_logits(&mut g, 2, &[0.1, 0.2, 0.3, -0.5, 0.0, 1.0]);
        let deep = toy_logits(&mut g, 2, &[1.0, -1.0, 0.5, 0.2, 0.2, 0.2]);
        let f = toy_logits(&mut g, 2, &[1.0, 2.0, 3.0, 4.0]);
        let fo = toy_logits(&mut g, 2, &[0.0, 1.0, 1.0, 1.0]);
        let c = loss_div(&mut g, &[shallow], deep, 3.0, KlDirection::ShallowDeep).unwrap();
        let d = loss_feat(&mut g, &[f], fo).unwrap();
        let both = g.weighted_sum(&[(c, 1.0), (d, 1.0)]).unwrap();
        let grads = g.backward(both).unwrap();
        assert!(grads.get(deep).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(fo).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(shallow).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn feat_examples() {
        let mut g = Graph::new();
        let f = toy_logits(&mut g, 1, &[1.0, 2.0]);
        let fo = toy_logits(&mut g, 1, &[1.0, 0.0]);
        let v = loss_feat(&mut g, &[f], fo).unwrap();
        assert_eq!(g.value(v).item(), 4.0);
        let eq = loss_feat(&mut g, &[fo, fo], fo).unwrap();
        assert_eq!(g.value(eq).item(), 0.0);
        let wide = toy_logits(&mut g, 1, &[1.0, 2.0, 3.0]);
        assert!(loss_feat(&mut g, &[wide], fo).is_err());
    }

    #[test]
    fn total_examples() {
        let mut g = Graph::<f64>::new();
        let one = g.constant(Tensor::scalar(1.0)).unwrap();
        let hp = Hyperparams::default();
        let p = total_loss(&mut g, one, one, one, one, &hp).unwrap();
        assert!((g.value(p.total).item() - 2.1).abs() < 1e-12);
        let vals = [1.7, 0.4, 2.2, 9.0].map(|v| g.constant(Tensor::scalar(v)).unwrap());
        let ls_only = Hyperparams { beta: 0.0, gamma: 0.0, ..hp };
        let p = total_loss(&mut g, vals[0], vals[1], vals[2], vals[3], &ls_only).unwrap();
        assert!((g.value(p.total).item() - 2.1).abs() < 1e-12);
        let v = LossValues::read(&g, &p);
        assert_eq!(v.recombine(&ls_only), v.ls());
    }

    fn layout() -> StoreLayout {
        StoreLayout { classes: 2, transforms: 2, stages: 2 }
    }

    fn record(v: f32) -> PredictionRecord<f32> {
        PredictionRecord { final_logits: vec![v, -v], sad: (0..16).map(|i| v + i as f32).collect() }
    }

    #[test]
    fn store_round_trip_and_contracts() {
        let mut s = PredictionStore::new(layout());
        assert!(s.fetch(0, 3).is_none());
        s.begin_epoch(1).unwrap();
        assert!(s.fetch(0, 3).is_none());
        s.update(1, 3, record(0.5)).unwrap();
        assert!(matches!(s.update(1, 3, record(0.1)), Err(Error::DuplicateUpdate { epoch: 1, sample_id: 3 })));
        assert!(s.update(2, 4, record(0.1)).is_err());
        assert!(s.update(1, 4, PredictionRecord { final_logits: vec![0.0], sad: vec![] }).is_err());
        s.begin_epoch(2).unwrap();
        assert_eq!(s.fetch(1, 3), Some(&record(0.5)));
        assert_eq!(s.fetch(1, 3).unwrap().sad_logits(&layout(), 1, 0), &[8.5, 9.5, 10.5, 11.5]);
        assert!(s.begin_epoch(4).is_err());
    }

    #[test]
    fn store_holds_one_record_per_sample_after_an_epoch() {
        let mut s = PredictionStore::new(layout());
        s.begin_epoch(1).unwrap();
        for id in 0..100 {
            s.update(1, id, record(id as f32)).unwrap();
        }
        assert_eq!(s.current().len(), 100);
        s.begin_epoch(2).unwrap();
        assert_eq!(s.previous_len(), 100);
        assert!(s.current().is_empty());
    }

    #[test]
    fn batch_targets_follow_provenance() {
        let hp = Hyperparams::default();
        let mut s = PredictionStore::new(layout());
        s.begin_epoch(1).unwrap();
        let t = batch_targets(&s, 1, &[0, 1], &[1, 0], 0.8, &hp).unwrap();
        assert_eq!(t.softened, 0);
        assert_eq!(t.final_targets.data(), &[0.0, 1.0, 1.0, 0.0]);
        // rows j·B + b; sample 0 has class 1 → joint index 1·M + j
        let s0 = &t.sad_targets[0];
        assert_eq!(s0.shape(), &[4, 4]);
        assert_eq!(&s0.data()[..4], &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(&s0.data()[8..12], &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(&s0.data()[12..16], &[0.0, 1.0, 0.0, 0.0]);

        s.update(1, 0, record(0.0)).unwrap();
        s.begin_epoch(2).unwrap();
        let t = batch_targets(&s, 2, &[0, 1], &[1, 0], 0.8, &hp).unwrap();
        assert_eq!(t.softened, 1);
        let prev = record(0.0);
        let want = soften_sad(&joint_one_hot(1, 1, &JointLabelSpace::new(2, 2).unwrap()).unwrap(),
            Some(prev.sad_logits(&layout(), 1, 1)), 0.8, hp.tau_kd).unwrap();
        let got = &t.sad_targets[1].data()[2 * 4..3 * 4];
        assert!(close(&got.iter().map(|&v| v as f64).collect::<Vec<_>>(), &want.probs, 1e-7));
        // sample 1 had no record
        assert_eq!(&t.final_targets.data()[2..], &[1.0, 0.0]);
    }

    #[test]
    fn alpha_warmup() {
        let hp = Hyperparams { alpha_warmup: true, ..Hyperparams::default() };
        assert!((hp.alpha_at(3, 30) - 0.08).abs() < 1e-15);
        assert_eq!(hp.alpha_at(30, 30), 0.8);
        assert_eq!(Hyperparams::default().alpha_at(1, 30), 0.8);
        assert!(Hyperparams { beta: 1.5, ..Hyperparams::default() }.validate().is_err());
        assert!(Hyperparams { tau_kd: 0.0, ..Hyperparams::default() }.validate().is_err());
    }
}
