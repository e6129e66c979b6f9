//! Multi-stage residual student with per-stage auxiliary branches.

mod params;

pub use params::{Param, ParamId, ParamKind, ParamStore, RUNNING_MOMENTUM};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{BatchStats, BackwardFault, Gradients, Graph, Var};
use crate::{Error, Real, Result, Tensor};

/// Normalization epsilon.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    /// `[C, H, W]`; H must equal W so every rotation keeps the shape.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub transforms: usize,
    /// One entry per stage; its length is the stage count L.
    pub channels: Vec<usize>,
    pub blocks: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("backbone config", d));
        if self.channels.len() < 2 {
            return bad(format!("need at least 2 stages, got {}", self.channels.len()));
        }
        if self.channels.contains(&0) || self.blocks == 0 {
            return bad(format!("channels {:?}, blocks {}", self.channels, self.blocks));
        }
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || h != w {
            return bad(format!("input shape {:?} must be non-empty and square", self.input_shape));
        }
        if self.classes < 2 || self.transforms == 0 || self.transforms > crate::ss_task::ROTATIONS {
            return bad(format!("N={}, M={}", self.classes, self.transforms));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn joint_size(&self) -> usize {
        self.classes * self.transforms
    }

    /// Pooled feature dimension `d`.
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are recorded for later update.
    Train,
    /// Running statistics; nothing is recorded.
    Eval,
}

/// One forward/backward pass: the tape plus the parameter bindings on it.
pub struct Session<'p, T: Real> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    learn: bool,
    stats: Vec<(ParamId, ParamId, BatchStats<T>)>,
    record_stats: bool,
}

impl<'p, T: Real> Session<'p, T> {
    /// Parameters are bound as gradient leaves in `Train` mode and as
    /// constants in `Eval` mode.
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self::with_fault(params, mode, None)
    }

    #[doc(hidden)]
    pub fn with_fault(params: &'p ParamStore<T>, mode: Mode, fault: Option<BackwardFault>) -> Self {
        Session {
            graph: Graph::with_fault(fault),
            params,
            bound: vec![None; params.len()],
            mode,
            learn: mode == Mode::Train,
            stats: Vec::new(),
            record_stats: true,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Toggle whether subsequent train-mode normalizations feed running
    /// averages.
    pub fn set_record_stats(&mut self, on: bool) {
        self.record_stats = on;
    }

    pub fn record_stats(&self) -> bool {
        self.record_stats
    }

    pub fn input(&mut self, x: Tensor<T>) -> Result<Var> {
        self.graph.constant(x)
    }

    pub fn bind(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id] {
            return Ok(v);
        }
        let p = self.params.get(id);
        let v = if self.learn && p.kind.trainable() {
            self.graph.param(p.value.clone())?
        } else {
            self.graph.constant(p.value.clone())?
        };
        self.bound[id] = Some(v);
        Ok(v)
    }

    /// Parameter gradients indexed by [`ParamId`]; unbound or non-trainable
    /// entries are `None`.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect()
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id]
    }

    /// Running-average updates recorded during train-mode normalization.
    pub fn into_running_updates(self) -> RunningUpdates<T> {
        RunningUpdates(self.stats)
    }
}

/// Deferred running-statistics updates from one [`Session`].
pub struct RunningUpdates<T>(Vec<(ParamId, ParamId, BatchStats<T>)>);

impl<T: Real> RunningUpdates<T> {
    pub fn apply(&self, params: &mut ParamStore<T>) {
        for (mean, var, stats) in &self.0 {
            params.apply_running(*mean, *var, stats);
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    scale: ParamId,
    shift: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    projection: Option<(Conv, Norm)>,
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
struct Head {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Branch {
    stages: Vec<Stage>,
    head: Head,
}

fn conv<T: Real>(store: &mut ParamStore<T>, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize) -> Conv {
    let weight = store.push(format!("{name}.weight"), ParamKind::ConvWeight, &[out_c, in_c, k, k]);
    Conv { weight, stride, pad: k / 2 }
}

fn norm<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Norm {
    Norm {
        scale: store.push(format!("{name}.scale"), ParamKind::NormScale, &[c]),
        shift: store.push(format!("{name}.shift"), ParamKind::NormShift, &[c]),
        mean: store.push(format!("{name}.running_mean"), ParamKind::RunningMean, &[c]),
        var: store.push(format!("{name}.running_var"), ParamKind::RunningVar, &[c]),
    }
}

fn stage<T: Real>(store: &mut ParamStore<T>, name: &str, in_c: usize, out_c: usize, stride: usize, blocks: usize) -> Stage {
    let blocks = (0..blocks)
        .map(|b| {
            let p = format!("{name}.block{b}");
            let (cin, s) = if b == 0 { (in_c, stride) } else { (out_c, 1) };
            Block {
                conv1: conv(store, &format!("{p}.conv1"), cin, out_c, 3, s),
                norm1: norm(store, &format!("{p}.norm1"), out_c),
                conv2: conv(store, &format!("{p}.conv2"), out_c, out_c, 3, 1),
                norm2: norm(store, &format!("{p}.norm2"), out_c),
                projection: (s != 1 || cin != out_c)
                    .then(|| (conv(store, &format!("{p}.proj"), cin, out_c, 1, s), norm(store, &format!("{p}.proj_norm"), out_c))),
            }
        })
        .collect();
    Stage { blocks }
}

fn head<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, k: usize) -> Head {
    Head {
        weight: store.push(format!("{name}.weight"), ParamKind::LinearWeight, &[d, k]),
        bias: store.push(format!("{name}.bias"), ParamKind::LinearBias, &[k]),
    }
}

fn stage_stride(l: usize) -> usize {
    if l == 0 { 1 } else { 2 }
}

fn conv_forward<T: Real>(s: &mut Session<T>, c: &Conv, x: Var) -> Result<Var> {
    let w = s.bind(c.weight)?;
    s.graph.conv2d(x, w, None, c.stride, c.pad)
}

fn norm_forward<T: Real>(s: &mut Session<T>, n: &Norm, x: Var) -> Result<Var> {
    let scale = s.bind(n.scale)?;
    let shift = s.bind(n.shift)?;
    match s.mode {
        Mode::Train => {
            let (y, stats) = s.graph.norm_train(x, scale, shift, NORM_EPS)?;
            if s.record_stats {
                s.stats.push((n.mean, n.var, stats));
            }
            Ok(y)
        }
        Mode::Eval => {
            let (mean, var) = (s.params.get(n.mean).value.data(), s.params.get(n.var).value.data());
            s.graph.norm_eval(x, scale, shift, mean, var, NORM_EPS)
        }
    }
}

fn block_forward<T: Real>(s: &mut Session<T>, b: &Block, x: Var) -> Result<Var> {
    let h = conv_forward(s, &b.conv1, x)?;
    let h = norm_forward(s, &b.norm1, h)?;
    let h = s.graph.relu(h)?;
    let h = conv_forward(s, &b.conv2, h)?;
    let h = norm_forward(s, &b.norm2, h)?;
    let shortcut = match &b.projection {
        Some((c, n)) => {
            let p = conv_forward(s, c, x)?;
            norm_forward(s, n, p)?
        }
        None => x,
    };
    let y = s.graph.add(h, shortcut)?;
    s.graph.relu(y)
}

fn stage_forward<T: Real>(s: &mut Session<T>, st: &Stage, mut x: Var) -> Result<Var> {
    for b in &st.blocks {
        x = block_forward(s, b, x)?;
    }
    Ok(x)
}

fn head_forward<T: Real>(s: &mut Session<T>, h: &Head, pooled: Var) -> Result<Var> {
    let w = s.bind(h.weight)?;
    let b = s.bind(h.bias)?;
    s.graph.linear(pooled, w, Some(b))
}

#[derive(Debug, Clone)]
struct Backbone {
    stem: (Conv, Norm),
    stages: Vec<Stage>,
    head: Head,
}

impl Backbone {
    fn build<T: Real>(cfg: &BackboneConfig, store: &mut ParamStore<T>) -> Self {
        let c0 = cfg.channels[0];
        let stem = (conv(store, "backbone.stem.conv", cfg.input_shape[0], c0, 3, 1), norm(store, "backbone.stem.norm", c0));
        let mut in_c = c0;
        let stages = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let st = stage(store, &format!("backbone.stage{}", l + 1), in_c, c, stage_stride(l), cfg.blocks);
                in_c = c;
                st
            })
            .collect();
        let head = head(store, "backbone.head", cfg.feature_dim(), cfg.classes);
        Backbone { stem, stages, head }
    }

    fn check_input<T: Real>(cfg: &BackboneConfig, s: &Session<T>, x: Var) -> Result<usize> {
        let shape = s.graph.shape(x);
        if shape.len() != 4 || shape[1..] != cfg.input_shape {
            return Err(Error::shape("network input", format!("expected [B, {:?}], got {shape:?}", cfg.input_shape)));
        }
        Ok(shape[0])
    }

    fn stage_outputs<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Vec<Var>> {
        let h = conv_forward(s, &self.stem.0, x)?;
        let h = norm_forward(s, &self.stem.1, h)?;
        let mut h = s.graph.relu(h)?;
        let mut out = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            h = stage_forward(s, st, h)?;
            out.push(h);
        }
        Ok(out)
    }

    fn logits<T: Real>(&self, s: &mut Session<T>, last: Var) -> Result<(Var, Var)> {
        let pooled = s.graph.global_avg_pool(last)?;
        Ok((head_forward(s, &self.head, pooled)?, pooled))
    }
}

/// Output of [`StudentNetwork::forward_main`].
#[derive(Debug, Clone)]
pub struct MainForward {
    pub logits: Var,
    pub stage_features: Vec<Var>,
}

/// Output of [`StudentNetwork::forward_aux`].
#[derive(Debug, Clone)]
pub struct AuxForward {
    /// Per stage, `[M·B, K]`.
    pub sad_logits: Vec<Var>,
    /// Per stage, `[M·B, d]`; the last entry is `final_pooled`.
    pub pooled: Vec<Var>,
    /// The backbone's own pooled feature on the transformed batch.
    pub final_pooled: Var,
}

/// Anything that maps a `[B, C, H, W]` batch to final `[B, N]` logits.
pub trait Classifier<T: Real> {
    fn config(&self) -> &BackboneConfig;
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

#[derive(Debug, Clone)]
pub struct StudentNetwork<T: Real> {
    config: BackboneConfig,
    params: ParamStore<T>,
    backbone: Backbone,
    branches: Vec<Branch>,
    backbone_len: usize,
}

impl<T: Real> StudentNetwork<T> {
    /// Build with unit norm scales and all other values zero; call
    /// [`Self::init_parameters`] for a trainable start.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let backbone = Backbone::build(&config, &mut params);
        let backbone_len = params.len();
        let l_count = config.stages();
        let k = config.joint_size();
        let d = config.feature_dim();
        let branches = (1..=l_count)
            .map(|l| {
                let stages = (l..l_count)
                    .map(|next| {
                        let name = format!("branch{l}.stage{}", next + 1);
                        stage(&mut params, &name, config.channels[next - 1], config.channels[next], 2, config.blocks)
                    })
                    .collect();
                Branch { stages, head: head(&mut params, &format!("branch{l}.head"), d, k) }
            })
            .collect();
        Ok(StudentNetwork { config, params, backbone, branches, backbone_len })
    }

    pub fn init_parameters(&mut self, seed: u64) {
        self.params.init(seed);
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Whether a parameter belongs to the inference subgraph.
    pub fn is_backbone(&self, id: ParamId) -> bool {
        id < self.backbone_len
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn session(&self, mode: Mode) -> Session<'_, T> {
        Session::new(&self.params, mode)
    }

    pub fn forward_main(&self, s: &mut Session<T>, x: Var) -> Result<MainForward> {
        Backbone::check_input(&self.config, s, x)?;
        let stage_features = self.backbone.stage_outputs(s, x)?;
        let (logits, _) = self.backbone.logits(s, *stage_features.last().expect("L >= 2"))?;
        Ok(MainForward { logits, stage_features })
    }

    /// Auxiliary pass over a transform-major expanded batch.
    pub fn forward_aux(&self, s: &mut Session<T>, x: Var) -> Result<AuxForward> {
        let rows = Backbone::check_input(&self.config, s, x)?;
        if rows % self.config.transforms != 0 {
            return Err(Error::shape(
                "forward_aux",
                format!("{rows} rows is not a multiple of M={}", self.config.transforms),
            ));
        }
        let features = self.backbone.stage_outputs(s, x)?;
        let l_count = self.config.stages();
        let final_pooled = s.graph.global_avg_pool(features[l_count - 1])?;
        let mut sad_logits = Vec::with_capacity(l_count);
        let mut pooled = Vec::with_capacity(l_count);
        for (l, branch) in self.branches.iter().enumerate() {
            let f = if l + 1 == l_count {
                final_pooled
            } else {
                let mut h = features[l];
                for st in &branch.stages {
                    h = stage_forward(s, st, h)?;
                }
                s.graph.global_avg_pool(h)?
            };
            sad_logits.push(head_forward(s, &branch.head, f)?);
            pooled.push(f);
        }
        Ok(AuxForward { sad_logits, pooled, final_pooled })
    }

    /// Ids of one branch's classifier weight and bias.
    pub fn branch_head(&self, stage: usize) -> (ParamId, ParamId) {
        let h = &self.branches[stage].head;
        (h.weight, h.bias)
    }

    pub fn stem_conv(&self) -> ParamId {
        self.backbone.stem.0.weight
    }

    /// Inference network holding the backbone and final classifier only.
    pub fn strip_export(&self) -> InferenceNetwork<T> {
        InferenceNetwork {
            config: self.config.clone(),
            params: self.params.truncated(self.backbone_len),
            backbone: self.backbone.clone(),
        }
    }
}

impl<T: Real> Classifier<T> for StudentNetwork<T> {
    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = self.session(Mode::Eval);
        let xv = s.input(x.clone())?;
        let out = self.forward_main(&mut s, xv)?;
        Ok(s.graph.value(out.logits).clone())
    }
}

/// The stripped network: parameters of the backbone and final head only.
#[derive(Debug, Clone)]
pub struct InferenceNetwork<T: Real> {
    config: BackboneConfig,
    params: ParamStore<T>,
    backbone: Backbone,
}

impl<T: Real> InferenceNetwork<T> {
    /// An inference network with the layout of `config`, values loaded by
    /// name; the records must be exactly the backbone set.
    pub fn from_records<'a, I>(config: BackboneConfig, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, Tensor<T>)>,
    {
        config.validate()?;
        let mut params = ParamStore::new();
        let backbone = Backbone::build(&config, &mut params);
        params.assign(records)?;
        Ok(InferenceNetwork { config, params, backbone })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Auxiliary queries need the joint-space heads, which were removed.
    pub fn sad_logits(&self, _x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Err(Error::Stripped)
    }
}

impl<T: Real> Classifier<T> for InferenceNetwork<T> {
    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::new(&self.params, Mode::Eval);
        let xv = s.input(x.clone())?;
        Backbone::check_input(&self.config, &s, xv)?;
        let feats = self.backbone.stage_outputs(&mut s, xv)?;
        let (logits, _) = self.backbone.logits(&mut s, *feats.last().expect("L >= 2"))?;
        Ok(s.graph.value(logits).clone())
    }
}
