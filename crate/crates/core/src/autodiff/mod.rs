//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order. Because inputs
//! always exist before the node that consumes them, creation order is a
//! topological order and [`Graph::backward`] simply walks the tape in
//! reverse, visiting each record once.

mod kernels;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result, Tensor};
use kernels::ConvGeom;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Test fixture: perturbs one backward rule so gradient checks can be
/// shown to fail.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BackwardFault {
    ReluScale(f64),
    ConvWeightScale(f64),
}

/// Batch statistics produced by [`Graph::norm_train`]; the variance is the
/// unbiased estimate used for running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    NormTrain { input: Var, scale: Var, shift: Var, xhat: Vec<T>, inv_std: Vec<T> },
    NormEval { input: Var, scale: Var, shift: Var, mean: Vec<T>, inv_std: Vec<T> },
    Relu { input: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    GlobalAvgPool { input: Var },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Softmax { input: Var, tau: T },
    CrossEntropy { logits: Var, target: Vec<T>, probs: Vec<T>, tau: T },
    KlDiv { p: Var, q: Var, floor: T },
    SumSquaredDiff { a: Var, b: Var },
    WeightedSum { terms: Vec<(Var, T)> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::NormTrain { .. } => "batchnorm2d",
            Op::NormEval { .. } => "batchnorm2d_eval",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::Softmax { .. } => "softmax_t",
            Op::CrossEntropy { .. } => "cross_entropy_soft",
            Op::KlDiv { .. } => "kl_div",
            Op::SumSquaredDiff { .. } => "sum_squared_diff",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, weight, bias, .. } | Op::Linear { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::NormTrain { input, scale, shift, .. } | Op::NormEval { input, scale, shift, .. } => {
                vec![*input, *scale, *shift]
            }
            Op::Relu { input }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::GlobalAvgPool { input }
            | Op::Softmax { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::KlDiv { p: a, q: b, .. } | Op::Add { a, b } | Op::SumSquaredDiff { a, b } => vec![*a, *b],
            Op::WeightedSum { terms } => terms.iter().map(|t| t.0).collect(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` for leaves that do not require gradients (constants,
    /// detached values) and for non-leaf nodes.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.leaves.get_mut(var.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<BackwardFault>,
}

fn shape_err(op: &'static str, detail: impl Into<alloc::string::String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), fault: None }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<BackwardFault>) -> Self {
        Graph { nodes: Vec::new(), fault }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let id = self.nodes.len();
        let inputs = op.inputs();
        if let Some(bad) = inputs.iter().find(|v| v.0 >= id) {
            return Err(Error::Cycle { node: id, input: bad.0 });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(id))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let var = self.push(value, Op::Leaf)?;
        self.nodes[var.0].requires_grad = requires_grad;
        Ok(var)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Same values, no gradient path back to `x`.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err(OP, format!("input {xs:?} and weight {ws:?} must be 4-D")));
        }
        if xs[1] != ws[1] {
            return Err(shape_err(OP, format!("input channels {} vs weight channels {}", xs[1], ws[1])));
        }
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be at least 1"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err(OP, format!("bias {:?} for {} output channels", self.shape(b), ws[0])));
            }
        }
        let (h, w) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if ws[2] > h || ws[3] > w {
            return Err(shape_err(OP, format!("kernel {}x{} exceeds padded input {h}x{w}", ws[2], ws[3])));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            h: xs[2],
            w: xs[3],
            out_c: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            oh: (h - ws[2]) / stride + 1,
            ow: (w - ws[3]) / stride + 1,
        };
        let out = kernels::conv_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(&[geom.batch, geom.out_c, geom.oh, geom.ow], out)?;
        self.push(value, Op::Conv2d { input, weight, bias, geom })
    }

    fn check_norm_params(&self, op: &'static str, input: Var, scale: Var, shift: Var) -> Result<[usize; 4]> {
        let xs = self.shape(input);
        if xs.len() != 4 {
            return Err(shape_err(op, format!("input {xs:?} must be 4-D")));
        }
        let c = xs[1];
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(shape_err(op, format!("scale/shift must be [{c}]")));
        }
        Ok([xs[0], xs[1], xs[2], xs[3]])
    }

    /// Batch normalization with batch statistics (training mode).
    pub fn norm_train(&mut self, input: Var, scale: Var, shift: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let [b, c, h, w] = self.check_norm_params("batchnorm2d", input, scale, shift)?;
        let plane = h * w;
        let n = b * plane;
        if n < 2 {
            return Err(Error::invalid("batchnorm2d", "batch statistics need at least two values per channel"));
        }
        let x = self.value(input).data();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let inv_n = T::of(1.0 / n as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut stats = BatchStats { mean: vec![T::zero(); c], var: vec![T::zero(); c] };
        for ch in 0..c {
            let planes = || (0..b).map(move |bi| (bi * c + ch) * plane);
            let mut sum = T::zero();
            for base in planes() {
                sum = x[base..base + plane].iter().fold(sum, |acc, &v| acc + v);
            }
            let mean = sum * inv_n;
            let mut sq = T::zero();
            for base in planes() {
                sq = x[base..base + plane].iter().fold(sq, |acc, &v| acc + (v - mean) * (v - mean));
            }
            let var = sq * inv_n;
            let istd = T::one() / (var + T::of(eps)).sqrt();
            for base in planes() {
                for i in base..base + plane {
                    let xh = (x[i] - mean) * istd;
                    xhat[i] = xh;
                    out[i] = xh * gamma[ch] + beta[ch];
                }
            }
            inv_std[ch] = istd;
            stats.mean[ch] = mean;
            stats.var[ch] = sq / T::of((n - 1) as f64);
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        let var = self.push(value, Op::NormTrain { input, scale, shift, xhat, inv_std })?;
        Ok((var, stats))
    }

    /// Batch normalization with fixed running statistics (evaluation mode).
    pub fn norm_eval(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let [b, c, h, w] = self.check_norm_params("batchnorm2d_eval", input, scale, shift)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batchnorm2d_eval", "running statistics length"));
        }
        let plane = h * w;
        let x = self.value(input).data();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for i in base..base + plane {
                    out[i] = (x[i] - running_mean[ch]) * inv_std[ch] * gamma[ch] + beta[ch];
                }
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        self.push(value, Op::NormEval { input, scale, shift, mean: running_mean.to_vec(), inv_std })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape(), data)?;
        self.push(value, Op::Relu { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(value, Op::Add { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let factor = T::of(factor);
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| v * factor).collect())?;
        self.push(value, Op::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(total), Op::Sum { input })
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("input {xs:?} must be 4-D")));
        }
        let plane = xs[2] * xs[3];
        let inv = T::of(1.0 / plane as f64);
        let data = self
            .value(input)
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().fold(T::zero(), |acc, &v| acc + v) * inv)
            .collect();
        let value = Tensor::new(&[xs[0], xs[1]], data)?;
        self.push(value, Op::GlobalAvgPool { input })
    }

    /// `x·W + b` with `x: [B, D]`, `W: [D, K]`, `b: [K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err("linear", format!("input {xs:?} weight {ws:?}")));
        }
        let (rows, d, k) = (xs[0], ws[0], ws[1]);
        let mut out = vec![T::zero(); rows * k];
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(shape_err("linear", format!("bias {:?} for {k} outputs", self.shape(b))));
            }
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(k) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(
            rows,
            d,
            k,
            T::one(),
            self.value(input).data(),
            (d as isize, 1),
            self.value(weight).data(),
            (k as isize, 1),
            T::one(),
            &mut out,
            (k as isize, 1),
        );
        let value = Tensor::new(&[rows, k], out)?;
        self.push(value, Op::Linear { input, weight, bias })
    }

    /// Softmax over the last axis of `z / tau`.
    pub fn softmax_t(&mut self, input: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::invalid("softmax_t", format!("temperature must be positive, got {tau}")));
        }
        let x = self.value(input);
        let k = *x.shape().last().unwrap_or(&1);
        let mut out = vec![T::zero(); x.numel()];
        kernels::softmax_rows(x.data(), k, T::of(tau), &mut out);
        let value = Tensor::new(x.shape(), out)?;
        self.push(value, Op::Softmax { input, tau: T::of(tau) })
    }

    /// Batch mean of `-Σ target · log softmax(logits / tau)`. The target is
    /// a constant; each row must be a distribution.
    pub fn cross_entropy_soft(&mut self, logits: Var, target: &Tensor<T>, tau: f64) -> Result<Var> {
        const OP: &str = "cross_entropy_soft";
        if !(tau > 0.0) {
            return Err(Error::invalid(OP, format!("temperature must be positive, got {tau}")));
        }
        let zs = self.shape(logits).to_vec();
        if zs.len() != 2 || target.shape() != zs.as_slice() {
            return Err(shape_err(OP, format!("logits {zs:?} target {:?}", target.shape())));
        }
        let k = zs[1];
        check_distribution_rows(target.data(), k, T::NORM_TOL.max(1e-6))?;
        let z = self.value(logits).data();
        let mut log_p = vec![T::zero(); z.len()];
        kernels::log_softmax_rows(z, k, T::of(tau), &mut log_p);
        let mut total = T::zero();
        for (lp, t) in log_p.chunks_exact(k).zip(target.data().chunks_exact(k)) {
            let row = lp.iter().zip(t).fold(T::zero(), |acc, (&l, &t)| acc - t * l);
            total = total + row;
        }
        let loss = total / T::of(zs[0] as f64);
        let probs = log_p.iter().map(|&l| l.exp()).collect();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, target: target.data().to_vec(), probs, tau: T::of(tau) },
        )
    }

    /// Row-mean of `Σ p · ln(p / q)` with both sides clamped at `floor`
    /// inside the logarithms.
    pub fn kl_div(&mut self, p: Var, q: Var, floor: f64) -> Result<Var> {
        const OP: &str = "kl_div";
        let ps = self.shape(p).to_vec();
        if ps.is_empty() || self.shape(q) != ps.as_slice() {
            return Err(shape_err(OP, format!("{ps:?} vs {:?}", self.shape(q))));
        }
        let k = *ps.last().unwrap();
        let pv = self.value(p).data();
        let qv = self.value(q).data();
        check_distribution_rows(pv, k, T::NORM_TOL)?;
        check_distribution_rows(qv, k, T::NORM_TOL)?;
        let floor_t = T::of(floor);
        let rows = pv.len() / k;
        let total = pv
            .iter()
            .zip(qv)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * (a.max(floor_t).ln() - b.max(floor_t).ln()));
        let loss = total / T::of(rows as f64);
        self.push(Tensor::scalar(loss), Op::KlDiv { p, q, floor: floor_t })
    }

    pub fn sum_squared_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("sum_squared_diff", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let total = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        self.push(Tensor::scalar(total), Op::SumSquaredDiff { a, b })
    }

    /// `Σ wᵢ · xᵢ` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Empty("weighted sum"));
        };
        let shape = self.shape(first).to_vec();
        let mut out = vec![T::zero(); self.value(first).numel()];
        let mut saved = Vec::with_capacity(terms.len());
        for &(var, w) in terms {
            if self.shape(var) != shape.as_slice() {
                return Err(shape_err("weighted_sum", format!("{:?} vs {shape:?}", self.shape(var))));
            }
            let w = T::of(w);
            for (o, &v) in out.iter_mut().zip(self.value(var).data()) {
                *o = *o + w * v;
            }
            saved.push((var, w));
        }
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::WeightedSum { terms: saved })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if let Some(bad) = node.op.inputs().iter().find(|v| v.0 >= id) {
                return Err(Error::Cycle { node: id, input: bad.0 });
            }
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    let g = grads[id].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite { op: "backward" });
                    }
                    leaves[id] = Some(Tensor::new(node.value.shape(), g)?);
                }
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        // Leaves created after the root cannot be reached; they still get zeros.
        for (id, node) in self.nodes.iter().enumerate().skip(n) {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                leaves[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { leaves })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! sink {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.nodes[v.0].value.numel();
                grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let need = (rg(*input), rg(*weight), bias.is_some_and(&rg));
                let mut cg = kernels::conv_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geom,
                    need,
                );
                if let Some(BackwardFault::ConvWeightScale(s)) = self.fault {
                    if let Some(dw) = cg.weight.as_mut() {
                        dw.iter_mut().for_each(|v| *v = *v * T::of(s));
                    }
                }
                if let Some(dx) = cg.input {
                    add_into(sink!(*input), &dx);
                }
                if let Some(dw) = cg.weight {
                    add_into(sink!(*weight), &dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    add_into(sink!(*b), &db);
                }
            }
            Op::NormTrain { input, scale, shift, xhat, inv_std } => {
                let xs = self.shape(*input);
                let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let n = T::of((b * plane) as f64);
                let gamma = self.value(*scale).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        for i in base..base + plane {
                            dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                            dbeta[ch] = dbeta[ch] + g[i];
                        }
                    }
                }
                if rg(*input) {
                    let dx = sink!(*input);
                    for ch in 0..c {
                        // dx = γ·istd/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
                        let k = gamma[ch] * inv_std[ch] / n;
                        for bi in 0..b {
                            let base = (bi * c + ch) * plane;
                            for i in base..base + plane {
                                dx[i] = dx[i] + k * (n * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                }
                if rg(*scale) {
                    add_into(sink!(*scale), &dgamma);
                }
                if rg(*shift) {
                    add_into(sink!(*shift), &dbeta);
                }
            }
            Op::NormEval { input, scale, shift, mean, inv_std } => {
                let xs = self.shape(*input);
                let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let x = self.value(*input).data();
                let gamma = self.value(*scale).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        for i in base..base + plane {
                            dgamma[ch] = dgamma[ch] + g[i] * (x[i] - mean[ch]) * inv_std[ch];
                            dbeta[ch] = dbeta[ch] + g[i];
                        }
                    }
                }
                if rg(*input) {
                    let dx = sink!(*input);
                    for bi in 0..b {
                        for ch in 0..c {
                            let k = gamma[ch] * inv_std[ch];
                            let base = (bi * c + ch) * plane;
                            for i in base..base + plane {
                                dx[i] = dx[i] + g[i] * k;
                            }
                        }
                    }
                }
                if rg(*scale) {
                    add_into(sink!(*scale), &dgamma);
                }
                if rg(*shift) {
                    add_into(sink!(*shift), &dbeta);
                }
            }
            Op::Relu { input } => {
                if rg(*input) {
                    let factor = match self.fault {
                        Some(BackwardFault::ReluScale(s)) => T::of(s),
                        _ => T::one(),
                    };
                    let x = self.value(*input).data();
                    let dx = sink!(*input);
                    for ((d, &xi), &gi) in dx.iter_mut().zip(x).zip(g) {
                        if xi > T::zero() {
                            *d = *d + gi * factor;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if rg(v) {
                        add_into(sink!(v), g);
                    }
                }
            }
            Op::Scale { input, factor } => {
                if rg(*input) {
                    let dx = sink!(*input);
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d = *d + gi * *factor;
                    }
                }
            }
            Op::Sum { input } => {
                if rg(*input) {
                    let dx = sink!(*input);
                    for d in dx.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                if rg(*input) {
                    let xs = self.shape(*input);
                    let plane = xs[2] * xs[3];
                    let inv = T::of(1.0 / plane as f64);
                    let dx = sink!(*input);
                    for (chunk, &gi) in dx.chunks_exact_mut(plane).zip(g) {
                        for d in chunk {
                            *d = *d + gi * inv;
                        }
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.shape(*input);
                let (rows, d) = (xs[0], xs[1]);
                let k = self.shape(*weight)[1];
                if rg(*input) {
                    let w = self.value(*weight).data();
                    // dX += dY · Wᵀ
                    T::gemm(rows, k, d, T::one(), g, (k as isize, 1), w, (1, k as isize), T::one(), sink!(*input), (d as isize, 1));
                }
                if rg(*weight) {
                    let x = self.value(*input).data();
                    // dW += Xᵀ · dY
                    T::gemm(d, rows, k, T::one(), x, (1, d as isize), g, (k as isize, 1), T::one(), sink!(*weight), (k as isize, 1));
                }
                if let Some(b) = bias.filter(|&b| rg(b)) {
                    let db = sink!(b);
                    for row in g.chunks_exact(k) {
                        add_into(db, row);
                    }
                }
            }
            Op::Softmax { input, tau } => {
                if rg(*input) {
                    let y = node.value.data();
                    let k = *node.value.shape().last().unwrap_or(&1);
                    let dx = sink!(*input);
                    for ((yr, gr), dr) in y.chunks_exact(k).zip(g.chunks_exact(k)).zip(dx.chunks_exact_mut(k)) {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = *d + yi * (gi - dot) / *tau;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, target, probs, tau } => {
                if rg(*logits) {
                    let zs = self.shape(*logits);
                    let (rows, k) = (zs[0], zs[1]);
                    let scale = g[0] / (T::of(rows as f64) * *tau);
                    let dz = sink!(*logits);
                    for ((pr, tr), dr) in probs.chunks_exact(k).zip(target.chunks_exact(k)).zip(dz.chunks_exact_mut(k)) {
                        let mass = tr.iter().fold(T::zero(), |acc, &t| acc + t);
                        for ((d, &p), &t) in dr.iter_mut().zip(pr).zip(tr) {
                            *d = *d + scale * (p * mass - t);
                        }
                    }
                }
            }
            Op::KlDiv { p, q, floor } => {
                let pv = self.value(*p).data();
                let qv = self.value(*q).data();
                let k = *self.shape(*p).last().unwrap();
                let scale = g[0] / T::of((pv.len() / k) as f64);
                if rg(*p) {
                    let dp = sink!(*p);
                    for ((d, &a), &b) in dp.iter_mut().zip(pv).zip(qv) {
                        let mut v = a.max(*floor).ln() - b.max(*floor).ln();
                        if a >= *floor {
                            v = v + T::one();
                        }
                        *d = *d + scale * v;
                    }
                }
                if rg(*q) {
                    let dq = sink!(*q);
                    for ((d, &a), &b) in dq.iter_mut().zip(pv).zip(qv) {
                        if b >= *floor {
                            *d = *d - scale * a / b;
                        }
                    }
                }
            }
            Op::SumSquaredDiff { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let two = T::of(2.0) * g[0];
                if rg(*a) {
                    let da = sink!(*a);
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d = *d + two * (x - y);
                    }
                }
                if rg(*b) {
                    let db = sink!(*b);
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d = *d - two * (x - y);
                    }
                }
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if rg(v) {
                        let dv = sink!(v);
                        for (d, &gi) in dv.iter_mut().zip(g) {
                            *d = *d + w * gi;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Rows of `values` (width `k`) must be non-negative and sum to one.
pub(crate) fn check_distribution_rows<T: Real>(values: &[T], k: usize, tol: f64) -> Result<()> {
    for (row, chunk) in values.chunks_exact(k).enumerate() {
        let sum: f64 = chunk.iter().map(|v| v.f64()).sum();
        if (sum - 1.0).abs() > tol || chunk.iter().any(|&v| v < T::zero()) {
            return Err(Error::NotNormalized { row, sum });
        }
    }
    Ok(())
}
