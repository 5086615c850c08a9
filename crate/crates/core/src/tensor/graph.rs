use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{HseError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Tanh(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    ToLocations(Var),
    FromLocations(Var),
    RepeatRows {
        x: Var,
        reps: usize,
    },
    ConcatCols(Var, Var),
    GatherCols {
        x: Var,
        index: Vec<usize>,
    },
    SpatialSoftmax(Var),
    AttendAggregate {
        features: Var,
        weights: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Average(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
    KlDivergence {
        logits: Var,
        temperature: f64,
        probs: Vec<f64>,
        target_probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of primitive operations. Every method evaluates
/// its op immediately and appends it, so the node list is always a valid
/// topological order; [`Graph::backward`] walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a fresh constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient left by the last [`Graph::backward`]; zeros for a
    /// differentiable node the seed did not reach, `None` for constants.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = self.nodes.get(v.0)?;
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).ok(),
            None if self.grads.is_empty() => None,
            None => Some(Tensor::zeros(&shape)),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(w).to_vec();
        let bs = self.shape_of(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(HseError::shape(
                "conv2d",
                format!("input {xs:?} and weight {ws:?} must both be rank 4"),
            ));
        }
        let (batch, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, wc_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc_in != c_in {
            return Err(HseError::shape(
                "conv2d",
                format!("input has {c_in} channels, weight expects {wc_in}"),
            ));
        }
        if kh != kw {
            return Err(HseError::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        if bs != [c_out] {
            return Err(HseError::shape(
                "conv2d",
                format!("bias {bs:?} does not match {c_out} output channels"),
            ));
        }
        if stride == 0 {
            return Err(HseError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(HseError::shape(
                "conv2d",
                format!("kernel {kh} exceeds padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            k: kh,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (wd + 2 * pad - kw) / stride + 1,
        };
        let needs = self.any_grad(&[x, w, b]);
        let keep_cols = self.nodes[w.0].requires_grad;
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
            keep_cols,
        );
        let value = Tensor::new(vec![batch, c_out, geom.h_out, geom.w_out], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, needs))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(w).to_vec();
        let bs = self.shape_of(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(HseError::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let out = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            xs[0],
            xs[1],
            ws[0],
        );
        let value = Tensor::new(vec![xs[0], ws[0]], out)?;
        let needs = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.nodes[x.0].requires_grad;
        self.push(value, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(HseError::shape("max_pool2", format!("input {s:?}")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        let needs = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }, needs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 4 {
            return Err(HseError::shape("global_avg_pool", format!("input {s:?}")));
        }
        let area = s[2] * s[3];
        let data = self
            .value(x)
            .data()
            .chunks_exact(area)
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        let needs = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::GlobalAvgPool(x), needs))
    }

    /// `[N, C, H, W]` → `[N·H·W, C]`, one row per spatial location.
    pub fn to_locations(&mut self, x: Var) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 4 {
            return Err(HseError::shape("to_locations", format!("input {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    data[(b * hw + p) * c + ch] = src[(b * c + ch) * hw + p];
                }
            }
        }
        let value = Tensor::new(vec![n * hw, c], data)?;
        let needs = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::ToLocations(x), needs))
    }

    /// Inverse of [`Graph::to_locations`] for the given `[N, C, H, W]`.
    pub fn from_locations(&mut self, x: Var, dims: [usize; 4]) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        let [n, c, h, w] = dims;
        let hw = h * w;
        if s != [n * hw, c] {
            return Err(HseError::shape("from_locations", format!("{s:?} -> {dims:?}")));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    data[(b * c + ch) * hw + p] = src[(b * hw + p) * c + ch];
                }
            }
        }
        let value = Tensor::new(dims.to_vec(), data)?;
        let needs = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::FromLocations(x), needs))
    }

    /// Repeats each row of a `[N, D]` matrix `reps` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, reps: usize) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 2 || reps == 0 {
            return Err(HseError::shape("repeat_rows", format!("input {s:?} x{reps}")));
        }
        let mut data = Vec::with_capacity(s[0] * reps * s[1]);
        for row in self.value(x).data().chunks_exact(s[1]) {
            for _ in 0..reps {
                data.extend_from_slice(row);
            }
        }
        let value = Tensor::new(vec![s[0] * reps, s[1]], data)?;
        let needs = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::RepeatRows { x, reps }, needs))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(HseError::shape("concat_cols", format!("{sa:?} with {sb:?}")));
        }
        let mut data = Vec::with_capacity(sa[0] * (sa[1] + sb[1]));
        for (ra, rb) in self
            .value(a)
            .data()
            .chunks_exact(sa[1])
            .zip(self.value(b).data().chunks_exact(sb[1]))
        {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let value = Tensor::new(vec![sa[0], sa[1] + sb[1]], data)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::ConcatCols(a, b), needs))
    }

    /// `out[r, j] = x[r, index[j]]`.
    pub fn gather_cols(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 2 || index.is_empty() {
            return Err(HseError::shape("gather_cols", format!("input {s:?}")));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[1]) {
            return Err(HseError::OutOfRange {
                what: "gather_cols column",
                index: bad,
                size: s[1],
            });
        }
        let mut data = Vec::with_capacity(s[0] * index.len());
        for row in self.value(x).data().chunks_exact(s[1]) {
            data.extend(index.iter().map(|&i| row[i]));
        }
        let value = Tensor::new(vec![s[0], index.len()], data)?;
        let needs = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::GatherCols { x, index }, needs))
    }

    /// Softmax over the spatial positions of every `(sample, channel)` plane.
    pub fn spatial_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        if s.len() != 4 {
            return Err(HseError::shape("spatial_softmax", format!("input {s:?}")));
        }
        let area = s[2] * s[3];
        let src = self.value(x);
        src.check_finite("spatial_softmax input")?;
        let mut data = vec![0.0; src.len()];
        for (o, plane) in data.chunks_exact_mut(area).zip(src.data().chunks_exact(area)) {
            kernels::softmax_into(plane, 1.0, o);
        }
        let value = Tensor::new(s, data)?;
        let needs = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::SpatialSoftmax(x), needs))
    }

    /// `out[n, c] = Σ_{h,w} weights[n,c,h,w] · features[n,c,h,w]`.
    pub fn attend_aggregate(&mut self, features: Var, weights: Var) -> Result<Var> {
        let sf = self.shape_of(features).to_vec();
        let sw = self.shape_of(weights).to_vec();
        if sf.len() != 4 || sf != sw {
            return Err(HseError::shape("attend_aggregate", format!("{sf:?} vs {sw:?}")));
        }
        let area = sf[2] * sf[3];
        let data = self
            .value(features)
            .data()
            .chunks_exact(area)
            .zip(self.value(weights).data().chunks_exact(area))
            .map(|(f, e)| f.iter().zip(e).map(|(a, b)| a * b).sum())
            .collect();
        let value = Tensor::new(vec![sf[0], sf[1]], data)?;
        let needs = self.any_grad(&[features, weights]);
        Ok(self.push(value, Op::AttendAggregate { features, weights }, needs))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(HseError::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    /// Elementwise arithmetic mean of same-shaped inputs: `(Σ x_k) / K`.
    pub fn average(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| HseError::shape("average", "no inputs"))?;
        let shape = self.shape_of(first).to_vec();
        let mut acc = vec![0.0; self.value(first).len()];
        for &v in inputs {
            if self.shape_of(v) != shape.as_slice() {
                return Err(HseError::shape(
                    "average",
                    format!("{:?} vs {shape:?}", self.shape_of(v)),
                ));
            }
            for (a, x) in acc.iter_mut().zip(self.value(v).data()) {
                *a += x;
            }
        }
        let k = inputs.len() as f64;
        for a in &mut acc {
            *a /= k;
        }
        let value = Tensor::new(shape, acc)?;
        let needs = self.any_grad(inputs);
        Ok(self.push(value, Op::Average(inputs.to_vec()), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let needs = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    /// Per-row `−log softmax(logits)[target]`, shape `[N]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape_of(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(HseError::shape(
                "cross_entropy",
                format!("logits {s:?} with {} targets", targets.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(HseError::OutOfRange {
                what: "cross_entropy class",
                index: bad,
                size: k,
            });
        }
        let src = self.value(logits);
        src.check_finite("cross_entropy logits")?;
        let mut probs = vec![0.0; src.len()];
        let mut out = Vec::with_capacity(s[0]);
        for ((row, p), &t) in src.data().chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(targets) {
            kernels::softmax_into(row, 1.0, p);
            out.push(kernels::log_sum_exp(row, 1.0) - row[t]);
        }
        let value = Tensor::new(vec![s[0]], out)?;
        let needs = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Per-row `KL(softmax(target/T) ‖ softmax(logits/T))`, shape `[N]`.
    /// The target side is never differentiated.
    pub fn kl_divergence(&mut self, target: Var, logits: Var, temperature: f64) -> Result<Var> {
        if temperature.is_nan() || temperature <= 0.0 {
            return Err(HseError::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let s = self.shape_of(logits).to_vec();
        let st = self.shape_of(target).to_vec();
        if s.len() != 2 || s != st {
            return Err(HseError::shape("kl_divergence", format!("target {st:?} vs logits {s:?}")));
        }
        let k = s[1];
        self.value(logits).check_finite("kl_divergence logits")?;
        self.value(target).check_finite("kl_divergence target")?;
        let mut probs = vec![0.0; s[0] * k];
        let mut target_probs = vec![0.0; s[0] * k];
        let mut out = Vec::with_capacity(s[0]);
        let (lv, tv) = (self.value(logits).data(), self.value(target).data());
        for r in 0..s[0] {
            let (row, trow) = (&lv[r * k..(r + 1) * k], &tv[r * k..(r + 1) * k]);
            kernels::softmax_into(row, temperature, &mut probs[r * k..(r + 1) * k]);
            kernels::softmax_into(trow, temperature, &mut target_probs[r * k..(r + 1) * k]);
            let (lse, tlse) = (
                kernels::log_sum_exp(row, temperature),
                kernels::log_sum_exp(trow, temperature),
            );
            let mut kl = 0.0;
            for c in 0..k {
                let pt = target_probs[r * k + c];
                if pt > 0.0 {
                    let log_pt = trow[c] / temperature - tlse;
                    let log_p = row[c] / temperature - lse;
                    kl += pt * (log_pt - log_p);
                }
            }
            out.push(kl.max(0.0));
        }
        let value = Tensor::new(vec![s[0]], out)?;
        let needs = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            value,
            Op::KlDivergence {
                logits,
                temperature,
                probs,
                target_probs,
            },
            needs,
        ))
    }

    /// Reverse sweep from `output` with upstream gradient `seed`. Leaves
    /// the gradient of `Σ seed ⊙ output` on every differentiable node;
    /// contributions from fan-out are summed. Each call starts from zero.
    pub fn backward(&mut self, output: Var, seed: &Tensor) -> Result<()> {
        let node = self.nodes.get(output.0).ok_or_else(|| {
            HseError::Graph(format!("backward before forward: node {} not recorded", output.0))
        })?;
        if node.value.shape() != seed.shape() {
            return Err(HseError::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if node.requires_grad {
            grads[output.0] = Some(seed.data().to_vec());
        }
        for id in (0..=output.0).rev() {
            let Some(up) = grads[id].take() else { continue };
            self.backprop_node(id, &up, &mut grads);
            grads[id] = Some(up);
        }
        self.grads = grads;
        Ok(())
    }

    /// Convenience for scalar outputs: seed of one.
    pub fn backward_scalar(&mut self, output: Var) -> Result<()> {
        let seed = Tensor::ones(self.value(output).shape());
        self.backward(output, &seed)
    }

    fn backprop_node(&self, id: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Returns a zero-initialized accumulator for `v`, or an empty slice
        // when `v` does not need a gradient.
        fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
            let n = nodes[v.0].value.len();
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let mut dx = if wants(*x) { std::mem::take(slot(nodes, grads, *x)) } else { Vec::new() };
                let mut dw = if wants(*w) { std::mem::take(slot(nodes, grads, *w)) } else { Vec::new() };
                let mut db = if wants(*b) { std::mem::take(slot(nodes, grads, *b)) } else { Vec::new() };
                kernels::conv2d_backward(val(*x), val(*w), cols, up, geom, &mut dx, &mut dw, &mut db);
                for (v, g) in [(*x, dx), (*w, dw), (*b, db)] {
                    if wants(v) {
                        grads[v.0] = Some(g);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (rows, d_in, d_out) = (xs[0], xs[1], nodes[w.0].value.shape()[0]);
                let mut dx = if wants(*x) { std::mem::take(slot(nodes, grads, *x)) } else { Vec::new() };
                let mut dw = if wants(*w) { std::mem::take(slot(nodes, grads, *w)) } else { Vec::new() };
                let mut db = if wants(*b) { std::mem::take(slot(nodes, grads, *b)) } else { Vec::new() };
                kernels::linear_backward(val(*x), val(*w), up, rows, d_in, d_out, &mut dx, &mut dw, &mut db);
                for (v, g) in [(*x, dx), (*w, dw), (*b, db)] {
                    if wants(v) {
                        grads[v.0] = Some(g);
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    let g = slot(nodes, grads, *x);
                    for ((acc, &u), &xi) in g.iter_mut().zip(up).zip(xv) {
                        // Subgradient 0 at the origin.
                        if xi > 0.0 {
                            *acc += u;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if wants(*x) {
                    let y = nodes[id].value.data();
                    let g = slot(nodes, grads, *x);
                    for ((acc, &u), &yi) in g.iter_mut().zip(up).zip(y) {
                        *acc += u * (1.0 - yi * yi);
                    }
                }
            }
            Op::Scale(x, k) => {
                if wants(*x) {
                    let g = slot(nodes, grads, *x);
                    for (acc, &u) in g.iter_mut().zip(up) {
                        *acc += u * k;
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if wants(*x) {
                    let g = slot(nodes, grads, *x);
                    for (&i, &u) in argmax.iter().zip(up) {
                        g[i] += u;
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if wants(*x) {
                    let s = nodes[x.0].value.shape();
                    let area = s[2] * s[3];
                    let inv = 1.0 / area as f64;
                    let g = slot(nodes, grads, *x);
                    for (plane, &u) in g.chunks_exact_mut(area).zip(up) {
                        for acc in plane {
                            *acc += u * inv;
                        }
                    }
                }
            }
            Op::ToLocations(x) => {
                if wants(*x) {
                    let s = nodes[x.0].value.shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let g = slot(nodes, grads, *x);
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                g[(b * c + ch) * hw + p] += up[(b * hw + p) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::FromLocations(x) => {
                if wants(*x) {
                    let s = nodes[id].value.shape();
                    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let g = slot(nodes, grads, *x);
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                g[(b * hw + p) * c + ch] += up[(b * c + ch) * hw + p];
                            }
                        }
                    }
                }
            }
            Op::RepeatRows { x, reps } => {
                if wants(*x) {
                    let d = nodes[x.0].value.shape()[1];
                    let g = slot(nodes, grads, *x);
                    for (r, row) in up.chunks_exact(d).enumerate() {
                        let dst = &mut g[(r / reps) * d..(r / reps + 1) * d];
                        for (acc, &u) in dst.iter_mut().zip(row) {
                            *acc += u;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let da = nodes[a.0].value.shape()[1];
                let db = nodes[b.0].value.shape()[1];
                for (v, offset, width) in [(*a, 0, da), (*b, da, db)] {
                    if wants(v) {
                        let g = slot(nodes, grads, v);
                        for (dst, row) in g.chunks_exact_mut(width).zip(up.chunks_exact(da + db)) {
                            for (acc, &u) in dst.iter_mut().zip(&row[offset..offset + width]) {
                                *acc += u;
                            }
                        }
                    }
                }
            }
            Op::GatherCols { x, index } => {
                if wants(*x) {
                    let k_in = nodes[x.0].value.shape()[1];
                    let g = slot(nodes, grads, *x);
                    for (dst, row) in g.chunks_exact_mut(k_in).zip(up.chunks_exact(index.len())) {
                        for (&i, &u) in index.iter().zip(row) {
                            dst[i] += u;
                        }
                    }
                }
            }
            Op::SpatialSoftmax(x) => {
                if wants(*x) {
                    let s = nodes[id].value.shape();
                    let area = s[2] * s[3];
                    let e = nodes[id].value.data();
                    let g = slot(nodes, grads, *x);
                    for ((dst, ep), up_p) in g
                        .chunks_exact_mut(area)
                        .zip(e.chunks_exact(area))
                        .zip(up.chunks_exact(area))
                    {
                        let dot: f64 = ep.iter().zip(up_p).map(|(a, b)| a * b).sum();
                        for ((acc, &ei), &u) in dst.iter_mut().zip(ep).zip(up_p) {
                            *acc += ei * (u - dot);
                        }
                    }
                }
            }
            Op::AttendAggregate { features, weights } => {
                let s = nodes[features.0].value.shape();
                let area = s[2] * s[3];
                for (target, other) in [(*features, *weights), (*weights, *features)] {
                    if wants(target) {
                        let ov = val(other);
                        let g = slot(nodes, grads, target);
                        for ((dst, o), &u) in g.chunks_exact_mut(area).zip(ov.chunks_exact(area)).zip(up) {
                            for (acc, &oi) in dst.iter_mut().zip(o) {
                                *acc += u * oi;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        let g = slot(nodes, grads, v);
                        for (acc, &u) in g.iter_mut().zip(up) {
                            *acc += u;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (target, other) in [(*a, *b), (*b, *a)] {
                    if wants(target) {
                        let ov = val(other);
                        let g = slot(nodes, grads, target);
                        for ((acc, &u), &o) in g.iter_mut().zip(up).zip(ov) {
                            *acc += u * o;
                        }
                    }
                }
            }
            Op::Average(inputs) => {
                let k = inputs.len() as f64;
                for &v in inputs {
                    if wants(v) {
                        let g = slot(nodes, grads, v);
                        for (acc, &u) in g.iter_mut().zip(up) {
                            *acc += u / k;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let g = slot(nodes, grads, *x);
                    for acc in g.iter_mut() {
                        *acc += up[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                if wants(*logits) {
                    let k = nodes[logits.0].value.shape()[1];
                    let g = slot(nodes, grads, *logits);
                    for (r, (&t, &u)) in targets.iter().zip(up).enumerate() {
                        for c in 0..k {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            g[r * k + c] += u * (probs[r * k + c] - onehot);
                        }
                    }
                }
            }
            Op::KlDivergence {
                logits,
                temperature,
                probs,
                target_probs,
                ..
            } => {
                if wants(*logits) {
                    let k = nodes[logits.0].value.shape()[1];
                    let g = slot(nodes, grads, *logits);
                    for (r, &u) in up.iter().enumerate() {
                        for c in 0..k {
                            let i = r * k + c;
                            g[i] += u * (probs[i] - target_probs[i]) / temperature;
                        }
                    }
                }
            }
        }
    }
}
