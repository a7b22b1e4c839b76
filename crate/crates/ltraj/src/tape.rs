//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A forward pass records every operation on a [`Tape`]; [`Tape::backward`]
//! then walks the recording in exact reverse order, accumulating gradients
//! additively into each node. Leaves (constants and named parameters) retain
//! their gradients; intermediate buffers are released as soon as they have
//! been propagated.
//!
//! A tape is single-threaded by design. Parallel evaluation uses one tape per
//! worker and merges parameter gradients by summation afterwards.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{matvec_raw, matvec_transposed_raw, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Supported elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Relu,
}

impl Nonlinearity {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Nonlinearity::Tanh => tape.tanh(x),
            Nonlinearity::Relu => tape.relu(x),
        }
    }

    pub fn apply_scalar(&self, v: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Relu => {
                if v > 0.0 {
                    v
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Relu => "relu",
        }
    }
}

impl std::str::FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Nonlinearity::Tanh),
            "relu" => Ok(Nonlinearity::Relu),
            other => Err(Error::Config(format!("unknown nonlinearity kind {other:?}"))),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<String> },
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + c * b`
    AddScaled { a: Var, b: Var, c: f64 },
    Scale(Var, f64),
    AddConst(Var, f64),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, end: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of a forward computation, in execution order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: BTreeMap<String, Var>,
}

/// Named parameter gradients, summable across tapes.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    /// Adds `other` into this accumulator (gradient merging by summation).
    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => {
                    *acc = acc.add(g)?;
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.map.values_mut() {
            *g = g.scale(c);
        }
    }
}

/// Per-leaf gradients from one backward pass.
pub struct Backprop {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Backprop {
    /// Gradient with respect to a leaf var; `None` if the var received none
    /// (or is not a leaf — intermediate gradients are dropped during the pass).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Collects gradients of named parameters.
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::default();
        for (name, idx) in &self.params {
            if let Some(g) = &self.grads[*idx] {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded operation; subsequent backward passes see nothing,
    /// so all gradient accumulators are zero.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf. It participates in gradients (queryable via
    /// [`Backprop::wrt`]) but has no parameter name.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Records a named parameter leaf. Binding the same name again returns
    /// the existing leaf, so shared weights accumulate into one gradient.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let name = name.into();
        if let Some(&v) = self.param_vars.get(&name) {
            return v;
        }
        let v = self.push(
            value,
            Op::Leaf {
                param: Some(name.clone()),
            },
        );
        self.param_vars.insert(name, v);
        v
    }

    /// Binds a parameter from a [`crate::params::ParamSet`] by name.
    pub fn bind(&mut self, params: &crate::params::ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let value = params.get(name)?.clone();
        Ok(self.param(name, value))
    }

    /// `W x + b` for a rank-2 `W`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (wt, xt, bt) = (self.value(w), self.value(x), self.value(b));
        if wt.shape().len() != 2 {
            return Err(Error::dim("affine", "rank-2 weight", format!("{:?}", wt.shape())));
        }
        let (m, n) = (wt.shape()[0], wt.shape()[1]);
        if xt.len() != n || bt.len() != m {
            return Err(Error::dim(
                "affine",
                format!("x length {n}, b length {m} for weight {:?}", wt.shape()),
                format!("x {:?}, b {:?}", xt.shape(), bt.shape()),
            ));
        }
        let mut out = matvec_raw(wt.data(), m, n, xt.data());
        for (o, &bv) in out.iter_mut().zip(bt.data()) {
            *o += bv;
        }
        Ok(self.push(Tensor::new_unchecked(vec![m], out), Op::Affine { x, w, b }))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, context: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                context,
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `a + c * b`, fused to keep integrator tapes short.
    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Result<Var> {
        self.binary_same_shape(a, b, "add_scaled")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + c * y)?;
        Ok(self.push(value, Op::AddScaled { a, b, c }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddConst(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    /// Rectifier; the derivative at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x))
    }

    /// Clamps to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::Mean(x))
    }

    /// Concatenates flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let n = data.len();
        Ok(self.push(Tensor::new_unchecked(vec![n], data), Op::Concat(parts.to_vec())))
    }

    /// Contiguous sub-vector `[start, end)` of a flattened input.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start >= end || end > t.len() {
            return Err(Error::dim(
                "slice",
                format!("0 <= start < end <= {}", t.len()),
                format!("[{start}, {end})"),
            ));
        }
        let data = t.data()[start..end].to_vec();
        Ok(self.push(
            Tensor::new_unchecked(vec![end - start], data),
            Op::Slice { x, start, end },
        ))
    }

    /// Mean squared error between two same-shape values (mean, not sum, so
    /// the magnitude is invariant to input size).
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.binary_same_shape(pred, target, "mse")?;
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a scalar root. Gradients accumulate additively; the
    /// recording is visited in exact reverse order.
    pub fn backward(&self, root: Var) -> Result<Backprop> {
        let root_val = self.value(root);
        if root_val.len() != 1 {
            return Err(Error::dim(
                "backward",
                "scalar root",
                format!("{:?}", root_val.shape()),
            ));
        }
        if !root_val.item().is_finite() {
            return Err(Error::Numeric(format!(
                "backward from non-finite root value {}",
                root_val.item()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf { .. } => unreachable!(),
                Op::Affine { x, w, b } => {
                    let wt = self.value(*w);
                    let (m, n) = (wt.shape()[0], wt.shape()[1]);
                    let dx = matvec_transposed_raw(wt.data(), m, n, &g);
                    accumulate(&mut grads, x.0, &dx);
                    // dW = g ⊗ x
                    let xv = self.value(*x).data();
                    let dw_slot = grads[w.0].get_or_insert_with(|| vec![0.0; m * n]);
                    for (row, &gv) in dw_slot.chunks_exact_mut(n).zip(g.iter()) {
                        for (d, &xvv) in row.iter_mut().zip(xv.iter()) {
                            *d += gv * xvv;
                        }
                    }
                    accumulate(&mut grads, b.0, &g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, &g);
                    accumulate(&mut grads, b.0, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a.0, &g);
                    accumulate_scaled(&mut grads, b.0, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av: Vec<f64> = self.value(*a).data().to_vec();
                    let bv = self.value(*b).data();
                    let da: Vec<f64> = g.iter().zip(bv.iter()).map(|(&gv, &b)| gv * b).collect();
                    accumulate(&mut grads, a.0, &da);
                    let db: Vec<f64> = g.iter().zip(av.iter()).map(|(&gv, &a)| gv * a).collect();
                    accumulate(&mut grads, b.0, &db);
                }
                Op::AddScaled { a, b, c } => {
                    accumulate(&mut grads, a.0, &g);
                    accumulate_scaled(&mut grads, b.0, &g, *c);
                }
                Op::Scale(x, c) => accumulate_scaled(&mut grads, x.0, &g, *c),
                Op::AddConst(x, _) => accumulate(&mut grads, x.0, &g),
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let dx: Vec<f64> = g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect();
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xv.iter())
                        .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(y.iter())
                        .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                        .collect();
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    let dx: Vec<f64> = g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * yv).collect();
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.value(*x).data();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xv.iter())
                        .map(|(&gv, &v)| if v >= *lo && v <= *hi { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    let dx = vec![g[0]; n];
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let dx = vec![g[0] / n as f64; n];
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        accumulate(&mut grads, p.0, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Slice { x, start, end } => {
                    let slot = grads[x.0].get_or_insert_with(|| vec![0.0; self.nodes[x.0].value.len()]);
                    for (d, &gv) in slot[*start..*end].iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                }
            }
        }

        let mut params = Vec::new();
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param } = &node.op {
                if let Some(g) = grads[idx].take() {
                    out[idx] = Some(Tensor::new_unchecked(node.value.shape().to_vec(), g));
                }
                if let Some(name) = param {
                    params.push((name.clone(), idx));
                }
            }
        }
        Ok(Backprop { grads: out, params })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, &v) in acc.iter_mut().zip(g.iter()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_scaled(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64], c: f64) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, &v) in acc.iter_mut().zip(g.iter()) {
                *a += c * v;
            }
        }
        slot @ None => *slot = Some(g.iter().map(|&v| c * v).collect()),
    }
}
