//! Dense reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order; node
//! handles are cheap [`Var`] indices. [`Graph::backward`] walks the nodes in
//! reverse creation order once, so the graph is acyclic by construction.
//!
//! Storage is row-major `f64`. There is no broadcasting beyond the bias add
//! of [`Graph::linear`] and the row/scalar scalings the search needs. Every
//! operation checks its output for NaN/Inf and fails instead of propagating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major array of doubles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn rows_cols(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// Elementwise nonlinearities used by the blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Swish,
    Sigmoid,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "swish" => Ok(Activation::Swish),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::config(format!("unknown activation kind '{other}'"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Swish => x * sigmoid(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Activation { x: Var, kind: Activation },
    ChannelMask { x: Var, width: usize },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Add(Var, Var),
    Mul(Var, Var),
    Ln(Var),
    PowConst(Var, f64),
    ScaleConst(Var, f64),
    AddConst(Var),
    Softmax(Var),
    Select(Var, usize),
    ScaleBy { x: Var, s: Var },
    DotConst { a: Var, c: Vec<f64> },
    RowMeanPrefix { x: Var, width: usize },
    MulRows { x: Var, g: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of operations for one forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Inserts a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        check_finite(op_name, &data)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor { shape, data },
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.rows_cols().ok_or_else(|| Error::Dimension {
            op,
            lhs: self.shape(v).to_vec(),
            rhs: vec![],
        })
    }

    /// `y = x·w + b` for `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, inner) = self.matrix_dims("linear", x)?;
        let (w_in, out) = self.matrix_dims("linear", w)?;
        if inner != w_in {
            return Err(Error::Dimension {
                op: "linear",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if self.shape(b) != [out] {
            return Err(Error::Dimension {
                op: "linear",
                lhs: self.shape(w).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(bv);
        }
        for r in 0..batch {
            let yr = &mut y[r * out..(r + 1) * out];
            for k in 0..inner {
                let a = xv[r * inner + k];
                if a == 0.0 {
                    continue;
                }
                let wk = &wv[k * out..(k + 1) * out];
                for (yo, wo) in yr.iter_mut().zip(wk) {
                    *yo += a * wo;
                }
            }
        }
        self.push("linear", vec![batch, out], y, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let y = self.nodes[x.0].value.data.iter().map(|&v| kind.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("activation", shape, y, Op::Activation { x, kind }, &[x])
    }

    /// Keeps the first `width` columns of `x: [batch, channels]` and zeroes
    /// the rest. Implemented as a product with a 0/1 column pattern so
    /// candidates of different widths can share one weight buffer.
    pub fn channel_mask(&mut self, x: Var, width: usize) -> Result<Var> {
        let (batch, channels) = self.matrix_dims("channel_mask", x)?;
        if width == 0 || width > channels {
            return Err(Error::Dimension {
                op: "channel_mask",
                lhs: self.shape(x).to_vec(),
                rhs: vec![width],
            });
        }
        let xv = &self.nodes[x.0].value.data;
        let mut y = vec![0.0; batch * channels];
        for r in 0..batch {
            let row = r * channels;
            y[row..row + width].copy_from_slice(&xv[row..row + width]);
        }
        self.push("channel_mask", vec![batch, channels], y, Op::ChannelMask { x, width }, &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (batch, classes) = self.matrix_dims("softmax_cross_entropy", logits)?;
        if labels.len() != batch {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::data(Some(i), format!("label {l} out of range for {classes} classes")));
        }
        let lv = &self.nodes[logits.0].value.data;
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for r in 0..batch {
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (p, &z) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (z - max).exp();
                sum += *p;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p /= sum;
            }
            loss += sum.ln() - (row[labels[r]] - max);
        }
        loss /= batch as f64;
        self.push(
            "softmax_cross_entropy",
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, y, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, y, Op::Mul(a, b), &[a, b])
    }

    /// Natural logarithm; every entry must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value.data;
        if let Some(bad) = av.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "ln",
                msg: format!("argument {bad} is not positive"),
            });
        }
        let y = av.iter().map(|v| v.ln()).collect();
        let shape = self.shape(a).to_vec();
        self.push("ln", shape, y, Op::Ln(a), &[a])
    }

    /// `a^p` for a constant exponent.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let av = &self.nodes[a.0].value.data;
        if p.fract() != 0.0 {
            if let Some(bad) = av.iter().find(|&&v| v < 0.0) {
                return Err(Error::Domain {
                    op: "pow",
                    msg: format!("negative base {bad} with fractional exponent {p}"),
                });
            }
        }
        let y = av.iter().map(|v| v.powf(p)).collect();
        let shape = self.shape(a).to_vec();
        self.push("pow", shape, y, Op::PowConst(a, p), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let y = self.nodes[a.0].value.data.iter().map(|v| v * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, y, Op::ScaleConst(a, c), &[a])
    }

    /// `a + c` for a constant tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.nodes[a.0].value.len() {
            return Err(Error::Dimension {
                op: "add_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let y = self.nodes[a.0].value.data.iter().zip(c).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add_const", shape, y, Op::AddConst(a), &[a])
    }

    /// Softmax over a 1-D tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: self.shape(a).to_vec(),
                rhs: vec![],
            });
        }
        let y = softmax_values(&self.nodes[a.0].value.data);
        let shape = self.shape(a).to_vec();
        self.push("softmax", shape, y, Op::Softmax(a), &[a])
    }

    /// Entry `i` of a 1-D tensor as a scalar.
    pub fn select(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        if i >= n {
            return Err(Error::Dimension {
                op: "select",
                lhs: self.shape(a).to_vec(),
                rhs: vec![i],
            });
        }
        let v = self.nodes[a.0].value.data[i];
        self.push("select", vec![1], vec![v], Op::Select(a, i), &[a])
    }

    /// `x · s` for a scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(Error::Dimension {
                op: "scale_by",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.nodes[s.0].value.data[0];
        let y = self.nodes[x.0].value.data.iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale_by", shape, y, Op::ScaleBy { x, s }, &[x, s])
    }

    /// `Σ_i a_i c_i` for a constant coefficient vector.
    pub fn dot_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let av = &self.nodes[a.0].value.data;
        if av.len() != c.len() {
            return Err(Error::Dimension {
                op: "dot_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let y: f64 = av.iter().zip(c).map(|(x, y)| x * y).sum();
        self.push("dot_const", vec![1], vec![y], Op::DotConst { a, c: c.to_vec() }, &[a])
    }

    /// Per-row mean of the first `width` columns: `[batch, n] -> [batch, 1]`.
    pub fn row_mean_prefix(&mut self, x: Var, width: usize) -> Result<Var> {
        let (batch, n) = self.matrix_dims("row_mean_prefix", x)?;
        if width == 0 || width > n {
            return Err(Error::Dimension {
                op: "row_mean_prefix",
                lhs: self.shape(x).to_vec(),
                rhs: vec![width],
            });
        }
        let xv = &self.nodes[x.0].value.data;
        let y = (0..batch)
            .map(|r| xv[r * n..r * n + width].iter().sum::<f64>() / width as f64)
            .collect();
        self.push("row_mean_prefix", vec![batch, 1], y, Op::RowMeanPrefix { x, width }, &[x])
    }

    /// Scales each row of `x: [batch, n]` by `g: [batch, 1]`.
    pub fn mul_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (batch, n) = self.matrix_dims("mul_rows", x)?;
        if self.shape(g) != [batch, 1] {
            return Err(Error::Dimension {
                op: "mul_rows",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(g).to_vec(),
            });
        }
        let xv = &self.nodes[x.0].value.data;
        let gv = &self.nodes[g.0].value.data;
        let mut y = Vec::with_capacity(batch * n);
        for r in 0..batch {
            y.extend(xv[r * n..(r + 1) * n].iter().map(|v| v * gv[r]));
        }
        self.push("mul_rows", vec![batch, n], y, Op::MulRows { x, g }, &[x, g])
    }

    /// Reverse pass from a one-element `root`. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.shape(root).to_vec(),
                rhs: vec![1],
            });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            check_finite("backward", &gy)?;
            self.propagate(i, &gy, &mut grads);
            self.nodes[i].grad = Some(gy);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value.data;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (batch, inner) = self.nodes[x.0].value.rows_cols().unwrap();
                let out = self.nodes[b.0].value.len();
                if needs(*x) {
                    let wv = val(*w);
                    let mut dx = vec![0.0; batch * inner];
                    for r in 0..batch {
                        let gr = &gy[r * out..(r + 1) * out];
                        for k in 0..inner {
                            let wk = &wv[k * out..(k + 1) * out];
                            dx[r * inner + k] = gr.iter().zip(wk).map(|(g, w)| g * w).sum();
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if needs(*w) {
                    let xv = val(*x);
                    let mut dw = vec![0.0; inner * out];
                    for r in 0..batch {
                        let gr = &gy[r * out..(r + 1) * out];
                        for k in 0..inner {
                            let a = xv[r * inner + k];
                            if a == 0.0 {
                                continue;
                            }
                            for (d, g) in dw[k * out..(k + 1) * out].iter_mut().zip(gr) {
                                *d += a * g;
                            }
                        }
                    }
                    accumulate(grads, *w, dw);
                }
                if needs(*b) {
                    let mut db = vec![0.0; out];
                    for r in 0..batch {
                        for (d, g) in db.iter_mut().zip(&gy[r * out..(r + 1) * out]) {
                            *d += g;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Activation { x, kind } => {
                let dx = val(*x).iter().zip(gy).map(|(&v, g)| g * kind.derivative(v)).collect();
                accumulate(grads, *x, dx);
            }
            Op::ChannelMask { x, width } => {
                let channels = node.value.shape[1];
                let dx = gy
                    .iter()
                    .enumerate()
                    .map(|(j, g)| if j % channels < *width { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let scale = gy[0] / batch as f64;
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * classes + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                accumulate(grads, *logits, d);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, gy.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, gy.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, gy.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if needs(*b) {
                    accumulate(grads, *b, gy.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Ln(a) => {
                accumulate(grads, *a, gy.iter().zip(val(*a)).map(|(g, x)| g / x).collect());
            }
            Op::PowConst(a, p) => {
                let d = gy.iter().zip(val(*a)).map(|(g, x)| g * p * x.powf(p - 1.0)).collect();
                accumulate(grads, *a, d);
            }
            Op::ScaleConst(a, c) => {
                accumulate(grads, *a, gy.iter().map(|g| g * c).collect());
            }
            Op::AddConst(a) => accumulate(grads, *a, gy.to_vec()),
            Op::Softmax(a) => {
                let y = &node.value.data;
                let dot: f64 = y.iter().zip(gy).map(|(y, g)| y * g).sum();
                accumulate(grads, *a, y.iter().zip(gy).map(|(y, g)| y * (g - dot)).collect());
            }
            Op::Select(a, k) => {
                let mut d = vec![0.0; self.nodes[a.0].value.len()];
                d[*k] = gy[0];
                accumulate(grads, *a, d);
            }
            Op::ScaleBy { x, s } => {
                let sv = val(*s)[0];
                if needs(*x) {
                    accumulate(grads, *x, gy.iter().map(|g| g * sv).collect());
                }
                if needs(*s) {
                    let ds = gy.iter().zip(val(*x)).map(|(g, x)| g * x).sum();
                    accumulate(grads, *s, vec![ds]);
                }
            }
            Op::DotConst { a, c } => {
                accumulate(grads, *a, c.iter().map(|c| c * gy[0]).collect());
            }
            Op::RowMeanPrefix { x, width } => {
                let (batch, n) = self.nodes[x.0].value.rows_cols().unwrap();
                let mut d = vec![0.0; batch * n];
                for r in 0..batch {
                    let g = gy[r] / *width as f64;
                    d[r * n..r * n + width].iter_mut().for_each(|v| *v = g);
                }
                accumulate(grads, *x, d);
            }
            Op::MulRows { x, g } => {
                let (batch, n) = self.nodes[x.0].value.rows_cols().unwrap();
                let gv = val(*g);
                let xv = val(*x);
                if needs(*x) {
                    let mut d = Vec::with_capacity(batch * n);
                    for r in 0..batch {
                        d.extend(gy[r * n..(r + 1) * n].iter().map(|v| v * gv[r]));
                    }
                    accumulate(grads, *x, d);
                }
                if needs(*g) {
                    let d = (0..batch)
                        .map(|r| {
                            gy[r * n..(r + 1) * n]
                                .iter()
                                .zip(&xv[r * n..(r + 1) * n])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    accumulate(grads, *g, d);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_values(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Worst mismatch between reverse-mode gradients and central differences.
///
/// `f` builds a one-element output from leaves created for `inputs`. Each
/// entry's error is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
pub fn gradient_check<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        Ok((g, leaves, out))
    };
    let (mut g, leaves, out) = eval(inputs)?;
    g.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = g.grad(*leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = inputs[k].data[j];
            probe[k].data[j] = x0 + eps;
            let (gp, _, op) = eval(&probe)?;
            probe[k].data[j] = x0 - eps;
            let (gm, _, om) = eval(&probe)?;
            probe[k].data[j] = x0;
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * eps);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
