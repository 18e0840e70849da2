//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! Every value is an `Array2<f64>`; vectors are stored as `1 x n` rows and
//! scalars as `1 x 1`. The op set is fixed to what the detection and attack
//! pipelines need, plus [`CustomOp`] for the operators whose backward pass
//! lives next to their forward code (synthesis, convolution, spectra).

use std::fmt::Write as _;

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operator with a hand-written backward rule.
pub trait CustomOp {
    fn name(&self) -> &str;

    /// Gradients for each input given `upstream = d loss / d output`.
    /// Entries may be `None` when the input does not need a gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        upstream: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    ColScale(Var, Array1<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LnEps(Var, f64),
    Sum(Var),
    Mean(Var),
    BceLogits(Var, Tensor),
    Context(Var, usize),
    Tile { src: Var, phase: usize },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation so its gradient can be replayed backwards.
/// A tape is single-owner; build one per independent computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn scalar(v: f64) -> Tensor {
    Array2::from_elem((1, 1), v)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn row_constant(&mut self, values: Vec<f64>) -> Var {
        let n = values.len();
        self.constant(Array2::from_shape_vec((1, n), values).expect("row shape"))
    }

    /// Registers a trainable leaf under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a + row`, broadcasting a `1 x c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `a + offset` for a constant tensor of the same shape.
    pub fn shift(&mut self, a: Var, offset: &Tensor) -> Var {
        let value = self.value(a) + offset;
        let rg = self.rg(a);
        self.push(value, Op::Shift(a), rg)
    }

    /// Multiplies column `j` by `scale[j]`.
    pub fn col_scale(&mut self, a: Var, scale: Array1<f64>) -> Var {
        let value = self.value(a) * &scale;
        let rg = self.rg(a);
        self.push(value, Op::ColScale(a, scale), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    /// `max(a, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// `ln(a + eps)`.
    pub fn ln_eps(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).mapv(|x| (x + eps).ln());
        let rg = self.rg(a);
        self.push(value, Op::LnEps(a, eps), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let value = scalar(self.value(a).sum() / n);
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean binary cross-entropy of logits against 0/1 labels of the same shape.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Tensor) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), labels.dim(), "label shape mismatch");
        let n = z.len().max(1) as f64;
        let total: f64 = Zip::from(z)
            .and(&labels)
            .fold(0.0, |acc, &z, &y| acc + z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
        let rg = self.rg(logits);
        self.push(scalar(total / n), Op::BceLogits(logits, labels), rg)
    }

    /// Concatenates each row with its `radius` neighbours on both sides,
    /// clamping indices at the edges.
    pub fn context(&mut self, a: Var, radius: usize) -> Var {
        let src = self.value(a);
        let (t, f) = src.dim();
        let width = 2 * radius + 1;
        let mut out = Array2::zeros((t, width * f));
        for row in 0..t {
            for j in 0..width {
                let r = (row as isize + j as isize - radius as isize).clamp(0, t as isize - 1) as usize;
                out.slice_mut(s![row, j * f..(j + 1) * f])
                    .assign(&src.row(r));
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Context(a, radius), rg)
    }

    /// `out[n] = src[(n + phase) mod L]` for a `1 x L` row, `len` outputs.
    pub fn tile(&mut self, src: Var, len: usize, phase: usize) -> Var {
        let row = self.value(src);
        assert_eq!(row.nrows(), 1, "tile expects a row vector");
        let l = row.ncols();
        assert!(l > 0, "cannot tile an empty row");
        let value = Array2::from_shape_fn((1, len), |(_, n)| row[[0, (n + phase) % l]]);
        let rg = self.rg(src);
        self.push(value, Op::Tile { src, phase }, rg)
    }

    /// Records a custom operator whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Custom(inputs, op), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn grad(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                lv.dim()
            )));
        }
        if !lv[[0, 0]].is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(scalar(1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            let acc = |v: Var, d: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, g.dot(&self.value(*b).t()), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, self.value(*a).t().dot(&g), &mut grads);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        acc(*b, g.clone(), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        acc(*b, -&g, &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(*a, &g * self.value(*b), &mut grads);
                    }
                    if self.rg(*b) {
                        acc(*b, &g * self.value(*a), &mut grads);
                    }
                }
                Op::Scale(a, c) => acc(*a, g * *c, &mut grads),
                Op::Shift(a) => acc(*a, g, &mut grads),
                Op::ColScale(a, scale) => acc(*a, g * scale, &mut grads),
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(*a, d, &mut grads);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(out).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(*a, d, &mut grads);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                    acc(*a, d, &mut grads);
                }
                Op::LnEps(a, eps) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d /= x + eps);
                    acc(*a, d, &mut grads);
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).dim();
                    acc(*a, Array2::from_elem(shape, g[[0, 0]]), &mut grads);
                }
                Op::Mean(a) => {
                    let shape = self.value(*a).dim();
                    let n = (shape.0 * shape.1).max(1) as f64;
                    acc(*a, Array2::from_elem(shape, g[[0, 0]] / n), &mut grads);
                }
                Op::BceLogits(a, labels) => {
                    let z = self.value(*a);
                    let scale = g[[0, 0]] / z.len().max(1) as f64;
                    let mut d = Array2::zeros(z.dim());
                    Zip::from(&mut d)
                        .and(z)
                        .and(labels)
                        .for_each(|d, &z, &y| *d = (sigmoid(z) - y) * scale);
                    acc(*a, d, &mut grads);
                }
                Op::Context(a, radius) => {
                    let (t, f) = self.value(*a).dim();
                    let width = 2 * radius + 1;
                    let mut d = Array2::zeros((t, f));
                    for row in 0..t {
                        for j in 0..width {
                            let r = (row as isize + j as isize - *radius as isize)
                                .clamp(0, t as isize - 1) as usize;
                            let mut dst = d.row_mut(r);
                            dst += &g.slice(s![row, j * f..(j + 1) * f]);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Tile { src, phase } => {
                    let l = self.value(*src).ncols();
                    let mut d = Array2::zeros((1, l));
                    for (n, &v) in g.iter().enumerate() {
                        d[[0, (n + phase) % l]] += v;
                    }
                    acc(*src, d, &mut grads);
                }
                Op::Custom(inputs, op) => {
                    let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let needs: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                    let ds = op.backward(&values, out, &g, &needs)?;
                    if ds.len() != inputs.len() {
                        return Err(Error::Contract(format!(
                            "custom op {} returned {} gradients for {} inputs",
                            op.name(),
                            ds.len(),
                            inputs.len()
                        )));
                    }
                    for (&v, d) in inputs.iter().zip(ds) {
                        if let Some(d) = d {
                            acc(v, d, &mut grads);
                        }
                    }
                }
            }
        }
        let names = self.params.clone();
        Ok(Grads { grads, names })
    }
}

/// Gradients produced by [`Tape::grad`]. Leaves that the loss does not reach
/// report zero.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    names: Vec<(String, Var)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled to `shape` when unreachable.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.get(*v))
    }

    /// `(name, gradient)` for every registered parameter, in registration order.
    pub fn named(&self) -> impl Iterator<Item = (&str, Option<&Tensor>)> {
        self.names.iter().map(|(n, v)| (n.as_str(), self.get(*v)))
    }
}

/// One coordinate of an analytic-versus-numeric gradient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

/// Central differences `(f(x + e) - f(x - e)) / 2e` per coordinate, using a
/// single step for every coordinate.
pub fn check_gradients<F>(
    f: F,
    names: &[String],
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<Vec<GradReport>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_gradients_with_steps(f, names, theta, analytic, &vec![eps; theta.len()])
}

/// Like [`check_gradients`] but with a step per coordinate.
pub fn check_gradients_with_steps<F>(
    mut f: F,
    names: &[String],
    theta: &[f64],
    analytic: &[f64],
    eps: &[f64],
) -> Result<Vec<GradReport>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if names.len() != theta.len() || analytic.len() != theta.len() || eps.len() != theta.len() {
        return Err(Error::Contract("gradient check inputs differ in length".into()));
    }
    if let Some(e) = eps.iter().find(|e| !(**e > 0.0)) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {e}")));
    }
    let mut work = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        work[i] = theta[i] + eps[i];
        let plus = f(&work)?;
        work[i] = theta[i] - eps[i];
        let minus = f(&work)?;
        work[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective while probing {}", names[i])));
        }
        let numeric = (plus - minus) / (2.0 * eps[i]);
        out.push(GradReport {
            param: names[i].clone(),
            analytic: analytic[i],
            numeric,
            rel_error: relative_error(analytic[i], numeric),
        });
    }
    Ok(out)
}

pub fn reports_to_csv(reports: &[GradReport]) -> String {
    let mut s = String::from("param,analytic,numeric,rel_error\n");
    for r in reports {
        let _ = writeln!(s, "{},{},{},{}", r.param, r.analytic, r.numeric, r.rel_error);
    }
    s
}
