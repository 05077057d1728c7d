use std::sync::atomic::{AtomicU64, Ordering};

use super::{Result, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    LogSoftmax(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice { input: Var, start: usize, end: usize },
    // Mask already carries the 1/(1-p) factor.
    Dropout { input: Var, mask: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::LogSoftmax(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Slice { input, .. } | Op::Dropout { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only operation tape.
///
/// Every op validates shapes up front and, when `strict_finite` is set,
/// rejects outputs containing NaN or infinities.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    strict_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            strict_finite: false,
        }
    }

    pub fn strict() -> Self {
        let mut g = Self::new();
        g.strict_finite = true;
        g
    }

    pub fn set_strict_finite(&mut self, strict: bool) {
        self.strict_finite = strict;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("variable from another graph");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].needs_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(())
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op, needs_grad });
        Var { graph: self.id, index }
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if self.strict_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.index].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.nodes[a.index].value.shape(), self.nodes[b.index].value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, out, op)
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        self.check(a)?;
        let out = self.nodes[a.index].value.map(f);
        self.push(name, out, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.nodes[a.index].value.matmul(&self.nodes[b.index].value)?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.nodes[a.index].value.transpose()?;
        self.push("transpose", out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    /// Adds a bias of shape `[c]` (or `[1, c]`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (tx, tb) = (&self.nodes[x.index].value, &self.nodes[bias.index].value);
        let c = tx.cols();
        let bias_ok = tb.len() == c && tb.rows() == 1 && !tx.shape().is_empty();
        if !bias_ok {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(&v, &b)| v + b))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_bias", out, Op::AddBias(x, bias))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, Op::Square(a), |x| x * x)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.index].value;
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("log_softmax", out, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.nodes[a.index].value.data().iter().sum();
        self.push("reduce_sum", Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.index].value;
        if t.is_empty() {
            return Err(TensorError::Invalid("reduce_mean of an empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("reduce_mean", Tensor::scalar(m), Op::Mean(a))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        for &p in parts {
            self.check(p)?;
        }
        let lead = self.nodes[first.index].value.shape().to_vec();
        let lead = &lead[..lead.len().saturating_sub(1)];
        for &p in parts {
            let s = self.nodes[p.index].value.shape();
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.nodes[first.index].value.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let rows = self.nodes[first.index].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.index].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.index].value.row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.index].value;
        let c = t.cols();
        if start >= end || end > c || t.shape().is_empty() {
            return Err(TensorError::SliceBounds {
                op: "slice",
                start,
                end,
                size: c,
            });
        }
        let data = t
            .data()
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let out = Tensor::new(shape, data)?;
        self.push("slice", out, Op::Slice { input: a, start, end })
    }

    /// Inverted dropout with an externally supplied keep-mask of 0/1 entries.
    pub fn dropout(&mut self, a: Var, keep: &Tensor, p: f64) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.index].value;
        if keep.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                lhs: t.shape().to_vec(),
                rhs: keep.shape().to_vec(),
            });
        }
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        let factor = 1.0 / (1.0 - p);
        let mask: Vec<f64> = keep
            .data()
            .iter()
            .map(|&k| if k != 0.0 { factor } else { 0.0 })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("dropout", out, Op::Dropout { input: a, mask })
    }

    /// Reparameterized Gaussian sample `mu + exp(½·log_var) ⊙ eps`.
    ///
    /// `eps` enters as a constant; the result is differentiable in `mu` and
    /// `log_var` only.
    pub fn reparameterize(&mut self, mu: Var, log_var: Var, eps: &Tensor) -> Result<Var> {
        self.same_shape("reparameterize", mu, log_var)?;
        if eps.shape() != self.nodes[mu.index].value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "reparameterize",
                lhs: self.nodes[mu.index].value.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        let half = self.scale(log_var, 0.5)?;
        let std = self.exp(half)?;
        let noise = self.constant(eps.clone());
        let shift = self.mul(std, noise)?;
        self.add(mu, shift)
    }

    /// Reverse sweep from a scalar `seed`.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        self.check(seed)?;
        let seed_value = &self.nodes[seed.index].value;
        if !seed_value.is_scalar() {
            return Err(TensorError::SeedNotScalar(seed_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[seed.index] = Some(vec![1.0]);

        for i in (0..=seed.index).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g)).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients {
            graph: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.index].needs_grad {
            return;
        }
        match &mut grads[v.index] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.index].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec())?;
                if self.nodes[a.index].needs_grad {
                    let ga = gt.matmul(&val(*b).transpose()?)?;
                    self.accumulate(grads, *a, ga.into_data());
                }
                if self.nodes[b.index].needs_grad {
                    let gb = val(*a).transpose()?.matmul(&gt)?;
                    self.accumulate(grads, *b, gb.into_data());
                }
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec())?.transpose()?;
                self.accumulate(grads, *a, gt.into_data());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                self.accumulate(grads, *a, g.iter().zip(tb).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, g.iter().zip(ta).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|v| v * c).collect());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                let c = out.cols();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                }
                self.accumulate(grads, *b, gb);
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect());
            }
            Op::Log(a) => {
                let x = val(*a).data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let ga = g.iter().zip(x).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(g.len());
                for (grow, orow) in g.chunks(c).zip(out.data().chunks(c)) {
                    let total: f64 = grow.iter().sum();
                    ga.extend(grow.iter().zip(orow).map(|(g, o)| g - o.exp() * total));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let x = val(*a).data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(g, x)| 2.0 * x * g).collect());
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, vec![g[0]; val(*a).len()]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    let gp = g
                        .chunks(total)
                        .flat_map(|row| row[offset..offset + w].iter().copied())
                        .collect();
                    self.accumulate(grads, *p, gp);
                    offset += w;
                }
            }
            Op::Slice { input, start, end } => {
                let c = val(*input).cols();
                let w = end - start;
                let mut gi = vec![0.0; val(*input).len()];
                for (dst, src) in gi.chunks_mut(c).zip(g.chunks(w)) {
                    dst[*start..*end].copy_from_slice(src);
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Dropout { input, mask } => {
                self.accumulate(grads, *input, g.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
        }
        Ok(())
    }
}

/// Result of one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the seed with respect to `v`, `None` when `v` does not
    /// influence the seed or does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros for unreachable nodes.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.index].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_two_by_two() {
        let mut g = Graph::new();
        let a = g.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(m(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn reduce_sum_of_identity_is_three() {
        let mut g = Graph::new();
        let eye = g.constant(m(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]));
        let s = g.sum(eye).unwrap();
        assert_eq!(g.value(s).item(), 3.0);
    }

    #[test]
    fn power_rule() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 6.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.7));
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 2.0);
    }

    #[test]
    fn seed_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::SeedNotScalar(_))));
        let mut other = Graph::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(g.backward(y), Err(TensorError::ForeignVar)));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let c = g.constant(Tensor::zeros(vec![3, 2]));
        assert!(matches!(g.add(a, c), Err(TensorError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn strict_finite_rejects_log_of_zero() {
        let mut g = Graph::strict();
        let x = g.constant(Tensor::vector(vec![0.0, 1.0]));
        assert_eq!(g.log(x).unwrap_err(), TensorError::NonFinite { op: "log" });
        let mut lax = Graph::new();
        let x = lax.constant(Tensor::vector(vec![0.0, 1.0]));
        assert!(lax.log(x).is_ok());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut g = Graph::new();
        let a = g.param(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.param(m(&[vec![5.0], vec![6.0]]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.slice(c, 0, 2).unwrap();
        assert_eq!(g.value(back), g.value(a));
        assert!(g.slice(c, 2, 4).is_err());
    }

    #[test]
    fn dropout_scales_kept_entries() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let keep = Tensor::vector(vec![1.0, 0.0, 1.0, 0.0]);
        let y = g.dropout(x, &keep, 0.5).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 0.0, 6.0, 0.0]);
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn reparameterize_examples() {
        let mut g = Graph::new();
        let mu = g.param(Tensor::scalar(0.0));
        let lv = g.param(Tensor::scalar(0.0));
        let z = g.reparameterize(mu, lv, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.value(z).item(), 1.0);

        let mu = g.param(Tensor::vector(vec![2.0, -1.0]));
        let lv = g.param(Tensor::vector(vec![4f64.ln(), 0.3]));
        let eps = Tensor::vector(vec![1.0, -0.7]);
        let z = g.reparameterize(mu, lv, &eps).unwrap();
        assert!((g.value(z).data()[0] - 4.0).abs() < 1e-15);
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(mu).data(), &[1.0, 1.0]);
        let expected = 0.5 * (0.5 * 0.3f64).exp() * -0.7;
        assert!((grads.wrt(lv).data()[1] - expected).abs() < 1e-15);

        let bad = Tensor::vector(vec![1.0]);
        assert!(g.reparameterize(mu, lv, &bad).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.param(Tensor::scalar(5.0));
        let y = g.mul(c, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(c).item(), 0.0);
        assert_eq!(grads.wrt(x).item(), 2.0);
    }
}
