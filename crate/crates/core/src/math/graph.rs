//! Tape-based reverse-mode differentiation over [`Tensor`] nodes.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward pass is a single reverse sweep.

use crate::error::{shape_err, Error, Result};
use crate::math::ops::{self, GruCache, NormCache};
use crate::math::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the input values, the node output and the gradient
/// flowing into the output, and returns one gradient per input (`None` for
/// inputs it does not propagate to).
pub trait CustomOp<T: Real>: Send {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> &[Var];
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv1d { input: Var, kernel: Var, stride: usize },
    ChannelNorm { input: Var, gain: Var, bias: Var, cache: NormCache<T> },
    Relu(Var),
    Transpose(Var),
    Linear { input: Var, weight: Var, bias: Var },
    RowSlice { input: Var, start: usize },
    Gru { input: Var, w_in: Var, w_h: Var, bias: Var, cache: GruCache<T> },
    WeightedSum { input: Var, weights: Vec<T> },
    Custom(Box<dyn CustomOp<T>>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation for one loss evaluation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn check_finite(value: &Tensor<T>, what: &str) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{what} produced NaN or infinity")))
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn conv1d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let g = ops::conv_geom(self.value(input), self.value(kernel), stride)?;
        let out = ops::conv1d_forward(self.value(input).data(), self.value(kernel).data(), &g);
        let value = Tensor::new(vec![g.cout, g.tout], out)?;
        Self::check_finite(&value, "conv1d")?;
        let ng = self.needs(input) || self.needs(kernel);
        Ok(self.push(value, Op::Conv1d { input, kernel, stride }, ng))
    }

    pub fn channel_norm(&mut self, input: Var, gain: Var, bias: Var) -> Result<Var> {
        let (c, t) = self.value(input).dims2()?;
        if c < 2 {
            return Err(Error::Invalid("channel_norm needs at least two channels".into()));
        }
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err(format!("gain/bias length must be {c}")));
        }
        let (out, cache) = ops::channel_norm_forward(
            self.value(input).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            c,
            t,
        );
        let value = Tensor::new(vec![c, t], out)?;
        Self::check_finite(&value, "channel_norm")?;
        let ng = self.needs(input) || self.needs(gain) || self.needs(bias);
        Ok(self.push(value, Op::ChannelNorm { input, gain, bias, cache }, ng))
    }

    /// Rectifier with zero subgradient at zero.
    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(input);
        self.push(value, Op::Relu(input), ng)
    }

    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).transpose()?;
        let ng = self.needs(input);
        Ok(self.push(value, Op::Transpose(input), ng))
    }

    /// Row-wise affine map of `input: [n, din]` by `weight: [dout, din]`, `bias: [dout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, din) = self.value(input).dims2()?;
        let (dout, win) = self.value(weight).dims2()?;
        if win != din || self.value(bias).len() != dout {
            return Err(shape_err(format!("linear: input width {din}, weight {dout}x{win}")));
        }
        let out = ops::linear_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            din,
            dout,
        );
        let value = Tensor::new(vec![n, dout], out)?;
        Self::check_finite(&value, "linear")?;
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(value, Op::Linear { input, weight, bias }, ng))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn row_slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.value(input).dims2()?;
        if start + len > n {
            return Err(shape_err(format!("row slice {start}..{} of {n} rows", start + len)));
        }
        let data = self.value(input).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        let ng = self.needs(input);
        Ok(self.push(value, Op::RowSlice { input, start }, ng))
    }

    /// Gated recurrent unit over the rows of `input: [time, din]`.
    pub fn gru(&mut self, input: Var, w_in: Var, w_h: Var, bias: Var) -> Result<Var> {
        let (time, din) = self.value(input).dims2()?;
        let (h3, win) = self.value(w_in).dims2()?;
        let hidden = h3 / 3;
        if h3 % 3 != 0 || win != din || self.value(w_h).shape() != [h3, hidden] || self.value(bias).len() != h3 {
            return Err(shape_err("gru weight shapes"));
        }
        let (out, cache) = ops::gru_forward(
            self.value(input).data(),
            self.value(w_in).data(),
            self.value(w_h).data(),
            self.value(bias).data(),
            time,
            din,
            hidden,
        );
        let value = Tensor::new(vec![time, hidden], out)?;
        Self::check_finite(&value, "gru")?;
        let ng = [input, w_in, w_h, bias].iter().any(|&v| self.needs(v));
        Ok(self.push(value, Op::Gru { input, w_in, w_h, bias, cache }, ng))
    }

    /// Scalar `Σ w_i x_i` against fixed weights.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(input).len() {
            return Err(shape_err("weighted_sum weights length"));
        }
        let s = self
            .value(input)
            .data()
            .iter()
            .zip(&weights)
            .fold(T::zero(), |acc, (&x, &w)| acc + x * w);
        let ng = self.needs(input);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input, weights }, ng))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len();
        self.weighted_sum(input, vec![T::one(); n])
    }

    /// Appends a node computed outside the graph.
    pub fn custom(&mut self, value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        Self::check_finite(&value, op.name())?;
        let ng = op.inputs().iter().any(|&v| self.needs(v));
        Ok(self.push(value, Op::Custom(op), ng))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(shape_err("backward requires a scalar root"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![T::one()])?);
        let mut visited = 0;
        for idx in (0..=root.0).rev() {
            visited += 1;
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(node, &grad)?;
            grads[idx] = Some(grad);
            for (var, g) in contributions {
                if !self.needs(var) {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn node_backward(&self, node: &Node<T>, grad: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let g = grad.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { input, kernel, stride } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let geom = ops::conv_geom(x, k, *stride)?;
                let (dx, dk) = ops::conv1d_backward(x.data(), k.data(), &geom, g, self.needs(*input));
                if let Some(dx) = dx {
                    out.push((*input, Tensor::new(x.shape().to_vec(), dx)?));
                }
                out.push((*kernel, Tensor::new(k.shape().to_vec(), dk)?));
            }
            Op::ChannelNorm { input, gain, bias, cache } => {
                let (c, t) = self.value(*input).dims2()?;
                let (dx, dg, db) = ops::channel_norm_backward(cache, self.value(*gain).data(), g, c, t);
                out.push((*input, Tensor::new(vec![c, t], dx)?));
                out.push((*gain, Tensor::new(self.value(*gain).shape().to_vec(), dg)?));
                out.push((*bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?));
            }
            Op::Relu(input) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gy)| if y > T::zero() { gy } else { T::zero() })
                    .collect();
                out.push((*input, Tensor::new(self.value(*input).shape().to_vec(), dx)?));
            }
            Op::Transpose(input) => out.push((*input, grad.transpose()?)),
            Op::Linear { input, weight, bias } => {
                let (n, din) = self.value(*input).dims2()?;
                let (dout, _) = self.value(*weight).dims2()?;
                let (dx, dw, db) = ops::linear_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    n,
                    din,
                    dout,
                    self.needs(*input),
                );
                if let Some(dx) = dx {
                    out.push((*input, Tensor::new(vec![n, din], dx)?));
                }
                out.push((*weight, Tensor::new(vec![dout, din], dw)?));
                out.push((*bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?));
            }
            Op::RowSlice { input, start } => {
                let src = self.value(*input);
                let c = src.cols();
                let mut dx = Tensor::zeros(src.shape());
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g);
                out.push((*input, dx));
            }
            Op::Gru { input, w_in, w_h, bias, cache } => {
                let (time, din) = self.value(*input).dims2()?;
                let hidden = self.value(*w_h).cols();
                let gg = ops::gru_backward(
                    self.value(*input).data(),
                    self.value(*w_in).data(),
                    self.value(*w_h).data(),
                    node.value.data(),
                    cache,
                    g,
                    time,
                    din,
                    hidden,
                    self.needs(*input),
                );
                if let Some(dx) = gg.dx {
                    out.push((*input, Tensor::new(vec![time, din], dx)?));
                }
                out.push((*w_in, Tensor::new(self.value(*w_in).shape().to_vec(), gg.dw_in)?));
                out.push((*w_h, Tensor::new(self.value(*w_h).shape().to_vec(), gg.dw_h)?));
                out.push((*bias, Tensor::new(self.value(*bias).shape().to_vec(), gg.dbias)?));
            }
            Op::WeightedSum { input, weights } => {
                let s = g[0];
                let dx = weights.iter().map(|&w| w * s).collect();
                out.push((*input, Tensor::new(self.value(*input).shape().to_vec(), dx)?));
            }
            Op::Custom(op) => {
                let inputs: Vec<&Tensor<T>> = op.inputs().iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&inputs, &node.value, grad);
                for (&var, gv) in op.inputs().iter().zip(gs) {
                    if let Some(gv) = gv {
                        out.push((var, gv));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    /// `None` when no path connects `v` to the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when it does not influence the root.
    pub fn get_or_zeros(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    /// Number of nodes the reverse sweep stepped through.
    pub fn visited(&self) -> usize {
        self.visited
    }
}
