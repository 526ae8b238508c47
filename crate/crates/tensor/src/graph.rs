use rand::Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{self, BnBatch};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics from a training-mode batch norm, for running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var> },
    BnTrain { x: Var, gamma: Var, beta: Var, stats: BnBatch<T> },
    BnEval { x: Var, gamma: Var, beta: Var, mean: Tensor<T>, var: Tensor<T>, eps: T },
    Relu { x: Var },
    MaxPool { x: Var, arg: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    Reshape { x: Var },
    Dense { x: Var, w: Var, b: Var },
    Softmax { x: Var, axis: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Sum { x: Var },
    Scale { x: Var, c: T },
    Column { x: Var, j: usize },
    CrossEntropy { probs: Var, targets: Tensor<T> },
    SoftmaxCrossEntropy { logits: Var, probs: Tensor<T>, targets: Tensor<T> },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    keep: bool,
    op: Op<T>,
}

/// Append-only tape of tensor operations.
///
/// Node order is a topological order by construction, so the graph is acyclic
/// and backward is a single reverse sweep. A graph supports one backward pass;
/// intermediate values and gradients are released during that pass unless
/// the node was marked with [`Graph::retain`].
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Panic as soon as an op produces a non-finite value. On by default in
    /// builds with debug assertions.
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; its gradient is kept after backward.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            grad: None,
            requires_grad,
            keep: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Keep this node's value and gradient through backward.
    pub fn retain(&mut self, v: Var) {
        self.nodes[v.0].keep = true;
    }

    /// Value of a node. Panics if the value was released by backward.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("node value released by backward; call retain() first")
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], op: Op<T>) -> Var {
        if self.check_finite {
            assert!(value.all_finite(), "non-finite value produced by op");
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            grad: None,
            requires_grad,
            keep: false,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::GraphConsumed)
        } else {
            Ok(())
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_open()?;
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(y, &parents, Op::Conv2d { x, w, b }))
    }

    /// Batch norm over `[N,C,H,W]`. In train mode the returned statistics
    /// should be folded into the caller's running averages.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        self.check_open()?;
        match mode {
            Mode::Train => {
                let (y, stats) =
                    kernels::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
                let out = BatchStats {
                    mean: stats.mean.clone(),
                    var: stats.var.clone(),
                };
                let v = self.push(y, &[x, gamma, beta], Op::BnTrain { x, gamma, beta, stats });
                Ok((v, Some(out)))
            }
            Mode::Eval => {
                let y = kernels::batchnorm_eval(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    running_mean,
                    running_var,
                    eps,
                )?;
                let op = Op::BnEval {
                    x,
                    gamma,
                    beta,
                    mean: running_mean.clone(),
                    var: running_var.clone(),
                    eps,
                };
                Ok((self.push(y, &[x, gamma, beta], op), None))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let y = kernels::relu(self.value(x));
        Ok(self.push(y, &[x], Op::Relu { x }))
    }

    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let (y, arg) = kernels::maxpool2x2(self.value(x))?;
        Ok(self.push(y, &[x], Op::MaxPool { x, arg }))
    }

    /// Inverted dropout: survivors scaled by `1/(1-p)` in train mode,
    /// identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        self.check_open()?;
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let y = Tensor::from_vec(xv.shape().to_vec(), data)?;
        Ok(self.push(y, &[x], Op::Dropout { x, mask }))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let xv = self.value(x);
        if xv.ndim() == 0 {
            return Err(TensorError::shape("flatten", "[N, ...]", xv.shape()));
        }
        let n = xv.shape()[0];
        let rest = xv.shape()[1..].iter().product();
        let y = xv.clone().reshape(&[n, rest])?;
        Ok(self.push(y, &[x], Op::Reshape { x }))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let y = kernels::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, &[x, w, b], Op::Dense { x, w, b }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_open()?;
        let y = kernels::softmax(self.value(x), axis)?;
        Ok(self.push(y, &[x], Op::Softmax { x, axis }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |get| Op::Add { a: get.0, b: get.1 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |get| Op::Mul { a: get.0, b: get.1 })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        make: impl Fn((Var, Var)) -> Op<T>,
    ) -> Result<Var> {
        self.check_open()?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::shape(op, format!("{:?}", av.shape()), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let y = Tensor::from_vec(av.shape().to_vec(), data)?;
        Ok(self.push(y, &[a, b], make((a, b))))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[x], Op::Sum { x })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(y, &[x], Op::Scale { x, c })
    }

    /// Column `j` of a `[N, M]` matrix as a `[N]` vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        self.check_open()?;
        let xv = self.value(x);
        let (n, m) = match *xv.shape() {
            [n, m] if j < m => (n, m),
            _ => return Err(TensorError::shape("column", format!("[N, M > {j}]"), xv.shape())),
        };
        let data = (0..n).map(|i| xv.data()[i * m + j]).collect();
        let y = Tensor::from_vec(vec![n], data)?;
        Ok(self.push(y, &[x], Op::Column { x, j }))
    }

    /// Clamped categorical cross-entropy of softmax outputs against one-hot targets.
    pub fn cross_entropy(&mut self, probs: Var, targets: Tensor<T>) -> Result<Var> {
        self.check_open()?;
        let l = kernels::cross_entropy(self.value(probs), &targets)?;
        Ok(self.push(Tensor::scalar(l), &[probs], Op::CrossEntropy { probs, targets }))
    }

    /// Cross-entropy of `softmax(logits)` over axis 1 against targets whose
    /// rows sum to one. The value is the clamped loss of
    /// [`cross_entropy`](Self::cross_entropy); the gradient is the
    /// log-softmax form `(p - y) / N`, which agrees with it wherever the clamp
    /// is inactive and keeps confidently wrong samples trainable.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        self.check_open()?;
        let probs = kernels::softmax(self.value(logits), 1)?;
        let l = kernels::cross_entropy(&probs, &targets)?;
        let op = Op::SoftmaxCrossEntropy { logits, probs, targets };
        Ok(self.push(Tensor::scalar(l), &[logits], op))
    }

    /// Reverse sweep from a scalar `loss`, populating gradients of every node
    /// that requires them. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_open()?;
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(Tensor::ones(&shape));
        for i in (0..=loss.0).rev() {
            let node = &mut self.nodes[i];
            let keep = node.keep;
            let dy = if keep { node.grad.clone() } else { node.grad.take() };
            let Some(dy) = dy else {
                if !keep {
                    self.nodes[i].value = None;
                }
                continue;
            };
            if self.nodes[i].requires_grad {
                let contributions = self.local_grads(i, &dy)?;
                for (p, g) in contributions {
                    self.accumulate(p, g);
                }
            }
            if !keep {
                self.nodes[i].value = None;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, p: Var, g: Tensor<T>) {
        let node = &mut self.nodes[p.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let g = kernels::conv2d_backward(val(*x), val(*w), dy, self.needs(*x))?;
                if let Some(dx) = g.dx {
                    out.push((*x, dx));
                }
                out.push((*w, g.dw));
                if let Some(b) = b {
                    out.push((*b, g.db));
                }
            }
            Op::BnTrain { x, gamma, beta, stats } => {
                let g = kernels::batchnorm_train_backward(val(*x), val(*gamma), stats, dy)?;
                out.extend([(*x, g.dx), (*gamma, g.dgamma), (*beta, g.dbeta)]);
            }
            Op::BnEval { x, gamma, beta, mean, var, eps } => {
                let g = kernels::batchnorm_eval_backward(val(*x), val(*gamma), mean, var, *eps, dy)?;
                out.extend([(*x, g.dx), (*gamma, g.dgamma), (*beta, g.dbeta)]);
            }
            Op::Relu { x } => {
                let xv = val(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*x, Tensor::from_vec(xv.shape().to_vec(), data)?));
            }
            Op::MaxPool { x, arg } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                let d = dx.data_mut();
                for (&src, &g) in arg.iter().zip(dy.data()) {
                    d[src] += g;
                }
                out.push((*x, dx));
            }
            Op::Dropout { x, mask } => {
                let data = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                out.push((*x, Tensor::from_vec(dy.shape().to_vec(), data)?));
            }
            Op::Reshape { x } => {
                out.push((*x, dy.clone().reshape(val(*x).shape())?));
            }
            Op::Dense { x, w, b } => {
                let g = kernels::dense_backward(val(*x), val(*w), dy)?;
                out.extend([(*x, g.dx), (*w, g.dw), (*b, g.db)]);
            }
            Op::Softmax { axis, x } => {
                let y = self.nodes[i].value.as_ref().expect("softmax output");
                out.push((*x, kernels::softmax_backward(y, dy, *axis)?));
            }
            Op::Add { a, b } => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let da = dy.data().iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                let db = dy.data().iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                out.push((*a, Tensor::from_vec(av.shape().to_vec(), da)?));
                out.push((*b, Tensor::from_vec(bv.shape().to_vec(), db)?));
            }
            Op::Sum { x } => {
                out.push((*x, Tensor::full(val(*x).shape(), dy.data()[0])));
            }
            Op::Scale { x, c } => {
                out.push((*x, dy.map(|g| g * *c)));
            }
            Op::Column { x, j } => {
                let xv = val(*x);
                let m = xv.shape()[1];
                let mut dx = Tensor::zeros(xv.shape());
                for (r, &g) in dy.data().iter().enumerate() {
                    dx.data_mut()[r * m + j] = g;
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy { probs, targets } => {
                let d = kernels::cross_entropy_backward(val(*probs), targets, dy.data()[0]);
                out.push((*probs, d));
            }
            Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                let d = kernels::softmax_cross_entropy_backward(probs, targets, dy.data()[0]);
                out.push((*logits, d));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_is_identity() {
        let w0 = Tensor::<f64>::from_vec(vec![2, 2], vec![0.5, -1.5, 2.0, 3.25]).unwrap();
        let mut g = Graph::new();
        let w = g.param(w0.clone());
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &w0);
    }

    #[test]
    fn second_backward_fails() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::ones(&[3]));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss), Err(TensorError::GraphConsumed));
        assert_eq!(g.relu(w), Err(TensorError::GraphConsumed));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::ones(&[3]));
        let y = g.relu(w).unwrap();
        assert_eq!(g.backward(y), Err(TensorError::NotScalar(vec![3])));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded() {
        let x0 = Tensor::<f32>::from_vec(vec![1, 8], (0..8).map(|i| i as f32).collect()).unwrap();
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = g.dropout(x, 0.2, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(y), &x0);

        let run = |seed| {
            let mut g = Graph::new();
            let x = g.input(Tensor::<f32>::ones(&[1, 1000]));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = g.dropout(x, 0.2, Mode::Train, &mut rng).unwrap();
            g.value(y).clone()
        };
        let a = run(5);
        assert_eq!(a, run(5));
        for &v in a.data() {
            assert!(v == 0.0 || (v - 1.25).abs() < 1e-6);
        }
        let dropped = a.data().iter().filter(|&&v| v == 0.0).count();
        assert!((150..250).contains(&dropped), "{dropped}");
    }

    #[test]
    fn intermediate_values_released_unless_retained() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::ones(&[2]));
        let a = g.relu(w).unwrap();
        let b = g.relu(a).unwrap();
        g.retain(b);
        let loss = g.sum(b);
        g.backward(loss).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn residual_add_accumulates_both_paths() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[3], 2.0));
        let y = g.scale(x, 3.0);
        let z = g.add(x, y).unwrap();
        let loss = g.sum(z);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 4.0, 4.0]);
    }
}
