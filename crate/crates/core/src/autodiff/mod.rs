//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Ops whose
//! inputs require a gradient are recorded; everything else is a constant.
//! [`Graph::backward`] returns gradients for leaves only. [`Graph::input_gradient`]
//! builds the input gradient of a piecewise-linear subgraph as new graph nodes so
//! a later `backward` can differentiate through it (gradient penalties).

mod check;
pub(crate) mod conv;
mod double;
mod ops;

use std::collections::{BTreeMap, HashMap};

pub use check::{finite_difference_gradient, gradient_check, GradCheck, ScalarProgram};
pub(crate) use ops::bilinear_resize_forward;
use ops::Saved;
pub use ops::{BatchStats, NormMode, Op, OpAttrs};

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamId, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Record<T: Float> {
    op: Op,
    inputs: Vec<Var>,
    saved: Saved<T>,
}

#[derive(Debug)]
struct Node<T: Float> {
    value: Tensor<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    record: Option<Record<T>>,
}

/// The tape. Nodes are appended in evaluation order so inputs always precede
/// the records that consume them.
#[derive(Debug)]
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Float = f32> {
    leaves: HashMap<Var, Tensor<T>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            requires_grad: false,
            param: None,
            record: None,
        })
    }

    /// A leaf that collects a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            requires_grad: true,
            param: None,
            record: None,
        })
    }

    /// A leaf bound to a stored parameter; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>, trainable: bool) -> Var {
        self.push(Node {
            value,
            requires_grad: trainable,
            param: Some(id),
            record: None,
        })
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (differentiable) ops on the tape.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.record.is_some()).count()
    }

    /// Evaluates `op` and records it when any input requires a gradient.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        self.apply_with_stats(op, inputs).map(|(v, _)| v)
    }

    /// Name-based entry point into the catalogue.
    pub fn apply_named(&mut self, name: &str, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let op = Op::by_name(name, attrs)?;
        self.apply(op, inputs)
    }

    pub(crate) fn apply_with_stats(
        &mut self,
        op: Op,
        inputs: &[Var],
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::Contract(format!("unknown graph node {}", bad.0)));
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let fwd = ops::forward(&op, &values)?;
        if !fwd.value.is_finite() {
            return Err(Error::NonFinite {
                index: self.nodes.len(),
                op: op.name(),
                phase: "forward",
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = requires_grad.then(|| Record {
            op,
            inputs: inputs.to_vec(),
            saved: fwd.saved,
        });
        let var = self.push(Node {
            value: fwd.value,
            requires_grad,
            param: None,
            record,
        });
        Ok((var, fwd.stats))
    }

    /// Value-identical copy that blocks all reverse flow.
    pub fn stop_gradient(&mut self, var: Var) -> Var {
        let value = self.nodes[var.0].value.clone();
        self.constant(value)
    }

    /// Reverse pass from a scalar `loss`. Every leaf that requires a gradient
    /// gets an entry, zero when no path reaches it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        let mut leaves = HashMap::new();
        let mut params: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for index in (0..=loss.0).rev() {
            let node = &self.nodes[index];
            if !node.requires_grad {
                continue;
            }
            let Some(record) = &node.record else {
                let g = grads[index]
                    .take()
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                if let Some(id) = node.param {
                    match params.get_mut(&id) {
                        // The same parameter bound twice as a leaf: contributions add.
                        Some(acc) => {
                            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            params.insert(id, g.clone());
                        }
                    }
                }
                leaves.insert(Var(index), g);
                continue;
            };
            let Some(grad) = grads[index].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = record
                .inputs
                .iter()
                .map(|v| &self.nodes[v.0].value)
                .collect();
            let needs: Vec<bool> = record
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = ops::backward(
                &record.op,
                &inputs,
                &node.value,
                &record.saved,
                &grad,
                &needs,
            );
            for (input, g) in record.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        index,
                        op: record.op.name(),
                        phase: "backward",
                    });
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    // Convenience wrappers for the common ops.

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.apply(Op::Linear, &inputs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.apply(Op::Conv2d { stride, pad }, &inputs)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.apply(
            Op::ConvTranspose2d {
                stride,
                pad,
                output_pad,
            },
            &inputs,
        )
    }

    /// Training-mode batch norm; also returns the batch statistics.
    pub fn batch_norm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (v, stats) = self.apply_with_stats(
            Op::BatchNorm2d {
                mode: NormMode::Train,
                eps,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats.expect("training batch norm reports statistics")))
    }

    pub fn batch_norm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
        eps: f64,
    ) -> Result<Var> {
        self.apply(
            Op::BatchNorm2d {
                mode: NormMode::Eval,
                eps,
            },
            &[x, gamma, beta, running_mean, running_var],
        )
    }

    pub fn instance_norm2d(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(Op::InstanceNorm2d { eps }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.apply(Op::LeakyRelu { slope }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale { factor }, &[x])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Flatten, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Op::Reshape { shape }, &[x])
    }

    pub fn broadcast(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Op::Broadcast { shape }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::GlobalAvgPool, &[x])
    }

    pub fn bilinear_resize(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        self.apply(Op::BilinearResize { height, width }, &[x])
    }

    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::L1Loss, &[a, b])
    }

    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MseLoss, &[a, b])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.apply(
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[x])
    }

    pub fn norm2(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Norm2, &[x])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[5.0]);
        // Nothing required a gradient, so nothing was recorded.
        assert_eq!(g.recorded_ops(), 0);
    }

    #[test]
    fn tanh_of_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![2, 3]));
        let y = g.tanh(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_chain_halves_to_two() {
        let mut g = Graph::<f32>::new();
        let mut x = g.constant(Tensor::zeros(vec![1, 1, 32, 32]));
        let mut c = 1;
        for (cout, size) in [(4, 16), (4, 8), (8, 4), (8, 2)] {
            let w = g.constant(Tensor::zeros(vec![cout, c, 4, 4]));
            x = g.conv2d(x, w, None, 2, 1).unwrap();
            assert_eq!(g.value(x).shape(), &[1, cout, size, size]);
            c = cout;
        }
    }

    #[test]
    fn shape_and_catalogue_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![3, 2]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(
            g.apply_named("softplus", &[a], &OpAttrs::default()),
            Err(Error::UnknownOp(_))
        ));
        let y = g.apply_named("relu", &[a], &OpAttrs::default()).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_branch_gives_zero_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 3.0]));
        let d = g.stop_gradient(x);
        let loss = g.mean(d).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn stop_gradient_product() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[3.0, 5.0]));
        let w = g.variable(t(&[2], &[7.0, 11.0]));
        let xs = g.stop_gradient(x);
        let p = g.mul(xs, w).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn stop_gradient_in_sum_keeps_one_path() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[0.5, -1.5]));
        let xs = g.stop_gradient(x);
        let y = g.add(x, xs).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_param_leaves_accumulate() {
        let mut g = Graph::<f64>::new();
        let id = ParamId(7);
        let w = t(&[2], &[1.0, 1.0]);
        let a = g.param(id, w.clone(), true);
        let b = g.param(id, w, true);
        let x = g.constant(t(&[2], &[2.0, 3.0]));
        let pa = g.mul(a, x).unwrap();
        let pb = g.mul(b, x).unwrap();
        let s = g.add(pa, pb).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(id).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn nan_is_reported_in_forward() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1], &[f64::MAX]));
        let y = g.scale(x, 10.0);
        assert!(matches!(
            y,
            Err(Error::NonFinite {
                phase: "forward",
                ..
            })
        ));
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.variable(
                Tensor::from_f64(
                    vec![2, 1, 8, 8],
                    &(0..128)
                        .map(|i| (i as f64 * 0.37).sin())
                        .collect::<Vec<_>>(),
                )
                .unwrap(),
            );
            let w = g.variable(
                Tensor::from_f64(
                    vec![3, 1, 4, 4],
                    &(0..48).map(|i| (i as f64 * 0.11).cos()).collect::<Vec<_>>(),
                )
                .unwrap(),
            );
            let y = g.conv2d(x, w, None, 2, 1).unwrap();
            let y = g.leaky_relu(y, 0.2).unwrap();
            g.value(y).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
