//! Differentiable input gradients for piecewise-linear subgraphs.
//!
//! Each supported op's vector-Jacobian product is itself expressed with
//! catalogue ops, so the returned gradient is an ordinary graph node. Activation
//! second derivatives are zero: the relu/leaky-relu mask is a constant.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

impl<T: Float> Graph<T> {
    /// Gradient of `sum(output)` with respect to `wrt`, as a differentiable node.
    ///
    /// For a per-sample output `[B, 1]` whose samples do not interact this is the
    /// per-sample input gradient. `wrt` must require a gradient so that the path
    /// to `output` was recorded.
    pub fn input_gradient(&mut self, output: Var, wrt: Var) -> Result<Var> {
        if !self.nodes[wrt.0].requires_grad {
            return Err(Error::Contract(
                "input_gradient needs `wrt` to require a gradient".into(),
            ));
        }
        if output.0 < wrt.0 {
            return Err(Error::Contract("output precedes wrt on the tape".into()));
        }
        let end = output.0;
        let mut depends = vec![false; end + 1];
        depends[wrt.0] = true;
        for i in wrt.0 + 1..=end {
            if let Some(rec) = &self.nodes[i].record {
                depends[i] = rec.inputs.iter().any(|v| v.0 <= end && depends[v.0]);
            }
        }
        if !depends[end] {
            let zeros = Tensor::zeros(self.nodes[wrt.0].value.shape().to_vec());
            return Ok(self.constant(zeros));
        }

        let seed = Tensor::ones(self.nodes[end].value.shape().to_vec());
        let mut grads: Vec<Option<Var>> = vec![None; end + 1];
        grads[end] = Some(self.constant(seed));

        for i in (wrt.0 + 1..=end).rev() {
            if !depends[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let (op, inputs) = {
                let rec = self.nodes[i]
                    .record
                    .as_ref()
                    .expect("dependent nodes are recorded");
                (rec.op.clone(), rec.inputs.clone())
            };
            let name = op.name();
            let unsupported = || Error::UnsupportedDoubleBackprop { index: i, op: name };
            let mut contributions: Vec<(Var, Var)> = Vec::new();
            match &op {
                Op::Linear => {
                    if weights_on_path(&depends, &inputs[1..]) {
                        return Err(unsupported());
                    }
                    if depends[inputs[0].0] {
                        contributions.push((inputs[0], self.matmul(g, inputs[1])?));
                    }
                }
                Op::Conv2d { stride, pad } => {
                    if weights_on_path(&depends, &inputs[1..]) {
                        return Err(unsupported());
                    }
                    if depends[inputs[0].0] {
                        let in_shape = self.nodes[inputs[0].0].value.shape().to_vec();
                        let out_shape = self.nodes[i].value.shape().to_vec();
                        let k_shape = self.nodes[inputs[1].0].value.shape().to_vec();
                        // Rows dropped by the floor in the forward size formula come back as output padding.
                        let pad_for = |axis: usize| {
                            let natural = ((out_shape[axis] - 1) * stride + k_shape[axis])
                                .checked_sub(2 * pad)?;
                            in_shape[axis].checked_sub(natural)
                        };
                        let output_pad = match (pad_for(2), pad_for(3)) {
                            (Some(h), Some(w)) if h == w => h,
                            _ => return Err(unsupported()),
                        };
                        let gx =
                            self.conv_transpose2d(g, inputs[1], None, *stride, *pad, output_pad)?;
                        contributions.push((inputs[0], gx));
                    }
                }
                Op::ConvTranspose2d { stride, pad, .. } => {
                    if weights_on_path(&depends, &inputs[1..]) {
                        return Err(unsupported());
                    }
                    if depends[inputs[0].0] {
                        let gx = self.conv2d(g, inputs[1], None, *stride, *pad)?;
                        contributions.push((inputs[0], gx));
                    }
                }
                Op::Relu | Op::LeakyRelu { .. } => {
                    let slope = match &op {
                        Op::LeakyRelu { slope } => T::of(*slope),
                        _ => T::zero(),
                    };
                    let mask = self.nodes[inputs[0].0].value.map(|v| {
                        if v > T::zero() {
                            T::one()
                        } else {
                            slope
                        }
                    });
                    let mask = self.constant(mask);
                    contributions.push((inputs[0], self.mul(g, mask)?));
                }
                Op::Add => {
                    for &input in &inputs {
                        if depends[input.0] {
                            contributions.push((input, g));
                        }
                    }
                }
                Op::Mul => {
                    let (a, b) = (inputs[0], inputs[1]);
                    match (depends[a.0], depends[b.0]) {
                        (true, true) => return Err(unsupported()),
                        (true, false) => contributions.push((a, self.mul(g, b)?)),
                        (false, true) => contributions.push((b, self.mul(g, a)?)),
                        (false, false) => {}
                    }
                }
                Op::Scale { factor } => {
                    contributions.push((inputs[0], self.scale(g, *factor)?));
                }
                Op::Flatten | Op::Reshape { .. } => {
                    let shape = self.nodes[inputs[0].0].value.shape().to_vec();
                    contributions.push((inputs[0], self.reshape(g, shape)?));
                }
                Op::Sum | Op::Mean => {
                    let shape = self.nodes[inputs[0].0].value.shape().to_vec();
                    let n = shape.iter().product::<usize>();
                    let ones = vec![1; shape.len()];
                    let g1 = self.reshape(g, ones)?;
                    let mut gx = self.broadcast(g1, shape)?;
                    if matches!(op, Op::Mean) {
                        gx = self.scale(gx, 1.0 / n as f64)?;
                    }
                    contributions.push((inputs[0], gx));
                }
                Op::GlobalAvgPool => {
                    let shape = self.nodes[inputs[0].0].value.shape().to_vec();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let g4 = self.reshape(g, vec![b, c, 1, 1])?;
                    let gx = self.broadcast(g4, shape)?;
                    contributions.push((inputs[0], self.scale(gx, 1.0 / (h * w) as f64)?));
                }
                _ => return Err(unsupported()),
            }
            for (input, contribution) in contributions {
                grads[input.0] = Some(match grads[input.0] {
                    Some(acc) => self.add(acc, contribution)?,
                    None => contribution,
                });
            }
        }
        match grads[wrt.0] {
            Some(g) => Ok(g),
            None => {
                let zeros = Tensor::zeros(self.nodes[wrt.0].value.shape().to_vec());
                Ok(self.constant(zeros))
            }
        }
    }
}

/// Weights that themselves depend on `wrt` would make the op bilinear in it.
fn weights_on_path(depends: &[bool], others: &[Var]) -> bool {
    others.iter().any(|v| v.0 < depends.len() && depends[v.0])
}
