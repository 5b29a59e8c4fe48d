//! Central finite differences, the oracle every analytic gradient is held to.

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::{relative_error, Float, Tensor};

/// Central-difference estimate `(f(x + h e_k) - f(x - h e_k)) / 2h` per coordinate.
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, h: f64) -> Result<Tensor<T>>
where
    T: Float,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for k in 0..x.numel() {
        let orig = x.data()[k];
        probe.data_mut()[k] = orig + T::of(h);
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - T::of(h);
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        out.push((plus - minus) / T::of(2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// A scalar-valued computation that can be replayed at any precision.
pub trait ScalarProgram {
    fn eval<T: Float>(&self, graph: &mut Graph<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Norm-wise relative error per input.
    pub per_input: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the analytic gradient at precision `T` with 64-bit central differences
/// of the same program, evaluated at the `T`-rounded inputs.
pub fn gradient_check<T: Float, P: ScalarProgram>(
    program: &P,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Result<GradCheck> {
    let rounded: Vec<Tensor<T>> = inputs.iter().map(|t| t.cast::<T>()).collect();
    let mut graph = Graph::<T>::new();
    let vars: Vec<Var> = rounded.iter().map(|t| graph.variable(t.clone())).collect();
    let loss = program.eval(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;

    let base: Vec<Tensor<f64>> = rounded.iter().map(|t| t.cast::<f64>()).collect();
    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |probe: &Tensor<f64>| {
                let mut g = Graph::<f64>::new();
                let vs: Vec<Var> = base
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let out = program.eval(&mut g, &vs)?;
                Ok(g.value(out).item())
            },
            &base[i],
            h,
        )?;
        let analytic = grads
            .get(*var)
            .expect("every input is a leaf")
            .cast::<f64>();
        per_input.push(relative_error(analytic.data(), numeric.data()));
    }
    Ok(GradCheck { per_input })
}
