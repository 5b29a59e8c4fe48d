//! Random-shape finite-difference checks for every catalogue op and for the
//! parameter gradient of the critic gradient penalty.

use i2i_core::autodiff::{
    finite_difference_gradient, gradient_check, Graph, OpAttrs, ScalarProgram, Var,
};
use i2i_core::losses::gradient_penalty;
use i2i_core::nn::{Activation, LayerSpec, Network, ParamStore, Session};
use i2i_core::tensor::relative_error;
use i2i_core::{Float, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL_F32: f64 = 1e-4;
pub const TOL_F64: f64 = 1e-6;
pub const SEEDS: [u64; 5] = [11, 23, 37, 41, 59];
/// Central-difference step; differences are always taken in 64-bit.
const H: f64 = 1e-5;

/// One op application plus a fixed random projection of its output to a scalar.
pub struct OpCase {
    pub name: &'static str,
    pub attrs: OpAttrs,
    pub inputs: Vec<Tensor<f64>>,
    projection: Option<Tensor<f64>>,
}

impl ScalarProgram for OpCase {
    fn eval<T: Float>(&self, graph: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let out = graph.apply_named(self.name, inputs, &self.attrs)?;
        match &self.projection {
            Some(p) => {
                let p = graph.constant(p.cast::<T>());
                let weighted = graph.mul(out, p)?;
                graph.sum(weighted)
            }
            None => graph.sum(out),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Values bounded away from zero, so kinks sit outside the difference stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Attribute variants with different gradient paths (batch norm: train, eval).
pub fn variants(name: &str) -> usize {
    if name == "batchnorm2d" {
        2
    } else {
        1
    }
}

/// A random instance of catalogue op `name`.
pub fn op_case(name: &'static str, seed: u64, variant: usize) -> OpCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(name));
    let mut attrs = OpAttrs::default();
    let r = &mut rng;
    let (b, c) = (dim(r, 1, 3), dim(r, 1, 3));
    let (h, w) = (dim(r, 2, 5), dim(r, 2, 5));
    let inputs = match name {
        "linear" => {
            let (i, o) = (dim(r, 1, 5), dim(r, 1, 4));
            vec![
                uniform(r, &[b, i], -1.0, 1.0),
                uniform(r, &[o, i], -1.0, 1.0),
                uniform(r, &[o], -1.0, 1.0),
            ]
        }
        "matmul" => {
            let (n, k, m) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            vec![
                uniform(r, &[n, k], -1.0, 1.0),
                uniform(r, &[k, m], -1.0, 1.0),
            ]
        }
        "conv2d" => {
            let (stride, pad) = (dim(r, 1, 2), dim(r, 0, 1));
            let k = dim(r, 1, 3).min(h + 2 * pad).min(w + 2 * pad);
            let co = dim(r, 1, 3);
            attrs.stride = Some(stride);
            attrs.pad = Some(pad);
            vec![
                uniform(r, &[b, c, h, w], -1.0, 1.0),
                uniform(r, &[co, c, k, k], -1.0, 1.0),
                uniform(r, &[co], -1.0, 1.0),
            ]
        }
        "conv_transpose2d" => {
            let stride = dim(r, 1, 2);
            let k = dim(r, 1, 4).max(stride);
            let pad = dim(r, 0, (k - 1) / 2);
            let co = dim(r, 1, 3);
            attrs.stride = Some(stride);
            attrs.pad = Some(pad);
            attrs.output_pad = Some(dim(r, 0, stride - 1));
            vec![
                uniform(r, &[b, c, h, w], -1.0, 1.0),
                uniform(r, &[c, co, k, k], -1.0, 1.0),
                uniform(r, &[co], -1.0, 1.0),
            ]
        }
        "batchnorm2d" => {
            let train = variant == 0;
            attrs.train = Some(train);
            let b = b.max(2);
            let mut v = vec![
                uniform(r, &[b, c, h, w], -2.0, 2.0),
                uniform(r, &[c], 0.5, 1.5),
                uniform(r, &[c], -0.5, 0.5),
            ];
            if !train {
                v.push(uniform(r, &[c], -0.5, 0.5));
                v.push(uniform(r, &[c], 0.5, 1.5));
            }
            v
        }
        "instancenorm2d" => vec![uniform(r, &[b, c, h, w], -2.0, 2.0)],
        "relu" => vec![off_zero(r, &[b, c, h])],
        "leaky_relu" => {
            attrs.slope = Some(r.random_range(0.01..0.5));
            vec![off_zero(r, &[b, c, h])]
        }
        "tanh" | "sigmoid" => vec![uniform(r, &[b, c, h], -2.0, 2.0)],
        "add" | "mul" => vec![
            uniform(r, &[b, c, h], -1.0, 1.0),
            uniform(r, &[b, c, h], -1.0, 1.0),
        ],
        "scale" => {
            attrs.factor = Some(r.random_range(-3.0..3.0));
            vec![uniform(r, &[b, c], -1.0, 1.0)]
        }
        "concat" => {
            let axis = dim(r, 0, 2);
            attrs.axis = Some(axis);
            let parts = dim(r, 1, 3);
            (0..parts)
                .map(|_| {
                    let mut s = vec![b, c, h];
                    s[axis] = dim(r, 1, 3);
                    uniform(r, &s, -1.0, 1.0)
                })
                .collect()
        }
        "flatten" => vec![uniform(r, &[b, c, h, w], -1.0, 1.0)],
        "reshape" => {
            attrs.shape = Some(vec![h, b * c]);
            vec![uniform(r, &[b, c, h], -1.0, 1.0)]
        }
        "broadcast" => {
            attrs.shape = Some(vec![b, c + 1, h]);
            vec![uniform(r, &[b, 1, h], -1.0, 1.0)]
        }
        "global_avg_pool" => vec![uniform(r, &[b, c, h, w], -1.0, 1.0)],
        "bilinear_resize" => {
            attrs.shape = Some(vec![dim(r, 1, 7), dim(r, 1, 7)]);
            vec![uniform(r, &[b, c, h, w], -1.0, 1.0)]
        }
        "l1_loss" => {
            let a = uniform(r, &[b, c, h], -1.0, 1.0);
            let d = off_zero(r, &[b, c, h]);
            let other: Vec<f64> = a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect();
            vec![a, Tensor::from_f64(vec![b, c, h], &other).unwrap()]
        }
        "mse_loss" => vec![
            uniform(r, &[b, c, h], -1.0, 1.0),
            uniform(r, &[b, c, h], -1.0, 1.0),
        ],
        "softmax_cross_entropy" => {
            let k = dim(r, 2, 5);
            attrs.labels = Some((0..b).map(|_| r.random_range(0..k)).collect());
            vec![uniform(r, &[b, k], -2.0, 2.0)]
        }
        "sum" | "mean" => vec![uniform(r, &[b, c, h], -1.0, 1.0)],
        "sqrt" => vec![uniform(r, &[b, c], 0.5, 2.0)],
        "norm2" => vec![off_zero(r, &[b, c, h])],
        other => panic!("no generator for op `{other}`"),
    };
    // A projection makes every output element matter with a distinct weight.
    let out_shape = {
        let mut g = Graph::<f64>::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = g.apply_named(name, &vs, &attrs).unwrap();
        g.value(out).shape().to_vec()
    };
    let projection =
        (out_shape.iter().product::<usize>() > 1).then(|| uniform(&mut rng, &out_shape, -1.0, 1.0));
    OpCase {
        name,
        attrs,
        inputs,
        projection,
    }
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Worst relative error over all inputs and variants of one op, at both precisions.
pub fn check_op(name: &'static str, seed: u64) -> (f64, f64) {
    let (mut e32, mut e64) = (0.0f64, 0.0f64);
    for variant in 0..variants(name) {
        let case = op_case(name, seed, variant);
        e32 = e32.max(
            gradient_check::<f32, _>(&case, &case.inputs, H)
                .unwrap()
                .max_rel_error(),
        );
        e64 = e64.max(
            gradient_check::<f64, _>(&case, &case.inputs, H)
                .unwrap()
                .max_rel_error(),
        );
    }
    (e32, e64)
}

/// Small critics built from the layer types the penalty differentiates twice.
fn critic_specs(conv: bool) -> Vec<LayerSpec> {
    let leaky = Activation::LeakyRelu { slope: 0.2 };
    if conv {
        vec![
            LayerSpec::conv(1, 3, 3, 2, 1).with_activation(leaky),
            LayerSpec::conv(3, 2, 3, 1, 1).with_activation(leaky),
            LayerSpec::conv(2, 1, 2, 1, 0),
            LayerSpec::global_avg_pool(),
        ]
    } else {
        vec![
            LayerSpec::linear(4, 6).with_activation(leaky),
            LayerSpec::linear(6, 1),
        ]
    }
}

fn penalty_value<T: Float>(
    store: &mut ParamStore<T>,
    net: &Network,
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> f64 {
    let mut s = Session::train(store);
    let p = gradient_penalty(&mut s, net, real, fake, 5).unwrap();
    s.graph.value(p).item().as_f64()
}

/// Relative error of the penalty's analytic parameter gradient at precision `T`
/// against 64-bit central differences, worst over all critic parameters.
pub fn check_penalty<T: Float>(seed: u64, conv: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = critic_specs(conv);
    let shape: Vec<usize> = if conv { vec![3, 1, 5, 5] } else { vec![3, 4] };
    let real = uniform(&mut rng, &shape, -1.0, 1.0);
    let fake = uniform(&mut rng, &shape, -1.0, 1.0);

    let mut store = ParamStore::<T>::new();
    let net = Network::build("critic", &specs, &mut store, seed).unwrap();
    let mut s = Session::train(&mut store);
    let p = gradient_penalty(&mut s, &net, &real.cast::<T>(), &fake.cast::<T>(), 5).unwrap();
    let grads = s.graph.backward(p).unwrap();

    let mut store64 = ParamStore::<f64>::new();
    let net64 = Network::build("critic", &specs, &mut store64, seed).unwrap();
    let ids: Vec<_> = store.trainable_ids().collect();
    for &id in &ids {
        // Start the oracle from the `T`-rounded weights.
        store64
            .set(id, store.get(id).unwrap().cast::<f64>())
            .unwrap();
    }
    let (real64, fake64) = (
        real.cast::<T>().cast::<f64>(),
        fake.cast::<T>().cast::<f64>(),
    );
    let mut worst = 0.0f64;
    for id in ids {
        let base = store64.get(id).unwrap().clone();
        let numeric = finite_difference_gradient(
            |probe: &Tensor<f64>| {
                let mut st = store64.clone();
                st.set(id, probe.clone())?;
                Ok(penalty_value(&mut st, &net64, &real64, &fake64))
            },
            &base,
            H,
        )
        .unwrap();
        let analytic = grads.param(id).expect("trainable parameter").cast::<f64>();
        worst = worst.max(relative_error(analytic.data(), numeric.data()));
    }
    worst
}
