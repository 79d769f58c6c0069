//! Multi-head feed-forward network with exact backpropagation and Adam.
//!
//! Parameters live in one flat vector. Layer `l` maps `in_l -> out_l` and
//! occupies `out_l * in_l` weights (row-major, one row per output unit)
//! followed by `out_l` biases; layers are stored input to output. Hidden
//! layers apply the configured activation, the final layer is linear.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative<T: Real>(self, z: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                T::one() - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Clip every output to `[-b, b]`. Off in normal use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_bound: Option<f64>,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            activation: Activation::Relu,
            output_bound: None,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "all layer widths must be >= 1: {} -> {:?} -> {}",
                self.input_dim, self.hidden, self.output_dim
            )));
        }
        if let Some(b) = self.output_bound {
            if !(b > 0.0) {
                return Err(Error::InvalidSpec("output bound must be positive".into()));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| o * i + o).sum()
    }

    /// `(weight_offset, bias_offset)` per layer in the flat vector.
    fn offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.layer_dims()
            .into_iter()
            .map(|(i, o)| {
                let w = off;
                let b = off + o * i;
                off = b + o;
                (w, b)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct NetworkParams<T> {
    pub spec: NetworkSpec,
    pub values: Vec<T>,
}

/// Per-layer cache from a batched forward pass.
struct Trace<T> {
    /// Inputs to each layer, `inputs[0]` is the batch itself.
    inputs: Vec<Matrix<T>>,
    /// Pre-activations of each layer.
    pre: Vec<Matrix<T>>,
}

/// He-style uniform initialisation: weights in `±sqrt(6 / fan_in)`, zero biases.
pub fn init_params<T: Real>(spec: &NetworkSpec, rng: &mut SeededRng) -> Result<NetworkParams<T>> {
    spec.validate()?;
    let mut values = vec![T::zero(); spec.param_count()];
    for ((fan_in, fan_out), (w_off, _)) in spec.layer_dims().into_iter().zip(spec.offsets()) {
        let limit = (6.0 / fan_in as f64).sqrt();
        for v in &mut values[w_off..w_off + fan_in * fan_out] {
            let u: f64 = rng.uniform();
            *v = T::lit((2.0 * u - 1.0) * limit);
        }
    }
    Ok(NetworkParams {
        spec: spec.clone(),
        values,
    })
}

impl<T: Real> NetworkParams<T> {
    pub fn from_values(spec: NetworkSpec, values: Vec<T>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(Error::dims(format!(
                "spec needs {} parameters, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite network parameter".into()));
        }
        Ok(Self { spec, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Weight matrix (`out x in`) of layer `l`.
    pub fn weight(&self, l: usize) -> Matrix<T> {
        let (fan_in, fan_out) = self.spec.layer_dims()[l];
        let (w, _) = self.spec.offsets()[l];
        Matrix::new(fan_out, fan_in, self.values[w..w + fan_in * fan_out].to_vec())
            .expect("layout is consistent with spec")
    }

    pub fn bias(&self, l: usize) -> &[T] {
        let (_, fan_out) = self.spec.layer_dims()[l];
        let (_, b) = self.spec.offsets()[l];
        &self.values[b..b + fan_out]
    }

    /// Mutable view of the final layer's weights and biases.
    pub fn output_layer_mut(&mut self) -> &mut [T] {
        let last = self.spec.layer_dims().len() - 1;
        let (w, _) = self.spec.offsets()[last];
        &mut self.values[w..]
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.spec.input_dim {
            return Err(Error::dims(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        let out = self.forward_batch(&Matrix::new(1, x.len(), x.to_vec())?)?;
        Ok(out.into_vec())
    }

    /// Forward pass over the rows of `x`.
    pub fn forward_batch(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.trace(x)?.0)
    }

    fn trace(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Trace<T>)> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::dims(format!(
                "batch has {} columns, network expects {}",
                x.cols(),
                self.spec.input_dim
            )));
        }
        let n_layers = self.spec.layer_dims().len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut a = x.clone();
        for l in 0..n_layers {
            let w = self.weight(l);
            let b = self.bias(l);
            let mut z = a.matmul_t(&w);
            for i in 0..z.rows() {
                for (zij, &bj) in z.row_mut(i).iter_mut().zip(b) {
                    *zij += bj;
                }
            }
            let next = if l + 1 < n_layers {
                let act = self.spec.activation;
                z.map(|v| act.apply(v))
            } else if let Some(bound) = self.spec.output_bound {
                let bound = T::lit(bound);
                z.map(|v| v.max(-bound).min(bound))
            } else {
                z.clone()
            };
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok((a, Trace { inputs, pre }))
    }

    /// Gradient of `Σ_rows ⟨upstream_row, forward(x_row)⟩` with respect to
    /// every parameter, in the flat layout.
    pub fn backward(&self, x: &Matrix<T>, upstream: &Matrix<T>) -> Result<Vec<T>> {
        if upstream.shape() != (x.rows(), self.spec.output_dim) {
            return Err(Error::dims(format!(
                "upstream is {}x{}, expected {}x{}",
                upstream.rows(),
                upstream.cols(),
                x.rows(),
                self.spec.output_dim
            )));
        }
        let (_, trace) = self.trace(x)?;
        Ok(self.backward_from(&trace, upstream))
    }

    /// Forward pass plus a closure producing the upstream gradient from the
    /// outputs, followed by backpropagation. Saves a second forward pass.
    pub fn forward_backward<F>(&self, x: &Matrix<T>, upstream_of: F) -> Result<(Matrix<T>, Vec<T>)>
    where
        F: FnOnce(&Matrix<T>) -> Result<Matrix<T>>,
    {
        let (out, trace) = self.trace(x)?;
        let up = upstream_of(&out)?;
        if up.shape() != out.shape() {
            return Err(Error::dims("upstream gradient shape differs from outputs"));
        }
        let g = self.backward_from(&trace, &up);
        Ok((out, g))
    }

    fn backward_from(&self, trace: &Trace<T>, upstream: &Matrix<T>) -> Vec<T> {
        let dims = self.spec.layer_dims();
        let offsets = self.spec.offsets();
        let n_layers = dims.len();
        let mut grads = vec![T::zero(); self.values.len()];
        let mut delta = upstream.clone();
        if let Some(bound) = self.spec.output_bound {
            let bound = T::lit(bound);
            let z = &trace.pre[n_layers - 1];
            for (d, &zv) in delta.as_mut_slice().iter_mut().zip(z.as_slice()) {
                if zv.abs() > bound {
                    *d = T::zero();
                }
            }
        }
        for l in (0..n_layers).rev() {
            let (w_off, b_off) = offsets[l];
            let (fan_in, fan_out) = dims[l];
            let gw = delta.t_matmul(&trace.inputs[l]);
            grads[w_off..w_off + fan_in * fan_out].copy_from_slice(gw.as_slice());
            for i in 0..delta.rows() {
                for (g, &d) in grads[b_off..b_off + fan_out].iter_mut().zip(delta.row(i)) {
                    *g += d;
                }
            }
            if l > 0 {
                let w = self.weight(l);
                let mut prev = delta.matmul(&w);
                let act = self.spec.activation;
                for (p, &z) in prev.as_mut_slice().iter_mut().zip(trace.pre[l - 1].as_slice()) {
                    *p *= act.derivative(z);
                }
                delta = prev;
            }
        }
        grads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam descent step on `params`.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::dims(format!(
            "adam: {} params, {} grads, {} state entries",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let bc1 = T::one() - b1.powi(state.step as i32);
    let bc2 = T::one() - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sample_std_normal;

    fn net(spec: &NetworkSpec, seed: u64) -> NetworkParams<f64> {
        init_params(spec, &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let spec = NetworkSpec::new(2, vec![3], 1);
        let a = net(&spec, 9);
        let b = net(&spec, 9);
        assert_eq!(a, b);
        assert_eq!(a.weight(0).shape(), (3, 2));
        assert_eq!(a.weight(1).shape(), (1, 3));
        assert!(a.bias(0).iter().all(|&b| b == 0.0));
        let limit = 3f64.sqrt();
        assert!(a.weight(0).as_slice().iter().all(|w| w.abs() <= limit));
    }

    #[test]
    fn zero_width_is_invalid() {
        let spec = NetworkSpec::new(2, vec![0], 1);
        assert!(matches!(
            init_params::<f64>(&spec, &mut SeededRng::new(0)),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn zero_weights_return_bias() {
        let spec = NetworkSpec::new(3, vec![4], 2);
        let mut p = net(&spec, 1);
        p.values.iter_mut().for_each(|v| *v = 0.0);
        let n = p.values.len();
        p.values[n - 2] = 1.5;
        p.values[n - 1] = -0.25;
        assert_eq!(p.forward(&[9.0, -3.0, 2.0]).unwrap(), vec![1.5, -0.25]);
    }

    #[test]
    fn single_linear_layer() {
        let spec = NetworkSpec::new(2, vec![], 2);
        let p = NetworkParams::from_values(spec, vec![2.0, 0.0, 0.0, 3.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.forward(&[1.0, 1.0]).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn relu_clips_negative_preactivation() {
        // identity hidden layer with biases [-1, 2], output sums nothing but copies
        let spec = NetworkSpec::new(2, vec![2], 2);
        let values = vec![
            1.0, 0.0, 0.0, 1.0, // hidden W
            -1.0, 2.0, // hidden b
            1.0, 0.0, 0.0, 1.0, // output W
            0.0, 0.0,
        ];
        let p = NetworkParams::from_values(spec, values).unwrap();
        assert_eq!(p.forward(&[0.0, 0.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let p = net(&NetworkSpec::new(2, vec![3], 1), 0);
        assert!(matches!(p.forward(&[1.0]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = net(&NetworkSpec::new(3, vec![5, 4], 2), 2);
        let x: Matrix<f64> = sample_std_normal(&mut SeededRng::new(3), 6, 3).unwrap();
        let g = p.backward(&x, &Matrix::zeros(6, 2)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_bad_upstream() {
        let p = net(&NetworkSpec::new(3, vec![5], 2), 2);
        let x: Matrix<f64> = Matrix::zeros(4, 3);
        assert!(matches!(
            p.backward(&x, &Matrix::zeros(4, 3)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let spec = NetworkSpec::new(3, vec![], 2);
        let p = net(&spec, 4);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let up = Matrix::from_rows(&[vec![0.3, -1.1]]).unwrap();
        let g = p.backward(&x, &up).unwrap();
        let expected = [
            0.3, -0.6, 0.15, //
            -1.1, 2.2, -0.55, //
            0.3, -1.1,
        ];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn doubling_last_layer_doubles_output() {
        let mut p = net(&NetworkSpec::new(2, vec![6, 6], 3), 5);
        let x = [0.4, -1.3];
        let y = p.forward(&x).unwrap();
        p.output_layer_mut().iter_mut().for_each(|v| *v *= 2.0);
        let y2 = p.forward(&x).unwrap();
        for (a, b) in y.iter().zip(&y2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_bound_clips() {
        let mut spec = NetworkSpec::new(1, vec![], 1);
        spec.output_bound = Some(1.0);
        let p = NetworkParams::from_values(spec, vec![10.0, 0.0]).unwrap();
        assert_eq!(p.forward(&[1.0]).unwrap(), vec![1.0]);
        let g = p
            .backward(
                &Matrix::from_rows(&[vec![1.0]]).unwrap(),
                &Matrix::from_rows(&[vec![1.0]]).unwrap(),
            )
            .unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0, 0.0, 0.0];
        let g = [0.5_f64, -3.0, 1e-2];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            assert!((pi + cfg.lr * gi.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut p = vec![0.2, 0.1];
            let mut st = AdamState::new(2);
            st.step = 3;
            st.m = vec![0.1, -0.1];
            st.v = vec![0.01, 0.02];
            adam_step(&mut p, &[0.3, 0.4], &mut st, &cfg).unwrap();
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_mismatch() {
        let mut st = AdamState::<f64>::new(2);
        assert!(adam_step(&mut [0.0], &[0.0], &mut st, &AdamConfig::default()).is_err());
    }
}
