//! Parameter containers, small network building blocks and the Adam optimizer.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Deterministic RNG used for every seeded initialization and sampling path.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// An ordered set of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Arc<Tensor>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), Arc::new(t)));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t.as_ref()))
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_ref())
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[index].1)
    }

    /// Mutable views of every tensor, in order.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.entries
            .iter_mut()
            .map(|(_, t)| Arc::make_mut(t).data_mut())
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Register every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param_shared(t.clone())
                } else {
                    g.constant_shared(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Replace values from `(name, tensor)` pairs; names and shapes must match
    /// exactly.
    pub fn load_from<'a>(&mut self, source: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let source: Vec<_> = source.into_iter().collect();
        if source.len() != self.entries.len() {
            return Err(Error::Archive(format!(
                "expected {} tensors, archive provides {}",
                self.entries.len(),
                source.len()
            )));
        }
        for ((name, slot), (src_name, src)) in self.entries.iter_mut().zip(source) {
            if name != src_name || slot.shape() != src.shape() {
                return Err(Error::Archive(format!(
                    "tensor `{src_name}` {:?} does not match `{name}` {:?}",
                    src.shape(),
                    slot.shape()
                )));
            }
            *slot = Arc::new(src.clone());
        }
        Ok(())
    }
}

/// Graph leaves for a [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every bound tensor (zeros where none flowed).
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v, g.shape(v))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Tanh,
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Fully connected network: `dims[0] → dims[1] → … → dims[n]`, with
/// `hidden` after every layer but the last and `output` after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: ParamSet,
}

impl Mlp {
    /// Weights ~ N(0, gain²/fan_in); first-layer bias zero, later biases
    /// N(0, bias_std²).
    pub fn seeded(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        gain: f64,
        bias_std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let mut params = ParamSet::new();
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = gain / (fan_in as f64).sqrt();
            params.push(
                format!("layer{i}.weight"),
                gaussian_tensor(rng, &[fan_out, fan_in], std),
            );
            let b = if i == 0 {
                Tensor::zeros(&[fan_out])
            } else {
                gaussian_tensor(rng, &[fan_out], bias_std)
            };
            params.push(format!("layer{i}.bias"), b);
        }
        Self {
            dims: dims.to_vec(),
            hidden,
            output,
            params,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn forward_bound(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let mut h = x;
        let n = self.n_layers();
        for i in 0..n {
            let z = g.matvec(b.var(2 * i), h);
            let z = g.add(z, b.var(2 * i + 1));
            let act = if i + 1 == n { self.output } else { self.hidden };
            h = act.apply(g, z);
        }
        h
    }

    /// Forward pass with the parameters bound as constants.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let b = self.params.bind(g, false);
        self.forward_bound(g, &b, x)
    }

    /// Evaluate on a plain vector.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::vector(x.to_vec()));
        let y = self.forward(&mut g, xv);
        g.value(y).data().to_vec()
    }

    /// Graph expression for `∇ₓ f(x)` of a scalar-output network with
    /// LeakyReLU hidden layers and identity output. The expression stays
    /// differentiable in the weights, so penalties built from it can be
    /// back-propagated into the parameters.
    pub fn input_gradient_bound(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        assert_eq!(self.output_dim(), 1, "input gradient needs a scalar output");
        assert_eq!(self.output, Activation::Identity);
        assert_eq!(self.hidden, Activation::LeakyRelu);
        let n = self.n_layers();
        let mut h = x;
        let mut masks = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let z = g.matvec(b.var(2 * i), h);
            let z = g.add(z, b.var(2 * i + 1));
            let slope: Vec<f64> = g
                .value(z)
                .data()
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE })
                .collect();
            masks.push(Tensor::vector(slope));
            h = g.leaky_relu(z, LEAKY_SLOPE);
        }
        let one = g.constant(Tensor::vector(vec![1.0]));
        let mut grad = g.matvec_t(b.var(2 * (n - 1)), one);
        for i in (0..n - 1).rev() {
            let m = g.constant(masks[i].clone());
            let gm = g.mul(grad, m);
            grad = g.matvec_t(b.var(2 * i), gm);
        }
        grad
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. One moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(cfg: AdamConfig, p: &ParamSet) -> Self {
        let sizes: Vec<usize> = p.tensors().map(Tensor::len).collect();
        Self::new(cfg, &sizes)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        let same =
            |a: &[Vec<f64>], b: &[Vec<f64>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::Archive("optimizer moment shapes do not match".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = grads[k][i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    pub fn step_params(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        let mut slices = params.slices_mut();
        let g: Vec<&[f64]> = grads.iter().map(Tensor::data).collect();
        self.step_slices(&mut slices, &g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(AdamConfig::new(0.01), &[3]);
        let mut p = vec![1.0, -1.0, 0.0];
        let g = vec![2.0, -0.5, 0.0];
        adam.step_slices(&mut [p.as_mut_slice()], &[g.as_slice()]);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 0.99).abs() < 1e-9);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut adam = Adam::new(AdamConfig::new(0.05), &[2]);
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            adam.step_slices(&mut [p.as_mut_slice()], &[g.as_slice()]);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn seeded_mlp_is_reproducible() {
        let a = Mlp::seeded(
            &[4, 3, 2],
            Activation::Tanh,
            Activation::Identity,
            1.0,
            0.1,
            &mut seeded_rng(5),
        );
        let b = Mlp::seeded(
            &[4, 3, 2],
            Activation::Tanh,
            Activation::Identity,
            1.0,
            0.1,
            &mut seeded_rng(5),
        );
        assert_eq!(a.params().digest(), b.params().digest());
        let c = Mlp::seeded(
            &[4, 3, 2],
            Activation::Tanh,
            Activation::Identity,
            1.0,
            0.1,
            &mut seeded_rng(6),
        );
        assert_ne!(a.params().digest(), c.params().digest());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let d = Mlp::seeded(
            &[5, 7, 6, 1],
            Activation::LeakyRelu,
            Activation::Identity,
            1.4,
            0.1,
            &mut seeded_rng(11),
        );
        let x0 = vec![0.3, -0.7, 0.2, 0.9, -0.1];
        let mut g = Graph::new();
        let b = d.params().bind(&mut g, false);
        let x = g.constant(Tensor::vector(x0.clone()));
        let grad = d.input_gradient_bound(&mut g, &b, x);
        let analytic = g.value(grad).data().to_vec();
        for i in 0..5 {
            let f = |delta: f64| {
                let mut xs = x0.clone();
                xs[i] += delta;
                d.eval(&xs)[0]
            };
            let numeric = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((numeric - analytic[i]).abs() < 1e-6, "{numeric} vs {}", analytic[i]);
        }
    }
}
