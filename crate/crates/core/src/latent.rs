//! Mapping network `M: Z → W` and the latent discriminator `D_w`.

use crate::encoders::{LatentZ, Z_DIM};
use crate::error::{Error, Result};
use crate::graph::{Graph, Unary, Var};
use crate::nn::{seeded_rng, Activation, Bound, Mlp, ParamSet};
use crate::tensor::Tensor;

pub const W_DIM: usize = 512;
pub const HIDDEN_DIM: usize = 512;
pub const DEFAULT_GAMMA: f64 = 10.0;
pub const DEFAULT_MAPPER_LAYERS: usize = 4;
pub const MAPPER_DEPTHS: [usize; 3] = [2, 4, 8];

const SEED_MAPPER: u64 = 0x3a;
const SEED_DISC: u64 = 0xd5;

#[derive(Debug, Clone, PartialEq)]
pub struct StyleW(Vec<f64>);

impl StyleW {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != W_DIM {
            return Err(Error::dim(format!(
                "style code needs length {W_DIM}, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("style code has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; W_DIM])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.0.clone())
    }
}

/// `n_layers` fully connected layers `2560 → 512 → … → 512`, LeakyReLU(0.2)
/// between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mapper {
    mlp: Mlp,
}

impl Mapper {
    pub fn seeded(n_layers: usize, seed: u64) -> Result<Self> {
        if !MAPPER_DEPTHS.contains(&n_layers) {
            return Err(Error::Config(format!("mapper depth must be 2, 4 or 8, got {n_layers}")));
        }
        let mut dims = vec![Z_DIM];
        dims.extend(std::iter::repeat_n(HIDDEN_DIM, n_layers - 1));
        dims.push(W_DIM);
        let mlp = Mlp::seeded(
            &dims,
            Activation::LeakyRelu,
            Activation::Identity,
            1.0,
            0.05,
            &mut seeded_rng(seed),
        );
        Ok(Self { mlp })
    }

    pub fn toy(n_layers: usize) -> Result<Self> {
        Self::seeded(n_layers, SEED_MAPPER)
    }

    pub fn n_layers(&self) -> usize {
        self.mlp.n_layers()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn params(&self) -> &ParamSet {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.mlp.params_mut()
    }

    pub fn forward(&self, g: &mut Graph, params: &Bound, z: Var) -> Var {
        self.mlp.forward_bound(g, params, z)
    }
}

/// `w = M(z)`.
pub fn map_to_w(z: &LatentZ, mapper: &Mapper) -> StyleW {
    StyleW(mapper.mlp.eval(z.values()))
}

/// Four fully connected layers `512 → 512 → 512 → 512 → 1` with
/// LeakyReLU(0.2); the output is a raw logit.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDiscriminator {
    mlp: Mlp,
}

impl LatentDiscriminator {
    pub fn seeded(seed: u64) -> Self {
        let dims = [W_DIM, HIDDEN_DIM, HIDDEN_DIM, HIDDEN_DIM, 1];
        let mlp = Mlp::seeded(
            &dims,
            Activation::LeakyRelu,
            Activation::Identity,
            1.0,
            0.05,
            &mut seeded_rng(seed),
        );
        Self { mlp }
    }

    pub fn toy() -> Self {
        Self::seeded(SEED_DISC)
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn params(&self) -> &ParamSet {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.mlp.params_mut()
    }

    pub fn forward(&self, g: &mut Graph, params: &Bound, w: Var) -> Var {
        self.mlp.forward_bound(g, params, w)
    }

    /// `∇_w D(w)` as a graph expression that stays differentiable in the
    /// discriminator parameters.
    pub fn input_gradient(&self, g: &mut Graph, params: &Bound, w: Var) -> Var {
        self.mlp.input_gradient_bound(g, params, w)
    }
}

pub fn discriminate_w(w: &StyleW, d: &LatentDiscriminator) -> f64 {
    d.mlp.eval(w.values())[0]
}

/// The three terms of the discriminator objective, each already averaged over
/// its batch: `−E log σ(D(real))`, `−E log(1 − σ(D(fake)))` and
/// `(γ/2) E ‖∇D(real)‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorTerms {
    pub real: f64,
    pub fake: f64,
    pub r1: f64,
}

impl DiscriminatorTerms {
    pub fn total(&self) -> f64 {
        self.real + self.fake + self.r1
    }
}

/// Graph nodes for [`adv_loss_d`]: `(real, fake, r1, total)`.
pub fn adv_loss_d_graph(
    g: &mut Graph,
    d: &LatentDiscriminator,
    params: &Bound,
    real: &[Var],
    fake: &[Var],
    gamma: f64,
) -> Result<[Var; 4]> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut real_terms = Vec::with_capacity(real.len());
    let mut r1_terms = Vec::with_capacity(real.len());
    for &w in real {
        let logit = d.forward(g, params, w);
        // −log σ(x) = softplus(−x)
        let neg = g.scale(logit, -1.0);
        real_terms.push(g.unary(neg, Unary::Softplus));
        if gamma != 0.0 {
            let grad = d.input_gradient(g, params, w);
            let sq = g.square(grad);
            r1_terms.push(g.sum(sq));
        }
    }
    let mut fake_terms = Vec::with_capacity(fake.len());
    for &w in fake {
        let logit = d.forward(g, params, w);
        // −log(1 − σ(x)) = softplus(x)
        fake_terms.push(g.unary(logit, Unary::Softplus));
    }
    let real_loss = mean_of(g, &real_terms);
    let fake_loss = mean_of(g, &fake_terms);
    let r1 = if r1_terms.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let m = mean_of(g, &r1_terms);
        g.scale(m, gamma / 2.0)
    };
    let t = g.add(real_loss, fake_loss);
    let total = g.add(t, r1);
    Ok([real_loss, fake_loss, r1, total])
}

/// Non-saturating discriminator loss with an R1 penalty on the real batch.
pub fn adv_loss_d(real: &[StyleW], fake: &[StyleW], d: &LatentDiscriminator, gamma: f64) -> Result<DiscriminatorTerms> {
    let mut g = Graph::new();
    let b = d.params().bind(&mut g, false);
    let rv: Vec<Var> = real.iter().map(|w| g.constant(w.to_tensor())).collect();
    let fv: Vec<Var> = fake.iter().map(|w| g.constant(w.to_tensor())).collect();
    let [r, f, p, _] = adv_loss_d_graph(&mut g, d, &b, &rv, &fv, gamma)?;
    Ok(DiscriminatorTerms {
        real: g.scalar(r),
        fake: g.scalar(f),
        r1: g.scalar(p),
    })
}

/// Graph node for [`adv_loss_g`].
pub fn adv_loss_g_graph(g: &mut Graph, d: &LatentDiscriminator, params: &Bound, fake: &[Var]) -> Result<Var> {
    if fake.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let terms: Vec<Var> = fake
        .iter()
        .map(|&w| {
            let logit = d.forward(g, params, w);
            let neg = g.scale(logit, -1.0);
            g.unary(neg, Unary::Softplus)
        })
        .collect();
    Ok(mean_of(g, &terms))
}

/// Generator-side term `−E log σ(D(fake))`.
pub fn adv_loss_g(fake: &[StyleW], d: &LatentDiscriminator) -> Result<f64> {
    let mut g = Graph::new();
    let b = d.params().bind(&mut g, false);
    let fv: Vec<Var> = fake.iter().map(|w| g.constant(w.to_tensor())).collect();
    let l = adv_loss_g_graph(&mut g, d, &b, &fv)?;
    Ok(g.scalar(l))
}

pub(crate) fn mean_of(g: &mut Graph, scalars: &[Var]) -> Var {
    let v = g.concat(scalars);
    g.mean(v)
}
