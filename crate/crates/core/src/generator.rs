//! Generator interface `G(w) → image`, the toy generator, and prior sampling.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imaging::{Image, CHANNELS};
use crate::latent::{StyleW, W_DIM};
use crate::nn::{gaussian_tensor, seeded_rng, Activation, Bound, Mlp, ParamSet, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub const TOY_GENERATOR_SEED: u64 = 0x6e;
pub const TOY_RESOLUTION: (usize, usize) = (64, 64);

/// A frozen, differentiable image generator.
pub trait GeneratorBackend: Send + Sync {
    fn latent_dim(&self) -> usize {
        W_DIM
    }
    fn resolution(&self) -> (usize, usize);
    /// Synthesis weights `θ_G`.
    fn params(&self) -> &ParamSet;
    /// `w` is a length-512 vector node; returns a `[3, h, w]` node with values
    /// in `[0, 1]`.
    fn synthesize(&self, g: &mut Graph, params: &Bound, w: Var) -> Var;
    /// The backend's own noise-to-style path.
    fn map_noise(&self, noise: &[f64]) -> StyleW;
    /// Digest over every frozen tensor the backend owns.
    fn digest(&self) -> [u8; 32] {
        self.params().digest()
    }
}

/// Render `G(w)`.
pub fn generate(w: &StyleW, backend: &dyn GeneratorBackend) -> Result<Image> {
    if w.values().len() != backend.latent_dim() {
        return Err(Error::dim(format!(
            "generator takes {}-d codes, got {}",
            backend.latent_dim(),
            w.values().len()
        )));
    }
    let mut g = Graph::new();
    let b = backend.params().bind(&mut g, false);
    let x = g.constant(w.to_tensor());
    let img = backend.synthesize(&mut g, &b, x);
    Image::from_tensor_clamped(g.value(img))
}

/// Dense `512 → c0·8·8`, then three (2× nearest upsample, 3×3 conv) stages
/// with LeakyReLU, and a sigmoid on the RGB output. A separate two-layer
/// network maps Gaussian noise to `w`.
#[derive(Debug, Clone)]
pub struct ToyGenerator {
    synthesis: ParamSet,
    mapping: Mlp,
    channels: [usize; 4],
    base: usize,
}

impl ToyGenerator {
    pub fn seeded(seed: u64) -> Self {
        let channels = [32, 16, 8, CHANNELS];
        let base = 8;
        let mut rng = seeded_rng(seed);
        let mut synthesis = ParamSet::new();
        let c0 = channels[0] * base * base;
        synthesis.push(
            "dense.weight",
            gaussian_tensor(&mut rng, &[c0, W_DIM], (1.0 / W_DIM as f64).sqrt()),
        );
        synthesis.push("dense.bias", gaussian_tensor(&mut rng, &[c0], 0.1));
        for i in 0..3 {
            let (cin, cout) = (channels[i], channels[i + 1]);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            synthesis.push(
                format!("conv{i}.weight"),
                gaussian_tensor(&mut rng, &[cout, cin, 3, 3], std),
            );
            synthesis.push(format!("conv{i}.bias"), gaussian_tensor(&mut rng, &[cout], 0.1));
        }
        let mapping = Mlp::seeded(
            &[W_DIM, W_DIM, W_DIM],
            Activation::LeakyRelu,
            Activation::Identity,
            1.0,
            0.0,
            &mut rng,
        );
        Self {
            synthesis,
            mapping,
            channels,
            base,
        }
    }

    pub fn toy() -> Self {
        Self::seeded(TOY_GENERATOR_SEED)
    }

    pub fn mapping(&self) -> &Mlp {
        &self.mapping
    }

    pub fn synthesis_params_mut(&mut self) -> &mut ParamSet {
        &mut self.synthesis
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert_params("synthesis", &self.synthesis);
        a.insert_params("mapping", self.mapping.params());
        a
    }

    /// Load weights exported by [`Self::to_archive`] (same architecture).
    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let mut g = Self::toy();
        a.load_params("synthesis", &mut g.synthesis)?;
        a.load_params("mapping", g.mapping.params_mut())?;
        Ok(g)
    }
}

impl GeneratorBackend for ToyGenerator {
    fn resolution(&self) -> (usize, usize) {
        (self.base * 8, self.base * 8)
    }

    fn params(&self) -> &ParamSet {
        &self.synthesis
    }

    fn synthesize(&self, g: &mut Graph, p: &Bound, w: Var) -> Var {
        let h = g.matvec(p.var(0), w);
        let h = g.add(h, p.var(1));
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let mut h = g.reshape(h, vec![self.channels[0], self.base, self.base]);
        for i in 0..3 {
            let up = g.upsample2(h);
            let c = g.conv2d(up, p.var(2 + 2 * i));
            let c = g.channel_bias(c, p.var(3 + 2 * i));
            h = if i < 2 {
                g.leaky_relu(c, LEAKY_SLOPE)
            } else {
                g.sigmoid(c)
            };
        }
        h
    }

    fn map_noise(&self, noise: &[f64]) -> StyleW {
        StyleW::new(self.mapping.eval(noise)).expect("mapping emits 512 finite values")
    }

    fn digest(&self) -> [u8; 32] {
        let mut all = self.synthesis.clone();
        for (n, t) in self.mapping.params().iter() {
            all.push(format!("mapping.{n}"), t.clone());
        }
        all.digest()
    }
}

/// Resolve a generator spec: `toy` or `archive:<path>`; an unreadable
/// archive falls back to the toy generator with a warning.
pub fn load_generator(spec: &str) -> Result<ToyGenerator> {
    match spec.split_once(':') {
        None if spec == "toy" => Ok(ToyGenerator::toy()),
        Some(("archive", path)) => {
            match TensorArchive::load(Path::new(path)).and_then(|a| ToyGenerator::from_archive(&a)) {
                Ok(g) => Ok(g),
                Err(e) => {
                    log::warn!("generator `{path}` unavailable ({e}); using toy backend");
                    Ok(ToyGenerator::toy())
                }
            }
        }
        _ => Err(Error::Config(format!("unknown generator backend `{spec}`"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSample {
    pub noise: Vec<f64>,
    pub w: StyleW,
    pub image: Image,
}

pub fn draw_noise(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    gaussian_tensor(rng, &[dim], 1.0).into_data()
}

/// Draw `count` standard-Gaussian noise vectors, map them to `w` through the
/// backend's own mapping and render each.
pub fn sample_prior(count: usize, seed: u64, backend: &dyn GeneratorBackend) -> Result<Vec<PriorSample>> {
    if count == 0 {
        return Err(Error::InvalidValue("sample count must be at least 1".into()));
    }
    let mut rng = seeded_rng(seed);
    (0..count)
        .map(|_| {
            let noise = draw_noise(&mut rng, backend.latent_dim());
            let w = backend.map_noise(&noise);
            let image = generate(&w, backend)?;
            Ok(PriorSample { noise, w, image })
        })
        .collect()
}

/// Pack samples into one archive: `noise` `[n, 512]`, `w` `[n, 512]`, and the
/// rendered images `[n, 3, h, w]`.
pub fn prior_archive(samples: &[PriorSample]) -> TensorArchive {
    let n = samples.len();
    let mut a = TensorArchive::new();
    let flat = |f: &dyn Fn(&PriorSample) -> &[f64]| samples.iter().flat_map(|s| f(s).to_vec()).collect::<Vec<_>>();
    a.insert("noise", Tensor::from_parts(vec![n, W_DIM], flat(&|s| &s.noise)));
    a.insert("w", Tensor::from_parts(vec![n, W_DIM], flat(&|s| s.w.values())));
    if let Some(first) = samples.first() {
        let (h, w) = first.image.dims();
        a.insert(
            "image",
            Tensor::from_parts(vec![n, CHANNELS, h, w], flat(&|s| s.image.data())),
        );
    }
    a
}
