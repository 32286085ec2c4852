//! Identity and attribute encoders, the loss-side encoders, and latent
//! concatenation.
//!
//! Every encoder is a [`ParamSet`] plus a graph forward pass, so the same
//! object serves plain inference and differentiable training. The toy
//! backends are regenerated from fixed seeds; pretrained weights can be
//! dropped in through [`load_encoder`].

use std::path::Path;
use std::sync::Arc;

use crate::archive::TensorArchive;
use crate::error::{Error, Result};
use crate::graph::{Graph, ResizePlan, Var};
use crate::imaging::{Image, CHANNELS};
use crate::nn::{seeded_rng, Activation, Bound, Mlp, ParamSet, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub const ID_DIM: usize = 512;
pub const AT_DIM: usize = 2048;
pub const Z_DIM: usize = ID_DIM + AT_DIM;
pub const LANDMARK_DIM: usize = 136;

/// `(height, width)` of the toy identity encoder's periocular input.
pub const TOY_ID_RESOLUTION: (usize, usize) = (16, 32);
pub const TOY_AT_RESOLUTION: (usize, usize) = (64, 64);
pub const TOY_FACE_RESOLUTION: (usize, usize) = (32, 32);
pub const TOY_LANDMARK_RESOLUTION: (usize, usize) = (16, 16);

const SEED_ID: u64 = 0x1d;
const SEED_AT: u64 = 0xa7;
const SEED_FACE: u64 = 0xfa;
const SEED_LANDMARK: u64 = 0x68;
const SEED_FEATURES: u64 = 0xfe;

fn checked(values: Vec<f64>, len: usize, what: &str) -> Result<Vec<f64>> {
    if values.len() != len {
        return Err(Error::dim(format!("{what} needs length {len}, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue(format!("{what} has non-finite entries")));
    }
    Ok(values)
}

macro_rules! code_type {
    ($name:ident, $len:expr, $what:literal) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Result<Self> {
                checked(values, $len, $what).map(Self)
            }

            pub fn zeros() -> Self {
                Self(vec![0.0; $len])
            }

            pub fn values(&self) -> &[f64] {
                &self.0
            }

            pub fn into_values(self) -> Vec<f64> {
                self.0
            }
        }
    };
}

code_type!(IdentityCode, ID_DIM, "identity code");
code_type!(AttributeCode, AT_DIM, "attribute code");
code_type!(LatentZ, Z_DIM, "latent z");

impl LatentZ {
    pub fn identity_part(&self) -> &[f64] {
        &self.0[..ID_DIM]
    }

    pub fn attribute_part(&self) -> &[f64] {
        &self.0[ID_DIM..]
    }
}

/// `z = [z_id ∥ z_at]`.
pub fn concat_latent(id: &IdentityCode, at: &AttributeCode) -> LatentZ {
    let mut v = Vec::with_capacity(Z_DIM);
    v.extend_from_slice(id.values());
    v.extend_from_slice(at.values());
    LatentZ(v)
}

/// A differentiable image encoder.
pub trait EncoderBackend: Send + Sync {
    /// `(height, width)` the encoder expects.
    fn input_resolution(&self) -> (usize, usize);
    fn output_dim(&self) -> usize;
    fn trainable(&self) -> bool;
    fn params(&self) -> &ParamSet;
    /// `image` is a `[3, h, w]` node at [`Self::input_resolution`]; returns a
    /// vector node of length [`Self::output_dim`].
    fn forward(&self, g: &mut Graph, params: &Bound, image: Var) -> Var;

    /// Plain inference.
    fn encode(&self, image: &Image) -> Result<Vec<f64>> {
        if image.dims() != self.input_resolution() {
            return Err(Error::dim(format!(
                "encoder expects {:?} input, got {:?}",
                self.input_resolution(),
                image.dims()
            )));
        }
        let mut g = Graph::new();
        let b = self.params().bind(&mut g, false);
        let x = g.constant(image.to_tensor());
        let y = self.forward(&mut g, &b, x);
        Ok(g.value(y).data().to_vec())
    }
}

/// A multi-layer feature pyramid used by the perceptual and style losses.
pub trait FeatureExtractor: Send + Sync {
    fn params(&self) -> &ParamSet;
    /// Feature maps `φ_l`, each `[c_l, h_l, w_l]`.
    fn features(&self, g: &mut Graph, params: &Bound, image: Var) -> Vec<Var>;
}

/// 68-point landmark regressor; may fail on inputs it cannot handle.
pub trait LandmarkBackend: Send + Sync {
    fn input_resolution(&self) -> (usize, usize);
    fn params(&self) -> &ParamSet;
    /// Returns a node holding the flattened 136-vector.
    fn predict(&self, g: &mut Graph, params: &Bound, image: Var) -> Result<Var>;
}

/// Flatten, then a fully connected network.
#[derive(Debug, Clone)]
pub struct MlpEncoder {
    mlp: Mlp,
    resolution: (usize, usize),
    trainable: bool,
}

impl MlpEncoder {
    pub fn new(mlp: Mlp, resolution: (usize, usize), trainable: bool) -> Result<Self> {
        let want = CHANNELS * resolution.0 * resolution.1;
        if mlp.input_dim() != want {
            return Err(Error::dim(format!(
                "network takes {} inputs but {:?} RGB images have {want}",
                mlp.input_dim(),
                resolution
            )));
        }
        Ok(Self {
            mlp,
            resolution,
            trainable,
        })
    }

    /// Two affine layers with a tanh between them; the first bias is zero so
    /// an all-zero input yields the second bias exactly.
    pub fn toy(resolution: (usize, usize), hidden: usize, output: usize, trainable: bool, seed: u64) -> Self {
        let dims = [CHANNELS * resolution.0 * resolution.1, hidden, output];
        let mlp = Mlp::seeded(
            &dims,
            Activation::Tanh,
            Activation::Identity,
            1.0,
            0.1,
            &mut seeded_rng(seed),
        );
        Self {
            mlp,
            resolution,
            trainable,
        }
    }

    /// Frozen identity encoder `E_id`.
    pub fn toy_identity() -> Self {
        Self::toy(TOY_ID_RESOLUTION, 64, ID_DIM, false, SEED_ID)
    }

    /// Trainable attribute encoder `E_at`.
    pub fn toy_attribute() -> Self {
        Self::toy(TOY_AT_RESOLUTION, 32, AT_DIM, true, SEED_AT)
    }

    /// Face embedder `E_face` used by the identity loss.
    pub fn toy_face() -> Self {
        Self::toy(TOY_FACE_RESOLUTION, 64, ID_DIM, false, SEED_FACE)
    }

    /// Landmark regressor `E_lnd`.
    pub fn toy_landmarks() -> Self {
        Self::toy(TOY_LANDMARK_RESOLUTION, 64, LANDMARK_DIM, false, SEED_LANDMARK)
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

    pub fn set_trainable(&mut self, t: bool) {
        self.trainable = t;
    }

    /// Archive layout: tensors `layer{i}.weight` / `layer{i}.bias` and meta
    /// keys `height`, `width`, `hidden` (`tanh`, `leaky_relu`, `identity`).
    pub fn from_archive(a: &TensorArchive, trainable: bool) -> Result<Self> {
        let meta = |k: &str| {
            a.meta
                .get(k)
                .ok_or_else(|| Error::Archive(format!("missing meta key `{k}`")))
        };
        let parse = |k: &str| -> Result<usize> {
            meta(k)?
                .parse()
                .map_err(|_| Error::Archive(format!("meta `{k}` is not an integer")))
        };
        let resolution = (parse("height")?, parse("width")?);
        let hidden = match meta("hidden").map(String::as_str).unwrap_or("tanh") {
            "tanh" => Activation::Tanh,
            "leaky_relu" => Activation::LeakyRelu,
            "identity" => Activation::Identity,
            other => return Err(Error::Archive(format!("unknown activation `{other}`"))),
        };
        let mut dims = Vec::new();
        let mut i = 0;
        while let Some(w) = a.get(&format!("layer{i}.weight")) {
            if w.shape().len() != 2 {
                return Err(Error::Archive(format!("layer{i}.weight is not a matrix")));
            }
            if i == 0 {
                dims.push(w.shape()[1]);
            }
            dims.push(w.shape()[0]);
            i += 1;
        }
        if dims.len() < 2 {
            return Err(Error::Archive("archive holds no layers".into()));
        }
        let mut mlp = Mlp::seeded(&dims, hidden, Activation::Identity, 1.0, 0.0, &mut seeded_rng(0));
        let names: Vec<String> = mlp.params().names().map(String::from).collect();
        let src: Vec<(&str, &Tensor)> = names
            .iter()
            .map(|n| Ok((n.as_str(), a.require(n)?)))
            .collect::<Result<_>>()?;
        mlp.params_mut().load_from(src)?;
        Self::new(mlp, resolution, trainable)
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for (n, t) in self.mlp.params().iter() {
            a.insert(n, t.clone());
        }
        a.meta.insert("height".into(), self.resolution.0.to_string());
        a.meta.insert("width".into(), self.resolution.1.to_string());
        let hidden = match self.mlp.hidden_activation() {
            Activation::Tanh => "tanh",
            Activation::LeakyRelu => "leaky_relu",
            _ => "identity",
        };
        a.meta.insert("hidden".into(), hidden.into());
        a
    }
}

impl EncoderBackend for MlpEncoder {
    fn input_resolution(&self) -> (usize, usize) {
        self.resolution
    }

    fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    fn trainable(&self) -> bool {
        self.trainable
    }

    fn params(&self) -> &ParamSet {
        self.mlp.params()
    }

    fn forward(&self, g: &mut Graph, params: &Bound, image: Var) -> Var {
        let n = g.value(image).len();
        let flat = g.reshape(image, vec![n]);
        self.mlp.forward_bound(g, params, flat)
    }
}

impl LandmarkBackend for MlpEncoder {
    fn input_resolution(&self) -> (usize, usize) {
        self.resolution
    }

    fn params(&self) -> &ParamSet {
        self.mlp.params()
    }

    fn predict(&self, g: &mut Graph, params: &Bound, image: Var) -> Result<Var> {
        if self.mlp.output_dim() != LANDMARK_DIM {
            return Err(Error::LandmarkBackend(format!(
                "regressor emits {} values, expected {LANDMARK_DIM}",
                self.mlp.output_dim()
            )));
        }
        Ok(EncoderBackend::forward(self, g, params, image))
    }
}

/// Two 3×3 conv blocks with LeakyReLU, separated by 2×2 average pooling.
/// Exposes both activations as feature maps.
#[derive(Debug, Clone)]
pub struct ConvFeatures {
    params: ParamSet,
}

impl ConvFeatures {
    pub fn toy() -> Self {
        Self::seeded(&[3, 8, 16], SEED_FEATURES)
    }

    /// `channels = [3, c1, c2, …]`, one block per consecutive pair.
    pub fn seeded(channels: &[usize], seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut params = ParamSet::new();
        for (i, pair) in channels.windows(2).enumerate() {
            let std = (2.0 / (pair[0] * 9) as f64).sqrt();
            params.push(
                format!("conv{i}.weight"),
                crate::nn::gaussian_tensor(&mut rng, &[pair[1], pair[0], 3, 3], std),
            );
            params.push(
                format!("conv{i}.bias"),
                crate::nn::gaussian_tensor(&mut rng, &[pair[1]], 0.05),
            );
        }
        Self { params }
    }

    pub fn n_layers(&self) -> usize {
        self.params.len() / 2
    }
}

impl FeatureExtractor for ConvFeatures {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn features(&self, g: &mut Graph, params: &Bound, image: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.n_layers());
        let mut h = image;
        for i in 0..self.n_layers() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            let c = g.conv2d(h, params.var(2 * i));
            let c = g.channel_bias(c, params.var(2 * i + 1));
            h = g.leaky_relu(c, LEAKY_SLOPE);
            out.push(h);
        }
        out
    }
}

/// Global average of every feature channel across all levels, used as the
/// descriptor for distribution metrics.
pub fn pooled_features(ext: &dyn FeatureExtractor, image: &Image) -> Vec<f64> {
    let mut g = Graph::new();
    let b = ext.params().bind(&mut g, false);
    let x = g.constant(image.to_tensor());
    let mut out = Vec::new();
    for f in ext.features(&mut g, &b, x) {
        let s = g.shape(f);
        let n = s[1] * s[2];
        out.extend(g.value(f).data().chunks(n).map(|c| c.iter().sum::<f64>() / n as f64));
    }
    out
}

/// Resize a `[3, h, w]` node to `target`, skipping the op when sizes agree.
pub fn resize_node(g: &mut Graph, x: Var, target: (usize, usize)) -> Var {
    let s = g.shape(x);
    let (h, w) = (s[1], s[2]);
    if (h, w) == target {
        return x;
    }
    g.resize(x, Arc::new(ResizePlan::bilinear(h, w, target.0, target.1)))
}

fn require_dim(backend: &dyn EncoderBackend, dim: usize, role: &str) -> Result<()> {
    if backend.output_dim() != dim {
        return Err(Error::dim(format!(
            "{role} encoder must emit {dim} values, backend emits {}",
            backend.output_dim()
        )));
    }
    Ok(())
}

/// `z_id = E_id(I_c)`; the crop must already be at the backend resolution.
pub fn encode_identity(crop: &Image, backend: &dyn EncoderBackend) -> Result<IdentityCode> {
    require_dim(backend, ID_DIM, "identity")?;
    IdentityCode::new(backend.encode(crop)?)
}

/// `z_at = E_at(I_in)`.
pub fn encode_attributes(masked: &Image, backend: &dyn EncoderBackend) -> Result<AttributeCode> {
    require_dim(backend, AT_DIM, "attribute")?;
    AttributeCode::new(backend.encode(masked)?)
}

/// Which encoder slot a backend fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderRole {
    Identity,
    Attribute,
    Face,
    Landmarks,
}

impl EncoderRole {
    pub fn toy(self) -> MlpEncoder {
        match self {
            EncoderRole::Identity => MlpEncoder::toy_identity(),
            EncoderRole::Attribute => MlpEncoder::toy_attribute(),
            EncoderRole::Face => MlpEncoder::toy_face(),
            EncoderRole::Landmarks => MlpEncoder::toy_landmarks(),
        }
    }

    fn output_dim(self) -> usize {
        match self {
            EncoderRole::Identity | EncoderRole::Face => ID_DIM,
            EncoderRole::Attribute => AT_DIM,
            EncoderRole::Landmarks => LANDMARK_DIM,
        }
    }
}

/// Resolve a backend spec: `toy`, or `archive:<path>` for external weights.
/// A missing or unreadable archive falls back to the toy backend with a
/// warning.
pub fn load_encoder(spec: &str, role: EncoderRole) -> Result<MlpEncoder> {
    let trainable = role == EncoderRole::Attribute;
    match spec.split_once(':') {
        None if spec == "toy" => Ok(role.toy()),
        Some(("archive", path)) => {
            let loaded = TensorArchive::load(Path::new(path))
                .and_then(|a| MlpEncoder::from_archive(&a, trainable))
                .and_then(|e| {
                    if e.output_dim() == role.output_dim() {
                        Ok(e)
                    } else {
                        Err(Error::dim(format!(
                            "archive emits {} values, {role:?} slot needs {}",
                            e.output_dim(),
                            role.output_dim()
                        )))
                    }
                });
            match loaded {
                Ok(e) => Ok(e),
                Err(err) => {
                    log::warn!("{role:?} encoder `{path}` unavailable ({err}); using toy backend");
                    Ok(role.toy())
                }
            }
        }
        _ => Err(Error::Config(format!("unknown encoder backend `{spec}`"))),
    }
}
