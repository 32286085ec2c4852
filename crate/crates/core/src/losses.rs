//! Training and inversion objectives.
//!
//! Each loss exists as a graph builder (`*_graph`, differentiable in whatever
//! leaves the caller marks as parameters) and as a plain function on
//! [`Image`]s.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoders::{resize_node, ConvFeatures, EncoderBackend, FeatureExtractor, LandmarkBackend, MlpEncoder};
use crate::error::{Error, Result};
use crate::graph::{gaussian_kernel, Graph, Unary, Var};
use crate::imaging::Image;
use crate::latent::mean_of;
use crate::nn::Bound;

/// Per-scale exponents of five-scale MS-SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const MS_SSIM_WINDOW: usize = 11;
const MS_SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub id: f64,
    pub lnd: f64,
    pub perc: f64,
    pub style: f64,
    pub rec: f64,
    pub perc_o: f64,
    pub id_o: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            id: 1.0,
            lnd: 0.001,
            perc: 0.01,
            style: 0.1,
            rec: 1.0,
            perc_o: 0.01,
            id_o: 0.1,
            alpha: 0.84,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("id", self.id),
            ("lnd", self.lnd),
            ("perc", self.perc),
            ("style", self.style),
            ("rec", self.rec),
            ("perc_o", self.perc_o),
            ("id_o", self.id_o),
            ("alpha", self.alpha),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight `{name}` must be finite and ≥ 0, got {v}"
                )));
            }
        }
        if self.alpha > 1.0 {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Unweighted loss values for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub perc: f64,
    pub style: f64,
    pub id: f64,
    pub lnd: f64,
    pub rec: f64,
    pub adv_g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub perc: f64,
    pub style: f64,
    pub id: f64,
    pub lnd: f64,
    pub rec: f64,
    pub adv_g: f64,
    pub total: f64,
}

/// `λ_id L_id + λ_lnd L_lnd + λ_perc L_perc + λ_style L_style + λ_rec L_rec`.
/// The adversarial term is echoed but not part of the total.
pub fn loss_total(c: &LossComponents, w: &LossWeights) -> Result<LossBundle> {
    for (name, v) in [
        ("perc", c.perc),
        ("style", c.style),
        ("id", c.id),
        ("lnd", c.lnd),
        ("rec", c.rec),
        ("adv_g", c.adv_g),
    ] {
        if !v.is_finite() {
            return Err(Error::InvalidLoss {
                name: name.into(),
                value: v,
            });
        }
    }
    let total = compensated_sum(&[
        w.id * c.id,
        w.lnd * c.lnd,
        w.perc * c.perc,
        w.style * c.style,
        w.rec * c.rec,
    ]);
    Ok(LossBundle {
        perc: c.perc,
        style: c.style,
        id: c.id,
        lnd: c.lnd,
        rec: c.rec,
        adv_g: c.adv_g,
        total,
    })
}

/// Neumaier summation, so the result does not depend on term order.
fn compensated_sum(terms: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &t in terms {
        let s = sum + t;
        if sum.abs() >= t.abs() {
            comp += (sum - s) + t;
        } else {
            comp += (t - s) + sum;
        }
        sum = s;
    }
    sum + comp
}

/// `λ_perc^o · perc + λ_id^o · id`.
pub fn loss_opt_value(perc: f64, id: f64, w: &LossWeights) -> f64 {
    w.perc_o * perc + w.id_o * id
}

/// The frozen encoders the losses consult.
#[derive(Clone)]
pub struct LossBackends {
    pub features: Arc<dyn FeatureExtractor>,
    pub face: Arc<dyn EncoderBackend>,
    pub landmarks: Arc<dyn LandmarkBackend>,
}

impl LossBackends {
    pub fn toy() -> Self {
        Self {
            features: Arc::new(ConvFeatures::toy()),
            face: Arc::new(MlpEncoder::toy_face()),
            landmarks: Arc::new(MlpEncoder::toy_landmarks()),
        }
    }

    /// Register every backend's weights as constants of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph) -> BoundBackends<'a> {
        BoundBackends {
            backends: self,
            features: self.features.params().bind(g, false),
            face: self.face.params().bind(g, false),
            landmarks: self.landmarks.params().bind(g, false),
        }
    }
}

pub struct BoundBackends<'a> {
    pub backends: &'a LossBackends,
    pub features: Bound,
    pub face: Bound,
    pub landmarks: Bound,
}

fn check_same(g: &Graph, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(format!(
            "loss operands differ: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn sum_of(g: &mut Graph, scalars: &[Var]) -> Var {
    let v = g.concat(scalars);
    g.sum(v)
}

/// Mean absolute difference over every element.
pub fn l1_mean_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

/// `Σ_l mean |φ_l(a) − φ_l(b)|`.
pub fn perceptual_graph(g: &mut Graph, ext: &dyn FeatureExtractor, params: &Bound, a: Var, b: Var) -> Result<Var> {
    check_same(g, a, b)?;
    let fa = ext.features(g, params, a);
    let fb = ext.features(g, params, b);
    let terms: Vec<Var> = fa.iter().zip(&fb).map(|(&x, &y)| l1_mean_graph(g, x, y)).collect();
    Ok(sum_of(g, &terms))
}

/// `Σ_l (1/c_l²) ‖Γ_l(a) − Γ_l(b)‖₁` with `Γ = φφᵀ / (c·h·w)`.
pub fn style_graph(g: &mut Graph, ext: &dyn FeatureExtractor, params: &Bound, a: Var, b: Var) -> Result<Var> {
    check_same(g, a, b)?;
    let fa = ext.features(g, params, a);
    let fb = ext.features(g, params, b);
    let mut terms = Vec::with_capacity(fa.len());
    for (&x, &y) in fa.iter().zip(&fb) {
        let s = g.shape(x).to_vec();
        let (c, n) = (s[0] as f64, g.value(x).len() as f64);
        let gx = g.gram(x);
        let gy = g.gram(y);
        let d = g.sub(gx, gy);
        let d = g.abs(d);
        let d = g.sum(d);
        // Gram normalization 1/(c·h·w) and the 1/c² prefactor.
        terms.push(g.scale(d, 1.0 / (n * c * c)));
    }
    Ok(sum_of(g, &terms))
}

/// Mean absolute difference of face embeddings; both inputs are resized to
/// the embedder's resolution first.
pub fn identity_graph(g: &mut Graph, face: &dyn EncoderBackend, params: &Bound, a: Var, b: Var) -> Result<Var> {
    check_same(g, a, b)?;
    let res = face.input_resolution();
    let ra = resize_node(g, a, res);
    let rb = resize_node(g, b, res);
    let ea = face.forward(g, params, ra);
    let eb = face.forward(g, params, rb);
    Ok(l1_mean_graph(g, ea, eb))
}

/// Euclidean distance between the flattened landmark predictions.
pub fn landmark_graph(g: &mut Graph, lnd: &dyn LandmarkBackend, params: &Bound, a: Var, b: Var) -> Result<Var> {
    check_same(g, a, b)?;
    let res = lnd.input_resolution();
    let ra = resize_node(g, a, res);
    let rb = resize_node(g, b, res);
    let la = lnd.predict(g, params, ra)?;
    let lb = lnd.predict(g, params, rb)?;
    if g.shape(la) != g.shape(lb) || g.value(la).len() != crate::encoders::LANDMARK_DIM {
        return Err(Error::LandmarkBackend(format!(
            "expected {} outputs, got {}",
            crate::encoders::LANDMARK_DIM,
            g.value(la).len()
        )));
    }
    let d = g.sub(la, lb);
    let d = g.square(d);
    let s = g.sum(d);
    Ok(g.sqrt(s))
}

/// Number of MS-SSIM scales an image of this size supports (at most five).
pub fn ms_ssim_scales(h: usize, w: usize) -> Result<usize> {
    let mut side = h.min(w);
    if side < MS_SSIM_WINDOW {
        return Err(Error::Scale(format!(
            "MS-SSIM needs at least {MS_SSIM_WINDOW}×{MS_SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let mut scales = 1;
    while scales < MS_SSIM_WEIGHTS.len() && side / 2 >= MS_SSIM_WINDOW {
        side /= 2;
        scales += 1;
    }
    Ok(scales)
}

/// Exponents for `scales` levels, renormalized to sum to one.
pub fn ms_ssim_exponents(scales: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..scales];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Multi-scale SSIM on `[0, 1]` images, computed per channel and averaged.
pub fn ms_ssim_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    check_same(g, a, b)?;
    let s = g.shape(a).to_vec();
    let (ch, h, w) = (s[0], s[1], s[2]);
    let scales = ms_ssim_scales(h, w)?;
    let exps = ms_ssim_exponents(scales);
    let kernel: Arc<[f64]> = gaussian_kernel(MS_SSIM_WINDOW, MS_SSIM_SIGMA).into();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut x, mut y) = (a, b);
    let mut per_channel: Vec<Vec<Var>> = vec![Vec::with_capacity(scales); ch];
    for (level, &beta) in exps.iter().enumerate() {
        if level > 0 {
            x = g.avg_pool2(x);
            y = g.avg_pool2(y);
        }
        let mx = g.filter_valid(x, kernel.clone());
        let my = g.filter_valid(y, kernel.clone());
        let xx = g.mul(x, x);
        let yy = g.mul(y, y);
        let xy = g.mul(x, y);
        let fxx = g.filter_valid(xx, kernel.clone());
        let fyy = g.filter_valid(yy, kernel.clone());
        let fxy = g.filter_valid(xy, kernel.clone());
        let mxx = g.mul(mx, mx);
        let myy = g.mul(my, my);
        let mxy = g.mul(mx, my);
        let vx = g.sub(fxx, mxx);
        let vy = g.sub(fyy, myy);
        let cov = g.sub(fxy, mxy);
        let num = g.scale(cov, 2.0);
        let num = g.offset(num, c2);
        let den = g.add(vx, vy);
        let den = g.offset(den, c2);
        let mut map = g.div(num, den);
        if level + 1 == scales {
            let ln = g.scale(mxy, 2.0);
            let ln = g.offset(ln, c1);
            let ld = g.add(mxx, myy);
            let ld = g.offset(ld, c1);
            let l = g.div(ln, ld);
            map = g.mul(l, map);
        }
        let n = g.value(map).len() / ch;
        for (c, slot) in per_channel.iter_mut().enumerate() {
            let plane = g.slice(map, c * n, n);
            let m = g.mean(plane);
            // Negative structure terms are clipped before exponentiation.
            slot.push(g.unary(m, Unary::Powf(beta)));
        }
    }
    let products: Vec<Var> = per_channel
        .iter()
        .map(|terms| {
            let mut p = terms[0];
            for &t in &terms[1..] {
                p = g.mul(p, t);
            }
            p
        })
        .collect();
    Ok(mean_of(g, &products))
}

/// `α (1 − MS-SSIM(a, b)) + (1 − α) mean|a − b|`. With `α = 0` the MS-SSIM
/// term is skipped, so any image size works.
pub fn reconstruction_graph(g: &mut Graph, a: Var, b: Var, alpha: f64) -> Result<Var> {
    check_same(g, a, b)?;
    let l1 = l1_mean_graph(g, a, b);
    let l1 = g.scale(l1, 1.0 - alpha);
    if alpha == 0.0 {
        return Ok(l1);
    }
    let ms = ms_ssim_graph(g, a, b)?;
    let one_minus = g.scale(ms, -1.0);
    let one_minus = g.offset(one_minus, 1.0);
    let s = g.scale(one_minus, alpha);
    Ok(g.add(s, l1))
}

/// Graph for the inversion objective; `mse_weight` adds an optional pixel
/// MSE term on the masked pair.
#[allow(clippy::too_many_arguments)]
pub fn loss_opt_graph(
    g: &mut Graph,
    bb: &BoundBackends<'_>,
    in_masked: Var,
    out_masked: Var,
    crop: Var,
    out_crop: Var,
    w: &LossWeights,
    mse_weight: f64,
) -> Result<(Var, Var, Var)> {
    let perc = perceptual_graph(g, bb.backends.features.as_ref(), &bb.features, in_masked, out_masked)?;
    let id = identity_graph(g, bb.backends.face.as_ref(), &bb.face, crop, out_crop)?;
    let p = g.scale(perc, w.perc_o);
    let i = g.scale(id, w.id_o);
    let mut total = g.add(p, i);
    if mse_weight != 0.0 {
        let d = g.sub(in_masked, out_masked);
        let d = g.square(d);
        let m = g.mean(d);
        let m = g.scale(m, mse_weight);
        total = g.add(total, m);
    }
    Ok((total, perc, id))
}

/// Nodes for the five weighted training components on one `(gt, out)` pair,
/// in the order perc, style, id, lnd, rec.
pub fn training_components_graph(
    g: &mut Graph,
    bb: &BoundBackends<'_>,
    gt: Var,
    out: Var,
    alpha: f64,
) -> Result<[Var; 5]> {
    let be = bb.backends;
    Ok([
        perceptual_graph(g, be.features.as_ref(), &bb.features, gt, out)?,
        style_graph(g, be.features.as_ref(), &bb.features, gt, out)?,
        identity_graph(g, be.face.as_ref(), &bb.face, gt, out)?,
        landmark_graph(g, be.landmarks.as_ref(), &bb.landmarks, gt, out)?,
        reconstruction_graph(g, gt, out, alpha)?,
    ])
}

fn image_pair(g: &mut Graph, a: &Image, b: &Image) -> Result<(Var, Var)> {
    if a.dims() != b.dims() {
        return Err(Error::dim(format!("images differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((g.constant(a.to_tensor()), g.constant(b.to_tensor())))
}

pub fn loss_perceptual(gt: &Image, out: &Image, ext: &dyn FeatureExtractor) -> Result<f64> {
    let mut g = Graph::new();
    let p = ext.params().bind(&mut g, false);
    let (a, b) = image_pair(&mut g, gt, out)?;
    let v = perceptual_graph(&mut g, ext, &p, a, b)?;
    Ok(g.scalar(v))
}

pub fn loss_style(gt: &Image, out: &Image, ext: &dyn FeatureExtractor) -> Result<f64> {
    let mut g = Graph::new();
    let p = ext.params().bind(&mut g, false);
    let (a, b) = image_pair(&mut g, gt, out)?;
    let v = style_graph(&mut g, ext, &p, a, b)?;
    Ok(g.scalar(v))
}

pub fn loss_identity(a: &Image, b: &Image, face: &dyn EncoderBackend) -> Result<f64> {
    let mut g = Graph::new();
    let p = face.params().bind(&mut g, false);
    let (x, y) = image_pair(&mut g, a, b)?;
    let v = identity_graph(&mut g, face, &p, x, y)?;
    Ok(g.scalar(v))
}

pub fn loss_landmark(gt: &Image, out: &Image, lnd: &dyn LandmarkBackend) -> Result<f64> {
    let mut g = Graph::new();
    let p = lnd.params().bind(&mut g, false);
    let (a, b) = image_pair(&mut g, gt, out)?;
    let v = landmark_graph(&mut g, lnd, &p, a, b)?;
    Ok(g.scalar(v))
}

pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    let mut g = Graph::new();
    let (x, y) = image_pair(&mut g, a, b)?;
    let v = ms_ssim_graph(&mut g, x, y)?;
    Ok(g.scalar(v))
}

pub fn loss_reconstruction(gt: &Image, out: &Image, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidValue(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mut g = Graph::new();
    let (a, b) = image_pair(&mut g, gt, out)?;
    let v = reconstruction_graph(&mut g, a, b, alpha)?;
    Ok(g.scalar(v))
}

/// `λ_perc^o L_perc(I_in, I_out ⊙ m) + λ_id^o L_id(I_c, I_out_c)`.
pub fn loss_opt(
    in_masked: &Image,
    out_masked: &Image,
    crop: &Image,
    out_crop: &Image,
    backends: &LossBackends,
    w: &LossWeights,
) -> Result<f64> {
    let mut g = Graph::new();
    let bb = backends.bind(&mut g);
    let (a, b) = image_pair(&mut g, in_masked, out_masked)?;
    let (c, d) = image_pair(&mut g, crop, out_crop)?;
    let (total, _, _) = loss_opt_graph(&mut g, &bb, a, b, c, d, w, 0.0)?;
    Ok(g.scalar(total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gaussian_tensor, seeded_rng, ParamSet};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn rand_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = seeded_rng(seed);
        let v = gaussian_tensor(&mut rng, &[3 * h * w], 1.0).into_data();
        Image::new(h, w, v.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()).unwrap()
    }

    #[test]
    fn total_with_default_weights() {
        let w = LossWeights::default();
        let ones = LossComponents {
            perc: 1.0,
            style: 1.0,
            id: 1.0,
            lnd: 1.0,
            rec: 1.0,
            adv_g: 0.0,
        };
        assert_eq!(loss_total(&ones, &w).unwrap().total, 2.111);
        assert_eq!(loss_total(&LossComponents::default(), &w).unwrap().total, 0.0);
        assert!((loss_opt_value(2.0, 3.0, &w) - 0.32).abs() < 1e-15);
        let bad = LossComponents { rec: f64::NAN, ..ones };
        assert!(matches!(loss_total(&bad, &w), Err(Error::InvalidLoss { .. })));
    }

    proptest! {
        #[test]
        fn total_is_a_dot_product(c in proptest::array::uniform5(0.0f64..10.0), k in 0usize..5) {
            let w = LossWeights::default();
            let comps = LossComponents { perc: c[0], style: c[1], id: c[2], lnd: c[3], rec: c[4], adv_g: 0.0 };
            let t = loss_total(&comps, &w).unwrap().total;
            let lambdas = [w.perc, w.style, w.id, w.lnd, w.rec];
            let oracle: f64 = c.iter().zip(lambdas).map(|(a, b)| a * b).sum();
            prop_assert!((t - oracle).abs() <= 1e-12 * oracle.max(1.0));
            let mut doubled = c;
            doubled[k] *= 2.0;
            let d = LossComponents { perc: doubled[0], style: doubled[1], id: doubled[2], lnd: doubled[3], rec: doubled[4], adv_g: 0.0 };
            let t2 = loss_total(&d, &w).unwrap().total;
            prop_assert!((t2 - t - lambdas[k] * c[k]).abs() <= 1e-12 * t2.max(1.0));
        }

        #[test]
        fn losses_vanish_on_identical_images(seed in 0u64..50) {
            let be = LossBackends::toy();
            let a = rand_image(16, 16, seed);
            prop_assert_eq!(loss_perceptual(&a, &a, be.features.as_ref()).unwrap(), 0.0);
            prop_assert_eq!(loss_style(&a, &a, be.features.as_ref()).unwrap(), 0.0);
            prop_assert_eq!(loss_identity(&a, &a, be.face.as_ref()).unwrap(), 0.0);
            prop_assert_eq!(loss_landmark(&a, &a, be.landmarks.as_ref()).unwrap(), 0.0);
            prop_assert!(loss_reconstruction(&a, &a, 0.84).unwrap().abs() < 1e-12);
            let b = rand_image(16, 16, seed + 100);
            for v in [
                loss_perceptual(&a, &b, be.features.as_ref()).unwrap(),
                loss_style(&a, &b, be.features.as_ref()).unwrap(),
                loss_identity(&a, &b, be.face.as_ref()).unwrap(),
                loss_landmark(&a, &b, be.landmarks.as_ref()).unwrap(),
                loss_reconstruction(&a, &b, 0.84).unwrap(),
            ] {
                prop_assert!(v > 0.0);
            }
        }
    }

    /// Two narrow blocks so the loops stay small.
    fn hand_features() -> ConvFeatures {
        ConvFeatures::seeded(&[3, 2, 2], 77)
    }

    /// Straight-loop feature pyramid of [`ConvFeatures`].
    fn oracle_features(p: &ParamSet, img: &[f64], h: usize, w: usize) -> Vec<(usize, usize, usize, Vec<f64>)> {
        let mut out = Vec::new();
        let (mut x, mut c, mut hh, mut ww) = (img.to_vec(), 3, h, w);
        for l in 0..p.len() / 2 {
            if l > 0 {
                let (nh, nw) = (hh / 2, ww / 2);
                let mut pooled = vec![0.0; c * nh * nw];
                for ch in 0..c {
                    for y in 0..nh {
                        for xx in 0..nw {
                            let at = |dy: usize, dx: usize| x[(ch * hh + 2 * y + dy) * ww + 2 * xx + dx];
                            pooled[(ch * nh + y) * nw + xx] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
                        }
                    }
                }
                x = pooled;
                hh = nh;
                ww = nw;
            }
            let kw = p.get(2 * l);
            let o = kw.shape()[0];
            let mut y = vec![0.0; o * hh * ww];
            for oc in 0..o {
                for yy in 0..hh {
                    for xx in 0..ww {
                        let mut acc = p.get(2 * l + 1).data()[oc];
                        for ic in 0..c {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let sy = yy as isize + dy as isize - 1;
                                    let sx = xx as isize + dx as isize - 1;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < hh && (sx as usize) < ww {
                                        acc += kw.data()[((oc * c + ic) * 3 + dy) * 3 + dx]
                                            * x[(ic * hh + sy as usize) * ww + sx as usize];
                                    }
                                }
                            }
                        }
                        y[(oc * hh + yy) * ww + xx] = if acc > 0.0 { acc } else { 0.2 * acc };
                    }
                }
            }
            x = y;
            c = o;
            out.push((c, hh, ww, x.clone()));
        }
        out
    }

    #[test]
    fn perceptual_and_style_match_direct_summation() {
        let f = hand_features();
        let a = rand_image(4, 4, 1);
        let b = rand_image(4, 4, 2);
        let fa = oracle_features(f.params(), a.data(), 4, 4);
        let fb = oracle_features(f.params(), b.data(), 4, 4);
        let mut perc = 0.0;
        let mut style = 0.0;
        for ((c, h, w, x), (_, _, _, y)) in fa.iter().zip(&fb) {
            let n = h * w;
            perc += x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() / (c * n) as f64;
            let gram = |m: &[f64]| {
                let mut gm = vec![0.0; c * c];
                for i in 0..*c {
                    for j in 0..*c {
                        gm[i * c + j] = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum::<f64>() / (c * n) as f64;
                    }
                }
                gm
            };
            let (ga, gb) = (gram(x), gram(y));
            style += ga.iter().zip(&gb).map(|(p, q)| (p - q).abs()).sum::<f64>() / (c * c) as f64;
        }
        assert!((loss_perceptual(&a, &b, &f).unwrap() - perc).abs() < 1e-12);
        assert!((loss_perceptual(&b, &a, &f).unwrap() - perc).abs() < 1e-12);
        assert!((loss_style(&a, &b, &f).unwrap() - style).abs() < 1e-12);
    }

    /// Two-channel features straight from the input planes.
    struct PlaneFeatures(ParamSet);

    impl FeatureExtractor for PlaneFeatures {
        fn params(&self) -> &ParamSet {
            &self.0
        }
        fn features(&self, g: &mut Graph, _: &Bound, image: Var) -> Vec<Var> {
            let n = g.value(image).len() / 3;
            let s = g.slice(image, 0, 2 * n);
            let sh = g.shape(image).to_vec();
            vec![g.reshape(s, vec![2, sh[1], sh[2]])]
        }
    }

    #[test]
    fn style_gram_oracle_and_permutation_invariance() {
        let f = PlaneFeatures(ParamSet::new());
        let a = Image::new(1, 2, vec![0.1, 0.2, 0.3, 0.4, 0.0, 0.0]).unwrap();
        let b = Image::new(1, 2, vec![0.5, 0.0, 0.0, 0.5, 0.0, 0.0]).unwrap();
        // Γa = [[0.05, 0.11], [0.11, 0.25]] / 4, Γb = [[0.25, 0], [0, 0.25]] / 4.
        let diff = (0.2 + 0.11 + 0.11 + 0.0) / 4.0;
        assert!((loss_style(&a, &b, &f).unwrap() - diff / 4.0).abs() < 1e-15);
        let swapped = Image::new(1, 2, vec![0.2, 0.1, 0.4, 0.3, 0.0, 0.0]).unwrap();
        assert!(loss_style(&a, &swapped, &f).unwrap().abs() < 1e-18);
    }

    #[test]
    fn identity_loss_direct_l1() {
        let face = MlpEncoder::toy_face();
        let a = rand_image(32, 32, 3);
        let b = rand_image(32, 32, 4);
        let (ea, eb) = (face.encode(&a).unwrap(), face.encode(&b).unwrap());
        let oracle = ea.iter().zip(&eb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ea.len() as f64;
        assert!((loss_identity(&a, &b, &face).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(
            loss_identity(&a, &b, &face).unwrap(),
            loss_identity(&b, &a, &face).unwrap()
        );
    }

    /// Landmark regressor that reads fixed predictions from the image's first
    /// pixel: a red value of 1 shifts point 0 by (3, 4).
    struct StubLandmarks(ParamSet);

    impl LandmarkBackend for StubLandmarks {
        fn input_resolution(&self) -> (usize, usize) {
            (2, 2)
        }
        fn params(&self) -> &ParamSet {
            &self.0
        }
        fn predict(&self, g: &mut Graph, _: &Bound, image: Var) -> Result<Var> {
            let r = g.value(image).data()[0];
            if r.is_nan() {
                return Err(Error::LandmarkBackend("no face".into()));
            }
            let mut v = vec![10.0; 136];
            v[0] += 3.0 * r;
            v[1] += 4.0 * r;
            Ok(g.constant(Tensor::vector(v)))
        }
    }

    #[test]
    fn landmark_pythagorean_stub() {
        let stub = StubLandmarks(ParamSet::new());
        let a = Image::constant(2, 2, 0.0).unwrap();
        let b = Image::constant(2, 2, 1.0).unwrap();
        assert_eq!(loss_landmark(&a, &b, &stub).unwrap(), 5.0);
        assert_eq!(loss_landmark(&a, &a, &stub).unwrap(), 0.0);
    }

    #[test]
    fn landmark_direct_norm() {
        let lnd = MlpEncoder::toy_landmarks();
        let a = rand_image(16, 16, 5);
        let b = rand_image(16, 16, 6);
        let (pa, pb) = (lnd.encode(&a).unwrap(), lnd.encode(&b).unwrap());
        let oracle = pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((loss_landmark(&a, &b, &lnd).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_cases() {
        let a = Image::new(2, 2, vec![0.0, 0.25, 0.5, 1.0, 0.5, 0.5, 0.5, 0.5, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Image::constant(2, 2, 0.5).unwrap();
        let mean_l1 = (0.5 + 0.25 + 0.0 + 0.5 + 0.0 + 0.0 + 0.0 + 0.0 + 0.5 + 0.5 + 0.5 + 0.5) / 12.0;
        assert!((loss_reconstruction(&a, &b, 0.0).unwrap() - mean_l1).abs() < 1e-15);
        assert!(matches!(loss_reconstruction(&a, &b, 0.84), Err(Error::Scale(_))));

        // Constant images: every contrast-structure term is 1, leaving the
        // luminance term at the coarsest scale.
        let (c, d) = (0.4, 0.1);
        let g = Image::constant(64, 64, c).unwrap();
        let o = Image::constant(64, 64, c + d).unwrap();
        let c1 = 0.01f64.powi(2);
        let lum = (2.0 * c * (c + d) + c1) / (c * c + (c + d) * (c + d) + c1);
        let beta = 0.3001 / (0.0448 + 0.2856 + 0.3001);
        let ms = lum.powf(beta);
        assert!((ms_ssim(&g, &o).unwrap() - ms).abs() < 1e-9);
        let expected = 0.84 * (1.0 - ms) + 0.16 * 0.1;
        assert!((loss_reconstruction(&g, &o, 0.84).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ms_ssim_scale_counts() {
        assert_eq!(ms_ssim_scales(64, 64).unwrap(), 3);
        assert_eq!(ms_ssim_scales(256, 256).unwrap(), 5);
        assert_eq!(ms_ssim_scales(11, 40).unwrap(), 1);
        assert!(ms_ssim_scales(10, 64).is_err());
        let e = ms_ssim_exponents(3);
        assert!((e.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_l1_is_resolution_independent() {
        let small = (Image::constant(2, 2, 0.2).unwrap(), Image::constant(2, 2, 0.5).unwrap());
        let big = (Image::constant(8, 8, 0.2).unwrap(), Image::constant(8, 8, 0.5).unwrap());
        let (s, b) = (
            loss_reconstruction(&small.0, &small.1, 0.0).unwrap(),
            loss_reconstruction(&big.0, &big.1, 0.0).unwrap(),
        );
        assert!((s - b).abs() < 1e-14 && (s - 0.3).abs() < 1e-14);
    }

    #[test]
    fn opt_loss_combines_components() {
        let be = LossBackends::toy();
        let w = LossWeights::default();
        let (a, b) = (rand_image(16, 16, 7), rand_image(16, 16, 8));
        let (c, d) = (rand_image(8, 16, 9), rand_image(8, 16, 10));
        let v = loss_opt(&a, &b, &c, &d, &be, &w).unwrap();
        let oracle = w.perc_o * loss_perceptual(&a, &b, be.features.as_ref()).unwrap()
            + w.id_o * loss_identity(&c, &d, be.face.as_ref()).unwrap();
        assert!((v - oracle).abs() < 1e-12);
        assert_eq!(loss_opt(&a, &a, &c, &c, &be, &w).unwrap(), 0.0);
    }
}
