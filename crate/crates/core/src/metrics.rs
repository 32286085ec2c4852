//! Image-quality metrics and biometric verification analysis.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{gaussian_kernel, separable_filter_valid};
use crate::imaging::{Image, CHANNELS};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const PEAK: f64 = 255.0;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::dim(format!("images differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Sum over pixels of the ℓ1 norm of the RGB difference (0–255 scale),
/// divided by the pixel count.
pub fn metric_l1(gt: &Image, out: &Image) -> Result<f64> {
    same_dims(gt, out)?;
    let total: f64 = gt
        .data()
        .iter()
        .zip(out.data())
        .map(|(a, b)| (PEAK * (a - b)).abs())
        .sum();
    Ok(total / (gt.height() * gt.width()) as f64)
}

/// `10 log10(255² / MSE)` over every channel value on the 0–255 scale;
/// identical images report [`PSNR_CAP`].
pub fn metric_psnr(gt: &Image, out: &Image) -> Result<f64> {
    same_dims(gt, out)?;
    let mse = gt
        .data()
        .iter()
        .zip(out.data())
        .map(|(a, b)| (PEAK * (a - b)).powi(2))
        .sum::<f64>()
        / gt.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP))
}

/// Mean local SSIM of the luma planes (0–255 scale), Gaussian 11×11 window
/// with σ = 1.5, valid positions only.
pub fn metric_ssim(gt: &Image, out: &Image) -> Result<f64> {
    same_dims(gt, out)?;
    let (h, w) = gt.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Scale(format!("SSIM needs at least 11×11, got {h}×{w}")));
    }
    let x: Vec<f64> = gt.luminance().iter().map(|v| v * PEAK).collect();
    let y: Vec<f64> = out.luminance().iter().map(|v| v * PEAK).collect();
    Ok(ssim_plane(&x, &y, h, w, PEAK))
}

/// Mean SSIM map of two planes with the given data range.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let f = |v: &[f64]| separable_filter_valid(v, 1, h, w, &k);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mx, my) = (f(x), f(y));
    let (sxx, syy, sxy) = (f(&prod(x, x)), f(&prod(y, y)), f(&prod(x, y)));
    let n = mx.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    acc / n as f64
}

/// Total variation of a single plane, normalized as in [`metric_tv`].
pub fn tv_plane(data: &[f64], h: usize, w: usize) -> Result<f64> {
    let (v, hz) = tv_sums(&[data], h, w)?;
    Ok(v + hz)
}

fn tv_sums(planes: &[&[f64]], h: usize, w: usize) -> Result<(f64, f64)> {
    if h < 2 || w < 2 {
        return Err(Error::dim(format!("total variation needs at least 2×2, got {h}×{w}")));
    }
    let (mut vert, mut horiz) = (0.0, 0.0);
    for p in planes {
        for y in 0..h {
            for x in 0..w {
                if y + 1 < h {
                    vert += (p[(y + 1) * w + x] - p[y * w + x]).abs();
                }
                if x + 1 < w {
                    horiz += (p[y * w + x + 1] - p[y * w + x]).abs();
                }
            }
        }
    }
    // Pixels excluding the last row / the last column.
    let n_h = ((h - 1) * w) as f64;
    let n_w = (h * (w - 1)) as f64;
    Ok((vert / n_h, horiz / n_w))
}

/// Total variation on the `[0, 1]` scale: vertical differences summed over
/// pixels and channels divided by `(h−1)·w`, plus horizontal differences
/// divided by `h·(w−1)`.
pub fn metric_tv(out: &Image) -> Result<f64> {
    let planes: Vec<&[f64]> = (0..CHANNELS).map(|c| out.plane(c)).collect();
    let (v, hz) = tv_sums(&planes, out.height(), out.width())?;
    Ok(v + hz)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "embeddings differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding("zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Sample mean and unbiased covariance.
    pub fn from_features(feats: &[Vec<f64>]) -> Result<Self> {
        let (n, d) = feature_shape(feats)?;
        if n < 2 {
            return Err(Error::Conditioning("need at least two samples".into()));
        }
        let x = DMatrix::from_fn(d, n, |i, j| feats[j][i]);
        let mean = x.column_mean();
        let centered = DMatrix::from_fn(d, n, |i, j| x[(i, j)] - mean[i]);
        let cov = &centered * centered.transpose() / (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

fn feature_shape(feats: &[Vec<f64>]) -> Result<(usize, usize)> {
    let d = feats.first().map(Vec::len).ok_or(Error::EmptyBatch)?;
    if d == 0 || feats.iter().any(|f| f.len() != d) {
        return Err(Error::dim("feature vectors must be nonempty and equal length"));
    }
    if feats.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("non-finite feature".into()));
    }
    Ok((feats.len(), d))
}

/// `Tr(√(Σ₁^{1/2} Σ₂ Σ₁^{1/2}))`, which equals `Tr(√(Σ₁Σ₂))`.
fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> f64 {
    let e = SymmetricEigen::new(s1.clone());
    let root = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    let r1 = &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose();
    let m = &r1 * s2 * &r1;
    let m = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum()
}

/// Fréchet distance between two Gaussians.
pub fn fid_from_stats(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::dim("feature dimensions differ"));
    }
    let dm = (&a.mean - &b.mean).norm_squared();
    let tr = a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt_product(&a.cov, &b.cov);
    Ok(dm + tr)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FidOptions {
    /// Ridge `s` added to both covariances (`Σ + s·I`). Zero demands more
    /// samples than feature dimensions.
    pub shrinkage: f64,
}

/// FID between two feature sets.
///
/// When the pooled sample count is below the feature dimension, the
/// computation runs in the span of the centred samples: with a ridge the
/// orthogonal complement contributes `s` per direction to both traces and to
/// the square-root term, so it cancels exactly.
pub fn metric_fid(feats_gt: &[Vec<f64>], feats_out: &[Vec<f64>], opts: FidOptions) -> Result<f64> {
    let (n1, d) = feature_shape(feats_gt)?;
    let (n2, d2) = feature_shape(feats_out)?;
    if d != d2 {
        return Err(Error::dim(format!("feature dimensions differ: {d} vs {d2}")));
    }
    if opts.shrinkage < 0.0 || !opts.shrinkage.is_finite() {
        return Err(Error::InvalidValue("shrinkage must be finite and nonnegative".into()));
    }
    if opts.shrinkage == 0.0 && n1.min(n2) <= d {
        return Err(Error::Conditioning(format!(
            "{} samples cannot give a full-rank {d}×{d} covariance; add shrinkage",
            n1.min(n2)
        )));
    }
    let a = GaussianStats::from_features(feats_gt)?;
    let b = GaussianStats::from_features(feats_out)?;
    let s = opts.shrinkage;
    if n1 + n2 < d {
        return Ok(fid_reduced(feats_gt, feats_out, &a, &b, s));
    }
    let ridge = DMatrix::identity(d, d) * s;
    let a = GaussianStats {
        cov: &a.cov + &ridge,
        ..a
    };
    let b = GaussianStats {
        cov: &b.cov + &ridge,
        ..b
    };
    fid_from_stats(&a, &b)
}

fn fid_reduced(fa: &[Vec<f64>], fb: &[Vec<f64>], a: &GaussianStats, b: &GaussianStats, s: f64) -> f64 {
    let cols: Vec<DVector<f64>> = fa
        .iter()
        .map(|f| DVector::from_column_slice(f) - &a.mean)
        .chain(fb.iter().map(|f| DVector::from_column_slice(f) - &b.mean))
        .collect();
    let x = DMatrix::from_columns(&cols);
    // Orthonormal basis of the column space via the small Gram matrix.
    let gram = x.transpose() * &x;
    let e = SymmetricEigen::new(gram);
    let top = e.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..e.eigenvalues.len())
        .filter(|&i| e.eigenvalues[i] > top * 1e-12 && e.eigenvalues[i] > 0.0)
        .collect();
    let basis: Vec<DVector<f64>> = keep
        .iter()
        .map(|&i| &x * e.eigenvectors.column(i) / e.eigenvalues[i].sqrt())
        .collect();
    let dm = (&a.mean - &b.mean).norm_squared();
    if basis.is_empty() {
        return dm;
    }
    let u = DMatrix::from_columns(&basis);
    let r = u.ncols();
    let ridge = DMatrix::identity(r, r) * s;
    let ca = u.transpose() * &a.cov * &u + &ridge;
    let cb = u.transpose() * &b.cov * &u + &ridge;
    dm + ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb)
}

/// Summary statistics over a set of `(gt, out)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// Absent when either set has fewer than two samples.
    pub fid: Option<f64>,
    pub tv: f64,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<SampleMetrics>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub name: String,
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub tv: f64,
}

impl MetricReport {
    /// Per-image metrics averaged over pairs; FID over `features` of the two
    /// sets (computed by the caller's extractor).
    pub fn compute(
        pairs: &[(String, Image, Image)],
        feats_gt: &[Vec<f64>],
        feats_out: &[Vec<f64>],
        fid_opts: FidOptions,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut rows = Vec::with_capacity(pairs.len());
        for (name, gt, out) in pairs {
            rows.push(SampleMetrics {
                name: name.clone(),
                l1: metric_l1(gt, out)?,
                psnr: metric_psnr(gt, out)?,
                ssim: metric_ssim(gt, out)?,
                tv: metric_tv(out)?,
            });
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            l1: mean(|r| r.l1),
            psnr: mean(|r| r.psnr),
            ssim: mean(|r| r.ssim),
            tv: mean(|r| r.tv),
            fid: if feats_gt.len().min(feats_out.len()) >= 2 {
                Some(metric_fid(feats_gt, feats_out, fid_opts)?)
            } else {
                None
            },
            n_samples: rows.len(),
            per_sample: Some(rows),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Evenly spaced thresholds over `[−1, 1]`, endpoints included.
pub fn threshold_grid(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
}

pub const DEFAULT_THRESHOLDS: usize = 1001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationCurves {
    pub thresholds: Vec<f64>,
    /// Fraction of genuine pairs with similarity below the threshold.
    pub fnmr: Vec<f64>,
    /// Fraction of impostor pairs with similarity at or above the threshold.
    pub fmr: Vec<f64>,
    /// Equal error rate; NaN when either class is missing.
    pub eer: f64,
    pub eer_threshold: f64,
    /// Best single-threshold accuracy over the grid.
    pub accuracy: f64,
    pub accuracy_threshold: f64,
}

impl VerificationCurves {
    /// `threshold,fnmr,fmr` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["threshold", "fnmr", "fmr"])?;
        for i in 0..self.thresholds.len() {
            w.write_record([
                self.thresholds[i].to_string(),
                self.fnmr[i].to_string(),
                self.fmr[i].to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidValue(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// ROC points `(FMR, 1 − FNMR)`, one per threshold.
    pub fn roc(&self) -> Vec<(f64, f64)> {
        self.fmr.iter().zip(&self.fnmr).map(|(&a, &r)| (a, 1.0 - r)).collect()
    }
}

/// Curves from raw similarity scores. Errors with
/// [`Error::InsufficientPairs`] (carrying the curves, EER NaN) when a class
/// is empty.
pub fn curves_from_scores(genuine: &[f64], impostor: &[f64], thresholds: &[f64]) -> Result<VerificationCurves> {
    if thresholds.is_empty() {
        return Err(Error::InvalidValue("threshold list is empty".into()));
    }
    if thresholds.windows(2).any(|p| p[1] < p[0]) {
        return Err(Error::InvalidValue("thresholds must be sorted".into()));
    }
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let fnmr: Vec<f64> = thresholds
        .iter()
        .map(|&t| frac(genuine.iter().filter(|&&s| s < t).count(), genuine.len()))
        .collect();
    let fmr: Vec<f64> = thresholds
        .iter()
        .map(|&t| frac(impostor.iter().filter(|&&s| s >= t).count(), impostor.len()))
        .collect();
    let total = genuine.len() + impostor.len();
    let (mut accuracy, mut accuracy_threshold) = (f64::NAN, f64::NAN);
    for &t in thresholds {
        let correct = genuine.iter().filter(|&&s| s >= t).count() + impostor.iter().filter(|&&s| s < t).count();
        let acc = frac(correct, total);
        if accuracy.is_nan() || acc > accuracy {
            accuracy = acc;
            accuracy_threshold = t;
        }
    }
    let mut curves = VerificationCurves {
        thresholds: thresholds.to_vec(),
        fnmr,
        fmr,
        eer: f64::NAN,
        eer_threshold: f64::NAN,
        accuracy,
        accuracy_threshold,
    };
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::InsufficientPairs {
            genuine: genuine.len(),
            impostor: impostor.len(),
            curves: Box::new(curves),
        });
    }
    let (eer, t) = equal_error_rate(&curves.thresholds, &curves.fnmr, &curves.fmr);
    curves.eer = eer;
    curves.eer_threshold = t;
    Ok(curves)
}

/// First crossing of `fnmr − fmr` through zero, linearly interpolated between
/// the bracketing grid points.
fn equal_error_rate(t: &[f64], fnmr: &[f64], fmr: &[f64]) -> (f64, f64) {
    let d = |i: usize| fnmr[i] - fmr[i];
    let Some(i) = (0..t.len()).find(|&i| d(i) >= 0.0) else {
        let last = t.len() - 1;
        return ((fnmr[last] + fmr[last]) / 2.0, t[last]);
    };
    if i == 0 || d(i) == 0.0 {
        return ((fnmr[i] + fmr[i]) / 2.0, t[i]);
    }
    let (d0, d1) = (d(i - 1), d(i));
    let f = d0 / (d0 - d1);
    let lerp = |a: f64, b: f64| a + f * (b - a);
    let eer = (lerp(fnmr[i - 1], fnmr[i]) + lerp(fmr[i - 1], fmr[i])) / 2.0;
    (eer, lerp(t[i - 1], t[i]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    pub genuine: bool,
}

/// Labelled image pairs, read from `path_a,path_b,genuine` CSV. Relative
/// paths are resolved against the CSV's directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairList {
    pub records: Vec<PairRecord>,
}

impl PairList {
    pub fn load_csv(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::Csv(e),
        })?;
        let mut records = Vec::new();
        for row in r.deserialize::<(String, String, String)>() {
            let (a, b, g) = row?;
            let genuine = match g.trim().to_ascii_lowercase().as_str() {
                "1" | "true" | "yes" => true,
                "0" | "false" | "no" => false,
                other => return Err(Error::InvalidValue(format!("genuine flag `{other}`"))),
            };
            records.push(PairRecord {
                path_a: base.join(a.trim()),
                path_b: base.join(b.trim()),
                genuine,
            });
        }
        if records.is_empty() {
            return Err(Error::EmptyDataset(format!("{} lists no pairs", path.display())));
        }
        Ok(Self { records })
    }

    pub fn counts(&self) -> (usize, usize) {
        let g = self.records.iter().filter(|r| r.genuine).count();
        (g, self.records.len() - g)
    }
}

/// Similarity of every pair, split into `(genuine, impostor)`.
pub fn score_pairs(pairs: &PairList, mut embed: impl FnMut(&Path) -> Result<Vec<f64>>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut gen, mut imp) = (Vec::new(), Vec::new());
    for r in &pairs.records {
        let s = cosine_similarity(&embed(&r.path_a)?, &embed(&r.path_b)?)?;
        if r.genuine {
            gen.push(s);
        } else {
            imp.push(s);
        }
    }
    Ok((gen, imp))
}

/// Embed every pair with `embed`, score by cosine similarity and sweep
/// `thresholds`.
pub fn verification_curves(
    pairs: &PairList,
    embed: impl FnMut(&Path) -> Result<Vec<f64>>,
    thresholds: &[f64],
) -> Result<VerificationCurves> {
    let (g, i) = score_pairs(pairs, embed)?;
    curves_from_scores(&g, &i, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gaussian_tensor, seeded_rng};
    use proptest::prelude::*;

    fn img4(seed: u64) -> Image {
        let mut rng = seeded_rng(seed);
        let v = gaussian_tensor(&mut rng, &[48], 1.0).into_data();
        Image::new(4, 4, v.iter().map(|x| (x.tanh() + 1.0) / 2.0).collect()).unwrap()
    }

    #[test]
    fn l1_oracles() {
        let a = img4(1);
        assert_eq!(metric_l1(&a, &a).unwrap(), 0.0);
        let z = Image::constant(4, 4, 0.0).unwrap();
        let o = Image::constant(4, 4, 1.0).unwrap();
        assert_eq!(metric_l1(&z, &o).unwrap(), 765.0);
        let b = img4(2);
        let mut oracle = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    oracle += (255.0 * a.get(y, x, c) - 255.0 * b.get(y, x, c)).abs();
                }
            }
        }
        assert!((metric_l1(&a, &b).unwrap() - oracle / 16.0).abs() < 1e-9);
        assert!(metric_l1(&a, &Image::constant(4, 5, 0.0).unwrap()).is_err());
    }

    #[test]
    fn psnr_oracles() {
        let z = Image::constant(4, 4, 0.0).unwrap();
        let o = Image::constant(4, 4, 1.0).unwrap();
        assert_eq!(metric_psnr(&z, &o).unwrap(), 0.0);
        assert_eq!(metric_psnr(&o, &o).unwrap(), PSNR_CAP);
        let (a, b) = (img4(3), img4(4));
        let mut mse = 0.0;
        for (p, q) in a.data().iter().zip(b.data()) {
            mse += (255.0 * p - 255.0 * q).powi(2);
        }
        mse /= 48.0;
        let oracle = 10.0 * (255.0f64 * 255.0 / mse).log10();
        assert!((metric_psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn ssim_identical_and_constant_closed_form() {
        let a = Image::from_fn(16, 16, |y, x, c| ((y * 5 + x * 3 + c) % 13) as f64 / 12.0).unwrap();
        assert!((metric_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let (c, d) = (0.4, 0.1);
        let g = Image::constant(16, 16, c).unwrap();
        let o = Image::constant(16, 16, c + d).unwrap();
        let (c, cd) = (c * 255.0, (c + d) * 255.0);
        let c1 = (0.01f64 * 255.0).powi(2);
        let c2 = (0.03f64 * 255.0).powi(2);
        let oracle = (2.0 * c * cd + c1) * c2 / ((c * c + cd * cd + c1) * c2);
        assert!((metric_ssim(&g, &o).unwrap() - oracle).abs() < 1e-9);
        assert!(matches!(metric_ssim(&img4(1), &img4(2)), Err(Error::Scale(_))));
    }

    #[test]
    fn tv_oracles() {
        assert_eq!(metric_tv(&Image::constant(4, 4, 0.3).unwrap()).unwrap(), 0.0);
        assert_eq!(tv_plane(&[0.0, 1.0, 0.0, 1.0], 2, 2).unwrap(), 1.0);
        let a = img4(5);
        let mut v = 0.0;
        let mut h = 0.0;
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    if y < 3 {
                        v += (a.get(y + 1, x, c) - a.get(y, x, c)).abs();
                    }
                    if x < 3 {
                        h += (a.get(y, x + 1, c) - a.get(y, x, c)).abs();
                    }
                }
            }
        }
        assert!((metric_tv(&a).unwrap() - (v / 12.0 + h / 12.0)).abs() < 1e-9);
        assert!(tv_plane(&[1.0, 2.0], 1, 2).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, -3.0], &[-1.0, 3.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn fid_diagonal_closed_form() {
        let a = GaussianStats {
            mean: DVector::from_vec(vec![0.0, 0.0]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])),
        };
        let b = GaussianStats {
            mean: DVector::from_vec(vec![0.0, 0.0]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])),
        };
        assert!((fid_from_stats(&a, &b).unwrap() - 2.0).abs() < 1e-6);
    }

    fn cloud(seed: u64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed);
        (0..n)
            .map(|_| {
                gaussian_tensor(&mut rng, &[d], 1.0)
                    .into_data()
                    .iter()
                    .map(|v| v + shift)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn fid_mean_shift_and_identity() {
        let a = cloud(1, 20_000, 2, 0.0);
        let b = cloud(2, 20_000, 2, 1.0);
        let f = metric_fid(&a, &b, FidOptions::default()).unwrap();
        assert!((f - 2.0).abs() < 0.1, "{f}");
        assert!(metric_fid(&a, &a, FidOptions::default()).unwrap().abs() <= 1e-6);
    }

    #[test]
    fn fid_conditioning_and_low_rank_route() {
        let a = cloud(3, 4, 10, 0.0);
        let b = cloud(4, 3, 10, 0.5);
        assert!(matches!(
            metric_fid(&a, &b, FidOptions::default()),
            Err(Error::Conditioning(_))
        ));
        let s = 0.01;
        let reduced = metric_fid(&a, &b, FidOptions { shrinkage: s }).unwrap();
        // Full-dimensional evaluation of the same ridge-regularised problem.
        let sa = GaussianStats::from_features(&a).unwrap();
        let sb = GaussianStats::from_features(&b).unwrap();
        let ridge = DMatrix::identity(10, 10) * s;
        let full = fid_from_stats(
            &GaussianStats {
                cov: &sa.cov + &ridge,
                ..sa
            },
            &GaussianStats {
                cov: &sb.cov + &ridge,
                ..sb
            },
        )
        .unwrap();
        assert!((reduced - full).abs() < 1e-9, "{reduced} vs {full}");
        assert!(metric_fid(&a, &a, FidOptions { shrinkage: s }).unwrap().abs() < 1e-9);
    }

    /// Genuine similarities 0.9, 0.6, 0.3; impostor 0.5, 0.1, −0.2.
    fn six_pairs() -> (Vec<f64>, Vec<f64>) {
        (vec![0.9, 0.6, 0.3], vec![0.5, 0.1, -0.2])
    }

    #[test]
    fn six_pair_hand_counts() {
        let (g, i) = six_pairs();
        let t = [-0.5, 0.0, 0.2, 0.4, 0.55, 0.7, 0.95];
        let c = curves_from_scores(&g, &i, &t).unwrap();
        // Hand-counted: genuine below t, impostors at or above t.
        assert_eq!(c.fnmr, vec![0.0, 0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(c.fmr, vec![1.0, 2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0, 0.0]);
        // Crossing between t=0.2 (d=−1/3) and t=0.4 (d=0): exact hit at 0.4.
        assert!((c.eer - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.eer_threshold, 0.4);
        // t=0.55 separates 2 genuine + 3 impostor correctly.
        assert!((c.accuracy - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn eer_interpolates_between_grid_points() {
        let (g, i) = six_pairs();
        let t = [0.2, 0.35, 0.55];
        let c = curves_from_scores(&g, &i, &t).unwrap();
        // d(0.2) = 0 − 1/3, d(0.35) = 1/3 − 1/3 = 0 → exact at 0.35.
        assert!((c.eer - 1.0 / 3.0).abs() < 1e-12);
        let t = [0.0, 0.55];
        let c = curves_from_scores(&g, &i, &t).unwrap();
        // d(0) = −2/3, d(0.55) = 1/3; f = 2/3.
        let f = 2.0 / 3.0;
        let fnmr = f * (1.0 / 3.0);
        let fmr = 2.0 / 3.0 + f * (0.0 - 2.0 / 3.0);
        assert!((c.eer - (fnmr + fmr) / 2.0).abs() < 1e-12);
        assert!((c.eer_threshold - 0.55 * f).abs() < 1e-12);
    }

    #[test]
    fn extreme_thresholds() {
        let (g, i) = six_pairs();
        let c = curves_from_scores(&g, &i, &threshold_grid(DEFAULT_THRESHOLDS)).unwrap();
        assert_eq!((c.fnmr[0], c.fmr[0]), (0.0, 1.0));
        let c = curves_from_scores(&g, &i, &[0.99]).unwrap();
        assert_eq!((c.fnmr[0], c.fmr[0]), (1.0, 0.0));
        match curves_from_scores(&g, &[], &[0.0, 0.5]) {
            Err(Error::InsufficientPairs { curves, .. }) => {
                assert!(curves.eer.is_nan());
                assert_eq!(curves.fnmr, vec![0.0, 1.0 / 3.0]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pair_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.csv");
        std::fs::write(&p, "path_a,path_b,genuine\na.png,b.png,1\nc.png,d.png,false\n").unwrap();
        let l = PairList::load_csv(&p).unwrap();
        assert_eq!(l.counts(), (1, 1));
        assert_eq!(l.records[0].path_a, dir.path().join("a.png"));
        let c = curves_from_scores(&[0.5], &[0.1], &[0.0, 1.0]).unwrap();
        assert_eq!(c.to_csv().unwrap(), "threshold,fnmr,fmr\n0,0,1\n1,1,0\n");
    }

    proptest! {
        #[test]
        fn curves_are_monotone(g in proptest::collection::vec(-1.0f64..1.0, 1..30), i in proptest::collection::vec(-1.0f64..1.0, 1..30)) {
            let c = curves_from_scores(&g, &i, &threshold_grid(201)).unwrap();
            prop_assert!(c.fnmr.windows(2).all(|p| p[0] <= p[1]));
            prop_assert!(c.fmr.windows(2).all(|p| p[0] >= p[1]));
            prop_assert!((0.0..=1.0).contains(&c.eer));
        }

        #[test]
        fn symmetric_metrics(sa in 0u64..1000, sb in 0u64..1000) {
            let (a, b) = (img4(sa), img4(sb));
            prop_assert_eq!(metric_l1(&a, &b).unwrap(), metric_l1(&b, &a).unwrap());
            prop_assert_eq!(metric_psnr(&a, &b).unwrap(), metric_psnr(&b, &a).unwrap());
            let big = |s: u64| Image::from_fn(12, 12, |y, x, c| img4(s).get(y % 4, x % 4, c)).unwrap();
            let (ba, bb) = (big(sa), big(sb));
            prop_assert!((metric_ssim(&ba, &bb).unwrap() - metric_ssim(&bb, &ba).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn tv_is_translation_invariant(vals in proptest::collection::vec(0u32..128, 16), shift in 0u32..64) {
            let plane: Vec<f64> = vals.iter().map(|&v| v as f64 / 256.0).collect();
            let moved: Vec<f64> = plane.iter().map(|v| v + shift as f64 / 256.0).collect();
            prop_assert_eq!(tv_plane(&plane, 4, 4).unwrap(), tv_plane(&moved, 4, 4).unwrap());
        }

        #[test]
        fn fid_self_and_symmetry(seed in 0u64..200) {
            let a = cloud(seed, 12, 3, 0.0);
            let b = cloud(seed + 1000, 9, 3, 0.3);
            prop_assert!(metric_fid(&a, &a, FidOptions::default()).unwrap() <= 1e-6);
            let ab = metric_fid(&a, &b, FidOptions::default()).unwrap();
            let ba = metric_fid(&b, &a, FidOptions::default()).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-6);
        }
    }
}
