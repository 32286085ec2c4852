//! Latent-code refinement: Adam on `w` against the inversion objective,
//! generator frozen.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::encoders::{pooled_features, resize_node};
use crate::error::{Error, Result};
use crate::generator::{generate, GeneratorBackend};
use crate::graph::{Graph, Var};
use crate::imaging::{Image, Mask, Window};
use crate::latent::StyleW;
use crate::losses::{loss_opt_graph, LossBackends, LossWeights};
use crate::metrics::{FidOptions, MetricReport};
use crate::nn::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Consecutive small changes needed to declare convergence.
pub const CONVERGENCE_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub max_iters: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tolerance: f64,
    /// Keep the per-iteration perceptual and identity terms.
    pub record_trace: bool,
    /// Weight of the optional pixel MSE term on the masked pair.
    pub mse_weight: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            max_iters: 25,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            tolerance: 1e-6,
            record_trace: true,
            mse_weight: 0.0,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 || self.mse_weight.is_nan() || self.mse_weight < 0.0 {
            return Err(Error::Config("tolerance and mse_weight must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub w_star: StyleW,
    /// Loss at every evaluated iterate, the initial one included.
    pub loss_trace: Vec<f64>,
    /// `(perceptual, identity)` per trace entry when recorded.
    pub components: Vec<(f64, f64)>,
    pub iterations_run: usize,
    pub best_index: usize,
    pub elapsed: Duration,
}

impl InversionResult {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0]
    }

    pub fn best_loss(&self) -> f64 {
        self.loss_trace[self.best_index]
    }

    /// `iteration,loss,perc,id` rows.
    pub fn trace_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iteration", "loss", "perc", "id"])?;
        for (i, l) in self.loss_trace.iter().enumerate() {
            let (p, d) = self.components.get(i).copied().unwrap_or((f64::NAN, f64::NAN));
            w.write_record([i.to_string(), l.to_string(), p.to_string(), d.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidValue(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Best-so-far state captured at a requested iteration count.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub w_best: StyleW,
    pub best_loss: f64,
    pub elapsed: Duration,
}

/// The fixed inputs of one inversion, validated once.
struct Target {
    in_masked: Arc<Tensor>,
    mask: Arc<Tensor>,
    crop: Arc<Tensor>,
    crop_dims: (usize, usize),
    window: Window,
}

fn prepare(in_masked: &Image, crop: &Image, mask: &Mask, backend: &dyn GeneratorBackend) -> Result<Target> {
    if in_masked.dims() != mask.dims() {
        return Err(Error::dim(format!(
            "masked input {:?} and mask {:?} differ",
            in_masked.dims(),
            mask.dims()
        )));
    }
    if in_masked.dims() != backend.resolution() {
        return Err(Error::dim(format!(
            "generator renders {:?}, input is {:?}",
            backend.resolution(),
            in_masked.dims()
        )));
    }
    let window = mask
        .visible_window()
        .ok_or_else(|| Error::dim("mask has no visible pixels to crop"))?;
    Ok(Target {
        in_masked: Arc::new(in_masked.to_tensor()),
        mask: Arc::new(mask.to_tensor3()),
        crop: Arc::new(crop.to_tensor()),
        crop_dims: crop.dims(),
        window,
    })
}

/// The generator output's masked view and crop, matching how the inputs
/// were formed.
pub fn output_views(g: &mut Graph, out: Var, mask: Var, window: Window, crop_dims: (usize, usize)) -> (Var, Var) {
    let masked = g.mul(out, mask);
    let c = g.crop(out, window.top, window.left, window.height, window.width);
    (masked, resize_node(g, c, crop_dims))
}

struct Evaluation {
    loss: f64,
    perc: f64,
    id: f64,
    grad: Vec<f64>,
}

fn evaluate(
    w: &[f64],
    t: &Target,
    backend: &dyn GeneratorBackend,
    losses: &LossBackends,
    weights: &LossWeights,
    mse_weight: f64,
) -> Result<Evaluation> {
    let mut g = Graph::new();
    let gp = backend.params().bind(&mut g, false);
    let bb = losses.bind(&mut g);
    let wv = g.param(Tensor::vector(w.to_vec()));
    let out = backend.synthesize(&mut g, &gp, wv);
    let m = g.constant_shared(t.mask.clone());
    let (out_masked, out_crop) = output_views(&mut g, out, m, t.window, t.crop_dims);
    let a = g.constant_shared(t.in_masked.clone());
    let c = g.constant_shared(t.crop.clone());
    let (total, perc, id) = loss_opt_graph(&mut g, &bb, a, out_masked, c, out_crop, weights, mse_weight)?;
    let loss = g.scalar(total);
    let grad = if loss.is_finite() {
        g.backward(total).get_or_zeros(wv, &[w.len()]).into_data()
    } else {
        Vec::new()
    };
    Ok(Evaluation {
        loss,
        perc: g.scalar(perc),
        id: g.scalar(id),
        grad,
    })
}

/// Minimize the inversion objective over `w`, starting at `w_init`.
#[allow(clippy::too_many_arguments)]
pub fn invert(
    w_init: &StyleW,
    in_masked: &Image,
    crop: &Image,
    mask: &Mask,
    backend: &dyn GeneratorBackend,
    losses: &LossBackends,
    weights: &LossWeights,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    invert_with_snapshots(w_init, in_masked, crop, mask, backend, losses, weights, cfg, &[]).map(|(r, _)| r)
}

/// [`invert`], also reporting the best-so-far iterate after each requested
/// number of iterations (checkpoints past the stopping point repeat the
/// final state).
#[allow(clippy::too_many_arguments)]
pub fn invert_with_snapshots(
    w_init: &StyleW,
    in_masked: &Image,
    crop: &Image,
    mask: &Mask,
    backend: &dyn GeneratorBackend,
    losses: &LossBackends,
    weights: &LossWeights,
    cfg: &InversionConfig,
    checkpoints: &[usize],
) -> Result<(InversionResult, Vec<Snapshot>)> {
    cfg.validate()?;
    weights.validate()?;
    if w_init.values().len() != backend.latent_dim() {
        return Err(Error::dim(format!(
            "generator takes {}-d codes, got {}",
            backend.latent_dim(),
            w_init.values().len()
        )));
    }
    let target = prepare(in_masked, crop, mask, backend)?;
    let start = Instant::now();
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
        },
        &[w_init.values().len()],
    );
    let mut w = w_init.values().to_vec();
    let mut best_w = w.clone();
    let mut best_index = 0;
    let mut trace: Vec<f64> = Vec::with_capacity(cfg.max_iters + 1);
    let mut components = Vec::new();
    let mut calm = 0;
    let mut snapshots = Vec::new();
    let mut pending: Vec<usize> = checkpoints.to_vec();
    pending.sort_unstable();
    pending.dedup();
    pending.reverse();

    loop {
        let k = trace.len();
        let ev = evaluate(&w, &target, backend, losses, weights, cfg.mse_weight)?;
        if !ev.loss.is_finite() {
            trace.push(ev.loss);
            return Err(Error::Divergence { trace });
        }
        if k > 0 {
            if (ev.loss - trace[k - 1]).abs() < cfg.tolerance {
                calm += 1;
            } else {
                calm = 0;
            }
        }
        trace.push(ev.loss);
        if cfg.record_trace {
            components.push((ev.perc, ev.id));
        }
        if ev.loss < trace[best_index] {
            best_index = k;
            best_w.clone_from(&w);
        }
        while pending.last() == Some(&k) {
            pending.pop();
            snapshots.push(Snapshot {
                iteration: k,
                w_best: StyleW::new(best_w.clone())?,
                best_loss: trace[best_index],
                elapsed: start.elapsed(),
            });
        }
        if k == cfg.max_iters || calm >= CONVERGENCE_WINDOW {
            break;
        }
        opt.step_slices(&mut [w.as_mut_slice()], &[ev.grad.as_slice()]);
    }

    let elapsed = start.elapsed();
    let final_loss = trace[best_index];
    while let Some(k) = pending.pop() {
        snapshots.push(Snapshot {
            iteration: k,
            w_best: StyleW::new(best_w.clone())?,
            best_loss: final_loss,
            elapsed,
        });
    }
    log::debug!(
        "inversion: {} iterations, loss {:.6} -> {:.6} (best at {})",
        trace.len() - 1,
        trace[0],
        final_loss,
        best_index
    );
    Ok((
        InversionResult {
            w_star: StyleW::new(best_w)?,
            iterations_run: trace.len() - 1,
            loss_trace: trace,
            components,
            best_index,
            elapsed,
        },
        snapshots,
    ))
}

/// Loss of the inversion objective at a fixed `w`, no optimization.
pub fn objective_at(
    w: &StyleW,
    in_masked: &Image,
    crop: &Image,
    mask: &Mask,
    backend: &dyn GeneratorBackend,
    losses: &LossBackends,
    weights: &LossWeights,
) -> Result<f64> {
    let t = prepare(in_masked, crop, mask, backend)?;
    Ok(evaluate(w.values(), &t, backend, losses, weights, 0.0)?.loss)
}

/// One sample for [`iteration_sweep`].
#[derive(Debug, Clone)]
pub struct SweepInput {
    pub name: String,
    pub gt: Image,
    pub in_masked: Image,
    pub crop: Image,
    pub mask: Mask,
    pub w_init: StyleW,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub iterations: usize,
    pub report: MetricReport,
    pub mean_loss_opt: f64,
    /// Summed over inputs, up to this checkpoint.
    pub wall_clock: Duration,
}

/// Metrics of the best-so-far outputs after each count in `iter_points`.
pub fn iteration_sweep(
    inputs: &[SweepInput],
    backend: &dyn GeneratorBackend,
    losses: &LossBackends,
    weights: &LossWeights,
    iter_points: &[usize],
    cfg: &InversionConfig,
) -> Result<Vec<SweepRow>> {
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut points = iter_points.to_vec();
    points.sort_unstable();
    points.dedup();
    let horizon = points.last().copied().unwrap_or(0).max(1);
    let run_cfg = InversionConfig {
        max_iters: horizon,
        ..*cfg
    };
    let mut per_input = Vec::with_capacity(inputs.len());
    for s in inputs {
        let (_, snaps) = invert_with_snapshots(
            &s.w_init,
            &s.in_masked,
            &s.crop,
            &s.mask,
            backend,
            losses,
            weights,
            &run_cfg,
            &points,
        )?;
        per_input.push(snaps);
    }
    let mut rows = Vec::with_capacity(points.len());
    for (j, &k) in points.iter().enumerate() {
        let mut pairs = Vec::with_capacity(inputs.len());
        let (mut fg, mut fo) = (Vec::new(), Vec::new());
        let mut loss_sum = 0.0;
        let mut wall = Duration::ZERO;
        for (s, snaps) in inputs.iter().zip(&per_input) {
            let snap = &snaps[j];
            let out = generate(&snap.w_best, backend)?;
            fg.push(pooled_features(losses.features.as_ref(), &s.gt));
            fo.push(pooled_features(losses.features.as_ref(), &out));
            pairs.push((s.name.clone(), s.gt.clone(), out));
            loss_sum += snap.best_loss;
            wall += snap.elapsed;
        }
        rows.push(SweepRow {
            iterations: k,
            report: MetricReport::compute(&pairs, &fg, &fo, FidOptions { shrinkage: 1e-6 })?,
            mean_loss_opt: loss_sum / inputs.len() as f64,
            wall_clock: wall,
        });
    }
    Ok(rows)
}
