//! Command-line front end. Exit codes: 0 success, 1 domain error, 2 usage.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};

use crate::archive::{write_atomic, TensorArchive};
use crate::encoders::{pooled_features, FeatureExtractor};
use crate::error::{Error, Result};
use crate::generator::load_generator;
use crate::imaging::{FixedPose, Image, TemplateLandmarks};
use crate::inversion::InversionConfig;
use crate::losses::LossBackends;
use crate::metrics::{threshold_grid, FidOptions, MetricReport, PairList, VerificationCurves, DEFAULT_THRESHOLDS};
use crate::pipeline::{
    ingest_real_dataset, models_from_checkpoint, run_inpaint, run_verification_protocol, synthesize_stylegandb, train,
    DatasetManifest, IngestOptions, InpaintContext, MaskingOptions, Models, Protocol, RunConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "periface",
    version,
    about = "Periocular-conditioned face inpainting by latent-space mapping"
)]
pub struct Cli {
    /// Run configuration (flat `key = value` file).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed overriding the configuration's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the generator prior into a training set with known latents.
    Synth(SynthArgs),
    /// Preprocess a directory of real face images into a training set.
    Ingest(IngestArgs),
    /// Train the attribute encoder, mapper and latent discriminator.
    Train(TrainArgs),
    /// Inpaint one image: encode, map, generate, then refine the latent.
    #[command(alias = "invert")]
    Inpaint(InpaintArgs),
    /// Compare output images against ground truth.
    Evaluate(EvaluateArgs),
    /// Verification curves (FNMR, FMR, ROC, EER) over labelled pairs.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of samples.
    #[arg(long)]
    pub count: usize,
    /// Output directory.
    #[arg(long, default_value = "stylegandb")]
    pub out: PathBuf,
    /// Generator backend: `toy` or `archive:<path>`.
    #[arg(long, default_value = "toy")]
    pub generator: String,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory of PNG face images.
    #[arg(long)]
    pub dir: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "ingested")]
    pub out: PathBuf,
    /// JSON object mapping file stems to `[roll, pitch, yaw]` degrees.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Working resolution (square).
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest, overriding `data.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Total steps, overriding `steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Run directory, overriding `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    /// Input face image (PNG).
    #[arg(long)]
    pub input: PathBuf,
    /// Training checkpoint; without one the configured initial models are used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Latent refinement iterations; 0 skips refinement.
    #[arg(long, default_value_t = 25)]
    pub iters: usize,
    /// Adam step size on the latent.
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Convergence tolerance on the loss change.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    /// Write `iteration,loss,perc,id` rows here.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Output directory for `pre.png`, `post.png`, `masked.png` and `w_star.pfnt`.
    #[arg(long, default_value = "inpaint_out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Ground-truth PNG directory.
    #[arg(long)]
    pub gt_dir: PathBuf,
    /// Output PNG directory; files are paired with ground truth by name.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// CSV of `path_a,path_b,genuine`.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Embedding protocol: `periocular` or `inpainted`.
    #[arg(long, default_value = "periocular")]
    pub backend: String,
    /// Checkpoint for the inpainted protocol.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of evenly spaced thresholds over [-1, 1].
    #[arg(long, default_value_t = DEFAULT_THRESHOLDS)]
    pub thresholds: usize,
    /// Latent refinement iterations for the inpainted protocol.
    #[arg(long, default_value_t = 25)]
    pub iters: usize,
    /// Output directory for `curves.csv`, `curves.png` and `summary.json`.
    #[arg(long, default_value = "verify_out")]
    pub out: PathBuf,
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    if argv.len() <= 1 {
        let mut cmd = <Cli as clap::CommandFactory>::command();
        eprintln!("{}", cmd.render_usage());
        eprintln!("Run `periface --help` for the list of commands.");
        return EXIT_USAGE;
    }
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .target(env_logger::Target::Stderr)
        .try_init();
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DOMAIN
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn ensure_dir(d: &Path) -> Result<()> {
    fs::create_dir_all(d).map_err(|e| Error::io(d, e))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth(a) => {
            let gen = load_generator(&a.generator)?;
            let m = synthesize_stylegandb(a.count, cfg.seed, &gen, &a.out, &MaskingOptions::default())?;
            let (t, v) = m.counts();
            println!("{}", m.root.join(crate::pipeline::MANIFEST_FILE).display());
            log::info!("{t} train / {v} val");
        }
        Command::Ingest(a) => {
            let pose = match &a.poses {
                Some(p) => FixedPose::load(p)?,
                None => FixedPose::frontal(),
            };
            let opts = IngestOptions {
                resolution: (a.resolution, a.resolution),
                seed: cfg.seed,
                ..Default::default()
            };
            let r = ingest_real_dataset(&a.dir, &a.out, &TemplateLandmarks, &pose, &opts)?;
            println!("{}", r.manifest.root.join(crate::pipeline::MANIFEST_FILE).display());
            log::info!("{} kept, {} rejected", r.manifest.records.len(), r.rejections.len());
        }
        Command::Train(a) => {
            let mut cfg = cfg;
            if let Some(m) = &a.manifest {
                cfg.manifest = Some(m.clone());
            }
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            if let Some(o) = &a.out {
                cfg.out_dir = o.clone();
            }
            let path = cfg
                .manifest
                .clone()
                .ok_or_else(|| Error::Config("no manifest: pass --manifest or set data.manifest".into()))?;
            let manifest = DatasetManifest::load(&path)?;
            let s = train(cfg, &manifest)?;
            if let Some(last) = s.losses.last() {
                println!("{}", last.csv_row().join(","));
            }
        }
        Command::Inpaint(a) => inpaint(a, cfg)?,
        Command::Evaluate(a) => {
            let report = evaluate_dirs(&a.gt_dir, &a.out_dir)?;
            let json = report.to_json()?;
            match &a.report {
                Some(p) => write_atomic(p, json.as_bytes())?,
                None => println!("{json}"),
            }
        }
        Command::Verify(a) => verify(a, cfg)?,
    }
    Ok(())
}

fn context(checkpoint: Option<&Path>, cfg: RunConfig) -> Result<InpaintContext> {
    let (weights, models) = match checkpoint {
        Some(p) => {
            let (rc, m) = models_from_checkpoint(&TensorArchive::load(p)?)?;
            (rc.weights, m)
        }
        None => (cfg.weights, Models::from_config(&cfg)?),
    };
    Ok(InpaintContext::new(models, weights))
}

fn inpaint(a: &InpaintArgs, cfg: RunConfig) -> Result<()> {
    let ctx = context(a.checkpoint.as_deref(), cfg)?;
    let input = Image::load_png(&a.input)?;
    let icfg = InversionConfig {
        max_iters: a.iters,
        lr: a.lr,
        tolerance: a.tolerance,
        ..Default::default()
    };
    let out = run_inpaint(&input, &ctx, &icfg)?;
    ensure_dir(&a.out)?;
    out.pre.save_png(&a.out.join("pre.png"))?;
    out.post.save_png(&a.out.join("post.png"))?;
    out.in_masked.save_png(&a.out.join("masked.png"))?;
    let mut w = TensorArchive::new();
    w.insert("w", out.result.w_star.to_tensor());
    w.insert("w_init", out.w_init.to_tensor());
    w.meta
        .insert("iterations".into(), out.result.iterations_run.to_string());
    w.save(&a.out.join("w_star.pfnt"))?;
    if let Some(p) = &a.trace_out {
        write_atomic(p, out.result.trace_csv()?.as_bytes())?;
    }
    println!(
        "{},{},{}",
        out.result.iterations_run,
        out.result.initial_loss(),
        out.result.best_loss()
    );
    Ok(())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    v.sort();
    Ok(v)
}

/// Metrics over every PNG of `gt_dir` paired by name with `out_dir`.
pub fn evaluate_dirs(gt_dir: &Path, out_dir: &Path) -> Result<MetricReport> {
    let names = png_names(gt_dir)?;
    if names.is_empty() {
        return Err(Error::EmptyDataset(format!("no PNG files in {}", gt_dir.display())));
    }
    let ext = LossBackends::toy().features;
    let mut pairs = Vec::with_capacity(names.len());
    let (mut fg, mut fo) = (Vec::new(), Vec::new());
    for n in names {
        let gt = Image::load_png(&gt_dir.join(&n))?;
        let out = Image::load_png(&out_dir.join(&n))?;
        fg.push(pooled_features(ext.as_ref() as &dyn FeatureExtractor, &gt));
        fo.push(pooled_features(ext.as_ref(), &out));
        pairs.push((n, gt, out));
    }
    MetricReport::compute(&pairs, &fg, &fo, FidOptions { shrinkage: 1e-6 })
}

fn verify(a: &VerifyArgs, cfg: RunConfig) -> Result<()> {
    let protocol: Protocol = a.backend.parse()?;
    let pairs = PairList::load_csv(&a.pairs)?;
    let ctx = context(a.checkpoint.as_deref(), cfg)?;
    let icfg = InversionConfig {
        max_iters: a.iters,
        ..Default::default()
    };
    let grid = threshold_grid(a.thresholds);
    ensure_dir(&a.out)?;
    let curves = match run_verification_protocol(&pairs, protocol, &ctx, &icfg, &grid) {
        Ok(c) => c,
        Err(Error::InsufficientPairs {
            curves,
            genuine,
            impostor,
        }) => {
            // Still emit what can be drawn before reporting the failure.
            emit_curves_plot(&curves, &a.out.join("curves.png"))?;
            return Err(Error::InsufficientPairs {
                genuine,
                impostor,
                curves,
            });
        }
        Err(e) => return Err(e),
    };
    emit_curves_plot(&curves, &a.out.join("curves.png"))?;
    let summary = serde_json::json!({
        "eer": curves.eer,
        "eer_threshold": curves.eer_threshold,
        "accuracy": curves.accuracy,
        "accuracy_threshold": curves.accuracy_threshold,
        "pairs": pairs.records.len(),
    });
    let text = serde_json::to_string_pretty(&summary)?;
    write_atomic(&a.out.join("summary.json"), text.as_bytes())?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::io(Path::new("<stdout>"), e))?;
    Ok(())
}

pub const PLOT_WIDTH: u32 = 960;
pub const PLOT_HEIGHT: u32 = 480;
const PANEL: u32 = 480;
const MARGIN: u32 = 40;
pub const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
pub const AXIS_COLOR: Rgb<u8> = Rgb([0, 0, 0]);
pub const FNMR_COLOR: Rgb<u8> = Rgb([210, 40, 40]);
pub const FMR_COLOR: Rgb<u8> = Rgb([40, 80, 210]);
pub const ROC_COLOR: Rgb<u8> = Rgb([30, 140, 60]);
pub const EER_COLOR: Rgb<u8> = Rgb([240, 160, 0]);

/// Which half of the figure a point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Panel {
    /// FNMR and FMR against threshold, `x ∈ [-1, 1]`, `y ∈ [0, 1]`.
    Rates,
    /// Genuine accept rate `1 − FNMR` against FMR, both in `[0, 1]`.
    Roc,
}

/// Pixel of the data point `(x, y)` in `panel`.
pub fn plot_coords(panel: Panel, x: f64, y: f64) -> (u32, u32) {
    let (x0, xmin, xmax) = match panel {
        Panel::Rates => (0, -1.0, 1.0),
        Panel::Roc => (PANEL, 0.0, 1.0),
    };
    let span = (PANEL - 2 * MARGIN) as f64;
    let fx = ((x - xmin) / (xmax - xmin)).clamp(0.0, 1.0);
    let fy = y.clamp(0.0, 1.0);
    let px = x0 + MARGIN + (fx * span).round() as u32;
    let py = PLOT_HEIGHT - MARGIN - (fy * span).round() as u32;
    (px, py)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (u32, u32), b: (u32, u32), c: Rgb<u8>) {
    let (mut x, mut y) = (a.0 as i64, a.1 as i64);
    let (x1, y1) = (b.0 as i64, b.1 as i64);
    let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
    let (sx, sy) = (if x < x1 { 1 } else { -1 }, if y < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn marker(img: &mut RgbImage, p: (u32, u32), r: i64, c: Rgb<u8>) {
    for dy in -r..=r {
        for dx in -r..=r {
            put(img, p.0 as i64 + dx, p.1 as i64 + dy, c);
        }
    }
}

fn series(img: &mut RgbImage, pts: &[(u32, u32)], c: Rgb<u8>) {
    for w in pts.windows(2) {
        line(img, w[0], w[1], c);
    }
    for &p in pts {
        marker(img, p, 1, c);
    }
}

/// Draw the rates and ROC panels to `path` (PNG) and write the underlying
/// `threshold,fnmr,fmr` rows next to it with a `.csv` extension.
pub fn emit_curves_plot(curves: &VerificationCurves, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(PLOT_WIDTH, PLOT_HEIGHT, BACKGROUND);
    for panel in [Panel::Rates, Panel::Roc] {
        let (lo, hi) = match panel {
            Panel::Rates => (-1.0, 1.0),
            Panel::Roc => (0.0, 1.0),
        };
        let corners = [
            plot_coords(panel, lo, 0.0),
            plot_coords(panel, hi, 0.0),
            plot_coords(panel, hi, 1.0),
            plot_coords(panel, lo, 1.0),
        ];
        for i in 0..4 {
            line(&mut img, corners[i], corners[(i + 1) % 4], AXIS_COLOR);
        }
    }
    let t = &curves.thresholds;
    let fmr: Vec<_> = t
        .iter()
        .zip(&curves.fmr)
        .map(|(&x, &y)| plot_coords(Panel::Rates, x, y))
        .collect();
    let fnmr: Vec<_> = t
        .iter()
        .zip(&curves.fnmr)
        .map(|(&x, &y)| plot_coords(Panel::Rates, x, y))
        .collect();
    let roc: Vec<_> = curves
        .roc()
        .into_iter()
        .map(|(x, y)| plot_coords(Panel::Roc, x, y))
        .collect();
    // The crossing marker goes under the data so every point stays visible.
    if curves.eer.is_finite() && curves.eer_threshold.is_finite() {
        let p = plot_coords(Panel::Rates, curves.eer_threshold, curves.eer);
        let (x, y) = (p.0 as i64, p.1 as i64);
        for d in -5..=5 {
            put(&mut img, x + d, y + d, EER_COLOR);
            put(&mut img, x + d, y - d, EER_COLOR);
        }
    }
    series(&mut img, &fmr, FMR_COLOR);
    series(&mut img, &fnmr, FNMR_COLOR);
    series(&mut img, &roc, ROC_COLOR);
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    write_atomic(path, &bytes)?;
    write_atomic(&path.with_extension("csv"), curves.to_csv()?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::curves_from_scores;
    use std::ffi::OsStr;

    fn six_pair_curves(n: usize) -> VerificationCurves {
        curves_from_scores(&[0.9, 0.6, 0.3], &[0.5, 0.1, -0.2], &threshold_grid(n)).unwrap()
    }

    #[test]
    fn plot_points_match_csv() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("c.png");
        let c = six_pair_curves(21);
        emit_curves_plot(&c, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        let mut rows = csv::Reader::from_path(path.with_extension("csv")).unwrap();
        let mut n = 0;
        for r in rows.deserialize::<(f64, f64, f64)>() {
            let (t, fnmr, fmr) = r.unwrap();
            let pn = plot_coords(Panel::Rates, t, fnmr);
            let pf = plot_coords(Panel::Rates, t, fmr);
            assert_eq!(*img.get_pixel(pn.0, pn.1), FNMR_COLOR, "fnmr at t={t}");
            if pf.0.abs_diff(pn.0) > 1 || pf.1.abs_diff(pn.1) > 1 {
                assert_eq!(*img.get_pixel(pf.0, pf.1), FMR_COLOR, "fmr at t={t}");
            }
            n += 1;
        }
        assert_eq!(n, 21);
        let e = plot_coords(Panel::Rates, c.eer_threshold, c.eer);
        let cross = (-5i64..=5).flat_map(|d| [(d, d), (d, -d)]);
        let visible = cross
            .filter(|&(dx, dy)| *img.get_pixel((e.0 as i64 + dx) as u32, (e.1 as i64 + dy) as u32) == EER_COLOR)
            .count();
        assert!(visible > 0);
    }

    #[test]
    fn single_threshold_plot() {
        let d = tempfile::tempdir().unwrap();
        let c = curves_from_scores(&[0.9], &[0.1], &[0.5]).unwrap();
        emit_curves_plot(&c, &d.path().join("one.png")).unwrap();
        let img = image::open(d.path().join("one.png")).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (PLOT_WIDTH, PLOT_HEIGHT));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(dispatch(["periface"]), EXIT_USAGE);
        assert_eq!(dispatch(["periface", "--bogus"]), EXIT_USAGE);
        assert_eq!(dispatch(["periface", "synth"]), EXIT_USAGE);
        assert_eq!(dispatch(["periface", "--help"]), EXIT_OK);
        let d = tempfile::tempdir().unwrap();
        let missing = d.path().join("nope");
        assert_eq!(
            dispatch([
                OsStr::new("periface"),
                OsStr::new("evaluate"),
                OsStr::new("--gt-dir"),
                missing.as_os_str(),
                OsStr::new("--out-dir"),
                missing.as_os_str()
            ]),
            EXIT_DOMAIN
        );
    }
}
