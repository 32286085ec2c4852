use std::fs;
use std::path::Path;

use periface::archive::TensorArchive;
use periface::generator::{generate, ToyGenerator};
use periface::imaging::{Image, Mask};
use periface::inversion::InversionConfig;
use periface::pipeline::{
    load_latent, models_from_checkpoint, run_inpaint, synthesize_stylegandb, DatasetManifest, InpaintContext,
    MaskingOptions, RunConfig, Split, Trainer, MANIFEST_FILE,
};

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "masks", "crops", "latents"] {
        let d = root.join(sub);
        let mut names: Vec<_> = fs::read_dir(&d)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            out.push((
                p.strip_prefix(root).unwrap().display().to_string(),
                fs::read(&p).unwrap(),
            ));
        }
    }
    out
}

#[test]
fn synthesis_is_deterministic_and_round_trips() {
    let gen = ToyGenerator::toy();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = synthesize_stylegandb(10, 42, &gen, a.path(), &MaskingOptions::default()).unwrap();
    synthesize_stylegandb(10, 42, &gen, b.path(), &MaskingOptions::default()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(ma.records.len(), 10);
    assert_eq!(ma.counts(), (9, 1));
    let loaded = DatasetManifest::load(&a.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded.records, ma.records);
    for r in &ma.records {
        let w = load_latent(&ma.resolve(r.w.as_ref().unwrap())).unwrap();
        let stored = Image::load_png(&ma.resolve(&r.gt)).unwrap();
        assert_eq!(generate(&w, &gen).unwrap().quantized().data(), stored.data());
        let m = Mask::load_png(&ma.resolve(&r.mask)).unwrap();
        assert!(m.coverage() > 0.5);
    }
    let c = tempfile::tempdir().unwrap();
    let mc = synthesize_stylegandb(10, 43, &gen, c.path(), &MaskingOptions::default()).unwrap();
    assert_ne!(
        fs::read(mc.resolve(&mc.records[0].gt)).unwrap(),
        fs::read(ma.resolve(&ma.records[0].gt)).unwrap()
    );
}

#[test]
fn synthesis_cleans_up_on_failure() {
    let gen = ToyGenerator::toy();
    let d = tempfile::tempdir().unwrap();
    // A regular file where the latent directory should go.
    fs::write(d.path().join("latents"), b"").unwrap();
    assert!(synthesize_stylegandb(3, 1, &gen, d.path(), &MaskingOptions::default()).is_err());
    assert!(!d.path().join(MANIFEST_FILE).exists());
    let images = d.path().join("images");
    assert!(!images.exists() || fs::read_dir(&images).unwrap().next().is_none());
}

fn toy_run(dir: &Path, count: usize, batch_size: usize) -> (RunConfig, DatasetManifest) {
    let gen = ToyGenerator::toy();
    let m = synthesize_stylegandb(count, 7, &gen, &dir.join("data"), &MaskingOptions::default()).unwrap();
    let cfg = RunConfig {
        batch_size,
        steps: 50,
        checkpoint_every: 25,
        out_dir: dir.join("run"),
        ..Default::default()
    };
    (cfg, m)
}

#[test]
fn training_updates_only_the_trainable_modules() {
    let d = tempfile::tempdir().unwrap();
    // 17 samples: 16 train (one full batch per step), 1 validation.
    let (cfg, m) = toy_run(d.path(), 17, 16);
    let mut t = Trainer::new(cfg, &m).unwrap();
    let digests = |t: &Trainer| {
        let md = t.models();
        [
            md.identity.params().digest(),
            md.generator.digest(),
            md.attribute.params().digest(),
            md.mapper.params().digest(),
            md.discriminator.params().digest(),
            md.losses.face.params().digest(),
        ]
    };
    let before = digests(&t);
    let summary = t.run().unwrap();
    let after = digests(&t);
    assert_eq!(before[0], after[0]);
    assert_eq!(before[1], after[1]);
    assert_eq!(before[5], after[5]);
    for k in 2..5 {
        assert_ne!(before[k], after[k]);
    }
    assert_eq!(summary.losses.len(), 50);
    let log = fs::read_to_string(d.path().join("run/train_log.csv")).unwrap();
    assert_eq!(
        log.lines().next().unwrap(),
        "step,l_perc,l_style,l_id,l_lnd,l_rec,l_adv_g,l_total"
    );
    assert_eq!(log.lines().count(), 51);
    for name in ["latest.pfnt", "step_000025.pfnt", "step_000050.pfnt", "best.pfnt"] {
        assert!(d.path().join("run").join(name).is_file(), "{name}");
    }
    let totals: Vec<f64> = summary.losses.iter().map(|s| s.bundle.total).collect();
    let ma: Vec<f64> = totals.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for pair in ma.windows(2) {
        assert!(pair[1] < pair[0], "moving average rose: {:?}", ma);
    }
}

#[test]
fn checkpoint_resume_reproduces_losses() {
    let d = tempfile::tempdir().unwrap();
    let (cfg, m) = toy_run(d.path(), 12, 4);
    let mut a = Trainer::new(cfg.clone(), &m).unwrap();
    for _ in 0..3 {
        a.step().unwrap();
    }
    let ckpt = a.checkpoint();
    let bytes = ckpt.to_bytes().unwrap();
    let reloaded = TensorArchive::from_bytes(&bytes).unwrap();
    assert_eq!(reloaded.to_bytes().unwrap(), bytes);
    let mut b = Trainer::resume(cfg.clone(), &m, &reloaded).unwrap();
    assert_eq!(b.step_count(), 3);
    for _ in 0..5 {
        let (x, y) = (a.step().unwrap(), b.step().unwrap());
        assert_eq!(x, y);
    }
    let mut other = cfg;
    other.lr *= 3.0;
    assert!(Trainer::resume(other, &m, &reloaded).is_err());
}

#[test]
fn inpaint_is_deterministic_and_never_regresses() {
    let d = tempfile::tempdir().unwrap();
    let (cfg, m) = toy_run(d.path(), 12, 4);
    let mut t = Trainer::new(cfg, &m).unwrap();
    t.step().unwrap();
    let (rc, models) = models_from_checkpoint(&t.checkpoint()).unwrap();
    assert_eq!(models.mapper.params().digest(), t.models().mapper.params().digest());
    let ctx = InpaintContext::new(models, rc.weights);
    let rec = m.split(Split::Train).next().unwrap();
    let input = Image::load_png(&m.resolve(&rec.gt)).unwrap();
    let cfg = InversionConfig {
        max_iters: 10,
        ..Default::default()
    };
    let a = run_inpaint(&input, &ctx, &cfg).unwrap();
    let b = run_inpaint(&input, &ctx, &cfg).unwrap();
    assert_eq!(a.post, b.post);
    assert_eq!(a.result.loss_trace, b.result.loss_trace);
    assert!(a.result.best_loss() <= a.result.initial_loss());
    assert_eq!(a.pre, generate(&a.w_init, ctx.models.generator.as_ref()).unwrap());
    let zero = run_inpaint(&input, &ctx, &InversionConfig { max_iters: 0, ..cfg }).unwrap();
    assert_eq!(zero.post, zero.pre);
    assert_eq!(zero.result.loss_trace.len(), 1);
}
