use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use d2hnet::augment::{append_selection, heatmap, manifest_variance_maps, select_blurry_patches};
use d2hnet::config::RunConfig;
use d2hnet::eval::{ablation_table, evaluate, run_ablation, Experiment, ValidationSet};
use d2hnet::io::{read_png, write_file, write_png};
use d2hnet::isp::{add_noise_levels, noisy_image};
use d2hnet::model::{two_phase_infer, Ablation, DeblurNet, EnhanceNet};
use d2hnet::rng::{stream, Role};
use d2hnet::selftest::{self, Check};
use d2hnet::synth::{build_dataset, procedural_video, read_frame_dir, Manifest};
use d2hnet::train::{
    load_deblur, load_enhance, save_deblur, save_enhance, smoothed_endpoints, train_deblur, train_enhance,
    write_loss_log, AugmentingLoader, BatchSource, Loaded,
};
use d2hnet::{Shape, Tensor};

use crate::{Cli, CliResult, Command, Failure};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directories of numbered PNG frames, one video each.
    #[arg(long, num_args = 1..)]
    pub frames: Vec<PathBuf>,
    /// Number of procedural videos to generate instead.
    #[arg(long, conflicts_with = "frames")]
    pub procedural: Option<usize>,
    /// Side of procedural frames.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Source frames per procedural video.
    #[arg(long, default_value_t = 24)]
    pub length: usize,
}

#[derive(Args, Debug)]
pub struct ManifestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Args, Debug)]
pub struct PreviewArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Samples to write.
    #[arg(long, default_value_t = 4)]
    pub count: usize,
}

#[derive(Args, Debug)]
pub struct NoiseArgs {
    /// ISO to simulate; defaults to the bottom of the short-exposure range.
    #[arg(long)]
    pub iso: Option<f64>,
    /// Samples per signal level.
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    /// sRGB image to pass through unprocess, noise and process.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Trained deblur checkpoint.
    #[arg(long)]
    pub deblur: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub long: PathBuf,
    #[arg(long)]
    pub short: PathBuf,
    #[arg(long)]
    pub deblur: PathBuf,
    /// Without it the output is the upsampled deblur result.
    #[arg(long)]
    pub enhance: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Validation manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub deblur: PathBuf,
    #[arg(long)]
    pub enhance: Option<PathBuf>,
    /// Cached noisy validation inputs; created when missing.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Training manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Validation manifest.
    #[arg(long)]
    pub val: PathBuf,
    /// Flag set such as `only-long+l-last-gt`; repeatable. Defaults to the
    /// full model and every single flag.
    #[arg(long = "setting")]
    pub settings: Vec<String>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

const DEFAULT_SETTINGS: [&str; 11] = [
    "full",
    "only-long+l-last-gt",
    "only-short",
    "dense-alignment",
    "no-skip-fusion",
    "no-tail-block",
    "deblur-only",
    "no-varmap",
    "no-ia",
    "no-ca",
    "no-cutnoise",
];

pub fn run(cli: &Cli) -> CliResult {
    let g = &cli.global;
    if let Command::Selftest = cli.command {
        return report_checks(selftest::run_all(g.seed.unwrap_or(0)));
    }
    let cfg = g.load_config()?;
    let out = g.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| Failure::Input(format!("{}: {e}", out.display())))?;
    match &cli.command {
        Command::Synth(a) => synth(&cfg, out, a),
        Command::Varmap(a) => varmap(&cfg, out, &a.manifest),
        Command::Select(a) => select(&cfg, out, &a.manifest),
        Command::AugmentPreview(a) => augment_preview(&cfg, out, a),
        Command::NoiseSim(a) => noise_sim(&cfg, out, a),
        Command::TrainDeblur(a) => train_deblur_cmd(&cfg, out, &a.manifest),
        Command::TrainEnhance(a) => train_enhance_cmd(&cfg, out, a),
        Command::Infer(a) => infer(&cfg, out, a),
        Command::Eval(a) => eval(&cfg, out, a),
        Command::Ablate(a) => ablate(&cfg, out, a),
        Command::Gradcheck => report_checks(selftest::gradient_checks(cfg.train_seed())),
        Command::Selftest => unreachable!("handled above"),
    }
}

fn report_checks(checks: Vec<Check>) -> CliResult {
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::Invariant(format!("{failed} of {} checks failed", checks.len())));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    Ok(write_file(path, text.as_bytes())?)
}

fn synth(cfg: &RunConfig, out: &Path, a: &SynthArgs) -> CliResult {
    let fps = cfg.fps();
    let videos = match a.procedural {
        Some(0) => return Err(Failure::Input("--procedural needs at least one video".into())),
        Some(n) => (0..n)
            .map(|i| {
                let seed = cfg.sampling().seed.wrapping_add(i as u64);
                Ok((format!("procedural{i}"), procedural_video(a.size, a.size, a.length, seed)?))
            })
            .collect::<CliResult<Vec<_>>>()?,
        None if a.frames.is_empty() => {
            return Err(Failure::Input("give --frames <dir>... or --procedural <count>".into()))
        }
        None => a
            .frames
            .iter()
            .map(|dir| {
                let name = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "video".into());
                Ok((name, read_frame_dir(dir, fps)?))
            })
            .collect::<CliResult<Vec<_>>>()?,
    };
    let manifest = build_dataset(&videos, &cfg.synth(), cfg.sampling(), out)?;
    println!(
        "{} tuples from {} videos -> {}",
        manifest.len(),
        videos.len(),
        out.join(Manifest::FILE_NAME).display()
    );
    Ok(())
}

fn varmap(cfg: &RunConfig, out: &Path, path: &Path) -> CliResult {
    let manifest = Manifest::read(path)?;
    let k = cfg.augment().varmap_k;
    let maps = manifest_variance_maps(&manifest, k)?;
    let mut table = String::from("id\tmean\tmin\n");
    for (e, m) in manifest.entries.iter().zip(&maps) {
        write_png(out.join("varmap").join(format!("{}.png", e.id)), &heatmap(m)?)?;
        let min = m.data().iter().copied().fold(f32::INFINITY, f32::min);
        let _ = writeln!(table, "{}\t{:.6}\t{min:.6}", e.id, m.mean());
    }
    write_text(&out.join("varmap.tsv"), &table)?;
    println!("{} variance maps (k = {k}) -> {}", maps.len(), out.join("varmap").display());
    Ok(())
}

/// Entry paths rewritten so the manifest can live in `out`.
fn rebase(mut manifest: Manifest, out: &Path) -> CliResult<Manifest> {
    let same = match (manifest.root.canonicalize(), out.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if !same {
        let root = std::path::absolute(&manifest.root)
            .map_err(|e| Failure::Input(format!("{}: {e}", manifest.root.display())))?;
        for e in &mut manifest.entries {
            for p in [&mut e.long, &mut e.short, &mut e.l_last, &mut e.s_first] {
                *p = root.join(&*p);
            }
        }
    }
    manifest.root = out.to_path_buf();
    Ok(manifest)
}

fn select(cfg: &RunConfig, out: &Path, path: &Path) -> CliResult {
    let manifest = Manifest::read(path)?;
    let aug = cfg.augment();
    let maps = manifest_variance_maps(&manifest, aug.varmap_k)?;
    let sel = select_blurry_patches(&maps, &aug, cfg.train_seed())?;
    if sel.degenerate {
        eprintln!("warning: every sampled square has the same mean; nothing can be selected");
    }
    let extended = rebase(append_selection(&manifest, &sel, aug.select_side), out)?;
    extended.write(out.join(Manifest::FILE_NAME))?;
    let mut table = format!("# threshold\t{:?}\n# degenerate\t{}\nmap\ty\tx\tmean\n", sel.threshold, sel.degenerate);
    for s in &sel.selected {
        let _ = writeln!(table, "{}\t{}\t{}\t{:?}", s.map, s.y, s.x, s.mean);
    }
    write_text(&out.join("selection.tsv"), &table)?;
    println!(
        "threshold {:.6}: {} of {} squares selected, manifest now {} entries",
        sel.threshold,
        sel.selected.len(),
        sel.candidates.len(),
        extended.len()
    );
    Ok(())
}

fn loader(cfg: &RunConfig, manifest: &Manifest, ab: &Ablation) -> CliResult<AugmentingLoader> {
    Ok(AugmentingLoader::from_manifest(
        manifest,
        cfg.augment(),
        cfg.isp(),
        cfg.noise(),
        cfg.train_seed(),
        ab,
    )?)
}

fn augment_preview(cfg: &RunConfig, out: &Path, a: &PreviewArgs) -> CliResult {
    let manifest = Manifest::read(&a.manifest)?;
    let ab = cfg.ablation()?;
    let src = loader(cfg, &manifest, &ab)?;
    let dir = out.join("preview");
    let mut table = String::from("index\tcrop\tillumination\tcolor\tiso_long\tiso_short\tcutnoise\n");
    for i in 0..a.count.min(src.len()) {
        let s = src.sample(i, 0)?;
        for (name, img) in [("l_n", &s.l_n), ("s_n", &s.s_n), ("z", &s.z)] {
            write_png(dir.join(format!("{i:04}_{name}.png")), img)?;
        }
        let ap = s.applied;
        let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        let _ = writeln!(
            table,
            "{i}\t{},{}\t{}\t{}\t{}\t{}\t{}",
            ap.crop.0,
            ap.crop.1,
            opt(ap.illumination.map(|g| format!("{g:.4}"))),
            opt(ap.color.map(|(x, y)| format!("{x:.4},{y:.5}"))),
            opt(ap.noise.map(|d| format!("{:.0}", d.iso_long))),
            opt(ap.noise.map(|d| format!("{:.0}", d.iso_short))),
            opt(ap.cutnoise.map(|(y, x)| format!("{y},{x}"))),
        );
    }
    write_text(&out.join("preview.tsv"), &table)?;
    println!("{} samples -> {}", a.count.min(src.len()), dir.display());
    Ok(())
}

fn noise_sim(cfg: &RunConfig, out: &Path, a: &NoiseArgs) -> CliResult {
    let np = cfg.noise();
    let iso = a.iso.unwrap_or(np.iso_short.0);
    let lv = np.levels(iso)?;
    if a.samples < 2 {
        return Err(Failure::Input("--samples must be at least 2".into()));
    }
    let seed = cfg.train_seed();
    let predicted_floor = lv.read_sigma.powi(2) + lv.row_sigma.powi(2) + lv.q * lv.q / 12.0;
    let mut table = String::from("level\tmean\tvariance\tpredicted\n");
    let mut pts = Vec::new();
    for i in 0..10 {
        let x = 0.05 * (i + 1) as f64;
        let plane = Tensor::full(Shape::new(1, 1, 1, a.samples), x as f32);
        let noisy = add_noise_levels(&plane, &lv, &mut stream(seed, i, Role::Noise))?;
        let vals: Vec<f64> = noisy.data().iter().map(|&v| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        let _ = writeln!(table, "{x:.2}\t{mean:.6}\t{var:.6e}\t{:.6e}", lv.gain * x + predicted_floor);
        pts.push((x, var));
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let syy: f64 = pts.iter().map(|(_, y)| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = sxy * sxy / (sxx * syy);
    let _ = writeln!(
        table,
        "# fit slope {slope:.6e} (K = {:.6e}), intercept {:.6e} (predicted {predicted_floor:.6e}), R^2 {r2:.6}",
        lv.gain,
        my - slope * mx
    );
    write_text(&out.join("noise_stats.tsv"), &table)?;
    print!("{table}");
    if let Some(img) = &a.image {
        let x = read_png(img)?;
        let mut rng = stream(seed, 0, Role::Validation);
        let p = cfg.isp().sample(&mut rng);
        write_png(out.join("noisy.png"), &noisy_image(&x, iso, &p, &np, &mut rng)?)?;
    }
    Ok(())
}

fn train_deblur_cmd(cfg: &RunConfig, out: &Path, path: &Path) -> CliResult {
    let manifest = Manifest::read(path)?;
    let ab = cfg.ablation()?;
    let model = cfg.model();
    let sched = cfg.deblur_schedule();
    let src = loader(cfg, &manifest, &ab)?;
    let mut net = DeblurNet::new(&model, sched.seed);
    let res = train_deblur(&mut net, &src, &model, &sched, &ab)?;
    save_deblur(out.join("deblur.ckpt"), &net, Some(&res.state), cfg.fingerprint(), &ab)?;
    write_loss_log(out.join("deblur_loss.txt"), &res.losses)?;
    print_losses("deblur", &res.losses);
    Ok(())
}

fn print_losses(stage: &str, losses: &[f32]) {
    match smoothed_endpoints(losses, 20.min(losses.len() / 2).max(1)) {
        Some((first, last)) => println!("{stage}: {} steps, smoothed L1 {first:.6} -> {last:.6}", losses.len()),
        None => println!("{stage}: no steps run"),
    }
}

fn warn_fingerprint(name: &str, loaded: Option<u32>, cfg: &RunConfig) {
    if loaded != Some(cfg.fingerprint()) {
        eprintln!("warning: {name} checkpoint was written under a different config");
    }
}

fn load_deblur_checked(path: &Path, cfg: &RunConfig) -> CliResult<Loaded<DeblurNet<f32>>> {
    let d = load_deblur(path, &cfg.model())?;
    warn_fingerprint("deblur", d.fingerprint, cfg);
    Ok(d)
}

fn load_enhance_checked(path: &Path, cfg: &RunConfig, ab: &Ablation) -> CliResult<Loaded<EnhanceNet<f32>>> {
    let e = load_enhance(path, &cfg.model())?;
    warn_fingerprint("enhance", e.fingerprint, cfg);
    if e.ablation != *ab {
        eprintln!(
            "warning: enhance checkpoint was trained as {}, config says {}",
            e.ablation.label(),
            ab.label()
        );
    }
    Ok(e)
}

fn train_enhance_cmd(cfg: &RunConfig, out: &Path, a: &EnhanceArgs) -> CliResult {
    let ab = cfg.ablation()?;
    if ab.deblur_only {
        return Err(Failure::Input("the deblur-only setting has no enhancement stage".into()));
    }
    let deblur = load_deblur_checked(&a.deblur, cfg)?.net;
    let manifest = Manifest::read(&a.manifest)?;
    let model = cfg.model();
    let sched = cfg.enhance_schedule();
    let src = loader(cfg, &manifest, &ab)?;
    let mut net = EnhanceNet::new(&model, &ab, sched.seed);
    let res = train_enhance(&mut net, &deblur, &src, &model, &sched, &ab)?;
    save_enhance(out.join("enhance.ckpt"), &net, Some(&res.state), cfg.fingerprint(), &ab)?;
    write_loss_log(out.join("enhance_loss.txt"), &res.losses)?;
    print_losses("enhance", &res.losses);
    Ok(())
}

fn infer(cfg: &RunConfig, out: &Path, a: &InferArgs) -> CliResult {
    let ab = cfg.ablation()?;
    let deblur = load_deblur_checked(&a.deblur, cfg)?.net;
    let enhance = match &a.enhance {
        Some(p) if !ab.deblur_only => Some(load_enhance_checked(p, cfg, &ab)?.net),
        _ => None,
    };
    let l_n = read_png(&a.long)?;
    let s_n = read_png(&a.short)?;
    let r = two_phase_infer(&deblur, enhance.as_ref(), &l_n, &s_n, &cfg.model(), &ab)?;
    write_png(out.join("y.png"), &r.y)?;
    write_png(out.join("t.png"), &r.t.clamp01())?;
    println!("wrote {} and {}", out.join("y.png").display(), out.join("t.png").display());
    Ok(())
}

/// The cached validation set when it matches the manifest, otherwise a fresh
/// one written to the cache path.
fn validation(cfg: &RunConfig, manifest_path: &Path, cache: Option<&Path>, out: &Path) -> CliResult<ValidationSet> {
    let manifest = Manifest::read(manifest_path)?;
    if let Some(c) = cache.filter(|c| c.exists()) {
        let v = ValidationSet::load(c)?;
        if v.manifest_hash != manifest.hash() {
            return Err(Failure::Input(format!(
                "{} was generated for another manifest; delete it or pass a different --cache",
                c.display()
            )));
        }
        return Ok(v);
    }
    let v = ValidationSet::from_manifest(&manifest, &cfg.isp(), &cfg.noise(), cfg.eval_seed())?;
    let target = cache.map_or_else(|| out.join("validation.bin"), Path::to_path_buf);
    v.save(target)?;
    Ok(v)
}

fn eval(cfg: &RunConfig, out: &Path, a: &EvalArgs) -> CliResult {
    let ab = cfg.ablation()?;
    let val = validation(cfg, &a.manifest, a.cache.as_deref(), out)?;
    let deblur = load_deblur(&a.deblur, &cfg.model())?;
    let enhance = match &a.enhance {
        Some(p) if !ab.deblur_only => Some(load_enhance(p, &cfg.model())?),
        _ => None,
    };
    let mut report = evaluate(
        &val,
        &deblur.net,
        enhance.as_ref().map(|e| &e.net),
        &cfg.model(),
        &ab,
        cfg.fingerprint(),
    )?;
    report.check_checkpoint("deblur", deblur.fingerprint);
    if let Some(e) = &enhance {
        report.check_checkpoint("enhance", e.fingerprint);
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_text(&out.join("eval.tsv"), &report.to_tsv())?;
    println!("{}", report.summary());
    Ok(())
}

fn ablate(cfg: &RunConfig, out: &Path, a: &AblateArgs) -> CliResult {
    let names: Vec<&str> = if a.settings.is_empty() {
        DEFAULT_SETTINGS.to_vec()
    } else {
        a.settings.iter().map(String::as_str).collect()
    };
    let sets = names.iter().map(|n| Ablation::parse(n)).collect::<d2hnet::Result<Vec<_>>>()?;
    let manifest = Manifest::read(&a.manifest)?;
    let val = validation(cfg, &a.val, a.cache.as_deref(), out)?;
    let exp = Experiment {
        model: cfg.model(),
        deblur: cfg.deblur_schedule(),
        enhance: cfg.enhance_schedule(),
        fingerprint: cfg.fingerprint(),
    };
    let source_for = |ab: &Ablation| -> d2hnet::Result<Box<dyn BatchSource>> {
        Ok(Box::new(AugmentingLoader::from_manifest(
            &manifest,
            cfg.augment(),
            cfg.isp(),
            cfg.noise(),
            cfg.train_seed(),
            ab,
        )?))
    };
    let reports = run_ablation(&exp, &source_for, &val, &sets)?;
    for r in &reports {
        write_text(&out.join("ablation").join(format!("{}.tsv", r.label)), &r.to_tsv())?;
    }
    let table = ablation_table(&reports);
    write_text(&out.join("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(())
}
