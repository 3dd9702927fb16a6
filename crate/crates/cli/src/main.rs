use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spm_cli::bench::{paired_psnr, parse_methods, read_csv, save_csv, BenchConfig, BenchMethod};
use spm_cli::review::{export_reviewed, MANIFEST_NAME};
use spm_cli::{bind_review, run_benchmark};
use spm_core::inpaint::{inpaint, InpaintParams};
use spm_core::io::{load_frame, load_mask, save_frame, save_mask};
use spm_core::mask::{
    detect_line_dropout_rows, measure_delta_h, morph_cleanup, phase_threshold_mask, physics_filter,
};
use spm_core::sim::{
    generate_pair_dataset, generate_pairs_from_frames, random_artefact, synthetic_surface,
    DatasetConfig, MaskCount, SurfaceKind,
};
use spm_core::stats::{paired_from_effect, paired_ttest};
use spm_core::ArtefactClass;
use spm_core::Split;
use spm_diffusion::{
    finetune, load_model, load_pairs, pretrain_backbone, sample_inpaint, save_model,
    synthetic_crops, NoiseSchedule, PretrainConfig, Regime, ToyDenoiser, TrainConfig,
};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "spm",
    version,
    about = "Artefact simulation, inpainting and benchmarking for SPM frames"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clean surface and/or apply one simulated artefact.
    Simulate(SimulateArgs),
    /// Build an artefact/clean pair dataset, or export a reviewed manifest.
    GenDataset(GenDatasetArgs),
    /// Mask extraction and filtering.
    #[command(subcommand)]
    Mask(MaskCommand),
    /// Inpaint one frame.
    Inpaint(InpaintArgs),
    /// Pretrain the toy diffusion backbone on synthetic clean crops.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained model on a pair dataset.
    Finetune(FinetuneArgs),
    /// Inpaint one frame with a diffusion model.
    Sample(SampleArgs),
    /// Score inpainting methods on the bench split.
    Bench(BenchArgs),
    /// Paired t-test between two methods of a bench CSV.
    Stats(StatsArgs),
    /// Serve the mask-review HTTP API.
    ServeReview(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    LineDropout,
    GainNoise,
    TipTailing,
    PhaseHop,
}

impl From<ClassArg> for ArtefactClass {
    fn from(c: ClassArg) -> Self {
        match c {
            ClassArg::LineDropout => ArtefactClass::LineDropout,
            ClassArg::GainNoise => ArtefactClass::GainNoise,
            ClassArg::TipTailing => ArtefactClass::TipTailing,
            ClassArg::PhaseHop => ArtefactClass::PhaseHop,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SurfaceArg {
    Grains,
    Terraces,
    Domains,
    Mixed,
}

impl From<SurfaceArg> for SurfaceKind {
    fn from(s: SurfaceArg) -> Self {
        match s {
            SurfaceArg::Grains => SurfaceKind::Grains,
            SurfaceArg::Terraces => SurfaceKind::Terraces,
            SurfaceArg::Domains => SurfaceKind::Domains,
            SurfaceArg::Mixed => SurfaceKind::Mixed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Lora,
    Full,
}

#[derive(Args)]
struct SimulateArgs {
    /// Input frame (.spmf or .pgm).
    #[arg(
        long = "in",
        conflicts_with = "surface",
        required_unless_present = "surface"
    )]
    input: Option<PathBuf>,
    /// Generate a synthetic clean surface instead of reading one.
    #[arg(long, value_enum)]
    surface: Option<SurfaceArg>,
    #[arg(long, default_value_t = 64)]
    size: u32,
    /// Artefact class to apply.
    #[arg(long, value_enum, requires = "mask_out")]
    class: Option<ClassArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output frame (artefact frame when --class is given).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Also write the clean input frame here.
    #[arg(long)]
    clean_out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDatasetArgs {
    /// Dataset root.
    #[arg(long, env = "SPM_DATA_DIR")]
    data_dir: PathBuf,
    /// Directory of clean frames; synthetic surfaces are used when absent.
    #[arg(long, conflicts_with = "export")]
    clean_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    synthetic: usize,
    #[arg(long, default_value_t = 64)]
    size: u32,
    #[arg(long, value_enum, default_value = "mixed")]
    surface: SurfaceArg,
    /// Fixed number of masks per frame (default: the Gaussian draw).
    #[arg(long)]
    masks_per_frame: Option<u32>,
    #[arg(long, default_value_t = 0.2)]
    bench_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the reviewed manifest (rejected masks removed) here instead of generating.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MaskCommand {
    /// Threshold a phase frame at |phase| >= lo degrees.
    Phase {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 85.0)]
        lo: f32,
        #[arg(long, default_value_t = 90.0)]
        hi: f32,
        #[arg(long, default_value_t = 0)]
        open_radius: u32,
        #[arg(long, default_value_t = 0)]
        min_area: u32,
    },
    /// Detect line-scan dropout rows.
    Lines {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4.0)]
        z: f32,
    },
    /// Height-contrast check of a mask against a height frame.
    Filter {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        height: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        delta_h: f32,
    },
}

#[derive(Args)]
struct InpaintArgs {
    /// biharmonic, ns, telea, patchmatch, surface or diffusion.
    #[arg(long)]
    method: String,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model checkpoint for the diffusion method.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    crops: usize,
    #[arg(long, default_value_t = 64)]
    size: u32,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-step log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Pretrained checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "SPM_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Manifest path (default: <data-dir>/manifest.jsonl).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "lora")]
    regime: RegimeArg,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for periodic checkpoints and the training log.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, env = "SPM_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated methods; `all` adds every classical method and diffusion.
    #[arg(long, default_value = "biharmonic,ns,telea,patchmatch,surface")]
    methods: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    /// Bench CSV; pairs rows of methods --a and --b by image id.
    #[arg(long, requires_all = ["a", "b"], required_unless_present = "effect")]
    csv: Option<PathBuf>,
    #[arg(long)]
    a: Option<String>,
    #[arg(long)]
    b: Option<String>,
    /// Paired effect size; with --n gives t and p directly.
    #[arg(
        long,
        requires = "n",
        conflicts_with = "csv",
        allow_hyphen_values = true
    )]
    effect: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "SPM_DATA_DIR")]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Static UI bundle to serve at the root.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

fn manifest_path(data_dir: Option<PathBuf>, manifest: Option<PathBuf>) -> Result<PathBuf> {
    match (manifest, data_dir) {
        (Some(m), _) => Ok(m),
        (None, Some(d)) => Ok(d.join(MANIFEST_NAME)),
        (None, None) => {
            bail!("no dataset given: pass --manifest or --data-dir, or set SPM_DATA_DIR")
        }
    }
}

fn load_trained(path: &Path) -> Result<ToyDenoiser> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let clean = match (&a.input, a.surface) {
        (Some(p), _) => read_frame(&p)?,
        (None, Some(kind)) => synthetic_surface(a.size, a.size, kind.into(), a.seed)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    if let Some(p) = &a.clean_out {
        save_frame(&clean, p)?;
    }
    match a.class {
        Some(class) => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let (frame, mask, _) = random_artefact(&clean, class.into(), &mut rng)?;
            save_frame(&frame, &a.out)?;
            save_mask(
                &mask,
                a.mask_out.as_ref().expect("clap requires --mask-out"),
            )?;
            println!("{} masked pixels", mask.count());
        }
        None => save_frame(&clean, &a.out)?,
    }
    Ok(())
}

fn gen_dataset(a: GenDatasetArgs) -> Result<()> {
    if let Some(out) = a.export {
        let (kept, dropped) = export_reviewed(&a.data_dir, &out)?;
        println!("exported {kept} pairs, dropped {dropped} rejected");
        return Ok(());
    }
    let cfg = DatasetConfig {
        masks_per_frame: a.masks_per_frame.map(MaskCount::Fixed).unwrap_or_default(),
        bench_fraction: a.bench_fraction,
        seed: a.seed,
        ..Default::default()
    };
    let entries = match a.clean_dir {
        Some(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            paths
                .retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("spmf" | "pgm")));
            paths.sort();
            generate_pair_dataset(&paths, &a.data_dir, &cfg)?
        }
        None => {
            let frames = (0..a.synthetic)
                .map(|i| {
                    Ok((
                        format!("frame{i:04}"),
                        synthetic_surface(
                            a.size,
                            a.size,
                            a.surface.into(),
                            a.seed.wrapping_add(i as u64),
                        )?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            generate_pairs_from_frames(&frames, &a.data_dir, &cfg)?
        }
    };
    let bench = entries.iter().filter(|e| e.split == Split::Bench).count();
    println!(
        "{} pairs ({} bench) in {}",
        entries.len(),
        bench,
        a.data_dir.display()
    );
    Ok(())
}

fn mask(cmd: MaskCommand) -> Result<()> {
    match cmd {
        MaskCommand::Phase {
            input,
            out,
            lo,
            hi,
            open_radius,
            min_area,
        } => {
            let m = phase_threshold_mask(&read_frame(&input)?, lo, hi)?;
            let m = morph_cleanup(&m, open_radius, min_area);
            save_mask(&m, out)?;
            println!("{} masked pixels", m.count());
        }
        MaskCommand::Lines { input, out, z } => {
            let m = detect_line_dropout_rows(&read_frame(&input)?, z)?;
            save_mask(&m, out)?;
            println!("{} masked pixels", m.count());
        }
        MaskCommand::Filter {
            mask,
            height,
            delta_h,
        } => {
            let (m, h) = (read_mask(&mask)?, read_frame(&height)?);
            let dh = measure_delta_h(&m, &h)?;
            let verdict = physics_filter(&m, &h, delta_h)?;
            println!(
                "{}",
                serde_json::json!({ "delta_h_nm": dh, "verdict": verdict })
            );
        }
    }
    Ok(())
}

fn run_inpaint(a: InpaintArgs) -> Result<()> {
    let method: BenchMethod = a.method.parse()?;
    let frame = read_frame(&a.input)?;
    let m = read_mask(&a.mask)?;
    let out = match method {
        BenchMethod::Classic(method) => inpaint(&frame, &m, &InpaintParams::new(method))?,
        BenchMethod::Diffusion => {
            let Some(p) = &a.model else {
                bail!("--model is required for the diffusion method")
            };
            sample_inpaint(
                &load_trained(p)?,
                &frame,
                &m,
                &NoiseSchedule::default(),
                a.seed,
            )?
        }
    };
    save_frame(&out, &a.out)?;
    Ok(())
}

fn write_log(path: &Path, rows: &[spm_diffusion::LogRow]) -> Result<()> {
    let mut text = format!("{}\n", spm_diffusion::LOG_HEADER);
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let crops = synthetic_crops(a.crops, a.size, a.seed)?;
    let mut model = ToyDenoiser::new_backbone(a.seed);
    let cfg = PretrainConfig {
        steps: a.steps,
        lr: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let rows = pretrain_backbone(&mut model, &crops, &cfg, &NoiseSchedule::default(), |r| {
        if r.step % 100 == 0 {
            eprintln!("step {} loss {:.4}", r.step, r.train_loss);
        }
    })?;
    save_model(&model, &a.out)?;
    if let Some(p) = &a.log {
        write_log(p, &rows)?;
    }
    Ok(())
}

fn run_finetune(a: FinetuneArgs) -> Result<()> {
    let manifest = manifest_path(a.data_dir, a.manifest)?;
    let train = load_pairs(&manifest, Some(Split::Train))?;
    let heldout = load_pairs(&manifest, Some(Split::Bench))?;
    let mut model = load_trained(&a.model)?;
    let regime = match a.regime {
        RegimeArg::Lora => Regime::LoraFinetune,
        RegimeArg::Full => Regime::FullRetrain,
    };
    let mut cfg = TrainConfig::for_regime(regime);
    cfg.seed = a.seed;
    cfg.out_dir = a.run_dir;
    if let Some(s) = a.steps {
        cfg.total_steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let outcome = finetune(
        &mut model,
        &train,
        &heldout,
        &cfg,
        &NoiseSchedule::default(),
        |r| {
            if let Some(p) = r.heldout_psnr {
                eprintln!(
                    "step {} loss {:.4} held-out {:.3} dB",
                    r.step, r.train_loss, p
                );
            }
        },
    )?;
    if let Some(best) = outcome.best {
        eprintln!("best step {} at {:.3} dB", best.step, best.psnr);
        model.params = best.params;
    }
    save_model(&model, &a.out)?;
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let model = load_trained(&a.model)?;
    let out = sample_inpaint(
        &model,
        &read_frame(&a.input)?,
        &read_mask(&a.mask)?,
        &NoiseSchedule::default(),
        a.seed,
    )?;
    save_frame(&out, &a.out)?;
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let manifest = manifest_path(a.data_dir, a.manifest)?;
    let methods = parse_methods(&a.methods)?;
    let model = a.model.as_deref().map(load_trained).transpose()?;
    let cfg = BenchConfig {
        methods,
        parallelism: a
            .threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
        model: model.as_ref(),
        seed: a.seed,
        ..Default::default()
    };
    let report = run_benchmark(&manifest, &cfg)?;
    save_csv(&report, &a.out)?;
    for r in report.records.iter().filter(|r| r.failure.is_some()) {
        eprintln!(
            "{} on {} failed: {}",
            r.method,
            r.image_id,
            r.failure.as_deref().unwrap_or("")
        );
    }
    println!(
        "{:<12} {:>6} {:>10} {:>12} {:>8}",
        "method", "images", "psnr_db", "mse", "ssim"
    );
    for s in &report.summary {
        println!(
            "{:<12} {:>6} {:>10.3} {:>12.3e} {:>8.4}",
            s.method, s.images, s.mean_psnr_db, s.mean_mse, s.mean_ssim
        );
    }
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    if let (Some(d), Some(n)) = (a.effect, a.n) {
        let (t, p) = paired_from_effect(d, n);
        println!(
            "{}",
            serde_json::json!({ "t_statistic": t, "p_two_sided": p, "cohens_d": d, "n": n })
        );
        return Ok(());
    }
    let (Some(csv), Some(ma), Some(mb)) = (a.csv, a.a, a.b) else {
        bail!("need --csv with --a and --b, or --effect with --n")
    };
    let records = read_csv(&csv)?;
    let (xa, xb) = paired_psnr(&records, &ma, &mb);
    let s = paired_ttest(&xa, &xb)?;
    println!("{}", serde_json::to_string(&s)?);
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let (listener, app) = bind_review(
            &a.data_dir,
            SocketAddr::new(a.host, a.port),
            a.ui_dir.as_deref(),
        )
        .await?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn read_frame(p: &Path) -> Result<spm_core::ScanFrame> {
    load_frame(p).with_context(|| format!("reading {}", p.display()))
}

fn read_mask(p: &Path) -> Result<spm_core::MaskImage> {
    load_mask(p).with_context(|| format!("reading {}", p.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::GenDataset(a) => gen_dataset(a),
        Command::Mask(c) => mask(c),
        Command::Inpaint(a) => run_inpaint(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Sample(a) => sample(a),
        Command::Bench(a) => bench(a),
        Command::Stats(a) => stats(a),
        Command::ServeReview(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(1)
        }
    }
}
