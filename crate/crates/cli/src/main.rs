//! Command-line workflow: dataset generation, training, evaluation,
//! decomposition panels, and the latency benchmark.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scene_decomp::dataset::{generate_dataset, load_dataset, SceneSpec};
use scene_decomp::evaluation::{
    benchmark_latency, evaluate_model, eval_hyper, extract_detections, write_latency_csv,
    BenchmarkConfig,
};
use scene_decomp::foreground::FgMode;
use scene_decomp::model::ModelNoise;
use scene_decomp::tensor::Tape;
use scene_decomp::training::{load_checkpoint, model_from_checkpoint, train, TrainConfig};
use scene_decomp::visualize::render_panel;
use scene_decomp::Error;

#[derive(Parser)]
#[command(name = "scene-decomp", about = "Object-centric scene decomposition workflow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sprite dataset with box annotations
    MakeDataset(MakeDatasetArgs),
    /// Train a model on a generated dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split and write a metric report
    Eval(EvalArgs),
    /// Render decomposition panels for images using a checkpoint
    Decompose(DecomposeArgs),
    /// Time parallel vs sequential gradient steps across grid sizes
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct MakeDatasetArgs {
    /// scene spec file (flat key = value); defaults apply when omitted
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// overrides the spec's seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// train,val,test image counts
    #[arg(long, default_value = "5000,500,500")]
    counts: String,
}

#[derive(Args)]
struct TrainArgs {
    /// training config file (flat key = value)
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// metric report destination (JSON)
    #[arg(long)]
    out: PathBuf,
    /// dataset split to evaluate
    #[arg(long, default_value = "test")]
    split: String,
    /// hard-presence threshold on the posterior presence probability
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// accepted for interface stability; evaluation is deterministic
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// one image file or a directory of images
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// comma-separated grid sides, e.g. 4,8,16
    #[arg(long, default_value = "4,8,16")]
    grids: String,
    /// comma-separated modes: parallel, sequential
    #[arg(long, default_value = "parallel,sequential")]
    modes: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 20)]
    timed: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Usage/config errors exit 2, runtime failures exit 1.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::ShapeMismatch(_)
        | Error::VersionMismatch { .. } => 2,
        Error::Io { .. } | Error::DataIntegrity(_) | Error::NonFinite { .. } => 1,
    }
}

fn read_to_string(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn require_dir(path: &Path, what: &str) -> Result<(), Error> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} directory {} does not exist", path.display())))
    }
}

fn parse_counts(s: &str) -> Result<(usize, usize, usize), Error> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("--counts expects tr,va,te, got `{s}`")));
    }
    let parse = |p: &str| {
        p.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad count `{p}` in --counts")))
    };
    Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}

fn run_make_dataset(args: MakeDatasetArgs) -> Result<(), Error> {
    let mut spec = match &args.spec {
        Some(path) => SceneSpec::from_kv(&read_to_string(path)?)?,
        None => SceneSpec::default(),
    };
    spec.seed = args.seed;
    let (tr, va, te) = parse_counts(&args.counts)?;
    generate_dataset(&spec, tr, va, te, &args.out)?;
    println!("{}", args.out.join("manifest.json").display());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), Error> {
    require_dir(&args.data, "data")?;
    let config = TrainConfig::from_kv(&read_to_string(&args.config)?)?;
    let outcome = train::<f32>(&config, &args.data, &args.out, args.resume.as_deref())?;
    println!(
        "trained to step {}; checkpoint {}",
        outcome.final_step,
        outcome.checkpoint_path.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), Error> {
    require_dir(&args.data, "data")?;
    let _ = args.seed;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = model_from_checkpoint::<f32>(&ckpt)?;
    let data = load_dataset(&args.data, &args.split)?;
    if data.image_size != model.config.image_size {
        return Err(Error::ShapeMismatch(format!(
            "dataset images are {}px but the checkpoint expects {}px",
            data.image_size, model.config.image_size
        )));
    }
    let hp = eval_hyper(&ckpt.config);
    let report = evaluate_model(&model, &data, &hp, ckpt.config.batch, args.threshold)?;
    let body = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&args.out, body).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    println!("{}", args.out.display());
    Ok(())
}

fn run_decompose(args: DecomposeArgs) -> Result<(), Error> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = model_from_checkpoint::<f32>(&ckpt)?;
    let hp = eval_hyper(&ckpt.config);
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(args.out.display().to_string(), e))?;

    let inputs: Vec<PathBuf> = if args.images.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&args.images)
            .map_err(|e| Error::io(args.images.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .map(|e| matches!(e.to_str(), Some("png" | "jpg" | "jpeg")))
                    .unwrap_or(false)
            })
            .collect();
        v.sort();
        v
    } else {
        vec![args.images.clone()]
    };
    if inputs.is_empty() {
        return Err(Error::Config(format!("no images under {}", args.images.display())));
    }

    let s = model.config.image_size;
    let mut rendered = 0usize;
    for path in &inputs {
        let img = match image::open(path) {
            Ok(i) => i.to_rgb8(),
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                continue;
            }
        };
        if img.width() as usize != s || img.height() as usize != s {
            eprintln!(
                "warning: skipping {}: expected {s}x{s}, got {}x{}",
                path.display(),
                img.width(),
                img.height()
            );
            continue;
        }
        let mut batch = ndarray::ArrayD::<f32>::zeros(ndarray::IxDyn(&[1, 3, s, s]));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                batch[[0, c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
            }
        }
        let mut tape = Tape::new();
        let noise = ModelNoise::zeros(1, &model.config);
        let fwd = model.forward(&mut tape, &batch, &hp, &noise)?;
        let pres = tape.val(fwd.fg_post.pres_prob).to_owned();
        let boxes = tape.val(fwd.fg_sample.boxes).to_owned();
        let dets = extract_detections(&pres, &boxes, s, args.threshold);
        let out_path = args
            .out
            .join(path.file_stem().unwrap_or_default())
            .with_extension("panel.png");
        render_panel(
            s,
            model.config.k,
            &batch,
            &tape.val(fwd.recon).to_owned(),
            &tape.val(fwd.fg_render.mu_fg).to_owned(),
            &tape.val(fwd.fg_render.alpha).to_owned(),
            &tape.val(fwd.bg_render.mu_bg).to_owned(),
            &tape.val(fwd.bg_render.pi).to_owned(),
            &dets[0],
            &out_path,
        )?;
        rendered += 1;
    }
    if rendered == 0 {
        return Err(Error::DataIntegrity("no input image could be processed".into()));
    }
    println!("rendered {rendered} panels under {}", args.out.display());
    Ok(())
}

fn run_benchmark(args: BenchmarkArgs) -> Result<(), Error> {
    let grids: Vec<usize> = args
        .grids
        .split(',')
        .map(|g| {
            g.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad grid `{g}` in --grids")))
        })
        .collect::<Result<_, _>>()?;
    let modes: Vec<FgMode> = args
        .modes
        .split(',')
        .map(|m| m.trim().parse::<FgMode>())
        .collect::<Result<_, _>>()?;
    let cfg = BenchmarkConfig {
        image_size: args.image_size,
        k: args.k,
        batch: args.batch,
        warmup_steps: args.warmup,
        timed_steps: args.timed,
        seed: args.seed,
    };
    let records = benchmark_latency(&grids, &modes, &cfg)?;
    write_latency_csv(&records, &args.out)?;
    for r in &records {
        println!(
            "grid {:>2} mode {:<10} mean {:.4}s std {:.4}s capacity {}",
            r.grid, r.mode, r.mean_s, r.std_s, r.capacity
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeDataset(a) => run_make_dataset(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Decompose(a) => run_decompose(a),
        Command::Benchmark(a) => run_benchmark(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
