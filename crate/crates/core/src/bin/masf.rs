use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use masf_core::data::{
    letterbox, load_image, parse_annotations, AnnotationFormat, Dataset, GenConfig, InMemoryDataset, ManifestDataset,
    SyntheticDataset,
};
use masf_core::metrics::GroundTruth;
use masf_core::network::{Model, ModelConfig};
use masf_core::postproc::write_predictions_jsonl;
use masf_core::train::{detect_batch, evaluate_model, load_checkpoint, render_comparison, run_training, EvalSettings, TrainConfig};
use masf_core::{MasfError, Result, Shape, Tensor};

/// Base seed of the synthetic validation scenes; training scenes start at 0.
const SYNTH_VAL_SEED: u64 = 1_000_000;

#[derive(Parser)]
#[command(name = "masf", version, about = "Train, evaluate and inspect the small-object detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a metric log.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Parameter count, GFLOPs and forward wall-clock time.
    Bench(BenchArgs),
    /// Per-layer parameter and FLOP table.
    Inspect(InspectArgs),
    /// Side-by-side comparison of two checkpoints on one image.
    Render(RenderArgs),
    /// Write synthetic scenes and a manifest to a directory.
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Manifest JSON, or `synthetic` for generated scenes.
    #[arg(long)]
    data: String,
    /// Override the annotation format of a manifest.
    #[arg(long)]
    format: Option<AnnotationFormat>,
    /// Scene generator settings (JSON) for `--data synthetic`.
    #[arg(long)]
    gen_config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Model config JSON, or the preset `tiny` / `baseline-tiny`.
    #[arg(long)]
    model_config: String,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 2000)]
    synthetic_train: usize,
    #[arg(long, default_value_t = 500)]
    synthetic_val: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint manifest (`.json`).
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Manifest split to evaluate; all items when omitted.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 500)]
    synthetic_val: usize,
    /// Also write per-image detections as JSON lines.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model_config: String,
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model_config: String,
    /// Print the resolved model config as JSON instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint_a: PathBuf,
    #[arg(long)]
    checkpoint_b: PathBuf,
    /// PNG or `.msft` image.
    #[arg(long)]
    image: PathBuf,
    /// Ground-truth annotation file for the image.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long, default_value = "internal")]
    format: AnnotationFormat,
    #[arg(long, default_value = "comparison.png")]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    scale: u32,
    #[arg(long, default_value_t = 0.25)]
    score_threshold: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    train: usize,
    #[arg(long, default_value_t = 4)]
    val: usize,
    #[arg(long)]
    gen_config: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(MasfError::MissingFile(path.to_path_buf()));
    }
    Ok(std::fs::read_to_string(path)?)
}

fn model_config(arg: &str) -> Result<ModelConfig> {
    match arg {
        "tiny" => Ok(ModelConfig::tiny(3)),
        "baseline-tiny" => Ok(ModelConfig::baseline_tiny(3)),
        path => ModelConfig::load(Path::new(path)),
    }
}

fn gen_config(path: Option<&Path>, image_size: usize, num_classes: usize) -> Result<GenConfig> {
    let gen = match path {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| MasfError::Config(format!("generator config: {e}")))?,
        None => GenConfig {
            image_size,
            num_classes,
            ..GenConfig::default()
        },
    };
    gen.validate()?;
    Ok(gen)
}

/// Synthetic scenes are generated on demand; manifest items are decoded and
/// letterboxed once up front.
fn dataset(args: &DataArgs, split: Option<&str>, image_size: usize, num_classes: usize, seed: u64, count: usize) -> Result<Box<dyn Dataset>> {
    if args.data == "synthetic" {
        let gen = gen_config(args.gen_config.as_deref(), image_size, num_classes)?;
        if gen.image_size != image_size {
            return Err(MasfError::Config(format!(
                "generator image_size {} does not match the model's {image_size}",
                gen.image_size
            )));
        }
        Ok(Box::new(SyntheticDataset::new(gen, seed, count)?))
    } else {
        let ds = ManifestDataset::open(Path::new(&args.data), split, args.format, image_size)?;
        if ds.is_empty() {
            return Err(MasfError::Data(format!("{}: no items in split {split:?}", args.data)));
        }
        Ok(Box::new(InMemoryDataset::collect(&ds)?))
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mc = model_config(&a.model_config)?;
    let tc = match &a.train_config {
        Some(p) => TrainConfig::from_json(&read_text(p)?)?,
        None => TrainConfig {
            image_size: mc.image_size,
            ..TrainConfig::default()
        },
    };
    let train = dataset(&a.data, Some("train"), tc.image_size, mc.num_classes, 0, a.synthetic_train)?;
    let val = dataset(&a.data, Some("val"), tc.image_size, mc.num_classes, SYNTH_VAL_SEED, a.synthetic_val)?;
    log::info!("training on {} images, validating on {}", train.len(), val.len());
    let out = run_training(&mc, &tc, train.as_ref(), val.as_ref(), Some(&a.out))?;
    println!(
        "best epoch {} map50 {:.4}; checkpoints in {}",
        out.best_epoch,
        out.best_map50,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let c = &model.config;
    let data = dataset(&a.data, a.split.as_deref(), c.image_size, c.num_classes, SYNTH_VAL_SEED, a.synthetic_val)?;
    let (report, per_image) = evaluate_model(&model, data.as_ref(), &EvalSettings::default())?;
    if let Some(p) = &a.predictions {
        let mut f = std::io::BufWriter::new(std::fs::File::create(p)?);
        for (i, img) in per_image.iter().enumerate() {
            write_predictions_jsonl(&mut f, &data.get(i)?.id, &img.detections)?;
        }
    }
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = Model::new(model_config(&a.model_config)?, 0)?;
    let s = model.config.image_size;
    let x = Tensor::full(Shape::new(a.batch.max(1), 3, s, s), 0.5);
    model.predict(&x)?;
    let t = Instant::now();
    for _ in 0..a.iters.max(1) {
        model.predict(&x)?;
    }
    let ms = t.elapsed().as_secs_f64() * 1e3 / a.iters.max(1) as f64;
    println!("params      {}", model.count_params());
    println!("gflops      {:.4}", model.estimate_gflops(s)?);
    println!("forward_ms  {ms:.2} (batch {}, {s}x{s})", a.batch.max(1));
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let config = model_config(&a.model_config)?;
    if a.json {
        println!("{}", config.to_json());
        return Ok(());
    }
    print!("{}", Model::new(config, 0)?.format_layer_table()?);
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let (ma, _) = load_checkpoint(&a.checkpoint_a)?;
    let (mb, _) = load_checkpoint(&a.checkpoint_b)?;
    if ma.config.image_size != mb.config.image_size {
        return Err(MasfError::Config("the two checkpoints use different image sizes".into()));
    }
    let raw = load_image(&a.image)?;
    let (w, h) = (raw.shape().w, raw.shape().h);
    let (image, lb) = letterbox(&raw, ma.config.image_size)?;
    let gts: Vec<GroundTruth> = match &a.annotations {
        Some(p) => parse_annotations(p, a.format, w, h)?
            .gts
            .into_iter()
            .map(|g| GroundTruth {
                bbox: lb.forward(&g.bbox),
                class_id: g.class_id,
            })
            .collect(),
        None => Vec::new(),
    };
    let settings = EvalSettings {
        score_threshold: a.score_threshold,
        ..EvalSettings::default()
    };
    let (da, _) = detect_batch(&ma, &image, &settings)?;
    let (db, _) = detect_batch(&mb, &image, &settings)?;
    let (img, stats) = render_comparison(&image, &da[0], &db[0], &gts, a.scale);
    img.save(&a.out).map_err(|e| MasfError::Image(e.to_string()))?;
    println!(
        "{}: A {} detections, B {}; missed by A {}, by B {}, highlighted {}",
        a.out.display(),
        da[0].len(),
        db[0].len(),
        stats.missed_by_a,
        stats.missed_by_b,
        stats.red
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let gen = gen_config(a.gen_config.as_deref(), 128, 3)?;
    let manifest = masf_core::data::export_synthetic(&a.out, &gen, 0, &[("train", a.train), ("val", a.val)])?;
    println!("{}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Inspect(a) => inspect(a),
        Command::Render(a) => render(a),
        Command::Synth(a) => synth(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
