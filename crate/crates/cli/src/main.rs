//! `pipeline` command-line tool.
//!
//! Exit codes: 0 success, 1 config error, 2 adapter failure, 3 data error.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pseudolabel::adapter::{PredictJob, TrainJob};
use pseudolabel::augment::{AugmentationSpec, PredictionSet};
use pseudolabel::dataio::{self, DatasetManifest};
use pseudolabel::eval::{evaluate, Detections, IouKind};
use pseudolabel::fusion::{confidence_filter, fuse, select_top1, FusionAlgorithm, FusionConfig};
use pseudolabel::geometry::BoundsPolicy;
use pseudolabel::json::to_canonical_string;
use pseudolabel::pipeline::{self, student_noise, PipelineConfig};
use pseudolabel::synthdet::{self, NoiseModel, SceneConfig, StudentModel, SyntheticDetector, SyntheticStudent};

#[derive(Parser)]
#[command(name = "pipeline", version, about = "Annotation-free pseudo-labeling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run split, pseudo-labeling, distillation and evaluation from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fuse per-view COCO results into one results file.
    Fuse(FuseArgs),
    /// Apply the confidence filter (and optionally top-1 selection) to results.
    Filter {
        /// COCO manifest listing the images.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        threshold: f64,
        #[arg(long)]
        top1: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score COCO results against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Box)]
        kind: Kind,
        /// Write the summary here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        pr_csv: Option<PathBuf>,
    },
    /// Seeded train/eval split of a COCO file.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        train_size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate a synthetic dataset (and optionally noisy teacher predictions).
    Synth(SynthArgs),
    /// Built-in adapters speaking the process protocol.
    #[command(hide = true, subcommand)]
    Adapter(AdapterCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Box,
    Mask,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algorithm {
    Wbf,
    Nms,
    SoftNms,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    images: PathBuf,
    /// Results files; records carry their view in `aug`.
    #[arg(long, num_args = 1.., required = true)]
    predictions: Vec<PathBuf>,
    /// View of records without an `aug` field.
    #[arg(long, default_value = "identity")]
    view: String,
    #[arg(long, value_enum, default_value_t = Algorithm::Wbf)]
    algorithm: Algorithm,
    #[arg(long, default_value_t = 0.55)]
    iou: f64,
    /// Drop fused instances scoring below this.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    top1: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    images: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    width: u32,
    #[arg(long, default_value_t = 128)]
    height: u32,
    #[arg(long)]
    no_masks: bool,
    /// Also write teacher predictions for these views (comma separated).
    #[arg(long, value_delimiter = ',')]
    views: Vec<String>,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum AdapterCommand {
    /// Predict with the synthetic teacher, or the synthetic student when the
    /// job names an artifact.
    SynthPredict {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        seed: u64,
        job: PathBuf,
        out: PathBuf,
    },
    /// Fit the synthetic student to a train job's labels.
    SynthTrain {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        seed: u64,
        job: PathBuf,
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn config(e: impl Display) -> Failure {
    Failure { code: 1, message: e.to_string() }
}

fn adapter(e: impl Display) -> Failure {
    Failure { code: 2, message: e.to_string() }
}

fn data(e: impl Display) -> Failure {
    Failure { code: 3, message: e.to_string() }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run { config: path } => {
            let cfg = PipelineConfig::load(&path).map_err(config)?;
            let outcome = pipeline::run(&cfg).map_err(|e| Failure {
                code: e.exit_code() as u8,
                message: e.to_string(),
            })?;
            println!("{}", outcome.metrics_path.display());
            Ok(())
        }
        Command::Fuse(args) => run_fuse(args),
        Command::Filter {
            images,
            predictions,
            threshold,
            top1,
            out,
        } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(config(format!("threshold {threshold} outside [0, 1]")));
            }
            let manifest = load_images(&images)?;
            let preds = dataio::load_results(&predictions, &manifest).map_err(data)?;
            let kept: Detections = preds
                .into_iter()
                .map(|(id, insts)| (id, keep(confidence_filter(insts, threshold), top1)))
                .collect();
            save(&manifest, &kept, &out)
        }
        Command::Eval {
            gt,
            predictions,
            kind,
            out,
            pr_csv,
        } => {
            let manifest = dataio::load_coco(&gt).map_err(data)?;
            let preds = dataio::load_results(&predictions, &manifest).map_err(data)?;
            let kind = match kind {
                Kind::Box => IouKind::Box,
                Kind::Mask => IouKind::Mask,
            };
            let result = evaluate(&manifest.ground_truth(), &preds, kind).map_err(data)?;
            let summary = to_canonical_string(&result.summary_json());
            if let Some(p) = pr_csv {
                dataio::write_file(&p, result.pr_csv().as_bytes()).map_err(data)?;
            }
            match out {
                Some(p) => {
                    dataio::write_file(&p, summary.as_bytes()).map_err(data)?;
                    println!("{}", p.display());
                }
                None => print!("{summary}"),
            }
            Ok(())
        }
        Command::Split {
            input,
            train_size,
            seed,
            out_dir,
        } => {
            let manifest = dataio::load_coco(&input).map_err(data)?;
            let (train, eval) = dataio::split_dataset(&manifest, train_size, seed).map_err(config)?;
            for (name, m) in [("train.json", &train), ("eval.json", &eval)] {
                let p = out_dir.join(name);
                dataio::save_coco(m, &p).map_err(data)?;
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Synth(args) => run_synth(args),
        Command::Adapter(cmd) => run_adapter(cmd),
    }
}

fn keep(mut insts: Vec<pseudolabel::geometry::Instance>, top1: bool) -> Vec<pseudolabel::geometry::Instance> {
    if top1 {
        insts = select_top1(&insts).into_iter().collect();
    }
    insts
}

fn load_images(path: &Path) -> Result<DatasetManifest, Failure> {
    dataio::load_coco_with(path, dataio::LoadOptions { bounds: BoundsPolicy::Clamp }).map_err(data)
}

fn save(manifest: &DatasetManifest, preds: &Detections, out: &Path) -> Result<(), Failure> {
    dataio::save_results(manifest, preds, out).map_err(data)?;
    println!("{}", out.display());
    Ok(())
}

fn run_fuse(args: FuseArgs) -> Result<(), Failure> {
    let default_view: AugmentationSpec = args.view.parse().map_err(config)?;
    let mut cfg = FusionConfig::new(args.iou, args.threshold.unwrap_or(0.0)).map_err(config)?;
    cfg.algorithm = match args.algorithm {
        Algorithm::Wbf => FusionAlgorithm::Wbf,
        Algorithm::Nms => FusionAlgorithm::Nms,
        Algorithm::SoftNms => FusionAlgorithm::SoftNms,
    };
    let manifest = load_images(&args.images)?;
    let mut grouped: BTreeMap<(u64, String), (AugmentationSpec, Vec<_>)> = BTreeMap::new();
    for path in &args.predictions {
        let bytes = dataio::read_file(path).map_err(data)?;
        for r in dataio::parse_results(&bytes, &path.display().to_string(), &manifest).map_err(data)? {
            let view = r.aug.unwrap_or(default_view);
            grouped
                .entry((r.image_id, view.token()))
                .or_insert_with(|| (view, Vec::new()))
                .1
                .push(r.instance);
        }
    }
    let mut per_image: BTreeMap<u64, Vec<PredictionSet>> = BTreeMap::new();
    for ((id, _), (view, insts)) in grouped {
        let img = manifest.image(id).expect("parsed against manifest");
        let set = PredictionSet::in_view(id, (img.width, img.height), view, insts).map_err(data)?;
        per_image.entry(id).or_default().push(set.inverse_mapped());
    }
    let mut fused = Detections::new();
    for (id, sets) in per_image {
        let mut insts = fuse(&sets, &cfg).map_err(data)?;
        if let Some(t) = args.threshold {
            insts = confidence_filter(insts, t);
        }
        fused.insert(id, keep(insts, args.top1));
    }
    save(&manifest, &fused, &args.out)
}

fn run_synth(args: SynthArgs) -> Result<(), Failure> {
    let scene = SceneConfig {
        width: args.width,
        height: args.height,
        masks: !args.no_masks,
    };
    let gt = synthdet::generate_dataset(args.images, args.seed, &scene).map_err(config)?;
    let views: Vec<AugmentationSpec> = args
        .views
        .iter()
        .map(|v| v.parse::<AugmentationSpec>())
        .collect::<Result<_, _>>()
        .map_err(config)?;
    let images = gt.without_annotations(gt.provenance.clone());
    for (name, m) in [("gt.json", &gt), ("images.json", &images)] {
        let p = args.out_dir.join(name);
        dataio::save_coco(m, &p).map_err(data)?;
        println!("{}", p.display());
    }
    if views.is_empty() {
        return Ok(());
    }
    let det = SyntheticDetector::new(gt.clone(), NoiseModel::default(), args.noise_seed).map_err(config)?;
    for view in views {
        let dets = det.predict(&images, view).map_err(adapter)?;
        let v = dataio::results_value(&images, &dets, Some(&view)).map_err(data)?;
        let p = args.out_dir.join(format!("pred-{}.json", view.token().replace(':', "-")));
        dataio::write_file(&p, to_canonical_string(&v).as_bytes()).map_err(data)?;
        println!("{}", p.display());
    }
    Ok(())
}

fn run_adapter(cmd: AdapterCommand) -> Result<(), Failure> {
    match cmd {
        AdapterCommand::SynthPredict { gt, seed, job, out } => {
            let gt = dataio::load_coco(&gt).map_err(data)?;
            let job = PredictJob::from_json(&dataio::read_file(&job).map_err(data)?, &job.display().to_string())
                .map_err(data)?;
            let images = load_images(&job.manifest)?;
            let dets = match &job.artifact {
                None => SyntheticDetector::new(gt, NoiseModel::default(), seed)
                    .and_then(|d| d.predict(&images, job.augmentation)),
                Some(a) => {
                    let model = StudentModel::load(a).map_err(data)?;
                    SyntheticStudent::new(gt, student_noise(), seed)
                        .and_then(|s| s.predict(&model, &images, job.augmentation))
                }
            }
            .map_err(adapter)?;
            let v = dataio::results_value(&images, &dets, Some(&job.augmentation)).map_err(data)?;
            dataio::write_file(&out, to_canonical_string(&v).as_bytes()).map_err(data)
        }
        AdapterCommand::SynthTrain { gt, seed, job, out } => {
            let gt = dataio::load_coco(&gt).map_err(data)?;
            let job = TrainJob::from_json(&dataio::read_file(&job).map_err(data)?, &job.display().to_string())
                .map_err(data)?;
            let labels = dataio::load_coco(&job.manifest).map_err(data)?;
            let model = SyntheticStudent::new(gt, student_noise(), seed)
                .and_then(|s| s.fit(&labels, job.iteration))
                .map_err(adapter)?;
            dataio::write_file(&out, model.to_json().as_bytes()).map_err(data)
        }
    }
}
