use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use grd::affinity_graph::OffsetSet;
use grd::data::{generate_dataset, label_path, load_dataset, save_dataset, Dataset, SyntheticSpec};
use grd::metrics::{evaluate, pca_rgb, MetricReport, DEFAULT_THRESHOLD};
use grd::model::gradcheck::TOLERANCE;
use grd::model::{
    distill_student, evaluate_model, forward, grad_check, train_teacher, ConvNetParams, LossReport,
    LossSelector, LossWeights, TrainOutcome, TrainerConfig,
};
use grd::tensor::{read_tensor, LabelMask};

#[derive(Parser)]
#[command(name = "grd", version, about = "Graph relation distillation for instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Voronoi dataset.
    Gen(GenArgs),
    /// Train the teacher network on affinity supervision.
    TrainTeacher(TeacherArgs),
    /// Distill a trained teacher into a student network.
    Distill(DistillArgs),
    /// Segment the test split and report metrics.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Render a PCA view of a network's embeddings as a PPM image.
    Vis(VisArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Text,
    Structured,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 6)]
    instances: usize,
    #[arg(long, default_value_t = 64)]
    train: usize,
    #[arg(long, default_value_t = 16)]
    test: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().noise)]
    noise: f64,
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    embed_dim: usize,
    #[arg(long, default_value_t = OffsetSet::default_2d())]
    offsets: OffsetSet,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    report: ReportFormat,
}

impl TrainOpts {
    fn config(&self) -> TrainerConfig {
        TrainerConfig {
            seed: self.seed,
            iterations: self.iters,
            batch: self.batch,
            embed_dim: self.embed_dim,
            offsets: self.offsets.clone(),
            ..TrainerConfig::default()
        }
    }
}

#[derive(Args)]
struct TeacherArgs {
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long, default_value_t = LossWeights::default().node_intra)]
    lambda1: f64,
    #[arg(long, default_value_t = LossWeights::default().edge_intra)]
    lambda2: f64,
    #[arg(long, default_value_t = LossWeights::default().agd_intra)]
    lambda3: f64,
    #[arg(long, default_value_t = LossWeights::default().edge_inter)]
    lambda4: f64,
    #[arg(long, default_value_t = LossWeights::default().agd_inter)]
    lambda5: f64,
    #[arg(long, default_value_t = 32)]
    bank_k: usize,
    #[arg(long, default_value_t = 12)]
    bank_l: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Student checkpoint to evaluate.
    #[arg(long, conflicts_with_all = ["teacher", "pred"])]
    student: Option<PathBuf>,
    /// Teacher checkpoint to evaluate.
    #[arg(long, conflicts_with = "pred")]
    teacher: Option<PathBuf>,
    /// Directory of predicted `lbl_%04d.grdt` masks, indexed like the dataset.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = OffsetSet::default_2d())]
    offsets: OffsetSet,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    report: ReportFormat,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side length of the square test instance (2 to 4).
    #[arg(long, default_value_t = 4)]
    size: usize,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    report: ReportFormat,
}

#[derive(Args)]
struct VisArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "teacher")]
    student: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Output `.ppm` path.
    #[arg(long)]
    out: PathBuf,
    /// Index into the test split.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn require(path: &Path) -> grd::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(grd::Error::Contract(format!("{} does not exist", path.display())))
    }
}

fn print_trace(outcome: &TrainOutcome, format: ReportFormat) {
    let last = outcome.trace.len().saturating_sub(1);
    let shown = outcome.trace.iter().filter(|r| r.iteration % 100 == 0 || r.iteration == last);
    match format {
        ReportFormat::Text => {
            for r in shown {
                println!(
                    "iter {:>6}  total {:.6}  aff {:.6}  node {:.6}  edge {:.6}  agd {:.6}  edge_x {:.6}  agd_x {:.6}",
                    r.iteration, r.total, r.aff, r.node_intra, r.edge_intra, r.agd_intra, r.edge_inter, r.agd_inter
                );
            }
        }
        ReportFormat::Structured => {
            let shown: Vec<&LossReport> = shown.collect();
            println!("{}", serde_json::to_string_pretty(&shown).expect("loss reports serialize"));
        }
    }
}

fn save_run(out: &Path, role: &str, outcome: &TrainOutcome, config: &TrainerConfig) -> grd::Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    outcome.params.save(out)?;
    fs::write(sidecar(out, ".config.txt"), format!("role: {role}\n{}", config.to_text()))?;
    Ok(())
}

fn load_checkpoint(student: &Option<PathBuf>, teacher: &Option<PathBuf>) -> grd::Result<ConvNetParams> {
    let path = student
        .as_ref()
        .or(teacher.as_ref())
        .ok_or_else(|| grd::Error::Contract("pass --student or --teacher".into()))?;
    require(path)?;
    ConvNetParams::load(path)
}

fn gen(args: &GenArgs) -> grd::Result<()> {
    let spec = SyntheticSpec {
        size: args.size,
        instances: args.instances,
        train: args.train,
        test: args.test,
        noise: args.noise,
        seed: args.seed,
    };
    let data = generate_dataset(&spec)?;
    save_dataset(&args.out, &data)?;
    println!("wrote {} samples to {}", spec.train + spec.test, args.out.display());
    Ok(())
}

fn load_data(path: &Path) -> grd::Result<Dataset> {
    require(path)?;
    load_dataset(path)
}

fn teacher_cmd(args: &TeacherArgs) -> grd::Result<()> {
    let opts = &args.train;
    let data = load_data(&opts.data)?;
    let config = opts.config();
    let outcome = train_teacher(&data, &config)?;
    print_trace(&outcome, opts.report);
    save_run(&opts.out, "teacher", &outcome, &config)
}

fn distill_cmd(args: &DistillArgs) -> grd::Result<()> {
    let opts = &args.train;
    let data = load_data(&opts.data)?;
    require(&args.teacher)?;
    let teacher = ConvNetParams::load(&args.teacher)?;
    let config = TrainerConfig {
        weights: LossWeights::from_array([args.lambda1, args.lambda2, args.lambda3, args.lambda4, args.lambda5]),
        bank_capacity: args.bank_k,
        bank_sample: args.bank_l,
        teacher_width: teacher.width(),
        ..opts.config()
    };
    let outcome = distill_student(&teacher, &data, &config)?;
    print_trace(&outcome, opts.report);
    save_run(&opts.out, "student", &outcome, &config)
}

fn eval_cmd(args: &EvalArgs) -> grd::Result<()> {
    let data = load_data(&args.data)?;
    let report = match &args.pred {
        Some(dir) => {
            require(dir)?;
            let first = data.train.len();
            let reports = data
                .test
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let pred = LabelMask::from_tensor(&read_tensor(label_path(dir, first + k))?)?;
                    evaluate(&pred, &s.mask)
                })
                .collect::<grd::Result<Vec<_>>>()?;
            MetricReport::mean(&reports)
        }
        None => {
            let params = load_checkpoint(&args.student, &args.teacher)?;
            evaluate_model(&params, &data.test, &args.offsets, args.threshold)?
        }
    };
    match args.report {
        ReportFormat::Text => print!("{}", report.to_text()),
        ReportFormat::Structured => println!("{}", report.to_json()),
    }
    Ok(())
}

/// Returns whether every term is within tolerance.
fn gradcheck_cmd(args: &GradcheckArgs) -> grd::Result<bool> {
    let mut results = Vec::new();
    for sel in LossSelector::ALL {
        results.push((sel, grad_check(sel, args.size, args.seed)?));
    }
    match args.report {
        ReportFormat::Text => {
            for (sel, err) in &results {
                let verdict = if *err <= TOLERANCE { "ok" } else { "FAIL" };
                println!("{:<11} {err:.3e} {verdict}", sel.name());
            }
        }
        ReportFormat::Structured => {
            let map: serde_json::Map<String, serde_json::Value> =
                results.iter().map(|(s, e)| (s.name().to_string(), (*e).into())).collect();
            println!("{}", serde_json::to_string_pretty(&map).expect("json"));
        }
    }
    Ok(results.iter().all(|(_, e)| *e <= TOLERANCE))
}

fn vis_cmd(args: &VisArgs) -> grd::Result<()> {
    let data = load_data(&args.data)?;
    let params = load_checkpoint(&args.student, &args.teacher)?;
    let sample = data
        .test
        .get(args.index)
        .ok_or_else(|| grd::Error::Contract(format!("test split has no sample {}", args.index)))?;
    let image = pca_rgb(&forward(&params, &sample.image)?);
    fs::write(&args.out, image.to_ppm())?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run(cli: Cli) -> grd::Result<bool> {
    match &cli.command {
        Command::Gen(a) => gen(a)?,
        Command::TrainTeacher(a) => teacher_cmd(a)?,
        Command::Distill(a) => distill_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Gradcheck(a) => return gradcheck_cmd(a),
        Command::Vis(a) => vis_cmd(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
