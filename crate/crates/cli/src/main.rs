use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use debiaskit::dataset::DatasetManifest;
use debiaskit::detect::DetectorKind;
use debiaskit::pipeline::{ClassifierRole, DetectorRole, PipelineConfig, Runner};
use debiaskit::{parallel, store, Error};

const EXIT_VALIDATION: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "debiaskit", version, about = "Weakly supervised web-dataset debiasing on synthetic images")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (replaces the configured one).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output root; defaults to $DEBIASKIT_WORKDIR, then ./debiaskit-work.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Recompute stages even when the run ledger says they are current.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the standard and web datasets with their rasters.
    GenSynth(SynthArgs),
    /// Derive weak boxes for both detector proportions.
    BuildWeakboxes(LambdaArgs),
    /// Train (or wrap) one detector.
    TrainDetector(DetectorArgs),
    /// Run a detector over a dataset and write a prediction file.
    Detect(DetectArgs),
    /// Train the benchmark or the final classifier.
    TrainClassifier(ClassifierArgs),
    /// Apply the form and label constraints to the web set.
    Debias(ConstraintArgs),
    /// Mean object scale and density of the standard, web and debiased sets.
    MetricsScaleDensity(ProbeArgs),
    /// Source-classifier accuracy per training fraction, with a same-source control.
    MetricsNtd(NtdArgs),
    /// Train on each source, test on each, as a 2×2 accuracy matrix.
    MetricsCrossgen,
    /// Fraction of web images where the detector finds no region.
    MetricsLabelquality,
    /// Standard-only vs. standard+debiased vs. standard+web training.
    MetricsAugmentation(AugmentArgs),
    /// Grid search over detector proportions and constraint thresholds.
    Sweep,
    /// Every stage from generation to the summary report.
    Pipeline(PipelineArgs),
    /// Check a manifest against its class vocabulary.
    ValidateManifest(ValidateArgs),
}

#[derive(Args, Default)]
struct SynthArgs {
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    images_per_class: Option<usize>,
    #[arg(long)]
    label_noise_rate: Option<f64>,
    #[arg(long)]
    outlier_rate: Option<f64>,
}

#[derive(Args, Default)]
struct LambdaArgs {
    #[arg(long)]
    lambda_r: Option<f64>,
    #[arg(long)]
    lambda_o: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Region,
    Object,
}

impl From<RoleArg> for DetectorRole {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Region => DetectorRole::Region,
            RoleArg::Object => DetectorRole::Object,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Template,
    Oracle,
    External,
}

impl From<KindArg> for DetectorKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Template => DetectorKind::Template,
            KindArg::Oracle => DetectorKind::Oracle,
            KindArg::External => DetectorKind::External,
        }
    }
}

#[derive(Args)]
struct DetectorArgs {
    #[arg(long, value_enum)]
    role: RoleArg,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Prediction file for `--kind external`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[command(flatten)]
    lambdas: LambdaArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Standard,
    Web,
    Debiased,
}

impl DatasetArg {
    fn name(self) -> &'static str {
        match self {
            DatasetArg::Standard => "standard",
            DatasetArg::Web => "web",
            DatasetArg::Debiased => "debiased",
        }
    }
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long, value_enum)]
    role: RoleArg,
    #[arg(long, value_enum, default_value = "web")]
    dataset: DatasetArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Standard,
    StandardDebiased,
}

#[derive(Args)]
struct ClassifierArgs {
    #[arg(long, value_enum, default_value = "standard")]
    variant: VariantArg,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Default)]
struct ConstraintArgs {
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    nms_threshold: Option<f64>,
    #[arg(long)]
    max_regions: Option<usize>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    probe_nms_threshold: Option<f64>,
}

#[derive(Args)]
struct NtdArgs {
    /// Comma-separated training fractions.
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    #[command(flatten)]
    synth: SynthArgs,
    #[command(flatten)]
    lambdas: LambdaArgs,
    #[command(flatten)]
    constraints: ConstraintArgs,
}

#[derive(Args)]
struct ValidateArgs {
    path: PathBuf,
    /// Class vocabulary (JSON array of names); defaults to classes.json next to the manifest.
    #[arg(long, conflicts_with = "num_classes")]
    classes: Option<PathBuf>,
    /// Accept labels 0..N instead of reading a vocabulary.
    #[arg(long)]
    num_classes: Option<usize>,
}

impl SynthArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let s = &mut cfg.synth;
        set(&mut s.num_classes, self.num_classes);
        set(&mut s.images_per_class, self.images_per_class);
        set(&mut s.label_noise_rate, self.label_noise_rate);
        set(&mut s.outlier_rate, self.outlier_rate);
    }
}

impl LambdaArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        set(&mut cfg.weak_boxes.lambda_r, self.lambda_r);
        set(&mut cfg.weak_boxes.lambda_o, self.lambda_o);
    }
}

impl ConstraintArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let c = &mut cfg.constraints;
        set(&mut c.eta, self.eta);
        set(&mut c.epsilon, self.epsilon);
        set(&mut c.nms_threshold, self.nms_threshold);
        set(&mut c.max_regions, self.max_regions);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut report = json!({ "error": e.code(), "message": e.to_string() });
            if let Error::Stage { stage, .. } = &e {
                report["stage"] = json!(stage);
            }
            if let Some((path, line)) = location(&e) {
                report["path"] = json!(path);
                report["line"] = json!(line);
            }
            eprintln!("{report}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_STAGE })
        }
    }
}

fn location(e: &Error) -> Option<(String, usize)> {
    match e {
        Error::MalformedFile { path, line, .. } => Some((path.clone(), *line)),
        Error::Stage { source, .. } | Error::Image { source, .. } => location(source),
        _ => None,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    if let Some(w) = &cli.workdir {
        cfg.paths.workdir = Some(w.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::ConfigInvalid("--jobs must be at least 1".into()));
        }
        parallel::set_jobs(n);
    }
    if let Command::ValidateManifest(args) = &cli.command {
        return validate_manifest(args);
    }
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenSynth(a) => a.apply(&mut cfg),
        Command::BuildWeakboxes(a) => a.apply(&mut cfg),
        Command::TrainDetector(a) => {
            a.lambdas.apply(&mut cfg);
            if let Some(k) = a.kind {
                cfg.detector.kind = k.into();
            }
            if let Some(p) = &a.predictions {
                match DetectorRole::from(a.role) {
                    DetectorRole::Region => cfg.detector.region_predictions = Some(p.clone()),
                    DetectorRole::Object => cfg.detector.object_predictions = Some(p.clone()),
                }
            }
        }
        Command::TrainClassifier(a) => {
            set(&mut cfg.recognition_train.learning_rate, a.learning_rate);
            set(&mut cfg.recognition_train.epochs, a.epochs);
        }
        Command::Debias(a) => a.apply(&mut cfg),
        Command::MetricsScaleDensity(a) => set(&mut cfg.metrics.probe_nms_threshold, a.probe_nms_threshold),
        Command::MetricsNtd(a) => set(&mut cfg.metrics.fractions, a.fractions.clone()),
        Command::MetricsAugmentation(a) => set(&mut cfg.metrics.augmentation_budget, a.budget),
        Command::Pipeline(a) => {
            if let Some(k) = a.kind {
                cfg.detector.kind = k.into();
            }
            a.synth.apply(&mut cfg);
            a.lambdas.apply(&mut cfg);
            a.constraints.apply(&mut cfg);
        }
        _ => {}
    }
    let mut runner = Runner::new(cfg)?;
    runner.force = cli.force;
    let status = match &cli.command {
        Command::GenSynth(_) => runner.gen_synth()?,
        Command::BuildWeakboxes(_) => runner.build_weakboxes()?,
        Command::TrainDetector(a) => runner.train_detector(a.role.into())?,
        Command::Detect(a) => runner.detect(a.role.into(), a.dataset.name())?,
        Command::TrainClassifier(a) => runner.train_classifier(match a.variant {
            VariantArg::Standard => ClassifierRole::Standard,
            VariantArg::StandardDebiased => ClassifierRole::StandardDebiased,
        })?,
        Command::Debias(_) => runner.debias()?,
        Command::MetricsScaleDensity(_) => runner.metrics_scale_density()?,
        Command::MetricsNtd(_) => runner.metrics_ntd()?,
        Command::MetricsCrossgen => runner.metrics_crossgen()?,
        Command::MetricsLabelquality => runner.metrics_labelquality()?,
        Command::MetricsAugmentation(_) => runner.metrics_augmentation()?,
        Command::Sweep => runner.sweep()?,
        Command::Pipeline(_) => {
            runner.pipeline()?;
            for (stage, status) in &runner.statuses {
                println!("{}", json!({ "stage": stage, "status": status }));
            }
            println!(
                "{}",
                json!({ "summary": runner.workspace.report("summary.json"), "workdir": runner.workspace.root })
            );
            return Ok(());
        }
        Command::ValidateManifest(_) => unreachable!("handled before config loading"),
    };
    let (stage, _) = runner.statuses.last().expect("a stage ran");
    println!("{}", json!({ "stage": stage, "status": status, "workdir": runner.workspace.root }));
    Ok(())
}

fn validate_manifest(args: &ValidateArgs) -> Result<(), Error> {
    let classes = match (args.num_classes, &args.classes) {
        (Some(n), _) => (0..n).map(|i| format!("class-{i}")).collect(),
        (None, Some(p)) => read_classes(p)?,
        (None, None) => {
            let sidecar = args.path.parent().unwrap_or(Path::new(".")).join("classes.json");
            if !sidecar.is_file() {
                return Err(Error::ConfigInvalid(format!(
                    "no class vocabulary: pass --classes or --num-classes, or place classes.json at {}",
                    sidecar.display()
                )));
            }
            read_classes(&sidecar)?
        }
    };
    let m = DatasetManifest::load(&args.path, classes).map_err(|e| match e {
        e @ Error::Io { .. } => Error::ConfigInvalid(e.to_string()),
        e => e,
    })?;
    println!("{}", json!({ "valid": true, "records": m.len(), "classes": m.num_classes() }));
    Ok(())
}

fn read_classes(path: &Path) -> Result<Vec<String>, Error> {
    store::read_json(path)
}
