//! The `fdn` command line. [`run`] returns the process exit code: 0 on
//! success, 1 when a verification fails or a command errors, 2 on usage errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::arch::{
    body_suite, build_model, count_params, load_checkpoint, presets, BodyKind, ModelConfig,
};
use crate::attention::{sa_complexity, ComplexityKind};
use crate::data::{
    build_schedule, parse_schedule, replay_verify, schedule_hash, synth_corpus, synth_dataset,
    Dataset, DatasetManifest, StagePlan,
};
use crate::error::{Error, Result};
use crate::experiments::{run_experiment, ExperimentSpec};
use crate::metrics::{evaluate_model, reports_to_csv, Denoiser, EvalOptions, IdentityDenoiser};
use crate::tensor::primitive_suite;
use crate::train::{train_to_dir, TrainConfig};

/// Output root when `--out` is not given: `$FDN_RESULTS_DIR`, else `results`.
pub const RESULTS_ENV: &str = "FDN_RESULTS_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "fdn",
    version,
    about = "Fair-training harness for lightweight transformer denoisers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build, verify or hash a training schedule.
    #[command(subcommand)]
    Schedule(ScheduleCmd),
    /// Write a procedural texture corpus and its manifest.
    SynthData(SynthArgs),
    /// Train a model and write its log and checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the identity) and print a metric report.
    Eval(EvalArgs),
    /// Self-attention cost of one layer.
    Complexity(ComplexityArgs),
    /// Parameter counts of presets or config files.
    Params(ParamsArgs),
    /// Finite-difference gradient checks of primitives and bodies.
    Gradcheck(GradcheckArgs),
    /// Run a multi-arm study from a JSON definition.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug, Clone)]
struct PlanArgs {
    /// Manifest CSV (`image_id,path,height,width,channels`).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 32)]
    patch: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Stage plan JSON (overrides --patch and --batch).
    #[arg(long)]
    plan: Option<PathBuf>,
}

impl PlanArgs {
    fn plan(&self) -> Result<StagePlan> {
        match &self.plan {
            Some(p) => {
                let plan: StagePlan = serde_json::from_str(&fs::read_to_string(p)?)?;
                plan.validate()?;
                Ok(plan)
            }
            None => Ok(StagePlan::constant(self.patch, self.batch)),
        }
    }
}

#[derive(Subcommand, Debug)]
enum ScheduleCmd {
    /// Derive the schedule and write its canonical form.
    Build {
        #[command(flatten)]
        plan: PlanArgs,
        /// Output file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the schedule and compare it with a recorded file.
    Verify {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        schedule: PathBuf,
    },
    /// SHA-256 of a schedule file, or of the schedule derived from a manifest.
    Hash {
        #[arg(long, conflicts_with = "manifest")]
        schedule: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[arg(long, default_value_t = 32)]
        patch: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 48)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Preset name (`swinir-toy`, `uformer`, ..) or config JSON path.
    #[arg(long)]
    model: String,
    /// Training manifest; a synthetic corpus is generated when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    synthetic_images: usize,
    #[arg(long, default_value_t = 48)]
    synthetic_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    patch: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[arg(long, default_value_t = 4e-4)]
    lr: f64,
    /// Clip the global gradient norm to this value.
    #[arg(long)]
    clip: Option<f64>,
    /// Output directory (default `$FDN_RESULTS_DIR/train`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Print a progress line every this many iterations (0 disables).
    #[arg(long, default_value_t = 0)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, conflicts_with = "identity")]
    checkpoint: Option<PathBuf>,
    /// Evaluate the identity (noisy input) instead of a model.
    #[arg(long)]
    identity: bool,
    /// Manifest of the evaluation set; a synthetic set is used when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    name: String,
    #[arg(long, value_delimiter = ',', default_values_t = [15.0f32, 25.0, 50.0])]
    sigmas: Vec<f32>,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Skip datasets whose estimated working set exceeds this many bytes.
    #[arg(long)]
    memory_budget: Option<usize>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum KindArg {
    Local,
    Channel,
}

#[derive(Args, Debug)]
struct ComplexityArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    h: u64,
    #[arg(long)]
    w: u64,
    #[arg(long)]
    c: u64,
    #[arg(long, default_value_t = 8)]
    m: u64,
    #[arg(long, default_value_t = 1)]
    l: u64,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    /// Presets or config paths; all presets when empty.
    models: Vec<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum SuiteArg {
    All,
    Primitives,
    Bodies,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, value_enum, default_value_t = SuiteArg::All)]
    only: SuiteArg,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Shipped experiment name (`hierarchy`, ..) or a definition path.
    name: String,
    /// Arms trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory (default `$FDN_RESULTS_DIR/<name>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Check(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Check(m)) => {
            eprintln!("{m}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn results_root() -> PathBuf {
    std::env::var_os(RESULTS_ENV).map_or_else(|| PathBuf::from("results"), PathBuf::from)
}

fn resolve_model(name: &str) -> std::result::Result<ModelConfig, Failure> {
    if name.ends_with(".json") || Path::new(name).is_file() {
        return Ok(ModelConfig::from_json(
            &fs::read_to_string(name).map_err(Error::from)?,
        )?);
    }
    presets::by_name(name).ok_or_else(|| {
        let names: Vec<&str> = BodyKind::ALL.iter().map(|b| b.name()).collect();
        Failure::Usage(format!(
            "unknown model `{name}`; presets: {} (optionally with -toy)",
            names.join(", ")
        ))
    })
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::Schedule(s) => schedule(s),
        Command::SynthData(a) => {
            let m = synth_corpus(&a.out, a.n, a.channels, a.size, a.size, a.seed)?;
            println!(
                "wrote {} images and manifest.csv to {}",
                m.len(),
                a.out.display()
            );
            Ok(())
        }
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Complexity(a) => {
            let kind = match a.kind {
                KindArg::Local => ComplexityKind::LocalSpatial,
                KindArg::Channel => ComplexityKind::Channel,
            };
            let r = sa_complexity(kind, a.h, a.w, a.c, a.m, a.l)
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let label = match a.kind {
                KindArg::Local => "local",
                KindArg::Channel => "channel",
            };
            println!("kind,H,W,C,M,L,projection,attention,total");
            println!(
                "{label},{},{},{},{},{},{},{},{}",
                a.h, a.w, a.c, a.m, a.l, r.projection_flops, r.attention_flops, r.total
            );
            Ok(())
        }
        Command::Params(a) => params(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn schedule(cmd: ScheduleCmd) -> Outcome {
    match cmd {
        ScheduleCmd::Build { plan, out } => {
            let manifest = DatasetManifest::load(&plan.manifest)?;
            let s = build_schedule(&manifest, &plan.plan()?, plan.epochs, plan.data_seed)?;
            let text = s.to_canonical_string();
            match out {
                Some(p) => {
                    fs::write(&p, text).map_err(Error::from)?;
                    println!("{}", hex::encode(schedule_hash(&s)));
                }
                None => print!("{text}"),
            }
            Ok(())
        }
        ScheduleCmd::Verify { plan, schedule } => {
            let manifest = DatasetManifest::load(&plan.manifest)?;
            let recorded = parse_schedule(&fs::read_to_string(&schedule).map_err(Error::from)?)?;
            let report = replay_verify(
                &recorded,
                &manifest,
                &plan.plan()?,
                plan.epochs,
                plan.data_seed,
            )?;
            if report.is_match() {
                println!("{report}");
                Ok(())
            } else {
                Err(Failure::Check(format!("schedule mismatch: {report}")))
            }
        }
        ScheduleCmd::Hash {
            schedule,
            manifest,
            epochs,
            data_seed,
            patch,
            batch,
        } => {
            let s = match (schedule, manifest) {
                (Some(p), _) => parse_schedule(&fs::read_to_string(p).map_err(Error::from)?)?,
                (None, Some(m)) => build_schedule(
                    &DatasetManifest::load(m)?,
                    &StagePlan::constant(patch, batch),
                    epochs,
                    data_seed,
                )?,
                (None, None) => {
                    return Err(Failure::Usage(
                        "schedule hash needs --schedule or --manifest".into(),
                    ))
                }
            };
            println!("{}", hex::encode(schedule_hash(&s)));
            Ok(())
        }
    }
}

fn train(a: TrainArgs) -> Outcome {
    let model = resolve_model(&a.model)?;
    let dataset = match &a.manifest {
        Some(m) => Dataset::load("train", DatasetManifest::load(m)?)?,
        None => synth_dataset(
            "train",
            a.synthetic_images,
            model.in_channels,
            a.synthetic_size,
            a.synthetic_size,
            1,
        )?,
    };
    let plan = PlanArgs {
        manifest: PathBuf::new(),
        epochs: a.epochs,
        data_seed: a.data_seed,
        patch: a.patch,
        batch: a.batch,
        plan: a.plan.clone(),
    }
    .plan()?;
    let cfg = TrainConfig {
        base_lr: a.lr,
        clip_grad_norm: a.clip,
        jobs: a.jobs,
        ..TrainConfig::new(a.epochs, plan, a.data_seed, a.init_seed)
    };
    let out = a.out.unwrap_or_else(|| results_root().join("train"));
    let every = a.log_every;
    let (m, log) = train_to_dir(&cfg, &model, &dataset, &out, |r| {
        if every > 0 && r.iter % every == 0 {
            eprintln!(
                "epoch {} iter {} loss {:.6} lr {:.3e}",
                r.epoch, r.iter, r.loss, r.lr
            );
        }
    })?;
    let last = log.rows.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} ({} params) for {} iterations, final loss {last:.6}; wrote {}",
        a.model,
        count_params(&m),
        log.rows.len(),
        out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let model: Box<dyn Denoiser> = match (&a.checkpoint, a.identity) {
        (Some(p), _) => Box::new(load_checkpoint(p)?),
        (None, true) => Box::new(IdentityDenoiser { channels: 3 }),
        (None, false) => {
            return Err(Failure::Usage(
                "eval needs --checkpoint or --identity".into(),
            ))
        }
    };
    let ds = match &a.manifest {
        Some(m) => Dataset::load(a.name.clone(), DatasetManifest::load(m)?)?,
        None => synth_dataset(&a.name, 8, model.in_channels(), 64, 64, 1001)?,
    };
    let opts = EvalOptions {
        sigmas: a.sigmas,
        eval_seed: a.eval_seed,
        jobs: a.jobs,
        memory_budget: a.memory_budget,
    };
    let csv = reports_to_csv(&evaluate_model(model.as_ref(), &[ds], &opts)?);
    if let Some(p) = &a.out {
        fs::write(p, &csv).map_err(Error::from)?;
    }
    print!("{csv}");
    Ok(())
}

fn params(a: ParamsArgs) -> Outcome {
    let mut out = String::from("model,params,target,relative_diff\n");
    if a.models.is_empty() {
        for body in BodyKind::ALL {
            let n = count_params(&build_model(&presets::reference(body), 0)?);
            let t = presets::reference_param_target(body);
            let _ = writeln!(
                out,
                "{},{n},{t},{:+.4}",
                body.name(),
                n as f64 / t as f64 - 1.0
            );
        }
        for body in BodyKind::ALL {
            let n = count_params(&build_model(&presets::toy(body), 0)?);
            let _ = writeln!(out, "{}-toy,{n},,", body.name());
        }
    } else {
        for name in &a.models {
            let n = count_params(&build_model(&resolve_model(name)?, 0)?);
            let _ = writeln!(out, "{name},{n},,");
        }
    }
    print!("{out}");
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let mut results: Vec<(String, _)> = Vec::new();
    if a.only != SuiteArg::Bodies {
        results.extend(
            primitive_suite(a.tol)?
                .into_iter()
                .map(|(n, r)| (format!("primitive.{n}"), r)),
        );
    }
    if a.only != SuiteArg::Primitives {
        results.extend(
            body_suite(a.tol)?
                .into_iter()
                .map(|(n, r)| (format!("body.{n}"), r)),
        );
    }
    let mut failed = 0;
    for (name, r) in &results {
        println!(
            "{} {name} max_rel={:.3e} max_abs={:.3e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.max_abs_error
        );
        failed += usize::from(!r.pass);
    }
    if failed > 0 {
        return Err(Failure::Check(format!(
            "{failed} of {} gradient checks failed",
            results.len()
        )));
    }
    println!(
        "all {} gradient checks passed (tol {})",
        results.len(),
        a.tol
    );
    Ok(())
}

/// Looks for `name` as a path, then under `$FDN_EXPERIMENTS_DIR`, `./experiments`
/// and the shipped definitions.
fn find_experiment(name: &str) -> Option<PathBuf> {
    let direct = PathBuf::from(name);
    if direct.is_file() {
        return Some(direct);
    }
    let file = format!("{name}.json");
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../experiments");
    std::env::var_os("FDN_EXPERIMENTS_DIR")
        .map(PathBuf::from)
        .into_iter()
        .chain([PathBuf::from("experiments"), shipped])
        .map(|d| d.join(&file))
        .find(|p| p.is_file())
}

fn experiment(a: ExperimentArgs) -> Outcome {
    let path = find_experiment(&a.name)
        .ok_or_else(|| Failure::Usage(format!("no experiment definition `{}`", a.name)))?;
    let (spec, dir) = ExperimentSpec::load(&path)?;
    let report = run_experiment(&spec, &dir, a.jobs)?;
    let out = a.out.unwrap_or_else(|| results_root().join(&spec.name));
    report.write(&out)?;
    print!("{}", report.to_csv());
    println!("wrote {}", out.display());
    Ok(())
}
