use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use wudi_merge::checkpoint::{
    load_checkpoint, save_checkpoint, validate_compatible, Checkpoint, DType, Manifest, RemapRule,
};
use wudi_merge::diagnostics::{check_theorem1, input_consistency};
use wudi_merge::experiment::{
    ablate, compare_methods, merged_interference, AblationVariant, GdSettings,
};
use wudi_merge::merge::{self, REPORT_SCHEMA};
use wudi_merge::solver::SubspaceVariant;
use wudi_merge::synth::{self, task_family, FamilyConfig, FineTuneConfig, HarnessConfig};
use wudi_merge::task_vector::{
    classify_layers, extract_lora_task_vector, extract_task_vector, LoraSuffixes, MergeConfig,
    Method, NonlinearPolicy,
};
use wudi_merge::tensor::Vector;
use wudi_merge::{verify, Error};

#[derive(Parser)]
#[command(name = "wudi", version, about = "Data-free merging of fine-tuned checkpoints")]
struct Cli {
    /// Report format on standard output.
    #[arg(long, value_enum, default_value_t = Format::Json, global = true)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge experts into one checkpoint.
    Merge(MergeArgs),
    /// Write the task vectors (expert minus pretrained) of one expert.
    Extract(ExtractArgs),
    /// Interference and input-drift diagnostics.
    #[command(subcommand)]
    Diagnose(Diagnose),
    /// Compare loss variants on a synthetic task family.
    Ablate(AblateArgs),
    /// Run the property checks; exit 0 iff all pass.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    WudiGd,
    WudiCfs,
    Average,
    TaskArith,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::WudiGd => Method::WudiGd,
            MethodArg::WudiCfs => Method::WudiCfs,
            MethodArg::Average => Method::Average,
            MethodArg::TaskArith => Method::TaskArith,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Pretrained,
    Mean,
    Sum,
}

impl From<PolicyArg> for NonlinearPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Pretrained => NonlinearPolicy::Pretrained,
            PolicyArg::Mean => NonlinearPolicy::Mean,
            PolicyArg::Sum => NonlinearPolicy::Sum,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F16,
    Bf16,
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F16 => DType::F16,
            DTypeArg::Bf16 => DType::BF16,
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Args)]
struct Inputs {
    /// JSON manifest listing the pretrained checkpoint and experts.
    #[arg(long, conflicts_with_all = ["pretrained", "expert"])]
    manifest: Option<PathBuf>,

    #[arg(long, required_unless_present = "manifest")]
    pretrained: Option<PathBuf>,

    /// Expert checkpoint; repeat for several.
    #[arg(long, required_unless_present = "manifest")]
    expert: Vec<PathBuf>,

    /// Experts are low-rank adapters (`<layer><a-suffix>`, `<layer><b-suffix>`).
    #[arg(long)]
    lora: bool,

    #[arg(long, default_value = ".lora_A")]
    lora_a_suffix: String,

    #[arg(long, default_value = ".lora_B")]
    lora_b_suffix: String,
}

struct Loaded {
    pretrained: Checkpoint,
    experts: Vec<Checkpoint>,
    lora: bool,
    suffixes: LoraSuffixes,
}

impl Inputs {
    fn load(&self) -> Result<Loaded, CliError> {
        let (pretrained, experts, lora, remap) = match &self.manifest {
            Some(path) => {
                let m = Manifest::load(path)?;
                (m.pretrained, m.experts, m.lora || self.lora, m.name_remap)
            }
            None => (
                self.pretrained.clone().expect("required by clap"),
                self.expert.clone(),
                self.lora,
                Vec::new(),
            ),
        };
        let load = |p: &Path, remap: &[RemapRule]| -> Result<Checkpoint, CliError> {
            progress(format!("loading {}", p.display()));
            Ok(load_checkpoint(p)?.remap_names(remap))
        };
        Ok(Loaded {
            pretrained: load(&pretrained, &remap)?,
            experts: experts.iter().map(|p| load(p, &remap)).collect::<Result<_, _>>()?,
            lora,
            suffixes: LoraSuffixes {
                a: self.lora_a_suffix.clone(),
                b: self.lora_b_suffix.clone(),
            },
        })
    }
}

#[derive(Args)]
struct SolverFlags {
    #[arg(long, value_enum, default_value_t = MethodArg::WudiGd)]
    method: MethodArg,

    /// Adam steps for wudi-gd.
    #[arg(long, default_value_t = 300)]
    steps: usize,

    /// Adam learning rate for wudi-gd.
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,

    /// Scale of the merged task vector added to the pretrained weights.
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,

    /// Task-arithmetic coefficient.
    #[arg(long, default_value_t = 0.3)]
    lambda: f64,

    /// Ridge coefficient for wudi-cfs.
    #[arg(long, default_value_t = 0.0)]
    omega: f64,

    /// Weight every task equally instead of by 1/‖τ_i‖².
    #[arg(long)]
    unbalanced: bool,

    /// Worker threads for per-layer solves.
    #[arg(long, env = "WUDI_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct LayerFlags {
    /// How tensors outside the merged layer set are combined.
    #[arg(long, value_enum, default_value_t = PolicyArg::Pretrained)]
    nonlinear_policy: PolicyArg,

    /// Glob of tensor names to merge; repeat for several (default "*").
    #[arg(long)]
    include: Vec<String>,

    /// Glob of tensor names to keep out of the merge; repeat for several
    /// (default "*embed*" and "*position*").
    #[arg(long)]
    exclude: Vec<String>,
}

fn merge_config(s: &SolverFlags, l: Option<&LayerFlags>) -> Result<MergeConfig, CliError> {
    let mut cfg = MergeConfig {
        method: s.method.into(),
        epsilon: s.epsilon,
        lambda: s.lambda,
        omega: s.omega,
        steps: s.steps,
        learning_rate: s.lr,
        balanced: !s.unbalanced,
        threads: s
            .threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
        ..MergeConfig::default()
    };
    if let Some(l) = l {
        cfg.nonlinear_policy = l.nonlinear_policy.into();
        if !l.include.is_empty() {
            cfg.include = l.include.clone();
        }
        if !l.exclude.is_empty() {
            cfg.exclude = l.exclude.clone();
        }
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

#[derive(Args)]
struct MergeArgs {
    #[command(flatten)]
    inputs: Inputs,

    #[command(flatten)]
    solver: SolverFlags,

    #[command(flatten)]
    layers: LayerFlags,

    /// Merged checkpoint path.
    #[arg(long)]
    out: PathBuf,

    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,

    /// Leave wall-clock timings out of the report.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    pretrained: PathBuf,

    #[arg(long)]
    expert: PathBuf,

    #[arg(long)]
    out: PathBuf,

    #[command(flatten)]
    layers: LayerFlags,

    /// Storage type of the written deltas (default: the pretrained dtype).
    #[arg(long, value_enum)]
    dtype: Option<DTypeArg>,

    #[arg(long)]
    lora: bool,

    #[arg(long, default_value = ".lora_A")]
    lora_a_suffix: String,

    #[arg(long, default_value = ".lora_B")]
    lora_b_suffix: String,
}

#[derive(Args)]
struct FamilyFlags {
    /// Seed of the synthetic task family.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Number of tasks in the family.
    #[arg(long, default_value_t = 4)]
    tasks: usize,
}

impl FamilyFlags {
    fn config(&self) -> FamilyConfig {
        FamilyConfig {
            tasks: self.tasks,
            ..FamilyConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Diagnose {
    /// Input drift between two sample files (JSON arrays of vectors).
    Consistency {
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        exp: PathBuf,
    },
    /// Interference of one merge method on a synthetic task family.
    Interference {
        #[command(flatten)]
        family: FamilyFlags,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Fine-tune one synthetic task and report input drift and the
    /// reconstruction of layer-2 inputs from the task vector.
    Trace {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        eta: f64,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        /// Write the per-iteration trace as JSON lines.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Both sides of the interference upper bound for one layer.
    Bound {
        /// Checkpoint holding the task vector.
        #[arg(long)]
        tau: PathBuf,
        /// Checkpoint holding the perturbation.
        #[arg(long)]
        delta: PathBuf,
        #[arg(long)]
        layer: String,
        /// JSON array of input vectors.
        #[arg(long)]
        samples: PathBuf,
    },
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    family: FamilyFlags,

    #[arg(long, default_value_t = 1000)]
    steps: usize,

    #[arg(long, default_value_t = 1e-3)]
    lr: f64,

    /// Row fraction of the subset variant.
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,

    /// Seed of the random bases.
    #[arg(long, default_value_t = 0)]
    variant_seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only these checks (1-based); repeat for several.
    #[arg(long)]
    check: Vec<usize>,
}

enum CliError {
    Usage(String),
    Op(Error),
    Failed,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Op(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Op(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Op(e.into())
    }
}

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("wudi: {}", msg.as_ref());
}

fn emit<T: Serialize>(format: Format, value: &T, text: impl FnOnce() -> String) -> Result<(), CliError> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, value)?;
            writeln!(out)?;
        }
        Format::Text => write!(out, "{}", text())?,
    }
    Ok(())
}

fn read_samples(path: &Path) -> Result<Vec<Vector>, CliError> {
    let rows: Vec<Vec<f64>> = serde_json::from_slice(&fs::read(path)?)?;
    Ok(rows.into_iter().map(Vector::from).collect())
}

fn cmd_merge(args: MergeArgs, format: Format) -> Result<(), CliError> {
    let cfg = merge_config(&args.solver, Some(&args.layers))?;
    let input = args.inputs.load()?;
    progress(format!(
        "merging {} experts with {} on {} threads",
        input.experts.len(),
        cfg.method.as_str(),
        cfg.threads
    ));
    let (merged, report) = if input.lora {
        merge::merge_lora(&input.pretrained, &input.experts, &cfg, &input.suffixes)?
    } else {
        merge::merge(&input.pretrained, &input.experts, &cfg)?
    };
    save_checkpoint(&merged, &args.out)?;
    let report = if args.no_timing { report.without_timing() } else { report };
    if let Some(t) = &report.timing {
        progress(format!("merged {} layers in {:.3}s", report.layers.len(), t.total_seconds));
    }
    match &args.report {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            serde_json::to_writer_pretty(&mut w, &report)?;
            writeln!(w)?;
        }
        None => emit(format, &report, || {
            let mut s = format!("{:<40} {:>14} {:>14} {:>12}\n", "layer", "initial loss", "final loss", "norm");
            for l in &report.layers {
                s += &format!(
                    "{:<40} {:>14.6e} {:>14.6e} {:>12.6}\n",
                    l.name, l.initial_loss, l.final_loss, l.merged_norm
                );
            }
            s + &format!("{} layers merged, {} tensors excluded\n", report.layers.len(), report.excluded.len())
        })?,
    }
    Ok(())
}

fn cmd_extract(args: ExtractArgs, format: Format) -> Result<(), CliError> {
    let mut cfg = MergeConfig::default();
    if !args.layers.include.is_empty() {
        cfg.include = args.layers.include.clone();
    }
    if !args.layers.exclude.is_empty() {
        cfg.exclude = args.layers.exclude.clone();
    }
    cfg.validate().map_err(usage)?;
    let pretrained = load_checkpoint(&args.pretrained)?;
    let expert = load_checkpoint(&args.expert)?;
    let classification = classify_layers(&pretrained, &cfg)?;
    let tv = if args.lora {
        let suffixes = LoraSuffixes {
            a: args.lora_a_suffix,
            b: args.lora_b_suffix,
        };
        extract_lora_task_vector(&pretrained, &expert, &classification, &suffixes, 0)?
    } else {
        validate_compatible(&pretrained, std::slice::from_ref(&expert)).into_result()?;
        extract_task_vector(&pretrained, &expert, &classification, 0)?
    };
    let dtype = match args.dtype {
        Some(d) => d.into(),
        None => pretrained.iter().next().map_or(DType::F32, |(_, t)| t.dtype),
    };
    save_checkpoint(&tv.to_checkpoint(dtype), &args.out)?;
    let layers: Vec<_> = tv
        .layers
        .iter()
        .map(|(name, m)| json!({"name": name, "shape": [m.rows(), m.cols()], "norm": m.frobenius_norm()}))
        .collect();
    let summary = json!({
        "schema": REPORT_SCHEMA,
        "dtype": dtype.as_str(),
        "layers": layers,
        "passthrough": tv.passthrough.keys().collect::<Vec<_>>(),
    });
    emit(format, &summary, || {
        let mut s = String::new();
        for (name, m) in &tv.layers {
            s += &format!("{name:<40} {:>5}x{:<5} {:>12.6}\n", m.rows(), m.cols(), m.frobenius_norm());
        }
        s + &format!("{} layers, {} other tensors\n", tv.layers.len(), tv.passthrough.len())
    })
}

fn cmd_diagnose(d: Diagnose, format: Format) -> Result<(), CliError> {
    match d {
        Diagnose::Consistency { pre, exp } => {
            let r = input_consistency(&read_samples(&pre)?, &read_samples(&exp)?)?;
            emit(format, &r, || {
                format!(
                    "delta_direction {:.6}\ndelta_magnitude {:.6}\nsamples {}\n",
                    r.delta_direction, r.delta_magnitude, r.samples
                )
            })
        }
        Diagnose::Interference { family, solver } => {
            let cfg = merge_config(&solver, None)?;
            progress(format!("building task family {}", family.seed));
            let fam = task_family(family.seed, &family.config())?;
            let r = merged_interference(&fam, &cfg)?;
            let out = json!({"schema": REPORT_SCHEMA, "seed": family.seed, "result": r});
            emit(format, &out, || {
                let mut s = format!("method {}\n", r.method);
                for t in &r.report.tasks {
                    for d in &t.per_depth {
                        s += &format!("task {} {:<12} {:.6}\n", t.task, d.layer, d.relative_error);
                    }
                }
                s + &format!("mean final-layer interference {:.6}\n", r.final_interference)
            })
        }
        Diagnose::Trace {
            seed,
            eta,
            iterations,
            trace_out,
        } => {
            let cfg = HarnessConfig {
                finetune: FineTuneConfig::constant(eta, iterations),
                ..HarnessConfig::default()
            };
            cfg.finetune.validate().map_err(usage)?;
            let run = synth::run_seed(seed, &cfg)?;
            if let Some(path) = trace_out {
                synth::write_trace_jsonl(&run.trace, BufWriter::new(File::create(path)?))?;
            }
            let out = json!({
                "schema": REPORT_SCHEMA,
                "seed": seed,
                "initial_loss": run.trace.initial_loss(),
                "final_loss": run.trace.final_loss(),
                "consistency": run.lemma1,
                "reconstruction": run.prop1,
            });
            emit(format, &out, || {
                format!(
                    "loss {:.6} -> {:.6}\ndelta_direction {:.6}\ndelta_magnitude {:.6}\nmedian residual: task vector {:.6}, matched random {:.6}\n",
                    run.trace.initial_loss(),
                    run.trace.final_loss(),
                    run.lemma1.delta_direction,
                    run.lemma1.delta_magnitude,
                    run.prop1.median_task_vector,
                    run.prop1.median_random
                )
            })
        }
        Diagnose::Bound {
            tau,
            delta,
            layer,
            samples,
        } => {
            let t = load_checkpoint(&tau)?.matrix(&layer).map_err(|e| e.in_layer(layer.clone()))?;
            let d = load_checkpoint(&delta)?.matrix(&layer).map_err(|e| e.in_layer(layer.clone()))?;
            let r = check_theorem1(&t, &d, &read_samples(&samples)?).map_err(|e| e.in_layer(layer))?;
            emit(format, &r, || {
                format!("lhs {:.6e}\nrhs {:.6e}\nsatisfied {}\n", r.lhs, r.rhs, r.satisfied)
            })
        }
    }
}

fn cmd_ablate(args: AblateArgs, format: Format) -> Result<(), CliError> {
    if !(args.fraction > 0.0 && args.fraction <= 1.0) {
        return Err(CliError::Usage("--fraction must be in (0, 1]".into()));
    }
    let gd = GdSettings {
        steps: args.steps,
        learning_rate: args.lr,
    };
    progress(format!("building task family {}", args.family.seed));
    let fam = task_family(args.family.seed, &args.family.config())?;
    let variants = [
        AblationVariant { subspace: SubspaceVariant::Full, balanced: true },
        AblationVariant { subspace: SubspaceVariant::Full, balanced: false },
        AblationVariant { subspace: SubspaceVariant::RandomGaussian, balanced: true },
        AblationVariant { subspace: SubspaceVariant::RowSubset { fraction: args.fraction }, balanced: true },
    ];
    let results = ablate(&fam, &variants, gd, args.variant_seed)?;
    let baselines = compare_methods(&fam, gd)?;
    let out = json!({
        "schema": REPORT_SCHEMA,
        "seed": args.family.seed,
        "variants": results,
        "baselines": {
            "task_arith": baselines.task_arithmetic.final_interference,
            "average": baselines.average.final_interference,
        },
    });
    emit(format, &out, || {
        let mut s = format!("{:<28} {:>12}\n", "variant", "interference");
        for r in &results {
            s += &format!("{:<28} {:>12.6}\n", r.variant, r.final_interference);
        }
        s += &format!("{:<28} {:>12.6}\n", "task-arith (lambda 1)", baselines.task_arithmetic.final_interference);
        s + &format!("{:<28} {:>12.6}\n", "average", baselines.average.final_interference)
    })
}

fn cmd_verify(args: VerifyArgs, format: Format) -> Result<(), CliError> {
    let n = verify::CHECKS.len();
    if let Some(bad) = args.check.iter().find(|&&c| c == 0 || c > n) {
        return Err(CliError::Usage(format!("--check must be in 1..={n}, got {bad}")));
    }
    let ids: Vec<usize> = if args.check.is_empty() { (1..=n).collect() } else { args.check };
    let outcomes: Vec<_> = ids
        .into_iter()
        .map(|id| {
            progress(format!("check {id}: {}", verify::CHECKS[id - 1].0));
            verify::run_check(id)
        })
        .collect();
    let ok = outcomes.iter().all(|o| o.passed);
    emit(format, &json!({"schema": REPORT_SCHEMA, "passed": ok, "checks": outcomes}), || {
        let mut s = String::new();
        for o in &outcomes {
            s += &format!(
                "{:>2} {:<4} {:<46} {:>7.2}s  {}\n",
                o.id,
                if o.passed { "ok" } else { "FAIL" },
                o.name,
                o.seconds,
                o.detail
            );
        }
        s
    })?;
    if ok {
        Ok(())
    } else {
        Err(CliError::Failed)
    }
}

fn report_error(e: &Error, format: Format) {
    let cause = e.root().to_string();
    match format {
        Format::Json => eprintln!(
            "{}",
            json!({"error": {"module": e.module(), "layer": e.layer(), "cause": cause}})
        ),
        Format::Text => {
            eprintln!("error: {e}");
            eprintln!("  module: {}", e.module());
            if let Some(l) = e.layer() {
                eprintln!("  layer: {l}");
            }
            eprintln!("  cause: {cause}");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let format = cli.format;
    let result = match cli.command {
        Command::Merge(a) => cmd_merge(a, format),
        Command::Extract(a) => cmd_extract(a, format),
        Command::Diagnose(d) => cmd_diagnose(d, format),
        Command::Ablate(a) => cmd_ablate(a, format),
        Command::Verify(a) => cmd_verify(a, format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Op(e)) => {
            report_error(&e, format);
            ExitCode::from(1)
        }
        Err(CliError::Failed) => ExitCode::from(1),
    }
}
