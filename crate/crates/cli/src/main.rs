mod files;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fishmerge::cost::{estimate_costs, CostInputs};
use fishmerge::ensemble::ensemble_compare;
use fishmerge::experiment::{ablate_fisher_n, AblationSettings, IntermediateTask};
use fishmerge::fisher::estimate_fisher;
use fishmerge::merge::merge;
use fishmerge::search::{interpolation_curve, lambda_grid_seeded, sweep, CurveInputs, CurveModes, SweepTemplate};
use fishmerge::suite::make_task_suite;
use fishmerge::train::train_with_history;
use fishmerge::{
    save_checkpoint, BucketSpec, Error, ErrorKind, Fallback, FisherConfig, FisherMode, MergeInput, MergeMode,
    MergeSpec, Result, TrainConfig,
};
use serde_json::{json, Value};

use files::*;

#[derive(Parser)]
#[command(name = "fishmerge", version, about = "Isotropic and Fisher-weighted model merging")]
struct Cli {
    /// Bucketize a `target` column in CSV inputs into LO:HI:N classes.
    #[arg(long, global = true, value_parser = parse_buckets)]
    buckets: Option<BucketSpec>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier on a CSV dataset.
    Train(TrainArgs),
    /// Estimate the diagonal Fisher of a checkpoint.
    Fisher(FisherArgs),
    /// Merge checkpoints given as ckpt:fisher:lambda.
    Merge(MergeArgs),
    /// Grid-search merging coefficients on a validation set.
    Sweep(SweepArgs),
    /// Interpolate between a pre-trained and a fine-tuned model.
    Curve(CurveArgs),
    /// Compare merging with output ensembling.
    Ensemble(EnsembleArgs),
    /// Repeat Fisher estimation and the coefficient search for several N.
    AblateFisherN(AblateArgs),
    /// Write a synthetic task suite with a shared initialization.
    Suite(SuiteArgs),
    /// FLOPs accounting for fine-tuning versus merging.
    Cost(CostArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Model spec JSON; defaults to the sidecar of --init.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting checkpoint; a fresh initialization from the config seed if absent.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FisherModeArg {
    Exact,
    Sampled,
}

#[derive(Args)]
struct FisherArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4096)]
    n: usize,
    #[arg(long, value_enum, default_value = "exact")]
    mode: FisherModeArg,
    /// Label samples per example in sampled mode.
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MergeModeArg {
    Fisher,
    Isotropic,
}

impl From<MergeModeArg> for MergeMode {
    fn from(m: MergeModeArg) -> Self {
        match m {
            MergeModeArg::Fisher => MergeMode::Fisher,
            MergeModeArg::Isotropic => MergeMode::Isotropic,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FallbackArg {
    Target,
    LambdaAverage,
}

#[derive(Args)]
struct MergeArgs {
    /// ckpt:fisher:lambda; leave the Fisher empty for isotropic merging.
    #[arg(long, num_args = 1.., required = true, value_parser = parse_input)]
    inputs: Vec<InputArg>,
    #[arg(long, default_value_t = 0)]
    target: usize,
    /// Defaults to fisher when every input names a Fisher file, isotropic
    /// when none do.
    #[arg(long, value_enum)]
    mode: Option<MergeModeArg>,
    #[arg(long, default_value_t = fishmerge::merge::DEFAULT_EPSILON)]
    eps: f64,
    #[arg(long, value_enum, default_value = "target")]
    fallback: FallbackArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// ckpt[:fisher]; any lambda given here is ignored.
    #[arg(long, num_args = 2.., required = true, value_parser = parse_input)]
    inputs: Vec<InputArg>,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    target: usize,
    #[arg(long, value_enum, default_value = "fisher")]
    mode: MergeModeArg,
    #[arg(long, default_value_t = fishmerge::merge::DEFAULT_EPSILON)]
    eps: f64,
    #[arg(long, default_value_t = fishmerge::search::DEFAULT_GRID_POINTS)]
    grid: usize,
    /// Seed for the simplex samples used with more than two inputs.
    #[arg(long, default_value_t = 0)]
    grid_seed: u64,
    #[arg(long)]
    val: PathBuf,
    #[arg(long, default_value = "acc")]
    metric: String,
    #[arg(long, default_value_t = fishmerge::search::DEFAULT_VAL_LIMIT)]
    val_limit: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write the points as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CurveModeArg {
    Isotropic,
    Fisher,
    Both,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    ft: PathBuf,
    /// Fisher files for pre and ft, required unless --mode isotropic.
    #[arg(long)]
    pre_fisher: Option<PathBuf>,
    #[arg(long)]
    ft_fisher: Option<PathBuf>,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    #[arg(long)]
    iid: PathBuf,
    #[arg(long)]
    ood: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    mode: CurveModeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long, num_args = 1.., required = true)]
    ckpts: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    fishers: Vec<PathBuf>,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Checkpoint whose head is kept and whose task is scored.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    donor: PathBuf,
    #[arg(long)]
    target_spec: Option<PathBuf>,
    #[arg(long)]
    donor_spec: Option<PathBuf>,
    /// Data the target's Fisher is estimated on.
    #[arg(long)]
    target_data: PathBuf,
    #[arg(long)]
    donor_data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value = "256,1024,4096", value_delimiter = ',')]
    n_list: Vec<usize>,
    #[arg(long, default_value_t = fishmerge::search::DEFAULT_GRID_POINTS)]
    grid: usize,
    #[arg(long, default_value_t = fishmerge::search::DEFAULT_VAL_LIMIT)]
    val_limit: usize,
    #[arg(long, value_enum, default_value = "exact")]
    mode: FisherModeArg,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    params: u64,
    #[arg(long)]
    train_tokens: u64,
    #[arg(long, default_value_t = 4096)]
    fisher_examples: u64,
    #[arg(long)]
    tokens_per_example: u64,
    #[arg(long, default_value_t = 0)]
    eval_tokens: u64,
    #[arg(long, default_value_t = 2)]
    models: u64,
}

fn fisher_mode(mode: FisherModeArg, k: usize) -> FisherMode {
    match mode {
        FisherModeArg::Exact => FisherMode::Exact,
        FisherModeArg::Sampled => FisherMode::Sampled { k },
    }
}

fn print_json(value: &Value) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_train(a: &TrainArgs, buckets: Option<BucketSpec>) -> Result<()> {
    let config: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    let (spec, init) = match &a.init {
        Some(init) => (resolve_spec(a.spec.as_deref(), init)?, load_params(init)?),
        None => {
            let path = a.spec.as_deref().ok_or_else(|| Error::Invalid("train needs --spec or --init".into()))?;
            let spec = read_spec_file(path)?;
            let init = fishmerge::model::init_params(&spec, config.seed)?;
            (spec, init)
        }
    };
    let data = load_data(&a.data, buckets)?;
    let outcome = train_with_history(&spec, &init, &data, &config)?;
    save_checkpoint(&outcome.params, &a.out)?;
    let echo = json!({
        "data": path_str(&a.data),
        "init": a.init.as_deref().map(path_str),
        "train": config,
    });
    write_sidecar(&a.out, "train", &echo, Some(&spec))?;
    print_json(&json!({
        "out": path_str(&a.out),
        "lineage_id": outcome.params.lineage_id(),
        "final_loss": outcome.epoch_losses.last(),
        "config": echo,
    }))
}

fn cmd_fisher(a: &FisherArgs, buckets: Option<BucketSpec>) -> Result<()> {
    let spec = resolve_spec(a.spec.as_deref(), &a.ckpt)?;
    let params = load_params(&a.ckpt)?;
    let data = load_data(&a.data, buckets)?;
    let cfg = FisherConfig { n_examples: a.n, mode: fisher_mode(a.mode, a.k), seed: a.seed };
    let f = estimate_fisher(&spec, &params, &data, &cfg)?;
    f.save(&a.out)?;
    let echo = json!({ "ckpt": path_str(&a.ckpt), "data": path_str(&a.data), "fisher": cfg });
    write_sidecar(&a.out, "fisher", &echo, Some(&spec))?;
    print_json(&json!({ "out": path_str(&a.out), "n_examples_used": f.info.n_examples_used, "config": echo }))
}

fn cmd_merge(a: &MergeArgs) -> Result<()> {
    let loaded = load_inputs(&a.inputs)?;
    let mode = match a.mode {
        Some(m) => MergeMode::from(m),
        None if loaded.iter().all(|l| l.fisher.is_some()) => MergeMode::Fisher,
        None if loaded.iter().all(|l| l.fisher.is_none()) => MergeMode::Isotropic,
        None => return Err(Error::Invalid("some inputs have Fisher files and some do not; pass --mode".into())),
    };
    let inputs = loaded
        .iter()
        .zip(&a.inputs)
        .map(|(l, arg)| {
            let lambda = l.lambda.ok_or_else(|| Error::Invalid(format!("{} has no lambda", arg.ckpt.display())))?;
            Ok(MergeInput::new(&l.params, l.fisher.as_ref(), lambda))
        })
        .collect::<Result<Vec<_>>>()?;
    let fallback = match a.fallback {
        FallbackArg::Target => Fallback::Target,
        FallbackArg::LambdaAverage => Fallback::LambdaAverage,
    };
    let spec = MergeSpec::new(inputs, a.target, mode)?.with_epsilon(a.eps)?.with_fallback(fallback);
    let report = merge(&spec)?;
    save_checkpoint(&report.merged, &a.out)?;
    let echo = json!({
        "inputs": a.inputs.iter().map(|i| json!({
            "ckpt": path_str(&i.ckpt),
            "fisher": i.fisher.as_deref().map(path_str),
            "lambda": i.lambda,
        })).collect::<Vec<_>>(),
        "target": a.target,
        "mode": mode,
        "eps": a.eps,
        "fallback": format!("{fallback:?}").to_lowercase(),
    });
    let target_spec = resolve_spec(None, &a.inputs[a.target].ckpt).ok();
    write_sidecar(&a.out, "merge", &echo, target_spec.as_ref())?;
    let mut summary = serde_json::to_value(report.summary(&spec))?;
    summary["config"] = echo;
    summary["out"] = json!(path_str(&a.out));
    print_json(&summary)
}

fn cmd_sweep(a: &SweepArgs, buckets: Option<BucketSpec>) -> Result<()> {
    let loaded = load_inputs(&a.inputs)?;
    let spec = resolve_spec(a.spec.as_deref(), &a.inputs[a.target.min(a.inputs.len() - 1)].ckpt)?;
    let val = load_data(&a.val, buckets)?;
    let mode = MergeMode::from(a.mode);
    let mut template = SweepTemplate::new(
        loaded.iter().map(|l| &l.params).collect(),
        loaded.iter().map(|l| l.fisher.as_ref()).collect(),
        a.target,
        mode,
    );
    template.epsilon = a.eps;
    let grid = lambda_grid_seeded(loaded.len(), a.grid, a.grid_seed)?;
    let result = sweep(&template, &grid, &spec, &val, &a.metric, a.val_limit)?;
    std::fs::write(&a.out, result.to_json()?)?;
    let echo = json!({
        "inputs": a.inputs.iter().map(|i| json!({
            "ckpt": path_str(&i.ckpt),
            "fisher": i.fisher.as_deref().map(path_str),
        })).collect::<Vec<_>>(),
        "target": a.target,
        "mode": mode,
        "eps": a.eps,
        "grid": a.grid,
        "grid_seed": a.grid_seed,
        "val": path_str(&a.val),
        "metric": a.metric,
        "val_limit": a.val_limit,
    });
    write_sidecar(&a.out, "sweep", &echo, Some(&spec))?;
    if let Some(csv) = &a.csv {
        result.write_csv(std::fs::File::create(csv)?)?;
        write_sidecar(csv, "sweep", &echo, Some(&spec))?;
    }
    print_json(&json!({
        "out": path_str(&a.out),
        "points": result.points.len(),
        "best": result.best(),
        "config": echo,
    }))
}

fn cmd_curve(a: &CurveArgs, buckets: Option<BucketSpec>) -> Result<()> {
    let spec = resolve_spec(a.spec.as_deref(), &a.ft)?;
    let pre = load_params(&a.pre)?;
    let ft = load_params(&a.ft)?;
    let modes = match a.mode {
        CurveModeArg::Isotropic => CurveModes::Isotropic,
        CurveModeArg::Fisher => CurveModes::Fisher,
        CurveModeArg::Both => CurveModes::Both,
    };
    let fishers = match (&a.pre_fisher, &a.ft_fisher) {
        (Some(p), Some(f)) => Some((load_fisher(p)?, load_fisher(f)?)),
        (None, None) => None,
        _ => return Err(Error::Invalid("give both --pre-fisher and --ft-fisher or neither".into())),
    };
    let iid = load_data(&a.iid, buckets)?;
    let ood = load_data(&a.ood, buckets)?;
    let inputs = CurveInputs {
        spec: &spec,
        pre: &pre,
        ft: &ft,
        fishers: fishers.as_ref().map(|(p, f)| (p, f)),
        iid: &iid,
        ood: &ood,
    };
    let result = interpolation_curve(&inputs, a.step, modes)?;
    result.write_csv(std::fs::File::create(&a.out)?)?;
    let echo = json!({
        "pre": path_str(&a.pre),
        "ft": path_str(&a.ft),
        "pre_fisher": a.pre_fisher.as_deref().map(path_str),
        "ft_fisher": a.ft_fisher.as_deref().map(path_str),
        "step": a.step,
        "iid": path_str(&a.iid),
        "ood": path_str(&a.ood),
        "mode": format!("{modes:?}").to_lowercase(),
    });
    write_sidecar(&a.out, "curve", &echo, Some(&spec))?;
    print_json(&json!({ "out": path_str(&a.out), "rows": result.points.len(), "config": echo }))
}

fn cmd_ensemble(a: &EnsembleArgs, buckets: Option<BucketSpec>) -> Result<()> {
    if a.ckpts.len() != a.fishers.len() {
        return Err(Error::Invalid(format!("{} checkpoints but {} Fisher files", a.ckpts.len(), a.fishers.len())));
    }
    let spec = resolve_spec(a.spec.as_deref(), &a.ckpts[0])?;
    let params = a.ckpts.iter().map(|p| load_params(p)).collect::<Result<Vec<_>>>()?;
    let fishers = a.fishers.iter().map(|p| load_fisher(p)).collect::<Result<Vec<_>>>()?;
    let test = load_data(&a.test, buckets)?;
    let report = ensemble_compare(&spec, &params, &fishers, &test)?;
    let echo = json!({
        "ckpts": a.ckpts.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
        "fishers": a.fishers.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
        "test": path_str(&a.test),
    });
    let mut out = serde_json::to_value(&report)?;
    out["config"] = echo.clone();
    std::fs::write(&a.out, serde_json::to_string_pretty(&out)? + "\n")?;
    write_sidecar(&a.out, "ensemble", &echo, Some(&spec))?;
    print_json(&out)
}

fn cmd_ablate(a: &AblateArgs, buckets: Option<BucketSpec>) -> Result<()> {
    let target_spec = resolve_spec(a.target_spec.as_deref(), &a.target)?;
    let donor_spec = resolve_spec(a.donor_spec.as_deref(), &a.donor)?;
    let target = load_params(&a.target)?;
    let donor = load_params(&a.donor)?;
    let target_train = load_data(&a.target_data, buckets)?;
    let donor_train = load_data(&a.donor_data, buckets)?;
    let val = load_data(&a.val, buckets)?;
    let test = a.test.as_deref().map(|p| load_data(p, buckets)).transpose()?;
    let settings = AblationSettings {
        n_list: a.n_list.clone(),
        grid_points: a.grid,
        val_limit: a.val_limit,
        mode: fisher_mode(a.mode, a.k),
        seed: a.seed,
    };
    let task = IntermediateTask {
        target_spec: &target_spec,
        target: &target,
        target_train: &target_train,
        donor_spec: &donor_spec,
        donor: &donor,
        donor_train: &donor_train,
        val: &val,
        test: test.as_ref(),
    };
    let report = ablate_fisher_n(&task, &settings)?;
    let echo = json!({
        "target": path_str(&a.target),
        "donor": path_str(&a.donor),
        "target_data": path_str(&a.target_data),
        "donor_data": path_str(&a.donor_data),
        "val": path_str(&a.val),
        "test": a.test.as_deref().map(path_str),
        "settings": settings,
    });
    let mut out = serde_json::to_value(&report)?;
    out["config"] = echo.clone();
    std::fs::write(&a.out, serde_json::to_string_pretty(&out)? + "\n")?;
    write_sidecar(&a.out, "ablate-fisher-n", &echo, Some(&target_spec))?;
    print_json(&out)
}

fn cmd_suite(a: &SuiteArgs) -> Result<()> {
    let suite = make_task_suite(a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let echo = json!({ "seed": a.seed });
    std::fs::write(a.out.join("spec.json"), serde_json::to_string_pretty(&suite.spec)? + "\n")?;
    let init = a.out.join("init.fmrg");
    save_checkpoint(&suite.init, &init)?;
    write_sidecar(&init, "suite", &echo, Some(&suite.spec))?;
    let mut tasks = Vec::new();
    for task in &suite.tasks {
        let mut splits = serde_json::Map::new();
        for (split, data) in [("train", &task.train), ("val", &task.val), ("test", &task.test)] {
            let name = format!("{}-{split}.csv", task.name);
            data.save_csv(a.out.join(&name))?;
            splits.insert(split.into(), json!(name));
        }
        tasks.push(json!({
            "name": task.name,
            "kind": task.kind,
            "num_classes": task.num_classes(),
            "files": splits,
        }));
    }
    let manifest = json!({
        "seed": a.seed,
        "spec": "spec.json",
        "init": "init.fmrg",
        "tasks": tasks,
        "config": echo,
    });
    std::fs::write(a.out.join("suite.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    print_json(&manifest)
}

fn cmd_cost(a: &CostArgs) -> Result<()> {
    let inputs = CostInputs {
        param_count: a.params,
        train_tokens: a.train_tokens,
        fisher_examples: a.fisher_examples,
        tokens_per_example: a.tokens_per_example,
        eval_tokens: a.eval_tokens,
        num_models: a.models,
    };
    let c = estimate_costs(&inputs);
    print_json(&json!({
        "estimate": c,
        "isotropic_total": c.isotropic_total(),
        "fisher_total": c.fisher_total(),
        "config": inputs,
    }))
}

fn run(cli: Cli) -> Result<()> {
    let b = cli.buckets;
    match &cli.command {
        Command::Train(a) => cmd_train(a, b),
        Command::Fisher(a) => cmd_fisher(a, b),
        Command::Merge(a) => cmd_merge(a),
        Command::Sweep(a) => cmd_sweep(a, b),
        Command::Curve(a) => cmd_curve(a, b),
        Command::Ensemble(a) => cmd_ensemble(a, b),
        Command::AblateFisherN(a) => cmd_ablate(a, b),
        Command::Suite(a) => cmd_suite(a),
        Command::Cost(a) => cmd_cost(a),
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(value) = std::env::var("FISHMERGE_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().map_err(|_| format!("FISHMERGE_THREADS must be a positive integer, got '{value}'"))?;
    if n == 0 {
        return Err("FISHMERGE_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.to_string().trim(), 1);
        }
    };
    if let Err(msg) = configure_threads() {
        return fail("usage", &msg, 1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.kind() {
            ErrorKind::Usage => fail("usage", &e.to_string(), 1),
            ErrorKind::Data => fail("data", &e.to_string(), 2),
            ErrorKind::Numerical => fail("numerical", &e.to_string(), 3),
        },
    }
}
