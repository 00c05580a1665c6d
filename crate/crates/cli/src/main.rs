use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dsblo::harness::{ExperimentConfig, ENV_OUTPUT_DIR, ENV_THREADS};
use dsblo::lower_level::QuadraticLowerLevel;
use dsblo::verify::{run_criterion, run_verify, Level, VerifyOptions, VerifyReport};
use dsblo::{generate, DVector, GeneratorConfig, Perturbation, ProblemOracle, QuadraticBilevel};

#[derive(Parser)]
#[command(name = "dsblo", version, about = "Doubly stochastic bilevel optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random quadratic instance and print its fingerprint.
    Generate(GenerateArgs),
    /// Run an experiment config (TOML) and write CSV, JSON and SVG outputs.
    Run(RunArgs),
    /// Run the acceptance checks.
    Verify(VerifyArgs),
    /// Describe an instance file.
    Inspect {
        instance: PathBuf,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 10)]
    du: usize,
    #[arg(long, default_value_t = 10)]
    dl: usize,
    /// Random constraint rows, before the box rows.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Upper-level finite-sum size.
    #[arg(long, default_value_t = 1)]
    components: usize,
    /// Box half-width R appended as -R <= y <= R.
    #[arg(long, default_value_t = 10.0, conflicts_with = "no_box")]
    box_radius: f64,
    /// Do not append box rows.
    #[arg(long)]
    no_box: bool,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Output directory; overrides the config and the environment.
    #[arg(long, env = ENV_OUTPUT_DIR)]
    output_dir: Option<PathBuf>,
    /// Worker threads; overrides the config and the environment.
    #[arg(long, env = ENV_THREADS)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    SignFlip,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = LevelArg::Fast)]
    level: LevelArg,
    /// Run a single criterion (1-10).
    #[arg(long)]
    criterion: Option<u8>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// Tamper with the gradient under test; the check must then fail.
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<Fault>,
}

fn generate_cmd(a: GenerateArgs) -> Result<ExitCode> {
    let cfg = GeneratorConfig {
        components: a.components,
        box_radius: (!a.no_box).then_some(a.box_radius),
        ..GeneratorConfig::new(a.du, a.dl, a.k, a.seed)
    };
    let inst = generate(&cfg).context("instance generation failed")?;
    inst.save(&a.output)
        .with_context(|| format!("cannot write {}", a.output.display()))?;
    println!("{}", inst.fingerprint());
    Ok(ExitCode::SUCCESS)
}

fn run_cmd(a: RunArgs) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    cfg.apply_overrides(a.output_dir, a.threads);
    cfg.validate()?;
    let summary = dsblo::run_experiment(&cfg)?;
    println!("instance {}", summary.fingerprint);
    for o in &summary.outcomes {
        match &o.result {
            Ok((log, report)) => {
                let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
                println!(
                    "{} seed {}: {} iterations, F {} -> {}, {:.2} s, {}",
                    o.algorithm,
                    o.seed,
                    log.records.len(),
                    f(report.f_first),
                    f(report.f_final),
                    log.timings.total_s,
                    o.json_path.display()
                );
            }
            Err(e) => println!("{} seed {}: FAILED: {e}", o.algorithm, o.seed),
        }
    }
    if let Some(p) = &summary.plot_path {
        println!("plot {}", p.display());
    }
    Ok(if summary.failures() == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("{} of {} runs failed", summary.failures(), summary.outcomes.len());
        ExitCode::FAILURE
    })
}

fn verify_cmd(a: VerifyArgs) -> Result<ExitCode> {
    let level = match a.level {
        LevelArg::Fast => Level::Fast,
        LevelArg::Full => Level::Full,
    };
    let opts = VerifyOptions {
        level,
        inject_sign_flip: matches!(a.inject_fault, Some(Fault::SignFlip)),
    };
    let report = match a.criterion {
        Some(id) => {
            let Some(r) = run_criterion(id, opts) else {
                bail!("no criterion {id}; expected 1-10");
            };
            VerifyReport {
                level,
                results: vec![r],
            }
        }
        None => run_verify(opts),
    };
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_text());
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn inspect_cmd(path: PathBuf) -> Result<ExitCode> {
    let inst = QuadraticBilevel::load(&path).with_context(|| format!("cannot load {}", path.display()))?;
    let meta = &inst.meta;
    println!("fingerprint  {}", inst.fingerprint());
    println!("d_u          {}", inst.dim_x());
    println!("d_l          {}", inst.dim_y());
    println!("rows         {} ({} random)", inst.constraints.num_rows(), meta.random_rows);
    match meta.box_radius {
        Some(r) => println!("box radius   {r}"),
        None => println!("box radius   none"),
    }
    println!("components   {}", inst.num_components());
    println!("mu_g         {}", inst.mu_g());
    println!("generator    {} v{} seed {:?}", meta.distribution, meta.generator_version, meta.seed);
    let x = DVector::zeros(inst.dim_x());
    match QuadraticLowerLevel::new(&inst).and_then(|ll| ll.solve(&x, &Perturbation::zero(inst.dim_y()))) {
        Ok(sol) => {
            println!("F(0)         {}", inst.eval_f(&x, &sol.y));
            println!("active at 0  {:?}", sol.active_set);
        }
        Err(e) => println!("F(0)         unavailable: {e}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Generate(a) => generate_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Inspect { instance } => inspect_cmd(instance),
    }
}
