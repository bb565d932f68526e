use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mafqi::data_distribution::uniform_distribution;
use mafqi::env_model::{matrix_game_env, Environment};
use mafqi::harness::{
    emit_csv, run_fqi, sweep, DistSpec, EnvSource, OperatorKind, RunConfig, Status, SweepParam,
};
use mafqi::io;
use mafqi::lstsq::reduce_lstsq_to_mmdp;
use mafqi::lvf::{bellman_target, credit_rows, lvf_project, FactoredQ, ResidueSpec};
use mafqi::verify;

#[derive(Parser)]
#[command(name = "mafqi", version, about = "Factorized multi-agent fitted Q-iteration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one FQI experiment and log every iteration.
    Run(RunArgs),
    /// Run one experiment per parameter value.
    Sweep(SweepArgs),
    /// Run the self-check suites; exits non-zero on any failure.
    Verify(VerifyArgs),
    /// Fit the 3x3 coordination game once and print the payoff and q_tot tables.
    MatrixGame(MatrixGameArgs),
    /// Solve a binary weighted least-squares file through the single-state reduction.
    Lstsq(LstsqArgs),
    /// Check an environment file and list every violation.
    Validate {
        path: PathBuf,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// two-state, matrix-game, file:PATH or random:N,S,M
    #[arg(long, default_value = "two-state")]
    env: String,
    /// lvf-closed-form (alias lvf), lvf-numeric or igm
    #[arg(long, default_value = "lvf-closed-form")]
    operator: String,
    /// uniform, product[:PATH], epsilon-greedy, eta or file:PATH
    #[arg(long, default_value = "uniform")]
    dist: String,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Rebuild the epsilon-greedy distribution from every iterate.
    #[arg(long)]
    on_policy: bool,
    #[arg(long, default_value_t = mafqi::harness::DEFAULT_ITERS)]
    iters: usize,
    #[arg(long, default_value_t = mafqi::harness::DEFAULT_TOL)]
    tol: f64,
    /// Divergence threshold multiplier on R_max / (1 - gamma).
    #[arg(long, default_value_t = mafqi::harness::DEFAULT_K)]
    k: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial value table (factored-q or joint-q TOML).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Write the final value table here.
    #[arg(long)]
    save_q: Option<PathBuf>,
    /// CSV log path (run) or output directory (sweep).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// epsilon, eta or gamma
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suite to run (repeatable); all suites by default.
    #[arg(long)]
    suite: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MatrixGameArgs {
    /// Write the q_tot table as CSV (rows agent 2, columns agent 1).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the per-agent credit terms as CSV.
    #[arg(long)]
    credit: Option<PathBuf>,
}

#[derive(Args)]
struct LstsqArgs {
    /// Lines of `pattern,weight,target`, e.g. `0110,1.0,2.5`.
    path: PathBuf,
}

fn build_config(args: &RunArgs) -> Result<RunConfig> {
    let mut config = RunConfig {
        env: EnvSource::parse(&args.env)?,
        operator: OperatorKind::parse(&args.operator)?,
        dist: DistSpec::parse(&args.dist, args.epsilon, args.eta)?,
        on_policy: args.on_policy,
        gamma: args.gamma,
        iters: args.iters,
        tol: args.tol,
        k: args.k,
        seed: args.seed,
        initial: None,
        out: args.out.clone(),
    };
    config.validate()?;
    if let Some(path) = &args.init {
        let env = config.resolve_env()?;
        config.initial = Some(io::load_value_table(&env, path)?);
    }
    Ok(config)
}

fn run(args: &RunArgs) -> Result<ExitCode> {
    let config = build_config(args)?;
    let log = run_fqi(&config)?;
    if let Some(path) = &config.out {
        emit_csv(&log, path)?;
    } else {
        print!("{}", log.to_csv());
    }
    if let (Some(path), Some(q)) = (&args.save_q, &log.final_q) {
        io::save_value_table(q, path)?;
    }
    let status = log.status.expect("a run logs at least one iteration");
    let last = log.last().expect("a run logs at least one iteration");
    eprintln!(
        "{status} after {} iterations: ||q_tot||_inf = {:.6e} (threshold {:.6e}), greedy optimal: {}",
        last.iter, last.q_tot_inf_norm, log.threshold, last.greedy_optimal
    );
    Ok(if status == Status::Diverged {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn run_sweep(args: &SweepArgs) -> Result<ExitCode> {
    let mut template = build_config(&args.run)?;
    let param = SweepParam::parse(&args.param)?;
    let dir = template.out.take();
    let result = sweep(&template, param, &args.values)?;
    let summary = result.summary_csv();
    if let Some(dir) = &dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("summary.csv"), &summary)
            .with_context(|| format!("writing {}", dir.join("summary.csv").display()))?;
        for (i, entry) in result.entries.iter().enumerate() {
            if let Ok(log) = &entry.result {
                emit_csv(log, &dir.join(format!("run_{i}.csv")))?;
            }
        }
    }
    print!("{summary}");
    for entry in &result.entries {
        if let Err(e) = &entry.result {
            eprintln!("{} = {}: {e}", param.name(), entry.value);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run_verify(args: &VerifyArgs) -> Result<ExitCode> {
    let reports = verify::run_suites(&args.suite, args.seed)?;
    for r in &reports {
        println!("{r}");
    }
    Ok(if reports.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn print_table(title: &str, env: &Environment, values: &[f64]) {
    let m = env.num_actions();
    let space = env.joint_actions();
    println!("{title}");
    print!("{:>8}", "a2 \\ a1");
    for a1 in 0..m {
        print!("{:>9}", format!("A{}", a1 + 1));
    }
    println!();
    for a2 in 0..m {
        print!("{:>8}", format!("A{}", a2 + 1));
        for a1 in 0..m {
            print!("{:>9.2}", values[space.encode(&[a1, a2])]);
        }
        println!();
    }
}

fn matrix_game(args: &MatrixGameArgs) -> Result<ExitCode> {
    let env = Environment::from_mmdp(matrix_game_env())?;
    let dist = uniform_distribution(&env);
    let target = bellman_target(&env, &FactoredQ::zeros(&env));
    let zero = ResidueSpec::zero(&env);
    let q = lvf_project(&env, &dist, &target, &zero)?;
    let q_tot = q.q_tot_table(&env);
    print_table("payoff", &env, env.mmdp().rewards());
    println!();
    print_table("q_tot (LVF, uniform data)", &env, &q_tot);
    let greedy = env.joint_actions().decode(q.greedy_joint(&env, 0));
    println!();
    println!("greedy joint action: <A{}, A{}>", greedy[0] + 1, greedy[1] + 1);
    if let Some(path) = &args.csv {
        write_file(path, &io::joint_matrix_csv(&env, &q_tot, 0)?)?;
    }
    if let Some(path) = &args.credit {
        write_file(path, &io::credit_csv(&credit_rows(&env, &dist, &target, &zero)?))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn lstsq(args: &LstsqArgs) -> Result<ExitCode> {
    let inst = io::load_lstsq(&args.path)?;
    let fit = reduce_lstsq_to_mmdp(&inst.rows, &inst.labels, &inst.weights)?.solve()?;
    let coeffs: Vec<String> = fit.x.iter().map(|x| format!("{x:.10}")).collect();
    println!("x = [{}]", coeffs.join(", "));
    println!("intercept = {:.10}", fit.intercept);
    println!("pattern,target,fitted");
    for (row, y) in inst.rows.iter().zip(&inst.labels) {
        let pattern: String = row.iter().map(|c| char::from(b'0' + c)).collect();
        println!("{pattern},{y},{:.10}", fit.predict(row));
    }
    Ok(ExitCode::SUCCESS)
}

fn validate_file(path: &Path) -> Result<ExitCode> {
    let env = io::load_environment(path)?;
    println!(
        "{}: valid ({} agents, {} states, {} actions, {} contexts)",
        path.display(),
        env.num_agents(),
        env.num_states(),
        env.num_actions(),
        env.num_contexts()
    );
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => run(args),
        Command::Sweep(args) => run_sweep(args),
        Command::Verify(args) => run_verify(args),
        Command::MatrixGame(args) => matrix_game(args),
        Command::Lstsq(args) => lstsq(args),
        Command::Validate { path } => validate_file(path),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
