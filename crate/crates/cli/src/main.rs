use carate_cli::{
    parse_df_mode, parse_impute, parse_missing, parse_pi, parse_regressions, parse_scheme,
    parse_scopes, run_analyze, run_randomize, run_simulate, write_simulation_outputs,
    AnalyzeConfig, CliError, ColumnMap, FileSection, OutputFormat, RandomizeConfig,
    SimulateConfig,
};
use carate_core::sim::{OutcomeModel, SnrDefinition};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "carate",
    version,
    about = "Average treatment effect estimation and simulation for covariate-adaptive \
             randomized experiments with missing covariates"
)]
struct Cli {
    /// TOML config file with [analyze]/[simulate]/[randomize] sections whose
    /// keys mirror the flags; command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate treatment effects from a CSV dataset.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo study over the built-in data-generating models.
    Simulate(SimulateArgs),
    /// Produce a prospective treatment assignment list.
    Randomize(RandomizeArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// CSV dataset path.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    outcome_col: Option<String>,
    #[arg(long)]
    treat_col: Option<String>,
    #[arg(long)]
    stratum_col: Option<String>,
    /// Comma-separated covariate column names.
    #[arg(long)]
    covariate_cols: Option<String>,
    /// fisher | lin | tom | auto, comma-separated for several.
    #[arg(long)]
    method: Option<String>,
    /// cc | ccov | imp | mim | none, comma-separated for several.
    #[arg(long)]
    missing: Option<String>,
    /// common | ss, comma-separated for both.
    #[arg(long)]
    scope: Option<String>,
    /// Target treated proportion (accepts ratios like 2/3).
    #[arg(long)]
    pi: Option<String>,
    /// Confidence level.
    #[arg(long)]
    level: Option<f64>,
    /// auto | on | off.
    #[arg(long)]
    df_adjust: Option<String>,
    /// mean | zero | const:<value> (single imputation policy).
    #[arg(long)]
    impute: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv | json.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Outcome model: 1, 2, or 3.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    pi: Option<String>,
    /// simple | stratified-block | minimization.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    block_size: Option<usize>,
    /// Biased-coin probability for minimization.
    #[arg(long)]
    coin: Option<f64>,
    /// Covariate columns in the generated data: 5 or 7.
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    /// auto | on | off.
    #[arg(long)]
    df_adjust: Option<String>,
    /// sd | var: how the signal-to-noise targets are read.
    #[arg(long)]
    snr_def: Option<String>,
    /// CSV output path; a JSON sidecar with the full config is written next
    /// to it. Without --out the CSV goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RandomizeArgs {
    /// simple | stratified-block | minimization.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    pi: Option<String>,
    /// Unit count (simple randomization).
    #[arg(long)]
    n: Option<usize>,
    /// CSV with the unit list (block and minimization schemes).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    stratum_col: Option<String>,
    /// Comma-separated stratification-variable columns (minimization).
    #[arg(long)]
    covariate_cols: Option<String>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    coin: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<(), CliError> {
    match out {
        None => {
            print!("{text}");
            Ok(())
        }
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display()))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze(args) => {
            let file = FileSection::load(cli.config.as_deref(), "analyze")?;
            let pick = |cli_v: Option<String>, key: &str| cli_v.or_else(|| file.string(key));

            let pi = parse_pi(&pick(args.pi, "pi").unwrap_or_else(|| "0.5".into()))?;
            let config = AnalyzeConfig {
                data_path: args
                    .data
                    .or_else(|| file.string("data").map(PathBuf::from))
                    .ok_or_else(|| CliError::Config("--data is required".into()))?,
                columns: ColumnMap {
                    outcome: pick(args.outcome_col, "outcome_col").unwrap_or_else(|| "y".into()),
                    treatment: pick(args.treat_col, "treat_col").unwrap_or_else(|| "a".into()),
                    stratum: pick(args.stratum_col, "stratum_col")
                        .unwrap_or_else(|| "stratum".into()),
                    covariates: pick(args.covariate_cols, "covariate_cols")
                        .map(|s| s.split(',').map(|c| c.trim().to_string()).collect())
                        .unwrap_or_default(),
                },
                methods: parse_regressions(
                    &pick(args.method, "method").unwrap_or_else(|| "auto".into()),
                    pi,
                )?,
                missing: parse_missing(
                    &pick(args.missing, "missing").unwrap_or_else(|| "mim".into()),
                )?,
                scopes: parse_scopes(&pick(args.scope, "scope").unwrap_or_else(|| "common".into()))?,
                pi,
                level: args
                    .level
                    .or_else(|| file.float("level"))
                    .unwrap_or(0.95),
                df_mode: parse_df_mode(
                    &pick(args.df_adjust, "df_adjust").unwrap_or_else(|| "auto".into()),
                )?,
                impute: parse_impute(
                    &pick(args.impute, "impute").unwrap_or_else(|| "mean".into()),
                )?,
                format: OutputFormat::parse(
                    &pick(args.format, "format").unwrap_or_else(|| "csv".into()),
                )?,
            };
            let rendered = run_analyze(&config)?;
            emit(&rendered, args.out.as_ref())
        }
        Command::Simulate(args) => {
            let file = FileSection::load(cli.config.as_deref(), "simulate")?;
            let pick = |cli_v: Option<String>, key: &str| cli_v.or_else(|| file.string(key));

            let pi = parse_pi(&pick(args.pi, "pi").unwrap_or_else(|| "0.5".into()))?;
            let model_tag = pick(args.model, "model").unwrap_or_else(|| "2".into());
            let model = OutcomeModel::parse(&model_tag)
                .ok_or_else(|| CliError::Config(format!("unknown model '{model_tag}'")))?;
            let scheme_tag =
                pick(args.scheme, "scheme").unwrap_or_else(|| "stratified-block".into());
            let scheme = parse_scheme(
                &scheme_tag,
                pi,
                args.block_size
                    .or_else(|| file.integer("block_size").map(|v| v as usize)),
                args.coin.or_else(|| file.float("coin")),
            )?;
            let snr_def = match pick(args.snr_def, "snr_def")
                .unwrap_or_else(|| "sd".into())
                .as_str()
            {
                "sd" => SnrDefinition::SdRatio,
                "var" => SnrDefinition::VarRatio,
                other => {
                    return Err(CliError::Config(format!(
                        "unknown snr definition '{other}' (sd | var)"
                    )))
                }
            };
            let config = SimulateConfig {
                model,
                n: args
                    .n
                    .or_else(|| file.integer("n").map(|v| v as usize))
                    .unwrap_or(200),
                pi,
                scheme,
                p_total: args
                    .p
                    .or_else(|| file.integer("p").map(|v| v as usize))
                    .unwrap_or(5),
                replications: args
                    .reps
                    .or_else(|| file.integer("reps").map(|v| v as usize))
                    .unwrap_or(10_000),
                seed: args.seed.or_else(|| file.integer("seed")).unwrap_or(1),
                threads: args
                    .threads
                    .or_else(|| file.integer("threads").map(|v| v as usize))
                    .unwrap_or_else(num_cpus),
                level: args.level.or_else(|| file.float("level")).unwrap_or(0.95),
                df_mode: parse_df_mode(
                    &pick(args.df_adjust, "df_adjust").unwrap_or_else(|| "auto".into()),
                )?,
                snr_definition: snr_def,
            };
            let report = run_simulate(&config)?;
            match &args.out {
                Some(path) => {
                    let sidecar = write_simulation_outputs(&report, path)?;
                    eprintln!(
                        "wrote {} and {} ({} rows, {:.1}s)",
                        path.display(),
                        sidecar.display(),
                        report.rows.len(),
                        report.meta.wall_seconds
                    );
                    Ok(())
                }
                None => {
                    print!("{}", report.to_csv_string());
                    Ok(())
                }
            }
        }
        Command::Randomize(args) => {
            let file = FileSection::load(cli.config.as_deref(), "randomize")?;
            let pick = |cli_v: Option<String>, key: &str| cli_v.or_else(|| file.string(key));

            let pi = parse_pi(&pick(args.pi, "pi").unwrap_or_else(|| "0.5".into()))?;
            let scheme_tag = pick(args.scheme, "scheme").unwrap_or_else(|| "simple".into());
            let scheme = parse_scheme(
                &scheme_tag,
                pi,
                args.block_size
                    .or_else(|| file.integer("block_size").map(|v| v as usize)),
                args.coin.or_else(|| file.float("coin")),
            )?;
            let config = RandomizeConfig {
                scheme,
                n: args.n.or_else(|| file.integer("n").map(|v| v as usize)),
                data_path: args.data.or_else(|| file.string("data").map(PathBuf::from)),
                stratum_col: pick(args.stratum_col, "stratum_col"),
                covariate_cols: pick(args.covariate_cols, "covariate_cols")
                    .map(|s| s.split(',').map(|c| c.trim().to_string()).collect())
                    .unwrap_or_default(),
                seed: args.seed.or_else(|| file.integer("seed")).unwrap_or(1),
            };
            let rendered = run_randomize(&config)?;
            emit(&rendered, args.out.as_ref())
        }
    }
}

fn num_cpus() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{err}");
        std::process::exit(err.exit_code());
    }
}
