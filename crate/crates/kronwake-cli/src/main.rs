use clap::{Args, Parser, Subcommand};
use kronwake_cli::config::RunConfig;
use kronwake_cli::summary::{parse_csv, reference_block, summarize};
use kronwake_cli::svg::render_curves;
use kronwake_cli::{run, verify};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "kronwake-cli", about = "Second-order training runs with Kronecker curvature and KL-wake steps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one seeded training run and write its CSV.
    Run(RunArgs),
    /// Aggregate run CSVs into summary statistics.
    Summarize {
        csvs: Vec<PathBuf>,
        /// Also print the reported reference table for context.
        #[arg(long)]
        reference: bool,
    },
    /// Render learning curves for run CSVs into an SVG.
    Plot {
        csvs: Vec<PathBuf>,
        #[arg(long, default_value = "curves.svg")]
        out: PathBuf,
    },
    /// Run the dense oracle suites against the step recursions.
    Verify,
}

#[derive(Args)]
struct RunArgs {
    /// key=value config file; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Record real wall-clock seconds in the CSV (breaks byte-level
    /// reproducibility of the output file).
    #[arg(long)]
    timing: bool,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,

    // Per-key overrides mirroring the config file.
    #[arg(long = "solver")]
    solver: Option<String>,
    #[arg(long = "rho")]
    rho: Option<String>,
    #[arg(long = "lambda")]
    lambda: Option<String>,
    #[arg(long = "lambda_decay")]
    lambda_decay: Option<String>,
    #[arg(long = "gamma")]
    gamma: Option<String>,
    #[arg(long = "batch_size")]
    batch_size: Option<String>,
    #[arg(long = "update_period")]
    update_period: Option<String>,
    #[arg(long = "weight_decay")]
    weight_decay: Option<String>,
    #[arg(long = "clip_mode")]
    clip_mode: Option<String>,
    #[arg(long = "clip_param")]
    clip_param: Option<String>,
    #[arg(long = "tau")]
    tau: Option<String>,
    #[arg(long = "epochs")]
    epochs: Option<String>,
    #[arg(long = "seed")]
    seed: Option<String>,
    #[arg(long = "arch")]
    arch: Option<String>,
    #[arg(long = "dataset")]
    dataset: Option<String>,
    #[arg(long = "data_dir")]
    data_dir: Option<String>,
    #[arg(long = "synth_n")]
    synth_n: Option<String>,
    #[arg(long = "synth_test_n")]
    synth_test_n: Option<String>,
    #[arg(long = "synth_seed")]
    synth_seed: Option<String>,
    #[arg(long = "out_dir")]
    out_dir: Option<String>,
    #[arg(long = "n_is")]
    n_is: Option<String>,
    #[arg(long = "omega")]
    omega: Option<String>,
    #[arg(long = "n_cap")]
    n_cap: Option<String>,
    #[arg(long = "zeta_scale")]
    zeta_scale: Option<String>,
    #[arg(long = "q_zero_b")]
    q_zero_b: Option<String>,
    #[arg(long = "margin_diag")]
    margin_diag: Option<String>,
}

impl RunArgs {
    fn build_config(&self) -> kronwake::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let overrides: [(&str, &Option<String>); 26] = [
            ("solver", &self.solver),
            ("rho", &self.rho),
            ("lambda", &self.lambda),
            ("lambda_decay", &self.lambda_decay),
            ("gamma", &self.gamma),
            ("batch_size", &self.batch_size),
            ("update_period", &self.update_period),
            ("weight_decay", &self.weight_decay),
            ("clip_mode", &self.clip_mode),
            ("clip_param", &self.clip_param),
            ("tau", &self.tau),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("arch", &self.arch),
            ("dataset", &self.dataset),
            ("data_dir", &self.data_dir),
            ("synth_n", &self.synth_n),
            ("synth_test_n", &self.synth_test_n),
            ("synth_seed", &self.synth_seed),
            ("out_dir", &self.out_dir),
            ("n_is", &self.n_is),
            ("omega", &self.omega),
            ("n_cap", &self.n_cap),
            ("zeta_scale", &self.zeta_scale),
            ("q_zero_b", &self.q_zero_b),
            ("margin_diag", &self.margin_diag),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> kronwake::Result<ExitCode> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.build_config()?;
            if args.print_config {
                println!("{cfg}");
                return Ok(ExitCode::SUCCESS);
            }
            let metrics = run::run(&cfg, args.timing)?;
            println!("{}", metrics.csv_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Summarize { csvs, reference } => {
            if csvs.is_empty() {
                return Err(kronwake::Error::Config("summarize: no CSV files given".into()));
            }
            let runs: kronwake::Result<Vec<_>> = csvs.iter().map(|p| parse_csv(p)).collect();
            let table = summarize(&runs?)?;
            print!("{table}");
            if reference {
                print!("{}", reference_block());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot { csvs, out } => {
            if csvs.is_empty() {
                return Err(kronwake::Error::Config("plot: no CSV files given".into()));
            }
            let runs: kronwake::Result<Vec<_>> = csvs.iter().map(|p| parse_csv(p)).collect();
            render_curves(&runs?, &out)?;
            println!("{}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let report = verify::verify()?;
            report.print();
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
