use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use agentic_search::agent::Pipeline;
use agentic_search::cli::{cmd_build, cmd_collect, cmd_report, cmd_run, BackendSpec, CliError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "agentic-search", version, about = "Agentic search benchmark engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and persist a retrieval backend from the corpus.
    Build(ConfigArgs),
    /// Evaluate a pipeline over the dataset, once per seed.
    Run(ConfigArgs),
    /// Sample rollout groups and export them as training batches.
    Collect {
        #[command(flatten)]
        config: ConfigArgs,
        /// Rollouts per question.
        #[arg(long, short = 'k')]
        group_size: Option<usize>,
        /// Weight of answer correctness in the reward; the rest goes to format.
        #[arg(long)]
        outcome_weight: Option<f64>,
    },
    /// Merge report files into a comparison grid.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
        /// Write the grid here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
    Json,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long, value_parser = parse_pipeline)]
    pipeline: Option<Pipeline>,
    /// dense-lexical, dense-embedding, entity-graph or remote:<url>
    #[arg(long)]
    backend: Option<BackendSpec>,
    /// Comma-separated seeds, one full pass each.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Episode worker threads.
    #[arg(long)]
    parallel: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    index: Option<PathBuf>,
}

fn parse_pipeline(s: &str) -> Result<Pipeline, String> {
    Pipeline::ALL
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| {
            let names: Vec<&str> = Pipeline::ALL.iter().map(|p| p.as_str()).collect();
            format!("expected one of {}", names.join(", "))
        })
}

impl ConfigArgs {
    fn load(&self, extra: Overrides) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            pipeline: self.pipeline,
            backend: self.backend.clone(),
            seeds: self.seeds.clone(),
            parallel: self.parallel,
            output_dir: self.output_dir.clone(),
            top_k: self.top_k,
            index: self.index.clone(),
            ..extra
        });
        Ok(cfg)
    }
}

fn to_json(value: &impl serde::Serialize) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Build(args) => {
            let summary = cmd_build(&args.load(Overrides::default())?)?;
            println!("{}", to_json(&summary)?);
        }
        Command::Run(args) => {
            let summary = cmd_run(&args.load(Overrides::default())?)?;
            print!("{}", summary.report.to_text());
            eprintln!(
                "{} episode(s) run, {} served from cache; report at {}",
                summary.episodes_run,
                summary.cache_hits,
                summary.report_path.display()
            );
        }
        Command::Collect {
            config,
            group_size,
            outcome_weight,
        } => {
            let cfg = config.load(Overrides {
                group_size,
                outcome_weight,
                ..Overrides::default()
            })?;
            for b in cmd_collect(&cfg)? {
                println!("{}\t{}\t{} record(s)", b.qid, b.path.display(), b.records);
            }
        }
        Command::Report { inputs, format, output } => {
            let grid = cmd_report(&inputs)?;
            let text = match format {
                Format::Markdown => grid.to_markdown(),
                Format::Csv => grid.to_csv()?,
                Format::Json => to_json(&grid)? + "\n",
            };
            match output {
                Some(path) => std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
