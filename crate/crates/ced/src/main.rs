use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use ced::config::PipelineConfig;
use ced::scorer::{serve, BuiltinScorer};
use ced::synth::{generate, SynthConfig};
use ced::{ingest, Error, Pipeline, Result, Stage};
use ced_core::corpus::Provenance;
use ced_core::{AdaptConfig, LmSettings, Pool};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ced", version, about = "Select in-context demonstrations by cross-entropy difference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the input files and write the run's pool.
    Ingest(StageArgs),
    /// Train the background n-gram model.
    TrainBase(StageArgs),
    /// Adapt one target model per candidate (clusters = 0).
    TrainTargets(StageArgs),
    /// Seed, assign and retrain equal-size clusters (clusters > 0).
    Cluster(StageArgs),
    /// Score every test input under every target model.
    Score(StageArgs),
    /// Pick one demonstration per test and render prompts.
    Select(StageArgs),
    /// Check gradient alignment on the tiny differentiable model.
    Gradcheck(StageArgs),
    /// Compare selection policies against the oracles.
    Evaluate(StageArgs),
    /// Render the evaluation as text tables.
    Report(StageArgs),
    /// Every stage in order.
    Run(StageArgs),
    /// Serve the built-in model over the line-delimited JSON scorer protocol on stdio.
    ServeScorer {
        #[arg(long, default_value_t = LmSettings::default().order)]
        order: usize,
        #[arg(long, default_value_t = LmSettings::default().smoothing)]
        smoothing: f64,
    },
    /// Write a synthetic mixed-domain pool and a matching config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline config (JSON); relative paths resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Run directory holding all artifacts.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Number of clusters; 0 trains one target per candidate.
    #[arg(long)]
    clusters: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Candidates kept per dataset.
    #[arg(long)]
    sample_per_dataset: Option<usize>,
    /// Bootstrap resample count.
    #[arg(long)]
    bootstrap_resamples: Option<usize>,
    /// Seed for per-dataset candidate sampling.
    #[arg(long)]
    sample_seed: Option<u64>,
    /// Seed for cluster seed draws.
    #[arg(long)]
    cluster_seed: Option<u64>,
    /// Seed for random selection policies.
    #[arg(long)]
    policy_seed: Option<u64>,
    /// Seed for bootstrap resampling.
    #[arg(long)]
    bootstrap_seed: Option<u64>,
    /// Seed for the gradient check model and texts.
    #[arg(long)]
    gradcheck_seed: Option<u64>,
    /// Recompute the requested stage even if its artifact exists.
    #[arg(long)]
    force: bool,
}

impl StageArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(d) = &self.output_dir {
            cfg.paths.output_dir = d.clone();
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$($field).+ = v; })*
            };
        }
        set!(
            clusters => clusters,
            parallelism => parallelism,
            bootstrap_resamples => bootstrap_resamples,
            sample_seed => seeds.sample,
            cluster_seed => seeds.cluster,
            policy_seed => seeds.policy,
            bootstrap_seed => seeds.bootstrap,
            gradcheck_seed => seeds.gradcheck,
        );
        if self.sample_per_dataset.is_some() {
            cfg.sample_per_dataset = self.sample_per_dataset;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving pool.jsonl and config.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    domains: usize,
    #[arg(long, default_value_t = 32)]
    candidates: usize,
    #[arg(long, default_value_t = 4)]
    dev: usize,
    #[arg(long, default_value_t = 50)]
    tests: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run_pipeline(args: &StageArgs, stage: Option<Stage>) -> Result<()> {
    let mut p = Pipeline::new(args.load()?, args.force)?;
    match stage {
        Some(s) => p.run_stage(s)?,
        None => p.run_all()?,
    }
    for outcome in p.log() {
        println!("{}", serde_json::to_string(outcome).expect("outcome serializes"));
    }
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    if !(1..=8).contains(&args.domains) {
        return Err(Error::Config("--domains must be between 1 and 8".into()));
    }
    let cfg = SynthConfig {
        domains: args.domains,
        candidates: args.candidates,
        dev: args.dev,
        tests: args.tests,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let pool = Pool::new(
        generate(&cfg),
        Provenance {
            source: "synth".into(),
            seed: Some(args.seed),
        },
    )?;
    let pool_path = args.out.join("pool.jsonl");
    ingest::write_pool(&pool_path, None, &pool)?;
    let config = PipelineConfig::new("pool.jsonl", "run");
    let mut text = serde_json::to_string_pretty(&config).expect("config serializes");
    text.push('\n');
    ced::store::write_atomic(&args.out.join("config.json"), text.as_bytes())?;
    println!(
        "{}",
        serde_json::json!({"pool": pool_path, "examples": pool.len(), "config": args.out.join("config.json")})
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => run_pipeline(&a, Some(Stage::Ingest)),
        Command::TrainBase(a) => run_pipeline(&a, Some(Stage::TrainBase)),
        Command::TrainTargets(a) => run_pipeline(&a, Some(Stage::TrainTargets)),
        Command::Cluster(a) => run_pipeline(&a, Some(Stage::Cluster)),
        Command::Score(a) => run_pipeline(&a, Some(Stage::Score)),
        Command::Select(a) => run_pipeline(&a, Some(Stage::Select)),
        Command::Gradcheck(a) => run_pipeline(&a, Some(Stage::Gradcheck)),
        Command::Evaluate(a) => run_pipeline(&a, Some(Stage::Evaluate)),
        Command::Report(a) => run_pipeline(&a, Some(Stage::Report)),
        Command::Run(a) => run_pipeline(&a, None),
        Command::ServeScorer { order, smoothing } => {
            let settings = LmSettings { order, smoothing };
            settings.validate()?;
            let mut backend = BuiltinScorer::new(settings, AdaptConfig::default());
            let stdin = io::stdin();
            serve(BufReader::new(stdin.lock()), io::stdout().lock(), &mut backend)
        }
        Command::Synth(a) => synth(&a),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
