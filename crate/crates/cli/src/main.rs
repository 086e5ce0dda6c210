use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use moaecr::ablate::{ablate, component_grid, experts_heads_grid};
use moaecr::embed::{
    embeddings_from_csv, embeddings_to_csv, export_embeddings, pca2, projection_csv, projection_svg, SplitName,
};
use moaecr::error::exit;
use moaecr::gradsuite::{registry, run_suite, CASES_PER_OP};
use moaecr::io::{read_text, write_atomic};
use moaecr::{train, Benchmark, CliError, CliResult, Model, Overrides, Preset, Protocol, RunConfig};
use moaecr_core::datasynth::{generate, write_csv};
use moaecr_core::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(name = "moaecr", version, about = "Train and evaluate MoAE encoders with class regularization")]
struct Cli {
    /// Config file in the sectioned key = value format.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed. Required unless the config sets it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Hyperparameter preset: paper or desk (the default).
    #[arg(long, global = true, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Attack type held out under the loto protocol, default the rare one.
    #[arg(long = "held-type", global = true)]
    held_type: Option<usize>,
    /// intra or loto (leave one attack type out).
    #[arg(long, global = true, value_parser = parse_protocol)]
    protocol: Option<Protocol>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train, evaluate, and write run.json, report.json and checkpoint.bin.
    Train,
    /// Evaluate a checkpoint on the dev-threshold protocol.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run an ablation grid and write ablation.csv plus one record per run.
    Ablate {
        #[arg(long, value_enum, default_value_t = GridKind::Components)]
        grid: GridKind,
        /// Seeds per cell, starting at --seed.
        #[arg(long, default_value_t = 3)]
        repeats: u64,
    },
    /// Write pooled features of one split as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: SplitName,
    },
    /// PCA of an embedding CSV to projection.csv and projection.svg.
    Project {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the gradient-check suite.
    Gradcheck,
    /// Write the synthetic dataset as data.csv.
    GenerateData,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GridKind {
    /// Sublayer and DM/CDM combinations.
    Components,
    /// Experts and heads in {2, 4, 8}.
    ExpertsHeads,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse()
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse()
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    s.parse()
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let text = match &cli.config {
        Some(path) => read_text(path)?,
        None => String::new(),
    };
    let overrides = Overrides {
        seed: cli.seed,
        preset: cli.preset,
        protocol: cli.protocol,
        held_type: cli.held_type,
    };
    RunConfig::parse(&text, &overrides)
}

fn out_dir(cli: &Cli) -> CliResult<&Path> {
    fs::create_dir_all(&cli.out).map_err(|e| CliError::io(&cli.out, e))?;
    Ok(&cli.out)
}

fn load_model(cfg: &RunConfig, path: &Path) -> CliResult<Model> {
    let mut model = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.optim.seed))?;
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let saved = ParamStore::load(bytes.as_slice())?;
    model.store.assign_from(&saved)?;
    Ok(model)
}

fn run(cli: &Cli) -> CliResult<i32> {
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli)?;
            let result = train(&cfg)?;
            let dir = out_dir(cli)?;
            let report = &result.report;
            let mut ckpt = Vec::new();
            result.model.store.save(&mut ckpt)?;
            write_atomic(&dir.join("checkpoint.bin"), &ckpt)?;
            write_atomic(&dir.join("run.json"), result.record.to_json()?.as_bytes())?;
            write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
            println!("{}", report.to_json());
        }
        Command::Evaluate { checkpoint } => {
            let cfg = load_config(cli)?;
            let model = load_model(&cfg, checkpoint)?;
            let report = model.evaluate(&Benchmark::new(&cfg)?)?;
            write_atomic(&out_dir(cli)?.join("report.json"), report.to_json().as_bytes())?;
            println!("{}", report.to_json());
        }
        Command::Ablate { grid, repeats } => {
            let cfg = load_config(cli)?;
            let cells = match grid {
                GridKind::Components => component_grid(&cfg),
                GridKind::ExpertsHeads => experts_heads_grid(&cfg, &[2, 4, 8], &[2, 4, 8]),
            };
            let seeds: Vec<u64> = (0..*repeats).map(|i| cfg.optim.seed + i).collect();
            let dir = out_dir(cli)?;
            let table = ablate(&cells, &seeds, Some(dir))?;
            let csv = table.to_csv();
            write_atomic(&dir.join("ablation.csv"), csv.as_bytes())?;
            print!("{csv}");
            for row in &table.rows {
                for (seed, r) in &row.runs {
                    if let Err(e) = r {
                        eprintln!("cell {:?} seed {seed} failed: {e}", row.name);
                    }
                }
            }
        }
        Command::ExportEmbeddings { checkpoint, split } => {
            let cfg = load_config(cli)?;
            let model = load_model(&cfg, checkpoint)?;
            let ds = export_embeddings(&model, &Benchmark::new(&cfg)?, *split)?;
            write_atomic(&out_dir(cli)?.join("embeddings.csv"), embeddings_to_csv(&ds)?.as_bytes())?;
            println!("{} rows", ds.samples.len());
        }
        Command::Project { input } => {
            let ds = embeddings_from_csv(&read_text(input)?)?;
            let rows: Vec<Vec<f64>> = ds.samples.iter().map(|s| s.features.clone()).collect();
            let proj = pca2(&rows)?;
            let dir = out_dir(cli)?;
            write_atomic(&dir.join("projection.csv"), projection_csv(&ds, &proj).as_bytes())?;
            write_atomic(&dir.join("projection.svg"), projection_svg(&ds, &proj).as_bytes())?;
            println!("variances {} {}", proj.variances[0], proj.variances[1]);
        }
        Command::Gradcheck => {
            let report = run_suite(&registry(), CASES_PER_OP);
            print!("{}", report.render());
            if !report.passed() {
                return Ok(exit::CHECK_FAILED);
            }
        }
        Command::GenerateData => {
            let cfg = load_config(cli)?;
            let ds = generate(&cfg.data.spec)?;
            let mut buf = Vec::new();
            write_csv(&mut buf, ds.dims, &ds.samples)?;
            write_atomic(&out_dir(cli)?.join("data.csv"), &buf)?;
            println!("{} samples", ds.samples.len());
        }
    }
    Ok(exit::SUCCESS)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
