use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use crpo::io::{self as cio, CandidateFile};
use crpo::losses::{check_gradients, Objective};
use crpo::selectors::{build_dataset, select_all};
use crpo::toylab::{run_comparison, CompareMethod, ToyWorld, TrainerConfig, WorldConfig};
use crpo::{
    EtaMap, GateMode, LogprobNorm, Method, Provenance, SelectionConfig, UtilityMatrix,
    UtilitySource,
};

/// Preference-pair selection over scored translation candidates.
#[derive(Parser)]
#[command(name = "crpo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select preference pairs (or SFT targets) from a candidate file.
    Select(SelectArgs),
    /// Histograms of reward and log-probability for selected pairs.
    Stats(StatsArgs),
    #[command(subcommand)]
    Losses(LossesCommand),
    #[command(subcommand)]
    Toy(ToyCommand),
    #[command(subcommand)]
    Utility(UtilityCommand),
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Additional candidates merged into each source before selection.
    #[arg(long)]
    extra: Option<PathBuf>,
    /// Precomputed utility matrices for the MBR selectors.
    #[arg(long)]
    utility: Option<PathBuf>,
    #[arg(long, default_value_t = 50.0)]
    k_trust: f64,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 0.6)]
    eta_out: f64,
    #[arg(long, default_value_t = 0.5)]
    eta_in: f64,
    #[arg(long, value_enum, default_value_t = Gate::Off)]
    gate: Gate,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 8)]
    rso_samples: usize,
    #[arg(long, default_value_t = 8)]
    top_n: usize,
    #[arg(long, value_enum, default_value_t = Norm::Sum)]
    logprob_norm: Norm,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    /// The same extra pool passed to `select`, if any.
    #[arg(long)]
    extra: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the histograms as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

#[derive(Subcommand)]
enum LossesCommand {
    /// Compare analytic gradients with central finite differences.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Subcommand)]
enum ToyCommand {
    /// Train a tabular policy on pairs from each method and compare gains.
    Compare(CompareArgs),
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated method tags; `random_pair` is the control.
    #[arg(long, value_delimiter = ',', required = true)]
    methods: Vec<String>,
    /// Number of seeds, run as 0..N.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    world_seed: u64,
    #[arg(long, default_value_t = 50)]
    sources: usize,
    #[arg(long, default_value_t = 32)]
    outputs: usize,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = Obj::Dpo)]
    objective: Obj,
}

#[derive(Subcommand)]
enum UtilityCommand {
    /// Built-in pairwise utilities for every source in a candidate file.
    Matrix {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Gate {
    Off,
    LogSpace,
    Probability,
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    Sum,
    PerToken,
}

#[derive(Clone, Copy, ValueEnum)]
enum Obj {
    Dpo,
    Cpo,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: crpo::Error| e.to_string())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_pool(input: &Path, extra: Option<&Path>) -> anyhow::Result<CandidateFile> {
    let primary =
        cio::ingest_candidates(input).with_context(|| format!("reading {}", input.display()))?;
    match extra {
        None => Ok(primary),
        Some(p) => {
            let extra =
                cio::ingest_candidates(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(cio::merge_candidate_files(primary, extra)?)
        }
    }
}

fn cmd_select(a: SelectArgs) -> anyhow::Result<()> {
    let config = SelectionConfig {
        method: a.method,
        k_trust: a.k_trust,
        beta: a.beta,
        eta: EtaMap {
            out_of_english: a.eta_out,
            into_english: a.eta_in,
        },
        gate_mode: match a.gate {
            Gate::Off => GateMode::Off,
            Gate::LogSpace => GateMode::LogSpace,
            Gate::Probability => GateMode::Probability,
        },
        epsilon: a.epsilon,
        rso_samples: a.rso_samples,
        top_n: a.top_n,
        seed: a.seed,
        logprob_norm: match a.logprob_norm {
            Norm::Sum => LogprobNorm::Sum,
            Norm::PerToken => LogprobNorm::PerToken,
        },
    };
    config.validate()?;
    let pool = load_pool(&a.input, a.extra.as_deref())?;
    let matrices = match &a.utility {
        Some(p) => {
            let f = fs::File::open(p).with_context(|| format!("reading {}", p.display()))?;
            Some(cio::read_utility_matrices(BufReader::new(f))?)
        }
        None => None,
    };
    let utility = match &matrices {
        Some(m) => UtilitySource::Precomputed(m),
        None => UtilitySource::Builtin,
    };
    let outcomes = select_all(&pool.sets, &config, utility)?;
    let skipped = outcomes
        .iter()
        .filter(|o| o.skipped_reason.is_some())
        .count();
    let dataset = build_dataset(outcomes, &config, cio::pool_digest(&pool.sets)?);

    let mut out = create(&a.out)?;
    if config.method == Method::QeBest {
        cio::write_sft_targets(&dataset.sft_targets, &mut out)?;
    } else {
        cio::write_pairs(&dataset.pairs, &mut out)?;
    }
    out.flush()?;
    write_provenance(&a.out, &dataset.provenance)?;
    eprintln!(
        "{}: {} sources, {} pairs, {} sft targets, {} skipped",
        config.method,
        pool.sets.len(),
        dataset.pairs.len(),
        dataset.sft_targets.len(),
        skipped
    );
    Ok(())
}

fn write_provenance(pairs_path: &Path, provenance: &Provenance) -> anyhow::Result<()> {
    let mut side = create(&cio::provenance_path(pairs_path))?;
    serde_json::to_writer_pretty(&mut side, provenance)?;
    side.write_all(b"\n")?;
    side.flush()?;
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> anyhow::Result<()> {
    let pool = load_pool(&a.candidates, a.extra.as_deref())?;
    let sidecar = cio::provenance_path(&a.pairs);
    if sidecar.exists() {
        let prov: Provenance = serde_json::from_slice(&fs::read(&sidecar)?)
            .with_context(|| format!("reading {}", sidecar.display()))?;
        let digest = cio::pool_digest(&pool.sets)?;
        if prov.input_digest != digest {
            return Err(crpo::Error::Unresolved(format!(
                "pair file was produced from a different candidate pool (digest {} != {})",
                prov.input_digest, digest
            ))
            .into());
        }
    }
    let f = fs::File::open(&a.pairs).with_context(|| format!("reading {}", a.pairs.display()))?;
    let pairs = cio::read_pairs(BufReader::new(f))?;
    let report = cio::emit_stats(&pairs, &pool.sets, a.bins)?;
    let mut out = create(&a.out)?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    out.write_all(b"\n")?;
    out.flush()?;
    if let Some(p) = &a.csv {
        fs::write(p, cio::stats_csv(&report))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_check_grad(seed: u64, instances: usize, h: f64, tolerance: f64) -> anyhow::Result<()> {
    let checks = check_gradients(seed, instances, h)?;
    println!("{}", serde_json::to_string_pretty(&checks)?);
    let worst = checks
        .iter()
        .map(|c| c.max_relative_error)
        .fold(0.0, f64::max);
    if worst >= tolerance {
        bail!("max relative gradient error {worst:e} exceeds {tolerance:e}");
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> anyhow::Result<()> {
    let methods = a
        .methods
        .iter()
        .map(|m| m.trim().parse::<CompareMethod>())
        .collect::<Result<Vec<_>, _>>()?;
    let world = ToyWorld::generate(&WorldConfig {
        n_sources: a.sources,
        outputs: a.outputs,
        rho: a.rho,
        seed: a.world_seed,
        ..WorldConfig::default()
    })?;
    let mut trainer = TrainerConfig {
        k: a.k,
        lr: a.lr,
        steps: a.steps,
        ..TrainerConfig::default()
    };
    trainer.objective.objective = match a.objective {
        Obj::Dpo => Objective::Dpo,
        Obj::Cpo => Objective::Cpo,
    };
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let report = run_comparison(&world, &methods, &seeds, &trainer)?;
    let mut out = create(&a.out)?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    out.write_all(b"\n")?;
    out.flush()?;
    for m in &report.methods {
        eprintln!(
            "{:<12} gain {:+.5} ± {:.5}",
            m.method, m.mean_gain, m.std_err
        );
    }
    Ok(())
}

fn cmd_utility(input: &Path, out: &Path) -> anyhow::Result<()> {
    let pool =
        cio::ingest_candidates(input).with_context(|| format!("reading {}", input.display()))?;
    let matrices: Vec<(String, UtilityMatrix)> = pool
        .sets
        .iter()
        .map(|s| (s.source_id().to_string(), UtilityMatrix::builtin(s)))
        .collect();
    let mut w = create(out)?;
    cio::write_utility_matrices(&matrices, &mut w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Select(a) => cmd_select(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Losses(LossesCommand::CheckGrad {
            seed,
            instances,
            h,
            tolerance,
        }) => cmd_check_grad(seed, instances, h, tolerance),
        Command::Toy(ToyCommand::Compare(a)) => cmd_compare(a),
        Command::Utility(UtilityCommand::Matrix { input, out }) => cmd_utility(&input, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let validation = err
                .chain()
                .find_map(|e| e.downcast_ref::<crpo::Error>())
                .is_some_and(crpo::Error::is_validation);
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
