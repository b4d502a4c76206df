use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crem::disorder::rng::derive_seed;
use crem::experiments::{self, ExperimentPlan, EXPERIMENTS};
use crem::mcmc::{sample_mcmc_replicas, transition_matrix, ChainConfig};
use crem::oracle::{exact_gibbs, tilt_density_check};
use crem::partition::{self, lookahead_depth, PartitionEstimate};
use crem::sequential::{sample_sequential_with, sampler_law, SequentialConfig};
use crem::{CovarianceChoice, CovarianceSpec, CremInstance, VertexId};

#[derive(Parser)]
#[command(name = "crem", version, about = "Gibbs sampling and diagnostics for the continuous random energy model")]
struct Cli {
    /// `brw`, `grem:a0,len1:energy1,...`, a JSON file, or inline JSON
    /// `{"breakpoints": [[x, A], ...]}`.
    #[arg(long, global = true, default_value = "brw")]
    covariance: CovarianceChoice,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition function estimates, as JSON.
    Partition(PartitionArgs),
    /// Draw leaves with one of the samplers, as JSON lines.
    #[command(subcommand)]
    Sample(SampleCommand),
    /// Spectral gap of the tree chain for several seeds, as CSV.
    Spectrum(SpectrumArgs),
    /// Exact small-depth computations.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Registered experiments.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Every vertex up to a depth as CSV (path_bits, depth, Y, X).
    Dump(DumpArgs),
}

#[derive(Args, Clone)]
struct InstanceArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    depth: usize,
}

impl InstanceArgs {
    fn build(&self, covariance: &CovarianceChoice) -> Result<CremInstance> {
        let spec = covariance.resolve(self.depth)?;
        Ok(CremInstance::new(self.seed, self.depth, spec)?)
    }
}

#[derive(Args, Clone)]
#[group(required = true, multiple = false)]
struct BetaArgs {
    /// Inverse temperature.
    #[arg(long)]
    beta: Option<f64>,
    /// Inverse temperature as a multiple of beta_min.
    #[arg(long)]
    beta_mult: Option<f64>,
}

impl BetaArgs {
    fn resolve(&self, spec: &CovarianceSpec<f64>) -> Result<f64> {
        match (self.beta, self.beta_mult) {
            (Some(b), _) => Ok(b),
            (None, Some(x)) => Ok(x * spec.thresholds()?.beta_min),
            (None, None) => bail!("one of --beta or --beta-mult is required"),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionOp {
    /// ln Z_{beta,n}.
    Exact,
    /// ln E Z_{beta,n}.
    Annealed,
    /// ln Z / E Z at level n.
    Normalized,
    /// Normalized partition function of the depth-m subtree below --vertex.
    Subtree,
    /// The lookahead depth m for --epsilon and --delta.
    Lookahead,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long, value_enum)]
    op: PartitionOp,
    #[command(flatten)]
    instance: InstanceArgs,
    #[command(flatten)]
    beta: BetaArgs,
    /// Level; defaults to the depth.
    #[arg(long)]
    n: Option<usize>,
    /// Subtree root as a bit string.
    #[arg(long, default_value = "")]
    vertex: String,
    /// Subtree depth.
    #[arg(long)]
    m: Option<usize>,
    #[command(flatten)]
    accuracy: AccuracyArgs,
}

#[derive(Args, Clone, Copy)]
struct AccuracyArgs {
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Constant multiplying the lookahead formula.
    #[arg(long, default_value_t = 1.0)]
    constant: f64,
}

#[derive(Subcommand)]
enum SampleCommand {
    /// Metropolis chain on the tree.
    Mcmc(McmcArgs),
    /// Sequential sampler with lookahead.
    Seq(SeqArgs),
}

#[derive(Args)]
struct McmcArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[command(flatten)]
    beta: BetaArgs,
    #[arg(long, default_value_t = 1)]
    m0: usize,
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 10)]
    retries: usize,
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    #[arg(long, default_value_t = 0)]
    path_seed: u64,
    /// Multiply depth-N weights by N.
    #[arg(long)]
    level_boost: bool,
}

#[derive(Args)]
struct SeqArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[command(flatten)]
    beta: BetaArgs,
    /// Lookahead depth; derived from --epsilon and --delta when omitted.
    #[arg(long)]
    lookahead: Option<usize>,
    #[command(flatten)]
    accuracy: AccuracyArgs,
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    #[arg(long, default_value_t = 0)]
    path_seed: u64,
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long)]
    depth: usize,
    #[command(flatten)]
    beta: BetaArgs,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// Seed `i` is derived from this base seed and `i`.
    #[arg(long, default_value_t = 1)]
    base_seed: u64,
    #[arg(long, default_value_t = 0)]
    m0: usize,
    #[arg(long)]
    level_boost: bool,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Exact Gibbs measure at level n, as JSON or CSV (bits, prob).
    Gibbs(GibbsArgs),
    /// Total variation distance between a sampler's exact law and the Gibbs
    /// measure.
    Tv(TvArgs),
    /// Change-of-measure density check for the subtree below a Gibbs prefix.
    Tilt(TiltArgs),
}

#[derive(Args)]
struct GibbsArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[command(flatten)]
    beta: BetaArgs,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    csv: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampler {
    Seq,
    Mcmc,
}

#[derive(Args)]
struct TvArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[command(flatten)]
    beta: BetaArgs,
    #[arg(long, value_enum, default_value = "seq")]
    sampler: Sampler,
    /// Lookahead for the sequential sampler.
    #[arg(long, default_value_t = 1)]
    lookahead: usize,
    /// Chain length for the tree chain, started at the root.
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 1)]
    m0: usize,
}

#[derive(Args)]
struct TiltArgs {
    #[command(flatten)]
    beta: BetaArgs,
    /// Prefix depth.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    extra_depth: usize,
    #[arg(long, default_value_t = 10_000)]
    seeds: usize,
    #[arg(long, default_value_t = 1)]
    base_seed: u64,
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Run a named experiment; exit code 0 iff every tolerance passes.
    Run {
        name: String,
        /// JSON plan; missing fields take the experiment's defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for NAME.csv and NAME.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List registered experiments.
    List,
    /// Print an experiment's default plan as JSON.
    Plan { name: String },
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    /// Deepest level to write; defaults to the depth.
    #[arg(long)]
    max_depth: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let cov = &cli.covariance;
    match &cli.command {
        Command::Partition(args) => partition_cmd(cov, args, &mut out)?,
        Command::Sample(SampleCommand::Mcmc(args)) => mcmc_cmd(cov, args, &mut out)?,
        Command::Sample(SampleCommand::Seq(args)) => seq_cmd(cov, args, &mut out)?,
        Command::Spectrum(args) => spectrum_cmd(cov, args, &mut out)?,
        Command::Oracle(OracleCommand::Gibbs(args)) => {
            let inst = args.instance.build(cov)?;
            let beta = args.beta.resolve(inst.spec())?;
            let n = args.n.unwrap_or(inst.depth());
            let dist = exact_gibbs(&inst, n, beta)?;
            if args.csv {
                dist.write_csv(&mut out)?;
            } else {
                let log_z = partition::exact_log_z(&inst, n, beta)?;
                writeln!(out, "{}", json!({"depth": n, "beta": beta, "log_z": log_z, "probs": dist.probs()}))?;
            }
        }
        Command::Oracle(OracleCommand::Tv(args)) => tv_cmd(cov, args, &mut out)?,
        Command::Oracle(OracleCommand::Tilt(args)) => {
            let spec = cov.resolve(args.n + args.extra_depth)?;
            let beta = args.beta.resolve(&spec)?;
            let report = tilt_density_check(&spec, beta, args.n, args.extra_depth, args.seeds, args.base_seed)?;
            writeln!(out, "{}", serde_json::to_string(&json!({"passed": report.passed(4.0), "report": report}))?)?;
        }
        Command::Experiment(cmd) => return experiment_cmd(cmd, &mut out),
        Command::Dump(args) => {
            let inst = args.instance.build(cov)?;
            inst.write_csv(args.max_depth.unwrap_or(inst.depth()), &mut out)?;
        }
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn partition_cmd(cov: &CovarianceChoice, args: &PartitionArgs, out: &mut impl Write) -> Result<()> {
    let inst = args.instance.build(cov)?;
    let beta = args.beta.resolve(inst.spec())?;
    let n = args.n.unwrap_or(inst.depth());
    let mut params = json!({
        "seed": inst.seed(),
        "depth": inst.depth(),
        "beta": beta,
        "covariance": cov.label(),
    });
    let log_value = match args.op {
        PartitionOp::Exact => {
            params["n"] = json!(n);
            PartitionEstimate::exact(&inst, n, beta)?.log_value
        }
        PartitionOp::Annealed => {
            params["n"] = json!(n);
            partition::annealed_log_z(inst.spec(), inst.depth(), n, beta)?
        }
        PartitionOp::Normalized => {
            params["n"] = json!(n);
            PartitionEstimate::normalized(&inst, n, beta)?.log_value
        }
        PartitionOp::Subtree => {
            let v: VertexId = args.vertex.parse()?;
            let m = args.m.context("--op subtree needs --m")?;
            params["vertex"] = json!(v.to_bit_string());
            params["m"] = json!(m);
            PartitionEstimate::subtree(&inst, v, m, beta)?.log_value
        }
        PartitionOp::Lookahead => {
            let a = args.accuracy;
            let m = lookahead_depth(inst.spec(), beta, inst.depth(), a.epsilon, a.delta, a.constant)?;
            params["epsilon"] = json!(a.epsilon);
            params["delta"] = json!(a.delta);
            params["constant"] = json!(a.constant);
            writeln!(out, "{}", json!({"m": m, "params": params}))?;
            return Ok(());
        }
    };
    writeln!(out, "{}", json!({"log_value": log_value, "params": params}))?;
    Ok(())
}

fn mcmc_cmd(cov: &CovarianceChoice, args: &McmcArgs, out: &mut impl Write) -> Result<()> {
    let inst = args.instance.build(cov)?;
    let config = ChainConfig {
        m0: args.m0,
        steps: args.steps,
        max_retries: args.retries,
        beta: args.beta.resolve(inst.spec())?,
        level_boost: args.level_boost,
    };
    for sample in sample_mcmc_replicas(&inst, &config, args.path_seed, args.replicas) {
        let line = match sample {
            Ok(s) => json!({
                "leaf_bits": s.leaf.to_bit_string(),
                "steps_used": s.steps_used,
                "accepted_frac": s.accepted_frac,
            }),
            Err(e) => json!({"leaf_bits": null, "error": e.to_string()}),
        };
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn seq_cmd(cov: &CovarianceChoice, args: &SeqArgs, out: &mut impl Write) -> Result<()> {
    let inst = args.instance.build(cov)?;
    let beta = args.beta.resolve(inst.spec())?;
    let lookahead = match args.lookahead {
        Some(m) => m,
        None => {
            let a = args.accuracy;
            lookahead_depth(inst.spec(), beta, inst.depth(), a.epsilon, a.delta, a.constant)?
        }
    };
    let config = SequentialConfig { lookahead, beta, path_seed: args.path_seed };
    for r in 0..args.replicas {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(args.path_seed, r as u64));
        let s = sample_sequential_with(&inst, &config, &mut rng)?;
        writeln!(out, "{}", json!({"leaf_bits": s.leaf.to_bit_string(), "log_weight_trace": s.log_weight_trace}))?;
    }
    Ok(())
}

fn spectrum_cmd(cov: &CovarianceChoice, args: &SpectrumArgs, out: &mut impl Write) -> Result<()> {
    let spec = cov.resolve(args.depth)?;
    let beta = args.beta.resolve(&spec)?;
    writeln!(out, "seed,N,gap")?;
    for i in 0..args.seeds {
        let seed = derive_seed(args.base_seed, i as u64);
        let inst = CremInstance::new(seed, args.depth, spec.clone())?;
        let gap = transition_matrix(&inst, args.m0.min(args.depth), beta, args.level_boost)?.spectral_gap()?;
        writeln!(out, "{seed},{},{gap:e}", args.depth)?;
    }
    Ok(())
}

fn tv_cmd(cov: &CovarianceChoice, args: &TvArgs, out: &mut impl Write) -> Result<()> {
    let inst = args.instance.build(cov)?;
    let beta = args.beta.resolve(inst.spec())?;
    let gibbs = exact_gibbs(&inst, inst.depth(), beta)?;
    let line = match args.sampler {
        Sampler::Seq => {
            let law = sampler_law(&inst, &SequentialConfig { lookahead: args.lookahead, beta, path_seed: 0 })?;
            json!({"sampler": "seq", "lookahead": args.lookahead, "beta": beta, "tv": law.tv(&gibbs)?})
        }
        Sampler::Mcmc => {
            let view = transition_matrix(&inst, args.m0.min(inst.depth()), beta, false)?;
            let law = view.law_after(args.steps);
            let tv = match view.leaf_conditional(&law) {
                Ok(cond) => Some(cond.tv(&gibbs)?),
                Err(_) => None,
            };
            json!({
                "sampler": "mcmc",
                "steps": args.steps,
                "m0": args.m0,
                "beta": beta,
                "tv": tv,
                "tv_to_stationary": view.tv_to_stationary(&law),
            })
        }
    };
    writeln!(out, "{line}")?;
    Ok(())
}

fn experiment_cmd(cmd: &ExperimentCommand, out: &mut impl Write) -> Result<ExitCode> {
    match cmd {
        ExperimentCommand::List => {
            for name in EXPERIMENTS {
                writeln!(out, "{name}")?;
            }
        }
        ExperimentCommand::Plan { name } => {
            writeln!(out, "{}", serde_json::to_string_pretty(&ExperimentPlan::preset(name)?)?)?;
        }
        ExperimentCommand::Run { name, config, out: dir } => {
            let mut plan = match config {
                Some(path) => ExperimentPlan::from_file(path, Some(name))
                    .with_context(|| format!("reading plan {}", path.display()))?,
                None => ExperimentPlan::preset(name)?,
            };
            if plan.name != *name {
                bail!("plan names experiment {:?}, not {name:?}", plan.name);
            }
            if dir.is_some() {
                plan.out_dir = dir.clone();
            }
            let report = experiments::run(&plan)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            out.flush()?;
            return Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}
