use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mobsim::cli::{cmd_compare, cmd_gen, cmd_run, CliError, ConfigOverrides, GenRequest};
use mobsim::harness::{BenignKind, SpoilerParams};
use mobsim::Model;

#[derive(Parser)]
#[command(name = "mobsim", version, about = "Memory order buffer dependence-prediction simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trace file.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Simulate one model on a trace and write CSV/JSON results.
    Run(RunArgs),
    /// Compare run summaries produced from the same trace.
    Compare {
        #[arg(required = true, num_args = 1..)]
        summaries: Vec<PathBuf>,
        /// Also write the comparison as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, default_value_t = 128)]
    pages: usize,
    #[arg(long, default_value_t = 20)]
    rounds: usize,
    #[arg(long, default_value_t = 56)]
    window: usize,
    /// Number of measured pages planted to alias on PA bits [19:12].
    #[arg(long, default_value_t = 8)]
    aliased: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

impl AttackArgs {
    fn params(&self) -> Result<SpoilerParams, CliError> {
        Ok(SpoilerParams::with_aliased_count(self.pages, self.rounds, self.window, self.aliased, self.seed)?)
    }
}

#[derive(Subcommand)]
enum GenCommand {
    /// Store-window fill plus timed probe loads.
    Spoiler(AttackArgs),
    /// Attack rounds interleaved with random benign traffic.
    Stress {
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long, default_value_t = 64)]
        benign_per_round: usize,
    },
    /// Synthetic non-attack workload.
    Benign {
        #[arg(long, value_parser = clap::value_parser!(BenignKind))]
        kind: BenignKind,
        #[arg(long)]
        ops: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(Model))]
    model: Model,
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sab_capacity: Option<usize>,
    #[arg(long)]
    mask_width: Option<usize>,
    #[arg(long)]
    base_load: Option<u64>,
    #[arg(long)]
    forward: Option<u64>,
    #[arg(long)]
    alias4k_stall: Option<u64>,
    #[arg(long)]
    squash_penalty: Option<u64>,
    #[arg(long)]
    resolve_delay: Option<u64>,
    #[arg(long)]
    drain_delay: Option<u64>,
    #[arg(long)]
    max_reissues: Option<u32>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(g) => {
            let (request, out) = match g {
                GenCommand::Spoiler(a) => (GenRequest::Spoiler { params: a.params()? }, a.out),
                GenCommand::Stress { attack, benign_per_round } => {
                    (GenRequest::Stress { params: attack.params()?, benign_per_round }, attack.out)
                }
                GenCommand::Benign { kind, ops, seed, out } => (GenRequest::Benign { kind, ops, seed }, out),
            };
            let trace = cmd_gen(&request, &out)?;
            println!("wrote {} ops to {}", trace.len(), out.display());
        }
        Command::Run(r) => {
            let overrides = ConfigOverrides {
                sab_capacity: r.sab_capacity,
                mask_width: r.mask_width,
                base_load: r.base_load,
                forward: r.forward,
                alias4k_stall: r.alias4k_stall,
                squash_penalty: r.squash_penalty,
                store_resolve_delay: r.resolve_delay,
                drain_delay: r.drain_delay,
                max_reissues: r.max_reissues,
            };
            let config = overrides.apply(r.model, r.seed);
            let output = cmd_run(&r.trace, &config, &r.out)?;
            let s = &output.summary;
            println!(
                "{}: cycles={} loads={} misspeculations={} violations={} attacker_stalls={} remask={}",
                s.model, s.total_cycles, s.total_loads, s.misspeculations, s.spoiler_violations, s.attacker_stalls, s.remask_events
            );
            if let Some(d) = &s.detection {
                println!("{}: detection accuracy={:.4} tpr={:.4} fpr={:.4}", s.model, d.accuracy, d.tpr, d.fpr);
            }
        }
        Command::Compare { summaries, out } => {
            let cmp = cmd_compare(&summaries, out.as_deref())?;
            print!("{}", cmp.render_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
