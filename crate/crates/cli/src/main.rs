mod corpus;
mod data;
mod net;
mod report;
mod sim;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kvfetch_core::Error;

use report::{Format, ReportBundle};

#[derive(Parser)]
#[command(name = "kvfetch", version, about = "Compress, store, fetch and schedule reusable KV caches")]
struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for reports and generated artifacts.
    #[arg(long, global = true, default_value = "kvfetch-out")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic KV corpora.
    Gen(data::GenArgs),
    /// Search the intra-frame tiling layout over corpora.
    Search(data::SearchArgs),
    /// Quantize and encode a corpus into chunk containers.
    Pack(data::PackArgs),
    /// Decode every chunk of a store and check it.
    Restore(data::RestoreArgs),
    /// Simulate a chunked fetch over a bandwidth trace.
    Simulate(sim::SimulateArgs),
    /// Replay a request trace through the scheduler model.
    Schedule(sim::ScheduleArgs),
    /// Per-axis SSIM and PSNR of a corpus.
    Similarity(data::SimilarityArgs),
    /// Serve a chunk store over TCP.
    Serve(net::ServeArgs),
    /// Fetch chunks from a running server.
    Fetch(net::FetchArgs),
    /// Run gen, search, pack, restore and simulate end to end.
    Repro(data::ReproArgs),
}

pub struct Ctx {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub format: Format,
}

impl Ctx {
    /// Writes the report and prints its summary line.
    pub fn emit(&self, report: &ReportBundle) -> kvfetch_core::Result<()> {
        let path = report.write(&self.out_dir, self.format)?;
        println!("{}: {}", report.command, path.display());
        println!("{}", serde_json::to_string(&report.summary)?);
        Ok(())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::Protocol(_) | Error::Decode { .. } | Error::Json(_) => 4,
        Error::NotFound(_) => 5,
        Error::Timeout(_) => 6,
        Error::InvalidState(_) | Error::Conflict { .. } => 1,
    }
}

fn run(cli: Cli) -> kvfetch_core::Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        out_dir: cli.out_dir,
        format: cli.format,
    };
    let report = match cli.command {
        Command::Gen(a) => data::gen(&a, &ctx)?,
        Command::Search(a) => data::search(&a, &ctx)?,
        Command::Pack(a) => data::pack(&a, &ctx)?,
        Command::Restore(a) => data::restore(&a, &ctx)?,
        Command::Similarity(a) => data::similarity(&a, &ctx)?,
        Command::Repro(a) => data::repro(&a, &ctx)?,
        Command::Simulate(a) => sim::simulate(&a, &ctx)?,
        Command::Schedule(a) => sim::schedule(&a, &ctx)?,
        Command::Serve(a) => return net::serve(&a),
        Command::Fetch(a) => return net::fetch(&a, &ctx),
    };
    ctx.emit(&report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
