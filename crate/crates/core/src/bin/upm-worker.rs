//! One rank of a cluster device. Started by the runtime, not by hand.

use clap::Parser;

#[derive(Parser)]
#[command(version, about = "Cluster device rank process")]
struct Args {
    /// Router address of the owning runtime.
    #[arg(long)]
    connect: String,
    #[arg(long)]
    rank: u32,
    #[arg(long)]
    size: u32,
    /// Cluster token presented in the rank's HELLO.
    #[arg(long)]
    token: String,
}

fn main() {
    env_logger::init();
    let args = Args::parse();
    if let Err(e) = upm_core::backends::worker_main(&args.connect, args.rank, args.size, &args.token) {
        eprintln!("upm-worker rank {}: {e}", args.rank);
        std::process::exit(1);
    }
}
