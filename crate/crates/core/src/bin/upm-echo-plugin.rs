//! Reference plug-in: serves one built-in kernel over stdio or TCP.

use std::io::Write;
use std::net::TcpListener;
use std::thread;

use clap::Parser;
use upm_core::backends::external::{plugin_session, PluginOptions};

#[derive(Parser)]
#[command(version, about = "Reference external device plug-in")]
struct Args {
    /// Kernel to run on every request.
    #[arg(long, default_value = "echo")]
    model: String,
    /// Listen on this address instead of using stdin/stdout. The bound
    /// address is printed on the first line of stdout.
    #[arg(long)]
    listen: Option<String>,
    /// Model to announce in HELLO, if different from --model.
    #[arg(long)]
    hello_model: Option<String>,
    /// Answer every request with this error.
    #[arg(long)]
    error: Option<String>,
}

fn main() {
    env_logger::init();
    let args = Args::parse();
    let opts = PluginOptions { model: args.model, hello_model: args.hello_model, fail_with: args.error };
    let outcome = match args.listen {
        None => plugin_session(std::io::stdin().lock(), std::io::stdout().lock(), &opts),
        Some(addr) => {
            let listener = match TcpListener::bind(&addr) {
                Ok(l) => l,
                Err(e) => {
                    eprintln!("upm-echo-plugin: bind {addr}: {e}");
                    std::process::exit(1);
                }
            };
            let mut stdout = std::io::stdout();
            let _ = writeln!(stdout, "{}", listener.local_addr().expect("bound"));
            let _ = stdout.flush();
            for stream in listener.incoming().flatten() {
                let opts = opts.clone();
                thread::spawn(move || {
                    if let Ok(reader) = stream.try_clone() {
                        let _ = plugin_session(reader, stream, &opts);
                    }
                });
            }
            Ok(())
        }
    };
    if let Err(e) = outcome {
        eprintln!("upm-echo-plugin: {e}");
        std::process::exit(1);
    }
}
