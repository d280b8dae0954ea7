use std::fs;
use std::io::{self, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{ArgGroup, Parser, Subcommand};
use upm_core::coupler::{CouplingState, CouplingTopology, Coordinator};
use upm_core::registry::{parse_manifest, REGISTRY_ENV};
use upm_core::{backends, reducer, scheduler, serve, Registry, Result, Runtime, UpmError};

#[derive(Parser)]
#[command(name = "upm", version, about = "Install compute devices and drive them as files")]
struct Cli {
    /// Registry file. Defaults to $UPM_REGISTRY, then the platform config directory.
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
    /// More logging; repeat for more detail.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Install a device from a JSON manifest.
    Install {
        manifest: PathBuf,
        /// Start the device once (plug-in handshake, cluster startup) before installing.
        #[arg(long)]
        probe: bool,
    },
    /// Remove an installed device.
    Uninstall { name: String },
    /// List installed devices: name, class, model, speed.
    List,
    /// Send one job to a device and print the result.
    #[command(group(ArgGroup::new("target").required(true).args(["device", "path"])))]
    Run {
        /// Installed device name.
        #[arg(long)]
        device: Option<String>,
        /// Device path, `upm://<name>[?model=<id>]`.
        path: Option<String>,
        /// Job input file, `-` for stdin.
        #[arg(long = "in", default_value = "-")]
        input: String,
        /// Result output file, `-` for stdout.
        #[arg(long = "out", default_value = "-")]
        output: String,
        /// Seconds to wait for the result.
        #[arg(long, default_value_t = 60.0)]
        timeout: f64,
    },
    /// Reduce a machine description to a single-core machine plus devices.
    Reduce {
        spec: PathBuf,
        /// Also print the rewrite steps.
        #[arg(long)]
        trace: bool,
    },
    /// Assign a job batch to the installed devices.
    Assign {
        #[arg(long)]
        jobs: PathBuf,
        /// Exhaustive search instead of the greedy heuristic.
        #[arg(long)]
        optimal: bool,
    },
    /// Run coupled applications until they finish or stall.
    Couple {
        topology: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        max_steps: u64,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Serve the runtime over the frame protocol.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
    },
}

fn registry_path(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Some(p) = std::env::var_os(REGISTRY_ENV).filter(|p| !p.is_empty()) {
        return Ok(PathBuf::from(p));
    }
    dirs::config_dir()
        .map(|d| d.join("upm").join("registry.json"))
        .ok_or_else(|| UpmError::backend("no config directory; use --registry"))
}

fn read_file(path: &Path, err: fn(String) -> UpmError) -> Result<String> {
    fs::read_to_string(path).map_err(|e| err(format!("read {}: {e}", path.display())))
}

fn read_input(name: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let res = if name == "-" { io::stdin().read_to_end(&mut buf).map(|_| ()) } else { fs::read(name).map(|b| buf = b) };
    res.map_err(|e| UpmError::backend(format!("read {name}: {e}")))?;
    Ok(buf)
}

fn write_output(name: &str, bytes: &[u8]) -> Result<()> {
    let res = if name == "-" {
        let mut out = io::stdout().lock();
        out.write_all(bytes).and_then(|_| out.flush())
    } else {
        fs::write(name, bytes)
    };
    res.map_err(|e| UpmError::backend(format!("write {name}: {e}")))
}

fn print(text: &str) -> Result<()> {
    write_output("-", text.as_bytes())
}

fn execute(cli: Cli) -> Result<()> {
    let open_registry = || -> Result<Arc<Registry>> { Ok(Arc::new(Registry::open(registry_path(cli.registry.clone())?)?)) };
    match cli.command {
        Command::Install { manifest, probe } => {
            let text = read_file(&manifest, UpmError::InvalidManifest)?;
            let d = parse_manifest(&text)?;
            let registry = open_registry()?;
            registry.lookup(&d.name).err().ok_or_else(|| UpmError::AlreadyInstalled(d.name.clone()))?;
            if probe {
                backends::start(&d)?.stop();
            }
            registry.install_descriptor(d)?;
        }
        Command::Uninstall { name } => open_registry()?.uninstall(&name)?,
        Command::List => {
            let mut out = String::new();
            for d in open_registry()?.list() {
                out.push_str(&format!("{}\t{}\t{}\t{}\n", d.name, d.class, d.model_id, d.speed_factor));
            }
            print(&out)?;
        }
        Command::Run { device, path, input, output, timeout } => {
            let path = path.unwrap_or_else(|| format!("upm://{}", device.unwrap_or_default()));
            if !(timeout.is_finite() && timeout >= 0.0) {
                return Err(UpmError::protocol("timeout"));
            }
            let payload = read_input(&input)?;
            let rt = Runtime::new(open_registry()?);
            let mut handle = rt.open(&path)?;
            handle.write(&payload)?;
            let result = handle.read(Some(Duration::from_secs_f64(timeout)));
            handle.close();
            write_output(&output, &result?)?;
        }
        Command::Reduce { spec, trace } => {
            let spec = reducer::SystemSpec::from_json(&read_file(&spec, UpmError::InvalidSpec)?)?;
            print(&reducer::render(&reducer::reduce(&spec)?, trace))?;
        }
        Command::Assign { jobs, optimal } => {
            let jobs = scheduler::parse_jobs(&read_file(&jobs, UpmError::InvalidSpec)?)?;
            let devices = open_registry()?.list();
            let schedule = if optimal {
                scheduler::optimal_assign(&jobs, &devices)?
            } else {
                scheduler::greedy_assign(&jobs, &devices)?
            };
            print(&schedule.render())?;
        }
        Command::Couple { topology, max_steps, report } => {
            let topology = CouplingTopology::from_json(&read_file(&topology, UpmError::InvalidSpec)?)?;
            let rt = Runtime::new(open_registry()?);
            let mut coordinator = Coordinator::start(&rt, &topology)?;
            let outcome = coordinator.run_until_quiescent(max_steps);
            coordinator.shutdown();
            let text = outcome.render();
            if let Some(path) = report {
                fs::write(&path, &text).map_err(|e| UpmError::backend(format!("write {}: {e}", path.display())))?;
            }
            print(&text)?;
            if let CouplingState::Failed { app_id, error } = outcome.state {
                return Err(UpmError::backend(format!("{app_id}: {error}")));
            }
        }
        Command::Serve { listen } => {
            let rt = Runtime::new(open_registry()?);
            let listener = TcpListener::bind(&listen).map_err(|e| UpmError::backend(format!("listen {listen}: {e}")))?;
            let addr = listener.local_addr().map_err(|e| UpmError::backend(e.to_string()))?;
            eprintln!("listening {addr}");
            serve::serve(rt, listener)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
