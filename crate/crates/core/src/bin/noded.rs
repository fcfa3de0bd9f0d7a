//! Node daemon: serves one role (ca | website | cdn-edge | pck-cache |
//! verification-service) over framed TCP until signaled.
//!
//! Exit codes: 0 signaled shutdown, 64 bad config, 65 vault unavailable,
//! 66 io/listen failure.

use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;

use blindfold::framing::TcpConnector;
use blindfold::noded::{Node, NodeConfig, NodeError};

#[derive(Parser)]
#[command(name = "noded", about = "key vault node daemon", version)]
struct Args {
    /// Path to the node config file (flat key=value)
    #[arg(long)]
    config: std::path::PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();

    let config = match NodeConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("noded: {e}");
            return ExitCode::from(64);
        }
    };
    let listen = config.listen.clone();
    let role = config.role;

    let node = match Node::from_config(config, Arc::new(TcpConnector::default())) {
        Ok(n) => Arc::new(n),
        Err(NodeError::BadConfig(m)) => {
            eprintln!("noded: bad config: {m}");
            return ExitCode::from(64);
        }
        Err(NodeError::VaultLocked(m)) => {
            eprintln!("noded: vault unavailable: {m}");
            return ExitCode::from(65);
        }
        Err(NodeError::Io(e)) => {
            eprintln!("noded: {e}");
            return ExitCode::from(66);
        }
    };

    let listener = match std::net::TcpListener::bind(&listen) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("noded: cannot listen on {listen}: {e}");
            return ExitCode::from(66);
        }
    };
    let addr = listener.local_addr().expect("listener has an address");
    // parseable readiness line for tooling and tests
    println!("LISTENING {addr}");
    use std::io::Write as _;
    let _ = std::io::stdout().flush();
    log::info!("role {} listening on {addr}", role.name());

    node.serve_listener(listener)
}
