// SPDX-License-Identifier: Apache-2.0

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use tale_core::error::ErrorCode;
use tale_server::{start, ServerConfig};

/// Tale engine REST service.
#[derive(Parser, Debug)]
#[command(name = "wt-server", version)]
struct Args {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides `listen` from the file.
    #[arg(long)]
    listen: Option<SocketAddr>,
    /// Overrides `data_dir` from the file.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let mut config = match &args.config {
        Some(p) => match ServerConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error[{}]: {e}", e.code());
                return ExitCode::from(2);
            }
        },
        None => ServerConfig::default(),
    };
    if let Some(l) = args.listen {
        config.listen = l;
    }
    if let Some(d) = args.data_dir {
        config.data_dir = Some(d);
    }
    let handle = match start(&config) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            return ExitCode::FAILURE;
        }
    };
    println!("wt-server listening on {}", handle.url());
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .expect("signal runtime");
    rt.block_on(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    log::info!("shutting down");
    match handle.shutdown() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
