//! Command-line front end and HTTP service for the matchforge engine.

pub mod args;
pub mod commands;
pub mod server;

use std::net::SocketAddr;

use args::{Cli, Command};
use commands::{EXIT_OK, EXIT_USAGE};

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let config = cli.config.as_deref();
    let result = match &cli.command {
        Command::Index(a) => commands::cmd_index(config, a),
        Command::Match(a) => commands::cmd_match(config, a),
        Command::Optimize(a) => commands::cmd_optimize(config, a),
        Command::Evaluate(a) => commands::cmd_evaluate(config, a),
        Command::Ablation(a) => commands::cmd_ablation(config, a),
        Command::Serve(a) => return serve(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn serve(a: &args::ServeArgs) -> i32 {
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return EXIT_USAGE;
        }
    };
    let addr = SocketAddr::new(a.host, a.port);
    match runtime.block_on(server::serve(addr, a.data_dir.clone(), a.ui_dir.clone())) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}
