use clap::Parser;
use csl_core::cli::{run_cli, CliArgs, EXIT_CONFIG};

fn main() {
    let args = match CliArgs::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    std::process::exit(run_cli(&args));
}
