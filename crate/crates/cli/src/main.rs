//! Command-line front end: split, train, inspect, recommend, evaluate,
//! synth. All file IO and threading live here; the algorithms are in
//! `tastecf-core`.

mod commands;
mod io_util;
mod opts;

use clap::Parser;

fn main() {
    let cli = opts::Cli::parse();
    if let Err(e) = commands::run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
