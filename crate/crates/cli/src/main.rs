//! Command-line harness for the stochprune library.

mod commands;
mod inputs;
mod settings;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{value_parser, Arg, ArgMatches, Command};

use commands::{keys_for, Ctx, COMMANDS};
use settings::{add_flags, Settings};

fn cli() -> Command {
    let mut cmd = Command::new("stochprune")
        .about("Stochastic pruning masks, relaxed mask training and PAC-Bayes certificates")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in COMMANDS {
        let sub = Command::new(spec.name)
            .about(spec.about)
            .arg(Arg::new("config").long("config").value_name("FILE").value_parser(value_parser!(PathBuf)).help("key = value settings file; flags take precedence"))
            .arg(Arg::new("out").long("out").value_name("DIR").value_parser(value_parser!(PathBuf)).help("run directory [default: runs/<command>]"))
            .arg(Arg::new("jobs").long("jobs").value_name("N").value_parser(value_parser!(usize)).default_value("1").help("threads for seed-parallel runs"));
        cmd = cmd.subcommand(add_flags(sub, &keys_for(spec.name)));
    }
    cmd
}

fn run(name: &str, m: &ArgMatches) -> Result<bool> {
    let spec = COMMANDS.iter().find(|c| c.name == name).expect("registered subcommand");
    let keys = keys_for(name);
    let settings = Settings::resolve(&keys, m.get_one::<PathBuf>("config").map(PathBuf::as_path), m)?;
    let ctx = Ctx {
        out: m.get_one::<PathBuf>("out").cloned().unwrap_or_else(|| PathBuf::from("runs").join(name)),
        jobs: *m.get_one::<usize>("jobs").expect("defaulted"),
    };
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    let start = Instant::now();
    let record = (spec.run)(&settings, &ctx)?;
    record.write_dir(&ctx.out)?;
    // A closed pipe (e.g. `| head`) must not turn a finished run into a panic.
    let mut out = std::io::stdout().lock();
    for c in &record.checks {
        let _ = writeln!(out, "{} {} value={} tolerance={}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
    }
    let _ = writeln!(out, "{name}: wrote {} in {:.1}s", ctx.out.display(), start.elapsed().as_secs_f64());
    Ok(record.passed())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
